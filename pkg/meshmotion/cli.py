"""Console script for meshmotion."""
import argparse
import logging
import sys
from pathlib import Path

from meshmotion import logger
from meshmotion.config import PATH_CONFIG, SEED_ENV_VAR, ConfigError, \
    InvalidArgument, MeshMotionException
from meshmotion.evalkit import evaluate_run, static_trajectories, \
    ablation_harness, loss_ablation_grid, latent_size_grid, write_report, \
    write_training_report
from meshmotion.geomcore import read_obj
from meshmotion.runner import train_vae, train_diffusion, infer, \
    refine_trajectory, drive_mesh, check_vae_quality
from meshmotion.toydata import build_dataset, load_dataset
from meshmotion.utils import is_writable, load_run_config, parse_overrides, \
    save_trajectory, load_trajectory

EPILOG = (f'Seeds: --seed overrides the {SEED_ENV_VAR} environment variable, '
          f'which overrides the seed of the config file. Exit codes: 0 on '
          f'success, 1 on invalid arguments or configuration, 2 on runtime '
          f'failure.')

ABLATION_GRIDS = {
    'loss': loss_ablation_grid,
    'latent': latent_size_grid,
}


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: error: {message}\n')


def _add_common(parser, with_output=True):
    optional = parser.add_argument_group('optional arguments')
    optional.add_argument('-h', '--help', action='help',
                          default=argparse.SUPPRESS,
                          help='show this help message and exit')
    optional.add_argument('--config', type=str,
                          default=str(PATH_CONFIG['desk_config']),
                          help='path to a section.key = value config file '
                               '(default: packaged desk config)')
    optional.add_argument('--set', action='append', default=[],
                          metavar='SECTION.KEY=VALUE', dest='overrides',
                          help='override one config value, repeatable')
    optional.add_argument('--seed', type=int, default=None,
                          help=f'root seed, overrides {SEED_ENV_VAR} and the '
                               f'config')
    optional.add_argument('-v', '--verbose', action='store_true',
                          help='allow verbose output on console')
    if with_output:
        optional.add_argument('-o', '--output-dir', type=str,
                              help='directory for outputs (default: '
                                   'output_dir of the config)')
    return parser


def get_parser():
    """Parser for command line interface."""
    parser = ArgumentParser(
        prog='meshmotion',
        description='Video-driven animation of static meshes with a '
                    'latent motion diffusion model',
        epilog=EPILOG, add_help=False)
    parser.add_argument('-h', '--help', action='help',
                        default=argparse.SUPPRESS,
                        help='show this help message and exit')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    def add(name, help_text, with_output=True):
        sub = commands.add_parser(name, help=help_text, description=help_text,
                                  epilog=EPILOG, add_help=False)
        return _add_common(sub, with_output)

    sub = add('synth-data', 'synthesize, render and filter the toy dataset')
    sub.set_defaults(func=run_synth_data)

    sub = add('train-vae', 'train the motion VAE')
    sub.set_defaults(func=run_train_vae)

    sub = add('train-diff', 'train the latent diffusion model')
    required = sub.add_argument_group('required arguments')
    required.add_argument('--vae-checkpoint', required=True,
                          help='VAE checkpoint the latents are encoded with')
    sub.set_defaults(func=run_train_diffusion)

    sub = add('infer', 'animate a mesh from a folder of video frames')
    required = sub.add_argument_group('required arguments')
    required.add_argument('--mesh', required=True, help='ASCII OBJ mesh')
    required.add_argument('--frames', required=True,
                          help='folder of PNG frames, read in name order')
    required.add_argument('--vae-checkpoint', required=True)
    required.add_argument('--diff-checkpoint', required=True)
    sub.add_argument('--steps', type=int, default=None,
                     help='sampler steps (default: diffusion.steps)')
    sub.add_argument('--drive', action='store_true',
                     help='also refine and export the animated mesh')
    sub.add_argument('--delta', type=float, default=None,
                     help='refinement threshold in scene units (default: '
                          'delta of the config)')
    sub.set_defaults(func=run_infer)

    sub = add('refine', 'hold points that moved less than delta',
              with_output=False)
    required = sub.add_argument_group('required arguments')
    required.add_argument('--trajectory', required=True,
                          help='TRJ1 trajectory file')
    required.add_argument('--out', required=True,
                          help='refined TRJ1 trajectory file')
    sub.add_argument('--delta', type=float, default=None,
                     help='refinement threshold in scene units (default: '
                          'delta of the config)')
    sub.set_defaults(func=run_refine)

    sub = add('drive', 'export one OBJ per trajectory frame')
    required = sub.add_argument_group('required arguments')
    required.add_argument('--mesh', required=True, help='ASCII OBJ mesh')
    required.add_argument('--trajectory', required=True,
                          help='TRJ1 trajectory file')
    sub.set_defaults(func=run_drive)

    sub = add('eval', 'score trajectories against the toy dataset')
    sub.add_argument('--trajectories', type=str, default=None,
                     help='folder of <asset>.trj files, one per asset')
    sub.add_argument('--static', action='store_true',
                     help='score the frame-0-everywhere baseline instead')
    sub.add_argument('--workers', type=int, default=1,
                     help='processes scoring assets in parallel')
    sub.set_defaults(func=run_eval)

    sub = add('ablate', 'train and score a named VAE ablation grid')
    sub.add_argument('--grid', choices=sorted(ABLATION_GRIDS),
                     default='loss', help='ablation grid (default: loss)')
    sub.add_argument('--seeds', type=int, nargs='+', default=None,
                     help='seeds per case (default: the resolved seed)')
    sub.set_defaults(func=run_ablate)
    return parser


def set_verbosity(verbose):
    level = logging.INFO if verbose else logging.WARNING
    logger.setLevel(level)
    for handler in logger.handlers:
        if isinstance(handler, logging.StreamHandler) \
                and not isinstance(handler, logging.FileHandler):
            handler.setLevel(level)


def parse_args(argv=None):
    """Validates command line arguments and returns parsed arguments"""
    parser = get_parser()
    args = parser.parse_args(argv)
    set_verbosity(args.verbose)
    args.config_obj = load_run_config(args.config,
                                      parse_overrides(args.overrides),
                                      args.seed)
    output_dir = getattr(args, 'output_dir', None)
    if output_dir is not None:
        args.config_obj.output_dir = output_dir
    return args


def _output_dir(config):
    output_dir = Path(config.output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        logger.error(f'Unable to create folder {output_dir} for saving '
                     f'outputs')
        raise exc
    if not is_writable(output_dir):
        raise OSError(f'Output Folder {output_dir} is not writable')
    return output_dir


def check_path(path, arg_name):
    """Validates if the path is a valid file"""
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f'Expected valid file for {arg_name} '
                                f'argument, Got {path}')


def run_synth_data(args):
    config = args.config_obj
    out_dir = args.output_dir or config.data.dataset_dir
    manifest = build_dataset(config, out_dir=out_dir, verbose=args.verbose)
    passed = sum(r['status'] == 'pass' for r in manifest)
    print(f'{passed}/{len(manifest)} assets accepted into {out_dir}')
    return 0


def run_train_vae(args):
    config = args.config_obj
    output_dir = _output_dir(config)
    result = train_vae(config, output_dir, verbose=args.verbose)
    print(f'best checkpoint {result.checkpoint} (validation chamfer '
          f'{result.best_score:.6f}), metrics {result.metrics}')
    quality = check_vae_quality(config, result.checkpoint)
    print(f"reconstruction chamfer {quality['reconstruction_chamfer']:.6f}, "
          f"identity chamfer {quality['identity_chamfer']:.6f}")
    report = write_training_report(result.history, output_dir, 'vae',
                                   config)
    print(f'training report {report}')
    return 0


def run_train_diffusion(args):
    check_path(args.vae_checkpoint, '--vae-checkpoint')
    config = args.config_obj
    output_dir = _output_dir(config)
    result = train_diffusion(config, args.vae_checkpoint, output_dir,
                             verbose=args.verbose)
    print(f'best checkpoint {result.checkpoint} (validation loss '
          f'{result.best_score:.6f}), metrics {result.metrics}')
    report = write_training_report(result.history, output_dir, 'diffusion',
                                   config)
    print(f'training report {report}')
    return 0


def run_infer(args):
    check_path(args.mesh, '--mesh')
    check_path(args.vae_checkpoint, '--vae-checkpoint')
    check_path(args.diff_checkpoint, '--diff-checkpoint')
    config = args.config_obj
    output_dir = _output_dir(config)
    result = infer(args.mesh, args.frames, args.vae_checkpoint,
                   args.diff_checkpoint, steps=args.steps, seed=config.seed,
                   device=config.device, verbose=args.verbose)
    raw = save_trajectory(output_dir / 'raw_trajectory.trj',
                          result.trajectory)
    print(f'{result.trajectory.shape[0]} frames written to {raw}')
    if args.drive:
        delta = config.delta if args.delta is None else args.delta
        refined = refine_trajectory(result.trajectory, delta)
        drive_mesh(result.mesh, refined, output_dir)
        print(f'animated mesh exported to {output_dir}')
    return 0


def run_refine(args):
    delta = args.config_obj.delta if args.delta is None else args.delta
    refined = refine_trajectory(load_trajectory(args.trajectory), delta)
    save_trajectory(args.out, refined)
    print(f'refined trajectory written to {args.out}')
    return 0


def run_drive(args):
    check_path(args.mesh, '--mesh')
    output_dir = _output_dir(args.config_obj)
    meshes = drive_mesh(read_obj(args.mesh), load_trajectory(args.trajectory),
                        output_dir)
    print(f'{len(meshes)} frames exported to {output_dir}')
    return 0


def run_eval(args):
    config = args.config_obj
    dataset = load_dataset(config.data.dataset_dir)
    if args.static:
        trajectories = static_trajectories(dataset)
    elif args.trajectories is not None:
        folder = Path(args.trajectories)
        if not folder.is_dir():
            raise FileNotFoundError(f'Expected a folder for --trajectories, '
                                    f'Got {folder}')
        trajectories = {f.stem: load_trajectory(f)
                        for f in sorted(folder.glob('*.trj'))}
    else:
        raise InvalidArgument('Provide --trajectories or --static')
    report = evaluate_run(trajectories, dataset, config,
                          workers=args.workers, verbose=args.verbose)
    written = write_report(report, _output_dir(config))
    aggregate = report.aggregate()
    print(f"psnr {aggregate['psnr']:.3f} ssim {aggregate['ssim']:.4f} "
          f"chamfer {aggregate['chamfer']:.6f}, report {written['table']}")
    return 0


def run_ablate(args):
    config = args.config_obj
    grid = ABLATION_GRIDS[args.grid](config)
    seeds = args.seeds or [config.seed]
    output_dir = _output_dir(config)
    report = ablation_harness(grid, seeds, output_dir, verbose=args.verbose)
    written = write_report(report, output_dir, name=f'ablation_{args.grid}')
    print(f'ablation table written to {written["table"]}')
    return 0


def cli(argv=None):
    """
    Console script for meshmotion. Returns the exit code.
    """
    try:
        args = parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except (InvalidArgument, ConfigError, FileNotFoundError) as exc:
        logger.debug('Invalid input', exc_info=True)
        print(f'meshmotion: error: {exc}', file=sys.stderr)
        return 1
    except (MeshMotionException, OSError, RuntimeError) as exc:
        logger.debug('Runtime failure', exc_info=True)
        print(f'meshmotion: failed: {exc}', file=sys.stderr)
        return 2


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
