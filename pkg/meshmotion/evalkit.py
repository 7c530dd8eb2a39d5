"""
Appearance and geometry metrics, run evaluation and the VAE ablation
harness.
"""
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from meshmotion import logger
from meshmotion.config import RunConfig, InvalidArgument, report_fpath
from meshmotion.formatter import HtmlFormatter, TextFormatter, \
    TrainingFormatter
from meshmotion.geomcore import chamfer_distance
from meshmotion.parallel_utils import parallel_map
from meshmotion.plotting import FrameMetricPlot, LossCurvePlot
from meshmotion.runner import train_vae, load_vae, prepare_samples, \
    reconstruct_vertices
from meshmotion import toydata
from meshmotion.toydata import AnimatedAsset, StoredAsset, load_dataset, \
    render_views, stored_to_animated
from meshmotion.utils import write_kv_records

PSNR_CAP = 99.0

# Full-scale reference rows, (PSNR, CD)
LOSS_REFERENCE = {
    'mse': (23.131, 0.030),
    'dis': (23.739, 0.023),
    'mse+dis': (24.046, 0.019),
}
LATENT_REFERENCE = {
    'c128_c0_8': (22.366, 0.039),
    'c128_c0_16': (22.897, 0.031),
    'c128_c0_32': (23.417, 0.025),
    'c512_c0_8': (23.335, 0.026),
    'c512_c0_16': (23.852, 0.021),
    'c512_c0_32': (24.046, 0.019),
}
LPIPS_NOTE = 'LPIPS is not computed'


def psnr(img_a, img_b, max_value: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in decibels. Identical inputs give
    ``PSNR_CAP``.

    Raises
    ------
    InvalidArgument
        If shapes differ or max_value is not positive
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f'Image shapes differ: {a.shape} vs {b.shape}')
    if max_value <= 0:
        raise InvalidArgument(f'max_value must be positive, Got {max_value}')
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value ** 2 / mse))


def ssim(img_a, img_b, data_range: float = 1.0) -> float:
    """Mean local SSIM, the same measure the dataset motion filter uses"""
    return toydata.ssim(img_a, img_b, data_range=data_range)


@dataclass
class FrameScore:
    t: int
    psnr: float
    ssim: float
    chamfer: float


@dataclass
class AssetScore:
    asset_id: str
    frames: List[FrameScore]

    def mean(self, metric) -> float:
        return float(np.mean([getattr(f, metric) for f in self.frames]))

    @property
    def psnr(self):
        return self.mean('psnr')

    @property
    def ssim(self):
        return self.mean('ssim')

    @property
    def chamfer(self):
        return self.mean('chamfer')


@dataclass
class AblationRow:
    case: str
    seed: int
    psnr: float
    chamfer: float
    reference_psnr: float = float('nan')
    reference_chamfer: float = float('nan')
    directional_holds: Optional[bool] = None


@dataclass
class EvalReport:
    """Per-asset scores, their aggregate, the config echo and ablation rows"""
    assets: List[AssetScore] = field(default_factory=list)
    config: List[Tuple[str, str]] = field(default_factory=list)
    ablation: List[AblationRow] = field(default_factory=list)
    notes: List[str] = field(default_factory=lambda: [LPIPS_NOTE])

    def aggregate(self) -> Dict[str, float]:
        if not self.assets:
            return {}
        return {metric: float(np.mean([getattr(a, metric)
                                       for a in self.assets]))
                for metric in ('psnr', 'ssim', 'chamfer')}

    def asset_records(self) -> List[Dict[str, object]]:
        return [{'asset': a.asset_id, 'psnr': a.psnr, 'ssim': a.ssim,
                 'chamfer': a.chamfer} for a in self.assets]

    def frame_records(self) -> List[Dict[str, object]]:
        return [{'asset': a.asset_id, 't': f.t, 'psnr': f.psnr,
                 'ssim': f.ssim, 'chamfer': f.chamfer}
                for a in self.assets for f in a.frames]

    def ablation_records(self) -> List[Dict[str, object]]:
        return [{'case': r.case, 'seed': r.seed, 'psnr': r.psnr,
                 'chamfer': r.chamfer, 'ref_psnr': r.reference_psnr,
                 'ref_chamfer': r.reference_chamfer,
                 'directional_holds': r.directional_holds}
                for r in self.ablation]


def score_asset(stored: StoredAsset, trajectory) -> AssetScore:
    """
    Renders the inferred animation from the asset's cameras and scores
    every frame against the ground truth render and vertex positions.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.shape != stored.vertex_frames.shape:
        raise InvalidArgument(f'{stored.asset_id}: trajectory '
                              f'{trajectory.shape} does not match ground '
                              f'truth {stored.vertex_frames.shape}')
    truth = stored_to_animated(stored)
    inferred = AnimatedAsset(rest_mesh=truth.rest_mesh.with_vertices(
                                 trajectory[0]), frames=trajectory,
                             vertex_colors=stored.colors, kind=stored.kind,
                             seed=stored.seed)
    frames = []
    for t in range(truth.n_frames):
        expected = render_views(truth, t, stored.cameras).images
        actual = render_views(inferred, t, stored.cameras).images
        frames.append(FrameScore(
            t=t, psnr=float(np.mean([psnr(a, e)
                                     for a, e in zip(actual, expected)])),
            ssim=float(np.mean([ssim(a, e)
                                for a, e in zip(actual, expected)])),
            chamfer=chamfer_distance(trajectory[t],
                                     stored.vertex_frames[t])))
    return AssetScore(asset_id=stored.asset_id, frames=frames)


def evaluate_run(trajectories: Dict[str, np.ndarray],
                 dataset: Union[str, Path, Sequence[StoredAsset]],
                 config: RunConfig = None, workers: int = 1,
                 verbose: bool = False) -> EvalReport:
    """
    Scores inferred trajectories against a ground-truth dataset.

    Parameters
    ----------
    trajectories : dict
        asset id -> T x V x 3 vertex positions
    dataset : str, Path or list of StoredAsset
        ground truth dataset folder or its loaded assets
    config : RunConfig
        echoed into the report
    workers : int
        processes scoring assets in parallel

    Returns
    -------
    EvalReport

    Raises
    ------
    InvalidArgument
        If an asset id is missing on either side
    """
    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)
    truth = {a.asset_id: a for a in dataset}
    missing = sorted(set(truth) - set(trajectories))
    unknown = sorted(set(trajectories) - set(truth))
    if missing or unknown:
        raise InvalidArgument(f'Asset ids disagree. Missing trajectories: '
                              f'{missing}, unknown assets: {unknown}')
    ids = sorted(truth)
    scores = parallel_map(score_asset,
                          [(truth[i], trajectories[i]) for i in ids],
                          workers=workers, desc='Scoring assets',
                          verbose=verbose)
    report = EvalReport(assets=scores,
                        config=config.to_records() if config else [])
    logger.info(f'Evaluated {len(ids)} assets: {report.aggregate()}')
    return report


def static_trajectories(dataset: Sequence[StoredAsset]):
    """Frame 0 repeated over time, the no-motion baseline"""
    return {a.asset_id: np.repeat(a.vertex_frames[:1], a.n_frames, axis=0)
            for a in dataset}


def loss_ablation_grid(base: RunConfig = None) -> List[Tuple[str, RunConfig]]:
    """MSE only, distance only and both, everything else shared"""
    base = base or RunConfig()
    return [
        ('mse', replace(base, vae=replace(base.vae, dis_weight=0.0))),
        ('dis', replace(base, vae=replace(base.vae, mse_weight=0.0))),
        ('mse+dis', replace(base, vae=replace(base.vae))),
    ]


def latent_size_grid(base: RunConfig = None,
                     widths=(128, 512),
                     channels=(8, 16, 32)) -> List[Tuple[str, RunConfig]]:
    """Every VAE width against every latent width"""
    base = base or RunConfig()
    grid = []
    for width in widths:
        for c0 in channels:
            config = replace(
                base, vae=replace(base.vae, width=width, latent_channels=c0),
                diffusion=replace(base.diffusion, latent_channels=c0))
            grid.append((f'c{width}_c0_{c0}', config))
    return grid


def expected_winner(cases: Sequence[str]) -> Optional[str]:
    """The case with the lowest full-scale Chamfer, None without references"""
    reference = {**LOSS_REFERENCE, **LATENT_REFERENCE}
    known = [c for c in dict.fromkeys(cases) if c in reference]
    if len(known) < 2:
        return None
    return min(known, key=lambda c: reference[c][1])


def directional_verdicts(rows: Sequence[AblationRow]
                         ) -> Dict[int, Optional[bool]]:
    """
    Per seed, whether the case that wins at full scale reaches a Chamfer
    no larger than every other case trained with that seed. None when the
    grid has no reference winner or the seed misses it.
    """
    winner = expected_winner([r.case for r in rows])
    verdicts = {}
    for seed in dict.fromkeys(r.seed for r in rows):
        picked = {r.case: r.chamfer for r in rows if r.seed == seed}
        if winner is None or winner not in picked or len(picked) < 2:
            verdicts[seed] = None
            continue
        verdicts[seed] = all(picked[winner] <= value
                             for case, value in picked.items()
                             if case != winner)
    return verdicts


def directional_fraction(rows: Sequence[AblationRow]) -> float:
    """Share of seeds whose verdict holds, NaN without verdicts"""
    decided = [v for v in directional_verdicts(rows).values()
               if v is not None]
    if not decided:
        return float('nan')
    return sum(decided) / len(decided)


def ablation_harness(grid: Sequence[Tuple[str, RunConfig]],
                     seeds: Sequence[int] = (0,), output_dir=None,
                     verbose: bool = False) -> EvalReport:
    """
    Trains one VAE per (case, seed), reconstructs every vertex of every
    asset and scores the reconstructions like an inferred run.

    Parameters
    ----------
    grid : list of (str, RunConfig)
        named cases, identical apart from the ablated setting
    seeds : list of int
        seeds each case is trained with
    output_dir : str or Path
        root of the per-case run folders

    Returns
    -------
    EvalReport
        ``ablation`` rows per (case, seed) with full-scale references and
        whether the full-scale winner also wins that seed
    """
    if not grid:
        raise InvalidArgument('The ablation grid is empty')
    output_dir = Path(output_dir if output_dir is not None
                      else grid[0][1].output_dir)
    datasets = {cfg.data.dataset_dir for _, cfg in grid}
    if len(datasets) != 1:
        raise InvalidArgument(f'Ablation cases must share one dataset, '
                              f'Got {sorted(datasets)}')
    assets = load_dataset(datasets.pop())
    reference = {**LOSS_REFERENCE, **LATENT_REFERENCE}
    report = EvalReport(config=grid[0][1].to_records())
    for name, case in grid:
        for seed in seeds:
            config = replace(case, seed=int(seed))
            run_dir = output_dir / f'{name}_seed{seed}'
            logger.info(f'Ablation case {name}, seed {seed}')
            result = train_vae(config, output_dir=run_dir, verbose=verbose)
            model, _ = load_vae(result.checkpoint, config.device)
            samples = prepare_samples(assets, config.data.n_points, seed)
            trajectories = {
                a.asset_id: reconstruct_vertices(model, a, s, config.device)
                for a, s in zip(assets, samples)}
            scored = evaluate_run(trajectories, assets)
            agg = scored.aggregate()
            ref_psnr, ref_cd = reference.get(name,
                                             (float('nan'), float('nan')))
            report.ablation.append(AblationRow(
                case=name, seed=int(seed), psnr=agg['psnr'],
                chamfer=agg['chamfer'], reference_psnr=ref_psnr,
                reference_chamfer=ref_cd))
    verdicts = directional_verdicts(report.ablation)
    for row in report.ablation:
        row.directional_holds = verdicts[row.seed]
    logger.info(f'Directional verdicts per seed: {verdicts}')
    return report


def case_means(rows: Sequence[AblationRow]) -> Dict[str, Dict[str, float]]:
    """Mean PSNR and Chamfer per case over seeds, in first-seen order"""
    means = {}
    for case in dict.fromkeys(r.case for r in rows):
        picked = [r for r in rows if r.case == case]
        means[case] = {'psnr': float(np.mean([r.psnr for r in picked])),
                       'chamfer': float(np.mean([r.chamfer
                                                 for r in picked]))}
    return means


def write_report(report: EvalReport, output_dir, name: str = 'eval',
                 html: bool = True) -> Dict[str, Path]:
    """
    Writes the key-value records, a text table and, optionally, an HTML
    page with per-frame curves.

    Returns
    -------
    dict
        kind -> written path
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    records = report.asset_records() + report.ablation_records()
    aggregate = report.aggregate()
    if aggregate:
        records.append({'asset': 'aggregate', **aggregate})
    written = {'records': write_kv_records(
        report_fpath(output_dir, name), records)}
    if report.assets:
        written['frames'] = write_kv_records(
            report_fpath(output_dir, f'{name}_frames'),
            report.frame_records())

    means = case_means(report.ablation)
    text = TextFormatter(report_fpath(output_dir, f'{name}_table'))
    text.collect_results(report, aggregate=aggregate, means=means)
    written['table'] = text.render()

    if html:
        page = HtmlFormatter(report_fpath(output_dir, name, ext='html'))
        page.collect_results(report, aggregate=aggregate, means=means)
        plots = {}
        for metric in ('psnr', 'ssim', 'chamfer'):
            if report.assets:
                plot = FrameMetricPlot(metric)
                plot.plot(report.frame_records())
                plots[metric] = plot
        page.collect_plots(**plots)
        written['html'] = page.render()
    return written


def write_training_report(history: Sequence[Dict[str, object]], output_dir,
                          stage: str, config: RunConfig = None
                          ) -> Optional[Path]:
    """
    HTML page with the train and eval curves of a metrics log.

    Parameters
    ----------
    history : list of dict
        records of ``TrainResult.history`` or of a metrics log file
    stage : str
        ``vae`` or ``diffusion``, names the page
    """
    plots = {}
    for kind in ('train', 'eval'):
        keys = [k for r in history if r.get('kind') == kind for k in r
                if k not in ('kind', 'step', 'lr')]
        keys = list(dict.fromkeys(keys))
        if keys:
            plot = LossCurvePlot(keys=keys, kind=kind,
                                 y_axis_label='loss' if kind == 'train'
                                 else 'score')
            plot.plot(history)
            plots[f'{kind} curves'] = plot
    page = TrainingFormatter(report_fpath(output_dir, f'{stage}_training',
                                          ext='html'))
    page.collect_results(list(history), stage=stage,
                         config=config.to_records() if config else None)
    page.collect_plots(**plots)
    return page.render()
