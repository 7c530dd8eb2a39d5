"""
Training loops, latent caching, inference, trajectory refinement and mesh
driving.
"""
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Union, Dict, Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from tqdm import tqdm

from meshmotion import logger
from meshmotion.config import RunConfig, VaeConfig, InvalidArgument, \
    DatasetSchemaError, IncompatibleCheckpoint, \
    CheckpointFormatError, NumericError, FrameDecodeError, checkpoint_fpath, \
    metrics_log_fpath, latent_cache_fpath, OBJ_FRAME_PATTERN
from meshmotion.geomcore import TriangleMesh, normalize_to_unit_cube, \
    denormalize, sample_surface, sample_surface_barycentric, \
    interpolate_surface, chamfer_distance, read_obj, write_obj, \
    orthogonal_cameras
from meshmotion.motiondiff import EDMDenoiser, denoiser_from_config, \
    diffusion_training_loss, sample_latents, assign_frames, latent_std
from meshmotion.motionvae import MotionVAE, VaeBatch, vae_training_step
from meshmotion.toydata import StoredAsset, load_dataset, camera_rays
from meshmotion.utils import save_checkpoint, load_checkpoint, \
    write_kv_records, file_sha256, text_sha256, check_compatible, \
    save_trajectory

META_PREFIX = 'meta.'
MONOCULAR_VIEW = 0


@dataclass
class AssetSamples:
    """
    Corresponded surface samples of one asset in normalized coordinates,
    with its rendered views and the Plücker rays of its cameras.
    """
    asset_id: str
    points: np.ndarray
    images: np.ndarray
    rays: np.ndarray
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_frames(self):
        return self.points.shape[0]


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    history: List[Dict[str, object]]
    last_checkpoint: Optional[Path] = None
    best_score: float = float('nan')


@dataclass
class InferenceResult:
    trajectory: np.ndarray
    mesh: TriangleMesh
    frame_index: np.ndarray


def model_arrays(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    """state_dict as float32 numpy arrays"""
    return {name: tensor.detach().cpu().float().numpy()
            for name, tensor in model.state_dict().items()}


def load_model_arrays(model: torch.nn.Module, arrays: Dict[str, np.ndarray]):
    state = {name: torch.from_numpy(np.array(array, dtype=np.float32))
             for name, array in arrays.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointFormatError(f'Checkpoint does not fit the model: '
                                    f'{exc}')
    return model


def _split_records(records):
    config, meta = {}, {}
    for key, value in records:
        if key.startswith(META_PREFIX):
            meta[key[len(META_PREFIX):]] = value
        else:
            config[key] = value
    return RunConfig.from_records(config), meta


def build_vae(config: VaeConfig, seed: int) -> MotionVAE:
    torch.manual_seed(seed)
    return MotionVAE(config)


def save_vae(fpath, model: MotionVAE, config: RunConfig) -> Path:
    return save_checkpoint(fpath, 'vae', config.to_records(),
                           model_arrays(model))


def load_vae(fpath, device='cpu'):
    """Returns (MotionVAE in eval mode, RunConfig it was trained with)"""
    _, records, arrays = load_checkpoint(fpath, expected_tag='vae')
    config, _ = _split_records(records)
    model = load_model_arrays(MotionVAE(config.vae), arrays)
    return model.to(device).eval(), config


def save_diffusion(fpath, model: EDMDenoiser, config: RunConfig,
                   meta: Dict[str, object]) -> Path:
    records = config.to_records()
    records += [(META_PREFIX + k, repr(v) if isinstance(v, float) else str(v))
                for k, v in meta.items()]
    return save_checkpoint(fpath, 'diffusion', records, model_arrays(model))


def load_diffusion(fpath, device='cpu'):
    """Returns (EDMDenoiser in eval mode, RunConfig, metadata dict)"""
    _, records, arrays = load_checkpoint(fpath, expected_tag='diffusion')
    config, meta = _split_records(records)
    try:
        geo_dim, frame_dim = int(meta['geo_dim']), int(meta['frame_dim'])
    except KeyError as exc:
        raise CheckpointFormatError(f'{fpath} misses metadata {exc}')
    model = denoiser_from_config(config.diffusion, geo_dim, frame_dim)
    model = load_model_arrays(model, arrays)
    return model.to(device).eval(), config, meta


def prepare_samples(assets: Sequence[StoredAsset], n_points: int,
                    seed: int) -> List[AssetSamples]:
    """
    Samples the same surface points through every frame of each asset,
    half uniformly, half by farthest point sampling, after normalizing
    the rest mesh to the unit cube.
    """
    samples = []
    for k, asset in enumerate(assets):
        rng = np.random.default_rng([int(seed), k])
        normalized, scale, offset = normalize_to_unit_cube(asset.mesh)
        n_random = n_points // 2
        face_index, bary = sample_surface_barycentric(
            normalized, n_random, n_points - n_random, rng)
        points = np.stack([
            interpolate_surface(frame * scale + offset, asset.mesh.faces,
                                face_index, bary)
            for frame in asset.vertex_frames]).astype(np.float32)
        samples.append(AssetSamples(
            asset_id=asset.asset_id, points=points,
            images=asset.images.astype(np.float32),
            rays=camera_rays(asset.cameras).astype(np.float32),
            scale=scale, offset=offset))
    return samples


def _check_dataset(assets: Sequence[StoredAsset], config: RunConfig):
    image_size = assets[0].images.shape[2]
    if image_size % config.vae.patch_size:
        raise DatasetSchemaError(config.data.dataset_dir,
                                 f'image size {image_size} is not a multiple '
                                 f'of vae.patch_size {config.vae.patch_size}')
    shapes = {a.images.shape[1:] for a in assets}
    if len(shapes) != 1:
        raise DatasetSchemaError(config.data.dataset_dir,
                                 'assets disagree on views or image size')


def _vae_batch(samples: Sequence[AssetSamples], pairs, device):
    p1 = np.stack([samples[a].points[0] for a, _ in pairs])
    pt = np.stack([samples[a].points[t] for a, t in pairs])
    images = np.stack([samples[a].images[t] for a, t in pairs])
    rays = np.stack([samples[a].rays for a, _ in pairs])
    return VaeBatch(*(torch.from_numpy(x) for x in (p1, pt, images, rays))) \
        .to(device)


@torch.no_grad()
def reconstruct(model: MotionVAE, sample: AssetSamples, t: int,
                device='cpu') -> np.ndarray:
    """Deterministic VAE reconstruction of frame t from rest samples"""
    model.eval()
    batch = _vae_batch([sample], [(0, t)], device)
    pred, _ = model(batch, deterministic=True)
    return pred[0].cpu().double().numpy()


def reconstruction_chamfer(model: MotionVAE,
                           samples: Sequence[AssetSamples],
                           device='cpu') -> float:
    """Mean Chamfer distance of reconstructions over all (asset, t)"""
    scores = [chamfer_distance(reconstruct(model, s, t, device), s.points[t])
              for s in samples for t in range(s.n_frames)]
    return float(np.mean(scores))


@torch.no_grad()
def reconstruct_vertices(model: MotionVAE, asset: StoredAsset,
                         sample: AssetSamples, device='cpu') -> np.ndarray:
    """
    T x V x 3 VAE reconstruction of every mesh vertex from the asset's
    own multi-view frames, in scene coordinates.
    """
    model.eval()
    p1 = torch.from_numpy(sample.points[0])[None].to(device)
    rays = torch.from_numpy(sample.rays)[None].to(device)
    anchors = model.anchors(p1)
    queries = asset.mesh.vertices * sample.scale + sample.offset
    queries = torch.from_numpy(queries.astype(np.float32))[None].to(device)
    out = np.empty((sample.n_frames, asset.mesh.n_vertices, 3))
    for t in range(sample.n_frames):
        images = torch.from_numpy(sample.images[t])[None].to(device)
        feats = model.encode_motion(p1, images, rays, anchors=anchors)
        z = model.kl_compress(feats, deterministic=True).z
        decoded = model.decode_queries(z, queries)[0].cpu().double().numpy()
        out[t] = denormalize(decoded, sample.scale, sample.offset)
    return out


def identity_chamfer(samples: Sequence[AssetSamples]) -> float:
    """Mean CD(P1, Pt) over all (asset, t), the no-motion baseline"""
    return float(np.mean([chamfer_distance(s.points[0], s.points[t])
                          for s in samples for t in range(s.n_frames)]))


def _split_validation(samples, fraction, generator):
    n_val = int(math.floor(len(samples) * fraction))
    if n_val == 0 or n_val >= len(samples):
        return list(samples), list(samples)
    order = torch.randperm(len(samples), generator=generator).tolist()
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def _total_steps(train_cfg, n_items):
    if train_cfg.max_steps > 0:
        return train_cfg.max_steps
    return train_cfg.epochs * math.ceil(n_items / train_cfg.batch_size)


def _optimizer(model, train_cfg, total_steps):
    optimizer = torch.optim.Adam(model.parameters(),
                                 lr=train_cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(total_steps, 1),
        eta_min=train_cfg.min_learning_rate)
    return optimizer, scheduler


def _resolve_output(config: RunConfig, output_dir):
    output_dir = Path(output_dir if output_dir is not None
                      else config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir


def train_vae(config: RunConfig, output_dir=None,
              verbose: bool = False) -> TrainResult:
    """
    Trains the motion VAE with Adam and cosine annealing.

    The best checkpoint by validation reconstruction Chamfer is kept as
    ``vae_best.ckpt``, the final weights go to ``vae_last.ckpt``. Every
    step is logged to ``vae_metrics.txt``.

    Parameters
    ----------
    config : RunConfig
        validated run configuration
    output_dir : str or Path
        defaults to ``config.output_dir``
    verbose : bool
        show a progress bar

    Returns
    -------
    TrainResult

    Raises
    ------
    ConfigError
        If the dataset is missing or does not match the configuration
    NumericError
        If a loss becomes non-finite
    """
    config.validate()
    output_dir = _resolve_output(config, output_dir)
    device = torch.device(config.device)
    assets = load_dataset(config.data.dataset_dir)
    _check_dataset(assets, config)
    samples = prepare_samples(assets, config.data.n_points, config.seed)

    generator = torch.Generator().manual_seed(config.seed)
    train, val = _split_validation(samples, config.vae_train.val_fraction,
                                   generator)
    pairs = [(a, t) for a in range(len(train))
             for t in range(train[a].n_frames)]
    model = build_vae(config.vae, config.seed).to(device)
    train_cfg = config.vae_train
    total_steps = _total_steps(train_cfg, len(pairs))
    optimizer, scheduler = _optimizer(model, train_cfg, total_steps)

    best_path = checkpoint_fpath(output_dir, 'vae_best')
    last_path = checkpoint_fpath(output_dir, 'vae_last')
    history = []
    baseline = identity_chamfer(val)
    best = reconstruction_chamfer(model, val, device)
    history.append({'kind': 'eval', 'step': 0, 'val_chamfer': best,
                    'identity_chamfer': baseline})
    save_vae(best_path, model, config)
    logger.info(f'VAE initial validation chamfer {best:.6f}')

    step = 0
    progress = tqdm(total=total_steps, desc='Training VAE',
                    disable=not verbose)
    while step < total_steps:
        order = torch.randperm(len(pairs), generator=generator).tolist()
        for start in range(0, len(order), train_cfg.batch_size):
            if step >= total_steps:
                break
            chunk = [pairs[i]
                     for i in order[start:start + train_cfg.batch_size]]
            batch = _vae_batch(train, chunk, device)
            losses = vae_training_step(batch, model, optimizer,
                                       generator=generator, step=step)
            lr = scheduler.get_last_lr()[0]
            scheduler.step()
            step += 1
            progress.update(1)
            history.append({'kind': 'train', 'step': step,
                            'deformation': losses.deformation,
                            'regularization': losses.regularization,
                            'total': losses.total, 'lr': lr})
            logger.debug(f'vae step {step}: total={losses.total:.6f}')
            if step % train_cfg.eval_every == 0 or step == total_steps:
                score = reconstruction_chamfer(model, val, device)
                history.append({'kind': 'eval', 'step': step,
                                'val_chamfer': score,
                                'identity_chamfer': baseline})
                logger.info(f'VAE step {step}: validation chamfer '
                            f'{score:.6f}')
                if score < best:
                    best = score
                    save_vae(best_path, model, config)
    progress.close()
    save_vae(last_path, model, config)
    metrics = write_kv_records(metrics_log_fpath(output_dir, 'vae'), history)
    return TrainResult(checkpoint=best_path, metrics=metrics,
                       history=history, last_checkpoint=last_path,
                       best_score=best)


@torch.no_grad()
def encode_conditions(vae: MotionVAE, samples: Sequence[AssetSamples],
                      device='cpu'):
    """
    Deterministic latents of every frame of every asset plus the geometry
    tokens and the monocular (view 0) frame tokens that condition the
    denoiser.
    """
    vae.eval()
    latents, geometry, frames = {}, {}, {}
    for sample in samples:
        p1 = torch.from_numpy(sample.points[0])[None].to(device)
        images = torch.from_numpy(sample.images).to(device)
        rays = torch.from_numpy(sample.rays).to(device)
        anchors = vae.anchors(p1)
        per_frame, tokens = [], []
        for t in range(sample.n_frames):
            feats = vae.encode_motion(p1, images[t][None], rays[None],
                                      anchors=anchors)
            per_frame.append(vae.kl_compress(feats, deterministic=True).z[0])
            view = slice(MONOCULAR_VIEW, MONOCULAR_VIEW + 1)
            tokens.append(vae.encode_multiview(images[t][None, view],
                                               rays[None, view]).fused[0])
        latents[sample.asset_id] = torch.stack(per_frame).cpu()
        frames[sample.asset_id] = torch.stack(tokens).cpu()
        geometry[sample.asset_id] = vae.encode_geometry(
            p1, anchors=anchors)[0].cpu()
    return {'latents': latents, 'geometry': geometry, 'frames': frames}


def cache_key(vae_digest: str, seed: int, n_points: int,
              asset_ids: Sequence[str]) -> Dict[str, object]:
    """Everything the cached latents and condition tokens depend on"""
    n_random = n_points // 2
    return {'vae_sha256': vae_digest, 'seed': int(seed),
            'n_random': n_random, 'n_fps': n_points - n_random,
            'asset_ids': sorted(asset_ids)}


def cached_conditions(vae_checkpoint, vae: MotionVAE,
                      samples: Sequence[AssetSamples], cache_dir,
                      seed: int, n_points: int, device='cpu'):
    """
    Loads the latent cache of this VAE, seed, sample size and asset list,
    or fills it. Returns (cache, VAE checkpoint digest).
    """
    digest = file_sha256(vae_checkpoint)
    key = cache_key(digest, seed, n_points, [s.asset_id for s in samples])
    fpath = latent_cache_fpath(cache_dir, text_sha256(*sorted(key.items())))
    if fpath.is_file():
        cache = torch.load(fpath)
        if cache.get('key') == key:
            logger.info(f'Loaded cached latents from {fpath}')
            return cache, digest
        logger.warning(f'Latent cache {fpath} was built for other inputs, '
                       f're-encoding')
    cache = encode_conditions(vae, samples, device)
    cache['key'] = key
    torch.save(cache, fpath)
    return cache, digest


@torch.no_grad()
def held_out_loss(model: EDMDenoiser, clean, geometry, frames,
                  config: RunConfig) -> float:
    """
    Denoising loss of the given clips with noise drawn from a generator
    reseeded on every call, so successive evaluations are comparable.
    """
    model.eval()
    generator = torch.Generator().manual_seed(config.seed + 1)
    device = next(model.parameters()).device
    losses = [float(diffusion_training_loss(
        model, clean[k:k + 1].to(device), geometry[k:k + 1].to(device),
        frames[k:k + 1].to(device), config.diffusion, generator))
        for k in range(clean.shape[0])]
    return float(np.mean(losses))


def train_diffusion(config: RunConfig, vae_checkpoint,
                    output_dir=None, verbose: bool = False) -> TrainResult:
    """
    Trains the latent denoiser on cached VAE latents.

    Every ``diff_train.eval_every`` steps the held-out denoising loss is
    measured. The best weights are kept as ``diffusion_best.ckpt``, the
    final ones go to ``diffusion_last.ckpt``.

    Raises
    ------
    IncompatibleCheckpoint
        If the diffusion and VAE latent widths differ
    ConfigError
        If the dataset is missing, malformed or has fewer than 3 frames
    NumericError
        If a loss becomes non-finite
    """
    config.validate()
    output_dir = _resolve_output(config, output_dir)
    device = torch.device(config.device)
    vae, vae_config = load_vae(vae_checkpoint, device)
    if config.diffusion.latent_channels != vae_config.vae.latent_channels:
        raise IncompatibleCheckpoint([
            ('change', 'latent_channels',
             (config.diffusion.latent_channels,
              vae_config.vae.latent_channels))])
    config = replace(config, vae=vae_config.vae)

    assets = load_dataset(config.data.dataset_dir)
    _check_dataset(assets, vae_config)
    if assets[0].n_frames < 3:
        raise DatasetSchemaError(config.data.dataset_dir,
                                 'diffusion training needs at least 3 frames')
    samples = prepare_samples(assets, config.data.n_points, config.seed)
    cache, digest = cached_conditions(vae_checkpoint, vae, samples,
                                      output_dir, config.seed,
                                      config.data.n_points, device)
    ids = [s.asset_id for s in samples]
    clean = torch.stack([cache['latents'][i] for i in ids])
    geometry = torch.stack([cache['geometry'][i] for i in ids])
    frames = torch.stack([cache['frames'][i] for i in ids])
    scale = config.diffusion.sigma_data / latent_std(clean)
    clean = clean * scale

    generator = torch.Generator().manual_seed(config.seed)
    train_ids, val_ids = _split_validation(list(range(len(ids))),
                                           config.diff_train.val_fraction,
                                           generator)
    train_index = torch.tensor(train_ids)
    val_index = torch.tensor(val_ids)

    torch.manual_seed(config.seed)
    width = vae_config.vae.width
    model = denoiser_from_config(config.diffusion, width, width).to(device)
    train_cfg = config.diff_train
    total_steps = _total_steps(train_cfg, len(train_ids))
    optimizer, scheduler = _optimizer(model, train_cfg, total_steps)
    meta = {'latent_scale': scale, 'geo_dim': width, 'frame_dim': width,
            'vae_sha256': digest}

    def evaluate():
        return held_out_loss(model, clean[val_index], geometry[val_index],
                             frames[val_index], config)

    best_path = checkpoint_fpath(output_dir, 'diffusion_best')
    last_path = checkpoint_fpath(output_dir, 'diffusion_last')
    best = evaluate()
    history = [{'kind': 'eval', 'step': 0, 'val_loss': best}]
    save_diffusion(best_path, model, config, meta)
    logger.info(f'Denoiser initial held-out loss {best:.6f}')

    progress = tqdm(total=total_steps, desc='Training denoiser',
                    disable=not verbose)
    for step in range(1, total_steps + 1):
        pick = torch.randint(len(train_ids), (train_cfg.batch_size,),
                             generator=generator)
        index = train_index[pick]
        model.train()
        optimizer.zero_grad(set_to_none=True)
        loss = diffusion_training_loss(
            model, clean[index].to(device), geometry[index].to(device),
            frames[index].to(device), config.diffusion, generator)
        if not torch.isfinite(loss):
            raise NumericError(f'Non-finite diffusion loss at step {step}')
        loss.backward()
        optimizer.step()
        lr = scheduler.get_last_lr()[0]
        scheduler.step()
        progress.update(1)
        history.append({'kind': 'train', 'step': step, 'loss': loss.item(),
                        'lr': lr})
        logger.debug(f'diffusion step {step}: loss={loss.item():.6f}')
        if step % train_cfg.eval_every == 0 or step == total_steps:
            score = evaluate()
            history.append({'kind': 'eval', 'step': step, 'val_loss': score})
            logger.info(f'Denoiser step {step}: held-out loss {score:.6f}')
            if score < best:
                best = score
                save_diffusion(best_path, model, config, meta)
    progress.close()

    save_diffusion(last_path, model, config, meta)
    metrics = write_kv_records(metrics_log_fpath(output_dir, 'diffusion'),
                               history)
    return TrainResult(checkpoint=best_path, metrics=metrics,
                       history=history, last_checkpoint=last_path,
                       best_score=best)


def load_video_frames(frames_dir, image_size: int) -> np.ndarray:
    """
    Reads the PNG frames of a folder in name order as an n x H x W x 3
    float32 array in [0, 1], resized to the training resolution.

    Raises
    ------
    FileNotFoundError
        If the folder does not exist
    FrameDecodeError
        If a frame cannot be decoded
    """
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f'Frames folder {frames_dir} does not exist')
    frames = []
    for fpath in sorted(frames_dir.glob('*.png')):
        try:
            with Image.open(fpath) as image:
                image = image.convert('RGB')
                if image.size != (image_size, image_size):
                    logger.warning(f'Resizing {fpath.name} from {image.size} '
                                   f'to {image_size}x{image_size}')
                    image = image.resize((image_size, image_size),
                                         Image.BILINEAR)
                frames.append(np.asarray(image, dtype=np.float32) / 255.0)
        except (UnidentifiedImageError, OSError) as exc:
            raise FrameDecodeError(fpath, exc)
    return np.stack(frames) if frames else np.zeros((0, image_size,
                                                     image_size, 3),
                                                    dtype=np.float32)


def _check_pair(vae_config: RunConfig, diff_config: RunConfig, meta,
                vae_checkpoint):
    vae_keys = [f'vae.{k}' for k in vae_config.section_records('vae')]
    check_compatible(dict(vae_config.to_records()),
                     dict(diff_config.to_records()), vae_keys)
    expected = meta.get('vae_sha256')
    actual = file_sha256(vae_checkpoint)
    if expected is not None and expected != actual:
        raise IncompatibleCheckpoint([('change', 'vae_sha256',
                                       (expected, actual))])


@torch.no_grad()
def infer(mesh_path, frames_dir, vae_checkpoint, diffusion_checkpoint,
          steps: int = None, seed: int = 0, device='cpu',
          verbose: bool = False) -> InferenceResult:
    """
    Animates a mesh from a monocular frame sequence.

    The mesh is normalized to the unit cube, its surface is sampled, the
    denoiser samples one latent set per timestamp and every vertex is
    decoded directly, then mapped back to the input coordinates. Frame 0
    is the input vertices verbatim.

    Parameters
    ----------
    mesh_path : str or Path
        ASCII OBJ mesh
    frames_dir : str or Path
        folder of PNG frames seen by the front camera
    vae_checkpoint, diffusion_checkpoint : str or Path
        trained checkpoints
    steps : int
        sampler steps, defaults to the diffusion config
    seed : int
        seeds surface sampling and the sampler noise

    Returns
    -------
    InferenceResult
        trajectory T x V x 3 in input coordinates

    Raises
    ------
    InvalidArgument
        If fewer than 2 frames are found
    FrameDecodeError
        If a frame cannot be decoded
    IncompatibleCheckpoint
        If the checkpoints were not trained together
    """
    device = torch.device(device)
    mesh = read_obj(mesh_path)
    vae, vae_config = load_vae(vae_checkpoint, device)
    model, diff_config, meta = load_diffusion(diffusion_checkpoint, device)
    _check_pair(vae_config, diff_config, meta, vae_checkpoint)
    image_size = vae_config.data.image_size
    video = load_video_frames(frames_dir, image_size)
    if video.shape[0] < 2:
        raise InvalidArgument(f'Need at least 2 frames in {frames_dir}, '
                              f'Got {video.shape[0]}')

    normalized, scale, offset = normalize_to_unit_cube(mesh)
    rng = np.random.default_rng(seed)
    n_points = vae_config.data.n_points
    p1 = sample_surface(normalized, n_points // 2, n_points - n_points // 2,
                        rng).points
    p1 = torch.from_numpy(p1.astype(np.float32))[None].to(device)
    geo_tokens = vae.encode_geometry(p1)

    camera = orthogonal_cameras(1, image_size)[0]
    rays = torch.from_numpy(camera_rays([camera]).astype(np.float32)) \
        .to(device)
    frame_index = assign_frames(video.shape[0], diff_config.data.frames)
    tokens = {}
    for idx in np.unique(frame_index):
        image = torch.from_numpy(video[idx])[None, None].to(device)
        tokens[int(idx)] = vae.encode_multiview(image, rays[None]).fused[0]
    frame_tokens = torch.stack([tokens[int(i)] for i in frame_index])[None]

    latents = sample_latents(model, geo_tokens, frame_tokens,
                             vae_config.vae.n_latents, steps=steps,
                             seed=seed, config=diff_config.diffusion,
                             verbose=verbose)
    latents = latents / float(meta.get('latent_scale', 1.0))

    queries = torch.from_numpy(normalized.vertices.astype(np.float32))[None]
    queries = queries.to(device)
    trajectory = np.empty((len(frame_index), mesh.n_vertices, 3))
    for t in range(len(frame_index)):
        decoded = vae.decode_queries(latents[:, t], queries)[0]
        trajectory[t] = denormalize(decoded.cpu().double().numpy(), scale,
                                    offset)
    trajectory[0] = mesh.vertices
    return InferenceResult(trajectory=trajectory, mesh=mesh,
                           frame_index=frame_index)


def refine_trajectory(trajectory, delta: float) -> np.ndarray:
    """
    Holds a point at its refined previous position whenever its raw
    prediction moved less than ``delta`` from there.

    Raises
    ------
    InvalidArgument
        If delta is negative or the trajectory is not T x N x 3
    """
    if delta < 0:
        raise InvalidArgument(f'delta must be non-negative, Got {delta}')
    trajectory = np.asarray(trajectory)
    if trajectory.ndim != 3 or trajectory.shape[2] != 3:
        raise InvalidArgument(f'Expected T x N x 3, Got {trajectory.shape}')
    refined = trajectory.copy()
    for t in range(1, trajectory.shape[0]):
        step = np.linalg.norm(trajectory[t] - refined[t - 1], axis=-1)
        hold = step < delta
        refined[t] = np.where(hold[:, None], refined[t - 1], trajectory[t])
    return refined


def drive_mesh(mesh: TriangleMesh, trajectory,
               out_dir: Union[str, Path] = None) -> List[TriangleMesh]:
    """
    One mesh per trajectory frame with the input faces. Frame 0 keeps the
    input vertices. With ``out_dir`` every frame is exported as
    ``frame_%04d.obj`` next to ``trajectory.trj``.

    Raises
    ------
    InvalidArgument
        If the trajectory point count differs from the vertex count
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 3 or trajectory.shape[1:] != (mesh.n_vertices, 3):
        raise InvalidArgument(f'Trajectory {trajectory.shape} does not match '
                              f'{mesh.n_vertices} mesh vertices')
    meshes = [mesh.with_vertices(mesh.vertices)]
    meshes += [mesh.with_vertices(frame) for frame in trajectory[1:]]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(meshes):
            write_obj(out_dir / OBJ_FRAME_PATTERN.format(t), frame.vertices,
                      frame.faces)
        save_trajectory(out_dir / 'trajectory.trj',
                        np.stack([m.vertices for m in meshes]))
    return meshes


def check_vae_quality(config: RunConfig, checkpoint) -> Dict[str, float]:
    """Reconstruction and identity Chamfer of a VAE on the dataset"""
    model, _ = load_vae(checkpoint, config.device)
    assets = load_dataset(config.data.dataset_dir)
    samples = prepare_samples(assets, config.data.n_points, config.seed)
    return {'reconstruction_chamfer': reconstruction_chamfer(model, samples,
                                                             config.device),
            'identity_chamfer': identity_chamfer(samples)}
