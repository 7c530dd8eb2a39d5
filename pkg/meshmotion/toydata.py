"""
Procedural animated assets, a flat-shaded rasterizer, curation filters and
the on-disk dataset.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union, Dict

import numpy as np
import torch
import torch.nn.functional as F
import trimesh
from PIL import Image

from meshmotion import logger
from meshmotion.config import InvalidArgument, DatasetSchemaError, \
    MOTION_KINDS, DataConfig, RunConfig, manifest_fpath, asset_dir, \
    view_png_fpath, vertex_frame_fpath, cameras_fpath
from meshmotion.geomcore import TriangleMesh, Camera, face_normals, \
    orthogonal_cameras, plucker_embed, read_obj, write_obj, \
    read_point_cloud, write_point_cloud
from meshmotion.parallel_utils import parallel_map, spawn_seeds
from meshmotion.utils import write_kv_records, read_kv_records, is_writable

BACKGROUND = 1.0
AMBIENT = 0.35
COLOR_RANGE = (0.05, 0.85)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MAX_KEYFRAME_GAP = 3

DEFAULT_AMOUNTS = {
    'bend': math.pi / 4,
    'twist': math.pi / 2,
    'bounce': 0.3,
    'orbit': math.pi / 2,
    'stretch': 0.4,
}
ORBIT_RADIUS = 0.2


@dataclass
class MotionParams:
    """
    Knobs of a procedural motion. ``amount`` is kind specific: bend and
    twist angles, bounce height, orbit sweep angle, stretch factor. When
    ``None`` the kind's default is used.
    """
    amount: Optional[float] = None
    max_step: float = 0.25
    raw_frames: int = 0
    randomize: bool = True


@dataclass
class AnimatedAsset:
    rest_mesh: TriangleMesh
    frames: np.ndarray
    vertex_colors: np.ndarray
    kind: str = 'unknown'
    seed: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        n_vertices = self.rest_mesh.n_vertices
        if self.frames.ndim != 3 or self.frames.shape[1:] != (n_vertices, 3):
            raise InvalidArgument(f'Expected T x {n_vertices} x 3 frames, '
                                  f'Got {self.frames.shape}')
        if self.frames.shape[0] < 2:
            raise InvalidArgument('An animated asset needs at least 2 frames')
        if np.abs(self.frames[0] - self.rest_mesh.vertices).max() > 1e-7:
            raise InvalidArgument('Frame 0 must equal the rest mesh')

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def mesh_at(self, t) -> TriangleMesh:
        return self.rest_mesh.with_vertices(self.frames[t])


@dataclass
class MultiViewFrame:
    """v rendered views at one timestamp, images in [0, 1]"""
    images: np.ndarray
    cameras: List[Camera]
    timestamp: int
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise InvalidArgument('A multi-view frame needs at least 1 view')
        if self.images.shape[0] != len(self.cameras):
            raise InvalidArgument('One image per camera is required')
        for image, camera in zip(self.images, self.cameras):
            if image.shape[:2] != (camera.height, camera.width):
                raise InvalidArgument('Image size does not match its camera')


@dataclass
class FilterResult:
    keep: bool
    score: float = float('nan')
    frame: Optional[int] = None


@dataclass
class DatasetRecord:
    asset_id: str
    asset: AnimatedAsset
    views: List[MultiViewFrame]
    ssim: FilterResult
    bounds: FilterResult

    @property
    def keep(self):
        return self.ssim.keep and self.bounds.keep

    @property
    def reason(self):
        if not self.ssim.keep:
            return 'static'
        if not self.bounds.keep:
            return f'out_of_bounds@{self.bounds.frame}'
        return 'ok'


@dataclass
class StoredAsset:
    """An asset read back from a dataset folder"""
    asset_id: str
    kind: str
    seed: int
    mesh: TriangleMesh
    colors: np.ndarray
    vertex_frames: np.ndarray
    images: np.ndarray
    cameras: List[Camera] = field(default_factory=list)

    @property
    def n_frames(self):
        return self.vertex_frames.shape[0]


def select_keyframes(n_raw: int, n_frames: int, max_gap: int = 3,
                     rng: np.random.Generator = None) -> np.ndarray:
    """
    Picks ``n_frames`` ascending raw frame indices starting at 0 with at
    most ``max_gap`` raw frames between neighbours.

    Raises
    ------
    InvalidArgument
        If more keyframes than raw frames are requested or max_gap < 1
    """
    if n_frames < 1 or n_frames > n_raw:
        raise InvalidArgument(f'Cannot pick {n_frames} keyframes from '
                              f'{n_raw} raw frames')
    if max_gap < 1:
        raise InvalidArgument(f'max_gap must be >= 1, Got {max_gap}')
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = [0]
    for k in range(1, n_frames):
        remaining = n_frames - 1 - k
        low = keys[-1] + 1
        high = min(keys[-1] + max_gap, n_raw - 1 - remaining)
        keys.append(int(rng.integers(low, high + 1)))
    return np.array(keys, dtype=np.int64)


def _primitive(kind: str):
    if kind in ('bounce', 'stretch'):
        mesh = trimesh.creation.icosphere(subdivisions=2, radius=0.5)
        return np.asarray(mesh.vertices), np.asarray(mesh.faces)
    if kind == 'bend':
        mesh = trimesh.creation.cylinder(radius=0.25, height=1.6, sections=16)
        to_y_up = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0],
                            [0.0, -1.0, 0.0]])
        vertices = np.asarray(mesh.vertices) @ to_y_up.T
        faces = np.asarray(mesh.faces)
    else:
        mesh = trimesh.creation.box(extents=(0.6, 1.4, 0.6))
        vertices, faces = np.asarray(mesh.vertices), np.asarray(mesh.faces)
    vertices, faces = trimesh.remesh.subdivide_to_size(vertices, faces,
                                                       max_edge=0.15)
    return np.asarray(vertices), np.asarray(faces)


def bend_vertices(vertices, angle, y_min):
    """
    Bends the +y axis into a circular arc of total ``angle`` in the xy
    plane, keeping the plane y = y_min fixed.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if angle == 0.0:
        return vertices.copy()
    x, y, z = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    length = vertices[:, 1].max() - y_min
    radius = length / angle
    phi = (y - y_min) / radius
    out = np.empty_like(vertices)
    out[:, 0] = radius - (radius - x) * np.cos(phi)
    out[:, 1] = y_min + (radius - x) * np.sin(phi)
    out[:, 2] = z
    return out


def _rotate_y(vertices, angle):
    c, s = np.cos(angle), np.sin(angle)
    x, z = vertices[:, 0], vertices[:, 2]
    out = vertices.copy()
    out[:, 0] = c * x + s * z
    out[:, 2] = -s * x + c * z
    return out


def _deform(kind, rest, amount, s):
    """Vertex positions of a motion at progress s in [0, 1]"""
    if kind == 'bend':
        return bend_vertices(rest, amount * s, rest[:, 1].min())
    if kind == 'twist':
        y = rest[:, 1]
        span = y.max() - y.min()
        weight = (y - y.min()) / span if span > 0 else np.zeros_like(y)
        angles = amount * s * weight
        c, sn = np.cos(angles), np.sin(angles)
        out = rest.copy()
        out[:, 0] = c * rest[:, 0] + sn * rest[:, 2]
        out[:, 2] = -sn * rest[:, 0] + c * rest[:, 2]
        return out
    if kind == 'bounce':
        return rest + np.array([0.0, amount * math.sin(math.pi * s), 0.0])
    if kind == 'orbit':
        phi = amount * s
        offset = ORBIT_RADIUS * np.array([math.sin(phi), 0.0,
                                          1.0 - math.cos(phi)])
        return _rotate_y(rest, phi) + offset
    if kind == 'stretch':
        stretch = 1.0 + amount * math.sin(math.pi * s)
        return rest * np.array([1.0 / math.sqrt(stretch), stretch,
                                1.0 / math.sqrt(stretch)])
    raise InvalidArgument(f'Unknown motion kind {kind!r}. '
                          f'Expected one of {MOTION_KINDS}')


def _vertex_colors(vertices, rng):
    base = rng.uniform(0.15, 0.75, size=3)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    pattern = 0.1 * np.sin(3.0 * vertices @ rng.normal(size=(3, 3)) + phase)
    return np.clip(base + pattern, *COLOR_RANGE)


def _max_step(frames):
    steps = np.linalg.norm(np.diff(frames, axis=0), axis=-1)
    return float(steps.max()) if steps.size else 0.0


def synthesize_asset(kind: str, params: MotionParams = None,
                     frames: int = 10, seed: int = 0) -> AnimatedAsset:
    """
    Builds a procedural animation on a trimesh primitive.

    Parameters
    ----------
    kind : str
        one of bend, twist, bounce, orbit, stretch
    params : MotionParams
        motion amount, per-frame displacement cap and raw frame count
    frames : int
        number of frames T >= 2
    seed : int
        seeds colours, amount jitter and keyframe choice

    Returns
    -------
    AnimatedAsset
        frame 0 equals the rest mesh, vertex positions are float32 exact

    Raises
    ------
    InvalidArgument
        If the kind is unknown or frames < 2
    """
    if kind not in MOTION_KINDS:
        raise InvalidArgument(f'Unknown motion kind {kind!r}. '
                              f'Expected one of {MOTION_KINDS}')
    if frames < 2:
        raise InvalidArgument(f'Expected at least 2 frames, Got {frames}')
    params = params if params is not None else MotionParams()
    rng = np.random.default_rng(seed)

    vertices, faces = _primitive(kind)
    rest = vertices.astype(np.float32).astype(np.float64)
    colors = _vertex_colors(rest, rng)
    amount = DEFAULT_AMOUNTS[kind] if params.amount is None \
        else float(params.amount)
    if params.randomize:
        amount *= rng.uniform(0.75, 1.25)

    if params.raw_frames > frames:
        keys = select_keyframes(params.raw_frames, frames, MAX_KEYFRAME_GAP,
                                rng)
        progress = keys / (params.raw_frames - 1)
    else:
        progress = np.arange(frames) / (frames - 1)

    def animate(value):
        return np.stack([_deform(kind, rest, value, s) for s in progress])

    positions = animate(amount)
    halvings = 0
    while _max_step(positions) > params.max_step and halvings < 40:
        amount *= 0.5
        halvings += 1
        positions = animate(amount)
    if halvings:
        logger.warning(f'{kind} asset (seed {seed}): motion amount halved '
                       f'{halvings} times to respect max_step '
                       f'{params.max_step}')
    positions = positions.astype(np.float32).astype(np.float64)
    positions[0] = rest
    mesh = TriangleMesh(vertices=rest, faces=faces)
    return AnimatedAsset(rest_mesh=mesh, frames=positions,
                         vertex_colors=colors, kind=kind, seed=int(seed))


def rasterize(vertices, faces, face_colors, camera: Camera):
    """
    Z-buffered flat triangle rasterization sampled at pixel centres.

    Returns
    -------
    tuple
        (H x W x 3 image on a white background, H x W foreground mask)
    """
    h, w = camera.height, camera.width
    image = np.full((h, w, 3), BACKGROUND, dtype=np.float64)
    zbuf = np.full((h, w), np.inf)
    mask = np.zeros((h, w), dtype=bool)
    j, i, depth = camera.project(vertices)
    for f, (a, b, c) in enumerate(faces):
        za, zb, zc = depth[a], depth[b], depth[c]
        if not (za > 0 and zb > 0 and zc > 0):
            continue
        xs = np.array([j[a], j[b], j[c]])
        ys = np.array([i[a], i[b], i[c]])
        if not np.all(np.isfinite(xs)) or not np.all(np.isfinite(ys)):
            continue
        x0, x1 = max(math.ceil(xs.min()), 0), min(math.floor(xs.max()), w - 1)
        y0, y1 = max(math.ceil(ys.min()), 0), min(math.floor(ys.max()), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) \
            - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if area == 0:
            continue
        py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        w0 = ((xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py))
        w1 = ((xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py))
        w2 = ((xs[0] - px) * (ys[1] - py) - (xs[1] - px) * (ys[0] - py))
        w0, w1, w2 = w0 / area, w1 / area, w2 / area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * za + w1 * zb + w2 * zc
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (z < region)
        region[closer] = z[closer]
        image[y0:y1 + 1, x0:x1 + 1][closer] = face_colors[f]
        mask[y0:y1 + 1, x0:x1 + 1][closer] = True
    return image, mask


def shade_faces(vertices, faces, vertex_colors, camera: Camera):
    """Mean vertex colour scaled by ambient plus |normal . forward|"""
    normals = face_normals(vertices, faces)
    lambert = np.abs(normals @ camera.forward)
    base = vertex_colors[faces].mean(axis=1)
    return np.clip(base * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None],
                   0.0, 1.0)


def render_views(asset: AnimatedAsset, t: int,
                 cameras: Sequence[Camera]) -> MultiViewFrame:
    """Renders frame t of the asset from every camera"""
    if not 0 <= t < asset.n_frames:
        raise InvalidArgument(f'Timestamp {t} outside [0, {asset.n_frames})')
    vertices = asset.frames[t]
    faces = asset.rest_mesh.faces
    images, masks = [], []
    for camera in cameras:
        colors = shade_faces(vertices, faces, asset.vertex_colors, camera)
        image, mask = rasterize(vertices, faces, colors, camera)
        images.append(image)
        masks.append(mask)
    return MultiViewFrame(images=np.stack(images), cameras=list(cameras),
                          timestamp=t, masks=np.stack(masks))


def render_asset(asset: AnimatedAsset, cameras) -> List[MultiViewFrame]:
    return [render_views(asset, t, cameras) for t in range(asset.n_frames)]


def camera_rays(cameras: Sequence[Camera]) -> np.ndarray:
    """v x H x W x 6 Plücker channels (d, m) of each camera"""
    return np.stack([plucker_embed(c).as_channels() for c in cameras])


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords ** 2 / (2.0 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] @ g[None, :])[None, None]


def ssim(img_a, img_b, data_range: float = 1.0) -> float:
    """
    Mean local SSIM with an 11 x 11 Gaussian window (sigma 1.5), K1 = 0.01
    and K2 = 0.03. Inputs are (..., H, W) or (..., H, W, 3); the mean runs
    over all windows, channels and leading axes.

    Raises
    ------
    InvalidArgument
        If shapes differ or images are smaller than the window
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f'Image shapes differ: {a.shape} vs {b.shape}')
    if a.ndim >= 3 and a.shape[-1] in (1, 3):
        a = np.moveaxis(a, -1, -3)
        b = np.moveaxis(b, -1, -3)
    if a.ndim < 2 or a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise InvalidArgument(f'SSIM needs images of at least '
                              f'{SSIM_WINDOW}x{SSIM_WINDOW}, Got {a.shape}')
    h, w = a.shape[-2:]
    x = torch.from_numpy(np.ascontiguousarray(a.reshape(-1, 1, h, w)))
    y = torch.from_numpy(np.ascontiguousarray(b.reshape(-1, 1, h, w)))
    window = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = F.conv2d(x, window)
    mu_y = F.conv2d(y, window)
    var_x = F.conv2d(x * x, window) - mu_x ** 2
    var_y = F.conv2d(y * y, window) - mu_y ** 2
    cov = F.conv2d(x * y, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def ssim_motion_filter(frames, threshold: float = 0.995) -> FilterResult:
    """
    Mean SSIM over consecutive frames. Sequences scoring above the
    threshold, or exactly 1, are rejected as static.

    Raises
    ------
    InvalidArgument
        If fewer than 2 frames are given, shapes differ, or the threshold
        is outside (0, 1]
    """
    if not 0.0 < threshold <= 1.0:
        raise InvalidArgument(f'threshold must lie in (0, 1], '
                              f'Got {threshold}')
    frames = [np.asarray(f) for f in frames]
    if len(frames) < 2:
        raise InvalidArgument('The motion filter needs at least 2 frames')
    if any(f.shape != frames[0].shape for f in frames):
        raise InvalidArgument('All frames must share one shape')
    score = float(np.mean([ssim(frames[k], frames[k + 1])
                           for k in range(len(frames) - 1)]))
    keep = not (score > threshold or score == 1.0)
    return FilterResult(keep=keep, score=score)


def bounds_filter(frames, bbox=(-1.0, 1.0)) -> FilterResult:
    """
    Rejects when any vertex of any frame leaves the axis-aligned box,
    reporting the first offending frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        raise InvalidArgument('bounds_filter needs at least one frame')
    lo = np.broadcast_to(np.asarray(bbox[0], dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(bbox[1], dtype=np.float64), (3,))
    outside = np.any((frames < lo) | (frames > hi), axis=(1, 2))
    if outside.any():
        return FilterResult(keep=False, frame=int(np.argmax(outside)))
    return FilterResult(keep=True)


def _make_record(index, kind, seed, data: DataConfig) -> DatasetRecord:
    params = MotionParams(max_step=data.max_step, raw_frames=data.raw_frames)
    asset = synthesize_asset(kind, params, data.frames, seed)
    cameras = orthogonal_cameras(data.views, data.image_size)
    views = render_asset(asset, cameras)
    ssim_result = ssim_motion_filter([v.images for v in views],
                                     data.ssim_threshold)
    bounds = bounds_filter(asset.frames, (data.bbox_min, data.bbox_max))
    return DatasetRecord(asset_id=f'asset_{index:03d}', asset=asset,
                         views=views, ssim=ssim_result, bounds=bounds)


def _to_uint8(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_cameras(fpath, cameras: Sequence[Camera]):
    records = []
    for k, cam in enumerate(cameras):
        record = {'view': k, 'projection': cam.projection,
                  'height': cam.height, 'width': cam.width,
                  'half_extent': float(cam.half_extent),
                  'focal': float(cam.focal)}
        for axis, value in zip('xyz', cam.center):
            record[f'c{axis}'] = float(value)
        for n, value in enumerate(cam.orientation.ravel()):
            record[f'r{n}'] = float(value)
        records.append(record)
    return write_kv_records(fpath, records)


def read_cameras(fpath) -> List[Camera]:
    cameras = []
    for record in read_kv_records(fpath):
        try:
            cameras.append(Camera(
                center=[float(record[f'c{a}']) for a in 'xyz'],
                orientation=[float(record[f'r{n}']) for n in range(9)],
                height=int(record['height']), width=int(record['width']),
                projection=record['projection'],
                half_extent=float(record['half_extent']),
                focal=float(record['focal'])))
        except KeyError as exc:
            raise DatasetSchemaError(fpath, f'camera record misses {exc}')
    return cameras


def write_record(out_dir, record: DatasetRecord) -> Path:
    """Persists one accepted asset into its own folder"""
    folder = asset_dir(out_dir, record.asset_id)
    folder.mkdir(parents=True, exist_ok=True)
    asset = record.asset
    write_obj(folder / 'mesh.obj', asset.rest_mesh.vertices,
              asset.rest_mesh.faces)
    write_point_cloud(folder / 'colors.pct', asset.vertex_colors)
    for t in range(asset.n_frames):
        write_point_cloud(vertex_frame_fpath(folder, t), asset.frames[t])
        for k, image in enumerate(record.views[t].images):
            Image.fromarray(_to_uint8(image)).save(
                view_png_fpath(folder, t, k))
    write_cameras(cameras_fpath(folder), record.views[0].cameras)
    write_kv_records(folder / 'record.txt', [{
        'asset': record.asset_id, 'kind': asset.kind, 'seed': asset.seed,
        'frames': asset.n_frames, 'vertices': asset.rest_mesh.n_vertices,
        'views': len(record.views[0].cameras),
        'ssim_keep': record.ssim.keep, 'bounds_keep': record.bounds.keep}])
    return folder


def build_dataset(config: Union[RunConfig, DataConfig],
                  out_dir: Union[str, Path] = None,
                  verbose: bool = False) -> List[Dict[str, object]]:
    """
    Synthesizes, renders and filters ``n_assets`` assets, persisting the
    ones that pass both filters.

    Parameters
    ----------
    config : RunConfig or DataConfig
        counts, kinds, thresholds and, through RunConfig, the root seed
    out_dir : str or Path
        dataset folder, defaults to ``data.dataset_dir``
    verbose : bool
        show progress

    Returns
    -------
    list of dict
        manifest records, one per asset, in asset order

    Raises
    ------
    OSError
        If the output folder cannot be created or written
    """
    if isinstance(config, RunConfig):
        data, root_seed = config.data, config.seed
    else:
        data, root_seed = config, 0
    out_dir = Path(out_dir if out_dir is not None else data.dataset_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not is_writable(out_dir):
        raise OSError(f'Dataset folder {out_dir} is not writable')

    kinds = list(data.kinds)
    seeds = spawn_seeds(root_seed, data.n_assets)
    jobs = [(i, kinds[i % len(kinds)], seeds[i], data)
            for i in range(data.n_assets)]
    records = parallel_map(_make_record, jobs, workers=data.workers,
                           desc='Synthesizing assets', verbose=verbose)

    manifest = []
    for record in records:
        if record.keep:
            write_record(out_dir, record)
        else:
            logger.warning(f'{record.asset_id} ({record.asset.kind}) '
                           f'rejected: {record.reason}')
        manifest.append({
            'asset': record.asset_id, 'kind': record.asset.kind,
            'seed': record.asset.seed,
            'status': 'pass' if record.keep else 'fail',
            'reason': record.reason, 'ssim': record.ssim.score,
            'bad_frame': -1 if record.bounds.frame is None
            else record.bounds.frame})
    write_kv_records(manifest_fpath(out_dir), manifest)
    return manifest


def load_asset(folder: Union[str, Path]) -> StoredAsset:
    """
    Reads one asset folder back.

    Raises
    ------
    DatasetSchemaError
        If files are missing or their sizes disagree
    """
    folder = Path(folder)
    try:
        record = read_kv_records(folder / 'record.txt')[0]
        n_frames, n_views = int(record['frames']), int(record['views'])
        mesh = read_obj(folder / 'mesh.obj')
        colors = read_point_cloud(folder / 'colors.pct')
        vertex_frames = np.stack([read_point_cloud(vertex_frame_fpath(folder,
                                                                      t))
                                  for t in range(n_frames)])
        cameras = read_cameras(cameras_fpath(folder))
        images = np.stack([
            np.stack([np.asarray(Image.open(view_png_fpath(folder, t, k))
                                 .convert('RGB'), dtype=np.float32) / 255.0
                      for k in range(n_views)])
            for t in range(n_frames)])
    except (FileNotFoundError, KeyError, IndexError) as exc:
        raise DatasetSchemaError(folder, str(exc))
    if vertex_frames.shape[1] != mesh.n_vertices \
            or colors.shape[0] != mesh.n_vertices:
        raise DatasetSchemaError(folder, 'vertex counts disagree')
    if len(cameras) != n_views:
        raise DatasetSchemaError(folder, 'camera count disagrees with views')
    return StoredAsset(asset_id=record['asset'], kind=record['kind'],
                       seed=int(record['seed']), mesh=mesh,
                       colors=colors.astype(np.float64),
                       vertex_frames=vertex_frames.astype(np.float64),
                       images=images, cameras=cameras)


def load_dataset(dataset_dir: Union[str, Path]) -> List[StoredAsset]:
    """
    Reads every accepted asset listed in the manifest.

    Raises
    ------
    DatasetSchemaError
        If the manifest is missing, no asset passed, or frame counts differ
    """
    dataset_dir = Path(dataset_dir)
    manifest = manifest_fpath(dataset_dir)
    if not manifest.is_file():
        raise DatasetSchemaError(dataset_dir, 'manifest.txt is missing')
    records = read_kv_records(manifest)
    assets = [load_asset(asset_dir(dataset_dir, r['asset']))
              for r in records if r.get('status') == 'pass']
    if not assets:
        raise DatasetSchemaError(dataset_dir, 'no accepted assets')
    if len({a.n_frames for a in assets}) != 1:
        raise DatasetSchemaError(dataset_dir, 'assets disagree on frame count')
    return assets


def stored_to_animated(stored: StoredAsset) -> AnimatedAsset:
    """AnimatedAsset view of a stored asset, for re-rendering"""
    return AnimatedAsset(rest_mesh=stored.mesh.with_vertices(
                             stored.vertex_frames[0]),
                         frames=stored.vertex_frames,
                         vertex_colors=stored.colors, kind=stored.kind,
                         seed=stored.seed)
