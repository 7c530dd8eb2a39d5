"""Geometry primitives shared by the data, model and evaluation modules."""
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import trimesh
from torch import nn

from meshmotion import logger
from meshmotion.config import InvalidArgument, CheckpointFormatError, \
    POINT_CLOUD_MAGIC

UNIT_CUBE_HALF_SPAN = 0.9
FPS_POOL_FACTOR = 8


@dataclass
class PointCloud:
    """N x 3 finite coordinates in normalized scene units"""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidArgument(f'Expected N x 3 points, '
                                  f'Got {self.points.shape}')
        if self.points.shape[0] < 1:
            raise InvalidArgument('Point cloud is empty')
        if not np.all(np.isfinite(self.points)):
            raise InvalidArgument('Point cloud has non-finite coordinates')

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TriangleMesh:
    """Vertices V x 3 and faces F x 3 indexing into them"""
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InvalidArgument(f'Expected V x 3 vertices, '
                                  f'Got {self.vertices.shape}')
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidArgument('Mesh has non-finite vertices')
        n_vertices = self.vertices.shape[0]
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= n_vertices):
            raise InvalidArgument('Face index out of range [0, V)')
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                  | (f[:, 0] == f[:, 2])):
            raise InvalidArgument('Mesh has a face with repeated indices')

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def with_vertices(self, vertices):
        """Same topology, new vertex positions"""
        return TriangleMesh(vertices=vertices, faces=self.faces)


@dataclass
class Camera:
    """
    Camera with orientation rows (right, up, forward). ``projection`` is
    ``'orthographic'`` (uses ``half_extent``) or ``'pinhole'`` (uses
    ``focal`` in pixels).
    """
    center: np.ndarray
    orientation: np.ndarray
    height: int
    width: int
    projection: str = 'orthographic'
    half_extent: float = 1.0
    focal: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation,
                                      dtype=np.float64).reshape(3, 3)
        r = self.orientation
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-6:
            raise InvalidArgument('Camera orientation is not orthonormal')
        if self.height < 8 or self.width < 8:
            raise InvalidArgument(f'Camera image must be at least 8x8, '
                                  f'Got {self.height}x{self.width}')
        if self.projection == 'orthographic':
            if self.half_extent <= 0:
                raise InvalidArgument('half_extent must be positive')
        elif self.projection == 'pinhole':
            if self.focal <= 0:
                raise InvalidArgument('focal length must be positive')
        else:
            raise InvalidArgument(f'Unknown projection {self.projection}')

    @property
    def forward(self):
        return self.orientation[2]

    def to_local(self, points):
        """Points in camera coordinates (x right, y up, z forward)"""
        return (np.asarray(points, dtype=np.float64) - self.center) \
            @ self.orientation.T

    def project(self, points):
        """
        Continuous pixel coordinates (column j, row i) and depth along the
        forward axis. Pixel centres sit at integer coordinates.
        """
        local = self.to_local(points)
        x, y, z = local[:, 0], local[:, 1], local[:, 2]
        h, w = self.height, self.width
        if self.projection == 'orthographic':
            j = (x / self.half_extent + 1.0) * w / 2.0 - 0.5
            i = (1.0 - y / self.half_extent) * h / 2.0 - 0.5
        else:
            with np.errstate(divide='ignore', invalid='ignore'):
                j = x / z * self.focal + w / 2.0 - 0.5
                i = -y / z * self.focal + h / 2.0 - 0.5
        return j, i, z


@dataclass
class RaySheet:
    """Per-pixel unit ray directions and moments, both H x W x 3"""
    directions: np.ndarray
    moments: np.ndarray

    def as_channels(self):
        """H x W x 6 array ordered (d, m)"""
        return np.concatenate([self.directions, self.moments], axis=-1)


def _as_points(pc) -> np.ndarray:
    if isinstance(pc, PointCloud):
        return pc.points
    return PointCloud(pc).points


def squared_distances(points: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from every row of points to anchor"""
    delta = points - anchor
    return np.einsum('ij,ij->i', delta, delta)


def farthest_point_sample(pc, m: int, seed_index: int = 0) -> np.ndarray:
    """
    Greedy max-min subsampling.

    Each successive index maximizes the minimum distance to everything
    selected so far. Ties go to the lowest index.

    Parameters
    ----------
    pc : PointCloud or array_like
        N x 3 points
    m : int
        number of indices to return, 1 <= m <= N
    seed_index : int
        first selected index

    Returns
    -------
    np.ndarray
        int64 indices of length m, distinct

    Raises
    ------
    InvalidArgument
        If m is outside [1, N] or seed_index outside [0, N)
    """
    points = _as_points(pc)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise InvalidArgument(f'Expected 1 <= m <= {n}, Got m={m}')
    if not 0 <= seed_index < n:
        raise InvalidArgument(f'seed_index {seed_index} outside [0, {n})')
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_dist = squared_distances(points, points[seed_index])
    min_dist[seed_index] = -np.inf
    for k in range(1, m):
        idx = int(np.argmax(min_dist))
        selected[k] = idx
        min_dist = np.minimum(min_dist, squared_distances(points, points[idx]))
        min_dist[selected[:k + 1]] = -np.inf
    return selected


def face_areas(vertices, faces) -> np.ndarray:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def face_normals(vertices, faces) -> np.ndarray:
    """Unit face normals, zero for degenerate faces"""
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    return np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)


def _random_barycentric(n, rng):
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    return np.column_stack([1.0 - uv.sum(axis=1), uv[:, 0], uv[:, 1]])


def sample_surface_barycentric(mesh: TriangleMesh, n_random: int, n_fps: int,
                               rng: np.random.Generator):
    """
    Surface samples as (face index, barycentric weights), so the same
    samples can be carried through every frame of an animation.

    The first ``n_random`` samples are area-weighted uniform draws, the
    remaining ``n_fps`` are picked by farthest point sampling from a pool
    of ``8 * (n_random + n_fps)`` uniform draws.

    Raises
    ------
    InvalidArgument
        If the total count is zero or the mesh has no area
    """
    if n_random < 0 or n_fps < 0 or n_random + n_fps < 1:
        raise InvalidArgument(f'Expected n_random + n_fps >= 1, '
                              f'Got {n_random} + {n_fps}')
    if mesh.faces.shape[0] == 0:
        raise InvalidArgument('Mesh has no faces')
    areas = face_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if not total > 0:
        raise InvalidArgument('Mesh has zero surface area')
    probs = areas / total

    face_index = rng.choice(len(areas), size=n_random, p=probs)
    bary = _random_barycentric(n_random, rng)
    if n_fps:
        pool_size = FPS_POOL_FACTOR * (n_random + n_fps)
        pool_faces = rng.choice(len(areas), size=pool_size, p=probs)
        pool_bary = _random_barycentric(pool_size, rng)
        pool = interpolate_surface(mesh.vertices, mesh.faces, pool_faces,
                                   pool_bary)
        keep = farthest_point_sample(pool, n_fps, seed_index=0)
        face_index = np.concatenate([face_index, pool_faces[keep]])
        bary = np.concatenate([bary, pool_bary[keep]])
    return face_index.astype(np.int64), bary


def interpolate_surface(vertices, faces, face_index, barycentric):
    """Positions of barycentric samples on the given vertex positions"""
    tri = np.asarray(vertices)[np.asarray(faces)[face_index]]
    return np.einsum('nk,nkd->nd', barycentric, tri)


def sample_surface(mesh: TriangleMesh, n_random: int, n_fps: int,
                   rng: np.random.Generator) -> PointCloud:
    """Random plus farthest-point surface samples, concatenated"""
    face_index, bary = sample_surface_barycentric(mesh, n_random, n_fps, rng)
    return PointCloud(interpolate_surface(mesh.vertices, mesh.faces,
                                          face_index, bary))


class PointEmbed(nn.Module):
    """
    Fourier features of xyz (``n_octaves`` frequencies per axis, sin and
    cos) concatenated with xyz itself, followed by a linear map to
    ``channels``.

    The linear map sees ``6 * n_octaves + 3`` raw features per point:
    ``n_features`` sinusoids plus the three coordinates, 51 with the
    default 8 octaves. ``in_features`` holds that count.
    """

    def __init__(self, channels: int, n_octaves: int = 8):
        super().__init__()
        if channels < 1 or n_octaves < 1:
            raise InvalidArgument('channels and n_octaves must be positive')
        self.channels = channels
        self.n_octaves = n_octaves
        freqs = (2.0 ** torch.arange(n_octaves, dtype=torch.float32)) * math.pi
        self.register_buffer('freqs', freqs, persistent=False)
        self.n_features = 3 * 2 * n_octaves
        self.in_features = self.n_features + 3
        self.mlp = nn.Linear(self.in_features, channels)

    def fourier(self, points: torch.Tensor) -> torch.Tensor:
        angles = points.unsqueeze(-1) * self.freqs.to(points.dtype)
        angles = angles.flatten(-2)
        return torch.cat([angles.sin(), angles.cos()], dim=-1)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.shape[-1] != 3:
            raise InvalidArgument(f'Expected (..., 3) points, '
                                  f'Got {tuple(points.shape)}')
        return self.mlp(torch.cat([self.fourier(points), points], dim=-1))


def positional_embed(points, embed: PointEmbed) -> torch.Tensor:
    """Embeds a Q x 3 array with a PointEmbed, without tracking gradients"""
    param = next(embed.parameters())
    points = torch.as_tensor(np.asarray(points), dtype=param.dtype,
                             device=param.device)
    with torch.no_grad():
        return embed(points)


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Orientation rows (right, up, forward) of a camera facing target"""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise InvalidArgument('Camera center coincides with its target')
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise InvalidArgument('Camera up vector is parallel to the view axis')
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    return np.stack([right, true_up, forward])


def orthogonal_cameras(n_views: int = 4, image_size: int = 64,
                       half_extent: float = 1.0, distance: float = 3.0):
    """
    Orthographic cameras on a ring around the y axis, view 0 on +z looking
    along -z, the others at equal azimuth steps.
    """
    if n_views < 1:
        raise InvalidArgument('n_views must be positive')
    cameras = []
    for k in range(n_views):
        azimuth = 2.0 * math.pi * k / n_views
        center = distance * np.array([math.sin(azimuth), 0.0,
                                      math.cos(azimuth)])
        cameras.append(Camera(center=center,
                              orientation=look_at(center, np.zeros(3)),
                              height=image_size, width=image_size,
                              projection='orthographic',
                              half_extent=half_extent))
    return cameras


def plucker_embed(camera: Camera) -> RaySheet:
    """
    Per-pixel Plücker rays through pixel centres: unit direction d and
    moment m = o x d.
    """
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing='ij')
    right, up, forward = camera.orientation
    if camera.projection == 'orthographic':
        x = ((cols + 0.5) / w * 2.0 - 1.0) * camera.half_extent
        y = (1.0 - (rows + 0.5) / h * 2.0) * camera.half_extent
        origins = camera.center + x[..., None] * right + y[..., None] * up
        directions = np.broadcast_to(forward, (h, w, 3)).copy()
    else:
        d_cam = np.stack([(cols + 0.5 - w / 2.0) / camera.focal,
                          -(rows + 0.5 - h / 2.0) / camera.focal,
                          np.ones_like(cols)], axis=-1)
        directions = d_cam @ camera.orientation
        directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
        origins = np.broadcast_to(camera.center, (h, w, 3))
    moments = np.cross(origins, directions)
    return RaySheet(directions=directions, moments=moments)


def _nearest_distances(a, b, chunk=1024):
    out = np.empty(a.shape[0], dtype=np.float64)
    b_sq = np.einsum('ij,ij->i', b, b)
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        d2 = (np.einsum('ij,ij->i', block, block)[:, None] + b_sq[None, :]
              - 2.0 * block @ b.T)
        nearest = np.argmin(d2, axis=1)
        delta = block - b[nearest]
        out[start:start + chunk] = np.sqrt(np.einsum('ij,ij->i', delta,
                                                     delta))
    return out


def chamfer_distance(a, b) -> float:
    """
    Symmetric mean nearest-neighbour distance (unsquared L2)

    Raises
    ------
    InvalidArgument
        If either cloud is empty
    """
    a, b = _as_points(a), _as_points(b)
    return 0.5 * (float(_nearest_distances(a, b).mean())
                  + float(_nearest_distances(b, a).mean()))


def normalize_to_unit_cube(mesh: TriangleMesh):
    """
    Centres the bounding box at the origin and scales the longest axis
    to span [-0.9, 0.9]. Vertices map as ``v * scale + offset``.

    Returns
    -------
    tuple
        (normalized mesh, scale, offset)

    Raises
    ------
    InvalidArgument
        If the mesh is empty or all vertices coincide
    """
    vertices = mesh.vertices
    if vertices.shape[0] == 0:
        raise InvalidArgument('Cannot normalize an empty mesh')
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        raise InvalidArgument('All mesh vertices are identical')
    scale = 2.0 * UNIT_CUBE_HALF_SPAN / extent
    offset = -0.5 * (lo + hi) * scale
    return mesh.with_vertices(vertices * scale + offset), scale, offset


def denormalize(vertices, scale: float, offset) -> np.ndarray:
    """Inverse of the normalize_to_unit_cube transform"""
    return (np.asarray(vertices, dtype=np.float64) - offset) / scale


def read_obj(fpath: Union[str, Path]) -> TriangleMesh:
    """
    Reads an OBJ file through trimesh without merging or reordering
    vertices. Polygons come back triangulated, faces with a repeated
    vertex are dropped.
    """
    fpath = Path(fpath)
    if not fpath.is_file():
        raise FileNotFoundError(f'Mesh file {fpath} does not exist')
    try:
        loaded = trimesh.load(fpath, file_type='obj', process=False,
                              force='mesh', maintain_order=True)
    except (ValueError, IndexError, TypeError, KeyError) as err:
        raise InvalidArgument(f'Cannot parse {fpath}: {err}') from err
    vertices = np.asarray(getattr(loaded, 'vertices', []), dtype=np.float64)
    if vertices.size == 0:
        raise InvalidArgument(f'{fpath} has no vertices')
    faces = np.asarray(getattr(loaded, 'faces', []),
                       dtype=np.int64).reshape(-1, 3)
    keep = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2]))
    if not keep.all():
        logger.warning(f'Dropped {int((~keep).sum())} degenerate faces '
                       f'from {fpath}')
    return TriangleMesh(vertices=vertices.reshape(-1, 3), faces=faces[keep])


def write_obj(fpath: Union[str, Path], vertices, faces) -> Path:
    """Writes vertices with 17 significant digits so they read back exactly"""
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    lines = [f'v {x:.17g} {y:.17g} {z:.17g}'
             for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f'f {a + 1} {b + 1} {c + 1}' for a, b, c in np.asarray(faces)]
    with open(fpath, 'w', encoding='utf-8', newline='\n') as fp:
        fp.write('\n'.join(lines) + '\n')
    return fpath


def write_point_cloud(fpath: Union[str, Path], points) -> Path:
    """PCT1: magic, uint32 N, then N x 3 float32 little-endian"""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidArgument(f'Expected N x 3 points, Got {points.shape}')
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'wb') as fp:
        fp.write(POINT_CLOUD_MAGIC + struct.pack('<I', points.shape[0]))
        fp.write(np.ascontiguousarray(points, dtype='<f4').tobytes())
    return fpath


def read_point_cloud(fpath: Union[str, Path]) -> np.ndarray:
    """Reads a PCT1 file as an N x 3 float32 array"""
    fpath = Path(fpath)
    if not fpath.is_file():
        raise FileNotFoundError(f'Point cloud {fpath} does not exist')
    data = fpath.read_bytes()
    if len(data) < 8 or data[:4] != POINT_CLOUD_MAGIC:
        raise CheckpointFormatError(f'{fpath} is not a PCT1 file')
    n = struct.unpack('<I', data[4:8])[0]
    if len(data) != 8 + 12 * n:
        raise CheckpointFormatError(f'{fpath} is truncated or has trailing '
                                    f'bytes')
    return np.frombuffer(data[8:], dtype='<f4').reshape(n, 3) \
        .astype(np.float32)
