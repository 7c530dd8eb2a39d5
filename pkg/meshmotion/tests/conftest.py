import tempfile
import typing as tp
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from hypothesis.strategies import SearchStrategy
from PIL import Image

from meshmotion.config import RunConfig, DataConfig, VaeConfig, \
    DiffusionConfig, TrainConfig, PATH_CONFIG
from meshmotion.geomcore import TriangleMesh, write_obj
from meshmotion.runner import train_vae, train_diffusion
from meshmotion.toydata import build_dataset
from meshmotion.utils import load_run_config

THIS_DIR = Path(__file__).parent.resolve()

coordinate: tp.Final[SearchStrategy[float]] = st.floats(
    min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)


@st.composite
def point_clouds(draw_from: st.DrawFn, min_points=1, max_points=64):
    n = draw_from(st.integers(min_value=min_points, max_value=max_points))
    return draw_from(arrays(np.float64, (n, 3), elements=coordinate))


@st.composite
def trajectories(draw_from: st.DrawFn, max_frames=6, max_points=8):
    n_frames = draw_from(st.integers(min_value=1, max_value=max_frames))
    n_points = draw_from(st.integers(min_value=1, max_value=max_points))
    step = st.floats(min_value=-0.2, max_value=0.2, allow_nan=False)
    steps = draw_from(arrays(np.float64, (n_frames, n_points, 3),
                             elements=step))
    return np.cumsum(steps, axis=0)


@st.composite
def grid_clouds(draw_from: st.DrawFn, max_points=64):
    """Integer coordinates, so squared distances and their ties are exact"""
    n = draw_from(st.integers(min_value=1, max_value=max_points))
    cell = st.integers(min_value=-8, max_value=8)
    return draw_from(arrays(np.int64, (n, 3), elements=cell)).astype(float)


cloud_strategy: tp.Final[SearchStrategy[np.ndarray]] = point_clouds()
grid_cloud_strategy: tp.Final[SearchStrategy[np.ndarray]] = grid_clouds()
trajectory_strategy: tp.Final[SearchStrategy[np.ndarray]] = trajectories()
delta_strategy: tp.Final[SearchStrategy[float]] = st.floats(
    min_value=0.0, max_value=0.5, allow_nan=False)
seed_strategy: tp.Final[SearchStrategy[int]] = st.integers(
    min_value=0, max_value=2 ** 31 - 1)


def greedy_fps_oracle(points, m, seed_index=0):
    """Exhaustive max-min selection, lowest index on ties"""
    points = [tuple(float(c) for c in p) for p in points]
    selected = [seed_index]
    while len(selected) < m:
        best, best_score = None, -1.0
        for i in range(len(points)):
            if i in selected:
                continue
            score = min(sum((a - b) ** 2 for a, b in zip(points[i],
                                                          points[j]))
                        for j in selected)
            if score > best_score:
                best, best_score = i, score
        selected.append(best)
    return selected


def chamfer_oracle(a, b):
    """Double loop over all pairs"""
    def one_way(x, y):
        return np.mean([min(np.linalg.norm(p - q) for q in y) for p in x])
    return 0.5 * (one_way(a, b) + one_way(b, a))


def unit_cube_mesh(half=0.5):
    corners = np.array([[x, y, z] for x in (-half, half)
                        for y in (-half, half) for z in (-half, half)])
    faces = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
                      [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
                      [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(vertices=corners, faces=faces)


def tiny_config(dataset_dir='dataset', output_dir='runs',
                **kwargs) -> RunConfig:
    """A run small enough for unit tests on CPU"""
    config = RunConfig(
        data=DataConfig(dataset_dir=str(dataset_dir), n_assets=2,
                        kinds=('bounce', 'bend'), frames=4, image_size=16,
                        views=4, n_points=64),
        vae=VaeConfig(n_latents=16, width=32, latent_channels=8, depth=1,
                      heads=4, patch_size=8, vit_depth=1, n_octaves=4),
        diffusion=DiffusionConfig(depth=1, width=32, heads=4,
                                  latent_channels=8, steps=3),
        vae_train=TrainConfig(learning_rate=1e-3, batch_size=4, epochs=0,
                              max_steps=3, eval_every=2),
        diff_train=TrainConfig(learning_rate=1e-3, batch_size=2, epochs=0,
                               max_steps=3, eval_every=2),
        output_dir=str(output_dir), seed=0)
    return replace(config, **kwargs).validate()


@pytest.fixture(scope='session')
def tiny_dataset():
    """Two rendered toy assets shared by the slower tests"""
    dataset_dir = Path(tempfile.mkdtemp()) / 'dataset'
    config = tiny_config(dataset_dir)
    manifest = build_dataset(config, out_dir=dataset_dir)
    assert any(r['status'] == 'pass' for r in manifest), manifest
    return dataset_dir


@pytest.fixture(scope='session')
def tiny_checkpoints(tiny_dataset):
    """A VAE and a denoiser trained for a few steps on the tiny dataset"""
    output_dir = Path(tempfile.mkdtemp())
    config = tiny_config(tiny_dataset, output_dir)
    vae = train_vae(config, output_dir / 'vae')
    diff = train_diffusion(config, vae.checkpoint, output_dir / 'diff')
    return config, vae.checkpoint, diff.checkpoint


def desk_config(root, n_assets=None) -> RunConfig:
    """The shipped desk-scale configuration rooted at a scratch folder"""
    config = load_run_config(PATH_CONFIG['desk_config'], seed=0)
    data = replace(config.data, dataset_dir=str(Path(root) / 'dataset'),
                   n_assets=n_assets or config.data.n_assets)
    return replace(config, data=data,
                   output_dir=str(Path(root) / 'runs')).validate()


@pytest.fixture(scope='session')
def desk_vae():
    """Desk-scale dataset and a VAE trained on it for the full budget"""
    config = desk_config(tempfile.mkdtemp())
    build_dataset(config, out_dir=config.data.dataset_dir)
    result = train_vae(config, Path(config.output_dir) / 'vae')
    return config, result


@pytest.fixture(scope='session')
def desk_diffusion(desk_vae):
    """A denoiser trained on the latents of the first four desk assets"""
    _, vae = desk_vae
    config = desk_config(tempfile.mkdtemp(), n_assets=4)
    build_dataset(config, out_dir=config.data.dataset_dir)
    result = train_diffusion(config, vae.checkpoint,
                             Path(config.output_dir) / 'diff')
    return config, vae.checkpoint, result


def write_inputs(asset, folder, n_frames=None):
    """The rest mesh as OBJ and the front view as PNG frames"""
    folder = Path(folder)
    mesh_path = write_obj(folder / 'mesh.obj', asset.mesh.vertices,
                          asset.mesh.faces)
    frames_dir = folder / 'frames'
    frames_dir.mkdir()
    for t, image in enumerate(asset.images[:n_frames, 0]):
        pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(frames_dir / f'{t:03d}.png')
    return mesh_path, frames_dir
