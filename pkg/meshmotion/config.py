import dataclasses
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

THIS_DIR = Path(__file__).parent.resolve()


def configure_logger(log, output_dir, mode='w', level='WARNING'):
    """
    Initiate log files.

    Parameters
    ----------
    log : logging.Logger
        The logger object.
    mode : str, (``'w'``, ``'a'``)
        The writing mode to the log files.
        Defaults to ``'w'``, overwrites previous files.
    output_dir : str or Path
        The path to the output directory.
    level : str,
        The level of logging to the console. One of ['WARNING', 'ERROR']
    """

    console_handler = logging.StreamHandler()  # creates the handler
    warn_formatter = ('%(filename)s:%(name)s:%(funcName)s:%(lineno)d:'
                      ' %(message)s')
    error_formatter = '%(asctime)s - %(levelname)s - %(message)s'
    if output_dir is None:
        output_dir = tempfile.gettempdir()
    output_dir = Path(output_dir) / '.meshmotion'
    output_dir.mkdir(parents=True, exist_ok=True)

    options = {
        "warn" : {
            'level'    : logging.WARN,
            'file'     : output_dir / 'warn.log',
            'formatter': warn_formatter
        },
        "error": {
            'level'    : logging.ERROR,
            'file'     : output_dir / 'error.log',
            'formatter': error_formatter
        }
    }

    if level == 'ERROR':
        config = options['error']
    else:
        config = options['warn']

    file_handler = logging.FileHandler(config['file'], mode=mode)
    file_handler.setLevel(config['level'])
    file_handler.setFormatter(logging.Formatter(config['formatter']))
    log.addHandler(file_handler)

    console_handler.setLevel(config['level'])  # sets the handler info
    console_handler.setFormatter(logging.Formatter(config['formatter']))
    log.addHandler(console_handler)
    return log


PATH_CONFIG = {
    'output_dir': Path.home() / 'meshmotion_runs',
    'desk_config': THIS_DIR / 'resources' / 'desk.cfg',
    'full_config': THIS_DIR / 'resources' / 'full.cfg',
}

SEED_ENV_VAR = 'MESHMOTION_SEED'
POINT_CLOUD_MAGIC = b'PCT1'
TRAJECTORY_MAGIC = b'TRJ1'
CHECKPOINT_MAGIC = b'MMCK'
CHECKPOINT_VERSION = 1
OBJ_FRAME_PATTERN = 'frame_{:04d}.obj'
MOTION_KINDS = ('bend', 'twist', 'bounce', 'orbit', 'stretch')


def manifest_fpath(folder):
    """Constructs the path to the dataset manifest"""
    return Path(folder) / 'manifest.txt'


def asset_dir(folder, asset_id):
    """Constructs the path to the folder holding a single asset"""
    return Path(folder) / asset_id


def view_png_fpath(folder, t, view):
    """Constructs the path to the PNG of one view at timestamp t"""
    return Path(folder) / f'view_{t:03d}_{view:d}.png'


def vertex_frame_fpath(folder, t):
    """Constructs the path to the vertex positions at timestamp t"""
    return Path(folder) / f'verts_{t:03d}.pct'


def cameras_fpath(folder):
    """Constructs the path to the camera records of an asset"""
    return Path(folder) / 'cameras.txt'


def checkpoint_fpath(folder, name):
    """Constructs the path to a checkpoint file"""
    return Path(folder) / f'{name}.ckpt'


def metrics_log_fpath(folder, name):
    """Constructs the path to a per-step metrics log"""
    return Path(folder) / f'{name}_metrics.txt'


def latent_cache_fpath(folder, digest):
    """Constructs the path to the cached diffusion training latents"""
    return Path(folder) / f'latents_{digest[:16]}.pt'


def report_fpath(folder, fname, ext='txt'):
    """Constructs the path to a report file"""
    return Path(folder) / f'{fname}.{ext}'


class MeshMotionException(Exception):
    """Base class of every error raised by meshmotion"""


class InvalidArgument(MeshMotionException, ValueError):
    """Raised when an operation receives arguments outside its domain"""


class ConfigError(MeshMotionException):
    """Raised for malformed, missing or inconsistent configuration"""


class DatasetSchemaError(ConfigError):
    """Custom error that is raised when a dataset folder is malformed."""

    def __init__(self, path, reason):
        super().__init__(
            f"Dataset at {path} does not match the expected layout: {reason}")


class IncompatibleCheckpoint(ConfigError):
    """Custom error that is raised when two checkpoints cannot be combined."""

    def __init__(self, differences):
        lines = '; '.join(str(d) for d in differences)
        super().__init__(f"Checkpoints are incompatible: {lines}")


class NumericError(MeshMotionException, ArithmeticError):
    """Raised when activations or losses stop being finite"""


class FrameDecodeError(MeshMotionException, OSError):
    """Custom error that is raised when a video frame cannot be read."""

    def __init__(self, path, reason):
        super().__init__(f"Could not decode frame {path}: {reason}")


class CheckpointFormatError(MeshMotionException):
    """Raised when a container file has a bad header or is truncated"""


@dataclass
class DataConfig:
    """Procedural dataset and rendering settings"""
    dataset_dir: str = 'dataset'
    n_assets: int = 8
    kinds: Tuple[str, ...] = MOTION_KINDS
    frames: int = 10
    raw_frames: int = 0
    image_size: int = 64
    views: int = 4
    n_points: int = 2048
    ssim_threshold: float = 0.995
    bbox_min: float = -1.0
    bbox_max: float = 1.0
    max_step: float = 0.25
    workers: int = 1


@dataclass
class VaeConfig:
    """Hyper-parameters of the motion VAE"""
    n_latents: int = 64
    width: int = 128
    latent_channels: int = 32
    depth: int = 4
    heads: int = 4
    patch_size: int = 8
    vit_depth: int = 4
    n_octaves: int = 8
    dis_weight: float = 0.1
    mse_weight: float = 1.0
    kl_weight: float = 0.001

    def validate(self):
        if self.width % self.heads:
            raise ConfigError(f'vae.width={self.width} is not divisible by '
                              f'vae.heads={self.heads}')
        if self.width % 2:
            raise ConfigError('vae.width must be even for pixel shuffle')
        if self.dis_weight < 0 or self.mse_weight < 0 or self.kl_weight < 0:
            raise ConfigError('vae loss weights must be non-negative')
        if min(self.n_latents, self.latent_channels, self.patch_size) < 1:
            raise ConfigError('vae sizes must be positive')
        return self


@dataclass
class DiffusionConfig:
    """Hyper-parameters of the latent diffusion model"""
    depth: int = 6
    width: int = 128
    heads: int = 4
    latent_channels: int = 32
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 18
    p_mean: float = -1.2
    p_std: float = 1.2
    subset_divisor: int = 3

    def validate(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError('diffusion sigmas must satisfy '
                              '0 < sigma_min < sigma_max')
        if self.steps < 2:
            raise ConfigError('diffusion.steps must be at least 2')
        if self.width % self.heads:
            raise ConfigError(f'diffusion.width={self.width} is not divisible'
                              f' by diffusion.heads={self.heads}')
        return self

    def subset_size(self, frames):
        """Number of timestamps drawn per training example"""
        return int(math.ceil(frames / self.subset_divisor))


@dataclass
class TrainConfig:
    """Optimizer and schedule settings of one training loop"""
    learning_rate: float = 1e-3
    min_learning_rate: float = 0.0
    batch_size: int = 4
    epochs: int = 10
    max_steps: int = 0
    eval_every: int = 100
    val_fraction: float = 0.0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError('batch_size must be positive')
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError('epochs and max_steps must be non-negative')
        if self.eval_every < 1:
            raise ConfigError('eval_every must be positive')
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError('val_fraction must lie in [0, 1)')
        return self


_SECTIONS = ('data', 'vae', 'diffusion', 'vae_train', 'diff_train')


@dataclass
class RunConfig:
    """Every setting of a run, echoed into checkpoints and reports"""
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    vae_train: TrainConfig = field(default_factory=TrainConfig)
    diff_train: TrainConfig = field(default_factory=TrainConfig)
    delta: float = 0.01
    seed: int = 0
    output_dir: str = 'runs'
    device: str = 'cpu'

    def validate(self):
        if self.delta < 0:
            raise ConfigError(f'delta must be non-negative, Got {self.delta}')
        if self.data.frames < 2:
            raise ConfigError('data.frames must be at least 2')
        if self.data.image_size < 8:
            raise ConfigError('data.image_size must be at least 8')
        if self.data.image_size % self.vae.patch_size:
            raise ConfigError('data.image_size must be divisible by '
                              'vae.patch_size')
        if self.data.n_points < self.vae.n_latents:
            raise ConfigError('data.n_points must be >= vae.n_latents')
        unknown = set(self.data.kinds) - set(MOTION_KINDS)
        if unknown:
            raise ConfigError(f'Unknown motion kinds {sorted(unknown)}')
        self.vae.validate()
        self.diffusion.validate()
        self.vae_train.validate()
        self.diff_train.validate()
        return self

    def to_records(self) -> List[Tuple[str, str]]:
        """Flattens the config to ``section.key`` / value string pairs"""
        records = []
        for name in _SECTIONS:
            section = getattr(self, name)
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                records.append((f'{name}.{f.name}', _format_value(value)))
        for key in ('delta', 'seed', 'output_dir', 'device'):
            records.append((key, _format_value(getattr(self, key))))
        return records

    def section_records(self, name) -> Dict[str, str]:
        """Records of one section, keyed without the section prefix"""
        prefix = f'{name}.'
        return {k[len(prefix):]: v for k, v in self.to_records()
                if k.startswith(prefix)}

    def apply_overrides(self, overrides: Dict[str, str]):
        """
        Sets fields from ``section.key`` -> string pairs, parsing each value
        by the type of the field it replaces.

        Raises
        ------
        ConfigError
            If a key does not name a known field or the value cannot be parsed
        """
        for key, raw in overrides.items():
            key = key.strip()
            if '.' in key:
                section_name, attr = key.split('.', 1)
                if section_name not in _SECTIONS:
                    raise ConfigError(f'Unknown config section in {key!r}')
                target = getattr(self, section_name)
            else:
                target, attr = self, key
            if attr in _SECTIONS or not hasattr(target, attr):
                raise ConfigError(f'Unknown config key {key!r}')
            current = getattr(target, attr)
            setattr(target, attr, _parse_value(raw, current, key))
        return self

    @classmethod
    def from_records(cls, records: Dict[str, str]):
        return cls().apply_overrides(records)


def _format_value(value):
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw, current, key):
    raw = str(raw).strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(raw)
            return raw.lower() in ('true', '1', 'yes')
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(v.strip() for v in raw.split(',') if v.strip())
    except ValueError:
        raise ConfigError(f'Could not parse {key} = {raw!r} as '
                          f'{type(current).__name__}')
    return raw
