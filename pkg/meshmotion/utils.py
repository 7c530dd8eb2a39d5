import hashlib
import os
import struct
import tempfile
from pathlib import Path
from typing import Union, List, Iterable, Sized, Dict, Tuple, Optional

import numpy as np
from dictdiffer import diff

from meshmotion import logger
from meshmotion.config import RunConfig, ConfigError, CheckpointFormatError, \
    IncompatibleCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, \
    TRAJECTORY_MAGIC, SEED_ENV_VAR, InvalidArgument


def is_writable(dir_path):
    """
    Check if the directory is writable. For ex. if the directory is
    mounted on a read-only file system, it will return False.
    """
    try:
        with tempfile.TemporaryFile(dir=dir_path, mode='w') as testfile:
            testfile.write("OS write to directory test.")
            logger.info(f"Created temp file in {dir_path}")
    except (OSError, IOError) as e:
        logger.error(e)
        return False
    return True


def is_integer_number(n: Union[int, float]) -> bool:
    """Checks whether n is an integer, also accepts floats like 2.0"""
    if isinstance(n, bool):
        return False
    if isinstance(n, (int, np.integer)):
        return True
    if isinstance(n, (float, np.floating)):
        return float(n).is_integer()
    return False


def split_list(items: Sized, num_chunks: int) -> Iterable:
    """
    Given a list of n elements, split it into k parts, where k = num_chunks.
    The first n % k parts have floor(n/k) + 1 elements, the rest floor(n/k).

    Parameters
    ----------
    items : Sized
        list to split
    num_chunks : int
        number of parts

    Returns
    -------
    generator over the consecutive parts

    Raises
    ------
    InvalidArgument
        If the number of chunks is not a positive integer or the list is empty
    """
    if not is_integer_number(num_chunks):
        raise InvalidArgument(f'Number of chunks must be an integer. '
                              f'Got {num_chunks}')
    num_chunks = int(num_chunks)
    if num_chunks < 1:
        raise InvalidArgument('Cannot divide list into chunks of size 0')
    if len(items) == 0:
        raise InvalidArgument('List of items is empty!')
    if len(items) < num_chunks:
        logger.warning(
            f'Got num_chunks={num_chunks}, list_size={len(items)}. '
            f'Expected num_chunks < list_size', stacklevel=2)
        num_chunks = len(items)
    k, m = divmod(len(items), num_chunks)
    return (items[i * k + min(i, m):(i + 1) * k + min(i + 1, m)]
            for i in range(num_chunks))


def txt2list(txt_filepath: Union[str, Path]) -> list:
    """
    Given a filepath to a text file, read all the non-empty lines and
    return them stripped, as a list.

    Raises
    ------
    FileNotFoundError
        If the file does not exist
    """
    txt_filepath = Path(txt_filepath)
    if not txt_filepath.is_file():
        raise FileNotFoundError(f'Invalid path {txt_filepath}')
    with open(txt_filepath, 'r', encoding='utf-8') as fp:
        line_list = [line.strip() for line in fp.readlines() if line.strip()]
    return line_list


def _format_kv_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    text = str(value)
    if not text or any(c.isspace() for c in text) or '=' in text:
        raise InvalidArgument(f'Record value {text!r} must be non-empty '
                              f'and contain no spaces or "="')
    return text


def write_kv_records(fpath: Union[str, Path],
                     records: Iterable[Dict[str, object]]) -> Path:
    """
    Writes one ``key=value`` record per line. Floats are written with
    ``repr`` so they read back bit-exactly.

    Parameters
    ----------
    fpath : str or Path
        output file, parent folders are created
    records : iterable of dict
        ordered mapping per line

    Returns
    -------
    Path to the written file
    """
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in records:
        pairs = [f'{k}={_format_kv_value(v)}' for k, v in record.items()]
        lines.append(' '.join(pairs))
    with open(fpath, 'w', encoding='utf-8', newline='\n') as fp:
        fp.write('\n'.join(lines))
        if lines:
            fp.write('\n')
    return fpath


def read_kv_records(fpath: Union[str, Path]) -> List[Dict[str, str]]:
    """Reads records written by :func:`write_kv_records`, values as str"""
    records = []
    for lineno, line in enumerate(txt2list(fpath), start=1):
        record = {}
        for pair in line.split():
            key, sep, value = pair.partition('=')
            if not sep:
                raise ConfigError(f'{fpath}:{lineno}: expected key=value, '
                                  f'got {pair!r}')
            record[key] = value
        records.append(record)
    return records


def get_config_from_file(config_path: Union[Path, str]) -> RunConfig:
    """
    Read the configuration file and return the parsed run configuration.
    Lines are ``section.key = value``, ``#`` starts a comment.

    Parameters
    ----------
    config_path : Path or str
        path to the configuration file

    Returns
    -------
    RunConfig
        defaults overridden by the contents of the configuration file

    Raises
    ------
    TypeError
        If the path is neither str nor Path
    FileNotFoundError
        If the file does not exist
    ConfigError
        If a line is malformed or names an unknown key
    """
    try:
        config_path = Path(config_path)
    except TypeError:
        raise TypeError('Invalid path to the configuration file.'
                        f'Expected Path or str, got {type(config_path)}')
    if not config_path.is_file():
        raise FileNotFoundError('Either provided configuration '
                                f'file {config_path} does not exist or it is '
                                'not a file.')

    overrides = {}
    with open(config_path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            if not sep or not key.strip():
                raise ConfigError(f'{config_path}:{lineno}: expected '
                                  f'"section.key = value", got {line!r}')
            overrides[key.strip()] = value.strip()
    return RunConfig().apply_overrides(overrides)


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    """Turns ``['vae.width=64', ...]`` into a mapping for apply_overrides"""
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f'Expected section.key=value, got {pair!r}')
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_seed(cli_seed: Optional[int], config_seed: int) -> int:
    """Seed precedence: command line, then environment, then config"""
    if cli_seed is not None:
        return int(cli_seed)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None and env_seed.strip():
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f'{SEED_ENV_VAR} must be an integer, '
                              f'Got {env_seed!r}')
    return int(config_seed)


def load_run_config(config_path=None, overrides=None,
                    seed=None) -> RunConfig:
    """Reads, overrides, seeds and validates a run configuration"""
    if config_path is None:
        config = RunConfig()
    else:
        config = get_config_from_file(config_path)
    config.apply_overrides(overrides or {})
    config.seed = resolve_seed(seed, config.seed)
    return config.validate()


def file_sha256(fpath: Union[str, Path]) -> str:
    """Hex digest of a file's bytes"""
    sha = hashlib.sha256()
    with open(fpath, 'rb') as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b''):
            sha.update(chunk)
    return sha.hexdigest()


def text_sha256(*parts) -> str:
    """Hex digest of the string forms of ``parts``, one per line"""
    sha = hashlib.sha256()
    for part in parts:
        sha.update(f'{part}\n'.encode('utf-8'))
    return sha.hexdigest()


def _pack_str(text: str) -> bytes:
    data = text.encode('utf-8')
    return struct.pack('<I', len(data)) + data


class _Reader:
    """Cursor over a byte buffer raising CheckpointFormatError on truncation"""

    def __init__(self, data: bytes, fpath):
        self.data = data
        self.pos = 0
        self.fpath = fpath

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f'{self.fpath} is truncated')
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def uint32(self):
        return struct.unpack('<I', self.take(4))[0]

    def string(self):
        return self.take(self.uint32()).decode('utf-8')


def save_checkpoint(fpath: Union[str, Path], tag: str,
                    records: List[Tuple[str, str]],
                    tensors: Dict[str, np.ndarray]) -> Path:
    """
    Writes the versioned checkpoint container: a section tag, the echoed
    config as key/value strings and named float32 tensors.

    Parameters
    ----------
    fpath : str or Path
        output file
    tag : str
        ``'vae'`` or ``'diffusion'``
    records : list of (str, str)
        config echo
    tensors : dict
        parameter name -> array, stored as float32 little-endian

    Returns
    -------
    Path to the written file
    """
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CHECKPOINT_MAGIC, struct.pack('<I', CHECKPOINT_VERSION),
              _pack_str(tag), struct.pack('<I', len(records))]
    for key, value in records:
        chunks.append(_pack_str(key))
        chunks.append(_pack_str(value))
    chunks.append(struct.pack('<I', len(tensors)))
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype='<f4')
        chunks.append(_pack_str(name))
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.tobytes())
    with open(fpath, 'wb') as fp:
        fp.write(b''.join(chunks))
    return fpath


def load_checkpoint(fpath: Union[str, Path], expected_tag: str = None):
    """
    Reads a checkpoint container.

    Returns
    -------
    tuple
        (tag, list of (key, value) records, dict name -> float32 array)

    Raises
    ------
    FileNotFoundError
        If the file does not exist
    CheckpointFormatError
        On bad magic, unsupported version, truncation or wrong tag
    """
    fpath = Path(fpath)
    if not fpath.is_file():
        raise FileNotFoundError(f'Checkpoint {fpath} does not exist')
    reader = _Reader(fpath.read_bytes(), fpath)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f'{fpath} is not a meshmotion checkpoint')
    version = reader.uint32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f'{fpath} has unsupported version '
                                    f'{version}')
    tag = reader.string()
    if expected_tag is not None and tag != expected_tag:
        raise CheckpointFormatError(f'Expected a {expected_tag} checkpoint, '
                                    f'Got {tag} in {fpath}')
    records = [(reader.string(), reader.string())
               for _ in range(reader.uint32())]
    tensors = {}
    for _ in range(reader.uint32()):
        name = reader.string()
        ndim = reader.uint32()
        shape = struct.unpack(f'<{ndim}I', reader.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype='<f4').reshape(shape)
    if reader.pos != len(reader.data):
        raise CheckpointFormatError(f'{fpath} has trailing bytes')
    return tag, records, tensors


def config_differences(first: Dict[str, str], second: Dict[str, str],
                       keys: Iterable[str] = None) -> list:
    """Lists dictdiffer changes between two echoed configs"""
    if keys is not None:
        keys = list(keys)
        first = {k: first.get(k) for k in keys}
        second = {k: second.get(k) for k in keys}
    return list(diff(first, second))


def check_compatible(first: Dict[str, str], second: Dict[str, str],
                     keys: Iterable[str]):
    """Raises IncompatibleCheckpoint if the configs disagree on any key"""
    differences = config_differences(first, second, keys)
    if differences:
        raise IncompatibleCheckpoint(differences)


def save_trajectory(fpath: Union[str, Path], positions: np.ndarray) -> Path:
    """Writes a T x N x 3 trajectory as TRJ1 float32 little-endian"""
    positions = np.asarray(positions)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise InvalidArgument(f'Expected T x N x 3 positions, '
                              f'Got {positions.shape}')
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    n_frames, n_points, _ = positions.shape
    header = TRAJECTORY_MAGIC + struct.pack('<II', n_frames, n_points)
    with open(fpath, 'wb') as fp:
        fp.write(header)
        fp.write(np.ascontiguousarray(positions, dtype='<f4').tobytes())
    return fpath


def load_trajectory(fpath: Union[str, Path]) -> np.ndarray:
    """Reads a TRJ1 trajectory file as a T x N x 3 float32 array"""
    fpath = Path(fpath)
    if not fpath.is_file():
        raise FileNotFoundError(f'Trajectory {fpath} does not exist')
    reader = _Reader(fpath.read_bytes(), fpath)
    if reader.take(4) != TRAJECTORY_MAGIC:
        raise CheckpointFormatError(f'{fpath} is not a TRJ1 file')
    n_frames, n_points = reader.uint32(), reader.uint32()
    payload = reader.take(4 * 3 * n_frames * n_points)
    if reader.pos != len(reader.data):
        raise CheckpointFormatError(f'{fpath} has trailing bytes')
    positions = np.frombuffer(payload, dtype='<f4')
    return positions.reshape(n_frames, n_points, 3).astype(np.float32)
