from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, List

import numpy as np
from tqdm import tqdm

from meshmotion import logger
from meshmotion.config import InvalidArgument
from meshmotion.utils import split_list, is_integer_number


def spawn_seeds(root_seed: int, count: int) -> List[int]:
    """
    Independent per-item seeds derived from one root seed. Item i always
    gets the same seed regardless of the worker that processes it.
    """
    children = np.random.SeedSequence(int(root_seed)).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0])
            for child in children]


def _run_chunk(func, chunk):
    return [func(*args) for args in chunk]


def parallel_map(func: Callable, items: Sequence[tuple], workers: int = 1,
                 desc: str = None, verbose: bool = False) -> list:
    """
    Applies ``func(*item)`` to every item, preserving order.

    Parameters
    ----------
    func : Callable
        picklable top-level function
    items : Sequence of tuple
        positional arguments of each call
    workers : int
        number of processes, 1 runs in the calling process
    desc : str
        label of the progress bar
    verbose : bool
        show a progress bar

    Returns
    -------
    list
        results in the order of items
    """
    if not is_integer_number(workers) or workers < 1:
        raise InvalidArgument(f'workers must be a positive integer, '
                              f'Got {workers}')
    items = list(items)
    if not items:
        return []
    if workers == 1 or len(items) == 1:
        return [func(*args) for args in tqdm(items, desc=desc,
                                             disable=not verbose)]

    chunks = list(split_list(items, int(workers)))
    logger.info(f'Running {len(items)} items on {len(chunks)} workers')
    results = []
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(_run_chunk, func, chunk) for chunk in chunks]
        for future in tqdm(futures, desc=desc, disable=not verbose):
            results.extend(future.result())
    return results
