# Worker pool for encoding and querying

from typing import Callable, Iterable, List, Any, Union
from concurrent.futures import ThreadPoolExecutor
import tqdm

def parallel_map( func:Callable[[Any], Any]
                , items:Iterable[Any]
                , nproc:int=1
                , desc:Union[str, None]=None) -> List[Any]:
    """Apply `func` to every item, optionally on a thread pool.

    Args:
        func (Callable): function of one argument
        items (Iterable): inputs
        nproc (int, optional): number of worker threads. Defaults to 1.
        desc (Union[str, None], optional): label of the progress bar. Defaults to None.

    Returns:
        List: results in input order, whatever the value of `nproc`
    """
    assert nproc > 0, "nproc must be greater than 0!"
    items = list(items)
    # the bar is silent when stderr is not a terminal
    bar = tqdm.tqdm(total=len(items), desc=desc, disable=None, leave=False)
    try:
        if nproc == 1 or len(items) <= 1:
            results = []
            for item in items:
                results.append(func(item))
                bar.update(1)
            return results
        with ThreadPoolExecutor(max_workers=nproc) as executor:
            results = []
            for result in executor.map(func, items):
                results.append(result)
                bar.update(1)
            return results
    finally:
        bar.close()
