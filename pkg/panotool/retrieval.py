# Windowed distance and exhaustive ranking

from dataclasses import dataclass
from typing import List, Tuple, Sequence
import numpy as np
from .encoder import PanoDescriptor
from .workers import parallel_map

@dataclass(frozen=True)
class WindowMatch:
    """Distance to a panorama and the index of its closest window"""
    distance: float
    window_index: int

    @property
    def similarity(self) -> float:
        """Reported similarity score, the negated distance"""
        return -self.distance

@dataclass
class RetrievalResult:
    """Database entries sorted by ascending distance, ties by ascending id"""
    ranked: List[Tuple[str, WindowMatch]]

    @property
    def ids(self) -> List[str]:
        return [db_id for db_id, _ in self.ranked]

    def __len__(self):
        return len(self.ranked)

def pnorm(diff:np.ndarray, p:float) -> np.ndarray:
    """p-norm along the last axis, computed in float64"""
    diff = np.asarray(diff, dtype=np.float64)
    if p == 2:
        return np.sqrt(np.sum(diff * diff, axis=-1))
    if p == 1:
        return np.sum(np.abs(diff), axis=-1)
    return np.sum(np.abs(diff) ** p, axis=-1) ** (1.0 / p)

def _check(q:np.ndarray, windows:np.ndarray, norm_p:float):
    if norm_p < 1:
        raise ValueError(f"norm_p must be at least 1, got {norm_p}")
    if windows.shape[-2] == 0:
        raise ValueError("panorama descriptor has no windows")
    if q.shape[-1] != windows.shape[-1]:
        raise ValueError(f"query dimension {q.shape[-1]} does not match window "
                         f"dimension {windows.shape[-1]}")

def window_distance(q:np.ndarray, pano:PanoDescriptor, norm_p:float=2) -> WindowMatch:
    """Minimum p-norm distance from a query descriptor to the windows of a panorama.

    Args:
        q (np.ndarray): query descriptor, dimension D
        pano (PanoDescriptor): K window descriptors of dimension D
        norm_p (float, optional): p of the norm, at least 1. Defaults to 2.

    Raises:
        ValueError: dimension mismatch, empty window list or norm_p < 1

    Returns:
        WindowMatch: the distance and the smallest window index attaining it
    """
    q = np.asarray(q, dtype=np.float64)
    _check(q, pano.windows, norm_p)
    distances = pnorm(pano.windows - q, norm_p)
    k = int(np.argmin(distances)) # first minimum
    return WindowMatch(float(distances[k]), k)

class _Stack:
    """Database prepared for repeated ranking: ids plus one (P, K, D) block when layouts agree"""
    chunk = 512

    def __init__(self, database:Sequence[Tuple[str, PanoDescriptor]]):
        if not len(database):
            raise ValueError("cannot rank against an empty database")
        self.ids = [db_id for db_id, _ in database]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("database ids must be unique")
        self.panos = [pano for _, pano in database]
        uniform = len({pano.windows.shape for pano in self.panos}) == 1
        self.block = np.stack([pano.windows for pano in self.panos]) if uniform else None

    def matches(self, q:np.ndarray, norm_p:float) -> List[WindowMatch]:
        if self.block is None:
            return [window_distance(q, pano, norm_p) for pano in self.panos]
        _check(q, self.block, norm_p)
        matches = []
        for start in range(0, len(self.block), self.chunk):
            distances = pnorm(self.block[start:start + self.chunk] - q, norm_p)
            best = np.argmin(distances, axis=1)
            matches.extend(WindowMatch(float(distances[i, k]), int(k)) for i, k in enumerate(best))
        return matches

    def rank(self, q:np.ndarray, norm_p:float) -> RetrievalResult:
        q = np.asarray(q, dtype=np.float64)
        ranked = sorted(zip(self.ids, self.matches(q, norm_p)),
                        key=lambda item: (item[1].distance, item[0]))
        return RetrievalResult(ranked)

def rank( q:np.ndarray
        , database:Sequence[Tuple[str, PanoDescriptor]]
        , norm_p:float=2) -> RetrievalResult:
    """Rank every database panorama by its best-window distance to the query.

    Args:
        q (np.ndarray): query descriptor
        database (Sequence[Tuple[str, PanoDescriptor]]): (id, descriptor) pairs
        norm_p (float, optional): p of the norm. Defaults to 2.

    Raises:
        ValueError: empty database, duplicate ids or dimension mismatch

    Returns:
        RetrievalResult: every entry once, ascending distance, ties by id
    """
    return _Stack(database).rank(q, norm_p)

def top_n(result:RetrievalResult, n:int) -> List[Tuple[str, WindowMatch]]:
    """First min(n, size) entries of a ranking"""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return result.ranked[:n]

def rank_all( queries:Sequence[np.ndarray]
            , database:Sequence[Tuple[str, PanoDescriptor]]
            , norm_p:float=2
            , nproc:int=1) -> List[RetrievalResult]:
    """Rank many queries; the output order follows the input order"""
    stack = _Stack(database)
    return parallel_map(lambda q: stack.rank(q, norm_p), queries, nproc, desc="querying")
