# Triplet mining and the window-based triplet loss

from dataclasses import dataclass
from typing import List, Tuple, Sequence, Dict, Callable, Union, Optional
import numpy as np
from sklearn.neighbors import KDTree
from loguru import logger
from .dataset import GeoPoint
from .encoder import PanoDescriptor, ProjectionHead
from .windowing import WindowLayout
from .retrieval import window_distance, rank, pnorm
from .errors import ConfigError, UnusableQueryError

@dataclass
class MiningConfig:
    """Hard-mining parameters; radii in meters"""
    positive_radius_m: float = 10.0
    negative_exclusion_radius_m: float = 25.0
    negatives_per_query: int = 10
    partial_pool_size: int = 200

    def __post_init__(self):
        if self.positive_radius_m <= 0:
            raise ConfigError(f"positive radius must be positive, got {self.positive_radius_m}")
        if self.negative_exclusion_radius_m < self.positive_radius_m:
            raise ConfigError("the negative exclusion radius must not be smaller than the positive radius")
        if self.negatives_per_query < 1:
            raise ConfigError("negatives_per_query must be at least 1")
        if self.partial_pool_size < self.negatives_per_query:
            raise ConfigError(f"partial_pool_size={self.partial_pool_size} is smaller than "
                              f"negatives_per_query={self.negatives_per_query}")

@dataclass
class LossConfig:
    margin: float = 0.1
    norm_p: float = 2.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.norm_p < 1:
            raise ConfigError(f"norm_p must be at least 1, got {self.norm_p}")

@dataclass
class TripletSet:
    query_id: str
    positive_id: str
    negative_ids: List[str]

# Part1: mining
class GeoIndex:
    """Radius queries over database geo tags"""

    def __init__(self, database_geos:Sequence[Tuple[str, GeoPoint]]):
        self.ids = [db_id for db_id, _ in database_geos]
        points = np.array([[g.easting_m, g.northing_m] for _, g in database_geos], dtype=np.float64)
        self.tree = KDTree(points.reshape(-1, 2)) if len(points) else None

    def neighbors(self, center:GeoPoint, radius_m:float) -> List[str]:
        if radius_m <= 0:
            raise ValueError(f"radius must be positive, got {radius_m}")
        if self.tree is None:
            return []
        ind, dist = self.tree.query_radius(np.array([[center.easting_m, center.northing_m]]),
                                           r=radius_m, return_distance=True)
        ind, dist = ind[0], dist[0]
        order = np.lexsort((ind, dist)) # by distance, then database order
        return [self.ids[i] for i in ind[order]]

def geo_neighbors( center:GeoPoint
                 , database_geos:Sequence[Tuple[str, GeoPoint]]
                 , radius_m:float) -> List[str]:
    """Ids within `radius_m` (inclusive) of `center`, nearest first.

    Args:
        center (GeoPoint): query position
        database_geos (Sequence[Tuple[str, GeoPoint]]): (id, position) pairs
        radius_m (float): search radius in meters

    Returns:
        List[str]: ids sorted by planar distance, ties in database order
    """
    return GeoIndex(database_geos).neighbors(center, radius_m)

def mine_triplet( query_id:str
                , query_desc:np.ndarray
                , query_geo:GeoPoint
                , database:Dict[str, PanoDescriptor]
                , geo_index:GeoIndex
                , cfg:MiningConfig
                , rng_seed:Union[int, Sequence[int]]
                , norm_p:float=2) -> TripletSet:
    """Mine one hard positive and the hardest negatives of a random partial pool.

    Args:
        query_id (str): query identifier
        query_desc (np.ndarray): query descriptor
        query_geo (GeoPoint): query position
        database (Dict[str, PanoDescriptor]): database descriptors by id
        geo_index (GeoIndex): geo index over the same database
        cfg (MiningConfig): radii and counts
        rng_seed (Union[int, Sequence[int]]): seed of the pool sampling
        norm_p (float, optional): p of the window distance. Defaults to 2.

    Raises:
        UnusableQueryError: no panorama within the positive radius
        ConfigError: fewer far panoramas than negatives_per_query

    Returns:
        TripletSet: the positive is the geo-near panorama with the smallest window
            distance, negatives are the closest panoramas of the pool
    """
    near = geo_index.neighbors(query_geo, cfg.positive_radius_m)
    if not near:
        raise UnusableQueryError(f"query {query_id} has no database panorama within "
                                 f"{cfg.positive_radius_m} m")
    positive = rank(query_desc, [(i, database[i]) for i in near], norm_p).ranked[0][0]
    excluded = set(geo_index.neighbors(query_geo, cfg.negative_exclusion_radius_m))
    far = [i for i in geo_index.ids if i not in excluded]
    if len(far) < cfg.negatives_per_query:
        raise ConfigError(f"query {query_id}: only {len(far)} panoramas beyond "
                          f"{cfg.negative_exclusion_radius_m} m, need {cfg.negatives_per_query}")
    if cfg.partial_pool_size < len(far):
        rng = np.random.default_rng(rng_seed)
        pick = np.sort(rng.choice(len(far), size=cfg.partial_pool_size, replace=False))
        far = [far[i] for i in pick]
    ranked = rank(query_desc, [(i, database[i]) for i in far], norm_p)
    negatives = [db_id for db_id, _ in ranked.ranked[:cfg.negatives_per_query]]
    return TripletSet(query_id, positive, negatives)

# Part2: loss
def triplet_loss( q:np.ndarray
                , pos:PanoDescriptor
                , negs:Sequence[PanoDescriptor]
                , cfg:LossConfig) -> float:
    """Sum over negatives of max(d(q, p) - d(q, n_i) + margin, 0) with windowed distances"""
    if not len(negs):
        raise ValueError("triplet_loss needs at least one negative")
    d_pos = window_distance(q, pos, cfg.norm_p).distance
    return float(sum(max(d_pos - window_distance(q, neg, cfg.norm_p).distance + cfg.margin, 0.0)
                     for neg in negs))

def project_rows(raw:np.ndarray, matrix:np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise projection and normalization; returns unit rows and pre-normalization norms"""
    u = np.atleast_2d(raw) @ matrix
    norms = np.linalg.norm(u, axis=1)
    v = np.zeros_like(u)
    v[:, 0] = 1.0 # zero-vector fallback
    ok = norms > 0
    v[ok] = u[ok] / norms[ok, None]
    return v, norms

def _norm_grad(delta:np.ndarray, distance:float, p:float) -> np.ndarray:
    """Gradient of ||delta||_p with respect to delta"""
    if distance == 0:
        return np.zeros_like(delta)
    if p == 2:
        return delta / distance
    if p == 1:
        return np.sign(delta)
    return np.sign(delta) * np.abs(delta) ** (p - 1) / distance ** (p - 1)

def _backprop(x:np.ndarray, v:np.ndarray, norm:float, g:np.ndarray) -> np.ndarray:
    """Pull a gradient on normalize(x @ M) back onto M"""
    if norm == 0:
        return np.zeros((len(x), len(g)))
    return np.outer(x, (g - v * (v @ g)) / norm)

def _closest(q:np.ndarray, windows:np.ndarray, p:float) -> Tuple[int, float, bool]:
    distances = pnorm(windows - q, p)
    k = int(np.argmin(distances))
    tied = int(np.sum(distances == distances[k])) > 1
    return k, float(distances[k]), tied

def loss_and_grad( q_raw:np.ndarray
                 , pos_raws:np.ndarray
                 , neg_raws:Sequence[np.ndarray]
                 , matrix:np.ndarray
                 , cfg:LossConfig) -> Tuple[float, np.ndarray, bool]:
    """Window-based triplet loss of projected descriptors and its subgradient.

    The argmin windows and the active hinges are those of the forward pass.

    Args:
        q_raw (np.ndarray): pre-projection query descriptor, (D_in,)
        pos_raws (np.ndarray): pre-projection positive windows, (K, D_in)
        neg_raws (Sequence[np.ndarray]): pre-projection negative windows, each (K_i, D_in)
        matrix (np.ndarray): projection matrix, (D_in, D_out)
        cfg (LossConfig): margin and norm

    Returns:
        Tuple[float, np.ndarray, bool]: loss, gradient with respect to `matrix`
            and whether the configuration was degenerate (window tie or hinge at 0)
    """
    if not len(neg_raws):
        raise ValueError("loss_and_grad needs at least one negative")
    p = cfg.norm_p
    q_raw = np.asarray(q_raw, dtype=np.float64)
    qv, qn = project_rows(q_raw, matrix)
    qv, qn = qv[0], qn[0]
    pv, pn = project_rows(pos_raws, matrix)
    kp, d_pos, degenerate = _closest(qv, pv, p)
    grad = np.zeros_like(matrix, dtype=np.float64)
    g_q = np.zeros_like(qv)
    loss, active = 0.0, 0
    for raws in neg_raws:
        nv, nn = project_rows(raws, matrix)
        kn, d_neg, tied = _closest(qv, nv, p)
        hinge = d_pos - d_neg + cfg.margin
        degenerate = degenerate or tied or hinge == 0
        if hinge <= 0:
            continue
        loss += hinge
        active += 1
        s = _norm_grad(qv - nv[kn], d_neg, p)
        g_q -= s
        grad += _backprop(np.atleast_2d(raws)[kn], nv[kn], nn[kn], s)
    if active:
        s = _norm_grad(qv - pv[kp], d_pos, p)
        g_q += active * s
        grad += _backprop(np.atleast_2d(pos_raws)[kp], pv[kp], pn[kp], -active * s)
        grad += _backprop(q_raw, qv, qn, g_q)
    if degenerate:
        logger.debug("degenerate triplet: window tie or hinge exactly at zero")
    return loss, grad, degenerate

def triplet_loss_grad( q_raw:np.ndarray
                     , pos_raws:np.ndarray
                     , neg_raws:Sequence[np.ndarray]
                     , head:Union[ProjectionHead, np.ndarray]
                     , cfg:LossConfig) -> np.ndarray:
    """Gradient of the window-based triplet loss with respect to the head matrix"""
    matrix = head.matrix if isinstance(head, ProjectionHead) else np.asarray(head, dtype=np.float64)
    return loss_and_grad(q_raw, pos_raws, neg_raws, matrix, cfg)[1]

def project_windows( raws:np.ndarray
                   , matrix:np.ndarray
                   , layout:Optional[WindowLayout]=None) -> PanoDescriptor:
    """Projected unit window descriptors; a placeholder layout when none is given"""
    windows = project_rows(raws, matrix)[0]
    k = len(windows)
    if layout is None:
        layout = WindowLayout(tuple((i, False) for i in range(k)), 1, 1, k)
    return PanoDescriptor(windows, layout)

def projected_loss( q_raw:np.ndarray
                  , pos_raws:np.ndarray
                  , neg_raws:Sequence[np.ndarray]
                  , matrix:np.ndarray
                  , cfg:LossConfig) -> float:
    """`triplet_loss` evaluated on projected descriptors"""
    q = project_rows(np.asarray(q_raw, dtype=np.float64), matrix)[0][0]
    return triplet_loss(q, project_windows(pos_raws, matrix),
                        [project_windows(raws, matrix) for raws in neg_raws], cfg)

def numerical_grad( loss_fn:Callable[[np.ndarray], float]
                  , matrix:np.ndarray
                  , step:float=1e-5) -> np.ndarray:
    """Central finite differences of `loss_fn` at `matrix`"""
    grad = np.zeros_like(matrix, dtype=np.float64)
    for idx in np.ndindex(*matrix.shape):
        plus, minus = matrix.astype(np.float64), matrix.astype(np.float64)
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * step)
    return grad

def relative_error(a:np.ndarray, b:np.ndarray) -> float:
    """||a - b|| / max(||a|| + ||b||, tiny)"""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0

# Part3: diagnostics
def _separated(q:np.ndarray, windows:np.ndarray, p:float, gap:float) -> bool:
    distances = np.sort(pnorm(windows - q, p))
    return len(distances) < 2 or distances[1] - distances[0] > gap

def random_instance( rng:np.random.Generator
                   , d_in:int=16
                   , d_out:int=8
                   , windows:int=6
                   , negatives:int=3
                   , cfg:LossConfig=LossConfig(margin=2.0)
                   , gap:float=1e-3
                   , max_tries:int=100) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray], np.ndarray]:
    """Random (query, positive windows, negative windows, matrix) away from kinks.

    Closest windows are separated from the runner-up by more than `gap` and no
    hinge is within `gap` of zero, so finite differences stay on one branch.
    """
    for _ in range(max_tries):
        unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)
        q_raw = unit(rng.standard_normal(d_in))
        pos_raws = unit(rng.standard_normal((windows, d_in)))
        neg_raws = [unit(rng.standard_normal((windows, d_in))) for _ in range(negatives)]
        matrix = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        qv = project_rows(q_raw, matrix)[0][0]
        pv = project_rows(pos_raws, matrix)[0]
        if not _separated(qv, pv, cfg.norm_p, gap):
            continue
        d_pos = float(np.min(pnorm(pv - qv, cfg.norm_p)))
        ok = True
        for raws in neg_raws:
            nv = project_rows(raws, matrix)[0]
            d_neg = float(np.min(pnorm(nv - qv, cfg.norm_p)))
            ok = ok and _separated(qv, nv, cfg.norm_p, gap) and abs(d_pos - d_neg + cfg.margin) > gap
        if ok:
            return q_raw, pos_raws, neg_raws, matrix
    raise ValueError(f"no non-degenerate instance found in {max_tries} tries")

def gradient_check( seed:int=0
                  , trials:int=25
                  , cfg:LossConfig=LossConfig(margin=2.0)
                  , step:float=1e-5
                  , **shape) -> List[float]:
    """Relative error between `triplet_loss_grad` and central differences on random instances"""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        q_raw, pos_raws, neg_raws, matrix = random_instance(rng, cfg=cfg, **shape)
        analytic = triplet_loss_grad(q_raw, pos_raws, neg_raws, matrix, cfg)
        numeric = numerical_grad(lambda m: projected_loss(q_raw, pos_raws, neg_raws, m, cfg), matrix, step)
        errors.append(relative_error(analytic, numeric))
    logger.debug(f"gradient check: worst relative error {max(errors) if errors else 0.0:.3e}")
    return errors
