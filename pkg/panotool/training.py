# Training loop of the projection head with the window-based triplet loss

from dataclasses import dataclass, field
from typing import List, Dict, Optional, Tuple
import numpy as np
from loguru import logger
from .dataset import Dataset, ImageRecord, resize_to_window, split_places
from .encoder import EncoderSpec, ProjectionHead, PanoDescriptor, encode_raw
from .windowing import WindowConfig, WindowLayout, compute_layout, extract_window
from .mining import (MiningConfig, LossConfig, TripletSet, GeoIndex, mine_triplet,
                     loss_and_grad, project_rows, project_windows)
from .retrieval import rank_all
from .evaluation import RecallReport, recall_at_n, DEFAULT_N
from .workers import parallel_map
from .errors import ConfigError, TrainingError, UnusableQueryError

@dataclass
class TrainConfig:
    """Hyperparameters of `train`; plain gradient descent on the head matrix"""
    epochs: int = 5
    batch_size: int = 2
    learning_rate: float = 0.01
    seed: int = 0
    mining: MiningConfig = field(default_factory=MiningConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    window: WindowConfig = field(default_factory=lambda: WindowConfig(16, 8, True))
    proj_dim: int = 32
    refresh_every: int = 1
    threshold_m: float = 25.0
    nproc: int = 1
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.proj_dim < 2:
            raise ConfigError(f"proj_dim must be at least 2, got {self.proj_dim}")
        if self.refresh_every < 1:
            raise ConfigError(f"refresh_every must be at least 1, got {self.refresh_every}")
        if self.threshold_m <= 0:
            raise ConfigError(f"threshold_m must be positive, got {self.threshold_m}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

@dataclass
class TrainReport:
    losses: List[float]
    recalls: List[RecallReport]
    head: ProjectionHead
    initial_recall: Optional[RecallReport] = None
    skipped: List[str] = field(default_factory=list)

@dataclass(eq=False)
class _RawSet:
    """Pre-projection descriptors of a dataset, computed once"""
    db_ids: List[str]
    db_raws: Dict[str, np.ndarray]
    queries: List[ImageRecord]
    query_raws: List[np.ndarray]
    layout: WindowLayout

def _raw_set(dataset:Dataset, spec:EncoderSpec, window:WindowConfig, nproc:int) -> _RawSet:
    if not dataset.database:
        raise TrainingError("the training set has no database panoramas")
    panos = parallel_map(lambda rec: rec.load(), dataset.database, nproc, desc="loading")
    height, width = panos[0].shape[:2]
    layout = compute_layout(width, window)

    def windows(pano:np.ndarray) -> np.ndarray:
        return np.stack([encode_raw(extract_window(pano, layout, k), spec) for k in range(len(layout))])

    def query(rec:ImageRecord) -> np.ndarray:
        return encode_raw(resize_to_window(rec.load(), layout.window_len_px, height), spec)

    db_raws = parallel_map(windows, panos, nproc, desc="encoding windows")
    query_raws = parallel_map(query, dataset.queries, nproc, desc="encoding queries")
    return _RawSet([rec.id for rec in dataset.database],
                   {rec.id: raws for rec, raws in zip(dataset.database, db_raws)},
                   list(dataset.queries), query_raws, layout)

def _project_database(raw:_RawSet, matrix:np.ndarray) -> Dict[str, PanoDescriptor]:
    return {db_id: project_windows(raw.db_raws[db_id], matrix, raw.layout) for db_id in raw.db_ids}

def _project_query(q_raw:np.ndarray, matrix:np.ndarray) -> np.ndarray:
    return project_rows(q_raw, matrix)[0][0]

def _validation_recall( raw:_RawSet
                      , db_geos:Dict
                      , matrix:np.ndarray
                      , norm_p:float
                      , threshold_m:float
                      , nproc:int=1) -> RecallReport:
    """Test-time pipeline with the current head: float32 descriptors, 25 m ground truth"""
    database = [(db_id, PanoDescriptor(project_rows(raw.db_raws[db_id], matrix)[0].astype(np.float32), raw.layout))
                for db_id in raw.db_ids]
    queries = [_project_query(q, matrix).astype(np.float32) for q in raw.query_raws]
    results = rank_all(queries, database, norm_p, nproc)
    return recall_at_n(results, [rec.geo for rec in raw.queries], db_geos, DEFAULT_N, threshold_m)

def _mine( raw:_RawSet
         , usable:List[int]
         , matrix:np.ndarray
         , geo_index:GeoIndex
         , cfg:TrainConfig) -> List[Tuple[int, TripletSet]]:
    database = _project_database(raw, matrix)

    def one(i:int):
        rec = raw.queries[i]
        try:
            return i, mine_triplet(rec.id, _project_query(raw.query_raws[i], matrix), rec.geo,
                                   database, geo_index, cfg.mining, [cfg.seed, i], cfg.loss.norm_p)
        except UnusableQueryError as e:
            return i, e

    return parallel_map(one, usable, cfg.nproc, desc="mining")

def train( dataset:Dataset
         , encoder_spec:EncoderSpec
         , cfg:TrainConfig
         , val_dataset:Optional[Dataset]=None) -> TrainReport:
    """Fit the projection head on mined triplets.

    Raw descriptors are computed once; every `refresh_every` epochs the
    database is re-projected with the current head and triplets are mined
    again. Batches are drawn in a seeded order and each batch takes one plain
    gradient step with the mean batch gradient.

    Args:
        dataset (Dataset): training panoramas and geo-tagged queries
        encoder_spec (EncoderSpec): encoder; its projection, if any, is the starting head
        cfg (TrainConfig): hyperparameters
        val_dataset (Optional[Dataset]): validation split. Defaults to a place-disjoint
            share `cfg.val_fraction` of `dataset`, held out from training.

    Raises:
        TrainingError: no query yields a triplet, the message lists the skipped ids
        ConfigError: invalid window configuration or too few far panoramas

    Returns:
        TrainReport: per-epoch loss means and validation recalls plus the final head
    """
    base = encoder_spec.without_projection()
    if encoder_spec.projection is not None:
        matrix = encoder_spec.projection.matrix.copy()
    else:
        matrix = ProjectionHead.random(base.raw_dim, cfg.proj_dim, cfg.seed).matrix
    matrix = matrix.astype(np.float32).astype(np.float64) # representable in the checkpoint
    if not dataset.database:
        raise TrainingError("the training set has no database panoramas")
    if val_dataset is None:
        dataset, val_dataset = split_places(dataset, cfg.val_fraction, cfg.seed)
        logger.info(f"validating on {len(val_dataset.database)} held-out places "
                    f"({len(val_dataset.queries)} queries), training on {len(dataset.database)}")
    else:
        logger.info(f"validating on the given split ({len(val_dataset.queries)} queries)")
    raw = _raw_set(dataset, base, cfg.window, cfg.nproc)
    val_raw = _raw_set(val_dataset, base, cfg.window, cfg.nproc)
    skipped = [rec.id for rec in raw.queries if rec.geo is None]
    usable = [i for i, rec in enumerate(raw.queries) if rec.geo is not None]
    geo_index = GeoIndex([(rec.id, rec.geo) for rec in dataset.database])
    norm_p = cfg.loss.norm_p
    initial = _validation_recall(val_raw, val_dataset.db_geos, matrix, norm_p, cfg.threshold_m, cfg.nproc)
    logger.info(f"untrained head: R@1={initial[1]:.1f} R@5={initial[5]:.1f}")

    losses, recalls, triplets = [], [], []
    for epoch in range(1, cfg.epochs + 1):
        if (epoch - 1) % cfg.refresh_every == 0:
            triplets = []
            for i, mined in _mine(raw, usable, matrix, geo_index, cfg):
                if isinstance(mined, UnusableQueryError):
                    if raw.queries[i].id not in skipped:
                        logger.warning(f"skipping query: {mined}")
                        skipped.append(raw.queries[i].id)
                    continue
                triplets.append((i, mined))
        if not triplets:
            raise TrainingError(f"no usable triplet; skipped queries: {', '.join(skipped) or 'none'}")
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(triplets))
        epoch_losses = np.zeros(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad = np.zeros_like(matrix)
            for t in batch:
                i, triplet = triplets[t]
                loss, g, _ = loss_and_grad(raw.query_raws[i], raw.db_raws[triplet.positive_id],
                                           [raw.db_raws[n] for n in triplet.negative_ids],
                                           matrix, cfg.loss)
                epoch_losses[t] = loss
                grad += g
            matrix = matrix - cfg.learning_rate * grad / len(batch)
        losses.append(float(np.mean(epoch_losses)))
        recall = _validation_recall(val_raw, val_dataset.db_geos, matrix, norm_p, cfg.threshold_m, cfg.nproc)
        recalls.append(recall)
        logger.info(f"epoch {epoch}/{cfg.epochs}: loss={losses[-1]:.6f} triplets={len(triplets)} "
                    f"R@1={recall[1]:.1f} R@5={recall[5]:.1f}")
    head = ProjectionHead(matrix.astype(np.float32).astype(np.float64), trained_epochs=cfg.epochs)
    return TrainReport(losses, recalls, head, initial, skipped)
