# Recall@N and window-configuration ablations

from dataclasses import dataclass, field
from typing import List, Dict, Union, Optional, Sequence, Tuple
import numpy as np
from loguru import logger
from .dataset import Dataset, GeoPoint
from .encoder import EncoderSpec
from .windowing import WindowConfig
from .retrieval import RetrievalResult, rank_all
from .index import IndexArtifact, RESIZE, build_index, encode_queries
from .errors import EvaluationError

DEFAULT_N = (1, 5, 10, 20)

@dataclass
class RecallReport:
    """Percentage of correct queries for every N"""
    recalls: Dict[int, float]
    num_queries: int
    threshold_m: float = 25.0

    def __getitem__(self, n:int) -> float:
        return self.recalls[n]

def _first_hit( result:RetrievalResult
              , query_geo:GeoPoint
              , db_geos:Dict[str, GeoPoint]
              , threshold_m:float) -> int:
    """Rank of the first database entry within the threshold, -1 if none"""
    for pos, db_id in enumerate(result.ids):
        geo = db_geos.get(db_id)
        if geo is not None and geo.distance_to(query_geo) <= threshold_m:
            return pos
    return -1

def recall_at_n( results:Sequence[RetrievalResult]
               , query_geos:Sequence[Optional[GeoPoint]]
               , db_geos:Dict[str, GeoPoint]
               , n_values:Sequence[int]=DEFAULT_N
               , threshold_m:float=25.0) -> RecallReport:
    """Geo-distance Recall@N.

    A query is correct at N when any of its top-N entries lies within
    `threshold_m` of the query position.

    Args:
        results (Sequence[RetrievalResult]): one ranking per query
        query_geos (Sequence[Optional[GeoPoint]]): query positions in the same order
        db_geos (Dict[str, GeoPoint]): database positions by id
        n_values (Sequence[int], optional): cut-offs. Defaults to (1, 5, 10, 20).
        threshold_m (float, optional): ground-truth radius. Defaults to 25.

    Raises:
        EvaluationError: a query has no geo tag or no result
        ValueError: non-positive threshold or cut-off

    Returns:
        RecallReport: percentages in [0, 100]
    """
    if threshold_m <= 0:
        raise ValueError(f"threshold_m must be positive, got {threshold_m}")
    if any(n < 1 for n in n_values):
        raise ValueError(f"cut-offs must be at least 1, got {list(n_values)}")
    if len(results) != len(query_geos):
        raise EvaluationError(f"{len(query_geos)} queries but {len(results)} results")
    hits = []
    for i, (result, geo) in enumerate(zip(results, query_geos)):
        if geo is None:
            raise EvaluationError(f"query #{i} has no geo tag")
        if result is None:
            raise EvaluationError(f"query #{i} has no retrieval result")
        hits.append(_first_hit(result, geo, db_geos, threshold_m))
    hits = np.array(hits, dtype=np.int64)
    total = len(hits)
    recalls = {}
    for n in n_values:
        correct = int(np.sum((hits >= 0) & (hits < n)))
        recalls[n] = 100.0 * correct / total if total else 0.0
    return RecallReport(recalls, total, threshold_m)

def search( artifact:IndexArtifact
          , dataset:Dataset
          , spec:EncoderSpec
          , norm_p:float=2
          , nproc:int=1
          , query_descs:Optional[List[np.ndarray]]=None) -> List[RetrievalResult]:
    """Rank every query of `dataset` against a built index"""
    if query_descs is None:
        query_descs = encode_queries(dataset.queries, spec, artifact, nproc)
    return rank_all(query_descs, artifact.database, norm_p, nproc)

def evaluate( dataset:Dataset
            , spec:EncoderSpec
            , config:Union[WindowConfig, str]
            , norm_p:float=2
            , n_values:Sequence[int]=DEFAULT_N
            , threshold_m:float=25.0
            , nproc:int=1
            , query_ids:Optional[Sequence[str]]=None
            , span_divisor:Optional[int]=None) -> RecallReport:
    """Build the index for one configuration and score the queries.

    `span_divisor` sets the query width of the resize baseline; it defaults to
    the span of `config`, or 8 for the baseline itself.
    """
    if query_ids is not None:
        dataset = dataset.subset(query_ids)
    artifact = build_index(dataset.database, spec, config, nproc, _baseline_span([config], span_divisor))
    results = search(artifact, dataset, spec, norm_p, nproc)
    return recall_at_n(results, [rec.geo for rec in dataset.queries],
                       dataset.db_geos, n_values, threshold_m)

def _baseline_span(configs:Sequence[Union[WindowConfig, str]], span_divisor:Optional[int]) -> int:
    """Query width divisor of the resize baseline: explicit, else the first window span, else 8"""
    if span_divisor is not None:
        return span_divisor
    spans = [c.span_divisor for c in configs if isinstance(c, WindowConfig)]
    return spans[0] if spans else 8

# Part1: ablation sweep
@dataclass
class SweepRow:
    label: str
    config: Union[WindowConfig, str]
    report: Optional[RecallReport] = None
    error: Optional[str] = None
    query_shape: Optional[Tuple[int, int]] = None

@dataclass
class SweepTable:
    """One row per configuration; the first row is the Diff.@1 baseline"""
    rows: List[SweepRow] = field(default_factory=list)
    n_values: Tuple[int, ...] = DEFAULT_N

    def diff_at_1(self, row:SweepRow) -> Optional[float]:
        base = self.rows[0].report if self.rows else None
        if base is None or row.report is None or 1 not in row.report.recalls:
            return None
        return row.report[1] - base[1]

    def format_text(self) -> str:
        """Method, overlap, cycle, recalls and Diff.@1 as an aligned text table"""
        header = ["Method", "Overlap", "Cycle"] + [f"R@{n}" for n in self.n_values] + ["Diff.@1"]
        lines = [header]
        for row in self.rows:
            if isinstance(row.config, WindowConfig):
                overlap = f"{100 * row.config.overlap:.1f}%"
                cycle = "yes" if row.config.cyclic else "no"
            else:
                overlap, cycle = "-", "-"
            if row.report is None:
                lines.append([row.label, overlap, cycle] + ["failed"] * len(self.n_values) + ["-"])
                continue
            diff = self.diff_at_1(row)
            lines.append([row.label, overlap, cycle]
                         + [f"{row.report[n]:.1f}" for n in self.n_values]
                         + [f"{diff:+.1f}" if diff is not None else "-"])
        widths = [max(len(line[c]) for line in lines) for c in range(len(header))]
        return '\n'.join('  '.join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
                         for line in lines) + '\n'

    def format_lines(self) -> str:
        """Machine format, one `config, N, recall` triple per line"""
        out = []
        for row in self.rows:
            if row.report is None:
                continue
            out.extend(f"{row.label}, {n}, {row.report[n]:.4f}" for n in self.n_values)
        return '\n'.join(out) + '\n' if out else ''

def ablation_sweep( dataset:Dataset
                  , spec:EncoderSpec
                  , configs:Sequence[Union[WindowConfig, str]]
                  , norm_p:float=2
                  , n_values:Sequence[int]=DEFAULT_N
                  , threshold_m:float=25.0
                  , nproc:int=1
                  , span_divisor:Optional[int]=None) -> SweepTable:
    """Index and evaluate every configuration in order.

    A configuration that fails (for example a divisor that does not divide
    the panorama width) is logged and kept as a failed row; the sweep
    continues with the next one. The resize baseline queries are as wide as
    the windows of `span_divisor`, taken from the first window configuration
    when not given.
    """
    table = SweepTable(n_values=tuple(n_values))
    baseline_span = _baseline_span(configs, span_divisor)
    query_geos = [rec.geo for rec in dataset.queries]
    cached:Dict[Tuple[int, int], List[np.ndarray]] = {}
    for config in configs:
        label = config.label if isinstance(config, WindowConfig) else RESIZE
        try:
            artifact = build_index(dataset.database, spec, config, nproc, baseline_span)
            shape = artifact.query_shape
            if shape not in cached:
                cached[shape] = encode_queries(dataset.queries, spec, artifact, nproc)
            results = search(artifact, dataset, spec, norm_p, nproc, cached[shape])
            report = recall_at_n(results, query_geos, dataset.db_geos, n_values, threshold_m)
        except (ValueError, OSError) as e:
            logger.warning(f"sweep configuration {label} failed: {e}")
            table.rows.append(SweepRow(label, config, error=str(e)))
            continue
        logger.info(f"{label}: " + ", ".join(f"R@{n}={report[n]:.1f}" for n in n_values))
        table.rows.append(SweepRow(label, config, report, query_shape=shape))
    return table
