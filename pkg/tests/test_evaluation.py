import math
import numpy as np
import pytest
from panotool import (GeoPoint, ImageRecord, Dataset, SynthParams, WindowConfig, EncoderSpec,
                      RetrievalResult, EvaluationError, recall_at_n, evaluate, ablation_sweep,
                      synth_dataset, roll_pano, build_index, encode_queries, window_distance)
from panotool.retrieval import WindowMatch
from panotool.evaluation import SweepTable, SweepRow, RecallReport

def _result(ids):
    return RetrievalResult([(db_id, WindowMatch(float(i), 0)) for i, db_id in enumerate(ids)])

def _straddlers(synth):
    return Dataset(synth.database, [rec for rec in synth.queries if rec.id in synth.straddles])

# test for recall@N
def test_recall_trivial():
    db_geos = {"a": GeoPoint(0, 0), "b": GeoPoint(100, 0), "c": GeoPoint(0, 100)}
    results = [_result(["a", "b", "c"]), _result(["b", "c", "a"]), _result(["c", "b", "a"])]
    queries = [GeoPoint(1, 1), GeoPoint(0, 0), GeoPoint(500, 500)]
    report = recall_at_n(results, queries, db_geos, (1, 2, 3), 25)
    assert report.num_queries == 3
    assert report[1] == pytest.approx(100 / 3)
    assert report[2] == pytest.approx(100 / 3)
    assert report[3] == pytest.approx(200 / 3)
    # the threshold is inclusive
    assert recall_at_n([_result(["a"])], [GeoPoint(25, 0)], db_geos, (1,), 25)[1] == 100
    assert recall_at_n([_result(["a"])], [GeoPoint(25.001, 0)], db_geos, (1,), 25)[1] == 0
    empty = recall_at_n([], [], db_geos, (1, 5))
    assert empty.recalls == {1: 0.0, 5: 0.0}

def _oracle(results, query_geos, db_geos, n, threshold):
    correct = 0
    for result, geo in zip(results, query_geos):
        top = result.ids[:n]
        if any(math.hypot(db_geos[i].easting_m - geo.easting_m,
                          db_geos[i].northing_m - geo.northing_m) <= threshold for i in top):
            correct += 1
    return 100.0 * correct / len(results)

def test_recall_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        num_db, num_q = int(rng.integers(1, 21)), int(rng.integers(1, 15))
        db_geos = {f"p{i}": GeoPoint(*rng.uniform(0, 200, 2)) for i in range(num_db)}
        ids = list(db_geos)
        results = [_result([ids[k] for k in rng.permutation(num_db)]) for _ in range(num_q)]
        query_geos = [GeoPoint(*rng.uniform(0, 200, 2)) for _ in range(num_q)]
        n_values = (1, 5, 10, 20)
        report = recall_at_n(results, query_geos, db_geos, n_values, 25)
        previous = 0.0
        for n in n_values:
            assert report[n] == pytest.approx(_oracle(results, query_geos, db_geos, n, 25), abs=1e-9)
            assert report[n] >= previous
            previous = report[n]
        # permuting the queries does not change the report
        order = rng.permutation(num_q)
        permuted = recall_at_n([results[i] for i in order], [query_geos[i] for i in order],
                               db_geos, n_values, 25)
        assert permuted.recalls == pytest.approx(report.recalls)

def test_recall_database_relabel():
    rng = np.random.default_rng(1)
    for _ in range(50):
        num_db, num_q = int(rng.integers(1, 21)), int(rng.integers(1, 15))
        db_geos = {f"p{i}": GeoPoint(*rng.uniform(0, 200, 2)) for i in range(num_db)}
        ids = list(db_geos)
        results = [_result([ids[k] for k in rng.permutation(num_db)]) for _ in range(num_q)]
        query_geos = [GeoPoint(*rng.uniform(0, 200, 2)) for _ in range(num_q)]
        report = recall_at_n(results, query_geos, db_geos)
        # a random bijection onto new labels, applied to the rankings and the positions
        relabel = dict(zip(ids, [f"db_{k}" for k in rng.permutation(num_db)]))
        relabeled = [RetrievalResult([(relabel[db_id], match) for db_id, match in result.ranked])
                     for result in results]
        new_geos = {relabel[db_id]: geo for db_id, geo in db_geos.items()}
        assert recall_at_n(relabeled, query_geos, new_geos) == report

def test_recall_errors():
    db_geos = {"a": GeoPoint(0, 0)}
    with pytest.raises(EvaluationError):
        recall_at_n([_result(["a"])], [None], db_geos)
    with pytest.raises(EvaluationError):
        recall_at_n([None], [GeoPoint(0, 0)], db_geos)
    with pytest.raises(EvaluationError):
        recall_at_n([_result(["a"])], [], db_geos)
    with pytest.raises(ValueError):
        recall_at_n([_result(["a"])], [GeoPoint(0, 0)], db_geos, threshold_m=0)
    with pytest.raises(ValueError):
        recall_at_n([_result(["a"])], [GeoPoint(0, 0)], db_geos, n_values=(0, 1))

# test for evaluation on synthetic data
def test_exact_match(small_synth):
    spec = EncoderSpec()
    for config in (WindowConfig(8), WindowConfig(16), WindowConfig(32), WindowConfig(16, cyclic=True)):
        report = evaluate(small_synth.dataset, spec, config)
        assert report.num_queries == 24
        assert all(report[n] == 100 for n in (1, 5, 10, 20)), config.label

def test_cyclic_benefit(seam_synth):
    spec = EncoderSpec()
    subset = _straddlers(seam_synth)
    assert len(subset.queries) == 24
    cyclic = evaluate(subset, spec, WindowConfig(16, cyclic=True))
    plain = evaluate(subset, spec, WindowConfig(16))
    assert cyclic[1] == 100
    assert cyclic[1] >= plain[1]
    # only the cyclic index holds the exact crop of a straddling query
    for config, exact in ((WindowConfig(16, cyclic=True), True), (WindowConfig(16), False)):
        artifact = build_index(subset.database, spec, config)
        descs = dict(artifact.database)
        for rec, q in zip(subset.queries, encode_queries(subset.queries, spec, artifact)):
            match = window_distance(q, descs[seam_synth.groundtruth[rec.id]])
            assert (match.distance < 1e-6) == exact

def test_roll_invariance(seam_synth):
    spec, config = EncoderSpec(), WindowConfig(16, cyclic=True)
    report = evaluate(seam_synth.dataset, spec, config)
    for k in (1, 5):
        rolled = [ImageRecord(rec.id, 'database', roll_pano(rec.source, 16 * k), rec.geo)
                  for rec in seam_synth.database]
        shifted = evaluate(Dataset(rolled, seam_synth.queries), spec, config)
        assert shifted.recalls == report.recalls

def test_finer_stride_never_moves_away():
    # x8 windows are a subset of x16 windows, which are a subset of x32 windows
    synth = synth_dataset(SynthParams(seed=9, num_places=6, pano_width_px=256, pano_height_px=32,
                                      queries_per_place=4, crop_jitter_px=6, noise_level=6.0,
                                      brightness_jitter=0.1))
    spec = EncoderSpec()
    distances = []
    for n in (8, 16, 32):
        artifact = build_index(synth.database, spec, WindowConfig(n))
        descs = dict(artifact.database)
        queries = encode_queries(synth.queries, spec, artifact)
        distances.append([window_distance(q, descs[synth.groundtruth[rec.id]]).distance
                          for rec, q in zip(synth.queries, queries)])
    coarse, medium, fine = (np.array(d) for d in distances)
    assert np.all(medium <= coarse) and np.all(fine <= medium)

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stride_trend(seed):
    # 200 jittered queries of 96 px on 768 px panoramas
    synth = synth_dataset(SynthParams(seed=seed, num_places=50, pano_width_px=768, queries_per_place=4,
                                      crop_jitter_px=40, noise_level=12.0))
    configs = [WindowConfig(8), WindowConfig(16), WindowConfig(24), WindowConfig(32)]
    table = ablation_sweep(synth.dataset, EncoderSpec(), configs, n_values=(1,))
    assert [row.label for row in table.rows] == ["x8", "x16", "x24", "x32"]
    r1 = [row.report[1] for row in table.rows]
    assert table.rows[0].report.num_queries == 200
    assert all(a <= b for a, b in zip(r1, r1[1:])), r1
    assert r1[-1] > r1[0], r1

def test_cyclic_benefit_full_size():
    synth = synth_dataset(SynthParams(seed=0, seam_straddle_fraction=0.5))
    subset = _straddlers(synth)
    assert len(subset.queries) == 100
    spec = EncoderSpec()
    table = ablation_sweep(subset, spec, [WindowConfig(16), WindowConfig(16, cyclic=True)], n_values=(1,))
    plain, cyclic = (row.report for row in table.rows)
    assert plain[1] < 100
    assert cyclic[1] > plain[1]

# test for the ablation sweep
def test_sweep(small_synth):
    configs = [WindowConfig(8), WindowConfig(16), WindowConfig(24), WindowConfig(16, cyclic=True), 'resize']
    table = ablation_sweep(small_synth.dataset, EncoderSpec(), configs, n_values=(1, 5))
    assert [row.label for row in table.rows] == ['x8', 'x16', 'x24', 'x16c', 'resize']
    failed = table.rows[2]
    assert failed.report is None and "24" in failed.error
    assert table.rows[0].report[1] == 100
    assert table.diff_at_1(table.rows[1]) == 0
    assert table.diff_at_1(failed) is None
    text = table.format_text()
    lines = text.splitlines()
    assert lines[0].split() == ["Method", "Overlap", "Cycle", "R@1", "R@5", "Diff.@1"]
    assert lines[1].split() == ["x8", "0.0%", "no", "100.0", "100.0", "+0.0"]
    assert lines[2].split()[:3] == ["x16", "50.0%", "no"]
    assert lines[3].split() == ["x24", "66.7%", "no", "failed", "failed", "-"]
    assert lines[4].split()[:3] == ["x16c", "50.0%", "yes"]
    assert lines[5].split()[:3] == ["resize", "-", "-"]
    machine = table.format_lines().splitlines()
    assert machine[:2] == ["x8, 1, 100.0000", "x8, 5, 100.0000"]
    assert len(machine) == 8

def test_sweep_diff():
    table = SweepTable([SweepRow("x8", WindowConfig(8), RecallReport({1: 40.0}, 10)),
                        SweepRow("x32", WindowConfig(32), RecallReport({1: 52.5}, 10))], (1,))
    assert table.diff_at_1(table.rows[1]) == pytest.approx(12.5)
    assert table.format_text().splitlines()[2].split()[-1] == "+12.5"

def test_sweep_deterministic(small_synth):
    configs = [WindowConfig(16), WindowConfig(16)]
    table = ablation_sweep(small_synth.dataset, EncoderSpec(), configs)
    assert table.rows[0].report.recalls == table.rows[1].report.recalls
    again = ablation_sweep(small_synth.dataset, EncoderSpec(), configs)
    assert again.format_text() == table.format_text()

def test_sweep_baseline_span(small_synth):
    spec = EncoderSpec()
    table = ablation_sweep(small_synth.dataset, spec, ['resize', WindowConfig(8, 4)], n_values=(1,))
    assert [row.query_shape for row in table.rows] == [(64, 32), (64, 32)]
    table = ablation_sweep(small_synth.dataset, spec, ['resize'], n_values=(1,))
    assert table.rows[0].query_shape == (32, 32)
    table = ablation_sweep(small_synth.dataset, spec, ['resize', WindowConfig(8)], n_values=(1,), span_divisor=4)
    assert table.rows[0].query_shape == (64, 32)
    wide = evaluate(small_synth.dataset, spec, 'resize', n_values=(1,), span_divisor=4)
    assert wide.recalls == table.rows[0].report.recalls
