import numpy as np
import pytest
from panotool import (GeoPoint, PanoDescriptor, WindowLayout, ProjectionHead, MiningConfig,
                      LossConfig, ConfigError, UnusableQueryError, geo_neighbors, mine_triplet,
                      triplet_loss, triplet_loss_grad, numerical_grad, window_distance)
from panotool.mining import (GeoIndex, loss_and_grad, projected_loss, relative_error,
                             random_instance, gradient_check)

def descriptor(windows):
    windows = np.asarray(windows, dtype=np.float64)
    k = len(windows)
    return PanoDescriptor(windows, WindowLayout(tuple((i, False) for i in range(k)), 1, 1, k))

def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)

# test for geo neighbors
def test_geo_neighbors():
    geos = [("a", GeoPoint(0, 0)), ("b", GeoPoint(10, 0)), ("c", GeoPoint(3, 4)), ("d", GeoPoint(0, 5))]
    assert geo_neighbors(GeoPoint(0, 0), geos, 5.0) == ["a", "c", "d"] # c and d tie at 5 m
    assert geo_neighbors(GeoPoint(10, 0), geos, 1.0)[0] == "b"
    assert geo_neighbors(GeoPoint(100, 100), geos, 0.5) == []
    assert geo_neighbors(GeoPoint(0, 0), [], 5.0) == []
    with pytest.raises(ValueError):
        geo_neighbors(GeoPoint(0, 0), geos, 0)

def test_geo_neighbors_oracle():
    rng = np.random.default_rng(0)
    for trial in range(20):
        points = rng.uniform(0, 100, size=(100, 2))
        geos = [(f"p{i:03d}", GeoPoint(*pt)) for i, pt in enumerate(points)]
        center = GeoPoint(*rng.uniform(0, 100, size=2))
        expected = sorted((center.distance_to(g), i) for i, (_, g) in enumerate(geos)
                          if center.distance_to(g) <= 25)
        got = geo_neighbors(center, geos, 25.0)
        assert got == [geos[i][0] for _, i in expected]

# test for triplet mining
def mining_world(rng, places=30, k=6, dim=8):
    geos = [(f"db_{i:02d}", GeoPoint(50.0 * i, 0.0)) for i in range(places)]
    database = {db_id: descriptor(unit_rows(rng.standard_normal((k, dim)))) for db_id, _ in geos}
    return geos, database

def oracle_mine(q, query_geo, geos, database, cfg):
    near = [(window_distance(q, database[i]).distance, i) for i, g in geos
            if query_geo.distance_to(g) <= cfg.positive_radius_m]
    far = [(window_distance(q, database[i]).distance, i) for i, g in geos
           if query_geo.distance_to(g) > cfg.negative_exclusion_radius_m]
    return min(near)[1], [i for _, i in sorted(far)[:cfg.negatives_per_query]]

def test_mine_triplet_full_pool_oracle():
    rng = np.random.default_rng(1)
    cfg = MiningConfig(10.0, 25.0, 5, 1000)
    for trial in range(100):
        geos, database = mining_world(rng, places=int(rng.integers(8, 21)))
        index = GeoIndex(geos)
        place = int(rng.integers(0, len(geos)))
        query_geo = GeoPoint(geos[place][1].easting_m + rng.uniform(-5, 5), 0.0)
        q = unit_rows(rng.standard_normal(8))
        triplet = mine_triplet("q", q, query_geo, database, index, cfg, rng_seed=trial)
        positive, negatives = oracle_mine(q, query_geo, geos, database, cfg)
        assert triplet.positive_id == positive
        assert triplet.negative_ids == negatives
        assert triplet.positive_id not in triplet.negative_ids
        assert len(set(triplet.negative_ids)) == cfg.negatives_per_query

def test_mine_triplet_partial_pool():
    rng = np.random.default_rng(2)
    geos, database = mining_world(rng, places=40)
    index = GeoIndex(geos)
    cfg = MiningConfig(10.0, 25.0, 5, 12)
    q = unit_rows(rng.standard_normal(8))
    a = mine_triplet("q", q, GeoPoint(0, 0), database, index, cfg, rng_seed=[7, 1])
    b = mine_triplet("q", q, GeoPoint(0, 0), database, index, cfg, rng_seed=[7, 1])
    assert a == b
    assert len(a.negative_ids) == 5 and a.positive_id == "db_00"
    assert all(int(n[3:]) >= 1 for n in a.negative_ids)

def test_mine_triplet_edges():
    rng = np.random.default_rng(3)
    geos, database = mining_world(rng, places=12)
    index = GeoIndex(geos)
    cfg = MiningConfig(10.0, 25.0, 10, 200)
    # query identical to a window of the single near panorama
    q = database["db_04"].windows[2]
    triplet = mine_triplet("q", q, GeoPoint(200.0, 3.0), database, index, cfg, rng_seed=0)
    assert triplet.positive_id == "db_04"
    with pytest.raises(UnusableQueryError):
        mine_triplet("q", q, GeoPoint(0.0, 500.0), database, index, cfg, rng_seed=0)
    with pytest.raises(ConfigError):
        mine_triplet("q", q, GeoPoint(0.0, 0.0), database, index, MiningConfig(10, 25, 12, 200), rng_seed=0)

def test_mining_config():
    with pytest.raises(ConfigError):
        MiningConfig(30.0, 25.0)
    with pytest.raises(ConfigError):
        MiningConfig(negatives_per_query=0)
    with pytest.raises(ConfigError):
        MiningConfig(negatives_per_query=10, partial_pool_size=5)
    with pytest.raises(ConfigError):
        LossConfig(margin=0)

# test for the loss
def test_triplet_loss_cases():
    cfg = LossConfig(margin=0.1)
    q = np.array([1.0, 0.0])
    pos = descriptor([[0.0, 1.0], [1.0, 0.0]])
    far = descriptor([[-1.0, 0.0]])
    assert triplet_loss(q, pos, [far, far], cfg) == 0
    same = descriptor([[1.0, 0.0]])
    assert triplet_loss(q, pos, [same], cfg) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        triplet_loss(q, pos, [], cfg)

def test_triplet_loss_oracle():
    rng = np.random.default_rng(4)
    cfg = LossConfig(margin=0.5)
    for trial in range(30):
        q = unit_rows(rng.standard_normal(6))
        pos = unit_rows(rng.standard_normal((4, 6)))
        negs = [unit_rows(rng.standard_normal((4, 6))) for _ in range(10)]
        d_pos = min(np.sqrt(np.sum((q - w) ** 2)) for w in pos)
        expected = 0.0
        for neg in negs:
            d_neg = min(np.sqrt(np.sum((q - w) ** 2)) for w in neg)
            expected += max(d_pos - d_neg + cfg.margin, 0.0)
        got = triplet_loss(q, descriptor(pos), [descriptor(n) for n in negs], cfg)
        assert got >= 0
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)

# test for the gradient
def test_zero_loss_zero_gradient():
    cfg = LossConfig(margin=0.1)
    q_raw = np.array([1.0, 0.0, 0.0])
    pos = np.array([[1.0, 0.0, 0.0]])
    neg = [np.array([[-1.0, 0.0, 0.0]])]
    loss, grad, _ = loss_and_grad(q_raw, pos, neg, np.eye(3), cfg)
    assert loss == 0
    assert np.all(grad == 0)

def test_gradient_identity_head():
    cfg = LossConfig(margin=2.0)
    rng = np.random.default_rng(5)
    q_raw = unit_rows(rng.standard_normal(6))
    pos = unit_rows(rng.standard_normal((3, 6)))
    neg = [unit_rows(rng.standard_normal((3, 6)))]
    head = ProjectionHead(np.eye(6))
    analytic = triplet_loss_grad(q_raw, pos, neg, head, cfg)
    numeric = numerical_grad(lambda m: projected_loss(q_raw, pos, neg, m, cfg), head.matrix)
    assert relative_error(analytic, numeric) < 1e-4

def test_gradient_finite_differences():
    errors = gradient_check(seed=0, trials=25)
    assert len(errors) == 25
    assert max(errors) < 1e-4
    # other norms and shapes
    for seed in range(5):
        assert max(gradient_check(seed=seed, trials=2, cfg=LossConfig(2.0, 3.0), d_in=10, d_out=5)) < 1e-4

def test_gradient_matches_loss():
    rng = np.random.default_rng(6)
    cfg = LossConfig(margin=2.0)
    q_raw, pos, negs, matrix = random_instance(rng, cfg=cfg)
    loss, _, degenerate = loss_and_grad(q_raw, pos, negs, matrix, cfg)
    assert not degenerate
    assert loss == pytest.approx(projected_loss(q_raw, pos, negs, matrix, cfg), rel=1e-12)
