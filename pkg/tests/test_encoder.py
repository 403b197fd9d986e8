from decimal import Decimal, getcontext
import numpy as np
import pytest
from panotool import (EncoderSpec, ProjectionHead, WindowConfig, ConfigError, gem_pool,
                      l2_normalize, encode, encode_pano, raw_features)
from panotool.encoder import apply_projection, encode_raw, encode_pano_resized
from panotool.windowing import compute_layout, extract_window, roll_pano

def textured(height=32, width=32, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)

# test for GeM pooling
def test_gem_pool():
    vectors = np.array([[1.0, 4.0], [3.0, 2.0], [0.5, 0.0]])
    assert np.allclose(gem_pool(vectors, 1), vectors.mean(axis=0), atol=1e-12, rtol=0)
    assert np.array_equal(gem_pool(vectors[:1], 2.5), vectors[0])
    # high-precision oracle
    getcontext().prec = 50
    for a, b in ((1, 3), (4, 2)):
        expected = ((Decimal(a) ** 3 + Decimal(b) ** 3) / 2) ** (Decimal(1) / Decimal(3))
        got = gem_pool([[1.0, 4.0], [3.0, 2.0]], 3)[0 if a == 1 else 1]
        assert abs(Decimal(got) - expected) < Decimal('1e-12')
    with pytest.raises(ValueError):
        gem_pool([], 3)
    with pytest.raises(ValueError):
        gem_pool([[1.0, -1.0]], 3)
    with pytest.raises(ValueError):
        gem_pool([[1.0, 1.0]], 0)

def test_gem_pool_bounds_and_monotone():
    rng = np.random.default_rng(1)
    vectors = rng.uniform(0, 5, size=(6, 10))
    previous = None
    for p in (0.5, 1, 2, 3, 8, 20):
        pooled = gem_pool(vectors, p)
        assert np.all(pooled >= vectors.min(axis=0) - 1e-12)
        assert np.all(pooled <= vectors.max(axis=0) + 1e-12)
        if previous is not None:
            assert np.all(pooled >= previous - 1e-12)
        previous = pooled

def test_l2_normalize():
    v = l2_normalize(np.array([3.0, 4.0]))
    assert np.allclose(v, [0.6, 0.8])
    zero = l2_normalize(np.zeros(5))
    assert zero.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]

# test for the encoder
def test_encoder_spec():
    spec = EncoderSpec()
    assert spec.raw_dim == spec.dim == 128
    head = ProjectionHead.random(128, 16, seed=0)
    assert EncoderSpec(projection=head).dim == 16
    assert EncoderSpec(projection=head).fingerprint() != spec.fingerprint()
    assert EncoderSpec().fingerprint() == spec.fingerprint()
    assert EncoderSpec(gem_p=2.0).fingerprint() != spec.fingerprint()
    with pytest.raises(ConfigError):
        EncoderSpec(projection=ProjectionHead.random(64, 16))
    with pytest.raises(ConfigError):
        EncoderSpec(gem_p=0)
    with pytest.raises(ConfigError):
        ProjectionHead(np.ones((4, 1)))
    with pytest.raises(ConfigError):
        ProjectionHead(np.full((4, 2), np.nan))

def test_encode_deterministic_and_normalized():
    spec = EncoderSpec()
    for seed in range(5):
        image = textured(seed=seed)
        d1, d2 = encode(image, spec), encode(image.copy(), spec)
        assert d1.dtype == np.float32 and d1.shape == (128,)
        assert np.array_equal(d1, d2)
        assert abs(np.linalg.norm(d1.astype(np.float64)) - 1) < 1e-6

def test_uniform_image_fallback():
    image = np.full((32, 32, 3), 77, dtype=np.uint8)
    assert np.all(raw_features(image, EncoderSpec()) == 0)
    d = encode(image, EncoderSpec())
    assert d[0] == 1 and np.all(d[1:] == 0)

def test_tile_locality():
    spec = EncoderSpec()
    image = textured(seed=3)
    perturbed = image.copy()
    # cell (row 1, col 2) covers rows 8..15 and columns 16..23 of a 32x32 image
    perturbed[9:14, 17:22] = 255 - perturbed[9:14, 17:22]
    a, b = raw_features(image, spec), raw_features(perturbed, spec)
    cell = 1 * 4 + 2
    changed = np.nonzero(a != b)[0]
    assert len(changed) > 0
    assert set(changed // spec.orientation_bins) == {cell}

def test_tile_translation():
    # a shift by one cell width moves the histogram blocks by one column
    spec = EncoderSpec(tile_grid=(1, 4))
    image = textured(height=16, width=64, seed=4)
    shifted = np.roll(image, 16, axis=1)
    a = raw_features(image, spec).reshape(4, -1)
    b = raw_features(shifted, spec).reshape(4, -1)
    assert np.allclose(b[1:], a[:3])

def test_apply_projection():
    rng = np.random.default_rng(0)
    d = l2_normalize(rng.standard_normal(8))
    assert np.allclose(apply_projection(d, ProjectionHead(np.eye(8))), d)
    head = ProjectionHead(rng.standard_normal((8, 4)))
    out = apply_projection(d, head)
    scaled = apply_projection(d, ProjectionHead(head.matrix * 7.5))
    assert np.allclose(out, scaled)
    # oracle product
    product = [sum(d[i] * head.matrix[i, j] for i in range(8)) for j in range(4)]
    norm = sum(x * x for x in product) ** 0.5
    assert np.allclose(out, [x / norm for x in product], atol=1e-12)
    with pytest.raises(ConfigError):
        apply_projection(np.ones(5), head)
    # zero projection falls back to e_1
    zero = apply_projection(d, ProjectionHead(np.zeros((8, 4))))
    assert zero.tolist() == [1.0, 0.0, 0.0, 0.0]

def test_encode_with_projection():
    head = ProjectionHead.random(128, 32, seed=1)
    spec = EncoderSpec(projection=head)
    image = textured(seed=5)
    d = encode(image, spec)
    assert d.shape == (32,)
    expected = l2_normalize(encode_raw(image, spec.without_projection()) @ head.matrix)
    assert np.allclose(d, expected, atol=1e-6)

def test_encode_pano():
    spec = EncoderSpec()
    pano = textured(height=32, width=256, seed=6)
    config = WindowConfig(16, cyclic=True)
    desc = encode_pano(pano, spec, config)
    layout = compute_layout(256, config)
    assert desc.windows.shape == (16, 128)
    for i in range(len(layout)):
        assert np.array_equal(desc.windows[i], encode(extract_window(pano, layout, i), spec))
    # cyclic shift by one stride permutes the descriptors by one position
    shifted = encode_pano(roll_pano(pano, layout.stride_px), spec, config)
    assert np.array_equal(shifted.windows, np.roll(desc.windows, -1, axis=0))
    # non-overlapping windows
    assert encode_pano(pano, spec, WindowConfig(8)).windows.shape == (8, 128)

def test_encode_pano_resized():
    spec = EncoderSpec()
    pano = textured(height=32, width=256, seed=7)
    desc = encode_pano_resized(pano, spec, 32)
    assert desc.windows.shape == (1, 128)
    assert len(desc.layout) == 1 and desc.layout.window_len_px == 256
