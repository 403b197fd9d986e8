# Handcrafted descriptor encoder with GeM pooling and an optional projection head

from dataclasses import dataclass
from typing import Tuple, Optional, Sequence, Union
import hashlib
import numpy as np
from .windowing import WindowConfig, WindowLayout, compute_layout, extract_window
from .errors import ConfigError

@dataclass(eq=False)
class ProjectionHead:
    """Linear map applied to raw descriptors, `matrix` has shape (D_in, D_out)"""
    matrix: np.ndarray
    trained_epochs: int = 0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 2:
            raise ConfigError(f"projection matrix must be D_in x D_out with D_out >= 2, "
                              f"got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ConfigError("projection matrix has non-finite entries")

    @property
    def d_in(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_out(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def random(d_in:int, d_out:int, seed:int=0) -> 'ProjectionHead':
        """Gaussian initialization scaled by 1/sqrt(D_in)"""
        rng = np.random.default_rng(seed)
        return ProjectionHead(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))

@dataclass
class EncoderSpec:
    """Gradient-orientation histogram encoder.

    The image is split into a `tile_grid` of cells; every cell is split again
    into `cell_tiles` tiles whose magnitude-weighted orientation histograms are
    GeM-pooled into one histogram per cell.
    """
    tile_grid: Tuple[int, int] = (4, 4)
    orientation_bins: int = 8
    gem_p: float = 3.0
    cell_tiles: Tuple[int, int] = (2, 2)
    projection: Optional[ProjectionHead] = None

    def __post_init__(self):
        rows, cols = self.tile_grid
        if rows < 1 or cols < 1 or self.orientation_bins < 1:
            raise ConfigError(f"invalid tile grid {self.tile_grid} or bin count {self.orientation_bins}")
        if not (np.isfinite(self.gem_p) and self.gem_p > 0):
            raise ConfigError(f"gem_p must be positive and finite, got {self.gem_p}")
        if self.projection is not None and self.projection.d_in != self.raw_dim:
            raise ConfigError(f"projection expects D_in={self.projection.d_in}, "
                              f"the encoder produces {self.raw_dim}")

    @property
    def raw_dim(self) -> int:
        return self.tile_grid[0] * self.tile_grid[1] * self.orientation_bins

    @property
    def dim(self) -> int:
        return self.projection.d_out if self.projection is not None else self.raw_dim

    def without_projection(self) -> 'EncoderSpec':
        return EncoderSpec(self.tile_grid, self.orientation_bins, self.gem_p, self.cell_tiles)

    def fingerprint(self) -> str:
        """Stable hash of every parameter that affects the descriptors"""
        h = hashlib.sha256()
        h.update(f"grid={self.tile_grid};bins={self.orientation_bins};gem_p={float(self.gem_p)!r};"
                 f"tiles={self.cell_tiles}".encode('utf-8'))
        if self.projection is not None:
            h.update(np.ascontiguousarray(self.projection.matrix, dtype='<f8').tobytes())
        return h.hexdigest()[:16]

@dataclass(eq=False)
class PanoDescriptor:
    """Per-window descriptors of one panorama, `windows` has shape (K, D)"""
    windows: np.ndarray
    layout: WindowLayout

    def __post_init__(self):
        if self.windows.ndim != 2 or len(self.windows) != len(self.layout):
            raise ValueError(f"expected {len(self.layout)} window descriptors, "
                             f"got shape {self.windows.shape}")

    @property
    def dim(self) -> int:
        return self.windows.shape[1]

# Part1: pooling and normalization
def gem_pool(vectors:Union[Sequence[np.ndarray], np.ndarray], p:float) -> np.ndarray:
    """Generalized-mean pooling, component-wise ((1/n) sum x_i^p)^(1/p).

    Args:
        vectors (Sequence[np.ndarray]): n nonnegative vectors of equal dimension
        p (float): power, p=1 is the mean and large p approaches the max

    Raises:
        ValueError: empty input, negative components or p <= 0

    Returns:
        np.ndarray: pooled vector
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.size == 0 or len(arr) == 0:
        raise ValueError("gem_pool needs at least one vector")
    if arr.ndim != 2:
        raise ValueError(f"expected a list of vectors, got shape {arr.shape}")
    if p <= 0:
        raise ValueError(f"GeM power must be positive, got {p}")
    if np.any(arr < 0):
        raise ValueError("GeM pooling is defined for nonnegative inputs only")
    if p == 1:
        return arr.mean(axis=0)
    return np.mean(arr ** p, axis=0) ** (1.0 / p)

def l2_normalize(v:np.ndarray) -> np.ndarray:
    """Unit-length copy of `v`; the zero vector maps to e_1"""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0 or not np.isfinite(norm):
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm

# Part2: descriptors
def _bounds(length:int, parts:int) -> np.ndarray:
    return np.linspace(0, length, parts + 1).astype(int)

def _to_gray(image:np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img

def _cell_histogram(cell:np.ndarray, spec:EncoderSpec) -> np.ndarray:
    """GeM over the tile histograms of one cell; gradients stay inside the cell"""
    bins = spec.orientation_bins
    gy = np.gradient(cell, axis=0) if cell.shape[0] > 1 else np.zeros_like(cell)
    gx = np.gradient(cell, axis=1) if cell.shape[1] > 1 else np.zeros_like(cell)
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    index = np.minimum((angle * bins / (2 * np.pi)).astype(int), bins - 1)
    ty, tx = _bounds(cell.shape[0], spec.cell_tiles[0]), _bounds(cell.shape[1], spec.cell_tiles[1])
    tiles = []
    for r in range(spec.cell_tiles[0]):
        for c in range(spec.cell_tiles[1]):
            mag = magnitude[ty[r]:ty[r + 1], tx[c]:tx[c + 1]]
            idx = index[ty[r]:ty[r + 1], tx[c]:tx[c + 1]]
            hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=bins)
            tiles.append(hist / max(mag.size, 1))
    return gem_pool(tiles, spec.gem_p)

def raw_features(image:np.ndarray, spec:EncoderSpec) -> np.ndarray:
    """Unnormalized histogram descriptor, cell-major with `orientation_bins` components per cell"""
    gray = _to_gray(image)
    if gray.size == 0:
        raise ValueError(f"cannot encode an empty image of shape {np.shape(image)}")
    rows, cols = spec.tile_grid
    ys, xs = _bounds(gray.shape[0], rows), _bounds(gray.shape[1], cols)
    cells = [_cell_histogram(gray[ys[r]:ys[r + 1], xs[c]:xs[c + 1]], spec)
             for r in range(rows) for c in range(cols)]
    return np.concatenate(cells)

def apply_projection(d:np.ndarray, head:ProjectionHead) -> np.ndarray:
    """Project a raw descriptor and L2-normalize the result.

    Raises:
        ConfigError: dimension mismatch
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != head.d_in:
        raise ConfigError(f"descriptor has dimension {d.shape[-1]}, the head expects {head.d_in}")
    return l2_normalize(d @ head.matrix)

def encode_raw(image:np.ndarray, spec:EncoderSpec) -> np.ndarray:
    """Normalized pre-projection descriptor (float64), the input of the projection head"""
    return l2_normalize(raw_features(image, spec))

def encode(image:np.ndarray, spec:EncoderSpec) -> np.ndarray:
    """Encode one image into a unit-length float32 descriptor.

    Pipeline: tile histograms, GeM per cell, L2 normalization, optional
    projection and a final L2 normalization.

    Args:
        image (np.ndarray): (H, W) or (H, W, 3) image
        spec (EncoderSpec): encoder parameters

    Returns:
        np.ndarray: descriptor of dimension `spec.dim`
    """
    d = encode_raw(image, spec)
    if spec.projection is not None:
        d = apply_projection(d, spec.projection)
    return d.astype(np.float32)

def encode_pano(pano:np.ndarray, spec:EncoderSpec, config:WindowConfig) -> PanoDescriptor:
    """Encode every sliding window of a panorama independently"""
    layout = compute_layout(pano.shape[1], config)
    return encode_windows(pano, spec, layout)

def encode_windows(pano:np.ndarray, spec:EncoderSpec, layout:WindowLayout) -> PanoDescriptor:
    windows = np.stack([encode(extract_window(pano, layout, i), spec) for i in range(len(layout))])
    return PanoDescriptor(windows, layout)

def encode_pano_resized(pano:np.ndarray, spec:EncoderSpec, window_len_px:int) -> PanoDescriptor:
    """Resize baseline: the whole panorama squeezed to the query shape, one descriptor"""
    from .dataset import resize_to_window
    patch = resize_to_window(pano, window_len_px, pano.shape[0])
    return PanoDescriptor(encode(patch, spec)[None, :], WindowLayout.whole(pano.shape[1]))
