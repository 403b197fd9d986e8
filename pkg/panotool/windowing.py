# Sliding-window geometry over equirectangular panoramas

from dataclasses import dataclass
from typing import List, Tuple
import numpy as np
from .errors import ConfigError

@dataclass(frozen=True)
class WindowConfig:
    """Window geometry on a panorama.

    Args:
        stride_divisor (int): N, the stride is `pano_width / N`
        span_divisor (int, optional): S, the window length is `pano_width / S`. Defaults to 8.
        cyclic (bool, optional): windows wrap around the right border. Defaults to False.

    Raises:
        ConfigError: N or S is not positive, or N < S
    """
    stride_divisor: int
    span_divisor: int = 8
    cyclic: bool = False

    def __post_init__(self):
        if self.stride_divisor < 1 or self.span_divisor < 1:
            raise ConfigError(f"stride and span divisors must be positive, "
                              f"got N={self.stride_divisor}, S={self.span_divisor}")
        if self.stride_divisor < self.span_divisor:
            raise ConfigError(f"stride divisor N={self.stride_divisor} must not be smaller "
                              f"than the span divisor S={self.span_divisor}")

    @property
    def overlap(self) -> float:
        """Fraction of a window shared with the next one"""
        return 1 - self.span_divisor / self.stride_divisor

    @property
    def label(self) -> str:
        """Short name, e.g. `x16` or `x16c` for the cyclic variant"""
        return f"x{self.stride_divisor}" + ("c" if self.cyclic else "")

def parse_window_token(token:str, cyclic:bool=False, span_divisor:int=8) -> WindowConfig:
    """Parse a sweep token such as `x16`, `16` or `x16c`.

    Args:
        token (str): the token, a trailing `c` forces the cyclic variant
        cyclic (bool, optional): cyclic flag for tokens without suffix. Defaults to False.
        span_divisor (int, optional): S. Defaults to 8.

    Returns:
        WindowConfig: parsed configuration
    """
    text = token.strip().lower()
    if text.endswith("c"):
        text, cyclic = text[:-1], True
    text = text.lstrip("x×")
    if not text.isdigit():
        raise ConfigError(f"invalid window token: {token!r}")
    return WindowConfig(int(text), span_divisor, cyclic)

@dataclass(frozen=True)
class WindowLayout:
    """Pixel geometry of the windows on one panorama width.

    `offsets` holds `(start_px, wraps)` pairs in increasing order.
    """
    offsets: Tuple[Tuple[int, bool], ...]
    window_len_px: int
    stride_px: int
    pano_width_px: int

    def __len__(self):
        return len(self.offsets)

    @property
    def starts(self) -> List[int]:
        return [start for start, _ in self.offsets]

    @staticmethod
    def whole(pano_width_px:int) -> 'WindowLayout':
        """One window spanning the entire panorama (resize baseline)"""
        return WindowLayout(((0, False),), pano_width_px, pano_width_px, pano_width_px)

def compute_layout(pano_width_px:int, config:WindowConfig) -> WindowLayout:
    """Compute the window offsets for a panorama width.

    Args:
        pano_width_px (int): panorama width in pixels
        config (WindowConfig): window configuration

    Raises:
        ConfigError: the width is not positive or not divisible by N and S

    Returns:
        WindowLayout: window geometry
    """
    if pano_width_px <= 0:
        raise ConfigError(f"panorama width must be positive, got {pano_width_px}")
    for name, divisor in (("stride divisor N", config.stride_divisor),
                          ("span divisor S", config.span_divisor)):
        if pano_width_px % divisor:
            raise ConfigError(f"panorama width {pano_width_px} is not divisible by the "
                              f"{name}={divisor}")
    window_len = pano_width_px // config.span_divisor
    stride = pano_width_px // config.stride_divisor
    if config.cyclic:
        starts = range(0, pano_width_px, stride)
    else:
        starts = range(0, pano_width_px - window_len + 1, stride)
    offsets = tuple((start, start + window_len > pano_width_px) for start in starts)
    return WindowLayout(offsets, window_len, stride, pano_width_px)

def window_columns(layout:WindowLayout, index:int) -> np.ndarray:
    """Panorama column indices covered by one window, in window order"""
    if not 0 <= index < len(layout):
        raise IndexError(f"window index {index} out of range [0, {len(layout)})")
    start, _ = layout.offsets[index]
    return (start + np.arange(layout.window_len_px)) % layout.pano_width_px

def extract_window(pano:np.ndarray, layout:WindowLayout, index:int) -> np.ndarray:
    """Extract one window patch with the full panorama height.

    Columns past the right border of a wrapping window come from the left border.

    Args:
        pano (np.ndarray): panorama, shape (H, W) or (H, W, C)
        layout (WindowLayout): layout computed for width W
        index (int): window index

    Raises:
        ValueError: the panorama width does not match the layout
        IndexError: the index is out of range

    Returns:
        np.ndarray: patch of shape (H, window_len_px[, C])
    """
    if pano.shape[1] != layout.pano_width_px:
        raise ValueError(f"panorama width {pano.shape[1]} does not match the layout "
                         f"width {layout.pano_width_px}")
    start, wraps = layout.offsets[index] if 0 <= index < len(layout) else (None, None)
    if start is None:
        raise IndexError(f"window index {index} out of range [0, {len(layout)})")
    if not wraps:
        return pano[:, start:start + layout.window_len_px].copy()
    return np.take(pano, window_columns(layout, index), axis=1)

def roll_pano(pano:np.ndarray, shift_px:int) -> np.ndarray:
    """Circularly shift a panorama left by `shift_px` columns"""
    return np.roll(pano, -shift_px, axis=1)
