"""Turning monocular depth predictions into backend constraints.

Covers scale/shift alignment of affine-invariant predictions (RANSAC plus
least-squares refinement, smoothed by an exponential moving average),
per-track variance gating, depth sampling, the ``.dpm`` depth-map file
format and the depth-injected tracking image (depth written into the blue
channel before grayscale conversion).
"""

from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage


class DepthPriorError(ValueError):
    pass


class TooFewCorrespondences(DepthPriorError):
    pass


class NoValidModel(DepthPriorError):
    pass


class NonPositiveScale(DepthPriorError):
    pass


class Uninitialized(DepthPriorError):
    pass


class InsufficientHistory(DepthPriorError):
    pass


class DimensionMismatch(DepthPriorError):
    pass


class OutOfBounds(DepthPriorError):
    pass


class DepthMode(enum.IntEnum):
    AFFINE_INVERSE = 0
    METRIC = 1


@dataclass(frozen=True, eq=False)
class DepthMap:
    """H x W prediction; inverse-depth units in affine mode, meters in metric mode."""

    values: np.ndarray
    mode: DepthMode = DepthMode.AFFINE_INVERSE

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("depth map must be two-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth map contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mode", DepthMode(self.mode))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def as_inverse(self) -> np.ndarray:
        """Values in inverse-depth convention (metric maps are inverted)."""
        if self.mode == DepthMode.METRIC:
            with np.errstate(divide="ignore"):
                return 1.0 / np.maximum(self.values.astype(float), 1e-9)
        return self.values.astype(float)


# --------------------------------------------------------------------------
# DPM1 binary format: "DPM1", u32 width, u32 height, u32 mode, float32 LE rows

_DPM_HEADER = struct.Struct("<4sIII")
_DPM_MAGIC = b"DPM1"


def encode_depth_map(dm: DepthMap) -> bytes:
    header = _DPM_HEADER.pack(_DPM_MAGIC, dm.width, dm.height, int(dm.mode))
    return header + np.ascontiguousarray(dm.values, dtype="<f4").tobytes()


def decode_depth_map(data: bytes) -> DepthMap:
    if len(data) < _DPM_HEADER.size:
        raise ValueError("truncated depth map header")
    magic, width, height, mode = _DPM_HEADER.unpack_from(data)
    if magic != _DPM_MAGIC:
        raise ValueError(f"bad depth map magic {magic!r}")
    expected = _DPM_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise ValueError(f"depth map payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=_DPM_HEADER.size).reshape(height, width)
    return DepthMap(values.astype(np.float32), DepthMode(mode))


def write_depth_map(path, dm: DepthMap) -> None:
    Path(path).write_bytes(encode_depth_map(dm))


def read_depth_map(path) -> DepthMap:
    return decode_depth_map(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Sampling

def _pixel_index(values: np.ndarray, pixels):
    pixels = np.asarray(pixels, dtype=float)
    col = np.rint(pixels[..., 0]).astype(int)
    row = np.rint(pixels[..., 1]).astype(int)
    h, w = values.shape
    if np.any((col < 0) | (col >= w) | (row < 0) | (row >= h)):
        raise OutOfBounds("pixel outside the depth map")
    return row, col


def sample_depth(depth_map: DepthMap, pixel, patch: str = "point"):
    """Read the depth map at ``pixel`` (or an (N, 2) array of pixels).

    ``point`` reads the nearest pixel.  ``max5x5`` returns the entry with the
    largest inverse depth in the 5x5 patch around it, truncated at the image
    border; the returned value keeps the map's own units.
    """
    values = depth_map.values
    row, col = _pixel_index(values, pixel)
    if patch == "point":
        out = values[row, col].astype(float)
    elif patch == "max5x5":
        inv = depth_map.as_inverse()
        padded = np.pad(inv, 2, constant_values=-np.inf)
        best = np.full(np.shape(row), -np.inf)
        arg_r = np.asarray(row).copy()
        arg_c = np.asarray(col).copy()
        for dr, dc in itertools.product(range(-2, 3), repeat=2):
            cand = padded[row + dr + 2, col + dc + 2]
            better = cand > best
            best = np.where(better, cand, best)
            arg_r = np.where(better, row + dr, arg_r)
            arg_c = np.where(better, col + dc, arg_c)
        out = values[arg_r, arg_c].astype(float)
    else:
        raise ValueError(f"unknown patch mode {patch!r}")
    return float(out) if np.ndim(out) == 0 else out


def to_inverse_value(value, mode: DepthMode):
    if mode == DepthMode.METRIC:
        return 1.0 / np.maximum(value, 1e-9)
    return value


# --------------------------------------------------------------------------
# Affine alignment

class Correspondence(NamedTuple):
    feature_id: int
    vio_inv_depth: float
    mde_value: float


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 100
    # None -> 0.05 * median(vio inverse depth)
    inlier_tol: Optional[float] = None
    rel_inlier_tol: float = 0.05
    seed: int = 0


class AffineFit(NamedTuple):
    s: float
    t: float
    inliers: np.ndarray


def fit_affine_lsq(d_vio, d_mde):
    """Closed-form 1-D least squares for ``d_vio ~ s * d_mde + t``."""
    x = np.asarray(d_mde, dtype=float)
    y = np.asarray(d_vio, dtype=float)
    mx, my = x.mean(), y.mean()
    dx = x - mx
    var = dx @ dx
    if var <= 1e-300:
        raise NoValidModel("network values are constant; slope undefined")
    s = float(dx @ (y - my) / var)
    return s, float(my - s * mx)


def _as_arrays(corrs, d_mde):
    if d_mde is not None:
        return np.asarray(corrs, dtype=float), np.asarray(d_mde, dtype=float)
    if len(corrs) and isinstance(corrs[0], Correspondence):
        return (np.array([c.vio_inv_depth for c in corrs], dtype=float),
                np.array([c.mde_value for c in corrs], dtype=float))
    arr = np.asarray(corrs, dtype=float).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def estimate_affine_ransac(corrs, d_mde=None, cfg: RansacConfig = RansacConfig(),
                           rng: Optional[np.random.Generator] = None) -> AffineFit:
    """Robust ``(s, t)`` with ``d_vio ~ s * d_mde + t`` and ``s > 0``.

    ``corrs`` is a sequence of :class:`Correspondence`, an (N, 2) array of
    ``(vio, mde)`` rows, or the VIO inverse depths with ``d_mde`` given
    separately.  Minimal two-point models with non-positive slope are
    discarded; the best consensus set is refit by least squares.
    """
    d, dh = _as_arrays(corrs, d_mde)
    n = len(d)
    if n < 2:
        raise TooFewCorrespondences(f"need at least 2 correspondences, got {n}")
    tol = cfg.inlier_tol if cfg.inlier_tol is not None else cfg.rel_inlier_tol * float(np.median(d))
    tol = max(tol, 1e-12)

    all_pairs = n * (n - 1) // 2
    if all_pairs <= cfg.iterations:
        pairs = np.array(list(itertools.combinations(range(n), 2)))
    else:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        i = rng.integers(0, n, cfg.iterations)
        j = (i + 1 + rng.integers(0, n - 1, cfg.iterations)) % n
        pairs = np.stack([i, j], axis=1)

    a, b = pairs[:, 0], pairs[:, 1]
    dx = dh[a] - dh[b]
    ok = np.abs(dx) > 1e-12
    slopes = np.where(ok, (d[a] - d[b]) / np.where(ok, dx, 1.0), 0.0)
    ok &= slopes > 0
    if not np.any(ok):
        raise NoValidModel("no minimal sample yields a positive scale")
    slopes = slopes[ok]
    shifts = d[a[ok]] - slopes * dh[a[ok]]

    err = np.abs(d[None, :] - (slopes[:, None] * dh[None, :] + shifts[:, None]))
    inl = err < tol
    counts = inl.sum(axis=1)
    score = np.where(inl, err, tol).sum(axis=1)
    best = np.lexsort((score, -counts))[0]
    inliers = inl[best]
    if inliers.sum() < 2:
        raise NoValidModel("consensus set smaller than two")

    s, t = fit_affine_lsq(d[inliers], dh[inliers])
    refined = np.abs(d - (s * dh + t)) < tol
    if refined.sum() > inliers.sum() and s > 0:
        inliers = refined
        s, t = fit_affine_lsq(d[inliers], dh[inliers])
    if not s > 0:
        raise NoValidModel("refined scale is not positive")
    return AffineFit(s, t, np.flatnonzero(inliers))


@dataclass(frozen=True)
class AffineState:
    s: float = 1.0
    t: float = 0.0
    initialized: bool = False
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.initialized and not self.s > 0:
            raise NonPositiveScale("initialized affine state needs s > 0")


def update_affine_ema(state: AffineState, s_meas: float, t_meas: float) -> AffineState:
    if not s_meas > 0:
        raise NonPositiveScale(f"measured scale {s_meas!r} must be positive")
    if not state.initialized:
        return replace(state, s=float(s_meas), t=float(t_meas), initialized=True)
    a = state.alpha
    return replace(state, s=(1 - a) * state.s + a * s_meas, t=(1 - a) * state.t + a * t_meas)


def align(state: AffineState, d_mde):
    if not state.initialized:
        raise Uninitialized("affine state has no measurement yet")
    return state.s * d_mde + state.t


# --------------------------------------------------------------------------
# Variance gating

@dataclass(frozen=True)
class GateConfig:
    gamma: float = 1e4
    sigma2_thresh: float = 0.01
    window: int = 5
    enabled: bool = True

    def __post_init__(self):
        if not (self.gamma > 0 and self.sigma2_thresh > 0):
            raise ValueError("gamma and sigma2_thresh must be positive")
        if self.window < 2:
            raise ValueError("window must be at least 2")


def track_variance(history: Sequence[float], window: int = 5) -> float:
    """Unbiased sample variance of the last ``window`` entries."""
    recent = np.asarray(history, dtype=float)[-window:]
    if len(recent) < 2:
        raise InsufficientHistory("variance needs at least two samples")
    return float(np.var(recent, ddof=1))


def gate_weight(sigma2: float, cfg: GateConfig = GateConfig()) -> Optional[float]:
    """Gaussian confidence weight, or ``None`` when the prior is rejected."""
    if sigma2 < 0:
        raise ValueError("variance must be non-negative")
    if sigma2 > cfg.sigma2_thresh:
        return None
    return float(np.exp(-cfg.gamma * sigma2))


# --------------------------------------------------------------------------
# Depth-injected tracking image

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def normalize_depth(values, lo_pct: float = 2.0, hi_pct: float = 98.0) -> np.ndarray:
    """Percentile clamp and linear stretch to [0, 255] (float).

    A degenerate range maps to zero everywhere.
    """
    v = np.asarray(values, dtype=float)
    lo, hi = np.percentile(v, [lo_pct, hi_pct])
    if not hi > lo:
        return np.zeros_like(v)
    return (np.clip(v, lo, hi) - lo) * (255.0 / (hi - lo))


def to_gray(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    g = GRAY_WEIGHTS[0] * rgb[..., 0] + GRAY_WEIGHTS[1] * rgb[..., 1] + GRAY_WEIGHTS[2] * rgb[..., 2]
    return np.clip(np.rint(g), 0, 255).astype(np.uint8)


def dift_transform(rgb, depth: DepthMap):
    """Replace the blue channel with normalized depth; return ``(rgd, gray)``."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionMismatch("image must be H x W x 3")
    if rgb.shape[:2] != depth.values.shape:
        raise DimensionMismatch(f"image {rgb.shape[:2]} vs depth {depth.values.shape}")
    d_norm = np.rint(normalize_depth(depth.values)).astype(np.uint8)
    rgd = rgb.astype(np.uint8).copy()
    rgd[..., 2] = d_norm
    return rgd, to_gray(rgd)


def gradient_magnitude(gray) -> np.ndarray:
    g = np.asarray(gray, dtype=float)
    return np.hypot(ndimage.sobel(g, axis=1, mode="nearest"), ndimage.sobel(g, axis=0, mode="nearest"))


def mean_gradient_magnitude(gray, mask=None) -> float:
    mag = gradient_magnitude(gray)
    if mask is not None:
        mag = mag[np.asarray(mask, dtype=bool)]
    return float(mag.mean()) if mag.size else 0.0
