"""Synthetic rectified stereo with exact ground truth.

Scenes are random-dot or smoothed-noise textures with piecewise-constant
disparity (a background plane plus opaque rectangles/ellipses).  The right
image is textured first and the left image is synthesized by sampling the
right view at column j - d(i, j), which makes photometric consistency hold
exactly on every non-occluded pixel.  Occlusion ground truth comes from a
per-row collision check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attention import ValidMask
from .disparity import DisparityField
from .tensor import Tensor

__all__ = [
    "Shape",
    "Rect",
    "Ellipse",
    "SceneSpec",
    "StereoSample",
    "build_disparity",
    "gen_stereo_pair",
    "occlusion_oracle",
    "random_scene",
    "bicubic_resize",
    "downsample_bicubic",
    "psnr",
]


@dataclass
class Rect:
    top: int
    left: int
    height: int
    width: int
    disparity: float


@dataclass
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    disparity: float


Shape = object  # Rect | Ellipse


@dataclass
class SceneSpec:
    """Recipe for one stereo scene; generation is a pure function of this."""

    height: int
    width: int
    d_bg: float = 0.0
    shapes: List[Shape] = field(default_factory=list)
    seed: int = 0
    texture: str = "dots"  # "dots" | "noise"
    channels: int = 1
    dot_density: float = 0.5

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("extents must be positive")
        if self.d_bg < 0:
            raise ValueError("background disparity must be >= 0")
        if self.texture not in ("dots", "noise"):
            raise ValueError(f"unknown texture {self.texture!r}")
        dmax = max([self.d_bg] + [s.disparity for s in self.shapes])
        if dmax >= self.width / 2:
            raise ValueError("max disparity must be < W/2")
        for s in self.shapes:
            if s.disparity <= self.d_bg:
                raise ValueError("shape disparity must exceed background disparity")


@dataclass
class StereoSample:
    """Left/right pair with exact disparity and occlusion ground truth."""

    left: Tensor
    right: Tensor
    d_gt: DisparityField
    occ_gt: ValidMask  # 1 = visible in both views

    def check(self, tol: float = 1e-6) -> None:
        """Re-verify the construction invariant: non-occluded left pixels
        reproduce the right view sampled at their disparity."""
        l = self.left.data
        r = self.right.data
        d = self.d_gt.data.data[:, 0]
        v = self.occ_gt.data.data[:, 0] > 0
        B, C, H, W = l.shape
        cols = np.arange(W)
        for b in range(B):
            src = cols[None, :] - d[b]
            src_c = np.clip(src, 0, W - 1)
            j0 = np.minimum(np.floor(src_c).astype(int), W - 2)
            t = src_c - j0
            for c in range(C):
                rec = r[b, c][np.arange(H)[:, None], j0] * (1 - t) + \
                    r[b, c][np.arange(H)[:, None], j0 + 1] * t
                if np.max(np.abs((rec - l[b, c])[v[b]])) > tol:
                    raise AssertionError("stereo sample violates the warp invariant")


def build_disparity(spec: SceneSpec) -> np.ndarray:
    """Left-view disparity map: background plane with nearer shapes painted on."""
    d = np.full((spec.height, spec.width), float(spec.d_bg))
    ii, jj = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    for s in spec.shapes:
        if isinstance(s, Rect):
            if (s.top < 0 or s.left < 0 or s.top + s.height > spec.height
                    or s.left + s.width > spec.width):
                raise ValueError("rect out of bounds")
            inside = ((ii >= s.top) & (ii < s.top + s.height)
                      & (jj >= s.left) & (jj < s.left + s.width))
        elif isinstance(s, Ellipse):
            inside = (((ii - s.cy) / s.ry) ** 2 + ((jj - s.cx) / s.rx) ** 2) <= 1.0
        else:
            raise ValueError(f"unknown shape {type(s)}")
        d[inside] = np.maximum(d[inside], s.disparity)  # nearer shape wins
    return d


def _texture(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(C,H,W) texture in [0,1]; binary dots get one 3x3 box blur so the
    photometric loss has usable gradients."""
    C, H, W = spec.channels, spec.height, spec.width
    if spec.texture == "dots":
        img = (rng.random((C, H, W)) < spec.dot_density).astype(np.float64)
        img = _box_blur(img)
    else:
        img = rng.random((C, H, W))
        img = _box_blur(_box_blur(img))
        lo, hi = img.min(), img.max()
        img = (img - lo) / max(hi - lo, 1e-9)
    return img


def _box_blur(img: np.ndarray) -> np.ndarray:
    C, H, W = img.shape
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            out += p[:, i:i + H, j:j + W]
    return out / 9.0


def occlusion_oracle(d: np.ndarray) -> np.ndarray:
    """Validity mask from the collision rule: left pixel (i, j) is occluded
    iff another pixel on its row lands within half a pixel of the same
    right-view column with larger disparity, or its target leaves the image.
    Vectorized per row; the scalar-loop twin lives in the test suite."""
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("disparity must be finite and >= 0")
    H, W = d.shape
    cols = np.arange(W, dtype=np.float64)
    valid = np.ones((H, W), dtype=np.float64)
    for i in range(H):
        t = cols - d[i]
        out_of_view = (t < 0.0) | (t > W - 1.0)
        collide = (np.abs(t[None, :] - t[:, None]) < 0.5) & (d[i][None, :] > d[i][:, None])
        np.fill_diagonal(collide, False)
        valid[i] = np.where(out_of_view | collide.any(axis=1), 0.0, 1.0)
    return valid


def gen_stereo_pair(spec: SceneSpec) -> StereoSample:
    """Generate one sample; same spec (incl. seed) gives bitwise-equal output."""
    rng = np.random.default_rng(spec.seed)
    d = build_disparity(spec)
    right = _texture(spec, rng)
    H, W = spec.height, spec.width
    cols = np.arange(W, dtype=np.float64)
    src = cols[None, :] - d  # (H, W), left pixel j samples right column j - d
    src_c = np.clip(src, 0.0, W - 1.0)
    j0 = np.minimum(np.floor(src_c).astype(int), W - 2) if W > 1 else np.zeros_like(src_c, int)
    t = src_c - j0
    rows = np.arange(H)[:, None]
    left = right[:, rows, j0] * (1.0 - t) + right[:, rows, np.minimum(j0 + 1, W - 1)] * t

    valid = occlusion_oracle(d)
    sample = StereoSample(
        left=Tensor(left[None].astype(np.float64)),
        right=Tensor(right[None].astype(np.float64)),
        d_gt=DisparityField(
            Tensor(d[None, None].astype(np.float64)),
            valid=ValidMask(Tensor(valid[None, None]), side="left")),
        occ_gt=ValidMask(Tensor(valid[None, None]), side="left"),
    )
    sample.check()
    return sample


def random_scene(height: int, width: int, seed: int, max_disp: float = 16.0,
                 n_shapes: Tuple[int, int] = (1, 3), texture: str = "dots",
                 channels: int = 1, fractional: bool = False) -> SceneSpec:
    """Draw a random piecewise-constant scene with disparities <= max_disp.

    Background disparity is kept well away from zero (middle of the range)
    so the zero-shift identity correspondence is never photometrically
    cheap; shapes sit strictly in front of it.
    """
    rng = np.random.default_rng(seed)
    lo = max(1, int(round(max_disp * 0.35)))
    hi = max(lo + 1, int(round(max_disp * 0.7)))
    d_bg = float(rng.integers(lo, hi + 1))
    if fractional:
        d_bg += float(rng.random()) * 0.5
    shapes: List[Shape] = []
    for _ in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
        disp = float(rng.uniform(d_bg + 1.0, max_disp))
        if not fractional:
            disp = float(np.ceil(disp))
        disp = min(disp, max_disp)
        if disp <= d_bg:
            continue
        h = int(rng.integers(height // 6, height // 2))
        w = int(rng.integers(width // 8, width // 3))
        top = int(rng.integers(0, height - h))
        left = int(rng.integers(0, width - w))
        if rng.random() < 0.5:
            shapes.append(Rect(top, left, h, w, disp))
        else:
            shapes.append(Ellipse(top + h / 2, left + w / 2,
                                  max(h / 2, 2), max(w / 2, 2), disp))
    return SceneSpec(height=height, width=width, d_bg=d_bg, shapes=shapes,
                     seed=seed, texture=texture, channels=channels)


# -- bicubic resampling (data preparation; not differentiated) -----------------

_CUBIC_CACHE: dict = {}


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1.0
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _CUBIC_CACHE.get(key)
    if m is not None:
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for off in range(-1, 3):
        k = i0 + off
        w = _cubic_kernel(src - k)
        kk = np.clip(k, 0, n_in - 1)  # edge clamp
        np.add.at(m, (np.arange(n_out), kk), w)
    _CUBIC_CACHE[key] = m
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable cubic-convolution resize (a = -0.5), edge clamped."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError("expected (B,C,H,W)")
    B, C, H, W = arr.shape
    Ah = _cubic_matrix(H, out_h)
    Aw = _cubic_matrix(W, out_w)
    tmp = np.einsum("oh,bchw->bcow", Ah, arr, optimize=True)
    return np.einsum("ow,bchw->bcho", Aw, tmp, optimize=True).copy()


def downsample_bicubic(img, factor: int) -> np.ndarray:
    """Bicubic decimation by an integer factor; extents must divide evenly."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    B, C, H, W = arr.shape
    if factor < 1 or H % factor or W % factor:
        raise ValueError(f"extents {H}x{W} not divisible by factor {factor}")
    if factor == 1:
        return arr.copy()
    return bicubic_resize(arr, H // factor, W // factor)


def psnr(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """Peak signal-to-noise ratio on [0,1] images, optional border crop."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if border:
        a = a[..., border:-border, border:-border]
        b = b[..., border:-border, border:-border]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
