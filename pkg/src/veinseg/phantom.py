"""Synthetic vessel-wall phantoms: an elliptical annulus (the wall) over a
depth-graded background with multiplicative speckle, plus the exact
annulus indicator as ground-truth mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import Rng


@dataclass(frozen=True)
class PhantomParams:
    count: int = 240
    height: int = 128
    width: int = 64
    center_band: tuple[float, float] = (0.25, 0.75)   # fraction of each extent
    outer_axis_frac: tuple[float, float] = (0.15, 0.35)
    thickness_frac: tuple[float, float] = (0.10, 0.25)  # of the smaller semi-axis
    wall_intensity: tuple[float, float] = (0.6, 0.8)    # 0.7 +/- 0.1
    lumen_intensity: float = 0.15
    background_top: float = 0.30
    background_bottom: float = 0.05
    speckle_base: float = 0.7
    speckle_scale: float = 0.3
    foreground_bounds: tuple[float, float] = (0.02, 0.30)

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("phantom count must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ConfigError("phantom extents must be positive")
        lo, hi = self.foreground_bounds
        if not 0 < lo < hi < 1:
            raise ConfigError("foreground bounds must satisfy 0 < lo < hi < 1")


def _uniform_in(rng: Rng, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(rng.uniform(1)[0])


def _annulus_mask(params: PhantomParams, cy: float, cx: float, ay: float,
                  ax: float, by: float, bx: float) -> np.ndarray:
    ys = np.arange(params.height, dtype=np.float64)[:, None] - cy
    xs = np.arange(params.width, dtype=np.float64)[None, :] - cx
    outer = (ys / ay) ** 2 + (xs / ax) ** 2 <= 1.0
    inner = (ys / by) ** 2 + (xs / bx) ** 2 <= 1.0
    return outer & ~inner


def make_phantom(rng: Rng, params: PhantomParams,
                 max_attempts: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair as float32 (h, w) arrays in [0, 1].

    Geometry is redrawn until the wall covers an acceptable foreground
    fraction, so an empty or overfull mask is never produced.
    """
    params.validate()
    h, w = params.height, params.width
    lo, hi = params.foreground_bounds
    for _ in range(max_attempts):
        cy = _uniform_in(rng, params.center_band[0] * h, params.center_band[1] * h)
        cx = _uniform_in(rng, params.center_band[0] * w, params.center_band[1] * w)
        ay = _uniform_in(rng, params.outer_axis_frac[0] * h, params.outer_axis_frac[1] * h)
        ax = _uniform_in(rng, params.outer_axis_frac[0] * w, params.outer_axis_frac[1] * w)
        thickness = _uniform_in(rng, params.thickness_frac[0], params.thickness_frac[1]) \
            * min(ay, ax)
        wall = _uniform_in(rng, params.wall_intensity[0], params.wall_intensity[1])
        by, bx = ay - thickness, ax - thickness
        mask = _annulus_mask(params, cy, cx, ay, ax, by, bx)
        frac = mask.mean()
        if lo <= frac <= hi:
            break
    else:
        raise ConfigError(f"no acceptable phantom geometry in {max_attempts} attempts")

    depth = np.linspace(params.background_top, params.background_bottom, h,
                        dtype=np.float64)
    img = np.repeat(depth[:, None], w, axis=1)
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    lumen = (ys / by) ** 2 + (xs / bx) ** 2 <= 1.0
    img[lumen] = params.lumen_intensity
    img[mask] = wall

    speckle = params.speckle_base + params.speckle_scale * rng.exponential(h * w)
    img = np.clip(img * speckle.reshape(h, w), 0.0, 1.0)
    return img.astype(np.float32), mask.astype(np.float32)


def generate_dataset(out_dir, seed: int, params: PhantomParams,
                     split_weights: tuple[int, int, int] = (6, 1, 1)) -> str:
    """Write `params.count` image/mask tensor-file pairs plus a manifest
    assigning train/val/test splits in the given proportions. Deterministic
    for a given seed; masks are exact indicators (speckle only on images).
    Returns the manifest path."""
    from pathlib import Path

    from .dataio import ManifestEntry, write_manifest
    from .dataio import save_tensor
    from .tensor import Tensor4

    params.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)

    total = sum(split_weights)
    n_val = params.count * split_weights[1] // total
    n_test = params.count * split_weights[2] // total
    n_train = params.count - n_val - n_test

    entries = []
    for i in range(params.count):
        img, mask = make_phantom(rng, params)
        img_name = f"img_{i:04d}.ot4"
        msk_name = f"msk_{i:04d}.ot4"
        save_tensor(out / img_name, Tensor4(img[None, None]))
        save_tensor(out / msk_name, Tensor4(mask[None, None]))
        if i < n_train:
            split = "train"
        elif i < n_train + n_val:
            split = "val"
        else:
            split = "test"
        entries.append(ManifestEntry(img_name, msk_name, split))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    return str(manifest)
