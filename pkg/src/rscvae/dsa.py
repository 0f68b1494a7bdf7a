"""Distributionally-shifted augmentation: turning normals into pseudo-anomalies.

Transforms act on the last two (spatial) axes, so they accept a single
``(C, H, W)`` image or a ``(B, C, H, W)`` batch. All of them are exact
index permutations or assignments, never interpolations.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError

TRANSFORMS = ("flip_h", "flip_v", "rot90", "cutout")


@dataclass(frozen=True)
class DsaConfig:
    probability: float = 0.01
    transform_pool: tuple = ("flip_h", "flip_v", "rot90")
    ops_per_sample: tuple = (1, 3)
    cutout_frac: float = 0.5
    cutout_fill: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "transform_pool", tuple(self.transform_pool))
        ops = self.ops_per_sample
        if isinstance(ops, int):
            ops = (ops, ops)
        object.__setattr__(self, "ops_per_sample", tuple(int(v) for v in ops))
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidInputError("dsa.probability must lie in [0, 1]")
        unknown = set(self.transform_pool) - set(TRANSFORMS)
        if unknown:
            raise InvalidInputError(f"unknown DSA transforms {sorted(unknown)}")
        if self.probability > 0 and not self.transform_pool:
            raise InvalidInputError("dsa.transform_pool is empty but probability > 0")
        lo, hi = self.ops_per_sample
        if not 1 <= lo <= hi <= 3:
            raise InvalidInputError("dsa.ops_per_sample must satisfy 1 <= min <= max <= 3")
        if not 0.0 < self.cutout_frac < 1.0:
            raise InvalidInputError("dsa.cutout_frac must lie in (0, 1)")
        if not 0.0 <= self.cutout_fill <= 1.0:
            raise InvalidInputError("dsa.cutout_fill must lie in [0, 1]")


def flip_h(x):
    return torch.flip(x, dims=(-1,))


def flip_v(x):
    return torch.flip(x, dims=(-2,))


def rot90(x):
    """Counter-clockwise quarter turn: ``out[..., r, c] == x[..., c, W-1-r]``."""
    if x.shape[-1] != x.shape[-2]:
        raise InvalidInputError(f"rot90 needs square images, got {tuple(x.shape[-2:])}")
    return torch.rot90(x, 1, dims=(-2, -1))


def cutout(x, rect, fill=0.0):
    top, left, h, w = (int(v) for v in rect)
    height, width = x.shape[-2:]
    if min(top, left, h, w) < 0 or top + h > height or left + w > width:
        raise InvalidInputError(f"cutout rect {rect} outside {height}x{width} image")
    out = x.clone()
    out[..., top:top + h, left:left + w] = fill
    return out


def random_cutout(x, cfg, rng):
    side = x.shape[-1]
    size = max(1, int(round(cfg.cutout_frac * side)))
    top = int(rng.integers(0, x.shape[-2] - size + 1))
    left = int(rng.integers(0, side - size + 1))
    return cutout(x, (top, left, size, size), cfg.cutout_fill)


def _apply_one(x, name, cfg, rng):
    if name == "cutout":
        return random_cutout(x, cfg, rng)
    return {"flip_h": flip_h, "flip_v": flip_v, "rot90": rot90}[name](x)


def apply_dsa(batch, cfg, rng):
    """Select each sample with probability ``cfg.probability`` and shift it.

    A selected sample gets k distinct transforms (k uniform in
    ``cfg.ops_per_sample``, capped at the pool size) composed in random
    order. Returns the new batch and a 0/1 int64 role mask.
    """
    n = batch.shape[0]
    selected = rng.random(n) < cfg.probability
    mask = torch.as_tensor(selected.astype(np.int64))
    if not selected.any():
        return batch, mask
    out = batch.clone()
    pool = list(cfg.transform_pool)
    lo, hi = cfg.ops_per_sample
    hi = min(hi, len(pool))
    lo = min(lo, hi)
    for i in np.flatnonzero(selected):
        k = int(rng.integers(lo, hi + 1))
        img = out[i]
        for j in rng.permutation(len(pool))[:k]:
            img = _apply_one(img, pool[j], cfg, rng)
        out[i] = img
    return out, mask
