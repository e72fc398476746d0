"""Pose-guided part attention and part-weighted pooling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_MASS = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class PgaParams:
    weight: np.ndarray  # (N_p, C_e)
    bias: np.ndarray  # (N_p,)

    @property
    def n_parts(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def init_pga(rng: np.random.Generator, n_parts: int, in_channels: int) -> PgaParams:
    bound = 1.0 / np.sqrt(in_channels)
    return PgaParams(rng.uniform(-bound, bound, size=(n_parts, in_channels)), np.zeros(n_parts))


@dataclass
class PartFeatureSet:
    features: np.ndarray  # (..., N_p, C)
    mass: np.ndarray  # (..., N_p)

    @property
    def visible_by_mass(self) -> np.ndarray:
        return self.mass > EPS_MASS

    @property
    def n_parts(self) -> int:
        return self.features.shape[-2]

    def __getitem__(self, idx) -> "PartFeatureSet":
        return PartFeatureSet(self.features[idx], self.mass[idx])


def pga_forward(f_pose, params: PgaParams) -> np.ndarray:
    """Attention stack ``A = sigmoid(1x1 conv(F_pose))``, shape ``(..., N_p, H, W)``."""
    f_pose = np.asarray(f_pose, dtype=np.float64)
    if f_pose.shape[-3] != params.weight.shape[1]:
        raise ValueError(f"F_pose has {f_pose.shape[-3]} channels, PGA expects {params.weight.shape[1]}")
    z = np.einsum("kc,...chw->...khw", params.weight, f_pose) + params.bias[:, None, None]
    return sigmoid(z)


def argmax_onehot(a) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest part index
    idx = np.argmax(a, axis=-3)
    return np.arange(a.shape[-3])[:, None, None] == idx[..., None, :, :]


def exclusive_max_mask(a) -> np.ndarray:
    a = np.asarray(a)
    return np.where(argmax_onehot(a), a, 0.0)


def part_pool(features, a_bar) -> PartFeatureSet:
    """Mass-normalised pooling of ``F`` (``(..., C, H, W)``) under masks ``(..., N_p, H, W)``."""
    features = np.asarray(features, dtype=np.float64)
    a_bar = np.asarray(a_bar, dtype=np.float64)
    if features.shape[-2:] != a_bar.shape[-2:]:
        raise ValueError(f"spatial dims differ: F {features.shape[-2:]} vs masks {a_bar.shape[-2:]}")
    mass = a_bar.sum(axis=(-2, -1))
    summed = np.einsum("...khw,...chw->...kc", a_bar, features)
    ok = mass > EPS_MASS
    pooled = np.where(ok[..., None], summed / np.where(ok, mass, 1.0)[..., None], 0.0)
    return PartFeatureSet(pooled, mass)


def stripe_masks(n_parts: int, h: int, w: int) -> np.ndarray:
    """Uniform horizontal-stripe masks (the fixed-partition baseline)."""
    bounds = np.round(np.linspace(0, h, n_parts + 1)).astype(int)
    if np.any(np.diff(bounds) == 0):
        raise ValueError(f"{h} rows cannot hold {n_parts} stripes")
    masks = np.zeros((n_parts, h, w))
    for i in range(n_parts):
        masks[i, bounds[i]:bounds[i + 1]] = 1.0
    return masks


@dataclass
class PgaCache:
    features: np.ndarray
    f_pose: np.ndarray
    attention: np.ndarray
    onehot: np.ndarray
    parts: PartFeatureSet


def pga_parts(features, f_pose, params: PgaParams, return_cache=False):
    """Full attention path: PGA -> exclusive max -> part pooling."""
    attention = pga_forward(f_pose, params)
    onehot = argmax_onehot(attention)
    parts = part_pool(features, np.where(onehot, attention, 0.0))
    if return_cache:
        return parts, PgaCache(np.asarray(features, dtype=np.float64), np.asarray(f_pose, dtype=np.float64),
                               attention, onehot, parts)
    return parts


def pga_backward(upstream, params: PgaParams, cache: PgaCache | None):
    """Gradients w.r.t. PGA weights/bias and F_pose given ``dL/df`` of shape ``(..., N_p, C)``.

    The argmax selection is held fixed; only selected entries carry gradient.
    """
    if cache is None:
        raise ValueError("pga_backward needs the cache from pga_parts(..., return_cache=True)")
    df = np.asarray(upstream, dtype=np.float64)
    parts = cache.parts
    ok = parts.visible_by_mass
    # d f_i / d abar_i(h,w) = (F(h,w) - f_i) / mass_i
    coef = np.where(ok[..., None], df / np.where(ok, parts.mass, 1.0)[..., None], 0.0)
    d_abar = (np.einsum("...kc,...chw->...khw", coef, cache.features)
              - np.einsum("...kc,...kc->...k", coef, parts.features)[..., None, None])
    a = cache.attention
    dz = np.where(cache.onehot, d_abar, 0.0) * a * (1.0 - a)
    k, c = params.weight.shape
    dz_flat = np.moveaxis(dz, -3, 0).reshape(k, -1)
    dw = dz_flat @ np.moveaxis(cache.f_pose, -3, 0).reshape(c, -1).T
    db = dz_flat.sum(axis=1)
    df_pose = np.einsum("kc,...khw->...chw", params.weight, dz)
    return {"weight": dw, "bias": db}, df_pose
