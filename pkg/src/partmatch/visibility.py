"""Pose-guided visibility predictor: GAP -> 1x1 conv -> BatchNorm -> sigmoid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import sigmoid


@dataclass
class PvpParams:
    weight: np.ndarray  # (N_p, C_e)
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def n_parts(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias, "gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}


TRAINABLE = ("weight", "bias", "gamma", "beta")


def init_pvp(rng: np.random.Generator, n_parts: int, in_channels: int,
             momentum: float = 0.1, eps: float = 1e-5) -> PvpParams:
    bound = 1.0 / np.sqrt(in_channels)
    return PvpParams(
        weight=rng.uniform(-bound, bound, size=(n_parts, in_channels)), bias=np.zeros(n_parts),
        gamma=np.ones(n_parts), beta=np.zeros(n_parts),
        running_mean=np.zeros(n_parts), running_var=np.ones(n_parts),
        momentum=momentum, eps=eps,
    )


@dataclass
class PvpCache:
    mode: str
    spatial: tuple[int, int]
    pooled: np.ndarray
    z_hat: np.ndarray
    inv_std: np.ndarray
    scores: np.ndarray


def pvp_forward(f_pose, params: PvpParams, mode: str = "eval", return_cache=False):
    """Visibility scores ``(B, N_p)`` for a batch of pose features ``(B, C_e, H, W)``.

    Train mode normalises with batch statistics and updates the running
    statistics in place; it needs at least two samples.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    f_pose = np.asarray(f_pose, dtype=np.float64)
    single = f_pose.ndim == 3
    if single:
        f_pose = f_pose[None]
    pooled = f_pose.mean(axis=(2, 3))
    z = pooled @ params.weight.T + params.bias
    if mode == "train":
        if z.shape[0] < 2:
            raise ValueError("train-mode batch normalisation needs a batch of at least 2")
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        m = params.momentum
        params.running_mean = (1.0 - m) * params.running_mean + m * mu
        params.running_var = (1.0 - m) * params.running_var + m * var
    else:
        mu, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    z_hat = (z - mu) * inv_std
    scores = sigmoid(params.gamma * z_hat + params.beta)
    out = scores[0] if single else scores
    if return_cache:
        return out, PvpCache(mode, f_pose.shape[2:], pooled, z_hat, inv_std, scores)
    return out


def recalibrate_running_stats(f_pose_batches, params: PvpParams) -> PvpParams:
    """Replace the running statistics with population statistics over ``f_pose_batches``.

    Over a short run the momentum average trails the pose encoder; this sets
    the eval-mode normaliser to the statistics of the final weights.
    """
    zs = [np.asarray(f, dtype=np.float64).mean(axis=(2, 3)) @ params.weight.T + params.bias
          for f in f_pose_batches]
    z = np.concatenate(zs)
    if z.shape[0] < 2:
        raise ValueError("recalibration needs at least two samples")
    params.running_mean = z.mean(axis=0)
    params.running_var = z.var(axis=0)
    return params


def pvp_backward(upstream, params: PvpParams, cache: PvpCache, mode: str | None = None):
    """Returns (param grads, dL/dF_pose)."""
    if mode is not None and mode != cache.mode:
        raise ValueError(f"backward in {mode!r} mode after a {cache.mode!r} forward")
    dv = np.asarray(upstream, dtype=np.float64).reshape(cache.scores.shape)
    s = cache.scores
    dy = dv * s * (1.0 - s)
    dgamma = (dy * cache.z_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dz_hat = dy * params.gamma
    if cache.mode == "train":
        n = dz_hat.shape[0]
        dz = cache.inv_std / n * (n * dz_hat - dz_hat.sum(axis=0) - cache.z_hat * (dz_hat * cache.z_hat).sum(axis=0))
    else:
        dz = dz_hat * cache.inv_std
    dweight = dz.T @ cache.pooled
    dbias = dz.sum(axis=0)
    dpooled = dz @ params.weight
    h, w = cache.spatial
    df_pose = np.broadcast_to((dpooled / (h * w))[:, :, None, None], dpooled.shape + (h, w)).copy()
    grads = {"weight": dweight, "bias": dbias, "gamma": dgamma, "beta": dbeta}
    return grads, df_pose
