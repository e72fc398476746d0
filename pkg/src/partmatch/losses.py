"""Visibility verification, part matching and classification losses.

Each function returns ``(loss, grads)`` for a single positive pair / image.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .graph_match import normalized_edges

LOG_CLAMP = 1e-7
NORM_EPS = 1e-12


def loss_visibility(v_star, vp, vg, eps: float = LOG_CLAMP):
    """``-sum_i v*_i log(clamp(vp_i * vg_i, eps, 1))``; gradients w.r.t. ``vp`` and ``vg``."""
    v_star = np.asarray(v_star, dtype=np.float64)
    vp = np.asarray(vp, dtype=np.float64)
    vg = np.asarray(vg, dtype=np.float64)
    if not (v_star.shape == vp.shape == vg.shape):
        raise ValueError(f"length mismatch: {v_star.shape}, {vp.shape}, {vg.shape}")
    prod = vp * vg
    clamped = np.clip(prod, eps, 1.0)
    loss = -float(np.sum(v_star * np.log(clamped)))
    live = prod > eps
    coef = np.where(live, -v_star / np.where(live, prod, 1.0), 0.0)
    return loss, (coef * vg, coef * vp)


def cosine_similarity_matrix(f):
    """Within-image cosine similarities ``(N_p, N_p)``; rows/cols of zero parts are 0."""
    norm = np.linalg.norm(f, axis=-1)
    ok = norm > NORM_EPS
    u = np.where(ok[:, None], f / np.where(ok, norm, 1.0)[:, None], 0.0)
    return u @ u.T, u, norm, ok


def lambda_prime(sp, sg):
    n = sp.shape[0]
    if n < 2:
        raise ValueError("part matching needs at least two parts")
    off = ~np.eye(n, dtype=bool)
    return ((sp + sg) * off).sum(axis=1) / (2.0 * (n - 1))


def _cosine_backward(g_s, u, norm, ok):
    """Back-propagate ``dL/dS`` through ``S = U U^T`` with ``U`` row-normalised features."""
    du = (g_s + g_s.T) @ u
    radial = np.einsum("ic,ic->i", du, u)
    df = (du - radial[:, None] * u) / np.where(ok, norm, 1.0)[:, None]
    return np.where(ok[:, None], df, 0.0)


def loss_matching(v_star, fp, fg, edge_mean=None, lambda_prime_grad: bool = True):
    """``-v*^T M v* + lambda'^T v*`` with ``M`` rebuilt from the part features.

    ``edge_mean`` is the running edge average (constant). Returns the loss,
    ``(dL/dfp, dL/dfg)`` and the lambda' vector.
    """
    v = np.asarray(v_star, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    fg = np.asarray(fg, dtype=np.float64)
    n = fp.shape[0]
    if n < 2:
        raise ValueError("part matching needs at least two parts")
    if fp.shape != fg.shape or v.shape != (n,):
        raise ValueError(f"shape mismatch: v {v.shape}, fp {fp.shape}, fg {fg.shape}")
    up, norm_p, safe_p = normalized_edges(fp)
    ug, norm_g, safe_g = normalized_edges(fg)
    edge_cos = np.einsum("ijc,ijc->ij", up, ug)
    m = edge_cos - (0.0 if edge_mean is None else edge_mean)
    np.fill_diagonal(m, np.einsum("ic,ic->i", fp, fg))
    sp, u_p, nrm_p, ok_p = cosine_similarity_matrix(fp)
    sg, u_g, nrm_g, ok_g = cosine_similarity_matrix(fg)
    lam = lambda_prime(sp, sg)
    loss = float(-v @ m @ v + lam @ v)

    vv = np.outer(v, v)
    # node terms
    dfp = -v[:, None] * fg
    dfg = -v[:, None] * fp
    # edge terms: d<a,b>/de_a = (b - <a,b> a) / ||e_a||
    g_edge = -vv * (~np.eye(n, dtype=bool))
    de_p = np.where(safe_p[..., None], g_edge[..., None] * (ug - edge_cos[..., None] * up)
                    / np.where(safe_p, norm_p, 1.0)[..., None], 0.0)
    de_g = np.where(safe_g[..., None], g_edge[..., None] * (up - edge_cos[..., None] * ug)
                    / np.where(safe_g, norm_g, 1.0)[..., None], 0.0)
    dfp += de_p.sum(axis=1) - de_p.sum(axis=0)
    dfg += de_g.sum(axis=1) - de_g.sum(axis=0)
    if lambda_prime_grad:
        g_s = np.repeat(v[:, None] / (2.0 * (n - 1)), n, axis=1)
        np.fill_diagonal(g_s, 0.0)
        dfp += _cosine_backward(g_s, u_p, nrm_p, ok_p)
        dfg += _cosine_backward(g_s, u_g, nrm_g, ok_g)
    return loss, (dfp, dfg), lam


@dataclass
class ToyClassifierBank:
    """One linear identity classifier per part, frozen after pretraining."""

    weight: np.ndarray  # (N_p, n_id, C)
    bias: np.ndarray  # (N_p, n_id)
    frozen: bool = False

    @property
    def n_parts(self) -> int:
        return self.weight.shape[0]

    @property
    def n_ids(self) -> int:
        return self.weight.shape[1]

    def logits(self, features):
        return np.einsum("kic,...kc->...ki", self.weight, features) + self.bias

    def update(self, dweight, dbias, lr: float) -> None:
        if self.frozen:
            raise RuntimeError("classifier bank is frozen")
        self.weight -= lr * dweight
        self.bias -= lr * dbias

    def freeze(self) -> None:
        self.frozen = True
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weight, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bias, dtype="<f8").tobytes())
        return h.hexdigest()


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_classification(features, bank: ToyClassifierBank, label: int):
    """Summed per-part cross-entropy; gradient w.r.t. part features ``(N_p, C)`` only."""
    if not 0 <= label < bank.n_ids:
        raise ValueError(f"label {label} outside 0..{bank.n_ids - 1}")
    features = np.asarray(features, dtype=np.float64)
    logp = log_softmax(bank.logits(features))
    loss = -float(logp[:, label].sum())
    dlogits = np.exp(logp)
    dlogits[:, label] -= 1.0
    return loss, np.einsum("ki,kic->kc", dlogits, bank.weight)
