"""Part-graph affinity, moving-average centering and the binary quadratic program.

For a positive pair the affinity matrix holds node similarities on the
diagonal and centred edge similarities off the diagonal. The visibility
pseudo-label is the binary ``v`` maximising ``v^T M v - lam_bar^T v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EDGE_EPS = 1e-12
MAX_EXACT_PARTS = 20


@dataclass
class AffinityMatrix:
    matrix: np.ndarray  # centred M
    raw: np.ndarray  # before subtracting the running edge average


@dataclass
class MovingAverageState:
    n_parts: int
    momentum: float = 0.9
    edge_mean: np.ndarray | None = None  # (N_p, N_p), zero diagonal
    diag_mean: np.ndarray | None = None  # (N_p,)
    count: int = 0

    @property
    def initialized(self) -> bool:
        return self.count > 0

    def copy(self) -> "MovingAverageState":
        return MovingAverageState(
            self.n_parts, self.momentum,
            None if self.edge_mean is None else self.edge_mean.copy(),
            None if self.diag_mean is None else self.diag_mean.copy(),
            self.count,
        )


@dataclass
class MatchIndicator:
    v: np.ndarray  # int8 0/1
    objective: float

    @property
    def n_selected(self) -> int:
        return int(self.v.sum())


def normalized_edges(f):
    """Unit edge vectors ``(f_i - f_j)/||f_i - f_j||`` and their norms; zero where ``f_i == f_j``."""
    e = f[..., :, None, :] - f[..., None, :, :]
    norm = np.linalg.norm(e, axis=-1)
    safe = norm > EDGE_EPS
    unit = np.where(safe[..., None], e / np.where(safe, norm, 1.0)[..., None], 0.0)
    return unit, norm, safe


def raw_affinity(fp, fg) -> np.ndarray:
    """Uncentred affinity for part features ``(..., N_p, C)``."""
    fp = np.asarray(fp, dtype=np.float64)
    fg = np.asarray(fg, dtype=np.float64)
    if fp.shape != fg.shape:
        raise ValueError(f"part feature shapes differ: {fp.shape} vs {fg.shape}")
    up, _, _ = normalized_edges(fp)
    ug, _, _ = normalized_edges(fg)
    m = np.einsum("...ijc,...ijc->...ij", up, ug)
    n = fp.shape[-2]
    idx = np.arange(n)
    m[..., idx, idx] = np.einsum("...ic,...ic->...i", fp, fg)
    return m


def _features(parts):
    return parts.features if hasattr(parts, "features") else np.asarray(parts)


def build_affinity(parts_p, parts_g, state: MovingAverageState | None = None) -> AffinityMatrix:
    raw = raw_affinity(_features(parts_p), _features(parts_g))
    centred = raw.copy()
    if state is not None and state.initialized:
        if raw.shape[-1] != state.n_parts:
            raise ValueError(f"N_p {raw.shape[-1]} does not match state ({state.n_parts})")
        centred = centred - state.edge_mean
    return AffinityMatrix(centred, raw)


def update_moving_average(state: MovingAverageState, raw) -> MovingAverageState:
    """Fold a batch of raw affinities ``(B, N_p, N_p)`` (or one matrix) into the state, in place."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    n = state.n_parts
    if raw.shape[-2:] != (n, n):
        raise ValueError(f"affinity {raw.shape[-2:]} does not match state N_p={n}")
    batch = raw.mean(axis=0)
    diag = np.diag(batch).copy()
    edges = batch - np.diag(diag)
    if not state.initialized:
        state.edge_mean, state.diag_mean = edges, diag
    else:
        rho = state.momentum
        state.edge_mean = rho * state.edge_mean + (1.0 - rho) * edges
        state.diag_mean = rho * state.diag_mean + (1.0 - rho) * diag
    state.count += 1
    return state


def regularizer(state: MovingAverageState, lam: float) -> np.ndarray:
    if not state.initialized:
        raise ValueError("moving-average state has not seen any affinities yet")
    return lam * state.diag_mean


def objective(m, lam_bar, v) -> float:
    """Correctly rounded ``v^T M v - lam_bar^T v`` for binary ``v``."""
    sel = np.flatnonzero(v)
    terms = [float(x) for x in np.asarray(m)[np.ix_(sel, sel)].ravel()]
    terms += [-float(lam_bar[i]) for i in sel]
    return math.fsum(terms)


_ENUM_CACHE: dict[int, np.ndarray] = {}


def _all_indicators(n: int) -> np.ndarray:
    if n not in _ENUM_CACHE:
        codes = np.arange(2**n, dtype=np.int64)
        # bit (n-1-i) of the code is v_i, so larger codes are lexicographically greater
        _ENUM_CACHE[n] = ((codes[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.int8)
    return _ENUM_CACHE[n]


def _best(m, lam_bar, candidates) -> MatchIndicator:
    """Exact comparison among candidate indicators: objective, then part count, then lexicographic."""
    best_key, best_v = None, None
    for v in candidates:
        key = (objective(m, lam_bar, v), int(v.sum()), tuple(int(x) for x in v))
        if best_key is None or key > best_key:
            best_key, best_v = key, v
    return MatchIndicator(np.array(best_v, dtype=np.int8), best_key[0])


def solve_iqp_exact(m, lam_bar) -> MatchIndicator:
    """Global optimum by enumerating all ``2**N_p`` indicators."""
    m = np.asarray(m, dtype=np.float64)
    lam_bar = np.asarray(lam_bar, dtype=np.float64)
    n = m.shape[0]
    if n > MAX_EXACT_PARTS:
        raise ValueError(f"N_p={n} exceeds the enumeration bound {MAX_EXACT_PARTS}; use solve_iqp_local")
    vs = _all_indicators(n)
    vf = vs.astype(np.float64)
    vals = np.einsum("ki,ij,kj->k", vf, m, vf) - vf @ lam_bar
    # float summation order can split exact ties; re-rank near-optimal candidates exactly
    slack = 1e-9 * max(1.0, np.abs(m).sum() + np.abs(lam_bar).sum())
    near = vs[vals >= vals.max() - slack]
    return _best(m, lam_bar, near)


def _local_search(m, lam_bar, v, order):
    v = v.copy()
    # gain of flipping i: (1 - 2 v_i) * (M_ii + 2 sum_{j != i} M_ij v_j - lam_i)
    improved = True
    while improved:
        improved = False
        for i in order:
            cross = 2.0 * (m[i] @ v - m[i, i] * v[i])
            gain = (1 - 2 * v[i]) * (m[i, i] + cross - lam_bar[i])
            if gain > 1e-12:
                v[i] = 1 - v[i]
                improved = True
    return v


def solve_iqp_local(m, lam_bar, seed: int = 0, restarts: int = 8) -> MatchIndicator:
    """Single-flip local search from all-zeros, all-ones and ``restarts`` seeded random starts."""
    m = np.asarray(m, dtype=np.float64)
    lam_bar = np.asarray(lam_bar, dtype=np.float64)
    n = m.shape[0]
    rng = np.random.default_rng(seed)
    starts = [np.zeros(n, dtype=np.int8), np.ones(n, dtype=np.int8)]
    starts += [rng.integers(0, 2, size=n).astype(np.int8) for _ in range(restarts)]
    finals = [_local_search(m, lam_bar, s, rng.permutation(n)) for s in starts]
    return _best(m, lam_bar, finals + starts[:2])


def threshold_baseline(m, tau: float) -> MatchIndicator:
    m = np.asarray(m, dtype=np.float64)
    v = (np.diag(m) > tau).astype(np.int8)
    return MatchIndicator(v, objective(m, np.zeros(m.shape[0]), v))
