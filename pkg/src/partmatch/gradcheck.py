"""Central finite-difference checks for every differentiable operation.

Each op has a trial function building a small random instance and returning
``{name: (analytic, numeric)}``, or ``None`` when the instance sits too close
to a non-differentiable point (ReLU kink, argmax switch, log clamp) and must
be redrawn.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import attention, losses, pose_encoder, visibility

TOLERANCE = 1e-4


def numeric_grad(f, x: np.ndarray, step: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = f()
        flat[k] = orig - step
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * step)
    return g


def relative_error(analytic, numeric) -> float:
    """Max abs difference scaled by the larger gradient magnitude (infinity norm)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale < 1e-12:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _trial_pe(rng, step):
    hidden, c_e = 3, 4
    params = pose_encoder.init_pose_encoder(rng, (2, 2), hidden=hidden, out_channels=c_e)
    params.b1 = rng.normal(scale=0.1, size=hidden)
    params.b2 = rng.normal(scale=0.1, size=c_e)
    pose = rng.uniform(0, 1, size=(2, pose_encoder.POSE_CHANNELS, 4, 4))
    out, cache = pose_encoder.pe_forward(pose, params, return_cache=True)
    # redraw near ReLU kinks: a perturbation of size `step` can move pre-activations by ~step * |input|
    margin = 5 * step * max(1.0, np.abs(pose).max(), np.abs(cache.pre1).max())
    if min(np.abs(cache.pre1).min(), np.abs(cache.pre2).min()) < margin:
        return None
    up = rng.normal(size=out.shape)
    grads = pose_encoder.pe_backward(up, params, cache)

    def f():
        return float(np.sum(up * pose_encoder.pe_forward(pose, params)))

    return {k: (grads[k], numeric_grad(f, getattr(params, k), step)) for k in ("w1", "b1", "w2", "b2")}


def _trial_pga(rng, step):
    n_parts, c_e, c, h, w = 3, 4, 5, 3, 3
    params = attention.init_pga(rng, n_parts, c_e)
    params.bias = rng.normal(scale=0.5, size=n_parts)
    f_pose = rng.uniform(0, 2, size=(2, c_e, h, w))
    feats = rng.normal(size=(2, c, h, w))
    parts, cache = attention.pga_parts(feats, f_pose, params, return_cache=True)
    top2 = np.sort(cache.attention, axis=1)[:, -2:]
    if np.min(top2[:, 1] - top2[:, 0]) < 1e3 * step:
        return None
    up = rng.normal(size=parts.features.shape)
    grads, df_pose = attention.pga_backward(up, params, cache)

    def f():
        return float(np.sum(up * attention.pga_parts(feats, f_pose, params).features))

    out = {k: (grads[k], numeric_grad(f, getattr(params, k), step)) for k in ("weight", "bias")}
    out["f_pose"] = (df_pose, numeric_grad(f, f_pose, step))
    return out


def _trial_pvp(rng, step, mode):
    n_parts, c_e = 3, 5
    params = visibility.init_pvp(rng, n_parts, c_e)
    params.gamma = rng.uniform(0.5, 1.5, size=n_parts)
    params.beta = rng.normal(scale=0.3, size=n_parts)
    params.running_mean = rng.normal(scale=0.2, size=n_parts)
    params.running_var = rng.uniform(0.5, 1.5, size=n_parts)
    f_pose = rng.uniform(0, 1, size=(4, c_e, 2, 3))
    snapshot = (params.running_mean.copy(), params.running_var.copy())
    out, cache = visibility.pvp_forward(f_pose, params, mode, return_cache=True)
    up = rng.normal(size=out.shape)
    grads, df_pose = visibility.pvp_backward(up, params, cache, mode)

    def f():
        params.running_mean, params.running_var = snapshot[0].copy(), snapshot[1].copy()
        return float(np.sum(up * visibility.pvp_forward(f_pose, params, mode)))

    res = {k: (grads[k], numeric_grad(f, getattr(params, k), step)) for k in visibility.TRAINABLE}
    res["f_pose"] = (df_pose, numeric_grad(f, f_pose, step))
    return res


def _trial_loss_visibility(rng, step):
    n = 6
    v_star = rng.integers(0, 2, size=n).astype(float)
    vp = rng.uniform(0.05, 0.99, size=n)
    vg = rng.uniform(0.05, 0.99, size=n)
    # clamp boundary excluded
    if np.min(vp * vg) < losses.LOG_CLAMP + 1e3 * step:
        return None
    _, (gp, gg) = losses.loss_visibility(v_star, vp, vg)

    def f():
        return losses.loss_visibility(v_star, vp, vg)[0]

    return {"vp": (gp, numeric_grad(f, vp, step)), "vg": (gg, numeric_grad(f, vg, step))}


def _trial_loss_matching(rng, step):
    n, c = 4, 5
    fp = rng.normal(size=(n, c))
    fg = fp + 0.5 * rng.normal(size=(n, c))
    v_star = rng.integers(0, 2, size=n).astype(float)
    edge_mean = rng.uniform(-0.3, 0.3, size=(n, n))
    edge_mean = (edge_mean + edge_mean.T) / 2
    np.fill_diagonal(edge_mean, 0.0)
    flag = bool(rng.integers(0, 2))
    _, (gp, gg), _ = losses.loss_matching(v_star, fp, fg, edge_mean, lambda_prime_grad=flag)

    def f():
        return losses.loss_matching(v_star, fp, fg, edge_mean, lambda_prime_grad=flag)[0]

    if flag:
        return {"fp": (gp, numeric_grad(f, fp, step)), "fg": (gg, numeric_grad(f, fg, step))}
    # constant-lambda' variant: compare against the loss with lambda' frozen at its current value
    lam = losses.lambda_prime(losses.cosine_similarity_matrix(fp)[0], losses.cosine_similarity_matrix(fg)[0])

    def f_const():
        loss, _, lam_now = losses.loss_matching(v_star, fp, fg, edge_mean)
        return loss - lam_now @ v_star + lam @ v_star

    return {"fp": (gp, numeric_grad(f_const, fp, step)), "fg": (gg, numeric_grad(f_const, fg, step))}


def _trial_loss_classification(rng, step):
    n_parts, n_ids, c = 3, 4, 5
    bank = losses.ToyClassifierBank(rng.normal(size=(n_parts, n_ids, c)), rng.normal(size=(n_parts, n_ids)))
    bank.freeze()
    feats = rng.normal(size=(n_parts, c))
    label = int(rng.integers(0, n_ids))
    _, g = losses.loss_classification(feats, bank, label)

    def f():
        return losses.loss_classification(feats, bank, label)[0]

    return {"features": (g, numeric_grad(f, feats, step))}


OPS = {
    "pe": _trial_pe,
    "pga": _trial_pga,
    "pvp_train": lambda rng, step: _trial_pvp(rng, step, "train"),
    "pvp_eval": lambda rng, step: _trial_pvp(rng, step, "eval"),
    "loss_visibility": _trial_loss_visibility,
    "loss_matching": _trial_loss_matching,
    "loss_classification": _trial_loss_classification,
}


def check_gradients(ops=None, trials: int = 20, seed: int = 0, step: float = 1e-5,
                    tolerance: float = TOLERANCE, max_redraws: int = 1000) -> dict:
    """Run ``trials`` randomized checks per op; report the max relative error of each."""
    ops = list(OPS) if ops in (None, "all") else ([ops] if isinstance(ops, str) else list(ops))
    unknown = set(ops) - set(OPS)
    if unknown:
        raise ValueError(f"unknown op(s) {sorted(unknown)}; choose from {sorted(OPS)}")
    report = {"seed": seed, "trials": trials, "step": step, "tolerance": tolerance, "ops": {}}
    for name in ops:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        errors, redraws = [], 0
        while len(errors) < trials:
            res = OPS[name](rng, step)
            if res is None:
                redraws += 1
                if redraws > max_redraws:
                    raise RuntimeError(f"{name}: could not draw an instance away from kinks")
                continue
            analytic = np.concatenate([np.ravel(a) for a, _ in res.values()])
            numeric = np.concatenate([np.ravel(n) for _, n in res.values()])
            errors.append(relative_error(analytic, numeric))
        worst = max(errors)
        report["ops"][name] = {"max_rel_error": worst, "trials": trials, "redraws": redraws,
                               "passed": worst < tolerance}
    report["passed"] = all(r["passed"] for r in report["ops"].values())
    return report
