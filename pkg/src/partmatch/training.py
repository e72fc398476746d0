"""Classifier pre-stage and the self-supervised training loop.

Per step: part features and visibility scores are computed for a batch of
positive pairs, pseudo-labels are mined per pair from the affinity matrix
(with the moving-average state from before the step), and the three losses
are back-propagated. PVP receives only the visibility loss, PGA the
classification and matching losses, and the pose encoder all three.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import minimize

from . import attention, pose_encoder, visibility
from .graph_match import raw_affinity, regularizer, solve_iqp_exact, threshold_baseline, update_moving_average
from .losses import ToyClassifierBank, loss_classification, loss_matching, loss_visibility
from .model import Model, init_model, load_images

log = logging.getLogger(__name__)

PSEUDO_LABELERS = ("iqp", "threshold")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 0.002
    lam: float = 0.9
    n_parts: int = 6
    seed: int = 0
    max_iters: int | None = None
    pe_hidden: int = 32
    pose_features: int = 128
    ma_momentum: float = 0.9
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    pseudo_label: str = "iqp"
    tau: float | None = None
    lambda_prime_grad: bool = True
    augment_prob: float = 0.0
    bn_recalibrate: bool = True
    pretrain_epochs: int = 200

    def __post_init__(self):
        for name in ("batch_size", "epochs", "n_parts", "pe_hidden", "pose_features", "pretrain_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2 (pairs of images)")
        if self.lr < 0 or self.lam < 0:
            raise ValueError("lr and lam must be non-negative")
        if self.max_iters is not None and self.max_iters <= 0:
            raise ValueError("max_iters must be positive")
        if self.pseudo_label not in PSEUDO_LABELERS:
            raise ValueError(f"pseudo_label must be one of {PSEUDO_LABELERS}")
        if self.pseudo_label == "threshold" and self.tau is None:
            raise ValueError("threshold pseudo-labels need tau")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- classifier pre-stage ----------------------------------------------------

def stripe_features(feats, n_parts: int) -> np.ndarray:
    """Uniform horizontal-stripe part features ``(B, N_p, C)``."""
    masks = attention.stripe_masks(n_parts, feats.shape[-2], feats.shape[-1])
    return attention.part_pool(feats, masks).features


def _softmax_regression(x, y, n_classes, max_iter, l2=1e-4):
    n, c = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def fun(theta):
        w = theta[:n_classes * c].reshape(n_classes, c)
        b = theta[n_classes * c:]
        z = x @ w.T + b
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(w * w)
        d = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(d.T @ x + l2 * w).ravel(), d.sum(axis=0)])

    res = minimize(fun, np.zeros(n_classes * (c + 1)), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    return res.x[:n_classes * c].reshape(n_classes, c), res.x[n_classes * c:]


def pretrain_classifiers(feats, labels, n_parts: int, epochs: int = 200) -> ToyClassifierBank:
    """Fit one softmax classifier per uniform stripe, then freeze the bank.

    ``epochs`` bounds the L-BFGS iterations. Deterministic (zero start).
    """
    labels = np.asarray(labels)
    n_ids = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two identities to pretrain classifiers")
    parts = stripe_features(feats, n_parts)
    ws, bs = [], []
    for i in range(n_parts):
        w, b = _softmax_regression(parts[:, i], labels, n_ids, epochs)
        ws.append(w)
        bs.append(b)
    bank = ToyClassifierBank(np.stack(ws), np.stack(bs))
    bank.freeze()
    return bank


def classifier_accuracy(bank: ToyClassifierBank, feats, labels) -> float:
    parts = stripe_features(feats, bank.n_parts)
    pred = bank.logits(parts).argmax(axis=-1)
    return float(np.mean(pred == np.asarray(labels)[:, None]))


# -- training ----------------------------------------------------------------

@dataclass
class StepResult:
    metrics: dict
    v_star: np.ndarray  # (B, N_p)
    raw: np.ndarray  # (B, N_p, N_p)


def pseudo_labels(raw, model: Model, cfg: TrainConfig) -> np.ndarray:
    """Mine ``v*`` for every pair of a batch from raw affinities ``(B, N_p, N_p)``."""
    out = np.zeros(raw.shape[:2], dtype=np.int8)
    lam_bar = regularizer(model.state, cfg.lam)
    for b in range(raw.shape[0]):
        m = raw[b] - model.state.edge_mean
        if cfg.pseudo_label == "iqp":
            out[b] = solve_iqp_exact(m, lam_bar).v
        else:
            out[b] = threshold_baseline(m, cfg.tau).v
    return out


def forward_backward(model: Model, bank: ToyClassifierBank, feats, poses, labels, cfg: TrainConfig):
    """Losses and gradients for a batch laid out as pairs ``(2k, 2k+1)``.

    Mines pseudo-labels with the current (pre-step) moving-average state; the
    first ever batch initialises that state before mining.
    """
    n_img = feats.shape[0]
    f_pose, pe_cache = pose_encoder.pe_forward(poses, model.pe, out_hw=feats.shape[-2:], return_cache=True)
    parts, pga_cache = attention.pga_parts(feats, f_pose, model.pga, return_cache=True)
    scores, pvp_cache = visibility.pvp_forward(f_pose, model.pvp, "train", return_cache=True)

    fp, fg = parts.features[0::2], parts.features[1::2]
    raw = raw_affinity(fp, fg)
    if not model.state.initialized:
        update_moving_average(model.state, raw)
    v_star = pseudo_labels(raw, model, cfg)

    d_feat = np.zeros_like(parts.features)
    d_score = np.zeros_like(scores)
    l_v = l_m = l_c = 0.0
    for k in range(n_img // 2):
        p, g = 2 * k, 2 * k + 1
        lv, (dvp, dvg) = loss_visibility(v_star[k], scores[p], scores[g])
        lm, (dfp, dfg), _ = loss_matching(v_star[k], fp[k], fg[k], model.state.edge_mean, cfg.lambda_prime_grad)
        l_v += lv
        l_m += lm
        d_score[p] += dvp
        d_score[g] += dvg
        d_feat[p] += dfp
        d_feat[g] += dfg
    for i in range(n_img):
        lc, dfc = loss_classification(parts.features[i], bank, int(labels[i]))
        l_c += lc
        d_feat[i] += dfc

    g_pga, dpose_a = attention.pga_backward(d_feat, model.pga, pga_cache)
    g_pvp, dpose_v = visibility.pvp_backward(d_score, model.pvp, pvp_cache, "train")
    g_pe = pose_encoder.pe_backward(dpose_a + dpose_v, model.pe, pe_cache)
    n_pairs = n_img // 2
    metrics = {"L_v": l_v / n_pairs, "L_m": l_m / n_pairs, "L_c": l_c / n_pairs,
               "mean_selected": float(v_star.sum(axis=1).mean())}
    return metrics, {"pe": g_pe, "pga": g_pga, "pvp": g_pvp}, v_star, raw


def sgd_update(model: Model, grads: dict, lr: float) -> None:
    for group, params in (("pe", model.pe), ("pga", model.pga), ("pvp", model.pvp)):
        for name, g in grads[group].items():
            setattr(params, name, getattr(params, name) - lr * g)


def train_step(model: Model, bank: ToyClassifierBank, feats, poses, labels, cfg: TrainConfig) -> StepResult:
    if feats.shape[0] < 2 or feats.shape[0] % 2:
        raise ValueError("a training batch must hold at least one positive pair")
    labels = np.asarray(labels)
    if np.any(labels[0::2] != labels[1::2]):
        raise ValueError("batch rows (2k, 2k+1) must be positive pairs")
    metrics, grads, v_star, raw = forward_backward(model, bank, feats, poses, labels, cfg)
    sgd_update(model, grads, cfg.lr)
    update_moving_average(model.state, raw)
    metrics["lr"] = cfg.lr
    return StepResult(metrics, v_star, raw)


def pair_batches(labels, cfg: TrainConfig, rng: np.random.Generator):
    """One epoch of batches: ``batch_size // 2`` identities per batch, one random pair each."""
    labels = np.asarray(labels)
    by_id = {}
    for idx, y in enumerate(labels):
        by_id.setdefault(int(y), []).append(idx)
    ids = np.array(sorted(y for y, rows in by_id.items() if len(rows) >= 2))
    if len(ids) == 0:
        raise ValueError("no identity has two images; cannot form positive pairs")
    per_batch = cfg.batch_size // 2
    order = rng.permutation(ids)
    for start in range(0, len(order), per_batch):
        chunk = order[start:start + per_batch]
        rows = []
        for y in chunk:
            a, b = rng.choice(by_id[int(y)], size=2, replace=False)
            rows.extend([a, b])
        yield np.array(rows)


def train(model: Model, bank: ToyClassifierBank, feats, poses, labels, cfg: TrainConfig,
          augment=None, callback=None) -> list[dict]:
    """Run Algorithm-1 style training; returns one metrics row per step.

    ``augment(feats, poses, rng)`` (optional) returns occluded copies of a batch.
    """
    if not bank.frozen:
        raise ValueError("classifier bank must be frozen before training")
    rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.max_iters is not None and step >= cfg.max_iters:
            break
        for batch in pair_batches(labels, cfg, rng):
            if cfg.max_iters is not None and step >= cfg.max_iters:
                break
            bf, bp = feats[batch], poses[batch]
            if augment is not None and cfg.augment_prob > 0:
                bf, bp = augment(bf, bp, rng, cfg.augment_prob)
            res = train_step(model, bank, bf, bp, labels[batch], cfg)
            step += 1
            row = {"step": step, "epoch": epoch, **res.metrics}
            rows.append(row)
            if callback is not None:
                callback(row, res)
    if cfg.bn_recalibrate:
        recalibrate_bn(model, feats, poses, cfg.batch_size)
    return rows


def recalibrate_bn(model: Model, feats, poses, chunk: int = 256) -> None:
    """Set PVP running statistics to their population values over the training images."""
    f_pose = (pose_encoder.pe_forward(poses[lo:lo + chunk], model.pe, out_hw=feats.shape[-2:])
              for lo in range(0, poses.shape[0], chunk))
    visibility.recalibrate_running_stats(f_pose, model.pvp)


def build_model(cfg: TrainConfig, pose_hw, feature_hw) -> Model:
    rng = np.random.default_rng([cfg.seed, 0])
    model = init_model(rng, cfg.n_parts, pose_hw, feature_hw, cfg.pe_hidden, cfg.pose_features,
                       cfg.bn_momentum, cfg.bn_eps, cfg.ma_momentum)
    model.meta.update({"n_parts": cfg.n_parts, "feature_hw": list(feature_hw), "pose_hw": list(pose_hw)})
    return model


def load_train_split(manifest):
    records = manifest.by_role("train")
    feats, poses = load_images(records)
    labels = np.array([r.label for r in records])
    return records, feats, poses, labels
