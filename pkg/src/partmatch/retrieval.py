"""Visibility-weighted part distances, ranking and single-query CMC / mAP."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import attention, pose_encoder, visibility
from .model import Model, load_images
from .training import stripe_features

log = logging.getLogger(__name__)

MODES = ("pvpm", "pga-only", "pvp-only", "baseline", "thre")
WEIGHT_EPS = 1e-6
NORM_EPS = 1e-12


def _unit_rows(f):
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    ok = norm > NORM_EPS
    return np.where(ok, f / np.where(ok, norm, 1.0), 0.0), ok[..., 0]


def part_distances(fp, fg) -> np.ndarray:
    """Cosine distance per part; a zero-feature part on either side gives 1."""
    fp = np.asarray(getattr(fp, "features", fp), dtype=np.float64)
    fg = np.asarray(getattr(fg, "features", fg), dtype=np.float64)
    if fp.shape != fg.shape:
        raise ValueError(f"part feature shapes differ: {fp.shape} vs {fg.shape}")
    up, okp = _unit_rows(fp)
    ug, okg = _unit_rows(fg)
    d = 1.0 - np.einsum("...c,...c->...", up, ug)
    return np.where(okp & okg, np.clip(d, 0.0, 2.0), 1.0)


def weighted_distance(d, vp, vg):
    """``sum(vp*vg*d) / sum(vp*vg)`` over the last axis, falling back to the plain mean."""
    d = np.asarray(d, dtype=np.float64)
    w = np.asarray(vp, dtype=np.float64) * np.asarray(vg, dtype=np.float64)
    if d.shape[-1] != w.shape[-1]:
        raise ValueError(f"length mismatch: {d.shape} vs {w.shape}")
    den = w.sum(axis=-1)
    num = (w * d).sum(axis=-1)
    ok = den >= WEIGHT_EPS
    out = np.where(ok, num / np.where(ok, den, 1.0), d.mean(axis=-1))
    return float(out) if out.ndim == 0 else out


def distance_matrix(fq, vq, fg, vg) -> np.ndarray:
    """All query x gallery weighted distances. ``f*``: ``(n, N_p, C)``, ``v*``: ``(n, N_p)``."""
    uq, okq = _unit_rows(fq)
    ug, okg = _unit_rows(fg)
    d = 1.0 - np.einsum("qkc,gkc->qgk", uq, ug)
    d = np.where(okq[:, None, :] & okg[None, :, :], np.clip(d, 0.0, 2.0), 1.0)
    return weighted_distance(d, vq[:, None, :], vg[None, :, :])


@dataclass
class RankingResult:
    cmc: np.ndarray
    mAP: float
    ap: np.ndarray
    rankings: list = field(default_factory=list)  # per query: gallery indices, best first
    excluded: list = field(default_factory=list)  # query indices without a gallery match

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_json(self, query_ids=None, gallery_ids=None, topk: int | None = None) -> dict:
        out = {"rank1": self.rank1, "mAP": self.mAP, "cmc": [float(x) for x in self.cmc],
               "n_queries": int(len(self.ap)), "excluded": len(self.excluded)}
        if query_ids is not None:
            out["excluded_ids"] = [query_ids[i] for i in self.excluded]
        return out


def rank_metrics(dist, q_labels, g_labels, max_rank: int | None = None) -> RankingResult:
    """Single-query CMC and mAP from a distance matrix ``(n_query, n_gallery)``.

    Ties keep gallery order (stable sort). AP averages precision over all
    same-identity gallery items. Queries without any match are excluded.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    n_q, n_g = dist.shape
    max_rank = n_g if max_rank is None else min(max_rank, n_g)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = g_labels[order] == q_labels[:, None]
    has = matches.any(axis=1)
    excluded = [int(i) for i in np.flatnonzero(~has)]
    if excluded:
        log.warning("%d queries have no gallery match and are excluded", len(excluded))
    m = matches[has]
    if m.shape[0] == 0:
        raise ValueError("no query has a matching gallery identity")
    first = m.argmax(axis=1)
    cmc = np.array([(first < k).mean() for k in range(1, max_rank + 1)])
    hits = np.cumsum(m, axis=1)
    precision = hits / np.arange(1, n_g + 1)
    # correctly rounded sums: the result does not depend on summation order
    ap = np.array([math.fsum(p[hit]) for p, hit in zip(precision, m)]) / m.sum(axis=1)
    return RankingResult(cmc, math.fsum(ap) / len(ap), ap, [row for row in order], excluded)


# -- end-to-end evaluation -----------------------------------------------------

def image_parts(model: Model | None, feats, poses, mode: str, n_parts: int | None = None, chunk: int = 256):
    """Part features ``(n, N_p, C)`` and visibility weights ``(n, N_p)`` for one evaluation mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == "baseline":
        if n_parts is None:
            n_parts = model.n_parts if model is not None else None
        if n_parts is None:
            raise ValueError("baseline mode needs n_parts")
        f = stripe_features(feats, n_parts)
        return f, np.ones(f.shape[:2])
    if model is None:
        raise ValueError(f"mode {mode!r} needs a trained model")
    feats_out, vis_out = [], []
    for lo in range(0, feats.shape[0], chunk):
        fb, pb = feats[lo:lo + chunk], poses[lo:lo + chunk]
        f_pose = pose_encoder.pe_forward(pb, model.pe, out_hw=fb.shape[-2:])
        if mode == "pvp-only":
            f = stripe_features(fb, model.n_parts)
        else:
            f = attention.pga_parts(fb, f_pose, model.pga).features
        if mode == "pga-only":
            v = np.ones(f.shape[:2])
        else:
            v = visibility.pvp_forward(f_pose, model.pvp, "eval")
        feats_out.append(f)
        vis_out.append(v)
    return np.concatenate(feats_out), np.concatenate(vis_out)


def evaluate(manifest, model: Model | None, mode: str = "pvpm", n_parts: int | None = None,
             max_rank: int | None = None) -> RankingResult:
    probes = manifest.by_role("probe")
    gallery = manifest.by_role("gallery")
    if not probes or not gallery:
        raise ValueError("evaluation needs at least one probe and one gallery record")
    fq, pq = load_images(probes)
    fg, pg = load_images(gallery)
    return evaluate_arrays(model, (fq, pq, [r.label for r in probes]), (fg, pg, [r.label for r in gallery]),
                           mode, n_parts, max_rank)


def evaluate_arrays(model, probe, gallery, mode="pvpm", n_parts=None, max_rank=None) -> RankingResult:
    fq, pq, lq = probe
    fg, pg, lg = gallery
    qf, qv = image_parts(model, fq, pq, mode, n_parts)
    gf, gv = image_parts(model, fg, pg, mode, n_parts)
    return rank_metrics(distance_matrix(qf, qv, gf, gv), lq, lg, max_rank)


def parse_grid(text: str) -> list[float]:
    """``"0.6:1.0:0.1"`` (inclusive range) or ``"0,0.6,0.7"``."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range grid must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"bad range grid {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ValueError("empty grid")
    return values


def validate_grid(param: str, grid) -> None:
    if not grid:
        raise ValueError("grid must not be empty")
    if param == "lambda":
        if any(g < 0 for g in grid):
            raise ValueError("lambda grid values must be >= 0")
    elif param == "n_parts":
        if any(g < 2 or int(g) != g for g in grid):
            raise ValueError("N_p grid values must be integers >= 2")
    else:
        raise ValueError(f"unknown sweep parameter {param!r}")


def sweep_table(rows) -> str:
    """CSV text with header ``param,rank1,mAP``."""
    lines = ["param,rank1,mAP"]
    for value, res in rows:
        lines.append(f"{value:g},{res.rank1:.6f},{res.mAP:.6f}")
    return "\n".join(lines) + "\n"
