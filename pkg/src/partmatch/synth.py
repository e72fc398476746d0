"""Synthetic re-id data with known per-stripe visibility.

Each identity owns one prototype vector per horizontal body stripe. An image
renders those prototypes (with per-image gain and noise) into the stripe rows
of its feature map; an occluder replaces a contiguous span of stripes with an
obstacle prototype and suppresses the keypoint heatmaps over the same rows.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .pose_encoder import KEYPOINT_CHANNELS, POSE_CHANNELS
from .tensor_io import save_tensor, write_manifest

log = logging.getLogger(__name__)

N_LIMBS = (POSE_CHANNELS - KEYPOINT_CHANNELS) // 2
OCCLUDED_KEYPOINT_SCALE = 1e-3


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 100
    images_per_identity: int = 4
    n_test_identities: int = 100
    test_probes_per_identity: int = 2
    test_gallery_per_identity: int = 2
    channels: int = 32
    pose_channels: int = POSE_CHANNELS
    height: int = 12
    width: int = 4
    pose_upsample: int = 2
    n_parts: int = 6
    occlusion_prob: float = 0.5
    occluded_min: int = 1
    occluded_max: int = 3
    n_obstacles: int = 64
    feature_scale: float = 3.0
    noise: float = 0.05
    identity_spread: float = 0.15
    stripe_gain_min: float = 0.7
    stripe_gain_max: float = 1.3
    image_gain_jitter: float = 0.5
    obstacle_gain_min: float = 0.5
    obstacle_gain_max: float = 2.0
    seed: int = 0

    def __post_init__(self):
        counts = ("n_identities", "images_per_identity", "channels", "height", "width",
                  "pose_upsample", "n_parts", "n_obstacles", "occluded_min", "occluded_max")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.n_test_identities, self.test_probes_per_identity, self.test_gallery_per_identity) < 0:
            raise ValueError("test counts must be non-negative")
        if self.feature_scale <= 0 or self.noise < 0:
            raise ValueError("feature_scale must be positive and noise non-negative")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")
        if self.pose_channels != POSE_CHANNELS:
            raise ValueError(f"pose tensors have {POSE_CHANNELS} channels")
        if self.height < self.n_parts:
            raise ValueError(f"height {self.height} too small for {self.n_parts} stripes")
        if self.occluded_min > self.occluded_max or self.occluded_max >= self.n_parts:
            raise ValueError("need 1 <= occluded_min <= occluded_max < n_parts")

    @property
    def pose_hw(self) -> tuple[int, int]:
        return self.height * self.pose_upsample, self.width * self.pose_upsample

    def stripe_bounds(self) -> np.ndarray:
        return np.round(np.linspace(0, self.height, self.n_parts + 1)).astype(int)


@dataclass
class SynthRecord:
    image_id: str
    label: int
    role: str
    features: np.ndarray  # (C, H, W)
    pose: np.ndarray  # (56, H_in, W_in)
    vis_gt: np.ndarray  # (N_p,) int8


def _unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class World:
    """Identity prototypes, obstacle bank and pose layout shared by every image of one dataset."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        n_ids = cfg.n_identities + cfg.n_test_identities
        base = _unit(rng, cfg.n_parts, cfg.channels)
        own = _unit(rng, n_ids, cfg.n_parts, cfg.channels)
        proto = base[None] + cfg.identity_spread * own
        self.prototypes = proto / np.linalg.norm(proto, axis=-1, keepdims=True)
        self.stripe_gain = rng.uniform(cfg.stripe_gain_min, cfg.stripe_gain_max, size=cfg.n_parts)
        self.obstacles = _unit(rng, cfg.n_obstacles, cfg.channels) * rng.uniform(
            cfg.obstacle_gain_min, cfg.obstacle_gain_max, size=(cfg.n_obstacles, 1))
        self.keypoint_stripe = np.arange(KEYPOINT_CHANNELS) * cfg.n_parts // KEYPOINT_CHANNELS
        self.limb_stripe = np.arange(N_LIMBS) * cfg.n_parts // N_LIMBS
        self.limb_angle = rng.uniform(0, 2 * np.pi, size=N_LIMBS)

    def render(self, rng, identity: int, occluded: np.ndarray, obstacle: int | None):
        cfg = self.cfg
        h, w = cfg.height, cfg.width
        up = cfg.pose_upsample
        bounds = cfg.stripe_bounds()
        feats = np.empty((cfg.channels, h, w))
        gains = self.stripe_gain * (1.0 + cfg.image_gain_jitter * rng.uniform(-1, 1, size=cfg.n_parts))
        for s in range(cfg.n_parts):
            rows = slice(bounds[s], bounds[s + 1])
            if occluded[s]:
                vec = self.obstacles[obstacle]
            else:
                vec = gains[s] * self.prototypes[identity, s]
            feats[:, rows, :] = vec[:, None, None]
        feats += cfg.noise / np.sqrt(cfg.channels) * rng.normal(size=feats.shape)
        feats *= cfg.feature_scale

        hp, wp = cfg.pose_hw
        pose = np.zeros((POSE_CHANNELS, hp, wp))
        yy, xx = np.mgrid[0:hp, 0:wp]
        x_center = (wp - 1) / 2 + rng.uniform(-1, 1)
        for k in range(KEYPOINT_CHANNELS):
            s = self.keypoint_stripe[k]
            lo, hi = bounds[s] * up, bounds[s + 1] * up
            cy = rng.uniform(lo, hi - 1)
            cx = x_center + rng.uniform(-1.5, 1.5)
            pose[k] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.0 ** 2))
        for limb in range(N_LIMBS):
            s = self.limb_stripe[limb]
            lo, hi = bounds[s] * up, bounds[s + 1] * up
            angle = self.limb_angle[limb] + rng.normal(scale=0.2)
            band = (np.abs(xx - x_center) <= 1.5) & (yy >= lo) & (yy < hi)
            pose[KEYPOINT_CHANNELS + 2 * limb] = np.cos(angle) * band
            pose[KEYPOINT_CHANNELS + 2 * limb + 1] = np.sin(angle) * band
        for s in np.flatnonzero(occluded):
            pose[:KEYPOINT_CHANNELS, bounds[s] * up:bounds[s + 1] * up] *= OCCLUDED_KEYPOINT_SCALE
        pose += 0.01 * rng.normal(size=pose.shape)
        return feats, pose

    def occlusion_span(self, rng, avoid_full=True) -> np.ndarray:
        cfg = self.cfg
        count = int(rng.integers(cfg.occluded_min, cfg.occluded_max + 1))
        start = int(rng.integers(0, cfg.n_parts - count + 1))
        occ = np.zeros(cfg.n_parts, dtype=bool)
        occ[start:start + count] = True
        return occ


def generate_records(cfg: SynthConfig) -> list[SynthRecord]:
    rng = np.random.default_rng(cfg.seed)
    world = World(cfg, rng)
    records = []

    def make(image_id, identity, role, occlusion_prob):
        if rng.uniform() < occlusion_prob:
            occ = world.occlusion_span(rng)
            obstacle = int(rng.integers(cfg.n_obstacles))
        else:
            occ = np.zeros(cfg.n_parts, dtype=bool)
            obstacle = None
        feats, pose = world.render(rng, identity, occ, obstacle)
        records.append(SynthRecord(image_id, identity, role, feats.astype(np.float32),
                                   pose.astype(np.float32), (~occ).astype(np.int8)))

    for ident in range(cfg.n_identities):
        for k in range(cfg.images_per_identity):
            make(f"train_{ident:04d}_{k}", ident, "train", cfg.occlusion_prob)
    for t in range(cfg.n_test_identities):
        ident = cfg.n_identities + t
        for k in range(cfg.test_probes_per_identity):
            make(f"probe_{ident:04d}_{k}", ident, "probe", 1.0)
        for k in range(cfg.test_gallery_per_identity):
            make(f"gallery_{ident:04d}_{k}", ident, "gallery", 0.0)
    return records


def generate(cfg: SynthConfig, out_dir) -> Path:
    """Write PVT tensors plus ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "poses").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in generate_records(cfg):
        feat_rel = f"features/{rec.image_id}.pvt"
        pose_rel = f"poses/{rec.image_id}.pvt"
        save_tensor(rec.features, out / feat_rel)
        save_tensor(rec.pose, out / pose_rel)
        rows.append({"id": rec.image_id, "label": rec.label, "role": rec.role,
                     "feature": feat_rel, "pose": pose_rel, "vis_gt": [int(x) for x in rec.vis_gt]})
    path = out / "manifest.jsonl"
    write_manifest(path, rows)
    log.info("wrote %d records to %s", len(rows), path)
    return path


def augment_occlusion(record: SynthRecord, cfg: SynthConfig, seed) -> SynthRecord:
    """Occlude one more random stripe span with a fresh obstacle (feature-level random erasing).

    Returns a new record; the input is left untouched.
    """
    vis = np.asarray(record.vis_gt)
    if not vis.any():
        raise ValueError(f"{record.image_id}: every part is already occluded")
    rng = np.random.default_rng(seed)
    n = cfg.n_parts
    count = int(rng.integers(cfg.occluded_min, cfg.occluded_max + 1))
    # the span must cover at least one visible stripe
    starts = [s for s in range(n - count + 1) if vis[s:s + count].any()]
    start = starts[int(rng.integers(len(starts)))]
    obstacle = cfg.feature_scale * _unit(rng, cfg.channels) * rng.uniform(cfg.obstacle_gain_min, cfg.obstacle_gain_max)
    bounds = cfg.stripe_bounds()
    up = cfg.pose_upsample
    feats = np.array(record.features, dtype=np.float32)
    pose = np.array(record.pose, dtype=np.float32)
    for s in range(start, start + count):
        rows = slice(bounds[s], bounds[s + 1])
        noise = cfg.feature_scale * cfg.noise / np.sqrt(cfg.channels) * rng.normal(size=feats[:, rows].shape)
        feats[:, rows] = obstacle[:, None, None] + noise
        pose[:KEYPOINT_CHANNELS, bounds[s] * up:bounds[s + 1] * up] *= OCCLUDED_KEYPOINT_SCALE
    new_vis = vis.copy()
    new_vis[start:start + count] = 0
    return replace(record, features=feats, pose=pose, vis_gt=new_vis.astype(np.int8))


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


def batch_augmenter(cfg: SynthConfig):
    """``augment(feats, poses, rng, prob)`` for the training loop.

    Ground-truth visibility is not consulted during training, so every image
    is treated as fully visible when picking the span.
    """
    def augment(feats, poses, rng, prob):
        feats = np.array(feats)
        poses = np.array(poses)
        ones = np.ones(cfg.n_parts, dtype=np.int8)
        for i in range(feats.shape[0]):
            if rng.uniform() < prob:
                rec = SynthRecord("aug", -1, "train", feats[i], poses[i], ones)
                out = augment_occlusion(rec, cfg, int(rng.integers(2**63)))
                feats[i], poses[i] = out.features, out.pose
        return feats, poses

    return augment
