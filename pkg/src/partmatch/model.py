"""Parameter groups of the matcher and their checkpoint (de)serialisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention, pose_encoder, visibility
from .graph_match import MovingAverageState
from .losses import ToyClassifierBank
from .tensor_io import load_checkpoint, load_tensor, save_checkpoint


@dataclass
class Model:
    pe: pose_encoder.PoseEncoderParams
    pga: attention.PgaParams
    pvp: visibility.PvpParams
    state: MovingAverageState
    meta: dict = field(default_factory=dict)

    @property
    def n_parts(self) -> int:
        return self.pga.n_parts

    def copy(self) -> "Model":
        return load_model_arrays(self.arrays(), dict(self.meta), copy=True)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"pe.{k}": v for k, v in self.pe.arrays().items()}
        out.update({f"pga.{k}": v for k, v in self.pga.arrays().items()})
        out.update({f"pvp.{k}": v for k, v in self.pvp.arrays().items()})
        if self.state.initialized:
            out["ma.edge_mean"] = self.state.edge_mean
            out["ma.diag_mean"] = self.state.diag_mean
        return out

    def full_meta(self) -> dict:
        return {**self.meta, "stride": list(self.pe.stride), "bn_momentum": self.pvp.momentum,
                "bn_eps": self.pvp.eps, "ma_momentum": self.state.momentum, "ma_count": self.state.count}


def init_model(rng: np.random.Generator, n_parts: int, pose_hw, feature_hw, hidden: int = 32,
               pose_features: int = 128, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
               ma_momentum: float = 0.9) -> Model:
    stride = pose_encoder.stride_for(pose_hw, feature_hw)
    pe = pose_encoder.init_pose_encoder(rng, stride, hidden=hidden, out_channels=pose_features)
    pga = attention.init_pga(rng, n_parts, pose_features)
    pvp = visibility.init_pvp(rng, n_parts, pose_features, bn_momentum, bn_eps)
    return Model(pe, pga, pvp, MovingAverageState(n_parts, ma_momentum))


def load_model_arrays(arrays: dict, meta: dict, copy: bool = False) -> Model:
    def get(name):
        a = np.asarray(arrays[name], dtype=np.float64)
        return a.copy() if copy else a

    pe = pose_encoder.PoseEncoderParams(get("pe.w1"), get("pe.b1"), get("pe.w2"), get("pe.b2"),
                                        tuple(meta["stride"]))
    pga = attention.PgaParams(get("pga.weight"), get("pga.bias"))
    pvp = visibility.PvpParams(get("pvp.weight"), get("pvp.bias"), get("pvp.gamma"), get("pvp.beta"),
                               get("pvp.running_mean"), get("pvp.running_var"),
                               meta["bn_momentum"], meta["bn_eps"])
    state = MovingAverageState(pga.n_parts, meta["ma_momentum"])
    if "ma.edge_mean" in arrays:
        state.edge_mean, state.diag_mean = get("ma.edge_mean"), get("ma.diag_mean")
        state.count = int(meta["ma_count"])
    return Model(pe, pga, pvp, state, {k: v for k, v in meta.items()
                                       if k not in ("stride", "bn_momentum", "bn_eps", "ma_momentum", "ma_count")})


def save_model(model: Model, path) -> None:
    save_checkpoint(path, model.arrays(), {"kind": "model", **model.full_meta()})


def load_model(path) -> Model:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    meta = {k: v for k, v in meta.items() if k != "kind"}
    return load_model_arrays(tensors, meta)


def save_bank(bank: ToyClassifierBank, path, meta: dict | None = None) -> None:
    save_checkpoint(path, {"weight": bank.weight, "bias": bank.bias},
                    {"kind": "classifier_bank", "frozen": bank.frozen, **(meta or {})})


def load_bank(path) -> ToyClassifierBank:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier_bank":
        raise ValueError(f"{path} is not a classifier bank")
    bank = ToyClassifierBank(tensors["weight"].astype(np.float64), tensors["bias"].astype(np.float64))
    if meta.get("frozen"):
        bank.freeze()
    return bank


def load_images(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack feature maps and pose tensors of ``records`` as float64 arrays."""
    feats = np.stack([load_tensor(r.feature) for r in records]).astype(np.float64)
    poses = np.stack([load_tensor(r.pose) for r in records]).astype(np.float64)
    return feats, poses
