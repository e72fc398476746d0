"""Pose encoder: two 3x3 conv + ReLU stages over the 56-channel pose tensor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

POSE_CHANNELS = 56  # 18 keypoint heatmaps + 38 part affinity fields
KEYPOINT_CHANNELS = 18


@dataclass
class PoseEncoderParams:
    w1: np.ndarray  # (C_mid, 56, 3, 3)
    b1: np.ndarray
    w2: np.ndarray  # (C_e, C_mid, 3, 3)
    b2: np.ndarray
    stride: tuple[int, int] = (1, 1)  # first stage only

    @property
    def out_channels(self) -> int:
        return self.w2.shape[0]

    def n_params(self) -> int:
        return sum(a.size for a in (self.w1, self.b1, self.w2, self.b2))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def stride_for(in_hw, out_hw) -> tuple[int, int]:
    """First-stage stride mapping pose resolution onto the feature-map grid."""
    stride = []
    for n_in, n_out in zip(in_hw, out_hw):
        if n_in % n_out:
            raise ValueError(f"pose extent {n_in} is not a multiple of feature extent {n_out}")
        stride.append(n_in // n_out)
    return tuple(stride)


def init_pose_encoder(rng: np.random.Generator, stride, hidden: int = 32, out_channels: int = 128,
                      in_channels: int = POSE_CHANNELS) -> PoseEncoderParams:
    def uniform(shape):
        bound = 1.0 / np.sqrt(np.prod(shape[1:]))
        return rng.uniform(-bound, bound, size=shape)

    return PoseEncoderParams(
        w1=uniform((hidden, in_channels, 3, 3)), b1=np.zeros(hidden),
        w2=uniform((out_channels, hidden, 3, 3)), b2=np.zeros(out_channels),
        stride=tuple(stride),
    )


def conv_out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _im2col(x, stride):
    b, c, h, w = x.shape
    sh, sw = stride
    ho, wo = conv_out_size(h, sh), conv_out_size(w, sw)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)
    return cols, (ho, wo)


def conv3x3_forward(x, w, bias, stride=(1, 1)):
    b = x.shape[0]
    cols, (ho, wo) = _im2col(x, stride)
    out = cols @ w.reshape(w.shape[0], -1).T + bias
    return out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout, x_shape, cols, w, stride=(1, 1), need_dx=True):
    """Gradients of a padded 3x3 convolution. ``dout`` is (B, C_out, Ho, Wo)."""
    b, c, h, wd = x_shape
    sh, sw = stride
    _, cout, ho, wo = dout.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ w.reshape(cout, -1)).reshape(b, ho, wo, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + sh * (ho - 1) + 1:sh, kj:kj + sw * (wo - 1) + 1:sw] += \
                dcols[..., ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


@dataclass
class PoseEncoderCache:
    in_shape: tuple
    cols1: np.ndarray
    pre1: np.ndarray
    cols2: np.ndarray
    pre2: np.ndarray


def pe_forward(pose, params: PoseEncoderParams, out_hw=None, return_cache=False):
    """Embed pose tensors ``(B, 56, H_in, W_in)`` (or one unbatched tensor) into ``(B, C_e, H, W)``."""
    pose = np.asarray(pose, dtype=np.float64)
    single = pose.ndim == 3
    if single:
        pose = pose[None]
    if pose.ndim != 4 or pose.shape[1] != params.w1.shape[1]:
        raise ValueError(f"pose tensor must have {params.w1.shape[1]} channels, got shape {pose.shape}")
    sh, sw = params.stride
    ho, wo = conv_out_size(pose.shape[2], sh), conv_out_size(pose.shape[3], sw)
    if out_hw is not None and (ho, wo) != tuple(out_hw):
        raise ValueError(f"pose {pose.shape[2:]} with stride {params.stride} gives {(ho, wo)}, expected {tuple(out_hw)}")
    pre1, cols1 = conv3x3_forward(pose, params.w1, params.b1, params.stride)
    h1 = np.maximum(pre1, 0.0)
    pre2, cols2 = conv3x3_forward(h1, params.w2, params.b2)
    out = np.maximum(pre2, 0.0)
    if single:
        out = out[0]
    if return_cache:
        return out, PoseEncoderCache(pose.shape, cols1, pre1, cols2, pre2)
    return out


def pe_backward(upstream, params: PoseEncoderParams, cache: PoseEncoderCache) -> dict[str, np.ndarray]:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 3:
        upstream = upstream[None]
    if upstream.shape != cache.pre2.shape:
        raise ValueError(f"upstream {upstream.shape} does not match forward output {cache.pre2.shape}")
    d2 = upstream * (cache.pre2 > 0)
    dh1, dw2, db2 = conv3x3_backward(d2, cache.pre1.shape, cache.cols2, params.w2)
    d1 = dh1 * (cache.pre1 > 0)
    _, dw1, db1 = conv3x3_backward(d1, cache.in_shape, cache.cols1, params.w1, params.stride, need_dx=False)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
