"""Forward pass of the multi-channel output head.

For a decoder feature map ``X`` (``C x H x W``) at stage ``i``::

    A      = sigmoid(conv_attn(X))
    X_att  = A * X
    logits = conv_disp_i(X_att)
    L, disp = gather_output(logits, depth_scale)

Weights are supplied from outside (an ``.npz`` file with entries
``attn.<i>.kernel``, ``attn.<i>.bias``, ``disp.<i>.kernel``, ``disp.<i>.bias``);
there is no training here.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import MeiIntrinsics
from .errors import CorruptFile, EmptyInput, InconsistentScales, ShapeMismatch
from .fileutil import atomic_write_bytes


@dataclass(frozen=True, eq=False)
class ConvWeights:
    kernel: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)

    def __post_init__(self) -> None:
        kernel = np.asarray(self.kernel, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if kernel.ndim != 4:
            raise ShapeMismatch(f"kernel must be 4-D (out, in, kh, kw), got {kernel.shape}")
        if kernel.shape[2] % 2 == 0 or kernel.shape[3] % 2 == 0:
            raise ShapeMismatch(f"kernel spatial size must be odd, got {kernel.shape[2:]}")
        if bias.shape != (kernel.shape[0],):
            raise ShapeMismatch(f"bias {bias.shape} does not match {kernel.shape[0]} outputs")
        if not (np.isfinite(kernel).all() and np.isfinite(bias).all()):
            raise ShapeMismatch("weights must be finite")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def random(cls, rng: np.random.Generator, out_ch: int, in_ch: int, size: int = 3, scale: float = 0.5):
        kernel = rng.normal(0.0, scale / np.sqrt(in_ch * size * size), (out_ch, in_ch, size, size))
        return cls(kernel, rng.normal(0.0, 0.1, out_ch))


@dataclass(frozen=True)
class OutputScale:
    depth_scale: float = 1.0
    d_min: float = 0.01
    d_max: float = 10.0

    def __post_init__(self) -> None:
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if not self.depth_scale > 0:
            raise ValueError(f"depth_scale must be > 0, got {self.depth_scale}")


def depth_scale_from_intrinsics(cam: MeiIntrinsics, reference_focal: float) -> float:
    """Ratio of the camera's mean generalized focal length to a reference focal."""
    if not reference_focal > 0:
        raise ValueError("reference_focal must be > 0")
    return 0.5 * (cam.gamma1 + cam.gamma2) / reference_focal


_TINY = np.finfo(np.float64).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def conv2d_same(features: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Stride-1 cross-correlation with zero 'same' padding."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ShapeMismatch(f"feature map must be (C, H, W), got {features.shape}")
    out_ch, in_ch, kh, kw = weights.kernel.shape
    if in_ch != features.shape[0]:
        raise ShapeMismatch(f"kernel expects {in_ch} input channels, features have {features.shape[0]}")
    _, height, width = features.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(features, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((out_ch, height, width))
    for dy in range(kh):
        for dx in range(kw):
            window = padded[:, dy : dy + height, dx : dx + width]
            out += np.einsum("oc,chw->ohw", weights.kernel[:, :, dy, dx], window)
    return out + weights.bias[:, None, None]


def channel_attention(features: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Attention weights in (0, 1), one per feature element.

    The sigmoid rounds to exactly 0 or 1 for large logits in float64; the
    result is pulled back by at most one ulp so the interval stays open.
    """
    if weights.kernel.shape[0] != np.shape(features)[0]:
        raise ShapeMismatch("attention conv must keep the channel count")
    return np.clip(sigmoid(conv2d_same(features, weights)), _TINY, _BELOW_ONE)


def apply_attention(features: np.ndarray, attention: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    attention = np.asarray(attention, dtype=np.float64)
    if features.shape != attention.shape:
        raise ShapeMismatch(f"features {features.shape} vs attention {attention.shape}")
    return attention * features


def disp_logits(features: np.ndarray, weights: ConvWeights) -> np.ndarray:
    if weights.kernel.shape[0] != 1:
        raise ShapeMismatch("disparity conv must produce a single channel")
    return conv2d_same(features, weights)


def gather_output(logits: np.ndarray, scale: OutputScale) -> tuple[np.ndarray, np.ndarray]:
    """Map logits to ``(distance, disparity)``.

    ``disp = d_min + (d_max - d_min) * sigmoid(logits)`` and
    ``L = depth_scale / disp``, so ``L`` lies in
    ``[depth_scale / d_max, depth_scale / d_min]`` and decreases with the logit.
    A leading singleton channel axis is dropped.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 3:
        if logits.shape[0] != 1:
            raise ShapeMismatch(f"expected single-channel logits, got {logits.shape}")
        logits = logits[0]
    disp = scale.d_min + (scale.d_max - scale.d_min) * sigmoid(logits)
    return scale.depth_scale / disp, disp


def distance_logit_derivative(logits, scale: OutputScale) -> np.ndarray:
    """Analytic ``dL/dlogit = -depth_scale (d_max - d_min) s (1 - s) / disp^2``."""
    s = sigmoid(logits)
    disp = scale.d_min + (scale.d_max - scale.d_min) * s
    return -scale.depth_scale * (scale.d_max - scale.d_min) * s * (1.0 - s) / (disp * disp)


def head_forward(
    features: np.ndarray, attn: ConvWeights, disp: ConvWeights, scale: OutputScale
) -> tuple[np.ndarray, np.ndarray]:
    """One decoder stage: features -> (distance, disparity)."""
    attention = channel_attention(features, attn)
    logits = disp_logits(apply_attention(features, attention), disp)
    return gather_output(logits, scale)


def fuse_multi_scale(outputs: Sequence[tuple[int, np.ndarray]], mode: str = "inference"):
    """Combine per-stage distance maps.

    Scale index ``i`` denotes a ``2**i`` subsampling of the finest map. In
    ``"inference"`` mode the finest available map is returned; ``"training"``
    returns all ``(index, map)`` pairs sorted fine to coarse for per-scale
    losses.
    """
    if not outputs:
        raise EmptyInput("no multi-scale outputs given")
    ordered = sorted(((int(i), np.asarray(m)) for i, m in outputs), key=lambda item: item[0])
    indices = [i for i, _ in ordered]
    if len(set(indices)) != len(indices) or indices[0] < 0:
        raise InconsistentScales(f"scale indices must be distinct and >= 0, got {indices}")
    base_index, base = ordered[0]
    for index, level in ordered[1:]:
        factor = 2 ** (index - base_index)
        expected = tuple(-(-n // factor) for n in base.shape)
        if level.shape != expected:
            raise InconsistentScales(
                f"scale {index} has shape {level.shape}, expected {expected} "
                f"(a {factor}x subsampling of scale {base_index})"
            )
    if mode == "inference":
        return base
    if mode == "training":
        return ordered
    raise ValueError(f"unknown fusion mode {mode!r}")


def run_head(
    features: Sequence[np.ndarray],
    weights: dict[str, np.ndarray],
    scale: OutputScale,
) -> list[tuple[int, np.ndarray]]:
    """Run every stage ``i`` whose weights are present; returns ``(i, distance)``."""
    outputs = []
    for i, feats in enumerate(features):
        attn = ConvWeights(weights[f"attn.{i}.kernel"], weights[f"attn.{i}.bias"])
        disp = ConvWeights(weights[f"disp.{i}.kernel"], weights[f"disp.{i}.bias"])
        distance, _ = head_forward(feats, attn, disp, scale)
        outputs.append((i, distance))
    return outputs


def random_weights(seed: int, channels: Sequence[int], size: int = 3) -> dict[str, np.ndarray]:
    """Deterministic seeded weights for each stage's channel count."""
    rng = np.random.default_rng(seed)
    weights = {}
    for i, c in enumerate(channels):
        attn = ConvWeights.random(rng, c, c, size)
        disp = ConvWeights.random(rng, 1, c, size)
        weights[f"attn.{i}.kernel"], weights[f"attn.{i}.bias"] = attn.kernel, attn.bias
        weights[f"disp.{i}.kernel"], weights[f"disp.{i}.bias"] = disp.kernel, disp.bias
    return weights


def save_weights(path: str | Path, weights: dict[str, np.ndarray]) -> None:
    buffer = io.BytesIO()
    np.savez(buffer, **{k: np.asarray(v, dtype="<f8") for k, v in sorted(weights.items())})
    atomic_write_bytes(path, buffer.getvalue())


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: np.array(data[k], dtype=np.float64) for k in data.files}
    except (ValueError, OSError) as exc:
        raise CorruptFile(f"cannot read weight file {path}: {exc}") from exc
