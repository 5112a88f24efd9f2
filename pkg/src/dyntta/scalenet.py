"""The scale network: a two-layer MLP that turns a prompt representation and
the (step, schedule-length) pair into strictly positive per-block learning-rate
multipliers.

Input features are [h ; k/k_max ; K/k_max] where h is the mean-pooled prompt
representation (length 2*d_model). The raw output is hard-clamped to
[-clamp, clamp] and pushed through a positive map that is exponential on the
negative side and quadratic on the positive side; the map is strictly
positive, strictly increasing, and C1 at zero, and the clamp keeps every
multiplier inside [positive_map(-clamp), positive_map(clamp)] (about
[3.4e-4, 41] at the default clamp of 8).

The layer-wise head outputs 2L values (one per adapted q/v block,
shallow-to-deep); the step-wise variant is a separately trained net with a
single output broadcast across blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .tensor import Tensor, clip, concat, matmul, softplus, tsum


def positive_map(a: float) -> float:
    """exp(a) for a <= 0, else 1 + a + a^2/2; positive, increasing, C1 at 0."""
    a = float(a)
    if a <= 0.0:
        return math.exp(a)
    return 1.0 + a + 0.5 * a * a


def positive_map_tensor(x: Tensor) -> Tensor:
    """Elementwise tape node for the positive map (derivative: exp(a) / 1+a)."""
    xd = x.data
    neg = xd <= 0.0
    # minimum() keeps the exp branch from overflowing where the quadratic wins
    safe = np.minimum(xd, 0.0)
    out = np.where(neg, np.exp(safe), 1.0 + xd + 0.5 * xd * xd)

    def vjp(g):
        return g * np.where(neg, np.exp(safe), 1.0 + xd)

    return Tensor._op(out, (x,), (vjp,), "positive_map")


@dataclass
class ScaleNetParams:
    w1: np.ndarray  # (hidden, feature)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)
    feature_dim: int
    hidden_dim: int
    out_dim: int
    k_max: int

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())


def init_scalenet(
    feature_dim: int,
    out_dim: int,
    hidden_dim: int = 128,
    k_max: int = 5,
    seed: int = 0,
    dtype=np.float32,
) -> ScaleNetParams:
    """Zero-output init: raw == 0, so every scale starts at exactly 1."""
    rng = np.random.default_rng(seed)
    w1 = (rng.standard_normal((hidden_dim, feature_dim)) / math.sqrt(feature_dim)).astype(dtype)
    return ScaleNetParams(
        w1=w1,
        b1=np.zeros(hidden_dim, dtype=dtype),
        w2=np.zeros((out_dim, hidden_dim), dtype=dtype),
        b2=np.zeros(out_dim, dtype=dtype),
        feature_dim=feature_dim,
        hidden_dim=hidden_dim,
        out_dim=out_dim,
        k_max=k_max,
    )


@dataclass
class ScaleTensor:
    """One step's multipliers: raw pre-clamp outputs plus the mapped scales."""

    raw: np.ndarray
    scales: np.ndarray
    k: int
    big_k: int


def _features(psi: ScaleNetParams, h: np.ndarray, k: int, big_k: int) -> np.ndarray:
    h = np.asarray(h)
    if h.shape != (psi.feature_dim - 2,):
        raise ValueError(f"feature length {h.shape} does not match net input {psi.feature_dim - 2}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite prompt representation")
    if not (1 <= k <= big_k <= psi.k_max):
        raise ValueError(f"need 1 <= k <= K <= k_max, got k={k}, K={big_k}, k_max={psi.k_max}")
    return np.concatenate([h, [k / psi.k_max, big_k / psi.k_max]]).astype(psi.w1.dtype)


def _net(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, feats: np.ndarray, clamp: float):
    hidden = softplus(matmul(w1, Tensor(feats)) + b1)
    raw = matmul(w2, hidden) + b2
    scales = positive_map_tensor(clip(raw, -clamp, clamp))
    return raw, scales


def scalenet_forward(psi: ScaleNetParams, h: np.ndarray, k: int, big_k: int, clamp: float = 8.0) -> ScaleTensor:
    feats = _features(psi, h, k, big_k)
    raw, scales = _net(Tensor(psi.w1), Tensor(psi.b1), Tensor(psi.w2), Tensor(psi.b2), feats, clamp)
    return ScaleTensor(raw=raw.data.copy(), scales=scales.data.copy(), k=int(k), big_k=int(big_k))


def scalenet_backward(
    psi: ScaleNetParams,
    h: np.ndarray,
    k: int,
    big_k: int,
    upstream: np.ndarray,
    clamp: float = 8.0,
) -> dict[str, np.ndarray]:
    """Gradient of sum(upstream * scales) w.r.t. every net parameter.

    Re-runs the same computation as the matching forward on the tape; the
    clamp contributes exactly zero gradient wherever the raw output saturates.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != (psi.out_dim,):
        raise ValueError(f"upstream shape {upstream.shape} does not match out_dim {psi.out_dim}")
    feats = _features(psi, h, k, big_k)
    leaves = {name: Tensor(arr, requires_grad=True) for name, arr in psi.named_arrays()}
    _, scales = _net(leaves["w1"], leaves["b1"], leaves["w2"], leaves["b2"], feats, clamp)
    tsum(scales * Tensor(upstream.astype(scales.dtype))).backward()
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }


# -- checkpoint glue -----------------------------------------------------------------


def save_scalenet(prefix, psi: ScaleNetParams, config_hash: str = "") -> None:
    meta = {
        "feature_dim": psi.feature_dim,
        "hidden_dim": psi.hidden_dim,
        "out_dim": psi.out_dim,
        "k_max": psi.k_max,
    }
    checkpoint.save_arrays(prefix, "scalenet", psi.named_arrays(), meta=meta, config_hash=config_hash)


def load_scalenet(json_path) -> ScaleNetParams:
    kind, arrays, meta = checkpoint.load_arrays(json_path)
    if kind != "scalenet":
        raise ValueError(f"not a scalenet checkpoint: kind={kind!r}")
    psi = ScaleNetParams(
        w1=arrays["w1"],
        b1=arrays["b1"],
        w2=arrays["w2"],
        b2=arrays["b2"],
        feature_dim=int(meta["feature_dim"]),
        hidden_dim=int(meta["hidden_dim"]),
        out_dim=int(meta["out_dim"]),
        k_max=int(meta["k_max"]),
    )
    if psi.w1.shape != (psi.hidden_dim, psi.feature_dim) or psi.w2.shape != (psi.out_dim, psi.hidden_dim):
        raise ValueError("scalenet checkpoint shapes do not match its recorded widths")
    return psi
