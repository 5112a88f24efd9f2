"""Low-rank adapters on the attention q/v projections.

Each adapted weight is W + (alpha/rank) * B @ A with A drawn from a small
Gaussian and B starting at zero, so a fresh adapter is an exact identity.
Blocks are ordered shallow-to-deep, q before v inside a layer:
index = 2*layer + (0 for q, 1 for v). Scale vectors, heatmaps and traces all
use this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .lm import LmTensors, ModelConfig, forward, masked_nll, prompt_mask
from .tensor import Tensor, matmul, transpose

PROJECTIONS = ("q", "v")


def block_index(layer: int, proj: str) -> int:
    return 2 * layer + PROJECTIONS.index(proj)


def block_labels(n_layers: int) -> list[str]:
    return [f"L{layer}.{proj}" for layer in range(n_layers) for proj in PROJECTIONS]


@dataclass
class LoraBlock:
    layer: int
    proj: str
    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)


@dataclass
class LoraState:
    rank: int
    alpha: float
    blocks: list[LoraBlock]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def tensors(self, requires_grad: bool = False) -> "LoraTensors":
        return LoraTensors(self, requires_grad)

    def block_norms(self) -> list[tuple[float, float]]:
        return [(float(np.linalg.norm(bl.a)), float(np.linalg.norm(bl.b))) for bl in self.blocks]


def init_lora(
    cfg: ModelConfig,
    rank: int = 4,
    alpha: float = 16.0,
    sigma: float = 1e-2,
    seed: int = 0,
    dtype=np.float32,
) -> LoraState:
    """Fresh adapter: B = 0, A ~ sigma * N(0, I); exact identity at init."""
    rng = np.random.default_rng(seed)
    blocks = []
    for layer in range(cfg.n_layers):
        for proj in PROJECTIONS:
            a = (sigma * rng.standard_normal((rank, cfg.d_model))).astype(dtype)
            b = np.zeros((cfg.d_model, rank), dtype=dtype)
            blocks.append(LoraBlock(layer=layer, proj=proj, a=a, b=b))
    return LoraState(rank=rank, alpha=float(alpha), blocks=blocks)


def effective_delta(state: LoraState, index: int) -> np.ndarray:
    """The dense weight offset contributed by one block: (alpha/rank) * B @ A."""
    bl = state.blocks[index]
    return (state.alpha / state.rank) * (bl.b @ bl.a)


class LoraTensors:
    """Tape-side view of a LoraState, pluggable into the LM forward."""

    def __init__(self, state: LoraState, requires_grad: bool):
        self.state = state
        self.scale = state.alpha / state.rank
        self.pairs = [
            (Tensor(bl.a, requires_grad), Tensor(bl.b, requires_grad)) for bl in state.blocks
        ]

    def apply(self, layer: int, proj: str, w: Tensor) -> Tensor:
        if proj not in PROJECTIONS:
            return w
        a, b = self.pairs[block_index(layer, proj)]
        return w + matmul(b, a) * self.scale

    def grads(self) -> "GradBlocks":
        out = []
        for a, b in self.pairs:
            da = a.grad if a.grad is not None else np.zeros_like(a.data)
            db = b.grad if b.grad is not None else np.zeros_like(b.data)
            out.append((np.asarray(da), np.asarray(db)))
        return GradBlocks(blocks=out)


@dataclass
class GradBlocks:
    """Per-block (dA, dB) numpy pairs, detached from any tape."""

    blocks: list[tuple[np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return len(self.blocks)

    def dot(self, other: "GradBlocks") -> np.ndarray:
        """Joint per-block inner products over A and B entries; length 2L."""
        if len(self.blocks) != len(other.blocks):
            raise ValueError("block count mismatch")
        out = np.zeros(len(self.blocks))
        for i, ((da, db), (oa, ob)) in enumerate(zip(self.blocks, other.blocks)):
            out[i] = float(np.vdot(da, oa)) + float(np.vdot(db, ob))
        return out

    def global_norm(self) -> float:
        total = 0.0
        for da, db in self.blocks:
            total += float(np.vdot(da, da)) + float(np.vdot(db, db))
        return float(np.sqrt(total))

    def finite(self) -> bool:
        return all(np.all(np.isfinite(da)) and np.all(np.isfinite(db)) for da, db in self.blocks)


def prompt_grad(mt: LmTensors, state: LoraState, prompt_tokens: np.ndarray) -> GradBlocks:
    """Gradient of the prompt's mean next-token NLL w.r.t. every adapter block."""
    lt = state.tensors(requires_grad=True)
    logits, _ = forward(mt, lt, prompt_tokens)
    loss = masked_nll(logits, prompt_tokens, prompt_mask(prompt_tokens.size))
    loss.backward()
    return lt.grads()


def scaled_step(state: LoraState, grads: GradBlocks, eta: float, scales: np.ndarray) -> LoraState:
    """One descent step with a per-block rate multiplier; returns a new state."""
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (len(state.blocks),):
        raise ValueError(f"expected {len(state.blocks)} scales, got shape {scales.shape}")
    if len(grads) != len(state.blocks):
        raise ValueError("gradient/block count mismatch")
    blocks = []
    for bl, s, (da, db) in zip(state.blocks, scales, grads.blocks):
        step = eta * float(s)
        blocks.append(
            LoraBlock(
                layer=bl.layer,
                proj=bl.proj,
                a=(bl.a - step * da).astype(bl.a.dtype, copy=False),
                b=(bl.b - step * db).astype(bl.b.dtype, copy=False),
            )
        )
    return LoraState(rank=state.rank, alpha=state.alpha, blocks=blocks)


# -- checkpoint glue ----------------------------------------------------------------


def save_lora(prefix, state: LoraState, config_hash: str = "") -> None:
    arrays = []
    for i, bl in enumerate(state.blocks):
        arrays.append((f"blocks.{i}.a", bl.a))
        arrays.append((f"blocks.{i}.b", bl.b))
    meta = {
        "rank": state.rank,
        "alpha": state.alpha,
        "layout": [[bl.layer, bl.proj] for bl in state.blocks],
    }
    checkpoint.save_arrays(prefix, "lora", arrays, meta=meta, config_hash=config_hash)


def load_lora(json_path) -> LoraState:
    kind, arrays, meta = checkpoint.load_arrays(json_path)
    if kind != "lora":
        raise ValueError(f"not a lora checkpoint: kind={kind!r}")
    blocks = []
    for i, (layer, proj) in enumerate(meta["layout"]):
        blocks.append(LoraBlock(layer=int(layer), proj=proj, a=arrays[f"blocks.{i}.a"], b=arrays[f"blocks.{i}.b"]))
    return LoraState(rank=int(meta["rank"]), alpha=float(meta["alpha"]), blocks=blocks)
