"""A small decoder-only language model on the local tape.

Pre-norm residual blocks with RMS normalization, learned absolute position
embeddings, causal multi-head attention, and a softplus MLP. Multi-head
splitting is expressed with constant 0/1 column-selector matrices so the
whole forward stays inside the tape's primitive set.

The forward pass also captures the embedding-layer hidden states and the
hidden states after the final normalization; their mean-pooled concatenation
is the per-prompt feature vector consumed by the scale network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .optim import AdamW
from .tensor import (
    Tensor,
    concat,
    cross_entropy_rows,
    gather_rows,
    matmul,
    rms_norm,
    softmax,
    softplus,
    transpose,
    tsum,
)

ATTENTION_MASK_FILL = -1e9  # exp(-1e9 - max) underflows to exactly 0.0


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "norm_eps": self.norm_eps,
        }


# weight convention: (d_out, d_in), applied as x @ W^T
_LAYER_FIELDS = ("attn_gain", "wq", "wk", "wv", "wo", "mlp_gain", "w1", "w2")


@dataclass
class LmParams:
    cfg: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[dict[str, np.ndarray]]
    final_gain: np.ndarray
    head: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for f in _LAYER_FIELDS:
                out.append((f"layers.{i}.{f}", layer[f]))
        out.append(("final_gain", self.final_gain))
        out.append(("head", self.head))
        return out

    def tensors(self, requires_grad: bool = False) -> "LmTensors":
        return LmTensors(
            cfg=self.cfg,
            tok_emb=Tensor(self.tok_emb, requires_grad),
            pos_emb=Tensor(self.pos_emb, requires_grad),
            layers=[{f: Tensor(layer[f], requires_grad) for f in _LAYER_FIELDS} for layer in self.layers],
            final_gain=Tensor(self.final_gain, requires_grad),
            head=Tensor(self.head, requires_grad),
        )


@dataclass
class LmTensors:
    cfg: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[dict[str, Tensor]]
    final_gain: Tensor
    head: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for f in _LAYER_FIELDS:
                out.append((f"layers.{i}.{f}", layer[f]))
        out.append(("final_gain", self.final_gain))
        out.append(("head", self.head))
        return out


def init_lm(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> LmParams:
    rng = np.random.default_rng(seed)
    std = 0.02
    resid_std = std / math.sqrt(2.0 * cfg.n_layers)

    def nrm(shape, s=std):
        return rng.normal(0.0, s, size=shape).astype(dtype)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            {
                "attn_gain": np.ones(cfg.d_model, dtype=dtype),
                "wq": nrm((cfg.d_model, cfg.d_model)),
                "wk": nrm((cfg.d_model, cfg.d_model)),
                "wv": nrm((cfg.d_model, cfg.d_model)),
                "wo": nrm((cfg.d_model, cfg.d_model), resid_std),
                "mlp_gain": np.ones(cfg.d_model, dtype=dtype),
                "w1": nrm((cfg.d_ff, cfg.d_model)),
                "w2": nrm((cfg.d_model, cfg.d_ff), resid_std),
            }
        )
    return LmParams(
        cfg=cfg,
        tok_emb=nrm((cfg.vocab_size, cfg.d_model)),
        pos_emb=nrm((cfg.max_seq_len, cfg.d_model)),
        layers=layers,
        final_gain=np.ones(cfg.d_model, dtype=dtype),
        head=nrm((cfg.vocab_size, cfg.d_model)),
    )


# -- constant caches (head selectors, causal masks) -------------------------------

_selectors: dict = {}
_masks: dict = {}


def _head_selectors(d_model: int, n_heads: int, dtype) -> list[Tensor]:
    key = (d_model, n_heads, np.dtype(dtype).name)
    if key not in _selectors:
        d_head = d_model // n_heads
        sels = []
        for h in range(n_heads):
            s = np.zeros((d_model, d_head), dtype=dtype)
            s[h * d_head : (h + 1) * d_head] = np.eye(d_head, dtype=dtype)
            sels.append(Tensor(s))
        _selectors[key] = sels
    return _selectors[key]


def _causal_mask(t: int, dtype) -> Tensor:
    key = (t, np.dtype(dtype).name)
    if key not in _masks:
        m = np.triu(np.full((t, t), ATTENTION_MASK_FILL, dtype=dtype), k=1)
        _masks[key] = Tensor(m)
    return _masks[key]


# -- forward -----------------------------------------------------------------------


@dataclass
class HiddenCapture:
    """Hidden-state sequences kept from a forward pass: the embedding-layer
    output and the post-final-normalization output, both (T, d)."""

    h0: Tensor
    hl: Tensor


def forward(
    mt: LmTensors,
    lora,  # LoraTensors or None
    tokens: np.ndarray,
) -> tuple[Tensor, HiddenCapture]:
    """Full-sequence logits (T, V) plus captured hidden states."""
    cfg = mt.cfg
    tokens = np.asarray(tokens)
    t = tokens.size
    if t < 1:
        raise ValueError("empty token sequence")
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    dtype = mt.tok_emb.dtype
    x = gather_rows(mt.tok_emb, tokens) + gather_rows(mt.pos_emb, np.arange(t))
    h0 = x
    sels = _head_selectors(cfg.d_model, cfg.n_heads, dtype)
    mask = _causal_mask(t, dtype)
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    for li, layer in enumerate(mt.layers):
        a = rms_norm(x, cfg.norm_eps) * layer["attn_gain"]
        wq = layer["wq"] if lora is None else lora.apply(li, "q", layer["wq"])
        wv = layer["wv"] if lora is None else lora.apply(li, "v", layer["wv"])
        q = a @ transpose(wq)
        k = a @ transpose(layer["wk"])
        v = a @ transpose(wv)
        outs = []
        for sel in sels:
            qh = q @ sel
            kh = k @ sel
            vh = v @ sel
            att = softmax((qh @ transpose(kh)) * scale + mask)
            outs.append(att @ vh)
        x = x + concat(outs, axis=1) @ transpose(layer["wo"])
        m = rms_norm(x, cfg.norm_eps) * layer["mlp_gain"]
        x = x + softplus(m @ transpose(layer["w1"])) @ transpose(layer["w2"])
    hl = rms_norm(x, cfg.norm_eps) * mt.final_gain
    logits = hl @ transpose(mt.head)
    return logits, HiddenCapture(h0=h0, hl=hl)


def prompt_representation(capture: HiddenCapture) -> np.ndarray:
    """Mean-pooled [embedding-layer; final-norm] states, length 2*d_model."""
    return np.concatenate([capture.h0.data.mean(axis=0), capture.hl.data.mean(axis=0)])


# -- losses ------------------------------------------------------------------------


def prompt_mask(t: int) -> np.ndarray:
    """Select every next-token prediction inside a length-t prompt."""
    m = np.ones(t, dtype=bool)
    m[0] = False
    return m


def answer_mask(prompt_len: int, answer_len: int) -> np.ndarray:
    """Select exactly the answer-token predictions of a prompt+answer sequence."""
    m = np.zeros(prompt_len + answer_len, dtype=bool)
    m[prompt_len:] = True
    return m


def masked_nll(logits: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean NLL over the next-token predictions selected by ``mask``.

    ``mask[t]`` selects the prediction of token t (scored from the logits at
    t-1); ``mask[0]`` must be False. The unused final logits row is scored
    against a dummy target with exactly zero weight, which contributes exact
    zeros to both the value and the gradient.
    """
    tokens = np.asarray(tokens)
    mask = np.asarray(mask)
    t = tokens.size
    if mask.shape != (t,) or mask.dtype != np.bool_:
        raise ValueError("mask must be a boolean array aligned with tokens")
    if mask[0]:
        raise ValueError("mask[0] selects a prediction with no preceding context")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask selects no positions")
    targets = np.concatenate([tokens[1:], [0]]).astype(np.int64)
    weights = np.concatenate([mask[1:], [False]]).astype(logits.dtype)
    ce = cross_entropy_rows(logits, targets)
    return tsum(ce * Tensor(weights)) * (1.0 / count)


def answer_nll(mt: LmTensors, lora, prompt_tokens: np.ndarray, answer_tokens: np.ndarray) -> Tensor:
    """Teacher-forced mean NLL per answer token, conditioned on the prompt."""
    tokens = np.concatenate([prompt_tokens, answer_tokens])
    logits, _ = forward(mt, lora, tokens)
    return masked_nll(logits, tokens, answer_mask(prompt_tokens.size, answer_tokens.size))


def greedy_decode(mt: LmTensors, lora, prompt_tokens: np.ndarray, max_new: int = 32, stop_id: int | None = None) -> np.ndarray:
    """Greedy continuation; stops at ``stop_id`` or after ``max_new`` tokens."""
    toks = list(int(x) for x in prompt_tokens)
    out = []
    for _ in range(max_new):
        if len(toks) >= mt.cfg.max_seq_len:
            break
        logits, _ = forward(mt, lora, np.array(toks, dtype=np.int64))
        nxt = int(np.argmax(logits.data[-1]))
        if stop_id is not None and nxt == stop_id:
            break
        out.append(nxt)
        toks.append(nxt)
    return np.array(out, dtype=np.int64)


# -- pretraining ----------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 2000
    accum: int = 4
    lr: float = 1e-3
    warmup: int = 100
    min_lr_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    log_every: int = 100
    heldout_chunks: int = 16


def _lr_at(step: int, pcfg: PretrainConfig) -> float:
    if step < pcfg.warmup:
        return pcfg.lr * (step + 1) / pcfg.warmup
    if pcfg.steps <= pcfg.warmup:
        return pcfg.lr
    frac = (step - pcfg.warmup) / max(1, pcfg.steps - pcfg.warmup)
    lo = pcfg.lr * pcfg.min_lr_frac
    return lo + 0.5 * (pcfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def stream_nll(params: LmParams, chunks) -> float:
    """Mean full-sequence next-token NLL over token chunks (no gradients)."""
    mt = params.tensors(requires_grad=False)
    vals = []
    for chunk in chunks:
        logits, _ = forward(mt, None, chunk)
        vals.append(float(masked_nll(logits, chunk, prompt_mask(chunk.size)).data))
    return float(np.mean(vals))


def pretrain_lm(
    chunks: list[np.ndarray],
    cfg: ModelConfig,
    pcfg: PretrainConfig,
    seed: int = 0,
    heldout: list[np.ndarray] | None = None,
    dtype=np.float32,
) -> tuple[LmParams, list[dict]]:
    """Next-token pretraining over packed token chunks; returns params + log rows."""
    if not chunks:
        raise ValueError("no pretraining chunks")
    params = init_lm(cfg, seed=seed, dtype=dtype)
    flat = dict(params.named_arrays())
    opt = AdamW(lr=pcfg.lr, betas=pcfg.betas, eps=pcfg.eps, weight_decay=pcfg.weight_decay)
    rows: list[dict] = []
    order = np.random.default_rng(seed + 1).permutation(len(chunks))
    cursor = 0
    for step in range(pcfg.steps):
        grads = {name: np.zeros_like(arr) for name, arr in flat.items()}
        loss_acc = 0.0
        for _ in range(pcfg.accum):
            chunk = chunks[int(order[cursor % len(order)])]
            cursor += 1
            mt = params.tensors(requires_grad=True)
            logits, _ = forward(mt, None, chunk)
            loss = masked_nll(logits, chunk, prompt_mask(chunk.size))
            loss.backward()
            loss_acc += float(loss.data)
            for name, tensor in mt.named():
                if tensor.grad is not None:
                    grads[name] += tensor.grad
        for name in grads:
            grads[name] /= pcfg.accum
        opt.step(flat, grads, lr=_lr_at(step, pcfg))
        if pcfg.log_every and (step % pcfg.log_every == 0 or step == pcfg.steps - 1):
            row = {"step": step, "loss": loss_acc / pcfg.accum, "lr": _lr_at(step, pcfg)}
            if heldout:
                row["heldout_nll"] = stream_nll(params, heldout[: pcfg.heldout_chunks])
            rows.append(row)
    return params, rows


# -- checkpoint glue ---------------------------------------------------------------------


def save_lm(prefix: str | Path, params: LmParams, config_hash: str = "") -> None:
    checkpoint.save_arrays(prefix, "lm", params.named_arrays(), meta=params.cfg.to_dict(), config_hash=config_hash)


def load_lm(json_path: str | Path) -> LmParams:
    kind, arrays, meta = checkpoint.load_arrays(json_path)
    if kind != "lm":
        raise ValueError(f"not an lm checkpoint: kind={kind!r}")
    cfg = ModelConfig(**meta)
    layers = []
    for i in range(cfg.n_layers):
        layers.append({f: arrays[f"layers.{i}.{f}"] for f in _LAYER_FIELDS})
    params = LmParams(
        cfg=cfg,
        tok_emb=arrays["tok_emb"],
        pos_emb=arrays["pos_emb"],
        layers=layers,
        final_gain=arrays["final_gain"],
        head=arrays["head"],
    )
    expect = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.max_seq_len, cfg.d_model),
        "final_gain": (cfg.d_model,),
        "head": (cfg.vocab_size, cfg.d_model),
    }
    for name, shape in expect.items():
        if arrays[name].shape != shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arrays[name].shape} != {shape}")
    return params
