"""Adapt-and-reset episode runner.

For each episode a fresh low-rank adapter is initialized from a seed derived
from the episode id, then updated K times by descending the prompt's mean
next-token NLL, with per-block learning-rate multipliers chosen by the active
mode:

- ``fixed``: all multipliers 1, base rate replaced by ``fixed_eta``;
- ``layer-wise``: the scale network emits one multiplier per adapted block;
- ``step-wise``: a single-output net's value is broadcast to every block;
- ``sample-averaged``: a precomputed per-(step, block) average table.

After the K updates the answer NLL is evaluated and all adaptation state is
discarded; only the trace survives. Episodes never share state, so any
processing order yields identical traces for a fixed global seed.

The module also houses two diagnostics on the untouched base state: the
prompt/answer gradient inner product and the first-order Taylor residual of
one update (which shrinks quadratically in the rate).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Episode, episode_seed
from .lm import LmParams, LmTensors, answer_nll, forward, masked_nll, prompt_mask, prompt_representation
from .lora import GradBlocks, LoraState, init_lora, scaled_step
from .scalenet import ScaleNetParams, ScaleTensor, scalenet_forward

MODES = ("fixed", "step-wise", "layer-wise", "sample-averaged")
LEARNED_MODES = ("step-wise", "layer-wise")


@dataclass
class TtaConfig:
    mode: str = "layer-wise"
    eta: float = 1e-2  # base rate, scaled by the network in learned modes
    fixed_eta: float = 5e-2  # rate used verbatim by the fixed baseline
    k_steps: int = 5  # K, number of updates this episode
    k_max: int = 5  # schedule ceiling the nets were conditioned on
    clamp: float = 8.0  # hard bound on raw net outputs
    rank: int = 4  # adapter rank (delta = (alpha/rank) * B @ A)
    alpha: float = 16.0
    init_sigma: float = 1e-2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not (0 <= self.k_steps <= self.k_max):
            raise ValueError(f"need 0 <= K <= k_max, got K={self.k_steps}, k_max={self.k_max}")
        if self.eta <= 0 or self.fixed_eta <= 0:
            raise ValueError("learning rates must be positive")

    def with_steps(self, k_steps: int) -> "TtaConfig":
        return TtaConfig(
            mode=self.mode,
            eta=self.eta,
            fixed_eta=self.fixed_eta,
            k_steps=k_steps,
            k_max=self.k_max,
            clamp=self.clamp,
            rank=self.rank,
            alpha=self.alpha,
            init_sigma=self.init_sigma,
        )


@dataclass
class StepRecord:
    k: int  # 1-based step index
    scales: np.ndarray  # (n_blocks,) applied multipliers
    raw: np.ndarray | None  # pre-clamp net outputs (None when no net ran)
    h: np.ndarray  # detached prompt features the scales were computed from
    grads: GradBlocks  # detached prompt gradients at this step
    prompt_nll: float


@dataclass
class TtaTrace:
    episode_id: str
    mode: str
    k_steps: int
    k_max: int
    seed: int  # the derived per-episode seed
    steps: list[StepRecord] = field(default_factory=list)
    answer_nll: float | None = None
    diverged: bool = False
    final_block_norms: list[tuple[float, float]] = field(default_factory=list)
    answer_grads: GradBlocks | None = None


def step_scales(
    psi: ScaleNetParams,
    h: np.ndarray,
    k: int,
    big_k: int,
    cfg: TtaConfig,
    n_blocks: int,
) -> ScaleTensor:
    """Run the net and shape its output to one multiplier per adapted block."""
    if cfg.mode not in LEARNED_MODES:
        raise ValueError(f"step_scales only applies to learned modes, not {cfg.mode!r}")
    out = scalenet_forward(psi, h, k, big_k, clamp=cfg.clamp)
    if cfg.mode == "layer-wise":
        if out.scales.shape != (n_blocks,):
            raise ValueError(
                f"layer-wise net emits {out.scales.shape[0]} scales but the model has {n_blocks} adapted blocks"
            )
        return out
    if out.scales.shape != (1,):
        raise ValueError(f"step-wise net must have a single output, got {out.scales.shape[0]}")
    return ScaleTensor(
        raw=out.raw,
        scales=np.full(n_blocks, out.scales[0], dtype=out.scales.dtype),
        k=out.k,
        big_k=out.big_k,
    )


def _prompt_pass(mt: LmTensors, state: LoraState, tokens: np.ndarray):
    """One taped prompt forward: (loss value, pooled features, adapter grads)."""
    lt = state.tensors(requires_grad=True)
    logits, capture = forward(mt, lt, tokens)
    loss = masked_nll(logits, tokens, prompt_mask(tokens.size))
    nll = float(loss.data)
    h = prompt_representation(capture)
    if not (np.isfinite(nll) and np.all(np.isfinite(h))):
        return nll, h, None
    loss.backward()
    return nll, h, lt.grads()


def adapt_episode(
    params: LmParams,
    psi: ScaleNetParams | None,
    episode: Episode,
    cfg: TtaConfig,
    seed: int,
    avg_table: np.ndarray | None = None,
    want_answer_grads: bool = False,
) -> TtaTrace:
    """Run one adapt-and-reset episode and return its trace.

    ``seed`` is the global seed; the adapter is drawn from a per-episode seed
    derived from it and the episode id, so traces are independent of corpus
    order. A non-finite loss, feature vector, or gradient marks the trace
    diverged and stops further updates without disturbing other episodes.
    """
    if cfg.mode in LEARNED_MODES and psi is None:
        raise ValueError(f"{cfg.mode} mode requires a scale network")
    n_blocks = 2 * params.cfg.n_layers
    if cfg.mode == "sample-averaged":
        if avg_table is None:
            raise ValueError("sample-averaged mode requires an average scale table")
        avg_table = np.asarray(avg_table, dtype=np.float64)
        if avg_table.shape != (cfg.k_steps, n_blocks):
            raise ValueError(
                f"average table shape {avg_table.shape} does not match (K, blocks) = ({cfg.k_steps}, {n_blocks})"
            )

    ep_seed = episode_seed(seed, episode.id)
    trace = TtaTrace(
        episode_id=episode.id,
        mode=cfg.mode,
        k_steps=cfg.k_steps,
        k_max=cfg.k_max,
        seed=ep_seed,
    )
    mt = params.tensors()
    state = init_lora(
        params.cfg,
        rank=cfg.rank,
        alpha=cfg.alpha,
        sigma=cfg.init_sigma,
        seed=ep_seed,
        dtype=params.tok_emb.dtype,
    )

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(1, cfg.k_steps + 1):
            nll, h, grads = _prompt_pass(mt, state, episode.prompt_tokens)
            if grads is None or not grads.finite():
                trace.diverged = True
                break
            if cfg.mode == "fixed":
                scales = np.ones(n_blocks)
                raw = None
                eta = cfg.fixed_eta
            elif cfg.mode == "sample-averaged":
                scales = avg_table[k - 1]
                raw = None
                eta = cfg.eta
            else:
                out = step_scales(psi, h, k, cfg.k_steps, cfg, n_blocks)
                scales, raw = out.scales, out.raw
                eta = cfg.eta
            state = scaled_step(state, grads, eta, scales)
            trace.steps.append(
                StepRecord(k=k, scales=np.asarray(scales, dtype=np.float64), raw=raw, h=h, grads=grads, prompt_nll=nll)
            )

        if not trace.diverged:
            lt = state.tensors(requires_grad=want_answer_grads)
            loss = answer_nll(mt, lt, episode.prompt_tokens, episode.answer_tokens)
            value = float(loss.data)
            if np.isfinite(value):
                trace.answer_nll = value
                if want_answer_grads:
                    loss.backward()
                    grads = lt.grads()
                    if grads.finite():
                        trace.answer_grads = grads
                    else:
                        trace.diverged = True
            else:
                trace.diverged = True

    trace.final_block_norms = state.block_norms()
    return trace


def average_scales(traces) -> np.ndarray:
    """Elementwise mean of applied scales over non-diverged traces, (K, blocks)."""
    kept = [t for t in traces if not t.diverged]
    if not kept:
        raise ValueError("no non-diverged traces to average")
    shape = (kept[0].k_steps, kept[0].steps[0].scales.shape[0] if kept[0].steps else 0)
    tables = []
    for t in kept:
        if t.k_steps != shape[0]:
            raise ValueError(f"trace {t.episode_id} has K={t.k_steps}, expected {shape[0]}")
        table = np.stack([s.scales for s in t.steps]) if t.steps else np.zeros(shape)
        if table.shape != shape:
            raise ValueError(f"trace {t.episode_id} scale table shape {table.shape} != {shape}")
        tables.append(table)
    return np.mean(np.stack(tables), axis=0)


# -- diagnostics on the base state ---------------------------------------------------


def _answer_grad(mt: LmTensors, state: LoraState, episode: Episode):
    lt = state.tensors(requires_grad=True)
    loss = answer_nll(mt, lt, episode.prompt_tokens, episode.answer_tokens)
    loss.backward()
    return lt.grads(), float(loss.data)


def cross_gradient(params: LmParams, state: LoraState, episode: Episode) -> float:
    """Inner product of the prompt-NLL and answer-NLL adapter gradients.

    Positive values mean one prompt-descent step is predicted (to first
    order) to raise the answer log-likelihood.
    """
    if episode.answer_tokens.size == 0:
        raise ValueError("episode has no answer tokens")
    mt = params.tensors()
    _, _, gx = _prompt_pass(mt, state, episode.prompt_tokens)
    if gx is None:
        raise ValueError("non-finite prompt gradient")
    gy, _ = _answer_grad(mt, state, episode)
    return float(np.sum(gx.dot(gy)))


def taylor_residual(
    params: LmParams,
    state: LoraState,
    episode: Episode,
    eta_list,
) -> tuple[list[float], float]:
    """First-order prediction error of one unscaled update, per rate.

    For each eta: apply one plain descent step on the prompt NLL, measure the
    actual change in mean answer log-likelihood, and subtract the predicted
    eta * <g_x, g_y>. Returns the residuals and the fitted slope of
    log-residual vs log-rate (about 2 in the asymptotic regime, since the
    first-order term is exact up to a quadratic remainder).
    """
    eta_list = [float(e) for e in eta_list]
    if not eta_list or any(e <= 0 for e in eta_list):
        raise ValueError("eta_list must be non-empty and positive")
    if any(b >= a for a, b in zip(eta_list, eta_list[1:])):
        raise ValueError("eta_list must be strictly decreasing")

    mt = params.tensors()
    _, _, gx = _prompt_pass(mt, state, episode.prompt_tokens)
    if gx is None:
        raise ValueError("non-finite prompt gradient")
    gy, base_nll = _answer_grad(mt, state, episode)
    predicted_rate = float(np.sum(gx.dot(gy)))  # d(answer log-lik)/d(eta) at 0

    ones = np.ones(len(state.blocks))
    residuals = []
    for eta in eta_list:
        stepped = scaled_step(state, gx, eta, ones)
        lt = stepped.tensors()
        new_nll = float(answer_nll(mt, lt, episode.prompt_tokens, episode.answer_tokens).data)
        if not np.isfinite(new_nll):
            raise ValueError(f"non-finite answer loss at eta={eta}")
        delta_loglik = base_nll - new_nll
        residuals.append(abs(delta_loglik - eta * predicted_rate))

    usable = [(e, r) for e, r in zip(eta_list, residuals) if r > 0]
    if len(usable) >= 2:
        xs = np.log([e for e, _ in usable])
        ys = np.log([r for _, r in usable])
        slope = float(np.polyfit(xs, ys, 1)[0])
    else:
        slope = float("nan")
    return residuals, slope


# -- trace serialization ---------------------------------------------------------------


TRACE_FORMAT = "tta-trace-v1"


def write_traces_jsonl(path, traces, config_hash: str = "") -> None:
    """One JSON object per episode, preceded by a header row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": TRACE_FORMAT, "config_hash": config_hash}) + "\n")
        for t in traces:
            row = {
                "episode_id": t.episode_id,
                "mode": t.mode,
                "K": t.k_steps,
                "k_max": t.k_max,
                "seed": t.seed,
                "scales": [[float(v) for v in s.scales] for s in t.steps],
                "prompt_nll": [s.prompt_nll for s in t.steps],
                "answer_nll": t.answer_nll,
                "diverged": t.diverged,
            }
            fh.write(json.dumps(row) + "\n")


def read_traces_jsonl(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("format") != TRACE_FORMAT:
        raise ValueError(f"not a {TRACE_FORMAT} file")
    return lines[0], lines[1:]
