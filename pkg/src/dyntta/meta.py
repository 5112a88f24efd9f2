"""Training the scale network.

The scale network is trained to minimize the post-adaptation answer NLL with a
first-order treatment: gradients reach the network only through the scale
multipliers it emitted, never through the recorded prompt gradients or prompt
features. Because each update is additive in the scales,

    d(answer NLL) / d(scale of block i at step k)
        = -eta * <answer_grad_i, prompt_grad_i at step k>,

so the per-episode network gradient is a sum over steps of one backward
through the MLP with those inner products as upstream coefficients. This is
the exact gradient of the "frozen surrogate": the episode re-run where the
recorded prompt gradients and features are held constant and only the
multipliers respond to the network parameters.

Training draws the schedule length K uniformly from {0, ..., k_max} per
episode (K = 0 rows are monitoring-only and contribute no update), applies
AdamW with decoupled weight decay, skips non-finite gradients with a warning
counter, and aborts if divergence becomes persistent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Episode, episode_seed
from .lm import LmParams
from .lora import GradBlocks
from .optim import AdamW
from .scalenet import ScaleNetParams, init_scalenet, scalenet_backward
from .tta import LEARNED_MODES, TtaConfig, TtaTrace, adapt_episode

logger = logging.getLogger(__name__)

META_LOG_FORMAT = "meta-log-v1"


class DivergenceAbort(RuntimeError):
    """Raised when a sustained fraction of recent episodes diverged."""


@dataclass
class MetaConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_max: int = 5
    episodes: int = 30_000
    seed: int = 0
    hidden_dim: int = 128
    accumulate: int = 1  # episodes per optimizer step (gradients averaged)
    eval_every: int = 0  # 0 disables periodic held-out evaluation
    eval_episodes: int = 300
    divergence_window: int = 100
    divergence_fraction: float = 0.5

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.accumulate < 1:
            raise ValueError("accumulate must be at least 1")


@dataclass
class OptimizerState:
    """AdamW moments for the scale net plus the skip counter."""

    opt: AdamW
    skipped: int = 0

    @classmethod
    def fresh(cls, meta: MetaConfig) -> "OptimizerState":
        return cls(opt=AdamW(lr=meta.lr, betas=(meta.beta1, meta.beta2), eps=meta.eps, weight_decay=meta.weight_decay))


def _zero_grads(psi: ScaleNetParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in psi.named_arrays()}


def meta_gradient(
    trace: TtaTrace,
    answer_grads: GradBlocks | None,
    psi: ScaleNetParams,
    eta: float,
    clamp: float = 8.0,
) -> dict[str, np.ndarray]:
    """Assemble the network gradient for one episode from its trace.

    Upstream coefficient for block i at step k:
    c_i = -eta * <answer_grads_i, prompt_grads_i^(k)>, inner product taken
    jointly over the block's two factors. A single-output net receives the
    coefficients' sum (its one multiplier touches every block). K = 0 yields
    the zero gradient.
    """
    if not trace.steps:
        return _zero_grads(psi)
    if answer_grads is None:
        raise ValueError("meta gradient needs answer-side gradients")
    total = _zero_grads(psi)
    for step in trace.steps:
        if step.grads is None or len(step.grads) != len(answer_grads):
            raise ValueError(f"trace step {step.k}: prompt/answer gradient block mismatch")
        c = -eta * answer_grads.dot(step.grads)  # (n_blocks,)
        if psi.out_dim == 1:
            upstream = np.array([c.sum()])
        elif psi.out_dim == c.shape[0]:
            upstream = c
        else:
            raise ValueError(f"net emits {psi.out_dim} scales but the trace has {c.shape[0]} blocks")
        contrib = scalenet_backward(psi, step.h, step.k, trace.k_steps, upstream, clamp=clamp)
        for name in total:
            total[name] += contrib[name]
    return total


def grad_global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def optimizer_step(
    psi: ScaleNetParams,
    grad_psi: dict[str, np.ndarray],
    state: OptimizerState,
    meta: MetaConfig,
) -> tuple[ScaleNetParams, OptimizerState]:
    """One AdamW update, in place on psi's arrays; non-finite gradients skip."""
    params = psi.param_dict()
    if set(grad_psi) != set(params) or any(grad_psi[n].shape != params[n].shape for n in params):
        raise ValueError("gradient does not match the network's parameters")
    if not all(np.all(np.isfinite(g)) for g in grad_psi.values()):
        state.skipped += 1
        logger.warning("skipping optimizer step %d: non-finite gradient", state.opt.t + 1)
        return psi, state
    state.opt.step(params, grad_psi)
    return psi, state


def heldout_nll(
    params: LmParams,
    psi: ScaleNetParams | None,
    episodes,
    cfg: TtaConfig,
    k_values,
    seed: int,
) -> dict[int, float]:
    """Mean answer NLL over episodes at each schedule length (diverged skipped)."""
    out = {}
    for k in k_values:
        run_cfg = cfg.with_steps(k)
        vals = [
            t.answer_nll
            for ep in episodes
            if not (t := adapt_episode(params, psi, ep, run_cfg, seed=seed)).diverged
        ]
        out[int(k)] = float(np.mean(vals)) if vals else float("nan")
    return out


def train_scalenet(
    params: LmParams,
    corpus: list[Episode],
    meta: MetaConfig,
    cfg: TtaConfig,
    psi: ScaleNetParams | None = None,
    opt_state: OptimizerState | None = None,
    heldout: list[Episode] | None = None,
    log_path=None,
    config_hash: str = "",
    start_episode: int = 0,
) -> tuple[ScaleNetParams, list[dict]]:
    """Train the scale net over an episode stream; returns (psi, log rows).

    The corpus is cycled if the episode budget exceeds its length. Passing the
    previous ``psi``/``opt_state``/``start_episode`` resumes a run: identical
    inputs replay to identical parameters.
    """
    if cfg.mode not in LEARNED_MODES:
        raise ValueError(f"training requires a learned mode, not {cfg.mode!r}")
    if not corpus:
        raise ValueError("empty training corpus")
    out_dim = 1 if cfg.mode == "step-wise" else 2 * params.cfg.n_layers
    if psi is None:
        psi = init_scalenet(
            feature_dim=2 * params.cfg.d_model + 2,
            out_dim=out_dim,
            hidden_dim=meta.hidden_dim,
            k_max=meta.k_max,
            seed=meta.seed,
            dtype=params.tok_emb.dtype,
        )
    if psi.out_dim != out_dim:
        raise ValueError(f"net output width {psi.out_dim} does not match mode {cfg.mode!r}")
    state = opt_state if opt_state is not None else OptimizerState.fresh(meta)

    rows: list[dict] = []
    recent_diverged: list[bool] = []
    pending: dict[str, np.ndarray] | None = None
    pending_count = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_fh:
            log_fh.write(json.dumps({"format": META_LOG_FORMAT, "config_hash": config_hash}) + "\n")
        for i in range(start_episode, start_episode + meta.episodes):
            ep = corpus[i % len(corpus)]
            k_rng = np.random.default_rng(episode_seed(meta.seed, f"schedule|{i}"))
            big_k = int(k_rng.integers(0, meta.k_max + 1))
            trace = adapt_episode(
                params, psi, ep, cfg.with_steps(big_k), seed=meta.seed, want_answer_grads=big_k > 0
            )

            grad_norm = 0.0
            if trace.diverged:
                recent_diverged.append(True)
            else:
                recent_diverged.append(False)
                if big_k > 0:
                    grads = meta_gradient(trace, trace.answer_grads, psi, cfg.eta, clamp=cfg.clamp)
                    grad_norm = grad_global_norm(grads)
                    if pending is None:
                        pending = grads
                    else:
                        for name in pending:
                            pending[name] += grads[name]
                    pending_count += 1
                    if pending_count >= meta.accumulate:
                        if meta.accumulate > 1:
                            for name in pending:
                                pending[name] /= pending_count
                        psi, state = optimizer_step(psi, pending, state, meta)
                        pending = None
                        pending_count = 0

            row = {
                "episode": i,
                "id": ep.id,
                "K": big_k,
                "answer_nll": trace.answer_nll,
                "prompt_nll_first": trace.steps[0].prompt_nll if trace.steps else None,
                "grad_norm": grad_norm,
                "diverged": trace.diverged,
            }
            rows.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")

            if len(recent_diverged) > meta.divergence_window:
                recent_diverged.pop(0)
            if (
                len(recent_diverged) == meta.divergence_window
                and sum(recent_diverged) >= meta.divergence_fraction * meta.divergence_window
            ):
                raise DivergenceAbort(
                    f"{sum(recent_diverged)}/{meta.divergence_window} recent episodes diverged "
                    f"(episode {i}); lower the rate or rescale the model"
                )

            if meta.eval_every and heldout and (i + 1 - start_episode) % meta.eval_every == 0:
                nlls = heldout_nll(
                    params, psi, heldout[: meta.eval_episodes], cfg, range(meta.k_max + 1), seed=meta.seed
                )
                eval_row = {"heldout": True, "episode": i, "nll_by_k": {str(k): v for k, v in nlls.items()}}
                rows.append(eval_row)
                if log_fh:
                    log_fh.write(json.dumps(eval_row) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return psi, rows
