"""Evaluation and reporting: answer-NLL grids over (mode, K), ROUGE-Lsum,
scale heatmaps, and schedule-consistency summaries.

Everything here aggregates immutable episode traces; the grid runner is the
only piece that executes episodes, and it shares the K=0 result across modes
(no adaptation happens at K=0, so the cells are identical by construction).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Episode
from .lm import LmParams, greedy_decode
from .lora import init_lora, scaled_step
from .scalenet import ScaleNetParams
from .tta import LEARNED_MODES, TtaConfig, TtaTrace, adapt_episode, average_scales

HEATMAP_RENDERER = "heatmap-svg-v1"
CHART_RENDERER = "step-magnitude-svg-v1"


# -- ROUGE-Lsum ----------------------------------------------------------------------


def _sentences(text: str) -> list[list[str]]:
    return [line.split() for line in text.lower().splitlines() if line.split()]


def _lcs_ref_positions(ref: list[str], cand: list[str]) -> set[int]:
    """Reference indices matched by one LCS of ref vs cand.

    Backtrack prefers advancing the reference index on ties, so the matched
    set is deterministic; any LCS has the same size, which is all the score
    uses for single-sentence texts.
    """
    n, m = len(ref), len(cand)
    dp = np.zeros((n + 1, m + 1), dtype=np.int32)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if ref[i] == cand[j]:
                dp[i, j] = dp[i + 1, j + 1] + 1
            else:
                dp[i, j] = max(dp[i + 1, j], dp[i, j + 1])
    out: set[int] = set()
    i = j = 0
    while i < n and j < m:
        if ref[i] == cand[j]:
            out.add(i)
            i += 1
            j += 1
        elif dp[i + 1, j] >= dp[i, j + 1]:
            i += 1
        else:
            j += 1
    return out


def rouge_lsum(candidate: str, reference: str) -> float:
    """Union-LCS F-score over newline sentences and whitespace tokens, in [0,1]."""
    cand_sents = _sentences(candidate)
    ref_sents = _sentences(reference)
    n_cand = sum(len(s) for s in cand_sents)
    n_ref = sum(len(s) for s in ref_sents)
    if n_cand == 0 or n_ref == 0:
        return 0.0
    matches = 0
    for ref in ref_sents:
        hit: set[int] = set()
        for cand in cand_sents:
            hit |= _lcs_ref_positions(ref, cand)
        matches += len(hit)
    if matches == 0:
        return 0.0
    precision = matches / n_cand
    recall = matches / n_ref
    return 2 * precision * recall / (precision + recall)


# -- the (mode, K) grid ----------------------------------------------------------------


@dataclass
class CellStats:
    mode: str
    k_steps: int
    n: int
    mean_nll: float
    se_nll: float
    diverged: int
    mean_rouge: float | None = None
    best: bool = False


@dataclass
class MetricsReport:
    cells: list[CellStats]
    episodes: int
    config_hash: str = ""

    def cell(self, mode: str, k: int) -> CellStats:
        for c in self.cells:
            if c.mode == mode and c.k_steps == k:
                return c
        raise KeyError(f"no cell for mode={mode!r}, K={k}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "config_hash": self.config_hash,
                "episodes": self.episodes,
                "cells": [dataclasses.asdict(c) for c in self.cells],
            },
            indent=2,
        )


def _mean_se(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, se


def _replay_final_state(params: LmParams, trace: TtaTrace, cfg: TtaConfig):
    """Rebuild the adapter state a trace ended at, from its recorded steps."""
    state = init_lora(
        params.cfg, rank=cfg.rank, alpha=cfg.alpha, sigma=cfg.init_sigma,
        seed=trace.seed, dtype=params.tok_emb.dtype,
    )
    eta = cfg.fixed_eta if trace.mode == "fixed" else cfg.eta
    for step in trace.steps:
        state = scaled_step(state, step.grads, eta, step.scales)
    return state


def eval_grid(
    params: LmParams,
    nets: dict[str, ScaleNetParams | None],
    dataset: list[Episode],
    modes: list[str],
    k_list: list[int],
    cfg: TtaConfig,
    seed: int = 0,
    tokenizer=None,
    rouge_max_new: int = 32,
    config_hash: str = "",
    keep_traces: bool = False,
    workers: int = 1,
) -> MetricsReport | tuple[MetricsReport, dict]:
    """Mean answer NLL (± SE) per (mode, K) cell over a shared episode set.

    ``nets`` maps each learned mode to its trained network. Sample-averaged
    cells consume the per-K average scale table of the layer-wise traces from
    this same run. When ``tokenizer`` is given, each cell also reports mean
    ROUGE-Lsum of capped greedy generations against the reference answers.
    ``workers`` > 1 adapts episodes on a thread pool; results stay in dataset
    order, so output is identical to the serial run.
    """
    if not dataset:
        raise ValueError("empty evaluation dataset")
    for mode in modes:
        if mode in LEARNED_MODES and nets.get(mode) is None:
            raise ValueError(f"mode {mode!r} requires a trained network")
    if "sample-averaged" in modes and nets.get("layer-wise") is None:
        raise ValueError("sample-averaged mode requires the layer-wise network to build its table")

    cells: list[CellStats] = []
    all_traces: dict[tuple[str, int], list[TtaTrace]] = {}
    k0_traces: list[TtaTrace] | None = None

    def run_all(psi, run_cfg, table=None):
        job = lambda ep: adapt_episode(params, psi, ep, run_cfg, seed=seed, avg_table=table)
        if workers <= 1:
            return [job(ep) for ep in dataset]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, dataset))

    # layer-wise runs first so its per-K tables exist for sample-averaged
    ordered = sorted(modes, key=lambda m: 0 if m == "layer-wise" else 1)
    for k in sorted(k_list):
        for mode in ordered:
            run_cfg = dataclasses.replace(cfg, mode=mode, k_steps=k)
            if k == 0:
                if k0_traces is None:
                    base_cfg = dataclasses.replace(cfg, mode="fixed", k_steps=0)
                    k0_traces = run_all(None, base_cfg)
                traces = [dataclasses.replace(t, mode=mode) for t in k0_traces]
            elif mode == "sample-averaged":
                table = average_scales(all_traces[("layer-wise", k)])
                traces = run_all(None, run_cfg, table=table)
            else:
                psi = nets.get(mode) if mode in LEARNED_MODES else None
                traces = run_all(psi, run_cfg)
            all_traces[(mode, k)] = traces

            nlls = [t.answer_nll for t in traces if not t.diverged]
            mean, se = _mean_se(nlls)
            rouge = None
            if tokenizer is not None:
                scores = []
                mt = params.tensors()
                for ep, t in zip(dataset, traces):
                    if t.diverged:
                        continue
                    state = _replay_final_state(params, t, run_cfg)
                    gen = greedy_decode(
                        mt, state.tensors(), ep.prompt_tokens, max_new=rouge_max_new, stop_id=tokenizer.bos_id
                    )
                    scores.append(rouge_lsum(tokenizer.decode(gen), ep.answer_text))
                rouge = float(np.mean(scores)) if scores else None
            cells.append(
                CellStats(
                    mode=mode,
                    k_steps=k,
                    n=len(nlls),
                    mean_nll=mean,
                    se_nll=se,
                    diverged=sum(t.diverged for t in traces),
                    mean_rouge=rouge,
                )
            )

    for mode in modes:
        mine = [c for c in cells if c.mode == mode and np.isfinite(c.mean_nll)]
        if mine:
            min(mine, key=lambda c: c.mean_nll).best = True

    report = MetricsReport(cells=cells, episodes=len(dataset), config_hash=config_hash)
    if keep_traces:
        return report, all_traces
    return report


def report_to_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={report.config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["mode", "K", "n", "mean_nll", "se_nll", "diverged", "mean_rouge", "best"])
        for c in report.cells:
            writer.writerow(
                [
                    c.mode,
                    c.k_steps,
                    c.n,
                    repr(c.mean_nll),
                    repr(c.se_nll),
                    c.diverged,
                    "" if c.mean_rouge is None else repr(c.mean_rouge),
                    int(c.best),
                ]
            )


# -- scale heatmap -------------------------------------------------------------------


@dataclass
class HeatmapGrid:
    values: np.ndarray  # (L, 2K) means, layer rows shallow -> deep
    row_labels: list[str] = field(default_factory=list)
    col_labels: list[str] = field(default_factory=list)


def heatmap_grid(traces) -> HeatmapGrid:
    """Mean scale per (layer, step x projection) cell over non-diverged traces."""
    kept = [t for t in traces if not t.diverged and t.steps]
    if not kept:
        raise ValueError("no usable traces for the heatmap")
    k_steps = kept[0].k_steps
    n_blocks = kept[0].steps[0].scales.shape[0]
    n_layers = n_blocks // 2
    for t in kept:
        if t.k_steps != k_steps or t.steps[0].scales.shape[0] != n_blocks:
            raise ValueError("traces disagree on schedule length or block count")
    values = np.zeros((n_layers, 2 * k_steps))
    for layer in range(n_layers):
        for k in range(1, k_steps + 1):
            for p, _ in enumerate(("q", "v")):
                cell = [t.steps[k - 1].scales[2 * layer + p] for t in kept]
                values[layer, 2 * (k - 1) + p] = float(np.mean(cell))
    return HeatmapGrid(
        values=values,
        row_labels=[f"layer_{i + 1}" for i in range(n_layers)],
        col_labels=[f"{p}_{k}" for k in range(1, k_steps + 1) for p in ("q", "v")],
    )


def write_heatmap_csv(grid: HeatmapGrid, path, config_hash: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["layer"] + grid.col_labels)
        for label, row in zip(grid.row_labels, grid.values):
            writer.writerow([label] + [repr(float(v)) for v in row])


def read_heatmap_csv(path) -> HeatmapGrid:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = list(csv.reader(lines))
    col_labels = rows[0][1:]
    row_labels = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return HeatmapGrid(values=values, row_labels=row_labels, col_labels=col_labels)


def _color(log_v: float, lo: float, hi: float) -> str:
    """Two-sided log color: below-1 scales toward blue, above-1 toward red."""
    if hi > lo:
        t = (log_v - lo) / (hi - lo)
    else:
        t = 0.5
    t = min(max(t, 0.0), 1.0)
    r = int(round(255 * t))
    b = int(round(255 * (1 - t)))
    g = int(round(255 * (1 - abs(2 * t - 1)) * 0.85 + 30))
    return f"rgb({r},{min(g, 255)},{b})"


def export_heatmap(traces, csv_path, svg_path, config_hash: str = "") -> HeatmapGrid:
    """Write the grid as CSV, then render the SVG from the re-parsed CSV."""
    grid = heatmap_grid(traces)
    write_heatmap_csv(grid, csv_path, config_hash)
    rendered = read_heatmap_csv(csv_path)  # the SVG shows exactly what the CSV says
    logs = np.log(rendered.values)
    lo, hi = float(logs.min()), float(logs.max())
    cell, pad_l, pad_t = 54, 70, 30
    width = pad_l + cell * len(rendered.col_labels) + 10
    height = pad_t + cell * len(rendered.row_labels) + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f"<!-- renderer={HEATMAP_RENDERER} config_hash={config_hash} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for j, label in enumerate(rendered.col_labels):
        parts.append(f'<text x="{pad_l + j * cell + cell // 2}" y="{pad_t - 8}" text-anchor="middle">{label}</text>')
    for i, label in enumerate(rendered.row_labels):
        parts.append(
            f'<text x="{pad_l - 6}" y="{pad_t + i * cell + cell // 2 + 4}" text-anchor="end">{label}</text>'
        )
    for i in range(len(rendered.row_labels)):
        for j in range(len(rendered.col_labels)):
            v = rendered.values[i, j]
            parts.append(
                f'<rect x="{pad_l + j * cell}" y="{pad_t + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{_color(math.log(v), lo, hi)}" stroke="#444"/>'
            )
            parts.append(
                f'<text x="{pad_l + j * cell + cell // 2}" y="{pad_t + i * cell + cell // 2 + 4}" '
                f'text-anchor="middle">{v:.2f}</text>'
            )
    parts.append("</svg>")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
    return grid


# -- schedule consistency --------------------------------------------------------------


def schedule_consistency(groups: dict[int, list[TtaTrace]], baseline_k: int) -> dict:
    """Per-step percentage differences of shorter schedules vs the baseline.

    Traces are paired by episode id (both runs non-diverged); each pair's
    per-block percentage differences at a shared step are averaged over
    blocks, then summarized over episodes as mean with a 95% normal CI.
    Also reports the mean scale magnitude per step pooled over all schedules.
    """
    if baseline_k not in groups:
        raise ValueError(f"baseline schedule K={baseline_k} missing from groups")
    base = {t.episode_id: t for t in groups[baseline_k] if not t.diverged}
    cells = []
    for k_sched in sorted(groups):
        if k_sched >= baseline_k or k_sched < 1:
            continue
        paired = [
            (t, base[t.episode_id]) for t in groups[k_sched] if not t.diverged and t.episode_id in base
        ]
        for step_index in range(1, k_sched + 1):
            diffs = []
            for short, long in paired:
                s_short = short.steps[step_index - 1].scales
                s_long = long.steps[step_index - 1].scales
                diffs.append(float(np.mean(100.0 * (s_short - s_long) / s_long)))
            if diffs:
                arr = np.asarray(diffs)
                mean = float(arr.mean())
                se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
                cells.append(
                    {"K": k_sched, "k": step_index, "mean_pct": mean, "ci95": 1.96 * se, "n": arr.size}
                )
    magnitude = []
    for step_index in range(1, baseline_k + 1):
        pool = [
            float(np.mean(t.steps[step_index - 1].scales))
            for traces in groups.values()
            for t in traces
            if not t.diverged and t.k_steps >= step_index
        ]
        if pool:
            magnitude.append({"k": step_index, "mean_scale": float(np.mean(pool)), "n": len(pool)})
    return {"baseline_K": baseline_k, "cells": cells, "step_magnitude": magnitude}


def export_step_magnitude_svg(report: dict, path, config_hash: str = "") -> None:
    """Bar chart of the all-schedules mean scale magnitude per step."""
    rows = report["step_magnitude"]
    if not rows:
        raise ValueError("report has no step-magnitude rows")
    width, height, pad = 80 + 70 * len(rows), 220, 40
    top = max(r["mean_scale"] for r in rows)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f"<!-- renderer={CHART_RENDERER} config_hash={config_hash} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, r in enumerate(rows):
        h = 0 if top <= 0 else (height - 2 * pad) * r["mean_scale"] / top
        x = pad + 10 + i * 70
        parts.append(f'<rect x="{x}" y="{height - pad - h}" width="44" height="{h}" fill="steelblue"/>')
        parts.append(f'<text x="{x + 22}" y="{height - pad + 14}" text-anchor="middle">k={r["k"]}</text>')
        parts.append(
            f'<text x="{x + 22}" y="{height - pad - h - 5}" text-anchor="middle">{r["mean_scale"]:.2f}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
