"""Command-line surface.

Subcommands: pretrain, train-scalenet, adapt, eval, export-scales,
consistency, taylor-check, gradcheck. Every command resolves one JSON config
(defaults <- --config file <- repeated --set dotted.key=value overrides),
persists it to <run>/config.json, and stamps the first 12 hex chars of its
sha256 into every artifact it writes. Exit codes: 0 success, 1 config or
runtime failure (config errors name the offending field path), 2 usage.

Run directory layout: config.json, checkpoints/, traces/, reports/,
figures/. The default run root is ./runs, overridable with DYNTTA_RUN_ROOT.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import (
    ByteTokenizer,
    TEMPLATES,
    gen_synthetic,
    load_jsonl,
    pack_stream,
    split_episodes,
    synthetic_tokenizer,
)
from .evalharness import (
    eval_grid,
    export_heatmap,
    export_step_magnitude_svg,
    report_to_csv,
    schedule_consistency,
)
from .lm import ModelConfig, PretrainConfig, load_lm, pretrain_lm, save_lm
from .meta import DivergenceAbort, MetaConfig, train_scalenet
from .scalenet import load_scalenet, save_scalenet
from .tensor import Tensor, gradcheck
from .tta import (
    MODES,
    StepRecord,
    TtaConfig,
    TtaTrace,
    adapt_episode,
    average_scales,
    read_traces_jsonl,
    taylor_residual,
    write_traces_jsonl,
)

logger = logging.getLogger(__name__)

ENV_RUN_ROOT = "DYNTTA_RUN_ROOT"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "precision": "float32",
    "out_dir": None,
    "model": {
        "vocab_size": None,  # resolved from the tokenizer
        "d_model": 64,
        "n_layers": 4,
        "n_heads": 4,
        "d_ff": 256,
        "max_seq_len": 256,
        "norm_eps": 1e-6,
    },
    "data": {
        "kind": "synthetic",
        "task": "kv_recall",
        "n": 2000,
        "difficulty": {},
        "eval_permille": 30,
        "path": None,
        "template": None,
    },
    "pretrain": {
        "steps": 2000,
        "accum": 4,
        "lr": 1e-3,
        "warmup": 100,
        "min_lr_frac": 0.1,
        "weight_decay": 0.0,
        "log_every": 100,
        "seq_len": 128,
        "epochs": 1,
    },
    "tta": {
        "mode": "layer-wise",
        "eta": 0.01,
        "fixed_eta": 0.05,
        "k_steps": 5,
        "k_max": 5,
        "clamp": 8.0,
        "rank": 4,
        "alpha": 16.0,
        "init_sigma": 0.01,
    },
    "meta": {
        "lr": 1e-4,
        "weight_decay": 0.0,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "k_max": 5,
        "episodes": 30000,
        "hidden_dim": 128,
        "accumulate": 1,
        "eval_every": 0,
        "eval_episodes": 300,
        "divergence_window": 100,
        "divergence_fraction": 0.5,
    },
    "eval": {
        "modes": ["fixed", "step-wise", "layer-wise"],
        "k_list": [0, 1, 2, 3, 4, 5],
        "rouge": False,
        "max_new": 32,
        "episodes": 300,
    },
}


class ConfigError(Exception):
    """Invalid configuration; the message starts with the field path."""


# -- config handling -----------------------------------------------------------------


def _merge_into(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown config field")
        if isinstance(base[key], dict) and key != "difficulty":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            _merge_into(base[key], value, where + ".")
        else:
            base[key] = value


def _apply_set(cfg: dict, expr: str) -> None:
    if "=" not in expr:
        raise ConfigError(f"--set {expr!r}: expected dotted.key=value")
    dotted, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"{dotted}: unknown config field")
        if i == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _require(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {message}")


def validate_config(cfg: dict) -> None:
    _require(isinstance(cfg["seed"], int), "seed", "must be an integer")
    _require(cfg["precision"] in ("float32", "float64"), "precision", "must be float32 or float64")
    m = cfg["model"]
    for key in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
        _require(isinstance(m[key], int) and m[key] >= 1, f"model.{key}", "must be a positive integer")
    _require(m["d_model"] % m["n_heads"] == 0, "model.d_model", "must be divisible by model.n_heads")
    d = cfg["data"]
    _require(d["kind"] in ("synthetic", "jsonl"), "data.kind", "must be synthetic or jsonl")
    if d["kind"] == "synthetic":
        tasks = data_mod.SYNTHETIC_TASKS + ("mixed",)
        _require(d["task"] in tasks, "data.task", f"must be one of {tasks}")
        _require(isinstance(d["n"], int) and d["n"] >= 1, "data.n", "must be a positive integer")
    else:
        _require(bool(d["path"]), "data.path", "required for jsonl data")
        _require(d["template"] in TEMPLATES, "data.template", f"must be one of {sorted(TEMPLATES)}")
    _require(0 <= d["eval_permille"] <= 1000, "data.eval_permille", "must be in [0, 1000]")
    p = cfg["pretrain"]
    for key in ("steps", "accum", "warmup", "seq_len", "epochs"):
        _require(isinstance(p[key], int) and p[key] >= 1, f"pretrain.{key}", "must be a positive integer")
    _require(p["lr"] > 0, "pretrain.lr", "must be positive")
    _require(p["seq_len"] <= m["max_seq_len"], "pretrain.seq_len", "must not exceed model.max_seq_len")
    t = cfg["tta"]
    _require(t["mode"] in MODES, "tta.mode", f"must be one of {MODES}")
    _require(t["eta"] > 0, "tta.eta", "must be positive")
    _require(t["fixed_eta"] > 0, "tta.fixed_eta", "must be positive")
    _require(0 <= t["k_steps"] <= t["k_max"], "tta.k_steps", "must satisfy 0 <= k_steps <= k_max")
    _require(isinstance(t["rank"], int) and t["rank"] >= 1, "tta.rank", "must be a positive integer")
    me = cfg["meta"]
    _require(me["lr"] > 0, "meta.lr", "must be positive")
    _require(isinstance(me["k_max"], int) and me["k_max"] >= 1, "meta.k_max", "must be a positive integer")
    _require(isinstance(me["episodes"], int) and me["episodes"] >= 1, "meta.episodes", "must be a positive integer")
    _require(isinstance(me["hidden_dim"], int) and me["hidden_dim"] >= 1, "meta.hidden_dim", "must be a positive integer")
    e = cfg["eval"]
    for mode in e["modes"]:
        _require(mode in MODES, "eval.modes", f"unknown mode {mode!r}")
    for k in e["k_list"]:
        _require(isinstance(k, int) and 0 <= k <= t["k_max"], "eval.k_list", "entries must be ints in [0, tta.k_max]")
    _require(isinstance(e["max_new"], int) and e["max_new"] >= 1, "eval.max_new", "must be a positive integer")


def resolve_config(args) -> tuple[dict, str]:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: not valid JSON ({exc})")
        _merge_into(cfg, loaded)
    for expr in args.set or []:
        _apply_set(cfg, expr)
    if cfg["model"]["vocab_size"] is None:
        cfg["model"]["vocab_size"] = (
            synthetic_tokenizer().vocab_size if cfg["data"]["kind"] == "synthetic" else 256
        )
    validate_config(cfg)
    return cfg, config_hash(cfg)


def run_directory(args, cfg: dict) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    if cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    return Path(os.environ.get(ENV_RUN_ROOT, "runs")) / "default"


def prepare_run_dir(run_dir: Path, cfg: dict, chash: str) -> None:
    for sub in ("checkpoints", "traces", "reports", "figures"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    persisted = {"config_hash": chash, **cfg}
    (run_dir / "config.json").write_text(json.dumps(persisted, indent=2, sort_keys=True) + "\n")


# -- shared builders -----------------------------------------------------------------


def build_tokenizer(cfg: dict):
    return synthetic_tokenizer() if cfg["data"]["kind"] == "synthetic" else ByteTokenizer()


def build_corpus(cfg: dict, tokenizer) -> list:
    d = cfg["data"]
    if d["kind"] == "jsonl":
        episodes, stats = load_jsonl(d["path"], d["template"], tokenizer, max_seq_len=cfg["model"]["max_seq_len"])
        logger.info(
            "ingested %d/%d rows (%d malformed, %d missing fields, %d empty answers, %d over length)",
            stats.kept, stats.read, stats.malformed, stats.missing_fields, stats.empty_answer, stats.over_length,
        )
        if not episodes:
            raise RuntimeError(f"no usable episodes in {d['path']}")
        return episodes
    if d["task"] == "mixed":
        per = d["n"] // len(data_mod.SYNTHETIC_TASKS)
        episodes = []
        for task in data_mod.SYNTHETIC_TASKS:
            episodes.extend(gen_synthetic(task, per, cfg["seed"], tokenizer, d["difficulty"]))
        return episodes
    return gen_synthetic(d["task"], d["n"], cfg["seed"], tokenizer, d["difficulty"])


def split_corpus(cfg: dict, episodes):
    return split_episodes(episodes, eval_permille=cfg["data"]["eval_permille"], salt=cfg["seed"])


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        vocab_size=m["vocab_size"],
        d_model=m["d_model"],
        n_layers=m["n_layers"],
        n_heads=m["n_heads"],
        d_ff=m["d_ff"],
        max_seq_len=m["max_seq_len"],
        norm_eps=m["norm_eps"],
    )


def tta_config(cfg: dict, mode: str | None = None, k_steps: int | None = None) -> TtaConfig:
    t = cfg["tta"]
    return TtaConfig(
        mode=mode or t["mode"],
        eta=t["eta"],
        fixed_eta=t["fixed_eta"],
        k_steps=t["k_steps"] if k_steps is None else k_steps,
        k_max=t["k_max"],
        clamp=t["clamp"],
        rank=t["rank"],
        alpha=t["alpha"],
        init_sigma=t["init_sigma"],
    )


def meta_config(cfg: dict) -> MetaConfig:
    me = cfg["meta"]
    return MetaConfig(
        lr=me["lr"],
        weight_decay=me["weight_decay"],
        beta1=me["beta1"],
        beta2=me["beta2"],
        eps=me["eps"],
        k_max=me["k_max"],
        episodes=me["episodes"],
        seed=cfg["seed"],
        hidden_dim=me["hidden_dim"],
        accumulate=me["accumulate"],
        eval_every=me["eval_every"],
        eval_episodes=me["eval_episodes"],
        divergence_window=me["divergence_window"],
        divergence_fraction=me["divergence_fraction"],
    )


def _dtype(cfg: dict):
    return np.float64 if cfg["precision"] == "float64" else np.float32


def _load_model(args, run_dir: Path):
    path = Path(args.model) if getattr(args, "model", None) else run_dir / "checkpoints" / "lm.json"
    if not path.exists():
        raise RuntimeError(f"model checkpoint not found: {path} (run `dyntta pretrain` first or pass --model)")
    return load_lm(path)


def _net_path(run_dir: Path, mode: str) -> Path:
    return run_dir / "checkpoints" / f"scalenet_{mode.replace('-', '_')}.json"


def _load_net(args, run_dir: Path, mode: str):
    flag = {"layer-wise": "layerwise", "step-wise": "stepwise"}[mode]
    path = Path(getattr(args, flag)) if getattr(args, flag, None) else _net_path(run_dir, mode)
    if not path.exists():
        raise RuntimeError(f"{mode} network checkpoint not found: {path} (train it or pass --{flag})")
    return load_scalenet(path)


def parse_k_list(expr: str) -> list[int]:
    expr = expr.strip()
    if ".." in expr:
        lo, hi = expr.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in expr.split(",") if tok.strip() != ""]


# -- subcommands ---------------------------------------------------------------------


def cmd_pretrain(args, cfg, run_dir: Path, chash: str) -> int:
    tokenizer = build_tokenizer(cfg)
    episodes = build_corpus(cfg, tokenizer)
    train, heldout = split_corpus(cfg, episodes)
    p = cfg["pretrain"]
    chunks = pack_stream(train, seq_len=p["seq_len"], seed=cfg["seed"], epochs=p["epochs"])
    heldout_chunks = (pack_stream(heldout, seq_len=p["seq_len"], seed=cfg["seed"] + 1) or None) if heldout else None
    pcfg = PretrainConfig(
        steps=p["steps"],
        accum=p["accum"],
        lr=p["lr"],
        warmup=p["warmup"],
        min_lr_frac=p["min_lr_frac"],
        weight_decay=p["weight_decay"],
        log_every=p["log_every"],
    )
    logger.info("pretraining on %d chunks (%d episodes)", len(chunks), len(train))
    params, rows = pretrain_lm(chunks, model_config(cfg), pcfg, seed=cfg["seed"], heldout=heldout_chunks, dtype=_dtype(cfg))
    save_lm(run_dir / "checkpoints" / "lm", params, config_hash=chash)
    with open(run_dir / "reports" / "pretrain_log.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "pretrain-log-v1", "config_hash": chash}) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    last = rows[-1] if rows else {}
    print(json.dumps({"checkpoint": str(run_dir / "checkpoints" / "lm.json"), "final": last}))
    return 0


def cmd_train_scalenet(args, cfg, run_dir: Path, chash: str) -> int:
    mode = args.mode or cfg["tta"]["mode"]
    params = _load_model(args, run_dir)
    tokenizer = build_tokenizer(cfg)
    train, heldout = split_corpus(cfg, build_corpus(cfg, tokenizer))
    if not train:
        raise RuntimeError("training split is empty")
    meta = meta_config(cfg)
    cfg_tta = tta_config(cfg, mode=mode)
    log_path = run_dir / "reports" / f"meta_log_{mode.replace('-', '_')}.jsonl"
    psi, rows = train_scalenet(
        params, train, meta, cfg_tta,
        heldout=heldout or None, log_path=log_path, config_hash=chash,
    )
    out = _net_path(run_dir, mode)
    save_scalenet(out.with_suffix(""), psi, config_hash=chash)
    answered = [r["answer_nll"] for r in rows if "heldout" not in r and r["answer_nll"] is not None and r["K"] > 0]
    print(json.dumps({
        "checkpoint": str(out),
        "episodes": meta.episodes,
        "mean_answer_nll_last_100": float(np.mean(answered[-100:])) if answered else None,
    }))
    return 0


def _adapt_many(params, psi, episodes, run_cfg, seed, avg_table=None, workers=1):
    if workers <= 1:
        return [adapt_episode(params, psi, ep, run_cfg, seed=seed, avg_table=avg_table) for ep in episodes]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ep: adapt_episode(params, psi, ep, run_cfg, seed=seed, avg_table=avg_table), episodes))


def cmd_adapt(args, cfg, run_dir: Path, chash: str) -> int:
    mode = args.mode or cfg["tta"]["mode"]
    k = args.K if args.K is not None else cfg["tta"]["k_steps"]
    params = _load_model(args, run_dir)
    tokenizer = build_tokenizer(cfg)
    _, heldout = split_corpus(cfg, build_corpus(cfg, tokenizer))
    episodes = heldout[: args.limit] if args.limit else heldout
    if not episodes:
        raise RuntimeError("no held-out episodes to adapt on")
    run_cfg = tta_config(cfg, mode=mode, k_steps=k)
    psi = _load_net(args, run_dir, mode) if mode in ("layer-wise", "step-wise") else None
    avg_table = None
    if mode == "sample-averaged":
        lw = _load_net(args, run_dir, "layer-wise")
        lw_cfg = tta_config(cfg, mode="layer-wise", k_steps=k)
        lw_traces = _adapt_many(params, lw, episodes, lw_cfg, cfg["seed"], workers=args.workers)
        avg_table = average_scales(lw_traces)
    traces = _adapt_many(params, psi, episodes, run_cfg, cfg["seed"], avg_table=avg_table, workers=args.workers)
    out = run_dir / "traces" / f"traces_{mode.replace('-', '_')}_K{k}.jsonl"
    write_traces_jsonl(out, traces, config_hash=chash)
    nlls = [t.answer_nll for t in traces if not t.diverged]
    print(json.dumps({
        "traces": str(out),
        "episodes": len(traces),
        "diverged": sum(t.diverged for t in traces),
        "mean_answer_nll": float(np.mean(nlls)) if nlls else None,
    }))
    return 0


def cmd_eval(args, cfg, run_dir: Path, chash: str) -> int:
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else cfg["eval"]["modes"]
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"eval.modes: unknown mode {mode!r}")
    k_list = parse_k_list(args.K) if args.K else cfg["eval"]["k_list"]
    params = _load_model(args, run_dir)
    tokenizer = build_tokenizer(cfg)
    _, heldout = split_corpus(cfg, build_corpus(cfg, tokenizer))
    episodes = heldout[: cfg["eval"]["episodes"]]
    if not episodes:
        raise RuntimeError("no held-out episodes to evaluate")
    nets = {}
    for mode in ("layer-wise", "step-wise"):
        if mode in modes or (mode == "layer-wise" and "sample-averaged" in modes):
            nets[mode] = _load_net(args, run_dir, mode)
    rouge = args.rouge or cfg["eval"]["rouge"]
    report = eval_grid(
        params, nets, episodes, modes, k_list, tta_config(cfg), seed=cfg["seed"],
        tokenizer=tokenizer if rouge else None, rouge_max_new=cfg["eval"]["max_new"],
        config_hash=chash, workers=args.workers,
    )
    report_to_csv(report, run_dir / "reports" / "metrics.csv")
    (run_dir / "reports" / "metrics.json").write_text(report.to_json() + "\n")
    for cell in report.cells:
        marker = " *" if cell.best else ""
        rouge_txt = "" if cell.mean_rouge is None else f"  rouge={cell.mean_rouge:.4f}"
        print(f"{cell.mode:>16}  K={cell.k_steps}  nll={cell.mean_nll:.4f} ±{cell.se_nll:.4f}"
              f"  n={cell.n}  diverged={cell.diverged}{rouge_txt}{marker}")
    return 0


def _traces_from_rows(rows: list[dict]) -> list[TtaTrace]:
    traces = []
    for row in rows:
        steps = [
            StepRecord(k=i + 1, scales=np.asarray(s, dtype=np.float64), raw=None,
                       h=np.zeros(0), grads=None, prompt_nll=float(p))
            for i, (s, p) in enumerate(zip(row["scales"], row["prompt_nll"]))
        ]
        traces.append(TtaTrace(
            episode_id=row["episode_id"], mode=row["mode"], k_steps=row["K"], k_max=row["k_max"],
            seed=row["seed"], steps=steps, answer_nll=row["answer_nll"], diverged=row["diverged"],
        ))
    return traces


def cmd_export_scales(args, cfg, run_dir: Path, chash: str) -> int:
    header, rows = read_traces_jsonl(args.src)
    traces = _traces_from_rows(rows)
    stamp = header.get("config_hash") or chash
    csv_path = run_dir / "figures" / "heatmap.csv"
    svg_path = run_dir / "figures" / "heatmap.svg"
    grid = export_heatmap(traces, csv_path, svg_path, config_hash=stamp)
    print(json.dumps({
        "csv": str(csv_path), "svg": str(svg_path),
        "rows": len(grid.row_labels), "cols": len(grid.col_labels),
    }))
    return 0


def cmd_consistency(args, cfg, run_dir: Path, chash: str) -> int:
    params = _load_model(args, run_dir)
    psi = _load_net(args, run_dir, "layer-wise")
    tokenizer = build_tokenizer(cfg)
    _, heldout = split_corpus(cfg, build_corpus(cfg, tokenizer))
    episodes = heldout[: cfg["eval"]["episodes"]]
    if not episodes:
        raise RuntimeError("no held-out episodes")
    k_max = cfg["tta"]["k_max"]
    groups = {}
    for k in range(1, k_max + 1):
        run_cfg = tta_config(cfg, mode="layer-wise", k_steps=k)
        groups[k] = _adapt_many(params, psi, episodes, run_cfg, cfg["seed"], workers=args.workers)
    report = schedule_consistency(groups, baseline_k=k_max)
    report["config_hash"] = chash
    (run_dir / "reports" / "consistency.json").write_text(json.dumps(report, indent=2) + "\n")
    export_step_magnitude_svg(report, run_dir / "figures" / "step_magnitude.svg", config_hash=chash)
    for cell in report["cells"]:
        print(f"K={cell['K']} k={cell['k']}: {cell['mean_pct']:+.3f}% ± {cell['ci95']:.3f} (n={cell['n']})")
    return 0


def cmd_taylor_check(args, cfg, run_dir: Path, chash: str) -> int:
    from .lm import init_lm
    from .lora import init_lora

    tokenizer = build_tokenizer(cfg)
    episodes = build_corpus(cfg, tokenizer)[: args.episodes]
    if getattr(args, "model", None) or (run_dir / "checkpoints" / "lm.json").exists():
        params = _load_model(args, run_dir)
    else:
        params = init_lm(model_config(cfg), seed=cfg["seed"], dtype=np.float64)
    etas = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4]
    results = []
    rng = np.random.default_rng(cfg["seed"])
    for ep in episodes:
        state = init_lora(params.cfg, rank=cfg["tta"]["rank"], alpha=cfg["tta"]["alpha"],
                          sigma=cfg["tta"]["init_sigma"], seed=cfg["seed"], dtype=np.float64)
        # a nonzero second factor gives the remainder term real curvature
        for bl in state.blocks:
            bl.b = rng.standard_normal(bl.b.shape) * 0.05
        residuals, slope = taylor_residual(params, state, ep, etas)
        results.append({"episode_id": ep.id, "residuals": residuals, "slope": slope})
    mean_slope = float(np.mean([r["slope"] for r in results]))
    blob = {"config_hash": chash, "etas": etas, "episodes": results, "mean_slope": mean_slope}
    (run_dir / "reports" / "taylor.json").write_text(json.dumps(blob, indent=2) + "\n")
    print(json.dumps({"mean_slope": mean_slope, "episodes": len(results)}))
    return 0


def _gradcheck_cases():
    rng = np.random.default_rng(0)
    a34 = rng.standard_normal((3, 4))
    b45 = rng.standard_normal((4, 5))
    c34 = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    logits = rng.standard_normal((4, 6))
    from .tensor import (
        clip, concat, cross_entropy_rows, gather_rows, rms_norm, softmax, softplus, tmean, tsum, transpose,
    )

    idx = np.array([1, 0, 2, 1])
    targets = np.array([2, 0, 5, 3])
    w44 = rng.standard_normal((4, 4))
    w38 = rng.standard_normal((3, 8))
    return [
        ("matmul", lambda x: tsum(x @ Tensor(b45)), a34),
        ("transpose", lambda x: tsum(transpose(x) @ Tensor(c34)), a34),
        ("add", lambda x: tsum(x + Tensor(c34)), a34),
        ("sub", lambda x: tsum(x - Tensor(c34)), a34),
        ("mul", lambda x: tsum(x * Tensor(c34)), a34),
        ("div", lambda x: tsum(x / Tensor(pos)), a34),
        ("scalar_ops", lambda x: tsum(x * 2.0 + 1.0), a34),
        ("pow", lambda x: tsum(x**3), pos),
        ("clip", lambda x: tsum(clip(x, -0.5, 0.5)), a34),
        ("softplus", lambda x: tsum(softplus(x)), a34),
        ("exp", lambda x: tsum(x.exp()), a34 * 0.5),
        ("log", lambda x: tsum(x.log()), pos),
        ("softmax", lambda x: tsum(softmax(x) * Tensor(c34)), a34),
        ("rms_norm", lambda x: tsum(rms_norm(x, 1e-6) * Tensor(c34)), a34),
        ("gather_rows", lambda x: tsum(gather_rows(x, idx) * Tensor(w44)), a34),
        ("cross_entropy_rows", lambda x: tsum(cross_entropy_rows(x, targets) * Tensor(np.array([0.3, 0.4, 0.2, 0.1]))), logits),
        ("sum", lambda x: tsum(x), a34),
        ("mean", lambda x: tmean(x) * 5.0, a34),
        ("concat", lambda x: tsum(concat([x, Tensor(c34)], axis=1) * Tensor(w38)), a34),
    ]


def cmd_gradcheck(args, cfg, run_dir: Path, chash: str) -> int:
    threshold = 1e-6
    results = []
    failed = []
    for name, fn, x0 in _gradcheck_cases():
        report = gradcheck(fn, x0.astype(np.float64))
        results.append({"op": name, "max_rel_err": report.max_rel_err})
        print(f"{name:>20}: max rel err {report.max_rel_err:.3e}")
        if not report.max_rel_err < threshold:
            failed.append(name)
    blob = {"config_hash": chash, "threshold": threshold, "results": results, "failed": failed}
    (run_dir / "reports" / "gradcheck.json").write_text(json.dumps(blob, indent=2) + "\n")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print("all primitives pass")
    return 0


# -- entry point ---------------------------------------------------------------------


def _common_flags(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted path)")
    sub.add_argument("--run-dir", help="run directory (default: $DYNTTA_RUN_ROOT/default or ./runs/default)")
    sub.add_argument("--workers", type=int, default=1, help="episode parallelism (default 1, deterministic)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyntta", description="Sample-specific dynamic test-time adaptation.")
    subs = parser.add_subparsers(dest="command", required=True)

    sp = subs.add_parser("pretrain", help="pretrain the base model on the training split")
    _common_flags(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = subs.add_parser("train-scalenet", help="meta-train a scale network")
    _common_flags(sp)
    sp.add_argument("--model", help="base model checkpoint (default <run>/checkpoints/lm.json)")
    sp.add_argument("--mode", choices=["layer-wise", "step-wise"], help="which head to train (default tta.mode)")
    sp.set_defaults(fn=cmd_train_scalenet)

    sp = subs.add_parser("adapt", help="run adapt-and-reset episodes and dump traces")
    _common_flags(sp)
    sp.add_argument("--model", help="base model checkpoint")
    sp.add_argument("--mode", choices=list(MODES), help="adaptation mode (default tta.mode)")
    sp.add_argument("--K", type=int, help="number of updates per episode (default tta.k_steps)")
    sp.add_argument("--limit", type=int, help="cap the number of episodes")
    sp.add_argument("--layerwise", help="layer-wise network checkpoint")
    sp.add_argument("--stepwise", help="step-wise network checkpoint")
    sp.set_defaults(fn=cmd_adapt)

    sp = subs.add_parser("eval", help="answer-NLL grid over modes and K")
    _common_flags(sp)
    sp.add_argument("--model", help="base model checkpoint")
    sp.add_argument("--modes", help="comma-separated modes (default eval.modes)")
    sp.add_argument("--K", help="K values: '0..5' or '0,1,3' (default eval.k_list)")
    sp.add_argument("--rouge", action="store_true", help="also report ROUGE-Lsum of greedy generations")
    sp.add_argument("--layerwise", help="layer-wise network checkpoint")
    sp.add_argument("--stepwise", help="step-wise network checkpoint")
    sp.set_defaults(fn=cmd_eval)

    sp = subs.add_parser("export-scales", help="render a scale heatmap from a trace file")
    _common_flags(sp)
    sp.add_argument("--from", dest="src", required=True, help="trace JSONL produced by `adapt`")
    sp.set_defaults(fn=cmd_export_scales)

    sp = subs.add_parser("consistency", help="compare scale schedules of different lengths")
    _common_flags(sp)
    sp.add_argument("--model", help="base model checkpoint")
    sp.add_argument("--layerwise", help="layer-wise network checkpoint")
    sp.set_defaults(fn=cmd_consistency)

    sp = subs.add_parser("taylor-check", help="first-order Taylor residual diagnostic")
    _common_flags(sp)
    sp.add_argument("--model", help="base model checkpoint (default: fresh init)")
    sp.add_argument("--episodes", type=int, default=3, help="episodes to test (default 3)")
    sp.set_defaults(fn=cmd_taylor_check)

    sp = subs.add_parser("gradcheck", help="finite-difference check of every tape primitive")
    _common_flags(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself; keep its code
        return int(exc.code or 0)
    try:
        cfg, chash = resolve_config(args)
        run_dir = run_directory(args, cfg)
        prepare_run_dir(run_dir, cfg, chash)
        return int(args.fn(args, cfg, run_dir, chash))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, DivergenceAbort, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
