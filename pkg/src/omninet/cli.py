"""Command-line entry point.

Subcommands: train, eval, grad-check, parity-check, attn-dump, bench.

Configuration is a single strict JSON document (unknown keys are rejected);
`--set key=value` overrides scalar leaves by dotted path, and the OMNINET_SEED
environment variable takes precedence over both for the seed. Exit codes:
0 ok, 1 check failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import (
    FD_NOISE_FLOOR,
    ParamSet,
    Tape,
    backward,
    compare_grads,
    finite_diff_grad,
)
from .bench import run_bench, write_csv
from .efficient import (
    Backend,
    BlockSparseBackend,
    ExactBackend,
    KernelBackend,
    LowRankBackend,
)
from .model import (
    ModelConfig,
    OmniLayerDiag,
    forward_classifier,
    forward_lm,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .omni import ConfigError
from .parity import run_parity_checks
from .tensor import DegenerateNormalizerError, FiniteError
from .train import (
    CHAR_LM_VOCAB,
    OptimConfig,
    TaskSpec,
    TrainError,
    TrainSettings,
    evaluate,
    example_loss,
    load_pools,
    train_model,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

GRAD_CHECK_PARAM_CAP = 50_000
GRAD_CHECK_TOL = 1e-4


# --- strict config parsing ---------------------------------------------------


def _take(doc: dict, section: str, keys: dict) -> dict:
    """Apply defaults and reject unknown keys. `keys` maps name -> default
    (REQUIRED sentinel for mandatory keys)."""
    unknown = set(doc) - set(keys)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")
    out = {}
    for key, default in keys.items():
        if key in doc:
            out[key] = doc[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {section}.{key}")
        else:
            out[key] = default
    return out


REQUIRED = object()

BACKEND_DEFAULTS = {
    "exact": {},
    "kernel": {"feature": "relu"},
    "lowrank": {"k": 32},
    "blocksparse": {
        "block_size": 4,
        "num_random_blocks": 3,
        "num_global_blocks": 1,
        "window_blocks": 1,
        "rng_seed": 0,
    },
}


def parse_backend(doc: dict) -> Backend:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError("model.backend must be an object with a 'kind'")
    kind = doc["kind"]
    if kind not in BACKEND_DEFAULTS:
        raise ConfigError(f"unknown backend kind {kind!r}")
    fields = _take(
        {k: v for k, v in doc.items() if k != "kind"},
        f"model.backend({kind})",
        {k: v for k, v in BACKEND_DEFAULTS[kind].items()},
    )
    cls = {
        "exact": ExactBackend,
        "kernel": KernelBackend,
        "lowrank": LowRankBackend,
        "blocksparse": BlockSparseBackend,
    }[kind]
    return cls(**fields)


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    model: ModelConfig
    task: TaskSpec
    optim: OptimConfig
    train: TrainSettings
    doc: dict  # resolved document (defaults applied), echoed into checkpoints


def parse_run_config(doc: dict) -> RunConfig:
    top = _take(
        doc,
        "config",
        {
            "seed": 0,
            "out_dir": "out",
            "model": REQUIRED,
            "task": REQUIRED,
            "optim": {},
            "train": {},
        },
    )
    seed = int(top["seed"])

    model_doc = _take(
        top["model"],
        "model",
        {
            "vocab_size": REQUIRED,
            "d_model": REQUIRED,
            "n_heads": REQUIRED,
            "d_ff": REQUIRED,
            "n_layers": REQUIRED,
            "partition": REQUIRED,
            "max_len": REQUIRED,
            "backend": {"kind": "exact"},
            "task": "lm",
            "n_classes": 0,
            "dropout_rate": 0.0,
            "ln_placement": "as-paper",
            "include_embeddings": False,
            "omni_residual": True,
            "layer_embedding": False,
        },
    )
    backend = parse_backend(model_doc["backend"])
    model = ModelConfig(**{**model_doc, "backend": backend})

    task_doc = _take(
        top["task"],
        "task",
        {
            "kind": REQUIRED,
            "seq_len": REQUIRED,
            "vocab_size": REQUIRED,
            "train_size": 256,
            "eval_size": 32,
            "path": None,
            "mark_pos": None,
        },
    )
    task = TaskSpec(seed=seed, **task_doc)

    optim_doc = _take(
        top["optim"],
        "optim",
        {
            "lr": 3e-4,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "weight_decay": 0.0,
            "warmup_steps": 200,
            "max_steps": 2000,
            "schedule": "warmup-linear",
        },
    )
    optim = OptimConfig(**optim_doc)

    train_doc = _take(
        top["train"],
        "train",
        {
            "batch_size": 8,
            "eval_every": 200,
            "stop_accuracy": None,
            "stop_loss": None,
        },
    )
    train = TrainSettings(**train_doc)

    backend_echo = {"kind": backend.kind}
    backend_echo.update({k: getattr(backend, k) for k in BACKEND_DEFAULTS[backend.kind]})
    resolved = {
        "seed": seed,
        "out_dir": top["out_dir"],
        "model": {**model_doc, "backend": backend_echo},
        "task": task_doc,
        "optim": optim_doc,
        "train": train_doc,
    }
    return RunConfig(seed, str(top["out_dir"]), model, task, optim, train, resolved)


def apply_overrides(doc: dict, pairs: list[str]) -> dict:
    """Apply --set key=value overrides (dotted paths, JSON-parsed values)."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return doc


def load_run_config(path: str, overrides: list[str]) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    apply_overrides(doc, overrides)
    env_seed = os.environ.get("OMNINET_SEED")
    if env_seed is not None:
        doc["seed"] = int(env_seed)
    return parse_run_config(doc)


# --- diagnostic export -------------------------------------------------------


def write_pgm(path: Path, image: np.ndarray) -> None:
    """ASCII (P2) portable graymap, values scaled linearly to 0..255."""
    peak = float(image.max())
    scaled = np.zeros_like(image) if peak <= 0 else image / peak * 255.0
    pixels = np.rint(scaled).astype(int)
    height, width = pixels.shape
    lines = [f"P2", f"{width} {height}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pixels]
    path.write_text("\n".join(lines) + "\n")


def _json_ready(obj):
    if isinstance(obj, np.ndarray):
        return [_json_ready(row) for row in obj.tolist()] if obj.ndim > 1 else obj.tolist()
    return obj


def export_attention_dump(
    out_dir: Path,
    diag: list[OmniLayerDiag],
    query_row_of: dict[int, int],
    n_rows: int,
    query_label,
) -> None:
    """Write attention.json, pooling.json and one PGM heatmap per layer/head."""
    out_dir.mkdir(parents=True, exist_ok=True)
    attention_doc = {"query": query_label, "n_tokens": n_rows, "layers": []}
    pooling_doc = {"layers": []}
    for d in diag:
        g = len(d.consumed)
        heads = []
        for h, full in enumerate(d.maps):
            row = full[query_row_of[d.layer]]
            grid = row.reshape(n_rows, g).T  # layers x positions
            heads.append({"head": h, "weights": _json_ready(grid)})
            write_pgm(out_dir / f"attn_layer{d.layer}_head{h}.pgm", grid)
        attention_doc["layers"].append(
            {
                "layer": d.layer,
                "consumed_layer_ids": list(d.consumed),
                "heads": heads,
            }
        )
        pooling_doc["layers"].append(
            {
                "layer": d.layer,
                "consumed_layer_ids": list(d.consumed),
                "fractions": _json_ready(d.pool.fractions),
            }
        )
    (out_dir / "attention.json").write_text(
        json.dumps(attention_doc, sort_keys=True, indent=2) + "\n"
    )
    (out_dir / "pooling.json").write_text(
        json.dumps(pooling_doc, sort_keys=True, indent=2) + "\n"
    )


# --- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = out_dir / "config.json"
    if Path(args.config).resolve() != echo.resolve():
        shutil.copyfile(args.config, echo)  # verbatim echo
    metrics_path = out_dir / "metrics.jsonl"
    with metrics_path.open("w") as fh:

        def on_eval(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            print(
                f"step {record['step']}: loss {record['loss']:.4f} "
                f"acc {record['accuracy']:.4f} ppl {record['perplexity']:.4f}",
                file=sys.stderr,
            )

        result = train_model(cfg.model, cfg.task, cfg.optim, cfg.train, cfg.seed, on_eval)
    save_checkpoint(out_dir / "model.ckpt", cfg.doc, result.params)
    print(json.dumps(result.final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    doc, params = load_checkpoint(args.checkpoint)
    cfg = parse_run_config(doc)
    metrics = evaluate(params, cfg.model, cfg.task)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    from .model import init_params
    from .tensor import Rng

    params = init_params(cfg.model, Rng(cfg.seed).stream_named("init"))
    total = params.total_size()
    if total > GRAD_CHECK_PARAM_CAP:
        print(
            f"config too large for finite differences: {total} parameters "
            f"(cap {GRAD_CHECK_PARAM_CAP})",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    _, _, eval_x, eval_y = load_pools(cfg.task)
    x, y = eval_x[0], eval_y[0]

    def loss_value(ps: ParamSet) -> float:
        tape = Tape()
        return float(example_loss(tape, ps, cfg.model, x, y).value)

    tape = Tape()
    loss = example_loss(tape, params, cfg.model, x, y)
    got = backward(loss)
    want = finite_diff_grad(loss_value, params)
    report_by_param = compare_grads(got, want)
    worst = max(report_by_param.values())
    report = {
        "tolerance": GRAD_CHECK_TOL,
        "noise_floor": FD_NOISE_FLOOR,
        "n_parameters": total,
        "max_rel_err": worst,
        "passed": bool(worst <= GRAD_CHECK_TOL),
        "parameters": [
            {"name": name, "rel_err": err} for name, err in sorted(report_by_param.items())
        ],
    }
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def cmd_parity_check(args) -> int:
    reports = run_parity_checks(seed=args.seed, corrupt_scale=args.corrupt_scale)
    text = json.dumps(reports, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    failures = [r["check"] for r in reports if not r["passed"]]
    if failures:
        print(f"parity failures: {', '.join(failures)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_attn_dump(args) -> int:
    doc, params = load_checkpoint(args.checkpoint)
    cfg = parse_run_config(doc)
    backend = cfg.model.backend
    if isinstance(backend, ExactBackend):
        map_mode = "native"
    elif args.dense_oracle:
        map_mode = "dense-oracle"
    else:
        raise ConfigError(
            f"checkpoint backend is {backend.kind!r}; attention maps need the exact "
            "backend or --dense-oracle"
        )
    _, _, eval_x, eval_y = load_pools(cfg.task)
    if not 0 <= args.sample_index < eval_x.shape[0]:
        raise ConfigError(f"sample index {args.sample_index} outside eval pool")
    tokens = eval_x[args.sample_index]
    diag: list[OmniLayerDiag] = []
    tape = Tape()
    if cfg.model.task == "lm":
        forward_lm(tape, params, cfg.model, tokens, diag=diag, map_mode=map_mode)
        n_rows = tokens.size
    else:
        forward_classifier(tape, params, cfg.model, tokens, diag=diag, map_mode=map_mode)
        n_rows = tokens.size + 1
    if args.query == "cls":
        if cfg.model.task != "classifier":
            raise ConfigError("query 'cls' needs a classifier checkpoint")
        query_token = 0
        query_label = "cls"
    else:
        query_token = int(args.query)
        if not 0 <= query_token < n_rows:
            raise ConfigError(f"query position {query_token} outside {n_rows} rows")
        query_label = query_token
    # the query is the token's row in the deepest consumed layer of each block
    query_row_of = {
        d.layer: query_token * len(d.consumed) + len(d.consumed) - 1 for d in diag
    }
    export_attention_dump(Path(args.out), diag, query_row_of, n_rows, query_label)
    print(f"wrote attention.json, pooling.json and {sum(len(d.maps) for d in diag)} "
          f"heatmaps to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    backend_map = {
        "exact": ExactBackend(),
        "kernel": KernelBackend(),
        "lowrank": LowRankBackend(k=args.lowrank_k),
        "blocksparse": BlockSparseBackend(block_size=args.block_size, rng_seed=args.seed),
    }
    try:
        backends = [backend_map[name] for name in args.backends.split(",")]
    except KeyError as exc:
        raise ConfigError(f"unknown backend {exc.args[0]!r}") from exc
    lengths = [int(v) for v in args.lengths.split(",")]
    partitions = [int(v) for v in args.partitions.split(",")]
    records, skipped = run_bench(
        lengths,
        backends,
        partitions,
        repeats=args.repeats,
        n_layers=args.n_layers,
        d_k=args.d_k,
        seed=args.seed,
    )
    for reason in skipped:
        print(f"skipped: {reason}", file=sys.stderr)
    write_csv(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omninet",
        description="Train and inspect desk-scale omnidirectional-attention transformers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on its task")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_grad = sub.add_parser("grad-check", help="finite-difference gradient certification")
    p_grad.add_argument("--config", required=True)
    p_grad.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_grad.add_argument("--out", help="write the JSON report here as well")
    p_grad.set_defaults(fn=cmd_grad_check)

    p_par = sub.add_parser("parity-check", help="backend-vs-oracle parity suite")
    p_par.add_argument("--seed", type=int, default=0)
    p_par.add_argument("--out", help="write the JSON report here as well")
    p_par.add_argument("--corrupt-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p_par.set_defaults(fn=cmd_parity_check)

    p_dump = sub.add_parser("attn-dump", help="export attention maps and pooling stats")
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--query", default="cls", help="'cls' or a position index")
    p_dump.add_argument("--sample-index", type=int, default=0)
    p_dump.add_argument("--dense-oracle", action="store_true",
                        help="materialize maps for kernel/blocksparse backends")
    p_dump.set_defaults(fn=cmd_attn_dump)

    p_bench = sub.add_parser("bench", help="time attention backends and count MACs")
    p_bench.add_argument("--lengths", default="64,128,256")
    p_bench.add_argument("--backends", default="exact,kernel,lowrank,blocksparse")
    p_bench.add_argument("--partitions", default="1")
    p_bench.add_argument("--repeats", type=int, default=5)
    p_bench.add_argument("--n-layers", type=int, default=12)
    p_bench.add_argument("--d-k", type=int, default=16)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--lowrank-k", type=int, default=32)
    p_bench.add_argument("--block-size", type=int, default=4)
    p_bench.add_argument("--out", default="bench.csv")
    p_bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainError, FiniteError, DegenerateNormalizerError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
