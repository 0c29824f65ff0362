"""Command-line surface: train, ptq, eval, analyze, grid.

Exit codes are a stable contract: 0 success, 2 configuration/input error,
3 numerical failure (divergence, singular calibration Hessian).

Run directory layout written by ``train``:

    config.toml        resolved configuration (rerunnable)
    checkpoints/       final/ (and step*/ at checkpoint_interval)
    dumps/             activation dumps from the probe batch
    metrics.ndjson     one JSON record per log interval
    reports/           training-curve figure

``analyze`` and ``grid`` write delimited reports (CSV + JSON) with PNG
figures next to them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import load_corpus
from .errors import ConfigError, InputError, LowbitError, NumericalError
from .figures import (
    channel_trajectory_figure,
    grid_figure,
    outlier_fraction_figure,
    training_curves_figure,
)
from .model import TransformerLM
from .outliers import scan_dump_dir, trajectory_report, write_report
from .ptq import (
    PTQPlan,
    apply_ptq,
    load_quantized_checkpoint,
    save_quantized_checkpoint,
)
from .serialize import MANIFEST_NAME, load_checkpoint
from .train import eval_perplexity, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# Table-style grid: two native-activation columns, four 4-bit-activation
# columns over weight precision x quantizer
GRID_COLUMNS = (
    {"section": "native", "wbits": 16, "method": "none"},
    {"section": "native", "wbits": 4, "method": "gptq"},
    {"section": "a4", "wbits": 4, "method": "gptq"},
    {"section": "a4", "wbits": 4, "method": "rtn"},
    {"section": "a4", "wbits": 3, "method": "gptq"},
    {"section": "a4", "wbits": 3, "method": "rtn"},
)


def column_label(col: dict) -> str:
    acts = "native" if col["section"] == "native" else "4b"
    quant = {"none": "None", "rtn": "RTN", "gptq": "GPTQ"}[col["method"]]
    return f"{acts} W{col['wbits']}/{quant}"


def _load_any_checkpoint(path):
    manifest = Path(path) / MANIFEST_NAME
    if not manifest.exists():
        raise InputError(f"no checkpoint manifest under {path}")
    kind = json.loads(manifest.read_text()).get("format")
    if kind == "lowbit-ptq-checkpoint":
        model, _ = load_quantized_checkpoint(path)
        return model
    model, _, _, _ = load_checkpoint(path)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    corpus_path = cfg["data.corpus"]
    if not corpus_path:
        raise ConfigError("data.corpus is not set (use --set data.corpus=PATH)")
    run_dir = Path(args.out or cfg["run.dir"]
                   or Path("runs") / Path(args.config).stem)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(cfg.to_toml())

    tokens = load_corpus(corpus_path)
    eval_tokens = None
    if cfg["data.eval_corpus"]:
        eval_tokens = load_corpus(cfg["data.eval_corpus"])

    model = TransformerLM(cfg.model_config())
    if args.init_from:
        source = _load_any_checkpoint(args.init_from)
        for name, t in model.params.items():
            if name in source.params and t.data.shape == source.params[name].data.shape:
                t.data = source.params[name].data.copy()
        print(f"initialized weights from {args.init_from}")

    metrics, ckpt = train(model, cfg.train_config(), tokens,
                          eval_tokens=eval_tokens, run_dir=run_dir)
    training_curves_figure(metrics, run_dir / "reports" / "training_curves.png")
    final = metrics[-1]
    print(f"run dir: {run_dir}")
    print(f"final step {final['step']}: loss {final['loss']:.4f} "
          f"ppl {final['ppl']:.3f} eval_ppl {final.get('eval_ppl', float('nan')):.3f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_ptq(args) -> int:
    plan = PTQPlan(weight_bits=args.wbits, weight_method=args.wmethod,
                   act_bits=args.abits, calib_tokens=args.calib_tokens,
                   damping=args.damping)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    calib = load_corpus(args.calib) if args.calib else None
    if plan.weight_method == "gptq" and calib is None:
        raise ConfigError("--wmethod gptq requires --calib CORPUS")
    converted, qlayers = apply_ptq(model, plan, calib_tokens_stream=calib)
    out = Path(args.out)
    save_quantized_checkpoint(out, converted, plan, qlayers)
    print(f"wrote quantized checkpoint ({plan.label()}) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_any_checkpoint(args.checkpoint)
    tokens = load_corpus(args.corpus)
    ppl = eval_perplexity(model, tokens)
    record = {
        "checkpoint": str(args.checkpoint),
        "corpus": str(args.corpus),
        "seq_len": model.cfg.seq_len,
        "act_mode": model.act_mode,
        "perplexity": ppl,
    }
    print(f"perplexity: {ppl:.6f}")
    print(json.dumps(record, sort_keys=True))
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    paths = scan_dump_dir(args.dumps)
    if not paths:
        raise InputError(f"no .actd dumps under {args.dumps}")
    channels, summary = trajectory_report(paths, threshold=args.threshold)
    out = Path(args.out)
    files = write_report(out, channels, summary)
    figures = [outlier_fraction_figure(summary, out / "outlier_fractions.png")]
    seen = {(r["site"], r["layer"]) for r in summary}
    for site, layer in sorted(seen):
        slug = site.lower().replace(" ", "_")
        figures.append(channel_trajectory_figure(
            channels, site, layer, out / f"channels_{slug}_l{layer}.png"))
    print(f"report: {files['channels_csv']}")
    print(f"report: {files['summary_csv']}")
    print(f"report: {files['report_json']}")
    for fig in figures:
        print(f"figure: {fig}")
    return EXIT_OK


def _grid_native_bits(model: TransformerLM) -> int:
    return 4 if model.clips else 16


def cmd_grid(args) -> int:
    runs = []
    for item in args.run:
        if "=" not in item:
            raise ConfigError(f"--run expects LABEL=CHECKPOINT, got {item!r}")
        label, path = item.split("=", 1)
        runs.append((label, path))
    if not runs:
        raise ConfigError("at least one --run LABEL=CHECKPOINT is required")
    tokens = load_corpus(args.corpus)
    calib = load_corpus(args.calib) if args.calib else tokens

    labels = []
    matrix = []
    for label, path in runs:
        model, _, _, _ = load_checkpoint(path)
        native_bits = _grid_native_bits(model)
        cache: dict[tuple, float] = {}
        row = []
        for col in GRID_COLUMNS:
            act_bits = native_bits if col["section"] == "native" else 4
            key = (col["wbits"], col["method"], act_bits)
            if key not in cache:
                plan = PTQPlan(weight_bits=col["wbits"],
                               weight_method=col["method"],
                               act_bits=act_bits,
                               calib_tokens=args.calib_tokens,
                               damping=args.damping)
                converted, _ = apply_ptq(model, plan, calib_tokens_stream=calib)
                cache[key] = eval_perplexity(converted, tokens)
            row.append(cache[key])
        labels.append(label)
        matrix.append(row)
        print(f"{label}: " + "  ".join(
            f"{column_label(c)}={v:.4g}" for c, v in zip(GRID_COLUMNS, row)))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    col_labels = [column_label(c) for c in GRID_COLUMNS]
    with open(out / "grid.csv", "w") as fh:
        fh.write("method," + ",".join(col_labels) + "\n")
        for label, row in zip(labels, matrix):
            fh.write(label + "," + ",".join(f"{v:.8g}" for v in row) + "\n")
    (out / "grid.json").write_text(json.dumps({
        "schema_version": 1,
        "columns": [dict(c, label=column_label(c)) for c in GRID_COLUMNS],
        "rows": labels,
        "perplexity": matrix,
    }, sort_keys=True))
    grid_figure(labels, col_labels, matrix, out / "grid.png")
    print(f"grid: {out / 'grid.csv'}")
    print(f"grid: {out / 'grid.json'}")
    print(f"figure: {out / 'grid.png'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowbit",
        description="Quantization-aware training and post-training "
                    "quantization for a desk-scale transformer LM.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="TOML-subset config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--init-from", default=None, metavar="CHECKPOINT",
                   help="initialize weights from an existing checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ptq", help="convert a checkpoint to a quantized one")
    p.add_argument("checkpoint", help="trained checkpoint directory")
    p.add_argument("--wbits", type=int, choices=(3, 4, 16), required=True)
    p.add_argument("--wmethod", choices=("rtn", "gptq", "none"), required=True)
    p.add_argument("--abits", type=int, choices=(4, 16), required=True)
    p.add_argument("--calib", default=None, help="calibration corpus (gptq)")
    p.add_argument("--calib-tokens", type=int, default=4096)
    p.add_argument("--damping", type=float, default=0.01)
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.set_defaults(fn=cmd_ptq)

    p = sub.add_parser("eval", help="evaluate perplexity of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--json", default=None, help="also write the record here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="channel statistics report from dumps")
    p.add_argument("dumps", help="directory containing .actd dumps")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=6.0)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("grid", help="perplexity matrix over quantization plans")
    p.add_argument("--run", action="append", default=[], metavar="LABEL=CKPT")
    p.add_argument("--corpus", required=True)
    p.add_argument("--calib", default=None)
    p.add_argument("--calib-tokens", type=int, default=4096)
    p.add_argument("--damping", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LowbitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
