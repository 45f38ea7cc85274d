"""Command-line front end: train, evaluate, sweep, trace, cost, gradcheck.

Every command reads a JSON config whose keys mirror TrainConfig field
names exactly (or a parameter file that embeds one), writes its artifact
into --out, and drops a run manifest next to it with everything needed to
reproduce the run: resolved config, seed, package version, output paths,
and a timestamp. Errors print a single ``error: ...`` line on stderr and
exit nonzero. MIST_THREADS caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import harness as hz
from . import numerics as nx
from .answer import qa_loss, score_answers
from .features import FeatureFormatError, generate_synthetic, save_features
from .ista import TRACE_SCHEMA, trace_to_json

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_EPS = 1e-4


class CliError(ValueError):
    """User-facing failure with a one-line message."""


def _load_config(path: str, seed: int | None) -> hz.TrainConfig:
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from e
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CliError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a JSON object")
    if seed is not None:
        data["seed"] = seed
    try:
        return hz.TrainConfig.from_dict(data)
    except hz.ConfigError as e:
        raise CliError(str(e)) from e


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, tc: hz.TrainConfig,
                    outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": tc.to_dict(),
        "seed": tc.seed,
        "version": __version__,
        "outputs": sorted(p.name for p in outputs),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(args) -> int:
    tc = _load_config(args.config, args.seed)
    out = _out_dir(args)
    params, log = hz.train(tc)
    params_path = out / "model.params"
    hz.save_params(params_path, tc, params)
    metrics_path = out / "metrics.csv"
    hz.write_metrics_csv(log, metrics_path)
    _write_manifest(out, "train", tc, [params_path, metrics_path],
                    {"final_accuracy": log.accuracy,
                     "final_hit_rate": log.hit_rate,
                     "wall_time_s": log.wall_time_s})
    print(f"trained {tc.steps} steps: accuracy {log.accuracy:.4f}, "
          f"hit-rate {log.hit_rate:.4f}")
    return 0


def cmd_eval(args) -> int:
    tc, params = hz.load_params(args.params)
    out = _out_dir(args)
    log = hz.evaluate(params, tc, args.n, seed=args.seed
                      if args.seed is not None else tc.seed)
    metrics_path = out / "metrics.csv"
    hz.write_metrics_csv(log, metrics_path)
    _write_manifest(out, "eval", tc, [metrics_path],
                    {"n_samples": args.n, "accuracy": log.accuracy,
                     "hit_rate": log.hit_rate})
    print(f"evaluated {args.n} samples: accuracy {log.accuracy:.4f}, "
          f"hit-rate {log.hit_rate:.4f}")
    return 0


def _parse_values(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise CliError(f"--values must be comma-separated integers: {e}") from e


def cmd_sweep(args) -> int:
    tc = _load_config(args.config, args.seed)
    out = _out_dir(args)
    values = _parse_values(args.values)
    seeds = _parse_values(args.seeds)
    try:
        rows = hz.sweep(tc, args.axis, values, seeds=tuple(seeds))
    except hz.ConfigError as e:
        raise CliError(str(e)) from e
    sweep_path = out / "sweep.csv"
    hz.write_sweep_csv(rows, sweep_path)
    _write_manifest(out, "sweep", tc, [sweep_path],
                    {"axis": args.axis, "values": values, "seeds": seeds})
    print(f"swept {args.axis} over {values}: {len(rows)} runs")
    return 0


def cmd_trace(args) -> int:
    tc, params = hz.load_params(args.params)
    if tc.model != "mist" or tc.ablation != "none":
        raise CliError("trace requires a full mist model "
                       f"(got model={tc.model!r}, ablation={tc.ablation!r})")
    out = _out_dir(args)
    sample = generate_synthetic(tc.synth_config(),
                                (hz._TAG_EVAL, tc.seed, args.sample_seed))
    with nx.no_grad():
        x_o, traces = hz.model_forward(tc, params, sample)
        scores = score_answers(x_o, sample.answers, cosine=tc.cosine_scores)
    doc = trace_to_json(traces)
    jsonschema.validate(doc, TRACE_SCHEMA)
    trace_path = out / "trace.json"
    trace_path.write_text(json.dumps(doc, indent=2) + "\n")
    _write_manifest(out, "trace", tc, [trace_path],
                    {"sample_seed": args.sample_seed,
                     "label": sample.label,
                     "predicted": int(np.argmax(scores.data))})
    print(f"traced sample {args.sample_seed}: label {sample.label}, "
          f"predicted {int(np.argmax(scores.data))}")
    return 0


def cmd_cost(args) -> int:
    tc = _load_config(args.config, args.seed)
    out = _out_dir(args)
    report = hz.cost_estimate(tc)
    dense = hz.cost_estimate(dataclasses.replace(tc, model="trans_patch",
                                                 ablation="none"))
    doc = report.to_dict()
    doc["n_dense"] = dense.tokens["joint"]
    if not report.quadratic_macs:
        doc["quadratic_ratio"] = None
    cost_path = out / "cost.json"
    cost_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "cost", tc, [cost_path])
    print(f"{report.kind}: {report.total_macs} MACs, "
          f"joint site {report.tokens.get('joint', 0)} tokens")
    return 0


def cmd_gradcheck(args) -> int:
    tc = _load_config(args.config, args.seed)
    out = _out_dir(args)
    params = hz.init_model(tc)
    named = hz.model_named_parameters(params)
    if not named:
        raise CliError(f"model {tc.model!r} has no parameters to check")
    sample = generate_synthetic(tc.synth_config(), (hz._TAG_EVAL, tc.seed, 0))
    noise_key = (tc.seed, 0, 0)

    def loss_fn():
        x_o, _ = hz.model_forward(tc, params, sample, noise_key=noise_key,
                                  hard=False)
        scores = score_answers(x_o, sample.answers, cosine=tc.cosine_scores)
        return qa_loss(scores, sample.label)

    t0 = time.perf_counter()
    report = nx.grad_check(loss_fn, named, eps=GRADCHECK_EPS)
    elapsed = time.perf_counter() - t0
    passed = report.passed(GRADCHECK_TOLERANCE)
    doc = {
        "passed": passed,
        "tolerance": GRADCHECK_TOLERANCE,
        "eps": report.eps,
        "max_rel_error": report.max_rel_error,
        "worst_param": report.worst_param,
        "worst_index": report.worst_index,
        "analytic": report.analytic,
        "numeric": report.numeric,
        "n_evals": report.n_evals,
        "elapsed_s": elapsed,
        "per_param": report.per_param,
    }
    report_path = out / "gradcheck.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "gradcheck", tc, [report_path])
    print(f"gradcheck {'passed' if passed else 'FAILED'}: max rel error "
          f"{report.max_rel_error:.3e} ({report.n_evals} evals, "
          f"{elapsed:.1f}s)")
    return 0 if passed else 1


def cmd_synth(args) -> int:
    tc = _load_config(args.config, args.seed)
    out = _out_dir(args)
    scfg = tc.synth_config()
    written = []
    for i in range(args.count):
        sample = generate_synthetic(scfg, tc.seed + i)
        path = out / f"sample_{tc.seed + i}.mistfeat"
        save_features(sample.video, sample.question, sample.answers, path)
        written.append(path)
    _write_manifest(out, "synth", tc, written, {"count": args.count})
    print(f"wrote {args.count} feature file(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mist",
        description="Question-conditioned cascaded selection over video "
                    "features: training, evaluation, and analysis.")
    parser.add_argument("--version", action="version",
                        version=f"mist {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--out", default=".",
                       help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        return p

    p = add("train", cmd_train, "train a model from a JSON config")
    p.add_argument("config")

    p = add("eval", cmd_eval, "evaluate a saved parameter file")
    p.add_argument("params")
    p.add_argument("--n", type=int, default=200, help="evaluation samples")

    p = add("sweep", cmd_sweep, "train across one swept config axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True,
                   choices=sorted(hz.SWEEP_AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated integer axis values")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated seeds (default 0,1,2)")

    p = add("trace", cmd_trace, "emit selection traces for one eval sample")
    p.add_argument("params")
    p.add_argument("--sample-seed", type=int, default=0,
                   help="eval sample index to trace")

    p = add("cost", cmd_cost, "closed-form cost report for a config")
    p.add_argument("config")

    p = add("gradcheck", cmd_gradcheck,
            "finite-difference gradient check on a config")
    p.add_argument("config")

    p = add("synth", cmd_synth, "write synthetic feature files")
    p.add_argument("config")
    p.add_argument("--count", type=int, default=1,
                   help="number of samples to write")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, hz.ConfigError, hz.ParamsFormatError,
            hz.DivergenceError, FeatureFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
