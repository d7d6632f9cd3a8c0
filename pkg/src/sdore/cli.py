"""Command-line entry point.

Subcommands:

* ``run <config.json>`` — execute a configured experiment and write the
  report, histories, checkpoints and plot-data files to the output
  directory.
* ``gradcheck [--seed N] [--nets N]`` — run the autodiff/training
  self-check suite; exit 0 iff every check is within tolerance.
* ``list`` — print the built-in experiment registry with defaults.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
The full config schema is documented in docs/config_schema.md.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .checks import run_gradcheck
from .errors import ConfigError, ContractViolation
from .experiments import run_experiment_def, variant_label, write_plot_data
from .model import save_checkpoint
from .problems import REGISTRY, build_experiment
from .training import LossSpec


@dataclass
class RunConfig:
    """Parsed, validated run configuration; round-trips through to_dict."""

    experiment: str
    seeds: list[int] = field(default_factory=lambda: [0])
    overrides: dict = field(default_factory=dict)
    variants: list[dict] | None = None
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    output_dir: str | None = None

    _TOP_KEYS = ("experiment", "seeds", "overrides", "variants", "train",
                 "eval", "network", "output_dir")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(doc) - set(cls._TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        if "experiment" not in doc:
            raise ConfigError("missing required field 'experiment'")
        exp = doc["experiment"]
        if not isinstance(exp, str) or exp not in REGISTRY:
            raise ConfigError(
                f"field 'experiment': unknown experiment {exp!r}; "
                f"known: {sorted(REGISTRY)}")
        seeds = doc.get("seeds", [0])
        if (not isinstance(seeds, list) or not seeds
                or not all(isinstance(s, int) for s in seeds)):
            raise ConfigError("field 'seeds': need a nonempty list of integers")
        for section in ("overrides", "train", "eval", "network"):
            if not isinstance(doc.get(section, {}), dict):
                raise ConfigError(f"field '{section}': must be an object")
        variants = doc.get("variants")
        if variants is not None:
            if not isinstance(variants, list) or not variants:
                raise ConfigError("field 'variants': need a nonempty list")
            for i, v in enumerate(variants):
                if not isinstance(v, dict) or "variant" not in v:
                    raise ConfigError(
                        f"field 'variants[{i}]': missing required field 'variant'")
                if "lambda" not in v and v["variant"] != "LS":
                    raise ConfigError(
                        f"field 'variants[{i}]': missing required field 'lambda'")
        out_dir = doc.get("output_dir")
        if out_dir is not None and not isinstance(out_dir, str):
            raise ConfigError("field 'output_dir': must be a string")
        return cls(experiment=exp, seeds=list(seeds),
                   overrides=dict(doc.get("overrides", {})),
                   variants=variants, train=dict(doc.get("train", {})),
                   eval=dict(doc.get("eval", {})),
                   network=dict(doc.get("network", {})),
                   output_dir=out_dir)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seeds": list(self.seeds),
            "overrides": dict(self.overrides),
            "variants": self.variants,
            "train": dict(self.train),
            "eval": dict(self.eval),
            "network": dict(self.network),
            "output_dir": self.output_dir,
        }


def _apply_section(instance, section: dict, name: str):
    """Overlay a config section onto a dataclass instance, field-checked."""
    valid = {f.name for f in fields(instance)}
    for key, value in section.items():
        attr = "lam" if key == "lambda" else key
        if attr not in valid:
            raise ConfigError(f"field '{name}.{key}': unknown option")
        if isinstance(value, list) and isinstance(getattr(instance, attr), tuple):
            value = tuple(value)
        setattr(instance, attr, value)
    revalidate = getattr(instance, "__post_init__", None)
    if revalidate is not None:
        try:
            revalidate()
        except ContractViolation as exc:
            raise ConfigError(f"section '{name}': {exc}") from exc
    return instance


def _resolve(config: RunConfig):
    exp = build_experiment(config.experiment, config.overrides)
    if config.variants is not None:
        parsed = []
        for i, v in enumerate(config.variants):
            try:
                parsed.append(LossSpec(v["variant"], v.get("lambda", 0.0)))
            except (ContractViolation, ValueError) as exc:
                raise ConfigError(f"field 'variants[{i}]': {exc}") from exc
        exp.variants = parsed
    if config.train:
        _apply_section(exp.train, config.train, "train")
    if config.eval:
        _apply_section(exp.eval, config.eval, "eval")
    if config.network:
        _apply_section(exp.network, config.network, "network")
    return exp


def cmd_run(config_path: str, output_dir: str | None, threads: int) -> int:
    try:
        raw = Path(config_path).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"config error: cannot read {config_path}: {exc}", file=sys.stderr)
        return 2
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        print(f"config error: {config_path} is not valid JSON: {exc}", file=sys.stderr)
        return 2
    try:
        config = RunConfig.from_dict(doc)
        exp = _resolve(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    outdir = Path(output_dir or config.output_dir or f"results/{config.experiment}")
    echo = config.to_dict()
    echo["output_dir"] = str(outdir)
    started = time.time()
    result = run_experiment_def(exp, config.seeds, threads=threads, config_echo=echo)
    runtime = time.time() - started

    outdir.mkdir(parents=True, exist_ok=True)
    report = result.report
    report.validate_aggregates()
    report.to_csv(outdir / "report.csv")
    problem = exp.problem
    extra = {
        "runtime_seconds": runtime,
        "threads": threads,
        "sigma_provenance": {
            "source": "snr" if problem.snr is not None else "sigma",
            "snr": problem.snr,
            "sigma": report.sigma,
        },
    }
    report.to_json(outdir / "report.json", extra)
    for spec in exp.variants:
        label = variant_label(spec)
        for seed in config.seeds:
            model, history = result.fits[(label, seed)]
            history.to_csv(outdir / f"history_{label}_seed{seed}.csv")
            save_checkpoint(model, outdir / f"model_{label}_seed{seed}.ckpt")
            kind = {"curve1d": "curve", "inverse": "field"}.get(problem.eval_kind,
                                                                "norms")
            write_plot_data(problem, model, exp.eval,
                            outdir / f"{kind}_{label}_seed{seed}.csv")
    print(f"wrote {outdir}/report.csv and report.json "
          f"({len(report.rows)} rows, {runtime:.1f}s)")
    for label, agg in report.aggregates.items():
        bits = ", ".join(f"{k}={v['mean']:.4g}" for k, v in sorted(agg.items())
                         if k in ("rmse", "rel_l2_f", "rel_l2_grad", "rel_l2_source",
                                  "selection_error"))
        print(f"  {label}: {bits}")
    return 0


def cmd_gradcheck(seed: int, nets: int) -> int:
    result = run_gradcheck(seed=seed, nets=nets)
    for line in result.lines():
        print(line)
    if result.skipped:
        print(f"(skipped {result.skipped} nets without kink clearance)")
    if not result.passed:
        for failure in result.failures[:10]:
            print(f"FAIL: {failure}", file=sys.stderr)
        return 1
    return 0


def cmd_list() -> int:
    for name, (desc, _) in REGISTRY.items():
        print(f"{name:14s} {desc}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdore",
        description="Gradient-penalized deep regression experiments")
    parser.add_argument("--output-dir", default=None,
                        help="directory for run artifacts (overrides config)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent (variant, seed) cells; "
                             "results are thread-count invariant")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured experiment")
    p_run.add_argument("config", help="path to a JSON run configuration")

    p_check = sub.add_parser("gradcheck", help="run the self-check suite")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--nets", type=int, default=100,
                         help="number of random networks to check")

    sub.add_parser("list", help="print the built-in experiment registry")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output_dir, args.threads)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.nets)
        return cmd_list()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
