"""Command-line runner: ``divdrop <command> --config run.json``.

Commands write their artifacts under the output directory and print only
data (summary tables) to standard output; logs and errors go to standard
error. Exit codes: 0 success, 1 other failure, 2 invalid configuration or
input data, 3 training divergence, 4 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from divdrop.config import ALL_ONES, ConfigError, RunConfig, load_config, load_dataset
from divdrop.errors import DivdropError, DivergedTraining, IngestError
from divdrop.evaluation.data import Standardizer
from divdrop.evaluation.protocols import (
    run_classification_experiment,
    run_convergence_experiment,
    run_ood_regression,
    run_regression_experiment,
)
from divdrop.evaluation.report import ExperimentReport
from divdrop.kernels import layer_kernels, load_kernel_csv, save_kernel_csv
from divdrop.masks import MaskBank
from divdrop.network import NetworkWeights, train
from divdrop.numerics import derive_seed
from divdrop.samplers import build_mask_bank
from divdrop.uncertainty import MEASURES, mean_probs, mean_variance, run_inference

log = logging.getLogger("divdrop")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 1, 2, 3, 4
SEED_ENV = "DIVDROP_SEED"
COMMANDS = ("train", "kernel", "masks", "infer", "experiment", "convergence", "ood")


class MissingArtifact(DivdropError, FileNotFoundError):
    pass


class Context:
    """Resolved config plus flag overrides for one command invocation."""

    def __init__(self, cfg: RunConfig, seed: int, out: Path, jobs: int):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.jobs = jobs

    def echo(self) -> dict:
        doc = self.cfg.echo()
        doc["io"]["seed"] = self.seed
        return doc

    def artifact(self, configured: str | None, default: str) -> Path:
        path = Path(configured) if configured else self.out / default
        if not path.exists():
            raise MissingArtifact(f"missing artifact: {path}")
        return path


def _default_jobs() -> int:
    try:
        return max(len(os.sched_getaffinity(0)), 1)
    except AttributeError:
        return os.cpu_count() or 1


def resolve_seed(flag: int | None, configured: int | None) -> int:
    """Flag, then config file, then ``DIVDROP_SEED``, then 0."""
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be a non-negative integer, got {env!r}") from None
        if value < 0:
            raise ConfigError(f"{SEED_ENV} must be a non-negative integer, got {env!r}")
        return value
    return 0


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_report(ctx: Context, report: ExperimentReport, prefix: str = "") -> None:
    ctx.out.mkdir(parents=True, exist_ok=True)
    path = ctx.out / f"{prefix}report.json"
    report.write(path)
    if report.records:
        report.write_records_csv(ctx.out / f"{prefix}records.csv")
    for f in report.failures:
        log.warning("cell failed: %s", f)
    print(report.table())
    log.info("wrote %s (%d records, %d failures)", path, len(report.records), len(report.failures))


def _load_weights(ctx: Context) -> NetworkWeights:
    return NetworkWeights.load(ctx.artifact(ctx.cfg.io.weights, "weights.json"))


def _standardizer(net: NetworkWeights) -> Standardizer:
    if "standardizer" not in net.meta:
        raise ConfigError("weights file carries no standardizer; retrain with the train command")
    return Standardizer.from_dict(net.meta["standardizer"])


def _read_inputs(ctx: Context, net: NetworkWeights) -> np.ndarray:
    """Raw feature rows: the ``io.input`` CSV if given, else the task dataset."""
    names = net.meta.get("feature_names")
    if ctx.cfg.io.input is None:
        return load_dataset(ctx.cfg.task.dataset, ctx.cfg.task.kind).x
    path = ctx.artifact(ctx.cfg.io.input, "")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    names = names or header
    missing = [n for n in names if n not in header]
    if missing:
        raise IngestError(f"{path}: missing feature column {missing[0]!r}", column=missing[0])
    cols = [header.index(n) for n in names]
    x = np.empty((len(rows), len(cols)))
    for i, row in enumerate(rows):
        for j, c in enumerate(cols):
            try:
                x[i, j] = float(row[c])
            except (ValueError, IndexError):
                raise IngestError(f"{path}: row {i + 2}, column {names[j]!r}: bad value", row=i + 2, column=names[j]) from None
            if not np.isfinite(x[i, j]):
                raise IngestError(f"{path}: row {i + 2}, column {names[j]!r}: non-finite value", row=i + 2, column=names[j])
    if x.shape[0] == 0:
        raise IngestError(f"{path}: no data rows")
    return x


# --- commands -----------------------------------------------------------


def cmd_train(ctx: Context) -> int:
    cfg = ctx.cfg
    if cfg.model.ensemble_size != 1:
        raise ConfigError("model.ensemble_size: the train command fits a single network")
    data = load_dataset(cfg.task.dataset, cfg.task.kind)
    model = cfg.model_config_obj(seed=derive_seed(ctx.seed, 12) & 0x7FFFFFFF)
    std = data.stats
    y = std.transform_y(data.y) if data.task == "regression" else data.y
    net = train(model.spec_for(data), std.transform_x(data.x), y, model.train)
    meta = dict(net.meta, standardizer=std.to_dict(), feature_names=list(data.feature_names), dataset=data.name)
    net = NetworkWeights(net.spec, net.weights, net.biases, meta)
    ctx.out.mkdir(parents=True, exist_ok=True)
    net.save(ctx.out / "weights.json")
    _write_json(ctx.out / "train_log.json", meta["train_log"])
    log.info("wrote %s (best epoch %s)", ctx.out / "weights.json", meta["train_log"]["best_epoch"])
    return EXIT_OK


def _kernel_kinds(cfg: RunConfig) -> list[str]:
    kinds = sorted({s.kernel_kind for s in cfg.sampler_configs() if s.kernel_kind})
    return kinds or ["correlation"]


def cmd_kernel(ctx: Context) -> int:
    net = _load_weights(ctx)
    x = _standardizer(net).transform_x(_read_inputs(ctx, net))
    out = ctx.out / "kernels"
    out.mkdir(parents=True, exist_ok=True)
    for kind in _kernel_kinds(ctx.cfg):
        for h, kernel in layer_kernels(net, x, kind).items():
            save_kernel_csv(kernel, out / f"{kind}-layer{h}.csv")
            log.info("layer %d %s kernel: %d neurons, %d dead", h, kind, kernel.size, int(np.sum(kernel.dead)))
    return EXIT_OK


def cmd_masks(ctx: Context) -> int:
    net = _load_weights(ctx)
    kdir = Path(ctx.cfg.io.kernels) if ctx.cfg.io.kernels else ctx.out / "kernels"
    out = ctx.out / "masks"
    out.mkdir(parents=True, exist_ok=True)
    T = ctx.cfg.evaluation.T
    for i, sampler in enumerate(ctx.cfg.sampler_configs()):
        kernels = None
        if sampler.kind != "bernoulli":
            kernels = {}
            for h in net.spec.dropout_layers:
                path = kdir / f"{sampler.kernel_kind}-layer{h}.csv"
                if not path.exists():
                    raise MissingArtifact(f"missing artifact: {path}")
                kernels[h] = load_kernel_csv(path, h, sampler.kernel_kind)
        bank = build_mask_bank(net, kernels, sampler, T, derive_seed(ctx.seed, 13, i))
        bank.save(out / f"{sampler.name}.json")
        log.info("wrote %d mask sets for sampler %s", len(bank), sampler.name)
    return EXIT_OK


def _banks(ctx: Context, net: NetworkWeights) -> list[tuple[str, MaskBank]]:
    configured = ctx.cfg.io.masks
    if configured == ALL_ONES:
        return [(ALL_ONES, MaskBank.all_ones(net.spec.dropout_sizes(), 1))]
    if configured:
        path = ctx.artifact(configured, "")
        return [(path.stem, MaskBank.load(path))]
    return [(s.name, MaskBank.load(ctx.artifact(None, f"masks/{s.name}.json"))) for s in ctx.cfg.sampler_configs()]


def cmd_infer(ctx: Context) -> int:
    net = _load_weights(ctx)
    std = _standardizer(net)
    x = std.transform_x(_read_inputs(ctx, net))
    out = ctx.out / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    for name, bank in _banks(ctx, net):
        pred = run_inference(net, bank, x)
        path = out / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            if pred.task == "regression":
                mean, var = mean_variance(pred)
                w.writerow(["row", "mean", "variance"])
                for i, (m, v) in enumerate(zip(std.inverse_mean(mean), std.inverse_var(var))):
                    w.writerow([i, repr(float(m)), repr(float(v))])
            else:
                pbar = mean_probs(pred)
                scores = {k: f(pred) for k, f in sorted(MEASURES.items())}
                w.writerow(["row", "predicted"] + [f"p{c}" for c in range(pbar.shape[1])] + list(scores))
                for i in range(pbar.shape[0]):
                    w.writerow([i, int(pbar[i].argmax())] + [repr(float(p)) for p in pbar[i]]
                               + [repr(float(s[i])) for s in scores.values()])
        log.info("wrote %s (%d rows, T=%d)", path, x.shape[0], len(bank))
    return EXIT_OK


def _common(ctx: Context) -> dict:
    cfg = ctx.cfg
    return dict(
        samplers=cfg.sampler_configs(),
        model=cfg.model_config_obj(),
        protocol=cfg.protocol(),
        seed=ctx.seed,
        jobs=ctx.jobs,
    )


def _attach(report: ExperimentReport, ctx: Context) -> ExperimentReport:
    report.config = {"run": ctx.echo(), "protocol": report.config}
    return report


def cmd_experiment(ctx: Context) -> int:
    cfg, e = ctx.cfg, ctx.cfg.evaluation
    data = load_dataset(cfg.task.dataset, cfg.task.kind)
    if cfg.task.kind == "regression":
        report = run_regression_experiment(data, t_list=e.t_list, splits=e.splits, folds=e.folds, runs=e.runs, **_common(ctx))
    else:
        if cfg.task.ood is None:
            raise ConfigError("task.ood: classification experiments need an OOD dataset")
        ood = load_dataset(cfg.task.ood, "classification")
        report = run_classification_experiment(data, ood, T=e.T, measure=e.measure, repeats=e.repeats,
                                               grid_size=e.grid_size, **_common(ctx))
    _write_report(ctx, _attach(report, ctx))
    return EXIT_OK


def _regression_only(ctx: Context, command: str) -> None:
    if ctx.cfg.task.kind != "regression":
        raise ConfigError(f"task.kind: the {command} command needs a regression task")


def cmd_convergence(ctx: Context) -> int:
    _regression_only(ctx, "convergence")
    e = ctx.cfg.evaluation
    data = load_dataset(ctx.cfg.task.dataset, "regression")
    report = run_convergence_experiment(data, t_max=e.t_max, repeats=e.repeats, **_common(ctx))
    _write_report(ctx, _attach(report, ctx), "convergence-")
    return EXIT_OK


def cmd_ood(ctx: Context) -> int:
    _regression_only(ctx, "ood")
    e = ctx.cfg.evaluation
    data = load_dataset(ctx.cfg.task.dataset, "regression")
    report = run_ood_regression(data, T=e.T, percentiles=e.percentiles, repeats=e.repeats,
                                split_kind=e.split_kind, feature=e.feature, **_common(ctx))
    _write_report(ctx, _attach(report, ctx), "ood-")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "kernel": cmd_kernel,
    "masks": cmd_masks,
    "infer": cmd_infer,
    "experiment": cmd_experiment,
    "convergence": cmd_convergence,
    "ood": cmd_ood,
}

HELP = {
    "train": "train a dropout network and write weights.json",
    "kernel": "estimate neuron kernels from calibration data",
    "masks": "sample a mask bank per configured sampler",
    "infer": "run masked inference and write per-input predictions",
    "experiment": "in-domain log-likelihood or classification experiment",
    "convergence": "log-likelihood as a function of the number of passes",
    "ood": "out-of-distribution variance exceedance table",
}


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--seed", type=_non_negative, default=None, help=f"master seed (falls back to io.seed, then ${SEED_ENV})")
    common.add_argument("--jobs", type=_positive, default=None, help="worker processes for experiment cells")
    common.add_argument("--out", default=None, help="output directory (overrides io.out)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser = argparse.ArgumentParser(prog="divdrop", description="Diversity-aware dropout uncertainty experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config)
        seed = resolve_seed(args.seed, cfg.io.seed)
        out = Path(args.out) if args.out else Path(cfg.io.out)
        ctx = Context(cfg, seed, out, args.jobs or _default_jobs())
        return HANDLERS[args.command](ctx)
    except (ConfigError, IngestError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DivergedTraining as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (MissingArtifact, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (DivdropError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
