"""Experiment protocols: in-domain log-likelihood sweeps, convergence
traces, OOD percentile-exceedance tables and classification curves.

Every experiment is a list of independent cells (one trained network, or
ensemble, per cell). All samplers inside a cell share that network so
differences between them come from the masks alone. Cells derive their
seeds from ``(seed, cell keys)`` and can run in a process pool without
changing the result.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from divdrop.errors import DivdropError
from divdrop.evaluation.curves import (
    DEFAULT_FRACTIONS,
    CurvePoints,
    count_vs_uncertainty_curve,
    exceedance,
    ue_accuracy_curve,
)
from divdrop.evaluation.data import Split, SplitPlan, Standardizer, TabularDataset
from divdrop.evaluation.report import ExperimentReport, group_summaries
from divdrop.kernels import layer_kernels
from divdrop.masks import MaskBank
from divdrop.network import NetworkSpec, NetworkWeights, TrainConfig, forward_deterministic, train
from divdrop.numerics import derive_seed, make_rng
from divdrop.samplers import SamplerConfig, build_mask_bank
from divdrop.uncertainty import (
    EnsemblePrediction,
    gaussian_loglik,
    mean_probs,
    mean_variance,
    run_ensemble_inference,
    score,
    softmax,
)

log = logging.getLogger(__name__)

ARCHITECTURES = {
    "A": ((128, 128, 64), "leaky-relu", 0.5),
    "B": ((32, 32, 16), "leaky-relu", 0.5),
    "C": ((128, 128, 256), "celu", 0.2),
    "D": ((256, 256, 512), "celu", 0.5),
}


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (128, 128, 64)
    activation: str = "leaky-relu"
    dropout_rate: float = 0.5
    dropout_layers: tuple[int, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble_size: int = 1

    @classmethod
    def architecture(cls, name: str, **overrides) -> ModelConfig:
        hidden, act, p = ARCHITECTURES[name]
        return cls(hidden=hidden, activation=act, dropout_rate=p, **overrides)

    def spec_for(self, dataset: TabularDataset) -> NetworkSpec:
        out = dataset.n_classes if dataset.task == "classification" else 1
        return NetworkSpec(
            (dataset.d, *self.hidden, out),
            self.activation,
            self.dropout_rate,
            self.dropout_layers,
            dataset.task,
            dataset.n_classes if dataset.task == "classification" else None,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True)
class ProtocolConfig:
    """Knobs shared by all protocols.

    ``calibration`` picks the rows used for kernel estimation: the held-out
    validation slice of the training split (default), the test rows, or
    the full training split.
    """

    calibration: str = "validation"
    var_floor: float = 1e-6
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.calibration not in ("validation", "test", "train"):
            raise ValueError("calibration must be 'validation', 'test' or 'train'")


@dataclass
class CellModel:
    """Trained members for one cell together with the data they were fit on."""

    standardizer: Standardizer
    members: list[NetworkWeights]
    x_train: np.ndarray
    y_train: np.ndarray
    x_calib: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


def fit_cell(dataset: TabularDataset, split: Split, model: ModelConfig, protocol: ProtocolConfig, seed: int) -> CellModel:
    """Standardize on the training rows, hold out a validation slice, train."""
    regression = dataset.task == "regression"
    x_tr_raw, y_tr_raw = dataset.x[split.train], dataset.y[split.train]
    std = Standardizer.fit(x_tr_raw, y_tr_raw if regression else None)
    x_tr = std.transform_x(x_tr_raw)
    y_tr = std.transform_y(y_tr_raw) if regression else y_tr_raw
    x_ev = std.transform_x(dataset.x[split.test])
    y_ev = std.transform_y(dataset.y[split.test]) if regression else dataset.y[split.test]

    rng = make_rng(seed, 11)
    perm = rng.permutation(len(x_tr))
    n_val = min(max(int(round(protocol.validation_fraction * len(x_tr))), 1), len(x_tr) - 1)
    fit_idx, val_idx = perm[: len(x_tr) - n_val], perm[len(x_tr) - n_val :]

    spec = model.spec_for(dataset)
    members = []
    for e in range(model.ensemble_size):
        cfg = replace(model.train, seed=derive_seed(seed, 12, e) & 0x7FFFFFFF)
        members.append(train(spec, x_tr[fit_idx], y_tr[fit_idx], cfg, validation=(x_tr[val_idx], y_tr[val_idx])))
    calib = {"validation": x_tr[val_idx], "test": x_ev, "train": x_tr}[protocol.calibration]
    return CellModel(std, members, x_tr, y_tr, calib, x_ev, y_ev)


def _split_passes(T: int, members: int) -> list[int]:
    base, extra = divmod(T, members)
    return [base + (1 if i < extra else 0) for i in range(members)]


def cell_banks(cell: CellModel, sampler: SamplerConfig, T: int, seed: int) -> list[tuple[NetworkWeights, MaskBank]]:
    """Mask banks for every member; ``T`` passes are shared out across members."""
    pairs = []
    for e, (net, t_e) in enumerate(zip(cell.members, _split_passes(T, len(cell.members)))):
        if t_e == 0:
            continue
        cfg = replace(sampler, dropout_rate=net.spec.dropout_rate)
        kernels = None if cfg.kind == "bernoulli" else layer_kernels(net, cell.x_calib, cfg.kernel_kind)
        pairs.append((net, build_mask_bank(net, kernels, cfg, t_e, derive_seed(seed, 13, e))))
    return pairs


def _prefix(pairs, fractions_of_T: int, T_max: int):
    """Nested prefix of each member's bank covering ``fractions_of_T`` total passes."""
    counts = _split_passes(fractions_of_T, len(pairs))
    return [(net, bank[:c]) for (net, bank), c in zip(pairs, counts) if c > 0]


def _run(fn: Callable, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _failure(where: dict, exc: Exception) -> dict:
    return dict(where, error=type(exc).__name__, message=str(exc))


def _config_echo(**kw) -> dict:
    out = {}
    for k, v in kw.items():
        if isinstance(v, (ModelConfig, SamplerConfig)):
            out[k] = v.to_dict()
        elif isinstance(v, ProtocolConfig):
            out[k] = asdict(v)
        elif isinstance(v, (list, tuple)) and v and isinstance(v[0], SamplerConfig):
            out[k] = [s.to_dict() for s in v]
        elif isinstance(v, TabularDataset):
            out[k] = {"name": v.name, "n": v.n, "d": v.d, "task": v.task}
        else:
            out[k] = list(v) if isinstance(v, tuple) else v
    return out


# --- in-domain regression -------------------------------------------------


def _regression_cell(task):
    dataset, split, run, samplers, t_list, model, protocol, seed = task
    where = {"split": split.split_id, "run": run}
    cell_seed = derive_seed(seed, 2, *[int(p) for p in split.split_id.split(".")], run)
    records, failures = [], []
    try:
        cell = fit_cell(dataset, split, model, protocol, cell_seed)
    except DivdropError as exc:
        return records, [_failure(where, exc)]
    T_max = max(t_list)
    for i, sampler in enumerate(samplers):
        try:
            pairs = cell_banks(cell, sampler, T_max, derive_seed(cell_seed, 3, i))
            for T in t_list:
                pred = run_ensemble_inference(_prefix(pairs, T, T_max), cell.x_eval)
                mean, var = mean_variance(pred)
                ll = gaussian_loglik(mean, var, cell.y_eval, protocol.var_floor)
                records.append(
                    dict(
                        where,
                        sampler=sampler.name,
                        T=int(T),
                        loglik=float(ll.mean()),
                        rmse=float(np.sqrt(np.mean((mean - cell.y_eval) ** 2))),
                        mean_variance=float(var.mean()),
                        seed=int(cell_seed),
                    )
                )
        except DivdropError as exc:
            failures.append(_failure(dict(where, sampler=sampler.name), exc))
    return records, failures


def run_regression_experiment(
    dataset: TabularDataset,
    samplers: Sequence[SamplerConfig],
    t_list: Sequence[int] = (10, 30, 100),
    splits: int = 5,
    folds: int = 2,
    runs: int = 5,
    model: ModelConfig = ModelConfig(),
    protocol: ProtocolConfig = ProtocolConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> ExperimentReport:
    """Mean test log-likelihood for every (split, fold, run, sampler, T).

    One network (or ensemble) is trained per (split, fold, run) and reused
    by all samplers; for each sampler a single bank of ``max(t_list)``
    passes is drawn and its nested prefixes give the smaller ``T``.
    """
    if dataset.task != "regression":
        raise ValueError("regression experiment needs a regression dataset")
    t_list = sorted(set(int(t) for t in t_list))
    plan = SplitPlan("random-half", seed=seed, repeats=splits, folds=folds)
    tasks = [
        (dataset, sp, r, list(samplers), t_list, model, protocol, seed)
        for sp in plan.splits(dataset.x)
        for r in range(runs)
    ]
    report = ExperimentReport(
        "regression",
        _config_echo(dataset=dataset, samplers=samplers, t_list=t_list, splits=splits, folds=folds, runs=runs,
                     model=model, protocol=protocol, seed=seed),
    )
    for records, failures in _run(_regression_cell, tasks, jobs):
        report.records.extend(records)
        report.failures.extend(failures)
    report.summaries = group_summaries(report.records, ["sampler", "T"], "loglik") + group_summaries(
        report.records, ["sampler", "T"], "rmse"
    )
    return report


# --- convergence trace ----------------------------------------------------


def run_convergence_trace(
    dataset: TabularDataset,
    sampler: SamplerConfig,
    t_max: int = 100,
    model: ModelConfig = ModelConfig(),
    protocol: ProtocolConfig = ProtocolConfig(),
    seed: int = 0,
) -> CurvePoints:
    """Mean test log-likelihood as a function of T = 1..t_max.

    Uses one random half split and one mask bank whose prefixes give each T.
    """
    if t_max < 2:
        raise ValueError("t_max must be >= 2")
    split = SplitPlan("random-half", seed=seed).splits(dataset.x)[0]
    cell_seed = derive_seed(seed, 5)
    cell = fit_cell(dataset, split, model, protocol, cell_seed)
    pairs = cell_banks(cell, sampler, t_max, derive_seed(cell_seed, 3, 0))
    full = run_ensemble_inference(pairs, cell.x_eval).values
    # passes are ordered member by member; reorder so prefixes interleave members
    order = _interleave_order(pairs)
    full = full[:, order]
    ys = []
    for T in range(1, t_max + 1):
        mean, var = mean_variance(full[:, :T])
        ys.append(float(gaussian_loglik(mean, var, cell.y_eval, protocol.var_floor).mean()))
    return CurvePoints(np.arange(1, t_max + 1), np.asarray(ys), "T", "loglik")


def _interleave_order(pairs) -> np.ndarray:
    offsets = np.cumsum([0] + [len(b) for _, b in pairs])
    lengths = [len(b) for _, b in pairs]
    order = []
    for t in range(max(lengths)):
        for e, L in enumerate(lengths):
            if t < L:
                order.append(offsets[e] + t)
    return np.asarray(order, dtype=np.int64)


def _convergence_task(task):
    dataset, sampler, t_max, model, protocol, seed, rep = task
    try:
        curve = run_convergence_trace(dataset, sampler, t_max, model, protocol, derive_seed(seed, 6, rep))
        return curve, None
    except DivdropError as exc:
        return None, _failure({"repeat": rep, "sampler": sampler.name}, exc)


def run_convergence_experiment(
    dataset: TabularDataset,
    samplers: Sequence[SamplerConfig],
    t_max: int = 100,
    repeats: int = 1,
    model: ModelConfig = ModelConfig(),
    protocol: ProtocolConfig = ProtocolConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> ExperimentReport:
    tasks = [(dataset, s, t_max, model, protocol, seed, r) for r in range(repeats) for s in samplers]
    report = ExperimentReport(
        "convergence",
        _config_echo(dataset=dataset, samplers=samplers, t_max=t_max, repeats=repeats, model=model,
                     protocol=protocol, seed=seed),
    )
    for (_, s, *_rest, r), (curve, failure) in zip(tasks, _run(_convergence_task, tasks, jobs)):
        if failure:
            report.failures.append(failure)
            continue
        report.curves.append(dict(curve.to_dict(), sampler=s.name, repeat=r, kind="loglik_vs_T"))
        head = float(np.median(curve.y[:10]))
        tail = float(np.median(curve.y[-10:]))
        report.records.append({"sampler": s.name, "repeat": r, "median_first10": head, "median_last10": tail,
                               "increasing": bool(tail > head)})
    report.summaries = group_summaries(report.records, ["sampler"], "median_last10")
    return report


# --- OOD regression -------------------------------------------------------


def regression_variances(pairs, x) -> np.ndarray:
    return mean_variance(run_ensemble_inference(pairs, x))[1]


def _ood_cell(task):
    dataset, split, samplers, T, percentiles, model, protocol, seed = task
    where = {"split": split.split_id, "feature": split.feature}
    cell_seed = derive_seed(seed, 4, int(split.split_id.split(".")[0]))
    records, failures = [], []
    try:
        cell = fit_cell(dataset, split, model, protocol, cell_seed)
    except DivdropError as exc:
        return records, [_failure(where, exc)]
    for i, sampler in enumerate(samplers):
        try:
            pairs = cell_banks(cell, sampler, T, derive_seed(cell_seed, 3, i))
            var_train = regression_variances(pairs, cell.x_train)
            var_ood = regression_variances(pairs, cell.x_eval)
            for q in percentiles:
                records.append(
                    dict(where, sampler=sampler.name, T=int(T), percentile=float(q),
                         exceedance=exceedance(var_train, var_ood, q), seed=int(cell_seed))
                )
        except DivdropError as exc:
            failures.append(_failure(dict(where, sampler=sampler.name), exc))
    return records, failures


def run_ood_regression(
    dataset: TabularDataset,
    samplers: Sequence[SamplerConfig],
    T: int = 100,
    percentiles: Sequence[float] = (80, 90, 95),
    repeats: int = 5,
    model: ModelConfig = ModelConfig(),
    protocol: ProtocolConfig = ProtocolConfig(),
    seed: int = 0,
    split_kind: str = "ood-median",
    feature: int | None = None,
    jobs: int = 1,
) -> ExperimentReport:
    """Percentage of held-out points whose predictive variance exceeds the
    ``q``-th percentile of the training-point variances.

    With ``split_kind="ood-median"`` the held-out half lies beyond the median
    of a feature; ``"random-half"`` gives the in-distribution null case.
    """
    if dataset.task != "regression":
        raise ValueError("OOD regression protocol needs a regression dataset")
    if any(not 0 < q < 100 for q in percentiles):
        raise ValueError("percentiles must lie in (0, 100)")
    plan = SplitPlan(split_kind, seed=seed, repeats=repeats, feature=feature)
    tasks = [(dataset, sp, list(samplers), int(T), list(percentiles), model, protocol, seed) for sp in plan.splits(dataset.x)]
    report = ExperimentReport(
        "ood-regression",
        _config_echo(dataset=dataset, samplers=samplers, T=T, percentiles=list(percentiles), repeats=repeats,
                     model=model, protocol=protocol, seed=seed, split_kind=split_kind, feature=feature),
    )
    for records, failures in _run(_ood_cell, tasks, jobs):
        report.records.extend(records)
        report.failures.extend(failures)
    report.summaries = group_summaries(report.records, ["sampler", "percentile"], "exceedance")
    return report


# --- classification -------------------------------------------------------


@dataclass
class ClassifierScores:
    """Per-sampler uncertainty scores for one classification cell."""

    sampler: str
    in_domain: np.ndarray
    correct: np.ndarray
    ood: np.ndarray
    mask_correct: np.ndarray


def classification_cell(
    dataset: TabularDataset,
    ood: TabularDataset,
    split: Split,
    samplers: Sequence[SamplerConfig],
    T: int,
    measure: str,
    model: ModelConfig,
    protocol: ProtocolConfig,
    seed: int,
) -> list[ClassifierScores | Exception]:
    cell = fit_cell(dataset, split, model, protocol, seed)
    x_ood = cell.standardizer.transform_x(ood.x)
    # one classifier for every sampler: only the uncertainty ranking differs
    probs = np.mean([softmax(forward_deterministic(m, cell.x_eval)) for m in cell.members], axis=0)
    correct = probs.argmax(axis=-1) == cell.y_eval
    out: list = []
    for i, sampler in enumerate(samplers):
        try:
            pairs = cell_banks(cell, sampler, T, derive_seed(seed, 3, i))
            pred_in: EnsemblePrediction = run_ensemble_inference(pairs, cell.x_eval)
            pred_ood = run_ensemble_inference(pairs, x_ood)
            mask_correct = mean_probs(pred_in).argmax(axis=-1) == cell.y_eval
            out.append(ClassifierScores(sampler.name, score(pred_in, measure), correct, score(pred_ood, measure),
                                        mask_correct))
        except DivdropError as exc:
            out.append(exc)
    return out


def _classification_task(task):
    dataset, ood, split, samplers, T, measure, model, protocol, seed, fractions, grid = task
    rep = int(split.split_id.split(".")[0])
    where = {"repeat": rep}
    cell_seed = derive_seed(seed, 8, rep)
    records, curves, failures = [], [], []
    try:
        results = classification_cell(dataset, ood, split, samplers, T, measure, model, protocol, cell_seed)
    except DivdropError as exc:
        return records, curves, [_failure(where, exc)]
    for sampler, res in zip(samplers, results):
        if isinstance(res, Exception):
            failures.append(_failure(dict(where, sampler=sampler.name), res))
            continue
        acc_curve = ue_accuracy_curve(res.in_domain, res.correct, fractions)
        count_curve = count_vs_uncertainty_curve(res.ood, grid)
        rec = dict(where, sampler=sampler.name, T=int(T), measure=measure, accuracy=float(res.correct.mean()),
                   mask_accuracy=float(res.mask_correct.mean()),
                   ue_accuracy_area=float(acc_curve.y.mean()), ood_mean_score=float(res.ood.mean()),
                   in_domain_mean_score=float(res.in_domain.mean()), seed=int(cell_seed))
        for f, a in zip(acc_curve.x, acc_curve.y):
            rec[f"acc@{f:.1f}"] = float(a)
        records.append(rec)
        curves.append(dict(acc_curve.to_dict(), kind="ue_accuracy", sampler=sampler.name, repeat=rep))
        curves.append(dict(count_curve.to_dict(), kind="count_vs_uncertainty", sampler=sampler.name, repeat=rep))
    return records, curves, failures


def run_classification_experiment(
    dataset: TabularDataset,
    ood: TabularDataset,
    samplers: Sequence[SamplerConfig],
    T: int = 100,
    measure: str = "bald",
    repeats: int = 3,
    model: ModelConfig = ModelConfig(),
    protocol: ProtocolConfig = ProtocolConfig(),
    seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    grid_size: int = 50,
    jobs: int = 1,
) -> ExperimentReport:
    """UE-accuracy curves on in-domain test data and count-vs-uncertainty
    curves on the OOD set, per (repeat, sampler).

    Correctness comes from the trained network's deterministic prediction,
    shared by all samplers; ``mask_accuracy`` records the accuracy of the
    mask-averaged prediction alongside."""
    if dataset.task != "classification" or ood.task != "classification":
        raise ValueError("classification experiment needs classification datasets")
    if ood.d != dataset.d:
        raise ValueError("OOD set must have the same feature dimension")
    plan = SplitPlan("random-half", seed=seed, repeats=repeats)
    tasks = [
        (dataset, ood, sp, list(samplers), int(T), measure, model, protocol, seed, tuple(fractions), grid_size)
        for sp in plan.splits(dataset.x)
    ]
    report = ExperimentReport(
        "classification",
        _config_echo(dataset=dataset, ood=ood, samplers=samplers, T=T, measure=measure, repeats=repeats,
                     model=model, protocol=protocol, seed=seed, fractions=list(fractions), grid_size=grid_size),
    )
    for records, curves, failures in _run(_classification_task, tasks, jobs):
        report.records.extend(records)
        report.curves.extend(curves)
        report.failures.extend(failures)
    report.summaries = group_summaries(report.records, ["sampler"], "ue_accuracy_area") + group_summaries(
        report.records, ["sampler"], "acc@0.5"
    )
    return report
