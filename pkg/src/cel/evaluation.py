"""Metrics, significance testing, ablations, setting contrasts and sweeps.

This module is allowed to read ground truth; it hands the trainer a monitor
callback that closes over the truth arrays so the training loop never sees
them directly.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .candidates import (
    SyntheticSpec,
    generate_instance_dependent,
    generate_uniform,
    synthesize_gaussian,
    train_aux_scorer,
)
from .data import PartialLabelDataset
from .network import ModelConfig
from .trainer import TrainConfig, Trainer, TrainHistory

ABLATION_VARIANTS = {
    "cls": {"alpha": 0.0, "beta": 0.0},
    "cls+cal": {"beta": 0.0},
    "cel": {},
}

SWEEP_KEYS = ("alpha", "beta", "gamma1", "gamma2", "embed_dim")


# ---------------------------------------------------------------------------
# fixed synthetic benchmark


def benchmark_datasets(
    q: int = 8,
    d: int = 16,
    m_train: int = 2000,
    m_test: int = 500,
    overlap: float = 1.25,
    rate: float = 0.3,
    data_seed: int = 123,
    candidate_seed: int = 0,
):
    """The 8-class Gaussian benchmark with instance-dependent training candidates.

    Returns ``(train, test)``; the test split carries singleton candidate sets.
    """
    X, y, label_space = synthesize_gaussian(SyntheticSpec(q=q, d=d, m=m_train + m_test, overlap=overlap,
                                                          seed=data_seed))
    Xtr, ytr = X[:m_train], y[:m_train]
    scores = train_aux_scorer(Xtr, ytr, seed=candidate_seed, q=q)
    S = generate_instance_dependent(scores, ytr, rate, candidate_seed)
    meta = {"source": "benchmark", "overlap": overlap, "rate": rate, "data_seed": data_seed}
    train = PartialLabelDataset(Xtr, ytr, S, label_space, meta)
    yte = y[m_train:]
    test = PartialLabelDataset(X[m_train:], yte, np.eye(q, dtype=bool)[yte], label_space, {**meta, "split": "test"})
    return train, test


# ---------------------------------------------------------------------------
# metrics


def accuracy(P_or_preds, truth) -> float:
    """Top-1 accuracy from a probability matrix or a vector of predictions."""
    pred = np.asarray(P_or_preds)
    truth = np.asarray(truth)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    if pred.shape[0] != truth.shape[0]:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {truth.shape[0]} labels")
    if truth.shape[0] == 0:
        return math.nan
    return float(np.mean(pred == truth))


def disambiguation_rate(T, truth, candidates=None) -> float:
    """Fraction of training samples whose confidence argmax is the true label.

    Ties resolve to the lowest class index.
    """
    T = np.asarray(T)
    if candidates is not None:
        T = np.where(np.asarray(candidates, dtype=bool), T, -np.inf)
    return float(np.mean(T.argmax(axis=1) == np.asarray(truth)))


# ---------------------------------------------------------------------------
# significance


@dataclass(frozen=True)
class PairedTTest:
    t: float
    p: float
    df: int
    mean_diff: float
    outcome: str


def paired_t_stats(scores_a, scores_b, alpha: float = 0.05) -> PairedTTest:
    """Two-sided paired t-test of ``a`` against ``b``.

    ``t = mean(diff) * sqrt(n) / sd(diff)`` with ``n - 1`` degrees of freedom;
    the p-value is ``I_{df / (df + t^2)}(df / 2, 1 / 2)``. With zero spread the
    statistic is infinite in the direction of the mean difference, or the
    comparison is a tie when the differences are all zero.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired scores must be equal-length 1-d sequences")
    n = a.shape[0]
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTest(0.0, 1.0, df, 0.0, "tie")
        t, p = math.copysign(math.inf, mean), 0.0
    else:
        t = mean * math.sqrt(n) / sd
        p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    if p < alpha and mean > 0:
        outcome = "win"
    elif p < alpha and mean < 0:
        outcome = "loss"
    else:
        outcome = "tie"
    return PairedTTest(t, p, df, mean, outcome)


def paired_t_test(scores_a, scores_b, alpha: float = 0.05) -> str:
    """Return ``"win"``, ``"tie"`` or ``"loss"`` for ``a`` relative to ``b``."""
    return paired_t_stats(scores_a, scores_b, alpha).outcome


# ---------------------------------------------------------------------------
# runs


def make_monitor(train_features=None, train_truth=None, test_features=None, test_truth=None):
    """Build a trainer monitor reporting train/test accuracy against held-out truth."""

    def monitor(trainer, epoch):
        out = {}
        if train_truth is not None:
            out["train_acc"] = accuracy(trainer.predict_proba(train_features), train_truth)
        if test_truth is not None:
            out["test_acc"] = accuracy(trainer.predict_proba(test_features), test_truth)
        return out

    return monitor


@dataclass
class RunResult:
    method: str
    dataset: str
    seed: int
    final_acc: float
    history: TrainHistory = field(repr=False)
    params: dict = field(default_factory=dict)
    disambiguation: float = math.nan

    def __post_init__(self):
        if not (math.isnan(self.final_acc) or 0.0 <= self.final_acc <= 1.0):
            raise ValueError(f"accuracy {self.final_acc} outside [0, 1]")


def run_experiment(
    train_ds: PartialLabelDataset,
    test_ds: PartialLabelDataset | None,
    model_config: ModelConfig,
    config: TrainConfig,
    method: str = "cel",
    dataset: str = "dataset",
    params: dict | None = None,
    checkpoint_dir=None,
) -> RunResult:
    monitor = make_monitor(
        train_ds.features,
        train_ds.truth,
        test_ds.features if test_ds is not None else None,
        test_ds.truth if test_ds is not None else None,
    )
    trainer = Trainer(train_ds.features, train_ds.candidates, model_config, config, monitor, checkpoint_dir)
    history = trainer.run()
    if history.records:
        last = history[-1]
        final = last.test_acc if test_ds is not None else last.train_acc
    else:
        final = math.nan
    return RunResult(
        method=method,
        dataset=dataset,
        seed=config.seed,
        final_acc=final,
        history=history,
        params=dict(params or {}),
        disambiguation=disambiguation_rate(trainer.T, train_ds.truth),
    )


def _run_job(job):
    return run_experiment(*job)


def _map_runs(jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_job, jobs))


# ---------------------------------------------------------------------------
# tables


@dataclass
class ComparisonTable:
    """Per (method, dataset) mean and std over seeds plus t-test flags.

    ``outcomes`` holds the reference method's result against every other
    method, seen from the reference's side (``"win"`` means the reference is
    significantly better).
    """

    rows: list[dict]
    reference: str
    outcomes: dict[tuple[str, str], str]

    @property
    def counts(self) -> dict[str, int]:
        counts = {"win": 0, "tie": 0, "loss": 0}
        for outcome in self.outcomes.values():
            counts[outcome] += 1
        return counts

    def row(self, method, dataset=None) -> dict:
        for r in self.rows:
            if r["method"] == method and (dataset is None or r["dataset"] == dataset):
                return r
        raise KeyError(method)

    def to_json(self) -> dict:
        matrix: dict[str, dict[str, str]] = {}
        for (method, dataset), outcome in self.outcomes.items():
            matrix.setdefault(dataset, {})[method] = outcome
        return {"reference": self.reference, "rows": self.rows, "outcomes": matrix, "counts": self.counts}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def comparison_table(results: Sequence[RunResult], reference: str, alpha: float = 0.05) -> ComparisonTable:
    groups: dict[tuple[str, str], dict[int, float]] = {}
    for r in results:
        groups.setdefault((r.method, r.dataset), {})[r.seed] = r.final_acc
    rows = []
    for (method, dataset), by_seed in groups.items():
        accs = np.array([by_seed[s] for s in sorted(by_seed)])
        rows.append(
            {
                "method": method,
                "dataset": dataset,
                "mean": float(accs.mean()),
                "std": float(accs.std(ddof=0)),
                "n": int(accs.size),
            }
        )
    outcomes = {}
    datasets = sorted({d for _, d in groups})
    for dataset in datasets:
        ref = groups.get((reference, dataset))
        if ref is None:
            continue
        for (method, ds), other in groups.items():
            if ds != dataset or method == reference:
                continue
            seeds = sorted(set(ref) & set(other))
            if len(seeds) < 2:
                outcome = "tie"
            else:
                outcome = paired_t_test([ref[s] for s in seeds], [other[s] for s in seeds], alpha)
            outcomes[(method, dataset)] = outcome
    for row in rows:
        row["vs_reference"] = outcomes.get((row["method"], row["dataset"]), "")
    return ComparisonTable(rows, reference, outcomes)


RESULT_FIELDS = ("method", "dataset", "seed", *SWEEP_KEYS, "final_acc", "disambiguation")


def write_results_csv(results: Sequence[RunResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for r in results:
            writer.writerow(
                [r.method, r.dataset, r.seed]
                + [repr(r.params[k]) if k in r.params else "" for k in SWEEP_KEYS]
                + [repr(float(r.final_acc)), repr(float(r.disambiguation))]
            )


def read_results_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row["seed"] = int(row["seed"])
            row["final_acc"] = float(row["final_acc"])
            row["disambiguation"] = float(row["disambiguation"])
            for k in SWEEP_KEYS:
                row[k] = float(row[k]) if row.get(k) not in (None, "") else None
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# experiment drivers


def run_ablation(
    train_ds: PartialLabelDataset,
    test_ds: PartialLabelDataset | None,
    base_config: TrainConfig,
    model_config: ModelConfig,
    seeds: Sequence[int],
    dataset: str = "dataset",
    n_jobs: int = 1,
):
    """Train the cls-only, cls+cal and full variants for every seed.

    Returns ``(table, results)``; the table uses the full variant as reference.
    """
    jobs = []
    for seed in seeds:
        for method, overrides in ABLATION_VARIANTS.items():
            cfg = replace(base_config, seed=seed, **overrides)
            params = {"alpha": cfg.alpha, "beta": cfg.beta, "gamma1": cfg.gamma1, "gamma2": cfg.gamma2}
            jobs.append((train_ds, test_ds, model_config, cfg, method, dataset, params))
    try:
        results = _map_runs(jobs, n_jobs)
    except Exception as exc:
        raise RuntimeError(f"ablation run failed: {exc}") from exc
    return comparison_table(results, reference="cel"), results


@dataclass
class ContrastResult:
    """Paired accuracy curves for instance-dependent vs uniform candidates."""

    curves: list[dict]
    epochs_to_threshold: dict[str, list[float]]
    avg_cls: dict[str, list[float]]
    threshold: float

    def medians(self) -> dict[str, float]:
        return {k: float(np.median(v)) for k, v in self.epochs_to_threshold.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("setting", "seed", "epoch", "test_acc"))
            for c in self.curves:
                for epoch, acc in enumerate(c["test_acc"], start=1):
                    writer.writerow((c["setting"], c["seed"], epoch, repr(float(acc))))


def epochs_to_threshold(curve, threshold: float) -> float:
    hits = np.flatnonzero(np.asarray(curve) >= threshold)
    return float(hits[0] + 1) if hits.size else math.inf


def run_setting_contrast(
    features,
    truth,
    test_features,
    test_truth,
    q: int,
    rate: float,
    config: TrainConfig,
    model_config: ModelConfig,
    seeds: Sequence[int],
    threshold: float = 0.5,
    match_avg_cls: bool = True,
) -> ContrastResult:
    """Train the single-embedding baseline on both candidate settings per seed.

    With ``match_avg_cls`` the uniform rate is set so both settings carry the
    same average candidate-set size as the realized instance-dependent sets.
    """
    base_model = replace(model_config, kind="baseline")
    monitor = make_monitor(test_features=test_features, test_truth=test_truth)
    curves, reach, avg = [], {"instance_dependent": [], "uniform": []}, {"instance_dependent": [], "uniform": []}
    for seed in seeds:
        cfg = replace(config, seed=seed, alpha=0.0, beta=0.0, eval_every=1)
        if rate > 0:
            scores = train_aux_scorer(features, truth, seed=seed, q=q)
            S_id = generate_instance_dependent(scores, truth, rate, seed)
        else:
            S_id = generate_uniform(truth, q, 0.0, seed)
        u_rate = (S_id.sum(axis=1).mean() - 1.0) / (q - 1) if match_avg_cls else rate
        S_u = generate_uniform(truth, q, float(u_rate), seed)
        for setting, S in (("instance_dependent", S_id), ("uniform", S_u)):
            trainer = Trainer(features, S, base_model, cfg, monitor)
            history = trainer.run()
            curve = history.column("test_acc")
            curves.append({"setting": setting, "seed": seed, "test_acc": curve})
            reach[setting].append(epochs_to_threshold(curve, threshold))
            avg[setting].append(float(S.sum(axis=1).mean()))
    return ContrastResult(curves, reach, avg, threshold)


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise ValueError(f"cannot sweep {sorted(unknown)}; sweepable keys are {SWEEP_KEYS}")
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(
    train_ds: PartialLabelDataset,
    test_ds: PartialLabelDataset | None,
    grid: dict[str, Sequence],
    seeds: Sequence[int],
    base_config: TrainConfig,
    model_config: ModelConfig,
    dataset: str = "dataset",
    n_jobs: int = 1,
):
    """One run per grid point per seed. Failed cells are reported, not raised.

    Returns ``(results, failures)`` with failures as ``(point, seed, message)``.
    """
    jobs, results, failures = [], [], []
    for point in expand_grid(grid):
        train_keys = {k: v for k, v in point.items() if k != "embed_dim"}
        for seed in seeds:
            try:
                mcfg = replace(model_config, embed_dim=int(point["embed_dim"])) if "embed_dim" in point else model_config
                cfg = replace(base_config, seed=seed, **train_keys)
            except ValueError as exc:
                failures.append((point, seed, str(exc)))
                continue
            params = {"alpha": cfg.alpha, "beta": cfg.beta, "gamma1": cfg.gamma1, "gamma2": cfg.gamma2,
                      "embed_dim": mcfg.embed_dim}
            jobs.append((train_ds, test_ds, mcfg, cfg, "cel", dataset, params))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [(job, pool.submit(_run_job, job)) for job in jobs]
            for job, fut in futures:
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the sweep
                    failures.append((job[6], job[3].seed, str(exc)))
    else:
        for job in jobs:
            try:
                results.append(_run_job(job))
            except Exception as exc:  # noqa: BLE001
                failures.append((job[6], job[3].seed, str(exc)))
    return results, failures


def aggregate(rows, keys=("method", "dataset")) -> list[dict]:
    """Mean/std of ``final_acc`` grouped by ``keys``; accepts RunResults or CSV rows."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if isinstance(r, RunResult):
            rec = {"method": r.method, "dataset": r.dataset, "seed": r.seed, "final_acc": r.final_acc, **r.params}
        else:
            rec = r
        groups.setdefault(tuple(rec.get(k) for k in keys), []).append(rec["final_acc"])
    return [
        {**dict(zip(keys, k)), "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
        for k, v in groups.items()
    ]
