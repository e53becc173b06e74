"""Repeated-split evaluation protocol and results tables.

The protocol mirrors the paper-style benchmark loop: repeatedly split the
matched samples into a calibration and a test portion, fit every requested
(method, feature set) pair on the calibration portion, and score the test
portion with a D-ECE binning of at least the fitted dimensionality. The
uncalibrated scores evaluated identically form the baseline row.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import calibrators
from .calibrators import DEFAULT_CALIBRATION_BINS, DEFAULT_RIDGE
from .errors import ConvergenceError, DataError, EmptyMetricError, UsageError
from .features import DEFAULT_CLIP, NAMED_FEATURE_SETS, FeatureSet, labels
from .matching import MatchedSample, match_detections
from .metrics import (
    DEFAULT_EVAL_BINS,
    DEFAULT_MIN_SAMPLES,
    BinningSpec,
    compute_d_ece,
    require_dimensionality_match,
)
from .optimizer import OptimizerConfig

# Short command-line keys for the calibration methods; "identity" is a
# passthrough used to sanity-check the harness against its own baseline.
METHOD_KEYS = {
    "hb": "hist_binning",
    "lc": "logistic_indep",
    "lc-dep": "logistic_dep",
    "bc": "beta_indep",
    "bc-dep": "beta_dep",
    "identity": "identity",
}
_METHOD_SHORT = {v: k for k, v in METHOD_KEYS.items()}


def canonical_method(name: str) -> str:
    """Resolve a short CLI key or full method name to the canonical name."""
    if name in METHOD_KEYS:
        return METHOD_KEYS[name]
    if name in METHOD_KEYS.values():
        return name
    raise UsageError(f"unknown method {name!r}; expected one of {sorted(METHOD_KEYS)}")


@dataclass(frozen=True)
class ProtocolConfig:
    """Settings for :func:`run_protocol`.

    ``eval_feature_sets`` optionally overrides, entry by entry, the feature
    set used for scoring; each override must cover at least the dimensions
    of the corresponding fitted feature set.
    """

    methods: tuple[str, ...]
    feature_sets: tuple[str, ...]
    train_fraction: float = 0.7
    repetitions: int = 20
    seed: int = 0
    min_samples: int = DEFAULT_MIN_SAMPLES
    iou_thresholds: tuple[float, ...] = ()
    eval_feature_sets: tuple[str, ...] | None = None
    calibration_bins: Mapping[int, int] | None = None
    eval_bins: Mapping[int, int] | None = None
    eps: float = DEFAULT_CLIP
    ridge: float = DEFAULT_RIDGE
    optimizer: OptimizerConfig | None = None
    renormalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(canonical_method(m) for m in self.methods))
        object.__setattr__(self, "feature_sets", tuple(self.feature_sets))
        if not self.methods or not self.feature_sets:
            raise UsageError("protocol needs at least one method and one feature set")
        if len(set(self.methods)) != len(self.methods):
            raise UsageError(f"duplicate methods in {self.methods}")
        if len(set(self.feature_sets)) != len(self.feature_sets):
            raise UsageError(f"duplicate feature sets in {self.feature_sets}")
        if not 0.0 < self.train_fraction < 1.0:
            raise UsageError(f"train fraction must lie in (0, 1), got {self.train_fraction}")
        if self.repetitions < 1:
            raise UsageError(f"repetitions must be >= 1, got {self.repetitions}")
        for fs in self.feature_sets:
            if fs not in NAMED_FEATURE_SETS:
                raise UsageError(f"unknown feature set {fs!r}")
        if self.eval_feature_sets is not None:
            object.__setattr__(self, "eval_feature_sets", tuple(self.eval_feature_sets))
            if len(self.eval_feature_sets) != len(self.feature_sets):
                raise UsageError("eval_feature_sets must parallel feature_sets")
            for fit_fs, eval_fs in zip(self.feature_sets, self.eval_feature_sets):
                if eval_fs not in NAMED_FEATURE_SETS:
                    raise UsageError(f"unknown feature set {eval_fs!r}")
                require_dimensionality_match(
                    NAMED_FEATURE_SETS[fit_fs], NAMED_FEATURE_SETS[eval_fs]
                )
        object.__setattr__(
            self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds)
        )

    def resolved_eval_sets(self) -> tuple[str, ...]:
        return self.eval_feature_sets or self.feature_sets

    def calibration_bin_count(self, k: int) -> int:
        table = self.calibration_bins or DEFAULT_CALIBRATION_BINS
        if k not in table:
            raise UsageError(f"no calibration bin count configured for K={k}")
        return int(table[k])

    def eval_bin_count(self, k: int) -> int:
        table = self.eval_bins or DEFAULT_EVAL_BINS
        if k not in table:
            raise UsageError(f"no evaluation bin count configured for K={k}")
        return int(table[k])


@dataclass(frozen=True)
class CellResult:
    """Mean and spread of the D-ECE over repetitions (as fractions, not percent)."""

    mean: float | None
    std: float | None
    per_rep: tuple[float | None, ...]
    errors: tuple[str, ...] = ()

    @property
    def ok_repetitions(self) -> int:
        return sum(v is not None for v in self.per_rep)


@dataclass(frozen=True)
class ResultsTable:
    """Per-(method, feature set) D-ECE summary plus the uncalibrated baseline row."""

    methods: tuple[str, ...]
    feature_sets: tuple[str, ...]
    eval_feature_sets: tuple[str, ...]
    repetitions: int
    iou: float | None
    baseline: dict[str, CellResult]
    cells: dict[tuple[str, str], CellResult]


def stratified_split(
    match_labels: np.ndarray, train_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/test index split keeping both labels in the train side."""
    train_parts, test_parts = [], []
    for value in (0, 1):
        idx = np.flatnonzero(match_labels == value)
        if idx.size == 0:
            continue
        perm = rng.permutation(idx)
        n_train = int(round(train_fraction * idx.size))
        n_train = min(max(n_train, 1), idx.size)
        train_parts.append(perm[:n_train])
        test_parts.append(perm[n_train:])
    train = np.sort(np.concatenate(train_parts))
    test = np.sort(np.concatenate(test_parts)) if test_parts else np.array([], dtype=np.int64)
    if test.size == 0:
        raise DataError("split left an empty test portion; reduce the train fraction")
    return train, test


def _with_scores(samples: Sequence[MatchedSample], scores: np.ndarray) -> list[MatchedSample]:
    return [
        replace(s, detection=replace(s.detection, score=float(q)))
        for s, q in zip(samples, scores)
    ]


def _eval_spec(cfg: ProtocolConfig, eval_fs_name: str) -> BinningSpec:
    members = NAMED_FEATURE_SETS[eval_fs_name]
    k = len(members)
    return BinningSpec(
        dims=members, counts=(cfg.eval_bin_count(k),) * k, min_samples=cfg.min_samples
    )


def _run_repetition(
    samples: Sequence[MatchedSample], cfg: ProtocolConfig, rep: int
) -> tuple[dict[str, float | None], dict[tuple[str, str], float | None], list[str]]:
    rng = np.random.default_rng([cfg.seed, rep])
    m = labels(samples)
    train_idx, test_idx = stratified_split(m, cfg.train_fraction, rng)
    train = [samples[i] for i in train_idx]
    test = [samples[i] for i in test_idx]

    baseline: dict[str, float | None] = {}
    cells: dict[tuple[str, str], float | None] = {}
    errors: list[str] = []
    eval_sets = cfg.resolved_eval_sets()

    for eval_fs_name in dict.fromkeys(eval_sets):
        spec = _eval_spec(cfg, eval_fs_name)
        fs = FeatureSet(members=spec.dims)
        try:
            value, _ = compute_d_ece(test, fs, spec, renormalize=cfg.renormalize)
            baseline[eval_fs_name] = value
        except EmptyMetricError as exc:
            baseline[eval_fs_name] = None
            errors.append(f"rep {rep} baseline {eval_fs_name}: {exc}")

    for method in cfg.methods:
        for fit_fs_name, eval_fs_name in zip(cfg.feature_sets, eval_sets):
            members = NAMED_FEATURE_SETS[fit_fs_name]
            try:
                if method == "identity":
                    scores = np.array([s.detection.score for s in test])
                else:
                    model = calibrators.fit(
                        method,
                        train,
                        members,
                        bin_counts=cfg.calibration_bin_count(len(members))
                        if method == "hist_binning"
                        else None,
                        config=cfg.optimizer,
                        ridge=cfg.ridge,
                        eps=cfg.eps,
                    )
                    scores = calibrators.apply(model, test, cfg.eps)
                spec = _eval_spec(cfg, eval_fs_name)
                fs = FeatureSet(members=spec.dims)
                value, _ = compute_d_ece(
                    _with_scores(test, scores), fs, spec, renormalize=cfg.renormalize
                )
                cells[(method, fit_fs_name)] = value
            except (EmptyMetricError, ConvergenceError) as exc:
                # Fault isolation: one unevaluable cell must not kill the run.
                cells[(method, fit_fs_name)] = None
                errors.append(f"rep {rep} {method}/{fit_fs_name}: {exc}")
    return baseline, cells, errors


def _aggregate(values: list[float | None], errors: list[str]) -> CellResult:
    ok = [v for v in values if v is not None]
    if not ok:
        return CellResult(mean=None, std=None, per_rep=tuple(values), errors=tuple(errors))
    mean = float(np.mean(ok))
    std = float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0
    return CellResult(mean=mean, std=std, per_rep=tuple(values), errors=tuple(errors))


def run_protocol(
    samples: Sequence[MatchedSample],
    cfg: ProtocolConfig,
    *,
    iou: float | None = None,
    threads: int = 1,
) -> ResultsTable:
    """Run the repeated-split protocol over pre-matched samples.

    Results are identical regardless of ``threads``: repetitions are seeded
    independently and aggregated in repetition order.
    """
    if not samples:
        raise DataError("protocol needs a nonempty sample list")
    m = labels(samples)
    if m.sum() == 0 or m.sum() == len(m):
        raise DataError("protocol needs both match labels present in the samples")

    reps = range(cfg.repetitions)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda r: _run_repetition(samples, cfg, r), reps))
    else:
        outcomes = [_run_repetition(samples, cfg, r) for r in reps]

    eval_sets = cfg.resolved_eval_sets()
    baseline: dict[str, CellResult] = {}
    for fs_name in dict.fromkeys(eval_sets):
        values = [out[0][fs_name] for out in outcomes]
        errs = [e for out in outcomes for e in out[2] if f"baseline {fs_name}" in e]
        baseline[fs_name] = _aggregate(values, errs)
    cells: dict[tuple[str, str], CellResult] = {}
    for method in cfg.methods:
        for fs_name in cfg.feature_sets:
            values = [out[1][(method, fs_name)] for out in outcomes]
            errs = [e for out in outcomes for e in out[2] if f"{method}/{fs_name}" in e]
            cells[(method, fs_name)] = _aggregate(values, errs)
    return ResultsTable(
        methods=cfg.methods,
        feature_sets=cfg.feature_sets,
        eval_feature_sets=eval_sets,
        repetitions=cfg.repetitions,
        iou=iou,
        baseline=baseline,
        cells=cells,
    )


def run_protocol_with_matching(
    detections,
    ground_truth,
    cfg: ProtocolConfig,
    *,
    threads: int = 1,
) -> list[ResultsTable]:
    """Match at every configured IoU threshold and run the protocol for each."""
    thresholds = cfg.iou_thresholds or (0.6,)
    tables = []
    for threshold in thresholds:
        samples = match_detections(detections, ground_truth, threshold)
        tables.append(run_protocol(samples, cfg, iou=threshold, threads=threads))
    return tables


def _fmt_cell(cell: CellResult) -> str:
    if cell.mean is None:
        return "err"
    return f"{100.0 * cell.mean:.3f} ± {100.0 * cell.std:.3f}"


def render_table(table: ResultsTable, fmt: str = "text") -> str:
    """Serialize a results table as aligned text, CSV, or JSON (values in percent)."""
    if fmt == "text":
        return _render_text(table)
    if fmt == "csv":
        return _render_csv(table)
    if fmt == "json":
        return _render_json(table)
    raise UsageError(f"unknown table format {fmt!r}; expected text, csv, or json")


def _column_names(table: ResultsTable) -> list[str]:
    names = []
    for fit_fs, eval_fs in zip(table.feature_sets, table.eval_feature_sets):
        names.append(fit_fs if fit_fs == eval_fs else f"{fit_fs}->{eval_fs}")
    return names


def _render_text(table: ResultsTable) -> str:
    columns = _column_names(table)
    header = ["method"] + columns
    rows = [["baseline"] + [_fmt_cell(table.baseline[fs]) for fs in table.eval_feature_sets]]
    for method in table.methods:
        rows.append(
            [_METHOD_SHORT.get(method, method)]
            + [_fmt_cell(table.cells[(method, fs)]) for fs in table.feature_sets]
        )
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    title = f"D-ECE [%] over {table.repetitions} repetitions"
    if table.iou is not None:
        title += f", IoU@{table.iou:g}"
    lines.append(title)
    lines.append(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("-+-".join("-" * w for w in widths))
    for row in rows:
        lines.append(" | ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _csv_row(table, method, fit_fs, eval_fs, cell):
    return [
        method,
        fit_fs,
        eval_fs,
        "" if table.iou is None else f"{table.iou:g}",
        "" if cell.mean is None else f"{100.0 * cell.mean:.3f}",
        "" if cell.std is None else f"{100.0 * cell.std:.3f}",
        str(cell.ok_repetitions),
    ]


def _render_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["method", "feature_set", "eval_feature_set", "iou", "mean_dece_pct", "std_dece_pct", "repetitions_ok"]
    )
    for fit_fs, eval_fs in zip(table.feature_sets, table.eval_feature_sets):
        writer.writerow(_csv_row(table, "baseline", fit_fs, eval_fs, table.baseline[eval_fs]))
    for method in table.methods:
        for fit_fs, eval_fs in zip(table.feature_sets, table.eval_feature_sets):
            writer.writerow(
                _csv_row(table, _METHOD_SHORT.get(method, method), fit_fs, eval_fs, table.cells[(method, fit_fs)])
            )
    return buf.getvalue()


def _cell_json(cell: CellResult) -> dict:
    return {
        "mean_dece_pct": None if cell.mean is None else 100.0 * cell.mean,
        "std_dece_pct": None if cell.std is None else 100.0 * cell.std,
        "repetitions_ok": cell.ok_repetitions,
        "errors": list(cell.errors),
    }


def _render_json(table: ResultsTable) -> str:
    doc = {
        "repetitions": table.repetitions,
        "iou": table.iou,
        "columns": _column_names(table),
        "baseline": {fs: _cell_json(table.baseline[fs]) for fs in dict.fromkeys(table.eval_feature_sets)},
        "cells": [
            {
                "method": _METHOD_SHORT.get(method, method),
                "feature_set": fit_fs,
                "eval_feature_set": eval_fs,
                **_cell_json(table.cells[(method, fit_fs)]),
            }
            for method in table.methods
            for fit_fs, eval_fs in zip(table.feature_sets, table.eval_feature_sets)
        ],
    }
    return json.dumps(doc, indent=2) + "\n"
