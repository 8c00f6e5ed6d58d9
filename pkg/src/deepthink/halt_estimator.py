"""Test-time iteration selection from auxiliary (rotation) accuracy.

The test stream is run for a fixed budget of iterations. For each iteration we
count how many rotation predictions are correct; the iteration with the best
rotation accuracy is then used to read out the main task. Main-task labels,
when available, are only used to report how far that choice is from the true
best iteration.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .ndtensor import Tensor, log_softmax


@dataclass
class IterationCurve:
    t_test: int
    correct_aux: np.ndarray = None
    correct_main: np.ndarray = None
    total: int = 0
    has_main: bool = False

    def __post_init__(self):
        if self.correct_aux is None:
            self.correct_aux = np.zeros(self.t_test, dtype=np.int64)
        if self.correct_main is None:
            self.correct_main = np.zeros(self.t_test, dtype=np.int64)

    def merge(self, other: "IterationCurve") -> "IterationCurve":
        if other.t_test != self.t_test:
            raise ShapeError(f"cannot merge curves of length {self.t_test} and {other.t_test}")
        return IterationCurve(
            self.t_test,
            self.correct_aux + other.correct_aux,
            self.correct_main + other.correct_main,
            self.total + other.total,
            self.has_main or other.has_main,
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, IterationCurve)
            and self.t_test == other.t_test
            and self.total == other.total
            and np.array_equal(self.correct_aux, other.correct_aux)
            and np.array_equal(self.correct_main, other.correct_main)
        )


@dataclass
class TOptReport:
    t_opt: int
    acc_aux: np.ndarray
    acc_main: Optional[np.ndarray] = None
    acc_main_at_topt: Optional[float] = None
    acc_main_max: Optional[float] = None
    t_best: Optional[int] = None
    gap: Optional[float] = None
    correlation: Optional[float] = None

    def summary(self) -> dict:
        out = {"t_opt": self.t_opt, "acc_aux_at_topt": float(self.acc_aux[self.t_opt - 1])}
        if self.acc_main is not None:
            out.update(
                acc_main_at_topt=self.acc_main_at_topt,
                acc_main_max=self.acc_main_max,
                t_best=self.t_best,
                gap=self.gap,
                correlation=self.correlation,
            )
        return out


def _predictions(logits) -> np.ndarray:
    return _data(logits).argmax(axis=1)


def accumulate_batch(curve: IterationCurve, outputs, aux_labels, main_labels=None) -> IterationCurve:
    """Add one batch of per-iteration predictions to ``curve`` (in place)."""
    aux_labels = np.asarray(aux_labels).reshape(-1)
    n = aux_labels.shape[0]
    if n == 0:
        return curve
    if len(outputs.logits_aux) != curve.t_test:
        raise ShapeError(f"outputs cover {len(outputs.logits_aux)} iterations, curve expects {curve.t_test}")
    for t, logits in enumerate(outputs.logits_aux):
        curve.correct_aux[t] += int((_predictions(logits) == aux_labels).sum())
    if main_labels is not None:
        main_labels = np.asarray(main_labels).reshape(-1)
        if main_labels.shape[0] != n:
            raise ShapeError("main and aux label counts differ")
        for t, logits in enumerate(outputs.logits_main):
            curve.correct_main[t] += int((_predictions(logits) == main_labels).sum())
        curve.has_main = True
    curve.total += n
    return curve


def aux_likelihoods(outputs, aux_labels) -> np.ndarray:
    """Softmax probability of the true rotation, shape [T, N].

    Lets a user inspect which samples the rotation task finds hard.
    """
    aux_labels = np.asarray(aux_labels).reshape(-1)
    rows = np.arange(aux_labels.shape[0])
    return np.stack([np.exp(log_softmax(_data(z))[rows, aux_labels]) for z in outputs.logits_aux])


def _data(logits) -> np.ndarray:
    # ndarray also has a .data attribute (a memoryview), so check the type
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def finalize(curve: IterationCurve) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if curve.total <= 0:
        raise ContractError("no samples were accumulated")
    acc_aux = curve.correct_aux / curve.total
    acc_main = curve.correct_main / curve.total if curve.has_main else None
    return acc_aux, acc_main


def select_t_opt(acc_aux: Sequence[float]) -> int:
    """1-based argmax; ties go to the earliest (cheapest) iteration."""
    acc = np.asarray(acc_aux, dtype=np.float64)
    if acc.size == 0:
        raise ContractError("empty accuracy curve")
    return int(np.argmax(acc)) + 1


def correlation_diagnostic(acc_aux, acc_main) -> float:
    """Pearson correlation; NaN when either series is constant."""
    a = np.asarray(acc_aux, dtype=np.float64)
    b = np.asarray(acc_main, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ShapeError("correlation needs two equal-length series of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


def report(curve: IterationCurve) -> TOptReport:
    acc_aux, acc_main = finalize(curve)
    t_opt = select_t_opt(acc_aux)
    rep = TOptReport(t_opt=t_opt, acc_aux=acc_aux)
    if acc_main is not None:
        rep.acc_main = acc_main
        rep.acc_main_at_topt = float(acc_main[t_opt - 1])
        rep.t_best = select_t_opt(acc_main)
        rep.acc_main_max = float(acc_main.max())
        rep.gap = rep.acc_main_max - rep.acc_main_at_topt
        if acc_aux.size >= 2:
            rep.correlation = correlation_diagnostic(acc_aux, acc_main)
    return rep


def curve_for_batch(net, X, aux_labels, main_labels, t_test: int) -> IterationCurve:
    """Run one batch for ``t_test`` iterations and count correct predictions."""
    from .network import forward_iterate

    curve = IterationCurve(t_test)
    outputs = forward_iterate(net, X, t_test, keep_hidden=False)
    return accumulate_batch(curve, outputs, aux_labels, main_labels)


def estimate_curve(
    net,
    batches: Iterable[tuple],
    t_test: int,
    workers: int = 1,
) -> IterationCurve:
    """Accumulate per-iteration correct counts over all batches.

    ``batches`` yields ``(X, aux_labels, main_labels_or_None)``. The network
    must be in eval mode; with ``workers > 1`` batches run in a thread pool and
    the partial curves are summed, which is order independent.
    """
    batches = list(batches)
    curve = IterationCurve(t_test)
    if workers <= 1:
        for X, aux, main in batches:
            curve = curve.merge(curve_for_batch(net, X, aux, main, t_test))
        return curve
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda b: curve_for_batch(net, b[0], b[1], b[2], t_test), batches))
    for part in parts:
        curve = curve.merge(part)
    return curve


def write_curve_csv(path, curve: IterationCurve) -> None:
    acc_aux, acc_main = finalize(curve)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "correct_aux", "correct_main", "total", "acc_aux", "acc_main"])
        for t in range(curve.t_test):
            w.writerow(
                [
                    t + 1,
                    int(curve.correct_aux[t]),
                    int(curve.correct_main[t]) if curve.has_main else "",
                    curve.total,
                    repr(float(acc_aux[t])),
                    repr(float(acc_main[t])) if acc_main is not None else "",
                ]
            )
