"""Per-iteration overthinking traces and spatial state-norm heatmaps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ndtensor import Tensor, log_softmax

TRACE_FIELDS = ("t", "delta_norm", "loss_main", "loss_aux", "acc_main", "acc_aux")


@dataclass
class IterationTrace:
    delta_norm: np.ndarray
    loss_main: np.ndarray
    loss_aux: np.ndarray
    acc_main: np.ndarray
    acc_aux: np.ndarray

    def __len__(self) -> int:
        return len(self.delta_norm)


def _ce_and_acc(logits: Tensor, labels: np.ndarray) -> tuple[float, float]:
    logp = log_softmax(logits.data)
    rows = np.arange(len(labels))
    return float(-logp[rows, labels].mean()), float((logp.argmax(1) == labels).mean())


def state_delta_norms(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Per-sample Frobenius norm of cur - prev over (C, H, W)."""
    d = (cur - prev).reshape(cur.shape[0], -1)
    return np.sqrt((d * d).sum(axis=1))


def trace(net, X, labels_main, labels_aux, T: int, keep_states: bool = False):
    """Run T iterations once and record norms, losses and accuracies per step.

    Returns the trace, and the stacked states [T+1, N, C, H, W] (h_0 first)
    when ``keep_states`` is set.
    """
    labels_main = np.asarray(labels_main, dtype=np.int64)
    labels_aux = np.asarray(labels_aux, dtype=np.int64)
    cols = {k: np.zeros(T) for k in TRACE_FIELDS[1:]}
    prev = net.input_transform(X).data
    states = [prev] if keep_states else None
    for t, h in enumerate(net.iterate(X, T)):
        cols["delta_norm"][t] = state_delta_norms(prev, h.data).mean()
        main, aux = net.heads(h)
        cols["loss_main"][t], cols["acc_main"][t] = _ce_and_acc(main, labels_main)
        cols["loss_aux"][t], cols["acc_aux"][t] = _ce_and_acc(aux, labels_aux)
        prev = h.data
        if keep_states:
            states.append(prev)
    result = IterationTrace(**cols)
    if keep_states:
        return result, np.stack(states)
    return result


def norm_map(state: np.ndarray) -> np.ndarray:
    """Channel-wise L2 norm at every spatial site of a [C, H, W] state."""
    return np.sqrt((state * state).sum(axis=0))


def heatmap(net, image: np.ndarray, t_list: Sequence[int]) -> dict[int, np.ndarray]:
    """Norm maps of a single image's state at each requested iteration (t=0 is h_0)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    wanted = sorted(set(int(t) for t in t_list))
    maps = {}
    if 0 in wanted:
        maps[0] = norm_map(net.input_transform(image).data[0])
    last = max(wanted) if wanted else 0
    if last >= 1:
        for t, h in enumerate(net.iterate(image, last), start=1):
            if t in wanted:
                maps[t] = norm_map(h.data[0])
    return maps


def write_trace_csv(path, tr: IterationTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for t in range(len(tr)):
            w.writerow([t + 1] + [repr(float(getattr(tr, k)[t])) for k in TRACE_FIELDS[1:]])


def read_trace_csv(path) -> IterationTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return IterationTrace(*(np.array([float(r[k]) for r in rows]) for k in TRACE_FIELDS[1:]))


def write_heatmap_csv(path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


def write_heatmaps(out_dir, maps: dict, prefix: str = "heatmap") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for t, grid in sorted(maps.items()):
        p = out_dir / f"{prefix}_t{t:03d}.csv"
        write_heatmap_csv(p, grid)
        paths.append(p)
    return paths


def fixed_point_from(tr: IterationTrace, tol: float = 0.0) -> Optional[int]:
    """First 1-based t after which every delta norm is <= tol, if any."""
    above = np.nonzero(tr.delta_norm > tol)[0]
    if above.size == 0:
        return 1
    k = int(above[-1]) + 2
    return k if k <= len(tr) else None
