"""Multi-label evaluation metrics.

Per-class (CP/CR/CF1) and overall (OP/OR/OF1) precision, recall, and F1 under
two selection modes: top-k per row and probability threshold. Zero
denominators contribute 0 instead of NaN because small or long-tailed evals
routinely leave classes empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataError

METRIC_NAMES = ("CP", "CR", "CF1", "OP", "OR", "OF1")


def select_predictions(
    probs: np.ndarray, k: int | None = None, threshold: float | None = None
) -> list[set[int]]:
    """Binary prediction sets per row: the k largest entries (ties to the
    lower id), or every entry strictly above the threshold."""
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise DataError(f"probability matrix must be 2-d, got shape {probs.shape}")
    n, m = probs.shape
    if (k is None) == (threshold is None):
        raise DataError("pass exactly one of k or threshold")
    if k is not None:
        if not 1 <= k <= m:
            raise DataError(f"k must be in [1, {m}], got {k}")
        out = []
        for row in probs:
            order = np.argsort(-row, kind="stable")  # stable keeps lower ids first on ties
            out.append(set(int(j) for j in order[:k]))
        return out
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    return [set(int(j) for j in np.flatnonzero(row > threshold)) for row in probs]


def confusion_counts(
    preds: Sequence[set[int]], truths: Sequence[set[int]], num_tags: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (TP, FP, FN) counts."""
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions vs {len(truths)} truths")
    tp = np.zeros(num_tags, dtype=np.int64)
    fp = np.zeros(num_tags, dtype=np.int64)
    fn = np.zeros(num_tags, dtype=np.int64)
    for pred, truth in zip(preds, truths):
        for j in pred:
            if j in truth:
                tp[j] += 1
            else:
                fp[j] += 1
        for j in truth - pred:
            fn[j] += 1
    return tp, fp, fn


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def aggregate(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> dict[str, float]:
    """The six percentages at full precision. Per-class means count every
    class, with zero-denominator classes contributing 0."""
    cp = float(_safe_div(tp.astype(np.float64), (tp + fp).astype(np.float64)).mean()) * 100.0
    cr = float(_safe_div(tp.astype(np.float64), (tp + fn).astype(np.float64)).mean()) * 100.0
    cf1 = 2.0 * cp * cr / (cp + cr) if (cp + cr) > 0 else 0.0
    tp_sum, fp_sum, fn_sum = float(tp.sum()), float(fp.sum()), float(fn.sum())
    op = 100.0 * tp_sum / (tp_sum + fp_sum) if (tp_sum + fp_sum) > 0 else 0.0
    orr = 100.0 * tp_sum / (tp_sum + fn_sum) if (tp_sum + fn_sum) > 0 else 0.0
    of1 = 2.0 * op * orr / (op + orr) if (op + orr) > 0 else 0.0
    return {"CP": cp, "CR": cr, "CF1": cf1, "OP": op, "OR": orr, "OF1": of1}


@dataclass
class MetricsReport:
    per_k: dict[int, dict[str, float]]
    threshold_mode: dict[str, float]
    threshold: float
    n_eval: int

    def __post_init__(self) -> None:
        for values in list(self.per_k.values()) + [self.threshold_mode]:
            for name in METRIC_NAMES:
                v = values[name]
                if not 0.0 <= v <= 100.0:
                    raise DataError(f"{name} = {v} outside [0, 100]")

    def to_dict(self) -> dict:
        return {
            "per_k": {str(k): dict(v) for k, v in self.per_k.items()},
            "threshold_mode": dict(self.threshold_mode),
            "threshold": self.threshold,
            "n_eval": self.n_eval,
        }


def report(
    probs: np.ndarray,
    truths: Sequence[set[int]],
    ks: Sequence[int] = (1, 3, 5),
    threshold: float = 0.5,
) -> MetricsReport:
    """Runs select -> counts -> aggregate for every k and for the threshold
    mode; percentages are rounded to 2 decimals for reporting."""
    probs = np.asarray(probs)
    n, m = probs.shape
    if len(truths) != n:
        raise DataError(f"{len(truths)} truth sets for {n} probability rows")
    per_k = {}
    for k in ks:
        preds = select_predictions(probs, k=k)
        values = aggregate(*confusion_counts(preds, truths, m))
        per_k[int(k)] = {name: round(v, 2) for name, v in values.items()}
    preds_t = select_predictions(probs, threshold=threshold)
    values_t = aggregate(*confusion_counts(preds_t, truths, m))
    threshold_mode = {name: round(v, 2) for name, v in values_t.items()}
    return MetricsReport(
        per_k=per_k, threshold_mode=threshold_mode, threshold=threshold, n_eval=n
    )


def save_probability_dump(
    path: str | Path, probs: np.ndarray, vocab_hash: str
) -> None:
    """Binary matrix dump: one JSON header line (n, m, vocab hash, dtype),
    then the row-major little-endian float32 payload."""
    probs = np.ascontiguousarray(np.asarray(probs, dtype="<f4"))
    header = {
        "n": int(probs.shape[0]),
        "m": int(probs.shape[1]),
        "vocab_hash": vocab_hash,
        "dtype": "<f4",
    }
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(probs.tobytes())


def load_probability_dump(path: str | Path) -> tuple[np.ndarray, dict]:
    with Path(path).open("rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    n, m = header["n"], header["m"]
    probs = np.frombuffer(payload, dtype=header["dtype"]).reshape(n, m).copy()
    return probs, header
