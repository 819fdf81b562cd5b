"""Tag vocabulary construction tooling.

Builds candidate tag clusters from a keyword corpus: TF-IDF features over
whitespace tokens (tokenizer injectable), Lloyd k-means with k-means++ seeding
and restarts, a two-phase coarse-to-fine elbow search over k, and the
two-of-three annotator agreement rule. Expert cluster naming stays manual; the
report emits top terms per cluster as a naming worksheet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DataError

DEFAULT_STOP_TOKENS = frozenset(
    """a an the and or of to in on at for with is are was be this that it its as by
    from not no so too very & + - _ / \\ | ~ * # @ % ^ ( ) [ ] { } < > = : ; , . ! ?
    '' "" ... --""".split()
)


def strip_stop_tokens(
    entries: Sequence[Sequence[str]],
    stop_tokens: frozenset[str] | set[str] = DEFAULT_STOP_TOKENS,
) -> list[list[str]]:
    """Drops stop tokens from each tokenized entry and drops entries that
    become empty."""
    kept = []
    for entry in entries:
        toks = [t for t in entry if t not in stop_tokens]
        if toks:
            kept.append(toks)
    return kept


@dataclass
class KeywordCorpus:
    """One entry per keyword phrase; tokenization is injected (default
    whitespace split) because the upstream segmenter is language-specific."""

    keywords: list[str]
    tokenizer: Callable[[str], list[str]] = field(default=str.split)

    def __post_init__(self) -> None:
        if not self.keywords:
            raise DataError("keyword corpus is empty")
        for i, entry in enumerate(self.keywords):
            if not self.tokenizer(entry):
                raise DataError(f"keyword entry {i} has no tokens: {entry!r}")

    @classmethod
    def from_file(cls, path: str | Path, tokenizer: Callable[[str], list[str]] = str.split):
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        return cls(keywords=lines, tokenizer=tokenizer)

    def tokens(self) -> list[list[str]]:
        return [self.tokenizer(entry) for entry in self.keywords]


def tfidf_vocabulary(corpus: KeywordCorpus) -> list[str]:
    """Sorted unique tokens; defines the column order of tfidf_features."""
    vocab = sorted({t for entry in corpus.tokens() for t in entry})
    if not vocab:
        raise DataError("empty vocabulary after filtering")
    return vocab


def tfidf_features(corpus: KeywordCorpus) -> np.ndarray:
    """TF-IDF matrix, one L2-normalized row per keyword entry.

    idf(t) = ln((1 + N) / (1 + df(t))) + 1, the smoothed form that never
    divides by zero. Columns follow tfidf_vocabulary order.
    """
    docs = corpus.tokens()
    vocab = tfidf_vocabulary(corpus)
    col = {t: j for j, t in enumerate(vocab)}
    n = len(docs)
    counts = np.zeros((n, len(vocab)), dtype=np.float64)
    df = np.zeros(len(vocab), dtype=np.float64)
    for i, doc in enumerate(docs):
        for t in doc:
            counts[i, col[t]] += 1.0
        for t in set(doc):
            df[col[t]] += 1.0
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    mat = counts * idf[None, :]
    norms = np.linalg.norm(mat, axis=1)
    if (norms == 0).any():
        bad = int(np.flatnonzero(norms == 0)[0])
        raise DataError(f"entry {bad} has an all-zero feature row")
    return mat / norms[:, None]


@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray  # (n,) int cluster ids
    centroids: np.ndarray  # (k, V)
    sse: float
    iterations: int
    sse_history: list[float]  # per-iteration sse of the winning restart


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkv,nkv->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            # all remaining mass collapsed onto existing centers; pick any
            # not-yet-chosen row so k distinct slots still get filled
            remaining = [i for i in range(n) if i not in set(chosen)]
            idx = remaining[int(rng.integers(0, len(remaining)))]
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> ClusterResult:
    k = centers.shape[0]
    assignments = np.full(points.shape[0], -1, dtype=np.int64)
    history: list[float] = []
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centers)
        new_assign = d2.argmin(axis=1)
        sse = float(d2[np.arange(points.shape[0]), new_assign].sum())
        history.append(sse)
        for c in range(k):
            mask = new_assign == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
            else:
                # empty cluster, grab the point currently worst-served
                far = int(d2[np.arange(points.shape[0]), new_assign].argmax())
                centers[c] = points[far]
                new_assign[far] = c
        if (new_assign == assignments).all():
            assignments = new_assign
            break
        assignments = new_assign
    d2 = _sq_dists(points, centers)
    final = d2.argmin(axis=1)
    sse = float(d2[np.arange(points.shape[0]), final].sum())
    history.append(sse)
    return ClusterResult(
        k=k, assignments=final, centroids=centers, sse=sse, iterations=len(history) - 1,
        sse_history=history,
    )


def kmeans_cluster(
    features: np.ndarray, k: int, seed: int, restarts: int = 4, max_iter: int = 300
) -> ClusterResult:
    """Best of ``restarts`` Lloyd runs (lowest sse; ties keep the lowest
    restart index)."""
    if k <= 0:
        raise DataError(f"k must be positive, got {k}")
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or k > points.shape[0]:
        raise DataError(f"k={k} exceeds the {points.shape[0]} feature rows")
    if restarts < 1:
        raise DataError(f"restarts must be >= 1, got {restarts}")
    best: ClusterResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers = _kmeans_pp_init(points, k, rng)
        result = _lloyd(points, centers, max_iter)
        if best is None or result.sse < best.sse:
            best = result
    assert best is not None
    return best


@dataclass
class ElbowResult:
    k: int
    no_knee: bool
    coarse_curve: list[tuple[int, float]]
    fine_curve: list[tuple[int, float]]


def _knee_index(ks: Sequence[int], sses: Sequence[float]) -> int | None:
    """Index of max perpendicular distance to the endpoint chord, in raw
    units; None when the curve is (numerically) linear."""
    p1 = np.array([ks[0], sses[0]], dtype=np.float64)
    p2 = np.array([ks[-1], sses[-1]], dtype=np.float64)
    chord = p2 - p1
    norm = float(np.hypot(*chord))
    if norm == 0.0:
        return None
    dists = []
    for x, y in zip(ks, sses):
        v = np.array([x, y], dtype=np.float64) - p1
        dists.append(abs(float(chord[0] * v[1] - chord[1] * v[0])) / norm)
    scale = max(1.0, float(np.max(np.abs(sses))))
    best = int(np.argmax(dists))
    if dists[best] <= 1e-9 * scale:
        return None
    return best


def elbow_search(
    features: np.ndarray,
    k_min: int,
    k_max: int,
    coarse_step: int,
    seed: int,
    restarts: int = 4,
    sse_fn: Callable[[np.ndarray, int, int], float] | None = None,
) -> ElbowResult:
    """Two-phase knee finder over the SSE-vs-k curve.

    Coarse phase sweeps [k_min, k_max] at ``coarse_step`` and takes the point
    of maximum perpendicular distance from the endpoint chord; the fine phase
    re-sweeps [knee, knee + coarse_step] at step 1. A coarse_step of 1 is
    already at unit resolution, so the coarse knee is returned directly.
    ``sse_fn(features, k, seed)`` is injectable for testing.
    """
    if k_min >= k_max:
        raise DataError(f"need k_min < k_max, got [{k_min}, {k_max}]")
    if coarse_step < 1:
        raise DataError(f"coarse_step must be >= 1, got {coarse_step}")
    if sse_fn is None:
        def sse_fn(feats: np.ndarray, k: int, s: int) -> float:
            return kmeans_cluster(feats, k, s, restarts=restarts).sse

    coarse_ks = list(range(k_min, k_max + 1, coarse_step))
    if len(coarse_ks) < 3:
        raise DataError(
            f"coarse sweep over [{k_min}, {k_max}] step {coarse_step} has "
            f"{len(coarse_ks)} points; need at least 3"
        )
    coarse_sse = [float(sse_fn(features, k, seed)) for k in coarse_ks]
    coarse_curve = list(zip(coarse_ks, coarse_sse))
    idx = _knee_index(coarse_ks, coarse_sse)
    if idx is None:
        return ElbowResult(k=k_min, no_knee=True, coarse_curve=coarse_curve, fine_curve=[])
    knee = coarse_ks[idx]
    if coarse_step == 1:
        return ElbowResult(k=knee, no_knee=False, coarse_curve=coarse_curve, fine_curve=[])

    fine_ks = list(range(knee, min(knee + coarse_step, k_max) + 1))
    if len(fine_ks) < 3:
        raise DataError(
            f"fine sweep over [{fine_ks[0]}, {fine_ks[-1]}] has {len(fine_ks)} "
            f"points; need at least 3"
        )
    fine_sse = [float(sse_fn(features, k, seed)) for k in fine_ks]
    fine_curve = list(zip(fine_ks, fine_sse))
    fidx = _knee_index(fine_ks, fine_sse)
    fine_k = knee if fidx is None else fine_ks[fidx]
    return ElbowResult(k=fine_k, no_knee=False, coarse_curve=coarse_curve, fine_curve=fine_curve)


def majority_tag(
    first: set[str], second: set[str], third: set[str]
) -> tuple[set[str], bool]:
    """Two-of-three agreement: a tag counts when at least two annotators chose
    it; an empty result routes the item to discussion."""
    tally: dict[str, int] = {}
    for ann in (first, second, third):
        for tag in ann:
            tally[tag] = tally.get(tag, 0) + 1
    effective = {tag for tag, c in tally.items() if c >= 2}
    return effective, not effective


def cluster_report(
    corpus: KeywordCorpus,
    result: ClusterResult,
    elbow: ElbowResult | None = None,
    top_terms: int = 5,
) -> dict:
    """JSON-ready report: k, sse, assignments, and per-cluster top TF-IDF
    terms to serve as a manual naming worksheet."""
    vocab = tfidf_vocabulary(corpus)
    worksheets = []
    for c in range(result.k):
        weights = result.centroids[c]
        order = sorted(range(len(vocab)), key=lambda j: (-weights[j], vocab[j]))
        terms = [vocab[j] for j in order[:top_terms] if weights[j] > 0]
        worksheets.append({"cluster": c, "top_terms": terms})
    report = {
        "k": result.k,
        "sse": result.sse,
        "assignments": [int(a) for a in result.assignments],
        "clusters": worksheets,
    }
    if elbow is not None:
        report["elbow"] = {
            "selected_k": elbow.k,
            "no_knee": elbow.no_knee,
            "coarse_curve": [[k, s] for k, s in elbow.coarse_curve],
            "fine_curve": [[k, s] for k, s in elbow.fine_curve],
        }
    return report


def save_cluster_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
