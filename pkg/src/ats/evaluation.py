"""Zero-shot retrieval metrics, representational similarity matrices and
seed-level robustness statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .core_math import as_matrix, cosine_similarity_matrix


@dataclass
class EvalReport:
    ranks: list[int]
    top1: float
    top5: float
    map: float
    similarity: float
    n_candidates: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def ranks_from_scores(scores, ground_truth) -> list[int]:
    """Rank of each query's ground-truth column in a (queries x candidates) score matrix.

    Ties are broken pessimistically by candidate index: a tied candidate with
    a lower index counts as ranked above the ground truth.
    """
    scores = as_matrix(scores)
    gt = np.asarray(ground_truth, dtype=np.int64)
    n_q, n_c = scores.shape
    if gt.shape != (n_q,):
        raise ValueError(f"need one ground-truth index per query ({n_q}), got {gt.shape}")
    if n_c < 1:
        raise ValueError("need at least one candidate")
    if gt.size and (gt.min() < 0 or gt.max() >= n_c):
        raise IndexError(f"ground-truth index out of range for {n_c} candidates")
    gt_scores = scores[np.arange(n_q), gt][:, None]
    above = (scores > gt_scores).sum(axis=1)
    tied_before = ((scores == gt_scores) & (np.arange(n_c)[None, :] < gt[:, None])).sum(axis=1)
    return (1 + above + tied_before).astype(int).tolist()


def rank_queries(Zb_test, Zv_candidates, ground_truth) -> list[int]:
    return ranks_from_scores(cosine_similarity_matrix(Zb_test, Zv_candidates), ground_truth)


def top_k_accuracy(ranks, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("top_k_accuracy of an empty rank list")
    return 100.0 * float(np.count_nonzero(r <= k)) / r.size


def mean_average_precision(ranks) -> float:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("mean_average_precision of an empty rank list")
    return 100.0 * float(np.mean(1.0 / r))


def similarity_score(Zb_test, Zv_paired) -> float:
    """Mean cosine between matched rows (the diagonal of the retrieval matrix)."""
    a = as_matrix(Zb_test)
    b = as_matrix(Zv_paired)
    if a.shape != b.shape:
        raise ValueError(f"similarity_score needs matched shapes, got {a.shape} and {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("similarity_score of an empty set")
    dot = np.einsum("ij,ij->i", a, b)
    # dot / sqrt(|a|^2 |b|^2) is exactly 1 for identical rows, unlike dot / (|a| |b|)
    denom = np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b))
    cos = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def make_report(ranks, similarity: float, n_candidates: int) -> EvalReport:
    return EvalReport(
        ranks=[int(r) for r in ranks],
        top1=top_k_accuracy(ranks, 1),
        top5=top_k_accuracy(ranks, 5),
        map=mean_average_precision(ranks),
        similarity=float(similarity),
        n_candidates=int(n_candidates),
    )


def episode_groups(labels, image_index) -> list[np.ndarray]:
    """Split samples into n-way episodes: episode j holds image j of every class.

    Only episodes containing every class are kept, so each one is a full
    n_classes-way retrieval task.
    """
    labels = np.asarray(labels)
    image_index = np.asarray(image_index)
    classes = np.unique(labels)
    groups = []
    for j in np.unique(image_index):
        idx = np.flatnonzero(image_index == j)
        idx = idx[np.argsort(labels[idx], kind="stable")]
        if len(idx) == len(classes) and np.array_equal(labels[idx], classes):
            groups.append(idx)
    return groups


def evaluate_retrieval(Zb, Zv, labels, image_index) -> EvalReport:
    """Run every n-way episode and pool the per-query ranks."""
    Zb = as_matrix(Zb)
    Zv = as_matrix(Zv)
    groups = episode_groups(labels, image_index)
    if not groups:
        raise ValueError("no complete retrieval episode in this split")
    ranks: list[int] = []
    for idx in groups:
        ranks.extend(rank_queries(Zb[idx], Zv[idx], np.arange(len(idx))))
    return make_report(ranks, similarity_score(Zb, Zv), len(groups[0]))


# ---------------------------------------------------------------------------
# RSA


@dataclass
class RSM:
    matrix: np.ndarray
    order: np.ndarray
    labels: np.ndarray  # labels in display order
    groups: np.ndarray  # grouping key (category) in display order
    boundaries: list[int]

    def within_across(self, exclude_diagonal: bool = True) -> tuple[float, float]:
        """Mean similarity inside vs outside the grouping blocks."""
        same = self.groups[:, None] == self.groups[None, :]
        valid = np.ones_like(same)
        if exclude_diagonal and self.matrix.shape[0] == self.matrix.shape[1]:
            np.fill_diagonal(valid, False)
        return float(self.matrix[same & valid].mean()), float(self.matrix[~same & valid].mean())

    def margin(self) -> float:
        within, across = self.within_across()
        return within - across

    def to_csv(self, path, digest: str | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            if digest:
                fh.write(f"# config_digest: {digest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + [str(int(y)) for y in self.labels])
            for y, row in zip(self.labels, self.matrix):
                w.writerow([str(int(y))] + [repr(float(v)) for v in row])
        return path


def _ordering(labels, groups):
    labels = np.asarray(labels)
    groups = labels if groups is None else np.asarray(groups)
    order = np.lexsort((labels, groups))
    g = groups[order]
    boundaries = [0] + [i for i in range(1, len(g)) if g[i] != g[i - 1]]
    return order, labels[order], g, boundaries


def compute_rsm(Z, labels, groups=None) -> RSM:
    """Self-similarity of ``Z`` with rows sorted by (group, label)."""
    order, lab, g, bounds = _ordering(labels, groups)
    Zs = as_matrix(Z)[order]
    return RSM(cosine_similarity_matrix(Zs, Zs), order, lab, g, bounds)


def cross_rsm(Za, Zb, labels, groups=None) -> RSM:
    """Cosine similarity of ``Za`` rows against ``Zb`` rows in the same ordering."""
    order, lab, g, bounds = _ordering(labels, groups)
    return RSM(cosine_similarity_matrix(as_matrix(Za)[order], as_matrix(Zb)[order]), order, lab, g, bounds)


# ---------------------------------------------------------------------------
# robustness statistics


@dataclass
class RobustnessStats:
    n: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    cohens_d: float
    zero_variance: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def cohens_d(a, b) -> tuple[float, bool]:
    """Pooled-SD effect size. Returns ``(d, zero_variance_flag)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    pooled_var = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled_var <= 0:
        return 0.0, True
    return float((a.mean() - b.mean()) / math.sqrt(pooled_var)), False


def robustness(series, baseline=None, confidence: float = 0.95) -> RobustnessStats:
    """Mean, sample SD, Student-t confidence interval and Cohen's d vs ``baseline``."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("robustness needs at least 2 observations")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1)) * sd / math.sqrt(n)
    d, flag = (0.0, False)
    if baseline is not None:
        d, flag = cohens_d(x, baseline)
    return RobustnessStats(n, mean, sd, mean - half, mean + half, d, flag)


ROBUSTNESS_COLUMNS = ["method", "n", "mean", "sd", "ci_low", "ci_high", "cohens_d"]


def write_robustness_csv(rows: dict[str, RobustnessStats], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROBUSTNESS_COLUMNS)
        for name, st in rows.items():
            w.writerow([name, st.n, st.mean, st.sd, st.ci_low, st.ci_high, st.cohens_d])
    return path
