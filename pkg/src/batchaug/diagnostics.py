"""Gradient-similarity and gradient-magnitude studies.

Three studies run against a fixed network state:

  correlation_study   Pearson correlation between flat per-sample gradients,
                      split into: a sample vs an augmented draw of itself,
                      two distinct samples sharing a class, and two samples
                      from different classes.  Medians with MAD dispersion.
  grad_norm_study     L2 norm of the replica-averaged gradient as the
                      replica count M grows; averaging correlated replicas
                      shrinks the norm less than averaging fresh samples
                      would, and the decay over M measures that.
  assumption_check    Whether a sample's gradient correlates more with its
                      own augmented draw than with other samples on average.

Correlations are computed over the full flattened gradient, all layers
concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import apply, draw_transform, expand_batch
from .dataio import LabeledDataset
from .errors import ContractViolation, UndefinedCorrelation
from .model import Model, batch_grad, per_sample_grads
from .rng import RngStream

DEFAULT_PAIRS = 100
CATEGORIES = ("same_augmented", "same_class", "cross_class")
GRAD_CHUNK = 128


def pearson(u: np.ndarray, v: np.ndarray) -> float:
    """Pearson correlation of two equal-length vectors, in [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape or u.size < 2:
        raise ContractViolation(
            f"pearson needs two equal vectors of length >= 2, "
            f"got {u.shape} and {v.shape}")
    uc = u - u.mean()
    vc = v - v.mean()
    uu = float(uc @ uc)
    vv = float(vc @ vc)
    if uu == 0.0 or vv == 0.0:
        raise UndefinedCorrelation("constant input has no correlation")
    # sqrt of the product keeps rho(v, v) == 1.0 to the last bit
    rho = float(uc @ vc) / np.sqrt(uu * vv)
    return float(np.clip(rho, -1.0, 1.0))


def _pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise pearson for stacked gradient pairs."""
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    aa = np.sum(ac * ac, axis=1)
    bb = np.sum(bc * bc, axis=1)
    if np.any(aa == 0.0) or np.any(bb == 0.0):
        raise UndefinedCorrelation("constant gradient row has no correlation")
    return np.clip(np.sum(ac * bc, axis=1) / np.sqrt(aa * bb), -1.0, 1.0)


def _grads_at(model: Model, images: np.ndarray, labels: np.ndarray):
    """Per-sample flat gradients, chunked to bound peak memory."""
    parts = []
    for lo in range(0, images.shape[0], GRAD_CHUNK):
        parts.append(per_sample_grads(model, images[lo:lo + GRAD_CHUNK],
                                      labels[lo:lo + GRAD_CHUNK]))
    return np.concatenate(parts, axis=0)


@dataclass
class CorrelationReport:
    rhos: dict                  # category -> (S,) correlation values
    medians: dict               # category -> median rho
    mads: dict                  # category -> median absolute deviation
    pair_count: int
    state_tag: str              # init | partial | converged (caller-defined)

    def __post_init__(self):
        for cat, med in self.medians.items():
            if not -1.0 <= med <= 1.0:
                raise ContractViolation(
                    f"median correlation for {cat} outside [-1, 1]: {med}")


def _median_mad(values: np.ndarray):
    med = float(np.median(values))
    return med, float(np.median(np.abs(values - med)))


def _draw_same_class_pairs(labels, count, stream):
    """(n, m) with equal labels, n != m; uniform over samples then partners."""
    by_label = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(int(lab), []).append(i)
    eligible = np.array([i for i, lab in enumerate(labels)
                         if len(by_label[int(lab)]) > 1])
    if eligible.size == 0:
        raise ContractViolation("no class holds two samples")
    pairs = []
    firsts = eligible[stream.randint(count, 0, eligible.size)]
    for n in firsts:
        peers = by_label[int(labels[n])]
        m = n
        while m == n:
            m = peers[int(stream.randint(1, 0, len(peers))[0])]
        pairs.append((int(n), int(m)))
    return pairs


def _draw_cross_class_pairs(labels, count, stream):
    n_total = labels.shape[0]
    if np.unique(labels).size < 2:
        raise ContractViolation("need at least two classes")
    pairs = []
    firsts = stream.randint(count, 0, n_total)
    for n in firsts:
        m = n
        while labels[m] == labels[n]:
            m = int(stream.randint(1, 0, n_total)[0])
        pairs.append((int(n), m))
    return pairs


def _augmented_images(transform, images, stream):
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        draw = draw_transform(transform, images.shape[1:], stream)
        out[i] = apply(draw, images[i])
    return out


def correlation_study(model: Model, dataset: LabeledDataset, transform,
                      pair_count: int = DEFAULT_PAIRS,
                      stream: RngStream = None,
                      state_tag: str = "init") -> CorrelationReport:
    """Median per-sample gradient correlations over three pair categories."""
    if pair_count < 1:
        raise ContractViolation("pair count must be positive")
    stream = stream or RngStream(0).split("correlation")
    labels = dataset.labels
    n_total = labels.shape[0]

    sel = stream.randint(pair_count, 0, n_total)
    aug = _augmented_images(transform, dataset.images[sel],
                            stream.split("aug"))
    same = _draw_same_class_pairs(labels, pair_count, stream.split("same"))
    cross = _draw_cross_class_pairs(labels, pair_count, stream.split("cross"))

    rhos = {}
    g_sel = _grads_at(model, dataset.images[sel], labels[sel])
    g_aug = _grads_at(model, aug, labels[sel])
    rhos["same_augmented"] = _pearson_rows(g_sel, g_aug)
    for cat, pairs in (("same_class", same), ("cross_class", cross)):
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        g_a = _grads_at(model, dataset.images[a], labels[a])
        g_b = _grads_at(model, dataset.images[b], labels[b])
        rhos[cat] = _pearson_rows(g_a, g_b)

    medians, mads = {}, {}
    for cat in CATEGORIES:
        medians[cat], mads[cat] = _median_mad(rhos[cat])
    return CorrelationReport(rhos=rhos, medians=medians, mads=mads,
                             pair_count=pair_count, state_tag=state_tag)


@dataclass
class GradNormTrace:
    rows: list                  # (replicas, repeat, norm) triples

    def __post_init__(self):
        for m, rep, norm in self.rows:
            if norm < 0:
                raise ContractViolation(
                    f"gradient norm cannot be negative at M={m} rep={rep}")

    def medians(self) -> dict:
        by_m = {}
        for m, _, norm in self.rows:
            by_m.setdefault(m, []).append(norm)
        return {m: float(np.median(v)) for m, v in sorted(by_m.items())}


def grad_norm_study(model: Model, dataset: LabeledDataset, transform,
                    m_list, repeats: int, stream: RngStream = None,
                    batch_size: int = 32) -> GradNormTrace:
    """L2 norm of the replica-averaged gradient at fixed parameters.

    Each repeat draws one base batch, expands it to M transform draws per
    sample for every M in m_list, and records the norm of the mean gradient.
    """
    if not m_list:
        raise ContractViolation("need at least one replica count")
    stream = stream or RngStream(0).split("gradnorm")
    n_total = dataset.labels.shape[0]
    rows = []
    for rep in range(repeats):
        idx = stream.split("batch", rep).randint(batch_size, 0, n_total)
        images = dataset.images[idx]
        labels = dataset.labels[idx]
        for m in m_list:
            big_images, big_labels = expand_batch(
                transform, images, labels, m, stream.split("draws", rep, m))
            _, grad = batch_grad(model, big_images, big_labels)
            rows.append((int(m), rep, float(np.linalg.norm(grad))))
    return GradNormTrace(rows=rows)


def coordinate_variance(per_sample: np.ndarray) -> np.ndarray:
    """Secondary statistic: per-coordinate sample variance of a stack of
    per-sample gradients (rows are samples)."""
    if per_sample.ndim != 2 or per_sample.shape[0] < 2:
        raise ContractViolation("need at least two gradient rows")
    return np.var(per_sample, axis=0, ddof=1)


def assumption_check(model: Model, dataset: LabeledDataset, transform,
                     pair_count: int = DEFAULT_PAIRS,
                     stream: RngStream = None):
    """Mean self-vs-augmented correlation against mean cross-sample
    correlation; returns (lhs, rhs, lhs > rhs)."""
    if pair_count < 1:
        raise ContractViolation("pair count must be positive")
    stream = stream or RngStream(0).split("assumption")
    labels = dataset.labels
    n_total = labels.shape[0]

    sel = stream.randint(pair_count, 0, n_total)
    aug = _augmented_images(transform, dataset.images[sel],
                            stream.split("aug"))
    g_sel = _grads_at(model, dataset.images[sel], labels[sel])
    g_aug = _grads_at(model, aug, labels[sel])
    lhs = float(np.mean(_pearson_rows(g_sel, g_aug)))

    others = np.empty(pair_count, dtype=np.int64)
    draws = stream.split("other")
    for i, n in enumerate(sel):
        m = int(n)
        while m == int(n):
            m = int(draws.randint(1, 0, n_total)[0])
        others[i] = m
    g_other = _grads_at(model, dataset.images[others], labels[others])
    rhs = float(np.mean(_pearson_rows(g_sel, g_other)))
    return lhs, rhs, lhs > rhs


# ---------------------------------------------------------------------------
# delimited output

def correlation_csv_rows(report: CorrelationReport):
    """`category,pair_index,rho` rows followed by per-category medians."""
    rows = ["category,pair_index,rho"]
    for cat in CATEGORIES:
        for i, rho in enumerate(report.rhos[cat]):
            rows.append(f"{cat},{i},{rho:.12g}")
    for cat in CATEGORIES:
        rows.append(f"{cat},median,{report.medians[cat]:.12g}")
    return rows


def grad_norm_csv_rows(trace: GradNormTrace):
    """`M,repeat,grad_norm` rows followed by per-M medians."""
    rows = ["M,repeat,grad_norm"]
    for m, rep, norm in trace.rows:
        rows.append(f"{m},{rep},{norm:.12g}")
    for m, med in trace.medians().items():
        rows.append(f"{m},median,{med:.12g}")
    return rows
