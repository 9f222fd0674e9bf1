"""Label fusion: top-n selection, majority voting, binary STAPLE, thresholding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyLabelError, GridMismatchError
from .volume import LabelMap

STAPLE_TOL = 1e-6
STAPLE_MAX_ITERS = 100
_PQ_CLIP = (1e-6, 1.0 - 1e-6)


def rank_select(results: list[tuple[str, float]], n: int = 4) -> list[str]:
    """The n atlas ids with the highest similarity; ties break by id ascending."""
    if n > len(results):
        raise ValueError(f"asked for top {n} of {len(results)} results")
    ordered = sorted(results, key=lambda item: (-item[1], item[0]))
    return [atlas_id for atlas_id, _ in ordered[:n]]


def _check_grids(labels: list[LabelMap]):
    if not labels:
        raise EmptyLabelError("no labels to fuse")
    first = labels[0]
    for lab in labels[1:]:
        if not first.same_grid(lab):
            raise GridMismatchError("labels must share one grid")


def majority_vote(labels: list[LabelMap]) -> LabelMap:
    """Foreground where strictly more than half of the raters agree."""
    _check_grids(labels)
    votes = np.zeros(labels[0].dims, dtype=np.int32)
    for lab in labels:
        votes += (lab.data > 0)
    fused = (votes * 2 > len(labels)).astype(np.uint8)
    return LabelMap(fused, labels[0].spacing, labels[0].origin)


@dataclass(frozen=True)
class RaterPerformance:
    rater_id: str
    sensitivity: float  # p
    specificity: float  # q


@dataclass(frozen=True)
class StapleResult:
    probability: LabelMap
    raters: tuple[RaterPerformance, ...]
    n_iterations: int
    log_likelihood_trace: tuple[float, ...]


def staple_fuse(labels: list[LabelMap], prior: float | None = None,
                tol: float = STAPLE_TOL, rater_ids: list[str] | None = None) -> StapleResult:
    """Binary STAPLE via EM.

    E-step: per-voxel posterior foreground probability given (p_r, q_r) and a
    spatially uniform prior; M-step: re-estimate each rater's sensitivity and
    specificity from the posteriors. The observed-data log-likelihood is
    tracked and must not decrease (EM guarantee, asserted by the tests).
    """
    _check_grids(labels)
    if len(labels) < 2:
        raise ValueError("STAPLE needs at least 2 raters")
    d = np.stack([lab.data.ravel() > 0 for lab in labels], axis=0)  # (R, V)
    n_raters, n_vox = d.shape
    if not d.any():
        raise EmptyLabelError("all raters are empty")
    if rater_ids is None:
        rater_ids = [f"rater{i}" for i in range(n_raters)]

    if prior is None:
        prior = float(d.mean())
    prior = float(np.clip(prior, *_PQ_CLIP))

    p = np.full(n_raters, 0.9)
    q = np.full(n_raters, 0.9)
    ll_trace = []
    w = None
    for iteration in range(1, STAPLE_MAX_ITERS + 1):
        # E-step in log space; product over raters of f(D_r | T)
        log_f1 = np.where(d, np.log(p)[:, None], np.log1p(-p)[:, None]).sum(axis=0)
        log_f0 = np.where(d, np.log1p(-q)[:, None], np.log(q)[:, None]).sum(axis=0)
        a = np.log(prior) + log_f1
        b = np.log1p(-prior) + log_f0
        m = np.maximum(a, b)
        log_norm = m + np.log(np.exp(a - m) + np.exp(b - m))
        ll_trace.append(float(log_norm.sum()))
        w = np.exp(a - log_norm)

        sum_w = w.sum()
        sum_not_w = n_vox - sum_w
        new_p = (d @ w) / max(sum_w, 1e-300)
        new_q = ((~d) @ (1.0 - w)) / max(sum_not_w, 1e-300)
        new_p = np.clip(new_p, *_PQ_CLIP)
        new_q = np.clip(new_q, *_PQ_CLIP)
        delta = max(np.max(np.abs(new_p - p)), np.max(np.abs(new_q - q)))
        p, q = new_p, new_q
        if delta < tol:
            break

    prob = w.reshape(labels[0].dims)
    fused = LabelMap(
        (prob > 0.5).astype(np.uint8), labels[0].spacing, labels[0].origin, probability=prob
    )
    raters = tuple(
        RaterPerformance(rater_ids[i], float(p[i]), float(q[i])) for i in range(n_raters)
    )
    return StapleResult(
        probability=fused, raters=raters, n_iterations=iteration,
        log_likelihood_trace=tuple(ll_trace),
    )


def binarize_probability(prob: LabelMap, threshold: float = 0.8) -> LabelMap:
    """Foreground where the probability channel strictly exceeds the threshold."""
    if prob.probability is None:
        raise ValueError("label map has no probability channel")
    out = (prob.probability > threshold).astype(np.uint8)
    return LabelMap(out, prob.spacing, prob.origin)
