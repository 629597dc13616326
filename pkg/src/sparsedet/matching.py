"""One-to-one assignment between ground-truth objects and proposals.

The cost of pairing ground truth ``g`` with proposal ``n`` combines a
focal classification term, an L1 distance between normalized center-size
boxes, and a (1 - GIoU) term, with configurable coefficients. A
Kuhn-Munkres solver returns the minimum-total-cost injective assignment;
an exhaustive enumerator serves as its oracle on small instances.

Matching always runs on plain numpy values: the assignment is discrete,
so no gradient flows through it. Gradients enter only via the loss terms
evaluated on the matched pairs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import geometry
from .exceptions import SizeError
from .autodiff import ContractError

PROB_EPS = 1e-8
BRUTE_FORCE_MAX_GT = 8


@dataclass
class MatchResult:
    """Injective assignment of ground-truth objects to proposals.

    ``assignment`` lists (gt_index, proposal_index) pairs, one per ground
    truth, with pairwise-distinct proposal indices. ``total_cost`` is the
    sum of the assigned cost entries.
    """

    assignment: list[tuple[int, int]]
    total_cost: float

    @property
    def proposal_indices(self) -> np.ndarray:
        return np.array([n for _, n in self.assignment], dtype=np.intp)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for g, _ in self.assignment], dtype=np.intp)


def focal_cost(p: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Positive-term focal penalty -alpha * (1-p)^gamma * log(p) on probabilities."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def build_cost_matrix(
    class_probs: np.ndarray,
    pred_boxes: np.ndarray,
    gt_labels: np.ndarray,
    gt_boxes: np.ndarray,
    lambda_cls: float = 2.0,
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> np.ndarray:
    """Cost of assigning each ground truth to each proposal, shape (G, N).

    ``class_probs`` are post-sigmoid per-class probabilities (N, K);
    boxes are normalized center-size form. Requires G <= N so an
    injective assignment exists.
    """
    class_probs = np.asarray(class_probs, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    num_gt, num_prop = gt_labels.shape[0], class_probs.shape[0]
    if num_gt > num_prop:
        raise ContractError(
            f"cannot match {num_gt} ground-truth objects to {num_prop} proposals injectively"
        )
    cls_term = focal_cost(class_probs[:, gt_labels].T, alpha, gamma)  # (G, N)
    l1_term = np.abs(gt_boxes[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    giou_term = 1.0 - geometry.pairwise_giou(
        geometry.cxcywh_to_xyxy(gt_boxes), geometry.cxcywh_to_xyxy(pred_boxes)
    )
    return lambda_cls * cls_term + lambda_l1 * l1_term + lambda_giou * giou_term


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost injective assignment of rows (ground truths) to columns.

    Kuhn-Munkres with row/column potentials on the G x N rectangle,
    padded to square with a large sentinel so dummy rows never displace a
    cheaper real pairing.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {cost.shape}")
    num_gt, num_prop = cost.shape
    if num_gt > num_prop:
        raise ContractError(
            f"cannot match {num_gt} ground-truth objects to {num_prop} proposals injectively"
        )
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    if num_gt == 0:
        return MatchResult([], 0.0)

    n = num_prop
    if num_gt < n:
        sentinel = float(cost.max()) + 1.0 if cost.size else 1.0
        square = np.full((n, n), sentinel, dtype=np.float64)
        square[:num_gt] = cost
    else:
        square = cost

    # Potentials u (rows), v (columns); col_match[j] = row assigned to j.
    # Index 0 is a virtual column used to seed each augmenting search.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_match = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for row in range(1, n + 1):
        col_match[0] = row
        j0 = 0
        min_slack = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_match[j0]
            free = ~used
            free[0] = False
            idx = np.nonzero(free)[0]
            slack = square[i0 - 1, idx - 1] - u[i0] - v[idx]
            better = slack < min_slack[idx]
            min_slack[idx] = np.where(better, slack, min_slack[idx])
            way[idx[better]] = j0
            j1 = idx[np.argmin(min_slack[idx])]
            delta = min_slack[j1]
            u[col_match[used]] += delta
            v[used] -= delta
            min_slack[~used] -= delta
            j0 = j1
            if col_match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_match[j0] = col_match[j1]
            j0 = j1

    assignment = []
    for j in range(1, n + 1):
        row = int(col_match[j]) - 1
        if 0 <= row < num_gt:
            assignment.append((row, j - 1))
    assignment.sort()
    total = float(sum(cost[g, p] for g, p in assignment))
    return MatchResult(assignment, total)


_PERM_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _permutations(num_gt: int, num_prop: int) -> np.ndarray:
    key = (num_gt, num_prop)
    if key not in _PERM_CACHE:
        perms = np.array(
            list(itertools.permutations(range(num_prop), num_gt)), dtype=np.intp
        )
        _PERM_CACHE[key] = perms
    return _PERM_CACHE[key]


def brute_force_match(cost: np.ndarray) -> MatchResult:
    """Exhaustively enumerate injective assignments and return the cheapest.

    Enumeration order is lexicographic in the proposal-index tuple, and
    the first minimum wins, which fixes tie-breaking deterministically.
    Limited to G <= 8 ground truths (factorial growth).
    """
    cost = np.asarray(cost, dtype=np.float64)
    num_gt, num_prop = cost.shape
    if num_gt > BRUTE_FORCE_MAX_GT:
        raise SizeError(
            f"brute_force_match supports at most {BRUTE_FORCE_MAX_GT} ground truths, got {num_gt}"
        )
    if num_gt > num_prop:
        raise ContractError(
            f"cannot match {num_gt} ground-truth objects to {num_prop} proposals injectively"
        )
    if num_gt == 0:
        return MatchResult([], 0.0)
    perms = _permutations(num_gt, num_prop)
    totals = cost[np.arange(num_gt), perms].sum(axis=1)
    best = int(np.argmin(totals))  # first occurrence = lexicographic winner
    assignment = [(g, int(p)) for g, p in enumerate(perms[best])]
    return MatchResult(assignment, float(totals[best]))
