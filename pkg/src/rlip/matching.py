"""Bipartite assignment between predicted triplets and ground truth.

The cost combines class agreement, relation score agreement and box
quality:

    cost(i, j) = w_cls * [(1 - p_subj(i, s_j)) + (1 - p_obj(i, o_j))]
               + w_rel * mean_{k positive for j} (1 - rel_score(i, k))
               + max over {subject, object} of
                     [w_l1 * mean|coord diff| + w_giou * (1 - giou)]

Weights default to the training loss weights (2.5, 1, 1, 1) for
(l1, giou, cls, rel). The solver is an O(n^3) shortest-augmenting-path
method with potentials; query rows are scanned in ascending order, so
cost ties prefer the lowest query index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import center_to_corner, giou

DEFAULT_WEIGHTS = (2.5, 1.0, 1.0, 1.0)


@dataclass
class MatchWeights:
    l1: float = 2.5
    giou: float = 1.0
    cls: float = 1.0
    rel: float = 1.0


def match_cost(subj_probs: np.ndarray, obj_probs: np.ndarray,
               rel_scores: np.ndarray | None,
               subj_boxes: np.ndarray, obj_boxes: np.ndarray,
               gt_subj_labels: np.ndarray, gt_obj_labels: np.ndarray,
               gt_rel_rows: np.ndarray | None,
               gt_subj_boxes: np.ndarray, gt_obj_boxes: np.ndarray,
               weights: MatchWeights | None = None) -> np.ndarray:
    """Build the (n_query, n_gt) cost matrix.

    Boxes are center-form in the normalized frame. ``rel_scores`` may be
    None (detection-only mode), dropping the relation term. Returns an
    empty (n_query, 0) matrix when there is no ground truth.
    """
    w = weights or MatchWeights()
    n_q = subj_probs.shape[0]
    n_gt = len(gt_subj_labels)
    if n_gt == 0:
        return np.zeros((n_q, 0))
    if n_gt > n_q:
        raise ValueError(f"{n_gt} ground-truth triplets exceed {n_q} queries")

    cls_cost = (1.0 - subj_probs[:, gt_subj_labels]) + (1.0 - obj_probs[:, gt_obj_labels])

    if rel_scores is not None and gt_rel_rows is not None and gt_rel_rows.size:
        pos = gt_rel_rows > 0
        counts = pos.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("ground-truth relation row with no positive label")
        # mean over positive labels of (1 - score), per (query, gt) pair
        rel_cost = ((1.0 - rel_scores) @ pos.T.astype(np.float64)) / counts
    else:
        rel_cost = np.zeros((n_q, n_gt))

    box_cost_s = _per_box_cost(subj_boxes, gt_subj_boxes, w)
    box_cost_o = _per_box_cost(obj_boxes, gt_obj_boxes, w)
    cost = w.cls * cls_cost + w.rel * rel_cost + np.maximum(box_cost_s, box_cost_o)
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite entries in match cost")
    return cost


def _per_box_cost(pred_center: np.ndarray, gt_center: np.ndarray, w: MatchWeights) -> np.ndarray:
    l1 = np.abs(pred_center[:, None, :] - gt_center[None, :, :]).mean(axis=-1)
    pred_corner = center_to_corner(pred_center, 1.0)
    gt_corner = center_to_corner(gt_center, 1.0)
    g = giou(pred_corner[:, None, :], gt_corner[None, :, :])
    return w.l1 * l1 + w.giou * (1.0 - g)


def hungarian_assign(cost: np.ndarray) -> np.ndarray:
    """Minimum-total-cost injective assignment of columns to rows.

    ``cost`` has shape (n_rows, n_cols) with n_cols <= n_rows. Returns an
    (n_cols,) array mapping each column (ground-truth index) to its row
    (query index). Empty input yields an empty assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-d")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return np.zeros(0, dtype=np.intp)
    if n_cols > n_rows:
        raise ValueError(f"more columns ({n_cols}) than rows ({n_rows})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite entries in cost matrix")

    # Shortest augmenting path with potentials; columns enter one at a time.
    inf = np.inf
    u = np.zeros(n_cols + 1)            # column potentials
    v = np.zeros(n_rows + 1)            # row potentials
    row_to_col = np.full(n_rows + 1, 0, dtype=np.intp)  # 0 = unassigned (columns 1-based)
    way = np.zeros(n_rows + 1, dtype=np.intp)

    for col in range(1, n_cols + 1):
        row_to_col[0] = col
        j0 = 0
        minv = np.full(n_rows + 1, inf)
        used = np.zeros(n_rows + 1, dtype=bool)
        while True:
            used[j0] = True
            c0 = row_to_col[j0]
            # relax distances to all unused rows through row j0
            free = ~used[1:]
            cur = cost[:, c0 - 1] - u[c0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free)[0]
            rel = candidates[np.argmin(minv[1:][candidates])]
            delta = minv[rel + 1]
            j1 = rel + 1
            u[row_to_col[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_to_col[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            row_to_col[j0] = row_to_col[j1]
            j0 = j1

    assignment = np.zeros(n_cols, dtype=np.intp)
    for row in range(1, n_rows + 1):
        if row_to_col[row] != 0:
            assignment[row_to_col[row] - 1] = row - 1
    return assignment
