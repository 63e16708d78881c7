"""Exact path-dependent TreeSHAP attributions and preservation subsets.

Attributions live in margin (log-odds) space, where they are exactly
additive: ``base_value + sum(contributions) == margin``. Conditional
expectations weight each branch by its training cover.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from jsguide.model import GbdtModel, ModelError, Tree


@dataclass
class ShapExplanation:
    base_value: float
    contributions: np.ndarray
    margin: float
    feature_ids: list[str]


@dataclass
class PreservationSubset:
    ids: list[str]
    indices: list[int]
    coverage_achieved: float

    def __len__(self) -> int:
        return len(self.ids)


def _check_covers(tree: Tree) -> None:
    if np.any(tree.cover <= 0):
        raise ModelError("tree has a node with non-positive cover")


def tree_expected_value(tree: Tree, node: int = 0) -> float:
    if tree.feature[node] < 0:
        return float(tree.value[node])
    l, r = tree.left[node], tree.right[node]
    cl, cr = tree.cover[l], tree.cover[r]
    return (cl * tree_expected_value(tree, l) + cr * tree_expected_value(tree, r)) / (cl + cr)


# Path entries are [feature, zero_fraction, one_fraction, pweight].

def _extend(path, zero, one, feature):
    depth = len(path)
    path.append([feature, zero, one, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        path[i + 1][3] += one * path[i][3] * (i + 1) / (depth + 1)
        path[i][3] = zero * path[i][3] * (depth - i) / (depth + 1)


def _unwind(path, k):
    depth = len(path) - 1
    one, zero = path[k][2], path[k][1]
    nxt = path[depth][3]
    for i in range(depth - 1, -1, -1):
        if one != 0:
            tmp = path[i][3]
            path[i][3] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - path[i][3] * zero * (depth - i) / (depth + 1)
        else:
            path[i][3] = path[i][3] * (depth + 1) / (zero * (depth - i))
    for i in range(k, depth):
        path[i][0], path[i][1], path[i][2] = path[i + 1][0], path[i + 1][1], path[i + 1][2]
    path.pop()


def _unwound_sum(path, k):
    depth = len(path) - 1
    one, zero = path[k][2], path[k][1]
    nxt = path[depth][3]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = path[i][3] - tmp * zero * (depth - i) / (depth + 1)
        else:
            total += path[i][3] / (zero * (depth - i) / (depth + 1))
    return total


def _recurse(tree, x, phi, node, path, zero, one, feature):
    path = [list(e) for e in path]
    _extend(path, zero, one, feature)
    f = tree.feature[node]
    if f < 0:
        v = tree.value[node]
        for i in range(1, len(path)):
            w = _unwound_sum(path, i)
            phi[path[i][0]] += w * (path[i][2] - path[i][1]) * v
        return
    l, r = tree.left[node], tree.right[node]
    hot, cold = (l, r) if x[f] < tree.threshold[node] else (r, l)
    total = tree.cover[l] + tree.cover[r]
    in_zero, in_one = 1.0, 1.0
    for k in range(1, len(path)):
        if path[k][0] == f:
            in_zero, in_one = path[k][1], path[k][2]
            _unwind(path, k)
            break
    _recurse(tree, x, phi, hot, path, tree.cover[hot] / total * in_zero, in_one, f)
    _recurse(tree, x, phi, cold, path, tree.cover[cold] / total * in_zero, 0.0, f)


def tree_shap(tree: Tree, x: np.ndarray, n_features: int) -> np.ndarray:
    phi = np.zeros(n_features)
    if tree.feature[0] < 0:
        return phi
    _recurse(tree, x, phi, 0, [], 1.0, 1.0, -1)
    return phi


def shap_values(model: GbdtModel, x) -> ShapExplanation:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != model.n_features:
        raise ModelError(f"vector length {x.shape} != model width {model.n_features}")
    phi = np.zeros(model.n_features)
    base = model.base_score
    for tree in model.trees:
        _check_covers(tree)
        phi += tree_shap(tree, x, model.n_features)
        base += tree_expected_value(tree)
    margin = float(model.predict_margin(x)[0])
    return ShapExplanation(float(base), phi, margin, list(model.feature_ids))


def top_shap_subset(expl: ShapExplanation, coverage: float = 0.9) -> PreservationSubset:
    """Shortest prefix of positive contributors covering ``coverage`` of their sum.

    Features are ordered by descending contribution, ties by column
    index. Zero and negative contributors are never included; when there
    are no positive contributors the subset is empty with coverage 1.
    """
    if not 0.0 < coverage <= 1.0:
        raise ValueError("coverage must be in (0, 1]")
    phi = expl.contributions
    pos = [i for i in range(len(phi)) if phi[i] > 0]
    if not pos:
        return PreservationSubset([], [], 1.0)
    pos.sort(key=lambda i: (-phi[i], i))
    total = math.fsum(phi[i] for i in pos)
    target = coverage * total
    chosen, acc = [], 0.0
    for i in pos:
        chosen.append(i)
        acc = math.fsum(phi[j] for j in chosen)
        if acc >= target * (1 - 1e-12):
            break
    return PreservationSubset([expl.feature_ids[i] for i in chosen], chosen, acc / total)
