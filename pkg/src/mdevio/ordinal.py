"""Pairwise depth-order constraints between nearby features."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class OrdinalConfig:
    tau_dist: float = 50.0
    eta: float = 0.05
    epsilon_coeff: float = 0.02
    w_ordinal: float = 10.0
    max_pairs_per_feature: int = 3
    min_history: int = 2

    def __post_init__(self):
        if min(self.tau_dist, self.eta, self.epsilon_coeff, self.w_ordinal) <= 0:
            raise ValueError("ordinal configuration values must be positive")
        if self.max_pairs_per_feature < 1:
            raise ValueError("max_pairs_per_feature must be >= 1")


class OrdinalPair(NamedTuple):
    id_i: int
    id_j: int
    # +1 means the network predicts a larger inverse depth for id_i
    established_order: int
    frames_verified: int

    def oriented(self):
        """``(near_id, far_id)``: the network asserts d[near] > d[far]."""
        if self.established_order > 0:
            return self.id_i, self.id_j
        return self.id_j, self.id_i


class OrdinalHistory:
    """Per-pair record of the network's depth-order sign in past frames."""

    def __init__(self):
        self.signs: dict[tuple[int, int], list[int]] = defaultdict(list)

    def get(self, id_i: int, id_j: int) -> list[int]:
        key = (id_i, id_j) if id_i < id_j else (id_j, id_i)
        signs = self.signs.get(key, [])
        return signs if id_i < id_j else [-s for s in signs]

    def record(self, ids, pixels, d_hat, tau_dist: float) -> None:
        """Store the order sign of every pair closer than ``tau_dist``."""
        ids = np.asarray(ids)
        d_hat = np.asarray(d_hat, dtype=float)
        cand, _ = _local_pairs(np.asarray(pixels, dtype=float), tau_dist)
        if not len(cand):
            return
        a, b = cand[:, 0], cand[:, 1]
        swap = ids[a] > ids[b]
        i, j = np.where(swap, b, a), np.where(swap, a, b)
        sign = np.sign(d_hat[i] - d_hat[j]).astype(int)
        for key, s in zip(zip(ids[i].tolist(), ids[j].tolist()), sign.tolist()):
            self.signs[key].append(s)

    def prune(self, alive_ids) -> None:
        alive = set(int(i) for i in alive_ids)
        for key in [k for k in self.signs if k[0] not in alive or k[1] not in alive]:
            del self.signs[key]


def _pixel_dist(pa, pb):
    d = pa - pb
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


def _local_pairs(pixels: np.ndarray, tau_dist: float):
    """Index pairs ``(a, b)``, ``a < b``, strictly closer than ``tau_dist``, and their distances."""
    none = np.zeros((0, 2), dtype=int), np.zeros(0)
    if len(pixels) < 2:
        return none
    tree = cKDTree(pixels)
    cand = tree.query_pairs(tau_dist, output_type="ndarray")
    if len(cand) == 0:
        return none
    dist = _pixel_dist(pixels[cand[:, 0]], pixels[cand[:, 1]])
    keep = dist < tau_dist
    return cand[keep], dist[keep]


def _accepts(d_i, d_j, past, cfg: OrdinalConfig):
    if not abs(d_i - d_j) > cfg.eta * max(d_i, d_j):
        return None
    sign = 1 if d_i > d_j else -1
    if len(past) < cfg.min_history or any(s != sign for s in past):
        return None
    return sign


def _apply_budget(candidates, n_features, cfg: OrdinalConfig, ids):
    """Greedy nearest-first acceptance with a per-feature cap."""
    idl = np.asarray(ids).tolist()
    candidates.sort(key=lambda c: (c[0], min(idl[c[1]], idl[c[2]]), max(idl[c[1]], idl[c[2]])))
    used = [0] * n_features
    out = []
    for dist, a, b, sign, n_hist in candidates:
        if used[a] >= cfg.max_pairs_per_feature or used[b] >= cfg.max_pairs_per_feature:
            continue
        used[a] += 1
        used[b] += 1
        i, j = (a, b) if idl[a] < idl[b] else (b, a)
        if i != a:
            sign = -sign
        out.append(OrdinalPair(idl[i], idl[j], sign, n_hist))
    return out


def select_pairs(ids, pixels, d_hat, history: OrdinalHistory, cfg: OrdinalConfig = OrdinalConfig()):
    """Pairs passing the locality, margin and temporal-sign filters.

    ``history`` must hold the signs of *previous* frames only; call
    :meth:`OrdinalHistory.record` after selecting for the current frame.
    """
    ids = np.asarray(ids)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d_hat = np.asarray(d_hat, dtype=float)
    candidates = []
    cand, dist = _local_pairs(pixels, cfg.tau_dist)
    id_list, d_list = ids.tolist(), d_hat.tolist()
    for (a, b), dd in zip(cand.tolist(), dist.tolist()):
        past = history.get(id_list[a], id_list[b])
        sign = _accepts(d_list[a], d_list[b], past, cfg)
        if sign is not None:
            candidates.append((dd, a, b, sign, len(past)))
    return _apply_budget(candidates, len(ids), cfg, ids)


def select_pairs_bruteforce(ids, pixels, d_hat, history: OrdinalHistory, cfg: OrdinalConfig = OrdinalConfig()):
    """Quadratic reference implementation of :func:`select_pairs`."""
    ids = np.asarray(ids)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    candidates = []
    n = len(ids)
    for a in range(n):
        for b in range(a + 1, n):
            dist = float(_pixel_dist(pixels[a], pixels[b]))
            if not dist < cfg.tau_dist:
                continue
            past = history.get(int(ids[a]), int(ids[b]))
            sign = _accepts(float(d_hat[a]), float(d_hat[b]), past, cfg)
            if sign is not None:
                candidates.append((dist, a, b, sign, len(past)))
    return _apply_budget(candidates, n, cfg, ids)


def hinge(d_near, d_far, epsilon_coeff: float = 0.02):
    """``max(0, d_far + eps * d_near - d_near)`` with its gradient.

    Works elementwise on arrays.  The gradient is zero on the inactive side
    and at the kink.
    """
    d_near = np.asarray(d_near, dtype=float)
    d_far = np.asarray(d_far, dtype=float)
    raw = d_far + epsilon_coeff * d_near - d_near
    active = raw > 0
    r = np.where(active, raw, 0.0)
    g_near = np.where(active, epsilon_coeff - 1.0, 0.0)
    g_far = np.where(active, 1.0, 0.0)
    return r, g_near, g_far


def ordinal_residual(d_i: float, d_j: float, pair: OrdinalPair | None = None,
                     cfg: OrdinalConfig = OrdinalConfig()) -> float:
    """Soft-hinge penalty on the order the network established.

    ``d_i``/``d_j`` are the state inverse depths of ``pair.id_i``/``pair.id_j``;
    without a pair the network is taken to assert ``d_i > d_j``.
    """
    if pair is not None and pair.established_order < 0:
        d_i, d_j = d_j, d_i
    r, _, _ = hinge(d_i, d_j, cfg.epsilon_coeff)
    return float(r)


def count_violations(pairs, depth_of, truth_of) -> int:
    """Pairs whose estimated order disagrees with the true order.

    ``depth_of``/``truth_of`` map a feature id to an inverse depth.
    """
    n = 0
    for p in pairs:
        est = depth_of(p.id_i) - depth_of(p.id_j)
        gt = truth_of(p.id_i) - truth_of(p.id_j)
        if np.sign(est) != np.sign(gt):
            n += 1
    return n
