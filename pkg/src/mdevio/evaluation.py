"""Trajectory metrics, run bookkeeping and ablation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import DegenerateConfiguration, Pose, umeyama_sim3

MAX_TIME_GAP = 0.02
DIVERGENCE_ATE = 10.0


class EvaluationError(ValueError):
    pass


class TooFewMatches(EvaluationError):
    pass


class ZeroBaseline(EvaluationError):
    pass


class TrajectoryFormatError(EvaluationError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray
    # (x, y, z, w) per row
    quaternions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.timestamps)
        if self.quaternions is None:
            q = np.zeros((n, 4))
            q[:, 3] = 1.0
            self.quaternions = q
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not len(self.positions) == len(self.quaternions) == n:
            raise TrajectoryFormatError("timestamps, positions and rotations differ in length")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, timestamps, poses: Sequence[Pose]) -> Trajectory:
        return cls(timestamps, np.array([p.translation for p in poses]).reshape(-1, 3),
                   np.array([p.rotation for p in poses]).reshape(-1, 4))


# --------------------------------------------------------------------------
# TUM text format: "timestamp tx ty tz qx qy qz qw"

def format_tum(traj: Trajectory) -> str:
    out = io.StringIO()
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        vals = " ".join(f"{v:.9f}" for v in (*p, *q))
        out.write(f"{t:.6f} {vals}\n")
    return out.getvalue()


def parse_tum(text: str) -> Trajectory:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"line {lineno}: expected 8 values, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise TrajectoryFormatError(f"line {lineno}: {exc}") from None
    arr = np.array(rows, dtype=float).reshape(-1, 8)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8])


def write_tum(path, traj: Trajectory) -> None:
    Path(path).write_text(format_tum(traj))


def read_tum(path) -> Trajectory:
    return parse_tum(Path(path).read_text())


# --------------------------------------------------------------------------
# Metrics

def associate(t_est, t_gt, max_gap: float = MAX_TIME_GAP):
    """Index pairs ``(i_est, i_gt)`` matching each estimate to its nearest
    ground-truth stamp within ``max_gap`` seconds; each stamp is used once."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    order = np.argsort(t_gt, kind="stable")
    sorted_gt = t_gt[order]
    pos = np.searchsorted(sorted_gt, t_est)
    lo = np.clip(pos - 1, 0, len(sorted_gt) - 1)
    hi = np.clip(pos, 0, len(sorted_gt) - 1)
    pick = np.where(np.abs(sorted_gt[hi] - t_est) < np.abs(sorted_gt[lo] - t_est), hi, lo)
    gap = np.abs(sorted_gt[pick] - t_est)
    i_est, i_gt, used = [], [], set()
    for i in np.argsort(gap, kind="stable"):
        j = int(order[pick[i]])
        if gap[i] <= max_gap and j not in used:
            used.add(j)
            i_est.append(int(i))
            i_gt.append(j)
    srt = np.argsort(i_est)
    return np.array(i_est, dtype=int)[srt], np.array(i_gt, dtype=int)[srt]


def _as_trajectory(x) -> Trajectory:
    if isinstance(x, Trajectory):
        return x
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 3:
        # bare positions: frames are matched by index
        return Trajectory(np.arange(len(arr), dtype=float), arr, None)
    raise TypeError("expected a Trajectory or an (N, 3) array of positions")


def aligned_errors(est, gt, max_gap: float = MAX_TIME_GAP) -> np.ndarray:
    """Per-pose position errors after Sim(3) alignment of ``est`` onto ``gt``."""
    est, gt = _as_trajectory(est), _as_trajectory(gt)
    i, j = associate(est.timestamps, gt.timestamps, max_gap)
    if len(i) < 3:
        raise TooFewMatches(f"only {len(i)} associated poses; need at least 3")
    p_est, p_gt = est.positions[i], gt.positions[j]
    sim = umeyama_sim3(p_est, p_gt)
    return np.linalg.norm(sim.apply(p_est) - p_gt, axis=1)


def ate_rmse(est, gt, max_gap: float = MAX_TIME_GAP) -> float:
    """Absolute trajectory error (RMSE, metres) after Sim(3) alignment."""
    e = aligned_errors(est, gt, max_gap)
    return float(math.sqrt(np.mean(e * e)))


def divergence_check(est, gt, threshold: float = DIVERGENCE_ATE, solver_failed: bool = False,
                     max_gap: float = MAX_TIME_GAP) -> bool:
    """True when the run must be reported as diverged.

    That is the case for a solver failure, when fewer than half of the
    ground-truth poses have an estimate, when the estimate cannot be aligned
    at all (e.g. it never moves), or when the aligned ATE exceeds
    ``threshold``.
    """
    if solver_failed:
        return True
    est, gt = _as_trajectory(est), _as_trajectory(gt)
    if not np.all(np.isfinite(est.positions)):
        return True
    i, _ = associate(est.timestamps, gt.timestamps, max_gap)
    if len(i) < 0.5 * len(gt):
        return True
    try:
        return ate_rmse(est, gt, max_gap) > threshold
    except (TooFewMatches, DegenerateConfiguration):
        return True


def improvement_pct(baseline_avg: float, method_avg: float) -> float:
    """Relative ATE reduction in percent; positive means the method is better."""
    if not baseline_avg > 0:
        raise ZeroBaseline("baseline error must be positive")
    return 100.0 * (baseline_avg - method_avg) / baseline_avg


# --------------------------------------------------------------------------
# Runs and reports

@dataclass
class RunResult:
    label: str
    seed: int
    ate_rmse: float
    diverged: bool
    sequence: str = ""
    frame_costs: list = field(default_factory=list)
    ordinal_violations: int = 0
    ordinal_pairs: int = 0
    mean_activation_delay: float = float("nan")
    median_solve_ms: float = float("nan")
    solver_failures: int = 0

    def __post_init__(self):
        if not self.diverged and not self.ate_rmse >= 0:
            raise ValueError("a converged run needs a non-negative ATE")


def median_ate(results: Iterable[RunResult]) -> float:
    """Median ATE over runs; diverged runs count as infinitely bad."""
    vals = [r.ate_rmse if not r.diverged else math.inf for r in results]
    if not vals:
        return math.nan
    return float(np.median(np.array(vals, dtype=float)))


def group_results(results: Iterable[RunResult]) -> dict:
    """``{(sequence, label): [RunResult, ...]}`` with runs sorted by seed."""
    out: dict = {}
    for r in results:
        out.setdefault((r.sequence, r.label), []).append(r)
    for runs in out.values():
        runs.sort(key=lambda r: r.seed)
    return out


REPORT_FIELDS = ["sequence", "method", "runs", "diverged", "median_ate", "improvement_pct",
                 "median_ordinal_violations", "mean_activation_delay"]


def summarize(results: Iterable[RunResult], baseline: str = "baseline", methods: Optional[list] = None) -> list:
    """One summary row per (sequence, method), in ``methods`` order."""
    groups = group_results(results)
    sequences = sorted({s for s, _ in groups})
    labels = methods or sorted({m for _, m in groups})
    rows = []
    for seq in sequences:
        base = groups.get((seq, baseline))
        base_med = median_ate(base) if base else math.nan
        for m in labels:
            runs = groups.get((seq, m))
            if not runs:
                continue
            med = median_ate(runs)
            try:
                imp = improvement_pct(base_med, med) if math.isfinite(med) else math.nan
            except ZeroBaseline:
                imp = math.nan
            rows.append({
                "sequence": seq,
                "method": m,
                "runs": len(runs),
                "diverged": sum(r.diverged for r in runs),
                "median_ate": med,
                "improvement_pct": imp,
                "median_ordinal_violations": float(np.median([r.ordinal_violations for r in runs])),
                "mean_activation_delay": float(np.nanmean([r.mean_activation_delay for r in runs]))
                if any(math.isfinite(r.mean_activation_delay) for r in runs) else math.nan,
            })
    return rows


def _fmt(v, digits=4):
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "X"
        return f"{v:.{digits}f}"
    return str(v)


def report_csv(rows: list) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in REPORT_FIELDS})
    return out.getvalue()


def report_markdown(rows: list) -> str:
    """Methods as rows, sequences as columns: ``median ATE (improvement %)``.

    Diverged medians print as ``X``.
    """
    sequences = list(dict.fromkeys(r["sequence"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["sequence"], r["method"]): r for r in rows}
    header = ["Method"] + sequences
    lines = []
    for m in methods:
        line = [m]
        for s in sequences:
            r = cell.get((s, m))
            if r is None:
                line.append("")
                continue
            txt = _fmt(r["median_ate"], 3)
            if math.isfinite(r["improvement_pct"]):
                txt += f" ({r['improvement_pct']:+.1f}%)"
            line.append(txt)
        lines.append(line)
    widths = [max(len(x) for x in col) for col in zip(header, *lines)]
    fmt = "| " + " | ".join(f"{{:<{w}}}" for w in widths) + " |"
    out = [fmt.format(*header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [fmt.format(*ln) for ln in lines]
    return "\n".join(out) + "\n"


def write_report(results: Iterable[RunResult], out_dir, baseline: str = "baseline",
                 methods: Optional[list] = None) -> list:
    rows = summarize(list(results), baseline, methods)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report_csv(rows))
    (out_dir / "report.md").write_text(report_markdown(rows))
    return rows
