"""Threshold-swept ROC curves, the five AUC metrics, and report export.

The detector sweep uses an inclusive predicate (score >= tau) over a
uniform threshold grid on [0, 1]. Three trapezoidal integrals are taken:
the (P_f, P_d) curve sorted along P_f, and the two threshold-axis curves.
The composites are

    auc_oa   = auc_pf_pd + auc_tau_pd - auc_tau_pf
    auc_snpr = auc_tau_pd / auc_tau_pf   (+inf with a flag when P_f
                                          integrates to zero)

Reports serialize to a (tau, p_d, p_f) CSV plus a JSON scalar block; an
infinite SNPR becomes JSON null with "snpr_infinite": true.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .hsio import LabelMap, ValidationError

# numpy renamed trapz in 2.0
_trapezoid = getattr(np, "trapezoid", None) or np.trapz

__all__ = [
    "RocReport",
    "SeparabilityStats",
    "roc_curves",
    "auc_suite",
    "composite_metrics",
    "evaluate_map",
    "separability_stats",
    "export_report",
    "parse_report",
]

DEFAULT_GRID = 1000


@dataclass
class RocReport:
    tau: np.ndarray
    p_d: np.ndarray
    p_f: np.ndarray
    auc_pf_pd: float
    auc_tau_pd: float
    auc_tau_pf: float
    auc_oa: float
    auc_snpr: float            # math.inf when snpr_infinite
    snpr_infinite: bool
    n_target: int
    n_background: int


@dataclass
class SeparabilityStats:
    """Five-number summary of one score population."""

    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    def as_dict(self) -> dict:
        return {"min": self.minimum, "q1": self.q1, "median": self.median,
                "q3": self.q3, "max": self.maximum}


def _target_mask(truth, target_id: int | None) -> np.ndarray:
    if isinstance(truth, LabelMap):
        if target_id is None:
            raise ValidationError("a label map needs an explicit target class id")
        return truth.labels == target_id
    mask = np.asarray(truth)
    if mask.dtype != bool:
        raise ValidationError("truth must be a label map or a boolean mask")
    return mask


def roc_curves(scores: np.ndarray, truth, grid: int = DEFAULT_GRID,
               target_id: int | None = None):
    """Sweep tau over grid+1 uniform thresholds on [0, 1].

    Returns (tau, p_d, p_f) where p_d is the detected fraction of target
    pixels and p_f of background pixels under score >= tau.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValidationError("map is not normalized to [0, 1]")
    if grid < 1:
        raise ValidationError("grid size must be >= 1")
    mask = _target_mask(truth, target_id)
    if mask.shape != scores.shape:
        raise ValidationError("truth extents do not match the map")
    t_scores = np.sort(scores[mask].ravel())
    b_scores = np.sort(scores[~mask].ravel())
    if t_scores.size == 0 or b_scores.size == 0:
        raise ValidationError("truth must contain both target and background")
    tau = np.linspace(0.0, 1.0, grid + 1)
    p_d = 1.0 - np.searchsorted(t_scores, tau, side="left") / t_scores.size
    p_f = 1.0 - np.searchsorted(b_scores, tau, side="left") / b_scores.size
    return tau, p_d, p_f


def _auc_over_pf(p_f: np.ndarray, p_d: np.ndarray) -> float:
    """Integrate the (P_f, P_d) curve: sort along P_f, collapse ties to
    their max P_d, trapezoid."""
    order = np.lexsort((p_d, p_f))
    pf_s, pd_s = p_f[order], p_d[order]
    keep = np.ones(pf_s.size, dtype=bool)
    keep[:-1] = pf_s[1:] != pf_s[:-1]      # last of each tie group = max p_d
    pf_u, pd_u = pf_s[keep], pd_s[keep]
    if pf_u.size < 2:
        return 0.0
    return float(_trapezoid(pd_u, pf_u))


def auc_suite(tau: np.ndarray, p_d: np.ndarray, p_f: np.ndarray,
              n_target: int = 0, n_background: int = 0) -> RocReport:
    """All five AUC metrics from one swept curve."""
    tau = np.asarray(tau, dtype=np.float64)
    p_d = np.asarray(p_d, dtype=np.float64)
    p_f = np.asarray(p_f, dtype=np.float64)
    if not (tau.shape == p_d.shape == p_f.shape):
        raise ValidationError("tau, p_d, p_f must be aligned")
    auc_pf_pd = _auc_over_pf(p_f, p_d)
    auc_tau_pd = float(_trapezoid(p_d, tau))
    auc_tau_pf = float(_trapezoid(p_f, tau))
    oa, snpr, infinite = composite_metrics(auc_pf_pd, auc_tau_pd, auc_tau_pf)
    return RocReport(tau=tau, p_d=p_d, p_f=p_f, auc_pf_pd=auc_pf_pd,
                     auc_tau_pd=auc_tau_pd, auc_tau_pf=auc_tau_pf,
                     auc_oa=oa, auc_snpr=snpr, snpr_infinite=infinite,
                     n_target=n_target, n_background=n_background)


def composite_metrics(auc_pf_pd: float, auc_tau_pd: float,
                      auc_tau_pf: float) -> tuple[float, float, bool]:
    """(auc_oa, auc_snpr, snpr_infinite) from the three component AUCs."""
    oa = auc_pf_pd + auc_tau_pd - auc_tau_pf
    if auc_tau_pf == 0.0:
        return oa, float("inf"), True
    return oa, auc_tau_pd / auc_tau_pf, False


def evaluate_map(scores: np.ndarray, truth, grid: int = DEFAULT_GRID,
                 target_id: int | None = None) -> RocReport:
    """roc_curves + auc_suite in one call."""
    mask = _target_mask(truth, target_id)
    tau, p_d, p_f = roc_curves(scores, mask, grid)
    return auc_suite(tau, p_d, p_f, n_target=int(mask.sum()),
                     n_background=int((~mask).sum()))


def separability_stats(scores: np.ndarray, truth, target_id: int | None = None
                       ) -> tuple[SeparabilityStats, SeparabilityStats]:
    """Five-number summaries (linear-interpolation quartiles) of the target
    and background score populations."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = _target_mask(truth, target_id)
    if mask.shape != scores.shape:
        raise ValidationError("truth extents do not match the map")

    def five(pop: np.ndarray) -> SeparabilityStats:
        if pop.size == 0:
            raise ValidationError("a score population is empty")
        q = np.quantile(pop, [0.0, 0.25, 0.5, 0.75, 1.0])
        return SeparabilityStats(*map(float, q))

    return five(scores[mask]), five(scores[~mask])


def export_report(report: RocReport, csv_path, json_path,
                  separability: tuple[SeparabilityStats, SeparabilityStats]
                  | None = None, extra: dict | None = None) -> None:
    """Write the (tau, p_d, p_f) sweep as CSV and the scalars as JSON."""
    try:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("tau,p_d,p_f\n")
            for t, d, f in zip(report.tau, report.p_d, report.p_f):
                fh.write(f"{t:.9f},{d:.9f},{f:.9f}\n")
    except OSError as exc:
        raise OSError(f"cannot write ROC CSV at {csv_path}: {exc}") from exc
    blob = {
        "auc_pf_pd": report.auc_pf_pd,
        "auc_tau_pd": report.auc_tau_pd,
        "auc_tau_pf": report.auc_tau_pf,
        "auc_oa": report.auc_oa,
        "auc_snpr": None if report.snpr_infinite else report.auc_snpr,
        "snpr_infinite": report.snpr_infinite,
        "n_target": report.n_target,
        "n_background": report.n_background,
        "grid_size": int(report.tau.size - 1),
    }
    if separability is not None:
        blob["separability"] = {"target": separability[0].as_dict(),
                                "background": separability[1].as_dict()}
    if extra:
        blob.update(extra)
    try:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(blob, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report JSON at {json_path}: {exc}") from exc


def parse_report(json_path) -> dict:
    with open(json_path, "r", encoding="utf-8") as fh:
        return json.load(fh)
