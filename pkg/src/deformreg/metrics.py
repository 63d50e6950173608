"""MAE over CT values and per-organ Dice overlap, with per-method table and CSV reporting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .volgrid import ORGAN_LABELS, LabelVolume, VolumeGrid, check_same_dims

METHOD_COLUMNS = ("Initial", "Rigid Reg", "2D-DF", "Proposed")


def mae(v_gt: VolumeGrid, v_def: VolumeGrid, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute HU difference over all voxels, or over ``mask`` when given."""
    check_same_dims(v_gt.dims, v_def.dims, "mae")
    diff = np.abs(v_gt.values.astype(np.float64) - v_def.values.astype(np.float64))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        check_same_dims(v_gt.dims, mask.shape, "mae mask")
        return float(diff[mask].mean()) if mask.any() else 0.0
    return float(diff.mean())


def dsc(a: LabelVolume, b: LabelVolume, organ: int) -> float:
    """2|A n B| / (|A| + |B|) for voxels labelled ``organ``; 1.0 when both are empty."""
    check_same_dims(a.dims, b.dims, "dsc")
    ma = a.labels == organ
    mb = b.labels == organ
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def mean_endpoint_error(u, v) -> float:
    a = getattr(u, "components", u)
    b = getattr(v, "components", v)
    return float(np.mean(np.sqrt(np.sum((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2, axis=0))))


@dataclass
class EvalReport:
    mae_hu: float
    dsc: dict
    phase: Optional[int] = None
    per_phase: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mae_hu < 0 or any(not 0.0 <= d <= 1.0 for d in self.dsc.values()):
            raise ValueError("MAE must be >= 0 and DSC within [0, 1]")


def body_mask(v: VolumeGrid, threshold_hu: float = -900.0) -> np.ndarray:
    return v.values > threshold_hu


def evaluate_case(v_gt: VolumeGrid, labels_gt: LabelVolume, v_def: VolumeGrid, labels_def: LabelVolume,
                  phase: Optional[int] = None, masked: bool = False) -> EvalReport:
    check_same_dims(labels_gt.dims, labels_def.dims, "evaluate_case labels")
    mask = body_mask(v_gt) if masked else None
    return EvalReport(
        mae_hu=mae(v_gt, v_def, mask),
        dsc={name: dsc(labels_def, labels_gt, lab) for name, lab in ORGAN_LABELS.items()},
        phase=phase,
    )


def aggregate(reports: Sequence[EvalReport]) -> dict:
    """Mean and population standard deviation of each metric across cases."""
    if not reports:
        raise ValueError("no reports to aggregate")
    rows = {"MAE": [r.mae_hu for r in reports]}
    for name in ORGAN_LABELS:
        rows[f"{name} DSC"] = [r.dsc[name] for r in reports]
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in rows.items()}


def _row_values(agg: Mapping, metric: str):
    mean, sd = agg[metric]
    if metric == "MAE":
        return mean, sd
    return 100.0 * mean, 100.0 * sd


def format_table(results: Mapping[str, Sequence[EvalReport]], columns: Sequence[str] = METHOD_COLUMNS) -> str:
    """Aligned text table: rows MAE / liver DSC [%] / stomach DSC [%], one column per method.

    Methods missing from ``results`` print as ``-``.
    """
    aggs = {m: aggregate(results[m]) for m in columns if m in results and results[m]}
    metrics = ["MAE"] + [f"{name} DSC" for name in ORGAN_LABELS]
    labels = {"MAE": "MAE", **{f"{n} DSC": f"{n} DSC [%]" for n in ORGAN_LABELS}}
    width = 16
    lines = [" " * 18 + "".join(f"{c:>{width}}" for c in columns)]
    for metric in metrics:
        cells = []
        for c in columns:
            if c in aggs:
                mean, sd = _row_values(aggs[c], metric)
                cells.append(f"{mean:.1f}±{sd:.1f}".rjust(width))
            else:
                cells.append("-".rjust(width))
        lines.append(f"{labels[metric]:<18}" + "".join(cells))
    return "\n".join(lines) + "\n"


def write_csv(path, results: Mapping[str, Sequence[EvalReport]]) -> Path:
    """One row per (method, case): method, case, phase, mae_hu, dsc_liver, dsc_stomach."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "case", "phase", "mae_hu"] + [f"dsc_{n}" for n in ORGAN_LABELS])
        for method, reports in results.items():
            for i, r in enumerate(reports):
                w.writerow([method, i, "" if r.phase is None else r.phase, repr(r.mae_hu)]
                           + [repr(r.dsc[n]) for n in ORGAN_LABELS])
    return Path(path)
