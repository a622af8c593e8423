"""Evaluation metrics for flow and disparity fields.

Flow EPE is the mean L2 distance between predicted and ground-truth vectors;
F1-all is the percentage of valid pixels whose error exceeds a threshold
(3 px by default).  Bucketed EPEs split pixels by ground-truth motion
magnitude into [0, 10), [10, 40), [40, inf).  Disparity EPE is mean |error|;
D1 follows the KITTI outlier rule (error > 3 px AND > 5% of ground truth),
stored as a fraction in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, ShapeError

FLOW_OUTLIER_PX = 3.0
D1_OUTLIER_PX = 3.0
D1_OUTLIER_REL = 0.05
BUCKET_EDGES = (0.0, 10.0, 40.0)


@dataclass
class MetricsReport:
    task: str
    epe: float
    f1_all: float | None = None  # percent, flow only
    d1: float | None = None  # fraction in [0, 1], disparity only
    epe_s0_10: float | None = None
    epe_s10_40: float | None = None
    epe_s40plus: float | None = None
    bucket_counts: tuple[int, int, int] | None = None
    valid_pixels: int = 0

    def to_dict(self) -> dict:
        out = {"task": self.task, "epe": self.epe, "valid_pixels": self.valid_pixels}
        if self.task == "flow":
            out["f1_all_percent"] = self.f1_all
            out["epe_s0_10"] = self.epe_s0_10
            out["epe_s10_40"] = self.epe_s10_40
            out["epe_s40plus"] = self.epe_s40plus
            out["bucket_counts"] = list(self.bucket_counts)
        else:
            out["d1"] = self.d1
        return out

    def __str__(self) -> str:
        if self.task == "flow":
            buckets = " ".join(
                f"{name}={val:.4f}" if val is not None else f"{name}=n/a"
                for name, val in (
                    ("s0-10", self.epe_s0_10),
                    ("s10-40", self.epe_s10_40),
                    ("s40+", self.epe_s40plus),
                )
            )
            return f"flow: EPE {self.epe:.4f} px  F1-all {self.f1_all:.2f}%  {buckets}"
        return f"disparity: EPE {self.epe:.4f} px  D1 {self.d1:.4f} ({100 * self.d1:.2f}%)"


def _checked_mask(shape, valid_mask) -> np.ndarray:
    if valid_mask is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.shape != shape:
        raise ShapeError(f"valid_mask shape {valid.shape} does not match field {shape}")
    if not valid.any():
        raise ContractError("metrics: empty valid region")
    return valid


def compute_flow_metrics(pred, gt, valid_mask=None, threshold: float = FLOW_OUTLIER_PX) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ShapeError(f"flow metrics need matching [2, H, W] fields, got {pred.shape} vs {gt.shape}")
    valid = _checked_mask(pred.shape[1:], valid_mask)

    err = np.sqrt(((pred - gt) ** 2).sum(axis=0))[valid]
    mag = np.sqrt((gt**2).sum(axis=0))[valid]
    buckets = (
        mag < BUCKET_EDGES[1],
        (mag >= BUCKET_EDGES[1]) & (mag < BUCKET_EDGES[2]),
        mag >= BUCKET_EDGES[2],
    )
    bucket_epes = tuple(float(err[b].mean()) if b.any() else None for b in buckets)
    return MetricsReport(
        task="flow",
        epe=float(err.mean()),
        f1_all=float(100.0 * (err > threshold).mean()),
        epe_s0_10=bucket_epes[0],
        epe_s10_40=bucket_epes[1],
        epe_s40plus=bucket_epes[2],
        bucket_counts=tuple(int(b.sum()) for b in buckets),
        valid_pixels=int(valid.sum()),
    )


def compute_disparity_metrics(pred, gt, valid_mask=None) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"disparity metrics need matching [H, W] maps, got {pred.shape} vs {gt.shape}")
    valid = _checked_mask(pred.shape, valid_mask)

    err = np.abs(pred - gt)[valid]
    rel = err > D1_OUTLIER_REL * np.abs(gt)[valid]
    outlier = (err > D1_OUTLIER_PX) & rel
    return MetricsReport(
        task="disparity",
        epe=float(err.mean()),
        d1=float(outlier.mean()),
        valid_pixels=int(valid.sum()),
    )
