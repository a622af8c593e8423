"""Parameter-free correspondence heads, upsampling, and the training loss.

Both heads consume the trunk's 1/8-resolution feature maps.  The flow head
correlates every location of the first map with every location of the second
(scaled by 1/sqrt(D)), softmax-normalizes each row into a matching
distribution, and reads off the expected 2-D coordinate; flow is that
expectation minus the pixel grid.  The disparity head does the same along
horizontal scan lines only, with candidates to the right of the reference
column masked out before the softmax so the expected column can never exceed
the reference column -- which is what makes the disparity non-negative by
construction.

Neither head has parameters, so switching task is purely a head switch and
checkpoints transfer between tasks verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class CropMeta:
    """How much of the padded full-resolution output is real image."""

    height: int
    width: int


def flow_global_match(f1: Tensor, f2: Tensor) -> Tensor:
    """All-pairs global matching -> low-res flow field [2, H', W'].

    Channel 0 carries the horizontal (x) displacement, channel 1 the
    vertical (y) displacement, in units of feature-grid pixels.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"flow_global_match: feature shapes differ: {f1.shape} vs {f2.shape}")
    d, h, w = f1.shape
    hw = h * w
    a = T.reshape(T.transpose(f1, (1, 2, 0)), (hw, d))
    b = T.reshape(T.transpose(f2, (1, 2, 0)), (hw, d))
    corr = T.mul(T.matmul(a, T.transpose(b, (1, 0))), 1.0 / np.sqrt(d))  # [HW, HW]
    match = T.softmax_lastdim(corr)

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)  # [HW, 2]
    expected = T.matmul(match, T.Tensor(grid))  # [HW, 2]
    flow = T.sub(expected, T.Tensor(grid))
    return T.reshape(T.transpose(flow, (1, 0)), (2, h, w))


def disparity_match_1d(f1: Tensor, f2: Tensor) -> Tensor:
    """Masked scan-line matching -> low-res non-negative disparity [H', W'].

    ``f1`` is the left/reference view of a rectified pair.  For reference
    column i, target columns j > i are masked to -inf (matches only lie to
    the left), so the diagonal stays allowed and zero disparity is legal.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"disparity_match_1d: feature shapes differ: {f1.shape} vs {f2.shape}")
    d, h, w = f1.shape
    a = T.transpose(f1, (1, 2, 0))  # [H, W, D]
    b = T.transpose(f2, (1, 2, 0))
    corr = T.mul(T.matmul(a, T.transpose(b, (0, 2, 1))), 1.0 / np.sqrt(d))  # [H, W, W]
    mask = np.triu(np.ones((w, w), dtype=bool), k=1)  # target col j > reference col i
    match = T.softmax_lastdim(T.masked_fill(corr, mask, -np.inf))

    positions = np.arange(w, dtype=np.float64)
    expected = T.matmul(match, T.Tensor(positions[:, None]))  # [H, W, 1]
    return T.sub(T.Tensor(np.broadcast_to(positions, (h, w)).copy()), T.reshape(expected, (h, w)))


def upsample_field(field: Tensor, factor: int, crop: CropMeta | None = None) -> Tensor:
    """Bilinearly upsample a displacement field and rescale its values.

    Displacements are measured in pixels of the grid they live on, so the
    values are multiplied by ``factor`` along with the spatial upsampling.
    ``crop`` trims the padded region off the full-resolution result.
    """
    h, w = field.shape[-2], field.shape[-1]
    out = T.mul(T.bilinear_resize(field, (h * factor, w * factor)), float(factor))
    if crop is not None:
        if crop.height > h * factor or crop.width > w * factor:
            raise ContractError(
                f"upsample_field: crop {crop.height}x{crop.width} exceeds "
                f"upsampled size {h * factor}x{w * factor}"
            )
        out = out[..., : crop.height, : crop.width]
    return out


def task_loss(pred: Tensor, gt: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
    """Mean L1 over valid pixels; flow components are summed per pixel."""
    gt = T._as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"task_loss: pred {pred.shape} vs gt {gt.shape}")
    diff = T.tabs(T.sub(pred, gt))
    if diff.ndim == 3:
        per_pixel = T.tensor_sum(diff, axis=0)  # sum displacement components
    else:
        per_pixel = diff
    if valid_mask is None:
        return T.tensor_mean(per_pixel)
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.shape != per_pixel.shape:
        raise ShapeError(f"task_loss: valid_mask {valid.shape} vs field {per_pixel.shape}")
    count = int(valid.sum())
    if count == 0:
        raise ContractError("task_loss: empty valid mask")
    return T.mul(T.tensor_sum(T.mul(per_pixel, valid.astype(per_pixel.dtype))), 1.0 / count)
