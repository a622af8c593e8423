"""End-to-end model: trunk + task head, with input padding and output cropping.

Images of any size are replicate-padded (bottom/right) to multiples of the
stage-1 tile (downsample x patch side = 112 by default); the matching output
is upsampled back to the padded resolution and cropped to the original size.
Task selection is purely a head switch -- flow and disparity share every
parameter.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .matching import CropMeta, disparity_match_1d, flow_global_match, upsample_field
from .params import named_parameters
from .tensor import ShapeError, Tensor
from .trunk import TrunkWeights, trunk_forward

TASKS = ("flow", "disparity")


def pad_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Replicate-pad a [3, H, W] image on the bottom/right to the next multiple."""
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")


class DenVisCoM:
    """The hybrid scan/attention correspondence model.

    ``weights`` is the nested container; ``parameters()`` exposes the flat
    named view used by the optimizer and checkpoints.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.weights = TrunkWeights.init(rng, config)

    def parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.weights)

    def load_parameters(self, entries: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; the key sets must match exactly."""
        own = self.parameters()
        missing = sorted(set(own) - set(entries))
        extra = sorted(set(entries) - set(own))
        if missing or extra:
            raise ShapeError(
                "checkpoint/model parameter mismatch: "
                f"missing={missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected={extra[:5]}{'...' if len(extra) > 5 else ''}"
            )
        for name, tensor in own.items():
            value = entries[name]
            if tuple(value.shape) != tensor.shape:
                raise ShapeError(f"parameter {name}: shape {value.shape} vs expected {tensor.shape}")
            tensor.data[...] = value

    def _prepare(self, img1: np.ndarray, img2: np.ndarray):
        img1 = np.asarray(img1, dtype=np.float64)
        img2 = np.asarray(img2, dtype=np.float64)
        if img1.ndim != 3 or img1.shape[0] != 3:
            raise ShapeError(f"expected [3, H, W] images, got {img1.shape}")
        if img1.shape != img2.shape:
            raise ShapeError(f"image shapes differ: {img1.shape} vs {img2.shape}")
        crop = CropMeta(height=img1.shape[1], width=img1.shape[2])
        tile = self.config.input_multiple
        return (
            Tensor(pad_to_multiple(img1, tile)),
            Tensor(pad_to_multiple(img2, tile)),
            crop,
        )

    def features(self, img1: np.ndarray, img2: np.ndarray):
        """Trunk features for a raw image pair: (f1, f2, crop_meta)."""
        t1, t2, crop = self._prepare(img1, img2)
        f1, f2 = trunk_forward(t1, t2, self.weights, self.config)
        return f1, f2, crop

    def forward_field(self, task: str, img1: np.ndarray, img2: np.ndarray) -> tuple[Tensor, CropMeta]:
        """Full-resolution predicted field on the tape (for training)."""
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        f1, f2, crop = self.features(img1, img2)
        low = flow_global_match(f1, f2) if task == "flow" else disparity_match_1d(f1, f2)
        return upsample_field(low, self.config.downsample, crop), crop

    def predict(self, task: str, img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
        """Inference: full-resolution field as a numpy array, no tape."""
        with T.no_grad():
            field, _ = self.forward_field(task, img1, img2)
        return field.numpy()
