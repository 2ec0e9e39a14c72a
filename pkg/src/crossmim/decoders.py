"""Per-sensor reconstruction decoders and target selection.

Each sensor owns a single linear head projecting trunk features back to
pixel space.  A sample either reconstructs itself or, when a colocated
partner exists, reconstructs the partner image through the partner's
decoder; the choice is an independent coin flip per sample.  Either way
the loss lives on the source sample's masked pixel footprint.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .masking import to_pixel_mask


@dataclass(frozen=True)
class SensorDecoder:
    """Linear pixel head owned by one sensor.

    proj: (P*P*C_i, width); bias: (P*P*C_i,).
    """

    sensor_id: int
    proj: T.Tensor
    bias: T.Tensor
    channels: int
    patch_size: int


@dataclass(frozen=True)
class ReconstructionPlan:
    """What one sample should reconstruct and where its loss is scored."""

    sample_id: int
    source_sensor: int
    target_sensor: int
    target_image: np.ndarray  # (C_target, W, H)
    pixel_loss_mask: np.ndarray  # bool (W, H), the source's masked footprint

    @property
    def is_cross(self):
        return self.target_sensor != self.source_sensor


def decode(features, decoder, width, height):
    """Project (L, C_m) features to the decoder's image space (C, W, H)."""
    if features.ndim != 2 or features.shape[1] != decoder.proj.shape[1]:
        raise ShapeError(
            f"decoder of sensor {decoder.sensor_id} expects feature width "
            f"{decoder.proj.shape[1]}, got {tuple(features.shape)}"
        )
    tokens = features @ T.transpose(decoder.proj) + T.reshape(decoder.bias, (1, -1))
    return T.unpatchify(tokens, decoder.patch_size, decoder.channels, width, height)


def choose_targets(records, dataset, mask_plans, p_cross, rng):
    """Build a ReconstructionPlan per record.

    Paired samples flip an independent Bernoulli(p_cross) coin (one draw per
    paired record, in record order); unpaired samples never consume a draw
    and always reconstruct themselves.
    """
    if not 0.0 <= p_cross <= 1.0:
        raise ShapeError(f"p_cross must be in [0, 1], got {p_cross}")
    plans = []
    for r in records:
        cross = r.partner_sample_id is not None and rng.random() < p_cross
        if cross:
            partner = dataset.records[r.partner_sample_id]
            target_sensor, target_image = partner.sensor_id, dataset.image(partner.sample_id)
        else:
            target_sensor, target_image = r.sensor_id, dataset.image(r.sample_id)
        plans.append(ReconstructionPlan(
            sample_id=r.sample_id,
            source_sensor=r.sensor_id,
            target_sensor=target_sensor,
            target_image=target_image,
            pixel_loss_mask=to_pixel_mask(mask_plans[r.sample_id]),
        ))
    return plans


def reconstruction_loss(pred, plan):
    """Masked L1: mean absolute error over the source's masked pixels,
    averaged over the target's channels."""
    if tuple(pred.shape) != plan.target_image.shape:
        raise ShapeError(
            f"prediction shape {tuple(pred.shape)} != target shape {plan.target_image.shape}"
        )
    if not plan.pixel_loss_mask.any():
        raise ShapeError("reconstruction loss mask selects no pixels")
    return T.l1_loss(pred, T.constant(plan.target_image, like=pred), plan.pixel_loss_mask)
