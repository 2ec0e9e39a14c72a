"""Downstream transfer and evaluation.

Two ways of feeding a multisensor sample to the pretrained trunk:

- shared_encoder_concat: each sensor is embedded by its own embedder, runs
  through the shared encoder, is mean-pooled, and the pooled features are
  concatenated before the head.
- channel_stack: all sensors are stacked along the channel axis and pass
  through one fused embedder (initialized from the pretrained per-sensor
  kernels, which reproduces their summed response exactly at step 0).

No masking is applied during transfer.  Heads: a linear multilabel
classifier over pooled features, or dense per-token projections that
pixel-shuffle back to image layout for regression / segmentation.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedder import embed, stack_embedders_for_transfer, SensorEmbedder
from .encoder import encode
from .errors import ConfigError, ShapeError
from .masking import draw_mask, to_token_mask
from .metrics import mae, mean_iou, psnr, sam_degrees, ssim
from .model import embedder_of, param_rng, reconstruct_sample, shared_tokens, INIT_STD

MODES = ("shared_encoder_concat", "channel_stack")
HEADS = ("multilabel", "dense_regression", "dense_classification")


@dataclass(frozen=True)
class TransferConfig:
    mode: str = "shared_encoder_concat"
    head: str = "multilabel"
    frozen_trunk: bool = False
    task_sensors: tuple = ()
    num_classes: int = 4
    out_channels: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown transfer mode {self.mode!r}, expected one of {MODES}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.num_classes < 2 and self.head != "dense_regression":
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")


@dataclass(frozen=True)
class TaskSample:
    """One downstream example: colocated images per task sensor + target."""

    images: dict  # sensor_id -> (C, W, H) float array
    label: np.ndarray


def head_input_width(model_cfg, tcfg, n_sensors):
    if tcfg.mode == "shared_encoder_concat":
        return n_sensors * model_cfg.width
    return model_cfg.width


def head_output_width(model_cfg, tcfg):
    p2 = model_cfg.patch_size ** 2
    if tcfg.head == "multilabel":
        return tcfg.num_classes
    if tcfg.head == "dense_regression":
        return p2 * tcfg.out_channels
    return p2 * tcfg.num_classes


def init_transfer_params(pretrained, registry, model_cfg, tcfg, task_sensors, seed,
                         dtype=np.float32):
    """Build the fine-tuning parameter table.

    Trunk tensors are copied from `pretrained` (or freshly initialized when
    None, the from-scratch baseline) so the original table stays untouched;
    channel_stack adds the fused embedder; the head is always freshly
    initialized.
    """
    if pretrained is None:
        from .model import init_params

        pretrained = init_params(registry, model_cfg, seed, dtype=dtype)
    params = {}
    wanted = ["shared.mask_token", "shared.pos_embed"]
    wanted += [k for k in pretrained if k.startswith("encoder.")]
    wanted += [f"embedder.{sid}.{leaf}" for sid in task_sensors for leaf in ("kernel", "bias")]
    for k in wanted:
        src = pretrained[k]
        params[k] = T.Tensor(src.data.astype(dtype, copy=True),
                             requires_grad=not tcfg.frozen_trunk)

    if tcfg.mode == "channel_stack":
        with T.no_grad():
            stacked = stack_embedders_for_transfer(
                [embedder_of(params, sid) for sid in task_sensors]
            )
        params["transfer.embed.kernel"] = T.Tensor(
            stacked.kernel.data.astype(dtype, copy=True), requires_grad=not tcfg.frozen_trunk)
        params["transfer.embed.bias"] = T.Tensor(
            stacked.bias.data.astype(dtype, copy=True), requires_grad=not tcfg.frozen_trunk)
        for sid in task_sensors:  # per-sensor embedders folded into the stack
            del params[f"embedder.{sid}.kernel"]
            del params[f"embedder.{sid}.bias"]

    w_in = head_input_width(model_cfg, tcfg, len(task_sensors))
    w_out = head_output_width(model_cfg, tcfg)
    params["head.w"] = T.Tensor(
        (INIT_STD * param_rng(seed, "head.w").standard_normal((w_in, w_out))).astype(dtype),
        requires_grad=True)
    params["head.b"] = T.Tensor(np.zeros(w_out, dtype=dtype), requires_grad=True)
    return params


def _encode_tokens(tokens, model_cfg, params):
    feats, _aux, _reports = encode(tokens, model_cfg.encoder_config(), params)
    return feats


def finetune_forward(params, model_cfg, tcfg, task_sensors, sample):
    """Head output for one TaskSample: (K,) logits for multilabel, or a
    dense (channels-or-classes, W, H) map for the dense heads."""
    for sid in task_sensors:
        if sid not in sample.images:
            raise ConfigError(f"sample is missing sensor {sid} required by the transfer mode")
    shared = shared_tokens(params)
    if tcfg.mode == "shared_encoder_concat":
        feats = []
        for sid in task_sensors:
            tokens = embed(T.constant(sample.images[sid], like=params["head.w"]),
                           embedder_of(params, sid), shared, token_mask=None,
                           image_sensor_id=sid)
            feats.append(_encode_tokens(tokens, model_cfg, params))
        per_token = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
    else:
        stacked_img = np.concatenate([sample.images[sid] for sid in task_sensors], axis=0)
        fused = SensorEmbedder(sensor_id=-1, kernel=params["transfer.embed.kernel"],
                               bias=params["transfer.embed.bias"])
        tokens = embed(T.constant(stacked_img, like=params["head.w"]), fused, shared,
                       token_mask=None)
        per_token = _encode_tokens(tokens, model_cfg, params)

    if tcfg.head == "multilabel":
        pooled = T.reshape(T.reduce_mean(per_token, axis=0), (1, -1))
        return T.reshape(pooled @ params["head.w"] + T.reshape(params["head.b"], (1, -1)), (-1,))
    dense = per_token @ params["head.w"] + T.reshape(params["head.b"], (1, -1))
    channels = tcfg.out_channels if tcfg.head == "dense_regression" else tcfg.num_classes
    return T.unpatchify(dense, model_cfg.patch_size, channels,
                        model_cfg.image_w, model_cfg.image_h)


def task_loss(params, model_cfg, tcfg, task_sensors, samples):
    """Mean task loss over a batch of TaskSamples."""
    total = None
    for sample in samples:
        out = finetune_forward(params, model_cfg, tcfg, task_sensors, sample)
        if tcfg.head == "multilabel":
            loss = T.bce_with_logits(out, T.constant(sample.label, like=out))
        elif tcfg.head == "dense_regression":
            loss = T.l1_loss(out, T.constant(sample.label, like=out),
                             np.ones(out.shape[-2:], dtype=bool))
        else:
            k = tcfg.num_classes
            logits = T.transpose(T.reshape(out, (k, -1)))  # (pixels, K)
            loss = T.softmax_cross_entropy(logits, sample.label.reshape(-1))
        total = loss if total is None else total + loss
    return total * (1.0 / len(samples))


# ---------------------------------------------------------------------------
# synthetic downstream tasks

def _task_groups(dataset, task_sensors):
    """Colocated sample groups covering every task sensor."""
    anchor = task_sensors[0]
    groups = []
    for r in dataset.by_sensor[anchor]:
        images = {anchor: dataset.image(r.sample_id)}
        ok = True
        for sid in task_sensors[1:]:
            partner = dataset.partner_record(r)
            if partner is not None and partner.sensor_id == sid:
                images[sid] = dataset.image(partner.sample_id)
            else:
                ok = False
        if ok:
            groups.append(images)
    if not groups:
        raise ConfigError(
            f"no colocated samples cover task sensors {task_sensors}; "
            "multi-sensor tasks need a registered pair"
        )
    return groups


def make_multilabel_task(dataset, task_sensors, num_classes):
    """Binary labels from image statistics: label k asks whether vertical
    strip k of one channel of the anchor image has positive mean."""
    samples = []
    for images in _task_groups(dataset, task_sensors):
        img = images[task_sensors[0]]
        c, w, _h = img.shape
        label = np.zeros(num_classes, dtype=np.float32)
        for k in range(num_classes):
            lo = (k * w) // num_classes
            hi = max(lo + 1, ((k + 1) * w) // num_classes)
            label[k] = 1.0 if img[k % c, lo:hi, :].mean() > 0 else 0.0
        samples.append(TaskSample(images=images, label=label))
    return samples


def make_dense_regression_task(dataset, task_sensors):
    """Target: per-pixel mean over the anchor sensor's channels."""
    samples = []
    for images in _task_groups(dataset, task_sensors):
        target = images[task_sensors[0]].mean(axis=0, keepdims=True).astype(np.float32)
        samples.append(TaskSample(images=images, label=target))
    return samples


def make_dense_classification_task(dataset, task_sensors, num_classes):
    """Target: the channel-mean image bucketed into per-image quantile bins."""
    samples = []
    for images in _task_groups(dataset, task_sensors):
        field_img = images[task_sensors[0]].mean(axis=0)
        qs = np.quantile(field_img, np.linspace(0, 1, num_classes + 1)[1:-1])
        label = np.digitize(field_img, qs).astype(np.int64)
        samples.append(TaskSample(images=images, label=label))
    return samples


def make_task(dataset, tcfg, task_sensors):
    if tcfg.head == "multilabel":
        return make_multilabel_task(dataset, task_sensors, tcfg.num_classes)
    if tcfg.head == "dense_regression":
        return make_dense_regression_task(dataset, task_sensors)
    return make_dense_classification_task(dataset, task_sensors, tcfg.num_classes)


def task_metrics(params, model_cfg, tcfg, task_sensors, samples):
    """Task-appropriate scores of the current head on a sample list."""
    from .metrics import map_score  # local to keep module load light

    with T.no_grad():
        outs = [finetune_forward(params, model_cfg, tcfg, task_sensors, s).data
                for s in samples]
    if tcfg.head == "multilabel":
        scores = np.stack(outs)
        labels = np.stack([s.label for s in samples])
        return {"map": map_score(scores, labels)}
    if tcfg.head == "dense_regression":
        return {"mae": float(np.mean([mae(o, s.label) for o, s in zip(outs, samples)]))}
    preds = [np.argmax(o, axis=0) for o in outs]
    scores = [mean_iou(p, s.label, tcfg.num_classes) for p, s in zip(preds, samples)]
    return {"miou": float(np.mean(scores))}


def finetune(registry, model_cfg, tcfg, task_sensors, samples, pretrained,
             steps, lr, batch_size, seed, log_path=None):
    """Fine-tune (or train from scratch when `pretrained` is None).

    Returns (params, losses): the adapted parameter table and the per-step
    task loss trajectory.  Optimization mirrors pretraining's AdamW with a
    flat learning rate.
    """
    import json

    from .training import TrainConfig, adamw_step, stream_rng, STREAM_TASK

    params = init_transfer_params(pretrained, registry, model_cfg, tcfg,
                                  task_sensors, seed)
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    m = {k: np.zeros_like(p.data) for k, p in trainable.items()}
    v = {k: np.zeros_like(p.data) for k, p in trainable.items()}
    opt_cfg = TrainConfig(base_lr=lr, epochs=1, warmup_epochs=0, seed=seed)
    scales = {s.sensor_id: 1.0 for s in registry}
    rng = stream_rng(seed, STREAM_TASK)
    order = rng.permutation(len(samples))
    cursor = 0
    losses = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(steps):
            batch = []
            for _ in range(min(batch_size, len(samples))):
                if cursor >= len(order):
                    order = rng.permutation(len(samples))
                    cursor = 0
                batch.append(samples[order[cursor]])
                cursor += 1
            with T.fresh_tape():
                loss = task_loss(params, model_cfg, tcfg, task_sensors, batch)
                T.backward(loss)
            adamw_step(trainable, m, v, step, lr, 1.0, opt_cfg, scales)
            losses.append(float(loss.data))
            if log:
                log.write(json.dumps({"step": step, "loss": losses[-1]}) + "\n")
    finally:
        if log:
            log.close()
    return params, losses


# ---------------------------------------------------------------------------
# reconstruction evaluation (pretraining-quality view)

def reconstruction_report(params, model_cfg, dataset, records, rng):
    """Self-reconstruction quality per sensor on the given records.

    Each record is masked (consuming `rng`), reconstructed with its own
    decoder, and compared to the ground truth over the full image: MAE,
    PSNR, SSIM (averaged per channel), SAM for multichannel sensors, plus
    the masked-footprint L1 that pretraining optimizes.  PSNR/SSIM use the
    ground-truth image's value range as max_val.
    """
    buckets = {}
    for r in records:
        gt = dataset.image(r.sample_id)
        plan = draw_mask(dataset.width, dataset.height, model_cfg.mask_unit,
                         model_cfg.mask_ratio, rng)
        with T.no_grad():
            pred, _aux, _reports = reconstruct_sample(
                params, model_cfg, gt, r.sensor_id,
                to_token_mask(plan, model_cfg.patch_size), r.sensor_id)
        pred = pred.data.astype(np.float64)
        gt64 = gt.astype(np.float64)
        rng_span = float(gt64.max() - gt64.min()) or 1.0
        pix = plan.mask_unit
        mask = np.repeat(np.repeat(plan.grid, pix, axis=0), pix, axis=1)
        masked_l1 = float(np.abs(pred - gt64)[:, mask].mean())
        entry = {
            "masked_l1": masked_l1,
            "mae": mae(pred, gt64),
            "psnr": psnr(pred, gt64, rng_span),
            "ssim": ssim(pred, gt64, rng_span),
        }
        if gt.shape[0] >= 2:
            entry["sam_deg"] = sam_degrees(pred, gt64)
        buckets.setdefault(r.sensor_id, []).append(entry)

    report = {}
    for sid, entries in sorted(buckets.items()):
        keys = entries[0].keys()
        report[sid] = {
            k: float(np.mean([e[k] for e in entries if np.isfinite(e[k])]))
            if any(np.isfinite(e[k]) for e in entries) else float("inf")
            for k in keys
        }
    return report


def cross_reconstruction_l1(params, model_cfg, dataset, records, rng):
    """Mean masked L1 of cross predictions over paired records: each source
    is masked, decoded through its partner's decoder, and scored against the
    partner image on the source's masked footprint.  None when no record has
    a partner."""
    vals = []
    for r in records:
        if r.partner_sample_id is None:
            continue
        partner = dataset.records[r.partner_sample_id]
        plan = draw_mask(dataset.width, dataset.height, model_cfg.mask_unit,
                         model_cfg.mask_ratio, rng)
        with T.no_grad():
            pred, _aux, _reports = reconstruct_sample(
                params, model_cfg, dataset.image(r.sample_id), r.sensor_id,
                to_token_mask(plan, model_cfg.patch_size), partner.sensor_id)
        gt = dataset.image(partner.sample_id).astype(np.float64)
        pix = plan.mask_unit
        mask = np.repeat(np.repeat(plan.grid, pix, axis=0), pix, axis=1)
        vals.append(float(np.abs(pred.data.astype(np.float64) - gt)[:, mask].mean()))
    return float(np.mean(vals)) if vals else None
