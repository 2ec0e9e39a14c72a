"""Parameter construction and the end-to-end pretraining forward pass.

Parameters live in one flat ordered dict keyed by stable names:

    embedder.<sensor_id>.kernel / .bias
    shared.mask_token / shared.pos_embed
    encoder.block<k>.ln1.gamma ... encoder.block<k>.attn.wq ...
    encoder.block<k>.ffn.w1 ... or encoder.block<k>.gate.w,
    encoder.block<k>.expert<e>.w1 ...
    decoder.<sensor_id>.proj / .bias

The same names appear in checkpoints, so initialization order and naming
are part of the persistence contract.  Each parameter is initialized from
its own RNG stream derived from (seed, crc32(name)), which makes init
independent of creation order and of which modules exist.
"""

import zlib

import numpy as np

from . import tensor as T
from .decoders import SensorDecoder, choose_targets, reconstruction_loss, decode
from .embedder import SensorEmbedder, SharedTokens, embed
from .encoder import encode
from .errors import NumericError
from .masking import draw_mask, to_token_mask

INIT_STD = 0.02


def param_rng(seed, name):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))
    )


def _make(params, name, shape, seed, kind, dtype):
    if kind == "normal":
        data = INIT_STD * param_rng(seed, name).standard_normal(shape)
    elif kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    else:
        raise ValueError(kind)
    params[name] = T.Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def init_params(registry, cfg, seed, dtype=np.float32):
    """Create the full parameter table for a registry + ModelConfig."""
    params = {}
    d = cfg.width
    p = cfg.patch_size
    enc = cfg.encoder_config()

    for s in registry:
        _make(params, f"embedder.{s.sensor_id}.kernel", (d, s.channels, p, p), seed, "normal", dtype)
        _make(params, f"embedder.{s.sensor_id}.bias", (d,), seed, "zeros", dtype)
    _make(params, "shared.mask_token", (d,), seed, "normal", dtype)
    _make(params, "shared.pos_embed", (cfg.tokens, d), seed, "normal", dtype)

    hidden = enc.ffn_hidden
    for k in range(enc.depth):
        b = f"encoder.block{k}."
        _make(params, b + "ln1.gamma", (d,), seed, "ones", dtype)
        _make(params, b + "ln1.beta", (d,), seed, "zeros", dtype)
        for w in ("wq", "wk", "wv", "wo"):
            _make(params, b + f"attn.{w}", (d, d), seed, "normal", dtype)
        for bias in ("bq", "bk", "bv", "bo"):
            _make(params, b + f"attn.{bias}", (d,), seed, "zeros", dtype)
        _make(params, b + "ln2.gamma", (d,), seed, "ones", dtype)
        _make(params, b + "ln2.beta", (d,), seed, "zeros", dtype)
        if k in enc.moe_block_indices:
            _make(params, b + "gate.w", (d, enc.num_experts), seed, "normal", dtype)
            for e in range(enc.num_experts):
                _make(params, b + f"expert{e}.w1", (d, hidden), seed, "normal", dtype)
                _make(params, b + f"expert{e}.b1", (hidden,), seed, "zeros", dtype)
                _make(params, b + f"expert{e}.w2", (hidden, d), seed, "normal", dtype)
                _make(params, b + f"expert{e}.b2", (d,), seed, "zeros", dtype)
        else:
            _make(params, b + "ffn.w1", (d, hidden), seed, "normal", dtype)
            _make(params, b + "ffn.b1", (hidden,), seed, "zeros", dtype)
            _make(params, b + "ffn.w2", (hidden, d), seed, "normal", dtype)
            _make(params, b + "ffn.b2", (d,), seed, "zeros", dtype)

    for s in registry:
        _make(params, f"decoder.{s.sensor_id}.proj", (p * p * s.channels, d), seed, "normal", dtype)
        _make(params, f"decoder.{s.sensor_id}.bias", (p * p * s.channels,), seed, "zeros", dtype)
    return params


def embedder_of(params, sensor_id):
    return SensorEmbedder(
        sensor_id=sensor_id,
        kernel=params[f"embedder.{sensor_id}.kernel"],
        bias=params[f"embedder.{sensor_id}.bias"],
    )


def shared_tokens(params):
    return SharedTokens(mask_token=params["shared.mask_token"], pos_embed=params["shared.pos_embed"])


def decoder_of(params, sensor_id, patch_size):
    proj = params[f"decoder.{sensor_id}.proj"]
    return SensorDecoder(
        sensor_id=sensor_id,
        proj=proj,
        bias=params[f"decoder.{sensor_id}.bias"],
        channels=proj.shape[0] // (patch_size * patch_size),
        patch_size=patch_size,
    )


def reconstruct_sample(params, cfg, image, sensor_id, token_mask, target_sensor):
    """Masked embed -> shared encode -> target sensor's decoder."""
    x = image if isinstance(image, T.Tensor) else T.constant(image)
    tokens = embed(x, embedder_of(params, sensor_id), shared_tokens(params),
                   token_mask=token_mask, image_sensor_id=sensor_id)
    feats, aux, reports = encode(tokens, cfg.encoder_config(), params)
    pred = decode(feats, decoder_of(params, target_sensor, cfg.patch_size),
                  cfg.image_w, cfg.image_h)
    return pred, aux, reports


def round_loss(params, cfg, dataset, batch, mask_rng, cross_rng, p_cross=None):
    """Loss for one optimization round over every sensor's batch.

    Sensors are visited in id order; per sensor, one mask plan is drawn per
    sample, targets are chosen, and the per-sample masked L1 losses and
    balance losses are averaged.  Returns the combined scalar

        sum_sensors ( mean L1 + aux_weight * mean balance )

    plus per-sensor stats and the routing reports of the round.
    """
    if p_cross is None:
        p_cross = cfg.p_cross
    total = None
    stats = {"sensors": {}, "cross_samples": 0, "self_samples": 0}
    all_reports = []
    for sensor_id in sorted(batch.per_sensor):
        records = batch.per_sensor[sensor_id]
        if not records:
            continue
        plans = {
            r.sample_id: draw_mask(dataset.width, dataset.height, cfg.mask_unit,
                                   cfg.mask_ratio, mask_rng)
            for r in records
        }
        targets = choose_targets(records, dataset, plans, p_cross, cross_rng)
        mim_sum, aux_sum = None, None
        for r, plan in zip(records, targets):
            token_mask = to_token_mask(plans[r.sample_id], cfg.patch_size)
            pred, aux, reports = reconstruct_sample(
                params, cfg, dataset.image(r.sample_id), sensor_id, token_mask,
                plan.target_sensor,
            )
            loss = reconstruction_loss(pred, plan)
            mim_sum = loss if mim_sum is None else mim_sum + loss
            aux_sum = aux if aux_sum is None else aux_sum + aux
            all_reports.extend(reports)
            stats["cross_samples" if plan.is_cross else "self_samples"] += 1
        n = float(len(records))
        sensor_mim = mim_sum * (1.0 / n)
        sensor_aux = aux_sum * (1.0 / n)
        contribution = sensor_mim + cfg.aux_weight * sensor_aux
        total = contribution if total is None else total + contribution
        stats["sensors"][sensor_id] = {
            "mim": float(sensor_mim.data),
            "aux": float(sensor_aux.data),
        }
    if total is None:
        raise NumericError("round contained no samples")
    if not np.isfinite(total.data):
        raise NumericError(
            "non-finite round loss",
            diagnostics={"stats": stats},
        )
    stats["loss_total"] = float(total.data)
    return total, stats, all_reports
