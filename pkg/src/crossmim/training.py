"""Pretraining loop: heterogeneous batching, AdamW, schedule, persistence.

One optimization round visits every sensor once (ascending sensor id),
sums the per-sensor losses, and applies a single optimizer update.  Batch
sizes are proportional to per-sensor dataset sizes; the induced learning
rates are realized as per-parameter-group scales on sensor-owned modules
(embedder and decoder), while shared trunk parameters use the base rate.

All randomness flows through named streams seeded from the run seed, so a
resumed run continues the exact trajectory of an uninterrupted one.
"""

import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import CompatibilityError, ConfigError, NumericError
from .model import init_params, round_loss
from .sensors import MultisensorBatch

# stream tags keeping the independent RNG lanes apart
STREAM_DATA = 1
STREAM_MASK = 2
STREAM_CROSS = 3
STREAM_TASK = 4


def stream_rng(seed, stream, *extra):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(seed), int(stream), *map(int, extra)]))
    )


@dataclass(frozen=True)
class TrainConfig:
    base_batch: int = 8
    base_lr: float = 1e-4
    epochs: int = 2
    warmup_epochs: int = 1
    warmup_lr: float = 5e-7
    milestones: tuple = ()
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    p_cross: float = 0.5
    seed: int = 0
    checkpoint_every: int = 1  # epochs
    log_every: int = 1  # steps
    batch_overrides: dict = field(default_factory=dict)
    lr_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base_batch < 1:
            raise ConfigError(f"base_batch must be >= 1, got {self.base_batch}")
        if not 0.0 <= self.p_cross <= 1.0:
            raise ConfigError(f"p_cross must be in [0, 1], got {self.p_cross}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["milestones"] = list(self.milestones)
        d["batch_overrides"] = {str(k): v for k, v in self.batch_overrides.items()}
        d["lr_overrides"] = {str(k): v for k, v in self.lr_overrides.items()}
        return d


@dataclass(frozen=True)
class ScheduleEntry:
    batch_size: int
    lr_scale: float
    steps_per_epoch: int


def make_schedule(sizes, base_batch, batch_overrides=None, lr_overrides=None):
    """Per-sensor (batch size, lr scale, steps/epoch) from dataset sizes.

    The largest sensor receives the base batch; every other sensor gets a
    batch proportional to its share of the data, and its learning rate is
    scaled by the same factor.  Steps per epoch are equalized to the
    largest sensor's count; smaller sensors cycle with fresh shuffles.
    """
    if not sizes:
        raise ConfigError("make_schedule needs at least one sensor")
    for sid, n in sizes.items():
        if n < 1:
            raise ConfigError(f"sensor {sid} has an empty dataset")
    batch_overrides = batch_overrides or {}
    lr_overrides = lr_overrides or {}
    n_max = max(sizes.values())
    steps = int(math.ceil(n_max / base_batch))
    out = {}
    for sid, n in sorted(sizes.items()):
        b = batch_overrides.get(sid, max(1, int(round(base_batch * n / n_max))))
        scale = lr_overrides.get(sid, b / base_batch)
        out[sid] = ScheduleEntry(batch_size=b, lr_scale=scale, steps_per_epoch=steps)
    return out


def lr_at(step, cfg, steps_per_epoch):
    """Learning-rate multiplier: linear warmup from warmup_lr/base_lr up to
    1.0 over the warmup epochs, then a step decay by gamma at each
    milestone epoch."""
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        r0 = cfg.warmup_lr / cfg.base_lr
        return r0 + (1.0 - r0) * (step / warmup_steps)
    epoch = step // steps_per_epoch
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.gamma ** passed


def owner_sensor(name):
    """Sensor id owning a parameter, or None for shared parameters."""
    for prefix in ("embedder.", "decoder."):
        if name.startswith(prefix):
            return int(name[len(prefix):].split(".", 1)[0])
    return None


def adamw_step(params, m, v, step, base_lr, lr_mult, cfg, lr_scales):
    """One decoupled-weight-decay Adam update over all parameters.

    Missing gradients count as zero so moments and decay advance uniformly;
    weight decay applies to matrices and kernels (ndim >= 2) only.
    """
    t = step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        sid = owner_sensor(name)
        lr = base_lr * lr_mult * (1.0 if sid is None else lr_scales[sid])
        m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * (g * g)
        update = (m[name] / bc1) / (np.sqrt(v[name] / bc2) + cfg.eps)
        if p.data.ndim >= 2:
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
        p.grad = None


class SensorSampler:
    """Cycling sampler over one sensor's records with a fresh functional
    shuffle per cycle, so position + cycle fully determine the stream."""

    def __init__(self, records, batch_size, seed, sensor_id):
        self.records = records
        self.batch_size = batch_size
        self.seed = seed
        self.sensor_id = sensor_id
        self.cycle = 0
        self.pos = 0

    def _order(self):
        rng = stream_rng(self.seed, STREAM_DATA, self.sensor_id, self.cycle)
        return rng.permutation(len(self.records))

    def next_batch(self):
        order = self._order()
        out = []
        while len(out) < self.batch_size:
            if self.pos >= len(order):
                self.cycle += 1
                self.pos = 0
                order = self._order()
            out.append(self.records[order[self.pos]])
            self.pos += 1
        return out


class TrainState:
    """Everything that must persist for bit-exact resumption."""

    def __init__(self, params, m, v, step, mask_rng, cross_rng):
        self.params = params
        self.m = m
        self.v = v
        self.step = step
        self.mask_rng = mask_rng
        self.cross_rng = cross_rng
        self.history = []


def init_state(registry, model_cfg, seed, dtype=np.float32):
    params = init_params(registry, model_cfg, seed, dtype=dtype)
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    return TrainState(
        params, m, v, step=0,
        mask_rng=stream_rng(seed, STREAM_MASK),
        cross_rng=stream_rng(seed, STREAM_CROSS),
    )


class Trainer:
    def __init__(self, dataset, model_cfg, train_cfg, log_path=None, dump_dir=None,
                 dtype=np.float32):
        self.dataset = dataset
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.log_path = log_path
        self.dump_dir = dump_dir
        sizes = {sid: len(recs) for sid, recs in dataset.by_sensor.items()}
        self.schedule = make_schedule(sizes, train_cfg.base_batch,
                                      train_cfg.batch_overrides, train_cfg.lr_overrides)
        self.steps_per_epoch = next(iter(self.schedule.values())).steps_per_epoch
        self.samplers = {
            sid: SensorSampler(dataset.by_sensor[sid], entry.batch_size,
                               train_cfg.seed, sid)
            for sid, entry in self.schedule.items()
        }
        self.state = init_state(dataset.registry, model_cfg, train_cfg.seed, dtype=dtype)
        self._log_file = None

    # -- logging -----------------------------------------------------------
    def _log(self, record):
        if self.log_path is None:
            return
        if self._log_file is None:
            self._log_file = open(self.log_path, "a", encoding="utf-8")
        self._log_file.write(json.dumps(record, sort_keys=True) + "\n")
        self._log_file.flush()

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- stepping ----------------------------------------------------------
    @property
    def epoch(self):
        return self.state.step // self.steps_per_epoch

    def next_round(self):
        per_sensor = {sid: self.samplers[sid].next_batch() for sid in sorted(self.samplers)}
        return MultisensorBatch(per_sensor=per_sensor, round_index=self.state.step)

    def train_step(self):
        state = self.state
        batch = self.next_round()
        lr_mult = lr_at(state.step, self.cfg, self.steps_per_epoch)
        try:
            with T.fresh_tape():
                total, stats, reports = round_loss(
                    state.params, self.model_cfg, self.dataset, batch,
                    state.mask_rng, state.cross_rng, p_cross=self.cfg.p_cross,
                )
                T.backward(total)
        except NumericError as e:
            raise self._dump_and_wrap(e, batch) from e
        lr_scales = {sid: entry.lr_scale for sid, entry in self.schedule.items()}
        adamw_step(state.params, state.m, state.v, state.step,
                   self.cfg.base_lr, lr_mult, self.cfg, lr_scales)
        metrics = {
            "step": state.step,
            "epoch": self.epoch,
            "lr": self.cfg.base_lr * lr_mult,
            "loss_total": stats["loss_total"],
            "sensors": {str(k): val for k, val in stats["sensors"].items()},
            "cross_samples": stats["cross_samples"],
            "self_samples": stats["self_samples"],
            "routing": _routing_summary(reports),
        }
        state.history.append(stats["loss_total"])
        state.step += 1
        if state.step % max(1, self.cfg.log_every) == 0:
            self._log(metrics)
        return metrics

    def train_epochs(self, epochs=None, checkpoint_dir=None):
        epochs = self.cfg.epochs if epochs is None else epochs
        target = epochs * self.steps_per_epoch
        last = None
        while self.state.step < target:
            last = self.train_step()
            boundary = self.state.step % self.steps_per_epoch == 0
            if checkpoint_dir and boundary:
                ep = self.epoch
                if ep % max(1, self.cfg.checkpoint_every) == 0 or self.state.step == target:
                    self.save(os.path.join(checkpoint_dir, f"checkpoint-epoch{ep}.msgm"))
        if checkpoint_dir:
            self.save(os.path.join(checkpoint_dir, "checkpoint-final.msgm"))
        return last

    def _dump_and_wrap(self, err, batch):
        diag = dict(err.diagnostics)
        diag.update({
            "step": self.state.step,
            "round_sensors": {str(k): len(val) for k, val in batch.per_sensor.items()},
        })
        if self.dump_dir:
            path = os.path.join(self.dump_dir, f"diagnostic-step{self.state.step}.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({"error": str(err), "diagnostics": _jsonable(diag)}, f, indent=2)
            diag["dump_path"] = path
        return NumericError(str(err), diagnostics=diag)

    # -- persistence ---------------------------------------------------------
    def save(self, path):
        named = {}
        for k, p in self.state.params.items():
            named[k] = p.data
        for k, arr in self.state.m.items():
            named[f"opt.m.{k}"] = arr
        for k, arr in self.state.v.items():
            named[f"opt.v.{k}"] = arr
        named["meta.step"] = np.asarray(self.state.step, dtype=np.int64)
        named["meta.registry"] = ckpt.registry_digest(self.dataset.registry)
        named["meta.model_config"] = ckpt.json_to_u8(self.model_cfg.to_dict())
        named["rng.mask"] = ckpt.rng_to_u8(self.state.mask_rng)
        named["rng.cross"] = ckpt.rng_to_u8(self.state.cross_rng)
        sids = sorted(self.samplers)
        named["sampler.sensor_ids"] = np.asarray(sids, dtype=np.int64)
        named["sampler.cycle"] = np.asarray([self.samplers[s].cycle for s in sids], dtype=np.int64)
        named["sampler.pos"] = np.asarray([self.samplers[s].pos for s in sids], dtype=np.int64)
        ckpt.save_tensors(path, named)

    def resume(self, path):
        named = ckpt.load_tensors(path)
        expected = ckpt.registry_digest(self.dataset.registry)
        stored = named.get("meta.registry")
        if stored is None or not np.array_equal(stored, expected):
            raise CompatibilityError("checkpoint was trained against a different sensor registry")
        stored_cfg = ckpt.u8_to_json(named["meta.model_config"])
        if stored_cfg != self.model_cfg.to_dict():
            raise CompatibilityError("checkpoint model configuration does not match this run")
        for k, p in self.state.params.items():
            if k not in named:
                raise CompatibilityError(f"checkpoint is missing parameter {k!r}")
            if named[k].shape != p.data.shape:
                raise CompatibilityError(
                    f"checkpoint parameter {k!r} has shape {named[k].shape}, expected {p.data.shape}"
                )
            p.data = named[k].astype(p.data.dtype, copy=True)
            self.state.m[k] = named[f"opt.m.{k}"].astype(p.data.dtype, copy=True)
            self.state.v[k] = named[f"opt.v.{k}"].astype(p.data.dtype, copy=True)
        self.state.step = int(named["meta.step"])
        self.state.mask_rng = ckpt.rng_from_u8(named["rng.mask"])
        self.state.cross_rng = ckpt.rng_from_u8(named["rng.cross"])
        sids = [int(v) for v in named["sampler.sensor_ids"]]
        for i, sid in enumerate(sids):
            if sid not in self.samplers:
                raise CompatibilityError(f"checkpoint sampler refers to unknown sensor {sid}")
            self.samplers[sid].cycle = int(named["sampler.cycle"][i])
            self.samplers[sid].pos = int(named["sampler.pos"][i])


def load_pretrained(path, registry, model_cfg, dtype=np.float32):
    """Parameters-only load for transfer, evaluation, and rendering."""
    named = ckpt.load_tensors(path)
    expected = ckpt.registry_digest(registry)
    if "meta.registry" not in named or not np.array_equal(named["meta.registry"], expected):
        raise CompatibilityError("checkpoint was trained against a different sensor registry")
    stored_cfg = ckpt.u8_to_json(named["meta.model_config"])
    if stored_cfg != model_cfg.to_dict():
        raise CompatibilityError("checkpoint model configuration does not match this run")
    params = init_params(registry, model_cfg, seed=0, dtype=dtype)
    for k, p in params.items():
        if k not in named:
            raise CompatibilityError(f"checkpoint is missing parameter {k!r}")
        p.data = named[k].astype(p.data.dtype, copy=True)
    return params


def _routing_summary(reports):
    if not reports:
        return {"dropped": 0, "expert_tokens": []}
    width = max(len(r.expert_counts) for r in reports)
    totals = np.zeros(width, dtype=np.int64)
    dropped = 0
    for r in reports:
        totals[: len(r.expert_counts)] += np.asarray(r.expert_counts, dtype=np.int64)
        dropped += r.dropped
    return {"dropped": int(dropped), "expert_tokens": [int(v) for v in totals]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
