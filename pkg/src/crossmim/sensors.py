"""Sensor registry, synthetic multisensor data, and dataset manifests.

Images are channel-first (C, W, H), row-major, little-endian float32,
stored already normalized to each sensor's declared statistics.  Paired
sensors hold colocated samples of identical W x H; the partner image is
a deterministic transform of the source so cross-sensor prediction has
learnable signal.
"""

import io
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataFormatError, ShapeError

MANIFEST_HEADER = "MSGFM-DATA v1"


@dataclass(frozen=True)
class SensorSpec:
    """One registered modality.

    Args:
        sensor_id: dense small integer, unique within a registry.
        name: short identifier, no whitespace.
        channels: number of image channels, >= 1.
        paired_with: sensor_id of the colocated partner, or None.
        norm_mean, norm_std: per-channel stats the data is normalized to.
    """

    sensor_id: int
    name: str
    channels: int
    paired_with: Optional[int] = None
    norm_mean: tuple = ()
    norm_std: tuple = ()

    def __post_init__(self):
        mean = self.norm_mean or (0.0,) * self.channels
        std = self.norm_std or (1.0,) * self.channels
        object.__setattr__(self, "norm_mean", tuple(float(v) for v in mean))
        object.__setattr__(self, "norm_std", tuple(float(v) for v in std))


class SensorRegistry:
    """Immutable, validated collection of SensorSpecs, iterated in id order."""

    def __init__(self, specs):
        specs = sorted(specs, key=lambda s: s.sensor_id)
        ids = [s.sensor_id for s in specs]
        if ids != list(range(len(specs))):
            raise ConfigError(f"sensor ids must be dense 0..N-1, got {ids}")
        for s in specs:
            if s.channels < 1:
                raise ConfigError(f"sensor {s.name!r} has zero channels")
            if not s.name or any(c.isspace() for c in s.name):
                raise ConfigError(f"sensor name must be non-empty without whitespace: {s.name!r}")
            if len(s.norm_mean) != s.channels or len(s.norm_std) != s.channels:
                raise ConfigError(f"sensor {s.name!r}: norm stats length != channels")
            if any(v <= 0 for v in s.norm_std):
                raise ConfigError(f"sensor {s.name!r}: norm_std must be strictly positive")
            if s.paired_with is not None:
                if s.paired_with == s.sensor_id:
                    raise ConfigError(f"sensor {s.name!r} paired with itself")
                if not 0 <= s.paired_with < len(specs):
                    raise ConfigError(f"sensor {s.name!r} paired with unknown id {s.paired_with}")
                partner = specs[s.paired_with]
                if partner.paired_with != s.sensor_id:
                    raise ConfigError(
                        f"pairing must be symmetric: {s.name!r} -> {partner.name!r} not reciprocated"
                    )
        if len({s.name for s in specs}) != len(specs):
            raise ConfigError("sensor names must be unique")
        self._specs = tuple(specs)

    def __len__(self):
        return len(self._specs)

    def __iter__(self):
        return iter(self._specs)

    def __getitem__(self, sensor_id):
        return self._specs[sensor_id]

    def __eq__(self, other):
        return isinstance(other, SensorRegistry) and self._specs == other._specs

    def by_name(self, name):
        for s in self._specs:
            if s.name == name:
                return s
        raise ConfigError(f"no sensor named {name!r}")

    def partner_of(self, sensor_id):
        pid = self._specs[sensor_id].paired_with
        return None if pid is None else self._specs[pid]


def register_sensors(specs):
    return SensorRegistry(specs)


def desk_registry():
    """Five modalities mirroring a typical multisensor corpus: optical RGB
    (unpaired), a 2-channel radar paired with a 14-channel multispectral
    sensor, and a 1-channel elevation sensor paired with aerial RGB."""
    return register_sensors([
        SensorSpec(0, "rgb", 3),
        SensorSpec(1, "sar", 2, paired_with=2),
        SensorSpec(2, "ms", 14, paired_with=1),
        SensorSpec(3, "dsm", 1, paired_with=4),
        SensorSpec(4, "aerial", 3, paired_with=3),
    ])


def pair_registry():
    """One colocated pair: a 2-channel radar-like and a 3-channel optical."""
    return register_sensors([
        SensorSpec(0, "sar", 2, paired_with=1),
        SensorSpec(1, "optical", 3, paired_with=0),
    ])


def single_registry():
    """One unpaired 3-channel sensor (degenerate single-modality mode)."""
    return register_sensors([SensorSpec(0, "rgb", 3)])


REGISTRY_PRESETS = {
    "desk": desk_registry,
    "pair": pair_registry,
    "single": single_registry,
}


def registry_preset(name):
    try:
        return REGISTRY_PRESETS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown registry preset {name!r}, expected one of {sorted(REGISTRY_PRESETS)}"
        ) from None


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    sensor_id: int
    partner_sample_id: Optional[int] = None


@dataclass(frozen=True)
class MultisensorBatch:
    """One optimization round: every registered sensor contributes a batch."""

    per_sensor: dict  # sensor_id -> list of SampleRecord
    round_index: int


class Dataset:
    """Immutable bundle of records plus their image arrays.

    record.sample_id indexes into `images`; partner ids cross-link the
    colocated sample of the paired sensor.
    """

    def __init__(self, registry, width, height, records, images):
        self.registry = registry
        self.width = int(width)
        self.height = int(height)
        self.records = tuple(records)
        self.images = tuple(images)
        self._validate()
        by_sensor = {s.sensor_id: [] for s in registry}
        for r in self.records:
            by_sensor[r.sensor_id].append(r)
        self.by_sensor = {k: tuple(v) for k, v in by_sensor.items()}

    def _validate(self):
        if len(self.records) != len(self.images):
            raise DataFormatError("record/image count mismatch")
        for i, (r, img) in enumerate(zip(self.records, self.images)):
            if r.sample_id != i:
                raise DataFormatError(f"sample ids must be dense, got {r.sample_id} at {i}")
            spec = self.registry[r.sensor_id]
            expect = (spec.channels, self.width, self.height)
            if img.shape != expect:
                raise ShapeError(f"sample {r.sample_id}: image shape {img.shape} != {expect}")
            if not np.all(np.isfinite(img)):
                raise DataFormatError(f"sample {r.sample_id}: non-finite values")
            if r.partner_sample_id is not None:
                if not 0 <= r.partner_sample_id < len(self.records):
                    raise DataFormatError(
                        f"sample {r.sample_id}: partner id {r.partner_sample_id} missing"
                    )
                partner = self.records[r.partner_sample_id]
                if partner.sensor_id != spec.paired_with:
                    raise DataFormatError(
                        f"sample {r.sample_id}: partner belongs to sensor "
                        f"{partner.sensor_id}, expected {spec.paired_with}"
                    )
                if partner.partner_sample_id != r.sample_id:
                    raise DataFormatError(f"sample {r.sample_id}: partner link not symmetric")

    def __len__(self):
        return len(self.records)

    def image(self, sample_id):
        return self.images[sample_id]

    def partner_record(self, record):
        if record.partner_sample_id is None:
            return None
        return self.records[record.partner_sample_id]


def _smooth_field(channels, w, h, rng):
    # white noise blurred to ~1/8 image scale, plus one broader field shared
    # across channels so they stay correlated and worth modeling jointly
    sigma = max(min(w, h) / 8.0, 1.0)
    noise = ndimage.gaussian_filter(
        rng.standard_normal((channels, w, h)), sigma=(0, sigma, sigma)
    )
    common = ndimage.gaussian_filter(rng.standard_normal((w, h)), sigma=2.0 * sigma)
    return noise + 0.5 * common[None, :, :]


def _to_declared_stats(x, spec):
    # exact per-sample standardization, then affine to the declared stats;
    # pooled mean/std over many samples then match the declaration exactly
    mean = x.mean(axis=(1, 2), keepdims=True)
    std = x.std(axis=(1, 2), keepdims=True)
    std = np.maximum(std, 1e-8)
    z = (x - mean) / std
    m = np.asarray(spec.norm_mean, dtype=np.float64)[:, None, None]
    s = np.asarray(spec.norm_std, dtype=np.float64)[:, None, None]
    return (z * s + m).astype(np.float32)


def pair_transform_weights(registry, src_id):
    """Fixed channel-mixing matrix and bias mapping a source sensor's image
    to its partner's channel space.  A property of the sensor pair alone,
    independent of any dataset seed."""
    spec = registry[src_id]
    if spec.paired_with is None:
        raise ConfigError(f"sensor {spec.name!r} is unpaired")
    dst = registry[spec.paired_with]
    seed = np.random.SeedSequence([7041, src_id, dst.sensor_id])
    rng = np.random.Generator(np.random.PCG64(seed))
    mix = rng.standard_normal((dst.channels, spec.channels)) / np.sqrt(spec.channels)
    bias = 0.1 * rng.standard_normal(dst.channels)
    return mix.astype(np.float64), bias.astype(np.float64)


def partner_transform(registry, src_id, image):
    """Deterministic partner image for a paired source sample: fixed channel
    mix + bias, tanh, then renormalized to the partner's declared stats."""
    spec = registry[src_id]
    mix, bias = pair_transform_weights(registry, src_id)
    dst = registry[spec.paired_with]
    x = image.astype(np.float64)
    mean = np.asarray(spec.norm_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(spec.norm_std, dtype=np.float64)[:, None, None]
    z = (x - mean) / std
    y = np.tanh(np.einsum("oc,cwh->owh", mix, z) + bias[:, None, None])
    return _to_declared_stats(y, dst)


def gen_synthetic(registry, n_per_sensor, width, height, seed):
    """Deterministic synthetic dataset: `n_per_sensor[sensor_id]` samples per
    sensor (an int applies to all).  Paired sensors are generated jointly,
    the lower-id sensor acting as the source; both directions of a pair get
    their own source-drawn samples so each sensor reaches its quota."""
    if isinstance(n_per_sensor, int):
        n_per_sensor = {s.sensor_id: n_per_sensor for s in registry}
    for s in registry:
        n = n_per_sensor.get(s.sensor_id, 0)
        if n < 1:
            raise ConfigError(f"n_per_sensor must be >= 1 for sensor {s.name!r}, got {n}")
        if s.paired_with is not None and n_per_sensor[s.paired_with] != n:
            raise ConfigError("paired sensors need equal sample counts")

    records, images = [], []

    def add(sensor_id, img, partner=None):
        records.append(SampleRecord(len(records), sensor_id, partner))
        images.append(img)
        return records[-1].sample_id

    for spec in registry:
        if spec.paired_with is not None and spec.paired_with < spec.sensor_id:
            continue  # pair handled from its lower-id side
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, spec.sensor_id])))
        for _ in range(n_per_sensor[spec.sensor_id]):
            src = _to_declared_stats(_smooth_field(spec.channels, width, height, rng), spec)
            if spec.paired_with is None:
                add(spec.sensor_id, src)
            else:
                dst_img = partner_transform(registry, spec.sensor_id, src)
                a = add(spec.sensor_id, src)
                b = add(spec.paired_with, dst_img)
                records[a] = replace(records[a], partner_sample_id=b)
                records[b] = replace(records[b], partner_sample_id=a)

    return Dataset(registry, width, height, records, images)


def save_manifest(dataset, path):
    """Write a text manifest plus a `.bin` sidecar of raw little-endian f32
    image payloads; the round trip is bit exact."""
    blob_path = path + ".bin"
    offsets = []
    with open(blob_path, "wb") as blob:
        pos = 0
        for img in dataset.images:
            raw = np.ascontiguousarray(img, dtype="<f4").tobytes()
            blob.write(raw)
            offsets.append((pos, img.size))
            pos += len(raw)
    lines = [MANIFEST_HEADER]
    lines.append(f"blob {os.path.basename(blob_path)} {pos}")
    lines.append(f"size {dataset.width} {dataset.height}")
    lines.append(f"sensors {len(dataset.registry)}")
    for s in dataset.registry:
        pair = "-" if s.paired_with is None else str(s.paired_with)
        mean = ",".join(repr(v) for v in s.norm_mean)
        std = ",".join(repr(v) for v in s.norm_std)
        lines.append(f"sensor {s.sensor_id} {s.name} {s.channels} {pair} {mean} {std}")
    lines.append(f"samples {len(dataset)}")
    for r, (off, count) in zip(dataset.records, offsets):
        pair = "-" if r.partner_sample_id is None else str(r.partner_sample_id)
        lines.append(f"sample {r.sample_id} {r.sensor_id} {pair} {off} {count}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _manifest_fail(msg):
    raise DataFormatError(f"manifest: {msg}")


def load_manifest(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    except OSError as e:
        raise DataFormatError(f"manifest: cannot read {path}: {e}") from e
    if not lines:
        _manifest_fail("empty file")
    if lines[0] != MANIFEST_HEADER:
        if lines[0].startswith("MSGFM-DATA"):
            _manifest_fail(f"version mismatch: {lines[0]!r}, expected {MANIFEST_HEADER!r}")
        _manifest_fail(f"bad header {lines[0]!r}")

    fields = {}
    sensors, samples = [], []
    for ln in lines[1:]:
        parts = ln.split()
        key = parts[0]
        if key == "sensor":
            if len(parts) != 7:
                _manifest_fail(f"malformed sensor line: {ln!r}")
            sid, name, ch, pair = int(parts[1]), parts[2], int(parts[3]), parts[4]
            mean = tuple(float(v) for v in parts[5].split(","))
            std = tuple(float(v) for v in parts[6].split(","))
            sensors.append(SensorSpec(
                sid, name, ch,
                paired_with=None if pair == "-" else int(pair),
                norm_mean=mean, norm_std=std,
            ))
        elif key == "sample":
            if len(parts) != 6:
                _manifest_fail(f"malformed sample line: {ln!r}")
            samples.append((int(parts[1]), int(parts[2]), parts[3], int(parts[4]), int(parts[5])))
        else:
            fields[key] = parts[1:]

    for need in ("blob", "size", "sensors", "samples"):
        if need not in fields:
            _manifest_fail(f"missing {need!r} line")
    width, height = int(fields["size"][0]), int(fields["size"][1])
    if int(fields["sensors"][0]) != len(sensors):
        _manifest_fail("sensor count mismatch")
    if int(fields["samples"][0]) != len(samples):
        _manifest_fail("sample count mismatch")
    try:
        registry = register_sensors(sensors)
    except ConfigError as e:
        raise DataFormatError(f"manifest: invalid sensor table: {e}") from e

    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)), fields["blob"][0])
    declared = int(fields["blob"][1])
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataFormatError(f"manifest: cannot read blob {blob_path}: {e}") from e
    if len(blob) != declared:
        _manifest_fail(f"blob truncated: {len(blob)} bytes, declared {declared}")

    records, images = [], []
    for i, (sid, sensor_id, pair, off, count) in enumerate(samples):
        if sid != i:
            _manifest_fail(f"sample ids must be dense, got {sid} at position {i}")
        if not 0 <= sensor_id < len(registry):
            _manifest_fail(f"sample {sid}: unknown sensor {sensor_id}")
        ch = registry[sensor_id].channels
        if count != ch * width * height:
            _manifest_fail(f"sample {sid}: payload count {count} != {ch}x{width}x{height}")
        end = off + 4 * count
        if off < 0 or end > len(blob):
            _manifest_fail(f"sample {sid}: payload [{off}, {end}) outside blob")
        img = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        images.append(img.reshape(ch, width, height).copy())
        partner = None if pair == "-" else int(pair)
        if partner is not None and not 0 <= partner < len(samples):
            _manifest_fail(f"sample {sid}: partner id {partner} missing")
        records.append(SampleRecord(sid, sensor_id, partner))

    try:
        return Dataset(registry, width, height, records, images)
    except (DataFormatError, ShapeError) as e:
        raise DataFormatError(f"manifest: {e}") from e
