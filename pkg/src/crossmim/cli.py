"""Command-line entry point.

Subcommands: gen-data, pretrain, ablate, finetune, evaluate, reconstruct.
Every command reads an optional key=value config file plus repeatable
`--set key=value` overrides, writes the fully-resolved config into --out
before heavy work, and finishes by writing a manifest of produced files.

Exit codes: 0 success, 2 configuration error, 3 I/O or data-format error,
4 numeric failure (non-finite loss; a diagnostic dump path is printed),
5 checkpoint/dataset incompatibility.

The MSGFM_THREADS environment variable caps worker threads; computation
here is single-threaded per process, which satisfies any cap >= 1.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .config import desk_config, load_config
from .errors import (CheckpointError, CompatibilityError, ConfigError,
                     DataFormatError, NumericError)
from .metrics import ssi
from .render import reconstruction_grid, write_png, write_ppm
from .sensors import gen_synthetic, load_manifest, registry_preset, save_manifest
from .training import Trainer, TrainConfig, load_pretrained, stream_rng
from .transfer import (TransferConfig, cross_reconstruction_l1, finetune,
                       make_task, reconstruction_report, task_metrics)
from .masking import draw_mask, to_token_mask, to_pixel_mask
from .model import reconstruct_sample
from . import tensor as T

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 2, 3, 4, 5
STREAM_EVAL = 5
STREAM_RENDER = 6


# ---------------------------------------------------------------------------
# shared plumbing

def _thread_cap():
    raw = os.environ.get("MSGFM_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"MSGFM_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"MSGFM_THREADS must be >= 1, got {cap}")
    return cap


def _run_config(args):
    run = load_config(args.config) if args.config else desk_config()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    return run.with_overrides(overrides)


def _prepare_out(args, run):
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved-config.txt"), "w", encoding="utf-8") as f:
        f.write(run.to_text())


def _write_produced(out_dir):
    produced = []
    for root, _dirs, files in os.walk(out_dir):
        for name in files:
            if name == "produced-files.txt":
                continue
            produced.append(os.path.relpath(os.path.join(root, name), out_dir))
    with open(os.path.join(out_dir, "produced-files.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(sorted(produced)) + "\n")


def _manifest_path(data_arg):
    return os.path.join(data_arg, "data.msgfm") if os.path.isdir(data_arg) else data_arg


def _checkpoint_path(arg):
    return os.path.join(arg, "checkpoint-final.msgm") if os.path.isdir(arg) else arg


def _train_config(run):
    return TrainConfig(
        base_batch=run["train.base_batch"],
        base_lr=run["train.base_lr"],
        epochs=run["train.epochs"],
        warmup_epochs=run["train.warmup_epochs"],
        warmup_lr=run["train.warmup_lr"],
        milestones=tuple(run["train.milestones"]),
        gamma=run["train.gamma"],
        beta1=run["train.beta1"],
        beta2=run["train.beta2"],
        eps=run["train.eps"],
        weight_decay=run["train.weight_decay"],
        p_cross=run["train.p_cross"],
        seed=run["seed"],
        checkpoint_every=run["train.checkpoint_every"],
        log_every=run["train.log_every"],
    )


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def _fmt_cell(v):
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def format_table(headers, rows):
    """Plain aligned text table; first column left-aligned, rest right."""
    cells = [[_fmt_cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]

    def line(parts):
        first = parts[0].ljust(widths[0])
        rest = [p.rjust(w) for p, w in zip(parts[1:], widths[1:])]
        return "  ".join([first] + rest)

    out = [line(list(headers)), line(["-" * w for w in widths])]
    out += [line(r) for r in cells]
    return "\n".join(out) + "\n"


def _eval_records(dataset, k):
    records = []
    for sid in sorted(dataset.by_sensor):
        records.extend(dataset.by_sensor[sid][:k])
    return records


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    run = _run_config(args)
    _prepare_out(args, run)
    registry = registry_preset(run["data.registry"])
    dataset = gen_synthetic(registry, run["data.n_per_sensor"],
                            run["data.width"], run["data.height"], run["seed"])
    save_manifest(dataset, os.path.join(args.out, "data.msgfm"))
    pairs = sorted(
        (s.sensor_id, s.paired_with) for s in registry
        if s.paired_with is not None and s.sensor_id < s.paired_with
    )
    for s in registry:
        n = len(dataset.by_sensor[s.sensor_id])
        pairing = f"paired with {registry[s.paired_with].name}" if s.paired_with is not None else "unpaired"
        print(f"sensor {s.sensor_id} {s.name}: {n} samples, {s.channels} channels, {pairing}")
    print(f"pairs: {len(pairs)}")
    print(f"total samples: {len(dataset)}")
    _write_produced(args.out)
    return 0


def cmd_pretrain(args):
    run = _run_config(args)
    _prepare_out(args, run)
    dataset = load_manifest(_manifest_path(args.data))
    trainer = Trainer(dataset, run.model_config(), _train_config(run),
                      log_path=os.path.join(args.out, "metrics.jsonl"),
                      dump_dir=args.out)
    if args.resume:
        trainer.resume(_checkpoint_path(args.resume))
        print(f"resumed at step {trainer.state.step}")
    try:
        last = trainer.train_epochs(checkpoint_dir=args.out)
    finally:
        trainer.close()
    if last is not None:
        print(f"final step {last['step']}: loss_total {last['loss_total']:.6f}")
    _write_produced(args.out)
    return 0


def _parse_grid(spec):
    axes = {"moe": None, "cross": None}
    if not spec or not spec.strip():
        raise ConfigError("empty ablation grid")
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"grid axis must look like name=v1,v2, got {part!r}")
        name, vals = (s.strip() for s in part.split("=", 1))
        if name not in axes:
            raise ConfigError(f"unknown grid axis {name!r}, expected moe or cross")
        try:
            parsed = [float(v) for v in vals.split(",") if v.strip() != ""]
        except ValueError as e:
            raise ConfigError(f"bad grid values for {name}: {e}") from e
        if not parsed:
            raise ConfigError(f"grid axis {name} has no values")
        axes[name] = parsed
    if axes["moe"] is None and axes["cross"] is None:
        raise ConfigError("empty ablation grid")
    return axes


def cmd_ablate(args):
    run = _run_config(args)
    _prepare_out(args, run)
    axes = _parse_grid(args.grid)
    moes = [bool(int(v)) for v in (axes["moe"] if axes["moe"] is not None
                                   else [1.0 if run["model.moe"] else 0.0])]
    crosses = axes["cross"] if axes["cross"] is not None else [run["train.p_cross"]]
    for c in crosses:
        if not 0.0 <= c <= 1.0:
            raise ConfigError(f"cross rate must be in [0, 1], got {c}")

    if args.data:
        dataset = load_manifest(_manifest_path(args.data))
    else:
        registry = registry_preset(run["data.registry"])
        dataset = gen_synthetic(registry, run["data.n_per_sensor"],
                                run["data.width"], run["data.height"], run["seed"])
        save_manifest(dataset, os.path.join(args.out, "data.msgfm"))

    rows = []
    results = []
    for moe in moes:
        for cross in crosses:
            cell = run.with_overrides({"model.moe": moe, "train.p_cross": cross})
            cell_dir = os.path.join(args.out, f"cell-moe{int(moe)}-cross{cross:g}")
            os.makedirs(cell_dir, exist_ok=True)
            trainer = Trainer(dataset, cell.model_config(), _train_config(cell),
                              log_path=os.path.join(cell_dir, "metrics.jsonl"),
                              dump_dir=cell_dir)
            try:
                trainer.train_epochs()
            finally:
                trainer.close()
            records = _eval_records(dataset, run["eval.samples"])
            report = reconstruction_report(trainer.state.params, cell.model_config(),
                                           dataset, records,
                                           stream_rng(run["seed"], STREAM_EVAL))
            cross_l1 = cross_reconstruction_l1(trainer.state.params, cell.model_config(),
                                               dataset, records,
                                               stream_rng(run["seed"], STREAM_EVAL, 1))
            agg = {
                key: float(np.mean([per[key] for per in report.values() if key in per]))
                for key in ("masked_l1", "mae", "psnr", "ssim")
            }
            label = f"{'moe' if moe else 'dense'}/cross={cross:g}"
            rows.append([label, agg["masked_l1"], cross_l1, agg["mae"],
                         agg["psnr"], agg["ssim"]])
            results.append({
                "moe": moe, "cross": cross, "aggregate": agg,
                "cross_l1": cross_l1, "per_sensor": report,
            })

    table = format_table(["strategy", "masked_l1", "cross_l1", "mae", "psnr", "ssim"], rows)
    print(table, end="")
    with open(os.path.join(args.out, "ablation-table.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as f:
        json.dump(_json_safe(results), f, indent=2)
    _write_produced(args.out)
    return 0


def _task_sensor_ids(run, dataset):
    names = run["transfer.sensors"]
    registry = dataset.registry
    if names:
        return tuple(registry.by_name(n).sensor_id for n in names)
    for s in registry:  # default: the first registered pair, else sensor 0
        if s.paired_with is not None and s.sensor_id < s.paired_with:
            return (s.sensor_id, s.paired_with)
    return (registry[0].sensor_id,)


def _transfer_config(run):
    return TransferConfig(
        mode=run["transfer.mode"],
        head=run["transfer.head"],
        frozen_trunk=run["transfer.frozen_trunk"],
        num_classes=run["transfer.classes"],
    )


def cmd_finetune(args):
    run = _run_config(args)
    _prepare_out(args, run)
    dataset = load_manifest(_manifest_path(args.data))
    mcfg = run.model_config()
    tcfg = _transfer_config(run)
    task_sensors = _task_sensor_ids(run, dataset)
    samples = make_task(dataset, tcfg, task_sensors)
    pretrained = None
    if args.checkpoint:
        pretrained = load_pretrained(_checkpoint_path(args.checkpoint),
                                     dataset.registry, mcfg)
    params, losses = finetune(
        dataset.registry, mcfg, tcfg, task_sensors, samples, pretrained,
        steps=run["transfer.steps"], lr=run["transfer.lr"],
        batch_size=run["transfer.batch"], seed=run["seed"],
        log_path=os.path.join(args.out, "finetune-log.jsonl"),
    )
    scores = task_metrics(params, mcfg, tcfg, task_sensors, samples)
    named = {k: p.data for k, p in params.items()}
    named["meta.registry"] = ckpt.registry_digest(dataset.registry)
    named["meta.transfer_config"] = ckpt.json_to_u8({
        "mode": tcfg.mode, "head": tcfg.head, "task_sensors": list(task_sensors),
        "num_classes": tcfg.num_classes, "out_channels": tcfg.out_channels,
    })
    ckpt.save_tensors(os.path.join(args.out, "head.msgm"), named)
    summary = {"initial_loss": losses[0], "final_loss": losses[-1], **scores}
    with open(os.path.join(args.out, "finetune-summary.json"), "w", encoding="utf-8") as f:
        json.dump(_json_safe(summary), f, indent=2)
    print(f"task sensors: {list(task_sensors)}  mode: {tcfg.mode}  head: {tcfg.head}")
    print(f"loss: {losses[0]:.6f} -> {losses[-1]:.6f} over {len(losses)} steps")
    for k, val in scores.items():
        print(f"{k}: {val:.6f}")
    _write_produced(args.out)
    return 0


def cmd_evaluate(args):
    run = _run_config(args)
    _prepare_out(args, run)
    dataset = load_manifest(_manifest_path(args.data))
    mcfg = run.model_config()
    params = load_pretrained(_checkpoint_path(args.checkpoint), dataset.registry, mcfg)
    records = _eval_records(dataset, run["eval.samples"])
    report = reconstruction_report(params, mcfg, dataset, records,
                                   stream_rng(run["seed"], STREAM_EVAL))
    cross_l1 = cross_reconstruction_l1(params, mcfg, dataset, records,
                                       stream_rng(run["seed"], STREAM_EVAL, 1))
    rows = []
    for sid, vals in sorted(report.items()):
        name = dataset.registry[sid].name
        rows.append([name, vals["masked_l1"], vals["mae"], vals["psnr"],
                     vals["ssim"], vals.get("sam_deg")])
    table = format_table(["sensor", "masked_l1", "mae", "psnr", "ssim", "sam_deg"], rows)
    print(table, end="")
    if cross_l1 is not None:
        print(f"cross_l1 (paired sensors): {cross_l1:.6f}")
    payload = {"per_sensor": {dataset.registry[sid].name: vals
                              for sid, vals in report.items()},
               "cross_l1": cross_l1}
    with open(os.path.join(args.out, "metric-report.json"), "w", encoding="utf-8") as f:
        json.dump(_json_safe(payload), f, indent=2)
    with open(os.path.join(args.out, "metric-table.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    _write_produced(args.out)
    return 0


def cmd_reconstruct(args):
    run = _run_config(args)
    _prepare_out(args, run)
    dataset = load_manifest(_manifest_path(args.data))
    mcfg = run.model_config()
    params = load_pretrained(_checkpoint_path(args.checkpoint), dataset.registry, mcfg)
    registry = dataset.registry
    sensor = registry.by_name(run["reconstruct.sensor"]) if run["reconstruct.sensor"] else registry[0]
    records = dataset.by_sensor[sensor.sensor_id][: run["reconstruct.samples"]]
    if not records:
        raise DataFormatError(f"no samples for sensor {sensor.name!r}")
    rng = stream_rng(run["seed"], STREAM_RENDER)
    triples = []
    stats = []
    for r in records:
        gt = dataset.image(r.sample_id)
        plan = draw_mask(dataset.width, dataset.height, mcfg.mask_unit,
                         mcfg.mask_ratio, rng)
        with T.no_grad():
            pred, _aux, _reports = reconstruct_sample(
                params, mcfg, gt, sensor.sensor_id,
                to_token_mask(plan, mcfg.patch_size), sensor.sensor_id)
        triples.append((gt, pred.data, to_pixel_mask(plan)))
        if sensor.channels == 2:
            stats.append({
                "sample_id": r.sample_id,
                "gt_mean": [float(v) for v in gt.mean(axis=(1, 2))],
                "gt_std": [float(v) for v in gt.std(axis=(1, 2))],
                "pred_mean": [float(v) for v in pred.data.mean(axis=(1, 2))],
                "pred_std": [float(v) for v in pred.data.std(axis=(1, 2))],
                "ssi": [float(v) for v in ssi(gt, pred.data)],
            })
    grid = reconstruction_grid(triples)
    base = os.path.join(args.out, f"reconstruct-{sensor.name}")
    write_ppm(base + ".ppm", grid)
    wrote_png = write_png(base + ".png", grid)
    print(f"wrote {base}.ppm ({len(records)} columns, rows: masked/prediction/ground-truth)")
    if wrote_png:
        print(f"wrote {base}.png")
    if stats:
        with open(base + "-stats.json", "w", encoding="utf-8") as f:
            json.dump(_json_safe(stats), f, indent=2)
        print(f"wrote {base}-stats.json")
    _write_produced(args.out)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossmim",
        description="Multisensor masked-image pretraining at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset manifest file or its directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="pretraining checkpoint file or its directory")

    p = sub.add_parser("gen-data", help="generate a synthetic multisensor dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run masked-image pretraining")
    common(p, data=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="run a {moe} x {cross rate} ablation grid")
    common(p)
    p.add_argument("--data", help="reuse an existing dataset manifest")
    p.add_argument("--grid", required=True, help='e.g. "moe=0,1;cross=0,0.5,1.0"')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("finetune", help="fine-tune on a synthetic downstream task")
    common(p, data=True)
    p.add_argument("--checkpoint", help="pretraining checkpoint (omit to train from scratch)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="reconstruction metrics of a checkpoint")
    common(p, data=True, checkpoint=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="render reconstruction grids")
    common(p, data=True, checkpoint=True)
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        _thread_cap()
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        dump = e.diagnostics.get("dump_path")
        if dump:
            print(f"diagnostic dump: {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    except CompatibilityError as e:
        print(f"incompatible checkpoint: {e}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
