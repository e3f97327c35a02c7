"""Command-line entry point: ``adaseg <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
single ``adaseg: error: kind=<usage|runtime> command=<cmd> message="..."``
line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .ada import AdaConfig, EpochRecord, ada_training, apply_mask, build_mask, iou_matrix
from .config import RunConfig
from .data import generate_synthetic_dataset, load_manifest, save_image, save_mask, write_dataset, write_pgm
from .interpret import ALL_METHODS, InterpretMethod, compute_saliency, minmax_normalize
from .plots import convergence_svg, heatmap_svg
from .tensor import set_threads
from .unet import AdamState, build_unet, load_checkpoint, save_checkpoint

METRICS_HEADER = ("dataset", "model", "method", "dsc", "hsd", "tpr", "tnr", "ppv", "hsd_undefined_count")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag dest -> (section, key); values left at None keep the config-file value
FLAG_MAP = {
    "seed": ("run", "seed"), "out": ("run", "out"), "threads": ("run", "threads"),
    "lr": ("run", "learning_rate"), "data": ("run", "data"), "split": ("run", "split"),
    "methods": ("run", "methods"), "sample": ("run", "sample"), "model": ("run", "model"),
    "method_label": ("run", "method_label"), "labels": ("run", "labels"), "zoom": ("run", "zoom"),
    "n": ("data", "n"), "train": ("data", "train"), "val": ("data", "val"),
    "noise": ("data", "noise_std"), "correlation": ("data", "correlation"),
    "spurious": ("data", "spurious_context"), "distractors": ("data", "distractors"),
    "base_channels": ("unet", "base_channels"), "depth": ("unet", "depth"),
    "dropout": ("unet", "dropout"), "bn_momentum": ("unet", "bn_momentum"),
    "epochs": ("ada", "standard_epochs"), "cycles": ("ada", "cycles"), "ada_epochs": ("ada", "ada_epochs"),
    "z": ("ada", "z"), "method": ("ada", "method"), "target": ("ada", "target"),
    "batch_size": ("ada", "batch_size"),
}


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6f}"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="INI run configuration")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--threads", type=int)
    g.add_argument("--dry-run", action="store_true", help="validate flags and print the config only")

    p = _Parser(prog="adaseg", description="Saliency-guided occlusion augmentation for U-Net segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    def model_flags(sp):
        sp.add_argument("--base-channels", type=int)
        sp.add_argument("--depth", type=int)
        sp.add_argument("--dropout", type=float)
        sp.add_argument("--bn-momentum", type=float)

    sp = add("gen-data", "generate the synthetic dataset")
    sp.add_argument("--n", type=int)
    sp.add_argument("--train", type=int)
    sp.add_argument("--val", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--correlation", type=float)
    sp.add_argument("--spurious", choices=("true", "false"))
    sp.add_argument("--distractors", type=int, help="gt-lookalike shapes outside the cord per image")

    sp = add("train", "standard training from scratch")
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    model_flags(sp)

    sp = add("ada-train", "ADA cycles resumed from a checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--resume", dest="checkpoint")
    sp.add_argument("--method", choices=[m.value for m in ALL_METHODS])
    sp.add_argument("--cycles", type=int)
    sp.add_argument("--ada-epochs", type=int)
    sp.add_argument("--z", type=int)
    sp.add_argument("--target", choices=("gt", "pred", "all"))
    sp.add_argument("--batch-size", type=int)

    for name, help_ in (("eval", "metrics on clean data"), ("robustness", "metrics on the occluded grid set")):
        sp = add(name, help_)
        sp.add_argument("--data")
        sp.add_argument("--checkpoint")
        sp.add_argument("--split")
        sp.add_argument("--model", help="model name for the CSV row")
        sp.add_argument("--method-label", help="method name for the CSV row")
        if name == "robustness":
            sp.add_argument("--z", type=int)

    for name, help_ in (("interpret", "saliency, mask and occluded image per method"),
                        ("iou-matrix", "pairwise mean IoU of occlusion masks")):
        sp = add(name, help_)
        sp.add_argument("--data")
        sp.add_argument("--checkpoint")
        sp.add_argument("--split")
        sp.add_argument("--methods", help="'all' or comma-separated method names")
        sp.add_argument("--z", type=int)
        sp.add_argument("--target", choices=("gt", "pred", "all"))
        if name == "interpret":
            sp.add_argument("--sample")

    sp = add("plot", "DSC convergence curves as SVG")
    sp.add_argument("inputs", nargs="*", help="convergence CSV files")
    sp.add_argument("--labels", help="comma-separated legend labels")
    sp.add_argument("--zoom", help="epoch range A:B for the inset")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.command in ("interpret", "iou-matrix") and getattr(args, "split", None) is None and not args.config:
        cfg.run.split = "train"
    for dest, (sec, key) in FLAG_MAP.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg.update(sec, key, str(val) if isinstance(val, str) else val)
    if getattr(args, "checkpoint", None) is not None:
        cfg.run.checkpoint = args.checkpoint
    if args.command == "plot" and args.inputs:
        cfg.run.inputs = ",".join(args.inputs)
    return cfg


def _validate(cmd: str, cfg: RunConfig) -> None:
    if cfg.run.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {cfg.run.threads}")
    if cmd == "gen-data":
        cfg.data.validate()
        return
    if cmd == "plot":
        if not cfg.run.inputs:
            raise UsageError("plot needs at least one convergence CSV")
        for p in cfg.run.inputs.split(","):
            if not Path(p).is_file():
                raise UsageError(f"missing input {p}")
        _zoom(cfg.run.zoom)
        return
    if not cfg.run.data:
        raise UsageError("--data is required")
    if cmd == "train":
        cfg.unet.validate()
        cfg.ada.validate()
    else:
        if not cfg.run.checkpoint:
            raise UsageError("--resume is required" if cmd == "ada-train" else "--checkpoint is required")
        if not Path(cfg.run.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {cfg.run.checkpoint}")
        cfg.ada.validate()
    if cmd in ("interpret", "iou-matrix"):
        _methods(cfg.run.methods)
    if cmd == "interpret" and not cfg.run.sample:
        raise UsageError("--sample is required")
    for split in _splits(cmd, cfg):
        if not (Path(cfg.run.data) / f"{split}.manifest").is_file():
            raise UsageError(f"no {split}.manifest under {cfg.run.data}")


def _splits(cmd, cfg) -> list[str]:
    if cmd in ("train", "ada-train"):
        return ["train", "val"]
    return [cfg.run.split]


def _methods(raw: str) -> list[InterpretMethod]:
    if raw.strip() == "all":
        return list(ALL_METHODS)
    try:
        return [InterpretMethod(m.strip()) for m in raw.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _zoom(raw: str) -> Optional[tuple[float, float]]:
    if not raw:
        return None
    try:
        a, b = (float(v) for v in raw.replace("-", ":").split(":"))
    except ValueError:
        raise UsageError(f"--zoom expects A:B, got {raw!r}") from None
    if b <= a:
        raise UsageError(f"--zoom range must be increasing, got {raw!r}")
    return a, b


def _load_split(cfg, split):
    return load_manifest(Path(cfg.run.data) / f"{split}.manifest")


def _check_z(cfg, n):
    if cfg.ada.z > n:
        raise UsageError(f"occlusion side z={cfg.ada.z} exceeds image size n={n}")


def _load_model(cfg, n):
    model, state = load_checkpoint(cfg.run.checkpoint)
    if model.config.n != n:
        raise UsageError(f"checkpoint expects n={model.config.n} but the dataset has n={n}")
    return model, state


class _CsvLog:
    """Convergence CSV writer; ``append`` keeps existing rows."""

    def __init__(self, path, append=False):
        self.path = Path(path)
        fresh = not (append and self.path.exists() and self.path.stat().st_size > 0)
        self.fh = open(self.path, "w" if fresh else "a", encoding="utf-8", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if fresh:
            self.w.writerow(EpochRecord.FIELDS)

    def __call__(self, rec: EpochRecord):
        self.w.writerow([rec.epoch, rec.phase, rec.cycle] + [_fmt(getattr(rec, f)) for f in EpochRecord.FIELDS[3:]])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _append_metrics(path, rows):
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    train, val = generate_synthetic_dataset(cfg.data, cfg.run.seed)
    write_dataset(out, train)
    write_dataset(out, val)
    print(f"wrote {len(train)} train and {len(val)} val samples to {out}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    cfg.unet.n = train.n
    rng = np.random.default_rng(cfg.run.seed)
    model = build_unet(cfg.unet.validate(), rng)
    state = AdamState(lr=cfg.run.learning_rate)
    conf = AdaConfig(z=1, standard_epochs=cfg.ada.standard_epochs, cycles=0, ada_epochs=0,
                     batch_size=cfg.ada.batch_size)
    sink = _CsvLog(out / "convergence.csv")
    try:
        ada_training(model, train, conf, rng, val=val if len(val) else None, state=state,
                     aug_params=cfg.augment, log_sink=sink)
    finally:
        sink.close()
    save_checkpoint(model, state, out / "model.ckpt")
    print(f"trained {model.epochs_trained} epochs; checkpoint {out / 'model.ckpt'}")


def cmd_ada_train(cfg: RunConfig, out: Path) -> None:
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    model, state = _load_model(cfg, train.n)
    state = state or AdamState(lr=cfg.run.learning_rate)
    _check_z(cfg, train.n)
    val = val if len(val) else None
    start = model.epochs_trained
    init = EpochRecord(start, "init", 0, float("nan"), *([float("nan")] * 5))
    if val is not None:
        r = metrics.evaluate(model, val)
        init = EpochRecord(start, "init", 0, float("nan"), r.dsc, r.hsd, r.tpr, r.tnr, r.ppv)
    init_log = _CsvLog(out / "initial_eval.csv")
    init_log(init)
    init_log.close()

    def on_cycle_end(c, m, s):
        save_checkpoint(m, s, out / f"cycle_{c:03d}.ckpt")

    conf = AdaConfig(z=cfg.ada.z, standard_epochs=0, cycles=cfg.ada.cycles, ada_epochs=cfg.ada.ada_epochs,
                     method=cfg.ada.method, target=cfg.ada.target, batch_size=cfg.ada.batch_size)
    rng = np.random.default_rng(cfg.run.seed)
    sink = _CsvLog(out / "convergence.csv", append=True)
    try:
        ada_training(model, train, conf, rng, val=val, state=state, aug_params=cfg.augment, log_sink=sink,
                     on_cycle_end=on_cycle_end, start_epoch=start)
    finally:
        sink.close()
    save_checkpoint(model, state, out / "model.ckpt")
    print(f"{conf.method.value}: {model.epochs_trained} epochs total; checkpoint {out / 'model.ckpt'}")


def _metric_row(dataset, cfg, report) -> list[str]:
    ckpt = Path(cfg.run.checkpoint)
    model = cfg.run.model or (ckpt.parent.name if ckpt.stem == "model" and ckpt.parent.name else ckpt.stem)
    return [dataset, model, cfg.run.method_label, _fmt(report.dsc), _fmt(report.hsd), _fmt(report.tpr),
            _fmt(report.tnr), _fmt(report.ppv), str(report.hsd_undefined)]


def _eval_common(cfg):
    data = _load_split(cfg, cfg.run.split)
    if len(data) == 0:
        raise UsageError(f"split {cfg.run.split} is empty")
    model, _ = _load_model(cfg, data.n)
    return data, model


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    data, model = _eval_common(cfg)
    report = metrics.evaluate(model, data)
    _append_metrics(out / "metrics.csv", [_metric_row(cfg.run.split, cfg, report)])
    print(f"{cfg.run.split}: DSC {report.dsc:.2f} over {report.count} samples")


def cmd_robustness(cfg: RunConfig, out: Path) -> None:
    data, model = _eval_common(cfg)
    _check_z(cfg, data.n)
    robust = metrics.build_robustness_data(data, data.n, cfg.ada.z)
    report = metrics.evaluate(model, robust)
    name = f"{cfg.run.split}-occluded-z{cfg.ada.z}"
    _append_metrics(out / "metrics.csv", [_metric_row(name, cfg, report)])
    print(f"{name}: DSC {report.dsc:.2f} over {report.count} variants")


def cmd_interpret(cfg: RunConfig, out: Path) -> None:
    data = _load_split(cfg, cfg.run.split)
    try:
        k = data.index(cfg.run.sample)
    except (KeyError, ValueError):
        raise UsageError(f"unknown sample id {cfg.run.sample!r} in split {cfg.run.split}") from None
    model, _ = _load_model(cfg, data.n)
    _check_z(cfg, data.n)
    image, gt = data.images[k], data.masks[k]
    dest = out / "interpret" / cfg.run.sample
    dest.mkdir(parents=True, exist_ok=True)
    for m in _methods(cfg.run.methods):
        sal = compute_saliency(m, model, image, gt, cfg.ada.target).values
        mask = build_mask(sal, gt, data.n, cfg.ada.z)
        vis = np.round(minmax_normalize(sal[None])[0] * 255).astype(np.uint8)
        write_pgm(dest / f"{m.value}_saliency.pgm", vis, 255)
        save_mask(dest / f"{m.value}_mask.pgm", mask.values)
        save_image(dest / f"{m.value}_xnew.pgm", apply_mask(image, mask))
    print(f"wrote interpretation panels for {cfg.run.sample} to {dest}")


def cmd_iou_matrix(cfg: RunConfig, out: Path) -> None:
    data = _load_split(cfg, cfg.run.split)
    if len(data) == 0:
        raise UsageError(f"split {cfg.run.split} is empty")
    model, _ = _load_model(cfg, data.n)
    _check_z(cfg, data.n)
    methods = _methods(cfg.run.methods)
    mat = iou_matrix(model, data, methods, cfg.ada.z, cfg.ada.target)
    names = [m.value for m in methods]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + names)
    for name, row in zip(names, mat):
        w.writerow([name] + [_fmt(v) for v in row])
    (out / "iou_matrix.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "iou_matrix.svg").write_text(heatmap_svg(names, mat), encoding="utf-8")
    print(f"wrote {len(names)}x{len(names)} IoU matrix to {out}")


def _read_convergence(path) -> list[tuple[float, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no convergence rows")
    try:
        return [(float(r["epoch"]), float(r["dsc"])) for r in rows]
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"{path}: not a convergence CSV") from None


def cmd_plot(cfg: RunConfig, out: Path) -> None:
    inputs = cfg.run.inputs.split(",")
    labels = cfg.run.labels.split(",") if cfg.run.labels else []
    if labels and len(labels) != len(inputs):
        raise UsageError(f"{len(labels)} labels for {len(inputs)} inputs")
    if not labels:
        labels = [Path(p).parent.name if Path(p).stem == "convergence" and Path(p).parent.name else Path(p).stem
                  for p in inputs]
    series = [(lab, _read_convergence(p)) for lab, p in zip(labels, inputs)]
    (out / "convergence.svg").write_text(convergence_svg(series, _zoom(cfg.run.zoom)), encoding="utf-8")
    print(f"wrote {out / 'convergence.svg'}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "ada-train": cmd_ada_train, "eval": cmd_eval,
    "robustness": cmd_robustness, "interpret": cmd_interpret, "iou-matrix": cmd_iou_matrix, "plot": cmd_plot,
}


def _fail(kind: str, command: str, message: str, code: int) -> int:
    msg = str(message).replace('"', "'").replace("\n", " ")
    print(f'adaseg: error: kind={kind} command={command} message="{msg}"', file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = next((a for a in argv if a in COMMANDS), "-")
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = resolve_config(args)
        _validate(command, cfg)
    except (UsageError, ValueError, OSError) as exc:
        return _fail("usage", command, exc, 2)

    if args.dry_run:
        sys.stdout.write(cfg.to_ini())
        return 0
    out = Path(cfg.run.out)
    try:
        set_threads(cfg.run.threads)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / f"config.{command}.ini")
        COMMANDS[command](cfg, out)
    except UsageError as exc:
        return _fail("usage", command, exc, 2)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        return _fail("runtime", command, f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
