"""Command line entry point.

Every subcommand takes ``--config FILE`` (``key = value`` lines). Values
resolve as flags > config file > built-in defaults and are echoed to
``run_manifest.txt`` next to the outputs. Data goes to stdout, diagnostics
to stderr; any error exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dp

log = logging.getLogger("metadiffusion")

DEFAULTS = {
    "generate-designs": dict(count=10, grid=48, alpha=3.0, tmax=0.6, boundary=0.10, seed=0,
                             max_attempts=1000),
    "build-dataset": dict(frames=11, young=100.0, poisson=0.3),
    "train": dict(steps=2000, batch_size=8, lr=5e-4, warmup=100, seed=0, T=1000, schedule="cosine",
                  loss="l1", dropout=0.1, base_channels=64, channel_mults=[1, 2, 4, 8], heads=8,
                  head_dim=32, token_dim=64, time_embed_dim=256, groups=8, temporal=True),
    "sample": dict(count=10, guidance=5.0, seed=0, clip=False, validate=True),
    "validate": dict(strain=0.2, frames=11, young=100.0, poisson=0.3),
    "evaluate": dict(),
    "plot": dict(),
}


class CliError(Exception):
    pass


# -- argument handling -------------------------------------------------------------

def _flag(parser, name, type_=None, help_=None, required=False):
    dest = name.replace("-", "_")
    if type_ is bool:
        parser.add_argument(f"--{name}", dest=dest, action=argparse.BooleanOptionalAction, default=None,
                            help=help_)
    else:
        parser.add_argument(f"--{name}", dest=dest, type=type_, default=None, help=help_, required=required)


def _ints(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metadiffusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", type=Path, help="key = value file with option values")
        return c

    c = command("generate-designs", "sample mirrored GRF unit cells as PBM files")
    c.add_argument("--out", type=Path, required=True)
    _flag(c, "count", int)
    _flag(c, "grid", int, "quarter size in pixels (the cell is twice as wide)")
    _flag(c, "alpha", float, "power-spectrum exponent")
    _flag(c, "tmax", float, "upper bound of the uniform threshold draw")
    _flag(c, "boundary", float, "fraction of each quarter side the spanning domain must touch")
    _flag(c, "seed", int)
    _flag(c, "max-attempts", int)

    c = command("build-dataset", "solve fe_lite strain sweeps and write a tensor store")
    c.add_argument("--designs", type=Path, required=True, help="directory of PBM designs")
    c.add_argument("--out", type=Path, required=True)
    _flag(c, "frames", int, "strain steps per sample (subsampled from the eleven defaults)")
    _flag(c, "young", float)
    _flag(c, "poisson", float)

    c = command("train", "train the denoiser on a dataset")
    c.add_argument("--dataset", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    for name, t in (("steps", int), ("batch-size", int), ("lr", float), ("warmup", int), ("seed", int),
                    ("T", int), ("schedule", str), ("loss", str), ("dropout", float),
                    ("base-channels", int), ("channel-mults", _ints), ("heads", int), ("head-dim", int),
                    ("token-dim", int), ("time-embed-dim", int), ("groups", int)):
        _flag(c, name, t)
    _flag(c, "temporal", bool, "temporal attention blocks")

    c = command("sample", "generate designs for a target stress-strain curve")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--curve", type=Path, required=True, help="text file, one stress value per line")
    c.add_argument("--out", type=Path, required=True)
    _flag(c, "count", int)
    _flag(c, "guidance", float)
    _flag(c, "seed", int)
    _flag(c, "clip", bool, "clip the implied clean sample to [-1, 1] at every step")
    _flag(c, "validate", bool, "re-simulate each design with fe_lite")

    c = command("validate", "simulate one design with fe_lite and print its curve")
    c.add_argument("--design", type=Path, required=True, help="PBM file")
    c.add_argument("--out", type=Path, help="directory for curve.txt and fields.bin")
    _flag(c, "strain", float, "largest applied compressive strain")
    _flag(c, "frames", int)
    _flag(c, "young", float)
    _flag(c, "poisson", float)

    c = command("evaluate", "compare predicted and reference curves/fields")
    c.add_argument("--pred", type=Path, required=True)
    c.add_argument("--truth", type=Path, required=True)

    c = command("plot", "render curve comparisons and field strips of a sample run")
    c.add_argument("--run", type=Path, required=True, help="output directory of `sample`")
    c.add_argument("--out", type=Path, help="defaults to RUN/plots")
    return p


def resolve(args) -> dict:
    values = dict(DEFAULTS[args.command])
    if getattr(args, "config", None) is not None:
        if not args.config.exists():
            raise CliError(f"config file {args.config} not found")
        for key, value in dp.read_kv(args.config).items():
            key = key.replace("-", "_")
            if key not in values:
                raise CliError(f"unknown option {key!r} in {args.config}")
            values[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose"):
            continue
        if value is not None or key not in values:
            values[key] = value
    return values


def write_manifest(out_dir: Path, command: str, values: dict, extra: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = {"command": command}
    entries.update({k: (str(v) if isinstance(v, Path) else v) for k, v in values.items() if v is not None})
    entries.update(extra or {})
    dp.write_kv(out_dir / "run_manifest.txt", entries)


def emit(record: dict):
    print(json.dumps(record), flush=True)


# -- subcommands ----------------------------------------------------------------

def cmd_generate_designs(v):
    from .design import GrfSpec, generate_unit_cell

    out = v["out"]
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "generate-designs", v)
    records = []
    for k in range(v["count"]):
        spec = GrfSpec(grid_size=v["grid"], alpha=v["alpha"], t_max=v["tmax"],
                       boundary_fraction=v["boundary"], rng_seed=v["seed"] + k,
                       max_attempts=v["max_attempts"])
        cell = generate_unit_cell(spec)
        name = f"design_{k:05d}"
        dp.write_pbm(out / f"{name}.pbm", cell.pixels)
        rec = {"id": name, "seed": spec.rng_seed, "threshold": cell.threshold,
               "rejections": cell.rejections, "fill_fraction": cell.fill_fraction}
        records.append(rec)
        emit(rec)
    (out / "designs.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    log.info("wrote %d designs to %s", len(records), out)


def _material(v):
    from .fe import MaterialParams
    return MaterialParams(float(v["young"]), float(v["poisson"]))


def cmd_build_dataset(v):
    from .design import UnitCell
    from .fe import run_strain_sweep

    src = v["designs"]
    paths = sorted(src.glob("*.pbm"))
    if not paths:
        raise CliError(f"no .pbm designs in {src}")
    seeds = {}
    index = src / "designs.jsonl"
    if index.exists():
        for line in index.read_text().splitlines():
            rec = json.loads(line)
            seeds[rec["id"]] = rec.get("seed")
    levels = dp.strain_levels(v["frames"])
    mat = _material(v)
    out = v["out"]
    out.mkdir(parents=True, exist_ok=True)

    def samples():
        for k, path in enumerate(paths):
            cell = UnitCell(dp.read_pbm(path), seed=seeds.get(path.stem))
            frames, curve = run_strain_sweep(cell, mat, levels)
            log.info("[%d/%d] %s  stress at %.3f strain = %.4g", k + 1, len(paths), path.stem,
                     levels[-1], curve[-1])
            yield dp.Sample(path.stem, cell, dp.FieldSequence(frames, levels), curve, seeds.get(path.stem))

    entries = dp.build_dataset(samples(), out)
    write_manifest(out, "build-dataset", v, {"strain_levels": [float(x) for x in levels]})
    for e in entries:
        emit({"id": e["id"], "fill_fraction": e["fill_fraction"]})


def _seed_torch(seed):
    import torch
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def cmd_train(v):
    from .diffusion import DiffusionSchedule, GuidanceConfig
    from .training import TrainConfig, evaluation_loss, model_inputs, save_checkpoint, train_denoiser
    from .unet import DenoiserConfig, VideoUNet

    _seed_torch(v["seed"])
    ds = dp.Dataset(v["dataset"])
    if len(ds) == 0:
        raise CliError(f"dataset {v['dataset']} is empty")
    if ds.stats is None:
        raise CliError(f"dataset {v['dataset']} has no stats.json")
    fields, curves = ds.arrays()
    levels = ds[0].fields.strain_levels
    mults = v["channel_mults"]
    cfg = DenoiserConfig(image_size=fields.shape[-1], frames=fields.shape[1],
                         base_channels=v["base_channels"],
                         channel_mults=tuple(mults if isinstance(mults, list) else [mults]),
                         attention_heads=v["heads"], head_dim=v["head_dim"], token_dim=v["token_dim"],
                         time_embed_dim=v["time_embed_dim"], groups=v["groups"],
                         temporal=bool(v["temporal"]), seed=v["seed"])
    model = VideoUNet(cfg)
    sched = DiffusionSchedule.from_config({"family": v["schedule"], "T": v["T"]})
    guidance = GuidanceConfig(dropout_prob=v["dropout"])
    x0, cond = model_inputs(fields, curves, ds.stats)
    tcfg = TrainConfig(steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"], warmup=v["warmup"],
                       loss_norm=v["loss"], seed=v["seed"])
    before = evaluation_loss(model, x0, cond, sched, guidance, norm=v["loss"])
    started = time.perf_counter()

    def progress(step, loss):
        if step % 100 == 0 or step == tcfg.steps - 1:
            log.info("step %d  loss %.4f  (%.0f s)", step, loss, time.perf_counter() - started)

    history = train_denoiser(model, x0, cond, sched, guidance, tcfg, progress)
    after = evaluation_loss(model, x0, cond, sched, guidance, norm=v["loss"])
    out = v["out"]
    material = {}
    ds_manifest = v["dataset"] / "run_manifest.txt"
    if ds_manifest.exists():
        meta = dp.read_kv(ds_manifest)
        material = {k: meta[k] for k in ("young", "poisson") if k in meta}
    save_checkpoint(out, model, sched, ds.stats, levels,
                    {"seed": v["seed"], "steps": v["steps"], "dropout": v["dropout"], **material})
    (out / "losses.txt").write_text("".join(f"{x:.9g}\n" for x in history))
    write_manifest(out, "train", v)
    emit({"initial_loss": before, "final_loss": after, "steps": len(history)})


def _conditioning_curve(path, levels):
    """Read a target curve; eleven values are subsampled to the model's strain steps."""
    curve = dp.read_curve(path)
    if len(curve) == len(levels):
        return curve
    if len(curve) == len(dp.STRAIN_LEVELS):
        idx = [int(np.argmin(np.abs(dp.STRAIN_LEVELS - s))) for s in levels]
        return curve[idx]
    raise CliError(f"{path}: {len(curve)} stress values, the model expects {len(levels)}")


def _save_strip(path, frames):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stress = frames[:, dp.STRESS]
    lo, hi = float(stress.min()), float(stress.max())
    strip = np.concatenate(list(stress), axis=1)
    plt.imsave(path, strip, cmap="viridis", vmin=lo, vmax=hi if hi > lo else lo + 1)


def cmd_sample(v):
    from .diffusion import GuidanceConfig
    from .fe import MaterialParams, SingularSystemError, run_strain_sweep
    from .metrics import nrmse
    from .training import generate_fields, interpret_sample, load_checkpoint

    _seed_torch(v["seed"])
    model, sched, stats, levels, cfg = load_checkpoint(v["checkpoint"])
    if stats is None:
        raise CliError("checkpoint carries no normalization statistics")
    levels = levels if levels is not None else dp.strain_levels(model.cfg.frames)
    target = _conditioning_curve(v["curve"], levels)
    out = v["out"]
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "sample", v)
    dp.write_curve(out / "target.txt", target)
    mat = MaterialParams(float(cfg.get("run.young", 100.0)), float(cfg.get("run.poisson", 0.3)))
    guidance = GuidanceConfig(weight=v["guidance"])
    generated = generate_fields(model, stats.normalize_curve(target)[None], sched, guidance,
                                seed=v["seed"], count=v["count"], clip=bool(v["clip"]))[0]
    summary = []
    for k, frames_norm in enumerate(generated):
        sdir = out / f"sample_{k:03d}"
        sdir.mkdir(exist_ok=True)
        pred = interpret_sample(frames_norm, stats, levels)
        dp.write_tensor_file(sdir / "fields.bin", pred.fields.frames)
        _save_strip(sdir / "frames.png", pred.fields.frames)
        rec = {"id": sdir.name, "nrmse": None, "validator_nrmse": None, "fill_fraction": None,
               "error": pred.error}
        if pred.cell is not None:
            dp.write_pbm(sdir / "design.pbm", pred.cell.pixels)
            dp.write_curve(sdir / "curve.txt", pred.curve)
            rec["nrmse"] = nrmse(pred.curve, target)
            rec["fill_fraction"] = pred.cell.fill_fraction
            if v["validate"]:
                try:
                    _, sim = run_strain_sweep(pred.cell, mat, levels)
                    dp.write_curve(sdir / "validator.txt", sim)
                    rec["validator_nrmse"] = nrmse(sim, target)
                except SingularSystemError as exc:
                    rec["error"] = f"validator: {exc}"
        summary.append(rec)
        emit(rec)
    (out / "summary.jsonl").write_text("".join(json.dumps(r) + "\n" for r in summary))


def cmd_validate(v):
    from .design import UnitCell
    from .fe import run_strain_sweep

    cell = UnitCell(dp.read_pbm(v["design"]))
    levels = dp.strain_levels(v["frames"]) * (v["strain"] / dp.STRAIN_LEVELS[-1])
    frames, curve = run_strain_sweep(cell, _material(v), levels)
    if v["out"] is not None:
        write_manifest(v["out"], "validate", v)
        dp.write_curve(v["out"] / "curve.txt", curve)
        dp.write_tensor_file(v["out"] / "fields.bin", frames)
    for e, s in zip(levels, curve):
        print(f"{e:.6g} {s:.9g}")


def _collect(root: Path):
    files = {}
    for path in sorted(root.rglob("*")):
        if path.suffix in (".txt", ".bin") and path.name != "run_manifest.txt" and path.is_file():
            files[path.relative_to(root)] = path
    return files


def cmd_evaluate(v):
    from .metrics import mean_field_error, nrmse

    pred, truth = _collect(v["pred"]), _collect(v["truth"])
    common = sorted(set(pred) & set(truth))
    if not common:
        raise CliError("no matching curve (.txt) or field (.bin) files between the two directories")
    for rel in sorted(set(truth) - set(pred)):
        log.warning("no prediction for %s", rel)
    curve_errs, field_errs = [], []
    for rel in common:
        if rel.suffix == ".txt":
            err = nrmse(dp.read_curve(pred[rel]), dp.read_curve(truth[rel]))
            curve_errs.append(err)
            emit({"file": str(rel), "metric": "nrmse", "value": err})
        else:
            p, t = dp.read_tensor_file(pred[rel]), dp.read_tensor_file(truth[rel])
            if p.shape != t.shape or p.ndim != 4:
                raise CliError(f"{rel}: field tensors must share a (frames, 3, n, n) shape")
            err = mean_field_error(p[:, dp.STRESS], t[:, dp.STRESS])
            field_errs.append(err)
            emit({"file": str(rel), "metric": "rel_l2_mean", "value": err})
    emit({"file": "*", "metric": "aggregate",
          "nrmse_mean": float(np.mean(curve_errs)) if curve_errs else None,
          "rel_l2_mean": float(np.mean(field_errs)) if field_errs else None,
          "count": len(common)})


def cmd_plot(v):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .postproc import to_eulerian

    run = v["run"]
    out = v["out"] or run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    target = dp.read_curve(run / "target.txt")
    manifest = dp.read_kv(run / "run_manifest.txt") if (run / "run_manifest.txt").exists() else {}
    levels = None
    sample_dirs = sorted(p for p in run.glob("sample_*") if p.is_dir())
    if not sample_dirs:
        raise CliError(f"no sample_* directories in {run}")
    fig, ax = plt.subplots(figsize=(5, 4))
    for k, sdir in enumerate(sample_dirs):
        fields = dp.read_tensor_file(sdir / "fields.bin")
        if levels is None:
            levels = dp.strain_levels(fields.shape[0])
            ax.plot(levels, target, "k-o", lw=2, label="target")
        if (sdir / "curve.txt").exists():
            ax.plot(levels, dp.read_curve(sdir / "curve.txt"), "-", color=f"C{k % 10}", alpha=0.7,
                    label="predicted" if k == 0 else None)
        if (sdir / "validator.txt").exists():
            ax.plot(levels, dp.read_curve(sdir / "validator.txt"), "--", color=f"C{k % 10}", alpha=0.7,
                    label="fe_lite" if k == 0 else None)
        seq = dp.FieldSequence(fields, levels)
        mask = dp.read_pbm(sdir / "design.pbm").astype(bool) if (sdir / "design.pbm").exists() else None
        euler, _ = to_eulerian(seq, mask)
        f = fields.shape[0]
        strip, axes = plt.subplots(2, f, figsize=(1.6 * f, 3.4), squeeze=False)
        stress = fields[:, dp.STRESS] * (mask if mask is not None else 1)
        vmax = float(np.abs(stress).max()) or 1.0
        for j in range(f):
            axes[0, j].imshow(stress[j], cmap="viridis", vmin=0, vmax=vmax)
            axes[1, j].imshow(euler[j], cmap="viridis", vmin=0, vmax=vmax)
            axes[0, j].set_title(f"{levels[j]:.3g}", fontsize=8)
            for a in axes[:, j]:
                a.set_axis_off()
        strip.suptitle(f"{sdir.name}: stress, undeformed (top) and deformed (bottom)", fontsize=9)
        strip.savefig(out / f"{sdir.name}_fields.png", dpi=100)
        plt.close(strip)
    ax.set_xlabel("applied strain")
    ax.set_ylabel("effective stress")
    ax.legend(fontsize=8)
    ax.set_title(f"guidance {manifest.get('guidance', '?')}")
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)
    emit({"figures": sorted(p.name for p in out.glob("*.png"))})


COMMANDS = {
    "generate-designs": cmd_generate_designs,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "validate": cmd_validate,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        values = resolve(args)
        COMMANDS[args.command](values)
    except (CliError, ValueError, OSError, RuntimeError, KeyError, ArithmeticError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
