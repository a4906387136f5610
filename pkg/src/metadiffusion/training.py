"""Training loop, conditional generation and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data as dp
from .diffusion import DiffusionSchedule, GuidanceConfig, sample, training_loss
from .postproc import EmptyDesignError, extract_topology, predict_curve
from .unet import DenoiserConfig, VideoUNet


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 5e-4
    warmup: int = 100
    final_lr_fraction: float = 0.1
    loss_norm: str = "l1"
    grad_clip: float = 1.0
    seed: int = 0


def model_inputs(fields, curves, stats: dp.NormalizationStats):
    """Normalized float32 tensors: fields (S, F, 3, n, n) and curves (S, F)."""
    x0 = torch.as_tensor(stats.normalize_fields(fields, channel_axis=2), dtype=torch.float32)
    cond = torch.as_tensor(stats.normalize_curve(curves), dtype=torch.float32)
    return x0, cond


def _lr_factor(step, cfg: TrainConfig):
    if step < cfg.warmup:
        return (step + 1) / cfg.warmup
    progress = (step - cfg.warmup) / max(cfg.steps - cfg.warmup, 1)
    low = cfg.final_lr_fraction
    return low + (1 - low) * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))


def evaluation_loss(model, x0, cond, sched, guidance, seed=12345, repeats=8, norm="l1") -> float:
    """Training loss averaged over a fixed set of random draws."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        losses = [training_loss(x0, cond, model, sched, guidance, gen, norm).item() for _ in range(repeats)]
    return float(np.mean(losses))


def train_denoiser(model, x0, cond, sched: DiffusionSchedule, guidance: GuidanceConfig,
                   cfg: TrainConfig, callback=None) -> list:
    """Optimize ``model`` with Adam; returns the per-step training losses."""
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched_lr = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, cfg))
    n = x0.shape[0]
    history = []
    model.train()
    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            # every sample at least once; larger batches repeat samples with fresh t and noise
            reps = -(-cfg.batch_size // n)
            idx = torch.cat([torch.randperm(n, generator=gen) for _ in range(reps)])[: cfg.batch_size]
        else:
            idx = torch.randperm(n, generator=gen)[: cfg.batch_size]
        loss = training_loss(x0[idx], cond[idx], model, sched, guidance, gen, cfg.loss_norm)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched_lr.step()
        history.append(loss.item())
        if callback is not None:
            callback(step, history[-1])
    model.eval()
    return history


def generate_fields(model, curves_norm, sched, guidance, seed=0, count=1, clip=False) -> np.ndarray:
    """Sample ``count`` normalized field sequences for every conditioning curve.

    Returns an array (len(curves), count, F, 3, n, n).
    """
    cfg = model.cfg
    curves_norm = torch.as_tensor(np.asarray(curves_norm), dtype=torch.float32)
    cond = curves_norm.repeat_interleave(count, dim=0)
    shape = (cond.shape[0], cfg.frames, cfg.in_channels, cfg.image_size, cfg.image_size)
    gen = torch.Generator().manual_seed(seed)
    out = sample(model, cond, sched, guidance, gen, shape, clip_denoised=clip)
    return out.numpy().reshape(len(curves_norm), count, *shape[1:])


@dataclass
class Prediction:
    fields: dp.FieldSequence
    cell: object | None
    curve: np.ndarray | None
    error: str | None = None


def interpret_sample(frames_norm, stats: dp.NormalizationStats, levels) -> Prediction:
    """Denormalize one generated sample and extract design and curve."""
    physical = stats.denormalize_fields(frames_norm, channel_axis=1)
    seq = dp.FieldSequence(physical, levels)
    try:
        cell = extract_topology(seq)
    except EmptyDesignError as exc:
        return Prediction(seq, None, None, str(exc))
    return Prediction(seq, cell, predict_curve(seq, cell))


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model, sched: DiffusionSchedule, stats: dp.NormalizationStats | None,
                    strain_levels=None, extra: dict | None = None) -> None:
    """Directory with ``config.txt`` (key = value) and ``params.bin`` +
    ``params.jsonl`` (named float32 records in the dataset tensor format)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {f"model.{k}": v for k, v in model.cfg.to_dict().items()}
    cfg.update({f"schedule.{k}": v for k, v in sched.to_config().items()})
    if stats is not None:
        cfg.update({f"stats.{k}": v for k, v in stats.to_dict().items()})
    if strain_levels is not None:
        cfg["strain_levels"] = [float(v) for v in strain_levels]
    for k, v in (extra or {}).items():
        cfg[f"run.{k}"] = v
    dp.write_kv(out / "config.txt", cfg)
    state = model.state_dict()
    with open(out / "params.bin", "wb") as fh, open(out / "params.jsonl", "w") as idx:
        for name in sorted(state):
            entry = dp.append_record(fh, state[name].detach().cpu().numpy())
            entry["name"] = name
            idx.write(json.dumps(entry) + "\n")


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def load_checkpoint(path):
    """Returns ``(model, schedule, stats, strain_levels, config)``."""
    root = Path(path)
    cfg = dp.read_kv(root / "config.txt")
    mcfg = _section(cfg, "model")
    model = VideoUNet(DenoiserConfig.from_dict(mcfg))
    state = {}
    with open(root / "params.bin", "rb") as fh, open(root / "params.jsonl") as idx:
        for line in idx:
            entry = json.loads(line)
            state[entry["name"]] = torch.from_numpy(dp.read_record(fh, entry))
    model.load_state_dict(state)
    model.eval()
    sched = DiffusionSchedule.from_config(_section(cfg, "schedule"))
    s = _section(cfg, "stats")
    stats = None
    if s:
        as_list = lambda v: v if isinstance(v, list) else [v]
        stats = dp.NormalizationStats(tuple(as_list(s["field_min"])), tuple(as_list(s["field_max"])),
                                      float(s["curve_min"]), float(s["curve_max"]))
    levels = cfg.get("strain_levels")
    levels = np.atleast_1d(np.asarray(levels, dtype=float)) if levels is not None else None
    return model, sched, stats, levels, cfg
