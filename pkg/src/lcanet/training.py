"""Training loop, checkpointing and the ablation variants."""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as config_mod
from . import serialize
from .config import RunConfig
from .data import batches, load_dataset, read_stats
from .evaluation import MetricReport, evaluate_dataset
from .network import LCANet
from .objectives import poly_lr, sgd_update, total_loss
from .tensor import Tensor

CSV_HEADER = ["iter", "lr", "l_cs", "l_rf", "l_cs_bd", "l_rf_bd", "total"]
CHECKPOINT = "model.lcam"
RUN_CONFIG = "run.cfg"
LOG = "train_log.csv"


class NumericFailure(RuntimeError):
    """A loss or gradient became non-finite; the last checkpoint is left untouched."""


@dataclass
class TrainResult:
    model: LCANet
    cfg: RunConfig
    rows: list[list[float]] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0

    @property
    def final_total(self) -> float:
        return self.rows[-1][-1]


def _format_row(row) -> list[str]:
    return [str(row[0])] + [f"{v:.9g}" for v in row[1:]]


def build_model(cfg: RunConfig) -> LCANet:
    model = LCANet(cfg.model)
    model.reset_parameters(cfg.seed)
    return model


def resolve_mean(cfg: RunConfig) -> None:
    if cfg.augment.mean is None:
        cfg.augment.mean = read_stats(cfg.data_dir)


def train(cfg: RunConfig, samples=None, log: Callable[[str], None] | None = None,
          log_every: int = 50) -> TrainResult:
    """Run ``cfg.optim.max_iter`` SGD steps and write the run directory.

    The run directory gets ``run.cfg`` (with the resolved mean), the CSV log
    and the checkpoint, refreshed every ``checkpoint_every`` steps and at the
    end. ``samples`` overrides loading ``cfg.data_dir``.
    """
    cfg = copy.deepcopy(cfg)
    cfg.validate()
    if samples is None:
        samples = load_dataset(cfg.data_dir)
    resolve_mean(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(out / RUN_CONFIG, cfg)

    model = build_model(cfg)
    params = model.parameters()
    opt = cfg.optim
    stream = batches(samples, opt.batch_size, np.random.default_rng([cfg.seed, 1]), cfg.augment)
    result = TrainResult(model, cfg)
    ckpt = out / CHECKPOINT
    start = time.perf_counter()
    with open(out / LOG, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for it in range(opt.max_iter):
            lr = poly_lr(it, opt)
            images, masks = next(stream)
            breakdown = total_loss(model(Tensor(images)), masks, cfg.loss)
            if not all(math.isfinite(v) for v in breakdown.as_row()):
                raise NumericFailure(f"non-finite loss at iteration {it}: {breakdown}")
            breakdown.loss.backward()
            for p in params:
                if p.grad is None:  # not reached by any active loss term
                    p.grad = np.zeros_like(p.data)
                elif not np.isfinite(p.grad).all():
                    raise NumericFailure(f"non-finite gradient for {p.name} at iteration {it}")
            sgd_update(params, lr, opt.momentum, opt.weight_decay)
            row = [it, lr, *breakdown.as_row()]
            result.rows.append(row)
            writer.writerow(_format_row(row))
            fh.flush()
            done = it + 1
            if done % opt.checkpoint_every == 0 or done == opt.max_iter:
                serialize.save_checkpoint(ckpt, model.state_dict())
                result.checkpoint = ckpt
            if log is not None and (it % log_every == 0 or done == opt.max_iter):
                log(f"iter {it:5d} lr {lr:.3g} total {breakdown.total:.4f}")
    result.seconds = time.perf_counter() - start
    return result


def load_model(checkpoint, cfg: RunConfig) -> LCANet:
    model = LCANet(cfg.model)
    model.assign_names()
    model.load_state_dict(serialize.load_checkpoint(checkpoint))
    return model


# --- ablation ----------------------------------------------------------------------

def _set(cfg: RunConfig, *, grb: bool, decoder: bool, attention: str = "none", bl: bool = False,
         scales=None, lcc=None) -> None:
    m = cfg.model
    m.use_grb = grb
    m.heads = "coarse_and_refine" if decoder else "coarse_only"
    m.attention_kind = attention
    if scales is not None:
        m.lcb.scales = tuple(scales)
    if lcc is not None:
        m.lcb.use_lcc = lcc
    if not bl:
        cfg.loss.lambda2 = cfg.loss.lambda3 = 0.0


# name -> (description, config edit). The first five follow the cumulative
# rows of the architecture ablation; the rest add one attention block to
# "baseline" (GRB + SRB + boundary loss).
VARIANTS: dict[str, tuple[str, Callable[[RunConfig], None]]] = {
    "coarse": ("encoder + coarse head", lambda c: _set(c, grb=False, decoder=False)),
    "grb": ("+GRB", lambda c: _set(c, grb=True, decoder=False)),
    "srb": ("+GRB +SRB", lambda c: _set(c, grb=True, decoder=True)),
    "acf": ("+GRB +SRB +ACF(0.5)", lambda c: _set(c, grb=True, decoder=True, attention="acf",
                                                  scales=(0.5,), lcc=False)),
    "bl": ("+GRB +SRB +ACF(0.5) +BL", lambda c: _set(c, grb=True, decoder=True, attention="acf",
                                                     bl=True, scales=(0.5,), lcc=False)),
    "baseline": ("GRB +SRB +BL", lambda c: _set(c, grb=True, decoder=True, bl=True)),
    "se": ("baseline + squeeze-excitation", lambda c: _set(c, grb=True, decoder=True,
                                                           attention="se", bl=True)),
    "nonlocal": ("baseline + non-local", lambda c: _set(c, grb=True, decoder=True,
                                                        attention="nonlocal", bl=True)),
    "local_affinity": ("baseline + local affinity", lambda c: _set(c, grb=True, decoder=True,
                                                                   attention="local_affinity", bl=True)),
    "lcb": ("baseline + multi-scale ACF + LCC", lambda c: _set(c, grb=True, decoder=True, attention="acf",
                                                               bl=True, lcc=True)),
}


def variant_config(base: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    cfg = copy.deepcopy(base)
    VARIANTS[name][1](cfg)
    cfg.out_dir = str(Path(base.out_dir) / name)
    cfg.validate()
    return cfg


@dataclass
class AblationRow:
    variant: str
    max_f: float
    mae: float
    final_loss: float
    seconds: float


def ablate(base: RunConfig, names: list[str], log: Callable[[str], None] | None = None,
           train_samples=None, val_samples=None) -> list[AblationRow]:
    """Train every variant from the same seed and evaluate on the validation split.

    Without ``base.val_dir`` the training split is evaluated.
    """
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise KeyError(f"unknown variant(s) {unknown}; valid: {', '.join(VARIANTS)}")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate variants in {names}")
    if train_samples is None:
        train_samples = load_dataset(base.data_dir)
    if val_samples is None:
        val_samples = load_dataset(base.val_dir) if base.val_dir else train_samples
    rows = []
    for name in names:
        cfg = variant_config(base, name)
        result = train(cfg, train_samples, log=None)
        report: MetricReport = evaluate_dataset(result.model, val_samples, result.cfg.augment.mean,
                                                result.cfg.optim.batch_size)
        rows.append(AblationRow(name, report.max_f, report.mae, result.final_total, result.seconds))
        if log is not None:
            log(f"{name:15s} maxF {report.max_f:.4f} MAE {report.mae:.4f} ({result.seconds:.0f}s)")
    return rows


def format_table(rows: list[AblationRow]) -> str:
    lines = ["variant,max_f,mae"]
    lines += [f"{r.variant},{r.max_f:.4f},{r.mae:.4f}" for r in rows]
    return "\n".join(lines) + "\n"
