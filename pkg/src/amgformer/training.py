"""Training loop: phantom batch -> augment -> modality dropout -> z-score
-> forward -> combined loss -> clipped Adam step.

Every random draw is derived from (run seed, stream tag, step), so a run
is reproducible bit-for-bit and any step's inputs can be rebuilt without
replaying the previous ones. Checkpoints are written every
`checkpoint_every` steps and at the end; a non-finite loss aborts the run
and leaves the last written checkpoint in place.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .errors import NumericError, ParameterError
from .losses import LossConfig, total_loss
from .network import AmgNet, NetConfig
from .optim import Adam, clip_global_norm
from .phantoms import (PhantomSpec, apply_mask, augment, enumerate_combinations,
                       generate, normalize_bundle)
from .tape import Tape, Tensor

# stream tags for per-step seed derivation
_DATA, _AUGMENT, _MASK = 0, 1, 2


def derive_seed(*key) -> int:
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


@dataclass
class TrainSettings:
    steps: int = 200
    batch: int = 2
    seed: int = 0
    lr: float = 2e-4
    clip_norm: float = 5.0
    checkpoint_every: int = 0   # 0 = final checkpoint only
    augment: bool = True
    out_dir: str = "runs/train"

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ParameterError(f"batch must be >= 1, got {self.batch}")


def mask_for_step(settings: TrainSettings, step: int) -> int:
    """Uniform draw over the 15 modality combinations, one per step."""
    rng = np.random.default_rng(derive_seed(settings.seed, _MASK, step))
    return int(rng.integers(15))


def make_batch(spec: PhantomSpec, settings: TrainSettings, step: int):
    """-> (normalized masked bundle, mask index into the 15 combinations)."""
    bundle = generate(spec, derive_seed(settings.seed, _DATA, step),
                      batch=settings.batch)
    if settings.augment:
        bundle = augment(bundle, derive_seed(settings.seed, _AUGMENT, step))
    mask_id = mask_for_step(settings, step)
    bundle = apply_mask(bundle, enumerate_combinations()[mask_id])
    return normalize_bundle(bundle), mask_id


def train_step(net: AmgNet, opt: Adam, spec: PhantomSpec, loss_cfg: LossConfig,
               settings: TrainSettings, step: int) -> dict:
    bundle, mask_id = make_batch(spec, settings, step)
    x = Tensor(bundle.stacked().astype(net.dtype, copy=False))
    net.zero_grad()
    with Tape() as tape:
        out = net(x, bundle.mask)
        loss, terms = total_loss(out, bundle.labels.astype(np.int64),
                                 bundle.mask, loss_cfg)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at step {step}")
        tape.backward(loss)
    terms["grad_norm"] = clip_global_norm(opt.params, settings.clip_norm)
    opt.step()
    terms["mask_id"] = mask_id
    return terms


_CSV_FIELDS = ("step", "total", "main", "ms", "aux", "boundary", "semantic",
               "grad_norm", "lr", "mask_id")


def train(net_cfg: NetConfig, spec: PhantomSpec, loss_cfg: LossConfig,
          settings: TrainSettings) -> dict:
    os.makedirs(settings.out_dir, exist_ok=True)
    net = AmgNet(net_cfg, seed=settings.seed)
    opt = Adam(net.parameters(), lr=settings.lr)
    log_path = os.path.join(settings.out_dir, "train_log.csv")
    final_path = os.path.join(settings.out_dir, "final.ckpt")

    with open(log_path, "w", newline="") as logf:
        writer = csv.DictWriter(logf, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for step in range(settings.steps):
            try:
                terms = train_step(net, opt, spec, loss_cfg, settings, step)
            except NumericError:
                logf.flush()
                raise
            row = {k: terms.get(k, "") for k in _CSV_FIELDS}
            row["step"] = step
            row["lr"] = settings.lr
            writer.writerow(row)
            if settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
                save_checkpoint(os.path.join(settings.out_dir, f"step_{step + 1:06d}.ckpt"),
                                net, settings.seed, {"step": step + 1})
                logf.flush()

    save_checkpoint(final_path, net, settings.seed, {"step": settings.steps})
    return {"checkpoint": final_path, "log": log_path, "steps": settings.steps}
