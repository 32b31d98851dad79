"""Adam optimization and the two-phase training loop.

Phase one trains the classifier head alone (softmax only) to initialize the
backbone; phase two fine-tunes with the weighted multi-loss objective on
shared PK batches. Every step logs the per-term loss breakdown to an
append-only CSV, and a checkpoint is written after every epoch. Runs are
fully deterministic for a given (config, seed): one generator drives
sampling and cropping in a fixed order, and the optional prefetch thread
only moves feature extraction off the critical path without reordering it.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .batching import Dataset, build_npair, mine_semi_hard, sample_pk
from .errors import ContractError, NumericError
from .features import crop_features, read_wav
from .losses import LossWeights, combined_loss
from .model import ModelConfig, forward, init_params, save_checkpoint
from .tensor import Tensor, backward, zero_grad

PHASE_PRETRAIN = "pretrain_softmax"
PHASE_MULTI = "multi_loss"

METRICS_HEADER = "step,epoch,phase,L_total,L_tri,L_npair,L_ang,L_soft"


@dataclass
class TrainConfig:
    p: int = 8
    k: int = 2
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pretrain_epochs: int = 3
    epochs: int = 30
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    steps_per_epoch: int | None = None
    spect_mode: str = "magnitude"
    feature_norm: str = "per-bin"
    prefetch: bool = False

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ContractError("need P >= 2 and K >= 2")
        if self.lr < 0 or self.eps <= 0:
            raise ContractError("need lr >= 0 and eps > 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ContractError("betas must lie in [0, 1)")
        if self.pretrain_epochs < 0 or self.epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be >= 1")


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        zero_grad(self.params)


def make_loader(spect_mode: str = "magnitude", feature_norm: str = "per-bin"):
    """Path -> (3, 300, 161) array, consuming the caller's rng for the crop."""

    def load(path, rng):
        return crop_features(read_wav(path), rng, spect_mode, feature_norm).data

    return load


@dataclass
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    final_losses: dict
    steps: int


def _phase_schedule(cfg: TrainConfig):
    pretrain = replace(cfg.weights, lambda_npair=0.0, lambda_tri=0.0, lambda_ang=0.0,
                       lambda_soft=1.0)
    schedule = []
    schedule += [(PHASE_PRETRAIN, pretrain)] * cfg.pretrain_epochs
    schedule += [(PHASE_MULTI, cfg.weights)] * cfg.epochs
    return schedule


def _batch_stream(dataset, cfg, loader, total_steps):
    rng = np.random.default_rng([cfg.seed, 1])
    for _ in range(total_steps):
        yield sample_pk(dataset, cfg.p, cfg.k, rng, loader)


def _prefetched(gen, depth: int = 2):
    """Run a generator in a worker thread with a bounded queue, order preserved."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in gen:
                q.put(item)
            q.put(done)
        except BaseException as exc:  # propagate into the consumer
            q.put(exc)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def train(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir) -> TrainResult:
    """Run both phases and leave checkpoints plus a metrics CSV in out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = len(dataset.speakers)
    eff_cfg = replace(model_cfg, num_classes=n_classes)
    params = init_params(eff_cfg, cfg.seed)
    adam = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    loader = make_loader(cfg.spect_mode, cfg.feature_norm)
    features_meta = {"spectrogram_mode": cfg.spect_mode, "normalization": cfg.feature_norm}

    steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(len(dataset) / (cfg.p * cfg.k)))
    schedule = _phase_schedule(cfg)
    total_steps = steps_per_epoch * len(schedule)
    batches = _batch_stream(dataset, cfg, loader, total_steps)
    if cfg.prefetch:
        batches = _prefetched(batches)

    metrics_path = out_dir / "metrics.csv"
    final_ckpt = out_dir / "checkpoint_final"
    # keep an initial state on disk so an abort always leaves a last-good checkpoint
    save_checkpoint(out_dir / "checkpoint_epoch_0000", eff_cfg, params,
                    features=features_meta)
    parts = {"tri": 0.0, "npair": 0.0, "ang": 0.0, "soft": 0.0}
    step = 0
    with metrics_path.open("w", encoding="utf-8") as log:
        log.write(METRICS_HEADER + "\n")
        for epoch, (phase, weights) in enumerate(schedule, start=1):
            need_mining = weights.lambda_tri > 0 or weights.lambda_ang > 0
            need_npair = weights.lambda_npair > 0
            for _ in range(steps_per_epoch):
                batch = next(batches)
                step += 1
                x = Tensor(batch.crops)
                raw, unit, logits = forward(x, eff_cfg, params,
                                            want_logits=weights.lambda_soft > 0)
                triplets = (mine_semi_hard(unit.data, batch.labels, weights.margin)
                            if need_mining else None)
                npairs = build_npair(unit.data, batch.labels) if need_npair else None
                total, parts = combined_loss(raw, unit, logits, batch.labels,
                                             triplets, npairs, weights)
                total_val = total.item()
                if not np.isfinite(total_val):
                    raise NumericError(
                        f"non-finite loss at step {step}; last epoch checkpoint kept in {out_dir}"
                    )
                adam.zero_grad()
                backward(total)
                adam.step()
                log.write(f"{step},{epoch},{phase},{total_val:.12g},{parts['tri']:.12g},"
                          f"{parts['npair']:.12g},{parts['ang']:.12g},{parts['soft']:.12g}\n")
            save_checkpoint(out_dir / f"checkpoint_epoch_{epoch:04d}", eff_cfg, params,
                            features=features_meta)
    save_checkpoint(final_ckpt, eff_cfg, params, features=features_meta)
    return TrainResult(final_ckpt, metrics_path, parts, step)
