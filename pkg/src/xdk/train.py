"""Training loops: pretraining, fine-tuning, adapter training, and sweeps.

One job owns one model and is single-threaded; a sweep fans grid cells
out to worker processes. Frozen groups are enforced twice over: masked
tensors never receive gradients, and the optimizer only ever sees the
trainable list.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, TrainableMask, apply_mask, inject, mask_for_mode
from .autodiff import Tensor, backward, scale, zero_grads
from .checkpoint import dumps_checkpoint, loads_checkpoint
from .data import Utterance, filter_split, spec_augment, stack_frames
from .decoding import evaluate_utterances
from .errors import ContractError, DivergedRunError, DomainError
from .model import TransducerModel


def deterministic_mode() -> bool:
    """XDK_DETERMINISTIC=1 forces single-threaded runs and timing-free records."""
    return os.environ.get("XDK_DETERMINISTIC", "") == "1"


@dataclass
class AugmentConfig:
    num_time_masks: int = 1
    time_mask_width: int = 2
    num_freq_masks: int = 1
    freq_mask_width: int = 8


@dataclass
class TrainConfig:
    mask: TrainableMask
    learning_rate: float = 1e-3
    max_steps: int = 1000
    batch_size: int = 8
    eval_every: int = 200
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 5.0
    stack: int = 4
    stride: int = 3
    max_symbols_per_frame: int = 8
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 1 <= self.eval_every <= self.max_steps:
            raise ContractError("need 1 <= eval_every <= max_steps")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunRecord:
    history: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_dev_wer: float = float("inf")
    steps: int = 0
    steps_per_second: float = 0.0
    clip_events: int = 0
    checkpoint_paths: list[str] = field(default_factory=list)
    best_checkpoint: str | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "history": [[s, w] for s, w in self.history],
            "best_step": self.best_step,
            "best_dev_wer": self.best_dev_wer,
            "steps": self.steps,
            "steps_per_second": self.steps_per_second if include_timing else None,
            "clip_events": self.clip_events,
            "checkpoint_paths": self.checkpoint_paths,
            "best_checkpoint": self.best_checkpoint,
        }


class Sgd:
    def __init__(self, params: list[Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    """Plain Adam, constant learning rate, beta1=0.9 beta2=0.999 eps=1e-8."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params, self.lr = params, lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _make_optimizer(name: str, params: list[Tensor], lr: float):
    return Adam(params, lr) if name == "adam" else Sgd(params, lr)


def clip_global_norm(params: list[Tensor], clip: float) -> bool:
    sq = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
    norm = np.sqrt(sq)
    if clip > 0 and norm > clip:
        factor = clip / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
        return True
    return False


def _restore_from(model: TransducerModel, blob: bytes) -> None:
    loaded = loads_checkpoint(blob, dtype=model.config.dtype)
    for name, tensor in loaded.named_parameters():
        model.store.by_name[name].data = tensor.data


def train(model: TransducerModel, corpus: list[Utterance], cfg: TrainConfig,
          out_dir: str | Path | None = None) -> RunRecord:
    """Run the training recipe; leaves ``model`` at its best dev checkpoint.

    Every ``eval_every`` steps the dev split is decoded; a new best dev
    WER snapshots the model (and persists a checkpoint when ``out_dir``
    is given). A non-finite loss aborts with DivergedRunError naming the
    step.
    """
    train_utts = filter_split(corpus, "train")
    dev_utts = filter_split(corpus, "dev")
    if not train_utts or not dev_utts:
        raise ContractError("corpus needs non-empty train and dev splits")
    trainable = apply_mask(model, cfg.mask)
    optimizer = _make_optimizer(cfg.optimizer, trainable, cfg.learning_rate)
    rng = np.random.default_rng([0x7EA1, cfg.seed])
    record = RunRecord()
    log_lines: list[str] = []
    best_blob: bytes | None = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    pool: list[int] = []
    step_time = 0.0
    np_dtype = model.config.np_dtype
    for step in range(1, cfg.max_steps + 1):
        t0 = time.perf_counter()
        if len(pool) < cfg.batch_size:
            pool += list(rng.permutation(len(train_utts)))
        batch = [train_utts[pool.pop()] for _ in range(cfg.batch_size)]
        total = None
        for i, utt in enumerate(batch):
            feats = utt.features
            if cfg.augment is not None:
                a = cfg.augment
                feats = spec_augment(feats, a.num_time_masks, a.time_mask_width,
                                     a.num_freq_masks, a.freq_mask_width,
                                     seed=int(rng.integers(1 << 31)))
            x = Tensor(stack_frames(feats, cfg.stack, cfg.stride), dtype=np_dtype)
            loss_i = model.loss(x, utt.labels)
            total = loss_i if total is None else total + loss_i
        loss = scale(total, 1.0 / cfg.batch_size)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            if out_dir is not None:
                (out_dir / "steps.log").write_text("\n".join(log_lines) + "\n")
            raise DivergedRunError(f"loss diverged at step {step}: {loss_value}")
        backward(loss)
        if clip_global_norm(trainable, cfg.clip_norm):
            record.clip_events += 1
        optimizer.step()
        zero_grads(trainable)
        step_time += time.perf_counter() - t0
        log_lines.append(f"step={step} loss={loss_value:.6f}")

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            if not record.history or record.history[-1][0] != step:
                dev_wer = evaluate_utterances(
                    model, dev_utts, cfg.max_symbols_per_frame,
                    cfg.stack, cfg.stride).wer
                record.history.append((step, dev_wer))
                marker = ""
                if dev_wer < record.best_dev_wer:
                    record.best_dev_wer = dev_wer
                    record.best_step = step
                    best_blob = dumps_checkpoint(model)
                    marker = " best"
                    if ckpt_dir is not None:
                        path = ckpt_dir / f"step_{step:06d}.ckpt"
                        path.write_bytes(best_blob)
                        record.checkpoint_paths.append(str(path))
                        record.best_checkpoint = str(path)
                log_lines.append(f"step={step} dev_wer={dev_wer:.4f}{marker}")

    record.steps = cfg.max_steps
    record.steps_per_second = cfg.max_steps / step_time if step_time > 0 else 0.0
    if best_blob is not None:
        _restore_from(model, best_blob)
    if out_dir is not None:
        (out_dir / "steps.log").write_text("\n".join(log_lines) + "\n")
        if record.best_checkpoint is not None:
            (out_dir / "best_checkpoint.txt").write_text(record.best_checkpoint + "\n")
        (out_dir / "record.json").write_text(
            json.dumps(record.to_dict(include_timing=not deterministic_mode()),
                       indent=2, sort_keys=True) + "\n")
    return record


def measure_throughput(record: RunRecord) -> float:
    """Mean training steps per second, evaluation pauses excluded."""
    if record.steps < 100:
        raise DomainError(f"throughput needs >= 100 steps, run had {record.steps}")
    return record.steps_per_second


# ---------------------------------------------------------------------------
# hyper-parameter sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepCell:
    learning_rate: float
    d_b: int | None
    record: RunRecord | None = None
    error: str | None = None

    @property
    def best_dev_wer(self) -> float:
        return self.record.best_dev_wer if self.record is not None else float("inf")

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "d_b": self.d_b,
            "error": self.error,
            "record": None if self.record is None else self.record.to_dict(include_timing),
        }


def _run_cell(args) -> SweepCell:
    base_blob, corpus, mode, lr, d_b, cfg, adapter_layers, adapter_seed, out_root = args
    model = loads_checkpoint(base_blob)
    if mode == "adapters":
        inject(model, AdapterConfig(d_b=d_b, layers=adapter_layers), seed=adapter_seed)
    cell_cfg = replace(cfg, mask=mask_for_mode(model, mode), learning_rate=lr)
    out_dir = None
    if out_root is not None:
        tag = f"lr{lr:g}" + (f"_db{d_b}" if d_b is not None else "")
        out_dir = Path(out_root) / tag
    try:
        record = train(model, corpus, cell_cfg, out_dir)
        return SweepCell(learning_rate=lr, d_b=d_b, record=record)
    except DivergedRunError as exc:
        return SweepCell(learning_rate=lr, d_b=d_b, error=str(exc))


def sweep(grid: dict, corpus: list[Utterance], base_checkpoint: bytes, mode: str,
          base_cfg: TrainConfig, jobs: int = 1, out_root: str | Path | None = None,
          adapter_layers: tuple[int, ...] | None = None,
          adapter_seed: int = 0) -> list[SweepCell]:
    """One training run per (learning rate, d_b) cell, sorted by best dev WER.

    Diverged cells are kept in the table with their error; the sweep
    continues. ``jobs`` > 1 fans cells out to processes unless
    deterministic mode forces a single worker.
    """
    lrs = list(grid.get("learning_rates", []))
    d_bs = list(grid.get("d_b", [])) if mode == "adapters" else [None]
    if not lrs or not d_bs:
        raise ContractError("sweep grid is empty")
    cells = [(base_checkpoint, corpus, mode, lr, d_b, base_cfg, adapter_layers,
              adapter_seed, out_root) for lr, d_b in product(lrs, d_bs)]
    if deterministic_mode():
        jobs = 1
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    return sorted(results, key=lambda c: (c.best_dev_wer, c.learning_rate, c.d_b or 0))
