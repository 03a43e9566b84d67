"""Optimization loop: Adam with warmup + cosine schedule, losses, checkpoints and metrics."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from mslm import tensor as tc
from mslm.analysis import perplexity
from mslm.architectures import CoarseLM, LanguageModel, build_model
from mslm.checkpoint import model_checkpoint, read_checkpoint, write_checkpoint
from mslm.data import BatchSampler
from mslm.errors import ConfigError, NonFiniteError
from mslm.nn import Context
from mslm.tensor import Tensor, runtime

if TYPE_CHECKING:
    from collections.abc import Mapping

    from mslm.config import RunConfig
    from mslm.data import Vocab

log = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "lr", "train_nll", "valid_ppl")


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} and {self.total_steps}"
            )


def lr_at(step: int, s: Schedule) -> float:
    """Linear warmup from 0 to ``peak_lr``, cosine decay to 0 at ``total_steps``, then 0."""
    if step <= s.warmup_steps:
        return s.peak_lr * max(step, 0) / s.warmup_steps
    if step > s.total_steps:
        return 0.0
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """Adam moments keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor], **hyper: Any) -> OptimState:
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            **hyper,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Moments under checkpoint names ``adam.m.<param>`` and ``adam.v.<param>``."""
        out = {f"adam.m.{name}": a for name, a in self.m.items()}
        out.update({f"adam.v.{name}": a for name, a in self.v.items()})
        return out


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState, lr: float
) -> None:
    """One bias-corrected Adam update, in place.

    Raises:
        NonFiniteError: If any gradient holds NaN or infinity; nothing is updated
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(name, where="gradient")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to a global norm of at most ``max_norm``; returns the norm before clipping."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def bow_distribution(tokens: np.ndarray, k: int, vocab_size: int) -> np.ndarray:
    """Per frame of ``k`` tokens, the word distribution with duplicates weighted by multiplicity."""
    tokens = np.asarray(tokens)
    b, n = tokens.shape
    frames = n // k
    dist = np.zeros((b, frames, vocab_size))
    chunks = tokens[:, : frames * k].reshape(b, frames, k)
    rows = np.repeat(np.arange(b), frames * k)
    cols = np.tile(np.repeat(np.arange(frames), k), b)
    np.add.at(dist, (rows, cols, chunks.reshape(-1)), 1.0 / k)
    return dist


def coarse_bow_loss(frame_logits: Tensor, tokens: np.ndarray, k: int) -> Tensor:
    """Cross-entropy of frame ``j``'s prediction against the words of frame ``j + 1``."""
    frames = frame_logits.shape[1]
    if frames < 2:
        raise ValueError(f"need at least two frames of {k} tokens, got {frames}")
    target = bow_distribution(np.asarray(tokens)[:, : frames * k], k, frame_logits.shape[-1])
    return tc.cross_entropy_dist(frame_logits[:, :-1], target[:, 1:])


def model_loss(model: LanguageModel, batch: np.ndarray, ctx: Context) -> Tensor:
    """Training objective: next-token cross-entropy, or the bag-of-words loss for coarse-only models."""
    if isinstance(model, CoarseLM):
        return coarse_bow_loss(model(batch, ctx), batch, model.config.coarsest)
    return tc.cross_entropy(model(batch, ctx), batch[:, model.first_target(batch.shape[1]) :])


def validation_ppl(model: LanguageModel, stream: np.ndarray, context: int, stride: int) -> float:
    """Held-out perplexity; for a coarse-only model, exp of the mean bag-of-words loss over chunks."""
    if isinstance(model, CoarseLM):
        n = model.chunk_length
        chunks = [stream[i : i + n] for i in range(0, len(stream) - n + 1, n)]
        with tc.no_grad():
            losses = [model_loss(model, chunk[None, :], Context()).item() for chunk in chunks]
        return math.exp(float(np.mean(losses))) if losses else float("nan")
    return perplexity(model, stream, context, stride).token_ppl


@dataclass
class Trainer:
    """Owns the model, optimizer state and both generators of a training run."""

    config: RunConfig
    train_stream: np.ndarray
    valid_stream: np.ndarray | None = None
    out_dir: Path | None = None
    vocab: Vocab | None = None
    model: LanguageModel = field(init=False)

    def __post_init__(self) -> None:
        cfg = self.config
        self.dtype = cfg.train.dtype
        with runtime(dtype=self.dtype):
            self.model = build_model(cfg.model, cfg.seed)
        self.schedule = Schedule(cfg.train.peak_lr, cfg.train.warmup, cfg.train.steps)
        self.params = dict(self.model.named_parameters())
        self.state = OptimState.zeros(
            self.params, beta1=cfg.train.beta1, beta2=cfg.train.beta2, eps=cfg.train.eps
        )
        self.sampler = BatchSampler(self.train_stream, self.model.chunk_length, cfg.train.batch_size, cfg.seed)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "metrics.csv"

    def step(self) -> tuple[float, float]:
        """One optimizer step over ``accumulate_steps`` batches; returns (mean loss, learning rate)."""
        cfg = self.config.train
        ctx = Context(training=True, rng=self.dropout_rng)
        self.model.zero_grad()
        total = 0.0
        with runtime(dtype=self.dtype):
            for _ in range(cfg.accumulate_steps):
                loss = model_loss(self.model, next(self.sampler), ctx)
                total += loss.item()
                tc.backward(tc.scale(loss, 1.0 / cfg.accumulate_steps))
            grads = {name: p.grad for name, p in self.params.items()}
            if cfg.clip_norm is not None:
                norm = clip_gradients(grads, cfg.clip_norm)
                log.debug("gradient norm %.4f", norm)
            lr = lr_at(self.state.step + 1, self.schedule)
            adam_step(self.params, grads, self.state, lr)
        return total / cfg.accumulate_steps, lr

    def validate(self) -> float:
        if self.valid_stream is None:
            raise ConfigError("data.valid", "no validation stream")
        context, stride = self.config.eval_window()
        with runtime(dtype=self.dtype):
            return validation_ppl(self.model, self.valid_stream, context, stride)

    def run(self, steps: int | None = None) -> list[dict[str, Any]]:
        """Train until the optimizer has taken ``steps`` (default: the configured total) steps."""
        cfg = self.config.train
        target = cfg.steps if steps is None else steps
        rows: list[dict[str, Any]] = []
        while self.state.step < target:
            try:
                loss, lr = self.step()
            except NonFiniteError:
                log.exception("training diverged at step %d", self.state.step + 1)
                raise
            step = self.state.step
            row: dict[str, Any] = {"step": step, "lr": lr, "train_nll": loss, "valid_ppl": ""}
            if self.valid_stream is not None and step % cfg.valid_every == 0:
                row["valid_ppl"] = self.validate()
                log.info("step %d valid ppl %.3f", step, row["valid_ppl"])
            if step % cfg.log_every == 0:
                log.info("step %d lr %.3g train nll %.4f", step, lr, loss)
            rows.append(row)
            self._append_metrics(row)
            if self.out_dir is not None and step % cfg.checkpoint_every == 0:
                self.save(self.out_dir / "checkpoints" / f"step_{step:07d}.mslm")
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoints" / "last.mslm")
        return rows

    def _append_metrics(self, row: Mapping[str, Any]) -> None:
        path = self.metrics_path
        if path is None:
            return
        fresh = not path.exists()
        with path.open("a", newline="", encoding="utf-8") as out:
            writer = csv.DictWriter(out, fieldnames=METRICS_FIELDS)
            if fresh:
                writer.writeheader()
            writer.writerow(row)

    def save(self, path: str | os.PathLike[str]) -> Path:
        state: dict[str, Any] = {
            "step": self.state.step,
            "seed": self.config.seed,
            "sampler": self.sampler.state(),
            "dropout": self.dropout_rng.bit_generator.state,
        }
        if self.vocab is not None:
            state["vocab"] = self.vocab.tokens
        return write_checkpoint(path, model_checkpoint(self.model, state, self.state.arrays()))

    def restore(self, path: str | os.PathLike[str]) -> None:
        """Continue from a checkpoint written by :meth:`save` for the same model config."""
        checkpoint = read_checkpoint(path)
        if checkpoint.config != self.config.model:
            raise ConfigError("model", f"checkpoint {path} was written for a different model config")
        with runtime(dtype=self.dtype):
            self.model.load_state_dict(checkpoint.prefixed("param."))
        self.state.m = {name: a.astype(self.params[name].data.dtype) for name, a in checkpoint.prefixed("adam.m.").items()}
        self.state.v = {name: a.astype(self.params[name].data.dtype) for name, a in checkpoint.prefixed("adam.v.").items()}
        if set(self.state.m) != set(self.params) or set(self.state.v) != set(self.params):
            raise ConfigError("model", f"checkpoint {path} holds no optimizer state for this model")
        self.state.step = int(checkpoint.state["step"])
        self.sampler.restore(checkpoint.state["sampler"])
        self.dropout_rng.bit_generator.state = checkpoint.state["dropout"]
        log.info("resumed from %s at step %d", path, self.state.step)


def train(
    config: RunConfig,
    train_stream: np.ndarray,
    valid_stream: np.ndarray | None = None,
    out_dir: str | os.PathLike[str] | None = None,
    vocab: Vocab | None = None,
    resume: str | os.PathLike[str] | None = None,
) -> Trainer:
    """Run (or continue) a full training run and return the finished trainer."""
    trainer = Trainer(config, train_stream, valid_stream, Path(out_dir) if out_dir else None, vocab)
    if resume is not None:
        trainer.restore(resume)
    trainer.run()
    return trainer
