"""Analytical activation-memory and time model for layers and whole models at each scale.

Memory is counted in bytes of stored activations for one forward/backward
step. A layer at scale ``k`` works on ``L = N / k`` positions, so attention
score memory scales as ``1/k**2`` and every other term as ``1/k``. Which
activations are counted is controlled by a :class:`Profile`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from mslm import tensor as tc
from mslm.masks import causal_mask
from mslm.nn import AttentionSpec, TransformerLayer
from mslm.tensor import Tensor

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from mslm.config import ModelConfig

log = logging.getLogger(__name__)

# Flop constants: 4*L^2*H for scores and weighted values; (8 + 4*d_ff/H)*L*H^2 for projections and FC
SCORE_FLOPS = 4.0
PROJ_FLOPS = 8.0
FF_FLOPS = 4.0


@dataclass(frozen=True)
class Profile:
    """Accounting coefficients: which activations are stored, and their element size."""

    c_ff: float = 2.0
    c_out: float = 2.0
    c_ln: float = 4.0
    bytes_per_element: int = 4
    adam_state: bool = False


DEFAULT_PROFILE = Profile()


@dataclass(frozen=True)
class CostParams:
    batch: int
    length: int
    d_model: int
    num_heads: int
    d_ff: int | None = None
    scale: int = 1
    profile: Profile = field(default=DEFAULT_PROFILE)

    def __post_init__(self) -> None:
        for name in ("batch", "length", "d_model", "num_heads", "scale"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_ff is not None and self.d_ff < 1:
            raise ValueError(f"d_ff must be positive, got {self.d_ff}")

    @property
    def ff_width(self) -> int:
        return 4 * self.d_model if self.d_ff is None else self.d_ff

    @property
    def effective_length(self) -> float:
        return self.length / self.scale

    def at_scale(self, k: int) -> CostParams:
        return replace(self, scale=k)


@dataclass(frozen=True)
class LayerCostBreakdown:
    qkv_proj: float
    qk_scores: float
    attn_weighted_values: float
    fc: float
    ln_drop_residual: float
    parameters: float = 0.0
    optimizer: float = 0.0

    @property
    def activations(self) -> float:
        return self.qkv_proj + self.qk_scores + self.attn_weighted_values + self.fc + self.ln_drop_residual

    @property
    def total(self) -> float:
        return self.activations + self.parameters + self.optimizer

    def components(self) -> dict[str, float]:
        return asdict(self)


def layer_memory(p: CostParams, head_groups: Sequence[tuple[int, int]] | None = None) -> LayerCostBreakdown:
    """Bytes of one transformer layer with queries at scale ``p.scale``.

    Activations scale with the layer's length; the weights (and Adam moments
    when the profile counts them) do not.

    ``head_groups`` lists ``(heads, key_scale)`` pairs for layers whose heads
    attend pooled keys; each group stores ``L x N/key_scale`` scores per head.
    """
    prof = p.profile
    b, h, nbytes = p.batch, p.d_model, prof.bytes_per_element
    weights = layer_parameter_count(h, p.ff_width) * nbytes
    length = p.effective_length
    if head_groups is None:
        scores = p.num_heads * length * length
    else:
        scores = sum(heads * length * (p.length / k) for heads, k in head_groups)
    return LayerCostBreakdown(
        qkv_proj=3 * b * length * h * nbytes,
        qk_scores=b * scores * nbytes,
        attn_weighted_values=2 * b * length * h * nbytes,
        fc=b * length * (p.ff_width * prof.c_ff + h * prof.c_out) * nbytes,
        ln_drop_residual=prof.c_ln * b * length * h * nbytes,
        parameters=weights,
        optimizer=2 * weights if prof.adam_state else 0.0,
    )


def layer_parameter_count(d_model: int, d_ff: int) -> int:
    """Weights and biases of one layer: attention, feedforward and two layer norms."""
    h, f = d_model, d_ff
    return 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h


def parameter_count(cfg: ModelConfig) -> int:
    """Number of trainable parameters :func:`mslm.architectures.build_model` creates for ``cfg``."""
    h, f, v = cfg.d_model, cfg.ff_width, cfg.vocab_size
    layer = layer_parameter_count(h, f)
    count = v * h + cfg.context_length * h + v + (0 if cfg.tie_embeddings else h * v)
    conv = cfg.downsampler == "causal_conv"

    def pooling(k: int) -> int:
        return k * h * h + h if conv and k > 1 else 0

    depth = sum(cfg.layers)
    if cfg.family == "topdown":
        count += sum(pooling(k) for k in cfg.scales)
        for coarse, fine in zip(cfg.scales, cfg.scales[1:]):
            r = coarse // fine
            count += (h * r * h + h) + (2 * h * h + h)
    elif cfg.family == "bottomup":
        depth += 1
        count += sum(pooling(coarse // fine) for coarse, fine in zip(cfg.scales, cfg.scales[1:]))
    elif cfg.family == "retina":
        count += sum(pooling(k) for k in cfg.scales[:-1])
    return count + depth * layer


@dataclass
class MemoryReport:
    """Modelled memory of a whole model, in bytes.

    Each layer carries its own weights and optimizer state, so removing a layer
    lowers :attr:`total` by exactly that layer's total. ``parameters`` and
    ``optimizer`` cover the embeddings, the LM head and the scale operators.
    """

    layers: list[tuple[int, LayerCostBreakdown]]
    embeddings: float
    output_grad: float
    representations: float
    parameters: float
    optimizer: float = 0.0

    @property
    def per_scale(self) -> dict[int, float]:
        totals: dict[int, float] = {}
        for k, layer in self.layers:
            totals[k] = totals.get(k, 0.0) + layer.total
        return totals

    @property
    def total(self) -> float:
        return (
            sum(layer.total for _k, layer in self.layers)
            + self.embeddings
            + self.output_grad
            + self.representations
            + self.parameters
            + self.optimizer
        )


def model_memory(cfg: ModelConfig, p: CostParams) -> MemoryReport:
    """Sum layer memory over every stack of ``cfg`` with sequence length ``p.length``."""
    prof = p.profile
    nbytes = prof.bytes_per_element
    b, n, h = p.batch, p.length, p.d_model
    layers: list[tuple[int, LayerCostBreakdown]] = []
    representations = 0.0

    def frames(k: int) -> float:
        return b * (n / k) * h * nbytes

    if cfg.family == "topdown":
        depth = dict(zip(cfg.scales, cfg.layers))
        for k in cfg.scales:
            layers += [(k, layer_memory(p.at_scale(k)))] * depth[k]
            # Pooled inputs, plus upsampled and fused vectors below the coarsest scale
            representations += frames(k) * (1 if k == cfg.coarsest else 3)
    elif cfg.family == "bottomup":
        depth = dict(zip(cfg.scales, cfg.layers))
        heads = cfg.heads_per_scale()
        for k in cfg.scales[:-1]:
            layers += [(k, layer_memory(p.at_scale(k)))] * depth[k]
            representations += frames(k)
        groups = [(heads[k], k) for k in reversed(cfg.scales)]
        layers.append((1, layer_memory(p.at_scale(1), groups)))
        layers += [(1, layer_memory(p.at_scale(1)))] * depth[1]
    elif cfg.family == "retina":
        heads = cfg.heads_per_scale()
        groups = [(heads[k], k) for k in reversed(cfg.scales)]
        layer = layer_memory(p.at_scale(1), groups)
        # Every layer pools its own input for the coarse heads
        pooled = sum(frames(k) for k in cfg.scales[:-1])
        layers += [(1, replace(layer, qkv_proj=layer.qkv_proj + pooled))] * cfg.layers[0]
    else:
        k = cfg.coarsest if cfg.family == "coarse" else 1
        layers += [(k, layer_memory(p.at_scale(k)))] * cfg.layers[0]
    params = (parameter_count(cfg) - len(layers) * layer_parameter_count(cfg.d_model, cfg.ff_width)) * nbytes
    return MemoryReport(
        layers=layers,
        embeddings=b * n * h * nbytes,
        output_grad=2 * b * n * cfg.vocab_size * nbytes,
        representations=representations,
        parameters=params,
        optimizer=2 * params if prof.adam_state else 0.0,
    )


MEMORY_FIELDS = ("k", "N", "component", "bytes")
MODEL_COMPONENTS = ("embeddings", "output_grad", "representations", "parameters", "optimizer")


def memory_rows(report: MemoryReport, length: int) -> list[dict[str, object]]:
    """Long-format rows keyed by :data:`MEMORY_FIELDS`.

    One ``layer`` row per layer, then per scale (coarsest first) each
    component summed over that scale's layers and a ``scale_subtotal``, then
    the model-level terms and the ``total``. Model-level rows leave ``k`` empty.
    """

    def row(k: object, component: str, value: float) -> dict[str, object]:
        return {"k": k, "N": length, "component": component, "bytes": value}

    rows = [row(k, "layer", layer.total) for k, layer in report.layers]
    for k, subtotal in sorted(report.per_scale.items(), reverse=True):
        parts: dict[str, float] = {}
        for scale, layer in report.layers:
            if scale == k:
                for name, value in layer.components().items():
                    parts[name] = parts.get(name, 0.0) + value
        rows += [row(k, name, value) for name, value in parts.items()]
        rows.append(row(k, "scale_subtotal", subtotal))
    rows += [row("", name, getattr(report, name)) for name in MODEL_COMPONENTS]
    rows.append(row("", "total", report.total))
    return rows


@dataclass(frozen=True)
class TimeEstimate:
    quadratic: float
    linear: float

    @property
    def flops(self) -> float:
        return self.quadratic + self.linear


def attention_time(p: CostParams) -> TimeEstimate:
    """Flops of one layer: ``a*B*L^2*H`` for attention plus ``b*B*L*H^2`` for projections and FC."""
    length = p.effective_length
    b_coef = PROJ_FLOPS + FF_FLOPS * p.ff_width / p.d_model
    return TimeEstimate(
        quadratic=SCORE_FLOPS * p.batch * length * length * p.d_model,
        linear=b_coef * p.batch * length * p.d_model**2,
    )


def crossover_length(p: CostParams) -> float:
    """Sequence length (at the layer's scale) where the quadratic term overtakes the linear one."""
    return (PROJ_FLOPS + FF_FLOPS * p.ff_width / p.d_model) * p.d_model / SCORE_FLOPS


def measure_layer_ms(p: CostParams, repeats: int = 3, seed: int = 0) -> float:
    """Median wall-clock milliseconds of one eval-mode layer forward at scale ``p.scale``."""
    rng = np.random.default_rng(seed)
    layer = TransformerLayer(p.d_model, p.num_heads, p.ff_width, 0.0, rng)
    length = max(1, int(p.effective_length))
    x = Tensor(rng.normal(size=(p.batch, length, p.d_model)))
    spec = AttentionSpec.single(p.num_heads, causal_mask(length))
    timings = []
    with tc.no_grad():
        for _ in range(repeats):
            start = time.perf_counter()
            layer(x, spec)
            timings.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(timings))


def time_curve(
    p: CostParams,
    lengths: Iterable[int],
    scales: Iterable[int] = (1,),
    measure: bool = False,
) -> list[dict[str, object]]:
    """Rows ``{k, N, flops, measured_ms}`` over a grid of sequence lengths and scales."""
    rows: list[dict[str, object]] = []
    lengths = list(lengths)
    for k in scales:
        for n in lengths:
            params = replace(p, length=n, scale=k)
            row: dict[str, object] = {"k": k, "N": n, "flops": attention_time(params).flops, "measured_ms": ""}
            if measure:
                row["measured_ms"] = measure_layer_ms(params)
                log.debug("measured k=%d N=%d: %.3f ms", k, n, row["measured_ms"])
            rows.append(row)
    return rows


def calibrate_profile(
    samples: Sequence[tuple[CostParams, float]], base: Profile = DEFAULT_PROFILE
) -> tuple[Profile, float]:
    """Fit ``c_ff`` and ``c_ln`` to measured single-layer bytes by least squares.

    ``c_out`` is held at ``base.c_out``. The two fitted columns are separable
    only when the samples vary ``d_ff / d_model``.

    Returns:
        The fitted profile and the root-mean-square residual in bytes.
    """
    if not samples:
        raise ValueError("calibration needs at least one measurement")
    rows, targets = [], []
    for p, measured in samples:
        fixed = layer_memory(replace(p, profile=replace(base, c_ff=0.0, c_ln=0.0)))
        length, nbytes = p.effective_length, base.bytes_per_element
        rows.append(
            [p.batch * length * p.ff_width * nbytes, p.batch * length * p.d_model * nbytes]
        )
        targets.append(measured - fixed.total)
    design, target = np.asarray(rows, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    (c_ff, c_ln), *_ = np.linalg.lstsq(design, target, rcond=None)
    residual = target - design @ np.array([c_ff, c_ln])
    rms = float(np.sqrt(np.mean(residual**2)))
    log.info("calibrated c_ff=%.3f c_ln=%.3f (rms residual %.1f bytes)", c_ff, c_ln, rms)
    return replace(base, c_ff=float(c_ff), c_ln=float(c_ln)), rms
