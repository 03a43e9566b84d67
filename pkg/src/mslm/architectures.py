"""Model families: Vanilla, Top-down, Bottom-up, Retina and the coarse-only LM.

Every model maps a batch of token ids of shape (B, n) to next-token logits.
Vanilla, Bottom-up and Retina read ``tokens[:, :-1]`` and predict
``tokens[:, 1:]``; Top-down reads all ``n`` tokens and predicts
``tokens[:, k_m:]``. The coarse-only model predicts, for each frame, the
words of the following frame.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, ClassVar

import numpy as np

from mslm import tensor as tc
from mslm.data import BOS
from mslm.errors import DivisibilityError, ScaleError, ShapeError
from mslm.masks import causal_mask, cross_scale_mask, local_mask, retina_masks
from mslm.nn import EVAL, AttentionSpec, Context, Embeddings, HeadGroup, LMHead, Module, TransformerLayer
from mslm.scale_ops import Downsampler, Fusion, Upsampler, downsample, fuse, upsample

if TYPE_CHECKING:
    from mslm.config import ModelConfig
    from mslm.tensor import Tensor

log = logging.getLogger(__name__)


def as_batch(tokens: np.ndarray) -> np.ndarray:
    """View a 1-D token sequence as a batch of one."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeError("tokens", [tokens.shape], "expected integer ids of shape (batch, length)")
    return tokens


class LanguageModel(Module):
    """Shared embeddings and LM head; subclasses build the layer stacks."""

    family: ClassVar[str]

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.embeddings = Embeddings(config.vocab_size, config.context_length, config.d_model, rng)
        self.head = LMHead(
            config.d_model,
            config.vocab_size,
            rng,
            tied=self.embeddings if config.tie_embeddings else None,
        )

    def _layer(self, rng: np.random.Generator) -> TransformerLayer:
        c = self.config
        return TransformerLayer(c.d_model, c.num_heads, c.ff_width, c.dropout, rng)

    def _stack(self, depth: int, rng: np.random.Generator) -> list[TransformerLayer]:
        return [self._layer(rng) for _ in range(depth)]

    @property
    def scales(self) -> tuple[int, ...]:
        return self.config.scales

    @property
    def chunk_length(self) -> int:
        """Tokens per training chunk: the inputs plus the final target."""
        return self.config.context_length + 1

    def first_target(self, n: int) -> int:
        """Index of the first token predicted from an input of ``n`` tokens."""
        return 1

    def min_length(self) -> int:
        """Shortest input the model accepts in eval mode."""
        return 2

    def hidden(self, tokens: np.ndarray, ctx: Context = EVAL) -> dict[int, Tensor]:
        """Output representations keyed by scale; scale 1 feeds the LM head."""
        raise NotImplementedError

    def forward(self, tokens: np.ndarray, ctx: Context = EVAL) -> Tensor:
        return self.head(self.hidden(as_batch(tokens), ctx)[1])

    def __call__(self, tokens: np.ndarray, ctx: Context = EVAL) -> Tensor:
        return self.forward(tokens, ctx)


class VanillaLM(LanguageModel):
    """Single-scale decoder, optionally restricted to a local attention window."""

    family = "vanilla"

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        self.layers = self._stack(config.layers[0], rng)

    def hidden(self, tokens: np.ndarray, ctx: Context = EVAL) -> dict[int, Tensor]:
        x = self.embeddings(tokens[:, :-1])
        n = x.shape[1]
        window = self.config.attention_window
        mask = causal_mask(n) if window is None else local_mask(n, window)
        spec = AttentionSpec.single(self.config.num_heads, mask)
        for layer in self.layers:
            x = layer(x, spec, ctx=ctx)
        return {1: x}


class TopDownLM(LanguageModel):
    """Coarse-to-fine stacks: each finer scale fuses its pooled inputs with the upsampled coarser output."""

    family = "topdown"

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        d = config.d_model
        self.downsamplers = [Downsampler(config.downsampler, k, d, rng) for k in config.scales]
        self.upsamplers = [
            Upsampler(coarse // fine, d, rng, activation=config.upsample_activation)
            for coarse, fine in zip(config.scales, config.scales[1:])
        ]
        self.fusions = [Fusion(d, rng) for _ in config.scales[1:]]
        self.stacks = [self._stack(depth, rng) for depth in config.layers]

    @property
    def chunk_length(self) -> int:
        return self.config.context_length

    def first_target(self, n: int) -> int:
        k_m = self.config.coarsest
        return n % k_m + k_m

    def min_length(self) -> int:
        return 2 * self.config.coarsest

    def hidden(self, tokens: np.ndarray, ctx: Context = EVAL) -> dict[int, Tensor]:
        k_m = self.config.coarsest
        extra = tokens.shape[1] % k_m
        if extra:
            if ctx.training:
                raise DivisibilityError(tokens.shape[1], k_m, "top-down input")
            # Eval inputs lose their oldest tokens to reach a multiple of k_m
            tokens = tokens[:, extra:]
        n = tokens.shape[1]
        if n <= k_m:
            raise ShapeError("forward_topdown", [tokens.shape], f"need more than {k_m} tokens")
        x = self.embeddings(tokens)
        states: dict[int, Tensor] = {}
        coarser: Tensor | None = None
        for i, k in enumerate(self.config.scales):
            frames = downsample(x[:, k_m - k : n - k], self.downsamplers[i])
            if coarser is not None:
                frames = fuse(frames, upsample(coarser, self.upsamplers[i - 1]), self.fusions[i - 1])
            spec = AttentionSpec.single(self.config.num_heads, causal_mask(frames.shape[1]))
            for layer in self.stacks[i]:
                frames = layer(frames, spec, ctx=ctx)
            states[k] = coarser = frames
        return states


class BottomUpLM(LanguageModel):
    """Fine-to-coarse cascade aggregated back into token-level predictions.

    Each coarse scale pools the previous scale's outputs and runs its own
    stack. An aggregation layer queries the token embeddings: some heads do
    causal self-attention, the others attend the coarse states under
    cross-scale masks. The finest stack then runs over the aggregated vectors.
    """

    family = "bottomup"

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        d = config.d_model
        ascending = config.scales[::-1]
        depth = dict(zip(config.scales, config.layers))
        self.downsamplers = [
            Downsampler(config.downsampler, coarse // fine, d, rng)
            for fine, coarse in zip(ascending, ascending[1:])
        ]
        self.stacks = [self._stack(depth[k], rng) for k in ascending[1:]]
        self.aggregator = self._layer(rng)
        self.layers = self._stack(depth[1], rng)

    def hidden(self, tokens: np.ndarray, ctx: Context = EVAL) -> dict[int, Tensor]:
        x = self.embeddings(tokens[:, :-1])
        n = x.shape[1]
        ascending = self.config.scales[::-1]
        heads = self.config.heads_per_scale()
        states: dict[int, Tensor] = {}
        h = x
        for k, down, stack in zip(ascending[1:], self.downsamplers, self.stacks):
            h = downsample(h, down, strict=ctx.training)
            # Inputs shorter than one frame leave an empty coarse sequence
            if h.shape[1]:
                spec = AttentionSpec.single(self.config.num_heads, causal_mask(h.shape[1]))
                for layer in stack:
                    h = layer(h, spec, ctx=ctx)
            states[k] = h
        groups = [HeadGroup(heads[1], 0, causal_mask(n))]
        groups += [HeadGroup(heads[k], i, cross_scale_mask(n, k)) for i, k in enumerate(ascending[1:], start=1)]
        spec = AttentionSpec(self.config.num_heads, tuple(groups))
        sources = [x] + [states[k] for k in ascending[1:]]
        out = self.aggregator(x, spec, sources, ctx)
        causal = AttentionSpec.single(self.config.num_heads, causal_mask(n))
        for layer in self.layers:
            out = layer(out, causal, ctx=ctx)
        states[1] = out
        return states


class RetinaLM(LanguageModel):
    """One stack whose head groups see recent tokens finely and distant context through pooled frames."""

    family = "retina"

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        self.ascending = config.scales[::-1]
        self.boundaries = config.windows()
        # One downsampler per coarse scale, shared by every layer
        self.downsamplers = {
            str(k): Downsampler(config.downsampler, k, config.d_model, rng) for k in self.ascending[1:]
        }
        self.layers = self._stack(config.layers[0], rng)

    def spec(self, n: int) -> AttentionSpec:
        heads = self.config.heads_per_scale()
        masks = retina_masks(n, self.ascending, self.boundaries)
        return AttentionSpec(
            self.config.num_heads,
            tuple(HeadGroup(heads[k], i, mask) for i, (k, mask) in enumerate(zip(self.ascending, masks))),
        )

    def hidden(self, tokens: np.ndarray, ctx: Context = EVAL) -> dict[int, Tensor]:
        x = self.embeddings(tokens[:, :-1])
        n = x.shape[1]
        spec = self.spec(n)
        for layer in self.layers:
            sources = [x] + [downsample(x, self.downsamplers[str(k)], strict=ctx.training) for k in self.ascending[1:]]
            x = layer(x, spec, sources, ctx)
        return {1: x}


class CoarseLM(LanguageModel):
    """Predicts the bag of words of the next k-token chunk from pooled chunk embeddings."""

    family = "coarse"

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        self.pool = Downsampler("avg_pool", config.coarsest, config.d_model)
        self.layers = self._stack(config.layers[0], rng)

    @property
    def chunk_length(self) -> int:
        return self.config.context_length

    def first_target(self, n: int) -> int:
        raise ShapeError("coarse_lm", [(n,)], "a coarse-only model does not score single tokens")

    def hidden(self, tokens: np.ndarray, ctx: Context = EVAL) -> dict[int, Tensor]:
        frames = downsample(self.embeddings(tokens), self.pool, strict=ctx.training)
        spec = AttentionSpec.single(self.config.num_heads, causal_mask(frames.shape[1]))
        for layer in self.layers:
            frames = layer(frames, spec, ctx=ctx)
        return {self.config.coarsest: frames}

    def forward(self, tokens: np.ndarray, ctx: Context = EVAL) -> Tensor:
        """Logits per frame; frame ``j`` predicts the words of frame ``j + 1``."""
        return self.head(self.hidden(as_batch(tokens), ctx)[self.config.coarsest])


FAMILIES: dict[str, type[LanguageModel]] = {
    cls.family: cls for cls in (VanillaLM, TopDownLM, BottomUpLM, RetinaLM, CoarseLM)
}


def build_model(config: ModelConfig, seed: int | np.random.Generator = 0) -> LanguageModel:
    """Instantiate and initialise the model family named by ``config.family``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model = FAMILIES[config.family](config, rng)
    log.info("built %s model with %d parameters", config.family, model.num_parameters())
    return model


def hidden_states_at_scale(model: LanguageModel, tokens: np.ndarray, scale: int) -> Tensor:
    """Representations a model computes at ``scale`` (scale 1: final hidden states)."""
    with tc.no_grad():
        states = model.hidden(as_batch(tokens), EVAL)
    if scale not in states:
        raise ScaleError(scale, sorted(states, reverse=True))
    return states[scale]


def target_nll(model: LanguageModel, tokens: np.ndarray) -> tuple[int, np.ndarray]:
    """Per-target negative log-likelihood in eval mode.

    Returns:
        The index of the first scored token and the NLLs of shape (B, n - first).
    """
    tokens = as_batch(tokens)
    first = model.first_target(tokens.shape[1])
    with tc.no_grad():
        logits = model.forward(tokens, EVAL)
    return first, tc.token_nll(logits.data, tokens[:, first:])


def next_token_logits(model: LanguageModel, context: np.ndarray, pad_id: int = 0, fill_id: int = BOS) -> np.ndarray:
    """Logits for the token after ``context`` (1-D), using at most one context window.

    ``pad_id`` holds the place of the predicted token and is never read.
    Contexts shorter than the model's minimum input are left-filled with
    ``fill_id``.
    """
    context = np.asarray(context)
    keep = model.chunk_length - 1
    window = np.concatenate([context[-keep:], [pad_id]]).astype(np.int64)
    short = model.min_length() - len(window)
    if short > 0:
        window = np.concatenate([np.full(short, fill_id, dtype=np.int64), window])
    with tc.no_grad():
        logits = model.forward(window[None, :], EVAL)
    return logits.data[0, -1]
