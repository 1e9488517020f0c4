"""Tiny windowed MLP language policy with analytic gradients.

The policy conditions on the last ``context_window`` token ids: their
embeddings are concatenated and pushed through two dense layers
(``d*w -> h -> |V|``) with a tanh hidden activation.  Everything is double
precision and the backward pass is hand-derived (verified against central
finite differences in the test suite).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .rng import child_rng

INIT_SCALE = 0.05

_CHECKPOINT_MAGIC = b"ZLPC"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyDims:
    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 64
    context_window: int = 16

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embed_dim", "hidden_dim", "context_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"policy dims invariant violated: {name} must be positive")

    @property
    def input_dim(self) -> int:
        return self.embed_dim * self.context_window

    @property
    def parameter_count(self) -> int:
        return (
            self.vocab_size * self.embed_dim
            + self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.vocab_size
            + self.vocab_size
        )


@dataclass
class PolicyParams:
    """Parameter arrays; treated as immutable by the training ops."""

    dims: PolicyDims
    embedding: np.ndarray  # (V, d)
    w1: np.ndarray  # (d*w, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, V)
    b2: np.ndarray  # (V,)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.embedding, self.w1, self.b1, self.w2, self.b2)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, *(a.copy() for a in self.arrays()))

    def allclose(self, other: "PolicyParams", atol: float = 0.0) -> bool:
        return all(
            np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class PolicyGrads:
    """Gradient accumulator with the same shapes as the parameters."""

    embedding: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros(cls, dims: PolicyDims) -> "PolicyGrads":
        return cls(
            embedding=np.zeros((dims.vocab_size, dims.embed_dim)),
            w1=np.zeros((dims.input_dim, dims.hidden_dim)),
            b1=np.zeros(dims.hidden_dim),
            w2=np.zeros((dims.hidden_dim, dims.vocab_size)),
            b2=np.zeros(dims.vocab_size),
        )

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.embedding, self.w1, self.b1, self.w2, self.b2)

    def scaled(self, factor: float) -> "PolicyGrads":
        return PolicyGrads(*(a * factor for a in self.arrays()))


def init_params(dims: PolicyDims, seed: int) -> PolicyParams:
    """Uniform init in [-INIT_SCALE, INIT_SCALE], deterministic in ``seed``."""
    rng = child_rng(seed, "policy-init")

    def draw(*shape: int) -> np.ndarray:
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    return PolicyParams(
        dims=dims,
        embedding=draw(dims.vocab_size, dims.embed_dim),
        w1=draw(dims.input_dim, dims.hidden_dim),
        b1=draw(dims.hidden_dim),
        w2=draw(dims.hidden_dim, dims.vocab_size),
        b2=draw(dims.vocab_size),
    )


def zero_params(dims: PolicyDims) -> PolicyParams:
    """All-zero parameters; the output distribution is uniform."""
    return PolicyParams(
        dims=dims,
        embedding=np.zeros((dims.vocab_size, dims.embed_dim)),
        w1=np.zeros((dims.input_dim, dims.hidden_dim)),
        b1=np.zeros(dims.hidden_dim),
        w2=np.zeros((dims.hidden_dim, dims.vocab_size)),
        b2=np.zeros(dims.vocab_size),
    )


def _check_context(params: PolicyParams, context: np.ndarray) -> np.ndarray:
    context = np.asarray(context, dtype=np.int64)
    if context.shape != (params.dims.context_window,):
        raise ConfigError(
            f"context must have length {params.dims.context_window}, got {context.shape}"
        )
    if context.min(initial=0) < 0 or context.max(initial=0) >= params.dims.vocab_size:
        raise ConfigError("context contains token ids outside the vocabulary")
    return context


def _forward_parts(
    params: PolicyParams, context: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (input vector, hidden activations, logits, probabilities)."""
    context = _check_context(params, context)
    x = params.embedding[context].reshape(params.dims.input_dim)
    hidden = np.tanh(x @ params.w1 + params.b1)
    logits = hidden @ params.w2 + params.b2
    if not np.all(np.isfinite(logits)):
        raise NumericError("policy forward produced non-finite logits")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return x, hidden, logits, probs


def forward(params: PolicyParams, context: np.ndarray) -> np.ndarray:
    """Next-token distribution given a context of ``context_window`` ids."""
    return _forward_parts(params, context)[3]


def _forward_rows(
    params: PolicyParams, contexts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-batched forward pass: returns (inputs, hiddens, probabilities).

    ``contexts`` is an integer matrix of shape (rows, context_window); the
    caller guarantees ids are in range.  One matrix multiply per layer
    replaces a Python-level loop over rows.
    """
    rows = contexts.shape[0]
    x = params.embedding[contexts].reshape(rows, params.dims.input_dim)
    hidden = np.tanh(x @ params.w1 + params.b1)
    logits = hidden @ params.w2 + params.b2
    if not np.all(np.isfinite(logits)):
        raise NumericError("policy forward produced non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return x, hidden, probs


@dataclass
class RowsCache:
    """Batched forward activations: one context row per model token."""

    contexts: np.ndarray
    x: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray


def _check_context_rows(params: PolicyParams, contexts: np.ndarray) -> np.ndarray:
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.ndim != 2 or contexts.shape[1] != params.dims.context_window:
        raise ConfigError(
            f"context rows must have width {params.dims.context_window}, "
            f"got shape {contexts.shape}"
        )
    if contexts.size and (contexts.min() < 0 or contexts.max() >= params.dims.vocab_size):
        raise ConfigError("context contains token ids outside the vocabulary")
    return contexts


def forward_rows(params: PolicyParams, contexts: np.ndarray) -> np.ndarray:
    """Next-token distributions for a batch of contexts, one per row."""
    return _forward_rows(params, _check_context_rows(params, contexts))[2]


def forward_rows_with_cache(params: PolicyParams, contexts: np.ndarray) -> RowsCache:
    contexts = _check_context_rows(params, contexts)
    x, hidden, probs = _forward_rows(params, contexts)
    return RowsCache(contexts=contexts, x=x, hidden=hidden, probs=probs)


def accumulate_rows_grad(
    params: PolicyParams,
    contexts: np.ndarray,
    x: np.ndarray,
    hidden: np.ndarray,
    dlogits: np.ndarray,
    out: PolicyGrads,
) -> None:
    """Row-batched form of the logit backprop; accumulates into ``out``.

    ``dlogits`` carries each row's objective gradient (already scaled), so
    the whole batch reduces to three matrix products plus an embedding
    scatter-add.
    """
    dims = params.dims
    out.b2 += dlogits.sum(axis=0)
    out.w2 += hidden.T @ dlogits
    dhidden = dlogits @ params.w2.T
    dpre = (1.0 - hidden * hidden) * dhidden
    out.b1 += dpre.sum(axis=0)
    out.w1 += x.T @ dpre
    dx = (dpre @ params.w1.T).reshape(-1, dims.context_window, dims.embed_dim)
    np.add.at(out.embedding, contexts.reshape(-1), dx.reshape(-1, dims.embed_dim))


@dataclass
class ForwardCache:
    """Intermediate activations reused between logprob and gradient passes."""

    context: np.ndarray
    x: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray


def forward_with_cache(params: PolicyParams, context: np.ndarray) -> ForwardCache:
    x, hidden, _, probs = _forward_parts(params, context)
    return ForwardCache(context=np.asarray(context, dtype=np.int64), x=x, hidden=hidden, probs=probs)


def _backprop_dlogits(
    params: PolicyParams,
    context: np.ndarray,
    x: np.ndarray,
    hidden: np.ndarray,
    dlogits: np.ndarray,
    scale: float,
    out: PolicyGrads,
) -> None:
    """Accumulate ``scale * d(objective)/d(params)`` given d(objective)/d(logits)."""
    dims = params.dims
    d = dlogits * scale
    out.b2 += d
    out.w2 += np.outer(hidden, d)
    dhidden = params.w2 @ d
    dpre = (1.0 - hidden * hidden) * dhidden
    out.b1 += dpre
    out.w1 += np.outer(x, dpre)
    dx = (params.w1 @ dpre).reshape(dims.context_window, dims.embed_dim)
    np.add.at(out.embedding, context, dx)


def accumulate_cached_logprob_grad(
    params: PolicyParams,
    cache: ForwardCache,
    token: int,
    scale: float,
    out: PolicyGrads,
) -> None:
    """Add ``scale * d(log p(token|context))/d(params)`` into ``out``."""
    if not 0 <= token < params.dims.vocab_size:
        raise ConfigError(f"token id {token} outside vocabulary")
    dlogits = -cache.probs.copy()
    dlogits[token] += 1.0
    _backprop_dlogits(params, cache.context, cache.x, cache.hidden, dlogits, scale, out)


def accumulate_logprob_grad(
    params: PolicyParams,
    context: np.ndarray,
    token: int,
    scale: float,
    out: PolicyGrads,
) -> float:
    """Add ``scale * d(log p(token|context))/d(params)`` into ``out``.

    Returns log p(token|context).  This is the single backward path shared by
    SFT and policy-gradient training.
    """
    cache = forward_with_cache(params, context)
    accumulate_cached_logprob_grad(params, cache, token, scale, out)
    return float(np.log(cache.probs[token]))


def logprob_and_grad(
    params: PolicyParams, context: np.ndarray, token: int
) -> tuple[float, PolicyGrads]:
    """Log-probability of ``token`` and its gradient w.r.t. all parameters."""
    grads = PolicyGrads.zeros(params.dims)
    logprob = accumulate_logprob_grad(params, context, token, 1.0, grads)
    return logprob, grads


def accumulate_kl_grad(
    params: PolicyParams,
    cache: ForwardCache,
    ref_probs: np.ndarray,
    scale: float,
    out: PolicyGrads,
) -> float:
    """Add ``scale * d KL(current || ref)/d(params)``; returns the KL value.

    d KL / d logit_j = p_j * (log(p_j / q_j) - KL); exactly zero when the
    current and reference distributions coincide.
    """
    probs = cache.probs
    log_ratio = np.log(probs) - np.log(ref_probs)
    kl = float(np.sum(probs * log_ratio))
    dlogits = probs * (log_ratio - kl)
    _backprop_dlogits(params, cache.context, cache.x, cache.hidden, dlogits, scale, out)
    return kl


def apply_gradient(params: PolicyParams, grads: PolicyGrads, learning_rate: float) -> PolicyParams:
    """One plain gradient-descent step; returns new parameters."""
    updated = [
        p - learning_rate * g for p, g in zip(params.arrays(), grads.arrays())
    ]
    return PolicyParams(params.dims, *updated)


def sample(distribution: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw a token id from a probability vector.

    ``temperature == 0`` is greedy argmax with lowest-id tie-break; otherwise
    the distribution is sharpened to ``p ** (1/temperature)`` (equivalently a
    softmax of ``logits / temperature``) before an inverse-CDF draw.
    """
    if temperature < 0:
        raise ConfigError("temperature must be non-negative")
    p = np.asarray(distribution, dtype=np.float64)
    if temperature == 0.0:
        return int(np.flatnonzero(p == p.max())[0])
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
        z = logp / temperature
        z -= z.max()
        q = np.exp(z)
        p = q / q.sum()
    cumulative = np.cumsum(p)
    draw = rng.random() * cumulative[-1]
    return int(min(np.searchsorted(cumulative, draw, side="right"), len(p) - 1))


def save_checkpoint(params: PolicyParams, path) -> None:
    """Write parameters as little-endian doubles behind a shape header.

    Layout: magic ``ZLPC``, u32 version, then u32 vocab/embed/hidden/window
    sizes, then the flattened arrays in order embedding, w1, b1, w2, b2.
    """
    dims = params.dims
    header = _CHECKPOINT_MAGIC + struct.pack(
        "<5I", _CHECKPOINT_VERSION, dims.vocab_size, dims.embed_dim,
        dims.hidden_dim, dims.context_window,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for array in params.arrays():
            fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def load_checkpoint(path) -> PolicyParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise ConfigError(f"not a policy checkpoint: {path}")
    version, vocab, embed, hidden, window = struct.unpack("<5I", blob[4:24])
    if version != _CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    dims = PolicyDims(vocab, embed, hidden, window)
    flat = np.frombuffer(blob[24:], dtype="<f8")
    if flat.size != dims.parameter_count:
        raise ConfigError(
            f"checkpoint payload has {flat.size} doubles, expected {dims.parameter_count}"
        )
    shapes = [
        (vocab, embed),
        (dims.input_dim, hidden),
        (hidden,),
        (hidden, vocab),
        (vocab,),
    ]
    arrays = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[offset : offset + size].reshape(shape).astype(np.float64))
        offset += size
    return PolicyParams(dims, *arrays)
