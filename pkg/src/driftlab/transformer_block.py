"""One BERT-style post-LN encoder layer, forward only, with attention capture.

The block is ``LN(h + FFN(h))`` with ``h = LN(x + MHSA(x))``. No mask, no
dropout, no positional embeddings unless ``BlockConfig.positional`` is set.
Setting ``attention_only`` drops the FFN sublayer so the output is ``h``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import PreconditionError, ShapeError
from .numerics import RngStream, gaussian_vector, gelu, layer_norm, matmul, softmax_rows

# sub-stream indices under the params seed
_STREAM_EMBED = 0
_STREAM_WEIGHTS = 1
_STREAM_POSITIONS = 2


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 768
    n_heads: int = 12
    d_ff: int = 3072
    vocab_size: int = 30522
    seq_len: int = 512
    n_sequences: int = 16
    layernorm_eps: float = 1e-12
    init_std: float = 0.02
    seed: int = 0
    attention_only: bool = False
    positional: bool = False

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "seq_len", "n_sequences"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise PreconditionError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not self.init_std > 0:
            raise PreconditionError("init_std must be positive")
        if not self.layernorm_eps > 0:
            raise PreconditionError("layernorm_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlockParams:
    """Weights stored as ``(in, out)`` so a row batch maps by ``x @ W + b``.

    ``w_q[:, h*d_head:(h+1)*d_head]`` is head ``h``'s query projection.
    """

    config: BlockConfig
    embeddings: np.ndarray  # (vocab_size, d_model)
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    w_1: np.ndarray  # (d_model, d_ff)
    b_1: np.ndarray
    w_2: np.ndarray  # (d_ff, d_model)
    b_2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    positions: np.ndarray | None = None  # (seq_len, d_model) when config.positional

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in vars(self).items() if isinstance(v, np.ndarray)}


@dataclass
class AttentionTrace:
    """Per-head attention internals, indexed ``[sequence, head, ...]``.

    q, k: ``(S, H, L, d_head)``; logits and probs: ``(S, H, L, L)`` where
    ``logits = q k^T / sqrt(d_head)`` and ``probs`` is its row softmax.
    """

    q: np.ndarray
    k: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    @property
    def n_sequences(self) -> int:
        return self.q.shape[0]

    @property
    def n_heads(self) -> int:
        return self.q.shape[1]

    @property
    def seq_len(self) -> int:
        return self.q.shape[2]


def init_params(config: BlockConfig) -> BlockParams:
    """BERT-style initialization, deterministic in ``config.seed``.

    All weight matrices and the embedding table are truncated normal
    (std ``init_std``, cut at 2 std); biases are zero, LayerNorm gamma one.
    """
    d, f = config.d_model, config.d_ff
    std = config.init_std
    root = RngStream(config.seed)
    embeddings = root.substream(_STREAM_EMBED).truncated_normal((config.vocab_size, d), std)
    wrng = root.substream(_STREAM_WEIGHTS)
    w_q, w_k, w_v, w_o = (wrng.truncated_normal((d, d), std) for _ in range(4))
    w_1 = wrng.truncated_normal((d, f), std)
    w_2 = wrng.truncated_normal((f, d), std)
    positions = None
    if config.positional:
        positions = root.substream(_STREAM_POSITIONS).truncated_normal((config.seq_len, d), std)
    zeros = lambda n: np.zeros(n)  # noqa: E731
    return BlockParams(
        config=config, embeddings=embeddings,
        w_q=w_q, b_q=zeros(d), w_k=w_k, b_k=zeros(d), w_v=w_v, b_v=zeros(d),
        w_o=w_o, b_o=zeros(d), w_1=w_1, b_1=zeros(f), w_2=w_2, b_2=zeros(d),
        ln1_gamma=np.ones(d), ln1_beta=zeros(d), ln2_gamma=np.ones(d), ln2_beta=zeros(d),
        positions=positions,
    )


def sample_inputs(params: BlockParams, config: BlockConfig, rng: RngStream) -> np.ndarray:
    """Draw ``(n_sequences, seq_len)`` token ids uniformly with replacement and look them up."""
    if config.vocab_size < 1:
        raise PreconditionError("vocab_size must be >= 1")
    ids = rng.integers(0, config.vocab_size, (config.n_sequences, config.seq_len))
    batch = params.embeddings[ids]
    if params.positions is not None:
        batch += params.positions[None, :, :]
    return batch


def make_bias(rng: RngStream, dim: int, norm: float) -> np.ndarray:
    """``b_u / ||b_u|| * norm`` with ``b_u`` a fresh Gaussian draw."""
    if norm < 0:
        raise PreconditionError(f"bias norm must be >= 0, got {norm}")
    direction = gaussian_vector(rng, dim)
    return direction / np.linalg.norm(direction) * norm


def _split_heads(x2d: np.ndarray, n_seq: int, seq_len: int, n_heads: int) -> np.ndarray:
    d_head = x2d.shape[1] // n_heads
    return x2d.reshape(n_seq, seq_len, n_heads, d_head).transpose(0, 2, 1, 3)


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = matmul(x, w)
    out += b
    return out


def _check_batch(params: BlockParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    d = params.config.d_model
    if batch.ndim != 3 or batch.shape[2] != d:
        raise ShapeError(f"batch shape {batch.shape} does not match d_model={d}")
    return batch


def project_qk(params: BlockParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Queries and keys as ``(S, H, L, d_head)`` arrays."""
    batch = _check_batch(params, batch)
    n_seq, seq_len, d = batch.shape
    flat = batch.reshape(-1, d)
    h = params.config.n_heads
    q = _split_heads(_linear(flat, params.w_q, params.b_q), n_seq, seq_len, h)
    k = _split_heads(_linear(flat, params.w_k, params.b_k), n_seq, seq_len, h)
    return q, k


def attention_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Pre-softmax scores ``q k^T / sqrt(d_head)`` for every (sequence, head)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = np.matmul(q, k.swapaxes(-1, -2))
    logits *= scale
    return logits


def forward(params: BlockParams, batch: np.ndarray, capture: bool = False
            ) -> tuple[np.ndarray, AttentionTrace | None]:
    """Run the block on ``(S, L, d_model)`` input.

    Attention is computed one sequence at a time and in the same order
    whether or not ``capture`` is set, so the output is bit-identical
    either way.
    """
    cfg = params.config
    batch = _check_batch(params, batch)
    n_seq, seq_len, d = batch.shape
    flat = batch.reshape(-1, d)
    q, k = project_qk(params, batch)
    v = _split_heads(_linear(flat, params.w_v, params.b_v), n_seq, seq_len, cfg.n_heads)

    # context laid out (S, L, H, d_head) so merging heads is a free reshape
    context = np.empty((n_seq, seq_len, cfg.n_heads, cfg.d_head))
    trace = None
    if capture:
        shape = (n_seq, cfg.n_heads, seq_len, seq_len)
        trace = AttentionTrace(q=q, k=k, logits=np.empty(shape), probs=np.empty(shape))
    for s in range(n_seq):
        logits = attention_logits(q[s], k[s])
        if trace is not None:
            trace.logits[s] = logits
            probs = softmax_rows(logits, out=trace.probs[s])
        else:
            probs = softmax_rows(logits, out=logits)
        np.matmul(probs, v[s], out=context[s].transpose(1, 0, 2))

    hidden = _linear(context.reshape(-1, d), params.w_o, params.b_o)
    hidden += flat
    hidden = layer_norm(hidden, params.ln1_gamma, params.ln1_beta, cfg.layernorm_eps)
    if cfg.attention_only:
        return hidden.reshape(batch.shape), trace
    ff = gelu(_linear(hidden, params.w_1, params.b_1))
    ff = _linear(ff, params.w_2, params.b_2)
    ff += hidden
    out = layer_norm(ff, params.ln2_gamma, params.ln2_beta, cfg.layernorm_eps)
    return out.reshape(batch.shape), trace
