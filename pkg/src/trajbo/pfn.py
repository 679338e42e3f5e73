"""Transformer surrogate: in-context posterior prediction over bar distributions.

Context observations enter as (x, y) pair tokens, candidate locations as
x-only query tokens.  A masked transformer lets context attend to context,
queries attend to context and themselves, and nothing attend to queries.
One forward pass yields a discretized predictive distribution per query in
standardized-y space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bardist as bd
from . import ndtensor as nd


@dataclass(frozen=True)
class PfnConfig:
    """Architecture settings; defaults are the full-scale training recipe."""

    max_input_dim: int = 26
    embed_dim: int = 512
    layers: int = 6
    heads: int = 4
    ffn_dim: int = 1024
    bars: int = 1000
    positional_encoding: bool = False
    seq_len: int = 40

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @classmethod
    def desk(cls, **overrides) -> "PfnConfig":
        """Small configuration sized for laptop-scale runs."""
        base = dict(embed_dim=128, layers=3, heads=4, ffn_dim=256, bars=100)
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> bd.BarGrid:
        return bd.BarGrid(B=self.bars)


@dataclass
class PfnSurrogate:
    """Configuration plus named parameter arrays."""

    config: PfnConfig
    params: dict[str, np.ndarray]


@dataclass(frozen=True)
class ContextSet:
    """Ordered observations with the stats used to normalize model inputs."""

    xs: np.ndarray
    ys: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_mean: float
    y_std: float

    def standardize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std


def make_context(xs, ys, bounds=None) -> ContextSet:
    """Build a context; bounds=(lo, hi) supplies known candidate-pool limits."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 2 or len(xs) != len(ys):
        raise ValueError("make_context: xs must be (n, d) with matching ys")
    if bounds is not None:
        x_lo = np.asarray(bounds[0], dtype=np.float64)
        x_hi = np.asarray(bounds[1], dtype=np.float64)
    elif len(xs):
        x_lo, x_hi = xs.min(axis=0), xs.max(axis=0)
    else:
        x_lo = np.zeros(xs.shape[1])
        x_hi = np.ones(xs.shape[1])
    y_mean = float(ys.mean()) if len(ys) else 0.0
    y_std = max(float(ys.std()), 1e-8) if len(ys) else 1.0
    return ContextSet(xs, ys, x_lo, x_hi, y_mean, y_std)


def normalize_and_pad(xs: np.ndarray, x_lo, x_hi, max_input_dim: int) -> np.ndarray:
    """Min-max normalize per dimension and zero-pad up to max_input_dim."""
    xs = np.asarray(xs, dtype=np.float64)
    d = xs.shape[-1]
    if d > max_input_dim:
        raise ValueError(f"input dimension {d} exceeds maximum {max_input_dim}")
    width = np.maximum(np.asarray(x_hi) - np.asarray(x_lo), 1e-12)
    normed = (xs - x_lo) / width
    pad = np.zeros(xs.shape[:-1] + (max_input_dim - d,))
    return np.concatenate([normed, pad], axis=-1)


def positional_encoding(positions, dim: int) -> np.ndarray:
    """Sinusoidal encoding of absolute positions, shape (len(positions), dim)."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    half = np.arange(dim // 2, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * 2.0 * half / dim)
    out = np.zeros((len(positions), dim))
    out[:, 0::2] = np.sin(positions * freq)
    out[:, 1::2] = np.cos(positions * freq)
    return out


def pfn_mask(n_ctx: int, n_query: int) -> np.ndarray:
    """Boolean attention matrix: rows attend to columns where True."""
    if n_ctx < 0 or n_query < 1:
        raise ValueError(f"pfn_mask: need n_ctx >= 0 and n_query >= 1")
    n = n_ctx + n_query
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_ctx, :n_ctx] = True
    mask[n_ctx:, :n_ctx] = True
    idx = np.arange(n_ctx, n)
    mask[idx, idx] = True
    return mask


# ---------------------------------------------------------------------------
# parameters


def init_surrogate(config: PfnConfig, rng: np.random.Generator) -> PfnSurrogate:
    """Scaled-normal initialization for all parameter arrays."""
    params: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        params[f"{name}/w"] = rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)
        params[f"{name}/b"] = np.zeros(fan_out)

    d_model = config.embed_dim
    linear("pair_embed", config.max_input_dim + 1, d_model)
    linear("query_embed", config.max_input_dim, d_model)
    for i in range(config.layers):
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"block{i}/attn_{proj}", d_model, d_model)
        linear(f"block{i}/ffn_1", d_model, config.ffn_dim)
        linear(f"block{i}/ffn_2", config.ffn_dim, d_model)
        for ln in ("ln1", "ln2"):
            params[f"block{i}/{ln}_g"] = np.ones(d_model)
            params[f"block{i}/{ln}_b"] = np.zeros(d_model)
    params["final_ln_g"] = np.ones(d_model)
    params["final_ln_b"] = np.zeros(d_model)
    linear("head", d_model, config.bars)
    if config.positional_encoding:
        # Zero-initialized gate: the encoding contributes nothing until
        # training opens it, so turning it on never perturbs a trained model.
        params["pos_gate"] = np.zeros(())
    return PfnSurrogate(config, params)


def param_leaves(graph: nd.Graph, params: dict[str, np.ndarray]) -> dict[str, nd.Tensor]:
    """Record every parameter as a leaf on the graph, preserving names."""
    return {name: graph.leaf(value, name=name) for name, value in params.items()}


# ---------------------------------------------------------------------------
# forward


def _affine_ln(x, g, b):
    return nd.add(nd.mul(nd.layer_norm(x, axis=-1), g), b)


def _transformer_logits(params, tokens: nd.Tensor, mask: np.ndarray,
                        config: PfnConfig) -> nd.Tensor:
    """Masked pre-LN transformer over (batch, n, embed) tokens -> bar logits."""
    heads, d_model = config.heads, config.embed_dim
    d_head = d_model // heads
    bias = nd.constant(np.where(mask, 0.0, -1e30))
    batch, n = tokens.shape[0], tokens.shape[1]
    h = tokens
    for i in range(config.layers):
        pre = _affine_ln(h, params[f"block{i}/ln1_g"], params[f"block{i}/ln1_b"])

        def split_heads(t):
            t = nd.reshape(t, (batch, n, heads, d_head))
            return nd.transpose(t, (0, 2, 1, 3))

        q = split_heads(nd.add(nd.matmul(pre, params[f"block{i}/attn_wq/w"]),
                               params[f"block{i}/attn_wq/b"]))
        k = split_heads(nd.add(nd.matmul(pre, params[f"block{i}/attn_wk/w"]),
                               params[f"block{i}/attn_wk/b"]))
        v = split_heads(nd.add(nd.matmul(pre, params[f"block{i}/attn_wv/w"]),
                               params[f"block{i}/attn_wv/b"]))
        scores = nd.add(nd.mul(nd.matmul(q, nd.transpose(k, (0, 1, 3, 2))),
                               1.0 / np.sqrt(d_head)), bias)
        mixed = nd.matmul(nd.softmax(scores, axis=-1), v)
        mixed = nd.reshape(nd.transpose(mixed, (0, 2, 1, 3)), (batch, n, d_model))
        attn_out = nd.add(nd.matmul(mixed, params[f"block{i}/attn_wo/w"]),
                          params[f"block{i}/attn_wo/b"])
        h = nd.add(h, attn_out)

        pre2 = _affine_ln(h, params[f"block{i}/ln2_g"], params[f"block{i}/ln2_b"])
        inner = nd.gelu(nd.add(nd.matmul(pre2, params[f"block{i}/ffn_1/w"]),
                               params[f"block{i}/ffn_1/b"]))
        ffn_out = nd.add(nd.matmul(inner, params[f"block{i}/ffn_2/w"]),
                         params[f"block{i}/ffn_2/b"])
        h = nd.add(h, ffn_out)

    final = _affine_ln(h, params["final_ln_g"], params["final_ln_b"])
    return nd.add(nd.matmul(final, params["head/w"]), params["head/b"])


def _assemble_tokens(params, x_pad_ctx, z_ctx, x_pad_query, config: PfnConfig):
    """Embed context pairs and query locations into one token sequence."""
    batch, n_ctx = z_ctx.shape
    n_query = x_pad_query.shape[1]
    ctx_in = np.concatenate([x_pad_ctx, z_ctx[:, :, None]], axis=-1)
    ctx_tok = nd.add(nd.matmul(nd.constant(ctx_in), params["pair_embed/w"]),
                     params["pair_embed/b"])
    q_tok = nd.add(nd.matmul(nd.constant(x_pad_query), params["query_embed/w"]),
                   params["query_embed/b"])
    tokens = nd.concat([ctx_tok, q_tok], axis=1) if n_ctx else q_tok
    if config.positional_encoding:
        positions = np.concatenate([np.arange(1, n_ctx + 1),
                                    np.full(n_query, n_ctx + 1)])
        pe = nd.constant(positional_encoding(positions, config.embed_dim))
        tokens = nd.add(tokens, nd.mul(params["pos_gate"], pe))
    return tokens


def pfn_forward(model: PfnSurrogate, ctx: ContextSet, queries) -> list[bd.BarDistribution]:
    """Predict one bar distribution per query point, in standardized-y space."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or len(queries) == 0:
        raise ValueError("pfn_forward: queries must be a nonempty (q, d) array")
    if len(ctx.xs) and ctx.xs.shape[1] != queries.shape[1]:
        raise ValueError("pfn_forward: query dimension differs from context")
    cfg = model.config
    if len(ctx.xs) > cfg.seq_len:
        raise ValueError(f"pfn_forward: context larger than seq_len {cfg.seq_len}")
    n_ctx, n_query = len(ctx.xs), len(queries)
    x_ctx = normalize_and_pad(ctx.xs.reshape(n_ctx, -1) if n_ctx else
                              np.zeros((0, queries.shape[1])),
                              ctx.x_lo, ctx.x_hi, cfg.max_input_dim)
    x_q = normalize_and_pad(queries, ctx.x_lo, ctx.x_hi, cfg.max_input_dim)
    z_ctx = ctx.standardize_y(ctx.ys) if n_ctx else np.zeros(0)
    with nd.no_grad():
        params = {k: nd.constant(v) for k, v in model.params.items()}
        tokens = _assemble_tokens(params, x_ctx[None], z_ctx[None], x_q[None], cfg)
        logits = _transformer_logits(params, tokens, pfn_mask(n_ctx, n_query), cfg)
    out = logits.data[0, n_ctx:]
    return [bd.logits_to_bar(row, cfg.grid) for row in out]


def pfn_loss(params, config: PfnConfig, xs: np.ndarray, ys: np.ndarray, m: int,
             bounds=None):
    """Mean over the batch of summed query NLL, context = each row's prefix.

    params maps names to tensors (or arrays); xs is (batch, L, d), ys is
    (batch, L), and every row is split at the same point: L - m context
    observations followed by m queries.  Returns (loss, aux) where aux
    reports the per-query mean loss and the clamped-target count.
    """
    params = {k: nd.as_tensor(v) for k, v in params.items()}
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    batch, length = ys.shape
    if xs.shape[:2] != (batch, length):
        raise nd.ShapeError("pfn_loss", (xs.shape, ys.shape))
    if length > config.seq_len:
        raise ValueError(f"pfn_loss: sequence length {length} exceeds {config.seq_len}")
    if not 1 <= m <= length - 1:
        raise ValueError(f"pfn_loss: split m={m} outside [1, {length - 1}]")
    c = length - m
    if bounds is None:
        x_lo = xs[:, :c].min(axis=1, keepdims=True)
        x_hi = xs[:, :c].max(axis=1, keepdims=True)
    else:
        x_lo = np.broadcast_to(bounds[0], (batch, xs.shape[2]))[:, None, :]
        x_hi = np.broadcast_to(bounds[1], (batch, xs.shape[2]))[:, None, :]
    x_pad = normalize_and_pad(xs, x_lo, x_hi, config.max_input_dim)
    y_mean = ys[:, :c].mean(axis=1, keepdims=True)
    y_std = np.maximum(ys[:, :c].std(axis=1, keepdims=True), 1e-8)
    z = (ys - y_mean) / y_std

    tokens = _assemble_tokens(params, x_pad[:, :c], z[:, :c], x_pad[:, c:], config)
    logits = _transformer_logits(params, tokens, pfn_mask(c, m), config)
    q_logits = logits[:, c:, :]
    nll, clipped = bd.nll_from_logits(q_logits, z[:, c:], config.grid)
    loss = nd.tmean(nd.tsum(nll, axis=1))
    aux = {"per_query": float(loss.data) / m, "clipped": clipped}
    return loss, aux
