"""Scaled dot-product multi-head attention and the three fusion-block
variants (1D middle-frame query, 2D full-sequence, 3D spatio-temporal),
plus spatial compression, sinusoidal positional encoding, residual merging,
and lateral connections between blocks.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .tensor import Tensor, ShapeError, softmax, concat
from .layers import Layer, Linear, LayerNorm, Conv3d, BatchNorm3d, avg_pool3d


# -- positional encoding -------------------------------------------------------


def positional_encoding(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/dim)),
    PE[pos, 2i+1] = cos(pos / 10000^(2i/dim))."""
    if dim % 2 != 0:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.empty((n, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


# -- scaled dot-product attention ---------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_extras: bool = False):
    """softmax(Q K^T / sqrt(d)) V over the trailing two axes.

    q: (..., nq, d); k, v: (..., n, d). With ``return_extras`` also returns the
    weight and pre-softmax logit arrays for inspection.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: Q dim {q.shape[-1]} != K dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: K length {k.shape[-2]} != V length {v.shape[-2]}")
    d = q.shape[-1]
    logits = (q @ k.transpose()) * (1.0 / np.sqrt(d))
    weights = softmax(logits, axis=-1)
    out = weights @ v
    if return_extras:
        return out, weights.data.copy(), logits.data.copy()
    return out


class MultiHeadAttention(Layer):
    """Per-head linear projections to dim/heads, scaled dot-product attention
    per head, concatenation, and an output projection back to dim."""

    def __init__(self, dim: int, heads: int, rng=None, dtype=np.float32,
                 init="kaiming"):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.q_proj = Linear(dim, dim, rng=rng, dtype=dtype, init=init)
        self.k_proj = Linear(dim, dim, rng=rng, dtype=dtype, init=init)
        self.v_proj = Linear(dim, dim, rng=rng, dtype=dtype, init=init)
        self.out_proj = Linear(dim, dim, rng=rng, dtype=dtype, init=init)

    def _split(self, x: Tensor) -> Tensor:
        n, l, c = x.shape
        dk = c // self.heads
        return x.reshape(n, l, self.heads, dk).permute(0, 2, 1, 3)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if q.shape[-1] != self.dim:
            raise ShapeError(f"attention input dim {q.shape[-1]} != {self.dim}")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        out = scaled_dot_attention(qh, kh, vh)         # (N, heads, nq, dk)
        n, _, nq, dk = out.shape
        merged = out.permute(0, 2, 1, 3).reshape(n, nq, self.heads * dk)
        return self.out_proj(merged)

    def zero_value_path(self):
        """Zero the value and output projections (makes the head a no-op)."""
        for lin in (self.v_proj, self.out_proj):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0


# -- spatial compression -------------------------------------------------------


def compressor_kernels(spatial: int) -> tuple[int, int]:
    """Two valid-padding kernel sizes that collapse ``spatial`` to 1.

    For the standard 8x8 map this yields (4, 5): 8-4+1=5, then 5-5+1=1.
    """
    if spatial < 1:
        raise ValueError(f"invalid spatial size {spatial}")
    if spatial == 1:
        return 1, 1
    k1 = spatial // 2
    k2 = spatial - k1 + 1
    return k1, k2


class SpatialCompressor(Layer):
    """Two channel-preserving 3D convolutions (1,k1,k1) then (1,k2,k2),
    stride 1, no padding, collapsing the spatial map to 1x1 per time step.
    Each conv is batch-normalized like the trunk convs; without this the
    compressed path runs at an uncontrolled scale and the downstream linear
    head dies."""

    def __init__(self, channels: int, spatial: int = 8, rng=None,
                 dtype=np.float32, init="kaiming"):
        k1, k2 = compressor_kernels(spatial)
        self.spatial = spatial
        self.conv1 = Conv3d(channels, channels, (1, k1, k1), bias=False,
                            rng=rng, dtype=dtype, init=init)
        self.bn1 = BatchNorm3d(channels, dtype=dtype)
        self.conv2 = Conv3d(channels, channels, (1, k2, k2), bias=False,
                            rng=rng, dtype=dtype, init=init)
        self.bn2 = BatchNorm3d(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[-2] != self.spatial or x.shape[-1] != self.spatial:
            raise ShapeError(
                f"spatial compressor built for {self.spatial}x{self.spatial} maps, "
                f"got spatial dims {x.shape[-2]}x{x.shape[-1]}")
        y = self.bn1(self.conv1(x), training).relu()
        return self.bn2(self.conv2(y), training)


# -- block spec and tokenization ----------------------------------------------


@dataclass
class KftBlockSpec:
    """One attention block's hyperparameters."""

    variant: str                      # '1d' | '2d' | '3d'
    embed_dim: int
    heads: int
    num_attentions: int
    use_positional_encoding: bool = True
    residual: str = "additive"        # 'additive' | 'concat' | 'none'
    feed_forward: bool = False

    def __post_init__(self):
        if self.variant not in ("1d", "2d", "3d"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.residual not in ("additive", "concat", "none"):
            raise ValueError(f"unknown residual mode {self.residual!r}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_attentions < 1:
            raise ValueError("num_attentions must be >= 1")


def to_tokens(x: Tensor) -> Tensor:
    """(N,C,T,H,W) -> (N, T*H*W, C) token sequence, row-major over (T,H,W)."""
    n, c, t, h, w = x.shape
    return x.permute(0, 2, 3, 4, 1).reshape(n, t * h * w, c)


def from_tokens(tok: Tensor, shape) -> Tensor:
    n, c, t, h, w = shape
    return tok.reshape(n, t, h, w, c).permute(0, 4, 1, 2, 3)


# -- the block -----------------------------------------------------------------


class KftBlock(Layer):
    """Stacked multi-head self-attention over trunk features with a residual
    merge back into the trunk. The 1D variant queries with the middle frame,
    the 2D variant self-attends over the compressed temporal sequence, and
    the 3D variant self-attends over all spatio-temporal tokens.
    """

    # each layer's normalized contribution starts at a tenth of unit scale so
    # a fresh block is a mild perturbation of its input rather than noise of
    # the same magnitude as the trunk features; the gains are learned
    NORM_INIT_GAIN = 0.1

    def __init__(self, spec: KftBlockSpec, rng=None, dtype=np.float32, init="kaiming"):
        self.spec = spec
        c = spec.embed_dim
        self.attentions = [MultiHeadAttention(c, spec.heads, rng=rng, dtype=dtype, init=init)
                           for _ in range(spec.num_attentions)]
        self.norms = [LayerNorm(c, dtype=dtype) for _ in range(spec.num_attentions)]
        for norm in self.norms:
            norm.gamma.data *= self.NORM_INIT_GAIN
        if spec.feed_forward:
            self.ffns = [Linear(c, c, rng=rng, dtype=dtype, init=init)
                         for _ in range(spec.num_attentions)]
        else:
            self.ffns = []
        if spec.residual == "concat":
            self.merge_proj = Conv3d(2 * c, c, (1, 1, 1), rng=rng, dtype=dtype, init=init)
        else:
            self.merge_proj = None
        self._pe_cache: dict[int, np.ndarray] = {}

    def _pe(self, n: int, dtype) -> np.ndarray:
        if n not in self._pe_cache:
            self._pe_cache[n] = positional_encoding(n, self.spec.embed_dim, dtype)
        return self._pe_cache[n]

    def _attend(self, x_tokens: Tensor) -> Tensor:
        """Stacked residual attention refinements; returns the accumulated
        contribution (the block's pre-residual output), which is exactly zero
        when the value path is zeroed."""
        spec = self.spec
        seq = x_tokens
        acc = None
        if spec.variant == "1d":
            # keys/values from the (optionally position-encoded) input sequence;
            # only the query stream is refined across stacked layers
            kv = seq + self._pe(seq.shape[1], seq.dtype) \
                if spec.use_positional_encoding else seq
            q_seq = seq
            mid = seq.shape[1] // 2
            for i, (mha, norm) in enumerate(zip(self.attentions, self.norms)):
                qmid = q_seq[:, mid:mid + 1, :]
                a = norm(mha(qmid, kv, kv))
                if self.ffns:
                    a = self.ffns[i](a).relu()
                a = a.broadcast_to(seq.shape)       # expand back to full length
                q_seq = q_seq + a
                acc = a if acc is None else acc + a
            return acc
        # 2d / 3d: full self-attention over the current sequence
        if spec.use_positional_encoding:
            seq = seq + self._pe(seq.shape[1], seq.dtype)
        for i, (mha, norm) in enumerate(zip(self.attentions, self.norms)):
            a = norm(mha(seq, seq, seq))
            if self.ffns:
                a = self.ffns[i](a).relu()
            seq = seq + a
            acc = a if acc is None else acc + a
        return acc

    def __call__(self, x: Tensor) -> Tensor:
        spec = self.spec
        n, c, t, h, w = x.shape
        if c != spec.embed_dim:
            raise ShapeError(f"block expects {spec.embed_dim} channels, got {c}")
        if spec.variant in ("1d", "2d") and (h != 1 or w != 1):
            raise ShapeError(
                f"{spec.variant} block needs spatially compressed (H=W=1) input, "
                f"got {h}x{w}")
        if t < 1:
            raise ShapeError("block needs at least one temporal step")
        out_tokens = self._attend(to_tokens(x))
        y = from_tokens(out_tokens, x.shape)
        return residual_merge(spec.residual, x, y, self.merge_proj)

    def zero_value_path(self):
        for mha in self.attentions:
            mha.zero_value_path()


def residual_merge(mode: str, block_in: Tensor, block_out: Tensor,
                   merge_proj: Conv3d | None = None) -> Tensor:
    """additive: elementwise sum; concat: channel concat then a 1x1x1
    projection back to the input channel count; none: block output alone."""
    if mode == "none":
        return block_out
    if mode == "additive":
        if block_in.shape != block_out.shape:
            raise ShapeError(
                f"additive residual: shapes differ {block_in.shape} vs {block_out.shape}")
        return block_in + block_out
    if mode == "concat":
        if block_in.shape[0] != block_out.shape[0] or block_in.shape[2:] != block_out.shape[2:]:
            raise ShapeError(
                f"concat residual: non-channel dims differ "
                f"{block_in.shape} vs {block_out.shape}")
        if merge_proj is None:
            raise ValueError("concat residual requires a merge projection")
        return merge_proj(concat([block_in, block_out], axis=1))
    raise ValueError(f"unknown residual mode {mode!r}")


# -- lateral connections -------------------------------------------------------


class LateralConnection(Layer):
    """Carry one block's output into the next block's input: average-pool to
    the target spatio-temporal size, project channels with a 1x1x1
    convolution, and add."""

    def __init__(self, in_channels: int, out_channels: int, rng=None,
                 dtype=np.float32, init="kaiming"):
        self.proj = Conv3d(in_channels, out_channels, (1, 1, 1),
                           rng=rng, dtype=dtype, init=init)

    def __call__(self, prev_out: Tensor, next_in: Tensor) -> Tensor:
        pdims = prev_out.shape[2:]
        ndims = next_in.shape[2:]
        ratios = []
        for p, q in zip(pdims, ndims):
            if p % q != 0:
                raise ShapeError(
                    f"lateral connection: {pdims} not an integer multiple of {ndims}")
            ratios.append(p // q)
        pooled = prev_out if all(r == 1 for r in ratios) else \
            avg_pool3d(prev_out, tuple(ratios), tuple(ratios))
        return next_in + self.proj(pooled)
