"""Convolutional sentence encoders: general (Siamese), query-aware, position-aware.

Two routes exist for each attention encoder:

* the per-instance functions (``encode_qatt``, ``encode_patt``) build the
  token- and position-specific kernels explicitly and convolve with them;
* the ``*_batch`` functions used for training factor the kernel product into
  the input (``conv(P, U*q) == conv(P*q, U)``), which avoids materializing
  one ``[F, k, d]`` kernel per query token and window position.

Tests hold the two routes equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    PreconditionError,
    Tensor,
    conv1d,
    cosine,
    cosine_matrix,
    einsum,
    matmul,
    max_pool_over_time,
    positionwise_conv1d,
    relu,
    stack,
    unfold,
)


@dataclass
class EncoderParams:
    """Convolution kernels ``[F, k, d]``, bias ``[F]`` and the post-pooling MLP ``[F, H]``.

    The same layout serves as W (general encoder), U (QAtt) and V (PAtt).
    """

    weight: Tensor
    bias: Tensor
    mlp_weight: Tensor
    mlp_bias: Tensor

    @classmethod
    def init(cls, num_filters: int, kernel_size: int, dim: int, hidden: int,
             rng: np.random.Generator, prefix: str = "enc") -> "EncoderParams":
        fan_conv = kernel_size * dim
        b1 = 1.0 / np.sqrt(fan_conv)
        b2 = 1.0 / np.sqrt(num_filters)
        return cls(
            weight=Tensor(rng.uniform(-b1, b1, (num_filters, kernel_size, dim)), True, f"{prefix}.weight"),
            bias=Tensor(rng.uniform(-b1, b1, num_filters), True, f"{prefix}.bias"),
            mlp_weight=Tensor(rng.uniform(-b2, b2, (num_filters, hidden)), True, f"{prefix}.mlp_weight"),
            mlp_bias=Tensor(rng.uniform(-b2, b2, hidden), True, f"{prefix}.mlp_bias"),
        )

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias, self.mlp_weight, self.mlp_bias]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors())


GeneralEncoderParams = EncoderParams
QAttEncoderParams = EncoderParams
PAttEncoderParams = EncoderParams


def parameter_count(num_filters: int, kernel_size: int, dim: int, hidden: int) -> int:
    """F*k*d + F + F*H + H."""
    return num_filters * kernel_size * dim + num_filters + num_filters * hidden + hidden


@dataclass
class AttentionOutputs:
    h_list: list[Tensor]
    n_q: int


def _mlp(pooled: Tensor, params: EncoderParams) -> Tensor:
    return relu(matmul_last(pooled, params.mlp_weight) + params.mlp_bias)


def matmul_last(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., F] @ w[F, H]`` for vectors as well as batches."""
    if x.ndim == 1:
        return matmul(x.reshape(1, -1), w).reshape(w.shape[1])
    return matmul(x, w)


# ---------------------------------------------------------------------------
# per-instance, literal kernels
# ---------------------------------------------------------------------------


def encode_general(x: Tensor, params: EncoderParams) -> Tensor:
    """``mlp(max_pool(conv1d(x, W, b)))`` for one ``[len, d]`` sequence -> ``[H]``."""
    return _mlp(max_pool_over_time(conv1d(x, params.weight, params.bias)), params)


def make_qatt_kernel(u: Tensor, q_emb: Tensor) -> Tensor:
    """Inject a query token embedding into every kernel: ``out[f, i, c] = U[f, i, c] * q[c]``."""
    if q_emb.shape != (u.shape[-1],):
        raise PreconditionError(f"query embedding {q_emb.shape} does not match kernel depth {u.shape[-1]}")
    return u * q_emb


def encode_qatt(p_emb: Tensor, q_emb: Tensor, params: EncoderParams, n_q: int) -> AttentionOutputs:
    """One ``h_i`` per real query token, each from its own token-specific kernels."""
    h_list = []
    for i in range(n_q):
        kernel = make_qatt_kernel(params.weight, q_emb[i])
        h_list.append(_mlp(max_pool_over_time(conv1d(p_emb, kernel, params.bias)), params))
    return AttentionOutputs(h_list, n_q)


def patt_similarity(q_emb: Tensor, p_emb: Tensor, j: int, k: int, clamp: bool = False) -> Tensor:
    """Cosine of a query token against post tokens ``j .. j+k-1`` -> ``[k]``."""
    if j < 0 or j + k > p_emb.shape[0]:
        raise PreconditionError(f"window [{j}, {j + k}) is outside a post of length {p_emb.shape[0]}")
    sims = stack([cosine(q_emb, p_emb[j + i]) for i in range(k)])
    return relu(sims) if clamp else sims


def make_patt_kernel(v: Tensor, s_j: Tensor) -> Tensor:
    """Scale kernel row ``i`` by the window similarity: ``out[f, i, c] = V[f, i, c] * S_j[i]``."""
    if s_j.shape != (v.shape[1],):
        raise PreconditionError(f"similarity vector {s_j.shape} does not match kernel width {v.shape[1]}")
    return v * s_j.reshape(1, -1, 1)


def encode_patt(p_emb: Tensor, q_emb: Tensor, params: EncoderParams, n_q: int,
                clamp: bool = False) -> AttentionOutputs:
    """One ``h_i`` per real query token from position-specific kernels."""
    k = params.kernel_size
    positions = p_emb.shape[0] - k + 1
    if positions < 1:
        raise PreconditionError(f"post of length {p_emb.shape[0]} is shorter than window {k}; pad it")
    h_list = []
    for i in range(n_q):
        q = q_emb[i]
        kernels = stack([
            make_patt_kernel(params.weight, patt_similarity(q, p_emb, j, k, clamp)) for j in range(positions)
        ])
        conv = positionwise_conv1d(p_emb, kernels, params.bias)
        h_list.append(_mlp(max_pool_over_time(conv), params))
    return AttentionOutputs(h_list, n_q)


# ---------------------------------------------------------------------------
# batched, factorized
# ---------------------------------------------------------------------------


def window_mask(lengths: np.ndarray, width: int, k: int) -> np.ndarray:
    """``[B, width-k+1]`` mask of convolution positions that lie inside each sequence."""
    positions = np.arange(width - k + 1)
    return positions[None, :] < (np.asarray(lengths)[:, None] - k + 1)


def encode_general_batch(x: Tensor, lengths: np.ndarray, params: EncoderParams) -> Tensor:
    """``[B, len, d]`` padded batch -> ``[B, H]``; ``lengths`` are padded-to-k lengths."""
    conv = conv1d(x, params.weight, params.bias)
    mask = window_mask(lengths, x.shape[1], params.kernel_size)
    return _mlp(max_pool_over_time(conv, mask), params)


def encode_qatt_batch(p: Tensor, q: Tensor, post_lengths: np.ndarray, params: EncoderParams) -> Tensor:
    """``h`` for every query position: ``[B, m, d]`` x ``[B, n, d]`` -> ``[B, n, H]``."""
    k = params.kernel_size
    b, m, d = p.shape
    injected = p.reshape(b, 1, m, d) * q.reshape(b, q.shape[1], 1, d)  # [B, n, m, d]
    conv = conv1d(injected, params.weight, params.bias)
    mask = window_mask(post_lengths, p.shape[1], k)[:, None, :]
    mask = np.broadcast_to(mask, conv.shape[:-1])
    return _mlp(max_pool_over_time(conv, mask), params)


def encode_patt_batch(p: Tensor, q: Tensor, post_lengths: np.ndarray, params: EncoderParams,
                      clamp: bool = False) -> Tensor:
    """Position-aware ``h`` for every query position -> ``[B, n, H]``."""
    k = params.kernel_size
    sims = cosine_matrix(q, p)  # [B, n, m]
    if clamp:
        sims = relu(sims)
    b, n, m = sims.shape
    s_windows = unfold(sims.reshape(b, n, m, 1), k).reshape(b, n, m - k + 1, k, 1)
    windows = unfold(p, k)  # [B, L, k, d]
    scaled = windows.reshape(b, 1, m - k + 1, k, p.shape[2]) * s_windows  # cosine-weighted windows
    conv = einsum("bnltc,ftc->bnlf", scaled, params.weight) + params.bias
    mask = window_mask(post_lengths, p.shape[1], k)[:, None, :]
    mask = np.broadcast_to(mask, conv.shape[:-1])
    return _mlp(max_pool_over_time(conv, mask), params)
