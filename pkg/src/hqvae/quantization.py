"""Codebooks, stochastic and deterministic quantizers, and usage statistics.

Operators take row-major feature matrices of shape (M, d_b), one row per
latent site; callers flatten spatial grids before quantizing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import Tensor


class Codebook(Module):
    """K trainable d_b-dimensional code vectors.

    With ``ema=True`` the vectors are updated by exponential moving averages
    outside of gradient descent (deterministic baselines) and are excluded from
    ``parameters()``.
    """

    def __init__(self, size, dim, rng=None, ema=False):
        if size < 1 or dim < 1:
            raise ValueError(f"codebook needs K >= 1 and d_b >= 1, got K={size}, d_b={dim}")
        rng = rng or np.random.default_rng()
        init = rng.standard_normal((size, dim)) / math.sqrt(dim)
        self.vectors = param(init)
        self.ema = ema
        if ema:
            self.vectors.requires_grad = False
            self.cluster_size = np.ones(size)
            self.embed_sum = self.vectors.data.astype(np.float64).copy()

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def kmeans_init(self, features, iters=10, rng=None):
        """Warm-start the vectors with Lloyd iterations on a feature sample."""
        rng = rng or np.random.default_rng()
        x = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        centers = x[rng.choice(len(x), self.size, replace=len(x) < self.size)].copy()
        for _ in range(iters):
            assign = vq_nearest(x, centers)
            for k in range(self.size):
                members = x[assign == k]
                if len(members):
                    centers[k] = members.mean(0)
        self.vectors.data[...] = centers
        if self.ema:
            self.cluster_size[:] = 1.0
            self.embed_sum[...] = centers

    def ema_update(self, features, codes, decay):
        """N_k <- g N_k + (1-g) n_k ; m_k <- g m_k + (1-g) sum(assigned) ; b_k = m_k / N_k."""
        if not self.ema:
            raise RuntimeError("EMA update on a gradient-trained codebook")
        x = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        onehot = np.zeros((len(x), self.size))
        onehot[np.arange(len(x)), np.asarray(codes).reshape(-1)] = 1.0
        self.cluster_size = decay * self.cluster_size + (1 - decay) * onehot.sum(0)
        self.embed_sum = decay * self.embed_sum + (1 - decay) * onehot.T @ x
        self.vectors.data[...] = self.embed_sum / np.maximum(self.cluster_size, 1e-12)[:, None]


class NoiseParam(Module):
    """Dequantization variance s^2 = exp(log_s2), always positive."""

    def __init__(self, init=1.0):
        if init <= 0:
            raise ValueError("s^2 must be positive")
        self.init = float(init)
        self.log_s2 = param(np.array(math.log(init)))

    @property
    def s2(self):
        return T.exp(self.log_s2)

    def value(self):
        return float(np.exp(self.log_s2.data))


@dataclass
class TemperatureSchedule:
    """tau(t) = max(floor, exp(-rate * t))."""

    floor: float = 0.0
    rate: float = 1e-5
    step: int = 0

    def tau(self, t=None):
        t = self.step if t is None else t
        return max(self.floor, math.exp(-self.rate * t))

    def advance(self):
        self.step += 1


@dataclass
class QuantizationResult:
    probs: Tensor
    log_probs: Tensor
    soft_codes: Tensor
    hard_codes: np.ndarray
    entropy_sum: Tensor
    weights: Tensor | None = None

    @property
    def num_sites(self):
        return self.probs.shape[0]


def _as_matrix(z):
    z = T.as_tensor(z)
    if z.ndim != 2:
        raise T.ShapeError(f"quantizer expects (sites, d_b) features, got {z.shape}")
    return z


def sq_logits(ztilde, vectors, s2):
    """-||z_i - b_k||^2 / (2 s^2) as a differentiable (M, K) tensor."""
    z = _as_matrix(ztilde)
    b = T.as_tensor(vectors)
    if z.shape[1] != b.shape[1]:
        raise T.ShapeError(f"sq_posterior: feature dim {z.shape[1]} != codebook dim {b.shape[1]}")
    if not np.all(np.isfinite(z.data)):
        raise ValueError("sq_posterior: non-finite feature")
    zz = (z * z).sum(axis=1, keepdims=True)
    bb = (b * b).sum(axis=1).reshape(1, -1)
    dist = zz - 2.0 * (z @ b.transpose()) + bb
    return dist * (-0.5) / s2


def entropy_rows(log_probs):
    """Row-wise Shannon entropy in nats from log-probabilities."""
    return -(T.exp(log_probs) * log_probs).sum(axis=1)


def sq_posterior(ztilde, codebook, s2, tau=None, rng=None):
    """Stochastic quantization P(z_i = b_k) proportional to exp(-||z_i - b_k||^2 / 2s^2).

    ``s2`` is a Tensor, a NoiseParam or a float.  When ``tau`` is given a
    Gumbel-softmax relaxed sample is drawn and ``soft_codes`` is the
    corresponding mixture of code vectors; otherwise ``soft_codes`` uses the
    hard argmax assignment.
    """
    vectors = codebook.vectors if isinstance(codebook, Codebook) else T.as_tensor(codebook)
    if isinstance(s2, NoiseParam):
        s2 = s2.s2
    s2 = T.as_tensor(s2)
    if np.any(s2.data <= 0):
        raise ValueError("sq_posterior: s^2 must be positive")
    logits = sq_logits(ztilde, vectors, s2)
    log_p = T.log_softmax(logits, axis=1)
    probs = T.exp(log_p)
    hard = np.argmax(log_p.data, axis=1)
    ent = (-(probs * log_p)).sum()
    if tau is not None:
        weights = gumbel_softmax_sample(log_p, tau, rng)
        soft = weights @ vectors
    else:
        weights = None
        soft = T.as_tensor(vectors.data[hard])
    return QuantizationResult(probs, log_p, soft, hard, ent, weights)


def gumbel_softmax_sample(log_probs, tau, rng):
    """Relaxed one-hot rows softmax((log p + g) / tau), g ~ Gumbel(0, 1)."""
    if tau <= 0:
        raise ValueError(f"Gumbel-softmax temperature must be positive, got {tau}")
    log_probs = T.as_tensor(log_probs)
    u = rng.random(log_probs.shape)
    g = -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12)))
    g = g.astype(log_probs.data.dtype)
    return T.softmax((log_probs + g) * (1.0 / tau), axis=1)


def dequantize(codes, s2, rng):
    """Z + s * eps with eps standard normal."""
    codes = np.asarray(codes, dtype=np.float64)
    if s2 == 0:
        return codes.copy()
    return codes + math.sqrt(s2) * rng.standard_normal(codes.shape)


def sq_distances(z, vectors):
    """Exact squared distances (M, K) by explicit differences (no expansion round-off)."""
    z = np.asarray(z, dtype=np.float64)
    b = np.asarray(vectors, dtype=np.float64)
    out = np.empty((len(z), len(b)))
    step = max(1, 2_000_000 // max(1, b.size))
    for i in range(0, len(z), step):
        d = z[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = np.einsum("mkd,mkd->mk", d, d)
    return out


def vq_nearest(ztilde, codebook):
    """Index of the nearest code vector per row; ties go to the lowest index."""
    vectors = codebook.vectors.data if isinstance(codebook, Codebook) else np.asarray(
        codebook.data if isinstance(codebook, Tensor) else codebook)
    if vectors.shape[0] == 0:
        raise ValueError("vq_nearest: empty codebook")
    z = np.asarray(ztilde.data if isinstance(ztilde, Tensor) else ztilde)
    if z.shape[-1] != vectors.shape[1]:
        raise T.ShapeError(f"vq_nearest: feature dim {z.shape[-1]} != codebook dim {vectors.shape[1]}")
    return np.argmin(sq_distances(z.reshape(-1, vectors.shape[1]), vectors), axis=1)


def rq_encode(ztilde, codebooks, num_layers):
    """Deterministic residual quantization.

    Returns (codes, quantized, residual_norms): per-layer index arrays,
    per-layer code vectors Z_l, and the Frobenius norm of each residual R_l.
    A single Codebook is reused for every layer.
    """
    if num_layers < 1:
        raise ValueError("rq_encode needs at least one layer")
    if not isinstance(codebooks, (list, tuple)):
        codebooks = [codebooks] * num_layers
    residual = np.array(ztilde.data if isinstance(ztilde, Tensor) else ztilde, dtype=np.float64)
    codes, quantized, norms = [], [], []
    for layer in range(num_layers):
        cb = codebooks[layer]
        vectors = cb.vectors.data if isinstance(cb, Codebook) else np.asarray(cb)
        idx = vq_nearest(residual, vectors)
        z = vectors[idx].astype(np.float64)
        residual = residual - z
        codes.append(idx)
        quantized.append(z)
        norms.append(float(np.linalg.norm(residual)))
    return codes, quantized, norms


def code_histogram(codes, size):
    return np.bincount(np.asarray(codes).reshape(-1), minlength=size).astype(np.float64)


def perplexity(histogram):
    """exp of the Shannon entropy (nats) of a usage histogram."""
    h = np.asarray(histogram, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("perplexity: negative counts")
    total = h.sum()
    if total <= 0:
        raise ValueError("perplexity: empty histogram")
    p = h[h > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
