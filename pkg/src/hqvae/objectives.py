"""Training objectives: HQ-VAE ELBOs, deterministic baseline losses, sigma^2 and codebook upkeep.

All objectives are per-sample values averaged over the batch.  Each returns a
LossBreakdown whose ``total`` is a differentiable scalar Tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .networks import to_rows
from .tensor import Tensor


class NumericAbort(FloatingPointError):
    """A loss term became non-finite; ``term`` names it."""

    def __init__(self, term, value):
        super().__init__(f"non-finite loss term {term!r} (value {value})")
        self.term = term


@dataclass
class LossBreakdown:
    total: Tensor
    recon: list  # reconstruction terms, one per decoded prefix
    log_sigma: float  # sum of (D/2) log sigma^2 terms (constants w.r.t. parameters)
    gaps: list  # quantization-gap terms (per layer or per resolution group)
    entropies: list  # -H terms per layer (nonpositive)
    diagnostics: dict = field(default_factory=dict)

    def parts(self):
        out = {"log_sigma": self.log_sigma}
        for i, r in enumerate(self.recon):
            out[f"recon_{i + 1}"] = float(r.data)
        for i, g in enumerate(self.gaps):
            out[f"gap_{i + 1}"] = float(g.data)
        for i, e in enumerate(self.entropies):
            out[f"neg_entropy_{i + 1}"] = float(e.data)
        return out

    def value(self):
        return float(self.total.data)

    def check_finite(self):
        for name, v in self.parts().items():
            if not math.isfinite(v):
                raise NumericAbort(name, v)
        if not math.isfinite(self.value()):
            raise NumericAbort("total", self.value())
        return self


def _batch(fr):
    return fr.x.shape[0]


def _sqnorm(t):
    return (t * t).sum()


def _assemble(recon, log_sigma, gaps, entropies, diag):
    total = Tensor(np.array(log_sigma, dtype=T.get_dtype()))
    for term in [*recon, *gaps, *entropies]:
        total = total + term
    return LossBreakdown(total, recon, log_sigma, gaps, entropies, diag).check_finite()


def gaussian_recon(x, recon, sigma2, v=0.0):
    """Return ((D/2) log sigma^2, batch mean of ||x - f + D v||^2 / (2 sigma^2))."""
    n = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    diff = x - recon
    if v:
        diff = diff + d * v
    return 0.5 * d * math.log(sigma2), _sqnorm(diff) * (1.0 / (2.0 * sigma2 * n))


def _entropy_terms(fr):
    n = _batch(fr)
    return [lo.quant.entropy_sum * (-1.0 / n) for lo in fr.layers]


def _s2(model, i):
    return model.noise[i].s2


def _require(model, variants, name):
    if model.config.variant not in variants:
        raise ValueError(f"{name} applies to {variants}, model variant is {model.config.variant!r}")


def _diag(model, sigma2, tau=None):
    d = {"sigma2": sigma2, "s2": [n.value() for n in model.noise]}
    if tau is not None:
        d["tau"] = tau
    return d


def elbo_sqvae2(fr, model, sigma2, tau=None):
    """Per-layer gap ||Z~_l - Z_l||^2 / (2 s_l^2) with Z~_l = Z^_l, minus entropies."""
    cfg = model.config
    if any(len(g) != 1 for g in cfg.groups):
        raise ValueError("elbo_sqvae2 needs one layer per resolution (injected layers only)")
    n = _batch(fr)
    log_sigma, rec = gaussian_recon(fr.x, fr.recon, sigma2)
    gaps = [_sqnorm(lo.zhat - lo.z) / (_s2(model, i) * (2.0 * n)) for i, lo in enumerate(fr.layers)]
    return _assemble([rec], log_sigma, gaps, _entropy_terms(fr), _diag(model, sigma2, tau))


def elbo_rsqvae(fr, model, sigma2, tau=None):
    """Single gap ||H(x) - sum_l Z_l||^2 / (2 sum_l s_l^2), minus entropies."""
    cfg = model.config
    if len(cfg.groups) != 1:
        raise ValueError("elbo_rsqvae needs a single resolution (residual layers only)")
    n = _batch(fr)
    log_sigma, rec = gaussian_recon(fr.x, fr.recon, sigma2)
    s2_total = _s2(model, 0)
    for i in range(1, cfg.num_layers):
        s2_total = s2_total + _s2(model, i)
    z_sum = fr.layers[0].z
    for lo in fr.layers[1:]:
        z_sum = z_sum + lo.z
    gap = _sqnorm(fr.group_targets[0] - z_sum) / (s2_total * (2.0 * n))
    return _assemble([rec], log_sigma, [gap], _entropy_terms(fr), _diag(model, sigma2, tau))


def elbo_rsqvae_naive(fr, model, sigma2, tau=None):
    """Per-layer gaps on every partial residual H(x) - sum_{l' <= l} Z_l' over s_l^2."""
    cfg = model.config
    if len(cfg.groups) != 1:
        raise ValueError("elbo_rsqvae_naive needs a single resolution (residual layers only)")
    n = _batch(fr)
    log_sigma, rec = gaussian_recon(fr.x, fr.recon, sigma2)
    gaps = []
    residual = fr.group_targets[0]
    for i, lo in enumerate(fr.layers):
        residual = residual - lo.z
        gaps.append(_sqnorm(residual) / (_s2(model, i) * (2.0 * n)))
    return _assemble([rec], log_sigma, gaps, _entropy_terms(fr), _diag(model, sigma2, tau))


def _group_gaps(fr, model, groups):
    n = _batch(fr)
    gaps = []
    for g, idx in enumerate(groups):
        y = None
        s2 = None
        for i in idx:
            z = fr.layers[i].z
            y = z if y is None else y + z
            s2 = _s2(model, i) if s2 is None else s2 + _s2(model, i)
        gaps.append(_sqnorm(fr.group_targets[g] - y) / (s2 * (2.0 * n)))
    return gaps


def elbo_hybrid(fr, model, sigma2, tau=None, groups=None):
    """Per-resolution gap ||Y^_r - sum_{l in l_r} Z_l||^2 / (2 sum_{l in l_r} s_l^2)."""
    groups = groups or model.config.groups
    if sorted(i for g in groups for i in g) != list(range(model.config.num_layers)):
        raise ValueError("grouping must partition the layers")
    log_sigma, rec = gaussian_recon(fr.x, fr.recon, sigma2)
    gaps = _group_gaps(fr, model, groups)
    return _assemble([rec], log_sigma, gaps, _entropy_terms(fr), _diag(model, sigma2, tau))


def elbo_progressive(fr, model, sigma2s, tau=None, v=None):
    """Sum over resolutions of prefix reconstructions f(Z_{1:L_r}) with their own sigma_r^2.

    ``sigma2s=None`` sets each sigma_r^2 to its maximum-likelihood value from
    the batch, clipped by a running minimum so the sequence stays non-increasing.
    """
    cfg = model.config
    groups = cfg.groups
    zs = [lo.z for lo in fr.layers]
    recons = []
    for idx in groups:
        upto = idx[-1] + 1
        recons.append(fr.recon if upto == cfg.num_layers else model.decode(zs, upto=upto))
    if sigma2s is None:
        sigma2s = []
        for recon in recons:
            s = update_sigma2(batch_mse(fr.x, recon))
            sigma2s.append(min(s, sigma2s[-1]) if sigma2s else s)
    if len(sigma2s) != len(groups):
        raise ValueError(f"need one sigma^2 per resolution ({len(groups)}), got {len(sigma2s)}")
    if any(b > a for a, b in zip(sigma2s, sigma2s[1:])):
        raise ValueError(f"progressive sigma^2 sequence must be non-increasing, got {list(sigma2s)}")
    v = v if v is not None else [0.0] * len(groups)
    log_sigma, recs = 0.0, []
    for r, recon in enumerate(recons):
        ls, rec = gaussian_recon(fr.x, recon, sigma2s[r], v[r])
        log_sigma += ls
        recs.append(rec)
    gaps = _group_gaps(fr, model, groups)
    diag = _diag(model, list(sigma2s), tau)
    return _assemble(recs, log_sigma, gaps, _entropy_terms(fr), diag)


def _commitment(fr, groups, beta):
    """beta * sum over layers of ||Y^_r - sg[partial sum of the group's codes]||^2."""
    n = _batch(fr)
    terms = []
    for g, idx in enumerate(groups):
        partial = None
        for i in idx:
            zh = fr.layers[i].z_hard
            partial = zh if partial is None else partial + zh
            terms.append(_sqnorm(fr.group_targets[g] - Tensor(partial)) * (beta / n))
    return terms


def _baseline_loss(fr, model, beta):
    n = _batch(fr)
    rec = _sqnorm(fr.x - fr.recon) * (1.0 / n)
    gaps = _commitment(fr, model.config.groups, beta)
    return _assemble([rec], 0.0, gaps, [], {"beta": beta})


def loss_vqvae(fr, model, beta=None):
    """||x - f(Z)||^2 + beta ||Z^ - sg[Z]||^2."""
    _require(model, ("vqvae",), "loss_vqvae")
    return _baseline_loss(fr, model, model.config.beta if beta is None else beta)


def loss_vqvae2(fr, model, beta=None):
    """||x - f(Z_{1:L})||^2 + beta sum_l ||G^l - sg[Z_l]||^2."""
    _require(model, ("vqvae2", "vqvae"), "loss_vqvae2")
    return _baseline_loss(fr, model, model.config.beta if beta is None else beta)


def loss_rqvae(fr, model, beta=None):
    """||x - f(Z_{1:L})||^2 + beta sum_l ||H(x) - sg[sum_{l' <= l} Z_l']||^2."""
    _require(model, ("rqvae", "vqvae"), "loss_rqvae")
    return _baseline_loss(fr, model, model.config.beta if beta is None else beta)


def update_sigma2(mse_per_dim, floor=1e-6):
    """Closed-form maximizer of the Gaussian likelihood: sigma^2 = mean squared error per dimension."""
    return max(floor, float(mse_per_dim))


def batch_mse(x, recon):
    x = x.data if isinstance(x, Tensor) else x
    recon = recon.data if isinstance(recon, Tensor) else recon
    return float(np.mean((np.asarray(x, np.float64) - recon) ** 2))


def ema_step(fr, model):
    """EMA codebook update from the batch's hard assignments (baselines only)."""
    decay = model.config.ema_decay
    pooled = {}
    for i, lo in enumerate(fr.layers):
        cb = model.codebooks[i]
        feats, codes = pooled.setdefault(id(cb), (cb, [], []))[1:]
        feats.append(to_rows(lo.zhat).data)
        codes.append(lo.codes.reshape(-1))
    for cb, feats, codes in pooled.values():
        cb.ema_update(np.concatenate(feats), np.concatenate(codes), decay)


def codebook_reset(codebook, features, rng, threshold=1.0):
    """Re-seed codes whose EMA cluster size fell below ``threshold`` from random feature rows.

    Returns the indices that were reset.
    """
    features = np.asarray(features, dtype=np.float64).reshape(-1, codebook.dim)
    if len(features) == 0:
        raise ValueError("codebook_reset: empty feature batch")
    dead = np.flatnonzero(codebook.cluster_size < threshold)
    if len(dead):
        rows = features[rng.choice(len(features), len(dead), replace=len(features) < len(dead))]
        codebook.vectors.data[dead] = rows
        codebook.cluster_size[dead] = 1.0
        codebook.embed_sum[dead] = rows
    return dead


def reset_step(fr, model, rng):
    """Apply codebook_reset to every distinct codebook with features of the layers using it."""
    pooled = {}
    for i, lo in enumerate(fr.layers):
        cb = model.codebooks[i]
        pooled.setdefault(id(cb), (cb, []))[1].append(to_rows(lo.zhat).data)
    return sum(len(codebook_reset(cb, np.concatenate(f), rng, model.config.reset_threshold))
               for cb, f in pooled.values())


def objective(fr, model, sigma2, tau=None):
    """Dispatch to the objective that matches the model variant."""
    cfg = model.config
    v = cfg.variant
    if cfg.progressive:
        if sigma2 is None or isinstance(sigma2, (list, tuple)):
            return elbo_progressive(fr, model, sigma2, tau)
        return elbo_progressive(fr, model, [sigma2] * len(cfg.groups), tau)
    if v == "sqvae2":
        return elbo_sqvae2(fr, model, sigma2, tau)
    if v == "rsqvae":
        if cfg.objective == "naive":
            return elbo_rsqvae_naive(fr, model, sigma2, tau)
        return elbo_rsqvae(fr, model, sigma2, tau)
    if v == "hybrid":
        return elbo_hybrid(fr, model, sigma2, tau)
    if v == "vqvae2":
        return loss_vqvae2(fr, model)
    if v == "rqvae":
        return loss_rqvae(fr, model)
    return loss_vqvae(fr, model)
