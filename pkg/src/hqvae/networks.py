"""Bottom-up feature pyramid, top-down quantization layers and the decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import GELU_GAIN, Conv2d, ConvBlock, ConvTranspose2d, Module, ResBlock
from .quantization import Codebook, NoiseParam, QuantizationResult, sq_posterior, vq_nearest
from .tensor import Tensor


class PrefixDecodeError(RuntimeError):
    pass


def to_rows(x):
    """(N, C, h, w) -> (N*h*w, C)."""
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def from_rows(rows, n, h, w):
    c = rows.shape[1]
    return rows.reshape(n, h, w, c).transpose(0, 3, 1, 2)


@dataclass
class LayerOutput:
    zhat: Tensor  # encoder output quantized at this layer, NCHW
    z: Tensor  # code variable passed downstream (relaxed, hard or straight-through), NCHW
    codes: np.ndarray  # hard indices, (N, h*w)
    quant: QuantizationResult | None = None
    z_hard: np.ndarray | None = None  # code vectors of the hard assignment, NCHW


@dataclass
class ForwardResult:
    x: Tensor
    pyramid: list
    layers: list
    group_targets: list  # Y_hat_r per resolution group, NCHW
    group_sums: list  # sum of Z_l over the group, NCHW
    recon: Tensor | None = None
    st_offsets: list = field(default_factory=list)
    mode: str = "sample"


class HQVAE(Module):
    """One network covering all variants; layer kinds decide the top-down wiring."""

    def __init__(self, config: ModelConfig, rng=None):
        config.validate()
        self.config = config
        rng = rng or np.random.default_rng()
        c_in, size, _ = config.input_shape
        db, hid = config.d_b, config.hidden
        res = config.resolutions
        finest = res[-1]
        n_down = int(round(math.log2(size // finest)))

        # bottom-up: strided stem down to the finest latent grid, then pool upward
        stem = []
        ch = c_in
        for i in range(n_down):
            stem.append(Conv2d(ch, hid, 4, stride=2, padding=1, rng=rng, scale=GELU_GAIN if i > 1 else 1.0))
            ch = hid
        self.stem = stem
        self.stem_out = Conv2d(ch, db, 3, rng=rng, scale=GELU_GAIN if n_down > 1 else 1.0)
        self.bu_blocks = [[ResBlock(db, config.c_mid, rng=rng) for _ in range(config.n_res)] for _ in res]
        self.pool_factors = [res[i + 1] // res[i] for i in range(len(res) - 1)]

        # top-down: per injected group an upsampling conv and an encoding block
        self.up_convs = [Conv2d(db, db, 3, rng=rng) for _ in res[1:]]
        self.enc_blocks = [ConvBlock(2 * db, db, config.c_mid, rng=rng) for _ in res[1:]]

        # codebooks and dequantization variances
        ema = not config.stochastic
        if config.shared_codebook:
            shared = Codebook(config.layers[0].codebook_size, db, rng=rng, ema=ema)
            self.codebooks = [shared] * config.num_layers
        else:
            self.codebooks = [Codebook(l.codebook_size, db, rng=rng, ema=ema) for l in config.layers]
        self.noise = [NoiseParam(config.s2_init) for _ in config.layers] if config.stochastic else []

        # decoder
        self.dec_blocks = [ResBlock(db, config.c_mid, rng=rng) for _ in range(config.n_res)]
        self.dec_in = Conv2d(db, hid, 3, rng=rng, scale=GELU_GAIN)
        self.dec_up = [ConvTranspose2d(hid, hid, 4, stride=2, padding=1, rng=rng, scale=GELU_GAIN)
                       for _ in range(n_down)]
        self.dec_out = Conv2d(hid, c_in, 3, rng=rng, scale=GELU_GAIN)

    # parameters

    def named_parameters(self, prefix=""):
        out = {}
        seen = set()
        for name, p in super().named_parameters(prefix).items():
            if name.startswith("codebooks.") or name.startswith("noise."):
                continue
            out[name] = p
        for i, cb in enumerate(self.codebooks):
            if cb.vectors.requires_grad and id(cb) not in seen:
                out[f"codebook/{i + 1}/vectors"] = cb.vectors
                seen.add(id(cb))
        for i, n in enumerate(self.noise):
            out[f"codebook/{i + 1}/log_s2"] = n.log_s2
        return out

    def state_arrays(self):
        """Every array needed to rebuild the model, keyed by checkpoint name."""
        arrays = {}
        for name, p in super().named_parameters().items():
            if name.startswith("codebooks.") or name.startswith("noise."):
                continue
            arrays[f"net/{name}"] = p.data
        for i, cb in enumerate(self.codebooks):
            arrays[f"codebook/{i + 1}/vectors"] = cb.vectors.data
            if cb.ema:
                arrays[f"codebook/{i + 1}/cluster_size"] = cb.cluster_size
                arrays[f"codebook/{i + 1}/embed_sum"] = cb.embed_sum
        for i, n in enumerate(self.noise):
            arrays[f"codebook/{i + 1}/log_s2"] = n.log_s2.data
        return arrays

    def load_state_arrays(self, arrays):
        for name, p in super().named_parameters().items():
            if name.startswith("codebooks.") or name.startswith("noise."):
                continue
            p.data[...] = arrays[f"net/{name}"]
        for i, cb in enumerate(self.codebooks):
            cb.vectors.data[...] = arrays[f"codebook/{i + 1}/vectors"]
            if cb.ema:
                cb.cluster_size = arrays[f"codebook/{i + 1}/cluster_size"].copy()
                cb.embed_sum = arrays[f"codebook/{i + 1}/embed_sum"].copy()
        for i, n in enumerate(self.noise):
            n.log_s2.data[...] = arrays[f"codebook/{i + 1}/log_s2"]

    def s2_values(self):
        return [n.value() for n in self.noise]

    # bottom-up path

    def bottom_up(self, x):
        """Feature maps H^r(x), coarsest first, each with d_b channels."""
        x = T.as_tensor(x)
        c, size, _ = self.config.input_shape
        if x.ndim != 4 or x.shape[1:] != (c, size, size):
            raise T.ShapeError(f"bottom_up: expected input (N, {c}, {size}, {size}), got {x.shape}")
        h = x
        for conv in self.stem:
            h = T.gelu(conv(h)) if conv is not self.stem[0] else conv(h)
        h = self.stem_out(h)
        feats = [None] * len(self.bu_blocks)
        for r in range(len(self.bu_blocks) - 1, -1, -1):
            if r < len(self.bu_blocks) - 1:
                h = T.avg_pool2d(h, self.pool_factors[r])
            for blk in self.bu_blocks[r]:
                h = blk(h)
            feats[r] = h
        return feats

    # top-down path

    def upsample_state(self, group, state):
        return self.up_convs[group - 1](T.upsample_nearest(state, self.pool_factors[group - 1]))

    def injected_target(self, group, feature, state):
        """Y_hat_r = G(H^r(x), upsampled top-down state) for an injected layer."""
        up = self.upsample_state(group, state)
        if up.shape != feature.shape:
            raise T.ShapeError(f"injected layer: state {up.shape} misaligned with feature {feature.shape}")
        return self.enc_blocks[group - 1](T.concat([up, feature], axis=1)), up

    def _quantize(self, layer, zhat, mode, tau, rng, frozen):
        """Return (z, codes, quant, z_hard) for one layer."""
        n, _, h, w = zhat.shape
        cb = self.codebooks[layer]
        rows = to_rows(zhat)
        if mode == "sample":
            q = sq_posterior(rows, cb, self.noise[layer], tau=tau, rng=rng)
            hard_vec = cb.vectors.data[q.hard_codes]
            return from_rows(q.soft_codes, n, h, w), q.hard_codes.reshape(n, h * w), q, \
                from_rows(Tensor(hard_vec), n, h, w).data
        if frozen is not None:
            codes = frozen.layers[layer].codes.reshape(-1)
        else:
            codes = vq_nearest(rows.data, cb.vectors.data)
        q = None
        if mode == "hard" and self.config.stochastic:
            q = sq_posterior(rows, cb, self.noise[layer])
        vec = cb.vectors.data[codes]
        z = from_rows(Tensor(vec), n, h, w)
        return z, codes.reshape(n, h * w), q, z.data

    def encode(self, x, mode="sample", tau=1.0, rng=None, frozen=None, pyramid=None):
        """Top-down posterior pass.

        ``mode``: "sample" draws relaxed codes from the stochastic quantizer;
        "hard" uses the argmax / nearest code (evaluation and deterministic
        baselines); "st" is "hard" with straight-through gradients.
        ``frozen`` reuses code assignments and straight-through offsets from an
        earlier pass, turning the stop-gradient surrogate into a smooth function.
        """
        cfg = self.config
        x = T.as_tensor(x)
        feats = pyramid if pyramid is not None else self.bottom_up(x)
        layers, targets, sums, offsets = [], [], [], []
        state = None
        for g, idx in enumerate(cfg.groups):
            if g == 0:
                target = feats[0]
                up = None
            else:
                target, up = self.injected_target(g, feats[g], state)
            running = None
            for li in idx:
                if running is None:
                    zhat = target
                elif mode == "sample":
                    zhat = target - running
                else:
                    zhat = Tensor(target.data - running.data)  # residuals below stop-gradient
                z, codes, q, zh = self._quantize(li, zhat, mode, tau, rng, frozen)
                layers.append(LayerOutput(zhat, z, codes, q, zh))
                running = z if running is None else running + z
            if mode == "st":
                if frozen is not None:
                    off = frozen.st_offsets[g]
                else:
                    off = running.data - target.data
                offsets.append(off)
                y = target + Tensor(off)
            else:
                y = running
            targets.append(target)
            sums.append(running)
            state = y if up is None else up + y
        fr = ForwardResult(x, feats, layers, targets, sums, st_offsets=offsets, mode=mode)
        fr.recon = self._decode_state(state)
        return fr

    # decoder

    def _decode_state(self, state):
        h = state
        for blk in self.dec_blocks:
            h = blk(h)
        h = self.dec_in(T.gelu(h))
        for up in self.dec_up:
            h = up(T.gelu(h))
        return self.dec_out(T.gelu(h))

    def decode(self, codes, upto=None):
        """f_theta(Z_{1:L}) from per-layer code variables (NCHW tensors or index arrays).

        ``upto`` decodes the prefix Z_{1:upto}; later layers are replaced by zeros.
        Prefix decoding is valid for progressive models and for purely residual
        hierarchies.
        """
        cfg = self.config
        L = cfg.num_layers
        upto = L if upto is None else upto
        if not 1 <= upto <= L:
            raise ValueError(f"prefix length must lie in [1, {L}]")
        residual_only = all(l.kind != "injected" for l in cfg.layers)
        if upto < L and not (cfg.progressive or residual_only):
            raise PrefixDecodeError("prefix decoding requires a progressive or residual-only model")
        zs = [self._as_code_tensor(i, c) for i, c in enumerate(codes)]
        state = None
        for g, idx in enumerate(cfg.groups):
            y = None
            for li in idx:
                if li >= upto:
                    continue
                y = zs[li] if y is None else y + zs[li]
            if y is None:
                r = cfg.layers[idx[0]].resolution
                n = zs[0].shape[0]
                y = Tensor(np.zeros((n, cfg.d_b, r, r), dtype=zs[0].data.dtype))
            state = y if g == 0 else self.upsample_state(g, state) + y
        return self._decode_state(state)

    def _as_code_tensor(self, layer, c):
        if isinstance(c, Tensor):
            return c
        c = np.asarray(c)
        r = self.config.layers[layer].resolution
        if np.issubdtype(c.dtype, np.integer):
            vec = self.codebooks[layer].vectors.data[c.reshape(-1)]
            return from_rows(Tensor(vec), c.shape[0], r, r)
        return Tensor(c)

    def reconstruct(self, x, upto=None):
        """Deterministic reconstruction with hard assignments (evaluation path)."""
        with T.no_grad():
            fr = self.encode(x, mode="hard")
            if upto is None or upto == self.config.num_layers:
                return fr.recon.data, fr
            return self.decode([l.z for l in fr.layers], upto=upto).data, fr


def sample_prior(config, rng, n=1):
    """Uniform i.i.d. code indices per site: list of (n, d_l) arrays."""
    return [rng.integers(0, l.codebook_size, size=(n, l.resolution * l.resolution)) for l in config.layers]


def top_down_residual(feature, previous):
    """H(x) - sum of the previous code variables."""
    out = T.as_tensor(feature)
    for z in previous:
        if z.shape != out.shape:
            raise T.ShapeError(f"residual layer: code {z.shape} vs feature {out.shape}")
        out = out - z
    return out
