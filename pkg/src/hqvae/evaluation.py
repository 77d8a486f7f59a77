"""Reconstruction metrics, codebook usage, RD sweeps and progressive dumps."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .networks import sample_prior
from .quantization import code_histogram, perplexity

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class EvalReport:
    split: str
    n: int
    rmse: float  # x 10^2
    ssim: float
    perplexity: list
    s2_ratio: list | None
    entropy_per_site: list | None
    bits: float
    histograms: list

    def to_dict(self):
        d = asdict(self)
        d["histograms"] = [h.tolist() for h in self.histograms]
        return d

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


# SSIM


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim(x, y, data_range=1.0):
    """Mean windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03) over images and channels.

    Accepts C x H x W or N x C x H x W arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise T.ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise T.ShapeError(f"ssim: images must be at least {SSIM_WINDOW}px")
    g = _gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def _ssim_per_image(x, y):
    return np.array([ssim(a, b) for a, b in zip(x, y)])


# evaluation


def evaluate(model, images, batch_size=100, split="test"):
    """Deterministic (hard-assignment) metrics over one split."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError(f"cannot evaluate on an empty {split} split")
    cfg = model.config
    dtype = model.codebooks[0].vectors.data.dtype
    sq, ss = 0.0, 0.0
    hists = [np.zeros(l.codebook_size) for l in cfg.layers]
    ent = np.zeros(cfg.num_layers)
    sites = np.zeros(cfg.num_layers)
    with T.precision(dtype):
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size].astype(dtype, copy=False)
            recon, fr = model.reconstruct(x)
            sq += float(((x.astype(np.float64) - recon) ** 2).sum())
            ss += float(_ssim_per_image(x, np.clip(recon, 0, 1)).sum()) if x.shape[-1] >= SSIM_WINDOW else math.nan
            for li, lo in enumerate(fr.layers):
                hists[li] += code_histogram(lo.codes, cfg.layers[li].codebook_size)
                if lo.quant is not None:
                    ent[li] += float(lo.quant.entropy_sum.data)
                    sites[li] += lo.codes.size
    n = len(images)
    rmse = math.sqrt(sq / images.size) * 100
    stochastic = cfg.stochastic
    return EvalReport(
        split=split, n=n, rmse=rmse, ssim=ss / n,
        perplexity=[perplexity(h) for h in hists],
        s2_ratio=[nz.value() / nz.init for nz in model.noise] if stochastic else None,
        entropy_per_site=list(ent / sites) if stochastic else None,
        bits=cfg.bits(), histograms=hists,
    )


# RD sweep

RD_FIELDS = ["label", "variant", "L", "K", "bits", "seed", "rmse", "ssim"]


def _train_and_eval(args):
    from .trainer import train

    label, config, dataset = args
    tr = train(config, dataset["train"], dataset["val"] if len(dataset["val"]) else None)
    rep = evaluate(tr.model, dataset["test"])
    return label, config, rep


def rd_sweep(configs, dataset, out_csv, seeds=(0,), jobs=1):
    """Train every (label, RunConfig) pair for each seed and write per-run and summary CSVs.

    Returns (rows, summary) lists of dicts; ``out_csv`` receives the rows and
    ``<stem>_summary.csv`` the per-label mean and sample standard deviation.
    """
    tasks = []
    for label, cfg in configs:
        for s in seeds:
            c = type(cfg).from_dict(cfg.to_dict())
            c.train.seed = s
            tasks.append((label, c, dataset))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_train_and_eval, tasks))
    else:
        results = [_train_and_eval(t) for t in tasks]
    max_l = max(c.model.num_layers for _, c in configs)
    rows = []
    for label, c, rep in results:
        row = {"label": label, "variant": c.model.variant, "L": c.model.num_layers,
               "K": "/".join(str(l.codebook_size) for l in c.model.layers),
               "bits": rep.bits, "seed": c.train.seed, "rmse": rep.rmse, "ssim": rep.ssim}
        row.update({f"perplexity_{i + 1}": p for i, p in enumerate(rep.perplexity)})
        rows.append(row)
    fields = RD_FIELDS + [f"perplexity_{i + 1}" for i in range(max_l)]
    _write_csv(out_csv, fields, rows)
    summary = summarize(rows, max_l)
    out = Path(out_csv)
    sfields = ["label", "variant", "L", "K", "bits", "n"] + \
        [f"{m}_{s}" for m in ["rmse", "ssim"] + [f"perplexity_{i + 1}" for i in range(max_l)] for s in ("mean", "std")]
    _write_csv(out.with_name(out.stem + "_summary.csv"), sfields, summary)
    return rows, summary


def summarize(rows, max_l):
    groups = {}
    for r in rows:
        groups.setdefault(r["label"], []).append(r)
    out = []
    for label, rs in groups.items():
        s = {k: rs[0][k] for k in ("label", "variant", "L", "K", "bits")}
        s["n"] = len(rs)
        for m in ["rmse", "ssim"] + [f"perplexity_{i + 1}" for i in range(max_l)]:
            vals = np.array([r[m] for r in rs if r.get(m) is not None], dtype=np.float64)
            s[f"{m}_mean"] = float(vals.mean()) if len(vals) else None
            s[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else None)
        out.append(s)
    return out


def _write_csv(path, fields, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in fields})


# images


def save_png(images, path, nrow=None):
    """Tile N x C x H x W images in [0, 1] into one PNG."""
    from PIL import Image

    images = np.clip(np.asarray(images, dtype=np.float64), 0, 1)
    n, c, h, w = images.shape
    nrow = nrow or n
    ncol = math.ceil(n / nrow)
    grid = np.zeros((ncol * h, nrow * w, c))
    for i, im in enumerate(images):
        r, q = divmod(i, nrow)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = im.transpose(1, 2, 0)
    pix = np.round(grid * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pix[..., 0] if c == 1 else pix).save(path)
    return path


def progressive_dump(model, images, out_dir=None, magnify=4.0):
    """Prefix reconstructions f(Z_{1:l}) and the per-layer additions.

    Returns a dict with ``prefixes`` (L arrays), ``deltas`` (L-1 arrays),
    ``prefix_mse`` and ``telescoping_error``; writes PNGs when ``out_dir`` is given.
    Raises PrefixDecodeError for models without valid prefix decoding.
    """
    images = np.asarray(images)
    L = model.config.num_layers
    dtype = model.codebooks[0].vectors.data.dtype
    with T.precision(dtype):
        x = images.astype(dtype, copy=False)
        full, fr = model.reconstruct(x)
        prefixes = []
        with T.no_grad():
            zs = [lo.z for lo in fr.layers]
            for l in range(1, L + 1):
                prefixes.append(full if l == L else model.decode(zs, upto=l).data)
    deltas = [prefixes[l] - prefixes[l - 1] for l in range(1, L)]
    rebuilt = prefixes[0] + sum(deltas) if deltas else prefixes[0]
    out = {
        "prefixes": prefixes,
        "deltas": deltas,
        "prefix_mse": [float(((x.astype(np.float64) - p) ** 2).mean()) for p in prefixes],
        "telescoping_error": float(np.abs(rebuilt - full).max()),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_png(images, out_dir / "input.png")
        for l, p in enumerate(prefixes, start=1):
            save_png(p, out_dir / f"prefix_{l}.png")
        for l, d in enumerate(deltas, start=2):
            save_png(0.5 + magnify * d, out_dir / f"delta_{l}.png")
    return out


def sample_images(model, n, rng):
    """Decode uniform prior samples."""
    codes = sample_prior(model.config, rng, n)
    dtype = model.codebooks[0].vectors.data.dtype
    with T.precision(dtype), T.no_grad():
        return model.decode(codes).data
