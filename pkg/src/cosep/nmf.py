"""Supervised-bases NMF separation baseline.

Per-category spectral bases are learned from solo training clips with
multiplicative generalized-KL updates (columns L1-normalized after each
sweep, with the scale folded into the activations so the divergence is
untouched).  Separation fixes the concatenated bases, fits activations
on the mixture magnitude, and emits Wiener-style ratio masks.
"""

from __future__ import annotations

import numpy as np

from . import dsp, toyworld
from .checkpoint import load_tensors, save_tensors

EPS = 1e-12


def kl_divergence(v: np.ndarray, wh: np.ndarray) -> float:
    """Generalized KL divergence D(V || WH), with 0*log(0) treated as 0."""
    term = np.where(v > 0, v * np.log((v + EPS) / (wh + EPS)), 0.0)
    return float(np.sum(term - v + wh))


def _mu_update_h(v, w, h):
    return h * (w.T @ (v / (w @ h + EPS))) / (w.T.sum(axis=1, keepdims=True) + EPS)


def _mu_update_w(v, w, h):
    return w * ((v / (w @ h + EPS)) @ h.T) / (h.sum(axis=1, keepdims=True).T + EPS)


def nmf_fit(magnitudes, rank: int, iters: int = 200, seed: int = 0):
    """Factor stacked category magnitudes; returns (W, divergence history).

    ``magnitudes`` is one [bins, frames] array or a list of them
    (concatenated along time).  Columns of W are L1-normalized.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if isinstance(magnitudes, (list, tuple)):
        v = np.concatenate([np.asarray(m, dtype=np.float64) for m in magnitudes], axis=1)
    else:
        v = np.asarray(magnitudes, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("magnitudes must be non-negative")
    if not np.any(v > 0):
        raise ValueError("cannot factor an all-zero spectrogram")
    bins, frames = v.shape
    rng = np.random.default_rng(np.random.SeedSequence([0x4E4D46, seed]))
    w = rng.uniform(0.1, 1.1, size=(bins, rank))
    h = rng.uniform(0.1, 1.1, size=(rank, frames))
    history = []
    for _ in range(iters):
        h = _mu_update_h(v, w, h)
        w = _mu_update_w(v, w, h)
        scale = w.sum(axis=0)
        w /= scale + EPS
        h *= scale[:, None]
        history.append(kl_divergence(v, w @ h))
    return w, history


def nmf_separate(mixture_mag: np.ndarray, w_a: np.ndarray, w_b: np.ndarray,
                 iters: int = 150, seed: int = 0, init_h: np.ndarray | None = None):
    """Fixed-bases activation fit on the mixture; returns
    (mask_a, mask_b, divergence history) with Wiener ratio masks."""
    v = np.asarray(mixture_mag, dtype=np.float64)
    w = np.concatenate([w_a, w_b], axis=1)
    if w.shape[0] != v.shape[0]:
        raise ValueError(f"bases have {w.shape[0]} bins but mixture has {v.shape[0]}")
    r_a = w_a.shape[1]
    if init_h is None:
        rng = np.random.default_rng(np.random.SeedSequence([0x534550, seed]))
        h = rng.uniform(0.1, 1.1, size=(w.shape[1], v.shape[1]))
    else:
        h = np.asarray(init_h, dtype=np.float64).copy()
    history = []
    for _ in range(iters):
        h = _mu_update_h(v, w, h)
        history.append(kl_divergence(v, w @ h))
    va = w[:, :r_a] @ h[:r_a]
    vb = w[:, r_a:] @ h[r_a:]
    total = va + vb + EPS
    mask_a = dsp.MaskPlane(np.clip(va / total, 0, 1).astype(np.float32), "ratio")
    mask_b = dsp.MaskPlane(np.clip(vb / total, 0, 1).astype(np.float32), "ratio")
    return mask_a, mask_b, history


class NmfModel:
    """Per-category bases plus the shared rank; persisted in the common
    checkpoint format under names nmf/W_<category>."""

    def __init__(self, rank: int, bases: dict | None = None):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.rank = rank
        self.bases = dict(bases or {})

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "nmf", "rank": self.rank,
                "categories": sorted(self.bases)}
        if extra_meta:
            meta.update(extra_meta)
        save_tensors(path, {f"nmf/W_{c}": w for c, w in self.bases.items()}, meta)

    @classmethod
    def load(cls, path) -> tuple["NmfModel", dict]:
        arrays, meta = load_tensors(path)
        if meta.get("kind") != "nmf":
            raise ValueError(f"{path}: not an NMF checkpoint")
        bases = {int(name.split("_", 1)[1]): arr.astype(np.float64)
                 for name, arr in arrays.items() if name.startswith("nmf/W_")}
        return cls(meta["rank"], bases), meta


def fit_category_bases(manifest: dict, split: str = "train", rank: int = 8,
                       iters: int = 200, seed: int = 0) -> NmfModel:
    """One basis matrix per category from that category's solo clips."""
    cfg = toyworld.manifest_stft(manifest)
    by_cat: dict = {}
    for rec in manifest["splits"][split]:
        clip = toyworld.load_clip(manifest, rec)
        by_cat.setdefault(clip.category, []).append(dsp.stft(clip.wave, cfg).magnitude)
    model = NmfModel(rank)
    for cat in sorted(by_cat):
        w, _ = nmf_fit(by_cat[cat], rank, iters=iters, seed=seed + cat)
        model.bases[cat] = w
    return model
