"""Separation and segmentation metrics, and the audio-only / image-only
inference pipelines built on top of them.

SDR/SIR follow the bss_eval energy-ratio decomposition with zero-lag
(filter length 1) projections: the estimate is split into the component
along the target reference, the rest of its projection onto the span of
all references (interference), and the out-of-span remainder (artifacts).
All projection algebra runs in float64; infinite ratios are reported as
a 120 dB sentinel.

Evaluation mixes test clips pairwise on a seeded schedule, so reports
are reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import avnets, dsp, nmf as nmf_mod, toyworld
from .disentangle import Assignment, classification_accuracy, sparsity
from .tensor import Tensor, no_grad

DB_CAP = 120.0

REPORT_COLUMNS = ("model", "sparsity", "accuracy", "SDR", "SIR", "IoU")


def _db_ratio(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CAP
    return min(10.0 * np.log10(num / den), DB_CAP)


def sdr_sir(estimate: np.ndarray, references, target_index: int) -> tuple[float, float]:
    """Zero-lag bss_eval-style SDR and SIR of ``estimate`` for one source.

    ``references`` are the clean source waveforms (linearly independent,
    same length as the estimate).  Returns (SDR dB, SIR dB), both capped
    at 120 dB.
    """
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    refs = np.stack([np.asarray(r, dtype=np.float64).reshape(-1) for r in references])
    if refs.shape[1] != est.size:
        raise ValueError(f"estimate length {est.size} differs from references {refs.shape[1]}")
    if not 0 <= target_index < refs.shape[0]:
        raise ValueError(f"target index {target_index} out of range")
    energies = np.sum(refs * refs, axis=1)
    if np.sum(est * est) == 0.0:
        raise ValueError("estimate has zero energy")
    if np.any(energies == 0.0):
        raise ValueError("a reference has zero energy")

    target = refs[target_index]
    s_target = (est @ target / (target @ target)) * target

    gram = refs @ refs.T
    try:
        coeffs = np.linalg.solve(gram, refs @ est)
    except np.linalg.LinAlgError as exc:
        raise ValueError("references are not linearly independent") from exc
    e_proj = coeffs @ refs

    e_interf = e_proj - s_target
    e_artif = est - e_proj
    num = float(s_target @ s_target)
    sdr = _db_ratio(num, float(np.sum((e_interf + e_artif) ** 2)))
    sir = _db_ratio(num, float(e_interf @ e_interf))
    return sdr, sir


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks; the ground truth must
    be non-empty."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise ValueError("ground-truth mask is empty")
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return float(inter / union)


# ---------------------------------------------------------------------
# audio-only separation pipeline
# ---------------------------------------------------------------------

@dataclass
class SeparationResult:
    waveforms: list
    channels: list
    sdr: list = field(default_factory=list)
    sir: list = field(default_factory=list)
    mixture_sdr: list = field(default_factory=list)


def _chunked_feats(warped: np.ndarray, bundle) -> np.ndarray:
    """Audio-net features for a [G, F] warped magnitude plane of any
    frame count; time is processed in non-overlapping G-frame windows
    (zero-padded at the end)."""
    g = bundle.audio_cfg.grid
    bins, frames = warped.shape
    if bins != g:
        raise ValueError(f"warped grid has {bins} bins but the audio net expects {g}")
    out = np.zeros((bundle.channels, g, frames), dtype=np.float32)
    with no_grad():
        for lo in range(0, frames, g):
            chunk = warped[:, lo:lo + g]
            pad = g - chunk.shape[1]
            if pad:
                chunk = np.pad(chunk, ((0, 0), (0, pad)))
            feats = avnets.audio_forward(Tensor(chunk[None, None]), bundle)
            out[:, :, lo:lo + g] = feats.data[0][:, :, :g - pad if pad else g]
    return out


def separate(mixture_wave: np.ndarray, categories, bundle, assignment: Assignment,
             stft_cfg: dsp.StftConfig, references=None,
             binary_masks: bool = False) -> SeparationResult:
    """Audio-only source separation for the two given category ids.

    stft -> log warp -> audio net -> per-assigned-channel masks ->
    unwarp -> apply with mixture phase -> istft.  When clean
    ``references`` are supplied, per-source SDR/SIR plus the unseparated
    mixture baseline SDR are filled in.
    """
    categories = list(categories)
    for c in categories:
        if not 0 <= c < len(assignment.category_to_channel):
            raise ValueError(f"category {c} missing from assignment")
    channels = [assignment.channel_for(c) for c in categories]
    mixture_wave = np.asarray(mixture_wave, dtype=np.float32)
    spec = dsp.stft(mixture_wave, stft_cfg)
    warped = dsp.log_warp(spec, bundle.audio_cfg.grid)
    feats = _chunked_feats(warped.magnitude, bundle)
    masks = avnets.audio_only_masks(feats[None], channels, binary=binary_masks)
    result = SeparationResult(waveforms=[], channels=channels)
    for mask in masks:
        linear = dsp.log_unwarp(mask, stft_cfg)
        est = dsp.istft(dsp.apply_mask(spec, linear))
        if est.size < mixture_wave.size:
            est = np.pad(est, (0, mixture_wave.size - est.size))
        result.waveforms.append(est[:mixture_wave.size].astype(np.float32))
    if references is not None:
        for i, est in enumerate(result.waveforms):
            s, r = sdr_sir(est, references, i)
            result.sdr.append(s)
            result.sir.append(r)
            ms, _ = sdr_sir(mixture_wave, references, i)
            result.mixture_sdr.append(ms)
    return result


# ---------------------------------------------------------------------
# evaluation suite
# ---------------------------------------------------------------------

def sample_mixture_pairs(manifest: dict, split: str, seed: int, n_mixtures: int):
    """Seeded schedule of distinct-category clip pairs for evaluation."""
    records = manifest["splits"][split]
    rng = np.random.default_rng(np.random.SeedSequence([0x4D49, seed]))
    pairs = []
    while len(pairs) < n_mixtures:
        i, j = rng.integers(0, len(records), size=2)
        if records[i]["category"] != records[j]["category"]:
            pairs.append((records[i], records[j]))
    return pairs


def evaluate_network(bundle, assignment: Assignment, manifest: dict,
                     split: str = "test", pair_seed: int = 0, n_mixtures: int = 40,
                     tau: float = 0.5, model_name: str = "model"):
    """Full image-only + audio-only evaluation; returns (summary row,
    per-item details)."""
    cfg = toyworld.manifest_stft(manifest)
    records = manifest["splits"][split]
    if not records:
        raise ValueError(f"split {split!r} is empty")

    details: dict = {"segmentation": [], "separation": []}

    # image-only: segmentation + channel sparsity + classification
    ious = []
    spars = []
    for rec in records:
        clip = toyworld.load_clip(manifest, rec)
        pred = avnets.segment(clip.frame, bundle, assignment.channel_for(clip.category), tau=tau)
        value = iou(pred, clip.gt_mask)
        ious.append(value)
        details["segmentation"].append({"clip": rec["id"], "category": clip.category, "iou": value})
        with no_grad():
            _, _, v = avnets.image_forward(avnets.frames_to_tensor(clip.frame), bundle)
        spars.append(sparsity(v.data[0]))
    accuracy = classification_accuracy(bundle, manifest, split, assignment)

    # audio-only: seeded pairwise mixtures
    sdrs, sirs, improvements = [], [], []
    for rec_a, rec_b in sample_mixture_pairs(manifest, split, pair_seed, n_mixtures):
        a = toyworld.load_clip(manifest, rec_a)
        b = toyworld.load_clip(manifest, rec_b)
        mix = toyworld.mix_waves(a.wave, b.wave)
        refs = [0.5 * a.wave, 0.5 * b.wave]
        res = separate(mix, [a.category, b.category], bundle, assignment, cfg, references=refs)
        for i in range(2):
            sdrs.append(res.sdr[i])
            sirs.append(res.sir[i])
            improvements.append(res.sdr[i] - res.mixture_sdr[i])
        details["separation"].append({
            "clips": [rec_a["id"], rec_b["id"]],
            "sdr": [float(x) for x in res.sdr], "sir": [float(x) for x in res.sir],
            "mixture_sdr": [float(x) for x in res.mixture_sdr]})

    row = {
        "model": model_name,
        "sparsity": float(np.mean(spars)),
        "accuracy": float(accuracy),
        "SDR": float(np.mean(sdrs)),
        "SIR": float(np.mean(sirs)),
        "IoU": float(np.mean(ious)),
    }
    extras = {
        "median_SDR": float(np.median(sdrs)),
        "median_SIR": float(np.median(sirs)),
        "median_IoU": float(np.median(ious)),
        "mean_sdr_improvement": float(np.mean(improvements)),
    }
    return row, extras, details


def evaluate_nmf(model: "nmf_mod.NmfModel", manifest: dict, split: str = "test",
                 pair_seed: int = 0, n_mixtures: int = 40, iters: int = 150):
    """Separation-only evaluation of the NMF baseline on the same seeded
    mixture schedule (no image branch: sparsity/accuracy/IoU are blank)."""
    cfg = toyworld.manifest_stft(manifest)
    sdrs, sirs, improvements = [], [], []
    details = []
    for rec_a, rec_b in sample_mixture_pairs(manifest, split, pair_seed, n_mixtures):
        a = toyworld.load_clip(manifest, rec_a)
        b = toyworld.load_clip(manifest, rec_b)
        mix = toyworld.mix_waves(a.wave, b.wave)
        refs = [0.5 * a.wave, 0.5 * b.wave]
        spec = dsp.stft(mix, cfg)
        m_a, m_b, _ = nmf_mod.nmf_separate(spec.magnitude, model.bases[a.category],
                                           model.bases[b.category], iters=iters,
                                           seed=pair_seed)
        for i, mask in enumerate((m_a, m_b)):
            est = dsp.istft(dsp.apply_mask(spec, mask))
            if est.size < mix.size:
                est = np.pad(est, (0, mix.size - est.size))
            s, r = sdr_sir(est[:mix.size], refs, i)
            ms, _ = sdr_sir(mix, refs, i)
            sdrs.append(s)
            sirs.append(r)
            improvements.append(s - ms)
        details.append({"clips": [rec_a["id"], rec_b["id"]]})
    row = {"model": "nmf", "sparsity": None, "accuracy": None,
           "SDR": float(np.mean(sdrs)), "SIR": float(np.mean(sirs)), "IoU": None}
    extras = {"median_SDR": float(np.median(sdrs)), "median_SIR": float(np.median(sirs)),
              "mean_sdr_improvement": float(np.mean(improvements))}
    return row, extras, details


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"


def write_summary_csv(path, rows, header_comment: str = "") -> None:
    """Summary report with exactly the model/sparsity/accuracy/SDR/SIR/IoU
    columns."""
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append(",".join(REPORT_COLUMNS))
    for row in rows:
        lines.append(",".join([str(row["model"])] + [_fmt(row[c]) for c in REPORT_COLUMNS[1:]]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_extras_csv(path, named_extras: dict) -> None:
    """Per-model medians and improvement deltas (one row per model)."""
    keys = sorted({k for ex in named_extras.values() for k in ex})
    lines = [",".join(["model"] + keys)]
    for name in sorted(named_extras):
        lines.append(",".join([name] + [_fmt(named_extras[name].get(k)) for k in keys]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def format_table(rows) -> str:
    """Human-readable fixed-width rendition of the summary rows."""
    widths = [max(len(c), 10) for c in REPORT_COLUMNS]
    def fmt_row(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    out = [fmt_row(REPORT_COLUMNS), fmt_row(["-" * w for w in widths])]
    for row in rows:
        cells = [row["model"]] + ["" if row[c] is None else f"{row[c]:.3f}" for c in REPORT_COLUMNS[1:]]
        out.append(fmt_row(cells))
    return "\n".join(out)
