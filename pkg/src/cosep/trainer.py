"""Mix-and-Separate self-supervised training with the two-stage
activation schedule.

Stage one trains with a sigmoid head at the base learning rate; stage
two switches to temperature softmax, divides the learning rate by the
fine-tune divisor, and decays the temperature at the configured epochs,
pushing the pooled visual vector toward one-hot and sparsifying the
shared channels.

An epoch is one pass over N uniformly sampled clip pairs, N being the
train-clip count.  Pairs are consumed in fixed order in small batches,
and both clips of a pair contribute symmetric loss terms by default, so
runs with identical seeds are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import avnets, dsp, toyworld
from . import tensor as tc
from .disentangle import sparsity
from .tensor import Adam, Tensor


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a state dump."""


@dataclass(frozen=True)
class ScheduleConfig:
    sigmoid_epochs: int
    softmax_epochs: int
    initial_T: float = 1.0
    decay_rate: float = 0.5
    decay_epochs: tuple = ()
    lr: float = 1e-3
    lr_finetune_divisor: float = 5.0

    def __post_init__(self):
        if self.sigmoid_epochs < 0 or self.softmax_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not self.initial_T > 0:
            raise ValueError("initial temperature must be positive")
        if not 0 < self.decay_rate < 1:
            raise ValueError("decay rate must lie in (0, 1)")
        if not self.lr > 0 or not self.lr_finetune_divisor > 0:
            raise ValueError("learning rate and divisor must be positive")
        decays = tuple(self.decay_epochs)
        if list(decays) != sorted(decays):
            raise ValueError("decay epochs must be sorted")
        if any(not 1 <= e <= self.softmax_epochs for e in decays):
            raise ValueError(
                f"decay epochs {decays} must lie within [1, {self.softmax_epochs}]")
        object.__setattr__(self, "decay_epochs", decays)

    @property
    def final_temperature(self) -> float:
        return self.initial_T * self.decay_rate ** len(self.decay_epochs)

    def to_json(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @staticmethod
    def from_json(d: dict) -> "ScheduleConfig":
        d = dict(d)
        d["decay_epochs"] = tuple(d.get("decay_epochs", ()))
        return ScheduleConfig(**d)


# Learning-schedule presets: softmax epochs, initial temperature, decay
# rate, decay epochs.  Final temperatures follow in closed form
# (A 0.625, B 0.4746->0.475, C 0.090, D 0.0081->0.008, E 0.125,
# softmax-only 0.090).  The toy-* presets shrink the epoch budget for
# desk-scale runs while keeping E's annealing endpoint.
PRESETS: dict = {
    "A": {"softmax_epochs": 20, "initial_T": 10.0, "decay_rate": 0.5, "decay_epochs": (4, 8, 12, 16)},
    "B": {"softmax_epochs": 20, "initial_T": 1.5, "decay_rate": 0.75, "decay_epochs": (4, 8, 12, 16)},
    "C": {"softmax_epochs": 25, "initial_T": 1.0, "decay_rate": 0.3, "decay_epochs": (4, 8)},
    "D": {"softmax_epochs": 25, "initial_T": 1.0, "decay_rate": 0.3, "decay_epochs": (3, 6, 9, 12)},
    "E": {"softmax_epochs": 25, "initial_T": 1.0, "decay_rate": 0.5, "decay_epochs": (5, 10, 15)},
    "softmax-only": {"softmax_epochs": 25, "initial_T": 1.0, "decay_rate": 0.3,
                     "decay_epochs": (10, 20), "sigmoid_epochs": 0},
    "sigmoid-only": {"softmax_epochs": 0, "initial_T": 1.0, "decay_rate": 0.5, "decay_epochs": ()},
    "toy-E": {"softmax_epochs": 20, "initial_T": 1.0, "decay_rate": 0.5,
              "decay_epochs": (5, 10, 15), "sigmoid_epochs": 12},
    "toy-sigmoid-only": {"softmax_epochs": 0, "initial_T": 1.0, "decay_rate": 0.5,
                         "decay_epochs": (), "sigmoid_epochs": 16},
}


def preset_schedule(name: str, sigmoid_epochs: int = 15, lr: float = 1e-3) -> ScheduleConfig:
    """ScheduleConfig for a named preset; ``sigmoid_epochs`` applies to
    presets that do not pin their own."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[name])
    fields.setdefault("sigmoid_epochs", sigmoid_epochs)
    fields.setdefault("lr", lr)
    return ScheduleConfig(**fields)


def temperature_at(cfg: ScheduleConfig, finetune_epoch: int) -> float:
    """Temperature after the decays scheduled up to ``finetune_epoch``
    (1-based, relative to the fine-tune stage start)."""
    if finetune_epoch < 0:
        raise ValueError("epoch must be non-negative")
    n = sum(1 for e in cfg.decay_epochs if e <= finetune_epoch)
    return cfg.initial_T * cfg.decay_rate ** n


@dataclass
class TrainState:
    seed: int
    epoch: int = 0
    stage: str = "training"
    temperature: float | None = None
    loss_history: list = field(default_factory=list)
    sparsity_history: list = field(default_factory=list)
    batch_pairs: int = 8
    symmetric: bool = True
    distinct_pairs: bool = False

    def dump(self) -> dict:
        return {"seed": self.seed, "epoch": self.epoch, "stage": self.stage,
                "temperature": self.temperature,
                "recent_losses": self.loss_history[-5:],
                "batch_pairs": self.batch_pairs}


# ---------------------------------------------------------------------
# clip preparation
# ---------------------------------------------------------------------

@dataclass
class PreparedClip:
    frame: np.ndarray        # [3, S, S] float32 in [0,1]
    spec: np.ndarray         # complex64 [bins, frames], linear grid
    warped_mag: np.ndarray   # [G, frames] float32
    category: int


def prepare_clip(clip: toyworld.AVClip, cfg: dsp.StftConfig, warp_bins: int) -> PreparedClip:
    spec = dsp.stft(clip.wave, cfg)
    z = (spec.magnitude.astype(np.float64) * np.exp(1j * spec.phase.astype(np.float64)))
    warped = dsp.warp_matrix(cfg.n_bins, warp_bins) @ spec.magnitude
    frame = clip.frame.astype(np.float32).transpose(2, 0, 1) / 255.0
    return PreparedClip(frame, z.astype(np.complex64), warped, clip.category)


def prepare_split(manifest: dict, split: str, warp_bins: int) -> list[PreparedClip]:
    cfg = toyworld.manifest_stft(manifest)
    return [prepare_clip(toyworld.load_clip(manifest, rec), cfg, warp_bins)
            for rec in manifest["splits"][split]]


def _mix_warped(a: PreparedClip, b: PreparedClip, warp_bins: int, cfg: dsp.StftConfig) -> np.ndarray:
    mix = toyworld.MIX_GAIN * (a.spec.astype(np.complex128) + b.spec.astype(np.complex128))
    return (dsp.warp_matrix(cfg.n_bins, warp_bins) @ np.abs(mix).astype(np.float32))


def _batch_arrays(pairs: list, warp_bins: int, cfg: dsp.StftConfig):
    mix = np.stack([_mix_warped(a, b, warp_bins, cfg) for a, b in pairs])[:, None]
    frames_a = np.stack([a.frame for a, _ in pairs])
    frames_b = np.stack([b.frame for _, b in pairs])
    t_a = np.stack([(a.warped_mag >= b.warped_mag).astype(np.float32) for a, b in pairs])[:, None]
    t_b = np.stack([(b.warped_mag >= a.warped_mag).astype(np.float32) for a, b in pairs])[:, None]
    return mix, frames_a, frames_b, t_a, t_b


def _step_batch(batch, bundle: avnets.ModelBundle, opt: Adam, symmetric: bool) -> float:
    mix, frames_a, frames_b, t_a, t_b = batch
    feats = avnets.audio_forward(Tensor(mix), bundle)
    _, _, v_a = avnets.image_forward(Tensor(frames_a), bundle)
    mask_a = avnets.synthesize_mask(v_a, feats, bundle)
    loss = tc.bce_loss(mask_a, Tensor(t_a))
    if symmetric:
        _, _, v_b = avnets.image_forward(Tensor(frames_b), bundle)
        mask_b = avnets.synthesize_mask(v_b, feats, bundle)
        loss = tc.mul(tc.add(loss, tc.bce_loss(mask_b, Tensor(t_b))), Tensor(np.float32(0.5)))
    opt.zero_grad()
    tc.backward(loss)
    opt.step()
    return loss.item()


def train_step(pair, bundle: avnets.ModelBundle, state: TrainState, opt: Adam,
               manifest: dict, warp_bins: int = 64) -> float:
    """One optimizer step on a single (AVClip, AVClip) pair."""
    cfg = toyworld.manifest_stft(manifest)
    a, b = (prepare_clip(c, cfg, warp_bins) for c in pair)
    loss = _step_batch(_batch_arrays([(a, b)], warp_bins, cfg), bundle, opt, state.symmetric)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at state {state.dump()}")
    return loss


# ---------------------------------------------------------------------
# schedule runner
# ---------------------------------------------------------------------

def mean_val_sparsity(bundle: avnets.ModelBundle, val_frames: np.ndarray,
                      batch: int = 64) -> float:
    values = []
    with tc.no_grad():
        for lo in range(0, val_frames.shape[0], batch):
            _, _, v = avnets.image_forward(Tensor(val_frames[lo:lo + batch]), bundle)
            values.extend(sparsity(row) for row in v.data)
    return float(np.mean(values))


def _run_epoch(prepared, pair_idx, bundle, opt, state, cfg_stft, warp_bins) -> float:
    losses = []
    for lo in range(0, len(pair_idx), state.batch_pairs):
        chunk = pair_idx[lo:lo + state.batch_pairs]
        pairs = [(prepared[i], prepared[j]) for i, j in chunk]
        loss = _step_batch(_batch_arrays(pairs, warp_bins, cfg_stft), bundle, opt, state.symmetric)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at state {state.dump()}")
        losses.append(loss)
    return float(np.mean(losses))


def _sample_pairs(rng, n_clips: int, n_pairs: int, categories, distinct: bool) -> np.ndarray:
    idx = rng.integers(0, n_clips, size=(n_pairs, 2))
    if distinct:
        for row in idx:
            while categories[row[0]] == categories[row[1]]:
                row[1] = rng.integers(0, n_clips)
    return idx


def run_schedule(cfg: ScheduleConfig, manifest: dict, bundle: avnets.ModelBundle,
                 out_dir=None, seed: int = 0, warp_bins: int = 64,
                 batch_pairs: int = 8, symmetric: bool = True,
                 distinct_pairs: bool = False, log_path=None,
                 resume_from=None, config_hash: str = "",
                 quiet: bool = True) -> TrainState:
    """Run the full two-stage schedule; returns the final TrainState.

    Checkpoints are written at the stage boundary and at the end when
    ``out_dir`` is given.  ``resume_from`` accepts the stage-boundary
    checkpoint and restarts the fine-tune stage (its recorded schedule
    must match ``cfg``).
    """
    state = TrainState(seed=seed, batch_pairs=batch_pairs, symmetric=symmetric,
                       distinct_pairs=distinct_pairs)
    cfg_stft = toyworld.manifest_stft(manifest)
    prepared = prepare_split(manifest, "train", warp_bins)
    categories = [p.category for p in prepared]
    val_frames = np.stack([p.frame for p in prepare_split(manifest, "val", warp_bins)])
    n = len(prepared)
    rng = np.random.default_rng(np.random.SeedSequence([0x7241, seed]))
    opt = Adam(bundle.param_list(), lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log_rows = [("epoch", "stage", "T", "lr", "loss", "sparsity")]

    def log(epoch, stage, temp, lr, loss, spars):
        log_rows.append((str(epoch), stage, "" if temp is None else f"{temp:.6g}",
                         f"{lr:.6g}", f"{loss:.6f}", f"{spars:.6f}"))
        if not quiet:
            print(f"epoch {epoch:3d} [{stage}] T={temp} lr={lr:.2e} "
                  f"loss={loss:.4f} sparsity={spars:.4f}")

    def flush_log():
        if log_path is not None:
            with open(log_path, "w") as fh:
                fh.write("\n".join(",".join(r) for r in log_rows) + "\n")

    start_finetune = 0
    if resume_from is not None:
        loaded, meta = avnets.ModelBundle.load(resume_from)
        recorded = meta.get("schedule")
        if recorded != cfg.to_json() or (config_hash and meta.get("config_hash") not in ("", config_hash)):
            raise ValueError("resume checkpoint was produced under a different configuration")
        for name, param in bundle.params().items():
            param.data[...] = loaded.params()[name].data
        state.epoch = cfg.sigmoid_epochs
    else:
        # -- stage 1: sigmoid -----------------------------------------
        bundle.set_mode("sigmoid")
        state.stage = "training"
        for _ in range(cfg.sigmoid_epochs):
            pair_idx = _sample_pairs(rng, n, n, categories, distinct_pairs)
            loss = _run_epoch(prepared, pair_idx, bundle, opt, state, cfg_stft, warp_bins)
            spars = mean_val_sparsity(bundle, val_frames)
            state.loss_history.append(loss)
            state.sparsity_history.append(spars)
            state.epoch += 1
            log(state.epoch, "training", None, opt.lr, loss, spars)
            flush_log()
        if out_dir is not None:
            bundle.save(out_dir / "checkpoint_sigmoid.ckpt",
                        extra_meta={"schedule": cfg.to_json(), "config_hash": config_hash,
                                    "completed_stage": "training"})

    # -- stage 2: annealed softmax ------------------------------------
    if cfg.softmax_epochs > 0:
        bundle.set_mode("softmax", cfg.initial_T)
        opt.lr = cfg.lr / cfg.lr_finetune_divisor
        state.stage = "finetune"
        for fe in range(start_finetune + 1, cfg.softmax_epochs + 1):
            bundle.set_mode("softmax", temperature_at(cfg, fe))
            state.temperature = bundle.temperature
            pair_idx = _sample_pairs(rng, n, n, categories, distinct_pairs)
            loss = _run_epoch(prepared, pair_idx, bundle, opt, state, cfg_stft, warp_bins)
            spars = mean_val_sparsity(bundle, val_frames)
            state.loss_history.append(loss)
            state.sparsity_history.append(spars)
            state.epoch += 1
            log(state.epoch, "finetune", bundle.temperature, opt.lr, loss, spars)
            flush_log()

    bundle.trained = True
    if out_dir is not None:
        bundle.save(out_dir / "checkpoint_final.ckpt",
                    extra_meta={"schedule": cfg.to_json(), "config_hash": config_hash,
                                "completed_stage": state.stage})
    flush_log()
    return state
