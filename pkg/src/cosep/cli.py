"""Command-line surface: dataset generation, training, assignment,
separation, segmentation, evaluation, reporting.

Configuration is one JSON file with a closed schema (unknown fields are
rejected; run ``cosep --help`` for the full field list).  Every artifact
records a hash over the config sections it depends on, and every
command verifies its upstream artifacts against the current config
before running.  Failures exit nonzero with a single machine-parsable
line on stderr: ``E_CONFIG`` (bad config, exit 2), ``E_MISSING_ARTIFACT``
(run the named upstream command first, exit 3), ``E_CONFIG_DRIFT``
(artifact built under a different config, exit 4).

The environment variable COSEP_THREADS bounds numerical worker threads
(default: hardware parallelism).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, avnets, disentangle, dsp, metrics, nmf, toyworld, trainer

EXIT_CODES = {"E_CONFIG": 2, "E_MISSING_ARTIFACT": 3, "E_CONFIG_DRIFT": 4}

# closed config schema: section -> field -> (default, help)
SCHEMA = {
    "dataset": {
        "seed": (7, "dataset generator seed"),
        "categories": (8, "number of categories C (C < model.channels)"),
        "train": (400, "train split clip count"),
        "val": (80, "validation split clip count"),
        "test": (80, "test split clip count"),
        "dir": ("data", "dataset directory (created by make-data)"),
        "artifacts_dir": ("artifacts", "checkpoints/reports directory"),
    },
    "stft": {
        "preset": ("toy", "'toy' (8 kHz, window 510, hop 128) or 'paper' (11025 Hz, window 1022, hop 256); null to give explicit fields"),
        "sample_rate": (None, "sample rate in Hz (when preset is null)"),
        "window_size": (None, "even analysis window length in samples"),
        "hop": (None, "hop length in samples"),
        "warp_bins": (64, "log-frequency grid rows fed to the audio net"),
        "n_frames": (64, "spectrogram frames per clip (fixes clip length)"),
    },
    "model": {
        "channels": (16, "shared channel count K"),
        "image_size": (64, "image side in pixels"),
        "audio_depth": (4, "down/up convolution pairs in the audio net"),
        "audio_widths": (None, "channel widths, stem first (null: defaults for the depth)"),
        "seed": (0, "weight initialization seed"),
        "preset": (None, "'paper' switches both nets to the paper-scale architectures"),
    },
    "schedule": {
        "preset": ("toy-E", "named schedule preset (A-E, softmax-only, sigmoid-only, toy-E, toy-sigmoid-only); null to give explicit fields"),
        "sigmoid_epochs": (None, "sigmoid-stage epochs (only when the preset does not pin it)"),
        "softmax_epochs": (None, "fine-tune epochs (explicit schedules only)"),
        "initial_T": (None, "softmax temperature at fine-tune start"),
        "decay_rate": (None, "temperature decay multiplier in (0,1)"),
        "decay_epochs": (None, "fine-tune epochs at which T decays"),
        "lr": (1e-3, "base learning rate (divided by lr_finetune_divisor at fine-tune)"),
        "lr_finetune_divisor": (5.0, "fine-tune learning-rate divisor"),
        "seed": (0, "pair-sampling seed"),
        "batch_pairs": (8, "pairs per optimizer step"),
        "symmetric": (True, "train on both clips of each pair"),
        "distinct_pairs": (False, "forbid same-category pairs"),
    },
    "eval": {
        "tau": (0.5, "segmentation threshold, fraction of the map maximum"),
        "pair_seed": (1, "seed of the test mixture schedule"),
        "n_mixtures": (40, "evaluation mixtures"),
        "include_nmf": (True, "also fit and evaluate the NMF baseline"),
        "nmf_rank": (8, "NMF bases per category"),
        "nmf_iters": (150, "NMF multiplicative updates at separation time"),
        "figure_items": (4, "mixtures/frames rendered by the report command"),
    },
}

# fields a schedule preset determines; giving them alongside a preset is an error
PRESET_FIELDS = ("softmax_epochs", "initial_T", "decay_rate", "decay_epochs")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError("E_CONFIG", f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise CliError("E_CONFIG", f"config {path} line {exc.lineno}: {exc.msg}")
    return normalize_config(raw)


def normalize_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise CliError("E_CONFIG", "config root must be a JSON object")
    cfg: dict = {}
    for section, fields in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise CliError("E_CONFIG", f"section {section} must be an object")
        unknown = set(given) - set(fields)
        if unknown:
            raise CliError("E_CONFIG", f"unknown field {section}.{sorted(unknown)[0]}")
        cfg[section] = {name: given.get(name, default) for name, (default, _) in fields.items()}
    unknown_sections = set(raw) - set(SCHEMA)
    if unknown_sections:
        raise CliError("E_CONFIG", f"unknown section {sorted(unknown_sections)[0]}")

    sched = cfg["schedule"]
    if sched["preset"] is not None:
        if sched["preset"] not in trainer.PRESETS:
            raise CliError("E_CONFIG", f"schedule.preset {sched['preset']!r} unknown")
        clash = [f for f in PRESET_FIELDS if sched[f] is not None]
        pinned = trainer.PRESETS[sched["preset"]]
        if "sigmoid_epochs" in pinned and sched["sigmoid_epochs"] is not None:
            clash.append("sigmoid_epochs")
        if clash:
            raise CliError("E_CONFIG",
                           f"schedule.preset conflicts with explicit schedule.{clash[0]}")
    else:
        for f in PRESET_FIELDS:
            if sched[f] is None:
                raise CliError("E_CONFIG", f"schedule.{f} required when no preset is given")

    if cfg["stft"]["preset"] is None:
        for f in ("sample_rate", "window_size", "hop"):
            if cfg["stft"][f] is None:
                raise CliError("E_CONFIG", f"stft.{f} required when stft.preset is null")
    elif cfg["stft"]["preset"] not in ("toy", "paper"):
        raise CliError("E_CONFIG", f"stft.preset {cfg['stft']['preset']!r} unknown")

    if cfg["dataset"]["categories"] >= cfg["model"]["channels"]:
        raise CliError("E_CONFIG", "dataset.categories must be smaller than model.channels")
    return cfg


def section_hash(cfg: dict, sections) -> str:
    doc = {s: cfg[s] for s in sections}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


HASH_SECTIONS = {
    "dataset": ("dataset", "stft"),
    "checkpoint": ("dataset", "stft", "model", "schedule"),
    "assignment": ("dataset", "stft", "model", "schedule"),
    "report": ("dataset", "stft", "model", "schedule", "eval"),
}


def artifact_hash(cfg: dict, kind: str) -> str:
    return section_hash(cfg, HASH_SECTIONS[kind])


def stft_config(cfg: dict) -> dsp.StftConfig:
    s = cfg["stft"]
    if s["preset"] == "toy":
        return dsp.TOY_STFT
    if s["preset"] == "paper":
        return dsp.PAPER_STFT
    return dsp.StftConfig(s["sample_rate"], s["window_size"], s["hop"])


def schedule_config(cfg: dict) -> trainer.ScheduleConfig:
    sched = cfg["schedule"]
    if sched["preset"] is not None:
        fields = dict(trainer.PRESETS[sched["preset"]])
        if "sigmoid_epochs" not in fields:
            fields["sigmoid_epochs"] = 15 if sched["sigmoid_epochs"] is None else sched["sigmoid_epochs"]
    else:
        fields = {f: sched[f] for f in PRESET_FIELDS}
        fields["sigmoid_epochs"] = sched["sigmoid_epochs"] or 0
    fields["decay_epochs"] = tuple(fields.get("decay_epochs") or ())
    fields["lr"] = sched["lr"]
    fields["lr_finetune_divisor"] = sched["lr_finetune_divisor"]
    return trainer.ScheduleConfig(**fields)


def build_bundle(cfg: dict) -> avnets.ModelBundle:
    m = cfg["model"]
    if m["preset"] == "paper":
        return avnets.ModelBundle(avnets.PAPER_IMAGE_CFG, avnets.PAPER_AUDIO_CFG, seed=m["seed"])
    depth = m["audio_depth"]
    widths = m["audio_widths"]
    if widths is None:
        widths = avnets.AudioNetCfg.widths if depth == 4 else tuple(
            min(8 * 2 ** i, 64) for i in range(depth + 1))
    icfg = avnets.ImageNetCfg(input_size=m["image_size"], channels=m["channels"])
    acfg = avnets.AudioNetCfg(grid=cfg["stft"]["warp_bins"], depth=depth,
                              channels=m["channels"], widths=tuple(widths))
    return avnets.ModelBundle(icfg, acfg, seed=m["seed"])


# ---------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------

def _paths(cfg: dict) -> dict:
    art = Path(cfg["dataset"]["artifacts_dir"])
    return {
        "dataset": Path(cfg["dataset"]["dir"]),
        "manifest": Path(cfg["dataset"]["dir"]) / "manifest.json",
        "artifacts": art,
        "checkpoint": art / "checkpoint_final.ckpt",
        "checkpoint_sigmoid": art / "checkpoint_sigmoid.ckpt",
        "train_log": art / "train_log.csv",
        "nmf": art / "nmf.ckpt",
        "assignment": art / "assignment.json",
        "report": art / "report.csv",
        "report_extras": art / "report_extras.csv",
        "report_table": art / "report_table.txt",
        "figures": art / "figures",
        "run_manifest": art / "run_manifest.json",
    }


def _update_run_manifest(cfg: dict, key: str, path: Path) -> None:
    paths = _paths(cfg)
    paths["artifacts"].mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "artifacts": {}, "hashes": {}, "timestamps": {}}
    if paths["run_manifest"].exists():
        doc.update(json.loads(paths["run_manifest"].read_text()))
    doc["version"] = __version__
    doc["artifacts"][key] = str(path)
    doc["hashes"][key] = artifact_hash(cfg, key if key in HASH_SECTIONS else "report")
    doc["timestamps"][key] = time.strftime("%Y-%m-%dT%H:%M:%S")
    paths["run_manifest"].write_text(json.dumps(doc, sort_keys=True, indent=1))


def _require_dataset(cfg: dict) -> dict:
    paths = _paths(cfg)
    if not paths["manifest"].exists():
        raise CliError("E_MISSING_ARTIFACT", f"dataset manifest {paths['manifest']} missing; run make-data")
    manifest = toyworld.load_manifest(paths["dataset"])
    recorded = manifest.get("config_hash")
    if recorded != artifact_hash(cfg, "dataset"):
        raise CliError("E_CONFIG_DRIFT",
                       f"dataset at {paths['dataset']} was generated under a different dataset/stft config")
    return manifest


def _require_bundle(cfg: dict) -> tuple[avnets.ModelBundle, dict]:
    paths = _paths(cfg)
    if not paths["checkpoint"].exists():
        raise CliError("E_MISSING_ARTIFACT", f"checkpoint {paths['checkpoint']} missing; run train")
    bundle, meta = avnets.ModelBundle.load(paths["checkpoint"])
    if meta.get("config_hash") != artifact_hash(cfg, "checkpoint"):
        raise CliError("E_CONFIG_DRIFT", "checkpoint was trained under a different config")
    return bundle, meta


def _require_assignment(cfg: dict) -> disentangle.Assignment:
    paths = _paths(cfg)
    if not paths["assignment"].exists():
        raise CliError("E_MISSING_ARTIFACT", f"assignment {paths['assignment']} missing; run assign")
    asg, doc = disentangle.Assignment.load(paths["assignment"])
    if doc.get("config_hash") != artifact_hash(cfg, "assignment"):
        raise CliError("E_CONFIG_DRIFT", "assignment was computed under a different config")
    return asg


def _category_ids(manifest: dict, names) -> list[int]:
    cats = {c.name: c.id for c in toyworld.manifest_categories(manifest)}
    ids = []
    for name in names:
        if name in cats:
            ids.append(cats[name])
        elif name.isdigit() and int(name) < len(cats):
            ids.append(int(name))
        else:
            raise CliError("E_CONFIG", f"unknown category {name!r}; have {sorted(cats)}")
    return ids


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------

def cmd_make_data(cfg: dict, args) -> int:
    d = cfg["dataset"]
    paths = _paths(cfg)
    scfg = stft_config(cfg)
    manifest = toyworld.generate(paths["dataset"], seed=d["seed"], n_categories=d["categories"],
                                 counts={"train": d["train"], "val": d["val"], "test": d["test"]},
                                 image_size=cfg["model"]["image_size"], stft_cfg=scfg,
                                 n_frames=cfg["stft"]["n_frames"])
    manifest["config_hash"] = artifact_hash(cfg, "dataset")
    with open(paths["manifest"], "w") as fh:
        json.dump({k: v for k, v in manifest.items() if not k.startswith("_")},
                  fh, sort_keys=True, indent=1)
    _update_run_manifest(cfg, "dataset", paths["manifest"])
    n = sum(len(v) for v in manifest["splits"].values())
    print(f"dataset: {n} clips, {d['categories']} categories -> {paths['dataset']}")
    return 0


def cmd_train(cfg: dict, args) -> int:
    manifest = _require_dataset(cfg)
    paths = _paths(cfg)
    paths["artifacts"].mkdir(parents=True, exist_ok=True)
    bundle = build_bundle(cfg)
    sched = schedule_config(cfg)
    state = trainer.run_schedule(
        sched, manifest, bundle, out_dir=paths["artifacts"],
        seed=cfg["schedule"]["seed"], warp_bins=cfg["stft"]["warp_bins"],
        batch_pairs=cfg["schedule"]["batch_pairs"], symmetric=cfg["schedule"]["symmetric"],
        distinct_pairs=cfg["schedule"]["distinct_pairs"], log_path=paths["train_log"],
        resume_from=args.resume if getattr(args, "resume", None) else None,
        config_hash=artifact_hash(cfg, "checkpoint"), quiet=not args.verbose)
    _update_run_manifest(cfg, "checkpoint", paths["checkpoint"])
    final_t = bundle.temperature if bundle.mode == "softmax" else None
    print(f"trained {state.epoch} epochs; final loss {state.loss_history[-1]:.4f}"
          + (f"; final temperature {final_t:g}" if final_t is not None else ""))
    return 0


def cmd_assign(cfg: dict, args) -> int:
    manifest = _require_dataset(cfg)
    bundle, _ = _require_bundle(cfg)
    paths = _paths(cfg)
    table = disentangle.build_table(bundle, manifest, "val")
    asg = disentangle.assign(table)
    table_hash = hashlib.sha256(np.ascontiguousarray(table.values).tobytes()).hexdigest()[:16]
    asg.save(paths["assignment"], extra={"config_hash": artifact_hash(cfg, "assignment"),
                                         "table_hash": table_hash})
    _update_run_manifest(cfg, "assignment", paths["assignment"])
    acc = disentangle.classification_accuracy(bundle, manifest, "val", asg)
    pairs = ", ".join(f"{n}->{c}" for n, c in zip(asg.categories, asg.category_to_channel))
    print(f"assignment: {pairs}")
    print(f"validation accuracy {acc:.3f}, profit {asg.total_profit:.4f}")
    return 0


def cmd_separate(cfg: dict, args) -> int:
    manifest = _require_dataset(cfg)
    bundle, _ = _require_bundle(cfg)
    asg = _require_assignment(cfg)
    scfg = toyworld.manifest_stft(manifest)
    if args.wav:
        wave, _ = dsp.read_wav(args.wav, expected_rate=scfg.sample_rate)
        stem = Path(args.wav)
        names = [n.strip() for n in args.categories.split(",")]
    elif args.clips:
        ids = [c.strip() for c in args.clips.split(",")]
        records = {r["id"]: r for split in manifest["splits"].values() for r in split}
        missing = [c for c in ids if c not in records]
        if missing:
            raise CliError("E_CONFIG", f"unknown clip id {missing[0]}")
        clips = [toyworld.load_clip(manifest, records[c]) for c in ids]
        wave = toyworld.mix_waves(clips[0].wave, clips[1].wave)
        cats = toyworld.manifest_categories(manifest)
        names = [cats[c.category].name for c in clips]
        stem = _paths(cfg)["artifacts"] / f"mix_{ids[0]}_{ids[1]}.wav"
        dsp.write_wav(stem, wave, scfg.sample_rate)
    else:
        raise CliError("E_CONFIG", "separate needs --wav FILE --categories a,b or --clips id1,id2")
    if len(names) != 2:
        raise CliError("E_CONFIG", "separate needs exactly two categories")
    cat_ids = _category_ids(manifest, names)
    result = metrics.separate(wave, cat_ids, bundle, asg, scfg)
    for name, est in zip(names, result.waveforms):
        out = Path(f"{stem}.{name}.wav")
        dsp.write_wav(out, est, scfg.sample_rate)
        print(f"wrote {out}")
    return 0


def cmd_segment(cfg: dict, args) -> int:
    manifest = _require_dataset(cfg)
    bundle, _ = _require_bundle(cfg)
    asg = _require_assignment(cfg)
    if not args.image or not args.category:
        raise CliError("E_CONFIG", "segment needs --image FILE.ppm --category NAME")
    frame = toyworld.read_ppm(args.image)
    size = bundle.image_cfg.input_size
    if frame.shape[:2] != (size, size):
        raise CliError("E_CONFIG", f"image must be {size}x{size}, got {frame.shape[1]}x{frame.shape[0]}")
    cat = _category_ids(manifest, [args.category])[0]
    tau = cfg["eval"]["tau"] if args.tau is None else args.tau
    mask = avnets.segment(frame, bundle, asg.channel_for(cat), tau=tau)
    out = Path(f"{args.image}.{args.category}.pgm")
    toyworld.write_pgm(out, mask)
    print(f"wrote {out} ({mask.mean():.1%} coverage)")
    return 0


def _fit_or_load_nmf(cfg: dict, manifest: dict) -> nmf.NmfModel:
    paths = _paths(cfg)
    expected = artifact_hash(cfg, "dataset")
    if paths["nmf"].exists():
        model, meta = nmf.NmfModel.load(paths["nmf"])
        if meta.get("config_hash") == expected and model.rank == cfg["eval"]["nmf_rank"]:
            return model
    model = nmf.fit_category_bases(manifest, rank=cfg["eval"]["nmf_rank"],
                                   iters=200, seed=cfg["dataset"]["seed"])
    model.save(paths["nmf"], extra_meta={"config_hash": expected})
    return model


def cmd_eval(cfg: dict, args) -> int:
    manifest = _require_dataset(cfg)
    bundle, meta = _require_bundle(cfg)
    asg = _require_assignment(cfg)
    paths = _paths(cfg)
    e = cfg["eval"]
    name = cfg["schedule"]["preset"] or "custom"
    row, extras, _ = metrics.evaluate_network(bundle, asg, manifest, "test",
                                              pair_seed=e["pair_seed"], n_mixtures=e["n_mixtures"],
                                              tau=e["tau"], model_name=name)
    rows = [row]
    named_extras = {name: extras}
    if e["include_nmf"]:
        model = _fit_or_load_nmf(cfg, manifest)
        nrow, nextras, _ = metrics.evaluate_nmf(model, manifest, "test",
                                                pair_seed=e["pair_seed"],
                                                n_mixtures=e["n_mixtures"], iters=e["nmf_iters"])
        rows.append(nrow)
        named_extras["nmf"] = nextras
    metrics.write_summary_csv(paths["report"], rows,
                              header_comment=f"config {artifact_hash(cfg, 'report')}")
    metrics.write_extras_csv(paths["report_extras"], named_extras)
    table = metrics.format_table(rows)
    paths["report_table"].write_text(table + "\n")
    _update_run_manifest(cfg, "report", paths["report"])
    print(table)
    print(f"mean SDR improvement over mixture: {extras['mean_sdr_improvement']:.2f} dB")
    return 0


def cmd_report(cfg: dict, args) -> int:
    manifest = _require_dataset(cfg)
    bundle, _ = _require_bundle(cfg)
    asg = _require_assignment(cfg)
    paths = _paths(cfg)
    if not paths["report"].exists():
        raise CliError("E_MISSING_ARTIFACT", f"report {paths['report']} missing; run eval")
    paths["figures"].mkdir(parents=True, exist_ok=True)
    scfg = toyworld.manifest_stft(manifest)
    e = cfg["eval"]
    n_items = e["figure_items"]

    # spectrogram triptychs: mixture | estimate A | estimate B
    pairs = metrics.sample_mixture_pairs(manifest, "test", e["pair_seed"], n_items)
    for i, (ra, rb) in enumerate(pairs):
        a = toyworld.load_clip(manifest, ra)
        b = toyworld.load_clip(manifest, rb)
        mix = toyworld.mix_waves(a.wave, b.wave)
        res = metrics.separate(mix, [a.category, b.category], bundle, asg, scfg)
        panels = [dsp.stft(w, scfg).magnitude for w in (mix, *res.waveforms)]
        img = _spectrogram_strip(panels)
        toyworld.write_pgm(paths["figures"] / f"separation_{i:02d}.pgm", img)

    # frame / predicted-mask overlays
    for i, rec in enumerate(manifest["splits"]["test"][:n_items]):
        clip = toyworld.load_clip(manifest, rec)
        pred = avnets.segment(clip.frame, bundle, asg.channel_for(clip.category), tau=e["tau"])
        toyworld.write_ppm(paths["figures"] / f"segmentation_{i:02d}.ppm",
                           _overlay(clip.frame, pred, clip.gt_mask))
    print(paths["report_table"].read_text())
    print(f"figures -> {paths['figures']}")
    return 0


def _spectrogram_strip(panels) -> np.ndarray:
    """Log-magnitude panels side by side as one 8-bit image (low rows at
    the bottom), separated by white columns."""
    imgs = []
    for mag in panels:
        z = np.log1p(mag.astype(np.float64))
        z = z / max(z.max(), 1e-9)
        imgs.append((z[::-1] * 255).astype(np.uint8))
    sep = np.full((imgs[0].shape[0], 2), 255, dtype=np.uint8)
    strip = [imgs[0]]
    for img in imgs[1:]:
        strip.extend((sep, img))
    return np.concatenate(strip, axis=1)


def _overlay(frame: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Predicted mask tinted red, ground-truth boundary drawn in white."""
    out = frame.astype(np.float64)
    out[pred] = 0.55 * out[pred] + 0.45 * np.array([255.0, 32.0, 32.0])
    edge = gt ^ (np.roll(gt, 1, 0) & np.roll(gt, -1, 0) & np.roll(gt, 1, 1) & np.roll(gt, -1, 1) & gt)
    out[edge] = 255.0
    return np.clip(out, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------

def _schema_help() -> str:
    lines = ["config fields (JSON, closed schema):"]
    for section, fields in SCHEMA.items():
        for name, (default, doc) in fields.items():
            lines.append(f"  {section}.{name:<20} default {default!r}: {doc}")
    return "\n".join(lines)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosep",
        description="Audio-visual co-segmentation: train on synthetic mixtures, "
                    "assign categories to channels, then segment images and "
                    "separate audio independently.",
        epilog=_schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"cosep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default="cosep.json", help="config JSON path")
        p.set_defaults(fn=fn)
        return p

    add("make-data", cmd_make_data, "generate the synthetic dataset")
    p_train = add("train", cmd_train, "run the two-stage training schedule")
    p_train.add_argument("--preset", help="schedule preset override (A-E, softmax-only, ...)")
    p_train.add_argument("--resume", help="resume from the stage-boundary checkpoint")
    p_train.add_argument("--verbose", action="store_true", help="per-epoch progress lines")
    add("assign", cmd_assign, "assign categories to channels on the validation split")
    p_sep = add("separate", cmd_separate, "audio-only source separation")
    p_sep.add_argument("--wav", help="input mixture WAV")
    p_sep.add_argument("--categories", default="", help="two category names, comma separated")
    p_sep.add_argument("--clips", help="two dataset clip ids to mix and separate")
    p_seg = add("segment", cmd_segment, "image-only segmentation")
    p_seg.add_argument("--image", help="input PPM frame")
    p_seg.add_argument("--category", help="category name to segment")
    p_seg.add_argument("--tau", type=float, default=None, help="threshold override")
    add("eval", cmd_eval, "evaluate on the test split and write report CSVs")
    add("report", cmd_report, "render tables and PPM/PGM figures from the report")
    return parser


def _apply_thread_cap():
    cap = os.environ.get("COSEP_THREADS")
    if cap:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(int(cap))
        except (ImportError, ValueError):
            pass


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "preset", None):
            with open(args.config) as fh:
                raw = json.load(fh)
            raw.setdefault("schedule", {})["preset"] = args.preset
            cfg = normalize_config(raw)
        return args.fn(cfg, args)
    except CliError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)


if __name__ == "__main__":
    sys.exit(main())
