"""CLI pipeline on a miniature config: happy path, error categories,
artifact hashing."""

import json

import numpy as np
import pytest

from cosep import cli, dsp, toyworld as tw


def tiny_config(tmp_path, **schedule_overrides):
    schedule = {
        "preset": None, "sigmoid_epochs": 1, "softmax_epochs": 2,
        "initial_T": 1.0, "decay_rate": 0.5, "decay_epochs": [1, 2],
        "lr": 2e-3, "seed": 0, "batch_pairs": 4,
    }
    schedule.update(schedule_overrides)
    return {
        "dataset": {"seed": 3, "categories": 4, "train": 24, "val": 8, "test": 6,
                    "dir": str(tmp_path / "data"), "artifacts_dir": str(tmp_path / "artifacts")},
        "stft": {"preset": "toy", "warp_bins": 32, "n_frames": 32},
        "model": {"channels": 8, "audio_depth": 2, "audio_widths": [6, 10, 14], "seed": 1},
        "schedule": schedule,
        "eval": {"pair_seed": 2, "n_mixtures": 4, "nmf_rank": 2, "nmf_iters": 40,
                 "figure_items": 2},
    }


def write_config(tmp_path, cfg):
    path = tmp_path / "cosep.json"
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-data -> train -> assign once for the whole module."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp_path, tiny_config(tmp_path))
    for cmd in ("make-data", "train", "assign"):
        assert cli.main([cmd, "-c", cfg_path]) == 0
    return tmp_path, cfg_path


class TestConfigValidation:
    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        cfg["dataset"]["bogus"] = 1
        rc = cli.main(["make-data", "-c", write_config(tmp_path, cfg)])
        assert rc == cli.EXIT_CODES["E_CONFIG"]
        assert capsys.readouterr().err.startswith("E_CONFIG:")

    def test_unknown_section_rejected(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        cfg["extra"] = {}
        assert cli.main(["make-data", "-c", write_config(tmp_path, cfg)]) == 2
        assert "unknown section" in capsys.readouterr().err

    def test_preset_field_collision_rejected(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, preset="E", softmax_epochs=25)
        assert cli.main(["make-data", "-c", write_config(tmp_path, cfg)]) == 2
        assert "conflicts" in capsys.readouterr().err

    def test_too_many_categories_rejected(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        cfg["dataset"]["categories"] = 8
        assert cli.main(["make-data", "-c", write_config(tmp_path, cfg)]) == 2
        assert "channels" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["make-data", "-c", str(tmp_path / "none.json")]) == 2

    def test_help_enumerates_config_fields(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--help"])
        out = capsys.readouterr().out
        for field in ("dataset.seed", "stft.warp_bins", "model.channels",
                      "schedule.preset", "eval.tau", "eval.pair_seed"):
            assert field in out


class TestMissingArtifacts:
    def test_train_without_dataset(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_config(tmp_path))
        rc = cli.main(["train", "-c", cfg_path])
        assert rc == cli.EXIT_CODES["E_MISSING_ARTIFACT"]
        assert capsys.readouterr().err.startswith("E_MISSING_ARTIFACT:")

    def test_eval_without_checkpoint(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_config(tmp_path))
        assert cli.main(["make-data", "-c", cfg_path]) == 0
        rc = cli.main(["eval", "-c", cfg_path])
        assert rc == cli.EXIT_CODES["E_MISSING_ARTIFACT"]
        assert "train" in capsys.readouterr().err


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        tmp_path, _ = pipeline
        art = tmp_path / "artifacts"
        assert (art / "checkpoint_final.ckpt").exists()
        assert (art / "checkpoint_sigmoid.ckpt").exists()
        assert (art / "train_log.csv").exists()
        assert (art / "assignment.json").exists()
        assert (art / "run_manifest.json").exists()

    def test_assignment_json_contents(self, pipeline):
        tmp_path, _ = pipeline
        doc = json.loads((tmp_path / "artifacts" / "assignment.json").read_text())
        assert set(doc) >= {"assignment", "total_profit", "table_hash", "config_hash"}
        assert len(doc["assignment"]) == 4

    def test_eval_writes_reports(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        assert cli.main(["eval", "-c", cfg_path]) == 0
        out = capsys.readouterr().out
        report = (tmp_path / "artifacts" / "report.csv").read_text().splitlines()
        header = report[0] if not report[0].startswith("#") else report[1]
        assert header == "model,sparsity,accuracy,SDR,SIR,IoU"
        assert any(line.startswith("nmf,") for line in report)
        assert "SDR" in out

    def test_report_renders_figures(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        if not (tmp_path / "artifacts" / "report.csv").exists():
            assert cli.main(["eval", "-c", cfg_path]) == 0
        assert cli.main(["report", "-c", cfg_path]) == 0
        figs = sorted((tmp_path / "artifacts" / "figures").iterdir())
        names = [f.name for f in figs]
        assert "separation_00.pgm" in names
        assert "segmentation_00.ppm" in names
        img = tw.read_pgm(tmp_path / "artifacts" / "figures" / "separation_00.pgm")
        assert img.ndim == 2 and img.shape[1] > 3 * 32

    def test_separate_clips_emits_wavs(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        manifest = tw.load_manifest(tmp_path / "data")
        recs = manifest["splits"]["test"]
        pair = (recs[0]["id"], recs[1]["id"])
        assert cli.main(["separate", "-c", cfg_path, "--clips", ",".join(pair)]) == 0
        out = capsys.readouterr().out
        assert out.count("wrote") == 2

    def test_separate_user_wav_names_outputs_by_category(self, pipeline):
        tmp_path, cfg_path = pipeline
        manifest = tw.load_manifest(tmp_path / "data")
        cats = tw.manifest_categories(manifest)
        recs = manifest["splits"]["test"]
        a = tw.load_clip(manifest, recs[0])
        b = tw.load_clip(manifest, recs[1])
        wav_in = tmp_path / "user_mix.wav"
        dsp.write_wav(wav_in, tw.mix_waves(a.wave, b.wave), 8000)
        names = f"{cats[a.category].name},{cats[b.category].name}"
        assert cli.main(["separate", "-c", cfg_path, "--wav", str(wav_in),
                         "--categories", names]) == 0
        for name in names.split(","):
            out = tmp_path / f"user_mix.wav.{name}.wav"
            assert out.exists()
            wave, rate = dsp.read_wav(out)
            assert rate == 8000 and wave.size == a.wave.size

    def test_segment_emits_mask(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        manifest = tw.load_manifest(tmp_path / "data")
        rec = manifest["splits"]["test"][0]
        cats = tw.manifest_categories(manifest)
        image = tmp_path / "data" / rec["frame"]
        name = cats[rec["category"]].name
        assert cli.main(["segment", "-c", cfg_path, "--image", str(image),
                         "--category", name]) == 0
        mask = tw.read_pgm(f"{image}.{name}.pgm")
        assert mask.shape == (64, 64)

    def test_config_drift_detected(self, pipeline, tmp_path, capsys):
        src_tmp, _ = pipeline
        cfg = tiny_config(src_tmp)
        cfg["dataset"]["seed"] = 99  # same artifacts, different config
        rc = cli.main(["assign", "-c", write_config(tmp_path, cfg)])
        assert rc == cli.EXIT_CODES["E_CONFIG_DRIFT"]
        assert capsys.readouterr().err.startswith("E_CONFIG_DRIFT:")

    def test_unknown_clip_rejected(self, pipeline, capsys):
        _, cfg_path = pipeline
        assert cli.main(["separate", "-c", cfg_path, "--clips", "nope_0001,nope_0002"]) == 2
