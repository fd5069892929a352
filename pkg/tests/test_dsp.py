"""STFT round trips, log-frequency warping, masks, WAV files."""

import numpy as np
import pytest

from cosep import dsp
from cosep.metrics import sdr_sir


def snr_db(reference, estimate):
    err = reference - estimate
    return 10 * np.log10(np.sum(reference**2) / np.sum(err**2))


def sine(freq, cfg, n_samples, amp=0.8, phase=0.0):
    t = np.arange(n_samples) / cfg.sample_rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture
def toy():
    return dsp.TOY_STFT


class TestStftConfig:
    def test_window_is_symmetric_unit_range(self, toy):
        w = toy.window
        assert np.allclose(w, w[::-1])
        assert w.min() >= 0 and w.max() <= 1

    def test_odd_window_rejected(self):
        with pytest.raises(ValueError, match="even"):
            dsp.StftConfig(8000, 511, 128)

    def test_oversized_hop_rejected(self):
        with pytest.raises(ValueError, match="hop"):
            dsp.StftConfig(8000, 510, 511)


class TestStft:
    def test_zero_signal_gives_zero_magnitudes(self, toy):
        spec = dsp.stft(np.zeros(4000), toy)
        assert np.all(spec.magnitude == 0)

    def test_short_wave_rejected(self, toy):
        with pytest.raises(ValueError, match="window"):
            dsp.stft(np.zeros(100), toy)

    def test_bin_centered_sine_dominates_its_row(self, toy):
        k = 40
        freq = k * toy.sample_rate / toy.fft_size
        spec = dsp.stft(sine(freq, toy, 8574), toy)
        row_means = spec.magnitude.mean(axis=1)
        peak = np.argmax(row_means)
        assert peak == k
        others = np.delete(row_means, peak)
        assert row_means[peak] >= 10 * others.mean()

    def test_paper_scale_grid(self):
        cfg = dsp.PAPER_STFT
        wave = np.random.default_rng(0).standard_normal(6 * cfg.sample_rate) * 0.1
        spec = dsp.stft(wave, cfg)
        assert spec.bins == 512  # 1022-sample window: DC..Nyquist
        assert 250 <= spec.frames <= 260  # ~256 frames for 6 s at 11025 Hz

    def test_parseval_energy_within_one_percent(self, toy):
        rng = np.random.default_rng(7)
        wave = rng.standard_normal(6000) * 0.3
        spec = dsp.stft(wave, toy)
        weights = np.full(spec.bins, 2.0)
        weights[0] = weights[-1] = 1.0
        spec_energy = np.sum(weights[:, None] * spec.magnitude.astype(np.float64) ** 2) / toy.fft_size
        frames = np.lib.stride_tricks.sliding_window_view(wave, toy.window_size)[::toy.hop]
        time_energy = np.sum((frames * toy.window) ** 2)
        assert abs(spec_energy - time_energy) / time_energy < 0.01


class TestIstft:
    def test_roundtrip_white_noise_interior_snr(self, toy):
        rng = np.random.default_rng(3)
        wave = rng.standard_normal(8574) * 0.5
        recon = dsp.istft(dsp.stft(wave, toy))
        w = toy.window_size
        assert snr_db(wave[w:-w], recon[w:-w]) >= 50

    def test_roundtrip_other_cola_configs(self):
        rng = np.random.default_rng(4)
        for cfg in (dsp.StftConfig(8000, 64, 16), dsp.StftConfig(8000, 256, 64)):
            wave = rng.standard_normal(4096) * 0.5
            recon = dsp.istft(dsp.stft(wave, cfg))
            w = cfg.window_size
            assert snr_db(wave[w:-w], recon[w:-w]) >= 50

    def test_zero_spectrogram_gives_zero_wave(self, toy):
        spec = dsp.Spectrogram(np.zeros((toy.n_bins, 10)), np.zeros((toy.n_bins, 10)), "linear", toy)
        assert np.all(dsp.istft(spec) == 0)

    def test_log_scale_rejected(self, toy):
        warped = dsp.log_warp(dsp.stft(np.zeros(2000), toy), 64)
        with pytest.raises(ValueError, match="linear"):
            dsp.istft(warped)

    def test_oracle_magnitude_with_mixture_phase_beats_mixture(self, toy):
        n = 8574
        a = sine(40 * toy.sample_rate / toy.fft_size, toy, n)
        b = sine(90 * toy.sample_rate / toy.fft_size, toy, n)
        mix = 0.5 * a + 0.5 * b
        spec_mix = dsp.stft(mix, toy)
        spec_a = dsp.stft(0.5 * a, toy)
        hybrid = dsp.Spectrogram(spec_a.magnitude, spec_mix.phase, "linear", toy)
        est = dsp.istft(hybrid)
        sdr_est, _ = sdr_sir(est, [0.5 * a, 0.5 * b], 0)
        sdr_mix, _ = sdr_sir(mix, [0.5 * a, 0.5 * b], 0)
        assert sdr_est > sdr_mix


class TestLogWarp:
    def test_constant_roundtrip(self, toy):
        spec = dsp.Spectrogram(np.full((toy.n_bins, 8), 3.0), None, "linear", toy)
        back = dsp.log_unwarp(dsp.log_warp(spec, 64), toy)
        np.testing.assert_allclose(back.magnitude, 3.0, atol=1e-5)

    def test_paper_scale_bin_counts(self):
        cfg = dsp.PAPER_STFT
        spec = dsp.Spectrogram(np.ones((cfg.n_bins, 4)), None, "linear", cfg)
        warped = dsp.log_warp(spec, 256)
        assert warped.bins == 256 and warped.scale == "log"

    def test_geometric_spacing_ratio_constant(self):
        pos = dsp.warp_positions(256, 64)
        ratios = pos[1:] / pos[:-1]
        assert np.max(np.abs(ratios - ratios[0])) < 1e-9

    def test_excess_out_bins_rejected(self, toy):
        spec = dsp.Spectrogram(np.ones((toy.n_bins, 4)), None, "linear", toy)
        with pytest.raises(ValueError, match="exceeds"):
            dsp.log_warp(spec, toy.n_bins + 1)

    def test_smooth_spectrum_roundtrip_error(self, toy):
        rows = np.arange(toy.n_bins, dtype=np.float64)
        smooth = (np.exp(-((rows - 60) / 50.0) ** 2) + 0.6 * np.exp(-((rows - 170) / 60.0) ** 2))
        mag = np.tile(smooth[:, None], (1, 16)) * np.linspace(0.5, 1.5, 16)[None, :]
        spec = dsp.Spectrogram(mag, None, "linear", toy)
        back = dsp.log_unwarp(dsp.log_warp(spec, 64), toy)
        rel = np.linalg.norm(back.magnitude - mag.astype(np.float32)) / np.linalg.norm(mag)
        assert rel <= 0.15


class TestMasks:
    def test_dominance_rule(self, toy):
        t = dsp.Spectrogram(np.array([[3.0], [1.0]]), None, "linear", toy)
        o = dsp.Spectrogram(np.array([[2.0], [4.0]]), None, "linear", toy)
        mask = dsp.ideal_binary_mask(t, o)
        np.testing.assert_array_equal(mask.values, [[1.0], [0.0]])

    def test_tie_goes_to_target(self, toy):
        t = dsp.Spectrogram(np.full((2, 2), 2.0), None, "linear", toy)
        mask = dsp.ideal_binary_mask(t, t)
        assert np.all(mask.values == 1)

    def test_masks_cover_every_bin(self, toy):
        rng = np.random.default_rng(5)
        a = dsp.Spectrogram(rng.random((16, 8)), None, "linear", toy)
        b = dsp.Spectrogram(rng.random((16, 8)), None, "linear", toy)
        total = dsp.ideal_binary_mask(a, b).values + dsp.ideal_binary_mask(b, a).values
        assert np.all(total >= 1)

    def test_disjoint_sines_give_complementary_masks(self, toy):
        n = 8574
        a = dsp.stft(sine(30 * toy.sample_rate / toy.fft_size, toy, n), toy)
        b = dsp.stft(sine(100 * toy.sample_rate / toy.fft_size, toy, n), toy)
        ma = dsp.ideal_binary_mask(a, b).values
        mb = dsp.ideal_binary_mask(b, a).values
        active = (a.magnitude > 1e-4) | (b.magnitude > 1e-4)
        assert np.all((ma + mb)[active] == 1)

    def test_identity_and_zero_masks(self, toy):
        spec = dsp.stft(sine(500, toy, 4000), toy)
        ones = dsp.MaskPlane(np.ones(spec.magnitude.shape), "binary")
        zeros = dsp.MaskPlane(np.zeros(spec.magnitude.shape), "binary")
        np.testing.assert_array_equal(dsp.apply_mask(spec, ones).magnitude, spec.magnitude)
        assert np.all(dsp.apply_mask(spec, zeros).magnitude == 0)

    def test_apply_mask_monotone(self, toy):
        rng = np.random.default_rng(6)
        spec = dsp.Spectrogram(rng.random((12, 6)), None, "linear", toy)
        small = dsp.MaskPlane(rng.random((12, 6)) * 0.5, "ratio")
        big = dsp.MaskPlane(np.clip(small.values + 0.3, 0, 1), "ratio")
        assert np.all(dsp.apply_mask(spec, big).magnitude >= dsp.apply_mask(spec, small).magnitude)

    def test_grid_mismatch_mentions_unwarp(self, toy):
        spec = dsp.stft(np.zeros(2000), toy)
        mask = dsp.MaskPlane(np.ones((64, spec.frames)), "ratio")
        with pytest.raises(ValueError, match="unwarp"):
            dsp.apply_mask(spec, mask)

    def test_binary_mask_validation(self):
        with pytest.raises(ValueError, match="binary"):
            dsp.MaskPlane(np.array([[0.5]]), "binary")
        with pytest.raises(ValueError, match="ratio"):
            dsp.MaskPlane(np.array([[1.5]]), "ratio")

    def test_ideal_mask_separation_of_disjoint_sines(self, toy):
        n = 8574
        a = sine(30 * toy.sample_rate / toy.fft_size, toy, n)
        b = sine(100 * toy.sample_rate / toy.fft_size, toy, n)
        mix = 0.5 * a + 0.5 * b
        spec_mix = dsp.stft(mix, toy)
        spec_a = dsp.stft(0.5 * a, toy)
        spec_b = dsp.stft(0.5 * b, toy)
        refs = [0.5 * a, 0.5 * b]
        for idx, (tgt, oth) in enumerate([(spec_a, spec_b), (spec_b, spec_a)]):
            mask = dsp.ideal_binary_mask(tgt, oth)
            est = dsp.istft(dsp.apply_mask(spec_mix, mask))
            sdr, _ = sdr_sir(est, refs, idx)
            assert sdr >= 20, f"source {idx}: SDR {sdr:.2f} dB"


class TestWav:
    def test_roundtrip(self, tmp_path, toy):
        wave = sine(440, toy, 4000, amp=0.7)
        path = tmp_path / "t.wav"
        dsp.write_wav(path, wave, toy.sample_rate)
        back, rate = dsp.read_wav(path, expected_rate=toy.sample_rate)
        assert rate == toy.sample_rate
        assert np.max(np.abs(back - wave)) <= 1.01 / 32767

    def test_rate_mismatch_rejected(self, tmp_path):
        path = tmp_path / "t.wav"
        dsp.write_wav(path, np.zeros(100), 8000)
        with pytest.raises(ValueError, match="sample rate"):
            dsp.read_wav(path, expected_rate=11025)
