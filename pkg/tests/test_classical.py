import numpy as np
import pytest

from rppglab import classical, metrics, optics
from rppglab.classical import RgbTrace, SkinMaskError
from rppglab.optics import HrProfile, SceneConfig, VideoTensor, synth_pulse, synth_video

FS = 30.0


def scene_trace(bpm, scale="II", noise=0.0, seconds=32.0, motion=True, seed=0):
    """Spatially averaged trace of a simulated scene."""
    kw = dict(noise_sigma=noise, seed=seed)
    if motion:
        kw.update(i_amp=0.004, i_freq=0.25, s_amp=0.002, s_freq=0.15)
    cfg = SceneConfig.for_scale(scale, **kw)
    pulse = synth_pulse(HrProfile.constant(bpm), seconds, FS, seed=seed)
    vid = synth_video(cfg, pulse, len(pulse), 8, 8)
    return classical.spatial_average(vid), pulse


def hr_error(trace_out, bpm):
    hr = metrics.estimate_hr(metrics.butterworth_bandpass(trace_out.samples, FS), FS)
    return float(np.max(np.abs(hr.bpm - bpm)))


class TestSkinMask:
    def test_uniform_skin(self):
        vid = VideoTensor(np.broadcast_to(np.array([0.8, 0.55, 0.45]), (4, 5, 5, 3)).copy(), FS)
        assert classical.skin_mask(vid).all()

    def test_blue_video_rejected(self):
        vid = VideoTensor(np.broadcast_to(np.array([0.0, 0.0, 1.0]), (4, 5, 5, 3)).copy(), FS)
        with pytest.raises(SkinMaskError, match="cr_range"):
            classical.skin_mask(vid)

    def test_half_skin(self):
        frames = np.zeros((4, 6, 6, 3))
        frames[:, :, :3] = [0.8, 0.55, 0.45]
        frames[:, :, 3:] = [0.1, 0.6, 0.1]
        mask = classical.skin_mask(VideoTensor(frames, FS))
        assert mask[:, :3].all() and not mask[:, 3:].any()

    @pytest.mark.parametrize("scale", optics.SCALES)
    def test_simulated_skin_is_detected(self, scale):
        cfg = SceneConfig.for_scale(scale)
        pulse = synth_pulse(HrProfile.constant(70), 2.0, FS, seed=0)
        assert classical.skin_mask(synth_video(cfg, pulse, 60, 8, 8)).mean() > 0.9


class TestSpatialAverage:
    def test_constant_video(self):
        frames = np.full((70, 4, 4, 3), 0.4)
        tr = classical.spatial_average(VideoTensor(frames, FS), np.ones((4, 4), bool))
        np.testing.assert_allclose(tr.values, 0.4, rtol=0, atol=1e-15)

    def test_constant_border_ignored(self):
        tr, _ = scene_trace(70, seconds=4.0)
        assert tr.values.shape == (120, 3)

    def test_noisy_trace_follows_pulse(self):
        tr, pulse = scene_trace(72, noise=1e-3, motion=False)
        assert metrics.pcc(tr.values[:, 1], pulse.samples) > 0.9

    def test_short_trace_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            RgbTrace(np.ones((10, 3)), FS)


class TestPos:
    def test_constant_is_zero(self):
        out = classical.pos(RgbTrace(np.full((300, 3), 0.5), FS))
        assert np.allclose(out.samples, 0.0)

    def test_intensity_modulation_cancelled(self):
        t = np.arange(300) / FS
        v = 0.5 * (1 + 0.01 * np.sin(2 * np.pi * 1.1 * t))
        out = classical.pos(RgbTrace(np.stack([v, v, v], 1), FS))
        assert np.max(np.abs(out.samples)) < 1e-12

    def test_recovers_72(self):
        tr, _ = scene_trace(72)
        assert hr_error(classical.pos(tr), 72) <= 1.0

    def test_scale_invariance(self):
        tr, _ = scene_trace(80)
        a = classical.pos(tr).samples
        b = classical.pos(RgbTrace(tr.values * 3.7, FS)).samples
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestChrom:
    def test_constant_is_zero(self):
        assert np.allclose(classical.chrom(RgbTrace(np.full((300, 3), 0.5), FS)).samples, 0.0)

    def test_pulse_along_up(self):
        t = np.arange(900) / FS
        p = np.sin(2 * np.pi * 1.3 * t)
        v = 0.5 + 0.003 * np.outer(p, optics.U_P_BASE)
        out = classical.chrom(RgbTrace(v, FS))
        assert abs(metrics.peak_frequency(out.samples, FS) - 1.3) <= 1 / 120

    def test_intensity_attenuated_20db(self):
        t = np.arange(900) / FS
        m = 0.01 * np.sin(2 * np.pi * 1.1 * t)
        v = np.outer(1 + m, [0.6, 0.45, 0.4])
        out = classical.chrom(RgbTrace(v, FS)).samples
        ref = v[:, 0] / v[:, 0].mean() - 1
        assert 10 * np.log10(np.mean(out ** 2) / np.mean(ref ** 2)) <= -20

    def test_scale_invariance(self):
        tr, _ = scene_trace(66)
        np.testing.assert_allclose(classical.chrom(tr).samples,
                                   classical.chrom(RgbTrace(tr.values * 0.3, FS)).samples, atol=1e-9)


class TestIca:
    def test_separates_sinusoids(self):
        t = np.arange(900) / FS
        s = np.stack([np.sin(2 * np.pi * 0.2 * t), np.sin(2 * np.pi * 1.25 * t),
                      np.sign(np.sin(2 * np.pi * 4.0 * t))], 1)
        mix = np.array([[1.0, 0.5, 0.3], [0.4, 1.0, 0.6], [0.2, 0.7, 1.0]])
        out = classical.ica(RgbTrace(s @ mix.T + 2.0, FS))
        assert abs(metrics.peak_frequency(out.samples, FS) - 1.25) <= 1 / 120

    def test_single_channel_sinusoid(self):
        t = np.arange(900) / FS
        rng = np.random.default_rng(0)
        v = np.stack([rng.normal(size=900), np.sin(2 * np.pi * 1.0 * t), rng.normal(size=900)], 1)
        out = classical.ica(RgbTrace(v, FS)).samples
        assert abs(metrics.pcc(out, v[:, 1])) > 0.99

    def test_recovers_60(self):
        tr, _ = scene_trace(60)
        assert hr_error(classical.ica(tr), 60) <= 2.0

    def test_too_short(self):
        with pytest.raises(ValueError):
            classical.ica(RgbTrace(np.random.default_rng(0).normal(size=(100, 3)), FS))


class TestExtract:
    @pytest.mark.parametrize("method", ["pos", "chrom", "ica"])
    @pytest.mark.parametrize("bpm", [48.0, 72.0, 110.0])
    def test_noise_free(self, method, bpm):
        tr, _ = scene_trace(bpm, motion=False)
        assert hr_error(classical.EXTRACTORS[method](tr), bpm) <= 2.0

    def test_unknown_method(self):
        vid = VideoTensor(np.full((60, 4, 4, 3), 0.5), FS)
        with pytest.raises(ValueError, match="unknown classical method"):
            classical.extract(vid, "pbv")
