import json
import os

import numpy as np
import pytest
import scipy.signal

import app.simulate as simulate_module
from app.constants import INTERFERER_WAV, META_FILE, MIXTURE_WAV, NOISE_WAV, TARGET_WAV
from app.core import (ArrayGeometry, InvalidAngle, InvalidValue, LengthMismatch, MultiChannelWaveform,
                      SilentSource, Waveform, default_geometry)
from app.metrics import snr
from app.simulate import (Scenario, add_sensor_noise, load_scenario, mix_at_sir, overlap_layout,
                          read_bundle, render_margin, render_plane_wave, render_reverberant, sensor_noise,
                          simulate_scenario, write_bundle)
from app.tensorio import read_wav, write_wav


def _energy_db(x):
    return 10 * np.log10(np.dot(x, x))


class TestRenderPlaneWave:

    def test_broadside_channels_equal_padded_source(self, geometry, config):
        rng = np.random.default_rng(0)
        source = Waveform(rng.standard_normal(3000), 16000)
        margin = render_margin(geometry, config)
        mc = render_plane_wave(source, geometry, 90.0, config)
        assert mc.data.shape == (15, 3000 + 2 * margin)
        np.testing.assert_allclose(mc.data[:, margin:margin + 3000], np.tile(source.samples, (15, 1)), atol=1e-12)
        np.testing.assert_allclose(mc.data[:, :margin], 0.0, atol=1e-12)

    def test_margin_covers_array_aperture(self, geometry, config):
        # 0.56 m / 343 m/s * 16 kHz = 26.1 个样本
        assert render_margin(geometry, config) == 27
        assert render_margin(ArrayGeometry(np.zeros((1, 3))), config) == 0

    def test_single_mic_is_identity(self, config):
        rng = np.random.default_rng(1)
        source = Waveform(rng.standard_normal(500), 16000)
        geometry = ArrayGeometry(np.zeros((1, 3)))
        np.testing.assert_array_equal(render_plane_wave(source, geometry, 30.0, config).data[0], source.samples)

    def test_sixteen_sample_delay(self, config):
        rng = np.random.default_rng(2)
        source = Waveform(rng.standard_normal(4000), 16000)
        geometry = ArrayGeometry(np.array([[0.0, 0.0, 0.0], [0.343, 0.0, 0.0]]))
        mc = render_plane_wave(source, geometry, 0.0, config)
        assert mc.num_samples == 4032
        np.testing.assert_array_equal(mc.data[0, 16:4016], source.samples)
        # 第二个麦克风更靠近 θ = 0 方向的声源, 提前 16 个样本收到信号
        np.testing.assert_allclose(mc.data[1, :4000], source.samples, atol=1e-9)
        np.testing.assert_allclose(mc.data[1, 4000:], 0.0, atol=1e-9)
        correlation = scipy.signal.correlate(mc.data[0], mc.data[1], mode='full')
        lags = scipy.signal.correlation_lags(4032, 4032, mode='full')
        assert abs(lags[np.argmax(correlation)]) == 16

    @pytest.mark.parametrize('theta', [0.0, 35.0, 90.0, 140.0, 180.0])
    def test_every_channel_keeps_full_source_energy(self, geometry, config, theta):
        rng = np.random.default_rng(8)
        source = Waveform(rng.standard_normal(4000), 16000)
        mc = render_plane_wave(source, geometry, theta, config)
        energy = np.sum(mc.data ** 2, axis=1)
        np.testing.assert_allclose(energy, np.dot(source.samples, source.samples), rtol=1e-3)

    def test_invalid_angle(self, geometry, config):
        with pytest.raises(InvalidAngle):
            render_plane_wave(Waveform(np.ones(10), 16000), geometry, -1.0, config)

    def test_sample_rate_must_match(self, geometry, config):
        with pytest.raises(InvalidValue):
            render_plane_wave(Waveform(np.ones(10), 8000), geometry, 10.0, config)


class TestReverberant:

    def test_delta_response_is_identity(self):
        rng = np.random.default_rng(3)
        source = Waveform(rng.standard_normal(1000), 16000)
        rir = np.zeros((2, 64))
        rir[0, 0] = 1.0
        rir[1, 10] = 0.5
        images = render_reverberant(source, MultiChannelWaveform(rir, 16000))
        assert images.data.shape == (2, 1063)
        np.testing.assert_allclose(images.data[0, :1000], source.samples, atol=1e-9)
        np.testing.assert_allclose(images.data[1, 10:1010], 0.5 * source.samples, atol=1e-9)


class TestMixAtSir:

    def _images(self, seed=4):
        rng = np.random.default_rng(seed)
        target = MultiChannelWaveform(rng.standard_normal((3, 2000)), 16000)
        interferer = MultiChannelWaveform(5.0 * rng.standard_normal((3, 2000)), 16000)
        return target, interferer

    def test_zero_db_gives_equal_energies(self):
        target, interferer = self._images()
        mixture, target_out, scaled = mix_at_sir(target, interferer, 0.0, reference=1)
        assert _energy_db(target_out.data[1]) == pytest.approx(_energy_db(scaled.data[1]), abs=1e-9)
        np.testing.assert_allclose(mixture.data, target.data + scaled.data)

    def test_requested_sir_over_region(self):
        target, interferer = self._images()
        region = (500, 1500)
        _, _, scaled = mix_at_sir(target, interferer, 1.5, reference=0, region=region)
        achieved = _energy_db(target.data[0, 500:1500]) - _energy_db(scaled.data[0, 500:1500])
        assert achieved == pytest.approx(1.5, abs=1e-9)

    def test_high_sir_leaves_target(self):
        target, interferer = self._images()
        mixture, _, _ = mix_at_sir(target, interferer, 80.0)
        np.testing.assert_allclose(mixture.data, target.data, atol=1e-3)

    def test_silent_interferer(self):
        target, _ = self._images()
        silent = MultiChannelWaveform(np.zeros((3, 2000)), 16000)
        with pytest.raises(SilentSource):
            mix_at_sir(target, silent, 0.0)

    def test_length_mismatch(self):
        target, _ = self._images()
        with pytest.raises(LengthMismatch):
            mix_at_sir(target, MultiChannelWaveform(np.ones((3, 10)), 16000), 0.0)


class TestSensorNoise:

    def test_per_channel_snr_is_exact(self):
        rng = np.random.default_rng(5)
        clean = MultiChannelWaveform(np.tile(rng.standard_normal(8000), (4, 1)), 16000)
        noisy = add_sensor_noise(clean, 5.0, seed=7)
        for i in range(4):
            assert snr(noisy.channel(i), clean.channel(i)) == pytest.approx(5.0, abs=0.1)

    def test_deterministic_per_seed(self):
        clean = MultiChannelWaveform(np.ones((2, 1000)), 16000)
        a = sensor_noise(clean, 0.0, seed=1)
        b = sensor_noise(clean, 0.0, seed=1)
        c = sensor_noise(clean, 0.0, seed=2)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
        assert np.sum(a.data ** 2) == pytest.approx(np.sum(c.data ** 2), rel=0.01)

    def test_channels_independent(self):
        clean = MultiChannelWaveform(np.ones((2, 20000)), 16000)
        noise = sensor_noise(clean, 0.0, seed=3).data
        correlation = np.dot(noise[0], noise[1]) / np.sqrt(np.dot(noise[0], noise[0]) * np.dot(noise[1], noise[1]))
        assert abs(correlation) < 0.05

    def test_high_snr_is_near_identity(self):
        rng = np.random.default_rng(6)
        clean = MultiChannelWaveform(rng.standard_normal((2, 1000)), 16000)
        np.testing.assert_allclose(add_sensor_noise(clean, 80.0, seed=0).data, clean.data, atol=1e-2)


class TestOverlapLayout:

    def test_eighty_percent_of_four_seconds(self):
        layout = overlap_layout(64000, 64000, 0.8)
        assert layout['overlap_samples'] == 51200
        assert layout['interferer_onset_samples'] == 12800
        assert layout['length_samples'] == 76800

    def test_full_overlap_centres_shorter_source(self):
        layout = overlap_layout(1000, 600, 1.0)
        assert layout['interferer_onset_samples'] == 200
        assert layout['length_samples'] == 1000
        assert layout['overlap_samples'] == 600
        layout = overlap_layout(600, 1000, 1.0)
        assert layout['target_onset_samples'] == 200
        assert layout['length_samples'] == 1000

    def test_partial_overlap_joins_target_tail_to_interferer_head(self):
        # 部分重叠时两源只能首尾相接, 重叠区间就是目标的末尾 O 个样本
        layout = overlap_layout(1000, 600, 0.5)
        assert layout['target_onset_samples'] == 0
        assert layout['interferer_onset_samples'] == 700
        assert (layout['overlap_start_samples'], layout['overlap_stop_samples']) == (700, 1000)
        assert layout['length_samples'] == 1300

    def test_no_overlap(self):
        layout = overlap_layout(500, 700, 0.0)
        assert layout['interferer_onset_samples'] == 500
        assert layout['overlap_samples'] == 0
        assert layout['length_samples'] == 1200


class TestScenario:

    def test_invalid_overlap(self):
        with pytest.raises(InvalidValue):
            Scenario('a.wav', 'b.wav', 10.0, 20.0, overlap_ratio=1.5)

    def test_invalid_angle(self):
        with pytest.raises(InvalidAngle):
            Scenario('a.wav', 'b.wav', 200.0, 20.0)

    def test_defaults(self):
        scenario = Scenario('a.wav', 'b.wav', 10.0, 20.0)
        assert scenario.sir_db == 1.5
        assert scenario.overlap_ratio == 0.8
        assert scenario.noise_snr_db is None

    def test_paths_relative_to_file(self, tmp_path):
        path = tmp_path / 'scene.json'
        path.write_text(json.dumps({'target_wav_path': 'src/t.wav', 'interferer_wav_path': 'i.wav',
                                    'theta_target_deg': 30, 'theta_interferer_deg': 100}))
        scenario = load_scenario(str(path))
        assert scenario.target_wav_path == os.path.join(str(tmp_path), 'src', 't.wav')

    def test_missing_field(self, tmp_path):
        path = tmp_path / 'scene.json'
        path.write_text(json.dumps({'target_wav_path': 't.wav', 'theta_target_deg': 30,
                                    'theta_interferer_deg': 100}))
        with pytest.raises(InvalidValue):
            load_scenario(str(path))


class TestSimulateScenario:

    def test_decomposition_is_exact_in_float32(self, scenes):
        _, bundle = scenes.bundle(seed=10)
        mixture = bundle.mixture.data.astype(np.float32)
        expected = bundle.target_image.data.astype(np.float32) + bundle.interferer_image.data.astype(np.float32)
        np.testing.assert_array_equal(mixture, expected)
        assert bundle.noise is None

    def test_decomposition_with_noise(self, scenes):
        _, bundle = scenes.bundle(seed=11, noise_snr_db=20.0)
        target = bundle.target_image.data.astype(np.float32)
        interferer = bundle.interferer_image.data.astype(np.float32)
        noise = bundle.noise.data.astype(np.float32)
        np.testing.assert_array_equal(bundle.mixture.data.astype(np.float32), (target + interferer) + noise)

    def test_reference_channel_is_source(self, scenes):
        scenario, bundle = scenes.bundle(seed=12)
        source = read_wav(scenario.target_wav_path).data[0]
        onset = bundle.metadata['target_onset_samples'] + bundle.metadata['render_margin_samples']
        np.testing.assert_array_equal(bundle.target_image.data[0, onset:onset + len(source)], source)

    def test_deterministic(self, scenes):
        scenario, first = scenes.bundle(seed=13, noise_snr_db=10.0)
        second = simulate_scenario(scenario, None, default_geometry())
        np.testing.assert_array_equal(first.mixture.data, second.mixture.data)
        np.testing.assert_array_equal(first.noise.data, second.noise.data)
        assert first.metadata == second.metadata

    def test_metadata_echoes_sir_and_overlap(self, scenes):
        _, bundle = scenes.bundle(seed=14, seconds=4.0)
        meta = bundle.metadata
        assert meta['achieved_sir_db'] == pytest.approx(1.5, abs=1e-3)
        assert meta['overlap_samples'] == pytest.approx(51200, abs=256)
        assert meta['scenario']['sir_db'] == 1.5
        assert meta['reference_channel'] == 1

    def test_interferer_gain_computed_once(self, scenes, monkeypatch):
        calls = []
        original = simulate_module.sir_gain

        def counting(*args, **kwargs):
            calls.append(args)
            return original(*args, **kwargs)

        monkeypatch.setattr(simulate_module, 'sir_gain', counting)
        _, bundle = scenes.bundle(seed=17)
        assert len(calls) == 1
        assert bundle.metadata['interferer_gain'] > 0

    def test_bundle_round_trip(self, scenes, tmp_path):
        _, bundle = scenes.bundle(seed=15, noise_snr_db=30.0)
        out = str(tmp_path / 'bundle')
        write_bundle(bundle, out, default_geometry())
        for name in (MIXTURE_WAV, TARGET_WAV, INTERFERER_WAV, NOISE_WAV, META_FILE):
            assert os.path.exists(os.path.join(out, name))
        loaded, geometry = read_bundle(out)
        np.testing.assert_array_equal(loaded.mixture.data, bundle.mixture.data)
        np.testing.assert_array_equal(loaded.noise.data, bundle.noise.data)
        assert loaded.metadata == json.loads(json.dumps(bundle.metadata))
        assert geometry.num_mics == 15

    def test_source_sample_rate_checked(self, scenes, tmp_path):
        scenario, _ = scenes.scenario(seed=16)
        write_wav(scenario.target_wav_path, MultiChannelWaveform(np.zeros((1, 100)), 8000))
        with pytest.raises(InvalidValue):
            simulate_scenario(scenario)
