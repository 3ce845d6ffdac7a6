import json

import numpy as np
import pytest

from app import create_app
from app.core import ArrayGeometry, MultiChannelWaveform, SignalConfig, default_geometry, dump_geometry
from app.simulate import Scenario, simulate_scenario
from app.stft import StftPlan
from app.tensorio import write_wav

SAMPLE_RATE = 16000


@pytest.fixture
def app(tmp_path):
    app = create_app(overrides={
        'TESTING': True,
        'SQLALCHEMY_DATABASE_URI': 'sqlite://',
        'LOG_FILE': str(tmp_path / 'test.log'),
    })
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def config():
    return SignalConfig()


@pytest.fixture
def plan(config):
    return StftPlan.from_config(config)


@pytest.fixture
def geometry():
    return default_geometry()


def source_signal(rng, length, amplitude=0.1):
    """带慢变包络的白噪声, 以 float32 可精确表示的值返回。"""
    envelope = 0.5 + 0.5 * np.abs(np.sin(np.linspace(0.0, 6.0 * np.pi, length)))
    samples = amplitude * envelope * rng.standard_normal(length)
    return samples.astype(np.float32).astype(np.float64)


def write_mono(path, samples, sample_rate=SAMPLE_RATE):
    write_wav(str(path), MultiChannelWaveform(np.asarray(samples)[None, :], sample_rate), bit_depth=32)
    return str(path)


class SceneFactory:
    """在临时目录里写出两个源信号和场景文件, 并返回 (场景, 场景文件路径)。"""

    def __init__(self, root):
        self.root = root
        self.count = 0

    def scenario(self, seed=0, theta_target=60.0, theta_interferer=120.0, sir_db=1.5, overlap_ratio=0.8,
                 noise_snr_db=None, seconds=1.0, geometry=None, target_len=None, interferer_len=None):
        self.count += 1
        rng = np.random.default_rng(seed)
        length = int(seconds * SAMPLE_RATE)
        target = source_signal(rng, target_len or length)
        interferer = source_signal(rng, interferer_len or length)
        directory = self.root / f"scene_{self.count}"
        directory.mkdir()
        write_mono(directory / 'target_src.wav', target)
        write_mono(directory / 'interferer_src.wav', interferer)

        payload = {
            'target_wav_path': 'target_src.wav',
            'interferer_wav_path': 'interferer_src.wav',
            'theta_target_deg': theta_target,
            'theta_interferer_deg': theta_interferer,
            'sir_db': sir_db,
            'overlap_ratio': overlap_ratio,
            'noise_snr_db': noise_snr_db,
            'seed': seed,
            'sample_rate_hz': SAMPLE_RATE,
        }
        if geometry is not None:
            dump_geometry(geometry, str(directory / 'geometry.json'))
            payload['geometry_path'] = 'geometry.json'
        path = directory / 'scenario.json'
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f)
        return Scenario.from_dict(payload, str(directory)), str(path)

    def bundle(self, geometry=None, config=None, **kwargs):
        scenario, _ = self.scenario(geometry=geometry, **kwargs)
        return scenario, simulate_scenario(scenario, config, geometry or default_geometry())


@pytest.fixture
def scenes(tmp_path):
    return SceneFactory(tmp_path)


@pytest.fixture
def small_array():
    """4 麦克风、4 cm 间距线阵, 两个麦克风对, 参考通道 1。"""
    return ArrayGeometry.uniform_linear(4, 0.04, pairs=((0, 3), (1, 2)), reference_channel=0)
