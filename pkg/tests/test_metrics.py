import numpy as np
import pytest

from app.core import LengthMismatch, Waveform, ZeroReference
from app.metrics import MetricReport, evaluate, si_snr, snr


def _wave(samples):
    return Waveform(np.asarray(samples, dtype=np.float64), 16000)


@pytest.fixture
def reference():
    rng = np.random.default_rng(0)
    return _wave(rng.standard_normal(4000))


class TestSiSnr:

    def test_identical_signals_hit_clamp(self, reference):
        assert si_snr(reference, reference) == 80.0

    def test_scale_invariant(self, reference):
        rng = np.random.default_rng(1)
        estimate = _wave(reference.samples + 0.3 * rng.standard_normal(4000))
        scaled = _wave(7.5 * estimate.samples)
        assert si_snr(scaled, reference) == pytest.approx(si_snr(estimate, reference), abs=1e-9)

    @pytest.mark.parametrize('scale', [-3.0, 0.01, 250.0])
    def test_symmetric_under_joint_scaling(self, reference, scale):
        rng = np.random.default_rng(3)
        estimate = _wave(reference.samples + 0.5 * rng.standard_normal(4000))
        joint = si_snr(_wave(scale * estimate.samples), _wave(scale * reference.samples))
        assert joint == pytest.approx(si_snr(estimate, reference), abs=1e-6)

    def test_orthogonal_error(self):
        n = np.arange(8000)
        ref = np.sin(2 * np.pi * 5 * n / 8000)
        error = 0.1 * np.cos(2 * np.pi * 5 * n / 8000)
        assert si_snr(_wave(ref + error), _wave(ref)) == pytest.approx(20.0, abs=1e-6)

    def test_zero_reference(self):
        with pytest.raises(ZeroReference):
            si_snr(_wave(np.ones(10)), _wave(np.full(10, 3.0)))

    def test_length_mismatch(self, reference):
        with pytest.raises(LengthMismatch):
            si_snr(_wave(np.zeros(10)), reference)

    def test_lower_clamp(self, reference):
        rng = np.random.default_rng(2)
        noise = rng.standard_normal(4000)
        noise -= noise.mean()
        ref = reference.samples - reference.samples.mean()
        orthogonal = noise - np.dot(noise, ref) / np.dot(ref, ref) * ref
        assert si_snr(_wave(orthogonal), reference) == -80.0


class TestSnr:

    def test_known_value(self, reference):
        estimate = _wave(1.1 * reference.samples)
        assert snr(estimate, reference) == pytest.approx(20.0, abs=1e-6)

    def test_not_scale_invariant(self, reference):
        assert snr(_wave(2.0 * reference.samples), reference) == pytest.approx(0.0, abs=1e-6)


class TestEvaluate:

    def test_record_field_order(self, reference):
        report = evaluate(reference, reference)
        assert isinstance(report, MetricReport)
        assert list(report.to_dict()) == ['si_snr_db', 'snr_db', 'length_samples']
        assert report.length_samples == 4000
        assert report.snr_db == 80.0
