import numpy as np
import pytest

from app.core import ComplexSpectrogram, DimensionMismatch, InvalidValue, TimeFrequencyMask
from app.masking import (MaskKind, MaskSpec, apply_mask, complement_mask, ideal_complex_mask,
                         ideal_ratio_mask)


def _random_spec(rng, shape=(1, 12, 33), scale=1.0):
    return ComplexSpectrogram(scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)))


class TestComplexMask:

    def test_recovers_target_where_unclipped(self):
        rng = np.random.default_rng(0)
        target = _random_spec(rng)
        mixture = ComplexSpectrogram(target.data + _random_spec(rng, scale=0.5).data)
        mask = ideal_complex_mask(target, mixture, clip=1e6)
        np.testing.assert_allclose(apply_mask(mask, mixture).data, target.data, atol=1e-9)

    def test_magnitude_clipped_phase_kept(self):
        target = ComplexSpectrogram(np.full((1, 1, 2), 100.0 * np.exp(1j * 0.7)))
        mixture = ComplexSpectrogram(np.ones((1, 1, 2), dtype=complex))
        mask = ideal_complex_mask(target, mixture, clip=10.0).data
        np.testing.assert_allclose(np.abs(mask), 10.0)
        np.testing.assert_allclose(np.angle(mask), 0.7)

    def test_silent_mixture_bins_are_zero(self):
        target = ComplexSpectrogram(np.ones((1, 2, 2), dtype=complex))
        mixture_data = np.ones((1, 2, 2), dtype=complex)
        mixture_data[0, 1, 1] = 0.0
        mask = ideal_complex_mask(target, ComplexSpectrogram(mixture_data)).data
        assert mask[1, 1] == 0.0
        assert mask[0, 0] == 1.0

    def test_clip_must_be_positive(self):
        spec = ComplexSpectrogram(np.ones((1, 2, 2), dtype=complex))
        with pytest.raises(InvalidValue):
            ideal_complex_mask(spec, spec, clip=0.0)

    def test_multi_channel_reference_rejected(self):
        spec = ComplexSpectrogram(np.ones((2, 2, 2), dtype=complex))
        with pytest.raises(DimensionMismatch):
            ideal_complex_mask(spec, spec)


class TestRatioMask:

    def test_range_and_zero_over_zero(self):
        rng = np.random.default_rng(1)
        target_data = np.array(_random_spec(rng).data, copy=True)
        target_data[0, 0, 0] = 0.0
        interferer_data = np.array(_random_spec(rng).data, copy=True)
        interferer_data[0, 0, 0] = 0.0
        mask = ideal_ratio_mask(ComplexSpectrogram(target_data), ComplexSpectrogram(interferer_data)).data
        assert mask[0, 0] == 0.0
        assert np.all(mask.imag == 0.0)
        assert np.all((mask.real >= 0.0) & (mask.real <= 1.0))

    def test_equal_magnitudes_give_half(self):
        spec = ComplexSpectrogram(np.full((1, 2, 3), 2.0 + 1.0j))
        np.testing.assert_allclose(ideal_ratio_mask(spec, spec).data, 0.5)


class TestApplyMask:

    def test_ones_is_identity(self):
        rng = np.random.default_rng(2)
        mixture = _random_spec(rng)
        mask = TimeFrequencyMask(np.ones((12, 33)))
        np.testing.assert_array_equal(apply_mask(mask, mixture).data, mixture.data)

    def test_unit_imaginary_mask_rotates_phase(self):
        rng = np.random.default_rng(4)
        mixture = _random_spec(rng)
        output = apply_mask(TimeFrequencyMask(np.full((12, 33), 1j)), mixture).data
        np.testing.assert_allclose(output, 1j * mixture.data, atol=1e-15)
        np.testing.assert_allclose(np.abs(output), np.abs(mixture.data), rtol=1e-12)

    def test_zero_mask_silences(self):
        rng = np.random.default_rng(5)
        output = apply_mask(TimeFrequencyMask(np.zeros((12, 33))), _random_spec(rng)).data
        assert np.all(output == 0.0)

    def test_bilinear(self):
        rng = np.random.default_rng(6)
        x, y = _random_spec(rng), _random_spec(rng)
        m1 = TimeFrequencyMask(_random_spec(rng).data[0])
        m2 = TimeFrequencyMask(_random_spec(rng).data[0])
        a, b = 0.5 - 1.5j, 2.0 + 0.25j
        in_mask = apply_mask(TimeFrequencyMask(a * m1.data + b * m2.data), x).data
        np.testing.assert_allclose(in_mask, a * apply_mask(m1, x).data + b * apply_mask(m2, x).data,
                                   rtol=1e-9, atol=1e-12)
        in_mixture = apply_mask(m1, ComplexSpectrogram(a * x.data + b * y.data)).data
        np.testing.assert_allclose(in_mixture, a * apply_mask(m1, x).data + b * apply_mask(m1, y).data,
                                   rtol=1e-9, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply_mask(TimeFrequencyMask(np.ones((3, 3))), ComplexSpectrogram(np.ones((1, 3, 4), dtype=complex)))

    def test_complement(self):
        mask = TimeFrequencyMask(np.array([[0.25, 1.0]]))
        np.testing.assert_allclose(complement_mask(mask).data, [[0.75, 0.0]])


class TestMaskSpec:

    def test_build_dispatches_on_kind(self):
        rng = np.random.default_rng(3)
        target, interferer = _random_spec(rng), _random_spec(rng)
        mixture = ComplexSpectrogram(target.data + interferer.data)
        irm = MaskSpec(MaskKind.RATIO_IDEAL).build(target, mixture, interferer)
        np.testing.assert_allclose(irm.data, ideal_ratio_mask(target, interferer).data)
        cm = MaskSpec(MaskKind.COMPLEX_IDEAL, clip=5.0).build(target, mixture, interferer)
        np.testing.assert_allclose(cm.data, ideal_complex_mask(target, mixture, 5.0).data)

    def test_external_cannot_be_built(self):
        spec = ComplexSpectrogram(np.ones((1, 2, 2), dtype=complex))
        with pytest.raises(InvalidValue):
            MaskSpec(MaskKind.EXTERNAL).build(spec, spec, spec)

    def test_kind_values_match_cli_choices(self):
        assert MaskKind('irm') is MaskKind.RATIO_IDEAL
        assert MaskKind('cm') is MaskKind.COMPLEX_IDEAL
