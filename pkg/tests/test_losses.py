import math

import numpy as np
import pytest

from voxelforge.losses import (
    DomainError,
    InfinitePsnr,
    LossWeights,
    ShapeMismatch,
    adversarial_lsq,
    adversarial_minmax,
    combined_loss,
    evaluate,
    evaluate_pairs,
    gdl,
    mae,
    mse,
    psnr,
    spatial_gradient,
)
from voxelforge.volume import IntensityDomain, minmax_normalize

import oracles
from conftest import raw_volume, unit_volume


class TestDistances:
    def test_mae_identity(self, rng):
        x = rng.random(17)
        assert mae(x, x) == 0.0

    def test_mae_hand_values(self):
        assert mae([0.0, 1.0], [1.0, 1.0]) == 0.5
        assert mae([0.0, 0.5], [1.0, 0.5]) == 0.5

    def test_mse_hand_values(self):
        assert mse([0.0, 0.5], [1.0, 0.5]) == 0.5
        assert mse([0.0, 2.0], [2.0, 0.0]) == 4.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mae(np.zeros(3), np.zeros(4))
        with pytest.raises(ShapeMismatch):
            mse(np.zeros((2, 2)), np.zeros(4))

    def test_matches_scalar_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 200))
            x = rng.random(n)
            y = rng.random(n)
            assert mae(x, y) == pytest.approx(oracles.mae_oracle(x, y), rel=1e-13)
            assert mse(x, y) == pytest.approx(oracles.mse_oracle(x, y), rel=1e-13)

    def test_jensen_inequality(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 64))
            x = rng.random(n)
            y = rng.random(n)
            assert mae(x, y) <= math.sqrt(mse(x, y)) + 1e-15

    def test_symmetry_and_zero_iff_equal(self, rng):
        x = rng.random(31)
        y = rng.random(31)
        assert mae(x, y) == mae(y, x)
        assert mse(x, y) == mse(y, x)
        assert mae(x, y) > 0 and mse(x, y) > 0


class TestGradient:
    def test_interior_rule(self):
        np.testing.assert_array_equal(spatial_gradient([0.0, 1.0, 0.0]), [0.0, 1.0, 0.0])

    def test_constant_is_zero(self):
        np.testing.assert_array_equal(spatial_gradient(np.full(7, 3.3)), np.zeros(7))

    def test_two_elements_no_interior(self):
        np.testing.assert_array_equal(spatial_gradient([5.0, 9.0]), [0.0, 0.0])

    def test_matches_oracle(self, rng):
        for strict in (True, False):
            for _ in range(30):
                x = rng.random(int(rng.integers(1, 40)))
                expected = oracles.gradient_oracle(list(x), strict)
                np.testing.assert_allclose(
                    spatial_gradient(x, 0, strict_boundary=strict), expected
                )

    def test_multi_axis(self, rng):
        x = rng.random((4, 5, 6))
        g = spatial_gradient(x, axis=1)
        np.testing.assert_array_equal(g[:, 0, :], 0.0)
        np.testing.assert_array_equal(g[:, -1, :], 0.0)
        np.testing.assert_allclose(g[:, 1:-1, :], x[:, 1:-1, :] - x[:, 2:, :])


class TestGdl:
    def test_identity(self, rng):
        x = rng.random((5, 5))
        assert gdl(x, x) == 0.0

    def test_1d_hand_value(self):
        assert gdl([0.0, 1.0, 0.0], [0.0, 0.0, 0.0]) == pytest.approx(1.0 / 3.0)

    def test_constant_offset_invariance(self, rng):
        x = rng.random((6, 7))
        assert gdl(x, x + 0.25) == pytest.approx(0.0, abs=1e-15)

    def test_matches_1d_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 50))
            x = rng.random(n)
            y = rng.random(n)
            assert gdl(x, y) == pytest.approx(oracles.gdl_oracle_1d(list(x), list(y)), rel=1e-12)


class TestCombinedLoss:
    def test_projects_to_mae(self, rng):
        x = rng.random(9)
        y = rng.random(9)
        weights = LossWeights(lambda_mae=1.0, lambda_mse=0.0, lambda_gdl=0.0)
        assert combined_loss(x, y, weights) == mae(x, y)

    def test_tiny_gdl_weight(self):
        x = np.array([0.0, 1.0, 0.0])
        y = np.array([0.0, 0.0, 0.0])
        weights = LossWeights(lambda_mae=1.0, lambda_gdl=1e-7)
        expected = mae(x, y) + 1e-7 * (1.0 / 3.0)
        assert combined_loss(x, y, weights) == pytest.approx(expected, rel=1e-15)

    def test_all_zero_weights(self, rng):
        x = rng.random(5)
        weights = LossWeights(lambda_mae=0.0)
        assert combined_loss(x, rng.random(5), weights) == 0.0

    def test_linearity_in_each_weight(self, rng):
        x = rng.random(64)
        y = rng.random(64)
        for name in ("lambda_mae", "lambda_mse", "lambda_gdl"):
            base = LossWeights(lambda_mae=0.0)
            single = LossWeights(**{"lambda_mae": 0.0, name: 0.7})
            double = LossWeights(**{"lambda_mae": 0.0, name: 1.4})
            low = combined_loss(x, y, single) - combined_loss(x, y, base)
            high = combined_loss(x, y, double) - combined_loss(x, y, base)
            assert high == pytest.approx(2.0 * low, rel=1e-12)

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_gdl=-1.0)


class TestAdversarial:
    def test_perfect_discriminator(self):
        assert adversarial_minmax(np.ones(4), np.zeros(4)) == 0.0
        assert adversarial_lsq(np.ones(4), np.zeros(4), form="standard") == 0.0
        assert adversarial_lsq(np.ones(4), np.zeros(4), form="log_squares") == 0.0

    def test_half_scores(self):
        half = np.full(6, 0.5)
        assert adversarial_minmax(half, half) == pytest.approx(2 * math.log(0.5))
        assert adversarial_lsq(half, half, form="standard") == pytest.approx(0.5)
        assert adversarial_lsq(half, half, form="log_squares") == pytest.approx(
            2 * math.log(0.25)
        )

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            adversarial_minmax(np.zeros(3), np.zeros(3))
        with pytest.raises(DomainError):
            adversarial_minmax(np.ones(3), np.ones(3))
        with pytest.raises(DomainError):
            adversarial_lsq(np.zeros(3), np.zeros(3), form="log_squares")

    def test_matches_oracles(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 64))
            d_real = rng.random(n) * 0.98 + 0.01
            d_fake = rng.random(n) * 0.98 + 0.01
            assert adversarial_minmax(d_real, d_fake) == pytest.approx(
                oracles.adversarial_minmax_oracle(d_real, d_fake), rel=1e-12
            )
            assert adversarial_lsq(d_real, d_fake, "standard") == pytest.approx(
                oracles.adversarial_lsq_standard_oracle(d_real, d_fake), rel=1e-12
            )
            assert adversarial_lsq(d_real, d_fake, "log_squares") == pytest.approx(
                oracles.adversarial_lsq_log_oracle(d_real, d_fake), rel=1e-12
            )

    def test_standard_form_minimized_at_optimum(self):
        best = adversarial_lsq(np.ones(3), np.zeros(3), form="standard")
        assert best == 0.0
        for real in (0.2, 0.6, 0.9):
            for fake in (0.1, 0.5, 0.8):
                value = adversarial_lsq(np.full(3, real), np.full(3, fake), "standard")
                assert value > best


class TestPsnr:
    def test_reference_value(self):
        x = np.array([0.0, math.sqrt(2 * 6577.0)])
        y = np.array([0.0, 0.0])
        assert mse(x, y) == pytest.approx(6577.0)
        assert psnr(x, y, 65535.0) == pytest.approx(58.15, abs=0.01)

    def test_zero_db_endpoint(self):
        x = np.array([65535.0])
        y = np.array([0.0])
        assert psnr(x, y, 65535.0) == pytest.approx(0.0, abs=1e-12)

    def test_infinite_on_equal(self):
        with pytest.raises(InfinitePsnr):
            psnr(np.ones(3), np.ones(3))

    def test_strictly_decreasing_in_mse(self):
        y = np.zeros(1)
        values = [psnr(np.array([e]), y, 65535.0) for e in (10.0, 100.0, 1000.0)]
        assert values[0] > values[1] > values[2]

    def test_matches_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 64))
            x = rng.random(n) * 100
            y = rng.random(n) * 100
            assert psnr(x, y, 65535.0) == pytest.approx(
                oracles.psnr_oracle(list(x), list(y), 65535.0), rel=1e-12
            )


class TestEvaluate:
    def test_equal_volumes_flagged_infinite(self, rng):
        v = unit_volume(rng.random((3, 4, 5)).astype(np.float32))
        report = evaluate(v, v)
        entry = report.volumes[0]
        assert entry.mae == 0.0 and entry.mse == 0.0
        assert entry.infinite_psnr
        assert report.to_dict()["volumes"][0]["psnr"] is None

    def test_single_voxel_endpoint(self):
        pred = raw_volume(np.zeros((1, 1, 1), dtype=np.uint16))
        truth = raw_volume(np.full((1, 1, 1), 65535, dtype=np.uint16))
        entry = evaluate(pred, truth).volumes[0]
        assert entry.mae == 65535.0
        assert entry.mse == 65535.0**2
        assert entry.psnr == pytest.approx(0.0, abs=1e-12)

    def test_aggregate_is_voxel_weighted(self, rng):
        # two equal-size volumes with mse 100 and 300 average to 200
        a = unit_volume(np.zeros((2, 2, 2), dtype=np.float32))
        b = unit_volume(np.full((2, 2, 2), 10 / 65535, dtype=np.float32))
        c = unit_volume(np.full((2, 2, 2), math.sqrt(300) / 65535, dtype=np.float32))
        a = a.with_voxels(a.voxels, IntensityDomain.UNIT, raw_range=(0.0, 65535.0))
        b = b.with_voxels(b.voxels, IntensityDomain.UNIT, raw_range=(0.0, 65535.0))
        c = c.with_voxels(c.voxels, IntensityDomain.UNIT, raw_range=(0.0, 65535.0))
        report = evaluate_pairs([(b, a), (c, a)])
        assert report.volumes[0].mse == pytest.approx(100.0, rel=1e-6)
        assert report.volumes[1].mse == pytest.approx(300.0, rel=1e-6)
        assert report.aggregate_mse == pytest.approx(200.0, rel=1e-6)

    def test_unit_volumes_denormalized_through_raw_range(self, rng):
        raw = rng.integers(100, 60000, size=(4, 4, 4)).astype(np.uint16)
        truth_raw = raw_volume(raw)
        truth_unit = minmax_normalize(truth_raw)
        pred_unit = truth_unit.with_voxels(
            np.clip(truth_unit.voxels + 0.01, 0, 1).astype(np.float32),
            IntensityDomain.UNIT,
        )
        report = evaluate(pred_unit, truth_unit)
        lo, hi = truth_unit.raw_range
        span = hi - lo
        expected_mae = np.abs(
            pred_unit.voxels.astype(np.float64) * span
            - truth_unit.voxels.astype(np.float64) * span
        ).mean()
        assert report.volumes[0].mae == pytest.approx(expected_mae, rel=1e-9)

    def test_both_psnr_aggregations_reported(self):
        a_truth = unit_volume(np.zeros((2, 2, 2), dtype=np.float32), )
        a_truth = a_truth.with_voxels(a_truth.voxels, IntensityDomain.UNIT, raw_range=(0.0, 65535.0))
        preds = [
            a_truth.with_voxels(np.full((2, 2, 2), v, dtype=np.float32),
                                IntensityDomain.UNIT)
            for v in (0.001, 0.01)
        ]
        report = evaluate_pairs([(preds[0], a_truth), (preds[1], a_truth)])
        pooled = report.psnr_of_aggregate_mse
        averaged = report.mean_volume_psnr
        assert pooled != pytest.approx(averaged)
        table = report.to_table()
        assert "pooled" in table and "mean" in table

    def test_shape_mismatch(self, rng):
        a = unit_volume(rng.random((2, 2, 2)).astype(np.float32))
        b = unit_volume(rng.random((2, 2, 3)).astype(np.float32))
        with pytest.raises(ShapeMismatch):
            evaluate(a, b)
