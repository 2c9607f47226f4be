import math

import pytest
import torch

from umkd.errors import InputError, NumericError
from umkd.udd import (ScaleSet, accumulate_logits, partition_cells,
                      udd_cell_loss, udd_loss, uncertainty)


def cell_positions(cells, height, width):
    covered = []
    for rows, cols in cells:
        covered.extend(
            (r, c)
            for r in range(*rows.indices(height))
            for c in range(*cols.indices(width))
        )
    return covered


class TestPartition:
    def test_even_division(self):
        cells = partition_cells(4, 4, 2)
        assert len(cells) == 4
        sizes = [len(cell_positions([cell], 4, 4)) for cell in cells]
        assert sizes == [4, 4, 4, 4]

    def test_degenerate_scale_one(self):
        cells = partition_cells(5, 7, 1)
        assert len(cells) == 1
        assert len(cell_positions(cells, 5, 7)) == 35

    def test_remainder_rule_five_by_five(self):
        cells = partition_cells(5, 5, 2)
        sizes = sorted(len(cell_positions([cell], 5, 5)) for cell in cells)
        assert sizes == [4, 6, 6, 9]
        assert sum(sizes) == 25

    @pytest.mark.parametrize("height", range(4, 10))
    @pytest.mark.parametrize("width", range(4, 10))
    @pytest.mark.parametrize("scale", (1, 2, 4))
    def test_disjoint_cover(self, height, width, scale):
        cells = partition_cells(height, width, scale)
        assert len(cells) == scale**2
        covered = cell_positions(cells, height, width)
        assert len(covered) == height * width
        assert len(set(covered)) == height * width

    def test_out_of_range_scale(self):
        with pytest.raises(InputError):
            partition_cells(4, 4, 5)
        with pytest.raises(InputError):
            partition_cells(4, 4, 0)


class TestAccumulate:
    def test_constant_map_one_position_cells(self):
        # H = W = w: every cell holds one position, so psi = c / w^2
        for w in (2, 3):
            logits = torch.full((3, w, w), 5.0)
            psi = accumulate_logits(logits, w)
            assert torch.allclose(psi, torch.full((3, w * w), 5.0 / w**2))

    def test_scale_one_is_total_sum(self):
        logits = torch.randn(4, 5, 6)
        psi = accumulate_logits(logits, 1)
        assert torch.allclose(psi.squeeze(-1), logits.sum(dim=(-2, -1)), atol=1e-5)

    def test_two_by_two_hand_values(self):
        logits = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        psi = accumulate_logits(logits, 2)
        assert torch.allclose(psi[0], torch.tensor([0.25, 0.5, 0.75, 1.0]))

    def test_cell_mean_rule(self):
        logits = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        psi = accumulate_logits(logits, 2, rule="cell-mean")
        assert torch.allclose(psi[0], torch.tensor([1.0, 2.0, 3.0, 4.0]))

    def test_batched_shape(self):
        psi = accumulate_logits(torch.randn(2, 3, 4, 4), 2)
        assert psi.shape == (2, 3, 4)

    def test_unknown_rule(self):
        with pytest.raises(InputError):
            accumulate_logits(torch.randn(2, 4, 4), 2, rule="nope")


class TestUncertainty:
    def test_uniform_logits(self):
        assert uncertainty(torch.zeros(4)).item() == pytest.approx(0.75)

    def test_confident_logits(self):
        psi = torch.tensor([10.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        u = uncertainty(psi).item()
        expected = 3.0 / (math.exp(10.0) + 3.0)
        assert u == pytest.approx(expected, rel=1e-9)
        assert u == pytest.approx(1.36e-4, rel=5e-3)

    def test_shift_invariance(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            psi = torch.randn(5, generator=gen, dtype=torch.float64)
            a = uncertainty(psi).item()
            b = uncertainty(psi + 7.3).item()
            assert abs(a - b) <= 1e-9

    def test_bounds(self):
        gen = torch.Generator().manual_seed(1)
        for _ in range(200):
            c = int(torch.randint(2, 8, (1,), generator=gen))
            psi = 3 * torch.randn(c, generator=gen)
            u = uncertainty(psi).item()
            assert 0.0 <= u <= 1.0 - 1.0 / c + 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            uncertainty(torch.tensor([1.0, float("inf")]))


class TestCellLoss:
    def test_zero_iff_equal(self):
        psi = torch.randn(4, generator=torch.Generator().manual_seed(2))
        assert udd_cell_loss(psi, psi.clone()).item() == 0.0

    def test_shifted_logits_hand_value(self):
        # softmaxes agree -> only the raw-logit term remains, weighted 1-u=0.5
        loss = udd_cell_loss(torch.zeros(2), torch.ones(2))
        assert loss.item() == pytest.approx(1.0, abs=1e-7)

    def test_log3_hand_value(self):
        loss = udd_cell_loss(torch.zeros(2, dtype=torch.float64),
                             torch.tensor([math.log(3.0), 0.0],
                                          dtype=torch.float64))
        tckd = 2 * 0.25**2
        nckd = math.log(3.0) ** 2
        expected = 2.5 * tckd + 0.5 * nckd
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert loss.item() == pytest.approx(0.9160, abs=1e-4)

    def test_strictly_positive_when_different(self):
        gen = torch.Generator().manual_seed(3)
        for _ in range(200):
            psi_t = torch.randn(4, generator=gen)
            psi_s = psi_t + 0.01 * torch.randn(4, generator=gen)
            if torch.equal(psi_t, psi_s):
                continue
            assert udd_cell_loss(psi_t, psi_s).item() > 0.0
        # same softmax, different logits: the raw-logit term still fires
        assert udd_cell_loss(torch.zeros(3), torch.full((3,), 2.0)).item() > 0.0

    def test_realized_weights_stay_in_closed_ranges(self):
        gen = torch.Generator().manual_seed(4)
        for _ in range(1000):
            c = int(torch.randint(2, 7, (1,), generator=gen))
            psi_t = 2 * torch.randn(c, generator=gen, dtype=torch.float64)
            u = uncertainty(psi_t).item()
            tckd_weight, nckd_weight = 2.0 + u, 1.0 - u
            assert 2.0 <= tckd_weight <= 3.0 - 1.0 / c + 1e-12
            assert 1.0 / c - 1e-12 <= nckd_weight <= 1.0

    def test_loss_slope_in_u_is_tckd_minus_nckd(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(50):
            psi_t = torch.randn(4, generator=gen, dtype=torch.float64)
            psi_s = torch.randn(4, generator=gen, dtype=torch.float64)
            tckd = (torch.softmax(psi_t, -1) - torch.softmax(psi_s, -1)) \
                .pow(2).sum().item()
            nckd = (psi_t - psi_s).pow(2).sum().item()
            u = uncertainty(psi_t).item()
            loss = udd_cell_loss(psi_t, psi_s).item()
            assert loss == pytest.approx((2 + u) * tckd + (1 - u) * nckd, rel=1e-9)
            delta = 1e-3
            at_u = (2 + u) * tckd + (1 - u) * nckd
            at_u_plus = (2 + u + delta) * tckd + (1 - u - delta) * nckd
            assert at_u_plus - at_u == pytest.approx(delta * (tckd - nckd), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            udd_cell_loss(torch.zeros(3), torch.zeros(4))


class TestUddLoss:
    scales = ScaleSet((1, 2, 4))

    def test_scale_set_validation(self):
        with pytest.raises(InputError):
            ScaleSet((2, 4))
        with pytest.raises(InputError):
            ScaleSet((1, 4, 2))
        with pytest.raises(InputError):
            ScaleSet(())

    def test_identical_maps_give_zero(self):
        maps = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(6))
        assert udd_loss([maps, maps], maps.clone(), self.scales).item() == 0.0

    def test_duplicated_expert_equals_single(self):
        gen = torch.Generator().manual_seed(7)
        teacher = torch.randn(2, 3, 4, 4, generator=gen)
        student = torch.randn(2, 3, 4, 4, generator=gen)
        one = udd_loss([teacher], student, self.scales).item()
        two = udd_loss([teacher, teacher], student, self.scales).item()
        assert two == pytest.approx(one, rel=1e-6)

    def test_single_cell_map_reduces_to_cell_loss(self):
        gen = torch.Generator().manual_seed(8)
        teacher = torch.randn(3, 1, 1, generator=gen)
        student = torch.randn(3, 1, 1, generator=gen)
        via_map = udd_loss([teacher], student, ScaleSet((1,))).item()
        via_cell = udd_cell_loss(teacher.flatten(), student.flatten()).item()
        assert via_map == pytest.approx(via_cell, rel=1e-6)

    def test_vectorized_matches_per_cell_loop(self):
        gen = torch.Generator().manual_seed(9)
        teacher = torch.randn(2, 3, 5, 6, generator=gen, dtype=torch.float64)
        student = torch.randn(2, 3, 5, 6, generator=gen, dtype=torch.float64)
        scales = ScaleSet((1, 2, 4))
        expected = 0.0
        for b in range(2):
            for scale in scales.scales:
                psi_t = accumulate_logits(teacher[b], scale)
                psi_s = accumulate_logits(student[b], scale)
                for n in range(scale**2):
                    expected += udd_cell_loss(psi_t[:, n], psi_s[:, n]).item()
        expected /= 2  # batch mean, single expert
        got = udd_loss([teacher], student, scales).item()
        assert got == pytest.approx(expected, rel=1e-10)

    def test_scale_exceeding_map_rejected(self):
        with pytest.raises(InputError):
            udd_loss([torch.randn(1, 2, 2, 2)], torch.randn(1, 2, 2, 2),
                     self.scales)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            udd_loss([torch.randn(1, 2, 4, 4)], torch.randn(1, 3, 4, 4),
                     self.scales)
