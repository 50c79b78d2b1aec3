import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selfcross.attention import AggregatedSelfMap, PatchGrid
from selfcross.errors import ConfigurationError, ShapeError
from selfcross.guidance import (
    GuidanceLosses,
    SubjectSet,
    cross_attn_response_score,
    evaluate_records,
    pairwise_overlap,
    self_cross_score,
    self_self_overlap,
    total_loss,
)

from conftest import map_of, random_record


def agg_of(values, subject_index=0, grid=None):
    tensor = torch.as_tensor(values, dtype=torch.float64)
    grid = grid or PatchGrid(1, tensor.numel())
    return AggregatedSelfMap(subject_index=subject_index, grid=grid, values=tensor)


def normalized_map(values, token_index=0, grid=None):
    tensor = np.asarray(values, dtype=np.float64)
    return map_of(
        (tensor / tensor.sum()).tolist(), token_index=token_index, normalized=True, grid=grid
    )


class TestResponseScore:
    def test_fully_excited_subjects_score_zero(self):
        grid = PatchGrid(1, 2)
        maps = [
            map_of([1.0, 0.0], token_index=0, normalized=True, grid=grid),
            map_of([0.0, 1.0], token_index=1, normalized=True, grid=grid),
        ]
        score = cross_attn_response_score(maps, SubjectSet((0, 1)))
        assert float(score) == 0.0

    def test_worst_subject_dominates(self):
        grid = PatchGrid(1, 4)
        weak = map_of([0.4, 0.3, 0.2, 0.1], token_index=0, normalized=True, grid=grid)
        weaker = map_of([0.25, 0.25, 0.25, 0.25], token_index=1, normalized=True, grid=grid)
        score = cross_attn_response_score([weak, weaker], SubjectSet((0, 1)))
        assert abs(float(score) - max(1 - 0.4, 1 - 0.25)) < 1e-12

    def test_maxima_point_nine_and_point_four(self):
        grid = PatchGrid(1, 2)
        a = map_of([0.9, 0.1], token_index=0, grid=grid)
        b = map_of([0.4, 0.1], token_index=1, grid=grid)
        score = cross_attn_response_score([a, b], SubjectSet((0, 1)))
        assert abs(float(score) - 0.6) < 1e-12

    def test_single_uniform_subject(self):
        uniform = map_of([0.25] * 4, normalized=True, grid=PatchGrid(2, 2))
        score = cross_attn_response_score([uniform], SubjectSet((0,)))
        assert abs(float(score) - 0.75) < 1e-12

    def test_monotone_in_map_maximum(self, rng):
        grid = PatchGrid(1, 4)
        base = rng.random(4)
        scores = []
        for bump in (0.0, 0.5, 1.5):
            values = base.copy()
            values[0] += bump
            m = map_of(values.tolist(), grid=grid)
            scores.append(float(cross_attn_response_score([m], SubjectSet((0,)))))
        assert scores[0] >= scores[1] >= scores[2]

    def test_empty_subjects_rejected(self):
        with pytest.raises(ConfigurationError):
            SubjectSet(())
        with pytest.raises(ConfigurationError):
            cross_attn_response_score([], SubjectSet((0,)))


class TestPairwiseOverlap:
    def test_disjoint_supports_zero(self):
        grid = PatchGrid(1, 4)
        g = pairwise_overlap(
            agg_of([1.0, 0.0, 0.0, 0.0], grid=grid),
            map_of([0.0, 1.0, 0.0, 0.0], normalized=True, grid=grid),
            agg_of([0.0, 0.0, 1.0, 0.0], grid=grid),
            map_of([0.0, 0.0, 0.0, 1.0], normalized=True, grid=grid),
        )
        assert float(g) == 0.0

    def test_identical_sum_one_maps_give_two(self):
        grid = PatchGrid(1, 2)
        agg_i = agg_of([0.5, 0.5], grid=grid)
        cross_j = map_of([0.5, 0.5], normalized=True, grid=grid)
        cross_i = map_of([0.25, 0.75], normalized=True, grid=grid)
        agg_j = agg_of([0.25, 0.75], grid=grid)
        g = pairwise_overlap(agg_i, cross_i, agg_j, cross_j)
        assert abs(float(g) - 2.0) < 1e-12

    def test_hand_computed_min_sums(self):
        grid = PatchGrid(1, 4)
        g = pairwise_overlap(
            agg_of([0.5, 0.5, 0.0, 0.0], grid=grid),
            map_of([1.0, 0.0, 0.0, 0.0], normalized=True, grid=grid),
            agg_of([0.0, 0.0, 0.0, 1.0], grid=grid),
            map_of([0.0, 0.5, 0.5, 0.0], normalized=True, grid=grid),
        )
        assert abs(float(g) - 0.5) < 1e-12

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            pairwise_overlap(
                agg_of([1.0, 0.0]),
                map_of([1.0, 0.0], normalized=True),
                agg_of([0.5, 0.25, 0.25], grid=PatchGrid(1, 3)),
                map_of([0.0, 1.0], normalized=True),
            )

    def test_symmetry_is_bit_identical(self, rng):
        grid = PatchGrid(2, 2)
        for _ in range(50):
            raw = [rng.random(4) for _ in range(4)]
            agg_i = agg_of((raw[0] / raw[0].sum()).tolist(), grid=grid)
            agg_j = agg_of((raw[1] / raw[1].sum()).tolist(), grid=grid)
            cross_i = normalized_map(raw[2], grid=grid)
            cross_j = normalized_map(raw[3], grid=grid)
            forward = pairwise_overlap(agg_i, cross_i, agg_j, cross_j)
            backward = pairwise_overlap(agg_j, cross_j, agg_i, cross_i)
            assert float(forward) == float(backward)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40)
    def test_bounds_for_sum_one_inputs(self, seed):
        gen = np.random.default_rng(seed)
        grid = PatchGrid(2, 2)
        raw = [gen.random(4) + 1e-6 for _ in range(4)]
        g = pairwise_overlap(
            agg_of((raw[0] / raw[0].sum()).tolist(), grid=grid),
            normalized_map(raw[1], grid=grid),
            agg_of((raw[2] / raw[2].sum()).tolist(), grid=grid),
            normalized_map(raw[3], grid=grid),
        )
        assert 0.0 <= float(g) <= 2.0


class TestSelfCrossScore:
    def _subject_maps(self, rng, grid, count):
        out = []
        for s in range(count):
            raw_a = rng.random(grid.patches) + 1e-6
            raw_c = rng.random(grid.patches) + 1e-6
            out.append(
                (
                    agg_of((raw_a / raw_a.sum()).tolist(), subject_index=s, grid=grid),
                    normalized_map(raw_c, token_index=s, grid=grid),
                )
            )
        return out

    def test_two_subjects_reduce_to_single_pair(self, rng):
        grid = PatchGrid(2, 2)
        per_subject = self._subject_maps(rng, grid, 2)
        score, pairs = self_cross_score(per_subject, SubjectSet((0, 1)))
        g = pairwise_overlap(*per_subject[0], *per_subject[1])
        assert float(score) == float(g)
        assert set(pairs) == {(0, 1)}

    def test_mean_of_three_pairs(self, monkeypatch):
        grid = PatchGrid(1, 1)
        values = iter([0.3, 0.6, 0.9])

        def fake_overlap(*args):
            return torch.tensor(next(values), dtype=torch.float64)

        import selfcross.guidance as guidance_module

        monkeypatch.setattr(guidance_module, "pairwise_overlap", fake_overlap)
        per_subject = [
            (agg_of([1.0], grid=grid), map_of([1.0], normalized=True, grid=grid))
        ] * 3
        score, pairs = self_cross_score(per_subject, SubjectSet((0, 1, 2)))
        assert abs(float(score) - 0.6) < 1e-12
        assert len(pairs) == 3

    def test_three_disjoint_subjects_zero(self):
        grid = PatchGrid(2, 2)
        per_subject = [
            (
                agg_of([1.0 if p == s else 0.0 for p in range(4)], grid=grid),
                map_of(
                    [1.0 if p == s else 0.0 for p in range(4)], normalized=True, grid=grid
                ),
            )
            for s in range(3)
        ]
        score, _ = self_cross_score(per_subject, SubjectSet((0, 1, 2)))
        assert float(score) == 0.0

    def test_single_subject_rejected(self):
        grid = PatchGrid(1, 2)
        per_subject = [(agg_of([0.5, 0.5], grid=grid), map_of([0.5, 0.5], normalized=True, grid=grid))]
        with pytest.raises(ConfigurationError):
            self_cross_score(per_subject, SubjectSet((0,)))

    @pytest.mark.parametrize("count", [2, 3, 4, 5])
    def test_matches_bruteforce_pair_enumeration(self, rng, count):
        grid = PatchGrid(2, 2)
        per_subject = self._subject_maps(rng, grid, count)
        score, _ = self_cross_score(per_subject, SubjectSet(tuple(range(count))))
        total = 0.0
        pairs = 0
        for a, b in itertools.combinations(range(count), 2):
            agg_a, cross_a = per_subject[a]
            agg_b, cross_b = per_subject[b]
            overlap = float(
                np.minimum(agg_a.values.numpy(), cross_b.flat.numpy()).sum()
                + np.minimum(cross_a.flat.numpy(), agg_b.values.numpy()).sum()
            )
            total += overlap
            pairs += 1
        assert abs(float(score) - total / pairs) < 1e-6


class TestTotalLoss:
    def test_direct_sum(self):
        losses = total_loss(0.5, 0.6, 1.0)
        assert abs(losses.total - 1.1) < 1e-12

    def test_lambda_zero_disables_cross_term(self):
        losses = total_loss(0.42, 123.0, 0.0)
        assert losses.total == 0.42

    def test_zero_case(self):
        assert total_loss(0.0, 0.0, 17.5).total == 0.0

    def test_inconsistent_total_rejected(self):
        with pytest.raises(ConfigurationError):
            GuidanceLosses(
                s_cross_attn=1.0, s_self_cross=1.0, pairwise={}, total=5.0, lam=1.0
            )


class TestSelfSelfOverlap:
    def test_identical_sum_one_maps(self):
        grid = PatchGrid(1, 2)
        assert float(self_self_overlap(agg_of([0.5, 0.5], grid=grid), agg_of([0.5, 0.5], grid=grid))) == 1.0

    def test_disjoint(self):
        grid = PatchGrid(1, 2)
        assert float(self_self_overlap(agg_of([1.0, 0.0], grid=grid), agg_of([0.0, 1.0], grid=grid))) == 0.0

    def test_min_sum_by_hand(self):
        grid = PatchGrid(1, 2)
        overlap = self_self_overlap(agg_of([0.5, 0.5], grid=grid), agg_of([0.25, 0.75], grid=grid))
        assert abs(float(overlap) - 0.75) < 1e-12


class TestMinSubgradient:
    """The overlap terms use min(); its one-sided slopes drive the guidance gradient."""

    def test_sides_and_tie(self):
        a = torch.tensor([1.0, 3.0, 2.0], dtype=torch.float64, requires_grad=True)
        b = torch.tensor([2.0, 2.0, 2.0], dtype=torch.float64, requires_grad=True)
        torch.minimum(a, b).sum().backward()
        assert a.grad.tolist() == [1.0, 0.0, 0.5]
        assert b.grad.tolist() == [0.0, 1.0, 0.5]

    def test_flat_region_gives_zero_gradient(self):
        # Strictly positive map against a zero partner: the overlap stays 0
        # for any small perturbation, and the gradient is the zero vector.
        agg_values = torch.tensor([0.6, 0.4], dtype=torch.float64, requires_grad=True)
        other = torch.zeros(2, dtype=torch.float64)
        loss = torch.minimum(agg_values, other).sum()
        loss.backward()
        assert float(loss.detach()) == 0.0
        assert agg_values.grad.abs().max() == 0.0


class TestEvaluateRecords:
    def test_runs_full_pipeline_on_record(self, rng):
        record = random_record(rng, grid=PatchGrid(4, 4), tokens=4)
        losses = evaluate_records([record], SubjectSet((1, 3)), lam=1.0)
        assert losses.total == pytest.approx(
            losses.s_self_cross + losses.s_cross_attn, abs=1e-9
        )
        assert set(losses.pairwise) == {(1, 3)}

    def test_subject_out_of_range(self, rng):
        record = random_record(rng, tokens=3)
        with pytest.raises(ConfigurationError):
            evaluate_records([record], SubjectSet((1, 7)), lam=1.0)
