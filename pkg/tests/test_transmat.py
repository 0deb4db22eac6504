import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from amtubes import transmat
from amtubes.geometry import Box, PyramidConfig, build_anchor_grid, iou
from amtubes.synth import ActorSpec, ScenarioSpec, generate
from amtubes.transmat import (
    BINARY,
    COUNTS,
    NORMALIZED,
    MicroTube,
    TransitionMatrix,
    TransitionSet,
    binarize,
    fit_transition_set,
    merge,
    normalize,
    offdiagonal_mass,
)

from conftest import boxes

GRID3 = build_anchor_grid(PyramidConfig.single(3, 4))
GRID_SMALL = build_anchor_grid(PyramidConfig.from_dict(
    {"levels": [{"side": 5, "r": 4}, {"side": 3, "r": 4}, {"side": 1, "r": 4}]}))


def counts(rows, side):
    return TransitionMatrix(0, side, COUNTS, sparse.csr_array(np.array(rows)))


def probs(rows):
    a = np.array(rows, dtype=float)
    side = int(round(np.sqrt(a.shape[0])))
    return TransitionMatrix(0, side, NORMALIZED, sparse.csr_array(a))


def padded(row, n=4):
    """A normalized matrix whose first row is ``row`` (zero-padded to n entries)."""
    a = np.zeros((n, n))
    a[0, :len(row)] = row
    return probs(a)


def brute_fit(micro_tubes, grid):
    """Reference fitter: scan every anchor of every level with scalar IoU."""
    dense = [np.zeros((lv.side**2, lv.side**2), dtype=int) for lv in grid.config.levels]
    for mt in micro_tubes:
        best = None
        for p in range(grid.config.n_levels):
            flat = grid.flat(p)
            r = grid.level(p).shape[1]
            si = [iou(mt.box_t, Box.from_array(a)) for a in flat]
            sj = [iou(mt.box_t_delta, Box.from_array(a)) for a in flat]
            ki = max(range(len(si)), key=lambda k: (si[k], -k))
            kj = max(range(len(sj)), key=lambda k: (sj[k], -k))
            score = (si[ki] + sj[kj]) / 2
            if best is None or score > best[0]:
                best = (score, p, ki // r, kj // r)
        dense[best[1]][best[2], best[3]] += 1
    return dense


micro_tubes_st = st.lists(
    st.tuples(boxes(min_size=0.02), boxes(min_size=0.02)).map(
        lambda bb: MicroTube(bb[0], bb[1], 1)),
    max_size=40,
)


class TestFit:
    def test_anchor_cuboid(self):
        target = Box.from_array(GRID3.level(0)[4, 0])
        ts = fit_transition_set([MicroTube(target, target, 1)], GRID3)
        dense = ts[0].toarray()
        assert dense[4, 4] == 1
        assert dense.sum() == 1

    def test_two_transitions_from_one_row(self):
        a = GRID3.level(0)
        mts = [MicroTube(Box.from_array(a[0, 0]), Box.from_array(a[1, 0]), 2),
               MicroTube(Box.from_array(a[0, 0]), Box.from_array(a[3, 0]), 2)]
        dense = fit_transition_set(mts, GRID3)[0].toarray()
        expect = np.zeros(9, dtype=int)
        expect[[1, 3]] = 1
        np.testing.assert_array_equal(dense[0], expect)
        assert dense.sum() == 2

    def test_empty_stream_is_all_zero(self):
        ts = fit_transition_set([], GRID_SMALL, delta=4)
        assert ts.total_count() == 0
        assert ts.sides == (5, 3, 1)
        assert ts.delta == 4

    def test_mismatched_delta_rejected(self):
        b = Box(0.1, 0.1, 0.3, 0.3)
        with pytest.raises(ValueError, match="delta"):
            fit_transition_set([MicroTube(b, b, 1), MicroTube(b, b, 2)], GRID3)

    def test_explicit_delta_mismatch_rejected(self):
        b = Box(0.1, 0.1, 0.3, 0.3)
        with pytest.raises(ValueError):
            fit_transition_set([MicroTube(b, b, 1)], GRID3, delta=3)

    def test_bad_delta(self):
        b = Box(0.1, 0.1, 0.3, 0.3)
        with pytest.raises(ValueError):
            MicroTube(b, b, 0)

    @settings(max_examples=100, deadline=None)
    @given(micro_tubes_st)
    def test_conservation(self, mts):
        ts = fit_transition_set(mts, GRID_SMALL)
        assert ts.total_count() == len(mts)
        assert ts.n_samples == len(mts)

    @settings(max_examples=20, deadline=None)
    @given(micro_tubes_st)
    def test_matches_brute_force_fitter(self, mts):
        ts = fit_transition_set(mts, GRID_SMALL)
        for got, want in zip(ts, brute_fit(mts, GRID_SMALL)):
            np.testing.assert_array_equal(got.toarray(), want)

    @settings(max_examples=30, deadline=None)
    @given(micro_tubes_st, st.randoms(use_true_random=False))
    def test_order_invariance(self, mts, rnd):
        shuffled = list(mts)
        rnd.shuffle(shuffled)
        assert fit_transition_set(mts, GRID_SMALL, delta=1) == fit_transition_set(shuffled, GRID_SMALL, delta=1)

    @settings(max_examples=30, deadline=None)
    @given(micro_tubes_st, st.integers(0, 40))
    def test_partition_merge_equals_whole(self, mts, cut):
        whole = fit_transition_set(mts, GRID_SMALL, delta=1)
        parts = merge(fit_transition_set(mts[:cut], GRID_SMALL, delta=1),
                      fit_transition_set(mts[cut:], GRID_SMALL, delta=1))
        assert parts == whole

    @settings(max_examples=30, deadline=None)
    @given(st.lists(boxes(min_size=0.02), max_size=30))
    def test_static_actors_are_diagonal(self, bs):
        ts = fit_transition_set([MicroTube(b, b, 1) for b in bs], GRID_SMALL)
        for m in ts:
            dense = m.toarray()
            assert np.count_nonzero(dense - np.diag(np.diag(dense))) == 0

    def test_threaded_fit_matches_serial(self):
        rng = np.random.default_rng(3)
        mts = []
        for _ in range(1500):
            c = rng.uniform(0.2, 0.8, size=2)
            b = Box(*(c - 0.1), *(c + 0.1))
            d = np.clip(c + rng.normal(0, 0.05, 2), 0.1, 0.9)
            mts.append(MicroTube(b, Box(*(d - 0.1), *(d + 0.1)), 1))
        assert fit_transition_set(mts, GRID_SMALL, workers=4) == fit_transition_set(mts, GRID_SMALL)


class TestMerge:
    def test_rejects_level_mismatch(self):
        with pytest.raises(ValueError):
            merge(TransitionSet.zeros([3]), TransitionSet.zeros([5]))

    def test_rejects_delta_mismatch(self):
        with pytest.raises(ValueError):
            merge(TransitionSet.zeros([3], 1), TransitionSet.zeros([3], 2))

    @given(st.lists(st.integers(0, 5), min_size=81, max_size=81),
           st.lists(st.integers(0, 5), min_size=81, max_size=81))
    def test_commutative(self, a, b):
        ta = TransitionSet((counts(np.reshape(a, (9, 9)), 3),))
        tb = TransitionSet((counts(np.reshape(b, (9, 9)), 3),))
        assert merge(ta, tb) == merge(tb, ta)


class TestNormalize:
    def test_row_example(self):
        m = normalize(counts([[2, 2, 0, 0], [0, 0, 0, 0], [0, 0, 0, 3], [1, 1, 1, 1]], 2))
        np.testing.assert_allclose(m.toarray()[0], [0.5, 0.5, 0, 0])
        np.testing.assert_array_equal(m.toarray()[1], [0, 0, 0, 0])
        np.testing.assert_allclose(m.toarray()[2], [0, 0, 0, 1])
        assert m.mode == NORMALIZED

    @settings(max_examples=100)
    @given(st.lists(st.integers(0, 20), min_size=16, max_size=16))
    def test_rows_stochastic_and_zero_rows_stay_zero(self, flat):
        c = np.reshape(flat, (4, 4))
        n = normalize(counts(c, 2)).row_sums()
        for raw, s in zip(c.sum(axis=1), n):
            if raw > 0:
                assert abs(s - 1.0) <= 1e-9
            else:
                assert s == 0.0

    @given(st.lists(st.integers(0, 20), min_size=16, max_size=16))
    def test_idempotent(self, flat):
        once = normalize(counts(np.reshape(flat, (4, 4)), 2))
        assert normalize(once) == once

    def test_binary_rejected(self):
        b = TransitionMatrix(0, 1, BINARY, sparse.csr_array(np.ones((1, 1))))
        with pytest.raises(ValueError):
            normalize(b)


class TestBinarize:
    def test_inclusive_threshold(self):
        out = binarize(padded([0.85, 0.10, 0.05]), 0.10)
        np.testing.assert_array_equal(out.toarray()[0, :3], [1, 1, 0])
        assert out.mode == BINARY

    @pytest.mark.parametrize("threshold", [0.01, 0.3, 1.0])
    def test_identity_survives(self, threshold):
        out = binarize(probs(np.eye(9)), threshold)
        np.testing.assert_array_equal(out.toarray(), np.eye(9, dtype=int))

    def test_threshold_one_drops_halves(self):
        out = binarize(padded([0.5, 0.5]), 1.0)
        assert out.cardinality == 0

    @pytest.mark.parametrize("threshold", [0.0, -0.1, 1.01, float("nan")])
    def test_threshold_range(self, threshold):
        with pytest.raises(ValueError):
            binarize(padded([1.0]), threshold)

    def test_counts_rejected(self):
        with pytest.raises(ValueError):
            binarize(counts([[1]], 1), 0.1)

    @given(st.lists(st.integers(0, 20), min_size=81, max_size=81),
           st.floats(0.001, 1.0), st.floats(0.001, 1.0))
    def test_cardinality_non_increasing(self, flat, t1, t2):
        lo, hi = sorted((t1, t2))
        n = normalize(counts(np.reshape(flat, (9, 9)), 3))
        assert binarize(n, hi).cardinality <= binarize(n, lo).cardinality


class TestOffdiagonal:
    def test_diagonal(self):
        assert offdiagonal_mass(probs(np.eye(4))) == (0.0, 0)

    def test_single_offdiagonal_row(self):
        a = np.zeros((4, 4))
        a[0, 1] = 1.0
        mass, count = offdiagonal_mass(probs(a))
        assert count == 1
        assert mass == 1.0

    def test_mass_averaged_over_populated_rows(self):
        # Rows 0 and 1 populated: off-diagonal mass 0.5 and 0.0.
        m = counts([[1, 1, 0, 0], [0, 3, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]], 2)
        mass, count = offdiagonal_mass(m)
        assert mass == pytest.approx(0.25)
        assert count == 1


def drift_annotations(delta, n_actors=40, seed=0):
    """
    Actors sliding right at 1/40 of the frame per frame, never touching a wall.

    Each starts just inside the left edge of a side-5 cell, so it spends
    exactly 8 frames in every cell it crosses.
    """
    rng = np.random.default_rng(seed)
    actors = [ActorSpec(1, (0.2, 0.2), (float(rng.uniform(0.201, 0.224)), float(rng.uniform(0.1, 0.9))),
                        (0.025, 0.0)) for _ in range(n_actors)]
    spec = ScenarioSpec(actors, n_frames=25, n_classes=1, deltas=(delta,))
    return generate(spec).annotations[delta]


class TestDisplacement:
    GRID5 = build_anchor_grid(PyramidConfig.single(5, 1))

    @pytest.mark.parametrize("delta", [1, 8])
    def test_argmax_equals_true_displacement(self, delta):
        mts = drift_annotations(delta)
        assert len(mts) >= 100
        ts = fit_transition_set(mts, self.GRID5)
        dense = ts[0].toarray()
        shift = round(0.025 * delta * 5)
        for i in np.flatnonzero(dense.sum(axis=1)):
            assert dense[i].argmax() == i + shift

    def test_offdiagonal_mass_grows_with_delta(self):
        ts1 = fit_transition_set(drift_annotations(1), self.GRID5).normalized()
        ts8 = fit_transition_set(drift_annotations(8), self.GRID5).normalized()
        m1, _ = offdiagonal_mass(ts1[0])
        m8, _ = offdiagonal_mass(ts8[0])
        assert m8 >= m1
        assert m8 == pytest.approx(1.0)


class TestSerialization:
    @pytest.mark.parametrize("stage", ["counts", "normalized", "binary"])
    def test_round_trip(self, tmp_path, stage):
        ts = fit_transition_set(drift_annotations(4), GRID_SMALL)
        if stage != "counts":
            ts = ts.normalized()
        if stage == "binary":
            ts = ts.binarized(0.1)
        path = tmp_path / "ts.jsonl"
        transmat.save(ts, path)
        back = transmat.load(path)
        assert back == ts
        assert back.mode == ts.mode

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"kind": "other"}\n')
        with pytest.raises(transmat.RecordError):
            transmat.load(path)

    def test_out_of_range_cell_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        transmat.save(TransitionSet.zeros([2]), path)
        with open(path, "a") as fh:
            fh.write('{"level": 0, "i": 9, "j": 0, "value": 1}\n')
        with pytest.raises(transmat.RecordError) as err:
            transmat.load(path)
        assert err.value.line == 2

    def test_check_config(self):
        ts = TransitionSet.zeros([38, 19, 10, 5, 3, 1])
        ts.check_config(PyramidConfig.default())
        with pytest.raises(ValueError):
            ts.check_config(PyramidConfig.single(3, 4))


class TestStats:
    def test_stats_rows(self):
        ts = fit_transition_set(drift_annotations(8), build_anchor_grid(PyramidConfig.single(5, 1)))
        (row,) = transmat.stats_rows(ts.normalized())
        assert row["side"] == 5
        assert row["offdiag_mass"] == pytest.approx(1.0)
        assert row["offdiag_nonzero"] == row["cardinality"]
