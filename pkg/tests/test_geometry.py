import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import eiou_reference, nms_reference

from ticnet.errors import ConfigError
from ticnet.geometry import (
    IGNORED,
    NEGATIVE,
    POSITIVE,
    AnchorSet,
    Detection,
    Interval,
    build_anchor_set,
    decode_offsets,
    encode_offsets,
    eiou,
    iou,
    kmeans_anchors,
    match_anchors,
    nms_eiou,
)


finite = st.floats(min_value=-500.0, max_value=500.0, allow_nan=False)


@st.composite
def intervals(draw, lo=-500.0, hi=500.0):
    a = draw(st.floats(min_value=lo, max_value=hi - 1.0))
    length = draw(st.floats(min_value=1e-3, max_value=hi - a))
    return Interval(a, a + length)


class TestIoU:
    def test_identity(self):
        assert iou(Interval(3, 9), Interval(3, 9)) == 1.0

    def test_disjoint(self):
        assert iou(Interval(0, 10), Interval(10, 20)) == 0.0
        assert iou(Interval(0, 10), Interval(30, 40)) == 0.0

    def test_hand_value(self):
        assert iou(Interval(0, 10), Interval(5, 15)) == pytest.approx(1 / 3, abs=1e-12)

    @given(intervals(), intervals())
    def test_range_and_symmetry(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a), abs=1e-12)

    @given(intervals(), finite, st.floats(min_value=0.1, max_value=10.0))
    def test_translation_and_scale_invariance(self, a, shift, scale):
        b = Interval(a.start + 3.0, a.end + 7.5)
        base = iou(a, b)
        shifted = iou(
            Interval(a.start + shift, a.end + shift),
            Interval(b.start + shift, b.end + shift),
        )
        scaled = iou(
            Interval(a.start * scale, a.end * scale),
            Interval(b.start * scale, b.end * scale),
        )
        assert shifted == pytest.approx(base, abs=1e-9)
        assert scaled == pytest.approx(base, abs=1e-9)


class TestEIoU:
    def test_anchored_values(self):
        assert eiou(Interval(0, 10), Interval(0, 10)) == pytest.approx(1.0, abs=1e-12)
        assert eiou(Interval(0, 10), Interval(10, 20)) == pytest.approx(-0.25, abs=1e-12)
        assert eiou(Interval(0, 20), Interval(5, 15)) == pytest.approx(0.25, abs=1e-12)

    def test_matches_reference_on_random_pairs(self, rng):
        for _ in range(1000):
            a = sorted(rng.uniform(-200, 200, 2) + [0, 1e-3])
            g = sorted(rng.uniform(-200, 200, 2) + [0, 1e-3])
            got = eiou(Interval(*a), Interval(*g))
            want = eiou_reference(a[0], a[1], g[0], g[1])
            assert got == pytest.approx(want, abs=1e-9)

    @given(intervals(), intervals())
    def test_symmetric_bounded_below_iou(self, a, g):
        v = eiou(a, g)
        assert v == pytest.approx(eiou(g, a), abs=1e-12)
        assert v <= iou(a, g) + 1e-12
        assert -2.0 < v <= 1.0

    @given(intervals(), finite, st.floats(min_value=0.1, max_value=10.0))
    def test_translation_and_scale_invariance(self, a, shift, scale):
        g = Interval(a.start + 1.0, a.end + 4.0)
        base = eiou(a, g)
        shifted = eiou(
            Interval(a.start + shift, a.end + shift),
            Interval(g.start + shift, g.end + shift),
        )
        scaled = eiou(
            Interval(a.start * scale, a.end * scale),
            Interval(g.start * scale, g.end * scale),
        )
        assert shifted == pytest.approx(base, abs=1e-8)
        assert scaled == pytest.approx(base, abs=1e-8)


def lloyd_reference(durations, k, init):
    """Plain-python Lloyd's algorithm on log durations to convergence."""
    xs = sorted(math.log(d) for d in durations)
    centers = [math.log(c) for c in init]
    assign = None
    for _ in range(1000):
        new_assign = []
        for x in xs:
            d2 = [(x - c) ** 2 for c in centers]
            new_assign.append(d2.index(min(d2)))
        if new_assign == assign:
            break
        assign = new_assign
        for j in range(k):
            member = [x for x, a in zip(xs, assign) if a == j]
            if member:
                centers[j] = sum(member) / len(member)
    return sorted(math.exp(c) for c in centers)


class TestKMeans:
    def test_single_cluster_of_identical_values(self):
        assert kmeans_anchors([10, 10, 10], 1) == pytest.approx([10.0])

    def test_two_separated_clusters(self):
        assert kmeans_anchors([16, 16, 64, 64], 2) == pytest.approx([16.0, 64.0])

    def test_k_exceeding_distinct_count(self):
        with pytest.raises(ConfigError):
            kmeans_anchors([5.0, 5.0, 7.0], 3)

    def test_matches_reference_lloyd(self, rng):
        durations = rng.lognormal(3.4, 0.7, size=200).tolist()
        qs = np.quantile(durations, [0.125, 0.375, 0.625, 0.875])
        got = kmeans_anchors(durations, 4, init=qs)
        want = lloyd_reference(durations, 4, qs)
        assert got == pytest.approx(want, rel=1e-9)

    def test_permutation_invariant_given_seed(self, rng):
        durations = rng.uniform(5, 120, size=60).tolist()
        shuffled = list(durations)
        rng.shuffle(shuffled)
        assert kmeans_anchors(durations, 4, seed=9) == pytest.approx(
            kmeans_anchors(shuffled, 4, seed=9)
        )


class TestAnchorSet:
    def test_partition_rule(self):
        aset = build_anchor_set(list(range(1, 13)), [4, 8, 16, 32])
        assert aset.levels[0] == (4, [1.0, 2.0, 3.0])
        assert aset.levels[3] == (32, [10.0, 11.0, 12.0])
        assert aset.anchors_per_pos == 3

    def test_one_anchor_per_level(self):
        aset = build_anchor_set([5.0, 9.0, 17.0, 33.0], [4, 8, 16, 32])
        assert [len(ls) for _, ls in aset.levels] == [1, 1, 1, 1]

    def test_divisibility_violation(self):
        with pytest.raises(ConfigError):
            build_anchor_set([1.0, 2.0, 3.0, 4.0, 5.0], [4, 8, 16, 32])

    def test_anchor_placement(self):
        aset = build_anchor_set([4.0, 8.0, 16.0, 32.0], [4, 8, 16, 32])
        level0 = aset.level_anchors(0, 416)
        assert len(level0) == 104
        assert level0[0].center == pytest.approx(2.0)  # (0 + 0.5) * 4
        assert level0[1].center == pytest.approx(6.0)
        assert level0[0].length == pytest.approx(4.0)

    def test_json_roundtrip(self, tmp_path, tiny_anchors):
        path = tmp_path / "anchors.json"
        tiny_anchors.save(path)
        again = AnchorSet.load(path)
        assert again.levels == tiny_anchors.levels


class TestMatchAnchors:
    def test_exact_anchor_is_positive(self):
        m = match_anchors([Interval(5, 15)], [Interval(5, 15)])
        assert m.status[0] == POSITIVE and m.gt_index[0] == 0

    def test_far_anchor_is_negative(self):
        # eiou([0,10),[20,30)) = 0 - 400/900 ~= -0.444 < -0.4
        m = match_anchors([Interval(0, 10), Interval(20, 30)], [Interval(20, 30)])
        assert m.status[0] == NEGATIVE

    def test_in_band_anchor_is_ignored(self):
        # eiou([0,20),[5,15)) = 0.25, inside [-0.4, 0.3]; gt's best anchor
        # must exist elsewhere so the force-match does not promote it
        m = match_anchors([Interval(0, 20), Interval(5, 15)], [Interval(5, 15)])
        assert m.status[0] == IGNORED
        assert m.status[1] == POSITIVE

    def test_empty_gts_all_negative(self):
        m = match_anchors([Interval(0, 10), Interval(5, 25)], [])
        assert (m.status == NEGATIVE).all()
        assert m.num_positive == 0

    def test_every_disjoint_gt_gets_a_positive(self, rng):
        # dense anchor grid so disjoint gts never share a best anchor
        anchors = [
            Interval(c - l / 2, c + l / 2)
            for c in np.arange(4, 400, 8.0)
            for l in (8.0, 16.0, 32.0)
        ]
        for _ in range(50):
            starts = np.sort(rng.uniform(0, 340, 4))
            gts = []
            cursor = 0.0
            for s in starts:
                s = max(s, cursor + 4.0)
                l = float(rng.uniform(3, 30))
                gts.append(Interval(s, s + l))
                cursor = s + l
            m = match_anchors(anchors, gts)
            matched_gts = set(m.gt_index[m.status == POSITIVE].tolist())
            assert matched_gts == set(range(len(gts)))

    def test_permutation_invariance_up_to_relabel(self, rng):
        anchors = [Interval(i * 10.0, i * 10.0 + 12.0) for i in range(20)]
        gts = [Interval(12.0, 25.0), Interval(88.0, 130.0), Interval(140.0, 150.0)]
        m1 = match_anchors(anchors, gts)
        perm = [2, 0, 1]
        m2 = match_anchors(anchors, [gts[j] for j in perm])
        assert (m1.status == m2.status).all()
        for i in range(len(anchors)):
            if m1.status[i] == POSITIVE:
                assert gts[m1.gt_index[i]] == [gts[j] for j in perm][m2.gt_index[i]]


class TestOffsets:
    def test_identity(self):
        a = Interval(10, 30)
        assert encode_offsets(a, a) == pytest.approx((0.0, 0.0))
        assert decode_offsets(0.0, 0.0, a) == a

    def test_hand_values(self):
        dm, dd = encode_offsets(Interval(95, 105), Interval(90, 110))
        assert dm == pytest.approx(0.0)
        assert dd == pytest.approx(math.log(0.5))
        dec = decode_offsets(0.0, math.log(2), Interval(90, 110))
        assert (dec.start, dec.end) == pytest.approx((80.0, 120.0))

    def test_clamping(self):
        dec = decode_offsets(0.0, 0.0, Interval(-5, 30), clamp_to=416)
        assert (dec.start, dec.end) == pytest.approx((0.0, 30.0))
        assert decode_offsets(-2.0, 0.0, Interval(0, 10), clamp_to=416) is None

    @given(intervals(lo=0.0, hi=400.0), intervals(lo=0.0, hi=400.0))
    @settings(max_examples=200)
    def test_roundtrip(self, gt, anchor):
        dm, dd = encode_offsets(gt, anchor)
        dec = decode_offsets(dm, dd, anchor)
        assert dec.start == pytest.approx(gt.start, rel=1e-9, abs=1e-9)
        assert dec.end == pytest.approx(gt.end, rel=1e-9, abs=1e-9)


def _rand_dets(rng, n, quantize=False):
    out = []
    for _ in range(n):
        s = rng.uniform(0, 380)
        l = rng.uniform(2, 40)
        if quantize:
            s, l = round(s), max(2, round(l))
        score = round(float(rng.uniform(0, 1)), 1 if quantize else 6)
        out.append(Detection(interval=Interval(s, s + l), raw_prob=score, refined_prob=score))
    return out


class TestNMS:
    def test_single_detection_passthrough(self):
        d = Detection(interval=Interval(5, 20), raw_prob=0.7, refined_prob=0.6)
        assert nms_eiou([d], 0.2) == [d]

    def test_identical_intervals_keep_highest(self):
        a = Detection(interval=Interval(10, 30), raw_prob=0.9, refined_prob=0.9)
        b = Detection(interval=Interval(10, 30), raw_prob=0.8, refined_prob=0.8)
        kept = nms_eiou([b, a], 0.2)
        assert kept == [a]

    def test_matches_bruteforce_on_random_sets(self, rng):
        for trial in range(300):
            dets = _rand_dets(rng, int(rng.integers(1, 13)), quantize=trial % 2 == 0)
            thr = float(rng.uniform(-0.5, 0.9))
            got = nms_eiou(dets, thr)
            want = nms_reference(dets, thr)
            assert [id(d) for d in got] == [id(d) for d in want]

    def test_kept_scores_non_increasing_and_separated(self, rng):
        dets = _rand_dets(rng, 40)
        kept = nms_eiou(dets, 0.2)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert eiou(kept[i].interval, kept[j].interval) <= 0.2 + 1e-12


class TestIntervalType:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            Interval(5, 5)
        with pytest.raises(ValueError):
            Interval(7, 3)

    def test_derived_quantities(self):
        iv = Interval(10, 30)
        assert iv.center == 20 and iv.length == 20
