import numpy as np
import pytest

from fedpoison import mcd
from fedpoison.mcd import McdConfig, MetricPair, ModelTraceStore


def pair(cx, cy, d, n=10):
    return MetricPair(centroid=np.array([cx, cy]), footprint=d, sample_count=n)


def synthetic_population(seed, n_clients=20, n_malicious=4, d0=1.0,
                         centroid_scale=0.12, malicious_max=0.3):
    """Benign footprints ~ U(0.8, 1.2)*d0, malicious <= malicious_max*d0,
    centroids drawn from one shared distribution for both groups."""
    rng = np.random.default_rng(seed)
    malicious = set(rng.choice(n_clients, size=n_malicious, replace=False).tolist())
    pairs = {}
    for cid in range(n_clients):
        c = rng.normal(0.0, centroid_scale * d0, size=2)
        if cid in malicious:
            f = rng.uniform(0.05, malicious_max) * d0
        else:
            f = rng.uniform(0.8, 1.2) * d0
        pairs[cid] = MetricPair(centroid=c, footprint=f, sample_count=10)
    first = MetricPair(centroid=rng.normal(0.0, 0.2 * d0, size=2),
                       footprint=d0, sample_count=10)
    return pairs, malicious, first


class TestMetricPair:
    def test_two_points(self):
        p = mcd.metric_pair([np.array([0.0, 0.0]), np.array([2.0, 0.0])])
        assert np.allclose(p.centroid, [1.0, 0.0])
        assert p.footprint == pytest.approx(1.0)
        assert p.sample_count == 2

    def test_single_point_zero_footprint(self):
        p = mcd.metric_pair([np.array([3.0, -1.0])])
        assert p.footprint == 0.0

    def test_hand_computed_three_points(self):
        p = mcd.metric_pair([np.array([0.0, 0.0]), np.array([2.0, 0.0]),
                             np.array([1.0, 3.0])])
        assert np.allclose(p.centroid, [1.0, 1.0])
        assert p.footprint == pytest.approx((np.sqrt(2) + np.sqrt(2) + 2) / 3, abs=1e-12)

    def test_nulls_ignored(self):
        p = mcd.metric_pair([None, np.array([1.0, 1.0]), None])
        assert p.sample_count == 1

    def test_all_null_returns_none(self):
        assert mcd.metric_pair([None, None]) is None

    def test_translation_invariant_footprint_scales_linearly(self):
        rng = np.random.default_rng(0)
        pts = [rng.standard_normal(2) for _ in range(8)]
        base = mcd.metric_pair(pts)
        shifted = mcd.metric_pair([p + np.array([5.0, -2.0]) for p in pts])
        scaled = mcd.metric_pair([3.0 * p for p in pts])
        assert shifted.footprint == pytest.approx(base.footprint)
        assert scaled.footprint == pytest.approx(3.0 * base.footprint)


class TestSelectBaselineSet:
    def test_identical_pair_included(self):
        first = pair(1.0, 2.0, 0.5)
        assert mcd.select_baseline_set({7: first}, first, 4.0, 2.0) == {7}

    def test_boundary_is_strict(self):
        first = pair(0.0, 0.0, 1.0)
        exactly = pair(4.0, 0.0, 1.0)  # centroid distance == omega1 * d_hat
        assert mcd.select_baseline_set({1: exactly}, first, 4.0, 2.0) == set()

    def test_reference_scenario_inclusion(self):
        first = pair(-5.31, -0.62, 3.32)
        d_hat = 3.32
        candidate = MetricPair(
            centroid=first.centroid + np.array([3.9 * d_hat, 0.0]),
            footprint=d_hat + 1.9 * d_hat, sample_count=5)
        assert mcd.select_baseline_set({0: candidate}, first, 4.0, 2.0) == {0}

    def test_degenerate_baseline_rejected(self):
        with pytest.raises(mcd.DefenseConfigError):
            mcd.select_baseline_set({}, pair(0, 0, 0.0), 4.0, 2.0)


class TestBaselineValues:
    def test_singleton(self):
        theta, d = mcd.baseline_values([pair(1.0, -1.0, 0.7)])
        assert np.allclose(theta, [1.0, -1.0]) and d == pytest.approx(0.7)

    def test_mean_of_two(self):
        theta, d = mcd.baseline_values([pair(0, 0, 1.0), pair(2, 2, 3.0)])
        assert np.allclose(theta, [1.0, 1.0]) and d == pytest.approx(2.0)

    def test_permutation_invariant(self):
        ps = [pair(0, 1, 1.0), pair(2, -1, 2.0), pair(4, 3, 0.5)]
        a = mcd.baseline_values(ps)
        b = mcd.baseline_values(ps[::-1])
        assert np.allclose(a[0], b[0]) and a[1] == pytest.approx(b[1])


class TestAbnormality:
    def test_perfect_conformity_is_zero(self):
        p = pair(1.0, 2.0, 0.8)
        assert mcd.abnormality(p, np.array([1.0, 2.0]), 0.8, 1.0, 2.0) == 0.0

    def test_label_flip_style_row(self):
        # formula value on the reference inputs; printed table rounds to 8.74
        p = pair(21.87, -0.58, 3.07)
        h = mcd.abnormality(p, np.array([-5.31, -0.62]), 3.32, 1.0, 2.0)
        expected = np.linalg.norm([27.18, 0.04]) / 3.32 + 2 * 0.25
        assert h == pytest.approx(expected, abs=1e-12)
        assert h == pytest.approx(8.69, abs=0.05)

    def test_footprint_dominated_case(self):
        p = pair(-2.52, 0.93, 0.92)
        h = mcd.abnormality(p, np.array([-0.05, 0.02]), 5.55, 1.0, 2.0)
        second_term = 2 * abs(5.55 - 0.92)
        assert second_term == pytest.approx(9.26)
        assert h > second_term  # first term adds on top
        assert h - second_term == pytest.approx(
            np.linalg.norm([-2.52 + 0.05, 0.93 - 0.02]) / 5.55, abs=1e-12)

    def test_monotone_in_both_deviations(self):
        base_t = np.array([0.0, 0.0])
        h0 = mcd.abnormality(pair(1.0, 0.0, 1.0), base_t, 1.0, 1.0, 2.0)
        h1 = mcd.abnormality(pair(2.0, 0.0, 1.0), base_t, 1.0, 1.0, 2.0)
        h2 = mcd.abnormality(pair(1.0, 0.0, 0.5), base_t, 1.0, 1.0, 2.0)
        assert h1 > h0 and h2 > h0


class TestDetect:
    def cfg(self, **kw):
        return McdConfig(**kw)

    def test_homogeneous_population_nobody_flagged(self):
        pairs = {i: pair(1.0, 1.0, 1.0) for i in range(6)}
        rep = mcd.detect(pairs, self.cfg(), pair(1.0, 1.0, 1.0))
        assert rep.flagged == []
        assert sorted(rep.surviving) == list(range(6))

    def test_small_footprint_flagged_via_second_term(self):
        pairs = {i: pair(0.0, 0.0, 1.0) for i in range(10)}
        pairs[3] = pair(0.0, 0.0, 0.2)
        # give benign footprints slight spread so the median h is nonzero
        for i in range(10):
            if i != 3:
                pairs[i] = pair(0.0, 0.0, 1.0 + 0.05 * (i % 3))
        rep = mcd.detect(pairs, self.cfg(), pair(0.0, 0.0, 1.0))
        assert rep.flagged == [3]

    def test_displaced_centroids_flagged(self):
        rng = np.random.default_rng(5)
        pairs = {}
        for i in range(20):
            c = rng.normal(0, 1.0, 2)
            if i in (2, 7, 11, 19):
                c = c + np.array([8.0, 0.0])
            pairs[i] = MetricPair(centroid=c, footprint=1.0 + 0.1 * rng.random(),
                                  sample_count=8)
        rep = mcd.detect(pairs, self.cfg(), pair(0.0, 0.0, 1.0))
        assert rep.flagged == [2, 7, 11, 19]

    def test_first_baseline_client_never_flagged(self):
        pairs = {i: pair(0.0, 0.0, 1.0 + 0.05 * i) for i in range(5)}
        pairs[0] = pair(9.0, 9.0, 0.1)  # wildly abnormal but it is the reference
        rep = mcd.detect(pairs, self.cfg(), pairs[0], first_baseline_id=0)
        assert 0 not in rep.flagged

    def test_fewer_than_three_rejected(self):
        with pytest.raises(mcd.DefenseConfigError):
            mcd.detect({0: pair(0, 0, 1.0)}, self.cfg(), pair(0, 0, 1.0))

    def test_empty_neighborhood_falls_back_to_reference(self):
        pairs = {i: pair(100.0 + i, 100.0, 50.0) for i in range(4)}
        rep = mcd.detect(pairs, self.cfg(), pair(0.0, 0.0, 0.5))
        assert rep.fallback_first_baseline

    def test_synthetic_recall_and_fpr(self):
        # 100 seeded populations: recall >= 90%, false-positive rate <= 10%
        hits = misses = fps = benign_total = 0
        for seed in range(100):
            pairs, malicious, first = synthetic_population(seed)
            rep = mcd.detect(pairs, self.cfg(), first)
            flagged = set(rep.flagged)
            hits += len(flagged & malicious)
            misses += len(malicious - flagged)
            fps += len(flagged - malicious)
            benign_total += len(pairs) - len(malicious)
        recall = hits / (hits + misses)
        fpr = fps / benign_total
        assert recall >= 0.90, f"recall {recall:.3f}"
        assert fpr <= 0.10, f"fpr {fpr:.3f}"

    def test_reflagging_is_stable_under_removal(self):
        for seed in range(100):
            pairs, malicious, first = synthetic_population(seed)
            rep = mcd.detect(pairs, McdConfig(), first)
            if not rep.flagged:
                continue
            remaining = {cid: p for cid, p in pairs.items() if cid != rep.flagged[0]}
            rep2 = mcd.detect(remaining, McdConfig(), first)
            assert set(rep.flagged) - {rep.flagged[0]} <= set(rep2.flagged)


class TestTraceStore:
    def test_record_and_period_layout(self):
        store = ModelTraceStore(t_prime=4)
        store.record(0, 1, (0.0, 0.0))
        store.record(5, 1, (1.0, 1.0))
        assert store.period_of(5) == 1
        assert store.traces(0)[1][0] is not None
        assert store.traces(1)[1][1] is not None
        assert store.traces(1)[1][0] is None

    def test_csv_roundtrip(self, tmp_path):
        store = ModelTraceStore(t_prime=3)
        store.record(0, 0, (0.5, -0.5))
        store.record(2, 0, (1.5, 2.5))
        store.record(1, 1, (0.25, 0.75))
        store.record(3, 0, (9.0, 9.0))
        store.ensure(0, 2)
        path = tmp_path / "trace.csv"
        store.to_csv(path)
        back = ModelTraceStore.from_csv(path)
        assert back.t_prime == 3
        for period in store.periods:
            for cid in store.periods[period]:
                a = store.periods[period][cid]
                b = back.periods[period][cid]
                for x, y in zip(a, b):
                    if x is None:
                        assert y is None
                    else:
                        assert np.allclose(x, y)

    def test_detect_from_store_with_shadow(self):
        rng = np.random.default_rng(9)
        store = ModelTraceStore(t_prime=10)
        for t in range(10):
            store.record(t, ModelTraceStore.SHADOW_ID, rng.normal(0, 1.0, 2))
            for cid in range(8):
                center = np.zeros(2)
                spread = 1.0 if cid != 5 else 0.05  # client 5 is GAN-consistent
                store.record(t, cid, center + rng.normal(0, spread, 2))
        rep = mcd.detect_from_store(store, McdConfig(t_prime=10), period=0)
        assert 5 in rep.flagged

    def test_all_null_client_skipped_not_flagged(self):
        rng = np.random.default_rng(10)
        store = ModelTraceStore(t_prime=5)
        for t in range(5):
            store.record(t, ModelTraceStore.SHADOW_ID, rng.normal(0, 1.0, 2))
            for cid in range(4):
                store.record(t, cid, rng.normal(0, 1.0, 2))
        store.ensure(0, 99)  # never selected
        rep = mcd.detect_from_store(store, McdConfig(t_prime=5), period=0)
        assert 99 in rep.skipped and 99 not in rep.flagged


class TestShadowTraceContract:
    def test_full_participation_sample_count(self):
        rng = np.random.default_rng(1)
        trace = [rng.normal(0, 1, 2) for _ in range(80)]
        p = mcd.metric_pair(trace)
        assert p.sample_count == 80


class TestPcaOutlierDefense:
    def test_gross_outlier_flagged(self):
        pts = {i: np.array([0.0, float(i % 3) * 0.1]) for i in range(10)}
        pts[4] = np.array([10.0, 0.0])
        assert mcd.pca_outlier_defense(pts) == [4]

    def test_homogeneous_empty(self):
        pts = {i: np.array([float(i % 2), 0.0]) for i in range(8)}
        assert mcd.pca_outlier_defense(pts) == []

    def test_zero_mad_both_coords_nobody(self):
        pts = {i: np.array([1.0, 2.0]) for i in range(5)}
        assert mcd.pca_outlier_defense(pts) == []


class TestCosineAngleDefenses:
    def test_negated_update_flagged(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal(30)
        vecs = {i: base + 0.01 * rng.standard_normal(30) for i in range(9)}
        vecs[6] = -base
        assert mcd.cosine_pairs_defense(vecs) == [6]

    def test_identical_updates_empty(self):
        vecs = {i: np.ones(10) for i in range(6)}
        assert mcd.cosine_pairs_defense(vecs) == []

    def test_orthogonal_singleton_flagged_by_angle(self):
        rng = np.random.default_rng(4)
        base = np.zeros(20); base[0] = 1.0
        vecs = {i: base + 0.01 * rng.standard_normal(20) for i in range(9)}
        ortho = np.zeros(20); ortho[1] = 1.0
        vecs[2] = ortho
        assert mcd.angle_deviation_defense(vecs) == [2]

    def test_homogeneous_angle_empty(self):
        vecs = {i: np.ones(10) for i in range(6)}
        assert mcd.angle_deviation_defense(vecs) == []

    def test_zero_norm_vector_excluded(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal(10)
        vecs = {i: base for i in range(5)}
        vecs[3] = np.zeros(10)
        assert 3 not in mcd.cosine_pairs_defense(vecs)


class TestKmeans2Defense:
    def test_separated_minority_flagged(self):
        rng = np.random.default_rng(6)
        pts = {i: rng.normal(0, 0.1, 2) for i in range(16)}
        for i in (3, 9, 12):
            pts[i] = rng.normal(5.0, 0.1, 2)
        flagged = mcd.kmeans2_defense(pts, np.random.default_rng(0))
        assert sorted(flagged) == [3, 9, 12]

    def test_single_blob_nobody(self):
        rng = np.random.default_rng(7)
        pts = {i: rng.normal(0, 1.0, 2) for i in range(12)}
        assert mcd.kmeans2_defense(pts, np.random.default_rng(0)) == []
