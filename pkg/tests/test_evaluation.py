import itertools

import numpy as np
import pytest

from asymct.evaluation import average_precision, map_and_cmc, pairwise_f_score
from oracles import average_precision_oracle, f_score_oracle


class TestAveragePrecision:
    def test_relevant_at_one_and_three(self):
        assert average_precision([1, 0, 1, 0]) == pytest.approx(5 / 6)

    def test_all_relevant(self):
        assert average_precision([1, 1, 1]) == pytest.approx(1.0)

    def test_single_relevant_closed_form(self):
        for r in range(1, 7):
            rel = [0] * 6
            rel[r - 1] = 1
            assert average_precision(rel) == pytest.approx(1.0 / r)

    def test_zero_relevant_rejected(self):
        with pytest.raises(ValueError, match="relevant"):
            average_precision([0, 0, 0])

    def test_exhaustive_short_lists(self):
        for n in range(1, 13):
            for bits in itertools.product([0, 1], repeat=n):
                if sum(bits) == 0:
                    continue
                assert average_precision(list(bits)) == pytest.approx(
                    average_precision_oracle(bits), abs=1e-12
                )


def perfect_case(rng, n_ids=5, dim=4):
    ids = np.arange(n_ids)
    q_emb = rng.standard_normal((n_ids, dim))
    g_emb = q_emb.copy()
    q_cams = np.zeros(n_ids, dtype=int)
    g_cams = np.ones(n_ids, dtype=int)
    return q_emb, g_emb, ids, ids.copy(), q_cams, g_cams


class TestMapAndCmc:
    def test_perfect_retrieval(self, rng):
        res = map_and_cmc(*perfect_case(rng))
        assert res.map == pytest.approx(1.0)
        assert res.rank1 == pytest.approx(1.0)

    def test_same_camera_junk_excluded_and_skipped(self, rng):
        q_emb, g_emb, q_ids, g_ids, q_cams, g_cams = perfect_case(rng)
        g_cams = q_cams.copy()  # every match shares the query camera
        with pytest.raises(ValueError, match="skipped"):
            map_and_cmc(q_emb, g_emb, q_ids, g_ids, q_cams, g_cams)

    def test_partial_skip_tally(self, rng):
        q_emb, g_emb, q_ids, g_ids, q_cams, g_cams = perfect_case(rng)
        g_cams = g_cams.copy()
        g_cams[0] = q_cams[0]  # query 0 loses its only cross-camera match
        res = map_and_cmc(q_emb, g_emb, q_ids, g_ids, q_cams, g_cams)
        assert res.n_skipped == 1
        assert res.map == pytest.approx(1.0)

    def test_matches_per_query_oracle(self, rng):
        for _ in range(100):
            n_q, n_g, dim = 6, 14, 3
            q_emb = rng.standard_normal((n_q, dim))
            g_emb = rng.standard_normal((n_g, dim))
            q_ids = rng.integers(0, 4, n_q)
            g_ids = rng.integers(0, 4, n_g)
            q_cams = rng.integers(0, 2, n_q)
            g_cams = rng.integers(0, 2, n_g)
            aps = []
            skipped = 0
            for q in range(n_q):
                keep = [
                    g for g in range(n_g)
                    if not (g_ids[g] == q_ids[q] and g_cams[g] == q_cams[q])
                ]
                d = [(np.sum((q_emb[q] - g_emb[g]) ** 2), g) for g in keep]
                order = [g for _, g in sorted(d, key=lambda t: (t[0], t[1]))]
                rel = [int(g_ids[g] == q_ids[q]) for g in order]
                if sum(rel) == 0:
                    skipped += 1
                    continue
                aps.append(average_precision_oracle(rel))
            if not aps:
                continue
            res = map_and_cmc(q_emb, g_emb, q_ids, g_ids, q_cams, g_cams)
            assert res.map == pytest.approx(np.mean(aps), abs=1e-12)
            assert res.n_skipped == skipped

    def test_cmc_nondecreasing_and_saturates(self, rng):
        q_emb = rng.standard_normal((8, 3))
        g_emb = np.vstack([q_emb + rng.normal(0, 0.01, q_emb.shape), rng.standard_normal((10, 3))])
        q_ids = np.arange(8)
        g_ids = np.concatenate([np.arange(8), np.full(10, 99)])
        q_cams = np.zeros(8, dtype=int)
        g_cams = np.ones(18, dtype=int)
        res = map_and_cmc(q_emb, g_emb, q_ids, g_ids, q_cams, g_cams, max_rank=18)
        assert np.all(np.diff(res.cmc) >= 0)
        assert res.cmc[-1] == pytest.approx(1.0)

    def test_invariance_under_relabeling_and_rigid_motion(self, rng):
        q_emb, g_emb, q_ids, g_ids, q_cams, g_cams = perfect_case(rng, n_ids=6)
        base = map_and_cmc(q_emb, g_emb, q_ids, g_ids, q_cams, g_cams)
        relabel = {i: 100 - i for i in range(6)}
        q2 = np.array([relabel[i] for i in q_ids])
        g2 = np.array([relabel[i] for i in g_ids])
        rot, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        shift = rng.standard_normal(4)
        res = map_and_cmc(q_emb @ rot + shift, g_emb @ rot + shift, q2, g2, q_cams, g_cams)
        assert res.map == pytest.approx(base.map, abs=1e-9)
        assert np.allclose(res.cmc, base.cmc, atol=1e-9)


class TestPairwiseFScore:
    def test_perfect(self):
        truth = np.array([0, 0, 1, 1, 2])
        assert pairwise_f_score(truth, truth) == pytest.approx(1.0)

    def test_all_singletons_zero(self):
        assert pairwise_f_score(np.arange(5), np.array([0, 0, 1, 1, 2])) == 0.0

    def test_hand_enumeration(self):
        pred = np.array([0, 0, 1, 1])
        truth = np.array([0, 0, 0, 1])
        assert pairwise_f_score(pred, truth) == pytest.approx(0.4)

    def test_matches_oracle_random(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 25))
            pred = rng.integers(0, 6, n)
            truth = rng.integers(0, 6, n)
            assert pairwise_f_score(pred, truth) == pytest.approx(
                f_score_oracle(pred, truth), abs=1e-12
            )

    def test_invariant_to_cluster_id_permutation(self, rng):
        pred = rng.integers(0, 5, 30)
        truth = rng.integers(0, 5, 30)
        perm = rng.permutation(5)
        assert pairwise_f_score(perm[pred], truth) == pytest.approx(
            pairwise_f_score(pred, truth)
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            pairwise_f_score(np.array([0, 1]), np.array([0, 1, 2]))
