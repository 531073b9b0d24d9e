import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from illumid.augment import IlluminationConfig
from illumid.evaluation import EvalReport, cmc_map, evaluate, k_reciprocal_rerank, pairwise_distances
from illumid.model import StageEncoderSpec, init_params

from oracles import brute_cmc_map, rerank_oracle


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_instance(r, max_q=30, max_g=30, n_ids=None, dim=None):
    nq = int(r.integers(1, max_q + 1))
    ng = int(r.integers(2, max_g + 1))
    n_ids = n_ids or int(r.integers(2, 8))
    q_ids = r.integers(0, n_ids, nq)
    g_ids = r.integers(0, n_ids, ng)
    q_cams = r.integers(0, 3, nq)
    g_cams = r.integers(0, 3, ng)
    if r.random() < 0.3:
        # quantized distances to exercise tie-breaking
        dist = r.integers(0, 5, size=(nq, ng)).astype(float)
    else:
        dist = r.random((nq, ng))
    return dist, q_ids, g_ids, q_cams, g_cams


class TestPairwise:
    def test_identical(self):
        a = unit([[1, 2, 3]])
        assert pairwise_distances(a, a)[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert pairwise_distances(unit([[1, 0, 0]]), unit([[0, 1, 0]]))[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_antipodal(self):
        assert pairwise_distances(unit([[1, 1]]), unit([[-1, -1]]))[0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_matches_direct(self, rng):
        q, g = unit(rng.normal(size=(5, 7))), unit(rng.normal(size=(9, 7)))
        direct = ((q[:, None] - g[None]) ** 2).sum(-1)
        np.testing.assert_allclose(pairwise_distances(q, g), direct, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))


class TestCmcMap:
    def test_match_nonmatch_match(self):
        rep = cmc_map([[0.1, 0.2, 0.3]], [1], [1, 2, 1], [0], [1, 1, 1])
        assert rep.map == pytest.approx((1 / 1 + 2 / 3) / 2)
        assert rep.cmc[0] == 1.0

    def test_nonmatch_match(self):
        rep = cmc_map([[0.1, 0.2]], [1], [2, 1], [0], [1, 1])
        assert rep.cmc[:2] == [0.0, 1.0]
        assert rep.map == pytest.approx(0.5)

    def test_perfect(self):
        rep = cmc_map([[0.1, 0.2, 0.9, 0.8]], [3], [3, 3, 4, 5], [0], [1, 2, 1, 1])
        assert rep.map == 1.0 and rep.cmc[0] == 1.0

    def test_same_camera_same_id_ignored(self):
        # nearest is the same person on the same camera -> junk, not a hit
        rep = cmc_map([[0.0, 0.5, 0.6]], [1], [1, 2, 1], [0], [0, 1, 1])
        assert rep.cmc[0] == 0.0 and rep.cmc[1] == 1.0
        assert rep.map == pytest.approx(0.5)

    def test_query_without_match_skipped(self):
        rep = cmc_map([[0.1, 0.2], [0.1, 0.2]], [1, 9], [2, 1], [0, 0], [1, 1])
        assert rep.num_skipped_query == 1
        assert rep.num_query == 2
        assert rep.cmc[:2] == [0.0, 1.0]

    def test_ties_broken_by_gallery_index(self):
        rep = cmc_map([[0.5, 0.5]], [1], [1, 2], [0], [1, 1])
        assert rep.cmc[0] == 1.0
        rep = cmc_map([[0.5, 0.5]], [1], [2, 1], [0], [1, 1])
        assert rep.cmc[0] == 0.0

    def test_matches_brute_force_oracle(self):
        r = np.random.default_rng(2024)
        for _ in range(100):
            inst = random_instance(r)
            rep = cmc_map(*inst)
            cmc, m, skipped = brute_cmc_map(*inst)
            assert rep.cmc == cmc
            assert rep.map == m
            assert rep.num_skipped_query == skipped

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_properties(self, seed):
        inst = random_instance(np.random.default_rng(seed))
        rep = cmc_map(*inst)
        assert np.all(np.diff(rep.cmc) >= 0)
        assert 0.0 <= rep.map <= 1.0 and rep.cmc[-1] <= 1.0
        # strictly increasing transforms leave rank metrics unchanged
        rep2 = cmc_map(np.exp(3 * inst[0]) + 7, *inst[1:])
        assert rep2.cmc == rep.cmc and rep2.map == rep.map

    def test_json_and_csv(self, tmp_path):
        rep = cmc_map([[0.1, 0.2, 0.3]], [1], [1, 2, 1], [0], [1, 1, 1])
        d = json.loads(rep.to_json())
        assert set(d) >= {"cmc", "map", "num_query", "num_gallery", "rerank_used", "config_fingerprint"}
        rep.write_cmc_csv(tmp_path / "cmc.csv")
        lines = (tmp_path / "cmc.csv").read_text().splitlines()
        assert lines[0] == "rank,value" and lines[1] == "1,1"
        assert len(lines) == 4


class TestRerank:
    def test_lambda_one_preserves_order(self, rng):
        q, g = unit(rng.normal(size=(6, 4))), unit(rng.normal(size=(25, 4)))
        re = k_reciprocal_rerank(q, g, 20, 6, 1.0)
        base = pairwise_distances(q, g)
        np.testing.assert_array_equal(np.argsort(re, 1, kind="stable"), np.argsort(base, 1, kind="stable"))

    def test_exact_duplicate_stays_first(self, rng):
        g = unit(rng.normal(size=(6, 5)))
        q = g[2:3].copy()
        re = k_reciprocal_rerank(q, g, 3, 2, 0.3)
        assert np.argmin(re[0]) == 2
        np.testing.assert_allclose(re, rerank_oracle(q, g, 3, 2, 0.3), atol=1e-9)

    def test_five_item_instance(self, rng):
        q, g = unit(rng.normal(size=(2, 3))), unit(rng.normal(size=(5, 3)))
        np.testing.assert_allclose(k_reciprocal_rerank(q, g, 3, 2, 0.3), rerank_oracle(q, g, 3, 2, 0.3), atol=1e-9)

    @pytest.mark.parametrize("args", [(3, 3, 0.3), (3, 0, 0.3), (3, 2, 1.5), (3, 2, -0.1), (10, 2, 0.3)])
    def test_parameter_errors(self, args, rng):
        q, g = unit(rng.normal(size=(2, 3))), unit(rng.normal(size=(5, 3)))
        with pytest.raises(ValueError):
            k_reciprocal_rerank(q, g, *args)

    def test_matches_oracle_random(self):
        r = np.random.default_rng(77)
        for _ in range(20):
            ng = int(r.integers(8, 51))
            nq = int(r.integers(1, 8))
            d = int(r.integers(2, 9))
            k1 = int(r.integers(2, min(ng, 20) + 1))
            k2 = int(r.integers(1, k1))
            lam = float(r.random())
            # clustered features, like identities
            centers = r.normal(size=(5, d))
            q = unit(centers[r.integers(0, 5, nq)] + 0.4 * r.normal(size=(nq, d)))
            g = unit(centers[r.integers(0, 5, ng)] + 0.4 * r.normal(size=(ng, d)))
            np.testing.assert_allclose(k_reciprocal_rerank(q, g, k1, k2, lam), rerank_oracle(q, g, k1, k2, lam), atol=1e-9)


class TestEvaluate:
    def test_untrained_near_chance(self, toy_test_ds):
        net = init_params(StageEncoderSpec(), toy_test_ds.n_person, 8, seed=0)
        rep = evaluate(net, toy_test_ds, illum_cfg=IlluminationConfig(), seed=0)
        assert rep.num_query == 40 and rep.num_gallery == 60
        # chance for 3 true matches among 60 gallery images is 3/60 per rank-1 draw
        assert rep.rank(1) <= 3 / 20 + 0.15

    def test_rerank_lambda_one_equals_plain(self, toy_test_ds):
        net = init_params(StageEncoderSpec(), toy_test_ds.n_person, 8, seed=1)
        cfg = IlluminationConfig()
        plain = evaluate(net, toy_test_ds, illum_cfg=cfg, seed=3)
        re = evaluate(net, toy_test_ds, illum_cfg=cfg, seed=3, rerank=True, lam=1.0)
        assert plain.cmc == re.cmc and plain.map == re.map
        assert re.rerank_used and re.config_fingerprint != plain.config_fingerprint

    def test_deterministic_report(self, toy_test_ds):
        net = init_params(StageEncoderSpec(), toy_test_ds.n_person, 8, seed=1)
        a = evaluate(net, toy_test_ds, illum_cfg=IlluminationConfig(), seed=3, rerank=True)
        b = evaluate(net, toy_test_ds, illum_cfg=IlluminationConfig(), seed=3, rerank=True)
        assert a.to_json() == b.to_json()

    def test_report_rank_saturates(self):
        rep = EvalReport(cmc=[0.5, 1.0], map=0.7, num_query=2, num_gallery=2)
        assert rep.rank(10) == 1.0
