"""Evolutionary search: operators against combinatorial oracles, then the
full loop for determinism, elitism and budget discipline."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunesearch import masks as mk
from prunesearch import model as m
from prunesearch import proxy as px
from prunesearch import search as se
from prunesearch.errors import ConfigError

CFG = m.ModelConfig(n_layers=4, d_model=16, n_heads=4, n_kv_heads=4, d_head=4,
                    d_ff=16, vocab_size=19, context_length=16, rounding_multiple=4)


def scfg(**kw):
    base = dict(budget=10**9, population_size=6, elites=2, iterations=3,
                min_depth=2, seed=0)
    base.update(kw)
    return se.SearchConfig(**base)


@pytest.fixture(scope="module")
def setting():
    net = m.init_supernetwork(CFG, seed=0)
    tokens = np.random.default_rng(5).integers(0, CFG.vocab_size, size=(2, 12))
    stats = m.collect_activation_stats(net, tokens)
    sal = mk.compute_saliency(net, stats)
    prior = se.compute_importance_prior(net, stats)
    m.attach_adapters(net, rank=2, seed=9)
    calib = px.CalibrationBatch(tokens)
    anchor = px.compute_anchor(net, calib)
    dense = m.parameter_count(net, mk.ArchEncoding.identity(CFG.n_layers))
    return net, sal, prior, calib, anchor, dense


def test_config_validation():
    with pytest.raises(ConfigError):
        se.SearchConfig(budget=0)
    with pytest.raises(ConfigError):
        se.SearchConfig(budget=10, elites=9, population_size=4)
    with pytest.raises(ConfigError):
        se.SearchConfig(budget=10, crossover_rate=1.5)
    with pytest.raises(ConfigError):
        se.SearchConfig(budget=10, init_mode="zeros")


def test_importance_prior_is_mean_channel_saliency(setting):
    net, sal, prior, *_ = setting
    for l in range(net.n_layers):
        expected = (sal.attn_channel[l].sum() + sal.mlp_channel[l].sum()) / (
            sal.attn_channel[l].size + sal.mlp_channel[l].size
        )
        assert prior[l] == pytest.approx(expected, rel=1e-12)
    assert (prior > 0).all()


class TestAnchor:
    def test_budget_above_dense_gives_identity(self, setting):
        net, _, prior, _, _, dense = setting
        enc = se.anchor_encoding(net, prior, scfg(budget=dense))
        assert enc.depth.all() and (enc.kappa == 1.0).all()

    def test_fits_budget_tightly(self, setting):
        net, _, prior, _, _, dense = setting
        cfg = scfg(budget=int(dense * 0.6))
        enc = se.anchor_encoding(net, prior, cfg)
        got = m.parameter_count(net, enc)
        assert got <= cfg.budget
        # the next rounding step up must overflow: bisection found the edge
        bumped = enc.copy()
        bumped.kappa = np.clip(bumped.kappa + 0.13, 0.0, 1.0)
        assert m.parameter_count(net, bumped) > cfg.budget
        assert enc.depth.all()

    def test_retentions_ordered_by_prior(self, setting):
        net, _, prior, _, _, dense = setting
        enc = se.anchor_encoding(net, prior, scfg(budget=int(dense * 0.7)))
        unclipped = (enc.kappa[:, 0] > 0.051) & (enc.kappa[:, 0] < 0.999)
        idx = np.flatnonzero(unclipped)
        for i in idx:
            for j in idx:
                if prior[i] > prior[j]:
                    assert enc.kappa[i, 0] >= enc.kappa[j, 0]

    def test_uniform_mode_equalizes_retentions(self, setting):
        net, _, prior, _, _, dense = setting
        enc = se.anchor_encoding(net, prior, scfg(budget=int(dense * 0.6), init_mode="uniform"))
        assert np.ptp(enc.kappa) < 1e-12

    def test_impossible_budget_rejected(self, setting):
        net, _, prior, *_ = setting
        with pytest.raises(ConfigError):
            se.anchor_encoding(net, prior, scfg(budget=CFG.vocab_size * CFG.d_model))

    def test_population_is_identical_copies(self, setting):
        net, _, prior, _, _, dense = setting
        pop = se.init_population(net, prior, scfg(budget=int(dense * 0.6)))
        assert len(pop) == 6
        assert len({enc.key() for enc in pop}) == 1
        pop[0].kappa[0, 0] = 0.5
        assert pop[1].kappa[0, 0] != 0.5  # actual copies, not references


class TestOperators:
    @settings(deadline=None, max_examples=60)
    @given(st.integers(0, 2**31 - 1))
    def test_depth_crossover_splices_contiguous_range(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random(6) < 0.5
        b = ~a
        child = se.crossover_depth(a, b, rng)
        diff = np.flatnonzero(child != a)
        assert diff.size >= 1  # b differs everywhere, so the range shows up
        assert np.array_equal(diff, np.arange(diff[0], diff[-1] + 1))
        np.testing.assert_array_equal(child[diff], b[diff])

    def test_depth_crossover_covers_all_ranges(self):
        rng = np.random.default_rng(0)
        a = np.zeros(4, dtype=bool)
        b = np.ones(4, dtype=bool)
        seen = set()
        for _ in range(500):
            child = se.crossover_depth(a, b, rng)
            on = np.flatnonzero(child)
            seen.add((int(on[0]), int(on[-1])))
        assert len(seen) == 4 * 5 // 2  # every (i, j) pair with i <= j

    @settings(deadline=None, max_examples=60)
    @given(st.integers(0, 2**31 - 1))
    def test_width_crossover_stays_between_parents(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.05, 1.0, (5, 2))
        b = rng.uniform(0.05, 1.0, (5, 2))
        child = se.crossover_width(a, b, rng, 0.05)
        assert (child >= np.minimum(a, b) - 1e-12).all()
        assert (child <= np.maximum(a, b) + 1e-12).all()

    def test_depth_mutation_flip_fraction(self):
        # Monte Carlo check of the 0.2 flip rate
        rng = np.random.default_rng(7)
        depth = np.ones(10, dtype=bool)
        flips = 0
        for _ in range(10_000):
            flips += int((se.mutate_depth(depth, 0.2, rng) != depth).sum())
        assert abs(flips / 100_000 - 0.2) < 0.02

    def test_rate_one_inverts_sigma_zero_preserves(self):
        rng = np.random.default_rng(0)
        depth = np.array([True, False, True, True])
        np.testing.assert_array_equal(se.mutate_depth(depth, 1.0, rng), ~depth)
        kappa = np.random.default_rng(1).uniform(0.1, 0.9, (4, 2))
        out = se.mutate_width(kappa, 1.0, 0.0, rng, 0.05)
        np.testing.assert_array_equal(out, kappa)

    def test_width_jitter_is_multiplicative_and_clipped(self):
        rng = np.random.default_rng(3)
        kappa = np.full((200, 2), 0.5)
        out = se.mutate_width(kappa, 1.0, 0.1, rng, 0.05)
        assert (out >= 0.05).all() and (out <= 1.0).all()
        ratio = out / kappa
        assert abs(ratio.mean() - 1.0) < 0.02
        assert 0.06 < ratio.std() < 0.14  # sigma = 0.1 jitter

    def test_repair_min_depth_prefers_high_prior(self):
        prior = np.array([0.1, 0.9, 0.5, 0.9])
        depth = np.zeros(4, dtype=bool)
        out = se.repair_min_depth(depth, prior, 2)
        np.testing.assert_array_equal(out, [False, True, False, True])
        out = se.repair_min_depth(depth, prior, 3)
        np.testing.assert_array_equal(out, [False, True, True, True])

    def test_repair_budget_rescales_to_fit(self, setting):
        net, _, prior, _, _, dense = setting
        cfg = scfg(budget=int(dense * 0.55))
        enc = mk.ArchEncoding.identity(4)
        repaired = se.repair_budget(enc, net, cfg)
        assert m.parameter_count(net, repaired) <= cfg.budget
        assert repaired.depth.all()
        # uniform rescale: all retentions shrink by the same factor
        assert np.ptp(repaired.kappa) < 1e-9

    def test_repair_budget_leaves_feasible_untouched(self, setting):
        net, *_ = setting
        enc = mk.ArchEncoding.identity(4)
        assert se.repair_budget(enc, net, scfg()) is enc

    def test_repair_budget_returns_unrepairable_unchanged(self, setting):
        net, _, _, _, _, dense = setting
        cfg = scfg(budget=CFG.vocab_size * CFG.d_model + 100)
        enc = mk.ArchEncoding.identity(4)
        repaired = se.repair_budget(enc, net, cfg)
        np.testing.assert_array_equal(repaired.kappa, enc.kappa)
        assert m.parameter_count(net, repaired) > cfg.budget


class TestRunSearch:
    def run(self, setting, tmp_path=None, **kw):
        net, sal, prior, calib, anchor, dense = setting
        kw.setdefault("budget", int(dense * 0.6))
        cfg = scfg(**kw)
        log = str(tmp_path / "log.jsonl") if tmp_path else None
        return se.run_search(net, sal, prior, calib, anchor, cfg, log_path=log), cfg

    def test_deterministic_across_runs_and_workers(self, setting):
        results = []
        for workers in (1, 2, 1):
            res, _ = self.run(setting, workers=workers, iterations=3)
            results.append(res)
        keys = {r.best.encoding.key() for r in results}
        phis = {r.best.phi for r in results}
        assert len(keys) == 1 and len(phis) == 1
        for a, b in zip(results[0].records, results[1].records):
            assert {k: v for k, v in a.items() if k != "wall_time_s"} == \
                   {k: v for k, v in b.items() if k != "wall_time_s"}

    def test_best_history_non_decreasing(self, setting):
        res, _ = self.run(setting, iterations=4, seed=3)
        assert all(b >= a for a, b in zip(res.history, res.history[1:]))
        assert res.best.phi == res.history[-1]

    def test_first_iteration_has_zero_variance(self, setting):
        res, _ = self.run(setting, iterations=2)
        first = [r for r in res.records if r["iteration"] == 1]
        assert len(first) == 6
        assert len({json.dumps(r["encoding"]) for r in first}) == 1

    def test_population_size_every_iteration(self, setting):
        res, _ = self.run(setting, iterations=4)
        for it in range(1, 5):
            assert sum(r["iteration"] == it for r in res.records) == 6

    def test_elites_carry_over_unchanged(self, setting):
        res, _ = self.run(setting, iterations=3, seed=11)
        by_iter = {}
        for r in res.records:
            by_iter.setdefault(r["iteration"], []).append(r)
        for it in (1, 2):
            ranked = sorted(by_iter[it], key=lambda r: -(r["phi"] if r["feasible"] else -1e18))
            elite_encs = [json.dumps(r["encoding"]) for r in ranked[:2]]
            next_encs = [json.dumps(r["encoding"]) for r in by_iter[it + 1][:2]]
            assert next_encs == elite_encs

    def test_best_respects_budget(self, setting):
        net, _, _, _, _, dense = setting
        res, cfg = self.run(setting, iterations=3, seed=5)
        assert res.best.params <= cfg.budget
        assert m.parameter_count(net, res.best.encoding) == res.best.params
        assert int(res.best.encoding.depth.sum()) >= cfg.min_depth

    def test_infeasible_candidates_marked(self, setting):
        res, cfg = self.run(setting, iterations=3, seed=5)
        net = setting[0]
        for r in res.records:
            assert r["feasible"] == (r["params"] <= cfg.budget)
            if not r["feasible"]:
                assert r["phi"] is None

    def test_zero_iterations_scores_anchor_once(self, setting):
        net, _, prior, _, _, dense = setting
        res, cfg = self.run(setting, iterations=0)
        assert len(res.records) == 1
        assert res.records[0]["iteration"] == 0
        anchor = se.anchor_encoding(net, prior, cfg)
        assert res.best.encoding.key() == anchor.key()
        assert np.isfinite(res.best.phi)

    def test_log_file_is_valid_jsonl(self, setting, tmp_path):
        res, _ = self.run(setting, tmp_path=tmp_path, iterations=2)
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == len(res.records) == 12
        for line in lines:
            rec = json.loads(line)
            assert {"iteration", "candidate", "phi", "feasible", "params",
                    "encoding", "active_blocks", "wall_time_s"} <= set(rec)

    def test_summary_json_shape(self, setting):
        res, cfg = self.run(setting, iterations=2)
        blob = se.summary_json(res, cfg)
        assert blob["params"] <= blob["budget"]
        assert isinstance(blob["best"]["depth"], list)


def test_sample_random_encoding_feasible(setting):
    net, _, prior, _, _, dense = setting
    cfg = scfg(budget=int(dense * 0.7))
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(20):
        enc = se.sample_random_encoding(rng, net, prior, cfg)
        assert m.parameter_count(net, enc) <= cfg.budget
        assert enc.depth.sum() >= cfg.min_depth
        enc.validate(cfg.min_depth, cfg.kappa_min)
        seen.add(enc.key())
    assert len(seen) > 10  # spread, not a point mass
