"""Rank statistics against scipy and brute force; training and ground truth."""

import itertools
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from prunesearch import corpus as cp
from prunesearch import evaluation as ev
from prunesearch import masks as mk
from prunesearch import model as m
from prunesearch import proxy as px
from prunesearch import search as se
from prunesearch.errors import InputError, NumericalError, StateError

CFG = m.ModelConfig(n_layers=2, d_model=16, n_heads=2, n_kv_heads=2, d_head=8,
                    d_ff=16, vocab_size=256, context_length=24, rounding_multiple=4)


class TestRanks:
    def test_average_ranks_matches_scipy(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.integers(0, 6, size=15).astype(float)  # plenty of ties
            np.testing.assert_allclose(ev.average_ranks(x), sps.rankdata(x))

    def test_spearman_worked_example(self):
        assert ev.spearman_rho([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_spearman_is_pearson_of_ranks(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 8, size=20).astype(float)
        y = rng.integers(0, 8, size=20).astype(float)
        direct = px.pearson(ev.average_ranks(x), ev.average_ranks(y))[0]
        assert ev.spearman_rho(x, y) == direct

    def test_spearman_matches_scipy_with_ties(self):
        rng = np.random.default_rng(2)
        for _ in range(15):
            x = rng.integers(0, 5, size=12).astype(float)
            y = rng.integers(0, 5, size=12).astype(float)
            expected = sps.spearmanr(x, y).statistic
            if np.isnan(expected):
                expected = 0.0
            assert ev.spearman_rho(x, y) == pytest.approx(expected, abs=1e-12)

    def test_kendall_worked_example(self):
        # five concordant pairs, one discordant, no ties
        assert ev.kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-12)

    def test_kendall_matches_scipy_with_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(15):
            x = rng.integers(0, 5, size=12).astype(float)
            y = rng.integers(0, 5, size=12).astype(float)
            expected = sps.kendalltau(x, y).statistic  # tau-b
            if np.isnan(expected):
                expected = 0.0
            assert ev.kendall_tau(x, y) == pytest.approx(expected, abs=1e-12)

    def test_exhaustive_permutations_n4(self):
        base = np.array([0.0, 1.0, 2.0, 3.0])
        for perm in itertools.permutations(range(4)):
            y = base[list(perm)]
            assert ev.spearman_rho(base, y) == pytest.approx(
                sps.spearmanr(base, y).statistic, abs=1e-12)
            assert ev.kendall_tau(base, y) == pytest.approx(
                sps.kendalltau(base, y).statistic, abs=1e-12)

    def test_fully_tied_inputs_give_zero(self):
        assert ev.kendall_tau([2, 2, 2], [1, 2, 3]) == 0.0
        assert ev.spearman_rho([2, 2, 2], [1, 2, 3]) == 0.0

    def test_identity_and_reversal(self):
        x = np.arange(10.0)
        assert ev.spearman_rho(x, x) == 1.0
        assert ev.kendall_tau(x, x) == 1.0
        assert ev.spearman_rho(x, x[::-1]) == -1.0
        assert ev.kendall_tau(x, x[::-1]) == -1.0

    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 20))
    def test_bounds(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 4, size=n).astype(float)
        y = rng.integers(0, 4, size=n).astype(float)
        assert -1.0 <= ev.kendall_tau(x, y) <= 1.0
        assert -1.0 <= ev.spearman_rho(x, y) <= 1.0

    def test_input_validation(self):
        with pytest.raises(InputError):
            ev.spearman_rho([1.0], [1.0])
        with pytest.raises(InputError):
            ev.kendall_tau([1.0, 2.0], [1.0])


@pytest.fixture(scope="module")
def trained():
    net = m.init_supernetwork(CFG, seed=0)
    tokens = cp.load_corpus(seed=0, size=1 << 15)
    train, calib_split, heldout = cp.split_corpus(tokens)
    tcfg = ev.TrainConfig(steps=120, batch_size=4, lr=0.4, seed=1, log_every=0)
    history = ev.train_tiny_base(net, train, tcfg)
    stats = m.collect_activation_stats(
        net, cp.eval_sequences(calib_split, 2, CFG.context_length))
    sal = mk.compute_saliency(net, stats)
    prior = se.compute_importance_prior(net, stats)
    heldout_batch = px.CalibrationBatch(cp.eval_sequences(heldout, 4, CFG.context_length))
    return net, train, sal, prior, heldout_batch, history


class TestTraining:
    def test_loss_decreases(self, trained):
        *_, history = trained
        assert np.mean(history[-10:]) < 0.8 * np.mean(history[:10])

    def test_divergence_raises_numerical_error(self):
        net = m.init_supernetwork(CFG, seed=1)
        split = cp.load_corpus(seed=1, size=1 << 13)
        tcfg = ev.TrainConfig(steps=40, batch_size=2, lr=1e15, seed=0, log_every=0)
        with pytest.raises(NumericalError, match="step"):
            ev.train_tiny_base(net, split, tcfg)

    def test_requires_pristine_dense_net(self):
        net = m.init_supernetwork(CFG, seed=0)
        m.attach_adapters(net, rank=2, seed=0)
        with pytest.raises(StateError):
            ev.train_tiny_base(net, np.zeros(4096, dtype=np.int64), ev.TrainConfig(steps=1))
        m.detach_adapters(net)
        net.block_active[0] = False
        with pytest.raises(StateError):
            ev.train_tiny_base(net, np.zeros(4096, dtype=np.int64), ev.TrainConfig(steps=1))

    def test_deterministic(self):
        split = cp.load_corpus(seed=2, size=1 << 13)

        def run():
            net = m.init_supernetwork(CFG, seed=3)
            ev.train_tiny_base(net, split, ev.TrainConfig(steps=15, batch_size=2, log_every=0))
            return [t.data.copy() for _, t in net.named_tensors()]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestTrueMetric:
    def test_identity_equals_dense_loss(self, trained):
        net, _, sal, _, heldout_batch, _ = trained
        dense = ev.heldout_loss(net, heldout_batch)
        enc = mk.ArchEncoding.identity(CFG.n_layers)
        assert ev.true_metric(net, enc, sal, heldout_batch) == pytest.approx(dense, abs=1e-12)

    def test_matches_manual_apply_and_restores(self, trained):
        net, _, sal, _, heldout_batch, _ = trained
        enc = mk.ArchEncoding(np.array([True, True]), np.array([[0.5, 0.5], [1.0, 0.5]]))
        before = [t.data.tobytes() for _, t in net.named_tensors()]
        got = ev.true_metric(net, enc, sal, heldout_batch)
        after = [t.data.tobytes() for _, t in net.named_tensors()]
        assert before == after and net.restore_token is None
        token = mk.apply_in_place(net, enc, mk.realize_masks(net, enc, sal))
        manual = ev.heldout_loss(net, heldout_batch)
        mk.restore(net, token)
        assert got == pytest.approx(manual, abs=1e-12)
        assert got != ev.heldout_loss(net, heldout_batch)  # masks changed the model

    def test_recovery_restores_and_usually_helps(self, trained):
        net, train, sal, _, heldout_batch, _ = trained
        enc = mk.ArchEncoding(np.array([True, True]), np.array([[0.5, 0.4], [0.8, 0.5]]))
        before = [t.data.tobytes() for _, t in net.named_tensors()]
        plain = ev.true_metric(net, enc, sal, heldout_batch)
        recovered = ev.true_metric(net, enc, sal, heldout_batch, train_split=train,
                                   recovery=ev.RecoveryConfig(steps=10, lr=0.2))
        after = [t.data.tobytes() for _, t in net.named_tensors()]
        assert before == after
        assert np.isfinite(recovered) and recovered != plain
        assert recovered < plain + 0.05  # at worst marginally off, typically better

    def test_recovery_requires_train_split(self, trained):
        net, _, sal, _, heldout_batch, _ = trained
        enc = mk.ArchEncoding.identity(CFG.n_layers)
        with pytest.raises(InputError):
            ev.true_metric(net, enc, sal, heldout_batch, recovery=ev.RecoveryConfig(steps=2))


class TestProxyVariants:
    def _traces(self):
        rng = np.random.default_rng(0)
        entries_a, entries_b = {}, {}
        for l in range(2):
            for sub in ("attn", "mlp"):
                entries_a[(l, sub)] = rng.standard_normal(16).astype(np.float32)
                entries_b[(l, sub)] = rng.standard_normal(16).astype(np.float32)
        a = px.GradientTrace(entries_a, 2, 0, 1, 8)
        b = px.GradientTrace(entries_b, 2, 0, 1, 8)
        enc = mk.ArchEncoding(np.array([True, True]), np.array([[0.5, 0.25], [1.0, 0.75]]))
        return a, b, enc

    def test_dot_is_weighted_raw_dot(self):
        a, b, enc = self._traces()
        expected = 0.0
        for (l, sub), w in zip([(0, "attn"), (0, "mlp"), (1, "attn"), (1, "mlp")],
                               [0.5, 0.25, 1.0, 0.75]):
            expected += w * float(
                a.entries[(l, sub)].astype(np.float64) @ b.entries[(l, sub)].astype(np.float64))
        assert ev.proxy_variant("dot", a, b, enc) == pytest.approx(expected, rel=1e-12)

    def test_cosine_bounded_by_weights(self):
        a, b, enc = self._traces()
        val = ev.proxy_variant("cosine", a, b, enc)
        assert abs(val) <= enc.kappa.sum() + 1e-9

    def test_unweighted_is_sum_of_correlations(self):
        a, b, enc = self._traces()
        expected = sum(
            px.pearson(a.entries[k], b.entries[k])[0]
            for k in [(0, "attn"), (0, "mlp"), (1, "attn"), (1, "mlp")]
        )
        assert ev.proxy_variant("unweighted", a, b, enc) == pytest.approx(expected, rel=1e-12)

    def test_full_matches_correlate(self):
        a, b, enc = self._traces()
        assert ev.proxy_variant("full", a, b, enc) == px.correlate(a, b, enc).phi

    def test_unknown_variant_rejected(self):
        a, b, enc = self._traces()
        with pytest.raises(InputError):
            ev.proxy_variant("euclid", a, b, enc)


class TestPoolAndReport:
    def test_engineered_monotone_pool_ranks_perfectly(self):
        rng = np.random.default_rng(0)
        phis = rng.standard_normal(12)
        entries = [
            ev.PoolEntry(None, {"full": p, "anti": -p}, float(3 * p + 1), 100)
            for p in phis
        ]
        report = ev.validate_proxy(ev.RankedPool(entries))
        assert report.row("full")["spearman"] == pytest.approx(1.0)
        assert report.row("full")["kendall"] == pytest.approx(1.0)
        assert report.row("anti")["spearman"] == pytest.approx(-1.0)
        assert report.row("anti")["kendall"] == pytest.approx(-1.0)

    def test_build_pool_distinct_and_deterministic(self, trained):
        net, _, sal, prior, heldout_batch, _ = trained
        dense = m.parameter_count(net, mk.ArchEncoding.identity(CFG.n_layers))
        scfg = se.SearchConfig(budget=int(0.7 * dense), min_depth=1, seed=0)
        calib = px.CalibrationBatch(heldout_batch.tokens[:2])
        m.attach_adapters(net, rank=2, seed=4)
        try:
            anchor = px.compute_anchor(net, calib)
            pool1 = ev.build_pool(net, sal, prior, calib, anchor, heldout_batch,
                                  count=5, seed=7, search_cfg=scfg)
            pool2 = ev.build_pool(net, sal, prior, calib, anchor, heldout_batch,
                                  count=5, seed=7, search_cfg=scfg)
        finally:
            m.detach_adapters(net)
        keys = {e.encoding.key() for e in pool1.entries}
        assert len(keys) == 5
        for e1, e2 in zip(pool1.entries, pool2.entries):
            assert e1.encoding.key() == e2.encoding.key()
            assert e1.proxies == e2.proxies and e1.metric == e2.metric
        for e in pool1.entries:
            assert set(e.proxies) == set(ev.PROXY_VARIANTS)
            assert e.params <= scfg.budget

    def test_report_csv_shape(self):
        entries = [ev.PoolEntry(None, {"full": float(i)}, float(i), 10) for i in range(3)]
        text = ev.report_csv(ev.validate_proxy(ev.RankedPool(entries)))
        lines = text.strip().splitlines()
        assert lines[0] == "variant,spearman,kendall,n"
        assert lines[1].startswith("full,1.000000,1.000000,3")

    def test_scatter_svg_is_valid_xml_with_all_points(self):
        xs = np.linspace(0, 1, 9)
        svg = ev.scatter_svg(xs, xs**2, "phi", "neg loss")
        root = ET.fromstring(svg)
        circles = [e for e in root.iter() if e.tag.endswith("circle")]
        assert len(circles) == 9
        with pytest.raises(InputError):
            ev.scatter_svg(xs, xs[:3])
