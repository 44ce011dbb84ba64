import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from nemesis.errors import DimensionError, ParameterError
from nemesis.model import ModelConfig, init_params
from nemesis.probe import (ProbeConfig, ProbeTable, auroc, build_table, extract_features,
                           f1_binary, label_superpatches, label_sweep, macro_auroc, macro_f1,
                           probe_objective, read_table, stratified_subset, train_linear,
                           write_sweep, write_sweep_long, write_table)
from nemesis.superpatch import SuperpatchGrid
from nemesis.volume import LabelGrid, Volume


def pairwise_auroc(scores, labels):
    """O(n^2) oracle: P(score_pos > score_neg) with ties counted as one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


class TestLabels:
    def test_threshold_inclusive(self):
        lab = np.zeros((8, 8, 8), dtype=np.uint16)
        lab.reshape(-1)[:99] = 1
        assert label_superpatches(LabelGrid(lab), 8, 100).tolist() == [[0] * 8]
        lab.reshape(-1)[:100] = 1
        assert label_superpatches(LabelGrid(lab), 8, 100).tolist() == [[1] + [0] * 7]

    def test_empty(self):
        assert label_superpatches(LabelGrid(np.zeros((16, 16, 16))), 8).sum() == 0

    def test_sphere_in_one_superpatch(self):
        lab = np.zeros((32, 32, 32), dtype=np.uint16)
        i, j, k = np.indices((16, 16, 16))
        lab[16:, :16, 16:][(i - 8) ** 2 + (j - 8) ** 2 + (k - 8) ** 2 <= 25] = 3
        bits = label_superpatches(LabelGrid(lab), SuperpatchGrid((32, 32, 32), 16), 100)
        assert bits[:, 2].tolist() == [0, 0, 0, 0, 0, 1, 0, 0]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 300), st.integers(0, 300))
    def test_monotone_in_threshold(self, seed, t, extra):
        lab = LabelGrid(np.random.default_rng(seed).integers(0, 9, size=(16, 16, 16)))
        lo = label_superpatches(lab, 8, t)
        hi = label_superpatches(lab, 8, t + extra)
        assert (hi <= lo).all()

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            label_superpatches(LabelGrid(np.zeros((16, 16, 16))), SuperpatchGrid((32, 16, 16), 16))


class TestAUROC:
    def test_examples(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
        assert auroc([0.1, 0.2], [0, 0]) is None

    def test_against_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = rng.integers(0, 6, size=n) / 5.0  # coarse grid forces ties
            assert auroc(scores, labels) == pairwise_auroc(scores, labels)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=30)
        y = rng.integers(0, 2, size=30)
        y[:2] = (0, 1)
        base = auroc(s, y)
        assert auroc(np.exp(s), y) == base
        assert auroc(3.0 * s + 7.0, y) == base
        assert auroc(-s, y) == pytest.approx(1.0 - base, abs=1e-12)

    def test_macro_excludes_undefined(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.2], [0.8, 0.3]])
        labels = np.array([[1, 0], [0, 0], [1, 0]])
        mean, per = macro_auroc(scores, labels)
        assert per == [1.0, None] and mean == 1.0


class TestF1:
    def test_all_negative_is_zero(self):
        labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
        assert macro_f1(np.full(labels.shape, 0.2), labels, 0.5) == 0.0

    def test_perfect(self):
        labels = np.array([[1, 0], [0, 1]])
        assert macro_f1(labels.astype(float), labels) == 1.0

    def test_two_thirds(self):
        assert f1_binary([1, 1], [1, 0]) == pytest.approx(2 / 3, abs=1e-15)

    def test_threshold_inclusive(self):
        assert macro_f1(np.array([0.5]), np.array([1])) == 1.0

    def test_no_positives_anywhere(self):
        assert f1_binary([0, 0], [0, 0]) == 0.0

    def test_bad_threshold(self):
        with pytest.raises(ParameterError):
            macro_f1(np.zeros(2), np.zeros(2), threshold=1.0)


def toy_table(n=60, d=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = np.stack([(x[:, 0] > 0), (x[:, 1] + 0.5 * rng.normal(size=n) > 0)], axis=1).astype(int)
    return ProbeTable([f"r{i}" for i in range(n)], x * 10 + 3, y)


class TestLinearProbe:
    def test_separable(self):
        table = toy_table()
        probe = train_linear(table, ProbeConfig(l2=1e-4, epochs=3000))
        pred = probe.scores(table.features)[:, 0] >= 0.5
        assert (pred == table.targets[:, 0].astype(bool)).all()

    def test_degenerate_class(self):
        table = toy_table()
        table.targets[:, 1] = 0
        probe = train_linear(table, ProbeConfig())
        assert probe.degenerate.tolist() == [False, True]
        assert (probe.weights[:, 1] == 0).all()

    def test_converges_to_independent_optimum(self):
        table = toy_table(seed=3)
        pc = ProbeConfig(epochs=500)
        short = train_linear(table, pc)
        long = train_linear(table, pc, epochs=5000)
        assert abs(short.loss - long.loss) < 1e-4
        # independent optimizer on the same standardized objective
        x = (table.features - table.features.mean(0)) / table.features.std(0)
        for c in range(2):
            y = table.targets[:, c].astype(float)

            def obj(theta):
                z = x @ theta[:-1] + theta[-1]
                return np.mean(np.logaddexp(0, z) - y * z) + 0.5 * pc.l2 * theta[:-1] @ theta[:-1]

            ref = minimize(obj, np.zeros(5), method="L-BFGS-B", options={"gtol": 1e-12}).fun
            w = short.weights[:, c] * table.features.std(0)
            b = short.bias[c] + table.features.mean(0) @ short.weights[:, c]
            assert abs(obj(np.append(w, b)) - ref) < 1e-4
        assert probe_objective(short, table, pc) == pytest.approx(short.loss, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ParameterError):
            train_linear(ProbeTable([], np.zeros((0, 2)), np.zeros((0, 1))), ProbeConfig())


class TestSweep:
    def test_subset_sizes_and_strata(self):
        y = np.zeros((40, 2), dtype=int)
        y[:3, 0] = 1
        y[10:30, 1] = 1
        idx = stratified_subset(y, 0.1, 5)
        assert idx.size == 4 and len(set(idx)) == 4
        assert y[idx, 0].max() == 1 and y[idx, 0].min() == 0
        assert np.array_equal(stratified_subset(y, 1.0, 0), np.arange(40))

    def test_rows_and_full_fraction(self, tmp_path):
        train, test = toy_table(80, seed=1), toy_table(40, seed=2)
        pc = ProbeConfig(n_organs=2, epochs=300)
        rows = label_sweep(train, test, pc)
        assert [r.fraction for r in rows] == [0.1, 0.25, 0.5, 1.0]
        assert [r.n_train for r in rows] == [8, 20, 40, 80]
        full = train_linear(train, pc)
        from nemesis.probe import evaluate
        assert evaluate(full, test, pc)[0] == rows[-1].auroc
        write_sweep(rows, tmp_path / "s.csv", 2)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "method,metric,10%,25%,50%,100%"
        assert [ln.split(",")[1] for ln in lines[1:]] == ["auroc", "macro_f1"]
        write_sweep_long(rows, tmp_path / "l.csv", 2)
        assert len((tmp_path / "l.csv").read_text().splitlines()) == 5


class TestFeatures:
    def setup_method(self):
        self.cfg = ModelConfig(superpatch=8, patch=4, dim=8, depth=1, decoder_depth=1, heads=2,
                               nt_tokens=1)
        self.params = init_params(self.cfg)

    def test_shape_and_purity(self):
        block = np.random.default_rng(0).random((8, 8, 8))
        v = Volume(np.concatenate([block, block], axis=0).astype(np.float32))
        before = {k: a.copy() for k, a in self.params.arrays().items()}
        feats = extract_features(v, self.params)
        assert feats.shape == (2, 8)
        assert feats[0].tobytes() == feats[1].tobytes()
        assert all(np.array_equal(before[k], a) for k, a in self.params.arrays().items())
        assert extract_features(v, self.params, threads=2).tobytes() == feats.tobytes()

    def test_table_roundtrip(self, tmp_path):
        v = Volume(np.random.default_rng(1).random((16, 8, 8)).astype(np.float32))
        lab = LabelGrid(np.ones((16, 8, 8)))
        table = build_table([(v, lab)], self.params, ProbeConfig(), "train")
        assert table.ids == ["train000_000", "train000_100"]
        write_table(table, tmp_path / "t.csv")
        header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
        assert header[:2] == ["id", "feat_0"] and header[-1] == "pancreas"
        back = read_table(tmp_path / "t.csv", 8)
        assert back.ids == table.ids and np.array_equal(back.features, table.features)
        assert np.array_equal(back.targets, table.targets)
