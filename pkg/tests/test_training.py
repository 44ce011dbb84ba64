import numpy as np
import pytest

from nemesis import ndnum as nd
from nemesis.errors import ConfigError, GeometryError, NumericError, ParameterError
from nemesis.model import ModelConfig, ModelParams, init_params
from nemesis.training import (AdamState, TrainConfig, lr_at, optimizer_step, train,
                              write_train_log)
from nemesis.volume import Volume

TINY = dict(superpatch=8, patch=4, dim=8, depth=1, decoder_depth=1, heads=2, nt_tokens=1)


def quad_params(w):
    """Wrap raw tensors so optimizer_step can treat them like model params."""
    return ModelParams(ModelConfig(**TINY), {k: nd.parameter(v) for k, v in w.items()})


class TestOptimizer:
    def test_first_step(self):
        tc = TrainConfig(lr=0.1, weight_decay=0.0, warmup=0)
        p = quad_params({"w": np.array([1.0])})
        p, state = optimizer_step(p, {"w": np.array([1.0])}, AdamState(), tc)  # grad of w^2/2
        assert abs(p["w"].data[0] - 0.9) < 1e-6 and state.t == 1

    def test_zero_grad_unchanged(self):
        tc = TrainConfig(weight_decay=0.0, warmup=0)
        w = np.random.default_rng(0).normal(size=(3, 3))
        p, _ = optimizer_step(quad_params({"w": w}), {"w": np.zeros((3, 3))}, AdamState(), tc)
        assert np.array_equal(p["w"].data, w)

    def test_decoupled_decay_factor(self):
        tc = TrainConfig(lr=0.01, weight_decay=0.05, warmup=0)
        w = np.random.default_rng(0).normal(size=(3, 3))
        b = np.array([1.0, 2.0])
        p = quad_params({"w": w, "b": b})
        expected = w
        for _ in range(3):
            p, _ = optimizer_step(p, {"w": np.zeros((3, 3)), "b": np.zeros(2)}, AdamState(), tc)
            expected = expected * (1 - 0.01 * 0.05)
            assert np.array_equal(p["w"].data, expected)
        assert np.array_equal(p["b"].data, b)

    def test_convex_quadratic(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 5))
        q = a @ a.T + 5 * np.eye(5)
        c = rng.normal(size=5)
        opt = np.linalg.solve(q, c)

        def loss(w):
            return 0.5 * w @ q @ w - c @ w

        tc = TrainConfig(steps=200, lr=0.1, weight_decay=0.0, warmup=0)
        p, state = quad_params({"w": np.zeros(5)}), AdamState()
        for step in range(1, 201):
            w = p["w"].data
            p, state = optimizer_step(p, {"w": q @ w - c}, state, tc, lr_at(step, tc))
        assert loss(p["w"].data) - loss(opt) < 1e-6

    def test_nonfinite_grad_names_tensor(self):
        p = quad_params({"w": np.zeros(2)})
        with pytest.raises(NumericError, match="w"):
            optimizer_step(p, {"w": np.array([np.nan, 0.0])}, AdamState(), TrainConfig())


class TestSchedule:
    def test_endpoints(self):
        tc = TrainConfig(steps=500, warmup=100, lr=1e-3)
        assert lr_at(0, tc) == 0.0
        assert lr_at(100, tc) == 1e-3
        assert lr_at(500, tc) == pytest.approx(0.0, abs=1e-18)
        assert lr_at(50, tc) == pytest.approx(5e-4)
        assert lr_at(300, tc) == pytest.approx(5e-4)

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            lr_at(501, TrainConfig(steps=500))

    @pytest.mark.parametrize("kw", [dict(warmup=600), dict(lr=0.0), dict(batch_size=0)])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def corpus(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [Volume(rng.random((16, 16, 8)).astype(np.float32), "normalized") for _ in range(n)]


class TestTrain:
    def test_zero_steps(self):
        p = init_params(ModelConfig(**TINY))
        out, log = train(p, corpus(), TrainConfig(steps=0, warmup=0))
        assert log.records == []
        assert all(out[k].data.tobytes() == p[k].data.tobytes() for k in p)

    def test_deterministic(self):
        tc = TrainConfig(steps=6, warmup=2, batch_size=2)
        runs = [train(init_params(ModelConfig(**TINY)), corpus(), tc) for _ in range(2)]
        (a, la), (b, lb) = runs
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
        assert la.losses().tobytes() == lb.losses().tobytes()
        assert [r["step"] for r in la.records] == list(range(1, 7))

    def test_resume_matches_unbroken(self):
        tc = TrainConfig(steps=6, warmup=2)
        full, _ = train(init_params(ModelConfig(**TINY)), corpus(), tc)
        saved = {}

        def keep(step, params, state, log):
            if step == 3:
                saved["p"], saved["s"] = params.copy(), AdamState(state.t, dict(state.m), dict(state.v))

        train(init_params(ModelConfig(**TINY)), corpus(), TrainConfig(steps=6, warmup=2,
                                                                      checkpoint_interval=3),
              on_checkpoint=keep)
        resumed, log = train(saved["p"], corpus(), tc, state=saved["s"])
        assert [r["step"] for r in log.records] == [4, 5, 6]
        assert all(full[k].data.tobytes() == resumed[k].data.tobytes() for k in full)

    def test_probe_loss_finite(self):
        _, log = train(init_params(ModelConfig(**TINY)), corpus(), TrainConfig(steps=4, warmup=1,
                                                                               probe_interval=2))
        assert [s for s, _ in log.probe] == [2, 4]
        assert all(np.isfinite(v) for _, v in log.probe)

    def test_geometry_error_reports_volume(self):
        bad = corpus() + [Volume(np.zeros((12, 16, 8), dtype=np.float32))]
        with pytest.raises(GeometryError, match="volume 3"):
            train(init_params(ModelConfig(**TINY)), bad, TrainConfig(steps=1, warmup=0))

    def test_log_csv(self, tmp_path):
        _, log = train(init_params(ModelConfig(**TINY)), corpus(), TrainConfig(steps=2, warmup=1))
        write_train_log(log, tmp_path / "a.csv")
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr" and len(lines) == 3
        write_train_log(log, tmp_path / "b.csv", with_time=True)
        assert (tmp_path / "b.csv").read_text().splitlines()[0] == "step,loss,lr,seconds"
