import numpy as np
import pytest

from threerinn import tensor as T
from threerinn.errors import NonFiniteError
from threerinn.imaging import synthetic_pairs
from threerinn.network import ThreeRINN
from threerinn.tensor import Tensor
from threerinn.training import (
    HISTORY_COLUMNS,
    Adam,
    TrainingConfig,
    adam_step,
    clip_grad_norm,
    train_stage1,
    train_stage2,
    write_history,
)


def tiny_cfg(**kw):
    base = dict(batch_size=2, crop=16, stage1_iters=3, stage2_iters=2, n_blocks=1, width=4, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


def tiny_net(seed=0):
    return ThreeRINN(n_blocks=1, width=4, seed=seed)


class TestAdam:
    def test_zero_grads(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.array([1.0, 1.0])
        opt.step(0.1)
        before = p.data.copy()
        m_before = opt.m[0].copy()
        p.grad = np.zeros(2)
        opt.step(0.1)
        # the first moment still carries momentum, so params move; it decays by beta1
        np.testing.assert_allclose(opt.m[0], 0.9 * m_before)
        q = Tensor(np.array([3.0]), requires_grad=True)
        fresh = Adam([q])
        q.grad = np.zeros(1)
        fresh.step(0.1)
        assert q.data[0] == 3.0 and not np.any(fresh.m[0]) and not np.any(fresh.v[0])
        assert not np.array_equal(p.data, before)

    @pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
    def test_first_step_is_lr_sign(self, g):
        p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([g])
        Adam([p]).step(1e-2)
        # m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        assert p.data[0] == pytest.approx(-1e-2 * np.sign(g) * abs(g) / (abs(g) + 1e-8), rel=1e-12)

    def test_missing_grad(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ValueError, match="no gradient"):
            Adam([p]).step(0.1)

    def test_state_belongs_to_params(self):
        a, b = Tensor(np.zeros(1), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
        b.grad = np.zeros(1)
        with pytest.raises(ValueError):
            adam_step([b], Adam([a]), 0.1)

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        p.grad = np.array([30.0, 40.0])
        assert clip_grad_norm([p], 10.0) == pytest.approx(50.0)
        assert np.linalg.norm(p.grad) == pytest.approx(10.0)


class TestSchedule:
    def test_halving(self):
        cfg = TrainingConfig(stage1_iters=100, lr0=2e-4)
        assert cfg.milestones == [20, 40, 60, 80]
        assert cfg.learning_rate(19) == 2e-4
        assert cfg.learning_rate(20) == 1e-4
        assert cfg.learning_rate(99) == pytest.approx(2e-4 / 16)

    def test_full_scale(self):
        cfg = TrainingConfig.full_scale()
        assert cfg.milestones == [100_000, 200_000, 300_000, 400_000]
        assert cfg.learning_rate(100_000) == cfg.lr0 / 2

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainingConfig(stage1_iters=10, lr_milestones=[5, 3])
        with pytest.raises(ValueError):
            TrainingConfig(crop=15)


class TestLoops:
    def test_history_length_and_columns(self, tmp_path):
        res = train_stage1(synthetic_pairs(2, 32, seed=0), tiny_cfg(), net=tiny_net())
        assert len(res.history) == 3
        write_history(res.history, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == ",".join(HISTORY_COLUMNS) and len(lines) == 4

    def test_parameters_change(self):
        net = tiny_net()
        before = [p.data.copy() for p in net.parameters()]
        train_stage1(synthetic_pairs(2, 32, seed=0), tiny_cfg(), net=net)
        assert any(not np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))

    def test_deterministic(self):
        pairs = synthetic_pairs(2, 32, seed=0)
        a = train_stage1(pairs, tiny_cfg(), net=tiny_net())
        b = train_stage1(pairs, tiny_cfg(), net=tiny_net())
        assert a.history == b.history
        for p, q in zip(a.net.parameters(), b.net.parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train_stage1([], tiny_cfg(), net=tiny_net())

    def test_non_finite_reports_iteration(self, monkeypatch):
        import threerinn.training as tr

        orig = tr.sample_batch

        def nan_targets(pairs, cfg, rng, dtype=np.float32):
            b = orig(pairs, cfg, rng, dtype)
            b.clean_lr = Tensor(np.full(b.clean_lr.shape, np.nan, dtype=dtype))
            return b

        monkeypatch.setattr(tr, "sample_batch", nan_targets)
        with pytest.raises(NonFiniteError, match="iteration 0"):
            train_stage1(synthetic_pairs(1, 32, seed=0), tiny_cfg(), net=tiny_net())

    def test_stage2_stamps_rate_and_keeps_input(self):
        pairs = synthetic_pairs(2, 32, seed=0)
        net = tiny_net()
        before = [p.data.copy() for p in net.parameters()]
        res = train_stage2(net, pairs, tiny_cfg(R=0.2, crop=24))
        assert res.net.reduction_rate == 0.2 and net.reduction_rate == 0.0
        assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))
        assert len(res.history) == 2 and res.history[0]["loss_pow"] > 0

    def test_stage2_r0_targets_current_power(self):
        from threerinn.losses import PowerModelConfig, loss_power

        pairs = synthetic_pairs(1, 32, seed=1)
        x = Tensor(np.stack([pairs[0].clean_lr.transpose(2, 0, 1)]))
        with T.no_grad():
            assert loss_power(x, x, 0.0, PowerModelConfig()).item() == 0.0
