import math

import numpy as np
import pytest

from ckdlab import autodiff as ad
from ckdlab import losses
from ckdlab.model import (BatchNormLayer, ModelConfig, apply_bn_stats, embed, forward_pair,
                          init_model, predict_logits, shared_batch_normalize, update_running)

SMALL = ModelConfig(face_dim=8, peri_dim=5, trunk_widths=(7, 6), head_width=6, embed_dim=4,
                    num_classes=5)


def _cfg(**kw):
    return ModelConfig(**{**SMALL.__dict__, **kw})


def _layer(c):
    return BatchNormLayer(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))


class TestConfig:
    def test_sbs_requires_shared_weights(self):
        with pytest.raises(ValueError):
            _cfg(share_weights=False, share_batch_stats=True)

    @pytest.mark.parametrize("kw", [{"trunk_widths": ()}, {"embed_dim": 1}, {"num_classes": 1},
                                    {"bn_momentum": 1.0}, {"peri_dim": 9}, {"face_dim": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            _cfg(**kw)


class TestInit:
    def test_same_seed_same_parameters(self):
        a, b = init_model(_cfg(seed=3)), init_model(_cfg(seed=3))
        assert a.fingerprint() == b.fingerprint()
        assert init_model(_cfg(seed=4)).fingerprint() != a.fingerprint()

    def test_running_stats_start_at_zero_one(self):
        s = init_model(SMALL)
        for k, v in s.running.items():
            np.testing.assert_array_equal(v, 0.0 if k.endswith(".mean") else 1.0)

    def test_separate_trunks_are_independent(self):
        s = init_model(_cfg(share_weights=False, share_batch_stats=False))
        assert "trunk_peri.0.weight" in s.params and "trunk_face.0.weight" in s.params
        assert not any(k.startswith("trunk.") for k in s.params)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, SMALL.face_dim))
        before = forward_pair(s, x_face=x).u_f.data
        s.params["trunk_peri.0.weight"] += 1.0
        np.testing.assert_array_equal(forward_pair(s, x_face=x).u_f.data, before)

    def test_fan_in_scaled_std(self):
        # Sample std of each weight matrix, pooled over 10 seeds, against sqrt(2 / fan_in).
        cfg = ModelConfig()
        stats: dict[str, list] = {}
        for seed in range(10):
            s = init_model(ModelConfig(**{**cfg.__dict__, "seed": seed}))
            for k, w in s.params.items():
                if k.endswith(".weight"):
                    stats.setdefault(k, []).append(w)
        for k, ws in stats.items():
            w = np.stack(ws)
            target = math.sqrt(2.0 / w.shape[1])
            assert abs(w.std() / target - 1) < 0.2, k

    def test_biases_zero_and_bn_identity(self):
        s = init_model(SMALL)
        for k, v in s.params.items():
            if k.endswith(".bias") or k.endswith(".beta"):
                assert not v.any()
            if k.endswith(".gamma"):
                np.testing.assert_array_equal(v, 1.0)


class TestSharedBatchNorm:
    def test_shared_mean_example(self):
        _, _, stats = shared_batch_normalize(np.ones((3, 1)), np.full((3, 1), 3.0), _layer(1),
                                             sbs=True, training=True)
        np.testing.assert_array_equal(stats["shared"][0], [2.0])
        assert stats["shared"][2] == 6

    def test_identical_batches_agree_across_modes(self):
        x = np.random.default_rng(1).normal(size=(5, 4))
        sp, sf, _ = shared_batch_normalize(x, x, _layer(4), sbs=True, training=True)
        pp, pf, _ = shared_batch_normalize(x, x, _layer(4), sbs=False, training=True)
        np.testing.assert_allclose(sp.data, pp.data, atol=1e-12)
        np.testing.assert_allclose(sf.data, pf.data, atol=1e-12)

    def test_concatenated_output_is_standardized(self):
        rng = np.random.default_rng(2)
        xp, xf = rng.normal(1, 2, (7, 3)), rng.normal(-3, 0.5, (7, 3))
        op, of, _ = shared_batch_normalize(xp, xf, _layer(3), sbs=True, training=True)
        both = np.vstack([op.data, of.data])
        np.testing.assert_allclose(both.mean(axis=0), 0.0, atol=1e-9)
        var = both.var(axis=0)
        raw = np.vstack([xp, xf]).var(axis=0)
        np.testing.assert_allclose(var, raw / (raw + 1e-5), atol=1e-6)

    def test_per_view_standardizes_each_view(self):
        rng = np.random.default_rng(3)
        op, of, stats = shared_batch_normalize(rng.normal(5, 1, (6, 2)), rng.normal(-5, 1, (6, 2)),
                                               _layer(2), sbs=False, training=True)
        np.testing.assert_allclose(op.data.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(of.data.mean(axis=0), 0.0, atol=1e-9)
        assert set(stats) == {"peri", "face"}

    def test_eval_mode_with_unit_stats_is_near_identity(self):
        x = np.random.default_rng(4).normal(size=(4, 3))
        op, of, stats = shared_batch_normalize(x, x, _layer(3), sbs=True, training=False)
        np.testing.assert_allclose(op.data, x / np.sqrt(1 + 1e-5), atol=1e-15)
        assert stats == {}

    def test_single_row_training_names_channels(self):
        with pytest.raises(ValueError, match="channels"):
            shared_batch_normalize(np.ones((1, 3)), np.ones((1, 3)), _layer(3), sbs=False, training=True)

    def test_channel_mismatch(self):
        with pytest.raises(ad.ShapeError):
            shared_batch_normalize(np.ones((2, 3)), np.ones((2, 4)), _layer(3), sbs=True, training=True)

    def test_nonpositive_epsilon(self):
        with pytest.raises(ValueError):
            BatchNormLayer(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps=0.0)

    def test_running_update_is_unbiased_ema(self):
        mean, var = update_running(np.zeros(2), np.ones(2), np.array([1.0, 2.0]), np.array([0.5, 2.0]),
                                   rows=4, momentum=0.9)
        np.testing.assert_allclose(mean, [0.1, 0.2])
        np.testing.assert_allclose(var, [0.9 + 0.1 * 0.5 * 4 / 3, 0.9 + 0.1 * 2.0 * 4 / 3])


class TestForward:
    def test_shapes(self):
        rng = np.random.default_rng(5)
        out = forward_pair(init_model(SMALL), rng.normal(size=(3, 5)), rng.normal(size=(3, 8)))
        assert out.z.shape == out.z_f.shape == (3, 5)
        assert out.u.shape == out.u_f.shape == (3, 4)

    def test_shared_trunk_identical_padded_inputs(self):
        rng = np.random.default_rng(6)
        xp = rng.normal(size=(6, SMALL.peri_dim))
        xf = np.zeros((6, SMALL.face_dim))
        xf[:, :SMALL.peri_dim] = xp
        s = init_model(SMALL)
        # Make the heads identical so the embedding comparison covers the trunk.
        for k in list(s.params):
            if k.startswith("head_face"):
                s.params[k] = s.params[k.replace("head_face", "head_peri")].copy()
        out = forward_pair(s, xp, xf)
        np.testing.assert_allclose(out.u.data, out.u_f.data, atol=1e-12)

    def test_shared_trunk_gets_both_views(self):
        rng = np.random.default_rng(7)
        s = init_model(SMALL)
        xp, xf, y = rng.normal(size=(6, 5)), rng.normal(size=(6, 8)), rng.integers(0, 5, 6)

        def trunk_grad(**views):
            out = forward_pair(s, **views)
            loss = sum(losses.ce_loss(z, y) for z in out.logits.values()) if len(views) == 1 else \
                losses.full_loss_t(out.z, out.z_f, y, 2.5)
            return out.tape.backward(loss)[out.leaves["trunk.0.weight"].node_id]

        g_both = trunk_grad(x_peri=xp, x_face=xf)
        assert np.linalg.norm(g_both) > 0
        assert np.linalg.norm(g_both - trunk_grad(x_peri=xp)) > 0
        assert np.linalg.norm(g_both - trunk_grad(x_face=xf)) > 0

    def test_initial_loss_near_uniform(self):
        rng = np.random.default_rng(8)
        cfg = ModelConfig()
        s = init_model(cfg)
        for k in s.params:
            if k.startswith("cls_"):
                s.params[k] = s.params[k] * 0.01
        out = forward_pair(s, rng.normal(size=(32, cfg.peri_dim)), rng.normal(size=(32, cfg.face_dim)))
        loss = losses.full_loss_t(out.z, out.z_f, rng.integers(0, cfg.num_classes, 32), 2.5).item()
        assert np.isfinite(out.z.data).all()
        assert abs(loss / (2 * math.log(cfg.num_classes)) - 1) < 0.1

    def test_dimension_mismatch(self):
        s = init_model(SMALL)
        with pytest.raises(ad.ShapeError):
            forward_pair(s, x_peri=np.ones((2, 4)))
        with pytest.raises(ad.ShapeError):
            forward_pair(s, x_face=np.ones((2, 5)))
        with pytest.raises(ValueError):
            forward_pair(s)

    def test_frozen_groups_are_constants(self):
        rng = np.random.default_rng(9)
        out = forward_pair(init_model(SMALL), rng.normal(size=(4, 5)), rng.normal(size=(4, 8)),
                           trainable={"head_peri", "cls_peri"})
        assert {k.split(".")[0] for k in out.leaves} == {"head_peri", "cls_peri"}


class TestEval:
    @pytest.fixture()
    def state(self):
        rng = np.random.default_rng(10)
        s = init_model(SMALL)
        for _ in range(5):
            out = forward_pair(s, rng.normal(size=(8, 5)), rng.normal(1, 2, size=(8, 8)))
            apply_bn_stats(s, out.bn_stats)
        return s.eval()

    def test_training_state_rejected(self):
        s = init_model(SMALL)
        with pytest.raises(RuntimeError):
            embed(s, np.ones((2, 5)))
        with pytest.raises(RuntimeError):
            predict_logits(s, np.ones((2, 5)))

    def test_repeatable(self, state):
        x = np.random.default_rng(11).normal(size=(5, 5))
        np.testing.assert_array_equal(embed(state, x), embed(state, x))

    def test_independent_of_batch_composition(self, state):
        x = np.random.default_rng(12).normal(size=(9, 5))
        whole = embed(state, x)
        np.testing.assert_allclose(embed(state, x, batch_size=2), whole, atol=1e-14)
        np.testing.assert_allclose(embed(state, x[3:4]), whole[3:4], atol=1e-14)

    def test_face_head_does_not_affect_periocular(self, state):
        x = np.random.default_rng(13).normal(size=(4, 5))
        before = embed(state, x)
        for k in state.params:
            if k.startswith(("head_face", "cls_face")):
                state.params[k] = state.params[k] + 1.0
        np.testing.assert_array_equal(embed(state, x), before)

    def test_running_variance_positive(self, state):
        assert all((v > 0).all() for k, v in state.running.items() if k.endswith(".var"))

    def test_unknown_view(self, state):
        with pytest.raises(ValueError):
            embed(state, np.ones((1, 5)), view="iris")
