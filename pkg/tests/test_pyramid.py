import numpy as np
import pytest

from flowweld import flow as fl
from flowweld import pyramid as pm
from flowweld import synth
from flowweld.errors import ConfigError, EmptyMask, MissingGlobal, NonFiniteGradient

SMALL = dict(height=32, width=24, scales=4, iters=300)


@pytest.fixture(scope="module")
def identity_scene():
    return synth.build_scene("scale", 32, 24, sy=1.0, sx=1.0)


class TestConfig:
    def test_published_defaults(self):
        c = pm.PyramidConfig()
        assert c.alphas == (1.0, 0.2, 2.0, 2.0, 1.0, 1.0)
        assert c.lr == 5e-4 and c.scales == 5 and c.upsample_factor == 2
        assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)

    def test_divisibility_checked_up_front(self):
        with pytest.raises(ConfigError):
            pm.PyramidConfig(height=32, width=24, scales=5)

    @pytest.mark.parametrize("bad", [dict(scales=0), dict(iters=0), dict(alphas=(1, 1)),
                                     dict(alphas=(1, 0.2, 2, 2, -1, 1)), dict(lr=0),
                                     dict(loss_variant="l2"), dict(region="body"),
                                     dict(upsample_factor=3)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            pm.PyramidConfig(**bad)

    def test_scale_factors(self):
        assert pm.PyramidConfig(scales=3).scale_factors() == [4, 2, 1]


class TestAdam:
    def test_first_step(self):
        st = pm.AdamState.zeros_like(np.zeros(1), lr=5e-4)
        p, st = pm.adam_step(st, np.zeros(1), np.array([2.0]))
        assert np.isclose(p[0], -5e-4 * 2 / (2 + 1e-8), rtol=1e-12, atol=0)
        assert st.t == 1

    def test_zero_gradient(self):
        x = np.array([1.0, -2.0])
        st = pm.AdamState.zeros_like(x)
        p, st = pm.adam_step(st, x, np.zeros(2))
        np.testing.assert_array_equal(p, x)
        assert st.t == 1

    def test_matches_textbook_recursion(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=5)
        st = pm.AdamState.zeros_like(x, lr=0.01)
        m = np.zeros(5)
        v = np.zeros(5)
        ref = x.copy()
        for t in range(1, 8):
            g = rng.normal(size=5)
            x, st = pm.adam_step(st, x, g)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(x, ref, rtol=1e-13)

    def test_non_finite(self):
        st = pm.AdamState.zeros_like(np.zeros(2))
        with pytest.raises(NonFiniteGradient):
            pm.adam_step(st, np.zeros(2), np.array([np.nan, 0.0]))


class TestGlobal:
    def test_identity_stays_put(self, identity_scene):
        res = pm.optimize_global(identity_scene, pm.desk_config(**SMALL))
        assert res.series[-1]["mask_l1"] < 1e-3
        for f in res.flows:
            assert np.abs(f).mean() < 0.1

    def test_vertical_half_matches_extents(self):
        s = synth.build_scene("scale", 32, 24, sy=0.5, sx=1.0)
        res = pm.optimize_global(s, pm.desk_config(**SMALL))
        got = fl.mask_extents(fl.warp_mask(s.source_mask, res.flow))
        want = fl.mask_extents(s.target_mask)
        assert abs(got.h - want.h) <= 1 and abs(got.w - want.w) <= 1

    def test_series_length(self, identity_scene):
        cfg = pm.desk_config(height=32, width=24, scales=3, iters=7)
        res = pm.optimize_global(identity_scene, cfg)
        assert len(res.series) == 21 and len(res.flows) == 3

    def test_empty_mask(self, identity_scene):
        s = synth.Scene(identity_scene.source, np.zeros((32, 24)), identity_scene.target,
                        identity_scene.target_mask, identity_scene.visibility,
                        identity_scene.hair_bottom)
        with pytest.raises(EmptyMask):
            pm.optimize_global(s, pm.desk_config(**SMALL))


class TestLocal:
    def test_identity_scene_nipr(self, identity_scene):
        rep = pm.run_experiment(identity_scene, pm.desk_config(**SMALL))
        assert rep.metrics["garment_l1"] < 1e-3
        assert rep.metrics["integrity_violation"] < 1e-3

    def test_total_is_weighted_sum(self, identity_scene):
        cfg = pm.desk_config(height=32, width=24, scales=2, iters=5, visibility_mode="fit")
        s = synth.build_scene("tuckin", 32, 24)
        rep = pm.run_experiment(s, cfg)
        a = cfg.alphas
        for row in rep.local_result.series:
            total = (a[0] * row["garment_l1"] + a[2] * row["mask_l1"] + a[3] * row["bce"]
                     + a[4] * row["consistency"] + a[5] * row["regularizer"])
            assert abs(total - row["total"]) <= 1e-10

    def test_occluder_masks_output_and_gradient(self):
        s = synth.build_scene("hand")
        cfg = pm.desk_config(scales=1, iters=30, alphas=(1, 0.2, 2, 2, 0, 0), global_stage=False)
        level = pm.pyramid_levels(s, cfg)[0]
        inside = s.visibility > 0.5
        f = fl.zero_flow(*s.shape)
        st = pm.AdamState.zeros_like(f, lr=cfg.lr)
        for _ in range(cfg.iters):
            ev = pm.local_objective(f, level, cfg)
            assert np.all(ev.output[:, inside] == 0.0)
            assert np.all(ev.grad_flow[:, inside] == 0.0)
            f, st = pm.adam_step(st, f, ev.grad_flow)

    def test_consistency_coupling_tuckin(self):
        s = synth.build_scene("tuckin", 32, 24)
        out = {}
        for a5 in (0.0, 1.0):
            cfg = pm.desk_config(**SMALL, alphas=(1, 0.2, 2, 2, a5, 1))
            out[a5] = pm.run_experiment(s, cfg).metrics["local_global_mask_l1"]
        assert out[1.0] < out[0.0]

    def test_consistency_needs_global(self, identity_scene):
        cfg = pm.desk_config(**SMALL, global_stage=False)
        with pytest.raises(MissingGlobal):
            pm.optimize_local(identity_scene, None, cfg)

    def test_fit_mode_learns_visibility(self):
        s = synth.build_scene("hand")
        rep = pm.run_experiment(s, pm.desk_config(scales=3, iters=200, visibility_mode="fit",
                                                  lr=0.05))
        inside = s.visibility > 0.5
        assert rep.visibility[inside].mean() > 0.5 > rep.visibility[~inside].mean()


class TestExperiment:
    def test_bit_identical_reruns(self):
        s = synth.build_scene("tuckin", 32, 24)
        cfg = pm.desk_config(height=32, width=24, scales=3, iters=40)
        a = pm.run_experiment(s, cfg)
        b = pm.run_experiment(s, cfg)
        assert a.metrics == b.metrics
        assert a.local_result.flow.tobytes() == b.local_result.flow.tobytes()
        assert a.series() == b.series()

    def test_scene_size_must_match(self, identity_scene):
        with pytest.raises(ConfigError):
            pm.run_experiment(identity_scene, pm.PyramidConfig())

    def test_ablation_toggles(self):
        base = pm.PyramidConfig()
        loc = pm.ablation_config(base, "loc")
        assert not loc.global_stage and not loc.occlusion and loc.alphas[4] == 0
        full = pm.ablation_config(base, "full")
        assert full.loss_variant == "nipr" and full.occlusion and full.global_stage
        with pytest.raises(ConfigError):
            pm.ablation_config(base, "everything")
