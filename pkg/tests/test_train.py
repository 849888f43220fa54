import numpy as np
import numpy.testing as npt
import pytest

from trajseq import backbone as bb
from trajseq import heads as hd
from trajseq import tensorcore as tc
from trajseq import train as tr
from trajseq.errors import ConfigError, ContractError, NonFiniteGradError
from trajseq.rng import make_rng
from trajseq.tensorcore import Parameter, Tensor


def scaled_kp(shape=(2, 5, 2)):
    return np.random.default_rng(0).normal(size=shape)


class TestComputeLoss:
    def _outputs_targets(self, flags, kp_delta=0.0):
        rng = np.random.default_rng(1)
        states = rng.normal(size=(2, 80, 3))
        kps = rng.normal(size=(2, 5, 2))
        outputs = {"state_pred": Tensor(states), "kp_pred": Tensor(kps + kp_delta)}
        targets = {"states": states, "kp_points": kps}
        return outputs, targets

    def test_exact_outputs_zero_loss(self):
        flags = hd.ModelFlags()
        outputs, targets = self._outputs_targets(flags)
        loss, rep = tr.compute_loss(outputs, targets, flags)
        assert loss.item() == 0.0
        assert rep.kp_mse == 0.0 and rep.state_mse == 0.0
        assert rep.eval_loss == 0.0

    def test_single_keypoint_off_by_3_4(self):
        flags = hd.ModelFlags()
        outputs, targets = self._outputs_targets(flags)
        kp = outputs["kp_pred"].data.copy()
        kp[0, 2] += (3.0, 4.0)
        outputs["kp_pred"] = Tensor(kp)
        # one of ten (point, coord) rows off by (3, 4): mean squared error
        # over 5 x 2 entries per sample, averaged over 2 samples
        _, rep = tr.compute_loss(outputs, targets, flags)
        assert rep.kp_mse == pytest.approx(25.0 / 20.0, abs=1e-12)

    def test_uniform_proposal_ce_is_log_k(self):
        flags = hd.ModelFlags(use_proposal=True, use_keypoints=True, top_k=2)
        outputs, targets = self._outputs_targets(flags)
        k = 13
        outputs["proposal_logits"] = Tensor(np.zeros((2, k)))
        outputs["proposal_offset"] = Tensor(np.zeros((2, 2)))
        targets["proposal_index"] = np.array([4, 9])
        targets["proposal_offset"] = np.zeros((2, 2))
        _, rep = tr.compute_loss(outputs, targets, flags)
        assert rep.proposal_ce == pytest.approx(np.log(k), abs=1e-12)
        assert rep.proposal_offset_mse == 0.0

    def test_eval_loss_is_exactly_kp_plus_state(self):
        flags = hd.ModelFlags()
        outputs, targets = self._outputs_targets(flags, kp_delta=0.7)
        st = outputs["state_pred"].data.copy()
        st += 0.3
        outputs["state_pred"] = Tensor(st)
        _, rep = tr.compute_loss(outputs, targets, flags)
        assert rep.eval_loss == rep.kp_mse + rep.state_mse

    def test_missing_targets_rejected(self):
        flags = hd.ModelFlags(use_proposal=True)
        outputs, targets = self._outputs_targets(flags)
        outputs["proposal_logits"] = Tensor(np.zeros((2, 4)))
        outputs["proposal_offset"] = Tensor(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            tr.compute_loss(outputs, targets, flags)

    def test_cs_mode_kp_component_zero(self):
        flags = hd.ModelFlags(use_keypoints=False)
        rng = np.random.default_rng(2)
        states = rng.normal(size=(2, 80, 3))
        outputs = {"state_pred": Tensor(states + 1.0)}
        _, rep = tr.compute_loss(outputs, {"states": states}, flags)
        assert rep.kp_mse == 0.0
        assert rep.eval_loss == pytest.approx(rep.state_mse)


class TestPerturbHistory:
    def _sample(self):
        from trajseq.scenario import build_sample, generate_scenario
        return build_sample(generate_scenario(1, "straight"))

    def test_zero_sigma_exact_copy(self):
        s = self._sample()
        out = tr.perturb_history(s, 0.0, make_rng(0, "a"))
        npt.assert_array_equal(out.ego_history, s.ego_history)

    def test_current_frame_never_moves(self):
        s = self._sample()
        out = tr.perturb_history(s, 2.0, make_rng(0, "a"))
        npt.assert_array_equal(out.ego_history[-1], s.ego_history[-1])

    def test_oldest_frame_magnitude_exactly_sigma(self):
        s = self._sample()
        sigma = 1.7
        out = tr.perturb_history(s, sigma, make_rng(1, "a"))
        delta = out.ego_history[0, 0:2] - s.ego_history[0, 0:2]
        assert np.hypot(*delta) == pytest.approx(sigma, abs=1e-12)

    def test_linear_decay_profile(self):
        s = self._sample()
        sigma = 2.0
        out = tr.perturb_history(s, sigma, make_rng(2, "a"))
        deltas = np.hypot(*(out.ego_history[:, 0:2] - s.ego_history[:, 0:2]).T)
        ago = 20 - np.arange(21)
        npt.assert_allclose(deltas, sigma * ago / 20.0, atol=1e-12)

    def test_supervised_targets_untouched(self):
        s = self._sample()
        out = tr.perturb_history(s, 3.0, make_rng(3, "a"))
        npt.assert_array_equal(out.ego_future, s.ego_future)
        npt.assert_array_equal(out.key_points, s.key_points)
        npt.assert_array_equal(out.endpoint, s.endpoint)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ContractError):
            tr.perturb_history(self._sample(), -0.1, make_rng(0, "a"))


class TestLrSchedule:
    def test_zero_at_step_zero(self):
        cfg = tr.TrainConfig(max_steps=200)
        assert tr.lr_schedule(0, cfg) == 0.0

    def test_peak_at_warmup_end(self):
        cfg = tr.TrainConfig(max_steps=200, warmup_steps=50)
        assert tr.lr_schedule(50, cfg) == pytest.approx(5e-5)

    def test_zero_at_max_steps(self):
        cfg = tr.TrainConfig(max_steps=200, warmup_steps=50)
        assert tr.lr_schedule(200, cfg) == 0.0

    def test_linear_in_both_phases(self):
        cfg = tr.TrainConfig(max_steps=150, warmup_steps=50, lr=1e-3)
        assert tr.lr_schedule(25, cfg) == pytest.approx(5e-4)
        assert tr.lr_schedule(100, cfg) == pytest.approx(5e-4)


class TestOptimizerStep:
    def _param(self, value, name="w", decay=True):
        return Parameter(Tensor(np.array([value]), requires_grad=True), name, decay)

    def test_zero_grads_zero_decay_no_change(self):
        p = self._param(1.5, decay=False)
        cfg = tr.TrainConfig(lr=0.1, weight_decay=0.0, warmup_steps=0, max_steps=10)
        tr.optimizer_step([p], {"w": np.array([0.0])}, {}, cfg, 5)
        assert p.data[0] == 1.5

    def test_two_steps_match_hand_computed_adamw(self):
        p = self._param(1.0)
        cfg = tr.TrainConfig(lr=0.1, weight_decay=0.0, warmup_steps=0, max_steps=100)
        state = {}
        g = 0.5
        # hand-run the update rule, schedule included
        w, m, v = 1.0, 0.0, 0.0
        for step in (1, 2):
            tr.optimizer_step([p], {"w": np.array([g])}, state, cfg, step)
            lr = 0.1 * (100 - step) / 100
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** step)
            vh = v / (1 - 0.999 ** step)
            w = w - lr * mh / (np.sqrt(vh) + 1e-8)
            assert p.data[0] == pytest.approx(w, abs=1e-12), step

    def test_decay_only_is_decoupled(self):
        p = self._param(2.0)
        cfg = tr.TrainConfig(lr=0.1, weight_decay=0.01, warmup_steps=0, max_steps=100)
        tr.optimizer_step([p], {"w": np.array([0.0])}, {}, cfg, 1)
        lr1 = tr.lr_schedule(1, cfg)
        assert p.data[0] == pytest.approx(2.0 * (1 - lr1 * 0.01), abs=1e-15)

    def test_decay_skips_ineligible(self):
        p = self._param(2.0, decay=False)
        cfg = tr.TrainConfig(lr=0.1, weight_decay=0.01, warmup_steps=0, max_steps=100)
        tr.optimizer_step([p], {"w": np.array([0.0])}, {}, cfg, 1)
        assert p.data[0] == 2.0

    def test_non_finite_grad_names_parameter(self):
        p = self._param(1.0, name="enc.w")
        cfg = tr.TrainConfig(lr=0.1, max_steps=10)
        with pytest.raises(NonFiniteGradError, match="enc.w"):
            tr.optimizer_step([p], {"enc.w": np.array([np.nan])}, {}, cfg, 1)


class TestDataset:
    def test_seed_holdout_split(self):
        ds = tr.build_dataset(24, seed=1)
        eval_seeds = {ds.samples[i].seed for i in ds.eval_idx}
        train_seeds = {ds.samples[i].seed for i in ds.train_idx}
        assert all(s % 10 == 0 for s in eval_seeds)
        assert all(s % 10 != 0 for s in train_seeds)
        assert not (eval_seeds & train_seeds)

    def test_holdout_none_evals_on_train(self):
        ds = tr.build_dataset(8, seed=1)
        ds2 = tr.SampleDataset(samples=ds.samples, holdout="none")
        assert ds2.eval_idx == ds2.train_idx

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            tr.SampleDataset(samples=[])

    def test_collate_shapes(self):
        ds = tr.build_dataset(6, seed=1, vocab_k=3)
        flags = hd.ModelFlags(use_proposal=True, use_keypoints=True, top_k=2)
        batch, targets = tr.collate(ds.samples, [0, 1, 2], flags, resolution=16)
        assert batch["rasters_high"].shape == (3, 33, 16, 16)
        assert batch["kp_points"].shape == (3, 5, 2)
        assert targets["states"].shape == (3, 80, 3)
        assert targets["proposal_index"].shape == (3,)
        tr.attach_proposal_offsets(targets, [ds.samples[i] for i in (0, 1, 2)],
                                   ds.vocab)
        assert targets["proposal_offset"].shape == (3, 2)

    def test_collate_kp_order(self):
        ds = tr.build_dataset(2, seed=1)
        fwd = hd.ModelFlags(kp_order="fwd")
        bkwd = hd.ModelFlags(kp_order="bkwd")
        b_f, _ = tr.collate(ds.samples, [0], fwd, resolution=16)
        b_b, _ = tr.collate(ds.samples, [0], bkwd, resolution=16)
        npt.assert_array_equal(b_f["kp_points"][0], b_b["kp_points"][0][::-1])

    def test_raster_cache_matches_live_render(self):
        ds = tr.build_dataset(3, seed=2)
        cache = tr.RasterCache(ds.samples, 16)
        high, low = cache.fetch([1])
        from trajseq.raster import dual_scope
        h_live, l_live = dual_scope(ds.samples[1], 16)
        npt.assert_allclose(high[0], h_live.channels, atol=1.0 / 255)
        npt.assert_allclose(low[0], l_live.channels, atol=1.0 / 255)


class TestSweepMath:
    def test_loglog_slope_recovers_power_law(self):
        xs = [1e2, 1e3, 1e4]
        ys = [10.0 * x ** -0.5 for x in xs]
        assert tr.fit_loglog_slope(xs, ys) == pytest.approx(-0.5, abs=1e-9)

    def test_single_point_undefined(self):
        assert tr.fit_loglog_slope([100.0], [1.0]) is None
        assert tr.fit_loglog_slope([], []) is None

    def test_failed_cells_skipped(self):
        assert tr.fit_loglog_slope([10, 100, 1000], [1.0, None, 0.5]) is not None
        assert tr.fit_loglog_slope([10, 100], [1.0, None]) is None

    def test_steps_to_threshold(self):
        curve = [(100, 5.0), (200, 2.0), (300, 1.0)]
        assert tr.steps_to_threshold(curve, 2.5) == 200
        assert tr.steps_to_threshold(curve, 0.5) is None


@pytest.mark.slow
class TestTrainingLoops:
    def _dataset(self, n=8):
        return tr.build_dataset(n, seed=1)

    def _config(self, **kw):
        base = dict(lr=1e-3, max_steps=30, eval_interval=10, resolution=16,
                    batch_size=4, patience=100, seed=0)
        base.update(kw)
        return tr.TrainConfig(**base)

    def test_same_seed_identical_curves(self):
        ds = self._dataset()
        cache = tr.RasterCache(ds.samples, 16)
        curves = []
        for _ in range(2):
            model = hd.GenerationModel(bb.get_preset("10k"), hd.ModelFlags(),
                                       seed=3, resolution=16)
            res = tr.train_stage_backbone(ds, model, self._config(), cache=cache)
            curves.append([(r["step"], r["train_loss"], r["eval_loss"])
                           for r in res.curve])
        assert curves[0] == curves[1]

    def test_loss_decreases_on_tiny_set(self):
        ds = self._dataset()
        model = hd.GenerationModel(bb.get_preset("10k"), hd.ModelFlags(),
                                   seed=0, resolution=16)
        res = tr.train_stage_backbone(ds, model, self._config(max_steps=60),)
        evals = [r["eval_loss"] for r in res.curve if r["eval_loss"] is not None]
        assert evals[-1] < evals[0]

    def test_stage2_freeze_contract_and_progress(self):
        ds = tr.SampleDataset(samples=self._dataset(6).samples, holdout="none")
        cache = tr.RasterCache(ds.samples, 16)
        model = hd.GenerationModel(bb.get_preset("10k"), hd.ModelFlags(),
                                   seed=0, resolution=16)
        tr.train_stage_backbone(ds, model, self._config(), cache=cache)
        before = tr.backbone_checksum(model)
        cfg2 = self._config(max_steps=60, eval_interval=20)
        cfg2 = tr.TrainConfig(**{**cfg2.__dict__, "stage": "diffusion"})
        res2 = tr.train_stage_diffusion(ds, model, cfg2, cache=cache)
        assert tr.backbone_checksum(model) == before
        assert model.flags.kp_decoder == "diffusion"
        assert model.eps_model is not None
        diffs = [r["diffusion_mse"] for r in res2.curve if "diffusion_mse" in r]
        assert diffs[-1] < 1.5  # moved off the ~unit-noise starting point

    def test_stage2_requires_keypoints(self):
        ds = tr.SampleDataset(samples=self._dataset(4).samples, holdout="none")
        model = hd.GenerationModel(bb.get_preset("10k"),
                                   hd.ModelFlags(use_keypoints=False),
                                   seed=0, resolution=16)
        cfg2 = tr.TrainConfig(**{**self._config().__dict__, "stage": "diffusion"})
        with pytest.raises(ConfigError):
            tr.train_stage_diffusion(ds, model, cfg2)

    def test_wrong_stage_config_rejected(self):
        ds = self._dataset(4)
        model = hd.GenerationModel(bb.get_preset("10k"), hd.ModelFlags(),
                                   seed=0, resolution=16)
        cfg = tr.TrainConfig(**{**self._config().__dict__, "stage": "diffusion"})
        with pytest.raises(ConfigError):
            tr.train_stage_backbone(ds, model, cfg)

    def test_augmentation_keeps_determinism_and_targets(self):
        ds = self._dataset(6)
        cfg = self._config(max_steps=6, eval_interval=6)
        cfg = tr.TrainConfig(**{**cfg.__dict__, "augment_sigma_frac": 0.1})
        losses = []
        for _ in range(2):
            model = hd.GenerationModel(bb.get_preset("10k"), hd.ModelFlags(),
                                       seed=2, resolution=16)
            res = tr.train_stage_backbone(ds, model, cfg)
            losses.append([r["train_loss"] for r in res.curve])
        assert losses[0] == losses[1]
