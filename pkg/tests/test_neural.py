"""Models, losses, checkpoints and training loops at toy scale."""

import numpy as np
import pytest

from rppglab import optics
from rppglab.autodiff import AdamState, DiffTensor, Tape
from rppglab.neural import checkpoint as ck
from rppglab.neural import training
from rppglab.neural.layers import BatchNorm, Conv3d, Linear
from rppglab.neural.losses import (frozen, generator_terms, loss_appearance, loss_estimator,
                                   loss_generator, loss_ppg)
from rppglab.neural.models import GeneratorModel, PrnModel
from rppglab.neural.training import (ClipSet, TrainConfig, TrainingAborted, build_clips,
                                     epoch_batches, pretrain_generator, train_joint, train_prn)

from gradcheck import numeric_grad_at, rel_error, sampled_indices


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def tiny_models():
    return GeneratorModel(base=2, n_blocks=1, seed=3), PrnModel(channels=(2, 3, 4), seed=4)


@pytest.fixture
def tiny_batch(rng):
    x = rng.uniform(0.2, 0.8, size=(2, 8, 4, 4, 3))
    dark = np.clip(x * 0.5 + rng.normal(0, 0.15, size=x.shape), 0, 1)
    p = rng.normal(size=(2, 8))
    return x, dark, p


def toy_clips(n_subjects=4, seconds=6.0, size=8, seed=0):
    scales = ["I", "II", "III", "II", "I", "III"][:n_subjects]
    subs = [optics.simulate_subject(f"t{k}", sc, hr, seconds, 30.0, size)
            for k, (sc, hr) in enumerate(optics.build_cohort(scales, seed))]
    return build_clips(subs, clip_len=16, target_scale="VI", seed=seed)


def toy_cfg(**kw):
    base = dict(batch=2, clip_len=16, size=8, epochs=1, pretrain_epochs=1, gen_pretrain_epochs=1,
                prn_channels=(2, 3, 4), gen_base=2, gen_blocks=1, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestLossPpg:
    def test_identities(self, rng):
        p = rng.normal(size=(3, 20))
        assert abs(loss_ppg(p, p).item()) < 1e-12
        assert abs(loss_ppg(p, -p).item() - 2.0) < 1e-12
        assert abs(loss_ppg(p, 3.5 * p - 2.0).item()) < 1e-9

    def test_fixture(self):
        assert loss_ppg([1.0, 2, 3, 4], [1.0, 3, 2, 4]).item() == pytest.approx(0.2, abs=1e-12)

    def test_constant_estimate_is_finite(self):
        assert loss_ppg([1.0, 2, 3, 4], [5.0, 5, 5, 5]).item() == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            loss_ppg(np.zeros((2, 4)), np.zeros((2, 5)))

    def test_gradient(self, rng):
        p, q = rng.normal(size=(2, 12)), rng.normal(size=(2, 12))
        t = DiffTensor(q, requires_grad=True)
        with Tape() as tape:
            tape.backward(loss_ppg(p, t))
        idx = sampled_indices(q.shape, 24)
        fd = numeric_grad_at(lambda v: loss_ppg(p, v).item(), q, idx)
        assert rel_error([t.grad[i] for i in idx], fd) < 1e-4


class TestLossAppearance:
    def test_single_masked_element(self):
        assert loss_appearance([0.0, 0.0], [0.05, 0.3], 0.1).item() == pytest.approx(0.3, abs=1e-12)

    def test_all_masked(self):
        assert loss_appearance([0.0, 0.0], [0.2, -0.2], 0.1).item() == pytest.approx(0.2, abs=1e-12)

    def test_empty_mask_is_zero(self):
        out = loss_appearance([0.5, 0.5], [0.55, 0.45], 0.1)
        assert out.item() == 0.0

    def test_mask_is_constant_in_backward(self):
        t = DiffTensor(np.array([0.05, 0.3, -0.4]), requires_grad=True)
        with Tape() as tape:
            tape.backward(loss_appearance(np.zeros(3), t, 0.1))
        np.testing.assert_allclose(t.grad, [0.0, 0.5, -0.5])


class TestPhaseLosses:
    def test_generator_loss_gradient(self, tiny_models, tiny_batch):
        """End-to-end FD check of the generation-phase loss w.r.t. G's parameters."""
        G, E = tiny_models
        x, dark, p = tiny_batch
        E.train()
        E(x)  # give the frozen estimator non-trivial running statistics
        with Tape() as tape:
            tape.backward(loss_generator(x, dark, p, G, E))
        for name, param in list(G.named_parameters())[::3]:
            idx = sampled_indices(param.shape, 4, seed=len(name))

            def f(v, param=param):
                saved = param.value
                param.value = v
                try:
                    return loss_generator(x, dark, p, G, E).item()
                finally:
                    param.value = saved

            fd = numeric_grad_at(f, param.value, idx, h=1e-5)
            assert rel_error([param.grad[i] for i in idx], fd, floor=1e-5) < 1e-3, name

    def test_estimator_loss_gradient(self, tiny_models, tiny_batch):
        G, E = tiny_models
        x, _, p = tiny_batch
        i_hat = G(x).detach()
        with Tape() as tape:
            tape.backward(loss_estimator(x, i_hat, p, E))
        for name, param in list(E.named_parameters())[::2]:
            idx = sampled_indices(param.shape, 4, seed=len(name))

            def f(v, param=param):
                saved = param.value
                param.value = v
                try:
                    return loss_estimator(x, i_hat, p, E).item()
                finally:
                    param.value = saved

            fd = numeric_grad_at(f, param.value, idx, h=1e-5)
            assert rel_error([param.grad[i] for i in idx], fd, floor=1e-5) < 1e-3, name

    def test_estimator_loss_decomposes(self, tiny_models, tiny_batch):
        G, E = tiny_models
        x, _, p = tiny_batch
        E.eval()
        i_hat = G(x)
        total = loss_estimator(x, i_hat, p, E).item()
        parts = loss_ppg(p, E(i_hat.value)).item() + loss_ppg(p, E(x)).item()
        assert abs(total - parts) < 1e-12

    def test_generation_leaves_estimator_untouched(self, tiny_models, tiny_batch):
        G, E = tiny_models
        x, dark, p = tiny_batch
        before = E.state_dict()
        with Tape() as tape:
            total, *_ = generator_terms(x, dark, p, G, E)
            tape.backward(total)
        after = E.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert all(prm.grad is None or not np.any(prm.grad) for prm in E.parameters())
        assert E.training and all(prm.requires_grad for prm in E.parameters())

    def test_estimation_leaves_generator_untouched(self, tiny_models, tiny_batch):
        G, E = tiny_models
        x, _, p = tiny_batch
        with Tape() as tape:
            i_hat = G(x)
            tape.backward(loss_estimator(x, i_hat, p, E))
        assert all(prm.grad is None or not np.any(prm.grad) for prm in G.parameters())

    def test_frozen_restores(self, tiny_models):
        _, E = tiny_models
        with frozen(E):
            assert not E.training
            assert not any(p.requires_grad for p in E.parameters())
        assert E.training and all(p.requires_grad for p in E.parameters())


class TestModels:
    def test_prn_output_length(self, rng):
        E = PrnModel(channels=(2, 3, 4))
        for t in (8, 13):
            assert E(rng.uniform(size=(1, t, 8, 8, 3))).shape == (1, t)

    def test_prn_rejects_bad_rank(self):
        with pytest.raises(ValueError):
            PrnModel()(np.zeros((8, 4, 4, 3)))

    def test_prn_predict_covers_video(self, rng):
        E = PrnModel(channels=(2, 3, 4))
        y = E.predict(rng.uniform(size=(40, 4, 4, 3)), clip_len=16)
        assert y.shape == (40,) and np.all(np.isfinite(y))

    def test_prn_sees_static_colour(self, rng):
        """No input normalisation: skin appearance reaches the estimator."""
        E = PrnModel(channels=(2, 3, 4)).eval()
        x = rng.uniform(0.3, 0.5, size=(1, 8, 4, 4, 3))
        assert not np.allclose(E(x).value, E(x * 0.5).value)

    def test_generator_starts_as_identity(self, rng):
        G = GeneratorModel(base=2, n_blocks=1)
        x = rng.uniform(0.05, 0.95, size=(1, 4, 8, 8, 3))
        np.testing.assert_allclose(G(x).value, x, atol=1e-12)

    def test_generator_size_check(self):
        with pytest.raises(ValueError, match="divisible"):
            GeneratorModel(base=2, n_blocks=1)(np.full((1, 4, 6, 6, 3), 0.5))

    def test_translate_keeps_shape(self, rng):
        G = GeneratorModel(base=2, n_blocks=1)
        assert G.translate(rng.uniform(size=(20, 4, 4, 3)), clip_len=8).shape == (20, 4, 4, 3)

    def test_seeded_init(self):
        a, b = PrnModel(seed=1).state_dict(), PrnModel(seed=1).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = PrnModel(seed=2).state_dict()
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_parameter_names_stable(self):
        names = [n for n, _ in PrnModel().named_parameters()]
        assert names[0] == "blocks.0.conv1.weight" and names[-1] == "head.bias"

    def test_layers(self, rng):
        conv = Conv3d(3, 2, seed=0)
        assert conv(rng.uniform(size=(1, 4, 4, 4, 3))).shape == (1, 4, 4, 4, 2)
        assert Linear(4, 1)(rng.normal(size=(2, 5, 4))).shape == (2, 5, 1)
        bn = BatchNorm(2)
        bn(rng.normal(size=(2, 3, 2, 2, 2)))
        assert not np.array_equal(bn.running_mean, 0)

    def test_load_state_dict_errors(self):
        E = PrnModel()
        state = E.state_dict()
        state.pop("head.bias")
        with pytest.raises(KeyError):
            E.load_state_dict(state)
        state = PrnModel(channels=(8, 16, 64)).state_dict()
        with pytest.raises(ValueError):
            E.load_state_dict(state)


class TestCheckpoint:
    def test_roundtrip_with_optimizer(self, tmp_path, rng):
        E = PrnModel(channels=(2, 3, 4), seed=1)
        E(rng.uniform(size=(2, 8, 4, 4, 3)))  # move BN buffers
        params = E.parameters()
        state = AdamState([rng.normal(size=p.shape) for p in params],
                          [rng.uniform(size=p.shape) for p in params], 17)
        ck.save_checkpoint(tmp_path / "e.pfck", E, {"opt_step": 17, "note": "x"}, state)
        F = PrnModel(channels=(2, 3, 4), seed=9)
        meta, back = ck.load_checkpoint(tmp_path / "e.pfck", F)
        a, b = E.state_dict(), F.state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert meta["note"] == "x" and back.step == 17
        assert all(np.array_equal(x, y) for x, y in zip(state.m, back.m))

    def test_encoding_is_deterministic(self):
        E = PrnModel(seed=3)
        assert ck.encode_checkpoint(E, {"a": 1}) == ck.encode_checkpoint(E, {"a": 1})

    def test_magic_and_truncation(self, tmp_path):
        data = ck.encode_checkpoint(PrnModel(channels=(2, 2, 2)), {})
        assert data[:4] == b"PFCK"
        with pytest.raises(ck.CheckpointError, match="truncated"):
            ck.decode_checkpoint(data[:-3])
        with pytest.raises(ck.CheckpointError):
            ck.decode_checkpoint(b"NOPE" + data[4:])

    def test_mismatched_model(self, tmp_path):
        ck.save_checkpoint(tmp_path / "e.pfck", PrnModel(channels=(2, 2, 2)), {})
        with pytest.raises(ck.CheckpointError, match="does not match"):
            ck.load_checkpoint(tmp_path / "e.pfck", PrnModel())


class TestClips:
    def test_build_clips(self):
        clips = toy_clips()
        assert clips.light.shape == (4 * 11, 16, 8, 8, 3)
        assert clips.dark.shape == clips.light.shape
        assert optics.luminance(clips.dark[0]) < optics.luminance(clips.light[0])

    def test_batches_have_distinct_subjects(self):
        clips = toy_clips()
        for b in epoch_batches(clips, 2, seed=1, epoch=0):
            assert len({clips.subject[i] for i in b}) == 2

    def test_batches_seeded(self):
        clips = toy_clips()
        a = epoch_batches(clips, 2, seed=1, epoch=3)
        b = epoch_batches(clips, 2, seed=1, epoch=3)
        c = epoch_batches(clips, 2, seed=1, epoch=4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_too_few_subjects(self):
        clips = toy_clips().select(range(3))
        with pytest.raises(ValueError, match="distinct"):
            epoch_batches(clips, 2, seed=0, epoch=0)

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            ClipSet(np.zeros((2, 8, 4, 4, 3)), np.zeros((3, 8)), ["a", "b"])


class TestTraining:
    def test_prn_loss_decreases(self):
        clips = toy_clips()
        res = train_prn(clips, toy_cfg(pretrain_epochs=4, prn_channels=(4, 4, 4)))
        losses = [r.loss for r in res.log]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_generator_appearance_improves(self):
        clips = toy_clips()
        G = GeneratorModel(2, 1, seed=0)
        rows, end = pretrain_generator(clips, toy_cfg(gen_pretrain_epochs=2, lr_g=1e-3), G)
        assert rows[-1].loss < rows[0].loss and end == len(rows)

    def test_joint_log_phases(self):
        res = train_joint(toy_clips(), toy_cfg())
        phases = {r.phase for r in res.log}
        assert phases == {"prn", "gen_l1", "generator", "gen_ppg", "gen_appearance", "estimator"}
        steps = [r.step for r in res.log if r.phase in ("prn", "gen_l1", "estimator")]
        assert steps == sorted(steps)

    def test_joint_requires_targets(self):
        clips = toy_clips()
        clips.dark = None
        with pytest.raises(ValueError, match="pseudo-target"):
            train_joint(clips, toy_cfg())

    def test_resume_matches_unbroken(self, tmp_path, monkeypatch):
        clips = toy_clips()
        full = train_joint(clips, toy_cfg(epochs=2), checkpoint_dir=tmp_path / "a")

        original = training._Stage.save

        def crash_after_first_joint_epoch(stage, epoch):
            original(stage, epoch)
            if stage.name == "joint" and epoch == 1:
                raise KeyboardInterrupt

        monkeypatch.setattr(training._Stage, "save", crash_after_first_joint_epoch)
        with pytest.raises(KeyboardInterrupt):
            train_joint(clips, toy_cfg(epochs=2), checkpoint_dir=tmp_path / "b")
        monkeypatch.setattr(training._Stage, "save", original)

        resumed = train_joint(clips, toy_cfg(epochs=2), checkpoint_dir=tmp_path / "b", resume=True)
        assert resumed.log and all(r.phase not in ("prn", "gen_l1") for r in resumed.log)
        reference = {(r.step, r.phase): r.loss for r in full.log}
        for r in resumed.log:
            assert abs(r.loss - reference[(r.step, r.phase)]) <= 1e-9
        a, b = full.estimator.state_dict(), resumed.estimator.state_dict()
        assert all(np.allclose(a[k], b[k], rtol=0, atol=1e-12) for k in a)

    def test_nan_aborts_with_snapshot(self, tmp_path):
        clips = toy_clips()
        E = PrnModel(channels=(2, 3, 4), seed=0)
        E.head.weight.value[:] = np.nan
        with pytest.raises(TrainingAborted, match="non-finite prn loss") as exc:
            train_prn(clips, toy_cfg(), checkpoint_dir=tmp_path, estimator=E)
        assert exc.value.snapshot is not None and exc.value.snapshot.exists()
