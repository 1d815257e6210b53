import math

import numpy as np
import pytest

from pathogenx import train as T
from pathogenx.data import SynthConfig, generate_synthetic, outcomes
from pathogenx.losses import cox_loss
from pathogenx.model import forward_train_batch
from pathogenx.nn import mlp_forward
from pathogenx.tensor import Tensor


def fresh(**overrides):
    base = dict(dim=8, heads=2, hidden=4, batch_size=16, epochs=2, seed=3)
    return T.TrainConfig(**{**base, **overrides})


def losses_bytes(rows):
    return np.array([[r[c] for c in T.LOG_COLUMNS] for r in rows]).tobytes()


@pytest.fixture(scope="module")
def null_cohort():
    return generate_synthetic(SynthConfig(n_patients=200, genomic_dim=16, feature_dim=8, hazard_coef=0.0, seed=11))


class TestAdam:
    def param(self, values):
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        return t

    def test_zero_grad_zero_decay_is_noop(self):
        p = self.param([1.0, -2.0])
        state = T.AdamState()
        for _ in range(5):
            T.adam_step([("w", p)], state, T.TrainConfig(weight_decay=0.0))
        assert p.data.tolist() == [1.0, -2.0]
        assert state.step == 5

    def test_decay_only_geometric(self):
        p = self.param([3.0, -1.5])
        cfg = T.TrainConfig(learning_rate=0.01, weight_decay=0.1)
        state = T.AdamState()
        for _ in range(50):
            T.adam_step([("w", p)], state, cfg)
        np.testing.assert_allclose(p.data, np.array([3.0, -1.5]) * (1 - 0.01 * 0.1) ** 50, rtol=1e-13)

    def test_constant_gradient_unit_step(self):
        p = self.param([0.0, 0.0])
        cfg = T.TrainConfig(learning_rate=1e-3, weight_decay=0.0)
        state = T.AdamState()
        for _ in range(1000):
            before = p.data.copy()
            p.grad = np.array([0.37, -12.0])
            T.adam_step([("w", p)], state, cfg)
        step = before - p.data
        np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-3)
        assert np.sign(step).tolist() == [1.0, -1.0]

    def test_first_step_is_lr_times_sign(self):
        p = self.param([1.0])
        p.grad = np.array([5.0])
        T.adam_step([("w", p)], T.AdamState(), T.TrainConfig(learning_rate=0.1, weight_decay=0.0))
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_coupled_decay_enters_gradient(self):
        p = self.param([2.0])
        T.adam_step([("w", p)], T.AdamState(), T.TrainConfig(learning_rate=0.1, weight_decay=0.1, decay_mode="coupled"))
        # Gradient 0.1 * 2 normalises to a full unit step; no separate shrink.
        assert p.data[0] == pytest.approx(1.9, abs=1e-7)

    def test_shape_mismatch(self):
        p = self.param([1.0, 2.0])
        p.grad = np.zeros(3)
        with pytest.raises(ValueError, match="shape"):
            T.adam_step([("w", p)], T.AdamState(), T.TrainConfig())


class TestConfig:
    @pytest.mark.parametrize(
        "override",
        [
            {"learning_rate": 0.0},
            {"batch_size": 0},
            {"epochs": -1},
            {"weight_decay": -0.1},
            {"decay_mode": "l1"},
            {"cox_reduction": "max"},
            {"alpha": -1.0},
            {"genomic_cox": -1.0},
        ],
    )
    def test_invalid(self, override):
        with pytest.raises(ValueError):
            T.TrainConfig(**override)

    def test_defaults(self):
        cfg = T.TrainConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.epochs, cfg.batch_size) == (1e-3, 0.1, 12, 128)
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.decay_mode) == (0.9, 0.999, 1e-8, "decoupled")


class TestTraining:
    def test_deterministic(self, small_cohort):
        a = T.Trainer.create("pathogenx", small_cohort, fresh()).fit(small_cohort)
        b = T.Trainer.create("pathogenx", small_cohort, fresh()).fit(small_cohort)
        assert losses_bytes(a) == losses_bytes(b)

    def test_log_shape(self, small_cohort):
        rows = T.Trainer.create("pathogenx", small_cohort, fresh(epochs=3)).fit(small_cohort)
        assert len(rows) == 3 * math.ceil(40 / 16)
        assert [r["epoch"] for r in rows[:4]] == [0, 0, 0, 1]

    def test_batch_clipped_to_dataset(self, small_cohort):
        rows = T.Trainer.create("meanmil", small_cohort, fresh(batch_size=128, epochs=1)).fit(small_cohort)
        assert len(rows) == 1

    def test_alpha_zero_matches_survival_only(self, small_cohort):
        a = T.Trainer.create("pathogenx", small_cohort, fresh(alpha=0.0, lambda1=0.0, lambda2=0.0))
        b = T.Trainer.create("pathogenx", small_cohort, fresh(use_latent=False, use_translation=False))
        la, lb = a.fit(small_cohort), b.fit(small_cohort)
        assert [r["cox"] for r in la] == [r["cox"] for r in lb]
        for (name, pa), (_, pb) in zip(a.method.named_parameters(), b.method.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes(), name

    def test_alignment_off_still_trains_decoder(self, small_cohort):
        tr = T.Trainer.create("pathogenx", small_cohort, fresh(alpha=0.0, epochs=1))
        before = tr.method.params.decoder_out.weight.data.copy()
        tr.fit(small_cohort)
        assert not np.array_equal(before, tr.method.params.decoder_out.weight.data)

    def test_requires_genomic(self, small_cohort):
        stripped = [r.without_genomic() for r in small_cohort]
        with pytest.raises(T.MissingGenomicError, match="requires paired modalities"):
            T.Trainer.create("pathogenx", stripped, fresh())
        tr = T.Trainer.create("pathogenx", small_cohort, fresh())
        with pytest.raises(T.MissingGenomicError):
            tr.train_epoch(stripped)

    def test_meanmil_trains_without_genomic(self, small_cohort):
        stripped = [r.without_genomic() for r in small_cohort]
        rows = T.Trainer.create("meanmil", stripped, fresh(epochs=1)).fit(stripped)
        assert all(r["latent"] == 0 and r["translation"] == 0 for r in rows)

    def test_finite_with_default_decay(self, small_cohort):
        tr = T.Trainer.create("pathogenx", small_cohort, fresh(epochs=12))
        rows = tr.fit(small_cohort)
        assert all(math.isfinite(r["total"]) for r in rows)
        assert all(np.isfinite(p.data).all() for _, p in tr.method.named_parameters())

    def test_loss_decreases_on_default_data(self):
        decreased = 0
        for seed in range(5):
            recs = generate_synthetic(SynthConfig(n_patients=128, seed=seed))
            rows = T.Trainer.create("pathogenx", recs, T.TrainConfig(dim=16, heads=2, hidden=8, seed=seed)).fit(recs)
            decreased += rows[-1]["total"] < rows[0]["total"]
        assert decreased >= 4

    def test_genomic_cox_term(self, small_cohort):
        batch = small_cohort[:16]
        with_term = T.Trainer.create("pathogenx", small_cohort, fresh()).method
        without = T.Trainer.create("pathogenx", small_cohort, fresh(genomic_cox=0.0)).method
        art = forward_train_batch(with_term.params, [r.bag for r in batch], [r.genomic for r in batch])
        genomic_risk = mlp_forward(with_term.params.risk_head, art.G_l).reshape(16)
        extra = cox_loss(genomic_risk, *outcomes(batch)).item()
        a, b = with_term.batch_losses(batch).values(), without.batch_losses(batch).values()
        assert a["cox"] == pytest.approx(b["cox"] + extra, abs=1e-10)
        assert a["latent"] == b["latent"]

    def test_detached_target_changes_only_gradients(self, small_cohort):
        a = T.Trainer.create("pathogenx", small_cohort, fresh(genomic_cox=0.0, detach_target=False))
        b = T.Trainer.create("pathogenx", small_cohort, fresh(genomic_cox=0.0))
        batch = small_cohort[:16]
        la, lb = a.method.batch_losses(batch), b.method.batch_losses(batch)
        assert la.values() == lb.values()
        la.total.backward()
        lb.total.backward()
        # Without the genomic Cox term the projection only feeds the detached targets.
        assert np.abs(a.method.params.genomic_projection.weight.grad).sum() > 0
        assert b.method.params.genomic_projection.weight.grad is None

    def test_default_objective_trains_projection(self, small_cohort):
        tr = T.Trainer.create("pathogenx", small_cohort, fresh())
        tr.method.batch_losses(small_cohort[:16]).total.backward()
        assert np.abs(tr.method.params.genomic_projection.weight.grad).sum() > 0


class TestEvaluate:
    def test_genomic_independent(self, small_cohort):
        tr = T.Trainer.create("pathogenx", small_cohort, fresh())
        tr.fit(small_cohort)
        a, ra = T.evaluate(tr.method, small_cohort)
        b, rb = T.evaluate(tr.method, [r.without_genomic() for r in small_cohort])
        assert a == b and ra.tobytes() == rb.tobytes()

    def test_duplicate_rows_keep_c_index(self, small_cohort):
        tr = T.Trainer.create("meanmil", small_cohort, fresh())
        tr.fit(small_cohort)
        once, _ = T.evaluate(tr.method, small_cohort)
        twice, _ = T.evaluate(tr.method, list(small_cohort) * 2)
        assert once == twice

    def test_empty(self, small_cohort):
        tr = T.Trainer.create("meanmil", small_cohort, fresh())
        with pytest.raises(ValueError):
            T.evaluate(tr.method, [])

    def test_untrained_on_null_data(self, null_cohort):
        for seed in range(5):
            tr = T.Trainer.create("pathogenx", null_cohort, fresh(seed=seed, epochs=0))
            score, _ = T.evaluate(tr.method, null_cohort)
            assert 0.4 <= score <= 0.6

    def test_trained_genomic_cox_on_null_data(self, null_cohort):
        scores = [T.baseline_genomic_cox(null_cohort, fresh(seed=s, dim=16, epochs=12, batch_size=128)).mean for s in range(5)]
        assert 0.45 <= np.mean(scores) <= 0.55


class TestBaselines:
    def test_meanmil_patch_permutation_invariant(self, small_cohort, rng):
        tr = T.Trainer.create("meanmil", small_cohort, fresh())
        tr.fit(small_cohort)
        shuffled = [type(r)(r.id, r.time, r.event, r.bag[rng.permutation(len(r.bag))], r.genomic) for r in small_cohort]
        np.testing.assert_allclose(tr.predict(shuffled), tr.predict(small_cohort), atol=1e-10, rtol=0)

    def test_genomic_cox_needs_genomics(self, small_cohort):
        stripped = [r.without_genomic() for r in small_cohort]
        with pytest.raises(T.MissingGenomicError):
            T.baseline_genomic_cox(stripped, fresh())
        tr = T.Trainer.create("genomic-cox", small_cohort, fresh())
        with pytest.raises(T.MissingGenomicError):
            tr.predict(stripped)

    @pytest.mark.parametrize("method", T.METHODS)
    def test_deterministic_per_seed(self, small_cohort, method):
        a = T.cross_validate(small_cohort, fresh(epochs=1), method)
        b = T.cross_validate(small_cohort, fresh(epochs=1), method)
        assert a.fold_scores == b.fold_scores

    def test_unknown_method(self, small_cohort):
        with pytest.raises(ValueError, match="unknown method"):
            T.Trainer.create("maxmil", small_cohort, fresh())


class TestCrossValidation:
    def test_on_fold_sees_held_out_records(self, small_cohort):
        seen = []
        res = T.cross_validate(small_cohort, fresh(epochs=1), "pathogenx", on_fold=lambda *a: seen.append(a))
        assert [s[0] for s in seen] == [0, 1, 2, 3]
        assert sorted(r.id for s in seen for r in s[2]) == sorted(r.id for r in small_cohort)
        for (_, trainer, val, risks), score in zip(seen, res.fold_scores):
            assert val[0].genomic is not None
            assert T.evaluate(trainer.method, val)[0] == score
            np.testing.assert_array_equal(trainer.predict(val), risks)

    def test_shape(self, small_cohort):
        res = T.cross_validate(small_cohort, fresh(epochs=1), "meanmil", k=4)
        assert len(res.fold_scores) == 4 and len(res.logs) == 4
        labels = [label for label, _ in res.rows()]
        assert labels == ["fold0", "fold1", "fold2", "fold3", "mean", "std"]
        assert res.std == pytest.approx(np.std(res.fold_scores))

    def test_too_few(self, small_cohort):
        with pytest.raises(ValueError):
            T.cross_validate(small_cohort[:3], fresh(), "meanmil", k=4)

    def test_ablation_toggles_exact(self, small_cohort, tmp_path):
        res = T.ablation_alignment(small_cohort, fresh(epochs=1))
        assert list(res) == ["L_l", "L_t", "L_l+L_t"]
        rows = lambda label: [r for log in res[label].logs for r in log]
        assert all(r["translation"] == 0.0 for r in rows("L_l"))
        assert all(r["latent"] == 0.0 for r in rows("L_t"))
        assert all(r["latent"] > 0 and r["translation"] > 0 for r in rows("L_l+L_t"))
        path = tmp_path / "ablation.csv"
        T.write_ablation_csv(path, res)
        assert len(path.read_text().splitlines()) == 4


class TestCheckpoint:
    def test_save_load_save_identical(self, small_cohort, tmp_path):
        tr = T.Trainer.create("pathogenx", small_cohort, fresh())
        tr.fit(small_cohort)
        T.save_checkpoint(tmp_path / "a.pgxc", tr)
        T.save_checkpoint(tmp_path / "b.pgxc", T.load_checkpoint(tmp_path / "a.pgxc"))
        assert (tmp_path / "a.pgxc").read_bytes() == (tmp_path / "b.pgxc").read_bytes()

    @pytest.mark.parametrize("method", T.METHODS)
    def test_resume_matches_straight_run(self, small_cohort, tmp_path, method):
        cfg = fresh(epochs=12)
        straight = T.Trainer.create(method, small_cohort, cfg)
        full = straight.fit(small_cohort)
        first = T.Trainer.create(method, small_cohort, cfg)
        head = first.fit(small_cohort, epochs=6)
        T.save_checkpoint(tmp_path / "half.pgxc", first)
        resumed = T.load_checkpoint(tmp_path / "half.pgxc", small_cohort)
        tail = resumed.fit(small_cohort)
        assert losses_bytes(head + tail) == losses_bytes(full)
        assert T.checkpoint_bytes(resumed) == T.checkpoint_bytes(straight)

    def test_architecture_mismatch(self, small_cohort, tmp_path):
        T.save_checkpoint(tmp_path / "a.pgxc", T.Trainer.create("pathogenx", small_cohort, fresh()))
        with pytest.raises(T.CheckpointError, match=r"input_embed\.weight has shape"):
            T.load_checkpoint(tmp_path / "a.pgxc", small_cohort, fresh(dim=16, heads=2))

    def test_bad_magic_and_version(self, small_cohort, tmp_path):
        blob = T.checkpoint_bytes(T.Trainer.create("meanmil", small_cohort, fresh()))
        (tmp_path / "m").write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(T.CheckpointError, match="bad magic"):
            T.read_checkpoint(tmp_path / "m")
        (tmp_path / "v").write_bytes(blob[:4] + b"\x09\x00" + blob[6:])
        with pytest.raises(T.CheckpointError, match="version"):
            T.read_checkpoint(tmp_path / "v")
        (tmp_path / "t").write_bytes(blob[:-3])
        with pytest.raises(T.CheckpointError, match="truncated"):
            T.read_checkpoint(tmp_path / "t")

    def test_layout(self, small_cohort):
        blob = T.checkpoint_bytes(T.Trainer.create("pathogenx", small_cohort, fresh()))
        assert blob[:6] == b"PGXC\x01\x00"
        name_len = int.from_bytes(blob[10:12], "little")
        assert blob[12 : 12 + name_len].decode() == "input_embed.weight"

    def test_baseline_needs_records(self, small_cohort, tmp_path):
        T.save_checkpoint(tmp_path / "b.pgxc", T.Trainer.create("meanmil", small_cohort, fresh()))
        with pytest.raises(T.CheckpointError, match="needs records"):
            T.load_checkpoint(tmp_path / "b.pgxc")
        assert T.load_checkpoint(tmp_path / "b.pgxc", small_cohort).method.name == "meanmil"


class TestLogAndCorrelation:
    def test_write_log(self, tmp_path, small_cohort):
        rows = T.Trainer.create("pathogenx", small_cohort, fresh(epochs=1)).fit(small_cohort)
        T.write_log(tmp_path / "log.csv", rows, header=["seed = 3"])
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[:2] == ["# seed = 3", "epoch,batch,cox,latent,translation,total"]
        assert len(lines) == 2 + len(rows)
        assert float(lines[2].split(",")[-1]) == rows[0]["total"]

    def test_translation_correlation(self, small_cohort):
        tr = T.Trainer.create("pathogenx", small_cohort, fresh())
        res = T.translation_correlation(tr.method.params, small_cohort)
        assert 0 <= res.before <= 1 and 0 <= res.after <= 1
        with pytest.raises(T.MissingGenomicError):
            T.translation_correlation(tr.method.params, [r.without_genomic() for r in small_cohort])
