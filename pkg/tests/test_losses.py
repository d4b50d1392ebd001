"""Loss oracles and the gradient-reversal wiring contracts."""

import numpy as np
import pytest

from burst2vec.autodiff import Tensor, reverse_gradient
from burst2vec.losses import (BatchTargets, LossWeights, adversarial_loss,
                              batch_losses, ccc, ccc_loss, ce_loss,
                              combined_output_loss, discriminator_loss,
                              mae_loss, task_loss, total_loss)
from burst2vec.model import Model, ModelConfig, TaskId, TASKS


def small_model(seed=0):
    cfg = ModelConfig(encoder_mode="feature", encoder_dim=6, proj_dim=5,
                      hidden_dim=7, dtype="float64")
    return Model(cfg, seed=seed)


def small_batch(rng, b=4):
    frames = [rng.normal(size=(int(rng.integers(3, 7)), 6)) for _ in range(b)]
    targets = BatchTargets(
        emotions=rng.uniform(size=(b, 10)),
        age_norm=rng.uniform(size=b),
        country=rng.integers(0, 4, size=b),
    )
    return frames, targets


def grads_of(model, loss: Tensor) -> dict:
    loss.backward()
    out = {k: (None if p.grad is None else p.grad.copy())
           for k, p in model.params.items()}
    for p in model.params.values():
        p.grad = None
    return out


class TestCCC:
    def test_perfect_agreement(self):
        x = np.array([[1.0], [2.0], [3.0]])
        per, mean = ccc(x, x.copy())
        np.testing.assert_allclose(per.data, [1.0], atol=1e-12)
        assert ccc_loss(x, x.copy()).item() == pytest.approx(0.0, abs=1e-12)

    def test_perfect_reversal(self):
        x = np.array([[1.0], [2.0], [3.0]])
        y = np.array([[3.0], [2.0], [1.0]])
        per, _ = ccc(x, y)
        np.testing.assert_allclose(per.data, [-1.0], atol=1e-12)
        assert ccc_loss(x, y).item() == pytest.approx(2.0, abs=1e-12)

    def test_degenerate_column_contributes_zero(self):
        c = np.full((3, 1), 2.0)
        per, _ = ccc(c, c.copy())
        np.testing.assert_allclose(per.data, [0.0], atol=1e-12)
        assert ccc_loss(c, c.copy()).item() == pytest.approx(1.0, abs=1e-12)

    def test_constant_prediction_equal_mean(self):
        x = np.full((3, 1), 2.0)
        y = np.array([[1.0], [2.0], [3.0]])
        per, _ = ccc(x, y)
        np.testing.assert_allclose(per.data, [0.0], atol=1e-12)

    def test_affine_invariance(self, rng):
        x = rng.normal(size=(16, 5))
        y = rng.normal(size=(16, 5))
        base, _ = ccc(x, y)
        moved, _ = ccc(-1.7 * x + 0.9, -1.7 * y + 0.9)
        np.testing.assert_allclose(moved.data, base.data, atol=1e-9)

    def test_range(self, rng):
        for _ in range(50):
            x = rng.normal(size=(8, 3))
            y = rng.normal(size=(8, 3))
            per, _ = ccc(x, y)
            assert per.data.min() >= -1.0 - 1e-12
            assert per.data.max() <= 1.0 + 1e-12

    def test_mean_over_columns(self, rng):
        x = rng.normal(size=(10, 2))
        y = rng.normal(size=(10, 2))
        per, mean = ccc(x, y)
        assert mean.item() == pytest.approx(per.data.mean(), abs=1e-12)

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            ccc(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))
        with pytest.raises(ValueError):
            ccc(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)))
        with pytest.raises(ValueError):
            ccc(rng.normal(size=4), rng.normal(size=4))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((3, 4))
        labels = np.array([0, 1, 3])
        assert ce_loss(logits, labels).item() == pytest.approx(np.log(4.0), abs=1e-9)

    def test_hand_value(self):
        logits = np.array([[1.0, 0.0, 0.0, 0.0]])
        # -log softmax_0 = log(e + 3) - 1
        want = np.log(np.e + 3.0) - 1.0
        assert ce_loss(logits, [0]).item() == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(0.7436683, abs=1e-6)

    def test_confident_correct_is_near_zero(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert ce_loss(logits, [0]).item() == pytest.approx(0.0, abs=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            ce_loss(np.zeros((2, 3)), [0, 3])
        with pytest.raises(ValueError):
            ce_loss(np.zeros((2, 3)), [0, -1])
        with pytest.raises(ValueError):
            ce_loss(np.zeros((2, 3)), [0, 1, 2])


class TestMAE:
    def test_hand_value(self):
        x = np.array([0.0, 1.0, 2.0])
        y = np.array([1.0, 1.0, 0.0])
        assert mae_loss(x, y).item() == pytest.approx(1.0, abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            mae_loss(np.zeros(3), np.zeros(4))


class TestComposite:
    def test_output_loss_parts_sum(self, rng):
        model = small_model()
        frames, targets = small_batch(rng)
        bundle, _ = model.forward_reps(frames)
        total, parts = combined_output_loss(model, TaskId.EMOTION, bundle, targets)
        want = parts["shared"].item() + parts["specific"].item() + parts["combined"].item()
        assert total.item() == pytest.approx(want, abs=1e-9)
        # each part is the task loss of the head applied to that representation
        manual = task_loss(TaskId.EMOTION,
                           model.head(TaskId.EMOTION, bundle.shared), targets)
        assert parts["shared"].item() == pytest.approx(manual.item(), abs=1e-12)

    def test_discriminator_uniform_at_zero_weights(self, rng):
        model = small_model()
        for name in ("disc.w1", "disc.b1", "disc.w2", "disc.b2"):
            model.params[name].data[:] = 0.0
        frames, _ = small_batch(rng)
        bundle, _ = model.forward_reps(frames)
        for task in TASKS:
            loss = discriminator_loss(model, task, bundle.shared, 0.5)
            assert loss.item() == pytest.approx(np.log(3.0), abs=1e-9)

    def test_adversarial_is_sum_of_other_task_terms(self, rng):
        model = small_model()
        frames, targets = small_batch(rng)
        bundle, _ = model.forward_reps(frames)
        for task in TASKS:
            others = [t for t in TASKS if t is not task]
            manual = sum(task_loss(task, model.head(task, bundle.specific[o]),
                                   targets).item() for o in others)
            got = adversarial_loss(model, task, bundle, targets, 0.25).item()
            assert got == pytest.approx(manual, abs=1e-9)

    def test_total_loss_arithmetic(self):
        w = LossWeights(0.5, 0.25)
        assert total_loss(3.0, 1.0, 2.0, w) == pytest.approx(2.0, abs=1e-12)
        assert total_loss(0.0, 0.0, 0.0, w) == 0.0

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 0.0).validate()

    def test_batch_losses_bookkeeping(self, rng):
        model = small_model()
        frames, targets = small_batch(rng)
        bundle, _ = model.forward_reps(frames)
        w = LossWeights(0.5, 0.25)
        losses = batch_losses(model, TaskId.COUNTRY, bundle, targets, w)
        assert losses.output == pytest.approx(
            losses.shared + losses.specific + losses.combined, abs=1e-9)
        assert losses.total == pytest.approx(
            losses.output - 0.5 * losses.discriminator - 0.25 * losses.adversarial,
            abs=1e-9)
        # the backpropagated tensor carries the raw (unweighted) sum
        assert losses.objective.item() == pytest.approx(
            losses.output + losses.discriminator + losses.adversarial, abs=1e-9)


class TestReversalWiring:
    """Derived gradient contracts of the two reversal paths."""

    def test_discriminator_reversal_scales_shared_gradient(self, rng):
        model = small_model(seed=3)
        frames, targets = small_batch(rng)
        alpha = 0.7
        labels = np.full(len(frames), TaskId.AGE.value, dtype=np.int64)

        # control: double reversal cancels, so the shared extractor sees the
        # plain descent gradient of the discriminator loss
        bundle, _ = model.forward_reps(frames)
        logits = model.discriminate(reverse_gradient(bundle.shared, 1.0), 1.0)
        plain = grads_of(model, ce_loss(logits, labels))

        bundle, _ = model.forward_reps(frames)
        rev = grads_of(model, discriminator_loss(model, TaskId.AGE,
                                                 bundle.shared, alpha))

        for name in ("shared.w1", "shared.b1", "shared.w2", "shared.b2", "proj.w"):
            np.testing.assert_allclose(rev[name], -alpha * plain[name],
                                       rtol=1e-9, atol=1e-12)
        # the discriminator itself descends unscaled in both graphs
        for name in ("disc.w1", "disc.w2"):
            np.testing.assert_allclose(rev[name], plain[name], rtol=1e-9, atol=1e-12)

    def test_adversarial_reversal_flips_specific_gradient(self, rng):
        model = small_model(seed=4)
        frames, targets = small_batch(rng)
        alpha = 0.25
        task = TaskId.COUNTRY
        others = [t for t in TASKS if t is not task]

        bundle, _ = model.forward_reps(frames)
        direct = None
        for o in others:
            term = task_loss(task, model.head(task, bundle.specific[o]), targets)
            direct = term if direct is None else direct + term
        plain = grads_of(model, direct)

        bundle, _ = model.forward_reps(frames)
        rev = grads_of(model, adversarial_loss(model, task, bundle, targets, alpha))

        for o in others:
            scope = f"spec.{o.name.lower()}"
            for suffix in ("w1", "b1", "w2", "b2"):
                np.testing.assert_allclose(rev[f"{scope}.{suffix}"],
                                           -alpha * plain[f"{scope}.{suffix}"],
                                           rtol=1e-9, atol=1e-12)
        # the head sits downstream of the reversal node: it still descends
        np.testing.assert_allclose(rev["head.country.w"], plain["head.country.w"],
                                   rtol=1e-9, atol=1e-12)

    def test_disabled_adversarial_matches_output_only_graph(self, rng):
        model = small_model(seed=5)
        frames, targets = small_batch(rng)
        w = LossWeights(0.5, 0.25)

        bundle, _ = model.forward_reps(frames)
        off = grads_of(model, batch_losses(model, TaskId.EMOTION, bundle, targets,
                                           w, adversarial=False).objective)

        bundle, _ = model.forward_reps(frames)
        output_only, _ = combined_output_loss(model, TaskId.EMOTION, bundle, targets)
        manual = grads_of(model, output_only)

        assert set(off) == set(manual)
        for name in off:
            if off[name] is None:
                assert manual[name] is None
            else:
                np.testing.assert_array_equal(off[name], manual[name])

    def test_zero_weights_keep_extractors_plain(self, rng):
        # with the nodes present but both weights zero, reversal passes hand
        # the extractors a zero gradient, so extractor updates match the plain
        # graph; heads and discriminator keep their own weight-1 descent
        model = small_model(seed=6)
        frames, targets = small_batch(rng)

        bundle, _ = model.forward_reps(frames)
        zeroed = grads_of(model, batch_losses(model, TaskId.EMOTION, bundle,
                                              targets, LossWeights(0.0, 0.0),
                                              adversarial=True).objective)

        bundle, _ = model.forward_reps(frames)
        plain = grads_of(model, batch_losses(model, TaskId.EMOTION, bundle,
                                             targets, LossWeights(0.0, 0.0),
                                             adversarial=False).objective)

        for scope in ("proj", "shared", "spec.emotion", "combine.emotion"):
            for name in model.params:
                if name.startswith(scope):
                    np.testing.assert_allclose(zeroed[name], plain[name],
                                               rtol=1e-9, atol=1e-12)
        assert zeroed["disc.w1"] is not None and plain["disc.w1"] is None

    @pytest.mark.parametrize("task", TASKS)
    def test_gradient_reach_per_task(self, rng, task):
        model = small_model(seed=7)
        frames, targets = small_batch(rng)
        bundle, _ = model.forward_reps(frames)
        w = LossWeights(0.5, 0.25)
        g = grads_of(model, batch_losses(model, task, bundle, targets, w).objective)

        t = task.name.lower()
        others = [o.name.lower() for o in TASKS if o is not task]
        touched = {"proj.w", "proj.b", "disc.w1", "disc.b1", "disc.w2", "disc.b2",
                   f"combine.{t}.w", f"combine.{t}.b",
                   f"head.{t}.w", f"head.{t}.b"}
        touched |= {f"shared.{s}" for s in ("w1", "b1", "w2", "b2")}
        for scope in [f"spec.{t}"] + [f"spec.{o}" for o in others]:
            touched |= {f"{scope}.{s}" for s in ("w1", "b1", "w2", "b2")}
        for name, grad in g.items():
            if name in touched:
                assert grad is not None, f"{name} unexpectedly missing a gradient"
            else:
                assert grad is None, f"{name} unexpectedly reached by {task}"
