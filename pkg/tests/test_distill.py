import math

import numpy as np
import pytest

from conftest import tiny_config, tiny_model
from fdcheck import assert_matches_fd, finite_difference_grad
from protodistill import tensor as T
from protodistill.distill import (
    ActiveMask,
    DistillConfig,
    LossParts,
    MaskCache,
    active_mask,
    batch_mask_bits,
    check_compatible,
    distill,
    distill_epoch,
    is_active,
    loss_global,
    loss_model,
    loss_ppc,
    loss_total,
    mask_bits_from_distances,
    train_model,
)
from protodistill.errors import ConfigError, DataError, DimensionError
from protodistill.model import (
    ConvSpec,
    FeatureMap,
    ModelConfig,
    PrototypeModel,
    forward_batch,
    save_checkpoint,
)


def make_fmap(values_hwd):
    return FeatureMap(np.asarray(values_hwd, dtype=np.float64))


class TestActivePatches:
    def test_patch_matching_prototype_is_active(self):
        fmap = make_fmap([[[0.1, 0.2], [0.9, 0.9]],
                          [[0.4, 0.4], [0.6, 0.1]]])
        protos = np.array([[0.9, 0.9]])
        assert is_active(np.array([0.9, 0.9]), fmap, tau=0.1, prototypes=protos)

    def test_tau_zero_with_positive_distances_deactivates_all(self):
        rng = np.random.default_rng(0)
        fmap = make_fmap(rng.uniform(0.3, 0.7, size=(2, 2, 3)))
        protos = rng.uniform(0.8, 0.9, size=(2, 3))
        mask = active_mask(fmap, tau=1e-12, prototypes=protos)
        assert mask.popcount == 0
        for i in range(2):
            for j in range(2):
                assert not is_active(fmap.l(i, j), fmap, 1e-12, protos)

    def test_single_prototype_activates_only_its_argmin(self):
        # prototype closest to patch (0,1) at distance 0.5
        fmap = make_fmap([[[0.0, 0.0], [1.0, 0.5]],
                          [[3.0, 0.0], [0.0, 3.0]]])
        protos = np.array([[1.0, 0.0]])
        mask = active_mask(fmap, tau=1.0, prototypes=protos)
        expected = np.zeros((2, 2), dtype=bool)
        expected[0, 1] = True
        np.testing.assert_array_equal(mask.bits, expected)

    def test_two_prototypes_two_bits(self):
        fmap = make_fmap([[[0.0, 0.0], [5.0, 5.0]],
                          [[5.0, 0.0], [1.0, 1.0]]])
        protos = np.array([[0.1, 0.0], [1.0, 1.1]])  # argmins at (0,0) and (1,1)
        mask = active_mask(fmap, tau=1.0, prototypes=protos)
        expected = np.zeros((2, 2), dtype=bool)
        expected[0, 0] = expected[1, 1] = True
        np.testing.assert_array_equal(mask.bits, expected)

    def test_mask_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            h, w, d, m = 3, 2, 4, 3
            fmap_hwd = rng.uniform(size=(h, w, d))
            protos = rng.uniform(size=(m, d))
            tau = float(rng.uniform(0.2, 1.2))
            mask = active_mask(make_fmap(fmap_hwd), tau, protos)
            # oracle: all (p, i, j) distances by loops, then the definition
            expected = np.zeros((h, w), dtype=bool)
            for p in range(m):
                dists = [(math.sqrt(((fmap_hwd[i, j] - protos[p]) ** 2).sum()), i, j)
                         for i in range(h) for j in range(w)]
                dmin = min(x[0] for x in dists)
                best = next((i, j) for dist, i, j in dists if dist == dmin)
                if dmin <= tau:
                    expected[best] = True
            np.testing.assert_array_equal(mask.bits, expected)

    def test_popcount_bounded_by_prototypes_and_patches(self):
        rng = np.random.default_rng(1)
        for m in (1, 3, 9):
            fmap = make_fmap(rng.uniform(size=(2, 2, 3)))
            protos = rng.uniform(size=(m, 3))
            mask = active_mask(fmap, tau=10.0, prototypes=protos)
            assert mask.popcount <= min(m, 4)

    @pytest.mark.parametrize("seed", range(20))
    def test_mask_monotone_in_tau(self, seed):
        rng = np.random.default_rng(seed)
        fmap = make_fmap(rng.uniform(size=(3, 3, 5)))
        protos = rng.uniform(size=(4, 5))
        tau_lo, tau_hi = sorted(rng.uniform(0.05, 2.0, size=2))
        lo = active_mask(fmap, tau_lo, protos).bits
        hi = active_mask(fmap, tau_hi, protos).bits
        assert (~lo | hi).all()  # lo set implies hi set
        assert lo.sum() <= hi.sum()

    def test_is_active_rejects_foreign_patch(self):
        fmap = make_fmap(np.zeros((2, 2, 3)))
        with pytest.raises(DataError):
            is_active(np.array([9.0, 9.0, 9.0]), fmap, 1.0, np.zeros((1, 3)))

    def test_batch_masks_agree_with_single(self):
        rng = np.random.default_rng(8)
        dists = rng.uniform(0.1, 2.0, size=(5, 4, 3, 3))
        tau = 0.9
        batch = batch_mask_bits(dists, tau)
        for n in range(5):
            np.testing.assert_array_equal(batch[n], mask_bits_from_distances(dists[n], tau))


class TestLossPpc:
    def test_equal_features_zero(self):
        rng = np.random.default_rng(0)
        f = rng.uniform(size=(2, 3, 2, 2))
        masks = np.ones((2, 2, 2), dtype=bool)
        assert loss_ppc(f, T.Tensor(f.copy()), masks).item() == 0.0

    def test_zero_mask_zero(self):
        rng = np.random.default_rng(1)
        ft = rng.uniform(size=(2, 3, 2, 2))
        fs = rng.uniform(size=(2, 3, 2, 2))
        masks = np.zeros((2, 2, 2), dtype=bool)
        assert loss_ppc(ft, T.Tensor(fs), masks).item() == 0.0

    def test_unit_difference_single_patch(self):
        ft = np.array([[[[1.0]], [[0.0]]]])  # N=1, d=2, H=W=1
        fs = np.zeros((1, 2, 1, 1))
        masks = np.ones((1, 1, 1), dtype=bool)
        assert loss_ppc(ft, T.Tensor(fs), masks).item() == 1.0

    def test_gradient_reaches_student_only(self):
        rng = np.random.default_rng(2)
        ft = rng.uniform(size=(2, 3, 2, 2))
        fs = T.Tensor(rng.uniform(size=(2, 3, 2, 2)), requires_grad=True)
        masks = rng.random((2, 2, 2)) < 0.5
        loss = loss_ppc(ft, fs, masks)
        loss.backward()
        assert fs.grad is not None
        # unmasked positions contribute no gradient
        inactive = ~np.broadcast_to(masks[:, None], fs.shape)
        assert np.all(fs.grad[inactive] == 0.0)

    def test_mask_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            loss_ppc(np.zeros((1, 2, 2, 2)), T.Tensor(np.zeros((1, 2, 2, 2))),
                     np.ones((1, 3, 3), dtype=bool))

    def test_normalized_variant_divides_by_popcount(self):
        ft = np.zeros((1, 1, 2, 2))
        fs = np.ones((1, 1, 2, 2))
        masks = np.ones((1, 2, 2), dtype=bool)
        plain = loss_ppc(ft, T.Tensor(fs), masks).item()          # sqrt(4) = 2
        normed = loss_ppc(ft, T.Tensor(fs), masks, normalize=True).item()
        assert plain == 2.0
        assert normed == pytest.approx(0.5, abs=1e-15)


class TestLossGlobal:
    def test_identical_banks_zero(self):
        p = np.random.default_rng(0).uniform(size=(4, 3))
        assert loss_global(p, T.Tensor(p.copy())).item() == 0.0

    def test_hand_value(self):
        pt = np.array([[0.0], [2.0]])
        ps = np.array([[1.0], [2.0]])
        assert loss_global(pt, T.Tensor(ps)).item() == pytest.approx(0.5, abs=1e-15)

    def test_common_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pt = rng.uniform(size=(5, 4))
        ps = rng.uniform(size=(5, 4))
        perm = rng.permutation(5)
        a = loss_global(pt, T.Tensor(ps)).item()
        b = loss_global(pt[perm], T.Tensor(ps[perm])).item()
        assert a == pytest.approx(b, abs=1e-15)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            loss_global(np.zeros((2, 3)), T.Tensor(np.zeros((3, 3))))


class TestLossModel:
    def test_uniform_logits_cross_entropy_is_ln2(self):
        logits = T.Tensor(np.zeros((3, 2)))
        dist = T.Tensor(np.zeros((3, 2, 1, 1)))
        labels = np.array([0, 1, 0])
        out = loss_model(logits, labels, dist, np.array([0, 1]),
                         lambda_cluster=0.0, lambda_sep=0.0)
        assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_zero_same_class_distance_kills_cluster_term(self):
        logits = T.Tensor(np.zeros((1, 2)))
        dist = np.array([[[[0.0]], [[3.0]]]])  # proto0 (class 0) at distance 0
        with_cluster = loss_model(T.Tensor(np.zeros((1, 2))), np.array([0]),
                                  T.Tensor(dist), np.array([0, 1]),
                                  lambda_cluster=0.8, lambda_sep=0.0)
        without = loss_model(logits, np.array([0]), T.Tensor(dist), np.array([0, 1]),
                             lambda_cluster=0.0, lambda_sep=0.0)
        assert with_cluster.item() == pytest.approx(without.item(), abs=1e-15)

    def test_hand_built_instance(self):
        logits_data = np.array([[0.2, -0.1], [0.0, 0.3]])
        labels = np.array([0, 1])
        dist_data = np.array([[[[0.5]], [[1.5]]],
                              [[[2.0]], [[0.25]]]])  # (N=2, m=2, 1, 1)
        class_of = np.array([0, 1])
        out = loss_model(T.Tensor(logits_data), labels, T.Tensor(dist_data), class_of,
                         lambda_cluster=0.8, lambda_sep=0.08)
        ce0 = math.log(math.exp(0.2) + math.exp(-0.1)) - 0.2
        ce1 = math.log(math.exp(0.0) + math.exp(0.3)) - 0.3
        cluster = (0.5 + 0.25) / 2.0
        sep = (1.5 + 2.0) / 2.0
        expected = (ce0 + ce1) / 2.0 + 0.8 * cluster - 0.08 * sep
        assert out.item() == pytest.approx(expected, abs=1e-10)

    def test_invalid_label_raises(self):
        with pytest.raises(DataError):
            loss_model(T.Tensor(np.zeros((1, 2))), np.array([5]),
                       T.Tensor(np.zeros((1, 2, 1, 1))), np.array([0, 1]))


class TestLossTotal:
    def _parts(self):
        model_part = T.Tensor(np.asarray(0.7))
        global_part = T.Tensor(np.asarray(0.5))
        ppc_part = T.Tensor(np.asarray(1.0))
        return LossParts(model=model_part, global_=global_part, ppc=ppc_part)

    def test_zero_lambdas_reduce_to_model_loss(self):
        config = DistillConfig(mode="proto2proto", lambda_global=0.0, lambda_ppc=0.0)
        assert loss_total(config, self._parts()).item() == 0.7

    def test_clone_student_total_equals_model_loss(self, tiny_train):
        teacher = tiny_model(seed=0)
        student = teacher.clone()
        out_t = forward_batch(teacher, tiny_train.images[:4])
        out_s = forward_batch(student, tiny_train.images[:4])
        masks = batch_mask_bits(out_t.dist.data, tau=1.0)
        parts = LossParts(
            model=loss_model(out_s.logits, tiny_train.labels[:4], out_s.dist,
                             student.class_of_prototype),
            global_=loss_global(teacher.prototypes, student.prototypes),
            ppc=loss_ppc(out_t.fmap.data, out_s.fmap, masks),
        )
        assert parts.global_.item() == 0.0
        assert parts.ppc.item() == 0.0
        config = DistillConfig(mode="proto2proto", lambda_global=1.0, lambda_ppc=1.0)
        assert loss_total(config, parts).item() == parts.model.item()

    def test_weighted_sum_of_hand_values(self):
        config = DistillConfig(mode="proto2proto", lambda_global=1.0, lambda_ppc=1.0)
        assert loss_total(config, self._parts()).item() \
            == pytest.approx(0.7 + 0.5 + 1.0, abs=1e-15)

    def test_hint_uses_ppc_but_not_global(self):
        config = DistillConfig(mode="hint", lambda_ppc=2.0, lambda_global=5.0)
        parts = self._parts()
        assert loss_total(config, parts).item() == pytest.approx(0.7 + 2.0, abs=1e-15)

    def test_baseline_ignores_distillation_terms(self):
        config = DistillConfig(mode="baseline")
        assert loss_total(config, self._parts()).item() == 0.7

    def test_no_model_loss_requires_reuse(self):
        with pytest.raises(ConfigError):
            DistillConfig(mode="proto2proto", use_model_loss=False)
        config = DistillConfig(mode="proto2proto", use_model_loss=False,
                               reuse_decision_module=True)
        expected = config.lambda_ppc * 1.0 + config.lambda_global * 0.5
        assert loss_total(config, self._parts()).item() \
            == pytest.approx(expected, abs=1e-15)


class TestDistillConfigValidation:
    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            DistillConfig(mode="bogus")

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            DistillConfig(tau_train=0.0)

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            DistillConfig(lambda_ppc=-1.0)

    def test_bad_distance(self):
        with pytest.raises(ConfigError):
            DistillConfig(distance="cosine")


class TestDistillEpoch:
    def _teacher_student(self):
        teacher = tiny_model(seed=0)
        student = tiny_model(seed=1)
        teacher.set_trainable(False)
        return teacher, student

    def test_zero_lr_leaves_student_bit_identical(self, tiny_train):
        teacher, student = self._teacher_student()
        before = {k: p.data.tobytes() for k, p in student.named_parameters()}
        config = DistillConfig(mode="proto2proto", lr=0.0, momentum=0.0, batch_size=4)
        opt = T.SGD(student.trainable_parameters(), lr=0.0, momentum=0.0)
        distill_epoch(teacher, student, tiny_train, config, opt, T.subseed(0, "s"))
        after = {k: p.data.tobytes() for k, p in student.named_parameters()}
        assert before == after

    def test_single_step_matches_finite_difference_gradient(self, tiny_train):
        teacher, student = self._teacher_student()
        one = tiny_train.subset(np.array([0]))
        config = DistillConfig(mode="proto2proto", lr=1e-3, momentum=0.0, batch_size=1)
        t_out = forward_batch(teacher, one.images)
        masks = batch_mask_bits(t_out.dist.data, config.tau_train)

        def batch_loss():
            out = forward_batch(student, one.images)
            parts = LossParts(
                model=loss_model(out.logits, one.labels, out.dist,
                                 student.class_of_prototype,
                                 config.lambda_cluster, config.lambda_sep),
                global_=loss_global(teacher.prototypes.data, student.prototypes),
                ppc=loss_ppc(t_out.fmap.data, out.fmap, masks),
            )
            return loss_total(config, parts)

        fd = {name: finite_difference_grad(p.data, lambda: batch_loss().item())
              for name, p in student.named_parameters()}
        before = {name: p.data.copy() for name, p in student.named_parameters()}
        opt = T.SGD(student.trainable_parameters(), lr=config.lr, momentum=0.0)
        distill_epoch(teacher, student, one, config, opt, T.subseed(0, "s"))
        for name, p in student.named_parameters():
            delta = p.data - before[name]
            assert_matches_fd(delta, -config.lr * fd[name], rel=1e-4,
                              abs_floor=config.lr * 1e-8, what=name)

    def test_teacher_checkpoint_untouched_by_distillation(self, tiny_train, tmp_path):
        teacher, student = self._teacher_student()
        save_checkpoint(teacher, tmp_path / "before.json")
        config = DistillConfig(mode="proto2proto", epochs=2, lr=1e-2, batch_size=4)
        distill(teacher, student, tiny_train, config, seed=5)
        save_checkpoint(teacher, tmp_path / "after.json")
        assert (tmp_path / "before.json").read_bytes() == (tmp_path / "after.json").read_bytes()

    def test_loss_non_increasing_on_toy_set(self, tiny_train):
        # momentum off: on a 16-image set heavy-ball steps oscillate,
        # plain SGD descends monotonically (checked across 10 seeds)
        teacher, student = self._teacher_student()
        config = DistillConfig(mode="proto2proto", epochs=5, lr=1e-2, momentum=0.0,
                               batch_size=16)
        history = distill(teacher, student, tiny_train, config, seed=0)
        losses = [h.loss_total for h in history]
        for prev, nxt in zip(losses, losses[1:]):
            assert nxt <= prev * 1.05, f"loss jumped: {losses}"

    def test_reuse_keeps_decision_weights_equal_every_epoch(self, tiny_train):
        teacher, student = self._teacher_student()
        config = DistillConfig(mode="proto2proto", reuse_decision_module=True,
                               epochs=1, lr=1e-2, batch_size=4)
        distill(teacher, student, tiny_train, config, seed=1)
        assert student.decision.data.tobytes() == teacher.decision.data.tobytes()
        opt = T.SGD(student.trainable_parameters(), lr=1e-2, momentum=0.0)
        for epoch in range(3):
            distill_epoch(teacher, student, tiny_train, config, opt,
                          T.subseed(2, "s", epoch), MaskCache())
            assert student.decision.data.tobytes() == teacher.decision.data.tobytes()

    def test_hint_epoch_equals_all_ones_mask_objective(self, tiny_train):
        teacher, student = self._teacher_student()
        config = DistillConfig(mode="hint", lr=0.0, momentum=0.0,
                               batch_size=len(tiny_train))
        opt = T.SGD(student.trainable_parameters(), lr=0.0, momentum=0.0)
        stats = distill_epoch(teacher, student, tiny_train, config, opt,
                              T.subseed(0, "s"))
        t_out = forward_batch(teacher, tiny_train.images)
        s_out = forward_batch(student, tiny_train.images)
        ones = np.ones((len(tiny_train),) + t_out.fmap.data.shape[2:], dtype=bool)
        manual = loss_ppc(t_out.fmap.data, s_out.fmap, ones).item()
        assert abs(stats.loss_ppc - manual) < 1e-12

    def test_incompatible_configs_raise(self, tiny_train):
        teacher = tiny_model(seed=0)
        other = PrototypeModel.initialize(
            tiny_config(proto_dim=6), np.random.default_rng(1))
        with pytest.raises(ConfigError):
            check_compatible(teacher, other)
        with pytest.raises(ConfigError):
            distill(teacher, other, tiny_train, DistillConfig(epochs=1), seed=0)


class TestTrainModel:
    def test_accuracy_improves_on_toy_data(self, tiny_train):
        model = tiny_model(seed=2)
        history = train_model(model, tiny_train, epochs=8, lr=1e-2, momentum=0.9,
                              batch_size=8, seed=0)
        assert history[-1].loss_total < history[0].loss_total

    def test_identical_seeds_identical_history(self, tiny_train):
        runs = []
        for _ in range(2):
            model = tiny_model(seed=2)
            history = train_model(model, tiny_train, epochs=3, lr=1e-2, momentum=0.9,
                                  batch_size=8, seed=7)
            runs.append((model.prototypes.data.tobytes(),
                         tuple(h.loss_total for h in history)))
        assert runs[0] == runs[1]
