import itertools
import json

import numpy as np
import pytest

from conftest import tiny_model, tiny_spec
from protodistill.datagen import generate
from protodistill.errors import ConfigError, DataError
from protodistill.metrics import (
    MetricsReport,
    aap,
    aap_from_dump,
    active_patch_ids,
    ajs,
    ajs_from_dumps,
    decode_patch_id,
    encode_patch_id,
    evaluate_pair,
    export_dump,
    hungarian,
    modified_jaccard_matrix,
    pms,
    pms_from_dumps,
    prototype_id_lists,
)
from protodistill.model import forward, project_prototypes
from protodistill.serialize import canonical_dumps, float_key


def brute_force_assignment(score, maximize):
    n = score.shape[0]
    best_total, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        total = sum(score[i, perm[i]] for i in range(n))
        if best_total is None or (total > best_total if maximize else total < best_total):
            best_total, best_perm = total, perm
    return best_perm, best_total


def enumerate_active_ids(model, image, tau, image_index):
    """Definition-level oracle: loop every (prototype, patch) pair."""
    _, fmap, dist, _ = forward(model, image)
    h, w = dist.shape[1], dist.shape[2]
    ids = set()
    for p in range(dist.shape[0]):
        flat = dist[p].reshape(-1)
        dmin = flat.min()
        k = int(flat.argmin())
        if dmin <= tau:
            ids.add(image_index * h * w + k)
    return ids


class TestPatchIds:
    def test_round_trip(self):
        for args in [(0, 0, 0), (3, 1, 2), (7, 3, 3)]:
            pid = encode_patch_id(*args, h=4, w=4)
            assert decode_patch_id(pid, 4, 4) == args

    def test_injective_over_grid(self):
        seen = set()
        for img in range(3):
            for i in range(2):
                for j in range(3):
                    seen.add(encode_patch_id(img, i, j, 2, 3))
        assert len(seen) == 3 * 2 * 3


class TestActivePatchIds:
    def test_tiny_tau_gives_empty_set(self, tiny_test):
        model = tiny_model(seed=0)
        assert active_patch_ids(model, tiny_test.images[0], 1e-12) == set()

    def test_contains_projection_site(self, tiny_train):
        model = tiny_model(seed=1)
        report = project_prototypes(model, tiny_train)
        rec = report[0]
        h = model.config.feature_hw
        ids = active_patch_ids(model, tiny_train.images[rec["image_index"]],
                               tau_test=0.5, image_index=rec["image_index"])
        assert encode_patch_id(rec["image_index"], rec["i"], rec["j"], h, h) in ids

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration_oracle(self, seed, tiny_test):
        model = tiny_model(seed=seed)
        rng = np.random.default_rng(seed)
        tau = float(rng.uniform(0.1, 1.5))
        for idx in range(3):
            got = active_patch_ids(model, tiny_test.images[idx], tau, image_index=idx)
            want = enumerate_active_ids(model, tiny_test.images[idx], tau, idx)
            assert got == want


class TestAap:
    def test_tau_zero_on_generic_data(self, tiny_test):
        model = tiny_model(seed=0)
        assert aap(model, tiny_test, 0.0) == 0.0

    def test_matches_mean_popcount_oracle(self):
        train, _ = generate(tiny_spec(train_per_class=3), seed=2)
        model = tiny_model(seed=3)
        tau = 0.8
        counts = [len(enumerate_active_ids(model, train.images[i], tau, i))
                  for i in range(len(train))]
        assert aap(model, train, tau) == pytest.approx(np.mean(counts), abs=1e-15)

    def test_huge_tau_counts_distinct_argmin_cells(self, tiny_test):
        model = tiny_model(seed=4)
        m = model.config.num_prototypes
        hw = model.config.feature_hw ** 2
        value = aap(model, tiny_test, 1e6)
        assert 1.0 <= value <= min(m, hw)

    def test_empty_dataset_raises(self, tiny_test):
        model = tiny_model(seed=0)
        with pytest.raises(DataError):
            aap(model, tiny_test.subset(np.array([], dtype=int)), 1.0)


class TestAjs:
    def test_self_comparison_is_exactly_one(self, tiny_test):
        model = tiny_model(seed=5)
        assert ajs(model, model, tiny_test, 0.9) == 1.0

    def test_symmetry(self, tiny_test):
        a = tiny_model(seed=6)
        b = tiny_model(seed=7)
        assert ajs(a, b, tiny_test, 0.9) == ajs(b, a, tiny_test, 0.9)

    def test_both_empty_counts_as_agreement(self, tiny_test):
        a = tiny_model(seed=6)
        b = tiny_model(seed=7)
        assert ajs(a, b, tiny_test, 1e-12) == 1.0

    def test_range(self, tiny_test):
        a = tiny_model(seed=8)
        b = tiny_model(seed=9)
        assert 0.0 <= ajs(a, b, tiny_test, 0.9) <= 1.0


class TestPrototypeIdLists:
    def test_projected_model_lists_contain_source_sites(self, tiny_train):
        model = tiny_model(seed=1)
        report = project_prototypes(model, tiny_train)
        h = model.config.feature_hw
        lists = prototype_id_lists(model, tiny_train)
        for p, rec in enumerate(report):
            pid = encode_patch_id(rec["image_index"], rec["i"], rec["j"], h, h)
            assert pid in lists[p]

    def test_one_id_per_image_per_prototype(self, tiny_test):
        model = tiny_model(seed=2)
        lists = prototype_id_lists(model, tiny_test)
        for q in lists:
            assert len(q) <= len(tiny_test)

    def test_matches_argmin_oracle(self, tiny_test):
        model = tiny_model(seed=3)
        lists = prototype_id_lists(model, tiny_test)
        h = model.config.feature_hw
        for idx in range(len(tiny_test)):
            _, _, dist, _ = forward(model, tiny_test.images[idx])
            for p in range(dist.shape[0]):
                k = int(dist[p].reshape(-1).argmin())
                assert idx * h * h + k in lists[p]


class TestModifiedJaccard:
    def test_identical_lists_diagonal_one(self):
        q = [{1, 2}, {3}, {4, 5, 6}]
        score = modified_jaccard_matrix(q, [set(s) for s in q])
        np.testing.assert_array_equal(np.diag(score), [1.0, 1.0, 1.0])

    def test_disjoint_lists_all_zero(self):
        score = modified_jaccard_matrix([{1}, {2}], [{3}, {4}])
        np.testing.assert_array_equal(score, np.zeros((2, 2)))

    def test_hand_value(self):
        score = modified_jaccard_matrix([{1, 2}], [{2, 3}])
        assert score[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_entries_bounded(self):
        rng = np.random.default_rng(0)
        q_t = [set(rng.integers(0, 20, size=5).tolist()) for _ in range(4)]
        q_s = [set(rng.integers(0, 20, size=5).tolist()) for _ in range(4)]
        score = modified_jaccard_matrix(q_t, q_s)
        assert (score >= 0).all() and (score <= 1).all()


class TestHungarian:
    def test_identity_matrix_maximize(self):
        assignment, total = hungarian(np.eye(4), maximize=True)
        np.testing.assert_array_equal(assignment, [0, 1, 2, 3])
        assert total == 4.0

    def test_one_by_one(self):
        assignment, total = hungarian(np.array([[0.7]]), maximize=True)
        assert assignment.tolist() == [0]
        assert total == pytest.approx(0.7)

    @pytest.mark.parametrize("maximize", [False, True])
    def test_random_6x6_matches_brute_force(self, maximize):
        for seed in range(100):
            score = np.random.default_rng(seed).uniform(size=(6, 6))
            assignment, total = hungarian(score, maximize=maximize)
            _, best = brute_force_assignment(score, maximize)
            assert total == pytest.approx(best, abs=1e-12), f"seed {seed}"
            assert sorted(assignment.tolist()) == list(range(6))

    def test_non_square_raises(self):
        with pytest.raises(ConfigError):
            hungarian(np.zeros((2, 3)))

    def test_non_finite_raises(self):
        bad = np.zeros((2, 2))
        bad[0, 0] = np.nan
        with pytest.raises(ConfigError):
            hungarian(bad)


class TestPms:
    def test_self_comparison_is_exactly_one(self, tiny_test, tiny_train):
        model = tiny_model(seed=5)
        project_prototypes(model, tiny_train)
        assert pms(model, model, tiny_test) == 1.0

    def test_swapped_prototypes_recovered(self, tiny_test):
        teacher = tiny_model(seed=6)
        student = teacher.clone()
        perm = np.array([2, 0, 3, 1])
        student.prototypes.data[:] = teacher.prototypes.data[perm]
        assert pms(student, teacher, tiny_test) == 1.0

    def test_invariant_under_common_permutation(self, tiny_test):
        teacher = tiny_model(seed=7)
        student = tiny_model(seed=8)
        before = pms(student, teacher, tiny_test)
        perm = np.random.default_rng(0).permutation(teacher.config.num_prototypes)
        teacher.prototypes.data[:] = teacher.prototypes.data[perm]
        student.prototypes.data[:] = student.prototypes.data[perm]
        assert pms(student, teacher, tiny_test) == pytest.approx(before, abs=1e-12)

    def test_bounded(self, tiny_test):
        a = tiny_model(seed=9)
        b = tiny_model(seed=10)
        assert 0.0 <= pms(a, b, tiny_test) <= 1.0

    def test_prototype_count_mismatch_raises(self, tiny_test):
        from conftest import tiny_config
        from protodistill.model import PrototypeModel
        a = tiny_model(seed=0)
        b = PrototypeModel.initialize(tiny_config(prototypes_per_class=3),
                                      np.random.default_rng(0))
        with pytest.raises(ConfigError):
            pms(a, b, tiny_test)


class TestDumps:
    def _dump(self, argmin_ids, active, h=2, w=2, n=2):
        return {
            "format_version": 1,
            "kind": "activation-dump",
            "model_id": "synthetic",
            "H": h, "W": w, "d": 3,
            "num_images": n,
            "num_prototypes": len(argmin_ids),
            "argmin_ids": [sorted(s) for s in argmin_ids],
            "active_ids": {float_key(tau): [sorted(s) for s in per_image]
                           for tau, per_image in active.items()},
        }

    def test_each_prototype_active_on_distinct_patch_gives_aap_m(self):
        # one image, three prototypes on three distinct patches
        dump = self._dump([{0}, {1}, {2}], {1.0: [[0, 1, 2]]}, n=1)
        assert aap_from_dump(dump, 1.0) == 3.0

    def test_ajs_hand_value_one_third(self):
        t = self._dump([{0}], {1.0: [[0, 1], [4, 5]]})
        s = self._dump([{0}], {1.0: [[1, 2], [5, 6]]})
        assert ajs_from_dumps(s, t, 1.0) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_disjoint_active_sets_give_zero(self):
        t = self._dump([{0}], {1.0: [[0], [4]]})
        s = self._dump([{0}], {1.0: [[1], [5]]})
        assert ajs_from_dumps(s, t, 1.0) == 0.0

    def test_pms_swap_recovered_from_dumps(self):
        t = self._dump([{0, 4}, {1, 5}], {})
        s = self._dump([{1, 5}, {0, 4}], {})
        assert pms_from_dumps(s, t) == 1.0

    def test_pms_disjoint_zero(self):
        t = self._dump([{0}, {1}], {})
        s = self._dump([{2}, {3}], {})
        assert pms_from_dumps(s, t) == 0.0

    def test_export_round_trips_through_canonical_json(self, tiny_test, tmp_path):
        teacher = tiny_model(seed=11)
        student = tiny_model(seed=12)
        taus = [0.5, 1.0]
        dump_t = export_dump(teacher, tiny_test, taus, "teacher")
        dump_s = export_dump(student, tiny_test, taus, "student")
        path = tmp_path / "dump.json"
        path.write_text(canonical_dumps(dump_t), encoding="ascii")
        reloaded = json.loads(path.read_text())
        for tau in taus:
            assert aap_from_dump(reloaded, tau) == aap(teacher, tiny_test, tau)
            assert ajs_from_dumps(dump_s, reloaded, tau) \
                == ajs(student, teacher, tiny_test, tau)
        assert pms_from_dumps(dump_s, reloaded) == pms(student, teacher, tiny_test)

    def test_missing_tau_raises(self):
        dump = self._dump([{0}], {1.0: [[0], [1]]})
        with pytest.raises(DataError):
            aap_from_dump(dump, 2.0)


class TestEvaluatePair:
    def test_teacher_self_row(self, tiny_test, tiny_train):
        model = tiny_model(seed=13)
        project_prototypes(model, tiny_train)
        rep = evaluate_pair(model, model, tiny_test, tau_test=0.9)
        assert rep.ajs == 1.0 and rep.pms == 1.0
        assert rep.aap_teacher == rep.aap_student
        assert rep.top1_teacher == rep.top1_student
        doc = rep.to_dict()
        assert doc["tau_test"] == 0.9
        assert set(doc) >= {"aap_teacher", "aap_student", "ajs", "pms",
                            "top1_teacher", "top1_student"}

    def test_out_of_range_scores_rejected(self):
        with pytest.raises(DataError):
            MetricsReport(aap_teacher=1, aap_student=1, ajs=1.5, pms=0.5,
                          top1_teacher=1, top1_student=1, tau_test=1.0)
