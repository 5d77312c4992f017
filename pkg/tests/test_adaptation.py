"""Stage I tests: prototypes, refinement, losses, and the training loop."""

import math

import numpy as np
import pytest

from segfuse.adaptation import (
    AdaptConfig,
    ORGAN_ENTROPY_THRESHOLDS,
    Prototype,
    compute_prototypes,
    consistency_loss,
    infomax_loss,
    prototype_similarity,
    prototypes_from_maps,
    pseudo_label_loss,
    refine_pseudo_labels,
    run_model_adaptation,
)
from segfuse.autodiff import Tensor, add, finite_diff_check, no_grad, scale, softmax
from segfuse.exceptions import ConfigError
from segfuse.network import SegNetConfig, attach_fresh_aux, init_network

LN2 = math.log(2.0)


def entropy_oracle(p):
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


# -- prototypes ---------------------------------------------------------------


class TestPrototypes:
    def test_half_weight_two_pixels_hand_value(self):
        u = np.array([1.0, 2.0, 3.0])
        w = np.array([5.0, -1.0, 0.5])
        feats = np.stack([u, w], axis=-1)[None, :, None, :]  # [1, 3, 1, 2]
        probs = np.full((1, 1, 1, 2), 0.5)
        (proto,) = prototypes_from_maps(probs, feats)
        assert proto.class_id == 0
        np.testing.assert_allclose(proto.vector, (u + w) / 2, rtol=0, atol=1e-15)

    def test_disjoint_one_hot_regions_equal_region_means(self):
        rng = np.random.default_rng(0)
        feats = rng.random((2, 4, 6, 6))
        region = np.zeros((2, 6, 6), dtype=int)
        region[:, 3:, :] = 1
        probs = np.stack([(region == 0), (region == 1)], axis=1).astype(np.float64)
        protos = prototypes_from_maps(probs, feats)
        assert [p.class_id for p in protos] == [0, 1]
        for proto in protos:
            mask = region == proto.class_id
            expected = feats.transpose(0, 2, 3, 1)[mask].mean(axis=0)
            np.testing.assert_allclose(proto.vector, expected, rtol=1e-12)

    def test_zero_mass_class_absent(self):
        probs = np.zeros((1, 3, 2, 2))
        probs[:, 0] = 1.0
        feats = np.ones((1, 5, 2, 2))
        protos = prototypes_from_maps(probs, feats)
        assert [p.class_id for p in protos] == [0]

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            prototypes_from_maps(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 5, 5)))
        with pytest.raises(ValueError):
            prototypes_from_maps(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))

    def test_network_accumulation_matches_map_oracle(self):
        net = init_network(SegNetConfig(num_classes=2), seed=5)
        rng = np.random.default_rng(1)
        images = rng.random((5, 1, 16, 16))
        protos = compute_prototypes(net, images, chunk=2)
        probs = net.predict_proba(images)
        feats = net.decision_features(images)
        oracle = prototypes_from_maps(probs, feats)
        assert [p.class_id for p in protos] == [p.class_id for p in oracle]
        for a, b in zip(protos, oracle):
            np.testing.assert_allclose(a.vector, b.vector, rtol=1e-10, atol=1e-12)

    def test_image_order_invariance(self):
        net = init_network(SegNetConfig(num_classes=2), seed=6)
        rng = np.random.default_rng(2)
        images = rng.random((6, 1, 16, 16))
        fwd = compute_prototypes(net, images)
        rev = compute_prototypes(net, images[::-1])
        for a, b in zip(fwd, rev):
            np.testing.assert_allclose(a.vector, b.vector, rtol=1e-12, atol=1e-12)


# -- similarity ---------------------------------------------------------------


class TestSimilarity:
    def test_self_similarity_is_one(self):
        v = np.array([0.3, -1.2, 4.0])
        assert prototype_similarity(v, Prototype(0, v.copy())) == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        assert prototype_similarity(
            np.array([1.0, 0.0]), Prototype(0, np.array([0.0, 2.0]))
        ) == pytest.approx(0.0)

    def test_hand_value(self):
        got = prototype_similarity(
            np.array([1.0, 0.0]), Prototype(0, np.array([1.0, 1.0]))
        )
        assert got == pytest.approx(0.7071067811865476, abs=1e-15)

    def test_sign_is_preserved(self):
        got = prototype_similarity(
            np.array([1.0, 0.0]), Prototype(0, np.array([-1.0, 0.0]))
        )
        assert got == pytest.approx(-1.0)

    def test_zero_norm_neutral(self):
        assert prototype_similarity(
            np.zeros(3), Prototype(0, np.ones(3))
        ) == 0.0
        assert prototype_similarity(
            np.ones(3), Prototype(0, np.zeros(3))
        ) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            f = rng.normal(size=6)
            p = Prototype(0, rng.normal(size=6))
            base = prototype_similarity(f, p)
            for alpha in (1e-3, 0.5, 7.0, 1e4):
                assert abs(prototype_similarity(alpha * f, p) - base) < 1e-12


# -- refinement ---------------------------------------------------------------


def two_class_protos():
    return [
        Prototype(0, np.array([0.0, 1.0])),
        Prototype(1, np.array([1.0, 0.0])),
    ]


class TestRefinement:
    def test_confident_pixel_kept(self):
        probs = np.array([0.99, 0.01]).reshape(2, 1, 1)
        feats = np.array([1.0, 0.0]).reshape(2, 1, 1)  # similarity favors class 1
        out = refine_pseudo_labels(probs, feats, two_class_protos(), 0.1)
        lam = entropy_oracle(probs[None])[0, 0, 0]
        assert lam == pytest.approx(0.05600153435484735, abs=1e-12)
        assert out.kept_mask[0, 0]
        assert out.labels[0, 0] == 0
        assert not out.reassigned_mask[0, 0]

    def test_uncertain_pixel_reassigned_by_similarity(self):
        probs = np.array([0.6, 0.4]).reshape(2, 1, 1)
        feats = np.array([1.0, 0.0]).reshape(2, 1, 1)
        out = refine_pseudo_labels(probs, feats, two_class_protos(), 0.4)
        lam = entropy_oracle(probs[None])[0, 0, 0]
        assert lam == pytest.approx(0.6730116670092565, abs=1e-12)
        assert not out.kept_mask[0, 0]
        assert out.labels[0, 0] == 1
        assert out.reassigned_mask[0, 0]

    def test_one_hot_probs_all_kept(self):
        probs = np.zeros((2, 3, 3))
        probs[0, :2] = 1.0
        probs[1, 2:] = 1.0
        feats = np.random.default_rng(0).random((2, 3, 3))
        out = refine_pseudo_labels(probs, feats, two_class_protos(), 0.1)
        assert out.kept_mask.all()
        np.testing.assert_array_equal(out.labels, probs.argmax(axis=0))

    def test_partition_property_random_maps(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(scale=2.0, size=(3, 2, 8, 8))
        with no_grad():
            probs = softmax(Tensor(logits), axis=1).data
        feats = rng.normal(size=(3, 2, 8, 8))
        for th in (0.0, 0.1, 0.4, LN2):
            out = refine_pseudo_labels(probs, feats, two_class_protos(), th)
            lam = entropy_oracle(probs)
            np.testing.assert_array_equal(out.kept_mask, lam <= th)
            preds = probs.argmax(axis=1)
            np.testing.assert_array_equal(out.labels[out.kept_mask], preds[out.kept_mask])
            assert not (out.reassigned_mask & out.kept_mask).any()
            assert (out.reassigned_mask | out.kept_mask).all()

    def test_threshold_at_ln_c_keeps_everything(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(2, 2, 6, 6))
        with no_grad():
            probs = softmax(Tensor(logits), axis=1).data
        feats = rng.normal(size=(2, 2, 6, 6))
        out = refine_pseudo_labels(probs, feats, two_class_protos(), LN2)
        assert out.kept_mask.all()
        np.testing.assert_array_equal(out.labels, probs.argmax(axis=1))

    def test_threshold_zero_reassigns_all_but_one_hot(self):
        probs = np.zeros((2, 1, 2))
        probs[:, 0, 0] = (1.0, 0.0)  # exactly one-hot
        probs[:, 0, 1] = (0.7, 0.3)
        feats = np.zeros((2, 1, 2))
        feats[:, 0, 0] = (0.0, 1.0)
        feats[:, 0, 1] = (1.0, 0.0)
        out = refine_pseudo_labels(probs, feats, two_class_protos(), 0.0)
        assert out.kept_mask[0, 0] and not out.kept_mask[0, 1]
        assert out.labels[0, 0] == 0  # kept despite similarity favoring class 1
        assert out.labels[0, 1] == 1  # reassigned

    def test_no_prototypes_returns_predictions_with_flag(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(1, 2, 4, 4))
        with no_grad():
            probs = softmax(Tensor(logits), axis=1).data
        feats = rng.normal(size=(1, 2, 4, 4))
        out = refine_pseudo_labels(probs, feats, [], 0.1)
        assert out.prototypes_missing
        np.testing.assert_array_equal(out.labels, probs.argmax(axis=1))
        assert not out.reassigned_mask.any()

    def test_pixel_predicted_as_absent_class_kept(self):
        # only class 0 has a prototype; an uncertain class-1 pixel keeps its label
        probs = np.array([0.4, 0.6]).reshape(2, 1, 1)
        feats = np.array([1.0, 1.0]).reshape(2, 1, 1)
        out = refine_pseudo_labels(
            probs, feats, [Prototype(0, np.array([1.0, 1.0]))], 0.1
        )
        assert out.labels[0, 0] == 1
        assert not out.kept_mask[0, 0]
        assert not out.reassigned_mask[0, 0]


# -- losses -------------------------------------------------------------------


class TestLosses:
    def test_pseudo_label_hand_values(self):
        refined = refine_pseudo_labels(
            np.array([0.8, 0.2]).reshape(2, 1, 1),
            np.ones((2, 1, 1)),
            two_class_protos(),
            LN2 - 1e-9,
        )
        probs = Tensor(np.array([0.8, 0.2]).reshape(2, 1, 1))
        assert pseudo_label_loss(probs, refined).item() == pytest.approx(
            0.22314355131420976, abs=1e-12
        )
        uniform = Tensor(np.full((2, 1, 1), 0.5))
        assert pseudo_label_loss(uniform, refined).item() == pytest.approx(
            LN2, abs=1e-12
        )

    def test_consistency_agreement_is_zero(self):
        main = Tensor(np.random.default_rng(0).random((2, 4, 4)))
        aux = [Tensor(main.data.copy()) for _ in range(4)]
        assert consistency_loss(main, aux).item() == pytest.approx(0.0, abs=1e-15)

    def test_consistency_hand_value_opposite_one_hot(self):
        main = np.zeros((2, 3, 3))
        main[0] = 1.0
        aux_map = np.zeros((2, 3, 3))
        aux_map[1] = 1.0
        aux = [Tensor(aux_map.copy()) for _ in range(4)]
        loss = consistency_loss(Tensor(main), aux)
        assert loss.item() == pytest.approx(1.0, abs=1e-15)

    def test_consistency_hand_value_single_channel_offset(self):
        rng = np.random.default_rng(1)
        main = rng.random((2, 4, 4))
        aux_maps = [main.copy() for _ in range(4)]
        aux_maps[2][0] += 0.1  # one aux, one channel slot, uniform offset
        loss = consistency_loss(Tensor(main), [Tensor(a) for a in aux_maps])
        assert loss.item() == pytest.approx(0.01 / (2 * 4), abs=1e-15)

    def test_consistency_rejects_empty_and_mismatched(self):
        main = Tensor(np.zeros((2, 2, 2)))
        with pytest.raises(ConfigError):
            consistency_loss(main, [])
        with pytest.raises(ValueError):
            consistency_loss(main, [Tensor(np.zeros((2, 3, 3)))])

    def test_consistency_gradient_skips_reference(self):
        main_param_data = np.random.default_rng(2).random((2, 3, 3))
        main = Tensor(main_param_data, requires_grad=True)
        aux = [Tensor(main_param_data + 0.05, requires_grad=True)]
        loss = consistency_loss(main, aux)
        loss.backward()
        assert main.grad is None or not main.grad.any()
        assert aux[0].grad is not None and aux[0].grad.any()

    def test_infomax_hand_value_half_half(self):
        probs = np.zeros((1, 2, 2, 2))
        probs[0, 0, :, 0] = 1.0
        probs[0, 1, :, 1] = 1.0
        loss = infomax_loss(Tensor(probs), 0.1)
        assert loss.item() == pytest.approx(-0.06931471805599453, abs=1e-12)

    def test_infomax_hand_value_uniform(self):
        probs = np.full((1, 2, 4, 4), 0.5)
        loss = infomax_loss(Tensor(probs), 0.1)
        assert loss.item() == pytest.approx(0.6238324625039508, abs=1e-12)

    def test_infomax_collapse_is_zero(self):
        probs = np.zeros((2, 2, 3, 3))
        probs[:, 0] = 1.0
        loss = infomax_loss(Tensor(probs), 0.1)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_infomax_diversity_weight_scales(self):
        probs = np.zeros((1, 2, 2, 2))
        probs[0, 0, :, 0] = 1.0
        probs[0, 1, :, 1] = 1.0
        for beta in (0.0, 0.5, 1.0):
            loss = infomax_loss(Tensor(probs), beta)
            assert loss.item() == pytest.approx(beta * -LN2, abs=1e-12)


class TestAdaptationGradients:
    def test_total_objective_gradcheck(self):
        rng = np.random.default_rng(7)
        image = rng.random((1, 1, 16, 16))
        base = init_network(SegNetConfig(num_classes=2, aux_decoders=0), seed=11)
        net = attach_fresh_aux(base, 2, seed=12)
        drop_seed = 99
        with no_grad():
            main0, _, taps0 = net.forward_with_aux(image, drop_seed)
        protos = compute_prototypes(net, image)
        refined = refine_pseudo_labels(main0.data, taps0.decision.data, protos, 0.4)
        reference = main0.data.copy()

        def loss_fn():
            main, aux, _ = net.forward_with_aux(image, drop_seed)
            total = add(pseudo_label_loss(main, refined), infomax_loss(main, 0.1))
            return add(total, scale(consistency_loss(main, aux, reference), 0.1))

        err = finite_diff_check(loss_fn, net.parameters(), samples=30, seed=0)
        assert err < 1e-3


# -- training loop ------------------------------------------------------------


def tiny_teacher(seed=21):
    return init_network(SegNetConfig(num_classes=2, aux_decoders=0), seed=seed)


def tiny_images(n=5, seed=8):
    return np.random.default_rng(seed).random((n, 1, 16, 16))


class TestRunAdaptation:
    def test_zero_epochs_bit_identical(self):
        teacher = tiny_teacher()
        cfg = AdaptConfig(entropy_threshold=0.2, epochs=0, seed=3)
        result = run_model_adaptation(teacher, tiny_images(), cfg)
        assert result.trace == []
        assert result.net.config.aux_decoders == 0
        before = {p.name: p.data for p in teacher.parameters()}
        after = {p.name: p.data for p in result.net.parameters()}
        assert before.keys() == after.keys()
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])

    def test_determinism(self):
        cfg = AdaptConfig(entropy_threshold=0.2, epochs=2, batch_size=2, seed=4)
        a = run_model_adaptation(tiny_teacher(), tiny_images(), cfg)
        b = run_model_adaptation(tiny_teacher(), tiny_images(), cfg)
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_teacher_left_untouched(self):
        teacher = tiny_teacher()
        snapshot = {p.name: p.data.copy() for p in teacher.parameters()}
        cfg = AdaptConfig(entropy_threshold=0.2, epochs=1, batch_size=2, seed=5)
        run_model_adaptation(teacher, tiny_images(), cfg)
        for p in teacher.parameters():
            np.testing.assert_array_equal(p.data, snapshot[p.name])

    def test_trace_rows_and_finiteness(self):
        cfg = AdaptConfig(entropy_threshold=0.2, epochs=2, batch_size=2, seed=6)
        result = run_model_adaptation(tiny_teacher(), tiny_images(), cfg)
        assert len(result.trace) == 2
        for row in result.trace:
            assert set(row) == {"epoch", "label", "consistency", "infomax", "total"}
            assert all(np.isfinite(v) for v in row.values())
        assert result.trace[0]["consistency"] > 0

    def test_no_aux_branch(self):
        cfg = AdaptConfig(
            entropy_threshold=0.2, aux_decoders=0, epochs=1, batch_size=2, seed=7
        )
        result = run_model_adaptation(tiny_teacher(), tiny_images(), cfg)
        assert result.trace[0]["consistency"] == 0.0

    def test_adapted_net_differs_after_training(self):
        teacher = tiny_teacher()
        cfg = AdaptConfig(entropy_threshold=0.2, epochs=1, batch_size=2, seed=8)
        result = run_model_adaptation(teacher, tiny_images(), cfg)
        changed = any(
            not np.array_equal(pa.data, pb.data)
            for pa, pb in zip(teacher.parameters(), result.net.parameters())
        )
        assert changed

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AdaptConfig(entropy_threshold=0.0)
        with pytest.raises(ConfigError):
            AdaptConfig(entropy_threshold=LN2)
        with pytest.raises(ConfigError):
            AdaptConfig(entropy_threshold=0.2, consistency_weight=-0.1)
        with pytest.raises(ConfigError):
            AdaptConfig(entropy_threshold=0.2, batch_size=0)
        with pytest.raises(ConfigError):
            AdaptConfig(entropy_threshold=0.2, epochs=-1)

    def test_labels_anchored_to_input_network(self):
        # supervision comes from the frozen input net, not the evolving one
        teacher = tiny_teacher()
        images = tiny_images()
        cfg = AdaptConfig(entropy_threshold=0.2, epochs=2, batch_size=2, seed=9)
        result = run_model_adaptation(teacher, images, cfg)
        protos = compute_prototypes(teacher, images)
        expected = refine_pseudo_labels(
            teacher.predict_proba(images),
            teacher.decision_features(images),
            protos,
            cfg.entropy_threshold,
        )
        np.testing.assert_array_equal(result.refined.labels, expected.labels)
        np.testing.assert_array_equal(result.refined.kept_mask, expected.kept_mask)

    def test_organ_thresholds_table(self):
        assert ORGAN_ENTROPY_THRESHOLDS == {"liver": 0.1, "spleen": 0.4, "kidney": 0.2}
        for value in ORGAN_ENTROPY_THRESHOLDS.values():
            assert 0 < value < LN2
