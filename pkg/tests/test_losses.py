"""Loss functions against hand-computed values and literal brute-force
transcriptions of their defining formulas."""

import math

import numpy as np
import pytest
import torch

from vireid import losses
from vireid.errors import ValidationError
from vireid.losses import HsaWeights, Stage3Batch

from oracles import (oracle_ce_i2t, oracle_hsa, oracle_i2t, oracle_id, oracle_similarity,
                     oracle_stage1, oracle_t2i, oracle_wrt, random_pk_batch, unit_rows)


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


class TestSimilarity:
    def test_self_similarity_unit(self):
        a = t64([1.0, 0.0])
        assert float(losses.similarity(a, a, 0.0)) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert float(losses.similarity(t64([1.0, 0.0]), t64([0.0, 1.0]))) == pytest.approx(0.0)

    def test_hand_scaled(self):
        a = t64([1.0, 0.0])
        b = t64([math.sqrt(2) / 2, math.sqrt(2) / 2])
        value = float(losses.similarity(a, b, math.log(2)))
        assert value == pytest.approx(2 * 0.70711, abs=1e-4)
        assert value == pytest.approx(oracle_similarity(a, b, math.log(2)), rel=1e-12)

    def test_unnormalized_inputs(self):
        value = float(losses.similarity(t64([3.0, 0.0]), t64([0.5, 0.0]), 0.0))
        assert value == pytest.approx(1.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValidationError):
            losses.similarity(t64([0.0, 0.0]), t64([1.0, 0.0]))


class TestContrastiveI2T:
    def test_single_element_is_zero(self):
        f = unit_rows(np.random.default_rng(0), 1, 4)
        assert float(losses.contrastive_i2t(f, f, [0])) == pytest.approx(0.0)

    def test_identity_similarity_matrix(self):
        # unit basis vectors give post-scale similarities [[1,0],[0,1]]
        f = t64([[1.0, 0.0], [0.0, 1.0]])
        value = float(losses.contrastive_i2t(f, f, [0, 1], 0.0))
        assert value == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-9)
        assert value == pytest.approx(0.313262, abs=1e-6)

    def test_duplicate_identity_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        img = unit_rows(rng, 4, 6)
        table = unit_rows(rng, 2, 6)
        labels = [0, 0, 1, 0]  # identity 0 repeated: its text row appears thrice
        text = table[torch.tensor(labels)]
        ours = float(losses.contrastive_i2t(img, text, labels, 1.3))
        assert ours == pytest.approx(oracle_i2t(img, text, labels, 1.3), rel=1e-9)

    def test_unique_identity_denominator_flag(self):
        rng = np.random.default_rng(8)
        img = unit_rows(rng, 4, 6)
        table = unit_rows(rng, 2, 6)
        labels = [0, 0, 1, 1]
        text = table[torch.tensor(labels)]
        collapsed = float(losses.contrastive_i2t(img, text, labels, 0.7, unique_identities=True))
        # oracle: denominator over one text row per identity
        total = 0.0
        for k in range(4):
            num = math.exp(oracle_similarity(img[k], table[labels[k]], 0.7))
            den = sum(math.exp(oracle_similarity(img[k], table[i], 0.7)) for i in range(2))
            total += math.log(num / den)
        assert collapsed == pytest.approx(-total / 4, rel=1e-9)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValidationError):
            losses.contrastive_i2t(torch.zeros((0, 4)), torch.zeros((0, 4)), [])


class TestContrastiveT2I:
    def test_single_element_is_zero(self):
        f = unit_rows(np.random.default_rng(1), 1, 4)
        assert float(losses.contrastive_t2i(f, f, [0])) == pytest.approx(0.0)

    def test_shared_identity_equal_similarities(self):
        # two samples, same identity, identical features: each inner log = log(1/2)
        f = t64([[1.0, 0.0], [1.0, 0.0]])
        value = float(losses.contrastive_t2i(f, f, [0, 0], 0.0))
        assert value == pytest.approx(math.log(2), rel=1e-9)

    def test_random_batch_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        img, text, _, labels, scale = random_pk_batch(rng, 2, 2, 5)
        ours = float(losses.contrastive_t2i(img, text, labels, scale))
        assert ours == pytest.approx(oracle_t2i(img, text, labels, scale), rel=1e-6)


class TestStageTotals:
    def test_stage1_is_sum_of_parts(self):
        rng = np.random.default_rng(3)
        img, text, _, labels, scale = random_pk_batch(rng, 3, 2, 6)
        total = losses.stage1_loss(img, text, labels, scale)
        parts = (losses.contrastive_i2t(img, text, labels, scale)
                 + losses.contrastive_t2i(img, text, labels, scale))
        assert float(total) == pytest.approx(float(parts), rel=1e-12)
        assert float(total) == pytest.approx(oracle_stage1(img, text, labels, scale), rel=1e-6)

    def test_stage2_mirrors_stage1_on_infrared_features(self):
        rng = np.random.default_rng(4)
        img, text, _, labels, scale = random_pk_batch(rng, 2, 3, 4)
        assert float(losses.stage2_loss(img, text, labels, scale)) == pytest.approx(
            float(losses.stage1_loss(img, text, labels, scale)), rel=1e-12)

    def test_single_element_zero(self):
        f = unit_rows(np.random.default_rng(5), 1, 4)
        assert float(losses.stage1_loss(f, f, [0])) == pytest.approx(0.0)
        assert float(losses.stage2_loss(f, f, [0])) == pytest.approx(0.0)


class TestCeI2T:
    def test_single_identity_zero(self):
        f = unit_rows(np.random.default_rng(6), 3, 4)
        t = unit_rows(np.random.default_rng(7), 1, 4)
        assert float(losses.ce_i2t(f, t, [0, 0, 0])) == pytest.approx(0.0)

    def test_large_margin_closed_form(self):
        # orthonormal text rows, image equals its own text row, scale ln 10:
        # similarities are (10, 0, 0, 0) to the true identity
        table = t64(np.eye(4))
        img = table[:1]
        value = float(losses.ce_i2t(img, table, [0], math.log(10)))
        expected = math.log(1 + 3 * math.exp(-10))
        assert value == pytest.approx(expected, rel=1e-9)
        assert value == pytest.approx(1.36e-4, abs=2e-6)

    def test_uniform_similarities(self):
        table = t64(np.eye(5))[:4]
        img = t64([[0.0, 0.0, 0.0, 0.0, 1.0]])  # orthogonal to every text row
        value = float(losses.ce_i2t(img, table, [2], 0.0))
        assert value == pytest.approx(math.log(4), rel=1e-9)

    def test_row_count_validation(self):
        f = unit_rows(np.random.default_rng(8), 2, 4)
        t = unit_rows(np.random.default_rng(9), 3, 4)
        with pytest.raises(ValidationError):
            losses.ce_i2t(f, t, [0, 1], num_identities=4)

    def test_random_matches_bruteforce(self):
        rng = np.random.default_rng(10)
        img, _, table, labels, scale = random_pk_batch(rng, 3, 2, 5)
        ours = float(losses.ce_i2t(img, table, labels, scale))
        assert ours == pytest.approx(oracle_ce_i2t(img, table, labels, scale), rel=1e-6)


class TestIdLoss:
    def test_large_margin(self):
        logits = t64([[10.0, 0.0, 0.0, 0.0]])
        value = float(losses.id_loss(logits, [0]))
        assert value == pytest.approx(math.log(1 + 3 * math.exp(-10)), rel=1e-9)
        assert value == pytest.approx(1.36e-4, abs=2e-6)

    def test_uniform(self):
        value = float(losses.id_loss(t64([[1.0, 1.0, 1.0, 1.0]]), [2]))
        assert value == pytest.approx(math.log(4), rel=1e-12)

    def test_single_class_zero(self):
        assert float(losses.id_loss(t64([[3.07]]), [0])) == pytest.approx(0.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            losses.id_loss(t64([[1.0, 2.0]]), [2])

    def test_label_smoothing_changes_value(self):
        logits = t64([[4.0, 0.0, 0.0, 0.0]])
        plain = float(losses.id_loss(logits, [0]))
        smooth = float(losses.id_loss(logits, [0], smoothing=0.1))
        assert smooth > plain

    def test_random_matches_bruteforce(self):
        rng = np.random.default_rng(11)
        logits = t64(rng.standard_normal((5, 3)))
        labels = [0, 1, 2, 0, 1]
        assert float(losses.id_loss(logits, labels)) == pytest.approx(
            oracle_id(logits, labels), rel=1e-9)


class TestWrtLoss:
    def test_equal_pos_neg_distance(self):
        # regular tetrahedron: every pair sits at the same distance, so each
        # anchor's weighted positive distance equals its weighted negative
        # distance and the soft margin sees a zero argument
        feats = t64([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
        labels = [0, 0, 1, 1]
        value = float(losses.wrt_loss(feats, labels))
        assert value == pytest.approx(math.log(2), rel=1e-9)
        assert value == pytest.approx(0.693147, abs=1e-6)

    def test_zero_pos_one_neg(self):
        # anchors 0, 1 coincide (d_p = 0); negatives at distance 2
        feats = t64([[0.0], [0.0], [2.0], [2.0]])
        labels = [0, 0, 1, 1]
        value = float(losses.wrt_loss(feats, labels))
        assert value == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-5)
        assert value == pytest.approx(0.126928, abs=1e-5)

    def test_two_negatives_hand_weighted(self):
        # hand arithmetic for one anchor with a coincident positive and
        # negatives at distances 1 and 3
        w1 = math.exp(-1) / (math.exp(-1) + math.exp(-3))
        w3 = math.exp(-3) / (math.exp(-1) + math.exp(-3))
        dn = w1 * 1 + w3 * 3
        assert dn == pytest.approx(1.23840, abs=1e-5)
        assert math.log(1 + math.exp(-dn)) == pytest.approx(0.254518, abs=1e-4)
        # the batch realizing that anchor (anchors 0 and 1 both see it)
        feats = t64([[0.0], [0.0], [1.0], [3.0]])
        labels = [0, 0, 1, 1]
        ours = float(losses.wrt_loss(feats, labels))
        assert ours == pytest.approx(oracle_wrt(feats, labels), abs=1e-5)

    def test_missing_positive_names_anchor(self):
        feats = t64([[0.0], [1.0], [2.0]])
        with pytest.raises(ValidationError, match=r"\[2\]"):
            losses.wrt_loss(feats, [0, 0, 1])

    def test_missing_negative_rejected(self):
        feats = t64([[0.0], [1.0]])
        with pytest.raises(ValidationError, match="negative"):
            losses.wrt_loss(feats, [0, 0])

    def test_random_matches_bruteforce(self):
        rng = np.random.default_rng(12)
        feats = t64(rng.standard_normal((6, 4)))
        labels = [0, 0, 1, 1, 2, 2]
        assert float(losses.wrt_loss(feats, labels)) == pytest.approx(
            oracle_wrt(feats, labels), rel=1e-6)


def _random_stage3(rng, num_ids=3, instances=2, dim=5, num_total_ids=4):
    n = num_ids * instances
    labels = torch.tensor([i % num_total_ids for i in range(num_ids) for _ in range(instances)])
    v_raw = torch.tensor(rng.standard_normal((n, dim)), dtype=torch.float64)
    r_raw = torch.tensor(rng.standard_normal((n, dim)), dtype=torch.float64)
    batch = Stage3Batch(
        visible_feats=v_raw / v_raw.norm(dim=1, keepdim=True),
        infrared_feats=r_raw / r_raw.norm(dim=1, keepdim=True),
        visible_raw=v_raw, infrared_raw=r_raw,
        visible_labels=labels, infrared_labels=labels.clone(),
    )
    table = unit_rows(rng, num_total_ids, dim)
    logits_v = torch.tensor(rng.standard_normal((n, num_total_ids)), dtype=torch.float64)
    logits_r = torch.tensor(rng.standard_normal((n, num_total_ids)), dtype=torch.float64)
    return batch, table, logits_v, logits_r


class TestHsaLoss:
    def test_zero_weights_reduce_to_id_wrt(self):
        rng = np.random.default_rng(13)
        batch, table, lv, lr = _random_stage3(rng)
        total = losses.hsa_loss(batch, table, lv, lr, HsaWeights(0.0, 0.0), 0.5)
        expected = (losses.id_loss(torch.cat([lv, lr]), batch.pooled_labels)
                    + losses.wrt_loss(batch.pooled_raw, batch.pooled_labels))
        assert float(total) == pytest.approx(float(expected), rel=1e-12)

    def test_component_sum_fixture(self):
        rng = np.random.default_rng(14)
        batch, table, lv, lr = _random_stage3(rng, num_ids=2, instances=2)
        w = HsaWeights(0.05, 0.05)
        total = float(losses.hsa_loss(batch, table, lv, lr, w, 0.8))
        expected = oracle_hsa(batch.visible_feats, batch.infrared_feats, batch.visible_raw,
                              batch.infrared_raw, batch.visible_labels, batch.infrared_labels,
                              table, lv, lr, 0.05, 0.05, 0.8)
        assert total == pytest.approx(expected, rel=1e-6)

    def test_lambda_linearity(self):
        rng = np.random.default_rng(15)
        batch, table, lv, lr = _random_stage3(rng)
        base = float(losses.hsa_loss(batch, table, lv, lr, HsaWeights(0.05, 0.05), 0.5))
        doubled = float(losses.hsa_loss(batch, table, lv, lr, HsaWeights(0.10, 0.05), 0.5))
        ce_v = float(losses.ce_i2t(batch.visible_feats, table, batch.visible_labels, 0.5))
        assert doubled - base == pytest.approx(0.05 * ce_v, rel=1e-9)

    def test_unbalanced_batch_rejected(self):
        rng = np.random.default_rng(16)
        v = unit_rows(rng, 4, 5)
        r = unit_rows(rng, 2, 5)
        with pytest.raises(ValidationError):
            Stage3Batch(visible_feats=v, infrared_feats=r, visible_raw=v, infrared_raw=r,
                        visible_labels=torch.zeros(4, dtype=torch.long),
                        infrared_labels=torch.zeros(2, dtype=torch.long))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            HsaWeights(-0.1, 0.0)


class TestLossProperties:
    def test_non_negativity(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            img, text, table, labels, scale = random_pk_batch(rng, 2, 2, 4)
            assert float(losses.contrastive_i2t(img, text, labels, scale)) >= 0
            assert float(losses.contrastive_t2i(img, text, labels, scale)) >= 0
            assert float(losses.ce_i2t(img, table, labels, scale)) >= 0
            logits = torch.tensor(rng.standard_normal((len(labels), 2)), dtype=torch.float64)
            assert float(losses.id_loss(logits, labels)) >= 0
            feats = torch.tensor(rng.standard_normal((len(labels), 4)), dtype=torch.float64)
            assert float(losses.wrt_loss(feats, labels)) >= 0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(18)
        img, text, table, labels, scale = random_pk_batch(rng, 3, 2, 5)
        perm = torch.tensor(rng.permutation(len(labels)).copy())
        feats_raw = torch.tensor(rng.standard_normal((len(labels), 5)), dtype=torch.float64)
        pairs = [
            (losses.contrastive_i2t(img, text, labels, scale),
             losses.contrastive_i2t(img[perm], text[perm], labels[perm], scale)),
            (losses.contrastive_t2i(img, text, labels, scale),
             losses.contrastive_t2i(img[perm], text[perm], labels[perm], scale)),
            (losses.ce_i2t(img, table, labels, scale),
             losses.ce_i2t(img[perm], table, labels[perm], scale)),
            (losses.wrt_loss(feats_raw, labels),
             losses.wrt_loss(feats_raw[perm], labels[perm])),
        ]
        for original, shuffled in pairs:
            assert abs(float(original) - float(shuffled)) < 1e-9

    def test_minimum_at_alignment(self):
        # rotating each image feature toward its own text feature decreases
        # the image-to-text loss monotonically (two orthogonal identities)
        text = t64([[1.0, 0.0], [0.0, 1.0]])
        labels = [0, 1]
        previous = None
        for step in range(6):
            angle = math.pi / 4 * (1 - step / 5)  # from 45 degrees to aligned
            img = t64([[math.cos(angle), math.sin(angle)],
                       [math.sin(angle), math.cos(angle)]])
            value = float(losses.contrastive_i2t(img, text, labels, 1.0))
            if previous is not None:
                assert value < previous
            previous = value
