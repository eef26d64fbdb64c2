"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale pipeline
(criteria 5-7) trains the full three-stage recipe from configs/desk.yaml on
the bundled synthetic dataset; everything runs on a CPU.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from vireid import losses
from vireid.cli import run_protocol, train_pipeline
from vireid.config import load_config
from vireid.data import AugmentationConfig, SyntheticSpec, synthesize_dataset
from vireid.encoders import MiniEncoderConfig
from vireid.evaluation import cmc_map_minp, rank
from vireid.inference import cross_modal_alignment, embed_samples
from vireid.losses import HsaWeights, Stage3Batch
from vireid.model import Stage, build_model
from vireid.training import (Schedule, StagePlan, checkpoint_load, make_training_data,
                             restore_model, run_stage_hsa, run_stage_ife, run_stage_tsg)

from oracles import (oracle_average_precision, oracle_ce_i2t, oracle_hsa, oracle_i2t,
                     oracle_id, oracle_similarity, oracle_stage1, oracle_t2i, oracle_wrt,
                     random_pk_batch)
from test_gradients import check_grad

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk.yaml"

# Desk-run thresholds, frozen from the implementation pilot run
# (seed 7, data seed 0: baseline rank-1 0.251, full pipeline rank-1 0.910,
# stage-1+3 variant 0.874, alignment 0.572 -> 0.909):
MIN_GAIN_OVER_BASELINE = 0.20
MIN_ABSOLUTE_RANK1 = 0.60
CHANCE_RANK1 = 0.10
ORDERING_TOLERANCE = 0.02
TIME_BUDGET_SECONDS = 600.0


def relative_error(a, b):
    scale = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / scale


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Train the desk recipe once: full pipeline, the stage-1+3 ablation, and
    embeddings of every stage checkpoint on held-out data."""
    cfg = load_config(DESK_CONFIG)
    base_dir = tmp_path_factory.mktemp("desk")

    start = time.monotonic()
    full = train_pipeline(cfg, base_dir / "full", [Stage.TSG, Stage.IFE, Stage.HSA])
    full_seconds = time.monotonic() - start

    tsg_hsa = train_pipeline(cfg, base_dir / "tsg_hsa", [Stage.TSG, Stage.HSA])

    eval_samples = cfg.eval_samples()

    def rank1_and_embeddings(model):
        emb = embed_samples(model, eval_samples, cfg.augmentation)
        report = run_protocol(cfg.eval, emb)
        return report.rank_at(1), emb

    run_dir = Path(full["run_dir"])
    baseline_rank1, baseline_emb = rank1_and_embeddings(
        cfg.build_model(cfg.synthetic.num_identities))
    tsg_epochs = cfg.plans[Stage.TSG].epochs
    ife_epochs = cfg.plans[Stage.IFE].epochs
    post_tsg = restore_model(checkpoint_load(run_dir / "stage1" / f"epoch_{tsg_epochs:04d}.ckpt"))
    _, post_tsg_emb = rank1_and_embeddings(post_tsg)
    post_ife = restore_model(checkpoint_load(run_dir / "stage2" / f"epoch_{ife_epochs:04d}.ckpt"))
    post_ife_rank1, post_ife_emb = rank1_and_embeddings(post_ife)

    # raw-pixel cross-modal nearest neighbour on the same held-out images
    vis = [s for s in eval_samples if s.modality == "visible"]
    ir = [s for s in eval_samples if s.modality == "infrared"]
    v = np.stack([s.image.reshape(-1) for s in vis])
    r = np.stack([s.image.reshape(-1) for s in ir])
    v_ids = np.array([s.identity for s in vis])
    r_ids = np.array([s.identity for s in ir])
    nearest = v_ids[((r[:, None, :] - v[None, :, :]) ** 2).sum(-1).argmin(axis=1)]
    pixel_nn_rank1 = float((nearest == r_ids).mean())

    return {
        "config": cfg,
        "full_rank1": full["rank1"],
        "full_seconds": full_seconds,
        "tsg_hsa_rank1": tsg_hsa["rank1"],
        "baseline_rank1": baseline_rank1,
        "post_ife_rank1": post_ife_rank1,
        "pixel_nn_rank1": pixel_nn_rank1,
        "alignment_post_tsg": cross_modal_alignment(post_tsg_emb),
        "alignment_post_ife": cross_modal_alignment(post_ife_emb),
        "run_dir": run_dir,
    }


def test_criterion_1_loss_oracle_suite():
    """Every loss operation matches a literal brute-force transcription on
    at least 100 random small batches within relative 1e-6, in under 10 s."""
    rng = np.random.default_rng(20240901)
    start = time.monotonic()
    batches = 0
    while batches < 110:
        num_ids = int(rng.integers(2, 4))
        instances = int(rng.integers(1, 3))
        dim = int(rng.integers(3, 9))
        if num_ids * instances > 6:
            continue
        img, text, table, labels, scale = random_pk_batch(rng, num_ids, instances, dim)
        a = img[0]
        b = text[0]
        assert relative_error(float(losses.similarity(a, b, scale)),
                              oracle_similarity(a, b, scale)) < 1e-6
        assert relative_error(float(losses.contrastive_i2t(img, text, labels, scale)),
                              oracle_i2t(img, text, labels, scale)) < 1e-6
        assert relative_error(float(losses.contrastive_t2i(img, text, labels, scale)),
                              oracle_t2i(img, text, labels, scale)) < 1e-6
        assert relative_error(float(losses.stage1_loss(img, text, labels, scale)),
                              oracle_stage1(img, text, labels, scale)) < 1e-6
        assert relative_error(float(losses.stage2_loss(img, text, labels, scale)),
                              oracle_stage1(img, text, labels, scale)) < 1e-6
        assert relative_error(float(losses.ce_i2t(img, table, labels, scale)),
                              oracle_ce_i2t(img, table, labels, scale)) < 1e-6
        logits = torch.tensor(rng.standard_normal((len(labels), num_ids)), dtype=torch.float64)
        assert relative_error(float(losses.id_loss(logits, labels)),
                              oracle_id(logits, labels)) < 1e-6
        if instances >= 2:
            feats = torch.tensor(rng.standard_normal((len(labels), dim)), dtype=torch.float64)
            assert relative_error(float(losses.wrt_loss(feats, labels)),
                                  oracle_wrt(feats, labels)) < 1e-6
            n = len(labels)
            v_raw = torch.tensor(rng.standard_normal((n, dim)), dtype=torch.float64)
            r_raw = torch.tensor(rng.standard_normal((n, dim)), dtype=torch.float64)
            batch3 = Stage3Batch(
                visible_feats=v_raw / v_raw.norm(dim=1, keepdim=True),
                infrared_feats=r_raw / r_raw.norm(dim=1, keepdim=True),
                visible_raw=v_raw, infrared_raw=r_raw,
                visible_labels=labels, infrared_labels=labels.clone())
            lv = torch.tensor(rng.standard_normal((n, num_ids)), dtype=torch.float64)
            lr = torch.tensor(rng.standard_normal((n, num_ids)), dtype=torch.float64)
            ours = float(losses.hsa_loss(batch3, table, lv, lr, HsaWeights(0.05, 0.05), scale))
            expected = oracle_hsa(batch3.visible_feats, batch3.infrared_feats, v_raw, r_raw,
                                  labels, labels, table, lv, lr, 0.05, 0.05, scale)
            assert relative_error(ours, expected) < 1e-6
        batches += 1
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"oracle suite took {elapsed:.1f}s"
    print(f"\nACCEPTANCE 1 (loss oracle suite, {batches} batches in {elapsed:.1f}s): PASS")


def test_criterion_2_gradient_suite():
    """Analytic gradients match central finite differences (h=1e-5) with
    relative error < 1e-4 on at least 20 random fixtures."""
    rng = np.random.default_rng(77)
    fixtures = 0
    for trial in range(4):
        img = torch.tensor(rng.standard_normal((4, 5)), dtype=torch.float64)
        _, text, table, labels, scale = random_pk_batch(rng, 2, 2, 5)
        check_grad(lambda x: losses.contrastive_i2t(x, text, labels, scale), img); fixtures += 1
        check_grad(lambda x: losses.contrastive_t2i(x, text, labels, scale), img); fixtures += 1
        check_grad(lambda x: losses.stage1_loss(x, text, labels, scale), img); fixtures += 1
        check_grad(lambda x: losses.ce_i2t(x, table, labels, scale), img); fixtures += 1
        logits = torch.tensor(rng.standard_normal((4, 2)), dtype=torch.float64)
        check_grad(lambda z: losses.id_loss(z, labels), logits); fixtures += 1
        check_grad(lambda x: losses.wrt_loss(x, labels), img); fixtures += 1
    assert fixtures >= 20
    print(f"\nACCEPTANCE 2 (gradient suite, {fixtures} fixtures): PASS")


def test_criterion_3_freeze_schedule():
    """After a full epoch of each stage, every out-of-stage parameter is
    bit-identical and the in-stage set changed."""
    cfg = MiniEncoderConfig(feature_dim=32, token_dim=16, stem_width=8, pool_grid=(4, 2))
    model = build_model(cfg, num_identities=4, num_prompt_tokens=4, seed=2)
    with torch.no_grad():
        model.logit_scale.fill_(math.log(10.0))
    samples = synthesize_dataset(SyntheticSpec(
        num_identities=4, images_per_identity=6, image_size=(32, 16), noise_std=0.04,
        jitter=1, seed=4))
    data = make_training_data(samples, 2, 2, seed=0,
                              augmentation=AugmentationConfig(target_size=(32, 16),
                                                              flip_prob=0.0, pad_pixels=1))

    def one_epoch_plan(stage):
        kind = "warmup_step" if stage is Stage.HSA else "warmup_cosine"
        return StagePlan(stage=stage, epochs=1,
                         schedule=Schedule(kind=kind, base_lr=5e-3, warmup_start_lr=2e-4,
                                           warmup_epochs=0, total_epochs=1), seed=0)

    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    record = run_stage_tsg(model, data, one_epoch_plan(Stage.TSG))
    changed = {k for k, v in model.state_dict().items() if not torch.equal(v, state[k])}
    assert changed == {"prompt_bank.tokens"}, changed

    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    run_stage_ife(model, data, one_epoch_plan(Stage.IFE), record.text_cache)
    changed = {k for k, v in model.state_dict().items() if not torch.equal(v, state[k])}
    expected_ife = {k for k in state if k.startswith("shared_encoder.")}
    assert changed == expected_ife, changed ^ expected_ife

    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    run_stage_hsa(model, data, one_epoch_plan(Stage.HSA))
    changed = {k for k, v in model.state_dict().items() if not torch.equal(v, state[k])}
    assert not any(k.startswith("shared_encoder.") for k in changed)
    assert "logit_scale" not in changed
    assert "prompt_bank.prefix" not in changed and "prompt_bank.suffix" not in changed
    for prefix in ("visible_encoder.", "infrared_encoder.", "text_encoder.", "classifier."):
        assert any(k.startswith(prefix) for k in changed), prefix
    assert "prompt_bank.tokens" in changed
    print("\nACCEPTANCE 3 (freeze schedule, all three stages): PASS")


def test_criterion_4_metric_oracle_suite():
    """CMC/mAP/mINP reproduce the hand-computed fixtures exactly and match
    exhaustive-definition oracles on random galleries of size <= 20."""
    hits, ap, inp = cmc_map_minp(np.array([5, 1, 5, 2]), 5, max_rank=4)
    assert ap == pytest.approx(0.833333, abs=1e-6)
    assert inp == pytest.approx(2 / 3, abs=1e-9)
    assert hits[0] == 1.0

    hits, ap, inp = cmc_map_minp(np.array([9, 1, 2]), 9, max_rank=3)
    assert ap == 1.0 and inp == 1.0 and hits[0] == 1.0

    hits, ap, inp = cmc_map_minp(np.array([1, 2, 3, 4, 9]), 9, max_rank=5)
    assert ap == pytest.approx(0.2) and inp == pytest.approx(0.2)
    assert hits.tolist() == [0, 0, 0, 0, 1]

    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(2, 21))
        ids = rng.integers(0, 5, size=n)
        query_id = int(ids[rng.integers(0, n)])
        hits, ap, inp = cmc_map_minp(ids, query_id, max_rank=n)
        assert ap == pytest.approx(oracle_average_precision(ids, query_id), abs=1e-12)
        positives = np.flatnonzero(ids == query_id) + 1
        assert inp == pytest.approx(len(positives) / positives[-1], abs=1e-12)
        assert (np.diff(hits) >= 0).all()
        checked += 1
    # ranking against the exhaustive sort oracle
    q = rng.standard_normal((6, 8))
    g = rng.standard_normal((15, 8))
    order = rank(q, g)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    sims = qn @ gn.T
    for qi in range(6):
        assert order[qi].tolist() == sorted(range(15), key=lambda j: (-sims[qi, j], j))
    print(f"\nACCEPTANCE 4 (metric oracles, {checked} random galleries): PASS")


def test_criterion_5_desk_run(desk_run):
    """The end-to-end desk run finishes inside the time budget and the final
    infrared-to-visible rank-1 clears the frozen thresholds."""
    assert desk_run["full_seconds"] < TIME_BUDGET_SECONDS, desk_run["full_seconds"]
    gain = desk_run["full_rank1"] - desk_run["baseline_rank1"]
    assert gain >= MIN_GAIN_OVER_BASELINE, (desk_run["full_rank1"], desk_run["baseline_rank1"])
    assert desk_run["full_rank1"] >= CHANCE_RANK1 + 0.50
    assert desk_run["full_rank1"] >= MIN_ABSOLUTE_RANK1
    # separability oracle linkage: raw-pixel cross-modal matching stays below
    # the trained model; the third stage improves on the stage-2 checkpoint
    assert desk_run["pixel_nn_rank1"] < desk_run["full_rank1"]
    assert desk_run["full_rank1"] > desk_run["post_ife_rank1"]
    print(f"\nACCEPTANCE 5 (desk run {desk_run['full_seconds']:.0f}s, "
          f"rank-1 {desk_run['full_rank1']:.3f} vs baseline "
          f"{desk_run['baseline_rank1']:.3f}, pixel NN {desk_run['pixel_nn_rank1']:.3f}, "
          f"stage-2 checkpoint {desk_run['post_ife_rank1']:.3f}): PASS")


def test_criterion_6_stage_contribution_trend(desk_run):
    """Rank-1 ordering: full pipeline >= stage-1+3 variant >= frozen baseline,
    each gap within a 2-point tolerance band."""
    full = desk_run["full_rank1"]
    partial = desk_run["tsg_hsa_rank1"]
    base = desk_run["baseline_rank1"]
    assert full >= partial - ORDERING_TOLERANCE, (full, partial)
    assert partial >= base - ORDERING_TOLERANCE, (partial, base)
    print(f"\nACCEPTANCE 6 (stage trend {base:.3f} <= {partial:.3f} <= {full:.3f} "
          f"within {ORDERING_TOLERANCE}): PASS")


def test_criterion_7_alignment_increases(desk_run):
    """Mean same-identity cross-modal cosine on held-out data strictly
    increases from the stage-1 checkpoint to the stage-2 checkpoint."""
    before = desk_run["alignment_post_tsg"]
    after = desk_run["alignment_post_ife"]
    assert after > before, (before, after)
    print(f"\nACCEPTANCE 7 (alignment {before:.3f} -> {after:.3f}): PASS")


def test_criterion_8_paper_scale_documented_not_asserted():
    """Paper-scale presets ship faithful hyperparameters; no numeric target
    is attached to large-dataset results, and the README says why."""
    sysu = load_config(ROOT / "configs" / "paper_sysu.yaml")
    regdb = load_config(ROOT / "configs" / "paper_regdb.yaml")
    assert sysu.plans[Stage.TSG].epochs == 120
    assert sysu.plans[Stage.IFE].epochs == 120
    assert sysu.plans[Stage.HSA].epochs == 180
    assert 2 * sysu.num_ids_per_batch * sysu.instances_per_modality == 32
    assert 2 * regdb.num_ids_per_batch * regdb.instances_per_modality == 16
    for cfg in (sysu, regdb):
        assert cfg.plans[Stage.HSA].hsa_weights.lambda1 == pytest.approx(0.05)
        assert cfg.plans[Stage.HSA].hsa_weights.lambda2 == pytest.approx(0.05)
        assert cfg.augmentation.target_size == (288, 144)
    readme = (ROOT / "README.md").read_text(encoding="utf-8")
    assert "paper_sysu.yaml" in readme and "paper_regdb.yaml" in readme
    assert "not reproducible" in readme.lower()
    print("\nACCEPTANCE 8 (paper-scale presets shipped, limitation documented): PASS")


def test_criterion_9_resume_equivalence(tmp_path):
    """Checkpoint save/load mid-training reproduces uninterrupted training
    bit-identically."""
    cfg = MiniEncoderConfig(feature_dim=32, token_dim=16, stem_width=8, pool_grid=(4, 2))
    samples = synthesize_dataset(SyntheticSpec(
        num_identities=4, images_per_identity=6, image_size=(32, 16), noise_std=0.04,
        jitter=1, seed=4))
    data = make_training_data(samples, 2, 2, seed=0,
                              augmentation=AugmentationConfig(target_size=(32, 16),
                                                              flip_prob=0.0, pad_pixels=1))
    plan = StagePlan(stage=Stage.IFE, epochs=3,
                     schedule=Schedule(kind="warmup_cosine", base_lr=5e-3,
                                       warmup_start_lr=2e-4, warmup_epochs=1,
                                       total_epochs=3), seed=0)

    def fresh_model():
        model = build_model(cfg, num_identities=4, num_prompt_tokens=4, seed=2)
        with torch.no_grad():
            model.logit_scale.fill_(math.log(10.0))
        return model

    cache = fresh_model().all_text_features().detach()
    straight = run_stage_ife(fresh_model(), data, plan, cache, run_dir=tmp_path)
    mid = checkpoint_load(tmp_path / "stage2" / "epoch_0002.ckpt")
    resumed_model = restore_model(mid)
    resumed = run_stage_ife(resumed_model, data, plan, mid.text_cache, resume=mid)
    assert resumed.epoch == straight.epoch == 3
    for key, value in straight.model_state.items():
        assert torch.equal(value, resumed.model_state[key]), key
    for (sk, sv), (rk, rv) in zip(sorted(straight.optimizer_state["state"].items()),
                                  sorted(resumed.optimizer_state["state"].items())):
        assert sk == rk
        assert torch.equal(sv["exp_avg"], rv["exp_avg"])
        assert torch.equal(sv["exp_avg_sq"], rv["exp_avg_sq"])
    print("\nACCEPTANCE 9 (bit-identical resume): PASS")
