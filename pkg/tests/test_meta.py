"""Episodic training loops, the IoU metric, held-out evaluation, and the
cross-domain protocol."""

import dataclasses
import json

import numpy as np
import pytest

from cwtseg.adaptation import InnerLoopConfig, init_classifier, init_cwt
from cwtseg.backbone import PretrainConfig, encode, freeze, pretrain
from cwtseg.checkpoint import hash_tensors
from cwtseg.errors import ConfigError
from cwtseg.meta import (
    ABLATION_MODES,
    EvalProtocol,
    MetaTrainConfig,
    cross_domain_eval,
    episode_counts,
    meta_test,
    meta_train,
    meta_train_whole_model,
    miou,
)
from cwtseg.taskgen import (
    DatasetSpec,
    SplitSpec,
    VariationKnobs,
    generate_dataset,
    sample_episode,
    split_classes,
)
from cwtseg.tensor import make_rng


def record(class_id, fg_i, fg_u, bg_i=0, bg_u=0):
    return {"class_id": class_id, "fg_intersection": fg_i, "fg_union": fg_u,
            "bg_intersection": bg_i, "bg_union": bg_u}


class TestMiou:
    def test_worked_example_all_fg_vs_half_fg(self):
        pred = np.ones((32, 32), dtype=np.uint8)
        true = np.zeros((32, 32), dtype=np.uint8)
        true[:16] = 1
        counts = episode_counts(pred, true)
        assert counts["fg_intersection"] == 512
        assert counts["fg_union"] == 1024
        assert miou([record(1, counts["fg_intersection"], counts["fg_union"])]) == 0.5

    def test_classes_enter_mean_unweighted(self):
        # IoUs 0.2 (tiny class) and 0.8 (huge class) average to exactly 0.5
        recs = [record(1, 2, 10), record(2, 8000, 10000)]
        assert miou(recs) == pytest.approx(0.5, abs=1e-15)

    def test_within_class_counts_are_summed_before_dividing(self):
        recs = [record(3, 1, 10), record(3, 4, 5)]
        assert miou(recs) == pytest.approx(5 / 15)
        assert miou(recs) != pytest.approx((0.1 + 0.8) / 2)

    def test_matches_naive_pixel_loop(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            pred = rng.integers(0, 2, size=(17, 23)).astype(np.uint8)
            true = rng.integers(0, 2, size=(17, 23)).astype(np.uint8)
            counts = episode_counts(pred, true)
            fi = fu = bi = bu = 0
            for r in range(17):
                for c in range(23):
                    p, t = pred[r, c] == 1, true[r, c] == 1
                    fi += p and t
                    fu += p or t
                    bi += (not p) and (not t)
                    bu += (not p) or (not t)
            assert counts == {"fg_intersection": fi, "fg_union": fu,
                              "bg_intersection": bi, "bg_union": bu}
            got = miou([record(1, counts["fg_intersection"], counts["fg_union"])])
            assert abs(got - fi / fu) < 1e-9

    def test_perfect_predictions_score_one(self):
        assert miou([record(1, 50, 50), record(2, 7, 7)]) == 1.0

    def test_empty_foreground_in_both_is_perfect(self):
        pred = np.zeros((4, 4), dtype=np.uint8)
        counts = episode_counts(pred, pred)
        assert miou([record(1, counts["fg_intersection"], counts["fg_union"])]) == 1.0

    def test_false_positive_on_empty_truth_scores_zero(self):
        assert miou([record(1, 0, 12)]) == 0.0

    def test_background_becomes_one_extra_class(self):
        recs = [record(1, 1, 2, bg_i=3, bg_u=3)]
        assert miou(recs, include_background=True) == pytest.approx((0.5 + 1.0) / 2)

    def test_empty_records_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            miou([])

    def test_mask_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="shapes"):
            episode_counts(np.zeros((4, 4)), np.zeros((4, 5)))


KNOBS = VariationKnobs(scale_range=(0.3, 0.55), position_jitter=0.3,
                       rotation_range=0.4, color_jitter=0.1,
                       occlusion_prob=0.3, distractor_range=(1, 1))


@pytest.fixture(scope="module")
def world():
    """A small trained system shared by the evaluation tests: 6-class
    domain-A pool split into base/novel, a pre-trained frozen backbone,
    a briefly meta-trained adapter, and a domain-B novel pool."""
    ds_a = generate_dataset(DatasetSpec(domain="shapesA", num_classes=6,
                                        images_per_class=8, image_size=16,
                                        variation=KNOBS, seed=11))
    ds_b = generate_dataset(DatasetSpec(domain="shapesB", num_classes=6,
                                        images_per_class=8, image_size=16,
                                        variation=KNOBS, seed=12))
    base_a, novel_a = split_classes(ds_a, SplitSpec(split_index=0, num_splits=3))
    _, novel_b = split_classes(ds_b, SplitSpec(split_index=0, num_splits=3))
    res = pretrain(base_a, PretrainConfig(epochs=3, batch_size=4, seed=0),
                   feature_dim=8, dtype=np.float32)
    backbone = freeze(res.params)
    inner = InnerLoopConfig(iterations=10, lr=0.1, seed=0)
    cwt = init_cwt(8, 16, 2, seed=0, dtype=np.float32)
    cwt, _ = meta_train(backbone, base_a, cwt,
                        MetaTrainConfig(epochs=1, episodes_per_epoch=20,
                                        outer_lr=1e-3, inner=inner, seed=0))
    protocol = EvalProtocol(trials=2, episodes_per_trial=4, seed_base=3,
                            inner=inner)
    return dict(backbone=backbone, cwt=cwt, base=base_a, novel_a=novel_a,
                novel_b=novel_b, inner=inner, protocol=protocol)


def single_episode_pool(seed=21):
    """Two near-identical images of one class: every sampled episode is the
    same task up to support/query order, so training curves are clean."""
    knobs = VariationKnobs(scale_range=(0.45, 0.45), position_jitter=0.0,
                           rotation_range=0.0, color_jitter=0.05)
    return generate_dataset(DatasetSpec(num_classes=1, images_per_class=2,
                                        image_size=16, variation=knobs, seed=seed))


class TestMetaTrain:
    def trainable(self, pool, seed=0):
        res = pretrain(pool, PretrainConfig(epochs=2, batch_size=2, seed=seed),
                       feature_dim=8, dtype=np.float32)
        return freeze(res.params)

    def test_loss_decreases_on_repeated_episode(self):
        pool = single_episode_pool()
        backbone = self.trainable(pool)
        cwt = init_cwt(8, 16, 2, seed=0, dtype=np.float32)
        cfg = MetaTrainConfig(epochs=1, episodes_per_epoch=100, outer_lr=3e-3,
                              inner=InnerLoopConfig(iterations=10, lr=0.1, seed=0),
                              seed=0)
        _, log = meta_train(backbone, pool, cwt, cfg)
        losses = log["episode_losses"]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_bit_reproducible(self):
        pool = single_episode_pool()
        backbone = self.trainable(pool)
        cfg = MetaTrainConfig(epochs=1, episodes_per_epoch=5, outer_lr=1e-3,
                              inner=InnerLoopConfig(iterations=5, lr=0.1, seed=0),
                              seed=4)
        out = []
        for _ in range(2):
            cwt = init_cwt(8, 16, 2, seed=3, dtype=np.float32)
            cwt, log = meta_train(backbone, pool, cwt, cfg)
            out.append((hash_tensors(cwt.tensors()), tuple(log["episode_losses"])))
        assert out[0] == out[1]

    def test_zero_epochs_is_a_no_op(self):
        pool = single_episode_pool()
        backbone = self.trainable(pool)
        cwt = init_cwt(8, 16, 2, seed=3, dtype=np.float32)
        before = hash_tensors(cwt.tensors())
        _, log = meta_train(backbone, pool, cwt,
                            MetaTrainConfig(epochs=0, episodes_per_epoch=5))
        assert hash_tensors(cwt.tensors()) == before
        assert log["episode_losses"] == []

    def test_unfrozen_backbone_rejected(self):
        pool = single_episode_pool()
        res = pretrain(pool, PretrainConfig(epochs=1, batch_size=2, seed=0),
                       feature_dim=8, dtype=np.float32)
        cwt = init_cwt(8, 16, 2, seed=0, dtype=np.float32)
        with pytest.raises(ConfigError, match="frozen"):
            meta_train(res.params, pool, cwt, MetaTrainConfig(epochs=1))

    def test_support_attention_variant_trains(self):
        pool = single_episode_pool()
        backbone = self.trainable(pool)
        cwt = init_cwt(8, 16, 2, seed=0, dtype=np.float32)
        before = hash_tensors(cwt.tensors())
        cfg = MetaTrainConfig(epochs=1, episodes_per_epoch=5, outer_lr=1e-2,
                              inner=InnerLoopConfig(iterations=5, lr=0.1, seed=0),
                              attend_to="support", seed=0)
        cwt, log = meta_train(backbone, pool, cwt, cfg)
        assert hash_tensors(cwt.tensors()) != before
        assert log["attend_to"] == "support"

    def test_invalid_attend_target_rejected(self):
        with pytest.raises(ConfigError, match="attend_to"):
            MetaTrainConfig(attend_to="both").validate()


class TestWholeModel:
    def pretrained(self, pool, seed=0):
        return pretrain(pool, PretrainConfig(epochs=2, batch_size=2, seed=seed),
                        feature_dim=8, dtype=np.float32).params

    def test_zero_lr_leaves_model_unchanged(self):
        pool = single_episode_pool()
        backbone = self.pretrained(pool)
        before = hash_tensors(backbone.tensors())
        meta_train_whole_model(backbone, pool,
                               MetaTrainConfig(epochs=1, episodes_per_epoch=5,
                                               outer_lr=0.0, seed=0))
        assert hash_tensors(backbone.tensors()) == before

    def test_loss_decreases_and_params_move(self):
        pool = single_episode_pool()
        backbone = self.pretrained(pool)
        before = hash_tensors(backbone.tensors())
        _, log = meta_train_whole_model(
            backbone, pool, MetaTrainConfig(epochs=1, episodes_per_epoch=60,
                                            outer_lr=3e-3, seed=0))
        losses = log["episode_losses"]
        assert hash_tensors(backbone.tensors()) != before
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_frozen_backbone_rejected(self):
        pool = single_episode_pool()
        backbone = freeze(self.pretrained(pool))
        with pytest.raises(ConfigError, match="unfrozen"):
            meta_train_whole_model(backbone, pool, MetaTrainConfig(epochs=1))

    def test_episode_classifier_equals_masked_means(self):
        # the episodic baseline's classifier rows are the support prototypes;
        # check the prototype initializer against a brute-force double loop
        pool = single_episode_pool()
        backbone = freeze(self.pretrained(pool))
        episode = sample_episode(pool, pool.class_ids, 1, 1, make_rng(0, 0))
        fmap = encode(episode.support[0], backbone)
        w = init_classifier([fmap], [episode.support[0].mask],
                            InnerLoopConfig(iterations=0, init="prototype"))
        h, wd = fmap.spatial
        feats = fmap.features.data.reshape(h, wd, -1)
        mask = episode.support[0].mask
        fg_sum = np.zeros(8)
        bg_sum = np.zeros(8)
        n_fg = n_bg = 0
        for r in range(h):
            for c in range(wd):
                if mask[r, c]:
                    fg_sum += feats[r, c]
                    n_fg += 1
                else:
                    bg_sum += feats[r, c]
                    n_bg += 1
        assert np.allclose(w.w.data[1], fg_sum / n_fg, atol=1e-6)
        assert np.allclose(w.w.data[0], bg_sum / n_bg, atol=1e-6)


class TestMetaTest:
    def test_deterministic(self, world):
        a = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                      world["protocol"], mode="full_cwt")
        b = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                      world["protocol"], mode="full_cwt")
        assert a.mean_miou == b.mean_miou
        assert a.records == b.records

    def test_parameters_untouched(self, world):
        report = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                           world["protocol"])
        assert report.hash_audit_passed is True

    def test_every_mode_produces_a_valid_report(self, world):
        for mode in ABLATION_MODES:
            cwt = None if mode in ("classifier_only", "whole_model_meta") else world["cwt"]
            report = meta_test(world["backbone"], cwt, world["novel_a"],
                               world["protocol"], mode=mode)
            assert report.mode == mode
            assert 0.0 <= report.mean_miou <= 1.0
            assert len(report.per_trial_miou) == 2
            assert set(report.per_class_iou) == set(world["novel_a"].class_ids)

    def test_adapter_modes_need_adapter_params(self, world):
        for mode in ("full_cwt", "attend_support"):
            with pytest.raises(ConfigError, match="adapter"):
                meta_test(world["backbone"], None, world["novel_a"],
                          world["protocol"], mode=mode)

    def test_unknown_mode_rejected(self, world):
        with pytest.raises(ConfigError, match="mode"):
            meta_test(world["backbone"], world["cwt"], world["novel_a"],
                      world["protocol"], mode="everything")

    def test_class_overlap_refused(self, world):
        with pytest.raises(ConfigError, match="disjoint"):
            meta_test(world["backbone"], world["cwt"], world["novel_a"],
                      world["protocol"],
                      train_class_ids=world["novel_a"].class_ids[:1])

    def test_disjoint_train_ids_accepted(self, world):
        report = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                           world["protocol"], train_class_ids=world["base"].class_ids)
        assert report.mean_miou >= 0.0

    def test_whole_model_mode_forces_prototype_classifier(self, world):
        report = meta_test(world["backbone"], None, world["novel_a"],
                           world["protocol"], mode="whole_model_meta")
        assert report.config_fingerprint["inner_iterations"] == 0
        assert report.config_fingerprint["inner_init"] == "prototype"

    def test_records_carry_episode_provenance(self, world):
        report = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                           world["protocol"])
        assert {r["trial"] for r in report.records} == {0, 1}
        assert all(r["class_id"] in world["novel_a"].class_ids for r in report.records)
        assert len(report.records) == 2 * 4

    def test_mean_equals_trial_average(self, world):
        report = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                           world["protocol"])
        assert report.mean_miou == pytest.approx(np.mean(report.per_trial_miou),
                                                 abs=1e-12)

    def test_report_is_json_serializable(self, world):
        report = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                           world["protocol"])
        round_trip = json.loads(json.dumps(report.to_dict(), sort_keys=True))
        assert round_trip["mode"] == "full_cwt"
        assert round_trip["mean_miou"] == report.mean_miou

    def test_five_shot_protocol_runs(self, world):
        protocol = dataclasses.replace(world["protocol"], k_shot=5,
                                       episodes_per_trial=2)
        report = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                           protocol)
        assert report.config_fingerprint["k_shot"] == 5


class TestCrossDomain:
    def test_same_domain_control_matches_meta_test(self, world):
        plain = meta_test(world["backbone"], world["cwt"], world["novel_a"],
                          world["protocol"])
        cross = cross_domain_eval(world["backbone"], world["cwt"],
                                  world["novel_a"], world["protocol"])
        assert cross.mean_miou == plain.mean_miou
        assert cross.records == plain.records
        assert cross.config_fingerprint["cross_domain"] is True

    def test_runs_on_the_other_domain(self, world):
        report = cross_domain_eval(world["backbone"], world["cwt"],
                                   world["novel_b"], world["protocol"],
                                   train_class_ids=world["base"].class_ids)
        assert report.config_fingerprint["domain"] == "shapesB"
        assert report.hash_audit_passed is True
        assert 0.0 <= report.mean_miou <= 1.0

    def test_classifier_only_runs_cross_domain(self, world):
        report = cross_domain_eval(world["backbone"], None, world["novel_b"],
                                   world["protocol"], mode="classifier_only")
        assert report.mode == "classifier_only"
