"""Stage-wise training loop: freezing, mixing, logging, checkpoints."""

import csv

import numpy as np
import pytest

from phr3d.autograd import load_arrays
from phr3d.errors import ConfigError, DataError
from phr3d.geometry import AugmentConfig, FLIP_PERMUTATION_5
from phr3d.heatmaps import LandmarkSet3D
from phr3d.model import (
    LOG_COLUMNS,
    TrainSample,
    TrainSchedule,
    build_cascade,
    load_checkpoint,
    save_checkpoint,
    train_stagewise,
)

CROP = 32
N_PTS = 3


def make_samples(count, seed, n=N_PTS, crop=CROP):
    """Crops with bright blobs at the landmark positions, so there is signal."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:crop, 0:crop]
    out = []
    for _ in range(count):
        pts = rng.uniform(6.0, crop - 6.0, size=(n, 2))
        z = rng.uniform(-3.0, 3.0, size=n)
        img = np.zeros((crop, crop, 3))
        for (x, y), depth in zip(pts, z):
            blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * 2.0 ** 2))
            img[..., 0] += blob
            img[..., 1] += blob * (0.5 + depth / 10.0)
        img = np.clip(img, 0.0, 1.0)
        out.append(TrainSample(img, LandmarkSet3D(pts, z, (crop, crop)),
                               face_height=crop - 8.0))
    return out


def smoke_schedule(**overrides):
    base = dict(detection_epochs=1, regression_epochs=1, joint_epochs=1,
                z_epochs=2, batch_xy=4, batch_z=4, gt_heatmap_mix=1.0)
    base.update(overrides)
    return TrainSchedule(**base)


def run_smoke(tmp_path, seed=0, **schedule_overrides):
    model = build_cascade("desk", n_landmarks=N_PTS, crop_size=CROP,
                          rng=np.random.default_rng(seed))
    log = train_stagewise(
        model, make_samples(8, 1), make_samples(4, 2), smoke_schedule(**schedule_overrides),
        np.random.default_rng(seed), log_path=tmp_path / "log.csv",
        checkpoint_dir=tmp_path / "ckpt", seed=seed,
    )
    return model, log


class TestSchedule:
    def test_desk_epoch_counts(self):
        s = TrainSchedule.desk()
        assert (s.detection_epochs, s.regression_epochs, s.joint_epochs,
                s.z_epochs) == (8, 8, 8, 20)

    def test_stage_plan_order(self):
        names = [name for name, _, _ in TrainSchedule.desk().stage_plan()]
        assert names == ["detection", "regression", "joint_xy", "z"]

    def test_rejects_zero_epochs(self):
        with pytest.raises(ConfigError, match="detection_epochs"):
            TrainSchedule(detection_epochs=0)

    def test_rejects_bad_mix(self):
        with pytest.raises(ConfigError, match="gt_heatmap_mix"):
            TrainSchedule(gt_heatmap_mix=1.5)

    def test_default_lr_spans(self):
        s = TrainSchedule()
        assert s.detection_lr == (1e-3, 2.5e-5)
        assert s.z_lr == (1e-2, 2.5e-4)
        assert s.batch_xy == 8 and s.batch_z == 16

    def test_desk_spans_compensate_mean_loss_by_map_area(self):
        # pixel-mean map losses shrink gradients by H*W vs. the summed
        # form the default spans pair with; desk multiplies it back in
        base, desk = TrainSchedule(), TrainSchedule.desk()
        assert desk.detection_lr == tuple(v * 24 * 24 for v in base.detection_lr)
        assert desk.regression_lr == tuple(v * 96 * 96 for v in base.regression_lr)
        assert desk.joint_lr == desk.regression_lr
        assert desk.z_lr == base.z_lr


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    model, log = run_smoke(tmp)
    return tmp, model, log


class TestTrainStagewise:
    def test_one_record_per_epoch_in_stage_order(self, smoke):
        _, _, log = smoke
        stages = [r.stage for r in log.records]
        assert stages == ["detection", "regression", "joint_xy", "z", "z"]
        assert all(np.isfinite(r.loss) for r in log.records)

    def test_xy_records_carry_validation_gte(self, smoke):
        _, _, log = smoke
        for r in log.records:
            if r.stage == "z":
                assert r.val_gte_xy is None
                assert r.val_gte_z is not None and np.isfinite(r.val_gte_z)
                assert r.val_z_loss is not None and np.isfinite(r.val_z_loss)
            else:
                assert r.val_gte_xy is not None and np.isfinite(r.val_gte_xy)
                assert r.val_gte_z is None

    def test_lr_column_starts_each_stage_at_span_start(self, smoke):
        _, _, log = smoke
        first = {}
        for r in log.records:
            first.setdefault(r.stage, r.lr)
        assert first["detection"] == pytest.approx(1e-3)
        assert first["z"] == pytest.approx(1e-2)

    def test_detection_untouched_by_regression_stage(self, smoke):
        tmp, _, _ = smoke
        after_det = load_arrays(tmp / "ckpt" / "stage_detection.bin")
        after_reg = load_arrays(tmp / "ckpt" / "stage_regression.bin")
        det_keys = [k for k in after_det if k.split(".", 1)[1].startswith("detection.")]
        assert det_keys
        for k in det_keys:
            np.testing.assert_array_equal(after_det[k], after_reg[k])

    def test_regression_stage_does_update_regression(self, smoke):
        tmp, _, _ = smoke
        after_det = load_arrays(tmp / "ckpt" / "stage_detection.bin")
        after_reg = load_arrays(tmp / "ckpt" / "stage_regression.bin")
        changed = [k for k in after_det
                   if k.startswith("param.regression.")
                   and not np.array_equal(after_det[k], after_reg[k])]
        assert changed

    def test_xy_frozen_through_z_stage(self, smoke):
        tmp, _, _ = smoke
        after_joint = load_arrays(tmp / "ckpt" / "stage_joint_xy.bin")
        after_z = load_arrays(tmp / "ckpt" / "stage_z.bin")
        for k in after_joint:
            sub = k.split(".", 1)[1]
            if sub.startswith("detection.") or sub.startswith("regression."):
                np.testing.assert_array_equal(after_joint[k], after_z[k])

    def test_z_stage_does_update_z_net(self, smoke):
        tmp, _, _ = smoke
        after_joint = load_arrays(tmp / "ckpt" / "stage_joint_xy.bin")
        after_z = load_arrays(tmp / "ckpt" / "stage_z.bin")
        changed = [k for k in after_joint
                   if k.startswith("param.z_net.")
                   and not np.array_equal(after_joint[k], after_z[k])]
        assert changed

    def test_pure_gt_mix_never_feeds_predictions(self, smoke):
        _, _, log = smoke
        assert log.z_pred_batches == 0
        assert log.z_gt_batches == 4  # 2 epochs x ceil(8/4) batches

    def test_final_model_state(self, smoke):
        _, model, _ = smoke
        assert model.stage == "done"
        assert not model.training
        assert not any(p.frozen for p in model.named_parameters().values())

    def test_csv_log_matches_records(self, smoke):
        tmp, _, log = smoke
        with open(tmp / "log.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(LOG_COLUMNS)
        assert len(rows) == 1 + len(log.records)
        assert float(rows[1][2]) == log.records[0].loss
        assert rows[-1][3] == ""  # z stage: no xy validation column

    def test_final_checkpoint_round_trips(self, smoke):
        tmp, model, _ = smoke
        loaded = load_checkpoint(tmp / "ckpt" / "final.bin")
        assert loaded.stage == "done"
        state = model.state_arrays()
        for k, arr in loaded.state_arrays().items():
            np.testing.assert_array_equal(arr, state[k])

    def test_checkpoint_sidecar_preserves_build_recipe(self, smoke):
        tmp, _, _ = smoke
        loaded = load_checkpoint(tmp / "ckpt" / "final.bin")
        assert loaded.config.preset == "desk"
        assert loaded.config.n_landmarks == N_PTS
        assert loaded.config.crop_size == CROP


class TestTrainingVariants:
    def test_identical_seeds_reproduce_loss_curves(self, tmp_path):
        _, log_a = run_smoke(tmp_path / "a", seed=3)
        _, log_b = run_smoke(tmp_path / "b", seed=3)
        assert log_a.losses() == log_b.losses()
        va = [r.val_gte_xy for r in log_a.records]
        vb = [r.val_gte_xy for r in log_b.records]
        assert va == vb

    def test_pure_predicted_mix_never_uses_gt(self, tmp_path):
        _, log = run_smoke(tmp_path, gt_heatmap_mix=0.0)
        assert log.z_gt_batches == 0
        assert log.z_pred_batches == 4

    def test_augmented_run_stays_finite(self, tmp_path):
        model = build_cascade("desk", n_landmarks=5, crop_size=CROP,
                              rng=np.random.default_rng(0))
        aug = AugmentConfig(
            flip_prob=0.5, flip_permutation=FLIP_PERMUTATION_5,
            rotation_range_deg=(-15.0, 15.0), scale_range=(0.9, 1.1),
            jitter_range=(0.9, 1.1),
        )
        log = train_stagewise(
            model, make_samples(4, 1, n=5), make_samples(2, 2, n=5),
            smoke_schedule(), np.random.default_rng(0), augment=aug,
        )
        assert all(np.isfinite(r.loss) for r in log.records)

    def test_empty_train_set_rejected(self):
        model = build_cascade("desk", n_landmarks=N_PTS, crop_size=CROP,
                              rng=np.random.default_rng(0))
        with pytest.raises(DataError, match="training set"):
            train_stagewise(model, [], make_samples(2, 2), smoke_schedule(),
                            np.random.default_rng(0))

    def test_empty_val_set_rejected(self):
        model = build_cascade("desk", n_landmarks=N_PTS, crop_size=CROP,
                              rng=np.random.default_rng(0))
        with pytest.raises(DataError, match="validation set"):
            train_stagewise(model, make_samples(2, 1), [], smoke_schedule(),
                            np.random.default_rng(0))


class TestCheckpointIO:
    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_checkpoint(tmp_path / "nope.bin")

    def test_missing_sidecar_rejected(self, tmp_path):
        model = build_cascade("desk", n_landmarks=N_PTS, crop_size=CROP,
                              rng=np.random.default_rng(0))
        save_checkpoint(model, tmp_path / "m.bin")
        (tmp_path / "m.json").unlink()
        with pytest.raises(DataError, match="sidecar"):
            load_checkpoint(tmp_path / "m.bin")

    def test_save_load_outside_training(self, tmp_path):
        model = build_cascade("desk", n_landmarks=N_PTS, crop_size=CROP,
                              rng=np.random.default_rng(4))
        model.set_stage("done")
        save_checkpoint(model, tmp_path / "m.bin")
        loaded = load_checkpoint(tmp_path / "m.bin")
        for k, arr in model.state_arrays().items():
            np.testing.assert_array_equal(arr, loaded.state_arrays()[k])
