"""Command-line pipeline: layout, idempotence, error paths, end-to-end."""

import json

import numpy as np
import pytest
from PIL import Image

from mitodet import cli
from mitodet.config import RunConfig, write_config
from mitodet.detector import Detection
from mitodet.pipeline import (
    BOX_COLOR,
    GT_COLOR,
    MANIFEST_NAME,
    render_overlay,
)


def small_config(tmp_path, **synthetic) -> RunConfig:
    """Synthetic-data config sized for fast pipeline runs."""
    cfg = RunConfig()
    cfg.paths.frames_dir = str(tmp_path / "data" / "frames")
    cfg.paths.annotations_dir = str(tmp_path / "data" / "annotations")
    cfg.paths.work_dir = str(tmp_path / "work")
    cfg.split.overfit = True
    cfg.synthetic.enabled = True
    cfg.synthetic.num_frames = 2
    for key, value in synthetic.items():
        setattr(cfg.synthetic, key, value)
    return cfg


def tiny_pipeline_config(tmp_path) -> RunConfig:
    """All stages tuned down to run in seconds."""
    cfg = small_config(tmp_path, frame_width=64, frame_height=64,
                       blobs_per_frame=2, blob_radius=5.0,
                       blob_radius_jitter=1.0, tile_margin=8.0,
                       min_separation=20.0)
    cfg.tiling.grid = 2
    cfg.tiling.scale = 1.0
    cfg.tiling.mask_radius = 5.0
    cfg.unet.depth = 2
    cfg.unet.base_channels = 4
    cfg.unet.iterations = 2
    cfg.detector.backbone_channels = 8
    cfg.detector.rpn.hidden_channels = 16
    cfg.detector.roi.pool_size = 3
    cfg.detector.roi.samples_per_image = 16
    cfg.detector.anchors.scales = (10, 16)
    cfg.detector.steps = 2
    return cfg


def run(args) -> int:
    return cli.main([str(a) for a in args])


class TestPrepare:
    def test_two_frames_make_32_tiles_and_masks(self, tmp_path):
        cfg = small_config(tmp_path)
        path = tmp_path / "run.yaml"
        write_config(cfg, path)
        assert run(["prepare", "--config", path]) == 0
        work = tmp_path / "work"
        assert len(list((work / "tiles").glob("*.png"))) == 32
        assert len(list((work / "masks_gt").glob("*.png"))) == 32
        manifest = json.loads((work / MANIFEST_NAME).read_text())
        assert manifest["version"] == 1
        assert len(manifest["entries"]) >= 64
        assert (work / "split.json").exists()

    def test_rerun_reproduces_identical_manifest(self, tmp_path):
        path = tmp_path / "run.yaml"
        write_config(small_config(tmp_path), path)
        assert run(["prepare", "--config", path]) == 0
        manifest = tmp_path / "work" / MANIFEST_NAME
        before = manifest.read_bytes()
        assert run(["prepare", "--config", path]) == 0
        assert manifest.read_bytes() == before

    def test_set_override_changes_tiling(self, tmp_path):
        path = tmp_path / "run.yaml"
        write_config(small_config(tmp_path), path)
        assert run(["prepare", "--config", path,
                    "--set", "tiling.grid=2"]) == 0
        assert len(list((tmp_path / "work" / "tiles").glob("*.png"))) == 8

    def test_missing_annotation_names_frame(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        cfg.synthetic.enabled = False
        frames_dir = tmp_path / "data" / "frames"
        frames_dir.mkdir(parents=True)
        (tmp_path / "data" / "annotations").mkdir(parents=True)
        Image.fromarray(
            np.full((64, 64, 3), 200, dtype=np.uint8)).save(
                frames_dir / "A01_00.png")
        path = tmp_path / "run.yaml"
        write_config(cfg, path)
        assert run(["prepare", "--config", path]) == 1
        err = capsys.readouterr().err
        assert "A01_00" in err
        assert "error:" in err

    def test_corrupt_image_names_file(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        cfg.synthetic.enabled = False
        frames_dir = tmp_path / "data" / "frames"
        ann_dir = tmp_path / "data" / "annotations"
        frames_dir.mkdir(parents=True)
        ann_dir.mkdir(parents=True)
        (frames_dir / "A01_00.png").write_bytes(b"not a png")
        (ann_dir / "A01_00.csv").write_text("10,10\n")
        path = tmp_path / "run.yaml"
        write_config(cfg, path)
        assert run(["prepare", "--config", path]) == 1
        assert "A01_00.png" in capsys.readouterr().err

    def test_empty_test_split_is_an_error(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        cfg.split.overfit = False  # synthetic groups never include A03
        path = tmp_path / "run.yaml"
        write_config(cfg, path)
        assert run(["prepare", "--config", path]) == 1
        assert "A03" in capsys.readouterr().err


class TestPrerequisites:
    @pytest.fixture()
    def prepared(self, tmp_path):
        path = tmp_path / "run.yaml"
        write_config(tiny_pipeline_config(tmp_path), path)
        assert run(["prepare", "--config", path]) == 0
        return path

    def test_segment_requires_train_seg(self, prepared, capsys):
        assert run(["segment", "--config", prepared]) == 1
        err = capsys.readouterr().err
        assert "unet.pt" in err
        assert "train-seg" in err

    def test_train_det_requires_segment(self, prepared, capsys):
        assert run(["train-seg", "--config", prepared]) == 0
        assert run(["train-det", "--config", prepared]) == 1
        err = capsys.readouterr().err
        assert "masks_pred" in err
        assert "segment" in err

    def test_detect_requires_train_det(self, prepared, capsys):
        assert run(["detect", "--config", prepared]) == 1
        err = capsys.readouterr().err
        assert "detector.pt" in err
        assert "train-det" in err

    def test_evaluate_requires_detect(self, prepared, capsys):
        assert run(["evaluate", "--config", prepared]) == 1
        err = capsys.readouterr().err
        assert "detections" in err
        assert "detect" in err

    def test_visualize_requires_detect(self, prepared, capsys):
        assert run(["visualize", "--config", prepared]) == 1
        assert "detect" in capsys.readouterr().err


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """One tiny end-to-end pipeline shared by the artifact checks."""
    tmp_path = tmp_path_factory.mktemp("pipeline")
    path = tmp_path / "run.yaml"
    write_config(tiny_pipeline_config(tmp_path), path)
    for command in ("prepare", "train-seg", "segment", "train-det",
                    "detect", "evaluate", "visualize"):
        assert run([command, "--config", path]) == 0, command
    return tmp_path


class TestFullPipeline:
    def test_report_has_all_metric_fields(self, finished):
        report = json.loads(
            (finished / "work" / "reports" / "evaluation.json").read_text())
        for key in ("tp", "fp", "fn", "precision", "recall", "f_measure"):
            assert key in report
        assert "provenance" in report

    def test_comparison_mentions_published_scores(self, finished):
        text = (finished / "work" / "reports" / "comparison.txt").read_text()
        assert "this run" in text
        assert "0.507" in text
        assert "0.356" in text

    def test_detections_csv_has_provenance_comment(self, finished):
        csv_path = finished / "work" / "detections" / "detections.csv"
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert "config_hash=" in lines[0]
        assert lines[1].split(",")[0] == "frame_id"

    def test_checkpoints_and_loss_logs_written(self, finished):
        work = finished / "work"
        assert (work / "checkpoints" / "unet.pt").exists()
        assert (work / "checkpoints" / "detector.pt").exists()
        seg_log = json.loads(
            (work / "reports" / "train_seg_losses.json").read_text())
        det_log = json.loads(
            (work / "reports" / "train_det_losses.json").read_text())
        assert len(seg_log["losses"]) > 0
        assert len(det_log["history"]) > 0

    def test_one_overlay_per_test_frame(self, finished):
        overlays = sorted((finished / "work" / "overlays").glob("*.png"))
        split = json.loads(
            (finished / "work" / "split.json").read_text())
        assert [p.stem for p in overlays] == sorted(
            split["test_frame_ids"])

    def test_visualize_rerun_is_byte_identical(self, finished):
        overlays = sorted((finished / "work" / "overlays").glob("*.png"))
        before = [p.read_bytes() for p in overlays]
        assert run(["visualize", "--config", finished / "run.yaml"]) == 0
        after = [p.read_bytes() for p in overlays]
        assert before == after

    def test_manifest_covers_every_stage(self, finished):
        manifest = json.loads(
            (finished / "work" / MANIFEST_NAME).read_text())
        entries = manifest["entries"]
        for prefix in ("tiles/", "masks_gt/", "masks_pred/",
                       "checkpoints/", "detections/", "reports/",
                       "overlays/"):
            assert any(key.startswith(prefix) for key in entries), prefix

    def test_evaluate_prints_comparison_table(self, finished, capsys):
        assert run(["evaluate", "--config", finished / "run.yaml"]) == 0
        out = capsys.readouterr().out
        assert "this run" in out
        assert "0.507" in out


class TestRenderOverlay:
    def test_detections_draw_rectangles(self):
        frame = np.full((80, 80, 3), 230, dtype=np.uint8)
        dets = [Detection("f", np.array([10.0, 10.0, 30.0, 30.0]), 0.9),
                Detection("f", np.array([50.0, 40.0, 70.0, 60.0]), 0.4)]
        image = np.asarray(render_overlay(frame, dets, [], radius=32.0))
        box_pixels = (image == np.array(BOX_COLOR)).all(axis=-1)
        assert box_pixels.sum() > 0
        gt_pixels = (image == np.array(GT_COLOR)).all(axis=-1)
        assert gt_pixels.sum() == 0

    def test_ground_truth_draws_circles(self):
        frame = np.full((80, 80, 3), 230, dtype=np.uint8)
        image = np.asarray(
            render_overlay(frame, [], [(40.0, 40.0)], radius=20.0))
        gt_pixels = (image == np.array(GT_COLOR)).all(axis=-1)
        assert gt_pixels.sum() > 0

    def test_rendering_is_deterministic(self):
        frame = np.full((60, 60, 3), 210, dtype=np.uint8)
        dets = [Detection("f", np.array([5.0, 5.0, 25.0, 25.0]), 0.7)]
        a = np.asarray(render_overlay(frame, dets, [(30.0, 30.0)], 16.0))
        b = np.asarray(render_overlay(frame, dets, [(30.0, 30.0)], 16.0))
        np.testing.assert_array_equal(a, b)


class TestArgumentHandling:
    def test_missing_config_file_reports_error(self, tmp_path, capsys):
        assert run(["prepare", "--config", tmp_path / "nope.yaml"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_command_exits_with_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run(["frobnicate", "--config", tmp_path / "x.yaml"])
        assert err.value.code == 2

    def test_config_flag_is_required(self):
        with pytest.raises(SystemExit) as err:
            run(["prepare"])
        assert err.value.code == 2

    def test_bad_override_reports_error(self, tmp_path, capsys):
        path = tmp_path / "run.yaml"
        write_config(small_config(tmp_path), path)
        assert run(["prepare", "--config", path,
                    "--set", "tiling.bogus=1"]) == 1
        assert "tiling.bogus" in capsys.readouterr().err
