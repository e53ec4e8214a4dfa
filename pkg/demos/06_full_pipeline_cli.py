"""
Driving the full pipeline through the `mitosis` command line
============================================================

"""

# Every stage of the pipeline is a subcommand of the `mitosis` CLI, and
# every run is fully described by one YAML config file. This script
# writes a small synthetic-data config, then walks the seven stages the
# same way a shell session would.
import json
import subprocess
import sys
import tempfile
from pathlib import Path

root = Path(tempfile.mkdtemp(prefix="mitosis_demo_"))
config_path = root / "run.yaml"

# Config keys mirror the dataclass tree in mitodet.config; anything not
# listed keeps its default. synthetic.enabled makes `prepare` write its
# own frames instead of reading scanner data from disk. Small frames
# and a short schedule keep this demo to about a minute; expect full
# recall with some duplicate detections left over (the README's larger
# recipe trains those away).
config_path.write_text(f"""\
paths:
  frames_dir: {root / 'data' / 'frames'}
  annotations_dir: {root / 'data' / 'annotations'}
  work_dir: {root / 'work'}
synthetic:
  enabled: true
  num_frames: 4
  frame_width: 128
  frame_height: 128
  blobs_per_frame: 3
  blob_radius: 5.0
  blob_radius_jitter: 1.0
  tile_margin: 10.0
  min_separation: 24.0
split:
  overfit: true
tiling:
  grid: 2
  scale: 1.0
  box_half_side: 10.0
  mask_radius: 7.0
unet:
  depth: 2
  base_channels: 8
  iterations: 40
  learning_rate: 0.01
detector:
  backbone_channels: 16
  steps: 600
  learning_rate: 0.03
  lr_decay_step: 450
  final_nms_thresh: 0.15
  rpn:
    hidden_channels: 32
    post_nms_top_k: 30
  roi:
    samples_per_image: 32
  anchors:
    scales: [14, 20, 28]
""")


def mitosis(command, *extra):
    argv = [sys.executable, "-m", "mitodet.cli", command,
            "--config", str(config_path), *extra]
    print("$ mitosis", " ".join(argv[3:]))
    subprocess.run(argv, check=True)


# prepare: write (or load) frames, tile them, synthesize ground-truth
# masks, and record the train/test split and a content manifest.
mitosis("prepare")

# train-seg fits the U-net on the training tiles; segment then writes a
# predicted probability map for every tile, train and test alike.
mitosis("train-seg")
mitosis("segment")

# train-det fits the two-stream detector on tiles plus their predicted
# maps. --set overrides any config key for just this invocation.
mitosis("train-det", "--set", "detector.steps=600")

# detect writes detections.csv in frame coordinates; evaluate matches
# them against the annotations and writes evaluation.json; visualize
# renders per-frame overlays of detections and ground truth.
mitosis("detect")
mitosis("evaluate")
mitosis("visualize")

report = json.loads((root / "work" / "reports" / "evaluation.json").read_text())
print("\nevaluation.json:")
for key in ("tp", "fp", "fn", "precision", "recall", "f_measure"):
    print(f"  {key}: {report[key]}")
print("\noverlays:", sorted(p.name for p in (root / "work" / "overlays").iterdir()))
print("\nworkspace:", root)
