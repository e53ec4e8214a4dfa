"""Pipeline commands behind the CLI.

Each command reads its predecessor's artifacts from a shared work
directory, writes its own, and then updates a single manifest of content
hashes. Every artifact embeds the config hash and seed that produced it:
PNGs in text chunks, JSON in a provenance object, CSV in a leading
comment line, checkpoints in the saved payload. A failed command never
touches the manifest, and reruns with unchanged inputs reproduce it
byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo
from filelock import FileLock, Timeout

from . import data as data_mod
from . import detector as det_mod
from . import evaluation as eval_mod
from . import unet as unet_mod
from .config import RunConfig, config_hash
from .data import HpfFrame, SegTarget, SplitSpec, TileSample

logger = logging.getLogger(__name__)

TILES_DIR = "tiles"
MASKS_GT_DIR = "masks_gt"
MASKS_PRED_DIR = "masks_pred"
CHECKPOINTS_DIR = "checkpoints"
DETECTIONS_DIR = "detections"
REPORTS_DIR = "reports"
OVERLAYS_DIR = "overlays"
JPEG_DIR = "jpeg"

MANIFEST_NAME = "manifest.json"
SPLIT_NAME = "split.json"
LOCK_NAME = ".lock"
UNET_CKPT = "unet.pt"
DETECTOR_CKPT = "detector.pt"
DETECTIONS_CSV = "detections.csv"
EVAL_JSON = "evaluation.json"
COMPARISON_TXT = "comparison.txt"
SEG_LOSSES_JSON = "train_seg_losses.json"
DET_LOSSES_JSON = "train_det_losses.json"

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")

DETECTIONS_HEADER = ("frame_id", "x1", "y1", "x2", "y2", "score",
                     "centroid_x", "centroid_y")


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact is absent; says which command makes it."""

    def __init__(self, path, producer: str):
        super().__init__(
            f"missing artifact {path}; run `mitosis {producer}` first")
        self.path = Path(path)
        self.producer = producer


@dataclass
class Workspace:
    """Resolved paths and provenance stamp for one command invocation."""

    config: RunConfig
    root: Path
    stamp: Dict[str, str]

    @classmethod
    def create(cls, config: RunConfig) -> "Workspace":
        root = Path(config.paths.work_dir)
        stamp = {"config_hash": config_hash(config),
                 "seed": str(config.seed)}
        return cls(config=config, root=root, stamp=stamp)

    def dir(self, name: str) -> Path:
        return self.root / name

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def ensure_layout(self) -> None:
        for name in (TILES_DIR, MASKS_GT_DIR, MASKS_PRED_DIR,
                     CHECKPOINTS_DIR, DETECTIONS_DIR, REPORTS_DIR,
                     OVERLAYS_DIR):
            self.dir(name).mkdir(parents=True, exist_ok=True)

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / LOCK_NAME))


def _locked(ws: Workspace):
    lock = ws.lock()
    try:
        lock.acquire(timeout=10)
    except Timeout:
        raise RuntimeError(
            f"work dir {ws.root} is locked by another running command"
        ) from None
    return lock


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def update_manifest(ws: Workspace, written: Iterable[Path]) -> Path:
    """Fold freshly written artifacts into work/manifest.json atomically.

    Entries map work-dir-relative paths to sha256 hashes; files outside
    the work dir are skipped. The manifest carries no timestamps, so an
    unchanged rerun reproduces it byte for byte.
    """
    manifest_path = ws.root / MANIFEST_NAME
    entries: Dict[str, str] = {}
    if manifest_path.is_file():
        entries = json.loads(manifest_path.read_text(encoding="utf-8")).get(
            "entries", {})
    for path in written:
        path = Path(path)
        try:
            rel = path.resolve().relative_to(ws.root.resolve())
        except ValueError:
            continue
        entries[rel.as_posix()] = _sha256_file(path)
    blob = json.dumps({"version": 1, "entries": entries},
                      sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(manifest_path, blob.encode("utf-8"))
    return manifest_path


def write_png(path: Path, array: np.ndarray, ws: Workspace) -> Path:
    """Save an image with the config hash and seed in PNG text chunks."""
    image = Image.fromarray(array)
    info = PngInfo()
    for key, value in ws.stamp.items():
        info.add_text(key, value)
    image.save(path, format="PNG", pnginfo=info)
    return path


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image)


def write_json(path: Path, payload: dict, ws: Workspace) -> Path:
    body = {"provenance": dict(ws.stamp)}
    body.update(payload)
    blob = json.dumps(body, sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(path, blob.encode("utf-8"))
    return path


def write_text(path: Path, text: str) -> Path:
    _atomic_write_bytes(path, text.encode("utf-8"))
    return path


# --- frame ingestion ---------------------------------------------------


def _read_image_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"))
    except Exception as exc:
        raise ValueError(f"cannot read image file {path}: {exc}") from exc


def _ingest_frame_image(path: Path, ws: Workspace) -> Tuple[np.ndarray, List[Path]]:
    """Read one frame; TIFF goes through a JPEG conversion artifact first."""
    written: List[Path] = []
    if path.suffix.lower() in (".tif", ".tiff"):
        jpeg_dir = ws.dir(JPEG_DIR)
        jpeg_dir.mkdir(parents=True, exist_ok=True)
        jpeg_path = jpeg_dir / (path.stem + ".jpg")
        image = _read_image_rgb(path)
        Image.fromarray(image).save(
            jpeg_path, format="JPEG",
            quality=ws.config.tiling.jpeg_quality)
        written.append(jpeg_path)
        return _read_image_rgb(jpeg_path), written
    return _read_image_rgb(path), written


def load_frames(config: RunConfig, ws: Workspace
                ) -> Tuple[List[HpfFrame], List[Path]]:
    """Read every frame image plus its annotation CSV from the data dirs."""
    frames_dir = Path(config.paths.frames_dir)
    ann_dir = Path(config.paths.annotations_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory {frames_dir} not found")
    paths = sorted(p for p in frames_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no frame images in {frames_dir}")
    frames: List[HpfFrame] = []
    written: List[Path] = []
    for path in paths:
        frame_id = path.stem
        ann_path = ann_dir / (frame_id + ".csv")
        if not ann_path.is_file():
            raise FileNotFoundError(
                f"frame {frame_id}: missing annotation file {ann_path}")
        image, extra = _ingest_frame_image(path, ws)
        written.extend(extra)
        annotations = data_mod.parse_annotation_file(
            ann_path.read_text(encoding="utf-8"), frame_id)
        frame = HpfFrame(frame_id=frame_id,
                         scanner=data_mod.scanner_for_frame_id(frame_id),
                         image=image, annotations=annotations)
        frame.validate()
        frames.append(frame)
    return frames, written


def write_synthetic_sources(config: RunConfig) -> List[Path]:
    """Generate the blob dataset and write it as normal input files."""
    syn = config.synthetic
    frames = data_mod.generate_synthetic_dataset(
        num_frames=syn.num_frames, frame_width=syn.frame_width,
        frame_height=syn.frame_height, blobs_per_frame=syn.blobs_per_frame,
        blob_radius=syn.blob_radius,
        blob_radius_jitter=syn.blob_radius_jitter,
        grid=config.tiling.grid, tile_margin=syn.tile_margin,
        min_separation=syn.min_separation, seed=syn.seed)
    frames_dir = Path(config.paths.frames_dir)
    ann_dir = Path(config.paths.annotations_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for frame in frames:
        img_path = frames_dir / (frame.frame_id + ".png")
        Image.fromarray(frame.image).save(img_path, format="PNG")
        ann_path = ann_dir / (frame.frame_id + ".csv")
        ann_path.write_text(
            data_mod.format_annotation_file(frame.annotations),
            encoding="utf-8")
        written.extend([img_path, ann_path])
    return written


# --- tile persistence ---------------------------------------------------


def _tile_sidecar(tile: TileSample) -> dict:
    return {
        "frame_id": tile.parent_frame_id,
        "tile_index": tile.tile_index,
        "offset_x": tile.offset_x,
        "offset_y": tile.offset_y,
        "crop_w": tile.crop_w,
        "crop_h": tile.crop_h,
        "scale": tile.scale,
        "gt_boxes": [[float(v) for v in box] for box in tile.gt_boxes],
        "gt_centroids": [[float(v) for v in c] for c in tile.gt_centroids],
    }


def save_tile(ws: Workspace, tile: TileSample) -> List[Path]:
    png = write_png(ws.path(TILES_DIR, tile.name + ".png"), tile.image, ws)
    sidecar = write_json(ws.path(TILES_DIR, tile.name + ".json"),
                         _tile_sidecar(tile), ws)
    return [png, sidecar]


def load_tile(ws: Workspace, name: str) -> TileSample:
    png_path = ws.path(TILES_DIR, name + ".png")
    meta_path = ws.path(TILES_DIR, name + ".json")
    for p in (png_path, meta_path):
        if not p.is_file():
            raise MissingArtifactError(p, "prepare")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return TileSample(
        parent_frame_id=meta["frame_id"],
        tile_index=int(meta["tile_index"]),
        image=read_png(png_path),
        offset_x=int(meta["offset_x"]), offset_y=int(meta["offset_y"]),
        crop_w=int(meta["crop_w"]), crop_h=int(meta["crop_h"]),
        scale=float(meta["scale"]),
        gt_boxes=np.asarray(meta["gt_boxes"], dtype=np.float64).reshape(-1, 4),
        gt_centroids=np.asarray(meta["gt_centroids"],
                                dtype=np.float64).reshape(-1, 2),
    )


def list_tile_names(ws: Workspace,
                    frame_ids: Optional[Sequence[str]] = None) -> List[str]:
    tiles_dir = ws.dir(TILES_DIR)
    if not tiles_dir.is_dir():
        raise MissingArtifactError(tiles_dir, "prepare")
    names = sorted(p.stem for p in tiles_dir.glob("*.json"))
    if frame_ids is None:
        return names
    wanted = set(frame_ids)
    return [n for n in names if n.rsplit("_", 1)[0] in wanted]


def load_split(ws: Workspace) -> SplitSpec:
    path = ws.root / SPLIT_NAME
    if not path.is_file():
        raise MissingArtifactError(path, "prepare")
    payload = json.loads(path.read_text(encoding="utf-8"))
    return SplitSpec(train_frame_ids=payload["train_frame_ids"],
                     test_frame_ids=payload["test_frame_ids"],
                     unet_train_frame_ids=payload["unet_train_frame_ids"])


def _load_pred_mask(ws: Workspace, name: str) -> np.ndarray:
    path = ws.path(MASKS_PRED_DIR, name + ".png")
    if not path.is_file():
        raise MissingArtifactError(path, "segment")
    return read_png(path).astype(np.float64) / 255.0


# --- commands -----------------------------------------------------------


def cmd_prepare(config: RunConfig) -> dict:
    """Tile every frame, write seg targets and the split manifest."""
    ws = Workspace.create(config)
    with _locked(ws):
        ws.ensure_layout()
        written: List[Path] = []
        if config.synthetic.enabled:
            write_synthetic_sources(config)
        frames, converted = load_frames(config, ws)
        written.extend(converted)

        if config.split.overfit:
            split = data_mod.overfit_split(frames)
        else:
            split = data_mod.make_split(frames, config.split.test_group)
        split.validate(allow_overlap=config.split.overfit)
        written.append(write_json(ws.root / SPLIT_NAME, {
            "train_frame_ids": split.train_frame_ids,
            "test_frame_ids": split.test_frame_ids,
            "unet_train_frame_ids": split.unet_train_frame_ids,
        }, ws))

        n_tiles = 0
        for frame in frames:
            tiles = data_mod.tile_frame_with_annotations(
                frame, grid=config.tiling.grid, scale=config.tiling.scale,
                box_half_side=config.tiling.box_half_side)
            for tile in tiles:
                written.extend(save_tile(ws, tile))
                target = data_mod.make_seg_target(
                    tile, mask_radius=config.tiling.mask_radius)
                written.append(write_png(
                    ws.path(MASKS_GT_DIR, tile.name + ".png"),
                    (target.mask * 255).astype(np.uint8), ws))
                n_tiles += 1
        update_manifest(ws, written)
    logger.info("prepared %d tiles from %d frames", n_tiles, len(frames))
    return {"frames": len(frames), "tiles": n_tiles,
            "train": len(split.train_frame_ids),
            "test": len(split.test_frame_ids)}


def cmd_train_seg(config: RunConfig) -> dict:
    """Train the segmentation net on the designated training tiles."""
    ws = Workspace.create(config)
    with _locked(ws):
        split = load_split(ws)
        frame_ids = split.unet_train_frame_ids or split.train_frame_ids
        names = list_tile_names(ws, frame_ids)
        if not names:
            raise MissingArtifactError(ws.dir(TILES_DIR), "prepare")
        tiles = [load_tile(ws, n) for n in names]
        targets = []
        for name, tile in zip(names, tiles):
            path = ws.path(MASKS_GT_DIR, name + ".png")
            if not path.is_file():
                raise MissingArtifactError(path, "prepare")
            mask = (read_png(path) > 127).astype(np.uint8)
            targets.append(SegTarget(mask=mask, frame_id=tile.parent_frame_id,
                                     tile_index=tile.tile_index))
        model, losses = unet_mod.train_unet(tiles, targets, config.unet)
        ckpt = ws.path(CHECKPOINTS_DIR, UNET_CKPT)
        unet_mod.save_unet(model, ckpt, config.unet.iterations,
                           extra={"provenance": dict(ws.stamp)})
        losses_path = write_json(
            ws.path(REPORTS_DIR, SEG_LOSSES_JSON),
            {"losses": losses, "iterations": config.unet.iterations}, ws)
        update_manifest(ws, [ckpt, losses_path])
    logger.info("segmentation training done; final loss %.5f",
                losses[-1] if losses else float("nan"))
    return {"iterations": config.unet.iterations,
            "final_loss": losses[-1] if losses else None}


def cmd_segment(config: RunConfig) -> dict:
    """Write a predicted probability mask for every prepared tile."""
    ws = Workspace.create(config)
    with _locked(ws):
        ckpt = ws.path(CHECKPOINTS_DIR, UNET_CKPT)
        if not ckpt.is_file():
            raise MissingArtifactError(ckpt, "train-seg")
        model, _ = unet_mod.load_unet(ckpt)
        names = list_tile_names(ws)
        if not names:
            raise MissingArtifactError(ws.dir(TILES_DIR), "prepare")
        written = []
        for name in names:
            tile = load_tile(ws, name)
            mask = unet_mod.predict_mask(model, tile)
            png = np.round(255.0 * mask.prob).astype(np.uint8)
            written.append(write_png(
                ws.path(MASKS_PRED_DIR, name + ".png"), png, ws))
        update_manifest(ws, written)
    logger.info("segmented %d tiles", len(names))
    return {"tiles": len(names)}


def cmd_train_det(config: RunConfig) -> dict:
    """Train the two-stream detector on training tiles + predicted masks."""
    ws = Workspace.create(config)
    with _locked(ws):
        split = load_split(ws)
        names = list_tile_names(ws, split.train_frame_ids)
        if not names:
            raise MissingArtifactError(ws.dir(TILES_DIR), "prepare")
        tiles = [load_tile(ws, n) for n in names]
        masks = [_load_pred_mask(ws, n) for n in names]
        model, history = det_mod.train_detector(tiles, masks, config.detector)
        ckpt = ws.path(CHECKPOINTS_DIR, DETECTOR_CKPT)
        det_mod.save_detector(model, ckpt, config.detector.steps,
                              extra={"provenance": dict(ws.stamp)})
        losses_path = write_json(
            ws.path(REPORTS_DIR, DET_LOSSES_JSON),
            {"history": history, "steps": config.detector.steps}, ws)
        update_manifest(ws, [ckpt, losses_path])
    final = history[-1]["total"] if history else None
    logger.info("detector training done; final total loss %s", final)
    return {"steps": config.detector.steps, "final_loss": final}


def cmd_detect(config: RunConfig) -> dict:
    """Run detection over the test frames and write the detections CSV."""
    ws = Workspace.create(config)
    with _locked(ws):
        ckpt = ws.path(CHECKPOINTS_DIR, DETECTOR_CKPT)
        if not ckpt.is_file():
            raise MissingArtifactError(ckpt, "train-det")
        model, _ = det_mod.load_detector(ckpt)
        split = load_split(ws)
        names = list_tile_names(ws, split.test_frame_ids)
        if not names:
            raise MissingArtifactError(ws.dir(TILES_DIR), "prepare")
        detections: List[det_mod.Detection] = []
        for name in names:
            tile = load_tile(ws, name)
            mask = _load_pred_mask(ws, name)
            boxes, scores = det_mod.detect_tile(model, tile.image, mask)
            detections.extend(
                det_mod.detections_to_frame(tile, boxes, scores))
        csv_path = ws.path(DETECTIONS_DIR, DETECTIONS_CSV)
        write_detections_csv(csv_path, detections, ws)
        update_manifest(ws, [csv_path])
    logger.info("wrote %d detections for %d test frames", len(detections),
                len(split.test_frame_ids))
    return {"detections": len(detections),
            "frames": len(split.test_frame_ids)}


def write_detections_csv(path: Path, detections: Sequence,
                         ws: Workspace) -> Path:
    """CSV of frame-coordinate detections, two decimals throughout."""
    buf = io.StringIO()
    buf.write(f"# config_hash={ws.stamp['config_hash']} "
              f"seed={ws.stamp['seed']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DETECTIONS_HEADER)
    for det in detections:
        cx, cy = det.centroid
        writer.writerow([det.frame_id,
                         f"{det.box[0]:.2f}", f"{det.box[1]:.2f}",
                         f"{det.box[2]:.2f}", f"{det.box[3]:.2f}",
                         f"{det.score:.2f}", f"{cx:.2f}", f"{cy:.2f}"])
    _atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    return path


def read_detections_csv(path: Path) -> List[det_mod.Detection]:
    if not path.is_file():
        raise MissingArtifactError(path, "detect")
    rows = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and not line.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader, None)
    if header is not None and tuple(header) != DETECTIONS_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    out = []
    for row in reader:
        frame_id, x1, y1, x2, y2, score = row[0], *map(float, row[1:6])
        out.append(det_mod.Detection(
            frame_id=frame_id,
            box=np.array([x1, y1, x2, y2], dtype=np.float64),
            score=score))
    return out


def cmd_evaluate(config: RunConfig) -> eval_mod.EvalReport:
    """Score detections against ground truth; write report + comparison."""
    ws = Workspace.create(config)
    with _locked(ws):
        detections = read_detections_csv(ws.path(DETECTIONS_DIR,
                                                 DETECTIONS_CSV))
        split = load_split(ws)
        ann_dir = Path(config.paths.annotations_dir)
        gt_by_frame: Dict[str, list] = {}
        for frame_id in split.test_frame_ids:
            ann_path = ann_dir / (frame_id + ".csv")
            if not ann_path.is_file():
                raise FileNotFoundError(
                    f"frame {frame_id}: missing annotation file {ann_path}")
            anns = data_mod.parse_annotation_file(
                ann_path.read_text(encoding="utf-8"), frame_id)
            gt_by_frame[frame_id] = [(a.centroid_x, a.centroid_y)
                                     for a in anns]
        det_by_frame: Dict[str, tuple] = {}
        for det in detections:
            det_by_frame.setdefault(det.frame_id, ([], []))
            det_by_frame[det.frame_id][0].append(det.centroid)
            det_by_frame[det.frame_id][1].append(det.score)

        report = eval_mod.evaluate_frames(
            det_by_frame, gt_by_frame, radius=config.evaluation.radius,
            inclusive=config.evaluation.inclusive)
        table = eval_mod.compare_to_published(report)
        report_path = write_json(ws.path(REPORTS_DIR, EVAL_JSON),
                                 report.to_dict(), ws)
        table_path = write_text(
            ws.path(REPORTS_DIR, COMPARISON_TXT),
            f"# config_hash={ws.stamp['config_hash']} "
            f"seed={ws.stamp['seed']}\n{table}\n")
        update_manifest(ws, [report_path, table_path])
    logger.info("evaluation: TP=%d FP=%d FN=%d P=%.3f R=%.3f F=%.3f",
                report.tp, report.fp, report.fn, report.precision,
                report.recall, report.f_measure)
    print(table)
    return report


BOX_COLOR = (255, 64, 32)
GT_COLOR = (32, 160, 255)


def render_overlay(frame_image: np.ndarray, detections: Sequence,
                   gt_centroids: Sequence[Tuple[float, float]],
                   radius: float) -> Image.Image:
    """Detection boxes + scores, gt crosses + scoring circles, one image."""
    image = Image.fromarray(frame_image).convert("RGB")
    draw = ImageDraw.Draw(image)
    for cx, cy in gt_centroids:
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius],
                     outline=GT_COLOR, width=1)
        draw.line([cx - 3, cy, cx + 3, cy], fill=GT_COLOR, width=1)
        draw.line([cx, cy - 3, cx, cy + 3], fill=GT_COLOR, width=1)
    for det in detections:
        x1, y1, x2, y2 = (float(v) for v in det.box)
        draw.rectangle([x1, y1, x2, y2], outline=BOX_COLOR, width=1)
        draw.text((x1 + 2, max(y1 - 11, 0)), f"{det.score:.2f}",
                  fill=BOX_COLOR)
    return image


def cmd_visualize(config: RunConfig) -> dict:
    """Emit one annotated overlay PNG per frame with detections."""
    ws = Workspace.create(config)
    with _locked(ws):
        ws.ensure_layout()
        detections = read_detections_csv(ws.path(DETECTIONS_DIR,
                                                 DETECTIONS_CSV))
        by_frame: Dict[str, list] = {}
        for det in detections:
            by_frame.setdefault(det.frame_id, []).append(det)
        split = load_split(ws)
        frames_dir = Path(config.paths.frames_dir)
        ann_dir = Path(config.paths.annotations_dir)
        written = []
        for frame_id in split.test_frame_ids:
            image_path = next(
                (frames_dir / (frame_id + suffix)
                 for suffix in IMAGE_SUFFIXES
                 if (frames_dir / (frame_id + suffix)).is_file()), None)
            if image_path is None:
                raise FileNotFoundError(
                    f"frame {frame_id}: no image in {frames_dir}")
            gt: List[Tuple[float, float]] = []
            ann_path = ann_dir / (frame_id + ".csv")
            if ann_path.is_file():
                anns = data_mod.parse_annotation_file(
                    ann_path.read_text(encoding="utf-8"), frame_id)
                gt = [(a.centroid_x, a.centroid_y) for a in anns]
            overlay = render_overlay(_read_image_rgb(image_path),
                                     by_frame.get(frame_id, []), gt,
                                     config.evaluation.radius)
            out = ws.path(OVERLAYS_DIR, frame_id + ".png")
            written.append(write_png(out, np.asarray(overlay), ws))
        update_manifest(ws, written)
    logger.info("wrote %d overlays", len(written))
    return {"overlays": len(written)}
