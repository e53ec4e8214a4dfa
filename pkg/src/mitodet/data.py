"""High-power-field ingestion, tiling, ground-truth synthesis, and splits.

A frame is one HPF slide image (native contest frames are 1539x1376 RGB)
with centroid annotations. Frames are cut into a 4x4 grid of equal tiles,
each tile is upscaled (default 1.7x) so mitoses are large enough for the
detector, and annotations are mapped into tile-local coordinates. The
segmentation stream trains against binary disc masks drawn around each
centroid. A deterministic synthetic generator produces desk-scale frames
in the same formats so the whole pipeline can run without contest data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

APERIO = "Aperio"
HAMAMATSU = "Hamamatsu"

# Native contest geometry; synthetic frames may use any size.
NATIVE_WIDTH = 1539
NATIVE_HEIGHT = 1376

DEFAULT_GRID = 4
DEFAULT_SCALE = 1.7
# Pre-scaling pixels; both follow the 32 px scoring radius of the contest.
DEFAULT_BOX_HALF_SIDE = 32.0
DEFAULT_MASK_RADIUS = 15.0


class AnnotationParseError(ValueError):
    """Raised for a malformed annotation row, naming the offending line."""


@dataclass
class MitosisAnnotation:
    """One annotated mitosis center, in frame pixel coordinates."""

    centroid_x: int
    centroid_y: int
    confidence_raters: Optional[int] = None


@dataclass
class HpfFrame:
    """One high-power-field image plus its mitosis annotations."""

    frame_id: str
    scanner: str
    image: np.ndarray  # (H, W, 3) uint8
    annotations: List[MitosisAnnotation] = field(default_factory=list)

    @property
    def group(self) -> str:
        return frame_group(self.frame_id)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"frame {self.frame_id}: image must be HxWx3")
        for ann in self.annotations:
            if not (0 <= ann.centroid_x < self.width
                    and 0 <= ann.centroid_y < self.height):
                raise ValueError(
                    f"frame {self.frame_id}: centroid "
                    f"({ann.centroid_x}, {ann.centroid_y}) outside "
                    f"{self.width}x{self.height} image")


@dataclass
class TileSample:
    """One frame subsection plus the affine transform back to frame coords.

    The crop window is [offset_x, offset_x + crop_w) x [offset_y,
    offset_y + crop_h) in pre-scaling frame pixels; the stored image is
    that window resized by `scale`. Tile-local coordinates are
    (frame - offset) * scale, so frame coordinates are offset + local / scale.
    """

    parent_frame_id: str
    tile_index: int  # 0..15, row-major
    image: np.ndarray  # (h, w, 3) uint8, post-scaling
    offset_x: int
    offset_y: int
    crop_w: int
    crop_h: int
    scale: float
    gt_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    gt_centroids: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def name(self) -> str:
        return f"{self.parent_frame_id}_{self.tile_index:02d}"

    def to_frame_xy(self, x: float, y: float) -> Tuple[float, float]:
        return self.offset_x + x / self.scale, self.offset_y + y / self.scale

    def to_tile_xy(self, x: float, y: float) -> Tuple[float, float]:
        return (x - self.offset_x) * self.scale, (y - self.offset_y) * self.scale


@dataclass
class SegTarget:
    """Binary disc mask aligned to one tile."""

    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    frame_id: str
    tile_index: int


@dataclass
class SplitSpec:
    """Frame-id partition into detector train/test plus the U-net subset."""

    train_frame_ids: List[str]
    test_frame_ids: List[str]
    unet_train_frame_ids: List[str]

    def validate(self, allow_overlap: bool = False) -> None:
        train, test = set(self.train_frame_ids), set(self.test_frame_ids)
        if not allow_overlap and train & test:
            raise ValueError(f"train/test overlap: {sorted(train & test)}")
        if not set(self.unet_train_frame_ids) <= train:
            raise ValueError("unet_train must be a subset of train")


def frame_group(frame_id: str) -> str:
    """Frame group = id up to the first underscore (A03_07 -> A03)."""
    return frame_id.split("_", 1)[0]


def scanner_for_frame_id(frame_id: str) -> str:
    """Infer scanner from the leading letter (contest naming convention)."""
    head = frame_id[:1].upper()
    if head == "A":
        return APERIO
    if head == "H":
        return HAMAMATSU
    logger.warning("frame %s: cannot infer scanner from id, assuming Aperio",
                   frame_id)
    return APERIO


def parse_annotation_file(text: str, frame_id: str) -> List[MitosisAnnotation]:
    """Parse one comma-separated annotation file.

    Each non-empty row starts with integer centroid x,y; any trailing
    fields beyond an optional integer rater count are ignored. An empty
    file is a legitimate frame with zero mitoses.
    """
    annotations = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 2:
            raise AnnotationParseError(
                f"{frame_id}: line {lineno}: expected at least 'x,y', "
                f"got {raw!r}")
        try:
            x, y = int(fields[0]), int(fields[1])
        except ValueError:
            raise AnnotationParseError(
                f"{frame_id}: line {lineno}: non-integer centroid in {raw!r}"
            ) from None
        if x < 0 or y < 0:
            raise AnnotationParseError(
                f"{frame_id}: line {lineno}: negative centroid in {raw!r}")
        raters = None
        if len(fields) > 2:
            try:
                raters = int(fields[2])
            except ValueError:
                raters = None
        annotations.append(MitosisAnnotation(x, y, raters))
    return annotations


def format_annotation_file(annotations: Sequence[MitosisAnnotation]) -> str:
    rows = []
    for ann in annotations:
        if ann.confidence_raters is None:
            rows.append(f"{ann.centroid_x},{ann.centroid_y}")
        else:
            rows.append(
                f"{ann.centroid_x},{ann.centroid_y},{ann.confidence_raters}")
    return "\n".join(rows) + ("\n" if rows else "")


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an HxW or HxWx3 uint8 array."""
    mode = "RGB" if image.ndim == 3 else "L"
    pil = Image.fromarray(image, mode=mode)
    return np.asarray(pil.resize((width, height), Image.BILINEAR))


def tile_frame(frame: HpfFrame, grid: int = DEFAULT_GRID,
               scale: float = DEFAULT_SCALE) -> List[TileSample]:
    """Cut a frame into grid x grid equal tiles and upscale each.

    Tile size is floor(W/grid) x floor(H/grid); remainder pixels on the
    right/bottom edges are discarded. Each crop is then resized by `scale`
    (bilinear, output dims rounded to nearest). Annotations are mapped
    separately by map_annotations_to_tile.
    """
    if scale < 1:
        raise ValueError("scale must be >= 1")
    tw, th = frame.width // grid, frame.height // grid
    if tw < 1 or th < 1:
        raise ValueError(
            f"frame {frame.frame_id}: {frame.width}x{frame.height} too small "
            f"for a {grid}x{grid} grid")
    out_w = int(math.floor(tw * scale + 0.5))
    out_h = int(math.floor(th * scale + 0.5))

    tiles = []
    for row in range(grid):
        for col in range(grid):
            ox, oy = col * tw, row * th
            crop = frame.image[oy:oy + th, ox:ox + tw]
            image = crop if scale == 1.0 else resize_image(crop, out_w, out_h)
            tiles.append(TileSample(
                parent_frame_id=frame.frame_id,
                tile_index=row * grid + col,
                image=np.ascontiguousarray(image),
                offset_x=ox, offset_y=oy,
                crop_w=tw, crop_h=th,
                scale=float(scale),
            ))
    return tiles


def centroid_to_box(centroid: Tuple[float, float],
                    half_side: float) -> np.ndarray:
    """Axis-aligned square of the given half side around a centroid, unclipped."""
    if half_side <= 0:
        raise ValueError("half_side must be positive")
    x, y = centroid
    return np.array([x - half_side, y - half_side,
                     x + half_side, y + half_side], dtype=np.float64)


def map_annotations_to_tile(
        annotations: Sequence[MitosisAnnotation], tile: TileSample,
        box_half_side: float = DEFAULT_BOX_HALF_SIDE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Project frame annotations into one tile.

    A centroid belongs to the tile iff its pre-scaling position falls in
    the tile's crop window. Returned centroids are tile-local post-scaling;
    each gets a square box of half side round(box_half_side * scale),
    clipped to the tile image bounds.
    """
    h, w = tile.image.shape[:2]
    half = round(box_half_side * tile.scale)
    centroids, boxes = [], []
    for ann in annotations:
        if not (tile.offset_x <= ann.centroid_x < tile.offset_x + tile.crop_w
                and tile.offset_y <= ann.centroid_y < tile.offset_y + tile.crop_h):
            continue
        cx, cy = tile.to_tile_xy(ann.centroid_x, ann.centroid_y)
        centroids.append((cx, cy))
        box = centroid_to_box((cx, cy), half)
        boxes.append(np.clip(box, [0, 0, 0, 0], [w, h, w, h]))
    if not centroids:
        return np.zeros((0, 2)), np.zeros((0, 4))
    return np.asarray(centroids, dtype=np.float64), np.stack(boxes)


def tile_frame_with_annotations(
        frame: HpfFrame, grid: int = DEFAULT_GRID,
        scale: float = DEFAULT_SCALE,
        box_half_side: float = DEFAULT_BOX_HALF_SIDE) -> List[TileSample]:
    """tile_frame plus annotation mapping and dropped-strip accounting."""
    tiles = tile_frame(frame, grid=grid, scale=scale)
    mapped = 0
    for tile in tiles:
        tile.gt_centroids, tile.gt_boxes = map_annotations_to_tile(
            frame.annotations, tile, box_half_side=box_half_side)
        mapped += len(tile.gt_centroids)
    dropped = len(frame.annotations) - mapped
    if dropped:
        tw, th = frame.width // grid, frame.height // grid
        logger.warning(
            "frame %s: %d annotation(s) fell in the discarded edge strips "
            "beyond (%d, %d) and were dropped", frame.frame_id, dropped,
            grid * tw, grid * th)
    return tiles


def synth_mask(height: int, width: int, centroids,
               disc_radius: float) -> np.ndarray:
    """Binary mask that is 1 on pixels within disc_radius of any centroid."""
    if disc_radius <= 0:
        raise ValueError("disc_radius must be positive")
    mask = np.zeros((height, width), dtype=np.uint8)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    if centroids.size == 0:
        return mask
    ys, xs = np.ogrid[0:height, 0:width]
    for cx, cy in centroids:
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= disc_radius ** 2
        mask[inside] = 1
    return mask


def make_seg_target(tile: TileSample,
                    mask_radius: float = DEFAULT_MASK_RADIUS) -> SegTarget:
    """Disc mask for one tile; radius is pre-scaling pixels, scaled with it."""
    h, w = tile.image.shape[:2]
    mask = synth_mask(h, w, tile.gt_centroids, mask_radius * tile.scale)
    return SegTarget(mask=mask, frame_id=tile.parent_frame_id,
                     tile_index=tile.tile_index)


def make_split(frames: Iterable, test_group: str) -> SplitSpec:
    """Hold out one frame group for testing; U-net trains on Aperio frames.

    `frames` is any iterable of objects with frame_id and scanner
    attributes. Every frame whose group equals test_group goes to test,
    the rest to train; the U-net subset is the Aperio-scanner half of
    train (empty with a warning if there are none).
    """
    frames = list(frames)
    groups = {frame_group(f.frame_id) for f in frames}
    if test_group not in groups:
        raise ValueError(
            f"unknown test group {test_group!r}; available: {sorted(groups)}")
    train = [f.frame_id for f in frames if frame_group(f.frame_id) != test_group]
    test = [f.frame_id for f in frames if frame_group(f.frame_id) == test_group]
    by_id = {f.frame_id: f for f in frames}
    unet_train = [fid for fid in train if by_id[fid].scanner == APERIO]
    if not unet_train:
        logger.warning("no Aperio frames in the training split; "
                       "the U-net training subset is empty")
    return SplitSpec(train_frame_ids=train, test_frame_ids=test,
                     unet_train_frame_ids=unet_train)


def overfit_split(frames: Iterable) -> SplitSpec:
    """train = test = all frames, for pipeline-wiring overfit runs only."""
    frames = list(frames)
    ids = [f.frame_id for f in frames]
    unet_train = [f.frame_id for f in frames if f.scanner == APERIO]
    if not unet_train:
        logger.warning("no Aperio frames; the U-net training subset is empty")
    return SplitSpec(train_frame_ids=ids, test_frame_ids=list(ids),
                     unet_train_frame_ids=unet_train)


def generate_synthetic_dataset(
        num_frames: int = 8,
        frame_width: int = 224,
        frame_height: int = 224,
        blobs_per_frame: int = 3,
        blob_radius: float = 7.0,
        blob_radius_jitter: float = 2.0,
        groups: Sequence[str] = ("A01", "A02", "H01", "H02"),
        grid: int = DEFAULT_GRID,
        tile_margin: float = 16.0,
        min_separation: float = 48.0,
        seed: int = 0) -> List[HpfFrame]:
    """Deterministic textured frames with dark elliptical mitosis blobs.

    Frames are assigned round-robin to `groups` (ids like A01_00) so both
    scanners and a holdout group exist. Blob centers stay at least
    tile_margin pixels away from every grid/4 tiling line (a blob never
    straddles two tiles) and min_separation pixels apart from each other.
    Identical seeds give bit-identical frames.
    """
    rng = np.random.default_rng(seed)
    per_group = {g: 0 for g in groups}
    frames = []
    for k in range(num_frames):
        group = groups[k % len(groups)]
        frame_id = f"{group}_{per_group[group]:02d}"
        per_group[group] += 1
        image = _synthetic_background(frame_height, frame_width, rng)
        centers = _place_blob_centers(
            frame_width, frame_height, blobs_per_frame, grid,
            tile_margin, min_separation, rng)
        annotations = []
        for cx, cy in centers:
            radius = blob_radius + rng.uniform(-blob_radius_jitter,
                                               blob_radius_jitter)
            _paint_blob(image, cx, cy, max(radius, 2.0), rng)
            annotations.append(MitosisAnnotation(int(cx), int(cy)))
        frames.append(HpfFrame(
            frame_id=frame_id,
            scanner=scanner_for_frame_id(frame_id),
            image=image,
            annotations=annotations,
        ))
    return frames


def _synthetic_background(height: int, width: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Pinkish H&E-like background with smooth blotches and fine grain."""
    base = np.array([225.0, 202.0, 216.0])
    image = np.tile(base, (height, width, 1))
    blotch = gaussian_filter(rng.normal(0.0, 1.0, (height, width)), sigma=9.0)
    blotch *= 14.0 / max(blotch.std(), 1e-9)
    grain = rng.normal(0.0, 3.0, (height, width, 3))
    image += blotch[:, :, None] + grain
    # A few pale nuclei-like smudges for texture; clearly lighter than blobs.
    for _ in range(max(1, height * width // 4000)):
        sx = rng.uniform(0, width)
        sy = rng.uniform(0, height)
        sr = rng.uniform(2.0, 5.0)
        _stain(image, sx, sy, sr, np.array([185.0, 155.0, 190.0]), 0.5)
    return np.clip(image, 0, 255).astype(np.uint8)


def _stain(image: np.ndarray, cx: float, cy: float, radius: float,
           color: np.ndarray, opacity: float) -> None:
    h, w = image.shape[:2]
    x0, x1 = max(0, int(cx - radius - 2)), min(w, int(cx + radius + 3))
    y0, y1 = max(0, int(cy - radius - 2)), min(h, int(cy + radius + 3))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) / radius
    alpha = np.clip(1.5 - 1.5 * d, 0.0, 1.0) * opacity
    patch = image[y0:y1, x0:x1]
    patch += alpha[:, :, None] * (color - patch)


def _place_blob_centers(width: int, height: int, count: int, grid: int,
                        margin: float, min_separation: float,
                        rng: np.random.Generator) -> List[Tuple[float, float]]:
    tw, th = width // grid, height // grid
    if count > grid * grid:
        raise ValueError("more blobs than tiles requested")
    if 2 * margin >= min(tw, th):
        raise ValueError("tile_margin leaves no room inside a tile")
    centers: List[Tuple[float, float]] = []
    tiles = rng.permutation(grid * grid)
    ti = 0
    while len(centers) < count and ti < len(tiles):
        row, col = divmod(int(tiles[ti]), grid)
        ti += 1
        for _ in range(40):
            cx = col * tw + rng.uniform(margin, tw - margin)
            cy = row * th + rng.uniform(margin, th - margin)
            if all(math.hypot(cx - px, cy - py) >= min_separation
                   for px, py in centers):
                centers.append((cx, cy))
                break
    if len(centers) < count:
        raise ValueError("could not place all blobs; relax margin/separation")
    return centers


def _paint_blob(image: np.ndarray, cx: float, cy: float, radius: float,
                rng: np.random.Generator) -> None:
    """Dark elliptical blob with a soft edge, centered on (cx, cy)."""
    a = radius * rng.uniform(0.85, 1.15)
    b = radius * rng.uniform(0.7, 1.0)
    theta = rng.uniform(0, math.pi)
    color = np.array([64.0, 38.0, 96.0]) + rng.normal(0, 6.0, 3)
    h, w = image.shape[:2]
    r = max(a, b)
    x0, x1 = max(0, int(cx - r - 3)), min(w, int(cx + r + 4))
    y0, y1 = max(0, int(cy - r - 3)), min(h, int(cy + r + 4))
    ys, xs = np.mgrid[y0:y1, x0:x1]
    u = (xs - cx) * math.cos(theta) + (ys - cy) * math.sin(theta)
    v = -(xs - cx) * math.sin(theta) + (ys - cy) * math.cos(theta)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    alpha = np.clip((1.0 - d) * 2.5 + 0.5, 0.0, 1.0)
    patch = image[y0:y1, x0:x1].astype(np.float64)
    patch += alpha[:, :, None] * (color - patch)
    image[y0:y1, x0:x1] = np.clip(patch, 0, 255).astype(np.uint8)
