"""Two-stream region-based mitosis detector.

Two convolutional streams with identical topology but separate weights:
one on the RGB tile, one on the predicted segmentation map replicated to
three channels. A region proposal network runs on the RGB stream only;
its proposal boxes index both feature maps through a shared max RoI
pooling layer. The RGB RoI block alone feeds box refinement, while the
classification head consumes the bilinear fusion of both blocks
(position-wise outer products summed over the pooled window). The
training objective is the sum of the RPN loss, the fused-feature
classification loss, and the RGB box-regression loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .data import HpfFrame, TileSample, tile_frame
from .geometry import AnchorGrid, generate_anchors

logger = logging.getLogger(__name__)

DETECTOR_CHECKPOINT_HEADER = "detector-v1"

BACKBONE_TINY = "tiny_random"
BACKBONE_VGG16 = "vgg16_pretrained"

VGG16_WEIGHTS_FILENAME = "vgg16-397923af.pth"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

FUSION_FULL = "full_bilinear"
FUSION_COMPACT = "compact_projection"


class PretrainedWeightsMissingError(FileNotFoundError):
    """VGG-16 weights are not in the local cache; names the expected path."""


@dataclass
class RpnConfig:
    hidden_channels: int = 256
    pre_nms_top_k: int = 2000
    post_nms_top_k: int = 300
    nms_thresh: float = 0.7


@dataclass
class RoiConfig:
    pool_size: int = 7
    samples_per_image: int = 64
    fg_fraction: float = 0.25
    append_gt: bool = True


@dataclass
class FusionConfig:
    mode: str = FUSION_FULL
    projection_dim: int = 4096


@dataclass
class AnchorConfig:
    scales: Tuple[float, ...] = (32.0, 64.0, 128.0)
    ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)


@dataclass
class DetectorConfig:
    backbone: str = BACKBONE_TINY
    backbone_channels: int = 32  # tiny_random only; VGG-16 is fixed at 512
    rpn: RpnConfig = field(default_factory=RpnConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    loss_lambda: float = 1.0
    n_cls: int = 256  # anchors sampled per image for the RPN class term
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_decay_step: int = 0  # 0 disables step decay
    lr_decay_factor: float = 0.1
    steps: int = 2000
    score_thresh: float = 0.5
    final_nms_thresh: float = 0.3
    min_box_side: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.backbone not in (BACKBONE_TINY, BACKBONE_VGG16):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.loss_lambda <= 0:
            raise ValueError("loss_lambda must be positive")
        if self.roi.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if not 0 < self.roi.fg_fraction < 1:
            raise ValueError("fg_fraction must be in (0, 1)")
        if self.fusion.mode not in (FUSION_FULL, FUSION_COMPACT):
            raise ValueError(f"unknown fusion mode {self.fusion.mode!r}")
        if self.steps < 0:
            raise ValueError("steps must not be negative")
        if self.n_cls < 1:
            raise ValueError("n_cls must be >= 1")
        if self.backbone_channels < 1:
            raise ValueError("backbone_channels must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.score_thresh <= 1:
            raise ValueError("score_thresh must be in [0, 1]")


class TinyBackbone(nn.Module):
    """Four 3x3 convolutions with three stride-2 reductions (stride 8).

    Desk-scale stand-in for VGG-16 with the same interface: .stride,
    .out_channels, and a feature map whose cells index image pixels at
    (cell + 0.5) * stride.
    """

    stride = 8

    def __init__(self, channels: int = 32, seed: int = 0):
        super().__init__()
        self.out_channels = channels
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        _init_conv_params(self, seed)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return F.relu(self.conv4(x))


# Convolution plan of VGG-16's feature extractor up to conv5_3 + ReLU
# (the last layer before the fifth pooling), stride 16 overall.
_VGG16_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
               512, 512, 512, "M", 512, 512, 512)


class Vgg16Features(nn.Module):
    """VGG-16 convolutional trunk through conv5_3; layer indices match the
    torchvision layout so ImageNet checkpoints load key-for-key."""

    stride = 16

    def __init__(self, seed: int = 0):
        super().__init__()
        layers: List[nn.Module] = []
        in_ch = 3
        for item in _VGG16_PLAN:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(in_ch, int(item), 3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                in_ch = int(item)
        self.features = nn.Sequential(*layers)
        self.out_channels = in_ch
        _init_conv_params(self, seed)

    def forward(self, x):
        return self.features(x)


def _init_conv_params(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def _init_head_params(module: nn.Module, seed: int, std: float = 0.01) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def vgg16_cache_path() -> Path:
    return Path(torch.hub.get_dir()) / "checkpoints" / VGG16_WEIGHTS_FILENAME


def load_vgg16_pretrained(backbone: Vgg16Features,
                          path: Optional[Path] = None) -> None:
    """Load ImageNet VGG-16 weights from the torch hub cache file."""
    path = Path(path) if path is not None else vgg16_cache_path()
    if not path.is_file():
        raise PretrainedWeightsMissingError(
            f"pretrained VGG-16 weights not found; expected "
            f"{VGG16_WEIGHTS_FILENAME} at {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    n_layers = len(backbone.features)
    subset = {}
    for key, value in state.items():
        if not key.startswith("features."):
            continue
        idx = int(key.split(".")[1])
        if idx < n_layers:
            subset[key[len("features."):]] = value
    backbone.features.load_state_dict(subset)


def build_backbones(config: DetectorConfig) -> Tuple[nn.Module, nn.Module]:
    """Two independent parameter sets (RGB, segmentation), same topology."""
    if config.backbone == BACKBONE_TINY:
        rgb = TinyBackbone(config.backbone_channels, seed=config.seed)
        seg = TinyBackbone(config.backbone_channels, seed=config.seed + 1)
    else:
        rgb = Vgg16Features(seed=config.seed)
        seg = Vgg16Features(seed=config.seed + 1)
        load_vgg16_pretrained(rgb)
        load_vgg16_pretrained(seg)
    return rgb, seg


class RegionProposalNetwork(nn.Module):
    """3x3 conv trunk feeding sibling 1x1 objectness and box-delta layers.

    Outputs are flattened cell-major (row, col, anchor-within-cell) to
    line up with AnchorGrid ordering.
    """

    def __init__(self, in_channels: int, hidden_channels: int,
                 anchors_per_cell: int, seed: int = 0):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.conv = nn.Conv2d(in_channels, hidden_channels, 3, padding=1)
        self.objectness = nn.Conv2d(hidden_channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(hidden_channels, 4 * anchors_per_cell, 1)
        _init_head_params(self, seed)

    def forward(self, features: torch.Tensor
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        if features.dim() == 3:
            features = features.unsqueeze(0)
        a = self.anchors_per_cell
        hidden = F.relu(self.conv(features))
        obj = self.objectness(hidden)[0]
        dlt = self.deltas(hidden)[0]
        h, w = obj.shape[-2:]
        obj_flat = obj.permute(1, 2, 0).reshape(-1)
        dlt_flat = dlt.view(a, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
        return obj_flat, dlt_flat


def roi_pool(features: torch.Tensor, box, stride: float,
             pool_size: int) -> torch.Tensor:
    """Max-pool one box region of a (C, H, W) feature map to (C, p, p).

    The box is projected onto the feature lattice with floor/ceil of the
    stride division, then split into p x p sub-bins on integer boundaries
    (bin i spans [floor(i*n/p), ceil((i+1)*n/p))). A box that projects to
    nothing is clamped to a single cell.
    """
    c, fh, fw = features.shape
    x1, y1, x2, y2 = (float(v) for v in np.asarray(box, dtype=np.float64))
    px1 = int(np.clip(math.floor(x1 / stride), 0, fw - 1))
    py1 = int(np.clip(math.floor(y1 / stride), 0, fh - 1))
    px2 = int(np.clip(math.ceil(x2 / stride), px1 + 1, fw))
    py2 = int(np.clip(math.ceil(y2 / stride), py1 + 1, fh))
    w, h = px2 - px1, py2 - py1

    p = pool_size
    rows = []
    for i in range(p):
        ys = py1 + (i * h) // p
        ye = py1 + -((-(i + 1) * h) // p)
        if ye <= ys:
            ye = ys + 1
        cols = []
        for j in range(p):
            xs = px1 + (j * w) // p
            xe = px1 + -((-(j + 1) * w) // p)
            if xe <= xs:
                xe = xs + 1
            cols.append(features[:, ys:ye, xs:xe].amax(dim=(1, 2)))
        rows.append(torch.stack(cols, dim=1))
    return torch.stack(rows, dim=1)


def roi_pool_batch(features: torch.Tensor, boxes: np.ndarray, stride: float,
                   pool_size: int) -> torch.Tensor:
    """(M, C, p, p) stack of roi_pool over each box."""
    if len(boxes) == 0:
        c = features.shape[0]
        return features.new_zeros((0, c, pool_size, pool_size))
    return torch.stack([roi_pool(features, b, stride, pool_size)
                        for b in boxes])


def bilinear_pool_full(f_rgb: torch.Tensor,
                       f_seg: torch.Tensor) -> torch.Tensor:
    """Sum over pooled positions of the per-position outer product.

    Accepts (C, p, p) or batched (M, C, p, p); returns (C*C,) or (M, C*C)
    with the RGB channel as the major axis. No normalization here.
    """
    if f_rgb.shape != f_seg.shape:
        raise ValueError(f"feature blocks differ: {tuple(f_rgb.shape)} "
                         f"vs {tuple(f_seg.shape)}")
    if f_rgb.dim() == 3:
        return torch.einsum("cij,dij->cd", f_rgb, f_seg).reshape(-1)
    m, c = f_rgb.shape[:2]
    return torch.einsum("mcij,mdij->mcd", f_rgb, f_seg).reshape(m, c * c)


class TensorSketch(nn.Module):
    """Count-sketch + FFT projection of per-position outer products.

    Inner products of sketched vectors approximate those of the full
    outer-product features in expectation; hash/sign tables are fixed by
    the seed so the projection is a deterministic part of the model.
    """

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        gen = torch.Generator().manual_seed(seed)
        for name in ("h1", "h2"):
            self.register_buffer(
                name, torch.randint(0, out_dim, (in_dim,), generator=gen))
        for name in ("s1", "s2"):
            signs = torch.randint(0, 2, (in_dim,), generator=gen) * 2 - 1
            self.register_buffer(name, signs.float())

    def _sketch(self, x: torch.Tensor, h: torch.Tensor,
                s: torch.Tensor) -> torch.Tensor:
        # x: (M, C, P) -> (M, out_dim, P)
        out = x.new_zeros((x.shape[0], self.out_dim, x.shape[2]))
        return out.index_add(1, h, s[None, :, None] * x)

    def forward(self, f_rgb: torch.Tensor,
                f_seg: torch.Tensor) -> torch.Tensor:
        """(M, C, p, p) blocks -> (M, out_dim) pooled sketch."""
        m, c = f_rgb.shape[:2]
        x = f_rgb.reshape(m, c, -1)
        y = f_seg.reshape(m, c, -1)
        fx = torch.fft.fft(self._sketch(x, self.h1, self.s1), dim=1)
        fy = torch.fft.fft(self._sketch(y, self.h2, self.s2), dim=1)
        return torch.fft.ifft(fx * fy, dim=1).real.sum(dim=2)


class BilinearFusion(nn.Module):
    """Bilinear pooling of the two RoI blocks, signed-sqrt + L2 normalized.

    full_bilinear keeps the exact C^2 co-occurrence vector; the compact
    mode replaces it with a seeded tensor-sketch projection whose inner
    products approximate the full ones.
    """

    def __init__(self, channels: int, mode: str = FUSION_FULL,
                 projection_dim: int = 4096, seed: int = 0):
        super().__init__()
        self.mode = mode
        self.channels = channels
        if mode == FUSION_FULL:
            self.out_dim = channels * channels
            self.sketch = None
        elif mode == FUSION_COMPACT:
            self.out_dim = projection_dim
            self.sketch = TensorSketch(channels, projection_dim, seed=seed)
        else:
            raise ValueError(f"unknown fusion mode {mode!r}")

    def pool(self, f_rgb: torch.Tensor, f_seg: torch.Tensor) -> torch.Tensor:
        """Raw pooled co-occurrence vector(s), pre-normalization."""
        squeeze = f_rgb.dim() == 3
        if squeeze:
            f_rgb, f_seg = f_rgb.unsqueeze(0), f_seg.unsqueeze(0)
        if f_rgb.shape != f_seg.shape:
            raise ValueError(f"feature blocks differ: {tuple(f_rgb.shape)} "
                             f"vs {tuple(f_seg.shape)}")
        if self.sketch is None:
            out = bilinear_pool_full(f_rgb, f_seg)
        else:
            out = self.sketch(f_rgb, f_seg)
        return out[0] if squeeze else out

    def forward(self, f_rgb: torch.Tensor,
                f_seg: torch.Tensor) -> torch.Tensor:
        raw = self.pool(f_rgb, f_seg)
        signed = torch.sign(raw) * torch.sqrt(torch.abs(raw) + 1e-12)
        norm = signed.norm(dim=-1, keepdim=True)
        return signed / (norm + 1e-12)


class DetectionHeads(nn.Module):
    """Final box refinement (RGB RoI only) and fused-feature classifier."""

    def __init__(self, in_channels: int, pool_size: int, fused_dim: int,
                 seed: int = 0):
        super().__init__()
        self.bbox = nn.Linear(in_channels * pool_size * pool_size, 4)
        self.cls = nn.Linear(fused_dim, 2)
        _init_head_params(self, seed)

    def regress_boxes(self, f_rgb: torch.Tensor) -> torch.Tensor:
        """Refinement deltas from the RGB RoI block alone; (M, 4)."""
        return self.bbox(f_rgb.flatten(1))

    def classify(self, fused: torch.Tensor) -> torch.Tensor:
        """(background, mitosis) logits from the fused vector; (M, 2)."""
        return self.cls(fused)


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth L1: 0.5 x^2 below unit error, |x| - 0.5 above."""
    ax = torch.abs(x)
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def rpn_loss(g, g_star, f, f_star, lam: float, n_cls: int,
             n_reg: int) -> torch.Tensor:
    """Objectness cross entropy plus foreground-gated box regression.

    (1/n_cls) * sum_i CE(g_i, g*_i)  +  lam * (1/n_reg) * sum_i g*_i * SL1(f_i - f*_i)

    g holds predicted objectness probabilities for the sampled anchors,
    g_star their {0,1} labels, f/f_star the predicted and target deltas of
    the same anchors; the g*_i multiplier means only foreground anchors
    contribute regression. n_cls is the sampled mini-batch size, n_reg the
    number of anchor locations.
    """
    if n_cls <= 0 or n_reg <= 0:
        raise ValueError("n_cls and n_reg must be positive")
    g = torch.as_tensor(g, dtype=None if torch.is_tensor(g) else torch.float64)
    g_star = torch.as_tensor(g_star).to(g.dtype)
    f = torch.as_tensor(f, dtype=None if torch.is_tensor(f) else g.dtype)
    f_star = torch.as_tensor(f_star).to(f.dtype)

    p = g.clamp(1e-7, 1 - 1e-7)
    cls = -(g_star * torch.log(p) + (1 - g_star) * torch.log(1 - p)).sum() / n_cls
    reg = (g_star * smooth_l1(f - f_star).sum(dim=-1)).sum() * (lam / n_reg)
    return cls + reg


def total_loss(components: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Sum of the rpn, mitosis, and bbox components, nothing else."""
    return components["rpn"] + components["mitosis"] + components["bbox"]


def propose_regions(obj_logits: np.ndarray, deltas: np.ndarray,
                    grid: AnchorGrid, image_w: float, image_h: float,
                    rpn_cfg: RpnConfig,
                    min_side: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Decode anchors into scored proposals: clip, filter, top-k, NMS.

    Returns (boxes (M, 4), objectness (M,)) in descending score order with
    M <= post_nms_top_k. Score ties break toward the lower anchor index.
    """
    scores = 1.0 / (1.0 + np.exp(-np.asarray(obj_logits, dtype=np.float64)))
    boxes = geometry.decode_boxes(deltas, grid.anchors)
    boxes = geometry.clip_boxes(boxes, image_w, image_h)
    keep = geometry.filter_degenerate(boxes, min_side)
    boxes, scores = boxes[keep], scores[keep]

    order = np.argsort(-scores, kind="stable")[:rpn_cfg.pre_nms_top_k]
    boxes, scores = boxes[order], scores[order]
    kept = geometry.nms(boxes, scores, rpn_cfg.nms_thresh)
    kept = kept[:rpn_cfg.post_nms_top_k]
    return boxes[kept], scores[kept]


@dataclass
class SampledRois:
    """Training mini-batch of proposals with class and box targets."""

    boxes: np.ndarray  # (M, 4)
    cls_targets: np.ndarray  # (M,) int64; 1 = mitosis, 0 = background
    bbox_targets: np.ndarray  # (M, 4); zeros for background rows
    fg_mask: np.ndarray  # (M,) bool


def sample_proposals_for_training(
        proposal_boxes: np.ndarray, gt_boxes: np.ndarray,
        samples_per_image: int, fg_fraction: float,
        rng: np.random.Generator, fg_thresh: float = 0.5,
        bg_thresh: float = 0.1) -> SampledRois:
    """Label proposals against ground truth and draw a balanced sample.

    Foreground/background use the anchor thresholds (IoU > fg_thresh /
    <= bg_thresh; in-between proposals are never sampled). Up to
    round(fg_fraction * samples_per_image) foreground are drawn, the rest
    padded with background. Deterministic given the generator state.
    """
    boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0 or samples_per_image < 1:
        return SampledRois(np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
                           np.zeros((0, 4)), np.zeros(0, dtype=bool))
    if gt.shape[0] == 0:
        max_iou = np.zeros(n)
        best_gt = np.zeros(n, dtype=np.int64)
    else:
        ious = geometry.iou_matrix(boxes, gt)
        best_gt = ious.argmax(axis=1)
        max_iou = ious[np.arange(n), best_gt]

    fg_idx = np.flatnonzero(max_iou > fg_thresh)
    bg_idx = np.flatnonzero(max_iou <= bg_thresh)
    n_fg = min(len(fg_idx), int(round(fg_fraction * samples_per_image)))
    n_bg = min(len(bg_idx), samples_per_image - n_fg)
    fg_pick = rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else \
        np.zeros(0, dtype=np.int64)
    bg_pick = rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else \
        np.zeros(0, dtype=np.int64)
    picked = np.concatenate([fg_pick, bg_pick])

    cls_targets = np.zeros(len(picked), dtype=np.int64)
    cls_targets[:n_fg] = 1
    bbox_targets = np.zeros((len(picked), 4))
    if n_fg:
        bbox_targets[:n_fg] = geometry.encode_boxes(
            gt[best_gt[fg_pick]], boxes[fg_pick])
    fg_mask = np.zeros(len(picked), dtype=bool)
    fg_mask[:n_fg] = True
    return SampledRois(boxes=boxes[picked], cls_targets=cls_targets,
                       bbox_targets=bbox_targets, fg_mask=fg_mask)


class TwoStreamDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.rgb_stream, self.seg_stream = build_backbones(config)
        anchors_per_cell = (len(config.anchors.scales)
                            * len(config.anchors.ratios))
        self.rpn = RegionProposalNetwork(
            self.rgb_stream.out_channels, config.rpn.hidden_channels,
            anchors_per_cell, seed=config.seed + 2)
        self.fusion = BilinearFusion(
            self.rgb_stream.out_channels, mode=config.fusion.mode,
            projection_dim=config.fusion.projection_dim,
            seed=config.seed + 3)
        self.heads = DetectionHeads(
            self.rgb_stream.out_channels, config.roi.pool_size,
            self.fusion.out_dim, seed=config.seed + 4)

    @property
    def stride(self) -> float:
        return float(self.rgb_stream.stride)

    def _dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def prepare_inputs(self, image: np.ndarray,
                       mask: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
        """uint8 tile + [0,1] probability map -> two (1, 3, H, W) tensors.

        The mask is replicated to three channels so both streams share the
        backbone topology; VGG-16 inputs get ImageNet normalization.
        """
        if mask.shape != image.shape[:2]:
            raise ValueError(
                f"mask {mask.shape} does not match image {image.shape[:2]}")
        dtype = self._dtype()
        rgb = torch.from_numpy(
            np.ascontiguousarray(image, dtype=np.float32) / 255.0
        ).permute(2, 0, 1).to(dtype)
        seg = torch.from_numpy(
            np.ascontiguousarray(mask, dtype=np.float32)
        ).to(dtype).expand(3, -1, -1).clone()
        if self.config.backbone == BACKBONE_VGG16:
            mean = torch.tensor(IMAGENET_MEAN, dtype=dtype).view(3, 1, 1)
            std = torch.tensor(IMAGENET_STD, dtype=dtype).view(3, 1, 1)
            rgb = (rgb - mean) / std
            seg = (seg - mean) / std
        return rgb.unsqueeze(0), seg.unsqueeze(0)

    def stream_features(self, image: np.ndarray, mask: np.ndarray
                        ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Last-layer feature maps (C, h, w) of both streams."""
        x_rgb, x_seg = self.prepare_inputs(image, mask)
        return self.rgb_stream(x_rgb)[0], self.seg_stream(x_seg)[0]

    def anchor_grid_for(self, feat_h: int, feat_w: int) -> AnchorGrid:
        return generate_anchors(feat_h, feat_w, self.stride,
                                self.config.anchors.scales,
                                self.config.anchors.ratios)

    def roi_blocks(self, features: torch.Tensor,
                   boxes: np.ndarray) -> torch.Tensor:
        return roi_pool_batch(features, boxes, self.stride,
                              self.config.roi.pool_size)

    def head_outputs(self, f_rgb: torch.Tensor, f_seg: torch.Tensor
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(cls_logits (M, 2), bbox_deltas (M, 4)) for RoI block stacks."""
        bbox = self.heads.regress_boxes(f_rgb)
        cls = self.heads.classify(self.fusion(f_rgb, f_seg))
        return cls, bbox


def training_step(model: TwoStreamDetector, tile: TileSample,
                  mask: np.ndarray, rng: np.random.Generator,
                  proposal_boxes: Optional[np.ndarray] = None
                  ) -> Dict[str, torch.Tensor]:
    """Loss components for one tile: rpn, mitosis, bbox, and their total.

    Proposal boxes are treated as constants (no gradient flows through
    their coordinates); pass `proposal_boxes` to pin them externally,
    e.g. for finite-difference checks.
    """
    cfg = model.config
    h, w = tile.image.shape[:2]
    rgb_feat, seg_feat = model.stream_features(tile.image, mask)
    grid = model.anchor_grid_for(rgb_feat.shape[-2], rgb_feat.shape[-1])
    obj_logits, deltas = model.rpn(rgb_feat)

    labels = geometry.assign_anchor_labels(grid.anchors, tile.gt_boxes)
    fg_idx, bg_idx = labels.foreground, labels.background
    n_fg = min(len(fg_idx), cfg.n_cls // 2)
    n_bg = min(len(bg_idx), cfg.n_cls - n_fg)
    picked = np.concatenate([
        rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else
        np.zeros(0, dtype=np.int64),
        rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else
        np.zeros(0, dtype=np.int64),
    ])
    idx = torch.from_numpy(picked)
    g = torch.sigmoid(obj_logits[idx])
    g_star = torch.from_numpy(
        (labels.labels[picked] == geometry.FOREGROUND).astype(np.float64)
    ).to(g.dtype)
    f_star = torch.from_numpy(labels.targets[picked]).to(g.dtype)
    n_locations = grid.cells[0] * grid.cells[1]
    l_rpn = rpn_loss(g, g_star, deltas[idx], f_star, cfg.loss_lambda,
                     n_cls=len(picked), n_reg=n_locations)

    if proposal_boxes is None:
        with torch.no_grad():
            prop_boxes, _ = propose_regions(
                obj_logits.detach().numpy(), deltas.detach().numpy(),
                grid, w, h, cfg.rpn, cfg.min_box_side)
        if cfg.roi.append_gt and len(tile.gt_boxes):
            prop_boxes = np.vstack([prop_boxes, tile.gt_boxes])
    else:
        prop_boxes = np.asarray(proposal_boxes, dtype=np.float64)

    rois = sample_proposals_for_training(
        prop_boxes, tile.gt_boxes, cfg.roi.samples_per_image,
        cfg.roi.fg_fraction, rng)

    if len(rois.boxes) == 0:
        zero = obj_logits.sum() * 0.0
        l_mitosis, l_bbox = zero, zero.clone()
    else:
        f_rgb = model.roi_blocks(rgb_feat, rois.boxes)
        f_seg = model.roi_blocks(seg_feat, rois.boxes)
        cls_logits, bbox_deltas = model.head_outputs(f_rgb, f_seg)
        cls_t = torch.from_numpy(rois.cls_targets)
        l_mitosis = F.cross_entropy(cls_logits, cls_t)
        if rois.fg_mask.any():
            fg = torch.from_numpy(np.flatnonzero(rois.fg_mask))
            bbox_t = torch.from_numpy(rois.bbox_targets).to(bbox_deltas.dtype)
            err = smooth_l1(bbox_deltas[fg] - bbox_t[fg]).sum()
            l_bbox = err / len(rois.boxes)
        else:
            l_bbox = cls_logits.sum() * 0.0

    components = {"rpn": l_rpn, "mitosis": l_mitosis, "bbox": l_bbox}
    components["total"] = total_loss(components)
    return components


def train_detector(tiles: Sequence[TileSample],
                   masks: Sequence[np.ndarray],
                   config: DetectorConfig,
                   model: Optional[TwoStreamDetector] = None
                   ) -> Tuple[TwoStreamDetector, List[Dict[str, float]]]:
    """Joint single-phase training: one SGD step per tile per step.

    Every tile must come with its predicted segmentation map. Records the
    per-step loss components; deterministic per config.seed.
    """
    config.validate()
    if len(tiles) == 0:
        raise ValueError("no training tiles")
    if len(tiles) != len(masks):
        raise ValueError("tiles and masks must align one-to-one")
    for tile, mask in zip(tiles, masks):
        if mask is None:
            raise ValueError(f"tile {tile.name} has no predicted mask")
        if mask.shape != tile.image.shape[:2]:
            raise ValueError(f"tile {tile.name}: mask shape {mask.shape} "
                             f"does not match the tile")

    if model is None:
        model = TwoStreamDetector(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    order: List[int] = []
    history: List[Dict[str, float]] = []
    model.train()
    for step in range(config.steps):
        if not order:
            order = list(rng.permutation(len(tiles)))
        i = order.pop()
        losses = training_step(model, tiles[i], masks[i], rng)
        optimizer.zero_grad()
        losses["total"].backward()
        optimizer.step()
        if config.lr_decay_step and (step + 1) % config.lr_decay_step == 0:
            for group in optimizer.param_groups:
                group["lr"] *= config.lr_decay_factor
        record = {name: float(value.detach())
                  for name, value in losses.items()}
        record["step"] = step
        history.append(record)
        if step == 0 or (step + 1) % 100 == 0:
            logger.info("detector step %d/%d total %.5f", step + 1,
                        config.steps, record["total"])
    model.eval()
    return model, history


@dataclass
class Detection:
    """One scored detection in frame coordinates."""

    frame_id: str
    box: np.ndarray  # (4,) frame coords
    score: float

    @property
    def centroid(self) -> Tuple[float, float]:
        return (float(self.box[0] + self.box[2]) / 2,
                float(self.box[1] + self.box[3]) / 2)


def detect_tile(model: TwoStreamDetector, image: np.ndarray,
                mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Detections on one tile: (boxes (K, 4), scores (K,)), tile-local."""
    cfg = model.config
    h, w = image.shape[:2]
    model.eval()
    with torch.no_grad():
        rgb_feat, seg_feat = model.stream_features(image, mask)
        grid = model.anchor_grid_for(rgb_feat.shape[-2], rgb_feat.shape[-1])
        obj_logits, deltas = model.rpn(rgb_feat)
        prop_boxes, _ = propose_regions(obj_logits.numpy(), deltas.numpy(),
                                        grid, w, h, cfg.rpn,
                                        cfg.min_box_side)
        if len(prop_boxes) == 0:
            return np.zeros((0, 4)), np.zeros(0)
        f_rgb = model.roi_blocks(rgb_feat, prop_boxes)
        f_seg = model.roi_blocks(seg_feat, prop_boxes)
        cls_logits, bbox_deltas = model.head_outputs(f_rgb, f_seg)
        scores = torch.softmax(cls_logits, dim=-1)[:, 1].numpy()

    boxes = geometry.decode_boxes(bbox_deltas.numpy(), prop_boxes)
    boxes = geometry.clip_boxes(boxes, w, h)
    keep = geometry.filter_degenerate(boxes, cfg.min_box_side)
    boxes, scores = boxes[keep], scores[keep]
    keep = np.flatnonzero(scores >= cfg.score_thresh)
    boxes, scores = boxes[keep], scores[keep]
    kept = geometry.nms(boxes, scores, cfg.final_nms_thresh)
    return boxes[kept], scores[kept]


def detections_to_frame(tile: TileSample, boxes: np.ndarray,
                        scores: np.ndarray) -> List[Detection]:
    """Map tile-local detections back through offset/scale to frame coords."""
    out = []
    for box, score in zip(boxes, scores):
        x1, y1 = tile.to_frame_xy(box[0], box[1])
        x2, y2 = tile.to_frame_xy(box[2], box[3])
        out.append(Detection(frame_id=tile.parent_frame_id,
                             box=np.array([x1, y1, x2, y2]),
                             score=float(score)))
    return out


def detect_tiles(model: TwoStreamDetector, tiles: Sequence[TileSample],
                 masks: Sequence[np.ndarray]) -> List[Detection]:
    """Run the detector over prepared tiles+masks; frame-coordinate output."""
    detections: List[Detection] = []
    for tile, mask in zip(tiles, masks):
        boxes, scores = detect_tile(model, tile.image, mask)
        detections.extend(detections_to_frame(tile, boxes, scores))
    return detections


def infer_frame(frame: HpfFrame, unet_model, model: TwoStreamDetector,
                grid: int = 4, scale: float = 1.7) -> List[Detection]:
    """Full single-frame path: tile, segment, detect, map back, merge."""
    from .unet import predict_mask

    tiles = tile_frame(frame, grid=grid, scale=scale)
    masks = [predict_mask(unet_model, tile).prob for tile in tiles]
    return detect_tiles(model, tiles, masks)


def save_detector(model: TwoStreamDetector, path, steps_trained: int,
                  extra: Optional[dict] = None) -> None:
    payload = {
        "header": DETECTOR_CHECKPOINT_HEADER,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "steps_trained": steps_trained,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_detector(path) -> Tuple[TwoStreamDetector, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    header = payload.get("header")
    if header != DETECTOR_CHECKPOINT_HEADER:
        raise ValueError(
            f"{path}: expected checkpoint header "
            f"{DETECTOR_CHECKPOINT_HEADER!r}, found {header!r}")
    from .structs import from_nested_dict

    config = from_nested_dict(DetectorConfig, payload["config"])
    was_vgg = config.backbone == BACKBONE_VGG16
    if was_vgg:
        # Weights come from the checkpoint; skip the pretrained-cache load.
        config.backbone = BACKBONE_VGG16
        model = TwoStreamDetector.__new__(TwoStreamDetector)
        nn.Module.__init__(model)
        model.config = config
        model.rgb_stream = Vgg16Features(seed=config.seed)
        model.seg_stream = Vgg16Features(seed=config.seed + 1)
        anchors_per_cell = (len(config.anchors.scales)
                            * len(config.anchors.ratios))
        model.rpn = RegionProposalNetwork(
            model.rgb_stream.out_channels, config.rpn.hidden_channels,
            anchors_per_cell, seed=config.seed + 2)
        model.fusion = BilinearFusion(
            model.rgb_stream.out_channels, mode=config.fusion.mode,
            projection_dim=config.fusion.projection_dim,
            seed=config.seed + 3)
        model.heads = DetectionHeads(
            model.rgb_stream.out_channels, config.roi.pool_size,
            model.fusion.out_dim, seed=config.seed + 4)
    else:
        model = TwoStreamDetector(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
