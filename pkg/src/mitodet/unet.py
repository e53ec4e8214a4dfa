"""U-net that produces the probability maps for the detector's second stream.

Classic encoder/decoder with skip connections: repeated pairs of 3x3
convolutions + ReLU and 2x2/stride-2 max pooling on the way down, 2x2
up-convolutions with two more 3x3 convolutions on the way up, and a final
1x1 convolution to a single sigmoid channel. Channel counts double per
encoder level and halve back up; at the defaults (depth 4, base 64) the
network has 23 learned layers. `same` padding keeps masks aligned with
tiles; `valid` reproduces the unpadded shrinkage of the original design
with center-cropped skips.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SegTarget, TileSample

logger = logging.getLogger(__name__)

UNET_CHECKPOINT_HEADER = "unet-v1"

PADDING_SAME = "same"
PADDING_VALID = "valid"


@dataclass
class UnetConfig:
    depth: int = 4
    base_channels: int = 64
    padding_mode: str = PADDING_SAME
    learning_rate: float = 1e-3
    momentum: float = 0.9
    iterations: int = 80
    batch_size: int = 1
    threshold: float = 0.5  # binarization for visualization only
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.padding_mode not in (PADDING_SAME, PADDING_VALID):
            raise ValueError(f"unknown padding_mode {self.padding_mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must not be negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class DoubleConv(nn.Module):
    """Two 3x3 convolutions, each followed by a ReLU."""

    def __init__(self, in_ch: int, out_ch: int, padding: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=padding)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=padding)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class UNet(nn.Module):
    def __init__(self, config: UnetConfig):
        super().__init__()
        config.validate()
        self.config = config
        pad = 1 if config.padding_mode == PADDING_SAME else 0
        base, depth = config.base_channels, config.depth

        downs = []
        in_ch = 3
        for level in range(depth):
            out_ch = base * 2 ** level
            downs.append(DoubleConv(in_ch, out_ch, pad))
            in_ch = out_ch
        self.downs = nn.ModuleList(downs)
        self.pool = nn.MaxPool2d(2, 2)
        self.bottleneck = DoubleConv(in_ch, base * 2 ** depth, pad)

        ups, up_convs = [], []
        for level in reversed(range(depth)):
            out_ch = base * 2 ** level
            ups.append(nn.ConvTranspose2d(out_ch * 2, out_ch, 2, stride=2))
            up_convs.append(DoubleConv(out_ch * 2, out_ch, pad))
        self.ups = nn.ModuleList(ups)
        self.up_convs = nn.ModuleList(up_convs)
        self.head = nn.Conv2d(base, 1, 1)
        self._init_parameters(config.seed)

    def _init_parameters(self, seed: int) -> None:
        """Fan-in-scaled normal weights, zero biases, fixed by seed."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                    m.bias.zero_()

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        check_input_size(self.config, x.shape[-2], x.shape[-1])
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, up_conv, skip in zip(self.ups, self.up_convs,
                                     reversed(skips)):
            x = up(x)
            if skip.shape[-2:] != x.shape[-2:]:
                skip = _center_crop(skip, x.shape[-2], x.shape[-1])
            x = up_conv(torch.cat([skip, x], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probability map in [0, 1], shape (B, 1, h', w')."""
        return torch.sigmoid(self.forward_logits(x))


def _center_crop(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    dy = (t.shape[-2] - h) // 2
    dx = (t.shape[-1] - w) // 2
    return t[..., dy:dy + h, dx:dx + w]


def build_unet(config: UnetConfig) -> UNet:
    return UNet(config)


def learned_layer_count(model: UNet) -> int:
    """Number of learned layers (convolutions + up-convolutions)."""
    return sum(1 for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)))


def output_size(config: UnetConfig, h: int, w: int) -> Tuple[int, int]:
    """Output dims for an input of (h, w); raises if the size is infeasible."""
    if config.padding_mode == PADDING_SAME:
        check_input_size(config, h, w)
        return h, w
    for level in range(config.depth):
        h, w = h - 4, w - 4
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ValueError(
                f"input infeasible for valid-mode depth {config.depth}: "
                f"level {level} would pool an odd or empty {h}x{w} map")
        h, w = h // 2, w // 2
    h, w = h - 4, w - 4
    if h < 2 or w < 2:
        raise ValueError("input too small for the bottleneck")
    for _ in range(config.depth):
        h, w = h * 2 - 4, w * 2 - 4
    return h, w


def check_input_size(config: UnetConfig, h: int, w: int) -> None:
    if config.padding_mode == PADDING_SAME:
        step = 2 ** config.depth
        if h % step or w % step:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^depth = {step}; "
                f"use resize_for_unet first")
    else:
        output_size(config, h, w)  # raises when infeasible


def resize_for_unet(image: np.ndarray,
                    depth: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Downsize a tile so both dims are multiples of 2^depth.

    Returns the resized image and the original (h, w) so a predicted mask
    can be mapped back with resize_mask_to.
    """
    from .data import resize_image

    step = 2 ** depth
    h, w = image.shape[:2]
    new_h, new_w = (h // step) * step, (w // step) * step
    if new_h < step or new_w < step:
        raise ValueError(f"tile {h}x{w} smaller than 2^depth = {step}")
    if (new_h, new_w) == (h, w):
        return image, (h, w)
    return resize_image(image, new_w, new_h), (h, w)


def resize_mask_to(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a float probability map to (h, w)."""
    if mask.shape == (h, w):
        return mask.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))
    out = F.interpolate(t[None, None], size=(h, w), mode="bilinear",
                        align_corners=False)
    return out[0, 0].clamp(0.0, 1.0).numpy()


@dataclass
class SegMask:
    """Predicted mitosis-probability map aligned to one tile."""

    prob: np.ndarray  # (h, w) float32 in [0, 1]
    frame_id: str
    tile_index: int

    @property
    def name(self) -> str:
        return f"{self.frame_id}_{self.tile_index:02d}"


def image_to_input(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> (1, 3, H, W) float tensor in [0, 1]."""
    arr = np.ascontiguousarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def _training_pair(tile: TileSample, target: SegTarget,
                   config: UnetConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """Resized input tensor and the matching soft target map."""
    image, _ = resize_for_unet(tile.image, config.depth)
    x = image_to_input(image)
    t = resize_mask_to(target.mask.astype(np.float32), image.shape[0],
                       image.shape[1])
    return x, torch.from_numpy(t)[None, None]


def train_unet(tiles: Sequence[TileSample], targets: Sequence[SegTarget],
               config: UnetConfig,
               model: Optional[UNet] = None) -> Tuple[UNet, List[float]]:
    """Train for exactly config.iterations epochs of per-pixel BCE.

    `tiles` and `targets` are the U-net training subset (pair i of each);
    pass them pre-filtered to the Aperio training frames. Returns the
    model and the per-epoch mean training loss. Deterministic per
    config.seed: identical seeds give identical loss series and weights.
    """
    config.validate()
    if len(tiles) == 0:
        raise ValueError("U-net training subset is empty")
    if len(tiles) != len(targets):
        raise ValueError("tiles and targets must align one-to-one")
    if model is None:
        model = build_unet(config)

    pairs = [_training_pair(tile, target, config)
             for tile, target in zip(tiles, targets)]
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    losses: List[float] = []
    model.train()
    for epoch in range(config.iterations):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            xs = torch.cat([pairs[i][0] for i in batch])
            ts = torch.cat([pairs[i][1] for i in batch])
            logits = model.forward_logits(xs)
            if logits.shape[-2:] != ts.shape[-2:]:
                ts = _center_crop(ts, logits.shape[-2], logits.shape[-1])
            loss = F.binary_cross_entropy_with_logits(logits, ts)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
        losses.append(epoch_loss / len(pairs))
        if epoch == 0 or (epoch + 1) % 10 == 0:
            logger.info("unet epoch %d/%d loss %.5f", epoch + 1,
                        config.iterations, losses[-1])
    model.eval()
    return model, losses


def predict_mask(model: UNet, tile: TileSample) -> SegMask:
    """Probability map for one tile, resized back to the tile's dims."""
    model.eval()
    image, (h, w) = resize_for_unet(tile.image, model.config.depth)
    with torch.no_grad():
        prob = model(image_to_input(image))[0, 0].numpy()
    # In valid mode the map is smaller than the input; the inverse
    # transform is a plain bilinear resize back to tile dims either way.
    return SegMask(prob=resize_mask_to(prob, h, w), frame_id=tile.parent_frame_id,
                   tile_index=tile.tile_index)


def predict_masks(model: UNet, tiles: Sequence[TileSample]) -> List[SegMask]:
    """One mask per tile, for training and test tiles alike."""
    return [predict_mask(model, tile) for tile in tiles]


def save_unet(model: UNet, path, iterations_trained: int,
              extra: Optional[dict] = None) -> None:
    payload = {
        "header": UNET_CHECKPOINT_HEADER,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "iterations_trained": iterations_trained,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_unet(path) -> Tuple[UNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    header = payload.get("header")
    if header != UNET_CHECKPOINT_HEADER:
        raise ValueError(
            f"{path}: expected checkpoint header "
            f"{UNET_CHECKPOINT_HEADER!r}, found {header!r}")
    model = UNet(UnetConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
