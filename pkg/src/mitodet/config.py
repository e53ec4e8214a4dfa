"""Single-file run configuration shared by every pipeline command.

The config is a YAML document mirroring a tree of dataclasses. Loading is
strict (unknown keys fail with their dotted path), every field has a
default, and re-emitting a config always writes the complete tree, so a
dumped file pins every knob of the run. A stable hash of the canonical
form stamps output artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .detector import DetectorConfig
from .structs import from_nested_dict, to_nested_dict
from .unet import UnetConfig
from . import data as data_mod


@dataclass
class PathsConfig:
    frames_dir: str = "data/frames"
    annotations_dir: str = "data/annotations"
    work_dir: str = "work"


@dataclass
class TilingConfig:
    grid: int = data_mod.DEFAULT_GRID
    scale: float = data_mod.DEFAULT_SCALE
    box_half_side: float = data_mod.DEFAULT_BOX_HALF_SIDE
    mask_radius: float = data_mod.DEFAULT_MASK_RADIUS
    jpeg_quality: int = 95  # for TIFF ingestion conversion

    def validate(self) -> None:
        if self.grid < 1:
            raise ValueError("tiling.grid must be >= 1")
        if self.scale < 1:
            raise ValueError("tiling.scale must be >= 1")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("tiling.jpeg_quality must be in [1, 100]")


@dataclass
class SplitConfig:
    test_group: str = "A03"
    # train = test = all frames; pipeline-wiring/overfit runs only.
    overfit: bool = False


@dataclass
class SyntheticConfig:
    """Built-in blob dataset written to the data dirs before ingestion."""

    enabled: bool = False
    num_frames: int = 8
    frame_width: int = 224
    frame_height: int = 224
    blobs_per_frame: int = 3
    blob_radius: float = 7.0
    blob_radius_jitter: float = 2.0
    tile_margin: float = 16.0
    min_separation: float = 48.0
    seed: int = 0


@dataclass
class EvalConfig:
    radius: float = 32.0
    inclusive: bool = True

    def validate(self) -> None:
        if self.radius <= 0:
            raise ValueError("evaluation.radius must be positive")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> None:
        self.tiling.validate()
        self.evaluation.validate()
        self.unet.validate()
        self.detector.validate()

    @property
    def work_dir(self) -> Path:
        return Path(self.paths.work_dir)


def config_to_dict(config: RunConfig) -> dict:
    return to_nested_dict(config)


def config_from_dict(data: dict) -> RunConfig:
    config = from_nested_dict(RunConfig, data)
    config.validate()
    return config


def dump_config(config: RunConfig) -> str:
    """Full YAML text with every field explicit, stable field order."""
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def config_hash(config: RunConfig) -> str:
    """sha256 over the canonical JSON form; stamps every artifact."""
    canon = json.dumps(config_to_dict(config), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply `dotted.key=value` overrides onto a raw config dict.

    Values go through YAML scalar parsing, so `detector.steps=500` is an
    int and `tiling.scale=1.7` a float. Keys may address nodes the strict
    loader will later reject; such errors surface there with the path.
    """
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"override {item!r} is not of the form key=value")
        value = yaml.safe_load(raw) if raw.strip() else ""
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
                node[part] = nxt
            if not isinstance(nxt, dict):
                raise ValueError(
                    f"override {item!r}: {part} is not a section")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path, overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """Read, override, and validate a run configuration file."""
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def write_config(config: RunConfig, path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
