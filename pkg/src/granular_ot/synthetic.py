"""Synthetic two-magnification slides with a planted, spatially contiguous signal.

Each slide is a full low-magnification grid of patch features.  Background
patches are isotropic Gaussian noise; one rectangular block of patches gets
``signal_strength`` times the unit direction of the slide's class.  The
high-magnification grid refines every low patch into a 2 x 2 block whose
features are the parent feature plus finer noise.

Dataset layout on disk::

    <dir>/manifest.json   {"version", "C", "d_v", "slides": [{slide_id, label, file, split}]}
    <dir>/<slide>.wbag    b"WBAG1", u32 version, u32 label, low section, high section

A section is u32 N, u32 d_v, N (u32 row, u32 col) pairs, then a TNS1 tensor.
"""

from dataclasses import dataclass, field, fields
import json
import os
import struct

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor_io import read_u32, tensor_from_bytes, tensor_to_bytes

BAG_MAGIC = b"WBAG1"
FORMAT_VERSION = 1
SPLITS = ("train", "test")


@dataclass(frozen=True)
class GeneratorConfig:
    classes: int = 2
    grid: int = 12
    d_v: int = 48
    signal_region_fraction: float = 0.25
    signal_strength: float = 2.0
    noise_sigma: float = 1.0
    fine_noise_sigma: float = 0.5
    corrupt_fraction: float = 0.0
    corrupt_sigma: float = 3.0
    train_per_class: int = 30
    test_per_class: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.classes > self.d_v:
            raise ConfigError(f"cannot fit {self.classes} orthogonal directions in {self.d_v} dims")
        if self.grid < 1:
            raise ConfigError(f"grid must be >= 1, got {self.grid}")
        if not 0.0 < self.signal_region_fraction <= 1.0:
            raise ConfigError(f"signal_region_fraction must be in (0, 1], got {self.signal_region_fraction}")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ConfigError(f"corrupt_fraction must be in [0, 1], got {self.corrupt_fraction}")
        if self.noise_sigma < 0 or self.fine_noise_sigma < 0 or self.corrupt_sigma < 0:
            raise ConfigError("noise levels must be nonnegative")


@dataclass
class Level:
    features: np.ndarray
    coords: np.ndarray


@dataclass
class PatchBag:
    slide_id: str
    label: int
    low: Level
    high: Level
    split: str = "train"
    region: tuple = field(default=None, compare=False)


def class_directions(cfg):
    """Orthonormal class directions (rows), fixed by ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    q, r = np.linalg.qr(rng.normal(size=(cfg.d_v, cfg.classes)))
    return (q * np.sign(np.diag(r))).T


def region_side(grid, fraction):
    side = max(1, int(round(np.sqrt(fraction) * grid)))
    if side > grid:
        raise ConfigError(f"region of side {side} does not fit a {grid} x {grid} grid")
    return side


def grid_coords(n):
    r, c = np.divmod(np.arange(n * n), n)
    return np.stack([r, c], axis=1).astype(np.int64)


def _block_mask(grid, side, rng):
    r0, c0 = rng.integers(0, grid - side + 1, size=2)
    mask = np.zeros((grid, grid), dtype=bool)
    mask[r0 : r0 + side, c0 : c0 + side] = True
    return mask.reshape(-1), (int(r0), int(c0), side)


def generate_slide(label, cfg, rng, directions=None, slide_id="slide"):
    if not 0 <= label < cfg.classes:
        raise ConfigError(f"label {label} outside [0, {cfg.classes})")
    if directions is None:
        directions = class_directions(cfg)
    g = cfg.grid
    side = region_side(g, cfg.signal_region_fraction)
    low = rng.normal(0.0, 1.0, (g * g, cfg.d_v)) * cfg.noise_sigma
    planted, region = _block_mask(g, side, rng)
    low[planted] += cfg.signal_strength * directions[label]
    if cfg.corrupt_fraction > 0:
        bad, _ = _block_mask(g, region_side(g, cfg.corrupt_fraction), rng)
        low[bad] += rng.normal(0.0, cfg.corrupt_sigma, (int(bad.sum()), cfg.d_v))

    low_coords = grid_coords(g)
    high_coords = grid_coords(2 * g)
    parent = (high_coords[:, 0] // 2) * g + high_coords[:, 1] // 2
    high = low[parent] + rng.normal(0.0, 1.0, (len(parent), cfg.d_v)) * cfg.fine_noise_sigma
    return PatchBag(
        slide_id=slide_id,
        label=int(label),
        low=Level(low, low_coords),
        high=Level(high, high_coords),
        region=region,
    )


def generate_dataset(cfg):
    """Balanced train and test slides, each drawn from its own seeded generator."""
    directions = class_directions(cfg)
    bags = []
    k = 0
    for split, per_class in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        for c in range(cfg.classes):
            for i in range(per_class):
                rng = np.random.default_rng([cfg.seed, k])
                bag = generate_slide(c, cfg, rng, directions, slide_id=f"{split}_c{c}_{i:04d}")
                bag.split = split
                bags.append(bag)
                k += 1
    return bags


# --- binary container -------------------------------------------------------


def bag_to_bytes(bag):
    out = [BAG_MAGIC, struct.pack("<II", FORMAT_VERSION, bag.label)]
    for level in (bag.low, bag.high):
        n, d = level.features.shape
        out.append(struct.pack("<II", n, d))
        out.append(np.ascontiguousarray(level.coords, dtype="<u4").tobytes())
        out.append(tensor_to_bytes(level.features))
    return b"".join(out)


def bag_from_bytes(buf, slide_id="slide", split="train"):
    if buf[:5] != BAG_MAGIC:
        raise FormatError(f"bad bag magic {bytes(buf[:5])!r}", 0)
    version, pos = read_u32(buf, 5, "bag version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported bag version {version}", 5)
    label, pos = read_u32(buf, pos, "bag label")
    levels = []
    for name in ("low", "high"):
        n, pos = read_u32(buf, pos, f"{name} patch count")
        d, pos = read_u32(buf, pos, f"{name} feature width")
        end = pos + 8 * n
        if end > len(buf):
            raise FormatError(f"truncated {name} coordinates", pos)
        coords = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=pos).astype(np.int64).reshape(n, 2)
        feats, pos = tensor_from_bytes(buf, end)
        if feats.shape != (n, d):
            raise FormatError(f"{name} features have shape {feats.shape}, header says ({n}, {d})", end)
        levels.append(Level(feats, coords))
    if pos != len(buf):
        raise FormatError("trailing bytes after bag", pos)
    return PatchBag(slide_id, int(label), levels[0], levels[1], split)


def write_dataset(bags, path, classes=None):
    os.makedirs(path, exist_ok=True)
    entries = []
    for bag in bags:
        fname = f"{bag.slide_id}.wbag"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(bag_to_bytes(bag))
        entries.append({"slide_id": bag.slide_id, "label": bag.label, "file": fname, "split": bag.split})
    manifest = {
        "version": FORMAT_VERSION,
        "C": classes if classes is not None else 1 + max(b.label for b in bags),
        "d_v": int(bags[0].low.features.shape[1]),
        "slides": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_manifest(path):
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc.msg}", exc.pos) from None
    for key in ("version", "C", "d_v", "slides"):
        if key not in manifest:
            raise DataError(f"manifest.json lacks '{key}'")
    if manifest["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported manifest version {manifest['version']}")
    return manifest


def read_dataset(path):
    manifest = read_manifest(path)
    bags = []
    for entry in manifest["slides"]:
        fpath = os.path.join(path, entry["file"])
        if not os.path.exists(fpath):
            raise DataError(f"manifest lists slide '{entry['slide_id']}' but {entry['file']} is missing")
        with open(fpath, "rb") as fh:
            buf = fh.read()
        try:
            bag = bag_from_bytes(buf, entry["slide_id"], entry.get("split", "train"))
        except FormatError as exc:
            raise FormatError(f"{entry['file']}: {exc.detail}", exc.offset) from None
        if bag.label != entry["label"]:
            raise DataError(f"slide '{bag.slide_id}' label {bag.label} disagrees with manifest {entry['label']}")
        if bag.low.features.shape[1] != manifest["d_v"]:
            raise DataError(f"slide '{bag.slide_id}' has width {bag.low.features.shape[1]}, manifest says {manifest['d_v']}")
        bags.append(bag)
    return bags


def config_fields(cls):
    return {f.name: f.type for f in fields(cls)}
