"""Procedural endoscopic-style scene pairs (RGB plus ground-truth depth).

Depth is an analytic curved-tube surface. With pixel-center coordinates
x, y in [-1, 1] and per-scene parameters (center cx, cy; curvature k;
radius sigma), the profile is

    cline(y) = cx + k * (y - cy)^2            curved centerline
    rho^2    = (x - cline(y))^2 + (y - cy)^2  radial distance to it
    t        = exp(-rho^2 / (2 sigma^2))      1 on the centerline, -> 0 at walls
    depth    = d_min + (d_max - d_min) * t

so the lumen recedes: depth is largest on the centerline. RGB combines
Lambertian shading from the depth gradient, a low-frequency sinusoidal
albedo texture, and a light-falloff term (d_min / depth)^falloff that
darkens the far lumen, endoscope style. Everything is a pure function of
(seed, index), so regeneration is bit-identical.

Datasets can be dumped to disk as PPM (P6) RGB plus 16-bit big-endian
PGM (P5) depth with a JSON manifest carrying the depth scale factor, and
loaded back through the same interface, so recorded data can substitute
for the synthetic scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError


@dataclass(frozen=True)
class SceneConfig:
    size: tuple = (64, 64)
    min_depth: float = 0.1
    max_depth: float = 15.0
    curvature_range: tuple = (-0.7, 0.7)
    radius_range: tuple = (0.35, 0.65)
    falloff: float = 2.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.size
        if h < 16 or w < 16:
            raise ConfigError(f"scenes.size: extents must be >= 16, got {self.size}")
        if self.min_depth <= 0 or self.min_depth >= self.max_depth:
            raise ConfigError(f"scenes depth range invalid: "
                              f"[{self.min_depth}, {self.max_depth}]")
        if self.curvature_range[0] > self.curvature_range[1]:
            raise ConfigError(f"scenes.curvature_range is reversed: {self.curvature_range}")
        if self.radius_range[0] <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ConfigError(f"scenes.radius_range invalid: {self.radius_range}")
        if self.falloff < 0:
            raise ConfigError(f"scenes.falloff must be >= 0, got {self.falloff}")


def generate_scene(cfg: SceneConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (rgb, depth) pair: rgb float32 (3, H, W) in [0, 1], depth float32 (H, W)."""
    if index < 0:
        raise ConfigError(f"scene index must be >= 0, got {index}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, index])))
    h, w = cfg.size
    cx = rng.uniform(-0.25, 0.25)
    cy = rng.uniform(-0.25, 0.25)
    curvature = rng.uniform(*cfg.curvature_range)
    sigma = rng.uniform(*cfg.radius_range)

    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    centerline = cx + curvature * (yy - cy) ** 2
    rho2 = (xx - centerline) ** 2 + (yy - cy) ** 2
    t = np.exp(-rho2 / (2.0 * sigma ** 2))
    depth = cfg.min_depth + (cfg.max_depth - cfg.min_depth) * t

    # Lambertian shading from the depth slope, in normalized image units
    gy, gx = np.gradient(depth)
    slope_scale = (4.0 / (cfg.max_depth - cfg.min_depth)) * max(h, w)
    shading = 1.0 / np.sqrt(1.0 + (slope_scale * gx) ** 2 + (slope_scale * gy) ** 2)
    falloff = (cfg.min_depth / depth) ** cfg.falloff

    base = np.array([0.82, 0.46, 0.38])
    channel_gain = np.array([1.0, 0.85, 0.75])
    texture = np.zeros((h, w))
    for _ in range(3):
        amp = rng.uniform(0.03, 0.1)
        fx = rng.uniform(2.0, 9.0)
        fy = rng.uniform(2.0, 9.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture += amp * np.sin(fx * xx + fy * yy + phase)
    rgb = np.empty((3, h, w))
    for ch in range(3):
        albedo = np.clip(base[ch] + channel_gain[ch] * texture, 0.05, 1.0)
        rgb[ch] = np.clip(albedo * shading * falloff, 0.0, 1.0)
    return rgb.astype(np.float32), depth.astype(np.float32)


class SceneDataset:
    """A contiguous index range of procedurally generated frames."""

    def __init__(self, cfg: SceneConfig, start: int, count: int):
        if count < 1:
            raise ConfigError(f"dataset size must be >= 1, got {count}")
        self.cfg = cfg
        self.start = start
        self.count = count

    def __len__(self) -> int:
        return self.count

    @property
    def indices(self) -> range:
        return range(self.start, self.start + self.count)

    def frame(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= i < self.count:
            raise ConfigError(f"frame index {i} out of range [0, {self.count})")
        return generate_scene(self.cfg, self.start + i)

    def batch(self, ids) -> tuple[np.ndarray, np.ndarray]:
        frames = [self.frame(int(i)) for i in ids]
        return (np.stack([f[0] for f in frames]), np.stack([f[1] for f in frames]))


def make_split(cfg: SceneConfig, n_train: int = 512, n_val: int = 64,
               n_test: int = 32) -> tuple[SceneDataset, SceneDataset, SceneDataset]:
    """Disjoint train/val/test index ranges over the scene stream."""
    for name, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if count < 1:
            raise ConfigError(f"split.{name} must be >= 1, got {count}")
    train = SceneDataset(cfg, 0, n_train)
    val = SceneDataset(cfg, n_train, n_val)
    test = SceneDataset(cfg, n_train + n_val, n_test)
    return train, val, test


# ---------------------------------------------------------------------------
# on-disk interchange: PPM / 16-bit PGM plus a JSON manifest


def write_pgm16(path, values: np.ndarray) -> None:
    """16-bit grayscale PGM (P5, maxval 65535, big-endian payload)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ConfigError(f"write_pgm16 expects a 2-D array, got shape {values.shape}")
    h, w = values.shape
    data = values.astype(">u2")
    with open(path, "wb") as handle:
        handle.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        handle.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as handle:
        magic = handle.readline().strip()
        if magic != b"P5":
            raise CheckpointError(f"{path}: not a P5 PGM file (magic {magic!r})")
        dims = handle.readline().split()
        maxval = handle.readline().strip()
        if maxval != b"65535":
            raise CheckpointError(f"{path}: expected 16-bit PGM, maxval {maxval!r}")
        w, h = int(dims[0]), int(dims[1])
        payload = handle.read(w * h * 2)
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_ppm8(path, rgb01: np.ndarray) -> None:
    """8-bit color PPM (P6) from a (3, H, W) array of values in [0, 1]."""
    rgb01 = np.asarray(rgb01)
    if rgb01.ndim != 3 or rgb01.shape[0] != 3:
        raise ConfigError(f"write_ppm8 expects a (3, H, W) array, got shape {rgb01.shape}")
    h, w = rgb01.shape[1:]
    data = np.clip(np.round(rgb01 * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as handle:
        handle.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        handle.write(data.tobytes())


def read_ppm8(path) -> np.ndarray:
    with open(path, "rb") as handle:
        magic = handle.readline().strip()
        if magic != b"P6":
            raise CheckpointError(f"{path}: not a P6 PPM file (magic {magic!r})")
        dims = handle.readline().split()
        handle.readline()  # maxval
        w, h = int(dims[0]), int(dims[1])
        payload = handle.read(w * h * 3)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


class ArrayDataset:
    """In-memory frames sharing the SceneDataset access protocol."""

    def __init__(self, frames: list):
        if not frames:
            raise ConfigError("ArrayDataset needs at least one frame")
        self.frames = frames

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.frames[i]

    def batch(self, ids) -> tuple[np.ndarray, np.ndarray]:
        picked = [self.frames[int(i)] for i in ids]
        return (np.stack([f[0] for f in picked]), np.stack([f[1] for f in picked]))


def dump_dataset(dataset, out_dir) -> Path:
    """Write every frame as PPM + PGM with a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    max_depth = max(float(dataset.frame(i)[1].max()) for i in range(len(dataset)))
    depth_scale = 65535.0 / max_depth
    frames = []
    for i in range(len(dataset)):
        rgb, depth = dataset.frame(i)
        rgb_name = f"frame_{i:04d}.ppm"
        depth_name = f"depth_{i:04d}.pgm"
        write_ppm8(out / rgb_name, rgb)
        write_pgm16(out / depth_name, np.round(depth.astype(np.float64) * depth_scale))
        frames.append({"rgb": rgb_name, "depth": depth_name})
    manifest = {"format": "depth-dataset-v1", "depth_scale": depth_scale, "frames": frames}
    manifest_path = out / "dataset.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_dataset_dir(path) -> ArrayDataset:
    """Load a dumped dataset directory back into memory."""
    root = Path(path)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{root}: no dataset.json manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "depth-dataset-v1":
        raise CheckpointError(f"{root}: unknown dataset format {manifest.get('format')!r}")
    scale = float(manifest["depth_scale"])
    frames = []
    for entry in manifest["frames"]:
        rgb = read_ppm8(root / entry["rgb"])
        depth = (read_pgm16(root / entry["depth"]).astype(np.float64) / scale).astype(np.float32)
        frames.append((rgb, depth))
    return ArrayDataset(frames)
