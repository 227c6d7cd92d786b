"""Scene pair container, loaders, ground truth downsampling and the
synthetic rigid multi-object scene generator."""

import os
import glob
import json
import time
import zipfile
import itertools
import multiprocessing
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import torch
from numpy.lib import format as npy_format
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation
from torch.utils.data import Dataset, random_split
from .backbone import Pyramid
from .io import DataError, Logger, SynthConfig
from .utils import atomic_path, fingerprint, to_tensor

REQUIRED_FIELDS = ("pos1", "pos2", "flow")
OPTIONAL_FIELDS = ("mask", "intrinsics")
SCENE_PATTERN = "scene_*.npz"
MANIFEST = "manifest.json"

# fixed archive member timestamp, so equal scenes give equal files
ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class ScenePair:
    """Source and target frames with the ground truth flow of the source.

    Positions, flow and intrinsics are stored as float32 and the mask as
    uint8 (1 marks a valid, non-occluded source point). ``extras`` holds any
    additional named arrays, which are written back unchanged.
    """

    pos1: np.ndarray
    pos2: np.ndarray
    flow: np.ndarray
    mask: Optional[np.ndarray] = None
    intrinsics: Optional[np.ndarray] = None
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.pos1 = np.ascontiguousarray(self.pos1, dtype=np.float32)
        self.pos2 = np.ascontiguousarray(self.pos2, dtype=np.float32)
        self.flow = np.ascontiguousarray(self.flow, dtype=np.float32)
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.intrinsics is not None:
            self.intrinsics = np.ascontiguousarray(self.intrinsics, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        """Check shapes and values.

        Raises:
            DataError: Naming the first offending field.
        """
        for name in ("pos1", "pos2", "flow"):
            array = getattr(self, name)
            if array.ndim != 2 or array.shape[1] != 3 or array.shape[0] < 1:
                raise DataError(
                    f"'{name}' must have shape [n >= 1, 3], got {array.shape}"
                )
            if not np.isfinite(array).all():
                raise DataError(f"'{name}' contains non-finite values")
        if self.flow.shape != self.pos1.shape:
            raise DataError(
                f"'flow' must match 'pos1' in shape, got {self.flow.shape} and {self.pos1.shape}"
            )
        if self.mask is not None and self.mask.shape != (self.n_source,):
            raise DataError(
                f"'mask' must have shape ({self.n_source},), got {self.mask.shape}"
            )
        if self.intrinsics is not None and self.intrinsics.shape != (3, 3):
            raise DataError(
                f"'intrinsics' must have shape (3, 3), got {self.intrinsics.shape}"
            )

    @property
    def n_source(self) -> int:
        return self.pos1.shape[0]

    @property
    def n_target(self) -> int:
        return self.pos2.shape[0]

    def valid_mask(self) -> np.ndarray:
        """The mask as booleans, all True when absent."""
        if self.mask is None:
            return np.ones(self.n_source, dtype=bool)
        return self.mask.astype(bool)

    def to_tensors(
        self, dtype: torch.dtype = torch.float32
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Source, target, flow and boolean mask as tensors."""
        return (
            to_tensor(self.pos1, dtype),
            to_tensor(self.pos2, dtype),
            to_tensor(self.flow, dtype),
            torch.as_tensor(self.valid_mask()),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        """All the named arrays of the container."""
        arrays = {"pos1": self.pos1, "pos2": self.pos2, "flow": self.flow}
        if self.mask is not None:
            arrays["mask"] = self.mask
        if self.intrinsics is not None:
            arrays["intrinsics"] = self.intrinsics
        arrays.update(self.extras)
        return arrays


def _write_archive(path: str, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, array in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_DATE)
            with archive.open(info, "w", force_zip64=True) as f:
                npy_format.write_array(f, np.asanyarray(array), allow_pickle=False)


def save_scene_pair(pair: ScenePair, path: str) -> None:
    """Write a scene pair to a named-array archive (numpy ``.npz`` layout).

    Args:
        pair (ScenePair): The scene pair.
        path (str): The destination file.

    Returns:
        None
    """
    with atomic_path(path) as tmp:
        _write_archive(tmp, pair.arrays())


def load_scene_pair(path: str) -> ScenePair:
    """Read and validate a scene pair archive.

    Args:
        path (str): The archive.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataError: If the archive cannot be read, a required array is
            missing or an array has the wrong type or shape.

    Returns:
        ScenePair: The scene pair.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Scene file {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (ValueError, OSError, zipfile.BadZipFile) as err:
        raise DataError(f"{path} is not a scene pair archive: {err}") from err

    for name in REQUIRED_FIELDS:
        if name not in arrays:
            raise DataError(f"{path} is missing the required array '{name}'")
    for name in ("pos1", "pos2", "flow", "intrinsics"):
        if name in arrays and arrays[name].dtype != np.float32:
            raise DataError(
                f"'{name}' in {path} must be float32, got {arrays[name].dtype}"
            )
    if "mask" in arrays and arrays["mask"].dtype not in (np.uint8, np.bool_):
        raise DataError(f"'mask' in {path} must be uint8, got {arrays['mask'].dtype}")

    extras = {
        name: value
        for name, value in arrays.items()
        if name not in REQUIRED_FIELDS + OPTIONAL_FIELDS
    }
    try:
        return ScenePair(
            pos1=arrays["pos1"],
            pos2=arrays["pos2"],
            flow=arrays["flow"],
            mask=arrays.get("mask"),
            intrinsics=arrays.get("intrinsics"),
            extras=extras,
        )
    except DataError as err:
        raise DataError(f"{path}: {err}") from err


def _sample_primitive(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` points on a primitive surface within 0.55 of the origin."""
    if kind == "plane":
        uv = rng.uniform(-0.35, 0.35, size=(n, 2))
        points = np.column_stack([uv, np.zeros(n)])
    elif kind == "box":
        half = rng.uniform(0.15, 0.3, size=3)
        points = rng.uniform(-half, half, size=(n, 3))
        axis = rng.integers(0, 3, size=n)
        side = rng.choice([-1.0, 1.0], size=n)
        points[np.arange(n), axis] = side * half[axis]
    else:
        directions = rng.normal(size=(n, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        points = directions * rng.uniform(0.2, 0.45)
    # a normalized gaussian quaternion is a uniform random orientation
    return Rotation.from_quat(rng.normal(size=4)).apply(points)


def synth_rigid_scene(config: SynthConfig) -> ScenePair:
    """Generate a scene of rigidly moving primitive objects.

    Objects are laid out on a grid with gaps between them and the scene is
    scaled to unit diameter. Each object gets its own rotation about its
    centroid and translation; the target frame is the moved source, with
    jitter and occlusion applied to the target only.

    Args:
        config (SynthConfig): The generator parameters, seed included.

    Returns:
        ScenePair: The scene; ``extras['object_ids']`` labels each source point.
    """
    rng = np.random.default_rng(config.seed)
    side = int(np.ceil(np.sqrt(config.object_count)))
    kinds = ("plane", "box", "sphere")

    objects, labels = [], []
    for i in range(config.object_count):
        center = 1.5 * np.array([i % side, i // side, 0.0])
        center += rng.uniform(-0.05, 0.05, size=3)
        kind = kinds[rng.integers(len(kinds))]
        objects.append(_sample_primitive(kind, config.points_per_object, rng) + center)
        labels.append(np.full(config.points_per_object, i, dtype=np.int32))
    source = np.concatenate(objects)
    labels = np.concatenate(labels)

    diameter = pdist(source).max() if len(source) > 1 else 1.0
    source = (source - source.mean(axis=0)) / diameter
    pos1 = source.astype(np.float32)

    flow = np.zeros(pos1.shape)
    for i in range(config.object_count):
        members = labels == i
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rotation = Rotation.from_rotvec(axis * rng.uniform(0.0, config.rotation_max))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        translation = direction * rng.uniform(0.0, config.translation_max)
        relative = pos1[members] - pos1[members].astype(np.float64).mean(axis=0)
        flow[members] = rotation.apply(relative) - relative + translation

    flow = flow.astype(np.float32)
    # exact correspondence in float32: pos1 + flow is the target
    pos2 = pos1 + flow
    if config.noise_sigma > 0:
        noise = rng.normal(scale=config.noise_sigma, size=pos2.shape)
        pos2 = pos2 + noise.astype(np.float32)

    mask = np.ones(len(pos1), dtype=np.uint8)
    kept = np.arange(len(pos1))
    occluded = int(round(config.occlusion_fraction * len(pos1)))
    if occluded:
        hidden = rng.choice(len(pos1), size=occluded, replace=False)
        mask[hidden] = 0
        kept = np.flatnonzero(mask)
    pos2 = pos2[rng.permutation(kept)]

    return ScenePair(
        pos1=pos1, pos2=pos2, flow=flow, mask=mask, extras={"object_ids": labels}
    )


def downsample_gt(gt: torch.Tensor, pyramid: Pyramid) -> List[torch.Tensor]:
    """Per-level ground truth by indexing with the composed sample indices.

    Args:
        gt (torch.Tensor): Values of the finest level [N, ...] (flow or mask).
        pyramid (Pyramid): Pyramid built from the same source frame.

    Raises:
        ValueError: If ``gt`` does not cover the finest level.

    Returns:
        List[torch.Tensor]: One tensor per level, finest first.
    """
    if gt.shape[0] != pyramid[0].size:
        raise ValueError(
            f"ground truth has {gt.shape[0]} rows, the finest level has {pyramid[0].size} points"
        )
    return [gt[pyramid.composed_indices(level)] for level in range(len(pyramid))]


def _take(pair: ScenePair, source: np.ndarray, target: np.ndarray) -> ScenePair:
    extras = {
        name: value[source] if value.ndim and value.shape[0] == pair.n_source else value
        for name, value in pair.extras.items()
    }
    return ScenePair(
        pos1=pair.pos1[source],
        pos2=pair.pos2[target],
        flow=pair.flow[source],
        mask=None if pair.mask is None else pair.mask[source],
        intrinsics=pair.intrinsics,
        extras=extras,
    )


def resample_to(
    pair: ScenePair, n_points: int, seed: int, replace: bool = False
) -> ScenePair:
    """Draw ``n_points`` points uniformly from each frame.

    Flow, mask and the extras with one row per source point follow the
    source indices.

    Args:
        pair (ScenePair): The scene pair.
        n_points (int): Points per frame.
        seed (int): Seed of the draw.
        replace (bool): Sample with replacement.

    Raises:
        ValueError: If a frame is too small to sample without replacement.

    Returns:
        ScenePair: The resampled pair.
    """
    if n_points < 1:
        raise ValueError(f"n_points must be positive, got {n_points}")
    if not replace and n_points > min(pair.n_source, pair.n_target):
        raise ValueError(
            f"cannot draw {n_points} points from frames of {pair.n_source} and "
            f"{pair.n_target} points without replacement"
        )
    rng = np.random.default_rng(seed)
    source = rng.choice(pair.n_source, size=n_points, replace=replace)
    target = rng.choice(pair.n_target, size=n_points, replace=replace)
    return _take(pair, source, target)


def pad_to(pair: ScenePair, n_points: int, seed: int) -> ScenePair:
    """Append random duplicates to every frame with fewer than ``n_points`` points.

    Every original point is kept in place, so the first ``pair.n_source``
    rows of the padded pair are the input source frame. Frames that are
    already large enough are left unchanged.

    Args:
        pair (ScenePair): The scene pair.
        n_points (int): Minimum points per frame.
        seed (int): Seed of the duplicate draw.

    Returns:
        ScenePair: The padded pair.
    """
    rng = np.random.default_rng(seed)

    def padded(n: int) -> np.ndarray:
        extra = rng.choice(n, size=max(n_points - n, 0), replace=True)
        return np.concatenate([np.arange(n), extra])

    return _take(pair, padded(pair.n_source), padded(pair.n_target))


def scene_files(directory: str) -> List[str]:
    """Sorted scene archives of a directory.

    Raises:
        DataError: If the directory holds no scene archive.
    """
    files = sorted(glob.glob(os.path.join(directory, SCENE_PATTERN)))
    if not files:
        raise DataError(f"No {SCENE_PATTERN} files found in {directory}")
    return files


class SceneDataset(Dataset):
    """Scene pairs of a directory, loaded once and kept in memory.

    Args:
        directory (str): Directory with ``scene_*.npz`` archives.
        files (Sequence[str], optional): Explicit list of archives instead.
    """

    def __init__(
        self, directory: Optional[str] = None, files: Optional[Sequence[str]] = None
    ):
        if files is None:
            files = scene_files(directory)
        self.files = list(files)
        self.pairs = [load_scene_pair(path) for path in self.files]

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> ScenePair:
        return self.pairs[index]

    def name(self, index: int) -> str:
        return os.path.splitext(os.path.basename(self.files[index]))[0]


def split_dataset(
    dataset: Dataset, fraction: float, seed: int
) -> Tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of the scenes (at least one) for validation."""
    n_val = max(1, int(round(fraction * len(dataset))))
    if n_val >= len(dataset):
        raise DataError(
            f"cannot hold out {n_val} of {len(dataset)} scenes for validation"
        )
    generator = torch.Generator().manual_seed(seed)
    lengths = [len(dataset) - n_val, n_val]
    return tuple(random_split(dataset, lengths, generator=generator))


def write_scene(
    index: int, seed: int, config: SynthConfig, out_dir: str
) -> Tuple[str, int]:
    """Generate the scene of one seed and write it as ``scene_%06d.npz``."""
    scene_config = SynthConfig(**{**config.as_dict(), "seed": seed})
    path = os.path.join(out_dir, f"scene_{index:06d}.npz")
    save_scene_pair(synth_rigid_scene(scene_config), path)
    return os.path.basename(path), seed


def generate_scenes(
    out_dir: str, scenes: int, seed: int, config: SynthConfig, n_workers: int = 1
) -> dict:
    """Write ``scenes`` synthetic scene files and their manifest.

    Scene ``i`` uses seed ``seed + i``.

    Args:
        out_dir (str): Output directory, created if needed.
        scenes (int): Number of scenes.
        seed (int): Base seed.
        config (SynthConfig): Generator parameters (its own seed is ignored).
        n_workers (int): Number of processes.

    Returns:
        dict: The manifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    inputiterator = zip(
        itertools.count(),
        range(seed, seed + scenes),
        itertools.repeat(config),
        itertools.repeat(out_dir),
    )
    if n_workers > 1:
        with multiprocessing.Pool(processes=n_workers) as p:
            written = p.starmap(write_scene, inputiterator)
    else:
        written = list(itertools.starmap(write_scene, inputiterator))
    Logger.logger.info(f"Wrote {len(written)} scenes to {out_dir}")

    manifest = {
        "config_fingerprint": fingerprint(config.as_dict()),
        "synth": config.as_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "scenes": [{"file": name, "seed": s} for name, s in written],
    }
    with atomic_path(os.path.join(out_dir, MANIFEST)) as tmp:
        with open(tmp, "w") as f:
            json.dump(manifest, f, indent=2)
    return manifest
