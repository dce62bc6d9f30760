"""Self-annotated patch pair datasets.

Every keypoint contributes a reference patch (no rescale, no rotation) and a
set of transformed twins. The grid layout varies one axis at a time over the
scale and orientation bin centers; the continuous layout draws both at
random. Patches are stored once in a float32 pack and referenced by byte
offset from a JSON Lines manifest.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .histogram import ORIENTATION_BINS, SCALE_BINS, TWO_PI
from .transform import (
    CROP_SIZE,
    PATCH_SIZE,
    OutOfBoundsError,
    load_image,
    warp_extract_many,
    worst_case_margin,
)

log = logging.getLogger(__name__)

FORMAT_NAME = "patchpose-pack"
FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"
PACK = "patches.bin"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DatasetError(Exception):
    pass


class InsufficientAreaError(DatasetError):
    pass


class EmptySplitError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


class TruncatedPackError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class GenMode(enum.Enum):
    GRID = "grid"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class GenConfig:
    mode: GenMode = GenMode.GRID
    keypoints_per_image: int = 3
    crop: int = CROP_SIZE
    out: int = PATCH_SIZE
    prune_fraction: float = 0.2
    split_ratios: tuple[float, float, float] = (0.98, 0.01, 0.01)
    seed: int = 0
    # continuous mode only: total pairs, spread evenly over keypoints
    pairs: int = 1000
    min_distance: float = 32.0
    threads: int = 1

    def __post_init__(self):
        if not math.isclose(sum(self.split_ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must sum to 1, got {self.split_ratios}")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError("prune fraction must be in [0, 1)")

    @property
    def margin(self) -> int:
        return worst_case_margin(self.crop)

    @property
    def scale_grid(self) -> np.ndarray:
        return SCALE_BINS.centers

    @property
    def orientation_grid(self) -> np.ndarray:
        return ORIENTATION_BINS.centers


@dataclass(frozen=True)
class SourceImage:
    name: str
    pixels: np.ndarray


@dataclass(frozen=True)
class PatchPairRecord:
    """One pair; ``patch_a``/``patch_b`` index the dataset's patch array."""

    id: int
    img: str
    kp: tuple[float, float]
    ds: float
    do: float
    patch_a: int
    patch_b: int

    @property
    def keypoint(self) -> tuple[str, tuple[float, float]]:
        return (self.img, self.kp)


@dataclass(eq=False)
class PatchPairDataset:
    records: list[PatchPairRecord]
    patches: np.ndarray  # (P, 3, 32, 32) float32
    scores: dict = field(default_factory=dict)  # keypoint -> discriminability

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, PatchPairDataset):
            return NotImplemented
        return (self.records == other.records
                and self.patches.shape == other.patches.shape
                and np.array_equal(self.patches, other.patches))

    @classmethod
    def empty(cls, size: int = PATCH_SIZE) -> "PatchPairDataset":
        return cls([], np.zeros((0, 3, size, size), dtype=np.float32))

    def keypoints(self) -> list:
        seen = {}
        for r in self.records:
            seen.setdefault(r.keypoint, None)
        return list(seen)

    def arrays(self):
        """Index and label vectors: ``(patch_a, patch_b, ds, do)``."""
        a = np.array([r.patch_a for r in self.records], dtype=np.int64)
        b = np.array([r.patch_b for r in self.records], dtype=np.int64)
        ds = np.array([r.ds for r in self.records], dtype=np.float64)
        do = np.array([r.do for r in self.records], dtype=np.float64)
        return a, b, ds, do

    def subset(self, keep: Callable[[PatchPairRecord], bool]) -> "PatchPairDataset":
        """Dataset of the records passing ``keep``, with compacted patches."""
        records = [r for r in self.records if keep(r)]
        used = sorted({r.patch_a for r in records} | {r.patch_b for r in records})
        remap = {old: new for new, old in enumerate(used)}
        records = [replace(r, patch_a=remap[r.patch_a], patch_b=remap[r.patch_b])
                   for r in records]
        kps = {r.keypoint for r in records}
        scores = {k: v for k, v in self.scores.items() if k in kps}
        return PatchPairDataset(records, self.patches[used], scores)


# -- keypoints -------------------------------------------------------------

def harris_response(img: np.ndarray, sigma: float = 1.5, k: float = 0.04) -> np.ndarray:
    gray = np.asarray(img, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    ix = ndimage.sobel(gray, axis=1)
    iy = ndimage.sobel(gray, axis=0)
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def inside_margin(x, y, width, height, margin) -> bool:
    return not (x < margin or y < margin or x > width - margin or y > height - margin)


def sample_keypoints(img: np.ndarray, k: int, margin: int, min_distance: float = 32.0,
                     rel_threshold: float = 0.01, abs_threshold: float = 1e-8,
                     nms_radius: int = 3) -> list[tuple[float, float]]:
    """Up to ``k`` Harris corners at least ``margin`` px from every edge.

    Candidates are strict local maxima above both thresholds, taken greedily
    by response while keeping ``min_distance`` between accepted points.
    """
    height, width = img.shape[:2]
    if width <= 2 * margin or height <= 2 * margin:
        raise InsufficientAreaError(
            f"image {width}x{height} has no area inside a {margin}px margin")
    resp = harris_response(img)
    peak = ndimage.maximum_filter(resp, size=2 * nms_radius + 1, mode="nearest")
    thresh = max(abs_threshold, rel_threshold * resp.max())
    ys, xs = np.nonzero((resp == peak) & (resp > thresh))
    keep = [i for i in range(len(xs)) if inside_margin(xs[i], ys[i], width, height, margin)]
    xs, ys = xs[keep], ys[keep]
    order = np.argsort(-resp[ys, xs], kind="stable")
    chosen: list[tuple[float, float]] = []
    for i in order:
        x, y = float(xs[i]), float(ys[i])
        if all(math.hypot(x - cx, y - cy) >= min_distance for cx, cy in chosen):
            chosen.append((x, y))
            if len(chosen) == k:
                break
    return chosen


# -- discriminability ------------------------------------------------------

def gradient_descriptor(patches: np.ndarray, cells: int = 4, orientations: int = 8) -> np.ndarray:
    """Magnitude-weighted gradient orientation histograms on a cell grid.

    ``(K, 3, n, n)`` patches map to ``(K, cells * cells * orientations)``.
    """
    gray = np.asarray(patches, dtype=np.float64).mean(axis=1)
    gy, gx = np.gradient(gray, axis=(1, 2))
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), TWO_PI)
    obin = np.minimum((ori / (TWO_PI / orientations)).astype(np.int64), orientations - 1)
    n = gray.shape[-1]
    cell = np.arange(n) * cells // n
    cell_id = cell[:, None] * cells + cell[None, :]
    nfeat = cells * cells * orientations
    flat = (np.arange(gray.shape[0])[:, None, None] * nfeat
            + cell_id[None] * orientations + obin)
    hist = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=gray.shape[0] * nfeat)
    return hist.reshape(gray.shape[0], nfeat)


def grid_transforms() -> list[tuple[float, float]]:
    """All (scale factor, angle) combinations of the bin grids: 13 x 36."""
    return [(float(2.0 ** s), float(o)) for s in SCALE_BINS.centers for o in ORIENTATION_BINS.centers]


@dataclass(frozen=True)
class DiscriminabilityConfig:
    transforms: tuple = field(default_factory=lambda: tuple(grid_transforms()))
    feature: Callable[[np.ndarray], np.ndarray] = gradient_descriptor
    dim: int = 128
    crop: int = CROP_SIZE
    out: int = PATCH_SIZE


def transformed_features(region: np.ndarray, cfg: DiscriminabilityConfig,
                         center=None) -> np.ndarray:
    """Features of every transform of ``region`` about ``center``: ``(|A|, N)``."""
    region = np.asarray(region, dtype=np.float64)
    if center is None:
        h, w = region.shape[:2]
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
    scales = np.array([t[0] for t in cfg.transforms])
    angles = np.array([t[1] for t in cfg.transforms])
    patches = warp_extract_many(region, center, scales, angles, cfg.crop, cfg.out)
    feats = cfg.feature(patches)
    if feats.shape[1] != cfg.dim:
        raise ValueError(f"feature dimension {feats.shape[1]} != {cfg.dim}")
    return feats


def discriminability(region: np.ndarray, cfg: DiscriminabilityConfig | None = None,
                     center=None) -> float:
    """Spread of a patch's features under the transform set.

    ``region`` is the source neighbourhood of the keypoint (keypoint at its
    center unless ``center`` is given); it must contain every transformed
    footprint. Returns the root of the summed squared deviations from the
    mean feature vector.
    """
    cfg = cfg or DiscriminabilityConfig()
    feats = transformed_features(region, cfg, center)
    return float(np.sqrt(feats.var(axis=0).sum() * feats.shape[0]))


def keep_top(scores: Sequence[float], tiebreak: Sequence, fraction: float) -> list[int]:
    """Indices surviving removal of the ``floor(fraction * n)`` lowest scores.

    Equal scores are removed in ``tiebreak`` order. Result is in input order.
    """
    n = len(scores)
    drop = int(math.floor(fraction * n + 1e-9))
    ranked = sorted(range(n), key=lambda i: (scores[i], tiebreak[i]))
    dropped = set(ranked[:drop])
    return [i for i in range(n) if i not in dropped]


def prune(dataset: PatchPairDataset, fraction: float) -> PatchPairDataset:
    """Drop the least discriminable source patches and every pair built on them."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("prune fraction must be in [0, 1)")
    if fraction == 0.0:
        return dataset
    kps = dataset.keypoints()
    missing = [k for k in kps if k not in dataset.scores]
    if missing:
        raise DatasetError(f"{len(missing)} keypoints have no discriminability score")
    first_id = {}
    for r in dataset.records:
        first_id.setdefault(r.keypoint, r.id)
    keep = keep_top([dataset.scores[k] for k in kps], [first_id[k] for k in kps], fraction)
    kept = {kps[i] for i in keep}
    return dataset.subset(lambda r: r.keypoint in kept)


# -- generation ------------------------------------------------------------

def load_sources(directory) -> list[SourceImage]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [SourceImage(p.name, load_image(p)) for p in paths]


@dataclass(frozen=True)
class Keypoint:
    img: str
    x: float
    y: float

    @property
    def key(self):
        return (self.img, (self.x, self.y))


def _detect_one(source: SourceImage, cfg: GenConfig) -> list[Keypoint]:
    try:
        pts = sample_keypoints(source.pixels, cfg.keypoints_per_image, cfg.margin,
                               cfg.min_distance)
    except InsufficientAreaError as exc:
        log.warning("%s: %s", source.name, exc)
        return []
    return [Keypoint(source.name, x, y) for x, y in pts]


def _score_one(source: SourceImage, kps: list[Keypoint], dcfg: DiscriminabilityConfig):
    return [discriminability(source.pixels, dcfg, center=(k.x, k.y)) for k in kps]


def _map(fn, items, threads: int):
    threads = max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_star, [(fn, it) for it in items]))


def _star(job):
    fn, args = job
    return fn(*args)


def detect_keypoints(sources: Sequence[SourceImage], cfg: GenConfig) -> list[Keypoint]:
    per_image = _map(_detect_one, [(s, cfg) for s in sources], cfg.threads)
    return [k for kps in per_image for k in kps]


def score_keypoints(sources: Sequence[SourceImage], keypoints: Sequence[Keypoint],
                    cfg: GenConfig, dcfg: DiscriminabilityConfig | None = None) -> list[float]:
    dcfg = dcfg or DiscriminabilityConfig(crop=cfg.crop, out=cfg.out)
    jobs = []
    for s in sources:
        jobs.append((s, [k for k in keypoints if k.img == s.name], dcfg))
    scored = {}
    for (s, kps, _), vals in zip(jobs, _map(_score_one, jobs, cfg.threads)):
        for k, v in zip(kps, vals):
            scored[k] = v
    return [scored[k] for k in keypoints]


def sample_continuous_poses(rng: np.random.Generator, n: int):
    """Log-uniform scale in [1/4, 4] (as log2) and uniform angle in [0, 2*pi)."""
    ds = rng.uniform(-2.0, 2.0, size=n)
    do = rng.uniform(0.0, TWO_PI, size=n)
    return ds, do


def _grid_poses():
    ds = [float(s) for s in SCALE_BINS.centers] + [0.0] * (ORIENTATION_BINS.count - 1)
    do = [0.0] * SCALE_BINS.count + [float(o) for o in ORIENTATION_BINS.centers[1:]]
    return np.array(ds), np.array(do)


def _pairs_for_keypoint(pixels, kp: Keypoint, ds, do, cfg: GenConfig):
    """Reference patch followed by one transformed patch per pose."""
    ref = warp_extract_many(pixels, (kp.x, kp.y), 1.0, 0.0, cfg.crop, cfg.out)
    moved = warp_extract_many(pixels, (kp.x, kp.y), np.exp2(ds), do, cfg.crop, cfg.out)
    return ref.astype(np.float32), moved.astype(np.float32)


def _generate_one(source: SourceImage, jobs, cfg: GenConfig):
    out = []
    skipped = 0
    for kp, ds, do in jobs:
        try:
            ref, moved = _pairs_for_keypoint(source.pixels, kp, ds, do, cfg)
        except OutOfBoundsError:
            skipped += 1
            continue
        out.append((kp, ds, do, ref, moved))
    return out, skipped


def _assemble(sources, jobs_by_image, cfg: GenConfig, scores=None) -> PatchPairDataset:
    items = [(s, jobs_by_image.get(s.name, []), cfg) for s in sources]
    results = _map(_generate_one, items, cfg.threads)
    records: list[PatchPairRecord] = []
    chunks = []
    n_patches = 0
    skipped = 0
    for res, sk in results:
        skipped += sk
        for kp, ds, do, ref, moved in res:
            a = n_patches
            chunks.append(ref)
            n_patches += 1
            for j in range(len(ds)):
                if ds[j] == 0.0 and do[j] == 0.0:
                    b = a
                else:
                    chunks.append(moved[j:j + 1])
                    b = n_patches
                    n_patches += 1
                records.append(PatchPairRecord(len(records), kp.img, (kp.x, kp.y),
                                               float(ds[j]), float(do[j]), a, b))
    if skipped:
        log.warning("skipped %d keypoints whose footprint leaves the image", skipped)
    if chunks:
        patches = np.concatenate(chunks, axis=0)
    else:
        patches = np.zeros((0, 3, cfg.out, cfg.out), dtype=np.float32)
    kept = {r.keypoint for r in records}
    score_map = {k: v for k, v in (scores or {}).items() if k in kept}
    return PatchPairDataset(records, patches, score_map)


def generate_grid(sources: Sequence[SourceImage], cfg: GenConfig,
                  keypoints: Sequence[Keypoint] | None = None, scores=None) -> PatchPairDataset:
    """Grid pairs: 13 scale variants and 35 further rotations per keypoint.

    The identity transform appears once, so each keypoint yields 48 pairs.
    """
    if keypoints is None:
        keypoints = detect_keypoints(sources, cfg)
    ds, do = _grid_poses()
    jobs: dict[str, list] = {}
    for kp in keypoints:
        jobs.setdefault(kp.img, []).append((kp, ds, do))
    return _assemble(sources, jobs, cfg, scores)


def generate_continuous(sources: Sequence[SourceImage], cfg: GenConfig,
                        keypoints: Sequence[Keypoint] | None = None,
                        scores=None) -> PatchPairDataset:
    """``cfg.pairs`` randomly transformed pairs spread evenly over keypoints."""
    if keypoints is None:
        keypoints = detect_keypoints(sources, cfg)
    jobs: dict[str, list] = {}
    n = len(keypoints)
    for i, kp in enumerate(keypoints):
        count = cfg.pairs // n + (1 if i < cfg.pairs % n else 0)
        rng = np.random.default_rng([cfg.seed, i])
        ds, do = sample_continuous_poses(rng, count)
        jobs.setdefault(kp.img, []).append((kp, ds, do))
    return _assemble(sources, jobs, cfg, scores)


def build_dataset(sources: Sequence[SourceImage], cfg: GenConfig) -> PatchPairDataset:
    """Detect, score, prune, then generate pairs for the surviving keypoints."""
    keypoints = detect_keypoints(sources, cfg)
    if not keypoints:
        raise DatasetError("no keypoints found in the source images")
    scores = score_keypoints(sources, keypoints, cfg)
    keep = keep_top(scores, list(range(len(keypoints))), cfg.prune_fraction)
    log.info("pruned %d of %d keypoints", len(keypoints) - len(keep), len(keypoints))
    survivors = [keypoints[i] for i in keep]
    score_map = {keypoints[i].key: scores[i] for i in keep}
    if cfg.mode is GenMode.GRID:
        return generate_grid(sources, cfg, survivors, score_map)
    return generate_continuous(sources, cfg, survivors, score_map)


# -- splitting -------------------------------------------------------------

def split(dataset: PatchPairDataset, ratios=(0.98, 0.01, 0.01), seed: int = 0):
    """Partition by keypoint into ``(train, val, test)``."""
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    kps = dataset.keypoints()
    n = len(kps)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    counts = (n_train, n_val, n_test)
    if min(counts) <= 0:
        raise EmptySplitError(f"{n} keypoints cannot fill splits {ratios}: {counts}")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum((0,) + counts)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        members = {kps[i] for i in order[lo:hi]}
        parts.append(dataset.subset(lambda r, m=members: r.keypoint in m))
    return tuple(parts)


# -- persistence -----------------------------------------------------------

def _patch_bytes(shape) -> int:
    return int(np.prod(shape)) * 4


def save(dataset: PatchPairDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patches = np.ascontiguousarray(dataset.patches, dtype="<f4")
    shape = list(patches.shape[1:]) or [3, PATCH_SIZE, PATCH_SIZE]
    nbytes = _patch_bytes(shape)
    crcs = [zlib.crc32(p.tobytes()) for p in patches]
    with open(directory / PACK, "wb") as fh:
        fh.write(patches.tobytes())
    lines = [json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "patch": shape})]
    for r in dataset.records:
        lines.append(json.dumps({
            "id": r.id, "img": r.img, "kp": [r.kp[0], r.kp[1]], "ds": r.ds, "do": r.do,
            "off_a": r.patch_a * nbytes, "off_b": r.patch_b * nbytes,
            "crc_a": crcs[r.patch_a], "crc_b": crcs[r.patch_b],
        }))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(directory) -> PatchPairDataset:
    directory = Path(directory)
    text = (directory / MANIFEST).read_text(encoding="utf-8").splitlines()
    if not text:
        raise FormatError("empty manifest")
    header = json.loads(text[0])
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} manifest")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported version {header.get('version')}")
    shape = tuple(header["patch"])
    nbytes = _patch_bytes(shape)
    raw = (directory / PACK).read_bytes()
    if len(raw) % nbytes:
        raise TruncatedPackError(f"pack size {len(raw)} is not a multiple of {nbytes}")
    patches = np.frombuffer(raw, dtype="<f4").reshape((-1,) + shape).astype(np.float32)
    records = []
    checked = set()
    for line in text[1:]:
        if not line.strip():
            continue
        d = json.loads(line)
        idx = []
        for off, crc in ((d["off_a"], d["crc_a"]), (d["off_b"], d["crc_b"])):
            if off % nbytes or off + nbytes > len(raw):
                raise TruncatedPackError(f"record {d['id']}: offset {off} beyond pack end")
            i = off // nbytes
            if i not in checked:
                if zlib.crc32(raw[off:off + nbytes]) != crc:
                    raise ChecksumError(f"record {d['id']}: patch at offset {off} is corrupt")
                checked.add(i)
            idx.append(i)
        records.append(PatchPairRecord(int(d["id"]), d["img"], (float(d["kp"][0]), float(d["kp"][1])),
                                       float(d["ds"]), float(d["do"]), idx[0], idx[1]))
    return PatchPairDataset(records, patches)


def default_threads() -> int:
    return int(os.environ.get("PATCHPOSE_THREADS", "1"))
