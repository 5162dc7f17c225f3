"""Synthetic training pairs: random homography warps of real image crops.

Each pair holds two aligned 192x192 crops from one source image: crop a is a
plain copy, crop b is the source resampled through a random
scale/rotation/shear homography about the crop center, photometrically
jittered.  Binary masks mark the common area (pixels whose correspondence
lands inside the other crop), and crops whose strongest derivative response
is below a texture threshold are rejected.

Pair generation draws from an independent per-pair random stream spawned
from the master seed, so results are byte-identical regardless of worker
count or generation order.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from keynet import autodiff as ad
from keynet import filters, geometry, pgm

CROP_SIZE = 192

META_NAME = "meta.txt"
PAIR_FILES = ("a.pgm", "b.pgm", "mask_a.pgm", "mask_b.pgm", "H_ab.txt")


class SourceSizeError(ValueError):
    """Source image too small to carve warped crops from."""


@dataclass
class WarpRanges:
    """Uniform sampling ranges of the random homography parameters."""

    scale: tuple = (0.5, 3.5)
    skew: tuple = (-0.8, 0.8)  # shear coefficient
    rotation_deg: tuple = (-60.0, 60.0)
    crop_size: int = CROP_SIZE

    def __post_init__(self):
        for name in ("scale", "skew", "rotation_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: [{lo}, {hi}]")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        if self.crop_size < 2:
            raise ValueError("crop_size must be >= 2")

    def to_mapping(self):
        return {
            "scale_min": repr(self.scale[0]),
            "scale_max": repr(self.scale[1]),
            "skew_min": repr(self.skew[0]),
            "skew_max": repr(self.skew[1]),
            "rotation_min_deg": repr(self.rotation_deg[0]),
            "rotation_max_deg": repr(self.rotation_deg[1]),
            "crop_size": str(self.crop_size),
        }

    @classmethod
    def from_mapping(cls, mapping):
        def pair(lo, hi):
            return (float(mapping[lo]), float(mapping[hi]))

        return cls(
            scale=pair("scale_min", "scale_max"),
            skew=pair("skew_min", "skew_max"),
            rotation_deg=pair("rotation_min_deg", "rotation_max_deg"),
            crop_size=int(mapping["crop_size"]),
        )


@dataclass
class PairSample:
    """One training pair in memory (values already 8-bit quantized)."""

    image_a: np.ndarray  # [1, S, S] float32 in [0,1]
    image_b: np.ndarray
    h_ab: np.ndarray  # 3x3, maps a-frame centers to b-frame centers
    h_ba: np.ndarray
    mask_a: np.ndarray  # [1, S, S] bool
    mask_b: np.ndarray


@dataclass
class Rejected:
    """Marker for a crop draw that failed the texture test."""

    reason: str
    score: float


def sample_homography(rng, ranges):
    """Random scale*rotation*shear homography about the crop center.

    Draw order (scale, skew, rotation) is part of the reproducibility
    contract.  Degenerate ranges produce the exact identity.
    """
    s = rng.uniform(*ranges.scale)
    k = rng.uniform(*ranges.skew)
    theta = math.radians(rng.uniform(*ranges.rotation_deg))
    c = ranges.crop_size / 2.0
    scale = np.array([[s, 0, 0], [0, s, 0], [0, 0, 1.0]])
    rot = np.array(
        [
            [math.cos(theta), -math.sin(theta), 0],
            [math.sin(theta), math.cos(theta), 0],
            [0, 0, 1.0],
        ]
    )
    shear = np.array([[1.0, k, 0], [0, 1.0, 0], [0, 0, 1.0]])
    t_fwd = np.array([[1.0, 0, c], [0, 1.0, c], [0, 0, 1.0]])
    t_back = np.array([[1.0, 0, -c], [0, 1.0, -c], [0, 0, 1.0]])
    return geometry.normalize_homography(t_fwd @ scale @ rot @ shear @ t_back)


def photometric_jitter(image, rng):
    """Brightness shift U(-0.2, 0.2) and contrast gain U(0.7, 1.3), clamped.

    v -> clamp(g * (v - 0.5) + 0.5 + b, 0, 1); a zero draw (b=0, g=1) leaves
    in-range images unchanged.
    """
    b = rng.uniform(-0.2, 0.2)
    g = rng.uniform(0.7, 1.3)
    out = g * (np.asarray(image, dtype=np.float64) - 0.5) + 0.5 + b
    return np.clip(out, 0.0, 1.0)


def generate_pair(source, rng, ranges=None, texture_threshold=filters.DEFAULT_TEXTURE_THRESHOLD, jitter=True):
    """Draw one pair from a source image; returns PairSample or Rejected.

    source: [H,W] grayscale in [0,1], at least twice the crop size per side
    (raises SourceSizeError otherwise, which is distinct from a texture
    rejection).  Values are quantized to 8 bits before the texture test so
    accepted pairs stay accepted after a write/read round trip.
    """
    ranges = ranges or WarpRanges()
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2:
        raise ValueError(f"source must be [H,W] grayscale, got {source.shape}")
    size = ranges.crop_size
    if source.shape[0] < 2 * size or source.shape[1] < 2 * size:
        raise SourceSizeError(
            f"source {source.shape[0]}x{source.shape[1]} is smaller than twice "
            f"the crop size ({2 * size})"
        )

    h_ab = sample_homography(rng, ranges)
    h_ba = geometry.invert_homography(h_ab)
    o_r = int(rng.integers(0, source.shape[0] - size + 1))
    o_c = int(rng.integers(0, source.shape[1] - size + 1))

    crop_a = source[o_r : o_r + size, o_c : o_c + size]

    # render b by pulling source pixels through the inverse map; samples
    # outside the source are edge-clamped, which only affects pixels outside
    # the common area
    mx, my = geometry.warp_grid(h_ba, size, size)
    rows = my - 0.5 + o_r
    cols = mx - 0.5 + o_c
    crop_b = ad.warp_bilinear(ad.constant(source), rows, cols).value
    if jitter:
        crop_b = photometric_jitter(crop_b, rng)

    qa = pgm.image_to_unit(pgm.unit_to_image(crop_a))
    qb = pgm.image_to_unit(pgm.unit_to_image(crop_b))
    score_a = filters.texture_score(qa[None])
    if score_a < texture_threshold:
        return Rejected("texture_a", score_a)
    score_b = filters.texture_score(qb[None])
    if score_b < texture_threshold:
        return Rejected("texture_b", score_b)

    mask_a = _common_mask(h_ab, size)
    mask_b = _common_mask(h_ba, size)
    return PairSample(
        image_a=qa[None],
        image_b=qb[None],
        h_ab=h_ab,
        h_ba=h_ba,
        mask_a=mask_a[None],
        mask_b=mask_b[None],
    )


def _common_mask(h_fwd, size):
    # pixel centers whose image under h_fwd lies inside the partner crop
    mx, my = geometry.warp_grid(h_fwd, size, size)
    return geometry.inside_bounds(mx, my, size, size)


def pair_rng(seed, index):
    """Independent random stream for pair `index` under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(index + 1)[index])


def generate_dataset(sources, out_dir, num_pairs, seed, ranges=None,
                     texture_threshold=filters.DEFAULT_TEXTURE_THRESHOLD,
                     max_tries=64, threads=1, jitter=True):
    """Generate and write num_pairs accepted pairs; returns summary dict.

    sources: list of (name, [H,W] float array).  Pair i draws from source
    i % len(sources); texture rejections retry within the pair's own stream
    up to max_tries.  Output structure: one zero-padded subdirectory per
    pair plus a meta.txt recording ranges, threshold, seed and counts.
    """
    ranges = ranges or WarpRanges()
    if not sources:
        raise ValueError("no source images given")
    os.makedirs(out_dir, exist_ok=True)
    seq = np.random.SeedSequence(seed).spawn(num_pairs)

    def build_one(index):
        rng = np.random.default_rng(seq[index])
        name, src = sources[index % len(sources)]
        rejections = 0
        for _ in range(max_tries):
            result = generate_pair(src, rng, ranges, texture_threshold, jitter=jitter)
            if isinstance(result, PairSample):
                return index, result, rejections
            rejections += 1
        raise RuntimeError(
            f"pair {index}: {max_tries} consecutive texture rejections from "
            f"source {name!r}; corpus too flat for threshold {texture_threshold}"
        )

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build_one, range(num_pairs)))
    else:
        results = [build_one(i) for i in range(num_pairs)]

    total_rejections = 0
    for index, pair, rejections in results:
        total_rejections += rejections
        write_pair(pair_dir(out_dir, index), pair)

    meta = {
        "format": "keynet-pairs-v1",
        "pairs": str(num_pairs),
        "seed": str(seed),
        "texture_threshold": repr(texture_threshold),
        "jitter": "1" if jitter else "0",
        "rejections": str(total_rejections),
        "sources": ",".join(name for name, _ in sources),
    }
    meta.update(ranges.to_mapping())
    write_meta(os.path.join(out_dir, META_NAME), meta)
    return meta


def pair_dir(root, index):
    return os.path.join(root, f"pair_{index:06d}")


def write_pair(directory, pair):
    os.makedirs(directory, exist_ok=True)
    pgm.write_pgm(os.path.join(directory, "a.pgm"), pgm.unit_to_image(pair.image_a[0]))
    pgm.write_pgm(os.path.join(directory, "b.pgm"), pgm.unit_to_image(pair.image_b[0]))
    pgm.write_pgm(os.path.join(directory, "mask_a.pgm"), pair.mask_a[0].astype(np.uint8), maxval=1)
    pgm.write_pgm(os.path.join(directory, "mask_b.pgm"), pair.mask_b[0].astype(np.uint8), maxval=1)
    geometry.write_homography_text(pair.h_ab, os.path.join(directory, "H_ab.txt"))


def read_pair(directory):
    """Load one pair directory back into a PairSample."""
    def load(name):
        data, maxval = pgm.read_pgm(os.path.join(directory, name))
        return data, maxval

    a, _ = load("a.pgm")
    b, _ = load("b.pgm")
    mask_a, _ = load("mask_a.pgm")
    mask_b, _ = load("mask_b.pgm")
    h_ab = geometry.read_homography_text(os.path.join(directory, "H_ab.txt"))
    return PairSample(
        image_a=pgm.image_to_unit(a)[None],
        image_b=pgm.image_to_unit(b)[None],
        h_ab=h_ab,
        h_ba=geometry.invert_homography(h_ab),
        mask_a=(mask_a > 0)[None],
        mask_b=(mask_b > 0)[None],
    )


def list_pair_dirs(root):
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory {root!r} does not exist")
    dirs = sorted(
        os.path.join(root, d)
        for d in os.listdir(root)
        if d.startswith("pair_") and os.path.isdir(os.path.join(root, d))
    )
    if not dirs:
        raise ValueError(f"dataset directory {root!r} contains no pair_* subdirectories")
    return dirs


def read_dataset(root):
    """Iterate PairSamples from a dataset directory in index order."""
    for d in list_pair_dirs(root):
        yield read_pair(d)


def write_meta(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


def read_meta(path):
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                mapping[key] = value
    return mapping


def validate_pair(pair, texture_threshold=None):
    """Check the structural invariants of a stored pair; returns issue list.

    Verifies the homography round trip (1e-6), that the masks equal the
    exact bound predicates recomputed from H, that masked correspondences
    stay inside the partner image, and optionally the texture threshold.
    """
    issues = []
    size = pair.image_a.shape[-1]
    comp = pair.h_ab @ pair.h_ba
    comp = comp / comp[2, 2]
    if np.max(np.abs(comp - np.eye(3))) > 1e-6:
        issues.append("homography round trip exceeds 1e-6")
    if not np.array_equal(pair.mask_a[0], _common_mask(pair.h_ab, size)):
        issues.append("mask_a does not match its bound predicate")
    if not np.array_equal(pair.mask_b[0], _common_mask(pair.h_ba, size)):
        issues.append("mask_b does not match its bound predicate")
    for name, mask, h in (("mask_a", pair.mask_a[0], pair.h_ab), ("mask_b", pair.mask_b[0], pair.h_ba)):
        rows, cols = np.nonzero(mask)
        if rows.size:
            pts = np.stack([cols + 0.5, rows + 0.5], axis=1)
            mapped = geometry.apply_homography(h, pts)
            ok = geometry.inside_bounds(mapped[:, 0], mapped[:, 1], size, size)
            if not ok.all():
                issues.append(f"{name} maps outside the partner image")
    if texture_threshold is not None:
        for name, img in (("a", pair.image_a), ("b", pair.image_b)):
            if filters.texture_score(img) < texture_threshold:
                issues.append(f"image_{name} below texture threshold")
    return issues
