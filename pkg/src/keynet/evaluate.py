"""Keypoint extraction and the repeatability protocol.

Keypoints are (x, y, scale, score) rows in pixel-center coordinates.
Detection keeps strict local maxima of the response map (a pixel survives
only if it beats every neighbor in its window), ranks by score with
row-major tie-breaks, and assigns a fixed 15 px radius at single scale;
multi-scale detection re-runs the detector on shrunken copies and merges
across levels.

Overlap error follows the circle-intersection protocol: keypoint b is
projected into frame a (center and scale, via the homography's local scale),
the larger radius is normalized to 30 px, and the error is one minus the
intersection-over-union of the two discs.  Repeatability filters both sets
to the common region, symmetrizes the error, and matches greedily in
ascending-error order, each keypoint at most once.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from keynet import autodiff as ad
from keynet import geometry, model as model_mod

#: radius assigned to single-scale detections (half the 30 px normalization)
SINGLE_SCALE_RADIUS = 15.0

#: scale step between multi-scale levels; 12 levels span a 7.6x scale range
SCALE_LEVELS = 12
SCALE_FACTOR = 7.6 ** (1.0 / (SCALE_LEVELS - 1))

#: larger-of-the-pair radius after normalization
NORMALIZED_RADIUS = 30.0


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    score: float


@dataclass
class RepeatabilityReport:
    repeatability: float
    mean_overlap_error: float
    num_correspondences: int
    scale_range: float
    num_a: int = 0
    num_b: int = 0
    empty: bool = False


def _as_rows(kps):
    """Coerce Keypoint lists / [N,4] arrays to a float64 [N,4] array."""
    if isinstance(kps, np.ndarray):
        arr = np.asarray(kps, dtype=np.float64)
        if arr.ndim == 1 and arr.size == 4:
            arr = arr[None]
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"keypoint array must be [N,4], got {arr.shape}")
        return arr
    if isinstance(kps, Keypoint):
        return np.array([[kps.x, kps.y, kps.scale, kps.score]], dtype=np.float64)
    return np.array(
        [[k.x, k.y, k.scale, k.score] if isinstance(k, Keypoint) else list(k) for k in kps],
        dtype=np.float64,
    ).reshape(-1, 4)


def strict_local_maxima(response, nms_size):
    """(rows, cols) of pixels strictly greater than their whole nms window.

    Ties never survive; neighbors outside the image do not suppress.
    """
    response = np.asarray(response)
    if response.ndim == 3:
        response = response[0]
    if nms_size < 1 or nms_size % 2 == 0:
        raise ValueError(f"nms size must be odd and >= 1, got {nms_size}")
    footprint = np.ones((nms_size, nms_size), dtype=bool)
    footprint[nms_size // 2, nms_size // 2] = False
    ring_max = maximum_filter(response, footprint=footprint, mode="constant", cval=-np.inf)
    return np.nonzero(response > ring_max)


def keypoints_from_response(response, top_k, nms_size, scale=SINGLE_SCALE_RADIUS):
    """Rank strict maxima by (-score, row, col) and keep the top_k."""
    response = np.asarray(response)
    if response.ndim == 3:
        response = response[0]
    rows, cols = strict_local_maxima(response, nms_size)
    scores = response[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]
    if rows.size > top_k:
        rows, cols, scores = rows[:top_k], cols[:top_k], scores[:top_k]
    out = np.empty((rows.size, 4), dtype=np.float64)
    out[:, 0] = cols + 0.5
    out[:, 1] = rows + 0.5
    out[:, 2] = scale
    out[:, 3] = scores
    return out


def detect(image, weights, config, top_k=1000, nms_size=15):
    """Single-scale detection: [N,4] keypoint rows, N <= top_k."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    response = model_mod.forward(np.asarray(image), weights, config)
    kps = keypoints_from_response(response, top_k, nms_size)
    if kps.shape[0] < top_k:
        warnings.warn(
            f"detect: only {kps.shape[0]} strict maxima available (requested {top_k})",
            stacklevel=2,
        )
    return kps


def detect_multiscale(
    image,
    weights,
    config,
    top_k=1000,
    nms_size=15,
    scale_levels=SCALE_LEVELS,
    scale_factor=SCALE_FACTOR,
):
    """Detect on progressively downscaled copies and merge across levels.

    Level l shrinks the image by scale_factor**l and contributes keypoints
    of scale 15 * scale_factor**l mapped back to the original frame; merged
    detections suppress anything closer than a radius proportional to the
    larger scale of the pair.  Levels smaller than the architecture minimum
    are skipped with a warning.
    """
    if scale_levels < 1 or scale_factor <= 1:
        raise ValueError("scale_levels must be >= 1 and scale_factor > 1")
    image = np.asarray(image)
    H, W = image.shape[-2:]
    min_size = model_mod.min_input_size(config)
    collected = []
    for lvl in range(scale_levels):
        f = scale_factor**lvl
        h, w = int(round(H / f)), int(round(W / f))
        if min(h, w) < max(min_size, nms_size):
            warnings.warn(f"multiscale: skipping level {lvl} ({h}x{w} too small)", stacklevel=2)
            continue
        scaled = ad.bilinear_resize(ad.constant(image.reshape(1, H, W)), h, w).value
        kps = keypoints_from_response(
            model_mod.forward(scaled, weights, config),
            top_k,
            nms_size,
            scale=SINGLE_SCALE_RADIUS * f,
        )
        # pixel-center coordinates rescale linearly between resolutions
        kps[:, 0] *= W / w
        kps[:, 1] *= H / h
        collected.append(kps)
    if not collected:
        raise ValueError("multiscale: no level fits the image")
    merged = _merge_levels(np.vstack(collected), nms_size)
    return merged[:top_k]


def _merge_levels(kps, nms_size):
    # greedy score-ordered acceptance with scale-proportional suppression
    order = np.lexsort((kps[:, 2], kps[:, 0], kps[:, 1], -kps[:, 3]))
    kps = kps[order]
    accepted = np.zeros(kps.shape[0], dtype=bool)
    acc_xy = np.empty((0, 2))
    acc_scale = np.empty(0)
    radius_per_scale = (nms_size // 2) / SINGLE_SCALE_RADIUS
    for i in range(kps.shape[0]):
        if acc_xy.shape[0]:
            d = np.hypot(acc_xy[:, 0] - kps[i, 0], acc_xy[:, 1] - kps[i, 1])
            limit = radius_per_scale * np.maximum(acc_scale, kps[i, 2])
            if np.any(d < limit):
                continue
        accepted[i] = True
        acc_xy = np.vstack([acc_xy, kps[i, :2]])
        acc_scale = np.append(acc_scale, kps[i, 2])
    return kps[accepted]


def _circle_iou_error(r1, r2, d):
    """1 - IoU of circles with radii r1, r2 at center distance d (vectorized)."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    rmin = np.minimum(r1, r2)
    rmax = np.maximum(r1, r2)
    inter = np.zeros(np.broadcast(r1, r2, d).shape)
    # fully contained (covers the concentric case exactly)
    contained = d <= (rmax - rmin)
    inter = np.where(contained, np.pi * rmin**2, inter)
    # partially overlapping lens
    partial = (~contained) & (d < r1 + r2)
    if np.any(partial):
        dp = d[partial] if d.ndim else np.full(partial.sum(), float(d))
        a1 = np.broadcast_to(r1, partial.shape)[partial]
        a2 = np.broadcast_to(r2, partial.shape)[partial]
        cos1 = np.clip((dp**2 + a1**2 - a2**2) / (2 * dp * a1), -1.0, 1.0)
        cos2 = np.clip((dp**2 + a2**2 - a1**2) / (2 * dp * a2), -1.0, 1.0)
        lens = (
            a1**2 * np.arccos(cos1)
            + a2**2 * np.arccos(cos2)
            - 0.5
            * np.sqrt(
                np.maximum(
                    (-dp + a1 + a2) * (dp + a1 - a2) * (dp - a1 + a2) * (dp + a1 + a2), 0.0
                )
            )
        )
        inter[partial] = lens
    union = np.pi * r1**2 + np.pi * r2**2 - inter
    return 1.0 - inter / union


def _project_errors(kpa, kpb, h_ab, l_mode):
    """One-direction [n_a, n_b] overlap errors, b projected into frame a."""
    h_ba = geometry.invert_homography(h_ab)
    pb_in_a = geometry.apply_homography(h_ba, kpb[:, :2]).reshape(-1, 2)
    j_ba = geometry.local_scale(h_ba, kpb[:, :2])
    return _grid_errors(kpa, kpb, pb_in_a, j_ba, h_ab, l_mode)


def _grid_errors(kpa, kpb, pb_in_a, j_ba, h_ab, l_mode):
    r1 = kpa[:, 2][:, None]
    if l_mode:
        # ground-truth-consistent partner scale: kp_a's scale carried through
        # the homography and projected back, so matching becomes location-only
        j_ab = geometry.local_scale(h_ab, kpa[:, :2])
        r2 = (kpa[:, 2] * j_ab)[:, None] * j_ba[None, :]
    else:
        r2 = (kpb[:, 2] * j_ba)[None, :]
    dx = kpa[:, 0][:, None] - pb_in_a[None, :, 0]
    dy = kpa[:, 1][:, None] - pb_in_a[None, :, 1]
    d = np.hypot(dx, dy)
    f = NORMALIZED_RADIUS / np.maximum(r1, r2)
    return _circle_iou_error(r1 * f, r2 * f, d * f)


def iou_error(kp_a, kp_b, h_ab, l_mode=False):
    """Scale-normalized circle overlap error of one keypoint pair."""
    kpa = _as_rows(kp_a)
    kpb = _as_rows(kp_b)
    return float(_project_errors(kpa, kpb, np.asarray(h_ab, dtype=np.float64), l_mode)[0, 0])


def filter_common(kps, mask_own, h_to_other, other_shape):
    """Keep keypoints inside their own mask whose correspondence lands in the
    partner image."""
    kps = _as_rows(kps)
    if kps.shape[0] == 0:
        return kps
    keep = np.ones(kps.shape[0], dtype=bool)
    if mask_own is not None:
        mask_own = np.asarray(mask_own)
        if mask_own.ndim == 3:
            mask_own = mask_own[0]
        rows = np.clip(np.floor(kps[:, 1]).astype(int), 0, mask_own.shape[0] - 1)
        cols = np.clip(np.floor(kps[:, 0]).astype(int), 0, mask_own.shape[1] - 1)
        keep &= mask_own[rows, cols]
    mapped = geometry.apply_homography(h_to_other, kps[:, :2]).reshape(-1, 2)
    keep &= geometry.inside_bounds(mapped[:, 0], mapped[:, 1], other_shape[0], other_shape[1])
    return kps[keep]


def repeatability(kps_a, kps_b, h_ab, h_ba, shape, masks=None, eps_max=0.4, l_mode=False):
    """Greedy one-to-one matching of common-region keypoints.

    shape is the (H, W) of both images; masks is (mask_a, mask_b) or None.
    The candidate error is symmetrized (mean of both projection directions)
    so that swapping (a, b) together with inverting H gives the identical
    score.  Returns a RepeatabilityReport with repeatability in percent
    relative to the smaller filtered set.
    """
    h_ab = np.asarray(h_ab, dtype=np.float64)
    h_ba = np.asarray(h_ba, dtype=np.float64)
    mask_a, mask_b = masks if masks is not None else (None, None)
    ka = filter_common(kps_a, mask_a, h_ab, shape)
    kb = filter_common(kps_b, mask_b, h_ba, shape)
    scales = np.concatenate([ka[:, 2], kb[:, 2]])
    s_range = float(scales.max() / scales.min()) if scales.size else 1.0
    if ka.shape[0] == 0 or kb.shape[0] == 0:
        warnings.warn("repeatability: empty keypoint set after common-region filtering", stacklevel=2)
        return RepeatabilityReport(0.0, 0.0, 0, s_range, ka.shape[0], kb.shape[0], empty=True)

    err = 0.5 * (_project_errors(ka, kb, h_ab, l_mode) + _project_errors(kb, ka, h_ba, l_mode).T)
    cand_i, cand_j = np.nonzero(err < eps_max)
    cand_e = err[cand_i, cand_j]
    order = np.lexsort((cand_j, cand_i, cand_e))
    used_a = np.zeros(ka.shape[0], dtype=bool)
    used_b = np.zeros(kb.shape[0], dtype=bool)
    matched_errors = []
    for idx in order:
        i, j = cand_i[idx], cand_j[idx]
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = True
        used_b[j] = True
        matched_errors.append(cand_e[idx])
    matches = len(matched_errors)
    return RepeatabilityReport(
        repeatability=100.0 * matches / min(ka.shape[0], kb.shape[0]),
        mean_overlap_error=float(np.mean(matched_errors)) if matches else 0.0,
        num_correspondences=matches,
        scale_range=s_range,
        num_a=ka.shape[0],
        num_b=kb.shape[0],
    )


def evaluate_pairs(pairs, weights, config, top_k=1000, nms_size=15, eps_max=0.4,
                   l_mode=False, multiscale=False):
    """Mean repeatability over an iterable of PairSamples.

    Returns (mean repeatability, list of per-pair RepeatabilityReports).
    """
    reports = []
    for pair in pairs:
        if multiscale:
            kps_a = detect_multiscale(pair.image_a, weights, config, top_k, nms_size)
            kps_b = detect_multiscale(pair.image_b, weights, config, top_k, nms_size)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                kps_a = detect(pair.image_a, weights, config, top_k, nms_size)
                kps_b = detect(pair.image_b, weights, config, top_k, nms_size)
        reports.append(
            repeatability(
                kps_a,
                kps_b,
                pair.h_ab,
                pair.h_ba,
                pair.image_a.shape[-2:],
                masks=(pair.mask_a, pair.mask_b),
                eps_max=eps_max,
                l_mode=l_mode,
            )
        )
    mean_rep = float(np.mean([r.repeatability for r in reports])) if reports else 0.0
    return mean_rep, reports


def write_keypoints(path, kps):
    """Write keypoints as 'x y scale score' rows with %.4f formatting."""
    kps = _as_rows(kps)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x y scale score\n")
        for x, y, s, v in kps:
            fh.write(f"{x:.4f} {y:.4f} {s:.4f} {v:.4f}\n")


def read_keypoints(path):
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "x y scale score":
            raise ValueError(f"{path}: unexpected keypoint header {header!r}")
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 fields, got {len(parts)}")
            rows.append([float(p) for p in parts])
    out = np.array(rows, dtype=np.float64).reshape(-1, 4)
    if np.any(out[:, 2] <= 0):
        raise ValueError(f"{path}: keypoint scales must be positive")
    return out
