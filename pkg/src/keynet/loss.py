"""Differentiable multi-window keypoint localization loss.

For each grid window, a spatial softmax over response values proposes one
"expected maximum" coordinate (differentiable), while a hard per-window
argmax of the partner image's warped response provides the regression target
(no gradient).  Each squared coordinate error is weighted by the summed
response at the proposed/target locations so windows without structure stop
influencing the update.  The loss is evaluated over several window sizes and
combined with fixed per-size weights, and symmetrized by swapping the two
images.

Geometry: windows are axis-aligned in the frame of the first image and the
partner response map is inverse-warped into that frame first, so window
correspondence is exact.  A window participates only when at least 75% of
its pixels are valid under both the common-area mask and the warp validity
mask.  Coordinates follow the pixel-center convention of keynet.geometry.
"""

from dataclasses import dataclass, field

import numpy as np

from keynet import autodiff as ad
from keynet import geometry

#: minimum fraction of valid pixels for a window to enter the loss
VALID_WINDOW_FRACTION = 0.75


@dataclass
class GridCoords:
    """Per-window coordinates over a non-overlapping N x N grid.

    soft_coords/window_origins are [G,2] arrays of (x, y); masses holds the
    response weight contribution sampled at each coordinate.
    """

    window_size: int
    soft_coords: np.ndarray
    masses: np.ndarray
    window_origins: np.ndarray


@dataclass
class MsipLossValue:
    """Reported loss: total = sum of weight * level_loss over levels."""

    total: float
    per_level: list = field(default_factory=list)
    degenerate: bool = False


def _check_window(height, width, n):
    if n < 2:
        raise ValueError(f"window size must be >= 2, got {n}")
    if n > height or n > width:
        raise ValueError(f"window {n} exceeds image dimensions {height}x{width}")


def _window_origins(height, width, n):
    # top-left pixel index of each full window, row-major over the grid
    gh, gw = height // n, width // n
    rows0 = np.repeat(np.arange(gh, dtype=np.float64) * n, gw)
    cols0 = np.tile(np.arange(gw, dtype=np.float64) * n, gh)
    return rows0, cols0


def _partition_values(values, n):
    # [B,H,W] -> [B,G,n*n] without autodiff
    B, H, W = values.shape
    gh, gw = H // n, W // n
    core = values[:, : gh * n, : gw * n]
    return (
        core.reshape(B, gh, n, gw, n).transpose(0, 1, 3, 2, 4).reshape(B, gh * gw, n * n)
    )


def _as_map_batch(response):
    """Coerce [H,W], [1,H,W] or [B,H,W] input (Variable or array) to [B,H,W]."""
    var = response if isinstance(response, ad.Variable) else ad.constant(response)
    if var.value.ndim == 2:
        return ad.reshape(var, (1,) + var.value.shape)
    if var.value.ndim == 3:
        return var
    raise ValueError(f"expected a response map, got shape {var.value.shape}")


def soft_window_coords(resp, n, base):
    """Softmax-weighted coordinates per window for a [B,H,W] Variable.

    Returns (xs, ys) Variables of shape [B,G] holding full-image coordinates
    in the pixel-center convention.  The per-window maximum is subtracted
    before exponentiation; the softmax value is unchanged by that shift, so
    gradients are exact, not approximate.
    """
    B, H, W = resp.value.shape
    _check_window(H, W, n)
    gh, gw = H // n, W // n
    g_count = gh * gw
    n2 = n * n
    win = ad.reshape(ad.grid_windows(ad.reshape(resp, (B, 1, H, W)), n), (B, g_count, n2))
    shift = np.broadcast_to(win.value.max(axis=-1, keepdims=True), win.value.shape)
    e = ad.exp_base(ad.subtract(win, ad.constant(shift)), base)
    denom = ad.sum_last(e)
    m = ad.divide(e, ad.repeat_last(denom, n2))

    idx = np.arange(n2)
    u = (idx % n).astype(resp.value.dtype)  # column offset within window
    v = (idx // n).astype(resp.value.dtype)  # row offset within window
    rows0, cols0 = _window_origins(H, W, n)
    u_t = ad.constant(np.broadcast_to(u, (B, g_count, n2)))
    v_t = ad.constant(np.broadcast_to(v, (B, g_count, n2)))
    off_x = ad.constant(np.broadcast_to((cols0 + 0.5).astype(resp.value.dtype), (B, g_count)))
    off_y = ad.constant(np.broadcast_to((rows0 + 0.5).astype(resp.value.dtype), (B, g_count)))
    xs = ad.add(ad.reshape(ad.sum_last(ad.multiply(m, u_t)), (B, g_count)), off_x)
    ys = ad.add(ad.reshape(ad.sum_last(ad.multiply(m, v_t)), (B, g_count)), off_y)
    return xs, ys


def hard_window_coords(values, n, valid=None):
    """Per-window argmax pixel centers for [B,H,W] values (no gradient).

    Ties resolve to the smallest row-major index inside the window.  When a
    validity mask is given, invalid pixels are excluded; windows with no
    valid pixel fall back to their first pixel (callers mask those windows
    out of the loss).
    Returns (xs, ys, rows, cols) float/int arrays of shape [B,G].
    """
    B, H, W = values.shape
    _check_window(H, W, n)
    windows = _partition_values(values, n)
    if valid is not None:
        masked = np.where(_partition_values(valid, n), windows, -np.inf)
        all_invalid = ~np.isfinite(masked).any(axis=-1)
        if all_invalid.any():
            masked[all_invalid, :] = 0.0
        windows = masked
    flat = np.argmax(windows, axis=-1)
    rows0, cols0 = _window_origins(H, W, n)
    rows = (flat // n) + rows0.astype(np.int64)
    cols = (flat % n) + cols0.astype(np.int64)
    return cols + 0.5, rows + 0.5, rows, cols


def window_valid_fraction(valid, n):
    """Fraction of valid pixels per window: [B,H,W] bool -> [B,G] float."""
    return _partition_values(valid.astype(np.float64), n).mean(axis=-1)


def ip_coords(response, n, base):
    """Differentiable expected-argmax coordinates per grid window.

    response: [H,W] or [1,H,W] map (array or Variable); returns GridCoords
    whose masses are the response sampled at the proposed coordinates.
    """
    if base <= 1.0:
        raise ValueError(f"softmax base must be > 1, got {base}")
    arr = response.value if isinstance(response, ad.Variable) else np.asarray(response)
    if arr.ndim == 3:
        arr = arr[0]
    resp = _as_map_batch(arr)
    H, W = resp.value.shape[1:]
    xs, ys = soft_window_coords(resp, n, base)
    masses = ad.bilinear_sample_batch(
        resp, ad.constant(xs.value - 0.5), ad.constant(ys.value - 0.5)
    )
    rows0, cols0 = _window_origins(H, W, n)
    return GridCoords(
        window_size=n,
        soft_coords=np.stack([xs.value[0], ys.value[0]], axis=1).astype(np.float64),
        masses=masses.value[0].astype(np.float64),
        window_origins=np.stack([cols0, rows0], axis=1),
    )


def nms_coords(response, n):
    """Hard per-window argmax coordinates (pixel centers, no gradient)."""
    arr = response.value if isinstance(response, ad.Variable) else np.asarray(response)
    if arr.ndim == 3:
        arr = arr[0]
    values = arr[None]
    H, W = arr.shape
    xs, ys, rows, cols = hard_window_coords(values, n)
    rows0, cols0 = _window_origins(H, W, n)
    return GridCoords(
        window_size=n,
        soft_coords=np.stack([xs[0], ys[0]], axis=1).astype(np.float64),
        masses=arr[rows[0], cols[0]].astype(np.float64),
        window_origins=np.stack([cols0, rows0], axis=1),
    )


def warp_response(response_b, H_ba, out_shape):
    """Inverse-warp a response map from frame b into frame a.

    H_ba maps b-frame coordinates to a-frame coordinates; each output pixel p
    samples R_b at inv(H_ba) applied to p's center.  Returns (warped map,
    validity mask) where the mask marks pixels whose source location lies
    inside image b.  Accepts arrays or Variables; gradients (if any) flow to
    the map values only.
    """
    var = response_b if isinstance(response_b, ad.Variable) else ad.constant(response_b)
    squeeze = var.value.ndim == 3
    if squeeze:
        var = ad.reshape(var, var.value.shape[1:])
    if var.value.ndim != 2:
        raise ValueError(f"warp_response expects a single map, got {var.value.shape}")
    hb, wb = var.value.shape
    out_h, out_w = out_shape
    H_ab = geometry.invert_homography(H_ba)
    mx, my = geometry.warp_grid(H_ab, out_h, out_w)
    warped = ad.warp_bilinear(var, my - 0.5, mx - 0.5)
    validity = geometry.inside_bounds(mx, my, hb, wb)
    if squeeze:
        warped = ad.reshape(warped, (1, out_h, out_w))
    return warped, validity


@dataclass
class DirectionStats:
    valid_windows: int = 0
    degenerate_samples: int = 0


def _direction_term(resp_soft, warped_target, valid, n, base):
    """One direction of the covariant loss, batched: Variable [1].

    resp_soft: [B,H,W] Variable proposing soft coordinates; warped_target:
    [B,H,W] Variable (partner response warped into this frame) providing
    hard targets and target-side weights; valid: [B,H,W] bool.
    """
    B, H, W = resp_soft.value.shape
    dtype = resp_soft.value.dtype
    frac = window_valid_fraction(valid, n)
    window_ok = frac >= VALID_WINDOW_FRACTION
    stats = DirectionStats(valid_windows=int(window_ok.sum()))
    if stats.valid_windows == 0:
        stats.degenerate_samples = B
        return ad.constant(np.zeros(1, dtype=dtype)), stats

    xs, ys = soft_window_coords(resp_soft, n, base)
    tx, ty, trow, tcol = hard_window_coords(warped_target.value, n, valid)

    # weight: response at proposed location plus warped response at target;
    # the proposed location stays on the tape (only targets are detached)
    a_soft = ad.bilinear_sample_batch(resp_soft, ad.subtract(xs, 0.5), ad.subtract(ys, 0.5))
    a_hard = ad.gather_pixels_batch(warped_target, trow, tcol)
    alpha = ad.relu(ad.add(a_soft, a_hard))
    ok_f = ad.constant(window_ok.astype(dtype))
    alpha = ad.multiply(alpha, ok_f)
    denom = ad.sum_last(alpha)
    degenerate = denom.value[:, 0] <= 0.0
    stats.degenerate_samples = int(degenerate.sum())
    safe = ad.add(denom, ad.constant(degenerate.astype(dtype)[:, None]))
    alpha_n = ad.divide(alpha, ad.repeat_last(safe, alpha.value.shape[-1]))

    dx = ad.subtract(xs, ad.constant(tx.astype(dtype)))
    dy = ad.subtract(ys, ad.constant(ty.astype(dtype)))
    sq = ad.add(ad.multiply(dx, dx), ad.multiply(dy, dy))
    per_window = ad.multiply(alpha_n, sq)
    return ad.multiply(ad.sum_all(per_window), 1.0 / B), stats


def _warp_batch(resp, homographies, out_h, out_w, src_h, src_w):
    # inverse-warp each sample's map by its own homography (grids constant)
    B = resp.value.shape[0]
    rows = np.empty((B, out_h, out_w))
    cols = np.empty((B, out_h, out_w))
    validity = np.empty((B, out_h, out_w), dtype=bool)
    for i in range(B):
        mx, my = geometry.warp_grid(homographies[i], out_h, out_w)
        rows[i] = my - 0.5
        cols[i] = mx - 0.5
        validity[i] = geometry.inside_bounds(mx, my, src_h, src_w)
    return ad.warp_bilinear_batch(resp, rows, cols), validity


def msip_loss_batch(resp_a, resp_b, h_ab, h_ba, mask_a, mask_b, config):
    """Symmetric multi-window loss over a batch of image pairs.

    resp_a/resp_b: [B,1,H,W] or [B,H,W] Variables; h_ab/h_ba: [B,3,3]
    homography arrays per pair; mask_a/mask_b: [B,H,W] bool common-area
    masks (None means all true).  Returns (loss Variable [1], MsipLossValue
    report); the report's per-level entries are batch means.
    """
    ra = _as_map_batch(resp_a)
    rb = _as_map_batch(resp_b)
    if ra.value.shape != rb.value.shape:
        raise ValueError(f"response shapes differ: {ra.value.shape} vs {rb.value.shape}")
    B, H, W = ra.value.shape
    h_ab = np.asarray(h_ab, dtype=np.float64).reshape(B, 3, 3)
    h_ba = np.asarray(h_ba, dtype=np.float64).reshape(B, 3, 3)
    mask_a = np.ones((B, H, W), dtype=bool) if mask_a is None else np.asarray(mask_a, dtype=bool)
    mask_b = np.ones((B, H, W), dtype=bool) if mask_b is None else np.asarray(mask_b, dtype=bool)

    # warping is window-size independent: do it once per direction
    warped_b_in_a, val_b = _warp_batch(rb, h_ab, H, W, H, W)
    warped_a_in_b, val_a = _warp_batch(ra, h_ba, H, W, H, W)
    valid_in_a = mask_a & val_b
    valid_in_b = mask_b & val_a

    total_var = None
    per_level = []
    degenerate = False
    for n, lam in zip(config.msip_window_sizes, config.msip_weights):
        term_a, stats_a = _direction_term(ra, warped_b_in_a, valid_in_a, n, config.softmax_base)
        term_b, stats_b = _direction_term(rb, warped_a_in_b, valid_in_b, n, config.softmax_base)
        level = ad.add(term_a, term_b)
        degenerate |= (stats_a.valid_windows == 0) or (stats_b.valid_windows == 0)
        per_level.append((n, lam, float(level.value[0])))
        weighted = ad.multiply(level, lam)
        total_var = weighted if total_var is None else ad.add(total_var, weighted)
    report = MsipLossValue(
        total=sum(lam * lvl for _, lam, lvl in per_level),
        per_level=per_level,
        degenerate=degenerate,
    )
    return total_var, report


def ip_loss(resp_a, resp_b, h_ab, h_ba, masks, n, base):
    """Single-pair symmetric covariant loss at one window size.

    masks is (mask_a, mask_b) or None.  Returns (loss Variable [1],
    degenerate flag); the flag is set when either direction had no valid
    window (the loss is then zero for that direction).
    """

    class _OneLevel:
        msip_window_sizes = [n]
        msip_weights = [1.0]
        softmax_base = base

    mask_a, mask_b = masks if masks is not None else (None, None)
    ra = _as_single(resp_a)
    rb = _as_single(resp_b)
    total, report = msip_loss_batch(
        _lift(ra),
        _lift(rb),
        np.asarray(h_ab)[None],
        np.asarray(h_ba)[None],
        None if mask_a is None else np.asarray(mask_a, dtype=bool)[None],
        None if mask_b is None else np.asarray(mask_b, dtype=bool)[None],
        _OneLevel,
    )
    return total, report.degenerate


def msip_loss(resp_a, resp_b, h_ab, h_ba, masks, config):
    """Single-pair multi-window loss; returns (loss Variable, MsipLossValue)."""
    mask_a, mask_b = masks if masks is not None else (None, None)
    total, report = msip_loss_batch(
        _lift(_as_single(resp_a)),
        _lift(_as_single(resp_b)),
        np.asarray(h_ab)[None],
        np.asarray(h_ba)[None],
        None if mask_a is None else np.asarray(mask_a, dtype=bool)[None],
        None if mask_b is None else np.asarray(mask_b, dtype=bool)[None],
        config,
    )
    return total, report


def _as_single(response):
    var = response if isinstance(response, ad.Variable) else ad.constant(response)
    if var.value.ndim == 3 and var.value.shape[0] == 1:
        return ad.reshape(var, var.value.shape[1:])
    if var.value.ndim != 2:
        raise ValueError(f"expected one response map, got {var.value.shape}")
    return var


def _lift(var2d):
    return ad.reshape(var2d, (1,) + var2d.value.shape)
