"""Homography algebra and the project-wide pixel coordinate convention.

A keypoint at array index (row, col) has continuous coordinates
(x, y) = (col + 0.5, row + 0.5), so an H x W image covers [0, W] x [0, H].
Homographies are 3x3 float64 arrays normalized to h33 = 1 acting on these
center-based coordinates.
"""

import numpy as np

# homographies with |det| below this are treated as singular
SINGULAR_DET = 1e-8


def normalize_homography(H):
    """Scale a 3x3 projective matrix so h33 = 1."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {H.shape}")
    if abs(H[2, 2]) < SINGULAR_DET:
        raise ValueError("homography cannot be normalized: h33 ~ 0")
    return H / H[2, 2]


def invert_homography(H):
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) <= SINGULAR_DET:
        raise ValueError("singular homography (|det| <= 1e-8)")
    return normalize_homography(np.linalg.inv(H))


def apply_homography(H, points):
    """Map [N,2] (x, y) points through H; returns [N,2]."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ np.asarray(H, dtype=np.float64).T
    out = proj[:, :2] / proj[:, 2:3]
    return out[0] if single else out


def local_scale(H, points):
    """Isotropic length scale of H at given (x, y) points.

    sqrt of |det| of the projective map's 2x2 Jacobian: for
    w = h31*x + h32*y + h33 the Jacobian determinant is det(H) / w^3.
    """
    H = np.asarray(H, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    w = H[2, 0] * pts[:, 0] + H[2, 1] * pts[:, 1] + H[2, 2]
    det_j = np.linalg.det(H) / (w**3)
    out = np.sqrt(np.abs(det_j))
    return float(out[0]) if np.asarray(points).ndim == 1 else out


def pixel_centers_grid(height, width):
    """Continuous (x, y) coordinates of every pixel center: two [H,W] arrays."""
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


def warp_grid(H, height, width):
    """Map every pixel center of an H x W frame through H.

    Returns two [H,W] float arrays (mapped x, mapped y) in continuous
    coordinates of the target frame.
    """
    H = np.asarray(H, dtype=np.float64)
    gx, gy = pixel_centers_grid(height, width)
    w = H[2, 0] * gx + H[2, 1] * gy + H[2, 2]
    mx = (H[0, 0] * gx + H[0, 1] * gy + H[0, 2]) / w
    my = (H[1, 0] * gx + H[1, 1] * gy + H[1, 2]) / w
    return mx, my


def inside_bounds(x, y, height, width, margin=0.0):
    """True where continuous (x, y) lies inside an H x W image's area."""
    return (
        (x >= margin)
        & (x <= width - margin)
        & (y >= margin)
        & (y <= height - margin)
    )


def read_homography_text(path):
    """Read 9 whitespace-separated decimals (row-major 3x3), normalized."""
    with open(path, "r", encoding="ascii") as fh:
        values = [float(tok) for tok in fh.read().split()]
    if len(values) != 9:
        raise ValueError(f"{path}: expected 9 homography values, got {len(values)}")
    return normalize_homography(np.array(values, dtype=np.float64).reshape(3, 3))


def write_homography_text(H, path):
    """Write a 3x3 homography as 9 '%.17g' decimals, row-major, one row per line."""
    H = normalize_homography(H)
    rows = [" ".join(f"{v:.17g}" for v in row) for row in H]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(rows) + "\n")
