"""Fixed handcrafted feature bank: first/second image derivatives and their
products, plus the Gaussian blur used by the scale pyramid and the texture
test used when generating training crops.

All filters here are constants (zero learnable parameters).  Derivatives use
the 3x3 Sobel kernels scaled by 1/8 so a unit ramp yields gradient exactly 1;
second-order maps apply the first-order kernels twice.  Borders are handled
by edge replication, which keeps every channel identically zero on constant
images (zero padding would fabricate gradients along the frame).
"""

import numpy as np

# cross-correlation kernels; rows are y, columns are x
SOBEL_X = np.array(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=np.float64
) / 8.0
SOBEL_Y = SOBEL_X.T.copy()

#: channel layout of the bank, in order
CHANNEL_NAMES = (
    "ix",
    "iy",
    "ix_iy",
    "ix2",
    "iy2",
    "ixx",
    "iyy",
    "ixy",
    "ixx_iyy",
    "ixy2",
)

NUM_CHANNELS = len(CHANNEL_NAMES)

#: crops whose strongest derivative response is below this are "textureless"
DEFAULT_TEXTURE_THRESHOLD = 0.02


def _correlate3(stack, kernel):
    # stack: [..., H, W]; same-size cross-correlation with replicate borders
    kernel = kernel.astype(stack.dtype)
    pad = [(0, 0)] * (stack.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(stack, pad, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, kernel, optimize=True)


def filter_stack(images):
    """Batched bank: [..., H, W] -> [..., 10, H, W].

    This is the single code path for the bank; the model and the standalone
    API both call it.
    """
    images = np.asarray(images)
    ix = _correlate3(images, SOBEL_X)
    iy = _correlate3(images, SOBEL_Y)
    ixx = _correlate3(ix, SOBEL_X)
    iyy = _correlate3(iy, SOBEL_Y)
    ixy = _correlate3(ix, SOBEL_Y)
    channels = [ix, iy, ix * iy, ix * ix, iy * iy, ixx, iyy, ixy, ixx * iyy, ixy * ixy]
    return np.stack(channels, axis=-3)


def derivative_maps(image):
    """Compute the 10-channel derivative bank for one [1,H,W] image.

    Channel order: [I_x, I_y, I_x*I_y, I_x^2, I_y^2, I_xx, I_yy, I_xy,
    I_xx*I_yy, I_xy^2].  Multi-channel input is rejected; convert to
    grayscale first.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"derivative_maps expects [1,H,W], got {image.shape}")
    return filter_stack(image[0])


def _gaussian_kernel1d(sigma, dtype=np.float64):
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(dtype)


def _correlate_axis(stack, kernel, axis):
    radius = (kernel.shape[0] - 1) // 2
    moved = np.moveaxis(stack, axis, -1)
    pad = [(0, 0)] * (moved.ndim - 1) + [(radius, radius)]
    xp = np.pad(moved, pad, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel.shape[0], axis=-1)
    out = win @ kernel.astype(stack.dtype)
    return np.moveaxis(out, -1, axis)


def gaussian_blur_stack(images, sigma):
    """Separable Gaussian blur of [..., H, W] with kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"gaussian_blur requires sigma > 0, got {sigma}")
    kernel = _gaussian_kernel1d(sigma)
    out = _correlate_axis(np.asarray(images), kernel, -1)
    return _correlate_axis(out, kernel, -2)


def gaussian_blur(image, sigma):
    """Gaussian blur of one [1,H,W] image (normalized kernel, replicate border)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"gaussian_blur expects [1,H,W], got {image.shape}")
    return gaussian_blur_stack(image, sigma)


def texture_score(image):
    """Strongest absolute bank response, ignoring a 2-pixel border.

    Border responses are replication artifacts, so a crop must show structure
    in its interior to count as textured.  Images too small to have an
    interior score 0.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    channels = derivative_maps(image)
    interior = channels[:, 2:-2, 2:-2]
    if interior.size == 0:
        return 0.0
    return float(np.max(np.abs(interior)))
