"""Procedurally generated textured images.

Used as a self-contained corpus for smoke tests, demos and desk-scale
training: multi-octave value noise, warped gratings, and scattered intensity
steps give crops with strong derivative structure at every scale.
"""

import numpy as np

from keynet import autodiff as ad


def _value_noise(rng, size, cells):
    grid = rng.random((cells, cells))
    return ad.bilinear_resize(ad.constant(grid[None]), size, size).value[0]


def _normalize(img):
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-9:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def make_textured_image(seed, size=512):
    """One [size,size] grayscale image in [0,1] mixing several patterns."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    # octaves of value noise
    amp = 1.0
    for cells in (4, 8, 16, 32, 64):
        img += amp * _value_noise(rng, size, cells)
        amp *= 0.55
    # a warped sinusoidal grating
    ys, xs = np.mgrid[0:size, 0:size] / size
    fx, fy = rng.uniform(4, 14, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.4 * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase + 2.5 * _value_noise(rng, size, 8))
    # scattered rectangles of random intensity
    for _ in range(40):
        h = int(rng.integers(8, size // 4))
        w = int(rng.integers(8, size // 4))
        r = int(rng.integers(0, size - h))
        c = int(rng.integers(0, size - w))
        img[r : r + h, c : c + w] += rng.uniform(-0.35, 0.35)
    return (0.05 + 0.9 * _normalize(img)).astype(np.float64)


def make_corpus(count, seed, size=512):
    """List of (name, image) tuples of procedurally textured sources."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31, size=count)
    return [(f"synth_{i:02d}", make_textured_image(int(s), size)) for i, s in enumerate(seeds)]


def write_corpus(directory, count, seed, size=512):
    """Write a procedural corpus as PGM files; returns the file paths."""
    import os

    from keynet import pgm

    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, img in make_corpus(count, seed, size):
        path = os.path.join(directory, f"{name}.pgm")
        pgm.write_pgm(path, pgm.unit_to_image(img))
        paths.append(path)
    return paths
