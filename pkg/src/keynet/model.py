"""Hybrid handcrafted/learned keypoint detector.

The response map is produced from a small image pyramid: each level is
blurred, downsampled, passed through the fixed derivative bank and a stack of
learned conv->batchnorm->ReLU blocks whose weights are shared across all
levels, then upsampled back to input size.  The per-level streams are
concatenated and fused by one final convolution into a single-channel score
map.  A reduced configuration (one block, one filter, one level) is expressed
purely through KeyNetConfig.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from keynet import autodiff as ad
from keynet import filters


def _default_windows():
    return [8, 16, 24, 32, 40]


def _default_weights():
    return [256.0, 64.0, 16.0, 4.0, 1.0]


@dataclass
class KeyNetConfig:
    """Architecture plus loss-shape settings (window sizes feed the loss)."""

    pyramid_levels: int = 3
    downsample_factor: float = 1.2
    num_learnable_blocks: int = 3
    filters_per_block: int = 8
    kernel_size: int = 5
    softmax_base: float = math.e
    msip_window_sizes: list = field(default_factory=_default_windows)
    msip_weights: list = field(default_factory=_default_weights)
    use_fusion: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.downsample_factor <= 1.0:
            raise ValueError("downsample_factor must be > 1")
        if self.num_learnable_blocks < 0:
            raise ValueError("num_learnable_blocks must be >= 0")
        if self.num_learnable_blocks > 0 and self.filters_per_block < 1:
            raise ValueError("filters_per_block must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if self.softmax_base <= 1.0:
            raise ValueError("softmax_base must be > 1")
        self.msip_window_sizes = [int(n) for n in self.msip_window_sizes]
        self.msip_weights = [float(w) for w in self.msip_weights]
        if len(self.msip_window_sizes) != len(self.msip_weights):
            raise ValueError("msip_window_sizes and msip_weights must have equal length")
        if any(b >= a for a, b in zip(self.msip_window_sizes[1:], self.msip_window_sizes)):
            raise ValueError("msip_window_sizes must be strictly increasing")

    @classmethod
    def tiny(cls, **overrides):
        """One learnable block with a single filter on a single-level input."""
        args = dict(pyramid_levels=1, num_learnable_blocks=1, filters_per_block=1)
        args.update(overrides)
        return cls(**args)

    # flat key=value mapping used by config files and checkpoints
    def to_mapping(self):
        return {
            "pyramid_levels": str(self.pyramid_levels),
            "downsample_factor": repr(self.downsample_factor),
            "num_learnable_blocks": str(self.num_learnable_blocks),
            "filters_per_block": str(self.filters_per_block),
            "kernel_size": str(self.kernel_size),
            "softmax_base": repr(self.softmax_base),
            "msip_window_sizes": ",".join(str(n) for n in self.msip_window_sizes),
            "msip_weights": ",".join(repr(w) for w in self.msip_weights),
            "use_fusion": "1" if self.use_fusion else "0",
        }

    @classmethod
    def from_mapping(cls, mapping):
        """Build a config from a flat string mapping; unknown keys are ignored."""
        kwargs = {}
        ints = {"pyramid_levels", "num_learnable_blocks", "filters_per_block", "kernel_size"}
        floats = {"downsample_factor", "softmax_base"}
        for key, raw in mapping.items():
            if key in ints:
                kwargs[key] = int(raw)
            elif key in floats:
                kwargs[key] = float(raw)
            elif key == "msip_window_sizes":
                kwargs[key] = [int(t) for t in raw.split(",") if t.strip()]
            elif key == "msip_weights":
                kwargs[key] = [float(t) for t in raw.split(",") if t.strip()]
            elif key == "use_fusion":
                kwargs[key] = raw.strip() not in ("0", "false", "False")
        return cls(**kwargs)


class KeyNetWeights:
    """Named parameter set: learnable Variables plus batchnorm running stats.

    One set of block weights is shared by every pyramid stream; `params`
    preserves creation order so optimizers and checkpoints see a stable
    layout.
    """

    def __init__(self):
        self.params = {}
        self.running = {}

    def add_param(self, name, value):
        self.params[name] = ad.Variable(value, requires_grad=True, name=name)

    def add_running(self, name, value):
        self.running[name] = np.asarray(value, dtype=ad.get_default_dtype())

    def learnables(self):
        return list(self.params.values())

    def kernels(self):
        """Conv kernels only (the tensors the L2 penalty applies to)."""
        return [v for k, v in self.params.items() if k.endswith(".kernel")]


def _block_channels(config):
    # (in, out) channel pairs for each learnable block
    pairs = []
    c_in = filters.NUM_CHANNELS
    for _ in range(config.num_learnable_blocks):
        pairs.append((c_in, config.filters_per_block))
        c_in = config.filters_per_block
    return pairs


def _stream_channels(config):
    if config.num_learnable_blocks == 0:
        return filters.NUM_CHANNELS
    return config.filters_per_block


def init_weights(config, seed):
    """He-normal conv kernels, zero biases, identity batchnorm, fresh stats."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    weights = KeyNetWeights()
    for i, (c_in, c_out) in enumerate(_block_channels(config), start=1):
        std = math.sqrt(2.0 / (c_in * k * k))
        weights.add_param(f"block{i}.kernel", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        weights.add_param(f"block{i}.bias", np.zeros(c_out))
        weights.add_param(f"block{i}.bn_gamma", np.ones(c_out))
        weights.add_param(f"block{i}.bn_beta", np.zeros(c_out))
        weights.add_running(f"block{i}.bn_mean", np.zeros(c_out))
        weights.add_running(f"block{i}.bn_var", np.ones(c_out))
    if config.use_fusion:
        c_in = config.pyramid_levels * _stream_channels(config)
        std = math.sqrt(2.0 / (c_in * k * k))
        weights.add_param("fusion.kernel", rng.normal(0.0, std, size=(1, c_in, k, k)))
        weights.add_param("fusion.bias", np.zeros(1))
    return weights


def count_params(config):
    """Exact learnable-scalar count with a per-tensor breakdown."""
    breakdown = []
    k = config.kernel_size
    for i, (c_in, c_out) in enumerate(_block_channels(config), start=1):
        breakdown.append((f"block{i}.kernel", c_out * c_in * k * k))
        breakdown.append((f"block{i}.bias", c_out))
        breakdown.append((f"block{i}.bn_gamma", c_out))
        breakdown.append((f"block{i}.bn_beta", c_out))
    if config.use_fusion:
        c_in = config.pyramid_levels * _stream_channels(config)
        breakdown.append(("fusion.kernel", c_in * k * k))
        breakdown.append(("fusion.bias", 1))
    return sum(n for _, n in breakdown), breakdown


def pyramid_sizes(height, width, config):
    """Spatial size of every pyramid level for a given input size."""
    sizes = []
    for lvl in range(config.pyramid_levels):
        f = config.downsample_factor**lvl
        sizes.append((max(1, int(round(height / f))), max(1, int(round(width / f)))))
    return sizes


def min_input_size(config):
    """Smallest H (= W) whose top pyramid level still covers one kernel."""
    f = config.downsample_factor ** (config.pyramid_levels - 1)
    return int(math.ceil(config.kernel_size * f))


# anti-aliasing blur applied before each downsampling step
def _pyramid_sigma(factor):
    return 0.8 * math.sqrt(factor * factor - 1.0)


def build_pyramid(images, config):
    """List of [B,1,h,w] ndarrays, one per level, blurred cumulatively."""
    images = np.asarray(images)
    B, C, H, W = images.shape
    sizes = pyramid_sizes(H, W, config)
    sigma = _pyramid_sigma(config.downsample_factor)
    levels = [images]
    cur = images
    for h, w in sizes[1:]:
        blurred = filters.gaussian_blur_stack(cur, sigma)
        cur = ad.bilinear_resize(ad.constant(blurred), h, w).value
        levels.append(cur)
    return levels


def forward_batch(images, weights, config, training, update_running=False):
    """Response maps for a batch: [B,1,H,W] -> Variable [B,1,H,W].

    The derivative bank and the pyramid are constants with respect to the
    learned weights, so they are computed outside the tape; gradients enter
    at the first learned convolution of each stream.
    """
    values = images.value if isinstance(images, ad.Variable) else np.asarray(images)
    if values.ndim != 4 or values.shape[1] != 1:
        raise ValueError(f"forward_batch expects [B,1,H,W], got {values.shape}")
    B, _, H, W = values.shape
    min_dim = min(s for size in pyramid_sizes(H, W, config) for s in size)
    if min_dim < config.kernel_size:
        raise ValueError(
            f"input {H}x{W} too small: every pyramid level must be at least "
            f"{config.kernel_size} pixels per side (minimum input "
            f"{min_input_size(config)}x{min_input_size(config)})"
        )
    streams = []
    for level in build_pyramid(values, config):
        x = ad.constant(filters.filter_stack(level[:, 0]))
        for i in range(1, config.num_learnable_blocks + 1):
            x = ad.conv2d(
                x,
                weights.params[f"block{i}.kernel"],
                weights.params[f"block{i}.bias"],
                padding="zero",
            )
            x = ad.batchnorm2d(
                x,
                weights.params[f"block{i}.bn_gamma"],
                weights.params[f"block{i}.bn_beta"],
                weights.running[f"block{i}.bn_mean"],
                weights.running[f"block{i}.bn_var"],
                training=training,
                update_running=update_running,
            )
            x = ad.relu(x)
        if x.value.shape[2:] != (H, W):
            x = ad.bilinear_resize(x, H, W)
        streams.append(x)
    stacked = streams[0] if len(streams) == 1 else ad.concat_channels(streams)
    if config.use_fusion:
        return ad.conv2d(
            stacked, weights.params["fusion.kernel"], weights.params["fusion.bias"], padding="zero"
        )
    # degenerate fusion-free configuration: average the streams so the output
    # is still a single-channel map
    c = stacked.value.shape[1]
    avg_kernel = ad.constant(np.full((1, c, 1, 1), 1.0 / c))
    return ad.conv2d(stacked, avg_kernel, None, padding="zero")


def forward(image, weights, config):
    """Single-image response map [1,H,W] -> [1,H,W] using running statistics."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"forward expects [1,H,W], got {image.shape}")
    out = forward_batch(image[None], weights, config, training=False)
    return out.value[0]


class KeyNetModel:
    """Convenience bundle of a config and its weight set."""

    def __init__(self, config, weights=None, seed=0):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config, seed)

    def response(self, image):
        return forward(image, self.weights, self.config)

    def forward_batch(self, images, training, update_running=False):
        return forward_batch(images, self.weights, self.config, training, update_running)

    def count_params(self):
        return count_params(self.config)
