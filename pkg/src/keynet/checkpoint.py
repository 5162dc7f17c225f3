"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    bytes 0..3   magic "KNET"
    u16          format version (currently 1)
    u32          config block length, then that many bytes of
                 "key=value\\n" utf-8 text
    u32          tensor count
    per tensor:  u16 name length, name bytes (utf-8),
                 u8 rank, rank * u32 dims, raw float32 data

Tensor names carry a section prefix: "param:", "running:" or "extra:".
Round-trips are bit-exact for float32 tensors; the config stored in the file
is authoritative when loading.
"""

import struct

import numpy as np

from keynet import autodiff as ad
from keynet.model import KeyNetConfig, KeyNetWeights, count_params

MAGIC = b"KNET"
VERSION = 1


class CheckpointError(Exception):
    """Base class for malformed checkpoint files."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended in the middle of a declared structure."""


class CheckpointShapeError(CheckpointError):
    """Tensor shapes disagree with the stored configuration."""


def _pack_tensor(name, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<B", arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + dims + arr.tobytes()


def save_checkpoint(weights, config, path, extra_config=None, extra_tensors=None):
    """Write weights (+ running stats and optional extras) to path."""
    lines = [f"{k}={v}" for k, v in config.to_mapping().items()]
    for k, v in (extra_config or {}).items():
        lines.append(f"{k}={v}")
    config_block = ("\n".join(lines) + "\n").encode("utf-8")

    named = [("param:" + k, v.value) for k, v in weights.params.items()]
    named += [("running:" + k, v) for k, v in weights.running.items()]
    named += [("extra:" + k, v) for k, v in (extra_tensors or {}).items()]

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<I", len(config_block))
    blob += config_block
    blob += struct.pack("<I", len(named))
    for name, arr in named:
        blob += _pack_tensor(name, arr)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


class CheckpointData:
    """Loaded checkpoint; iterates as (weights, config) for convenience."""

    def __init__(self, weights, config, extra_config, extra_tensors):
        self.weights = weights
        self.config = config
        self.extra_config = extra_config
        self.extra_tensors = extra_tensors

    def __iter__(self):
        return iter((self.weights, self.config))


def load_checkpoint(path):
    """Read a checkpoint; the file's config wins over any caller assumption."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic bytes (not a checkpoint)")
    version = r.u16("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    config_len = r.u32("config length")
    config_text = r.take(config_len, "config block").decode("utf-8")
    mapping = {}
    for line in config_text.splitlines():
        line = line.strip()
        if line and "=" in line:
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    config = KeyNetConfig.from_mapping(mapping)

    count = r.u32("tensor count")
    tensors = {}
    for _ in range(count):
        name_len = r.u16("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        rank = r.u8("tensor rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims")) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * size, f"tensor data for {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointTruncatedError(f"{path}: {len(data) - r.pos} trailing bytes")

    weights = KeyNetWeights()
    extra_tensors = {}
    for name, arr in tensors.items():
        if name.startswith("param:"):
            weights.add_param(name[len("param:") :], arr)
        elif name.startswith("running:"):
            weights.add_running(name[len("running:") :], arr)
        elif name.startswith("extra:"):
            extra_tensors[name[len("extra:") :]] = arr
        else:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has no section prefix")

    _check_shapes(weights, config, path)
    extra_config = {k: v for k, v in mapping.items() if k not in config.to_mapping()}
    return CheckpointData(weights, config, extra_config, extra_tensors)


def _check_shapes(weights, config, path):
    expected = {}
    k = config.kernel_size
    c_in = 10
    for i in range(1, config.num_learnable_blocks + 1):
        c_out = config.filters_per_block
        expected[f"block{i}.kernel"] = (c_out, c_in, k, k)
        expected[f"block{i}.bias"] = (c_out,)
        expected[f"block{i}.bn_gamma"] = (c_out,)
        expected[f"block{i}.bn_beta"] = (c_out,)
        c_in = c_out
    if config.use_fusion:
        fusion_in = config.pyramid_levels * (
            config.filters_per_block if config.num_learnable_blocks else 10
        )
        expected["fusion.kernel"] = (1, fusion_in, k, k)
        expected["fusion.bias"] = (1,)
    total, _ = count_params(config)
    got_total = sum(v.value.size for v in weights.params.values())
    if set(expected) != set(weights.params) or got_total != total:
        raise CheckpointShapeError(
            f"{path}: stored parameters do not match the stored config "
            f"(expected {sorted(expected)}, got {sorted(weights.params)})"
        )
    for name, shape in expected.items():
        actual = tuple(weights.params[name].value.shape)
        if actual != shape:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {actual}, expected {shape}")
