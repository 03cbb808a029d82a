"""Detector/descriptor network: shared encoder, two decoder heads, weights IO.

The encoder is a VGG-style stack of 3x3 conv + relu blocks in four stages
separated by three 2x2 max poolings, so the spatial size drops by exactly
8x. The detection head ends in 65 channels (one per pixel of an 8x8 cell
plus the "no interest point" dustbin); the description head ends in the
descriptor dimension (256 by default).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DUSTBIN_CHANNELS = 65
CELL = 8

# grayscale conversion weights for color input
_LUMA = (0.299, 0.587, 0.114)


class WeightsVersionError(Exception):
    """Bad magic bytes or unsupported format version."""


class WeightsTruncatedError(Exception):
    """File ended before the declared records were read."""


class WeightsShapeError(Exception):
    """A stored tensor is inconsistent with the architecture; names the layer."""


@dataclass(frozen=True)
class Architecture:
    """Channel widths per encoder stage plus head widths.

    encoder_stages must have exactly four stages (three poolings between
    them). The default mirrors the widely used detector layout; toy-scale
    nets pass something like ((8,), (8,), (16,), (16,)).
    """

    encoder_stages: tuple = ((64, 64), (64, 64), (128, 128), (128, 128))
    head_width: int = 256
    descriptor_dim: int = 256

    def __post_init__(self):
        stages = tuple(tuple(int(w) for w in s) for s in self.encoder_stages)
        object.__setattr__(self, "encoder_stages", stages)
        if len(stages) != 4 or any(len(s) == 0 for s in stages):
            raise ValueError("encoder needs exactly 4 non-empty stages (3 poolings, 8x downsampling)")
        if any(w < 1 for s in stages for w in s) or self.head_width < 1 or self.descriptor_dim < 1:
            raise ValueError("channel widths must be positive")

    def layer_plan(self):
        """Ordered (name, k, cin, cout) conv specs; heads branch off the encoder."""
        plan = []
        cin = 1
        for si, stage in enumerate(self.encoder_stages):
            for ci, cout in enumerate(stage):
                plan.append((f"enc{si}_c{ci}", 3, cin, cout))
                cin = cout
        trunk = cin
        plan.append(("det_a", 3, trunk, self.head_width))
        plan.append(("det_b", 1, self.head_width, DUSTBIN_CHANNELS))
        plan.append(("desc_a", 3, trunk, self.head_width))
        plan.append(("desc_b", 1, self.head_width, self.descriptor_dim))
        return plan


@dataclass
class NetworkParams:
    """Named conv weights (kernel, bias) in layer order, plus the architecture."""

    architecture: Architecture
    weights: dict  # name -> (kernel Tensor, bias Tensor), insertion ordered

    def validate(self) -> None:
        for name, k, cin, cout in self.architecture.layer_plan():
            if name not in self.weights:
                raise WeightsShapeError(f"missing layer {name}")
            kernel, bias = self.weights[name]
            if kernel.shape != (k, k, cin, cout):
                raise WeightsShapeError(
                    f"layer {name}: kernel shape {kernel.shape}, expected {(k, k, cin, cout)}"
                )
            if bias.shape != (cout,):
                raise WeightsShapeError(f"layer {name}: bias shape {bias.shape}, expected {(cout,)}")

    def dtype(self):
        kernel, _ = next(iter(self.weights.values()))
        return kernel.dtype

    def as_dtype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            self.architecture,
            {n: (kern.astype(dtype), b.astype(dtype)) for n, (kern, b) in self.weights.items()},
        )

    def param_tensors(self):
        """Flat (label, Tensor) list over kernels and biases, in layer order."""
        out = []
        for name, (kernel, bias) in self.weights.items():
            out.append((f"{name}.kernel", kernel))
            out.append((f"{name}.bias", bias))
        return out


@dataclass(frozen=True)
class RawHeads:
    detect: Tensor  # H/8 x W/8 x 65, raw logits; channel 64 is the dustbin
    describe: Tensor  # H/8 x W/8 x D, raw descriptors


@dataclass(frozen=True)
class DenseOutputs:
    heatmap: Tensor  # H x W keypoint probability per pixel
    descriptors: Tensor  # H x W x D, unit L2 norm per pixel


def init_params(arch: Architecture, seed: int = 0, dtype=np.float64) -> NetworkParams:
    """He-uniform kernels, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = {}
    for name, k, cin, cout in arch.layer_plan():
        limit = np.sqrt(6.0 / (k * k * cin))
        kernel = rng.uniform(-limit, limit, size=(k, k, cin, cout)).astype(dtype)
        weights[name] = (Tensor(kernel), Tensor(np.zeros(cout, dtype=dtype)))
    return NetworkParams(arch, weights)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """H x W x 3 color to H x W luma; grayscale passes through."""
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ np.asarray(_LUMA, dtype=image.dtype)
    raise ValueError(f"expected H x W or H x W x 3 image, got shape {image.shape}")


def forward(params: NetworkParams, image: Tensor) -> RawHeads:
    """Run the network on a grayscale image with values in [0, 1]."""
    iv = image.data
    if iv.ndim != 2:
        raise ValueError(f"forward expects an H x W grayscale tensor, got shape {iv.shape}")
    h, w = iv.shape
    if h % CELL or w % CELL:
        raise ValueError(f"image dims must be divisible by {CELL}, got {h}x{w}")
    if iv.size and (iv.min() < 0.0 or iv.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    params.validate()

    x = T.reshape(image, (h, w, 1))
    n_stages = len(params.architecture.encoder_stages)
    for si, stage in enumerate(params.architecture.encoder_stages):
        for ci in range(len(stage)):
            kernel, bias = params.weights[f"enc{si}_c{ci}"]
            x = T.relu(T.conv2d(x, kernel, bias, stride=1, padding=1))
        if si < n_stages - 1:
            x = T.max_pool2x2(x)

    ka, ba = params.weights["det_a"]
    kb, bb = params.weights["det_b"]
    detect = T.conv2d(T.relu(T.conv2d(x, ka, ba, stride=1, padding=1)), kb, bb)

    ka, ba = params.weights["desc_a"]
    kb, bb = params.weights["desc_b"]
    describe = T.conv2d(T.relu(T.conv2d(x, ka, ba, stride=1, padding=1)), kb, bb)
    return RawHeads(detect=detect, describe=describe)


def densify(raw: RawHeads) -> DenseOutputs:
    """Cell tensors to per-pixel heatmap and unit-norm descriptor map."""
    probs = T.channel_softmax(raw.detect)
    heatmap = T.depth_to_space(T.slice_channels(probs, 0, 64))
    descriptors = T.l2_normalize(T.bicubic_upsample(raw.describe, CELL))
    return DenseOutputs(heatmap=heatmap, descriptors=descriptors)


# ---------------------------------------------------------------------------
# weights file: magic "SPWT", little endian, one record per tensor
#   u32 name_len, name utf-8, u8 kind (0 kernel / 1 bias), u8 rank,
#   u32 per dim, f32 data
# ---------------------------------------------------------------------------

_MAGIC = b"SPWT"
_VERSION = 1
_KIND_KERNEL = 0
_KIND_BIAS = 1


def save_weights(params: NetworkParams, path) -> None:
    chunks = [_MAGIC, struct.pack("<II", _VERSION, 2 * len(params.weights))]
    for name, (kernel, bias) in params.weights.items():
        for kind, t in ((_KIND_KERNEL, kernel), (_KIND_BIAS, bias)):
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype=np.float32)
            chunks.append(struct.pack("<I", len(nb)))
            chunks.append(nb)
            chunks.append(struct.pack("<BB", kind, arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightsTruncatedError(f"file truncated at byte {self.pos} (needed {n} more)")
        b = self.blob[self.pos : self.pos + n]
        self.pos += n
        return b


def _read_records(path):
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != _MAGIC:
        raise WeightsVersionError("bad magic bytes, not a weights file")
    version, count = struct.unpack("<II", r.take(8))
    if version != _VERSION:
        raise WeightsVersionError(f"unsupported weights version {version}")
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4))
        name = r.take(name_len).decode("utf-8")
        kind, rank = struct.unpack("<BB", r.take(2))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        records.append((name, kind, np.ascontiguousarray(data)))
    return records


def load_weights(path, architecture: Architecture | None = None) -> NetworkParams:
    """Load float32 params; validates layer chaining against the format.

    The architecture is reconstructed from record names and kernel shapes
    when not supplied, then the parameter set is structurally validated.
    """
    records = _read_records(path)
    kernels: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    order = []
    for name, kind, arr in records:
        if kind == _KIND_KERNEL:
            if arr.ndim != 4:
                raise WeightsShapeError(f"layer {name}: kernel rank {arr.ndim}, expected 4")
            kernels[name] = arr
            order.append(name)
        elif kind == _KIND_BIAS:
            if arr.ndim != 1:
                raise WeightsShapeError(f"layer {name}: bias rank {arr.ndim}, expected 1")
            biases[name] = arr
        else:
            raise WeightsVersionError(f"unknown record kind {kind} for {name}")
    for name in order:
        if name not in biases:
            raise WeightsShapeError(f"layer {name}: kernel without bias")
        if biases[name].shape[0] != kernels[name].shape[3]:
            raise WeightsShapeError(
                f"layer {name}: bias length {biases[name].shape[0]} vs kernel Cout {kernels[name].shape[3]}"
            )

    if architecture is None:
        architecture = _infer_architecture(order, kernels)
    params = NetworkParams(
        architecture, {n: (Tensor(kernels[n]), Tensor(biases[n])) for n in order}
    )
    params.validate()
    return params


def _infer_architecture(order, kernels) -> Architecture:
    stages: list[list[int]] = [[], [], [], []]
    for name in order:
        if name.startswith("enc"):
            try:
                si = int(name[3 : name.index("_")])
            except ValueError as e:
                raise WeightsShapeError(f"layer {name}: unrecognized encoder layer name") from e
            if not 0 <= si < 4:
                raise WeightsShapeError(f"layer {name}: encoder stage index out of range")
            stages[si].append(kernels[name].shape[3])
    for need in ("det_a", "det_b", "desc_a", "desc_b"):
        if need not in kernels:
            raise WeightsShapeError(f"missing layer {need}")
    if any(not s for s in stages):
        raise WeightsShapeError("missing encoder stage layers")
    return Architecture(
        encoder_stages=tuple(tuple(s) for s in stages),
        head_width=kernels["det_a"].shape[3],
        descriptor_dim=kernels["desc_b"].shape[3],
    )
