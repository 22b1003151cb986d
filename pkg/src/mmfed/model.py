"""Three-branch multimodal classifier (image, spectrogram, sign) with branch muting.

Each branch is a small conv stack; the flattened branch outputs are
concatenated in the fixed order image, spectrogram, sign and classified by a
two-layer fully connected head. A muted branch contributes an all-zero feature
block of its usual width and is never evaluated, so its parameters receive
exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .tensor_core import ParamSet, Tensor

MODALITIES = ("image", "spectrogram", "sign")


@dataclass(frozen=True)
class ModalityMask:
    image: bool = True
    spectrogram: bool = True
    sign: bool = True

    def __getitem__(self, modality: str) -> bool:
        return getattr(self, modality)

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if self[m])

    @property
    def is_full(self) -> bool:
        return self.image and self.spectrogram and self.sign

    def code(self) -> str:
        return "".join("1" if self[m] else "0" for m in MODALITIES)

    def __str__(self):
        return "+".join(self.enabled) or "none"


FULL = ModalityMask()


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = False


@dataclass(frozen=True)
class BranchSpec:
    input_shape: tuple[int, int, int]
    convs: tuple[ConvSpec, ...]
    pool_kernel: int = 2
    pool_stride: int = 2

    def output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for conv in self.convs:
            if h + 2 * conv.padding < conv.kernel or w + 2 * conv.padding < conv.kernel:
                raise ConfigError(f"conv kernel {conv.kernel} does not fit spatial size {h}x{w}")
            h = (h + 2 * conv.padding - conv.kernel) // conv.stride + 1
            w = (w + 2 * conv.padding - conv.kernel) // conv.stride + 1
            c = conv.out_channels
            if conv.pool:
                if h < self.pool_kernel or w < self.pool_kernel:
                    raise ConfigError(f"pool window {self.pool_kernel} does not fit spatial size {h}x{w}")
                h = (h - self.pool_kernel) // self.pool_stride + 1
                w = (w - self.pool_kernel) // self.pool_stride + 1
        return c, h, w

    def feature_width(self) -> int:
        c, h, w = self.output_shape()
        return c * h * w


def _two_stage(input_shape, channels=(8, 16), **kw) -> BranchSpec:
    return BranchSpec(input_shape, tuple(ConvSpec(ch, pool=True, **kw) for ch in channels))


def _four_stage(input_shape, channels=(8, 8, 16, 16), **kw) -> BranchSpec:
    return BranchSpec(input_shape, tuple(ConvSpec(ch, pool=i >= 2, **kw) for i, ch in enumerate(channels)))


@dataclass(frozen=True)
class ArchSpec:
    image: BranchSpec = field(default_factory=lambda: _two_stage((1, 28, 28)))
    spectrogram: BranchSpec = field(default_factory=lambda: _four_stage((1, 64, 64)))
    sign: BranchSpec = field(default_factory=lambda: _two_stage((1, 64, 64)))
    hidden: int = 128
    classes: int = 10

    def branch(self, modality: str) -> BranchSpec:
        return getattr(self, modality)

    def validate(self) -> "ArchSpec":
        for name in ("image", "sign"):
            convs = self.branch(name).convs
            if len(convs) != 2 or not all(c.pool for c in convs):
                raise ConfigError(f"{name} branch must have exactly 2 conv layers, each followed by max-pooling")
        convs = self.spectrogram.convs
        if len(convs) != 4 or [c.pool for c in convs] != [False, False, True, True]:
            raise ConfigError("spectrogram branch must have exactly 4 conv layers, max-pooling after the last two only")
        if self.classes != 10:
            raise ConfigError(f"classifier head must output 10 classes, got {self.classes}")
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be positive, got {self.hidden}")
        for m in MODALITIES:
            self.branch(m).output_shape()
        return self

    def feature_width(self) -> int:
        return sum(self.branch(m).feature_width() for m in MODALITIES)

    def input_shapes(self) -> dict[str, tuple[int, int, int]]:
        return {m: self.branch(m).input_shape for m in MODALITIES}


DEFAULT_ARCH = ArchSpec()


def small_arch(size: int = 8, hidden: int = 16) -> ArchSpec:
    """Same layer structure as the default, shrunk for fast tests and gradient checks."""
    return ArchSpec(
        image=_two_stage((1, size, size), channels=(2, 3)),
        spectrogram=_four_stage((1, size, size), channels=(2, 2, 3, 3)),
        sign=_two_stage((1, size, size), channels=(2, 3)),
        hidden=hidden,
    )


# Default channel widths at reduced input resolution; used where the full-size
# network would be too slow for a single CPU core.
COMPACT_ARCH = ArchSpec(
    image=_two_stage((1, 14, 14)),
    spectrogram=_four_stage((1, 16, 16)),
    sign=_two_stage((1, 16, 16)),
)

ARCH_PRESETS = {"default": DEFAULT_ARCH, "compact": COMPACT_ARCH, "tiny": small_arch(8, 16)}


def param_shapes(spec: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for m in MODALITIES:
        branch = spec.branch(m)
        c = branch.input_shape[0]
        for i, conv in enumerate(branch.convs, start=1):
            shapes.append((f"{m}.conv{i}.weight", (conv.out_channels, c, conv.kernel, conv.kernel)))
            shapes.append((f"{m}.conv{i}.bias", (conv.out_channels,)))
            c = conv.out_channels
    d = spec.feature_width()
    shapes += [
        ("head.fc1.weight", (d, spec.hidden)),
        ("head.fc1.bias", (spec.hidden,)),
        ("head.fc2.weight", (spec.hidden, spec.classes)),
        ("head.fc2.bias", (spec.classes,)),
    ]
    return shapes


def linear_param_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def conv_param_count(c_in: int, c_out: int, kernel: int) -> int:
    return c_out * c_in * kernel * kernel + c_out


def param_count(spec: ArchSpec) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(spec))


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


def init_params(spec: ArchSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases, drawn in parameter-name order."""
    spec.validate()
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape in param_shapes(spec):
        if name.endswith(".bias"):
            entries.append((name, np.zeros(shape)))
        else:
            fan_in, fan_out = _fans(shape)
            s = np.sqrt(6.0 / (fan_in + fan_out))
            entries.append((name, rng.uniform(-s, s, size=shape)))
    return ParamSet(entries)


def _as_tensors(params) -> Mapping[str, Tensor]:
    return params.constants() if isinstance(params, ParamSet) else params


def branch_forward(params: Mapping[str, Tensor], modality: str, branch: BranchSpec, x) -> Tensor:
    h = x
    for i, conv in enumerate(branch.convs, start=1):
        h = tc.conv2d(h, params[f"{modality}.conv{i}.weight"], params[f"{modality}.conv{i}.bias"],
                      stride=conv.stride, padding=conv.padding)
        h = tc.relu(h)
        if conv.pool:
            h = tc.maxpool2d(h, branch.pool_kernel, branch.pool_stride)
    return h


def forward(params, batch, mask: ModalityMask = FULL, spec: ArchSpec = DEFAULT_ARCH) -> Tensor:
    """Logits [N, classes] for a batch exposing ``image``, ``spectrogram`` and ``sign`` arrays."""
    params = _as_tensors(params)
    n = None
    parts = []
    for m in MODALITIES:
        branch = spec.branch(m)
        x = getattr(batch, m)
        if x is None or np.ndim(x) != 4 or tuple(np.shape(x)[1:]) != branch.input_shape:
            raise ShapeError(
                f"{m} input has shape {None if x is None else np.shape(x)}, "
                f"expected [N, {', '.join(map(str, branch.input_shape))}]"
            )
        if n is None:
            n = np.shape(x)[0]
        elif np.shape(x)[0] != n:
            raise ShapeError(f"{m} batch size {np.shape(x)[0]} differs from {MODALITIES[0]} batch size {n}")
        if mask[m]:
            parts.append(branch_forward(params, m, branch, x))
        else:
            parts.append(Tensor(np.zeros((n, branch.feature_width()))))
    features = tc.flatten_concat(parts)
    hidden = tc.relu(tc.linear(features, params["head.fc1.weight"], params["head.fc1.bias"]))
    return tc.linear(hidden, params["head.fc2.weight"], params["head.fc2.bias"])


def activation_pattern(params: ParamSet, batch, mask: ModalityMask = FULL, spec: ArchSpec = DEFAULT_ARCH):
    with tc.record_patterns() as log:
        forward(params, batch, mask, spec)
    return log


@dataclass
class MultimodalClassifier:
    """Adapter exposing the network to the federated and baseline trainers."""

    spec: ArchSpec = DEFAULT_ARCH

    def __post_init__(self):
        self.spec.validate()

    def init_params(self, seed: int) -> ParamSet:
        return init_params(self.spec, seed)

    def loss_and_grad(self, params: ParamSet, batch, mask: ModalityMask) -> tuple[float, ParamSet, int]:
        """Mean cross-entropy on ``batch``, its gradient, and the number of correct predictions."""
        leaves = params.leaves()
        logits = forward(leaves, batch, mask, self.spec)
        loss = tc.softmax_cross_entropy(logits, batch.labels)
        correct = int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
        value = float(loss.data)
        return value, tc.backward(loss, leaves), correct

    def logits(self, params: ParamSet, batch, mask: ModalityMask) -> np.ndarray:
        return forward(params, batch, mask, self.spec).data

    def with_spec(self, **changes) -> "MultimodalClassifier":
        return MultimodalClassifier(replace(self.spec, **changes))
