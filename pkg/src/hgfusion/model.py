"""
Stacked hourglass network with optional activity fusion.

Three variants share one skeleton:

* ``baseline``   -- the plain stacked hourglass with intermediate supervision.
* ``ablative``   -- baseline plus one extra 1x1 convolution block inserted
  before hourglass ``k``.
* ``contextual`` -- as ablative, but the block's input is the feature map
  with a one-hot activity tensor stacked on as extra channels, so the 1x1
  convolution maps ``channels + num_activities`` back down to ``channels``.

The injection point ``k`` is fixed by the form: A before the first
hourglass, B before the fourth, C before the eighth.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, UsageError
from .ops import BatchNormState, add, batch_norm, concat_channels, conv2d, max_pool2, relu, upsample_nearest2
from .tensor import Parameter, Tensor

VARIANTS = ("baseline", "contextual", "ablative")
FORMS = ("A", "B", "C", "none")
INJECTION_INDEX = {"A": 0, "B": 3, "C": 7}
INIT_SCHEMES = ("he", "uniform")


@dataclass(frozen=True)
class ModelConfig:
    num_stacks: int = 8
    channels: int = 256
    num_joints: int = 16
    num_activities: int = 21
    hourglass_depth: int = 4
    variant: str = "baseline"
    form: str = "none"
    input_side: int = 256
    # BN + ReLU after the fusion 1x1 conv; off gives the bare convolution.
    fusion_post: bool = True
    # "he": normal, std sqrt(2 / fan_in), zero biases.
    # "uniform": weights and biases from U(-1, 1) / sqrt(fan_in).
    init: str = "he"
    # Start every heatmap head at zero so the first predictions are blank maps.
    zero_head: bool = False

    def __post_init__(self):
        self.validate()

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-scale recipe: 1 stack, 32 channels, depth 2, 32x32 features.

        Uses uniform init with zeroed heads, which converges several times
        faster than He init at this width.
        """
        base = dict(num_stacks=1, channels=32, hourglass_depth=2, input_side=128, init="uniform", zero_head=True)
        base.update(overrides)
        return cls(**base)

    @property
    def feature_side(self) -> int:
        return self.input_side // 4

    @property
    def injection_index(self) -> int | None:
        return INJECTION_INDEX.get(self.form)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.form not in FORMS:
            raise ConfigurationError(f"unknown form {self.form!r}; expected one of {FORMS}")
        if (self.form == "none") != (self.variant == "baseline"):
            raise ConfigurationError(
                f"variant {self.variant!r} with form {self.form!r}: the baseline takes no fusion "
                "form, and contextual/ablative variants need one of A, B, C"
            )
        if self.init not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init {self.init!r}; expected one of {INIT_SCHEMES}")
        if self.num_stacks < 1:
            raise ConfigurationError("num_stacks must be >= 1")
        if self.injection_index is not None and self.injection_index >= self.num_stacks:
            raise ConfigurationError(
                f"form {self.form} injects before hourglass {self.injection_index + 1}, "
                f"but the model has only {self.num_stacks} stack(s)"
            )
        if self.channels < 4 or self.channels % 4:
            raise ConfigurationError(f"channels must be a positive multiple of 4, got {self.channels}")
        if self.num_joints < 1 or self.num_activities < 1 or self.hourglass_depth < 0:
            raise ConfigurationError("num_joints, num_activities must be >= 1 and depth >= 0")
        if self.input_side % 4 or self.input_side <= 0:
            raise ConfigurationError(f"input_side must be a positive multiple of 4, got {self.input_side}")
        if self.feature_side % (2 ** self.hourglass_depth):
            raise ConfigurationError(
                f"feature side {self.feature_side} is not divisible by 2**{self.hourglass_depth}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**values)


class Module:
    """Just enough module machinery: named parameters, BN mode, zero_grad."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, list):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, BatchNormState):
                yield f"{name}.gamma", value.gamma
                yield f"{name}.beta", value.beta
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, BatchNormState):
                yield f"{name}.running_mean", value.running_mean
                yield f"{name}.running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{name}.")

    def batch_norm_states(self) -> Iterator[BatchNormState]:
        for _, value in self._children():
            if isinstance(value, BatchNormState):
                yield value
            elif isinstance(value, Module):
                yield from value.batch_norm_states()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Module":
        for s in self.batch_norm_states():
            s.mode = "train"
        return self

    def eval(self) -> "Module":
        for s in self.batch_norm_states():
            s.mode = "inference"
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1, padding: int | None = None):
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout))
        self._stride = stride
        self._padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self._stride, self._padding)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1):
        self.conv = Conv(cin, cout, kernel, stride)
        self.bn = BatchNormState.create(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(batch_norm(self.conv(x), self.bn))


class Residual(Module):
    """Pre-activation bottleneck: BN-ReLU-1x1(C/2), BN-ReLU-3x3, BN-ReLU-1x1(C).

    The skip is the identity when widths match, otherwise a 1x1 projection.
    """

    def __init__(self, cin: int, cout: int):
        mid = cout // 2
        self.bn1 = BatchNormState.create(cin)
        self.conv1 = Conv(cin, mid, 1)
        self.bn2 = BatchNormState.create(mid)
        self.conv2 = Conv(mid, mid, 3)
        self.bn3 = BatchNormState.create(mid)
        self.conv3 = Conv(mid, cout, 1)
        self.skip = Conv(cin, cout, 1) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv1(relu(batch_norm(x, self.bn1)))
        y = self.conv2(relu(batch_norm(y, self.bn2)))
        y = self.conv3(relu(batch_norm(y, self.bn3)))
        return add(y, x if self.skip is None else self.skip(x))


class Hourglass(Module):
    """Recursive encoder-decoder; depth 0 is a single residual block."""

    def __init__(self, depth: int, channels: int):
        self.depth = depth
        if depth == 0:
            self.bottom = Residual(channels, channels)
        else:
            self.up1 = Residual(channels, channels)
            self.low1 = Residual(channels, channels)
            self.inner = Hourglass(depth - 1, channels)
            self.low3 = Residual(channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        side = x.shape[2]
        if side % (2 ** self.depth) or x.shape[3] % (2 ** self.depth):
            raise ConfigurationError(
                f"hourglass of depth {self.depth} needs extents divisible by {2 ** self.depth}, got {x.shape[2:]}"
            )
        if self.depth == 0:
            return self.bottom(x)
        up = self.up1(x)
        low = self.low3(self.inner(self.low1(max_pool2(x))))
        return add(up, upsample_nearest2(low))


class FusionBlock(Module):
    """1x1 convolution block that restores the network width.

    Contextual blocks consume ``concat(features, activity)``; ablative blocks
    consume the features alone.
    """

    def __init__(self, channels: int, num_activities: int, contextual: bool, post: bool = True):
        self.contextual = contextual
        self.in_channels = channels + num_activities if contextual else channels
        self.conv = Conv(self.in_channels, channels, 1)
        self.bn = BatchNormState.create(channels) if post else None
        self._last_input_width: int | None = None

    @property
    def last_input_width(self) -> int | None:
        """Channel count of the tensor fed to the 1x1 conv on the latest call."""
        return self._last_input_width

    def __call__(self, features: Tensor, activity: Tensor | None = None) -> Tensor:
        if self.contextual and activity is None:
            raise UsageError("contextual fusion block needs an activity tensor")
        if not self.contextual and activity is not None:
            raise UsageError("ablative fusion block takes no activity tensor")
        x = concat_channels(features, activity) if self.contextual else features
        self._last_input_width = x.shape[1]
        y = self.conv(x)
        if self.bn is not None:
            y = relu(batch_norm(y, self.bn))
        return y


class Stem(Module):
    """7x7/2 conv, residual, 2x2 pool, two residuals: 3xS -> C x S/4."""

    def __init__(self, channels: int, in_channels: int = 3):
        self.conv = ConvBNReLU(in_channels, channels // 4, kernel=7, stride=2)
        self.res1 = Residual(channels // 4, channels // 2)
        self.res2 = Residual(channels // 2, channels // 2)
        self.res3 = Residual(channels // 2, channels)

    def __call__(self, image: Tensor) -> Tensor:
        x = self.res1(self.conv(image))
        return self.res3(self.res2(max_pool2(x)))


class StackUnit(Module):
    """One hourglass plus its supervision head and (if not last) remap convs."""

    def __init__(self, channels: int, num_joints: int, depth: int, last: bool):
        self.hourglass = Hourglass(depth, channels)
        self.res = Residual(channels, channels)
        self.lin = ConvBNReLU(channels, channels)
        self.heat = Conv(channels, num_joints, 1)
        if not last:
            self.remap_features = Conv(channels, channels, 1)
            self.remap_heatmaps = Conv(num_joints, channels, 1)


class StackedHourglass(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        self.stem = Stem(config.channels)
        self.stacks = [
            StackUnit(config.channels, config.num_joints, config.hourglass_depth, last=i == config.num_stacks - 1)
            for i in range(config.num_stacks)
        ]
        self.fusion = None
        if config.variant != "baseline":
            self.fusion = FusionBlock(
                config.channels, config.num_activities,
                contextual=config.variant == "contextual", post=config.fusion_post,
            )

    def _children(self):
        for key, value in super()._children():
            if key != "config":
                yield key, value

    def stem_forward(self, image: Tensor) -> Tensor:
        cfg = self.config
        expected = (3, cfg.input_side, cfg.input_side)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise ConfigurationError(f"image must be N x {expected}, got {image.shape}")
        return self.stem(image)

    def forward_with_features(
        self, image: Tensor, activity: Tensor | None = None
    ) -> tuple[list[Tensor], list[Tensor]]:
        """Heatmaps per stack plus the feature tensor entering each hourglass."""
        cfg = self.config
        if cfg.variant == "contextual":
            if activity is None:
                raise UsageError("contextual model needs an activity tensor")
            want = (image.shape[0], cfg.num_activities, cfg.feature_side, cfg.feature_side)
            if activity.shape != want:
                raise ConfigurationError(f"activity tensor must be {want}, got {activity.shape}")
        elif activity is not None:
            raise UsageError(f"{cfg.variant} model takes no activity tensor")

        x = self.stem_forward(image)
        heatmaps, features = [], []
        for i, unit in enumerate(self.stacks):
            if i == cfg.injection_index:
                x = self.fusion(x, activity)
            features.append(x)
            ll = unit.lin(unit.res(unit.hourglass(x)))
            heat = unit.heat(ll)
            heatmaps.append(heat)
            if i < cfg.num_stacks - 1:
                x = add(add(x, unit.remap_features(ll)), unit.remap_heatmaps(heat))
        return heatmaps, features

    def forward(self, image: Tensor, activity: Tensor | None = None) -> list[Tensor]:
        return self.forward_with_features(image, activity)[0]

    __call__ = forward


def _param_seed(seed: int, name: str) -> list[int]:
    return [seed, zlib.crc32(name.encode())]


def init_parameters(model: Module, seed: int, scheme: str = "he", zero_head: bool = False) -> None:
    """Seeded initialisation; unit gamma and zero beta under every scheme.

    ``"he"`` draws conv weights from N(0, 2 / fan_in) with zero biases.
    ``"uniform"`` draws weights and biases from U(-1, 1) / sqrt(fan_in).
    Each tensor draws from a generator keyed by (seed, parameter name), so
    variants sharing a parameter name get bit-identical initial values.
    """
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.name = name
        p.accumulator[...] = 0.0
        owner, leaf = name.rsplit(".", 1)
        rng = np.random.default_rng(_param_seed(seed, name))
        if leaf == "gamma":
            p.data[...] = 1.0
        elif leaf == "beta" or (zero_head and owner.endswith(".heat")):
            p.data[...] = 0.0
        elif scheme == "uniform":
            fan_in = int(np.prod(params[owner + ".weight"].shape[1:]))
            p.data[...] = rng.uniform(-1.0, 1.0, p.shape) / np.sqrt(fan_in)
        elif leaf == "weight":
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)
        else:
            p.data[...] = 0.0


def build_model(config: ModelConfig, seed: int = 0) -> StackedHourglass:
    config.validate()
    model = StackedHourglass(config)
    init_parameters(model, seed, config.init, config.zero_head)
    return model.train()
