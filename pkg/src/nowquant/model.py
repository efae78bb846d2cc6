"""U-shaped encoder-decoder built from depthwise-separable convolutions.

One backbone serves every objective: the deterministic variants emit one
channel per lead time, the quantile variant emits one channel per
(lead time, quantile level) pair in lead-time-major order, i.e. channel
``lead * n_levels + level_index``. A final ``max(x, 0)`` keeps rain rates
non-negative.

The parameter layout is produced by a single plan shared between
initialisation and the architecture table, so the printed table is always
the ground truth for hand-counting parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

_KERNEL = 3
_SPATIAL_GATE_KERNEL = 7
_GATE_BOTTLENECK_DIVISOR = 8


@dataclass(frozen=True)
class QuantileSpec:
    """Ordered quantile levels and their loss weights."""

    levels: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(q) for q in self.levels)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "weights", weights)
        if not levels:
            raise ConfigError("quantile spec needs at least one level")
        if len(levels) != len(weights):
            raise ConfigError(f"{len(levels)} levels but {len(weights)} weights")
        if any(not 0.0 < q < 1.0 for q in levels):
            raise ConfigError(f"quantile levels must lie strictly inside (0, 1): {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigError(f"quantile levels must be strictly increasing: {levels}")
        if any(w <= 0.0 for w in weights):
            raise ConfigError(f"quantile weights must be positive: {weights}")

    def __len__(self) -> int:
        return len(self.levels)

    def median_index(self) -> int:
        """Index of the 0.5 level; the median head drives model selection."""
        for i, q in enumerate(self.levels):
            if q == 0.5:
                return i
        raise ConfigError("quantile spec has no 0.5 level")


@dataclass(frozen=True)
class ModelConfig:
    """Static description of one backbone instance.

    ``grid_h`` and ``grid_w`` must be divisible by ``2 ** depth`` so that the
    pooling/upsampling ladder round-trips exactly.
    """

    input_frames: int = 4
    lead_times: int = 3
    quantiles: QuantileSpec | None = None
    base_channels: int = 16
    depth: int = 2
    grid_h: int = 32
    grid_w: int = 32
    attention_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.input_frames < 1 or self.lead_times < 1:
            raise ConfigError("input_frames and lead_times must be >= 1")
        if self.base_channels < 1 or self.depth < 1:
            raise ConfigError("base_channels and depth must be >= 1")
        step = 1 << self.depth
        if self.grid_h % step or self.grid_w % step:
            raise ConfigError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by 2**depth = {step}"
            )

    @property
    def out_channels(self) -> int:
        heads = len(self.quantiles) if self.quantiles is not None else 1
        return self.lead_times * heads


class Parameters:
    """Insertion-ordered, uniquely named map of trainable tensors."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> None:
        if name in self._store:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._store[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def tensors(self):
        return self._store.values()

    def subset(self, prefix: str) -> "Parameters":
        """View of all parameters under ``prefix``, with the prefix stripped.

        Tensors are shared, not copied, so gradients accumulate on the
        originals.
        """
        sub = Parameters()
        for name, t in self._store.items():
            if name.startswith(prefix):
                sub.add(name[len(prefix):], t)
        if not len(sub):
            raise ContractError(f"no parameters under prefix {prefix!r}")
        return sub

    def total_count(self) -> int:
        return sum(t.values.size for t in self._store.values())

    def zero_grads(self) -> None:
        for t in self._store.values():
            t.zero_grad()

    def values_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._store.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._store):
            raise ContractError("parameter name sets differ")
        for name, arr in values.items():
            t = self._store[name]
            if arr.shape != t.values.shape:
                raise ContractError(f"shape mismatch loading {name!r}")
            t.values[...] = arr


def _stage_channels(config: ModelConfig) -> list[int]:
    return [config.base_channels << d for d in range(config.depth + 1)]


def _separable_plan(prefix: str, cin: int, cout: int):
    yield f"{prefix}.dw_weight", (cin, _KERNEL, _KERNEL), _KERNEL * _KERNEL
    yield f"{prefix}.dw_bias", (cin,), None
    yield f"{prefix}.pw_weight", (cout, cin), cin
    yield f"{prefix}.pw_bias", (cout,), None


def _block_plan(prefix: str, cin: int, cout: int):
    yield from _separable_plan(f"{prefix}.conv1", cin, cout)
    yield from _separable_plan(f"{prefix}.conv2", cout, cout)


def _gate_plan(prefix: str, channels: int):
    hidden = max(channels // _GATE_BOTTLENECK_DIVISOR, 1)
    k = _SPATIAL_GATE_KERNEL
    yield f"{prefix}.channel_fc1_weight", (hidden, channels), channels
    yield f"{prefix}.channel_fc1_bias", (hidden,), None
    yield f"{prefix}.channel_fc2_weight", (channels, hidden), hidden
    yield f"{prefix}.channel_fc2_bias", (channels,), None
    yield f"{prefix}.spatial_weight", (1, 2, k, k), 2 * k * k
    yield f"{prefix}.spatial_bias", (1,), None


def _parameter_plan(config: ModelConfig):
    """Yield (name, shape, fan_in) for every parameter, in creation order.

    fan_in is None for biases, which initialise to zero.
    """
    c = _stage_channels(config)
    yield from _block_plan("enc0", config.input_frames, c[0])
    for d in range(1, config.depth + 1):
        yield from _block_plan(f"down{d}", c[d - 1], c[d])
    if config.attention_enabled:
        for d in range(config.depth):
            yield from _gate_plan(f"gate{d}", c[d])
        yield from _gate_plan("gate_b", c[config.depth])
    for d in reversed(range(config.depth)):
        yield from _block_plan(f"up{d}", c[d + 1] + c[d], c[d])
    yield "head.weight", (config.out_channels, c[0]), c[0]
    yield "head.bias", (config.out_channels,), None


def init_parameters(config: ModelConfig, dtype=np.float32) -> Parameters:
    """Create all parameters for ``config``, seeded by ``config.seed``.

    Weights draw from U(-k, k) with k = 1/sqrt(fan_in); biases start at
    zero. The draw order equals the plan order, so identical configs give
    bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    params = Parameters()
    for name, shape, fan_in in _parameter_plan(config):
        if fan_in is None:
            arr = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params.add(name, Tensor(arr, requires_grad=True, dtype=dtype))
    return params


def architecture_table(config: ModelConfig) -> str:
    """Plain-text table of every parameter: name, shape, element count."""
    rows = [(name, "x".join(str(n) for n in shape), int(np.prod(shape)))
            for name, shape, _ in _parameter_plan(config)]
    name_w = max(len("parameter"), max(len(r[0]) for r in rows))
    shape_w = max(len("shape"), max(len(r[1]) for r in rows))
    lines = [f"{'parameter':<{name_w}}  {'shape':<{shape_w}}  count"]
    lines.append("-" * len(lines[0]))
    total = 0
    for name, shape, count in rows:
        lines.append(f"{name:<{name_w}}  {shape:<{shape_w}}  {count}")
        total += count
    lines.append("-" * len(lines[0]))
    lines.append(f"{'total':<{name_w}}  {'':<{shape_w}}  {total}")
    return "\n".join(lines)


def _separable(params: Parameters, prefix: str, x: Tensor) -> Tensor:
    pad = _KERNEL // 2
    h = T.depthwise_conv2d(x, params[f"{prefix}.dw_weight"], params[f"{prefix}.dw_bias"], padding=pad)
    h = T.pointwise_conv2d(h, params[f"{prefix}.pw_weight"], params[f"{prefix}.pw_bias"])
    return T.leaky_relu(h)


def _block(params: Parameters, prefix: str, x: Tensor) -> Tensor:
    h = _separable(params, f"{prefix}.conv1", x)
    return _separable(params, f"{prefix}.conv2", h)


def attention_gate(x: Tensor, gate_params: Parameters) -> Tensor:
    """Multiplicative channel + spatial gating.

    The channel scale comes from globally average-pooled features pushed
    through a two-layer bottleneck ending in a sigmoid; the spatial scale
    from a 7x7 convolution over the per-pixel channel mean and max, also
    squashed by a sigmoid. With saturated sigmoids the gate is an identity;
    a zero input stays zero.
    """
    squeezed = T.global_avg_pool2d(x)
    hidden = T.leaky_relu(T.pointwise_conv2d(
        squeezed, gate_params["channel_fc1_weight"], gate_params["channel_fc1_bias"]))
    channel_scale = T.sigmoid(T.pointwise_conv2d(
        hidden, gate_params["channel_fc2_weight"], gate_params["channel_fc2_bias"]))
    pooled = T.channel_pool(x)
    spatial_scale = T.sigmoid(T.conv2d(
        pooled, gate_params["spatial_weight"], gate_params["spatial_bias"],
        padding=_SPATIAL_GATE_KERNEL // 2))
    return T.mul(T.mul(x, channel_scale), spatial_scale)


def forward(params: Parameters, x: Tensor, config: ModelConfig) -> Tensor:
    """Run the backbone on a batch of input frame stacks.

    ``x`` is (B, input_frames, H, W) with B >= 1; the result is
    (B, out_channels, H, W), clamped non-negative.
    """
    if x.values.ndim != 4:
        raise ContractError(f"forward needs a 4-D batch, got shape {x.shape}")
    b, m, h, w = x.shape
    if b < 1:
        raise ContractError("forward needs at least one sample in the batch")
    if m != config.input_frames or h != config.grid_h or w != config.grid_w:
        raise ContractError(
            f"input shape {x.shape} does not match config "
            f"({config.input_frames}, {config.grid_h}, {config.grid_w})"
        )

    skips: list[Tensor] = []
    feat = _block(params, "enc0", x)
    for d in range(1, config.depth + 1):
        skips.append(feat)
        feat = T.max_pool2(feat)
        feat = _block(params, f"down{d}", feat)

    if config.attention_enabled:
        feat = attention_gate(feat, params.subset("gate_b."))

    for d in reversed(range(config.depth)):
        skip = skips[d]
        if config.attention_enabled:
            skip = attention_gate(skip, params.subset(f"gate{d}."))
        feat = T.bilinear_upsample2(feat)
        feat = T.concat_channels(feat, skip)
        feat = _block(params, f"up{d}", feat)

    out = T.pointwise_conv2d(feat, params["head.weight"], params["head.bias"])
    return T.relu(out)


def extract_quantile(output: Tensor, q_index: int, quantiles: QuantileSpec) -> Tensor:
    """Pull one quantile head out of an interleaved output.

    Channels are lead-time-major: lead ``l`` at level ``q_index`` lives in
    channel ``l * len(quantiles) + q_index``. The result is (B, L, H, W).
    """
    nq = len(quantiles)
    channels = output.shape[1]
    if channels % nq:
        raise ContractError(
            f"{channels} channels cannot hold {nq} quantile levels per lead time")
    if not 0 <= q_index < nq:
        raise ContractError(f"quantile index {q_index} out of range for {nq} levels")
    lead_times = channels // nq
    idx = [lead * nq + q_index for lead in range(lead_times)]
    return T.take_channels(output, idx)
