"""Network builders and forward evaluation.

Three encoder-decoder families share one plain convolutional encoder:

* ``unet``   — each decoder scale fuses its skip with the upsampled deeper node.
* ``unetpp`` — triangular grid of nested decoder nodes with dense skips.
* ``unet3p`` — every decoder scale aggregates all encoder scales (max-pooled
  down) and all deeper decoder scales (bilinearly upsampled), each routed
  through its own conv-bn-relu branch, then fused; optional deep-supervision
  heads emit one probability map per scale at input resolution.

A built ``Network`` is a named-parameter store plus an ordered forward plan;
each plan step consumes only previously produced nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .nn import (
    BatchNormState,
    Tensor,
    as_tensor,
    batch_norm,
    concat_channels,
    conv2d,
    max_pool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)

ARCH_KINDS = ("unet", "unetpp", "unet3p")


@dataclass
class ArchConfig:
    kind: str = "unet3p"
    num_scales: int = 4
    base_channels: int = 8
    per_path_channels: int | None = None
    input_channels: int = 1
    deep_supervision: bool = True
    input_size: int = 64

    @property
    def path_channels(self) -> int:
        return self.per_path_channels if self.per_path_channels is not None \
            else self.base_channels

    def validate(self) -> None:
        if self.kind not in ARCH_KINDS:
            raise ConfigError(f"unknown architecture kind '{self.kind}'")
        if self.num_scales < 2:
            raise ConfigError("num_scales must be >= 2")
        if self.base_channels < 1 or self.path_channels < 1:
            raise ConfigError("channel widths must be >= 1")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        s = self.input_size
        if s < 2 or (s & (s - 1)) != 0:
            raise ConfigError(f"input_size must be a power of 2, got {s}")
        if s % (1 << (self.num_scales - 1)) != 0 or s < (1 << (self.num_scales - 1)):
            raise ConfigError(
                f"input_size {s} not divisible by 2^(num_scales-1) = "
                f"{1 << (self.num_scales - 1)}")
        if self.deep_supervision and self.kind != "unet3p":
            raise ConfigError("deep supervision is only defined for unet3p")

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * (1 << i) for i in range(self.num_scales)]


# ---------------------------------------------------------------------------
# Layers


class ConvLayer:
    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (cin * ksize * ksize))
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(cout, cin, ksize, ksize)).astype(np.float32),
            requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.cin, self.cout, self.ksize = cin, cout, ksize
        self.padding = ksize // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class BatchNormLayer:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.state = BatchNormState.create(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)

    def named_params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class ConvBlock:
    """conv 3x3 -> batch-norm -> relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, ksize: int = 3):
        self.conv = ConvLayer(cin, cout, ksize, rng)
        self.bn = BatchNormLayer(cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))

    def named_params(self, prefix: str):
        yield from self.conv.named_params(f"{prefix}.conv")
        yield from self.bn.named_params(f"{prefix}.bn")


@dataclass(frozen=True)
class PlanStep:
    output: str
    inputs: tuple
    op: str
    fn: object  # callable(list[Tensor], training) -> Tensor


@dataclass
class ForwardOutput:
    final: Tensor
    side_outputs: list[Tensor] = field(default_factory=list)


class Network:
    """Named parameters plus an ordered forward plan."""

    def __init__(self, config: ArchConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.layers: dict[str, object] = {}
        self.plan: list[PlanStep] = []
        self.node_channels: dict[str, int] = {}
        self.final_node: str | None = None
        self.side_nodes: list[str] = []

    # -- construction helpers -------------------------------------------------

    def add_layer(self, name: str, layer) -> object:
        if name in self.layers:
            raise ConfigError(f"duplicate layer name '{name}'")
        self.layers[name] = layer
        return layer

    def add_step(self, output: str, inputs, op: str, fn) -> None:
        known = set(self.node_channels) | {"input"}
        for n in inputs:
            if n not in known:
                raise ConfigError(f"plan step '{output}' consumes unknown node '{n}'")
        if output in self.node_channels:
            raise ConfigError(f"duplicate plan node '{output}'")
        self.plan.append(PlanStep(output, tuple(inputs), op, fn))

    # -- inspection -----------------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lname, layer in self.layers.items():
            for pname, p in layer.named_params(lname):
                if pname in out:
                    raise ConfigError(f"duplicate parameter name '{pname}'")
                out[pname] = p
        return out

    @property
    def bn_layers(self) -> dict[str, BatchNormLayer]:
        found: dict[str, BatchNormLayer] = {}

        def scan(name, layer):
            if isinstance(layer, BatchNormLayer):
                found[name] = layer
            elif isinstance(layer, ConvBlock):
                scan(f"{name}.bn", layer.bn)

        for lname, layer in self.layers.items():
            scan(lname, layer)
        return found

    def conv_weights(self) -> list[Tensor]:
        """Weight tensors of every convolution (biases and BN affine excluded)."""
        out = []
        for layer in self.layers.values():
            if isinstance(layer, ConvLayer):
                out.append(layer.weight)
            elif isinstance(layer, ConvBlock):
                out.append(layer.conv.weight)
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def describe(self):
        """Name-independent topology summary for equivalence checks."""
        steps = tuple((s.op, len(s.inputs)) for s in self.plan)
        shapes = tuple(sorted(p.shape for p in self.params.values()))
        return steps, shapes


# ---------------------------------------------------------------------------
# Builders


def _conv_block_step(net: Network, name: str, src: str, cin: int, cout: int,
                     ksize: int = 3) -> str:
    block = net.add_layer(name, ConvBlock(cin, cout, net.rng, ksize))
    net.add_step(name, (src,), "conv_block",
                 lambda ins, training, block=block: block(ins[0], training))
    net.node_channels[name] = cout
    return name


def _pool_step(net: Network, name: str, src: str, window: int) -> str:
    net.add_step(name, (src,), f"maxpool{window}",
                 lambda ins, training, w=window: max_pool2d(ins[0], w, w))
    net.node_channels[name] = net.node_channels[src]
    return name


def _up_step(net: Network, name: str, src: str, factor: int) -> str:
    net.add_step(name, (src,), f"upsample{factor}",
                 lambda ins, training, f=factor: upsample_bilinear(ins[0], f))
    net.node_channels[name] = net.node_channels[src]
    return name


def _concat_step(net: Network, name: str, srcs) -> str:
    net.add_step(name, tuple(srcs), "concat",
                 lambda ins, training: concat_channels(ins))
    net.node_channels[name] = sum(net.node_channels[s] for s in srcs)
    return name


def _head_steps(net: Network, head_name: str, src: str, out_node: str,
                ksize: int, up_factor: int = 1) -> str:
    """conv -> (optional upsample) -> sigmoid emitting a probability map."""
    conv = net.add_layer(head_name, ConvLayer(net.node_channels[src], 1, ksize, net.rng))
    logits = f"{out_node}_logits"
    net.add_step(logits, (src,), f"conv{ksize}x{ksize}",
                 lambda ins, training, c=conv: c(ins[0]))
    net.node_channels[logits] = 1
    src = logits
    if up_factor > 1:
        src = _up_step(net, f"{out_node}_up", logits, up_factor)
    net.add_step(out_node, (src,), "sigmoid",
                 lambda ins, training: sigmoid(ins[0]))
    net.node_channels[out_node] = 1
    return out_node


def build_encoder(config: ArchConfig, seed: int = 0, net: Network | None = None) -> Network:
    """N stages of two conv-bn-relu blocks; stages 2..N preceded by 2x2 max-pool."""
    config.validate()
    if net is None:
        net = Network(config, seed)
    chans = config.encoder_channels()
    prev, prev_ch = "input", config.input_channels
    net.node_channels["input"] = prev_ch
    for i in range(1, config.num_scales + 1):
        ch = chans[i - 1]
        if i > 1:
            prev = _pool_step(net, f"en{i}_pool", prev, 2)
        a = _conv_block_step(net, f"en{i}.block1", prev, prev_ch, ch)
        b = _conv_block_step(net, f"en{i}.block2", a, ch, ch)
        net.add_step(f"en{i}", (b,), "alias", lambda ins, training: ins[0])
        net.node_channels[f"en{i}"] = ch
        prev, prev_ch = f"en{i}", ch
    return net


def build_unet(config: ArchConfig, seed: int = 0) -> Network:
    """Plain skips: decoder scale s fuses en_s with the upsampled deeper node."""
    if config.kind != "unet":
        raise ConfigError(f"build_unet called with kind '{config.kind}'")
    net = build_encoder(config, seed)
    n = config.num_scales
    chans = config.encoder_channels()
    deeper = f"en{n}"
    for s in range(n - 1, 0, -1):
        up = _up_step(net, f"de{s}_up", deeper, 2)
        cat = _concat_step(net, f"de{s}_cat", (f"en{s}", up))
        _conv_block_step(net, f"de{s}.fuse", cat, net.node_channels[cat], chans[s - 1])
        net.add_step(f"de{s}", (f"de{s}.fuse",), "alias", lambda ins, training: ins[0])
        net.node_channels[f"de{s}"] = chans[s - 1]
        deeper = f"de{s}"
    net.final_node = _head_steps(net, "head.final", "de1", "final", ksize=1)
    return net


def build_unetpp(config: ArchConfig, seed: int = 0) -> Network:
    """Nested dense skips: node (i, j) fuses all (i, k<j) plus up of (i+1, j-1)."""
    if config.kind != "unetpp":
        raise ConfigError(f"build_unetpp called with kind '{config.kind}'")
    net = build_encoder(config, seed)
    n = config.num_scales
    chans = config.encoder_channels()
    node = {(i, 0): f"en{i + 1}" for i in range(n)}  # rows are 0-based scales
    for j in range(1, n):
        for i in range(n - 1 - j, -1, -1):
            up = _up_step(net, f"x{i}_{j}_up", node[(i + 1, j - 1)], 2)
            srcs = [node[(i, k)] for k in range(j)] + [up]
            cat = _concat_step(net, f"x{i}_{j}_cat", srcs)
            name = _conv_block_step(net, f"x{i}_{j}.fuse", cat,
                                    net.node_channels[cat], chans[i])
            net.add_step(f"x{i}_{j}", (name,), "alias", lambda ins, training: ins[0])
            net.node_channels[f"x{i}_{j}"] = chans[i]
            node[(i, j)] = f"x{i}_{j}"
    net.final_node = _head_steps(net, "head.final", node[(0, n - 1)], "final", ksize=1)
    return net


def build_unet3p(config: ArchConfig, seed: int = 0) -> Network:
    """Full-scale skips per decoder scale; fused width stays at N*c channels."""
    if config.kind != "unet3p":
        raise ConfigError(f"build_unet3p called with kind '{config.kind}'")
    net = build_encoder(config, seed)
    n = config.num_scales
    c = config.path_channels
    chans = config.encoder_channels()
    dec = {n: f"en{n}"}  # X_De^N is the deepest encoder node
    for i in range(n - 1, 0, -1):
        branches = []
        for k in range(1, i):  # shallower encoders, pooled down
            gap = 1 << (i - k)
            pooled = _pool_step(net, f"de{i}_from_en{k}_pool", f"en{k}", gap)
            branches.append(_conv_block_step(
                net, f"de{i}.from_en{k}", pooled, chans[k - 1], c))
        branches.append(_conv_block_step(
            net, f"de{i}.from_en{i}", f"en{i}", chans[i - 1], c))
        for k in range(i + 1, n + 1):  # deeper decoders, upsampled
            factor = 1 << (k - i)
            upped = _up_step(net, f"de{i}_from_de{k}_up", dec[k], factor)
            branches.append(_conv_block_step(
                net, f"de{i}.from_de{k}", upped, net.node_channels[dec[k]], c))
        cat = _concat_step(net, f"de{i}_cat", branches)
        _conv_block_step(net, f"de{i}.fuse", cat, n * c, n * c)
        net.add_step(f"de{i}", (f"de{i}.fuse",), "alias", lambda ins, training: ins[0])
        net.node_channels[f"de{i}"] = n * c
        dec[i] = f"de{i}"
    net.final_node = _head_steps(net, "head.final", "de1", "final", ksize=3)
    return net


def attach_deep_supervision(net: Network, config: ArchConfig) -> Network:
    """Add side heads (conv 3x3 -> upsample 2^(i-1) -> sigmoid) at scales 2..N."""
    if config.kind != "unet3p" or net.config.kind != "unet3p":
        raise UsageError("deep supervision heads apply to unet3p networks only")
    n = config.num_scales
    for i in range(2, n + 1):
        src = f"de{i}" if i < n else f"en{n}"
        out = _head_steps(net, f"head.side{i}", src, f"side{i}",
                          ksize=3, up_factor=1 << (i - 1))
        net.side_nodes.append(out)
    return net


def build_network(config: ArchConfig, seed: int = 0) -> Network:
    """Dispatch on kind; attaches deep-supervision heads when configured."""
    config.validate()
    builder = {"unet": build_unet, "unetpp": build_unetpp, "unet3p": build_unet3p}
    net = builder[config.kind](config, seed)
    if config.deep_supervision:
        attach_deep_supervision(net, config)
    return net


# ---------------------------------------------------------------------------
# Forward evaluation


def run_plan(net: Network, batch, training: bool = False) -> dict[str, Tensor]:
    """Execute the forward plan; returns every named node."""
    x = as_tensor(batch)
    cfg = net.config
    if x.data.ndim != 4:
        raise DimensionError(f"forward expects a 4-D batch, got shape {x.shape}")
    b, ch, h, w = x.shape
    if ch != cfg.input_channels or h != cfg.input_size or w != cfg.input_size:
        raise DimensionError(
            f"forward: batch {x.shape} incompatible with configured input "
            f"{cfg.input_channels}x{cfg.input_size}x{cfg.input_size}")
    nodes: dict[str, Tensor] = {"input": x}
    for step in net.plan:
        nodes[step.output] = step.fn([nodes[s] for s in step.inputs], training)
    return nodes


def forward(net: Network, batch, training: bool = False) -> ForwardOutput:
    """Evaluate the network; returns the final map and any side maps."""
    if net.final_node is None:
        raise UsageError("network has no output head")
    nodes = run_plan(net, batch, training)
    return ForwardOutput(final=nodes[net.final_node],
                         side_outputs=[nodes[s] for s in net.side_nodes])
