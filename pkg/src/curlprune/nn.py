"""Layers, bottleneck residual stages and the desk-scale TinyResNet.

Channel coupling is expressed through named *channel spaces*: every conv
reads from one space and writes into one. All producers of a space must be
pruned together, which is exactly the residual-stage constraint (all final
BNs of a stage plus its downsample BN write the stage output space) and the
depthwise constraint (a depthwise conv writes back into its input space).
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

CKPT_MAGIC = b"CURLCKPT\x01"


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (32, 64, 128)
    blocks: tuple = (2, 2, 2)
    class_count: int = 10
    in_channels: int = 1
    image_size: int = 32
    stem_width: int = 16
    expansion: int = 4
    depthwise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))


class ConvLayer:
    """2-D convolution; ``weight`` is ``[out_c, in_c // groups, k, k]``."""

    kind = "conv"

    def __init__(self, name, in_channels, out_channels, kernel_size, stride=1, padding=0, groups=1,
                 bias=False, in_space="", out_space="", depthwise=False, rng=None, dtype=np.float32):
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"{name}: channels ({in_channels}, {out_channels}) not divisible by groups {groups}")
        self.name = name
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.depthwise = depthwise
        self.in_space = in_space
        self.out_space = out_space
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_out = out_channels // groups * kernel_size * kernel_size
        w = rng.standard_normal((out_channels, in_channels // groups, kernel_size, kernel_size))
        self.weight = Parameter(w * math.sqrt(2.0 / fan_out), dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype) if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def tensors(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x: Tensor) -> Tensor:
        if self.depthwise:
            return T.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)

    def out_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class BatchNormLayer:
    kind = "bn"

    def __init__(self, name, width, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(width), dtype=dtype)
        self.beta = Parameter(np.zeros(width), dtype=dtype)
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)

    @property
    def width(self):
        return self.gamma.shape[0]

    def parameters(self):
        return [self.gamma, self.beta]

    def tensors(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return bn_forward(x, self, training)


def bn_forward(x: Tensor, bn: BatchNormLayer, training: bool) -> Tensor:
    """y = gamma * (x - mu) / sqrt(var + eps) + beta, per channel."""
    return T.batchnorm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var,
                       training=training, momentum=bn.momentum, eps=bn.eps)


class LinearLayer:
    """Classifier; ``weight`` is stored ``[in_features, out_features]``."""

    kind = "linear"

    def __init__(self, name, in_features, out_features, in_space="", rng=None, dtype=np.float32):
        self.name = name
        self.in_space = in_space
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype)

    def parameters(self):
        return [self.weight, self.bias]

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class Bottleneck:
    """1x1 reduce -> 3x3 -> 1x1 expand, each followed by BN; ReLU after the shortcut add."""

    def __init__(self, name, conv1, bn1, conv2, bn2, conv3, bn3, downsample=None):
        self.name = name
        self.conv1, self.bn1 = conv1, bn1
        self.conv2, self.bn2 = conv2, bn2
        self.conv3, self.bn3 = conv3, bn3
        self.downsample = downsample  # (ConvLayer, BatchNormLayer) or None

    def pairs(self):
        out = [(self.conv1, self.bn1), (self.conv2, self.bn2), (self.conv3, self.bn3)]
        if self.downsample is not None:
            out.append(self.downsample)
        return out

    def forward(self, x: Tensor, training: bool) -> Tensor:
        out = T.relu(_call(self.bn1, _call(self.conv1, x), training))
        out = T.relu(_call(self.bn2, _call(self.conv2, out), training))
        out = _call(self.bn3, _call(self.conv3, out), training)
        if self.downsample is None:
            shortcut = x
        else:
            dconv, dbn = self.downsample
            shortcut = _call(dbn, _call(dconv, x), training)
        if out.shape != shortcut.shape:
            raise LayerShapeError(f"{self.name}: shortcut add operands differ, {out.shape} vs {shortcut.shape}")
        return T.relu(T.add(out, shortcut))


class LayerShapeError(ShapeError):
    """ShapeError already attributed to the first offending layer."""


def _call(layer, *args):
    try:
        return layer.forward(*args)
    except LayerShapeError:
        raise
    except ShapeError as err:
        raise LayerShapeError(f"{layer.name}: {err}") from err


@dataclass
class ResidualStage:
    index: int
    blocks: list
    prunable_output: bool = True

    @property
    def space(self):
        return f"s{self.index}.out"

    @property
    def width(self):
        return self.blocks[0].bn3.width


@dataclass
class ChannelSpace:
    """A set of channel indices that every producer writes and every consumer reads."""

    name: str
    width: int
    stage_id: int | None
    role: str  # "block_output" | "inner_channel" | "stem"
    prunable: bool
    producers: list = field(default_factory=list)
    consumers: list = field(default_factory=list)


class NetworkGraph:
    def __init__(self, config: ArchConfig, stem_conv, stem_bn, stages, fc):
        self.config = config
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.stages = stages
        self.fc = fc
        self.meta: dict = {}

    @property
    def class_count(self):
        return self.fc.weight.shape[1]

    @property
    def input_shape(self):
        c = self.config
        return (c.in_channels, c.image_size, c.image_size)

    def conv_bn_pairs(self) -> Iterator[tuple]:
        yield self.stem_conv, self.stem_bn
        for stage in self.stages:
            for block in stage.blocks:
                yield from block.pairs()

    def layers(self) -> dict:
        out = {}
        for conv, bn in self.conv_bn_pairs():
            out[conv.name] = conv
            out[bn.name] = bn
        out[self.fc.name] = self.fc
        return out

    def layer(self, name):
        try:
            return self.layers()[name]
        except KeyError:
            raise KeyError(f"no layer named {name!r}") from None

    def bn_after(self, conv_name):
        for conv, bn in self.conv_bn_pairs():
            if conv.name == conv_name:
                return bn
        return None

    def parameters(self) -> list:
        params = []
        for layer in self.layers().values():
            params.extend(layer.parameters())
        return params

    def clone(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    def space_widths(self) -> dict:
        return {s.name: s.width for s in self.channel_spaces()}

    def channel_spaces(self) -> list:
        spaces: dict[str, ChannelSpace] = {}
        for conv, bn in self.conv_bn_pairs():
            name = conv.out_space
            if name not in spaces:
                if name == "stem":
                    stage_id, role, prunable = None, "stem", False
                else:
                    stage_id = int(name.split(".")[0][1:])
                    if name.endswith(".out"):
                        role, prunable = "block_output", self.stages[stage_id].prunable_output
                    else:
                        role, prunable = "inner_channel", True
                spaces[name] = ChannelSpace(name, conv.out_channels, stage_id, role, prunable)
            spaces[name].producers.append(conv.name)
        for conv, _ in self.conv_bn_pairs():
            if conv.in_space in spaces and not conv.depthwise:
                spaces[conv.in_space].consumers.append(conv.name)
        spaces[self.fc.in_space].consumers.append(self.fc.name)
        return list(spaces.values())

    def validate(self):
        """Assert structural consistency; raises ShapeError on the first violation."""
        widths = {}
        for conv, bn in self.conv_bn_pairs():
            if bn.width != conv.out_channels:
                raise ShapeError(f"{bn.name}: width {bn.width} != producing conv {conv.name} out {conv.out_channels}")
            prev = widths.setdefault(conv.out_space, conv.out_channels)
            if prev != conv.out_channels:
                raise ShapeError(f"{conv.name}: writes {conv.out_channels} channels into {conv.out_space} of width {prev}")
        for conv, _ in self.conv_bn_pairs():
            if conv.in_space == "input":
                expected = self.config.in_channels
            else:
                expected = widths[conv.in_space]
            if conv.in_channels != expected:
                raise ShapeError(f"{conv.name}: reads {conv.in_channels} channels from {conv.in_space} of width {expected}")
            if conv.depthwise and not (conv.groups == conv.in_channels == conv.out_channels):
                raise ShapeError(f"{conv.name}: depthwise conv must have groups == in == out")
        for stage in self.stages:
            w = stage.width
            for block in stage.blocks:
                if block.bn3.width != w:
                    raise ShapeError(f"{block.bn3.name}: stage {stage.index} width {w} != {block.bn3.width}")
                if block.downsample is not None and block.downsample[1].width != w:
                    raise ShapeError(f"{block.downsample[1].name}: stage {stage.index} width {w} mismatch")
        if self.fc.weight.shape[0] != widths[self.fc.in_space]:
            raise ShapeError(f"{self.fc.name}: in_features {self.fc.weight.shape[0]} != {widths[self.fc.in_space]}")

    def check_input(self, x: Tensor):
        if x.ndim != 4:
            raise LayerShapeError(f"{self.stem_conv.name}: expected [N, C, H, W] batch, got {x.shape}")
        if tuple(x.shape[1:]) != self.input_shape:
            raise LayerShapeError(f"{self.stem_conv.name}: input {tuple(x.shape[1:])} != expected {self.input_shape}")

    def stem(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(_call(self.stem_bn, _call(self.stem_conv, x), training))

    def run_stages(self, h: Tensor, training: bool, start: int = 0) -> Tensor:
        for stage in self.stages[start:]:
            for block in stage.blocks:
                h = block.forward(h, training)
        return h

    def head(self, h: Tensor) -> Tensor:
        pooled = T.mean(h, axis=(2, 3))
        return _call(self.fc, pooled)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x)
        return self.head(self.run_stages(self.stem(x, training), training))

    def conv_geometry(self) -> list:
        """(conv, (in_h, in_w), (out_h, out_w)) for every conv in forward order."""
        out = []
        hw = {"input": (self.config.image_size, self.config.image_size)}
        for conv, _ in self.conv_bn_pairs():
            # a depthwise conv overwrites its own space's resolution after reading it
            in_hw = hw[conv.in_space]
            o = conv.out_hw(*in_hw)
            out.append((conv, in_hw, o))
            hw[conv.out_space] = o
        return out


def forward_logits(net: NetworkGraph, batch, training: bool = False) -> Tensor:
    """[batch, class_count] logits; eval mode is a pure function of (weights, input)."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=net.fc.weight.dtype)
    return net.forward(x, training=training)


def default_space_widths(config: ArchConfig) -> dict:
    widths = {"stem": config.stem_width}
    for i, (w, nb) in enumerate(zip(config.widths, config.blocks)):
        widths[f"s{i}.out"] = w
        mid = w // config.expansion
        for j in range(nb):
            widths[f"s{i}.b{j}.mid1"] = mid
            if not config.depthwise:
                widths[f"s{i}.b{j}.mid2"] = mid
    return widths


def build_tiny_resnet(config: ArchConfig | None = None, seed: int = 0, space_widths: dict | None = None,
                      dtype=np.float32) -> NetworkGraph:
    """Stem conv, bottleneck stages (first block downsamples), global pool, linear head.

    Stage 0 keeps resolution; later stages halve it. The last stage's output
    space is flagged non-prunable.
    """
    config = config or ArchConfig()
    if len(config.widths) != len(config.blocks) or not config.widths:
        raise ValueError(f"widths {config.widths} and blocks {config.blocks} must be nonempty and equal length")
    if any(b < 1 for b in config.blocks):
        raise ValueError(f"every stage needs at least one block, got {config.blocks}")
    if any(w < 4 for w in config.widths):
        raise ValueError(f"stage widths must be >= 4 to form reduce/expand layers, got {config.widths}")
    if config.class_count < 1 or config.stem_width < 1:
        raise ValueError("class_count and stem_width must be positive")
    widths = default_space_widths(config)
    if space_widths:
        unknown = set(space_widths) - set(widths)
        if unknown:
            raise ValueError(f"unknown channel spaces {sorted(unknown)}")
        widths.update({k: int(v) for k, v in space_widths.items()})
    rng = np.random.default_rng(seed)

    def conv(name, cin, cout, k, stride, in_space, out_space, depthwise=False):
        groups = cin if depthwise else 1
        return ConvLayer(name, cin, cout, k, stride=stride, padding=k // 2, groups=groups,
                         in_space=in_space, out_space=out_space, depthwise=depthwise, rng=rng, dtype=dtype)

    stem_conv = conv("stem.conv", config.in_channels, widths["stem"], 3, 1, "input", "stem")
    stem_bn = BatchNormLayer("stem.bn", widths["stem"], dtype=dtype)
    stages = []
    prev_space = "stem"
    for i, nb in enumerate(config.blocks):
        out_space = f"s{i}.out"
        wout = widths[out_space]
        blocks = []
        for j in range(nb):
            p = f"s{i}.b{j}"
            stride = 2 if (i > 0 and j == 0) else 1
            in_space = prev_space if j == 0 else out_space
            cin = widths[in_space]
            m1 = widths[f"{p}.mid1"]
            c1 = conv(f"{p}.conv1", cin, m1, 1, 1, in_space, f"{p}.mid1")
            if config.depthwise:
                c2 = conv(f"{p}.conv2", m1, m1, 3, stride, f"{p}.mid1", f"{p}.mid1", depthwise=True)
                m2_space = f"{p}.mid1"
            else:
                m2_space = f"{p}.mid2"
                c2 = conv(f"{p}.conv2", m1, widths[m2_space], 3, stride, f"{p}.mid1", m2_space)
            c3 = conv(f"{p}.conv3", widths[m2_space], wout, 1, 1, m2_space, out_space)
            down = None
            if j == 0:
                down = (conv(f"{p}.down.conv", cin, wout, 1, stride, in_space, out_space),
                        BatchNormLayer(f"{p}.down.bn", wout, dtype=dtype))
            blocks.append(Bottleneck(p, c1, BatchNormLayer(f"{p}.bn1", m1, dtype=dtype), c2,
                                     BatchNormLayer(f"{p}.bn2", c2.out_channels, dtype=dtype), c3,
                                     BatchNormLayer(f"{p}.bn3", wout, dtype=dtype), down))
        stages.append(ResidualStage(i, blocks, prunable_output=(i < len(config.blocks) - 1)))
        prev_space = out_space
    fc = LinearLayer("fc", widths[prev_space], config.class_count, in_space=prev_space, rng=rng, dtype=dtype)
    net = NetworkGraph(config, stem_conv, stem_bn, stages, fc)
    net.validate()
    return net


# --------------------------------------------------------------------------
# checkpoints


def _layer_attrs(layer):
    if layer.kind == "conv":
        return {"stride": layer.stride, "padding": layer.padding, "groups": layer.groups,
                "depthwise": layer.depthwise, "in_space": layer.in_space, "out_space": layer.out_space}
    if layer.kind == "bn":
        return {"eps": layer.eps, "momentum": layer.momentum}
    return {"in_space": layer.in_space}


def save_checkpoint(net: NetworkGraph, path, meta: dict | None = None) -> None:
    """Manifest (layers, shapes, hyperparameters) followed by serialized tensors."""
    layers = []
    payload = []
    for name, layer in net.layers().items():
        entry = {"name": name, "kind": layer.kind, "attrs": _layer_attrs(layer), "tensors": []}
        for tname, t in layer.tensors().items():
            arr = t.data if isinstance(t, Tensor) else t
            entry["tensors"].append({"name": tname, "shape": list(arr.shape), "dtype": str(arr.dtype)})
            payload.append(arr)
        layers.append(entry)
    manifest = {
        "format": "curlprune-checkpoint/1",
        "config": asdict(net.config),
        "space_widths": net.space_widths(),
        "layers": layers,
        "meta": meta if meta is not None else net.meta,
    }
    raw = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for arr in payload:
            T.write_tensor(fh, arr)


def load_checkpoint(path) -> NetworkGraph:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a curlprune checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(size))
        cfg = manifest["config"]
        config = ArchConfig(**cfg)
        first = manifest["layers"][0]["tensors"][0]["dtype"]
        net = build_tiny_resnet(config, space_widths=manifest["space_widths"], dtype=np.dtype(first))
        layers = net.layers()
        for entry in manifest["layers"]:
            layer = layers[entry["name"]]
            for k, v in entry["attrs"].items():
                setattr(layer, k, v)
            for spec in entry["tensors"]:
                arr = T.read_tensor(fh)
                if list(arr.shape) != spec["shape"]:
                    raise ValueError(f"{entry['name']}.{spec['name']}: shape {arr.shape} != manifest {spec['shape']}")
                target = getattr(layer, spec["name"])
                if isinstance(target, Parameter):
                    target.data = np.array(arr)
                    target.grad = np.zeros_like(target.data)
                else:
                    setattr(layer, spec["name"], np.array(arr))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after tensor payloads")
    net.meta = manifest.get("meta") or {}
    net.validate()
    return net
