"""Discriminator/classifier and generator stacks.

The discriminator doubles as the plain classifier (``C = K``) and as the
semi-supervised critic (``C = K + 1``, last column = "synthetic"). Both
networks are described by a declarative :class:`NetworkSpec` and run by a
single interpreter, :meth:`Network.forward`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

import bssgan.tensor as T
from bssgan.errors import ConfigError
from bssgan.tensor.checkpoint import RUNNING_PREFIX, load_checkpoint, read_manifest, save_checkpoint

LEAKY_ALPHA = 0.2
DROPOUT_RATE = 0.25
BN_MOMENTUM = 0.8
NOISE_DIM = 100


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | deconv | dense | batch_norm | dropout | flatten | reshape
    name: str
    filters: int | None = None
    stride: int | None = None
    activation: str | None = None
    rate: float | None = None
    momentum: float | None = None
    shape: tuple[int, ...] | None = None


@dataclass(frozen=True)
class NetworkSpec:
    role: str  # "discriminator" | "generator"
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_dim: int
    feature_layer: str | None = None

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        layers = tuple(
            LayerSpec(**{**layer, "shape": tuple(layer["shape"]) if layer.get("shape") else None})
            for layer in d["layers"]
        )
        return cls(
            role=d["role"],
            layers=layers,
            input_shape=tuple(d["input_shape"]),
            output_dim=d["output_dim"],
            feature_layer=d.get("feature_layer"),
        )


def discriminator_spec(k: int, semi_supervised: bool, image_size: int = 128) -> NetworkSpec:
    if k < 2:
        raise ConfigError(f"need at least two real classes, got K={k}")
    if image_size % 4:
        raise ConfigError(f"image size must be divisible by 4, got {image_size}")
    c = k + 1 if semi_supervised else k
    layers = (
        LayerSpec("conv", "conv1", filters=32, stride=2, activation="leaky_relu"),
        LayerSpec("dropout", "drop1", rate=DROPOUT_RATE),
        LayerSpec("conv", "conv2", filters=64, stride=2, activation="leaky_relu"),
        LayerSpec("batch_norm", "bn2", momentum=BN_MOMENTUM),
        LayerSpec("dropout", "drop2", rate=DROPOUT_RATE),
        LayerSpec("conv", "conv3", filters=64, stride=1, activation="leaky_relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc", filters=c, activation="softmax"),
    )
    return NetworkSpec("discriminator", layers, (image_size, image_size, 3), c, feature_layer="conv3")


def generator_spec(out_size: int = 128, noise_dim: int = NOISE_DIM) -> NetworkSpec:
    if out_size % 4 or out_size < 4:
        raise ConfigError(f"generator output size must be a positive multiple of 4, got {out_size}")
    base = out_size // 4
    layers = (
        LayerSpec("dense", "fc", filters=base * base * 128, activation="relu"),
        LayerSpec("reshape", "reshape", shape=(base, base, 128)),
        LayerSpec("deconv", "deconv1", filters=64, stride=2, activation="relu"),
        LayerSpec("batch_norm", "bn1", momentum=BN_MOMENTUM),
        LayerSpec("deconv", "deconv2", filters=3, stride=2, activation="relu"),
        LayerSpec("batch_norm", "bn2", momentum=BN_MOMENTUM),
        LayerSpec("deconv", "deconv3", filters=3, stride=1, activation="tanh"),
    )
    return NetworkSpec("generator", layers, (noise_dim,), out_size * out_size * 3)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_xavier(spec: NetworkSpec, rng: np.random.Generator, prefix: str) -> dict[str, T.Tensor]:
    """Xavier-uniform kernels, zero biases, unit BN scale, zero BN shift."""
    params: dict[str, T.Tensor] = {}

    def add(name, arr, trainable=True):
        params[name] = T.Tensor(arr, name=name, requires_grad=trainable)

    shape = spec.input_shape
    for layer in spec.layers:
        key = f"{prefix}.{layer.name}"
        if layer.kind == "conv":
            cin = shape[-1]
            add(f"{key}.kernel", _xavier(rng, (3, 3, cin, layer.filters), 9 * cin, 9 * layer.filters))
            add(f"{key}.bias", np.zeros(layer.filters, np.float32))
            shape = (-(-shape[0] // layer.stride), -(-shape[1] // layer.stride), layer.filters)
        elif layer.kind == "deconv":
            cin = shape[-1]
            add(f"{key}.kernel", _xavier(rng, (3, 3, layer.filters, cin), 9 * cin, 9 * layer.filters))
            add(f"{key}.bias", np.zeros(layer.filters, np.float32))
            shape = (shape[0] * layer.stride, shape[1] * layer.stride, layer.filters)
        elif layer.kind == "dense":
            width = int(np.prod(shape))
            add(f"{key}.kernel", _xavier(rng, (width, layer.filters), width, layer.filters))
            add(f"{key}.bias", np.zeros(layer.filters, np.float32))
            shape = (layer.filters,)
        elif layer.kind == "batch_norm":
            c = shape[-1]
            add(f"{key}.gamma", np.ones(c, np.float32))
            add(f"{key}.beta", np.zeros(c, np.float32))
            add(f"{RUNNING_PREFIX}{key}.mean", np.zeros(c, np.float32), trainable=False)
            add(f"{RUNNING_PREFIX}{key}.var", np.ones(c, np.float32), trainable=False)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "reshape":
            shape = layer.shape
    return params


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, T.Tensor]
    prefix: str
    features: T.Tensor | None = field(default=None, repr=False)

    @property
    def trainable(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith(RUNNING_PREFIX)}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, tensors: Mapping[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in tensors]
        if missing:
            raise ConfigError(f"checkpoint lacks parameters {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for k, p in self.params.items():
            if tuple(tensors[k].shape) != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {tensors[k].shape} vs {p.shape}")
            p.data = np.array(tensors[k], dtype=np.float32)

    def copy(self) -> "Network":
        params = {k: T.Tensor(v.data.copy(), name=k, requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Network(self.spec, params, self.prefix)

    def forward(
        self,
        x: T.Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
        frozen: bool = False,
        update_stats: bool = True,
    ) -> T.Tensor:
        """Run the stack; the feature-layer activation is left in ``self.features``.

        ``frozen`` routes parameters in as constants so no parameter gradient
        is recorded (the input gradient still flows). ``update_stats=False``
        keeps batch-norm running statistics fixed in training mode.
        """
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ConfigError(f"{self.spec.role} expects input (N, {self.spec.input_shape}), got {x.shape}")

        def p(name):
            t = self.params[f"{self.prefix}.{name}"]
            return t.detach() if frozen else t

        self.features = None
        h = x
        for layer in self.spec.layers:
            if layer.kind == "conv":
                h = T.conv2d(h, p(f"{layer.name}.kernel"), p(f"{layer.name}.bias"), layer.stride)
            elif layer.kind == "deconv":
                h = T.transposed_conv2d(h, p(f"{layer.name}.kernel"), p(f"{layer.name}.bias"), layer.stride)
            elif layer.kind == "dense":
                h = T.dense(h, p(f"{layer.name}.kernel"), p(f"{layer.name}.bias"))
            elif layer.kind == "batch_norm":
                key = f"{self.prefix}.{layer.name}"
                mean = self.params[f"{RUNNING_PREFIX}{key}.mean"]
                var = self.params[f"{RUNNING_PREFIX}{key}.var"]
                if training and not update_stats:
                    mean, var = T.Tensor(mean.data.copy()), T.Tensor(var.data.copy())
                h = T.batch_norm(h, p(f"{layer.name}.gamma"), p(f"{layer.name}.beta"), mean, var, layer.momentum, training)
            elif layer.kind == "dropout":
                h = T.dropout(h, layer.rate, training, rng)
            elif layer.kind == "flatten":
                h = T.flatten(h)
            elif layer.kind == "reshape":
                h = T.reshape(h, (h.shape[0],) + tuple(layer.shape))
            if layer.activation:
                h = T.activation(h, layer.activation, LEAKY_ALPHA)
            if layer.name == self.spec.feature_layer:
                self.features = T.relu(T.flatten(h))
        return h


def build_discriminator(
    k: int, semi_supervised: bool, image_size: int = 128, rng: np.random.Generator | None = None, prefix: str = "d"
) -> Network:
    spec = discriminator_spec(k, semi_supervised, image_size)
    rng = rng if rng is not None else np.random.default_rng(0)
    return Network(spec, init_xavier(spec, rng, prefix), prefix)


def build_generator(
    out_size: int = 128, noise_dim: int = NOISE_DIM, rng: np.random.Generator | None = None, prefix: str = "g"
) -> Network:
    spec = generator_spec(out_size, noise_dim)
    rng = rng if rng is not None else np.random.default_rng(0)
    return Network(spec, init_xavier(spec, rng, prefix), prefix)


def discriminator_features(net: Network, x: T.Tensor) -> T.Tensor:
    """ReLU of the flattened last-conv activation, in inference mode."""
    net.forward(x, training=False)
    return net.features



def save_networks(path, nets: Mapping[str, Network], extra: Mapping[str, np.ndarray] | None = None, meta: Mapping | None = None):
    """One checkpoint directory holding several networks keyed by prefix."""
    tensors: dict[str, np.ndarray] = {}
    for net in nets.values():
        tensors.update(net.state())
    tensors.update(extra or {})
    info = {"networks": {net.prefix: net.spec.to_dict() for net in nets.values()}, **dict(meta or {})}
    return save_checkpoint(path, tensors, info)


def load_network(path, prefix: str, role: str | None = None) -> Network:
    """Rebuild the network stored under ``prefix`` in a checkpoint directory."""
    tensors, meta = load_checkpoint(path)
    specs = meta.get("networks", {})
    if prefix not in specs:
        raise ConfigError(f"checkpoint {path} holds no network {prefix!r} (has {sorted(specs)})")
    spec = NetworkSpec.from_dict(specs[prefix])
    if role is not None and spec.role != role:
        raise ConfigError(f"network {prefix!r} in {path} is a {spec.role}, not a {role}")
    net = Network(spec, init_xavier(spec, np.random.default_rng(0), prefix), prefix)
    net.load_state(tensors)
    return net


def find_network(path, role: str) -> Network:
    """Load the first network of the given role from a checkpoint."""
    specs = read_manifest(path)["meta"].get("networks", {})
    for prefix, d in sorted(specs.items()):
        if d["role"] == role:
            return load_network(path, prefix, role)
    raise ConfigError(f"checkpoint {path} holds no {role} parameters")
