"""CNN topology for T-F patches and its checkpoint format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, DataError, NumericError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    MaxPool2D,
    ParallelConv2D,
    ReLU,
    cross_entropy,
    softmax,
)

CHECKPOINT_VERSION = 1
INPUT_SHAPE = (1, 75, 128)

# (count, time extent, frequency extent) per conv1 group
FILTER_CONFIGURATIONS = {
    "CNN_sq": ((112, 5, 5),),
    "CNN_1": ((112, 3, 40),),
    "CNN_2": ((64, 3, 20), (48, 3, 70)),
    "CNN_3": ((48, 3, 10), (32, 3, 30), (32, 3, 60)),
    "CNN_4": ((48, 3, 8), (32, 3, 32), (16, 3, 64), (16, 3, 90)),
    "CNN_5": ((36, 3, 6), (22, 3, 26), (22, 3, 48), (16, 3, 70), (16, 3, 96)),
}


@dataclass
class NetworkConfig:
    filter_configuration: str = "CNN_4"
    pre_activation: bool = False
    pre_activation_all: bool = False  # also BN+ReLU between pool1 and conv2
    conv2_filters: int = 224
    conv2_extent: tuple = (5, 5)
    pool1: tuple = (5, 5)
    pool2: tuple = (11, 4)
    classes: int = 15
    l2: float = 1e-5
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-3
    groups: tuple | None = None  # overrides filter_configuration when set

    def filter_groups(self):
        if self.groups is not None:
            return tuple(tuple(g) for g in self.groups)
        try:
            return FILTER_CONFIGURATIONS[self.filter_configuration]
        except KeyError:
            raise ConfigError(
                f"unknown filter configuration {self.filter_configuration!r}; "
                f"choose from {sorted(FILTER_CONFIGURATIONS)}"
            ) from None


class Network:
    def __init__(self, layers: list[Layer], config: NetworkConfig, dtype=np.float32):
        self.layers = layers
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        self.last_probs = None
        self.shapes = self._check_chain()

    def _check_chain(self):
        shape = INPUT_SHAPE
        shapes = [shape]
        for layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ConfigError as exc:
                raise ConfigError(f"shape chain broken at {layer!r}: {exc}") from exc
            shapes.append(shape)
        if shape != (self.config.classes,):
            raise ConfigError(f"network ends with shape {shape}, expected ({self.config.classes},)")
        return shapes

    # parameters -------------------------------------------------------

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}:{layer.name}.{k}", v

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                yield f"{i}:{layer.name}.{k}", layer.grads[k]

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                yield f"{i}:{layer.name}.{k}", v

    def count_params(self) -> int:
        return int(sum(v.size for _, v in self.named_params()))

    def state_dict(self):
        state = {k: v.copy() for k, v in self.named_params()}
        state.update({k: v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                np.copyto(v, state[f"{i}:{layer.name}.{k}"])
            for k in layer.buffers:
                layer.buffers[k] = np.array(state[f"{i}:{layer.name}.{k}"], dtype=self.dtype)

    # passes -----------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != INPUT_SHAPE:
            raise DataError(f"input batch shape {x.shape}, expected (B, 1, 75, 128)")
        return x.astype(self.dtype, copy=False)

    def logits(self, x, train=False):
        x = self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def forward(self, x, train=False):
        """Class probabilities (B, classes)."""
        return softmax(self.logits(x, train))

    def predict_proba(self, x, batch_size=128):
        x = self._check_input(x)
        out = [self.forward(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def l2_penalty(self):
        return sum(layer.l2_penalty() for layer in self.layers)

    def set_l2(self, l2: float):
        """Change the conv-weight L2 coefficient on every conv layer."""
        self.config.l2 = l2
        for layer in self.layers:
            for conv in getattr(layer, "branches", (layer,)):
                if isinstance(conv, Conv2D):
                    conv.l2 = l2

    def loss(self, x, labels, train=True):
        """Mean cross-entropy plus conv L2, without a backward pass."""
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels.argmax(axis=1)
        return cross_entropy(softmax(self.logits(x, train)), labels) + self.l2_penalty()

    def loss_and_gradients(self, x, labels):
        """Mean cross-entropy plus conv L2; fills every layer's ``grads``."""
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels.argmax(axis=1)
        logits = self.logits(x, train=True)
        probs = softmax(logits)
        self.last_probs = probs
        loss = cross_entropy(probs, labels) + self.l2_penalty()
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss; first bad layer: {self._locate_nonfinite(x)}")
        grad = probs.copy()
        grad[np.arange(len(labels)), labels] -= 1.0
        grad /= len(labels)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                break
        return loss, dict(self.named_grads())

    def _locate_nonfinite(self, x):
        x = self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x, False)
            if not np.all(np.isfinite(x)):
                return repr(layer)
        return "softmax/cross-entropy"

    def predict_segments(self, patches):
        patches = np.asarray(patches)
        if patches.shape[0] != 7:
            raise DataError(f"expected 7 patches per recording, got {patches.shape[0]}")
        return self.predict_proba(patches)

    # persistence ------------------------------------------------------

    def save(self, path, scaler_hash: str = ""):
        header = {
            "format": "ascfusion-cnn",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "dtype": self.dtype.name,
            "scaler_hash": scaler_hash,
            "order": [k for k, _ in self.named_params()] + [k for k, _ in self.named_buffers()],
        }
        arrays = {f"p{i}": v for i, v in enumerate(self.state_dict().values())}
        np.savez(path, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != "ascfusion-cnn" or header["version"] != CHECKPOINT_VERSION:
                raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} CNN checkpoint")
            cfg = header["config"]
            for key in ("conv2_extent", "pool1", "pool2"):
                cfg[key] = tuple(cfg[key])
            net = build_network(NetworkConfig(**cfg), dtype=header["dtype"])
            state = {k: data[f"p{i}"] for i, k in enumerate(header["order"])}
        net.load_state_dict(state)
        net.scaler_hash = header.get("scaler_hash", "")
        return net


def build_network(config: NetworkConfig = NetworkConfig(), seed: int = 0, dtype=np.float32) -> Network:
    """Two conv blocks and a dense softmax head, per the configured conv1 groups.

    Conv1 groups are same-padded so their maps concatenate at 75x128; conv2
    is unpadded; pooling floors.  Weights are Glorot-uniform.
    """
    rng = np.random.default_rng(seed)
    groups = config.filter_groups()
    n1 = sum(g[0] for g in groups)
    layers: list[Layer] = []
    if config.pre_activation:
        layers += [BatchNorm(1, config.bn_momentum, config.bn_epsilon, dtype, "bn_in"), ReLU("relu_in")]
    branches = [
        Conv2D(1, count, (kt, kf), "same", config.l2, input_grad=config.pre_activation,
               rng=rng, dtype=dtype, name=f"conv1_{i}")
        for i, (count, kt, kf) in enumerate(groups)
    ]
    layers += [
        ParallelConv2D(branches, "conv1"),
        BatchNorm(n1, config.bn_momentum, config.bn_epsilon, dtype, "bn1"),
        # max-pool commutes with ReLU; pooling first shrinks the ReLU input 25x
        MaxPool2D(config.pool1, "pool1"),
        ReLU("relu1"),
    ]
    if config.pre_activation_all:
        layers += [BatchNorm(n1, config.bn_momentum, config.bn_epsilon, dtype, "bn_mid"), ReLU("relu_mid")]
    layers += [
        Conv2D(n1, config.conv2_filters, config.conv2_extent, "valid", config.l2, rng=rng, dtype=dtype, name="conv2"),
        BatchNorm(config.conv2_filters, config.bn_momentum, config.bn_epsilon, dtype, "bn2"),
        MaxPool2D(config.pool2, "pool2"),
        ReLU("relu2"),
        Flatten(),
    ]
    # dense input size comes from the shape chain so a bad config fails with a named layer
    shape = INPUT_SHAPE
    for layer in layers:
        try:
            shape = layer.output_shape(shape)
        except ConfigError as exc:
            raise ConfigError(f"shape chain broken at {layer!r}: {exc}") from exc
    layers.append(Dense(shape[0], config.classes, rng=rng, dtype=dtype, name="dense"))
    return Network(layers, config, dtype)


def parameter_count(config: NetworkConfig) -> int:
    return build_network(config).count_params()
