"""Network assembly: declarative layer specs, shape validation, seeded init.

A NetworkSpec is a plain-data description (JSON-safe) of a layer stack plus
the input shape and init seed. build_network turns it into a Network with
He-normal weights drawn from the counter-based generator, so the same spec
and seed produce bit-identical parameters on any platform.
"""

import numpy as np

from ..errors import NumericError, SpecError
from ..rng import derive_seed
from .layers import (Conv2d, Dense, Flatten, GlobalAvgPool, L2Normalize,
                     MaxPool, ReLU)

EMBEDDER_INPUT = (1, 96, 96)
DETECTOR_INPUT = (1, 128, 128)


class NetworkSpec:
    def __init__(self, input_shape, layers, seed=0):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = [dict(d) for d in layers]
        self.seed = int(seed)

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [dict(d) for d in self.layers],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["input_shape"], d["layers"], d.get("seed", 0))
        except (KeyError, TypeError) as e:
            raise SpecError(f"malformed network spec: {e}") from e

    def __eq__(self, other):
        return isinstance(other, NetworkSpec) and self.to_dict() == other.to_dict()


def embedder_spec(dim=128, seed=0):
    """Four conv/pool stages into a d-dim unit-norm embedding head.

    The head flattens a coarse 4x4 spatial map rather than averaging it
    away: muzzle identity lives in the spatial texture layout, and a
    global mean collapses untrained embeddings onto one direction, which
    stalls triplet training from the first epoch.
    """
    layers = [
        {"type": "conv2d", "in_channels": 1, "out_channels": 16, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 16, "out_channels": 32, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 32, "out_channels": 64, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 64, "out_channels": 128, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 3},
        {"type": "flatten"},
        {"type": "dense", "in_dim": 2048, "out_dim": dim},
        {"type": "l2_normalize"},
    ]
    return NetworkSpec(EMBEDDER_INPUT, layers, seed)


def detector_spec(seed=0):
    """Backbone that maps a 128x128 frame to an 8x8 grid of 5-value cells.

    The two stride-16 convs after the last pool widen each cell's receptive
    field to 110 px so size regression stays accurate for boxes that span
    most of the frame.
    """
    layers = [
        {"type": "conv2d", "in_channels": 1, "out_channels": 16, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 16, "out_channels": 32, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 32, "out_channels": 64, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 64, "out_channels": 64, "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 64, "out_channels": 64, "kernel_size": 3},
        {"type": "relu"},
        {"type": "conv2d", "in_channels": 64, "out_channels": 64, "kernel_size": 3},
        {"type": "relu"},
        {"type": "conv2d", "in_channels": 64, "out_channels": 5, "kernel_size": 1},
    ]
    return NetworkSpec(DETECTOR_INPUT, layers, seed)


def _make_layer(desc):
    kind = desc.get("type")
    if kind == "conv2d":
        return Conv2d(desc["in_channels"], desc["out_channels"],
                      desc["kernel_size"], desc.get("stride", 1))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(desc["size"])
    if kind == "flatten":
        return Flatten()
    if kind == "global_avg_pool":
        return GlobalAvgPool()
    if kind == "dense":
        return Dense(desc["in_dim"], desc["out_dim"])
    if kind == "l2_normalize":
        return L2Normalize()
    raise SpecError(f"unknown layer type {kind!r}")


class Network:
    def __init__(self, spec, layers, out_shape):
        self.spec = spec
        self.layers = layers
        self.out_shape = out_shape

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_parameters(self, values):
        params = self.parameters()
        if len(values) != len(params):
            raise SpecError(f"expected {len(params)} tensors, got {len(values)}")
        i = 0
        for layer in self.layers:
            if not layer.params():
                continue
            w, b = values[i], values[i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise SpecError(
                    f"tensor shapes {w.shape}/{b.shape} do not match layer "
                    f"{layer.name} {layer.weight.shape}/{layer.bias.shape}")
            layer.weight = w.copy()
            layer.bias = b.copy()
            i += 2

    def astype(self, dtype):
        for layer in self.layers:
            if layer.params():
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        return self

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, cache=None)
            if not np.isfinite(np.sum(x)):
                raise NumericError(
                    f"non-finite activations after layer {i} ({layer.name})")
        return x

    def forward_with_tape(self, x):
        tape = []
        for i, layer in enumerate(self.layers):
            cache = {}
            x = layer.forward(x, cache)
            if not np.isfinite(np.sum(x)):
                raise NumericError(
                    f"non-finite activations after layer {i} ({layer.name})")
            tape.append(cache)
        return x, tape

    def backward(self, tape, grad_out):
        grads = [None] * len(self.layers)
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            g, pg = self.layers[i].backward(g, tape[i])
            grads[i] = pg
        flat = []
        for pg in grads:
            flat.extend(pg)
        return flat


def build_network(spec, dtype=np.float32):
    layers = []
    shape = spec.input_shape
    for i, desc in enumerate(spec.layers):
        layer = _make_layer(desc)
        try:
            shape = layer.out_shape(shape)
        except SpecError as e:
            raise SpecError(f"layer {i}: {e}") from e
        if hasattr(layer, "init_params"):
            layer.init_params(derive_seed(spec.seed, i), dtype)
        layers.append(layer)
    return Network(spec, layers, shape)


def forward_backward(net, batch, loss_grad_fn):
    """One combined pass: returns (outputs, loss_value, param_grads).

    loss_grad_fn(outputs) must return (loss_value, grad_wrt_outputs).
    """
    out, tape = net.forward_with_tape(batch)
    loss, gout = loss_grad_fn(out)
    grads = net.backward(tape, gout)
    return out, loss, grads
