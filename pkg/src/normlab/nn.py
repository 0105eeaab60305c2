"""Layers and the network builders used in experiments.

A :class:`Network` is an ordered list of named layers. Layers receive the
batch's context ids and the inference choice so that context normalization
can pick per-sample statistics, while every other layer ignores them.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .context import ContextTable, cn_layer_forward, cn_plus_inference, feature_dim
from .exceptions import ConfigurationError, InputError, UsageError
from .gmm import GmmModel
from .norms import BnState, MnState, NormSpec, axis_norm_forward, bn_forward, mn_fit_stage, mn_forward
from .tensor import ParamStore, Tensor

INFERENCE_CHOICES = ("cn", "cn+")


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Layer:
    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Non-trainable arrays that belong in checkpoints."""
        return OrderedDict()

    def load_state(self, arrays: dict) -> None:
        pass

    def forward(self, x: Tensor, training: bool, contexts=None, inference: str = "cn") -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel, stride=1, pad=0, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        self.weight = Tensor(he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def parameters(self):
        p = OrderedDict(weight=self.weight)
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, training, contexts=None, inference="cn"):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Dense(Layer):
    def __init__(self, d_in, d_out, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(he_normal(rng, (d_in, d_out), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def parameters(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def forward(self, x, training, contexts=None, inference="cn"):
        return F.dense(x, self.weight, self.bias)


class ReLU(Layer):
    def forward(self, x, training, contexts=None, inference="cn"):
        return F.relu(x)


class Flatten(Layer):
    def forward(self, x, training, contexts=None, inference="cn"):
        return F.flatten(x)


class Pool2d(Layer):
    def __init__(self, kind, window, stride, pad=0, ceil_mode=False):
        self.kind, self.window, self.stride, self.pad, self.ceil_mode = kind, window, stride, pad, ceil_mode

    def forward(self, x, training, contexts=None, inference="cn"):
        return F.pool2d(x, self.kind, self.window, self.stride, self.pad, self.ceil_mode)


class BatchNorm(Layer):
    def __init__(self, channels, spec: NormSpec):
        self.bn = BnState.create(channels, spec.epsilon, spec.momentum, spec.use_affine)

    def parameters(self):
        if not self.bn.affine:
            return OrderedDict()
        return OrderedDict(gamma=self.bn.gamma, beta=self.bn.beta)

    def state(self):
        return OrderedDict(running_mean=self.bn.running_mean, running_var=self.bn.running_var)

    def load_state(self, arrays):
        self.bn.running_mean = arrays["running_mean"].copy()
        self.bn.running_var = arrays["running_var"].copy()

    def forward(self, x, training, contexts=None, inference="cn"):
        return bn_forward(x, self.bn, training)


class AxisNorm(Layer):
    def __init__(self, channels, spec: NormSpec):
        self.spec = spec
        self.gamma = Tensor(np.ones(channels), requires_grad=True) if spec.use_affine else None
        self.beta = Tensor(np.zeros(channels), requires_grad=True) if spec.use_affine else None

    def parameters(self):
        return OrderedDict() if self.gamma is None else OrderedDict(gamma=self.gamma, beta=self.beta)

    def forward(self, x, training, contexts=None, inference="cn"):
        return axis_norm_forward(x, self.spec, self.gamma, self.beta)


class MixtureNorm(Layer):
    """Mixture normalization slot; unusable until :meth:`fit` has frozen a GMM."""

    def __init__(self, channels, spec: NormSpec):
        self.spec = spec
        self.channels = channels
        self.mn: MnState | None = None
        self.gamma = Tensor(np.ones(channels), requires_grad=True) if spec.use_affine else None
        self.beta = Tensor(np.zeros(channels), requires_grad=True) if spec.use_affine else None

    def fit(self, activations, seed: int, max_iter: int = 200, tol: float = 1e-6) -> MnState:
        self.mn = mn_fit_stage(activations, self.spec.components, seed, max_iter=max_iter, tol=tol,
                               epsilon=self.spec.epsilon, momentum=self.spec.momentum)
        self.mn.gamma, self.mn.beta = self.gamma, self.beta
        return self.mn

    def parameters(self):
        return OrderedDict() if self.gamma is None else OrderedDict(gamma=self.gamma, beta=self.beta)

    def state(self):
        if self.mn is None:
            return OrderedDict()
        return OrderedDict([("gmm.weights", self.mn.gmm.weights), ("gmm.means", self.mn.gmm.means),
                            ("gmm.variances", self.mn.gmm.variances),
                            ("running_means", self.mn.running_means), ("running_vars", self.mn.running_vars)])

    def load_state(self, arrays):
        if "gmm.weights" not in arrays:
            return
        w = arrays["gmm.weights"]
        var = arrays["gmm.variances"]
        gmm = GmmModel(w / w.sum(), arrays["gmm.means"], var, var_floor=float(var.min()))
        self.mn = MnState(gmm, arrays["running_means"].copy(), arrays["running_vars"].copy(),
                          self.spec.epsilon, self.spec.momentum, self.gamma, self.beta)

    def forward(self, x, training, contexts=None, inference="cn"):
        if self.mn is None:
            raise UsageError("mixture normalization used before its GMM was fitted (stage 1)")
        return mn_forward(x, self.mn, training)


class ContextNorm(Layer):
    """Context normalization over channels or non-overlapping patches."""

    def __init__(self, n_contexts, shape, mode="channels", embed_dim=64, epsilon=1e-5, patch=(4, 4), seed=0):
        self.mode, self.epsilon, self.patch = mode, epsilon, tuple(patch)
        d = feature_dim((1,) + tuple(shape), mode, self.patch)
        self.table = ContextTable(n_contexts, d, embed_dim, seed=seed)

    def parameters(self):
        return OrderedDict(self.table.tensors())

    def forward(self, x, training, contexts=None, inference="cn"):
        if training or inference == "cn":
            if contexts is None:
                raise InputError("context normalization with choice 'cn' needs a context assignment")
            return cn_layer_forward(x, contexts, self.table, self.mode, self.epsilon, self.patch)
        if inference != "cn+":
            raise ConfigurationError(f"inference choice must be one of {INFERENCE_CHOICES}, got {inference!r}")
        return Tensor(cn_plus_inference(x, self.table, self.epsilon, self.mode, self.patch))


class PatchEmbed(Layer):
    """Shared dense embedding of non-overlapping patches, averaged over the patch grid."""

    def __init__(self, channels, patch, embed_dim, rng=None):
        self.patch = tuple(patch)
        self.proj = Dense(channels * self.patch[0] * self.patch[1], embed_dim, rng)

    def parameters(self):
        return OrderedDict((f"proj.{k}", v) for k, v in self.proj.parameters().items())

    def forward(self, x, training, contexts=None, inference="cn"):
        from .context import to_patches
        p = to_patches(x, self.patch)
        n, n_patch, d = p.shape
        h = F.relu(F.dense(F.reshape(p, (n * n_patch, d)), self.proj.weight, self.proj.bias))
        return F.mean(F.reshape(h, (n, n_patch, -1)), axis=1)


def make_norm(channels: int, spec: NormSpec) -> Layer:
    if spec.mode == "batch":
        return BatchNorm(channels, spec)
    if spec.mode == "mixture":
        return MixtureNorm(channels, spec)
    return AxisNorm(channels, spec)


class Network:
    def __init__(self, layers, input_shape):
        self.layers: "OrderedDict[str, Layer]" = OrderedDict(layers)
        self.input_shape = tuple(input_shape)
        self.params = ParamStore(
            (f"{lname}.{pname}", t) for lname, layer in self.layers.items()
            for pname, t in layer.parameters().items())

    def forward(self, x, contexts=None, training: bool = True, inference: str = "cn", upto: str | None = None):
        """Run the layers in order; ``upto`` stops before the named layer."""
        if inference not in INFERENCE_CHOICES:
            raise ConfigurationError(f"inference choice must be one of {INFERENCE_CHOICES}, got {inference!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        for name, layer in self.layers.items():
            if name == upto:
                return x
            x = layer.forward(x, training, contexts, inference)
        if upto is not None:
            raise ConfigurationError(f"no layer named {upto!r}")
        return x

    __call__ = forward

    @property
    def context_layers(self) -> list[ContextNorm]:
        return [layer for layer in self.layers.values() if isinstance(layer, ContextNorm)]

    @property
    def mixture_layers(self) -> list[tuple[str, MixtureNorm]]:
        return [(n, layer) for n, layer in self.layers.items() if isinstance(layer, MixtureNorm)]

    @property
    def uses_contexts(self) -> bool:
        return bool(self.context_layers)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, t.data) for name, t in self.params.items())
        for lname, layer in self.layers.items():
            for key, arr in layer.state().items():
                state[f"{lname}.{key}"] = np.asarray(arr)
        return state

    def load_state_dict(self, state) -> None:
        missing = [n for n in self.params if n not in state]
        if missing:
            raise InputError(f"checkpoint lacks parameters {missing}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise InputError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()
        for lname, layer in self.layers.items():
            prefix = f"{lname}."
            local = {k[len(prefix):]: np.asarray(v, dtype=np.float64) for k, v in state.items()
                     if k.startswith(prefix) and k not in self.params}
            if local:
                layer.load_state(local)


# --------------------------------------------------------------------------
# specs and builders

@dataclass
class ConvDef:
    name: str
    out_channels: int
    kernel: int
    stride: int
    pad: int
    pool: tuple[str, int, int, int]  # kind, window, stride, pad


@dataclass
class ContextInput:
    n_contexts: int
    mode: str = "channels"
    embed_dim: int = 64
    epsilon: float = 1e-5
    patch: tuple[int, int] = (4, 4)


@dataclass
class ConvNetSpec:
    num_classes: int
    convs: list[ConvDef]
    in_channels: int = 3
    input_size: int = 32
    norm: NormSpec = field(default_factory=lambda: NormSpec("batch"))
    norm_overrides: dict[str, NormSpec] = field(default_factory=dict)
    context_input: ContextInput | None = None
    ceil_mode: bool = True
    allowed_classes: tuple[int, ...] | None = (10, 100)

    def norm_for(self, conv_name: str) -> NormSpec:
        return self.norm_overrides.get(conv_name, self.norm)


CIFAR_CONVS = [
    ConvDef("conv1", 64, 5, 1, 2, ("max", 3, 2, 0)),
    ConvDef("conv2", 128, 5, 1, 2, ("max", 3, 2, 0)),
    ConvDef("conv3", 128, 5, 1, 2, ("max", 3, 2, 0)),
    ConvDef("conv4", 256, 3, 1, 1, ("avg", 4, 1, 0)),
]


def slot_norms(norm: str | NormSpec, mixture_slot: str, slots) -> tuple[NormSpec, dict[str, NormSpec]]:
    """Resolve a model-wide norm choice into a default plus per-slot overrides.

    A mixture choice only replaces the norm at ``mixture_slot``; the other
    slots keep batch normalization.
    """
    spec = NormSpec.parse(norm) if isinstance(norm, str) else norm
    if spec.mode != "mixture":
        return spec, {}
    if mixture_slot not in slots:
        raise ConfigurationError(f"mixture slot {mixture_slot!r} not among {list(slots)}")
    return NormSpec("batch", epsilon=spec.epsilon, momentum=spec.momentum), {mixture_slot: spec}


def cifar_convnet_spec(num_classes: int = 10, norm="batch", mixture_slot: str = "conv3",
                context_input: ContextInput | None = None) -> ConvNetSpec:
    default, overrides = slot_norms(norm, mixture_slot, [c.name for c in CIFAR_CONVS])
    return ConvNetSpec(num_classes, [ConvDef(**vars(c)) for c in CIFAR_CONVS], 3, 32, default, overrides,
                       context_input)


def small_convnet_spec(num_classes: int, in_channels: int = 3, input_size: int = 8, widths=(16, 32),
                       norm="batch", mixture_slot: str = "conv2",
                       context_input: ContextInput | None = None) -> ConvNetSpec:
    """Two conv blocks with the same conv+norm+relu / pool pattern as the CIFAR net."""
    convs = [ConvDef("conv1", widths[0], 3, 1, 1, ("max", 2, 2, 0)),
             ConvDef("conv2", widths[1], 3, 1, 1, ("avg", input_size // 2, 1, 0))]
    default, overrides = slot_norms(norm, mixture_slot, [c.name for c in convs])
    return ConvNetSpec(num_classes, convs, in_channels, input_size, default, overrides, context_input,
                       ceil_mode=False, allowed_classes=None)


def _context_layer(ci: ContextInput, shape, rng) -> ContextNorm:
    seed = int(rng.integers(2 ** 32))
    return ContextNorm(ci.n_contexts, shape, ci.mode, ci.embed_dim, ci.epsilon, ci.patch, seed=seed)


def build_convnet(spec: ConvNetSpec, seed: int = 0) -> Network:
    if spec.allowed_classes is not None and spec.num_classes not in spec.allowed_classes:
        raise ConfigurationError(f"output width must be one of {spec.allowed_classes}, got {spec.num_classes}")
    rng = np.random.default_rng(seed)
    layers = []
    c, size = spec.in_channels, spec.input_size
    if spec.context_input is not None:
        layers.append(("cn", _context_layer(spec.context_input, (c, size, size), rng)))
    for i, conv in enumerate(spec.convs, start=1):
        size = F.conv_output_size(size, conv.kernel, conv.stride, conv.pad)
        norm = spec.norm_for(conv.name)
        layers.append((conv.name, Conv2d(c, conv.out_channels, conv.kernel, conv.stride, conv.pad,
                                         bias=False, rng=rng)))
        c = conv.out_channels
        layers.append((f"norm{i}", make_norm(c, norm)))
        layers.append((f"relu{i}", ReLU()))
        kind, window, stride, pad = conv.pool
        size = F.pool_output_size(size, window, stride, pad, spec.ceil_mode)
        layers.append((f"pool{i}", Pool2d(kind, window, stride, pad, spec.ceil_mode)))
    layers.append(("flatten", Flatten()))
    layers.append(("linear", Dense(c * size * size, spec.num_classes, rng)))
    return Network(layers, (spec.in_channels, spec.input_size, spec.input_size))


def build_mlp(input_shape, hidden, num_classes: int, seed: int = 0, norm: str | None = None,
              context_input: ContextInput | None = None) -> Network:
    rng = np.random.default_rng(seed)
    layers = []
    if context_input is not None:
        layers.append(("cn", _context_layer(context_input, input_shape, rng)))
    layers.append(("flatten", Flatten()))
    d = int(np.prod(input_shape))
    for i, width in enumerate(hidden, start=1):
        layers.append((f"dense{i}", Dense(d, width, rng)))
        if norm:
            layers.append((f"norm{i}", make_norm(width, NormSpec.parse(norm))))
        layers.append((f"relu{i}", ReLU()))
        d = width
    layers.append(("linear", Dense(d, num_classes, rng)))
    return Network(layers, input_shape)


def build_patchnet(input_shape, num_classes: int, patch=(4, 4), embed_dim: int = 64, seed: int = 0,
                   context_input: ContextInput | None = None) -> Network:
    """Small patch classifier: optional CN-Patches, shared patch embedding, linear head."""
    rng = np.random.default_rng(seed)
    c = input_shape[0]
    layers = []
    if context_input is not None:
        layers.append(("cn", _context_layer(context_input, input_shape, rng)))
    layers.append(("embed", PatchEmbed(c, patch, embed_dim, rng)))
    layers.append(("linear", Dense(embed_dim, num_classes, rng)))
    return Network(layers, input_shape)
