"""Finite-difference gradient suites over ops, layers and whole models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .context import ContextTable, cn_layer_forward, cn_normalize
from .gmm import em_fit, kmeanspp_init
from .gradcheck import GradCheckResult, check_gradients, relative_error, tape_gradients
from .nn import ContextInput, build_convnet, small_convnet_spec, cifar_convnet_spec
from .norms import BnState, MnState, NormSpec, axis_norm_forward, bn_forward, mn_forward, rows_array
from .tensor import Tensor

TOLERANCE = 1e-4
SCOPES = ("op", "layer", "model")


@dataclass
class AnalyticCheck:
    """Closed-form derivative compared with both the tape and finite differences."""

    name: str
    max_err_tape: float
    max_err_fd: float

    @property
    def max_rel_error(self) -> float:
        return max(self.max_err_tape, self.max_err_fd)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` so every output coordinate gets a distinct cotangent."""
    return F.sum(F.mul(out, Tensor(weights)))


def _run(name, fn, tensors, rng, h=1e-4, max_coords=None, seed=0):
    out_shape = fn().shape
    w = rng.normal(size=out_shape)
    names = [f"{name}:{t.name or i}" for i, t in enumerate(tensors)]
    return check_gradients(lambda: _probe(fn(), w), tensors, names, h=h, max_coords=max_coords, seed=seed)


def _leaf(rng, *shape, low=None, name=None, scale=1.0):
    data = rng.normal(size=shape) * scale
    if low is not None:
        data = low + np.abs(data)
    return Tensor(data, requires_grad=True, name=name)


def _away_from_zero(rng, *shape, gap=0.1):
    v = rng.normal(size=shape)
    return Tensor(np.sign(v) * (np.abs(v) + gap), requires_grad=True)


def op_suite(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    res = []
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    pos = _leaf(rng, 3, 4, low=0.5)
    res += _run("add", lambda: a + b, [a, b], rng)
    res += _run("sub", lambda: a - b, [a, b], rng)
    res += _run("mul", lambda: a * b, [a, b], rng)
    res += _run("div", lambda: a / pos, [a, pos], rng)
    res += _run("square", lambda: F.square(a), [a], rng)
    res += _run("sqrt", lambda: F.sqrt(pos), [pos], rng)
    res += _run("exp", lambda: F.exp(a), [a], rng)
    res += _run("log", lambda: F.log(pos), [pos], rng)
    r = _away_from_zero(rng, 3, 4)
    res += _run("relu", lambda: F.relu(r), [r], rng)
    res += _run("softplus", lambda: F.softplus(a), [a], rng)
    x4 = _leaf(rng, 2, 3, 4, 5)
    res += _run("sum", lambda: F.sum(x4, axis=(0, 2), keepdims=True), [x4], rng)
    res += _run("mean", lambda: F.mean(x4, axis=1), [x4], rng)
    res += _run("reshape", lambda: F.reshape(x4, (6, 20)), [x4], rng)
    res += _run("transpose", lambda: F.transpose(x4, (0, 2, 3, 1)), [x4], rng)
    v = _leaf(rng, 3, 1)
    res += _run("broadcast_to", lambda: F.broadcast_to(v, (3, 4)), [v], rng)
    res += _run("index", lambda: F.index(a, (np.array([0, 2, 2]), slice(None))), [a], rng)
    res += _run("concat", lambda: F.concat([a, b], axis=1), [a, b], rng)
    m1, m2, bias = _leaf(rng, 4, 3), _leaf(rng, 3, 5), _leaf(rng, 5)
    res += _run("matmul", lambda: F.matmul(m1, m2), [m1, m2], rng)
    res += _run("dense", lambda: F.dense(m1, m2, bias), [m1, m2, bias], rng)
    res += _run("logsumexp", lambda: F.logsumexp(a, axis=1), [a], rng)
    res += _run("softmax", lambda: F.softmax(a, axis=1), [a], rng)
    res += _run("log_softmax", lambda: F.log_softmax(a, axis=1), [a], rng)
    labels = rng.integers(0, 4, size=3)
    res += check_gradients(lambda: F.softmax_cross_entropy(a, labels), [a], ["softmax_ce:logits"])
    res += _run("standardize", lambda: F.standardize(x4, (0, 2, 3), 1e-5), [x4], rng)
    gam, bet = _leaf(rng, 3), _leaf(rng, 3)
    res += _run("channel_affine", lambda: F.channel_affine(x4, gam, bet), [x4, gam, bet], rng)
    xc, kc, bc = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3, scale=0.3), _leaf(rng, 4)
    res += _run("conv2d", lambda: F.conv2d(xc, kc, bc, stride=1, pad=1), [xc, kc, bc], rng)
    res += _run("conv2d_s2", lambda: F.conv2d(xc, kc, None, stride=2, pad=0), [xc, kc], rng)
    xp = Tensor(rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) * 0.01, requires_grad=True)
    res += _run("maxpool", lambda: F.pool2d(xp, "max", 3, 2, 0, ceil_mode=True), [xp], rng)
    res += _run("avgpool", lambda: F.pool2d(xc, "avg", 3, 2, 1, ceil_mode=True), [xc], rng)
    res += _run("flatten", lambda: F.flatten(x4), [x4], rng)
    return res


def _fitted_mn(x: np.ndarray, k: int, seed: int) -> MnState:
    X = rows_array(x)
    gmm, _ = em_fit(X, k, kmeanspp_init(X, k, seed), max_iter=50)
    return MnState.from_gmm(gmm)


def dxhat_dmu_check(seed: int = 0, epsilon: float = 1e-5, h: float = 1e-4) -> AnalyticCheck:
    """``d xhat / d mu_r`` against the closed form ``-(sigma2_r + eps)^(-1/2)``."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 4)))
    mu = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    sigma2 = Tensor(0.2 + rng.random((5, 4)))
    closed = -1.0 / np.sqrt(sigma2.data + epsilon)
    (tape,) = tape_gradients(lambda: F.sum(cn_normalize(x, mu, sigma2, epsilon)), [mu])
    fd = np.empty_like(closed)
    flat, out = mu.data.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = cn_normalize(x, mu, sigma2, epsilon).data.reshape(-1)[i]
        flat[i] = orig - h
        fm = cn_normalize(x, mu, sigma2, epsilon).data.reshape(-1)[i]
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return AnalyticCheck("cn:dxhat/dmu_r == -(sigma2+eps)^-1/2",
                         float(relative_error(tape, closed).max()), float(relative_error(fd, closed).max()))


def layer_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    res = []
    x = _leaf(rng, 4, 6, 3, 3, name="x")
    state = BnState.create(6)
    state.gamma.data[:] = rng.normal(size=6)
    state.beta.data[:] = rng.normal(size=6)
    state.gamma.name, state.beta.name = "gamma", "beta"
    res += _run("bn_train", lambda: bn_forward(x, state, True), [x, state.gamma, state.beta], rng)
    for text in ("layer", "instance", "group:2", "group:3"):
        spec = NormSpec.parse(text)
        res += _run(f"norm[{text}]", lambda spec=spec: axis_norm_forward(x, spec), [x], rng)
    g = _leaf(rng, 6, name="gamma")
    bb = _leaf(rng, 6, name="beta")
    res += _run("norm[group:2,affine]", lambda: axis_norm_forward(x, NormSpec.parse("group:2"), g, bb),
                [x, g, bb], rng)
    # two well separated clusters so every component has mass in the batch
    xm_data = np.concatenate([rng.normal(-2, 1, (3, 2, 3, 3)), rng.normal(2, 1, (3, 2, 3, 3))])
    xm = Tensor(xm_data, requires_grad=True, name="x")
    mn = _fitted_mn(xm_data, 2, seed)
    mn.gamma, mn.beta = _leaf(rng, 2, name="gamma"), _leaf(rng, 2, name="beta")
    res += _run("mixture_norm", lambda: mn_forward(xm, mn, True), [xm, mn.gamma, mn.beta], rng)
    mn1 = _fitted_mn(xm_data, 1, seed)
    res += _run("mixture_norm[K=1]", lambda: mn_forward(xm, mn1, True), [xm], rng)
    table = ContextTable(3, 6, embed_dim=5, seed=seed)
    for t in table.tensors().values():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    for name, t in table.tensors().items():
        t.name = name
    ids = np.array([0, 2, 1, 2])
    tensors = [x] + list(table.tensors().values())
    res += _run("cn_channels", lambda: cn_layer_forward(x, ids, table, "channels"), tensors, rng)
    xq = _leaf(rng, 4, 2, 4, 4, name="x")
    tq = ContextTable(3, 2 * 2 * 2, embed_dim=5, seed=seed + 1)
    for name, t in tq.tensors().items():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        t.name = name
    res += _run("cn_patches", lambda: cn_layer_forward(xq, ids, tq, "patches", patch=(2, 2)),
                [xq] + list(tq.tensors().values()), rng)
    res.append(dxhat_dmu_check(seed))
    return res


def model_suite(seed: int = 0, max_coords: int = 4) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    res = []
    net = build_convnet(cifar_convnet_spec(10, "batch", context_input=ContextInput(3, "channels", embed_dim=8)), seed)
    x = Tensor(rng.normal(size=(2, 3, 32, 32)), requires_grad=True, name="input")
    ids = np.array([0, 2])
    y = np.array([3, 7])
    tensors = [x] + [t for _, t in net.params.items()]
    names = ["cifar+cn:input"] + [f"cifar+cn:{n}" for n in net.params]
    res += check_gradients(lambda: F.softmax_cross_entropy(net.forward(x, ids, training=True), y),
                           tensors, names, max_coords=max_coords, seed=seed)
    small = build_convnet(small_convnet_spec(4, 3, 8, (4, 6), norm="mixture:2"), seed)
    xs = Tensor(np.concatenate([rng.normal(-1, 1, (8, 3, 8, 8)), rng.normal(1, 1, (8, 3, 8, 8))]),
                requires_grad=True, name="input")
    for layer_name, layer in small.mixture_layers:
        layer.fit([small.forward(Tensor(xs.data), training=True, upto=layer_name).data], seed, max_iter=50)
    ys = rng.integers(0, 4, size=16)
    tensors = [xs] + [t for _, t in small.params.items()]
    names = ["small+mn:input"] + [f"small+mn:{n}" for n in small.params]
    res += check_gradients(lambda: F.softmax_cross_entropy(small.forward(xs, training=True), ys),
                           tensors, names, max_coords=max_coords, seed=seed)
    return res


def run_scope(scope: str, seed: int = 0) -> list:
    if scope == "op":
        return op_suite(seed)
    if scope == "layer":
        return layer_suite(seed)
    if scope == "model":
        return model_suite(seed)
    raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")


def format_report(results, tol: float = TOLERANCE) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed(tol) else "FAIL"
        if isinstance(r, AnalyticCheck):
            lines.append(f"{status} {r.name}  tape-vs-closed {r.max_err_tape:.3e}  fd-vs-closed {r.max_err_fd:.3e}")
        else:
            lines.append(f"{status} {r.name}  max_rel_error {r.max_rel_error:.3e}  coords {r.n_coords}"
                         + (f"  kinks-pinned {r.n_kinks}" if r.n_kinks else ""))
    return "\n".join(lines)
