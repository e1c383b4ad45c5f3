"""Fully connected autoencoder with hand-written forward, tangent (JVP) and
reverse sweeps, ADAM, and the joint autoencoder + SINDy loss.

Conventions: batches are rows, a layer computes ``a = h @ W.T + b``; hidden
layers use ELU and the output layer is linear. Parameters of one network
live in a single flat buffer with per-layer views, which keeps ADAM a
handful of vector operations.

Loss terms are summed over the batch (no averaging), so the lambda weights
act as absolute weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, NumericalFailure
from .numkit import Rng
from .sindy import Library, LibrarySpec


def elu(a):
    return np.where(a >= 0, a, np.expm1(np.minimum(a, 0.0)))


def elu_d1(a):
    return np.where(a >= 0, 1.0, np.exp(np.minimum(a, 0.0)))


def elu_d2(a):
    return np.where(a >= 0, 0.0, np.exp(np.minimum(a, 0.0)))


def _n_params(dims):
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


class Mlp:
    """Weights and biases of a fully connected network (views into ``flat``)."""

    def __init__(self, layer_dims, flat=None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise InvalidInput(f"invalid layer dims {layer_dims}")
        self.dims = dims
        n = _n_params(dims)
        if flat is None:
            flat = np.zeros(n)
        elif flat.shape != (n,):
            raise InvalidInput(f"flat buffer has {flat.shape}, expected ({n},)")
        self.flat = flat
        self.weights, self.biases = self.views(flat)

    def views(self, flat):
        ws, bs, pos = [], [], 0
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            ws.append(flat[pos:pos + o * i].reshape(o, i))
            pos += o * i
            bs.append(flat[pos:pos + o])
            pos += o
        return ws, bs

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def size(self):
        return self.flat.size

    def copy(self):
        return Mlp(self.dims, self.flat.copy())

    def to_dict(self):
        return {"layer_dims": self.dims, "activation": "elu-hidden/linear-output",
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}


MlpParams = Mlp


def init_mlp(layer_dims, rng: Rng):
    """Xavier-uniform weights, zero biases."""
    net = Mlp(layer_dims)
    for w in net.weights:
        o, i = w.shape
        bound = np.sqrt(6.0 / (i + o))
        w[...] = rng.uniform(-bound, bound, size=(o, i))
    return net


def _check_width(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.dims[0]:
        raise InvalidInput(f"input width {x.shape[1]} != network input {net.dims[0]}")
    return x


def forward(net: Mlp, x):
    """Returns ``(output, cache)``; the cache holds each layer's input and
    pre-activation."""
    h = _check_width(net, x)
    cache = []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w.T + b
        cache.append((h, a))
        h = a if l == last else elu(a)
    return h, cache


def forward_tangent(net: Mlp, x, v):
    """Primal output, tangent output ``J(x) v`` and cache for :func:`backward_tangent`."""
    h = _check_width(net, x)
    dh = np.asarray(v, dtype=np.float64).reshape(h.shape)
    cache = []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w.T + b
        da = dh @ w.T
        cache.append((h, dh, a, da))
        if l == last:
            h, dh = a, da
        else:
            h, dh = elu(a), elu_d1(a) * da
    return h, dh, cache


def backward(net: Mlp, cache, g_out, grad=None):
    """Reverse sweep of :func:`forward`. Writes parameter gradients into
    ``grad`` (a flat buffer shaped like ``net.flat``) and returns ``(grad, g_x)``."""
    grad = np.zeros(net.size) if grad is None else grad
    gws, gbs = net.views(grad)
    g = g_out
    last = net.n_layers - 1
    for l in range(last, -1, -1):
        h, a = cache[l]
        g_a = g if l == last else g * elu_d1(a)
        gws[l][...] = g_a.T @ h
        gbs[l][...] = g_a.sum(axis=0)
        g = g_a @ net.weights[l]
    return grad, g


def backward_tangent(net: Mlp, cache, g_out, g_dout, grad=None):
    """Reverse sweep through the primal and tangent streams of
    :func:`forward_tangent`.

    Returns ``(grad, g_x, g_v)``: parameter gradient, adjoint of the primal
    input and adjoint of the tangent input.
    """
    grad = np.zeros(net.size) if grad is None else grad
    gws, gbs = net.views(grad)
    g, gd = g_out, g_dout
    last = net.n_layers - 1
    for l in range(last, -1, -1):
        h, dh, a, da = cache[l]
        if l == last:
            g_a, g_da = g, gd
        else:
            s1 = elu_d1(a)
            g_a = g * s1 + gd * elu_d2(a) * da
            g_da = gd * s1
        gws[l][...] = g_a.T @ h + g_da.T @ dh
        gbs[l][...] = g_a.sum(axis=0)
        w = net.weights[l]
        g, gd = g_a @ w, g_da @ w
    return grad, g, gd


def encode(enc: Mlp, x):
    return forward(enc, x)[0]


def decode(dec: Mlp, z):
    return forward(dec, z)[0]


def jvp(net: Mlp, x, v):
    """Exact Jacobian-vector product of the network at ``x`` along ``v`` (row-wise)."""
    x = _check_width(net, x)
    v = np.asarray(v, dtype=np.float64)
    if v.reshape(-1).size != x.size:
        raise InvalidInput(f"tangent shape {v.shape} does not match input {x.shape}")
    return forward_tangent(net, x, v)[1]


def vjp(net: Mlp, x, w):
    """Transpose product ``J(x)^T w`` via the reverse sweep."""
    out, cache = forward(net, x)
    return backward(net, cache, np.asarray(w, dtype=np.float64).reshape(out.shape))[1]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidInput("loss weights must be nonnegative")

    def to_dict(self):
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "lambda3": self.lambda3}


@dataclass
class LossParts:
    autoencoder: float
    sindy: float
    l1: float
    consistency: float

    @property
    def total(self):
        return self.autoencoder + self.sindy + self.l1 + self.consistency


def joint_loss_and_grads(x, xdot, mu, enc: Mlp, dec: Mlp, xi, lib, weights: LossWeights,
                         g_enc=None, g_dec=None, g_xi=None):
    """Joint loss and its gradients.

    ``loss = |x - psi(phi(x))|^2 + l1 |zdot - Theta(z;mu) Xi|^2 + l2 |Xi|_1
    + l3 |xdot - dpsi/dz(z) Theta(z;mu) Xi|^2`` with ``z = phi(x)`` and
    ``zdot = dphi/dx(x) xdot``. All squared norms are summed over the batch.
    The l1 subgradient at zero is zero.

    Returns ``(loss, (g_enc, g_dec, g_xi), parts)``.
    """
    if isinstance(lib, LibrarySpec):
        lib = Library(lib)
    x = np.asarray(x, dtype=np.float64)
    xdot = np.asarray(xdot, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInput("batch must be a nonempty 2-D array")
    if xdot.shape != x.shape:
        raise InvalidInput("xdot must match x in shape")
    l1, l2, l3 = weights.lambda1, weights.lambda2, weights.lambda3
    use_dyn = l1 > 0 or l3 > 0

    if use_dyn:
        z, zdot, enc_cache = forward_tangent(enc, x, xdot)
        theta, dtheta = lib.evaluate_with_grad(z, mu)
        f = theta @ xi
    else:
        z, enc_cache = forward(enc, x)
    if l3 > 0:
        xr, xdot_pred, dec_cache = forward_tangent(dec, z, f)
    else:
        xr, dec_cache = forward(dec, z)

    r_ae = xr - x
    parts = LossParts(float(np.sum(r_ae * r_ae)), 0.0, float(l2 * np.abs(xi).sum()), 0.0)
    if l1 > 0:
        r_s = zdot - f
        parts.sindy = float(l1 * np.sum(r_s * r_s))
    if l3 > 0:
        r_c = xdot - xdot_pred
        parts.consistency = float(l3 * np.sum(r_c * r_c))
    for name in ("autoencoder", "sindy", "l1", "consistency"):
        if not np.isfinite(getattr(parts, name)):
            raise NumericalFailure(f"non-finite {name} loss term", term=name)

    if l3 > 0:
        g_dec, g_z, g_f = backward_tangent(dec, dec_cache, 2.0 * r_ae, -2.0 * l3 * r_c, g_dec)
    else:
        g_dec, g_z = backward(dec, dec_cache, 2.0 * r_ae, g_dec)
        g_f = np.zeros((x.shape[0], xi.shape[1])) if use_dyn else None

    g_xi = np.zeros_like(xi) if g_xi is None else g_xi
    if use_dyn:
        if l1 > 0:
            g_f = g_f - 2.0 * l1 * r_s
            g_zdot = 2.0 * l1 * r_s
        else:
            g_zdot = np.zeros_like(zdot)
        g_xi[...] = theta.T @ g_f
        g_theta = g_f @ xi.T
        g_z = g_z + np.einsum("jbr,br->bj", dtheta, g_theta)
        g_enc, _, _ = backward_tangent(enc, enc_cache, g_z, g_zdot, g_enc)
    else:
        g_xi[...] = 0.0
        g_enc, _ = backward(enc, enc_cache, g_z, g_enc)
    if l2 > 0:
        g_xi += l2 * np.sign(xi)
    return parts.total, (g_enc, g_dec, g_xi), parts


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params, grads, lr):
    """In-place bias-corrected ADAM update of the flat ``params`` vector."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidInput("ADAM state, parameters and gradients must share a shape")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    params -= (lr / c1) * state.m / (np.sqrt(state.v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidInput("epochs >= 1, batch_size >= 1 and learning_rate > 0 required")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainResult:
    encoder: Mlp
    decoder: Mlp
    xi: np.ndarray
    history: list = field(default_factory=list)
    steps: int = 0


class TrainingFailure(NumericalFailure):
    """Numerical failure during training; ``checkpoint`` is the last good
    :class:`TrainResult` (parameters at the start of the failing epoch)."""

    def __init__(self, message, term, checkpoint):
        super().__init__(message, term)
        self.checkpoint = checkpoint


def train(dataset, enc_dims, dec_dims, spec: LibrarySpec, weights: LossWeights,
          config: TrainConfig, callback=None, init=None):
    """Mini-batch ADAM on the joint loss over all stacked rows.

    ``dataset`` is ``(x, xdot, mu)`` with one row per sample. ``callback``
    (if given) receives ``(epoch, loss)`` after every epoch. ``init`` may hold
    ``(encoder, decoder, xi)`` to start from instead of a fresh Xavier draw.
    """
    x, xdot, mu = (np.asarray(a, dtype=np.float64) for a in dataset)
    n_rows = x.shape[0]
    if n_rows == 0:
        raise InvalidInput("training set is empty")
    mu = np.broadcast_to(mu, (n_rows,)).copy()
    if enc_dims[-1] != dec_dims[0] or enc_dims[0] != dec_dims[-1]:
        raise InvalidInput("encoder and decoder dimensions do not chain")
    if spec.state_dim != enc_dims[-1]:
        raise InvalidInput("library state_dim must equal the latent dimension")
    rng = Rng(config.seed)
    ne, nd = _n_params(enc_dims), _n_params(dec_dims)
    nx = spec.n_terms * spec.state_dim
    buf = np.zeros(ne + nd + nx)
    enc = Mlp(enc_dims, buf[:ne])
    dec = Mlp(dec_dims, buf[ne:ne + nd])
    xi = buf[ne + nd:].reshape(spec.n_terms, spec.state_dim)
    if init is None:
        e0, d0 = init_mlp(enc_dims, rng), init_mlp(dec_dims, rng)
        enc.flat[...] = e0.flat
        dec.flat[...] = d0.flat
    else:
        enc.flat[...] = init[0].flat
        dec.flat[...] = init[1].flat
        xi[...] = init[2]
    grad = np.zeros_like(buf)
    g_enc, g_dec = grad[:ne], grad[ne:ne + nd]
    g_xi = grad[ne + nd:].reshape(xi.shape)
    lib = Library(spec)
    adam = AdamState.zeros(buf.size)
    history = []
    bs = config.batch_size
    for epoch in range(config.epochs):
        good = buf.copy()
        order = rng.permutation(n_rows) if config.shuffle else np.arange(n_rows)
        total = 0.0
        for start in range(0, n_rows, bs):
            idx = order[start:start + bs]
            try:
                loss, _, _ = joint_loss_and_grads(x[idx], xdot[idx], mu[idx], enc, dec, xi, lib,
                                                  weights, g_enc, g_dec, g_xi)
            except NumericalFailure as exc:
                ck = TrainResult(Mlp(enc_dims, good[:ne].copy()), Mlp(dec_dims, good[ne:ne + nd].copy()),
                                 good[ne + nd:].reshape(xi.shape).copy(), history, adam.step)
                raise TrainingFailure(str(exc), exc.term, ck) from exc
            total += loss
            adam_step(adam, buf, grad, config.learning_rate)
        history.append(total)
        if callback is not None:
            callback(epoch, total)
    return TrainResult(Mlp(enc_dims, buf[:ne].copy()), Mlp(dec_dims, buf[ne:ne + nd].copy()),
                       xi.copy(), history, adam.step)
