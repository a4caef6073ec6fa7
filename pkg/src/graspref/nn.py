"""Dense networks with hand-written reverse mode, a hypernetwork and optimizers.

Parameters of a network with layer sizes ``[n0, n1, ..., nL]`` live in one flat
vector: for each layer the weight matrix ``W (n_out, n_in)`` in row-major order
followed by the bias ``b (n_out,)``.  Hidden layers use a leaky rectifier
(slope 0.01); the output layer is linear.

The ``*_flat`` functions accept either one parameter vector ``(P,)`` with
inputs ``(N, n0)`` or a batch of parameter vectors ``(B, P)`` with inputs
``(B, N, n0)`` (one network per batch row, as produced by a hypernetwork).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, ShapeMismatch
from .geometry import LossWeights

LEAK = 0.01


def n_params(sizes):
    return int(sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:])))


def _split(sizes, theta):
    out, off = [], 0
    lead = theta.shape[:-1]
    for i, o in zip(sizes[:-1], sizes[1:]):
        W = theta[..., off:off + o * i].reshape(lead + (o, i))
        off += o * i
        b = theta[..., off:off + o]
        off += o
        out.append((W, b))
    return out


def forward_flat(sizes, theta, x, return_cache=False):
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    if theta.shape[-1] != n_params(sizes):
        raise ShapeMismatch(f"expected {n_params(sizes)} parameters, got {theta.shape[-1]}")
    if x.shape[-1] != sizes[0]:
        raise ShapeMismatch(f"expected input size {sizes[0]}, got {x.shape[-1]}")
    layers = _split(sizes, theta)
    h = x
    cache = [x]
    for k, (W, b) in enumerate(layers):
        z = np.matmul(h, np.swapaxes(W, -1, -2)) + b[..., None, :] if theta.ndim == 2 else h @ W.T + b
        if k < len(layers) - 1:
            cache.append(z)
            h = np.where(z > 0, z, LEAK * z)
        else:
            h = z
    if return_cache:
        return h, cache
    return h


def backward_flat(sizes, theta, x, upstream, cache=None):
    """Reverse-mode gradients ``(d theta, d x)`` of ``sum(upstream * forward(x))``.

    Parameter gradients are summed over the point axis (and kept per batch row
    when ``theta`` is batched).
    """
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if cache is None:
        out, cache = forward_flat(sizes, theta, x, return_cache=True)
    else:
        out = None
    if out is not None and upstream.shape != out.shape:
        raise ShapeMismatch(f"upstream gradient shape {upstream.shape} != output shape {out.shape}")
    layers = _split(sizes, theta)
    grads = []
    dz = upstream
    batched = theta.ndim == 2
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k == 0:
            h_prev = cache[0]
        else:
            zp = cache[k]
            h_prev = np.where(zp > 0, zp, LEAK * zp)
        if batched:
            dW = np.matmul(np.swapaxes(dz, -1, -2), h_prev)
            db = dz.sum(axis=-2)
        else:
            dz2 = dz.reshape(-1, dz.shape[-1])
            hp2 = h_prev.reshape(-1, h_prev.shape[-1])
            dW = dz2.T @ hp2
            db = dz2.sum(axis=0)
        grads.append((dW, db))
        dh = np.matmul(dz, W)
        if k > 0:
            zp = cache[k]
            dz = np.where(zp > 0, dh, LEAK * dh)
        else:
            dx = dh
    lead = theta.shape[:-1]
    flat = []
    for dW, db in reversed(grads):
        flat.append(dW.reshape(lead + (-1,)))
        flat.append(db.reshape(lead + (-1,)))
    return np.concatenate(flat, axis=-1), dx


def init_params(sizes, rng, out_scale=1.0):
    """He-style initialisation; the output layer is scaled by ``out_scale``."""
    parts = []
    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.normal(0.0, np.sqrt(2.0 / i), size=(o, i))
        if k == len(sizes) - 2:
            W *= out_scale
        parts.append(W.reshape(-1))
        parts.append(np.zeros(o))
    return np.concatenate(parts)


class Mlp:
    """Fixed-topology dense network owning one flat parameter vector."""

    def __init__(self, layer_sizes, params=None, seed=None, out_scale=1.0):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError("an MLP needs at least an input and an output layer")
        if params is None:
            params = init_params(self.layer_sizes, np.random.default_rng(seed), out_scale)
        params = np.array(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params

    @property
    def n_params(self):
        return n_params(self.layer_sizes)

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def layers(self):
        return _split(self.layer_sizes, self.params)

    def flatten(self):
        return self.params.copy()

    @classmethod
    def unflatten(cls, layer_sizes, theta):
        return cls(layer_sizes, params=theta)

    def copy(self):
        return Mlp(self.layer_sizes, self.params.copy())


@dataclass
class HyperNet:
    """An MLP whose output is the parameter vector of a template MLP."""

    mlp: Mlp
    template: list

    def __post_init__(self):
        self.template = [int(s) for s in self.template]
        if self.mlp.n_out != n_params(self.template):
            raise ShapeMismatch(f"hypernet emits {self.mlp.n_out} values, template needs {n_params(self.template)}")

    @classmethod
    def build(cls, obs_dim, template, hidden=(256, 256), seed=None, out_scale=1e-2, base_scale=0.0):
        """``base_scale > 0`` seeds the output bias with an initialised template network,
        so the emitted weights start as that base network plus a small observation term."""
        sizes = [obs_dim, *hidden, n_params(template)]
        rng = np.random.default_rng(seed)
        mlp = Mlp(sizes, params=init_params(sizes, rng, out_scale))
        if base_scale > 0:
            mlp.params[-n_params(template):] = init_params(template, rng, base_scale)
        return cls(mlp, list(template))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    domain_samples: int = 512
    optimizer: str = "adam"
    momentum: float = 0.0
    # "mean" or "sum" over the items of a batch
    reduction: str = "mean"
    # decoupled weight decay applied before each step
    weight_decay: float = 0.0
    # learning rate at epoch e is learning_rate * lr_decay**e
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("batch_size", "epochs", "domain_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")


def _as_batch(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise ShapeMismatch(f"expected trailing dimension {n}, got {x.shape}")
    return x


def forward(net: Mlp, x):
    x = _as_batch(x, net.n_in)
    if x.ndim == 1:
        return forward_flat(net.layer_sizes, net.params, x[None, :])[0]
    return forward_flat(net.layer_sizes, net.params, x)


def backward(net: Mlp, x, upstream_grad):
    """``(param_grad, input_grad)`` for the scalar ``sum(upstream_grad * forward(net, x))``."""
    x = _as_batch(x, net.n_in)
    g = _as_batch(upstream_grad, net.n_out)
    single = x.ndim == 1
    if single:
        x, g = x[None, :], g[None, :]
    if g.shape[:-1] != x.shape[:-1]:
        raise ShapeMismatch("upstream gradient batch does not match input batch")
    pg, dx = backward_flat(net.layer_sizes, net.params, x, g)
    return pg, (dx[0] if single else dx)


def hyper_forward(h: HyperNet, obs, x):
    theta = forward(h.mlp, obs)
    x = _as_batch(x, h.template[0])
    if x.ndim == 1:
        return forward_flat(h.template, theta, x[None, :])[0]
    return forward_flat(h.template, theta, x)


def hyper_backward(h: HyperNet, obs, x, upstream_grad):
    """Gradient of ``sum(upstream * hyper_forward(h, obs, x))`` w.r.t. hypernet params and ``x``."""
    theta = forward(h.mlp, obs)
    x = _as_batch(x, h.template[0])
    g = _as_batch(upstream_grad, h.template[-1])
    if x.ndim == 1:
        x, g = x[None, :], g[None, :]
    dtheta, dx = backward_flat(h.template, theta, x, g)
    pg, _ = backward(h.mlp, obs, dtheta)
    return pg, dx


def sgd_step(params, grad, cfg: TrainConfig, velocity=None, lr=None):
    """``params - lr * grad``; with ``cfg.momentum > 0`` the velocity buffer is updated in place."""
    lr = cfg.learning_rate if lr is None else lr
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ShapeMismatch(f"params {params.shape} and grad {grad.shape} differ")
    if cfg.momentum > 0:
        if velocity is None:
            raise ValueError("momentum needs a velocity buffer")
        velocity *= cfg.momentum
        velocity += grad
        return params - lr * velocity
    return params - lr * grad


class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        if params.shape != grad.shape:
            raise ShapeMismatch(f"params {params.shape} and grad {grad.shape} differ")
        self.t += 1
        # in place: these vectors can hold millions of entries
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        buf = np.multiply(grad, grad)
        buf *= 1 - self.beta2
        self.v += buf
        np.divide(self.v, 1 - self.beta2 ** self.t, out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= self.lr / (1 - self.beta1 ** self.t)
        return params - buf

    def state(self):
        return {"m": self.m, "v": self.v}, {"t": self.t}


class Optimizer:
    """Dispatches to Adam or (momentum) SGD according to a TrainConfig."""

    def __init__(self, n, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.adam = Adam(n, cfg.learning_rate) if cfg.optimizer == "adam" else None
        self.velocity = np.zeros(n) if cfg.momentum > 0 else None

    def set_epoch(self, epoch):
        """Apply the per-epoch decay; depends only on the absolute epoch, so resuming is exact."""
        self.lr = self.cfg.learning_rate * self.cfg.lr_decay ** epoch
        if self.adam is not None:
            self.adam.lr = self.lr

    def step(self, params, grad):
        if self.lr == 0:
            return params
        if self.cfg.weight_decay > 0:
            params = params * (1.0 - self.lr * self.cfg.weight_decay)
        if self.adam is not None:
            return self.adam.step(params, grad)
        return sgd_step(params, grad, self.cfg, self.velocity, self.lr)

    def export(self):
        if self.adam is not None:
            return {"opt_m": self.adam.m, "opt_v": self.adam.v}, {"opt_t": self.adam.t}
        if self.velocity is not None:
            return {"opt_vel": self.velocity}, {}
        return {}, {}

    def restore(self, vectors, header):
        if self.adam is not None and "opt_m" in vectors:
            self.adam.m = np.array(vectors["opt_m"])
            self.adam.v = np.array(vectors["opt_v"])
            self.adam.t = int(header.get("opt_t", 0))
        elif self.velocity is not None and "opt_vel" in vectors:
            self.velocity = np.array(vectors["opt_vel"])


# -- checkpoint format --------------------------------------------------------------
#
#   magic    b"GRNN"
#   u16      format version (1)
#   u16      reserved (0)
#   u32      header length H
#   H bytes  UTF-8 JSON header (sorted keys): "kind", topology fields and a
#            "vectors" list of [name, length] pairs in storage order
#   f64[]    little-endian parameter vectors, concatenated in header order
#   u32      CRC-32 of every preceding byte

CKPT_MAGIC = b"GRNN"
CKPT_VERSION = 1


def save_checkpoint(path, kind, header, vectors):
    names = list(vectors)
    head = dict(header)
    head["kind"] = kind
    head["vectors"] = [[n, int(np.asarray(vectors[n]).size)] for n in names]
    hbytes = json.dumps(head, sort_keys=True).encode("utf-8")
    blob = CKPT_MAGIC + struct.pack("<HHI", CKPT_VERSION, 0, len(hbytes)) + hbytes
    blob += b"".join(np.asarray(vectors[n], dtype="<f8").reshape(-1).tobytes() for n in names)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, _, hlen = struct.unpack_from("<HHI", blob, 4)
    if version != CKPT_VERSION:
        raise ChecksumError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    vectors = {}
    for name, length in header["vectors"]:
        vectors[name] = np.frombuffer(blob, dtype="<f8", count=length, offset=off).astype(float)
        off += 8 * length
    if off != len(blob) - 4:
        raise ChecksumError(f"{path}: trailing bytes after parameter block")
    return header.pop("kind"), header, vectors
