"""Dense Q-networks in plain numpy.

A network is a relu trunk followed by either a single linear Q head or a
pair of linear value/advantage heads combined as

    Q(s, a) = V(s) + (A(s, a) - max_b A(s, b))

The subtraction is grouped so that ``max_a Q(s, a) == V(s)`` holds bit-exactly.
Parameters are float64 and laid out as ``[W0, b0, W1, b1, ..., heads]`` with
weights stored ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"ORLW"
CHECKPOINT_VERSION = 1

ROLE_CODES = {"scalarized": 0, "rev": 1, "eng": 2}
ROLE_NAMES = {v: k for k, v in ROLE_CODES.items()}


class NonFiniteOutputError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


class MlpNet:
    """Feed-forward Q-network with an optional dueling head."""

    def __init__(self, in_dim, hidden=(64, 64), n_actions=2, dueling=True, rng=None):
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_actions = int(n_actions)
        self.dueling = bool(dueling)
        rng = np.random.default_rng(rng)

        widths = (self.in_dim,) + self.hidden
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            params += [_glorot(rng, fan_in, fan_out), np.zeros(fan_out)]
        trunk_out = widths[-1]
        if self.dueling:
            params += [_glorot(rng, trunk_out, 1), np.zeros(1)]
            params += [_glorot(rng, trunk_out, self.n_actions), np.zeros(self.n_actions)]
        else:
            params += [_glorot(rng, trunk_out, self.n_actions), np.zeros(self.n_actions)]
        self._bind(np.concatenate([p.ravel() for p in params]))

    def _bind(self, flat):
        """Point ``params`` at views into one contiguous buffer."""
        self.flat = flat
        self.params = []
        shapes = self._shapes()
        pos = 0
        for shape in shapes:
            n = int(np.prod(shape))
            self.params.append(flat[pos:pos + n].reshape(shape))
            pos += n
        self._cache = None

    def _shapes(self):
        widths = (self.in_dim,) + self.hidden
        shapes = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        if self.dueling:
            shapes += [(widths[-1], 1), (1,)]
        shapes += [(widths[-1], self.n_actions), (self.n_actions,)]
        return shapes

    # -- structure -------------------------------------------------------
    @property
    def n_trunk(self) -> int:
        return len(self.hidden)

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.in_dim,) + self.hidden + (self.n_actions,)

    def n_parameters(self) -> int:
        return int(self.flat.size)

    def value_head(self):
        """Return ``(W_v, b_v)``; only defined for dueling nets."""
        if not self.dueling:
            raise ValueError("network has no value head")
        k = 2 * self.n_trunk
        return self.params[k], self.params[k + 1]

    def copy(self) -> "MlpNet":
        twin = object.__new__(MlpNet)
        twin.in_dim, twin.hidden = self.in_dim, self.hidden
        twin.n_actions, twin.dueling = self.n_actions, self.dueling
        twin._bind(self.flat.copy())
        return twin

    def set_params(self, params) -> None:
        if len(params) != len(self.params):
            raise ValueError("parameter list length mismatch")
        for old, new in zip(self.params, params):
            if old.shape != np.shape(new):
                raise ValueError(f"parameter shape mismatch {old.shape} vs {np.shape(new)}")
        for old, new in zip(self.params, params):
            old[...] = new

    # -- passes ----------------------------------------------------------
    def forward(self, states, cache=True):
        """Return ``(q, v, a)``; ``v`` and ``a`` are None for plain nets."""
        x = np.asarray(states, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        acts = [x]
        h = x
        for i in range(self.n_trunk):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            np.maximum(h, 0.0, out=h)
            acts.append(h)
        k = 2 * self.n_trunk
        if self.dueling:
            v = (h @ self.params[k] + self.params[k + 1])[:, 0]
            a = h @ self.params[k + 2] + self.params[k + 3]
            amax_idx = np.argmax(a, axis=1)
            amax = a[np.arange(len(a)), amax_idx]
            q = v[:, None] + (a - amax[:, None])
        else:
            q = h @ self.params[k] + self.params[k + 1]
            v = a = amax_idx = None
        if not np.all(np.isfinite(q)):
            raise NonFiniteOutputError("non-finite Q-values in forward pass")
        if cache:
            self._cache = (acts, amax_idx)
        return q, v, a

    def predict(self, states) -> np.ndarray:
        return self.forward(states, cache=False)[0]

    def backward(self, dq):
        """Reverse-mode gradients of a scalar loss given ``dL/dQ``.

        Uses the activations cached by the last ``forward`` call. The max in
        the dueling head routes gradient to the advantage argmax. The result
        is a flat vector aligned with ``self.flat``.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        acts, amax_idx = self._cache
        dq = np.asarray(dq, dtype=np.float64)
        h = acts[-1]
        if dq.shape != (h.shape[0], self.n_actions):
            raise ValueError(f"loss gradient has shape {dq.shape}, expected {(h.shape[0], self.n_actions)}")
        k = 2 * self.n_trunk
        flat = np.empty_like(self.flat)
        grads = []
        pos = 0
        for p in self.params:
            grads.append(flat[pos:pos + p.size].reshape(p.shape))
            pos += p.size
        if self.dueling:
            dv = dq.sum(axis=1)
            da = dq.copy()
            da[np.arange(len(da)), amax_idx] -= dv
            np.matmul(h.T, dv[:, None], out=grads[k])
            grads[k + 1][0] = dv.sum()
            np.matmul(h.T, da, out=grads[k + 2])
            grads[k + 3][:] = da.sum(axis=0)
            dh = dv[:, None] @ self.params[k].T + da @ self.params[k + 2].T
        else:
            np.matmul(h.T, dq, out=grads[k])
            grads[k + 1][:] = dq.sum(axis=0)
            dh = dq @ self.params[k].T
        for i in reversed(range(self.n_trunk)):
            dh = dh * (acts[i + 1] > 0.0)
            np.matmul(acts[i].T, dh, out=grads[2 * i])
            grads[2 * i + 1][:] = dh.sum(axis=0)
            if i > 0:
                dh = dh @ self.params[2 * i].T
        return flat

    # -- regularization --------------------------------------------------
    def weight_norm(self, mode: str = "last-layer") -> float:
        """Euclidean norm used by the robust TD penalty.

        ``last-layer``: value-head weights without its bias.
        ``all-but-bias``: every value-path parameter except the value-head bias.
        """
        w_v, _ = self.value_head()
        if mode == "last-layer":
            return float(np.sqrt(np.sum(w_v * w_v)))
        if mode == "all-but-bias":
            total = float(np.sum(w_v * w_v))
            for p in self.params[: 2 * self.n_trunk]:
                total += float(np.sum(p * p))
            return float(np.sqrt(total))
        raise ValueError(f"unknown regularization mode {mode!r}")


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def clip_by_global_norm(grad, max_norm):
    """Rescale a flat gradient in place so its norm is at most ``max_norm``."""
    if max_norm is None:
        return grad
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        grad *= max_norm / norm
    return grad


# ---------------------------------------------------------------------------
# learning-rate schedule and optimizers


def lr_step(old_lr: float, total_steps: int, max_train_steps: int) -> float:
    """One application of ``0.1*OLD + 0.9*OLD*(1 - total_steps/max_train_steps)``."""
    if total_steps > max_train_steps:
        raise ValueError("total_steps exceeds max_train_steps")
    return 0.1 * old_lr + 0.9 * old_lr * (1.0 - total_steps / max_train_steps)


@dataclass
class LrSchedule:
    """Decaying learning rate.

    ``anchor="initial"`` evaluates the rule with OLD_LR fixed at the initial
    rate (linear decay to 10%). ``anchor="recurrent"`` feeds each result back
    in as OLD_LR. ``every`` is the update cadence in gradient steps.
    """

    initial_lr: float = 1e-4
    max_train_steps: int = 100_000
    every: int = 1
    anchor: str = "initial"
    current_lr: float = field(init=False)

    def __post_init__(self):
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be non-negative")
        if self.anchor not in ("initial", "recurrent"):
            raise ValueError(f"unknown anchor {self.anchor!r}")
        self.current_lr = self.initial_lr

    def update(self, total_steps: int) -> float:
        total_steps = min(total_steps, self.max_train_steps)
        if total_steps % self.every == 0:
            old = self.initial_lr if self.anchor == "initial" else self.current_lr
            self.current_lr = lr_step(old, total_steps, self.max_train_steps)
        return self.current_lr


class Sgd:
    """Plain (optionally heavy-ball) SGD on a flat parameter vector."""

    def __init__(self, size, momentum=0.0):
        self.momentum = momentum
        self.velocity = np.zeros(size) if momentum else None

    def step(self, flat, grad, lr):
        if lr == 0.0:
            return
        if self.velocity is None:
            flat -= lr * grad
            return
        self.velocity *= self.momentum
        self.velocity += grad
        flat -= lr * self.velocity


class Adam:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat, grad, lr):
        if lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        flat -= (lr * corr) * self.m / (np.sqrt(self.v) + self.eps)


def make_optimizer(name, size, momentum=0.0):
    if name == "sgd":
        return Sgd(size, momentum=momentum)
    if name == "adam":
        return Adam(size)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# checkpoint files
#
# A checkpoint is one or more records back to back. Each record:
#   magic "ORLW", version u32, n_widths u32, widths u32[n_widths],
#   dueling u8, role u8, has_norm u8, pad u8,
#   parameters f64 in layer order (trunk, value head, advantage head), row-major,
#   if has_norm: mean f64[in_dim], std f64[in_dim]
# All integers and floats are little-endian.


@dataclass
class NetRecord:
    net: MlpNet
    role: str = "scalarized"
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None


def write_checkpoint(path, records) -> None:
    buf = io.BytesIO()
    for rec in records:
        net = rec.net
        widths = net.layer_widths
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(widths)))
        buf.write(struct.pack(f"<{len(widths)}I", *widths))
        has_norm = rec.norm_mean is not None
        buf.write(struct.pack("<BBBB", int(net.dueling), ROLE_CODES[rec.role], int(has_norm), 0))
        for p in net.params:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        if has_norm:
            buf.write(np.asarray(rec.norm_mean, dtype="<f8").tobytes())
            buf.write(np.asarray(rec.norm_std, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> list[NetRecord]:
    with open(path, "rb") as fh:
        data = fh.read()
    records, pos = [], 0
    while pos < len(data):
        if data[pos:pos + 4] != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic at byte {pos}")
        version, n_widths = struct.unpack_from("<II", data, pos + 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += 12
        widths = struct.unpack_from(f"<{n_widths}I", data, pos)
        pos += 4 * n_widths
        dueling, role, has_norm, _ = struct.unpack_from("<BBBB", data, pos)
        pos += 4
        net = MlpNet(widths[0], widths[1:-1], widths[-1], dueling=bool(dueling), rng=0)
        params = []
        for p in net.params:
            nbytes = 8 * p.size
            arr = np.frombuffer(data, dtype="<f8", count=p.size, offset=pos).reshape(p.shape)
            params.append(arr.astype(np.float64))
            pos += nbytes
        net.set_params(params)
        mean = std = None
        if has_norm:
            mean = np.frombuffer(data, dtype="<f8", count=widths[0], offset=pos).astype(np.float64)
            pos += 8 * widths[0]
            std = np.frombuffer(data, dtype="<f8", count=widths[0], offset=pos).astype(np.float64)
            pos += 8 * widths[0]
        records.append(NetRecord(net, ROLE_NAMES[role], mean, std))
    return records
