"""Per-vehicle dueling double DQN agents in plain numpy.

Network parameters live in one flat float64 vector; per-layer weight and
bias arrays are reshaped views into it, so copies, syncs and serialisation
all act on a single array.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np


class ShapeError(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


@dataclass
class Hyperparams:
    learning_rate: float = 1e-3
    discount_gamma: float = 0.95
    batch_size: int = 32
    target_update_interval: int = 200
    tau0: float = 1.0
    tau_min: float = 0.05
    tau_decay: float = 0.999
    buffer_capacity: int = 20000
    train_every: int = 1
    grad_clip_norm: float = 1000.0
    optimizer: str = "sgd"
    hidden: tuple = (64, 64)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.discount_gamma < 1:
            raise ValueError("discount_gamma must lie in (0, 1)")
        if not 0 < self.tau_min <= self.tau0:
            raise ValueError("need 0 < tau_min <= tau0")
        if not 0 < self.tau_decay <= 1:
            raise ValueError("tau_decay must lie in (0, 1]")
        for name in ("learning_rate", "batch_size", "target_update_interval",
                     "buffer_capacity", "train_every", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def dueling_aggregate(value, advantage):
    """Q = V + (A - mean_a A), broadcasting V over the action axis."""
    advantage = np.asarray(advantage, dtype=float)
    return np.asarray(value, dtype=float) + advantage - advantage.mean(axis=-1, keepdims=True)


class DuelingQNet:
    """MLP trunk with rectifier hidden layers and linear value/advantage heads."""

    def __init__(self, n_inputs, n_actions, hidden=(64, 64), activation="relu", params=None):
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.n_inputs = int(n_inputs)
        self.n_actions = int(n_actions)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        sizes = [self.n_inputs, *self.hidden]
        self._shapes = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self._shapes += [(a, b), (b,)]
        top = sizes[-1]
        self._shapes += [(top, 1), (1,), (top, self.n_actions), (self.n_actions,)]
        self.size = sum(math.prod(s) for s in self._shapes)
        if params is None:
            params = np.zeros(self.size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.size,):
            raise ShapeError(f"expected {self.size} parameters, got {params.shape}")
        self.params = params
        self._bind()

    def _bind(self):
        views, offset = [], 0
        for shape in self._shapes:
            n = math.prod(shape)
            views.append(self.params[offset:offset + n].reshape(shape))
            offset += n
        nh = len(self.hidden)
        self.layers = [(views[2 * i], views[2 * i + 1]) for i in range(nh)]
        self.Wv, self.bv, self.Wa, self.ba = views[2 * nh:]

    @property
    def arch(self):
        return {"n_inputs": self.n_inputs, "n_actions": self.n_actions,
                "hidden": list(self.hidden), "activation": self.activation}

    def init_params(self, rng):
        """Uniform fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        offset = 0
        for shape in self._shapes:
            n = math.prod(shape)
            fan_in = shape[0] if len(shape) == 2 else None
            if fan_in is None:
                # bias: same bound as the preceding weight matrix
                fan_in = prev_fan_in
            bound = 1.0 / math.sqrt(fan_in)
            self.params[offset:offset + n] = rng.uniform(-bound, bound, n)
            prev_fan_in = fan_in
            offset += n
        return self

    def copy(self):
        return DuelingQNet(self.n_inputs, self.n_actions, self.hidden, self.activation,
                           self.params.copy())

    def load_params(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} parameters, got {params.shape}")
        np.copyto(self.params, params)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_inputs:
            raise ShapeError(f"observation has {x.shape[-1]} features, net expects {self.n_inputs}")
        return x

    def heads(self, x):
        """Raw ``(V, A)`` head outputs."""
        h = self._check(x)
        relu = self.activation == "relu"
        for W, b in self.layers:
            h = h @ W + b
            if relu:
                h = np.maximum(h, 0.0)
        return h @ self.Wv + self.bv, h @ self.Wa + self.ba

    def forward(self, x):
        v, a = self.heads(x)
        return v + a - a.mean(axis=-1, keepdims=True)

    def forward_cache(self, x):
        h = self._check(x)
        relu = self.activation == "relu"
        acts = [h]
        for W, b in self.layers:
            h = h @ W + b
            if relu:
                h = np.maximum(h, 0.0)
            acts.append(h)
        v = h @ self.Wv + self.bv
        a = h @ self.Wa + self.ba
        return v + a - a.mean(axis=-1, keepdims=True), acts

    def backward(self, acts, dq):
        """Flat parameter gradient given dLoss/dQ for a cached forward pass."""
        grads = []
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        h = acts[-1]
        head = [h.T @ dv, dv.sum(axis=0), h.T @ da, da.sum(axis=0)]
        dh = dv @ self.Wv.T + da @ self.Wa.T
        relu = self.activation == "relu"
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            if relu:
                dh = dh * (acts[i + 1] > 0.0)
            grads.append(dh.sum(axis=0))
            grads.append(acts[i].T @ dh)
            if i:
                dh = dh @ W.T
        grads.reverse()
        return np.concatenate([g.ravel() for g in grads + head])


def forward_q(net, s):
    return net.forward(s)


def boltzmann_probs(q, tau, mask=None):
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau!r}")
    q = np.asarray(q, dtype=float)
    if mask is not None:
        q = np.where(mask, q, -np.inf)
    z = (q - q.max()) / tau
    p = np.exp(z)
    return p / p.sum()


def act_boltzmann(q, tau, rng, mask=None):
    p = boltzmann_probs(q, tau, mask)
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(p) - 1)


class ReplayBuffer:
    """Fixed-capacity ring of (s, a, r, s') transitions; storage grows on demand."""

    def __init__(self, capacity, obs_dim, initial=256):
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        n = min(self.capacity, initial)
        self.s = np.empty((n, obs_dim))
        self.s2 = np.empty((n, obs_dim))
        self.a = np.empty(n, dtype=np.int64)
        self.r = np.empty(n)
        self.size = 0
        self.head = 0  # next write slot once full

    def __len__(self):
        return self.size

    def _grow(self):
        n = min(self.capacity, 2 * len(self.a))
        for name in ("s", "s2"):
            arr = np.empty((n, self.obs_dim))
            arr[:self.size] = getattr(self, name)[:self.size]
            setattr(self, name, arr)
        for name, dt in (("a", np.int64), ("r", np.float64)):
            arr = np.empty(n, dtype=dt)
            arr[:self.size] = getattr(self, name)[:self.size]
            setattr(self, name, arr)

    def push(self, s, a, r, s2):
        if self.size < self.capacity:
            if self.size == len(self.a):
                self._grow()
            i = self.size
            self.size += 1
        else:
            i = self.head
            self.head = (self.head + 1) % self.capacity
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2

    def sample(self, batch_size, rng):
        idx = rng.integers(self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]

    def items(self):
        """Stored transitions oldest first."""
        order = list(range(self.head, self.size)) + list(range(self.head)) \
            if self.size == self.capacity else list(range(self.size))
        return [(self.s[i].copy(), int(self.a[i]), float(self.r[i]), self.s2[i].copy())
                for i in order]


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def loss_and_grad(net, s, a, y):
    """Mean squared TD error over the batch and its flat parameter gradient."""
    q, acts = net.forward_cache(s)
    n = len(a)
    rows = np.arange(n)
    err = q[rows, a] - y
    dq = np.zeros_like(q)
    dq[rows, a] = 2.0 * err / n
    return float(np.mean(err * err)), net.backward(acts, dq)


def double_dqn_targets(net, target_net, r, s2, gamma):
    a_star = np.argmax(net.forward(s2), axis=1)
    q_eval = target_net.forward(s2)[np.arange(len(a_star)), a_star]
    return r + gamma * q_eval


def train_step(net, target_net, batch, hp, optimizer=None):
    """One double-DQN gradient step on ``batch = (s, a, r, s2)``; returns pre-update loss.

    ``batch=None`` (buffer not yet filled to a batch) is a no-op returning ``None``.
    """
    if batch is None:
        return None
    s, a, r, s2 = batch
    y = double_dqn_targets(net, target_net, np.asarray(r, dtype=float), s2, hp.discount_gamma)
    loss, grad = loss_and_grad(net, s, np.asarray(a), y)
    norm = float(np.sqrt(grad @ grad))
    if norm > hp.grad_clip_norm:
        grad *= hp.grad_clip_norm / norm
    if optimizer is None:
        net.params -= hp.learning_rate * grad
    else:
        optimizer.step(net.params, grad)
    return loss


def sync_target(net, target_net):
    target_net.load_params(net.params)


def gradient_check(net, s, a, y, h=1e-5):
    """Max relative error between backprop and central differences of (Q(s,a) - y)^2."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    a_arr = np.array([a])
    y_arr = np.array([y], dtype=float)
    _, analytic = loss_and_grad(net, s, a_arr, y_arr)

    def loss():
        q = net.forward(s)[0, a]
        return (q - y) ** 2

    numeric = np.empty_like(analytic)
    p = net.params
    for i in range(len(p)):
        orig = p[i]
        step = h * max(1.0, abs(orig))
        p[i] = orig + step
        up = loss()
        p[i] = orig - step
        down = loss()
        p[i] = orig
        numeric[i] = (up - down) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)), analytic, numeric


# -- weight serialisation ---------------------------------------------------

_MAGIC = b"VTWN"
_VERSION = 1


def save_weights(net, target_net=None, fmt="binary"):
    """Serialise online (and optionally target) parameters.

    The binary layout is: magic, u16 version, u32 header length, JSON
    header, little-endian float64 payload, u32 CRC32 of everything before it.
    """
    arrays = [net.params] + ([target_net.params] if target_net is not None else [])
    header = dict(net.arch, version=_VERSION, has_target=target_net is not None)
    if fmt == "json":
        header["params"] = [[float(x) for x in arr] for arr in arrays]
        return json.dumps(header).encode()
    if fmt != "binary":
        raise ValueError(f"unknown weight format {fmt!r}")
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _MAGIC + struct.pack("<HI", _VERSION, len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def _parse(blob):
    if blob[:1] == b"{":
        try:
            header = json.loads(blob)
        except (ValueError, UnicodeDecodeError) as exc:
            raise WeightFormatError(f"corrupt JSON weights: {exc}") from None
        if header.get("version") != _VERSION:
            raise WeightFormatError(f"unsupported weight version {header.get('version')!r}")
        arrays = [np.array(p, dtype=np.float64) for p in header.pop("params")]
        return header, arrays
    if len(blob) < 14 or blob[:4] != _MAGIC:
        raise WeightFormatError("not a weight stream (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFormatError("weight stream checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<HI", body[4:10])
    if version != _VERSION:
        raise WeightFormatError(f"unsupported weight version {version}")
    header = json.loads(body[10:10 + hlen])
    flat = np.frombuffer(body[10 + hlen:], dtype="<f8").astype(np.float64)
    n = 2 if header["has_target"] else 1
    if flat.size % n:
        raise WeightFormatError("payload length inconsistent with header")
    return header, np.split(flat, n)


def load_weights(blob, like=None):
    """Decode a weight stream into ``(net, target_net_or_None)``.

    With ``like`` given, the stored architecture must match it exactly.
    """
    header, arrays = _parse(bytes(blob))
    arch = {k: header[k] for k in ("n_inputs", "n_actions", "hidden", "activation")}
    if like is not None and arch != like.arch:
        raise ShapeError(f"architecture mismatch: stored {arch}, expected {like.arch}")
    try:
        nets = [DuelingQNet(arch["n_inputs"], arch["n_actions"], arch["hidden"],
                            arch["activation"], arr) for arr in arrays]
    except ShapeError as exc:
        raise WeightFormatError(str(exc)) from None
    return nets[0], (nets[1] if len(nets) > 1 else None)


# -- agent ------------------------------------------------------------------

class Agent:
    """One vehicle's learner: online/target nets, replay buffer, RNG, temperature."""

    def __init__(self, n_inputs, n_actions, hp, rng, net=None, target=None):
        self.hp = hp
        self.rng = rng
        if net is None:
            net = DuelingQNet(n_inputs, n_actions, hp.hidden).init_params(rng)
        self.net = net
        self.target = target if target is not None else net.copy()
        self.buffer = ReplayBuffer(hp.buffer_capacity, n_inputs)
        self.tau = hp.tau0
        self.tau_decay = hp.tau_decay
        self.tau_floor = hp.tau_min
        self.learning = True
        self.train_steps = 0
        self.decisions = 0
        self.pending = None  # (s, a, r) awaiting its successor observation
        self.optimizer = Adam(net.size, hp.learning_rate) if hp.optimizer == "adam" else None

    def q_values(self, obs):
        return self.net.forward(obs)

    def act(self, obs, mask=None):
        return act_boltzmann(self.net.forward(obs), self.tau, self.rng, mask)

    def record(self, obs, action, reward, train=True):
        """Store the completed decision, pairing the previous one with ``obs``.

        Returns the training loss when a gradient step ran, else ``None``.
        """
        if self.pending is not None:
            s, a, r = self.pending
            self.buffer.push(s, a, r, obs)
        self.pending = (obs, action, reward)
        self.decisions += 1
        self.tau = max(self.tau_floor, self.tau * self.tau_decay)
        if train and self.learning and self.decisions % self.hp.train_every == 0:
            return self.train_once()
        return None

    def train_once(self):
        if len(self.buffer) < self.hp.batch_size:
            return None
        batch = self.buffer.sample(self.hp.batch_size, self.rng)
        loss = train_step(self.net, self.target, batch, self.hp, self.optimizer)
        self.train_steps += 1
        if self.train_steps % self.hp.target_update_interval == 0:
            sync_target(self.net, self.target)
        return loss

    def weights(self):
        return save_weights(self.net, self.target)

    def load(self, blob):
        net, target = load_weights(blob, like=self.net)
        self.net.load_params(net.params)
        self.target.load_params(target.params if target is not None else net.params)

    def clone(self, rng):
        """Independent agent with copied weights, temperature and cadence; empty buffer."""
        other = Agent(self.net.n_inputs, self.net.n_actions, self.hp, rng,
                      self.net.copy(), self.target.copy())
        other.tau = self.tau
        other.tau_decay, other.tau_floor = self.tau_decay, self.tau_floor
        other.train_steps = self.train_steps
        return other


def param_hash(agents):
    h = zlib.crc32(b"")
    for vid in sorted(agents):
        h = zlib.crc32(agents[vid].net.params.tobytes(), h)
        h = zlib.crc32(agents[vid].target.params.tobytes(), h)
    return h
