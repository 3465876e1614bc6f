"""Softmax policies over one-hot state encodings, with hand-written backprop.

Three architectures share one flat parameter vector layout:

* ``tabular``: one logit per (state, action)
* ``linear``: one-hot weights ``W`` (S x A) plus a bias ``b`` (A)
* ``mlp(h1, h2, ...)``: tanh hidden layers, linear output

Because inputs are one-hot, the first layer of ``linear``/``mlp`` is a row
lookup, so logits for every state are computed in one pass.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ContractError, ZeroProbabilityError

DEFAULT_RADIUS = 1e3
INIT_SCALE = 0.05
CHECKPOINT_MAGIC = b"CRLPOLICY v1\n"


@dataclass(frozen=True)
class Arch:
    kind: str
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("tabular", "linear", "mlp"):
            raise ContractError(f"unknown architecture {self.kind!r}")
        if self.kind == "mlp" and not self.hidden:
            raise ContractError("mlp needs at least one hidden layer")
        if self.kind != "mlp" and self.hidden:
            raise ContractError(f"{self.kind} takes no hidden sizes")

    def __str__(self) -> str:
        if self.kind == "mlp":
            return "mlp(" + ",".join(map(str, self.hidden)) + ")"
        return self.kind

    @classmethod
    def parse(cls, text: str | Arch) -> Arch:
        if isinstance(text, Arch):
            return text
        m = re.fullmatch(r"\s*mlp\s*\(([\d,\s]+)\)\s*", text)
        if m:
            return cls("mlp", tuple(int(h) for h in m.group(1).split(",") if h.strip()))
        return cls(text.strip())


class Network:
    """Maps every state to ``out_dim`` outputs; parameters live in a flat vector."""

    def __init__(self, arch: Arch | str, in_dim: int, out_dim: int):
        self.arch = Arch.parse(arch)
        self.in_dim, self.out_dim = in_dim, out_dim
        if self.arch.kind == "tabular":
            self.shapes = [(in_dim, out_dim)]
        elif self.arch.kind == "linear":
            self.shapes = [(in_dim, out_dim), (out_dim,)]
        else:
            sizes = (in_dim, *self.arch.hidden, out_dim)
            self.shapes = []
            for a, b in zip(sizes[:-1], sizes[1:]):
                self.shapes += [(a, b), (b,)]
        self.offsets = np.cumsum([0] + [int(np.prod(s)) for s in self.shapes])

    def __eq__(self, other):
        return isinstance(other, Network) and (self.arch, self.in_dim, self.out_dim) == (
            other.arch,
            other.in_dim,
            other.out_dim,
        )

    def __repr__(self):
        return f"Network({self.arch}, {self.in_dim}, {self.out_dim})"

    @property
    def param_count(self) -> int:
        return int(self.offsets[-1])

    def unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        if theta.shape != (self.param_count,):
            raise ContractError(f"expected {self.param_count} parameters, got {theta.shape}")
        return [theta[a:b].reshape(s) for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.shapes)]

    def init(self, rng: np.random.Generator, scale: float = INIT_SCALE) -> np.ndarray:
        return rng.uniform(-scale, scale, self.param_count)

    def forward(self, theta: np.ndarray) -> np.ndarray:
        return self._forward(theta)[0]

    def _forward(self, theta):
        p = self.unpack(theta)
        if self.arch.kind == "tabular":
            return p[0], None
        if self.arch.kind == "linear":
            return p[0] + p[1], None
        acts = []
        h = np.tanh(p[0] + p[1])
        acts.append(h)
        for i in range(2, len(p) - 2, 2):
            h = np.tanh(h @ p[i] + p[i + 1])
            acts.append(h)
        return h @ p[-2] + p[-1], acts

    def vjp(self, theta: np.ndarray, g_out: np.ndarray) -> np.ndarray:
        """Gradient wrt ``theta`` of ``sum(g_out * forward(theta))``."""
        if self.arch.kind == "tabular":
            return np.asarray(g_out, dtype=float).reshape(-1).copy()
        if self.arch.kind == "linear":
            return np.concatenate([g_out.reshape(-1), g_out.sum(axis=0)])
        p = self.unpack(theta)
        _, acts = self._forward(theta)
        grads = []
        g = g_out
        for li in range(len(acts), 0, -1):
            h = acts[li - 1]
            W = p[2 * li]
            grads.append(g.sum(axis=0))
            grads.append(h.T @ g)
            g = (g @ W.T) * (1.0 - h * h)
        grads.append(g.sum(axis=0))
        grads.append(g)  # one-hot inputs: dW1 = g row-wise
        return np.concatenate([x.reshape(-1) for x in reversed(grads)])


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Policy:
    """A parametric softmax policy ``softmax(logits(x) / temperature)``."""

    network: Network
    theta: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        theta = np.array(self.theta, dtype=float)
        self.network.unpack(theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def create(cls, arch, state_count: int, action_count: int = 4, rng=None, temperature: float = 1.0):
        net = Network(arch, state_count, action_count)
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(net, net.init(rng), temperature)

    @property
    def state_count(self) -> int:
        return self.network.in_dim

    @property
    def action_count(self) -> int:
        return self.network.out_dim

    @cached_property
    def logits(self) -> np.ndarray:
        return self.network.forward(self.theta)

    @cached_property
    def _table(self) -> np.ndarray:
        t = softmax(self.logits, self.temperature)
        t.setflags(write=False)
        return t

    def table(self) -> np.ndarray:
        return self._table

    def action_probs(self, state: int) -> np.ndarray:
        return self._table[state]

    def sample_action(self, state: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.action_count, p=self._table[state]))

    def grad_log_prob(self, state: int, action: int) -> np.ndarray:
        """``d log pi(action | state) / d theta`` by one backward pass."""
        probs = self._table[state]
        if probs[action] <= 0.0:
            raise ZeroProbabilityError(f"action {action} has zero probability in state {state}")
        g = np.zeros_like(self._table)
        g[state] = -probs
        g[state, action] += 1.0
        return self.network.vjp(self.theta, g / self.temperature)

    def backward(self, g_logits: np.ndarray) -> np.ndarray:
        """Pull a gradient wrt the (S, A) logits table back to ``theta``."""
        return self.network.vjp(self.theta, g_logits)

    def with_theta(self, theta: np.ndarray) -> Policy:
        return Policy(self.network, theta, self.temperature)

    def with_temperature(self, temperature: float) -> Policy:
        return Policy(self.network, self.theta, temperature)


@dataclass(frozen=True, eq=False)
class TablePolicy:
    """A frozen per-state action table, used for handcrafted teachers."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2 or np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-10:
            raise ContractError("table rows must be probability distributions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def state_count(self) -> int:
        return self.probs.shape[0]

    @property
    def action_count(self) -> int:
        return self.probs.shape[1]

    def table(self) -> np.ndarray:
        return self.probs

    def action_probs(self, state: int) -> np.ndarray:
        return self.probs[state]

    def sample_action(self, state: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.action_count, p=self.probs[state]))


def project_theta(theta: np.ndarray, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius."""
    if not radius > 0:
        raise ContractError("radius must be positive")
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return theta
    return theta * (radius / norm)


class Adam:
    """Adaptive-moment descent on a flat vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------- file formats


def save_policy(policy: Policy, path) -> None:
    net = policy.network
    header = {
        "arch": str(net.arch),
        "in_dim": net.in_dim,
        "out_dim": net.out_dim,
        "temperature": policy.temperature,
        "param_count": net.param_count,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.ascontiguousarray(policy.theta, dtype="<f8").tobytes())


def load_policy(path) -> Policy:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path}: not a policy checkpoint")
    rest = data[len(CHECKPOINT_MAGIC) :]
    line, _, payload = rest.partition(b"\n")
    header = json.loads(line)
    theta = np.frombuffer(payload, dtype="<f8").astype(float)
    if theta.size != header["param_count"]:
        raise ContractError(f"{path}: expected {header['param_count']} parameters, found {theta.size}")
    net = Network(header["arch"], header["in_dim"], header["out_dim"])
    return Policy(net, theta, header["temperature"])


def save_table(policy: TablePolicy, path) -> None:
    S, A = policy.probs.shape
    lines = [f"# action table {S} {A}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in policy.probs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path) -> TablePolicy:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# action table"):
        raise ContractError(f"{path}: missing '# action table' header")
    S, A = (int(x) for x in lines[0].split()[3:5])
    rows = [[float(x) for x in line.split()] for line in lines[1:] if line.strip()]
    arr = np.array(rows)
    if arr.shape != (S, A):
        raise ContractError(f"{path}: expected a {S}x{A} table, got {arr.shape}")
    return TablePolicy(arr)


def load_teacher(path):
    """A teacher from either a table file or a policy checkpoint."""
    head = Path(path).read_bytes()[: len(CHECKPOINT_MAGIC)]
    return load_policy(path) if head == CHECKPOINT_MAGIC else load_table(path)


def score_gradient(policy: Policy, states: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_i weights[i] * grad log pi(actions[i] | states[i])`` with one backward pass."""
    table = policy.table()
    if np.any(table[states, actions] <= 0.0):
        raise ZeroProbabilityError("score requested for a zero-probability action")
    g = np.zeros_like(table)
    np.add.at(g, (states, actions), weights)
    np.add.at(g, states, -weights[:, None] * table[states])
    return policy.backward(g / policy.temperature)
