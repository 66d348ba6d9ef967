"""Small dense networks with explicit forward/backward passes.

The actor and critic here are tiny, and the training update needs exact
analytic gradients through the joint action (including the softmax layer), so
the networks are implemented directly on numpy arrays.  Parameters serialize
to a versioned flat text format whose decimal encoding round-trips doubles
bit-faithfully.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

_FORMAT_TAG = "crossway-mlp-v1"


class MLP:
    """Fully-connected net; activations per layer are 'relu' or 'linear'."""

    def __init__(self, sizes: list[int], activations: list[str], seed: int | None = None):
        if len(activations) != len(sizes) - 1:
            raise InputError("need one activation per layer")
        if any(a not in ("relu", "linear") for a in activations):
            raise InputError(f"unsupported activation in {activations}")
        self.sizes = list(sizes)
        self.activations = list(activations)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Batched forward pass; returns output and the cache for backward."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cache = []
        a = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            cache.append((a, z))
            a = np.maximum(z, 0.0) if act == "relu" else z
        return a, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: np.ndarray):
        """Backprop ``grad_out`` (B, out); returns (weight grads, bias grads, input grad)."""
        grad_out = np.atleast_2d(np.asarray(grad_out, dtype=float))
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.biases)
        da = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            a_in, z = cache[i]
            dz = da * (z > 0.0) if self.activations[i] == "relu" else da
            dws[i] = a_in.T @ dz
            dbs[i] = dz.sum(axis=0)
            da = dz @ self.weights[i].T
        return dws, dbs, da

    def step(self, dws, dbs, lr: float):
        """In-place gradient step (positive lr descends along the given grads)."""
        for w, dw in zip(self.weights, dws):
            w -= lr * dw
        for b, db in zip(self.biases, dbs):
            b -= lr * db

    # -- flat parameter vector (used by finite-difference checks) -----------

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise InputError("flat parameter size mismatch")
        i = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = theta[i : i + w.size].reshape(w.shape)
            i += w.size
            b[...] = theta[i : i + b.size]
            i += b.size

    def flat_grads(self, dws, dbs) -> np.ndarray:
        parts = []
        for dw, db in zip(dws, dbs):
            parts.append(dw.ravel())
            parts.append(db.ravel())
        return np.concatenate(parts)

    def copy(self) -> "MLP":
        clone = MLP(self.sizes, self.activations)
        for i in range(len(self.weights)):
            clone.weights[i] = self.weights[i].copy()
            clone.biases[i] = self.biases[i].copy()
        return clone

    # -- serialization ------------------------------------------------------

    def save(self, path: str):
        with open(path, "w") as fh:
            fh.write(f"{_FORMAT_TAG}\n")
            fh.write("sizes " + " ".join(str(s) for s in self.sizes) + "\n")
            fh.write("activations " + " ".join(self.activations) + "\n")
            for i, (w, b) in enumerate(zip(self.weights, self.biases)):
                fh.write(f"W{i} " + " ".join(repr(float(v)) for v in w.ravel()) + "\n")
                fh.write(f"b{i} " + " ".join(repr(float(v)) for v in b.ravel()) + "\n")

    @classmethod
    def load(cls, path: str) -> "MLP":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != _FORMAT_TAG:
            raise InputError(f"{path}: not a {_FORMAT_TAG} file")
        sizes = [int(v) for v in lines[1].split()[1:]]
        activations = lines[2].split()[1:]
        net = cls(sizes, activations)
        idx = 3
        for i in range(len(net.weights)):
            wvals = [float(v) for v in lines[idx].split()[1:]]
            net.weights[i] = np.array(wvals).reshape(net.weights[i].shape)
            idx += 1
            bvals = [float(v) for v in lines[idx].split()[1:]]
            net.biases[i] = np.array(bvals)
            idx += 1
        return net


N_FEATURES = 10


def make_policy_net(seed: int | None = None) -> MLP:
    """Shared precedence-index net: 10 -> 4 (ReLU) -> 2 (linear) -> 1 (linear)."""
    return MLP([N_FEATURES, 4, 2, 1], ["relu", "linear", "linear"], seed=seed)


def make_critic_net(n_robots: int, hidden: int = 64, seed: int | None = None) -> MLP:
    """Action-value net over the padded joint state and joint action."""
    dim = n_robots * N_FEATURES + n_robots
    return MLP([dim, hidden, hidden, 1], ["relu", "relu", "linear"], seed=seed)
