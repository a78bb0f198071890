"""Minimal reverse-mode gradient tape over float64 numpy arrays.

Ops are coarse-grained (whole-array convolutions, normalizations, ...), each
recorded with a closure that maps the output adjoint to the input adjoints.
Recording order is execution order, which is already topological, so backward
is a single reversed sweep. With tape=None every op runs as plain numpy and
nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import numpy as np


class Var:
    """An array value in the computation, optionally carrying a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Recorded operation graph for one forward pass."""

    def __init__(self):
        self._recorded: list[Var] = []

    def __len__(self) -> int:
        return len(self._recorded)

    def record(self, data, parents: tuple[Var, ...], vjp) -> Var:
        """Create an output Var; track it only if some parent needs gradients.

        `vjp(grad_out)` must return one adjoint per parent (None for parents
        that need no gradient).
        """
        out = Var(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
            self._recorded.append(out)
        return out

    def backward(self, root: Var) -> None:
        """Accumulate gradients of `root` (a scalar) into every reachable Var."""
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self._recorded):
            if node.grad is None or node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # copy: a vjp may hand the same array to several parents
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g


def record(tape: GradTape | None, data, parents: tuple[Var, ...], vjp) -> Var:
    """Record on a tape, or just wrap the value when no tape is active."""
    if tape is None:
        return Var(data)
    return tape.record(data, parents, vjp)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# ---------------------------------------------------------------------------
# Generic elementwise / shaping ops


def add(tape, a: Var, b: Var) -> Var:
    return record(tape, a.data + b.data, (a, b), lambda g: (g, g))


def decimate(tape, x: Var, factor: int) -> Var:
    """Keep every `factor`-th sample along the last axis (starting at 0)."""

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., ::factor] = g
        return (gx,)

    return record(tape, x.data[..., ::factor], (x,), vjp)


def stack_channels(tape, rows: list[Var]) -> Var:
    """Stack [B, T] vars into [B, C, T] in list order."""
    data = np.stack([r.data for r in rows], axis=1)

    def vjp(g):
        return tuple(g[:, c, :] for c in range(len(rows)))

    return record(tape, data, tuple(rows), vjp)


def relu(tape, x: Var) -> Var:
    mask = x.data > 0
    return record(tape, np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(tape, x: Var) -> Var:
    data = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # numerically stable sigmoid
    return record(tape, data, (x,), lambda g: (g * sig,))


def mean_last(tape, x: Var) -> Var:
    """Mean over the last axis."""
    n = x.data.shape[-1]

    def vjp(g):
        return (np.repeat(g[..., None], n, axis=-1) / n,)

    return record(tape, x.data.mean(axis=-1), (x,), vjp)


def scalar_affine(tape, x: Var, w: Var, b: Var) -> Var:
    data = x.data * w.data + b.data

    def vjp(g):
        return (g * w.data, np.sum(g * x.data), np.sum(g))

    return record(tape, data, (x, w, b), vjp)


def mse(tape, pred: Var, target: np.ndarray) -> Var:
    """Mean squared difference over all elements of pred."""
    diff = pred.data - target
    n = diff.size
    return record(tape, np.mean(diff**2), (pred,), lambda g: (g * 2.0 * diff / n,))
