"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward ops executed inside an active :class:`Graph` append a node to its
tape; :func:`backward` walks the tape in exact reverse insertion order.
Outside a graph the ops compute values only (inference mode).
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# op name -> scale applied to that op's input gradients; test hook only
_grad_corruption: dict[str, float] = {}
_active: list["Graph"] = []


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_logits")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None
        self._logits: Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    ctx: dict = field(default_factory=dict)


class Graph:
    """Define-by-run tape. Use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._done = False

    def __enter__(self) -> "Graph":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)

    def record(self, op, inputs, output, backward, **ctx) -> None:
        output._node = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, backward, ctx))

    def reset(self) -> None:
        self.nodes.clear()
        self._done = False

    def relu_masks(self) -> list[np.ndarray]:
        return [n.ctx["mask"] for n in self.nodes if n.op == "relu"]

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def current_graph() -> Graph | None:
    return _active[-1] if _active else None


def _needs_tape(*inputs: Tensor) -> Graph | None:
    g = current_graph()
    if g is None:
        return None
    return g if any(t.requires_grad or t._node is not None for t in inputs) else None


def _emit(op: str, inputs, out_data, backward, **ctx) -> Tensor:
    out = Tensor(out_data)
    g = _needs_tape(*inputs)
    if g is not None:
        out.requires_grad = True
        g.record(op, inputs, out, backward, **ctx)
    return out


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the input gradients of ``op`` by ``factor`` (negative-control hook)."""
    _grad_corruption[op] = factor
    try:
        yield
    finally:
        _grad_corruption.pop(op, None)


def backward(loss: Tensor, graph: Graph) -> None:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar seed, got shape {loss.shape}")
    if graph._done:
        raise GraphError("backward already ran on this graph; call reset() and rebuild")
    if loss._node is None or loss._node >= len(graph.nodes) or graph.nodes[loss._node].output is not loss:
        raise GraphError("loss was not produced inside this graph")
    graph._done = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {
        id(t): t for node in graph.nodes for t in node.inputs if t.requires_grad and t._node is None
    }
    for node in reversed(graph.nodes[: loss._node + 1]):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward(gout)
        scale = _grad_corruption.get(node.op)
        for t, gin in zip(node.inputs, gins):
            if gin is None or not (t.requires_grad or t._node is not None):
                continue
            if scale is not None:
                gin = gin * scale
            prev = grads.get(id(t))
            grads[id(t)] = gin if prev is None else prev + gin
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g, dtype=np.float64)


# ---------------------------------------------------------------- ops


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a 1-element tensor."""
    shape = x.shape
    return _emit("sum", (x,), np.array([x.data.sum()]), lambda g: (np.full(shape, g[0]),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,), mask=mask)


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h`` x ``w`` window of an NCHW tensor."""
    H, W = x.shape[2:]
    if not (1 <= h <= H and 1 <= w <= W):
        raise ShapeError(f"crop: cannot take {h}x{w} from {H}x{W}")
    if (h, w) == (H, W):
        return x
    shape = x.shape

    def _back(g):
        gx = np.zeros(shape)
        gx[:, :, :h, :w] = g
        return (gx,)

    return _emit("crop", (x,), x.data[:, :, :h, :w], _back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NCHW, got {x.shape}")
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    N, C, H, W = x.shape

    def _back(g):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", (x,), out, _back)


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkhkw kernel plus bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input {x.shape} has {C} channels but kernel {weight.shape} expects {Ci}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
    ho, wo = conv_out_size(H, kh, stride, padding), conv_out_size(W, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}, kernel {weight.shape}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(N * ho * wo, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(N, ho, wo, O).transpose(0, 3, 1, 2)

    def _back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * ho * wo, O)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0)
        gcols = (gm @ wmat).reshape(N, ho, wo, C, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw, gb

    return _emit("conv2d", (x, weight, bias), out, _back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    N, C, H, W = x.shape
    out = x.data.sum(axis=(2, 3)) / (H * W)

    def _back(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], (N, C, H, W)).copy(),)

    return _emit("global_avg_pool", (x,), out, _back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data
    return _emit("linear", (x, weight, bias), out, lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    if z.data.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax expects N x K logits, got {z.shape}")
    p = _softmax_rows(z.data)

    def _back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    out = _emit("softmax", (z,), p, _back)
    if out._node is not None:
        out._logits = z
    return out


def _check_one_hot(labels: np.ndarray) -> None:
    ok = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValueError("cross_entropy: every label row must be one-hot")


def cross_entropy(probs: Tensor, labels: Tensor | np.ndarray) -> Tensor:
    """Mean negative log-probability of the true classes (probabilities floored at 1e-12).

    When ``probs`` came from :func:`softmax` in the same graph the backward pass
    is fused and sends ``(p - y) / N`` straight to the logits.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs labels {y.shape}")
    _check_one_hot(y)
    n = probs.shape[0]
    p = probs.data
    pc = np.maximum(p, PROB_FLOOR)
    loss = np.array([-(y * np.log(pc)).sum() / n])

    logits = probs._logits
    if logits is not None and current_graph() is not None:
        # rows whose true-class probability sits on the floor have a flat loss
        live = ((y * p).sum(axis=1, keepdims=True) > PROB_FLOOR).astype(np.float64)
        return _emit("softmax_cross_entropy", (logits,), loss, lambda g: (g[0] * live * (p - y) / n,))

    def _back(g):
        return (g[0] * np.where(p > PROB_FLOOR, -y / pc, 0.0) / n,)

    return _emit("cross_entropy", (probs,), loss, _back)


# ------------------------------------------------------------ grad check


def _evaluate(builder, inputs) -> tuple[float, list[np.ndarray]]:
    with Graph() as g:
        out = builder(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check builder must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0]), g.relu_masks()


def _same_masks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    builder: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    Every ``requires_grad`` input is probed; ``max_coords`` limits the number
    of coordinates sampled per input. Coordinates whose perturbation flips a
    ReLU activation pattern are skipped (the function is not smooth there).
    """
    targets = [t for t in inputs if t.requires_grad]
    with Graph() as g:
        out = builder(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check builder must return a scalar, got shape {out.shape}")
    g.backward(out)
    base_masks = g.relu_masks()
    rng = rng or np.random.default_rng(0)

    worst, skipped = 0.0, 0
    for t in targets:
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, mp = _evaluate(builder, inputs)
            flat[i] = orig - eps
            fm, mm = _evaluate(builder, inputs)
            flat[i] = orig
            if not (_same_masks(mp, base_masks) and _same_masks(mm, base_masks)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    if skipped:
        log.debug("grad_check skipped %d coordinates at ReLU kinks", skipped)
    return worst
