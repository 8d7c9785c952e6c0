"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Supports exactly the operations needed for small MLPs, softmax classifiers,
and gradient reversal: affine, tanh, relu, softmax (plus a fused
softmax/cross-entropy), log, elementwise add/sub/mul, concat, broadcast,
row gather, sum/mean, squared error, and ``grad_reverse``.

Graphs are built define-by-run: every operation appends a node with a
monotonically increasing id, so construction order is a topological order
and the backward pass visits nodes in exact reverse construction order.
That makes forward and backward results bitwise reproducible for identical
inputs. All data is float64; non-finite values are rejected at every node
boundary with an error naming the offending node.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "ParamStore",
    "Graph",
    "GradcheckReport",
    "gradcheck",
    "add",
    "sub",
    "mul",
    "affine",
    "tanh",
    "relu",
    "softmax",
    "log",
    "concat",
    "broadcast_to",
    "reshape",
    "symmetric_mean",
    "gather_rows",
    "tsum",
    "tmean",
    "mse",
    "softmax_cross_entropy",
    "grad_reverse",
    "glorot_uniform",
]

_node_counter = itertools.count()


class GraphError(Exception):
    """Raised for structural problems in a graph: shape mismatches,
    non-finite intermediates, or misuse of the forward/backward protocol.
    The message names the node where the problem occurred."""


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(data)):
        raise GraphError(f"non-finite values in node '{name}'")


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array plus the bookkeeping for reverse-mode autodiff.

    ``grad`` accumulates across backward passes until explicitly zeroed,
    which is what parameter tensors rely on. Intermediate tensors are
    created fresh per graph, so their accumulators never alias.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.name = name if name is not None else f"tensor#{next(_node_counter)}"
        _check_finite(self.data, self.name)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._nid = next(_node_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, output_grad=None) -> None:
        """Run reverse-mode accumulation from this tensor.

        A scalar tensor seeds its own gradient with 1.0; any other shape
        requires an explicit ``output_grad`` of matching shape.
        """
        if output_grad is None:
            if self.size != 1:
                raise GraphError(
                    f"backward on non-scalar node '{self.name}' requires an explicit output_grad")
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(output_grad)
            if seed.shape != self.data.shape:
                raise GraphError(
                    f"output_grad shape {seed.shape} does not match node '{self.name}' "
                    f"shape {self.data.shape}")
        nodes = _reachable(self)
        self._accumulate(seed)
        # Reverse construction order is a reverse topological order.
        for node in sorted(nodes, key=lambda n: n._nid, reverse=True):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        for parent in node._parents:
            if parent.requires_grad:
                stack.append(parent)
    return out


def _constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    name = f"{op}#{next(_node_counter)}"
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, name=name, _parents=parents,
                 _backward=backward if requires else None)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b) -> Tensor:
    a, b = _constant(a), _constant(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make("add", out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _constant(a), _constant(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make("sub", out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _constant(a), _constant(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out_data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` where x is (..., fan_in), w is (fan_in, fan_out), b is (fan_out,)."""
    x, w, b = _constant(x), _constant(w), _constant(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise GraphError(
            f"affine shape mismatch: input has {x.data.shape[-1]} features, "
            f"weight '{w.name}' expects {w.data.shape[0]}")
    if b.data.shape != (w.data.shape[1],):
        raise GraphError(f"affine bias '{b.name}' shape {b.data.shape} does not match "
                         f"fan_out {w.data.shape[1]}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            gm = g.reshape(-1, g.shape[-1])
            xm = x.data.reshape(-1, x.data.shape[-1])
            w._accumulate(xm.T @ gm)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make("affine", out_data, (x, w, b), backward)


def tanh(x) -> Tensor:
    x = _constant(x)
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out_data * out_data))

    return _make("tanh", out_data, (x,), backward)


def relu(x) -> Tensor:
    x = _constant(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _make("relu", out_data, (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _constant(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            x._accumulate(out_data * (g - inner))

    return _make("softmax", out_data, (x,), backward)


def log(x) -> Tensor:
    x = _constant(x)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out_data = np.log(x.data)
        except FloatingPointError as exc:
            raise GraphError(f"log of non-positive value in node '{x.name}'") from exc

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make("log", out_data, (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(_constant(t) for t in tensors)
    if not tensors:
        raise GraphError("concat requires at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make("concat", out_data, tensors, backward)


def broadcast_to(x, shape) -> Tensor:
    x = _constant(x)
    out_data = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.data.shape))

    return _make("broadcast", out_data, (x,), backward)


def gather_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` for embedding tables.

    The backward pass accumulates only into the touched rows, so untouched
    rows keep an exactly-zero gradient.
    """
    table = _constant(table)
    idx = np.asarray(indices, dtype=np.int64)
    n_rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise GraphError(f"gather index out of range for table '{table.name}' "
                         f"with {n_rows} rows")
    out_data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            table._accumulate(acc)

    return _make("gather", out_data, (table,), backward)


def reshape(x, shape) -> Tensor:
    x = _constant(x)
    old_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old_shape))

    return _make("reshape", out_data, (x,), backward)


def symmetric_mean(x, axis: int) -> Tensor:
    """Mean along ``axis`` that is bitwise invariant to permutations of
    that axis: values are summed in sorted order. The gradient of a mean is
    uniform, so the backward pass needs no unsorting."""
    x = _constant(x)
    out_data = np.sort(x.data, axis=axis).mean(axis=axis)
    count = x.data.shape[axis]

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(np.expand_dims(g / count, axis), x.data.shape).copy())

    return _make("symmetric_mean", out_data, (x,), backward)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _constant(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make("sum", out_data, (x,), backward)


def tmean(x, axis: int | None = None) -> Tensor:
    x = _constant(x)
    out_data = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x._accumulate(np.broadcast_to(g / count, x.data.shape).copy())
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(g / count, axis), x.data.shape).copy())

    return _make("mean", out_data, (x,), backward)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    a, b = _constant(a), _constant(b)
    if a.data.shape != b.data.shape:
        raise GraphError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape} "
                         f"(nodes '{a.name}', '{b.name}')")
    diff = a.data - b.data
    out_data = np.array((diff * diff).mean())
    scale = 2.0 / diff.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * scale * diff)
        if b.requires_grad:
            b._accumulate(-g * scale * diff)

    return _make("mse", out_data, (a, b), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Fused softmax + cross-entropy, mean over leading dimensions.

    ``logits`` is (..., K); ``labels`` holds integer class ids of shape
    (...). Fusing keeps the backward numerically stable: the input gradient
    is (softmax - onehot) / n without forming log of small probabilities.
    """
    logits = _constant(logits)
    labels_arr = np.asarray(labels, dtype=np.int64)
    k = logits.data.shape[-1]
    if labels_arr.shape != logits.data.shape[:-1]:
        raise GraphError(f"cross-entropy labels shape {labels_arr.shape} does not match "
                         f"logits '{logits.name}' leading shape {logits.data.shape[:-1]}")
    if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= k):
        raise GraphError(f"cross-entropy label out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    flat_shifted = shifted.reshape(-1, k)
    flat_labels = labels_arr.reshape(-1)
    picked = flat_shifted[np.arange(flat_labels.size), flat_labels]
    n = max(flat_labels.size, 1)
    out_data = np.array((log_z.reshape(-1) - picked).sum() / n)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(flat_shifted)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(flat_labels.size), flat_labels] -= 1.0
            logits._accumulate((g / n) * p.reshape(logits.data.shape))

    return _make("softmax_ce", out_data, (logits,), backward)


def grad_reverse(x, alpha: float = 1.0) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by -alpha.

    Not a true derivative: a finite-difference check of a graph containing
    this node will (intentionally) disagree with the analytic gradient.
    """
    if alpha <= 0:
        raise ValueError(f"grad_reverse requires alpha > 0, got {alpha}")
    x = _constant(x)
    out_data = x.data.copy()

    def backward(g):
        if x.requires_grad:
            x._accumulate(-alpha * g)

    return _make("grad_reverse", out_data, (x,), backward)


# ---------------------------------------------------------------------------
# parameters


def glorot_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Uniform in [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]."""
    if len(shape) >= 2:
        fan_in, fan_out = shape[0], shape[1]
    else:
        fan_in = fan_out = shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named parameter tensors with gradient accumulators.

    Initialization is derived from ``(seed, parameter name)``, so the values
    of one parameter never depend on the order other parameters were added.
    """

    def __init__(self, seed: int, name: str = "params"):
        self.seed = int(seed)
        self.name = name
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, init: str = "glorot") -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already exists in store '{self.name}'")
        if init == "glorot":
            rng = np.random.default_rng([self.seed, *f"{self.name}/{name}".encode()])
            data = glorot_uniform(rng, tuple(shape))
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ValueError(f"unknown init '{init}'")
        t = Tensor(data, requires_grad=True, name=f"{self.name}.{name}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_entries(self) -> int:
        return sum(t.size for t in self._params.values())

    def grad_sq_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return total

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise ValueError(f"state dict keys do not match store '{self.name}': {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for '{k}': {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# function-graph wrapper and gradient checking


class Graph:
    """A computation defined by a function from named input tensors to outputs.

    ``forward`` wraps the raw input arrays as differentiable leaves and runs
    the function; ``backward`` then returns gradients with respect to those
    inputs (parameter gradients accumulate in their ParamStore).
    """

    def __init__(self, fn, params: ParamStore | None = None):
        self.fn = fn
        self.params = params
        self._inputs: dict[str, Tensor] | None = None
        self._outputs: dict[str, Tensor] | None = None

    def forward(self, inputs: dict) -> dict[str, Tensor]:
        leaves = {
            name: Tensor(value, requires_grad=True, name=name)
            for name, value in inputs.items()
        }
        result = self.fn(leaves)
        if isinstance(result, Tensor):
            result = {"out": result}
        if not isinstance(result, dict) or not all(isinstance(v, Tensor) for v in result.values()):
            raise GraphError("graph function must return a Tensor or a dict of Tensors")
        self._inputs = leaves
        self._outputs = result
        return result

    def backward(self, output_grad=None) -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise GraphError("backward called before forward")
        if len(self._outputs) != 1:
            raise GraphError("backward through a multi-output graph is not supported; "
                             "reduce to a single output first")
        (out,) = self._outputs.values()
        if output_grad is None and out.size != 1:
            raise GraphError(
                f"non-scalar output '{out.name}' requires an explicit output_grad")
        out.backward(output_grad)
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in self._inputs.items()
        }


@dataclass
class GradcheckReport:
    """Per-parameter maximum relative error between analytic and
    central-difference gradients."""

    epsilon: float
    per_param: dict[str, float] = field(default_factory=dict)
    per_input: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        errs = list(self.per_param.values()) + list(self.per_input.values())
        return max(errs) if errs else 0.0

    def failures(self, tolerance: float) -> dict[str, float]:
        out = {k: v for k, v in self.per_param.items() if v >= tolerance}
        out.update({k: v for k, v in self.per_input.items() if v >= tolerance})
        return out


# relative-error denominator floor: entries below this magnitude are
# compared on an absolute scale, which keeps near-zero gradients from
# inflating the ratio past any useful tolerance
_REL_FLOOR = 1e-4


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(graph: Graph, inputs: dict, epsilon: float = 1e-5,
              check_inputs: bool = False) -> GradcheckReport:
    """Compare analytic gradients to central finite differences.

    The graph must produce a single scalar output. Parameters are perturbed
    in place and restored, so the check is pure. ``epsilon`` must lie in
    (1e-8, 1e-3); outside that window central differences are dominated by
    rounding or truncation error.
    """
    if not (1e-8 < epsilon < 1e-3):
        raise ValueError(f"epsilon must be in (1e-8, 1e-3), got {epsilon}")
    outputs = graph.forward(inputs)
    (out,) = outputs.values()
    if out.size != 1:
        raise GraphError(f"gradcheck requires a scalar output, got shape {out.data.shape}")
    if graph.params is not None:
        graph.params.zero_grad()
    input_grads = graph.backward()
    analytic_params = {}
    if graph.params is not None:
        analytic_params = {
            k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in graph.params.tensors().items()
        }

    def eval_scalar() -> float:
        (o,) = graph.forward(inputs).values()
        return float(o.data)

    report = GradcheckReport(epsilon=epsilon)
    if graph.params is not None:
        for pname, tensor in graph.params.tensors().items():
            numeric = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = eval_scalar()
                flat[i] = orig - epsilon
                f_minus = eval_scalar()
                flat[i] = orig
                num_flat[i] = (f_plus - f_minus) / (2.0 * epsilon)
            report.per_param[pname] = _rel_err(analytic_params[pname], numeric)
        graph.params.zero_grad()
    if check_inputs:
        for iname in inputs:
            base = np.asarray(inputs[iname], dtype=np.float64).copy()
            numeric = np.zeros_like(base)
            flat = base.reshape(-1)
            num_flat = numeric.reshape(-1)
            probe = dict(inputs)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                probe[iname] = base
                (o,) = graph.forward(probe).values()
                f_plus = float(o.data)
                flat[i] = orig - epsilon
                (o,) = graph.forward(probe).values()
                f_minus = float(o.data)
                flat[i] = orig
                num_flat[i] = (f_plus - f_minus) / (2.0 * epsilon)
            report.per_input[iname] = _rel_err(input_grads[iname], numeric)
        graph.forward(inputs)
    return report


# ---------------------------------------------------------------------------
# small MLP helpers shared by the encoder, generator, score net and classifiers


def mlp_init(store: ParamStore, prefix: str, sizes: list[int]) -> None:
    """Register weight/bias parameters for an MLP with the given layer sizes."""
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"{prefix}.w{i}", (n_in, n_out))
        store.add(f"{prefix}.b{i}", (n_out,), init="zeros")


def mlp_apply(store: ParamStore, prefix: str, x: Tensor, n_layers: int,
              activation=tanh) -> Tensor:
    """Forward an MLP registered by :func:`mlp_init`; final layer is linear."""
    h = x
    for i in range(n_layers):
        h = affine(h, store[f"{prefix}.w{i}"], store[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = activation(h)
    return h
