"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are DAGs of `Expression` nodes. Shapes are fixed and checked at
construction time; values are computed by `evaluate`, which re-reads the
current `ParameterStore` contents, so one graph can be re-evaluated after
parameter updates. Everything is float64. Arrays are scalars (shape ())
or 2-D; the only broadcast allowed is row-wise bias addition
(n, k) + (1, k).

Supported ops: constant, parameter, add, sub, mul (elementwise), matmul,
concat, sum, mean, leaky_relu, sigmoid, softmax (optionally masked), sin,
cos, sqrt, square, log, neg, max_with_zero, l2_norm, l2_normalize,
gather_rows, scatter_add_rows.
"""

from __future__ import annotations

import json

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's shape rule (raised at graph build)."""


class EvaluationError(RuntimeError):
    """Runtime failure during a forward or backward pass."""


_NO_ATTRS: dict = {}


class Expression:
    __slots__ = ("op", "inputs", "shape", "attrs", "value", "grad")

    def __init__(self, op, inputs, shape, attrs=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(shape)
        self.attrs = attrs if attrs is not None else _NO_ATTRS
        self.value = None
        self.grad = None

    def __repr__(self):
        return f"Expression({self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (0, 2):
        raise ShapeError(f"arrays must be scalars or 2-D, got shape {arr.shape}")
    return arr


def constant(x) -> Expression:
    arr = _as_array(x)
    return Expression("constant", (), arr.shape, {"array": arr})


def scalar(x: float) -> Expression:
    return constant(np.float64(x))


def parameter(store: "ParameterStore", name: str) -> Expression:
    shape = store[name].shape
    return Expression("parameter", (), shape, {"name": name})


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Expression, b: Expression) -> Expression:
    if a.shape == b.shape:
        return Expression("add", (a, b), a.shape)
    if len(a.shape) == 2 and b.shape == (1, a.shape[1]):
        return Expression("add", (a, b), a.shape, {"bias": True})
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Expression, b: Expression) -> Expression:
    _check_same_shape("sub", a, b)
    return Expression("sub", (a, b), a.shape)


def mul(a: Expression, b: Expression) -> Expression:
    _check_same_shape("mul", a, b)
    return Expression("mul", (a, b), a.shape)


def neg(a: Expression) -> Expression:
    return Expression("neg", (a,), a.shape)


def matmul(a: Expression, b: Expression) -> Expression:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return Expression("matmul", (a, b), (a.shape[0], b.shape[1]))


def concat(parts, axis: int) -> Expression:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of zero parts")
    if axis not in (0, 1):
        raise ShapeError("concat axis must be 0 or 1")
    other = 1 - axis
    base = parts[0].shape
    if len(base) != 2:
        raise ShapeError("concat requires 2-D operands")
    for p in parts[1:]:
        if len(p.shape) != 2 or p.shape[other] != base[other]:
            raise ShapeError(f"concat: mismatched shapes {base} vs {p.shape}")
    size = sum(p.shape[axis] for p in parts)
    shape = (size, base[1]) if axis == 0 else (base[0], size)
    return Expression("concat", parts, shape, {"axis": axis})


def sum_rows(a: Expression) -> Expression:
    """Sum over axis 0, keeping a (1, k) row."""
    if len(a.shape) != 2:
        raise ShapeError("sum_rows requires a 2-D operand")
    return Expression("sum", (a,), (1, a.shape[1]), {"axis": 0})


def sum_cols(a: Expression) -> Expression:
    """Sum over axis 1, keeping an (n, 1) column."""
    if len(a.shape) != 2:
        raise ShapeError("sum_cols requires a 2-D operand")
    return Expression("sum", (a,), (a.shape[0], 1), {"axis": 1})


def sum_all(a: Expression) -> Expression:
    return Expression("sum", (a,), (), {"axis": None})


def mean_all(a: Expression) -> Expression:
    if len(a.shape) == 2 and (a.shape[0] == 0 or a.shape[1] == 0):
        raise ShapeError("mean of an empty array")
    return Expression("mean", (a,), ())


def leaky_relu(a: Expression, slope: float = 0.01) -> Expression:
    return Expression("leaky_relu", (a,), a.shape, {"slope": float(slope)})


def sigmoid(a: Expression) -> Expression:
    return Expression("sigmoid", (a,), a.shape)


def softmax(a: Expression, axis: int = 1, mask: np.ndarray | None = None) -> Expression:
    if len(a.shape) != 2 or axis not in (0, 1):
        raise ShapeError("softmax requires a 2-D operand and axis 0 or 1")
    attrs = {"axis": axis}
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != operand {a.shape}")
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax mask leaves an empty row/column")
        attrs["mask"] = mask
    return Expression("softmax", (a,), a.shape, attrs)


def sin(a: Expression) -> Expression:
    return Expression("sin", (a,), a.shape)


def cos(a: Expression) -> Expression:
    return Expression("cos", (a,), a.shape)


def sqrt(a: Expression) -> Expression:
    return Expression("sqrt", (a,), a.shape)


def square(a: Expression) -> Expression:
    return Expression("square", (a,), a.shape)


def log(a: Expression) -> Expression:
    return Expression("log", (a,), a.shape)


def max_with_zero(a: Expression) -> Expression:
    return Expression("max_with_zero", (a,), a.shape)


def l2_norm(a: Expression) -> Expression:
    """Row-wise Euclidean norm, (n, k) -> (n, 1)."""
    if len(a.shape) != 2:
        raise ShapeError("l2_norm requires a 2-D operand")
    return Expression("l2_norm", (a,), (a.shape[0], 1))


def l2_normalize(a: Expression, epsilon: float = 1e-12) -> Expression:
    """Row-wise x / sqrt(sum x^2 + epsilon); smooth at the zero vector."""
    if len(a.shape) != 2:
        raise ShapeError("l2_normalize requires a 2-D operand")
    return Expression("l2_normalize", (a,), a.shape, {"epsilon": float(epsilon)})


def scatter_basis(indices, num_rows: int) -> np.ndarray:
    """0/1 matrix B with B[indices[k], k] = 1.

    B @ x performs a scatter-add of x's rows; B.T @ g is the adjoint
    (a row gather). Cached by content: conformers of one topology share
    the same index arrays, so the matrices are built once.
    """
    indices = np.asarray(indices, dtype=np.int64)
    key = (indices.tobytes(), int(num_rows))
    cached = _BASIS_CACHE.get(key)
    if cached is None:
        cached = np.zeros((num_rows, len(indices)))
        cached[indices, np.arange(len(indices))] = 1.0
        _BASIS_CACHE[key] = cached
    return cached


_BASIS_CACHE: dict = {}


def gather_rows(a: Expression, indices, adjoint: np.ndarray | None = None) -> Expression:
    """Row selection a[indices]. `adjoint` optionally supplies the cached
    scatter_basis(indices, a rows) used by the backward pass."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(a.shape) != 2 or indices.ndim != 1:
        raise ShapeError("gather_rows requires a 2-D operand and 1-D indices")
    if adjoint is None:
        if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
            raise ShapeError("gather_rows index out of range")
        adjoint = scatter_basis(indices, a.shape[0])
    return Expression(
        "gather_rows", (a,), (len(indices), a.shape[1]),
        {"indices": indices, "adjoint": adjoint},
    )


def scatter_add_rows(a: Expression, indices, num_rows: int,
                     basis: np.ndarray | None = None) -> Expression:
    """out[r] = sum of a's rows whose index maps to r."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(a.shape) != 2 or indices.ndim != 1 or len(indices) != a.shape[0]:
        raise ShapeError("scatter_add_rows requires one index per input row")
    if basis is None:
        if indices.size and (indices.min() < 0 or indices.max() >= num_rows):
            raise ShapeError("scatter_add_rows index out of range")
        basis = scatter_basis(indices, num_rows)
    return Expression(
        "scatter_add_rows", (a,), (num_rows, a.shape[1]),
        {"indices": indices, "basis": basis},
    )


# ---------------------------------------------------------------------------
# evaluation


def _topological_order(roots) -> list[Expression]:
    order: list[Expression] = []
    seen: set[int] = set()
    stack: list[tuple[Expression, bool]] = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _forward_one(node: Expression, store: "ParameterStore"):
    op = node.op
    at = node.attrs
    ins = node.inputs
    if op == "matmul":
        node.value = ins[0].value @ ins[1].value
    elif op == "add":
        node.value = ins[0].value + ins[1].value
    elif op == "mul":
        node.value = ins[0].value * ins[1].value
    elif op == "gather_rows":
        node.value = ins[0].value[at["indices"]]
    elif op == "leaky_relu":
        a = ins[0].value
        node.value = np.where(a > 0, a, at["slope"] * a)
    elif op == "scatter_add_rows":
        node.value = at["basis"] @ ins[0].value
    elif op == "concat":
        node.value = np.concatenate([p.value for p in ins], axis=at["axis"])
    elif op == "parameter":
        value = store[at["name"]]
        if value.shape != node.shape:
            raise EvaluationError(
                f"parameter {at['name']!r} changed shape: graph has {node.shape}, "
                f"store has {value.shape}"
            )
        node.value = value
    elif op == "constant":
        node.value = at["array"]
    elif op == "sub":
        node.value = ins[0].value - ins[1].value
    elif op == "neg":
        node.value = -ins[0].value
    elif op == "sum":
        axis = at["axis"]
        node.value = ins[0].value.sum(axis=axis, keepdims=axis is not None)
    elif op == "mean":
        node.value = ins[0].value.mean()
    elif op == "sigmoid":
        node.value = 1.0 / (1.0 + np.exp(-ins[0].value))
    elif op == "softmax":
        a = ins[0].value
        axis = at["axis"]
        mask = at.get("mask")
        if mask is None:
            shifted = a - a.max(axis=axis, keepdims=True)
            e = np.exp(shifted)
        else:
            neg_inf = np.where(mask, a, -np.inf)
            shifted = a - neg_inf.max(axis=axis, keepdims=True)
            e = np.where(mask, np.exp(shifted), 0.0)
        node.value = e / e.sum(axis=axis, keepdims=True)
    elif op == "sin":
        node.value = np.sin(ins[0].value)
    elif op == "cos":
        node.value = np.cos(ins[0].value)
    elif op == "sqrt":
        node.value = np.sqrt(ins[0].value)
    elif op == "square":
        a = ins[0].value
        node.value = a * a
    elif op == "log":
        node.value = np.log(ins[0].value)
    elif op == "max_with_zero":
        node.value = np.maximum(ins[0].value, 0.0)
    elif op == "l2_norm":
        a = ins[0].value
        node.value = np.sqrt((a * a).sum(axis=1, keepdims=True))
    elif op == "l2_normalize":
        a = ins[0].value
        s = (a * a).sum(axis=1, keepdims=True)
        node.value = a / np.sqrt(s + at["epsilon"])
    else:
        raise EvaluationError(f"unknown op {op!r}")


def _check_finite(node: Expression):
    # sum-then-test: any NaN/inf propagates into the reduction
    if not np.isfinite(node.value.sum()):
        if np.all(np.isfinite(node.value)):
            return  # cancellation overflow in the probe itself; values are fine
        name = node.attrs.get("name")
        label = f"{node.op}({name})" if name else node.op
        raise EvaluationError(f"non-finite value produced by op {label!r}")


def evaluate_many(roots, store: "ParameterStore") -> list[np.ndarray]:
    """Forward pass over the union graph of `roots`; returns their values.

    Raises EvaluationError naming the first op that produced a non-finite
    value.
    """
    order = _topological_order(roots)
    for node in order:
        _forward_one(node, store)
        _check_finite(node)
    return [r.value for r in roots]


def evaluate(root: Expression, store: "ParameterStore") -> np.ndarray:
    return evaluate_many([root], store)[0]


def _accumulate(node: Expression, grad):
    # grads are never mutated in place, so aliasing a shared array is safe
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _backward_one(node: Expression):
    op = node.op
    if op == "constant" or op == "parameter":
        return
    g = node.grad
    at = node.attrs
    ins = node.inputs
    a = ins[0]
    if op == "matmul":
        _accumulate(a, g @ ins[1].value.T)
        _accumulate(ins[1], a.value.T @ g)
    elif op == "add":
        _accumulate(a, g)
        b = ins[1]
        if at.get("bias"):
            _accumulate(b, g.sum(axis=0, keepdims=True))
        else:
            _accumulate(b, g)
    elif op == "mul":
        _accumulate(a, g * ins[1].value)
        _accumulate(ins[1], g * a.value)
    elif op == "gather_rows":
        _accumulate(a, at["adjoint"] @ g)
    elif op == "leaky_relu":
        _accumulate(a, np.where(a.value > 0, g, at["slope"] * g))
    elif op == "scatter_add_rows":
        _accumulate(a, g[at["indices"]])
    elif op == "sub":
        _accumulate(a, g)
        _accumulate(ins[1], -g)
    elif op == "neg":
        _accumulate(a, -g)
    elif op == "concat":
        axis = at["axis"]
        offset = 0
        for p in ins:
            width = p.shape[axis]
            sl = (
                (slice(offset, offset + width), slice(None))
                if axis == 0
                else (slice(None), slice(offset, offset + width))
            )
            _accumulate(p, g[sl])
            offset += width
    elif op == "sum":
        _accumulate(a, np.broadcast_to(g, a.shape))
    elif op == "mean":
        size = max(1, int(np.prod(a.shape)))
        _accumulate(a, np.broadcast_to(g / size, a.shape))
    elif op == "sigmoid":
        y = node.value
        _accumulate(a, g * y * (1.0 - y))
    elif op == "softmax":
        axis = at["axis"]
        y = node.value
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))
    elif op == "sin":
        _accumulate(a, g * np.cos(a.value))
    elif op == "cos":
        _accumulate(a, -g * np.sin(a.value))
    elif op == "sqrt":
        _accumulate(a, g * 0.5 / node.value)
    elif op == "square":
        _accumulate(a, 2.0 * g * a.value)
    elif op == "log":
        _accumulate(a, g / a.value)
    elif op == "max_with_zero":
        _accumulate(a, np.where(a.value > 0, g, 0.0))
    elif op == "l2_norm":
        norms = node.value
        safe = np.where(norms > 0, norms, 1.0)
        _accumulate(a, g * (a.value / safe) * (norms > 0))
    elif op == "l2_normalize":
        x = a.value
        s = (x * x).sum(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(s + at["epsilon"])
        dot = (x * g).sum(axis=1, keepdims=True)
        _accumulate(a, g * inv - x * (dot * inv**3))
    else:
        raise EvaluationError(f"no backward rule for op {op!r}")


def gradients(root: Expression, store: "ParameterStore") -> dict[str, np.ndarray]:
    """Reverse accumulation from a scalar root.

    Runs a fresh forward pass, then returns one gradient array per
    parameter name referenced by the graph (frozen slots included; the
    optimizer is responsible for skipping them).
    """
    if root.shape != ():
        raise ShapeError(f"gradients requires a scalar root, got shape {root.shape}")
    order = _topological_order([root])
    for node in order:
        _forward_one(node, store)
        _check_finite(node)
        node.grad = None
    root.grad = np.float64(1.0)
    for node in reversed(order):
        if node.grad is not None:
            _backward_one(node)
    out: dict[str, np.ndarray] = {}
    for node in order:
        if node.op == "parameter":
            name = node.attrs["name"]
            grad = node.grad if node.grad is not None else np.zeros(node.shape)
            if name in out:
                out[name] = out[name] + grad
            else:
                out[name] = grad
    return out


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named float64 arrays, each flagged trainable or frozen.

    Iteration order is creation order, which is deterministic for a fixed
    model configuration; checkpoints preserve it.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def create(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self._values[name] = arr
        self._trainable[name] = bool(trainable)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_value(self, name: str, value: np.ndarray):
        old = self._values[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != old.shape:
            raise ValueError(
                f"parameter {name!r}: shape {arr.shape} != existing {old.shape}"
            )
        self._values[name] = arr

    def set_trainable(self, name: str, trainable: bool):
        self._trainable[name] = bool(trainable)

    def n_values(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self._values.items():
            out.create(name, value.copy(), self._trainable[name])
        return out

    def to_dict(self) -> dict:
        return {
            "format": "chiralnet.params",
            "version": 1,
            "slots": {
                name: {
                    "shape": list(value.shape),
                    "trainable": self._trainable[name],
                    "data": value.ravel().tolist(),
                }
                for name, value in self._values.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParameterStore":
        if payload.get("format") != "chiralnet.params":
            raise ValueError("not a parameter-store payload")
        if payload.get("version") != 1:
            raise ValueError(f"unsupported version {payload.get('version')!r}")
        store = cls()
        for name, slot in payload["slots"].items():
            arr = np.array(slot["data"], dtype=np.float64).reshape(slot["shape"])
            store.create(name, arr, slot["trainable"])
        return store

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) initialization."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(
    root: Expression,
    store: ParameterStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords_per_slot: int | None = None,
    rng: np.random.Generator | None = None,
    absolute_floor: float = 1e-8,
) -> dict:
    """Central-difference check of reverse-mode gradients.

    Perturbs each parameter coordinate by +-epsilon and compares
    (f+ - f-) / 2 eps against the analytic gradient, with relative error
    |a - b| / max(1e-8, |a| + |b|). A coordinate also passes when the
    absolute disagreement is below `absolute_floor`: with float64 the
    difference quotient carries ~|f| * 1e-16 / epsilon of rounding noise,
    which swamps the relative measure exactly when the true gradient is
    ~0 (e.g. attention-shift directions that softmax annihilates).

    Coordinates whose two one-sided difference quotients disagree are
    reported as kinks and excluded: the losses contain genuine kinks
    (hinge, the |1 - norm| auxiliary) and a central difference straddling
    one measures neither subgradient. When `max_coords_per_slot` is set,
    a random subset per slot is checked.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic = gradients(root, store)
    report: dict[str, dict] = {}
    rng = rng or np.random.default_rng(0)
    f_zero = float(evaluate(root, store))
    for name in store.names():
        if name not in analytic:
            continue
        grad = analytic[name]
        value = store[name]
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_slot is not None and flat.size > max_coords_per_slot:
            coords = rng.choice(flat.size, size=max_coords_per_slot, replace=False)
        max_rel = 0.0
        kinks = 0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            f_plus = float(evaluate(root, store))
            flat[c] = orig - epsilon
            f_minus = float(evaluate(root, store))
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(grad.reshape(-1)[c])
            if abs(a - numeric) <= absolute_floor:
                continue
            slope_plus = (f_plus - f_zero) / epsilon
            slope_minus = (f_zero - f_minus) / epsilon
            # smooth coordinates disagree by ~epsilon * f''/f' (well under
            # 1e-3 here); a straddled kink shifts the slope discontinuously
            if abs(slope_plus - slope_minus) > 2e-3 * (abs(slope_plus) + abs(slope_minus)) + absolute_floor:
                kinks += 1
                continue
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
        report[name] = {
            "max_rel_error": max_rel,
            "checked": int(len(coords)),
            "skipped_kinks": kinks,
            "trainable": store.is_trainable(name),
            "passed": max_rel <= tolerance,
        }
    # restore cached forward values for the unperturbed parameters
    evaluate(root, store)
    report["__all_passed__"] = all(
        entry["passed"] for key, entry in report.items() if not key.startswith("__")
    )
    return report
