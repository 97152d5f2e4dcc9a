"""
Dense float64 tensors with reverse-mode differentiation.

The arrays are ``torch.Tensor`` objects in float64. This module adds the pieces
the garment graph relies on: a registry of the ops the graph is built from, with
shape and finiteness validation at the point an op is recorded, a ``Tape`` that
records the op sequence of a forward pass, and ``backward`` which returns the
gradients of a scalar root with respect to named leaves.

Reverse accumulation itself is delegated to ``torch.autograd``.
"""

import contextvars
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from pbns.utils.exceptions import NumericAbortError, TensorShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

DTYPE = torch.float64
INFERENCE_DTYPE = torch.float32

# |theta| below this uses the series expansion of the Rodrigues coefficients
RODRIGUES_TAYLOR_THRESHOLD = 1e-8

EPS_AREA = 1e-10

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("pbns_tape", default=None)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    input_ids: Tuple[int, ...]
    output_id: int


@dataclass
class Tape:
    """
    Ordered record of the ops executed while the tape is active.

    A tape is confined to the thread (context) that entered it. Node ids are
    assigned on first sight, so every input id precedes the entry consuming it.
    """

    entries: List[TapeEntry] = field(default_factory=list)
    _ids: Dict[int, int] = field(default_factory=dict, repr=False)
    _nodes: List[Tensor] = field(default_factory=list, repr=False)
    _produced: set = field(default_factory=set, repr=False)
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def node_id(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._ids:
            self._ids[key] = len(self._nodes)
            # keep a reference so ids of live tensors are never reused
            self._nodes.append(tensor)
        return self._ids[key]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor) -> None:
        input_ids = tuple(self.node_id(t) for t in inputs)
        output_id = self.node_id(output)
        self._produced.add(output_id)
        self.entries.append(TapeEntry(op, input_ids, output_id))

    def leaves(self) -> Dict[int, Tensor]:
        """Tensors that were consumed by recorded ops, require grad and were not produced on the tape."""
        result = {}
        for entry in self.entries:
            for node in entry.input_ids:
                tensor = self._nodes[node]
                if node not in self._produced and tensor.requires_grad:
                    result[node] = tensor
        return result


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def as_tensor(values: Any, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> Tensor:
    """
    Convert ``values`` to a float tensor, rejecting NaN and Inf.

    Args:
        values: array-like values
        requires_grad: whether the result is a differentiable leaf
        dtype: float64 by default; float32 only for inference

    Returns:
        Tensor: a fresh tensor
    """
    if isinstance(values, torch.Tensor):
        tensor = values.detach().to(dtype).clone()
    else:
        tensor = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=dtype).clone()
    check_finite(tensor, "as_tensor")
    if requires_grad:
        tensor.requires_grad_(True)
    return tensor


def as_index(values: Any) -> Tensor:
    """Integer index tensor. Indices never carry gradient."""
    if isinstance(values, torch.Tensor):
        return values.detach().to(torch.int64)
    return torch.as_tensor(np.asarray(values, dtype=np.int64), dtype=torch.int64)


def check_finite(tensor: Tensor, where: str) -> None:
    if tensor.is_floating_point() and not bool(torch.isfinite(tensor).all()):
        bad = int((~torch.isfinite(tensor)).sum())
        raise NumericAbortError(
            f"{bad} non-finite values at {where}",
            details={"where": where, "shape": list(tensor.shape)},
        )


def to_inference(tensor: Tensor) -> Tensor:
    """Detached float32 copy for the optional 32-bit inference path."""
    return tensor.detach().to(INFERENCE_DTYPE)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

OpFn = Callable[..., Tensor]
_OPS: Dict[str, OpFn] = {}
_VALIDATORS: Dict[str, Callable[..., None]] = {}


def _shape_error(op: str, *tensors: Tensor, reason: str = "incompatible shapes") -> TensorShapeError:
    shapes = [list(t.shape) for t in tensors]
    return TensorShapeError(f"{op}: {reason} {shapes}", details={"op": op, "shapes": shapes})


def register_op(name: str, validate: Optional[Callable[..., None]] = None) -> Callable[[OpFn], OpFn]:
    def decorator(fn: OpFn) -> OpFn:
        _OPS[name] = fn
        if validate is not None:
            _VALIDATORS[name] = validate
        return fn

    return decorator


def registered_ops() -> List[str]:
    return sorted(_OPS)


def forward_op(op: str, *inputs: Any, **attrs: Any) -> Tensor:
    """
    Run op ``op`` on ``inputs`` and record it on the active tape.

    Args:
        op: registered op name
        inputs: tensor operands (``concat`` takes a single list)
        attrs: non-tensor attributes of the op (indices, dims, scalars)

    Returns:
        Tensor: the op output

    Raises:
        TensorShapeError: if the operand shapes are invalid for ``op``
        NumericAbortError: if a differentiable operand holds NaN or Inf
    """
    if op not in _OPS:
        raise TensorShapeError(f"unknown op '{op}'", details={"op": op})
    tensors = _flatten_tensors(inputs)
    validate = _VALIDATORS.get(op)
    if validate is not None:
        validate(op, *inputs, **attrs)
    needs_grad = torch.is_grad_enabled() and any(t.requires_grad for t in tensors)
    if needs_grad:
        for t in tensors:
            check_finite(t, op)
    output = _OPS[op](*inputs, **attrs)
    tape = _active_tape.get()
    if tape is not None and needs_grad:
        tape.record(op, tensors, output)
    return output


def _flatten_tensors(inputs: Sequence[Any]) -> List[Tensor]:
    tensors: List[Tensor] = []
    for item in inputs:
        if isinstance(item, torch.Tensor):
            tensors.append(item)
        elif isinstance(item, (list, tuple)):
            tensors.extend(t for t in item if isinstance(t, torch.Tensor))
    return tensors


def _validate_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error(op, a, b) from None


def _validate_matmul(op: str, a: Tensor, b: Tensor) -> None:
    if a.dim() == 0 or b.dim() == 0:
        raise _shape_error(op, a, b, reason="scalar operand")
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise _shape_error(op, a, b)


def _validate_rows3(op: str, *tensors: Tensor, **_: Any) -> None:
    for t in tensors:
        if t.dim() < 1 or t.shape[-1] != 3:
            raise _shape_error(op, *tensors, reason="expected trailing extent 3")
    if len(tensors) == 2 and tensors[0].shape != tensors[1].shape:
        raise _shape_error(op, *tensors)


def _validate_rows(op: str, x: Tensor, index: Tensor, *_: Any, **__: Any) -> None:
    if x.dim() < 2:
        raise _shape_error(op, x, reason="expected at least 2 dimensions")
    if index.dim() != 1:
        raise _shape_error(op, x, index, reason="index must be 1-D")


def _validate_gather(op: str, x: Tensor, index: Tensor) -> None:
    _validate_rows(op, x, index)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= x.shape[-2]):
        raise _shape_error(op, x, index, reason="index out of range")


def _validate_scatter(op: str, x: Tensor, index: Tensor, size: int) -> None:
    _validate_rows(op, x, index)
    if index.shape[0] != x.shape[-2]:
        raise _shape_error(op, x, index)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= size):
        raise _shape_error(op, x, index, reason="index out of range")


def _validate_sqrt(op: str, x: Tensor) -> None:
    if bool((x.detach() < 0).any()):
        raise TensorShapeError(f"{op}: negative operand", details={"op": op, "shapes": [list(x.shape)]})


def _validate_concat(op: str, tensors: Sequence[Tensor], dim: int = -1) -> None:
    if not tensors:
        raise TensorShapeError(f"{op}: no operands", details={"op": op})
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        shape = list(t.shape)
        if len(shape) != len(ref):
            raise _shape_error(op, *tensors)
        axis = dim % len(ref)
        if shape[:axis] + shape[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise _shape_error(op, *tensors)


def _validate_masked(op: str, logits: Tensor, mask: Tensor) -> None:
    if logits.shape != mask.shape:
        raise _shape_error(op, logits, mask)
    if not bool(mask.any(dim=-1).all()):
        raise TensorShapeError(f"{op}: a row has an empty support", details={"op": op})


@register_op("add", _validate_broadcast)
def _add(a: Tensor, b: Tensor) -> Tensor:
    return a + b


@register_op("sub", _validate_broadcast)
def _sub(a: Tensor, b: Tensor) -> Tensor:
    return a - b


@register_op("mul", _validate_broadcast)
def _mul(a: Tensor, b: Tensor) -> Tensor:
    return a * b


@register_op("scalar_mul")
def _scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return a * float(scalar)


@register_op("matmul", _validate_matmul)
def _matmul(a: Tensor, b: Tensor) -> Tensor:
    return torch.matmul(a, b)


@register_op("relu")
def _relu(x: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    return torch.relu(x)


@register_op("gather_rows", _validate_gather)
def _gather_rows(x: Tensor, index: Tensor) -> Tensor:
    return torch.index_select(x, -2, index)


@register_op("scatter_add_rows", _validate_scatter)
def _scatter_add_rows(x: Tensor, index: Tensor, size: int) -> Tensor:
    shape = list(x.shape)
    shape[-2] = int(size)
    return x.new_zeros(shape).index_add(-2, index, x)


@register_op("sum")
def _sum(x: Tensor, dim: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


@register_op("mean")
def _mean(x: Tensor, dim: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


@register_op("square")
def _square(x: Tensor) -> Tensor:
    return x * x


@register_op("sqrt", _validate_sqrt)
def _sqrt(x: Tensor) -> Tensor:
    return torch.sqrt(x)


@register_op("norm_rows")
def _norm_rows(x: Tensor) -> Tensor:
    return torch.linalg.vector_norm(x, dim=-1)


@register_op("dot_rows", _validate_broadcast)
def _dot_rows(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum(dim=-1)


@register_op("cross_rows", _validate_rows3)
def _cross_rows(a: Tensor, b: Tensor) -> Tensor:
    return torch.linalg.cross(a, b, dim=-1)


@register_op("normalize_rows")
def _normalize_rows(x: Tensor, eps: float = EPS_AREA) -> Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / torch.clamp(norm, min=eps)


@register_op("clamp_max_zero")
def _clamp_max_zero(x: Tensor) -> Tensor:
    # min(x, 0); the subgradient at x == 0 is 0 because the strict branch is taken
    return torch.where(x < 0, x, torch.zeros_like(x))


@register_op("batched_rodrigues", _validate_rows3)
def _batched_rodrigues(axis_angle: Tensor) -> Tensor:
    sq = (axis_angle * axis_angle).sum(dim=-1)[..., None, None]
    small = sq < RODRIGUES_TAYLOR_THRESHOLD**2
    # keep the unused branch finite so its gradient is finite too
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(safe_sq)
    half_sin = torch.sin(0.5 * angle)
    a = torch.where(small, 1.0 - sq / 6.0 + sq * sq / 120.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0 + sq * sq / 720.0, 2.0 * half_sin * half_sin / safe_sq)
    skew = _skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device).expand(skew.shape)
    return eye + a * skew + b * torch.matmul(skew, skew)


def _skew(v: Tensor) -> Tensor:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = torch.zeros_like(x)
    rows = [
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


@register_op("concat", _validate_concat)
def _concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    return torch.cat(list(tensors), dim=dim)


@register_op("softmax_masked", _validate_masked)
def _softmax_masked(logits: Tensor, mask: Tensor) -> Tensor:
    masked = torch.where(mask, logits, torch.full_like(logits, float("-inf")))
    return torch.softmax(masked, dim=-1)


@register_op("transpose_last")
def _transpose_last(x: Tensor) -> Tensor:
    return x.transpose(-1, -2)


# ---------------------------------------------------------------------------
# named wrappers used by the rest of the package
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("mul", a, b)


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return forward_op("scalar_mul", a, scalar=scalar)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("matmul", a, b)


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", x)


def gather_rows(x: Tensor, index: Tensor) -> Tensor:
    return forward_op("gather_rows", x, as_index(index))


def scatter_add_rows(x: Tensor, index: Tensor, size: int) -> Tensor:
    return forward_op("scatter_add_rows", x, as_index(index), size=size)


def sum(x: Tensor, dim: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:  # noqa: A001
    return forward_op("sum", x, dim=dim)


def mean(x: Tensor, dim: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    return forward_op("mean", x, dim=dim)


def square(x: Tensor) -> Tensor:
    return forward_op("square", x)


def sqrt(x: Tensor) -> Tensor:
    return forward_op("sqrt", x)


def norm_rows(x: Tensor) -> Tensor:
    return forward_op("norm_rows", x)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("dot_rows", a, b)


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("cross_rows", a, b)


def normalize_rows(x: Tensor, eps: float = EPS_AREA) -> Tensor:
    return forward_op("normalize_rows", x, eps=eps)


def clamp_max_zero(x: Tensor) -> Tensor:
    return forward_op("clamp_max_zero", x)


def batched_rodrigues(axis_angle: Tensor) -> Tensor:
    return forward_op("batched_rodrigues", axis_angle)


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    return forward_op("concat", list(tensors), dim=dim)


def softmax_masked(logits: Tensor, mask: Tensor) -> Tensor:
    return forward_op("softmax_masked", logits, mask)


def transpose_last(x: Tensor) -> Tensor:
    return forward_op("transpose_last", x)


def backward(
    root: Tensor,
    leaves: Optional[Union[Mapping[str, Tensor], Sequence[Tensor]]] = None,
) -> Dict[Any, Tensor]:
    """
    Gradients of a scalar ``root`` with respect to differentiable leaves.

    Args:
        root: scalar tensor
        leaves: named leaves, a sequence of leaves (keyed by position), or None
            to use every requires-grad leaf recorded on the active tape (keyed by
            node id)

    Returns:
        Dict mapping each leaf key to its gradient (zeros for leaves the root
        does not depend on). A root that does not require grad yields {}.

    Raises:
        TensorShapeError: if ``root`` is not a scalar, or no non-empty tape is active
    """
    if root.numel() != 1 or root.dim() > 1:
        raise TensorShapeError(
            f"backward: root must be a scalar, got shape {list(root.shape)}",
            details={"op": "backward", "shapes": [list(root.shape)]},
        )
    if not root.requires_grad:
        return {}

    tape = _active_tape.get()
    if tape is None or not len(tape):
        raise TensorShapeError(
            "backward: the root was not recorded on an active, non-empty tape", details={"op": "backward"}
        )
    if leaves is None:
        named: Dict[Any, Tensor] = dict(tape.leaves())
    elif isinstance(leaves, Mapping):
        named = dict(leaves)
    else:
        named = dict(enumerate(leaves))

    keys = [k for k, t in named.items() if t.requires_grad]
    if not keys:
        return {}
    check_finite(root.detach(), "backward")
    grads = torch.autograd.grad(root.reshape(()), [named[k] for k in keys], allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(named[k])) for k, g in zip(keys, grads)}
