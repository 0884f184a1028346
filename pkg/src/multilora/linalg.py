"""Dense float32 matrices and the LoRA forward primitives.

Storage is float32, accumulation is float64. All products go through
:func:`accumulate`, which sums the inner dimension strictly in index order.
That fixed order is what makes results independent of batch size, of how
many rows are computed together, and of trailing zero padding, so several
serving paths can be compared bitwise rather than at a tolerance.

Vectors are 1-D arrays; a batch of vectors is a 2-D array with one vector
per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, ValidationError

F32 = np.float32
F64 = np.float64


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Copy ``data`` into a read-only, C-contiguous float32 2-D array.

    Rejects anything that is not finite after the cast to float32, so
    values that overflow float32 are caught as well.
    """
    with np.errstate(over="ignore"):
        arr = np.array(data, dtype=F32, copy=True, order="C")
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def as_vector(data, name: str = "vector") -> np.ndarray:
    with np.errstate(over="ignore"):
        arr = np.array(data, dtype=F32, copy=True)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


def accumulate(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """float64 product of ``lhs (..., m, k)`` and ``rhs (..., k, n)``.

    The k terms of every output element are added one at a time in index
    order, starting from +0.0. Leading dimensions broadcast.
    """
    lhs = np.asarray(lhs, dtype=F64)
    rhs = np.asarray(rhs, dtype=F64)
    k = lhs.shape[-1]
    if rhs.shape[-2] != k:
        raise ShapeError(f"inner dimensions differ: {lhs.shape} x {rhs.shape}")
    lead = np.broadcast_shapes(lhs.shape[:-2], rhs.shape[:-2])
    acc = np.zeros(lead + (lhs.shape[-2], rhs.shape[-1]), dtype=F64)
    for i in range(k):
        acc += lhs[..., :, i : i + 1] * rhs[..., i : i + 1, :]
    return acc


def matmul(lhs, rhs) -> np.ndarray:
    lhs = np.asarray(lhs, dtype=F32)
    rhs = np.asarray(rhs, dtype=F32)
    if lhs.ndim != 2 or rhs.ndim != 2 or lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {lhs.shape} by {rhs.shape}")
    return accumulate(lhs, rhs).astype(F32)


def base_rows64(x_rows: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``w @ x`` for every row ``x`` of ``x_rows``, in float64."""
    return accumulate(x_rows, np.asarray(w).T)


def matvec(w, x) -> np.ndarray:
    w = np.asarray(w, dtype=F32)
    x = np.asarray(x, dtype=F32)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot apply {w.shape} matrix to vector of shape {x.shape}")
    return base_rows64(x[None, :], w)[0].astype(F32)


@dataclass(frozen=True, eq=False)
class LoraLayerDelta:
    """Low-rank update ``(alpha / rank) * b @ a`` for one weight matrix.

    ``a`` is ``rank x d_in`` and ``b`` is ``d_out x rank``. ``alpha`` is
    rounded to float32 on construction so it survives serialization.
    """

    a: np.ndarray
    b: np.ndarray
    alpha: float
    rank: int = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        a = self.a if _is_frozen_f32(self.a) else as_matrix(self.a, "A")
        b = self.b if _is_frozen_f32(self.b) else as_matrix(self.b, "B")
        rank = a.shape[0] if self.rank is None else int(self.rank)
        alpha = float(F32(self.alpha))
        if rank < 1:
            raise DomainError(f"rank must be >= 1, got {rank}")
        if a.shape[0] != rank or b.shape[1] != rank:
            raise ShapeError(f"A {a.shape} and B {b.shape} do not match rank {rank}")
        if rank > min(a.shape[1], b.shape[0]):
            raise DomainError(
                f"rank {rank} exceeds min(d_in={a.shape[1]}, d_out={b.shape[0]})"
            )
        if not (np.isfinite(alpha) and alpha > 0):
            raise DomainError(f"alpha must be positive and finite, got {self.alpha}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "rank", rank)

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def n_params(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def __eq__(self, other):
        if not isinstance(other, LoraLayerDelta):
            return NotImplemented
        return (
            self.rank == other.rank
            and self.alpha == other.alpha
            and self.a.shape == other.a.shape
            and self.b.shape == other.b.shape
            and self.a.tobytes() == other.a.tobytes()
            and self.b.tobytes() == other.b.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def _is_frozen_f32(arr) -> bool:
    # Lets deltas share one B array without copying (shared-B placement).
    return (
        isinstance(arr, np.ndarray)
        and arr.dtype == F32
        and arr.ndim == 2
        and not arr.flags.writeable
        and arr.flags.c_contiguous
    )


def delta_rows64(x_rows: np.ndarray, a: np.ndarray, b: np.ndarray, scale) -> np.ndarray:
    """``scale * b @ (a @ x)`` per row, as two rank-sized products.

    ``a``/``b``/``scale`` may carry a leading batch axis matching the rows
    (one gathered adapter per row); ``B @ A`` is never formed.
    """
    x = np.asarray(x_rows, dtype=F64)[..., None, :]  # (n, 1, d_in)
    a = np.asarray(a)
    b = np.asarray(b)
    u = accumulate(x, np.swapaxes(a, -1, -2))  # (n, 1, r)
    v = accumulate(u, np.swapaxes(b, -1, -2))  # (n, 1, d_out)
    scale = np.asarray(scale, dtype=F64)
    if scale.ndim:
        scale = scale[:, None, None]
    return (scale * v)[..., 0, :]


def _check_delta(x_rows: np.ndarray, delta: LoraLayerDelta, w=None) -> None:
    if x_rows.shape[-1] != delta.d_in:
        raise ShapeError(f"input width {x_rows.shape[-1]} != delta d_in {delta.d_in}")
    if w is not None and np.shape(w) != (delta.d_out, delta.d_in):
        raise ShapeError(
            f"weight {np.shape(w)} does not match delta ({delta.d_out}, {delta.d_in})"
        )


def lora_delta_apply(x, delta: LoraLayerDelta) -> np.ndarray:
    """Delta contribution only: ``(alpha/rank) * B @ (A @ x)``."""
    x = np.asarray(x, dtype=F32)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    _check_delta(x, delta)
    return delta_rows64(x[None, :], delta.a, delta.b, delta.scale)[0].astype(F32)


def lora_forward_rows(x_rows, w, delta: LoraLayerDelta | None) -> np.ndarray:
    """``w @ x + delta(x)`` for each row, summed in float64, rounded once."""
    x_rows = np.asarray(x_rows, dtype=F32)
    w = np.asarray(w, dtype=F32)
    if x_rows.ndim != 2 or w.ndim != 2 or x_rows.shape[1] != w.shape[1]:
        raise ShapeError(f"cannot apply {w.shape} matrix to rows of shape {x_rows.shape}")
    out = base_rows64(x_rows, w)
    if delta is not None:
        _check_delta(x_rows, delta, w)
        out += delta_rows64(x_rows, delta.a, delta.b, delta.scale)
    return out.astype(F32)


def lora_forward(x, w, delta: LoraLayerDelta | None) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return lora_forward_rows(x[None, :], w, delta)[0]
