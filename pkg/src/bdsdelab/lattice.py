"""Exact binary scenario lattice for two independent drivers W and B.

Every driver increment over one time step takes the values ``+sqrt(dt)`` or
``-sqrt(dt)`` with probability 1/2.  A random variable that is measurable with
respect to ``F_t = F_t^W v F_{t,T}^B`` is stored as a table indexed by the
W bits seen up to ``t`` and the B bits of the steps after ``t``.

Table layout
------------
A :class:`Field` carries a measurability *window* ``(w_steps, b_from)``: it
may depend on the W increments of steps ``0 .. w_steps-1`` and on the B
increments of steps ``b_from .. N-1``.  Its ``values`` array has shape
``(nw, nb, *value_shape)`` where

* ``w_index`` packs the W bits little-endian in chronological order, the
  component index varying fastest (bit ``step*dW + c``);
* ``b_index`` packs the B bits of steps ``b_from ..`` little-endian in the
  same way (bit ``(step - b_from)*dB + c``);
* a bit equal to 1 means an up-move.

``nw`` (resp. ``nb``) is either the full count ``2**(w_steps*dW)`` or 1 when
the field is constant along that driver.  The size-1 axes broadcast, so
deterministic data never has to be expanded.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

DEFAULT_MAX_ENTRIES = 2**26


class LatticeSizeError(ValueError):
    """A table would exceed the configured entry cap."""


class MissingIntegrandError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"step count N must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def t(self, i: int) -> float:
        return i * self.dt


@dataclass(frozen=True, eq=False)
class ScenarioLattice:
    grid: TimeGrid
    dW: int = 1
    dB: int = 1
    max_entries: int = DEFAULT_MAX_ENTRIES

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.grid.dt)

    @property
    def exact_representation(self) -> bool:
        return self.dW == 1

    @property
    def scenario_count(self) -> int:
        return 2 ** (self.N * (self.dW + self.dB))

    # -- sizes -------------------------------------------------------------
    def w_count(self, w_steps: int) -> int:
        return 2 ** (w_steps * self.dW)

    def b_count(self, b_from: int) -> int:
        return 2 ** ((self.N - b_from) * self.dB)

    def table_size(self, w_steps: int, b_from: int) -> int:
        return self.w_count(w_steps) * self.b_count(b_from)

    def level_table_size(self, i: int) -> int:
        """Logical entry count of an adapted table at level ``i``."""
        self._check_level(i)
        return self.table_size(i, i)

    def check_entries(self, nw: int, nb: int, w_steps: int, b_from: int) -> None:
        if nw * nb > self.max_entries:
            wexp = w_steps * self.dW if nw > 1 else 0
            bexp = (self.N - b_from) * self.dB if nb > 1 else 0
            raise LatticeSizeError(
                f"table of 2^{wexp} W-entries x 2^{bexp} B-entries = 2^{wexp + bexp} "
                f"(w_steps={w_steps}*dW={self.dW} + (N={self.N}-b_from={b_from})*dB={self.dB}) "
                f"exceeds cap of {self.max_entries} entries"
            )

    def _check_level(self, i: int, upper: int | None = None) -> None:
        upper = self.N if upper is None else upper
        if not 0 <= i <= upper:
            raise IndexError(f"level {i} out of range 0..{upper}")

    # -- increments --------------------------------------------------------
    def w_signs(self, step: int, w_steps: int) -> np.ndarray:
        """Signs of the W increment of ``step`` over a W table of ``w_steps``."""
        idx = np.arange(self.w_count(w_steps))
        shifts = step * self.dW + np.arange(self.dW)
        return (((idx[:, None] >> shifts) & 1) * 2 - 1).astype(float)

    def b_signs(self, step: int, b_from: int) -> np.ndarray:
        idx = np.arange(self.b_count(b_from))
        shifts = (step - b_from) * self.dB + np.arange(self.dB)
        return (((idx[:, None] >> shifts) & 1) * 2 - 1).astype(float)

    def dW_field(self, step: int) -> "Field":
        """The increment ``W_{t_{step+1}} - W_{t_step}`` as a field."""
        self._check_level(step, self.N - 1)
        w = step + 1
        self.check_entries(self.w_count(w), 1, w, self.N)
        vals = self.sqrt_dt * self.w_signs(step, w)[:, None, :]
        return Field(self, w, self.N, vals)

    def dB_field(self, step: int) -> "Field":
        """The increment ``B_{t_{step+1}} - B_{t_step}``; known at level ``step``."""
        self._check_level(step, self.N - 1)
        self.check_entries(1, self.b_count(step), 0, step)
        vals = self.sqrt_dt * self.b_signs(step, step)[None, :, :]
        return Field(self, 0, step, vals)

    def W(self, level: int) -> "Field":
        """``W_{t_level}`` (vector of dimension dW)."""
        self._check_level(level)
        total = self.constant(np.zeros(self.dW))
        for j in range(level):
            total = total + self.dW_field(j)
        return total

    def B_increment(self, start: int, stop: int | None = None) -> "Field":
        """``B_{t_stop} - B_{t_start}`` (defaults to ``stop = N``)."""
        stop = self.N if stop is None else stop
        total = self.constant(np.zeros(self.dB))
        for j in range(start, stop):
            total = total + self.dB_field(j)
        return total

    # -- constructors ------------------------------------------------------
    def constant(self, value) -> "Field":
        value = np.asarray(value, dtype=float)
        return Field(self, 0, self.N, value.reshape((1, 1) + value.shape))

    def adapted(self, level: int, values) -> "Field":
        self._check_level(level)
        return Field(self, level, level, np.asarray(values, dtype=float))

    def transition(self, level: int, values) -> "Field":
        self._check_level(level, self.N - 1)
        return Field(self, level + 1, level, np.asarray(values, dtype=float))

    def from_bits(self, level: int, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "Field":
        """Tabulate an adapted field from ``fn(w_signs, b_signs)``.

        ``w_signs`` has shape ``(nw, 1, level, dW)`` and ``b_signs`` has
        shape ``(1, nb, N - level, dB)``; ``fn`` must broadcast to
        ``(nw, nb, *value_shape)``.
        """
        self._check_level(level)
        nw, nb = self.w_count(level), self.b_count(level)
        self.check_entries(nw, nb, level, level)
        ws = np.stack([self.w_signs(j, level) for j in range(level)], axis=1) if level else np.zeros((nw, 0, self.dW))
        bs = (
            np.stack([self.b_signs(j, level) for j in range(level, self.N)], axis=1)
            if level < self.N
            else np.zeros((nb, 0, self.dB))
        )
        vals = np.asarray(fn(ws[:, None], bs[None, :]), dtype=float)
        if vals.ndim < 2:
            vals = vals.reshape((1, 1) + vals.shape)
        return Field(self, level, level, vals)


def build_lattice(T: float, N: int, dW: int = 1, dB: int = 1, max_entries: int = DEFAULT_MAX_ENTRIES) -> ScenarioLattice:
    """Build the binary scenario lattice.

    The entry cap is enforced whenever a table is materialised, so a lattice
    with ``2**N`` logical scenarios per level is fine as long as the fields
    living on it stay constant along the oversized driver.
    """
    if int(dW) != dW or dW < 1 or int(dB) != dB or dB < 1:
        raise ValueError(f"driver dimensions must be >= 1, got dW={dW}, dB={dB}")
    if max_entries < 1:
        raise ValueError("max_entries must be positive")
    return ScenarioLattice(TimeGrid(float(T), int(N)), int(dW), int(dB), int(max_entries))


# ---------------------------------------------------------------------------
# fields


def _lift_values(lat: ScenarioLattice, values: np.ndarray, w0: int, b0: int, w1: int, b1: int) -> np.ndarray:
    nw, nb = values.shape[:2]
    if nw > 1 and w1 > w0:
        nw *= lat.w_count(w1 - w0)
    if nb > 1 and b1 < b0:
        nb *= 2 ** ((b0 - b1) * lat.dB)
    lat.check_entries(nw, nb, w1, b1)
    if values.shape[0] > 1 and w1 > w0:
        reps = (lat.w_count(w1 - w0),) + (1,) * (values.ndim - 1)
        values = np.tile(values, reps)
    if values.shape[1] > 1 and b1 < b0:
        values = np.repeat(values, 2 ** ((b0 - b1) * lat.dB), axis=1)
    return values


@dataclass(frozen=True, eq=False)
class Field:
    """A random array measurable w.r.t. W steps ``< w_steps`` and B steps ``>= b_from``."""

    lattice: ScenarioLattice
    w_steps: int
    b_from: int
    values: np.ndarray

    def __post_init__(self):
        lat = self.lattice
        if not (0 <= self.w_steps <= lat.N and 0 <= self.b_from <= lat.N):
            raise IndexError(f"window ({self.w_steps}, {self.b_from}) outside 0..{lat.N}")
        v = self.values
        if v.ndim < 2:
            raise ValueError("field values need the two table axes")
        nw, nb = v.shape[:2]
        if nw not in (1, lat.w_count(self.w_steps)):
            raise ValueError(f"W axis has {nw} entries, expected 1 or {lat.w_count(self.w_steps)}")
        if nb not in (1, lat.b_count(self.b_from)):
            raise ValueError(f"B axis has {nb} entries, expected 1 or {lat.b_count(self.b_from)}")
        v.setflags(write=False)

    @property
    def value_shape(self) -> tuple:
        return self.values.shape[2:]

    @property
    def level(self) -> int | None:
        """Adapted level when the window is ``(i, i)``, else ``None``."""
        return self.w_steps if self.w_steps == self.b_from else None

    def is_adapted_to(self, level: int) -> bool:
        return self.w_steps <= level <= self.b_from

    @property
    def logical_size(self) -> int:
        return self.lattice.table_size(self.w_steps, self.b_from)

    def lift(self, w_steps: int, b_from: int) -> "Field":
        if w_steps < self.w_steps or b_from > self.b_from:
            raise ValueError(
                f"cannot lift window ({self.w_steps}, {self.b_from}) to narrower ({w_steps}, {b_from})"
            )
        vals = _lift_values(self.lattice, self.values, self.w_steps, self.b_from, w_steps, b_from)
        return Field(self.lattice, w_steps, b_from, vals)

    def squeeze(self) -> "Field":
        """Relabel axes stored with one entry as independent of their driver.

        A field whose W axis holds a single entry does not depend on any W
        step, so its window may start at ``w_steps = 0``; likewise a single
        B entry means ``b_from = N``.  Combining squeezed fields keeps tables
        that depend on a few early steps from being tiled up to the level of
        a constant partner.
        """
        nw, nb = self.values.shape[:2]
        w = 0 if nw == 1 else self.w_steps
        b = self.lattice.N if nb == 1 else self.b_from
        if (w, b) == (self.w_steps, self.b_from):
            return self
        return Field(self.lattice, w, b, self.values)

    def at_level(self, level: int) -> "Field":
        return self.lift(level, level)

    def dense(self) -> np.ndarray:
        """Values broadcast to the full ``(2**(w*dW), 2**((N-b)*dB), ...)`` table."""
        lat = self.lattice
        nw, nb = lat.w_count(self.w_steps), lat.b_count(self.b_from)
        lat.check_entries(nw, nb, self.w_steps, self.b_from)
        return np.broadcast_to(self.values, (nw, nb) + self.value_shape)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Field":
        return Field(self.lattice, self.w_steps, self.b_from, np.asarray(fn(self.values), dtype=float))

    # -- arithmetic --------------------------------------------------------
    def _binary(self, other, op) -> "Field":
        if isinstance(other, Field):
            if other.lattice is not self.lattice:
                raise ValueError("fields live on different lattices")
            x, y = self.squeeze(), other.squeeze()
            w, b = max(x.w_steps, y.w_steps), min(x.b_from, y.b_from)
            a, c = x.lift(w, b).values, y.lift(w, b).values
            nw, nb = max(a.shape[0], c.shape[0]), max(a.shape[1], c.shape[1])
            self.lattice.check_entries(nw, nb, w, b)
            return Field(self.lattice, w, b, op(a, c))
        other = np.asarray(other, dtype=float)
        return Field(self.lattice, self.w_steps, self.b_from, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide)

    def __neg__(self):
        return self.map(np.negative)

    def __pow__(self, p):
        return self.map(lambda v: v**p)

    def __repr__(self):
        return (
            f"Field(window=({self.w_steps}, {self.b_from}), stored={self.values.shape[:2]}, "
            f"value_shape={self.value_shape})"
        )


def as_field(lattice: ScenarioLattice, x) -> Field:
    return x if isinstance(x, Field) else lattice.constant(x)


def broadcast_pair(a: Field, b: Field) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Lift two fields to their common window and broadcast their table axes."""
    a, b = a.squeeze(), b.squeeze()
    w, bf = max(a.w_steps, b.w_steps), min(a.b_from, b.b_from)
    av, bv = a.lift(w, bf).values, b.lift(w, bf).values
    shape = (max(av.shape[0], bv.shape[0]), max(av.shape[1], bv.shape[1]))
    a.lattice.check_entries(shape[0], shape[1], w, bf)
    av = np.broadcast_to(av, shape + av.shape[2:])
    bv = np.broadcast_to(bv, shape + bv.shape[2:])
    return av, bv, w, bf


# ---------------------------------------------------------------------------
# conditioning and stochastic integrals


def condexp(X: Field, level: int | None = None) -> Field:
    """Conditional expectation given ``F_{t_level}``.

    ``level`` defaults to the transition level ``X.w_steps - 1``.  The W bits
    of steps ``>= level`` and the B bits of steps ``< level`` are integrated
    out by exact averaging.
    """
    lat = X.lattice
    if level is None:
        level = X.w_steps - 1
    lat._check_level(level)
    vals = X.values
    w, b = X.w_steps, X.b_from
    if w > level:
        if vals.shape[0] > 1:
            vals = vals.reshape((lat.w_count(w - level), lat.w_count(level)) + vals.shape[1:]).mean(axis=0)
        w = level
    if b < level:
        if vals.shape[1] > 1:
            low = 2 ** ((level - b) * lat.dB)
            vals = vals.reshape((vals.shape[0], lat.b_count(level), low) + vals.shape[2:]).mean(axis=2)
        b = level
    return Field(lat, w, b, vals)


class Representation(NamedTuple):
    mean: Field
    integrand: Field
    residual_norm: float


def _transition_values(X: Field, level: int) -> np.ndarray:
    lat = X.lattice
    lat._check_level(level, lat.N - 1)
    if X.w_steps > level + 1 or X.b_from < level:
        raise ValueError(f"field window ({X.w_steps}, {X.b_from}) is not transition-measurable at level {level}")
    return X.lift(level + 1, level).values


def martingale_coefficient(X: Field, level: int | None = None) -> Representation:
    """Split a level-``i`` transition field as ``X = m + v . dW_i + residual``.

    ``m = E[X | F_i]`` and ``v = E[X dW_i^T | F_i] / dt``.  With one W
    component the residual vanishes identically.
    """
    lat = X.lattice
    if level is None:
        level = X.w_steps - 1
    lat._check_level(level, lat.N - 1)
    if X.w_steps <= level and X.b_from >= level:
        # already known at t_level: nothing to project
        zeros = np.zeros((1, 1) + X.value_shape + (lat.dW,))
        return Representation(X, Field(lat, level, level, zeros), 0.0)
    vals = _transition_values(X, level)
    m = condexp(Field(lat, level + 1, level, vals), level)
    vshape = X.value_shape
    if vals.shape[0] == 1:
        zeros = np.zeros((1, 1) + vshape + (lat.dW,))
        return Representation(m, Field(lat, level, level, zeros), 0.0)
    k = lat.w_count(1)
    xr = vals.reshape((k, lat.w_count(level)) + vals.shape[1:])
    signs = lat.w_signs(0, 1)  # (2**dW, dW)
    proj = np.tensordot(signs, xr, axes=(0, 0)) / k  # (dW, nw, nb, *vs)
    v = np.moveaxis(proj, 0, -1) / lat.sqrt_dt
    fitted = m.values[None] + np.tensordot(signs, proj, axes=(1, 0))
    resid = xr - fitted
    value_axes = tuple(range(3, resid.ndim))
    r = float(np.sqrt((resid**2).sum(axis=value_axes)).max()) if value_axes else float(np.abs(resid).max())
    return Representation(m, Field(lat, level, level, v), r)


def representation_residual(X: Field, rep: Representation, level: int | None = None) -> Field:
    """The orthogonal remainder ``X - m - v . dW_i`` as a transition field."""
    if level is None:
        level = X.w_steps - 1
    return X - rep.mean - contract(rep.integrand, X.lattice.dW_field(level))


def contract(a: Field, inc: Field) -> Field:
    """Matrix-times-increment over the trailing driver axis of ``a``."""
    av, iv, w, b = broadcast_pair(a, inc)
    extra = av.ndim - iv.ndim
    iv = iv.reshape(iv.shape[:2] + (1,) * extra + iv.shape[2:])
    return Field(a.lattice, w, b, (av * iv).sum(axis=-1))


def _as_integrand(lat: ScenarioLattice, h, d: int) -> Field:
    if isinstance(h, Field):
        return h
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        h = np.full(d, float(h))
    return lat.constant(h)


def backward_ito_integral(h: Sequence, start: int = 0) -> Field:
    """Backward Ito sum ``sum_{j >= start} h_j dB_j`` with right-endpoint integrands.

    ``h`` is indexed by absolute step ``j`` (length ``N``); ``h[j]`` may be a
    field adapted at level ``j + 1`` (or any coarser window) or a constant
    whose trailing axis has length ``dB``.  Scalars mean ``c * ones(dB)``.
    """
    lat = _lattice_of(h)
    total = None
    for j in range(start, lat.N):
        if j >= len(h) or h[j] is None:
            raise MissingIntegrandError(f"backward integrand missing for step {j}")
        hj = _as_integrand(lat, h[j], lat.dB)
        if hj.w_steps > j + 1 or (hj.b_from < j and hj.values.shape[1] > 1):
            raise ValueError(f"integrand at step {j} is not measurable at the right endpoint")
        term = contract(hj, lat.dB_field(j))
        total = term if total is None else total + term
    if total is None:
        total = lat.constant(np.zeros(np.shape(_as_integrand(lat, h[-1], lat.dB).values)[2:-1]))
    return total


def forward_ito_integral(v: Sequence, start: int = 0) -> Field:
    """Forward Ito sum ``sum_{j >= start} v_j dW_j`` with left-endpoint integrands.

    The result depends on the whole W path after ``start`` and is returned
    with window ``(N, start)`` (or narrower when the integrands allow).
    """
    lat = _lattice_of(v)
    total = None
    for j in range(start, lat.N):
        if j >= len(v) or v[j] is None:
            raise MissingIntegrandError(f"forward integrand missing for step {j}")
        vj = _as_integrand(lat, v[j], lat.dW)
        if not (vj.w_steps <= j and (vj.b_from >= j or vj.values.shape[1] == 1)):
            raise ValueError(f"integrand at step {j} is not adapted at level {j}")
        term = contract(vj, lat.dW_field(j))
        total = term if total is None else total + term
    if total is None:
        total = lat.constant(np.zeros(np.shape(_as_integrand(lat, v[-1], lat.dW).values)[2:-1]))
    return total


def _lattice_of(seq) -> ScenarioLattice:
    for item in seq:
        if isinstance(item, Field):
            return item.lattice
    raise ValueError("at least one integrand must be a Field to fix the lattice")


def expectation(X: Field) -> np.ndarray:
    """Uniform average over the table (size-1 axes count as constants)."""
    return X.values.mean(axis=(0, 1))


def table_norm(X: Field) -> float:
    """``E[|X|^2]^{1/2}`` with ``|.|`` the Euclidean norm of the value."""
    sq = X.values**2
    per = sq.sum(axis=tuple(range(2, sq.ndim))) if sq.ndim > 2 else sq
    return float(np.sqrt(per.mean()))


# ---------------------------------------------------------------------------
# serialisation


def write_field_csv(field: Field, fh, level: int | None = None) -> None:
    """Rows ``(level, w_index, b_index, component, value)``; w-major order.

    A field adapted at ``level`` is written on the level table.  Tables whose
    full expansion exceeds the lattice cap are written on the field's own
    window as stored, with ``*`` as the index of an axis the values do not
    depend on.
    """
    if level is None:
        level = field.level if field.level is not None else field.w_steps
    lat = field.lattice
    if field.is_adapted_to(level) and lat.table_size(level, level) <= lat.max_entries:
        table = field.at_level(level).dense()
        w_idx, b_idx = range(table.shape[0]), range(table.shape[1])
    else:
        table = field.values
        w_idx = range(table.shape[0]) if table.shape[0] > 1 else ["*"]
        b_idx = range(table.shape[1]) if table.shape[1] > 1 else ["*"]
    flat = table.reshape(table.shape[0], table.shape[1], -1)
    writer = csv.writer(fh, lineterminator="\n")
    for iw, w in enumerate(w_idx):
        for ib, b in enumerate(b_idx):
            for c, val in enumerate(flat[iw, ib]):
                writer.writerow((level, w, b, c, repr(float(val))))


def field_csv(fields: Sequence[Field], levels: Sequence[int] | None = None) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(("level", "w_index", "b_index", "component", "value"))
    for k, f in enumerate(fields):
        write_field_csv(f, buf, None if levels is None else levels[k])
    return buf.getvalue()
