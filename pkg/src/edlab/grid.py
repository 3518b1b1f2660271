"""Periodic configuration-space lattice and spectral calculus on it.

A Grid is a uniform rectangular lattice with periodic topology on every
axis.  Axis a has ``points[a]`` nodes (a power of two, for FFT efficiency)
spanning physical length ``extents[a]``; node i sits at
``-L/2 + i*h`` so localized states can be centered at the origin.
All derivatives are spectral: exact for band-limited periodic fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .errors import ValidationError


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice over configuration space.

    points:  nodes per axis (each >= 8 and a power of two).
    extents: physical length per axis.
    """

    points: tuple[int, ...]
    extents: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(int(n) for n in self.points))
        object.__setattr__(self, "extents", tuple(float(L) for L in self.extents))
        if len(self.points) < 1:
            raise ValidationError("grid needs at least one axis")
        if len(self.points) != len(self.extents):
            raise ValidationError(
                f"{len(self.points)} point counts but {len(self.extents)} extents"
            )
        for n in self.points:
            if n < 8 or not _is_power_of_two(n):
                raise ValidationError(f"points per axis must be a power of two >= 8, got {n}")
        for L in self.extents:
            if not (L > 0.0) or not np.isfinite(L):
                raise ValidationError(f"axis extent must be positive and finite, got {L}")

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.extents, self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def origin(self) -> tuple[float, ...]:
        """Coordinate of node (0, ..., 0)."""
        return tuple(-L / 2.0 for L in self.extents)

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        """1D node coordinates per axis, from -L/2 to L/2 - h."""
        out = []
        for n, L in zip(self.points, self.extents):
            ax = -L / 2.0 + (L / n) * np.arange(n)
            ax.setflags(write=False)
            out.append(ax)
        return tuple(out)

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """1D angular wavenumbers per axis in FFT ordering."""
        out = []
        for n, h in zip(self.points, self.spacing):
            k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
            k.setflags(write=False)
            out.append(k)
        return tuple(out)

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Full D-dimensional coordinate arrays (ij indexing)."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def wavenumber_mesh(self, axis: int) -> np.ndarray:
        """Wavenumbers of one axis broadcast to the full grid shape."""
        shape = [1] * self.dims
        shape[axis] = self.points[axis]
        return self.wavenumbers[axis].reshape(shape)

    def wrap(self, positions: np.ndarray) -> np.ndarray:
        """Map positions into the fundamental cell [-L/2, L/2) per axis."""
        x = np.asarray(positions, dtype=float)
        lo = np.array(self.origin)
        L = np.array(self.extents)
        return (x - lo) % L + lo

    def integrate(self, field: np.ndarray) -> float | complex:
        """Riemann sum over the periodic lattice (== trapezoid there)."""
        return field.sum() * self.cell_volume


def spectral_gradient(grid: Grid, field: np.ndarray) -> np.ndarray:
    """All first derivatives of a periodic field, shape (D, *grid.shape).

    Real input yields real output; complex stays complex.
    """
    fk = np.fft.fftn(field)
    out = np.empty((grid.dims,) + grid.shape, dtype=complex)
    for a in range(grid.dims):
        out[a] = np.fft.ifftn(1j * grid.wavenumber_mesh(a) * fk)
    if not np.iscomplexobj(field):
        return out.real.copy()
    return out


def spectral_second_derivatives(grid: Grid, field: np.ndarray) -> np.ndarray:
    """Per-axis second derivatives d^2 f / dx_a^2, shape (D, *grid.shape)."""
    fk = np.fft.fftn(field)
    out = np.empty((grid.dims,) + grid.shape, dtype=complex)
    for a in range(grid.dims):
        k = grid.wavenumber_mesh(a)
        out[a] = np.fft.ifftn(-(k * k) * fk)
    if not np.iscomplexobj(field):
        return out.real.copy()
    return out


def interpolate_periodic(grid: Grid, field: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Multilinear interpolation with periodic wrap on every axis.

    field:     one field (*grid.shape) or a stack (F, *grid.shape).
    positions: (n, D) sample points (any real values; wrapped internally).
    Returns (n,) or (F, n).
    """
    stacked = field.ndim == grid.dims + 1
    flat = field.reshape((field.shape[0], -1) if stacked else (1, -1))
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n_pts = pos.shape[0]
    D = grid.dims

    idx0 = np.empty((D, n_pts), dtype=np.int64)
    frac = np.empty((D, n_pts))
    for a in range(D):
        rel = (pos[:, a] - grid.origin[a]) / grid.spacing[a]
        base = np.floor(rel)
        frac[a] = rel - base
        idx0[a] = np.mod(base.astype(np.int64), grid.points[a])

    dtype = complex if np.iscomplexobj(field) else float
    out = np.zeros((flat.shape[0], n_pts), dtype=dtype)
    for corner in product((0, 1), repeat=D):
        weight = np.ones(n_pts)
        flat_idx = np.zeros(n_pts, dtype=np.int64)
        stride = 1
        for a in reversed(range(D)):
            ia = idx0[a] if corner[a] == 0 else (idx0[a] + 1) % grid.points[a]
            weight = weight * (1.0 - frac[a] if corner[a] == 0 else frac[a])
            flat_idx += ia * stride
            stride *= grid.points[a]
        out += weight * flat[:, flat_idx]
    return out if stacked else out[0]
