"""Domain types and representation conversions.

Three equivalent pictures of the same ensemble state live here:

* ``WaveFunction``   -- complex field psi = sqrt(rho) * exp(i*Phi/hbar),
* ``HydroState``     -- the real pair (rho, Phi),
* ``VelocityFields`` -- current / osmotic / drift velocities derived
  from psi, the inputs to trajectory integration.

Parameter validation enforces the quantized-circulation constraint
eta_tilde = N * hbar (integer N), which is what keeps wavefunctions
single-valued while phases stay free to wind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonIntegerQuantization, NonPositive, NotNormalized, ValidationError
from .grid import Grid, spectral_gradient

#: Distinguished alpha_prime value for the deterministic (Bohmian) limit.
#: Fluctuations vanish identically; no large-float cancellation is involved.
INFINITE_ALPHA = math.inf

#: Relative density floor used inside logs and divisions near nodes.
RHO_FLOOR_REL = 1e-12

#: |eta_tilde/hbar - round(eta_tilde/hbar)| above this fails validation.
QUANTIZATION_TOL = 1e-9

#: Normalization slack accepted on construction of states.
NORM_TOL = 1e-8


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MassTensor:
    """Diagonal mass tensor m_AB = m(A) delta_AB over flattened axes.

    Each configuration-space axis A = (particle, spatial direction) keeps
    the mass of the particle that owns it.
    """

    masses: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        if len(self.masses) < 1:
            raise NonPositive("mass tensor needs at least one axis")
        for m in self.masses:
            if not (m > 0.0) or not np.isfinite(m):
                raise NonPositive(f"masses must be strictly positive, got {m}")

    @property
    def dims(self) -> int:
        return len(self.masses)

    def as_array(self) -> np.ndarray:
        return np.array(self.masses)

    def inverse_diag(self) -> np.ndarray:
        """Diagonal of the inverse tensor m^{AB}."""
        return 1.0 / self.as_array()

    @classmethod
    def uniform(cls, mass: float, dims: int) -> "MassTensor":
        return cls((float(mass),) * dims)


@dataclass(frozen=True)
class ModelParameters:
    """Raw model parameters, prior to validation.

    alpha_prime may be any positive float or INFINITE_ALPHA (math.inf).
    quantization_N, when given, must agree with round(eta_tilde/hbar).
    """

    hbar: float
    eta_tilde: float
    alpha_prime: float
    xi: float
    dt_field: float
    dt_particle: float
    quantization_N: int | None = None


@dataclass(frozen=True)
class ValidatedParameters:
    """Parameters that passed validation.

    eta_tilde is snapped to exactly quantization_N * hbar, so the
    quantization identity holds to the last ulp downstream.
    """

    hbar: float
    eta_tilde: float
    alpha_prime: float
    xi: float
    dt_field: float
    dt_particle: float
    quantization_N: int

    @property
    def eta(self) -> float:
        """Unrescaled multiplier eta = eta_tilde / alpha_prime.

        Exactly 0.0 in the deterministic limit alpha_prime = inf.
        """
        return self.eta_tilde / self.alpha_prime

    @property
    def is_deterministic(self) -> bool:
        return math.isinf(self.alpha_prime)

    @property
    def hbar_eff(self) -> float:
        """Planck constant of the equivalent linear theory, sqrt(8*xi)."""
        return math.sqrt(8.0 * self.xi)

    def with_alpha_prime(self, alpha_prime: float) -> "ValidatedParameters":
        """Same quantum-level model, different sub-quantum alpha_prime."""
        if not (alpha_prime > 0.0):
            raise NonPositive(f"alpha_prime must be positive, got {alpha_prime}")
        return replace(self, alpha_prime=float(alpha_prime))

    def with_xi(self, xi: float) -> "ValidatedParameters":
        if xi < 0.0:
            raise NonPositive(f"xi must be nonnegative, got {xi}")
        return replace(self, xi=float(xi))


def validate_parameters(p: ModelParameters) -> ValidatedParameters:
    """Check positivity and the quantization condition; return a valid copy.

    Raises NonPositive for any nonpositive required-positive field and
    NonIntegerQuantization when eta_tilde/hbar is not an integer to
    within QUANTIZATION_TOL.
    """
    for name in ("hbar", "eta_tilde", "dt_field", "dt_particle"):
        v = getattr(p, name)
        if not (v > 0.0) or not np.isfinite(v):
            raise NonPositive(f"{name} must be strictly positive, got {v}")
    if p.xi < 0.0 or not np.isfinite(p.xi):
        raise NonPositive(f"xi must be nonnegative and finite, got {p.xi}")
    if not (p.alpha_prime > 0.0):
        raise NonPositive(f"alpha_prime must be positive (or inf), got {p.alpha_prime}")
    if p.dt_particle > p.dt_field * (1.0 + 1e-12):
        raise ValidationError(
            f"dt_particle ({p.dt_particle}) must not exceed dt_field ({p.dt_field})"
        )

    ratio = p.eta_tilde / p.hbar
    n = round(ratio)
    if n < 1 or abs(ratio - n) > QUANTIZATION_TOL:
        raise NonIntegerQuantization(
            f"eta_tilde/hbar = {ratio!r} is not a positive integer "
            f"(closest integer {n}, defect {abs(ratio - n):.3e})"
        )
    if p.quantization_N is not None and p.quantization_N != n:
        raise NonIntegerQuantization(
            f"declared quantization_N={p.quantization_N} but eta_tilde/hbar rounds to {n}"
        )
    return ValidatedParameters(
        hbar=float(p.hbar),
        eta_tilde=n * float(p.hbar),
        alpha_prime=float(p.alpha_prime),
        xi=float(p.xi),
        dt_field=float(p.dt_field),
        dt_particle=float(p.dt_particle),
        quantization_N=int(n),
    )


@dataclass(frozen=True)
class WaveFunction:
    """Complex field on a grid, normalized so that sum |psi|^2 dV = 1."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != self.grid.shape:
            raise ValidationError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        object.__setattr__(self, "values", _freeze(vals))
        n = self.norm_sq()
        if abs(n - 1.0) > NORM_TOL:
            raise NotNormalized(f"|psi|^2 integrates to {n!r}, not 1")

    @classmethod
    def normalized(cls, grid: Grid, values: np.ndarray) -> "WaveFunction":
        vals = np.asarray(values, dtype=complex)
        n = (np.abs(vals) ** 2).sum() * grid.cell_volume
        if n <= 0.0 or not np.isfinite(n):
            raise NotNormalized(f"cannot normalize field with |psi|^2 integral {n!r}")
        return cls(grid, vals / math.sqrt(n))

    def norm_sq(self) -> float:
        return float((np.abs(self.values) ** 2).sum() * self.grid.cell_volume)

    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2


@dataclass(frozen=True)
class HydroState:
    """Real pair (rho, Phi) on a grid.

    phi_big holds the periodic part of the phase.  phase_slope is a
    constant gradient background: Phi(x) = phase_slope . x + phi_big(x).
    It lets boosted states (Phi ~ p0*x) live on a periodic lattice without
    a sawtooth discontinuity; plain states leave it at zero.

    wrapped_phase marks phi_big as stored modulo 2*pi*hbar (the case when
    the state came from a wavefunction); consumers then take gradients via
    the unit phasor, never by differencing across the branch cut.
    """

    grid: Grid
    rho: np.ndarray
    phi_big: np.ndarray
    phase_slope: tuple[float, ...] = ()
    wrapped_phase: bool = False

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        phi = np.asarray(self.phi_big, dtype=float)
        if rho.shape != self.grid.shape or phi.shape != self.grid.shape:
            raise ValidationError("rho/phi_big shape does not match grid")
        if rho.min() < 0.0:
            raise ValidationError(f"rho must be nonnegative, min {rho.min()!r}")
        slope = self.phase_slope or (0.0,) * self.grid.dims
        if len(slope) != self.grid.dims:
            raise ValidationError("phase_slope length must equal grid dims")
        object.__setattr__(self, "rho", _freeze(rho))
        object.__setattr__(self, "phi_big", _freeze(phi))
        object.__setattr__(self, "phase_slope", tuple(float(s) for s in slope))
        n = self.norm()
        if abs(n - 1.0) > NORM_TOL:
            raise NotNormalized(f"rho integrates to {n!r}, not 1")

    @classmethod
    def normalized(
        cls,
        grid: Grid,
        rho: np.ndarray,
        phi_big: np.ndarray,
        phase_slope: tuple[float, ...] = (),
        wrapped_phase: bool = False,
    ) -> "HydroState":
        r = np.asarray(rho, dtype=float)
        n = r.sum() * grid.cell_volume
        if n <= 0.0 or not np.isfinite(n):
            raise NotNormalized(f"cannot normalize density with integral {n!r}")
        return cls(grid, r / n, phi_big, phase_slope, wrapped_phase)

    def norm(self) -> float:
        return float(self.rho.sum() * self.grid.cell_volume)

    def grad_phase(self, hbar: float = 1.0) -> np.ndarray:
        """Gradient of the full phase Phi, shape (D, *grid.shape).

        Wrapped storage (phi_big in hbar*(-pi, pi]) goes through the unit
        phasor z = exp(i*phi/hbar): d(phi) = hbar * Im(conj(z) dz), which
        never sees the branch cut.  Smooth storage differentiates directly,
        so arbitrarily large unwrapped actions stay exact.
        """
        if self.wrapped_phase:
            z = np.exp(1j * self.phi_big / hbar)
            dz = spectral_gradient(self.grid, z)
            grad = hbar * np.imag(np.conj(z) * dz)
        else:
            grad = spectral_gradient(self.grid, self.phi_big)
        for a in range(self.grid.dims):
            if self.phase_slope[a] != 0.0:
                grad[a] = grad[a] + self.phase_slope[a]
        return grad


@dataclass(frozen=True)
class VelocityFields:
    """Current, osmotic and drift velocity fields on a grid.

    drift_b is computed as current_v - osmotic_u, so the decomposition
    v = b + u holds exactly in floating arithmetic.  node_region flags
    nodes where rho fell below the floor and fields used the floored
    value (non-fatal; downstream treats those points as unreliable).
    """

    grid: Grid
    current_v: np.ndarray
    osmotic_u: np.ndarray
    drift_b: np.ndarray
    node_region: np.ndarray

    def __post_init__(self):
        expect = (self.grid.dims,) + self.grid.shape
        for name in ("current_v", "osmotic_u", "drift_b"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != expect:
                raise ValidationError(f"{name} shape {arr.shape} != {expect}")
            object.__setattr__(self, name, _freeze(arr))
        object.__setattr__(self, "node_region", _freeze(np.asarray(self.node_region, bool)))


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Per-trajectory positions over output frames, with seed lineage.

    positions has shape (n_frames, n_traj, D).  traj_ids are the global
    trajectory indices (stable across worker partitioning); per_traj_seeds
    are the 64-bit fingerprints of each trajectory's derived noise stream,
    a pure function of (seed, trajectory id).  clamp_events counts drift
    clampings near density nodes; aborted lists trajectories frozen after
    a non-finite drift lookup.
    """

    n_traj: int
    frames: np.ndarray
    positions: np.ndarray
    seed: int
    per_traj_seeds: np.ndarray
    traj_ids: np.ndarray
    clamp_events: int = 0
    aborted: tuple[int, ...] = ()

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        pos = np.asarray(self.positions, dtype=float)
        ids = np.asarray(self.traj_ids, dtype=np.int64)
        seeds = np.asarray(self.per_traj_seeds, dtype=np.uint64)
        if pos.ndim != 3 or pos.shape[0] != frames.size or pos.shape[1] != self.n_traj:
            raise ValidationError(
                f"positions shape {pos.shape} inconsistent with "
                f"{frames.size} frames x {self.n_traj} trajectories"
            )
        if ids.shape != (self.n_traj,) or seeds.shape != (self.n_traj,):
            raise ValidationError("traj_ids/per_traj_seeds must have one entry per trajectory")
        if frames.size > 1 and not (np.diff(frames) > 0.0).all():
            raise ValidationError("frame times must be strictly increasing")
        if not np.isfinite(pos).all():
            raise ValidationError("positions must be finite at all frames")
        object.__setattr__(self, "frames", _freeze(frames))
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "traj_ids", _freeze(ids))
        object.__setattr__(self, "per_traj_seeds", _freeze(seeds))

    @property
    def dims(self) -> int:
        return self.positions.shape[2]

    def slice(self, lo: int, hi: int) -> "TrajectoryEnsemble":
        """Sub-ensemble keeping global trajectory ids (for worker partitions)."""
        return TrajectoryEnsemble(
            n_traj=hi - lo,
            frames=self.frames,
            positions=self.positions[:, lo:hi, :],
            seed=self.seed,
            per_traj_seeds=self.per_traj_seeds[lo:hi],
            traj_ids=self.traj_ids[lo:hi],
            clamp_events=self.clamp_events,
            aborted=tuple(i for i in self.aborted if lo <= i < hi),
        )


def wavefunction_to_hydro(psi: WaveFunction, p: ValidatedParameters) -> HydroState:
    """Split psi into (rho, Phi) with Phi = hbar * arg(psi), principal value.

    No global unwrapping is attempted; the result is marked wrapped and
    all downstream physics consumes gradients only.
    """
    rho = psi.density()
    phi = p.hbar * np.angle(psi.values)
    return HydroState(psi.grid, rho, phi, wrapped_phase=True)


def hydro_to_wavefunction(h: HydroState, p: ValidatedParameters) -> WaveFunction:
    """Assemble psi = sqrt(rho) * exp(i*Phi/hbar) on the grid."""
    coords = h.grid.coordinates()
    phase = h.phi_big.copy()
    for a in range(h.grid.dims):
        if h.phase_slope[a] != 0.0:
            phase = phase + h.phase_slope[a] * coords[a]
    return WaveFunction(h.grid, np.sqrt(h.rho) * np.exp(1j * phase / p.hbar))


def compute_velocity_fields(
    psi: WaveFunction, p: ValidatedParameters, m: MassTensor
) -> VelocityFields:
    """Extract current, osmotic and drift velocities from a wavefunction.

    current_v^A = (hbar/m_A) Im(d_A psi / psi), evaluated spectrally as
    Im(conj(psi) d_A psi) / rho so no phase unwrapping is ever needed.
    osmotic_u^A = -(eta/m_A) d_A log sqrt(rho) = -(eta / 2 m_A) d_A rho / rho.
    drift_b = current_v - osmotic_u.  rho is floored at
    RHO_FLOOR_REL * max(rho) inside both divisions.

    In the deterministic limit (alpha_prime = inf) the osmotic term is
    identically zero and drift coincides with the current velocity.
    """
    if m.dims != psi.grid.dims:
        raise ValidationError(f"mass tensor has {m.dims} axes, grid has {psi.grid.dims}")
    grid = psi.grid
    rho = psi.density()
    floor = RHO_FLOOR_REL * rho.max()
    node_region = rho < floor
    rho_safe = np.maximum(rho, floor)

    dpsi = spectral_gradient(grid, psi.values)
    grad_rho = spectral_gradient(grid, rho)

    inv_m = m.inverse_diag()
    current_v = np.empty((grid.dims,) + grid.shape)
    osmotic_u = np.empty_like(current_v)
    for a in range(grid.dims):
        current_v[a] = (p.hbar * inv_m[a]) * np.imag(np.conj(psi.values) * dpsi[a]) / rho_safe
        if p.is_deterministic:
            osmotic_u[a] = 0.0
        else:
            osmotic_u[a] = -(p.eta * 0.5 * inv_m[a]) * grad_rho[a] / rho_safe
    drift_b = current_v - osmotic_u
    return VelocityFields(grid, current_v, osmotic_u, drift_b, node_region)


def velocity_fields_from_hydro(
    h: HydroState, p: ValidatedParameters, m: MassTensor
) -> VelocityFields:
    """Velocity fields straight from (rho, Phi), for hybrid-theory states.

    Same definitions as compute_velocity_fields (v = m^{AB} d_B Phi,
    u = -(eta/2 m_A) d_A rho / rho, b = v - u) but differentiating the
    stored phase directly, which is exact for smooth unwrapped storage.
    """
    if m.dims != h.grid.dims:
        raise ValidationError(f"mass tensor has {m.dims} axes, grid has {h.grid.dims}")
    grid = h.grid
    floor = RHO_FLOOR_REL * h.rho.max()
    node_region = h.rho < floor
    rho_safe = np.maximum(h.rho, floor)
    grad_phi = h.grad_phase(p.hbar)
    grad_rho = spectral_gradient(grid, h.rho)

    inv_m = m.inverse_diag()
    current_v = np.empty((grid.dims,) + grid.shape)
    osmotic_u = np.empty_like(current_v)
    for a in range(grid.dims):
        current_v[a] = inv_m[a] * grad_phi[a]
        if p.is_deterministic:
            osmotic_u[a] = 0.0
        else:
            osmotic_u[a] = -(p.eta * 0.5 * inv_m[a]) * grad_rho[a] / rho_safe
    drift_b = current_v - osmotic_u
    return VelocityFields(grid, current_v, osmotic_u, drift_b, node_region)
