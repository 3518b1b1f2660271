"""Particle-trajectory generation.

The one-step transition kernel is the Gaussian produced by entropy
maximization: mean displacement b*dt with drift b^A = eta_tilde m^{AB}
d_B phi, and diagonal covariance (eta_tilde/alpha_prime) m^{AB} dt.
Finite alpha_prime drives an Euler-Maruyama ensemble; alpha_prime = inf
kills the fluctuations and trajectories follow the current-velocity flow
lines, integrated with RK4 since pathwise accuracy then matters.

Every trajectory owns a counter-based PRNG stream derived from
(master seed, trajectory id), so results are bitwise independent of how
trajectories are partitioned across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NaNVelocity, ValidationError
from .grid import Grid, interpolate_periodic
from .model import (
    HydroState,
    MassTensor,
    TrajectoryEnsemble,
    ValidatedParameters,
    VelocityFields,
    WaveFunction,
    compute_velocity_fields,
    velocity_fields_from_hydro,
)

#: drift is clamped at this many grid extents per unit dt_particle.
DRIFT_CLAMP_EXTENTS = 10.0

#: trajectories evolved together in one vectorized block.
_BLOCK = 4096

#: spawn-key domains separating initial-position draws from path noise.
_INIT_DOMAIN = 0
_PATH_DOMAIN = 1


@dataclass(frozen=True)
class KernelSpec:
    """Exact first and second moments of the one-step transition kernel."""

    mean_step: np.ndarray
    covariance_diag: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean_step, dtype=float)
        cov = np.asarray(self.covariance_diag, dtype=float)
        if mean.shape != cov.shape or mean.ndim != 1:
            raise ValidationError("kernel mean/covariance must be matching D-vectors")
        if (cov < 0.0).any():
            raise ValidationError("kernel covariance must be nonnegative")
        object.__setattr__(self, "mean_step", mean)
        object.__setattr__(self, "covariance_diag", cov)

    @property
    def is_deterministic(self) -> bool:
        return bool((self.covariance_diag == 0.0).all())


def kernel_from_unrescaled(
    grad_phi: np.ndarray, eta: float, alpha_prime: float, m: MassTensor, dt: float
) -> KernelSpec:
    """Kernel moments in the unrescaled (eta, alpha_prime) parametrization.

    mean = eta * alpha_prime * m^{AB} d_B phi * dt, variance = eta m^{AB} dt.
    Two agents with (phi, alpha_prime) and (C*phi, alpha_prime/C) at the
    same eta build identical kernels: the epistemic symmetry.
    """
    if not (dt > 0.0):
        raise ValidationError(f"dt must be positive, got {dt}")
    grad = np.asarray(grad_phi, dtype=float)
    inv_m = m.inverse_diag()
    mean = (eta * alpha_prime) * inv_m * grad * dt
    if math.isinf(alpha_prime):
        raise ValidationError("unrescaled parametrization is finite-alpha only")
    return KernelSpec(mean, eta * inv_m * dt)


def transition_kernel(
    x: np.ndarray,
    grad_phi: np.ndarray,
    p: ValidatedParameters,
    m: MassTensor,
    dt: float,
) -> KernelSpec:
    """Moments of the maximum-entropy step kernel P(x'|x) at point x.

    grad_phi is the drift-potential gradient evaluated at x (x itself only
    anchors the step; the Gaussian is in the displacement).  With
    alpha_prime = inf the covariance is identically zero and the kernel
    degenerates to the deterministic drift step.
    """
    if not (dt > 0.0):
        raise ValidationError(f"dt must be positive, got {dt}")
    grad = np.asarray(grad_phi, dtype=float)
    if np.asarray(x, dtype=float).shape != grad.shape:
        raise ValidationError("x and grad_phi must be matching D-vectors")
    inv_m = m.inverse_diag()
    mean = p.eta_tilde * inv_m * grad * dt
    if p.is_deterministic:
        cov = np.zeros_like(mean)
    else:
        cov = (p.eta_tilde / p.alpha_prime) * inv_m * dt
    return KernelSpec(mean, cov)


def sample_step(k: KernelSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one displacement from the kernel.

    Zero covariance returns the mean without touching the stream, so the
    deterministic limit is exact rather than a degenerate Gaussian.
    """
    if k.is_deterministic:
        return k.mean_step.copy()
    return k.mean_step + np.sqrt(k.covariance_diag) * rng.standard_normal(k.mean_step.size)


def derive_stream_key(master_seed: int, domain: int, index: int) -> np.random.SeedSequence:
    """Deterministic child seed for (master seed, purpose, trajectory id)."""
    return np.random.SeedSequence(master_seed, spawn_key=(domain, index))


def trajectory_stream(master_seed: int, traj_id: int) -> np.random.Generator:
    """Counter-based path-noise stream owned by one trajectory."""
    return np.random.Generator(
        np.random.Philox(derive_stream_key(master_seed, _PATH_DOMAIN, traj_id))
    )


def per_trajectory_seeds(master_seed: int, traj_ids: np.ndarray) -> np.ndarray:
    """64-bit fingerprints of each trajectory's derived stream."""
    return np.array(
        [
            derive_stream_key(master_seed, _PATH_DOMAIN, int(i)).generate_state(1, np.uint64)[0]
            for i in traj_ids
        ],
        dtype=np.uint64,
    )


def initial_ensemble(
    positions: np.ndarray, t0: float, master_seed: int, traj_ids: np.ndarray | None = None
) -> TrajectoryEnsemble:
    """Wrap start positions (n, D) into a one-frame ensemble at time t0."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    ids = np.arange(n, dtype=np.int64) if traj_ids is None else np.asarray(traj_ids, np.int64)
    return TrajectoryEnsemble(
        n_traj=n,
        frames=np.array([float(t0)]),
        positions=pos[None, :, :],
        seed=int(master_seed),
        per_traj_seeds=per_trajectory_seeds(master_seed, ids),
        traj_ids=ids,
    )


def _marginal_cell_masses(grid: Grid, rho: np.ndarray, axis: int) -> np.ndarray:
    other = tuple(a for a in range(grid.dims) if a != axis)
    marg = rho.sum(axis=other) if other else rho.copy()
    return marg / marg.sum()


def _invert_axis_cdf(grid: Grid, masses: np.ndarray, axis: int, u: np.ndarray) -> np.ndarray:
    """Inverse of the piecewise-linear CDF of per-cell masses on one axis."""
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    cum[-1] = 1.0
    cell = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, masses.size - 1)
    h = grid.spacing[axis]
    left = grid.origin[axis] - 0.5 * h + cell * h
    frac = (u - cum[cell]) / np.maximum(masses[cell], 1e-300)
    return left + np.clip(frac, 0.0, 1.0) * h


def sample_initial_positions(
    grid: Grid,
    rho: np.ndarray,
    n_traj: int,
    master_seed: int,
    product_density: bool = True,
) -> np.ndarray:
    """Draw n_traj start points distributed as rho on the grid.

    Product densities invert the per-axis marginal CDFs (one uniform per
    axis); anything else falls back to rejection sampling.  Either way
    trajectory i consumes only its own derived stream, so the draw is
    independent of ordering and worker count.
    """
    if n_traj < 1:
        raise ValidationError(f"n_traj must be >= 1, got {n_traj}")
    D = grid.dims
    out = np.empty((n_traj, D))
    if product_density:
        marginals = [_marginal_cell_masses(grid, rho, a) for a in range(D)]
        for i in range(n_traj):
            gen = np.random.Generator(
                np.random.Philox(derive_stream_key(master_seed, _INIT_DOMAIN, i))
            )
            u = gen.random(D)
            for a in range(D):
                out[i, a] = _invert_axis_cdf(grid, marginals[a], a, u[a : a + 1])[0]
        return out

    bound = rho.max() * (1.0 + 1e-12)
    lo = np.array(grid.origin)
    L = np.array(grid.extents)
    batch = 16
    for i in range(n_traj):
        gen = np.random.Generator(
            np.random.Philox(derive_stream_key(master_seed, _INIT_DOMAIN, i))
        )
        while True:
            cand = lo + L * gen.random((batch, D))
            accept = gen.random(batch) * bound <= interpolate_periodic(grid, rho, cand)
            hits = np.nonzero(accept)[0]
            if hits.size:
                out[i] = cand[hits[0]]
                break
    return out


def _drift_stack(
    frames: list, p: ValidatedParameters, m: MassTensor
) -> tuple[Grid, np.ndarray]:
    """Drift velocity b = v - u of every field frame, shape (F, D, *grid)."""
    if not frames:
        raise ValidationError("need at least one field frame")
    fields: list[VelocityFields] = []
    for fr in frames:
        if isinstance(fr, WaveFunction):
            fields.append(compute_velocity_fields(fr, p, m))
        elif isinstance(fr, HydroState):
            fields.append(velocity_fields_from_hydro(fr, p, m))
        elif isinstance(fr, VelocityFields):
            fields.append(fr)
        else:
            raise ValidationError(f"unsupported frame type {type(fr).__name__}")
    grid = fields[0].grid
    return grid, np.stack([vf.drift_b for vf in fields])


def _substeps(p: ValidatedParameters) -> int:
    ratio = p.dt_field / p.dt_particle
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9:
        raise ValidationError(
            f"dt_particle={p.dt_particle} must divide dt_field={p.dt_field}"
        )
    return n


class _PathRecorder:
    """Shared main loop: block the ensemble, pre-draw noise, step, record."""

    def __init__(self, grid: Grid, drift: np.ndarray, p: ValidatedParameters, m: MassTensor):
        self.grid = grid
        self.drift = drift
        self.p = p
        self.n_sub = _substeps(p)
        self.n_frames = drift.shape[0]
        self.total_steps = (self.n_frames - 1) * self.n_sub
        self.clamp = DRIFT_CLAMP_EXTENTS * np.array(grid.extents) / p.dt_particle
        if p.is_deterministic:
            self.noise_scale = np.zeros(grid.dims)
        else:
            self.noise_scale = np.sqrt(
                (p.eta_tilde / p.alpha_prime) * p.dt_particle * m.inverse_diag()
            )
        self.clamp_events = 0
        self.aborted: list[int] = []

    def frame_of_step(self, j: int) -> int:
        # nearest frame to the step midpoint; exact ties break upward so the
        # choice is consistent across steps
        t_mid = (j + 0.5) * self.p.dt_particle
        nearest = int(math.floor(t_mid / self.p.dt_field + 0.5))
        return min(self.n_frames - 1, max(0, nearest))

    def _velocity_at(self, frame_idx: int, pos: np.ndarray, alive: np.ndarray, ids) -> np.ndarray:
        v = interpolate_periodic(self.grid, self.drift[frame_idx], pos).T
        bad = ~np.isfinite(v).all(axis=1)
        if bad.any():
            newly = bad & alive
            self.aborted.extend(int(ids[k]) for k in np.nonzero(newly)[0])
            alive &= ~bad
            v[bad] = 0.0
        over = np.abs(v) > self.clamp
        if over.any():
            self.clamp_events += int(over.sum())
            v = np.clip(v, -self.clamp, self.clamp)
        return v

    def run_block(self, ids: np.ndarray, x0: np.ndarray, master_seed: int, rk4: bool):
        n_b = len(ids)
        D = self.grid.dims
        dt = self.p.dt_particle
        out = np.empty((self.n_frames, n_b, D))
        out[0] = x0
        pos = x0.copy()
        alive = np.ones(n_b, dtype=bool)

        if not rk4 and self.total_steps > 0:
            noise = np.empty((n_b, self.total_steps, D))
            for k, tid in enumerate(ids):
                gen = trajectory_stream(master_seed, int(tid))
                noise[k] = gen.standard_normal((self.total_steps, D))

        for j in range(self.total_steps):
            fi = self.frame_of_step(j)
            if rk4:
                k1 = self._velocity_at(fi, pos, alive, ids)
                k2 = self._velocity_at(fi, pos + 0.5 * dt * k1, alive, ids)
                k3 = self._velocity_at(fi, pos + 0.5 * dt * k2, alive, ids)
                k4 = self._velocity_at(fi, pos + dt * k3, alive, ids)
                step = (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            else:
                b = self._velocity_at(fi, pos, alive, ids)
                step = b * dt + self.noise_scale * noise[:, j, :]
            pos = self.grid.wrap(pos + np.where(alive[:, None], step, 0.0))
            if (j + 1) % self.n_sub == 0:
                out[(j + 1) // self.n_sub] = pos
        return out


def _evolve(
    frames: list,
    init: TrajectoryEnsemble,
    p: ValidatedParameters,
    m: MassTensor,
    rk4: bool,
) -> TrajectoryEnsemble:
    grid, drift = _drift_stack(frames, p, m)
    rec = _PathRecorder(grid, drift, p, m)
    t0 = float(init.frames[-1])
    frame_times = t0 + p.dt_field * np.arange(rec.n_frames)

    x0 = np.asarray(init.positions[-1], dtype=float)
    lo, L = np.array(grid.origin), np.array(grid.extents)
    if ((x0 < lo) | (x0 >= lo + L)).any():
        raise ValidationError("initial positions must lie inside the grid extents")

    positions = np.empty((rec.n_frames, init.n_traj, grid.dims))
    for s in range(0, init.n_traj, _BLOCK):
        ids = init.traj_ids[s : s + _BLOCK]
        positions[:, s : s + _BLOCK, :] = rec.run_block(ids, x0[s : s + _BLOCK], init.seed, rk4)

    if not np.isfinite(positions).all():
        raise NaNVelocity("trajectory positions became non-finite")
    return TrajectoryEnsemble(
        n_traj=init.n_traj,
        frames=frame_times,
        positions=positions,
        seed=init.seed,
        per_traj_seeds=init.per_traj_seeds,
        traj_ids=init.traj_ids,
        clamp_events=rec.clamp_events,
        aborted=tuple(sorted(set(init.aborted) | set(rec.aborted))),
    )


def evolve_ensemble(
    psi_frames: list,
    init: TrajectoryEnsemble,
    p: ValidatedParameters,
    m: MassTensor,
) -> TrajectoryEnsemble:
    """Euler-Maruyama evolution of the ensemble through the field frames.

    x <- x + b(x) dt_particle + sqrt((eta_tilde/alpha_prime) dt_particle / m) * N(0,1)
    per axis, with b linearly interpolated (periodic wrap) from the frame
    nearest in time to each particle step's midpoint.  Positions are
    recorded at every frame time.  With alpha_prime = inf the noise term
    is exactly zero (but prefer integrate_bohmian for its RK4 accuracy).
    """
    return _evolve(psi_frames, init, p, m, rk4=False)


def integrate_bohmian(
    psi_frames: list,
    init: TrajectoryEnsemble,
    p: ValidatedParameters,
    m: MassTensor,
) -> TrajectoryEnsemble:
    """Deterministic RK4 integration of dx/dt = v(x, t) along flow lines.

    Same frame selection and interpolation contract as evolve_ensemble,
    zero noise, higher-order stepping.  Requires alpha_prime = inf.
    """
    if not p.is_deterministic:
        raise ValidationError("integrate_bohmian requires alpha_prime = inf")
    return _evolve(psi_frames, init, p, m, rk4=True)
