"""Estimation stack: amplitude-eliminated maximum likelihood, the relaxed
three-step position/clock/phase pipeline, and null-space scatterer mapping.

Estimators consume an ObservationSet and use only the known side of the
scenario behind it -- stripe geometry, walls, waveform, disturbance
statistics, scatterer count and (in 2-D mode) the known UE height.  Ground
truth (UE position, offsets, scatterer positions, gains) is never read, so
each stage sees exactly what a receiver would.  Everything is deterministic
given the observations.

Parameterization of a candidate solution ("wanted" parameters): UE position,
clock offset, phase offset, scatterer positions.  Path amplitudes and
non-line-of-sight phases are nuisance parameters eliminated in closed form:
per stripe, the model is linear in one real line-of-sight amplitude (its
phase is pinned by the candidate position and phase offset) plus one free
complex amplitude per remaining path, so a small least-squares solve per
stripe compresses the likelihood onto the wanted parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import null_space, qr
from scipy.optimize import minimize

from .errors import (
    KernelEmpty,
    RankDeficient,
    SearchFailure,
    ZeroAggregate,
)
from .geometry import SPEED_OF_LIGHT, rot_z, wrap_angle

_TWO_PI = 2.0 * math.pi
# singular values below this fraction of the largest are treated as zero
_RANK_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Known-side view of the scenario
# ---------------------------------------------------------------------------


class Infrastructure:
    """What the network knows: stripes, walls, waveform, noise statistics.

    Deliberately excludes every ground-truth field of the scenario, so code
    written against this view cannot leak the answer into an estimator.  The
    UE height is exposed only in 2-D mode, where it is known by assumption.
    """

    def __init__(self, scenario, disturbances):
        self.waveform = scenario.waveform
        self.stripes = tuple(scenario.stripes)
        self.walls = tuple(scenario.walls)
        self.disturbances = list(disturbances)
        self.n_scatterers = len(scenario.scatterers)
        self.D = int(scenario.D)
        self.known_height = float(scenario.ue_position[2]) if self.D == 2 else None

    def stripe_walls(self, n: int) -> list:
        """Wall indices contributing a reflected path at stripe ``n``."""
        mounted = self.stripes[n].mounted_wall
        return [w for w in range(len(self.walls)) if w != mounted]

    def n_los_rp(self, n: int) -> int:
        return 1 + len(self.stripe_walls(n))


class _Workspace:
    """Per-call bundle of infrastructure plus whitened observations."""

    def __init__(self, obs):
        self.infra = Infrastructure(obs.scenario, obs.disturbances)
        # whitened observations, transposed to K x M for the batched products
        self.zt = [obs.whitened(n).T for n in range(len(obs))]
        self.ynorm2 = [float(np.sum(np.abs(z) ** 2)) for z in self.zt]

    @property
    def n_stripes(self) -> int:
        return len(self.zt)


# ---------------------------------------------------------------------------
# Batched geometry and response factors
# ---------------------------------------------------------------------------


def _wrap_array(x):
    return np.pi - np.mod(np.pi - np.asarray(x, float), _TWO_PI)


def _aoa_batch(targets: np.ndarray, stripe) -> np.ndarray:
    """Angles of arrival of (..., 3) targets in the stripe's local frame."""
    local = (targets - stripe.phase_center) @ rot_z(stripe.azimuth)
    return _wrap_array(0.5 * np.pi - np.arctan2(local[..., 1], local[..., 0]))


def _los_rp_geometry(infra: Infrastructure, n: int, positions: np.ndarray):
    """Angles and geometric delays of LoS + reflected paths, batched.

    ``positions`` has shape (..., 3); returns (thetas, delays) each of shape
    (..., L) in path order: LoS first, then walls in index order (the
    stripe's own wall skipped).  Reflections are handled through the mirror
    image, whose direction from the stripe coincides with the arrival ray.
    """
    stripe = infra.stripes[n]
    pc = stripe.phase_center
    thetas = [_aoa_batch(positions, stripe)]
    delays = [np.linalg.norm(positions - pc, axis=-1) / SPEED_OF_LIGHT]
    for w in infra.stripe_walls(n):
        wall = infra.walls[w]
        off = (positions - wall.point) @ wall.normal
        mirrored = positions - 2.0 * off[..., None] * wall.normal
        thetas.append(_aoa_batch(mirrored, stripe))
        delays.append(np.linalg.norm(mirrored - pc, axis=-1) / SPEED_OF_LIGHT)
    return np.stack(thetas, axis=-1), np.stack(delays, axis=-1)


def _sp_geometry(infra: Infrastructure, n: int, sp_positions: np.ndarray, ue_position):
    """Angle and two-leg geometric delay of scatterer paths, batched over SPs."""
    stripe = infra.stripes[n]
    thetas = _aoa_batch(sp_positions, stripe)
    d_s = np.linalg.norm(sp_positions - stripe.phase_center, axis=-1)
    d_us = np.linalg.norm(sp_positions - np.asarray(ue_position, float), axis=-1)
    return thetas, (d_s + d_us) / SPEED_OF_LIGHT


def _whitened_factors(infra: Infrastructure, n: int, thetas, pseudo_delays):
    """Kronecker factors of whitened responses: c' = u kron a (antenna-fastest).

    ``thetas`` and ``pseudo_delays`` share an arbitrary batch shape; u gains a
    trailing K axis, a gains a trailing M axis.
    """
    wf = infra.waveform
    stripe = infra.stripes[n]
    m_idx = np.arange(stripe.num_antennas)
    k_idx = np.arange(wf.K)
    a = np.exp(
        (1j * _TWO_PI * stripe.spacing / wf.wavelength)
        * np.sin(np.asarray(thetas))[..., None]
        * m_idx
    )
    b = np.exp((-1j * _TWO_PI * wf.delta_f) * np.asarray(pseudo_delays)[..., None] * k_idx)
    u = (b * wf.pilots) @ infra.disturbances[n].q_isqrt.T
    return u, a


def _gram_cross(u, a, zt):
    """Batched response Gram H[i,j] = c_i'^H c_j' and data cross q[l] = c_l'^H y'.

    The Kronecker structure factors every inner product into a frequency part
    and an antenna part, so the MK-long columns are never materialized.
    ``zt`` is the whitened observation as K x M.
    """
    H = np.einsum("...ik,...jk->...ij", u.conj(), u) * np.einsum(
        "...im,...jm->...ij", a.conj(), a
    )
    q = np.einsum("...lk,km,...lm->...l", u.conj(), zt, a.conj(), optimize=True)
    return H, q


def _solve_psd(H, rhs):
    """Minimum-norm solve of batched Hermitian PSD systems.

    Eigenvalues below _RANK_RTOL of the per-matrix maximum are truncated,
    which keeps least-squares residuals nonnegative when response columns
    (nearly) collide.  Returns (solution, rank).
    """
    w, V = np.linalg.eigh(H)
    wmax = np.maximum(w[..., -1:], 0.0)
    keep = w > _RANK_RTOL * wmax
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    coef = np.einsum("...ij,...i->...j", V.conj(), rhs) * inv
    x = np.einsum("...ij,...j->...i", V, coef)
    return x, keep.sum(axis=-1)


def _cp_normal(H, q, los_phase):
    """Real normal-equation system of the phase-pinned basis.

    Columns: the LoS response rotated by ``los_phase`` with a real
    coefficient, then a (c', jc') pair per remaining path (free complex
    amplitude split into two real ones).  Works for any trailing path count,
    so it serves both the LoS+RP basis and the full basis with scatterers.
    Returns (G, rhs, factors, path_idx) with G[i,j] = Re{z_i^H z_j} and
    rhs[i] = Re{z_i^H y'}.
    """
    L = H.shape[-1]
    C = 2 * L - 1
    batch = np.broadcast_shapes(H.shape[:-2], np.shape(los_phase))
    f = np.empty(batch + (C,), dtype=complex)
    f[..., 0] = np.exp(1j * np.asarray(los_phase))
    f[..., 1::2] = 1.0
    f[..., 2::2] = 1j
    path_idx = np.zeros(C, dtype=int)
    path_idx[1::2] = np.arange(1, L)
    path_idx[2::2] = np.arange(1, L)
    Hp = H[..., path_idx[:, None], path_idx[None, :]]
    G = np.real(f.conj()[..., :, None] * f[..., None, :] * Hp)
    rhs = np.real(f.conj() * q[..., path_idx])
    return G, rhs, f, path_idx


def _gains_from_real(x, los_phase):
    """Complex per-path gains from the real coefficient vector of _cp_normal."""
    L = (x.shape[-1] + 1) // 2
    gains = np.empty(x.shape[:-1] + (L,), dtype=complex)
    gains[..., 0] = x[..., 0] * np.exp(1j * np.asarray(los_phase))
    gains[..., 1:] = x[..., 1::2] + 1j * x[..., 2::2]
    return gains


# ---------------------------------------------------------------------------
# Candidate-parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WantedParams:
    """Candidate wanted-parameter set: UE position, offsets, scatterer positions."""

    position: np.ndarray
    clock_offset: float
    phase_offset: float
    sp_positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, float).reshape(3))
        object.__setattr__(
            self, "sp_positions", np.asarray(self.sp_positions, float).reshape(-1, 3)
        )

    def flat(self, D: int) -> np.ndarray:
        """Pack into the (D + 2 + 3J)-vector used by the refiners."""
        return np.concatenate(
            [
                self.position[:D],
                [self.clock_offset, self.phase_offset],
                self.sp_positions.ravel(),
            ]
        )

    @classmethod
    def from_flat(cls, x, D: int, z_fill: float = 0.0) -> "WantedParams":
        x = np.asarray(x, float)
        p = np.empty(3)
        p[:D] = x[:D]
        if D == 2:
            p[2] = z_fill
        return cls(
            position=p,
            clock_offset=float(x[D]),
            phase_offset=float(x[D + 1]),
            sp_positions=x[D + 2 :].reshape(-1, 3),
        )


@dataclass(frozen=True)
class BasisMatrix:
    """Per-stripe model basis: phase-pinned LoS column plus (c', jc') pairs."""

    B: np.ndarray

    @property
    def n_columns(self) -> int:
        return self.B.shape[1]

    @property
    def stacked_real(self) -> np.ndarray:
        return np.vstack([self.B.real, self.B.imag])


@dataclass(frozen=True)
class EstimateReport:
    """One stage's estimate of the wanted parameters plus diagnostics."""

    stage: str
    ue_position: np.ndarray
    clock_offset: float
    phase_offset: float
    sp_positions: np.ndarray
    amplitudes: Optional[tuple]
    cost: float
    cost_trace: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "ue_position", np.asarray(self.ue_position, float).reshape(3)
        )
        object.__setattr__(
            self, "sp_positions", np.asarray(self.sp_positions, float).reshape(-1, 3)
        )
        object.__setattr__(self, "phase_offset", wrap_angle(float(self.phase_offset)))

    def wanted(self) -> WantedParams:
        return WantedParams(
            position=self.ue_position,
            clock_offset=self.clock_offset,
            phase_offset=self.phase_offset,
            sp_positions=self.sp_positions,
        )


# ---------------------------------------------------------------------------
# Search configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    """Position-search settings.

    ``step`` defaults to a quarter wavelength; ``box`` defaults to the room
    footprint inferred from axis-aligned walls (falling back to the stripe
    bounding box padded by a meter), shrunk by ``margin``.  In 3-D mode the
    grid gains a z axis, so an explicit box is advisable there.

    The coherent cost oscillates on the wavelength scale with basins only a
    fraction of a wavelength wide, far narrower than any affordable full-room
    grid.  The search therefore centers a second, fine grid (``fine_step``,
    reaching ``fine_span_wavelengths`` wavelengths out per axis) on the
    noncoherent minimum, whose smooth cost picks the right neighborhood, and
    only then refines locally.
    """

    step: Optional[float] = None
    margin: float = 0.3
    box: Optional[tuple] = None
    n_fft: Optional[int] = None
    chunk: int = 2048
    refine: bool = True
    refine_maxiter: int = 600
    z_range: tuple = (0.3, 2.2)
    fine_step: Optional[float] = None
    fine_span_wavelengths: float = 2.0
    n_starts: int = 3


@dataclass(frozen=True)
class NstConfig:
    """Scatterer-search settings: 3-D grid plus dip separation."""

    step: float = 0.25
    margin: float = 0.3
    box: Optional[tuple] = None
    z_range: tuple = (0.2, 2.6)
    exclusion_steps: int = 3
    refine: bool = True
    refine_maxiter: int = 200


def _axis_aligned_box(infra: Infrastructure) -> list:
    """Room footprint from axis-aligned walls, else padded stripe extent."""
    centers = np.array([s.phase_center for s in infra.stripes])
    lo = centers.min(axis=0) - 1.0
    hi = centers.max(axis=0) + 1.0
    for wall in infra.walls:
        n = wall.normal
        for ax in range(2):
            if abs(n[ax]) > 1.0 - 1e-9:
                if n[ax] > 0:
                    lo[ax] = max(lo[ax], wall.point[ax])
                else:
                    hi[ax] = min(hi[ax], wall.point[ax])
    return [(float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1]))]


def _grid_1d(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step)) + 1
    if n < 1:
        return np.empty(0)
    return lo + step * np.arange(n)


# ---------------------------------------------------------------------------
# Coarse clock offset (delay-domain peak)
# ---------------------------------------------------------------------------


def _coarse_pseudo_delays(obs, n_fft: int) -> np.ndarray:
    """Per-stripe delay-domain peak locations from the raw observations.

    Zero-padded IFFT over subcarriers, noncoherent power sum over antennas,
    peak bin mapped back to a pseudo-delay in [0, 1/delta_f).
    """
    wf = obs.scenario.waveform
    out = np.empty(len(obs))
    for n in range(len(obs)):
        spect = np.fft.ifft(obs.observations[n].Y.T, n=n_fft, axis=0)
        power = np.sum(np.abs(spect) ** 2, axis=1)
        out[n] = int(np.argmax(power)) / (n_fft * wf.delta_f)
    return out


def _circular_mean_offsets(offsets: np.ndarray, period: float) -> np.ndarray:
    """Mean of per-stripe clock offsets respecting their 1/delta_f periodicity.

    The offsets live on a circle (the observation is exactly periodic in the
    clock offset), so they are averaged as phases; a linear mean would wreck
    cases where quantization scatters the stripes across the wrap point.
    Accepts (..., N) and reduces the last axis to [0, period).
    """
    phases = np.exp(2j * np.pi * offsets / period)
    return (period / _TWO_PI) * np.angle(phases.mean(axis=-1)) % period


def coarse_clock_offset(p, obs, n_fft: Optional[int] = None) -> float:
    """Clock offset from delay-domain peaks minus geometric delays at ``p``.

    Per stripe, the strongest delay bin estimates the line-of-sight
    pseudo-delay; subtracting the geometric delay to ``p`` and circularly
    averaging over stripes gives the offset in the unambiguous range
    [0, 1/delta_f).
    """
    wf = obs.scenario.waveform
    if n_fft is None:
        n_fft = 16 * wf.K
    if n_fft < wf.K:
        raise ValueError("n_fft must be at least the subcarrier count")
    taus = _coarse_pseudo_delays(obs, n_fft)
    period = 1.0 / wf.delta_f
    p = np.asarray(p, float)
    offsets = []
    for n in range(len(obs)):
        dist = float(np.linalg.norm(p - obs.scenario.stripes[n].phase_center))
        offsets.append((taus[n] - dist / SPEED_OF_LIGHT) % period)
    return float(_circular_mean_offsets(np.asarray(offsets), period))


# ---------------------------------------------------------------------------
# Core cost evaluations (batched)
# ---------------------------------------------------------------------------


def _ncp_cp_costs(ws: _Workspace, positions: np.ndarray, dtaus: np.ndarray):
    """Noncoherent and coherent LoS+RP costs for batched candidates.

    For each candidate position (with its clock offset), solves the per-stripe
    complex least squares (free path gains), reads the phase offset off the
    derotated LoS gains, then re-solves with the LoS phase pinned.  Returns
    (ncp_cost, cp_cost, dphi, per-stripe CP gain list at each candidate is
    not kept -- use _cp_point for single candidates).
    """
    infra = ws.infra
    fc = infra.waveform.fc
    batch = positions.shape[:-1]
    ncp = np.zeros(batch)
    xi_sum = np.zeros(batch, dtype=complex)
    cache = []
    for n in range(ws.n_stripes):
        thetas, delays = _los_rp_geometry(infra, n, positions)
        pseudo = delays + dtaus[..., None]
        u, a = _whitened_factors(infra, n, thetas, pseudo)
        H, q = _gram_cross(u, a, ws.zt[n])
        gamma, _ = _solve_psd(H, q)
        explained = np.real(np.einsum("...l,...l->...", q.conj(), gamma))
        ncp += np.maximum(ws.ynorm2[n] - explained, 0.0)
        xi_sum += gamma[..., 0] * np.exp(1j * _TWO_PI * fc * delays[..., 0])
        cache.append((H, q, delays[..., 0]))
    dphi = np.angle(xi_sum)
    cp = np.zeros(batch)
    for n in range(ws.n_stripes):
        H, q, tau_los = cache[n]
        los_phase = -_TWO_PI * fc * tau_los + dphi
        G, rhs, _, _ = _cp_normal(H, q, los_phase)
        x, _ = _solve_psd(G, rhs)
        explained = np.einsum("...c,...c->...", rhs, x)
        cp += np.maximum(ws.ynorm2[n] - explained, 0.0)
    return ncp, cp, dphi


def _direct_residual(zt, gains, u, a) -> float:
    """Exact residual energy of a fitted path sum (no Gram cancellation)."""
    fitted = np.einsum("l,lk,lm->km", gains, u, a)
    return float(np.sum(np.abs(zt - fitted) ** 2))


def _cp_point(ws: _Workspace, position, dtau: float):
    """Single-candidate coherent evaluation returning cost, dphi and gains."""
    positions = np.asarray(position, float).reshape(1, 3)
    dtaus = np.array([dtau])
    infra = ws.infra
    fc = infra.waveform.fc
    xi_sum = 0.0 + 0.0j
    cache = []
    for n in range(ws.n_stripes):
        thetas, delays = _los_rp_geometry(infra, n, positions)
        u, a = _whitened_factors(infra, n, thetas, delays + dtaus[..., None])
        H, q = _gram_cross(u, a, ws.zt[n])
        gamma, _ = _solve_psd(H, q)
        xi_sum += complex(gamma[0, 0] * np.exp(1j * _TWO_PI * fc * delays[0, 0]))
        cache.append((H[0], q[0], float(delays[0, 0]), u[0], a[0]))
    dphi = float(np.angle(xi_sum))
    cost = 0.0
    gains = []
    for n in range(ws.n_stripes):
        H, q, tau_los, u, a = cache[n]
        los_phase = -_TWO_PI * fc * tau_los + dphi
        G, rhs, _, _ = _cp_normal(H, q, los_phase)
        x, _ = _solve_psd(G, rhs)
        g = _gains_from_real(x, los_phase)
        cost += _direct_residual(ws.zt[n], g, u, a)
        gains.append(g)
    return cost, dphi, gains


def _jml_point(ws: _Workspace, eta: WantedParams, strict: bool = False):
    """Amplitude-eliminated likelihood at one wanted-parameter point.

    Builds the per-stripe Gram over LoS + reflected + scatterer paths, pins
    the LoS phase from (position, phase offset), and solves the stacked-real
    least squares through the normal equations.  Returns (cost, gains list).
    """
    infra = ws.infra
    fc = infra.waveform.fc
    positions = eta.position.reshape(1, 3)
    cost = 0.0
    gains = []
    for n in range(ws.n_stripes):
        thetas, delays = _los_rp_geometry(infra, n, positions)
        thetas, delays = thetas[0], delays[0]
        if eta.sp_positions.size:
            th_sp, d_sp = _sp_geometry(infra, n, eta.sp_positions, eta.position)
            thetas = np.concatenate([thetas, th_sp])
            delays = np.concatenate([delays, d_sp])
        u, a = _whitened_factors(infra, n, thetas, delays + eta.clock_offset)
        H, q = _gram_cross(u, a, ws.zt[n])
        los_phase = -_TWO_PI * fc * float(delays[0]) + eta.phase_offset
        G, rhs, _, _ = _cp_normal(H, q, los_phase)
        x, rank = _solve_psd(G, rhs)
        if strict and int(rank) < G.shape[-1]:
            w = np.linalg.eigvalsh(G)
            raise RankDeficient(
                f"stripe {n}: path responses are linearly dependent "
                f"(rank {int(rank)}/{G.shape[-1]}, extreme eigenvalues "
                f"{w[0]:.3e}/{w[-1]:.3e})"
            )
        g = _gains_from_real(x, los_phase)
        cost += _direct_residual(ws.zt[n], g, u, a)
        gains.append(g)
    return cost, gains


# ---------------------------------------------------------------------------
# Contract-level single-point estimators
# ---------------------------------------------------------------------------


def jml_basis(eta_w: WantedParams, obs, stripe_index: int) -> BasisMatrix:
    """Explicit per-stripe basis matrix at a wanted-parameter point.

    Column 0 carries the line-of-sight response rotated to its carrier phase
    (real coefficient); every remaining path contributes a (c', jc') pair.
    The fast paths never materialize this matrix -- it exists for inspection
    and for verifying the Gram-based solver against a dense one.
    """
    ws = _Workspace(obs)
    infra = ws.infra
    n = stripe_index
    positions = eta_w.position.reshape(1, 3)
    thetas, delays = _los_rp_geometry(infra, n, positions)
    thetas, delays = thetas[0], delays[0]
    if eta_w.sp_positions.size:
        th_sp, d_sp = _sp_geometry(infra, n, eta_w.sp_positions, eta_w.position)
        thetas = np.concatenate([thetas, th_sp])
        delays = np.concatenate([delays, d_sp])
    u, a = _whitened_factors(infra, n, thetas, delays + eta_w.clock_offset)
    cols = (u[:, :, None] * a[:, None, :]).reshape(len(thetas), -1).T
    fc = infra.waveform.fc
    los_phase = -_TWO_PI * fc * float(delays[0]) + eta_w.phase_offset
    out = [np.exp(1j * los_phase) * cols[:, 0]]
    for i in range(1, cols.shape[1]):
        out.append(cols[:, i])
        out.append(1j * cols[:, i])
    return BasisMatrix(B=np.column_stack(out))


def jml_amplitudes(eta_w: WantedParams, obs) -> list:
    """Closed-form per-stripe path gains at a wanted-parameter point.

    The first gain is the line-of-sight one (real amplitude rotated to the
    pinned phase); the rest follow the path order (reflections, then
    scatterers).

    Raises RankDeficient when path responses collide.
    """
    _, gains = _jml_point(_Workspace(obs), eta_w, strict=True)
    return [g.copy() for g in gains]


def jml_cost(eta_w: WantedParams, obs) -> float:
    """Amplitude-eliminated likelihood cost at a wanted-parameter point."""
    cost, _ = _jml_point(_Workspace(obs), eta_w, strict=True)
    return float(cost)


def rml_ncp_amplitudes_and_cost(p, delta_tau: float, obs):
    """Per-stripe free-gain least squares over LoS + reflected paths.

    Returns (gains list, cost).  This is the noncoherent relaxation: every
    path, the line of sight included, gets an unconstrained complex gain.
    """
    ws = _Workspace(obs)
    infra = ws.infra
    positions = np.asarray(p, float).reshape(1, 3)
    gains = []
    cost = 0.0
    for n in range(ws.n_stripes):
        thetas, delays = _los_rp_geometry(infra, n, positions)
        u, a = _whitened_factors(infra, n, thetas, delays + delta_tau)
        H, q = _gram_cross(u, a, ws.zt[n])
        gamma, rank = _solve_psd(H, q)
        if int(rank[0]) < H.shape[-1]:
            w = np.linalg.eigvalsh(H[0])
            raise RankDeficient(
                f"stripe {n}: path responses are linearly dependent "
                f"(rank {int(rank[0])}/{H.shape[-1]}, extreme eigenvalues "
                f"{w[0].real:.3e}/{w[-1].real:.3e})"
            )
        cost += _direct_residual(ws.zt[n], gamma[0], u[0], a[0])
        gains.append(gamma[0])
    return gains, float(cost)


def estimate_phase_offset(p, delta_tau: float, obs) -> float:
    """Phase offset from derotated line-of-sight gains, averaged coherently.

    Each stripe's estimated LoS gain is rotated back by its geometric carrier
    phase at ``p``; the complex sum then points along the common phase
    offset.

    Raises ZeroAggregate when the sum is numerically zero (undefined phase).
    """
    gains, _ = rml_ncp_amplitudes_and_cost(p, delta_tau, obs)
    fc = obs.scenario.waveform.fc
    p = np.asarray(p, float)
    total = 0.0 + 0.0j
    for n, g in enumerate(gains):
        dist = float(np.linalg.norm(p - obs.scenario.stripes[n].phase_center))
        total += complex(g[0]) * np.exp(1j * _TWO_PI * fc * dist / SPEED_OF_LIGHT)
    if abs(total) < 1e-12:
        raise ZeroAggregate("derotated line-of-sight gains sum to zero")
    return wrap_angle(float(np.angle(total)))


# ---------------------------------------------------------------------------
# Position search (grid + local refinement)
# ---------------------------------------------------------------------------


def _nm_minimize(fun, x0: np.ndarray, steps: np.ndarray, maxiter: int):
    """Nelder-Mead in coordinates scaled by per-parameter steps.

    Optimizes g(s) = fun(x0 + steps * s) so the simplex sees O(1) moves in
    every direction regardless of units; returns (x_best, f_best, nit, nfev).
    """
    def scaled(s):
        val = fun(x0 + steps * s)
        return val if np.isfinite(val) else 1e300

    n = len(x0)
    simplex = np.zeros((n + 1, n))
    simplex[1:] += np.eye(n)
    f0 = scaled(np.zeros(n))
    res = minimize(
        scaled,
        np.zeros(n),
        method="Nelder-Mead",
        options=dict(
            initial_simplex=simplex,
            xatol=1e-3,
            fatol=1e-8 * (1.0 + abs(f0)),
            maxiter=maxiter,
            maxfev=4 * maxiter,
        ),
    )
    if res.fun <= f0:
        return x0 + steps * res.x, float(res.fun), int(res.nit), int(res.nfev)
    return x0, float(f0), int(res.nit), int(res.nfev)


def _position_grid(infra: Infrastructure, cfg: SearchConfig):
    step = cfg.step if cfg.step is not None else infra.waveform.wavelength / 4.0
    if cfg.box is not None:
        axes = [
            _grid_1d(lo + cfg.margin, hi - cfg.margin, step) for lo, hi in cfg.box
        ]
    else:
        box = _axis_aligned_box(infra)
        axes = [_grid_1d(lo + cfg.margin, hi - cfg.margin, step) for lo, hi in box]
        if infra.D == 3:
            axes.append(_grid_1d(cfg.z_range[0], cfg.z_range[1], step))
    if any(ax.size == 0 for ax in axes) or not axes:
        raise SearchFailure("empty position grid; widen the box or reduce the margin")
    if infra.D == 2:
        xs, ys = axes[0], axes[1]
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack(
            [X.ravel(), Y.ravel(), np.full(X.size, infra.known_height)]
        )
    else:
        X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    return pts, step


def _position_stage(obs, cfg: Optional[SearchConfig]):
    """Shared grid scan feeding both the noncoherent and coherent reports."""
    if cfg is None:
        cfg = SearchConfig()
    ws = _Workspace(obs)
    infra = ws.infra
    wf = infra.waveform
    pts, step = _position_grid(infra, cfg)
    n_fft = cfg.n_fft if cfg.n_fft is not None else 16 * wf.K
    if n_fft < wf.K:
        raise ValueError("n_fft must be at least the subcarrier count")
    taus = _coarse_pseudo_delays(obs, n_fft)
    period = 1.0 / wf.delta_f
    centers = np.array([s.phase_center for s in infra.stripes])

    def tied_dtaus(points):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
        offsets = (taus[None, :] - dists / SPEED_OF_LIGHT) % period
        return _circular_mean_offsets(offsets, period)

    best = {
        "ncp": (np.inf, None),
        "cp": (np.inf, None),
    }

    def scan(points):
        for start in range(0, len(points), cfg.chunk):
            chunk = points[start : start + cfg.chunk]
            dtaus = tied_dtaus(chunk)
            ncp, cp, dphi = _ncp_cp_costs(ws, chunk, dtaus)
            k = int(np.argmin(ncp))
            if ncp[k] < best["ncp"][0]:
                best["ncp"] = (
                    float(ncp[k]),
                    (chunk[k], float(dtaus[k]), float(dphi[k])),
                )
            k = int(np.argmin(cp))
            if cp[k] < best["cp"][0]:
                best["cp"] = (
                    float(cp[k]),
                    (chunk[k], float(dtaus[k]), float(dphi[k])),
                )

    scan(pts)

    # fine coherent pass around the noncoherent pick: the coherent basins are
    # narrower than the coarse step, so resolve them before refining
    lam = wf.wavelength
    if cfg.fine_step is not None:
        fine_step = cfg.fine_step
    else:
        fine_step = lam / 40.0 if infra.D == 2 else lam / 12.0
    span = cfg.fine_span_wavelengths * lam
    center = best["ncp"][1][0]
    offsets = np.arange(-span, span + 0.5 * fine_step, fine_step)
    if infra.D == 2:
        FX, FY = np.meshgrid(center[0] + offsets, center[1] + offsets, indexing="ij")
        fine = np.column_stack(
            [FX.ravel(), FY.ravel(), np.full(FX.size, center[2])]
        )
    else:
        FX, FY, FZ = np.meshgrid(
            center[0] + offsets, center[1] + offsets, center[2] + offsets,
            indexing="ij",
        )
        fine = np.column_stack([FX.ravel(), FY.ravel(), FZ.ravel()])
    fine_cp = np.empty(len(fine))
    fine_dtau = np.empty(len(fine))
    for start in range(0, len(fine), cfg.chunk):
        chunk = fine[start : start + cfg.chunk]
        dtaus = tied_dtaus(chunk)
        ncp, cp, dphi = _ncp_cp_costs(ws, chunk, dtaus)
        fine_cp[start : start + len(chunk)] = cp
        fine_dtau[start : start + len(chunk)] = dtaus
        k = int(np.argmin(ncp))
        if ncp[k] < best["ncp"][0]:
            best["ncp"] = (
                float(ncp[k]),
                (chunk[k], float(dtaus[k]), float(dphi[k])),
            )
        k = int(np.argmin(cp))
        if cp[k] < best["cp"][0]:
            best["cp"] = (
                float(cp[k]),
                (chunk[k], float(dtaus[k]), float(dphi[k])),
            )

    # refinement starts: best fine cells at least half a wavelength apart,
    # guarding against the true basin being narrowly outscored by a sidelobe
    order = np.argsort(fine_cp, kind="stable")
    start_idx = []
    for idx in order:
        if all(
            np.linalg.norm(fine[idx] - fine[j]) >= 0.5 * lam for j in start_idx
        ):
            start_idx.append(int(idx))
        if len(start_idx) >= max(1, cfg.n_starts):
            break

    # noncoherent stage report (grid resolution only; its cost is smooth)
    ncp_cost, (p_ncp, dt_ncp, dphi_ncp) = best["ncp"]
    gains_ncp, _ = rml_ncp_amplitudes_and_cost(p_ncp, dt_ncp, obs)
    ncp_report = EstimateReport(
        stage="RML-NCP",
        ue_position=p_ncp,
        clock_offset=dt_ncp,
        phase_offset=dphi_ncp,
        sp_positions=np.empty((0, 3)),
        amplitudes=tuple(gains_ncp),
        cost=ncp_cost,
        cost_trace=(ncp_cost,),
    )

    # coherent stage: local refinement of (p, dtau) from each start, best wins
    cp_cost0, (p_cp, dt_cp, _) = best["cp"]
    D = infra.D
    z_fill = infra.known_height if D == 2 else 0.0

    def unpack(x):
        p = np.empty(3)
        p[:D] = x[:D]
        p[2] = z_fill if D == 2 else x[2]
        return p, float(x[D])

    def objective(x):
        p, dt = unpack(x)
        return _cp_point(ws, p, dt)[0]

    nit = nfev = 0
    if cfg.refine:
        steps = np.concatenate(
            [np.full(D, lam / 8.0), [1.0 / (8.0 * wf.bandwidth)]]
        )
        runs = []
        for idx in start_idx:
            x0 = np.concatenate([fine[idx][:D], [fine_dtau[idx]]])
            runs.append(_nm_minimize(objective, x0, steps, cfg.refine_maxiter))
        x_best, cp_cost, nit, nfev = min(runs, key=lambda r: r[1])
    else:
        x_best = np.concatenate([p_cp[:D], [dt_cp]])
        cp_cost = cp_cost0
    p_best, dt_best = unpack(x_best)
    final_cost, dphi_best, gains_cp = _cp_point(ws, p_best, dt_best)
    rml_report = EstimateReport(
        stage="RML",
        ue_position=p_best,
        clock_offset=dt_best,
        phase_offset=dphi_best,
        sp_positions=np.empty((0, 3)),
        amplitudes=tuple(g[0] for g in gains_cp),
        cost=final_cost,
        cost_trace=(cp_cost0, final_cost, nit, nfev),
    )
    return ncp_report, rml_report


def rml_position_search(obs, config: Optional[SearchConfig] = None) -> EstimateReport:
    """Position and clock offset by coherent grid search plus refinement.

    The grid is scanned at the configured step with the clock offset tied to
    each candidate through the delay-domain peaks and the phase offset
    re-estimated in closed form per candidate; a simplex refinement of
    (position, clock offset) follows and never raises the cost above the best
    grid cell.
    """
    return _position_stage(obs, config)[1]


def cp_cost_slice(obs, positions, delta_tau: float) -> np.ndarray:
    """Coherent cost along an arbitrary set of positions at fixed clock offset.

    Exposes the oscillatory structure of the phase-coherent cost (wavelength
    -scale lobes) for diagnostics; the phase offset is re-estimated per point
    exactly as the search does.
    """
    ws = _Workspace(obs)
    pts = np.asarray(positions, float).reshape(-1, 3)
    dtaus = np.full(len(pts), float(delta_tau))
    _, cp, _ = _ncp_cp_costs(ws, pts, dtaus)
    return cp


# ---------------------------------------------------------------------------
# Null-space scatterer mapping
# ---------------------------------------------------------------------------


def _los_rp_basis_columns(ws: _Workspace, n: int, p_hat, delta_tau: float):
    """Explicit whitened LoS+RP columns at the plugged-in estimates."""
    positions = np.asarray(p_hat, float).reshape(1, 3)
    thetas, delays = _los_rp_geometry(ws.infra, n, positions)
    u, a = _whitened_factors(ws.infra, n, thetas[0], delays[0] + delta_tau)
    return (u[:, :, None] * a[:, None, :]).reshape(u.shape[0], -1).T


def nst_kernels(obs, p_hat, delta_tau_hat: float) -> list:
    """Orthonormal null-space bases of the per-stripe LoS+RP response span.

    Raises KernelEmpty when a stripe has no null space (MK <= L).
    """
    ws = _Workspace(obs)
    kernels = []
    for n in range(ws.n_stripes):
        C = _los_rp_basis_columns(ws, n, p_hat, delta_tau_hat)
        if C.shape[0] <= C.shape[1]:
            raise KernelEmpty(
                f"stripe {n}: observation dimension {C.shape[0]} does not exceed "
                f"path count {C.shape[1]}"
            )
        kernels.append(null_space(C.conj().T))
    return kernels


def _nst_grid(infra: Infrastructure, cfg: NstConfig) -> np.ndarray:
    if cfg.box is not None:
        axes = [_grid_1d(lo + cfg.margin, hi - cfg.margin, cfg.step) for lo, hi in cfg.box]
    else:
        box = _axis_aligned_box(infra)
        axes = [_grid_1d(lo + cfg.margin, hi - cfg.margin, cfg.step) for lo, hi in box]
        axes.append(_grid_1d(cfg.z_range[0], cfg.z_range[1], cfg.step))
    if any(ax.size == 0 for ax in axes) or len(axes) != 3:
        raise SearchFailure("empty scatterer grid; widen the box or reduce the margin")
    X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def nst_map_scatterers(
    obs,
    p_hat,
    delta_tau_hat: float,
    delta_phi_hat: float = 0.0,
    n_scatterers: Optional[int] = None,
    config: Optional[NstConfig] = None,
) -> list:
    """Scatterer positions from dips of the null-space residual.

    Per stripe, the observation is projected onto the orthogonal complement
    of the LoS+RP span evaluated at the plugged-in (position, clock offset);
    candidate scatterer responses are then matched against the projected
    data over a 3-D grid, and the requested number of well-separated dips is
    returned, each locally refined.  The phase offset argument completes the
    plugged-in estimate set but drops out of the dip metric (per-stripe
    scatterer gains are free complex).

    Raises KernelEmpty when the null space is empty, SearchFailure when the
    grid is empty.
    """
    if config is None:
        config = NstConfig()
    ws = _Workspace(obs)
    infra = ws.infra
    J = infra.n_scatterers if n_scatterers is None else int(n_scatterers)
    if J == 0:
        return []
    p_hat = np.asarray(p_hat, float)

    # per-stripe projector data: orthonormal span Q_n of the LoS+RP columns
    proj = []
    for n in range(ws.n_stripes):
        C = _los_rp_basis_columns(ws, n, p_hat, delta_tau_hat)
        if C.shape[0] <= C.shape[1]:
            raise KernelEmpty(
                f"stripe {n}: observation dimension {C.shape[0]} does not exceed "
                f"path count {C.shape[1]}"
            )
        Q, _ = qr(C, mode="economic")
        # antenna-fastest vectorization: y[k*M + m] = Y'[m, k] = zt[k, m]
        y = ws.zt[n].reshape(-1)
        qy = Q.conj().T @ y
        resid = y - Q @ qy
        proj.append((Q, resid, float(np.real(resid.conj() @ resid))))

    def dip_costs(cands: np.ndarray) -> np.ndarray:
        total = np.zeros(len(cands))
        for n in range(ws.n_stripes):
            Q, resid, znorm2 = proj[n]
            th, d = _sp_geometry(infra, n, cands, p_hat)
            u, a = _whitened_factors(infra, n, th, d + delta_tau_hat)
            M = a.shape[-1]
            cnorm2 = M * np.sum(np.abs(u) ** 2, axis=-1)
            Qr = Q.reshape(ws.infra.waveform.K, M, Q.shape[1])
            w = np.einsum("gk,gm,kml->gl", u.conj(), a.conj(), Qr, optimize=True)
            zr = resid.reshape(ws.infra.waveform.K, M)
            t = np.einsum("gk,km,gm->g", u.conj(), zr, a.conj(), optimize=True)
            g2 = cnorm2 - np.sum(np.abs(w) ** 2, axis=-1)
            ok = g2 > 1e-12 * cnorm2
            term = np.full(len(cands), znorm2)
            term[ok] -= np.abs(t[ok]) ** 2 / g2[ok]
            total += np.maximum(term, 0.0)
        return total

    cands = _nst_grid(infra, config)
    costs = dip_costs(cands)
    order = np.argsort(costs, kind="stable")
    min_sep = config.exclusion_steps * config.step
    picked = []
    for idx in order:
        c = cands[idx]
        if all(np.linalg.norm(c - cands[j]) >= min_sep for j in picked):
            picked.append(int(idx))
            if len(picked) == J:
                break
    if len(picked) < J:
        raise SearchFailure(
            f"found only {len(picked)} separated dips for {J} scatterers"
        )

    estimates = []
    for idx in picked:
        x0 = cands[idx].copy()
        if config.refine:
            steps = np.full(3, config.step / 2.0)
            x_best, _, _, _ = _nm_minimize(
                lambda x: float(dip_costs(x.reshape(1, 3))[0]),
                x0,
                steps,
                config.refine_maxiter,
            )
            estimates.append(x_best)
        else:
            estimates.append(x0)
    return [np.asarray(e, float) for e in estimates]


# ---------------------------------------------------------------------------
# Joint refinement and the full pipeline
# ---------------------------------------------------------------------------


def jml_refine(initial: EstimateReport, obs, maxiter: int = 2000) -> EstimateReport:
    """Simplex refinement of all wanted parameters from a pipeline initialization.

    Minimizes the amplitude-eliminated likelihood over position, clock
    offset, phase offset and scatterer positions; falls back to the initial
    point if the search cannot improve it, so the returned cost never
    exceeds the initial one.
    """
    ws = _Workspace(obs)
    infra = ws.infra
    D = infra.D
    z_fill = infra.known_height if D == 2 else 0.0
    wf = infra.waveform
    x0 = initial.wanted().flat(D)

    def objective(x):
        eta = WantedParams.from_flat(x, D, z_fill)
        try:
            cost, _ = _jml_point(ws, eta)
        except (np.linalg.LinAlgError, FloatingPointError):
            return np.inf
        return cost

    lam = wf.wavelength
    steps = np.concatenate(
        [
            np.full(D, lam / 8.0),
            [1.0 / (8.0 * wf.bandwidth), 0.1],
            np.full(3 * initial.sp_positions.shape[0], lam / 8.0),
        ]
    )
    f0 = objective(x0)
    x_best, f_best, nit, nfev = _nm_minimize(objective, x0, steps, maxiter)
    eta = WantedParams.from_flat(x_best, D, z_fill)
    _, gains = _jml_point(ws, eta)
    return EstimateReport(
        stage="JML",
        ue_position=eta.position,
        clock_offset=eta.clock_offset,
        phase_offset=eta.phase_offset,
        sp_positions=eta.sp_positions,
        amplitudes=tuple(gains),
        cost=f_best,
        cost_trace=(f0, f_best, nit, nfev),
    )


def run_pipeline(
    obs,
    search: Optional[SearchConfig] = None,
    nst: Optional[NstConfig] = None,
    jml_maxiter: int = 2000,
) -> tuple:
    """Full estimation chain; returns one report per stage, in running order.

    Stages: noncoherent grid pick, coherent search with refinement, null-space
    scatterer mapping at the coherent estimates, then joint simplex refinement
    of everything.  Each stage consumes only measured data and the outputs of
    earlier stages.
    """
    ncp_report, rml_report = _position_stage(obs, search)
    infra_j = len(obs.scenario.scatterers)
    if infra_j > 0:
        sps = nst_map_scatterers(
            obs,
            rml_report.ue_position,
            rml_report.clock_offset,
            rml_report.phase_offset,
            config=nst,
        )
        sp_arr = np.array(sps).reshape(-1, 3)
    else:
        sp_arr = np.empty((0, 3))
    nst_report = EstimateReport(
        stage="NST",
        ue_position=rml_report.ue_position,
        clock_offset=rml_report.clock_offset,
        phase_offset=rml_report.phase_offset,
        sp_positions=sp_arr,
        amplitudes=None,
        cost=rml_report.cost,
        cost_trace=(),
    )
    init = EstimateReport(
        stage="JML",
        ue_position=rml_report.ue_position,
        clock_offset=rml_report.clock_offset,
        phase_offset=rml_report.phase_offset,
        sp_positions=sp_arr,
        amplitudes=None,
        cost=np.inf,
        cost_trace=(),
    )
    jml_report = jml_refine(init, obs, maxiter=jml_maxiter)
    return ncp_report, rml_report, nst_report, jml_report
