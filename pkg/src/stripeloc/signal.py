"""Steering vectors, per-path responses, observation synthesis and SDNR accounting.

Vectorization convention: an M x K observation matrix Y (antennas x
subcarriers) is vectorized antenna-fastest, y[k*M + m] = Y[m, k], matching
the Kronecker ordering of the response c = (b(tau) * s) kron a(theta).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.constants import Boltzmann

from .channel import (
    DisturbanceCov,
    disturbance_covariance,
    path_phase,
    rp_amplitude,
    sp_amplitude,
)
from .geometry import SPEED_OF_LIGHT, PathGeometry, PathKind, Stripe, enumerate_paths


@dataclass(frozen=True)
class Waveform:
    """OFDM pilot waveform: carrier, K subcarriers at spacing delta_f, unit-norm
    pilot symbols, and the reference temperature setting the noise floor."""

    fc: float
    K: int
    delta_f: float
    pilots: Optional[np.ndarray] = None
    temperature: float = 290.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.delta_f <= 0.0:
            raise ValueError("delta_f must be positive")
        s = self.pilots
        if s is None:
            s = np.full(self.K, 1.0 / math.sqrt(self.K), dtype=complex)
        else:
            s = np.asarray(s, dtype=complex).reshape(-1)
            if s.size != self.K:
                raise ValueError("pilot length must equal K")
            if abs(np.linalg.norm(s) - 1.0) > 1e-9:
                raise ValueError("pilots must have unit norm")
        object.__setattr__(self, "pilots", s)

    @property
    def bandwidth(self) -> float:
        return self.K * self.delta_f

    @property
    def sigma2(self) -> float:
        """Total thermal noise power over the band, k_B * T * B."""
        return Boltzmann * self.temperature * self.bandwidth

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.fc


# ---------------------------------------------------------------------------
# Steering vectors and responses
# ---------------------------------------------------------------------------


def steering_spatial(theta: float, M: int, d: float, lam: float) -> np.ndarray:
    """ULA spatial steering vector, element 0 at the phase center."""
    m = np.arange(M)
    return np.exp(2j * math.pi * d * m * math.sin(theta) / lam)


def d_steering_spatial(theta: float, M: int, d: float, lam: float) -> np.ndarray:
    """Derivative of :func:`steering_spatial` with respect to theta."""
    m = np.arange(M)
    a = steering_spatial(theta, M, d, lam)
    return (2j * math.pi * d * math.cos(theta) / lam) * m * a


def steering_frequency(tau: float, K: int, delta_f: float) -> np.ndarray:
    """Frequency-domain steering vector across K subcarriers."""
    k = np.arange(K)
    return np.exp(-2j * math.pi * k * delta_f * tau)


def d_steering_frequency(tau: float, K: int, delta_f: float) -> np.ndarray:
    """Derivative of :func:`steering_frequency` with respect to tau."""
    k = np.arange(K)
    return (-2j * math.pi * delta_f * k) * steering_frequency(tau, K, delta_f)


def response(theta: float, tau: float, waveform: Waveform, stripe: Stripe) -> np.ndarray:
    """Angular-delay response c = (b(tau) * s) kron a(theta), length M*K."""
    a = steering_spatial(theta, stripe.num_antennas, stripe.spacing, waveform.wavelength)
    b = steering_frequency(tau, waveform.K, waveform.delta_f)
    return np.kron(b * waveform.pilots, a)


def whitened_response_parts(
    theta: float,
    tau: float,
    waveform: Waveform,
    stripe: Stripe,
    disturbance: DisturbanceCov,
) -> tuple[np.ndarray, np.ndarray]:
    """Kronecker factors (u, a) of the whitened response c' = u kron a.

    u = L^{-1} (b(tau) * s) carries the frequency side of the whitening; the
    antenna side is untouched because the disturbance is white over antennas.
    """
    a = steering_spatial(theta, stripe.num_antennas, stripe.spacing, waveform.wavelength)
    b = steering_frequency(tau, waveform.K, waveform.delta_f)
    u = disturbance.whiten_freq(b * waveform.pilots)
    return u, a


def whitened_response(
    theta: float,
    tau: float,
    waveform: Waveform,
    stripe: Stripe,
    disturbance: DisturbanceCov,
) -> np.ndarray:
    """Whitened angular-delay response c' = R^{-1/2} c, length M*K."""
    u, a = whitened_response_parts(theta, tau, waveform, stripe, disturbance)
    return np.kron(u, a)


# ---------------------------------------------------------------------------
# Path gains and noise-free model
# ---------------------------------------------------------------------------


def path_amplitudes_and_phases(
    scenario, stripe_index: int, paths: Optional[Sequence[PathGeometry]] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Real amplitudes and carrier phases of all paths at one stripe."""
    stripe = scenario.stripes[stripe_index]
    if paths is None:
        paths = enumerate_paths(scenario, stripe_index)
    dphi = float(scenario.phase_offsets[stripe_index])
    alphas = np.empty(len(paths))
    phases = np.empty(len(paths))
    for i, path in enumerate(paths):
        if path.kind is PathKind.SP:
            alphas[i] = sp_amplitude(scenario, stripe, path)
        else:
            alphas[i] = rp_amplitude(scenario, stripe, path)
        phases[i] = path_phase(path, scenario.waveform.fc, delta_phi_n=dphi)
    return alphas, phases


def path_gains(scenario, stripe_index: int, paths=None) -> np.ndarray:
    """Complex path gains gamma = alpha * exp(j*phi) for one stripe."""
    alphas, phases = path_amplitudes_and_phases(scenario, stripe_index, paths)
    return alphas * np.exp(1j * phases)


def noise_free_matrix(scenario, stripe_index: int) -> np.ndarray:
    """Noise-free M x K observation: sum of rank-1 per-path terms."""
    stripe = scenario.stripes[stripe_index]
    wf = scenario.waveform
    paths = enumerate_paths(scenario, stripe_index)
    gains = path_gains(scenario, stripe_index, paths)
    Y = np.zeros((stripe.num_antennas, wf.K), dtype=complex)
    for gamma, path in zip(gains, paths):
        a = steering_spatial(path.aoa, stripe.num_antennas, stripe.spacing, wf.wavelength)
        b = steering_frequency(path.pseudo_delay, wf.K, wf.delta_f)
        Y += gamma * np.outer(a, b * wf.pilots)
    return Y


def make_disturbances(scenario) -> list[DisturbanceCov]:
    """One disturbance covariance per stripe (identical DMC statistics)."""
    wf = scenario.waveform
    return [
        disturbance_covariance(scenario.dmc, wf.sigma2, wf.pilots, wf.K, st.num_antennas)
        for st in scenario.stripes
    ]


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    """Generative parameter record attached to synthesized observations."""

    ue_position: np.ndarray
    clock_offset: float
    phase_offsets: np.ndarray
    sp_positions: np.ndarray  # J x 3
    gains: tuple  # per-stripe complex path gains, enumerate_paths order


@dataclass(frozen=True)
class Observation:
    """One stripe's M x K spatial-frequency observation."""

    stripe_index: int
    Y: np.ndarray
    rng_seed: tuple
    ground_truth: GroundTruth


class ObservationSet:
    """All per-stripe observations of one snapshot plus shared channel statistics.

    Whitened observations are computed lazily and cached; estimators only
    ever consume the whitened matrices.
    """

    def __init__(self, scenario, observations: list[Observation], disturbances):
        self.scenario = scenario
        self.observations = observations
        self.disturbances = disturbances
        self._whitened: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.observations)

    def whitened(self, stripe_index: int) -> np.ndarray:
        if stripe_index not in self._whitened:
            Y = self.observations[stripe_index].Y
            self._whitened[stripe_index] = self.disturbances[stripe_index].whiten_matrix(Y)
        return self._whitened[stripe_index]


def _seed_key(rng_seed, stripe_index: int) -> tuple:
    if isinstance(rng_seed, (int, np.integer)):
        return (int(rng_seed), stripe_index)
    return (*(int(x) for x in rng_seed), stripe_index)


def synthesize(scenario, rng_seed, noise_scale: float = 1.0) -> ObservationSet:
    """Draw one snapshot of observations for every stripe.

    Each stripe uses an independent random stream keyed by (rng_seed, stripe
    index), so results are reproducible and independent of evaluation order.
    ``noise_scale`` = 0 gives the noise-free model.
    """
    disturbances = make_disturbances(scenario)
    gains_all = tuple(path_gains(scenario, n) for n in range(len(scenario.stripes)))
    truth = GroundTruth(
        ue_position=np.asarray(scenario.ue_position, float).copy(),
        clock_offset=float(scenario.clock_offset),
        phase_offsets=np.asarray(scenario.phase_offsets, float).copy(),
        sp_positions=np.array([sc.position for sc in scenario.scatterers]).reshape(-1, 3),
        gains=gains_all,
    )
    observations = []
    for n, stripe in enumerate(scenario.stripes):
        key = _seed_key(rng_seed, n)
        rng = np.random.default_rng(list(key))
        Y = noise_free_matrix(scenario, n)
        if noise_scale != 0.0:
            shape = (stripe.num_antennas, scenario.waveform.K)
            Z = math.sqrt(0.5) * (
                rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            )
            Y = Y + noise_scale * disturbances[n].color_noise(Z)
        observations.append(Observation(n, Y, key, truth))
    return ObservationSet(scenario, observations, disturbances)


# ---------------------------------------------------------------------------
# SDNR accounting
# ---------------------------------------------------------------------------


def _los_signal_sum(scenario) -> float:
    """Sum over stripes of alpha_LoS^2 * ||c'_LoS||^2 (amplitudes include Pt)."""
    disturbances = make_disturbances(scenario)
    total = 0.0
    for n, stripe in enumerate(scenario.stripes):
        paths = enumerate_paths(scenario, n)
        los = paths[0]
        alpha = rp_amplitude(scenario, stripe, los)
        c = whitened_response(
            los.aoa, los.pseudo_delay, scenario.waveform, stripe, disturbances[n]
        )
        total += alpha**2 * float(np.vdot(c, c).real)
    return total


def sdnr_db(scenario) -> float:
    """Signal-to-(DMC+noise) ratio referenced to the whitened LoS responses."""
    N = len(scenario.stripes)
    linear = _los_signal_sum(scenario) / (N * scenario.waveform.K)
    return 10.0 * math.log10(linear)


def pt_for_sdnr(target_sdnr_db: float, scenario) -> float:
    """Transmit power (W) that makes :func:`sdnr_db` hit the target exactly."""
    N = len(scenario.stripes)
    K = scenario.waveform.K
    # alpha^2 scales linearly with Pt, so the per-watt signal sum is Pt-free.
    per_watt = _los_signal_sum(scenario) / float(scenario.transmit_power)
    return 10.0 ** (target_sdnr_db / 10.0) * N * K / per_watt


# ---------------------------------------------------------------------------
# Observation dumps
# ---------------------------------------------------------------------------


def dump_observations(obs_set: ObservationSet, path: str, fmt: str = "bin") -> None:
    """Write observations to disk for cross-language comparison.

    Binary format: stripes in index order, each M x K matrix row-major, each
    complex value as little-endian float64 (re, im) pairs, no header.  CSV
    format: long table with columns stripe, antenna, subcarrier, re, im.
    """
    if fmt == "bin":
        with open(path, "wb") as fh:
            for obs in obs_set.observations:
                fh.write(np.ascontiguousarray(obs.Y).astype("<c16").tobytes())
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stripe", "antenna", "subcarrier", "re", "im"])
            for obs in obs_set.observations:
                M, K = obs.Y.shape
                for m in range(M):
                    for k in range(K):
                        v = obs.Y[m, k]
                        writer.writerow(
                            [obs.stripe_index, m, k, repr(float(v.real)), repr(float(v.imag))]
                        )
    else:
        raise ValueError(f"unknown dump format: {fmt!r}")
