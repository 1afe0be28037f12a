"""Independent reference implementations and frozen constants for the tests.

Everything in this file is deliberately written from scratch against the
model formulas — dense matrices, explicit element loops, textbook forms —
rather than calling the package code, so that tests compare two independent
derivations of the same quantity.  The only sanctioned reuse is the
geometry forward map inside the finite-difference Jacobian oracle (the
derivative is what is being checked there, not the map).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

C0 = 299792458.0
EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6

# ---------------------------------------------------------------------------
# Frozen hand-computed values
# ---------------------------------------------------------------------------

# lambda = c / 3.5 GHz
LAMBDA_35GHZ = 0.085654988
# LoS amplitude at 1 m, unit power, aligned polarization: lambda/(4*pi)
FRIIS_1M_35GHZ = 6.816207370338489e-3
# Normal incidence on lossless eps_r = 6: (1/sqrt(6)-1)/(1/sqrt(6)+1)
GAMMA_NORMAL_EPS6 = -0.42020410288672866
# arccos(2/sqrt(2) - 1) used by the low-bandwidth threshold (F = 1/sqrt(2))
ACOS_2F_MINUS_1 = 1.1437177404024204
# Array / subcarrier second moments for M = 12, K = 20
S_M_12 = 143.0
S_K_20 = 2470.0


# ---------------------------------------------------------------------------
# Geometry oracles
# ---------------------------------------------------------------------------


def rotation_matrix_z(beta: float) -> np.ndarray:
    """Independent z-rotation (explicit trig, row by row)."""
    return np.array(
        [
            [math.cos(beta), -math.sin(beta), 0.0],
            [math.sin(beta), math.cos(beta), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )


def fd_rotz_derivative(h: float = 1e-6) -> np.ndarray:
    """Central difference of the z-rotation at angle 0."""
    return (rotation_matrix_z(h) - rotation_matrix_z(-h)) / (2.0 * h)


def mirror_point(p, wall_point, normal) -> np.ndarray:
    p = np.asarray(p, float)
    n = np.asarray(normal, float)
    return p - 2.0 * n * float((p - np.asarray(wall_point, float)) @ n)


def reflection_point_unit_ray(p_rs, p, wall_point, normal) -> np.ndarray:
    """Reflection point via the unit-ray form: walk from the stripe toward the
    mirror image until the plane is hit."""
    p_rs = np.asarray(p_rs, float)
    pm = mirror_point(p, wall_point, normal)
    u = (pm - p_rs) / np.linalg.norm(pm - p_rs)
    n = np.asarray(normal, float)
    dist = float((np.asarray(wall_point, float) - p_rs) @ n) / float(u @ n)
    return p_rs + dist * u


def specular_angle_residual(p, rp, p_rs, normal) -> float:
    """|angle(in, normal) - angle(out, normal)| at the reflection point."""
    n = np.asarray(normal, float)
    v_in = np.asarray(p, float) - np.asarray(rp, float)
    v_out = np.asarray(p_rs, float) - np.asarray(rp, float)
    ci = abs(float(v_in @ n)) / np.linalg.norm(v_in)
    co = abs(float(v_out @ n)) / np.linalg.norm(v_out)
    return abs(math.acos(min(1.0, ci)) - math.acos(min(1.0, co)))


def plane_offset(point, wall_point, normal) -> float:
    return abs(float((np.asarray(point, float) - np.asarray(wall_point, float)) @ np.asarray(normal, float)))


# ---------------------------------------------------------------------------
# Channel oracles
# ---------------------------------------------------------------------------


def fresnel_textbook(theta_i: float, eps_r: float, mu_r: float, sigma: float, fc: float):
    """Textbook Fresnel coefficients via the complex-permittivity impedance.

    eta = sqrt(mu / (eps - j*sigma/omega)) is algebraically identical to
    sqrt(j*omega*mu / (sigma + j*omega*eps)) but exercises a different code
    path.  Returns (parallel, perpendicular).
    """
    omega = 2.0 * math.pi * fc
    eps_c = eps_r * EPS0 - 1j * sigma / omega
    eta1 = np.sqrt(mu_r * MU0 / eps_c)
    eta0 = math.sqrt(MU0 / EPS0)
    theta_t = math.asin(math.sin(theta_i) / math.sqrt(eps_r * mu_r))
    ci, ct = math.cos(theta_i), math.cos(theta_t)
    g_par = (eta1 * ct - eta0 * ci) / (eta1 * ct + eta0 * ci)
    g_perp = (eta1 * ci - eta0 * ct) / (eta1 * ci + eta0 * ct)
    return complex(g_par), complex(g_perp)


def dmc_psd_samples(alpha1: float, beta_d: float, tau_d: float, K: int) -> np.ndarray:
    """PSD sampled one lag at a time on the normalized grid k/K."""
    out = np.empty(K, dtype=complex)
    for k in range(K):
        f = k / K
        out[k] = alpha1 * np.exp(-2j * math.pi * f * tau_d) / (beta_d + 2j * math.pi * f)
    return out


def toeplitz_by_loop(col: np.ndarray) -> np.ndarray:
    """Hermitian Toeplitz matrix from its first column, element by element."""
    K = len(col)
    T = np.empty((K, K), dtype=complex)
    for i in range(K):
        for j in range(K):
            T[i, j] = col[i - j] if i >= j else np.conj(col[j - i])
    return T


def dense_disturbance_cov(alpha1, beta_d, tau_d, sigma2, pilots, M) -> np.ndarray:
    """Dense MK x MK covariance assembled directly from the model formula."""
    s = np.asarray(pilots, complex)
    K = s.size
    R_f = toeplitz_by_loop(dmc_psd_samples(alpha1, beta_d, tau_d, K))
    return np.kron(R_f * np.outer(s, s.conj()), np.eye(M)) + (sigma2 / K) * np.eye(M * K)


def hermitian_inv_sqrt(R: np.ndarray) -> np.ndarray:
    """Dense R^{-1/2} via eigendecomposition (the unique Hermitian PSD root)."""
    w, V = np.linalg.eigh(R)
    return (V * (1.0 / np.sqrt(w))) @ V.conj().T


# ---------------------------------------------------------------------------
# Signal oracles
# ---------------------------------------------------------------------------


def response_by_loop(theta, tau, pilots, M, K, spacing, lam, delta_f) -> np.ndarray:
    """Angular-delay response, one entry at a time (antenna index fastest)."""
    c = np.empty(M * K, dtype=complex)
    for k in range(K):
        for m in range(M):
            c[k * M + m] = (
                pilots[k]
                * np.exp(-2j * math.pi * k * delta_f * tau)
                * np.exp(2j * math.pi * spacing * m * math.sin(theta) / lam)
            )
    return c


def model_mean_by_loop(eta, pilots, M, K, spacing, lam, delta_f) -> np.ndarray:
    """Noise-free vectorized observation for a stacked local parameter vector
    (all thetas, all pseudo-delays, all phases, all amplitudes)."""
    eta = np.asarray(eta, float)
    Nc = eta.size // 4
    thetas, taus, phis, alphas = (
        eta[:Nc],
        eta[Nc : 2 * Nc],
        eta[2 * Nc : 3 * Nc],
        eta[3 * Nc :],
    )
    mu = np.zeros(M * K, dtype=complex)
    for i in range(Nc):
        gamma = alphas[i] * np.exp(1j * phis[i])
        mu += gamma * response_by_loop(thetas[i], taus[i], pilots, M, K, spacing, lam, delta_f)
    return mu


# ---------------------------------------------------------------------------
# FIM oracles
# ---------------------------------------------------------------------------


def fd_local_fim(eta, R_dense, pilots, M, K, spacing, lam, delta_f) -> np.ndarray:
    """Finite-difference Fisher information 2*Re{dmu_i^H R^-1 dmu_j}.

    Central differences with per-coordinate steps: angles/phases 1e-6 rad,
    pseudo-delays scaled to a ~1e-6 cycle step, amplitudes relative 1e-6
    (the model is linear in amplitude, so any small step is exact there).
    """
    eta = np.asarray(eta, float)
    P = eta.size
    Nc = P // 4
    steps = np.empty(P)
    steps[:Nc] = 1e-6
    steps[Nc : 2 * Nc] = 1e-6 / (K * delta_f)
    steps[2 * Nc : 3 * Nc] = 1e-6
    steps[3 * Nc :] = 1e-6 * (np.abs(eta[3 * Nc :]) + 1.0)

    def mean(v):
        return model_mean_by_loop(v, pilots, M, K, spacing, lam, delta_f)

    D = np.empty((M * K, P), dtype=complex)
    for i in range(P):
        up = eta.copy()
        dn = eta.copy()
        up[i] += steps[i]
        dn[i] -= steps[i]
        D[:, i] = (mean(up) - mean(dn)) / (2.0 * steps[i])
    Rinv_D = np.linalg.solve(R_dense, D)
    return 2.0 * np.real(D.conj().T @ Rinv_D)


def fd_jacobian(scenario, stripe_index, sync_mode_ncp: bool, D_pos: int, known_rp_phases: bool):
    """Finite-difference Jacobian of the local channel parameters with respect
    to the global parameter vector.

    The forward map reuses the (independently tested) geometry module for
    angles and delays; phases are recomputed here from raw delays so no
    wrapping interferes with the differencing.  Layout of the global vector:
    p (D_pos), clock offset, phase offset(s), scatterer positions, per-stripe
    non-LoS path phases (scatterer-only when known_rp_phases), per-stripe
    amplitudes.
    """
    from stripeloc.geometry import PathKind, enumerate_paths
    from stripeloc.signal import path_amplitudes_and_phases

    N = len(scenario.stripes)
    J = len(scenario.scatterers)
    fc = scenario.waveform.fc
    n_ph = N if sync_mode_ncp else 1

    base_alphas = []
    n_paths = []
    for n in range(N):
        alphas, _ = path_amplitudes_and_phases(scenario, n)
        base_alphas.append(alphas)
        n_paths.append(len(alphas))
    nc_list = n_paths
    n_nuis_ph = [
        (J if known_rp_phases else nc - 1) for nc in nc_list
    ]

    # --- global vector layout -------------------------------------------
    blocks = []
    g0 = []
    p = np.asarray(scenario.ue_position, float)
    g0.extend(p[:D_pos])
    blocks.append(("p", D_pos))
    g0.append(float(scenario.clock_offset))
    blocks.append(("dtau", 1))
    dphi = np.asarray(scenario.phase_offsets, float)
    if sync_mode_ncp:
        g0.extend(dphi)
    else:
        g0.append(float(dphi[0]))
    blocks.append(("dphi", n_ph))
    for sc in scenario.scatterers:
        g0.extend(np.asarray(sc.position, float))
    blocks.append(("sp", 3 * J))
    for n in range(N):
        g0.extend([0.0] * n_nuis_ph[n])  # nuisance reflection phases, base 0
    blocks.append(("varphi", sum(n_nuis_ph)))
    for n in range(N):
        g0.extend(base_alphas[n])
    blocks.append(("alpha", sum(nc_list)))
    g0 = np.array(g0)

    def local_from_global(g):
        idx = 0
        p_new = np.asarray(scenario.ue_position, float).copy()
        p_new[:D_pos] = g[idx : idx + D_pos]
        idx += D_pos
        dtau = g[idx]
        idx += 1
        if sync_mode_ncp:
            dphis = g[idx : idx + N]
            idx += N
        else:
            dphis = np.full(N, g[idx])
            idx += 1
        scatterers = []
        for j, sc in enumerate(scenario.scatterers):
            scatterers.append(dataclasses.replace(sc, position=g[idx : idx + 3].copy()))
            idx += 3
        varphis = []
        for n in range(N):
            varphis.append(g[idx : idx + n_nuis_ph[n]])
            idx += n_nuis_ph[n]
        alphas_g = []
        for n in range(N):
            alphas_g.append(g[idx : idx + nc_list[n]])
            idx += nc_list[n]
        mod = dataclasses.replace(
            scenario,
            ue_position=p_new,
            clock_offset=float(dtau),
            scatterers=tuple(scatterers),
        )
        paths = enumerate_paths(mod, stripe_index)
        thetas = np.array([q.aoa for q in paths])
        taus = np.array([q.pseudo_delay for q in paths])
        phis = np.empty(len(paths))
        vp = varphis[stripe_index]
        vp_i = 0
        for i, q in enumerate(paths):
            raw = -2.0 * math.pi * fc * q.delay + dphis[stripe_index]
            if q.kind is not PathKind.LOS:
                if not known_rp_phases or q.kind is PathKind.SP:
                    raw += vp[vp_i]
                    vp_i += 1
            phis[i] = raw
        return np.concatenate([thetas, taus, phis, alphas_g[stripe_index]])

    steps = np.empty(g0.size)
    idx = 0
    for name, size in blocks:
        if name in ("p", "sp"):
            steps[idx : idx + size] = 1e-7
        elif name == "dtau":
            steps[idx : idx + size] = 1e-13
        else:
            steps[idx : idx + size] = 1e-6
        idx += size

    T = np.empty((g0.size, 4 * nc_list[stripe_index]))
    for i in range(g0.size):
        up = g0.copy()
        dn = g0.copy()
        up[i] += steps[i]
        dn[i] -= steps[i]
        T[i, :] = (local_from_global(up) - local_from_global(dn)) / (2.0 * steps[i])
    return T


# ---------------------------------------------------------------------------
# Estimator oracles
# ---------------------------------------------------------------------------


def stacked_real_lstsq(columns, y) -> np.ndarray:
    """Real least squares on the stacked [Re; Im] system, via generic lstsq."""
    A = np.column_stack([np.concatenate([c.real, c.imag]) for c in columns])
    b = np.concatenate([np.asarray(y).real, np.asarray(y).imag])
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x


def complex_lstsq(columns, y) -> np.ndarray:
    """Dense complex least squares on explicit columns."""
    A = np.column_stack(columns)
    x, *_ = np.linalg.lstsq(A, np.asarray(y), rcond=None)
    return x
