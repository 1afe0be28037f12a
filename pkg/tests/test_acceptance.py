"""Release acceptance gate.

Each test checks one acceptance criterion at its stated tolerance and
prints a single pass/fail line (visible with -v as the test outcome, and
with -s/-rA as an explicit summary line).  Criteria with stated runtime
budgets also assert the elapsed wall time.

The noncoherent LoS-only bandwidth-decay clause (03b) is expected red: the
clock offset is an unknown nuisance in this model, and at high bandwidth it
absorbs most of the delay information that the decay clause relies on, so
the measured decay stays well under the demanded factor.  The flat low-band
clause passes.  See the test body for the measured numbers.
"""

import contextlib
import dataclasses
import io
import math
import time

import numpy as np

from conftest import random_small_scenario
import oracles

from stripeloc.channel import DmcParams, disturbance_covariance
from stripeloc.cli import cli
from stripeloc.estimators import (
    WantedParams,
    cp_cost_slice,
    jml_amplitudes,
    jml_cost,
    nst_kernels,
    nst_map_scatterers,
    rml_ncp_amplitudes_and_cost,
    NstConfig,
)
from stripeloc.fim import (
    FimOptions,
    SyncMode,
    bw_thresholds,
    jacobian,
    local_channel_params,
    local_fim,
)
from stripeloc.geometry import enumerate_paths
from stripeloc.harness import run_bounds_sweep, run_monte_carlo
from stripeloc.scenario import canonical_scenario, estimation_scenario, with_antennas
from stripeloc.signal import (
    make_disturbances,
    path_gains,
    synthesize,
    whitened_response,
)


def _line(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _truth(scenario) -> WantedParams:
    return WantedParams(
        position=scenario.ue_position,
        clock_offset=scenario.clock_offset,
        phase_offset=float(scenario.phase_offsets[0]),
        sp_positions=np.array([s.position for s in scenario.scatterers]).reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# 01: bandwidth thresholds on the bundled default scenario
# ---------------------------------------------------------------------------


def test_01_bandwidth_thresholds():
    t0 = time.time()
    sc = canonical_scenario()
    b_low, _ = bw_thresholds(sc)
    _, b_high = bw_thresholds(with_antennas(sc, 12))
    elapsed = time.time() - t0
    err_low = abs(b_low - 17.78e6) / 17.78e6
    err_high = abs(b_high - 207.9e6) / 207.9e6
    _line(
        "bandwidth-thresholds",
        err_low < 5e-3 and err_high < 5e-3 and elapsed < 1.0,
        f"B_low={b_low/1e6:.3f} MHz (±{err_low*100:.3f}%), "
        f"B_high(M=12)={b_high/1e6:.3f} MHz (±{err_high*100:.3f}%), {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# 02: Fisher information against finite differences, randomized property
# ---------------------------------------------------------------------------


def test_02_fim_matches_finite_differences():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst_fim = 0.0
    worst_jac = 0.0
    for _ in range(50):
        sc = random_small_scenario(rng)
        opts = FimOptions(
            sync_mode=sc.sync_mode, D=sc.D, known_rp_phases=bool(rng.random() < 0.5)
        )
        disturbances = make_disturbances(sc)
        for n, stripe in enumerate(sc.stripes):
            params = local_channel_params(sc, n)
            J = local_fim(stripe, sc.waveform, params, disturbances[n])
            R = oracles.dense_disturbance_cov(
                sc.dmc.alpha1,
                sc.dmc.beta_d,
                sc.dmc.tau_d,
                sc.waveform.sigma2,
                sc.waveform.pilots,
                stripe.num_antennas,
            )
            J_fd = oracles.fd_local_fim(
                params.stacked(),
                R,
                sc.waveform.pilots,
                stripe.num_antennas,
                sc.waveform.K,
                stripe.spacing,
                sc.waveform.wavelength,
                sc.waveform.delta_f,
            )
            scale = np.sqrt(np.outer(np.diag(J_fd), np.diag(J_fd)))
            worst_fim = max(
                worst_fim,
                float(np.max(np.abs(J - J_fd) / (scale + 1e-12 * scale.max()))),
            )
            T = jacobian(sc, n, opts)
            T_fd = oracles.fd_jacobian(
                sc,
                n,
                sync_mode_ncp=opts.sync_mode is SyncMode.NCP,
                D_pos=opts.D,
                known_rp_phases=opts.known_rp_phases,
            )
            worst_jac = max(
                worst_jac, float(np.max(np.abs(T - T_fd) / (1.0 + np.abs(T_fd))))
            )
    elapsed = time.time() - t0
    _line(
        "fim-vs-finite-differences",
        worst_fim < 1e-5 and worst_jac < 1e-6 and elapsed < 120.0,
        f"50 scenarios, worst FIM rel {worst_fim:.2e} (<1e-5), "
        f"worst Jacobian {worst_jac:.2e} (<1e-6), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 03: bound ordering across a 25-point bandwidth sweep at SDNR 0 dB
# ---------------------------------------------------------------------------


_SWEEP_CACHE: dict = {}


def _bounds_sweep_rows():
    if not _SWEEP_CACHE:
        sc = canonical_scenario()  # bundled defaults are SDNR = 0 dB
        bws = np.geomspace(1e6, 1e9, 25)
        rows = run_bounds_sweep(sc, "bandwidth", bws)
        _SWEEP_CACHE["bws"] = bws
        _SWEEP_CACHE["by"] = {(r["value"], r["sync"], r["case"]): r for r in rows}
    return _SWEEP_CACHE["bws"], _SWEEP_CACHE["by"]


def test_03_bound_ordering():
    t0 = time.time()
    bws, by = _bounds_sweep_rows()

    # (a) carrier-phase coherence always tightens the position bound
    violations_a = [
        float(v)
        for v in bws
        if not by[(v, "cp", "LRS")]["peb_m"] < by[(v, "ncp", "LRS")]["peb_m"]
    ]

    # (c) disclosing reflection phases never loosens any bound
    worst_c = 0.0
    for v in bws:
        for sync in ("cp", "ncp"):
            base = by[(v, sync, "LRS")]
            known = by[(v, sync, "LRS+known-rp-phases")]
            for key in ("peb_m", "ceb_s", "cpeb_rad"):
                if np.isfinite(base[key]) and np.isfinite(known[key]):
                    worst_c = max(worst_c, known[key] / base[key])
    elapsed = time.time() - t0
    _line(
        "bound-ordering",
        not violations_a and worst_c <= 1.0 + 1e-9 and elapsed < 300.0,
        f"CP<NCP at all 25 bandwidths ({len(violations_a)} violations), "
        f"known-reflection-phase worst ratio {worst_c:.9f} (<=1), {elapsed:.1f}s",
    )


def test_03b_noncoherent_los_flat_then_decay():
    # Expected red on the decay clause.  The noncoherent LoS-only bound is
    # flat below 100 MHz (angle-dominated) as demanded, but from 200 MHz to
    # 1 GHz it shrinks by only ~1.4x, not the demanded >5x: with the clock
    # offset unknown, the common part of every pseudo-delay carries no
    # position information, so the high-bandwidth delay gain is mostly
    # absorbed by the clock nuisance and the angle/delay crossover moves
    # beyond this sweep.  The closed-form crossover threshold ignores that
    # Schur loss, which is why the two disagree.
    bws, by = _bounds_sweep_rows()
    los_ncp = {float(v): by[(v, "ncp", "L--")]["peb_m"] for v in bws}
    low = [p for v, p in los_ncp.items() if v <= 100e6]
    flat_ratio = max(low) / min(low)
    p200 = float(np.interp(200e6, list(los_ncp), list(los_ncp.values())))
    decay = p200 / los_ncp[1e9]
    _line(
        "noncoherent-los-flat-then-decay",
        flat_ratio < 1.5 and decay > 5.0,
        f"flat ratio below 100 MHz {flat_ratio:.3f} (<1.5), "
        f"decay 200 MHz->1 GHz {decay:.2f}x (>5x demanded)",
    )


# ---------------------------------------------------------------------------
# 04: estimator consistency against the bounds at SDNR 20 dB
# ---------------------------------------------------------------------------


def test_04_estimator_consistency():
    t0 = time.time()
    sc = estimation_scenario()
    table = run_monte_carlo(sc, [20.0], trials=20, master_seed=4)
    jml = table.stage(20.0, "JML")
    pos_rmse = jml.rmse_cleaned["position"]
    clock_rmse = jml.rmse_cleaned["clock"]
    peb = jml.bounds["position"]
    ceb_m = jml.bounds["clock"]
    elapsed = time.time() - t0
    _line(
        "estimator-consistency",
        pos_rmse <= 3.0 * peb and clock_rmse <= 3.0 * ceb_m and elapsed < 1800.0,
        f"20 trials: position RMSE {pos_rmse*1e3:.3f} mm vs 3x bound "
        f"{3e3*peb:.3f} mm; clock RMSE {clock_rmse:.3f} m vs 3x bound "
        f"{3*ceb_m:.3f} m; failures {len(table.failures)}; {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 05: coherent-cost ripple period along a line through the truth
# ---------------------------------------------------------------------------


def test_05_coherent_cost_periodicity():
    sc = estimation_scenario()
    obs = synthesize(sc, rng_seed=5, noise_scale=0.0)
    lam = sc.waveform.wavelength
    step = 0.001
    xs = np.arange(-0.30, 0.30, step)
    pts = sc.ue_position[None, :] + np.column_stack(
        [xs, np.zeros_like(xs), np.zeros_like(xs)]
    )
    costs = cp_cost_slice(obs, pts, sc.clock_offset)
    c = costs - costs.mean()
    ac = np.correlate(c, c, mode="full")[len(c) - 1 :]
    peaks = np.flatnonzero((ac[1:-1] > ac[:-2]) & (ac[1:-1] >= ac[2:])) + 1
    peaks = peaks[peaks >= int(0.5 * lam / step)]
    spacing = float(peaks[0]) * step if peaks.size else float("inf")
    rel = abs(spacing - 0.086) / 0.086
    _line(
        "coherent-cost-periodicity",
        rel < 0.15,
        f"autocorrelation minimum spacing {spacing*1e3:.1f} mm vs 86 mm "
        f"({rel*100:.1f}%, tolerance 15%)",
    )


# ---------------------------------------------------------------------------
# 06: null-space annihilation and scatterer recovery
# ---------------------------------------------------------------------------


def test_06_null_space_annihilation():
    sc = estimation_scenario()
    obs = synthesize(sc, rng_seed=6, noise_scale=0.0)
    kernels = nst_kernels(obs, sc.ue_position, sc.clock_offset)
    disturbances = make_disturbances(sc)
    worst = 0.0
    for n, stripe in enumerate(sc.stripes):
        for path in enumerate_paths(sc, n):
            if path.kind.value == "sp":
                continue
            c = whitened_response(
                path.aoa, path.pseudo_delay, sc.waveform, stripe, disturbances[n]
            )
            leak = np.linalg.norm(kernels[n].conj().T @ c) / np.linalg.norm(c)
            worst = max(worst, float(leak))
    step = NstConfig().step
    sps = nst_map_scatterers(obs, sc.ue_position, sc.clock_offset)
    err = float(
        np.linalg.norm(np.asarray(sps[0]) - sc.scatterers[0].position)
    )
    _line(
        "null-space-annihilation",
        worst < 1e-10 and err <= step,
        f"worst direct-path leak {worst:.2e} (<1e-10); scatterer error "
        f"{err:.3f} m within one {step:.2f} m step",
    )


# ---------------------------------------------------------------------------
# 07: exact recovery at noise-free ground truth
# ---------------------------------------------------------------------------


def test_07_exact_recovery():
    sc = estimation_scenario()
    obs = synthesize(sc, rng_seed=7, noise_scale=0.0)
    eta = _truth(sc)
    gains = jml_amplitudes(eta, obs)
    rel = max(
        float(np.max(np.abs(gains[n] - path_gains(sc, n)) / np.abs(path_gains(sc, n))))
        for n in range(len(sc.stripes))
    )
    cost = jml_cost(eta, obs)
    # the relaxed model carries no scatterer columns; its residual is exact
    # on a scatterer-free scene
    bare = dataclasses.replace(sc, scatterers=())
    obs_bare = synthesize(bare, rng_seed=7, noise_scale=0.0)
    _, ncp_cost = rml_ncp_amplitudes_and_cost(
        bare.ue_position, bare.clock_offset, obs_bare
    )
    _line(
        "exact-recovery",
        rel < 1e-8 and cost < 1e-12 and ncp_cost < 1e-12,
        f"amplitude rel {rel:.2e} (<1e-8), joint cost {cost:.2e} (<1e-12), "
        f"relaxed residual {ncp_cost:.2e} (<1e-12)",
    )


# ---------------------------------------------------------------------------
# 08: structured whitening against the dense covariance
# ---------------------------------------------------------------------------


def test_08_whitening():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(5):
        M, K = 2, 3
        pilots = np.exp(2j * np.pi * rng.random(K)) / math.sqrt(K)
        dmc = DmcParams(
            alpha1=float(rng.uniform(0.2, 2.0)),
            beta_d=float(rng.uniform(0.1, 0.9)),
            tau_d=float(rng.uniform(0.05, 0.4)),
        )
        cov = disturbance_covariance(dmc, sigma2=0.37, pilots=pilots, K=K, M=M)
        dense = oracles.hermitian_inv_sqrt(cov.dense())
        y = rng.standard_normal(M * K) + 1j * rng.standard_normal(M * K)
        worst = max(
            worst, float(np.linalg.norm(cov.whiten_vec(y) - dense @ y))
        )
    # sample covariance of colored draws against the model covariance
    M, K = 2, 3
    pilots = np.full(K, 1.0 / math.sqrt(K), dtype=complex)
    cov = disturbance_covariance(
        DmcParams(alpha1=0.9, beta_d=0.5, tau_d=0.15), 0.4, pilots, K, M
    )
    draws = 2000
    acc = np.zeros((M * K, M * K), dtype=complex)
    for _ in range(draws):
        Z = math.sqrt(0.5) * (
            rng.standard_normal((M, K)) + 1j * rng.standard_normal((M, K))
        )
        w = cov.color_noise(Z).T.reshape(-1)
        acc += np.outer(w, w.conj())
    sample = acc / draws
    R = cov.dense()
    frob = float(np.linalg.norm(sample - R) / np.linalg.norm(R))
    _line(
        "whitening",
        worst < 1e-8 and frob < 0.10,
        f"structured-vs-dense worst {worst:.2e} (<1e-8), sample covariance "
        f"Frobenius rel {frob:.3f} (<0.10) over {draws} draws",
    )


# ---------------------------------------------------------------------------
# 09: command-line determinism
# ---------------------------------------------------------------------------


def test_09_cli_determinism():
    argv = ["estimate", "--seed", "7", "--trials", "5"]
    outputs = []
    for _ in range(2):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli(list(argv))
        assert code == 0
        outputs.append(buf.getvalue())
    _line(
        "cli-determinism",
        bool(outputs[0]) and outputs[0] == outputs[1],
        f"two runs of `estimate --seed 7 --trials 5`: "
        f"{len(outputs[0])} bytes, byte-identical={outputs[0] == outputs[1]}",
    )
