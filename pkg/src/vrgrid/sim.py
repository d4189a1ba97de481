"""Fixed-step trajectory simulation, disturbance scenarios, and metrics.

The integrator is classical 4th-order Runge-Kutta on the closed-loop
current-error dynamics. Disturbances are sampled at each step start and
held constant within the step; pulse edges and resistance resampling
instants are snapped to the step grid.

When the grid resistance deviates from its nominal value while the
feedforward keeps using the nominal one, the mismatch enters the error
dynamics as an equivalent disturbance: the logged disturbance column is

    v_dist(t) = vg_err(t) + (r_g(t) - r_g_nominal) * i_ref

which is exactly the input the certified dissipation inequality refers to.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._kernels import rk4_loop
from .bank import flatten_bank
from .certify import iss_gain
from .persidskii import lyapunov_values
from .plant import as_dq

MAX_DT = 1e-4


class SimulationAbort(RuntimeError):
    """The integrator produced a non-finite state."""

    def __init__(self, t, state):
        self.t = t
        self.state = state
        super().__init__(f"state became non-finite at t = {t:.9g} s: {state!r}")


@dataclass(frozen=True)
class Scenario:
    """One disturbance scenario on a fixed time grid.

    ``kind`` is one of ``voltage_pulse``, ``random_resistance``, ``custom``;
    only the fields of the active kind are populated.
    """

    kind: str
    t_end: float
    dt: float
    # voltage_pulse
    pulse_axis: str = "d"
    pulse_amplitude_v: float = 0.0
    t_on: float = 0.0
    t_off: float = 0.0
    # random_resistance
    lo_fraction: float = 1.0
    hi_fraction: float = 1.0
    t_start: float = 0.0
    t_stop: float = 0.0
    resample_period: float = 1e-3
    seed: int = 0
    # custom
    const_v_g: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("voltage_pulse", "random_resistance", "custom"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not (0.0 < self.dt <= MAX_DT):
            raise ValueError(f"dt must be in (0, {MAX_DT}], got {self.dt!r}")
        if self.t_end <= 0.0:
            raise ValueError("t_end must be > 0")
        if self.kind == "voltage_pulse":
            if self.pulse_axis not in ("d", "q"):
                raise ValueError(f"pulse axis must be 'd' or 'q', got {self.pulse_axis!r}")
            if not self.t_on < self.t_off <= self.t_end:
                raise ValueError("pulse window must satisfy t_on < t_off <= t_end")
            if self.t_on < 0.0 or self.pulse_amplitude_v < 0.0:
                raise ValueError("pulse t_on and amplitude must be >= 0")
        elif self.kind == "random_resistance":
            if not (0.0 < self.lo_fraction <= self.hi_fraction):
                raise ValueError("resistance bounds must satisfy 0 < lo <= hi")
            if not 0.0 <= self.t_start < self.t_stop <= self.t_end:
                raise ValueError("resistance window must satisfy 0 <= t_start < t_stop <= t_end")
            if self.resample_period <= 0.0:
                raise ValueError("resample_period must be > 0")
            if not 0 <= int(self.seed) < 2 ** 64:
                raise ValueError("seed must fit in 64 bits")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def disturbance_window(self):
        """(start, end) of the disturbance interval used by the metrics."""
        if self.kind == "voltage_pulse":
            return self.t_on, self.t_off
        if self.kind == "random_resistance":
            return self.t_start, self.t_stop
        return 0.0, 0.0


def scenario_voltage_pulse(p, *, t_end=0.2, dt=1e-6, axis="d",
                           amplitude_fraction=0.4, t_on=0.1, t_off=0.101):
    """Rectangular grid-voltage pulse on one axis, height = fraction * reference."""
    if amplitude_fraction < 0.0:
        raise ValueError("amplitude_fraction must be >= 0")
    ref = p.v_g_ref[0] if axis == "d" else p.v_g_ref[1]
    return Scenario(
        kind="voltage_pulse",
        t_end=t_end,
        dt=dt,
        pulse_axis=axis,
        pulse_amplitude_v=amplitude_fraction * float(ref),
        t_on=t_on,
        t_off=t_off,
    )


def scenario_random_resistance(p, *, seed, t_end=1.0, dt=1e-6, lo_fraction=0.1,
                               hi_fraction=1.9, t_start=0.2, t_stop=0.8,
                               resample_period=1e-3):
    """Piecewise-constant random grid resistance inside a time window."""
    del p  # bounds are stored as fractions of the nominal resistance
    return Scenario(
        kind="random_resistance",
        t_end=t_end,
        dt=dt,
        lo_fraction=lo_fraction,
        hi_fraction=hi_fraction,
        t_start=t_start,
        t_stop=t_stop,
        resample_period=resample_period,
        seed=int(seed),
    )


def scenario_constant(p, *, t_end, dt=1e-6, v_g=(0.0, 0.0)):
    """Constant grid-voltage offset (smooth case for convergence studies)."""
    del p
    return Scenario(kind="custom", t_end=t_end, dt=dt, const_v_g=tuple(np.asarray(v_g, dtype=float)))


def splitmix64_uniform(seed, count):
    """Deterministic uniforms in [0, 1) from the splitmix64 generator.

    Output i (0-based) is produced from the 64-bit state
    z = seed + (i + 1) * 0x9E3779B97F4A7C15 (mod 2^64) passed through

        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
        z ^= z >> 27;  z *= 0x94D049BB133111EB
        z ^= z >> 31

    and mapped to a double via (z >> 11) * 2**-53.
    """
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed) + idx * np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def _snap(t, dt, n):
    return min(max(int(round(t / dt)), 0), n)


def disturbance_profile(p, sc):
    """Per-grid-point raw disturbance and resistance: (times, r_g, vg_err)."""
    n = sc.n_steps
    if n < 1:
        raise ValueError("scenario horizon shorter than one step")
    times = np.arange(n + 1) * sc.dt
    rg = np.full(n + 1, p.r_g)
    vg = np.zeros((n + 1, 2))

    if sc.kind == "voltage_pulse":
        i_on = _snap(sc.t_on, sc.dt, n)
        i_off = _snap(sc.t_off, sc.dt, n)
        axis = 0 if sc.pulse_axis == "d" else 1
        vg[i_on:i_off, axis] = sc.pulse_amplitude_v
    elif sc.kind == "random_resistance":
        i0 = _snap(sc.t_start, sc.dt, n)
        i1 = _snap(sc.t_stop, sc.dt, n)
        steps_per = max(1, int(round(sc.resample_period / sc.dt)))
        n_int = (i1 - i0 + steps_per - 1) // steps_per
        if n_int > 0:
            u = splitmix64_uniform(sc.seed, n_int)
            values = (sc.lo_fraction + (sc.hi_fraction - sc.lo_fraction) * u) * p.r_g
            interval = np.arange(i1 - i0) // steps_per
            rg[i0:i1] = values[interval]
    else:
        vg[:] = np.asarray(sc.const_v_g, dtype=float)

    return times, rg, vg


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled closed-loop trajectory.

    ``v_dist`` is the effective disturbance driving the error dynamics
    (grid-voltage error plus the resistance-mismatch term); ``v_lyap`` is
    populated only when a certificate was attached to the run.
    """

    times: np.ndarray
    i_err: np.ndarray
    v_dist: np.ndarray
    r_g: np.ndarray
    v_lyap: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.i_err) == len(self.v_dist) == len(self.r_g) == n):
            raise ValueError("trajectory arrays must share one length")
        if self.v_lyap is not None and len(self.v_lyap) != n:
            raise ValueError("v_lyap length mismatch")
        if n >= 3:
            steps = np.diff(self.times)
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
                raise ValueError("time grid must be uniform")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])


def integrate(p, bank, sc, cert=None, i_err0=(0.0, 0.0)):
    """Run the scenario; aborts with a diagnostic if the state overflows."""
    times, rg, vg = disturbance_profile(p, sc)
    v_dist = vg + (rg - p.r_g)[:, None] * p.i_ref
    y0 = as_dq(i_err0, "i_err0")

    codes_d, p1_d, p2_d, codes_q, p1_q, p2_q = flatten_bank(bank)
    out, bad = rk4_loop(
        y0[0], y0[1], sc.dt, sc.n_steps, p.l_g, p.omega_g,
        rg, v_dist[:, 0], v_dist[:, 1],
        codes_d, p1_d, p2_d, codes_q, p1_q, p2_q,
    )
    if bad >= 0:
        raise SimulationAbort(times[bad], out[bad])

    v_lyap = lyapunov_values(cert, bank, out) if cert is not None else None
    return Trajectory(times=times, i_err=out, v_dist=v_dist, r_g=rg, v_lyap=v_lyap)


@dataclass(frozen=True)
class Metrics:
    """Scenario performance indices; settling time is NaN when unsettled."""

    settling_time_2pct_d: float
    settled: bool
    rms_err_d: float
    rms_err_q: float
    peak_abs_err_d: float
    peak_abs_err_q: float

    def to_dict(self):
        return {
            "settling_time_2pct_d_s": None if not self.settled else self.settling_time_2pct_d,
            "settled": self.settled,
            "rms_err_d_a": self.rms_err_d,
            "rms_err_q_a": self.rms_err_q,
            "peak_abs_err_d_a": self.peak_abs_err_d,
            "peak_abs_err_q_a": self.peak_abs_err_q,
        }


def compute_metrics(traj, sc):
    """Settling time and RMS/peak errors.

    The 2% settling band is defined relative to the post-disturbance peak
    of |i_err_d| (the error reference is zero, so a band relative to the
    final value would be degenerate); settling is the first time after the
    disturbance end at which |i_err_d| enters and then stays inside the
    band. RMS and peaks are taken over [disturbance start, t_end].
    """
    if len(traj.times) < 2:
        raise ValueError("trajectory is empty")
    dt = traj.dt
    n = len(traj.times) - 1
    t_start, t_end_dist = sc.disturbance_window()
    i_start = _snap(t_start, dt, n)
    i_end = _snap(t_end_dist, dt, n)

    post = np.abs(traj.i_err[i_end:, 0])
    peak = float(post.max())
    if peak == 0.0:
        settling, settled = 0.0, True
    else:
        band = 0.02 * peak
        above = post > band
        if above[-1]:
            settling, settled = math.nan, False
        elif not above.any():
            settling, settled = 0.0, True
        else:
            last = int(np.nonzero(above)[0][-1])
            settling = float(traj.times[i_end + last + 1] - traj.times[i_end])
            settled = True

    window = traj.i_err[i_start:]
    rms = np.sqrt(np.mean(window ** 2, axis=0))
    peaks = np.abs(window).max(axis=0)
    return Metrics(
        settling_time_2pct_d=settling,
        settled=settled,
        rms_err_d=float(rms[0]),
        rms_err_q=float(rms[1]),
        peak_abs_err_d=float(peaks[0]),
        peak_abs_err_q=float(peaks[1]),
    )


@dataclass(frozen=True)
class DissipationReport:
    n_violations: int
    worst_margin: float
    tol: float

    def to_dict(self):
        return {
            "n_violations": self.n_violations,
            "worst_margin": self.worst_margin,
            "tol": self.tol,
        }


def check_dissipation(traj, cert):
    """Discrete check of the certified inequality along a logged trajectory.

    Verifies (V(t+dt) - V(t))/dt <= -varsigma |x|^2 + alpha |v_dist|^2 + tol
    at every step, with tol = 1e-3 * (1 + max |dV/dt|) absorbing the
    sample-and-hold discretization error.
    """
    if traj.v_lyap is None:
        raise ValueError("trajectory has no Lyapunov log; integrate with cert=...")
    report = cert.report
    if report is None:
        raise ValueError("certificate has no verification report attached")
    dv = np.diff(traj.v_lyap) / traj.dt
    x2 = np.einsum("ni,ni->n", traj.i_err[:-1], traj.i_err[:-1])
    w2 = np.einsum("ni,ni->n", traj.v_dist[:-1], traj.v_dist[:-1])
    rhs = -report.varsigma * x2 + report.alpha * w2
    tol = 1e-3 * (1.0 + float(np.abs(dv).max(initial=0.0)))
    excess = dv - rhs
    return DissipationReport(
        n_violations=int(np.count_nonzero(excess > tol)),
        worst_margin=float(excess.max(initial=0.0)),
        tol=tol,
    )


@dataclass(frozen=True)
class EnvelopeReport:
    passes: bool
    tail_max: float
    bound: float
    gain_slope: float
    disturbance_sup: float

    def to_dict(self):
        return {
            "passes": self.passes,
            "tail_max_a": self.tail_max,
            "bound_a": self.bound,
            "gain_slope": self.gain_slope,
            "disturbance_sup_v": self.disturbance_sup,
        }


def check_iss_envelope(traj, cert=None, *, window_tail=0.1, slack=2.0,
                       floor=1e-6, gain_slope=None):
    """Empirical tail check of the disturbance-to-state envelope.

    Over the final ``window_tail`` seconds the state norm must stay below
    slack * gain * sup|v_dist| (or below an absolute floor when the
    disturbance is zero). The slack absorbs the transient envelope that is
    intentionally not computed, so a pass is a sanity check, not a proof.
    """
    gain = gain_slope if gain_slope is not None else iss_gain(cert)
    t_tail = traj.times[-1] - window_tail
    mask = traj.times >= t_tail - 1e-12
    tail_max = float(np.linalg.norm(traj.i_err[mask], axis=1).max())
    dist_sup = float(np.linalg.norm(traj.v_dist, axis=1).max())
    bound = max(slack * gain * dist_sup, floor)
    return EnvelopeReport(
        passes=bool(tail_max <= bound),
        tail_max=tail_max,
        bound=bound,
        gain_slope=float(gain),
        disturbance_sup=dist_sup,
    )
