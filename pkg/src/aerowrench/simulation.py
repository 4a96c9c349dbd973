"""Closed-loop scenario engine.

Wires the pieces into the loop the package exists to exercise: integrate the
truth, corrupt what the sensors would see, run both estimators on the same
measurements, steer a virtual reference with the estimated interaction
force, track it, and allocate the demanded wrench to rotors. Everything is
deterministic given a seed; telemetry is recorded as flat arrays and only
materialized into records on demand.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import dynamics as dyn
from . import estimation as est
from . import quat as qt
from .errors import DivergenceDetected, SingularAllocation, ValidationError

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])

__all__ = [
    "ForceSegment", "ForceProfile", "default_profile", "force_profile_eval",
    "smoothstep", "AdmittanceParams", "ReferenceState", "admittance_reference",
    "ControllerGains", "tracking_controller", "NoiseStreams", "inject_noise",
    "TelemetryRecord", "EstimatorTrack", "ScenarioRun", "run_scenario",
    "convergence_time", "MetricsReport", "compute_metrics",
]

DIVERGENCE_LIMIT = 1e6


def smoothstep(x):
    """3x^2 - 2x^3, clamped to [0, 1]."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class ForceSegment:
    """One pulse of the interaction profile.

    force is inertial, torque is body-frame, matching where the external
    wrench enters the dynamics. ramp is the rise/fall length in seconds;
    zero gives a hard step.
    """

    start: float
    end: float
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ramp: float = 0.0

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float)
        self.torque = np.asarray(self.torque, dtype=float)


@dataclass
class ForceProfile:
    segments: list

    def validate(self):
        """Raise ValidationError listing every violated constraint."""
        bad = []
        for i, seg in enumerate(self.segments):
            tag = "profile.segments[%d]" % i
            if not seg.end > seg.start:
                bad.append("%s.end must exceed start, got [%r, %r]"
                           % (tag, seg.start, seg.end))
            if seg.start < 0.0:
                bad.append("%s.start must be nonnegative" % tag)
            if seg.ramp < 0.0:
                bad.append("%s.ramp must be nonnegative" % tag)
            if seg.force.shape != (3,) or seg.torque.shape != (3,):
                bad.append("%s force and torque must be 3-vectors" % tag)
        order = sorted(range(len(self.segments)),
                       key=lambda i: self.segments[i].start)
        for a, b in zip(order, order[1:]):
            if self.segments[a].end > self.segments[b].start:
                bad.append("profile.segments[%d] and [%d] overlap" % (a, b))
        if bad:
            raise ValidationError(bad)
        return self


def default_profile():
    """Pulses exercising each force axis and the yaw moment in turn."""
    return ForceProfile(segments=[
        ForceSegment(5.0, 15.0, force=np.array([2.0, 0.0, 0.0]), ramp=1.0),
        ForceSegment(20.0, 30.0, force=np.array([0.0, 2.0, 0.0]), ramp=1.0),
        ForceSegment(35.0, 45.0, force=np.array([0.0, 0.0, 2.0]), ramp=1.0),
        ForceSegment(50.0, 58.0, torque=np.array([0.0, 0.0, 0.5]), ramp=1.0),
    ])


def force_profile_eval(profile, t):
    """Wrench applied at time t: ramped inside segments, zero elsewhere."""
    f = np.zeros(3)
    m = np.zeros(3)
    for seg in profile.segments:
        if t < seg.start or t > seg.end:
            continue
        w = 1.0
        if seg.ramp > 0.0:
            w = float(smoothstep((t - seg.start) / seg.ramp)
                      * smoothstep((seg.end - t) / seg.ramp))
        f = f + w * seg.force
        m = m + w * seg.torque
    return dyn.Wrench(force=f, torque=m)


def _profile_table(profile, times):
    # Same arithmetic as force_profile_eval, evaluated for a whole time grid.
    out = np.zeros((times.shape[0], 6))
    for seg in profile.segments:
        m = (times >= seg.start) & (times <= seg.end)
        if not m.any():
            continue
        t = times[m]
        w = np.ones(t.shape[0])
        if seg.ramp > 0.0:
            w = (smoothstep((t - seg.start) / seg.ramp)
                 * smoothstep((seg.end - t) / seg.ramp))
        out[m, 0:3] += w[:, None] * seg.force
        out[m, 3:6] += w[:, None] * seg.torque
    return out


# ---------------------------------------------------------------------------
# Admittance layer
# ---------------------------------------------------------------------------

@dataclass
class AdmittanceParams:
    """Virtual dynamics M_v rddot + C_v rdot + K_v r = F."""

    m_v: np.ndarray = field(default_factory=lambda: np.eye(3))
    c_v: np.ndarray = field(default_factory=lambda: 1.59 * np.eye(3))
    k_v: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        self.m_v = np.asarray(self.m_v, dtype=float)
        self.c_v = np.asarray(self.c_v, dtype=float)
        self.k_v = np.asarray(self.k_v, dtype=float)

    def validate(self):
        bad = []
        for name, mat in (("m_v", self.m_v), ("c_v", self.c_v), ("k_v", self.k_v)):
            if mat.shape != (3, 3):
                bad.append("admittance.%s must be 3x3" % name)
            elif np.max(np.abs(mat - mat.T)) > 1e-9:
                bad.append("admittance.%s must be symmetric" % name)
        if not bad:
            if np.any(np.linalg.eigvalsh(self.m_v) <= 0.0):
                bad.append("admittance.m_v must be positive definite")
            if np.any(np.linalg.eigvalsh(self.c_v) < 0.0):
                bad.append("admittance.c_v must be positive semidefinite")
            if np.any(np.linalg.eigvalsh(self.k_v) < 0.0):
                bad.append("admittance.k_v must be positive semidefinite")
        if bad:
            raise ValidationError(bad)
        return self


@dataclass
class ReferenceState:
    r: np.ndarray
    v: np.ndarray

    @classmethod
    def rest(cls, position=(0.0, 0.0, 0.0)):
        return cls(r=np.asarray(position, dtype=float), v=np.zeros(3))


_admittance_cache = {}


def _admittance_phi(params, dt):
    # Exact one-step map of [r, v, F] with F held constant; built once per
    # parameter set since expm dominates the cost of the step itself.
    key = (params.m_v.tobytes(), params.c_v.tobytes(), params.k_v.tobytes(),
           float(dt))
    phi = _admittance_cache.get(key)
    if phi is None:
        m_inv = np.linalg.inv(params.m_v)
        a = np.zeros((9, 9))
        a[0:3, 3:6] = np.eye(3)
        a[3:6, 0:3] = -m_inv @ params.k_v
        a[3:6, 3:6] = -m_inv @ params.c_v
        a[3:6, 6:9] = m_inv
        phi = expm(a * dt)
        _admittance_cache[key] = phi
    return phi


def admittance_reference(tau_hat, ref, params, dt):
    """Advance the reference one step under the estimated force.

    tau_hat may be a Wrench or a 6-vector; only the force part drives the
    virtual dynamics. The step is the exact solution of the linear system
    with the force held over dt, so stiff virtual parameters cost nothing.
    """
    force = tau_hat.force if hasattr(tau_hat, "force") else np.asarray(tau_hat, dtype=float)[:3]
    phi = _admittance_phi(params, dt)
    z = phi[:6, 0:3] @ ref.r + phi[:6, 3:6] @ ref.v + phi[:6, 6:9] @ force
    return ReferenceState(r=z[0:3], v=z[3:6])


# ---------------------------------------------------------------------------
# Tracking controller
# ---------------------------------------------------------------------------

@dataclass
class ControllerGains:
    """PD gains for the position and attitude loops.

    accel_max clips the commanded acceleration per axis; the tight vertical
    limit keeps the thrust near hover so attitude stays well conditioned.
    """

    kp: float = 2.0
    kd: float = 3.0
    kp_att: float = 16.0
    kd_att: float = 8.0
    accel_max: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.5, 0.2]))

    def __post_init__(self):
        self.accel_max = np.asarray(self.accel_max, dtype=float)


def tracking_controller(state, ref, params, gains=None):
    """Thrust magnitude and body moments steering state toward ref.

    Position PD gives a desired acceleration; its direction fixes the
    desired thrust axis and hence a desired attitude with zero yaw. The
    attitude loop is a PD on the left rotation error with gyroscopic
    feed-forward. Thrust is clamped to [0, u_max].
    """
    g = gains if gains is not None else ControllerGains()
    r, v, rr, rv, am = state.r, state.v, ref.r, ref.v, g.accel_max
    a = np.empty(3)
    for i in range(3):
        ai = g.kp * (rr[i] - r[i]) + g.kd * (rv[i] - v[i])
        lim = am[i]
        a[i] = lim if ai > lim else (-lim if ai < -lim else ai)
    m = params.mass
    f0 = m * a[0]
    f1 = m * a[1]
    f2 = m * (a[2] + params.gravity)
    fmag = math.sqrt(f0 * f0 + f1 * f1 + f2 * f2)
    thrust = fmag if fmag < params.u_max else params.u_max

    q_des = IDENTITY_Q
    if fmag > 1e-9:
        zb0, zb1, zb2 = f0 / fmag, f1 / fmag, f2 / fmag
        # E_z x zb: rotation axis tilting the thrust column onto fvec.
        s_ax = math.hypot(zb0, zb1)
        if s_ax > 1e-12:
            k = math.atan2(s_ax, zb2) / s_ax
            q_des = qt.rotvec_to_quat(np.array([-zb1 * k, zb0 * k, 0.0]))

    e_rot = qt.quat_diff(q_des, state.q)
    w = state.omega
    jw = params.inertia @ w
    gyro = np.array([w[1] * jw[2] - w[2] * jw[1],
                     w[2] * jw[0] - w[0] * jw[2],
                     w[0] * jw[1] - w[1] * jw[0]])
    moments = params.inertia @ (g.kp_att * e_rot - g.kd_att * w) + gyro
    return dyn.ControlInput(thrust=thrust, moments=moments)


# ---------------------------------------------------------------------------
# Measurement noise
# ---------------------------------------------------------------------------

class NoiseStreams:
    """One generator per measured signal.

    Spawned from a single seed so a scenario is reproducible, but kept
    separate so changing how one channel draws does not shift the others.
    """

    def __init__(self, seed):
        att, pos, rate = np.random.SeedSequence(seed).spawn(3)
        self.attitude = np.random.Generator(np.random.PCG64(att))
        self.position = np.random.Generator(np.random.PCG64(pos))
        self.rate = np.random.Generator(np.random.PCG64(rate))


def inject_noise(truth, r_diag, streams):
    """Corrupt a true state into a measurement.

    Position and rate noise are additive; attitude noise is a random
    rotation-vector perturbation applied on the left, which keeps the
    measured quaternion unit by construction.
    """
    sig = np.sqrt(np.asarray(r_diag, dtype=float))
    dq = streams.attitude.normal(size=3) * sig[0:3]
    q_m = qt.quat_mul(qt.rotvec_to_quat(dq), truth.q)
    r_m = truth.r + streams.position.normal(size=3) * sig[3:6]
    w_m = truth.omega + streams.rate.normal(size=3) * sig[6:9]
    return est.Measurement(q=q_m, r=r_m, omega=w_m)


# ---------------------------------------------------------------------------
# Scenario loop
# ---------------------------------------------------------------------------

@dataclass
class EstimatorTrack:
    """Per-estimator telemetry: state rows [q(4), r, v, omega, upsilon(6)]."""

    states: np.ndarray
    wrench: np.ndarray
    nis: np.ndarray
    step_seconds: np.ndarray = None


@dataclass
class TelemetryRecord:
    t: float
    truth: dyn.BodyState
    wrench: dyn.Wrench
    measurement: est.Measurement
    estimates: dict
    control: dyn.ControlInput
    rotors: np.ndarray
    saturated: bool


@dataclass
class EstimateSnapshot:
    state: est.AugmentedState
    wrench: dyn.Wrench
    nis: float


@dataclass
class ScenarioRun:
    """Array-backed result of one closed-loop run."""

    dt: float
    seed: int
    feed: str
    t: np.ndarray
    truth: np.ndarray
    wrench_true: np.ndarray
    measurements: np.ndarray
    controls: np.ndarray
    rotors: np.ndarray
    saturated: np.ndarray
    tracks: dict

    @property
    def records(self):
        """Materialize TelemetryRecord objects from the arrays."""
        out = []
        for k in range(self.t.shape[0]):
            estimates = {}
            for name, tr in self.tracks.items():
                s = tr.states[k]
                aug = est.AugmentedState(
                    body=dyn.BodyState(q=s[0:4].copy(), r=s[4:7].copy(),
                                       v=s[7:10].copy(), omega=s[10:13].copy()),
                    observer=dyn.ObserverState(upsilon=s[13:19].copy()))
                estimates[name] = EstimateSnapshot(
                    state=aug,
                    wrench=dyn.Wrench(force=tr.wrench[k, 0:3].copy(),
                                      torque=tr.wrench[k, 3:6].copy()),
                    nis=float(tr.nis[k]))
            z = self.measurements[k]
            out.append(TelemetryRecord(
                t=float(self.t[k]),
                truth=dyn.BodyState.from_vector(self.truth[k]),
                wrench=dyn.Wrench(force=self.wrench_true[k, 0:3].copy(),
                                  torque=self.wrench_true[k, 3:6].copy()),
                measurement=est.Measurement(q=z[0:4].copy(), r=z[4:7].copy(),
                                            omega=z[7:10].copy()),
                estimates=estimates,
                control=dyn.ControlInput(thrust=float(self.controls[k, 0]),
                                         moments=self.controls[k, 1:4].copy()),
                rotors=self.rotors[k].copy(),
                saturated=bool(self.saturated[k])))
        return out


def _check_finite(name, x, k):
    # NaN fails the comparison, so a single reduction covers both cases.
    if not np.abs(x).max() <= DIVERGENCE_LIMIT:
        raise DivergenceDetected("%s diverged at step %d" % (name, k))


def run_scenario(profile=None, *, params=None, noise=None, admittance=None,
                 gains=None, dt=0.01, duration=70.0, seed=0,
                 estimators=("qukf", "ekf"), scaling=None, p0_diag=None,
                 pad_dims=0, collect_timing=False):
    """Run the closed loop and return a ScenarioRun.

    Per step: integrate the truth over [t, t+dt] under the previous control
    and the profile wrench, measure, step every estimator on the identical
    measurement, then derive the next control from the feed estimator (the
    transform filter when enabled): its force estimate moves the admittance
    reference, the tracking controller turns reference and state estimate
    into a wrench demand, and allocation plus rotor saturation yield what
    the plant actually receives. The estimators never see the truth.
    """
    params = params if params is not None else dyn.SystemParams()
    noise = noise if noise is not None else est.NoiseConfig()
    admittance = admittance if admittance is not None else AdmittanceParams()
    profile = profile if profile is not None else default_profile()
    params.validate()
    admittance.validate()
    profile.validate()

    n_steps = int(round(duration / dt))
    if n_steps < 1:
        raise ValidationError(["run.duration must cover at least one step"])
    names = [n for n in ("qukf", "ekf") if n in estimators]
    if len(names) != len(set(estimators)) or not names:
        raise ValidationError(["run.estimators must be a nonempty subset of "
                               "{'qukf', 'ekf'}, got %r" % (estimators,)])

    filters = {}
    if "qukf" in names:
        kw = dict(zip(("phi", "gamma", "sigma"), scaling)) if scaling else {}
        filters["qukf"] = est.QuaternionUkf(params=params, noise=noise, dt=dt,
                                            p0_diag=p0_diag,
                                            pad_dims=pad_dims, **kw)
    if "ekf" in names:
        filters["ekf"] = est.ExtendedKalman(params=params, noise=noise, dt=dt,
                                            p0_diag=p0_diag)
    feed = "qukf" if "qukf" in filters else "ekf"

    truth = dyn.BodyState.hover()
    ref = ReferenceState.rest()
    u = dyn.ControlInput.hover(params)
    j_inv = np.linalg.inv(params.inertia)

    # Noise is independent of the loop, so every draw happens up front;
    # bulk draws consume the generator streams in the same order as
    # per-step calls would.
    streams = NoiseStreams(seed)
    sig = np.sqrt(np.asarray(noise.r_diag, dtype=float))
    noise_q = est._batch_rotvec_to_quat(
        streams.attitude.normal(size=(n_steps, 3)) * sig[0:3])
    noise_r = streams.position.normal(size=(n_steps, 3)) * sig[3:6]
    noise_w = streams.rate.normal(size=(n_steps, 3)) * sig[6:9]

    grid = np.arange(1, n_steps + 1) * dt
    tau_arr = _profile_table(profile, grid)
    tau_mid = _profile_table(profile, grid - 0.5 * dt)

    # Allocation pipeline fixed by the parameters; factor it once.
    cfg_mat = dyn.build_config_matrix(params)
    w2 = params.alloc_weights * params.alloc_weights
    cw = cfg_mat / w2
    gram = cw @ cfg_mat.T
    if np.linalg.cond(gram) > 1e12:
        raise SingularAllocation("configuration matrix is rank deficient "
                                 "under the allocation weights")
    alloc_map = cw.T @ np.linalg.inv(gram)
    mix8 = np.zeros((8, 8))
    mix8[0:4, 0:4] = dyn.mixing_matrix(params)
    mix8[4:8, 4:8] = mix8[0:4, 0:4]
    rotor_map = np.linalg.inv(mix8) @ alloc_map  # wrench demand -> rotor thrusts
    cfg_mix = cfg_mat @ mix8                     # rotor thrusts -> system wrench
    rotor_cap = params.u_max / 4.0

    truth_arr = np.empty((n_steps, 13))
    meas_arr = np.empty((n_steps, 10))
    ctrl_arr = np.empty((n_steps, 4))
    rotor_arr = np.empty((n_steps, 8))
    sat_arr = np.zeros(n_steps, dtype=bool)
    tracks = {name: EstimatorTrack(
        states=np.empty((n_steps, 19)),
        wrench=np.empty((n_steps, 6)),
        nis=np.empty(n_steps),
        step_seconds=np.empty(n_steps) if collect_timing else None)
        for name in names}
    fd = filters[feed]

    for k in range(n_steps):
        tau_k = dyn.Wrench(force=tau_mid[k, 0:3], torque=tau_mid[k, 3:6])
        truth = dyn.rk4_step(truth, u, tau_k, params, dt, j_inv)
        tv = truth.as_vector()
        _check_finite("truth", tv, k)
        truth_arr[k] = tv

        meas = est.Measurement(q=qt.quat_mul(noise_q[k], truth.q),
                               r=truth.r + noise_r[k],
                               omega=truth.omega + noise_w[k])
        for name in names:
            f = filters[name]
            if collect_timing:
                tic = time.perf_counter()
                f.step(u, meas)
                tracks[name].step_seconds[k] = time.perf_counter() - tic
            else:
                f.step(u, meas)
            x = f.x[:19]
            _check_finite(name, x, k)
            tr = tracks[name]
            tr.states[k] = x
            tr.wrench[k] = f.wrench
            tr.nis[k] = f.last_nis

        ref = admittance_reference(fd.wrench, ref, admittance, dt)
        xf = fd.x
        body_est = dyn.BodyState(q=xf[0:4], r=xf[4:7], v=xf[7:10],
                                 omega=xf[10:13])
        cmd = tracking_controller(body_est, ref, params, gains)
        demand = np.empty(4)
        demand[0] = cmd.thrust
        demand[1:4] = cmd.moments
        thrusts = rotor_map @ demand
        if thrusts.min() < 0.0 or thrusts.max() > rotor_cap:
            sat_arr[k] = True
            np.clip(thrusts, 0.0, rotor_cap, out=thrusts)
        u4 = cfg_mix @ thrusts
        u = dyn.ControlInput(thrust=u4[0], moments=u4[1:4])

        meas_arr[k, 0:4] = meas.q
        meas_arr[k, 4:7] = meas.r
        meas_arr[k, 7:10] = meas.omega
        ctrl_arr[k] = u4
        rotor_arr[k] = thrusts

    return ScenarioRun(dt=dt, seed=seed, feed=feed, t=grid, truth=truth_arr,
                       wrench_true=tau_arr, measurements=meas_arr,
                       controls=ctrl_arr, rotors=rotor_arr, saturated=sat_arr,
                       tracks=tracks)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def convergence_time(t, err):
    """Settling time of an error trace, as an offset from t[0].

    The error is normalized by its peak over the window; the result is the
    first instant from which the trace stays inside 5% of that peak until
    the window ends. None when the trace never settles, 0.0 for an
    identically zero trace.
    """
    a = np.abs(np.asarray(err, dtype=float))
    peak = float(a.max())
    if peak == 0.0:
        return 0.0
    ok = a <= 0.05 * peak
    stay = np.flip(np.logical_and.accumulate(np.flip(ok)))
    idx = np.flatnonzero(stay)
    if idx.size == 0:
        return None
    return float(t[idx[0]] - t[0])


RMSE_CHANNELS = (
    "att_rad", "x_m", "y_m", "z_m", "vx_mps", "vy_mps", "vz_mps",
    "p_radps", "q_radps", "r_radps",
    "F_hx_N", "F_hy_N", "F_hz_N", "M_hx_Nm", "M_hy_Nm", "M_hz_Nm",
)
WRENCH_CHANNELS = RMSE_CHANNELS[10:]


@dataclass
class MetricsReport:
    window_s: float
    duration_s: float
    rmse: dict
    improvement_pct: dict
    convergence_time_s: dict
    mean_update_s: dict


def _attitude_errors(est_q, truth_q):
    # Rowwise |quat_diff|: rotation angle between estimate and truth.
    inv = truth_q * np.array([1.0, -1.0, -1.0, -1.0])
    rv = est._batch_quat_to_rotvec(est._batch_mul(est_q, inv))
    return np.sqrt(np.einsum("ij,ij->i", rv, rv))


def _channel_errors(run, track, sl):
    e = np.empty((run.t.shape[0], 16))
    e[:, 0] = _attitude_errors(track.states[:, 0:4], run.truth[:, 0:4])
    e[:, 1:10] = track.states[:, 4:13] - run.truth[:, 4:13]
    e[:, 10:16] = track.wrench - run.wrench_true
    return e[sl]


def compute_metrics(run, window=1.0):
    """Per-channel RMSE, improvement, convergence times, mean step cost.

    The window drops the leading transient from the RMSE. Convergence times
    are computed per wrench channel over its first applied pulse, from
    onset until the pulse leaves; channels never exercised report None.
    Improvement percentages appear only when both estimators ran.
    """
    n = run.t.shape[0]
    skip = min(int(round(window / run.dt)), n - 1)
    sl = slice(skip, n)

    rmse = {}
    conv = {}
    mean_update = {}
    for name, tr in run.tracks.items():
        e = _channel_errors(run, tr, sl)
        rmse[name] = {ch: float(np.sqrt(np.mean(e[:, i] ** 2)))
                      for i, ch in enumerate(RMSE_CHANNELS)}
        ctimes = {}
        for i, ch in enumerate(WRENCH_CHANNELS):
            col = 10 + i
            nz = np.abs(run.wrench_true[:, i]) > 0.0
            on = np.flatnonzero(nz)
            if on.size == 0:
                ctimes[ch] = None
                continue
            start = on[0]
            after = np.flatnonzero(~nz[start:])
            stop = start + after[0] if after.size else n
            err = (tr.wrench[start:stop, i] - run.wrench_true[start:stop, i])
            ctimes[ch] = convergence_time(run.t[start:stop], err)
        conv[name] = ctimes
        mean_update[name] = (float(tr.step_seconds.mean())
                             if tr.step_seconds is not None else None)

    improvement = {}
    if "qukf" in rmse and "ekf" in rmse:
        for ch in RMSE_CHANNELS:
            base = rmse["ekf"][ch]
            improvement[ch] = (100.0 * (base - rmse["qukf"][ch]) / base
                               if base > 0.0 else None)

    return MetricsReport(window_s=window, duration_s=float(run.t[-1]),
                         rmse=rmse, improvement_pct=improvement,
                         convergence_time_s=conv, mean_update_s=mean_update)
