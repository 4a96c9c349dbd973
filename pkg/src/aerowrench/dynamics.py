"""Rigid-body model of the dual-quadrotor slung-payload assembly.

The two quadrotors and the payload move as one rigid body (rigid links, no
relative rotation), so the plant is a single 6-DoF body driven by the summed
rotor wrench plus an unknown external (human) wrench applied at the payload.

State vector layouts used by this module and the estimators:

    body state (13,):       [q(4), r(3), v(3), omega(3)]
    augmented state (20,):  [q(4), r(3), v(3), omega(3), upsilon(6), 1]

q is a scalar-first unit quaternion, r and v are inertial position and
velocity, omega is the body angular rate, and upsilon is the internal state
of the momentum-style wrench observer. The trailing 1 carries the affine
terms of the continuous-time generator so that one matrix exponential
advances the whole augmented state.

Control u = [F_th, U_tau] stacks total thrust (N) along body z and the body
torque (N m) produced by the eight rotors.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import SingularAllocation, ValidationError
from .quat import quat_mul, quat_normalize, quat_to_rot, skew

# Augmented-state slices (20-vector).
IQ = slice(0, 4)
IR = slice(4, 7)
IV = slice(7, 10)
IW = slice(10, 13)
IU = slice(13, 19)
IDUMMY = 19

E_Z = np.array([0.0, 0.0, 1.0])


def _default_inertia():
    return np.diag([3.227, 0.061, 3.277])


@dataclass
class SystemParams:
    """Physical constants of the combined body and its actuation.

    Defaults describe a 3.49 kg assembly: two quadrotors on the ends of a
    2 m payload bar, per-quadrotor thrust capped at u_max, with a diagonal
    combined inertia that is much smaller about pitch (y) than about roll
    and yaw. delta is the wrench-observer gain; the observer pole on each
    channel sits at delta divided by the corresponding mass-matrix entry.
    """

    mass: float = 3.49
    inertia: np.ndarray = field(default_factory=_default_inertia)
    gravity: float = 9.81
    payload_length: float = 2.0
    attach_1: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    attach_2: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, 0.0]))
    u_max: float = 35.0
    delta: float = 72.0
    rotor_arm: float = 0.25
    rotor_thrust_coeff: float = 1.0e-5
    rotor_drag_coeff: float = 1.6e-7
    alloc_weights: np.ndarray = field(default_factory=lambda: np.ones(8))

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.attach_1 = np.asarray(self.attach_1, dtype=float)
        self.attach_2 = np.asarray(self.attach_2, dtype=float)
        self.alloc_weights = np.asarray(self.alloc_weights, dtype=float)

    def validate(self):
        """Raise ValidationError listing every violated constraint."""
        bad = []
        if not self.mass > 0.0:
            bad.append("system.mass must be positive, got %r" % self.mass)
        j = self.inertia
        if j.shape != (3, 3):
            bad.append("system.inertia must be 3x3, got shape %s" % (j.shape,))
        else:
            if np.max(np.abs(j - j.T)) > 1e-9:
                bad.append("system.inertia must be symmetric")
            elif np.any(np.linalg.eigvalsh(j) <= 0.0):
                bad.append("system.inertia must be positive definite")
        if not self.gravity > 0.0:
            bad.append("system.gravity must be positive, got %r" % self.gravity)
        if not self.payload_length > 0.0:
            bad.append("system.payload_length must be positive, got %r" % self.payload_length)
        for name in ("attach_1", "attach_2"):
            if getattr(self, name).shape != (3,):
                bad.append("system.%s must be a 3-vector" % name)
        if not self.u_max > 0.0:
            bad.append("system.u_max must be positive, got %r" % self.u_max)
        if not self.delta > 0.0:
            bad.append("system.delta must be positive, got %r" % self.delta)
        if not self.rotor_arm > 0.0:
            bad.append("system.rotor_arm must be positive, got %r" % self.rotor_arm)
        if not self.rotor_thrust_coeff > 0.0:
            bad.append("system.rotor_thrust_coeff must be positive")
        if not self.rotor_drag_coeff > 0.0:
            bad.append("system.rotor_drag_coeff must be positive")
        if self.alloc_weights.shape != (8,) or np.any(self.alloc_weights <= 0.0):
            bad.append("system.alloc_weights must be 8 positive entries")
        if bad:
            raise ValidationError(bad)
        return self

    def mass_matrix(self):
        """blkdiag(m I3, inertia), the 6x6 generalized mass."""
        m = np.zeros((6, 6))
        m[:3, :3] = np.eye(3) * self.mass
        m[3:, 3:] = self.inertia
        return m

    def observer_gain_matrix(self):
        """A = delta * M^-1; diagonal entries are the observer decay rates."""
        return self.delta * np.linalg.inv(self.mass_matrix())


@dataclass
class BodyState:
    q: np.ndarray
    r: np.ndarray
    v: np.ndarray
    omega: np.ndarray

    @classmethod
    def hover(cls, position=(0.0, 0.0, 0.0)):
        return cls(q=np.array([1.0, 0.0, 0.0, 0.0]), r=np.asarray(position, dtype=float),
                   v=np.zeros(3), omega=np.zeros(3))

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(q=x[0:4].copy(), r=x[4:7].copy(), v=x[7:10].copy(), omega=x[10:13].copy())

    def as_vector(self):
        return np.concatenate([self.q, self.r, self.v, self.omega])


@dataclass
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    @classmethod
    def zero(cls):
        return cls(force=np.zeros(3), torque=np.zeros(3))

    @classmethod
    def from_vector(cls, w):
        w = np.asarray(w, dtype=float)
        return cls(force=w[:3].copy(), torque=w[3:].copy())

    def as_vector(self):
        return np.concatenate([self.force, self.torque])


@dataclass
class ControlInput:
    thrust: float
    moments: np.ndarray

    @classmethod
    def hover(cls, params):
        return cls(thrust=params.mass * params.gravity, moments=np.zeros(3))

    @classmethod
    def from_vector(cls, u):
        u = np.asarray(u, dtype=float)
        return cls(thrust=float(u[0]), moments=u[1:4].copy())

    def as_vector(self):
        return np.array([self.thrust, *self.moments])


@dataclass
class ObserverState:
    upsilon: np.ndarray

    @classmethod
    def zero(cls):
        return cls(upsilon=np.zeros(6))


# ---------------------------------------------------------------------------
# Continuous-time dynamics
# ---------------------------------------------------------------------------

def _body_z_inertial(q):
    # Third column of R(q): direction of total thrust in the inertial frame.
    qw, qx, qy, qz = q
    return np.array([2.0 * (qx * qz + qw * qy),
                     2.0 * (qy * qz - qw * qx),
                     1.0 - 2.0 * (qx * qx + qy * qy)])


def _system_derivative_vec(x, u, tau, p, j_inv=None):
    """Time derivative of the 13-vector body state.

    u = [F_th, U_tau(3)], tau = [F_h(3) inertial, M_h(3) body]. The external
    force acts through the system mass; the external moment through the
    inertia. Quaternion kinematics use the body-rate convention
    qdot = q * (0, omega) / 2.
    """
    q = x[0:4]
    v = x[7:10]
    w = x[10:13]
    qw, qx, qy, qz = q
    wx, wy, wz = w
    out = np.empty(13)
    out[0] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[1] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[2] = 0.5 * (qw * wy + qz * wx - qx * wz)
    out[3] = 0.5 * (qw * wz + qx * wy - qy * wx)
    out[4:7] = v
    out[7:10] = _body_z_inertial(q) * (u[0] / p.mass) + tau[:3] / p.mass
    out[9] -= p.gravity
    jw = p.inertia @ w
    gyro = np.array([wy * jw[2] - wz * jw[1],
                     wz * jw[0] - wx * jw[2],
                     wx * jw[1] - wy * jw[0]])
    rhs = u[1:4] - gyro + tau[3:]
    if j_inv is None:
        out[10:13] = np.linalg.solve(p.inertia, rhs)
    else:
        out[10:13] = j_inv @ rhs
    return out


def system_derivative(state, u, tau_h, p):
    """Combined-body derivative; see _system_derivative_vec for layout."""
    return _system_derivative_vec(state.as_vector(), u.as_vector(),
                                  tau_h.as_vector(), p)


def quadrotor_derivative(q, v_i, omega, u_i, f_link, t_link, m_i, j_i, gravity):
    """Single-quadrotor rigid-body derivative (component model).

    f_link is the inertial-frame force and t_link the body-frame torque the
    quadrotor exerts on the payload through its link; the reactions enter
    here with a minus sign. u_i = [thrust, moments(3)]. Attitude and rate
    are shared with the assembly. Returns [qdot(4), rdot(3)=v_i, vdot(3),
    omegadot(3)].

    Used only as a consistency oracle against the combined model; the
    simulator always integrates the combined body.
    """
    qdot = 0.5 * quat_mul(q, np.array([0.0, *omega]))
    vdot = _body_z_inertial(q) * (u_i[0] / m_i) - gravity * E_Z - f_link / m_i
    wdot = np.linalg.solve(j_i, u_i[1:4] - np.cross(omega, j_i @ omega) - t_link)
    return np.concatenate([qdot, v_i, vdot, wdot])


def payload_derivative(q, v_l, omega, f_links, t_links, arms, tau_h, m_l, j_l, gravity):
    """Payload rigid-body derivative (component model).

    f_links / t_links are sequences of link forces (inertial) and torques
    (body) from each quadrotor, arms the body-frame attachment offsets from
    the payload center of mass. The human wrench tau_h = [F_h inertial,
    M_h body] acts on the payload. Lever-arm moments use body-frame force
    components. Oracle-only, like quadrotor_derivative.
    """
    rot_t = quat_to_rot(q).T
    force = np.sum(f_links, axis=0) + tau_h[:3] - m_l * gravity * E_Z
    moment = np.sum(t_links, axis=0) + tau_h[3:] - np.cross(omega, j_l @ omega)
    for f_i, l_i in zip(f_links, arms):
        moment = moment + np.cross(l_i, rot_t @ f_i)
    qdot = 0.5 * quat_mul(q, np.array([0.0, *omega]))
    vdot = force / m_l
    wdot = np.linalg.solve(j_l, moment)
    return np.concatenate([qdot, v_l, vdot, wdot])


def rk4_step(state, u, tau_h, p, dt, j_inv=None):
    """Classic fixed-step RK4 on the body state, quaternion renormalized.

    j_inv may carry a precomputed inverse inertia for tight loops.
    """
    x = state.as_vector()
    uv = u.as_vector()
    tv = tau_h.as_vector()
    if j_inv is None:
        j_inv = np.linalg.inv(p.inertia)
    k1 = _system_derivative_vec(x, uv, tv, p, j_inv)
    k2 = _system_derivative_vec(x + 0.5 * dt * k1, uv, tv, p, j_inv)
    k3 = _system_derivative_vec(x + 0.5 * dt * k2, uv, tv, p, j_inv)
    k4 = _system_derivative_vec(x + dt * k3, uv, tv, p, j_inv)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[0:4] = quat_normalize(out[0:4])
    return BodyState.from_vector(out)


def mechanical_energy(state, p):
    """Kinetic plus gravitational potential energy of the rigid body."""
    ke = 0.5 * p.mass * float(state.v @ state.v)
    ke += 0.5 * float(state.omega @ (p.inertia @ state.omega))
    return ke + p.mass * p.gravity * float(state.r[2])


# ---------------------------------------------------------------------------
# Rotor mixing and allocation
# ---------------------------------------------------------------------------

def mixing_matrix(p):
    """Per-quadrotor map from 4 rotor thrusts to [thrust, mx, my, mz].

    Plus-configuration arms of length rotor_arm; yaw moment from rotor drag
    with drag-to-thrust ratio nu = k_m / k_t.
    """
    arm = p.rotor_arm
    nu = p.rotor_drag_coeff / p.rotor_thrust_coeff
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [0.0, arm, 0.0, -arm],
        [-arm, 0.0, arm, 0.0],
        [nu, -nu, nu, -nu],
    ])


def rotor_mix(thrusts, p):
    """Collective thrust and body moments produced by 4 rotor thrusts."""
    return mixing_matrix(p) @ np.asarray(thrusts, dtype=float)


def rotor_unmix(u_i, p):
    """Rotor thrusts realizing a per-quadrotor [thrust, moments] demand."""
    return np.linalg.solve(mixing_matrix(p), np.asarray(u_i, dtype=float))


def build_config_matrix(p):
    """4x8 map from stacked per-quadrotor wrenches to the system wrench.

    Columns group as [u_11, u_12, u_13, u_14, u_21, ...]: thrust then body
    moments for quadrotor 1, then quadrotor 2. Thrust at a lateral offset l
    adds (l_y, -l_x, 0) per newton to the body moment, so only the in-plane
    offset components appear.
    """
    c = np.zeros((4, 8))
    for k, l in enumerate((p.attach_1, p.attach_2)):
        base = 4 * k
        c[0, base] = 1.0
        c[1, base] = l[1]
        c[2, base] = -l[0]
        c[1:4, base + 1:base + 4] = np.eye(3)
    return c


def allocate(demand, p, weights=None, cond_limit=1e12):
    """Cost-weighted minimum-norm allocation of a system wrench demand.

    Solves min ||diag(w) u|| subject to C u = demand via the weighted
    pseudoinverse u = W^-2 C^T (C W^-2 C^T)^-1 demand. Raises
    SingularAllocation when the 4x4 Gram matrix is ill-conditioned beyond
    cond_limit.
    """
    demand = np.asarray(demand, dtype=float)
    w = p.alloc_weights if weights is None else np.asarray(weights, dtype=float)
    c = build_config_matrix(p)
    cw = c / (w * w)
    gram = cw @ c.T
    if np.linalg.cond(gram) > cond_limit:
        raise SingularAllocation("allocation Gram matrix condition exceeds %g" % cond_limit)
    return cw.T @ np.linalg.solve(gram, demand)


def saturate_rotors(u_c, p):
    """Clip the allocation to per-rotor limits and re-mix.

    Each quadrotor's [thrust, moments] demand is converted to 4 rotor
    thrusts, clipped to [0, u_max / 4], and converted back. Returns the
    achievable stacked demand, the 8 clipped rotor thrusts, and whether any
    rotor saturated.
    """
    u_c = np.asarray(u_c, dtype=float)
    mix = mixing_matrix(p)
    cap = p.u_max / 4.0
    out = np.empty(8)
    thrusts = np.empty(8)
    hit = False
    for k in range(2):
        f = np.linalg.solve(mix, u_c[4 * k:4 * k + 4])
        f_clip = np.clip(f, 0.0, cap)
        hit = hit or bool(np.any(f_clip != f))
        thrusts[4 * k:4 * k + 4] = f_clip
        out[4 * k:4 * k + 4] = mix @ f_clip
    return out, thrusts, hit


# ---------------------------------------------------------------------------
# Compact wrench model and observer
# ---------------------------------------------------------------------------

def compact_matrices(q, omega, p):
    """(M, G, W) of the compact model tau_h = M chidot + G + W u.

    chi = [v, omega]; G collects gravity and the gyroscopic term, W removes
    the commanded wrench so that the residual is exactly the external one.
    """
    m = p.mass_matrix()
    g = np.concatenate([p.mass * p.gravity * E_Z,
                        np.cross(omega, p.inertia @ omega)])
    w = np.zeros((6, 4))
    w[:3, 0] = -_body_z_inertial(q)
    w[3:, 1:] = -np.eye(3)
    return m, g, w


def observer_derivative(upsilon, state, u, p):
    """Acceleration-free wrench observer: dY/dt = A (G + W u - Gamma - Y).

    A = delta M^-1. The observer integrates only measurable signals; its
    output wrench_estimate() converges to the true external wrench with
    per-channel rate A_ii when fed exact states.
    """
    _, g, w = compact_matrices(state.q, state.omega, p)
    gamma = p.delta * np.concatenate([state.v, state.omega])
    a = p.observer_gain_matrix()
    return a @ (g + w @ u.as_vector() - gamma - upsilon)


def wrench_estimate(upsilon, v, omega, p):
    """External-wrench estimate tau_hat = upsilon + delta [v, omega]."""
    return upsilon + p.delta * np.concatenate([v, omega])


# ---------------------------------------------------------------------------
# Augmented generator and discrete transition
# ---------------------------------------------------------------------------

def build_fc(x, u, p):
    """Continuous-time generator of the augmented 20-state.

    Frozen-coefficient form: every state-dependent coefficient is evaluated
    at x and held, which makes exp(fc * T) an exact one-step integrator of
    the frozen system. The observer state enters through its own stable
    diagonal block (eigenvalues -A_ii) rather than through the affine
    column, so the stiff fast channels decay instead of exploding at any
    step size.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q = x[IQ]
    v = x[IV]
    w = x[IW]
    fc = np.zeros((20, 20))

    # Quaternion kinematics: qdot = 0.5 Xi(omega) q.
    fc[0, 1:4] = -0.5 * w
    fc[1:4, 0] = 0.5 * w
    fc[1:4, 1:4] = -0.5 * skew(w)

    fc[IR, IV] = np.eye(3)

    a_v = _body_z_inertial(q) * (u[0] / p.mass) - p.gravity * E_Z
    fc[IV, IDUMMY] = a_v

    jw = p.inertia @ w
    fc[IW, IDUMMY] = np.linalg.solve(p.inertia, u[1:4] - np.cross(w, jw))

    a = p.observer_gain_matrix()
    _, g, wmat = compact_matrices(q, w, p)
    gamma = p.delta * np.concatenate([v, w])
    fc[IU, IU] = -a
    fc[IU, IDUMMY] = a @ (g + wmat @ u - gamma)
    return fc


class TransitionContext:
    """Precomputed constants for the closed-form discrete transition."""

    def __init__(self, p, dt):
        self.params = p
        self.dt = dt
        self.inertia = p.inertia.copy()
        self.inertia_inv = np.linalg.inv(p.inertia)
        a = p.observer_gain_matrix()
        self.decay = expm(-a * dt)            # e^{-A T}
        self.forced = np.eye(6) - self.decay  # (I - e^{-A T})


def propagate_batch(xs, u, ctx):
    """Advance a batch of augmented states one step, closed form.

    xs has shape (k, 20); u = [F_th, U_tau] is shared by the batch. The
    update is the exact matrix exponential of build_fc evaluated at each
    row, computed blockwise: the quaternion block is a planar rotation, the
    translational chain is nilpotent, and the observer block is a stable
    first-order decay toward G + W u - Gamma. Affine terms scale with the
    trailing dummy component so the map agrees with the dense exponential
    for any input.
    """
    p = ctx.params
    dt = ctx.dt
    xs = np.asarray(xs, dtype=float)
    k = xs.shape[0]
    q = xs[:, IQ]
    r = xs[:, IR]
    v = xs[:, IV]
    om = xs[:, IW]
    ups = xs[:, IU]
    dummy = xs[:, IDUMMY]

    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    bz = np.empty((k, 3))
    bz[:, 0] = 2.0 * (qx * qz + qw * qy)
    bz[:, 1] = 2.0 * (qy * qz - qw * qx)
    bz[:, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)

    a_v = bz * (u[0] / p.mass)
    a_v[:, 2] -= p.gravity
    j_om = om @ ctx.inertia.T
    gyro = np.empty((k, 3))
    gyro[:, 0] = om[:, 1] * j_om[:, 2] - om[:, 2] * j_om[:, 1]
    gyro[:, 1] = om[:, 2] * j_om[:, 0] - om[:, 0] * j_om[:, 2]
    gyro[:, 2] = om[:, 0] * j_om[:, 1] - om[:, 1] * j_om[:, 0]
    torque = u[1:4] - gyro
    a_om = torque @ ctx.inertia_inv.T

    # G + W u - Gamma at each sigma point (frozen forcing of the observer).
    gwu = np.empty((k, 6))
    gwu[:, :3] = -bz * u[0] - p.delta * v
    gwu[:, 2] += p.mass * p.gravity
    gwu[:, 3:] = gyro - u[1:4] - p.delta * om

    out = np.empty_like(xs)
    scale = dummy[:, None]
    out[:, IR] = r + dt * v + (0.5 * dt * dt) * a_v * scale
    out[:, IV] = v + dt * a_v * scale
    out[:, IW] = om + dt * a_om * scale
    out[:, IU] = ups @ ctx.decay.T + (gwu * scale) @ ctx.forced.T
    out[:, IDUMMY] = dummy

    # q <- q * q(omega dt): right multiplication integrates body rates.
    ang = np.sqrt(np.einsum("ij,ij->i", om, om)) * dt
    half = 0.5 * ang
    cw = np.cos(half)
    small = ang < 1e-8
    factor = np.empty(k)
    factor[small] = (0.5 - ang[small] * ang[small] / 48.0) * dt
    ns = ~small
    factor[ns] = np.sin(half[ns]) / ang[ns] * dt
    dq = np.empty((k, 4))
    dq[:, 0] = cw
    dq[:, 1:] = om * factor[:, None]

    dw, dx, dy, dz = dq[:, 0], dq[:, 1], dq[:, 2], dq[:, 3]
    qn = out[:, IQ]
    qn[:, 0] = qw * dw - qx * dx - qy * dy - qz * dz
    qn[:, 1] = qw * dx + dw * qx + qy * dz - qz * dy
    qn[:, 2] = qw * dy + dw * qy + qz * dx - qx * dz
    qn[:, 3] = qw * dz + dw * qz + qx * dy - qy * dx
    qn /= np.sqrt(np.einsum("ij,ij->i", qn, qn))[:, None]
    return out


def discrete_transition(state, observer, u, p, dt, method="closed"):
    """One discrete step of the augmented dynamics.

    method "closed" uses the blockwise exact exponential (fast path);
    "expm" assembles build_fc and calls the general scaling-and-squaring
    routine. Both agree to floating-point precision; the dense path exists
    to validate the fast one and for experiments with modified generators.
    """
    x = np.concatenate([state.as_vector(), observer.upsilon, [1.0]])
    uv = u.as_vector()
    if method == "closed":
        out = propagate_batch(x[None, :], uv, TransitionContext(p, dt))[0]
    elif method == "expm":
        out = expm(build_fc(x, uv, p) * dt) @ x
        out[IQ] = quat_normalize(out[IQ])
    else:
        raise ValueError("unknown method %r" % method)
    return BodyState.from_vector(out[:13]), ObserverState(upsilon=out[IU].copy())
