"""Joint state and external-wrench estimation for a dual-quadrotor payload.

The package bundles the quaternion/SO(3) primitives, the rigid-body and
rotor-allocation model, a quaternion-manifold unscented Kalman filter with
an embedded momentum-style wrench observer, an additive-quaternion EKF
baseline, and a deterministic closed-loop scenario simulator with CSV/JSONL
telemetry and a command-line front end.
"""

__version__ = "0.1.0"
