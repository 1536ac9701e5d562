"""Event-assisted motion deblurring on a differentiable toy scene.

Event simulation, Event Double Integral deblurring, a Stage-1 loss stack with
analytic gradients, and Stage-2 latent-residual refinement behind pluggable
denoisers and codecs.
"""

from .core import (ConfigError, DomainError, Event, EventStream, ExposureWindow, NumericError,
                   Pose2, QuatPose, RunConfig, Trajectory, pose_lerp, quat_slerp,
                   trajectory_pose_at)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "Event", "EventStream", "ExposureWindow", "NumericError",
    "Pose2", "QuatPose", "RunConfig", "Trajectory", "pose_lerp", "quat_slerp",
    "trajectory_pose_at",
]
