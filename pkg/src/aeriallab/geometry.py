"""Viewing-angle model for an elevated camera looking at a vertical target.

A camera at height ``H`` observes a target of height ``h`` standing at
horizontal distance ``l``.  The target's top and bottom subtend an angle
``alpha`` at the lens; that angle is zero directly underneath the camera,
grows with distance, peaks at ``l = sqrt(H * (H - h))``, and decays back to
zero at infinity.  Everything below is a closed form in (H, h, l).
"""

import math
from dataclasses import dataclass

from .errors import DomainError


@dataclass(frozen=True)
class ViewGeometry:
    """Camera height and target height in meters; requires H > h > 0."""

    camera_height: float
    target_height: float

    def __post_init__(self):
        H, h = self.camera_height, self.target_height
        if not (H > h > 0.0):
            raise DomainError(
                f"require camera_height > target_height > 0, got H={H}, h={h}"
            )


def _check_distance(l):
    if l < 0.0:
        raise DomainError(f"horizontal distance must be >= 0, got {l}")


def cos_alpha(geom: ViewGeometry, l: float) -> float:
    """Cosine of the subtended angle at horizontal distance ``l``.

    cos(alpha) = (H^2 - H*h + l^2) / (sqrt(H^2 + l^2) * sqrt((H-h)^2 + l^2)),
    always in (0, 1].
    """
    _check_distance(l)
    H, h = geom.camera_height, geom.target_height
    num = H * H - H * h + l * l
    den = math.sqrt(H * H + l * l) * math.sqrt((H - h) ** 2 + l * l)
    return num / den


def viewing_angle(geom: ViewGeometry, l: float) -> float:
    """Subtended angle in radians, in [0, pi/2)."""
    c = cos_alpha(geom, l)
    return math.acos(min(1.0, max(-1.0, c)))


def d_cos_alpha_dl(geom: ViewGeometry, l: float) -> float:
    """Closed-form derivative of :func:`cos_alpha` with respect to ``l``.

    With a = H and b = H - h:
    f'(l) = [2l(a^2+l^2)(b^2+l^2) - l(ab+l^2)(a^2+b^2+2l^2)]
            / [(a^2+l^2)^(3/2) * (b^2+l^2)^(3/2)]
    """
    _check_distance(l)
    a = geom.camera_height
    b = geom.camera_height - geom.target_height
    l2 = l * l
    pa = a * a + l2
    pb = b * b + l2
    num = 2.0 * l * pa * pb - l * (a * b + l2) * (a * a + b * b + 2.0 * l2)
    return num / (pa ** 1.5 * pb ** 1.5)


def d_viewing_angle_dl(geom: ViewGeometry, l: float) -> float:
    """Derivative of the angle itself.

    Uses the cancellation-free identity
    sin(alpha) = l*h / (sqrt(H^2+l^2) * sqrt((H-h)^2+l^2)), whose l -> 0
    limit gives d alpha/d l = h / (H*(H-h)) directly beneath the camera.
    """
    _check_distance(l)
    H, h = geom.camera_height, geom.target_height
    a, b = H, H - h
    if l == 0.0:
        return h / (a * b)
    sin_alpha = l * h / (math.sqrt(a * a + l * l) * math.sqrt(b * b + l * l))
    return -d_cos_alpha_dl(geom, l) / sin_alpha


def optimal_distance(geom: ViewGeometry) -> float:
    """The unique positive maximizer of the angle: sqrt(H * (H - h))."""
    H, h = geom.camera_height, geom.target_height
    return math.sqrt(H * (H - h))


def angle_profile(geom: ViewGeometry, distances):
    """(l, alpha, d alpha/d l) triples for the given distances."""
    return [
        (float(l), viewing_angle(geom, l), d_viewing_angle_dl(geom, l))
        for l in distances
    ]
