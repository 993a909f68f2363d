"""Perspective-warp positive pairs for contrastive pre-training.

A source quad (the image corners, ordered TL, TR, BR, BL) is mapped to a
destination quad whose bottom corners slide toward each other, the 3x3
perspective matrix is recovered from the four correspondences, and the
image is warped by inverse mapping with bilinear sampling.  One original
and its warped-then-cropped twin form a positive pair; different images
form the negatives.

Destination construction follows the published bottom-edge blend
    u2 = a*x2 + (1-a)*x3,   u3 = a*x3 + (1-a)*x2
which for a < 0.5 makes the two bottom corners exchange horizontal order
(a keystone squeeze combined with a bottom-edge mirror).  The mirrored
mapping places its horizon line inside the frame, leaving almost no valid
content, so pair generation defaults to the monotone keystone variant
(``mirror=False``), which blends each bottom corner toward the other by
the fraction ``a`` without crossing.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateQuadError,
    EstimationError,
    HorizonError,
    ParameterError,
    ShapeError,
    SizeError,
)

ALPHA_RANGE = (0.05, 0.35)


def as_quad(points):
    """Validate and return four (x, y) corners as a (4, 2) float array.

    Rejects quads in which any three points are (near-)collinear.
    """
    q = np.asarray(points, dtype=np.float64)
    if q.shape != (4, 2):
        raise ShapeError(f"quad must be 4 points of (x, y), got shape {q.shape}")
    scale = max(np.ptp(q[:, 0]), np.ptp(q[:, 1]), 1e-30)
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                d1 = q[j] - q[i]
                d2 = q[k] - q[i]
                cross = d1[0] * d2[1] - d1[1] * d2[0]
                if abs(cross) <= 1e-9 * scale * scale:
                    raise DegenerateQuadError(
                        f"points {i}, {j}, {k} of quad are collinear: {q.tolist()}"
                    )
    return q


def image_corners(width, height):
    """Corner quad (TL, TR, BR, BL) of a width x height frame."""
    return np.array(
        [[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]], dtype=np.float64
    )


def make_dst_points(src, alpha, mirror=True):
    """Blend the bottom two corners of ``src`` by the coefficient ``alpha``.

    With ``mirror=True`` (the published blend) corner 2 moves to
    a*x2 + (1-a)*x3 and corner 3 to a*x3 + (1-a)*x2, so for a < 0.5 the
    bottom corners swap horizontal order.  ``mirror=False`` applies the
    same blend with max(a, 1-a), which is the identical squeeze minus the
    order swap.  y coordinates are never touched; alpha = 1 returns the
    source quad unchanged under both variants.
    """
    if not (0.0 < alpha <= 1.0):
        raise ParameterError(f"alpha must be in (0, 1], got {alpha}")
    src = as_quad(src)
    dst = src.copy()
    x2, x3 = src[2, 0], src[3, 0]
    a = alpha if mirror else max(alpha, 1.0 - alpha)
    dst[2, 0] = a * x2 + (1.0 - a) * x3
    dst[3, 0] = a * x3 + (1.0 - a) * x2
    try:
        as_quad(dst)
    except DegenerateQuadError as exc:
        raise DegenerateQuadError(
            f"alpha={alpha} collapses the bottom edge to a degenerate quad"
        ) from exc
    return dst


def sample_alpha(rng):
    """Uniform transform coefficient in [0.05, 0.35]."""
    return float(rng.uniform(*ALPHA_RANGE))


@dataclass(frozen=True)
class Homography:
    """3x3 projective map with the bottom-right entry pinned to 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {m.shape}")
        if m[2, 2] != 1.0:
            raise ParameterError(f"homography entry (3,3) must be exactly 1, got {m[2, 2]!r}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise EstimationError("homography matrix is singular")
        object.__setattr__(self, "matrix", m)

    def inverse(self):
        """Matrix inverse renormalized so entry (3,3) is 1 again."""
        inv = np.linalg.inv(self.matrix)
        if abs(inv[2, 2]) < 1e-15 * np.abs(inv).max():
            raise EstimationError("inverse homography cannot be renormalized")
        return Homography(_pin_corner(inv / inv[2, 2]))

    def coefficients(self):
        """The 8 free entries, row-major, excluding the fixed corner."""
        return self.matrix.reshape(-1)[:8].tolist()


def _pin_corner(m):
    m = np.array(m, dtype=np.float64)
    m[2, 2] = 1.0
    return m


def solve_homography(src, dst):
    """Recover the projective map sending each src corner to its dst corner.

    Clearing denominators in u = (m11 x + m12 y + m13)/(m31 x + m32 y + 1)
    and its v twin gives two linear rows per correspondence; four points
    make the 8x8 system square, solved by partially pivoted elimination.
    """
    src = as_quad(src)
    dst = as_quad(dst)
    if np.array_equal(src, dst):
        return Homography(np.eye(3))
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        b[2 * i] = u
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i + 1] = v
    try:
        coef = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"degenerate correspondences: {exc}") from exc
    m = np.empty((3, 3))
    m.reshape(-1)[:8] = coef
    m[2, 2] = 1.0
    return Homography(m)


def apply_homography(h: Homography, points):
    """Map (x, y) points through the projective transform.

    Accepts a single (x, y) pair or an (N, 2) array; raises near the
    horizon line where the perspective denominator vanishes.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 2:
        raise ShapeError(f"points must be (x, y) pairs, got shape {points.shape}")
    m = h.matrix
    den = m[2, 0] * pts[:, 0] + m[2, 1] * pts[:, 1] + 1.0
    if np.any(np.abs(den) <= 1e-12):
        raise HorizonError("point lies on the horizon line of the transform")
    u = (m[0, 0] * pts[:, 0] + m[0, 1] * pts[:, 1] + m[0, 2]) / den
    v = (m[1, 0] * pts[:, 0] + m[1, 1] * pts[:, 1] + m[1, 2]) / den
    out = np.stack([u, v], axis=-1)
    return out[0] if single else out


def bilinear_sample(img, xs, ys):
    """Sample [C, H, W] image at fractional coords; zero outside the frame."""
    c, h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    def fetch(xi, yi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return vals * inside

    top = fetch(x0, y0) * (1.0 - fx) + fetch(x0 + 1, y0) * fx
    bot = fetch(x0, y0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0 + 1) * fx
    return top * (1.0 - fy) + bot * fy


def warp_image(img, h: Homography):
    """Inverse-mapping perspective warp of a [C, H, W] image.

    Every output pixel samples the source at the inverse transform of its
    own coordinates, bilinearly; samples outside the source (and pixels on
    the far side of the horizon) are filled with 0.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"image must be [C, H, W], got shape {img.shape}")
    inv = h.inverse().matrix
    _, height, width = img.shape
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    u = u.reshape(-1)
    v = v.reshape(-1)
    den = inv[2, 0] * u + inv[2, 1] * v + 1.0
    valid = np.abs(den) > 1e-9
    safe_den = np.where(valid, den, 1.0)
    sx = np.where(valid, (inv[0, 0] * u + inv[0, 1] * v + inv[0, 2]) / safe_den, -1e9)
    sy = np.where(valid, (inv[1, 0] * u + inv[1, 1] * v + inv[1, 2]) / safe_den, -1e9)
    out = bilinear_sample(img, sx, sy)
    return np.ascontiguousarray(out.reshape(img.shape[0], height, width))


def bilinear_resize(img, out_h, out_w):
    """Resize a [C, H, W] image with bilinear sampling (pixel-center grid)."""
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0.0, w - 1.0), np.clip(ys, 0.0, h - 1.0))
    out = bilinear_sample(img, gx.reshape(-1), gy.reshape(-1))
    return np.ascontiguousarray(out.reshape(c, out_h, out_w))


def central_crop_box(size):
    """Crop window (row0, col0, side) that stays inside the warped content
    for every alpha up to 0.35: horizontally centered at half size, shifted
    one eighth below the top edge."""
    side = size // 2
    return size // 8, (size - side) // 2, side


def make_pair(img, rng, alpha=None, crop_box=None, mirror=False, out_size=None):
    """One positive pair: (crop of original, matching crop of warped image).

    Both crops use the same window (defaulting to :func:`central_crop_box`,
    which avoids the warp's zero fill) and are resized back to
    ``out_size`` (the input size unless overridden).  Returns
    (view_a, view_b, alpha).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise ShapeError(f"pair generation expects a square [C, S, S] image, got {img.shape}")
    size = img.shape[1]
    if size < 16:
        raise SizeError(f"image side {size} is too small to crop a pair from")
    if alpha is None:
        alpha = sample_alpha(rng)
    src = image_corners(size, size)
    dst = make_dst_points(src, alpha, mirror=mirror)
    h = solve_homography(src, dst)
    warped = warp_image(img, h)
    if crop_box is None:
        crop_box = central_crop_box(size)
    row0, col0, side = crop_box
    out_size = size if out_size is None else out_size
    view_a = bilinear_resize(img[:, row0:row0 + side, col0:col0 + side], out_size, out_size)
    view_b = bilinear_resize(warped[:, row0:row0 + side, col0:col0 + side], out_size, out_size)
    return view_a, view_b, float(alpha)


@dataclass
class PairBatch:
    """Index-aligned originals and transformed views; (i, i) are the
    positives and (i, j != i) the negatives."""

    originals: list = field(default_factory=list)
    transformed: list = field(default_factory=list)
    alphas: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.originals) == len(self.transformed) == len(self.alphas)):
            raise ShapeError("pair batch lists must be index-aligned")

    def __len__(self):
        return len(self.originals)


def build_pair_batch(images, seed, mirror=False, out_size=None):
    """Generate a PairBatch with one RNG stream per pair, derived from
    (seed, index) so pairs are reproducible independently of batch order."""
    batch = PairBatch()
    for i, img in enumerate(images):
        rng = np.random.default_rng([seed, i])
        view_a, view_b, alpha = make_pair(img, rng, mirror=mirror, out_size=out_size)
        batch.originals.append(view_a)
        batch.transformed.append(view_b)
        batch.alphas.append(alpha)
    return batch
