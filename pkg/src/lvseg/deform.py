"""Stage 3: deformable refinement of the inferred shape.

Two refiners are provided:

* a geometric (level-set) model minimising
  ``alpha1 * E_len + alpha2 * E_reg + alpha3 * E_shape`` by gradient descent,
  with ``phi`` negative inside the contour and positive outside;
* a parametric snake (elasticity, rigidity and an image-edge force), solved
  with the usual semi-implicit scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .errors import Collapsed, DegenerateMask, DimensionMismatch, Diverged, InterfaceLost, InvalidSpec
from .geometry import as_contour, perimeter, point_to_polyline_distance, resample_closed, signed_area

HEAVISIDE_WIDTH = 1.5
SHAPE_BAND = 5.0
REINIT_EVERY = 25
ZERO_NUDGE = 1e-6


@dataclass(frozen=True)
class EnergyWeights:
    alpha1: float = 0.2
    alpha2: float = 1.0
    alpha3: float = 0.5

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise InvalidSpec("energy weights must be nonnegative")
        if self.alpha1 == self.alpha2 == self.alpha3 == 0:
            raise InvalidSpec("at least one energy weight must be positive")


@dataclass(frozen=True)
class EnergyBreakdown:
    length: float
    region: float
    shape: float
    total: float


# ---------------------------------------------------------------------------
# Signed distance and contours
# ---------------------------------------------------------------------------

def boundary_pixels(mask):
    """Foreground pixels with at least one 4-neighbour in the background (or off-frame)."""
    m = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=0)
    return m & ~eroded


def signed_distance(mask):
    """Level-set function of a binary region.

    Zero on boundary pixels, minus the Euclidean distance to the nearest
    boundary pixel inside the region, plus that distance outside.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any() or m.all():
        raise DegenerateMask("mask needs both interior and exterior pixels")
    edge = boundary_pixels(m)
    dist = ndimage.distance_transform_edt(~edge)
    return np.where(m, -dist, dist)


def _closed_zero_sets(phi):
    # grid points with phi == 0 count as inside (as in region_means), so move
    # them just below zero to keep them strictly within the extracted curve
    phi = np.where(phi == 0.0, -ZERO_NUDGE, phi)
    # pad with a positive rim so every zero crossing closes inside the frame
    rim = float(np.max(np.abs(phi))) + 1.0
    padded = np.pad(phi, 1, constant_values=rim)
    out = []
    for c in measure.find_contours(padded, 0.0):
        if len(c) < 4:
            continue
        pts = np.column_stack([c[:-1, 1] - 1.0, c[:-1, 0] - 1.0])
        out.append(pts)
    return out


def extract_contour(phi, with_count=False):
    """Largest closed zero crossing of ``phi`` as an ``(N, 2)`` array of ``(x, y)``.

    Crossings are linearly interpolated along grid edges (marching squares).
    With ``with_count`` returns ``(contour, number_of_other_components)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    comps = _closed_zero_sets(phi)
    if not comps:
        raise InterfaceLost("phi has no zero crossing")
    areas = [abs(signed_area(c)) for c in comps]
    best = int(np.argmax(areas))
    return (comps[best], len(comps) - 1) if with_count else comps[best]


def reinitialize(phi):
    """Exact distance to the sub-pixel zero level set, keeping the sign of ``phi``."""
    comps = _closed_zero_sets(phi)
    if not comps:
        raise InterfaceLost("phi has no zero crossing")
    h, w = phi.shape
    yy, xx = np.mgrid[0:h, 0:w]
    grid = np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)
    dist = np.min([point_to_polyline_distance(grid, c) for c in comps], axis=0).reshape(h, w)
    return np.where(phi <= 0, -dist, dist)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def heaviside(z, eps=HEAVISIDE_WIDTH):
    return 0.5 * (1.0 + (2.0 / math.pi) * np.arctan(z / eps))


def dirac(z, eps=HEAVISIDE_WIDTH):
    return (eps / math.pi) / (eps * eps + z * z)


def region_means(phi, image):
    inside = phi <= 0
    c_in = float(image[inside].mean()) if inside.any() else 0.0
    c_out = float(image[~inside].mean()) if (~inside).any() else 0.0
    return c_in, c_out


def energy(phi, image, prior, w: EnergyWeights, eps=HEAVISIDE_WIDTH, band=SHAPE_BAND):
    """Length, region and shape-prior energies of ``phi``.

    * length: ``sum delta_eps(phi) |grad phi|``, the smoothed interface length;
    * region: two-phase fit ``sum_in (I - c_in)^2 + sum_out (I - c_out)^2``
      with the inside taken as ``phi <= 0`` and ``c`` the region means;
    * shape: ``sum (phi - prior)^2`` over pixels with ``|prior| <= band``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if phi.shape != image.shape or phi.shape != prior.shape:
        raise DimensionMismatch(f"phi {phi.shape}, image {image.shape}, prior {prior.shape}")
    gy, gx = np.gradient(phi)
    e_len = float(np.sum(dirac(phi, eps) * np.hypot(gx, gy)))
    inside = phi <= 0
    c_in, c_out = region_means(phi, image)
    e_reg = float(np.sum((image[inside] - c_in) ** 2) + np.sum((image[~inside] - c_out) ** 2))
    near = np.abs(prior) <= band
    e_shape = float(np.sum((phi[near] - prior[near]) ** 2))
    total = w.alpha1 * e_len + w.alpha2 * e_reg + w.alpha3 * e_shape
    return EnergyBreakdown(e_len, e_reg, e_shape, total)


def curvature(phi):
    """Mean curvature ``div(grad phi / |grad phi|)`` by central differences."""
    gy, gx = np.gradient(phi)
    gyy, gyx = np.gradient(gy)
    gxy, gxx = np.gradient(gx)
    norm2 = gx * gx + gy * gy
    num = gxx * gy * gy - 2.0 * gx * gy * gxy + gyy * gx * gx
    return num / np.maximum(norm2, 1e-12) ** 1.5


def descent_direction(phi, image, prior, w: EnergyWeights, eps=HEAVISIDE_WIDTH, band=SHAPE_BAND):
    """Right-hand side of ``d phi / dt`` for one explicit descent step."""
    rate = np.zeros_like(phi)
    if w.alpha1:
        gy, gx = np.gradient(phi)
        # curvature motion of every level set: shrinks a circle as dr/dt = -1/r
        rate += w.alpha1 * np.hypot(gx, gy) * curvature(phi)
    if w.alpha2:
        c_in, c_out = region_means(phi, image)
        rate += w.alpha2 * dirac(phi, eps) * ((image - c_in) ** 2 - (image - c_out) ** 2)
    if w.alpha3:
        near = np.abs(prior) <= band
        rate -= w.alpha3 * 2.0 * (phi - prior) * near
    return rate


@dataclass
class EvolveResult:
    phi: np.ndarray
    energies: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    steps: int = 0
    dt: float = 0.0
    rejected: int = 0


def evolve(phi0, image, prior, w: EnergyWeights = EnergyWeights(), dt=0.1, max_steps=500,
           tol=1e-4, reinit_every=REINIT_EVERY, window=10, callback=None) -> EvolveResult:
    """Minimise the energy by explicit gradient descent from ``phi0``.

    Every ``reinit_every`` steps the field is checkpointed: it is
    reinitialised to a signed distance (kept only if that does not raise the
    energy) and the checkpoint is accepted only if the energy did not rise
    since the previous one; otherwise the field reverts and ``dt`` halves.
    Iteration stops once the energy changes by less than ``tol`` over
    ``window`` steps, or after ``max_steps``.
    """
    phi = np.array(phi0, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if not (phi < 0).any() or not (phi > 0).any():
        raise InterfaceLost("initial phi has no interface")
    e = energy(phi, image, prior, w).total
    if not math.isfinite(e):
        raise Diverged("initial energy is not finite")
    res = EvolveResult(phi=phi.copy(), energies=[e], checkpoints=[e], dt=dt)
    best_phi, best_e = phi.copy(), e
    step = 0
    while step < max_steps:
        step += 1
        phi = phi + dt * descent_direction(phi, image, prior, w)
        if not (phi < 0).any() or not (phi > 0).any():
            raise InterfaceLost(f"interface vanished at step {step}")
        e = energy(phi, image, prior, w).total
        if not math.isfinite(e):
            raise Diverged(f"energy became non-finite at step {step}")
        res.energies.append(e)
        at_checkpoint = step % reinit_every == 0 or step == max_steps
        if at_checkpoint:
            try:
                candidate = reinitialize(phi)
                e_re = energy(candidate, image, prior, w).total
                if e_re <= e:
                    phi, e = candidate, e_re
            except InterfaceLost:
                pass
            if e <= best_e:
                best_phi, best_e = phi.copy(), e
                res.checkpoints.append(e)
            else:
                phi = best_phi.copy()
                dt *= 0.5
                res.rejected += 1
                if dt < 1e-6:
                    break
        if callback is not None:
            callback(step, phi, e)
        if len(res.energies) > window and abs(res.energies[-1] - res.energies[-1 - window]) < tol:
            break
    if e <= best_e:
        best_phi, best_e = phi, e
        if res.checkpoints[-1] != e:
            res.checkpoints.append(e)
    res.phi, res.steps, res.dt = best_phi, step, dt
    return res


# ---------------------------------------------------------------------------
# Snakes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SnakeConfig:
    elasticity: float = 0.05
    rigidity: float = 0.01
    step: float = 1.0
    image_weight: float = 2.0
    iterations: int = 200
    sigma: float = 2.0

    def __post_init__(self):
        if self.elasticity < 0 or self.rigidity < 0 or self.image_weight < 0:
            raise InvalidSpec("snake weights must be nonnegative")
        if self.step <= 0:
            raise InvalidSpec("snake step must be positive")


def edge_force_field(image, sigma=2.0):
    """Force ``-grad E_ext`` with ``E_ext = -|grad(G_sigma * I)|^2`` normalised to max 1."""
    smooth = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma)
    gy, gx = np.gradient(smooth)
    mag2 = gx * gx + gy * gy
    peak = mag2.max()
    if peak > 0:
        mag2 = mag2 / peak
    fy, fx = np.gradient(mag2)
    return fx, fy


def internal_matrix(n, elasticity, rigidity):
    a, b = elasticity, rigidity
    row = np.zeros(n)
    row[0] = 2 * a + 6 * b
    row[1] = row[-1] = -a - 4 * b
    row[2] = row[-2] = b
    if n == 4:
        row[2] = 2 * b
    return np.array([np.roll(row, i) for i in range(n)])


def snake_evolve(init, image, cfg: SnakeConfig = SnakeConfig(), callback=None):
    """Evolve a closed snake ``(N, 2)`` of ``(x, y)`` points on ``image``.

    Each iteration solves ``(I + step * A) x_new = x + step * image_weight * F(x)``
    and resamples the curve to uniform arc length with the same point count.
    """
    pts = as_contour(init, min_points=8)
    n = pts.shape[0]
    pts = resample_closed(pts, n)
    if cfg.iterations == 0:
        return pts
    image = np.asarray(image, dtype=np.float64)
    fx, fy = edge_force_field(image, cfg.sigma)
    inv = np.linalg.inv(np.eye(n) + cfg.step * internal_matrix(n, cfg.elasticity, cfg.rigidity))
    h, w = image.shape
    for it in range(cfg.iterations):
        coords = [pts[:, 1], pts[:, 0]]
        force = np.column_stack([ndimage.map_coordinates(fx, coords, order=1, mode="nearest"),
                                 ndimage.map_coordinates(fy, coords, order=1, mode="nearest")])
        pts = inv @ (pts + cfg.step * cfg.image_weight * force)
        pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
        pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
        if perimeter(pts) < 4.0:
            raise Collapsed(f"snake collapsed at iteration {it}")
        pts = resample_closed(pts, n)
        if callback is not None:
            callback(it, pts)
    return pts
