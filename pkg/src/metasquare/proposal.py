"""Square proposal distributions: schedules, geometry, colors, relaxations.

The discrete proposals reproduce the classic random-search square attack:
a size schedule p^t sets the square's area fraction, the position is
uniform, the color is one of the 2^c extreme corners of the linf ball.
The relaxed variants make the square size a real number so meta-training
can push gradients through it: an odd(s) core keeps the exact color and a
one-pixel boundary is blended in proportion to the fractional overhang.
"""

import math

import numpy as np


def odd(s):
    """Largest odd integer <= s (for s >= 1)."""
    return 2 * int(math.floor((s - 1.0) / 2.0)) + 1


# ---------------------------------------------------------------------------
# size schedules

# halving points as fractions of the budget, in thousandths: 0.1%, 0.5%,
# 2%, 10%, 20%, 40%, 60%, 80%
_HALVING_PER_MILLE = (1, 5, 20, 100, 200, 400, 600, 800)

SA_P0 = 0.3
AA_P0 = 0.8
_AA_VIRTUAL_BUDGET = 10000


def halving_count(t, budget):
    """Number of halving points passed by query t (exact integer arithmetic)."""
    return sum(1 for m in _HALVING_PER_MILLE if 1000 * t >= m * budget)


def sa_schedule(t, budget, p0=SA_P0):
    """Area fraction p^t = p0 / 2^n(t), halving at fixed fractions of budget."""
    if not 0 <= t < budget:
        raise ValueError(f"t={t} outside [0, {budget})")
    return p0 / 2 ** halving_count(t, budget)


def aa_schedule(t):
    """Variant schedule: p0 = 0.8 with halving points of a virtual 10k budget."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return AA_P0 / 2 ** halving_count(t, _AA_VIRTUAL_BUDGET)


def p_to_size(p, h, w):
    """Side length of a square covering roughly a p-fraction of the image."""
    s = int(round(math.sqrt(p * h * w)))
    return max(1, min(s, min(h, w)))


def schedule_table(kind, budget, h, w, p0=None):
    """Rows (t, p^t, s_t) for CSV dumps / plotting parity."""
    rows = []
    for t in range(budget):
        if kind == "sa":
            p = sa_schedule(t, budget, SA_P0 if p0 is None else p0)
        elif kind == "aa":
            p = aa_schedule(t)
        else:
            raise ValueError(f"unknown schedule {kind!r}")
        rows.append((t, p, p_to_size(p, h, w)))
    return rows


# ---------------------------------------------------------------------------
# discrete proposal pieces

def sample_position(rng, s, h, w):
    """Uniform top-left corner such that an s x s square fits."""
    if s > min(h, w):
        raise ValueError(f"square size {s} exceeds image {h}x{w}")
    return int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))


def corner_colors(c, eps):
    """All 2^c corners of the per-channel [-eps, eps] cube.

    Binary counting order: color i has channel j at +eps iff bit j of i is
    set, so index 0 is all -eps and index 2^c - 1 is all +eps.
    """
    m = 2 ** c
    out = np.empty((m, c))
    for i in range(m):
        for j in range(c):
            out[i, j] = eps if (i >> j) & 1 else -eps
    return out


def stripe_init(rng, shape, eps):
    """Width-1 vertical stripes of extreme per-channel values."""
    c, h, w = shape
    signs = 2.0 * rng.integers(0, 2, size=(c, 1, w)) - 1.0
    return np.broadcast_to(signs * eps, shape).copy()


def make_square_delta(shape, s, pos, color):
    """Additive proposal: the color on an s x s window, zero elsewhere."""
    c, h, w = shape
    px, py = pos
    delta = np.zeros(shape)
    delta[:, px:px + s, py:py + s] = np.asarray(color)[:, None, None]
    return delta


def _ring_coords(pos, n, h, w):
    """Boundary pixels around an n x n core at pos, split edge/corner, clipped.

    Returns ((edge_rows, edge_cols), (corner_rows, corner_cols)) index arrays.
    """
    px, py = pos
    edges = []
    for col in range(py, py + n):
        if 0 <= col < w:
            if px - 1 >= 0:
                edges.append((px - 1, col))
            if px + n < h:
                edges.append((px + n, col))
    for row in range(px, px + n):
        if 0 <= row < h:
            if py - 1 >= 0:
                edges.append((row, py - 1))
            if py + n < w:
                edges.append((row, py + n))
    corners = [(row, col)
               for row in (px - 1, px + n) for col in (py - 1, py + n)
               if 0 <= row < h and 0 <= col < w]

    def as_arrays(coords):
        if not coords:
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
        arr = np.asarray(coords, dtype=np.intp)
        return arr[:, 0], arr[:, 1]

    return as_arrays(edges), as_arrays(corners)


class RelaxedSquare:
    """Geometry of one relaxed square: core window plus blended boundary.

    The core gets the color exactly, as in make_square_delta.  A boundary
    pixel moves the perturbation toward the color by a fraction k, so the
    post-update value there is k*color + (1-k)*background.  k is
    (s - odd(s))/2 on edge-adjacent pixels and its square on the four
    diagonal corners; both vanish when s is an odd integer.
    """

    def __init__(self, shape, s, pos):
        c, h, w = shape
        self.shape = shape
        self.s = float(s)
        self.n = odd(s)
        self.pos = pos
        px, py = pos
        if not (0 <= px <= h - self.n and 0 <= py <= w - self.n):
            raise ValueError(f"core window {self.n} at {pos} does not fit in {h}x{w}")
        self.k_edge = (self.s - self.n) / 2.0
        self.k_corner = self.k_edge * self.k_edge
        (self.er, self.ec), (self.cr, self.cc) = _ring_coords(pos, self.n, h, w)

    def core(self, arr):
        px, py = self.pos
        return arr[:, px:px + self.n, py:py + self.n]

    def delta(self, color, background):
        """Dense (delta, ddelta_ds) with odd(s) treated as locally constant."""
        color = np.asarray(color, dtype=np.float64)
        delta = np.zeros(self.shape)
        ddelta = np.zeros(self.shape)
        self.core(delta)[...] = color[:, None, None]
        gap_e = color[:, None] - background[:, self.er, self.ec]
        gap_c = color[:, None] - background[:, self.cr, self.cc]
        delta[:, self.er, self.ec] = self.k_edge * gap_e
        delta[:, self.cr, self.cc] = self.k_corner * gap_c
        ddelta[:, self.er, self.ec] = 0.5 * gap_e
        ddelta[:, self.cr, self.cc] = self.k_edge * gap_c
        return delta, ddelta

    def candidate(self, xi, color, eps):
        """project_linf(xi + delta) computed in place on the touched pixels."""
        color = np.asarray(color, dtype=np.float64)
        out = xi.copy()
        core = self.core(xi)
        self.core(out)[...] = np.clip(core + color[:, None, None], -eps, eps)
        bg_e = xi[:, self.er, self.ec]
        bg_c = xi[:, self.cr, self.cc]
        out[:, self.er, self.ec] = np.clip(bg_e + self.k_edge * (color[:, None] - bg_e),
                                           -eps, eps)
        out[:, self.cr, self.cc] = np.clip(bg_c + self.k_corner * (color[:, None] - bg_c),
                                           -eps, eps)
        return out

    def grad_size(self, gx, color, background):
        """d/ds of sum(gx * delta) at fixed color and background."""
        gap_e = color[:, None] - background[:, self.er, self.ec]
        gap_c = color[:, None] - background[:, self.cr, self.cc]
        total = 0.5 * float(np.sum(gx[:, self.er, self.ec] * gap_e))
        total += self.k_edge * float(np.sum(gx[:, self.cr, self.cc] * gap_c))
        return total

    def grad_color(self, gx, background):
        """d/dcolor of sum(gx * delta): weight 1 on the core, k on the ring."""
        out = self.core(gx).sum(axis=(1, 2)).astype(np.float64)
        out += self.k_edge * gx[:, self.er, self.ec].sum(axis=1)
        out += self.k_corner * gx[:, self.cr, self.cc].sum(axis=1)
        return out


def make_relaxed_square_delta(shape, s, pos, color, background):
    """Real-valued square size: odd(s) core plus a blended one-pixel boundary.

    Returns (delta, ddelta_ds); see RelaxedSquare for the construction.
    """
    return RelaxedSquare(shape, s, pos).delta(color, background)


# ---------------------------------------------------------------------------
# l2 machinery

def mound_profile(n):
    """Bilinear bump on an n x n window, normalized to unit l2 norm."""
    ramp = np.minimum(np.arange(1, n + 1), np.arange(n, 0, -1)).astype(np.float64)
    tile = np.outer(ramp, ramp)
    return tile / np.linalg.norm(tile)


def l2_init(rng, shape, eps):
    """Perturbation tiled with sign-flipped mounds, scaled to norm eps."""
    c, h, w = shape
    n = max(3, h // 5)
    xi = np.zeros(shape)
    for top in range(0, h - n + 1, n):
        for left in range(0, w - n + 1, n):
            signs = 2.0 * rng.integers(0, 2, size=(c, 1, 1)) - 1.0
            xi[:, top:top + n, left:left + n] = signs * mound_profile(n)
    norm = np.linalg.norm(xi)
    return xi * (eps / norm)


def make_relaxed_l2_update(xi, s, pos1, pos2, signs, eps):
    """Move l2 mass from window W2 into a fresh mound at window W1.

    The odd(s) core of W2 is zeroed and its norm harvested as budget; the
    fractional part frac(s) = (s - odd(s))/2 additionally harvests
    frac * |W2_boundary| while the boundary is scaled by sqrt(1 - frac^2),
    which conserves |W2_boundary|^2 exactly.  The budget is spent on a
    unit-l2 bilinear mound at W1 with per-channel signs, and the whole
    perturbation is re-projected to the eps ball.

    Returns (new_xi, info) where info carries the harvested budget and the
    boundary norms before/after for conservation checks.
    """
    from .core import project_l2

    c, h, w = xi.shape
    n = odd(s)
    frac = (s - n) / 2.0
    p2x, p2y = pos2
    out = xi.copy()
    core = out[:, p2x:p2x + n, p2y:p2y + n]
    budget = float(np.linalg.norm(core))
    core[...] = 0.0
    (er, ec), (cr, cc) = _ring_coords(pos2, n, h, w)
    rows = np.concatenate([er, cr])
    cols = np.concatenate([ec, cc])
    if rows.size:
        before = float(np.linalg.norm(out[:, rows, cols]))
        out[:, rows, cols] *= math.sqrt(1.0 - frac * frac)
        after = float(np.linalg.norm(out[:, rows, cols]))
        budget += frac * before
    else:
        before = after = 0.0
    p1x, p1y = pos1
    tile = mound_profile(n) * (budget / math.sqrt(c))
    out[:, p1x:p1x + n, p1y:p1y + n] += np.asarray(signs)[:, None, None] * tile
    out = project_l2(out, eps)
    info = {"budget": budget, "boundary_before": before, "boundary_after": after,
            "frac": frac}
    return out, info
