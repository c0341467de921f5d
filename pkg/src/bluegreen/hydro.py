"""2D shallow-water runoff solver on the raster grid.

First-order Godunov finite volume with HLL interface fluxes and hydrostatic
(surface-gradient) reconstruction, so a lake at rest over arbitrary
bathymetry stays at rest and wetting fronts keep depths non-negative.
Buildings and nodata cells are holes bounded by no-flow walls, realised as
mirror ghost states; the raster perimeter is transmissive by default with a
per-edge wall override. Rain and infiltration are per-cell source terms and
bed friction is a semi-implicit Manning drag, applied after the flux update
inside the same step.

The step kernel is compiled with numba (set NUMBA_DISABLE_JIT=1 to debug in
pure Python). It is strictly serial and order-fixed, so a scenario run is
bit-reproducible no matter how many runs execute concurrently around it.

Every run keeps a volume ledger (rain in = infiltrated + boundary outflow +
still stored, to roundoff); a closed basin must conserve to ~1e-6 relative
or the run is reported as non-conservative.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ConfigurationError, ConservationError, GeometryError, SolverDivergenceError
from .geodata import LandClass, LandUseMap, TerrainGrid, cells_in_polygon
from .storm import Hyetograph, StormScenario

G = 9.81          # m/s^2
DRY_EPS = 1e-6    # m, below this a cell carries no momentum
SKIP_EPS = 1e-12  # m, faces with both sides this dry contribute nothing

# face type codes used by the kernel
_F_INTERIOR = 0
_F_WALL_LEFT = 1   # active cell on the low-index side, wall beyond
_F_WALL_RIGHT = 2  # active cell on the high-index side, wall beyond
_F_DEAD = 3
_F_OPEN_LEFT = 4   # active cell on the low-index side, domain edge beyond is open
_F_OPEN_RIGHT = 5

EDGE_NAMES = ("north", "south", "east", "west")


@dataclass(frozen=True)
class SurfaceProperties:
    """Static per-cell solver inputs derived from terrain + land use.

    infiltration_capacity_m is the cumulative depth a cell can swallow over
    the whole run (np.inf for unlimited). Face type arrays encode the wall /
    open-boundary topology once so the kernel never re-derives it.
    """

    elevation: np.ndarray               # (R, C) float64, NaN on inactive
    active: np.ndarray                  # (R, C) bool
    manning_n: np.ndarray               # (R, C) float64
    infiltration_rate_ms: np.ndarray    # (R, C) float64
    infiltration_capacity_m: np.ndarray  # (R, C) float64
    face_x: np.ndarray                  # (R, C+1) int8
    face_y: np.ndarray                  # (R+1, C) int8
    cell_size: float
    open_edges: frozenset[str] = frozenset(EDGE_NAMES)

    def __post_init__(self):
        for a in (self.elevation, self.active, self.manning_n,
                  self.infiltration_rate_ms, self.infiltration_capacity_m,
                  self.face_x, self.face_y):
            a.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.active.shape


def build_faces(active: np.ndarray,
                open_edges: frozenset[str]) -> tuple[np.ndarray, np.ndarray]:
    """Classify every face of the raster: interior, wall, open, or dead."""
    n_rows, n_cols = active.shape
    open_w = "west" in open_edges
    open_e = "east" in open_edges
    open_s = "south" in open_edges
    open_n = "north" in open_edges

    face_x = np.full((n_rows, n_cols + 1), _F_DEAD, dtype=np.int8)
    left = np.zeros((n_rows, n_cols + 1), dtype=bool)
    right = np.zeros((n_rows, n_cols + 1), dtype=bool)
    left[:, 1:] = active
    right[:, :-1] = active
    face_x[left & right] = _F_INTERIOR
    face_x[left & ~right] = _F_WALL_LEFT
    face_x[~left & right] = _F_WALL_RIGHT
    if open_e:
        col = face_x[:, n_cols]
        col[col == _F_WALL_LEFT] = _F_OPEN_LEFT
    if open_w:
        col = face_x[:, 0]
        col[col == _F_WALL_RIGHT] = _F_OPEN_RIGHT

    face_y = np.full((n_rows + 1, n_cols), _F_DEAD, dtype=np.int8)
    low = np.zeros((n_rows + 1, n_cols), dtype=bool)
    high = np.zeros((n_rows + 1, n_cols), dtype=bool)
    low[1:, :] = active        # cell on the south side of the face
    high[:-1, :] = active      # cell on the north side
    face_y[low & high] = _F_INTERIOR
    face_y[low & ~high] = _F_WALL_LEFT
    face_y[~low & high] = _F_WALL_RIGHT
    if open_n:
        row = face_y[n_rows, :]
        row[row == _F_WALL_LEFT] = _F_OPEN_LEFT
    if open_s:
        row = face_y[0, :]
        row[row == _F_WALL_RIGHT] = _F_OPEN_RIGHT

    return face_x, face_y


def make_surface(grid: TerrainGrid,
                 landuse: LandUseMap | None = None,
                 manning_by_class: dict[int, float] | None = None,
                 infiltration_by_class: dict[int, tuple[float, float]] | None = None,
                 open_edges: tuple[str, ...] | frozenset[str] = EDGE_NAMES) -> SurfaceProperties:
    """Assemble SurfaceProperties from terrain + land use.

    manning_by_class maps LandClass to Manning n; infiltration_by_class maps
    LandClass to (rate mm/h, capacity mm) with capacity <= 0 meaning
    unlimited. Defaults: green surfaces infiltrate, sealed ones do not.
    """
    open_set = frozenset(open_edges)
    bad = open_set - set(EDGE_NAMES)
    if bad:
        raise ConfigurationError(f"unknown boundary edges {sorted(bad)}; "
                                 f"expected subset of {EDGE_NAMES}")

    manning_defaults = {LandClass.GREEN: 0.035, LandClass.PAVED: 0.02,
                        LandClass.BUILDING: 0.02, LandClass.POND: 0.03}
    infil_defaults = {LandClass.GREEN: (12.5, 0.0)}
    if manning_by_class:
        manning_defaults.update(manning_by_class)
    if infiltration_by_class:
        infil_defaults.update(infiltration_by_class)

    shape = grid.elevation.shape
    if landuse is None:
        classes = np.full(shape, LandClass.PAVED, dtype=np.int8)
    else:
        if landuse.classes.shape != shape:
            raise ConfigurationError("landuse grid does not match terrain grid")
        classes = landuse.classes

    manning = np.full(shape, 0.02, dtype=np.float64)
    rate = np.zeros(shape, dtype=np.float64)
    cap = np.zeros(shape, dtype=np.float64)
    for lc, n in manning_defaults.items():
        manning[classes == int(lc)] = n
    for lc, (r_mmh, cap_mm) in infil_defaults.items():
        sel = classes == int(lc)
        rate[sel] = r_mmh * 0.001 / 3600.0
        cap[sel] = np.inf if cap_mm <= 0 else cap_mm * 0.001

    face_x, face_y = build_faces(grid.active_mask, open_set)
    z = grid.elevation.copy()
    z[~grid.active_mask] = np.nan
    return SurfaceProperties(elevation=z, active=grid.active_mask.copy(),
                             manning_n=manning, infiltration_rate_ms=rate,
                             infiltration_capacity_m=cap,
                             face_x=face_x, face_y=face_y,
                             cell_size=grid.cell_size, open_edges=open_set)


@dataclass
class FlowState:
    """Conserved variables: depth h (m) and unit discharges qx, qy (m^2/s)."""

    h: np.ndarray
    qx: np.ndarray
    qy: np.ndarray
    t_s: float = 0.0
    infiltrated_depth_m: np.ndarray | None = None  # cumulative per cell
    max_speed: float | None = None  # |u|+c of this state, filled by step()

    @classmethod
    def dry(cls, shape: tuple[int, int]) -> "FlowState":
        return cls(h=np.zeros(shape), qx=np.zeros(shape), qy=np.zeros(shape),
                   t_s=0.0, infiltrated_depth_m=np.zeros(shape))

    def copy(self) -> "FlowState":
        return FlowState(h=self.h.copy(), qx=self.qx.copy(), qy=self.qy.copy(),
                         t_s=self.t_s,
                         infiltrated_depth_m=None if self.infiltrated_depth_m is None
                         else self.infiltrated_depth_m.copy())


@dataclass
class VolumeLedger:
    """Water balance of one run, all in m^3.

    rain_in = infiltrated + boundary_outflow + stored up to |residual|;
    clipped counts water created by flooring slightly negative depths and is
    part of residual, never hidden.
    """

    rain_in_m3: float = 0.0
    infiltrated_m3: float = 0.0
    boundary_outflow_m3: float = 0.0
    stored_m3: float = 0.0
    clipped_m3: float = 0.0
    initial_m3: float = 0.0

    def residual_m3(self) -> float:
        return (self.rain_in_m3 + self.initial_m3
                - self.infiltrated_m3 - self.boundary_outflow_m3 - self.stored_m3)

    def relative_residual(self) -> float:
        denom = max(self.rain_in_m3 + self.initial_m3, 1e-12)
        return abs(self.residual_m3()) / denom

    def check_closed(self, rel_tol: float = 1e-6) -> None:
        if self.relative_residual() > rel_tol:
            raise ConservationError(
                f"volume ledger open: residual {self.residual_m3():.6e} m^3 "
                f"({self.relative_residual():.3e} relative, tol {rel_tol:.1e})")

    def as_dict(self) -> dict:
        return {"rain_in_m3": self.rain_in_m3,
                "initial_m3": self.initial_m3,
                "infiltrated_m3": self.infiltrated_m3,
                "boundary_outflow_m3": self.boundary_outflow_m3,
                "stored_m3": self.stored_m3,
                "clipped_m3": self.clipped_m3,
                "residual_m3": self.residual_m3(),
                "relative_residual": self.relative_residual()}


@dataclass(frozen=True)
class MaxDepthRaster:
    """Envelope of water depth over a run (m), 0 where never wet."""

    depth_m: np.ndarray
    cell_size: float
    origin_x: float
    origin_y: float

    def __post_init__(self):
        self.depth_m.setflags(write=False)


@dataclass(frozen=True)
class RunConfig:
    cfl: float = 0.5
    dt_max_s: float = 10.0
    t_end_s: float = 3600.0
    dry_eps_m: float = DRY_EPS
    g: float = G
    divergence_check: bool = True

    def __post_init__(self):
        if not 0 < self.cfl <= 1.0:
            raise ConfigurationError(f"cfl must be in (0, 1], got {self.cfl}")
        if self.dt_max_s <= 0 or self.t_end_s <= 0:
            raise ConfigurationError("dt_max_s and t_end_s must be positive")


@dataclass
class ScenarioResult:
    scenario: StormScenario | None
    max_depth: MaxDepthRaster
    ledger: VolumeLedger
    final_state: FlowState
    n_steps: int
    wall_time_s: float


# ---------------------------------------------------------------------------
# Kernels


@njit(cache=True, nogil=True)
def _hll_flux(hl, ul, vl, hr, ur, vr, g):
    """HLL flux of the x-split SW system for already-reconstructed states.

    Returns (mass, normal momentum, transverse momentum) fluxes.
    """
    if hl <= 0.0 and hr <= 0.0:
        return 0.0, 0.0, 0.0
    cl = math.sqrt(g * hl) if hl > 0.0 else 0.0
    cr = math.sqrt(g * hr) if hr > 0.0 else 0.0
    if hl <= 0.0:      # dry left, wet right: rarefaction into the dry side
        sl = ur - 2.0 * cr
        sr = ur + cr
    elif hr <= 0.0:
        sl = ul - cl
        sr = ul + 2.0 * cl
    else:
        sl = min(ul - cl, ur - cr)
        sr = max(ul + cl, ur + cr)

    fl_m = hl * ul
    fl_q = hl * ul * ul + 0.5 * g * hl * hl
    fr_m = hr * ur
    fr_q = hr * ur * ur + 0.5 * g * hr * hr

    if sl >= 0.0:
        fm, fq = fl_m, fl_q
    elif sr <= 0.0:
        fm, fq = fr_m, fr_q
    else:
        inv = 1.0 / (sr - sl)
        fm = (sr * fl_m - sl * fr_m + sl * sr * (hr - hl)) * inv
        fq = (sr * fl_q - sl * fr_q + sl * sr * (hr * ur - hl * ul)) * inv

    ft = fm * vl if fm >= 0.0 else fm * vr
    return fm, fq, ft


@njit(cache=True, nogil=True)
def _step_kernel(h, qx, qy, z, face_x, face_y, active,
                 rain_w, rain_rate_ms, inf_rate, inf_cum, inf_cap, manning,
                 maxh, fdh, fdqx, fdqy,
                 dt, dx, g, dry_eps):
    """One forward-Euler FV step, in place. Returns
    (outflow_flux_sum, rain_depth_sum, infiltrated_depth_sum, clipped_depth_sum,
     max_wave_speed, bad_row, bad_col)."""
    n_rows, n_cols = h.shape
    for r in range(n_rows):
        for c in range(n_cols):
            fdh[r, c] = 0.0
            fdqx[r, c] = 0.0
            fdqy[r, c] = 0.0
    outflow = 0.0

    # x sweep: face (r, i) sits between cells (r, i-1) and (r, i)
    for r in range(n_rows):
        for i in range(n_cols + 1):
            ft = face_x[r, i]
            if ft == 3:
                continue
            if ft == 4 or ft == 5:
                if ft == 4:
                    rr, cc = r, i - 1
                else:
                    rr, cc = r, i
                hc = h[rr, cc]
                if hc < SKIP_EPS:
                    continue
                if hc >= dry_eps:
                    uc = qx[rr, cc] / hc
                    vc = qy[rr, cc] / hc
                else:
                    uc = 0.0
                    vc = 0.0
                fm = hc * uc
                fq = hc * uc * uc + 0.5 * g * hc * hc
                ftr = fm * vc
                if ft == 4:
                    fdh[rr, cc] += fm
                    fdqx[rr, cc] += fq
                    fdqy[rr, cc] += ftr
                    outflow += fm
                else:
                    fdh[rr, cc] -= fm
                    fdqx[rr, cc] -= fq
                    fdqy[rr, cc] -= ftr
                    outflow -= fm
                continue

            if ft == 0:
                hl = h[r, i - 1]
                hr_ = h[r, i]
                if hl < SKIP_EPS and hr_ < SKIP_EPS:
                    continue
                zl = z[r, i - 1]
                zr = z[r, i]
                if hl >= dry_eps:
                    ul = qx[r, i - 1] / hl
                    vl = qy[r, i - 1] / hl
                else:
                    ul = 0.0
                    vl = 0.0
                if hr_ >= dry_eps:
                    ur = qx[r, i] / hr_
                    vr = qy[r, i] / hr_
                else:
                    ur = 0.0
                    vr = 0.0
            elif ft == 1:
                hl = h[r, i - 1]
                if hl < SKIP_EPS:
                    continue
                zl = z[r, i - 1]
                if hl >= dry_eps:
                    ul = qx[r, i - 1] / hl
                    vl = qy[r, i - 1] / hl
                else:
                    ul = 0.0
                    vl = 0.0
                hr_, ur, vr, zr = hl, -ul, vl, zl
            else:  # ft == 2
                hr_ = h[r, i]
                if hr_ < SKIP_EPS:
                    continue
                zr = z[r, i]
                if hr_ >= dry_eps:
                    ur = qx[r, i] / hr_
                    vr = qy[r, i] / hr_
                else:
                    ur = 0.0
                    vr = 0.0
                hl, ul, vl, zl = hr_, -ur, vr, zr

            zf = zl if zl > zr else zr
            hls = hl + zl - zf
            if hls < 0.0:
                hls = 0.0
            hrs = hr_ + zr - zf
            if hrs < 0.0:
                hrs = 0.0

            fm, fq, ftr = _hll_flux(hls, ul, vl, hrs, ur, vr, g)

            if ft == 0 or ft == 1:
                fdh[r, i - 1] += fm
                fdqx[r, i - 1] += fq + 0.5 * g * (hl * hl - hls * hls)
                fdqy[r, i - 1] += ftr
            if ft == 0 or ft == 2:
                fdh[r, i] -= fm
                fdqx[r, i] -= fq + 0.5 * g * (hr_ * hr_ - hrs * hrs)
                fdqy[r, i] -= ftr

    # y sweep: face (j, c) sits between cells (j-1, c) (south) and (j, c)
    for j in range(n_rows + 1):
        for c in range(n_cols):
            ft = face_y[j, c]
            if ft == 3:
                continue
            if ft == 4 or ft == 5:
                if ft == 4:
                    rr = j - 1
                else:
                    rr = j
                hc = h[rr, c]
                if hc < SKIP_EPS:
                    continue
                if hc >= dry_eps:
                    uc = qy[rr, c] / hc   # normal velocity is v
                    vc = qx[rr, c] / hc
                else:
                    uc = 0.0
                    vc = 0.0
                fm = hc * uc
                fq = hc * uc * uc + 0.5 * g * hc * hc
                ftr = fm * vc
                if ft == 4:
                    fdh[rr, c] += fm
                    fdqy[rr, c] += fq
                    fdqx[rr, c] += ftr
                    outflow += fm
                else:
                    fdh[rr, c] -= fm
                    fdqy[rr, c] -= fq
                    fdqx[rr, c] -= ftr
                    outflow -= fm
                continue

            if ft == 0:
                hl = h[j - 1, c]
                hr_ = h[j, c]
                if hl < SKIP_EPS and hr_ < SKIP_EPS:
                    continue
                zl = z[j - 1, c]
                zr = z[j, c]
                if hl >= dry_eps:
                    ul = qy[j - 1, c] / hl
                    vl = qx[j - 1, c] / hl
                else:
                    ul = 0.0
                    vl = 0.0
                if hr_ >= dry_eps:
                    ur = qy[j, c] / hr_
                    vr = qx[j, c] / hr_
                else:
                    ur = 0.0
                    vr = 0.0
            elif ft == 1:
                hl = h[j - 1, c]
                if hl < SKIP_EPS:
                    continue
                zl = z[j - 1, c]
                if hl >= dry_eps:
                    ul = qy[j - 1, c] / hl
                    vl = qx[j - 1, c] / hl
                else:
                    ul = 0.0
                    vl = 0.0
                hr_, ur, vr, zr = hl, -ul, vl, zl
            else:
                hr_ = h[j, c]
                if hr_ < SKIP_EPS:
                    continue
                zr = z[j, c]
                if hr_ >= dry_eps:
                    ur = qy[j, c] / hr_
                    vr = qx[j, c] / hr_
                else:
                    ur = 0.0
                    vr = 0.0
                hl, ul, vl, zl = hr_, -ur, vr, zr

            zf = zl if zl > zr else zr
            hls = hl + zl - zf
            if hls < 0.0:
                hls = 0.0
            hrs = hr_ + zr - zf
            if hrs < 0.0:
                hrs = 0.0

            fm, fq, ftr = _hll_flux(hls, ul, vl, hrs, ur, vr, g)

            if ft == 0 or ft == 1:
                fdh[j - 1, c] += fm
                fdqy[j - 1, c] += fq + 0.5 * g * (hl * hl - hls * hls)
                fdqx[j - 1, c] += ftr
            if ft == 0 or ft == 2:
                fdh[j, c] -= fm
                fdqy[j, c] -= fq + 0.5 * g * (hr_ * hr_ - hrs * hrs)
                fdqx[j, c] -= ftr

    # cell update: fluxes, rain, infiltration, friction
    inv_dx = dt / dx
    rain_sum = 0.0
    infil_sum = 0.0
    clip_sum = 0.0
    max_speed = 0.0
    bad_r = -1
    bad_c = -1
    for r in range(n_rows):
        for c in range(n_cols):
            if not active[r, c]:
                continue
            hn = h[r, c] - inv_dx * fdh[r, c]
            ra = rain_w[r, c] * rain_rate_ms * dt
            if ra > 0.0:
                hn += ra
                rain_sum += ra
            if hn < 0.0:
                clip_sum -= hn
                hn = 0.0
            fr = inf_rate[r, c]
            if fr > 0.0 and hn > 0.0:
                rem = inf_cap[r, c] - inf_cum[r, c]
                di = fr * dt
                if di > hn:
                    di = hn
                if di > rem:
                    di = rem
                if di > 0.0:
                    hn -= di
                    inf_cum[r, c] += di
                    infil_sum += di

            qxn = qx[r, c] - inv_dx * fdqx[r, c]
            qyn = qy[r, c] - inv_dx * fdqy[r, c]
            if hn < dry_eps:
                qxn = 0.0
                qyn = 0.0
            else:
                un = qxn / hn
                vn = qyn / hn
                sp = math.sqrt(un * un + vn * vn)
                if sp > 0.0:
                    n_ = manning[r, c]
                    denom = 1.0 + dt * g * n_ * n_ * sp / (hn ** (4.0 / 3.0))
                    qxn /= denom
                    qyn /= denom
                    un = qxn / hn
                    vn = qyn / hn
                a = abs(un)
                b = abs(vn)
                s = (a if a > b else b) + math.sqrt(g * hn)
                if s > max_speed:
                    max_speed = s
            if not (math.isfinite(hn) and math.isfinite(qxn) and math.isfinite(qyn)):
                if bad_r < 0:
                    bad_r = r
                    bad_c = c
            h[r, c] = hn
            qx[r, c] = qxn
            qy[r, c] = qyn
            if hn > maxh[r, c]:
                maxh[r, c] = hn

    return outflow, rain_sum, infil_sum, clip_sum, max_speed, bad_r, bad_c


@njit(cache=True, nogil=True)
def _max_speed_kernel(h, qx, qy, active, g, dry_eps):
    n_rows, n_cols = h.shape
    ms = 0.0
    for r in range(n_rows):
        for c in range(n_cols):
            if not active[r, c]:
                continue
            hc = h[r, c]
            if hc < dry_eps:
                continue
            u = abs(qx[r, c]) / hc
            v = abs(qy[r, c]) / hc
            s = (u if u > v else v) + math.sqrt(g * hc)
            if s > ms:
                ms = s
    return ms


# ---------------------------------------------------------------------------
# Public stepping API


def cfl_dt(state: FlowState, props: SurfaceProperties, config: RunConfig) -> float:
    """Largest stable step: cfl * cell / max(|u| + c, |v| + c); dt_max when dry."""
    ms = _max_speed_kernel(state.h, state.qx, state.qy, props.active,
                           config.g, config.dry_eps_m)
    if ms <= 0.0:
        return config.dt_max_s
    return min(config.cfl * props.cell_size / ms, config.dt_max_s)


def step(state: FlowState, props: SurfaceProperties, config: RunConfig, dt: float,
         rain_weights: np.ndarray | None = None, rain_rate_ms: float = 0.0,
         max_depth: np.ndarray | None = None,
         ledger: VolumeLedger | None = None,
         _scratch: tuple[np.ndarray, ...] | None = None) -> FlowState:
    """Advance the state by dt in place (the state object is mutated and returned)."""
    shape = props.shape
    if rain_weights is None:
        rain_weights = _ZERO_CACHE.get(shape)
        if rain_weights is None:
            rain_weights = np.zeros(shape)
            _ZERO_CACHE[shape] = rain_weights
    if max_depth is None:
        max_depth = np.full(shape, -np.inf)
    if state.infiltrated_depth_m is None:
        state.infiltrated_depth_m = np.zeros(shape)
    if _scratch is None:
        _scratch = (np.empty(shape), np.empty(shape), np.empty(shape))

    out = _step_kernel(state.h, state.qx, state.qy, props.elevation,
                       props.face_x, props.face_y, props.active,
                       rain_weights, rain_rate_ms,
                       props.infiltration_rate_ms, state.infiltrated_depth_m,
                       props.infiltration_capacity_m, props.manning_n,
                       max_depth, _scratch[0], _scratch[1], _scratch[2],
                       dt, props.cell_size, config.g, config.dry_eps_m)
    outflow, rain_sum, infil_sum, clip_sum, max_speed, bad_r, bad_c = out
    state.t_s += dt
    state.max_speed = max_speed

    if config.divergence_check and bad_r >= 0:
        raise SolverDivergenceError(
            f"non-finite state at cell ({bad_r}, {bad_c}), t = {state.t_s:.3f} s",
            cell=(int(bad_r), int(bad_c)), time_s=state.t_s)

    if ledger is not None:
        area = props.cell_size * props.cell_size
        ledger.rain_in_m3 += rain_sum * area
        ledger.infiltrated_m3 += infil_sum * area
        ledger.boundary_outflow_m3 += outflow * props.cell_size * dt
        ledger.clipped_m3 += clip_sum * area
    return state


_ZERO_CACHE: dict[tuple[int, int], np.ndarray] = {}


def run_scenario(props: SurfaceProperties,
                 hyetograph: Hyetograph | None,
                 config: RunConfig,
                 rain_weights: np.ndarray | None = None,
                 initial: FlowState | None = None,
                 scenario: StormScenario | None = None) -> ScenarioResult:
    """Run one storm to t_end and return the depth envelope plus the ledger.

    The time step is the CFL limit capped by dt_max and snapped to hyetograph
    edges, so each step sees a single constant intensity and rain totals are
    exact. Deterministic: same inputs give bit-identical outputs.
    """
    t0 = time.perf_counter()
    shape = props.shape
    state = initial.copy() if initial is not None else FlowState.dry(shape)
    if state.h.shape != shape:
        raise ConfigurationError("initial state shape does not match surface grid")
    if state.infiltrated_depth_m is None:
        state.infiltrated_depth_m = np.zeros(shape)

    if rain_weights is None:
        rain_weights = np.where(props.active, 1.0, 0.0)
    if hyetograph is None:
        hyetograph = Hyetograph(t_edges_s=(0.0, config.t_end_s), intensity_mm_h=(0.0,))

    area = props.cell_size * props.cell_size
    ledger = VolumeLedger(initial_m3=float(np.sum(state.h[props.active])) * area)
    max_depth = np.maximum(state.h, 0.0)
    scratch = (np.empty(shape), np.empty(shape), np.empty(shape))

    n_steps = 0
    t_end = config.t_end_s
    while state.t_s < t_end - 1e-9:
        # the kernel reports the wave speed of the state it just produced,
        # which is exactly what a fresh scan of the current state would see
        if state.max_speed is None:
            dt_stable = cfl_dt(state, props, config)
        elif state.max_speed <= 0.0:
            dt_stable = config.dt_max_s
        else:
            dt_stable = min(config.cfl * props.cell_size / state.max_speed,
                            config.dt_max_s)
        t_next = state.t_s + dt_stable
        edge = hyetograph.next_edge_after(state.t_s)
        if edge is not None and edge < t_next:
            t_next = edge
        if t_end < t_next:
            t_next = t_end
        dt = t_next - state.t_s
        rate = hyetograph.intensity_at(state.t_s) * 0.001 / 3600.0
        step(state, props, config, dt, rain_weights, rate,
             max_depth, ledger, scratch)
        state.t_s = t_next   # snap, avoiding drift across hyetograph edges
        n_steps += 1

    ledger.stored_m3 = float(np.sum(state.h[props.active])) * area
    max_raster = MaxDepthRaster(depth_m=max_depth, cell_size=props.cell_size,
                                origin_x=0.0, origin_y=0.0)
    return ScenarioResult(scenario=scenario, max_depth=max_raster, ledger=ledger,
                          final_state=state, n_steps=n_steps,
                          wall_time_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Interventions


@dataclass(frozen=True)
class PermeablePavement:
    """Make the paved cells of one tile infiltrate.

    area_m2 is the treated area used for costing (taken from the design, not
    re-derived from the raster). rate/capacity describe the pavement's
    drainage performance.
    """

    tile_id: int
    area_m2: float
    infiltration_rate_mmh: float = 50.0
    capacity_mm: float = 0.0        # <= 0 means unlimited

    kind = "permeable_pavement"


@dataclass(frozen=True)
class DetentionPond:
    """Excavate a storage basin: the terrain under the polygon is lowered by
    volume/area metres and the cells become pond surface."""

    polygon: tuple[tuple[float, float], ...]
    area_m2: float
    volume_m3: float

    kind = "detention_pond"

    @property
    def depth_m(self) -> float:
        if self.area_m2 <= 0:
            raise ConfigurationError("pond area must be positive")
        return self.volume_m3 / self.area_m2


Intervention = PermeablePavement | DetentionPond


def apply_interventions(grid: TerrainGrid, landuse: LandUseMap,
                        partition, interventions: list[Intervention],
                        buildings=None) -> tuple[TerrainGrid, LandUseMap]:
    """Return modified copies of terrain + land use; inputs are untouched.

    Ponds may not overlap building footprints. Pavement retiles nothing: it
    only marks the tile's paved cells as infiltrating (the caller rebuilds
    SurfaceProperties with per-intervention rates via `pavement_cells`).
    """
    elevation = grid.elevation.copy()
    classes = landuse.classes.copy()

    for iv in interventions:
        if isinstance(iv, DetentionPond):
            covered = cells_in_polygon(list(iv.polygon), grid)
            # building cells are inactive, so test the class raster before
            # narrowing to active cells or the overlap check never fires
            blocked = [i for i in sorted(covered)
                       if classes.flat[i] == int(LandClass.BUILDING)]
            if blocked:
                raise GeometryError(
                    f"pond polygon overlaps {len(blocked)} building cell(s); "
                    f"first at flat index {blocked[0]}")
            cells = frozenset(i for i in covered if grid.active_mask.flat[i])
            if not cells:
                raise GeometryError("pond polygon covers no active cells")
            for i in sorted(cells):
                elevation.flat[i] -= iv.depth_m
                classes.flat[i] = int(LandClass.POND)
        elif isinstance(iv, PermeablePavement):
            if partition is not None and not (1 <= iv.tile_id <= partition.n_tiles):
                raise ConfigurationError(f"pavement tile {iv.tile_id} out of range")
        else:
            raise ConfigurationError(f"unknown intervention {iv!r}")

    new_grid = grid.with_elevation(elevation)
    return new_grid, LandUseMap(classes=classes)


def pavement_cells(partition, landuse: LandUseMap, tile_id: int) -> np.ndarray:
    """Boolean mask of the paved cells of one tile (the cells pavement converts)."""
    return (partition.cell_to_tile == tile_id) & \
        (landuse.classes == int(LandClass.PAVED))
