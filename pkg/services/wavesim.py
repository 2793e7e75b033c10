"""
Synthetic LUVT series generator.

Integrates the 2D scalar wave equation over the laser scan window with an explicit
leapfrog scheme. The probe on the top edge acts as the source directly and drives the
first interior row; slit cells are held at zero amplitude and the window edges absorb
outgoing waves (first-order Mur condition). Snapshots are rendered to 8-bit grayscale
like LUVT time-history images.
"""
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist

from services.records import FrameMeta, Series
from utils.validation import StabilityError, ValidationError, check_positive

logger = logging.getLogger(__name__)

SAFETY_FACTOR = 0.9

INTERIOR = 0
SLIT = 1
BOUNDARY = 2

# row 0 carries the absorbing condition
SOURCE_ROW = 1


class DefectSpec(BaseModel):
    """Rectangular slit: centre in mm, length along its axis, opening across it"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    center: Tuple[float, float]
    length_mm: float = Field(20.0, gt=0)
    width_mm: float = Field(1.0, gt=0)
    orientation_deg: float = 0.0

    def corners(self) -> np.ndarray:
        theta = math.radians(self.orientation_deg)
        axis = np.array([math.cos(theta), math.sin(theta)])
        normal = np.array([-math.sin(theta), math.cos(theta)])
        half_l, half_w = self.length_mm / 2, self.width_mm / 2
        c = np.asarray(self.center, dtype=np.float64)
        return np.array([
            c + sl * half_l * axis + sw * half_w * normal
            for sl in (-1, 1) for sw in (-1, 1)
        ])


class PlateSpec(BaseModel):
    """Scan window, probe, defects and discretization of one specimen run"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    scan_width_mm: float = Field(80.0, gt=0)
    scan_height_mm: float = Field(80.0, gt=0)
    grid_nx: int = Field(160, ge=16)
    grid_ny: int = Field(160, ge=16)
    wave_speed_mm_per_us: float = Field(3.0, gt=0)
    probe_pos: Tuple[float, float] = (40.0, 0.0)
    probe_width_mm: float = Field(8.0, ge=0)
    source_freq_mhz: float = Field(0.5, gt=0)
    source_cycles: int = Field(3, ge=1)
    defects: Tuple[DefectSpec, ...] = ()
    noise_sigma: float = Field(0.02, ge=0)
    image_size: int = Field(64, ge=8)
    seed: int = 0

    @model_validator(mode="after")
    def _probe_on_top_edge(self):
        x, y = self.probe_pos
        if y != 0.0 or not 0.0 <= x <= self.scan_width_mm:
            raise ValueError(
                f"probe must sit on the top edge (y=0, 0<=x<={self.scan_width_mm}), got {self.probe_pos}"
            )
        return self

    @model_validator(mode="after")
    def _defects_inside(self):
        for defect in self.defects:
            corners = defect.corners()
            inside = (
                (corners[:, 0] > 0) & (corners[:, 0] < self.scan_width_mm)
                & (corners[:, 1] > 0) & (corners[:, 1] < self.scan_height_mm)
            )
            if not inside.all():
                raise ValueError(f"defect at {defect.center} leaves the scan region")
        return self

    @property
    def dx_mm(self) -> float:
        return self.scan_width_mm / self.grid_nx

    @property
    def dy_mm(self) -> float:
        return self.scan_height_mm / self.grid_ny

    @property
    def burst_duration_us(self) -> float:
        return self.source_cycles / self.source_freq_mhz

    @property
    def period_us(self) -> float:
        return 1.0 / self.source_freq_mhz


@dataclass
class WaveField:
    u_prev: np.ndarray
    u_curr: np.ndarray
    t_index: int
    dt_us: float
    dx_mm: float
    dy_mm: float
    mask: np.ndarray


def time_step(spec: PlateSpec) -> float:
    """Largest stable leapfrog step times the safety factor, in microseconds"""
    limit = 1.0 / (spec.wave_speed_mm_per_us * math.sqrt(1 / spec.dx_mm ** 2 + 1 / spec.dy_mm ** 2))
    return SAFETY_FACTOR * limit


def cell_centers(spec: PlateSpec) -> Tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(spec.grid_nx) + 0.5) * spec.dx_mm
    ys = (np.arange(spec.grid_ny) + 0.5) * spec.dy_mm
    return np.meshgrid(xs, ys)


def rasterize_defect(spec: PlateSpec, defect: DefectSpec) -> np.ndarray:
    """Cells whose centre lies inside the rotated slit rectangle"""
    gx, gy = cell_centers(spec)
    theta = math.radians(defect.orientation_deg)
    ox, oy = gx - defect.center[0], gy - defect.center[1]
    along = ox * math.cos(theta) + oy * math.sin(theta)
    across = -ox * math.sin(theta) + oy * math.cos(theta)
    return (np.abs(along) <= defect.length_mm / 2) & (np.abs(across) <= defect.width_mm / 2)


@lru_cache(maxsize=64)
def build_mask(spec: PlateSpec) -> np.ndarray:
    mask = np.full((spec.grid_ny, spec.grid_nx), INTERIOR, dtype=np.int8)
    mask[0, :] = mask[-1, :] = BOUNDARY
    mask[:, 0] = mask[:, -1] = BOUNDARY
    for defect in spec.defects:
        cells = rasterize_defect(spec, defect)
        if not cells.any():
            raise ValidationError(
                f"slit at {defect.center} is thinner than the grid and rasterizes to no cells"
            )
        mask[cells] = SLIT
    mask.setflags(write=False)
    return mask


def init_field(spec: PlateSpec) -> WaveField:
    """Quiescent field with the CFL-limited time step and the slit mask"""
    if not isinstance(spec, PlateSpec):
        spec = PlateSpec.model_validate(spec)
    shape = (spec.grid_ny, spec.grid_nx)
    return WaveField(
        u_prev=np.zeros(shape),
        u_curr=np.zeros(shape),
        t_index=0,
        dt_us=time_step(spec),
        dx_mm=spec.dx_mm,
        dy_mm=spec.dy_mm,
        mask=build_mask(spec),
    )


def step(field: WaveField, spec: PlateSpec) -> WaveField:
    """Advance one leapfrog step; absorbing edges, slit cells clamped to zero"""
    u, up = field.u_curr, field.u_prev
    c_dt = spec.wave_speed_mm_per_us * field.dt_us
    rx2 = (c_dt / field.dx_mm) ** 2
    ry2 = (c_dt / field.dy_mm) ** 2

    nxt = np.empty_like(u)
    centre = u[1:-1, 1:-1]
    lap_x = (u[1:-1, 2:] + u[1:-1, :-2]) - 2.0 * centre
    lap_y = (u[2:, 1:-1] + u[:-2, 1:-1]) - 2.0 * centre
    nxt[1:-1, 1:-1] = 2.0 * centre - up[1:-1, 1:-1] + rx2 * lap_x + ry2 * lap_y

    # one-way wave condition on each edge
    kx = (c_dt - field.dx_mm) / (c_dt + field.dx_mm)
    ky = (c_dt - field.dy_mm) / (c_dt + field.dy_mm)
    nxt[1:-1, 0] = u[1:-1, 1] + kx * (nxt[1:-1, 1] - u[1:-1, 0])
    nxt[1:-1, -1] = u[1:-1, -2] + kx * (nxt[1:-1, -2] - u[1:-1, -1])
    nxt[0, :] = u[1, :] + ky * (nxt[1, :] - u[0, :])
    nxt[-1, :] = u[-2, :] + ky * (nxt[-2, :] - u[-1, :])

    nxt[field.mask == SLIT] = 0.0

    if not np.isfinite(nxt).all():
        raise StabilityError(f"non-finite amplitude at step {field.t_index + 1}")

    return replace(field, u_prev=u, u_curr=nxt, t_index=field.t_index + 1)


def tone_burst(t_us, freq_mhz: float, cycles: int):
    """Hann-windowed sinusoid; zero outside [0, cycles/freq]"""
    t = np.asarray(t_us, dtype=np.float64)
    duration = cycles / freq_mhz
    envelope = 0.5 * (1.0 - np.cos(2.0 * np.pi * t / duration))
    signal = envelope * np.sin(2.0 * np.pi * freq_mhz * t)
    return np.where((t >= 0) & (t <= duration), signal, 0.0)


@lru_cache(maxsize=64)
def source_weights(spec: PlateSpec) -> np.ndarray:
    """
    Per-cell share of the probe signal, summing to one, all on SOURCE_ROW.

    A point probe is placed fractionally (linear interpolation between the two nearest
    columns), so a probe on the centreline of an even grid splits evenly across the two
    middle columns. A finite aperture spreads the signal evenly over the cells under the
    probe face.
    """
    nx = spec.grid_nx
    fx = min(max(spec.probe_pos[0] / spec.dx_mm - 0.5, 1.0), nx - 2.0)

    col = np.zeros(nx)
    xs = (np.arange(nx) + 0.5) * spec.dx_mm
    half = spec.probe_width_mm / 2
    under = (xs >= spec.probe_pos[0] - half) & (xs <= spec.probe_pos[0] + half)
    under[0] = under[-1] = False
    if spec.probe_width_mm > 0 and under.any():
        col[under] = 1.0
    else:
        x0 = int(math.floor(fx))
        wx = fx - x0
        col[x0] += 1.0 - wx
        if wx > 0:
            col[x0 + 1] += wx

    weights = np.zeros((spec.grid_ny, nx))
    weights[SOURCE_ROW] = col / col.sum()
    weights.setflags(write=False)
    return weights


def inject_source(field: WaveField, spec: PlateSpec) -> WaveField:
    """Add the probe's tone burst sample for the current step; no-op outside the burst"""
    t = field.t_index * field.dt_us
    amplitude = float(tone_burst(t, spec.source_freq_mhz, spec.source_cycles))
    if amplitude == 0.0:
        return field
    u = field.u_curr + amplitude * source_weights(spec)
    u[field.mask == SLIT] = 0.0
    return replace(field, u_curr=u)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows average the input cells overlapping each output pixel, weighted by overlap"""
    scale = n_in / n_out
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / scale


@lru_cache(maxsize=16)
def _resample_pair(ny: int, nx: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
    return _area_matrix(ny, size), _area_matrix(nx, size)


def downsample(u: np.ndarray, size: int) -> np.ndarray:
    ry, rx = _resample_pair(u.shape[0], u.shape[1], size)
    return ry @ u @ rx.T


def render_frame(field: WaveField, spec: PlateSpec, rng: Optional[np.random.Generator],
                 amplitude: float = 1.0) -> np.ndarray:
    """
    Map amplitude to 8-bit gray: [-A, +A] -> [0, 255], zero at mid-scale.

    Gaussian noise of std noise_sigma*255 is added before clamping; values are rounded
    with floor(v + 0.5), so a zero field renders as 128.
    """
    check_positive("normalization amplitude", amplitude)
    image = downsample(field.u_curr, spec.image_size)
    gray = (image / amplitude + 1.0) * 127.5
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValidationError("noise_sigma > 0 requires an RNG")
        gray = gray + rng.normal(0.0, spec.noise_sigma * 255.0, size=gray.shape)
    gray = np.clip(gray, 0.0, 255.0)
    return np.floor(gray + 0.5).astype(np.uint8)


def defect_center_px(spec: PlateSpec, defect: DefectSpec) -> Tuple[float, float]:
    size = spec.image_size
    return (
        defect.center[0] / spec.scan_width_mm * size - 0.5,
        defect.center[1] / spec.scan_height_mm * size - 0.5,
    )


def source_to_slit_mm(spec: PlateSpec, defect: DefectSpec) -> float:
    """Shortest distance between a driven cell and a slit cell"""
    gx, gy = cell_centers(spec)
    driven = source_weights(spec) > 0
    slit = rasterize_defect(spec, defect)
    if not slit.any():
        raise ValidationError(f"slit at {defect.center} rasterizes to no cells")
    sources = np.column_stack([gx[driven], gy[driven]])
    targets = np.column_stack([gx[slit], gy[slit]])
    return float(cdist(sources, targets).min())


def arrival_step(spec: PlateSpec, defect: DefectSpec, dt_us: float) -> int:
    """
    First step at which the probe wave can disturb the slit.

    Travel time over the shortest driven-cell to slit-cell distance, less one source
    period: the discrete wavefront leads the exact one by a fraction of a wavelength.
    """
    travel_us = source_to_slit_mm(spec, defect) / spec.wave_speed_mm_per_us - spec.period_us
    return max(int(math.ceil(travel_us / dt_us)), 0)


def scattered_energy(u: np.ndarray, u_ref: np.ndarray, peak_ref_energy: float) -> float:
    if peak_ref_energy <= 0:
        return 0.0
    diff = u - u_ref
    return float(np.sum(diff * diff) / peak_ref_energy)


def run_snapshots(spec: PlateSpec, n_snapshots: int, stride: int) -> Tuple[List[WaveField], float]:
    """Solver fields after every `stride` steps, plus max |u| over every step"""
    field = init_field(spec)
    snapshots = []
    peak = 0.0
    for _ in range(n_snapshots):
        for _ in range(stride):
            field = step(inject_source(field, spec), spec)
            peak = max(peak, float(np.abs(field.u_curr).max()))
        snapshots.append(field)
    return snapshots, peak


def simulate_series(spec: PlateSpec, n_snapshots: int, stride: int,
                    series_id: int = 0, position: str = "") -> Series:
    """
    Render `n_snapshots` frames, one every `stride` solver steps.

    A defect-free twin run of the same spec fixes the gray normalization and provides
    the reference for the per-frame scattered energy.
    """
    if n_snapshots < 1:
        raise ValidationError(f"n_snapshots must be >= 1, got {n_snapshots}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")

    reference_spec = spec.model_copy(update={"defects": ()})
    reference, amplitude = run_snapshots(reference_spec, n_snapshots, stride)
    if spec.defects:
        snapshots, _ = run_snapshots(spec, n_snapshots, stride)
    else:
        snapshots = reference
    if amplitude <= 0:
        amplitude = 1.0

    peak_ref = max(float(np.sum(f.u_curr * f.u_curr)) for f in reference)
    dt = snapshots[0].dt_us
    centers = [defect_center_px(spec, d) for d in spec.defects]
    arrivals = [arrival_step(spec, d, dt) for d in spec.defects]

    rng = np.random.default_rng(spec.seed)
    frames, meta = [], []
    for k, (field, ref) in enumerate(zip(snapshots, reference)):
        frames.append(render_frame(field, spec, rng, amplitude))
        meta.append(FrameMeta(
            frame_index=k,
            step=field.t_index,
            presence=bool(spec.defects),
            centers_px=list(centers),
            arrival_steps=list(arrivals),
            scattered_energy=scattered_energy(field.u_curr, ref.u_curr, peak_ref),
        ))

    logger.info(
        f"🌊 Simulated series {series_id} ({position or 'custom'}): {n_snapshots} frames, "
        f"dt={dt:.4f}us, arrivals={arrivals}"
    )
    return Series(series_id=series_id, frames=frames, meta=meta, position=position)


# Defect layout of the ten-series corpus, as fractions of the scan window
CORPUS_LAYOUT = [
    (1, "No defect", None),
    (2, "Center", (0.5, 0.5)),
    (3, "Right", (0.75, 0.5)),
    (4, "Left", (0.25, 0.5)),
    (5, "Upper", (0.5, 0.275)),
    (6, "Upper right", (0.75, 0.275)),
    (7, "Upper left", (0.25, 0.275)),
    (8, "Lower", (0.5, 0.725)),
    (9, "Lower right", (0.75, 0.725)),
    (10, "Lower left", (0.25, 0.725)),
]


def default_corpus(base: PlateSpec, seed: int, defect_length_mm: float = 20.0,
                   defect_width_mm: float = 1.0,
                   orientation_deg: float = 0.0) -> List[Tuple[int, str, PlateSpec]]:
    """One defect-free series and nine slit positions, each with its own noise seed"""
    corpus = []
    for series_id, position, frac in CORPUS_LAYOUT:
        defects = ()
        if frac is not None:
            defects = (DefectSpec(
                center=(frac[0] * base.scan_width_mm, frac[1] * base.scan_height_mm),
                length_mm=defect_length_mm,
                width_mm=defect_width_mm,
                orientation_deg=orientation_deg,
            ),)
        series_seed = int(np.random.SeedSequence([seed, series_id]).generate_state(1)[0])
        corpus.append((series_id, position, base.model_copy(update={"defects": defects, "seed": series_seed})))
    return corpus
