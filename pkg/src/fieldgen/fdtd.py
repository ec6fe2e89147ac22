"""Two-dimensional Yee-grid FDTD solver (Hz, Ex, Ey) in normalized units.

Units: c = 1, eps0 = mu0 = 1, so the Courant bound is dt <= dx / sqrt(2).
Array layout: ``hz[i, j]`` sits at the centre of cell (x=i, y=j);
``ex[i, j]`` on the y-face j of column i (shape nx x (ny+1)); ``ey[i, j]``
on the x-face i of row j (shape (nx+1) x ny). The outermost faces are
perfect electric conductors. Absorption comes from a graded lossy layer
with matched electric and magnetic loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boundary import SourceGeometrySpec
from .errors import ConfigError, NumericError

WAVEFORMS = ("cw", "pulse")


@dataclass
class SimulationConfig:
    nx: int = 64
    ny: int = 64
    source: SourceGeometrySpec = field(default_factory=lambda: SourceGeometrySpec(30, 30, 4, 4))
    dx: float = 1.0
    dt: float = 0.5
    n_steps: int = 2000
    pml_thickness: int = 10
    pml_order: int = 3
    pml_sigma_max: float = 1.0
    epsilon_r: np.ndarray | None = None
    waveform: str = "cw"
    ramp_periods: float = 3.0

    def validate(self) -> None:
        if self.nx < 2 or self.ny < 2:
            raise ConfigError("grid extents must be >= 2")
        if self.dt <= 0 or self.dx <= 0:
            raise ConfigError("dt and dx must be positive")
        if self.dt > self.dx / math.sqrt(2.0):
            raise ConfigError(f"Courant bound violated: dt={self.dt} > dx/sqrt(2)={self.dx / math.sqrt(2):.4f}")
        t = self.pml_thickness
        if t != 0 and not (4 <= t < min(self.nx, self.ny) / 4):
            raise ConfigError(f"pml_thickness={t} must satisfy 4 <= t < min(nx, ny)/4")
        if self.pml_sigma_max < 0 or self.pml_order < 0:
            raise ConfigError("pml grading parameters must be non-negative")
        if self.epsilon_r is not None:
            eps = np.asarray(self.epsilon_r)
            if eps.shape != (self.nx, self.ny):
                raise ConfigError(f"epsilon_r shape {eps.shape} != ({self.nx}, {self.ny})")
            if not (eps >= 1).all():
                raise ConfigError("epsilon_r must be >= 1 everywhere")
        if self.waveform not in WAVEFORMS:
            raise ConfigError(f"waveform must be one of {WAVEFORMS}")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        s = self.source
        if s.x < 0 or s.y < 0 or s.x + s.width > self.nx or s.y + s.height > self.ny:
            raise ConfigError("source rectangle outside the grid")

    def to_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "source": self.source.to_dict(),
            "dx": self.dx,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "pml_thickness": self.pml_thickness,
            "pml_order": self.pml_order,
            "pml_sigma_max": self.pml_sigma_max,
            "waveform": self.waveform,
            "ramp_periods": self.ramp_periods,
            "uniform_medium": self.epsilon_r is None,
        }


@dataclass
class YeeGrid:
    hz: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    hz_prev: np.ndarray
    sigma_hz: np.ndarray
    sigma_ex: np.ndarray
    sigma_ey: np.ndarray
    eps_ex: np.ndarray
    eps_ey: np.ndarray
    # update coefficients derived from sigma / eps
    ca_ex: np.ndarray
    cb_ex: np.ndarray
    ca_ey: np.ndarray
    cb_ey: np.ndarray
    da_hz: np.ndarray
    db_hz: np.ndarray
    t: int = 0


@dataclass
class FieldSnapshot:
    hz_final: np.ndarray
    config: dict
    energy: float
    seed: int


def grading_profile(n: int, thickness: int, order: int, sigma_max: float, faces: bool) -> np.ndarray:
    """Conductivity along one axis.

    Depth into the layer is measured from its inner edge; cell centres sit
    half a cell deeper than the face that bounds them on the inside.
    """
    if faces:
        pos = np.arange(n + 1, dtype=np.float64)
    else:
        pos = np.arange(n, dtype=np.float64) + 0.5
    if thickness == 0:
        return np.zeros_like(pos)
    depth = np.maximum(thickness - pos, 0.0) + np.maximum(pos - (n - thickness), 0.0)
    return sigma_max * (depth / thickness) ** order


def build_grid(config: SimulationConfig) -> YeeGrid:
    config.validate()
    nx, ny, dt, dx = config.nx, config.ny, config.dt, config.dx
    L, m, smax = config.pml_thickness, config.pml_order, config.pml_sigma_max
    sx_c = grading_profile(nx, L, m, smax, faces=False)
    sx_f = grading_profile(nx, L, m, smax, faces=True)
    sy_c = grading_profile(ny, L, m, smax, faces=False)
    sy_f = grading_profile(ny, L, m, smax, faces=True)

    sigma_hz = sx_c[:, None] + sy_c[None, :]
    sigma_ex = sx_c[:, None] + sy_f[None, :]
    sigma_ey = sx_f[:, None] + sy_c[None, :]

    eps = np.ones((nx, ny)) if config.epsilon_r is None else np.asarray(config.epsilon_r, dtype=np.float64)
    # face permittivity: average of the two adjacent cells
    eps_ex = np.ones((nx, ny + 1))
    eps_ex[:, 1:-1] = 0.5 * (eps[:, 1:] + eps[:, :-1])
    eps_ex[:, 0], eps_ex[:, -1] = eps[:, 0], eps[:, -1]
    eps_ey = np.ones((nx + 1, ny))
    eps_ey[1:-1, :] = 0.5 * (eps[1:, :] + eps[:-1, :])
    eps_ey[0, :], eps_ey[-1, :] = eps[0, :], eps[-1, :]

    def coeffs(sigma, eps_face):
        half = 0.5 * sigma * dt
        return (1.0 - half) / (1.0 + half), dt / (dx * eps_face * (1.0 + half))

    ca_ex, cb_ex = coeffs(sigma_ex, eps_ex)
    ca_ey, cb_ey = coeffs(sigma_ey, eps_ey)
    da_hz, db_hz = coeffs(sigma_hz, 1.0)

    return YeeGrid(
        hz=np.zeros((nx, ny)),
        ex=np.zeros((nx, ny + 1)),
        ey=np.zeros((nx + 1, ny)),
        hz_prev=np.zeros((nx, ny)),
        sigma_hz=sigma_hz,
        sigma_ex=sigma_ex,
        sigma_ey=sigma_ey,
        eps_ex=eps_ex,
        eps_ey=eps_ey,
        ca_ex=ca_ex,
        cb_ex=cb_ex,
        ca_ey=ca_ey,
        cb_ey=cb_ey,
        da_hz=da_hz,
        db_hz=db_hz,
    )


def source_value(config: SimulationConfig, t: float) -> float:
    """Source waveform at physical time ``t``."""
    src = config.source
    if config.waveform == "pulse":
        f = 1.0 / src.wavelength
        tau = t - 1.5 / f
        a = (math.pi * f * tau) ** 2
        return src.amplitude * (1.0 - 2.0 * a) * math.exp(-a)
    omega = 2.0 * math.pi / src.wavelength
    t_ramp = config.ramp_periods * src.wavelength
    ramp = 0.5 * (1.0 - math.cos(math.pi * t / t_ramp)) if t < t_ramp else 1.0
    return src.amplitude * ramp * math.sin(omega * t)


def step_yee(grid: YeeGrid, config: SimulationConfig | None = None) -> YeeGrid:
    """Advance the fields by one leapfrog step, in place.

    ``config=None`` runs source-free.
    """
    hz, ex, ey = grid.hz, grid.ex, grid.ey
    # E from spatial differences of Hz (PEC faces stay zero)
    ex[:, 1:-1] = grid.ca_ex[:, 1:-1] * ex[:, 1:-1] + grid.cb_ex[:, 1:-1] * (hz[:, 1:] - hz[:, :-1])
    ey[1:-1, :] = grid.ca_ey[1:-1, :] * ey[1:-1, :] - grid.cb_ey[1:-1, :] * (hz[1:, :] - hz[:-1, :])
    grid.hz_prev = hz.copy()
    curl = (ex[:, 1:] - ex[:, :-1]) - (ey[1:, :] - ey[:-1, :])
    hz *= grid.da_hz
    hz += grid.db_hz * curl
    grid.t += 1
    if config is not None:
        s = config.source
        hz[s.x : s.x + s.width, s.y : s.y + s.height] += source_value(config, grid.t * config.dt)
    if not (np.isfinite(hz).all() and np.isfinite(ex).all() and np.isfinite(ey).all()):
        raise NumericError(f"field blow-up at step {grid.t}")
    return grid


def field_energy(grid: YeeGrid) -> float:
    """Discrete electromagnetic energy.

    Pairs the magnetic field on both sides of the latest electric update,
    which makes the sum an exact invariant of the lossless scheme.
    """
    e = np.sum(grid.eps_ex * grid.ex**2) + np.sum(grid.eps_ey * grid.ey**2)
    return float(e + np.sum(grid.hz * grid.hz_prev))


def run(config: SimulationConfig, seed: int = 0) -> FieldSnapshot:
    """Run ``config.n_steps`` steps from rest and return the final Hz.

    The solver is deterministic; ``seed`` is carried into the snapshot so a
    dataset record can name the stream that produced its geometry.
    """
    grid = build_grid(config)
    for _ in range(config.n_steps):
        step_yee(grid, config)
    return FieldSnapshot(
        hz_final=grid.hz.copy(),
        config=config.to_dict(),
        energy=field_energy(grid),
        seed=int(seed),
    )


def snapshot_to_image(snapshot: FieldSnapshot | np.ndarray, clip_amplitude: float) -> np.ndarray:
    """Map Hz linearly to [0, 1] (0 -> 0.5, +-A -> 1/0), as a 3xHxW image.

    Image rows are y and columns are x.
    """
    if clip_amplitude <= 0:
        raise ValueError("clip_amplitude must be positive")
    hz = snapshot.hz_final if isinstance(snapshot, FieldSnapshot) else np.asarray(snapshot)
    img = np.clip((hz.T + clip_amplitude) / (2.0 * clip_amplitude), 0.0, 1.0)
    return np.broadcast_to(img, (3,) + img.shape).astype(np.float32)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a single-channel [0,1] image as binary 8-bit PGM."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img.mean(axis=0)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
