"""Cavity-mode envelopes and the per-ion coupling distribution they induce.

Two profile variants are supported:

* :class:`Gaussian2DProfile` -- ``exp(-(x^2/w_x^2 + z^2/w_z^2))`` with no
  variation along the propagation (y) axis.
* :class:`GridProfile` -- a sampled 3D field magnitude, normalized to a unit
  maximum and evaluated by trilinear interpolation between voxel centers.

All lengths are in micrometres.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

log = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, list, tuple]


class OutOfDomainError(ValueError):
    """Raised when a field is requested outside a profile's declared domain."""


class ModeGridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Gaussian2DProfile:
    """Transverse Gaussian envelope.

    ``half_extent_*`` bound the sampling domain.  By default the domain is the
    box ``|x| <= 2 w_x, |z| <= 2 w_z``; ``shape="ellipse"`` truncates instead
    at ``(x/a)^2 + (z/c)^2 <= 1`` with ``a, c`` the x and z half-extents.
    """

    waist_x: float = 1.0
    waist_z: float = 1.0
    half_extent_x: float | None = None
    half_extent_y: float = 1.0
    half_extent_z: float | None = None
    shape: str = "box"
    kind: str = field(default="gaussian2d", init=False)

    def __post_init__(self):
        if not (self.waist_x > 0 and self.waist_z > 0):
            raise ValueError("waists must be positive")
        if self.half_extent_x is None:
            object.__setattr__(self, "half_extent_x", 2.0 * self.waist_x)
        if self.half_extent_z is None:
            object.__setattr__(self, "half_extent_z", 2.0 * self.waist_z)
        if min(self.half_extent_x, self.half_extent_y, self.half_extent_z) <= 0:
            raise ValueError("domain extents must be positive")
        if self.shape not in ("box", "ellipse"):
            raise ValueError(f"unknown domain shape {self.shape!r}")

    @classmethod
    def from_waists(cls, waist_x: float, waist_z: float, n_waists: float = 2.0,
                    shape: str = "box") -> "Gaussian2DProfile":
        return cls(waist_x, waist_z, n_waists * waist_x, 1.0, n_waists * waist_z, shape)

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.half_extent_x, self.half_extent_y, self.half_extent_z])

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "waist_x_um": self.waist_x,
            "waist_z_um": self.waist_z,
            "half_extent_um": self.half_extents.tolist(),
            "shape": self.shape,
        }

    def _in_domain(self, pos: np.ndarray) -> np.ndarray:
        x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
        tol = 1e-12
        ok_y = np.abs(y) <= self.half_extent_y * (1 + tol)
        if self.shape == "box":
            ok_xz = (np.abs(x) <= self.half_extent_x * (1 + tol)) & (
                np.abs(z) <= self.half_extent_z * (1 + tol))
        else:
            ok_xz = (x / self.half_extent_x) ** 2 + (z / self.half_extent_z) ** 2 <= 1 + tol
        return ok_xz & ok_y

    def field(self, pos: np.ndarray) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        x, z = pos[..., 0], pos[..., 2]
        return np.exp(-((x / self.waist_x) ** 2 + (z / self.waist_z) ** 2))

    def sample_positions(self, rng: np.random.Generator, count: int) -> np.ndarray:
        a, b, c = self.half_extents
        if self.shape == "box":
            return rng.uniform(-1.0, 1.0, size=(count, 3)) * self.half_extents
        # uniform in the ellipse: radius ~ sqrt(U)
        r = np.sqrt(rng.uniform(0.0, 1.0, size=count))
        theta = rng.uniform(0.0, 2 * np.pi, size=count)
        y = rng.uniform(-b, b, size=count)
        return np.column_stack([a * r * np.cos(theta), y, c * r * np.sin(theta)])


@dataclass(frozen=True, eq=False)
class GridProfile:
    """Sampled field magnitudes on a regular grid centred on the origin.

    Node ``(i, j, k)`` sits at the centre of voxel ``(i, j, k)``; the
    evaluation domain is the box spanned by the outermost voxel centres.
    """

    values: np.ndarray
    voxel: tuple[float, float, float]
    kind: str = field(default="grid", init=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise ValueError("grid needs >= 2 points along every axis")
        if np.any(~np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("grid values must be finite and non-negative")
        vmax = vals.max()
        if vmax <= 0:
            raise ValueError("grid is identically zero")
        vals = vals / vmax
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        voxel = tuple(float(v) for v in self.voxel)
        if len(voxel) != 3 or min(voxel) <= 0:
            raise ValueError("voxel sizes must be three positive numbers")
        object.__setattr__(self, "voxel", voxel)
        axes = tuple((np.arange(n) - (n - 1) / 2.0) * d for n, d in zip(vals.shape, voxel))
        object.__setattr__(self, "_axes", axes)
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            axes, vals, method="linear", bounds_error=False, fill_value=np.nan))

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._axes

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([(n - 1) / 2.0 * d for n, d in zip(self.values.shape, self.voxel)])

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "shape": list(self.values.shape),
            "voxel_um": list(self.voxel),
            "half_extent_um": self.half_extents.tolist(),
        }

    def _in_domain(self, pos: np.ndarray) -> np.ndarray:
        h = self.half_extents * (1 + 1e-12)
        return np.all(np.abs(pos) <= h, axis=-1)

    def field(self, pos: np.ndarray) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        # clip the rounding slack admitted by _in_domain
        h = self.half_extents
        return self._interp(np.clip(pos, -h, h))

    def sample_positions(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(count, 3)) * self.half_extents


ModeProfile = Union[Gaussian2DProfile, GridProfile]


@dataclass(frozen=True, eq=False)
class CouplingSample:
    """Relative couplings ``f_j = |E(r_j)| / |E|_max`` of a sampled ensemble."""

    values: np.ndarray
    seed: object
    count: int
    n_zero: int = 0

    def __len__(self) -> int:
        return len(self.values)


def relative_field(profile: ModeProfile, position) -> np.ndarray | float:
    """Normalized field magnitude at ``position`` (shape ``(3,)`` or ``(N, 3)``, µm)."""
    pos = np.asarray(position, dtype=float)
    if pos.shape[-1] != 3:
        raise ValueError("positions must be 3-vectors")
    inside = profile._in_domain(pos)
    if not np.all(inside):
        bad = pos[~inside] if pos.ndim > 1 else pos
        raise OutOfDomainError(f"position {np.atleast_2d(bad)[0].tolist()} outside profile domain")
    out = profile.field(pos)
    return float(np.ravel(out)[0]) if pos.ndim == 1 else out


def sample_couplings(profile: ModeProfile, count: int, seed: SeedLike) -> CouplingSample:
    """Draw ion positions uniformly over the profile domain and return their couplings.

    Ions landing on zero-field voxels are dropped and counted in ``n_zero``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos = profile.sample_positions(rng, count)
    f = np.asarray(profile.field(pos), dtype=float)
    keep = f > 0
    n_zero = int(count - keep.sum())
    if n_zero:
        log.warning("%d sampled ions sit on zero-field voxels and were dropped", n_zero)
    f = np.minimum(f[keep], 1.0)
    f.setflags(write=False)
    seed_repr = seed if isinstance(seed, (int, np.integer)) else repr(seed)
    return CouplingSample(values=f, seed=seed_repr, count=int(keep.sum()), n_zero=n_zero)


def coupling_ratio_R(sample) -> float:
    """Max-to-mean ratio of the couplings (the mode inhomogeneity ratio)."""
    f = np.asarray(getattr(sample, "values", sample), dtype=float)
    if f.size == 0:
        raise ValueError("empty coupling sample")
    return float(f.max() / f.mean())


# -- MODEGRID text format -----------------------------------------------------

def parse_modegrid(text: str) -> GridProfile:
    tokens = text.split()
    if not tokens or tokens[0] != "MODEGRID":
        raise ModeGridFormatError("missing MODEGRID header")
    try:
        nx, ny, nz = (int(t) for t in tokens[1:4])
        dx, dy, dz = (float(t) for t in tokens[4:7])
    except (ValueError, IndexError) as exc:
        raise ModeGridFormatError(f"bad MODEGRID header: {exc}") from None
    data = tokens[7:]
    if len(data) != nx * ny * nz:
        raise ModeGridFormatError(f"expected {nx * ny * nz} values, found {len(data)}")
    try:
        flat = np.array([float(t) for t in data])
    except ValueError as exc:
        raise ModeGridFormatError(str(exc)) from None
    # x varies fastest
    vals = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    return GridProfile(vals, (dx, dy, dz))


def load_modegrid(path: str | Path) -> GridProfile:
    return parse_modegrid(Path(path).read_text(encoding="utf-8"))


def format_modegrid(profile: GridProfile) -> str:
    nx, ny, nz = profile.values.shape
    dx, dy, dz = profile.voxel
    flat = profile.values.transpose(2, 1, 0).ravel()
    body = "\n".join(" ".join(repr(float(v)) for v in flat[i:i + nx]) for i in range(0, flat.size, nx))
    return f"MODEGRID {nx} {ny} {nz} {dx!r} {dy!r} {dz!r}\n{body}\n"


def save_modegrid(profile: GridProfile, path: str | Path) -> None:
    Path(path).write_text(format_modegrid(profile), encoding="utf-8")
