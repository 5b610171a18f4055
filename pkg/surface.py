"""Fermi-surface integrals by the linear tetrahedron method.

Each grid cube is cut into six tetrahedra sharing its 0-7 main diagonal.
Inside a tetrahedron E_N is interpolated linearly, so the isolevel is a
triangle or a planar quadrilateral whose area is exact for the
interpolant.

The same tetrahedra give a continuous integrated density of states. A
linear interpolant lies above a convex band by

    (1/40) sum_{edges} d^T D d

on average over a tetrahedron, where d runs over its six edges in lattice
units and D is the lattice second difference of the band. ``corrected``
energies subtract that amount per tetrahedron.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from bz import BandData, BZGrid
from errors import SurfaceError

logger = logging.getLogger("bloch_chi.surface")

GRADIENT_FLOOR = 1e-6
DEGENERATE_FRACTION = 0.01
ISOLATION_MARGIN = 1e-3
CUBE_CHUNK = 1 << 16

_CORNERS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]
)
_TETRAHEDRA = np.array(
    [[0, 7, 1, 3], [0, 7, 1, 5], [0, 7, 2, 3], [0, 7, 2, 6], [0, 7, 4, 5], [0, 7, 4, 6]]
)
CURVATURE_WEIGHT = 1.0 / 40.0


def _edge_moments() -> np.ndarray:
    # sum over the six edges of d d^T, one 3x3 block per tetrahedron
    moments = np.zeros((len(_TETRAHEDRA), 3, 3))
    for t, tet in enumerate(_TETRAHEDRA):
        for a in range(4):
            for b in range(a + 1, 4):
                d = _CORNERS[tet[b]] - _CORNERS[tet[a]]
                moments[t] += np.outer(d, d)
    return moments


_EDGE_MOMENTS = _edge_moments()


def filled_fraction(e: np.ndarray, level: float) -> np.ndarray:
    """Share of each tetrahedron where the interpolant lies below ``level``.

    ``e`` holds sorted vertex energies, one row per tetrahedron.
    """
    e1, e2, e3, e4 = e.T
    out = np.zeros(len(e))
    out[level >= e4] = 1.0

    low = (e1 <= level) & (level < e2)
    x = level - e1[low]
    out[low] = x ** 3 / ((e2 - e1)[low] * (e3 - e1)[low] * (e4 - e1)[low])

    mid = (e2 <= level) & (level < e3)
    e21, e31, e41 = (e2 - e1)[mid], (e3 - e1)[mid], (e4 - e1)[mid]
    e32, e42 = (e3 - e2)[mid], (e4 - e2)[mid]
    x = level - e2[mid]
    out[mid] = (e21 ** 2 + 3.0 * e21 * x + 3.0 * x ** 2 - (e31 + e42) / (e32 * e42) * x ** 3) / (e31 * e41)

    high = (e3 <= level) & (level < e4)
    x = e4[high] - level
    out[high] = 1.0 - x ** 3 / ((e4 - e1)[high] * (e4 - e2)[high] * (e4 - e3)[high])
    return out


@dataclass(frozen=True, eq=False)
class TetraMesh:
    grid: BZGrid
    energies: np.ndarray
    gradients: np.ndarray

    @classmethod
    def from_band(
        cls, grid: BZGrid, energies: np.ndarray, gradients: Optional[np.ndarray] = None
    ) -> "TetraMesh":
        """Mesh over one band; ``gradients`` are only needed for surface integrals."""
        energies = np.asarray(energies, dtype=float)
        if gradients is None:
            gradients = np.zeros((grid.size, 3))
        gradients = np.asarray(gradients, dtype=float)
        if energies.shape != (grid.size,) or gradients.shape != (grid.size, 3):
            raise ValueError("Band samples must have one value and one gradient per grid point")
        return cls(grid, energies, gradients)

    @cached_property
    def lattice_curvature(self) -> np.ndarray:
        """Second differences of the band between grid neighbours, (size, 3, 3)."""
        n = self.grid.n_per_axis
        e = self.energies.reshape(n, n, n)
        d = np.empty((n, n, n, 3, 3))
        for a in range(3):
            d[..., a, a] = np.roll(e, -1, axis=a) - 2.0 * e + np.roll(e, 1, axis=a)
            for b in range(a + 1, 3):
                up = np.roll(e, -1, axis=a)
                down = np.roll(e, 1, axis=a)
                mixed = 0.25 * (
                    np.roll(up, -1, axis=b) - np.roll(up, 1, axis=b)
                    - np.roll(down, -1, axis=b) + np.roll(down, 1, axis=b)
                )
                d[..., a, b] = mixed
                d[..., b, a] = mixed
        return d.reshape(-1, 3, 3)

    @cached_property
    def _vertex_bias(self) -> np.ndarray:
        # (size, 6): edge moments of each tetrahedron type against the local curvature
        return CURVATURE_WEIGHT * np.einsum("tab,pab->pt", _EDGE_MOMENTS, self.lattice_curvature)

    def tetrahedron_energies(self, cubes: Optional[np.ndarray] = None, corrected: bool = False) -> np.ndarray:
        """Sorted vertex energies (T, 4) of the tetrahedra in ``cubes``."""
        if cubes is None:
            cubes = np.arange(self.grid.size)
        ids = self._cube_corners(cubes)[:, _TETRAHEDRA]
        e = self.energies[ids]
        if corrected:
            bias = self._vertex_bias[ids, np.arange(len(_TETRAHEDRA))[None, :, None]]
            e = e - bias.mean(axis=2, keepdims=True)
        return np.sort(e.reshape(-1, 4), axis=1)

    def filled_volume(self, level: float, corrected: bool = False) -> float:
        """States per cell below ``level`` for this band, between 0 and 1."""
        total = 0.0
        for start in range(0, self.grid.size, CUBE_CHUNK):
            cubes = np.arange(start, min(start + CUBE_CHUNK, self.grid.size))
            total += float(np.sum(filled_fraction(self.tetrahedron_energies(cubes, corrected), level)))
        return total / (len(_TETRAHEDRA) * self.grid.size)

    def _cube_corners(self, cubes: np.ndarray) -> np.ndarray:
        n = self.grid.n_per_axis
        ijk = np.stack(np.unravel_index(cubes, (n, n, n)), axis=-1)
        c = ijk[:, None, :] + _CORNERS[None, :, :]
        return self.grid.flat_index(c[..., 0], c[..., 1], c[..., 2])

    def _cube_origins(self, cubes: np.ndarray) -> np.ndarray:
        return self.grid.points[cubes]

    def crossing_cubes(self, level: float) -> np.ndarray:
        found = []
        for start in range(0, self.grid.size, CUBE_CHUNK):
            cubes = np.arange(start, min(start + CUBE_CHUNK, self.grid.size))
            e = self.energies[self._cube_corners(cubes)]
            found.append(cubes[(e.min(axis=1) < level) & (e.max(axis=1) > level)])
        return np.concatenate(found)

    def crossing_vertices(self, level: float) -> np.ndarray:
        """Grid indices of every corner of a cube the isolevel passes through."""
        cubes = self.crossing_cubes(level)
        return np.unique(self._cube_corners(cubes))

    def tetrahedra(self, cubes: Optional[np.ndarray] = None):
        """Vertex ids (T, 4) and unwrapped positions (T, 4, 3)."""
        if cubes is None:
            cubes = np.arange(self.grid.size)
        corners = self._cube_corners(cubes)
        positions = self._cube_origins(cubes)[:, None, :] + self.grid.spacing * _CORNERS[None]
        ids = corners[:, _TETRAHEDRA].reshape(-1, 4)
        pos = positions[:, _TETRAHEDRA].reshape(-1, 4, 3)
        return ids, pos

    def volume(self) -> float:
        _, pos = self.tetrahedra()
        edges = pos[:, 1:] - pos[:, :1]
        return float(np.sum(np.abs(np.linalg.det(edges))) / 6.0)


class SurfaceIntegral(BaseModel):
    model_config = ConfigDict(frozen=True)
    value: float
    crossing_tetrahedra: int
    degenerate_tetrahedra: int


class IsolationReport(BaseModel):
    model_config = ConfigDict(frozen=True)
    band: int
    fermi_energy: float
    d1: float
    d2: float
    margin: float
    ok: bool


def _isolevel_pieces(mesh: TetraMesh, level: float, cubes: np.ndarray):
    ids, pos = mesh.tetrahedra(cubes)
    e = mesh.energies[ids]
    order = np.argsort(e, axis=1, kind="stable")
    ids = np.take_along_axis(ids, order, axis=1)
    pos = np.take_along_axis(pos, order[..., None], axis=1)
    e = np.take_along_axis(e, order, axis=1)
    grad = mesh.gradients[ids]
    below = np.count_nonzero(e < level, axis=1)
    keep = (below >= 1) & (below <= 3)
    return ids[keep], pos[keep], e[keep], grad[keep], below[keep]


def _cut(pos, grad, e, level, a, b):
    t = ((level - e[:, a]) / (e[:, b] - e[:, a]))[:, None]
    return pos[:, a] + t * (pos[:, b] - pos[:, a]), grad[:, a] + t * (grad[:, b] - grad[:, a])


def _polygons(pos, grad, e, below, level):
    """Isolevel polygon corners (T, 4, 3), mean gradients and areas."""
    corners = np.zeros(pos.shape)
    grads = np.zeros(pos.shape)
    count = np.where(below == 2, 4, 3)
    for nb, edges in (
        (1, [(0, 1), (0, 2), (0, 3)]),
        (3, [(0, 3), (1, 3), (2, 3)]),
        (2, [(0, 2), (0, 3), (1, 3), (1, 2)]),
    ):
        sel = below == nb
        if not sel.any():
            continue
        for slot, (a, b) in enumerate(edges):
            p, g = _cut(pos[sel], grad[sel], e[sel], level, a, b)
            corners[sel, slot] = p
            grads[sel, slot] = g
        if nb != 2:
            corners[sel, 3] = corners[sel, 0]
            grads[sel, 3] = 0.0
    tri = count == 3
    area = np.empty(len(pos))
    area[tri] = 0.5 * np.linalg.norm(
        np.cross(corners[tri, 1] - corners[tri, 0], corners[tri, 2] - corners[tri, 0]), axis=1
    )
    quad = ~tri
    area[quad] = 0.5 * np.linalg.norm(
        np.cross(corners[quad, 0] - corners[quad, 2], corners[quad, 1] - corners[quad, 3]), axis=1
    )
    mean_grad = grads.sum(axis=1) / count[:, None]
    return corners, count, mean_grad, area


def surface_integral(mesh: TetraMesh, level: float, values: np.ndarray) -> SurfaceIntegral:
    """Integral over {E_N = level} of values / |grad E_N|.

    ``values`` holds one sample per grid point; each crossing tetrahedron
    uses the average over its four vertices.

    Raises:
        SurfaceError: gradient below 1e-6 on more than 1% of crossing tetrahedra
    """
    values = np.asarray(values, dtype=float)
    cubes = mesh.crossing_cubes(level)
    partial = []
    crossing = 0
    degenerate = 0
    for start in range(0, len(cubes), CUBE_CHUNK):
        ids, pos, e, grad, below = _isolevel_pieces(mesh, level, cubes[start:start + CUBE_CHUNK])
        if not len(ids):
            continue
        _, _, mean_grad, area = _polygons(pos, grad, e, below, level)
        speed = np.linalg.norm(mean_grad, axis=1)
        flat = speed < GRADIENT_FLOOR
        crossing += len(ids)
        degenerate += int(np.count_nonzero(flat))
        weight = values[ids].mean(axis=1)
        partial.append(np.sum(np.where(flat, 0.0, area * weight / np.where(flat, 1.0, speed))))
    if crossing and degenerate > DEGENERATE_FRACTION * crossing:
        raise SurfaceError(
            f"Gradient below {GRADIENT_FLOOR} on {degenerate} of {crossing} crossing tetrahedra",
            {"crossing": crossing, "degenerate": degenerate},
        )
    if degenerate:
        logger.warning("Skipped %d degenerate tetrahedra of %d", degenerate, crossing)
    return SurfaceIntegral(
        value=float(np.sum(partial)) if partial else 0.0,
        crossing_tetrahedra=crossing,
        degenerate_tetrahedra=degenerate,
    )


def isolation_check(
    bands: BandData, band: int, level: float, margin: float = ISOLATION_MARGIN
) -> IsolationReport:
    """Distances from the Fermi level to the sampled neighbouring bands."""
    d1 = float(np.abs(level - bands.band(band - 1)).min()) if band > 1 else float("inf")
    d2 = float(np.abs(bands.band(band + 1) - level).min()) if band < bands.n_bands else float("inf")
    return IsolationReport(
        band=band, fermi_energy=level, d1=d1, d2=d2, margin=margin, ok=d1 > margin and d2 > margin
    )


def isosurface_polygons(mesh: TetraMesh, level: float) -> list[np.ndarray]:
    cubes = mesh.crossing_cubes(level)
    polys = []
    for start in range(0, len(cubes), CUBE_CHUNK):
        ids, pos, e, grad, below = _isolevel_pieces(mesh, level, cubes[start:start + CUBE_CHUNK])
        if not len(ids):
            continue
        corners, count, _, _ = _polygons(pos, grad, e, below, level)
        polys.extend(c[:n] for c, n in zip(corners, count))
    return polys


def write_obj(mesh: TetraMesh, level: float, path: Path) -> int:
    """Dump the isosurface as Wavefront OBJ; returns the face count."""
    polys = isosurface_polygons(mesh, level)
    lines = [f"# isolevel {level!r}"]
    faces = []
    vertex = 1
    for poly in polys:
        lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in poly)
        faces.append("f " + " ".join(str(vertex + i) for i in range(len(poly))))
        vertex += len(poly)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines + faces) + "\n", encoding="utf-8")
    return len(faces)
