"""On-disk cache of eigendata, keyed by potential, cutoff and k-grid.

Two record kinds share one layout: a fixed little-endian header followed by
row-major arrays.

    band record   BLCHBAND | version | nk | n_bands | flags | energies <f8
                  [velocities <f8 when flags & 1]
    fiber record  BLCHFIBR | version | M | 0 | 0 | k <f8 | energies <f8 |
                  eigvecs <c16 | pi_hat <c16

A record whose magic, version or size does not match is treated as a miss.
"""

import logging
import os
import struct
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from fiber import FiberSolution, PlaneWaveBasis
from potential import FourierPotential

logger = logging.getLogger("bloch_chi.cache")

CACHE_ENV = "BLOCH_CHI_CACHE_DIR"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIII")
BAND_MAGIC = b"BLCHBAND"
FIBER_MAGIC = b"BLCHFIBR"
FLAG_VELOCITIES = 1


@lru_cache(maxsize=1)
def default_cache_dir() -> Optional[Path]:
    """Cache root from the environment, or None when unset."""
    raw = os.environ.get(CACHE_ENV, "").strip()
    if not raw:
        return None
    return Path(raw).expanduser().resolve()


def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


class EigenCache:
    """Binary eigendata store rooted at a directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def key_dir(self, pot: FourierPotential, basis: PlaneWaveBasis, grid_key: str) -> Path:
        return self.root / f"{pot.fingerprint()[:20]}-c{basis.cutoff_n}-{grid_key}"

    # -- band records -------------------------------------------------------

    def load_bands(
        self,
        pot: FourierPotential,
        basis: PlaneWaveBasis,
        grid_key: str,
        nk: int,
        n_bands: int,
        velocities: bool,
    ) -> Optional[tuple[np.ndarray, Optional[np.ndarray]]]:
        path = self.key_dir(pot, basis, grid_key) / "bands.bin"
        if not path.exists():
            logger.debug("Cache miss: %s", path)
            return None
        data = path.read_bytes()
        try:
            magic, version, stored_nk, stored_nb, flags = HEADER.unpack_from(data)
        except struct.error:
            return None
        if magic != BAND_MAGIC or version != FORMAT_VERSION or stored_nk != nk:
            logger.warning("Ignoring stale cache record %s", path)
            return None
        if stored_nb < n_bands or (velocities and not flags & FLAG_VELOCITIES):
            return None
        size_e = nk * stored_nb
        size_v = size_e * 3 if flags & FLAG_VELOCITIES else 0
        if len(data) != HEADER.size + 8 * (size_e + size_v):
            logger.warning("Truncated cache record %s", path)
            return None
        energies = np.frombuffer(data, dtype="<f8", count=size_e, offset=HEADER.size)
        energies = energies.reshape(nk, stored_nb)[:, :n_bands].astype(float)
        vel = None
        if velocities:
            raw = np.frombuffer(data, dtype="<f8", count=size_v, offset=HEADER.size + 8 * size_e)
            vel = raw.reshape(nk, stored_nb, 3)[:, :n_bands].astype(float)
        logger.debug("Cache hit: %s", path)
        return energies, vel

    def store_bands(
        self,
        pot: FourierPotential,
        basis: PlaneWaveBasis,
        grid_key: str,
        energies: np.ndarray,
        velocities: Optional[np.ndarray],
    ) -> Path:
        nk, nb = energies.shape
        flags = FLAG_VELOCITIES if velocities is not None else 0
        parts = [
            HEADER.pack(BAND_MAGIC, FORMAT_VERSION, nk, nb, flags),
            np.ascontiguousarray(energies, dtype="<f8").tobytes(),
        ]
        if velocities is not None:
            parts.append(np.ascontiguousarray(velocities, dtype="<f8").tobytes())
        path = self.key_dir(pot, basis, grid_key) / "bands.bin"
        _write_atomic(path, b"".join(parts))
        return path

    # -- fiber records ------------------------------------------------------

    def _fiber_path(self, pot, basis, grid_key: str, index: int) -> Path:
        return self.key_dir(pot, basis, grid_key) / "fibers" / f"k{index:08d}.bin"

    def load_fiber(
        self, pot: FourierPotential, basis: PlaneWaveBasis, grid_key: str, index: int
    ) -> Optional[FiberSolution]:
        path = self._fiber_path(pot, basis, grid_key, index)
        if not path.exists():
            return None
        data = path.read_bytes()
        m = basis.dimension
        try:
            magic, version, stored_m, _, _ = HEADER.unpack_from(data)
        except struct.error:
            return None
        expected = HEADER.size + 8 * (3 + m) + 16 * 4 * m * m
        if magic != FIBER_MAGIC or version != FORMAT_VERSION or stored_m != m or len(data) != expected:
            logger.warning("Ignoring stale cache record %s", path)
            return None
        offset = HEADER.size
        k = np.frombuffer(data, dtype="<f8", count=3, offset=offset).astype(float)
        offset += 24
        energies = np.frombuffer(data, dtype="<f8", count=m, offset=offset).astype(float)
        offset += 8 * m
        eigvecs = np.frombuffer(data, dtype="<c16", count=m * m, offset=offset).reshape(m, m).astype(complex)
        offset += 16 * m * m
        pi_hat = np.frombuffer(data, dtype="<c16", count=3 * m * m, offset=offset).reshape(3, m, m).astype(complex)
        return FiberSolution(k, energies, eigvecs, pi_hat)

    def store_fiber(
        self, pot: FourierPotential, basis: PlaneWaveBasis, grid_key: str, index: int, sol: FiberSolution
    ) -> Path:
        payload = b"".join(
            [
                HEADER.pack(FIBER_MAGIC, FORMAT_VERSION, sol.dimension, 0, 0),
                np.ascontiguousarray(sol.k, dtype="<f8").tobytes(),
                np.ascontiguousarray(sol.energies, dtype="<f8").tobytes(),
                np.ascontiguousarray(sol.eigvecs, dtype="<c16").tobytes(),
                np.ascontiguousarray(sol.pi_hat, dtype="<c16").tobytes(),
            ]
        )
        path = self._fiber_path(pot, basis, grid_key, index)
        _write_atomic(path, payload)
        return path
