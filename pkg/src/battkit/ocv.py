"""Open-circuit voltage curves as piecewise-linear tables.

Outside ``[0, 1]`` the curve continues along its end segments, so it is
globally Lipschitz and every chord slope lies between the smallest and the
largest segment slope. Those two numbers are the polytope bounds used by the
observer design.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError

# slope bounds (V per unit stoichiometry) of the curves used for the 6 Ah cell
PUBLISHED_SLOPE_BOUNDS = {
    "neg": (-75.2267, -0.0067),
    "pos": (-1266.7, -0.2667),
}

CSV_HEADER = ("zeta", "voltage_V")


@dataclass(frozen=True)
class OcvCurve:
    zeta: np.ndarray
    voltage: np.ndarray

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.voltage) / np.diff(self.zeta)

    @property
    def c1(self) -> float:
        """Smallest segment slope."""
        return float(self.slopes.min())

    @property
    def c2(self) -> float:
        """Largest segment slope."""
        return float(self.slopes.max())

    @property
    def bounds(self) -> tuple[float, float]:
        return self.c1, self.c2

    def __post_init__(self):
        s = np.diff(self.voltage) / np.diff(self.zeta)
        object.__setattr__(self, "_ends", (float(self.zeta[0]), float(self.zeta[-1]), float(s[0]), float(s[-1])))

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        z0, z1, s0, s1 = self._ends
        # np.interp clamps outside the table; add the end-segment continuation
        out = (np.interp(z, self.zeta, self.voltage)
               + s0 * np.minimum(z - z0, 0.0) + s1 * np.maximum(z - z1, 0.0))
        return float(out) if out.ndim == 0 else out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for z, v in zip(self.zeta, self.voltage):
            w.writerow([repr(float(z)), repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def load_ocv(table) -> OcvCurve:
    """Build a curve from ``(zeta, voltage)`` pairs, ``zeta`` strictly increasing in [0, 1]."""
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FormatError("OCV table must be a list of (zeta, voltage) pairs")
    if len(arr) < 2:
        raise FormatError("OCV table needs at least 2 rows")
    zeta, volt = arr[:, 0].copy(), arr[:, 1].copy()
    if not np.all(np.isfinite(arr)):
        raise FormatError("OCV table contains non-finite values")
    bad = np.flatnonzero(np.diff(zeta) <= 0)
    if bad.size:
        raise FormatError(f"zeta not strictly increasing at row {bad[0] + 2}")
    if zeta[0] < 0 or zeta[-1] > 1:
        raise FormatError("zeta must lie within [0, 1]")
    zeta.flags.writeable = False
    volt.flags.writeable = False
    return OcvCurve(zeta, volt)


def parse_ocv_csv(text: str, source: str = "<ocv>") -> OcvCurve:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows or tuple(c.strip() for c in rows[0]) != CSV_HEADER:
        raise FormatError(f"{source}:1: expected header {','.join(CSV_HEADER)}")
    pairs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"{source}:{lineno}: expected 2 columns, got {len(row)}")
        try:
            pairs.append((float(row[0]), float(row[1])))
        except ValueError:
            raise FormatError(f"{source}:{lineno}: non-numeric value") from None
    try:
        return load_ocv(pairs)
    except FormatError as exc:
        raise FormatError(f"{source}: {exc}") from None


def read_ocv_csv(path) -> OcvCurve:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read OCV file {path}: {exc}") from None
    return parse_ocv_csv(text, str(path))


# --- canned curves -----------------------------------------------------------

def _graphite_like(z):
    # decreasing, steep near empty, staged plateaus
    return (0.12 + 0.75 * np.exp(-40.0 * z)
            + 0.07 * (1 - np.tanh((z - 0.2) / 0.04)) / 2
            + 0.04 * (1 - np.tanh((z - 0.55) / 0.03)) / 2
            - 0.03 * z)


def _nca_like(z):
    # layered oxide: gentle slope, collapse near full lithiation
    return 4.33 - 1.15 * z + 0.35 * z**2 - 0.45 * np.exp(90.0 * (z - 1.0))


def _stoichiometry_grid():
    inner = np.linspace(0.0, 0.99, 199)
    edges = np.array([0.995, 0.998, 0.999, 0.9995, 1.0])
    head = np.array([0.0, 0.002, 0.005])
    return np.unique(np.concatenate((head, inner, edges)))


def bounded_table(func, zeta, c1: float, c2: float):
    """Sample ``func`` and pin its segment slopes to ``[c1, c2]``.

    Slopes are clipped into the interval, then the steepest and the flattest
    segments are set to ``c1`` and ``c2`` exactly, and voltages are rebuilt
    from the first sample so the table stays continuous.
    """
    zeta = np.asarray(zeta, dtype=float)
    v = func(zeta)
    s = np.clip(np.diff(v) / np.diff(zeta), c1, c2)
    s[np.argmin(s)] = c1
    s[np.argmax(s)] = c2
    volt = v[0] + np.concatenate(([0.0], np.cumsum(s * np.diff(zeta))))
    return np.column_stack((zeta, volt))


def make_canned_tables() -> dict[str, np.ndarray]:
    z = _stoichiometry_grid()
    return {
        "neg": bounded_table(_graphite_like, z, *PUBLISHED_SLOPE_BOUNDS["neg"]),
        "pos": bounded_table(_nca_like, z, *PUBLISHED_SLOPE_BOUNDS["pos"]),
    }


def canned_ocv(side: str) -> OcvCurve:
    """Illustrative graphite (``neg``) or NCA (``pos``) curve shipped with the package."""
    if side not in PUBLISHED_SLOPE_BOUNDS:
        raise ValueError(f"unknown electrode {side!r}")
    text = resources.files("battkit.data").joinpath(f"ocv_{side}.csv").read_text()
    return parse_ocv_csv(text, f"ocv_{side}.csv")
