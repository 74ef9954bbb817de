"""Cell parameters and the flat ``key=value`` parameter file format.

All quantities are SI except the charges ``Q`` and ``Q_cell`` which are in Ah.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError


@dataclass(frozen=True)
class ElectrodeParams:
    """Geometry, transport and calibration data of one electrode."""

    radius: float  # m
    diffusivity: float  # m^2/s
    volume_fraction: float  # active material fraction
    thickness: float  # m
    c_max: float  # mol/m^3
    j0: float  # A/m^2
    sigma: float  # S/m
    eps_e: float  # electrolyte fraction
    c0: float  # mol/m^3 at SOC = 0 %
    c100: float  # mol/m^3 at SOC = 100 %

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not self.diffusivity > 0:
            raise ValueError("diffusivity must be positive")
        if not 0 < self.volume_fraction <= 1:
            raise ValueError("volume_fraction must lie in (0, 1]")
        if not self.c_max > 0:
            raise ValueError("c_max must be positive")
        if self.c0 == self.c100:
            raise ValueError("SOC calibration needs c0 != c100")

    @property
    def tau(self) -> float:
        """Diffusion time constant R^2/D in seconds."""
        return self.radius**2 / self.diffusivity


@dataclass(frozen=True)
class CellParams:
    neg: ElectrodeParams
    pos: ElectrodeParams
    A_cell: float = 0.8
    F: float = 96485.0
    R: float = 8.3145
    T: float = 298.15
    d_sep: float = 25.4e-6
    eps_e_sep: float = 0.5
    kappa_e: float = 0.63
    Q_cell: float = 6.0  # Ah
    Q: float = 11.396  # Ah
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def u_T(self) -> float:
        # kept for completeness; the voltage equations use R*T/F inline
        return self.R * self.T / self.F

    def electrode(self, side: str) -> ElectrodeParams:
        if side == "neg":
            return self.neg
        if side == "pos":
            return self.pos
        raise ValueError(f"unknown electrode {side!r}")


def default_params() -> CellParams:
    """The 6 Ah graphite/NCA cell used throughout the examples and tests."""
    neg = ElectrodeParams(
        radius=1e-6, diffusivity=2e-16, volume_fraction=0.58, thickness=50e-6,
        c_max=17525.0, j0=0.75, sigma=100.0, eps_e=0.332, c0=2199.0, c100=11849.0,
    )
    pos = ElectrodeParams(
        radius=1e-6, diffusivity=3.7e-16, volume_fraction=0.5, thickness=36.4e-6,
        c_max=29461.0, j0=0.54, sigma=10.0, eps_e=0.33, c0=25699.0, c100=10324.0,
    )
    return CellParams(neg=neg, pos=pos)


# file key -> (electrode or None, attribute)
_ELECTRODE_KEYS = {
    "R": "radius",
    "D": "diffusivity",
    "eps": "volume_fraction",
    "d": "thickness",
    "cmax": "c_max",
    "j0": "j0",
    "sigma": "sigma",
    "eps_e": "eps_e",
    "c0": "c0",
    "c100": "c100",
}
_CELL_KEYS = ("A_cell", "F", "R", "T", "d_sep", "eps_e_sep", "kappa_e", "Q_cell", "Q")
# accepted for fidelity with the parameter table but not used by the models
_PASSIVE_KEYS = ("N_pos", "N_neg", "u_T")


def _parse_lines(text: str, source: str) -> dict[str, tuple[float, int]]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            number = float(val)
        except ValueError:
            raise FormatError(f"{source}:{lineno}: value for {key!r} is not a number") from None
        if key in values:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = (number, lineno)
    return values


def parse_params(text: str, source: str = "<params>", base: CellParams | None = None) -> CellParams:
    """Parse a parameter document.

    Keys mirror the parameter table, e.g. ``D_pos=3.7e-16`` or ``cmax_neg=17525``.
    Missing keys fall back to ``base`` (default :func:`default_params`); unknown keys
    are rejected.
    """
    base = base or default_params()
    values = _parse_lines(text, source)
    cell_kw = {}
    side_kw = {"neg": {}, "pos": {}}
    for key, (number, lineno) in values.items():
        if key in _PASSIVE_KEYS:
            continue
        if key in _CELL_KEYS:
            cell_kw[key] = number
            continue
        stem, _, side = key.rpartition("_")
        if side in side_kw and stem in _ELECTRODE_KEYS:
            side_kw[side][_ELECTRODE_KEYS[stem]] = number
            continue
        raise FormatError(f"{source}:{lineno}: unknown parameter {key!r}")
    try:
        neg = dataclasses.replace(base.neg, **side_kw["neg"])
        pos = dataclasses.replace(base.pos, **side_kw["pos"])
        passive = {k: v[0] for k, v in values.items() if k in _PASSIVE_KEYS}
        return dataclasses.replace(base, neg=neg, pos=pos, extra=passive, **cell_kw)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None


def load_params(path) -> CellParams:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read parameter file {path}: {exc}") from None
    return parse_params(text, source=str(path))


def dump_params(params: CellParams) -> str:
    lines = [f"{k}={getattr(params, k)!r}" for k in _CELL_KEYS]
    for side in ("neg", "pos"):
        el = params.electrode(side)
        for stem, attr in _ELECTRODE_KEYS.items():
            lines.append(f"{stem}_{side}={getattr(el, attr)!r}")
    return "\n".join(lines) + "\n"
