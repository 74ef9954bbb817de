"""Full-cell state-space model built from two shell models.

The state is ``x = (c_neg,2..c_neg,N_neg, c_pos,1..c_pos,N_pos)``. The centre
shell of the negative electrode is removed through lithium conservation

    Q = alpha_neg sum_i c_neg,i V_i^neg + alpha_pos sum_i c_pos,i V_i^pos

so it is always recovered as an affine function of ``x``. The model reads

    x' = A x + B u + K + E w
    y  = OCV_pos(H_pos,cor x) - OCV_neg(H_neg,cor x + K_1) + g(u) + v

with ``u`` the cell current, positive in discharge.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .diffusion import DiffusionSystem, electrode_system, mean_concentration
from .errors import AssemblyError
from .ocv import OcvCurve, canned_ocv

SIDES = ("neg", "pos")


def m_from_current(current, side: str, params):
    """Volumetric insertion rate (mol m^-3 s^-1) driven by the cell current."""
    el = params.electrode(side)
    scale = 1.0 / (el.volume_fraction * params.A_cell * el.thickness * params.F)
    sign = -1.0 if side == "neg" else 1.0
    return sign * scale * np.asarray(current, dtype=float)


def alpha(side: str, params, particle_volume: float) -> float:
    """Conversion from ``sum_i c_i V_i`` to Ah for one electrode."""
    el = params.electrode(side)
    return params.F / 3600.0 * el.volume_fraction * params.A_cell * el.thickness / particle_volume


@dataclass(frozen=True)
class CellModel:
    params: object
    neg: DiffusionSystem
    pos: DiffusionSystem
    ocv_neg: OcvCurve | None
    ocv_pos: OcvCurve | None
    K_neg: np.ndarray  # correction coefficients actually used in the output map
    K_pos: np.ndarray
    A: np.ndarray
    B: np.ndarray
    offset: np.ndarray  # constant drift K
    E: np.ndarray
    H_pos_cor: np.ndarray
    H_neg_cor: np.ndarray
    K1: float
    H_pos: np.ndarray
    H_neg: np.ndarray
    Q: float  # Ah
    Kbar: float
    alpha_neg: float
    alpha_pos: float
    KI_neg: float
    KI_pos: float
    center_row: np.ndarray  # c_neg,1 = Kbar + center_row @ x

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> np.ndarray:
        return self.offset

    @property
    def n_neg(self) -> int:
        return self.neg.n

    @property
    def n_pos(self) -> int:
        return self.pos.n

    @property
    def i_neg_surface(self) -> int:
        """Index of ``c_neg,N_neg`` in the reduced state."""
        return self.neg.n - 2

    def electrode(self, side: str) -> DiffusionSystem:
        if side not in SIDES:
            raise ValueError(f"unknown electrode {side!r}")
        return self.neg if side == "neg" else self.pos

    def corrections(self, side: str) -> np.ndarray:
        return self.K_neg if side == "neg" else self.K_pos

    def rhs(self, x, u):
        """State derivative ``A x + B u + K`` (``x`` may carry trailing batch axes)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = (-1,) + (1,) * (x.ndim - 1)
        return self.A @ x + self.B.reshape(shape) * u + self.offset.reshape(shape)


def _readonly(*arrays):
    for a in arrays:
        a.flags.writeable = False


def assemble_cell(neg: DiffusionSystem, pos: DiffusionSystem, params, ocv_neg: OcvCurve | None = None,
                  ocv_pos: OcvCurve | None = None, *, Q: float | None = None, K_neg=None,
                  K_pos=None) -> CellModel:
    """Assemble the reduced full-cell model.

    Parameters
    ----------
    neg, pos : DiffusionSystem
        Shell models of the two electrodes; ``neg`` needs at least 2 shells.
    params : CellParams
    ocv_neg, ocv_pos : OcvCurve, optional
        Needed only for voltage evaluation.
    Q : float, optional
        Lithium quantity in Ah, defaults to ``params.Q``.
    K_neg, K_pos : array_like, optional
        Override the correction coefficients of the output map (all ones
        turns the correction off).

    Notes
    -----
    The centre shell is eliminated by substituting its affine expression into
    the stacked electrode dynamics, which is exact for any grid. On
    uniform-volume grids the result coincides entry by entry with the usual
    closed-form blocks written with ``mu_1^neg``.
    """
    if neg.n < 2:
        raise AssemblyError("the negative electrode needs at least 2 shells")
    if pos.n < 1:
        raise AssemblyError("the positive electrode needs at least 1 shell")
    K_neg = np.array(neg.K if K_neg is None else K_neg, dtype=float)
    K_pos = np.array(pos.K if K_pos is None else K_pos, dtype=float)
    if K_neg.shape != (neg.n,) or K_pos.shape != (pos.n,):
        raise AssemblyError(f"correction vectors must have {neg.n} and {pos.n} entries")
    Q = float(params.Q if Q is None else Q)

    v_neg, v_pos = neg.grid.volumes, pos.grid.volumes
    Vs_neg, Vs_pos = neg.grid.particle_volume, pos.grid.particle_volume
    a_neg = alpha("neg", params, Vs_neg)
    a_pos = alpha("pos", params, Vs_pos)
    kbar = Q / (a_neg * v_neg[0])
    n = neg.n - 1 + pos.n

    # c_neg,1 = kbar + g @ x
    g = np.concatenate((-v_neg[1:] / v_neg[0], -a_pos * v_pos / (a_neg * v_neg[0])))

    F = scipy.linalg.block_diag(neg.A, pos.A)
    A = F[1:, 1:] + np.outer(F[1:, 0], g)
    offset = F[1:, 0] * kbar

    # B_s m_s written per ampere of cell current
    KI_neg = Vs_neg / v_neg[-1] * abs(float(m_from_current(1.0, "neg", params)))
    KI_pos = Vs_pos / v_pos[-1] * float(m_from_current(1.0, "pos", params))
    B = np.zeros(n)
    B[neg.n - 2] = -KI_neg
    B[-1] = KI_pos

    cmax_neg, cmax_pos = params.neg.c_max, params.pos.c_max
    # full-state rows (c_neg,1..N, c_pos,1..N) of the surface stoichiometries
    mean_neg = np.concatenate((v_neg / Vs_neg, np.zeros(pos.n)))
    mean_pos = np.concatenate((np.zeros(neg.n), v_pos / Vs_pos))
    surf_neg = np.zeros(neg.n + pos.n)
    surf_neg[neg.n - 1] = 1.0
    surf_pos = np.zeros(neg.n + pos.n)
    surf_pos[-1] = 1.0

    def substitute(row):
        # full row -> (reduced row, constant)
        return row[1:] + row[0] * g, row[0] * kbar

    zneg_full = ((1 - K_neg[-1]) * mean_neg + K_neg[-1] * surf_neg) / cmax_neg
    zpos_full = ((1 - K_pos[-1]) * mean_pos + K_pos[-1] * surf_pos) / cmax_pos
    H_neg_cor, K1 = substitute(zneg_full)
    H_pos_cor, _ = substitute(zpos_full)
    H_neg, _ = substitute(surf_neg / cmax_neg)
    H_pos, _ = substitute(surf_pos / cmax_pos)

    E = B.copy()
    _readonly(A, B, offset, E, H_pos_cor, H_neg_cor, H_pos, H_neg, g, K_neg, K_pos)
    return CellModel(params=params, neg=neg, pos=pos, ocv_neg=ocv_neg, ocv_pos=ocv_pos,
                     K_neg=K_neg, K_pos=K_pos, A=A, B=B, offset=offset, E=E,
                     H_pos_cor=H_pos_cor, H_neg_cor=H_neg_cor, K1=float(K1), H_pos=H_pos, H_neg=H_neg,
                     Q=Q, Kbar=float(kbar), alpha_neg=float(a_neg), alpha_pos=float(a_pos),
                     KI_neg=float(KI_neg), KI_pos=float(KI_pos), center_row=g)


def cell_model(params, n_neg: int = 4, n_pos: int = 4, scheme: str = "uniform-volume",
               ocv_neg: OcvCurve | None = None, ocv_pos: OcvCurve | None = None, **kw) -> CellModel:
    """Build both electrodes and assemble; OCV curves default to the canned tables."""
    neg = electrode_system(params.neg, n_neg, scheme)
    pos = electrode_system(params.pos, n_pos, scheme)
    return assemble_cell(neg, pos, params, ocv_neg or canned_ocv("neg"), ocv_pos or canned_ocv("pos"), **kw)


def recover_center(x, model: CellModel):
    """Centre concentration ``c_neg,1`` implied by lithium conservation."""
    x = np.asarray(x, dtype=float)
    return model.Kbar + np.tensordot(model.center_row, x, axes=(0, 0))


def full_concentrations(x, model: CellModel) -> tuple[np.ndarray, np.ndarray]:
    """Split a reduced state into full ``(c_neg, c_pos)`` shell vectors (shells on axis 0)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != model.n:
        raise ValueError(f"expected a state of length {model.n}, got {x.shape[0]}")
    c1 = recover_center(x, model)
    nn = model.n_neg - 1
    c_neg = np.concatenate((np.asarray(c1)[None], x[:nn]), axis=0)
    return c_neg, x[nn:]


def reduce_state(c_neg, c_pos) -> np.ndarray:
    """Drop the centre shell of the negative electrode."""
    return np.concatenate((np.asarray(c_neg, dtype=float)[1:], np.asarray(c_pos, dtype=float)), axis=0)


def lithium_quantity(c_neg, c_pos, model: CellModel):
    """Lithium quantity in Ah of full concentration vectors."""
    q_neg = model.alpha_neg * np.tensordot(model.neg.grid.volumes, np.asarray(c_neg, dtype=float), axes=(0, 0))
    q_pos = model.alpha_pos * np.tensordot(model.pos.grid.volumes, np.asarray(c_pos, dtype=float), axes=(0, 0))
    return q_neg + q_pos


def overpotentials(u, params):
    """Lumped current-dependent voltage term ``g(u)`` (V), odd in ``u``."""
    u = np.asarray(u, dtype=float)
    rtf = params.R * params.T / params.F
    kappa_sep = params.kappa_e * params.eps_e_sep**1.5
    out = -params.d_sep / kappa_sep * u / params.A_cell
    for el in (params.neg, params.pos):
        kin = el.radius / (6.0 * el.j0 * el.volume_fraction * params.A_cell * el.thickness)
        eta = 2.0 * rtf * np.arcsinh(kin * u)
        kappa = params.kappa_e * el.eps_e**1.5
        ohm = (el.thickness / (el.sigma * el.volume_fraction) + el.thickness / kappa) * u / (2.0 * params.A_cell)
        out = out - eta - ohm
    return float(out) if out.ndim == 0 else out


def stoichiometries(x, model: CellModel, corrected: bool = True):
    """Surface stoichiometries ``(zeta_neg, zeta_pos)`` feeding the OCVs."""
    x = np.asarray(x, dtype=float)
    if corrected:
        return model.H_neg_cor @ x + model.K1, model.H_pos_cor @ x
    return model.H_neg @ x, model.H_pos @ x


def ocv_difference(x, model: CellModel, corrected: bool = True):
    """``h_cor(x)`` or ``h(x)``: the OCV part of the cell voltage."""
    if model.ocv_neg is None or model.ocv_pos is None:
        raise ValueError("the model carries no OCV curves")
    z_neg, z_pos = stoichiometries(x, model, corrected)
    return model.ocv_pos(z_pos) - model.ocv_neg(z_neg)


def output_voltage(x, u, model: CellModel, corrected: bool = True):
    """Cell voltage for state(s) ``x`` (axis 0) and current ``u``."""
    return ocv_difference(x, model, corrected) + overpotentials(u, model.params)


def soc_from_mean(c_mean, electrode) -> np.ndarray:
    """Percent SOC of one electrode from its mean concentration."""
    return 100.0 * (np.asarray(c_mean, dtype=float) - electrode.c0) / (electrode.c100 - electrode.c0)


SOC_TOLERANCE = 0.5  # percent points


def soc(x, model: CellModel, side: str = "pos", check: bool = False):
    """Percent SOC from a reduced state.

    With ``check`` the two electrodes are compared and a warning is issued if
    they disagree by more than ``SOC_TOLERANCE`` points.
    """
    c_neg, c_pos = full_concentrations(x, model)
    s_neg = soc_from_mean(mean_concentration(c_neg, model.neg.grid), model.params.neg)
    s_pos = soc_from_mean(mean_concentration(c_pos, model.pos.grid), model.params.pos)
    if check:
        gap = float(np.max(np.abs(s_pos - s_neg)))
        if gap > SOC_TOLERANCE:
            warnings.warn(f"electrode SOCs disagree by {gap:.3f} points", RuntimeWarning, stacklevel=2)
    if side == "pos":
        return s_pos
    if side == "neg":
        return s_neg
    if side == "both":
        return s_neg, s_pos
    raise ValueError(f"unknown side {side!r}")


def equilibrium_state(model: CellModel, soc_percent: float) -> np.ndarray:
    """Uniform rest state at a given SOC.

    The positive electrode follows its SOC calibration; the negative one takes
    whatever uniform value conserves ``Q``.
    """
    p = model.params.pos
    c_pos = p.c0 + soc_percent / 100.0 * (p.c100 - p.c0)
    g_neg, g_pos = model.neg.grid, model.pos.grid
    c_neg = (model.Q - model.alpha_pos * g_pos.particle_volume * c_pos) / (model.alpha_neg * g_neg.particle_volume)
    return reduce_state(np.full(g_neg.n, c_neg), np.full(g_pos.n, c_pos))
