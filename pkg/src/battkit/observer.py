"""Polytopic observer design, certification and simulation.

The observer is

    xh' = A xh + B u + K + L (y - yh),    yh = h_cor(xh) + g(u)

(or ``h`` in place of ``h_cor`` for the uncorrected variant). Each OCV has
chord slopes inside ``[C_s,1, C_s,2]``, so the output difference
``h_cor(x) - h_cor(x')`` is a convex combination of four vertex rows applied
to ``x - x'``. A gain is certified when one quadratic Lyapunov function
works at all four vertices.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import CellModel, full_concentrations, overpotentials
from .diffusion import correct_concentrations
from .errors import DesignFailure, FormatError, InputError
from .integrate import rk4_step

# (pos, neg) slope choice of each vertex
VERTEX_ORDER = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class PolytopeVertices:
    C: np.ndarray  # (4, N) corrected output map
    C_tilde: np.ndarray  # (4, N) difference map h - h_cor
    bounds_neg: tuple
    bounds_pos: tuple

    @property
    def n(self) -> int:
        return self.C.shape[1]

    def digest(self) -> str:
        """Hash of the vertex rows, used to tie a design to its model."""
        h = hashlib.sha256()
        for arr in (self.C, self.C_tilde):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def build_vertices(model: CellModel, bounds_neg=None, bounds_pos=None) -> PolytopeVertices:
    """Vertex rows of the corrected and difference output maps.

    Slope bounds default to the extreme segment slopes of the model's OCV
    curves.
    """
    if bounds_neg is None:
        if model.ocv_neg is None:
            raise ValueError("no negative OCV curve and no bounds given")
        bounds_neg = model.ocv_neg.bounds
    if bounds_pos is None:
        if model.ocv_pos is None:
            raise ValueError("no positive OCV curve and no bounds given")
        bounds_pos = model.ocv_pos.bounds
    bounds_neg = tuple(float(b) for b in bounds_neg)
    bounds_pos = tuple(float(b) for b in bounds_pos)
    dpos = model.H_pos - model.H_pos_cor
    dneg = model.H_neg - model.H_neg_cor
    C, Ct = [], []
    for ip, ineg in VERTEX_ORDER:
        cp, cn = bounds_pos[ip], bounds_neg[ineg]
        C.append(cp * model.H_pos_cor - cn * model.H_neg_cor)
        Ct.append(cp * dpos - cn * dneg)
    C, Ct = np.array(C), np.array(Ct)
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(Ct))):
        raise ValueError("vertex rows are not finite")
    C.flags.writeable = False
    Ct.flags.writeable = False
    return PolytopeVertices(C=C, C_tilde=Ct, bounds_neg=bounds_neg, bounds_pos=bounds_pos)


# --- certificates -----------------------------------------------------------

def lmi_block(A, E, C, L, P, eps, mu_w, mu_v) -> np.ndarray:
    """Block matrix ``[[H + eps I, P E, -P L], [*, -mu_w, 0], [*, *, -mu_v]]``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    E = np.asarray(E, dtype=float).reshape(n, -1)
    L = np.asarray(L, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(L.shape[1], n)
    Acl = A - L @ C
    H = Acl.T @ P + P @ Acl
    nw, nv = E.shape[1], L.shape[1]
    M = np.zeros((n + nw + nv, n + nw + nv))
    M[:n, :n] = H + eps * np.eye(n)
    M[:n, n:n + nw] = P @ E
    M[:n, n + nw:] = -P @ L
    M[n:n + nw, n:n + nw] = -mu_w * np.eye(nw)
    M[n + nw:, n + nw:] = -mu_v * np.eye(nv)
    lower = np.tril_indices(n + nw + nv, -1)
    M[lower] = M.T[lower]
    return M


def _normalized_max_eig(M):
    # the congruence D M D keeps the inertia of M and removes the wild
    # scaling between state, disturbance and noise blocks
    d = np.sqrt(np.abs(np.diag(M)))
    d[d == 0] = 1.0
    S = M / np.outer(d, d)
    ev = np.linalg.eigvalsh(S)
    return float(ev[-1]), float(np.linalg.norm(S, 2))


@dataclass(frozen=True)
class LmiCertificate:
    max_eig: np.ndarray  # per vertex, after diagonal normalization
    scale: np.ndarray  # spectral norm of each normalized block
    raw_max_eig: np.ndarray  # per vertex, unscaled block
    raw_scale: np.ndarray
    p_min_eig: float
    tolerance: float

    @property
    def margins(self) -> np.ndarray:
        """Normalized max eigenvalue divided by its block scale."""
        return self.max_eig / self.scale

    @property
    def passed(self) -> bool:
        return bool(self.p_min_eig > 0 and np.all(self.max_eig <= -self.tolerance * self.scale))

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "max_eig": [float(v) for v in self.max_eig],
            "scale": [float(v) for v in self.scale],
            "raw_max_eig": [float(v) for v in self.raw_max_eig],
            "p_min_eig": self.p_min_eig,
            "tolerance": self.tolerance,
        }


def _check_symmetric(P, name="P"):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise InputError(f"{name} must be square")
    if not np.allclose(P, P.T, rtol=1e-10, atol=1e-14 * np.abs(P).max()):
        raise InputError(f"{name} is not symmetric")
    return 0.5 * (P + P.T)


def verify_lmi(A, E, vertices, L, P, eps, mu_w, mu_v, tolerance: float = 1e-12) -> LmiCertificate:
    """Evaluate the design inequality at every vertex.

    A vertex passes when the largest eigenvalue of its block matrix, after
    the symmetric scaling ``D M D`` with ``D = diag(|M_ii|^-1/2)``, is below
    ``-tolerance`` times the scaled block's norm. The scaling is a
    congruence, so it never changes the sign pattern of the eigenvalues; the
    unscaled eigenvalues are reported too.
    """
    P = _check_symmetric(P)
    rows = vertices.C if isinstance(vertices, PolytopeVertices) else np.atleast_2d(vertices)
    mx, sc, rmx, rsc = [], [], [], []
    for C in rows:
        M = lmi_block(A, E, C, L, P, eps, mu_w, mu_v)
        m, s = _normalized_max_eig(M)
        mx.append(m)
        sc.append(s)
        rmx.append(float(np.linalg.eigvalsh(M)[-1]))
        rsc.append(float(np.linalg.norm(M, 2)))
    return LmiCertificate(np.array(mx), np.array(sc), np.array(rmx), np.array(rsc),
                          float(np.linalg.eigvalsh(P)[0]), tolerance)


@dataclass(frozen=True)
class EmulationCertificate:
    max_eig: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.max_eig < 0))


def verify_emulation(P, Q_lyap, L, C_tilde) -> EmulationCertificate:
    """Check ``-Q + Ct_i^T L^T P + P L Ct_i < 0`` for every difference vertex."""
    P = _check_symmetric(P)
    Q = _check_symmetric(Q_lyap, "Q_lyap")
    if np.linalg.eigvalsh(Q)[0] <= 0:
        raise InputError("Q_lyap must be positive definite")
    L = np.asarray(L, dtype=float).reshape(-1, 1)
    out = []
    for Ct in np.atleast_2d(C_tilde):
        X = P @ L @ Ct.reshape(1, -1)
        out.append(float(np.linalg.eigvalsh(-Q + X + X.T)[-1]))
    return EmulationCertificate(np.array(out))


# --- design ---------------------------------------------------------------

@dataclass(frozen=True)
class ObserverDesign:
    L: np.ndarray
    P: np.ndarray
    eps: float
    mu_w: float
    mu_v: float
    E: np.ndarray
    certificate: LmiCertificate | None = None
    vertex_hash: str = ""
    info: dict = field(default_factory=dict, compare=False)

    def l2_gains(self) -> tuple[float, float, float]:
        """``(c, sqrt(mu_w/eps), sqrt(mu_v/eps))`` of the L2 estimate."""
        c = math.sqrt(float(np.linalg.eigvalsh(self.P)[-1]) / self.eps)
        return c, math.sqrt(self.mu_w / self.eps), math.sqrt(self.mu_v / self.eps)

    def scaled(self, factor: float) -> "ObserverDesign":
        """Same design with the gain multiplied by ``factor`` (no longer certified)."""
        return ObserverDesign(self.L * factor, self.P, self.eps, self.mu_w, self.mu_v, self.E,
                              None, self.vertex_hash, dict(self.info, gain_scale=factor))


def _solve_lmi(A, E, rows, decay, state_scale, gain_bound, margin, weights, zero_gain, solver,
               relax=False):
    import cvxpy as cp

    n = A.shape[0]
    s = state_scale
    Ez = (np.asarray(E, dtype=float) / s).reshape(n, 1)
    P = cp.Variable((n, n), symmetric=True)
    W = cp.Variable((n, 1))
    eps = cp.Variable()
    mw = cp.Variable()
    mv = cp.Variable()
    t = cp.Variable()
    I = np.eye(n)
    cons = [P >> I, eps >= decay, mw >= 0, mv >= 0]
    if zero_gain:
        cons.append(W == 0)
    else:
        cons.append(cp.norm(W) <= gain_bound)
    bound = t if relax else -margin
    for C in rows:
        Cz = (s * C).reshape(1, n)
        H = A.T @ P + P @ A - Cz.T @ W.T - W @ Cz
        blk = cp.bmat([[H + eps * I, P @ Ez, -W],
                       [Ez.T @ P, -cp.reshape(mw, (1, 1), order="C"), np.zeros((1, 1))],
                       [-W.T, np.zeros((1, 1)), -cp.reshape(mv, (1, 1), order="C")]])
        cons.append(0.5 * (blk + blk.T) << bound * np.eye(n + 2))
        if decay > 0:
            cons.append(0.5 * (H + H.T) + 2 * decay * P << bound * I)
    if relax:
        cons += [P << 1e6 * I, mw <= 1e6, mv <= 1e6, eps <= 1.0]
        obj = cp.Minimize(t)
    else:
        obj = cp.Minimize(weights[0] * mw + weights[1] * mv)
    prob = cp.Problem(obj, cons)
    try:
        with warnings.catch_warnings():
            # inaccurate solutions are caught by the status check and by verify_lmi
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            prob.solve(solver=solver)
    except cp.error.SolverError:
        return prob.status if prob.status else "solver_error", None
    if relax:
        return prob.status, t.value
    if prob.status not in ("optimal", "optimal_inaccurate") or P.value is None:
        return prob.status, None
    Pz = 0.5 * (P.value + P.value.T)
    Lz = np.linalg.solve(Pz, W.value).ravel()
    # back to concentration units: x = s z
    return prob.status, dict(L=s * Lz, P=Pz / s**2, eps=float(eps.value) / s**2,
                             mu_w=float(mw.value), mu_v=float(mv.value))


def design_gain(A, E, vertices: PolytopeVertices, weights=(1.0, 1.0), *, decay: float = 1e-3,
                state_scale: float = 1e4, gain_bound: float = 100.0, margin: float = 1e-6,
                zero_gain: bool = False, solver: str = "CLARABEL") -> ObserverDesign:
    """Find ``(L, P, eps, mu_w, mu_v)`` satisfying the vertex inequalities.

    The problem is solved in the variable ``W = P L`` on the scaled state
    ``z = x / state_scale`` (a congruence of the original inequality), with

    * every vertex block below ``-margin`` times the identity,
    * ``H_i + 2 decay P <= 0`` so each vertex decays at rate ``decay`` (1/s),
    * ``P >= I`` and ``|W| <= gain_bound`` to fix the scale and keep the
      observer from becoming needlessly stiff,

    while minimizing ``weights[0] mu_w + weights[1] mu_v``.

    Raises
    ------
    DesignFailure
        When the solver finds no feasible point; ``best_margin`` then holds
        the smallest achievable upper bound on the vertex blocks.
    """
    A = np.asarray(A, dtype=float)
    rows = vertices.C
    status, sol = _solve_lmi(A, E, rows, decay, state_scale, gain_bound, margin, weights, zero_gain, solver)
    if sol is None:
        _, best = _solve_lmi(A, E, rows, decay, state_scale, gain_bound, margin, weights, zero_gain,
                             solver, relax=True)
        best = None if best is None else float(best)
        raise DesignFailure(f"observer inequalities infeasible (solver status {status}, "
                            f"best block bound {best})", best_margin=best)
    cert = verify_lmi(A, E, vertices, sol["L"], sol["P"], sol["eps"], sol["mu_w"], sol["mu_v"])
    if not cert.passed:
        raise DesignFailure(f"solver returned a point that fails verification (status {status})",
                            best_margin=float(np.max(cert.margins)))
    info = dict(status=status, decay=decay, state_scale=state_scale, gain_bound=gain_bound,
                margin=margin, solver=solver)
    return ObserverDesign(L=sol["L"], P=sol["P"], eps=sol["eps"], mu_w=sol["mu_w"], mu_v=sol["mu_v"],
                          E=np.array(E, dtype=float), certificate=cert, vertex_hash=vertices.digest(),
                          info=info)


def printed_design():
    """Gain and certificate data printed for the 7-state configuration.

    Returns ``(L, P, eps, mu_w, mu_v)``; ``P`` is given to 3 significant
    digits only.
    """
    L = 1e4 * np.array([3.2387, 3.5432, 3.3896, -5.0388, -5.7421, -5.3310, -5.433750])
    P = 1e-9 * np.array([
        [0.0137, 0.0258, 0.0329, 0.0066, 0.0107, 0.0135, 0.0149],
        [0.0258, 0.0550, 0.0797, 0.0127, 0.0220, 0.0304, 0.0361],
        [0.0329, 0.0797, 0.1485, 0.0179, 0.0312, 0.0474, 0.0681],
        [0.0066, 0.0127, 0.0179, 0.0136, 0.0095, 0.0039, -0.0031],
        [0.0107, 0.0220, 0.0312, 0.0095, 0.0117, 0.0115, 0.0077],
        [0.0135, 0.0304, 0.0474, 0.0039, 0.0115, 0.0190, 0.0231],
        [0.0149, 0.0361, 0.0681, -0.0031, 0.0077, 0.0231, 0.0471],
    ])
    return L, P, 1.17e-22, 1.0486, 7.9784


# --- export / import ----------------------------------------------------------

DESIGN_FORMAT = "battkit-observer-design/1"


def export_design(design: ObserverDesign, path=None) -> str:
    doc = {
        "format": DESIGN_FORMAT,
        "n": int(len(design.L)),
        "L": [repr(float(v)) for v in design.L],
        "P": [repr(float(v)) for v in np.asarray(design.P).ravel()],
        "eps": repr(float(design.eps)),
        "mu_w": repr(float(design.mu_w)),
        "mu_v": repr(float(design.mu_v)),
        "E": [repr(float(v)) for v in np.asarray(design.E).ravel()],
        "vertex_hash": design.vertex_hash,
        "certificate": design.certificate.summary() if design.certificate else None,
        "info": {k: design.info[k] for k in sorted(design.info)},
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def import_design(text: str, A, vertices: PolytopeVertices, source: str = "<design>") -> ObserverDesign:
    """Parse an exported design and re-verify it against ``A`` and ``vertices``."""
    try:
        doc = json.loads(text)
        if doc.get("format") != DESIGN_FORMAT:
            raise FormatError(f"{source}: unknown design format {doc.get('format')!r}")
        n = int(doc["n"])
        L = np.array([float(v) for v in doc["L"]])
        P = np.array([float(v) for v in doc["P"]]).reshape(n, n)
        E = np.array([float(v) for v in doc["E"]])
        eps, mu_w, mu_v = (float(doc[k]) for k in ("eps", "mu_w", "mu_v"))
        vhash = doc.get("vertex_hash", "")
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: malformed design document ({exc})") from None
    if vhash != vertices.digest():
        raise DesignFailure(f"{source}: design was made for different vertices")
    cert = verify_lmi(A, E, vertices, L, P, eps, mu_w, mu_v)
    if not cert.passed:
        raise DesignFailure(f"{source}: imported design fails verification",
                            best_margin=float(np.max(cert.margins)))
    return ObserverDesign(L=L, P=P, eps=eps, mu_w=mu_w, mu_v=mu_v, E=E, certificate=cert,
                          vertex_hash=vhash, info=dict(doc.get("info") or {}))


# --- simulation ---------------------------------------------------------------

@dataclass
class ObserverRun:
    t: np.ndarray
    x_hat: np.ndarray  # (len(t), N) or (len(t), N, batch)
    y_hat: np.ndarray  # (len(t),) or (len(t), batch), output at the recorded times
    substeps: int
    error: np.ndarray | None = None  # x - x_hat when the true state was supplied


def stable_substeps(A, L, rows, dt: float, limit: float = 2.5) -> int:
    """RK4 sub-steps so that ``dt/n`` times the fastest closed-loop rate stays below ``limit``."""
    L = np.asarray(L, dtype=float)
    cols = L.reshape(L.shape[0], -1).T
    rho = 0.0
    for l in cols:
        for C in np.atleast_2d(rows):
            rho = max(rho, float(np.max(np.abs(np.linalg.eigvals(A - np.outer(l, C))))))
    return max(1, int(math.ceil(dt * rho / limit)))


def simulate_observer(model: CellModel, L, u, y, x0_hat, dt: float, corrected: bool = True, *,
                      substeps: int | None = None, record_every: int = 1, x_true=None,
                      vertices: PolytopeVertices | None = None) -> ObserverRun:
    """Run the observer on sampled current and voltage.

    ``u[k]`` and ``y[k]`` are held on ``[k dt, (k+1) dt)``. Gains and initial
    estimates may carry a batch axis (``(N, batch)``) to run many observers
    at once; a single gain is broadcast over the batch.
    """
    if not dt > 0:
        raise InputError("dt must be positive")
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    for name, arr in (("current", u), ("voltage", y)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise InputError(f"non-finite {name} sample at index {bad[0]}")
    steps = min(len(u), len(y))
    xh = np.array(x0_hat, dtype=float)
    batch = xh.ndim == 2
    L = np.asarray(L, dtype=float)
    if L.ndim == 1 and batch:
        L = L[:, None]
    if L.ndim == 2 and not batch:
        xh = np.repeat(xh[:, None], L.shape[1], axis=1)
        batch = True
    if substeps is None:
        rows = (vertices or build_vertices(model)).C
        substeps = stable_substeps(model.A, L, rows, dt)
    A = model.A
    shape = (-1, 1) if batch else (-1,)
    B = model.B.reshape(shape)
    K = model.offset.reshape(shape)
    Hn, Hp = (model.H_neg_cor, model.H_pos_cor) if corrected else (model.H_neg, model.H_pos)
    k1 = model.K1 if corrected else 0.0
    ocv_n, ocv_p = model.ocv_neg, model.ocv_pos

    def h(x):
        return ocv_p(Hp @ x) - ocv_n(Hn @ x + k1)

    def rhs(t, x, uy):
        uk, innov = uy
        return A @ x + B * uk + K + L * (innov - h(x))

    keep = list(range(0, steps + 1, record_every))
    if keep[-1] != steps:
        keep.append(steps)
    xs = np.empty((len(keep),) + xh.shape)
    ys = np.empty((len(keep),) + xh.shape[1:])
    hs = dt / substeps
    slot = 0
    g = overpotentials(u[:steps], model.params)
    for k in range(steps + 1):
        if k:
            # y - g(u) is constant over the step
            drive = (u[k - 1], y[k - 1] - g[k - 1])
            t0 = (k - 1) * dt
            for j in range(substeps):
                xh = rk4_step(rhs, t0 + j * hs, xh, hs, drive)
            if not np.all(np.isfinite(xh)):
                raise InputError(f"observer diverged at step {k}")
        if slot < len(keep) and keep[slot] == k:
            xs[slot] = xh
            gk = g[min(k, steps - 1)] if steps else 0.0
            ys[slot] = h(xh) + gk
            slot += 1
    t = np.asarray(keep, dtype=float) * dt
    err = None
    if x_true is not None:
        xt = np.asarray(x_true, dtype=float)
        if xt.shape[0] == steps + 1:
            xt = xt[keep]
        err = (xt[..., None] - xs) if (batch and xt.ndim == 2) else xt - xs
    return ObserverRun(t=t, x_hat=xs, y_hat=ys, substeps=substeps, error=err)


def correct_estimates(x_hat, model: CellModel):
    """Corrected shell concentrations ``(c_neg_cor, c_pos_cor)`` of an estimate.

    ``x_hat`` holds the reduced state on axis 0; the centre shell is
    recovered first, then each electrode is corrected with the model's own
    coefficients.
    """
    c_neg, c_pos = full_concentrations(x_hat, model)
    return (correct_concentrations(c_neg, model.K_neg, model.neg.grid),
            correct_concentrations(c_pos, model.K_pos, model.pos.grid))


@dataclass
class CoupledRun:
    t: np.ndarray
    x: np.ndarray  # (len(t), N) plant
    x_hat: np.ndarray  # (len(t), N) or (len(t), N, batch)
    substeps: int

    @property
    def error(self) -> np.ndarray:
        return (self.x[..., None] - self.x_hat) if self.x_hat.ndim == 3 else self.x - self.x_hat


def simulate_coupled(model: CellModel, L, u, x0, x0_hat, dt: float, corrected: bool = True, *,
                     w=None, v=None, substeps: int | None = None, record_every: int = 1,
                     vertices: PolytopeVertices | None = None) -> CoupledRun:
    """Integrate the reduced plant and the observer together.

    The observer sees ``y = h_cor(x) + g(u) + v`` evaluated at every RK stage,
    so with ``w = v = 0`` the estimation error follows its own dynamics
    exactly. ``w`` (entering through ``E``) and ``v`` are held per step like
    ``u``. The plant always uses the corrected output map; ``corrected``
    selects the observer's map.
    """
    u = np.asarray(u, dtype=float)
    steps = len(u)
    w = np.zeros(steps) if w is None else np.asarray(w, dtype=float)
    v = np.zeros(steps) if v is None else np.asarray(v, dtype=float)
    for name, arr in (("current", u), ("disturbance", w), ("noise", v)):
        if len(arr) < steps:
            raise InputError(f"{name} has {len(arr)} samples, need {steps}")
        bad = np.flatnonzero(~np.isfinite(arr[:steps]))
        if bad.size:
            raise InputError(f"non-finite {name} sample at index {bad[0]}")
    L = np.asarray(L, dtype=float)
    xh0 = np.array(x0_hat, dtype=float)
    if L.ndim == 2 and xh0.ndim == 1:
        xh0 = np.repeat(xh0[:, None], L.shape[1], axis=1)
    batch = xh0.ndim == 2
    if batch and L.ndim == 1:
        L = L[:, None]
    if substeps is None:
        rows = (vertices or build_vertices(model)).C
        substeps = stable_substeps(model.A, L, rows, dt)
    A = model.A
    plant_drive = lambda uk, wk: model.B * uk + model.offset + model.E * wk
    obs_drive = lambda uk: model.B * uk + model.offset
    ocv_n, ocv_p = model.ocv_neg, model.ocv_pos
    Gn, Gp = model.H_neg_cor, model.H_pos_cor
    same_map = corrected
    Hn, Hp = model.H_neg, model.H_pos

    # column 0 is the plant, the rest are observers
    def rhs(t, Z, drive):
        uk, wk, vk = drive
        D = A @ Z
        D[:, 0] += plant_drive(uk, wk)
        D[:, 1:] += obs_drive(uk)[:, None]
        hc = ocv_p(Gp @ Z) - ocv_n(Gn @ Z + model.K1)
        h_hat = hc[1:] if same_map else ocv_p(Hp @ Z[:, 1:]) - ocv_n(Hn @ Z[:, 1:])
        # g(u) cancels between y and y_hat
        D[:, 1:] += L2 * (hc[0] + vk - h_hat)
        return D

    xh2 = xh0 if batch else xh0[:, None]
    L2 = L if batch else L[:, None]
    Z = np.column_stack((np.asarray(x0, dtype=float), xh2))
    keep = list(range(0, steps + 1, record_every))
    if keep[-1] != steps:
        keep.append(steps)
    zs = np.empty((len(keep),) + Z.shape)
    hs = dt / substeps
    slot = 0
    for k in range(steps + 1):
        if k:
            drive = (u[k - 1], w[k - 1], v[k - 1])
            for j in range(substeps):
                Z = rk4_step(rhs, (k - 1) * dt + j * hs, Z, hs, drive)
            if not np.all(np.isfinite(Z)):
                raise InputError(f"coupled simulation diverged at step {k}")
        if slot < len(keep) and keep[slot] == k:
            zs[slot] = Z
            slot += 1
    x_hat = zs[:, :, 1:] if batch else zs[:, :, 1]
    t = np.asarray(keep, dtype=float) * dt
    return CoupledRun(t=t, x=zs[:, :, 0], x_hat=x_hat, substeps=substeps)
