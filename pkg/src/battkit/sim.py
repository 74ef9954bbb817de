"""Experiment engine: current profiles, sensor bias, metrics and campaigns.

Everything runs on a uniform grid ``t_k = k dt`` with inputs held over each
step. The "truth" is either the reduced model itself or a pair of fine shell
models (one per electrode) whose surface values drive the OCVs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cell import (CellModel, equilibrium_state, full_concentrations, m_from_current, output_voltage,
                   overpotentials, stoichiometries)
from .diffusion import correct_concentrations, mean_concentration
from .errors import FormatError, InputError
from .integrate import integrate, rk4_step  # noqa: F401  (re-exported)
from .observer import ObserverDesign, build_vertices, simulate_observer
from .reference import solve_reference

CURRENT_HEADER = ("time_s", "current_A")
VOLTAGE_HEADER = ("time_s", "voltage_V")


# --- current profiles ---------------------------------------------------------

@dataclass(frozen=True)
class CurrentProfile:
    """Piecewise-constant current: ``current[i]`` holds on ``[t[i], t[i+1])``.

    The last sample holds until ``horizon``.
    """

    kind: str
    t: np.ndarray
    current: np.ndarray
    horizon: float
    seed: int | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or len(t) != len(self.current) or len(t) == 0:
            raise InputError("profile needs matching, non-empty time and current arrays")
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise InputError(f"profile times not strictly increasing at sample {bad[0] + 1}")
        if not self.horizon > t[0]:
            raise InputError("horizon must exceed the first sample time")

    def __call__(self, t):
        """Zero-order-hold value at time(s) ``t``."""
        idx = np.searchsorted(self.t, np.asarray(t, dtype=float), side="right") - 1
        return np.asarray(self.current)[np.clip(idx, 0, len(self.t) - 1)]

    def sample(self, dt: float) -> np.ndarray:
        """One value per step of length ``dt`` over the horizon (value at the step start)."""
        steps = int(round((self.horizon - self.t[0]) / dt))
        return np.asarray(self(self.t[0] + np.arange(steps) * dt), dtype=float)

    def charge_ah(self) -> float:
        """Net discharged charge over the horizon in Ah."""
        edges = np.append(self.t, self.horizon)
        return float(np.sum(np.asarray(self.current) * np.diff(edges)) / 3600.0)

    def scaled(self, gain: float) -> "CurrentProfile":
        return CurrentProfile(self.kind, self.t, np.asarray(self.current) * gain, self.horizon, self.seed)


def constant_profile(current: float, horizon: float) -> CurrentProfile:
    return CurrentProfile("constant", np.array([0.0]), np.array([float(current)]), float(horizon))


def synthetic_phev(seed: int = 0, horizon: float = 4500.0, scale: float = 1.0, q_cell: float = 6.0,
                   active: float | None = None) -> CurrentProfile:
    """Seeded pulse train shaped like a plug-in hybrid duty cycle.

    Pulses last 1 to 10 s with amplitudes clipped to ``+-2C``. The first half
    of the active period is discharge dominated, the second half charge
    dominated, and the rest of the horizon (beyond ``active``, by default
    80 % of it) is at rest.
    """
    if not horizon > 0:
        raise InputError("horizon must be positive")
    rng = np.random.default_rng(seed)
    active = 0.8 * horizon if active is None else float(active)
    half = active / 2
    c_rate = q_cell  # 1C in A
    t, i, now = [], [], 0.0
    while now < active:
        dwell = float(rng.integers(1, 11))
        dwell = min(dwell, (half if now < half else active) - now)
        lo, hi = (-0.7, 2.0) if now < half else (-2.0, 0.7)
        level = rng.uniform(lo, hi) * c_rate
        # occasional short rests, as in real drive cycles
        if rng.random() < 0.08:
            level = 0.0
        t.append(now)
        i.append(float(np.clip(scale * level, -2 * c_rate, 2 * c_rate)))
        now += dwell
    t.append(active)
    i.append(0.0)
    return CurrentProfile("synthetic-phev", np.array(t), np.array(i), float(horizon), seed)


def _read_two_columns(text: str, header, source: str):
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows or tuple(c.strip() for c in rows[0]) != header:
        raise FormatError(f"{source}:1: expected header {','.join(header)}")
    t, val = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"{source}:{lineno}: expected 2 columns, got {len(row)}")
        try:
            a, b = float(row[0]), float(row[1])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: non-numeric value") from None
        if not (math.isfinite(a) and math.isfinite(b)):
            raise FormatError(f"{source}:{lineno}: non-finite value")
        if t and a <= t[-1]:
            raise FormatError(f"{source}:{lineno}: time not strictly increasing")
        t.append(a)
        val.append(b)
    if len(t) < 2:
        raise FormatError(f"{source}: need at least 2 samples")
    return np.array(t), np.array(val)


def parse_current_csv(text: str, source: str = "<current>", gain: float = 1.0) -> CurrentProfile:
    """Current samples ``time_s,current_A``; ``gain`` rescales the current (sensor correction)."""
    t, i = _read_two_columns(text, CURRENT_HEADER, source)
    # the last sample closes the record: hold the previous value up to it
    return CurrentProfile("csv", t[:-1], i[:-1] * gain, float(t[-1]))


def parse_voltage_csv(text: str, source: str = "<voltage>"):
    return _read_two_columns(text, VOLTAGE_HEADER, source)


def read_current_csv(path, gain: float = 1.0) -> CurrentProfile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read current file {path}: {exc}") from None
    return parse_current_csv(text, str(path), gain)


# --- sensor bias --------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    current_amplitude: float = 3.0  # A
    current_omega: float = 2000 * math.pi  # rad/s
    voltage_amplitude: float = 0.05  # V
    voltage_omega: float = 200 * math.pi  # rad/s
    current_enabled: bool = True
    voltage_enabled: bool = True

    def __post_init__(self):
        if self.current_amplitude < 0 or self.voltage_amplitude < 0:
            raise InputError("bias amplitudes must be non-negative")


NO_NOISE = NoiseSpec(0.0, 2000 * math.pi, 0.0, 200 * math.pi, False, False)


def inject_bias(t, current, voltage, spec: NoiseSpec = NoiseSpec()):
    """Sensor-biased current and voltage sampled at times ``t``.

    The default angular frequencies are integer multiples of ``2 pi / 0.1``,
    so on a 0.1 s grid both sines are sampled at their zeros; pick other
    frequencies (or grids) to see them.
    """
    t = np.asarray(t, dtype=float)
    i_b = np.asarray(current, dtype=float)
    y_b = None if voltage is None else np.asarray(voltage, dtype=float)
    if spec.current_enabled and spec.current_amplitude:
        i_b = i_b + spec.current_amplitude * np.sin(spec.current_omega * t)
    if y_b is not None and spec.voltage_enabled and spec.voltage_amplitude:
        y_b = y_b + spec.voltage_amplitude * np.sin(spec.voltage_omega * t)
    return i_b, y_b


# --- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float

    def as_dict(self) -> dict:
        return {"MAE": self.mae, "RMSE": self.rmse}


def metrics(trace, t=None, window=None) -> Metrics:
    """MAE and RMSE of ``trace`` over samples with ``window[0] <= t <= window[1]``."""
    e = np.asarray(trace, dtype=float)
    if window is not None:
        if t is None:
            raise InputError("a window needs the time grid")
        t = np.asarray(t, dtype=float)
        e = e[(t >= window[0]) & (t <= window[1])]
    if e.size == 0:
        raise InputError(f"no samples in window {window}")
    a = np.abs(e)
    top = float(a.max())
    if top == 0.0 or not np.isfinite(top):
        return Metrics(float(np.mean(a)), top)
    # scaling by the peak keeps squares from under- or overflowing
    return Metrics(float(np.mean(a)), top * float(np.sqrt(np.mean((a / top) ** 2))))


def normalized_concentration_error(c_ref, c_hat):
    """``100 |c_ref - c_hat| / |c_ref|`` with norms taken over the last axis."""
    c_ref = np.asarray(c_ref, dtype=float)
    c_hat = np.asarray(c_hat, dtype=float)
    den = np.linalg.norm(np.atleast_1d(c_ref), axis=-1)
    if np.any(den == 0):
        raise InputError("reference concentration vector has zero norm")
    out = 100.0 * np.linalg.norm(np.atleast_1d(c_ref - c_hat), axis=-1) / den
    return float(out) if np.ndim(out) == 0 else out


def coulomb_soc(profile: CurrentProfile, q_cell: float, soc0: float = 100.0, t=None, raw: bool = False):
    """SOC by current integration.

    Percent mode returns ``soc0 - 100/(3600 Q_cell) int I``; ``raw`` returns
    the bare fraction ``-(1/(3600 Q_cell)) int I`` without initial value.
    Evaluated at the profile's own sample times plus the horizon unless ``t``
    is given.
    """
    if not q_cell > 0:
        raise InputError("Q_cell must be positive")
    edges = np.append(profile.t, profile.horizon)
    charge = np.concatenate(([0.0], np.cumsum(np.asarray(profile.current) * np.diff(edges))))
    if t is None:
        t = edges
        q = charge
    else:
        t = np.asarray(t, dtype=float)
        q = np.interp(t, edges, charge)  # exact for piecewise-constant current
    frac = -q / (3600.0 * q_cell)
    return t, (frac if raw else soc0 + 100.0 * frac)


# --- truth sources ------------------------------------------------------------

@dataclass
class CellTruth:
    """Sampled truth at ``t_k`` (one more sample than inputs)."""

    t: np.ndarray
    surface_neg: np.ndarray
    surface_pos: np.ndarray
    mean_neg: np.ndarray
    mean_pos: np.ndarray
    probes_neg: np.ndarray  # (len(t), N_neg) at the model's shell radii
    probes_pos: np.ndarray
    voltage: np.ndarray  # with g evaluated at the current applied from t_k on
    soc: np.ndarray  # positive-electrode SOC in percent
    x: np.ndarray | None = None  # reduced state when the truth is the model


def initial_concentrations(params, soc_percent: float, Q: float | None = None):
    """Uniform ``(c_neg, c_pos)`` at an SOC, with ``c_neg`` from lithium conservation."""
    Q = params.Q if Q is None else Q
    p, n = params.pos, params.neg
    c_pos = p.c0 + soc_percent / 100.0 * (p.c100 - p.c0)
    scale = params.F / 3600.0 * params.A_cell
    c_neg = (Q - scale * p.volume_fraction * p.thickness * c_pos) / (scale * n.volume_fraction * n.thickness)
    return c_neg, c_pos


def _g_last(u):
    return np.append(u, u[-1] if len(u) else 0.0)


def pde_truth(model: CellModel, u, dt: float, soc0: float = 100.0, n_ref: int = 400,
              scheme: str = "uniform-radius") -> CellTruth:
    """Fine shell models of both electrodes driven by the current ``u`` (one value per step)."""
    params = model.params
    u = np.asarray(u, dtype=float)
    horizon = len(u) * dt
    c_neg0, c_pos0 = initial_concentrations(params, soc0, model.Q)
    out = {}
    for side, c0, grid in (("neg", c_neg0, model.neg.grid), ("pos", c_pos0, model.pos.grid)):
        sol = solve_reference(params.electrode(side), n_ref, m_from_current(u, side, params), c0,
                              horizon=horizon, dt=dt, scheme=scheme, probes=grid.r)
        out[side] = sol
    sn, sp = out["neg"].surface, out["pos"].surface
    ug = _g_last(u)
    volt = (model.ocv_pos(sp / params.pos.c_max) - model.ocv_neg(sn / params.neg.c_max)
            + overpotentials(ug, params))
    soc = 100.0 * (out["pos"].mean - params.pos.c0) / (params.pos.c100 - params.pos.c0)
    return CellTruth(t=out["pos"].t, surface_neg=sn, surface_pos=sp, mean_neg=out["neg"].mean,
                     mean_pos=out["pos"].mean, probes_neg=out["neg"].probe_values,
                     probes_pos=out["pos"].probe_values, voltage=volt, soc=soc)


def simulate_model(model: CellModel, u, dt: float, x0, record_every: int = 1):
    """RK4 trajectory of the reduced model; states stacked on axis 0."""
    u = np.asarray(u, dtype=float)
    t_grid = np.arange(len(u) + 1) * dt
    return integrate(lambda t, x, uk: model.rhs(x, uk), x0, t_grid, "rk4", u, record_every=record_every)


def model_truth(model: CellModel, u, dt: float, soc0: float = 100.0) -> CellTruth:
    """Reduced model as the truth, with the corrected output map."""
    x0 = equilibrium_state(model, soc0)
    t, X = simulate_model(model, u, dt, x0)
    c_neg, c_pos = full_concentrations(X.T, model)
    cn_cor = correct_concentrations(c_neg, model.K_neg, model.neg.grid)
    cp_cor = correct_concentrations(c_pos, model.K_pos, model.pos.grid)
    mean_pos = mean_concentration(c_pos, model.pos.grid)
    volt = output_voltage(X.T, _g_last(np.asarray(u, dtype=float)), model, corrected=True)
    p = model.params.pos
    return CellTruth(t=t, surface_neg=cn_cor[-1], surface_pos=cp_cor[-1],
                     mean_neg=mean_concentration(c_neg, model.neg.grid), mean_pos=mean_pos,
                     probes_neg=cn_cor.T, probes_pos=cp_cor.T, voltage=volt,
                     soc=100.0 * (mean_pos - p.c0) / (p.c100 - p.c0), x=X)


# --- model comparison -----------------------------------------------------------

def _window_label(w):
    return f"{w[0]:g}-{w[1]:g}"


def compare_models(model: CellModel, profile: CurrentProfile, dt: float = 0.1, soc0: float = 100.0,
                   windows=None, n_ref: int = 400, truth: CellTruth | None = None,
                   keep_traces: bool = False) -> dict:
    """Voltage and surface-concentration errors of both output maps against the fine oracle.

    Returns ``{scenario: {trace: {"MAE", "RMSE"}}}`` with scenarios
    ``"<map>@<window>"`` and traces ``e_V_mV``, ``e_c_pos_surf_pct`` and
    ``e_c_neg_surf_pct``, plus an ``improvement_pct`` block. ``keep_traces``
    adds the sampled voltages and surface concentrations under ``"traces"``.
    """
    u = profile.sample(dt)
    if windows is None:
        active = float(profile.t[-1]) if profile.kind == "synthetic-phev" else profile.horizon
        windows = [(0.0, active), (0.0, profile.horizon)]
    truth = truth or pde_truth(model, u, dt, soc0, n_ref)
    x0 = equilibrium_state(model, soc0)
    t, X = simulate_model(model, u, dt, x0)
    ug = _g_last(u)
    c_neg, c_pos = full_concentrations(X.T, model)
    surf = {
        "uncorrected": (c_neg[-1], c_pos[-1]),
        "corrected": (correct_concentrations(c_neg, model.K_neg, model.neg.grid)[-1],
                      correct_concentrations(c_pos, model.K_pos, model.pos.grid)[-1]),
    }
    out, traces = {}, {"t": t, "current": ug, "V_oracle": truth.voltage,
                       "c_neg_surf_oracle": truth.surface_neg, "c_pos_surf_oracle": truth.surface_pos}
    for name, corrected in (("uncorrected", False), ("corrected", True)):
        v_model = output_voltage(X.T, ug, model, corrected)
        traces[f"V_{name}"] = v_model
        traces[f"c_neg_surf_{name}"], traces[f"c_pos_surf_{name}"] = surf[name]
        ev = 1000.0 * (truth.voltage - v_model)
        en = 100.0 * np.abs(truth.surface_neg - surf[name][0]) / np.abs(truth.surface_neg)
        ep = 100.0 * np.abs(truth.surface_pos - surf[name][1]) / np.abs(truth.surface_pos)
        for w in windows:
            out[f"{name}@{_window_label(w)}"] = {
                "e_V_mV": metrics(ev, t, w).as_dict(),
                "e_c_pos_surf_pct": metrics(ep, t, w).as_dict(),
                "e_c_neg_surf_pct": metrics(en, t, w).as_dict(),
            }
    imp = {}
    for w in windows:
        lab = _window_label(w)
        base, new = out[f"uncorrected@{lab}"], out[f"corrected@{lab}"]
        imp[lab] = {tr: {k: improvement(base[tr][k], new[tr][k]) for k in ("MAE", "RMSE")} for tr in base}
    out["improvement_pct"] = imp
    if keep_traces:
        out["traces"] = traces
    return out


def improvement(base: float, new: float) -> float:
    """Percent reduction of ``new`` relative to ``base``."""
    return 100.0 * (base - new) / base if base else 0.0


# --- estimation campaign ------------------------------------------------------------

VARIANTS = ("uncorrected", "corrected", "corrected+ccor")


@dataclass
class CampaignConfig:
    seed: int = 0
    horizon: float = 4500.0
    active: float = 3600.0
    dt: float = 0.1
    soc0: float = 100.0  # true initial SOC
    soc_sweep: tuple = tuple(float(s) for s in range(0, 101, 5))
    gain_scales: tuple = (1.0, 10.0, 0.1)
    oracle: str = "pde"  # or "model"
    n_ref: int = 400
    current_scale: float = 1.0
    record_every: int = 10  # metrics use every 10th step
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.oracle not in ("pde", "model"):
            raise InputError(f"oracle must be 'pde' or 'model', got {self.oracle!r}")
        if not self.dt > 0 or not self.horizon > 0:
            raise InputError("dt and horizon must be positive")
        if not self.soc_sweep or not self.gain_scales:
            raise InputError("the SOC sweep and the gain list must not be empty")
        self.soc_sweep = tuple(float(s) for s in self.soc_sweep)
        self.gain_scales = tuple(float(g) for g in self.gain_scales)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["soc_sweep"] = list(self.soc_sweep)
        d["gain_scales"] = list(self.gain_scales)
        return d


def worker_count() -> int:
    """Worker processes for campaigns, capped by ``BATTKIT_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("BATTKIT_THREADS", "1")))
    except ValueError:
        return 1


def _estimate_group(args):
    model, L, u_obs, y_obs, x0_hat, dt, corrected, record_every = args
    return simulate_observer(model, L, u_obs, y_obs, x0_hat, dt, corrected, record_every=record_every)


def run_campaign(model: CellModel, design: ObserverDesign, config: CampaignConfig = CampaignConfig(),
                 profile: CurrentProfile | None = None, truth: CellTruth | None = None,
                 keep_traces: bool = False) -> dict:
    """Sweep initial SOC estimates and gain scales for the three observer variants.

    Variants: observer with the uncorrected output map, observer with the
    corrected map, and the latter with its estimates corrected before use.
    SOC is taken from the positive electrode. Metrics (MAE, RMSE of
    ``e_SOC`` in points and of the normalized concentration errors in
    percent) are computed per run over the full horizon and averaged over the
    sweep.
    """
    cfg = config
    if profile is None:
        profile = synthetic_phev(cfg.seed, cfg.horizon, cfg.current_scale, model.params.Q_cell,
                                 active=cfg.active)
    u = profile.sample(cfg.dt)
    steps = len(u)
    t_steps = np.arange(steps) * cfg.dt
    if truth is None:
        truth = (pde_truth(model, u, cfg.dt, cfg.soc0, cfg.n_ref) if cfg.oracle == "pde"
                 else model_truth(model, u, cfg.dt, cfg.soc0))
    u_obs, y_obs = inject_bias(t_steps, u, truth.voltage[:steps], cfg.noise)

    x0_hat = np.column_stack([equilibrium_state(model, s) for s in cfg.soc_sweep])
    n_runs = len(cfg.soc_sweep)
    jobs = []
    for gscale in cfg.gain_scales:
        L = np.repeat((design.L * gscale)[:, None], n_runs, axis=1)
        for corrected in (False, True):
            jobs.append((model, L, u_obs, y_obs, x0_hat, cfg.dt, corrected, cfg.record_every))
    nw = min(worker_count(), len(jobs))
    if nw > 1:
        with ProcessPoolExecutor(nw) as ex:
            runs = list(ex.map(_estimate_group, jobs))
    else:
        runs = [_estimate_group(j) for j in jobs]

    rec = np.arange(0, steps + 1, cfg.record_every)
    if rec[-1] != steps:
        rec = np.append(rec, steps)
    t = rec * cfg.dt
    soc_true = truth.soc[rec]
    ref_neg, ref_pos = truth.probes_neg[rec], truth.probes_pos[rec]
    p = model.params.pos

    table, traces = {}, {}
    for gi, gscale in enumerate(cfg.gain_scales):
        for corrected in (False, True):
            run = runs[2 * gi + int(corrected)]
            Xh = np.moveaxis(run.x_hat, 1, 0)  # (N, time, batch)
            c_neg, c_pos = full_concentrations(Xh, model)
            variants = [("corrected" if corrected else "uncorrected", c_neg, c_pos)]
            if corrected:
                variants.append(("corrected+ccor",
                                 correct_concentrations(c_neg, model.K_neg, model.neg.grid),
                                 correct_concentrations(c_pos, model.K_pos, model.pos.grid)))
            for name, cn, cpp in variants:
                mean_pos = mean_concentration(cpp, model.pos.grid)
                soc_hat = 100.0 * (mean_pos - p.c0) / (p.c100 - p.c0)
                e_soc = soc_true[:, None] - soc_hat
                e_cp = normalized_concentration_error(ref_pos[:, None, :], np.moveaxis(cpp, 0, -1))
                e_cn = normalized_concentration_error(ref_neg[:, None, :], np.moveaxis(cn, 0, -1))
                per_run = {"e_SOC": [], "e_c_pos": [], "e_c_neg": []}
                for j in range(n_runs):
                    per_run["e_SOC"].append(metrics(e_soc[:, j]))
                    per_run["e_c_pos"].append(metrics(e_cp[:, j]))
                    per_run["e_c_neg"].append(metrics(e_cn[:, j]))
                table[f"gain={gscale:g}/{name}"] = {
                    tr: {"MAE": float(np.mean([m.mae for m in ms])), "RMSE": float(np.mean([m.rmse for m in ms]))}
                    for tr, ms in per_run.items()
                }
                if keep_traces:
                    traces[f"gain={gscale:g}/{name}"] = {"t": t, "soc_hat": soc_hat, "e_SOC": e_soc}
    imp = {}
    for gscale in cfg.gain_scales:
        base = table[f"gain={gscale:g}/uncorrected"]
        for name in VARIANTS[1:]:
            row = table[f"gain={gscale:g}/{name}"]
            imp[f"gain={gscale:g}/{name}"] = {tr: {k: improvement(base[tr][k], row[tr][k]) for k in ("MAE", "RMSE")}
                                              for tr in row}
    result = {"metrics": table, "improvement_pct": imp, "config": cfg.as_dict(),
              "soc_true_final": float(truth.soc[-1])}
    if keep_traces:
        result["traces"] = traces
        result["truth"] = truth
    return result


def metrics_json(result: dict) -> str:
    """Deterministic JSON text of a campaign or comparison result (traces dropped)."""
    clean = {k: v for k, v in result.items() if k not in ("traces", "truth")}
    return json.dumps(clean, indent=2, sort_keys=True) + "\n"
