"""Command-line front end.

One flat ``key = value`` file configures everything. Tool keys are listed in
``TOOL_KEYS``; every other key is handed to the parameter parser, so cell
parameters (``D_pos``, ``cmax_neg``, ...) can live in the same file. Relative
paths are resolved against the config file's directory.

Exit codes: 0 success, 1 runtime failure, 2 config or I/O error, 3 infeasible
observer design.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cell import cell_model
from .errors import BattkitError, DesignFailure, FormatError
from .observer import build_vertices, design_gain, export_design, import_design
from .ocv import canned_ocv, read_ocv_csv
from .params import dump_params, load_params, parse_params, default_params
from .sim import (CampaignConfig, NoiseSpec, coulomb_soc, compare_models, constant_profile, metrics_json,
                  model_truth, parse_voltage_csv, read_current_csv, run_campaign, synthetic_phev)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3

# key -> (type, default)
TOOL_KEYS = {
    "params": (str, ""),
    "ocv_neg": (str, ""),
    "ocv_pos": (str, ""),
    "N_neg": (int, 4),
    "N_pos": (int, 4),
    "scheme": (str, "uniform-volume"),
    "N_ref": (int, 400),
    "dt": (float, 0.1),
    "profile": (str, "synthetic"),  # synthetic | constant | csv
    "profile_csv": (str, ""),
    "current": (float, 0.0),  # for the constant profile, A
    "horizon": (float, 4500.0),
    "active": (float, 3600.0),
    "current_scale": (float, 1.0),
    "soc0": (float, 100.0),
    "oracle": (str, "pde"),
    "noise": (str, "on"),
    "current_bias_amp": (float, 3.0),
    "current_bias_omega": (float, 2000 * math.pi),
    "voltage_bias_amp": (float, 0.05),
    "voltage_bias_omega": (float, 200 * math.pi),
    "soc_sweep": (str, ",".join(str(s) for s in range(0, 101, 5))),
    "gain_scales": (str, "1,10,0.1"),
    "record_every": (int, 10),
    "design": (str, ""),
    "decay": (float, 1e-3),
    "bounds_neg": (str, ""),  # "c1,c2" OCV slope bounds; default from the tables
    "bounds_pos": (str, ""),
    "seed": (int, 0),
    "current_gain": (float, 1.0),
}
PATH_KEYS = ("params", "ocv_neg", "ocv_pos", "profile_csv", "design")


@dataclass
class ToolConfig:
    values: dict
    params: object
    source: str = "<defaults>"
    digest: str = field(default_factory=lambda: hashlib.sha256(b"").hexdigest())

    def __getitem__(self, key):
        return self.values[key]

    def floats(self, key) -> tuple:
        try:
            return tuple(float(v) for v in str(self.values[key]).split(",") if v.strip())
        except ValueError:
            raise FormatError(f"{self.source}: {key} must be a comma-separated list of numbers") from None


def _split_config(text: str, source: str):
    tool, rest = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            rest.append("")
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in TOOL_KEYS:
            if key in tool:
                raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
            kind = TOOL_KEYS[key][0]
            try:
                tool[key] = kind(val) if kind is not str else val
            except ValueError:
                raise FormatError(f"{source}:{lineno}: {key} expects {kind.__name__}, got {val!r}") from None
            rest.append("")
        else:
            rest.append(raw)  # keeps line numbers aligned for the parameter parser
    return tool, "\n".join(rest)


def load_config(path=None, overrides: dict | None = None) -> ToolConfig:
    """Read and validate a tool configuration; ``overrides`` win over the file."""
    values = {k: v[1] for k, v in TOOL_KEYS.items()}
    text, source, base_dir = "", "<defaults>", Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config file {path}: {exc}") from None
        source, base_dir = str(path), path.parent
    tool, param_text = _split_config(text, source)
    values.update(tool)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in PATH_KEYS:
        if values[key]:
            p = Path(values[key])
            values[key] = str(p if p.is_absolute() else base_dir / p)
    base = load_params(values["params"]) if values["params"] else default_params()
    params = parse_params(param_text, source, base)
    for key in ("N_neg", "N_pos"):
        if values[key] < 2:
            raise FormatError(f"{source}: {key} must be at least 2, got {values[key]}")
    if values["oracle"] not in ("pde", "model"):
        raise FormatError(f"{source}: oracle must be 'pde' or 'model', got {values['oracle']!r}")
    if values["profile"] not in ("synthetic", "constant", "csv"):
        raise FormatError(f"{source}: profile must be synthetic, constant or csv")
    if values["noise"] not in ("on", "off"):
        raise FormatError(f"{source}: noise must be 'on' or 'off'")
    if not values["dt"] > 0:
        raise FormatError(f"{source}: dt must be positive")
    for key in ("ocv_neg", "ocv_pos", "profile_csv", "design"):
        if values[key] and not Path(values[key]).is_file():
            raise FormatError(f"{source}: {key} file not found: {values[key]}")
    digest = hashlib.sha256(json.dumps(values, sort_keys=True).encode() + dump_params(params).encode()).hexdigest()
    return ToolConfig(values, params, source, digest)


def provenance(cfg: ToolConfig) -> dict:
    return {"tool": "battkit", "version": __version__, "config_sha256": cfg.digest, "seed": cfg["seed"]}


def _header_lines(cfg: ToolConfig) -> str:
    return "".join(f"# {k}={v}\n" for k, v in provenance(cfg).items())


def write_json(path: Path, doc: dict, cfg: ToolConfig):
    doc = dict(doc)
    doc["provenance"] = provenance(cfg)
    path.write_text(metrics_json(doc))


def write_csv(path: Path, columns: dict, cfg: ToolConfig):
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    with open(path, "w", newline="") as fh:
        fh.write(_header_lines(cfg))
        w = csv.writer(fh)
        w.writerow(names)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


# --- building blocks -------------------------------------------------------------

def build_model(cfg: ToolConfig):
    ocv_neg = read_ocv_csv(cfg["ocv_neg"]) if cfg["ocv_neg"] else canned_ocv("neg")
    ocv_pos = read_ocv_csv(cfg["ocv_pos"]) if cfg["ocv_pos"] else canned_ocv("pos")
    return cell_model(cfg.params, cfg["N_neg"], cfg["N_pos"], cfg["scheme"], ocv_neg, ocv_pos)


def build_profile(cfg: ToolConfig):
    kind = cfg["profile"]
    if kind == "constant":
        return constant_profile(cfg["current"] * cfg["current_scale"], cfg["horizon"])
    if kind == "csv":
        if not cfg["profile_csv"]:
            raise FormatError(f"{cfg.source}: profile=csv needs profile_csv")
        return read_current_csv(cfg["profile_csv"], cfg["current_gain"])
    return synthetic_phev(cfg["seed"], cfg["horizon"], cfg["current_scale"], cfg.params.Q_cell,
                          active=cfg["active"])


def _windows(cfg, profile):
    active = cfg["active"] if profile.kind == "synthetic-phev" else profile.horizon
    return [(0.0, min(active, profile.horizon)), (0.0, profile.horizon)]


def build_model_vertices(cfg: ToolConfig):
    model = build_model(cfg)
    bounds = {}
    for side in ("neg", "pos"):
        key = f"bounds_{side}"
        if cfg[key]:
            b = cfg.floats(key)
            if len(b) != 2 or not b[0] <= b[1]:
                raise FormatError(f"{cfg.source}: {key} needs two increasing numbers")
            bounds[key] = b
    return model, build_vertices(model, **bounds)


def obtain_design(cfg: ToolConfig, model, vertices):
    if cfg["design"]:
        text = Path(cfg["design"]).read_text()
        return import_design(text, model.A, vertices, cfg["design"])
    return design_gain(model.A, model.E, vertices, decay=cfg["decay"])


# --- commands ---------------------------------------------------------------------

def cmd_simulate(cfg: ToolConfig, out: Path) -> int:
    model = build_model(cfg)
    profile = build_profile(cfg)
    dt = cfg["dt"]
    truth = None
    if cfg["oracle"] == "model":
        truth = model_truth(model, profile.sample(dt), dt, cfg["soc0"])
    res = compare_models(model, profile, dt, cfg["soc0"], _windows(cfg, profile), cfg["N_ref"], truth,
                         keep_traces=True)
    traces = res.pop("traces")
    traces = {"time_s": traces.pop("t"), "current_A": traces.pop("current"), **traces}
    write_csv(out / "traces.csv", traces, cfg)
    write_json(out / "metrics.json", res, cfg)
    print(f"wrote {out / 'traces.csv'} and {out / 'metrics.json'}")
    return EXIT_OK


def cmd_design(cfg: ToolConfig, out: Path) -> int:
    model, vertices = build_model_vertices(cfg)
    design = design_gain(model.A, model.E, vertices, decay=cfg["decay"])
    text = export_design(design)
    (out / "design.json").write_text(text)
    write_json(out / "design_certificate.json", {"certificate": design.certificate.summary(),
                                                 "l2_gains": list(design.l2_gains())}, cfg)
    print(f"design verified; wrote {out / 'design.json'}")
    return EXIT_OK


def cmd_estimate(cfg: ToolConfig, out: Path, gain_scale=None) -> int:
    model, vertices = build_model_vertices(cfg)
    design = obtain_design(cfg, model, vertices)
    gains = (gain_scale,) if gain_scale is not None else cfg.floats("gain_scales")
    noise = NoiseSpec(cfg["current_bias_amp"], cfg["current_bias_omega"], cfg["voltage_bias_amp"],
                      cfg["voltage_bias_omega"], cfg["noise"] == "on", cfg["noise"] == "on")
    ccfg = CampaignConfig(seed=cfg["seed"], horizon=cfg["horizon"], active=cfg["active"], dt=cfg["dt"],
                          soc0=cfg["soc0"], soc_sweep=cfg.floats("soc_sweep"), gain_scales=gains,
                          oracle=cfg["oracle"], n_ref=cfg["N_ref"], current_scale=cfg["current_scale"],
                          record_every=cfg["record_every"], noise=noise)
    profile = build_profile(cfg)
    ccfg = replace(ccfg, horizon=profile.horizon)
    res = run_campaign(model, design, ccfg, profile=profile, keep_traces=True)
    traces = res.pop("traces")
    truth = res.pop("truth")
    write_json(out / "metrics.json", res, cfg)
    sweep = ccfg.soc_sweep
    for name, tr in traces.items():
        cols = {"time_s": tr["t"], "soc_true": truth.soc[np.round(tr["t"] / ccfg.dt).astype(int)]}
        for j, s in enumerate(sweep):
            cols[f"soc_hat_init{s:g}"] = tr["soc_hat"][:, j]
        fname = "traces_" + name.replace("=", "").replace("/", "_").replace("+", "_") + ".csv"
        write_csv(out / fname, cols, cfg)
    print(f"campaign done: {len(sweep)} initial SOC x {len(gains)} gains; wrote {out / 'metrics.json'}")
    return EXIT_OK


def cmd_ingest(cfg: ToolConfig, out: Path, current_csv, voltage_csv=None) -> int:
    profile = read_current_csv(current_csv, cfg["current_gain"])
    t, soc = coulomb_soc(profile, cfg.params.Q_cell, cfg["soc0"])
    cols = {"time_s": t, "current_A": np.append(profile.current, profile.current[-1]), "soc_coulomb_pct": soc}
    summary = {"samples": int(len(t)), "current_gain": cfg["current_gain"], "horizon_s": profile.horizon,
               "charge_Ah": profile.charge_ah(), "soc_final_pct": float(soc[-1])}
    if voltage_csv:
        tv, v = parse_voltage_csv(Path(voltage_csv).read_text(), str(voltage_csv))
        cols["voltage_V"] = np.interp(t, tv, v)
        summary["voltage_samples"] = int(len(tv))
    write_csv(out / "bundle.csv", cols, cfg)
    write_json(out / "bundle.json", summary, cfg)
    print(f"ingested {len(t)} samples; wrote {out / 'bundle.csv'}")
    return EXIT_OK


def cmd_export(cfg: ToolConfig, out: Path) -> int:
    model = build_model(cfg)
    (out / "params.txt").write_text(_header_lines(cfg) + dump_params(cfg.params))
    for side, curve in (("neg", model.ocv_neg), ("pos", model.ocv_pos)):
        write_csv(out / f"ocv_{side}.csv", {"zeta": curve.zeta, "voltage_V": curve.voltage}, cfg)
    doc = {"n": model.n, "A": model.A.tolist(), "B": model.B.tolist(), "K": model.K.tolist(),
           "E": model.E.tolist(), "K_neg": model.K_neg.tolist(), "K_pos": model.K_pos.tolist(),
           "H_neg_cor": model.H_neg_cor.tolist(), "H_pos_cor": model.H_pos_cor.tolist(),
           "r_neg": model.neg.grid.r.tolist(), "r_pos": model.pos.grid.r.tolist()}
    write_json(out / "model.json", doc, cfg)
    print(f"exported model and tables to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="battkit", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"battkit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("battkit-out"))
    common.add_argument("--oracle", choices=("model", "pde"))
    common.add_argument("--current-gain", type=float, dest="current_gain")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="models vs oracle on a current profile")
    sub.add_parser("design", parents=[common], help="LMI observer design with certificate")
    est = sub.add_parser("estimate", parents=[common], help="observer campaign over initial SOC and gains")
    est.add_argument("--gain-scale", type=float, dest="gain_scale", help="run a single gain scale")
    ing = sub.add_parser("ingest", parents=[common], help="validate measured current/voltage CSVs")
    ing.add_argument("current_csv", type=Path)
    ing.add_argument("--voltage", type=Path)
    sub.add_parser("export", parents=[common], help="write parameters, OCV tables and model matrices")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "oracle": args.oracle,
                                        "current_gain": args.current_gain})
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "design":
            return cmd_design(cfg, out)
        if args.command == "estimate":
            return cmd_estimate(cfg, out, args.gain_scale)
        if args.command == "ingest":
            return cmd_ingest(cfg, out, args.current_csv, args.voltage)
        return cmd_export(cfg, out)
    except DesignFailure as exc:
        print(f"error: design infeasible: {exc} (best margin {exc.best_margin})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BattkitError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
