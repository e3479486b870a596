"""Command-line front end: ``aerocap <command> --config run.yaml``.

Commands: gen-data, train, eval, simulate, campaign, sweep, recoverability,
report. Every artifact carries the config hash, master seed and version, and
reruns with identical inputs produce identical bytes.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import gmvae as G
from . import montecarlo as mc
from .dynamics import TrajectoryMode
from .environment import PerturbationSpec, PlanetModel, PolyAtmosphere
from .fnpag import write_rows
from .pipag import PipagParams

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "scenario": "near-escape",
    "seed": 0,
    "trials": 100,
    "threads": 1,
    "out": "runs/out",
    "variants": ["fnpag", "pipag"],
    "planet": {"mu": 5.793939e15, "Re": 25559.0e3, "J2": 3.51068e-3, "rotation_period_h": 17.24},
    "dispersion": {
        "ld_3s": 0.075, "m_3s": 854.12, "h0_3s_km": 100.0, "theta0_3s_rad": 0.227,
        "phi0_3s_rad": 0.116, "V0_3s_m_s": 750.0, "gamma0_3s_deg": 0.5, "variance_scale": 1.0,
        "enabled": True,
    },
    "atmosphere": {
        "perturbed": True, "delta_p": 2.0, "sigma_base": 0.15, "correlation_length_km": 60.0,
        "density_scale": 1.0, "onboard_h_min_km": 200.0, "onboard_h_max_km": 2000.0,
    },
    "fnpag": {
        "sigma_0_deg": 10.0, "sigma_f_deg": 90.0, "t_switch_init": 300.0, "g_limit": 0.1,
        "pred_dt": 2.0, "chi": math.exp(-1.0 / 6.0), "lateral_deadband_deg": 0.25, "max_reversals": 6,
    },
    "pipag": None,  # scenario defaults unless given
    "gmvae": {"latent_dim": None, "clusters": None, "epochs": 10000, "batch_size": 128,
              "learning_rate": 1.0e-3, "beta_kl": None, "warmup_epochs": 100, "train_seed": None},
    "data": {"n_samples": 1280, "dataset": None, "model": None, "reference_dataset": None},
    "sweep": {"sigma_prime_deg": [10, 20, 30, 40], "tau": [0, 10, 20, 30, 40], "eps_C": [0.975],
              "eps_F": 0.025},
    "simulate": {"trial": 0},
    "t_f": 1500.0,
}

# latent dimension, clusters and KL weight per scenario
SCENARIO_MODEL = {"near-escape": (7, 3, 1.5e-3), "near-impact": (5, 5, 1.3e-3)}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(value, default, where: str):
    """Match numeric defaults: YAML 1.1 reads '1e3' as a string."""
    if isinstance(default, dict) and isinstance(value, dict):
        unknown = set(value) - set(default)
        if unknown:
            raise UsageError(f"unknown keys under {where}: {sorted(unknown)}")
        return {k: _coerce(v, default[k], f"{where}.{k}") for k, v in value.items()}
    if isinstance(default, (int, float)) and not isinstance(default, bool) and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise UsageError(f"{where}: expected a number, got {value!r}") from None
    return value


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise UsageError(f"{p}: top level must be a mapping")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"{p}: unknown keys {sorted(unknown)}")
        data = {k: _coerce(v, DEFAULTS[k], k) for k, v in data.items()}
        cfg = _merge(cfg, data)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    if cfg["scenario"] not in mc.SCENARIOS:
        raise UsageError(f"unknown scenario {cfg['scenario']!r}")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__}


def header(cfg: dict) -> str:
    p = provenance(cfg)
    return f"config_hash={p['config_hash']} seed={p['seed']} version={p['version']}"


def setup_from_config(cfg: dict) -> mc.CampaignSetup:
    pl = cfg["planet"]
    planet = PlanetModel(pl["mu"], pl["Re"], pl["J2"], 2.0 * math.pi / (pl["rotation_period_h"] * 3600.0))
    d = cfg["dispersion"]
    if d.get("enabled", True):
        disp = mc.DispersionSpec(d["ld_3s"], d["m_3s"], d["h0_3s_km"] * 1e3, d["theta0_3s_rad"],
                                 d["phi0_3s_rad"], d["V0_3s_m_s"], math.radians(d["gamma0_3s_deg"]),
                                 d["variance_scale"])
    else:
        disp = mc.ZERO_DISPERSION
    a = cfg["atmosphere"]
    pert = None
    if a["perturbed"]:
        pert = PerturbationSpec(a["delta_p"], a["correlation_length_km"] * 1e3, a["sigma_base"],
                                density_scale=a["density_scale"])
    elif a["density_scale"] != 1.0:
        pert = PerturbationSpec(delta_p=0.0, density_scale=a["density_scale"])
    onboard = PolyAtmosphere(h_min=a["onboard_h_min_km"] * 1e3, h_max=a["onboard_h_max_km"] * 1e3)
    f = cfg["fnpag"]
    fn = {
        "sigma_0": math.radians(f["sigma_0_deg"]), "sigma_f": math.radians(f["sigma_f_deg"]),
        "t_switch_init": f["t_switch_init"], "g_limit": f["g_limit"], "pred_dt": f["pred_dt"],
        "chi": f["chi"], "lateral_deadband": math.radians(f["lateral_deadband_deg"]),
        "max_reversals": f["max_reversals"],
    }
    scen = mc.SCENARIOS[cfg["scenario"]]
    pp = None
    if cfg.get("pipag"):
        base = mc.default_pipag_params(scen)
        p = cfg["pipag"]
        unknown = set(p) - {"eps_C", "eps_F", "sigma_prime_deg", "tau"}
        if unknown:
            raise UsageError(f"unknown keys under pipag: {sorted(unknown)}")
        pp = PipagParams(p.get("eps_C", base.eps_C), p.get("eps_F", base.eps_F),
                         math.radians(p["sigma_prime_deg"]) if "sigma_prime_deg" in p else base.sigma_prime,
                         p.get("tau", base.tau))
    return mc.CampaignSetup(scen, disp, pert, int(cfg["seed"]), planet, onboard,
                            fnpag=fn, pipag=pp, t_f=float(cfg["t_f"]))


def _out(cfg: dict) -> Path:
    p = Path(cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset_path(cfg: dict) -> Path:
    return Path(cfg["data"]["dataset"] or Path(cfg["out"]) / "dataset.csv")


def _model_path(cfg: dict) -> Path:
    return Path(cfg["data"]["model"] or Path(cfg["out"]) / "model.bin")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, data: dict, cfg: dict) -> None:
    d = dict(data)
    d["provenance"] = provenance(cfg)
    path.write_text(json.dumps(d, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, TrajectoryMode):
        return v.value
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict) -> int:
    setup = setup_from_config(cfg)
    out = _out(cfg)
    ds, results = mc.build_dataset(setup, int(cfg["data"]["n_samples"]), "fnpag", int(cfg["threads"]),
                                   warn=lambda m: _say(f"warning: {m}"))
    path = _dataset_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.to_csv(path, header(cfg), {"provenance": provenance(cfg)})
    mc.write_trials(out / "dataset_trials.csv", results, header(cfg))
    counts = {m.value: sum(lab == m for lab in ds.labels) for m in TrajectoryMode}
    _say(f"{len(ds)} samples written to {path}: " + ", ".join(f"{k}={v}" for k, v in counts.items() if v))
    return EXIT_OK


TRAIN_LOG_COLUMNS = ["epoch", "loss", "recon", "kl", "gmm_ll"]


def _model_shape(cfg: dict) -> tuple[int, int]:
    l0, c0, _ = SCENARIO_MODEL[cfg["scenario"]]
    g = cfg["gmvae"]
    return int(g["latent_dim"] or l0), int(g["clusters"] or c0)


def _beta_kl(cfg: dict) -> float:
    b = cfg["gmvae"]["beta_kl"]
    return float(SCENARIO_MODEL[cfg["scenario"]][2] if b is None else b)


def cmd_train(cfg: dict) -> int:
    out = _out(cfg)
    ds = G.EnergyDataset.from_csv(_require(_dataset_path(cfg), "dataset"))
    l, c = _model_shape(cfg)
    g = cfg["gmvae"]
    seed = int(g["train_seed"] if g["train_seed"] is not None else cfg["seed"])
    tc = G.TrainConfig(int(g["epochs"]), int(g["batch_size"]), float(g["learning_rate"]),
                       ds.split or mc.split_counts(len(ds)), seed, _beta_kl(cfg),
                       warmup_epochs=int(g["warmup_epochs"]))
    train = ds.part("train") if ds.split else ds
    model = G.GmvaeModel.init(l, c, seed, ds.samples.shape[1])
    model.norm_constant = ds.norm_constant
    model.time_grid = ds.time_grid
    model.failure_mode = mc.SCENARIOS[cfg["scenario"]].failure_mode
    model.meta["scenario"] = ds.scenario
    model.meta["provenance"] = provenance(cfg)
    log: list[dict] = []
    try:
        G.train(model, train.samples, tc, progress=log.append)
    finally:
        write_rows(out / "train_log.csv", log, header(cfg), TRAIN_LOG_COLUMNS)
    G.assign_clusters(model, train.samples, train.labels)
    G.save_model(model, _model_path(cfg))
    report = _eval_report(model, ds)
    _write_json(out / "train_report.json", report, cfg)
    key = _headline(report)
    _say(f"model written to {_model_path(cfg)}; {key} misclassification {report[key]['mean_pct']:.3f}%")
    return EXIT_OK


def _eval_report(model: G.GmvaeModel, ds: G.EnergyDataset) -> dict:
    parts = ("train", "val", "test") if ds.split else ("all",)
    rep = {"cluster_to_mode": {str(k): v.value for k, v in sorted(model.cluster_to_mode.items())}}
    for name in parts:
        sub = ds.part(name) if ds.split else ds
        if len(sub) == 0:
            continue
        per, mean = G.misclassification(model, sub.samples, sub.labels)
        rep[name] = {"n": len(sub), "mean_pct": mean, "per_mode_pct": {m.value: v for m, v in per.items()}}
    return rep


def _headline(report: dict) -> str:
    """Split to quote on the console: test if it has rows."""
    return next(k for k in ("test", "val", "train", "all") if k in report)


def cmd_eval(cfg: dict) -> int:
    out = _out(cfg)
    model = G.load_model(_require(_model_path(cfg), "model"))
    ds = G.EnergyDataset.from_csv(_require(_dataset_path(cfg), "dataset"))
    report = _eval_report(model, ds)
    report["singular_values"] = [float(v) for v in G.svd_analysis(ds.samples)[:12]]
    _write_json(out / "eval_report.json", report, cfg)
    key = _headline(report)
    _say(f"misclassification ({key}): {report[key]['mean_pct']:.3f}%")
    return EXIT_OK


def _load_model_if(cfg: dict, variants) -> G.GmvaeModel | None:
    if any(v.startswith("pipag") for v in variants):
        return G.load_model(_require(_model_path(cfg), "model"))
    return None


def cmd_simulate(cfg: dict) -> int:
    out = _out(cfg)
    setup = setup_from_config(cfg)
    variant = cfg["variants"][0]
    model = _load_model_if(cfg, [variant])
    trial = int(cfg["simulate"]["trial"])
    traj, ctrl, res = mc.simulate_trial(setup, trial, variant, model)
    h = header(cfg)
    traj.to_csv(out / "trajectory.csv", setup.planet, h)
    ctrl.telemetry_csv(out / "guidance.csv", h)
    summary = traj.summary(setup.planet)
    summary.update({"variant": variant, "trial": trial, "r_a_error": _clean(res.r_a_error),
                    "t_enable": _clean(res.t_enable), "corrected_cycles": res.corrected_cycles})
    _write_json(out / "simulate_summary.json", summary, cfg)
    trace = getattr(ctrl, "latent_trace", None)
    if trace is not None:
        _write_latent_trace(out / "latent_trace.csv", np.array(trace).reshape(len(trace), -1), model, cfg, h)
    _say(f"trial {trial} ({variant}): {res.mode.value}, r_a error "
         f"{'n/a' if not math.isfinite(res.r_a_error) else f'{res.r_a_error / 1e3:.1f} km'}")
    return EXIT_OK


def _write_latent_trace(path: Path, trace: np.ndarray, model, cfg: dict, h: str) -> None:
    """Encoded means per enabled cycle plus a 2-D PCA projection fitted on
    the reference dataset's encodings (when one is configured)."""
    ref = cfg["data"].get("reference_dataset") or (
        str(_dataset_path(cfg)) if _dataset_path(cfg).exists() else None)
    l = model.l
    pc = np.full((trace.shape[0], 2), np.nan)
    if ref and trace.size:
        ds = G.EnergyDataset.from_csv(ref)
        Z, _ = G.encode(model, ds.samples)
        mean = Z.mean(axis=0)
        _, _, vt = np.linalg.svd(Z - mean, full_matrices=False)
        pc = (trace[:, 1:1 + l] - mean) @ vt[:2].T
    with path.open("w") as fh:
        fh.write(f"# {h}\n")
        fh.write(",".join(["t"] + [f"z{i}" for i in range(l)] + ["pc1", "pc2"]) + "\n")
        for row, p in zip(trace, pc):
            fh.write(",".join(f"{v:.10g}" for v in [*row, *p]) + "\n")


def cmd_campaign(cfg: dict) -> int:
    out = _out(cfg)
    setup = setup_from_config(cfg)
    variants = cfg["variants"]
    model = _load_model_if(cfg, variants)
    h = header(cfg)
    for v in variants:
        res, summ = mc.run_campaign(setup, int(cfg["trials"]), v, model, int(cfg["threads"]))
        mc.write_trials(out / f"trials_{v}.csv", res, h)
        mc.write_error_histogram(out / f"ra_error_hist_{v}.csv", res, header=h)
        _write_json(out / f"summary_{v}.json", summ.to_dict(), cfg)
        _say(f"{v}: capture {summ.capture_pct:.1f}% escape {summ.escape_pct:.1f}% "
             f"impact {summ.impact_pct:.1f}% ({summ.n_errors} errors)")
    return EXIT_OK


def _read_recoverable(path: Path) -> dict[int, bool]:
    out = {}
    with path.open() as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("trial_id"):
                continue
            i, ok = line.strip().split(",")
            out[int(i)] = ok == "1"
    return out


def cmd_recoverability(cfg: dict) -> int:
    out = _out(cfg)
    setup = setup_from_config(cfg)
    base = mc.read_trials(_require(out / "trials_fnpag.csv", "FNPAG campaign results"))
    rec = mc.recoverability(setup, base, int(cfg["threads"]))
    with (out / "recoverable.csv").open("w") as fh:
        fh.write(f"# {header(cfg)}\ntrial_id,recoverable\n")
        for i in sorted(rec):
            fh.write(f"{i},{int(rec[i])}\n")
    _say(f"{sum(rec.values())} of {len(rec)} failed trials recoverable")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    out = _out(cfg)
    setup = setup_from_config(cfg)
    model = G.load_model(_require(_model_path(cfg), "model"))
    sw = cfg["sweep"]
    rec_path = out / "recoverable.csv"
    rec = _read_recoverable(rec_path) if rec_path.exists() else None
    rows = mc.sweep(setup, int(cfg["trials"]), model, [math.radians(v) for v in sw["sigma_prime_deg"]],
                    [float(v) for v in sw["tau"]], [float(v) for v in sw["eps_C"]], float(sw["eps_F"]),
                    rec, int(cfg["threads"]))
    mc.write_sweep(out / "sweep.csv", rows, header(cfg))
    _say(f"{len(rows)} sweep points written to {out / 'sweep.csv'}")
    return EXIT_OK


REPORT_COLUMNS = ("Variant", "Capture %", "Escape %", "Impact %", "Recoverable Save %",
                  "Mean Capture r_a Err. [km]", "Std Capture r_a Err. [km]")


def cmd_report(cfg: dict) -> int:
    """Comparison table from the persisted campaign CSVs (pure function of them)."""
    out = _out(cfg)
    rec_path = out / "recoverable.csv"
    rec = _read_recoverable(rec_path) if rec_path.exists() else None
    rows = []
    for v in mc.VARIANTS:
        p = out / f"trials_{v}.csv"
        if not p.exists():
            continue
        s = mc.summarize(mc.read_trials(p), rec)
        rows.append((v, s))
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    table = []
    for v, s in rows:
        cells = [v, f"{s.capture_pct:.2f}", f"{s.escape_pct:.2f}", f"{s.impact_pct:.2f}",
                 _fmt_pct(s.save_pct), _fmt_pct(s.mean_ra_err_km, 1), _fmt_pct(s.std_ra_err_km, 1)]
        lines.append("| " + " | ".join(cells) + " |")
        table.append({"variant": v, **s.to_dict()})
    text = f"<!-- {header(cfg)} -->\n" + "\n".join(lines) + "\n"
    (out / "report.md").write_text(text)
    _write_json(out / "report.json", {"rows": table}, cfg)
    _say(text.rstrip())
    return EXIT_OK


def _fmt_pct(x, nd: int = 2) -> str:
    return "n/a" if not math.isfinite(x) else f"{x:.{nd}f}"


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "simulate": cmd_simulate,
    "campaign": cmd_campaign, "sweep": cmd_sweep, "recoverability": cmd_recoverability,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aerocap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--seed", type=int, help="master seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--variant", choices=mc.VARIANTS, help="guidance variant (overrides config list)")
        s.add_argument("--trials", type=int, help="number of Monte Carlo trials")
        s.add_argument("--threads", type=int, help="worker processes")
        if name == "simulate":
            s.add_argument("--trial", type=int, help="trial id to simulate")
        if name == "train":
            s.add_argument("--epochs", type=int, help="training epochs")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "trials": args.trials, "threads": args.threads}
    if args.variant:
        overrides["variants"] = [args.variant]
    if getattr(args, "trial", None) is not None:
        overrides["simulate"] = {"trial": args.trial}
    if getattr(args, "epochs", None) is not None:
        overrides["gmvae"] = {"epochs": args.epochs}
    try:
        cfg = load_config(args.config, overrides)
        if int(cfg["trials"]) < 0 or int(cfg["threads"]) < 1:
            raise UsageError("trials must be >= 0 and threads >= 1")
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"aerocap: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"aerocap: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
