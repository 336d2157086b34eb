"""Command-line entry point.

Subcommands: simulate, fit, identify, analyze, montecarlo, rankcheck.
Every run is driven by a JSON config file with a ``schema_version``
key; unknown keys are rejected. Exit codes: 0 success, 1 usage or
config error, 2 data error, 3 numerical failure, 4 non-convergence.
All state flows through files; reruns never mutate inputs.

The ``--threads`` flag is accepted for interface stability; all
internal loops are vectorized in-process and one thread is always
used, so results are deterministic given (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys

import numpy as np

from . import analysis
from . import spectral
from .estimator import EmSettings, fit, single_type_closed_form
from .likelihood import vector_to_model
from .estimator import parameter_names
from .model import MixtureModel, TypeParameters, InvalidParameterError
from .panel import PanelData, PanelFormatError

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGED = 4

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised when a config file violates its schema."""


# ---------------------------------------------------------------------------
# config plumbing

def _load_config(path, allowed_keys, required_keys):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {SCHEMA_VERSION}, "
            f"got {cfg.get('schema_version')!r}"
        )
    allowed = set(allowed_keys) | {"schema_version"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(set(required_keys) - set(cfg))
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    return cfg


_TYPE_KEYS = (
    "beta_m", "beta_l", "beta_k", "beta0_t", "psi", "sigma_eps",
    "sigma_zeta", "rho_epszeta", "sigma_v", "rho_omega", "sigma_eta",
    "rho_k0", "rho_kk", "rho_komega", "sigma_k", "mu1", "Sigma1",
)


def model_to_dict(model: MixtureModel) -> dict:
    types = []
    for tp in model.types:
        d = {}
        for key in _TYPE_KEYS:
            val = getattr(tp, key)
            d[key] = val.tolist() if isinstance(val, np.ndarray) else float(val)
        types.append(d)
    return {
        "schema_version": SCHEMA_VERSION,
        "pi": model.pi.tolist(),
        "alpha_t": model.alpha_t.tolist(),
        "price_wedge_t": model.price_wedge_t.tolist(),
        "types": types,
    }


def model_from_dict(d: dict) -> MixtureModel:
    for key in ("pi", "alpha_t", "types"):
        if key not in d:
            raise ConfigError(f"model is missing key {key!r}")
    types = []
    for i, td in enumerate(d["types"]):
        unknown = sorted(set(td) - set(_TYPE_KEYS))
        if unknown:
            raise ConfigError(
                f"types[{i}] has unknown keys: {', '.join(unknown)}"
            )
        missing = sorted(set(_TYPE_KEYS) - set(td))
        if missing:
            raise ConfigError(
                f"types[{i}] is missing keys: {', '.join(missing)}"
            )
        types.append(TypeParameters(**td))
    return MixtureModel(
        pi=np.asarray(d["pi"], dtype=float),
        alpha_t=np.asarray(d["alpha_t"], dtype=float),
        types=tuple(types),
        price_wedge_t=(
            None if d.get("price_wedge_t") is None
            else np.asarray(d["price_wedge_t"], dtype=float)
        ),
    )


def _model_from_result_json(path) -> MixtureModel:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("J", "T", "parameters"):
        if key not in doc:
            raise ConfigError(f"result file {path} is missing key {key!r}")
    J, T = int(doc["J"]), int(doc["T"])
    names = parameter_names(J, T)
    params = doc["parameters"]
    missing = [n for n in names if n not in params]
    if missing:
        raise ConfigError(
            f"result file {path} is missing parameters: {missing[:5]}"
        )
    vec = np.array([float(params[n]) for n in names])
    return vector_to_model(vec, J, T)


def _settings_from_dict(d, seed_override=None) -> EmSettings:
    d = dict(d or {})
    allowed = {"max_iter", "tol_loglik", "n_starts", "ridge_floor",
               "seed", "compute_se", "stage3_inner_iter", "final_newton"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown settings keys: {', '.join(unknown)}")
    if seed_override is not None:
        d["seed"] = seed_override
    return EmSettings(**d)


def _write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    cfg = _load_config(
        args.config,
        allowed_keys=("n_firms", "T", "seed", "model", "emit_labels",
                      "out_panel", "out_truth"),
        required_keys=("n_firms", "T", "model", "out_panel"),
    )
    from .simulate import SimConfig, simulate_panel
    model = model_from_dict(cfg["model"])
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    sim = simulate_panel(SimConfig(
        n_firms=int(cfg["n_firms"]), T=int(cfg["T"]), model=model,
        seed=seed, emit_labels=bool(cfg.get("emit_labels", True)),
    ))
    sim.panel.to_csv(cfg["out_panel"])
    if cfg.get("out_truth"):
        with open(cfg["out_truth"], "w") as fh:
            json.dump(model_to_dict(model), fh, indent=2)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_config(
        args.config,
        allowed_keys=("panel", "J", "settings", "out_result",
                      "out_posterior"),
        required_keys=("panel", "J", "out_result"),
    )
    J = int(cfg["J"])
    if J < 1:
        raise ConfigError("J must be a positive integer")
    panel = PanelData.from_csv(cfg["panel"])
    settings = _settings_from_dict(cfg.get("settings"), args.seed)
    result = fit(panel, J, settings)
    result.save_json(cfg["out_result"])
    if cfg.get("out_posterior"):
        result.save_posterior_csv(cfg["out_posterior"])
    return EXIT_NONCONVERGED if result.non_converged else EXIT_OK


def cmd_identify(args) -> int:
    cfg = _load_config(
        args.config,
        allowed_keys=("system", "panel", "J", "n_draws", "n_bins", "seed",
                      "out"),
        required_keys=("J", "out"),
    )
    J = int(cfg["J"])
    if ("system" in cfg) == ("panel" in cfg):
        raise ConfigError("provide exactly one of 'system' and 'panel'")
    if "system" in cfg:
        sys_ = spectral.DiscreteMixturePanel.load_json(cfg["system"])
        joint = spectral.joint_from_system(sys_)
        if cfg.get("n_draws"):
            seed = args.seed if args.seed is not None else int(
                cfg.get("seed", 0))
            joint = spectral.sample_joint(joint, int(cfg["n_draws"]), seed)
    else:
        panel = PanelData.from_csv(cfg["panel"])
        if panel.T < 4:
            raise PanelFormatError("identification needs at least 4 periods")
        values = np.stack([panel.sm[:, :4], panel.k[:, :4]], axis=2)
        states, _ = spectral.discretize_panel(
            values, n_bins=int(cfg.get("n_bins", 3)))
        S = int(cfg.get("n_bins", 3)) ** 2
        joint = spectral.empirical_joint(states, S)
    rec = spectral.recover_system(joint, J)
    rec.save_json(cfg["out"])
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(
        args.config,
        allowed_keys=("panel", "typed_result", "pooled_result", "groups",
                      "investment", "out_prefix"),
        required_keys=("panel", "typed_result", "out_prefix"),
    )
    from .estimator import e_step
    from .residuals import residual_panel
    panel = PanelData.from_csv(cfg["panel"])
    typed = _model_from_result_json(cfg["typed_result"])
    posterior = e_step(panel, typed)
    assignment = analysis.classify(posterior)
    prefix = cfg["out_prefix"]
    _write_rows_csv(
        prefix + "_classification.csv", ("firm_id", "type"),
        [(fid, int(t) + 1) for fid, t in zip(panel.firm_ids, assignment)],
    )

    rows = []
    if cfg.get("pooled_result"):
        pooled = _model_from_result_json(cfg["pooled_result"])
        report = analysis.productivity_growth_bias(
            panel, typed, pooled, assignment)
        rows += report.to_rows()

    omega = np.empty((panel.n_firms, panel.T))
    for j in range(typed.J):
        sel = assignment == j
        if sel.any():
            omega[sel] = residual_panel(panel.subset(sel), typed, j)["omega"]
    if cfg.get("investment"):
        inv = _read_cell_csv(cfg["investment"], panel)
        for j in range(typed.J):
            sel = assignment == j
            if not sel.any():
                continue
            try:
                res = analysis.investment_regression(
                    panel.subset(sel), omega[sel], inv[sel])
            except ValueError:
                continue
            rows += res.to_rows(group=f"type{j + 1}")

    disp = analysis.share_dispersion(panel)
    for name, per_group in disp.items():
        for g, val in per_group.items():
            rows.append((str(g), f"dispersion_{name}_90_10", val, ""))
    for g, val in analysis.residualized_dispersion(panel).items():
        rows.append((str(g), "dispersion_residualized_90_10", val, ""))
    _write_rows_csv(prefix + "_analysis.csv",
                    ("group", "statistic", "value", "se"), rows)
    return EXIT_OK


def _read_cell_csv(path, panel: PanelData) -> np.ndarray:
    """(n, T) values from a firm_id,t,value CSV aligned to the panel."""
    values = np.full((panel.n_firms, panel.T), np.nan)
    index = {str(fid): i for i, fid in enumerate(panel.firm_ids)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 3:
            raise PanelFormatError(
                f"{path}: expected header firm_id,t,value"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                fid, t, val = row[0], int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise PanelFormatError(f"{path} line {lineno}: {exc}")
            if fid not in index or not 1 <= t <= panel.T:
                raise PanelFormatError(
                    f"{path} line {lineno}: unknown firm or period"
                )
            values[index[fid], t - 1] = val
    if np.isnan(values).any():
        raise PanelFormatError(f"{path}: missing cells")
    return values


def cmd_montecarlo(args) -> int:
    cfg = _load_config(
        args.config,
        allowed_keys=("n_reps", "n_firms", "T", "J", "model", "settings",
                      "seed", "tolerances", "out"),
        required_keys=("n_reps", "n_firms", "T", "J", "model", "out"),
    )
    from .simulate import SimConfig, simulate_panel
    n_reps = int(cfg["n_reps"])
    if n_reps < 1:
        raise ConfigError("n_reps must be >= 1")
    truth = model_from_dict(cfg["model"])
    J, T = truth.J, int(cfg["T"])
    base_seed = args.seed if args.seed is not None else int(
        cfg.get("seed", 0))
    tols = dict(cfg.get("tolerances") or {})

    track = ["pi"] + [
        f"{name}_type{j + 1}"
        for j in range(J)
        for name in ("beta_m", "beta_l", "beta_k", "rho_omega", "sigma_eta")
    ]
    errors = {name: [] for name in track}
    for rep in range(n_reps):
        sim = simulate_panel(SimConfig(
            n_firms=int(cfg["n_firms"]), T=T, model=truth,
            seed=base_seed + 1000 * rep,
        ))
        settings = _settings_from_dict(
            cfg.get("settings"), seed_override=base_seed + rep)
        result = fit(sim.panel, J, settings)
        perm = _best_type_match(truth, result.model)
        est = result.model.permuted(perm)
        errors["pi"].append(float(np.max(np.abs(est.pi - truth.pi))))
        for j in range(J):
            for name in ("beta_m", "beta_l", "beta_k", "rho_omega",
                         "sigma_eta"):
                errors[f"{name}_type{j + 1}"].append(
                    float(getattr(est.types[j], name)
                          - getattr(truth.types[j], name)))

    rows = []
    for name in track:
        errs = np.asarray(errors[name])
        bias = float(errs.mean())
        rmse = float(np.sqrt(np.mean(errs**2)))
        mae = float(np.mean(np.abs(errs)))
        tol = tols.get(name)
        status = "" if tol is None else ("pass" if mae <= tol else "fail")
        rows.append((name, bias, rmse, mae,
                     "" if tol is None else tol, status))
    _write_rows_csv(cfg["out"],
                    ("parameter", "bias", "rmse", "mae", "tolerance",
                     "status"), rows)
    if any(r[5] == "fail" for r in rows):
        return EXIT_NONCONVERGED
    return EXIT_OK


def _best_type_match(truth: MixtureModel, est: MixtureModel):
    """Permutation of estimated types minimizing elasticity distance."""
    J = truth.J
    best, best_d = None, np.inf
    for perm in itertools.permutations(range(J)):
        d = sum(
            abs(est.types[perm[j]].beta_m - truth.types[j].beta_m)
            + abs(est.types[perm[j]].beta_l - truth.types[j].beta_l)
            + abs(est.types[perm[j]].beta_k - truth.types[j].beta_k)
            for j in range(J)
        )
        if d < best_d:
            best, best_d = list(perm), d
    return best


def cmd_rankcheck(args) -> int:
    cfg = _load_config(
        args.config,
        allowed_keys=("system", "points", "out"),
        required_keys=("system", "out"),
    )
    sys_ = spectral.DiscreteMixturePanel.load_json(cfg["system"])
    pts = dict(cfg.get("points") or {})
    allowed = {"a_points", "b_points", "z2_pair", "z3", "z3_bar", "z3_star"}
    unknown = sorted(set(pts) - allowed)
    if unknown:
        raise ConfigError(f"unknown points keys: {', '.join(unknown)}")
    if not pts:
        joint = spectral.joint_from_system(sys_)
        sel = spectral.select_points(joint, sys_.J)
        z2c, z2b, zb = sel.z3_bar[sel.z3_star]
        pts = {
            "a_points": sel.a_points, "b_points": sel.b_points,
            "z2_pair": (z2c, z2b), "z3": sel.z3_star, "z3_bar": zb,
            "z3_star": sel.z3_star,
        }
    missing = sorted(allowed - set(pts))
    if missing:
        raise ConfigError(f"points is missing keys: {', '.join(missing)}")
    report = spectral.check_rank_conditions(
        sys_, pts["a_points"], pts["b_points"], tuple(pts["z2_pair"]),
        int(pts["z3"]), int(pts["z3_bar"]), int(pts["z3_star"]),
    )
    _write_rows_csv(cfg["out"], ("key", "value"),
                    spectral.rank_report_rows(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# driver

_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "identify": cmd_identify,
    "analyze": cmd_analyze,
    "montecarlo": cmd_montecarlo,
    "rankcheck": cmd_rankcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixprod",
        description="Finite-mixture production-function toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="accepted for compatibility; one thread is used")
        p.add_argument("--out", default=None,
                       help="override the primary output path")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PanelFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    # LinAlgError subclasses ValueError, so numerical failures must be
    # classified before generic invalid-value data errors
    except (spectral.SpectralError, np.linalg.LinAlgError,
            FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidParameterError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


_PRIMARY_OUT_KEY = {
    "simulate": "out_panel",
    "fit": "out_result",
    "identify": "out",
    "analyze": "out_prefix",
    "montecarlo": "out",
    "rankcheck": "out",
}


def _run(args) -> int:
    handler = _COMMANDS[args.command]
    if args.out is None:
        return handler(args)
    # --out rewrites the command's primary output key; the config file
    # itself is never modified
    key = _PRIMARY_OUT_KEY[args.command]
    real_load = globals()["_load_config"]

    def patched(path, allowed_keys, required_keys):
        cfg = real_load(path, allowed_keys, required_keys)
        cfg[key] = args.out
        return cfg

    globals()["_load_config"] = patched
    try:
        return handler(args)
    finally:
        globals()["_load_config"] = real_load


if __name__ == "__main__":
    sys.exit(main())
