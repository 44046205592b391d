"""Reproducible experiment runner.

Each subcommand reads a sectioned key = value config (INI syntax, decimal
numbers, unknown keys rejected), runs one experiment family, and writes
<name>.csv plus <name>.manifest.json into the output directory.  Identical
config + seed reruns produce byte-identical CSVs.  The only environment
override honored is OUTPUT_DIR.

Exit codes: 0 success, 2 configuration error, 3 numerical invariant failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .errors import ConfigError, DecaylabError, NumericalFailure
from .io import Stopwatch, write_csv, write_manifest

# section -> key -> (type, default); None default means required when used
_SCHEMA = {
    "grid": {"mode": (str, "radial"), "d": (int, 1), "d_eff": (int, 3),
             "n": (int, 1000), "extent": (float, 20.0),
             "obstacle_radius": (float, 0.0)},
    "fields": {"v_amplitude": (float, 1.0), "v_rate": (float, 2.0),
               "b_amplitude": (float, 0.0), "tag": (str, "exponential")},
    "carleman": {"s": (float, 0.6), "ell_w": (float, 0.3),
                 "kappa": (float, 0.1), "a0": (float, 1.0),
                 "tau": (float, 4.0), "p_exp": (float, 0.6),
                 "variant": (str, "2.5"), "trials": (int, 20),
                 "lambda_": (float, 2.0), "epsilon": (float, 1e-6),
                 "theta": (float, 0.0)},
    "sweep": {"lambda_min": (float, 0.5), "lambda_max": (float, 20.0),
              "points": (int, 10), "epsilon": (float, 1e-3),
              "weight": (str, "exp"), "weight_s": (float, 0.6),
              "mu_rate": (float, 2.0), "low_frequency": (int, 0)},
    "cutoff": {"delta": (float, 0.3), "m": (int, 8)},
    "continuation": {"anchor_re": (float, 2.0), "anchor_im": (float, -0.8),
                     "lam_blocks": (str, "kernel"), "mu_rate": (float, 2.0),
                     "eta_inner": (float, 1.6), "eta_outer": (float, 3.0),
                     "re_min": (float, 0.5), "re_max": (float, 3.0),
                     "im_min": (float, -0.3), "im_max": (float, 0.1),
                     "re_points": (int, 9), "im_points": (int, 5),
                     "k_max": (int, 6), "sigma": (float, 0.25)},
    "wave": {"t_min": (float, 2.0), "t_max": (float, 30.0),
             "points": (int, 29), "probe": (str, "random-data"),
             "mu_rate": (float, 0.6), "schedule_c": (float, 1.0),
             "band_lo": (float, 0.6), "band_hi": (float, 3.5),
             "n_data": (int, 8)},
    "hs": {"n_matrix": (int, 80), "order": (int, 8), "cell": (float, 0.04),
           "y_floor": (float, 0.05)},
    "output": {"dir": (str, "out"), "seed": (int, None)},
}

SUBCOMMANDS = ["carleman-verify", "resolvent-sweep", "kernel-check",
               "continue", "pole-scan", "deriv-bounds", "cutoff-build",
               "hs-check", "wave-decay", "hardy"]


def load_config(path, overrides=()) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found")
    cfg = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        cfg[section] = {}
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ, _ = _SCHEMA[section][key]
            try:
                cfg[section][key] = typ(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        dotted, value = ov.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override target {dotted!r}")
        cfg.setdefault(section, {})[key] = _SCHEMA[section][key][0](value)
    # defaults
    for section, keys in _SCHEMA.items():
        cfg.setdefault(section, {})
        for key, (typ, default) in keys.items():
            if key not in cfg[section]:
                if default is None and section == "output" and key == "seed":
                    raise ConfigError("output.seed is mandatory")
                cfg[section][key] = default
    return cfg


def _out_dir(cfg) -> Path:
    out = os.environ.get("OUTPUT_DIR", cfg["output"]["dir"])
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _grid(cfg):
    from .lattice import cartesian_grid, radial_grid

    g = cfg["grid"]
    if g["mode"] == "radial":
        return radial_grid(g["extent"], g["n"], d_eff=g["d_eff"])
    return cartesian_grid(g["d"], g["extent"], g["n"])


def _fields(cfg):
    from .weights import FieldSpec, bracket

    f = cfg["fields"]
    amp, rate = f["v_amplitude"], f["v_rate"]
    b_amp = f["b_amplitude"]
    V = lambda x: amp * np.exp(-rate * bracket(x))
    b = None
    if b_amp != 0.0:
        b = lambda m: b_amp * np.exp(-np.abs(np.asarray(m, dtype=float)))
    return FieldSpec(V=V, b=b, tag=f["tag"], c_exp=rate,
                     C_bound=max(4.0 * (amp + abs(b_amp)), 1.0))


def _operator(cfg):
    from .lattice import assemble_dirichlet_exterior, assemble_magnetic, \
        assemble_radial_sector, disc_obstacle
    from .weights import bracket

    g = cfg["grid"]
    grid = _grid(cfg)
    fields = _fields(cfg)
    if g["mode"] == "radial":
        amp, rate = cfg["fields"]["v_amplitude"], cfg["fields"]["v_rate"]
        return assemble_radial_sector(0, g["d_eff"],
                                      lambda rr: amp * np.exp(-rate * bracket(rr)),
                                      grid)
    if g["obstacle_radius"] > 0:
        mask = disc_obstacle(grid, g["obstacle_radius"])
        return assemble_dirichlet_exterior(grid, mask, fields.V)
    return assemble_magnetic(grid, fields)


# ---------------------------------------------------------------------------
# subcommand bodies: each returns (columns, estimate_tag, tolerances, extra)
# ---------------------------------------------------------------------------

def _run_carleman_verify(cfg, rng):
    from .resolvent import carleman_ratio, lemma23_check
    from .weights import CarlemanParams, verify_lemma21

    c = cfg["carleman"]
    p = CarlemanParams(c["s"], c["ell_w"], c["kappa"], c["a0"], c["tau"])
    r = np.linspace(1e-3, 4.0 * p.A, 2000)
    r = r[np.abs(r - p.A) > 1e-9]
    rep = verify_lemma21(p, r)
    ratios = carleman_ratio(p, c["tau"], c["lambda_"], c["epsilon"],
                            c["trials"], c["variant"], grid=_grid(cfg),
                            seed=cfg["output"]["seed"])
    # the shifted-inverse scalings need the lattice band to reach the
    # norm-maximizing frequencies h^2 Lambda ~ theta^2: run on a dedicated
    # fine grid at moderate (lambda, tau)
    from .lattice import radial_grid
    from .resolvent import neumann_theta0
    grid23 = radial_grid(10.0, 1200)
    tau23, lam23 = 2.0, 1.0
    theta0 = neumann_theta0(p.with_tau(tau23), tau23, lam23, c["p_exp"], grid23)
    theta = c["theta"] if c["theta"] > 0 else theta0
    rep23 = lemma23_check(p.with_tau(tau23), tau23, lam23, theta,
                          c["p_exp"], grid23)
    cols = {
        "ratio": ratios.ratios,
    }
    tol = {"lemma21_min_margin": float(min(rep.margin_21.min(initial=np.inf),
                                           rep.margin_22.min(initial=np.inf))),
           "fitted_C23": rep.fitted_C23, "fitted_C24": rep.fitted_C24,
           "ratio_max": ratios.max, "ratio_median": ratios.median,
           "theta0": rep23.theta0}
    extra = {"lemma23_exponents": rep23.fitted_exponents}
    return cols, "lemma2.1+prop2.2+lemma2.3", tol, extra


def _run_resolvent_sweep(cfg, rng):
    from .resolvent import ResolventQuery, lambda_sweep, low_frequency_sweep
    from .weights import ExpWeight

    s = cfg["sweep"]
    op = _operator(cfg)
    lg = np.linspace(s["lambda_min"], s["lambda_max"], s["points"])
    if s["low_frequency"]:
        prof = low_frequency_sweep(op, lg, s=s["weight_s"], epsilon=s["epsilon"])
        tag = "thm5.1"
    else:
        weight = ("exp", ExpWeight(s["mu_rate"])) if s["weight"] == "exp" \
            else ("poly", s["weight_s"])
        q = ResolventQuery(lg[0], s["epsilon"], 1, weight)
        prof = lambda_sweep(op, lg, q)
        tag = "thm3.1" if op.grid.obstacle_mask is None else "thm4.1"
    cols = {"lam": prof.lambda_grid, "norm": prof.norms,
            "norm_half_eps": prof.norms_eps_half,
            "norm_times_lam": prof.norms * prof.lambda_grid}
    tol = {"C_star": prof.C_star, "eps_stability": prof.eps_stability}
    return cols, tag, tol, {}


def _run_kernel_check(cfg, rng):
    from .freekernel import (free_kernel, hankel_minus,
                             jump_identity_residual, weighted_free_resolvent)
    from .weights import ExpWeight

    mu = ExpWeight(cfg["sweep"]["mu_rate"])
    lam_grid = np.linspace(cfg["sweep"]["lambda_min"], cfg["sweep"]["lambda_max"],
                           cfg["sweep"]["points"])
    grid = _grid(cfg)
    norms, jumps3, jumps2 = [], [], []
    x3 = np.array([0.7, -0.2, 0.4]); y3 = np.array([-0.3, 0.5, 0.1])
    x2 = np.array([0.9, 0.2]); y2 = np.array([-0.4, 0.6])
    closed = []
    for lam in lam_grid:
        km = weighted_free_resolvent(grid, lam + 0.05j, mu)
        norms.append(km.opnorm() * (abs(lam + 0.05j) + 1.0))
        jumps3.append(jump_identity_residual(x3, y3, lam, 3))
        jumps2.append(jump_identity_residual(x2, y2, lam, 2))
        r = np.linalg.norm(x3 - y3)
        closed.append(abs(free_kernel(x3, y3, lam, 3)
                          - np.exp(-1j * lam * r) / (4 * np.pi * r)))
    cols = {"lam": lam_grid, "weighted_norm_scaled": np.asarray(norms),
            "jump_residual_d3": np.asarray(jumps3),
            "jump_residual_d2": np.asarray(jumps2),
            "closed_form_err_d3": np.asarray(closed)}
    tol = {"max_jump_residual": float(max(np.max(jumps3), np.max(jumps2))),
           "max_closed_form_err": float(np.max(closed))}
    return cols, "lemmaC.1+C.2", tol, {}


def _continuation_state(cfg):
    from .resolvent import build_continuation
    from .weights import ExpWeight, bracket

    c = cfg["continuation"]
    op = _operator(cfg)
    mu = ExpWeight(c["mu_rate"])
    z = complex(c["anchor_re"], c["anchor_im"])
    eta = None
    if op.grid.obstacle_mask is not None:
        pts = _grid(cfg).points()
        rr = np.linalg.norm(pts, axis=-1)
        t = np.clip((rr - c["eta_inner"]) / (c["eta_outer"] - c["eta_inner"]), 0, 1)
        eta = 1.0 - t * t * (3 - 2 * t)
        case = "b"
    else:
        case = "a"
    return build_continuation(case, op, z, mu, eta=eta,
                              lam_blocks=c["lam_blocks"]), op


def _run_continue(cfg, rng):
    c = cfg["continuation"]
    state, op = _continuation_state(cfg)
    lams = np.linspace(c["re_min"], c["re_max"], c["re_points"])
    vals, svals = [], []
    from ._linalg import min_singular_value
    for lam in lams:
        Y = state.evaluate(complex(lam, c["im_max"]))
        vals.append(float(np.linalg.norm(Y, 2)))
        svals.append(min_singular_value(state.fredholm_matrix(complex(lam, c["im_max"]))))
    cols = {"re_lam": lams, "evaluator_norm": np.asarray(vals),
            "fredholm_min_sval": np.asarray(svals)}
    tol = {"min_fredholm_sval": float(np.min(svals))}
    return cols, "prop3.2/thm4.2", tol, {}


def _run_pole_scan(cfg, rng):
    from .resolvent import pole_scan

    c = cfg["continuation"]
    state, op = _continuation_state(cfg)
    pm = pole_scan(state, (complex(c["re_min"], c["im_min"]),
                           complex(c["re_max"], c["im_max"])),
                   resolution=(c["re_points"], c["im_points"]))
    re_mesh, im_mesh = np.meshgrid(pm.re_grid, pm.im_grid)
    cols = {"re_lam": re_mesh.ravel(), "im_lam": im_mesh.ravel(),
            "min_sval": pm.min_svals.ravel()}
    tol = {"n_candidates": len(pm.candidates)}
    extra = {"candidates": [[c0.real, c0.imag, v] for c0, v in pm.candidates]}
    return cols, "resonance-scan", tol, extra


def _run_deriv_bounds(cfg, rng):
    from .resolvent import derivative_bounds

    c = cfg["continuation"]
    state, op = _continuation_state(cfg)
    lam0 = 0.5 * (c["re_min"] + c["re_max"])
    table = derivative_bounds(lambda z: state.evaluate(z), c["k_max"], lam0,
                              c["sigma"])
    cols = {"k": table.orders.astype(float), "deriv_norm": table.norms}
    tol = {"fitted_C": table.fitted_C}
    return cols, "thm3.3/4.2+lemmaB.1", tol, {}


def _run_cutoff_build(cfg, rng):
    from .cutoffs import build_rho

    c = cfg["cutoff"]
    fam = build_rho(c["m"], c["delta"])
    cols = {"sigma": fam.sigma_grid, "rho": fam.rho_samples,
            "cumulative": fam.cum_spline(fam.sigma_grid)}
    tol = {"mass_defect": float(abs(fam.cum_spline.right - 1.0)),
           "fitted_C": fam.fitted_C}
    return cols, "sec6-cutoffs", tol, {}


def _run_hs_check(cfg, rng):
    from .cutoffs import HSQuadrature, almost_analytic, hs_apply

    h = cfg["hs"]
    n = h["n_matrix"]
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    M = (A + A.conjugate().T) / (2.0 * np.sqrt(n))
    lam, V = np.linalg.eigh(M)
    x0, sig = 0.5, 0.4
    phi = lambda x: np.exp(-0.5 * ((np.asarray(x) - x0) / sig) ** 2)
    ext = almost_analytic(phi, h["order"], support=(x0 - 3, x0 + 3), y_cut=0.8)
    hs = hs_apply(M, ext, (x0 - 3, x0 + 3),
                  HSQuadrature(cell=h["cell"], y_floor=h["y_floor"], x_pad=2.0))
    ref = (V * phi(lam)[None, :]) @ V.conjugate().T
    err = float(np.linalg.norm(hs - ref, 2))
    slope = ext.vanishing_rate(x0)
    cols = {"eig": lam, "phi_eig": phi(lam)}
    tol = {"hs_vs_eig": err, "dbar_slope": slope}
    return cols, "helffer-sjostrand(7.3)", tol, {}


def _run_wave_decay(cfg, rng):
    from .cutoffs import build_rho
    from .wavelab import decay_experiment, decompose, duhamel_residual, \
        fourier_identity_check, smooth_switch
    from .weights import ExpWeight

    w = cfg["wave"]
    op = _operator(cfg)
    dec = decompose(op)
    mu = ExpWeight(w["mu_rate"])
    tg = np.linspace(w["t_min"], w["t_max"], w["points"])
    fam = build_rho(cfg["cutoff"]["m"], cfg["cutoff"]["delta"])
    curve = decay_experiment(dec, mu, "schedule", tg, probe=w["probe"],
                             m_schedule_C=w["schedule_c"],
                             delta=cfg["cutoff"]["delta"],
                             n_data=w["n_data"], seed=cfg["output"]["seed"],
                             data_band=(w["band_lo"], w["band_hi"]))
    curve.fit(w["t_min"], w["t_max"])
    r = op.grid.axis_coords() if op.grid.mode == "radial" else None
    if r is not None:
        f = np.exp(-((r - 5.0) / 1.5) ** 2)
    else:
        f = rng.standard_normal(op.n)
        f /= np.linalg.norm(f)
    duh = duhamel_residual(dec, smooth_switch(1.0), f,
                           np.linspace(0.6, 4.0, 5))
    fou = fourier_identity_check(dec, mu, fam, 0.1, [1.0, 2.0])
    cols = {"t": curve.t_grid, "quantity": curve.quantity}
    tol = {"fit_c1": curve.fit_c1, "fit_r2": curve.fit_r2,
           "duhamel_residual": duh, "fourier_residual": float(np.max(fou))}
    return cols, "thm1.1(1.7)", tol, {}


def _run_hardy(cfg, rng):
    from .wavelab import hardy_check

    d_eff = cfg["grid"]["d_eff"]
    out = hardy_check(d_eff, grid=_grid(cfg))
    cols = {"max_ratio": np.array([out["max_ratio"]]),
            "optimizer": np.array([out["optimizer"]]),
            "sharp_constant": np.array([out["sharp"]])}
    tol = {"max_ratio": out["max_ratio"], "sharp": out["sharp"]}
    return cols, "lemmaD.1", tol, {}


_BODIES = {
    "carleman-verify": _run_carleman_verify,
    "resolvent-sweep": _run_resolvent_sweep,
    "kernel-check": _run_kernel_check,
    "continue": _run_continue,
    "pole-scan": _run_pole_scan,
    "deriv-bounds": _run_deriv_bounds,
    "cutoff-build": _run_cutoff_build,
    "hs-check": _run_hs_check,
    "wave-decay": _run_wave_decay,
    "hardy": _run_hardy,
}


def run(subcommand: str, config_path, overrides=()) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        if subcommand not in _BODIES:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        cfg = load_config(config_path, overrides)
        out = _out_dir(cfg)
        seed = cfg["output"]["seed"]
        rng = np.random.default_rng(seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    name = subcommand.replace("-", "_")
    try:
        with Stopwatch() as sw:
            cols, tag, tol, extra = _BODIES[subcommand](cfg, rng)
        for key, value in tol.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise NumericalFailure(f"invariant {key} is not finite")
        write_csv(out / f"{name}.csv", cols)
        write_manifest(out / f"{name}.manifest.json", estimate=tag, config=cfg,
                       seed=seed, wall_time=sw.elapsed, tolerances=tol,
                       extra=extra)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DecaylabError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {out / (name + '.csv')}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="decaylab",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="path to the experiment config")
    parser.add_argument("-o", "--override", action="append", default=[],
                        metavar="section.key=value")
    args = parser.parse_args(argv)
    return run(args.subcommand, args.config, args.override)


if __name__ == "__main__":
    sys.exit(main())
