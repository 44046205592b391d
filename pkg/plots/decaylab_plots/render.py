"""Batch renderer: one publication-style figure per estimate family.

Usage: python -m decaylab_plots.render <artifact-dir> [-o <figure-dir>]

Reads <name>.csv + <name>.manifest.json pairs produced by the decaylab CLI,
validates the manifest format version, and writes deterministic PNG files
(fixed style, metadata stripped, no timestamps): identical inputs yield
byte-identical images.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import SUPPORTED_FORMAT_VERSION  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 130,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "savefig.bbox": "tight",
}

PNG_KWARGS = {"metadata": {"Software": None}}


class SchemaMismatch(Exception):
    pass


@dataclass
class Artifact:
    name: str
    columns: dict
    manifest: dict


def load_artifact(csv_path: Path) -> Artifact:
    manifest_path = csv_path.with_suffix("").with_suffix("")  # strip .csv
    manifest_path = csv_path.parent / (csv_path.stem + ".manifest.json")
    if not manifest_path.exists():
        raise SchemaMismatch(f"missing manifest for {csv_path.name}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != SUPPORTED_FORMAT_VERSION:
        raise SchemaMismatch(
            f"{csv_path.name}: format_version {manifest.get('format_version')!r}"
            f" != {SUPPORTED_FORMAT_VERSION}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    cols = {h: [r[i] for r in rows] for i, h in enumerate(header)}
    return Artifact(csv_path.stem, cols, manifest)


# ---------------------------------------------------------------------------
# figure kinds
# ---------------------------------------------------------------------------

def fig_sweep(art: Artifact, ax):
    lam = art.columns["lam"]
    norm = art.columns["norm"]
    ax.loglog(lam, norm, "o-", label="weighted resolvent norm")
    ref = [norm[0] * lam[0] / x for x in lam]
    ax.loglog(lam, ref, "k--", alpha=0.6, label=r"$\lambda^{-1}$ reference")
    slope = _loglog_slope(lam, norm)
    ax.set_xlabel(r"$\lambda$")
    ax.set_ylabel("norm")
    ax.set_title(f"{art.manifest['estimate']}  (fitted slope {slope:.2f}, "
                 f"C* = {art.manifest['tolerances'].get('C_star', float('nan')):.3g})")
    ax.legend()


def fig_kernel(art: Artifact, ax):
    lam = art.columns["lam"]
    ax.semilogy(lam, art.columns["jump_residual_d3"], "o-", label="jump residual d=3")
    ax.semilogy(lam, art.columns["jump_residual_d2"], "s-", label="jump residual d=2")
    ax.semilogy(lam, art.columns["closed_form_err_d3"], "^-", label="closed-form error d=3")
    ax.set_xlabel(r"$\lambda$")
    ax.set_ylabel("residual")
    ax.set_title(art.manifest["estimate"])
    ax.legend()


def fig_carleman(art: Artifact, ax):
    ratios = art.columns["ratio"]
    ax.plot(range(1, len(ratios) + 1), ratios, "o")
    tol = art.manifest["tolerances"]
    ax.axhline(tol["ratio_max"], color="k", ls="--", alpha=0.6,
               label=f"max = {tol['ratio_max']:.3g}")
    ax.set_xlabel("trial")
    ax.set_ylabel("LHS / RHS")
    ax.set_title(f"{art.manifest['estimate']}  "
                 f"(median {tol['ratio_median']:.3g})")
    ax.legend()


def fig_continue(art: Artifact, ax):
    lam = art.columns["re_lam"]
    ax.plot(lam, art.columns["evaluator_norm"], "o-", label="continued norm")
    ax.plot(lam, art.columns["fredholm_min_sval"], "s-",
            label="Fredholm min singular value")
    ax.axhline(0.05, color="k", ls=":", alpha=0.6, label="pole threshold")
    ax.set_xlabel(r"Re $\lambda$")
    ax.set_title(art.manifest["estimate"])
    ax.legend()


def fig_pole_map(art: Artifact, ax):
    import numpy as np
    re = np.asarray(art.columns["re_lam"])
    im = np.asarray(art.columns["im_lam"])
    sv = np.asarray(art.columns["min_sval"])
    n_re = len(np.unique(re))
    n_im = len(np.unique(im))
    grid = sv.reshape(n_im, n_re)
    pc = ax.pcolormesh(re.reshape(n_im, n_re), im.reshape(n_im, n_re),
                       grid, shading="nearest", cmap="viridis")
    plt.colorbar(pc, ax=ax, label="min singular value")
    for cand in art.manifest.get("candidates", []):
        ax.plot(cand[0], cand[1], "rx", markersize=10)
    ax.set_xlabel(r"Re $\lambda$")
    ax.set_ylabel(r"Im $\lambda$")
    ax.set_title(f"{art.manifest['estimate']} (crosses: refined candidates)")


def fig_deriv(art: Artifact, ax):
    import math
    ks = art.columns["k"]
    norms = art.columns["deriv_norm"]
    ax.semilogy(ks, norms, "o-", label=r"$\|\partial_\lambda^k\|$")
    C = art.manifest["tolerances"]["fitted_C"]
    env = [C ** (k + 1) * math.factorial(int(k)) for k in ks]
    ax.semilogy(ks, env, "k--", alpha=0.6, label=rf"$C^{{k+1}}k!$, $C={C:.3g}$")
    ax.set_xlabel("k")
    ax.set_title(art.manifest["estimate"])
    ax.legend()


def fig_cutoff(art: Artifact, ax):
    s = art.columns["sigma"]
    ax.plot(s, art.columns["rho"], label=r"$\rho_m$")
    ax.plot(s, art.columns["cumulative"], label="cumulative")
    tol = art.manifest["tolerances"]
    ax.set_xlabel(r"$\sigma$")
    ax.set_title(f"{art.manifest['estimate']}  (fitted C = {tol['fitted_C']:.3g})")
    ax.legend()


def fig_hs(art: Artifact, ax):
    ax.plot(art.columns["eig"], art.columns["phi_eig"], "o", markersize=3)
    tol = art.manifest["tolerances"]
    ax.set_xlabel("eigenvalue")
    ax.set_ylabel(r"$\varphi$")
    ax.set_title(f"{art.manifest['estimate']}  "
                 f"(calculus defect {tol['hs_vs_eig']:.2e}, "
                 f"dbar slope {tol['dbar_slope']:.2f})")


def fig_decay(art: Artifact, ax):
    import math
    t = art.columns["t"]
    q = art.columns["quantity"]
    ax.semilogy(t, q, "o", label="weighted quantity")
    tol = art.manifest["tolerances"]
    c1, r2 = tol["fit_c1"], tol["fit_r2"]
    if math.isfinite(c1):
        q0 = q[0] * math.exp(c1 * t[0])
        ax.semilogy(t, [q0 * math.exp(-c1 * x) for x in t], "k--",
                    label=rf"$C_1 e^{{-c_1 t}}$, $c_1={c1:.3f}$, $R^2={r2:.4f}$")
    ax.set_xlabel("t")
    ax.set_title(art.manifest["estimate"])
    ax.legend()


def fig_hardy(art: Artifact, ax):
    labels = ["max ratio", "optimizer", "sharp constant"]
    vals = [art.columns["max_ratio"][0], art.columns["optimizer"][0],
            art.columns["sharp_constant"][0]]
    ax.bar(labels, vals, color=["C0", "C1", "C3"])
    ax.set_title(art.manifest["estimate"])


FIGURES = {
    "resolvent_sweep": fig_sweep,
    "kernel_check": fig_kernel,
    "carleman_verify": fig_carleman,
    "continue": fig_continue,
    "pole_scan": fig_pole_map,
    "deriv_bounds": fig_deriv,
    "cutoff_build": fig_cutoff,
    "hs_check": fig_hs,
    "wave_decay": fig_decay,
    "hardy": fig_hardy,
}


def _loglog_slope(x, y):
    import math
    lx = [math.log(v) for v in x]
    ly = [math.log(v) for v in y]
    n = len(lx)
    mx, my = sum(lx) / n, sum(ly) / n
    num = sum((a - mx) * (b - my) for a, b in zip(lx, ly))
    den = sum((a - mx) ** 2 for a in lx)
    return num / den


def render(figure_dir: Path, artifact: Artifact) -> Path:
    kind = artifact.name
    if kind not in FIGURES:
        raise SchemaMismatch(f"no figure kind for artifact {kind!r}")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        FIGURES[kind](artifact, ax)
        out = figure_dir / f"{kind}.png"
        fig.savefig(out, **PNG_KWARGS)
        plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("artifact_dir", type=Path)
    parser.add_argument("-o", "--output", type=Path, default=None,
                        help="figure directory (default: <artifact-dir>/figures)")
    args = parser.parse_args(argv)
    art_dir = args.artifact_dir
    fig_dir = args.output or art_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    csvs = sorted(art_dir.glob("*.csv"))
    if not csvs:
        print(f"no CSV artifacts in {art_dir}", file=sys.stderr)
        return 1
    count = 0
    for path in csvs:
        try:
            art = load_artifact(path)
        except SchemaMismatch as exc:
            print(f"schema mismatch: {exc}", file=sys.stderr)
            return 1
        out = render(fig_dir, art)
        print(f"wrote {out}")
        count += 1
    print(f"rendered {count} figures")
    return 0


if __name__ == "__main__":
    sys.exit(main())
