"""Command-line front end.

Usage::

    cpct simulate     --config run.cfg
    cpct reconstruct  --config run.cfg
    cpct opnorm       --config run.cfg
    cpct export-pgm   --config run.cfg [--window LO HI] [--roi COL ROW W H]

The config is a flat ``key = value`` file with ``#`` comments. Unknown keys
are rejected. Relative paths are resolved against the directory holding
the config file.

Exit status: 0 on success (for ``reconstruct``: the gap tolerance was
reached), 2 when ``reconstruct`` ran out of iterations (outputs are still
written), 1 on any error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convex import pos
from .operators import (
    FanBeamGeometry,
    GradientOperator,
    IdentityOperator,
    StackedOperator,
    get_projector,
    power_method,
)
from .simulation import NoiseSpec, PhantomSpec, add_poisson_noise, make_phantom, simulate_sinogram
from .solvers import Instance, SolverConfig, solve
from .spaces import FieldKind, read_field, write_field

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2
DEFAULT_WINDOW = (0.95, 1.15)


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


# key -> (parser, default)
SCHEMA = {
    # geometry
    "M": (int, 64),
    "n_views": (int, 60),
    "n_bins": (int, 128),
    "source_radius": (float, 40.0),
    "source_detector_distance": (float, 80.0),
    "detector_width": (float, 10.24),
    "image_side": (_opt_float, None),
    # phantom and noise
    "phantom_seed": (int, 0),
    "n_calcifications": (int, 8),
    "n_fibroglandular": (int, 14),
    "incident_counts": (float, 1e4),
    "noise_seed": (int, 1),
    "noise": (_bool, True),
    # solver
    "instance": (str, "l2tv"),
    "lam": (float, 1e-4),
    "epsilon": (_opt_float, None),
    "max_iters": (int, 1000),
    "gap_tol": (float, 1e-5),
    "theta": (float, 1.0),
    "step_safety": (float, 1.0),
    "power_iters": (int, 100),
    "nonneg_images": (_bool, False),
    "report_every": (int, 10),
    "air_threshold": (float, 0.0),
    # opnorm
    "operator": (str, "stacked"),
    # paths
    "output_dir": (str, "."),
    "sinogram": (str, "sinogram_noisy.img"),
    "image": (str, "recon.img"),
    "pgm": (str, ""),
    # display
    "window": (_floats, DEFAULT_WINDOW),
    "roi": (_ints, ()),
}
_CANONICAL = {k.lower(): k for k in SCHEMA}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict
    base_dir: Path
    explicit: set = field(default_factory=set)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def output_dir(self) -> Path:
        return self.base_dir / self.values["output_dir"]

    def out_path(self, key) -> Path:
        """Data files live in ``output_dir`` unless given with a directory."""
        p = Path(self.values[key])
        if p.is_absolute():
            return p
        if key in self.explicit and len(p.parts) > 1:
            return self.base_dir / p
        return self.output_dir / p

    def geometry(self) -> FanBeamGeometry:
        v = self.values
        return FanBeamGeometry(
            M=v["M"], n_views=v["n_views"], n_bins=v["n_bins"],
            source_radius=v["source_radius"],
            source_detector_distance=v["source_detector_distance"],
            bin_size=v["detector_width"] / v["n_bins"], image_side=v["image_side"],
        )

    def solver_config(self) -> SolverConfig:
        v = self.values
        return SolverConfig(
            instance=v["instance"], lam=v["lam"], epsilon=v["epsilon"], max_iters=v["max_iters"],
            gap_tol=v["gap_tol"], theta=v["theta"], step_safety=v["step_safety"],
            power_iters=v["power_iters"], nonneg_images=v["nonneg_images"],
            report_every=v["report_every"],
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None, strict=True,
    )
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {k: default for k, (_, default) in SCHEMA.items()}
    explicit = set()
    for raw_key, raw in parser["run"].items():
        key = _CANONICAL.get(raw_key)
        if key is None:
            raise ConfigError(f"unknown config key {raw_key!r}")
        try:
            values[key] = SCHEMA[key][0](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        explicit.add(key)
    return RunConfig(values=values, base_dir=path.resolve().parent, explicit=explicit)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    geom = cfg.geometry()
    v = cfg.values
    phantom = make_phantom(PhantomSpec(M=v["M"], seed=v["phantom_seed"],
                                       n_calcifications=v["n_calcifications"],
                                       n_fibroglandular=v["n_fibroglandular"]))
    clean = simulate_sinogram(geom, phantom)
    noise = NoiseSpec(incident_counts=v["incident_counts"], seed=v["noise_seed"])
    noisy = add_poisson_noise(clean, noise) if v["noise"] else clean.copy()

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_field(out / "phantom.img", phantom, FieldKind.IMAGE)
    write_field(out / "sinogram_clean.img", clean, FieldKind.SINOGRAM)
    write_field(out / "sinogram_noisy.img", noisy, FieldKind.SINOGRAM)
    lines = [f"{k} = {_fmt(v[k])}" for k in SCHEMA]
    lines += [f"pixel_size = {geom.pixel_size!r}", f"image_side_resolved = {geom.image_side!r}",
              f"fov_radius = {geom.fov_radius!r}"]
    (out / "metadata.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote phantom {phantom.shape} and sinograms {clean.shape} to {out}")
    return EXIT_OK


def _fmt(x):
    if isinstance(x, tuple):
        return " ".join(str(t) for t in x)
    return "none" if x is None else str(x)


# CSV residual columns per instance: (resid_dualfeas, resid_extra1, resid_extra2)
RESIDUAL_COLUMNS = {
    Instance.LS: ("dual_feasibility", "image_nonneg", None),
    Instance.LS_NONNEG: ("dual_nonneg", "image_nonneg", None),
    Instance.L2TV: ("dual_feasibility", "q_bound", "image_nonneg"),
    Instance.KLTV: ("dual_feasibility", "data_nonneg", "p_upper"),
    Instance.PRECOND_KLTV: ("dual_feasibility", "data_nonneg", "p_upper"),
    Instance.L1TV: ("dual_feasibility", "p_box", "q_bound"),
    Instance.CONSTRAINED_TV: ("dual_feasibility", "data_ball", "q_bound"),
}
CSV_HEADER = ["n", "primal", "dual", "gap", "resid_dualfeas", "resid_extra1", "resid_extra2"]


def _csv_row(rep, cols):
    row = [str(rep.n), repr(rep.primal), repr(rep.dual), repr(rep.gap)]
    for name in cols:
        val = rep.residuals.get(name) if name else None
        row.append("" if val is None else repr(float(val)))
    return row


def prepare_data(g, instance, air_threshold=0.0):
    """KL data must be non-negative: clip, then zero entries below ``air_threshold``."""
    if Instance(instance) in (Instance.KLTV, Instance.PRECOND_KLTV):
        g = pos(g)
        if air_threshold > 0:
            g = np.where(g < air_threshold, 0.0, g)
    return g


def cmd_reconstruct(cfg: RunConfig) -> int:
    geom = cfg.geometry()
    config = cfg.solver_config()
    kind, g = read_field(cfg.out_path("sinogram"))
    if kind is not FieldKind.SINOGRAM:
        raise ConfigError(f"{cfg.out_path('sinogram')} is not a sinogram")
    if g.shape != geom.sinogram_shape:
        raise ConfigError(f"sinogram shape {g.shape} does not match geometry {geom.sinogram_shape}")
    g = prepare_data(g, config.instance, cfg["air_threshold"])

    result = solve(g, geom, config)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_field(out / "recon.img", result.image, FieldKind.IMAGE)

    cols = RESIDUAL_COLUMNS[config.instance]
    with open(out / "convergence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rep in result.reports:
            w.writerow(_csv_row(rep, cols))

    final = result.final
    lines = [
        f"instance = {config.instance.value}",
        f"converged = {result.converged}",
        f"iterations = {result.n_iter}",
        f"max_iters = {config.max_iters}",
        f"gap_tol = {config.gap_tol!r}",
        f"final_gap = {final.conditional_gap!r}" if final else "final_gap = none",
        f"final_primal = {final.primal!r}" if final else "final_primal = none",
        f"final_dual = {final.dual!r}" if final else "final_dual = none",
        f"operator_norm = {result.state.L!r}",
        f"resid_dualfeas = {cols[0]}",
        f"resid_extra1 = {cols[1] or 'unused'}",
        f"resid_extra2 = {cols[2] or 'unused'}",
    ]
    if final:
        lines += [f"residual.{k} = {v!r}" for k, v in sorted(final.residuals.items())]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    status = "converged" if result.converged else "budget exhausted"
    print(f"{config.instance.value}: {status} after {result.n_iter} iterations, "
          f"gap {final.conditional_gap if final else float('nan'):.3e}")
    return EXIT_OK if result.converged else EXIT_BUDGET


def cmd_opnorm(cfg: RunConfig) -> int:
    which = cfg["operator"]
    if which == "identity":
        K = IdentityOperator((cfg["M"], cfg["M"]))
    else:
        geom = cfg.geometry()
        if which == "projector":
            K = get_projector(geom)
        elif which == "gradient":
            K = GradientOperator(geom.M)
        elif which == "stacked":
            K = StackedOperator(get_projector(geom), GradientOperator(geom.M))
        else:
            raise ConfigError(f"unknown operator {which!r}")
    res = power_method(K, n_iter=cfg["power_iters"])
    print(f"L = {res.L!r}")
    print(f"iterations = {res.iterations_used}")
    for n, s in enumerate(res.trace, start=1):
        print(f"{n} {s!r}")
    return EXIT_OK


def to_pgm_bytes(image, window=DEFAULT_WINDOW, roi=()) -> bytes:
    """Linear window/level mapping to 8-bit grey.

    ``lo`` maps to 0, ``hi`` to 255 and the midpoint to 128; values outside
    the window are clamped. ``roi = (col, row, width, height)`` crops first.
    """
    lo, hi = window
    if not hi > lo:
        raise ValueError("window must satisfy LO < HI")
    img = np.asarray(image, dtype=np.float64)
    if roi:
        if len(roi) != 4:
            raise ValueError("roi needs COL ROW WIDTH HEIGHT")
        c, r, w, h = roi
        if c < 0 or r < 0 or w < 1 or h < 1 or c + w > img.shape[1] or r + h > img.shape[0]:
            raise ValueError(f"roi {roi} outside image of shape {img.shape}")
        img = img[r:r + h, c:c + w]
    t = (img - lo) * 255.0 / (hi - lo)
    # Ties round up; the small offset absorbs representation error at the midpoint.
    grey = np.clip(np.floor(t + 0.5 + 1e-9), 0, 255).astype(np.uint8)
    header = f"P5\n{grey.shape[1]} {grey.shape[0]}\n255\n".encode("ascii")
    return header + grey.tobytes()


def cmd_export_pgm(cfg: RunConfig, window=None, roi=None, input_path=None, output_path=None) -> int:
    src = Path(input_path) if input_path else cfg.out_path("image")
    kind, img = read_field(src)
    if kind is not FieldKind.IMAGE:
        raise ConfigError(f"{src} holds a {kind.name.lower()}, not an image")
    window = tuple(window) if window else cfg["window"]
    roi = tuple(roi) if roi else cfg["roi"]
    if output_path:
        dst = Path(output_path)
    elif cfg["pgm"]:
        dst = cfg.out_path("pgm")
    else:
        dst = src.with_suffix(".pgm")
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_bytes(to_pgm_bytes(img, window, roi))
    print(f"wrote {dst}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpct", description="Primal-dual CT reconstruction")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "opnorm", "export-pgm"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="key = value run configuration")
        if name == "export-pgm":
            sp.add_argument("--window", nargs=2, type=float, metavar=("LO", "HI"))
            sp.add_argument("--roi", nargs=4, type=int, metavar=("COL", "ROW", "W", "H"))
            sp.add_argument("--input", help="image file (default: recon.img in output_dir)")
            sp.add_argument("--output", help="PGM destination")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        if args.command == "opnorm":
            return cmd_opnorm(cfg)
        return cmd_export_pgm(cfg, args.window, args.roi, args.input, args.output)
    except (OSError, ValueError, TypeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
