"""Command-line entry point: ``vpr <mode> --config run.ini [--seed N] [--out-dir D] [--threads N]``.

Every invocation writes a fresh ``<out-dir>/<mode>-NNN`` directory holding the
artifacts, the canonical config (``config.ini``, absolute paths) and exactly
one ``manifest.txt``.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import io as vio
from .config import MODES, RunConfig, load_config
from .diagnostics import (
    analytic_gaussian_posterior,
    butterfly_compare,
    correlation_submatrix,
    ensemble_stats,
    gaussian_kl,
    grid_brute_posterior,
    marginal_histograms,
    relative_error_map,
    window_cells,
)
from .errors import ConfigError, ContractViolation, DimensionError, VprError
from .forward import COUNTER, AcousticForward, AcousticSolver, LinearForward, Survey, read_waveforms, \
    ricker, write_waveforms
from .gaussian import SparsityPattern, load_variational, save_variational
from .manifest import RunManifest, config_hash, write_trace
from .priors import (
    DiagonalGaussianPrior,
    SmoothedPrior,
    SmoothingOperator,
    UniformPrior,
    assemble_windowed_covariance,
    build_local_correlation,
)
from .replacement import VprProblem, run_vpr
from .scenarios import conjugate_problem
from .transforms import BoundedBox
from .vi import posterior_target, run_psi


# -- builders -----------------------------------------------------------------------------
def _grid(cfg: RunConfig):
    return cfg.require("grid", "nz"), cfg.require("grid", "nx")


def _per_cell(vals, nz, nx, what):
    """Scalar, one value per depth row, or one value per cell."""
    v = np.asarray(vals, dtype=np.float64)
    if v.size == 1:
        return np.full(nz * nx, v[0])
    if v.size == nz:
        return np.repeat(v, nx)
    if v.size == nz * nx:
        return v
    raise DimensionError(f"{what} has {v.size} values; expected 1, {nz} (per depth) or {nz * nx}")


def build_box(cfg: RunConfig, section: str | None = None) -> BoundedBox:
    nz, nx = _grid(cfg)
    n = nz * nx
    wr = cfg.get("grid", "water_rows")
    fixed = np.zeros(n, dtype=bool)
    fixed[:wr * nx] = True
    fixed_vals = np.where(fixed, cfg.get("grid", "water_velocity"), 0.0)
    if cfg.get("bounds", "unbounded"):
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo = _per_cell(cfg.require("bounds", "lower"), nz, nx, "bounds.lower")
        hi = _per_cell(cfg.require("bounds", "upper"), nz, nx, "bounds.upper")
    if section is not None:
        if cfg.has(section, "lower"):
            lo = _per_cell(cfg.get(section, "lower"), nz, nx, f"{section}.lower")
        if cfg.has(section, "upper"):
            hi = _per_cell(cfg.get(section, "upper"), nz, nx, f"{section}.upper")
    return BoundedBox(lo, hi, fixed_mask=fixed, fixed_values=fixed_vals)


def _field(cfg, section, key, file_key, nz, nx, default):
    if cfg.has(section, file_key):
        return vio.read_grid(cfg.get(section, file_key)).ravel()
    if cfg.has(section, key):
        return _per_cell(cfg.get(section, key), nz, nx, f"{section}.{key}")
    return default


def build_prior(cfg: RunConfig, section: str):
    nz, nx = _grid(cfg)
    box = build_box(cfg, section)
    family = cfg.get(section, "family")
    mean = _field(cfg, section, "mean", "mean_file", nz, nx, box.center())
    std = _field(cfg, section, "std", "std_file", nz, nx, box.uniform_std())
    if family == "uniform":
        return UniformPrior(box)
    if family == "gaussian":
        return DiagonalGaussianPrior(mean, std, box)
    if family == "smoothed":
        base = DiagonalGaussianPrior(mean, std, box) if cfg.get(section, "base") == "gaussian" \
            else UniformPrior(box)
        return SmoothedPrior(SmoothingOperator(nz, nx), cfg.get(section, "sigma2"), base=base)
    if family == "windowed":
        path = cfg.get(section, "correlation")
        if path is None:
            raise ConfigError(f"missing required key 'correlation' in section [{section}]")
        R = np.load(path)
        return assemble_windowed_covariance(R, std, nz, nx, box=box, mu=mean,
                                            max_jitter=cfg.get(section, "max_jitter"))
    raise ConfigError(f"unknown prior family {family!r}")


def build_survey(cfg: RunConfig) -> Survey:
    nt, dt = cfg.get("survey", "nt"), cfg.get("survey", "dt")
    nz, nx = _grid(cfg)
    if cfg.has("survey", "receivers"):
        recs = cfg.get("survey", "receivers")
    else:
        row = cfg.get("survey", "receiver_row", cfg.get("grid", "water_rows"))
        recs = [(row, j) for j in range(nx)]
    wav = cfg.get("survey", "amplitude") * ricker(cfg.get("survey", "f0"), dt, nt)
    sv = Survey(cfg.require("survey", "sources"), recs, dt, nt, wav)
    sv.check_grid(nz, nx)
    return sv


def _water_mask(cfg):
    nz, nx = _grid(cfg)
    m = np.zeros((nz, nx), dtype=bool)
    m[:cfg.get("grid", "water_rows")] = True
    return m


def build_solver(cfg: RunConfig) -> AcousticSolver:
    nz, nx = _grid(cfg)
    return AcousticSolver(nz, nx, cfg.get("grid", "dx"), build_survey(cfg),
                          sponge=cfg.get("forward", "sponge"), threads=cfg.threads,
                          water_mask=_water_mask(cfg))


def build_forward(cfg: RunConfig):
    sigma = cfg.get("forward", "sigma_d")
    if cfg.get("forward", "kind") == "linear":
        _, G = vio.read_csv(cfg.require("forward", "matrix"))
        _, d = vio.read_csv(cfg.require("forward", "data"))
        nz, nx = _grid(cfg)
        if G.shape[1] != nz * nx:
            raise DimensionError(f"matrix has {G.shape[1]} columns, grid has {nz * nx} cells")
        return LinearForward(G, d.ravel(), sigma)
    data, _ = read_waveforms(cfg.require("forward", "data"))
    return AcousticForward(build_solver(cfg), data, sigma)


def build_pattern(cfg: RunConfig, box: BoundedBox) -> SparsityPattern:
    nz, nx = _grid(cfg)
    if cfg.get("forward", "kind") == "linear":
        return SparsityPattern.full(box.n_free)
    rows = nz - cfg.get("grid", "water_rows")
    return SparsityPattern.for_grid(rows, nx, width=cfg.get("optimizer", "pattern_width"),
                                    n=box.n_free)


# -- run directories ---------------------------------------------------------------------
def new_run_dir(out_dir, mode: str) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    k = 0
    while True:
        d = root / f"{mode}-{k:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            k += 1


def _summaries(run: Path, q, box, cfg: RunConfig, n_samples: int = 2000):
    nz, nx = _grid(cfg)
    st = ensemble_stats(q, box, n_samples=n_samples, seed=cfg.seed)
    vio.write_grid(run / "mean.vprg", st.mean.reshape(nz, nx))
    vio.write_grid(run / "std.vprg", st.std.reshape(nz, nx))
    return st


def _opt_kwargs(cfg: RunConfig):
    return dict(iterations=cfg.iterations, n_samples=cfg.samples, lr=cfg.get("optimizer", "lr"),
                seed=cfg.seed, threads=cfg.threads, init_std=cfg.get("optimizer", "init_std"),
                analytic_entropy=cfg.get("optimizer", "analytic_entropy"),
                path_gradient=cfg.get("optimizer", "path_gradient"),
                early_stop=cfg.get("optimizer", "early_stop"))


# -- modes ---------------------------------------------------------------------------------
def _psi(cfg, run):
    prior = build_prior(cfg, "prior")
    fwd = build_forward(cfg)
    q, man = run_psi(posterior_target(prior, fwd), prior.box, pattern=build_pattern(cfg, prior.box),
                     **_opt_kwargs(cfg))
    save_variational(run / "q.vprq", q)
    write_trace(run / "elbo.csv", man.trace, "elbo")
    _summaries(run, q, prior.box, cfg)
    return man


def _vpr(cfg, run):
    p_old = build_prior(cfg, "prior")
    p_new = build_prior(cfg, "prior_new")
    q_old = load_variational(cfg.require("vpr", "q_old"))
    if q_old.n != p_old.box.n_free:
        raise DimensionError(f"q_old has dimension {q_old.n}, old prior has {p_old.box.n_free} free cells")
    kw = _opt_kwargs(cfg)
    kw.pop("init_std")
    problem = VprProblem(q_old, p_old.box, p_old, p_new, clamp=cfg.get("vpr", "clamp"))
    q, man = run_vpr(problem, warm=cfg.get("vpr", "warm_start"), whiten=cfg.get("vpr", "whiten"),
                     init_std=cfg.get("optimizer", "init_std"), **kw)
    save_variational(run / "q.vprq", q)
    write_trace(run / "kl.csv", [(i, -v, w) for i, v, w in man.trace], "neg_elbo")
    _summaries(run, q, p_new.box, cfg)
    return man


def _diagnose(cfg, run):
    sec = cfg.get("diagnose", "prior_section")
    if sec not in ("prior", "prior_new"):
        raise ConfigError("[diagnose] prior_section must be 'prior' or 'prior_new'",
                          cfg.lines.get(("diagnose", "prior_section")))
    box = build_box(cfg, sec)
    q = load_variational(cfg.require("diagnose", "q"))
    if q.n != box.n_free:
        raise DimensionError(f"q has dimension {q.n}, box has {box.n_free} free cells")
    nz, nx = _grid(cfg)
    ns = cfg.get("diagnose", "n_samples")
    st = _summaries(run, q, box, cfg, ns)
    vio.write_csv(run / "summary.csv", ["cell", "mean", "std"],
                  [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(st.mean, st.std))])
    man = RunManifest("diagnose", cfg.seed)
    if cfg.has("diagnose", "cells"):
        hs = marginal_histograms(q, box, cfg.get("diagnose", "cells"), bins=cfg.get("diagnose", "bins"),
                                 n_samples=ns, seed=cfg.seed)
        vio.write_histograms(run / "histograms.csv", hs)
    if cfg.has("diagnose", "window"):
        w = cfg.get("diagnose", "window")
        if len(w) != 4:
            raise ConfigError("[diagnose] window needs 4 integers: z0 x0 height width",
                              cfg.lines.get(("diagnose", "window")))
        cells = window_cells(nx, *w)
        C = correlation_submatrix(q, box, cells, n_samples=ns, seed=cfg.seed)
        vio.write_matrix(run / "correlation.csv", C, cells)
    if cfg.has("diagnose", "truth"):
        truth = vio.read_grid(cfg.get("diagnose", "truth")).ravel()
        rel = relative_error_map(st.mean, truth, np.where(box.fixed_mask, 1.0, st.std),
                                 mask=~box.fixed_mask)
        vio.write_grid(run / "relerr.vprg", rel.reshape(nz, nx))
    if cfg.has("diagnose", "reference_mean"):
        _, mu = vio.read_csv(cfg.get("diagnose", "reference_mean"))
        _, cov = vio.read_csv(cfg.require("diagnose", "reference_cov"))
        kl = gaussian_kl(q, (mu.ravel(), cov))
        vio.write_csv(run / "kl.csv", ["kl_q_reference"], [(kl,)])
        man.warnings.append(f"kl_to_reference={kl:.6g}")
    if cfg.has("diagnose", "data"):
        data, _ = read_waveforms(cfg.get("diagnose", "data"))
        start = COUNTER.value
        pred = build_solver(cfg).simulate(st.mean.reshape(nz, nx))
        man.forward_sims = COUNTER.value - start
        bc = butterfly_compare(pred, data)
        rows = []
        for s in range(bc.interleaved.shape[0]):
            for r in range(bc.interleaved.shape[1]):
                rows.append([s, r // 2, "pred" if r % 2 == 0 else "obs", *bc.interleaved[s, r]])
        vio.write_csv(run / "butterfly.csv", ["source", "receiver", "kind"]
                      + [f"t{k}" for k in range(bc.interleaved.shape[2])], rows)
        vio.write_csv(run / "trace_rms.csv", ["source", "receiver", "rms"],
                      [(s, r, float(bc.rms[s, r])) for s in range(bc.rms.shape[0])
                       for r in range(bc.rms.shape[1])])
    return man


def _build_prior(cfg, run):
    imgs = [vio.read_grid(p) for p in cfg.require("build_prior", "images")]
    lc = build_local_correlation(imgs, w=cfg.get("build_prior", "window"),
                                 n_subimages=cfg.get("build_prior", "n_subimages"), seed=cfg.seed)
    np.save(run / "correlation.npy", lc.matrix)
    man = RunManifest("build-prior", cfg.seed)
    man.warnings.append(f"windows={lc.n_samples}")
    return man


def _simulate(cfg, run):
    nz, nx = _grid(cfg)
    v = vio.read_grid(cfg.require("simulate", "velocity"))
    if v.shape != (nz, nx):
        raise DimensionError(f"velocity grid is {v.shape}, config grid is {(nz, nx)}")
    start = COUNTER.value
    solver = build_solver(cfg)
    d = solver.simulate(v)
    sigma = cfg.get("forward", "sigma_d")
    rng = np.random.default_rng(cfg.get("simulate", "noise_seed"))
    d = d + sigma * rng.standard_normal(d.shape)
    write_waveforms(run / "data.vprd", d, solver.survey.dt)
    return RunManifest("simulate-data", cfg.seed, forward_sims=COUNTER.value - start)


def _oracle(cfg, run):
    """Write the conjugate suite (G, d, analytic posteriors) and run the grid cross-check."""
    o = {k: cfg.get("oracle", k) for k in ("n", "k", "sigma_d", "std_a", "mean_b", "std_b")}
    pb = conjugate_problem(seed=cfg.get("oracle", "problem_seed"), **o)
    n = pb.G.shape[1]
    vio.write_csv(run / "G.csv", [f"c{j}" for j in range(n)], pb.G.tolist())
    vio.write_csv(run / "d.csv", ["d"], [[float(x)] for x in pb.d_obs])
    vio.write_csv(run / "truth.csv", ["m"], [[float(x)] for x in pb.truth])
    for tag, pr in (("a", pb.prior_a), ("b", pb.prior_b)):
        post = analytic_gaussian_posterior(pb.G, pb.sigma_d, pr.mu, np.diag(pr.std ** 2), pb.d_obs)
        vio.write_csv(run / f"posterior_{tag}_mean.csv", ["mean"], [[float(x)] for x in post.mean])
        vio.write_csv(run / f"posterior_{tag}_cov.csv", [f"c{j}" for j in range(n)], post.cov.tolist())

    rng = np.random.default_rng(cfg.seed)
    rows = []
    for dim in (1, 2):
        G = rng.standard_normal((3, dim))
        mu0 = rng.standard_normal(dim)
        S0 = np.diag(rng.uniform(0.5, 2.0, dim))
        d = rng.standard_normal(3)
        post = analytic_gaussian_posterior(G, 1.0, mu0, S0, d)
        sd = np.sqrt(np.diag(post.cov))
        axes = [np.linspace(post.mean[i] - 8 * sd[i], post.mean[i] + 8 * sd[i],
                            401 if dim == 1 else 201) for i in range(dim)]
        prec0 = np.linalg.inv(S0)

        def logp(m, G=G, d=d, mu0=mu0, prec0=prec0):
            r = d - G @ m
            return -0.5 * r @ r - 0.5 * (m - mu0) @ prec0 @ (m - mu0)

        grid = grid_brute_posterior(logp, axes)
        rows.append((dim, float(np.max(np.abs(grid.mean - post.mean))),
                     float(np.max(np.abs(grid.std / sd - 1.0)))))
    vio.write_csv(run / "grid_check.csv", ["dim", "max_mean_err", "max_std_rel_err"], rows)
    return RunManifest("oracle", cfg.seed)


_DISPATCH = {"psi": _psi, "vpr": _vpr, "diagnose": _diagnose, "build-prior": _build_prior,
             "simulate-data": _simulate, "oracle": _oracle}


def run(cfg: RunConfig, out_dir=None) -> Path:
    """Execute ``cfg.mode``; returns the run directory.

    A relative ``out_dir`` is taken relative to the config file's directory.
    """
    run_dir = new_run_dir(Path(cfg.base_dir) / (out_dir or cfg.get("run", "out_dir")), cfg.mode)
    text = cfg.to_text()
    (run_dir / "config.ini").write_text(text)
    t0 = time.perf_counter()
    man = _DISPATCH[cfg.mode](cfg, run_dir)
    man.seed = cfg.seed
    man.config_hash = config_hash(text)
    if not man.wall_time:
        man.wall_time = time.perf_counter() - t0
    if cfg.mode == "vpr" and man.forward_sims != 0:
        raise ContractViolation(f"vpr run recorded {man.forward_sims} forward simulations")
    man.write(run_dir / "manifest.txt")
    return run_dir


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vpr", description="Variational prior replacement runs.")
    sub = ap.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", required=True, help="INI-style run configuration")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out-dir", help="override [run] out_dir")
        p.add_argument("--threads", type=int, help="override [run] threads")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, mode=args.mode)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.override("run", "seed", args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            cfg.override("run", "threads", args.threads)
        if args.out_dir is not None:
            cfg.override("run", "out_dir", str(Path(args.out_dir).resolve()))
        run_dir = run(cfg)
    except (VprError, OSError, ValueError) as exc:
        print(f"vpr {args.mode}: error: {exc}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
