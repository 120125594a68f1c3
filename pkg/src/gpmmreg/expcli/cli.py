"""Command-line entry point: ``gpmmreg <command> [options]``.

Commands: ``synth``, ``geodesics``, ``sample``, ``eigvis``, ``register``,
``energy`` and ``grid-search``. Tabular outputs are CSV files whose leading
``#`` lines record the full configuration; report commands also write a PNG
figure next to the CSV.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import __version__
from ..geodesics import (GeodesicField, build_operators, farthest_point_sources, heat_geodesic,
                         pairwise_geodesics, symmetrize)
from ..gpmm import build_low_rank, sample_shape
from ..kernels import PRESETS, KernelSpec, read_kernel_config, spec_to_dict
from ..meshcore import Mesh, get_bvh, load_mesh, read_landmarks, save_mesh, save_mesh_with_scalars
from ..nicp import (RegistrationConfig, read_weights, register_nicp, skin_confidence_from_colors,
                    write_trace)
from . import experiments as ex
from .synth import KINDS, make_synthetic, slit_plane

log = logging.getLogger("gpmmreg")


# ----------------------------------------------------------------- helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Dict[str, object], columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """CSV with ``# key: value`` provenance lines; floats written with ``repr`` for exact reruns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])
    return path


def load_kernel(ref: Optional[str]) -> KernelSpec:
    """Kernel from a config file path or a preset name (default: the euclidean-se preset)."""
    if ref is None:
        return PRESETS["euclidean-se"]
    if ref in PRESETS:
        return PRESETS[ref]
    return read_kernel_config(ref)


def attach_geodesics(spec: KernelSpec, mesh: Mesh, args, extra: Sequence[int] = ()) -> KernelSpec:
    """Give a geodesic kernel the distance field it needs on ``mesh``.

    All vertices are sources unless ``--nystrom`` is set, in which case the
    farthest-point subset plus ``extra`` vertices are used.
    """
    if spec.metric != "geodesic":
        return spec
    ops = build_operators(mesh)
    if args.nystrom is None or args.nystrom >= mesh.n_vertices:
        field = pairwise_geodesics(ops, None, args.t_scale, args.geodesic_cache)
    else:
        field = farthest_point_sources(ops, args.nystrom, 0, args.t_scale)
        missing = np.setdiff1d(np.asarray(extra, dtype=np.int64), field.sources)
        if len(missing):
            more = heat_geodesic(ops, missing, args.t_scale)
            field = symmetrize(GeodesicField(np.r_[field.sources, more.sources],
                                             np.vstack([field.distances, more.distances]),
                                             field.t, field.t_scale, field.mesh_hash))
    return spec.with_geodesics(field)


def base_header(args, command: str) -> Dict[str, object]:
    h = {"tool": f"gpmmreg {__version__}", "command": command}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command") or v is None:
            continue
        h[k] = v
    return h


def _kernel_header(spec: KernelSpec) -> str:
    d = spec_to_dict(spec)
    return f"{d['family']}/{d['metric']} levels={d['levels']}"


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.dataset:
        ref = slit_plane(args.resolution or 41)
        out.mkdir(parents=True, exist_ok=True)
        save_mesh(ref, out / "reference.ply")
        for cat, meshes in (("opening", ex.opening_category(ref)), ("bump", ex.bump_category(ref))):
            (out / cat).mkdir(exist_ok=True)
            for k, m in enumerate(meshes):
                save_mesh(m, out / cat / f"{cat}_{k:02d}.ply")
        print(f"wrote synthetic dataset to {out}")
        return 0
    mesh = make_synthetic(args.kind, args.resolution)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    print(f"{args.kind}: {mesh.n_vertices} vertices, {mesh.n_faces} faces -> {out}")
    return 0


def cmd_geodesics(args) -> int:
    mesh = load_mesh(args.mesh)
    ops = build_operators(mesh)
    if args.sources == "all":
        src = None
    else:
        src = np.loadtxt(args.sources, dtype=np.int64, ndmin=1)
    field = pairwise_geodesics(ops, src, args.t_scale, args.out)
    print(f"{len(field.sources)} sources x {field.n_vertices} vertices, t = {field.t:.6g} mm^2 -> {args.out}")
    if args.plot_source is not None:
        from .plotting import plot_distance_isolines
        s = int(args.plot_source)
        d = field.between([s], np.arange(mesh.n_vertices))[0]
        e = np.linalg.norm(mesh.vertices - mesh.vertices[s], axis=1)
        png = plot_distance_isolines(mesh, d, Path(args.out).with_suffix(".png"), s, compare=e)
        print(f"isolines -> {png}")
    return 0


def cmd_sample(args) -> int:
    mesh = load_mesh(args.mesh)
    spec = attach_geodesics(load_kernel(args.kernel_config), mesh, args)
    model = build_low_rank(spec, mesh, args.rank, args.nystrom)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for k in range(args.count):
        alpha = rng.standard_normal(model.rank)
        p = out if args.count == 1 else out.with_name(f"{out.stem}_{k:03d}{out.suffix}")
        save_mesh(sample_shape(model, alpha), p)
        print(f"sample {k} -> {p}")
    return 0


def cmd_eigvis(args) -> int:
    mesh = load_mesh(args.mesh)
    spec = attach_geodesics(load_kernel(args.kernel_config), mesh, args)
    model = build_low_rank(spec, mesh, args.rank, args.nystrom)
    idx = [int(s) for s in args.indices.split(",")]
    paths = ex.export_eigenfunctions(model, idx, args.out)
    rows = [(i, repr(float(model.eigenvalues[i])), p.name) for i, p in zip(idx, paths)]
    write_csv(Path(args.out) / "eigenvalues.csv", {**base_header(args, "eigvis"), "kernel": _kernel_header(spec)},
              ("index", "eigenvalue", "file"), rows)
    print(f"{len(paths)} eigenfunction meshes -> {args.out}")
    return 0


def cmd_register(args) -> int:
    template = load_mesh(args.mesh)
    target = load_mesh(args.target)
    landmarks = None
    extra = ()
    if args.landmarks or args.target_landmarks:
        if not (args.landmarks and args.target_landmarks):
            raise SystemExit("--landmarks and --target-landmarks must be given together")
        lt = read_landmarks(args.landmarks, template)
        lg = read_landmarks(args.target_landmarks, target)
        landmarks = (lt, lg)
        extra = [v for v in (lt.vertex_index(n) for n in lt.names) if v is not None]
    spec = attach_geodesics(load_kernel(args.kernel_config), template, args, extra)
    model = build_low_rank(spec, template, args.rank, args.nystrom)
    conf = None
    source = "uniform"
    if args.weights == "skin":
        conf, source = skin_confidence_from_colors(target), "vertexColorSkinRule"
    elif args.weights:
        conf, source = read_weights(args.weights, target.n_vertices), "perVertexFile"
    cutoff = "auto" if args.distance_cutoff is None else (None if args.distance_cutoff <= 0 else args.distance_cutoff)
    config = RegistrationConfig(
        outer_iterations=args.iterations,
        rho_schedule=tuple(np.geomspace(args.rho_start, args.rho, args.iterations)),
        normal_angle_max=args.normal_angle,
        symmetric_filter=not args.no_symmetric,
        distance_cutoff=cutoff,
        confidence_source=source,
        use_posterior=args.use_posterior,
    )
    res = register_nicp(model, target, landmarks, config, conf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(res.mesh, out)
    err = get_bvh(target).query(res.mesh.vertices).distances
    save_mesh_with_scalars(res.mesh, err, out.with_name(out.stem + "_error.ply"))
    header = {**base_header(args, "register"), "kernel": _kernel_header(spec),
              "rhoSchedule": [float(r) for r in config.rho_schedule]}
    write_trace(res.trace, out.with_suffix(".csv"), header)
    from .plotting import plot_trace
    plot_trace([r.fit.energy for r in res.trace], [r.rho for r in res.trace], out.with_suffix(".png"))
    print(f"registered: mean surface error {err.mean():.4g} mm, max {err.max():.4g} mm -> {out}")
    return 0


def _named_kernels(refs: Optional[List[str]]) -> Dict[str, KernelSpec]:
    refs = refs or ["euclidean-se"]
    out: Dict[str, KernelSpec] = {}
    for ref in refs:
        spec = load_kernel(ref)
        name = spec.name
        k = 2
        while name in out:
            name = f"{spec.name}-{k}"
            k += 1
        out[name] = spec
    return out


def cmd_energy(args) -> int:
    ref = load_mesh(args.mesh)
    data = ex.load_dataset(args.dataset)
    kernels = _named_kernels(args.kernel_config)
    models = {}
    for name, spec in kernels.items():
        models[name] = build_low_rank(attach_geodesics(spec, ref, args), ref, args.rank, args.nystrom)
    report = ex.energy_by_category(models, data, args.rho)
    header = base_header(args, "energy")
    for name, spec in kernels.items():
        header[f"kernel {name}"] = _kernel_header(spec)
    rows = [(r.category, r.kernel, r.mean, r.std, r.count, int(r.best)) for r in report.rows]
    path = write_csv(args.out, header, ("category", "kernel", "meanR", "stdR", "sampleCount", "best"), rows)
    from .plotting import plot_energy_table
    png = plot_energy_table(report, Path(args.out).with_suffix(".png"))
    print(f"energy report -> {path}, figure -> {png}")
    return 0


def cmd_grid_search(args) -> int:
    ref = load_mesh(args.mesh)
    if not args.target:
        raise SystemExit("grid-search needs at least one --target")
    targets = [load_mesh(t) for t in args.target]
    sigmas = [float(s) for s in args.sigmas.split(",")]
    kernels = _named_kernels(args.kernel_config)
    results = {}
    rows = []
    for name, spec in kernels.items():
        spec = attach_geodesics(spec, ref, args)
        gs = ex.GridSearchSpec(spec, sigmas, targets, args.rho, args.rank, args.multiscale, args.nystrom)
        res = ex.grid_search(gs, ref)
        results[name] = res
        for p in res.curve:
            rows.append((name, p.sigma, p.energy if p.ok else "nan", int(p.sigma == res.best_sigma), p.error))
    header = base_header(args, "grid-search")
    for name, spec in kernels.items():
        header[f"kernel {name}"] = _kernel_header(spec)
    path = write_csv(args.out, header, ("kernel", "sigma", "summedR", "best", "error"), rows)
    from .plotting import plot_energy_curves
    png = plot_energy_curves(results, Path(args.out).with_suffix(".png"))
    for name, res in results.items():
        print(f"{name}: best sigma {res.best_sigma:g} (R = {res.best_energy:.6g})")
    print(f"curves -> {path}, figure -> {png}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--mesh", help="template / reference mesh (OBJ or PLY)")
    g.add_argument("--target", action="append", help="target mesh; repeatable for grid-search")
    g.add_argument("--kernel-config", action="append",
                   help=f"kernel config file or preset ({', '.join(PRESETS)}); repeatable for reports")
    g.add_argument("--landmarks", help="template landmark file")
    g.add_argument("--weights", help="per-target-vertex weight file, or 'skin' for the color rule")
    g.add_argument("--rank", type=int, default=200, help="model rank r (default 200)")
    g.add_argument("--rho", type=float, default=None, help="ridge value (final value of the NICP schedule)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output path")
    g.add_argument("--nystrom", type=int, default=None, help="Nystrom subset size (default: all vertices)")
    g.add_argument("--t-scale", type=float, default=1.0, help="heat time as a multiple of h^2")
    g.add_argument("--geodesic-cache", default=None, help="cache file for all-pairs geodesic distances")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gpmmreg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic mesh or dataset")
    s.add_argument("--kind", choices=KINDS, default="facelike")
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--dataset", action="store_true", help="write slit-plane reference plus opening/bump categories")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("geodesics", parents=[common], help="all-pairs heat-method distances to a cache file")
    s.add_argument("--sources", default="all", help="'all' or a file of vertex indices")
    s.add_argument("--plot-source", type=int, default=None, help="also render isolines from this vertex")
    s.set_defaults(func=cmd_geodesics)

    s = sub.add_parser("sample", parents=[common], help="draw random shapes from the prior")
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eigvis", parents=[common], help="export eigenfunctions as colored PLY files")
    s.add_argument("--indices", default="0,3,6,9", help="comma-separated basis columns")
    s.set_defaults(func=cmd_eigvis)

    s = sub.add_parser("register", parents=[common], help="non-rigid ICP of the template to a target")
    s.add_argument("--target-landmarks", help="target landmark file (same names as --landmarks)")
    s.add_argument("--iterations", type=int, default=8)
    s.add_argument("--rho-start", type=float, default=10.0)
    s.add_argument("--normal-angle", type=float, default=60.0)
    s.add_argument("--no-symmetric", action="store_true")
    s.add_argument("--distance-cutoff", type=float, default=None, help="mm; <= 0 disables, default 5%% of diameter")
    s.add_argument("--use-posterior", action="store_true", help="condition the model on the landmarks")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("energy", parents=[common], help="per-category regression energy report")
    s.add_argument("--dataset", required=True, help="directory with one subdirectory per category")
    s.set_defaults(func=cmd_energy)

    s = sub.add_parser("grid-search", parents=[common], help="regression energy as a function of sigma")
    s.add_argument("--sigmas", default="5,10,15,20,30,45,70,100")
    s.add_argument("--multiscale", action="store_true", help="4 levels, sigma and weight ratio 2")
    s.set_defaults(func=cmd_grid_search)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "register":
        args.rho = 0.01 if args.rho is None else args.rho
        if args.target:
            args.target = args.target[0]
    elif args.rho is None:
        args.rho = 1.0
    if args.kernel_config and args.command in ("sample", "eigvis", "register"):
        args.kernel_config = args.kernel_config[0]
    if not args.verbose:
        warnings.simplefilter("default")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
