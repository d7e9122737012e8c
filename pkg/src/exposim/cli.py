"""Command line front end.

The package is a library first; these subcommands wrap the harness for
headless runs and artifact generation:

    exposim gen-phantom --angle 45 --out phantom.tet
    exposim run scenario.json
    exposim batch scenario.json --seeds 0,1,2,3,4
    exposim aps-map scenario.json --out map.json
    exposim compare-aps scenario.json --fixed 0.03,0.015,0.024
    exposim verify-jacobians scenario.json
    exposim serve scenario.json --port 8765
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import harness
from .geometry import gen_wedge_phantom, save_tet_mesh
from .harness import Scenario, canonical_json


def _parse_triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(parts)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--outdir", default=None,
                   help=f"output directory (default ${harness.OUTPUT_DIR_ENV} or ./runs)")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exposim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="generate a wedge phantom mesh file")
    p.add_argument("--angle", type=float, required=True, help="groove opening angle (deg)")
    p.add_argument("--size", type=_parse_triple, default=(0.06, 0.05, 0.02), help="extents lx,ly,lz (m)")
    p.add_argument("--resolution", default="10,3,3", help="cells nx,ny,nz")
    p.add_argument("--depth", type=float, default=None, help="groove depth (m), default lz/2")
    p.add_argument("--out", required=True)
    _add_common(p)

    for name, extra in (
        ("run", ()),
        ("batch", ("seeds",)),
        ("aps-map", ("map_out",)),
        ("compare-aps", ("fixed", "repeats")),
        ("verify-jacobians", ()),
        ("serve", ("port",)),
    ):
        p = sub.add_parser(name)
        p.add_argument("scenario", help="scenario JSON file")
        if "seeds" in extra:
            p.add_argument("--seeds", default="0,1,2,3,4", help="comma separated seeds")
        if "map_out" in extra:
            p.add_argument("--out", default=None, help="score map JSON output path")
        if "fixed" in extra:
            p.add_argument("--fixed", type=_parse_triple, required=True,
                           help="fixed assistance point x,y,z (m)")
            p.add_argument("--repeats", type=int, default=5)
        if "port" in extra:
            p.add_argument("--port", type=int, default=8765)
        _add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    outdir = args.outdir or str(harness.default_output_dir())

    if args.command == "gen-phantom":
        res = tuple(int(v) for v in args.resolution.split(","))
        mesh = gen_wedge_phantom(args.angle, size=args.size, resolution=res, groove_depth=args.depth)
        save_tet_mesh(mesh, args.out)
        print(f"wrote {args.out}: {mesh.vertex_count} vertices, {len(mesh.tets)} tets, "
              f"{mesh.surface.face_count} surface faces")
        return 0

    scenario = Scenario.load(args.scenario)

    if args.command == "run":
        report = harness.run_assist_request(scenario, outdir=outdir)
        print(canonical_json(report.to_json()))
        return 0 if report.failure is None else 1

    if args.command == "batch":
        seeds = [int(s) for s in args.seeds.split(",") if s != ""]
        agg = harness.run_batch(scenario, seeds, outdir=outdir)
        print(canonical_json(agg))
        return 0

    if args.command == "aps-map":
        from .aps import select_position
        prep = harness.prepare_request(scenario)
        best, score_map = select_position(
            prep.world, prep.mesh.surface, prep.world.state(), prep.vis0,
            prep.features, scenario.alpha, scenario.l_min, stride=scenario.stride,
        )
        payload = {
            "selected": best.to_json(),
            "map": [c.to_json() for c in score_map],
        }
        text = canonical_json(payload)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        else:
            print(text)
        return 0

    if args.command == "compare-aps":
        table = harness.compare_aps(scenario, args.fixed, args.repeats, outdir=outdir)
        print(canonical_json(table))
        return 0

    if args.command == "verify-jacobians":
        from .exposure import observation_jacobian, observe
        prep = harness.prepare_request(scenario)
        sim = prep.world
        state = sim.state()
        jo = observation_jacobian(prep.features, prep.mesh.surface, state)
        h = 1e-7
        involved = np.nonzero(np.any(jo != 0.0, axis=0))[0]
        err = 0.0
        ref = 0.0
        for col in involved:
            vi, axis = divmod(int(col), 3)
            sp = state.copy(); sp.positions[vi, axis] += h
            sm = state.copy(); sm.positions[vi, axis] -= h
            fd = (observe(prep.features, prep.mesh.surface, sp)
                  - observe(prep.features, prep.mesh.surface, sm)) / (2 * h)
            err += float(np.sum((jo[:, col] - fd) ** 2))
            ref += float(np.sum(fd**2))
        rel = (err / ref) ** 0.5 if ref > 0 else 0.0
        print(canonical_json({"observation_jacobian_fd_rel_error": rel, "columns": len(involved)}))
        return 0 if rel < 1e-4 else 1

    if args.command == "serve":
        from .bridge import serve_forever
        serve_forever(scenario, args.port, outdir=outdir)
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
