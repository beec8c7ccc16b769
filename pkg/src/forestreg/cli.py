"""Command-line interface: ``forestreg {map,match,register,eval,synth}``.

Parameter values come from three layers, later ones winning: built-in
defaults, a ``--config`` file of ``key=value`` lines (keys are the long flag
names with dashes or underscores, e.g. ``gamma`` or ``knn_k``), and explicit
flags. Everything is validated before any input is read.

Results go to standard output (or files); timings and progress go to
standard error. Output is byte-identical for any ``--threads`` value.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import io, parallel
from .errors import ForestRegError, SpecError, ValidationError, with_stage
from .evaluation import RegistrationErrors, csv_summary, errors_report, registration_errors
from .match import MatchParams, MatchStats, build_triangles, global_match, local_match
from .register import IcpParams, RegistrationMode, register_pair
from .stemmap import StemMap, StemMapParams, map_stems
from .synth import generate_pair, pair_spec_from_kv

PROG = "forestreg"

# flag name -> (params class, field name); --seed feeds the stem-mapping RNG
STEM_FLAGS = {f.name.replace("_", "-"): (StemMapParams, f.name) for f in fields(StemMapParams)
              if f.name != "rng_seed"}
MATCH_FLAGS = {"knn-k": (MatchParams, "K"), "epsilon": (MatchParams, "epsilon")}
ICP_FLAGS = {"icp-" + f.name.replace("_", "-"): (IcpParams, f.name) for f in fields(IcpParams)}
COMMON_KEYS = {"seed": int, "threads": int, "mode": str, "icp": bool, "threshold": float}


def _field_type(cls, name):
    return type(next(f.default for f in fields(cls) if f.name == name))


def _add_param_flags(parser, table, title):
    group = parser.add_argument_group(title)
    for flag, (cls, name) in table.items():
        kind = _field_type(cls, name)
        group.add_argument(f"--{flag}", type=kind, default=None, metavar=kind.__name__.upper(),
                           help=f"default {getattr(cls(), name)}")


def _common(parser):
    g = parser.add_argument_group("general")
    g.add_argument("--config", type=Path, help="key=value file of parameter values (overridden by flags)")
    g.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="progress and timings on stderr")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n\n")[0],
                                epilog="Precedence: defaults < --config file < flags.")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("map", help="extract stem positions from a point cloud")
    m.add_argument("cloud", type=Path)
    m.add_argument("-o", "--output", type=Path, required=True, help="stem positions, one 'x y z' per line")
    _common(m)
    _add_param_flags(m, STEM_FLAGS, "stem mapping")

    mt = sub.add_parser("match", help="correspondences between two stem maps")
    mt.add_argument("src_stems", type=Path)
    mt.add_argument("tgt_stems", type=Path)
    mt.add_argument("-o", "--output", type=Path, required=True, help="'src_index tgt_index' per line")
    _common(mt)
    _add_param_flags(mt, MATCH_FLAGS, "matching")

    r = sub.add_parser("register", help="register a source cloud onto a target cloud")
    r.add_argument("src", type=Path)
    r.add_argument("tgt", type=Path)
    r.add_argument("-o", "--output", type=Path, required=True, help="coarse 4x4 transform (source to target)")
    r.add_argument("--fine-output", type=Path, help="ICP-refined transform (default: <output>.fine.txt)")
    r.add_argument("--stems-dir", type=Path, help="also write both stem maps and the correspondences here")
    r.add_argument("--mode", choices=["4dof", "6dof"], default=None, help="default 4dof")
    r.add_argument("--icp", action="store_true", default=None, help="refine with point-to-point ICP")
    _common(r)
    _add_param_flags(r, STEM_FLAGS, "stem mapping")
    _add_param_flags(r, MATCH_FLAGS, "matching")
    _add_param_flags(r, ICP_FLAGS, "ICP")

    e = sub.add_parser("eval", help="error metrics of an estimated transform")
    e.add_argument("estimate", type=Path)
    e.add_argument("truth", type=Path)
    e.add_argument("--src", type=Path, required=True, help="source cloud for the pointwise error")
    e.add_argument("--threshold", type=float, default=None, help="success threshold on e_p in m (default 0.5)")
    e.add_argument("--name", default="pair", help="row label in the CSV summary")
    e.add_argument("--csv", type=Path, help="also write a one-row CSV summary")
    _common(e)

    s = sub.add_parser("synth", help="generate a synthetic scan pair from a key=value spec")
    s.add_argument("spec", type=Path)
    s.add_argument("-o", "--output", type=Path, required=True, help="output directory")
    _common(s)
    return p


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _tables(command):
    return {"map": [STEM_FLAGS], "match": [MATCH_FLAGS], "register": [STEM_FLAGS, MATCH_FLAGS, ICP_FLAGS],
            "eval": [], "synth": []}[command]


def resolve(args) -> dict:
    """Merge defaults, config file and flags into validated parameter objects."""
    tables = _tables(args.command)
    known = {flag.replace("-", "_"): spec for t in tables for flag, spec in t.items()}
    values: dict = {}
    if args.config is not None:
        raw = io.read_kv(args.config)
        bad = [k for k in raw if k not in known and k not in COMMON_KEYS]
        if bad:
            raise SpecError(f"{args.config}: unknown key(s) for '{args.command}': {', '.join(sorted(bad))}")
        for k, v in raw.items():
            kind = COMMON_KEYS.get(k) or _field_type(*known[k])
            values[k] = _parse_value(k, v, kind, args.config)
    for k in list(known) + list(COMMON_KEYS):
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v

    cfg = {"seed": values.get("seed", 0), "threads": values.get("threads", 1),
           "mode": RegistrationMode.parse(values.get("mode", "4dof")), "icp": bool(values.get("icp", False)),
           "threshold": values.get("threshold", 0.5)}
    if cfg["threads"] < 1:
        raise ValidationError(f"--threads must be >= 1, got {cfg['threads']}")
    if not cfg["threshold"] > 0:
        raise ValidationError(f"--threshold must be > 0, got {cfg['threshold']}")
    for cls, key in ((StemMapParams, "stem"), (MatchParams, "match"), (IcpParams, "icp_params")):
        kw = {spec[1]: values[k] for k, spec in known.items() if spec[0] is cls and k in values}
        if cls is StemMapParams:
            kw["rng_seed"] = cfg["seed"]
        cfg[key] = cls(**kw)
    return cfg


def _parse_value(key, raw, kind, source):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise SpecError(f"{source}: key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

class _Clock:
    def __init__(self, verbose: bool):
        self.verbose = verbose
        self.t0 = time.perf_counter()

    def note(self, what: str):
        if self.verbose:
            print(f"[{time.perf_counter() - self.t0:8.3f} s] {what}", file=sys.stderr)


def cmd_map(args, cfg) -> int:
    clock = _Clock(args.verbose)
    cloud = io.read_cloud(args.cloud)
    clock.note(f"read {len(cloud)} points")
    stems = with_stage("map", map_stems, cloud, cfg["stem"])
    io.write_positions(stems.positions, args.output)
    clock.note("stem map written")
    sys.stdout.write(io.format_kv([("stems", len(stems))] + sorted(stems.diagnostics.items())))
    return 0


def cmd_match(args, cfg) -> int:
    clock = _Clock(args.verbose)
    src = StemMap(io.read_positions(args.src_stems))
    tgt = StemMap(io.read_positions(args.tgt_stems))
    stats = MatchStats()
    src_tri = with_stage("match", build_triangles, src, cfg["match"])
    tgt_tri = with_stage("match", build_triangles, tgt, cfg["match"])
    pairs = with_stage("match", local_match, src_tri, tgt_tri, cfg["match"], stats)
    corr = with_stage("match", global_match, pairs, src_tri, tgt_tri, cfg["match"], stats)
    io.write_pairs(corr.pairs, args.output)
    clock.note("correspondences written")
    sys.stdout.write(io.format_kv([("correspondences", len(corr))] + list(stats.as_dict().items())))
    return 0


def _fine_path(out: Path) -> Path:
    return out.with_name(out.stem + ".fine" + (out.suffix or ".txt"))


def cmd_register(args, cfg) -> int:
    clock = _Clock(args.verbose)
    src = io.read_cloud(args.src)
    tgt = io.read_cloud(args.tgt)
    clock.note(f"read {len(src)} + {len(tgt)} points")
    res = register_pair(src, tgt, cfg["mode"], cfg["stem"], cfg["match"],
                        cfg["icp_params"] if cfg["icp"] else None)
    io.write_transform(res.coarse, args.output)
    if res.fine is not None:
        io.write_transform(res.fine, args.fine_output or _fine_path(args.output))
    if args.stems_dir is not None:
        args.stems_dir.mkdir(parents=True, exist_ok=True)
        io.write_positions(res.src_stems.positions, args.stems_dir / "src_stems.txt")
        io.write_positions(res.tgt_stems.positions, args.stems_dir / "tgt_stems.txt")
        io.write_pairs(res.correspondences.pairs, args.stems_dir / "correspondences.txt")
    diag = {k: v for k, v in res.diagnostics.items() if k != "times"}
    for stage, secs in res.diagnostics["times"].items():
        clock.note(f"{stage}: {secs:.3f} s")
    sys.stdout.write(io.format_kv(diag.items()))
    return 0


def cmd_eval(args, cfg) -> int:
    est = io.read_transform(args.estimate)
    truth = io.read_transform(args.truth)
    src = io.read_cloud(args.src)
    errors: RegistrationErrors = registration_errors(src, est, truth)
    sys.stdout.write(errors_report(errors, cfg["threshold"]))
    if args.csv is not None:
        args.csv.write_text(csv_summary([(args.name, errors)], cfg["threshold"]))
    return 0


def cmd_synth(args, cfg) -> int:
    clock = _Clock(args.verbose)
    kv = io.read_kv(args.spec)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    spec = pair_spec_from_kv(kv, os.fspath(args.spec))
    pair = generate_pair(spec)
    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    io.write_cloud(pair.src, out / "src.ply")
    io.write_cloud(pair.tgt, out / "tgt.ply")
    io.write_transform(pair.truth_transform, out / "truth_transform.txt")
    io.write_positions(pair.src_stems.positions, out / "src_stems.txt")
    io.write_positions(pair.tgt_stems.positions, out / "tgt_stems.txt")
    manifest = list(pair.manifest.items()) + [(f"spec.{k}", kv[k]) for k in sorted(kv)]
    (out / "manifest.txt").write_text(io.format_kv(manifest))
    clock.note(f"pair written to {out}")
    if pair.warning:
        print(f"{PROG}: warning: only {len(pair.shared_ids)} shared stems; registration is expected to fail",
              file=sys.stderr)
    sys.stdout.write(io.format_kv(pair.manifest.items()))
    return 0


COMMANDS = {"map": cmd_map, "match": cmd_match, "register": cmd_register, "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
    except (ForestRegError, ValueError) as exc:
        parser.exit(2, f"{PROG} {args.command}: error: {exc}\n")
    parallel.set_threads(cfg["threads"])
    try:
        return COMMANDS[args.command](args, cfg)
    except (ForestRegError, OSError) as exc:
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
