"""Command-line front end: ``synth``, ``align`` and ``eval``.

Exit codes: 0 success, 1 I/O or malformed input, 2 usage, 3 numerical failure.
Every ``align`` flag may also come from ``--config FILE`` holding flat
``key=value`` lines (keys are the long flag names); flags win over the file.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import dataclass

import numpy as np

from .barycenter import DegenerateCouplingError
from .eval_harness import (
    CSV_HEADER,
    AlignmentReport,
    AlignmentTask,
    EvalConfig,
    Method,
    fold_split,
    hits_at_k,
    make_synthetic_task,
    transport_with,
)
from .gyrovector import BallParams, PointCloud
from .mapping_estimation import InitStrategy, LineSearchError
from .ot_solvers import CostKind, write_coupling_csv

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class InputFormatError(ValueError):
    """A data file violates its format."""


class UsageError(ValueError):
    """Bad flag values or combinations."""


class _Fail(Exception):
    def __init__(self, code, stage, msg):
        super().__init__(msg)
        self.code, self.stage = code, stage


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


@dataclass
class Embeddings:
    tokens: list
    vectors: np.ndarray

    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.tokens)}


def write_embeddings(path, tokens, vectors):
    """Header ``n d`` then ``token v_1 ... v_d`` per line, 17 significant digits."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    n, d = vectors.shape
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{n} {d}\n")
        for tok, row in zip(tokens, vectors):
            fh.write(tok + " " + " ".join(f"{v:.17g}" for v in row) + "\n")


def read_embeddings(path, s: float | None = None) -> Embeddings:
    """Parse an embedding file; with ``s`` every vector must have norm < ``s``."""
    with open(path, encoding="ascii") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise InputFormatError(f"{path}: missing 'n d' header")
    try:
        n, d = int(lines[0][0]), int(lines[0][1])
    except ValueError as exc:
        raise InputFormatError(f"{path}: bad header {lines[0]}") from exc
    rows = lines[1:]
    if len(rows) != n:
        raise InputFormatError(f"{path}: header says {n} rows, found {len(rows)}")
    tokens, data = [], []
    for k, parts in enumerate(rows, start=2):
        if len(parts) != d + 1:
            raise InputFormatError(f"{path}:{k}: expected a token and {d} numbers")
        try:
            vec = [float(t) for t in parts[1:]]
        except ValueError as exc:
            raise InputFormatError(f"{path}:{k}: {exc}") from exc
        tokens.append(parts[0])
        data.append(vec)
    X = np.array(data, dtype=float).reshape(n, d)
    if not np.all(np.isfinite(X)):
        raise InputFormatError(f"{path}: non-finite coordinates")
    if len(set(tokens)) != n:
        raise InputFormatError(f"{path}: duplicate tokens")
    if s is not None:
        bad = np.flatnonzero(np.linalg.norm(X, axis=1) >= s)
        if bad.size:
            raise InputFormatError(f"{path}: token {tokens[bad[0]]!r} lies outside the ball of radius {s}")
    return Embeddings(tokens, X)


def write_matches(path, pairs):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for a, b in pairs:
            fh.write(f"{a}\t{b}\n")


def read_matches(path, src: Embeddings, tgt: Embeddings) -> np.ndarray:
    """Resolve ``source<TAB>target`` token lines to index pairs."""
    si, ti = src.index(), tgt.index()
    pairs, seen = [], set()
    with open(path, encoding="ascii") as fh:
        for k, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise InputFormatError(f"{path}:{k}: expected 'source<TAB>target'")
            a, b = parts
            if a not in si or b not in ti:
                raise InputFormatError(f"{path}:{k}: unknown token {a if a not in si else b!r}")
            if a in seen:
                raise InputFormatError(f"{path}:{k}: duplicate source token {a!r}")
            seen.add(a)
            pairs.append((si[a], ti[b]))
    if not pairs:
        raise InputFormatError(f"{path}: no matches")
    return np.array(pairs, dtype=int)


def write_svg(path, src, transported, tgt, s):
    """Static scatter of the three 2-d clouds inside the ball boundary."""
    size, pad = 400.0, 10.0
    scale = (size / 2 - pad) / s

    def pts(X, color):
        return "".join(
            f'<circle cx="{size / 2 + scale * x:.3f}" cy="{size / 2 - scale * y:.3f}" r="2" fill="{color}"/>'
            for x, y in X
        )

    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}">'
            f'<circle cx="{size / 2}" cy="{size / 2}" r="{size / 2 - pad}" fill="none" stroke="black"/>'
            + pts(src, "#1f77b4")
            + pts(transported, "#ff7f0e")
            + pts(tgt, "#2ca02c")
            + "</svg>\n"
        )


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

ALIGN_DEFAULTS = {
    "s": 1.0,
    "epsilon": 0.01,
    "eta": 1.0,
    "omega": 0.0,
    "cost": CostKind.SQ_HYPERBOLIC.value,
    "init": InitStrategy.GYROBARYCENTER.value,
    "seed": 0,
    "k": 10,
    "train_fraction": 0.10,
}


def _float(text):
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


ALIGN_TYPES = {"s": _float, "epsilon": _float, "eta": _float, "omega": _float, "cost": str,
               "init": str, "seed": int, "k": int, "train_fraction": _float}


def read_config(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for k, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputFormatError(f"{path}:{k}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _merge_align(args) -> dict:
    merged = dict(ALIGN_DEFAULTS)
    if args.config:
        for key, value in read_config(args.config).items():
            if key in ALIGN_TYPES:
                try:
                    merged[key] = ALIGN_TYPES[key](value)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}") from exc
            elif key == "method" and args.method is None:
                args.method = value
            elif key not in ("source", "target", "matches", "out", "svg"):
                raise UsageError(f"unknown config key {key!r}")
    for key in ALIGN_TYPES:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    return merged


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sy = sub.add_parser("synth", help="write a synthetic source/target/match triple")
    sy.add_argument("--d", type=int, default=5)
    sy.add_argument("--n", type=int, default=200)
    sy.add_argument("--noise", type=_float, default=0.05)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--s", type=_float, default=1.0)
    sy.add_argument("--out-prefix", required=True)

    al = sub.add_parser("align", help="fit a transport method and export its results")
    al.add_argument("--method")
    al.add_argument("--source", required=True)
    al.add_argument("--target", required=True)
    al.add_argument("--matches", required=True)
    al.add_argument("--out", required=True, help="output prefix")
    al.add_argument("--config")
    al.add_argument("--svg", help="scatter plot path (2-d data only)")
    for key, typ in ALIGN_TYPES.items():
        al.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)

    ev = sub.add_parser("eval", help="Hits@k of transported points against targets")
    ev.add_argument("--transported", required=True)
    ev.add_argument("--target", required=True)
    ev.add_argument("--matches", required=True)
    ev.add_argument("--k", type=int, default=10)
    ev.add_argument("--s", type=_float, default=1.0)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _stage(stage, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except _Fail:
        raise
    except UsageError as exc:
        raise _Fail(EXIT_USAGE, stage, str(exc)) from exc
    except (FloatingPointError, np.linalg.LinAlgError, LineSearchError, DegenerateCouplingError) as exc:
        raise _Fail(EXIT_NUMERIC, stage, str(exc)) from exc
    except (OSError, UnicodeError, InputFormatError) as exc:
        raise _Fail(EXIT_IO, stage, str(exc)) from exc
    except ValueError as exc:
        raise _Fail(EXIT_USAGE, stage, str(exc)) from exc


def cmd_synth(args) -> int:
    task = _stage("synth", make_synthetic_task, args.d, args.n, args.noise, args.seed, BallParams(args.s))
    n = len(task.src)
    src_tok = [f"s{i}" for i in range(n)]
    tgt_tok = [f"t{j}" for j in range(len(task.tgt))]
    pre = args.out_prefix
    _stage("write", write_embeddings, pre + ".src.emb", src_tok, task.src.points)
    _stage("write", write_embeddings, pre + ".tgt.emb", tgt_tok, task.tgt.points)
    _stage("write", write_matches, pre + ".matches.tsv", [(src_tok[i], tgt_tok[j]) for i, j in task.matches])
    return EXIT_OK


def _align_cfg(opts) -> EvalConfig:
    if opts["epsilon"] <= 0 or not math.isfinite(opts["epsilon"]):
        raise UsageError("epsilon must be positive")
    if opts["k"] < 1:
        raise UsageError("k must be at least 1")
    try:
        cost = CostKind(opts["cost"])
        init = InitStrategy(opts["init"]).value
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return EvalConfig(k=opts["k"], epsilon=opts["epsilon"], eta=opts["eta"], omega=opts["omega"],
                      cost=cost, init=init, seed=opts["seed"])


def cmd_align(args) -> int:
    opts = _stage("config", _merge_align, args)
    if args.method is None:
        raise _Fail(EXIT_USAGE, "config", "no method given")
    try:
        method = Method(args.method)
    except ValueError:
        raise _Fail(EXIT_USAGE, "config", f"unknown method {args.method!r}") from None
    cfg = _stage("config", _align_cfg, opts)
    ball = _stage("config", BallParams, opts["s"])
    src = _stage("load", read_embeddings, args.source, ball.s)
    tgt = _stage("load", read_embeddings, args.target, ball.s)
    pairs = _stage("load", read_matches, args.matches, src, tgt)
    if src.vectors.shape[1] != tgt.vectors.shape[1]:
        raise _Fail(EXIT_IO, "load", "source and target dimensions differ")
    task = _stage(
        "load", AlignmentTask, PointCloud(src.vectors, ball=ball), PointCloud(tgt.vectors, ball=ball),
        pairs, opts["train_fraction"],
    )
    start = time.perf_counter()
    train, test = fold_split(len(pairs), task.train_fraction, 0, cfg.seed)
    if test.size == 0:
        raise _Fail(EXIT_USAGE, "config", "train_fraction leaves no matches to evaluate")
    out, M = _stage("align", transport_with, method, task, pairs[train], cfg, cfg.seed)
    rev = task.swapped()
    back, _ = _stage("align", transport_with, method, rev, rev.matches[train], cfg, cfg.seed)
    report = AlignmentReport(
        method.value,
        hits_at_k(out, task.tgt, pairs[test], cfg.k),
        hits_at_k(back, rev.tgt, rev.matches[test], cfg.k),
        time.perf_counter() - start,
        cfg.k,
        1,
        cfg.as_dict() | {"s": ball.s, "train_fraction": task.train_fraction},
    )
    pre = args.out
    _stage("write", write_embeddings, pre + ".transported.emb", src.tokens, out)
    if M is not None:
        _stage("write", write_coupling_csv, pre + ".coupling.csv", M)
    _stage("write", _write_report, pre, report)
    if args.svg:
        if src.vectors.shape[1] != 2:
            raise _Fail(EXIT_USAGE, "write", "--svg needs 2-d data")
        _stage("write", write_svg, args.svg, src.vectors, out, tgt.vectors, ball.s)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _write_report(prefix, report: AlignmentReport):
    with open(prefix + ".report.txt", "w", encoding="ascii", newline="\n") as fh:
        fh.write(report.to_text())
    with open(prefix + ".report.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n" + "\n".join(report.csv_rows()) + "\n")


def cmd_eval(args) -> int:
    if args.k < 1:
        raise _Fail(EXIT_USAGE, "config", "k must be at least 1")
    ball = _stage("config", BallParams, args.s)
    trans = _stage("load", read_embeddings, args.transported, ball.s)
    tgt = _stage("load", read_embeddings, args.target, ball.s)
    pairs = _stage("load", read_matches, args.matches, trans, tgt)
    k = min(args.k, len(tgt.tokens))
    hits = hits_at_k(trans.vectors, tgt.vectors, pairs, k, ball)
    sys.stdout.write(f"hits@{k}={hits:.6f}\n")
    sys.stdout.write(f"k,hits\n{k},{hits:.6f}\n")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "align": cmd_align, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except _Fail as exc:
        sys.stderr.write(f"hypalign {args.command}: {exc.stage} failed: {exc}\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
