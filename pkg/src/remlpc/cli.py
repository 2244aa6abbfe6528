"""Command-line front end.

Verbs: basis, simulate, fit, pca, rates, score-check, kl-scan,
design-check.  Exit codes: 0 success, 2 fit did not converge (results
are still written), 64 usage error, 65 malformed or unusable data
(messages name the offending row where applicable), 66 missing file.
All file outputs are written atomically (temp file plus rename) and are
byte-stable for a fixed configuration, including under --threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile

import numpy as np

from . import matrixcase, optimizer, sim
from .bspline import eval_basis, make_basis
from .model import CurveData, Dataset, ModelParams, neg_loglik

EXIT_OK = 0
EXIT_NOCONV = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NOFILE = 66


class UsageError(Exception):
    pass


class DataFormatError(Exception):
    pass


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_file(path: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def read_curves_csv(path: str) -> Dataset:
    """Functional data CSV with header curve_id,t,y; curves keep file order."""
    _require_file(path)
    order = []
    groups: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["curve_id", "t", "y"]:
            raise DataFormatError(f"{path}: expected header 'curve_id,t,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}: row {lineno}: expected 3 fields, got {len(row)}")
            cid = row[0]
            try:
                t = float(row[1])
                y = float(row[2])
            except ValueError:
                raise DataFormatError(f"{path}: row {lineno}: non-numeric t or y") from None
            if not 0.0 <= t <= 1.0:
                raise DataFormatError(f"{path}: row {lineno}: t={row[1]} outside [0, 1]")
            if cid not in groups:
                groups[cid] = []
                order.append(cid)
            groups[cid].append((t, y))
    if not order:
        raise DataFormatError(f"{path}: no data rows")
    curves = [
        CurveData(
            times=np.array([p[0] for p in groups[cid]]),
            values=np.array([p[1] for p in groups[cid]]),
        )
        for cid in order
    ]
    return Dataset.functional("sparse", curves)


def write_curves_csv(path: str, data: Dataset) -> None:
    lines = ["curve_id,t,y"]
    for i, c in enumerate(data.curves):
        for t, y in zip(c.times, c.values):
            lines.append(f"{i},{_fmt(t)},{_fmt(y)}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _sidecar(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".json"


def read_cov_csv(path: str) -> Dataset:
    """Matrix-regime input: numeric M x M CSV plus a sidecar JSON with n."""
    _require_file(path)
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataFormatError(f"{path}: row {lineno}: non-numeric entry") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataFormatError(f"{path}: row {lineno}: ragged row")
    S = np.asarray(rows)
    if S.size == 0 or S.shape[0] != S.shape[1]:
        raise DataFormatError(f"{path}: expected a square numeric matrix, got {S.shape}")
    side = _sidecar(path)
    _require_file(side)
    with open(side) as fh:
        meta = json.load(fh)
    if "n" not in meta:
        raise DataFormatError(f"{side}: missing 'n'")
    try:
        return Dataset.matrix(S, int(meta["n"]))
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from None


def write_cov_csv(path: str, data: Dataset) -> None:
    lines = [",".join(_fmt(v) for v in row) for row in data.cov]
    _atomic_write(path, "\n".join(lines) + "\n")
    _atomic_write(_sidecar(path), json.dumps({"n": data.n}, sort_keys=True) + "\n")


def read_params_json(path: str) -> ModelParams:
    _require_file(path)
    with open(path) as fh:
        d = json.load(fh)
    try:
        return ModelParams.from_dict(d)
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"{path}: {e}") from None


def write_params_json(path: str, params: ModelParams) -> None:
    _atomic_write(path, json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


def _read_json(path: str) -> dict:
    _require_file(path)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: invalid JSON ({e})") from None


def _csv_text(header: list[str], rows: list[list], comments: list[str]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    lines.extend(f"# {c}" for c in comments)
    return "\n".join(lines) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="remlpc", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="worker threads for experiments")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    p.add_argument("--seed", type=int, default=None, help="override the configured base seed")
    sub = p.add_subparsers(dest="verb", required=True)

    b = sub.add_parser("basis", help="evaluate the orthonormal spline basis on a grid")
    b.add_argument("--M", type=int, required=True)
    b.add_argument("--grid", type=int, default=201)
    b.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="draw one synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="fit the rank-r covariance model")
    f.add_argument("--data", required=True)
    f.add_argument("--M", type=int, default=None)
    f.add_argument("--r", type=int, required=True)
    f.add_argument("--sigma2", type=float, required=True)
    f.add_argument("--s", type=float, default=1.0)
    f.add_argument("--regime", choices=["sparse", "dense", "matrix"], default="sparse")
    f.add_argument("--out", default=None)
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--grad-tol", type=float, default=None,
                   help="gradient norm target; default picks one per regime")
    f.add_argument("--init", choices=["pooled-pca", "random"], default="pooled-pca")
    f.add_argument("--restarts", type=int, default=1)

    q = sub.add_parser("pca", help="closed-form matrix-regime solution")
    q.add_argument("--data", required=True)
    q.add_argument("--r", type=int, required=True)
    q.add_argument("--sigma2", type=float, default=1.0)
    q.add_argument("--s", type=float, default=1.0)
    q.add_argument("--out", default=None)

    rr = sub.add_parser("rates", help="loss decay across a sample-size grid")
    rr.add_argument("--config", required=True)
    rr.add_argument("--out", required=True)

    sc = sub.add_parser("score-check", help="first-order score expansion residuals")
    sc.add_argument("--config", required=True)
    sc.add_argument("--out", required=True)

    kl = sub.add_parser("kl-scan", help="KL divergence over a shrinking ellipsoid")
    kl.add_argument("--params", required=True)
    kl.add_argument("--alphas", default="1e-3,3e-3,1e-2,3e-2")
    kl.add_argument("--directions", type=int, default=200)
    kl.add_argument("--out", required=True)

    dc = sub.add_parser("design-check", help="design second-moment concentration")
    dc.add_argument("--M", type=int, required=True)
    dc.add_argument("--n", type=int, default=100)
    dc.add_argument("--m", type=int, required=True)
    dc.add_argument("--r", type=int, default=0, help="probe a random rank-r frame too")
    dc.add_argument("--frame-seed", type=int, default=1)
    dc.add_argument("--out", default=None)

    return p


def parse(argv) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _cmd_basis(args) -> int:
    basis = make_basis(args.M)
    if args.grid < 2:
        raise UsageError("--grid must be at least 2")
    t = np.linspace(0.0, 1.0, args.grid)
    V = eval_basis(basis, t)
    header = ["t"] + [f"phi_{k + 1}" for k in range(args.M)]
    rows = [[t[i]] + list(V[i]) for i in range(t.size)]
    _atomic_write(args.out, _csv_text(header, rows, []))
    _say(args, f"wrote {args.out} ({args.grid} points, M={args.M})")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = _read_json(args.config)
    try:
        regime = cfg["regime"]
        n = int(cfg["n"])
        seed = int(cfg.get("seed", 0)) if args.seed is None else args.seed
        sigma2 = float(cfg.get("sigma2", 1.0))
        s = float(cfg.get("s", 1.0))
        ecfg = sim.ExperimentConfig(
            regime=regime,
            n_grid=(n,),
            replicates=1,
            r=len(cfg["truth"]["eigenvalues"]),
            base_seed=seed,
            sigma2=sigma2,
            s=s,
            truth=cfg["truth"],
        )
        truth = sim.build_truth(ecfg)
        data = sim.sample_dataset(
            truth,
            regime,
            n,
            (seed, n, 0),
            sigma2=sigma2,
            s=s,
            m_bounds=tuple(cfg["m_bounds"]) if "m_bounds" in cfg else None,
            m=int(cfg["m"]) if "m" in cfg else None,
        )
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"{args.config}: {e}") from None
    if regime == "matrix":
        write_cov_csv(args.out, data)
    else:
        write_curves_csv(args.out, data)
    _say(args, f"wrote {args.out} (regime={regime}, n={n})")
    return EXIT_OK


def _cmd_fit(args) -> int:
    if args.regime == "matrix":
        data = read_cov_csv(args.data)
        basis = None
        M = data.cov.shape[0]
        if args.M is not None and args.M != M:
            raise UsageError(f"--M {args.M} does not match covariance dimension {M}")
    else:
        data = read_curves_csv(args.data)
        if args.regime == "dense":
            data = Dataset.functional("dense", data.curves)
        if args.M is None:
            raise UsageError("functional regimes require --M")
        basis = make_basis(args.M)
    seed = 0 if args.seed is None else args.seed
    config = optimizer.FitConfig(
        max_iter=args.max_iter,
        grad_tol=args.grad_tol,
        init=args.init,
        restarts=args.restarts,
        seed=seed,
    )
    try:
        res = optimizer.fit(data, basis, args.r, args.sigma2, args.s, config)
    except ValueError as e:
        raise DataFormatError(f"{args.data}: {e}") from None
    if args.out:
        write_params_json(args.out, res.params)
    _say(
        args,
        f"loss={_fmt(res.loss)} grad_norm={_fmt(res.grad_norm)} "
        f"iters={res.n_iter} converged={res.converged}",
    )
    return EXIT_OK if res.converged else EXIT_NOCONV


def _cmd_pca(args) -> int:
    data = read_cov_csv(args.data)
    try:
        params = matrixcase.pca_fit(data.cov, args.r, args.sigma2, args.s)
    except ValueError as e:
        raise DataFormatError(f"{args.data}: {e}") from None
    if args.out:
        write_params_json(args.out, params)
    loss = neg_loglik(params, data)
    _say(args, f"loss={_fmt(loss)} lambda={','.join(_fmt(v) for v in params.lam)}")
    return EXIT_OK


def _experiment_config(args) -> sim.ExperimentConfig:
    cfg = sim.ExperimentConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = sim.ExperimentConfig.from_dict({**cfg.to_dict(), "base_seed": args.seed})
    return cfg


def _cmd_rates(args) -> int:
    cfg = _experiment_config(args)
    try:
        result = sim.rate_experiment(cfg, threads=args.threads)
    except ValueError as e:
        raise DataFormatError(f"{args.config}: {e}") from None
    loss_keys = ["frame_error", "eigenvalue_error"] + (
        ["kernel_l2"] if cfg.regime != "matrix" else []
    )
    header = ["n", "replicate", "M", "converged", "iters"] + loss_keys
    rows = [[row[k] for k in header] for row in result.rows]
    comments = []
    for key in loss_keys:
        slope, se = result.slopes[key]
        comments.append(f"slope {key} {_fmt(slope)} se {_fmt(se)}")
    for n in cfg.n_grid:
        comments.append(f"beta n={n} {_fmt(result.betas[n])}")
    _atomic_write(args.out, _csv_text(header, rows, comments))
    _say(args, "; ".join(comments[: len(loss_keys)]))
    return EXIT_OK


def _cmd_score(args) -> int:
    cfg = _experiment_config(args)
    try:
        result = sim.score_experiment(cfg, threads=args.threads)
    except ValueError as e:
        raise DataFormatError(f"{args.config}: {e}") from None
    header = [
        "n",
        "replicate",
        "gamma",
        "frame_error",
        "eigenvalue_error",
        "frame_residual",
        "eigenvalue_residual",
        "delta_consistency",
    ]
    rows = [[row[k] for k in header] for row in result.rows]
    comments = [
        f"ratio_residual {_fmt(result.ratio_residual)}",
        f"ratio_error {_fmt(result.ratio_error)}",
        f"max_delta_consistency {_fmt(result.max_delta_consistency)}",
    ]
    _atomic_write(args.out, _csv_text(header, rows, comments))
    _say(args, "; ".join(comments))
    return EXIT_OK


def _cmd_kl(args) -> int:
    params = read_params_json(args.params)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a]
    except ValueError:
        raise UsageError(f"bad --alphas value {args.alphas!r}") from None
    seed = 0 if args.seed is None else args.seed
    try:
        result = sim.kl_ellipsoid_scan(params, alphas, n_directions=args.directions, seed=seed)
    except ValueError as e:
        raise DataFormatError(f"{args.params}: {e}") from None
    header = ["alpha", "direction", "kl_over_alpha2"]
    rows = []
    for ia, alpha in enumerate(result.alphas):
        for idir in range(result.ratios.shape[1]):
            rows.append([alpha, idir, result.ratios[ia, idir]])
    comments = [
        f"spread alpha={_fmt(a)} {_fmt(result.spread[a])}" for a in result.alphas
    ] + [f"stability {_fmt(result.stability)}"]
    _atomic_write(args.out, _csv_text(header, rows, comments))
    _say(args, "; ".join(comments))
    return EXIT_OK


def _cmd_design(args) -> int:
    basis = make_basis(args.M)
    seed = 0 if args.seed is None else args.seed
    B = None
    if args.r > 0:
        B = sim.random_frame(args.M, args.r, args.frame_seed).B
    report = sim.design_concentration(basis, args.n, args.m, seed=seed, B=B)
    header = [
        "M",
        "n",
        "m",
        "max_dev_full",
        "mean_dev_full",
        "max_dev_frame",
        "sup_squared_norm_ratio",
    ]
    row = [
        report.M,
        report.n,
        report.m,
        report.max_dev_full,
        report.mean_dev_full,
        report.max_dev_frame,
        report.sup_squared_norm_ratio,
    ]
    text = _csv_text(header, [row], [])
    if args.out:
        _atomic_write(args.out, text)
    _say(args, text.strip())
    return EXIT_OK


_DISPATCH = {
    "basis": _cmd_basis,
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "pca": _cmd_pca,
    "rates": _cmd_rates,
    "score-check": _cmd_score,
    "kl-scan": _cmd_kl,
    "design-check": _cmd_design,
}


def run(args: argparse.Namespace) -> int:
    return _DISPATCH[args.verb](args)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        return run(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_NOFILE


if __name__ == "__main__":
    sys.exit(main())
