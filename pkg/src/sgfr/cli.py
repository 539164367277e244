"""Command-line entry point: bank | score | synth | eval | bench.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.  Every artifact written embeds the resolved configuration and a
version string, so any output can be traced back to the exact invocation.
``SGFR_LOG`` (debug/info/warning/error) controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import EvaluationError, ablate_sampling, evaluate
from .memory_bank import BankError, MemoryBank, build_bank, load_bank
from .omp import OmpConfig, omp_solve
from .pgm import read_pgm, write_pgm8, write_pgm16
from .pipeline import PipelineConfig, score_sample
from .synthetic import SyntheticSpec, gen_synthetic
from .tensor_io import (
    DictionaryMatrix,
    FeatureTensor,
    FlatFeature,
    TensorFormatError,
    read_tensor,
    write_tensor,
)

log = logging.getLogger("sgfr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        suffix = described.stdout.strip() if described.returncode == 0 else "untracked"
    except OSError:
        suffix = "untracked"
    return f"sgfr {__version__} ({suffix})"


def _parse_csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
        return h, w
    except ValueError as exc:
        raise UsageError(f"expected HxW, got {text!r}") from exc


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", default=None, help="scoring levels, e.g. 2,3")
    p.add_argument("--lref", type=int, default=None, help="reference (sampling) level")
    p.add_argument("--sref", type=int, default=40, help="sampling budget")
    p.add_argument("--s", type=int, default=17, help="reconstruction budget")
    p.add_argument("--eps", type=float, default=1e-6, help="residual stop threshold")
    p.add_argument("--sigma", type=float, default=4.0, help="smoothing kernel width")
    p.add_argument("--agg", choices=("mean", "sum"), default="mean")
    p.add_argument("--corr", choices=("abs", "signed"), default="abs")
    p.add_argument("--normalize", type=_parse_bool, default=True, metavar="BOOL")
    p.add_argument("--output-size", default=None, metavar="HxW",
                   help="map resolution (default 256x256; eval defaults to the masks)")


def _pipeline_config(
    args, bank: MemoryBank, default_size: tuple[int, int] = (256, 256)
) -> PipelineConfig:
    manifest_levels = [e["level"] for e in bank.manifest["levels"]]
    ref = args.lref if args.lref is not None else bank.ref_level
    if args.levels is not None:
        levels = _parse_csv_ints(args.levels)
    else:
        levels = [lv for lv in manifest_levels if lv != ref]
    size = _parse_size(args.output_size) if args.output_size else default_size
    try:
        return PipelineConfig(
            scoring_levels=tuple(levels),
            ref_level=ref,
            s_ref=args.sref,
            s=args.s,
            residual_threshold=args.eps,
            output_size=size,
            smoothing_sigma=args.sigma,
            aggregation=args.agg,
            correlation_mode="absolute" if args.corr == "abs" else "signed",
            normalize_columns=args.normalize,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _config_echo(args) -> dict:
    skip = {"func"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def _scan_test_ids(feature_dir: Path, levels: tuple[int, ...]) -> dict[str, dict[int, Path]]:
    import re

    pat = re.compile(r"^(?P<id>.+)_l(?P<level>\d+)\.sgt$")
    found: dict[str, dict[int, Path]] = {}
    for p in sorted(feature_dir.iterdir()):
        m = pat.match(p.name)
        if m:
            found.setdefault(m.group("id"), {})[int(m.group("level"))] = p
    if not found:
        raise BankError(f"no SGT tensors in {feature_dir}")
    for sid, by_level in found.items():
        missing = [lv for lv in levels if lv not in by_level]
        if missing:
            raise BankError(f"test id {sid!r} is missing levels {missing}")
    return found


def cmd_bank(args) -> int:
    levels = _parse_csv_ints(args.levels) if args.levels else [2, 3]
    ref = args.lref if args.lref is not None else 4
    params = {"config": _config_echo(args), "version": version_string()}
    bank = build_bank(args.features, levels=levels, ref_level=ref, created_params=params,
                      manifest_path=args.out)
    manifest_path = Path(args.out) if args.out else Path(args.features) / "manifest.json"
    log.info("bank built: %d nominal ids, levels %s", bank.n_nominal, sorted(bank.levels))
    print(manifest_path)
    return 0


def cmd_score(args) -> int:
    bank = load_bank(args.bank)
    cfg = _pipeline_config(args, bank)
    needed = tuple(sorted({*cfg.scoring_levels, cfg.ref_level}))
    found = _scan_test_ids(Path(args.features), needed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"config": _config_echo(args), "version": version_string()}

    def run(sid: str) -> dict:
        feats = {lv: read_tensor(found[sid][lv]) for lv in needed}
        amap = score_sample(bank, feats, cfg, subset_method=args.method, rng_seed=args.seed)
        map_tensor = FeatureTensor(level=1, data=amap.scores[:, :, None].astype(np.float32))
        write_tensor(map_tensor, out_dir / f"{sid}_map.sgt")
        if args.pgm:
            write_pgm16(amap.scores, out_dir / f"{sid}_map.pgm")
        report = {
            "sample_id": sid,
            "subset_indices": list(amap.subset.indices),
            "subset_method": amap.subset.method,
            "per_level": {
                str(lv): {
                    "residual_norm": ls.residual_norm,
                    "iterations": ls.iterations,
                    "degenerate": ls.degenerate,
                }
                for lv, ls in amap.per_level.items()
            },
            "timing_ms": amap.timing_ms,
            **echo,
        }
        _json_dump(report, out_dir / f"{sid}_report.json")
        log.info("scored %s (max %.4g)", sid, float(amap.scores.max()))
        return report

    ids = sorted(found)
    workers = args.threads if args.threads else (os.cpu_count() or 1)
    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, ids))
    else:
        for sid in ids:
            run(sid)
    print(out_dir)
    return 0


def cmd_synth(args) -> int:
    y0, x0, bh, bw = (int(v) for v in args.block.split(","))
    spec = SyntheticSpec(
        ambient_dim=args.dim,
        subspace_dim=args.subspace_dim,
        n_subspaces=args.subspaces,
        points_per_subspace=args.per_subspace,
        noise_sigma=args.noise,
        anomaly_block=(y0, x0, bh, bw),
        seed=args.seed,
        grid=_parse_size(args.grid),
        levels=tuple(_parse_csv_ints(args.levels)),
        ref_level=args.lref,
        n_test=args.n_test,
        n_normal_test=args.n_normal_test,
        anomaly_norm=args.anomaly_norm,
        mask_size=_parse_size(args.mask_size),
    )
    ds = gen_synthetic(spec)
    out = Path(args.out)
    for sub in ("nominal", "test", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for sid, feats in ds.nominal.items():
        for lv, t in feats.items():
            write_tensor(t, out / "nominal" / f"{sid}_l{lv}.sgt")
    for sid, feats in ds.test.items():
        for lv, t in feats.items():
            write_tensor(t, out / "test" / f"{sid}_l{lv}.sgt")
    for sid, mask in ds.masks.items():
        write_pgm8(mask, out / "masks" / f"{sid}.pgm")
    _json_dump(
        {
            "spec": {**{k: list(v) if isinstance(v, tuple) else v
                        for k, v in vars(spec).items()}},
            "nominal_ids": sorted(ds.nominal),
            "test_ids": sorted(ds.test),
            "config": _config_echo(args),
            "version": version_string(),
        },
        out / "dataset.json",
    )
    print(out)
    return 0


def _read_masks(mask_dir: Path) -> dict[str, np.ndarray]:
    masks = {}
    for p in sorted(mask_dir.glob("*.pgm")):
        masks[p.stem] = read_pgm(p) > 0
    if not masks:
        raise BankError(f"no PGM masks in {mask_dir}")
    return masks


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = _read_masks(Path(args.masks))
    echo = {"config": _config_echo(args), "version": version_string()}

    if args.scores:
        score_maps, mask_list, ids = [], [], []
        for p in sorted(Path(args.scores).glob("*_map.sgt")):
            sid = p.name[: -len("_map.sgt")]
            if sid not in masks:
                raise BankError(f"no mask for scored sample {sid!r}")
            score_maps.append(read_tensor(p).data[:, :, 0].astype(np.float64))
            mask_list.append(masks[sid])
            ids.append(sid)
        if not ids:
            raise BankError(f"no *_map.sgt files in {args.scores}")
        report = evaluate(score_maps, mask_list, max_fpr=args.max_fpr, config=echo)
        _json_dump(
            {
                "auroc": report.auroc,
                "pro": report.pro,
                "n_samples": report.n_samples,
                "sample_ids": ids,
                **echo,
            },
            out_dir / "report.json",
        )
        with open(out_dir / "curve.csv", "w") as f:
            f.write(f"# {version_string()}\n")
            f.write(f"# config={json.dumps(_config_echo(args), sort_keys=True)}\n")
            f.write("fpr,mean_overlap\n")
            for fpr, ov in report.curve:
                f.write(f"{fpr!r},{ov!r}\n")
        print(f"auroc={report.auroc:.6f} pro={report.pro:.6f}")
        return 0

    # Ablation mode: score the test set per (method, s_ref) cell. The masks
    # set the evaluation resolution unless --output-size overrides it.
    mask_shapes = {m.shape for m in masks.values()}
    if len(mask_shapes) != 1:
        raise BankError(f"masks disagree on resolution: {sorted(mask_shapes)}")
    bank = load_bank(args.bank)
    cfg = _pipeline_config(args, bank, default_size=next(iter(mask_shapes)))
    needed = tuple(sorted({*cfg.scoring_levels, cfg.ref_level}))
    found = _scan_test_ids(Path(args.features), needed)
    samples = {
        sid: {lv: read_tensor(path) for lv, path in by_level.items() if lv in needed}
        for sid, by_level in found.items()
    }
    missing = sorted(set(samples) - set(masks))
    if missing:
        raise BankError(f"masks missing for test ids {missing}")
    rows = ablate_sampling(
        bank,
        samples,
        masks,
        s_ref_grid=_parse_csv_ints(args.sref_grid),
        methods=tuple(args.methods.split(",")),
        base_cfg=cfg,
        seed=args.seed,
        tie_s_to_half=not args.fixed_s,
    )
    with open(out_dir / "ablation.csv", "w") as f:
        f.write(f"# {version_string()}\n")
        f.write(f"# config={json.dumps(_config_echo(args), sort_keys=True)}\n")
        f.write("method,s_ref,auroc,pro,coverage_error,ms_per_sample\n")
        for r in rows:
            f.write(
                f"{r['method']},{r['s_ref']},{r['auroc']!r},{r['pro']!r},"
                f"{r['coverage_error']!r},{r['ms_per_sample']:.3f}\n"
            )
    _json_dump({"rows": rows, **echo}, out_dir / "report.json")
    for r in rows:
        print(
            f"{r['method']:>9} s_ref={r['s_ref']:<4d} auroc={r['auroc']:.4f} "
            f"pro={r['pro']:.4f} coverage={r['coverage_error']:.4g} "
            f"ms={r['ms_per_sample']:.2f}"
        )
    return 0


def _bench_solve_times(args) -> list[dict]:
    rng = np.random.default_rng(args.seed)
    rows = []
    for n in _parse_csv_ints(args.n_grid):
        dim = args.dim
        ref_dim = args.ref_dim if args.ref_dim else dim // 2
        X = rng.standard_normal((dim, n))
        X /= np.linalg.norm(X, axis=0)
        Xr = rng.standard_normal((ref_dim, n))
        Xr /= np.linalg.norm(Xr, axis=0)
        d_score = DictionaryMatrix(matrix=X, column_ids=tuple(f"c{i}" for i in range(n)))
        d_ref = DictionaryMatrix(matrix=Xr, column_ids=tuple(f"c{i}" for i in range(n)))
        queries = [FlatFeature(rng.standard_normal(dim)) for _ in range(args.samples)]
        queries_ref = [FlatFeature(rng.standard_normal(ref_dim)) for _ in range(args.samples)]
        cfg_s = OmpConfig(sparsity_budget=args.s, residual_threshold=0.0)
        cfg_ref = OmpConfig(sparsity_budget=args.sref, residual_threshold=0.0)

        for mode in ("without", "with"):
            per_sample = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                for y, y_ref in zip(queries, queries_ref):
                    if mode == "with":
                        code_ref = omp_solve(y_ref, d_ref, range(n), cfg_ref)
                        subset = sorted(code_ref.coefficients)
                        omp_solve(y, d_score, subset, cfg_s)
                    else:
                        omp_solve(y, d_score, range(n), cfg_s)
                per_sample.append((time.perf_counter() - t0) * 1e3 / args.samples)
            rows.append(
                {
                    "mode": mode,
                    "n": n,
                    "dim": dim,
                    "ref_dim": ref_dim,
                    "s": args.s,
                    "s_ref": args.sref,
                    "ms_per_sample": float(np.median(per_sample)),
                }
            )
    return rows


def cmd_bench(args) -> int:
    rows = _bench_solve_times(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "bench.csv", "w") as f:
        f.write(f"# {version_string()}\n")
        f.write(f"# config={json.dumps(_config_echo(args), sort_keys=True)}\n")
        f.write("mode,n,dim,ref_dim,s,s_ref,ms_per_sample\n")
        for r in rows:
            f.write(
                f"{r['mode']},{r['n']},{r['dim']},{r['ref_dim']},{r['s']},"
                f"{r['s_ref']},{r['ms_per_sample']:.3f}\n"
            )
    _json_dump({"rows": rows, "config": _config_echo(args), "version": version_string()},
               out_dir / "bench.json")
    for r in rows:
        print(f"{r['mode']:>8} N={r['n']:<5d} {r['ms_per_sample']:.2f} ms/sample")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sgfr", description=__doc__)
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p_bank = sub.add_parser("bank", parents=[], help="validate a feature dir and write its manifest")
    p_bank.add_argument("--features", required=True, help="directory of nominal SGT tensors")
    p_bank.add_argument("--levels", default=None, help="scoring levels CSV (default 2,3)")
    p_bank.add_argument("--lref", type=int, default=None, help="reference level (default 4)")
    p_bank.add_argument("--out", default=None, help="manifest path (default <features>/manifest.json)")
    p_bank.set_defaults(func=cmd_bank)

    p_score = sub.add_parser("score", help="compute anomaly maps for a test feature dir")
    p_score.add_argument("--bank", required=True)
    p_score.add_argument("--features", required=True, help="directory of test SGT tensors")
    p_score.add_argument("--out", required=True)
    _add_pipeline_flags(p_score)
    p_score.add_argument("--method", choices=("subspace", "random", "full"), default="subspace")
    p_score.add_argument("--seed", type=int, default=0)
    p_score.add_argument("--threads", type=int, default=0, help="0 = all cores")
    p_score.add_argument("--pgm", action="store_true", help="also write 16-bit PGM previews")
    p_score.set_defaults(func=cmd_score)

    p_synth = sub.add_parser("synth", help="write a synthetic benchmark dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--dim", type=int, default=2048)
    p_synth.add_argument("--subspace-dim", type=int, default=5)
    p_synth.add_argument("--subspaces", type=int, default=1)
    p_synth.add_argument("--per-subspace", type=int, default=60)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.add_argument("--block", default="4,4,4,4", metavar="Y,X,H,W")
    p_synth.add_argument("--grid", default="16x16")
    p_synth.add_argument("--levels", default="2,3")
    p_synth.add_argument("--lref", type=int, default=4)
    p_synth.add_argument("--n-test", type=int, default=10)
    p_synth.add_argument("--n-normal-test", type=int, default=0)
    p_synth.add_argument("--anomaly-norm", type=float, default=0.5)
    p_synth.add_argument("--mask-size", default="256x256")
    p_synth.set_defaults(func=cmd_synth)

    p_eval = sub.add_parser("eval", help="evaluate score maps, or run the sampling ablation")
    p_eval.add_argument("--masks", required=True, help="directory of PGM ground-truth masks")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--scores", default=None, help="directory of *_map.sgt (metric-only mode)")
    p_eval.add_argument("--bank", default=None)
    p_eval.add_argument("--features", default=None, help="test tensors (ablation mode)")
    p_eval.add_argument("--max-fpr", type=float, default=0.30)
    p_eval.add_argument("--sref-grid", default="10,20,30,40,50")
    p_eval.add_argument("--methods", default="subspace,random")
    p_eval.add_argument("--fixed-s", action="store_true",
                        help="keep --s instead of tying s = s_ref/2")
    p_eval.add_argument("--seed", type=int, default=0)
    _add_pipeline_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="time solves with and without sampling")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--n-grid", default="50,100,200")
    p_bench.add_argument("--dim", type=int, default=16384)
    p_bench.add_argument("--ref-dim", type=int, default=0, help="0 = dim/2")
    p_bench.add_argument("--sref", type=int, default=20)
    p_bench.add_argument("--s", type=int, default=17)
    p_bench.add_argument("--samples", type=int, default=5)
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SGFR_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "eval" and not args.scores and not (args.bank and args.features):
            raise UsageError("eval needs either --scores, or --bank with --features")
        return args.func(args)
    except UsageError as exc:
        print(f"sgfr: error: {exc}", file=sys.stderr)
        return 1
    except (TensorFormatError, BankError, EvaluationError, ValueError, FileNotFoundError,
            NotADirectoryError, json.JSONDecodeError) as exc:
        print(f"sgfr: data error: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"sgfr: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
