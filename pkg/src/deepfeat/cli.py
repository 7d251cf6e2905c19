"""Command line interface.

Every command builds the same request objects the HTTP service accepts
and either calls the handlers in process (the default) or posts them to
a running server given with ``--server``. Exit codes: 0 success, 1 usage
error, 2 bad data, 3 model failure.
"""

from __future__ import annotations

import argparse
import base64
import sys
from pathlib import Path

from deepfeat.errors import DataError, ModelError
from deepfeat.service import schemas
from deepfeat.service.handlers import (
    ServiceState,
    handle_cache,
    handle_compare,
    handle_evaluate,
    handle_features,
    handle_predict,
)

_VARIANT_CHOICES = ("wcb", "ncb", "td", "bu")


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _external_spec(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=DIR, got {text!r}")
    return name, path


def _layer_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _b64_file(path: str) -> str:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return base64.b64encode(blob).decode("ascii")


def _post(server: str, route: str, payload: dict) -> dict:
    import requests

    url = server.rstrip("/") + route
    try:
        resp = requests.post(url, json=payload, timeout=3600)
    except requests.RequestException as exc:
        raise ModelError(f"cannot reach server at {url}: {exc}") from exc
    if resp.status_code == 200:
        return resp.json()
    try:
        detail = resp.json().get("detail", resp.text)
    except ValueError:
        detail = resp.text
    if resp.status_code == 400:
        raise DataError(str(detail))
    if resp.status_code == 503:
        raise ModelError(str(detail))
    raise ModelError(f"server returned {resp.status_code}: {str(detail)[:200]}")


def _state(args) -> ServiceState:
    return ServiceState(
        model_path=getattr(args, "model", None),
        cache_dir=getattr(args, "cache", None),
        working_long_side=args.working_long_side,
    )


def _write_text_files(files: dict[str, str], out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(files):
            (out_dir / name).write_text(files[name])
    except OSError as exc:
        raise DataError(f"cannot write under {out_dir}: {exc}") from exc


def _print_report(resp: schemas.EvaluateResponse, out_dir: Path) -> None:
    for image_id in resp.skipped:
        print(f"warning: skipped {image_id}", file=sys.stderr)
    for row in resp.summary:
        print(
            f"{row.model:>12s}  {row.metric:<9s} "
            f"{row.mean:9.6f} +/- {row.sem:.6f}  (n={row.n})"
        )
    print(f"wrote {len(resp.files)} report files to {out_dir}")


def _cmd_predict(args) -> int:
    if args.image is None and args.features is None:
        args.parser.error("predict needs --image or --features")
    req = schemas.PredictRequest(
        image_b64=_b64_file(args.image) if args.image else None,
        features_b64=_b64_file(args.features) if args.features else None,
        variant=args.variant,
        alpha=args.alpha,
        beta=args.beta,
        sigma_frac=args.sigma_frac,
        top_n=args.top_n,
        want_png=args.out_png is not None or args.out_raw is None,
        want_raw=args.out_raw is not None,
    )
    if args.server:
        resp = schemas.PredictResponse.model_validate(
            _post(args.server, "/predict", req.model_dump())
        )
    else:
        resp = handle_predict(_state(args), req)

    source = args.image if args.image is not None else args.features
    out_png = args.out_png
    if out_png is None and args.out_raw is None:
        out_png = f"{Path(source).stem}.{args.variant}.png"
    try:
        if out_png is not None:
            Path(out_png).write_bytes(base64.b64decode(resp.png_b64))
            print(f"wrote {out_png} ({resp.height}x{resp.width})")
        if args.out_raw is not None:
            Path(args.out_raw).write_bytes(base64.b64decode(resp.raw_b64))
            print(f"wrote {args.out_raw} ({resp.height}x{resp.width})")
    except OSError as exc:
        raise DataError(f"cannot write output: {exc}") from exc
    return 0


def _evaluate_request(args, cls):
    return cls(
        dataset_root=args.dataset,
        variants=[v for v in args.variants.split(",") if v.strip()],
        alpha=args.alpha,
        beta=args.beta,
        sigma_frac=args.sigma_frac,
        seed=args.seed,
        borji_splits=args.borji_splits,
        workers=args.workers,
        regen_sigma=args.regen_density_sigma,
        all_pairs=args.all_pairs,
    )


def _cmd_evaluate(args) -> int:
    req = _evaluate_request(args, schemas.EvaluateRequest)
    if args.server:
        resp = schemas.EvaluateResponse.model_validate(
            _post(args.server, "/evaluate", req.model_dump())
        )
    else:
        resp = handle_evaluate(_state(args), req)
    out_dir = Path(args.out)
    _write_text_files(resp.files, out_dir)
    _print_report(resp, out_dir)
    return 0


def _cmd_compare(args) -> int:
    externals: dict[str, str] = {}
    for name, path in args.external:
        if name in externals:
            raise DataError(f"duplicate external model name {name!r}")
        externals[name] = path
    req = _evaluate_request(args, schemas.CompareRequest)
    req.externals = externals
    if args.server:
        resp = schemas.EvaluateResponse.model_validate(
            _post(args.server, "/compare", req.model_dump())
        )
    else:
        resp = handle_compare(_state(args), req)
    out_dir = Path(args.out)
    _write_text_files(resp.files, out_dir)
    _print_report(resp, out_dir)
    return 0


def _cmd_features(args) -> int:
    if args.image is None and args.features is None:
        args.parser.error("features needs --image or --features")
    req = schemas.FeaturesRequest(
        image_b64=_b64_file(args.image) if args.image else None,
        features_b64=_b64_file(args.features) if args.features else None,
        layers=args.layers,
        cam_class=args.cam,
    )
    if args.server:
        resp = schemas.FeaturesResponse.model_validate(
            _post(args.server, "/features", req.model_dump())
        )
    else:
        resp = handle_features(_state(args), req)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(resp.files_b64):
            (out_dir / name).write_bytes(base64.b64decode(resp.files_b64[name]))
    except OSError as exc:
        raise DataError(f"cannot write under {out_dir}: {exc}") from exc
    print(f"wrote {len(resp.files_b64)} maps to {out_dir}")
    return 0


def _cmd_cache(args) -> int:
    req = schemas.CacheRequest(dataset_root=args.dataset, out_dir=args.out)
    if args.server:
        resp = schemas.CacheResponse.model_validate(
            _post(args.server, "/cache", req.model_dump())
        )
    else:
        resp = handle_cache(_state(args), req)
    print(
        f"cached features: {resp.written} written, "
        f"{resp.reused} reused, {resp.total} total"
    )
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from deepfeat.service.app import create_app

    app = create_app(
        model_path=args.model,
        cache_dir=args.cache,
        working_long_side=args.working_long_side,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def _add_common(p, server: bool = True):
    p.add_argument("--model", help="model checkpoint (.pt)")
    p.add_argument(
        "--working-long-side",
        type=int,
        default=448,
        help="inference resolution of the longer image side (default 448)",
    )
    if server:
        p.add_argument(
            "--server",
            help="address of a running service; requests go there instead of in-process",
        )


def _add_fusion(p):
    p.add_argument("--alpha", type=float, default=0.5, help="bottom-up weight")
    p.add_argument("--beta", type=float, default=0.5, help="center-bias weight")
    p.add_argument(
        "--sigma-frac",
        type=float,
        default=0.25,
        help="center-bias spread as a fraction of the longer side",
    )


def _add_dataset_opts(p):
    p.add_argument("--dataset", required=True, help="dataset root directory")
    p.add_argument(
        "--variants",
        default="all",
        help="comma-separated subset of wcb,ncb,td,bu (default all)",
    )
    p.add_argument("--seed", type=int, default=42, help="shuffled-negatives seed")
    p.add_argument(
        "--borji-splits",
        type=int,
        default=100,
        help="random negative splits per image (default 100)",
    )
    p.add_argument("--workers", type=int, default=1, help="parallel image workers")
    p.add_argument("--cache", help="feature container directory")
    p.add_argument(
        "--regen-density-sigma",
        type=float,
        nargs="?",
        const=35.0,
        default=None,
        help="rebuild densities by blurring fixation points instead of using "
        "the dataset's maps; optional sigma in pixels (default 35, about one "
        "degree of visual angle)",
    )
    p.add_argument(
        "--all-pairs",
        action="store_true",
        help="test every model pair instead of consecutive ranks",
    )
    p.add_argument("--out", required=True, help="report output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="deepfeat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("predict", help="saliency map for one image")
    p.add_argument("--image", help="input image (PNG or JPEG)")
    p.add_argument("--features", help="precomputed feature container (.dfb1)")
    p.add_argument(
        "--variant", choices=_VARIANT_CHOICES, default="wcb", help="pipeline variant"
    )
    _add_fusion(p)
    p.add_argument("--top-n", type=int, default=None, help="classes kept in the mixture")
    p.add_argument("--out-png", help="grayscale map destination")
    p.add_argument("--out-raw", help="float32 map destination (.dfm1)")
    _add_common(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score the pipeline variants on a dataset")
    _add_dataset_opts(p)
    _add_fusion(p)
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser(
        "compare", help="score variants against external saliency maps"
    )
    _add_dataset_opts(p)
    _add_fusion(p)
    p.add_argument(
        "--external",
        action="append",
        required=True,
        type=_external_spec,
        metavar="NAME=DIR",
        help="external model name and its map directory (repeatable)",
    )
    _add_common(p)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("features", help="dump per-layer contrast maps")
    p.add_argument("--image", help="input image (PNG or JPEG)")
    p.add_argument("--features", help="precomputed feature container (.dfb1)")
    p.add_argument(
        "--layers",
        type=_layer_list,
        default=list(schemas.DEFAULT_FEATURE_LAYERS),
        help="comma-separated layer indices (default 1,10,20,30,40,49)",
    )
    p.add_argument("--cam", type=int, default=None, help="also dump this class's map")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("cache", help="precompute feature containers for a dataset")
    p.add_argument("--dataset", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="container output directory")
    _add_common(p)
    p.set_defaults(func=_cmd_cache)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--cache", help="feature container directory")
    _add_common(p, server=False)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.parser = parser
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
