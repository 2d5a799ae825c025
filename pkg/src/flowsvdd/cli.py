"""Command line entry point: ``flowsvdd {train,eval,grid,rank}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ContractError, DimensionError, FlowSVDDError
from .flow import FlowModel
from .manifest import digest_of, prepare, read_manifest, write_manifest
from .metrics import boundary_grid, evaluate, rank_extremes, write_grid_csv, write_latent_csv
from .svdd import SvddHead, score
from .train import TrainConfig, fit, write_history_csv

MODEL_FORMAT_VERSION = 1
log = logging.getLogger("flowsvdd")


def save_model(path: Path, model: FlowModel, head: SvddHead, meta: dict) -> None:
    doc = {"format_version": MODEL_FORMAT_VERSION, "flow": model.to_dict(), "head": head.to_dict(), **meta}
    path.write_text(json.dumps(doc, sort_keys=True))


def load_model(path: str | Path) -> tuple[FlowModel, SvddHead, dict]:
    path = Path(path)
    if not path.exists():
        raise FlowSVDDError(f"model file not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported model format_version {doc.get('format_version')!r}")
    return FlowModel.from_dict(doc["flow"]), SvddHead.from_dict(doc["head"]), doc


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ContractError(f"--set expects KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    run_path = Path(args.manifest)
    run = read_manifest(run_path)
    run.update(_overrides(args.set or []))
    if "dataset" not in run:
        raise ContractError(f"{run_path}: missing 'dataset'")
    dataset_path = (run_path.parent / run["dataset"]).resolve()
    out_dir = Path(args.output_dir) if args.output_dir else run_path.parent / run.get("output_dir", "out")
    cfg = TrainConfig.from_mapping(run)
    data = prepare(dataset_path)
    train = data.train
    if train.n < 1:
        raise ContractError("training split is empty")
    digest = digest_of(cfg.to_dict(), data.manifest, data.data_sha256)
    log.info("training on %d rows x %d features (digest %s)", train.n, train.dim, digest[:12])
    result = fit(train, cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "digest": digest,
        "seed": cfg.seed,
        "train_config": cfg.to_dict(),
        "dataset_manifest": data.manifest,
        "data_sha256": data.data_sha256,
        "version": __version__,
    }
    save_model(out_dir / "model.json", result.model, result.head, meta)
    write_history_csv(result.history, out_dir / "history.csv",
                      comment=f"flowsvdd history format_version=1 digest={digest} seed={cfg.seed}")
    effective = {k: v for k, v in run.items()}
    effective.update({k: str(v) for k, v in cfg.to_dict().items()})
    effective["digest"] = digest
    write_manifest(effective, out_dir / "run.effective")
    print(f"wrote {out_dir / 'model.json'} (R^2={result.head.radius_sq:.6g}, "
          f"violations={result.history[-1].violation_fraction:.4f})")
    return 0


def _check_dim(model: FlowModel, dim: int) -> None:
    if model.dim != dim:
        raise DimensionError(f"model expects D={model.dim} features, dataset has {dim}")


def _write_or_print(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text + "\n")


def cmd_eval(args) -> int:
    model, head, doc = load_model(args.model)
    data = prepare(args.dataset)
    part = data.part(args.part)
    _check_dim(model, part.dim)
    report = evaluate(model, head, part.features, part.labels, k=args.k, row_ids=part.row_ids,
                      digest=digest_of(doc.get("digest"), data.digest, args.part),
                      seed=doc.get("seed"), config={"model_digest": doc.get("digest"), "part": args.part,
                                                    "dataset_manifest": data.manifest})
    _write_or_print(report.to_json(), args.output)
    return 0


def cmd_grid(args) -> int:
    model, head, doc = load_model(args.model)
    if model.dim != 2:
        raise ContractError(f"grid needs a 2-D model, got D={model.dim}")
    train_x = prepare(args.data).train.features if args.data else None
    grid = boundary_grid(model, head, args.bounds, args.resolution, train_x=train_x, workers=args.workers)
    digest = digest_of(doc.get("digest"), args.bounds, args.resolution)
    out = Path(args.output)
    write_grid_csv(grid, out, digest)
    if grid.train_latent is not None:
        write_latent_csv(train_x, grid.train_latent, out.with_name(out.stem + "_latent.csv"), digest)
    print(f"wrote {out} ({len(grid)} cells)")
    return 0


def cmd_rank(args) -> int:
    model, head, doc = load_model(args.model)
    data = prepare(args.dataset)
    part = data.part(args.part)
    _check_dim(model, part.dim)
    if not 0 < args.k <= part.n:
        raise ContractError(f"k={args.k} must lie in [1, {part.n}]")
    d = score(part.features, model, head).distances
    best, worst = rank_extremes(d, args.k)
    doc_out = {
        "format_version": 1,
        "digest": digest_of(doc.get("digest"), data.digest, args.part, args.k),
        "part": args.part,
        "k": args.k,
        "best": [{"index": int(i), "row_id": int(part.row_ids[i]), "score": float(d[i])} for i in best],
        "worst": [{"index": int(i), "row_id": int(part.row_ids[i]), "score": float(d[i])} for i in worst],
    }
    _write_or_print(json.dumps(doc_out, indent=1, sort_keys=True), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsvdd", description="Flow-based SVDD anomaly detection")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run manifest")
    t.add_argument("manifest")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a manifest field")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset split and report AUC / F1")
    e.add_argument("model")
    e.add_argument("dataset")
    e.add_argument("--part", default="test", choices=["train", "test", "all"])
    e.add_argument("-k", type=int, default=10)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grid", help="export the 2-D decision region on a grid")
    g.add_argument("model")
    g.add_argument("--bounds", nargs=4, type=float, metavar=("XMIN", "XMAX", "YMIN", "YMAX"),
                   default=[-2.0, 2.0, -2.0, 2.0])
    g.add_argument("--resolution", type=int, default=100)
    g.add_argument("--data", help="dataset manifest whose training points are embedded too")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("-o", "--output", default="grid.csv")
    g.set_defaults(func=cmd_grid)

    r = sub.add_parser("rank", help="indices of the most central and most distant examples")
    r.add_argument("model")
    r.add_argument("dataset")
    r.add_argument("-k", type=int, default=10)
    r.add_argument("--part", default="test", choices=["train", "test", "all"])
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_rank)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FlowSVDDError, OSError, ValueError) as exc:
        print(f"flowsvdd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
