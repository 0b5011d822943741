"""Command-line entry point: ``ctexplain <command> --config run.toml``."""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import dataset as ds
from . import evaluation as ev
from .config import ConfigError, PipelineConfig, validate_config
from .embedding import scatter_plot, tsne_embed
from .gradcam import crop_to_content, grad_cam, map_to_csv, overlay, save_rgb
from .modelzoo import WeightFetchError, build_model, extract_features, load_checkpoint
from .pipeline import CTImageDataset
from .preprocess import canvas_embed_with_placement, normalize, replicate_channels
from .train import TrainingError, resolve_device, train_fold

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAIN = 5
EXIT_EVAL = 6

EPILOG = """\
exit codes:
  0  success
  2  usage error (unknown command or bad flags)
  3  invalid config file
  4  data error (missing dataset root, manifest or fold plan)
  5  training error (weights unavailable, non-finite loss)
  6  evaluation error (missing checkpoint or metrics, empty split)

environment:
  CTX_CACHE  overrides the pretrained-weight cache directory
"""


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# artifact locations
# ---------------------------------------------------------------------------

def _out(cfg: PipelineConfig) -> Path:
    return cfg.output.dir


def manifest_path(cfg: PipelineConfig) -> Path:
    return _out(cfg) / "manifest.csv"


def folds_path(cfg: PipelineConfig) -> Path:
    return _out(cfg) / "folds.csv"


def checkpoint_path(cfg: PipelineConfig, fold: int) -> Path:
    return _out(cfg) / f"fold{fold}" / "model.pt"


def metrics_path(cfg: PipelineConfig, fold: int) -> Path:
    return _out(cfg) / "metrics" / f"fold{fold}.json"


def _load_manifest(cfg: PipelineConfig) -> ds.DatasetManifest:
    try:
        return ds.read_manifest(manifest_path(cfg))
    except ds.DatasetError as exc:
        raise CommandError(EXIT_DATA, f"{exc} (run `ingest` first)") from None


def _load_plan(cfg: PipelineConfig, manifest: ds.DatasetManifest) -> ds.FoldPlan:
    try:
        return ds.read_fold_plan(folds_path(cfg), manifest)
    except ds.DatasetError as exc:
        raise CommandError(EXIT_DATA, f"{exc} (run `split` first)") from None


def _folds(arg: str, k: int) -> list[int]:
    if arg == "all":
        return list(range(k))
    try:
        fold = int(arg)
    except ValueError:
        raise CommandError(EXIT_USAGE, f"--fold must be an integer or 'all', got {arg!r}") from None
    if not 0 <= fold < k:
        raise CommandError(EXIT_USAGE, f"--fold {fold} outside [0, {k})")
    return [fold]


def _load_model(cfg: PipelineConfig, fold: int):
    path = checkpoint_path(cfg, fold)
    if not path.is_file():
        raise CommandError(EXIT_EVAL, f"checkpoint not found: {path} (run `train --fold {fold}` first)")
    model = load_checkpoint(path)
    return model.to(resolve_device(cfg.train.device))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, args) -> int:
    try:
        manifest = ds.scan_dataset(cfg.dataset.root, cfg.dataset.dataset_id)
    except ds.DatasetError as exc:
        raise CommandError(EXIT_DATA, str(exc)) from None
    ds.write_manifest(manifest, manifest_path(cfg), cfg.hash)
    counts = ", ".join(f"{lab.name}={n}" for lab, n in manifest.counts.items())
    print(f"ingested {len(manifest)} images ({counts}); skipped {manifest.skipped} -> {manifest_path(cfg)}")
    return EXIT_OK


def cmd_split(cfg: PipelineConfig, args) -> int:
    manifest = _load_manifest(cfg)
    try:
        plan = ds.stratified_folds(manifest, cfg.split.k, cfg.split.seed)
    except ds.DatasetError as exc:
        raise CommandError(EXIT_DATA, str(exc)) from None
    ds.write_fold_plan(plan, manifest, folds_path(cfg), cfg.hash)
    for lab, counts in plan.fold_counts(manifest).items():
        print(f"{lab.name}: {counts}")
    return EXIT_OK


def _train_one(cfg: PipelineConfig, fold: int) -> str:
    manifest = _load_manifest(cfg)
    plan = _load_plan(cfg, manifest)
    try:
        model = build_model(cfg.model.name, cfg.model.pretrained, cfg.model.seed, cfg.model.cache_dir)
    except WeightFetchError as exc:
        raise CommandError(EXIT_TRAIN, str(exc)) from None
    out_dir = checkpoint_path(cfg, fold).parent
    try:
        _, history = train_fold(model, manifest, plan, fold, cfg.train.train_config(fold),
                                checkpoint_dir=out_dir, config_hash=cfg.hash)
    except (TrainingError, ds.DatasetError) as exc:
        raise CommandError(EXIT_TRAIN, f"fold {fold}: {exc}") from None
    history.to_csv(out_dir / "history.csv", cfg.hash)
    return f"fold {fold}: trained {len(history)} epochs -> {checkpoint_path(cfg, fold)}"


def _train_job(config_path: str, fold: int) -> str:
    return _train_one(validate_config(config_path), fold)


def cmd_train(cfg: PipelineConfig, args) -> int:
    folds = _folds(args.fold, cfg.split.k)
    _load_plan(cfg, _load_manifest(cfg))  # fail fast on missing upstream artifacts
    if args.parallel_folds > 1 and len(folds) > 1:
        if cfg.source is None:
            raise CommandError(EXIT_USAGE, "--parallel-folds needs a config file")
        import multiprocessing as mp

        with ProcessPoolExecutor(args.parallel_folds, mp_context=mp.get_context("spawn")) as pool:
            for msg in pool.map(_train_job, [str(cfg.source)] * len(folds), folds):
                print(msg)
    else:
        for fold in folds:
            print(_train_one(cfg, fold))
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    manifest = _load_manifest(cfg)
    plan = _load_plan(cfg, manifest)
    for fold in _folds(args.fold, cfg.split.k):
        model = _load_model(cfg, fold)
        try:
            cm, row = ev.evaluate_fold(model, manifest, plan, fold, batch_size=cfg.train.batch_size,
                                       num_workers=cfg.train.num_workers)
        except (ev.EvaluationError, ds.DatasetError) as exc:
            raise CommandError(EXIT_EVAL, str(exc)) from None
        ev.write_json(ev.fold_record(manifest.dataset_id.value, cfg.model.name, fold, cm, row, cfg.hash),
                      metrics_path(cfg, fold))
        print(f"fold {fold}: acc={row.accuracy:.4f} precision={row.precision:.4f} recall={row.recall:.4f} "
              f"specificity={row.specificity:.4f} f1={row.f1:.4f} (tp={cm.tp} tn={cm.tn} fp={cm.fp} fn={cm.fn})")

    paths = [metrics_path(cfg, f) for f in range(cfg.split.k)]
    if all(p.is_file() for p in paths):
        records = [json.loads(p.read_text(encoding="utf-8")) for p in paths]
        _write_reports(records, _out(cfg), cfg.output.formats, cfg.hash)
    return EXIT_OK


def _group(records: Sequence[dict]) -> dict[tuple[str, str], list[dict]]:
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for r in records:
        if not r.get("summary"):
            groups[(r["dataset"], r["model"])].append(r)
    for recs in groups.values():
        recs.sort(key=lambda r: r["fold"])
    return dict(groups)


def _write_reports(records: Sequence[dict], out_dir: Path | None, formats: Sequence[str],
                   config_hash: str = "") -> str:
    rows = []
    summaries = []
    for (dataset_id, model), recs in sorted(_group(records).items()):
        try:
            summary = ev.aggregate_folds(ev.rows_from_records(recs))
        except ValueError as exc:
            raise CommandError(EXIT_EVAL, f"{dataset_id}/{model}: {exc}") from None
        rows.append(ev.TableRow(dataset_id, model, summary))
        summaries.append((dataset_id, model, summary, recs))
    if not rows:
        raise CommandError(EXIT_EVAL, "no fold metrics found")
    if not config_hash:
        # `report` has no config of its own; reuse the runs' hash when they agree
        hashes = {r.get("config_hash", "") for r in records}
        config_hash = hashes.pop() if len(hashes) == 1 else ""
    markdown = ev.render_markdown(rows, config_hash)
    if out_dir is not None:
        report_dir = out_dir / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        for dataset_id, model, summary, recs in summaries:
            cms = [ev.ConfusionMatrix(**r["confusion"]) for r in recs]
            avg = ev.mean_confusion(cms)
            stem = f"{dataset_id}_{model}"
            if "json" in formats:
                ev.write_json(ev.summary_record(dataset_id, model, summary, config_hash),
                              out_dir / "metrics" / f"summary_{stem}.json")
            if "csv" in formats:
                (report_dir / f"confusion_{stem}.csv").write_text(ev.confusion_csv(avg, config_hash), encoding="utf-8")
            ev.plot_confusion(avg, report_dir / f"confusion_{stem}.png", title=f"{model} ({dataset_id})")
        if "md" in formats:
            (report_dir / "table.md").write_text(markdown, encoding="utf-8")
        if "csv" in formats:
            (report_dir / "table.csv").write_text(ev.render_csv(rows, config_hash), encoding="utf-8")
    return markdown


def cmd_report(args) -> int:
    files: list[Path] = []
    for p in map(Path, args.paths):
        if p.is_dir():
            files.extend(sorted(p.glob("fold*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise CommandError(EXIT_EVAL, f"metrics path not found: {p}")
    records = []
    for f in files:
        try:
            records.append(json.loads(f.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise CommandError(EXIT_EVAL, f"{f}: invalid JSON ({exc})") from None
    out = Path(args.out) if args.out else None
    print(_write_reports(records, out, tuple(args.formats.split(","))), end="")
    return EXIT_OK


def _explain_inputs(cfg: PipelineConfig, rec: ds.ImageRecord, canvas):
    gray, place = canvas_embed_with_placement(ds.load_image(rec), canvas)
    rgb = replicate_channels(gray)
    return rgb, torch.from_numpy(normalize(rgb)), place


def cmd_gradcam(cfg: PipelineConfig, args) -> int:
    manifest = _load_manifest(cfg)
    plan = _load_plan(cfg, manifest)
    fold = cfg.explain.fold if args.fold is None else _folds(args.fold, cfg.split.k)[0]
    model = _load_model(cfg, fold)
    layer = cfg.explain.gradcam_layer or model.spec.gradcam_layer
    limit = cfg.explain.max_images if args.limit is None else args.limit
    picks = [manifest.records[i] for i in plan.test_indices(fold)
             if manifest.records[i].label == ds.Label.COVID][:limit]
    out_dir = _out(cfg) / "gradcam" / f"fold{fold}"
    for rec in picks:
        rgb, x, place = _explain_inputs(cfg, rec, model.spec.custom_input)
        try:
            smap = grad_cam(model, x, layer)
        except (KeyError, ValueError) as exc:
            raise CommandError(EXIT_EVAL, str(exc)) from None
        heat, image = smap.upsampled, rgb
        if cfg.explain.crop_to_content:
            heat = crop_to_content(smap, place)
            image = rgb[place.top:place.bottom, place.left:place.right]
        stem = Path(rec.path).stem
        save_rgb(overlay(heat, image, cfg.explain.alpha), out_dir / f"{stem}_overlay.png")
        map_to_csv(smap.values, out_dir / f"{stem}_map.csv", cfg.hash)
    print(f"wrote {len(picks)} Grad-CAM overlays ({layer}) -> {out_dir}")
    return EXIT_OK


def cmd_embed(cfg: PipelineConfig, args) -> int:
    manifest = _load_manifest(cfg)
    plan = _load_plan(cfg, manifest)
    fold = cfg.explain.fold if args.fold is None else _folds(args.fold, cfg.split.k)[0]
    model = _load_model(cfg, fold)
    model.eval()
    data = CTImageDataset(manifest, model.spec.custom_input, aug=None)
    loader = torch.utils.data.DataLoader(data, batch_size=cfg.train.batch_size, shuffle=False)
    feats = np.concatenate([extract_features(model, x).numpy() for x, _ in loader])
    test = set(plan.test_indices(fold))
    splits = ["test" if i in test else "train" for i in range(len(manifest))]
    try:
        emb = tsne_embed(feats, cfg.explain.tsne, labels=manifest.labels, splits=splits)
    except ValueError as exc:
        raise CommandError(EXIT_EVAL, str(exc)) from None
    out_dir = _out(cfg) / "embed" / f"fold{fold}"
    emb.to_csv(out_dir / "embedding.csv", cfg.hash)
    scatter_plot(emb, out_dir / "tsne.png")
    print(f"embedded {len(manifest)} feature vectors ({feats.shape[1]}-D) -> {out_dir}")
    return EXIT_OK


COMMANDS = {
    "ingest": (cmd_ingest, "scan the dataset tree and write manifest.csv"),
    "split": (cmd_split, "plan stratified k-fold splits and write folds.csv"),
    "train": (cmd_train, "fine-tune one fold (or all) and write checkpoints"),
    "eval": (cmd_eval, "evaluate trained folds; aggregates once every fold has metrics"),
    "gradcam": (cmd_gradcam, "Grad-CAM overlays for COVID test images of one fold"),
    "embed": (cmd_embed, "t-SNE of penultimate features for the whole dataset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctexplain", description=__doc__, epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="pipeline config file (TOML)")
        if name in ("train", "eval"):
            p.add_argument("--fold", default="all", help="fold index or 'all' (default: all)")
        if name == "train":
            p.add_argument("--parallel-folds", type=int, default=1, metavar="N",
                           help="train up to N folds in parallel processes (default: 1, sequential)")
        if name in ("gradcam", "embed"):
            p.add_argument("--fold", default=None, help="fold whose model is explained (default: explain.fold)")
        if name == "gradcam":
            p.add_argument("--limit", type=int, default=None, help="max number of images (default: explain.max_images)")
    rp = sub.add_parser("report", help="Markdown/CSV table from per-fold metrics JSON files",
                        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    rp.add_argument("paths", nargs="+", help="metrics JSON files or directories containing fold*.json")
    rp.add_argument("--out", default=None, help="directory for table.md / table.csv / confusion files")
    rp.add_argument("--formats", default="md,csv", help="comma-separated subset of json,md,csv")
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "report":
            return cmd_report(args)
        try:
            cfg = validate_config(args.config)
        except ConfigError as exc:
            raise CommandError(EXIT_CONFIG, str(exc)) from None
        return COMMANDS[args.command][0](cfg, args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
