"""``aqa`` command line: synthetic data, contrastive pretraining, fusion training,
ablation, plug-in fusion and evaluation reports.

Every command writes ``config.yaml`` (the resolved configuration) into its
output directory.  Outputs other than log files (``*.log``, ``*.log.jsonl``) are pure functions of
the configuration, the inputs and the seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import config as C
from .cga import PairedGazeData, evaluate_retrieval, pretrain
from .dataio import (DataValidationError, ManifestParseError, gen_synthetic, images_array,
                     load_manifest, load_scanpaths, split_ids, write_synthetic)
from .encoders import (EmbeddingTable, EncoderConfig, EncoderConfigError, GazeImageEncoder, MissingIdError,
                       ScanpathEncoder, SemanticConfig, SemanticEncoder, config_dict, load_module_state,
                       load_weights, module_state, save_weights, write_embedding_table)
from .evalstats import (PredictionSet, UndefinedCorrelationError, category_report, emit_report, emit_scatter,
                        load_predictions, lowest_error_subset, model_rows, paired_test, pearson, subset_size,
                        write_predictions)
from .fusion import FusionModel, MaskMode, ScoredSet, load_checkpoint, save_checkpoint, train
from .objectives import NonFiniteLossError
from .plugins import (CorrectionConfig, gaze_embeddings, load_host_scores, patch_pool_features, score_correct,
                      semantic_host_features, train_fused_head, train_patch_pool_host, write_host_scores)

log = logging.getLogger("gazeaqa")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_NUMERIC = 5


# ---------------------------------------------------------------------------
# shared plumbing


DEFAULT_DIRS = {"gen-synth": "synth", "pretrain-cga": "cga"}


def _out_dir(args, cfg: C.RunConfig, name: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_root) / DEFAULT_DIRS.get(name, name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attach_log(out: Path, command: str) -> logging.Handler:
    handler = logging.FileHandler(out / f"{command}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    return handler


def _data_dir(cfg: C.RunConfig) -> Path:
    return Path(cfg.paths.data) if cfg.paths.data else Path(cfg.output_root) / "synth"


def _load_data(cfg: C.RunConfig, need_scanpaths: bool = False):
    root = _data_dir(cfg)
    manifest = load_manifest(root / "manifest", cfg.seed, cfg.split.train_fraction)
    if not manifest.records:
        raise DataValidationError(f"{root / 'manifest'} lists no images")
    shapes = {r.pixels.shape for r in manifest.records}
    if len(shapes) != 1:
        raise DataValidationError(f"images in {root} have mixed shapes {sorted(shapes)}")
    paths = load_scanpaths(root / "scanpaths") if need_scanpaths else None
    return manifest, paths


def _encoder_configs(cfg: C.RunConfig, shape) -> tuple[EncoderConfig, SemanticConfig]:
    h, w, c = shape
    enc = EncoderConfig(**{**config_dict(cfg.encoder), "image_size": (h, w), "channels": c})
    sem = SemanticConfig(**{**config_dict(cfg.semantic), "image_size": (h, w), "channels": c})
    return enc, sem


def three_way_split(ids: Sequence[str], cfg: C.RunConfig) -> tuple[list[str], list[str], list[str]]:
    """Train/validation/test ids: a test split, then validation carved out of train."""
    train_ids, test_ids = split_ids(ids, cfg.split.train_fraction, cfg.seed)
    fit_ids, val_ids = split_ids(train_ids, 1.0 - cfg.split.val_fraction, cfg.seed + 1)
    if len(fit_ids) < 2 or len(val_ids) < 2 or len(test_ids) < 2:
        raise DataValidationError(
            f"split of {len(ids)} images leaves {len(fit_ids)}/{len(val_ids)}/{len(test_ids)} "
            "train/val/test ids; each needs at least 2")
    return fit_ids, val_ids, test_ids


def _load_gave(path, enc_cfg: EncoderConfig) -> dict[str, np.ndarray]:
    arrays, meta = load_weights(path)
    saved = EncoderConfig(**meta["encoder"])
    mismatch = [k for k in ("d", "patch_size", "n_layers", "n_heads", "image_size", "channels", "ffn_mult")
                if getattr(saved, k) != getattr(enc_cfg, k)]
    if mismatch:
        raise EncoderConfigError(f"gaze weights {path} differ from the configured encoder in {mismatch}")
    return arrays


def _prediction_set(ids, preds, by_id) -> PredictionSet:
    return PredictionSet(tuple(ids), np.asarray(preds, dtype=np.float64),
                         np.array([by_id[i].score for i in ids]), tuple(by_id[i].category for i in ids))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(cfg: C.RunConfig, out: Path) -> dict:
    records, paths, latents = gen_synthetic(cfg.synth)
    write_synthetic(out, records, paths, latents)
    log.info("wrote %d images and %d scanpaths to %s", len(records), len(paths), out)
    return {"images": len(records), "scanpaths": len(paths)}


def cmd_pretrain_cga(cfg: C.RunConfig, out: Path) -> dict:
    manifest, paths = _load_data(cfg, need_scanpaths=True)
    records = list(manifest.records)
    enc_cfg, _ = _encoder_configs(cfg, records[0].pixels.shape)
    k = cfg.split.cga_held_out
    held_ids: list[str] = []
    if k:
        if k > len(records) - 2:
            raise DataValidationError(f"cga_held_out={k} leaves fewer than 2 training images")
        n = len(records)
        _, held_ids = split_ids([r.id for r in records], (n - k) / n, cfg.seed)
    held = set(held_ids)
    tr_recs = [r for r in records if r.id not in held]
    ho_recs = [r for r in records if r.id in held]
    train_data = PairedGazeData(tr_recs, [p for p in paths if p.image_id not in held])
    held_data = PairedGazeData(ho_recs, [p for p in paths if p.image_id in held]) if ho_recs else None

    image_tower, gaze_tower = GazeImageEncoder(enc_cfg), ScanpathEncoder(enc_cfg)
    cga_log = pretrain(image_tower, gaze_tower, train_data, cfg.cga, held_out=held_data)

    meta = {"format": "gave-weights", "encoder": config_dict(enc_cfg)}
    save_weights(out / "gave.weights", module_state(image_tower), meta)
    save_weights(out / "scanpath.weights", module_state(gaze_tower),
                 {"format": "scanpath-weights", "encoder": config_dict(enc_cfg)})
    # wall times make the per-epoch log a log file, not a reproducible output
    (out / "cga.log.jsonl").write_text("\n".join(cga_log.to_lines()) + "\n", encoding="utf-8")
    final = {k_: v for k_, v in cga_log.records[-1].items() if k_ != "wall_time"}
    summary = {"initial": {k_: v for k_, v in cga_log.records[0].items() if k_ != "wall_time"},
               "final": final, "train_images": len(tr_recs), "held_out_images": len(ho_recs)}
    if held_data is not None:
        summary["held_out_retrieval"] = evaluate_retrieval(image_tower, gaze_tower, held_data)
    _write_json(out / "cga_summary.json", summary)
    ids = [r.id for r in records]
    with torch.no_grad():
        emb = image_tower.pooled(torch.as_tensor(images_array(records), dtype=torch.float32)).double().numpy()
    write_embedding_table(out / "gave_embeddings.aqaemb", EmbeddingTable(tuple(ids), emb))
    log.info("cga: loss %.4f -> %.4f", summary["initial"]["loss"], final["loss"])
    return summary


def _scored_sets(cfg: C.RunConfig, manifest, semantic: SemanticEncoder):
    by_id = manifest.by_id()
    fit_ids, val_ids, test_ids = three_way_split(manifest.ids, cfg)
    make = lambda ids: ScoredSet.from_records([by_id[i] for i in ids], semantic)
    return by_id, make(fit_ids), make(val_ids), make(test_ids)


def cmd_train(cfg: C.RunConfig, out: Path) -> dict:
    manifest, _ = _load_data(cfg)
    enc_cfg, sem_cfg = _encoder_configs(cfg, manifest.records[0].pixels.shape)
    model = FusionModel(enc_cfg, sem_cfg, cfg.train.fusion_heads, cfg.train.head_hidden, cfg.seed)
    if cfg.paths.gave:
        load_module_state(model.gaze, _load_gave(cfg.paths.gave, enc_cfg))
    by_id, fit_set, val_set, test_set = _scored_sets(cfg, manifest, model.semantic)
    model, train_log = train(model, fit_set, val_set, cfg.train)
    mode = MaskMode.parse(cfg.train.mode)
    split_meta = {"split": {"seed": cfg.seed, "train_fraction": cfg.split.train_fraction,
                            "val_fraction": cfg.split.val_fraction}}
    save_checkpoint(out / "model.weights", model, cfg.train, split_meta)
    (out / "train_log.jsonl").write_text("\n".join(train_log.to_lines()) + "\n", encoding="utf-8")
    images = test_set.images if mode is not MaskMode.S_ONLY else None
    pred = model.predict(test_set.h_c, images, mode)
    write_predictions(out / f"predictions_{mode.value.replace('_', '-')}.jsonl",
                      _prediction_set(test_set.ids, pred, by_id))
    summary = {"mode": mode.value, "stopped_epoch": train_log.stopped_epoch, "best_epoch": train_log.best_epoch,
               "best_val_plcc": train_log.best_val_plcc, "test_plcc": pearson(pred, test_set.scores),
               "n_train": len(fit_set), "n_val": len(val_set), "n_test": len(test_set)}
    _write_json(out / "train_summary.json", summary)
    log.info("train[%s]: stopped at epoch %d, test PLCC %.4f", mode.value, summary["stopped_epoch"],
             summary["test_plcc"])
    return summary


def cmd_ablate(cfg: C.RunConfig, out: Path, modes: Sequence[str]) -> dict:
    ckpt = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else Path(cfg.output_root) / "train" / "model.weights"
    model, meta = load_checkpoint(ckpt)
    split = meta.get("split")
    if not split:
        raise DataValidationError(f"checkpoint {ckpt} carries no split record")
    cfg_split = C.resolve(overrides={"seed": split["seed"], "split": {
        "train_fraction": split["train_fraction"], "val_fraction": split["val_fraction"]}}, env={})
    manifest, _ = _load_data(cfg)
    by_id = manifest.by_id()
    _, _, test_ids = three_way_split(manifest.ids, cfg_split)
    test_set = ScoredSet.from_records([by_id[i] for i in test_ids], model.semantic)
    result = {}
    for m in modes:
        mode = MaskMode.parse(m)
        pred = model.predict(test_set.h_c, test_set.images if mode is not MaskMode.S_ONLY else None, mode)
        name = mode.value.replace("_", "-")
        write_predictions(out / f"predictions_{name}.jsonl", _prediction_set(test_ids, pred, by_id))
        result[name] = pearson(pred, test_set.scores)
        log.info("ablate[%s]: test PLCC %.4f", name, result[name])
    _write_json(out / "ablation_summary.json", {"test_plcc": result, "n_test": len(test_ids)})
    return result


def _gaze_features(cfg: C.RunConfig, enc_cfg: EncoderConfig, ids, images) -> dict[str, np.ndarray]:
    tower = GazeImageEncoder(enc_cfg)
    if cfg.paths.gave:
        load_module_state(tower, _load_gave(cfg.paths.gave, enc_cfg))
    else:
        log.warning("no gaze weights given; gaze features come from an untrained tower")
    tower.eval()
    return gaze_embeddings(tower, ids, images)


def cmd_plug(cfg: C.RunConfig, out: Path) -> dict:
    manifest, _ = _load_data(cfg)
    records = list(manifest.records)
    by_id = manifest.by_id()
    ids = [r.id for r in records]
    images = images_array(records)
    enc_cfg, sem_cfg = _encoder_configs(cfg, records[0].pixels.shape)
    fit_ids, val_ids, test_ids = three_way_split(ids, cfg)
    scores = {r.id: r.score for r in records}
    pc = cfg.plug
    semantic = SemanticEncoder(sem_cfg)

    if pc.mode == "feature":
        if pc.host == "semantic-linear":
            host = semantic_host_features(semantic, ids, images)
        else:
            pick = lambda L: np.stack([by_id[i].pixels for i in L])
            net = train_patch_pool_host(pick(fit_ids), [scores[i] for i in fit_ids], pick(val_ids),
                                        [scores[i] for i in val_ids], epochs=pc.host_epochs, seed=cfg.seed)
            host = patch_pool_features(net, ids, images)
        gaze = None if pc.no_gaze else _gaze_features(cfg, enc_cfg, ids, images)
        host_arm = train_fused_head(host, None, scores, fit_ids, val_ids, test_ids, pc.head)
        fused_arm = train_fused_head(host, gaze, scores, fit_ids, val_ids, test_ids, pc.head)
        p_host = _prediction_set(test_ids, [host_arm.predictions[i] for i in test_ids], by_id)
        p_fused = _prediction_set(test_ids, [fused_arm.predictions[i] for i in test_ids], by_id)
        write_predictions(out / "predictions_host.jsonl", p_host)
        write_predictions(out / "predictions_fused.jsonl", p_fused)
        summary = {"mode": "feature", "host": pc.host, "gaze_width": fused_arm.gaze_width,
                   "host_plcc": pearson(p_host.pred, p_host.score),
                   "fused_plcc": pearson(p_fused.pred, p_fused.score)}
        if np.array_equal(p_host.pred, p_fused.pred):
            summary["paired_p"] = 1.0
        else:
            summary["paired_p"] = paired_test(p_fused, p_host, "plcc", cfg.eval.bootstrap, cfg.seed).p_value
        _write_json(out / "plug_summary.json", summary)
        log.info("plug[feature/%s]: host %.4f fused %.4f p=%.4g", pc.host, summary["host_plcc"],
                 summary["fused_plcc"], summary["paired_p"])
        return summary

    needed = val_ids + test_ids
    linear = dataclasses.replace(pc.head, hidden=0)
    if cfg.paths.host_scores:
        s_host = load_host_scores(cfg.paths.host_scores)
    else:
        host = semantic_host_features(semantic, ids, images)
        s_host = train_fused_head(host, None, scores, fit_ids, val_ids, needed, linear).predictions
        write_host_scores(out / "host_scores.jsonl", {i: s_host[i] for i in needed})
    if cfg.paths.gaze_scores:
        s_gaze = load_host_scores(cfg.paths.gaze_scores)
    else:
        gaze = _gaze_features(cfg, enc_cfg, ids, images)
        s_gaze = train_fused_head(None, gaze, scores, fit_ids, val_ids, needed, linear).predictions
        write_host_scores(out / "gaze_scores.jsonl", {i: s_gaze[i] for i in needed})
    missing = [i for i in needed if i not in s_host or i not in s_gaze]
    if missing:
        raise MissingIdError(f"{len(missing)} evaluation id(s) lack host or gaze scores, e.g. {missing[0]!r}")
    s_host = {i: s_host[i] for i in needed}
    s_gaze = {i: s_gaze[i] for i in needed}
    corr = score_correct(s_host, s_gaze, CorrectionConfig(pc.lam, pc.fit_lambda),
                         {i: scores[i] for i in val_ids})
    p_host = _prediction_set(test_ids, [s_host[i] for i in test_ids], by_id)
    p_corr = _prediction_set(test_ids, [corr.scores[i] for i in test_ids], by_id)
    write_predictions(out / "predictions_host.jsonl", p_host)
    write_predictions(out / "predictions_corrected.jsonl", p_corr)
    mse_of = lambda s, L: float(np.mean([(s[i] - scores[i]) ** 2 for i in L]))
    summary = {"mode": "score", "lambda": corr.lam, "offset": corr.offset, "fitted": pc.fit_lambda,
               "calibration_mse_host": mse_of(s_host, val_ids), "calibration_mse_corrected": mse_of(corr.scores, val_ids),
               "test_mse_host": mse_of(s_host, test_ids), "test_mse_corrected": mse_of(corr.scores, test_ids)}
    _write_json(out / "plug_summary.json", summary)
    log.info("plug[score]: lambda %.4f, test MSE %.4f -> %.4f", corr.lam, summary["test_mse_host"],
             summary["test_mse_corrected"])
    return summary


def _parse_model_args(specs: Sequence[str]) -> dict[str, Path]:
    models: dict[str, Path] = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            path, name = spec, Path(spec).stem.removeprefix("predictions_")
        if name in models:
            raise DataValidationError(f"duplicate model name {name!r}; use NAME=PATH")
        models[name] = Path(path)
    return models


def cmd_eval(cfg: C.RunConfig, out: Path, model_specs: Sequence[str]) -> dict:
    ec = cfg.eval
    paths = _parse_model_args(model_specs)
    models = {name: load_predictions(p) for name, p in paths.items()}
    reference = ec.reference
    if reference is not None and reference not in models:
        raise DataValidationError(f"reference {reference!r} is not among the models {sorted(models)}")
    if models:
        first = next(iter(models.values()))
        models = {n: p.aligned_to(first) for n, p in models.items()}
    paired_ref = (reference or next(iter(models), None)) if ec.paired else None
    title = None
    if ec.subset is not None and models:
        k = subset_size(ec.subset.split(":", 1)[1], len(next(iter(models.values()))))
        ref_set = models[reference] if reference is not None else None
        models = {n: lowest_error_subset(p, k, ref_set) for n, p in models.items()}
        title = f"Lowest-error subset: k={k} ranked by " + (f"{reference}'s error" if ref_set else "each model's own error")
        if ref_set is None and paired_ref is not None:
            log.warning("own-error subsets cover different ids; paired p-values are omitted")
            paired_ref = None
    metrics = list(ec.metrics)
    rows = model_rows(models, paired_ref, "all", metrics, ec.bootstrap, cfg.seed)
    written = emit_report(rows, out / "report", metrics, title)
    if ec.by_category:
        cat_rows = category_report(models, paired_ref, metrics, ec.bootstrap, cfg.seed)
        written += emit_report(cat_rows, out / "report_by_category", metrics, title)
    if ec.scatter and models:
        written.append(emit_scatter(models, out / "scatter.png"))
    log.info("eval: wrote %s", ", ".join(p.name for p in written))
    return {"files": [p.name for p in written]}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqa", description="Gaze-informed aesthetic quality assessment toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--preset", choices=sorted(C.PRESETS), help="bundled desk-scale settings")
        p.add_argument("--out", help="output directory (default <output_root>/synth, cga, train, ablate, plug or eval)")
        p.add_argument("--data", help="dataset directory (paths.data)")
        return p

    common(sub.add_parser("gen-synth", help="write a synthetic dataset"))
    p = common(sub.add_parser("pretrain-cga", help="contrastive gaze alignment"))
    p.add_argument("--epochs", type=int, help="cga.max_epochs")
    p.add_argument("--held-out", type=int, help="split.cga_held_out")
    p = common(sub.add_parser("train", help="train the fusion model"))
    p.add_argument("--epochs", type=int, help="train.max_epochs")
    p.add_argument("--mask", help="training arm: full, s-only or g-only")
    p.add_argument("--gave", help="gaze tower weights from pretrain-cga")
    p = common(sub.add_parser("ablate", help="inference-time masking of a trained model"))
    p.add_argument("--checkpoint", help="fusion checkpoint (paths.checkpoint)")
    p.add_argument("--modes", default="full,s-only,g-only", help="comma-separated masking modes")
    p = common(sub.add_parser("plug", help="add gaze to a host model"))
    p.add_argument("--mode", choices=["feature", "score"], help="plug.mode")
    p.add_argument("--host", choices=["semantic-linear", "patch-pool"], help="plug.host")
    p.add_argument("--lambda", dest="lam", type=float, help="fixed score-correction weight (disables fitting)")
    p.add_argument("--no-gaze", action="store_true", default=None, help="zero-width gaze features")
    p.add_argument("--gave", help="gaze tower weights from pretrain-cga")
    p.add_argument("--host-scores", help="host score file, JSONL {id, score}")
    p.add_argument("--gaze-scores", help="gaze score file, JSONL {id, score}")
    p = common(sub.add_parser("eval", help="metrics, intervals, tests and figures"))
    p.add_argument("predictions", nargs="+", help="prediction files as PATH or NAME=PATH")
    p.add_argument("--paired", action="store_true", default=None, help="paired-bootstrap p-values")
    p.add_argument("--reference", help="reference model name")
    p.add_argument("--subset", help="lowest-error:<fraction or count>")
    p.add_argument("--by-category", action="store_true", default=None, help="per-category tables")
    p.add_argument("--bootstrap", type=int, help="eval.bootstrap")
    return parser


def _overrides(args) -> dict:
    o: dict = {}

    def put(path: str, value):
        if value is None:
            return
        node = o
        *head, last = path.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value

    put("seed", args.seed)
    put("paths.data", args.data)
    cmd = args.command
    if cmd == "pretrain-cga":
        put("cga.max_epochs", args.epochs)
        put("split.cga_held_out", args.held_out)
    elif cmd == "train":
        put("train.max_epochs", args.epochs)
        put("train.mode", MaskMode.parse(args.mask).value if args.mask else None)
        put("paths.gave", args.gave)
    elif cmd == "ablate":
        put("paths.checkpoint", args.checkpoint)
    elif cmd == "plug":
        put("plug.mode", args.mode)
        put("plug.host", args.host)
        put("plug.no_gaze", args.no_gaze)
        put("paths.gave", args.gave)
        put("paths.host_scores", args.host_scores)
        put("paths.gaze_scores", args.gaze_scores)
        if args.lam is not None:
            put("plug.lam", args.lam)
            put("plug.fit_lambda", False)
    elif cmd == "eval":
        put("eval.paired", args.paired)
        put("eval.reference", args.reference)
        put("eval.subset", args.subset)
        put("eval.by_category", args.by_category)
        put("eval.bootstrap", args.bootstrap)
    return o


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    handler = None
    try:
        cfg = C.resolve(args.config, args.preset, _overrides(args))
        torch.set_num_threads(cfg.threads)
        name = args.command
        out = _out_dir(args, cfg, name)
        handler = _attach_log(out, name)
        log.setLevel(logging.INFO)
        log.info("aqa %s started", name)
        C.write_snapshot(cfg, out)
        start = time.perf_counter()
        if name == "gen-synth":
            cmd_gen_synth(cfg, out)
        elif name == "pretrain-cga":
            cmd_pretrain_cga(cfg, out)
        elif name == "train":
            cmd_train(cfg, out)
        elif name == "ablate":
            cmd_ablate(cfg, out, [m.strip() for m in args.modes.split(",") if m.strip()])
        elif name == "plug":
            cmd_plug(cfg, out)
        elif name == "eval":
            cmd_eval(cfg, out, args.predictions)
        log.info("aqa %s finished in %.1f s", name, time.perf_counter() - start)
        return EXIT_OK
    except (NonFiniteLossError, UndefinedCorrelationError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric failure", exc)
    except (C.ConfigError, DataValidationError, ManifestParseError, EncoderConfigError, MissingIdError,
            ValueError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, "validation error", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "I/O error", exc)
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
    print(f"aqa: {kind}: {msg}", file=sys.stderr)
    log.error("%s: %s", kind, msg)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
