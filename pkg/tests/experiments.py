"""Desk-scale end-to-end runs shared by several test modules.

Every run is cached per process, so the module tests and the acceptance
suite train each configuration once per pytest session.
"""
from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np

from gazeaqa import plugins as P
from gazeaqa.cga import CgaConfig, PairedGazeData, evaluate_retrieval, pretrain
from gazeaqa.dataio import SynthConfig, gen_synthetic, images_array, split_ids
from gazeaqa.encoders import EncoderConfig, GazeImageEncoder, ScanpathEncoder, SemanticConfig, SemanticEncoder
from gazeaqa.evalstats import PredictionSet, paired_test, pearson
from gazeaqa.fusion import FusionModel, ScoredSet, TrainConfig, train

SEEDS = (0, 1, 2)
H1_IMAGES = 2000
CGA_IMAGES = 109
CGA_EPOCHS = 150
FUSION_TRAIN = TrainConfig(max_epochs=40, patience=15, encoder_lr=1e-4)


@lru_cache(maxsize=None)
def cga_retrieval(seed: int = 0, epochs: int = CGA_EPOCHS) -> dict:
    """Pretrain on the first 109 of 141 pairs; retrieve over the last 32."""
    recs, paths, _ = gen_synthetic(SynthConfig(n_images=CGA_IMAGES + 32, seed=seed))
    train_ids = {r.id for r in recs[:CGA_IMAGES]}
    train = PairedGazeData(recs[:CGA_IMAGES], [p for p in paths if p.image_id in train_ids])
    held = PairedGazeData(recs[CGA_IMAGES:], [p for p in paths if p.image_id not in train_ids])
    it, gt = GazeImageEncoder(EncoderConfig(init_seed=seed)), ScanpathEncoder(EncoderConfig(init_seed=seed))
    log = pretrain(it, gt, train, CgaConfig(max_epochs=epochs, seed=seed), held_out=held)
    return {"metrics": evaluate_retrieval(it, gt, held), "log": log.records, "gallery": len(held)}


@lru_cache(maxsize=None)
def gave_tower(seed: int) -> GazeImageEncoder:
    """Image tower after contrastive pretraining on a separate 109-image set."""
    recs, paths, _ = gen_synthetic(SynthConfig(n_images=CGA_IMAGES, seed=1000 + seed), id_prefix="cga")
    it, gt = GazeImageEncoder(EncoderConfig(init_seed=seed)), ScanpathEncoder(EncoderConfig(init_seed=seed))
    pretrain(it, gt, PairedGazeData(recs, paths), CgaConfig(max_epochs=CGA_EPOCHS, seed=seed))
    it.eval()
    return it


@lru_cache(maxsize=None)
def h1_data(seed: int):
    recs, _, _ = gen_synthetic(SynthConfig(n_images=H1_IMAGES, alpha=1.0, beta=1.0, seed=seed))
    by_id = {r.id: r for r in recs}
    train_ids, test_ids = split_ids(list(by_id), 0.8, seed)
    fit_ids, val_ids = split_ids(train_ids, 0.875, seed + 1)
    return recs, by_id, fit_ids, val_ids, test_ids


@lru_cache(maxsize=None)
def h1a(seed: int) -> dict:
    """Full fusion vs an identically trained semantic-only model, plus masked variants of the full model."""
    recs, by_id, fit_ids, val_ids, test_ids = h1_data(seed)
    gave_state = gave_tower(seed).state_dict()

    def fresh():
        m = FusionModel(EncoderConfig(init_seed=seed), SemanticConfig(), seed=seed)
        m.gaze.load_state_dict(gave_state)
        return m

    semantic = SemanticEncoder(SemanticConfig())
    sets = [ScoredSet.from_records([by_id[i] for i in ids], semantic) for ids in (fit_ids, val_ids, test_ids)]
    tr, va, te = sets
    out = {"test_ids": tuple(te.ids), "scores": te.scores}
    for mode in ("s_only", "full"):
        model, log = train(fresh(), tr, va, dataclasses.replace(FUSION_TRAIN, mode=mode, seed=seed))
        out[f"{mode}_trained"] = model.predict(te.h_c, te.images, mode)
        out[f"{mode}_val_plcc"] = log.best_val_plcc
        out[f"{mode}_log"] = log
        if mode == "full":
            out["model"] = model
            for masked in ("s_only", "g_only"):
                out[f"full_masked_{masked}"] = model.predict(te.h_c, te.images, masked)
    full = PredictionSet(te.ids, out["full_trained"], te.scores)
    s_only = PredictionSet(te.ids, out["s_only_trained"], te.scores)
    out["plcc"] = {k: pearson(out[k], te.scores) for k in
                   ("full_trained", "s_only_trained", "full_masked_s_only", "full_masked_g_only")}
    out["paired"] = paired_test(full, s_only, "plcc", 1000, seed)
    return out


@lru_cache(maxsize=None)
def h1b(seed: int) -> dict:
    """Feature-level fusion on two synthetic hosts and fitted score-level correction."""
    recs, by_id, fit_ids, val_ids, test_ids = h1_data(seed)
    ids = [r.id for r in recs]
    images = images_array(recs)
    scores = {r.id: r.score for r in recs}
    gaze = P.gaze_embeddings(gave_tower(seed), ids, images)
    pick = lambda L: np.stack([by_id[i].pixels for i in L])
    net = P.train_patch_pool_host(pick(fit_ids), [scores[i] for i in fit_ids], pick(val_ids),
                                  [scores[i] for i in val_ids], seed=seed)
    hosts = {"semantic-linear": P.semantic_host_features(SemanticEncoder(), ids, images),
             "patch-pool": P.patch_pool_features(net, ids, images)}
    y = np.array([scores[i] for i in test_ids])
    head = P.HeadConfig(seed=seed)
    out = {"feature": {}}
    for name, host in hosts.items():
        host_arm = P.train_fused_head(host, None, scores, fit_ids, val_ids, test_ids, head)
        fused_arm = P.train_fused_head(host, gaze, scores, fit_ids, val_ids, test_ids, head)
        a = PredictionSet(tuple(test_ids), np.array([fused_arm.predictions[i] for i in test_ids]), y)
        b = PredictionSet(tuple(test_ids), np.array([host_arm.predictions[i] for i in test_ids]), y)
        out["feature"][name] = {"host_plcc": pearson(b.pred, y), "fused_plcc": pearson(a.pred, y),
                                "p": paired_test(a, b, "plcc", 1000, seed).p_value}

    linear = dataclasses.replace(head, hidden=0)
    needed = val_ids + test_ids
    s_host = P.train_fused_head(hosts["semantic-linear"], None, scores, fit_ids, val_ids, needed, linear).predictions
    s_gaze = P.train_fused_head(None, gaze, scores, fit_ids, val_ids, needed, linear).predictions
    s_host = {i: s_host[i] for i in needed}
    s_gaze = {i: s_gaze[i] for i in needed}
    corr = P.score_correct(s_host, s_gaze, P.CorrectionConfig(fit_lambda=True), {i: scores[i] for i in val_ids})
    mse_of = lambda s, L: float(np.mean([(s[i] - scores[i]) ** 2 for i in L]))
    out["score"] = {"lam": corr.lam, "cal_host": mse_of(s_host, val_ids), "cal_corr": mse_of(corr.scores, val_ids),
                    "test_host": mse_of(s_host, test_ids), "test_corr": mse_of(corr.scores, test_ids)}
    return out


SMALL_PIPELINE = """\
synth: {n_images: 120, observers_per_image: 4}
cga: {max_epochs: 4, eval_interval: 2}
train: {max_epochs: 3, patience: 1}
plug: {host_epochs: 3, head: {max_epochs: 5}}
eval: {bootstrap: 200}
"""

LOG_SUFFIXES = (".log", ".log.jsonl")


def run_pipeline(root) -> dict[str, int]:
    """Every CLI command on a small config under ``root``; returns the exit codes."""
    from pathlib import Path

    from gazeaqa.cli import run

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.yaml"
    cfg.write_text(SMALL_PIPELINE)
    base = ["--config", str(cfg), "--seed", "3"]
    o = lambda name: ["--out", str(root / name)]
    data = ["--data", str(root / "synth")]
    codes = {
        "gen-synth": run(["gen-synth", *base, *o("synth")]),
        "pretrain-cga": run(["pretrain-cga", *base, *data, *o("cga"), "--held-out", "20"]),
    }
    gave = ["--gave", str(root / "cga" / "gave.weights")]
    codes["train"] = run(["train", *base, *data, *gave, *o("train")])
    codes["ablate"] = run(["ablate", *base, *data, "--checkpoint", str(root / "train" / "model.weights"),
                           *o("ablate")])
    codes["plug-feature"] = run(["plug", *base, *data, *gave, "--mode", "feature", *o("plug-feature")])
    codes["plug-score"] = run(["plug", *base, *data, *gave, "--mode", "score", *o("plug-score")])
    preds = [f"{m}={root / 'ablate' / f'predictions_{m}.jsonl'}" for m in ("full", "s-only", "g-only")]
    codes["eval"] = run(["eval", *base, *preds, "--paired", "--reference", "s-only", "--by-category",
                         *o("eval")])
    return codes


def output_bytes(root) -> dict[str, bytes]:
    """Relative path to contents for every non-log file under ``root``."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(LOG_SUFFIXES)}
