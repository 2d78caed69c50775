import math

import numpy as np
import pytest
import torch

from gazeaqa.dataio import SynthConfig, gen_synthetic
from gazeaqa.encoders import EncoderConfig
from gazeaqa.fusion import (CrossAttention, FusionModel, MaskMode, ScoredSet, TrainConfig, cross_attend, forward,
                            load_checkpoint, save_checkpoint, train)
from gazeaqa.gradcheck import check_parameters
from gazeaqa.objectives import HybridLossConfig, hybrid_loss_torch

import experiments

TINY = EncoderConfig(d=16, patch_size=4, n_layers=1, n_heads=2, image_size=(16, 16))


def attention_loop_oracle(h_c, h_f, att: CrossAttention):
    """Per-head scalar loops in float64; returns the residual + LayerNorm output."""
    h_c, h_f = h_c.tolist(), h_f.tolist()
    wq, wk, wv, wo = (t.detach().tolist() for t in (att.w_q, att.w_k, att.w_v, att.w_o))
    d, dk, T = att.d, att.d_k, len(h_f)
    concat = []
    for h in range(att.n_heads):
        q = [sum(h_c[i] * wq[h][i][k] for i in range(d)) for k in range(dk)]
        keys = [[sum(h_f[t][i] * wk[h][i][k] for i in range(d)) for k in range(dk)] for t in range(T)]
        vals = [[sum(h_f[t][i] * wv[h][i][k] for i in range(d)) for k in range(dk)] for t in range(T)]
        scores = [sum(q[k] * keys[t][k] for k in range(dk)) / math.sqrt(dk) for t in range(T)]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        w = [x / sum(e) for x in e]
        concat += [sum(w[t] * vals[t][k] for t in range(T)) for k in range(dk)]
    out = [sum(concat[j] * wo[j][i] for j in range(len(concat))) + h_c[i] for i in range(d)]
    mu = sum(out) / d
    var = sum((x - mu) ** 2 for x in out) / d
    g, b = att.norm.weight.tolist(), att.norm.bias.tolist()
    return [(x - mu) / math.sqrt(var + att.norm.eps) * g[i] + b[i] for i, x in enumerate(out)]


def test_singleton_identity_hook():
    d = 6
    att = CrossAttention(d, n_heads=1, residual=False, layer_norm=False).double()
    with torch.no_grad():
        for w in (att.w_q, att.w_k, att.w_v):
            w.copy_(torch.eye(d, dtype=torch.float64)[None])
        att.w_o.copy_(torch.eye(d, dtype=torch.float64))
    h_f = torch.randn(1, d, dtype=torch.float64)
    out = cross_attend(torch.randn(d, dtype=torch.float64), h_f, att)
    assert torch.equal(out, h_f[0])


def test_zero_tokens_give_layernorm_of_query():
    att = CrossAttention(8, 2).double()
    h_c = torch.randn(3, 8, dtype=torch.float64)
    out = att(h_c, torch.zeros(3, 5, 8, dtype=torch.float64))
    assert torch.equal(out, att.norm(h_c))


@pytest.mark.parametrize("seed", range(5))
def test_matches_loop_oracle(seed):
    torch.manual_seed(seed)
    att = CrossAttention(8, 2, seed=seed).double()
    with torch.no_grad():
        att.norm.weight.uniform_(0.5, 1.5)
        att.norm.bias.uniform_(-0.5, 0.5)
    h_c, h_f = torch.randn(8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    out = cross_attend(h_c, h_f, att)
    assert np.abs(out.detach().numpy() - np.array(attention_loop_oracle(h_c, h_f, att))).max() <= 1e-10


def cross_attention_grad_errors(seed: int) -> dict[str, float]:
    gen = torch.Generator().manual_seed(seed)
    att = CrossAttention(8, 2, seed=seed).double()
    with torch.no_grad():
        att.norm.weight.uniform_(0.5, 1.5, generator=gen)
        att.norm.bias.uniform_(-0.5, 0.5, generator=gen)
    h_c = torch.randn(3, 8, dtype=torch.float64, generator=gen)
    h_f = torch.randn(3, 4, 8, dtype=torch.float64, generator=gen)
    proj = torch.randn(8, dtype=torch.float64, generator=gen)
    return check_parameters(lambda: (att(h_c, h_f) @ proj).sum(), att.named_parameters(), seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_parameter_gradients(seed):
    errs = cross_attention_grad_errors(seed)
    assert set(errs) == {"w_q", "w_k", "w_v", "w_o", "norm.weight", "norm.bias"}
    assert max(errs.values()) <= 1e-4, errs


def test_width_mismatch():
    att = CrossAttention(8, 2)
    with pytest.raises(ValueError):
        att(torch.zeros(1, 6), torch.zeros(1, 3, 8))


def test_attention_weights_are_distributions():
    att = CrossAttention(16, 4).double()
    w = att.weights(3 * torch.randn(5, 16, dtype=torch.float64), 3 * torch.randn(5, 9, 16, dtype=torch.float64))
    assert torch.allclose(w.sum(-1), torch.ones(5, 4, dtype=torch.float64), atol=1e-9)
    assert w.min() >= 0 and w.max() <= 1


def tiny_model(seed=0):
    return FusionModel(EncoderConfig(**{**TINY.__dict__, "init_seed": seed}), seed=seed).double()


def random_inputs(seed, b=4):
    gen = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 16, dtype=torch.float64, generator=gen),
            torch.rand(b, 16, 16, 3, dtype=torch.float64, generator=gen))


def test_s_only_bit_identical_to_reduction():
    model = tiny_model()
    for seed in range(10):
        h_c, images = random_inputs(seed)
        assert torch.equal(model(h_c, images, "s_only"), model.semantic_only(h_c))
        assert torch.equal(model(h_c, None, MaskMode.S_ONLY), model.semantic_only(h_c))


def test_g_only_formula():
    model = tiny_model(1)
    h_c, images = random_inputs(3)
    tokens = model.gaze(images)
    att = model.attention
    v = torch.einsum("btd,hdk->bhtk", tokens, att.w_v).mean(dim=2)
    mean_value = v.reshape(len(h_c), -1) @ att.w_o
    expected = model.head(torch.cat([att.norm(mean_value), torch.zeros_like(h_c)], dim=-1))
    assert torch.allclose(model(h_c, images, "g_only"), expected, atol=1e-12)


def test_residual_well_posedness():
    model = tiny_model(2)
    h_c, images = random_inputs(4)
    h_c2, images2 = random_inputs(5)
    assert torch.equal(model(h_c, images, "s_only"), model(h_c, images2, "s_only"))
    assert torch.equal(model(h_c, images, "g_only"), model(h_c2, images, "g_only"))
    assert not torch.equal(model(h_c, images, "full"), model(h_c, images2, "full"))


def full_model_grad_errors(seed: int) -> dict[str, float]:
    model = tiny_model(seed)
    h_c, images = random_inputs(seed, b=5)
    y = torch.randn(5, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 99))
    cfg = HybridLossConfig(0.5)
    return check_parameters(lambda: hybrid_loss_torch(model(h_c, images), y, cfg),
                            model.trainable_parameters(), coords_per_tensor=32, seed=seed)


def test_full_model_gradients():
    errs = full_model_grad_errors(0)
    assert any(k.startswith("gaze.") for k in errs) and any(k.startswith("attention.") for k in errs)
    assert any(k.startswith("head.") for k in errs)
    assert max(errs.values()) <= 1e-4, {k: v for k, v in errs.items() if v > 1e-4}


def test_semantic_has_no_trainable_state():
    model = tiny_model()
    assert not any(n.startswith("semantic") for n, _ in model.named_parameters())


@pytest.fixture(scope="module")
def tiny_sets():
    recs, _, _ = gen_synthetic(SynthConfig(n_images=60, image_size=(16, 16), observers_per_image=1, seed=3))
    model = FusionModel(TINY)
    tr = ScoredSet.from_records(recs[:40], model.semantic)
    va = ScoredSet.from_records(recs[40:], model.semantic)
    return recs, tr, va


def test_training_contracts(tiny_sets):
    recs, tr, va = tiny_sets
    cfg = TrainConfig(max_epochs=6, patience=2, batch_size=16)
    model = FusionModel(TINY)
    proj = model.semantic.projection.copy()
    m1, log1 = train(model, tr, va, cfg)
    assert np.array_equal(m1.semantic.projection, proj)
    m2, log2 = train(FusionModel(TINY), tr, va, cfg)
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    assert log1.to_lines() == log2.to_lines()
    assert log1.best_val_plcc == max(e["val_plcc"] for e in log1.epochs)
    assert m1.predict(va.h_c, va.images).shape == (len(va),)
    assert isinstance(forward(recs[0], m1), float)


def test_patience_zero_stops_after_first_non_improvement(tiny_sets):
    _, tr, va = tiny_sets
    _, log = train(FusionModel(TINY), tr, va, TrainConfig(max_epochs=30, patience=0, batch_size=16, lr=3e-2))
    plcc = [e["val_plcc"] for e in log.epochs]
    first_drop = next((k for k in range(1, len(plcc)) if plcc[k] <= max(plcc[:k])), None)
    assert first_drop is not None
    assert len(plcc) == first_drop + 1


def test_s_only_training_leaves_gave_untouched(tiny_sets):
    _, tr, va = tiny_sets
    model = FusionModel(TINY)
    before = {k: v.clone() for k, v in model.gaze.state_dict().items()}
    train(model, tr, va, TrainConfig(max_epochs=2, batch_size=16, mode="s_only"))
    assert all(torch.equal(before[k], v) for k, v in model.gaze.state_dict().items())


def test_training_preconditions(tiny_sets):
    _, tr, va = tiny_sets
    with pytest.raises(ValueError):
        train(FusionModel(TINY), tr, tr, TrainConfig(max_epochs=1))
    empty = ScoredSet([], tr.images[:0], tr.h_c[:0], np.zeros(0))
    with pytest.raises(ValueError):
        train(FusionModel(TINY), tr, empty, TrainConfig(max_epochs=1))


def test_checkpoint_round_trip(tmp_path, tiny_sets):
    _, tr, va = tiny_sets
    model, _ = train(FusionModel(TINY), tr, va, TrainConfig(max_epochs=2, batch_size=16))
    save_checkpoint(tmp_path / "m", model, TrainConfig(max_epochs=2), extra={"split": {"seed": 0}})
    back, cfg = load_checkpoint(tmp_path / "m")
    assert cfg["split"] == {"seed": 0} and cfg["train"]["max_epochs"] == 2
    assert np.array_equal(back.predict(va.h_c, va.images), model.predict(va.h_c, va.images))
    save_checkpoint(tmp_path / "m2", model, TrainConfig(max_epochs=2), extra={"split": {"seed": 0}})
    assert (tmp_path / "m").read_bytes() == (tmp_path / "m2").read_bytes()


def test_end_to_end_full_beats_semantic_only():
    run = experiments.h1a(0)
    y = run["scores"]
    mse = lambda p: float(np.mean((p - y) ** 2))
    assert mse(run["full_trained"]) < mse(run["s_only_trained"])
    assert mse(run["full_trained"]) < mse(run["full_masked_s_only"])
    assert run["full_val_plcc"] > run["s_only_val_plcc"]
