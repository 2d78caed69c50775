import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeaqa.dataio import Scanpath, SynthConfig, gen_synthetic, render_image
from gazeaqa.encoders import (EmbeddingTable, EncoderConfig, EncoderConfigError, GazeImageEncoder,
                              MissingIdError, ScanpathEncoder, SemanticConfig, SemanticEncoder,
                              encode_semantic, fixation_features, l2_normalize, load_embedding_table,
                              load_module_state, load_weights, module_state, save_weights,
                              write_embedding_table)
from gazeaqa.gradcheck import check_parameters

SMALL = EncoderConfig(d=16, patch_size=4, n_layers=1, n_heads=2, image_size=(8, 8))


def test_semantic_frozen_and_deterministic():
    img = render_image(0.3, -0.2)
    enc = SemanticEncoder()
    assert np.array_equal(enc(img), enc(img))
    assert np.array_equal(SemanticEncoder()(img), enc(img))
    assert enc.trainable_parameters == ()
    assert enc(img).shape == (64,)


def test_semantic_zero_image_is_fixed_projection():
    enc = SemanticEncoder()
    zero = np.zeros((64, 64, 3))
    assert np.array_equal(enc(zero), enc.features(zero) @ enc.projection)
    assert np.array_equal(encode_semantic(zero), enc(zero))


def test_semantic_motif_sensitivity():
    enc = SemanticEncoder()
    for zg in (-0.5, 0.0, 0.7):
        a, b = enc(render_image(-0.9, zg)), enc(render_image(0.9, zg))
        cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert cos < 1.0


def test_semantic_shape_mismatch():
    with pytest.raises(EncoderConfigError):
        SemanticEncoder()(np.zeros((32, 32, 3)))
    with pytest.raises(EncoderConfigError):
        SemanticConfig(grid=5)


def test_semantic_batch_matches_single():
    enc = SemanticEncoder()
    imgs = np.stack([render_image(z, -z) for z in (-0.5, 0.1, 0.8)])
    assert np.allclose(enc(imgs), np.stack([enc(i) for i in imgs]), atol=1e-12)


def test_config_validation():
    with pytest.raises(EncoderConfigError):
        EncoderConfig(d=10, n_heads=4)
    with pytest.raises(EncoderConfigError):
        EncoderConfig(patch_size=7)


def test_image_tokens_and_norm():
    enc = GazeImageEncoder(EncoderConfig()).double()
    x = torch.tensor(np.stack([render_image(0.1, 0.2), render_image(-0.4, 0.9)]))
    tokens = enc(x)
    assert tokens.shape == (2, 64, 64)
    v = enc.pooled(x, normalize=True)
    assert torch.allclose(v.norm(dim=-1), torch.ones(2, dtype=torch.float64), atol=1e-9)
    with pytest.raises(EncoderConfigError):
        enc(torch.zeros(1, 32, 32, 3, dtype=torch.float64))


def test_init_is_seeded():
    a, b = GazeImageEncoder(EncoderConfig(init_seed=3)), GazeImageEncoder(EncoderConfig(init_seed=3))
    c = GazeImageEncoder(EncoderConfig(init_seed=4))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert not torch.equal(a.patch.weight, c.patch.weight)


def test_frozen_config_disables_grads():
    enc = GazeImageEncoder(EncoderConfig(trainable=False))
    assert not any(p.requires_grad for p in enc.parameters())


def image_grad_errors(seed: int, cfg: EncoderConfig = SMALL) -> dict[str, float]:
    torch.manual_seed(seed)
    enc = GazeImageEncoder(EncoderConfig(**{**cfg.__dict__, "init_seed": seed})).double()
    x = torch.rand(2, *cfg.image_size, cfg.channels, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    return check_parameters(lambda: enc.pooled(x).sum(), enc.named_parameters(), seed=seed)


def scanpath_grad_errors(seed: int, cfg: EncoderConfig = SMALL) -> dict[str, float]:
    enc = ScanpathEncoder(EncoderConfig(**{**cfg.__dict__, "init_seed": seed})).double()
    rng = np.random.default_rng(seed)
    paths = [Scanpath("a", f"o{k}", tuple((float(rng.random()), float(rng.random()), float(rng.uniform(50, 400)))
                                          for _ in range(int(rng.integers(1, 6))))) for k in range(3)]
    feats, mask = fixation_features(paths, torch.float64)
    return check_parameters(lambda: enc(feats, mask).sum(), enc.named_parameters(), seed=seed)


def test_image_encoder_gradients_default_size():
    errs = image_grad_errors(0, EncoderConfig())
    assert len(errs) == len(list(GazeImageEncoder().parameters()))
    assert max(errs.values()) <= 1e-4, errs


def test_scanpath_encoder_gradients_default_size():
    errs = scanpath_grad_errors(0, EncoderConfig())
    assert max(errs.values()) <= 1e-4, errs


@pytest.mark.parametrize("seed", range(1, 4))
def test_encoder_gradients_small(seed):
    assert max(image_grad_errors(seed).values()) <= 1e-4
    assert max(scanpath_grad_errors(seed).values()) <= 1e-4


def test_single_fixation_path():
    enc = ScanpathEncoder(SMALL).double()
    sp = Scanpath("a", "o", ((0.3, 0.6, 250.0),))
    v = enc.encode([sp])
    tok = enc.embed(torch.tensor([[0.3, 0.6, np.log(0.25)]], dtype=torch.float64)) + enc.order[:1].double()
    x = tok[None]
    for blk in enc.blocks:
        x = blk(x)
    ref = l2_normalize(enc.ln_f(x)[:, 0])
    assert torch.allclose(v, ref, atol=1e-12)
    assert abs(v.norm().item() - 1) <= 1e-9


def test_order_encoding_changes_embedding():
    enc = ScanpathEncoder(EncoderConfig()).double()
    fx = ((0.2, 0.3, 200.0), (0.7, 0.1, 300.0), (0.5, 0.9, 150.0))
    a = enc.encode([Scanpath("a", "o", fx)])
    b = enc.encode([Scanpath("a", "o", fx[::-1])])
    assert (a - b).abs().max() > 1e-6


def test_padding_does_not_leak():
    enc = ScanpathEncoder(SMALL).double()
    short = Scanpath("a", "o", ((0.2, 0.3, 200.0), (0.4, 0.4, 120.0)))
    long = Scanpath("b", "o", tuple((0.1 * k, 0.5, 100.0) for k in range(1, 8)))
    together = enc.encode([short, long])
    assert torch.allclose(together[0], enc.encode([short])[0], atol=1e-12)


def test_embedding_table_examples(tmp_path):
    rng = np.random.default_rng(0)
    tab = EmbeddingTable([f"id{k}" for k in range(5)], rng.normal(size=(5, 16)).astype(np.float32))
    write_embedding_table(tmp_path / "t.aqaemb", tab)
    back = load_embedding_table(tmp_path / "t.aqaemb", expected_width=16)
    assert len(back) == 5 and back.width == 16
    assert np.array_equal(back.values, tab.values)
    assert np.array_equal(back["id3"], tab.values[3])
    with pytest.raises(MissingIdError):
        back["nope"]
    with pytest.raises(MissingIdError):
        back.lookup(["id1", "nope"])
    with pytest.raises(EncoderConfigError):
        load_embedding_table(tmp_path / "t.aqaemb", expected_width=8)


def test_token_table_round_trip(tmp_path):
    vals = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    write_embedding_table(tmp_path / "t", EmbeddingTable(["a", "b"], vals))
    assert np.array_equal(load_embedding_table(tmp_path / "t").values, vals)


def test_table_truncated_payload(tmp_path):
    write_embedding_table(tmp_path / "t", EmbeddingTable(["a"], np.ones((1, 4), np.float32)))
    data = (tmp_path / "t").read_bytes()
    (tmp_path / "t").write_bytes(data[:-2])
    with pytest.raises(EncoderConfigError):
        load_embedding_table(tmp_path / "t")


def test_weights_round_trip(tmp_path):
    enc = GazeImageEncoder(EncoderConfig(init_seed=5))
    save_weights(tmp_path / "w", module_state(enc, "img."), {"d": 64})
    arrays, cfg = load_weights(tmp_path / "w")
    assert cfg == {"d": 64}
    fresh = GazeImageEncoder(EncoderConfig(init_seed=9))
    load_module_state(fresh, arrays, "img.")
    assert all(torch.equal(a, b) for a, b in zip(enc.state_dict().values(), fresh.state_dict().values()))
    save_weights(tmp_path / "w2", module_state(enc, "img."), {"d": 64})
    assert (tmp_path / "w").read_bytes() == (tmp_path / "w2").read_bytes()


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_unit_norm_property(seed):
    _, paths, _ = gen_synthetic(SynthConfig(n_images=2, observers_per_image=2, image_size=(8, 8), seed=seed))
    v = ScanpathEncoder(EncoderConfig(init_seed=seed)).double().encode(paths)
    assert torch.allclose(v.norm(dim=-1), torch.ones(len(paths), dtype=torch.float64), atol=1e-9)
