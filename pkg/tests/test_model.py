import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import crandn
from fapt.model import (PAD_TOKEN, DimensionError, InputProjection, ModelConfig, OutputProjection,
                        PortLLM, SharedModule, assemble_output, build_prompt, preprocess, tokenize,
                        tokenize_and_embed)
from fapt.nn import ConfigError, finite_diff_check
from fapt.training import nmse_loss

TOY = ModelConfig(t_in=4, f_out=4, n=8, m=8, d_model=16, n_heads=2, n_layers=2, d_hidden=32,
                  lora_rank=2)



def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(lora_rank=0)
    with pytest.raises(ConfigError):
        ModelConfig(n=3)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    p = ModelConfig.full_scale()
    assert (p.d_model, p.n_heads, p.n_layers, p.d_hidden, p.lora_rank) == (768, 8, 6, 2048, 4)


def test_preprocess_examples(rng):
    x = rng.standard_normal((1, 2, 4, 4)) + 0j
    real, imag, mu, sigma = preprocess(x)
    assert np.allclose(imag, 0.0)
    real, imag, _, sigma = preprocess(np.full((1, 2, 4, 4), 3 + 1j))
    assert not real.any() and not imag.any()
    assert sigma[0] == 1e-12
    x = crandn(rng, 3, 2, 4, 4)
    real, imag, mu, sigma = preprocess(x)
    back = assemble_output(np.stack([real, imag], axis=2), mu, sigma)
    assert np.allclose(back, x, atol=1e-12)
    with pytest.raises(DimensionError):
        preprocess(np.ones((2, 4, 4), complex))


def test_assemble_zero_is_mean():
    mu = np.array([1 + 2j])
    out = assemble_output(np.zeros((1, 3, 2, 4, 4)), mu, np.array([5.0]))
    assert np.all(out == mu[0])


def test_stage_shapes(rng):
    model = PortLLM(TOY)
    real, imag, _, _ = preprocess(crandn(rng, 2, 4, 8, 8))
    x = model.shared.forward(real, imag)
    assert x.shape == (2, 4, 2, 16)
    xt = model.in_proj.forward(x)
    assert xt.shape == (2, 4, 16)
    assert model.backbone.forward(xt).shape == (2, 4, 16)
    assert model.out_proj.forward(xt).shape == (2, 4, 2, 8, 8)


def test_zero_input_zero_bias_projections(rng):
    ip = InputProjection(TOY, rng)
    op = OutputProjection(TOY, rng)
    for mod in (ip, op):
        for _, p in mod.named_parameters():
            if p.value.ndim == 1:
                p.value[...] = 0.0
    assert not ip.forward(np.zeros((1, 4, 2, 16))).any()
    assert not op.forward(np.zeros((1, 4, 16))).any()


def test_shared_module_swap_symmetry(rng):
    sm = SharedModule(TOY, rng)
    sm.eval()
    real, imag = rng.standard_normal((2, 2, 4, 8, 8))
    a = sm.forward(real, imag)
    b = sm.forward(imag, real)
    assert np.array_equal(a[:, :, 0], b[:, :, 1])
    assert np.array_equal(a[:, :, 1], b[:, :, 0])


@pytest.mark.parametrize("prompt", [False, True])
def test_zero_init_identity(prompt, rng):
    model = PortLLM(TOY.with_(prompt_enabled=prompt, prompt_len=16))
    model.eval()
    x = crandn(rng, 3, 4, 8, 8)
    assert np.array_equal(model.forward(x), model.forward(x, adapters=False))


def test_nonzero_adapter_changes_output(rng):
    model = PortLLM(TOY)
    model.eval()
    x = crandn(rng, 2, 4, 8, 8)
    base = model.forward(x)
    model.adapters()[0].lora_b.value[...] = 0.1
    assert not np.allclose(model.forward(x), base)


def test_forward_contract(rng):
    model = PortLLM(TOY)
    model.eval()
    x = crandn(rng, 4, 8, 8)
    y = model.forward(x)
    assert y.shape == (1, 4, 8, 8) and np.iscomplexobj(y)
    assert np.all(np.isfinite(y))
    assert np.array_equal(y, model.forward(x))
    with pytest.raises(DimensionError):
        model.forward(crandn(rng, 1, 5, 8, 8))
    with pytest.raises(DimensionError):
        model(crandn(rng, 1, 4, 8, 8), steps=3)


def test_predict_restores_mode(rng):
    model = PortLLM(TOY)
    model.train()
    x = crandn(rng, 5, 4, 8, 8)
    out = model.predict(x, batch_size=2)
    assert model.training
    assert out.shape == (5, 4, 8, 8)
    assert model.predict(np.zeros((0, 4, 8, 8), complex)).shape == (0, 4, 8, 8)


@settings(max_examples=8)
@given(t=st.integers(1, 4), f=st.integers(1, 4), n=st.integers(4, 9), m=st.integers(4, 9),
       heads=st.sampled_from([1, 2, 4]))
def test_shape_contract_sweep(t, f, n, m, heads):
    cfg = ModelConfig(t_in=t, f_out=f, n=n, m=m, d_model=8, n_heads=heads, n_layers=1,
                      d_hidden=8, lora_rank=1)
    model = PortLLM(cfg)
    model.eval()
    x = crandn(np.random.default_rng(0), 2, t, n, m)
    assert model.forward(x).shape == (2, f, n, m)


def test_shared_frozen_seeds_identical_outputs(rng):
    a = PortLLM(TOY.with_(seed=1, frozen_seed=5))
    b = PortLLM(TOY.with_(seed=1, frozen_seed=5))
    x = crandn(rng, 2, 4, 8, 8)
    a.eval()
    b.eval()
    assert np.array_equal(a.forward(x), b.forward(x))


def test_prompt_isolation(rng):
    plain = PortLLM(TOY)
    assert plain.prompt is None
    assert not any("prompt" in n for n, _ in plain.named_parameters())
    other = PortLLM(TOY.with_(prompt_len=7))
    x = crandn(rng, 2, 4, 8, 8)
    plain.eval()
    other.eval()
    assert np.array_equal(plain.forward(x), other.forward(x))


def test_prompt_changes_only_with_trained_encoder(rng):
    cfg = TOY.with_(prompt_enabled=True, prompt_len=16)
    model = PortLLM(cfg)
    model.eval()
    x = crandn(rng, 2, 4, 8, 8)
    base = model.forward(x)
    w = model.prompt.mlp.fc2.weight.value
    w[...] = rng.standard_normal(w.shape)
    assert np.max(np.abs(model.forward(x) - base)) > 1e-6


def test_build_prompt_examples():
    cfg = ModelConfig()
    ctx = build_prompt(np.ones((2, 3, 3), complex), cfg)
    assert ctx.stats == (1.0, 1.0, 1.0, 0.0, 1.0)
    assert ctx.text.startswith("max 1 min 1 mean 1 std 0 median 1")
    x = np.array([[[0, 3 + 4j]]])
    ctx = build_prompt(x, cfg)
    assert ctx.stats[0] == 5.0 and ctx.stats[1] == 0.0
    assert build_prompt(x, cfg).text == ctx.text


def test_prompt_stats_fit_default_length(rng):
    cfg = ModelConfig()
    text = build_prompt(crandn(rng, 8, 20, 10) * 1e-3, cfg).text
    stats_part = text.split(";")[0]
    assert len(stats_part.encode()) <= cfg.prompt_len


def test_tokenize():
    ids = tokenize("", 5)
    assert np.all(ids == PAD_TOKEN)
    ids = tokenize("abc", 5)
    assert list(ids) == [97, 98, 99, PAD_TOKEN, PAD_TOKEN]
    assert list(tokenize("abcdef", 3)) == [97, 98, 99]
    table = np.arange(257 * 2, dtype=float).reshape(257, 2)
    emb = tokenize_and_embed("", table, 4)
    assert np.array_equal(emb, np.repeat(table[PAD_TOKEN][None], 4, axis=0))


@settings(max_examples=30)
@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=20),
       st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=20))
def test_tokenize_injective_ascii(a, b):
    if a != b:
        assert not np.array_equal(tokenize(a, 24), tokenize(b, 24))


def test_embedding_table_reproducible():
    cfg = TOY.with_(prompt_enabled=True, prompt_len=8)
    a = PortLLM(cfg).prompt.embedding.value
    b = PortLLM(cfg).prompt.embedding.value
    assert np.array_equal(a, b)


def _model_gradcheck(model, x, truth, max_coords=12):
    model.train()
    model.zero_grad()
    pred = model.forward(x)
    _, dr, di = nmse_loss(pred, truth, batched=True)
    model.backward(dr, di)
    params = model.trainable_parameters()

    def loss():
        return nmse_loss(model.forward(x), truth, batched=True)[0]

    return finite_diff_check(loss, [p.value for _, p in params], [p.grad.copy() for _, p in params],
                             max_coords=max_coords)


@pytest.mark.parametrize("prompt", [False, True])
def test_end_to_end_gradcheck(prompt, rng):
    model = PortLLM(TOY.with_(prompt_enabled=prompt, prompt_len=8))
    for ad in model.adapters():
        ad.lora_b.value[...] = 0.05 * rng.standard_normal(ad.lora_b.value.shape)
    if prompt:
        w = model.prompt.mlp.fc2.weight.value
        w[...] = 0.05 * rng.standard_normal(w.shape)
    x = crandn(rng, 3, 4, 8, 8)
    truth = crandn(rng, 3, 4, 8, 8)
    assert _model_gradcheck(model, x, truth) <= 1e-5


def test_frozen_params_get_no_update(rng):
    model = PortLLM(TOY)
    frozen = {n: p.value.copy() for n, p in model.named_parameters() if not p.trainable}
    assert any(n.startswith("backbone.") for n in frozen)
    trainable = [n for n, _ in model.trainable_parameters()]
    assert not any(n.startswith("backbone.") and "lora_" not in n for n in trainable)


def test_checkpoint_round_trip(tmp_path, rng):
    model = PortLLM(TOY.with_(prompt_enabled=True, prompt_len=8))
    for ad in model.adapters():
        ad.lora_b.value[...] = rng.standard_normal(ad.lora_b.value.shape)
    model.train()
    model.forward(crandn(rng, 4, 4, 8, 8))          # moves batch-norm running stats
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = PortLLM.load(path)
    assert back.cfg == model.cfg
    for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb and pa.trainable == pb.trainable
        assert pa.value.tobytes() == pb.value.tobytes()
    for (na, ba), (nb, bb) in zip(model.named_buffers(), back.named_buffers()):
        assert na == nb and np.asarray(ba).tobytes() == np.asarray(bb).tobytes()
    x = crandn(rng, 2, 4, 8, 8)
    model.eval()
    back.eval()
    assert np.array_equal(model.forward(x), back.forward(x))


def test_load_rejects_wrong_shape(tmp_path):
    PortLLM(TOY).save(tmp_path / "a.ckpt")
    model = PortLLM(TOY.with_(d_hidden=64))
    from fapt.io import read_checkpoint
    _, entries = read_checkpoint(tmp_path / "a.ckpt")
    with pytest.raises(DimensionError):
        model.load_entries(entries)


def test_float32_forward(rng):
    model = PortLLM(TOY.with_(dtype="float32"))
    model.eval()
    y = model.forward(crandn(rng, 2, 4, 8, 8))
    assert np.all(np.isfinite(y))
