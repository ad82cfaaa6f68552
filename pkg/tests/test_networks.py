import numpy as np
import pytest

from fcgan import autodiff as ad
from fcgan.autodiff import Tensor
from fcgan.bundle import (BundleCorruptError, BundleIOError, BundleVersionError, ModelBundle,
                          from_bytes, load_bundle, save_bundle, to_bytes)
from fcgan.data import default_schema, Encoder
from fcgan.networks import (Context, GeneratorConfig, NetworkError, build_critic, build_generator,
                            critic_score, generate)


def expected_generator_rows(L, d, ks):
    """Per-layer stored counts written out from the architecture formulas."""
    rows = []
    n_in = L
    for w in (256, 128, 64, 32):
        rows += [(n_in + 1) * w, 4 * w, 2]
        n_in = w
    rows += [4 * d * 33, 4 * (4 * d), 2, (4 * d + 1) * 2 * d, 4 * (2 * d), 2, (2 * d + 1) * d]
    for k in ks:
        rows += [33 * 4 * k, 4 * (4 * k), 0, (4 * k + 1) * 2 * k, 4 * (2 * k), 0,
                 (2 * k + 1) * k, 4 * k, 0]
    return rows


CRITIC_ROWS_59 = [15360, 32896, 16512, 16512, 8256, 4160, 2080, 1056, 528, 272, 17]


@pytest.fixture(scope="module")
def gen():
    return build_generator(GeneratorConfig(52, (5, 2)), seed=0)


@pytest.fixture(scope="module")
def crit():
    return build_critic(59, seed=0)


def test_generator_rows_match_formulas(gen):
    counts = [row[3] for row in gen.layer_table()]
    assert counts == expected_generator_rows(150, 52, (5, 2))
    assert counts[0] == 38656
    assert gen.layer_table()[12][3] == 6864
    assert counts[1] == 1024


def test_generator_total_is_logged(caplog):
    with caplog.at_level("INFO", logger="fcgan.networks"):
        g = build_generator(GeneratorConfig(52, (5, 2)), seed=1)
    total = sum(expected_generator_rows(150, 52, (5, 2)))
    assert g.param_count() == total
    assert str(total) in caplog.text


def test_critic_rows_and_total(crit):
    dense = [row[3] for row in crit.layer_table() if row[1] == "Dense"]
    assert dense == CRITIC_ROWS_59
    assert crit.param_count() == 97649
    assert not any(row[1] == "BatchNorm" for row in crit.layer_table())
    assert build_critic(1).layer_table()[0][3] == 512


def test_critic_dropout_layout(crit):
    rates = [layer.rate for _, layer in crit.named_layers() if layer.kind == "Dropout"]
    assert rates == [0, 0, 0, 0.5, 0.5, 0.2, 0.2, 0, 0, 0]


def test_generator_config_validation():
    assert GeneratorConfig(1).output_width == 1
    assert build_generator(GeneratorConfig(1)).output_width == 1
    assert GeneratorConfig(52, (5, 2)).output_width == 59
    for kwargs in ({"d": 0}, {"d": 3, "class_counts": (1,)}, {"d": 3, "latent_dim": 0}):
        with pytest.raises(NetworkError):
            GeneratorConfig(**kwargs)
    with pytest.raises(NetworkError):
        build_critic(0)


def test_generate_shape_blocks_and_determinism(gen):
    out = generate(gen, 1000, seed=3)
    assert out.shape == (1000, 59)
    assert np.all(np.abs(out[:, 52:57].sum(axis=1) - 1) <= 1e-9)
    assert np.all(np.abs(out[:, 57:59].sum(axis=1) - 1) <= 1e-9)
    assert np.array_equal(out, generate(gen, 1000, seed=3))
    assert not np.array_equal(out, generate(gen, 1000, seed=4))
    assert generate(gen, 0, seed=0).shape == (0, 59)


def test_generate_leaves_state_untouched(gen):
    before = {k: v.copy() for k, v in gen.state().items()}
    generate(gen, 300, seed=1)
    after = gen.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_generate_is_chunk_invariant(gen):
    from fcgan import networks
    ref = generate(gen, 50, seed=8)
    old = networks.GENERATE_CHUNK
    networks.GENERATE_CHUNK = 7
    try:
        assert np.allclose(generate(gen, 50, seed=8), ref, rtol=0, atol=1e-12)
    finally:
        networks.GENERATE_CHUNK = old


def test_critic_score_properties(crit):
    rows = np.random.default_rng(0).normal(size=(20, 59))
    s = critic_score(crit, rows)
    assert s.shape == (20,)
    assert np.array_equal(s, critic_score(crit, rows))
    dup = critic_score(crit, np.vstack([rows[:1], rows[:1]]))
    assert dup[0] == dup[1]
    with pytest.raises(NetworkError):
        critic_score(crit, np.zeros((3, 58)))


def test_zero_weight_critic_scores_equal_bias():
    c = build_critic(4)
    for p in c.parameters():
        p.value[...] = 0.0
    c.parameters()[-1].value[...] = 0.37
    assert np.all(critic_score(c, np.random.default_rng(1).normal(size=(6, 4))) == 0.37)


def test_toy_critic_separates_real_from_noise():
    rng = np.random.default_rng(0)
    c = build_critic(2, seed=1)
    params = c.parameters()
    for _ in range(200):
        real = rng.normal(3.0, 0.3, size=(64, 2))
        noise = rng.normal(-3.0, 0.3, size=(64, 2))
        g = ad.Graph()
        ctx = Context(g, "train", rng)
        loss = ad.sub(ad.mean(c(Tensor(noise), ctx)), ad.mean(c(Tensor(real), ctx)))
        ad.adam_step(params, ad.backward(loss, params=params), lr=1e-3, beta1=0.0, beta2=0.9)
    real = rng.normal(3.0, 0.3, size=(500, 2))
    noise = rng.normal(-3.0, 0.3, size=(500, 2))
    assert critic_score(c, real).mean() > critic_score(c, noise).mean()


def test_generator_batch_norm_rejects_single_row_training(gen):
    with pytest.raises(ad.DegenerateBatchError):
        gen(Tensor(np.zeros((1, 150))), Context(mode="train"))


# ---------------------------------------------------------------- bundle


def _bundle():
    schema = default_schema()
    enc = Encoder(schema, np.arange(52.0), np.ones(52) * 2)
    g = build_generator(GeneratorConfig(52, (5, 2)), seed=5)
    c = build_critic(59, seed=6)
    p = c.parameters()[0]
    p.m[...] = 0.5
    p.t = 7
    return ModelBundle(g, c, enc, schema, {"epochs": 3}, 42, {"epoch": 3})


def test_bundle_round_trip_is_bitwise(tmp_path):
    b = _bundle()
    path = tmp_path / "m.bundle"
    digest = save_bundle(b, path)
    assert len(digest) == 64
    back = load_bundle(path)
    w0, w1 = b.weights(), back.weights()
    assert w0.keys() == w1.keys()
    assert all(w0[k].tobytes() == w1[k].tobytes() for k in w0)
    assert back.seed == 42 and back.train_config == {"epochs": 3} and back.metadata == {"epoch": 3}
    assert back.critic.parameters()[0].t == 7
    assert np.array_equal(back.encoder.mean, b.encoder.mean)
    assert back.schema == b.schema
    assert to_bytes(back) == to_bytes(b)


def test_bundle_truncated_is_corrupt():
    data = to_bytes(_bundle())
    for cut in (5, 100, len(data) - 1):
        with pytest.raises(BundleCorruptError):
            from_bytes(data[:cut])


def test_bundle_flipped_byte_is_corrupt():
    data = bytearray(to_bytes(_bundle()))
    data[200] ^= 0xFF
    with pytest.raises(BundleCorruptError):
        from_bytes(bytes(data))


def test_bundle_wrong_version():
    data = bytearray(to_bytes(_bundle()))
    data[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(BundleVersionError):
        from_bytes(bytes(data))


def test_bundle_io_errors(tmp_path):
    with pytest.raises(BundleIOError):
        load_bundle(tmp_path / "missing.bundle")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(BundleIOError):
        save_bundle(_bundle(), blocker / "sub" / "m.bundle")
