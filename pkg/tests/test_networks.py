import numpy as np
import pytest

from multicomp import autodiff as ad
from multicomp import networks as nw
from multicomp.autodiff import Tensor
from multicomp.data import duplicate_to_n
from multicomp.errors import InvalidShape, InvalidState

from oracles import rel_err

# a tiny preset keeps finite-difference checks fast
TINY = nw.NetPreset("tiny", n_points=16, n_partial=8, x_dim=8, z_dim=4,
                    encoder_widths=(6, 8, 8, 10, 8), decoder_widths=(12, 12), gan_widths=(10, 12))


@pytest.fixture
def model():
    m = nw.CompletionModel(TINY, seed=7)
    for net in m.networks().values():
        net.eval()
    return m


def cloud(rng, n=16):
    return rng.uniform(-1, 1, size=(n, 3))


def test_paper_preset_matches_architecture_table():
    p = nw.PAPER
    assert (p.n_points, p.n_partial, p.x_dim, p.z_dim) == (2048, 1024, 128, 64)
    m = nw.CompletionModel("paper", seed=0)
    enc = m.ae_encoder.store.params
    assert [enc[f"conv{i}.W"].shape[0] for i in range(5)] == [64, 128, 128, 256, 128]
    assert enc["conv0.W"].shape == (64, 3)
    dec = m.ae_decoder.store.params
    assert [dec[f"fc{i}.W"].shape for i in range(3)] == [(256, 128), (256, 256), (2048 * 3, 256)]
    gen = m.generator.store.params
    assert [gen[f"fc{i}.W"].shape for i in range(3)] == [(256, 128 + 64), (512, 256), (128, 512)]
    disc = m.discriminator.store.params
    assert [disc[f"fc{i}.W"].shape for i in range(3)] == [(256, 128), (512, 256), (1, 512)]
    vae = m.vae_encoder.store.params
    assert vae["mu.W"].shape == (64, 128)
    assert vae["logvar.W"].shape == (64, 128)


def test_desk_preset_is_default_scale():
    p = nw.DESK
    assert (p.n_points, p.n_partial, p.x_dim, p.z_dim) == (256, 128, 64, 16)


def test_encoder_output_shape_and_cardinality_check(model, rng):
    assert model.encode_ae(cloud(rng)).shape == (TINY.x_dim,)
    with pytest.raises(InvalidShape):
        model.encode_ae(cloud(rng, 15))


def test_encoders_permutation_invariant(model, rng):
    c = cloud(rng)
    perm = rng.permutation(16)
    np.testing.assert_allclose(model.encode_ae(c), model.encode_ae(c[perm]), atol=1e-9)
    mu, logvar = model.encode_vae(c)
    mu2, logvar2 = model.encode_vae(c[perm])
    np.testing.assert_allclose(mu, mu2, atol=1e-9)
    np.testing.assert_allclose(logvar, logvar2, atol=1e-9)


def test_duplicated_partial_code_independent_of_tiling_order(model, rng):
    p = cloud(rng, 8)
    a = duplicate_to_n(p, 16)
    b = duplicate_to_n(p[::-1], 16)
    np.testing.assert_allclose(model.encode_ae(a), model.encode_ae(b), atol=1e-12)


def test_decoder_shape_and_determinism(model, rng):
    x = rng.normal(size=TINY.x_dim)
    out = model.decode_ae(x)
    assert out.shape == (16, 3)
    np.testing.assert_array_equal(out, model.decode_ae(x))


def test_vae_shapes_and_reparameterization(model, rng):
    mu, logvar = model.encode_vae(cloud(rng))
    assert mu.shape == logvar.shape == (TINY.z_dim,)
    z = nw.reparameterize(Tensor(mu[None]), Tensor(logvar[None]), np.zeros((1, TINY.z_dim)))
    np.testing.assert_array_equal(z.data[0], mu)


def test_vae_means_are_batch_standardized(rng):
    enc = nw.VAEEncoder(TINY.n_points, TINY.encoder_widths, TINY.z_dim, seed=3)
    mu, _ = enc(rng.uniform(-1, 1, size=(6, TINY.n_points, 3)))
    np.testing.assert_allclose(mu.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(mu.data.var(axis=0), 1.0, rtol=1e-4)
    assert not any(k.startswith("mu_bn") for k in enc.store.params)


def test_mode_encode_requires_training(model, rng):
    with pytest.raises(InvalidState):
        model.mode_encode(cloud(rng))
    model.vae_encoder.mark_trained()
    c = cloud(rng)
    z = model.mode_encode(c)
    assert z.shape == (TINY.z_dim,)
    np.testing.assert_array_equal(z, model.mode_encode(c))


def test_generator_and_discriminator_shapes(model, rng):
    out = model.generate(rng.normal(size=TINY.x_dim), rng.normal(size=TINY.z_dim))
    assert out.shape == (TINY.x_dim,)
    score = model.discriminate(out)
    assert isinstance(score, float)
    assert score == model.discriminate(out)
    with pytest.raises(InvalidShape):
        model.generate(rng.normal(size=TINY.x_dim), rng.normal(size=TINY.z_dim + 1))


def test_frozen_network_refuses_train_mode(model):
    model.ae_encoder.freeze()
    with pytest.raises(InvalidState):
        model.ae_encoder.train()


def test_checkpoint_save_load(model, rng, tmp_path):
    c = cloud(rng)
    model.ae_encoder.save(tmp_path / "e.ckpt")
    other = nw.CompletionModel(TINY, seed=99)
    other.ae_encoder.load(tmp_path / "e.ckpt").eval()
    np.testing.assert_array_equal(other.encode_ae(c), model.encode_ae(c))


# ---- gradient checks through the composite paths used by the losses

def test_decoder_emd_gradient_wrt_code(model, rng):
    target = cloud(rng)
    x = rng.normal(size=(1, TINY.x_dim))
    assert ad.grad_check(lambda t: ad.emd_loss(model.ae_decoder(t), [target]), x) < 1e-4


@pytest.mark.parametrize("train", [False, True])
def test_encoder_decoder_emd_gradient_wrt_points(model, rng, train):
    model.ae_encoder.training = train
    batch = rng.uniform(-1, 1, size=(2, 16, 3))
    err = ad.grad_check(lambda t: ad.emd_loss(model.ae_decoder(model.ae_encoder(t)), list(batch)), batch)
    assert err < 1e-4


def test_encoder_gradient_wrt_weights(model, rng):
    batch = rng.uniform(-1, 1, size=(2, 16, 3))
    target = rng.normal(size=(2, TINY.x_dim))
    W = model.ae_encoder.store.params["conv2.W"]
    w0 = W.data.copy()

    def loss():
        return ad.total(ad.square(model.ae_encoder(batch) - target))

    loss().backward()
    analytic = W.grad.copy()
    W.grad = None
    numeric = np.zeros_like(w0)
    for i in range(w0.size):
        for sign in (1, -1):
            w = w0.copy()
            w.reshape(-1)[i] += sign * 1e-5
            W.data = w
            numeric.reshape(-1)[i] += sign * loss().item() / 2e-5
    W.data = w0
    assert rel_err(analytic, numeric) < 1e-4


def test_generate_discriminate_gradient(model, rng):
    x_p = rng.normal(size=(2, TINY.x_dim))
    z = rng.normal(size=(2, TINY.z_dim))
    f_xp = lambda t: ad.mean(ad.square(model.discriminator(model.generator(t, z)) - 1.0))
    f_z = lambda t: ad.mean(ad.square(model.discriminator(model.generator(x_p, t)) - 1.0))
    assert ad.grad_check(f_xp, x_p) < 1e-4
    assert ad.grad_check(f_z, z) < 1e-4


def test_discriminator_lsgan_gradient(model, rng):
    x = rng.normal(size=(3, TINY.x_dim))
    assert ad.grad_check(lambda t: ad.mean(ad.square(model.discriminator(t) - 1.0)), x) < 1e-4


def test_generator_decoder_mode_encoder_gradient(model, rng):
    x_p = rng.normal(size=(2, TINY.x_dim))
    z = rng.normal(size=(2, TINY.z_dim))

    def f(t):
        mu, _ = model.vae_encoder(model.ae_decoder(model.generator(x_p, t)))
        return ad.mean(ad.absolute(Tensor(z) - mu))

    assert ad.grad_check(f, z) < 1e-4
