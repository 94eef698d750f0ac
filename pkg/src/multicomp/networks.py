"""PointNet autoencoder, VAE mode encoder and the latent GAN built on the autodiff kernel."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import InvalidShape, InvalidState


@dataclass(frozen=True)
class NetPreset:
    name: str
    n_points: int
    n_partial: int
    x_dim: int
    z_dim: int
    encoder_widths: tuple
    decoder_widths: tuple
    gan_widths: tuple

    def __post_init__(self):
        if self.encoder_widths[-1] != self.x_dim:
            raise InvalidShape("last encoder width must equal the latent code size")


PAPER = NetPreset("paper", n_points=2048, n_partial=1024, x_dim=128, z_dim=64,
                  encoder_widths=(64, 128, 128, 256, 128), decoder_widths=(256, 256),
                  gan_widths=(256, 512))
DESK = NetPreset("desk", n_points=256, n_partial=128, x_dim=64, z_dim=16,
                 encoder_widths=(32, 64, 64, 128, 64), decoder_widths=(128, 128),
                 gan_widths=(128, 256))
PRESETS = {"paper": PAPER, "desk": DESK}


def get_preset(preset):
    if isinstance(preset, NetPreset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise InvalidShape(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


class Module:
    """Owns one ParamStore; ``training`` selects batchnorm mode."""

    def __init__(self, seed):
        self.store = ParamStore()
        self.training = True
        self._rng = np.random.default_rng(seed)
        self.store.add_buffer("trained", 0.0)

    def _dense(self, name, fan_in, fan_out):
        # uniform Kaiming fan-in init
        bound = np.sqrt(6.0 / fan_in)
        self.store.add(f"{name}.W", self._rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        self.store.add(f"{name}.b", np.zeros(fan_out))

    def _bn(self, name, width):
        self.store.add(f"{name}.gamma", np.ones(width))
        self.store.add(f"{name}.beta", np.zeros(width))
        self.store.add_buffer(f"{name}.running_mean", np.zeros(width))
        self.store.add_buffer(f"{name}.running_var", np.ones(width))

    def _apply_dense(self, name, x):
        p = self.store.params
        if x.data.ndim == 3:
            return ad.pointwise_linear(x, p[f"{name}.W"], p[f"{name}.b"])
        return ad.linear(x, p[f"{name}.W"], p[f"{name}.b"])

    def _apply_bn(self, name, x):
        p, b = self.store.params, self.store.buffers
        return ad.batchnorm1d(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                              b[f"{name}.running_mean"], b[f"{name}.running_var"], train=self.training)

    def train(self):
        if self.store.frozen:
            raise InvalidState("cannot switch a frozen network to train mode")
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def freeze(self):
        self.store.freeze()
        self.training = False
        return self

    def unfreeze(self):
        self.store.unfreeze()
        return self

    @property
    def frozen(self):
        return self.store.frozen

    @property
    def trained(self):
        return bool(self.store.buffers["trained"])

    def mark_trained(self):
        self.store.buffers["trained"][...] = 1.0

    def save(self, path, include_optimizer=True):
        Path(path).write_bytes(self.store.to_bytes(include_optimizer))

    def load(self, path):
        ad.loads_checkpoint(Path(path).read_bytes(), self.store)
        return self


def _clouds(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class PointNetEncoder(Module):
    """Shared pointwise layers with BN+ReLU, then a global max pool."""

    def __init__(self, n_points, widths, seed=0):
        super().__init__(seed)
        self.n_points = n_points
        self.widths = tuple(widths)
        fan_in = 3
        for i, w in enumerate(self.widths):
            self._dense(f"conv{i}", fan_in, w)
            self._bn(f"bn{i}", w)
            fan_in = w
        self.out_dim = fan_in

    def __call__(self, clouds):
        """(B, N, 3) clouds -> (B, out_dim) features."""
        x = _clouds(clouds)
        if x.data.ndim != 3 or x.shape[1] != self.n_points or x.shape[2] != 3:
            raise InvalidShape(f"encoder expects (B, {self.n_points}, 3) clouds, got {x.shape}")
        h = ad.transpose(x, (0, 2, 1))
        for i in range(len(self.widths)):
            h = ad.relu(self._apply_bn(f"bn{i}", self._apply_dense(f"conv{i}", h)))
        return ad.maxpool_points(h)


class PointDecoder(Module):
    """MLP from a latent vector to N points; the output layer is linear."""

    def __init__(self, in_dim, n_points, widths, seed=0):
        super().__init__(seed)
        self.in_dim = in_dim
        self.n_points = n_points
        dims = (in_dim, *widths, n_points * 3)
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            self._dense(f"fc{i}", dims[i], dims[i + 1])

    def __call__(self, codes):
        h = _clouds(codes)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise InvalidShape(f"decoder expects (B, {self.in_dim}) codes, got {h.shape}")
        for i in range(self.n_layers):
            h = self._apply_dense(f"fc{i}", h)
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return ad.reshape(h, (h.shape[0], self.n_points, 3))


LOGVAR_INIT = np.log(1e-2)


def _small_posterior(store):
    # start near-deterministic (sigma ~ 0.1) so the decoder can use z from the first steps
    store.params["logvar.W"].data *= 0.1
    store.params["logvar.b"].data[...] = LOGVAR_INIT


class VAEEncoder(PointNetEncoder):
    """PointNet trunk with linear heads for the mean and log-variance of z.

    The mean head ends in a batchnorm without affine parameters, so over a
    batch the posterior means have zero mean and unit variance per
    dimension, the first two moments of the N(0, I) prior. This keeps the
    aggregate posterior centred and stops the means from collapsing to a
    constant under the KL pull.
    """

    def __init__(self, n_points, widths, z_dim, seed=0):
        super().__init__(n_points, widths, seed)
        self.z_dim = z_dim
        self._dense("mu", self.out_dim, z_dim)
        self._dense("logvar", self.out_dim, z_dim)
        self.store.add_buffer("mu_bn.running_mean", np.zeros(z_dim))
        self.store.add_buffer("mu_bn.running_var", np.ones(z_dim))
        _small_posterior(self.store)

    def __call__(self, clouds):
        h = super().__call__(clouds)
        b = self.store.buffers
        one, zero = Tensor(np.ones(self.z_dim)), Tensor(np.zeros(self.z_dim))
        mu = ad.batchnorm1d(self._apply_dense("mu", h), one, zero, b["mu_bn.running_mean"],
                            b["mu_bn.running_var"], train=self.training)
        return mu, self._apply_dense("logvar", h)

    def mode(self, clouds):
        """Posterior mean only; the deterministic mode vector."""
        return self(clouds)[0]


class LatentModeEncoder(Module):
    """Maps a latent shape code to (mu, logvar) of z; the implicit l2z mode encoder."""

    def __init__(self, x_dim, hidden, z_dim, seed=0):
        super().__init__(seed)
        self.x_dim, self.z_dim = x_dim, z_dim
        self._dense("fc0", x_dim, hidden)
        self._dense("mu", hidden, z_dim)
        self._dense("logvar", hidden, z_dim)
        _small_posterior(self.store)

    def __call__(self, codes):
        h = ad.leaky_relu(self._apply_dense("fc0", _clouds(codes)))
        return self._apply_dense("mu", h), self._apply_dense("logvar", h)


class MLP(Module):
    """FC+leaky-ReLU hidden layers followed by a linear output."""

    def __init__(self, in_dim, widths, out_dim, seed=0):
        super().__init__(seed)
        self.in_dim, self.out_dim = in_dim, out_dim
        dims = (in_dim, *widths, out_dim)
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            self._dense(f"fc{i}", dims[i], dims[i + 1])

    def __call__(self, x):
        h = _clouds(x)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise InvalidShape(f"expected (B, {self.in_dim}) input, got {h.shape}")
        for i in range(self.n_layers):
            h = self._apply_dense(f"fc{i}", h)
            if i < self.n_layers - 1:
                h = ad.leaky_relu(h)
        return h


class _CodeScaled(MLP):
    """MLP that sees AE codes through a fixed affine standardization.

    Max-pooled PointNet codes sit on a large positive offset with small
    spread across shapes; the GAN works on ``(x - mean) / scale`` instead.
    The statistics are buffers (identity until ``set_code_stats``) and are
    never trained.
    """

    def __init__(self, in_dim, widths, out_dim, x_dim, seed=0):
        super().__init__(in_dim, widths, out_dim, seed)
        self.store.add_buffer("code_mean", np.zeros(x_dim))
        self.store.add_buffer("code_scale", np.ones(x_dim))

    def set_code_stats(self, codes, floor=1e-3):
        codes = np.asarray(codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[1] != len(self.store.buffers["code_mean"]) or len(codes) < 2:
            raise InvalidShape("code statistics need an (S >= 2, |x|) array")
        self.store.buffers["code_mean"][...] = codes.mean(axis=0)
        self.store.buffers["code_scale"][...] = np.maximum(codes.std(axis=0), floor)

    def _standardize(self, x):
        b = self.store.buffers
        return (x - b["code_mean"]) * (1.0 / b["code_scale"])


class Generator(_CodeScaled):
    def __init__(self, x_dim, z_dim, widths, seed=0):
        super().__init__(x_dim + z_dim, widths, x_dim, x_dim, seed)
        self.x_dim, self.z_dim = x_dim, z_dim

    def __call__(self, x_p, z):
        x_p, z = _clouds(x_p), _clouds(z)
        if x_p.shape[-1] != self.x_dim or z.shape[-1] != self.z_dim:
            raise InvalidShape(f"generator expects codes of {self.x_dim} and z of {self.z_dim}")
        out = super().__call__(ad.concat([self._standardize(x_p), z]))
        b = self.store.buffers
        return out * b["code_scale"] + b["code_mean"]


class Discriminator(_CodeScaled):
    def __init__(self, x_dim, widths, seed=0):
        super().__init__(x_dim, widths, 1, x_dim, seed)

    def __call__(self, x):
        return ad.reshape(super().__call__(self._standardize(_clouds(x))), (-1,))


def reparameterize(mu, logvar, eps):
    """``mu + exp(logvar / 2) * eps`` with ``eps`` supplied by the caller."""
    return mu + ad.exp(ad.mul(logvar, 0.5)) * Tensor(eps)


class CompletionModel:
    """Bundle of the networks used at completion time.

    ``mode_encoder`` is the VAE encoder for the explicit model, or an
    implicit encoder for the l2z/pc2z variants.
    """

    def __init__(self, preset="desk", seed=0):
        self.preset = p = get_preset(preset)
        ss = np.random.SeedSequence(seed).spawn(6)
        seeds = [int(s.generate_state(1)[0]) for s in ss]
        self.ae_encoder = PointNetEncoder(p.n_points, p.encoder_widths, seeds[0])
        self.ae_decoder = PointDecoder(p.x_dim, p.n_points, p.decoder_widths, seeds[1])
        self.vae_encoder = VAEEncoder(p.n_points, p.encoder_widths, p.z_dim, seeds[2])
        self.vae_decoder = PointDecoder(p.z_dim, p.n_points, p.decoder_widths, seeds[3])
        self.generator = Generator(p.x_dim, p.z_dim, p.gan_widths, seeds[4])
        self.discriminator = Discriminator(p.x_dim, p.gan_widths, seeds[5])

    def networks(self):
        return {
            "ae_encoder": self.ae_encoder,
            "ae_decoder": self.ae_decoder,
            "vae_encoder": self.vae_encoder,
            "vae_decoder": self.vae_decoder,
            "generator": self.generator,
            "discriminator": self.discriminator,
        }

    # numpy-level convenience API, eval mode

    def encode_ae(self, clouds):
        clouds = np.asarray(clouds, dtype=np.float64)
        single = clouds.ndim == 2
        with _eval_mode(self.ae_encoder):
            out = self.ae_encoder(clouds[None] if single else clouds).data
        return out[0] if single else out

    def decode_ae(self, codes):
        codes = np.asarray(codes, dtype=np.float64)
        single = codes.ndim == 1
        out = self.ae_decoder(codes[None] if single else codes).data
        return out[0] if single else out

    def encode_vae(self, clouds):
        clouds = np.asarray(clouds, dtype=np.float64)
        single = clouds.ndim == 2
        with _eval_mode(self.vae_encoder):
            mu, logvar = self.vae_encoder(clouds[None] if single else clouds)
        if single:
            return mu.data[0], logvar.data[0]
        return mu.data, logvar.data

    def mode_encode(self, clouds):
        """Deterministic mode vector: the VAE posterior mean."""
        if not self.vae_encoder.trained:
            raise InvalidState("mode encoder is not trained")
        return self.encode_vae(clouds)[0]

    def generate(self, x_p, z):
        x_p, z = np.asarray(x_p, dtype=np.float64), np.asarray(z, dtype=np.float64)
        single = x_p.ndim == 1
        out = self.generator(np.atleast_2d(x_p), np.atleast_2d(z)).data
        return out[0] if single else out

    def discriminate(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = self.discriminator(np.atleast_2d(x)).data
        return float(out[0]) if x.ndim == 1 else out


class _eval_mode:
    def __init__(self, module):
        self.module = module

    def __enter__(self):
        self.prev = self.module.training
        self.module.training = False

    def __exit__(self, *exc):
        self.module.training = self.prev
