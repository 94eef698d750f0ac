"""Training loops: point-set autoencoder, VAE mode encoder and the conditional latent GAN.

The GAN works entirely on latent codes of a frozen autoencoder. Partial and
complete sets are unpaired; each is shuffled by its own sampler call.
"""
import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, Tensor
from .data import duplicate_to_n
from .errors import Diagnostic, InvalidInput, InvalidState
from .networks import LatentModeEncoder, VAEEncoder, reparameterize

GAN_COLUMNS = ("epoch", "L_F", "L_G", "L_recon", "L_latent", "total", "seconds")
VARIANT_COLUMNS = ("epoch", "L_F", "L_G", "L_recon", "L_latent", "L_KL", "total", "seconds")
AE_COLUMNS = ("epoch", "L_EMD", "seconds")
VAE_COLUMNS = ("epoch", "L_EMD", "L_KL", "total", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 6.0
    beta: float = 7.5
    gamma: float = 1.0
    lr: float = 5e-4
    beta1_ae: float = 0.9
    beta1_gan: float = 0.5
    kl_weight: float = 1e-2
    epochs_ae: int = 2000
    epochs_gan: int = 1000
    batch_ae: int = 200
    batch_gan: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "kl_weight"):
            if getattr(self, name) < 0:
                raise InvalidInput(f"{name} must be non-negative")
        if self.batch_ae < 2 or self.batch_gan < 1:
            raise InvalidInput("batch sizes must be at least 2 (AE) and 1 (GAN)")

    def with_(self, **kw):
        return replace(self, **kw)


PAPER_CONFIG = TrainConfig()
DESK_CONFIG = TrainConfig(epochs_ae=500, epochs_gan=200, batch_ae=10, batch_gan=16)


@dataclass
class TrainLog:
    columns: tuple
    rows: list = field(default_factory=list)

    def append(self, **values):
        row = {c: values[c] for c in self.columns}
        if any(not np.isfinite(v) for k, v in row.items() if k != "epoch"):
            raise Diagnostic(f"non-finite loss at epoch {row['epoch']}: {row}")
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise InvalidInput("epoch indices must increase")
        self.rows.append(row)

    @property
    def last_epoch(self):
        return self.rows[-1]["epoch"] if self.rows else 0

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.columns[1:]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.reader(f)
            cols = tuple(next(reader))
            log = cls(cols)
            for rec in reader:
                log.rows.append({"epoch": int(rec[0]), **{c: float(v) for c, v in zip(cols[1:], rec[1:])}})
        return log


class Sampler:
    """Draws one shuffle per named dataset per epoch.

    Partial and complete sets are always shuffled by separate calls, so no
    index is ever shared between them.
    """

    def __init__(self, rng):
        self.rng = rng

    def permutation(self, name, n):
        return self.rng.permutation(n)


def _batches(n, batch):
    starts = list(range(0, n, batch))
    if len(starts) > 1 and n - starts[-1] == 1:
        # a lone trailing sample would break train-mode batchnorm; fold it in
        starts.pop()
    return [slice(s, starts[i + 1] if i + 1 < len(starts) else n) for i, s in enumerate(starts)]


def _as_clouds(clouds, name):
    arr = np.asarray(clouds, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[2] != 3:
        raise InvalidInput(f"{name}: expected a non-empty (S, N, 3) array, got shape {arr.shape}")
    return arr


def kl_divergence(mu, logvar):
    """Mean over the batch of KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions."""
    term = 1.0 + logvar - ad.square(mu) - ad.exp(logvar)
    return ad.mul(ad.total(term), -0.5 / mu.shape[0])


def train_autoencoder(encoder, decoder, clouds, cfg, log=None, epochs=None, on_epoch=None, rng=None):
    """Minimise mean EMD between clouds and their reconstructions.

    Trains ``encoder``/``decoder`` in place and returns the TrainLog. With
    ``log`` given, epoch numbering continues from it.
    """
    clouds = _as_clouds(clouds, "complete set")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    log = TrainLog(AE_COLUMNS) if log is None else log
    adam = AdamConfig(lr=cfg.lr, beta1=cfg.beta1_ae)
    encoder.train()
    decoder.train()
    epochs = cfg.epochs_ae if epochs is None else epochs
    for epoch in range(log.last_epoch + 1, log.last_epoch + epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(len(clouds))
        total = 0.0
        for sl in _batches(len(clouds), cfg.batch_ae):
            batch = clouds[perm[sl]]
            loss = ad.emd_loss(decoder(encoder(batch)), batch)
            loss.backward()
            ad.adam_step(encoder.store, adam)
            ad.adam_step(decoder.store, adam)
            total += loss.item() * len(batch)
        log.append(epoch=epoch, L_EMD=total / len(clouds), seconds=time.perf_counter() - t0)
        if on_epoch:
            on_epoch(epoch, log)
    encoder.mark_trained()
    decoder.mark_trained()
    encoder.eval()
    return log


def train_vae(encoder, decoder, clouds, cfg, log=None, epochs=None, on_epoch=None, rng=None):
    """EMD reconstruction of reparameterised samples plus ``kl_weight`` times the KL term."""
    clouds = _as_clouds(clouds, "complete set")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    log = TrainLog(VAE_COLUMNS) if log is None else log
    adam = AdamConfig(lr=cfg.lr, beta1=cfg.beta1_ae)
    encoder.train()
    decoder.train()
    epochs = cfg.epochs_ae if epochs is None else epochs
    for epoch in range(log.last_epoch + 1, log.last_epoch + epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(len(clouds))
        sums = np.zeros(2)
        for sl in _batches(len(clouds), cfg.batch_ae):
            batch = clouds[perm[sl]]
            mu, logvar = encoder(batch)
            z = reparameterize(mu, logvar, rng.standard_normal(mu.shape))
            rec = ad.emd_loss(decoder(z), batch)
            kl = kl_divergence(mu, logvar)
            loss = rec + ad.mul(kl, cfg.kl_weight)
            loss.backward()
            ad.adam_step(encoder.store, adam)
            ad.adam_step(decoder.store, adam)
            sums += np.array([rec.item(), kl.item()]) * len(batch)
        rec_e, kl_e = sums / len(clouds)
        log.append(epoch=epoch, L_EMD=rec_e, L_KL=kl_e, total=rec_e + cfg.kl_weight * kl_e,
                   seconds=time.perf_counter() - t0)
        if on_epoch:
            on_epoch(epoch, log)
    encoder.mark_trained()
    decoder.mark_trained()
    encoder.eval()
    return log


def lsgan_losses(real_scores, fake_scores):
    """Least-squares GAN objectives ``(L_F, L_G)`` as Tensors."""
    real = real_scores if isinstance(real_scores, Tensor) else Tensor(real_scores)
    fake = fake_scores if isinstance(fake_scores, Tensor) else Tensor(fake_scores)
    loss_f = ad.mean(ad.square(real - 1.0)) + ad.mean(ad.square(fake))
    loss_g = ad.mean(ad.square(fake - 1.0))
    return loss_f, loss_g


def partial_recon_loss(partials, completions):
    """Mean unidirectional Hausdorff distance from each partial to its completion."""
    return ad.hausdorff_loss(partials, completions)


def latent_recon_loss(z, z_rec):
    """Mean absolute error between the sampled and the recovered mode vectors."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    return ad.mean(ad.absolute(z - z_rec))


def encode_partials(encoder, partials, n_points):
    """Latent codes of partial clouds duplicated up to ``n_points``."""
    dup = np.stack([duplicate_to_n(p, n_points) for p in partials])
    return encode_batched(encoder, dup)


def encode_batched(encoder, clouds, batch=64):
    prev = encoder.training
    encoder.training = False
    try:
        return np.concatenate([encoder(clouds[sl]).data for sl in _batches(len(clouds), batch)])
    finally:
        encoder.training = prev


@dataclass
class GanSetup:
    """Frozen and trainable pieces of one GAN run.

    ``variant`` is "explicit" (frozen VAE mode encoder), "l2z" (trainable
    code-to-z encoder) or "pc2z" (trainable cloud-to-z encoder).
    """

    ae_encoder: object
    ae_decoder: object
    mode_encoder: object
    generator: object
    discriminator: object
    variant: str = "explicit"

    @property
    def trains_mode_encoder(self):
        return self.variant in ("l2z", "pc2z") and not self.mode_encoder.frozen


def generator_objective(setup, x_p, partials, z, cfg, x_c=None, c_clouds=None):
    """All loss terms of one generator step; returns ``(total, terms)``.

    ``x_c``/``c_clouds`` are the complete codes/clouds the KL term of the
    implicit variants is evaluated on.
    """
    fake = setup.generator(x_p, z)
    _, loss_g = lsgan_losses(Tensor(np.zeros(1)), setup.discriminator(fake))
    decoded = setup.ae_decoder(fake)
    recon = partial_recon_loss(partials, decoded)
    if setup.variant == "l2z":
        z_rec, _ = setup.mode_encoder(fake)
    else:
        z_rec = setup.mode_encoder.mode(decoded)
    latent = latent_recon_loss(z, z_rec)
    objective = loss_g + ad.mul(recon, cfg.alpha) + ad.mul(latent, cfg.beta)
    terms = {"L_G": loss_g.item(), "L_recon": recon.item(), "L_latent": latent.item()}
    if setup.variant in ("l2z", "pc2z"):
        if setup.variant == "l2z":
            mu, logvar = setup.mode_encoder(x_c if isinstance(x_c, Tensor) else Tensor(x_c))
        else:
            mu, logvar = setup.mode_encoder(c_clouds)
        kl = kl_divergence(mu, logvar)
        objective = objective + ad.mul(kl, cfg.gamma)
        terms["L_KL"] = kl.item()
    terms["total"] = objective.item()
    return objective, terms


def discriminator_objective(setup, x_c, fake_codes):
    loss_f, _ = lsgan_losses(setup.discriminator(Tensor(x_c)), setup.discriminator(Tensor(fake_codes)))
    return loss_f


def train_gan(setup, partials, completes, cfg, log=None, epochs=None, sampler=None, rng=None,
              on_epoch=None):
    """Alternate one discriminator step and one generator step per batch.

    ``partials`` is a list of (K, 3) clouds, ``completes`` an (S, N, 3) array;
    the two sets carry no correspondence. Returns the TrainLog.
    """
    completes = _as_clouds(completes, "complete set")
    partials = [np.asarray(p, dtype=np.float64) for p in partials]
    if not partials:
        raise InvalidInput("partial set is empty")
    for name in ("ae_encoder", "ae_decoder"):
        if not getattr(setup, name).frozen:
            raise InvalidState(f"{name} must be frozen before GAN training")
    if setup.variant == "explicit" and not setup.mode_encoder.frozen:
        raise InvalidState("the explicit mode encoder must be frozen before GAN training")
    if setup.variant not in ("explicit", "l2z", "pc2z"):
        raise InvalidInput(f"unknown GAN variant {setup.variant!r}")
    if setup.variant == "l2z" and not isinstance(setup.mode_encoder, LatentModeEncoder):
        raise InvalidInput("l2z needs a LatentModeEncoder")
    if setup.variant == "pc2z" and not isinstance(setup.mode_encoder, VAEEncoder):
        raise InvalidInput("pc2z needs a point-cloud mode encoder")

    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    sampler = Sampler(rng) if sampler is None else sampler
    implicit = setup.variant in ("l2z", "pc2z")
    log = TrainLog(VARIANT_COLUMNS if implicit else GAN_COLUMNS) if log is None else log
    adam = AdamConfig(lr=cfg.lr, beta1=cfg.beta1_gan)
    n_points = setup.ae_encoder.n_points
    x_p_all = encode_partials(setup.ae_encoder, partials, n_points)
    x_c_all = encode_batched(setup.ae_encoder, completes)
    if not log.rows and not setup.generator.trained:
        # fresh run: pin the code standardization to the complete training codes
        setup.generator.set_code_stats(x_c_all)
        setup.discriminator.set_code_stats(x_c_all)
    z_dim = setup.generator.z_dim
    setup.generator.train()
    setup.discriminator.train()
    if setup.trains_mode_encoder:
        setup.mode_encoder.train()
    n = min(len(partials), len(completes))
    epochs = cfg.epochs_gan if epochs is None else epochs
    for epoch in range(log.last_epoch + 1, log.last_epoch + epochs + 1):
        t0 = time.perf_counter()
        p_perm = sampler.permutation("partial", len(partials))[:n]
        c_perm = sampler.permutation("complete", len(completes))[:n]
        sums = {}
        for sl in _batches(n, cfg.batch_gan):
            p_idx, c_idx = p_perm[sl], c_perm[sl]
            x_p, x_c = x_p_all[p_idx], x_c_all[c_idx]
            z = rng.standard_normal((len(p_idx), z_dim))

            fake_codes = setup.generator(x_p, z).data
            loss_f = discriminator_objective(setup, x_c, fake_codes)
            loss_f.backward()
            ad.adam_step(setup.discriminator.store, adam)

            setup.discriminator.store.freeze()
            try:
                objective, terms = generator_objective(
                    setup, x_p, [partials[i] for i in p_idx], z, cfg,
                    x_c=x_c, c_clouds=completes[c_idx] if setup.variant == "pc2z" else None)
                objective.backward()
            finally:
                setup.discriminator.store.unfreeze()
            ad.adam_step(setup.generator.store, adam)
            if setup.trains_mode_encoder:
                ad.adam_step(setup.mode_encoder.store, adam)
            terms["L_F"] = loss_f.item()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(p_idx)
        means = {k: v / n for k, v in sums.items()}
        log.append(epoch=epoch, seconds=time.perf_counter() - t0, **means)
        if on_epoch:
            on_epoch(epoch, log)
    setup.generator.mark_trained()
    setup.discriminator.mark_trained()
    setup.generator.eval()
    setup.discriminator.eval()
    if setup.trains_mode_encoder:
        setup.mode_encoder.mark_trained()
        setup.mode_encoder.eval()
    return log


def config_dict(cfg):
    return asdict(cfg)


def save_log(log, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path)
