"""Completion inference and the MMD / TMD / UHD evaluation protocol."""
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .data import duplicate_to_n, remove_parts
from .errors import InvalidInput, InvalidState

SCALES = {"mmd": 1e3, "tmd": 1e2, "uhd": 1e2}
METRICS = tuple(SCALES)


@dataclass
class CompletionSet:
    partial_id: str
    completions: list  # [(N, 3) arrays]
    z: np.ndarray  # (k, |z|) mode vectors used, one per completion

    def __post_init__(self):
        if len(self.completions) < 1:
            raise InvalidInput("a completion set needs at least one completion")
        sizes = {len(c) for c in self.completions}
        if len(sizes) != 1:
            raise InvalidInput("all completions must share one cardinality")

    @property
    def k(self):
        return len(self.completions)


def _require_trained(model):
    for name in ("ae_encoder", "ae_decoder", "generator"):
        if not getattr(model, name).trained:
            raise InvalidState(f"{name} has no trained weights")


def _complete_from_z(model, partial, z):
    code = model.encode_ae(duplicate_to_n(partial, model.preset.n_points))
    codes = model.generate(np.repeat(code[None], len(z), axis=0), z)
    return model.decode_ae(codes)


def complete_k(model, partial, k, rng, partial_id=""):
    """``k`` completions of one partial cloud, each from a fresh z ~ N(0, I)."""
    _require_trained(model)
    if k < 1:
        raise InvalidInput("k must be at least 1")
    z = rng.standard_normal((k, model.preset.z_dim))
    return CompletionSet(partial_id, list(_complete_from_z(model, partial, z)), z)


def complete_with_z(model, partial, z, partial_id=""):
    _require_trained(model)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return CompletionSet(partial_id, list(_complete_from_z(model, partial, z)), z)


def complete_with_reference(model, partial, reference):
    """Completion whose mode vector is encoded from a reference complete shape."""
    _require_trained(model)
    z = model.mode_encode(reference)
    return _complete_from_z(model, partial, z[None])[0]


def _map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def mmd(test_complete, generated, threads=None):
    """Mean over test shapes of the Chamfer distance to their nearest generated shape."""
    if len(test_complete) == 0 or len(generated) == 0:
        raise InvalidInput("MMD needs non-empty test and generated sets")

    def nearest_cd(s):
        return min(geometry.chamfer(s, g) for g in generated)

    return float(np.mean(_map(nearest_cd, list(test_complete), threads)))


def tmd(cs):
    """Sum over completions of their mean Chamfer distance to the other k-1 completions."""
    comps = cs.completions if isinstance(cs, CompletionSet) else list(cs)
    k = len(comps)
    if k < 1:
        raise InvalidInput("TMD needs at least one completion")
    if k == 1:
        return 0.0
    pair = np.zeros((k, k))
    for j in range(k):
        for l in range(j + 1, k):
            pair[j, l] = pair[l, j] = geometry.chamfer(comps[j], comps[l])
    return float(np.sum(pair.sum(axis=1) / (k - 1)))


def uhd(partial, cs):
    """Mean unidirectional Hausdorff distance from the partial to each completion."""
    comps = cs.completions if isinstance(cs, CompletionSet) else list(cs)
    if len(comps) == 0:
        raise InvalidInput("UHD needs at least one completion")
    return float(np.mean([geometry.hausdorff_uni(partial, c) for c in comps]))


def tmd_mean(sets, threads=None):
    return float(np.mean(_map(tmd, list(sets), threads)))


def uhd_mean(partials, sets, threads=None):
    return float(np.mean(_map(lambda pc: uhd(*pc), list(zip(partials, sets)), threads)))


@dataclass
class EvalReport:
    mmd: float = float("nan")
    tmd: float = float("nan")
    uhd: float = float("nan")
    per_shape: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def scaled(self, name):
        return getattr(self, name) * SCALES[name]

    @property
    def fingerprint(self):
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def rows(self, metrics=METRICS):
        return [(m, getattr(self, m), self.scaled(m), SCALES[m]) for m in metrics]

    def to_json(self, metrics=METRICS):
        out = {"config": self.config, "fingerprint": self.fingerprint, "metrics": {}}
        for name, raw, scaled, factor in self.rows(metrics):
            out["metrics"][name] = {"raw": raw, "scaled": scaled, "scale": factor}
        out["per_shape"] = self.per_shape
        return json.dumps(out, indent=2, sort_keys=True) + "\n"

    def to_csv(self, metrics=METRICS):
        lines = ["metric,raw,scaled,scale"]
        lines += [f"{n},{raw!r},{scaled!r},{factor:g}" for n, raw, scaled, factor in self.rows(metrics)]
        return "\n".join(lines) + "\n"


def evaluate(model, partials, test_complete, k=10, rng=None, partial_ids=None, metrics=METRICS,
             threads=None, config=None):
    """Complete every partial ``k`` times and compute the requested metrics."""
    rng = np.random.default_rng(0) if rng is None else rng
    ids = partial_ids or [str(i) for i in range(len(partials))]
    # z draws stay sequential so results do not depend on the thread count
    sets = [complete_k(model, p, k, rng, pid) for p, pid in zip(partials, ids)]
    report = EvalReport(config=dict(config or {}, k=k))
    if "tmd" in metrics:
        per = _map(tmd, sets, threads)
        report.tmd = float(np.mean(per))
        report.per_shape["tmd"] = dict(zip(ids, per))
    if "uhd" in metrics:
        per = _map(lambda pc: uhd(*pc), list(zip(partials, sets)), threads)
        report.uhd = float(np.mean(per))
        report.per_shape["uhd"] = dict(zip(ids, per))
    if "mmd" in metrics:
        generated = [c for s in sets for c in s.completions]
        report.mmd = mmd(test_complete, generated, threads)
    return report, sets


class KnnLatent:
    """Retrieval baseline: the k training shapes whose AE codes are most cosine-similar."""

    def __init__(self, model, pool_clouds):
        self.model = model
        self.pool = np.asarray(pool_clouds, dtype=np.float64)
        self.codes = np.stack([model.encode_ae(c) for c in self.pool])

    def query(self, partial, k):
        if k > len(self.pool):
            raise InvalidInput(f"pool of {len(self.pool)} shapes is smaller than k={k}")
        code = self.model.encode_ae(duplicate_to_n(partial, self.model.preset.n_points))
        sims = cosine_similarity(self.codes, code)
        order = np.argsort(-sims, kind="stable")[:k]
        return [self.pool[i] for i in order]


def cosine_similarity(codes, code):
    num = codes @ code
    den = np.linalg.norm(codes, axis=1) * np.linalg.norm(code)
    return num / np.where(den == 0, 1.0, den)


# ---- experiment drivers

def completion_codes(model, partial, z):
    """Latent codes ``G(E_AE(P), z)`` behind each completion; one row per z."""
    code = model.encode_ae(duplicate_to_n(partial, model.preset.n_points))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return model.generate(np.repeat(code[None], len(z), axis=0), z)


def write_latents(path, blocks):
    """Write ``[(partial_id, (k, d) array)]`` as text: a ``# partial`` line, then one vector per line."""
    with open(path, "w") as f:
        for pid, codes in blocks:
            f.write(f"# partial {pid}\n")
            for row in np.atleast_2d(codes):
                f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def read_latents(path):
    blocks, rows, pid = [], [], None
    with open(path) as f:
        for line in f:
            if line.startswith("# partial "):
                if pid is not None:
                    blocks.append((pid, np.array(rows)))
                pid, rows = line[len("# partial "):].strip(), []
            elif line.strip():
                rows.append([float(v) for v in line.split()])
    if pid is not None:
        blocks.append((pid, np.array(rows)))
    return blocks


def sweep_beta(model, partials, completes, betas, cfg, test_partials, k=10, seed=0, epochs=None,
               latent_dir=None, threads=None):
    """Train one GAN per latent-loss weight and report diversity and fidelity.

    ``model`` must carry frozen, trained AE and mode-encoder networks; every
    beta starts from the same generator/discriminator initialization and the
    same data, sampler and z streams. Returns rows ``(beta, tmd, uhd)``; with
    ``latent_dir`` the completion codes are written to ``latents_beta{beta}.txt``.
    """
    from . import networks as nw
    from . import training as tr

    if len(betas) < 2:
        raise InvalidInput("a beta sweep needs at least two values")
    p = model.preset
    ids = [str(i) for i in range(len(test_partials))]
    rows = []
    for beta in betas:
        model.generator = nw.Generator(p.x_dim, p.z_dim, p.gan_widths, seed)
        model.discriminator = nw.Discriminator(p.x_dim, p.gan_widths, seed + 1)
        setup = tr.GanSetup(model.ae_encoder, model.ae_decoder, model.vae_encoder,
                            model.generator, model.discriminator)
        tr.train_gan(setup, partials, completes, cfg.with_(beta=float(beta), seed=seed), epochs=epochs)
        rng = np.random.default_rng(seed)
        sets = [complete_k(model, q, k, rng, pid) for q, pid in zip(test_partials, ids)]
        rows.append((float(beta), tmd_mean(sets, threads), uhd_mean(test_partials, sets, threads)))
        if latent_dir is not None:
            blocks = [(s.partial_id, completion_codes(model, q, s.z)) for q, s in zip(test_partials, sets)]
            write_latents(f"{latent_dir}/latents_beta{float(beta):g}.txt", blocks)
    return rows


def sweep_incompleteness(model, shapes, js, k=10, rng=None, threads=None):
    """Mean TMD of completions of partials with exactly ``j`` parts removed, for each ``j``.

    Every shape is cut once per ``j``; returns rows ``(j, tmd)`` in the order of ``js``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    js = [int(j) for j in js]
    if not js or min(js) < 1:
        raise InvalidInput("at least one part must be removed (j >= 1)")
    for s in shapes:
        if len(s.parts) <= max(js):
            raise InvalidInput(f"a {len(s.parts)}-part shape cannot lose {max(js)} parts")
    rows = []
    for j in js:
        partials = [remove_parts(s, rng, model.preset.n_partial, n_removed=j)[0] for s in shapes]
        sets = [complete_k(model, q, k, rng) for q in partials]
        rows.append((j, tmd_mean(sets, threads)))
    return rows
