"""Command-line entry point: data generation, staged training, completion and evaluation.

Exit codes: 0 success, 1 runtime error, 2 validation or usage error,
3 missing prerequisite stage.

A run directory holds one sub-directory per training stage::

    RUN/run.json                     preset and seed shared by every stage
    RUN/ae/{encoder,decoder}.ckpt    point-set autoencoder
    RUN/vae/{encoder,decoder}.ckpt   explicit mode encoder
    RUN/gan*/generator.ckpt, discriminator.ckpt[, mode_encoder.ckpt]
    RUN/<stage>/log.csv, state.json  training log and resume state
"""
import argparse
import configparser
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dt
from . import evaluation as ev
from . import networks as nw
from . import training as tr
from .errors import (CapacityExceeded, DegenerateScan, Diagnostic, FormatError, InvalidInput,
                     InvalidShape, InvalidState)

ROOT_ENV = "MULTICOMP_ROOT"
STAGES = ("ae", "vae", "gan", "gan-l2z", "gan-pc2z")
GAN_STAGES = {"gan": "explicit", "gan-l2z": "l2z", "gan-pc2z": "pc2z"}
EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXIT_PREREQ = 0, 1, 2, 3

# config keys accepted in the [train] section, with their types
TRAIN_KEYS = {"alpha": float, "beta": float, "gamma": float, "lr": float, "kl_weight": float,
              "beta1_ae": float, "beta1_gan": float, "epochs_ae": int, "epochs_gan": int,
              "batch_ae": int, "batch_gan": int}
RUN_KEYS = {"preset": str, "seed": int, "protocol": str, "threads": int, "checkpoint_every": int}


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage, run):
        super().__init__(f"missing prerequisite: stage '{stage}' has not been trained in {run} "
                         f"(run 'multicomp train --stage {stage}' first)")
        self.stage = stage


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- paths and config

def out_path(path):
    """Relative output paths live under $MULTICOMP_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def read_config(path):
    """Parse the key-value config file into ``{"run": {...}, "train": {...}}``."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise FormatError(f"cannot read config: {exc}", path=path) from exc
    except configparser.Error as exc:
        raise FormatError(f"bad config syntax: {exc}", path=path) from exc
    out = {"run": {}, "train": {}}
    for section, keys in (("run", RUN_KEYS), ("train", TRAIN_KEYS)):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise FormatError(f"unknown key '{key}' in [{section}]", path=path)
            try:
                out[section][key] = keys[key](raw)
            except ValueError:
                raise FormatError(f"[{section}] {key}: cannot parse {raw!r}", path=path) from None
    unknown = set(parser.sections()) - {"run", "train"}
    if unknown:
        raise FormatError(f"unknown section(s) {sorted(unknown)}", path=path)
    return out


def resolve(args, manifest_preset=None, run_info=None):
    """Merge preset defaults, config file and flags (flags win) into (preset, TrainConfig, run opts)."""
    conf = read_config(args.config) if getattr(args, "config", None) else {"run": {}, "train": {}}
    run = dict(conf["run"])
    for key in RUN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    preset = run.get("preset") or (run_info or {}).get("preset") or manifest_preset or "desk"
    nw.get_preset(preset)
    if run_info and run_info["preset"] != preset:
        raise InvalidInput(f"run was created with preset {run_info['preset']!r}, not {preset!r}")
    run["preset"] = preset
    if "seed" not in run:
        run["seed"] = (run_info or {}).get("seed", 0)
    run.setdefault("protocol", "parts")
    run.setdefault("threads", os.cpu_count() or 1)
    run.setdefault("checkpoint_every", 0)
    base = tr.DESK_CONFIG if preset == "desk" else tr.PAPER_CONFIG
    over = dict(conf["train"])
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    cfg = base.with_(seed=run["seed"], **over)
    return preset, cfg, run


# ---------------------------------------------------------------- data access

def load_manifest(path):
    return dt.DatasetManifest.read(path)


def _check_points(clouds, n, what):
    for c in clouds:
        if len(c) != n:
            raise InvalidShape(f"{what}: expected {n} points per cloud, got {len(c)}")


def training_data(manifest, preset, protocol):
    p = nw.get_preset(preset)
    entries = manifest.split("train")
    if not entries:
        raise InvalidInput("manifest has no training entries")
    scan = protocol == "scan"
    completes = [manifest.load_complete(e, scan=scan and "complete_scan" in e) for e in entries]
    _check_points(completes, p.n_points, "complete clouds")
    partials = [c for e in entries for _, c in manifest.load_partials(e, protocol)]
    return np.stack(completes), partials


def split_test_data(manifest, protocol):
    entries = manifest.split("test")
    if not entries:
        raise InvalidInput("manifest has no test entries")
    ids, partials = [], []
    for e in entries:
        for meta, cloud in manifest.load_partials(e, protocol):
            ids.append(Path(meta["file"]).stem)
            partials.append(cloud)
    if not partials:
        raise InvalidInput(f"no test partials with protocol {protocol!r}")
    scan = protocol == "scan"
    completes = [manifest.load_complete(e, scan=scan and "complete_scan" in e) for e in entries]
    return entries, ids, partials, completes


# ---------------------------------------------------------------- run directory

def stage_dir(run, stage):
    return Path(run) / stage


def _nets(model, stage, mode_encoder=None):
    if stage == "ae":
        return {"encoder": model.ae_encoder, "decoder": model.ae_decoder}
    if stage == "vae":
        return {"encoder": model.vae_encoder, "decoder": model.vae_decoder}
    nets = {"generator": model.generator, "discriminator": model.discriminator}
    if mode_encoder is not None:
        nets["mode_encoder"] = mode_encoder
    return nets


def variant_encoder(preset, stage, seed):
    p = nw.get_preset(preset)
    s = int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])
    if stage == "gan-l2z":
        return nw.LatentModeEncoder(p.x_dim, p.gan_widths[0], p.z_dim, s)
    if stage == "gan-pc2z":
        return nw.VAEEncoder(p.n_points, p.encoder_widths, p.z_dim, s)
    return None


def is_trained(run, stage):
    d = stage_dir(run, stage)
    return (d / "state.json").is_file() and json.loads((d / "state.json").read_text()).get("done", False)


def load_stage(run, stage, model, mode_encoder=None):
    if not is_trained(run, stage):
        raise MissingPrerequisite(stage, run)
    for name, net in _nets(model, stage, mode_encoder).items():
        net.load(stage_dir(run, stage) / f"{name}.ckpt")
        net.eval()


def save_stage(run, stage, model, log, rng, done, mode_encoder=None):
    d = stage_dir(run, stage)
    d.mkdir(parents=True, exist_ok=True)
    for name, net in _nets(model, stage, mode_encoder).items():
        net.save(d / f"{name}.ckpt")
    tr.save_log(log, d / "log.csv")
    state = {"epoch": log.last_epoch, "done": done, "rng": rng.bit_generator.state}
    (d / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def read_run_info(run):
    f = Path(run) / "run.json"
    return json.loads(f.read_text()) if f.is_file() else None


def load_model(run, gan_stage=None):
    """CompletionModel with the AE (and optionally a GAN stage) loaded and frozen."""
    info = read_run_info(run)
    if info is None:
        raise MissingPrerequisite("ae", run)
    model = nw.CompletionModel(info["preset"], info["seed"])
    load_stage(run, "ae", model)
    model.ae_encoder.freeze()
    model.ae_decoder.freeze()
    mode_encoder = None
    if gan_stage is not None:
        if gan_stage == "gan" and is_trained(run, "vae"):
            load_stage(run, "vae", model)
        mode_encoder = variant_encoder(info["preset"], gan_stage, info["seed"])
        load_stage(run, gan_stage, model, mode_encoder)
    return model, info, mode_encoder


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    p = nw.get_preset(args.preset)
    if args.count < 1:
        raise InvalidInput("--count must be at least 1")
    out = out_path(args.out)
    cats = list(dt.CATEGORIES) if args.category == "all" else None
    m = dt.generate_dataset(out, args.category, args.count, args.seed, args.protocol,
                            p.n_points, p.n_partial, p.name, args.n_views, args.scans_per_partial,
                            categories=cats)
    n_train = len(m.split("train"))
    n_partials = sum(len(e["partials"]) for e in m.entries)
    print(f"wrote {len(m.entries)} entries ({n_train} train, {len(m.entries) - n_train} test), "
          f"{n_partials} partials to {out / 'manifest.json'}")


def cmd_train(args):
    manifest = load_manifest(args.data)
    run = out_path(args.run)
    info = read_run_info(run)
    preset, cfg, opts = resolve(args, manifest.preset, info)
    if info is None:
        run.mkdir(parents=True, exist_ok=True)
        info = {"preset": preset, "seed": cfg.seed}
        (run / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    stage = args.stage
    model = nw.CompletionModel(preset, info["seed"])
    mode_encoder = variant_encoder(preset, stage, info["seed"])
    if stage in GAN_STAGES:
        load_stage(run, "ae", model)
        model.ae_encoder.freeze()
        model.ae_decoder.freeze()
        if stage == "gan":
            load_stage(run, "vae", model)
            model.vae_encoder.freeze()
            mode_encoder = model.vae_encoder

    completes, partials = training_data(manifest, preset, opts["protocol"])
    rng = np.random.default_rng(cfg.seed)
    log = None
    d = stage_dir(run, stage)
    if args.resume:
        if not (d / "state.json").is_file():
            raise MissingPrerequisite(stage, run)
        state = json.loads((d / "state.json").read_text())
        for name, net in _nets(model, stage, None if stage == "gan" else mode_encoder).items():
            net.load(d / f"{name}.ckpt")
        log = tr.TrainLog.from_csv(d / "log.csv")
        if log.last_epoch != state["epoch"]:
            raise FormatError(f"log ends at epoch {log.last_epoch}, state at {state['epoch']}", path=d)
        rng.bit_generator.state = state["rng"]

    total = cfg.epochs_gan if stage in GAN_STAGES else cfg.epochs_ae
    total = args.epochs if args.epochs is not None else total
    remaining = total - (log.last_epoch if log else 0)
    if remaining < 0:
        raise InvalidInput(f"stage already has {log.last_epoch} epochs, more than --epochs {total}")
    own = None if stage == "gan" else mode_encoder

    def checkpoint(epoch, lg):
        if opts["checkpoint_every"] and epoch % opts["checkpoint_every"] == 0 and epoch < total:
            save_stage(run, stage, model, lg, rng, False, own)

    if stage == "ae":
        log = tr.train_autoencoder(model.ae_encoder, model.ae_decoder, completes, cfg, log,
                                   remaining, checkpoint, rng)
    elif stage == "vae":
        log = tr.train_vae(model.vae_encoder, model.vae_decoder, completes, cfg, log, remaining,
                           checkpoint, rng)
    else:
        if not partials:
            raise InvalidInput(f"no training partials with protocol {opts['protocol']!r}")
        _check_points(partials, nw.get_preset(preset).n_partial, "partial clouds")
        setup = tr.GanSetup(model.ae_encoder, model.ae_decoder, mode_encoder, model.generator,
                            model.discriminator, GAN_STAGES[stage])
        log = tr.train_gan(setup, partials, completes, cfg, log, remaining, rng=rng,
                           on_epoch=checkpoint)
    if not log.rows:
        raise InvalidInput("no epochs were run")
    for net in _nets(model, stage, own).values():
        net.mark_trained()
    save_stage(run, stage, model, log, rng, True, own)
    last = log.rows[-1]
    summary = ", ".join(f"{k}={v:.6g}" for k, v in last.items() if k not in ("epoch", "seconds"))
    print(f"stage {stage}: epoch {last['epoch']}, {summary}; checkpoints in {stage_dir(run, stage)}")


def _reference_z(model, stage, mode_encoder, reference):
    if stage == "gan":
        if not model.vae_encoder.trained:
            raise MissingPrerequisite("vae", "run")
        return model.mode_encode(reference)
    if stage == "gan-l2z":
        mu, _ = mode_encoder(model.encode_ae(reference)[None])
        return mu.data[0]
    return mode_encoder.mode(np.asarray(reference)[None]).data[0]


def cmd_complete(args):
    if args.reference is not None and args.k is not None and args.k > 1:
        raise UsageError("--k > 1 cannot be combined with --reference")
    k = 1 if args.k is None else args.k
    if k < 1:
        raise InvalidInput("--k must be at least 1")
    run = out_path(args.run)
    model, info, mode_encoder = load_model(run, args.stage)
    partial = dt.read_cloud(args.input)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    if args.reference is not None:
        reference = dt.read_cloud(args.reference)
        _check_points([reference], model.preset.n_points, "reference cloud")
        z = _reference_z(model, args.stage, mode_encoder, reference)
        cs = ev.complete_with_z(model, partial, z, stem)
        names = [f"{stem}_ref.xyz"]
    else:
        seed = info["seed"] if args.seed is None else args.seed
        cs = ev.complete_k(model, partial, k, np.random.default_rng(seed), stem)
        names = [f"{stem}_{i:02d}.xyz" for i in range(k)]
    for name, cloud, z in zip(names, cs.completions, cs.z):
        dt.write_cloud(out / name, cloud, header=["z: " + " ".join(f"{v:.9g}" for v in z)])
    print(f"wrote {len(names)} completion(s) of {args.input} to {out}")


def _parse_list(text, kind, flag):
    try:
        vals = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: cannot parse {text!r}") from None
    if not vals:
        raise UsageError(f"{flag}: empty list")
    return vals


def parse_metrics(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in ev.METRICS]
    if bad or not names:
        raise UsageError(f"unknown metric(s) {bad or [text]}; valid names: {', '.join(ev.METRICS)}")
    return tuple(dict.fromkeys(names))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def cmd_eval(args):
    metrics = parse_metrics(args.metrics)
    if args.k < 1:
        raise InvalidInput("--k must be at least 1")
    manifest = load_manifest(args.manifest)
    run = out_path(args.run)
    info = read_run_info(run)
    if info is None:
        raise MissingPrerequisite("ae", run)
    preset, cfg, opts = resolve(args, manifest.preset, info)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = opts["threads"]
    entries, ids, partials, completes = split_test_data(manifest, opts["protocol"])

    if args.sweep == "beta":
        betas = _parse_list(args.betas, float, "--betas")
        if len(betas) < 2:
            raise UsageError("--betas needs at least two values")
        model, _, _ = load_model(run)
        load_stage(run, "vae", model)
        model.vae_encoder.freeze()
        train_completes, train_partials = training_data(manifest, preset, opts["protocol"])
        rows = ev.sweep_beta(model, train_partials, train_completes, betas, cfg, partials, args.k,
                             cfg.seed, args.epochs, out, threads)
        _write_rows(out / "sweep_beta.csv", ("beta", "tmd", "tmd_scaled", "uhd", "uhd_scaled"),
                    [(b, t, t * ev.SCALES["tmd"], u, u * ev.SCALES["uhd"]) for b, t, u in rows])
        for b, t, u in rows:
            print(f"beta={b:g}: TMD x1e2 = {t * 1e2:.4f}, UHD x1e2 = {u * 1e2:.4f}")
        return

    model, _, _ = load_model(run, args.stage)
    rng = np.random.default_rng(cfg.seed)
    if args.sweep == "incompleteness":
        js = _parse_list(args.js, int, "--js")
        shapes = [dt.read_shape(manifest.root / e["complete"]) for e in entries]
        rows = ev.sweep_incompleteness(model, shapes, js, args.k, rng, threads)
        _write_rows(out / "sweep_incompleteness.csv", ("j", "tmd", "tmd_scaled"),
                    [(j, t, t * ev.SCALES["tmd"]) for j, t in rows])
        for j, t in rows:
            print(f"j={j}: TMD x1e2 = {t * 1e2:.4f}")
        return

    config = {"run": str(args.run), "stage": args.stage, "manifest": str(args.manifest),
              "seed": cfg.seed, "protocol": opts["protocol"], "preset": preset}
    report, _ = ev.evaluate(model, partials, completes, args.k, rng, ids, metrics, threads, config)
    (out / "report.json").write_text(report.to_json(metrics))
    (out / "report.csv").write_text(report.to_csv(metrics))
    for name, raw, scaled, factor in report.rows(metrics):
        print(f"{name}: {raw:.6g} (x{factor:g} = {scaled:.4f})")


# ---------------------------------------------------------------- parser

def _add_run_flags(p):
    p.add_argument("--config", help="key-value config file ([run] and [train] sections)")
    p.add_argument("--preset", choices=sorted(nw.PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--protocol", choices=("parts", "scan"), help="which partials to use")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")


def build_parser():
    parser = argparse.ArgumentParser(prog="multicomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset and manifest")
    g.add_argument("--category", default="table", choices=(*dt.CATEGORIES, "all"))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--protocol", default="parts", choices=("parts", "scan", "both"))
    g.add_argument("--preset", default="desk", choices=sorted(nw.PRESETS))
    g.add_argument("--n-views", type=int, default=6, help="views merged into each complete scan")
    g.add_argument("--scans-per-partial", type=int, default=1)
    g.set_defaults(parser=g, func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--run", required=True, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the stage's last checkpoint")
    t.add_argument("--epochs", type=int, help="total epochs for the stage")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    _add_run_flags(t)
    for key, kind in TRAIN_KEYS.items():
        if not key.startswith("epochs"):
            t.add_argument("--" + key.replace("_", "-"), dest=key, type=kind)
    t.set_defaults(parser=t, func=cmd_train)

    c = sub.add_parser("complete", help="complete one partial cloud")
    c.add_argument("--run", required=True)
    c.add_argument("--stage", default="gan", choices=tuple(GAN_STAGES))
    c.add_argument("--input", required=True, help="partial cloud (XYZ)")
    c.add_argument("--k", type=int, help="number of completions (default 1)")
    c.add_argument("--reference", help="complete cloud whose mode to copy")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(parser=c, func=cmd_complete)

    e = sub.add_parser("eval", help="evaluate a trained model on the test split")
    e.add_argument("--run", required=True)
    e.add_argument("--stage", default="gan", choices=tuple(GAN_STAGES))
    e.add_argument("--manifest", required=True)
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--metrics", default=",".join(ev.METRICS))
    e.add_argument("--sweep", choices=("beta", "incompleteness"))
    e.add_argument("--betas", default="0,1,7.5,15")
    e.add_argument("--js", default="1,2,3", help="numbers of removed parts")
    e.add_argument("--epochs", type=int, help="GAN epochs per beta in a beta sweep")
    e.add_argument("--out", required=True)
    _add_run_flags(e)
    for key, kind in TRAIN_KEYS.items():
        if not key.startswith("epochs") and key != "beta":
            e.add_argument("--" + key.replace("_", "-"), dest=key, type=kind)
    e.set_defaults(parser=e, func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        args.parser.error(str(exc))
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (InvalidInput, InvalidShape, FormatError, CapacityExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (Diagnostic, InvalidState, DegenerateScan, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
