"""Command-line entry point: ``permtensor <command> [options]``.

Commands: gen-data, characterize, train, evaluate, predict, augment-preview.
Reports are deterministic for a fixed configuration and seed; wall-clock
information goes to a separate ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import augment
from .config import ConfigError, load_config
from .dataset import generate_dataset, load_dataset, save_dataset
from .evaluation import (BootConfig, UqConfig, anisotropy_stratified, bootstrap_table,
                         calibration, cross_split_stats, evaluate_predictions, mc_dropout,
                         population_stats, tta_predict)
from .evaluation.metrics import diag_r2, variance_weighted_r2
from .evaluation.population import geometry_stats
from .evaluation.reports import metrics_text, to_csv, to_json, write_json
from .model import load_checkpoint
from .tensor import PermTensor, spectrum, symmetry_error
from .training import run_phase

log = logging.getLogger("permtensor")


MIN_POPULATION = 30


class CliError(RuntimeError):
    pass


def _write_meta(out: Path, command: str, started: float) -> None:
    meta = {"command": command, "version": __version__, "python": platform.python_version(),
            "started_unix": started, "elapsed_s": time.time() - started}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


# ---------------------------------------------------------------- image input

def read_image(path) -> np.ndarray:
    """Binary raster from a raw file (8-byte header: width, height as uint32
    little-endian, then one byte per pixel row-major) or a binary PGM (P5).

    PGM pixels must be 0 or maxval (maxval means solid); raw pixels must be
    0 or 1.
    """
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        tokens, pos = [], 2
        while len(tokens) < 3:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
        pos += 1
        try:
            w, h, maxval = (int(t) for t in tokens)
        except ValueError:
            raise CliError(f"{path}: malformed PGM header") from None
        if maxval > 255:
            raise CliError(f"{path}: only 8-bit PGM is supported")
        pix = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
        if pix.size != w * h:
            raise CliError(f"{path}: PGM holds {pix.size} pixels, header says {w * h}")
        if not np.isin(pix, (0, maxval)).all():
            raise CliError(f"{path}: PGM is not binary (values other than 0 and {maxval})")
        return (pix == maxval).astype(np.uint8).reshape(h, w)
    if len(data) < 8:
        raise CliError(f"{path}: too short for a raw raster header")
    w, h = np.frombuffer(data[:8], dtype="<u4")
    pix = np.frombuffer(data[8:], dtype=np.uint8)
    if pix.size != int(w) * int(h):
        raise CliError(f"{path}: raw raster holds {pix.size} pixels, header says {w}x{h}")
    if not np.isin(pix, (0, 1)).all():
        raise CliError(f"{path}: raw raster must contain only 0 and 1")
    return pix.reshape(int(h), int(w)).copy()


def write_raw_image(img, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(np.array([w, h], dtype="<u4").tobytes() + img.tobytes())


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out or cfg.paths.data)
    seed = cfg.seeds.data if args.seed is None else args.seed
    n = args.n or cfg.data.n_samples
    gen = cfg.generator if args.size is None else replace(cfg.generator, size=args.size)
    ds = generate_dataset(n, seed, gen, cfg.lbm, splits=cfg.data.splits)
    save_dataset(ds, out)
    skipped = len(ds.manifest["skipped"])
    attempts = len(ds) + skipped
    summary = {"samples": len(ds), "requested": n, "skipped": skipped,
               "config_hash": ds.manifest["config_hash"], "out": str(out)}
    print(to_json(summary), end="")
    if len(ds) < n or skipped > cfg.data.max_skipped_fraction * attempts:
        log.error("generation fell short: %d of %d samples, %d skipped", len(ds), n, skipped)
        return 3
    return 0


def _characterize_split(ds) -> dict:
    if np.isnan(ds.labels).any():
        return {"geometry": geometry_stats(ds.images, ds.porosity), "labels": "missing"}
    if len(ds) < MIN_POPULATION:
        return {"geometry": geometry_stats(ds.images, ds.porosity),
                "labels": f"fewer than {MIN_POPULATION} samples"}
    rep = population_stats(ds.labels, ds.porosity, ds.images)
    rep["mahalanobis"].pop("outliers")
    return rep


def cmd_characterize(args, cfg) -> int:
    ds = load_dataset(args.data, check=False)
    report = {"dataset": str(args.data), "all": _characterize_split(ds)}
    splits = ds.manifest.get("splits") or {}
    if splits and not np.isnan(ds.labels).any() and len(ds) >= MIN_POPULATION:
        parts = {name: ds.split(name) for name in splits}
        report["splits"] = {name: _characterize_split(p) for name, p in parts.items()}
        report["cross_split"] = cross_split_stats({n: (p.labels, p.porosity) for n, p in parts.items()})
    out = Path(args.out or Path(args.data) / "characterization")
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "report.json")
    lines = [f"samples {len(ds)}, image {ds.image_size}x{ds.image_size}"]
    if "labels" in report["all"]:
        lines.append(f"labels {report['all']['labels']}: geometry-only report")
        g = report["all"]["geometry"]
    else:
        a = report["all"]
        lines += [f"porosity mean {a['porosity']['mean']:.4f} sd {a['porosity']['std']:.4f}",
                  f"diag mean {a['diag']['mean']:.4g}, offdiag sd {a['offdiag']['std']:.4g}",
                  f"symmetry error mean {a['symmetry_error']['mean']:.3g}",
                  f"PD fraction {a['pd_fraction']:.4f}",
                  f"power law C {a['phi_perm']['power_law']['C']:.4g} n {a['phi_perm']['power_law']['n']:.3f}"]
        g = a.get("geometry", {})
    if g:
        lines.append(f"chords h {g['chord_h_mean']:.3f} v {g['chord_v_mean']:.3f}")
    for row in report.get("cross_split", []):
        lines.append(f"{row['pair']:<18}{row['variable']:<5} KS {row['ks_stat']:.4f} "
                     f"p {row['p_value']:.3f} JSD {row['jsd']:.5f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print(to_json({"out": str(out), "samples": len(ds)}), end="")
    return 0


def cmd_train(args, cfg) -> int:
    if args.phase not in (2, 3, 4):
        raise CliError("--phase must be 2, 3 or 4")
    ds = load_dataset(args.data)
    train, val = ds.split("train"), ds.split("val")
    seed = cfg.seeds.train if args.seed is None else args.seed
    if args.phase in (3, 4) and args.init is None:
        raise CliError(f"phase {args.phase} needs --init <previous best checkpoint>")
    tcfg = cfg.train_config(args.phase, epochs=args.epochs)
    out = Path(args.out or Path(cfg.paths.runs) / f"phase{args.phase}")
    res = run_phase(train, val, args.phase, tcfg, seed=seed, init_checkpoint=args.init,
                    model_cfg=cfg.model, aug=cfg.aug_config(args.phase), out_dir=out)
    summary = {"phase": args.phase, "best_epoch": res.best_epoch, "best_val_r2": res.best_metric,
               "epochs_run": res.log[-1]["epoch"],
               "checkpoints": {k: str(v) for k, v in res.checkpoints.items()}}
    write_json(summary, out / "summary.json")
    print(to_json(summary), end="")
    return 0


def cmd_evaluate(args, cfg) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    split = args.split or cfg.evaluation.split
    if ds.manifest.get("splits"):
        ds = ds.split(split)
    if ds.image_size != model.cfg.image_size:
        raise CliError(f"checkpoint expects {model.cfg.image_size}px images, "
                       f"dataset has {ds.image_size}px")
    use_tta = args.tta or cfg.evaluation.tta
    pred = tta_predict(model, ds.images, ds.porosity) if use_tta else model.predict(ds.images, ds.porosity)
    report = evaluate_predictions(pred, ds.labels)
    report["tta"] = use_tta
    out = Path(args.out or Path(args.checkpoint) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    B = cfg.evaluation.bootstrap if args.bootstrap is None else args.bootstrap
    if B:
        bcfg = BootConfig(B=B, alpha=cfg.evaluation.alpha, seed=cfg.seeds.eval)
        fns = {"r2_variance_weighted": variance_weighted_r2, "r2_diag": diag_r2}
        for j, c in enumerate(("kxx", "kxy", "kyx", "kyy")):
            fns[f"r2_{c}"] = (lambda j: lambda p, t: 1 - np.sum((p[:, j] - t[:, j]) ** 2)
                              / np.sum((t[:, j] - t[:, j].mean()) ** 2))(j)
        rows = bootstrap_table(pred, ds.labels, fns, bcfg)
        (out / "bootstrap.csv").write_text(to_csv(rows))
        report["bootstrap"] = rows
    T = cfg.evaluation.mc_dropout if args.mc_dropout is None else args.mc_dropout
    if T:
        uq = mc_dropout(model, ds.images, ds.porosity, UqConfig(T=T, seed=cfg.seeds.eval))
        cal = calibration(uq["mean"], uq["sd"], ds.labels)
        report["uncertainty"] = {"T": T, "mean_sd": uq["sd"].mean(axis=0).tolist(), **cal}
    nb = cfg.evaluation.stratify_bins if args.stratify_bins is None else args.stratify_bins
    if nb:
        report["anisotropy"] = anisotropy_stratified(pred, ds.labels, nb)
        rows = [{"bin": i, **b} for i, b in enumerate(report["anisotropy"]["bins"])]
        (out / "anisotropy.csv").write_text(to_csv(rows))
    write_json(report, out / "metrics.json")
    (out / "metrics.txt").write_text(metrics_text(report))
    print(to_json(report["aggregate"]), end="")
    return 0


def cmd_predict(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    img = read_image(args.image)
    if img.shape != (model.cfg.image_size, model.cfg.image_size):
        raise CliError(f"image is {img.shape[1]}x{img.shape[0]}, model expects "
                       f"{model.cfg.image_size}x{model.cfg.image_size}")
    phi = 1.0 - float(img.mean())
    t0 = time.perf_counter()
    vec = tta_predict(model, img, phi) if args.tta else model.predict(img, phi)[0]
    latency = time.perf_counter() - t0
    k = PermTensor.from_vector(vec)
    sp = spectrum(k)
    out = {"kxx": k.kxx, "kxy": k.kxy, "kyx": k.kyx, "kyy": k.kyy, "porosity": phi,
           "eps_sym": symmetry_error(k), "positive_definite": sp.lambda_min > 0,
           "anisotropy_ratio": sp.anisotropy_ratio, "tta": bool(args.tta)}
    print(to_json(out), end="")
    log.info("inference latency %.1f ms", 1e3 * latency)
    return 0


def cmd_augment_preview(args, cfg) -> int:
    ds = load_dataset(args.data)
    seed = cfg.seeds.train if args.seed is None else args.seed
    phase = args.phase or 3
    aug = cfg.aug_config(phase)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ds), size=min(args.n, len(ds)), replace=False)
    seeds = rng.integers(0, 2**62, size=len(picks))
    lines = []
    for i, s in zip(picks, seeds):
        k = PermTensor.from_vector(ds.labels[i])
        rec = augment(ds.images[i], k, aug, int(s))
        lines.append(to_json({
            "sample_id": int(ds.sample_ids[i]), "seed": int(s), "g": rec.g.tag,
            "fired": rec.fired, "jacobian": None if rec.jacobian is None else rec.jacobian.tolist(),
            "k_before": k.as_vector().tolist(), "k_after": rec.k.as_vector().tolist(),
            "porosity_before": float(ds.porosity[i]),
            "mean_after": float(np.mean(rec.image)),
        }, indent=0).replace("\n", ""))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "characterize": cmd_characterize, "train": cmd_train,
            "evaluate": cmd_evaluate, "predict": cmd_predict, "augment-preview": cmd_augment_preview}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="permtensor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    g = common(sub.add_parser("gen-data", help="generate microstructures and LBM labels"))
    g.add_argument("--n", type=int, help="number of samples (overrides config)")
    g.add_argument("--size", type=int, help="image size (overrides config)")

    c = common(sub.add_parser("characterize", help="dataset statistics report"))
    c.add_argument("data")

    t = common(sub.add_parser("train", help="run one training phase"))
    t.add_argument("data")
    t.add_argument("--phase", type=int, required=True)
    t.add_argument("--init", help="previous phase's best checkpoint (phases 3 and 4)")
    t.add_argument("--epochs", type=int)

    e = common(sub.add_parser("evaluate", help="metrics for a checkpoint on a dataset split"))
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--split")
    e.add_argument("--tta", action="store_true")
    e.add_argument("--bootstrap", type=int, metavar="B")
    e.add_argument("--mc-dropout", type=int, metavar="T")
    e.add_argument("--stratify-bins", type=int, metavar="N")

    pr = common(sub.add_parser("predict", help="predict the tensor of one image"))
    pr.add_argument("checkpoint")
    pr.add_argument("image")
    pr.add_argument("--tta", action="store_true")

    a = common(sub.add_parser("augment-preview", help="dump augmentation provenance"))
    a.add_argument("data")
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--phase", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        cfg = load_config(args.config)
        code = COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = getattr(args, "out", None)
    if out and Path(out).is_dir():
        _write_meta(Path(out), args.command, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
