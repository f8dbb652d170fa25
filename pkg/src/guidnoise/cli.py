"""Command-line entry point: ``guidnoise <command> [options]``.

Every command writes its outputs plus the fully resolved config under
``--out``. Failures exit nonzero with a single tab-separated line on stderr:
``error<TAB><ErrorType><TAB><message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import RunConfig
from .errors import GuidNoiseError, InvalidConfigError

log = logging.getLogger("guidnoise")

COMMANDS = ["make-toy-data", "train", "refine", "synthesize", "self-augment", "evaluate",
            "denoise-bench", "report"]


class RunDirLocked(GuidNoiseError):
    pass


@contextmanager
def run_dir(path):
    """Exclusive ownership of an output directory via a lock file."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirLocked(f"{out} is in use by another process (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _configure_threads() -> None:
    n = os.environ.get("GUIDNOISE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfigError(f"--set expects section.key=value, got {item!r}")
        cfg.set(key, value)
    if args.seed is not None:
        for section, key in (("train", "seed"), ("data", "toy_seed"), ("denoise", "seed")):
            cfg.values[section][key] = int(args.seed)
    return cfg


def _seed(args, cfg: RunConfig) -> int:
    return int(args.seed) if args.seed is not None else int(cfg["train"]["seed"])


def _require(value, flag: str):
    if value in (None, ""):
        raise InvalidConfigError(f"missing required {flag}")
    return value


def _dataset(path, split="train") -> D.PairDataset:
    return D.load_dataset(_require(path, "dataset path"), split)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def toy_specs(kind: str, sigmas) -> list[D.ToyNoiseSpec]:
    specs = []
    for s in sigmas:
        if kind == "awgn":
            specs.append(D.ToyNoiseSpec("awgn", sigma=s))
        elif kind == "correlated":
            specs.append(D.ToyNoiseSpec("correlated", sigma=s, radius=2))
        elif kind == "poisson_gaussian":
            # variance a*c + b with a mid-gray total std of s/255
            v = (s / 255.0) ** 2
            specs.append(D.ToyNoiseSpec("poisson_gaussian", a=v, b=v / 2))
        else:
            raise InvalidConfigError(f"unknown data.kind {kind!r}")
    return specs


def cmd_make_toy_data(args, cfg: RunConfig, out: Path) -> dict:
    d = cfg["data"]
    specs = toy_specs(d["kind"], d["sigmas"])
    sources = [p for p in d["clean_sources"].split(",") if p.strip()] or None
    seed = int(d["toy_seed"])
    counts = {}
    for offset, (split, n) in enumerate(
            (("train", d["patches_per_spec"]), ("val", d["val_per_spec"]),
             ("test", d["test_per_spec"]))):
        if n <= 0:
            continue
        ds = D.make_toy_dataset(out / split, specs, n, seed=seed + 1000 * offset,
                                size=d["patch_size"], clean_sources=sources, split=split)
        counts[split] = len(ds)
    return counts


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    from .training import Trainer

    ds = _dataset(args.data or cfg["data"]["train_root"])
    trainer = Trainer(cfg.train_config(), ds)
    trainer.run(out, until=trainer.cfg.iters_phase1)
    path = trainer.save(out / "phase1.gnck")
    return {"checkpoint": str(path), "iterations": trainer.iteration}


def cmd_refine(args, cfg: RunConfig, out: Path) -> dict:
    from . import checkpoint as ckpt
    from .training import TrainConfig, Trainer

    ds = _dataset(args.data or cfg["data"]["train_root"])
    ckpt_path = _require(args.checkpoint, "--checkpoint")
    train_cfg = None
    if args.config or args.set or args.seed is not None:
        # architecture and schedule always come from the checkpoint
        saved = TrainConfig.from_dict(ckpt.load(ckpt_path)[0]["train_config"])
        cli = cfg.train_config()
        train_cfg = replace(cli, model=saved.model, T=saved.T, schedule=saved.schedule,
                            eta=saved.eta, iters_phase1=saved.iters_phase1)
    trainer = Trainer.resume(ckpt_path, ds, train_cfg)
    trainer.run(out, log_path=out / "refine_log.csv")
    path = trainer.save(out / "final.gnck")
    return {"checkpoint": str(path), "iterations": trainer.iteration}


def _load_model(args):
    from .training import load_model

    model, schedule, _ = load_model(_require(args.checkpoint, "--checkpoint"), args.device)
    return model, schedule


def _png_list(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(p.rglob("*.png"))
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return [p]


def cmd_synthesize(args, cfg: RunConfig, out: Path) -> dict:
    from .synthesis import SynthesisRequest, synthesize, synthesize_tiled

    model, schedule = _load_model(args)
    g_noisy = D.read_png(_require(args.guidance_noisy, "--guidance-noisy"))
    g_clean = D.read_png(_require(args.guidance_clean, "--guidance-clean"))
    s = cfg["synth"]
    steps = args.steps or s["steps"] or None
    seed = _seed(args, cfg)
    p = model.cfg.patch_size
    written = []
    for k, src in enumerate(_png_list(_require(args.clean, "--clean"))):
        clean = D.read_png(src)
        item_seed = seed + k
        if clean.shape[:2] == (p, p) and g_noisy.shape[:2] == (p, p):
            img = synthesize(model, schedule, SynthesisRequest(
                clean, g_noisy, g_clean, item_seed, steps, s["sigma_mode"]))
        else:
            img = synthesize_tiled(model, schedule, clean, (g_noisy, g_clean), item_seed,
                                   overlap=s["overlap"], sigma_mode=s["sigma_mode"])
        target = out / "noisy" / src.name
        D.write_png(target, img)
        if s["save_raw"]:
            np.save(target.with_suffix(".npy"), img.astype(np.float32))
        written.append(str(target))
    return {"written": len(written)}


def cmd_self_augment(args, cfg: RunConfig, out: Path) -> dict:
    from .synthesis import self_augment

    model, schedule = _load_model(args)
    ds = _dataset(args.data or cfg["data"]["train_root"])
    s = cfg["synth"]
    synth, rows = self_augment(model, schedule, ds, _seed(args, cfg), out,
                               strategy=s["strategy"], batch=s["batch"], save_raw=s["save_raw"])
    return {"real_pairs": len(ds), "synthetic_pairs": len(synth)}


def _load_fake(fake_root: Path, name: str) -> np.ndarray:
    raw = fake_root / "noisy" / Path(name).with_suffix(".npy")
    if raw.exists():
        return np.load(raw).astype(np.float32)
    png = fake_root / "noisy" / name
    if not png.exists():
        raise FileNotFoundError(f"missing synthesized image {png}")
    return D.read_png(png)


def _guidance_for(ds: D.PairDataset, i: int) -> int:
    """Next item of the same noise group (cyclic); the item itself if alone."""
    group = ds.items[i].group
    members = [j for j, it in enumerate(ds.items) if it.group == group]
    return members[(members.index(i) + 1) % len(members)]


def evaluate_dataset(ds: D.PairDataset, fake_of, cfg: RunConfig, synth_fn=None):
    """Per-item KLD/AKLD/PSNR/SSIM; ``fake_of(i)`` yields the synthesized image."""
    from .metrics import MetricReport, akld, noise_kld, psnr, ssim

    m = cfg["metrics"]
    report = MetricReport(config=dict(m))
    for i in range(len(ds)):
        clean, noisy = ds.pair(i)
        fake = fake_of(i)
        item = ds.items[i]
        name = item.clean_path.name if item.clean_path is not None else str(i)
        if synth_fn is None:
            sampler, L = (lambda c, k, f=fake: f), 1
        else:
            sampler, L = (lambda c, k, i=i: synth_fn(i, k)), m["akld_samples"]
        report.add(name,
                   kld=noise_kld(noisy, clean, fake, bins=m["bins"]),
                   akld=akld(clean, noisy, sampler, L=L, win=m["akld_window"],
                             floor=m["variance_floor"]),
                   psnr=psnr(fake, clean), ssim=ssim(fake, clean))
    return report


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> dict:
    ds = _dataset(args.data or cfg["data"]["test_root"], "test")
    if args.fake:
        fake_root = Path(args.fake)
        report = evaluate_dataset(
            ds, lambda i: _load_fake(fake_root, ds.items[i].clean_path.name), cfg)
    else:
        from .synthesis import derive_seed, synthesize_batch

        model, schedule = _load_model(args)
        seed = _seed(args, cfg)
        fixed = None
        if args.guidance_noisy:
            fixed = (D.read_png(args.guidance_noisy),
                     D.read_png(_require(args.guidance_clean, "--guidance-clean")))

        def synth(i, k):
            clean = ds.pair(i)[0]
            g_noisy, g_clean = fixed if fixed else ds.pair(_guidance_for(ds, i))[::-1]
            return synthesize_batch(model, schedule, clean[None], g_noisy[None], g_clean[None],
                                    [derive_seed(seed, i, k)], args.steps or None)[0]

        report = evaluate_dataset(ds, lambda i: synth(i, 0), cfg, synth_fn=synth)
    path = report.write_csv(out / "report.csv")
    return {"report": str(path), **report.aggregate}


def cmd_denoise_bench(args, cfg: RunConfig, out: Path) -> dict:
    from .denoise import eval_denoiser, psnr_delta, save_denoiser, train_denoiser
    from .report import plot_psnr_comparison

    real = _dataset(args.data or cfg["data"]["train_root"])
    n_real = int(cfg["denoise"]["n_real"])
    if 0 < n_real < len(real):
        real = real.subset(range(n_real))
    test = _dataset(args.test or cfg["data"]["test_root"], "test")
    dcfg = cfg.denoiser_config()
    model, _ = train_denoiser(dcfg, real, None, out / "real_only_log.csv")
    save_denoiser(out / "denoiser_real_only.gnck", model, dcfg)
    base = eval_denoiser(model, test)
    base.write_csv(out / "real_only.csv")
    result = {"real_pairs": len(real), "psnr_real_only": base.mean("psnr"),
              "ssim_real_only": base.mean("ssim")}
    if args.synth:
        synth = D.load_dataset(args.synth, "synthetic")
        model2, _ = train_denoiser(dcfg, real, synth, out / "augmented_log.csv")
        save_denoiser(out / "denoiser_augmented.gnck", model2, dcfg)
        aug = eval_denoiser(model2, test)
        aug.write_csv(out / "augmented.csv")
        delta = psnr_delta(aug, base)
        result.update(synthetic_pairs=len(synth), psnr_augmented=aug.mean("psnr"),
                      ssim_augmented=aug.mean("ssim"), psnr_delta=delta)
        plot_psnr_comparison(out / "denoise_psnr.png", ["real only", "self-augmented"],
                             [base.mean("psnr"), aug.mean("psnr")])
    with open(out / "denoise_summary.json", "w") as fh:
        json.dump(result, fh, indent=2)
    return result


def cmd_report(args, cfg: RunConfig, out: Path) -> dict:
    from .report import (plot_histograms, plot_training_log, residual_histograms,
                         write_histogram_csv)

    made = []
    if args.data and args.fake:
        ds = _dataset(args.data, "test")
        fake_root = Path(args.fake)
        bins = cfg["metrics"]["bins"]
        reals, fakes, cleans = [], [], []
        for i in range(len(ds)):
            clean, noisy = ds.pair(i)
            name = ds.items[i].clean_path.name
            fake = _load_fake(fake_root, name)
            centers, r, f = residual_histograms(noisy, clean, fake, bins)
            stem = Path(name).stem
            write_histogram_csv(out / "histograms" / f"{stem}.csv", centers, r, f)
            reals.append(noisy)
            fakes.append(fake)
            cleans.append(clean)
        if reals:
            centers, r, f = residual_histograms(np.stack(reals), np.stack(cleans),
                                                np.stack(fakes), bins)
            made.append(write_histogram_csv(out / "histogram_pooled.csv", centers, r, f))
            made.append(plot_histograms(out / "histogram_pooled.png", centers, r, f,
                                        "pooled residual distribution"))
    for log_csv in args.log or []:
        target = out / (Path(log_csv).stem + ".png")
        made.append(plot_training_log(log_csv, target))
    if not made:
        raise InvalidConfigError("report needs --data with --fake, or --log")
    return {"files": [str(p) for p in made]}


HANDLERS = {
    "make-toy-data": cmd_make_toy_data,
    "train": cmd_train,
    "refine": cmd_refine,
    "synthesize": cmd_synthesize,
    "self-augment": cmd_self_augment,
    "evaluate": cmd_evaluate,
    "denoise-bench": cmd_denoise_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value lines)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="run directory for all outputs")
    common.add_argument("--device", default="cpu")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="guidnoise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "refine", "self-augment", "evaluate", "denoise-bench", "report"):
            p.add_argument("--data", help="dataset root with clean/ and noisy/")
        if name in ("refine", "synthesize", "self-augment", "evaluate"):
            p.add_argument("--checkpoint")
        if name in ("synthesize", "evaluate"):
            p.add_argument("--guidance-noisy")
            p.add_argument("--guidance-clean")
            p.add_argument("--steps", type=int)
        if name == "synthesize":
            p.add_argument("--clean", help="clean PNG or directory of PNGs")
        if name in ("evaluate", "report"):
            p.add_argument("--fake", help="directory holding synthesized noisy/ images")
        if name == "denoise-bench":
            p.add_argument("--synth", help="self-augmented dataset root")
            p.add_argument("--test", help="held-out real dataset root")
        if name == "report":
            p.add_argument("--log", action="append", help="training log CSV to plot")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        if args.device != "cpu":
            raise InvalidConfigError(f"device {args.device!r} is not available in this build")
        cfg = _resolve_config(args)
        with run_dir(args.out) as out:
            cfg.save(out / "resolved.cfg")
            result = HANDLERS[args.command](args, cfg, out)
    except (GuidNoiseError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ").replace("\t", " ")
        print(f"error\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **_jsonable(result)}))
    return 0


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        out[k] = v
    return out


if __name__ == "__main__":
    sys.exit(main())
