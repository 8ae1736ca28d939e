"""``diffedit`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure
(a ``diagnostics.json`` is written to the workdir).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, file_digest
from .config import ConfigError, RunConfig, load_config
from .denoiser import LabelError, NumericError
from .editing import (ablation_rows, edit_batch, edit_many, write_ablation_csv, write_metrics_csv)
from .first_stage import DivergenceError
from .guidance import (EmbedderOracle, LatentStore, StalenessError, finetune, precompute_latents,
                       select_training_latents, store_hash, tuned_key)
from .numerics.rng import RngStream
from .pipeline import (CHECKPOINT_NAMES, KeyMismatchError, denoiser_checkpoint, denoiser_from_checkpoint,
                       edit_config, estimator_checkpoint, estimator_from_checkpoint, finetune_config,
                       fit_denoiser, fit_embedder, fit_first_stage, fit_oracle, params_checkpoint,
                       params_from_checkpoint, test_set, train_set, tuned_name, world_digests)
from .toyworld.dataset import (ToyDataset, calibrate, image_grid, read_manifest, read_pnm,
                               write_dataset, write_pnm)
from .toyworld.oracles import CalibrationError
from .toyworld.render import EMOTIONS

log = logging.getLogger("diffedit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


class Run:
    """Paths and provenance shared by every command."""

    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.root = Path(args.workdir).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def ckpt_path(self, name: str) -> Path:
        return self.path("checkpoints", CHECKPOINT_NAMES.get(name, name))

    def manifest(self, artifact: Path, **extra) -> None:
        """Sidecar ``<artifact>.manifest.json`` with the provenance of ``artifact``."""
        info = {"artifact": artifact.name, "sha256": file_digest(artifact),
                "config_hash": self.cfg.config_hash, "seed": self.cfg.seed, "version": __version__,
                "command": self.args.command}
        info.update(extra)
        side = artifact.with_name(artifact.name + ".manifest.json")
        side.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")

    def save_ckpt(self, ckpt: Checkpoint, path: Path, **extra) -> str:
        path.parent.mkdir(parents=True, exist_ok=True)
        digest = ckpt.save(path)
        self.manifest(path, module=ckpt.module, **extra)
        log.info("wrote %s (sha256 %s)", path, digest[:16])
        return digest

    def require(self, name: str) -> Path:
        p = self.ckpt_path(name)
        if not p.exists():
            raise UsageError(f"missing {name} checkpoint {p}; run the command that trains it first")
        return p

    def write_loss_csv(self, path: Path, losses, header=("epoch", "loss")) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, v in enumerate(losses):
                w.writerow([i, repr(float(v))])
        self.manifest(path)


def _dataset(run: Run, split: str) -> ToyDataset:
    """The on-disk split, rendered and written first if absent."""
    manifest = run.path("data", split, "manifest.csv")
    if not manifest.exists():
        ds = train_set(run.cfg) if split == "train" else test_set(run.cfg)
        write_dataset(ds, manifest.parent)
        run.manifest(manifest)
    return read_manifest(manifest)


def _load(run: Run, name: str):
    return estimator_from_checkpoint(Checkpoint.load(run.require(name), name))


def _load_denoiser(run: Run):
    return denoiser_from_checkpoint(Checkpoint.load(run.require("denoiser"), "denoiser"))


# commands ----------------------------------------------------------------------

def cmd_make_dataset(run: Run) -> None:
    for split in ("train", "test"):
        ds = _dataset(run, split)
        print(f"{split}: {len(ds)} images in {run.path('data', split)}")


def cmd_calibrate(run: Run) -> None:
    train, test = _dataset(run, "train"), _dataset(run, "test")
    digests = world_digests(run.cfg)
    oracle = fit_oracle(run.cfg, train)
    embedder = fit_embedder(run.cfg, train)
    report = calibrate(oracle, embedder, test, seed=run.cfg.seed, strict=False)
    for name, model in (("oracle", oracle), ("embedder", embedder)):
        run.save_ckpt(estimator_checkpoint(model, name, digests[name], run.cfg.seed), run.ckpt_path(name),
                      calibration=report)
    out = run.path("reports", "calibration.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    run.manifest(out)
    print(json.dumps(report, sort_keys=True))
    calibrate(oracle, embedder, test, seed=run.cfg.seed, strict=True)


def cmd_train_first_stage(run: Run) -> None:
    train = _dataset(run, "train")
    fs = fit_first_stage(run.cfg, train)
    run.save_ckpt(estimator_checkpoint(fs, "first_stage", world_digests(run.cfg)["first_stage"], run.cfg.seed),
                  run.ckpt_path("first_stage"))
    run.write_loss_csv(run.path("logs", "first_stage_loss.csv"), fs.loss_history_)
    l1 = fs.reconstruction_l1(train.images)
    print(f"first stage ({fs.mode}): reconstruction l1 {l1:.5f}")


def cmd_train_ldm(run: Run) -> None:
    fs = _load(run, "first_stage")
    train = _dataset(run, "train")
    den = fit_denoiser(run.cfg, fs, train)
    run.save_ckpt(denoiser_checkpoint(den, world_digests(run.cfg)["denoiser"], run.cfg.seed),
                  run.ckpt_path("denoiser"), first_stage_sha256=file_digest(run.ckpt_path("first_stage")))
    steps = max(1, len(train) // den.batch_size)
    per_epoch = np.asarray(den.loss_history_).reshape(-1, steps).mean(axis=1)
    run.write_loss_csv(run.path("logs", "denoiser_loss.csv"), per_epoch)
    print(f"denoiser: loss {per_epoch[0]:.4f} -> {per_epoch[-1]:.4f} over {len(per_epoch)} epochs")


def _latent_store(run: Run, den, fs, train: ToyDataset, fcfg) -> LatentStore:
    base_sha = file_digest(run.ckpt_path("denoiser"))[:16]
    key = {"t0": int(fcfg.t0), "T_ddim": int(run.cfg["finetune.T_ddim"]), "gamma": float(fcfg.gamma),
           "base": base_sha}
    path = run.path("latents", f"store_{store_hash(key)}.bin")
    if path.exists():
        return LatentStore.load(path, expect_key=key)
    per_class = {c: np.flatnonzero(train.labels == c) for c in range(den.num_classes)}
    idx = select_training_latents(per_class, fcfg.precompute_count, fcfg.subsample,
                                  RngStream(run.cfg.seed, 0x6C6174))
    store = precompute_latents(den.params_, den.schedule_, fs, train.images[idx], train.labels[idx],
                               key["t0"], key["T_ddim"], key["gamma"], ids=[train.ids[i] for i in idx],
                               base_hash=base_sha)
    path.parent.mkdir(parents=True, exist_ok=True)
    store.save(path)
    run.manifest(path, store_key=key)
    return store


def _targets(spec, num_classes: int, default) -> list[int]:
    if spec is None:
        vals = list(default)
    elif str(spec).strip().lower() == "all":
        vals = list(range(num_classes))
    else:
        try:
            vals = [int(v) for v in str(spec).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"cannot parse target list {spec!r}") from None
    bad = [v for v in vals if not 0 <= v < num_classes]
    if bad or not vals:
        raise UsageError(f"target labels must lie in 0..{num_classes - 1}, got {spec!r}")
    return vals


def cmd_finetune(run: Run) -> None:
    den_path = run.require("denoiser")
    fs = _load(run, "first_stage")
    den = _load_denoiser(run)
    oracle, embedder = _load(run, "oracle"), _load(run, "embedder")
    fcfg = finetune_config(run.cfg)
    targets = _targets(run.args.trg, den.num_classes, run.cfg["finetune.targets"])
    base_digest = file_digest(den_path)
    store = _latent_store(run, den, fs, _dataset(run, "train"), fcfg)
    for trg in targets:
        tuned, history = finetune(den.params_, store, trg, EmbedderOracle(oracle), embedder, fs,
                                  den.schedule_, fcfg)
        key = tuned_key(trg, fcfg.gamma, fcfg.lambda_dir)
        name = tuned_name(trg, fcfg.gamma, fcfg.lambda_dir)
        ckpt = params_checkpoint(tuned, "tuned-denoiser", den.schedule_, key, run.cfg.config_hash,
                                 run.cfg.seed, {"base_sha256": base_digest})
        run.save_ckpt(ckpt, run.path("checkpoints", name), key=key)
        run.write_loss_csv(run.path("logs", name.replace(".ckpt", "_loss.csv")), history)
        print(f"target {trg} ({EMOTIONS[trg]}): loss {history[0]:.4f} -> {history[-1]:.4f}")
    if file_digest(den_path) != base_digest:
        raise NumericError("base checkpoint changed during finetuning", {"path": str(den_path)})


def _edit_config_from_flags(run: Run, args, **fixed):
    over = {}
    for flag, key in (("t0", "t0"), ("gamma", "gamma"), ("steps", "T_ddim"), ("eta", "eta")):
        v = getattr(args, flag)
        if v is not None:
            over[key] = v
    over.update(fixed)
    return edit_config(run.cfg, **over)


def _tuned_params(run: Run, trg: int):
    fcfg = finetune_config(run.cfg)
    key = tuned_key(trg, fcfg.gamma, fcfg.lambda_dir)
    path = run.path("checkpoints", tuned_name(trg, fcfg.gamma, fcfg.lambda_dir))
    if not path.exists():
        raise UsageError(f"missing tuned checkpoint {path}; run finetune first")
    return params_from_checkpoint(Checkpoint.load(path, "tuned-denoiser"), expect_key=key)


def cmd_edit(run: Run) -> None:
    args = run.args
    if (args.image is None) == (args.dataset is None):
        raise UsageError("give exactly one of --image or --dataset")
    fs = _load(run, "first_stage")
    den = _load_denoiser(run)
    oracle, embedder = _load(run, "oracle"), _load(run, "embedder")
    C = den.num_classes
    if args.image is not None:
        if args.src is None:
            raise UsageError("--image needs --src")
        images = read_pnm(run.path(args.image))[None]
        y_src = np.array([args.src])
    else:
        ds = read_manifest(run.path(args.dataset))
        images, y_src = ds.images, ds.labels
        if args.src is not None:
            keep = y_src == args.src
            images, y_src = images[keep], y_src[keep]
        if len(images) == 0:
            raise UsageError("no images left after filtering by --src")
    if args.src is not None and not 0 <= args.src < C:
        raise UsageError(f"--src must lie in 0..{C - 1}")
    targets = _targets(args.trg, C, [run.cfg["edit.trg"]])
    n_jobs = run.cfg["run.n_jobs"]
    rows, columns = [], []
    for trg in targets:
        cfg = _edit_config_from_flags(run, args, y_src=int(y_src[0]), y_trg=trg)
        try:
            cfg.validate(den.schedule_.T, C)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        params = _tuned_params(run, trg) if args.tuned else den.params_
        x_gen = edit_many(fs, params, den.schedule_, images, y_src, trg, cfg, run.cfg.seed, n_jobs)
        columns.append(x_gen)
        row = edit_batch(fs, params, den.schedule_, images, y_src, np.full(len(images), trg), cfg,
                         [(cfg.t0, cfg.gamma, cfg.T_ddim)], oracle, embedder, run.cfg.seed, n_jobs)[0]
        rows.append(row)
    out_dir = run.path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = min(len(images), run.cfg["edit.grid_rows"])
    grid = image_grid([[images[i]] + [col[i] for col in columns] for i in range(k)])
    grid_path = out_dir / "grid.pgm"
    write_pnm(grid_path, grid)
    run.manifest(grid_path, columns=["source"] + [EMOTIONS[t] for t in targets])
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(rows, csv_path)
    run.manifest(csv_path, oracle_sha256=file_digest(run.ckpt_path("oracle")),
                 embedder_sha256=file_digest(run.ckpt_path("embedder")), tuned=bool(args.tuned))
    for r in rows:
        print(f"trg {r['y_trg']}: accuracy {r['accuracy']:.3f} psnr {r['psnr']:.2f} "
              f"ssim {r['ssim']:.3f} csim {r['csim']:.3f}")


def cmd_ablate(run: Run) -> None:
    fs = _load(run, "first_stage")
    den = _load_denoiser(run)
    oracle, embedder = _load(run, "oracle"), _load(run, "embedder")
    test = _dataset(run, "test")
    n = min(run.cfg["ablate.n_images"], len(test))
    a = run.cfg.section("ablate")
    targets = _targets(",".join(map(str, a["targets"])), den.num_classes, a["targets"])
    for t0 in a["t0"]:
        for T in a["T_ddim"]:
            try:
                edit_config(run.cfg, t0=t0, T_ddim=T).validate(den.schedule_.T, den.num_classes)
            except ValueError as exc:
                raise UsageError(f"ablation grid: {exc}") from None
    rows = ablation_rows(fs, den.params_, den.schedule_, test.images[:n], test.labels[:n], targets,
                         a["t0"], a["gamma"], a["T_ddim"], oracle, embedder,
                         eta=run.cfg["edit.eta"], seed=run.cfg.seed, n_jobs=run.cfg["run.n_jobs"])
    out = run.path(run.args.out, "ablation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out, EMOTIONS[:den.num_classes])
    run.manifest(out, oracle_sha256=file_digest(run.ckpt_path("oracle")),
                 embedder_sha256=file_digest(run.ckpt_path("embedder")))
    print(f"wrote {len(rows)} rows to {out}")


def cmd_show_config(run: Run) -> None:
    sys.stdout.write(run.cfg.dumps())
    print(f"# config_hash = {run.cfg.config_hash}")


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "calibrate": cmd_calibrate,
    "train-first-stage": cmd_train_first_stage,
    "train-ldm": cmd_train_ldm,
    "finetune": cmd_finetune,
    "edit": cmd_edit,
    "ablate": cmd_ablate,
    "show-config": cmd_show_config,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffedit", description="Toy conditional latent-diffusion emotion editing.")
    p.add_argument("--version", action="version", version=f"diffedit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (relative to --workdir)")
    common.add_argument("--workdir", default=".", help="root for every input and output path")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("make-dataset", "calibrate", "train-first-stage", "train-ldm", "show-config"):
        sub.add_parser(name, parents=[common])
    ft = sub.add_parser("finetune", parents=[common])
    ft.add_argument("--trg", help="target label(s): int, comma list or 'all' (default finetune.targets)")
    ed = sub.add_parser("edit", parents=[common])
    src = ed.add_mutually_exclusive_group()
    src.add_argument("--image", help="single P5 image to edit (needs --src)")
    src.add_argument("--dataset", help="dataset manifest to edit")
    ed.add_argument("--t0", type=int)
    ed.add_argument("--gamma", type=float)
    ed.add_argument("--steps", type=int, help="number of DDIM steps T_ddim")
    ed.add_argument("--eta", type=float)
    ed.add_argument("--src", type=int)
    ed.add_argument("--trg", help="target label(s): int, comma list or 'all'")
    ed.add_argument("--tuned", action="store_true", help="use the finetuned model of each target")
    ed.add_argument("--out", default="edits", help="output directory")
    ab = sub.add_parser("ablate", parents=[common])
    ab.add_argument("--out", default="ablation", help="output directory")
    return p


def _write_diagnostics(root: Path, command: str, exc: Exception, cfg: RunConfig | None) -> Path:
    diag = getattr(exc, "diagnostics", {}) or {}
    info = {"command": command, "error": type(exc).__name__, "message": str(exc),
            "config_hash": cfg.config_hash if cfg else None, "seed": cfg.seed if cfg else None,
            "version": __version__, "diagnostics": diag, "traceback": traceback.format_exc()}
    root.mkdir(parents=True, exist_ok=True)
    path = root / "diagnostics.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
    return path


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors, --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    root = Path(args.workdir)
    cfg = None
    try:
        cfg = load_config(root / args.config if args.config else None)
        COMMANDS[args.command](Run(args, cfg))
    except (ConfigError, UsageError, LabelError, CheckpointError, KeyMismatchError, StalenessError,
            FileNotFoundError) as exc:
        print(f"diffedit {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DivergenceError, CalibrationError, FloatingPointError) as exc:
        path = _write_diagnostics(root, args.command, exc, cfg)
        print(f"diffedit {args.command}: numeric failure: {exc} (diagnostics in {path})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
