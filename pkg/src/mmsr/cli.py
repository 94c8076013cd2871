"""Command-line entry point: ``mmsr <subcommand> [--config PATH] [flags]``.

Every subcommand works inside one workspace directory (``--out``)::

    data/            volumes and dataset.json      (make-synthetic)
    patches/         patch cache                   (extract-patches)
    checkpoint.pt    trained networks              (train)
    losses.csv       per-iteration loss log        (train)
    sr/              super-resolved volumes        (super-resolve)
    metrics.json     MetricsReport                 (evaluate)
    montage/         comparison PNGs               (montage)

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, MMSRError

log = logging.getLogger("mmsr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_CONFIG = {
    "seed": 7,
    "synthetic": {},
    "patches": {"patches_per_case": 2000},
    "dataset": None,
    "train": {},
    "inference": {"tile_size": 64, "overlap": 8, "png": False},
}
SECTIONS = set(DEFAULT_CONFIG)
PATCH_KEYS = {"patches_per_case", "clinical_patch", "micro_patch", "resample_each_epoch"}
INFERENCE_KEYS = set(DEFAULT_CONFIG["inference"])


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# --- configuration --------------------------------------------------------


def load_config(path: Optional[str], args) -> dict:
    """Merge a JSON config file over the defaults and apply flag overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base = Path(".")
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = set(user) - SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(cfg.get(key), dict) and isinstance(value, dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
        base = Path(path).resolve().parent
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "variant", None):
        cfg["train"]["variant"] = args.variant
    if getattr(args, "tile_size", None) is not None:
        cfg["inference"]["tile_size"] = args.tile_size
    if getattr(args, "overlap", None) is not None:
        cfg["inference"]["overlap"] = args.overlap
    if cfg["dataset"]:
        cfg["dataset"] = str((base / cfg["dataset"]).resolve())
    unknown = set(cfg["patches"]) - PATCH_KEYS
    if unknown:
        raise ConfigError(f"unknown patches keys: {sorted(unknown)}")
    unknown = set(cfg["inference"]) - INFERENCE_KEYS
    if unknown:
        raise ConfigError(f"unknown inference keys: {sorted(unknown)}")
    return cfg


def synthetic_config(cfg: dict):
    from .data.synthetic import SyntheticConfig

    fields = {f.name for f in dataclasses.fields(SyntheticConfig)}
    extra = set(cfg["synthetic"]) - fields
    if extra:
        raise ConfigError(f"unknown synthetic keys: {sorted(extra)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["synthetic"].items()}
    kwargs["seed"] = cfg["seed"]
    return SyntheticConfig(**kwargs)


def train_config(cfg: dict):
    from .trainer import TrainConfig

    d = dict(cfg["train"])
    d["seed"] = cfg["seed"]
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


class Workspace:
    def __init__(self, out: str, cfg: dict):
        self.root = Path(out)
        self.cfg = cfg

    data = property(lambda self: self.root / "data")
    patches = property(lambda self: self.root / "patches")
    checkpoint = property(lambda self: self.root / "checkpoint.pt")
    losses = property(lambda self: self.root / "losses.csv")
    sr = property(lambda self: self.root / "sr")
    metrics = property(lambda self: self.root / "metrics.json")
    montage = property(lambda self: self.root / "montage")

    def manifest(self):
        """Dataset manifest and the directory its paths are relative to."""
        from .data.patches import DatasetManifest
        from .data.synthetic import read_dataset_index

        if self.cfg["dataset"]:
            path = Path(self.cfg["dataset"])
            try:
                manifest = DatasetManifest.from_json(json.loads(path.read_text()))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigError(f"bad dataset manifest {path}: {exc}") from exc
            base = path.parent
        else:
            manifest = read_dataset_index(self.data)
            base = self.data
        changes = {k: v for k, v in self.cfg["patches"].items() if k in PATCH_KEYS}
        return dataclasses.replace(manifest, seed=self.cfg["seed"], **changes), base

    def clinical_volumes(self):
        """Yield ``(raw volume, normalized volume)`` for each clinical case."""
        from .data.preprocess import normalize, segment_lung
        from .data.volumes import load_volume

        manifest, base = self.manifest()
        for rel in manifest.clinical_volumes:
            vol = load_volume(base / rel, "clinical")
            yield vol, normalize(vol, segment_lung(vol))

    def truth(self, vid: str, imap):
        """Ground truth on the normalized scale of its clinical case, if kept."""
        from .data.volumes import load_volume

        manifest, base = self.manifest()
        rel = manifest.meta.get("truth", {}).get(vid)
        if rel is None:
            return None
        t = load_volume(base / rel, "clinical")
        return t.with_voxels(imap.forward(t.voxels.astype(np.float64)), intensity_map=imap)


# --- subcommands ----------------------------------------------------------


def cmd_make_synthetic(ws: Workspace, args) -> int:
    from .data.synthetic import make_synthetic_dataset, write_synthetic_dataset

    ds = make_synthetic_dataset(synthetic_config(ws.cfg))
    manifest = write_synthetic_dataset(ds, ws.data, ws.cfg["patches"].get("patches_per_case", 2000))
    print(f"wrote {len(manifest.clinical_volumes)} clinical and {len(manifest.micro_volumes)} micro volumes to {ws.data}")
    return EXIT_OK


def cmd_extract_patches(ws: Workspace, args) -> int:
    from .data.patches import extract_patches, save_patch_cache

    manifest, base = ws.manifest()
    sets = extract_patches(manifest, base)
    save_patch_cache(sets["clinical"] + sets["micro"], ws.patches, meta={"manifest": manifest.to_json()})
    print(f"cached {len(sets['clinical'])} clinical and {len(sets['micro'])} micro patches in {ws.patches}")
    return EXIT_OK


def cmd_train(ws: Workspace, args) -> int:
    from .data.patches import patch_pair_from_cache
    from .trainer import Trainer, manifest_resampler, write_loss_csv

    config = train_config(ws.cfg)
    data = patch_pair_from_cache(ws.patches)
    manifest, base = ws.manifest()
    resampler = manifest_resampler(manifest, base)
    resume = Path(args.checkpoint) if args.checkpoint else None
    if resume is not None and resume.exists():
        trainer = Trainer.resume(resume, data, resampler)
        log.info("resumed from %s at iteration %d", resume, trainer.state.iteration)
    else:
        trainer = Trainer(config, data, resampler=resampler)
    trainer.run(checkpoint_path=ws.checkpoint)
    trainer.save(ws.checkpoint)
    write_loss_csv(trainer.state.loss_history, ws.losses)
    print(f"trained {trainer.state.iteration} iterations; checkpoint {ws.checkpoint}")
    return EXIT_OK


def _generator(ws: Workspace, args):
    from .checkpoint import load_checkpoint

    path = Path(args.checkpoint) if args.checkpoint else ws.checkpoint
    bundle, _ = load_checkpoint(path)
    return bundle.g1


def _sr_volumes(ws: Workspace, args, write: bool):
    from .data.volumes import load_volume, save_volume
    from .stitch import export_png_slices, super_resolve_volume

    inf = ws.cfg["inference"]
    g1 = None
    out = {}
    for raw, norm in ws.clinical_volumes():
        path = ws.sr / f"{raw.id}-sr.raw"
        if not write and path.exists():
            sr = load_volume(path, "synthetic-micro")
        else:
            g1 = g1 or _generator(ws, args)
            sr = super_resolve_volume(g1, norm, inf["tile_size"], inf["overlap"])
            save_volume(sr, path, dtype="float32")
            if inf.get("png"):
                export_png_slices(sr, ws.sr / f"{raw.id}-png")
        out[raw.id] = (norm, sr)
    return out


def cmd_super_resolve(ws: Workspace, args) -> int:
    vols = _sr_volumes(ws, args, write=True)
    print(f"super-resolved {len(vols)} volumes into {ws.sr}")
    return EXIT_OK


def cmd_evaluate(ws: Workspace, args) -> int:
    from .metrics import evaluate_volumes

    vols = _sr_volumes(ws, args, write=False)
    lr = {vid: v[0] for vid, v in vols.items()}
    sr = {vid: v[1] for vid, v in vols.items()}
    truths = {}
    for vid, norm in lr.items():
        t = ws.truth(vid, norm.intensity_map)
        if t is not None:
            truths[vid] = t
    tc = train_config(ws.cfg)
    report = evaluate_volumes(sr, lr, truths or None, config=ws.cfg, train_ssim_form=tc.ssim.form)
    report.write(ws.metrics)
    for vid, m in report.per_volume.items():
        print(f"{vid}: consistency mse {m['consistency_mse']:.5f} psnr {m['consistency_psnr']:.2f} dB "
              f"ssim {m['consistency_ssim']:.4f}")
    return EXIT_OK


def cmd_montage(ws: Workspace, args) -> int:
    from .metrics import bicubic_upsample, emit_montage

    vols = _sr_volumes(ws, args, write=False)
    for vid, (norm, sr) in vols.items():
        k = norm.n_slices // 2
        lr = norm.axial(k)
        emit_montage(lr, sr.axial(k), bicubic_upsample(lr), ws.montage / f"{vid}_slice{k:03d}.png")
    print(f"wrote {len(vols)} montages to {ws.montage}")
    return EXIT_OK


COMMANDS = {
    "make-synthetic": (cmd_make_synthetic, "generate a synthetic clinical/micro dataset"),
    "extract-patches": (cmd_extract_patches, "segment, normalize and cache training patches"),
    "train": (cmd_train, "train G1/G2 and the discriminators"),
    "super-resolve": (cmd_super_resolve, "super-resolve every clinical volume"),
    "evaluate": (cmd_evaluate, "write consistency (and oracle) metrics"),
    "montage": (cmd_montage, "write side-by-side comparison PNGs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmsr", description="Micro-CT guided 8x super-resolution of clinical CT.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file (see docs/config.md)")
        p.add_argument("--out", default="mmsr-run", help="workspace directory (default: %(default)s)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--checkpoint", help="checkpoint to load (train: resume if it exists)")
        p.add_argument("--variant", choices=("sr-cyclegan", "sr-unit"), help="network variant")
        p.add_argument("--tile-size", type=int, dest="tile_size", help="inference tile size in pixels")
        p.add_argument("--overlap", type=int, help="inference tile overlap in pixels")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args)
        ws = Workspace(args.out, cfg)
        return COMMANDS[args.command][0](ws, args)
    except ConfigError as exc:
        print(f"mmsr {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MMSRError, ValueError, RuntimeError, OSError) as exc:
        print(f"mmsr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
