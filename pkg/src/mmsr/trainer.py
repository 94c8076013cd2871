"""Adversarial training of SR-CycleGAN and SR-UNIT with the MMSR objective."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data.patches import DatasetManifest, PatchPair, build_patch_pair
from .errors import ConfigError, ParameterError, ShapeError, TrainingDivergedError
from .losses import LossBreakdown, LossWeights, SSIMParams, mmsr_total
from .networks import (
    VARIANTS,
    DiscriminatorSpec,
    DownGeneratorSpec,
    ModelBundle,
    SRGeneratorSpec,
    build_bundle,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("iteration", "epoch", "total", "orig", "s_x", "s_y", "d_term", "u_term", "d_x_loss", "d_y_loss")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SSIMParams = field(default_factory=SSIMParams)
    pool_size: int = 50
    seed: int = 0
    variant: str = "sr-cyclegan"
    sr_spec: SRGeneratorSpec = field(default_factory=SRGeneratorSpec)
    down_spec: DownGeneratorSpec = field(default_factory=DownGeneratorSpec)
    dx_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    dy_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    # None: one pass over the smaller domain per epoch
    iterations_per_epoch: Optional[int] = None
    max_iterations: Optional[int] = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs and batch_size must be >= 1 and lr > 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.pool_size < 0:
            raise ConfigError("pool_size must be >= 0")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        nested = {
            "weights": LossWeights, "ssim": SSIMParams, "sr_spec": SRGeneratorSpec,
            "down_spec": DownGeneratorSpec, "dx_spec": DiscriminatorSpec, "dy_spec": DiscriminatorSpec,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in nested and isinstance(v, dict):
                try:
                    v = nested[k](**v)
                except TypeError as exc:
                    raise ConfigError(f"bad {k}: {exc}") from exc
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class TrainState:
    iteration: int = 0
    epoch: int = 0
    loss_history: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)


class ImagePool:
    """Replay buffer of generated images for discriminator updates."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.images: list[torch.Tensor] = []
        self.rng = random.Random(seed)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return images
        out = []
        for img in images.detach():
            img = img.unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                j = self.rng.randrange(self.size)
                out.append(self.images[j].clone())
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, 0)

    def state(self) -> dict:
        return {"images": list(self.images), "rng": self.rng.getstate()}

    def load_state(self, s: dict):
        self.images = list(s["images"])
        version, internal, gauss = s["rng"]
        self.rng.setstate((version, tuple(internal), gauss))


def lsgan(pred: torch.Tensor, target: float) -> torch.Tensor:
    return F.mse_loss(pred, torch.full_like(pred, target))


def checksum(params) -> str:
    h = hashlib.sha1()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _requires_grad(params, flag: bool):
    for p in params:
        p.requires_grad_(flag)


def _epoch_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


class Trainer:
    """Owns networks, optimizers, replay pools and RNG streams of one run."""

    def __init__(self, config: TrainConfig, data: PatchPair, bundle: Optional[ModelBundle] = None,
                 resampler: Optional[Callable[[int], PatchPair]] = None):
        self.config = config
        self.resampler = resampler
        self._use_data(data, 0)
        self.bundle = bundle or build_bundle(
            config.variant, config.sr_spec, config.down_spec, config.dx_spec, config.dy_spec, config.seed
        )
        if self.bundle.variant != config.variant:
            raise ConfigError("bundle variant differs from config variant")
        self.bundle.train()
        self.g_params = self.bundle.generator_parameters()
        self.d_params = self.bundle.discriminator_parameters()
        self.opt_g = torch.optim.Adam(self.g_params, lr=config.lr, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.d_params, lr=config.lr, betas=config.betas)
        self.pool_x = ImagePool(config.pool_size, config.seed + 101)
        self.pool_y = ImagePool(config.pool_size, config.seed + 102)
        self.noise = torch.Generator().manual_seed(config.seed + 103)
        n_batches = min(len(data.x), len(data.y)) // config.batch_size
        self.iterations_per_epoch = config.iterations_per_epoch or n_batches
        if self.iterations_per_epoch < 1 or self.iterations_per_epoch > n_batches:
            raise ConfigError(
                f"iterations_per_epoch={self.iterations_per_epoch} needs 1..{n_batches} batches of data"
            )
        self.state = TrainState()
        self.latent_shapes: Optional[tuple] = None
        self._perm_cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def _use_data(self, data: PatchPair, epoch: int):
        self.data = data
        self._data_epoch = epoch
        self._x = torch.from_numpy(data.x).unsqueeze(1)
        self._y = torch.from_numpy(data.y).unsqueeze(1)
        self._perm_cache = {}

    # --- schedule -------------------------------------------------------

    def lr_factor(self, epoch: int) -> float:
        """Constant for the first half of the epochs, then linear decay towards 0."""
        n_const = self.config.epochs // 2
        return min(1.0, (self.config.epochs - epoch) / (self.config.epochs - n_const))

    def _set_lr(self, epoch: int):
        lr = self.config.lr * self.lr_factor(epoch)
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr

    def batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
        epoch, idx = divmod(iteration, self.iterations_per_epoch)
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: (
                torch.randperm(len(self._x), generator=torch.Generator().manual_seed(_epoch_seed(self.config.seed, epoch, 0))),
                torch.randperm(len(self._y), generator=torch.Generator().manual_seed(_epoch_seed(self.config.seed, epoch, 1))),
            )}
        px, py = self._perm_cache[epoch]
        bs = self.config.batch_size
        sl = slice(idx * bs, (idx + 1) * bs)
        return self._x[px[sl]], self._y[py[sl]]

    # --- one step -------------------------------------------------------

    def _check_finite(self, terms: dict):
        for name, v in terms.items():
            v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            if not math.isfinite(v):
                raise TrainingDivergedError(name, v, self.state.iteration)

    def _cyclegan_losses(self, x, y):
        b, w = self.bundle, self.config.weights
        x_sr = b.g1(x)
        y_lr = b.g2(y)
        adv = lsgan(b.d_y(x_sr), 1.0) + lsgan(b.d_x(y_lr), 1.0)
        cyc = F.l1_loss(b.g2(x_sr), x) + F.l1_loss(b.g1(y_lr), y)
        parts = {"adv": adv, "cyc": cyc}
        orig = w.w_adv * adv + w.w_cyc * cyc
        if w.w_idt > 0:
            from .losses import avg_downsample_f, nn_upsample_g

            idt = F.l1_loss(b.g1(avg_downsample_f(y)), y) + F.l1_loss(b.g2(nn_upsample_g(x)), x)
            parts["idt"] = idt
            orig = orig + w.w_idt * idt
        return orig, parts, x_sr, y_lr

    def _unit_losses(self, x, y):
        b, w, u = self.bundle, self.config.weights, self.bundle.unit

        def noisy(z):
            return z + torch.randn(z.shape, generator=self.noise, dtype=z.dtype)

        z_x = u.encode_lr(x)
        z_y = u.encode_hr(y)
        if z_x.shape[1:] != z_y.shape[1:]:
            raise ShapeError(f"latent shapes differ: {tuple(z_x.shape)} vs {tuple(z_y.shape)}")
        self.latent_shapes = (tuple(z_x.shape[1:]), tuple(z_y.shape[1:]))
        zx_s, zy_s = noisy(z_x), noisy(z_y)
        x_rec, y_rec = u.decode_lr(zx_s), u.decode_hr(zy_s)
        x_sr, y_lr = u.decode_hr(zx_s), u.decode_lr(zy_s)
        z_x_sr, z_y_lr = u.encode_hr(x_sr), u.encode_lr(y_lr)
        x_cyc, y_cyc = u.decode_lr(noisy(z_x_sr)), u.decode_hr(noisy(z_y_lr))
        adv = lsgan(b.d_y(x_sr), 1.0) + lsgan(b.d_x(y_lr), 1.0)
        recon = F.l1_loss(x_rec, x) + F.l1_loss(y_rec, y)
        kl = z_x.pow(2).mean() + z_y.pow(2).mean() + z_x_sr.pow(2).mean() + z_y_lr.pow(2).mean()
        cyc = F.l1_loss(x_cyc, x) + F.l1_loss(y_cyc, y)
        orig = w.w_adv * adv + w.w_recon * recon + w.w_kl * kl + w.w_cyc * cyc
        return orig, {"adv": adv, "recon": recon, "kl": kl, "cyc": cyc}, x_sr, y_lr

    def generator_step(self, x, y):
        """Update G1/G2 (or the UNIT pair); discriminators are frozen."""
        _requires_grad(self.d_params, False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            if self.config.variant == "sr-unit":
                orig, parts, x_sr, y_lr = self._unit_losses(x, y)
            else:
                orig, parts, x_sr, y_lr = self._cyclegan_losses(x, y)
            bd = mmsr_total(orig, x, x_sr, y, y_lr, self.config.weights, self.config.ssim)
            self._check_finite({**parts, **{n: getattr(bd, n) for n in LossBreakdown.COMPONENTS}})
            bd.total.backward()
            self.opt_g.step()
        finally:
            _requires_grad(self.d_params, True)
        bd.extras.update(parts)
        return bd.detach(), x_sr.detach(), y_lr.detach()

    def discriminator_step(self, x, y, x_sr, y_lr) -> tuple[float, float]:
        """Least-squares update of D_X (low-res) and D_Y (high-res) on pooled fakes."""
        b = self.bundle
        fake_y = self.pool_y.query(x_sr)
        fake_x = self.pool_x.query(y_lr)
        self.opt_d.zero_grad(set_to_none=True)
        d_y_loss = 0.5 * (lsgan(b.d_y(y), 1.0) + lsgan(b.d_y(fake_y), 0.0))
        d_x_loss = 0.5 * (lsgan(b.d_x(x), 1.0) + lsgan(b.d_x(fake_x), 0.0))
        self._check_finite({"d_x_loss": d_x_loss, "d_y_loss": d_y_loss})
        (d_x_loss + d_y_loss).backward()
        self.opt_d.step()
        return float(d_x_loss.detach()), float(d_y_loss.detach())

    def step(self) -> LossBreakdown:
        it = self.state.iteration
        epoch = it // self.iterations_per_epoch
        self.state.epoch = epoch
        self._set_lr(epoch)
        if self.resampler is not None and epoch != self._data_epoch:
            self._use_data(self.resampler(epoch), epoch)
        x, y = self.batch(it)
        bd, x_sr, y_lr = self.generator_step(x, y)
        if self.config.weights.w_adv > 0:
            d_x_loss, d_y_loss = self.discriminator_step(x, y, x_sr, y_lr)
        else:
            d_x_loss = d_y_loss = 0.0
        bd.extras.update(d_x_loss=d_x_loss, d_y_loss=d_y_loss)
        self.state.loss_history.append({"iteration": it, "epoch": epoch, **bd.as_dict()})
        self.state.iteration = it + 1
        self.state.epoch = self.state.iteration // self.iterations_per_epoch
        return bd

    @property
    def total_iterations(self) -> int:
        n = self.config.epochs * self.iterations_per_epoch
        if self.config.max_iterations is not None:
            n = min(n, self.config.max_iterations)
        return n

    def run(self, n_steps: Optional[int] = None, checkpoint_path=None, log_every: int = 50) -> TrainState:
        end = self.total_iterations if n_steps is None else min(self.total_iterations, self.state.iteration + n_steps)
        while self.state.iteration < end:
            bd = self.step()
            it = self.state.iteration
            if log_every and it % log_every == 0:
                log.info("iter %d epoch %d total %.4f d_term %.4f", it, self.state.epoch, bd.total, bd.d_term)
            every = self.config.checkpoint_every
            if checkpoint_path and every and it % (every * self.iterations_per_epoch) == 0:
                self.save(checkpoint_path)
        return self.state

    # --- persistence ----------------------------------------------------

    def snapshot(self) -> TrainState:
        self.state.rng_state = {
            "noise": self.noise.get_state(),
            "pool_x": self.pool_x.state(),
            "pool_y": self.pool_y.state(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
        }
        return self.state

    def restore(self, state: TrainState):
        self.state = state
        r = state.rng_state
        if r:
            self.noise.set_state(r["noise"])
            self.pool_x.load_state(r["pool_x"])
            self.pool_y.load_state(r["pool_y"])
            self.opt_g.load_state_dict(r["opt_g"])
            self.opt_d.load_state_dict(r["opt_d"])

    def save(self, path):
        from .checkpoint import save_checkpoint

        save_checkpoint(self.bundle, self.snapshot(), path, config=self.config)

    @classmethod
    def resume(cls, path, data: PatchPair, resampler: Optional[Callable[[int], PatchPair]] = None) -> "Trainer":
        from .checkpoint import load_checkpoint

        bundle, state, config = load_checkpoint(path, with_config=True)
        if config is None:
            raise ConfigError(f"checkpoint {path} carries no training config")
        trainer = cls(config, data, bundle, resampler)
        trainer.restore(state)
        return trainer


def _as_patch_pair(data) -> PatchPair:
    if isinstance(data, PatchPair):
        return data
    if isinstance(data, DatasetManifest):
        return build_patch_pair(data)
    raise ParameterError(f"expected PatchPair or DatasetManifest, got {type(data).__name__}")


def manifest_resampler(manifest: DatasetManifest, base_dir=None) -> Optional[Callable[[int], PatchPair]]:
    """Fresh patches per epoch when the manifest asks for it, else None."""
    if not manifest.resample_each_epoch:
        return None
    return lambda epoch: build_patch_pair(manifest, base_dir, epoch=epoch)


def _make_trainer(config: TrainConfig, data) -> "Trainer":
    resampler = manifest_resampler(data) if isinstance(data, DatasetManifest) else None
    return Trainer(config, _as_patch_pair(data), resampler=resampler)


def train_sr_cyclegan(config: TrainConfig, data) -> tuple[ModelBundle, TrainState]:
    if config.variant != "sr-cyclegan":
        config = dataclasses.replace(config, variant="sr-cyclegan")
    trainer = _make_trainer(config, data)
    trainer.run()
    return trainer.bundle, trainer.snapshot()


def train_sr_unit(config: TrainConfig, data) -> tuple[ModelBundle, TrainState]:
    if config.variant != "sr-unit":
        config = dataclasses.replace(config, variant="sr-unit")
    trainer = _make_trainer(config, data)
    trainer.run()
    return trainer.bundle, trainer.snapshot()


def write_loss_csv(history: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
    return path
