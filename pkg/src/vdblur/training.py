"""Two-phase optimization: content-only generator training, then adversarial fine-tuning."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import queue
import threading
from collections import deque
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import SamplePair, VideoClip, build_samples
from .discriminator import Discriminator, DiscriminatorSpec, toy_discriminator_spec
from .errors import ConfigurationError, TrainingError
from .losses import LossWeights, adversarial_loss, combined_loss, content_loss, discriminator_loss
from .model import Generator, NetworkSpec, build_generator

log = logging.getLogger(__name__)

INIT_STD = 0.01
INIT_SCHEMES = ("fixed", "he")


@dataclass
class TrainConfig:
    batch_size: int = 4
    patch_size: int = 128
    init_std: float = INIT_STD
    init_scheme: str = "fixed"  # "fixed": N(0, init_std^2); "he": N(0, 2 / fan_in)
    lr_phase1: float = 1e-4
    lr_plateau: float = 1e-5
    lr_gan: float = 1e-5
    lr_disc: float | None = None  # defaults to lr_gan
    plateau_window: int = 1000
    plateau_patience: int = 5000
    alpha: float = 2e-4
    max_steps: int = 200_000
    seed: int = 0
    window_T: int = 5
    eval_every: int = 5000
    checkpoint_every: int = 10_000
    early_stop_evals: int = 0  # stop GAN phase after this many evals without a new best; 0 disables
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    momentum: float = 0.9
    grad_clip: float | None = None
    variant: str = "net3d"
    num_blocks: int = 14
    channels: int = 64
    stem_channels: int = 16
    head_channels: int = 256
    disc_stages: list = field(default_factory=lambda: [[2, 64], [3, 128], [4, 256], [5, 512]])
    disc_fc: list = field(default_factory=lambda: [4096, 2])
    val_clips: int = 1
    workers: int = 0
    flip: bool = True

    def __post_init__(self):
        for name in ("lr_phase1", "lr_plateau", "lr_gan", "init_std"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr_disc is not None and not self.lr_disc > 0:
            raise ConfigurationError("lr_disc must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init_scheme {self.init_scheme!r}; expected one of {INIT_SCHEMES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.window_T < 1 or self.window_T % 2 == 0:
            raise ConfigurationError("window_T must be a positive odd integer")
        if not self.alpha >= 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})

    def generator_spec(self, variant: str | None = None, T: int | None = None) -> NetworkSpec:
        return build_generator(
            variant or self.variant,
            self.window_T if T is None else T,
            num_blocks=self.num_blocks,
            channels=self.channels,
            stem_channels=self.stem_channels,
            head_channels=self.head_channels,
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            conv_stages=[tuple(s) for s in self.disc_stages],
            fc=list(self.disc_fc),
            input_size=(self.patch_size, self.patch_size),
        )


def toy_config(**kw) -> TrainConfig:
    """Desk-scale settings: reduced nets, small patches, short plateau windows.

    He-scaled init and Adam at a higher rate replace the full-scale recipe, which
    does not move a net this small within a desk-scale step budget.
    """
    base = dict(
        batch_size=4,
        patch_size=32,
        max_steps=10000,
        eval_every=1000,
        checkpoint_every=2000,
        plateau_window=250,
        plateau_patience=1000,
        optimizer="adam",
        init_scheme="he",
        lr_phase1=3e-3,
        lr_plateau=3e-4,
        lr_gan=1e-4,
        num_blocks=2,
        channels=8,
        stem_channels=4,
        head_channels=32,
        disc_stages=[[2, 4], [3, 8], [4, 8], [5, 8]],
        disc_fc=[16, 2],
    )
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# initialization


def init_weights(model: torch.nn.Module, seed: int, std: float = INIT_STD, scheme: str = "fixed") -> torch.nn.Module:
    """Gaussian kernels and FC weights, zero biases, BN scale 1 / shift 0.

    ``scheme="fixed"`` draws every weight from N(0, std^2). ``scheme="he"`` uses
    N(0, 2 / fan_in) per tensor, which small desk-scale nets need to train in a
    few thousand steps. Draws come from a numpy generator seeded with ``seed`` in
    parameter order, so the result is identical across runs and platforms.
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (torch.nn.BatchNorm2d, torch.nn.BatchNorm3d)):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.reset_running_stats()
        for name, p in model.named_parameters():
            if ".bn." in name or _is_bn_param(model, name):
                continue
            if p.dim() >= 2:
                sd = std if scheme == "fixed" else math.sqrt(2.0 / p[0].numel())
                p.copy_(torch.from_numpy(rng.normal(0.0, sd, size=tuple(p.shape))).to(p.dtype))
            else:
                p.zero_()
    return model


def _is_bn_param(model: torch.nn.Module, name: str) -> bool:
    owner = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
    return isinstance(owner, (torch.nn.BatchNorm2d, torch.nn.BatchNorm3d))


def make_generator(config: TrainConfig, variant: str | None = None, T: int | None = None, seed: int | None = None) -> Generator:
    g = Generator(config.generator_spec(variant, T))
    return init_weights(g, config.seed if seed is None else seed, config.init_std, config.init_scheme)


def make_discriminator(config: TrainConfig, seed: int | None = None) -> Discriminator:
    d = Discriminator(config.discriminator_spec())
    return init_weights(d, (config.seed if seed is None else seed) + 1, config.init_std, config.init_scheme)


def make_optimizer(config: TrainConfig, params, lr: float) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=config.momentum)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


# ---------------------------------------------------------------------------
# sampling


def augment(pair: SamplePair, rng, patch_size: int, flip: bool = True) -> SamplePair:
    """Random crop plus independent horizontal/vertical flips, shared by window and target."""
    from .data import FrameWindow

    w = pair.window
    H, W = pair.target.shape
    if H < patch_size or W < patch_size:
        raise ConfigurationError(f"frame {H}x{W} smaller than patch {patch_size}")
    oy = int(rng.integers(0, H - patch_size + 1))
    ox = int(rng.integers(0, W - patch_size + 1))
    hflip = flip and rng.random() < 0.5
    vflip = flip and rng.random() < 0.5

    def tf(a):
        a = a[..., oy : oy + patch_size, ox : ox + patch_size]
        if hflip:
            a = a[..., :, ::-1]
        if vflip:
            a = a[..., ::-1, :]
        return np.ascontiguousarray(a)

    return SamplePair(FrameWindow(tf(w.luma), tf(w.chroma_cb), tf(w.chroma_cr)), tf(pair.target))


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator: batch ``step`` does not depend on any earlier draw."""
    return np.random.default_rng([seed, step])


def sample_batch(samples: Sequence[SamplePair], config: TrainConfig, step: int):
    rng = batch_rng(config.seed, step)
    # distinct samples within a batch whenever the pool allows it
    idx = rng.choice(len(samples), size=config.batch_size, replace=config.batch_size > len(samples))
    pairs = [augment(samples[i], rng, config.patch_size, config.flip) for i in idx]
    x = np.stack([p.window.luma for p in pairs]).astype(np.float32)
    y = np.stack([p.target for p in pairs]).astype(np.float32)
    return torch.from_numpy(x), torch.from_numpy(y), idx


def iter_batches(samples, config: TrainConfig, start: int, stop: int) -> Iterator:
    """Batches for steps ``[start, stop)``; prefetched in a thread when ``workers > 0``."""
    if config.workers <= 0:
        for s in range(start, stop):
            yield (s, *sample_batch(samples, config, s))
        return
    q: queue.Queue = queue.Queue(maxsize=max(2, 2 * config.workers))
    done = object()
    stop_flag = threading.Event()

    def produce():
        for s in range(start, stop):
            if stop_flag.is_set():
                break
            q.put((s, *sample_batch(samples, config, s)))
        q.put(done)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            yield item
    finally:
        stop_flag.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)


# ---------------------------------------------------------------------------
# state


class PlateauDecay:
    """Single learning-rate drop once the smoothed loss stops improving."""

    def __init__(self, window: int, patience: int):
        self.window = window
        self.patience = patience
        self.losses: deque = deque(maxlen=window)
        self.best = math.inf
        self.best_step = 0
        self.decayed = False

    def update(self, step: int, loss: float) -> bool:
        """Record ``loss``; returns True on the step the decay fires."""
        self.losses.append(loss)
        if len(self.losses) < self.window:
            self.best_step = step
            return False
        smoothed = float(np.mean(self.losses))
        if smoothed < self.best:
            self.best = smoothed
            self.best_step = step
        elif not self.decayed and step - self.best_step >= self.patience:
            self.decayed = True
            return True
        return False

    def state(self) -> dict:
        return {"losses": list(self.losses), "best": self.best if math.isfinite(self.best) else None,
                "best_step": self.best_step, "decayed": self.decayed}

    def load(self, st: dict) -> None:
        self.losses = deque(st["losses"], maxlen=self.window)
        self.best = math.inf if st["best"] is None else st["best"]
        self.best_step = st["best_step"]
        self.decayed = st["decayed"]


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    opt_g: torch.optim.Optimizer
    phase: str = "generator"
    step: int = 0
    lr: float = 0.0
    discriminator: Discriminator | None = None
    opt_d: torch.optim.Optimizer | None = None
    plateau: PlateauDecay | None = None
    best_psnr: float | None = None
    best_step: int | None = None
    best_generator: dict | None = None
    evals_since_best: int = 0
    history: list = field(default_factory=list)

    def save(self, path) -> Path:
        manifest: dict[str, Any] = {
            "phase": self.phase,
            "step": self.step,
            "lr": self.lr,
            "variant": self.generator.spec.variant,
            "T": self.generator.spec.T,
            "generator_spec": self.generator.spec.to_dict(),
            "config": self.config.to_dict(),
            "best_psnr": self.best_psnr,
            "best_step": self.best_step,
            "evals_since_best": self.evals_since_best,
            "plateau": self.plateau.state() if self.plateau else None,
        }
        arrays: dict[str, dict] = {"generator": self.generator.state_dict()}
        meta, opt_arrays = ckpt.flatten_optimizer(self.opt_g)
        manifest["optim_generator"] = meta
        arrays["optim_generator"] = opt_arrays
        if self.discriminator is not None:
            manifest["discriminator_spec"] = self.discriminator.spec.to_dict()
            arrays["discriminator"] = self.discriminator.state_dict()
            meta, opt_arrays = ckpt.flatten_optimizer(self.opt_d)
            manifest["optim_discriminator"] = meta
            arrays["optim_discriminator"] = opt_arrays
        if self.best_generator is not None:
            arrays["best_generator"] = self.best_generator
        return ckpt.save_archive(path, manifest, arrays)

    @classmethod
    def load(cls, path) -> "TrainState":
        manifest, arrays = ckpt.load_archive(path)
        config = TrainConfig.from_dict(manifest["config"])
        g = Generator(NetworkSpec.from_dict(manifest["generator_spec"]))
        ckpt.load_module_arrays(g, arrays["generator"])
        opt_g = make_optimizer(config, g.parameters(), manifest["lr"])
        ckpt.restore_optimizer(opt_g, manifest["optim_generator"], arrays.get("optim_generator", {}))
        st = cls(config=config, generator=g, opt_g=opt_g, phase=manifest["phase"], step=manifest["step"], lr=manifest["lr"])
        if "discriminator_spec" in manifest:
            d = Discriminator(DiscriminatorSpec.from_dict(manifest["discriminator_spec"]))
            ckpt.load_module_arrays(d, arrays["discriminator"])
            opt_d = make_optimizer(config, d.parameters(), config.lr_disc or config.lr_gan)
            ckpt.restore_optimizer(opt_d, manifest["optim_discriminator"], arrays.get("optim_discriminator", {}))
            st.discriminator, st.opt_d = d, opt_d
        if manifest.get("plateau") is not None:
            st.plateau = PlateauDecay(config.plateau_window, config.plateau_patience)
            st.plateau.load(manifest["plateau"])
        st.best_psnr = manifest.get("best_psnr")
        st.best_step = manifest.get("best_step")
        st.evals_since_best = manifest.get("evals_since_best", 0)
        if "best_generator" in arrays:
            st.best_generator = {k: torch.from_numpy(np.array(v)) for k, v in arrays["best_generator"].items()}
        return st

    def best_model(self) -> Generator:
        """Generator with the best-validation weights (or the current ones if never evaluated)."""
        g = copy.deepcopy(self.generator)
        if self.best_generator is not None:
            g.load_state_dict(self.best_generator)
        return g


def load_generator(path, best: bool = True) -> Generator:
    """Generator from a checkpoint archive, preferring the best-validation snapshot."""
    manifest, arrays = ckpt.load_archive(path)
    g = Generator(NetworkSpec.from_dict(manifest["generator_spec"]))
    ns = "best_generator" if best and "best_generator" in arrays else "generator"
    ckpt.load_module_arrays(g, arrays[ns])
    return g.eval()


# ---------------------------------------------------------------------------
# loops


LOG_FIELDS = ("step", "content_loss", "adv_loss", "d_loss", "lr", "val_psnr")


class TrainLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(LOG_FIELDS)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(["" if row.get(k) is None else row[k] for k in LOG_FIELDS])


def _as_samples(dataset, T: int) -> list[SamplePair]:
    if dataset and isinstance(dataset[0], SamplePair):
        return list(dataset)
    return build_samples(dataset, T)


def _check_finite(value: torch.Tensor, what: str, step: int, idx) -> None:
    if not torch.isfinite(value).all():
        raise TrainingError(f"non-finite {what} at step {step} (batch sample indices {list(map(int, idx))})")


def _clip(config: TrainConfig, params) -> None:
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)


def _validate(state: TrainState, val_pairs) -> float | None:
    if not val_pairs:
        return None
    from .evaluation import validation_psnr

    return validation_psnr(state.generator, val_pairs, state.generator.spec.T)


def _record_eval(state: TrainState, psnr: float | None) -> None:
    if psnr is None:
        return
    if state.best_psnr is None or psnr > state.best_psnr:
        state.best_psnr = psnr
        state.best_step = state.step
        state.best_generator = {k: v.detach().clone() for k, v in state.generator.state_dict().items()}
        state.evals_since_best = 0
    else:
        state.evals_since_best += 1


def _paths(out_dir):
    if out_dir is None:
        return None, None
    out = Path(out_dir)
    return out / "checkpoints", out / "logs" / "train_log.csv"


def _maybe_checkpoint(state: TrainState, ckpt_dir: Path | None, final: bool = False) -> None:
    if ckpt_dir is None:
        return
    if final or state.step % state.config.checkpoint_every == 0:
        state.save(ckpt_dir / f"{state.phase}_{state.step:07d}.ckpt")
        state.save(ckpt_dir / f"{state.phase}_latest.ckpt")


def new_generator_state(config: TrainConfig) -> TrainState:
    g = make_generator(config)
    opt = make_optimizer(config, g.parameters(), config.lr_phase1)
    return TrainState(
        config=config, generator=g, opt_g=opt, lr=config.lr_phase1,
        plateau=PlateauDecay(config.plateau_window, config.plateau_patience),
    )


def train_generator(
    config: TrainConfig,
    dataset,
    out_dir=None,
    val_pairs: Sequence[tuple[VideoClip, VideoClip]] = (),
    resume=None,
    callback=None,
) -> TrainState:
    """Phase 1: minimize the content loss only.

    ``dataset`` is a list of (blurry, sharp) clip pairs or prepared samples.
    ``resume`` is a checkpoint path or a :class:`TrainState` to continue from.
    """
    samples = _as_samples(dataset, config.window_T)
    if not samples:
        raise TrainingError("empty training set")
    if resume is not None:
        state = resume if isinstance(resume, TrainState) else TrainState.load(resume)
        if state.phase != "generator":
            raise TrainingError("can only resume phase-1 training from a phase-1 checkpoint")
        state.config = config
        state.plateau.window = config.plateau_window
        state.plateau.patience = config.plateau_patience
    else:
        state = new_generator_state(config)
    ckpt_dir, log_path = _paths(out_dir)
    tlog = TrainLog(log_path)
    g = state.generator
    g.train()

    for step, x, y, idx in iter_batches(samples, config, state.step, config.max_steps):
        state.opt_g.zero_grad(set_to_none=True)
        out = g(x)
        loss = content_loss(y, out)
        _check_finite(loss, "content loss", step, idx)
        loss.backward()
        _clip(config, g.parameters())
        state.opt_g.step()
        lval = float(loss.detach())
        state.step = step + 1
        if state.plateau.update(step, lval):
            state.lr = config.lr_plateau
            set_lr(state.opt_g, state.lr)
            log.info("step %d: loss plateau, lr -> %g", step, state.lr)
        row = {"step": step, "content_loss": lval, "lr": state.lr}
        if config.eval_every and state.step % config.eval_every == 0:
            row["val_psnr"] = _validate(state, val_pairs)
            _record_eval(state, row["val_psnr"])
            g.train()
        state.history.append(row)
        tlog.write(row)
        if callback is not None:
            callback(state, row)
        _maybe_checkpoint(state, ckpt_dir)

    _maybe_checkpoint(state, ckpt_dir, final=True)
    return state


def start_gan(config: TrainConfig, generator_checkpoint) -> TrainState:
    """Phase-2 state seeded from a phase-1 checkpoint (path or TrainState)."""
    if isinstance(generator_checkpoint, TrainState):
        g = copy.deepcopy(generator_checkpoint.generator)
    elif isinstance(generator_checkpoint, Generator):
        g = copy.deepcopy(generator_checkpoint)
    else:
        g = load_generator(generator_checkpoint, best=False)
    if g.spec.T != config.window_T:
        raise ConfigurationError(f"checkpoint window T={g.spec.T} != config window_T={config.window_T}")
    d = make_discriminator(config)
    opt_g = make_optimizer(config, g.parameters(), config.lr_gan)
    opt_d = make_optimizer(config, d.parameters(), config.lr_disc or config.lr_gan)
    return TrainState(config=config, generator=g, opt_g=opt_g, phase="gan", lr=config.lr_gan, discriminator=d, opt_d=opt_d)


def train_gan(
    config: TrainConfig,
    dataset,
    generator_checkpoint=None,
    out_dir=None,
    val_pairs: Sequence[tuple[VideoClip, VideoClip]] = (),
    resume=None,
    callback=None,
) -> TrainState:
    """Phase 2: alternate one discriminator and one generator update per step.

    The generator minimizes ``content + alpha * adversarial``. When validation
    clips are given, PSNR is tracked every ``eval_every`` steps (and at the end)
    and the best snapshot is kept in ``state.best_generator``.
    """
    samples = _as_samples(dataset, config.window_T)
    if not samples:
        raise TrainingError("empty training set")
    if resume is not None:
        state = resume if isinstance(resume, TrainState) else TrainState.load(resume)
        if state.phase != "gan":
            raise TrainingError("resume checkpoint is not from the adversarial phase")
        state.config = config
    else:
        if generator_checkpoint is None:
            raise TrainingError("adversarial fine-tuning needs a phase-1 generator checkpoint")
        state = start_gan(config, generator_checkpoint)
    ckpt_dir, log_path = _paths(out_dir)
    tlog = TrainLog(log_path)
    g, d = state.generator, state.discriminator
    g.train()
    d.train()
    weights = config.weights

    if state.step == 0 and val_pairs:
        _record_eval(state, _validate(state, val_pairs))
        g.train()

    for step, x, y, idx in iter_batches(samples, config, state.step, config.max_steps):
        out = g(x)

        state.opt_d.zero_grad(set_to_none=True)
        d_loss = discriminator_loss(d.p_real(y), d.p_real(out.detach()))
        _check_finite(d_loss, "discriminator loss", step, idx)
        d_loss.backward()
        _clip(config, d.parameters())
        state.opt_d.step()

        state.opt_g.zero_grad(set_to_none=True)
        c_loss = content_loss(y, out)
        if weights.alpha == 0.0:
            a_loss = None
            total = combined_loss(c_loss, 0.0, weights)
        else:
            a_loss = adversarial_loss(d.p_real(out))
            total = combined_loss(c_loss, a_loss, weights)
        _check_finite(total, "generator loss", step, idx)
        total.backward()
        # the discriminator must not move during the generator update
        d.zero_grad(set_to_none=True)
        _clip(config, g.parameters())
        state.opt_g.step()

        state.step = step + 1
        row = {
            "step": step,
            "content_loss": float(c_loss.detach()),
            "adv_loss": None if a_loss is None else float(a_loss.detach()),
            "d_loss": float(d_loss.detach()),
            "lr": state.lr,
        }
        last = state.step == config.max_steps
        if val_pairs and ((config.eval_every and state.step % config.eval_every == 0) or last):
            row["val_psnr"] = _validate(state, val_pairs)
            _record_eval(state, row["val_psnr"])
            g.train()
        state.history.append(row)
        tlog.write(row)
        if callback is not None:
            callback(state, row)
        _maybe_checkpoint(state, ckpt_dir)
        if config.early_stop_evals and state.evals_since_best >= config.early_stop_evals:
            log.info("step %d: validation PSNR stopped improving, stopping early", step)
            break

    _maybe_checkpoint(state, ckpt_dir, final=True)
    return state
