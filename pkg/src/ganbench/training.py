"""Adversarial losses, the Adam optimizer and the deterministic training loop.

The discriminator and generator minimize the usual binary cross-entropy
objectives

    L_D = -mean(log D(x)) - mean(log(1 - D(G(z))))
    L_G = -mean(log D(G(z)))

with probabilities clamped to [1e-7, 1 - 1e-7] before the logs. Each training
step performs one discriminator update on (real batch, detached fakes) and
then one generator update on the same fakes through the refreshed
discriminator.

Everything stochastic inside a step is drawn from an rng derived from
(run seed, step index), so runs are bit-reproducible and resuming from a
checkpoint continues the exact same trajectory.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import AutodiffError, Tensor, backward, no_grad
from .checkpoint import gather_state, load_checkpoint, restore_state, save_checkpoint
from .data import Dataset, load_items, save_image_grid
from .models import Discriminator, Generator, build_model
from .rng import Rng

__all__ = ["LossValue", "TrainingError", "d_loss", "g_loss", "Adam", "train_step",
           "run_training", "TrainResult", "latest_checkpoint"]

PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class LossValue:
    """Scalar adversarial loss with its per-term breakdown.

    ``loss`` stays attached to the graph for backward; ``real_term`` and
    ``fake_term`` are plain floats with ``value == real_term + fake_term``.
    """

    loss: Tensor
    real_term: float
    fake_term: float

    @property
    def value(self) -> float:
        return float(self.loss.data)


def _check_probs(t: Tensor, name: str) -> None:
    if np.any(t.data < 0.0) or np.any(t.data > 1.0):
        raise ValueError(f"{name} must be probabilities in [0, 1]")


def d_loss(d_real: Tensor, d_fake: Tensor) -> LossValue:
    """Discriminator BCE: -mean(log d_real) - mean(log(1 - d_fake))."""
    _check_probs(d_real, "d_real")
    _check_probs(d_fake, "d_fake")
    real_term = -(d_real.clip(PROB_EPS, 1.0 - PROB_EPS).log().mean())
    fake_term = -((1.0 - d_fake.clip(PROB_EPS, 1.0 - PROB_EPS)).log().mean())
    return LossValue(loss=real_term + fake_term,
                     real_term=float(real_term.data), fake_term=float(fake_term.data))


def g_loss(d_fake: Tensor) -> LossValue:
    """Non-saturating generator BCE: -mean(log d_fake)."""
    _check_probs(d_fake, "d_fake")
    fake_term = -(d_fake.clip(PROB_EPS, 1.0 - PROB_EPS).log().mean())
    return LossValue(loss=fake_term, real_term=0.0, fake_term=float(fake_term.data))


class Adam:
    """Adaptive-moment optimizer over a named parameter list."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 2e-4,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= self.lr * update

    def state_blobs(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.named_params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def state_targets(self, prefix: str) -> dict[str, np.ndarray]:
        return self.state_blobs(prefix)


def train_step(generator: Generator, discriminator: Discriminator, real: Tensor,
               opt_g: Adam, opt_d: Adam, rng: Rng) -> tuple[LossValue, LossValue]:
    """One discriminator update then one generator update on a real batch."""
    cfg = generator.cfg
    n = real.shape[0]
    z = Tensor(rng.derive("latent").normal((n, cfg.latent_dim), dtype=cfg.np_dtype()))
    try:
        fake = generator.forward(z, rng=rng.derive("gen"), training=True)

        opt_d.zero_grad()
        d_real = discriminator.forward(real, training=True)
        d_fake_det = discriminator.forward(fake.detach(), training=True)
        loss_d = d_loss(d_real, d_fake_det)
        backward(loss_d.loss)
        opt_d.step()

        opt_g.zero_grad()
        d_fake = discriminator.forward(fake, training=True)
        loss_g = g_loss(d_fake)
        backward(loss_g.loss)
        opt_g.step()
    except AutodiffError as exc:
        raise TrainingError(f"non-finite value during training step: {exc}") from exc
    if not (np.isfinite(loss_d.value) and np.isfinite(loss_g.value)):
        raise TrainingError(
            f"non-finite losses: L_D={loss_d.value}, L_G={loss_g.value}")
    return loss_d, loss_g


@dataclass
class TrainResult:
    steps: int
    out_dir: Path
    final_checkpoint: Path
    last_d_loss: float
    last_g_loss: float
    seconds: float


def latest_checkpoint(out_dir: Path) -> Optional[Path]:
    candidates = sorted(Path(out_dir).glob("checkpoint_*.ckpt"))
    return candidates[-1] if candidates else None


def _format_log_line(step: int, ld: float, lg: float) -> str:
    return f"{step}\t{ld:.8e}\t{lg:.8e}\n"


def run_training(run_cfg, dataset: Dataset, resume: bool = False,
                 echo: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train per the run config, writing logs/checkpoints/grids under out_dir.

    With ``resume=True`` the loop restores the newest checkpoint in out_dir
    and continues; the resulting loss log and checkpoints are bit-identical
    to an uninterrupted run with the same config.
    """
    t0 = time.perf_counter()
    cfg = run_cfg
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())

    model_cfg = cfg.model
    generator, discriminator = build_model(model_cfg)
    opt_g = Adam(generator.named_parameters(), lr=cfg.train.lr,
                 beta1=cfg.train.beta1, beta2=cfg.train.beta2)
    opt_d = Adam(discriminator.named_parameters(), lr=cfg.train.lr,
                 beta1=cfg.train.beta1, beta2=cfg.train.beta2)

    train_ids = dataset.split_ids("train")
    bs = cfg.train.batch_size
    if len(train_ids) < bs:
        raise TrainingError(
            f"batch_size {bs} exceeds the training split ({len(train_ids)} items)")
    batches_per_epoch = len(train_ids) // bs

    root = Rng(cfg.seed)
    dtype = model_cfg.np_dtype()
    sample_latents = root.derive("sample_latents").normal(
        (cfg.train.sample_count, model_cfg.latent_dim), dtype=dtype)

    log_path = out_dir / "loss.log"
    start_step = 0
    if resume:
        ckpt_path = latest_checkpoint(out_dir)
        if ckpt_path is None:
            raise TrainingError(f"resume requested but no checkpoint found in {out_dir}")
        ckpt = load_checkpoint(ckpt_path)
        restore_state(ckpt, model_cfg, generator, discriminator, opt_g, opt_d)
        start_step = ckpt.step
        if log_path.exists():
            kept = [line for line in log_path.read_text().splitlines(keepends=True)
                    if line.strip() and int(line.split("\t", 1)[0]) <= start_step]
            log_path.write_text("".join(kept))
        if echo:
            echo(f"resumed from {ckpt_path.name} at step {start_step}")
    else:
        log_path.write_text("")

    epoch = -1
    order = None
    ld = lg = float("nan")
    with log_path.open("a") as log:
        for step in range(start_step + 1, cfg.train.steps + 1):
            this_epoch = (step - 1) // batches_per_epoch
            if this_epoch != epoch:
                epoch = this_epoch
                perm = root.derive("epoch_order", epoch).permutation(len(train_ids))
                order = [train_ids[i] for i in perm]
            idx = (step - 1) % batches_per_epoch
            batch_ids = order[idx * bs:(idx + 1) * bs]
            images = load_items(dataset, batch_ids, model_cfg.img_size, dtype=dtype)
            real = Tensor(images)

            step_rng = root.derive("step", step)
            try:
                loss_d, loss_g = train_step(generator, discriminator, real,
                                            opt_g, opt_d, step_rng)
            except TrainingError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            ld, lg = loss_d.value, loss_g.value
            log.write(_format_log_line(step, ld, lg))
            log.flush()

            if echo and (step % max(1, cfg.train.steps // 20) == 0 or step == 1):
                echo(f"step {step}/{cfg.train.steps}  L_D={ld:.4f}  L_G={lg:.4f}")
            if cfg.train.sample_interval and step % cfg.train.sample_interval == 0:
                _write_samples(generator, sample_latents, out_dir, step)
            if (cfg.train.checkpoint_interval and
                    step % cfg.train.checkpoint_interval == 0):
                _write_checkpoint(out_dir, model_cfg, step, generator, discriminator,
                                  opt_g, opt_d)

    final_step = cfg.train.steps
    final = out_dir / f"checkpoint_{final_step:08d}.ckpt"
    if not final.exists():
        _write_checkpoint(out_dir, model_cfg, final_step, generator, discriminator,
                          opt_g, opt_d)
    return TrainResult(steps=final_step, out_dir=out_dir, final_checkpoint=final,
                       last_d_loss=ld, last_g_loss=lg,
                       seconds=time.perf_counter() - t0)


def _write_samples(generator: Generator, latents: np.ndarray, out_dir: Path,
                   step: int) -> None:
    with no_grad():
        images = generator.forward(Tensor(latents), training=False).data
    save_image_grid(images, out_dir / f"samples_{step:08d}.png")


def _write_checkpoint(out_dir: Path, model_cfg, step: int, generator, discriminator,
                      opt_g: Adam, opt_d: Adam) -> None:
    blobs = gather_state(generator, discriminator, opt_g, opt_d)
    save_checkpoint(out_dir / f"checkpoint_{step:08d}.ckpt", model_cfg, step,
                    {"opt_g_t": opt_g.t, "opt_d_t": opt_d.t}, blobs)
