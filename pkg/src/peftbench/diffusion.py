"""Conditional denoising-diffusion training and ancestral sampling.

Training uses the standard noise-prediction objective: draw a timestep per
item, corrupt with the closed-form forward process, regress the injected
noise under MSE. Only the strategy's masked/injected parameters update; the
condition embedding table is frozen by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .peft import AdaptedModel, trainable_count
from .rng import RngStream
from .training import EarlyStopper, Optimizer, TrainConfig, TrainReport, total_loss


@dataclass
class DiffusionConfig:
    timesteps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_size: int = 16
    cond_vocab: int = 8
    # the (beta_start, beta_end) range is quoted at this step count and
    # rescaled to `timesteps`, keeping the terminal noise level comparable
    reference_timesteps: int = 1000
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.timesteps < 2:
            raise ValueError("timesteps must be >= 2")
        scale = self.reference_timesteps / self.timesteps
        betas = np.linspace(self.beta_start, self.beta_end, self.timesteps) * scale
        betas = np.clip(betas, 0.0, 0.999)
        if not (0.0 < betas[0] < betas[-1] < 1.0):
            raise ValueError(
                f"invalid beta schedule: start {betas[0]:.3g}, end {betas[-1]:.3g}"
            )
        self.betas = betas
        self.alpha_bar = np.cumprod(1.0 - betas)


def noise_images(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                 cfg: DiffusionConfig) -> np.ndarray:
    """Forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    ab = cfg.alpha_bar[np.asarray(t)].reshape(-1, 1, 1, 1)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _fixed_eval_noise(x: np.ndarray, cfg: DiffusionConfig, rng: RngStream):
    t = rng.child("t").integers(0, cfg.timesteps, (len(x),))
    eps = rng.child("eps").normal(x.shape)
    return t, eps


def _eval_loss(adapted: AdaptedModel, x, cond, t, eps, cfg: DiffusionConfig,
               batch_size: int) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            sl = slice(i, i + batch_size)
            xt = noise_images(x[sl], t[sl], eps[sl], cfg)
            pred = adapted.forward(xt, train=False,
                                   aux={"t": t[sl], "cond": cond[sl]})
            total += total_loss(pred, ad.Tensor(eps[sl]), "mse").item() * len(x[sl])
    return total / len(x)


def diffusion_train(adapted: AdaptedModel, splits: dict, dcfg: DiffusionConfig,
                    tcfg: TrainConfig) -> TrainReport:
    """Fine-tune a denoiser on {"train"|"val"|"test": (images, condition ids)}.

    The validation metric (and TrainReport metrics) is the negative
    denoising MSE under a fixed per-split noise draw, so higher is better
    and the early-stopping machinery carries over unchanged.
    """
    if adapted.base.arch_id != "mini-denoiser":
        raise ValueError(
            f"diffusion_train expects a mini-denoiser, got {adapted.base.arch_id}"
        )
    for key in ("train", "val", "test"):
        if key not in splits or len(splits[key][0]) == 0:
            raise ValueError(f"empty or missing split: {key}")
    for _, cond in splits.values():
        if len(cond) and (np.min(cond) < 0 or np.max(cond) >= dcfg.cond_vocab):
            raise ValueError(f"condition id out of range [0, {dcfg.cond_vocab})")

    x_train, cond_train = splits["train"]
    rng = RngStream(tcfg.seed).child("diffusion-train")
    val_t, val_eps = _fixed_eval_noise(splits["val"][0], dcfg, rng.child("val-noise"))
    test_t, test_eps = _fixed_eval_noise(splits["test"][0], dcfg,
                                         rng.child("test-noise"))
    opt = Optimizer(adapted.trainable_records(), tcfg)
    stopper = EarlyStopper(tcfg.patience)
    curve = []
    best_state = None
    epochs_run = 0
    stopped_early = False
    for epoch in range(tcfg.max_epochs):
        epochs_run = epoch + 1
        erng = rng.child(f"epoch-{epoch}")
        order = erng.child("shuffle").permutation(len(x_train))
        losses = []
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i : i + tcfg.batch_size]
            t = erng.child(f"t-{i}").integers(0, dcfg.timesteps, (len(idx),))
            eps = erng.child(f"eps-{i}").normal(x_train[idx].shape)
            xt = noise_images(x_train[idx], t, eps, dcfg)
            pred = adapted.forward(xt, train=True,
                                   aux={"t": t, "cond": cond_train[idx]})
            loss = total_loss(pred, ad.Tensor(eps), "mse")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item() * len(idx))
        train_loss = float(np.sum(losses) / len(order))
        val_metric = -_eval_loss(adapted, splits["val"][0], splits["val"][1],
                                 val_t, val_eps, dcfg, tcfg.batch_size)
        curve.append((train_loss, val_metric))
        if stopper.update(val_metric, epoch):
            best_state = adapted.state_snapshot()
        if stopper.should_stop:
            stopped_early = True
            break

    if best_state is not None:
        adapted.load_snapshot(best_state)
    test_metric = -_eval_loss(adapted, splits["test"][0], splits["test"][1],
                              test_t, test_eps, dcfg, tcfg.batch_size)
    return TrainReport(
        best_val_metric=float(stopper.best),
        test_metric=float(test_metric),
        epochs_run=epochs_run,
        curve=curve,
        stopped_early=stopped_early,
        trainable_params=trainable_count(adapted)[0],
    )


def diffusion_sample(model, cond_ids, n: int, rng: RngStream,
                     dcfg: DiffusionConfig) -> np.ndarray:
    """Ancestral sampling; returns (n, 1, s, s) images, deterministic in rng."""
    s = dcfg.image_size
    if n == 0:
        return np.zeros((0, 1, s, s))
    cond = np.broadcast_to(np.asarray(cond_ids), (n,)).copy()
    betas = dcfg.betas
    alphas = 1.0 - betas
    abar = dcfg.alpha_bar
    x = rng.child("init").normal((n, 1, s, s))
    with ad.no_grad():
        for t in range(dcfg.timesteps - 1, -1, -1):
            taux = np.full(n, t, dtype=np.int64)
            eps_hat = model.forward(x, train=False,
                                    aux={"t": taux, "cond": cond}).data
            x = (x - (betas[t] / np.sqrt(1.0 - abar[t])) * eps_hat) / np.sqrt(alphas[t])
            if t > 0:
                var = (1.0 - abar[t - 1]) / (1.0 - abar[t]) * betas[t]
                x = x + np.sqrt(var) * rng.child(f"z-{t}").normal(x.shape)
    return x
