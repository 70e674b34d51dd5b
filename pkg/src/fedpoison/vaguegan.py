"""Suppressed-loss conditional GAN for data poisoning.

The discriminator's output is scaled by (1 + kappa) inside the minimax loss,
which caps the generator's attainable fidelity: trained samples stay
statistically close to the real data but keep a controlled amount of noise.
kappa = 0 recovers a regular GAN (used only for the augmentation baseline).

Includes the label-free variant (auxiliary classifier head sharing the
discriminator's hidden trunk, trained on a mutual-information lower bound)
and the closed-form optimal-discriminator / equilibrium formulas used as
numerical oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .data import Dataset
from .seeding import substream

LOG_CLAMP = 1e-7

GEN_HIDDEN_DEFAULT = (128, 256, 256, 512)
DISC_HIDDEN_DEFAULT = (512, 256, 256, 128)


@dataclass(frozen=True)
class CodeSpec:
    """Latent code layout for the label-free variant."""

    categories: int
    style_dims: int = 2

    def __post_init__(self):
        if self.categories < 2:
            raise ValueError("need at least 2 categorical codes")
        if self.style_dims < 0:
            raise ValueError("style_dims must be >= 0")

    @property
    def width(self) -> int:
        return self.categories + self.style_dims

    def prior_entropy(self) -> float:
        """Entropy of the code prior: uniform categorical + U(-1,1) styles."""
        return float(np.log(self.categories) + self.style_dims * np.log(2.0))


@dataclass(frozen=True)
class GanConfig:
    kappa: float
    epochs: int
    seed: int
    noise_dim: int = 64
    gen_hidden: tuple[int, ...] = GEN_HIDDEN_DEFAULT
    disc_hidden: tuple[int, ...] = DISC_HIDDEN_DEFAULT
    # full-dataset batches mean one optimizer step per epoch, so the usual
    # minibatch GAN rate (2e-4) moves far too little; 1e-3 suits E in the
    # hundreds
    adam_lr: float = 1e-3
    adam_beta1: float = 0.5
    # adversarial-tail split: when set, the first (epochs - adv_epochs)
    # epochs regress the conditional generator onto same-class samples
    # before the suppressed adversarial game runs for adv_epochs. Tiny
    # shards cannot reach a semi-fitted state through the adversarial
    # objective alone; the warm-up supplies the fit, the tail the vagueness.
    adv_epochs: Optional[int] = None
    warmup_lr: float = 3e-4
    lambda_mi: float = 1.0
    code_spec: Optional[CodeSpec] = None
    gen_arch: Optional[nn.ArchSpec] = None
    disc_arch: Optional[nn.ArchSpec] = None

    def __post_init__(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1); attacks use (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if self.lambda_mi < 0:
            raise ValueError("lambda_mi must be >= 0")
        if self.adv_epochs is not None and not 1 <= self.adv_epochs <= self.epochs:
            raise ValueError("adv_epochs must lie in [1, epochs]")
        object.__setattr__(self, "gen_hidden", tuple(self.gen_hidden))
        object.__setattr__(self, "disc_hidden", tuple(self.disc_hidden))

    @property
    def warmup_epochs(self) -> int:
        return 0 if self.adv_epochs is None else self.epochs - self.adv_epochs


@dataclass(frozen=True)
class GanModel:
    generator: nn.ParamVector
    discriminator: nn.ParamVector
    config: GanConfig
    q_head: Optional[nn.ParamVector] = None

    def __post_init__(self):
        if (self.q_head is not None) != (self.config.code_spec is not None):
            raise ValueError("q_head present iff config has a code_spec")


def _gen_arch(cfg: GanConfig, feature_dim: int, cond_dim: int) -> nn.ArchSpec:
    if cfg.gen_arch is not None:
        return cfg.gen_arch
    dims = (cfg.noise_dim + cond_dim,) + cfg.gen_hidden + (feature_dim,)
    return nn.mlp_arch(dims, "sigmoid_bce", activation="leaky_relu", hidden_bn=True)


def _disc_arch(cfg: GanConfig, feature_dim: int, cond_dim: int) -> nn.ArchSpec:
    if cfg.disc_arch is not None:
        return cfg.disc_arch
    dims = (feature_dim + cond_dim,) + cfg.disc_hidden + (1,)
    return nn.mlp_arch(dims, "sigmoid_bce", activation="leaky_relu", hidden_bn=True)


def vague_loss_terms(d_real: np.ndarray, d_fake: np.ndarray,
                     kappa: float) -> tuple[float, float]:
    """Discriminator and generator losses with (1+kappa)-scaled outputs.

    Log arguments are clamped into [1e-7, 1]; the region where
    (1+kappa)*D exceeds 1 is absorbed by the clamp.
    """
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must lie in [0, 1)")
    a_real = np.clip((1.0 + kappa) * np.asarray(d_real, dtype=np.float64), LOG_CLAMP, 1.0)
    a_fake = np.clip(1.0 - (1.0 + kappa) * np.asarray(d_fake, dtype=np.float64), LOG_CLAMP, 1.0)
    disc_loss = float(-(np.log(a_real).mean() + np.log(a_fake).mean()))
    gen_loss = float(np.log(a_fake).mean())
    return disc_loss, gen_loss


def _vague_grads(d_real: np.ndarray, d_fake: np.ndarray, kappa: float):
    """Gradients of the two losses w.r.t. the discriminator probabilities.

    Returns (disc_loss, gen_loss, d_disc/d_real, d_disc/d_fake, d_gen/d_fake);
    clamped samples contribute zero gradient.
    """
    k1 = 1.0 + kappa
    n_r = d_real.shape[0]
    n_f = d_fake.shape[0]
    raw_real = k1 * d_real
    raw_fake = 1.0 - k1 * d_fake
    a_real = np.clip(raw_real, LOG_CLAMP, 1.0)
    a_fake = np.clip(raw_fake, LOG_CLAMP, 1.0)
    live_r = (raw_real > LOG_CLAMP) & (raw_real < 1.0)
    live_f = (raw_fake > LOG_CLAMP) & (raw_fake < 1.0)
    disc_loss = float(-(np.log(a_real).mean() + np.log(a_fake).mean()))
    gen_loss = float(np.log(a_fake).mean())
    g_disc_real = np.where(live_r, -(k1 / a_real) / n_r, 0.0)
    g_disc_fake = np.where(live_f, (k1 / a_fake) / n_f, 0.0)
    g_gen_fake = np.where(live_f, -(k1 / a_fake) / n_f, 0.0)
    return disc_loss, gen_loss, g_disc_real, g_disc_fake, g_gen_fake


def _gen_grads(d_fake: np.ndarray, kappa: float) -> tuple[float, np.ndarray]:
    """Generator loss and its gradient w.r.t. the fake-batch probabilities."""
    _, gen_loss, _, _, g_gen = _vague_grads(d_fake, d_fake, kappa)
    return gen_loss, g_gen


def optimal_discriminator(p_d: np.ndarray, p_g: np.ndarray, kappa: float) -> np.ndarray:
    """Closed-form maximizer of the scaled minimax integrand per support point.

    Points where both densities vanish are undefined and returned as NaN.
    """
    p_d = np.asarray(p_d, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    if p_d.shape != p_g.shape:
        raise ValueError("densities must share a support")
    if (p_d < 0).any() or (p_g < 0).any():
        raise ValueError("densities must be nonnegative")
    total = p_d + p_g
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p_d / ((1.0 + kappa) * total)
    out = np.where(total > 0, out, np.nan)
    return out


def equilibrium_ratio(kappa: float) -> float:
    """Density ratio the suppressed generator settles at: (1-kappa)/(1+kappa)."""
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must lie in [0, 1)")
    return (1.0 - kappa) / (1.0 + kappa)


def mi_lower_bound(q_probs: np.ndarray, codes: np.ndarray, prior_entropy: float) -> float:
    """Variational mutual-information lower bound for categorical codes:
    mean log Q(code|x) + H(prior). Zero predicted probabilities clamp at 1e-7.
    """
    q = np.asarray(q_probs, dtype=np.float64)
    c = np.asarray(codes, dtype=np.int64)
    if q.ndim != 2 or c.shape != (q.shape[0],):
        raise ValueError("q_probs must be (n, k) with one code per row")
    picked = np.clip(q[np.arange(q.shape[0]), c], LOG_CLAMP, None)
    return float(np.log(picked).mean() + prior_entropy)


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _disc_step(d_pv, opt_d, real_in, fake_in, kappa):
    """One discriminator update on the combined real+fake batch.

    Real and fake rows go through a single forward so batch-norm uses joint
    statistics; normalizing the two groups separately would cancel exactly
    the first-moment differences the discriminator must detect.
    """
    n = real_in.shape[0]
    p, cache = nn._forward_cache(d_pv, np.vstack([real_in, fake_in]), True)
    disc_loss, _, g_real, g_fake, _ = _vague_grads(p[:n], p[n:], kappa)
    dpre = nn._head_backward("sigmoid_bce", p, np.vstack([g_real, g_fake]))
    grad, _ = nn._backward(d_pv, cache, dpre)
    d_pv = nn.optimizer_step(opt_d, d_pv, d_pv.with_values(grad))
    d_pv = nn._bn_stat_update(d_pv, cache)
    return d_pv, disc_loss


def _warmup_generator(g_pv, g_arch, local_ds, cfg, onehot, rng, epochs):
    """Conditional-regression warm-up: G(z, y) chases a random same-class
    sample each epoch, anchoring per-class structure before the adversarial
    phase supplies the noise."""
    opt = nn.OptimizerState.adam(cfg.warmup_lr, beta1=0.9)
    by_class = {c: np.flatnonzero(local_ds.labels == c)
                for c in np.unique(local_ds.labels)}
    n = local_ds.n
    for _ in range(epochs):
        z = rng.standard_normal((n, cfg.noise_dim))
        target_idx = np.array([by_class[y][rng.integers(len(by_class[y]))]
                               for y in local_ds.labels])
        targets = local_ds.features[target_idx]
        yhat, cache = nn._forward_cache(g_pv, np.hstack([z, onehot]), True)
        dpre = nn._head_backward(g_arch.output_head, yhat, (yhat - targets) / n)
        grad, _ = nn._backward(g_pv, cache, dpre)
        g_pv = nn.optimizer_step(opt, g_pv, g_pv.with_values(grad))
        g_pv = nn._bn_stat_update(g_pv, cache)
    return g_pv


def train_vaguegan(local_ds: Dataset, cfg: GanConfig) -> GanModel:
    """Train the label-conditioned suppressed GAN on the full local dataset.

    Each epoch runs one discriminator step and one generator step with the
    whole shard as the batch. When ``adv_epochs`` is set, the epoch budget
    is split into a conditional-regression warm-up and an adversarial tail.
    Deterministic given (dataset, config).
    """
    if cfg.code_spec is not None:
        raise ValueError("config carries a code_spec; use train_unsupervised")
    if local_ds.n == 0:
        raise ValueError("local dataset is empty")
    L = local_ds.num_classes
    d = local_ds.feature_dim
    g_arch = _gen_arch(cfg, d, L)
    d_arch = _disc_arch(cfg, d, L)
    g_pv = nn.init_params(g_arch, substream(cfg.seed, 0))
    d_pv = nn.init_params(d_arch, substream(cfg.seed, 1))
    opt_g = nn.OptimizerState.adam(cfg.adam_lr, beta1=cfg.adam_beta1)
    opt_d = nn.OptimizerState.adam(cfg.adam_lr, beta1=cfg.adam_beta1)
    rng = substream(cfg.seed, 2)
    onehot = _onehot(local_ds.labels, L)
    real_in = np.hstack([local_ds.features, onehot])
    n = local_ds.n
    if cfg.warmup_epochs:
        g_pv = _warmup_generator(g_pv, g_arch, local_ds, cfg, onehot, rng,
                                 cfg.warmup_epochs)
    for epoch in range(cfg.epochs - cfg.warmup_epochs):
        # discriminator step
        z = rng.standard_normal((n, cfg.noise_dim))
        fake = nn.forward(g_pv, np.hstack([z, onehot]), train=True)
        d_pv, disc_loss = _disc_step(d_pv, opt_d, real_in, np.hstack([fake, onehot]), cfg.kappa)
        # generator step (saturating objective); the discriminator again sees
        # the combined batch so its batch-norm keeps the joint statistics
        z = rng.standard_normal((n, cfg.noise_dim))
        g_in = np.hstack([z, onehot])
        fake, cache_g = nn._forward_cache(g_pv, g_in, True)
        p, cache_d = nn._forward_cache(
            d_pv, np.vstack([real_in, np.hstack([fake, onehot])]), True)
        gen_loss, g_gen = _gen_grads(p[n:], cfg.kappa)
        dpre = nn._head_backward("sigmoid_bce", p, np.vstack([np.zeros_like(g_gen), g_gen]))
        _, d_input = nn._backward(d_pv, cache_d, dpre, need_input_grad=True)
        dpre_g = nn._head_backward(g_arch.output_head, fake, d_input[n:, :d])
        grad_g, _ = nn._backward(g_pv, cache_g, dpre_g)
        g_pv = nn.optimizer_step(opt_g, g_pv, g_pv.with_values(grad_g))
        g_pv = nn._bn_stat_update(g_pv, cache_g)
        if not (np.isfinite(disc_loss) and np.isfinite(gen_loss)):
            raise nn.NumericError(f"non-finite GAN loss at epoch {epoch}")
    return GanModel(generator=g_pv, discriminator=d_pv, config=cfg)


def generate_poisoned(gan: GanModel, local_ds: Dataset,
                      seed: Optional[int] = None) -> Dataset:
    """One poisoned sample per original sample, conditioned on its label.

    Labels are preserved one-to-one; features are inference-mode generator
    outputs clipped to [0, 1].
    """
    if gan.config.code_spec is not None:
        raise ValueError("supervised generation requires a supervised model")
    cfg = gan.config
    if local_ds.n == 0:
        return local_ds
    rng = substream(cfg.seed, 3) if seed is None else np.random.default_rng(seed)
    z = rng.standard_normal((local_ds.n, cfg.noise_dim))
    onehot = _onehot(local_ds.labels, local_ds.num_classes)
    fake = nn.forward(gan.generator, np.hstack([z, onehot]), train=False)
    return Dataset(np.clip(fake, 0.0, 1.0), local_ds.labels, local_ds.num_classes)


def _trunk_view(d_pv: nn.ParamVector) -> nn.ParamVector:
    """The discriminator minus its final layer, as a standalone network."""
    arch = d_pv.arch
    trunk_arch = nn.ArchSpec(arch.layer_dims[:-1], arch.activations[:-1],
                             arch.batch_norm[:-1], output_head="linear",
                             leaky_slope=arch.leaky_slope)
    cut = nn._layer_slices(arch)[-1].W.start
    return nn.ParamVector(d_pv.values[:cut], trunk_arch)


def _trunk_cache(d_cache: list) -> list:
    """Reuse a full discriminator cache as the trunk's cache."""
    hidden = d_cache[:-2]
    top = hidden[-1]["a"]
    return hidden + [{"y_pre": top, "yhat": top}]


def _init_unsupervised(cfg: GanConfig, feature_dim: int):
    code = cfg.code_spec
    g_arch = _gen_arch(cfg, feature_dim, code.width)
    d_arch = _disc_arch(cfg, feature_dim, 0)
    q_arch = nn.ArchSpec((d_arch.layer_dims[-2], code.width), ("identity",), (False,),
                         output_head="linear")
    g_pv = nn.init_params(g_arch, substream(cfg.seed, 0))
    d_pv = nn.init_params(d_arch, substream(cfg.seed, 1))
    q_pv = nn.init_params(q_arch, substream(cfg.seed, 4))
    return g_pv, d_pv, q_pv


def _run_unsupervised_epochs(g_pv, d_pv, q_pv, local_ds: Dataset, cfg: GanConfig):
    code = cfg.code_spec
    k, s = code.categories, code.style_dims
    d = local_ds.feature_dim
    opt_g = nn.OptimizerState.adam(cfg.adam_lr, beta1=cfg.adam_beta1)
    opt_d = nn.OptimizerState.adam(cfg.adam_lr, beta1=cfg.adam_beta1)
    opt_q = nn.OptimizerState.adam(cfg.adam_lr, beta1=cfg.adam_beta1)
    rng = substream(cfg.seed, 2)
    real_in = local_ds.features
    n = local_ds.n

    def sample_inputs():
        z = rng.standard_normal((n, cfg.noise_dim))
        cats = rng.integers(0, k, size=n)
        style = rng.uniform(-1.0, 1.0, size=(n, s)) if s else np.zeros((n, 0))
        return np.hstack([z, _onehot(cats, k), style]), cats, style

    for epoch in range(cfg.epochs):
        g_in, _, _ = sample_inputs()
        fake = nn.forward(g_pv, g_in, train=True)
        d_pv, disc_loss = _disc_step(d_pv, opt_d, real_in, fake, cfg.kappa)

        g_in, cats, style = sample_inputs()
        fake, cache_g = nn._forward_cache(g_pv, g_in, True)
        p, cache_d = nn._forward_cache(d_pv, np.vstack([real_in, fake]), True)
        gen_loss, g_gen = _gen_grads(p[n:], cfg.kappa)
        dpre = nn._head_backward("sigmoid_bce", p, np.vstack([np.zeros_like(g_gen), g_gen]))
        _, dx = nn._backward(d_pv, cache_d, dpre, need_input_grad=True)
        dx_total = dx[n:, :d]
        if cfg.lambda_mi > 0.0:
            # code-reconstruction term: the auxiliary head reads the trunk
            # activation of the fake rows; its gradient flows through the
            # trunk into the generator without updating trunk weights
            trunk = _trunk_view(d_pv)
            t_cache = _trunk_cache(cache_d)
            h_fake = t_cache[-1]["yhat"][n:]
            q_out, cache_q = nn._forward_cache(q_pv, h_fake, True)
            probs = nn._apply_head("softmax_ce", q_out[:, :k])
            d_qout = np.empty_like(q_out)
            d_qout[:, :k] = cfg.lambda_mi * (probs - _onehot(cats, k)) / n
            if s:
                d_qout[:, k:] = cfg.lambda_mi * (q_out[:, k:] - style) / n
            q_grad, d_h = nn._backward(q_pv, cache_q, d_qout, need_input_grad=True)
            d_h_full = np.vstack([np.zeros((n, d_h.shape[1])), d_h])
            _, dx_q = nn._backward(trunk, t_cache, d_h_full, need_input_grad=True)
            dx_total = dx_total + dx_q[n:]
            q_pv = nn.optimizer_step(opt_q, q_pv, q_pv.with_values(q_grad))
        dpre_g = nn._head_backward(g_pv.arch.output_head, fake, dx_total)
        grad_g, _ = nn._backward(g_pv, cache_g, dpre_g)
        g_pv = nn.optimizer_step(opt_g, g_pv, g_pv.with_values(grad_g))
        g_pv = nn._bn_stat_update(g_pv, cache_g)
        if not (np.isfinite(disc_loss) and np.isfinite(gen_loss)):
            raise nn.NumericError(f"non-finite GAN loss at epoch {epoch}")
    return g_pv, d_pv, q_pv


def train_unsupervised(local_ds: Dataset, cfg: GanConfig) -> GanModel:
    """Label-free variant: the discriminator sees raw samples and an
    auxiliary head (sharing the hidden trunk) reconstructs the latent codes,
    trained on the mutual-information lower bound weighted by lambda_mi.
    Dataset labels are never read.
    """
    if cfg.code_spec is None:
        raise ValueError("config needs a code_spec for unsupervised training")
    if local_ds.n == 0:
        raise ValueError("local dataset is empty")
    g_pv, d_pv, q_pv = _init_unsupervised(cfg, local_ds.feature_dim)
    g_pv, d_pv, q_pv = _run_unsupervised_epochs(g_pv, d_pv, q_pv, local_ds, cfg)
    return GanModel(generator=g_pv, discriminator=d_pv, config=cfg, q_head=q_pv)


def generate_unsupervised(gan: GanModel, local_ds: Dataset,
                          seed: Optional[int] = None) -> Dataset:
    """Label-free poisoned generation: one sample per original with uniform
    random codes; the originals' labels are kept one-to-one (training never
    read them, but the uploaded shard still carries its stored labels)."""
    cfg = gan.config
    code = cfg.code_spec
    if code is None:
        raise ValueError("model is supervised; use generate_poisoned")
    if local_ds.n == 0:
        return local_ds
    n = local_ds.n
    rng = substream(cfg.seed, 3) if seed is None else np.random.default_rng(seed)
    z = rng.standard_normal((n, cfg.noise_dim))
    cats = rng.integers(0, code.categories, size=n)
    style = (rng.uniform(-1.0, 1.0, size=(n, code.style_dims))
             if code.style_dims else np.zeros((n, 0)))
    g_in = np.hstack([z, _onehot(cats, code.categories), style])
    fake = nn.forward(gan.generator, g_in, train=False)
    return Dataset(np.clip(fake, 0.0, 1.0), local_ds.labels, local_ds.num_classes)


def augment_poisongan(local_ds: Dataset, frac: float, seed: int,
                      epochs: int = 120) -> Dataset:
    """Append GAN-generated pseudo samples: a plain (kappa=0) conditional GAN
    is trained on the shard and supplies round(frac*n) extra labeled samples.
    """
    if not 0.0 <= frac <= 1.0:
        raise ValueError("frac must lie in [0, 1]")
    extra = int(round(frac * local_ds.n))
    if extra == 0:
        return local_ds
    cfg = GanConfig(kappa=0.0, epochs=epochs, seed=seed)
    gan = train_vaguegan(local_ds, cfg)
    rng = substream(seed, 5)
    labels = rng.choice(local_ds.labels, size=extra, replace=True)
    z = rng.standard_normal((extra, cfg.noise_dim))
    onehot = _onehot(labels, local_ds.num_classes)
    fake = np.clip(nn.forward(gan.generator, np.hstack([z, onehot]), train=False), 0.0, 1.0)
    return Dataset(np.vstack([local_ds.features, fake]),
                   np.concatenate([local_ds.labels, labels]),
                   local_ds.num_classes)
