"""Training objective: reconstruction NLL plus two capacity-constrained KL
penalties, and the per-unit Gaussian KL used throughout the analysis tools.

KL terms are in nats against a standard normal prior. Reductions:
  - global KL: sum over channels, mean over valid time frames, mean over batch
    (length-independent, so one capacity target fits any song length);
  - local KL: sum over units, mean over batch.
Reconstruction is a unit-variance Gaussian NLL, summed per song over valid
elements and averaged over the batch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LossWeights:
    gamma_g: float = 100.0
    gamma_l: float = 10.0


@dataclass(frozen=True)
class CapacitySchedule:
    c_max: float
    ramp_steps: int = 20000


def capacity_at(schedule: CapacitySchedule, step: int) -> float:
    """Linear ramp from 0 to c_max over ramp_steps, flat afterwards."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    if schedule.ramp_steps <= 0 or step >= schedule.ramp_steps:
        return schedule.c_max
    return schedule.c_max * step / schedule.ramp_steps


def gaussian_kl_per_unit(mean: np.ndarray, log_variance: np.ndarray) -> np.ndarray:
    """Elementwise KL(N(mu, sigma^2) || N(0, 1)) = 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2)."""
    mean = np.asarray(mean, dtype=np.float64)
    log_variance = np.asarray(log_variance, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_variance))):
        raise NumericError("non-finite Gaussian parameters")
    # expm1 keeps sigma^2 - 1 - ln sigma^2 nonnegative near sigma = 1
    return 0.5 * (mean ** 2 + (np.expm1(log_variance) - log_variance))


def gaussian_kl_grads(mean, log_variance):
    """d(kl)/d(mean), d(kl)/d(log_variance) for the elementwise KL above."""
    return mean, 0.5 * np.expm1(log_variance)


def reconstruction_nll(x, x_hat, mask) -> float:
    """Unit-variance Gaussian NLL over valid elements, batch-averaged."""
    if x.shape != x_hat.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    resid = (x - x_hat) * mask
    per_song = 0.5 * (resid ** 2).sum(axis=(1, 2))
    m = mask.sum(axis=(1, 2)) * x.shape[1]  # mask is [B,1,T]
    per_song = per_song + 0.5 * m * LOG_2PI
    return float(per_song.mean())


def reconstruction_nll_grad(x, x_hat, mask, batch_denom=None):
    b = x.shape[0] if batch_denom is None else batch_denom
    return (x_hat - x) * mask / b


def _sign(v: float) -> float:
    # subgradient convention: sign(0) = 0
    return float(np.sign(v))


@dataclass
class LossTerms:
    recon_nll: float
    kl_global: float
    kl_local: float
    kl_local_per_unit: np.ndarray
    c_g_active: float
    c_l_active: float
    total: float

    def as_record(self, step: int) -> dict:
        return {
            "step": step,
            "recon_nll": self.recon_nll,
            "kl_global": self.kl_global,
            "kl_local": self.kl_local,
            "c_g_active": self.c_g_active,
            "c_l_active": self.c_l_active,
            "total": self.total,
        }


def kl_global_reduce(kl_field, mask, lengths) -> float:
    """Sum channels, mean valid frames, mean batch; kl_field is [B, d, T]."""
    per_song = (kl_field * mask).sum(axis=(1, 2)) / np.asarray(lengths, np.float64)
    return float(per_song.mean())


def total_loss(x, q_g, q_l, x_hat, mask, lengths, weights: LossWeights,
               c_g_active: float, c_l_active: float) -> LossTerms:
    """Assemble every term of the capacity-constrained objective.

    q_g is (mean, log_variance) over the global latent [B, d_g, T]; q_l the
    same over the local latent [B, d_l].
    """
    recon = reconstruction_nll(x, x_hat, mask)
    kg_field = gaussian_kl_per_unit(*q_g)
    kl_g = kl_global_reduce(kg_field, mask, lengths)
    kl_field = gaussian_kl_per_unit(*q_l)
    kl_local_per_unit = kl_field.mean(axis=0)
    kl_l = float(kl_local_per_unit.sum())
    total = (recon
             + weights.gamma_g * abs(kl_g - c_g_active)
             + weights.gamma_l * abs(kl_l - c_l_active))
    return LossTerms(recon, kl_g, kl_l, kl_local_per_unit,
                     c_g_active, c_l_active, total)


def total_loss_grads(x, q_g, q_l, x_hat, mask, lengths, weights: LossWeights,
                     terms: LossTerms):
    """Closed-form gradients of the total loss w.r.t. the forward outputs.

    Returns (dx_hat, dmean_g, dlogvar_g, dmean_l, dlogvar_l). Gradients via
    the sampled latents are the model's job; these are the direct paths.
    """
    b = x.shape[0]
    dx_hat = reconstruction_nll_grad(x, x_hat, mask)

    coeff_g = weights.gamma_g * _sign(terms.kl_global - terms.c_g_active)
    denom = (b * np.asarray(lengths)).astype(mask.dtype)
    dkl_g = coeff_g * mask / denom[:, None, None]
    gm, gv = gaussian_kl_grads(*q_g)
    dmean_g = dkl_g * gm
    dlogvar_g = dkl_g * gv

    coeff_l = weights.gamma_l * _sign(terms.kl_local - terms.c_l_active) / b
    lm, lv = gaussian_kl_grads(*q_l)
    dmean_l = coeff_l * lm
    dlogvar_l = coeff_l * lv
    return dx_hat, dmean_g, dlogvar_g, dmean_l, dlogvar_l
