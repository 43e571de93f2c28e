"""
Normal-Inverse-Gamma (NIG) evidential mathematics

Natural form (chi1, chi2, n) and parameter form (mu0, lambda, alpha, beta) are
linked by n = lambda = 2*alpha and chi = (mu0, mu0^2 + beta/alpha). Every
function accepts floats or numpy arrays that broadcast against each other.
"""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from models.errors import DomainError, NumericError
from models.schema import LossConfig, MappingConfig

ArrayLike = Union[float, np.ndarray]

EPS_VAR = 1e-9
LOG_2PI = math.log(2.0 * math.pi)

# Bernoulli-number coefficients of the asymptotic expansions, valid for x >= 10
_LNGAMMA_SERIES = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)
_DIGAMMA_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
_TRIGAMMA_SERIES = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)
_ASYMPTOTIC_FLOOR = 10.0


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def softplus(x: ArrayLike) -> ArrayLike:
    return _scalar_or_array(np.logaddexp(0.0, np.asarray(x, dtype=np.float64)))


def inverse_softplus(y: ArrayLike) -> ArrayLike:
    y = np.asarray(y, dtype=np.float64)
    return _scalar_or_array(y + np.log(-np.expm1(-y)))


# ==================== SPECIAL FUNCTIONS ====================

def special_fns(x: ArrayLike) -> Tuple[ArrayLike, ArrayLike, ArrayLike]:
    """
    Log-gamma, digamma and trigamma by upward recurrence plus asymptotic series.

    Args:
        x: strictly positive argument(s)

    Returns:
        (ln_gamma, digamma, trigamma) with the shape of x
    """
    x = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x <= 0.0):
        raise DomainError(f"special_fns requires finite x > 0, got min {np.min(x)}")

    log_shift = np.zeros_like(x)
    psi_shift = np.zeros_like(x)
    tri_shift = np.zeros_like(x)
    z = x.copy()
    while True:
        low = z < _ASYMPTOTIC_FLOOR
        if not np.any(low):
            break
        log_shift = np.where(low, log_shift + np.log(np.where(low, z, 1.0)), log_shift)
        psi_shift = np.where(low, psi_shift + 1.0 / z, psi_shift)
        tri_shift = np.where(low, tri_shift + 1.0 / (z * z), tri_shift)
        z = np.where(low, z + 1.0, z)

    inv = 1.0 / z
    inv2 = inv * inv

    lngamma_tail = np.zeros_like(z)
    power = inv.copy()
    for coeff in _LNGAMMA_SERIES:
        lngamma_tail += coeff * power
        power = power * inv2
    ln_gamma = (z - 0.5) * np.log(z) - z + 0.5 * LOG_2PI + lngamma_tail - log_shift

    digamma_tail = np.zeros_like(z)
    power = inv2.copy()
    for coeff in _DIGAMMA_SERIES:
        digamma_tail += coeff * power
        power = power * inv2
    digamma = np.log(z) - 0.5 * inv - digamma_tail - psi_shift

    trigamma_tail = np.zeros_like(z)
    power = inv2 * inv
    for coeff in _TRIGAMMA_SERIES:
        trigamma_tail += coeff * power
        power = power * inv2
    trigamma = inv + 0.5 * inv2 + trigamma_tail + tri_shift

    return _scalar_or_array(ln_gamma), _scalar_or_array(digamma), _scalar_or_array(trigamma)


def digamma(x: ArrayLike) -> ArrayLike:
    return special_fns(x)[1]


# ==================== PARAMETER TYPES ====================

@dataclass(frozen=True)
class NaturalStats:
    """Sufficient statistics (chi1, chi2) and evidence n"""
    chi1: ArrayLike
    chi2: ArrayLike
    n: ArrayLike

    def variance(self) -> ArrayLike:
        return _scalar_or_array(np.asarray(self.chi2) - np.asarray(self.chi1) ** 2)

    def validate(self, allow_zero_evidence: bool = False) -> "NaturalStats":
        n, var = np.broadcast_arrays(np.asarray(self.n, dtype=np.float64), np.asarray(self.variance()))
        if not np.all(np.isfinite(n)) or np.any(n < 0.0) or (not allow_zero_evidence and np.any(n <= 0.0)):
            raise DomainError(f"evidence n must be positive, got {self.n}")
        if np.any(var[n > 0.0] < EPS_VAR):
            raise DomainError(f"chi2 - chi1^2 must be >= {EPS_VAR}, got {self.variance()}")
        return self


@dataclass(frozen=True)
class NigParams:
    """NIG parameters (mu0, lam, alpha, beta)"""
    mu0: ArrayLike
    lam: ArrayLike
    alpha: ArrayLike
    beta: ArrayLike

    def validate(self) -> "NigParams":
        for name in ("lam", "alpha", "beta"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(value)) or np.any(value <= 0.0):
                raise DomainError(f"NIG parameter {name} must be finite and > 0, got {value}")
        return self


@dataclass(frozen=True)
class UncertaintyHyper:
    """Grid activations: n_i = evidence_scale * sigmoid(rho), tau = softplus(raw) + tau_eps"""
    evidence_scale: float
    tau_eps: float
    prior: NaturalStats

    @classmethod
    def from_config(cls, cfg: MappingConfig) -> "UncertaintyHyper":
        chi1, chi2 = cfg.chi_pri
        prior = NaturalStats(chi1, chi2, cfg.n_pri).validate()
        return cls(evidence_scale=cfg.evidence_scale, tau_eps=cfg.tau_eps, prior=prior)

    def evidence(self, rho_raw: ArrayLike) -> ArrayLike:
        return _scalar_or_array(self.evidence_scale * expit(np.asarray(rho_raw, dtype=np.float64)))

    def second_moment(self, tau_raw: ArrayLike) -> ArrayLike:
        return _scalar_or_array(np.logaddexp(0.0, np.asarray(tau_raw, dtype=np.float64)) + self.tau_eps)


# ==================== BIJECTION AND UPDATES ====================

def natural_to_nig(s: NaturalStats) -> NigParams:
    s.validate()
    n = np.asarray(s.n, dtype=np.float64)
    alpha = 0.5 * n
    beta = alpha * np.asarray(s.variance())
    return NigParams(
        mu0=_scalar_or_array(np.asarray(s.chi1, dtype=np.float64)),
        lam=_scalar_or_array(n),
        alpha=_scalar_or_array(alpha),
        beta=_scalar_or_array(beta),
    )


def nig_to_natural(m: NigParams) -> NaturalStats:
    m.validate()
    lam = np.asarray(m.lam, dtype=np.float64)
    alpha = np.asarray(m.alpha, dtype=np.float64)
    if not np.allclose(lam, 2.0 * alpha, rtol=1e-12, atol=0.0):
        raise DomainError("natural form requires lambda == 2 * alpha")
    mu0 = np.asarray(m.mu0, dtype=np.float64)
    return NaturalStats(
        chi1=_scalar_or_array(mu0),
        chi2=_scalar_or_array(mu0 ** 2 + np.asarray(m.beta) / alpha),
        n=_scalar_or_array(lam),
    )


def merge_stats(a: NaturalStats, b: NaturalStats) -> NaturalStats:
    """Evidence-weighted merge of two pseudo-observation sets."""
    n = np.asarray(a.n, dtype=np.float64) + np.asarray(b.n, dtype=np.float64)
    safe_n = np.where(n > 0.0, n, 1.0)
    chi1 = (np.asarray(a.n) * np.asarray(a.chi1) + np.asarray(b.n) * np.asarray(b.chi1)) / safe_n
    chi2 = (np.asarray(a.n) * np.asarray(a.chi2) + np.asarray(b.n) * np.asarray(b.chi2)) / safe_n
    return NaturalStats(_scalar_or_array(chi1), _scalar_or_array(chi2), _scalar_or_array(n))


def posterior_update(prior: NaturalStats, pseudo: NaturalStats) -> NaturalStats:
    """Convex evidence-weighted blend of prior and pseudo statistics."""
    prior.validate()
    pseudo.validate(allow_zero_evidence=True)
    return merge_stats(prior, pseudo)


def observation_stats(ys: Sequence[float]) -> NaturalStats:
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if ys.size == 0:
        raise DomainError("observation_stats needs at least one observation")
    mean = float(np.mean(ys))
    second = max(float(np.mean(ys ** 2)), mean ** 2 + EPS_VAR)
    return NaturalStats(mean, second, float(ys.size))


def observe(prior: NaturalStats, ys: Sequence[float]) -> NaturalStats:
    """Conjugate update of the prior from raw observations."""
    return posterior_update(prior, observation_stats(ys))


# ==================== ENTROPY AND LOSS ====================

def nig_entropy(m: NigParams) -> ArrayLike:
    """Differential entropy of the NIG in nats (may be negative)."""
    m.validate()
    lam = np.asarray(m.lam, dtype=np.float64)
    alpha = np.asarray(m.alpha, dtype=np.float64)
    beta = np.asarray(m.beta, dtype=np.float64)
    ln_gamma, psi, _ = special_fns(alpha)
    entropy = (
        0.5 * LOG_2PI + 1.5 * np.log(beta) + ln_gamma - 0.5 * np.log(lam)
        - (alpha + 1.5) * psi + alpha + 0.5
    )
    return _scalar_or_array(entropy)


def nig_moments(m: NigParams) -> Tuple[ArrayLike, ArrayLike]:
    """Aleatoric E[sigma^2] and epistemic Var[mu]; infinite while alpha <= 1."""
    m.validate()
    alpha = np.asarray(m.alpha, dtype=np.float64)
    beta = np.asarray(m.beta, dtype=np.float64)
    lam = np.asarray(m.lam, dtype=np.float64)
    denom = np.where(alpha > 1.0, alpha - 1.0, 1.0)
    aleatoric = np.where(alpha > 1.0, beta / denom, np.inf)
    epistemic = np.where(alpha > 1.0, beta / (lam * denom), np.inf)
    return _scalar_or_array(aleatoric), _scalar_or_array(epistemic)


def evidential_loss(s_gt: ArrayLike, m: NigParams, cfg: LossConfig) -> ArrayLike:
    m.validate()
    alpha = np.asarray(m.alpha, dtype=np.float64)
    beta = np.asarray(m.beta, dtype=np.float64)
    lam = np.asarray(m.lam, dtype=np.float64)
    residual = np.asarray(s_gt, dtype=np.float64) - np.asarray(m.mu0, dtype=np.float64)
    nll = 0.5 * ((alpha / beta) * residual ** 2 + 1.0 / lam - digamma(alpha) + np.log(2.0 * math.pi * beta))
    return _scalar_or_array(nll - cfg.gamma * np.asarray(nig_entropy(m)))


def _raise_if_nonfinite(**arrays: np.ndarray) -> None:
    for name, values in arrays.items():
        bad = ~np.isfinite(values)
        if np.any(bad):
            index = int(np.flatnonzero(np.atleast_1d(bad))[0])
            raise NumericError(f"non-finite {name} at sample {index}")


def loss_and_grad(
    s_gt: ArrayLike,
    prior: NaturalStats,
    s_i: ArrayLike,
    rho_raw: ArrayLike,
    tau_raw: ArrayLike,
    hyper: UncertaintyHyper,
    cfg: LossConfig,
) -> Tuple[ArrayLike, ArrayLike, ArrayLike]:
    """
    Bayesian loss of the posterior formed from grid predictions, with analytic
    gradients for the raw evidence logit and raw second moment.

    s_i is the fused first statistic and receives no gradient.

    Returns:
        (loss, d_rho, d_tau), elementwise over broadcast inputs
    """
    s_gt = np.asarray(s_gt, dtype=np.float64)
    s_i = np.asarray(s_i, dtype=np.float64)
    rho_raw = np.asarray(rho_raw, dtype=np.float64)
    tau_raw = np.asarray(tau_raw, dtype=np.float64)

    sig_rho = expit(rho_raw)
    n_i = hyper.evidence_scale * sig_rho
    tau = np.logaddexp(0.0, tau_raw) + hyper.tau_eps

    n_p = float(prior.n)
    mu_p = float(prior.chi1)
    var_p = float(prior.chi2) - mu_p ** 2
    n = n_p + n_i
    w_p = n_p / n
    w_i = n_i / n
    delta = mu_p - s_i

    c1 = w_p * mu_p + w_i * s_i
    # central-moment form of chi2 - chi1^2, free of cancellation
    v = w_p * var_p + w_i * tau + w_p * w_i * delta ** 2
    r = s_gt - c1
    half_n = 0.5 * n

    ln_gamma, psi, psi1 = special_fns(half_n)
    log_beta = np.log(half_n * v)
    entropy = 0.5 * LOG_2PI + 1.5 * log_beta + ln_gamma - 0.5 * np.log(n) - (half_n + 1.5) * psi + half_n + 0.5
    loss = 0.5 * (r ** 2 / v + 1.0 / n - psi + LOG_2PI + log_beta) - cfg.gamma * entropy

    dl_dc1 = -r / v
    dl_dv = 0.5 * (1.0 / v - r ** 2 / v ** 2) - 1.5 * cfg.gamma / v
    dl_dn = 0.5 * (-1.0 / n ** 2 - 0.5 * psi1 + 1.0 / n) - cfg.gamma * (1.0 / n - 0.5 * (half_n + 1.5) * psi1 + 0.5)

    dc1_dni = (s_i - c1) / n
    dv_dni = (n_p / n ** 2) * (tau - var_p) + n_p * (n - 2.0 * n_i) * delta ** 2 / n ** 3
    dl_dni = dl_dn + dl_dc1 * dc1_dni + dl_dv * dv_dni

    d_rho = dl_dni * n_i * (1.0 - sig_rho)
    d_tau = dl_dv * w_i * expit(tau_raw)

    _raise_if_nonfinite(loss=loss, d_rho=d_rho, d_tau=d_tau)
    return _scalar_or_array(loss), _scalar_or_array(d_rho), _scalar_or_array(d_tau)


def grid_posterior(s_i: ArrayLike, rho_raw: ArrayLike, tau_raw: ArrayLike, hyper: UncertaintyHyper) -> NigParams:
    """Posterior NIG at points whose grid values are (s_i, rho_raw, tau_raw)."""
    pseudo_n = np.asarray(hyper.evidence(rho_raw))
    tau = np.asarray(hyper.second_moment(tau_raw))
    s_i = np.asarray(s_i, dtype=np.float64)
    prior = hyper.prior
    n = float(prior.n) + pseudo_n
    w_p = float(prior.n) / n
    w_i = pseudo_n / n
    mu_p = float(prior.chi1)
    var_p = float(prior.chi2) - mu_p ** 2
    v = w_p * var_p + w_i * tau + w_p * w_i * (mu_p - s_i) ** 2
    return NigParams(
        mu0=_scalar_or_array(w_p * mu_p + w_i * s_i),
        lam=_scalar_or_array(n),
        alpha=_scalar_or_array(0.5 * n),
        beta=_scalar_or_array(0.5 * n * v),
    )


def epistemic_from_grids(
    s_i: ArrayLike, rho_raw: ArrayLike, tau_raw: ArrayLike, hyper: UncertaintyHyper
) -> ArrayLike:
    """Softplus-rectified entropy of the grid posterior."""
    return softplus(nig_entropy(grid_posterior(s_i, rho_raw, tau_raw, hyper)))


def epistemic_variance_from_grids(
    s_i: ArrayLike, rho_raw: ArrayLike, tau_raw: ArrayLike, hyper: UncertaintyHyper
) -> ArrayLike:
    """Var[mu] of the grid posterior, an alternative uncertainty measure."""
    return nig_moments(grid_posterior(s_i, rho_raw, tau_raw, hyper))[1]
