"""Boltzmann equilibrium decomposition.

Per-primitive deviations from learned spatial/temporal equilibria are turned
into harmonic-oscillator energies and soft masks

    M = (1 - gamma) * exp(-beta * E) + gamma,

which gate how much of a predicted deformation is applied.  All operations
run on the tape, so gradients reach the equilibrium attributes (and the
sensitivities when those are passed as tensors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def _val(x) -> float:
    return float(x.data) if isinstance(x, ad.Tensor) else float(x)


@dataclass
class BedConfig:
    """Sensitivities and distribution constants for the equilibrium masks.

    ``coupling_lambda`` is the spatial-temporal coupling; it is constrained
    to |lambda| < 1 so the combined energy stays a positive semi-definite
    quadratic form and masks stay in (gamma, 1].
    """

    sigma_s: float = 0.1
    sigma_t: float = 0.2
    coupling_lambda: float = 0.1
    beta: float = 1.0
    gamma: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        if _val(self.sigma_s) <= 0 or _val(self.sigma_t) <= 0:
            raise ValueError("sigma_s and sigma_t must be positive")
        if _val(self.beta) <= 0:
            raise ValueError("beta (inverse temperature) must be positive")
        if not (0.0 <= _val(self.gamma) < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if abs(_val(self.coupling_lambda)) >= 1.0:
            raise ValueError(
                "|coupling_lambda| must be < 1 to keep the energy positive semi-definite")


def deviations(mu, mu_eq, t, t_eq, cfg: BedConfig):
    """Normalized deviations (dd, dtau) from the equilibrium state.

    dd = ||mu - mu_eq|| / sigma_s (a tiny epsilon under the square root keeps
    the gradient finite at zero deviation), dtau = (t - t_eq) / sigma_t.
    Inputs broadcast over a leading batch axis.
    """
    mu, mu_eq = ad.as_tensor(mu), ad.as_tensor(mu_eq)
    diff = mu - mu_eq
    dd = ad.sqrt(ad.tsum(diff * diff, axis=-1) + 1e-24) / cfg.sigma_s
    dtau = (ad.as_tensor(t) - ad.as_tensor(t_eq)) / cfg.sigma_t
    return dd, dtau


def spatial_temporal_energy(dd, dtau, cfg: BedConfig) -> ad.Tensor:
    """E = (dd^2 + dtau^2)/2 + lambda * dd * dtau."""
    dd, dtau = ad.as_tensor(dd), ad.as_tensor(dtau)
    return 0.5 * (dd * dd + dtau * dtau) + cfg.coupling_lambda * dd * dtau


def temporal_energy(t, t_eq, cfg: BedConfig) -> ad.Tensor:
    """E = ((t - t_eq) / sigma_t)^2 / 2."""
    dtau = (ad.as_tensor(t) - ad.as_tensor(t_eq)) / cfg.sigma_t
    return 0.5 * dtau * dtau


def boltzmann_mask(energy, cfg: BedConfig) -> ad.Tensor:
    """M = (1 - gamma) exp(-beta E) + gamma, in (gamma, 1] for E >= 0."""
    energy = ad.as_tensor(energy)
    gamma = cfg.gamma
    return (1.0 - gamma) * ad.exp(ad.neg(ad.as_tensor(cfg.beta) * energy)) + gamma


def blend_position(mu, mu_tilde, mask) -> ad.Tensor:
    """mu' = mu_tilde (1 - M) + mu M, the mask broadcast over coordinates."""
    mu, mu_tilde, mask = ad.as_tensor(mu), ad.as_tensor(mu_tilde), ad.as_tensor(mask)
    mv = mask.data
    if np.any(mv < 0.0) or np.any(mv > 1.0):
        raise ValueError(f"position mask outside [0, 1]: range [{mv.min()}, {mv.max()}]")
    if mask.ndim == mu.ndim - 1:
        mask = ad.reshape(mask, mask.shape + (1,))
    return mu_tilde * (1.0 - mask) + mu * mask


def blend_scale(s, ds, mask) -> ad.Tensor:
    """s' = s + ds (1 - M), the mask broadcast over coordinates."""
    s, ds, mask = ad.as_tensor(s), ad.as_tensor(ds), ad.as_tensor(mask)
    if mask.ndim == s.ndim - 1:
        mask = ad.reshape(mask, mask.shape + (1,))
    return s + ds * (1.0 - mask)
