"""Gaussian Metropolis proposal kernels.

Two families, both of the form  x' = mu(x) + F v  with v ~ N(0, I):

* random-walk ("rwmh"):      mu(x) = x,                        F = sigma
* autoregressive ("pcn"):    mu(x) = c + rho * (x - c),        F = sqrt(1 - rho^2) * sigma

The autoregressive center c defaults to the origin; setting it to a pilot
estimate of the posterior location keeps the kernel efficient when the
target mass sits far from zero.

``sigma`` is the lower-triangular factor of the base covariance (a scalar or
a diagonal are accepted as shorthand).  Exposing the factor rather than the
covariance lets couplings whiten mean differences exactly (``F^-1 d``), which
the reflection coupling needs.

The autoregressive family is treated as a *generic* Gaussian proposal: its
acceptance ratio always carries the full forward/backward density correction.
No prior-reversibility cancellation is assumed, because the targets here have
uniform or truncated priors for which the usual cancellation does not hold.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import RngStream

_LOG_2PI = math.log(2.0 * math.pi)

PROPOSAL_KINDS = ("rwmh", "pcn")


class GaussianProposal:
    """One proposal kernel ``N(mu(x), F F^T)`` with precomputed factors."""

    __slots__ = (
        "kind",
        "dim",
        "rho",
        "center",
        "symmetric",
        "_mean_scale",
        "_iso",
        "_diag",
        "_chol",
        "_chol_inv",
        "_log_norm",
        "_rr_iso",
        "_rr_diag",
    )

    def __init__(
        self,
        kind: str,
        dim: int,
        sigma,
        rho: float | None = None,
        center=None,
    ):
        if kind not in PROPOSAL_KINDS:
            raise ValueError(f"unknown proposal kind {kind!r}; expected {PROPOSAL_KINDS}")
        if dim < 1:
            raise ValueError(f"dimension must be >= 1, got {dim}")
        self.kind = kind
        self.dim = int(dim)

        if kind == "pcn":
            if rho is None or not 0.0 <= rho < 1.0:
                raise ValueError(f"pcn requires rho in [0, 1), got {rho}")
            self.rho = float(rho)
            self._mean_scale = self.rho
            noise_scale = math.sqrt(1.0 - self.rho**2)
            self.symmetric = False
            if center is None:
                self.center = None
            else:
                c = np.asarray(center, dtype=float)
                if c.shape != (self.dim,):
                    raise ValueError(f"center shape {c.shape} != ({dim},)")
                # an all-zero center is the plain autoregressive kernel
                self.center = c if np.any(c != 0.0) else None
        else:
            if rho is not None:
                raise ValueError("rho is only meaningful for pcn proposals")
            if center is not None:
                raise ValueError("center is only meaningful for pcn proposals")
            self.rho = None
            self.center = None
            self._mean_scale = 1.0
            noise_scale = 1.0
            # Random walks are symmetric: q(x, x') = q(x', x) for any factor.
            self.symmetric = True

        self._iso = None
        self._diag = None
        self._chol = None
        self._chol_inv = None
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim == 0:
            if not sig > 0:
                raise ValueError(f"scalar sigma must be positive, got {sigma}")
            self._iso = float(sig) * noise_scale
            log_det = self.dim * math.log(self._iso)
        elif sig.ndim == 1:
            if sig.shape != (self.dim,) or not np.all(sig > 0):
                raise ValueError("diagonal sigma must be positive with length dim")
            self._diag = sig * noise_scale
            log_det = float(np.sum(np.log(self._diag)))
        elif sig.ndim == 2:
            if sig.shape != (self.dim, self.dim):
                raise ValueError(f"sigma shape {sig.shape} != ({dim}, {dim})")
            if not np.allclose(sig, np.tril(sig)):
                raise ValueError("matrix sigma must be lower triangular")
            if not np.all(np.diag(sig) > 0):
                raise ValueError("matrix sigma must have positive diagonal")
            self._chol = sig * noise_scale
            self._chol_inv = np.linalg.inv(self._chol)
            log_det = float(np.sum(np.log(np.diag(self._chol))))
        else:
            raise ValueError("sigma must be a scalar, vector or matrix")
        self._log_norm = -0.5 * self.dim * _LOG_2PI - log_det

        # Precomputed half-precisions of the *base* covariance (sigma sigma^T,
        # before the autoregressive noise shrinkage), used by the closed-form
        # reverse-ratio below.
        self._rr_iso = None
        self._rr_diag = None
        if kind == "pcn":
            if self._iso is not None:
                self._rr_iso = 0.5 * (noise_scale / self._iso) ** 2
            elif self._diag is not None:
                self._rr_diag = 0.5 * (noise_scale / self._diag) ** 2

    # - building blocks ------------------------------------------------------

    def mean(self, x: np.ndarray) -> np.ndarray:
        """Proposal mean mu(x)."""
        if self._mean_scale == 1.0:
            return x
        if self.center is None:
            return self._mean_scale * x
        return self.center + self._mean_scale * (x - self.center)

    def scale_noise(self, v: np.ndarray) -> np.ndarray:
        """Apply the noise factor: F v."""
        if self._iso is not None:
            return self._iso * v
        if self._diag is not None:
            return self._diag * v
        return self._chol @ v

    def whiten(self, d: np.ndarray) -> np.ndarray:
        """Invert the noise factor: F^-1 d."""
        if self._iso is not None:
            return d / self._iso
        if self._diag is not None:
            return d / self._diag
        return self._chol_inv @ d

    # - sampling and density -------------------------------------------------

    def propose(self, x: np.ndarray, stream: RngStream) -> np.ndarray:
        """Draw x' ~ N(mu(x), F F^T)."""
        return self.mean(x) + self.scale_noise(stream.standard_normal(self.dim))

    def propose_with_noise(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Deterministic proposal from externally supplied noise v."""
        return self.mean(x) + self.scale_noise(v)

    def log_density(self, x: np.ndarray, xp: np.ndarray) -> float:
        """log q(x, xp): exact multivariate normal log-density."""
        z = self.whiten(xp - self.mean(x))
        return self._log_norm - 0.5 * float(z @ z)

    def log_ratio_reverse(self, x: np.ndarray, xp: np.ndarray) -> float:
        """log q(xp, x) - log q(x, xp); zero for symmetric kernels.

        This is the proposal correction entering the Metropolis-Hastings
        log acceptance ratio.  For the autoregressive family the identity
        ||xp - rho x||^2 - ||x - rho xp||^2 = (1 - rho^2)(||xp||^2 - ||x||^2)
        collapses the correction to the reference-measure density ratio,
        0.5 (||xp||^2 - ||x||^2) in the metric of the base covariance —
        the kernel is reversible with respect to N(0, sigma sigma^T).
        """
        if self.symmetric:
            return 0.0
        if self.center is not None:
            x = x - self.center
            xp = xp - self.center
        if self._rr_iso is not None:
            return self._rr_iso * (float(xp @ xp) - float(x @ x))
        if self._rr_diag is not None:
            return float(self._rr_diag @ (xp * xp - x * x))
        zf = self.whiten(xp - self._mean_scale * x)
        zb = self.whiten(x - self._mean_scale * xp)
        return 0.5 * (float(zf @ zf) - float(zb @ zb))
