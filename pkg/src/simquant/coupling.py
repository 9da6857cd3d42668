"""Coupled sampling of Gaussian disturbance pairs.

The abstract and concrete systems are driven by standard normal noise. To
relate them we draw the two noise vectors jointly so that the shifted event
w - w_hat = gamma happens as often as possible. For a shift gamma the largest
achievable probability of that event is

    Delta_gamma = 2 * cdf(-||gamma|| / 2),

where cdf is the standard normal distribution function. The miss probability
delta = 1 - Delta_gamma and the shift budget r are therefore two views of the
same quantity; ``delta_from_gamma`` and ``radius_from_delta`` convert between
them, and ``sample_maximal_coupling`` draws exact pairs.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

# Rejection sampling of the off-diagonal residual terminates almost surely;
# the cap only guards against a broken RNG or NaN inputs.
MAX_REJECTION_ITERS = 10**6


def diagonal_probability(gamma) -> float:
    """Probability 2*cdf(-||gamma||/2) of the event w = w_hat_gamma."""
    norm = float(np.linalg.norm(np.atleast_1d(np.asarray(gamma, dtype=float))))
    return float(2.0 * ndtr(-0.5 * norm))


def delta_from_gamma(gamma) -> float:
    """Miss probability of the compensation event for a given shift.

    Returns delta_gamma = 1 - 2*cdf(-||gamma||/2), the probability that the
    maximal coupling fails to realize w - w_hat = gamma. Monotone
    nondecreasing in ||gamma||.
    """
    return 1.0 - diagonal_probability(gamma)


def radius_from_delta(delta: float) -> float:
    """Largest shift norm whose miss probability stays below delta.

    Computes r = |2 * idf((1 - delta) / 2)| with idf the standard normal
    quantile function; exact inverse of :func:`delta_from_gamma` on norms.
    """
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    return float(abs(2.0 * ndtri((1.0 - delta) / 2.0)))


@dataclass(frozen=True)
class CouplingSpec:
    """Shift budget of a coupled noise pair: miss probability and ball radius."""

    delta: float
    radius_r: float
    noise_dim: int

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be positive")
        expected = radius_from_delta(self.delta)
        if abs(self.radius_r - expected) > 1e-12:
            raise ValueError(
                f"radius_r={self.radius_r} inconsistent with delta={self.delta} "
                f"(expected {expected})"
            )

    @classmethod
    def from_delta(cls, delta: float, noise_dim: int) -> "CouplingSpec":
        return cls(delta=delta, radius_r=radius_from_delta(delta), noise_dim=noise_dim)


def _log_pdf_sq(sq_norm):
    # unnormalized log density of N(0, I); constants cancel in all ratios
    return -0.5 * sq_norm


def _couple_batch_given_first(w_gamma: np.ndarray, gamma: np.ndarray, rng) -> np.ndarray:
    """Draw w from the maximal coupling conditioned on the first coordinate.

    ``w_gamma`` has rows distributed N(gamma_i, I). Each row is kept on the
    diagonal (w = w_gamma) with probability min(rho, rho_hat)/rho_hat, where
    rho is the N(0, I) density and rho_hat the N(gamma, I) density; rejected
    rows are redrawn from the normalized residual (rho - rho_min)/(1 - Delta)
    by rejection against rho.
    """
    w_gamma = np.atleast_2d(np.asarray(w_gamma, dtype=float))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), w_gamma.shape)
    n, d = w_gamma.shape

    log_rho = _log_pdf_sq(np.einsum("ij,ij->i", w_gamma, w_gamma))
    log_rho_hat = _log_pdf_sq(np.einsum("ij,ij->i", w_gamma - gamma, w_gamma - gamma))
    # accept prob = min(rho, rho_hat) / rho_hat = min(1, rho/rho_hat)
    accept_diag = np.log(rng.uniform(size=n)) <= np.minimum(log_rho - log_rho_hat, 0.0)

    w = w_gamma.copy()
    pending = np.flatnonzero(~accept_diag)
    iters = 0
    while pending.size:
        iters += 1
        if iters > MAX_REJECTION_ITERS:
            raise RuntimeError(
                "residual rejection sampling did not terminate within "
                f"{MAX_REJECTION_ITERS} iterations"
            )
        cand = rng.standard_normal((pending.size, d))
        log_rho_c = _log_pdf_sq(np.einsum("ij,ij->i", cand, cand))
        log_rho_hat_c = _log_pdf_sq(
            np.einsum("ij,ij->i", cand - gamma[pending], cand - gamma[pending])
        )
        # accept with prob (rho - min(rho, rho_hat)) / rho = max(0, 1 - rho_hat/rho)
        ratio = np.exp(np.minimum(log_rho_hat_c - log_rho_c, 0.0))
        ok = rng.uniform(size=pending.size) < 1.0 - ratio
        w[pending[ok]] = cand[ok]
        pending = pending[~ok]
    return w


def sample_maximal_coupling_batch(gammas: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`sample_maximal_coupling` with one shift per row."""
    gammas = np.atleast_2d(np.asarray(gammas, dtype=float))
    n, d = gammas.shape
    w_gamma = gammas + rng.standard_normal((n, d))
    w = _couple_batch_given_first(w_gamma, gammas, rng)
    return w_gamma - gammas, w


def sample_maximal_coupling(gamma, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw a pair (w_hat, w) of standard normal vectors maximally coupled at gamma.

    Both outputs are marginally N(0, I). The event w - w_hat = gamma occurs
    with probability exactly 2*cdf(-||gamma||/2): the sampler draws
    w_gamma ~ N(gamma, I), keeps the diagonal w = w_gamma with probability
    min(rho, rho_hat)/rho_hat, redraws w from the residual otherwise, and
    returns w_hat = w_gamma - gamma.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    w_hat, w = sample_maximal_coupling_batch(gamma[None, :], rng)
    return w_hat[0], w[0]
