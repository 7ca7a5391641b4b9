"""Convergence-bound harness on an analytically tractable toy.

The objective is a quadratic J(phi) = 0.5 * phi' A phi whose spectrum
gives the strong-convexity and smoothness constants exactly.  Each of the
M clients owns one block of coordinates and exposes it through an identity
embedding (operator norm 1, so the embedding Lipschitz constant is known
analytically).  Per epoch, every one of the N samples observes the
embedding plus isotropic Gaussian noise, and the gradient is computed from
the per-sample average, which reproduces the noisy-gradient decomposition
"true gradient plus a zero-mean deviation" exactly.

Gradient descent at learning rate 1/beta then admits the bound

    E[gap_L] <= (1 - a/b)^L gap_0
               + (256 sigma^2 M L_E b) / (N a) * (1 - (1 - a/b)^L)

whose second term is the long-horizon noise floor.  The harness measures
the mean gap trajectory over many seeds and compares it to the bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import stream

__all__ = ["ConvergenceToy", "bound_trajectory", "run_toy",
           "verify_convergence_bound"]


@dataclass(frozen=True)
class ConvergenceToy:
    eigenvalues: tuple[float, ...]   # spectrum per client block
    clients: int = 3
    noise_std: float = 0.1           # embedding noise (clip bound 1)
    epochs: int = 60
    n_samples: int = 50
    lipschitz_embed: float = 1.0     # identity embedding
    init_value: float = 1.0          # starting coordinate value

    def __post_init__(self):
        eigs = np.asarray(self.eigenvalues, dtype=np.float64)
        if eigs.size == 0 or np.any(eigs <= 0):
            raise ValueError("spectrum must be positive")
        if eigs.min() > eigs.max():
            raise ValueError("strong convexity cannot exceed smoothness")
        if self.clients < 1 or self.epochs < 1 or self.n_samples < 1:
            raise ValueError("clients, epochs, samples must be >= 1")

    @property
    def alpha(self) -> float:
        return float(min(self.eigenvalues))

    @property
    def beta(self) -> float:
        return float(max(self.eigenvalues))

    def full_spectrum(self) -> np.ndarray:
        """One copy of the spectrum per client block."""
        return np.tile(np.asarray(self.eigenvalues, dtype=np.float64),
                       self.clients)

    def start(self) -> np.ndarray:
        return np.full(self.full_spectrum().size, self.init_value)

    def gap0(self) -> float:
        phi = self.start()
        return float(0.5 * np.sum(self.full_spectrum() * phi * phi))


def bound_trajectory(toy: ConvergenceToy) -> np.ndarray:
    """Upper bound on the expected optimality gap after epochs 1..L."""
    a, b = toy.alpha, toy.beta
    if a > b:
        raise ValueError("strong convexity cannot exceed smoothness")
    contraction = (1.0 - a / b) ** np.arange(1, toy.epochs + 1)
    floor = (256.0 * toy.noise_std ** 2 * toy.clients * toy.lipschitz_embed
             * b) / (toy.n_samples * a)
    return contraction * toy.gap0() + floor * (1.0 - contraction)


def run_toy(toy: ConvergenceToy, seed: int) -> np.ndarray:
    """Gradient descent with eta = 1/beta under per-sample embedding noise;
    returns the measured gap after each epoch."""
    eigs = toy.full_spectrum()
    phi = toy.start()
    eta = 1.0 / toy.beta
    rng = stream(seed, "convergence-toy")
    gaps = np.empty(toy.epochs)
    for e in range(toy.epochs):
        if toy.noise_std > 0:
            noise = rng.normal(0.0, toy.noise_std,
                               size=(toy.n_samples, eigs.size))
            observed = phi + noise.mean(axis=0)
        else:
            observed = phi
        grad = eigs * observed
        phi = phi - eta * grad
        gaps[e] = 0.5 * np.sum(eigs * phi * phi)
    return gaps


def verify_convergence_bound(toy: ConvergenceToy, seeds) -> dict:
    """Mean measured gap over the seeds vs the closed-form bound.

    Report fields: per-epoch mean gaps, the bound, the worst ratio, and
    whether every epoch satisfies mean <= bound (with 5% slack for the
    noisy case; the noiseless case must satisfy the pure contraction
    exactly).
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    runs = np.stack([run_toy(toy, s) for s in seeds])
    mean_gap = runs.mean(axis=0)
    bound = bound_trajectory(toy)
    ratio = mean_gap / bound
    slack = 1.0 if toy.noise_std == 0 else 1.05
    floor = (256.0 * toy.noise_std ** 2 * toy.clients * toy.lipschitz_embed
             * toy.beta) / (toy.n_samples * toy.alpha)
    report = {
        "alpha": toy.alpha,
        "beta": toy.beta,
        "noise_std": toy.noise_std,
        "clients": toy.clients,
        "n_samples": toy.n_samples,
        "lipschitz_embed": toy.lipschitz_embed,
        "epochs": toy.epochs,
        "seeds": len(seeds),
        "gap0": toy.gap0(),
        "mean_gap": mean_gap,
        "bound": bound,
        "noise_floor": float(floor),
        "max_ratio": float(ratio.max()),
        "passed": bool(np.all(mean_gap <= bound * slack)),
    }
    return report


def report_lines(report: dict) -> str:
    keys = ("alpha", "beta", "noise_std", "clients", "n_samples",
            "lipschitz_embed", "epochs", "seeds", "gap0", "noise_floor",
            "max_ratio", "passed")
    return "\n".join(f"{k} = {report[k]}" for k in keys) + "\n"
