"""Empirical convergence rate of the server update on a noisy convex quadratic.

The server step is the same one used for fine-tuning::

    theta <- P_Q(theta - lr_t * g - lr_t * gamma * (theta - anchor))

with ``lr_t = Q / (G sqrt(t))``, ``g`` a noisy gradient of the server loss,
``anchor`` the mean of simulated device updates ``theta - device_lr * g_u`` and
``P_Q`` projection onto the ball of radius ``Q``.  The optimality gap is
fitted against the envelope ``sqrt(T) / log(T)``; the rate bound predicts a
log-log slope of at most -1 asymptotically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .protocol import proximal_step
from .rng import stream


@dataclass(frozen=True)
class ConvergenceConfig:
    lipschitz: float = 4.0
    radius: float = 1.0
    min_log2_steps: int = 4
    max_log2_steps: int = 14
    trials: int = 50
    dim: int = 10
    noise: float = 1.0
    curvature_min: float = 0.5
    curvature_max: float = 2.0
    gamma: float = 0.5
    device_lr: float = 0.1
    devices: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lipschitz <= 0 or self.radius <= 0:
            raise ValueError("lipschitz bound and radius must be positive")
        if not 1 <= self.min_log2_steps < self.max_log2_steps:
            raise ValueError("need 1 <= min_log2_steps < max_log2_steps")
        if self.trials < 1 or self.dim < 1 or self.devices < 1:
            raise ValueError("trials, dim and devices must be positive")
        if not 0 < self.curvature_min <= self.curvature_max:
            raise ValueError("need 0 < curvature_min <= curvature_max")
        if self.noise < 0 or self.gamma < 0 or self.device_lr < 0:
            raise ValueError("noise, gamma and device_lr must be non-negative")

    @property
    def checkpoints(self) -> list[int]:
        return [2**k for k in range(self.min_log2_steps, self.max_log2_steps + 1)]


@dataclass
class ConvergenceResult:
    steps: list[int]
    mean_gap: np.ndarray
    envelope: np.ndarray
    slope: float
    noise_floor: float

    def rows(self):
        for t, gap, env in zip(self.steps, self.mean_gap, self.envelope):
            yield {"steps": t, "mean_gap": float(gap), "envelope": float(env)}


def envelope(steps) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.float64)
    return np.sqrt(steps) / np.log(steps)


def fitted_slope(steps, gaps) -> float:
    """Least-squares slope of ``log gap`` against ``log(sqrt(T)/log T)``."""
    return float(np.polyfit(np.log(envelope(steps)), np.log(gaps), 1)[0])


def noise_floor(cfg: ConvergenceConfig) -> float:
    """Stationary expected gap of the largest step size.

    The proximal pull toward the device mean acts as an extra gradient step,
    so per coordinate the update is SGD with step ``c = lr (1 + gamma eta)``
    and noise variance ``lr^2 s^2 (1 + gamma^2 eta^2 / M)``.  Its stationary
    gap is increasing in ``lr`` and in the curvature ``a``, so evaluating at
    the first step size and the largest curvature bounds the gap of a run
    started at the optimum.
    """
    lr = cfg.radius / cfg.lipschitz
    scale = 1.0 + cfg.gamma * cfg.device_lr
    extra = 1.0 + (cfg.gamma * cfg.device_lr) ** 2 / cfg.devices
    step = lr * scale
    return cfg.dim * lr * cfg.noise**2 * extra / (2.0 * scale * (2.0 - step * cfg.curvature_max))


def _project(theta: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(theta, axis=-1, keepdims=True)
    return theta * np.minimum(1.0, radius / np.maximum(norms, 1e-300))


def run_convergence(cfg: ConvergenceConfig, start_at_optimum: bool = False) -> ConvergenceResult:
    """Run ``cfg.trials`` independent trajectories in lockstep and record mean gaps."""
    rng = stream(cfg.seed, "convergence")
    shape = (cfg.trials, cfg.dim)
    curv = rng.uniform(cfg.curvature_min, cfg.curvature_max, size=shape)
    optimum = _project(rng.normal(size=shape), cfg.radius / 2)
    theta = optimum.copy() if start_at_optimum else _project(rng.normal(size=shape) * cfg.radius, cfg.radius)
    checkpoints = set(cfg.checkpoints)
    gaps = {}
    for t in range(1, cfg.checkpoints[-1] + 1):
        lr = cfg.radius / (cfg.lipschitz * np.sqrt(t))
        diff = theta - optimum
        grad = curv * diff
        noisy = grad + cfg.noise * rng.normal(size=shape)
        device_grads = grad[None] + cfg.noise * rng.normal(size=(cfg.devices,) + shape)
        anchor = theta - cfg.device_lr * device_grads.mean(axis=0)
        theta = _project(proximal_step(theta, noisy, anchor, lr, cfg.gamma), cfg.radius)
        if t in checkpoints:
            gap = 0.5 * np.sum(curv * (theta - optimum) ** 2, axis=1)
            gaps[t] = float(gap.mean())
    steps = cfg.checkpoints
    mean_gap = np.array([gaps[t] for t in steps])
    slope = fitted_slope(steps, mean_gap) if np.all(mean_gap > 0) else float("-inf")
    return ConvergenceResult(steps, mean_gap, envelope(steps), slope, noise_floor(cfg))
