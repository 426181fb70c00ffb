"""L-infinity attacks: FGSM, single-source PGD and noise-averaged PGD.

All attacks take one example (1-D ``x``, one-hot ``y``) or a batch (2-D,
examples along axis 0). Randomness comes only from the seeds carried by the
configs; there is no global random state.
"""

from dataclasses import dataclass

import numpy as np

from noisetransfer.errors import ValidationError
from noisetransfer.tensor_core import as_tensor, loss_input_grad, model_loss

NOISE_KINDS = ("none", "uniform", "gaussian")
RESAMPLE_MODES = ("once", "per_step")
SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    step_size: float = 0.05
    num_steps: int = 10
    random_start: bool = False
    rs_seed: int = 0
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValidationError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.step_size > 0:
            raise ValidationError(f"step_size must be positive, got {self.step_size}")
        if self.num_steps < 0:
            raise ValidationError(f"num_steps must be non-negative, got {self.num_steps}")
        if not self.clip_min < self.clip_max:
            raise ValidationError(f"clip_min {self.clip_min} must be below clip_max {self.clip_max}")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise distribution and the weights averaging its ``M`` draws.

    ``alpha=None`` means uniform weights ``1/M``. Any other ``alpha`` must lie
    on the probability simplex.
    """

    kind: str = "uniform"
    sigma: float = 0.3
    M: int = 8
    alpha: tuple = None
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.M < 1:
            raise ValidationError(f"M must be positive, got {self.M}")
        if not self.sigma >= 0:
            raise ValidationError(f"sigma must be non-negative, got {self.sigma}")
        if self.kind == "none" and (self.M != 1 or self.sigma != 0):
            raise ValidationError(f"kind='none' requires M=1 and sigma=0, got M={self.M}, sigma={self.sigma}")
        alpha = (1.0 / self.M,) * self.M if self.alpha is None else tuple(float(a) for a in self.alpha)
        check_simplex(alpha, self.M)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def none(cls, noise_seed=0):
        return cls(kind="none", sigma=0.0, M=1, noise_seed=noise_seed)


def check_simplex(alpha, M=None):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or (M is not None and alpha.size != M):
        raise ValidationError(f"alpha must have {M} weights, got shape {alpha.shape}")
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise ValidationError(f"alpha must lie on the simplex (non-negative, sum 1), got sum {float(alpha.sum())!r}")
    return alpha


def project_linf(delta, epsilon):
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def sample_noises(spec, shape, rng=None):
    """Draw ``spec.M`` noise tensors of ``shape``; returns an ``(M, *shape)`` array.

    Without an explicit generator the draw is seeded from ``spec.noise_seed``.
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if spec.kind == "none" and spec.M > 1:
        raise ValidationError("kind='none' cannot produce more than one noise sample")
    if spec.kind == "none" or spec.sigma == 0:
        return np.zeros((spec.M,) + shape)
    rng = np.random.default_rng(spec.noise_seed) if rng is None else rng
    if spec.kind == "uniform":
        return rng.uniform(-spec.sigma, spec.sigma, size=(spec.M,) + shape)
    return spec.sigma * rng.standard_normal((spec.M,) + shape)


def fgsm(model, x, y, epsilon, clip_min=0.0, clip_max=1.0):
    x = as_tensor(x, "x")
    grad = loss_input_grad(model, x, y)
    return np.clip(x + epsilon * np.sign(grad), clip_min, clip_max)


def _pgd(x, cfg, grad_at):
    if cfg.random_start:
        delta = np.random.default_rng(cfg.rs_seed).uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        delta = np.zeros_like(x)
    for step in range(cfg.num_steps):
        grad = grad_at(x + delta, step)
        delta = project_linf(delta + cfg.step_size * np.sign(grad), cfg.epsilon)
    return np.clip(x + delta, cfg.clip_min, cfg.clip_max)


def pgd_baseline(model, x, y, cfg):
    """Sign-gradient ascent on the source model's own loss."""
    x = as_tensor(x, "x")
    return _pgd(x, cfg, lambda point, step: loss_input_grad(model, point, y))


def noise_avg_loss(model, x, delta, noises, alpha, y):
    """``sum_m alpha_m * L(h(x + delta + n_m), y)``; noised points are not clipped."""
    point = np.asarray(x, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    alpha = check_simplex(alpha, len(noises))
    total = alpha[0] * model_loss(model, point + noises[0], y)
    for a, n in zip(alpha[1:], noises[1:]):
        total = total + a * model_loss(model, point + n, y)
    return total


def noise_avg_grad(model, x, delta, noises, alpha, y):
    """Input gradient of :func:`noise_avg_loss`."""
    point = np.asarray(x, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    alpha = check_simplex(alpha, len(noises))
    return _avg_grad(model, point, noises, alpha, y)


def _avg_grad(model, point, noises, alpha, y):
    total = alpha[0] * loss_input_grad(model, point + noises[0], y)
    for a, n in zip(alpha[1:], noises[1:]):
        total = total + a * loss_input_grad(model, point + n, y)
    return total


def noise_pgd(model, x, y, cfg, spec, resample="once"):
    """PGD on the noise-averaged objective.

    ``resample="once"`` draws the ``M`` noises a single time and maximizes that
    fixed finite average; ``"per_step"`` redraws them before every step from a
    generator chained off ``spec.noise_seed``. For a batch each example gets
    its own noise draws.
    """
    if resample not in RESAMPLE_MODES:
        raise ValidationError(f"resample must be one of {RESAMPLE_MODES}, got {resample!r}")
    x = as_tensor(x, "x")
    alpha = np.asarray(spec.alpha)
    rng = np.random.default_rng(spec.noise_seed)
    fixed = sample_noises(spec, x.shape, rng) if resample == "once" else None

    def grad_at(point, step):
        noises = fixed if fixed is not None else sample_noises(spec, x.shape, rng)
        return _avg_grad(model, point, noises, alpha, y)

    return _pgd(x, cfg, grad_at)
