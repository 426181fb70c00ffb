"""Empirical error statistics of single-source vs noise-averaged objectives.

The ensemble plays the hypothesis space: ``f`` is the mean member loss at a
point, every member takes a turn as the source, and expectations over the
hypothesis space become means over those sources.
"""

import math
from dataclasses import dataclass

import numpy as np

from noisetransfer.attack import check_simplex
from noisetransfer.errors import ValidationError
from noisetransfer.model import predict
from noisetransfer.tensor_core import as_tensor, check_one_hot, model_loss

F_ESTIMATORS = ("all", "leave_one_out")
CS_TOL = 1e-9
MSE_REL_TOL = 1e-9
EXPANSION_REL_TOL = 1e-9


@dataclass(eq=False)
class EvalPoint:
    x: np.ndarray
    delta: np.ndarray
    y: np.ndarray
    noises: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.x = as_tensor(self.x, "x")
        self.delta = as_tensor(self.delta, "delta")
        self.y = check_one_hot(self.y)
        self.noises = as_tensor(self.noises, "noises")
        if self.x.ndim != 1 or self.delta.shape != self.x.shape:
            raise ValidationError(f"x {self.x.shape} and delta {self.delta.shape} must be equal 1-D shapes")
        if self.noises.ndim != 2 or self.noises.shape[1] != self.x.size:
            raise ValidationError(f"noises must have shape (M, {self.x.size}), got {self.noises.shape}")
        self.alpha = check_simplex(self.alpha, self.noises.shape[0])

    @property
    def M(self):
        return self.noises.shape[0]

    @property
    def x_adv(self):
        return self.x + self.delta


@dataclass(eq=False)
class ErrorStats:
    f_hat_mse: float
    f_bar_mse: float
    eps_hat: np.ndarray        # (K,)
    eps_m: np.ndarray          # (K, M)
    cross_moments: np.ndarray  # (M, M), mean over sources of eps_l * eps_k
    rho: np.ndarray            # (M, M), or None when f_hat_mse == 0
    assumption_gap: float
    alpha: np.ndarray

    @property
    def K(self):
        return self.eps_m.shape[0]

    @property
    def M(self):
        return self.eps_m.shape[1]


@dataclass
class CauchySchwarzReport:
    ok: bool
    max_excess: float
    violations: list


@dataclass
class MseVerdict:
    holds: bool
    margin: float
    expansion: float
    expansion_rel_error: float
    expansion_ok: bool


def _models(ensemble):
    models = list(ensemble)
    if len(models) < 2:
        raise ValidationError(f"need at least 2 ensemble members to separate f_hat from f, got {len(models)}")
    return models


def member_losses(ensemble, x_adv, y):
    return np.array([model_loss(m, x_adv, y) for m in _models(ensemble)])


def _reference(losses, f_estimator):
    """Per-source ``f``: the all-member mean, or the mean of the other members."""
    if f_estimator == "all":
        return np.full(losses.shape, losses.mean())
    if f_estimator == "leave_one_out":
        return (losses.sum() - losses) / (losses.size - 1)
    raise ValidationError(f"f_estimator must be one of {F_ESTIMATORS}, got {f_estimator!r}")


def empirical_f(ensemble, x_adv, y):
    return float(member_losses(ensemble, x_adv, y).mean())


def error_hat(source_index, ensemble, x_adv, y, f_estimator="all"):
    losses = member_losses(ensemble, x_adv, y)
    return float(losses[source_index] - _reference(losses, f_estimator)[source_index])


def error_m(source_index, ensemble, point, m, f_estimator="all"):
    models = _models(ensemble)
    f = _reference(member_losses(models, point.x_adv, point.y), f_estimator)[source_index]
    return float(model_loss(models[source_index], point.x_adv + point.noises[m], point.y) - f)


def _second_moments(errors):
    """``S[l, k] = mean_i e[i, l] * e[i, k]``, symmetric bit for bit."""
    S = errors.T @ errors / errors.shape[0]
    return (S + S.T) / 2.0


def _gap(cross_moments, f_hat_mse):
    diff = np.abs(np.diag(cross_moments) - f_hat_mse).max()
    if f_hat_mse == 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / f_hat_mse)


def mse_stats(ensemble, point, f_estimator="all"):
    models = _models(ensemble)
    losses = member_losses(models, point.x_adv, point.y)
    ref = _reference(losses, f_estimator)
    noised = np.array([
        [model_loss(m, point.x_adv + n, point.y) for n in point.noises] for m in models
    ])
    eps_hat = losses - ref
    eps_m = noised - ref[:, None]
    f_hat_mse = float(np.mean(eps_hat ** 2))
    f_bar_mse = float(np.mean((eps_m @ point.alpha) ** 2))
    cross = _second_moments(eps_m)
    rho = cross / f_hat_mse if f_hat_mse > 0 else None
    return ErrorStats(
        f_hat_mse=f_hat_mse,
        f_bar_mse=f_bar_mse,
        eps_hat=eps_hat,
        eps_m=eps_m,
        cross_moments=cross,
        rho=rho,
        assumption_gap=_gap(cross, f_hat_mse),
        alpha=point.alpha,
    )


def assumption_check(ensemble, point, f_estimator="all"):
    """Relative gap between each noised second moment and the un-noised one.

    Finite ensembles only approximate the assumption, so this is reported,
    not asserted.
    """
    return mse_stats(ensemble, point, f_estimator).assumption_gap


def verify_cauchy_schwarz(stats_or_errors, tol=CS_TOL):
    """Check ``|E[e_l e_k]| <= sqrt(E[e_l^2] E[e_k^2]) + tol`` for all pairs.

    Accepts an :class:`ErrorStats` or a raw ``(K, M)`` error matrix. For
    empirical means this is a theorem, so a violation points at a bug.
    """
    if isinstance(stats_or_errors, ErrorStats):
        errors = stats_or_errors.eps_m
    else:
        errors = np.asarray(stats_or_errors, dtype=np.float64)
    if errors.ndim != 2:
        raise ValidationError(f"error matrix must be (K, M), got shape {errors.shape}")
    cross = _second_moments(errors)
    diag = np.diag(cross)
    bound = np.sqrt(np.outer(diag, diag))
    excess = np.abs(cross) - bound
    bad = np.argwhere(excess > tol)
    return CauchySchwarzReport(
        ok=bad.size == 0,
        max_excess=float(excess.max()),
        violations=[(int(l), int(k), float(excess[l, k])) for l, k in bad],
    )


def expansion_value(stats):
    """``sum_m a_m^2 S_mm + 2 sum_{l<k} a_l a_k S_lk`` with ``S`` the cross-moments."""
    a, S = stats.alpha, stats.cross_moments
    M = a.size
    total = float(np.sum(a ** 2 * np.diag(S)))
    for l in range(M):
        for k in range(l + 1, M):
            total += 2.0 * a[l] * a[k] * S[l, k]
    return total


def verify_mse_inequality(stats):
    margin = stats.f_hat_mse - stats.f_bar_mse
    expansion = expansion_value(stats)
    scale = max(abs(stats.f_bar_mse), abs(expansion))
    rel = 0.0 if scale == 0 else abs(stats.f_bar_mse - expansion) / scale
    return MseVerdict(
        holds=margin >= -MSE_REL_TOL * max(1.0, stats.f_hat_mse),
        margin=margin,
        expansion=expansion,
        expansion_rel_error=rel,
        expansion_ok=rel <= EXPANSION_REL_TOL,
    )


def per_target_rates(targets, x_adv, labels, x_clean):
    """Misclassification rate of each target on the examples it got right when clean.

    Targets with no correctly classified clean example are reported as ``None``.
    """
    labels = np.asarray(labels)
    rates = []
    for target in targets:
        correct = predict(target, x_clean) == labels
        if not correct.any():
            rates.append(None)
            continue
        fooled = predict(target, np.asarray(x_adv)[correct]) != labels[correct]
        rates.append(float(fooled.mean()))
    return rates


def transfer_rate(targets, x_adv, labels, x_clean):
    """Mean over targets of the per-target fooling rate (see :func:`per_target_rates`)."""
    rates = [r for r in per_target_rates(targets, x_adv, labels, x_clean) if r is not None]
    if not rates:
        return 0.0
    return float(np.mean(rates))
