"""Experiment configuration and the train -> attack -> evaluate pipelines.

A config is a JSON object with the sections below. Missing keys take the
defaults; unknown sections or keys are rejected. Everything is validated
before any compute starts.
"""

import copy
import json
import math
from dataclasses import dataclass

import numpy as np

from noisetransfer.attack import AttackConfig, NoiseSpec, RESAMPLE_MODES, noise_pgd, pgd_baseline, sample_noises
from noisetransfer.data import gen_gaussian_blobs, load_idx, split
from noisetransfer.errors import ConfigError, ValidationError
from noisetransfer.model import TrainConfig, accuracy, init_model, predict, train_ensemble
from noisetransfer.tensor_core import (
    finite_difference_grad,
    loss_input_grad,
    model_loss,
    one_hot,
    relative_error,
)
from noisetransfer.theory import (
    F_ESTIMATORS,
    EvalPoint,
    mse_stats,
    per_target_rates,
    verify_cauchy_schwarz,
    verify_mse_inequality,
)

DEFAULTS = {
    "data": {
        "source": "blobs",
        "n_per_class": 100,
        "d": 784,
        "C": 10,
        "spread": 0.2,
        "seed": 0,
        "train_fraction": 0.5,
        "images_path": None,
        "labels_path": None,
    },
    "ensemble": {
        "K": 8,
        "hidden": [64],
        "activation": "tanh",
        "learning_rate": 0.1,
        "epochs": 20,
        "batch_size": 16,
        "base_seed": 0,
    },
    "attack": {
        "epsilon": 0.3,
        "step_size": None,  # None: epsilon / 4
        "num_steps": 10,
        "random_start": False,
        "rs_seed": 0,
        "kind": "uniform",
        "sigma": None,  # None: epsilon (0 for kind "none")
        "M": 8,
        "alpha": None,  # None: uniform 1/M
        "resample": "once",
        "noise_seed": 0,
    },
    "eval": {
        "num_eval_points": 200,
        "num_attack_examples": 250,
        "f_estimator": "all",
        "delta_source": "baseline",
        "output_dir": "results",
    },
    "gradcheck": {
        "trials": 20,
        "max_dim": 16,
        "num_classes": 10,
        "h": 1e-5,
        "tol": 1e-5,
        "seed": 0,
    },
}

DELTA_SOURCES = ("baseline", "noise", "zero")
METHODS = ("baseline", "noise")


def _merge(base, override, where="config"):
    if not isinstance(override, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(override).__name__}")
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in base:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = value
    return out


def parse_override(text):
    """Parse ``section.key=value``; the value is read as JSON when possible."""
    path, sep, raw = text.partition("=")
    section, dot, key = path.partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {section: {key: value}}


def master_seed_overrides(seed):
    """Everything random derives from one integer when ``--seed`` is given."""
    return {
        "data": {"seed": seed},
        "ensemble": {"base_seed": 1000 * seed},
        "attack": {"rs_seed": seed, "noise_seed": seed},
        "gradcheck": {"seed": seed},
    }


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the file at ``path``, then ``--seed``, then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            cfg = _merge(cfg, json.loads(text), str(path))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        cfg = _merge(cfg, master_seed_overrides(seed))
    for item in overrides:
        cfg = _merge(cfg, parse_override(item) if isinstance(item, str) else item)
    return resolve(cfg)


def _int(cfg, section, key, minimum=None):
    v = cfg[section][key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{section}.{key} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{section}.{key} must be >= {minimum}, got {v}")
    return v


def _float(cfg, section, key):
    v = cfg[section][key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{section}.{key} must be a finite number, got {v!r}")
    return float(v)


def _choice(cfg, section, key, options):
    v = cfg[section][key]
    if v not in options:
        raise ConfigError(f"{section}.{key} must be one of {options}, got {v!r}")
    return v


@dataclass(frozen=True)
class Experiment:
    """A fully resolved and validated configuration."""

    config: dict
    train_config: TrainConfig
    attack_config: AttackConfig
    noise_spec: NoiseSpec

    def section(self, name):
        return self.config[name]


def resolve(cfg):
    """Fill derived defaults, type-check every key and build the typed configs."""
    cfg = copy.deepcopy(cfg)
    d, a, e, ev, g = cfg["data"], cfg["attack"], cfg["ensemble"], cfg["eval"], cfg["gradcheck"]

    _choice(cfg, "data", "source", ("blobs", "idx"))
    if d["source"] == "idx":
        for key in ("images_path", "labels_path"):
            if not isinstance(d[key], str):
                raise ConfigError(f"data.{key} is required when data.source is 'idx'")
    _int(cfg, "data", "n_per_class", 1)
    _int(cfg, "data", "d", 1)
    _int(cfg, "data", "C", 2)
    _int(cfg, "data", "seed", 0)
    if _float(cfg, "data", "spread") < 0:
        raise ConfigError("data.spread must be non-negative")
    if not 0 < _float(cfg, "data", "train_fraction") < 1:
        raise ConfigError("data.train_fraction must lie strictly between 0 and 1")

    _int(cfg, "ensemble", "K", 2)
    if not isinstance(e["hidden"], list) or any(isinstance(h, bool) or not isinstance(h, int) or h < 1
                                                for h in e["hidden"]):
        raise ConfigError(f"ensemble.hidden must be a list of positive integers, got {e['hidden']!r}")
    _choice(cfg, "ensemble", "activation", ("relu", "tanh"))
    _int(cfg, "ensemble", "base_seed", 0)

    eps = _float(cfg, "attack", "epsilon")
    if eps < 0:
        raise ConfigError(f"attack.epsilon must be non-negative, got {eps}")
    if a["step_size"] is None:
        a["step_size"] = eps / 4 if eps > 0 else 0.01
    kind = _choice(cfg, "attack", "kind", ("none", "uniform", "gaussian"))
    if a["sigma"] is None:
        a["sigma"] = 0.0 if kind == "none" else eps
    _choice(cfg, "attack", "resample", RESAMPLE_MODES)
    M = _int(cfg, "attack", "M", 1)
    if a["alpha"] is None:
        a["alpha"] = [1.0 / M] * M
    if not isinstance(a["alpha"], list):
        raise ConfigError(f"attack.alpha must be a list, got {a['alpha']!r}")

    _int(cfg, "eval", "num_eval_points", 1)
    _int(cfg, "eval", "num_attack_examples", 1)
    _choice(cfg, "eval", "f_estimator", F_ESTIMATORS)
    _choice(cfg, "eval", "delta_source", DELTA_SOURCES)
    if not isinstance(ev["output_dir"], str):
        raise ConfigError("eval.output_dir must be a string")

    _int(cfg, "gradcheck", "trials", 1)
    _int(cfg, "gradcheck", "max_dim", 1)
    _int(cfg, "gradcheck", "num_classes", 2)
    _int(cfg, "gradcheck", "seed", 0)
    for key in ("h", "tol"):
        if not _float(cfg, "gradcheck", key) > 0:
            raise ConfigError(f"gradcheck.{key} must be positive")

    try:
        train_cfg = TrainConfig(_float(cfg, "ensemble", "learning_rate"), _int(cfg, "ensemble", "epochs"),
                                _int(cfg, "ensemble", "batch_size"), 0)
    except ValidationError as exc:
        raise ConfigError(f"ensemble: {exc}") from exc
    try:
        attack_cfg = AttackConfig(eps, _float(cfg, "attack", "step_size"), _int(cfg, "attack", "num_steps"),
                                  bool(a["random_start"]), _int(cfg, "attack", "rs_seed", 0))
    except ValidationError as exc:
        raise ConfigError(f"attack: {exc}") from exc
    try:
        spec = NoiseSpec(kind, _float(cfg, "attack", "sigma"), M, tuple(float(v) for v in a["alpha"]),
                         _int(cfg, "attack", "noise_seed", 0))
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"attack: {exc}") from exc
    return Experiment(cfg, train_cfg, attack_cfg, spec)


def dumps_config(exp):
    return json.dumps(exp.config, indent=2, sort_keys=True) + "\n"


# pipeline steps

def build_data(exp):
    d = exp.section("data")
    if d["source"] == "blobs":
        ds = gen_gaussian_blobs(d["n_per_class"], d["d"], d["C"], d["spread"], d["seed"])
    else:
        ds = load_idx(d["images_path"], d["labels_path"], d["C"])
    return split(ds, d["train_fraction"], d["seed"])


def layer_dims(exp, dataset):
    return [dataset.dim] + list(exp.section("ensemble")["hidden"]) + [dataset.num_classes]


def build_ensemble(exp, train_set):
    e = exp.section("ensemble")
    return train_ensemble(layer_dims(exp, train_set), e["K"], e["base_seed"], train_set,
                          exp.train_config, activation=e["activation"])


def check_compatible(ensemble, dataset):
    if ensemble.input_dim != dataset.dim or ensemble.num_classes != dataset.num_classes:
        raise ValidationError(
            f"ensemble expects {ensemble.input_dim} inputs and {ensemble.num_classes} classes, "
            f"data has {dataset.dim} and {dataset.num_classes}"
        )


def train_summary(ensemble, train_set, test_set):
    rows = []
    for i, m in enumerate(ensemble):
        rows.append({
            "member": i,
            "seed": m.seed,
            "train_accuracy": accuracy(m, train_set),
            "test_accuracy": accuracy(m, test_set),
        })
    return rows


def attack_examples(exp, test_set):
    n = min(exp.section("eval")["num_attack_examples"], len(test_set))
    return test_set.subset(np.arange(n))


def run_attacks(exp, ensemble, examples):
    """Adversarial examples of shape ``(method, source, n, d)`` for both methods."""
    y = one_hot(examples.labels, examples.num_classes)
    resample = exp.section("attack")["resample"]
    out = np.empty((len(METHODS), len(ensemble)) + examples.inputs.shape)
    for s, src in enumerate(ensemble):
        out[0, s] = pgd_baseline(src, examples.inputs, y, exp.attack_config)
        out[1, s] = noise_pgd(src, examples.inputs, y, exp.attack_config, exp.noise_spec, resample)
    return out


def attack_rows(ensemble, examples, adv):
    y = one_hot(examples.labels, examples.num_classes)
    rows = []
    for mi, method in enumerate(METHODS):
        for s, src in enumerate(ensemble):
            before = model_loss(src, examples.inputs, y)
            after = model_loss(src, adv[mi, s], y)
            pred_clean = predict(src, examples.inputs)
            pred_adv = predict(src, adv[mi, s])
            linf = np.abs(adv[mi, s] - examples.inputs).max(axis=1)
            for i in range(len(examples)):
                rows.append({
                    "method": method,
                    "source": s,
                    "example_id": i,
                    "label": int(examples.labels[i]),
                    "loss_before": float(before[i]),
                    "loss_after": float(after[i]),
                    "linf": float(linf[i]),
                    "fooled": int(pred_clean[i] == examples.labels[i] and pred_adv[i] != examples.labels[i]),
                })
    return rows


def transfer_rows(ensemble, examples, adv):
    """One row per (method, source): leave-one-source-out transfer rate."""
    if adv.shape[:2] != (len(METHODS), len(ensemble)) or adv.shape[2:] != examples.inputs.shape:
        raise ValidationError(
            f"adversarial array has shape {adv.shape}, expected "
            f"{(len(METHODS), len(ensemble)) + examples.inputs.shape}"
        )
    rows = []
    for mi, method in enumerate(METHODS):
        for s in range(len(ensemble)):
            targets = ensemble.without(s)
            rates = per_target_rates(targets, adv[mi, s], examples.labels, examples.inputs)
            kept = [r for r in rates if r is not None]
            correct = [int((predict(t, examples.inputs) == examples.labels).sum()) for t in targets]
            rows.append({
                "method": method,
                "source": s,
                "transfer_rate": float(np.mean(kept)) if kept else 0.0,
                "num_targets": len(kept),
                "min_correct": min(correct),
            })
    return rows


def transfer_summary(rows):
    means = {m: float(np.mean([r["transfer_rate"] for r in rows if r["method"] == m])) for m in METHODS}
    return {
        "baseline": means["baseline"],
        "noise": means["noise"],
        "improvement": means["noise"] - means["baseline"],
        "min_correct": min(r["min_correct"] for r in rows),
    }


def eval_points(exp, ensemble, test_set):
    """Eval points from the head of the test split.

    ``delta`` comes from attacking member 0 (baseline or noise PGD, or zero).
    The ``M`` noises of each point come from one generator seeded with
    ``attack.noise_seed``, consumed in example order.
    """
    ev = exp.section("eval")
    n = min(ev["num_eval_points"], len(test_set))
    x = test_set.inputs[:n]
    y = one_hot(test_set.labels[:n], test_set.num_classes)
    source = ensemble[0]
    if ev["delta_source"] == "baseline":
        x_adv = pgd_baseline(source, x, y, exp.attack_config)
    elif ev["delta_source"] == "noise":
        x_adv = noise_pgd(source, x, y, exp.attack_config, exp.noise_spec, exp.section("attack")["resample"])
    else:
        x_adv = x
    rng = np.random.default_rng(exp.noise_spec.noise_seed)
    alpha = np.asarray(exp.noise_spec.alpha)
    return [EvalPoint(x[i], x_adv[i] - x[i], y[i], sample_noises(exp.noise_spec, x.shape[1], rng), alpha)
            for i in range(n)]


def theory_rows(exp, ensemble, points):
    f_estimator = exp.section("eval")["f_estimator"]
    rows = []
    for i, p in enumerate(points):
        st = mse_stats(ensemble, p, f_estimator)
        verdict = verify_mse_inequality(st)
        cs = verify_cauchy_schwarz(st)
        rows.append({
            "example_id": i,
            "K": st.K,
            "M": st.M,
            "sigma": exp.noise_spec.sigma,
            "kind": exp.noise_spec.kind,
            "f_hat_mse": st.f_hat_mse,
            "f_bar_mse": st.f_bar_mse,
            "margin": verdict.margin,
            "assumption_gap": st.assumption_gap,
            "min_rho": None if st.rho is None else float(st.rho.min()),
            "max_rho": None if st.rho is None else float(st.rho.max()),
            "cs_ok": int(cs.ok),
            "holds": int(verdict.holds),
            "expansion_ok": int(verdict.expansion_ok),
        })
    return rows


def theory_summary(rows):
    n = len(rows)
    holds = sum(r["holds"] for r in rows)
    gaps = [r["assumption_gap"] for r in rows]
    return {
        "points": n,
        "holds": holds,
        "holds_fraction": holds / n,
        "mean_margin": float(np.mean([r["margin"] for r in rows])),
        "mean_f_hat_mse": float(np.mean([r["f_hat_mse"] for r in rows])),
        "mean_f_bar_mse": float(np.mean([r["f_bar_mse"] for r in rows])),
        "mean_assumption_gap": float(np.mean(gaps)),
        "cs_violations": n - sum(r["cs_ok"] for r in rows),
        "expansion_failures": n - sum(r["expansion_ok"] for r in rows),
    }


def theory_verdict(summary):
    return (
        f"MSE inequality holds on {summary['holds']}/{summary['points']} points "
        f"({summary['holds_fraction']:.3f}); mean margin {summary['mean_margin']:.6g}; "
        f"mean assumption_gap {summary['mean_assumption_gap']:.6g}; "
        f"Cauchy-Schwarz violations {summary['cs_violations']}; "
        f"expansion failures {summary['expansion_failures']}"
    )


def gradcheck_rows(exp):
    """Backprop input gradient vs central differences on random small MLPs."""
    g = exp.section("gradcheck")
    rng = np.random.default_rng(g["seed"])
    rows = []
    for t in range(g["trials"]):
        if t == 0:
            dims = [g["max_dim"], g["max_dim"], g["num_classes"]]  # largest allowed
        else:
            depth = int(rng.integers(0, 2))  # up to one hidden layer
            dims = [int(rng.integers(1, g["max_dim"] + 1)) for _ in range(depth + 1)]
            dims.append(int(rng.integers(2, g["num_classes"] + 1)))
        act = ("relu", "tanh")[t % 2]
        model = init_model(dims, act, int(rng.integers(2**31)))
        for b in model.biases:
            b[:] = rng.normal(scale=0.5, size=b.shape)
        x = rng.uniform(size=dims[0])
        y = one_hot(int(rng.integers(dims[-1])), dims[-1])
        exact = loss_input_grad(model, x, y)
        fd = finite_difference_grad(lambda z: model_loss(model, z, y), x, g["h"])
        err = relative_error(exact, fd)
        rows.append({
            "trial": t,
            "layer_dims": "-".join(map(str, dims)),
            "activation": act,
            "rel_error": err,
            "passed": int(err < g["tol"]),
        })
    return rows
