"""MLP classifiers, SGD training, seed-varied ensembles and their on-disk format."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from noisetransfer.errors import (
    MalformedFileError,
    ShapeInconsistencyError,
    TrainingDivergedError,
    ValidationError,
    VersionMismatchError,
)
from noisetransfer.tensor_core import (
    ACTIVATIONS,
    activation_derivative,
    logits_grad,
    mlp_forward,
    one_hot,
    softmax_cross_entropy,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(eq=False)
class MlpModel:
    layer_dims: tuple
    weights: list
    biases: list
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValidationError(f"invalid layer_dims {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unsupported activation {self.activation!r}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValidationError(f"expected {n_layers} weight/bias pairs for dims {self.layer_dims}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != want or b.shape != (want[0],):
                raise ValidationError(
                    f"layer {i}: weights {w.shape} / bias {b.shape} do not conform to {want}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def num_classes(self):
        return self.layer_dims[-1]

    def logits(self, x):
        return mlp_forward(self.weights, self.biases, self.activation, x)

    def copy(self):
        return MlpModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.seed,
        )

    def flat_params(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return (
            self.layer_dims == other.layer_dims
            and self.activation == other.activation
            and self.seed == other.seed
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.weights, other.weights))
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.biases, other.biases))
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 16
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        # epochs=0 is accepted: it returns the untrained copy
        if self.epochs < 0:
            raise ValidationError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.shuffle_seed < 0:
            raise ValidationError(f"shuffle_seed must be non-negative, got {self.shuffle_seed}")


@dataclass(eq=False)
class Ensemble:
    """Same-architecture members standing in for the hypothesis space."""

    models: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.models = list(self.models)
        if len(self.models) < 2:
            raise ValidationError(f"an ensemble needs at least 2 members, got {len(self.models)}")
        first = self.models[0]
        for i, m in enumerate(self.models[1:], start=1):
            if m.input_dim != first.input_dim or m.num_classes != first.num_classes:
                raise ValidationError(
                    f"member {i} maps {m.input_dim}->{m.num_classes}, "
                    f"member 0 maps {first.input_dim}->{first.num_classes}"
                )

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, i):
        return self.models[i]

    @property
    def input_dim(self):
        return self.models[0].input_dim

    @property
    def num_classes(self):
        return self.models[0].num_classes

    def without(self, index):
        """Members other than ``index``, in order (a plain list; may have length 1)."""
        return [m for i, m in enumerate(self.models) if i != index]


def init_model(layer_dims, activation="relu", seed=0):
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    layer_dims = tuple(int(d) for d in layer_dims)
    if len(layer_dims) < 2 or min(layer_dims) < 1:
        raise ValidationError(f"invalid layer_dims {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_dims, weights, biases, activation, int(seed))


def _param_grads(model, x, y):
    """Mean cross-entropy over the batch and its parameter gradients."""
    logits, inputs, pres = mlp_forward(model.weights, model.biases, model.activation, x, trace=True)
    loss = float(np.mean(softmax_cross_entropy(logits, y)))
    g = logits_grad(logits, y) / x.shape[0]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = g.T @ inputs[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i]) * activation_derivative(pres[i - 1], model.activation)
    return loss, gw, gb


def train(model, dataset, cfg):
    """Mini-batch SGD on softmax cross-entropy; returns a trained copy.

    Shuffling is redrawn every epoch from ``cfg.shuffle_seed``, so the result
    is a pure function of ``(model, dataset, cfg)``.
    """
    x = np.asarray(dataset.inputs, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if x.shape[0] == 0:
        raise ValidationError("cannot train on an empty dataset")
    if x.shape[1] != model.input_dim:
        raise ValidationError(f"dataset dimension {x.shape[1]} != model input {model.input_dim}")
    y = one_hot(labels, model.num_classes)
    trained = model.copy()
    rng = np.random.default_rng(cfg.shuffle_seed)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, gw, gb = _param_grads(trained, x[idx], y[idx])
            except ValidationError:
                loss = math.nan
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} is likely too high"
                )
            with np.errstate(over="ignore", invalid="ignore"):
                for i in range(len(trained.weights)):
                    trained.weights[i] -= cfg.learning_rate * gw[i]
                    trained.biases[i] -= cfg.learning_rate * gb[i]
        if not all(np.all(np.isfinite(w)) for w in trained.weights + trained.biases):
            raise TrainingDivergedError(
                f"non-finite weights after epoch {epoch}; learning rate {cfg.learning_rate} is likely too high"
            )
    return trained


def predict(model, x):
    """Argmax class; ties go to the lowest index."""
    return np.argmax(model.logits(x), axis=-1)


def accuracy(model, dataset):
    x = np.asarray(dataset.inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValidationError("accuracy is undefined on an empty dataset")
    return float(np.mean(predict(model, x) == np.asarray(dataset.labels)))


def train_ensemble(layer_dims, K, base_seed, dataset, cfg, activation="relu", seeds=None):
    """Train ``K`` members with seeds ``base_seed .. base_seed + K - 1``.

    Each member's seed drives both its initialization and its shuffling.
    ``seeds`` overrides the seed list (duplicates produce identical members,
    which is recorded as ``metadata["degenerate"]``).
    """
    if K < 2:
        raise ValidationError(f"K must be at least 2, got {K}")
    seeds = [base_seed + i for i in range(K)] if seeds is None else [int(s) for s in seeds]
    if len(seeds) != K:
        raise ValidationError(f"got {len(seeds)} seeds for K={K}")
    models = []
    for i, seed in enumerate(seeds):
        member_cfg = TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, seed)
        try:
            models.append(train(init_model(layer_dims, activation, seed), dataset, member_cfg))
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"ensemble member {i} (seed {seed}): {exc}") from exc
    degenerate = any(
        models[i] == models[j] for i in range(K) for j in range(i + 1, K)
    )
    metadata = {
        "seeds": seeds,
        "train_config": asdict(cfg),
        "layer_dims": list(layer_dims),
        "activation": activation,
        "degenerate": degenerate,
    }
    return Ensemble(models, metadata)


# -- persistence -------------------------------------------------------------

def _num(v):
    s = format(float(v), ".17g")
    # keep a float literal so "-0" does not parse back as integer zero
    return s if any(c in s for c in ".e") else s + ".0"


def _fmt(values):
    return "[" + ", ".join(_num(v) for v in np.ravel(values)) + "]"


def dumps_model(model):
    lines = [
        "{",
        f'  "format_version": {FORMAT_VERSION},',
        f'  "layer_dims": {json.dumps(list(model.layer_dims))},',
        f'  "activation": {json.dumps(model.activation)},',
        f'  "seed": {int(model.seed)},',
        '  "weights": [',
        ",\n".join("    " + _fmt(w) for w in model.weights),
        "  ],",
        '  "biases": [',
        ",\n".join("    " + _fmt(b) for b in model.biases),
        "  ]",
        "}",
    ]
    return "\n".join(lines) + "\n"


def loads_model(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedFileError("model file must contain a JSON object")
    missing = {"format_version", "layer_dims", "activation", "seed", "weights", "biases"} - doc.keys()
    if missing:
        raise MalformedFileError(f"model file is missing fields {sorted(missing)}")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"model file format_version {doc['format_version']!r}, expected {FORMAT_VERSION}"
        )
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        weights = [np.array(w, dtype=np.float64) for w in doc["weights"]]
        biases = [np.array(b, dtype=np.float64) for b in doc["biases"]]
    except (TypeError, ValueError) as exc:
        raise MalformedFileError(f"model file has malformed numeric fields: {exc}") from exc
    n_layers = len(dims) - 1
    if n_layers < 1 or len(weights) != n_layers or len(biases) != n_layers:
        raise ShapeInconsistencyError(
            f"layer_dims {dims} declare {n_layers} layers, file has "
            f"{len(weights)} weight and {len(biases)} bias arrays"
        )
    for i in range(n_layers):
        if weights[i].ndim != 1 or weights[i].size != dims[i] * dims[i + 1]:
            raise ShapeInconsistencyError(
                f"layer {i}: declared {dims[i + 1]}x{dims[i]} weights, found {weights[i].size} values"
            )
        if biases[i].ndim != 1 or biases[i].size != dims[i + 1]:
            raise ShapeInconsistencyError(
                f"layer {i}: declared {dims[i + 1]} biases, found {biases[i].size} values"
            )
        weights[i] = weights[i].reshape(dims[i + 1], dims[i])
    try:
        return MlpModel(dims, weights, biases, doc["activation"], int(doc["seed"]))
    except ValidationError as exc:
        raise MalformedFileError(str(exc)) from exc


def save_model(model, path):
    Path(path).write_text(dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_text())


def save_ensemble(ensemble, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(ensemble.models):
        name = f"member_{i:03d}.json"
        save_model(m, directory / name)
        names.append(name)
    manifest = {"format_version": FORMAT_VERSION, "members": names, "metadata": ensemble.metadata}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_ensemble(directory):
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no ensemble manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"ensemble manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "members" not in manifest:
        raise MalformedFileError("ensemble manifest lacks a members list")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"manifest format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    models = [load_model(directory / name) for name in manifest["members"]]
    try:
        return Ensemble(models, manifest.get("metadata", {}))
    except ValidationError as exc:
        raise ShapeInconsistencyError(str(exc)) from exc
