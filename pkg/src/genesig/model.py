"""Graph convolutional classifier, its MLP twin, and the training loop.

Architecture: three graph convolutions (feature widths 64 -> 32 -> 16), batch
norm after the first two, ReLU and dropout after each hidden activation, and
an affine head onto the class logits. Convolution layers are bias-free; the
head carries the only bias. Setting ``conv_head=True`` swaps the affine head
for a fourth graph convolution. Training is full-batch for a fixed number of
epochs with Adam plus decoupled weight decay (decay skips batch-norm
parameters and biases), using a class-weighted cross entropy on the masked
training nodes. Passing the identity operator turns the whole stack into the
plain MLP baseline.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, NumericError

HIDDEN_DIMS = (64, 32, 16)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.4
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("rates must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0,1)")


@dataclass
class GcnModel:
    weights: list            # convolution weight matrices
    head_w: np.ndarray
    head_b: np.ndarray
    bn_gamma: list
    bn_beta: list
    bn_mean: list            # running statistics, updated in train mode
    bn_var: list
    dropout: float = 0.4
    conv_head: bool = False
    batches_seen: int = 0
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    @property
    def n_inputs(self):
        return self.weights[0].shape[0]

    @property
    def n_classes(self):
        return self.head_w.shape[1]


def init_model(n_genes, n_classes, rng, hidden=HIDDEN_DIMS, dropout=0.4,
               conv_head=False):
    """Glorot-uniform weights drawn from ``rng``; batch norm starts at identity."""
    dims = (n_genes, *hidden)
    weights = [nc.glorot_uniform(rng, dims[i], dims[i + 1])
               for i in range(len(hidden))]
    head_w = nc.glorot_uniform(rng, hidden[-1], n_classes)
    head_b = np.zeros((1, n_classes))
    bn_dims = hidden[:2]
    return GcnModel(
        weights=weights, head_w=head_w, head_b=head_b,
        bn_gamma=[np.ones((1, d)) for d in bn_dims],
        bn_beta=[np.zeros((1, d)) for d in bn_dims],
        bn_mean=[np.zeros(d) for d in bn_dims],
        bn_var=[np.ones(d) for d in bn_dims],
        dropout=dropout, conv_head=conv_head)


def identity_operator(n_nodes):
    """Propagation operator of the MLP baseline: no message passing."""
    return np.eye(n_nodes)


def forward(model, operator, features, mode="eval", dropout_rng=None,
            update_running=False, x_requires_grad=False):
    """Build the forward tape; returns (logits, handles to leaf tensors).

    In train mode batch norm uses batch statistics (optionally folding them
    into the running averages) and dropout masks are drawn from
    ``dropout_rng``. Eval mode uses the running statistics and no dropout;
    if the model has never seen a batch it falls back to batch statistics
    with a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != model.n_inputs:
        raise ConfigError(
            f"feature width {features.shape[1]} != model input {model.n_inputs}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    train = mode == "train"
    if train and model.dropout > 0 and dropout_rng is None:
        raise ConfigError("train-mode forward needs a dropout rng")

    op_t = nc.Tensor(operator, requires=False)
    x_t = nc.Tensor(features, requires=x_requires_grad)
    handles = {"x": x_t}
    n = features.shape[0]

    h = x_t
    for layer, w in enumerate(model.weights):
        w_t = nc.Tensor(w)
        handles[f"w{layer}"] = w_t
        h = nc.matmul(op_t, nc.matmul(h, w_t))
        if layer < len(model.bn_gamma):
            h = _batch_norm(model, layer, h, train, update_running, handles)
        h = nc.relu(h)
        if train and model.dropout > 0:
            keep = 1.0 - model.dropout
            mask = (dropout_rng.random(h.shape) < keep) / keep
            h = nc.mul(h, nc.Tensor(mask, requires=False))

    head_w = nc.Tensor(model.head_w)
    head_b = nc.Tensor(model.head_b)
    handles["head_w"], handles["head_b"] = head_w, head_b
    logits = nc.matmul(h, head_w)
    if model.conv_head:
        logits = nc.matmul(op_t, logits)
    logits = nc.add_row(logits, head_b)
    return logits, handles


def _batch_norm(model, layer, h, train, update_running, handles):
    gamma = nc.Tensor(model.bn_gamma[layer])
    beta = nc.Tensor(model.bn_beta[layer])
    handles[f"bn{layer}_gamma"], handles[f"bn{layer}_beta"] = gamma, beta
    if train or model.batches_seen == 0:
        if not train:
            warnings.warn("eval-mode forward before any training step; "
                          "using batch statistics")
        out, mu, var = nc.batch_norm_train(h, gamma, beta, eps=model.bn_eps)
        if train and update_running:
            n = h.shape[0]
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = model.bn_momentum
            model.bn_mean[layer] = (1 - m) * model.bn_mean[layer] + m * mu
            model.bn_var[layer] = (1 - m) * model.bn_var[layer] + m * unbiased
        return out
    inv = 1.0 / np.sqrt(model.bn_var[layer] + model.bn_eps)
    mult = model.bn_gamma[layer][0] * inv
    shift = model.bn_beta[layer][0] - model.bn_mean[layer] * mult
    return nc.col_affine(h, mult, shift)


def class_weights(labels, mask, n_classes):
    """Inverse-frequency weights from the masked labels.

    Normalized so that sum_k weight_k * count_k equals the masked count;
    balanced classes therefore get weight 1. Absent classes get weight 0.
    """
    labels = np.asarray(labels)[np.asarray(mask, dtype=bool)]
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(n_classes)
    weights[present] = labels.size / (present.sum() * counts[present])
    return weights


def weighted_ce_loss(logits, labels, mask, weights):
    """Plain-array convenience wrapper around the fused loss op."""
    t = nc.Tensor(np.asarray(logits, dtype=np.float64), requires=False)
    return float(nc.weighted_cross_entropy(t, labels, mask, weights).data[0, 0])


_DECAYED = ("w0", "w1", "w2", "head_w")


def train(model, operator, features, labels, train_mask, config, rng=None):
    """Run the fixed-epoch training loop; returns the per-epoch loss curve.

    Raises NumericError if the loss stops being finite. ``rng`` drives
    dropout; by default it is seeded from ``config.seed`` (weight init is the
    caller's business, see ``fit``).
    """
    config.validate()
    train_mask = np.asarray(train_mask, dtype=bool)
    if not train_mask.any():
        raise ConfigError("empty training mask")
    if rng is None:
        rng = nc.make_rng(config.seed)
    weights = class_weights(labels, train_mask, model.n_classes)

    adam_m, adam_v = {}, {}
    losses = []
    for epoch in range(config.epochs):
        logits, handles = forward(model, operator, features, mode="train",
                                  dropout_rng=rng, update_running=True)
        model.batches_seen += 1
        loss = nc.weighted_cross_entropy(logits, labels, train_mask, weights)
        value = float(loss.data[0, 0])
        if not np.isfinite(value):
            raise NumericError(f"training loss diverged at epoch {epoch}: {value}")
        losses.append(value)
        nc.backward(loss)
        _adam_step(model, handles, adam_m, adam_v, epoch + 1, config)
    return losses


def _adam_step(model, handles, adam_m, adam_v, t, cfg):
    arrays = {"head_w": model.head_w, "head_b": model.head_b}
    for i in range(len(model.weights)):
        arrays[f"w{i}"] = model.weights[i]
    for i in range(len(model.bn_gamma)):
        arrays[f"bn{i}_gamma"] = model.bn_gamma[i]
        arrays[f"bn{i}_beta"] = model.bn_beta[i]

    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, param in arrays.items():
        grad = handles[name].grad
        if grad is None:
            continue
        if name not in adam_m:
            adam_m[name] = np.zeros_like(param)
            adam_v[name] = np.zeros_like(param)
        m, v = adam_m[name], adam_v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1 - cfg.beta2) * grad * grad
        step = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if name in _DECAYED:
            step = step + cfg.weight_decay * param
        param -= cfg.learning_rate * step


def fit(operator, features, labels, train_mask, config, n_classes=None,
        conv_head=False, entropy=None):
    """Initialize and train a fresh model; init and dropout share one rng.

    ``entropy`` overrides the rng seeding (e.g. ``[seed, iteration]``) so
    callers can derive independent deterministic streams from one base seed.
    """
    n_classes = n_classes or int(np.asarray(labels).max()) + 1
    rng = nc.make_rng(config.seed if entropy is None else entropy)
    model = init_model(np.asarray(features).shape[1], n_classes, rng,
                       dropout=config.dropout, conv_head=conv_head)
    losses = train(model, operator, features, labels, train_mask, config, rng=rng)
    return model, losses


def predict(model, operator, features):
    """Eval-mode class predictions and softmax probabilities per node."""
    logits, _ = forward(model, operator, features, mode="eval")
    probs = nc.softmax(logits.data)
    return probs.argmax(axis=1), probs  # argmax breaks ties toward class 0


# ---------------------------------------------------------------------------
# checkpointing: JSON manifest + raw float64 blob
# ---------------------------------------------------------------------------

_CHECKPOINT_FIELDS = ("weights", "head_w", "head_b", "bn_gamma", "bn_beta",
                      "bn_mean", "bn_var")


def save_checkpoint(model, path):
    """Write ``path`` (JSON shapes/config) and ``path + '.bin'`` (weights)."""
    arrays, spec = [], {}
    for name in _CHECKPOINT_FIELDS:
        value = getattr(model, name)
        items = value if isinstance(value, list) else [value]
        spec[name] = [list(np.shape(a)) for a in items]
        arrays.extend(np.asarray(a, dtype=np.float64) for a in items)
    blob = np.concatenate([a.ravel() for a in arrays])
    meta = {
        "format": "genesig-checkpoint-v1",
        "shapes": spec,
        "dropout": model.dropout,
        "conv_head": model.conv_head,
        "batches_seen": model.batches_seen,
        "bn_momentum": model.bn_momentum,
        "bn_eps": model.bn_eps,
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2)
    blob.astype("<f8").tofile(str(path) + ".bin")


def load_checkpoint(path):
    with open(path) as fh:
        meta = json.load(fh)
    blob = np.fromfile(str(path) + ".bin", dtype="<f8")
    fields = {}
    pos = 0
    for name in _CHECKPOINT_FIELDS:
        items = []
        for shape in meta["shapes"][name]:
            size = int(np.prod(shape)) if shape else 1
            items.append(blob[pos:pos + size].reshape(shape))
            pos += size
        fields[name] = items
    return GcnModel(
        weights=fields["weights"],
        head_w=fields["head_w"][0], head_b=fields["head_b"][0],
        bn_gamma=fields["bn_gamma"], bn_beta=fields["bn_beta"],
        bn_mean=fields["bn_mean"], bn_var=fields["bn_var"],
        dropout=meta["dropout"], conv_head=meta["conv_head"],
        batches_seen=meta["batches_seen"], bn_momentum=meta["bn_momentum"],
        bn_eps=meta["bn_eps"])
