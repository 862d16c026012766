"""Builds the model population: victims, positive suspects (finetuning, pruning,
extraction, adaptive attacks) and independently trained negatives.

Every operation is a deterministic function of its inputs and
``config.rng_seed`` and never mutates the model it is given.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import nn
from .data import Dataset, stratified_indices

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd-momentum")
FINETUNE_MODES = ("ft-ll", "ft-al", "rt-al")
ATTACK_KINDS = ("ft-ll", "ft-al", "rt-al", "prune", "knockoff", "jba", "adapt-b", "adapt-w", "adv-train", "vtl")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    rng_seed: int = 0
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    init_scheme: str = "he-uniform"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.init_scheme != "he-uniform":
            raise ValueError("only he-uniform initialization is supported")


@dataclass(frozen=True)
class AttackSpec:
    """A derivation recipe.  Only the fields relevant to ``kind`` are used."""

    kind: str
    ratio: float = 0.2               # prune
    finetune_fraction: float = 0.2   # share of the victim's training data the attacker holds
    rounds: int = 4                  # jba
    step: float = 0.1                # jba lambda
    epsilon: float = 0.1             # adv-train
    steps: int = 10                  # adv-train
    new_class_count: int = 5         # vtl
    disagreement_weight: float = 1.0  # adapt-b / adapt-w

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("prune ratio must lie in [0, 1)")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ValueError("finetune_fraction must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("jba rounds must be >= 1")
        if self.step < 0:
            raise ValueError("jba step must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("adv-train epsilon must be > 0")
        if self.steps < 1:
            raise ValueError("adv-train steps must be >= 1")
        if self.new_class_count < 2:
            raise ValueError("vtl new_class_count must be >= 2")


# --------------------------------------------------------------------------
# optimisation core


def _onehot(labels: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((len(labels), C))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def target_loss_grads(model: nn.Model, x: np.ndarray, targets: np.ndarray):
    """Mean of ``-sum_c T_c log p_c`` over the batch and its parameter gradients.

    Rows of ``targets`` need not be distributions: a row ``onehot(a) - onehot(b)``
    rewards class ``a`` and penalises class ``b``.  The gradient with respect to
    the logits is ``rowsum(T) * p - T``.
    """
    ps = nn.run(model, x)
    lp = nn.log_softmax(ps.logits)
    n = len(x)
    loss = float(-(targets * lp).sum() / n)
    g = (targets.sum(axis=1, keepdims=True) * ps.probs - targets) / n
    _, grads = ps.backward({model.depth - 1: g})
    return loss, grads


def _fit(model: nn.Model, n_samples: int, batch_grads: Callable, config: TrainConfig,
         trainable: set[int] | None = None, on_epoch: Callable | None = None, tag: str = "train") -> None:
    """Mini-batch SGD on ``model`` in place.

    ``batch_grads(idx, epoch)`` returns ``(loss, per-layer grads)`` for the
    samples ``idx``.  ``trainable`` holds 1-based layer indices (default all).
    """
    if n_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng([config.rng_seed, 0xB47])
    mu = config.momentum if config.optimizer == "sgd-momentum" else 0.0
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in model.layers]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_grads(idx, epoch)
            if not np.isfinite(loss):
                raise TrainingError(f"{tag}: loss diverged at epoch {epoch}")
            total += loss * len(idx)
            for n, layer in enumerate(model.layers, start=1):
                if trainable is not None and n not in trainable:
                    continue
                for k, g in grads[n - 1].items():
                    v = velocity[n - 1][k]
                    v *= mu
                    v -= config.learning_rate * g
                    layer.params[k] += v
        for layer in model.layers:
            for p in layer.params.values():
                if not np.all(np.isfinite(p)):
                    raise TrainingError(f"{tag}: parameters diverged at epoch {epoch}")
        log.debug("%s epoch %d loss %.5f", tag, epoch, total / n_samples)
        if on_epoch is not None:
            on_epoch(epoch, model)


def _hard_fit(model, ds: Dataset, config, trainable=None, on_epoch=None, tag="train"):
    C = model.class_count
    T_all = _onehot(ds.labels, C)
    _fit(model, len(ds), lambda idx, e: target_loss_grads(model, ds.inputs[idx], T_all[idx]),
         config, trainable, on_epoch, tag)


def _stamp(model: nn.Model, kind: str, parent: nn.Model | None, config: TrainConfig, params: dict | None = None,
           **extra) -> None:
    model.metadata = {
        "derivation_kind": kind,
        "parent_model_hash": nn.model_hash(parent) if parent is not None else "",
        "attack_params": json.dumps(params or {}, sort_keys=True),
        "rng_seed": str(config.rng_seed),
        "train_config": json.dumps(asdict(config), sort_keys=True),
    }
    model.metadata.update({k: str(v) for k, v in extra.items()})


def accuracy(model: nn.Model, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(nn.predict_label(model, ds.inputs) == ds.labels))


def agreement(a: nn.Model, b: nn.Model, inputs: np.ndarray) -> float:
    return float(np.mean(nn.predict_label(a, inputs) == nn.predict_label(b, inputs)))


# --------------------------------------------------------------------------
# training and finetuning


def train(config: TrainConfig, dataset: Dataset, architecture: Callable[..., nn.Model] | nn.Model | None = None,
          on_epoch: Callable | None = None) -> nn.Model:
    """Train a fresh model (he-uniform init from ``config.rng_seed``)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if architecture is None:
        model = nn.lenet_small(dataset.input_shape, dataset.class_count)
    elif isinstance(architecture, nn.Model):
        model = architecture.copy()
    else:
        model = architecture(dataset.input_shape, dataset.class_count)
    if model.class_count != dataset.class_count or model.input_shape != dataset.input_shape:
        raise ValueError("architecture does not match dataset shape/classes")
    model.init_params(np.random.default_rng([config.rng_seed, 0x1A1]))
    _hard_fit(model, dataset, config, on_epoch=on_epoch, tag="train")
    _stamp(model, "train", None, config, {"dataset": dataset.name, "samples": len(dataset)})
    return model


def _reinit_layer(model: nn.Model, layer: int, seed: int) -> None:
    model.layers[layer - 1].init_params(np.random.default_rng([seed, 0x2E1, layer]))


def finetune(model: nn.Model, dataset: Dataset, mode: str, config: TrainConfig) -> nn.Model:
    """FT-LL (last layer only), FT-AL (all layers) or RT-AL (re-init last layer, then all)."""
    if mode not in FINETUNE_MODES:
        raise ValueError(f"mode must be one of {FINETUNE_MODES}")
    if dataset.class_count != model.class_count:
        raise ValueError("dataset label space differs from the model's")
    out = model.copy()
    last = out.final_param_layer
    if mode == "rt-al":
        _reinit_layer(out, last, config.rng_seed)
    trainable = {last} if mode == "ft-ll" else None
    if config.epochs:
        _hard_fit(out, dataset, config, trainable=trainable, tag=mode)
    _stamp(out, mode, model, config, {"samples": len(dataset)})
    return out


def _weight_slots(model: nn.Model) -> list[tuple[int, str]]:
    return [(n, "W") for n, layer in enumerate(model.layers) if "W" in layer.params]


def prune_weights(model: nn.Model, ratio: float) -> tuple[nn.Model, int]:
    """Zero the ``floor(ratio * P)`` smallest-magnitude weights, globally.

    ``P`` counts dense/conv weights only (biases are exempt).  Ties in ``|w|``
    go to the lower flat parameter index (layer order, then row-major).
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    out = model.copy()
    slots = _weight_slots(out)
    flat = np.concatenate([np.abs(out.layers[n].params[k]).reshape(-1) for n, k in slots])
    count = int(np.floor(ratio * flat.size))
    if count:
        order = np.lexsort((np.arange(flat.size), flat))[:count]
        mask = np.ones(flat.size, bool)
        mask[order] = False
        offset = 0
        for n, k in slots:
            p = out.layers[n].params[k]
            p *= mask[offset:offset + p.size].reshape(p.shape)
            offset += p.size
    return out, count


def prune(model: nn.Model, ratio: float, finetune_config: TrainConfig | None, dataset: Dataset | None) -> nn.Model:
    """Global magnitude pruning followed by all-layer finetuning.

    Pruned weights are free to regrow during finetuning (no mask is kept).
    Pass ``finetune_config=None`` (or zero epochs) to skip finetuning.
    """
    out, count = prune_weights(model, ratio)
    config = finetune_config or TrainConfig(epochs=0)
    if config.epochs:
        if dataset is None:
            raise ValueError("finetuning requires a dataset")
        _hard_fit(out, dataset, config, tag="prune")
    _stamp(out, "prune", model, config, {"ratio": ratio}, pruned_weights=count)
    return out


# --------------------------------------------------------------------------
# extraction


def extract_knockoff(victim: nn.Model, auxiliary: Dataset, config: TrainConfig,
                     architecture: Callable[..., nn.Model] | None = None,
                     on_epoch: Callable | None = None) -> nn.Model:
    """Train a surrogate from scratch on the victim's probability vectors.

    The victim is used only through :func:`nn.forward`.  Every epoch re-queries
    the victim for each auxiliary sample, so ``query_count == |aux| * epochs``.
    """
    if auxiliary.input_shape != victim.input_shape:
        raise ValueError("auxiliary inputs do not match the victim input shape")
    arch = architecture or (lambda shape, C: _same_architecture(victim))
    student = arch(victim.input_shape, victim.class_count)
    student.init_params(np.random.default_rng([config.rng_seed, 0x1A1]))
    queries = 0

    def batch(idx, epoch):
        nonlocal queries
        x = auxiliary.inputs[idx]
        soft = nn.forward(victim, x)
        queries += len(idx)
        return target_loss_grads(student, x, soft)

    _fit(student, len(auxiliary), batch, config, on_epoch=on_epoch, tag="knockoff")
    _stamp(student, "knockoff", victim, config, {"auxiliary": auxiliary.name, "samples": len(auxiliary)},
           query_count=queries)
    return student


def _same_architecture(model: nn.Model) -> nn.Model:
    fresh = model.copy()
    for layer in fresh.layers:
        for p in layer.params.values():
            p[...] = 0.0
    fresh.metadata = {}
    return fresh


def jacobian_augment(victim: nn.Model, pool: np.ndarray, step: float) -> np.ndarray:
    """``x + step * sign(d p_y(x) / dx)`` for each pool member, y the victim's label, clipped to [0, 1]."""
    labels = nn.predict_label(victim, pool)
    g = nn.grad_input(victim, pool, nn.OutputComponent(labels))
    return np.clip(pool + step * np.sign(g), 0.0, 1.0)


def extract_jba(victim: nn.Model, seeds: Dataset, rounds: int, step: float, config: TrainConfig,
                on_round: Callable | None = None) -> nn.Model:
    """Jacobian-based augmentation: each round doubles the pool, relabels it
    with the victim and retrains the surrogate from its initial weights.

    Uses the victim's input gradients to build the augmentation.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    pool = seeds.inputs.copy()
    student = None
    for r in range(1, rounds + 1):
        pool = np.concatenate([pool, jacobian_augment(victim, pool, step)])
        labels = nn.predict_label(victim, pool)
        ds = Dataset(pool, labels, f"jba-round{r}", victim.class_count)
        student = _same_architecture(victim)
        student.init_params(np.random.default_rng([config.rng_seed, 0x1A1]))
        _hard_fit(student, ds, config, tag=f"jba round {r}")
        if on_round is not None:
            on_round(r, student, pool)
    _stamp(student, "jba", victim, config, {"rounds": rounds, "step": step, "seeds": len(seeds)},
           pool_size=len(pool), query_count=len(pool))
    return student


# --------------------------------------------------------------------------
# adaptive attacks


def adapt_attack(model: nn.Model, kind: str, exposed_suite, clean: Dataset, config: TrainConfig,
                 victim: nn.Model | None = None, weight: float = 1.0) -> nn.Model:
    """Finetune a stolen copy so that it looks different on an exposed suite.

    ``adapt-b`` (black-box suite): trains on clean data plus the suite's cases
    with their ground-truth labels, and subtracts ``weight`` times the
    cross-entropy towards the victim's label on each suite case.  That term
    is unbounded below, so it is capped at ``ln C``: it stops acting once the
    victim's label has dropped to probability ``1/C``.

    ``adapt-w`` (white-box suite): suite cases are labelled by the victim and
    ``weight`` times the L2 distance between the model's and the victim's
    outputs at the suite's layer is subtracted, capped at the norm of the
    victim's own output there.  ``victim`` defaults to ``model``.
    """
    expected = {"adapt-b": "blackbox", "adapt-w": "whitebox"}
    if kind not in expected:
        raise ValueError("kind must be adapt-b or adapt-w")
    if exposed_suite.mode != expected[kind]:
        raise ValueError(f"{kind} needs a {expected[kind]} suite, got {exposed_suite.mode}")
    if len(exposed_suite) == 0:
        raise ValueError("exposed suite is empty")
    victim = victim or model
    out = model.copy()
    C = out.class_count
    cases = exposed_suite.cases
    n_clean = len(clean)
    victim_labels = nn.predict_label(victim, cases)
    suite_labels = exposed_suite.labels if kind == "adapt-b" else victim_labels
    x_all = np.concatenate([clean.inputs, cases])
    T_all = np.concatenate([_onehot(clean.labels, C), _onehot(suite_labels, C)])
    is_suite = np.r_[np.zeros(n_clean, bool), np.ones(len(cases), bool)]
    layer = exposed_suite.layer if kind == "adapt-w" else None
    if kind == "adapt-w":
        victim_act = nn.run(victim, cases, upto=layer).outputs[layer]
        victim_norm = np.sqrt((victim_act.reshape(len(cases), -1) ** 2).sum(1))

    def step(idx, epoch):
        ps = nn.run(out, x_all[idx])
        n = len(idx)
        lp = nn.log_softmax(ps.logits)
        T = T_all[idx]
        loss = -(T * lp).sum() / n
        g_logits = (T.sum(1, keepdims=True) * ps.probs - T) / n
        inject = {}
        sel = np.flatnonzero(is_suite[idx])
        if len(sel) and kind == "adapt-b":
            vl = victim_labels[idx[sel] - n_clean]
            ce = -lp[sel, vl]
            live = ce < np.log(C)
            rows = sel[live]
            loss -= weight * np.minimum(ce, np.log(C)).sum() / n
            # d(-CE)/dlogits = onehot(vl) - p
            g_logits[rows] -= weight * (ps.probs[rows] - _onehot(vl[live], C)) / n
        elif len(sel):
            cap = victim_norm[idx[sel] - n_clean]
            diff = ps.outputs[layer][sel] - victim_act[idx[sel] - n_clean]
            dist = np.sqrt((diff.reshape(len(diff), -1) ** 2).sum(1))
            loss -= weight * np.minimum(dist, cap).sum() / n
            live = (dist > 0) & (dist < cap)
            g = np.zeros_like(ps.outputs[layer])
            scale = np.where(live, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
            g[sel] = -weight * diff * scale.reshape((-1,) + (1,) * (diff.ndim - 1)) / n
            inject[layer] = g
        inject[out.depth - 1] = g_logits
        _, grads = ps.backward(inject)
        return float(loss), grads

    if config.epochs:
        _fit(out, len(x_all), step, config, tag=kind)
    _stamp(out, kind, model, config, {"suite_cases": len(cases), "weight": weight})
    return out


def pgd_batch(model: nn.Model, x: np.ndarray, y: np.ndarray, epsilon: float, steps: int,
              step_size: float | None = None) -> np.ndarray:
    """L-inf PGD without random start, projected onto the eps-ball and the [0, 1] box."""
    alpha = 2.5 * epsilon / steps if step_size is None else step_size
    adv = x.copy()
    for _ in range(steps):
        g = nn.grad_input(model, adv, nn.CrossEntropy(y))
        adv = adv + alpha * np.sign(g)
        adv = np.clip(np.clip(adv, x - epsilon, x + epsilon), 0.0, 1.0)
    return adv


def adv_train(model: nn.Model, dataset: Dataset, epsilon: float, steps: int, config: TrainConfig) -> nn.Model:
    """Finetune on PGD adversarial versions of every batch (Madry-style)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    out = model.copy()
    C = out.class_count
    T_all = _onehot(dataset.labels, C)

    def step(idx, e):
        x = dataset.inputs[idx]
        adv = pgd_batch(out, x, dataset.labels[idx], epsilon, steps)
        return target_loss_grads(out, adv, T_all[idx])

    if config.epochs:
        _fit(out, len(dataset), step, config, tag="adv-train")
    _stamp(out, "adv-train", model, config, {"epsilon": epsilon, "steps": steps})
    return out


def vtl_transfer(model: nn.Model, new_dataset: Dataset, new_class_count: int, config: TrainConfig) -> nn.Model:
    """Swap the final dense layer for a fresh ``new_class_count``-way head and finetune everything."""
    if new_class_count < 2:
        raise ValueError("new_class_count must be >= 2")
    if new_dataset.class_count != new_class_count:
        raise ValueError("new dataset class count differs from new_class_count")
    last = model.final_param_layer
    head = model.layers[last - 1]
    if not isinstance(head, nn.Dense):
        raise ValueError("transfer needs a dense final layer")
    layers = [layer for layer in model.copy().layers]
    layers[last - 1] = nn.Dense(head.n_in, new_class_count)
    out = nn.Model(layers, model.input_shape)
    _reinit_layer(out, last, config.rng_seed)
    if config.epochs:
        _hard_fit(out, new_dataset, config, tag="vtl")
    _stamp(out, "vtl", model, config, {"new_class_count": new_class_count, "dataset": new_dataset.name})
    return out


def finetune_slice(dataset: Dataset, fraction: float, rng_seed: int) -> Dataset:
    """The attacker's data: a stratified ``fraction`` of the victim's training set."""
    if fraction >= 1.0:
        return dataset
    idx = stratified_indices(dataset.labels, dataset.class_count, fraction, rng_seed)
    return dataset.subset(idx, f"{dataset.name}/ft{fraction:g}")
