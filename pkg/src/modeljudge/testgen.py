"""Seed selection and test-case generation.

Black-box suites are adversarial examples (FGSM, PGD, CW) crafted on the
victim from confidently classified seeds.  White-box suites push one
input per hidden neuron of a layer past a threshold derived from that
neuron's largest output on the training data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import jsonio, nn
from .data import Dataset
from .jsonio import FormatError

log = logging.getLogger(__name__)

BLACKBOX_GENERATORS = ("fgsm", "pgd", "cw")


@dataclass
class SeedSet:
    inputs: np.ndarray
    labels: np.ndarray
    scores: np.ndarray        # DeepGini certainty, sum of squared probabilities
    order: str                # "high" or "low"
    source: str
    indices: np.ndarray       # positions in the source dataset

    def __len__(self):
        return len(self.labels)


def certainty(probs: np.ndarray) -> np.ndarray:
    """DeepGini certainty score ``sum_i p_i^2``; 1/C for uniform, 1 for one-hot."""
    return np.sum(np.asarray(probs) ** 2, axis=-1)


def gini_select(model: nn.Model, dataset: Dataset, n: int, order: str = "high") -> SeedSet:
    """The ``n`` correctly classified samples of highest (or lowest) certainty.

    Ties in the score go to the lower dataset index.
    """
    if order not in ("high", "low"):
        raise ValueError("order must be 'high' or 'low'")
    if n < 1:
        raise ValueError("n must be >= 1")
    probs = np.concatenate([nn.forward(model, dataset.inputs[i:i + 1024]) for i in range(0, len(dataset), 1024)])
    scores = certainty(probs)
    correct = np.flatnonzero(probs.argmax(axis=1) == dataset.labels)
    if n > len(correct):
        raise ValueError(f"asked for {n} seeds but only {len(correct)} samples are classified correctly")
    key = -scores[correct] if order == "high" else scores[correct]
    chosen = correct[np.lexsort((correct, key))[:n]]
    return SeedSet(dataset.inputs[chosen].copy(), dataset.labels[chosen].copy(), scores[chosen],
                   order, dataset.name, chosen)


def seeds_to_dict(seeds: SeedSet, victim_hash: str) -> dict:
    return {
        "format_version": jsonio.FORMAT_VERSION,
        "victim_hash": victim_hash,
        "source": seeds.source,
        "order": seeds.order,
        "input_shape": list(seeds.inputs.shape[1:]),
        "seeds": [{"index": int(seeds.indices[i]), "label": int(seeds.labels[i]), "score": float(seeds.scores[i]),
                   "input": seeds.inputs[i].reshape(-1)} for i in range(len(seeds))],
    }


def seeds_from_dict(d: dict) -> tuple[SeedSet, str]:
    """The seed set and the hash of the model that selected it."""
    try:
        shape = tuple(d["input_shape"])
        rows = d["seeds"]
        inputs = np.array([r["input"] for r in rows], dtype=np.float64).reshape((len(rows),) + shape)
        seeds = SeedSet(inputs, np.array([r["label"] for r in rows], dtype=np.int64),
                        np.array([r["score"] for r in rows], dtype=np.float64), d["order"], d["source"],
                        np.array([r["index"] for r in rows], dtype=np.int64))
        return seeds, d["victim_hash"]
    except KeyError as exc:
        raise FormatError(f"seeds: missing field {exc}") from None
    except ValueError as exc:
        raise FormatError(f"seeds: {exc}") from None


# --------------------------------------------------------------------------
# suites


@dataclass
class TestSuite:
    """Generated cases plus the record of how they were produced.

    Black-box suites carry a ground-truth ``labels`` entry per case (and for
    CW an ``adversarial`` flag).  White-box suites carry the target
    ``layer`` and, per case, the ``neurons`` index and the ``activations``
    reached on the victim.
    """

    __test__ = False  # not a pytest class

    mode: str
    generator: str
    params: dict
    victim_hash: str
    cases: np.ndarray
    labels: np.ndarray | None = None
    adversarial: np.ndarray | None = None
    layer: int | None = None
    neurons: np.ndarray | None = None
    activations: np.ndarray | None = None
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("blackbox", "whitebox"):
            raise ValueError(f"unknown suite mode {self.mode!r}")
        self.cases = np.asarray(self.cases, dtype=np.float64)
        if self.mode == "blackbox" and self.labels is None:
            raise ValueError("black-box suites need labels")
        if self.mode == "whitebox" and (self.layer is None or self.neurons is None):
            raise ValueError("white-box suites need a layer and target neurons")

    def __len__(self):
        return len(self.cases)

    def subset(self, idx) -> "TestSuite":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else np.asarray(a)[idx]
        return TestSuite(self.mode, self.generator, dict(self.params), self.victim_hash, self.cases[idx],
                         pick(self.labels), pick(self.adversarial), self.layer, pick(self.neurons),
                         pick(self.activations), self.failures, dict(self.extra))

    def digest(self) -> str:
        return jsonio.digest(suite_to_dict(self))


def suite_to_dict(suite: TestSuite) -> dict:
    cases = []
    for i in range(len(suite)):
        case = {"input": suite.cases[i].reshape(-1)}
        if suite.mode == "blackbox":
            case["label"] = int(suite.labels[i])
            if suite.adversarial is not None:
                case["adversarial"] = bool(suite.adversarial[i])
        else:
            case["layer"] = int(suite.layer)
            case["neuron"] = int(suite.neurons[i])
            case["activation"] = float(suite.activations[i])
        cases.append(case)
    return {
        "format_version": jsonio.FORMAT_VERSION,
        "mode": suite.mode,
        "generator": suite.generator,
        "params": suite.params,
        "victim_hash": suite.victim_hash,
        "input_shape": list(suite.cases.shape[1:]) if len(suite) else suite.extra.get("input_shape", []),
        "layer": suite.layer,
        "failures": suite.failures,
        "extra": suite.extra,
        "cases": cases,
    }


def suite_from_dict(d: dict) -> TestSuite:
    try:
        mode = d["mode"]
        shape = tuple(d["input_shape"])
        cases = d["cases"]
        inputs = np.array([c["input"] for c in cases], dtype=np.float64).reshape((len(cases),) + shape)
        kw = {}
        if mode == "blackbox":
            kw["labels"] = np.array([c["label"] for c in cases], dtype=np.int64)
            if cases and "adversarial" in cases[0]:
                kw["adversarial"] = np.array([c["adversarial"] for c in cases], dtype=bool)
        else:
            kw["layer"] = int(d["layer"])
            kw["neurons"] = np.array([c["neuron"] for c in cases], dtype=np.int64)
            kw["activations"] = np.array([c["activation"] for c in cases], dtype=np.float64)
            if any(c["layer"] != kw["layer"] for c in cases):
                raise FormatError("suite.cases: every case must target the suite layer")
        return TestSuite(mode, d["generator"], d["params"], d["victim_hash"], inputs,
                         failures=int(d.get("failures", 0)), extra=dict(d.get("extra", {})), **kw)
    except KeyError as exc:
        raise FormatError(f"suite: missing field {exc}") from None
    except ValueError as exc:
        raise FormatError(f"suite: {exc}") from None


def save_suite(suite: TestSuite, path) -> str:
    return jsonio.write(path, suite_to_dict(suite))


def load_suite(path) -> TestSuite:
    return suite_from_dict(jsonio.read(path))


def _seed_record(seeds: SeedSet) -> dict:
    return {"source": seeds.source, "order": seeds.order, "indices": seeds.indices}


# --------------------------------------------------------------------------
# black-box generators


def gen_fgsm(model: nn.Model, seeds: SeedSet, epsilon: float) -> TestSuite:
    """One signed-gradient step of size ``epsilon`` on the cross-entropy, clipped to [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = seeds.inputs
    g = nn.grad_input(model, x, nn.CrossEntropy(seeds.labels))
    adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0)
    return TestSuite("blackbox", "fgsm", {"epsilon": float(epsilon), "seeds": _seed_record(seeds)},
                     nn.model_hash(model), adv, labels=seeds.labels.copy())


def gen_pgd(model: nn.Model, seeds: SeedSet, epsilon: float = 0.1, steps: int = 10,
            step_size: float | None = None) -> TestSuite:
    """Iterated signed-gradient steps, each projected back onto the
    ``epsilon`` L-inf ball around the seed and the [0, 1] box.  No random start.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    alpha = 2.5 * epsilon / steps if step_size is None else float(step_size)
    x = seeds.inputs
    adv = x.copy()
    for _ in range(steps):
        g = nn.grad_input(model, adv, nn.CrossEntropy(seeds.labels))
        adv = np.clip(np.clip(adv + alpha * np.sign(g), x - epsilon, x + epsilon), 0.0, 1.0)
    params = {"epsilon": float(epsilon), "steps": int(steps), "step_size": alpha, "seeds": _seed_record(seeds)}
    return TestSuite("blackbox", "pgd", params, nn.model_hash(model), adv, labels=seeds.labels.copy())


def _margin_grad(model: nn.Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Input gradient of ``min(max_{j != y} z_j - z_y, 0)`` (z the logits): zero once misclassified."""
    n = len(x)
    rows = np.arange(n)
    ps = nn.run(model, x)
    z = ps.logits
    others = z.copy()
    others[rows, y] = -np.inf
    runner_up = others.argmax(axis=1)
    live = (z[rows, y] - z[rows, runner_up] >= 0).astype(np.float64)
    g = np.zeros_like(z)
    g[rows, runner_up] = live
    g[rows, y] -= live
    gx, _ = ps.backward({model.depth - 1: g}, need_params=False, need_input=True)
    return gx


def gen_cw(model: nn.Model, seeds: SeedSet, c: float = 5.0, iters: int = 1000, lr: float = 0.01,
           loss: str = "margin") -> TestSuite:
    """Gradient descent on ``||x' - x||^2 - c * loss(x', y)`` inside the [0, 1] box.

    ``loss="ce"`` uses the cross-entropy, which barely moves high-certainty
    seeds because its gradient vanishes there.  ``loss="margin"`` (default)
    uses the logit margin ``min(max_{j != y} z_j - z_y, 0)``, whose gradient
    keeps its scale until the label flips.

    Each case is the misclassifying iterate closest to its seed; seeds never
    misclassified return the last iterate with ``adversarial`` False.
    """
    if not c > 0:
        raise ValueError("c must be > 0")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if loss not in ("margin", "ce"):
        raise ValueError("loss must be 'margin' or 'ce'")
    x = seeds.inputs
    y = seeds.labels
    n = len(x)
    adv = x.copy()
    best = x.copy()
    best_dist = np.full(n, np.inf)
    axes = tuple(range(1, x.ndim))
    for _ in range(iters):
        if loss == "ce":
            g_loss = nn.grad_input(model, adv, nn.CrossEntropy(y))
        else:
            g_loss = _margin_grad(model, adv, y)
        adv = np.clip(adv - lr * (2.0 * (adv - x) - c * g_loss), 0.0, 1.0)
        dist = np.sum((adv - x) ** 2, axis=axes)
        better = (nn.predict_label(model, adv) != y) & (dist < best_dist)
        best[better] = adv[better]
        best_dist[better] = dist[better]
    found = np.isfinite(best_dist)
    cases = np.where(found.reshape((-1,) + (1,) * (x.ndim - 1)), best, adv)
    params = {"c": float(c), "iters": int(iters), "lr": float(lr), "loss": loss, "seeds": _seed_record(seeds)}
    return TestSuite("blackbox", "cw", params, nn.model_hash(model), cases, labels=y.copy(), adversarial=found)


# --------------------------------------------------------------------------
# white-box generation


@dataclass
class NeuronThresholds:
    layer: int
    m: float
    maxima: np.ndarray      # largest training output per neuron (flattened layer)
    model_hash: str

    @property
    def k(self) -> np.ndarray:
        return self.m * self.maxima


def layer_maxima(model: nn.Model, inputs: np.ndarray, layer: int, batch_size: int = 512) -> np.ndarray:
    """Per-neuron maximum output of ``layer`` over ``inputs``, computed in batches."""
    if len(inputs) == 0:
        raise ValueError("no inputs")
    out = np.full(model.neuron_count(layer), -np.inf)
    for i in range(0, len(inputs), batch_size):
        h = nn.run(model, inputs[i:i + batch_size], upto=layer).outputs[layer]
        out = np.maximum(out, h.reshape(len(h), -1).max(axis=0))
    return out


def neuron_thresholds(model: nn.Model, train_data: Dataset | np.ndarray, layer: int, m: float = 3.0) -> NeuronThresholds:
    """Threshold ``k = m * (largest output seen on the training inputs)`` for each neuron of ``layer``."""
    if layer not in model.hidden_layers():
        raise ValueError(f"layer {layer} is not a hidden layer (hidden: {model.hidden_layers()})")
    inputs = train_data.inputs if isinstance(train_data, Dataset) else np.asarray(train_data, dtype=np.float64)
    return NeuronThresholds(layer, float(m), layer_maxima(model, inputs, layer), nn.model_hash(model))


def gen_whitebox(model: nn.Model, seeds: SeedSet, layer: int, thresholds: NeuronThresholds,
                 lr: float = 0.1, iters: int = 1000, neurons=None) -> TestSuite:
    """One search per neuron of ``layer``: gradient ascent on the neuron's
    output from a seed (neuron ``i`` uses seed ``i mod len(seeds)``), with the
    input clipped to [0, 1] after each step, until the output exceeds its
    threshold.  Successful inputs become cases; failures are only counted.

    All neurons are searched together as one batch.
    """
    if thresholds.layer != layer:
        raise ValueError(f"thresholds were computed for layer {thresholds.layer}, not {layer}")
    if thresholds.model_hash != nn.model_hash(model):
        raise ValueError("thresholds were computed on a different model")
    if len(seeds) == 0:
        raise ValueError("no seeds")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    size = model.neuron_count(layer)
    targets = np.arange(size) if neurons is None else np.asarray(neurons, dtype=np.int64)
    k = thresholds.k
    seed_of = targets % len(seeds)
    x = seeds.inputs[seed_of].copy()
    active = np.arange(len(targets))
    done_x, done_n, done_a = [], [], []
    for it in range(iters + 1):
        if not len(active):
            break
        ps = nn.run(model, x[active], upto=layer)
        phi = ps.outputs[layer].reshape(len(active), -1)[np.arange(len(active)), targets[active]]
        keep = np.ones(len(active), bool)
        if it > 0:
            hit = phi > k[targets[active]]
            done_x.append(x[active[hit]])
            done_n.append(targets[active[hit]])
            done_a.append(phi[hit])
            keep = ~hit
            if it == iters:
                break
        g = np.zeros((len(active), size))
        g[np.arange(len(active)), targets[active]] = 1.0
        gx, _ = ps.backward({layer: g.reshape(ps.outputs[layer].shape)}, need_params=False, need_input=True)
        active = active[keep]
        x[active] = np.clip(x[active] + lr * gx[keep], 0.0, 1.0)
    if done_n:
        order = np.argsort(np.concatenate(done_n), kind="stable")
        cases = np.concatenate(done_x)[order]
        hit_neurons = np.concatenate(done_n)[order]
        acts = np.concatenate(done_a)[order]
    else:
        cases = np.zeros((0,) + model.input_shape)
        hit_neurons = np.zeros(0, np.int64)
        acts = np.zeros(0)
    failures = len(targets) - len(hit_neurons)
    log.info("white-box layer %d: %d/%d neurons reached", layer, len(hit_neurons), len(targets))
    params = {"m": thresholds.m, "lr": float(lr), "iters": int(iters), "seeds": _seed_record(seeds),
              "neuron_max": thresholds.maxima}
    return TestSuite("whitebox", "alg2", params, nn.model_hash(model), cases, layer=layer,
                     neurons=hit_neurons, activations=acts, failures=failures,
                     extra={"input_shape": list(model.input_shape)})
