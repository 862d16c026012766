"""Distances between a victim and a suspect model on a test suite.

Black-box metrics use only output probabilities: ``RobD`` (gap in accuracy
on an adversarial suite) and ``JSD`` (mean Jensen-Shannon divergence).
White-box metrics read one hidden layer: ``NOD`` / ``NAD`` look at each
suite case's target neuron, ``LOD`` / ``LAD`` at the whole layer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import jsonio, nn
from .testgen import TestSuite

BLACKBOX_METRICS = ("RobD", "JSD")
WHITEBOX_METRICS = ("NOD", "NAD", "LOD", "LAD")
ALL_METRICS = BLACKBOX_METRICS + WHITEBOX_METRICS
DEFAULT_BETA = 0.5


class NotApplicable(ValueError):
    """The metric cannot compare these two models (e.g. different label spaces)."""


class ProvenanceError(ValueError):
    """A suite was not generated from the victim it is being used with."""


@dataclass
class MetricReport:
    metric: str
    value: float
    suite_hash: str
    case_count: int
    layer: int | None = None

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": float(self.value), "suite_hash": self.suite_hash,
                "case_count": self.case_count, "layer": self.layer}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["metric"], float(d["value"]), d["suite_hash"], int(d["case_count"]), d.get("layer"))


def _nonempty(suite: TestSuite) -> None:
    if len(suite) == 0:
        raise ValueError("test suite is empty")


def _same_labels(victim: nn.Model, suspect: nn.Model) -> None:
    if victim.class_count != suspect.class_count:
        raise NotApplicable(f"class counts differ ({victim.class_count} vs {suspect.class_count})")


# --------------------------------------------------------------------------
# black-box


def rob(model: nn.Model, suite: TestSuite) -> float:
    """Share of suite cases the model assigns their ground-truth label."""
    if suite.mode != "blackbox":
        raise ValueError("robustness needs a black-box suite with labels")
    _nonempty(suite)
    return float(np.mean(nn.predict_label(model, suite.cases) == suite.labels))


def robd(victim: nn.Model, suspect: nn.Model, suite: TestSuite) -> float:
    _same_labels(victim, suspect)
    return abs(rob(suspect, suite) - rob(victim, suite))


def _kl_to(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    pos = p > 0
    ratio = np.where(pos, p, 1.0) / np.where(pos, m, 1.0)
    return np.sum(np.where(pos, p * np.log(ratio), 0.0), axis=1)


def jsd_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Jensen-Shannon divergence (natural log) between matching rows of two probability arrays."""
    m = (p + q) / 2.0
    return 0.5 * (_kl_to(p, m) + _kl_to(q, m))


def jsd(victim: nn.Model, suspect: nn.Model, suite: TestSuite) -> float:
    _same_labels(victim, suspect)
    _nonempty(suite)
    return float(np.mean(jsd_rows(nn.forward(victim, suite.cases), nn.forward(suspect, suite.cases))))


# --------------------------------------------------------------------------
# white-box


def _layer_of(suite: TestSuite, layer: int | None) -> int:
    if layer is None:
        if suite.layer is None:
            raise ValueError("no layer given and the suite has none")
        return suite.layer
    return int(layer)


def layer_outputs(victim: nn.Model, suspect: nn.Model, cases: np.ndarray, layer: int):
    """Flattened outputs of ``layer`` for both models, shape (cases, neurons)."""
    victim._check_layer(layer)
    if layer > suspect.depth or suspect.shapes[:layer + 1] != victim.shapes[:layer + 1] or \
            [l.kind for l in suspect.layers[:layer]] != [l.kind for l in victim.layers[:layer]]:
        raise NotApplicable(f"architectures differ at or below layer {layer}")
    a = nn.run(victim, cases, upto=layer).outputs[layer]
    b = nn.run(suspect, cases, upto=layer).outputs[layer]
    return a.reshape(len(a), -1), b.reshape(len(b), -1)


def _targets(suite: TestSuite, layer: int) -> np.ndarray:
    if suite.mode != "whitebox":
        raise ValueError("neuron-level metrics need a white-box suite")
    if layer != suite.layer:
        raise ValueError(f"suite targets layer {suite.layer}, not {layer}")
    return suite.neurons


def activation_thresholds(suite: TestSuite, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Per-neuron activation threshold ``beta * (victim's largest training output)``."""
    if "neuron_max" not in suite.params:
        raise ValueError("suite does not record the victim's neuron maxima")
    return beta * np.asarray(suite.params["neuron_max"], dtype=np.float64)


def nod(victim: nn.Model, suspect: nn.Model, suite: TestSuite, layer: int | None = None,
        mode: str = "target") -> float:
    """Mean absolute neuron-output difference.

    ``mode="target"`` compares each case only at the neuron it was generated
    for; ``mode="all"`` averages over every neuron of the layer for every case.
    """
    layer = _layer_of(suite, layer)
    _nonempty(suite)
    if mode == "target":
        neurons = _targets(suite, layer)
        a, b = layer_outputs(victim, suspect, suite.cases, layer)
        rows = np.arange(len(suite))
        return float(np.mean(np.abs(a[rows, neurons] - b[rows, neurons])))
    if mode == "all":
        a, b = layer_outputs(victim, suspect, suite.cases, layer)
        return float(np.mean(np.abs(a - b)))
    raise ValueError("mode must be 'target' or 'all'")


def nad_per_neuron(victim: nn.Model, suspect: nn.Model, suite: TestSuite, layer: int | None = None,
                   beta: float = DEFAULT_BETA) -> np.ndarray:
    """For every neuron of the layer: share of suite cases on which the two
    models disagree about whether the neuron is active (output above threshold)."""
    layer = _layer_of(suite, layer)
    _nonempty(suite)
    if suite.layer is not None and layer != suite.layer:
        raise ValueError(f"suite targets layer {suite.layer}, not {layer}")
    theta = activation_thresholds(suite, beta)
    a, b = layer_outputs(victim, suspect, suite.cases, layer)
    return np.mean((a > theta) != (b > theta), axis=0)


def nad(victim: nn.Model, suspect: nn.Model, suite: TestSuite, layer: int | None = None,
        beta: float = DEFAULT_BETA) -> float:
    """Activation disagreement averaged over the suite's distinct target neurons."""
    layer = _layer_of(suite, layer)
    per = nad_per_neuron(victim, suspect, suite, layer, beta)
    return float(np.mean(per[np.unique(_targets(suite, layer))]))


def lod(victim: nn.Model, suspect: nn.Model, suite: TestSuite, layer: int | None = None) -> float:
    """Mean Euclidean distance between the two models' layer outputs."""
    layer = _layer_of(suite, layer)
    _nonempty(suite)
    a, b = layer_outputs(victim, suspect, suite.cases, layer)
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=1))))


def lad(victim: nn.Model, suspect: nn.Model, suite: TestSuite, layer: int | None = None,
        beta: float = DEFAULT_BETA) -> float:
    """Activation disagreement averaged over every neuron of the layer."""
    return float(np.mean(nad_per_neuron(victim, suspect, suite, layer, beta)))


# --------------------------------------------------------------------------
# batch measurement and export


def check_provenance(victim: nn.Model, *suites: TestSuite | None) -> str:
    vh = nn.model_hash(victim)
    for s in suites:
        if s is not None and s.victim_hash != vh:
            raise ProvenanceError(f"{s.mode} suite was generated from model {s.victim_hash[:12]}, "
                                  f"not the victim {vh[:12]}")
    return vh


def measure_all(victim: nn.Model, suspect: nn.Model, bb_suite: TestSuite | None, wb_suite: TestSuite | None,
                beta: float = DEFAULT_BETA) -> list[MetricReport]:
    """Every applicable metric.  Black-box metrics are left out when the
    label spaces differ; white-box ones when the architectures differ."""
    check_provenance(victim, bb_suite, wb_suite)
    reports = []
    if bb_suite is not None and victim.class_count == suspect.class_count:
        h = bb_suite.digest()
        reports.append(MetricReport("RobD", robd(victim, suspect, bb_suite), h, len(bb_suite)))
        reports.append(MetricReport("JSD", jsd(victim, suspect, bb_suite), h, len(bb_suite)))
    if wb_suite is not None:
        h = wb_suite.digest()
        layer = wb_suite.layer
        try:
            values = {
                "NOD": nod(victim, suspect, wb_suite),
                "NAD": nad(victim, suspect, wb_suite, beta=beta),
                "LOD": lod(victim, suspect, wb_suite),
                "LAD": lad(victim, suspect, wb_suite, beta=beta),
            }
        except NotApplicable:
            values = {}
        reports += [MetricReport(k, v, h, len(wb_suite), layer) for k, v in values.items()]
    return reports


def scores_to_dict(suspect_id: str, victim_hash: str, suspect_hash: str, reports: list[MetricReport]) -> dict:
    return {
        "format_version": jsonio.FORMAT_VERSION,
        "suspect_id": suspect_id,
        "victim_hash": victim_hash,
        "suspect_hash": suspect_hash,
        "reports": [r.to_dict() for r in reports],
    }


def scores_to_csv(rows: list[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["suspect_id", "metric", "value", "layer"])
    for sid, r in rows:
        w.writerow([sid, r.metric, format(float(r.value), ".17g"), "" if r.layer is None else r.layer])
    return buf.getvalue()
