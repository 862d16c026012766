import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modeljudge import forge, metrics, nn, testgen
from modeljudge.data import Dataset

import oracles
from conftest import random_model


def sign_model(flip=False):
    """Predicts class 0 when x > 0 (class 1 when ``flip``); ties at x == 0 go to class 0."""
    w = np.array([[1.0], [-1.0]]) * (-1 if flip else 1)
    return nn.Model([nn.Dense(1, 2, W=w, b=np.zeros(2)), nn.Softmax()], (1,))


def bb_suite(model, cases, labels):
    return testgen.TestSuite("blackbox", "pgd", {}, nn.model_hash(model), np.asarray(cases, float),
                             labels=np.asarray(labels))


# ---------------------------------------------------------------- black-box


def test_rob_extremes():
    m = sign_model()
    assert metrics.rob(m, bb_suite(m, [[1.0], [2.0]], [1, 1])) == 0.0
    assert metrics.rob(m, bb_suite(m, [[1.0], [-2.0]], [0, 1])) == 1.0


def test_rob_recount(tiny, tiny_suites):
    model, _, _ = tiny
    bb, _ = tiny_suites
    hits = sum(int(nn.predict_label(model, x) == y) for x, y in zip(bb.cases, bb.labels))
    assert metrics.rob(model, bb) == hits / len(bb)


def test_rob_empty_suite():
    m = sign_model()
    with pytest.raises(ValueError):
        metrics.rob(m, bb_suite(m, np.zeros((0, 1)), []))


def test_robd_arithmetic():
    victim, suspect = sign_model(), sign_model(flip=True)
    suite = bb_suite(victim, [[1.0]] * 9 + [[0.0]], [1] * 10)
    assert metrics.rob(victim, suite) == 0.0
    assert metrics.rob(suspect, suite) == pytest.approx(0.9)
    assert metrics.robd(victim, suspect, suite) == pytest.approx(0.9)
    assert metrics.robd(victim, victim, suite) == 0.0


def test_class_mismatch_not_applicable():
    a = nn.Model([nn.Dense(1, 2), nn.Softmax()], (1,))
    b = nn.Model([nn.Dense(1, 3), nn.Softmax()], (1,))
    suite = bb_suite(a, [[0.5]], [0])
    for f in (metrics.robd, metrics.jsd):
        with pytest.raises(metrics.NotApplicable):
            f(a, b, suite)


def test_jsd_disjoint_one_hot_is_ln2():
    assert metrics.jsd_rows(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0] == pytest.approx(math.log(2), abs=1e-15)
    probe = nn.Model([nn.Softmax()], (2,))
    flipped = nn.Model([nn.Dense(2, 2, W=np.array([[0.0, 1.0], [1.0, 0.0]])), nn.Softmax()], (2,))
    suite = bb_suite(probe, [[1000.0, 0.0]], [0])
    assert metrics.jsd(probe, flipped, suite) == pytest.approx(math.log(2), abs=1e-12)


def test_jsd_closed_form_pair():
    p, q = np.array([[0.7, 0.3]]), np.array([[0.4, 0.6]])
    m = [0.55, 0.45]
    expected = 0.5 * (0.7 * math.log(0.7 / m[0]) + 0.3 * math.log(0.3 / m[1])) + \
        0.5 * (0.4 * math.log(0.4 / m[0]) + 0.6 * math.log(0.6 / m[1]))
    assert metrics.jsd_rows(p, q)[0] == pytest.approx(expected, abs=1e-15)


def test_jsd_matches_loop(tiny, tiny_suites):
    model, train, _ = tiny
    bb, _ = tiny_suites
    other = forge.finetune(model, train, "ft-al", forge.TrainConfig(epochs=1, learning_rate=0.05))
    assert abs(metrics.jsd(model, other, bb) - oracles.brute_jsd(model, other, bb.cases)) < 1e-12


# ---------------------------------------------------------------- white-box


def linear_pair(delta):
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    victim = nn.Model([nn.Dense(2, 3, W=W, b=b), nn.ReLU(), nn.Dense(3, 2), nn.Softmax()], (2,))
    suspect = victim.copy()
    suspect.layers[0].params["b"][1] += delta
    return victim, suspect


def test_nod_bias_shift():
    victim, suspect = linear_pair(0.375)
    suite = oracles.toy_suite(victim, 1, [[0.1, 0.2], [0.5, -0.3]], [1, 1], [1.0, 1.0, 1.0])
    assert metrics.nod(victim, suspect, suite) == pytest.approx(0.375, abs=1e-15)
    suite = oracles.toy_suite(victim, 1, [[0.1, 0.2]], [0], [1.0, 1.0, 1.0])
    assert metrics.nod(victim, suspect, suite) == 0.0


def test_nad_single_flip():
    theta = 0.5 * 4.0
    victim = nn.Model([nn.Dense(1, 1, W=np.array([[1.0]]), b=np.zeros(1)), nn.Dense(1, 2), nn.Softmax()], (1,))
    suspect = victim.copy()
    suspect.layers[0].params["b"][0] = -2.0
    suite = oracles.toy_suite(victim, 1, [[theta + 1]], [0], [4.0])
    assert metrics.nad(victim, suspect, suite) == 1.0
    assert metrics.lad(victim, suspect, suite) == 1.0


def test_single_neuron_reductions():
    victim = nn.Model([nn.Dense(2, 1, W=np.array([[0.3, -0.8]]), b=np.array([0.1])), nn.ReLU(),
                       nn.Dense(1, 2), nn.Softmax()], (2,))
    suspect = victim.copy()
    suspect.layers[0].params["W"] *= 1.7
    suite = oracles.toy_suite(victim, 2, [[0.9, -0.2], [0.4, 0.1], [-0.5, -0.9]], [0, 0, 0], [0.5])
    assert metrics.lod(victim, suspect, suite) == pytest.approx(metrics.nod(victim, suspect, suite), abs=1e-15)
    assert metrics.lad(victim, suspect, suite) == metrics.nad(victim, suspect, suite)


def test_nad_bit_table_four_neurons():
    # outputs chosen directly as the layer-1 values (identity dense layer)
    victim = nn.Model([nn.Dense(4, 4, W=np.eye(4), b=np.zeros(4)), nn.Dense(4, 2), nn.Softmax()], (4,))
    shift = np.array([0.0, -1.0, 1.0, 0.0])
    suspect = victim.copy()
    suspect.layers[0].params["b"][:] = shift
    neuron_max = np.array([2.0, 2.0, 2.0, 2.0])      # theta = 1 with beta 0.5
    for bits in range(16):
        x = np.array([1.5 if bits >> i & 1 else 0.5 for i in range(4)])
        suite = oracles.toy_suite(victim, 1, [x], [0], neuron_max)
        per = metrics.nad_per_neuron(victim, suspect, suite)
        expected = [float((x[i] > 1) != (x[i] + shift[i] > 1)) for i in range(4)]
        assert per.tolist() == expected
        assert metrics.lad(victim, suspect, suite) == sum(expected) / 4


def test_nod_all_mode(tiny, tiny_suites):
    model, train, _ = tiny
    _, wb = tiny_suites
    other = forge.finetune(model, train, "ft-al", forge.TrainConfig(epochs=1, learning_rate=0.05))
    a = nn.run(model, wb.cases, upto=wb.layer).outputs[wb.layer].reshape(len(wb), -1)
    b = nn.run(other, wb.cases, upto=wb.layer).outputs[wb.layer].reshape(len(wb), -1)
    assert metrics.nod(model, other, wb, mode="all") == pytest.approx(np.abs(a - b).mean(), abs=1e-15)
    with pytest.raises(ValueError):
        metrics.nod(model, other, wb, mode="some")


def test_whitebox_architecture_mismatch(tiny, tiny_suites):
    model, _, _ = tiny
    _, wb = tiny_suites
    other = nn.lenet_small(model.input_shape, model.class_count, channels=2, hidden=6)
    with pytest.raises(metrics.NotApplicable):
        metrics.lod(model, other, wb)


def test_toy_oracles_exhaustive():
    count = 0
    for victim, suspect, suite in oracles.toy_configurations(seeds=range(2), max_cases=3):
        assert abs(metrics.nod(victim, suspect, suite) - oracles.brute_nod(victim, suspect, suite)) < 1e-12
        assert abs(metrics.nad(victim, suspect, suite) - oracles.brute_nad(victim, suspect, suite, 0.5)) < 1e-12
        assert abs(metrics.lod(victim, suspect, suite) - oracles.brute_lod(victim, suspect, suite)) < 1e-12
        assert abs(metrics.lad(victim, suspect, suite) - oracles.brute_lad(victim, suspect, suite, 0.5)) < 1e-12
        count += 1
    assert count == 2 * 2 * (4 + 12 + 24)


# ---------------------------------------------------------------- measure_all


def test_measure_all_identity(tiny, tiny_suites):
    model, _, _ = tiny
    bb, wb = tiny_suites
    reports = metrics.measure_all(model, model.copy(), bb, wb)
    assert [r.metric for r in reports] == list(metrics.ALL_METRICS)
    assert all(r.value == 0.0 for r in reports)
    assert all(r.suite_hash == (bb.digest() if r.metric in metrics.BLACKBOX_METRICS else wb.digest())
               for r in reports)


def test_measure_all_vtl_whitebox_only(tiny, tiny_suites):
    model, train, _ = tiny
    bb, wb = tiny_suites
    vtl = forge.vtl_transfer(model, Dataset(train.inputs, train.labels % 2, "m2", 2), 2,
                             forge.TrainConfig(epochs=1))
    reports = metrics.measure_all(model, vtl, bb, wb)
    assert [r.metric for r in reports] == list(metrics.WHITEBOX_METRICS)


def test_measure_all_ft_ll_zero(tiny, tiny_suites):
    model, train, _ = tiny
    bb, _ = tiny_suites
    ftll = forge.finetune(model, train, "ft-ll", forge.TrainConfig(epochs=2, learning_rate=0.05))
    seeds = testgen.gini_select(model, tiny[2], 6)
    for layer in model.hidden_layers():
        th = testgen.neuron_thresholds(model, train, layer, 1.0)
        wb = testgen.gen_whitebox(model, seeds, layer, th, 0.1, 30)
        if len(wb) == 0:
            continue
        for f in (metrics.nod, metrics.nad, metrics.lod, metrics.lad):
            assert f(model, ftll, wb) == 0.0


def test_provenance_error(tiny, tiny_suites):
    model, train, _ = tiny
    bb, wb = tiny_suites
    other = forge.finetune(model, train, "ft-al", forge.TrainConfig(epochs=1))
    with pytest.raises(metrics.ProvenanceError):
        metrics.measure_all(other, model, bb, None)
    with pytest.raises(metrics.ProvenanceError):
        metrics.measure_all(other, model, None, wb)


def test_csv_export():
    rows = [("s1", metrics.MetricReport("RobD", 0.25, "h", 3)), ("s1", metrics.MetricReport("NOD", 1.5, "h", 3, 5))]
    text = metrics.scores_to_csv(rows)
    assert text.splitlines() == ["suspect_id,metric,value,layer", "s1,RobD,0.25,", "s1,NOD,1.5,5"]


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1))
def test_identity_property(seed):
    m = random_model(seed, conv=False)
    rng = np.random.default_rng(seed)
    cases = rng.uniform(size=(4,) + m.input_shape)
    layer = 2
    size = m.neuron_count(layer)
    wb = oracles.toy_suite(m, layer, cases, rng.integers(size, size=4), rng.uniform(0, 2, size))
    bb = bb_suite(m, cases, rng.integers(m.class_count, size=4))
    assert all(r.value == 0.0 for r in metrics.measure_all(m, m.copy(), bb, wb))


@settings(max_examples=30, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31 - 1), perm_seed=st.integers(0, 1000))
def test_symmetry_bounds_and_permutation(seed, perm_seed):
    a = random_model(seed, conv=False)
    b = a.copy()
    rng = np.random.default_rng(seed)
    for layer in b.layers:
        for p in layer.params.values():
            p += rng.normal(scale=1.0, size=p.shape)
    cases = rng.uniform(size=(5,) + a.input_shape)
    size = a.neuron_count(2)
    wb = oracles.toy_suite(a, 2, cases, rng.integers(size, size=5), rng.uniform(0, 2, size))
    bb = bb_suite(a, cases, rng.integers(a.class_count, size=5))
    assert abs(metrics.jsd(a, b, bb) - metrics.jsd(b, a, bb)) <= 1e-12
    values = {r.metric: r.value for r in metrics.measure_all(a, b, bb, wb)}
    assert 0 <= values["JSD"] <= math.log(2) + 1e-9
    assert 0 <= values["RobD"] <= 1
    assert 0 <= values["NAD"] <= 1 and 0 <= values["LAD"] <= 1
    assert np.all(metrics.nad_per_neuron(a, b, wb) <= 1)
    order = np.random.default_rng(perm_seed).permutation(5)
    shuffled = {r.metric: r.value for r in metrics.measure_all(a, b, bb.subset(order), wb.subset(order))}
    for k in values:
        assert shuffled[k] == pytest.approx(values[k], abs=1e-15)
