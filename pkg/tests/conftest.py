import numpy as np
import pytest

from modeljudge import data, forge, nn, testgen

FIXTURES = __import__("pathlib").Path(__file__).with_name("fixtures")


def random_model(seed: int, conv: bool | None = None) -> nn.Model:
    """A small randomly shaped and initialised model, conv or dense."""
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 5))
    if conv if conv is not None else rng.random() < 0.5:
        side = int(rng.integers(5, 8))
        ch = int(rng.integers(1, 3))
        k = int(rng.integers(2, 4))
        out_ch = int(rng.integers(1, 4))
        m = nn.Model([nn.Conv2D(ch, out_ch, k), nn.ReLU(), nn.MaxPool2D(2), nn.Flatten(),
                      nn.Dense(out_ch * ((side - k + 1) // 2) ** 2, C), nn.Softmax()], (ch, side, side))
    else:
        d = int(rng.integers(2, 7))
        h = int(rng.integers(2, 8))
        m = nn.Model([nn.Dense(d, h), nn.ReLU(), nn.Dense(h, C), nn.Softmax()], (d,))
    m.init_params(rng)
    # he-uniform gives zero biases; random ones exercise the bias paths
    for layer in m.layers:
        if "b" in layer.params:
            layer.params["b"][...] = rng.uniform(-0.3, 0.3, layer.params["b"].shape)
    return m


def tiny_dataset(seed: int = 0, per_class: int = 40) -> data.Dataset:
    return data.synth_blobs(4, per_class, 8, seed, template_seed=0)


def tiny_arch(shape, C):
    return nn.lenet_small(shape, C, channels=3, hidden=6)


@pytest.fixture(scope="session")
def tiny():
    """A small trained model with its training and test data."""
    train = tiny_dataset(0, 60)
    test = tiny_dataset(1, 20)
    model = forge.train(forge.TrainConfig(epochs=30, learning_rate=0.05, rng_seed=3), train, tiny_arch)
    return model, train, test


@pytest.fixture(scope="session")
def tiny_suites(tiny):
    model, train, test = tiny
    seeds = testgen.gini_select(model, test, 12)
    bb = testgen.gen_pgd(model, seeds, 0.1, 10)
    layer = model.default_layer()
    wb = testgen.gen_whitebox(model, seeds, layer, testgen.neuron_thresholds(model, train, layer, 1.0), 0.1, 300)
    return bb, wb


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full default pipeline (victim, 8 negatives, 15 positives, suites, verdicts)."""
    from modeljudge import pipeline
    cfg = pipeline.RunConfig()
    out = tmp_path_factory.mktemp("desk")
    result = pipeline.run(cfg, out)
    return cfg, result, pipeline.load_data(cfg)


@pytest.fixture(scope="session")
def desk_knockoff(desk_run):
    """The knockoff surrogate of the desk victim and its JSD to the victim after every epoch."""
    from modeljudge import metrics, pipeline
    cfg, res, datasets = desk_run
    curve = []
    model = pipeline.derive(cfg, res.victim, "knockoff", datasets=datasets,
                            on_epoch=lambda epoch, m: curve.append((epoch, metrics.jsd(res.victim, m, res.bb_suite))))
    return model, curve


@pytest.fixture(scope="session")
def desk_adapt_b(desk_run):
    """The desk victim attacked with Adapt-B on the exposed black-box suite."""
    from modeljudge import pipeline
    cfg, res, datasets = desk_run
    return pipeline.derive(cfg, res.victim, "adapt-b", suite=res.bb_suite, datasets=datasets)


# ---------------------------------------------------------------- acceptance report


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): test belongs to a numbered acceptance criterion")
    config.acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = item.config.acceptance_results.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    if report.when == "call":
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{notes}]" if notes else ""))
