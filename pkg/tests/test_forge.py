import json

import numpy as np
import pytest

from modeljudge import forge, nn, testgen
from modeljudge.data import Dataset

from conftest import tiny_arch, tiny_dataset

CFG = forge.TrainConfig(epochs=3, learning_rate=0.05, rng_seed=1)


def params_of(model):
    return [p for layer in model.layers for p in layer.params.values()]


def same_params(a, b):
    return all(np.array_equal(x, y) for x, y in zip(params_of(a), params_of(b)))


def test_train_deterministic_and_seeded():
    ds = tiny_dataset()
    a = forge.train(CFG, ds, tiny_arch)
    b = forge.train(CFG, ds, tiny_arch)
    c = forge.train(forge.TrainConfig(epochs=3, learning_rate=0.05, rng_seed=2), ds, tiny_arch)
    assert same_params(a, b)
    assert not same_params(a, c)
    assert a.metadata["derivation_kind"] == "train" and a.metadata["rng_seed"] == "1"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_names_epoch():
    ds = tiny_dataset()
    with pytest.raises(forge.TrainingError, match="epoch 1"):
        forge.train(forge.TrainConfig(epochs=2, learning_rate=1e300), ds, tiny_arch)


def test_train_config_validation():
    with pytest.raises(ValueError):
        forge.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        forge.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        forge.TrainConfig(optimizer="adam")


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        forge.AttackSpec("nope")
    with pytest.raises(ValueError):
        forge.AttackSpec("prune", ratio=1.0)
    with pytest.raises(ValueError):
        forge.AttackSpec("vtl", new_class_count=1)


# ---------------------------------------------------------------- finetune


def test_ft_ll_zero_epochs_identity(tiny):
    model, train, _ = tiny
    out = forge.finetune(model, train, "ft-ll", forge.TrainConfig(epochs=0))
    assert same_params(out, model)
    assert out is not model


def test_ft_ll_freezes_non_final(tiny):
    model, train, _ = tiny
    before = nn.model_hash(model)
    out = forge.finetune(model, train, "ft-ll", CFG)
    last = out.final_param_layer
    for n, (a, b) in enumerate(zip(model.layers, out.layers), start=1):
        if n != last:
            assert nn.layer_hash(a) == nn.layer_hash(b)
    assert nn.layer_hash(model.layers[last - 1]) != nn.layer_hash(out.layers[last - 1])
    assert nn.model_hash(model) == before


def test_rt_al_reinitialises_last_layer(tiny):
    model, train, _ = tiny
    out = forge.finetune(model, train, "rt-al", forge.TrainConfig(epochs=0, rng_seed=4))
    last = out.final_param_layer
    assert not np.array_equal(out.layers[last - 1].params["W"], model.layers[last - 1].params["W"])
    for n in range(1, last):
        assert nn.layer_hash(out.layers[n - 1]) == nn.layer_hash(model.layers[n - 1])


def test_finetune_label_space_checked(tiny):
    model, train, _ = tiny
    other = Dataset(train.inputs, train.labels % 3, "x", 3)
    with pytest.raises(ValueError):
        forge.finetune(model, other, "ft-al", CFG)


# ---------------------------------------------------------------- prune


def test_prune_definition_example():
    m = nn.Model([nn.Dense(4, 1, W=np.array([[3.0, -1.0, 0.5, 2.0]]), b=np.array([0.7])), nn.Softmax()], (4,))
    out, count = forge.prune_weights(m, 0.5)
    assert count == 2
    assert out.layers[0].params["W"].tolist() == [[3.0, 0.0, 0.0, 2.0]]
    assert out.layers[0].params["b"].tolist() == [0.7]


def test_prune_zero_ratio_unchanged(tiny):
    model, _, _ = tiny
    out = forge.prune(model, 0.0, None, None)
    assert same_params(out, model)


def test_prune_ties_to_lower_index():
    m = nn.Model([nn.Dense(2, 2, W=np.array([[1.0, -1.0], [1.0, 5.0]])), nn.Softmax()], (2,))
    out, _ = forge.prune_weights(m, 0.5)
    assert out.layers[0].params["W"].tolist() == [[0.0, 0.0], [1.0, 5.0]]


@pytest.mark.parametrize("ratio", [0.1, 0.25, 0.6, 0.9])
def test_prune_count_is_floor(tiny, ratio):
    model, _, _ = tiny
    weights = sum(layer.params["W"].size for layer in model.layers if "W" in layer.params)
    out, count = forge.prune_weights(model, ratio)
    zeros = sum(int((layer.params["W"] == 0).sum()) for layer in out.layers if "W" in layer.params)
    before = sum(int((layer.params["W"] == 0).sum()) for layer in model.layers if "W" in layer.params)
    assert before == 0
    assert count == int(np.floor(ratio * weights))
    assert zeros == count


def test_prune_range():
    m = nn.Model([nn.Dense(2, 2), nn.Softmax()], (2,))
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            forge.prune_weights(m, bad)


def test_prune_records_provenance(tiny):
    model, train, _ = tiny
    out = forge.prune(model, 0.6, CFG, train)
    assert out.metadata["derivation_kind"] == "prune"
    assert json.loads(out.metadata["attack_params"]) == {"ratio": 0.6}
    assert out.metadata["parent_model_hash"] == nn.model_hash(model)


# ---------------------------------------------------------------- extraction


def test_knockoff_zero_epochs_is_fresh_init(tiny):
    model, train, test = tiny
    cfg = forge.TrainConfig(epochs=0, rng_seed=9)
    out = forge.extract_knockoff(model, train, cfg)
    fresh = model.copy()
    fresh.init_params(np.random.default_rng([9, 0x1A1]))
    assert same_params(out, fresh)
    assert out.metadata["query_count"] == "0"
    assert forge.agreement(model, out, test.inputs) < 0.6


def test_knockoff_query_count(tiny):
    model, train, _ = tiny
    out = forge.extract_knockoff(model, train, forge.TrainConfig(epochs=2, learning_rate=0.05))
    assert int(out.metadata["query_count"]) == len(train) * 2


def test_knockoff_uses_only_forward(tiny, monkeypatch):
    model, train, _ = tiny
    calls = []
    monkeypatch.setattr(nn, "grad_input", lambda *a, **k: calls.append(a) or pytest.fail("gradient used"))
    forge.extract_knockoff(model, train.subset(range(20)), forge.TrainConfig(epochs=1))
    assert not calls


def test_jba_zero_step_duplicates(tiny):
    model, _, test = tiny
    seeds = test.subset(range(10))
    pools = []
    forge.extract_jba(model, seeds, 1, 0.0, forge.TrainConfig(epochs=1),
                      on_round=lambda r, s, pool: pools.append(pool))
    assert np.array_equal(pools[0][:10], pools[0][10:])


def test_jba_pool_doubles(tiny):
    model, _, test = tiny
    seeds = test.subset(range(6))
    sizes = []
    out = forge.extract_jba(model, seeds, 3, 0.1, forge.TrainConfig(epochs=1),
                            on_round=lambda r, s, pool: sizes.append(len(pool)))
    assert sizes == [12, 24, 48]
    assert out.metadata["pool_size"] == "48"
    with pytest.raises(ValueError):
        forge.extract_jba(model, seeds, 0, 0.1, CFG)


# ---------------------------------------------------------------- adaptive attacks


def test_adapt_zero_epochs_unchanged(tiny, tiny_suites):
    model, train, _ = tiny
    bb, wb = tiny_suites
    for kind, suite in (("adapt-b", bb), ("adapt-w", wb)):
        out = forge.adapt_attack(model, kind, suite, train, forge.TrainConfig(epochs=0))
        assert same_params(out, model)


def test_adapt_mode_mismatch(tiny, tiny_suites):
    model, train, _ = tiny
    bb, wb = tiny_suites
    with pytest.raises(ValueError):
        forge.adapt_attack(model, "adapt-b", wb, train, CFG)
    with pytest.raises(ValueError):
        forge.adapt_attack(model, "adapt-w", bb, train, CFG)


def test_adapt_b_moves_away_on_suite(tiny, tiny_suites):
    model, train, _ = tiny
    bb, _ = tiny_suites
    cfg = forge.TrainConfig(epochs=5, learning_rate=0.01)
    adapted = forge.adapt_attack(model, "adapt-b", bb, train, cfg)
    plain = forge.finetune(model, train, "ft-al", cfg)
    victim_labels = nn.predict_label(model, bb.cases)
    rows = np.arange(len(bb))

    def victim_label_prob(m):
        return nn.forward(m, bb.cases)[rows, victim_labels].mean()

    assert victim_label_prob(adapted) < victim_label_prob(plain)


def test_adv_train_tiny_epsilon_is_plain_finetune(tiny):
    model, train, _ = tiny
    cfg = forge.TrainConfig(epochs=2, learning_rate=0.02, rng_seed=5)
    hard = forge.adv_train(model, train, 1e-12, 3, cfg)
    plain = forge.finetune(model, train, "ft-al", cfg)
    for a, b in zip(params_of(hard), params_of(plain)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)
    with pytest.raises(ValueError):
        forge.adv_train(model, train, 0.0, 3, cfg)


def test_pgd_batch_matches_generator(tiny):
    model, _, test = tiny
    seeds = testgen.gini_select(model, test, 5)
    suite = testgen.gen_pgd(model, seeds, 0.1, 4)
    assert np.array_equal(forge.pgd_batch(model, seeds.inputs, seeds.labels, 0.1, 4), suite.cases)


def test_vtl_head_swap(tiny):
    model, train, _ = tiny
    new = Dataset(train.inputs, train.labels % 3, "mod3", 3)
    out = forge.vtl_transfer(model, new, 3, forge.TrainConfig(epochs=1))
    assert out.class_count == 3
    assert len(nn.forward(out, train.inputs[0])) == 3
    assert out.shapes[:-2] == model.shapes[:-2]
    assert [layer.kind for layer in out.layers] == [layer.kind for layer in model.layers]
    with pytest.raises(ValueError):
        forge.vtl_transfer(model, new, 1, CFG)


# ---------------------------------------------------------------- purity


def test_forge_ops_do_not_mutate_and_are_deterministic(tiny, tiny_suites):
    model, train, test = tiny
    bb, wb = tiny_suites
    before = nn.model_hash(model)
    cfg = forge.TrainConfig(epochs=1, learning_rate=0.02, rng_seed=3)
    ops = [
        lambda: forge.finetune(model, train, "ft-al", cfg),
        lambda: forge.prune(model, 0.3, cfg, train),
        lambda: forge.extract_knockoff(model, train, cfg),
        lambda: forge.extract_jba(model, test.subset(range(8)), 2, 0.1, cfg),
        lambda: forge.adapt_attack(model, "adapt-b", bb, train, cfg),
        lambda: forge.adapt_attack(model, "adapt-w", wb, train, cfg),
        lambda: forge.adv_train(model, train.subset(range(30)), 0.1, 2, cfg),
        lambda: forge.vtl_transfer(model, Dataset(train.inputs, train.labels % 2, "m2", 2), 2, cfg),
    ]
    for op in ops:
        assert nn.model_hash(op()) == nn.model_hash(op())
        assert nn.model_hash(model) == before


def test_finetune_slice_stratified(tiny):
    _, train, _ = tiny
    s = forge.finetune_slice(train, 0.2, 0)
    assert len(s) == round(0.2 * len(train))
    assert np.all(np.abs(s.class_counts() - 0.2 * train.class_counts()) <= 1)
    assert forge.finetune_slice(train, 1.0, 0) is train
