"""Run configuration and the end-to-end experiment: data, victim, suspect zoo,
test suites, scores, calibration and verdicts, all written as JSON files.

Every stage is a pure function of the configuration, so two runs with the
same configuration produce byte-identical output directories.
"""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, forge, jsonio, judge, metrics, nn, testgen
from .data import Dataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""


def _doc(text: str, **kw):
    return field(metadata={"doc": text}, **kw)


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = _doc("'synth' (Gaussian blobs) or 'idx' (MNIST-format files)", default="synth")
    idx_train_images: str = _doc("IDX image file for training (dataset=idx)", default="")
    idx_train_labels: str = _doc("IDX label file for training (dataset=idx)", default="")
    idx_test_images: str = _doc("IDX image file for testing (dataset=idx)", default="")
    idx_test_labels: str = _doc("IDX label file for testing (dataset=idx)", default="")
    class_count: int = _doc("number of classes", default=10)
    per_class: int = _doc("synthetic training samples per class", default=300)
    test_per_class: int = _doc("synthetic test samples per class", default=50)
    image_side: int = _doc("synthetic image side length", default=20)
    contrast: float = _doc("synthetic template intensity", default=0.6)
    noise: float = _doc("synthetic multiplicative pixel noise", default=0.3)
    span: float = _doc("share of the image that holds blob centres", default=0.6)
    data_seed: int = _doc("seed of the synthetic task", default=0)
    victim_fraction: float = _doc("share of training data given to the victim", default=0.5)
    split_seed: int = _doc("seed of the victim/negative split", default=0)
    # architecture and training
    channels: int = _doc("conv channels", default=8)
    hidden: int = _doc("hidden dense width", default=16)
    epochs: int = _doc("training epochs for victim and negatives", default=30)
    batch_size: int = _doc("mini-batch size", default=32)
    learning_rate: float = _doc("training learning rate", default=0.03)
    momentum: float = _doc("SGD momentum", default=0.9)
    victim_seed: int = _doc("victim initialisation and shuffling seed", default=1)
    # suspects
    neg1_count: int = _doc("negatives trained on the victim's data with other seeds", default=4)
    neg2_count: int = _doc("negatives trained on the held-out half", default=4)
    negative_seed: int = _doc("first negative seed; later negatives count up", default=10)
    positive_kinds: str = _doc("comma list of ft-ll, ft-al, rt-al, p<percent>", default="ft-ll,ft-al,rt-al,p20,p60")
    positive_seeds: int = _doc("copies of each positive kind", default=3)
    finetune_fraction: float = _doc("share of the victim's data held by an attacker", default=0.2)
    finetune_epochs: int = _doc("finetuning epochs", default=10)
    finetune_learning_rate: float = _doc("finetuning learning rate", default=0.01)
    # other derivations (derive subcommand)
    adapt_epochs: int = _doc("adaptive-attack finetuning epochs", default=5)
    adapt_learning_rate: float = _doc("adaptive-attack learning rate", default=0.002)
    adapt_weight: float = _doc("weight of the adaptive attack's disagreement term", default=1.0)
    knockoff_epochs: int = _doc("knockoff surrogate training epochs", default=30)
    knockoff_learning_rate: float = _doc("knockoff surrogate learning rate", default=0.01)
    knockoff_ood_per_class: int = _doc("out-of-task blob images per class added to the knockoff queries", default=150)
    jba_seeds: int = _doc("test samples given to the jba attacker", default=150)
    jba_rounds: int = _doc("jba augmentation rounds", default=4)
    jba_step: float = _doc("jba augmentation step", default=0.1)
    advtrain_epsilon: float = _doc("adversarial-training budget", default=0.1)
    advtrain_steps: int = _doc("adversarial-training pgd steps", default=10)
    vtl_classes: int = _doc("class count of the transfer task", default=5)
    # seeds and suites
    seed_count: int = _doc("seeds taken from the test set", default=100)
    seed_order: str = _doc("'high' or 'low' certainty seeds", default="high")
    bb_generator: str = _doc("black-box generator: pgd, fgsm or cw", default="pgd")
    epsilon: float = _doc("L-inf budget for fgsm/pgd", default=0.1)
    pgd_steps: int = _doc("pgd iterations", default=10)
    cw_c: float = _doc("cw loss weight", default=5.0)
    cw_iters: int = _doc("cw iterations", default=1000)
    cw_lr: float = _doc("cw step size", default=0.01)
    cw_loss: str = _doc("cw misclassification loss: 'margin' (logit margin) or 'ce' (cross-entropy)", default="margin")
    layer: int = _doc("layer for white-box testing; 0 picks the first hidden dense layer", default=0)
    wb_m: float = _doc("white-box threshold multiplier on the training maximum", default=3.0)
    wb_iters: int = _doc("white-box search iterations", default=1000)
    wb_lr: float = _doc("white-box gradient-ascent step", default=0.1)
    # judging
    beta: float = _doc("activation threshold multiplier for NAD/LAD", default=0.5)
    alpha_blackbox: float = _doc("threshold relaxation for black-box metrics", default=0.9)
    alpha_whitebox: float = _doc("threshold relaxation for white-box metrics", default=0.6)
    confidence: float = _doc("confidence of the lower bound", default=0.99)
    calibration_negatives: str = _doc("negatives used for thresholds: both, neg1 or neg2", default="both")

    def __post_init__(self):
        checks = [
            ("dataset", self.dataset in ("synth", "idx"), "must be 'synth' or 'idx'"),
            ("class_count", self.class_count >= 2, "must be >= 2"),
            ("per_class", self.per_class >= 1, "must be >= 1"),
            ("test_per_class", self.test_per_class >= 1, "must be >= 1"),
            ("image_side", self.image_side >= 4, "must be >= 4"),
            ("contrast", self.contrast > 0, "must be > 0"),
            ("noise", self.noise >= 0, "must be >= 0"),
            ("span", 0 <= self.span <= 1, "must lie in [0, 1]"),
            ("victim_fraction", 0 < self.victim_fraction < 1, "must lie in (0, 1)"),
            ("neg1_count", self.neg1_count >= 0, "must be >= 0"),
            ("neg2_count", self.neg2_count >= 0, "must be >= 0"),
            ("positive_seeds", self.positive_seeds >= 0, "must be >= 0"),
            ("finetune_fraction", 0 < self.finetune_fraction <= 1, "must lie in (0, 1]"),
            ("adapt_epochs", self.adapt_epochs >= 0, "must be >= 0"),
            ("knockoff_epochs", self.knockoff_epochs >= 1, "must be >= 1"),
            ("knockoff_ood_per_class", self.knockoff_ood_per_class >= 0, "must be >= 0"),
            ("jba_seeds", self.jba_seeds >= 1, "must be >= 1"),
            ("jba_rounds", self.jba_rounds >= 1, "must be >= 1"),
            ("vtl_classes", self.vtl_classes >= 2, "must be >= 2"),
            ("seed_count", self.seed_count >= 1, "must be >= 1"),
            ("seed_order", self.seed_order in ("high", "low"), "must be 'high' or 'low'"),
            ("bb_generator", self.bb_generator in testgen.BLACKBOX_GENERATORS, "must be pgd, fgsm or cw"),
            ("epsilon", self.epsilon >= 0, "must be >= 0"),
            ("pgd_steps", self.pgd_steps >= 1, "must be >= 1"),
            ("cw_c", self.cw_c > 0, "must be > 0"),
            ("cw_loss", self.cw_loss in ("margin", "ce"), "must be 'margin' or 'ce'"),
            ("layer", self.layer >= 0, "must be >= 0"),
            ("wb_iters", self.wb_iters >= 0, "must be >= 0"),
            ("beta", self.beta >= 0, "must be >= 0"),
            ("alpha_blackbox", self.alpha_blackbox >= 0, "must be >= 0"),
            ("alpha_whitebox", self.alpha_whitebox >= 0, "must be >= 0"),
            ("confidence", 0 < self.confidence < 1, "must lie in (0, 1)"),
            ("calibration_negatives", self.calibration_negatives in ("both", "neg1", "neg2"),
             "must be both, neg1 or neg2"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")
        for kind in self.kinds():
            if kind not in ("ft-ll", "ft-al", "rt-al") and not _prune_ratio(kind):
                raise ConfigError(f"positive_kinds: unknown kind {kind!r}")
        if self.dataset == "idx":
            for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"{key}: required when dataset is 'idx'")

    def kinds(self) -> list[str]:
        return [k.strip() for k in self.positive_kinds.split(",") if k.strip()]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration key")
            want = known[key].type
            ok = {"int": isinstance(value, int) and not isinstance(value, bool),
                  "float": isinstance(value, (int, float)) and not isinstance(value, bool),
                  "str": isinstance(value, str)}[want]
            if not ok:
                raise ConfigError(f"{key}: expected {want}, got {type(value).__name__}")
        return cls(**{k: (float(v) if known[k].type == "float" else v) for k, v in d.items()})

    @classmethod
    def explain(cls) -> str:
        lines = []
        for f in fields(cls):
            lines.append(f"{f.name} ({f.type}, default {f.default!r}): {f.metadata['doc']}")
        return "\n".join(lines)


def _prune_ratio(kind: str) -> float | None:
    if kind.startswith("p") and kind[1:].isdigit() and 0 < int(kind[1:]) < 100:
        return int(kind[1:]) / 100.0
    return None


def load_config(path) -> RunConfig:
    try:
        d = jsonio.read(path)
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} not found") from None
    except jsonio.FormatError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig.from_dict(d)


# --------------------------------------------------------------------------
# stages


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(victim half, negative half, test set)."""
    if cfg.dataset == "synth":
        look = dict(contrast=cfg.contrast, noise=cfg.noise, span=cfg.span)
        full = data.synth_blobs(cfg.class_count, cfg.per_class, cfg.image_side, cfg.data_seed, **look)
        test = data.synth_blobs(cfg.class_count, cfg.test_per_class, cfg.image_side, cfg.data_seed + 1,
                                template_seed=cfg.data_seed, name=f"{full.name}/test", **look)
    else:
        full = data.load_idx(cfg.idx_train_images, cfg.idx_train_labels, cfg.class_count)
        test = data.load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.class_count)
    victim_half, negative_half = data.split(full, data.SplitPlan(cfg.victim_fraction, cfg.split_seed))
    return victim_half, negative_half, test


def architecture(cfg: RunConfig):
    return lambda shape, C: nn.lenet_small(shape, C, channels=cfg.channels, hidden=cfg.hidden)


def train_config(cfg: RunConfig, seed: int) -> forge.TrainConfig:
    return forge.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                             rng_seed=seed, momentum=cfg.momentum)


def finetune_config(cfg: RunConfig, seed: int) -> forge.TrainConfig:
    return forge.TrainConfig(epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
                             learning_rate=cfg.finetune_learning_rate, rng_seed=seed, momentum=cfg.momentum)


def train_victim(cfg: RunConfig, victim_half: Dataset) -> nn.Model:
    return forge.train(train_config(cfg, cfg.victim_seed), victim_half, architecture(cfg))


def train_negatives(cfg: RunConfig, victim_half: Dataset, negative_half: Dataset) -> dict[str, nn.Model]:
    out = {}
    seed = cfg.negative_seed
    for i in range(cfg.neg1_count):
        out[f"neg1-{i}"] = forge.train(train_config(cfg, seed), victim_half, architecture(cfg))
        seed += 1
    for i in range(cfg.neg2_count):
        out[f"neg2-{i}"] = forge.train(train_config(cfg, seed), negative_half, architecture(cfg))
        seed += 1
    return out


def derive_positive(cfg: RunConfig, victim: nn.Model, victim_half: Dataset, kind: str, copy: int) -> nn.Model:
    attacker_data = forge.finetune_slice(victim_half, cfg.finetune_fraction, copy)
    fcfg = finetune_config(cfg, 100 + copy)
    ratio = _prune_ratio(kind)
    if ratio is not None:
        return forge.prune(victim, ratio, fcfg, attacker_data)
    return forge.finetune(victim, attacker_data, kind, fcfg)


def derive_positives(cfg: RunConfig, victim: nn.Model, victim_half: Dataset) -> dict[str, nn.Model]:
    return {f"{kind}-{s}": derive_positive(cfg, victim, victim_half, kind, s)
            for s in range(cfg.positive_seeds) for kind in cfg.kinds()}


def metric_layer(cfg: RunConfig, victim: nn.Model) -> int:
    return cfg.layer or victim.default_layer()


def knockoff_queries(cfg: RunConfig, negative_half: Dataset) -> Dataset:
    """The knockoff attacker's transfer set: its own natural data plus, for
    synthetic tasks, blob images drawn from an unrelated template set."""
    if cfg.dataset != "synth" or cfg.knockoff_ood_per_class == 0:
        return negative_half
    other = data.synth_blobs(cfg.class_count, cfg.knockoff_ood_per_class, cfg.image_side, cfg.data_seed + 99,
                             contrast=cfg.contrast, noise=cfg.noise, span=cfg.span)
    return Dataset(np.concatenate([negative_half.inputs, other.inputs]),
                   np.concatenate([negative_half.labels, other.labels]),
                   f"{negative_half.name}+{other.name}", cfg.class_count)


def transfer_task(cfg: RunConfig, negative_half: Dataset) -> Dataset:
    """A new task for transfer learning: the attacker's images relabelled ``label mod vtl_classes``."""
    return Dataset(negative_half.inputs, negative_half.labels % cfg.vtl_classes,
                   f"{negative_half.name}/mod{cfg.vtl_classes}", cfg.vtl_classes)


def derive(cfg: RunConfig, victim: nn.Model, kind: str, copy: int = 0, ratio: float | None = None,
           suite: testgen.TestSuite | None = None, datasets=None, on_epoch=None) -> nn.Model:
    """Any derivation of ``victim`` by name, with settings from ``cfg``."""
    victim_half, negative_half, test = datasets or load_data(cfg)
    if kind in ("ft-ll", "ft-al", "rt-al"):
        return derive_positive(cfg, victim, victim_half, kind, copy)
    if kind == "prune":
        if ratio is None:
            raise ConfigError("ratio: required for prune")
        return forge.prune(victim, ratio, finetune_config(cfg, 100 + copy),
                           forge.finetune_slice(victim_half, cfg.finetune_fraction, copy))
    if kind == "knockoff":
        kcfg = forge.TrainConfig(epochs=cfg.knockoff_epochs, batch_size=cfg.batch_size,
                                 learning_rate=cfg.knockoff_learning_rate, rng_seed=200 + copy, momentum=cfg.momentum)
        return forge.extract_knockoff(victim, knockoff_queries(cfg, negative_half), kcfg, architecture(cfg),
                                      on_epoch=on_epoch)
    if kind == "jba":
        idx = data.stratified_indices(test.labels, test.class_count, min(cfg.jba_seeds / len(test), 0.999), copy)
        jcfg = train_config(cfg, 300 + copy)
        return forge.extract_jba(victim, test.subset(idx), cfg.jba_rounds, cfg.jba_step, jcfg)
    if kind in ("adapt-b", "adapt-w"):
        if suite is None:
            raise ConfigError(f"suite: {kind} needs the exposed suite")
        acfg = forge.TrainConfig(epochs=cfg.adapt_epochs, batch_size=cfg.batch_size,
                                 learning_rate=cfg.adapt_learning_rate, rng_seed=400 + copy, momentum=cfg.momentum)
        clean = forge.finetune_slice(victim_half, cfg.finetune_fraction, copy)
        return forge.adapt_attack(victim, kind, suite, clean, acfg, weight=cfg.adapt_weight)
    if kind == "adv-train":
        clean = forge.finetune_slice(victim_half, cfg.finetune_fraction, copy)
        return forge.adv_train(victim, clean, cfg.advtrain_epsilon, cfg.advtrain_steps, finetune_config(cfg, 500 + copy))
    if kind == "vtl":
        return forge.vtl_transfer(victim, transfer_task(cfg, negative_half), cfg.vtl_classes,
                                  finetune_config(cfg, 600 + copy))
    raise ConfigError(f"attack: unknown kind {kind!r}")


def select_seeds(cfg: RunConfig, victim: nn.Model, test: Dataset) -> testgen.SeedSet:
    return testgen.gini_select(victim, test, cfg.seed_count, cfg.seed_order)


def blackbox_suite(cfg: RunConfig, victim: nn.Model, seeds: testgen.SeedSet) -> testgen.TestSuite:
    if cfg.bb_generator == "fgsm":
        return testgen.gen_fgsm(victim, seeds, cfg.epsilon)
    if cfg.bb_generator == "cw":
        return testgen.gen_cw(victim, seeds, cfg.cw_c, cfg.cw_iters, cfg.cw_lr, cfg.cw_loss)
    return testgen.gen_pgd(victim, seeds, cfg.epsilon, cfg.pgd_steps)


def whitebox_suite(cfg: RunConfig, victim: nn.Model, seeds: testgen.SeedSet, victim_half: Dataset) -> testgen.TestSuite:
    layer = metric_layer(cfg, victim)
    thresholds = testgen.neuron_thresholds(victim, victim_half, layer, cfg.wb_m)
    return testgen.gen_whitebox(victim, seeds, layer, thresholds, cfg.wb_lr, cfg.wb_iters)


def calibration_ids(cfg: RunConfig, negative_ids) -> list[str]:
    pick = {"both": ("neg1", "neg2"), "neg1": ("neg1",), "neg2": ("neg2",)}[cfg.calibration_negatives]
    return [n for n in negative_ids if n.split("-")[0] in pick]


def thresholds_document(ts: judge.ThresholdSet, victim_hash: str, suite_hashes: dict, negatives: dict) -> dict:
    doc = ts.to_dict()
    doc["victim_hash"] = victim_hash
    doc["suite_hashes"] = suite_hashes
    doc["negatives"] = negatives
    doc["content_sha256"] = jsonio.digest(doc)
    return doc


def verify_thresholds_document(doc: dict) -> None:
    body = {k: v for k, v in doc.items() if k != "content_sha256"}
    if doc.get("content_sha256") != jsonio.digest(body):
        raise metrics.ProvenanceError("thresholds file content does not match its recorded digest")


def verdict_document(verdict: judge.Verdict, suspect_id: str, hashes: dict) -> dict:
    doc = {"format_version": jsonio.FORMAT_VERSION, "suspect_id": suspect_id}
    doc.update(verdict.to_dict())
    doc["summary"] = verdict.summary()
    doc["inputs"] = hashes
    return doc


def save_model_dir(model: nn.Model, directory: Path) -> str:
    directory.mkdir(parents=True, exist_ok=True)
    h = nn.save_model(model, directory / "model.json")
    provenance = {"format_version": jsonio.FORMAT_VERSION, "model_hash": nn.model_hash(model),
                  "file_sha256": h, **model.metadata}
    jsonio.write(directory / "provenance.json", provenance)
    return h


@dataclass
class RunResult:
    out_dir: Path
    victim: nn.Model
    negatives: dict
    positives: dict
    bb_suite: testgen.TestSuite
    wb_suite: testgen.TestSuite
    scores: dict
    thresholds: judge.ThresholdSet
    verdicts: dict
    aucs: dict
    timings: dict


def run(cfg: RunConfig, out_dir) -> RunResult:
    """Build the zoo, generate suites, score, calibrate and judge every suspect."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    jsonio.write(out / "config.json", cfg.to_dict())
    victim_half, negative_half, test = load_data(cfg)
    victim = train_victim(cfg, victim_half)
    save_model_dir(victim, out / "models" / "victim")
    negatives = train_negatives(cfg, victim_half, negative_half)
    positives = derive_positives(cfg, victim, victim_half)
    for name, m in {**negatives, **positives}.items():
        save_model_dir(m, out / "models" / name)
    timings["zoo"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    seeds = select_seeds(cfg, victim, test)
    bb = blackbox_suite(cfg, victim, seeds)
    wb = whitebox_suite(cfg, victim, seeds, victim_half)
    suite_hashes = {"blackbox": testgen.save_suite(bb, out / "suites" / "blackbox.json"),
                    "whitebox": testgen.save_suite(wb, out / "suites" / "whitebox.json")}
    timings["suites"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    vh = nn.model_hash(victim)
    scores = {}
    for name, m in {**negatives, **positives}.items():
        scores[name] = metrics.measure_all(victim, m, bb, wb, cfg.beta)
        jsonio.write(out / "scores" / f"{name}.json",
                     metrics.scores_to_dict(name, vh, nn.model_hash(m), scores[name]))
    cal = calibration_ids(cfg, negatives)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if len(cal) >= judge.RECOMMENDED_NEGATIVES else "default")
        ts = judge.calibrate(judge.NegativeStats.from_reports([scores[n] for n in cal]),
                             cfg.alpha_blackbox, cfg.alpha_whitebox, cfg.confidence)
    tdoc = thresholds_document(ts, vh, suite_hashes, {n: nn.model_hash(negatives[n]) for n in cal})
    thresholds_hash = jsonio.write(out / "thresholds.json", tdoc)
    verdicts = {}
    for name, m in {**negatives, **positives}.items():
        v = judge.vote(scores[name], ts)
        verdicts[name] = v
        hashes = {"victim": vh, "suspect": nn.model_hash(m), **{f"{k}_suite": h for k, h in suite_hashes.items()},
                  "thresholds": thresholds_hash}
        jsonio.write(out / "verdicts" / f"{name}.json", verdict_document(v, name, hashes))
    aucs = {}
    for metric in metrics.ALL_METRICS:
        pos = [r.value for n in positives for r in scores[n] if r.metric == metric]
        neg = [r.value for n in negatives for r in scores[n] if r.metric == metric]
        if pos and neg:
            points, auc = judge.roc_auc(pos, neg)
            aucs[metric] = {"auc": auc, "roc": [list(p) for p in points]}
    jsonio.write(out / "roc.json", {"format_version": jsonio.FORMAT_VERSION, "metrics": aucs})
    summary = {
        "format_version": jsonio.FORMAT_VERSION,
        "victim_hash": vh,
        "layer": wb.layer,
        "whitebox_failures": wb.failures,
        "whitebox_cases": len(wb),
        "auc": {k: v["auc"] for k, v in aucs.items()},
        "verdicts": {n: v.summary() for n, v in verdicts.items()},
    }
    jsonio.write(out / "summary.json", summary)
    timings["judge"] = time.perf_counter() - t2
    log.info("pipeline timings %s", timings)
    return RunResult(out, victim, negatives, positives, bb, wb, scores, ts, verdicts,
                     {k: v["auc"] for k, v in aucs.items()}, timings)
