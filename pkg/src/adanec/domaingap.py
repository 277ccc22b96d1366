"""Domain-origin probe: how separable are the synthetic domains?

A small classifier (five convolution layers, global pooling, one
fully-connected layer) is trained to name the source domain of a
contaminated image. Its test accuracy quantifies the domain gaps, and its
softmax posterior doubles as an ablation weight source for combination.
"""

import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_archive, save_archive
from .nn.core import Adam, LayerSpec, backward_layers, forward_layers, init_params

__all__ = [
    "ClassifierConfig",
    "DomainClassifier",
    "train_classifier",
    "classify",
    "posteriors_for_batch",
    "accuracy_report",
    "AccuracyReport",
    "save_classifier",
    "load_classifier",
]


@dataclass(frozen=True)
class ClassifierConfig:
    channels: tuple = (16, 32, 64, 64, 64)
    input_size: int = 64
    activation: str = "silu"
    steps: int = 800
    batch: int = 16
    lr: float = 1e-3


def classifier_layers(cfg: ClassifierConfig, n_domains):
    layers = []
    cin = 3
    for i, cout in enumerate(cfg.channels):
        layers.append(LayerSpec(f"c{i + 1}", "conv", cin=cin, cout=cout,
                                ksize=3, stride=2, act=cfg.activation))
        cin = cout
    layers.append(LayerSpec("pool", "gap"))
    layers.append(LayerSpec("fc", "dense", cin=cin, cout=n_domains, act="none"))
    return layers


@dataclass
class DomainClassifier:
    layers: tuple
    params: dict
    n_domains: int
    config: ClassifierConfig

    def validate(self):
        if self.params["fc.w"].shape[1] != self.n_domains:
            raise ValueError("output dimension must equal the number of domains")
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in parameter {k}")
        return self


def _resize_to(img, size):
    """Center-crop to square then nearest-resize; identity when already right."""
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    sq = img[y0:y0 + side, x0:x0 + side]
    idx = (np.arange(size) * side // size).clip(0, side - 1)
    return sq[idx][:, idx]


def _prepare_batch(imgs, size, dtype):
    return np.stack([np.asarray(_resize_to(np.asarray(im), size), dtype=dtype)
                     for im in imgs])


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def stratified_split(manifest, split_ratio, seed, min_per_domain=5):
    """Per-domain shuffled split; returns ({'train': [...], 'test': [...]})."""
    if not (0.0 < split_ratio < 1.0):
        raise ValueError(f"split ratio must be in (0,1), got {split_ratio}")
    if manifest.n_domains < 2:
        raise ValueError("need at least 2 domains to probe domain gaps")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    train, test = [], []
    for d in range(manifest.n_domains):
        idx = manifest.indices_for_domain(d)
        if len(idx) < min_per_domain:
            raise ValueError(
                f"domain {d} has only {len(idx)} samples (need >= {min_per_domain})"
            )
        idx = np.asarray(idx)
        rng.shuffle(idx)
        n_train = int(np.floor(split_ratio * len(idx) + 0.5))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train.extend(int(i) for i in idx[:n_train])
        test.extend(int(i) for i in idx[n_train:])
    return {"train": sorted(train), "test": sorted(test)}


def train_classifier(manifest, split_ratio, seed, config: ClassifierConfig = None):
    """Cross-entropy training on (image, domain) pairs; returns (model, split)."""
    config = config or ClassifierConfig()
    split = stratified_split(manifest, split_ratio, seed)
    n = manifest.n_domains

    imgs, labels = [], []
    for i in split["train"]:
        s = manifest.load_sample(i)
        imgs.append(_resize_to(s.contaminated, config.input_size))
        labels.append(s.domain_id)
    x_all = np.stack(imgs).astype(np.float32)
    y_all = np.asarray(labels)

    layers = classifier_layers(config, n)
    params = init_params(layers, np.random.SeedSequence([seed, 4]))
    clf = DomainClassifier(layers=tuple(layers), params=params, n_domains=n,
                           config=config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    opt = Adam(lr=config.lr)
    t0 = time.perf_counter()
    for step in range(config.steps):
        idx = rng.integers(0, len(y_all), size=config.batch)
        x, y = x_all[idx], y_all[idx]
        logits, caches = forward_layers(clf.layers, clf.params, x, want_cache=True)
        logp = _log_softmax(logits.astype(np.float64))
        loss = float(-logp[np.arange(len(y)), y].mean())
        if not np.isfinite(loss):
            raise RuntimeError(f"classifier training diverged at step {step}")
        dz = np.exp(logp)
        dz[np.arange(len(y)), y] -= 1.0
        dz /= len(y)
        _, grads = backward_layers(clf.layers, clf.params, caches,
                                   dz.astype(np.float32))
        opt.step(clf.params, grads, lr=config.lr)
    _ = time.perf_counter() - t0
    return clf.validate(), split


def posteriors_for_batch(clf: DomainClassifier, imgs):
    """Softmax posterior rows (B, n_domains), float64."""
    x = _prepare_batch(imgs, clf.config.input_size, np.float32)
    logits = forward_layers(clf.layers, clf.params, x)
    return np.exp(_log_softmax(logits.astype(np.float64)))


def classify(clf: DomainClassifier, img):
    """Posterior over domains for one image (argmax = predicted domain)."""
    from .rtaw import WeightVector

    row = posteriors_for_batch(clf, [img])[0]
    return WeightVector(row, None).validate()


@dataclass
class AccuracyReport:
    train_counts: dict
    test_counts: dict
    per_domain_accuracy: dict
    overall_accuracy: float

    def render(self):
        domains = sorted(self.per_domain_accuracy)
        headers = [f"domain_{d}" for d in domains] + ["Total"]
        rows = [
            ("Training Samples",
             [str(self.train_counts[d]) for d in domains]
             + [str(sum(self.train_counts.values()))]),
            ("Testing Samples",
             [str(self.test_counts[d]) for d in domains]
             + [str(sum(self.test_counts.values()))]),
            ("Accuracy",
             [f"{self.per_domain_accuracy[d] * 100:.1f}%" for d in domains]
             + [f"{self.overall_accuracy * 100:.1f}%"]),
        ]
        width = max(len(h) for h in headers) + 2
        lwidth = max(len(r[0]) for r in rows) + 2
        lines = [" " * lwidth + "".join(h.rjust(width) for h in headers)]
        for name, cells in rows:
            lines.append(name.ljust(lwidth) + "".join(c.rjust(width) for c in cells))
        return "\n".join(lines)


def accuracy_report(clf: DomainClassifier, manifest, split) -> AccuracyReport:
    """Per-domain and sample-weighted overall accuracy on the test split."""
    if not split["test"]:
        raise ValueError("empty test split")
    if set(split["train"]) & set(split["test"]):
        raise ValueError("train and test splits overlap")
    correct = {d: 0 for d in range(manifest.n_domains)}
    total = {d: 0 for d in range(manifest.n_domains)}
    batch_idx = split["test"]
    imgs = [manifest.load_sample(i).contaminated for i in batch_idx]
    labels = [manifest.records[i].domain_id for i in batch_idx]
    rows = posteriors_for_batch(clf, imgs)
    for row, y in zip(rows, labels):
        total[y] += 1
        if int(np.argmax(row)) == y:
            correct[y] += 1
    train_counts = {d: 0 for d in range(manifest.n_domains)}
    for i in split["train"]:
        train_counts[manifest.records[i].domain_id] += 1
    per_domain = {d: (correct[d] / total[d] if total[d] else 0.0) for d in total}
    overall = sum(correct.values()) / sum(total.values())
    return AccuracyReport(train_counts=train_counts, test_counts=total,
                          per_domain_accuracy=per_domain, overall_accuracy=overall)


def save_classifier(clf: DomainClassifier, path, extra_meta=None):
    c = clf.config
    arch = "\n".join([
        f"n_domains = {clf.n_domains}",
        f"channels = {','.join(str(ch) for ch in c.channels)}",
        f"input_size = {c.input_size}",
        f"activation = {c.activation}",
    ])
    save_archive(path, "classifier", arch, extra_meta or {}, clf.params)


def load_classifier(path) -> DomainClassifier:
    _, arch_text, _, params = load_archive(path, expect_section="classifier")
    kv = dict(line.split(" = ") for line in arch_text.strip().splitlines())
    cfg = ClassifierConfig(channels=tuple(int(c) for c in kv["channels"].split(",")),
                           input_size=int(kv["input_size"]),
                           activation=kv["activation"])
    n = int(kv["n_domains"])
    return DomainClassifier(layers=tuple(classifier_layers(cfg, n)), params=params,
                            n_domains=n, config=cfg).validate()
