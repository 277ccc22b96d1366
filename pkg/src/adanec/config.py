"""Experiment configuration: line-oriented `key = value` text.

Blank lines and `#` comments are ignored. Every key has a typed default
below; unknown keys are rejected. Interval values use `lo:hi`. The policy
list is comma-separated `mode:source:level` entries.

Domain specs live under `domain.<id>.*` (sources) and `target.*` (the
held-out pseudo-target whose ranges should not intersect the sources).
"""

import hashlib
from dataclasses import dataclass, field

from .backbone import BackboneConfig, TrainConfig
from .combination import CombinationPolicy
from .domaingap import ClassifierConfig
from .losses import LossConfig
from .rtaw import RTAWConfig
from .synthesis import DomainSpec

__all__ = ["ExperimentConfig", "DEFAULTS", "parse_config", "load_config",
           "default_config", "config_lines", "section_hash"]


def _interval(text):
    lo, _, hi = text.partition(":")
    return (float(lo), float(hi))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return f"{value[0]:g}:{value[1]:g}"
    return str(value)


def _parse_bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# key -> (parser, default)
DEFAULTS = {
    "data.size": (int, 64),
    "data.train_per_domain": (int, 300),
    "data.eval_per_domain": (int, 40),
    "data.target_count": (int, 40),
    "data.seed": (int, 7),

    "domain.0.omega": (_interval, (0.85, 0.95)),
    "domain.0.phi": (_interval, (0.10, 0.25)),
    "domain.0.blur": (_interval, (0.0, 1.0)),
    "domain.0.gamma": (float, 2.2),
    "domain.0.pool": (str, "procedural"),
    "domain.1.omega": (_interval, (0.80, 0.90)),
    "domain.1.phi": (_interval, (0.38, 0.55)),
    "domain.1.blur": (_interval, (2.0, 3.0)),
    "domain.1.gamma": (float, 2.2),
    "domain.1.pool": (str, "procedural"),
    "domain.2.omega": (_interval, (0.78, 0.88)),
    "domain.2.phi": (_interval, (0.70, 0.85)),
    "domain.2.blur": (_interval, (6.5, 8.0)),
    "domain.2.gamma": (float, 2.2),
    "domain.2.pool": (str, "procedural"),

    "target.omega": (_interval, (0.80, 0.90)),
    "target.phi": (_interval, (0.26, 0.36)),
    "target.blur": (_interval, (1.1, 1.7)),
    "target.gamma": (float, 2.2),
    "target.pool": (str, "procedural"),

    "backbone.width": (int, 16),
    "backbone.depth": (int, 6),
    "backbone.ksize": (int, 3),
    "backbone.activation": (str, "silu"),

    "train.steps": (int, 1000),
    "train.batch": (int, 8),
    "train.lr": (float, 1e-3),
    "train.cosine": (_parse_bool, True),
    "train.lambda_fid": (float, 1.0),
    "train.lambda_rec": (float, 0.5),
    "train.grad_fidelity": (_parse_bool, False),
    "train.warm_start": (_parse_bool, True),  # experts fine-tune from joint
    "train.seed": (int, 11),

    "rtaw.feature_dim": (int, 128),
    "rtaw.proj_dim": (int, 64),
    "rtaw.extractor_depth": (int, 4),
    "rtaw.base_channels": (int, 16),
    "rtaw.activation": (str, "silu"),
    "rtaw.steps": (int, 600),
    "rtaw.batch": (int, 8),
    "rtaw.lr": (float, 1e-4),
    "rtaw.lambda_ide": (float, 0.1),
    "rtaw.ide_form": (str, "full"),
    "rtaw.per_domain": (int, 0),  # 0 = all training samples
    "rtaw.seed": (int, 13),

    "classifier.steps": (int, 600),
    "classifier.batch": (int, 16),
    "classifier.lr": (float, 1e-3),
    "classifier.split": (float, 0.8),
    "classifier.seed": (int, 17),

    "eval.batch": (int, 16),
    "eval.policies": (str, "of:rtaw:image,of:rtaw:domain,ni:rtaw:image,"
                           "ni:rtaw:domain,of:uniform:image,of:classifier:image"),
    "eval.grid_samples": (int, 2),
}

_SECTION_OF = lambda key: key.split(".", 1)[0]  # noqa: E731

_DOMAIN_FIELDS = {"omega": _interval, "phi": _interval, "blur": _interval,
                  "gamma": float, "pool": str}


def _dynamic_parser(key):
    """Parser for domain.<n>.<field> keys beyond the three default domains."""
    parts = key.split(".")
    if (len(parts) == 3 and parts[0] == "domain" and parts[1].isdigit()
            and parts[2] in _DOMAIN_FIELDS):
        return _DOMAIN_FIELDS[parts[2]]
    return None


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def n_domains(self):
        return len({k.split(".")[1] for k in self.values if k.startswith("domain.")})

    def domain_specs(self):
        ids = sorted({int(k.split(".")[1]) for k in self.values
                      if k.startswith("domain.")})
        if ids != list(range(len(ids))):
            raise ValueError(f"domain ids must be contiguous from 0, got {ids}")
        specs = []
        for d in ids:
            for f in ("omega", "phi", "blur", "gamma", "pool"):
                if f"domain.{d}.{f}" not in self.values:
                    raise ValueError(f"domain {d} is missing field {f!r}")
            specs.append(DomainSpec(
                domain_id=d,
                omega_range=self[f"domain.{d}.omega"],
                phi_range=self[f"domain.{d}.phi"],
                blur_sigma_range=self[f"domain.{d}.blur"],
                gamma=self[f"domain.{d}.gamma"],
                base_image_pool=self[f"domain.{d}.pool"],
            ))
        return specs

    def target_spec(self):
        return DomainSpec(
            domain_id=0,
            omega_range=self["target.omega"],
            phi_range=self["target.phi"],
            blur_sigma_range=self["target.blur"],
            gamma=self["target.gamma"],
            base_image_pool=self["target.pool"],
        )

    def backbone_config(self):
        return BackboneConfig(width=self["backbone.width"],
                              depth=self["backbone.depth"],
                              ksize=self["backbone.ksize"],
                              activation=self["backbone.activation"])

    def loss_config(self):
        return LossConfig(lambda_fid=self["train.lambda_fid"],
                          lambda_rec=self["train.lambda_rec"],
                          grad_fidelity=self["train.grad_fidelity"])

    def train_config(self):
        return TrainConfig(steps=self["train.steps"], batch=self["train.batch"],
                           lr=self["train.lr"], cosine=self["train.cosine"],
                           loss=self.loss_config())

    def rtaw_config(self):
        return RTAWConfig(feature_dim=self["rtaw.feature_dim"],
                          proj_dim=self["rtaw.proj_dim"],
                          extractor_depth=self["rtaw.extractor_depth"],
                          base_channels=self["rtaw.base_channels"],
                          activation=self["rtaw.activation"],
                          steps=self["rtaw.steps"], batch=self["rtaw.batch"],
                          lr=self["rtaw.lr"], lambda_ide=self["rtaw.lambda_ide"],
                          ide_form=self["rtaw.ide_form"], loss=self.loss_config())

    def classifier_config(self):
        return ClassifierConfig(input_size=self["data.size"],
                                steps=self["classifier.steps"],
                                batch=self["classifier.batch"],
                                lr=self["classifier.lr"])

    def policies(self):
        return [CombinationPolicy.parse(p)
                for p in self["eval.policies"].split(",") if p.strip()]

    def validate(self):
        from .synthesis import validate_domain_specs
        if self.n_domains < 2:
            raise ValueError("need at least 2 source domains (leave-one-domain-out)")
        validate_domain_specs(self.domain_specs())
        self.target_spec().validate()
        self.backbone_config()
        self.policies()
        for key in ("data.train_per_domain", "data.eval_per_domain",
                    "data.target_count"):
            if self[key] < 0:
                raise ValueError(f"{key} must be >= 0")
        if not (0.0 < self["classifier.split"] < 1.0):
            raise ValueError("classifier.split must be in (0,1)")
        return self


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k: v for k, (_, v) in DEFAULTS.items()}).validate()


def parse_config(text) -> ExperimentConfig:
    """Parse config text over the defaults; unknown keys are errors."""
    values = {k: v for k, (_, v) in DEFAULTS.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in DEFAULTS:
            parser = DEFAULTS[key][0]
        else:
            parser = _dynamic_parser(key)
            if parser is None:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = parser(val)
        except Exception as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return ExperimentConfig(values).validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_lines(cfg: ExperimentConfig, sections=None):
    """Resolved `key = value` lines, sorted; optionally filtered by section."""
    lines = []
    for key in sorted(cfg.values):
        if sections is None or _SECTION_OF(key) in sections:
            lines.append(f"{key} = {_fmt(cfg.values[key])}")
    return lines


def section_hash(cfg: ExperimentConfig, sections, upstream=()):
    """Content hash of the given config sections plus upstream stage hashes."""
    h = hashlib.sha256()
    h.update(b"adanec-stage-v1\n")
    for line in config_lines(cfg, sections):
        h.update(line.encode() + b"\n")
    for up in upstream:
        h.update(up.encode() + b"\n")
    return h.hexdigest()
