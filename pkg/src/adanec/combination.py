"""Inference-time expert combination.

Output fusion runs every expert and blends the outputs; network
interpolation blends the parameters once and runs a single forward pass.
Weights come from the trained weighting module, a plain uniform average,
or a domain classifier's posterior, applied per image or once per domain
(mean weights over the evaluation set).
"""

from dataclasses import dataclass

import numpy as np

from .backbone import ExpertModel, Prediction, predict, predict_batch
from .rtaw import WeightVector, fuse_outputs, weights_for_batch

__all__ = [
    "CombinationPolicy",
    "combine_of",
    "interpolate_params",
    "combine_ni",
    "domain_weights",
    "run_policy",
]

MODES = ("of", "ni")
LEVELS = ("image", "domain")
SOURCES = ("rtaw", "uniform", "classifier")


@dataclass(frozen=True)
class CombinationPolicy:
    mode: str
    level: str
    weight_source: str

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.weight_source not in SOURCES:
            raise ValueError(
                f"weight_source must be one of {SOURCES}, got {self.weight_source!r}"
            )
        return self

    @property
    def label(self):
        return f"{self.mode}_{self.weight_source}_{self.level}"

    @classmethod
    def parse(cls, text):
        """Parse 'mode:source:level', e.g. 'of:rtaw:domain'."""
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"policy must be mode:source:level, got {text!r}")
        return cls(mode=parts[0], weight_source=parts[1], level=parts[2]).validate()


def _check_weights(experts, w: WeightVector):
    if w.excluded_index is not None:
        raise ValueError("combination needs full weights over all experts")
    if len(experts) != w.weights.size:
        raise ValueError(f"{len(experts)} experts vs {w.weights.size} weights")
    # one-hot vectors are legal here, so zeros are allowed (unlike softmax output)
    if np.any(w.weights < 0.0) or np.any(w.weights > 1.0):
        raise ValueError(f"weights must lie in [0,1]: {w.weights}")
    if abs(float(w.weights.sum()) - 1.0) > 1e-6:
        raise ValueError(f"weights must sum to 1, got {float(w.weights.sum())!r}")


def combine_of(experts, rtaw, img, w: WeightVector) -> Prediction:
    """Output fusion: run all experts, blend the outputs under w."""
    _check_weights(experts, w)
    preds = [predict(e, img) for e in experts]
    return fuse_outputs(preds, w)


def interpolate_params(experts, w: WeightVector) -> ExpertModel:
    """Convex combination of expert parameters; all experts must align."""
    _check_weights(experts, w)
    ref = experts[0]
    ref_shapes = {k: v.shape for k, v in ref.params.items()}
    for e in experts[1:]:
        shapes = {k: v.shape for k, v in e.params.items()}
        if shapes != ref_shapes:
            for name in sorted(set(ref_shapes) | set(shapes)):
                if ref_shapes.get(name) != shapes.get(name):
                    raise ValueError(
                        f"experts are not interpolation-compatible: parameter "
                        f"{name!r} is {ref_shapes.get(name)} vs {shapes.get(name)}"
                    )
    blended = {}
    for name in ref.params:
        acc = np.zeros(ref.params[name].shape, dtype=np.float64)
        for wi, e in zip(w.weights, experts):
            acc += wi * e.params[name].astype(np.float64)
        blended[name] = acc.astype(ref.params[name].dtype)
    meta = {"interpolated": True,
            "weights": ",".join(f"{x:.6f}" for x in w.weights),
            "sources": ",".join(str(e.domain_id) for e in experts)}
    return ExpertModel(arch=ref.arch, params=blended, domain_id="interpolated",
                       training_meta=meta).validate()


def combine_ni(experts, rtaw, img, w: WeightVector) -> Prediction:
    """Network interpolation: blend parameters, then one forward pass."""
    return predict(interpolate_params(experts, w), img)


def domain_weights(rtaw, experts, images) -> WeightVector:
    """Mean of per-image full-softmax weights over an evaluation set."""
    if len(images) == 0:
        raise ValueError("domain-level weighting needs at least one image")
    rows = weights_for_batch(rtaw, np.stack([np.asarray(im) for im in images]))
    if rows.shape[1] != len(experts):
        raise ValueError(f"{rows.shape[1]} weights vs {len(experts)} experts")
    return WeightVector(rows.mean(axis=0), None).validate()


def _weight_rows(policy, experts, rtaw, classifier, imgs):
    n = len(experts)
    if policy.weight_source == "rtaw":
        if rtaw is None:
            raise ValueError("policy needs a trained weighting module")
        return weights_for_batch(rtaw, imgs)
    if policy.weight_source == "uniform":
        return np.full((imgs.shape[0], n), 1.0 / n)
    if policy.weight_source == "classifier":
        if classifier is None:
            raise ValueError("policy needs a trained domain classifier")
        from .domaingap import posteriors_for_batch
        rows = posteriors_for_batch(classifier, imgs)
        if rows.shape[1] != n:
            raise ValueError(
                f"classifier predicts {rows.shape[1]} domains but {n} experts given"
            )
        return rows
    raise ValueError(f"unknown weight source {policy.weight_source!r}")


def run_policy(policy: CombinationPolicy, experts, rtaw, classifier,
               images, sample_ids=None, batch=16):
    """Evaluate one combination policy over an image list.

    Returns (predictions, weight_log) where weight_log is a list of
    (sample_id or 'DOMAIN', weight array) pairs, one per weighting decision.
    """
    policy.validate()
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(images))]
    imgs = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    rows = _weight_rows(policy, experts, rtaw, classifier, imgs)

    if policy.level == "domain":
        mean_w = WeightVector(rows.mean(axis=0), None).validate()
        weight_log = [("DOMAIN", mean_w.weights.copy())]
        if policy.mode == "ni":
            model = interpolate_params(experts, mean_w)
            preds = _predict_all(model, imgs, batch)
        else:
            preds = _fuse_all(experts, imgs, np.tile(mean_w.weights, (len(images), 1)),
                              batch)
        return preds, weight_log

    weight_log = [(sid, rows[i].copy()) for i, sid in enumerate(sample_ids)]
    if policy.mode == "ni":
        preds = []
        for i in range(len(images)):
            w = WeightVector(rows[i], None).validate()
            model = interpolate_params(experts, w)
            t, r = predict_batch(model, imgs[i:i + 1])
            preds.append(Prediction(t[0], r[0]))
        return preds, weight_log
    return _fuse_all(experts, imgs, rows, batch), weight_log


def _predict_all(model, imgs, batch):
    preds = []
    for lo in range(0, imgs.shape[0], batch):
        t, r = predict_batch(model, imgs[lo:lo + batch])
        preds.extend(Prediction(t[i], r[i]) for i in range(t.shape[0]))
    return preds


def _fuse_all(experts, imgs, rows, batch):
    preds = []
    for lo in range(0, imgs.shape[0], batch):
        hi = min(lo + batch, imgs.shape[0])
        outs = [predict_batch(e, imgs[lo:hi]) for e in experts]
        for i in range(hi - lo):
            w = WeightVector(rows[lo + i], None).validate()
            t = sum(wi * outs[j][0][i] for j, wi in enumerate(w.weights))
            r = sum(wi * outs[j][1][i] for j, wi in enumerate(w.weights))
            preds.append(Prediction(t, r))
    return preds
