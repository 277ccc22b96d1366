"""End-to-end pipeline: synthesize, train experts, train the weighting
module, probe domain gaps, and evaluate combination policies.

Stages write their artifacts under the output directory and record a
content hash of the config sections they depend on (plus upstream stage
hashes); a rerun skips any stage whose hash and artifacts are intact.

Derived seeds: train/eval/target datasets use data.seed, data.seed+1,
data.seed+2; the joint expert uses train.seed and expert d uses
train.seed+1+d.

Stage wall times are written to stage_times.txt, which is informational
and excluded from the deterministic report files.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import (JOINT, Prediction, load_expert, predict_batch,
                       save_expert, train_expert)
from .combination import run_policy
from .config import ExperimentConfig, config_lines, section_hash
from .domaingap import (accuracy_report, load_classifier, save_classifier,
                        train_classifier)
from .imaging import psnr, save_png, ssim
from .rtaw import load_rtaw, save_rtaw, train_rtaw
from .synthesis import DatasetManifest, generate_dataset, spec_overlaps

__all__ = ["EvalRow", "EvalReport", "StageError", "run_pipeline",
           "pseudo_target_eval"]


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class EvalRow:
    method: str
    domain: str
    psnr: float
    ssim: float
    count: int


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    stage_seconds: dict = field(default_factory=dict)

    def methods(self):
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def domains(self):
        seen = []
        for r in self.rows:
            if r.domain not in seen:
                seen.append(r.domain)
        return seen

    def row(self, method, domain):
        for r in self.rows:
            if r.method == method and r.domain == domain:
                return r
        raise KeyError(f"no report row for ({method}, {domain})")

    def source_average(self, method):
        """Mean PSNR/SSIM over the source-domain rows of one method."""
        rows = [r for r in self.rows
                if r.method == method and r.domain.startswith("domain_")]
        if not rows:
            raise KeyError(f"no source rows for method {method}")
        return (float(np.mean([r.psnr for r in rows])),
                float(np.mean([r.ssim for r in rows])))

    def deltas_vs_joint(self, domain="target"):
        """PSNR difference of every non-baseline method against 'joint'."""
        base = self.row("joint", domain).psnr
        out = {}
        for m in self.methods():
            if m == "joint" or m.startswith("expert_"):
                continue
            out[m] = self.row(m, domain).psnr - base
        return out

    def to_tsv(self):
        lines = ["method\tdomain\tpsnr\tssim\tn"]
        for r in self.rows:
            lines.append(f"{r.method}\t{r.domain}\t{r.psnr:.6f}\t{r.ssim:.6f}"
                         f"\t{r.count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        rows = []
        for line in text.strip().splitlines()[1:]:
            m, d, p, s, n = line.split("\t")
            rows.append(EvalRow(m, d, float(p), float(s), int(n)))
        return cls(rows=rows)

    def render_text(self):
        domains = self.domains()
        name_w = max(len(m) for m in self.methods()) + 2
        col_w = 16
        head = "method".ljust(name_w) + "".join(d.rjust(col_w) for d in domains)
        head += "avg_sources".rjust(col_w)
        lines = [head, "-" * len(head)]
        for m in self.methods():
            cells = []
            for d in domains:
                r = self.row(m, d)
                cells.append(f"{r.psnr:.2f}/{r.ssim:.3f}".rjust(col_w))
            ap, asim = self.source_average(m)
            cells.append(f"{ap:.2f}/{asim:.3f}".rjust(col_w))
            lines.append(m.ljust(name_w) + "".join(cells))
        lines.append("")
        lines.append("PSNR deltas vs joint baseline (target domain):")
        for m, dv in self.deltas_vs_joint("target").items():
            lines.append(f"  {m}: {dv:+.2f} dB")
        if self.warnings:
            lines.append("")
            lines.append("warnings:")
            for w in self.warnings:
                lines.append(f"  {w}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# stage plumbing
# ---------------------------------------------------------------------------

def _stage_paths(out_dir):
    return {
        "snapshot": os.path.join(out_dir, "config_snapshot.txt"),
        "hashes": os.path.join(out_dir, "stages"),
        "train_man": os.path.join(out_dir, "data", "train", "manifest.txt"),
        "eval_man": os.path.join(out_dir, "data", "eval", "manifest.txt"),
        "target_man": os.path.join(out_dir, "data", "target", "manifest.txt"),
        "warnings": os.path.join(out_dir, "data", "target", "warnings.txt"),
        "models": os.path.join(out_dir, "models"),
        "report_dir": os.path.join(out_dir, "report"),
        "report_tsv": os.path.join(out_dir, "report", "report.tsv"),
        "report_txt": os.path.join(out_dir, "report", "report.txt"),
        "domain_gap": os.path.join(out_dir, "report", "domain_gap.txt"),
        "times": os.path.join(out_dir, "stage_times.txt"),
    }


def _run_stage(out_dir, name, stage_hash, artifacts, build, log, times):
    hash_path = os.path.join(out_dir, "stages", f"{name}.hash")
    if os.path.exists(hash_path) and all(os.path.exists(a) for a in artifacts):
        with open(hash_path) as fh:
            if fh.read().strip() == stage_hash:
                log(f"[{name}] cached, skipping")
                times[name] = 0.0
                return
    log(f"[{name}] running")
    t0 = time.perf_counter()
    try:
        build()
    except Exception as exc:
        raise StageError(name, exc) from exc
    times[name] = time.perf_counter() - t0
    os.makedirs(os.path.dirname(hash_path), exist_ok=True)
    with open(hash_path, "w") as fh:
        fh.write(stage_hash + "\n")
    log(f"[{name}] done in {times[name]:.1f}s")


def stage_hashes(cfg: ExperimentConfig):
    """Per-stage content hashes; a stage changes iff its sections or an
    upstream stage change."""
    h = {}
    h["synth"] = section_hash(cfg, {"data", "domain", "target"})
    h["experts"] = section_hash(cfg, {"backbone", "train"}, [h["synth"]])
    h["rtaw"] = section_hash(cfg, {"rtaw"}, [h["experts"]])
    h["classifier"] = section_hash(cfg, {"classifier"}, [h["synth"]])
    h["eval"] = section_hash(cfg, {"eval"},
                             [h["experts"], h["rtaw"], h["classifier"]])
    return h


def _expert_paths(models_dir, n):
    paths = {JOINT: os.path.join(models_dir, "expert_joint.ckpt")}
    for d in range(n):
        paths[d] = os.path.join(models_dir, f"expert_{d}.ckpt")
    return paths


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, out_dir, log=None) -> EvalReport:
    """Run every stage (with caching) and return the evaluation report."""
    log = log or (lambda msg: None)
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    paths = _stage_paths(out_dir)
    with open(paths["snapshot"], "w") as fh:
        fh.write("\n".join(config_lines(cfg)) + "\n")

    hashes = stage_hashes(cfg)
    times = {}
    n = cfg.n_domains
    size = cfg["data.size"]
    specs = cfg.domain_specs()
    target = cfg.target_spec()

    # --- synth ------------------------------------------------------------
    def build_synth():
        seed = cfg["data.seed"]
        generate_dataset(specs, cfg["data.train_per_domain"], seed,
                         os.path.dirname(paths["train_man"]),
                         height=size, width=size)
        generate_dataset(specs, cfg["data.eval_per_domain"], seed + 1,
                         os.path.dirname(paths["eval_man"]),
                         height=size, width=size)
        tgt = _retarget_spec(target)
        generate_dataset([tgt], cfg["data.target_count"], seed + 2,
                         os.path.dirname(paths["target_man"]),
                         height=size, width=size)
        overlaps = spec_overlaps(target, specs)
        with open(paths["warnings"], "w") as fh:
            for d in overlaps:
                fh.write(f"target spec overlaps source domain {d} in every "
                         f"parameter range\n")

    _run_stage(out_dir, "synth", hashes["synth"],
               [paths["train_man"], paths["eval_man"], paths["target_man"],
                paths["warnings"]],
               build_synth, log, times)

    # --- experts ----------------------------------------------------------
    os.makedirs(paths["models"], exist_ok=True)
    expert_paths = _expert_paths(paths["models"], n)

    def build_experts():
        man = DatasetManifest.load(paths["train_man"])
        tc = cfg.train_config()
        bb = cfg.backbone_config()
        joint = train_expert(man, JOINT, tc, cfg["train.seed"], backbone=bb, log=log)
        save_expert(joint, expert_paths[JOINT])
        parent = joint if cfg["train.warm_start"] else None
        for d in range(n):
            e = train_expert(man, d, tc, cfg["train.seed"] + 1 + d,
                             backbone=bb, init_from=parent, log=log)
            save_expert(e, expert_paths[d])

    _run_stage(out_dir, "experts", hashes["experts"],
               list(expert_paths.values()), build_experts, log, times)

    # --- rtaw ---------------------------------------------------------------
    rtaw_path = os.path.join(paths["models"], "rtaw.ckpt")

    def build_rtaw():
        man = DatasetManifest.load(paths["train_man"])
        experts = [load_expert(expert_paths[d]) for d in range(n)]
        module = train_rtaw(experts, man, cfg.rtaw_config(), cfg["rtaw.seed"],
                            per_domain=cfg["rtaw.per_domain"], log=log)
        save_rtaw(module, rtaw_path, {"seed": cfg["rtaw.seed"],
                                      "steps": cfg["rtaw.steps"]})

    _run_stage(out_dir, "rtaw", hashes["rtaw"], [rtaw_path], build_rtaw, log, times)

    # --- classifier ---------------------------------------------------------
    clf_path = os.path.join(paths["models"], "classifier.ckpt")
    split_path = os.path.join(paths["models"], "classifier_split.txt")

    def build_classifier():
        man = DatasetManifest.load(paths["train_man"])
        clf, split = train_classifier(man, cfg["classifier.split"],
                                      cfg["classifier.seed"],
                                      cfg.classifier_config())
        save_classifier(clf, clf_path, {"seed": cfg["classifier.seed"]})
        with open(split_path, "w") as fh:
            fh.write("train\t" + ",".join(map(str, split["train"])) + "\n")
            fh.write("test\t" + ",".join(map(str, split["test"])) + "\n")
        os.makedirs(paths["report_dir"], exist_ok=True)
        rep = accuracy_report(clf, man, split)
        with open(paths["domain_gap"], "w") as fh:
            fh.write(rep.render() + "\n")

    _run_stage(out_dir, "classifier", hashes["classifier"],
               [clf_path, split_path, paths["domain_gap"]],
               build_classifier, log, times)

    # --- eval ---------------------------------------------------------------
    def build_eval():
        _evaluate(cfg, paths, expert_paths, rtaw_path, clf_path, log)

    _run_stage(out_dir, "eval", hashes["eval"],
               [paths["report_tsv"], paths["report_txt"]], build_eval, log, times)

    with open(paths["times"], "w") as fh:
        for k, v in times.items():
            fh.write(f"{k}\t{v:.3f}\n")

    with open(paths["report_tsv"]) as fh:
        report = EvalReport.from_tsv(fh.read())
    if os.path.exists(paths["warnings"]):
        with open(paths["warnings"]) as fh:
            report.warnings = [ln.strip() for ln in fh if ln.strip()]
    report.stage_seconds = times
    return report


def _retarget_spec(spec):
    """The target manifest stands alone, so its single domain gets id 0."""
    from dataclasses import replace
    return replace(spec, domain_id=0)


def _eval_sets(cfg, paths):
    eval_man = DatasetManifest.load(paths["eval_man"])
    target_man = DatasetManifest.load(paths["target_man"])
    sets = []
    for d in range(eval_man.n_domains):
        idx = eval_man.indices_for_domain(d)
        sets.append((f"domain_{d}", eval_man, idx))
    sets.append(("target", target_man, list(range(len(target_man.records)))))
    return sets


def _evaluate(cfg, paths, expert_paths, rtaw_path, clf_path, log):
    n = cfg.n_domains
    experts = [load_expert(expert_paths[d]) for d in range(n)]
    joint = load_expert(expert_paths[JOINT])
    rtaw = load_rtaw(rtaw_path) if os.path.exists(rtaw_path) else None
    clf = load_classifier(clf_path) if os.path.exists(clf_path) else None
    policies = cfg.policies()
    batch = cfg["eval.batch"]
    os.makedirs(paths["report_dir"], exist_ok=True)
    grid_dir = os.path.join(paths["report_dir"], "grids")
    os.makedirs(grid_dir, exist_ok=True)

    rows = []
    for set_name, man, idx in _eval_sets(cfg, paths):
        if not idx:
            continue
        samples = [man.load_sample(i) for i in idx]
        ids = [man.sample_id(i) for i in idx]
        imgs = np.stack([s.contaminated for s in samples]).astype(np.float32)
        gts = [s.transmission for s in samples]

        def metric_rows(method, preds):
            ps = float(np.mean([psnr(p.transmission, g)
                                for p, g in zip(preds, gts)]))
            ss = float(np.mean([ssim(p.transmission, g)
                                for p, g in zip(preds, gts)]))
            rows.append(EvalRow(method, set_name, ps, ss, len(preds)))

        def batched_preds(model):
            out = []
            for lo in range(0, imgs.shape[0], batch):
                t, r = predict_batch(model, imgs[lo:lo + batch])
                out.extend(Prediction(t[i], r[i]) for i in range(t.shape[0]))
            return out

        joint_preds = batched_preds(joint)
        metric_rows("joint", joint_preds)
        expert_preds = {}
        for d in range(n):
            expert_preds[d] = batched_preds(experts[d])
            metric_rows(f"expert_{d}", expert_preds[d])

        policy_preds = {}
        for pol in policies:
            preds, wlog = run_policy(pol, experts, rtaw, clf, list(imgs), ids,
                                     batch=batch)
            policy_preds[pol.label] = preds
            metric_rows(pol.label, preds)
            wlog_path = os.path.join(paths["report_dir"],
                                     f"weights_{pol.label}_{set_name}.log")
            with open(wlog_path, "w") as fh:
                for sid, w in wlog:
                    fh.write(sid + "\t" + ",".join(f"{x:.6f}" for x in w) + "\n")

        _write_grids(grid_dir, set_name, cfg["eval.grid_samples"], samples,
                     expert_preds, joint_preds, policy_preds, n)
        log(f"[eval] {set_name}: {len(samples)} images, "
            f"{len(policies) + 1 + n} methods")

    report = EvalReport(rows=rows)
    with open(paths["report_tsv"], "w") as fh:
        fh.write(report.to_tsv())
    if os.path.exists(paths["warnings"]):
        with open(paths["warnings"]) as fh:
            report.warnings = [ln.strip() for ln in fh if ln.strip()]
    with open(paths["report_txt"], "w") as fh:
        fh.write(report.render_text())


def _write_grids(grid_dir, set_name, k, samples, expert_preds, joint_preds,
                 policy_preds, n):
    """Qualitative strips: input | experts | joint | OF | NI | ground truth."""
    if k <= 0:
        return
    of_label = next((l for l in policy_preds if l.startswith("of_rtaw")), None)
    ni_label = next((l for l in policy_preds if l.startswith("ni_rtaw")), None)
    caption = ["input"] + [f"expert_{d}" for d in range(n)] + ["joint"]
    caption += [of_label or "-", ni_label or "-", "ground_truth"]
    with open(os.path.join(grid_dir, "columns.txt"), "w") as fh:
        fh.write(" | ".join(c for c in caption if c != "-") + "\n")
    for i in range(min(k, len(samples))):
        cols = [samples[i].contaminated]
        cols += [expert_preds[d][i].transmission for d in range(n)]
        cols.append(joint_preds[i].transmission)
        if of_label:
            cols.append(policy_preds[of_label][i].transmission)
        if ni_label:
            cols.append(policy_preds[ni_label][i].transmission)
        cols.append(samples[i].transmission)
        h = cols[0].shape[0]
        sep = np.ones((h, 2, 3))
        strip = cols[0]
        for c in cols[1:]:
            strip = np.concatenate([strip, sep, np.clip(c, 0.0, 1.0)], axis=1)
        save_png(np.clip(strip, 0.0, 1.0),
                 os.path.join(grid_dir, f"{set_name}_{i:02d}.png"))


def pseudo_target_eval(cfg: ExperimentConfig, out_dir, log=None) -> EvalReport:
    """Evaluate all policies on the held-out target domain only.

    Reuses (or builds) the pipeline artifacts, then filters the report to
    the target rows.
    """
    full = run_pipeline(cfg, out_dir, log=log)
    rows = [r for r in full.rows if r.domain == "target"]
    return EvalReport(rows=rows, warnings=full.warnings,
                      stage_seconds=full.stage_seconds)
