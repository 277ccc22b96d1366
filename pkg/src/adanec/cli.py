"""Command-line entry point.

    adanec synth           --config <file> --out <dir> --seed <int> --count <int>
    adanec train-expert    --manifest <file> --domain <id|joint> --out <ckpt> --seed <int>
    adanec train-rtaw      --experts <ckpt...> --manifest <file> --out <ckpt>
                           --lambda 0.1 --seed <int>
    adanec domain-classify --manifest <file> --split 0.8 --seed <int> --report <path>
    adanec eval            --policy of|ni --level image|domain
                           --source rtaw|uniform|classifier --experts <ckpt...>
                           [--rtaw <ckpt>] [--classifier <ckpt>]
                           --manifest <file> --report <path>
    adanec pipeline        --config <file> [--out <dir>]

Exit code 0 on success; pipeline failures exit nonzero naming the stage.
"""

import argparse
import sys

import numpy as np


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="adanec",
        description="Domain-expert ensembles for single-image reflection removal",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--config", help="experiment config file (domain specs)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, required=True, help="samples per domain")

    p = sub.add_parser("train-expert", help="train one domain expert")
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", required=True, help="domain id or 'joint'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--config", help="experiment config file (backbone/train keys)")

    p = sub.add_parser("train-rtaw", help="train the expert-weighting module")
    p.add_argument("--experts", nargs="+", required=True,
                   help="expert checkpoints ordered by domain id")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lambda_ide", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=13)
    p.add_argument("--config", help="experiment config file (rtaw keys)")

    p = sub.add_parser("domain-classify", help="probe domain gaps with a classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--report", required=True)
    p.add_argument("--out", help="optional classifier checkpoint path")

    p = sub.add_parser("eval", help="evaluate one combination policy")
    p.add_argument("--policy", choices=["of", "ni"], required=True)
    p.add_argument("--level", choices=["image", "domain"], default="image")
    p.add_argument("--source", choices=["rtaw", "uniform", "classifier"],
                   default="rtaw")
    p.add_argument("--experts", nargs="+", required=True)
    p.add_argument("--rtaw")
    p.add_argument("--classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    p.add_argument("--config", help="experiment config file (defaults when omitted)")
    p.add_argument("--out", default="runs/default")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:  # surface a one-line error, nonzero exit
        print(f"adanec: error: {exc}", file=sys.stderr)
        return 1


def _load_cfg(path):
    from .config import default_config, load_config
    return load_config(path) if path else default_config()


def _dispatch(args):
    if args.command == "synth":
        from .synthesis import generate_dataset
        cfg = _load_cfg(args.config)
        man = generate_dataset(cfg.domain_specs(), args.count, args.seed,
                               args.out, height=cfg["data.size"],
                               width=cfg["data.size"])
        print(f"wrote {len(man.records)} records under {args.out}")
        return 0

    if args.command == "train-expert":
        from .backbone import JOINT, save_expert, train_expert
        from .synthesis import DatasetManifest
        cfg = _load_cfg(args.config)
        man = DatasetManifest.load(args.manifest)
        domain = JOINT if args.domain == "joint" else int(args.domain)
        expert = train_expert(man, domain, cfg.train_config(), args.seed,
                              backbone=cfg.backbone_config(), log=print)
        save_expert(expert, args.out)
        print(f"saved expert[{args.domain}] to {args.out}")
        return 0

    if args.command == "train-rtaw":
        from dataclasses import replace
        from .backbone import load_expert
        from .rtaw import save_rtaw, train_rtaw
        from .synthesis import DatasetManifest
        cfg = _load_cfg(args.config)
        rcfg = replace(cfg.rtaw_config(), lambda_ide=args.lambda_ide)
        experts = [load_expert(p) for p in args.experts]
        man = DatasetManifest.load(args.manifest)
        module = train_rtaw(experts, man, rcfg, args.seed,
                            per_domain=cfg["rtaw.per_domain"], log=print)
        save_rtaw(module, args.out, {"seed": args.seed})
        print(f"saved weighting module to {args.out}")
        return 0

    if args.command == "domain-classify":
        from .domaingap import accuracy_report, save_classifier, train_classifier
        from .synthesis import DatasetManifest
        man = DatasetManifest.load(args.manifest)
        clf, split = train_classifier(man, args.split, args.seed)
        rep = accuracy_report(clf, man, split)
        with open(args.report, "w") as fh:
            fh.write(rep.render() + "\n")
        if args.out:
            save_classifier(clf, args.out, {"seed": args.seed})
        print(rep.render())
        return 0

    if args.command == "eval":
        from .backbone import load_expert
        from .combination import CombinationPolicy, run_policy
        from .domaingap import load_classifier
        from .imaging import psnr, ssim
        from .rtaw import load_rtaw
        from .synthesis import DatasetManifest
        policy = CombinationPolicy(mode=args.policy, level=args.level,
                                   weight_source=args.source).validate()
        experts = [load_expert(p) for p in args.experts]
        rtaw = load_rtaw(args.rtaw) if args.rtaw else None
        clf = load_classifier(args.classifier) if args.classifier else None
        man = DatasetManifest.load(args.manifest)
        samples = [man.load_sample(i) for i in range(len(man.records))]
        ids = [man.sample_id(i) for i in range(len(man.records))]
        preds, wlog = run_policy(policy, experts, rtaw, clf,
                                 [s.contaminated for s in samples], ids)
        ps = float(np.mean([psnr(p.transmission, s.transmission)
                            for p, s in zip(preds, samples)]))
        ss = float(np.mean([ssim(p.transmission, s.transmission)
                            for p, s in zip(preds, samples)]))
        with open(args.report, "w") as fh:
            fh.write(f"policy\t{policy.label}\n")
            fh.write(f"psnr\t{ps:.6f}\nssim\t{ss:.6f}\nn\t{len(preds)}\n")
            for sid, w in wlog:
                fh.write(sid + "\t" + ",".join(f"{x:.6f}" for x in w) + "\n")
        print(f"{policy.label}: psnr {ps:.2f} dB, ssim {ss:.4f} "
              f"({len(preds)} images)")
        return 0

    if args.command == "pipeline":
        from .harness import StageError, run_pipeline
        cfg = _load_cfg(args.config)
        try:
            report = run_pipeline(cfg, args.out, log=print)
        except StageError as exc:
            print(f"adanec: pipeline failed at stage {exc.stage!r}: {exc}",
                  file=sys.stderr)
            return 2
        print(report.render_text())
        return 0

    raise ValueError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
