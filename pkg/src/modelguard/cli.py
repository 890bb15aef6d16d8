"""Command-line harness.

Output directory layout (also written to ``<out>/layout.json``)::

    checkpoints/           baseline.ckpt, <tag>.ckpt
    specs/                 <tag>.json watermark specs (owner secret)
    fingerprints/          manifest.json, user_NNNN/image.npy
    reports/               CSV reports, config.json (resolved config of the last
                           command), metadata.json (timestamps only)

Exit codes: 0 success, 1 contract failure (e.g. watermark mismatch),
2 usage or configuration error, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import attacks as atk
from .authorization import (AuthenticationError, authenticate, authentication_rates, authorized_predict,
                            open_session, unauthorized_predict)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import IngestionError, load_mnist
from .fingerprint import AuthPolicy, FingerprintLibrary, GenConfig, allocation_for, build_library
from .models import build
from .training import TrainConfig, evaluate, train
from .watermark import WatermarkSpec, digits_from_string, embed, embed_with_spec, extract, plan_watermark

log = logging.getLogger("modelguard")

LAYOUT = {
    "checkpoints/": "model checkpoints (MGCK container, see modelguard.checkpoint)",
    "specs/": "watermark specs, JSON, one per tag; the owner's secret evidence",
    "fingerprints/": "fingerprint library: manifest.json plus user_NNNN/image.npy (float32, HWC)",
    "reports/": "CSV reports with fixed column order; config.json holds the resolved config, "
                  "metadata.json holds timestamps",
}


class DependencyError(Exception):
    pass


@dataclass
class Layout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def checkpoints(self):
        return self.root / "checkpoints"

    @property
    def specs(self):
        return self.root / "specs"

    @property
    def fingerprints(self):
        return self.root / "fingerprints"

    @property
    def reports(self):
        return self.root / "reports"

    def create(self):
        for d in (self.checkpoints, self.specs, self.fingerprints, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        (self.root / "layout.json").write_text(json.dumps(LAYOUT, indent=2, sort_keys=True) + "\n")

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise DependencyError(f"{path} is missing; run `{hint}` first")
        return path


def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def stamp(layout: Layout, command: str, cfg: ExperimentConfig) -> None:
    meta_path = layout.reports / "metadata.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta[command] = {"finished": time.strftime("%Y-%m-%dT%H:%M:%S"), "config_hash": cfg.digest()}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def train_config(cfg: ExperimentConfig, epochs: int | None = None, seed: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=epochs or t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                       optimizer=t.optimizer, momentum=t.momentum, seed=cfg.seed if seed is None else seed)


def policy_of(cfg: ExperimentConfig) -> AuthPolicy:
    p = cfg.policy
    return AuthPolicy(tuple(p.legal_classes), tuple(p.confidences), p.tolerance)


def gen_config(cfg: ExperimentConfig) -> GenConfig:
    g = cfg.generation
    return GenConfig(learning_rate=g.learning_rate, alpha_range=tuple(g.alpha_range), initial_alpha=g.initial_alpha,
                     max_iterations=g.max_iterations, tolerance=g.tolerance, search_steps=g.search_steps,
                     random_start=g.random_start)


def load_data(cfg: ExperimentConfig):
    if cfg.model != "lenet5":
        raise ConfigError("model", "only the MNIST/LeNet-5 track has a dataset loader")
    return load_mnist(cfg.dataset)


def load_model(path: Path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise DependencyError(str(exc)) from exc


# -- commands -------------------------------------------------------------

def cmd_train(cfg, args, layout):
    train_data, test = load_data(cfg)
    model = build(cfg.model, seed=cfg.seed)
    report = train(model, train_data, train_config(cfg))
    acc = evaluate(model, test)
    h = cfg.digest()
    save_checkpoint(model, layout.checkpoints / "baseline.ckpt",
                    {"config_hash": h, "role": "baseline", "test_accuracy": acc})
    write_csv(layout.reports / "train.csv",
              ["model", "epochs", "test_accuracy", "train_accuracy", "final_loss", "seed", "config_hash"],
              [{"model": cfg.model, "epochs": cfg.train.epochs, "test_accuracy": f"{acc:.6f}",
                "train_accuracy": f"{report.final_accuracy:.6f}", "final_loss": f"{report.loss_history[-1]:.6f}",
                "seed": cfg.seed, "config_hash": h}])
    print(f"baseline test accuracy {acc:.4f}")
    return 0


def cmd_embed(cfg, args, layout):
    wm = cfg.watermark
    h = cfg.digest()
    if wm.mode == "fine-tune":
        model = load_model(layout.require(layout.checkpoints / "baseline.ckpt", "modelguard train"))
        tcfg = train_config(cfg, epochs=wm.finetune_epochs, seed=cfg.seed + 1)
    else:
        model = build(cfg.model, seed=cfg.seed + 1)
        tcfg = train_config(cfg, seed=cfg.seed + 1)
    train_data, test = load_data(cfg)
    result = embed(model, train_data, wm.digits, tcfg, mode=wm.mode, layer=wm.layer, strength=wm.strength,
                   seed=wm.seed, warmup_epochs=wm.warmup_epochs, eval_data=test)
    spec = result.spec
    spec.config_hash = h
    spec.save(layout.specs / f"{args.tag}.json")
    save_checkpoint(model, layout.checkpoints / f"{args.tag}.ckpt",
                    {"config_hash": h, "role": "watermarked", "tag": args.tag, "test_accuracy": result.accuracy})
    v = result.verification
    write_csv(layout.reports / f"embed-{args.tag}.csv",
              ["model", "mode", "epochs", "test_accuracy", "v_owner", "hamming", "layer", "component_index",
               "digits", "seed", "config_hash"],
              [{"model": cfg.model, "mode": wm.mode, "epochs": tcfg.epochs, "test_accuracy": f"{result.accuracy:.6f}",
                "v_owner": "success" if v.matched else "failure", "hamming": v.hamming, "layer": spec.layer,
                "component_index": spec.component_index, "digits": "".join(map(str, spec.digits)),
                "seed": spec.seed, "config_hash": h}])
    print(f"watermarked test accuracy {result.accuracy:.4f}; verification {'success' if v.matched else 'failure'}")
    return 0 if v.matched else 1


def cmd_extract(cfg, args, layout):
    ckpt = Path(args.checkpoint) if args.checkpoint else layout.checkpoints / f"{args.tag}.ckpt"
    spec_path = Path(args.spec) if args.spec else layout.specs / f"{args.tag}.json"
    model = load_model(layout.require(ckpt, "modelguard embed"))
    spec = WatermarkSpec.load(layout.require(spec_path, "modelguard embed"))
    v = extract(model, spec)
    write_csv(layout.reports / f"extract-{ckpt.stem}.csv",
              ["checkpoint", "spec", "expected", "extracted", "matched", "hamming", "config_hash"],
              [{"checkpoint": ckpt.name, "spec": spec_path.name, "expected": "".join(map(str, spec.digits)),
                "extracted": "".join(map(str, v.digits)), "matched": str(v.matched).lower(), "hamming": v.hamming,
                "config_hash": cfg.digest()}])
    print(f"extracted {''.join(map(str, v.digits))} expected {''.join(map(str, spec.digits))} "
          f"-> {'match' if v.matched else 'MISMATCH'}")
    return 0 if v.matched else 1


def parse_fos(text: str | None, policy: AuthPolicy) -> list[tuple[int, float]]:
    if not text:
        return [fo for _, fo in sorted(allocation_for(policy).items())]
    out = []
    for item in text.split(","):
        t, c = item.split(":")
        out.append((int(t), float(c)))
    return out


def cmd_genfp(cfg, args, layout):
    ckpt = Path(args.checkpoint) if args.checkpoint else layout.checkpoints / f"{args.tag}.ckpt"
    model = load_model(layout.require(ckpt, "modelguard embed"))
    _, test = load_data(cfg)
    policy, gcfg, h = policy_of(cfg), gen_config(cfg), cfg.digest()
    library = build_library(model, test, policy, gcfg, seed=cfg.seed, retries=cfg.generation.retries)
    library.config_hash = h
    library.save(layout.fingerprints)
    rows = []
    if cfg.generation.eval_per_fo > 0:
        rows, _ = authentication_rates(model, test, policy, gcfg, parse_fos(args.fos, policy),
                               cfg.generation.eval_per_fo, cfg.seed + 1)
    for r in rows:
        r["config_hash"] = h
        r["success_rate"] = f"{r['success_rate']:.6f}"
    write_csv(layout.reports / "fingerprints.csv",
              ["user_id", "target", "confidence", "generated", "authenticated", "success_rate", "config_hash"], rows)
    print(f"library: {len(library)} fingerprints, {len(library.failures)} failures")
    return 0 if not library.failures else 1


def cmd_auth(cfg, args, layout):
    ckpt = Path(args.checkpoint) if args.checkpoint else layout.checkpoints / f"{args.tag}.ckpt"
    model = load_model(layout.require(ckpt, "modelguard embed"))
    library = FingerprintLibrary.load(
        layout.require(layout.fingerprints / "manifest.json", "modelguard genfp").parent)
    _, test = load_data(cfg)
    policy = library.policy or policy_of(cfg)
    allocation = allocation_for(policy)
    h = cfg.digest()
    rows, failures = [], 0
    for uid, rec in sorted(library.records.items()):
        try:
            got = authenticate(rec, model, policy, allocation)
        except AuthenticationError:
            got = None
        failures += got != uid
        rows.append({"user_id": uid, "target": rec.target, "confidence": rec.confidence,
                     "authenticated_as": "" if got is None else got, "ok": str(got == uid).lower(),
                     "config_hash": h})
    write_csv(layout.reports / "authentication.csv",
              ["user_id", "target", "confidence", "authenticated_as", "ok", "config_hash"], rows)
    if not library.records:
        raise DependencyError("fingerprint library is empty")
    first = library.records[min(library.records)]
    session = open_session(model, first.image, policy, allocation)
    authorized_acc = float("nan")
    if session.granted:
        labels, _ = authorized_predict(session, model, test.pixels)
        authorized_acc = float(np.mean(labels == test.labels))
    labels = unauthorized_predict(model, test.pixels, policy, np.random.default_rng(cfg.seed))
    unauthorized_acc = float(np.mean(labels == test.labels))
    write_csv(layout.reports / "authorization.csv", ["path", "accuracy", "samples", "config_hash"], [
        {"path": "authorized", "accuracy": f"{authorized_acc:.6f}", "samples": len(test), "config_hash": h},
        {"path": "unauthorized", "accuracy": f"{unauthorized_acc:.6f}", "samples": len(test), "config_hash": h},
    ])
    print(f"{len(rows) - failures}/{len(rows)} fingerprints authenticated; "
          f"authorized accuracy {authorized_acc:.4f}, unauthorized accuracy {unauthorized_acc:.4f}")
    return 0 if failures == 0 and session.granted else 1


def cmd_attack(cfg, args, layout):
    model = load_model(layout.require(layout.checkpoints / f"{args.tag}.ckpt", "modelguard embed"))
    spec = WatermarkSpec.load(layout.require(layout.specs / f"{args.tag}.json", "modelguard embed"))
    _, test = load_data(cfg)
    a, h = cfg.attacks, cfg.digest()
    policy = policy_of(cfg)
    reports = [
        atk.forgery_attack(model, policy, test, "clean", min(a.forgery_budget, len(test)), seed=cfg.seed),
        atk.forgery_attack(model, policy, test, "fgsm", min(a.forgery_budget, len(test)), eps=a.fgsm_eps,
                           seed=cfg.seed),
    ]
    if a.cw_budget > 0:
        reports.append(atk.forgery_attack(model, policy, test, "cw", min(a.cw_budget, len(test)), seed=cfg.seed))
    attack_data = test.head(a.finetune_samples)
    for epochs in a.finetune_epochs:
        reports.append(atk.finetune_attack(model, attack_data, epochs, spec, train_config(cfg), test,
                                           seed=cfg.seed)[0])
    reports.extend(atk.prune_sweep(model, spec, test, a.prune_rates))
    for r in reports:
        r.seed, r.config_hash = cfg.seed, h
    out = layout.reports / f"attacks-{args.tag}.csv"
    out.unlink(missing_ok=True)
    atk.append_csv(out, reports)
    for r in reports:
        print(r.attack, json.dumps(r.params, sort_keys=True), r.row()["accuracy"], r.row()["wm_matched"],
              r.row()["forgery_rate"])
    return 0


def cmd_report(cfg, args, layout):
    rep = layout.reports
    h = cfg.digest()
    written = []
    fp = rep / "fingerprints.csv"
    if fp.exists():
        rows = read_csv(fp)
        classes = sorted({int(r["target"]) for r in rows})
        table = []
        for c in sorted({r["confidence"] for r in rows}, key=float):
            line = {"confidence": c}
            for k in classes:
                hit = [r for r in rows if r["confidence"] == c and int(r["target"]) == k]
                line[str(k)] = f"{float(hit[0]['success_rate']):.4f}" if hit else ""
            table.append(line)
        written.append(write_csv(rep / "table2_fingerprints.csv", ["confidence"] + [str(k) for k in classes], table))
    embeds = sorted(rep.glob("embed-*.csv"))
    if embeds:
        base = read_csv(rep / "train.csv")[0] if (rep / "train.csv").exists() else None
        rows = []
        if base:
            rows.append({"model": "baseline", "epochs": base["epochs"], "test_accuracy": base["test_accuracy"],
                         "accuracy_drop": "N/A", "v_owner": "N/A"})
        for path in embeds:
            e = read_csv(path)[0]
            drop = f"{float(base['test_accuracy']) - float(e['test_accuracy']):.6f}" if base else ""
            rows.append({"model": f"{path.stem[len('embed-'):]} ({e['mode']})", "epochs": e["epochs"],
                         "test_accuracy": e["test_accuracy"], "accuracy_drop": drop, "v_owner": e["v_owner"]})
        written.append(write_csv(rep / "table3_watermark.csv",
                                 ["model", "epochs", "test_accuracy", "accuracy_drop", "v_owner"], rows))
    attack_files = sorted(rep.glob("attacks-*.csv"))
    if attack_files:
        forgery, finetune, pruning = [], [], {}
        for path in attack_files:
            tag = path.stem[len("attacks-"):]
            for r in read_csv(path):
                params = json.loads(r["params"])
                v_owner = {"true": "success", "false": "failure"}.get(r["wm_matched"], "")
                if r["attack"].startswith("forgery-"):
                    forgery.append({"model": tag, "attack": r["attack"], "budget": params["budget"],
                                    "success_rate": r["forgery_rate"]})
                elif r["attack"] == "finetune":
                    finetune.append({"model": tag, "epochs": params["epochs"], "test_accuracy": r["accuracy"],
                                     "v_owner": v_owner})
                elif r["attack"] == "prune":
                    line = pruning.setdefault(params["rate"], {"rate": params["rate"]})
                    line[f"{tag}_accuracy"] = r["accuracy"]
                    line[f"{tag}_v_owner"] = v_owner
        written.append(write_csv(rep / "table4_forgery.csv", ["model", "attack", "budget", "success_rate"], forgery))
        written.append(write_csv(rep / "table5_finetune.csv", ["model", "epochs", "test_accuracy", "v_owner"],
                                 finetune))
        tags = [p.stem[len("attacks-"):] for p in attack_files]
        cols = ["rate"] + [f"{t}_{k}" for t in tags for k in ("accuracy", "v_owner")]
        written.append(write_csv(rep / "table6_pruning.csv", cols, [pruning[k] for k in sorted(pruning)]))
    if (rep / "authorization.csv").exists():
        rows = read_csv(rep / "authorization.csv")
        written.append(write_csv(rep / "fig5_authorization.csv", ["path", "accuracy"],
                                 [{"path": r["path"], "accuracy": r["accuracy"]} for r in rows]))
    if not written:
        raise DependencyError(f"no reports under {rep}; run the other commands first")
    (rep / "tables.json").write_text(json.dumps({"config_hash": h, "tables": sorted(p.name for p in written)},
                                                indent=2, sort_keys=True) + "\n")
    for p in written:
        print(p)
    return 0


COMMANDS = {"train": cmd_train, "embed": cmd_embed, "extract": cmd_extract, "genfp": cmd_genfp,
            "auth": cmd_auth, "attack": cmd_attack, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--full-fidelity", action="store_true", help="use full-scale experiment sizes")
    common.add_argument("--data", help="MNIST directory (default: $MODELGUARD_MNIST or data/mnist)")
    common.add_argument("--tag", default="watermarked", help="artifact name for the watermarked model")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="modelguard", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the clean baseline")
    p = sub.add_parser("embed", parents=[common], help="train a watermarked model")
    p.add_argument("--digits", help="watermark digits, e.g. 1234567890210")
    p.add_argument("--mode", choices=["from-scratch", "fine-tune"])
    p = sub.add_parser("extract", parents=[common], help="verify a watermark in a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--spec")
    p = sub.add_parser("genfp", parents=[common], help="build the fingerprint library")
    p.add_argument("--checkpoint")
    p.add_argument("--fos", help="FOs to evaluate, e.g. 0:0.2,4:0.4 (default: all)")
    p = sub.add_parser("auth", parents=[common], help="authenticate the library and measure gated accuracy")
    p.add_argument("--checkpoint")
    sub.add_parser("attack", parents=[common], help="forgery, fine-tuning and pruning attacks")
    sub.add_parser("report", parents=[common], help="assemble result tables")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.data:
        overrides["dataset"] = args.data
    wm = {}
    if getattr(args, "digits", None):
        wm["digits"] = digits_from_string(args.digits)
    if getattr(args, "mode", None):
        wm["mode"] = args.mode
    if wm:
        overrides["watermark"] = wm
    cfg = load_config(args.config, overrides)
    if args.full_fidelity or cfg.full_fidelity:
        cfg.apply_full_fidelity()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        layout = Layout(cfg.out)
        layout.create()
        (layout.reports / "config.json").write_text(
            json.dumps({"config_hash": cfg.digest(), **cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
        torch.manual_seed(cfg.seed)
        code = COMMANDS[args.command](cfg, args, layout)
        stamp(layout, args.command, cfg)
        return code
    except (ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except IngestionError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
