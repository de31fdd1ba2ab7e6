"""Command-line driver: each subcommand reads the previous stage's artifacts from
the output directory, writes its own, and refreshes the run manifest.

Exit codes: 0 success, 1 invalid config, 2 missing input or runtime failure, 3 integrity failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from canforest import canonical, config as config_mod, experiments as ex
from canforest.attacks import AdversarialBatch, read_batch_csv, write_batch_csv
from canforest.augment import ADV, Sandbox, build_augmented, detection_rate, recovered_rate
from canforest.config import ExperimentConfig
from canforest.detector import KernelSpec, two_sample_test
from canforest.errors import CanForestError, ChainError, ConfigError, TamperError
from canforest.features import LabeledDataset, NormState, build_dataset, read_feature_csv, write_feature_csv
from canforest.forest import train_central, phi_loss
from canforest.ingest import default_profile, generate_synthetic, parse_can_log, write_can_log
from canforest.registry import Registry, train_registered
from canforest.report import evaluate, per_user_eval, sig6
from canforest.substitutes import decode_substitute, encode_substitute
from canforest.types import TrafficClass

log = logging.getLogger("canforest")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TAMPER = 0, 1, 2, 3
MANIFEST = "manifest.json"
ACTIVE = "model/active.json"


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_table(path: Path, rows: list[dict]) -> None:
    """CSV with the union of row keys as header, floats at 6 significant digits."""
    header: list[str] = []
    for r in rows:
        header += [k for k in r if k not in header]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in header])
    os.replace(tmp, path)


def _json(obj) -> str:
    return canonical.dumps(obj) + "\n"


class Run:
    """Paths, derived seeds and manifest bookkeeping for one output directory."""

    STAGES = ("synth", "split", "train", "substitutes", "attack", "detect", "augment", "evaluate")

    RUN_DIRS = ("logs", "features", "registry", "model", "substitutes", "attacks", "sandbox", "tables", "reports")

    def __init__(self, cfg: ExperimentConfig, base_dir: Path = Path(".")):
        self.cfg = cfg
        self.base_dir = Path(base_dir)
        self.out = Path(cfg.output_dir)
        self.seeds = {s: canonical.derive_seed(cfg.seed, s) for s in self.STAGES}

    def path(self, rel: str) -> Path:
        return self.out / rel

    # -- manifest ---------------------------------------------------------

    def reset(self) -> None:
        """Drop artifacts of an earlier run in this directory (the chain would otherwise keep growing)."""
        for name in self.RUN_DIRS:
            if name == "logs" and self.cfg.data.logs:
                continue
            if self.path(name).exists():
                shutil.rmtree(self.path(name))
        self.path(MANIFEST).unlink(missing_ok=True)

    def write_manifest(self) -> None:
        files = {}
        for p in sorted(self.out.rglob("*")):
            rel = p.relative_to(self.out).as_posix()
            if p.is_file() and rel != MANIFEST and not rel.endswith(".tmp"):
                files[rel] = canonical.sha256(p.read_bytes()).hex()
        manifest = {
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.experiment_dict(),
            "master_seed": self.cfg.seed,
            "seeds": self.seeds,
            "files": files,
        }
        _atomic_text(self.path(MANIFEST), _json(manifest))

    # -- shared loaders ---------------------------------------------------

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(TrafficClass.parse(c).value for c in self.cfg.data.classes)

    def split(self, name: str) -> LabeledDataset:
        ds, _ = read_feature_csv(self.path(f"features/{name}.csv"), self.class_names)
        norm = NormState.from_dict(canonical.loads(self.path("features/norm.json").read_text()))
        return LabeledDataset(ds.X, ds.y, ds.class_names, norm)

    def splits(self) -> ex.Splits:
        train = self.split("train")
        return ex.Splits(train, self.split("surrogate"), self.split("test"), train.norm)

    def registry(self) -> Registry:
        return Registry(self.path("registry"))

    def activate(self, digests: Sequence[bytes], class_names: Sequence[str], label: str) -> None:
        """Swap the active-model pointer only after every partial is stored and anchored."""
        pointer = {"model": label, "class_names": list(class_names), "partials": [d.hex() for d in digests]}
        _atomic_text(self.path(ACTIVE), _json(pointer))
        _atomic_text(self.path(f"model/{label}.json"), _json(pointer))

    def model(self, label: str | None = None):
        rel = ACTIVE if label is None else f"model/{label}.json"
        pointer = canonical.loads(self.path(rel).read_text())
        return self.registry().aggregate([bytes.fromhex(h) for h in pointer["partials"]])

    def substitutes(self) -> ex.Substitutes:
        load = lambda n: decode_substitute(self.path(f"substitutes/{n}.json").read_bytes())  # noqa: E731
        return ex.Substitutes(load("mlp"), load("svm"), load("dt"))

    def batches(self, tags: Sequence[str] | None = None) -> dict[str, AdversarialBatch]:
        """Evaluation batches crafted from the test split (originals restored from it)."""
        test = self.split("test")
        index = canonical.loads(self.path("attacks/index.json").read_text())
        out = {}
        for tag in index["methods"]:
            if tags is not None and tag not in tags:
                continue
            b = read_batch_csv(self.path(f"attacks/{tag}.csv"), test.X, self.class_names)
            out[tag] = AdversarialBatch(b.originals, b.perturbed, b.labels, tag, index["params"][tag], b.success,
                                        index["substitute"][tag])
        return out


# --------------------------------------------------------------------------
# stages


def cmd_synth(run: Run, args) -> None:
    n = run.cfg.data.frames_per_class
    for i, c in enumerate(run.class_names):
        log_ = generate_synthetic(default_profile(c), n, canonical.derive_seed(run.seeds["synth"], c))
        write_can_log(log_, run.path(f"logs/{c}.log"))
    log.info("synthesized %d frames for each of %d classes", n, len(run.class_names))


def _log_sources(run: Run) -> list[tuple[Path, str]]:
    cfg = run.cfg
    if cfg.data.logs:
        return [(run.base_dir / s.path, s.traffic_class) for s in cfg.data.logs]
    return [(run.path(f"logs/{c}.log"), c) for c in run.class_names]


def cmd_ingest(run: Run, args) -> None:
    entries = []
    for path, cls in _log_sources(run):
        parsed = parse_can_log(path, cls)
        shown = path.relative_to(run.out).as_posix() if path.is_relative_to(run.out) else str(path.resolve())
        entries.append({"path": shown, "class": TrafficClass.parse(cls).value, "frames": len(parsed.frames),
                        "sha256": canonical.sha256(Path(path).read_bytes()).hex()})
    _atomic_text(run.path("logs/index.json"), _json({"logs": entries}))


def cmd_features(run: Run, args) -> None:
    index = canonical.loads(run.path("logs/index.json").read_text())
    logs = []
    for e in index["logs"]:
        path = Path(e["path"]) if Path(e["path"]).is_absolute() else run.path(e["path"])
        if canonical.sha256(path.read_bytes()).hex() != e["sha256"]:
            raise TamperError(f"{e['path']} changed since ingest")
        logs.append(parse_can_log(path, e["class"]))
    ds = build_dataset(logs, run.cfg.features, run.class_names)
    d = run.cfg.data
    sp = ex.make_splits(ds, d.surrogate_fraction, d.test_fraction, run.seeds["split"])
    for name in ("train", "surrogate", "test"):
        write_feature_csv(getattr(sp, name), run.path(f"features/{name}.csv"))
    _atomic_text(run.path("features/norm.json"), _json(sp.norm.to_dict()))
    log.info("features: %d train, %d surrogate, %d test rows", len(sp.train), len(sp.surrogate), len(sp.test))


def cmd_train(run: Run, args) -> None:
    k = args.miners if getattr(args, "miners", None) else run.cfg.miners
    train = run.split("train")
    _, digests = train_registered(train, k, run.cfg.forest, run.seeds["train"], run.registry(), timestamp=0.0)
    run.activate(digests, train.class_names, "base")
    report = evaluate(run.model(), run.split("test"))
    _atomic_text(run.path("reports/train.json"), _json({"miners": k, "test": report.to_dict()}))


def cmd_attack(run: Run, args) -> None:
    sp = run.splits()
    cfg = run.cfg
    subs = ex.train_substitutes(sp.surrogate, run.seeds["substitutes"], cfg.mlp, cfg.svm)
    for name in ("mlp", "svm", "dt"):
        p = run.path(f"substitutes/{name}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(encode_substitute(getattr(subs, name)))
    batches = ex.craft_all(cfg.attacks, subs, sp.test)
    index = {"methods": list(batches), "params": {}, "substitute": {}}
    for tag, b in batches.items():
        write_batch_csv(b, run.path(f"attacks/{tag}.csv"), run.class_names)
        index["params"][tag] = b.params
        index["substitute"][tag] = b.substitute_id
    _atomic_text(run.path("attacks/index.json"), _json(index))
    model = run.model("base")
    write_table(run.path("tables/attack.csv"), ex.attack_table(model, sp.test, batches))
    rows = []
    for n_users in range(1, 6):
        try:
            reports, mean = per_user_eval(model, sp.test, list(batches.values()), n_users,
                                          canonical.derive_seed(run.seeds["attack"], "users", n_users))
        except CanForestError as exc:
            log.warning("per-user split with %d users skipped: %s", n_users, exc)
            continue
        for u, r in enumerate(reports):
            rows.append({"users": n_users, "user": u, "accuracy": r.accuracy, "precision": r.precision,
                         "recall": r.recall, "f1": r.f1})
        rows.append({"users": n_users, "user": "mean", **mean})
    write_table(run.path("tables/per_user.csv"), rows)


def cmd_detect(run: Run, args) -> None:
    cfg, det = run.cfg, run.cfg.detector
    statistic = getattr(args, "statistic", None) or det.statistic
    sp = run.splits()
    batches = run.batches()
    kernel = KernelSpec(det.bandwidth)
    seed = run.seeds["detect"]
    write_table(run.path("tables/divergence.csv"),
                ex.divergence_table(sp.train, sp.test, batches, kernel, det.max_rows, seed))
    # one verdict per batch (and benign test rows as the null case) against the training reference
    rows = []
    rng = np.random.default_rng(seed)
    for name, X in [("benign", sp.test.X)] + [(t, b.perturbed) for t, b in batches.items()]:
        size = min(len(X), len(sp.train), det.max_rows)
        ref = sp.train.X[np.sort(rng.choice(len(sp.train), size, replace=False))]
        cand = X[np.sort(rng.choice(len(X), size, replace=False))]
        v = two_sample_test(ref, cand, statistic, det.permutations, det.alpha, int(rng.integers(2**63 - 1)), kernel)
        rows.append({"manipulation": name, **v.to_dict()})
    write_table(run.path("tables/verdicts.csv"), rows)
    write_table(run.path("tables/sample_size.csv"),
                ex.sample_size_table(sp.train, batches, det.sizes, det.trials, seed, det.mode, statistic,
                                     det.table_permutations, det.alpha, det.threshold))
    mix = {t: b for t, b in batches.items() if t in det.mixture_methods}
    summary = {"statistic": statistic, "verdicts": {r["manipulation"]: r["reject_h0"] for r in rows}}
    try:
        curve = ex.mixture_table(sp.train, mix, det.proportions, det.mixture_size, det.trials, seed, statistic,
                                 det.table_permutations, det.alpha)
        write_table(run.path("tables/mixture.csv"), curve)
        summary["mixture_spearman"] = {k: sig6(v) for k, v in ex.mixture_trend(curve).items()}
    except CanForestError as exc:
        log.warning("mixture sweep skipped: %s", exc)
    _atomic_text(run.path("reports/detect.json"), _json(summary))


def cmd_augment(run: Run, args) -> None:
    cfg = run.cfg
    methods = tuple(args.methods.split(",")) if getattr(args, "methods", None) else cfg.augment_methods
    k = args.miners if getattr(args, "miners", None) else cfg.miners
    sp = run.splits()
    subs = run.substitutes()
    seed = run.seeds["augment"]
    crafted = ex.craft_all(methods, subs, sp.surrogate)
    sandbox = Sandbox()
    refused = ex.screen_and_capture(sandbox, sp.train, crafted, batch_size=cfg.detector.max_rows,
                                    statistic_kind=cfg.detector.statistic, n_permutations=cfg.detector.permutations,
                                    alpha=cfg.detector.alpha, seed=seed, clock=1.0)
    for tag in refused:
        log.warning("%s batch accepted H0; not captured", tag)
    sandbox.save(run.path("sandbox"), run.class_names)
    aug = build_augmented(sp.train, sandbox, [b.method for b in crafted.values()])
    _, digests = train_registered(aug.dataset, k, cfg.forest, seed, run.registry(), timestamp=2.0)
    run.activate(digests, aug.dataset.class_names, "augmented")
    base, model = run.model("base"), run.model("augmented")
    rows = []
    for tag, b in run.batches().items():
        old, new = detection_rate(base, b), detection_rate(model, b)
        rows.append({"manipulation": tag, "old_rate": old, "new_rate": new, "recovered_pct": recovered_rate(old, new)})
    write_table(run.path("tables/augment.csv"), rows)
    summary = {
        "methods": list(methods),
        "refused": refused,
        "provenance": aug.provenance,
        "miners": k,
        "benign_before": evaluate(base, sp.test).to_dict(),
        "benign_after": evaluate(model, sp.test).to_dict(),
    }
    _atomic_text(run.path("reports/augment.json"), _json(summary))


def cmd_evaluate(run: Run, args) -> None:
    sp = run.splits()
    pointer = canonical.loads(run.path(ACTIVE).read_text())
    model = run.model()
    report = {
        "config": run.cfg.experiment_dict(),
        "config_sha256": run.cfg.digest(),
        "seeds": run.seeds,
        "active_model": pointer["model"],
        "test": evaluate(model, sp.test).to_dict(),
    }
    if ADV not in model.class_names:
        central = train_central(sp.train, run.cfg.forest, run.seeds["train"])
        report["phi_loss_accuracy"] = sig6(phi_loss(model, central, sp.test))
    _atomic_text(run.path("reports/evaluate.json"), _json(report))


def cmd_registry(run: Run, args) -> int:
    reg = run.registry()
    if args.action == "show":
        for b in reg.chain.blocks:
            print(f"{b.index:4d} {b.miner_id:10s} {b.model_hash.hex()} prev={b.prev_hash.hex()[:16]} t={b.timestamp:g}")
        return EXIT_OK
    ok, bad, tampered = reg.verify()
    if ok:
        print(f"registry ok: {len(reg.chain)} blocks, {len(reg.store.digests())} stored models")
        return EXIT_OK
    if bad is not None:
        print(f"chain broken at block {bad}", file=sys.stderr)
    for d in tampered:
        print(f"stored model {d} fails its digest", file=sys.stderr)
    return EXIT_TAMPER


PIPELINE = (
    ("synth", cmd_synth), ("ingest", cmd_ingest), ("features", cmd_features), ("train", cmd_train),
    ("attack", cmd_attack), ("detect", cmd_detect), ("augment", cmd_augment), ("evaluate", cmd_evaluate),
)


def cmd_pipeline(run: Run, args) -> None:
    run.reset()
    for name, fn in PIPELINE:
        if name == "synth" and run.cfg.data.logs:
            continue
        log.info("stage %s", name)
        fn(run, args)
        run.write_manifest()


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canforest", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-c", "--config", required=True, help="YAML experiment config")
    p.add_argument("-o", "--out", help="override output_dir")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. forest.n_trees=20 (value parsed as YAML)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "ingest", "features", "attack", "evaluate", "pipeline"):
        sub.add_parser(name)
    t = sub.add_parser("train")
    t.add_argument("--miners", type=int)
    d = sub.add_parser("detect")
    d.add_argument("--statistic", choices=("MMD", "ED"))
    a = sub.add_parser("augment")
    a.add_argument("--methods", help="comma-separated, e.g. fgsm0.36,svm")
    a.add_argument("--miners", type=int)
    r = sub.add_parser("registry")
    r.add_argument("action", choices=("verify", "show"))
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
        out[key.strip()] = yaml.safe_load(value)
    if args.out:
        out["output_dir"] = args.out
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "miners", None) is not None and args.miners < 1:
        raise ConfigError(["--miners: k must be >= 1"])
    return out


COMMANDS = {name: fn for name, fn in PIPELINE} | {"pipeline": cmd_pipeline}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_mod.load(args.config, _overrides(args))
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, Path(args.config).parent)
    run.out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "registry":
            return cmd_registry(run, args)
        COMMANDS[args.command](run, args)
        run.write_manifest()
    except (TamperError, ChainError) as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_TAMPER
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_RUNTIME
    except (CanForestError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
