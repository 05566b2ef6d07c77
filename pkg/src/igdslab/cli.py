"""Command-line entry point.

    igdslab selftest
    igdslab train-ve        --config run.ini --out runs/a
    igdslab train-diffusion --config run.ini --out runs/a
    igdslab distill         --config run.ini --out runs/a
    igdslab eval            --config run.ini --out runs/a
    igdslab sweep           --config run.ini --out runs/a --workers 4
    igdslab oracle joint.txt

Staged commands share one output directory: checkpoints land in
``<out>/seed_<s>/`` and later stages read them back. Exit codes: 0 success,
2 when some cells failed, 1 on a config or input error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import infotheory as it
from .checkpoint import CheckpointError
from .data import load_dataset, save_dataset
from .diffusion import load_denoiser, save_denoiser
from .distill import FrozenModels, assemble_distilled, evaluate_downstream
from .ve import contextual_info_lb, load_ve, prototype_info_lb, save_ve

log = logging.getLogger("igdslab")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _seed_dir(out, seed: int) -> Path:
    d = Path(out) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _tag(ipc: int, beta: float) -> str:
    return f"ipc{ipc}_beta{beta:g}"


def cmd_train_ve(cfg, args) -> int:
    for seed in cfg.seeds:
        data, _ = ex.make_data(cfg, seed)
        ve, head = ex.train_ve_stage(cfg, seed, data)
        d = _seed_dir(args.out, seed)
        save_dataset(d / "train.txt", data)
        save_ve(d / "ve.npz", ve, head)
        print(f"seed {seed}: wrote {d / 've.npz'}")
    return EXIT_OK


def cmd_train_diffusion(cfg, args) -> int:
    for seed in cfg.seeds:
        data, _ = ex.make_data(cfg, seed)
        net, sched = ex.train_diffusion_stage(cfg, seed, data)
        d = _seed_dir(args.out, seed)
        save_denoiser(d / "denoiser.npz", net, sched)
        print(f"seed {seed}: wrote {d / 'denoiser.npz'}")
    return EXIT_OK


def cmd_distill(cfg, args) -> int:
    failed = 0
    for seed in cfg.seeds:
        d = _seed_dir(args.out, seed)
        try:
            ve, head = load_ve(d / "ve.npz")
            net, sched = load_denoiser(d / "denoiser.npz")
        except (OSError, CheckpointError) as exc:
            print(f"seed {seed}: missing checkpoints ({exc}); run train-ve and train-diffusion first", file=sys.stderr)
            failed += 1
            continue
        models = FrozenModels(net.freeze(), sched, ve.freeze(), head.freeze())
        for ipc in cfg.guidance.ipcs:
            for beta in cfg.guidance.betas:
                try:
                    ds = assemble_distilled(models, range(cfg.dataset.n_classes), ex.guidance_config(cfg, ipc, beta), seed)
                except Exception as exc:  # noqa: BLE001
                    log.error("seed %d %s: distill failed: %s", seed, _tag(ipc, beta), exc)
                    failed += 1
                    continue
                save_dataset(d / f"distilled_{_tag(ipc, beta)}.txt", ds)
        print(f"seed {seed}: distilled sets in {d}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_eval(cfg, args) -> int:
    report = ex.ExperimentReport()
    for seed in cfg.seeds:
        d = _seed_dir(args.out, seed)
        _, test = ex.make_data(cfg, seed)
        try:
            ve, head = load_ve(d / "ve.npz")
        except (OSError, CheckpointError) as exc:
            ve = head = None
            log.error("seed %d: no VE checkpoint (%s)", seed, exc)
        for ipc in cfg.guidance.ipcs:
            for beta in cfg.guidance.betas:
                row = ex.ReportRow(ipc, float(beta), seed)
                try:
                    if ve is None:
                        raise FileNotFoundError("ve.npz")
                    ds = load_dataset(d / f"distilled_{_tag(ipc, beta)}.txt")
                    row.prototype_lb = prototype_info_lb(ve, head, ds)
                    row.contextual_lb = contextual_info_lb(ve, ds)
                    row.accuracy = evaluate_downstream(ds, test, cfg.eval.epochs, seed, lr=cfg.eval.lr)
                except Exception as exc:  # noqa: BLE001
                    row.error = f"eval: {exc}"
                report.rows.append(row)
    ex.write_report(replace(cfg, out_dir=args.out), report.sorted())
    sys.stdout.write(report.to_csv())
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_sweep(cfg, args) -> int:
    report = ex.run_experiment(replace(cfg, out_dir=args.out), args.workers or cfg.workers)
    print(ex.format_sweep(ex.beta_sweep(report, cfg.guidance.ipcs, cfg.guidance.betas)))
    for r in report.failures:
        print(f"failed: ipc={r.ipc} beta={r.beta:g} seed={r.seed}: {r.error}", file=sys.stderr)
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_oracle(args) -> int:
    try:
        j = it.load_joint(args.joint)
    except (OSError, ValueError) as exc:
        print(f"cannot read joint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    w = csv.writer(sys.stdout, lineterminator="\n")
    for k, v in it.summarize(j).items():
        w.writerow([k, repr(float(v))])
    return EXIT_OK


def run_selftest() -> list[tuple[str, bool, str]]:
    """Quick exact-oracle checks on random inputs; returns (name, passed, detail) triples."""
    rng = np.random.default_rng(0)
    results = []

    worst = 0.0
    for _ in range(200):
        j = it.DiscreteJoint(rng.dirichlet(np.ones(12)).reshape(3, 4))
        worst = max(worst, abs(j.h_x() - it.mutual_information(j) - it.conditional_entropy(j)))
    results.append(("entropy decomposition", worst <= 1e-10, f"max gap {worst:.2e}"))

    worst = 0.0
    for _ in range(100):
        j = it.DiscreteJoint(rng.dirichlet(np.ones(15)).reshape(5, 3))
        worst = max(worst, abs(it.mutual_information(j) - it.mutual_information(it.push_forward(j, rng.permutation(5)))))
    results.append(("injective maps keep MI", worst <= 1e-10, f"max gap {worst:.2e}"))

    worst = 0.0
    for _ in range(1000):
        v = rng.normal(size=rng.integers(2, 33))
        v -= v.mean()
        worst = max(worst, float(np.max(np.abs(it.invert_softmax(it.softmax(v)) - v))))
    results.append(("softmax inversion", worst <= 1e-9, f"max error {worst:.2e}"))

    ok = True
    for _ in range(1000):
        p = rng.dirichlet(np.ones(6))
        ok &= it.entropy(it.split_outcome(p, int(rng.integers(6)), float(rng.uniform(0.05, 0.95)))) > it.entropy(p)
    n = 37
    results.append(("mass splitting raises entropy", bool(ok) and abs(it.entropy(np.full(n, 1 / n)) - np.log(n)) <= 1e-12, ""))

    worst = 0.0
    for _ in range(500):
        batch = it.softmax(rng.normal(size=(8, 5)) * 3)
        c = batch.mean(axis=0)
        gap = it.mean_kl_to_centroid(batch, c) - (it.entropy(c) - np.mean([it.entropy(b) for b in batch]))
        worst = max(worst, abs(gap))
    results.append(("KL-to-centroid identity", worst <= 1e-10, f"max gap {worst:.2e}"))
    return results


def cmd_selftest(args) -> int:
    results = run_selftest()
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
    return EXIT_OK if all(p for _, p, _ in results) else EXIT_PARTIAL


_CONFIG_COMMANDS = {"train-ve": cmd_train_ve, "train-diffusion": cmd_train_diffusion,
                    "distill": cmd_distill, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igdslab", description="Information-guided diffusion sampling on toy data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("selftest", help="run the built-in oracle checks")
    for name in _CONFIG_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI-style experiment config (defaults used when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    p = sub.add_parser("oracle", help="entropies and MI of a joint stored as a whitespace matrix")
    p.add_argument("joint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fmt = logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s")
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(fmt)
    root = logging.getLogger()
    root.addHandler(console)
    root.setLevel(logging.INFO)
    if args.command in ("selftest", "oracle"):
        try:
            return cmd_selftest(args) if args.command == "selftest" else cmd_oracle(args)
        finally:
            root.removeHandler(console)
    try:
        cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
        cfg = replace(cfg, seeds=[s + args.seed_offset for s in cfg.seeds])
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers)
        cfg.validate()
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    Path(args.out).mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(Path(args.out) / "run.log", mode="a")
    fh.setFormatter(fmt)
    root.addHandler(fh)
    try:
        return _CONFIG_COMMANDS[args.command](cfg, args)
    finally:
        for h in (fh, console):
            root.removeHandler(h)
        fh.close()


if __name__ == "__main__":
    sys.exit(main())
