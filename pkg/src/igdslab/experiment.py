"""End-to-end toy pipeline and (ipc, β, seed) grid runner.

Per seed: generate data, train the VE and its head, train the denoiser. Per
(ipc, β) cell: distill with guided sampling, score the distilled set with the
frozen VE, train a fresh classifier on it and test on fresh mixture draws.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import make_synthetic_dataset, sample_like, save_dataset
from .diffusion import DenoiserNet, build_schedule, save_denoiser, scaled_linear_schedule, train_denoiser
from .distill import FrozenModels, assemble_distilled, evaluate_downstream
from .igds import GuidanceConfig
from .ve import ClassifierHead, VeConfig, VeModel, contextual_info_lb, prototype_info_lb, save_ve, train_classifier, train_ve

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("ipc", "beta", "seed", "accuracy", "prototype_lb", "contextual_lb", "runtime_seconds")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetParams:
    n_classes: int = 3
    modes_per_class: int = 3
    n_per_class: int = 300
    separation: float = 1.0
    mode_offset: float = 0.6
    mode_std: float = 0.25
    test_per_class: int = 2000


@dataclass
class VeParams:
    featdim: int = 16
    lam: float = 0.1
    queue_size: int = 256
    momentum: float = 0.99
    tau: float = 0.07
    lr: float = 1e-2
    steps: int = 500
    head_epochs: int = 30
    kl_target: str = "centroid"


@dataclass
class DiffusionParams:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    rescale: bool = True
    steps: int = 3000
    lr: float = 2e-3


@dataclass
class GuidanceParams:
    betas: list = field(default_factory=lambda: [0.0, 0.1, 0.5])
    eta: float = 40.0
    ipcs: list = field(default_factory=lambda: [1, 10])
    tau: float = 0.07
    pred_entropy: bool = False
    scale_by_sigma: bool = True


@dataclass
class EvalParams:
    epochs: int = 300
    lr: float = 1e-2


@dataclass
class ExperimentConfig:
    dataset: DatasetParams = field(default_factory=DatasetParams)
    ve: VeParams = field(default_factory=VeParams)
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    eval: EvalParams = field(default_factory=EvalParams)
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str | None = None
    workers: int = 1
    record_runtime: bool = False

    def validate(self) -> ExperimentConfig:
        g = self.guidance
        if not g.betas or not g.ipcs or not self.seeds:
            raise ConfigError("beta grid, ipc list and seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if any(i < 1 for i in g.ipcs) or any(b < 0 for b in g.betas):
            raise ConfigError("ipc values must be >= 1 and betas >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def cells(self) -> list[tuple[int, float, int]]:
        return sorted((int(i), float(b), int(s)) for i in self.guidance.ipcs for b in self.guidance.betas for s in self.seeds)


_SECTIONS = {"dataset": DatasetParams, "ve": VeParams, "diffusion": DiffusionParams,
             "guidance": GuidanceParams, "eval": EvalParams}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, list):
        kind = type(default[0]) if default else float
        return [kind(v) for v in raw.replace(",", " ").split()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Read ``key = value`` lines grouped under ``[section]`` headers.

    Sections: dataset, ve, diffusion, guidance, eval, run. Unknown sections or
    keys are errors.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (T)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for section in cp.sections():
        target = cfg if section == "run" else getattr(cfg, section, None)
        if section != "run" and section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        names = {f.name for f in fields(target)} - set(_SECTIONS)
        for key, raw in cp.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            default = getattr(target, key)
            try:
                value = _parse_value(raw, default) if default is not None else raw.strip()
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
            setattr(target, key, value)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# pipeline stages ---------------------------------------------------------

@dataclass
class SeedArtifacts:
    data: object
    test: object
    models: FrozenModels


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("data", "ve", "head", "diffusion", "test")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def make_data(cfg: ExperimentConfig, seed: int):
    d = cfg.dataset
    rngs = _streams(seed)
    data = make_synthetic_dataset(d.n_classes, d.modes_per_class, d.n_per_class, d.separation, rngs["data"],
                                  mode_offset=d.mode_offset, mode_std=d.mode_std)
    test = sample_like(data, d.test_per_class, rngs["test"])
    return data, test


def train_ve_stage(cfg: ExperimentConfig, seed: int, data) -> tuple[VeModel, ClassifierHead]:
    p = cfg.ve
    rngs = _streams(seed)
    vcfg = VeConfig(featdim=p.featdim, lam=p.lam, queue_size=p.queue_size, momentum=p.momentum,
                    tau=p.tau, lr=p.lr, kl_target=p.kl_target)
    model = VeModel(vcfg, data.n_classes, rngs["ve"])
    train_ve(model, data, p.steps, rngs["ve"])
    model.freeze()
    head = ClassifierHead(p.featdim, data.n_classes, rngs["head"])
    rep = train_classifier(model, head, data, p.head_epochs, rngs["head"])
    log.info("seed %d: VE head accuracy %.3f, rank %d", seed, rep.accuracy, rep.rank)
    return model, head.freeze()


def train_diffusion_stage(cfg: ExperimentConfig, seed: int, data):
    p = cfg.diffusion
    make = scaled_linear_schedule if p.rescale else build_schedule
    sched = make(p.T, p.beta_start, p.beta_end)
    rng = _streams(seed)["diffusion"]
    net = DenoiserNet(data.dim, data.n_classes, p.T, rng)
    train_denoiser(net, sched, data, p.steps, rng, lr=p.lr)
    return net.freeze(), sched


def guidance_config(cfg: ExperimentConfig, ipc: int, beta: float) -> GuidanceConfig:
    g = cfg.guidance
    return GuidanceConfig(beta=beta, eta=g.eta, tau=g.tau, ipc=ipc, pred_entropy=g.pred_entropy,
                          scale_by_sigma=g.scale_by_sigma)


# reports -----------------------------------------------------------------

@dataclass
class ReportRow:
    ipc: int
    beta: float
    seed: int
    accuracy: float = float("nan")
    prototype_lb: float = float("nan")
    contextual_lb: float = float("nan")
    runtime_seconds: float = 0.0
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.ipc, self.beta, self.seed)


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    def sorted(self) -> ExperimentReport:
        return ExperimentReport(sorted(self.rows, key=lambda r: r.key))

    def filter(self, **kw) -> ExperimentReport:
        return ExperimentReport([r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())])

    @property
    def failures(self) -> list:
        return [r for r in self.rows if r.error]

    def to_csv(self, record_runtime: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.sorted().rows:
            w.writerow([r.ipc, repr(r.beta), r.seed, repr(r.accuracy), repr(r.prototype_lb), repr(r.contextual_lb),
                        f"{r.runtime_seconds:.3f}" if record_runtime else "0.000"])
        return buf.getvalue()


def run_seed(cfg: ExperimentConfig, seed: int) -> list[ReportRow]:
    """All (ipc, β) cells for one seed, sharing that seed's trained models."""
    out = Path(cfg.out_dir) / f"seed_{seed}" if cfg.out_dir else None
    cells = [c for c in cfg.cells() if c[2] == seed]
    t0 = time.perf_counter()
    stage = "data"
    try:
        data, test = make_data(cfg, seed)
        stage = "train-ve"
        ve, head = train_ve_stage(cfg, seed, data)
        stage = "train-diffusion"
        net, sched = train_diffusion_stage(cfg, seed, data)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            save_ve(out / "ve.npz", ve, head)
            save_denoiser(out / "denoiser.npz", net, sched)
    except Exception as exc:  # noqa: BLE001 - any stage failure is recorded on the affected rows
        log.exception("seed %d failed during %s", seed, stage)
        return [ReportRow(i, b, s, error=f"{stage}: {exc}") for i, b, s in cells]
    shared = time.perf_counter() - t0
    models = FrozenModels(net, sched, ve, head)
    rows = []
    for ipc, beta, _ in cells:
        row = ReportRow(ipc, beta, seed)
        t1 = time.perf_counter()
        stage = "distill"
        try:
            traces: dict = {}
            distilled = assemble_distilled(models, range(data.n_classes), guidance_config(cfg, ipc, beta), seed, traces)
            stage = "score"
            row.prototype_lb = prototype_info_lb(ve, head, distilled)
            row.contextual_lb = contextual_info_lb(ve, distilled)
            stage = "eval"
            row.accuracy = evaluate_downstream(distilled, test, cfg.eval.epochs, seed, lr=cfg.eval.lr)
            if out:
                tag = f"ipc{ipc}_beta{beta:g}"
                save_dataset(out / f"distilled_{tag}.txt", distilled)
                for c, tr in traces.items():
                    tr.to_csv(out / f"trace_{tag}_class{c}.csv")
        except Exception as exc:  # noqa: BLE001
            log.exception("cell ipc=%d beta=%g seed=%d failed during %s", ipc, beta, seed, stage)
            row.error = f"{stage}: {exc}"
        row.runtime_seconds = shared / len(cells) + time.perf_counter() - t1
        log.info("cell ipc=%d beta=%g seed=%d acc=%.4f", ipc, beta, seed, row.accuracy)
        rows.append(row)
    return rows


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentReport:
    cfg.validate()
    workers = workers or cfg.workers
    if workers == 1 or len(cfg.seeds) == 1:
        batches = [run_seed(cfg, s) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    report = ExperimentReport([r for b in batches for r in b]).sorted()
    if cfg.out_dir:
        write_report(cfg, report)
    return report


def write_report(cfg: ExperimentConfig, report: ExperimentReport) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(cfg.record_runtime))
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("ipc", "beta", "seed", "runtime_seconds"))
        for r in report.rows:
            w.writerow([r.ipc, repr(r.beta), r.seed, f"{r.runtime_seconds:.3f}"])
    failed = report.failures
    if failed:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("ipc", "beta", "seed", "error"))
            for r in failed:
                w.writerow([r.ipc, repr(r.beta), r.seed, r.error])


# sweep summary -----------------------------------------------------------

@dataclass
class SweepSummary:
    mean_accuracy: dict
    best_beta: float | None


def beta_sweep(report: ExperimentReport, ipc_list=None, beta_grid=None, tie_tol: float = 1e-12) -> dict[int, SweepSummary]:
    """Seed-averaged accuracy per (ipc, β) and the best β per ipc (ties go to the smaller β).

    Cells with no successful rows map to ``None`` and are skipped when picking the best β.
    """
    ok = [r for r in report.rows if not r.error and np.isfinite(r.accuracy)]
    ipc_list = sorted(set(ipc_list if ipc_list is not None else (r.ipc for r in report.rows)))
    beta_grid = sorted(set(beta_grid if beta_grid is not None else (r.beta for r in report.rows)))
    out = {}
    for ipc in ipc_list:
        means = {}
        for b in beta_grid:
            accs = [r.accuracy for r in ok if r.ipc == ipc and r.beta == b]
            means[b] = float(np.mean(accs)) if accs else None
        present = [(b, m) for b, m in means.items() if m is not None]
        best = None
        if present:
            top = max(m for _, m in present)
            best = min(b for b, m in present if m >= top - tie_tol)
        out[ipc] = SweepSummary(means, best)
    return out


def format_sweep(summary: dict[int, SweepSummary]) -> str:
    lines = []
    for ipc, s in sorted(summary.items()):
        cells = ", ".join(f"beta={b:g}: {'absent' if m is None else f'{m:.4f}'}" for b, m in s.mean_accuracy.items())
        lines.append(f"ipc={ipc}  best_beta={s.best_beta}  [{cells}]")
    return "\n".join(lines)
