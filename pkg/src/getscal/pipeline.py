"""Experiment protocol: train a classifier, freeze it, calibrate on val, score on test.

Configs are strict JSON objects. Example::

    {
      "sbm": {"num_blocks": 4, "nodes_per_block": 100, "p_in": 0.1, "p_out": 0.01},
      "classifier": {"epochs": 400, "weight_decay": 0.0, "dropout": 0.8, "hidden_dim": 64},
      "calibrators": ["uncal", "ts", "gets"],
      "gets": {"input_types": "zxd", "k": 2},
      "bins": 10,
      "seeds": [0, 1, 2, 3, 4],
      "output": "runs/sbm"
    }

Exactly one of ``dataset`` (a directory in the format of :mod:`getscal.data`)
and ``sbm`` must be given. Without an explicit ``sbm.seed`` each run seed
samples its own graph.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import data as dataio
from .calibrators.cagcn import CalibratorFitConfig, fit_cagcn
from .calibrators.gets import GetsConfig, fit_gets
from .calibrators.scaling import fit_ets_weights, fit_temperature_scaling, fit_vector_scaling
from .graph import GraphDataset, NormalizedAdjacency, node_degrees, normalize_adjacency
from .metrics import BinStats, accuracy_and_nll, degree_binned_ece, ece, probabilities, var_ece
from .models import TrainConfig, TrainResult, train_classifier

log = logging.getLogger(__name__)

CALIBRATORS = ("uncal", "ts", "vs", "ets", "cagcn", "gets")
RESULT_HEADER = ("dataset", "classifier", "calibrator", "seed", "ece", "accuracy", "nll",
                 "var_ece", "elapsed_ms")
RELIABILITY_HEADER = ("bin_index", "count", "avg_confidence", "accuracy")
METRICS = ("ece", "accuracy", "nll", "var_ece")

CONFIG_KEYS = {"dataset", "sbm", "classifier", "calibrators", "gets", "bins", "seeds", "output"}
CLASSIFIER_KEYS = {"backbone", "epochs", "learning_rate", "weight_decay", "dropout", "hidden_dim",
                   "patience"}
GETS_KEYS = {"input_types", "ensembles", "k", "backbone", "hidden_dim", "dropout", "learning_rate",
             "weight_decay", "max_epochs", "patience", "noise"}
SBM_KEYS = {f.name for f in dataclasses.fields(dataio.SbmConfig)}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    sbm: dict | None = None
    classifier: dict = field(default_factory=dict)
    calibrators: list[str] = field(default_factory=lambda: list(CALIBRATORS))
    gets: dict = field(default_factory=dict)
    bins: int = 10
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str = "runs"

    def __post_init__(self):
        if (self.dataset is None) == (self.sbm is None):
            raise ConfigError("give exactly one of 'dataset' and 'sbm'")
        _check_keys("sbm", self.sbm or {}, SBM_KEYS)
        _check_keys("classifier", self.classifier, CLASSIFIER_KEYS)
        _check_keys("gets", self.gets, GETS_KEYS)
        if not self.calibrators:
            raise ConfigError("list at least one calibrator")
        bad = [c for c in self.calibrators if c not in CALIBRATORS]
        if bad:
            raise ConfigError(f"unknown calibrators {bad}; choose from {list(CALIBRATORS)}")
        if len(set(self.calibrators)) != len(self.calibrators):
            raise ConfigError("calibrators must not repeat")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must not repeat")
        if not isinstance(self.bins, int) or self.bins < 1:
            raise ConfigError("bins must be a positive integer")
        if self.classifier.get("backbone", "gcn") not in ("gcn", "mlp"):
            raise ConfigError("classifier backbone must be 'gcn' or 'mlp'")
        # surface bad values now rather than after a classifier has trained
        try:
            self.train_config(0)
            self.gets_config(0).resolved_ensembles()
            if self.sbm is not None:
                self.sbm_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def backbone(self) -> str:
        return self.classifier.get("backbone", "gcn")

    def train_config(self, seed: int) -> TrainConfig:
        opts = {k: v for k, v in self.classifier.items() if k != "backbone"}
        return TrainConfig(seed=seed, **opts)

    def gets_config(self, seed: int) -> GetsConfig:
        opts = dict(self.gets)
        if "ensembles" in opts:
            opts["ensembles"] = tuple(opts["ensembles"])
        return GetsConfig(seed=seed, **opts)

    def sbm_config(self, seed: int) -> dataio.SbmConfig:
        opts = dict(self.sbm or {})
        opts.setdefault("seed", seed)
        return dataio.SbmConfig(**opts)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return {k: v for k, v in out.items() if v is not None}


def _check_keys(where: str, section, allowed: set):
    if not isinstance(section, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {unknown}")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", doc, CONFIG_KEYS)
    try:
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return parse_config(doc)


# ------------------------------------------------------------------ running

@dataclass
class ResultRow:
    dataset: str
    classifier: str
    calibrator: str
    seed: int
    ece: float
    accuracy: float
    nll: float
    var_ece: float
    elapsed_ms: float

    def csv_fields(self) -> list[str]:
        return [self.dataset, self.classifier, self.calibrator, str(self.seed),
                *(repr(float(getattr(self, m))) for m in METRICS), f"{self.elapsed_ms:.3f}"]


@dataclass
class RunContext:
    graph: GraphDataset
    adj: NormalizedAdjacency
    degrees: np.ndarray
    splits: dataio.SplitMasks


@dataclass
class RunOutput:
    rows: list[ResultRow]
    reliability: dict[str, list[BinStats]]
    failures: dict[str, str]
    classifier: TrainResult | None = None


def prepare(cfg: ExperimentConfig, seed: int) -> RunContext:
    if cfg.dataset is not None:
        g = dataio.load_dataset(cfg.dataset)
        splits = dataio.load_splits(cfg.dataset, seed, g.num_nodes)
    else:
        g = dataio.generate_sbm(cfg.sbm_config(seed))
        splits = None
    if splits is None:
        splits = dataio.generate_splits(g.num_nodes, seed)
    return RunContext(g, normalize_adjacency(g), node_degrees(g), splits)


def train_stage(cfg: ExperimentConfig, ctx: RunContext, seed: int) -> TrainResult:
    return train_classifier(ctx.graph, ctx.adj, cfg.train_config(seed), ctx.splits.train,
                            ctx.splits.val, backbone=cfg.backbone)


def _fit(name: str, cfg: ExperimentConfig, ctx: RunContext, z: np.ndarray, seed: int):
    """Fit calibrator ``name`` from validation nodes only; returns (model, logits or None, probs)."""
    val = ctx.splits.val
    y_val = ctx.graph.labels[val]
    if name == "uncal":
        return None, z, probabilities(z)
    if name == "ts":
        m = fit_temperature_scaling(z[val], y_val)
        return m, m.calibrate(z), m.predict_proba(z)
    if name == "vs":
        m = fit_vector_scaling(z[val], y_val)
        return m, m.calibrate(z), m.predict_proba(z)
    if name == "ets":
        t = fit_temperature_scaling(z[val], y_val).temperature
        m = fit_ets_weights(z[val], y_val, t)
        return m, None, m.predict_proba(z)
    # the graph calibrators see every node's logits but only validation labels
    val_labels = np.where(val, ctx.graph.labels, -1)
    if name == "cagcn":
        m = fit_cagcn(ctx.adj, z, val_labels, val, CalibratorFitConfig(seed=seed))
        out = m.calibrate(ctx.adj, z)
        return m, out, probabilities(out)
    if name == "gets":
        m = fit_gets(ctx.adj, z, ctx.graph.features, ctx.degrees, val_labels, val, cfg.gets_config(seed))
        out = m.calibrate(ctx.adj, z, ctx.graph.features, ctx.degrees)
        return m, out, probabilities(out)
    raise ValueError(f"unknown calibrator {name!r}")


def evaluate(probs, labels, degrees, mask, num_bins: int, logits=None):
    """(ece, accuracy, nll, var_ece, reliability bins) on ``mask``; NLL from logits when given."""
    e, bins = ece(probs, labels, mask, num_bins)
    _, dbins = degree_binned_ece(probs, labels, degrees, mask, num_bins)
    if logits is not None:
        acc, nll = accuracy_and_nll(logits, labels, mask, from_logits=True)
    else:
        acc, nll = accuracy_and_nll(probs, labels, mask)
    return e, acc, nll, var_ece(dbins), bins


def run_pipeline(cfg: ExperimentConfig, seed: int, out_dir=None, classifier_logits=None) -> RunOutput:
    """One seed of the protocol. Writes reliability CSVs and checkpoints when ``out_dir`` is set."""
    ctx = prepare(cfg, seed)
    trained = None
    if classifier_logits is None:
        trained = train_stage(cfg, ctx, seed)
        z = trained.logits
    else:
        z = np.asarray(classifier_logits, dtype=np.float64)
    test = ctx.splits.test
    rows, reliability, failures = [], {}, {}
    for name in cfg.calibrators:
        start = time.perf_counter()
        try:
            model, logits, probs = _fit(name, cfg, ctx, z, seed)
            e, acc, nll, ve, bins = evaluate(probs, ctx.graph.labels, ctx.degrees, test, cfg.bins, logits)
        except Exception as exc:  # one broken calibrator must not sink the others
            log.warning("seed %d: calibrator %s failed: %s", seed, name, exc)
            failures[name] = f"{type(exc).__name__}: {exc}"
            continue
        elapsed = (time.perf_counter() - start) * 1000.0
        rows.append(ResultRow(ctx.graph.name, cfg.backbone, name, seed, e, acc, nll, ve, elapsed))
        reliability[name] = bins
        if out_dir is not None:
            write_reliability(Path(out_dir) / f"reliability_{name}_{seed}.csv", bins)
            if model is not None:
                checkpoint.save_checkpoint(model, Path(out_dir) / "checkpoints" / f"{name}_{seed}.json")
    if out_dir is not None and trained is not None:
        checkpoint.save_checkpoint(trained.net, Path(out_dir) / "checkpoints" / f"classifier_{seed}.json")
    return RunOutput(rows, reliability, failures, trained)


def _run_one(args):
    cfg, seed, out_dir = args
    return run_pipeline(cfg, seed, out_dir)


def sweep_seeds(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> tuple[list[ResultRow], list[dict]]:
    """Run every configured seed, write ``results.csv`` and return rows plus the summary table."""
    tasks = [(cfg, s, out_dir) for s in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            outputs = list(pool.map(_run_one, tasks))
    else:
        outputs = [_run_one(t) for t in tasks]
    rows = [r for o in outputs for r in o.rows]
    failures = [(s, name, msg) for s, o in zip(cfg.seeds, outputs) for name, msg in o.failures.items()]
    if out_dir is not None:
        write_results(Path(out_dir) / "results.csv", rows)
        if failures:
            write_failures(Path(out_dir) / "failures.csv", failures)
    return rows, summarize(rows, cfg.calibrators)


# ---------------------------------------------------------------- reporting

def write_results(path, rows: list[ResultRow]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())


def write_reliability(path, bins: list[BinStats]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RELIABILITY_HEADER)
        for b in bins:
            w.writerow([b.bin_index, b.node_count, repr(float(b.avg_confidence)), repr(float(b.accuracy))])


def write_failures(path, failures):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "calibrator", "error"])
        w.writerows(failures)


def read_results(path) -> list[ResultRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"results file {path} not found")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(RESULT_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(RESULT_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(RESULT_HEADER)} fields, found {len(rec)}")
            try:
                rows.append(ResultRow(rec[0], rec[1], rec[2], int(rec[3]), *map(float, rec[4:])))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed number") from None
    if not rows:
        raise ValueError(f"{path} holds no result rows")
    return rows


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation; a single value has std 0."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def format_mean_std(values, scale: float = 100.0) -> str:
    m, s = mean_std(np.asarray(values, dtype=np.float64) * scale)
    return f"{m:.2f} ± {s:.2f}"


# ECE and accuracy are shown in percent, VarECE in units of 1e-3, NLL in nats
METRIC_SCALE = {"ece": 100.0, "accuracy": 100.0, "nll": 1.0, "var_ece": 1000.0}


def summarize(rows: list[ResultRow], order=None) -> list[dict]:
    """One dict per calibrator with ``"<metric>"`` formatted as mean ± std across seeds."""
    names = list(order) if order is not None else list(dict.fromkeys(r.calibrator for r in rows))
    table = []
    for name in names:
        mine = [r for r in rows if r.calibrator == name]
        if not mine:
            continue
        entry = {"calibrator": name, "runs": len(mine)}
        for m in METRICS:
            entry[m] = format_mean_std([getattr(r, m) for r in mine], METRIC_SCALE[m])
        table.append(entry)
    return table


def render_table(table: list[dict]) -> str:
    cols = ["calibrator", "runs", "ece", "accuracy", "nll", "var_ece"]
    titles = {"ece": "ECE (%)", "accuracy": "acc (%)", "nll": "NLL", "var_ece": "VarECE (1e-3)"}
    cells = [[titles.get(c, c) for c in cols]] + [[str(e[c]) for c in cols] for e in table]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report(results_path) -> str:
    """Render a results file as a table followed by the reliability CSVs beside it."""
    results_path = Path(results_path)
    rows = read_results(results_path)
    text = render_table(summarize(rows))
    curves = sorted(p.name for p in results_path.parent.glob("reliability_*_*.csv"))
    if curves:
        text += "\n\nreliability data:\n" + "\n".join(f"  {c}" for c in curves)
    return text
