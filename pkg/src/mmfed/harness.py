"""Experiment grids: config parsing, sequential or parallel execution, metrics and summary files.

Config files are line oriented::

    # comment
    method = fedmeta
    scenario = [img/sign, sp/sign, img/sp, img, sp, sign]
    outer_lr = [0.001, 0.01]
    inner_lr = [0.00001, 0.0001]
    clients = 3

Any run axis may be a bracketed list; the grid is the cartesian product of
all axes. Data and architecture keys take a single value shared by every run.

Every run writes ``runs/<run_id>/metrics.csv`` and ``curves.csv``, which
depend only on the config and seeds, plus ``timing.csv`` with wall-clock
seconds per round. ``summary.csv`` and ``summary.txt`` are assembled once
all runs have finished.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SCENARIOS, AlignedDataset, load_aligned, synth_generate
from .errors import ConfigError, MMFedError
from .federated import BaselineConfig, MetaConfig, RoundReport, run_3mf, train_baseline
from .model import ARCH_PRESETS, MultimodalClassifier

log = logging.getLogger(__name__)

METHODS = ("fedmeta", "baseline")

# key -> (parser, default, is run axis)
_KEYS = {
    "method": (str, "fedmeta", True),
    "scenario": (str, "full", True),
    "outer_lr": (float, 1e-3, True),
    "inner_lr": (float, 1e-5, True),
    "clients": (int, 3, True),
    "clients_per_round": (int, None, True),
    "aggregation": (str, "sum", True),
    "local_epochs": (int, 5, True),
    "rounds": (int, 50, True),
    "lr": (float, 0.01, True),
    "epochs": (int, 30, True),
    "batch_size": (int, 32, True),
    "seed": (int, 0, True),
    "repetitions": (int, 1, False),
    "support_fraction": (float, 0.2, False),
    "test_fraction": (float, 0.2, False),
    "data": (str, "synthetic", False),
    "per_class": (int, 100, False),
    "noise": (float, 0.05, False),
    "scale": (float, 1.0, False),
    "data_seed": (int, 0, False),
    "arch": (str, "default", False),
}
_ALIASES = {"scenarios": "scenario", "client_count": "clients", "E": "local_epochs", "T": "rounds"}
_POSITIVE = {"outer_lr", "inner_lr", "lr", "clients", "clients_per_round", "local_epochs", "batch_size",
             "repetitions", "per_class", "scale"}
_NON_NEGATIVE = {"rounds", "epochs", "seed", "data_seed", "noise"}


@dataclass(frozen=True)
class RunSpec:
    method: str = "fedmeta"
    scenario: str = "full"
    outer_lr: float = 1e-3
    inner_lr: float = 1e-5
    clients: int = 3
    clients_per_round: int | None = None
    aggregation: str = "sum"
    local_epochs: int = 5
    rounds: int = 50
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    support_fraction: float = 0.2
    test_fraction: float = 0.2

    def key(self) -> tuple:
        """The fields that actually influence the run."""
        if self.method == "baseline":
            return (self.method, self.scenario, self.lr, self.epochs, self.batch_size, self.seed,
                    self.test_fraction)
        return (self.method, self.scenario, self.outer_lr, self.inner_lr, self.clients, self.clients_per_round,
                self.aggregation, self.local_epochs, self.rounds, self.batch_size, self.seed,
                self.support_fraction, self.test_fraction)

    @property
    def run_id(self) -> str:
        scen = self.scenario.replace("/", "-")
        if self.method == "baseline":
            return f"baseline_{scen}_lr{self.lr:g}_ep{self.epochs}_b{self.batch_size}_s{self.seed}"
        per_round = "" if self.clients_per_round is None else f"of{self.clients_per_round}"
        return (f"fedmeta_{scen}_o{self.outer_lr:g}_i{self.inner_lr:g}_c{self.clients}{per_round}"
                f"_{self.aggregation}_E{self.local_epochs}_T{self.rounds}_b{self.batch_size}_s{self.seed}")

    def meta_config(self) -> MetaConfig:
        return MetaConfig(inner_lr=self.inner_lr, outer_lr=self.outer_lr, rounds=self.rounds,
                          local_epochs=self.local_epochs, clients_total=self.clients,
                          clients_per_round=self.clients_per_round, scenario=self.scenario,
                          aggregation=self.aggregation, seed=self.seed, batch_size=self.batch_size,
                          support_fraction=self.support_fraction, test_fraction=self.test_fraction)

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, scenario=self.scenario,
                              seed=self.seed, test_fraction=self.test_fraction)

    def validate(self) -> "RunSpec":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.method == "baseline":
            self.baseline_config().validate()
        else:
            self.meta_config().validate()
        return self


@dataclass(frozen=True)
class DataSource:
    """Where the aligned dataset comes from: ``synthetic`` or a dataset directory."""

    kind: str = "synthetic"
    path: str | None = None
    per_class: int = 100
    noise: float = 0.05
    scale: float = 1.0
    seed: int = 0
    arch: str = "default"

    def load(self) -> AlignedDataset:
        spec = ARCH_PRESETS[self.arch]
        if self.kind == "synthetic":
            return synth_generate(per_class=self.per_class, noise_sigma=self.noise, seed=self.seed, arch=spec,
                                  scale=self.scale)
        return load_aligned(self.path, self.seed)


@dataclass
class ExperimentGrid:
    runs: list[RunSpec]
    source: DataSource = field(default_factory=DataSource)

    def __len__(self):
        return len(self.runs)

    def __iter__(self):
        return iter(self.runs)


# ---------------------------------------------------------------------------
# Parsing


def _split_list(raw: str, lineno: int) -> list[str]:
    if not raw.startswith("["):
        return [raw]
    if not raw.endswith("]"):
        raise ConfigError("unterminated list", line=lineno)
    items = [item.strip() for item in raw[1:-1].split(",")]
    if items == [""]:
        return []
    if any(not item for item in items):
        raise ConfigError("empty list element", line=lineno)
    return items


def _convert(key: str, text: str, lineno: int):
    parser = _KEYS[key][0]
    if text == "none" and key == "clients_per_round":
        return None
    try:
        value = parser(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {parser.__name__}", line=lineno) from None
    if parser is float and not math.isfinite(value):
        raise ConfigError(f"{key} must be finite, got {text}", line=lineno)
    if key in _POSITIVE and not value > 0:
        raise ConfigError(f"{key} must be positive, got {text}", line=lineno)
    if key in _NON_NEGATIVE and value < 0:
        raise ConfigError(f"{key} must be non-negative, got {text}", line=lineno)
    if key == "scenario" and value not in SCENARIOS:
        raise ConfigError(f"unknown scenario {value!r}; expected one of {', '.join(SCENARIOS)}", line=lineno)
    if key == "method" and value not in METHODS:
        raise ConfigError(f"unknown method {value!r}; expected one of {', '.join(METHODS)}", line=lineno)
    if key == "aggregation" and value not in ("sum", "mean"):
        raise ConfigError(f"aggregation must be sum or mean, got {value!r}", line=lineno)
    if key == "arch" and value not in ARCH_PRESETS:
        raise ConfigError(f"unknown arch {value!r}; expected one of {', '.join(ARCH_PRESETS)}", line=lineno)
    return value


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentGrid:
    values: dict[str, list] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", line=lineno)
        items = [_convert(key, item, lineno) for item in _split_list(raw, lineno)]
        if not items:
            raise ConfigError(f"{key}: empty list", line=lineno)
        if len(items) > 1 and not _KEYS[key][2]:
            raise ConfigError(f"{key} takes a single value", line=lineno)
        if len(set(items)) != len(items):
            raise ConfigError(f"{key}: duplicate values in list", line=lineno)
        values[key] = items
        lines[key] = lineno

    def one(key):
        return values.get(key, [_KEYS[key][1]])[0]

    data = one("data")
    source = DataSource(kind="synthetic" if data == "synthetic" else "dir",
                        path=None if data == "synthetic" else str((base_dir or Path(".")) / data),
                        per_class=one("per_class"), noise=one("noise"), scale=one("scale"), seed=one("data_seed"),
                        arch=one("arch"))

    axes = [k for k, (_, _, is_axis) in _KEYS.items() if is_axis]
    shared = {"support_fraction": one("support_fraction"), "test_fraction": one("test_fraction")}
    runs, seen = [], {}
    for combo in itertools.product(*(values.get(k, [_KEYS[k][1]]) for k in axes)):
        base = RunSpec(**dict(zip(axes, combo)), **shared)
        for rep in range(one("repetitions")):
            spec = replace(base, seed=base.seed + rep)
            try:
                spec.validate()
            except ConfigError as exc:
                culprit = str(exc).split()[0]
                culprit = {"clients_total": "clients"}.get(culprit, culprit)
                raise ConfigError(str(exc), line=lines.get(culprit)) from None
            origin = (base.seed, rep)
            if spec.key() in seen:
                if seen[spec.key()] == origin:
                    continue  # expansion over an axis this method ignores
                raise ConfigError(f"duplicate run {spec.run_id}", line=lines.get("repetitions", lines.get("seed")))
            seen[spec.key()] = origin
            runs.append(spec)
    return ExperimentGrid(runs, source)


def parse_config(path) -> ExperimentGrid:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------------------
# Output files


def _num(x) -> str:
    return repr(float(x))


def metrics_rows(run_id: str, report: RoundReport) -> list[list[str]]:
    return [[run_id, str(report.round), "train", _num(report.train_loss), _num(report.train_acc)],
            [run_id, str(report.round), "test", _num(report.test_loss), _num(report.test_acc)]]


METRICS_HEADER = ["run_id", "round", "split", "loss", "accuracy"]
CURVES_HEADER = ["round", "train_loss", "train_acc", "test_loss", "test_acc"]
SUMMARY_HEADER = ["run_id", "method", "scenario", "outer_lr", "inner_lr", "clients", "aggregation", "local_epochs",
                  "rounds", "lr", "epochs", "batch_size", "seed", "status", "final_round", "test_acc_pct",
                  "test_loss", "error"]


def emit_curves(history, path) -> Path:
    """One row per recorded round, ready for external plotting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVES_HEADER)
        for r in history:
            w.writerow([r.round, _num(r.train_loss), _num(r.train_acc), _num(r.test_loss), _num(r.test_acc)])
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    spec: RunSpec
    status: str
    final_round: int | None = None
    test_acc: float | None = None
    test_loss: float | None = None
    error: str = ""


def execute_run(run_id: str, cfg: MetaConfig | BaselineConfig, dataset: AlignedDataset, arch: str, run_dir,
                **kwargs) -> tuple[list[RoundReport] | None, str]:
    """Train one configuration, streaming metrics and timings into ``run_dir``.

    Returns ``(history, "")`` on success and ``(None, message)`` when the run
    failed; the traceback is kept in ``error.txt``. Extra keyword arguments
    go to ``run_3mf``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    learner = MultimodalClassifier(ARCH_PRESETS[arch])
    start = last = time.perf_counter()
    with (run_dir / "metrics.csv").open("w", newline="") as metrics, \
            (run_dir / "timing.csv").open("w", newline="") as timing:
        mw = csv.writer(metrics, lineterminator="\n")
        tw = csv.writer(timing, lineterminator="\n")
        mw.writerow(METRICS_HEADER)
        tw.writerow(["round", "seconds", "elapsed"])

        def record(report):
            nonlocal last
            now = time.perf_counter()
            mw.writerows(metrics_rows(run_id, report))
            metrics.flush()
            tw.writerow([report.round, f"{now - last:.3f}", f"{now - start:.3f}"])
            last = now

        try:
            if isinstance(cfg, BaselineConfig):
                _, history = train_baseline(dataset, learner, cfg, callback=record)
            else:
                _, history = run_3mf(dataset, learner, cfg, callback=record, **kwargs)
        except (MMFedError, ArithmeticError, ValueError) as exc:
            log.warning("run %s failed: %s", run_id, exc)
            (run_dir / "error.txt").write_text(traceback.format_exc())
            return None, f"{type(exc).__name__}: {exc}"
    emit_curves(history, run_dir / "curves.csv")
    return history, ""


def run_one(spec: RunSpec, dataset: AlignedDataset, arch: str, out_dir) -> RunResult:
    """Execute one grid entry under ``out_dir/runs/<run_id>/``. Failures are returned, not raised."""
    cfg = spec.baseline_config() if spec.method == "baseline" else spec.meta_config()
    history, error = execute_run(spec.run_id, cfg, dataset, arch, Path(out_dir) / "runs" / spec.run_id)
    if history is None:
        return RunResult(spec, "failed", error=error)
    final = history[-1]
    return RunResult(spec, "ok", final.round, final.test_acc, final.test_loss)


def _pct(acc) -> str:
    return f"{100 * acc:.3f}"


def write_summary_csv(results: list[RunResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for res in results:
            s = res.spec
            ok = res.status == "ok"
            meta = s.method == "fedmeta"
            w.writerow([s.run_id, s.method, s.scenario, _num(s.outer_lr) if meta else "",
                        _num(s.inner_lr) if meta else "", s.clients if meta else "", s.aggregation if meta else "",
                        s.local_epochs if meta else "", s.rounds if meta else "", "" if meta else _num(s.lr),
                        "" if meta else s.epochs, s.batch_size, s.seed, res.status, res.final_round if ok else "", _pct(res.test_acc) if ok else "",
                        _num(res.test_loss) if ok else "", res.error])


def summary_table(results: list[RunResult]) -> str:
    """Rate-pair rows by scenario columns, one block per method/client-count setting.

    A cell holds the final test accuracy in percent; when several seeds fall
    into one cell their mean is shown with the seed count.
    """
    scenarios = list(dict.fromkeys(r.spec.scenario for r in results))
    blocks: dict[tuple, dict[tuple, dict[str, list[RunResult]]]] = {}
    for res in results:
        s = res.spec
        if s.method == "baseline":
            block = ("baseline", f"batch_size = {s.batch_size}")
            row = (f"{s.lr:g}", f"{s.epochs}")
        else:
            per_round = "" if s.clients_per_round is None else f" ({s.clients_per_round} per round)"
            block = ("fedmeta", f"clients = {s.clients}{per_round}, aggregation = {s.aggregation}, "
                                f"E = {s.local_epochs}, T = {s.rounds}, batch_size = {s.batch_size}")
            row = (f"{s.outer_lr:g}", f"{s.inner_lr:g}")
        blocks.setdefault(block, {}).setdefault(row, {}).setdefault(s.scenario, []).append(res)

    out = io.StringIO()
    for (method, desc), rows in blocks.items():
        row_names = ["lr", "epochs"] if method == "baseline" else ["outer_lr", "inner_lr"]
        header = row_names + scenarios
        table = [header]
        for row, cells in rows.items():
            line = list(row)
            for scen in scenarios:
                runs = cells.get(scen, [])
                ok = [r.test_acc for r in runs if r.status == "ok"]
                if not runs:
                    line.append("-")
                elif len(ok) < len(runs):
                    line.append("FAILED")
                elif len(ok) == 1:
                    line.append(_pct(ok[0]))
                else:
                    line.append(f"{_pct(sum(ok) / len(ok))} (n={len(ok)})")
            table.append(line)
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        out.write(f"{method}: {desc}\n")
        for r in table:
            out.write("  ".join(cell.rjust(w) for cell, w in zip(r, widths)).rstrip() + "\n")
        out.write("\n")
    return out.getvalue()


def _run_in_worker(args):
    spec, source, dataset, out_dir = args
    return run_one(spec, dataset if dataset is not None else _worker_dataset(source), source.arch, out_dir)


_DATASETS: dict[DataSource, AlignedDataset] = {}


def _worker_dataset(source: DataSource) -> AlignedDataset:
    if source not in _DATASETS:
        _DATASETS[source] = source.load()
    return _DATASETS[source]


def run_grid(grid: ExperimentGrid, out_dir, dataset: AlignedDataset | None = None, jobs: int = 1) -> list[RunResult]:
    """Run every spec, then write ``summary.csv`` and ``summary.txt``.

    Runs share nothing mutable, so ``jobs > 1`` runs them in worker
    processes; the outputs are identical either way.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_in_worker, [(s, grid.source, dataset, out_dir) for s in grid.runs]))
    else:
        if dataset is None:
            dataset = grid.source.load()
        results = []
        for i, spec in enumerate(grid.runs, start=1):
            log.info("run %d/%d: %s", i, len(grid.runs), spec.run_id)
            results.append(run_one(spec, dataset, grid.source.arch, out_dir))
    write_summary_csv(results, out_dir / "summary.csv")
    (out_dir / "summary.txt").write_text(summary_table(results))
    return results
