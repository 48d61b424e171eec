"""Benchmark orchestration: plans, method presets, report tables, boards.

A benchmark plan names a saved model, a saved dataset, a set of corruptions,
and a set of named method configurations. Every (method x corruption x seed)
cell runs on a fresh model copy over an identically corrupted, identically
shuffled stream, so method columns are directly comparable. All randomness
is derived from the cell coordinates, which makes reports byte-identical
across reruns regardless of thread scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import TARGET_SCOPES, WEIGHTINGS, TTAConfig, iter_batches, run_stream
from .errors import ConfigError, FormatError, InsufficientDataError
from .harness import (
    CORRUPTION_GROUPS,
    CORRUPTION_KINDS,
    CorruptionSpec,
    Dataset,
    corrupt,
    load_dataset,
)
from .metrics import (
    ActivationRecord,
    dump_records,
    load_records,
    load_scores,
    pac,
    pca_w,
    pearson,
    prediction_stability,
    sample_pca_w,
    selection_rate,
    spearman,
)
from .model import AGGREGATIONS, PARAM_MODES, PrototypeModel, canonical_dumps, load_model

DEFAULT_CORRUPTIONS = tuple(CorruptionSpec(kind, 5) for kind in CORRUPTION_KINDS)
METRIC_CHOICES = ("accuracy", "interpretability", "efficiency")
ABLATION_AXES = ("filter", "param_mode", "consensus", "target_scope", "weighting")


def method_presets() -> dict[str, TTAConfig]:
    """The four benchmark methods with their tuned configurations.

    The prototype-guided methods use the relative (min-max) similarity
    mapping of the default model together with mean sub-prototype consensus
    and the entropy cap; these were the settings that recover accuracy on
    the synthetic benchmark instead of drifting. Tent adapts only the
    normalization affine parameters, its canonical form.
    """
    return {
        "unadapted": TTAConfig(method="unadapted"),
        "tent": TTAConfig(method="tent", param_mode="norm_only", lr=1e-3),
        "prototta": TTAConfig(
            method="prototta",
            param_mode="all_adaptive",
            tau_sim=0.65,
            use_entropy_constraint=True,
            consensus="mean",
            lr=1.5e-3,
        ),
        "prototta_plus": TTAConfig(
            method="prototta_plus",
            tau_sim=0.65,
            use_entropy_constraint=True,
            consensus="mean",
            lr=1e-4,
        ),
    }


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary string-able parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class BenchmarkPlan:
    model_path: str
    dataset_path: str
    output_dir: str
    corruptions: tuple[CorruptionSpec, ...] = DEFAULT_CORRUPTIONS
    methods: tuple[tuple[str, TTAConfig], ...] = ()
    metrics: tuple[str, ...] = METRIC_CHOICES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    num_batches: int = 64
    board_k: int = 5
    record_batches: int = 4

    def __post_init__(self):
        if not self.methods:
            object.__setattr__(self, "methods", tuple(method_presets().items()))
        object.__setattr__(
            self,
            "corruptions",
            tuple(
                c if isinstance(c, CorruptionSpec) else CorruptionSpec.parse(c)
                for c in self.corruptions
            ),
        )
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.corruptions:
            raise ConfigError("plan needs at least one corruption")
        if not self.methods:
            raise ConfigError("plan needs at least one method")
        names = [name for name, _ in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"method names must be unique, got {names}")
        unknown = set(self.metrics) - set(METRIC_CHOICES)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRIC_CHOICES}")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if self.num_batches < 1:
            raise ConfigError(f"num_batches must be positive, got {self.num_batches}")
        if self.board_k < 1:
            raise ConfigError(f"board_k must be positive, got {self.board_k}")
        if self.record_batches < 1:
            raise ConfigError(f"record_batches must be positive, got {self.record_batches}")

    @property
    def method_map(self) -> dict[str, TTAConfig]:
        return dict(self.methods)

    def to_dict(self) -> dict:
        return {
            "model_path": self.model_path,
            "dataset_path": self.dataset_path,
            "output_dir": self.output_dir,
            "corruptions": [str(c) for c in self.corruptions],
            "methods": [[name, cfg.to_dict()] for name, cfg in self.methods],
            "metrics": list(self.metrics),
            "seeds": list(self.seeds),
            "num_batches": self.num_batches,
            "board_k": self.board_k,
            "record_batches": self.record_batches,
        }

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPlan":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown plan keys: {sorted(extra)}")
        kwargs = dict(d)
        if "corruptions" in kwargs:
            kwargs["corruptions"] = tuple(
                c if isinstance(c, CorruptionSpec) else CorruptionSpec.parse(c)
                for c in kwargs["corruptions"]
            )
        if "methods" in kwargs:
            pairs = kwargs["methods"]
            if isinstance(pairs, dict):
                pairs = pairs.items()
            kwargs["methods"] = tuple(
                (name, cfg if isinstance(cfg, TTAConfig) else TTAConfig.from_dict(cfg))
                for name, cfg in pairs
            )
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkPlan":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid plan JSON: {exc}") from None


@dataclass
class CellResult:
    """Everything one (method x corruption x seed) run contributes to reports."""

    method: str
    corruption: str
    seed: int
    accuracy: float  # percent
    selection_rate: float  # percent
    throughput: float  # samples per second, median over non-warm-up batches
    pac_mean: float = float("nan")
    pca_w_mean: float = float("nan")
    stability: float = float("nan")
    batch_sizes: list[int] = field(default_factory=list)
    batch_accuracies: list[float] = field(default_factory=list)
    records: list[ActivationRecord] = field(default_factory=list)


@dataclass
class BenchmarkResult:
    plan: BenchmarkPlan
    cells: list[CellResult]
    paths: dict[str, Path]

    def cell(self, method: str, corruption: str, seed: int) -> CellResult:
        for c in self.cells:
            if (c.method, c.corruption, c.seed) == (method, corruption, seed):
                return c
        raise KeyError((method, corruption, seed))


def _median_cell_throughput(report) -> float:
    records = report.records[1:] if len(report.records) > 1 else report.records
    rates = [r.size / r.duration_s for r in records if r.duration_s > 0]
    return float(np.median(rates)) if rates else float("nan")


def _run_cell(
    model: PrototypeModel,
    dataset: Dataset,
    cor: CorruptionSpec,
    name: str,
    cfg: TTAConfig,
    seed: int,
    plan: BenchmarkPlan,
    want_interp: bool,
    keep_records: bool,
) -> CellResult:
    stream_x = corrupt(dataset.test_x, cor, seed=derive_seed("corrupt", str(cor), seed))
    order = np.random.default_rng(derive_seed("order", str(cor), seed)).permutation(len(stream_x))
    take = min(len(order), plan.num_batches * cfg.batch_size)
    stream_x, stream_y = stream_x[order[:take]], dataset.test_y[order[:take]]
    work = model.copy()
    report = run_stream(
        work,
        iter_batches(stream_x, stream_y, cfg.batch_size),
        cfg,
        collect_samples=want_interp or keep_records,
    )
    cell = CellResult(
        method=name,
        corruption=str(cor),
        seed=seed,
        accuracy=100.0 * report.accuracy,
        selection_rate=selection_rate(report),
        throughput=_median_cell_throughput(report),
        batch_sizes=[r.size for r in report.records],
        batch_accuracies=[100.0 * a for a in report.batch_accuracies],
    )
    if want_interp:
        recs = report.sample_records
        cell.pac_mean = pac(recs).mean
        cell.pca_w_mean = pca_w(
            np.stack([r.adapted_activations for r in recs]),
            model.head.data,
            model.class_of,
            np.asarray([r.ground_truth for r in recs]),
            k=plan.board_k,
        ).mean
        cell.stability = prediction_stability(recs)
    if keep_records:
        cell.records = report.sample_records[: plan.record_batches * cfg.batch_size]
    return cell


def _check_plan_files(plan: BenchmarkPlan) -> None:
    for label, path in (("model", plan.model_path), ("dataset", plan.dataset_path)):
        if not Path(path).is_file():
            raise ConfigError(f"{label} file not found: {path}")


def _dump_cell_records(cells: list[CellResult], out: Path) -> Path:
    """Per-sample record dumps: every table row has a first-seed records file."""
    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    for c in cells:
        if c.records:
            name = f"{c.method}_{c.corruption.replace(':', '_')}.jsonl"
            dump_records(c.records, rec_dir / name)
    return rec_dir


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _accuracy_markdown(plan: BenchmarkPlan, by_mc: dict) -> str:
    """Markdown table grouped by corruption family, methods as rows."""
    cors = [str(c) for c in plan.corruptions]
    groups: dict[str, list[str]] = {}
    for c in plan.corruptions:
        groups.setdefault(CORRUPTION_GROUPS[c.kind], []).append(str(c))
    lines = ["# Accuracy (%) by corruption", ""]
    header = ["Method"]
    for gname in groups:
        header.extend(f"{gname}: {c}" for c in groups[gname])
    header.append("Total")
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for name, _ in plan.methods:
        row = [name]
        means = []
        for c in cors:
            m, s = _mean_std(by_mc[(name, c)])
            means.append(m)
            row.append(f"{m:.2f} ± {s:.2f}")
        tm, ts = _mean_std(means)
        row.append(f"{tm:.2f} ± {ts:.2f}")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _load_plan_inputs(
    plan: BenchmarkPlan,
    model: PrototypeModel | None,
    dataset: Dataset | None,
) -> tuple[PrototypeModel, Dataset]:
    if model is None or dataset is None:
        _check_plan_files(plan)
        model = load_model(plan.model_path) if model is None else model
        dataset = load_dataset(plan.dataset_path) if dataset is None else dataset
    return model, dataset


def _run_cells(plan: BenchmarkPlan, model: PrototypeModel, dataset: Dataset) -> list[CellResult]:
    """Run all plan cells, possibly in parallel; result order is job order."""
    want_interp = "interpretability" in plan.metrics
    first_seed = plan.seeds[0]
    jobs = [
        (cor, name, cfg, seed)
        for cor in plan.corruptions
        for name, cfg in plan.methods
        for seed in plan.seeds
    ]

    def work(job):
        cor, name, cfg, seed = job
        return _run_cell(
            model, dataset, cor, name, cfg, seed, plan, want_interp, keep_records=seed == first_seed
        )

    workers = os.environ.get("PTTA_THREADS", "")
    max_workers = int(workers) if workers.strip() else (os.cpu_count() or 1)
    max_workers = max(1, min(max_workers, len(jobs)))
    if max_workers == 1:
        return [work(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(work, jobs))


def run_benchmark(
    plan: BenchmarkPlan,
    model: PrototypeModel | None = None,
    dataset: Dataset | None = None,
) -> BenchmarkResult:
    """Run every cell of the plan and emit the report files.

    Passing model/dataset objects skips loading from the plan paths (used by
    tests); otherwise both files must exist before any work starts.
    """
    model, dataset = _load_plan_inputs(plan, model, dataset)
    want_interp = "interpretability" in plan.metrics
    cells = _run_cells(plan, model, dataset)

    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    by_mc: dict[tuple[str, str], list[float]] = {}
    for c in cells:
        by_mc.setdefault((c.method, c.corruption), []).append(c.accuracy)

    if "accuracy" in plan.metrics:
        raw_rows = [[c.method, c.corruption, c.seed, c.accuracy] for c in cells]
        paths["accuracy_raw"] = out / "accuracy_raw.csv"
        _write_csv(paths["accuracy_raw"], ["method", "corruption", "seed", "accuracy"], raw_rows)
        batch_rows = [
            [c.method, c.corruption, c.seed, i, size, acc]
            for c in cells
            for i, (size, acc) in enumerate(zip(c.batch_sizes, c.batch_accuracies))
        ]
        paths["accuracy_batches"] = out / "accuracy_batches.csv"
        _write_csv(
            paths["accuracy_batches"],
            ["method", "corruption", "seed", "batch", "size", "accuracy"],
            batch_rows,
        )
        agg_rows = []
        for name, _ in plan.methods:
            means = []
            for cor in plan.corruptions:
                m, s = _mean_std(by_mc[(name, str(cor))])
                means.append(m)
                agg_rows.append([name, str(cor), m, s])
            tm, ts = _mean_std(means)
            agg_rows.append([name, "TOTAL", tm, ts])
        paths["accuracy"] = out / "accuracy.csv"
        _write_csv(paths["accuracy"], ["method", "corruption", "mean", "std"], agg_rows)
        paths["accuracy_md"] = out / "accuracy.md"
        paths["accuracy_md"].write_text(_accuracy_markdown(plan, by_mc), encoding="utf-8")

    if want_interp:
        rows = []
        for name, _ in plan.methods:
            per_cor: dict[str, list[float]] = {"pac": [], "pca_w": [], "stab": [], "sel": []}
            for cor in plan.corruptions:
                seeds_cells = [c for c in cells if (c.method, c.corruption) == (name, str(cor))]
                pac_m, pac_s = _mean_std([c.pac_mean for c in seeds_cells])
                pw_m, pw_s = _mean_std([c.pca_w_mean for c in seeds_cells])
                st_m, st_s = _mean_std([c.stability for c in seeds_cells])
                se_m, se_s = _mean_std([c.selection_rate for c in seeds_cells])
                rows.append([name, str(cor), pac_m, pac_s, pw_m, pw_s, st_m, st_s, se_m, se_s])
                per_cor["pac"].append(pac_m)
                per_cor["pca_w"].append(pw_m)
                per_cor["stab"].append(st_m)
                per_cor["sel"].append(se_m)
            rows.append(
                [name, "TOTAL"]
                + [v for key in ("pac", "pca_w", "stab", "sel") for v in _mean_std(per_cor[key])]
            )
        paths["interpretability"] = out / "interpretability.csv"
        _write_csv(
            paths["interpretability"],
            [
                "method",
                "corruption",
                "pac_mean",
                "pac_std",
                "pca_w_mean",
                "pca_w_std",
                "stability_mean",
                "stability_std",
                "selection_rate_mean",
                "selection_rate_std",
            ],
            rows,
        )

    paths["records"] = _dump_cell_records(cells, out)

    if "efficiency" in plan.metrics and "unadapted" in dict(plan.methods):
        rows = []
        for name, _ in plan.methods:
            speeds_by_cor = []
            for cor in plan.corruptions:
                ratios = []
                for seed in plan.seeds:
                    base = next(
                        c
                        for c in cells
                        if (c.method, c.corruption, c.seed) == ("unadapted", str(cor), seed)
                    )
                    c = next(
                        x
                        for x in cells
                        if (x.method, x.corruption, x.seed) == (name, str(cor), seed)
                    )
                    ratios.append(100.0 * c.throughput / base.throughput)
                m, s = _mean_std(ratios)
                rows.append([name, str(cor), m, s])
                speeds_by_cor.append(m)
            tm, ts = _mean_std(speeds_by_cor)
            rows.append([name, "TOTAL", tm, ts])
        paths["efficiency"] = out / "efficiency.csv"
        _write_csv(paths["efficiency"], ["method", "corruption", "relative_speed_mean", "relative_speed_std"], rows)

    return BenchmarkResult(plan=plan, cells=cells, paths=paths)


@dataclass
class AblationRow:
    axis: str
    setting: str
    mean: float
    std: float
    min: float
    max: float


def _ablation_variants(base: TTAConfig, axis: str) -> list[tuple[str, TTAConfig]]:
    if axis == "filter":
        return [
            ("with_filter", base),
            ("no_filter", replace(base, tau_sim=1e-6, use_entropy_constraint=False)),
        ]
    if axis == "param_mode":
        return [(mode, replace(base, param_mode=mode)) for mode in PARAM_MODES]
    if axis == "consensus":
        return [(agg, replace(base, consensus=agg)) for agg in AGGREGATIONS]
    if axis == "target_scope":
        return [(scope, replace(base, target_scope=scope)) for scope in TARGET_SCOPES]
    if axis == "weighting":
        return [(w, replace(base, weighting=w)) for w in WEIGHTINGS]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def run_ablation(
    plan: BenchmarkPlan,
    axis: str,
    model: PrototypeModel | None = None,
    dataset: Dataset | None = None,
) -> list[AblationRow]:
    """Clone the plan's prototta config across one axis and compare."""
    methods = plan.method_map
    if "prototta" not in methods:
        raise ConfigError("ablation needs a method named 'prototta' in the plan")
    variants = _ablation_variants(methods["prototta"], axis)
    sub_plan = replace(plan, methods=tuple(variants), metrics=("accuracy",))
    model, dataset = _load_plan_inputs(sub_plan, model, dataset)
    cells = _run_cells(sub_plan, model, dataset)
    by_mc: dict[tuple[str, str], list[float]] = {}
    for c in cells:
        by_mc.setdefault((c.method, c.corruption), []).append(c.accuracy)
    rows = []
    for setting, _ in variants:
        cor_means = [float(np.mean(by_mc[(setting, str(cor))])) for cor in plan.corruptions]
        arr = np.asarray(cor_means)
        rows.append(
            AblationRow(
                axis=axis,
                setting=setting,
                mean=float(arr.mean()),
                std=float(arr.std()),
                min=float(arr.min()),
                max=float(arr.max()),
            )
        )
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / f"ablation_{axis}.csv",
        ["axis", "setting", "mean", "std", "min", "max"],
        [[r.axis, r.setting, r.mean, r.std, r.min, r.max] for r in rows],
    )
    _dump_cell_records(cells, out)
    return rows


def build_board(record: ActivationRecord, model: PrototypeModel, k: int, method: str) -> dict:
    """One sample's top-k contributing prototypes under its adapted prediction."""
    P = len(model.class_of)
    if len(record.adapted_activations) != P:
        raise FormatError(
            f"record {record.sample_id}: activation length {len(record.adapted_activations)}"
            f" does not match the model's {P} prototypes"
        )
    if record.mapped_activations is None:
        raise FormatError(f"record {record.sample_id}: missing mapped activations")
    weights = np.abs(model.head.data[record.adapted_prediction])
    contributions = record.adapted_activations * weights
    top = np.argsort(-contributions, kind="stable")[: min(k, P)]
    return {
        "sample_id": record.sample_id,
        "method": method,
        "predicted_class": record.adapted_prediction,
        "ground_truth": record.ground_truth,
        "prototypes": [
            {
                "prototype_id": int(p),
                "owning_class": int(model.class_of[p]),
                "contribution": float(contributions[p]),
                "raw_similarity": float(record.adapted_activations[p]),
                "mapped_similarity": float(record.mapped_activations[p]),
            }
            for p in top
        ],
    }


def export_boards(
    records: list[ActivationRecord],
    model: PrototypeModel,
    k: int,
    method: str,
    out_dir,
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for record in sorted(records, key=lambda r: r.sample_id):
        board = build_board(record, model, k, method)
        path = out / f"{method}_{record.sample_id:06d}.json"
        path.write_text(json.dumps(board, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    return written


def board_sample_pca_w(board: dict) -> float:
    """Eq.-7-style ratio over the prototypes stored in one board."""
    contributions = np.asarray([p["contribution"] for p in board["prototypes"]], dtype=np.float64)
    classes = np.asarray([p["owning_class"] for p in board["prototypes"]])
    return sample_pca_w(contributions, classes, board["ground_truth"], top_set_size=len(contributions))


@dataclass
class CorrelationReport:
    rows: list[list]  # scope, n, pearson, spearman
    warnings: list[str]


def correlate_scores(boards_dir, scores_path, out_path=None) -> CorrelationReport:
    """Join per-board interpretability ratios with external per-sample scores."""
    boards_dir = Path(boards_dir)
    if not boards_dir.is_dir():
        raise ConfigError(f"boards directory not found: {boards_dir}")
    board_files = sorted(boards_dir.glob("*.json"))
    if not board_files:
        raise InsufficientDataError(f"no board files in {boards_dir}")
    scores = load_scores(scores_path)
    per_method: dict[str, list[tuple[float, float]]] = {}
    warnings: list[str] = []
    seen_ids = set()
    for path in board_files:
        try:
            board = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid board JSON: {exc}") from None
        sid = int(board["sample_id"])
        seen_ids.add(sid)
        if sid not in scores:
            warnings.append(f"no external score for sample {sid} ({path.name})")
            continue
        per_method.setdefault(board["method"], []).append(
            (board_sample_pca_w(board), scores[sid])
        )
    for sid in sorted(set(scores) - seen_ids):
        warnings.append(f"score for sample {sid} has no board")
    pooled = [pair for pairs in per_method.values() for pair in pairs]
    if len(pooled) < 3:
        raise InsufficientDataError(f"need at least 3 matched samples, got {len(pooled)}")
    rows: list[list] = []

    def corr_row(scope: str, pairs: list[tuple[float, float]]) -> list:
        xs = [a for a, _ in pairs]
        ys = [b for _, b in pairs]
        return [scope, len(pairs), pearson(xs, ys), spearman(xs, ys)]

    rows.append(corr_row("pooled", pooled))
    for name in sorted(per_method):
        if len(per_method[name]) >= 3:
            rows.append(corr_row(name, per_method[name]))
        else:
            warnings.append(f"method {name}: only {len(per_method[name])} matches, skipped")
    if out_path is not None:
        _write_csv(Path(out_path), ["scope", "n", "pearson", "spearman"], rows)
    return CorrelationReport(rows=rows, warnings=warnings)
