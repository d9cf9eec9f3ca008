"""Experiment configuration, orchestration and report files.

A run is fully determined by an :class:`ExperimentConfig`. Every seed is
derived from ``config.seed``; the output directory is where artifacts go and
is not part of the experiment, so it is left out of the embedded config and
its hash. Reports are canonical JSON (sorted keys, fixed float repr), so
identical configs give byte-identical files. Wall-clock timestamps go to a
sidecar ``*.meta.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
from collections.abc import Mapping, Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .adapt import STRATEGIES, AdaptConfig, run_stream, write_traces
from .data import CORRUPTIONS, CorruptionSpec, corrupt_images, generate_shape_dataset
from .errors import ConfigError, SchemaVersionError
from .metrics import EvalSet, summarize
from .model import ClassifierModel, PretrainConfig, load_checkpoint, predict_probs, pretrain, save_checkpoint
from .perturb import PatchShuffleSpec
from .salting import SaltConfig, salt_stream
from .selection import Thresholds, write_records_csv

REPORT_SCHEMA_VERSION = 1
ENV_PREFIX = "ETAGE_"
DEFAULT_SWEEP = (1, 2, 4, 8, 16, 32, 64)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    n_per_class: int = Field(1500, ge=1)
    num_classes: int = Field(4, ge=2, le=6)
    spurious_strength: float = Field(0.0, ge=0.0, le=1.0)
    fractions: tuple[float, float, float] = (0.3, 0.1, 0.6)


class PretrainSection(_Section):
    epochs: int = Field(100, ge=0)
    learning_rate: float = Field(0.05, gt=0)
    batch_size: int = Field(64, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)


class AdaptSection(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    tau_ent: float | None = Field(None, gt=0)
    tau_grad: float | None = Field(None, gt=0)
    grad_quantile: float | None = Field(0.9, gt=0, lt=1)
    tau_plpd: float = Field(0.2, ge=-1, le=1)
    patch_size: int = Field(4, ge=1)
    per_image_permutation: bool = False
    tent_all_samples: bool = False


class SaltSection(_Section):
    fraction: float = Field(0.0, ge=0, le=1)
    target_class: int = Field(0, ge=0)


class ExperimentConfig(_Section):
    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    pretrain: PretrainSection = PretrainSection()
    corruptions: tuple[str, ...] = ("gaussian_noise:5",)
    strategies: tuple[Literal["no_adapt", "tent", "entropy_plpd", "etage"], ...] = STRATEGIES
    adapt: AdaptSection = AdaptSection()
    salt: SaltSection = SaltSection()
    reset_per_corruption: bool = True
    sweep_sizes: tuple[int, ...] = DEFAULT_SWEEP
    n_bins: int = Field(15, ge=1)
    write_sample_records: bool = True
    diagnostic: bool = False
    checkpoint: str | None = None

    @field_validator("corruptions")
    @classmethod
    def _known_corruptions(cls, v):
        if not v:
            raise ValueError("at least one corruption is required")
        for text in v:
            kind, _, sev = text.partition(":")
            if kind not in CORRUPTIONS:
                raise ValueError(f"unknown corruption kind {kind!r}")
            if sev not in {"1", "2", "3", "4", "5"}:
                raise ValueError(f"severity of {text!r} must be 1..5")
        return v

    @field_validator("strategies", "sweep_sizes")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("must not be empty")
        return v

    @field_validator("sweep_sizes")
    @classmethod
    def _positive(cls, v):
        if any(s < 1 for s in v):
            raise ValueError("batch sizes must be positive")
        return v

    # ------------------------------------------------------------ derived

    def thresholds(self) -> Thresholds:
        a = self.adapt
        tau_ent = a.tau_ent if a.tau_ent is not None else Thresholds.default(self.dataset.num_classes).tau_ent
        if a.tau_grad is not None:
            return Thresholds(tau_ent, tau_grad=a.tau_grad, grad_quantile=None, tau_plpd=a.tau_plpd)
        return Thresholds(tau_ent, grad_quantile=a.grad_quantile, tau_plpd=a.tau_plpd)

    def adapt_config(self, strategy: str, batch_size: int | None = None) -> AdaptConfig:
        a = self.adapt
        return AdaptConfig(
            strategy=strategy,
            learning_rate=a.learning_rate,
            momentum=a.momentum,
            batch_size=batch_size or a.batch_size,
            thresholds=self.thresholds(),
            shuffle_spec=PatchShuffleSpec(a.patch_size, 0, a.per_image_permutation),
            seed=self.seed,
            tent_all_samples=a.tent_all_samples,
        )

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(p.epochs, p.learning_rate, p.batch_size, self.seed, p.momentum)

    def payload(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        return config_hash(self.payload())


def config_hash(payload: Mapping) -> str:
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------- loading


def _deep_merge(base: dict, extra: Mapping) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """``ETAGE_ADAPT__BATCH_SIZE=4`` becomes ``{"adapt": {"batch_size": 4}}``.

    Values are read as JSON when possible and kept as strings otherwise.
    """
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = "unknown key" if e["type"] == "extra_forbidden" else e["msg"]
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def load_config(
    path: str | Path | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Defaults, then the JSON file, then ``ETAGE_*`` variables, then ``overrides``."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = _deep_merge(data, env_overrides(environ))
    data = _deep_merge(data, overrides or {})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


# ---------------------------------------------------------------- pipeline


def prepare_data(config: ExperimentConfig):
    d = config.dataset
    return generate_shape_dataset(d.n_per_class, d.num_classes, config.seed, d.spurious_strength, d.fractions)


def build_source_model(config: ExperimentConfig, train=None) -> ClassifierModel:
    if train is None:
        train = prepare_data(config)[0]
    model = ClassifierModel(num_classes=config.dataset.num_classes, seed=config.seed)
    model, _ = pretrain(model, train.images, train.labels, config.pretrain_config())
    return model


def checkpoint_path(config: ExperimentConfig, out: Path) -> Path:
    return Path(config.checkpoint) if config.checkpoint else out / "checkpoint.npz"


def cmd_pretrain(config: ExperimentConfig, out: str | Path) -> Path:
    """Pretrain on the synthetic source split and write the checkpoint."""
    out = Path(out)
    train, val, _ = prepare_data(config)
    model = ClassifierModel(num_classes=config.dataset.num_classes, seed=config.seed)
    model, curve = pretrain(model, train.images, train.labels, config.pretrain_config(), val=(val.images, val.labels))
    path = save_checkpoint(model, checkpoint_path(config, out), pretrain_seed=config.seed)
    summary = {
        "config": config.payload(),
        "config_hash": config.hash(),
        "final_loss": curve.epoch_loss[-1] if curve.epoch_loss else None,
        "final_train_accuracy": curve.epoch_train_acc[-1] if curve.epoch_train_acc else None,
        "val_accuracy": curve.val_accuracy,
        "state_hash": model.state_hash(),
    }
    _write_json(out / "pretrain.json", summary)
    return path


def _load_source(config: ExperimentConfig, out: Path, train, required: bool) -> ClassifierModel:
    path = checkpoint_path(config, out)
    if path.exists():
        model, _ = load_checkpoint(path)
        if model.num_classes != config.dataset.num_classes:
            raise ConfigError(f"checkpoint {path} has {model.num_classes} classes, config asks for "
                              f"{config.dataset.num_classes}")
        return model
    if required or config.checkpoint:
        raise ConfigError(f"checkpoint not found: {path} (run `etage pretrain` first)")
    model = build_source_model(config, train)
    save_checkpoint(model, path, pretrain_seed=config.seed)
    return model


def _stream_for(config: ExperimentConfig, tag: str, test, val, model):
    spec = CorruptionSpec.parse(tag, seed=config.seed)
    images = corrupt_images(test.images, spec)
    labels = test.labels
    mask = np.zeros(len(labels), bool)
    if config.salt.fraction > 0:
        ref = corrupt_images(val.images, CorruptionSpec.parse(tag, seed=config.seed + 1))
        salted = salt_stream(
            model, images, labels, ref, val.labels, config.thresholds().tau_ent,
            SaltConfig(fraction=config.salt.fraction, target_class=config.salt.target_class, seed=config.seed),
        )
        images, mask = salted.images, salted.salted
    return spec, images, labels, mask


def _file_stem(spec: CorruptionSpec, strategy: str) -> str:
    return f"{spec.kind}-s{spec.severity}-{strategy}"


def cmd_run(config: ExperimentConfig, out: str | Path) -> Path:
    """Every (corruption, strategy) pair; writes ``report.json``, traces and sample CSVs."""
    out = Path(out)
    train, val, test = prepare_data(config)
    source = _load_source(config, out, train, required=False)
    frozen = source.frozen_hash()
    carried: dict[str, ClassifierModel] = {}
    results = []
    for tag in config.corruptions:
        spec, images, labels, salted = _stream_for(config, tag, test, val, source)
        keep = ~salted
        for strategy in config.strategies:
            if config.reset_per_corruption or strategy not in carried:
                start = source.copy()
            else:
                start = carried[strategy]
            res = run_stream(
                start, images, config.adapt_config(strategy), copy_model=False,
                keep_selections=config.write_sample_records, diagnostic=config.diagnostic,
            )
            carried[strategy] = res.model
            stem = _file_stem(spec, strategy)
            trace_file = out / "traces" / f"{stem}.jsonl"
            trace_file.unlink(missing_ok=True)
            write_traces(res.traces, trace_file)
            records_file = None
            if config.write_sample_records and strategy != "no_adapt":
                records_file = out / "records" / f"{stem}.csv"
                records_file.unlink(missing_ok=True)
                for b, sel in enumerate(res.selections):
                    if sel is not None:
                        write_records_csv(sel.records, records_file, {"batch": b})
            m = summarize(EvalSet(res.probs[keep], labels[keep]), config.n_bins)
            post = predict_probs(res.model, images[keep].reshape(int(keep.sum()), -1)).data
            results.append(
                {
                    "corruption": spec.kind,
                    "severity": spec.severity,
                    "strategy": strategy,
                    **m,
                    "post_stream_accuracy": float((post.argmax(axis=1) == labels[keep]).mean()),
                    "selection_rate": res.selection_rate,
                    "n_samples": int(len(labels)),
                    "n_salted": int(salted.sum()),
                    "frozen_hash_conserved": res.model.frozen_hash() == frozen,
                    "trace_file": trace_file.relative_to(out).as_posix(),
                    "records_file": None if records_file is None else records_file.relative_to(out).as_posix(),
                }
            )
    report = _report("run", config, source, results)
    path = _write_json(out / "report.json", report)
    _write_meta(path)
    return path


def cmd_sweep_batchsize(config: ExperimentConfig, out: str | Path, sizes: Sequence[int] | None = None) -> Path:
    """Accuracy for each (corruption, strategy, batch size), fresh checkpoint copy each time."""
    out = Path(out)
    sizes = tuple(sizes or config.sweep_sizes)
    if not sizes:
        raise ConfigError("sizes must not be empty")
    train, val, test = prepare_data(config)
    source = _load_source(config, out, train, required=True)
    rows = []
    for tag in config.corruptions:
        spec, images, labels, salted = _stream_for(config, tag, test, val, source)
        keep = ~salted
        for strategy in config.strategies:
            for size in sizes:
                res = run_stream(source, images, config.adapt_config(strategy, size))
                acc = float((res.predictions[keep] == labels[keep]).mean())
                rows.append({"corruption": spec.kind, "severity": spec.severity, "strategy": strategy,
                             "batch_size": size, "accuracy": acc})
    report = _report("sweep", config, source, rows)
    path = _write_json(out / "sweep.json", report)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_meta(path)
    return path


def _report(kind: str, config: ExperimentConfig, source: ClassifierModel, results: list[dict]) -> dict:
    for r in results:
        for k, v in r.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise FloatingPointError(f"non-finite {k} in {kind} report")
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": kind,
        "config": config.payload(),
        "environment": {
            "package_version": __version__,
            "numpy_version": np.__version__,
            "seed": config.seed,
            "config_hash": config.hash(),
            "source_state_hash": source.state_hash(),
        },
        "results": results,
    }


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def _write_meta(report_path: Path) -> None:
    meta = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "python": platform.python_version(),
        "host": platform.node(),
    }
    _write_json(report_path.with_suffix(".meta.json"), meta)


# ---------------------------------------------------------------- tables


def read_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text())
    version = report.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: report schema version {version!r} cannot be read by this version "
            f"(expects {REPORT_SCHEMA_VERSION}); regenerate it with `etage run` or migrate it first"
        )
    if report.get("kind") != "run":
        raise ConfigError(f"{path}: expected a run report, got kind {report.get('kind')!r}")
    if config_hash(report["config"]) != report["environment"]["config_hash"]:
        raise ConfigError(f"{path}: embedded config does not match its hash")
    return report


def comparison_table(reports: Sequence[Mapping], metric: str = "accuracy") -> tuple[list[str], list[str], dict]:
    """Mean ``metric`` per (strategy, corruption tag) across the given reports."""
    cells: dict[tuple[str, str], list[float]] = {}
    strategies: list[str] = []
    columns: list[str] = []
    for rep in reports:
        for r in rep["results"]:
            col = f"{r['corruption']}:{r['severity']}"
            if r["strategy"] not in strategies:
                strategies.append(r["strategy"])
            if col not in columns:
                columns.append(col)
            if r.get(metric) is not None:
                cells.setdefault((r["strategy"], col), []).append(float(r[metric]))
    table = {k: float(np.mean(v)) for k, v in cells.items()}
    return strategies, columns, table


def _markers(values: dict[str, float | None]) -> dict[str, str]:
    """``*`` for the best value in a column, ``+`` for the second best (ties share)."""
    distinct = sorted({v for v in values.values() if v is not None}, reverse=True)
    best = distinct[0] if distinct else None
    second = distinct[1] if len(distinct) > 1 else None
    return {k: "*" if v is not None and v == best else "+" if v is not None and v == second else "" for k, v in values.items()}


def format_report(reports: Sequence[Mapping], metric: str = "accuracy") -> tuple[str, str]:
    """Plain-text and CSV tables; values in percent, two decimals."""
    strategies, columns, table = comparison_table(reports, metric)
    header = ["strategy", *columns, "average"]
    grid: dict[str, dict[str, float | None]] = {}
    for s in strategies:
        row = {c: table.get((s, c)) for c in columns}
        present = [v for v in row.values() if v is not None]
        row["average"] = float(np.mean(present)) if len(present) == len(columns) else None
        grid[s] = row
    marks = {c: _markers({s: grid[s][c] for s in strategies}) for c in [*columns, "average"]}

    def cell(s, c):
        v = grid[s][c]
        return "-" if v is None else f"{100 * v:.2f}{marks[c][s]}"

    rows = [[s, *(cell(s, c) for c in [*columns, "average"])] for s in strategies]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    text = "\n".join(lines) + "\n\n* best, + second best\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*header[:-1], "average", *(f"{c}_mark" for c in [*columns, "average"])])
    for s in strategies:
        vals = [grid[s][c] for c in [*columns, "average"]]
        w.writerow([s, *("" if v is None else repr(v) for v in vals), *(marks[c][s] for c in [*columns, "average"])])
    return text, buf.getvalue()


def cmd_report(paths: Sequence[str | Path], out: str | Path | None = None, metric: str = "accuracy") -> str:
    if not paths:
        raise ConfigError("report needs at least one report file")
    reports = [read_report(p) for p in paths]
    text, table_csv = format_report(reports, metric)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text)
        (out / "table.csv").write_text(table_csv)
    return text
