"""Training, k-fold cross-validation, ablations and report output."""

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, TextIO

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from src.csi_model import CsiDataset, interleave, make_folds
from src.errors import ConfigInvalid, DivergedLoss, InvariantViolation, IoFailure, ShapeMismatch, UsageError
from src.framework import ArchitectureSpec, Knob, ablate, build, spec_to_dict
from src.nn.checkpoint import save_checkpoint
from src.nn.network import Network
from src.nn.optim import OptimizerConfig
from src.seeding import Role, derive_seed, substream
from src.sigproc import PipelineConfig, amplitude, normalize_amplitude, sanitized_complex

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("json", "csv")


class InputMode(str, Enum):
    RAW_COMPLEX = "raw_complex"
    AMPLITUDE_ONLY = "amplitude_only"
    SANITIZED_COMPLEX = "sanitized_complex"


class EarlyStop(BaseModel):
    model_config = ConfigDict(frozen=True)

    patience: int = Field(default=3, ge=1)
    min_delta: float = Field(default=1e-4, ge=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(default=32, ge=2, description="batch norm needs two instances")
    epochs: int = Field(default=30, ge=1)
    seed: int = Field(default=0, ge=0)
    input_mode: InputMode = InputMode.RAW_COMPLEX
    early_stop: EarlyStop | None = None

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None) -> "TrainConfig":
        try:
            return cls.model_validate(data or {})
        except ValidationError as exc:
            raise ConfigInvalid(f"invalid train config: {exc}") from exc


class FoldResult(BaseModel):
    fold: int
    group: str | None = None
    true_detection_rate: float | None = None
    confusion_matrix: list[list[int]] = Field(default_factory=list)
    loss_curve: list[float] = Field(default_factory=list)
    test_count: int = 0
    failed: str | None = None


class RunReport(BaseModel):
    label: str = "baseline"
    folds: list[FoldResult]
    mean_rate: float | None = None
    std_rate: float | None = None
    groups: dict[str, float] = Field(default_factory=dict)
    config_digest: str
    seed: int
    k: int
    wall_clock: float = 0.0
    duplicate_of: str | None = None
    reference: dict[str, float] | None = None


class AblationTable(BaseModel):
    rows: list[RunReport]


# ---------------------------------------------------------------------------
# published comparison values and the dataset shapes they came from
# ---------------------------------------------------------------------------


class DatasetProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: str
    classes: int
    instances: int
    m: int
    n: int
    c: int
    folds: int
    preset: str
    users: int = 1


DATASET_PROFILES: dict[str, DatasetProfile] = {
    "signfi_home": DatasetProfile(key="D1", classes=276, instances=2760, m=200, n=30, c=3, folds=5, preset="signfi"),
    "signfi_lab_rx": DatasetProfile(key="D2", classes=276, instances=5520, m=200, n=30, c=3, folds=5, preset="signfi"),
    "signfi_lab_tx": DatasetProfile(key="D3", classes=276, instances=5520, m=200, n=30, c=3, folds=5, preset="signfi"),
    "signfi_lab_users": DatasetProfile(key="D4", classes=150, instances=7500, m=200, n=30, c=3, folds=5, preset="signfi", users=5),
    "activity_clean": DatasetProfile(key="AD1", classes=8, instances=952, m=5, n=52, c=1, folds=10, preset="activity"),
    "activity_rfi": DatasetProfile(key="AD2", classes=8, instances=952, m=5, n=52, c=1, folds=10, preset="activity"),
}

# True detection rates in percent; attached to reports for reference, never asserted.
PUBLISHED_RATES: dict[str, dict[str, float]] = {
    "D1": {"raw_complex": 99.89, "preprocessed_baseline": 98.91, "baseline_without_preprocessing": 93.98},
    "D2": {"raw_complex": 99.98, "preprocessed_baseline": 98.01, "baseline_without_preprocessing": 95.72},
    "D3": {"raw_complex": 99.93, "preprocessed_baseline": 98.01, "baseline_without_preprocessing": 95.72},
    "AD1": {"raw_complex": 97.40, "preprocessed_baseline": 93.48},
    "AD2": {"raw_complex": 85.08, "preprocessed_baseline": 85.08, "avg_pool_off": 80.34},
}


def reference_for(profile: str | None) -> dict[str, float] | None:
    if profile is None:
        return None
    if profile not in DATASET_PROFILES:
        raise UsageError(f"unknown dataset profile {profile!r}; known: {sorted(DATASET_PROFILES)}")
    return PUBLISHED_RATES.get(DATASET_PROFILES[profile].key)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def preprocess_dataset(
    ds: CsiDataset, mode: InputMode, cfg: PipelineConfig | None = None
) -> CsiDataset:
    cfg = cfg or PipelineConfig()
    mode = InputMode(mode)
    if mode is InputMode.RAW_COMPLEX:
        return ds
    if mode is InputMode.AMPLITUDE_ONLY:
        return ds.map_planes(
            lambda inst: interleave(normalize_amplitude(amplitude(inst), cfg.normalization) + 0j)
        )

    undefined = 0

    def _sanitize(inst):
        nonlocal undefined
        rebuilt, mask = sanitized_complex(inst, cfg)
        undefined += int(mask.sum())
        return rebuilt.planes

    out = ds.map_planes(_sanitize)
    if undefined:
        logger.warning("phase undefined at %d positions; set to 0", undefined)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing single instance cannot be batch-normalised on its own
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _check_compatible(ds: CsiDataset, arch: ArchitectureSpec, what: str) -> None:
    if ds.input_shape != tuple(arch.input_shape):
        raise ShapeMismatch(
            f"{what} instances are {list(ds.input_shape)}, network expects {list(arch.input_shape)}"
        )
    if ds.num_classes != arch.num_classes:
        raise ShapeMismatch(f"{what} has {ds.num_classes} classes, network has {arch.num_classes}")


def fit(
    train: CsiDataset,
    arch: ArchitectureSpec,
    tc: TrainConfig,
    seed: int | None = None,
    progress: bool = False,
    desc: str = "train",
) -> tuple[Network, list[float]]:
    """Train a freshly built network; returns it with the per-epoch mean loss."""
    _check_compatible(train, arch, "training set")
    seed = tc.seed if seed is None else seed
    net = build(arch, seed)
    optimizer = tc.optimizer.build()
    x, y = train.planes, train.labels

    curve: list[float] = []
    best, waited = np.inf, 0
    for epoch in tqdm(range(tc.epochs), desc=desc, disable=not progress, leave=False):
        order = substream(seed, Role.SHUFFLE, epoch).permutation(len(train))
        total = 0.0
        for batch in _batches(order, tc.batch_size):
            result = net.backward(x[batch], y[batch])
            if not np.isfinite(result.loss):
                raise DivergedLoss(epoch, result.loss)
            optimizer.step(net.parameters(), result.gradients)
            total += result.loss * len(batch)
        curve.append(total / len(train))
        logger.debug("%s epoch %d loss %.6f", desc, epoch, curve[-1])

        if tc.early_stop is not None:
            if curve[-1] < best - tc.early_stop.min_delta:
                best, waited = curve[-1], 0
            else:
                waited += 1
                if waited >= tc.early_stop.patience:
                    logger.info("%s stopped early after epoch %d", desc, epoch)
                    break
    return net, curve


def evaluate(net: Network, test: CsiDataset) -> tuple[float, np.ndarray]:
    """True detection rate and the K x K confusion matrix (rows are true classes)."""
    predicted = net.predict(test.planes)
    cm = confusion_matrix(test.labels, predicted, labels=np.arange(net.num_classes))
    return float(np.trace(cm) / cm.sum()), cm


def _train_prepared(
    train: CsiDataset,
    test: CsiDataset,
    arch: ArchitectureSpec,
    tc: TrainConfig,
    seed: int,
    fold: int = 0,
    progress: bool = False,
) -> FoldResult:
    _check_compatible(test, arch, "test set")
    try:
        net, curve = fit(train, arch, tc, seed, progress, desc=f"fold {fold}")
    except DivergedLoss as exc:
        logger.warning("fold %d failed: %s", fold, exc)
        return FoldResult(fold=fold, test_count=len(test), failed=str(exc))
    rate, cm = evaluate(net, test)
    logger.info("fold %d: true detection rate %.4f over %d instances", fold, rate, len(test))
    return FoldResult(
        fold=fold,
        true_detection_rate=rate,
        confusion_matrix=cm.tolist(),
        loss_curve=curve,
        test_count=len(test),
    )


def train_once(
    train: CsiDataset,
    test: CsiDataset,
    arch: ArchitectureSpec,
    tc: TrainConfig,
    pipeline: PipelineConfig | None = None,
    progress: bool = False,
    checkpoint: Path | None = None,
    reference: dict[str, float] | None = None,
) -> RunReport:
    """One train/evaluate cycle reported as a single-fold run.

    Raises DivergedLoss instead of recording it. ``checkpoint`` receives the
    trained network as CSIM.
    """
    started = time.perf_counter()
    _check_compatible(train, arch, "training set")
    _check_compatible(test, arch, "test set")
    train = preprocess_dataset(train, tc.input_mode, pipeline)
    test = preprocess_dataset(test, tc.input_mode, pipeline)
    net, curve = fit(train, arch, tc, tc.seed, progress)
    rate, cm = evaluate(net, test)
    if checkpoint is not None:
        save_checkpoint(net.state_dict(), checkpoint)
        logger.info("checkpoint written to %s", checkpoint)
    fold = FoldResult(
        fold=0,
        true_detection_rate=rate,
        confusion_matrix=cm.tolist(),
        loss_curve=curve,
        test_count=len(test),
    )
    return RunReport(
        label="train",
        folds=[fold],
        mean_rate=rate,
        std_rate=0.0,
        config_digest=config_digest(arch, tc, 1, tc.seed),
        seed=tc.seed,
        k=1,
        wall_clock=time.perf_counter() - started,
        reference=reference,
    )


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def config_digest(arch: ArchitectureSpec, tc: TrainConfig, k: int, seed: int) -> str:
    """Digest of everything but the input transform, for comparing input modes."""
    payload = {
        "architecture": spec_to_dict(arch),
        "train": tc.model_dump(mode="json", exclude={"input_mode"}),
        "k": k,
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _aggregate(folds: list[FoldResult]) -> tuple[float | None, float | None]:
    rates = [f.true_detection_rate for f in folds if f.true_detection_rate is not None]
    if not rates:
        return None, None
    return float(np.mean(rates)), float(np.std(rates))


def cross_validate(
    ds: CsiDataset,
    arch: ArchitectureSpec,
    tc: TrainConfig,
    k: int,
    seed: int | None = None,
    pipeline: PipelineConfig | None = None,
    workers: int = 1,
    progress: bool = False,
    label: str = "baseline",
) -> RunReport:
    seed = tc.seed if seed is None else seed
    started = time.perf_counter()
    _check_compatible(ds, arch, "dataset")
    plan = make_folds(ds, k, seed)
    prepared = preprocess_dataset(ds, tc.input_mode, pipeline)

    def run(fold: int) -> FoldResult:
        logger.info("%s: fold %d/%d", label, fold + 1, k)
        return _train_prepared(
            prepared.subset(plan.train_indices(fold)),
            prepared.subset(plan.fold_indices(fold)),
            arch,
            tc,
            derive_seed(seed, Role.FOLD_INIT, fold),
            fold,
            progress and workers == 1,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(run, range(k)))
    else:
        folds = [run(fold) for fold in range(k)]

    mean, std = _aggregate(folds)
    return RunReport(
        label=label,
        folds=folds,
        mean_rate=mean,
        std_rate=std,
        config_digest=config_digest(arch, tc, k, seed),
        seed=seed,
        k=k,
        wall_clock=time.perf_counter() - started,
    )


def cross_validate_per_user(
    ds: CsiDataset,
    arch: ArchitectureSpec,
    tc: TrainConfig,
    k: int,
    seed: int | None = None,
    pipeline: PipelineConfig | None = None,
    workers: int = 1,
    progress: bool = False,
) -> RunReport:
    """Cross-validate each user's instances on their own, then macro-average."""
    if "user_ids" not in ds.meta:
        raise InvariantViolation("dataset meta has no user_ids entry")
    users = np.array(ds.meta["user_ids"].split(","))
    if len(users) != len(ds):
        raise InvariantViolation(f"{len(users)} user ids for {len(ds)} instances")

    seed = tc.seed if seed is None else seed
    started = time.perf_counter()
    folds: list[FoldResult] = []
    groups: dict[str, float] = {}
    for user in sorted(set(users.tolist())):
        report = cross_validate(
            ds.subset(np.flatnonzero(users == user)),
            arch, tc, k, seed, pipeline, workers, progress, label=f"user {user}",
        )
        folds.extend(f.model_copy(update={"group": user}) for f in report.folds)
        if report.mean_rate is not None:
            groups[user] = report.mean_rate

    rates = list(groups.values())
    return RunReport(
        label="per_user",
        folds=folds,
        mean_rate=float(np.mean(rates)) if rates else None,
        std_rate=float(np.std(rates)) if rates else None,
        groups=groups,
        config_digest=config_digest(arch, tc, k, seed),
        seed=seed,
        k=k,
        wall_clock=time.perf_counter() - started,
    )


def run_ablation(
    ds: CsiDataset,
    base: ArchitectureSpec,
    knobs: list[Knob],
    tc: TrainConfig,
    k: int,
    seed: int | None = None,
    pipeline: PipelineConfig | None = None,
    workers: int = 1,
    progress: bool = False,
) -> AblationTable:
    """Baseline plus one row per knob; a knob that leaves the spec unchanged reuses the baseline."""
    baseline = cross_validate(ds, base, tc, k, seed, pipeline, workers, progress, label="baseline")
    rows = [baseline]
    for knob in knobs:
        spec = ablate(base, knob)
        if spec == base:
            logger.info("%s equals the baseline; reusing its result", knob)
            rows.append(baseline.model_copy(update={"label": str(knob), "duplicate_of": "baseline"}))
            continue
        rows.append(cross_validate(ds, spec, tc, k, seed, pipeline, workers, progress, label=str(knob)))
    return AblationTable(rows=rows)


def compare_input_modes(
    ds: CsiDataset,
    arch: ArchitectureSpec,
    tc: TrainConfig,
    k: int,
    seed: int | None = None,
    pipeline: PipelineConfig | None = None,
    modes: list[InputMode] | None = None,
    workers: int = 1,
    progress: bool = False,
) -> AblationTable:
    """Same architecture, optimizer and seeds for every mode; only the transform differs."""
    rows = []
    for mode in modes or list(InputMode):
        mode_tc = tc.model_copy(update={"input_mode": InputMode(mode)})
        rows.append(
            cross_validate(ds, arch, mode_tc, k, seed, pipeline, workers, progress, label=InputMode(mode).value)
        )
    digests = {row.config_digest for row in rows}
    if len(digests) != 1:
        raise InvariantViolation("input-mode runs differ in more than the input transform")
    return AblationTable(rows=rows)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

CSV_FIELDS = ["label", "fold", "group", "true_detection_rate", "std", "test_count", "final_loss", "status", "config_digest"]


def _csv_rows(report: RunReport) -> list[dict[str, Any]]:
    rows = []
    for f in report.folds:
        rows.append(
            {
                "label": report.label,
                "fold": f.fold,
                "group": f.group or "",
                "true_detection_rate": "" if f.true_detection_rate is None else f.true_detection_rate,
                "std": "",
                "test_count": f.test_count,
                "final_loss": f.loss_curve[-1] if f.loss_curve else "",
                "status": "failed" if f.failed else "ok",
                "config_digest": report.config_digest,
            }
        )
    rows.append(
        {
            "label": report.label,
            "fold": "mean",
            "group": "",
            "true_detection_rate": "" if report.mean_rate is None else report.mean_rate,
            "std": "" if report.std_rate is None else report.std_rate,
            "test_count": sum(f.test_count for f in report.folds),
            "final_loss": "",
            "status": f"duplicate of {report.duplicate_of}" if report.duplicate_of else "aggregate",
            "config_digest": report.config_digest,
        }
    )
    return rows


def render_report(report: RunReport | AblationTable, fmt: str) -> str:
    if fmt not in REPORT_FORMATS:
        raise UsageError(f"unknown report format {fmt!r}; use one of {REPORT_FORMATS}")
    if fmt == "json":
        return report.model_dump_json(indent=2) + "\n"
    reports = report.rows if isinstance(report, AblationTable) else [report]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for item in reports:
        writer.writerows(_csv_rows(item))
    return buf.getvalue()


def emit_report(report: RunReport | AblationTable, fmt: str, sink: TextIO) -> int:
    """Write the report and return the number of UTF-8 bytes written."""
    text = render_report(report, fmt)
    try:
        sink.write(text)
    except OSError as exc:
        raise IoFailure(f"report write failed: {exc}") from exc
    return len(text.encode("utf-8"))


def load_report(text: str) -> RunReport | AblationTable:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"report is not JSON: {exc}") from exc
    try:
        if isinstance(data, dict) and "rows" in data:
            return AblationTable.model_validate(data)
        return RunReport.model_validate(data)
    except ValidationError as exc:
        raise InvariantViolation(f"not a run report: {exc}") from exc
