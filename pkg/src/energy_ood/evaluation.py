"""Detection metrics, brute-force metric oracles and benchmark orchestration.

ID samples are the positive class throughout: TPR is measured on ID scores
and FPR on OOD scores.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import model_checksum
from .classifier import check_labels, predict_logits
from .energy import EnergyConfig, calibrate_threshold, free_energy, verdicts_from_scores
from .errors import DataError, EnergyOODError, ParameterError

log = logging.getLogger(__name__)

SCORE_HEADER = ("dataset", "index", "free_energy", "score", "verdict")


def _scores_array(values, name):
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ParameterError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    s = np.sort(values)
    lo = np.searchsorted(s, values, side="left")
    hi = np.searchsorted(s, values, side="right")
    return (lo + hi + 1) / 2.0


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) with ties counted one half (Mann-Whitney U / nm)."""
    a = _scores_array(id_scores, "id_scores")
    b = _scores_array(ood_scores, "ood_scores")
    n, m = a.size, b.size
    ranks = average_ranks(np.concatenate([a, b]))
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def auroc_bruteforce(id_scores, ood_scores) -> float:
    """All-pairs oracle: (wins + ties / 2) / (n * m)."""
    a = _scores_array(id_scores, "id_scores")[:, None]
    b = _scores_array(ood_scores, "ood_scores")[None, :]
    wins = np.count_nonzero(a > b)
    ties = np.count_nonzero(a == b)
    return (wins + 0.5 * ties) / (a.size * b.size)


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Share of OOD scores above the calibrated ID threshold."""
    a = _scores_array(id_scores, "id_scores")
    b = _scores_array(ood_scores, "ood_scores")
    tau = calibrate_threshold(a, tpr_target)
    return float(np.count_nonzero(b > tau) / b.size)


def fpr_at_tpr_sweep(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Exhaustive oracle: try every observed score and its float predecessor as a threshold."""
    a = _scores_array(id_scores, "id_scores")
    b = _scores_array(ood_scores, "ood_scores")
    obs = np.concatenate([a, b])
    candidates = np.unique(np.concatenate([obs, np.nextafter(obs, -np.inf)]))
    best = None
    for tau in candidates:
        accepted = sum(1 for s in a if s > tau)
        if accepted / a.size >= tpr_target - 1e-12 and (best is None or tau > best):
            best = tau
    return sum(1 for s in b if s > best) / b.size


def id_accuracy(model, dataset) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    if dataset is None or len(dataset.images) == 0:
        raise DataError("accuracy of an empty set is undefined")
    if dataset.labels is None:
        raise DataError(f"{getattr(dataset, 'id', 'dataset')} has no labels")
    labels = check_labels(dataset.labels, model.num_classes)
    return float(np.mean(predict_logits(model, dataset.images).argmax(axis=1) == labels))


@dataclass
class ScoredSet:
    dataset_id: str
    role: str
    free_energy: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if self.role not in ("ID", "OOD"):
            raise ParameterError(f"role must be 'ID' or 'OOD', got {self.role!r}")
        if not np.all(np.isfinite(self.scores)):
            raise ParameterError(f"{self.dataset_id}: non-finite scores")


def score_dataset(model, dataset, role: str, cfg: EnergyConfig = EnergyConfig()) -> ScoredSet:
    energies = free_energy(predict_logits(model, dataset.images), cfg).numpy()
    return ScoredSet(dataset.id, role, energies, -energies)


def score_rows(scored: ScoredSet, threshold: float):
    verdicts = verdicts_from_scores(scored.scores, threshold)
    for i, (e, s, v) in enumerate(zip(scored.free_energy, scored.scores, verdicts)):
        yield scored.dataset_id, i, repr(float(e)), repr(float(s)), int(v)


def write_score_dump(sets, threshold: float, temperature: float, checksum: str, csv_path,
                     sidecar_path=None) -> None:
    """CSV with a fixed header plus a JSON sidecar holding threshold, T and model checksum."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_HEADER)
    for scored in sets:
        writer.writerows(score_rows(scored, threshold))
    with open(csv_path, "w") as fh:
        fh.write(buf.getvalue())
    sidecar_path = sidecar_path or os.path.splitext(os.fspath(csv_path))[0] + ".json"
    with open(sidecar_path, "w") as fh:
        json.dump({"threshold": threshold, "temperature": temperature, "model_checksum": checksum,
                   "datasets": [s.dataset_id for s in sets], "header": list(SCORE_HEADER)},
                  fh, indent=2, sort_keys=True)


def read_score_dump(csv_path) -> list:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != SCORE_HEADER:
            raise DataError(f"{csv_path}: unexpected header {header}")
        return [(d, int(i), float(e), float(s), int(v)) for d, i, e, s, v in reader]


@dataclass(frozen=True)
class EvalConfig:
    temperature: float = 1.0
    tpr_target: float = 0.95


@dataclass
class EvalReport:
    rows: list
    id_dataset: str
    id_acc: float | None
    threshold: float | None
    fingerprint: str
    averages: dict = field(default_factory=dict)
    score_dumps: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.get("error") is None for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "id_dataset": self.id_dataset,
            "id_acc": self.id_acc,
            "threshold": self.threshold,
            "rows": self.rows,
            "averages": self.averages,
            "fingerprint": self.fingerprint,
            "score_dumps": self.score_dumps,
            "ok": self.ok,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Aligned table: one row per OOD set, values in percent."""
        names = [r["dataset"] for r in self.rows] + ["Average"]
        width = max(12, *(len(n) for n in names)) + 2
        lines = [f"{'OOD dataset':<{width}}{'AUROC':>10}{'FPR95':>10}"]

        def fmt(v):
            return f"{100 * v:>10.2f}" if v is not None else f"{'--':>10}"

        for r in self.rows:
            if r.get("error"):
                lines.append(f"{r['dataset']:<{width}}{'error: ' + r['error']}")
            else:
                lines.append(f"{r['dataset']:<{width}}{fmt(r['auroc'])}{fmt(r['fpr95'])}")
        lines.append(f"{'Average':<{width}}{fmt(self.averages.get('auroc'))}{fmt(self.averages.get('fpr95'))}")
        lines.append(f"ID ACC ({self.id_dataset}): {fmt(self.id_acc).strip()}")
        return "\n".join(lines) + "\n"


def run_benchmark(model, id_test, ood_sets: dict, cfg: EvalConfig = EvalConfig(), out_dir=None) -> EvalReport:
    """Score ID and every OOD set, compute AUROC/FPR95 per set and ID accuracy.

    ``ood_sets`` maps names to datasets or zero-argument loaders; a loader
    that raises yields a row with an ``error`` entry instead of aborting.
    """
    ecfg = EnergyConfig(cfg.temperature)
    id_scored = score_dataset(model, id_test, "ID", ecfg)
    threshold = calibrate_threshold(id_scored.scores, cfg.tpr_target)
    id_acc = id_accuracy(model, id_test) if id_test.labels is not None else None
    checksum = model_checksum(model)
    rows, scored_sets = [], [id_scored]
    for name, source in ood_sets.items():
        try:
            ds = source() if callable(source) else source
            if isinstance(ds, Exception):
                raise ds
            scored = score_dataset(model, ds, "OOD", ecfg)
            scored.dataset_id = name
            rows.append({"dataset": name, "n": int(scored.scores.size),
                         "auroc": auroc(id_scored.scores, scored.scores),
                         "fpr95": fpr_at_tpr(id_scored.scores, scored.scores, cfg.tpr_target),
                         "error": None})
            scored_sets.append(scored)
        except (EnergyOODError, OSError) as exc:
            log.error("OOD set %s failed: %s", name, exc)
            rows.append({"dataset": name, "n": 0, "auroc": None, "fpr95": None, "error": str(exc)})
    good = [r for r in rows if r["error"] is None]
    averages = {k: (float(np.mean([r[k] for r in good])) if good else None) for k in ("auroc", "fpr95")}
    report = EvalReport(rows, id_test.id, id_acc, threshold, checksum, averages)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        dump = os.path.join(out_dir, "scores.csv")
        write_score_dump(scored_sets, threshold, cfg.temperature, checksum, dump)
        report.score_dumps = [dump]
        with open(os.path.join(out_dir, "eval_report.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(out_dir, "eval_report.txt"), "w") as fh:
            fh.write(report.to_text())
    return report
