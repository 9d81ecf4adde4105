"""Fine-tuning a pretrained classifier with an energy objective on PD samples.

Every step draws two independent ID minibatches ``(x, y)`` and ``x'``.
Cross-entropy uses ``(x, y)`` only; ``x'`` is turned into a peripheral batch
via :func:`build_pd_batch` and enters the energy loss. Learning rate is
cosine-annealed per epoch; epoch ``t`` (1-based) uses ``lr_at(t - 1)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint, checkpoint_from_model
from .classifier import Classifier, check_labels, logits, predict_logits
from .energy import EnergyConfig, PartitionTrace, estimate_log_partition, free_energy
from .errors import DataError, NumericError, TuningDivergedError
from .objectives import TuningConfig, composite_objective, cross_entropy, energy_loss
from .optim import Schedule, lr_at, sgd_step
from .rng import substream, substream_seed
from .tensor import GradTape, Tensor
from .transforms import UNIT_RANGE, TransformSpec, build_pd_batch

__all__ = ["Schedule", "lr_at", "sgd_step", "TuneRun", "tune", "energy_gap", "write_log"]

log = logging.getLogger(__name__)


@dataclass
class TuneRun:
    config: dict
    epochs: list
    trace: PartitionTrace
    baseline: dict
    model: Classifier
    checkpoint: Checkpoint
    step_indices: list = field(default_factory=list)

    def log_lines(self) -> list:
        return [json.dumps(rec, sort_keys=True) for rec in self.epochs]


def write_log(run: TuneRun, path) -> None:
    with open(path, "w") as fh:
        for line in run.log_lines():
            fh.write(line + "\n")


def energy_gap(model, id_images, pd_images, cfg: EnergyConfig = EnergyConfig()) -> dict:
    """Mean and median of E(PD) minus the same statistic of E(ID)."""
    e_id = -np.asarray(_scores(model, id_images, cfg))
    e_pd = -np.asarray(_scores(model, pd_images, cfg))
    return {
        "gap_mean": float(e_pd.mean() - e_id.mean()),
        "gap_median": float(np.median(e_pd) - np.median(e_id)),
        "energy_id_mean": float(e_id.mean()),
        "energy_pd_mean": float(e_pd.mean()),
    }


def _scores(model, images, cfg):
    return -free_energy(predict_logits(model, images), cfg).data


def _accuracy(model, images, labels) -> float:
    return float(np.mean(predict_logits(model, images).argmax(axis=1) == labels))


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return substream_seed(seed, f"transforms:{epoch}:{step}") % 2**64


def tune(model: Classifier, id_train, cfg: TuningConfig, schedule: Schedule, specs, seed: int = 1,
         val_set=None, reference_set=None, momentum: float = 0.9, weight_decay: float = 5e-4,
         energy_cfg: EnergyConfig = EnergyConfig(), record_indices: bool = False,
         probe_size: int = 1000) -> TuneRun:
    """Run the tuning loop and return per-epoch logs plus the tuned model.

    ``val_set`` (labelled) gives the per-epoch ID accuracy; ``reference_set``
    (default: ``val_set``, else the training set) is the fixed set for the
    log-partition estimate and the ID/PD energy-gap probe. The input model is
    not modified.
    """
    specs = [s if isinstance(s, TransformSpec) else TransformSpec.from_dict(s) for s in specs]
    images = np.asarray(id_train.images, dtype=np.float64)
    labels = check_labels(id_train.labels, model.num_classes)
    value_range = getattr(id_train, "value_range", UNIT_RANGE)
    n, bsz = len(images), cfg.batch_size
    if n < bsz:
        raise DataError(f"training set of {n} samples is smaller than one batch of {bsz}")
    steps = n // bsz

    ref = reference_set if reference_set is not None else (val_set if val_set is not None else id_train)
    ref_images = np.asarray(ref.images)[:probe_size]
    probe = build_pd_batch(ref_images, specs, 1, substream_seed(seed, "probe") % 2**64, value_range)
    val_images = None if val_set is None else np.asarray(val_set.images)
    val_labels = None if val_set is None else check_labels(val_set.labels, model.num_classes)

    def snapshot(m):
        rec = {"log_Z": estimate_log_partition(predict_logits(m, ref_images), energy_cfg)}
        rec.update(energy_gap(m, ref_images, probe.images, energy_cfg))
        rec["id_val_acc"] = None if val_set is None else _accuracy(m, val_images, val_labels)
        return rec

    baseline = snapshot(model)
    trace = PartitionTrace()
    current = model.with_params([p.data for p in model.parameters()])
    state = None
    records, step_indices = [], []
    total = schedule.total_epochs
    for epoch in range(1, total + 1):
        lr = lr_at(schedule, epoch - 1)
        order_a = substream(seed, "training", epoch, 0).permutation(n)
        order_b = substream(seed, "training", epoch, 1).permutation(n)
        sums = np.zeros(3)
        for step in range(steps):
            ia = order_a[step * bsz:(step + 1) * bsz]
            ib = order_b[step * bsz:(step + 1) * bsz]
            if record_indices:
                step_indices.append((ia.copy(), ib.copy()))
            pd = build_pd_batch(images[ib], specs, cfg.pd_ratio, _step_seed(seed, epoch, step), value_range)
            params = current.parameters()
            try:
                with GradTape() as tape:
                    out = logits(current, Tensor._wrap(np.concatenate([images[ia], pd.images])))
                    energies = free_energy(out, energy_cfg)
                    ce = cross_entropy(tn.take(out, np.arange(bsz)), labels[ia])
                    e_in = tn.take(energies, np.arange(bsz))
                    e_per = tn.take(energies, np.arange(bsz, bsz + len(pd)))
                    if cfg.mode == "OEST*":
                        e_in = tn.take(e_in, pd.source_index)
                    energy = energy_loss(e_in, e_per, cfg)
                    loss = composite_objective(ce, energy, cfg)
                grads = tape.backward(loss, params)
                arrays, state = sgd_step([p.data for p in params], grads, lr, momentum, weight_decay, state)
                current = current.with_params(arrays)
            except NumericError as exc:
                raise TuningDivergedError(f"non-finite value at epoch {epoch}, step {step}: {exc}",
                                          epoch=epoch, step=step) from exc
            sums += (ce.item(), energy.item(), loss.item())
        means = sums / steps
        rec = {"epoch": epoch, "lr": lr, "ce": means[0], "energy_loss": means[1], "composite": means[2]}
        rec.update(snapshot(current))
        trace.append(rec["log_Z"])
        records.append(rec)
        log.info("tune epoch %d lr %.3g composite %.5f log_Z %.4f gap %.4f", epoch, lr,
                 means[2], rec["log_Z"], rec["gap_mean"])

    config = {
        "tuning": cfg.__dict__.copy(),
        "schedule": schedule.__dict__.copy(),
        "seed": seed,
        "momentum": momentum,
        "weight_decay": weight_decay,
        "temperature": energy_cfg.temperature,
        "transforms": [s.to_dict() for s in specs],
    }
    meta = {"stage": "tune", "epochs": total, "seed": seed, "dataset_id": getattr(id_train, "id", None),
            "mode": cfg.mode, "final_log": records[-1] if records else None}
    return TuneRun(config, records, trace, baseline, current, checkpoint_from_model(current, meta), step_indices)
