"""Signal Propagation Plots: per-block activation statistics at initialization."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as F
from .models import Model, model_forward
from .tensor import avg_channel_sq_mean, avg_channel_variance, gaussian

CSV_COLUMNS = ("block_index", "stage_index", "is_transition", "avg_sq_mean", "avg_var",
               "residual_var", "ledger_expected_var")


@dataclass
class SppRecord:
    block_index: int
    stage_index: int
    is_transition: bool
    avg_sq_mean: float
    avg_var: float
    residual_var: float
    ledger_expected_var: float  # nan when the model has no ledger


def generate_spp(model: Model, batch=(16, 64, 64, 3), seed: int = 0, x=None) -> list[SppRecord]:
    """Feed a unit-Gaussian batch through ``model`` in eval mode and summarize each block.

    Pass ``x`` to profile a specific NHWC input instead.
    """
    if x is None:
        x = gaussian(batch, rng=seed, dtype=model.stem.weight.dtype)
    with F.no_grad():
        _, taps = model_forward(model, x, mode="eval")
    records = []
    for i, (tap, stage, block) in enumerate(zip(taps, model.block_stages, model.blocks)):
        out = tap.block_out.value
        expected = model.ledger.history[i].expected_var if model.ledger else math.nan
        records.append(SppRecord(
            block_index=i,
            stage_index=int(stage),
            is_transition=bool(block.cfg.is_transition),
            avg_sq_mean=avg_channel_sq_mean(out),
            avg_var=avg_channel_variance(out),
            residual_var=avg_channel_variance(tap.residual_out.value),
            ledger_expected_var=float(expected),
        ))
    return records


# -- serialization --------------------------------------------------------------------


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        row = dataclasses.astuple(r)
        writer.writerow([int(v) if isinstance(v, bool) else (repr(v) if isinstance(v, float) else v)
                         for v in row])
    return buf.getvalue()


def records_from_csv(text: str) -> list[SppRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [SppRecord(int(r["block_index"]), int(r["stage_index"]), r["is_transition"] == "1",
                      float(r["avg_sq_mean"]), float(r["avg_var"]), float(r["residual_var"]),
                      float(r["ledger_expected_var"])) for r in rows]


def records_to_json(records) -> str:
    return json.dumps([{k: _json_value(v) for k, v in dataclasses.asdict(r).items()}
                       for r in records], indent=2)


def records_from_json(text: str) -> list[SppRecord]:
    out = []
    for item in json.loads(text):
        item = dict(item)
        if item.get("ledger_expected_var") is None:
            item["ledger_expected_var"] = math.nan
        out.append(SppRecord(**item))
    return out


def records_to_svg(records, title: str | None = None) -> str:
    """Three stacked panels sharing the block-index axis, one per statistic."""
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    idx = [r.block_index for r in records]
    panels = [
        ("Average Channel Squared Mean", [r.avg_sq_mean for r in records]),
        ("Average Channel Variance", [r.avg_var for r in records]),
        ("Residual Average Channel Variance", [r.residual_var for r in records]),
    ]
    with plt.rc_context({"svg.fonttype": "none", "svg.hashsalt": "spp"}):
        fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
        ends = [r.block_index - 1 for r in records if r.is_transition and r.block_index > 0]
        for ax, (label, values) in zip(axes, panels):
            ax.plot(idx, values, lw=1.2)
            if ends:
                ax.plot(ends, [values[e] for e in ends], "k.", ms=5)
            ax.set_title(label, fontsize=9)
            ax.set_xlabel("block_index")
        expected = [r.ledger_expected_var for r in records]
        if any(math.isfinite(v) for v in expected):
            axes[1].plot(idx, expected, "--", lw=1, label="ledger")
            axes[1].legend(fontsize=8)
        if title:
            fig.suptitle(title, fontsize=10)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit(records, format: str, path) -> None:  # noqa: A002
    """Write records as ``csv``, ``json`` or ``svg``."""
    records = list(records)
    if not records:
        raise ValueError("no records to emit")
    writers = {"csv": records_to_csv, "json": records_to_json, "svg": records_to_svg}
    if format not in writers:
        raise ValueError(f"unknown format {format!r}; expected csv, json or svg")
    text = writers[format](records)
    with open(path, "w", newline="") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


# -- stage growth ----------------------------------------------------------------------


@dataclass
class StageFit:
    stage_index: int
    n_blocks: int
    slope: float
    intercept: float
    expected_slope: float
    flagged: bool


@dataclass
class GrowthReport:
    stages: list[StageFit]
    max_relative_ledger_error: float
    notes: list[str]

    @property
    def flagged(self) -> list[int]:
        return [s.stage_index for s in self.stages if s.flagged]


def fit_stage_growth(records, alpha: float | None = None, tolerance: float = 0.25) -> GrowthReport:
    """Least-squares slope of ``avg_var`` against within-stage block index.

    The expected slope is ``alpha**2`` for NF models, or the stage's mean
    residual variance when ``alpha`` is None (BatchNorm models). Stages whose
    slope deviates by more than ``tolerance`` (relative) are flagged.
    """
    records = list(records)
    stages: dict[int, list[SppRecord]] = {}
    for r in records:
        stages.setdefault(r.stage_index, []).append(r)
    fits, notes = [], []
    for s, recs in sorted(stages.items()):
        if len(recs) < 3:
            notes.append(f"stage {s}: {len(recs)} blocks, need 3 for a slope fit")
            continue
        pos = np.arange(len(recs), dtype=np.float64)
        var = np.array([r.avg_var for r in recs])
        slope, intercept = np.polyfit(pos, var, 1)
        expected = alpha**2 if alpha is not None else float(np.mean([r.residual_var for r in recs]))
        if expected == 0:
            flagged = abs(slope) > 1e-12
        else:
            flagged = abs(slope - expected) > tolerance * abs(expected)
        fits.append(StageFit(s, len(recs), float(slope), float(intercept), expected, bool(flagged)))
    rel = [abs(r.avg_var - r.ledger_expected_var) / r.ledger_expected_var
           for r in records if math.isfinite(r.ledger_expected_var)]
    return GrowthReport(fits, max(rel) if rel else math.nan, notes)
