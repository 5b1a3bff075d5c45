import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from nfresnet.models import ModelConfig, build_model, force_skipinit_gains, resnet_config
from nfresnet.spp import (CSV_COLUMNS, SppRecord, emit, fit_stage_growth, generate_spp,
                          records_from_csv, records_from_json, records_to_csv, records_to_json,
                          records_to_svg)


@pytest.fixture(scope="module")
def nf_records():
    cfg = ModelConfig(model="nf-resnet", stage_widths=[32, 64], stage_depths=[4, 4], alpha=0.5, seed=0)
    model = force_skipinit_gains(build_model(cfg), 1.0)
    return generate_spp(model, (4, 16, 16, 3), seed=0)


@pytest.fixture(scope="module")
def bn_records():
    cfg = resnet_config(26, 0.125, model="bn-resnet", ordering="bn-relu-conv")
    return generate_spp(build_model(cfg), (4, 16, 16, 3), seed=0)


def test_record_fields_and_ledger(nf_records, bn_records):
    assert len(nf_records) == 8
    assert [r.stage_index for r in nf_records] == [0] * 4 + [1] * 4
    assert [r.is_transition for r in nf_records] == [True, False, False, False] * 2
    assert nf_records[3].ledger_expected_var == pytest.approx(1 + 4 * 0.25)
    assert all(math.isnan(r.ledger_expected_var) for r in bn_records)


def test_spp_is_deterministic(nf_records):
    cfg = ModelConfig(model="nf-resnet", stage_widths=[32, 64], stage_depths=[4, 4], alpha=0.5, seed=0)
    again = generate_spp(force_skipinit_gains(build_model(cfg), 1.0), (4, 16, 16, 3), seed=0)
    assert records_to_csv(again) == records_to_csv(nf_records)


def test_nf_variance_grows_within_stage(nf_records):
    var = [r.avg_var for r in nf_records[:4]]
    assert var == sorted(var)


def test_csv_round_trip(nf_records, bn_records):
    text = records_to_csv(nf_records)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert records_from_csv(text) == nf_records
    back = records_from_csv(records_to_csv(bn_records))
    assert all(math.isnan(r.ledger_expected_var) for r in back)


def test_json_round_trip_uses_null_for_missing_ledger(bn_records, nf_records):
    data = json.loads(records_to_json(bn_records))
    assert data[0]["ledger_expected_var"] is None
    assert set(data[0]) == set(CSV_COLUMNS)
    assert records_from_json(records_to_json(nf_records)) == nf_records


def test_svg_structure(nf_records):
    svg = records_to_svg(nf_records, title="demo")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert svg.count("block_index") >= 3
    for label in ("Average Channel Squared Mean", "Average Channel Variance",
                  "Residual Average Channel Variance"):
        assert label in svg
    assert records_to_svg(nf_records, title="demo") == svg


def test_emit_writes_each_format(tmp_path, nf_records):
    for fmt in ("csv", "json", "svg"):
        path = tmp_path / f"out.{fmt}"
        emit(nf_records, fmt, path)
        assert path.read_text().endswith("\n")
    with pytest.raises(ValueError):
        emit(nf_records, "png", tmp_path / "x.png")
    with pytest.raises(ValueError):
        emit([], "csv", tmp_path / "x.csv")


def _synthetic(slopes, n=6, noise=0.0):
    recs = []
    for s, slope in enumerate(slopes):
        for i in range(n):
            recs.append(SppRecord(len(recs), s, i == 0, 0.0, 1 + slope * (i + 1) + noise * (-1) ** i,
                                  1.0, 1 + 0.25 * (i + 1)))
    return recs


def test_fit_stage_growth_flags_bad_stage():
    report = fit_stage_growth(_synthetic([0.25, 0.25, 0.6]), alpha=0.5)
    assert report.flagged == [2]
    assert report.stages[0].slope == pytest.approx(0.25)
    assert report.max_relative_ledger_error > 0.3


def test_fit_stage_growth_notes_short_stages():
    report = fit_stage_growth(_synthetic([0.25], n=2), alpha=0.5)
    assert report.stages == [] and report.notes
