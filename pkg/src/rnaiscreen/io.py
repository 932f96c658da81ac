"""CSV file formats and the run manifest.

Every format is a plain CSV with a fixed header; writers and loaders
round-trip without loss.  Manifests are flat ``key = value`` text usable as
config files for bitwise reruns.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import PlateFileError, ScreenError
from .inference import HitReport, PpcResult, UnitSummaries
from .model import (CONTROL_KINDS, SHRNA_KIND, MeasurementCoords, ScreenData,
                    UnitInfo)
from .preprocess import CHANNELS, PlateSet, Well, control_unit_id
from .sampler import PosteriorDraws, TRACE_KEYS
from .simulate import RocResult, SimTruth

FORMAT_VERSION = "1"

PLATE_HEADER = ["plate_id", "row", "col", "channel", "replicate",
                "well_type", "gene_id", "shrna_id", "value"]
SCREEN_HEADER = ["unit_id", "kind", "gene_id", "role", "channel",
                 "replicate", "plate_id", "row", "col", "value"]
TRUTH_HEADER = ["unit_id", "gamma", "beta", "mu"]
SUMMARY_HEADER = ["unit_id", "kind", "gene_id", "role", "p_no_change",
                  "p_change", "e_beta_given_change", "e_beta_defined", "e_mu"]
HIT_HEADER = ["rank", "unit_id", "gene_id", "kind", "role", "p_no_change",
              "p_change", "e_beta_given_change", "e_mu", "activity",
              "viability", "cumulative_pfdr"]

_WELL_TYPES = (SHRNA_KIND,) + CONTROL_KINDS


def _float(text: str, path, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise PlateFileError(
            f"{path}:{line}: column {column} is not a number: {text!r}") from None


def _int(text: str, path, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise PlateFileError(
            f"{path}:{line}: column {column} is not an integer: {text!r}") from None


def _reader(path, required: list[str]):
    handle = open(path, newline="")
    reader = csv.DictReader(handle)
    if reader.fieldnames is None or any(c not in reader.fieldnames
                                        for c in required):
        handle.close()
        raise PlateFileError(
            f"{path}: expected columns {required}, found {reader.fieldnames}")
    return handle, reader


# ---------------------------------------------------------------------------
# Plate files
# ---------------------------------------------------------------------------

def load_plate_file(path) -> PlateSet:
    """Read raw plate measurements, validating values and layout."""
    handle, reader = _reader(path, PLATE_HEADER)
    wells: list[Well] = []
    with handle:
        for line, rec in enumerate(reader, start=2):
            well_type = rec["well_type"].strip()
            if well_type not in _WELL_TYPES:
                raise PlateFileError(
                    f"{path}:{line}: unknown well type {well_type!r}")
            channel = rec["channel"].strip()
            if channel not in CHANNELS:
                raise PlateFileError(
                    f"{path}:{line}: unknown channel {channel!r}")
            value = _float(rec["value"], path, line, "value")
            if value <= 0:
                raise PlateFileError(
                    f"{path}:{line}: raw measurements must be positive, "
                    f"got {value!r}")
            row = _int(rec["row"], path, line, "row")
            col = _int(rec["col"], path, line, "col")
            plate = rec["plate_id"].strip()
            unit = rec["shrna_id"].strip()
            if well_type == SHRNA_KIND:
                if not unit:
                    raise PlateFileError(
                        f"{path}:{line}: shrna wells need a shrna_id")
            else:
                unit = unit or control_unit_id(well_type, plate, row, col)
            wells.append(Well(
                plate=plate, row=row, col=col, channel=channel,
                replicate=_int(rec["replicate"], path, line, "replicate"),
                well_type=well_type, gene=rec["gene_id"].strip(),
                unit=unit, value=value))
    if not wells:
        raise PlateFileError(f"{path}: no wells")
    plates = PlateSet(wells,
                      n_rows=max(w.row for w in wells) + 1,
                      n_cols=max(w.col for w in wells) + 1)
    try:
        plates.validate()
    except ScreenError as exc:
        raise PlateFileError(f"{path}: {exc}") from exc
    return plates


def write_plate_file(path, plates: PlateSet) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PLATE_HEADER)
        for w in plates.wells:
            shrna = w.unit if w.well_type == SHRNA_KIND else ""
            writer.writerow([w.plate, w.row, w.col, w.channel, w.replicate,
                             w.well_type, w.gene, shrna, repr(w.value)])


# ---------------------------------------------------------------------------
# Screen data
# ---------------------------------------------------------------------------

def write_screen_file(path, data: ScreenData) -> None:
    """One row per measurement, log scale, with plate coordinates if known."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SCREEN_HEADER)
        for i, unit in enumerate(data.units):
            for channel, matrix in (("viability", data.x), ("activity", data.y)):
                for j in range(data.n_replicates):
                    if data.coords is not None:
                        suffix = "x" if channel == "viability" else "y"
                        plate = getattr(data.coords, f"plate_{suffix}")[i, j]
                        row = getattr(data.coords, f"row_{suffix}")[i, j]
                        col = getattr(data.coords, f"col_{suffix}")[i, j]
                    else:
                        plate, row, col = "", "", ""
                    writer.writerow([unit.unit_id, unit.kind, unit.gene,
                                     unit.role, channel, j + 1, plate, row,
                                     col, repr(float(matrix[i, j]))])


def load_screen_file(path) -> ScreenData:
    handle, reader = _reader(path, SCREEN_HEADER)
    records: dict[str, dict] = {}
    has_coords = True
    with handle:
        for line, rec in enumerate(reader, start=2):
            unit = rec["unit_id"].strip()
            entry = records.setdefault(unit, {
                "kind": rec["kind"].strip(), "gene": rec["gene_id"].strip(),
                "role": rec["role"].strip(),
                "viability": {}, "activity": {}})
            channel = rec["channel"].strip()
            if channel not in ("viability", "activity"):
                raise PlateFileError(f"{path}:{line}: unknown channel {channel!r}")
            replicate = _int(rec["replicate"], path, line, "replicate")
            if replicate in entry[channel]:
                raise PlateFileError(
                    f"{path}:{line}: duplicate measurement for {unit}")
            plate = rec["plate_id"].strip()
            if not plate:
                has_coords = False
            entry[channel][replicate] = (
                _float(rec["value"], path, line, "value"), plate,
                rec["row"].strip(), rec["col"].strip())
    if not records:
        raise PlateFileError(f"{path}: no measurements")
    unit_ids = sorted(records)
    n_rep = len(records[unit_ids[0]]["viability"])
    units, x_rows, y_rows = [], [], []
    coord_arrays = {name: [] for name in ("plate_x", "row_x", "col_x",
                                          "plate_y", "row_y", "col_y")}
    for unit in unit_ids:
        entry = records[unit]
        for channel in ("viability", "activity"):
            if set(entry[channel]) != set(range(1, n_rep + 1)):
                raise PlateFileError(
                    f"{path}: unit {unit} is missing {channel} replicates")
        units.append(UnitInfo(unit_id=unit, kind=entry["kind"],
                              gene=entry["gene"], role=entry["role"]))
        x_rows.append([entry["viability"][r][0] for r in range(1, n_rep + 1)])
        y_rows.append([entry["activity"][r][0] for r in range(1, n_rep + 1)])
        if has_coords:
            for suffix, channel in (("x", "viability"), ("y", "activity")):
                coord_arrays[f"plate_{suffix}"].append(
                    [entry[channel][r][1] for r in range(1, n_rep + 1)])
                coord_arrays[f"row_{suffix}"].append(
                    [int(entry[channel][r][2]) for r in range(1, n_rep + 1)])
                coord_arrays[f"col_{suffix}"].append(
                    [int(entry[channel][r][3]) for r in range(1, n_rep + 1)])
    coords = None
    if has_coords:
        coords = MeasurementCoords(
            plate_x=np.array(coord_arrays["plate_x"], dtype=object),
            row_x=np.array(coord_arrays["row_x"], dtype=np.int64),
            col_x=np.array(coord_arrays["col_x"], dtype=np.int64),
            plate_y=np.array(coord_arrays["plate_y"], dtype=object),
            row_y=np.array(coord_arrays["row_y"], dtype=np.int64),
            col_y=np.array(coord_arrays["col_y"], dtype=np.int64))
    return ScreenData(np.array(x_rows), np.array(y_rows), units, coords)


# ---------------------------------------------------------------------------
# Truth, summaries, traces, reports
# ---------------------------------------------------------------------------

def write_truth_file(path, truth: SimTruth, unit_ids: list[str]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRUTH_HEADER)
        for unit, g, b, m in zip(unit_ids, truth.gamma, truth.beta, truth.mu):
            writer.writerow([unit, int(g), repr(float(b)), repr(float(m))])


def load_truth_file(path) -> tuple[list[str], SimTruth]:
    handle, reader = _reader(path, TRUTH_HEADER)
    ids, gammas, betas, mus = [], [], [], []
    with handle:
        for line, rec in enumerate(reader, start=2):
            ids.append(rec["unit_id"].strip())
            gammas.append(_int(rec["gamma"], path, line, "gamma"))
            betas.append(_float(rec["beta"], path, line, "beta"))
            mus.append(_float(rec["mu"], path, line, "mu"))
    return ids, SimTruth(gamma=np.array(gammas, dtype=np.int64),
                         beta=np.array(betas), mu=np.array(mus))


def write_summaries_file(path, summaries: UnitSummaries,
                         units: list[UnitInfo]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER)
        for i, unit in enumerate(units):
            defined = bool(summaries.beta_defined[i])
            writer.writerow([
                unit.unit_id, unit.kind, unit.gene, unit.role,
                repr(float(summaries.p_no_change[i])),
                repr(float(summaries.p_change[i])),
                repr(float(summaries.e_beta_given_change[i])) if defined else "",
                int(defined),
                repr(float(summaries.e_mu[i]))])


def load_summaries_file(path) -> tuple[UnitSummaries, list[UnitInfo]]:
    handle, reader = _reader(path, SUMMARY_HEADER)
    units, p, e_beta, defined, e_mu = [], [], [], [], []
    with handle:
        for line, rec in enumerate(reader, start=2):
            units.append(UnitInfo(
                unit_id=rec["unit_id"].strip(), kind=rec["kind"].strip(),
                gene=rec["gene_id"].strip(), role=rec["role"].strip()))
            p.append(_float(rec["p_no_change"], path, line, "p_no_change"))
            flag = bool(_int(rec["e_beta_defined"], path, line, "e_beta_defined"))
            defined.append(flag)
            e_beta.append(_float(rec["e_beta_given_change"], path, line,
                                 "e_beta_given_change") if flag else np.nan)
            e_mu.append(_float(rec["e_mu"], path, line, "e_mu"))
    summaries = UnitSummaries(
        unit_ids=[u.unit_id for u in units], p_no_change=np.array(p),
        e_beta_given_change=np.array(e_beta),
        beta_defined=np.array(defined, dtype=bool), e_mu=np.array(e_mu))
    return summaries, units


def write_traces_file(path, chains: list[PosteriorDraws]) -> None:
    """Columnar scalar traces, one row per retained iteration per chain."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["chain", "iteration", *TRACE_KEYS])
        for c, draws in enumerate(chains):
            for t in range(draws.n_kept):
                writer.writerow([c, t] + [repr(float(draws.traces[k][t]))
                                          for k in TRACE_KEYS])


def write_rhat_file(path, table: dict[str, float]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["estimand", "rhat"])
        for key, value in table.items():
            writer.writerow([key, repr(float(value))])


def write_hits_file(path, report: HitReport) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(HIT_HEADER)
        for row in report.rows:
            e_beta = "" if np.isnan(row.e_beta_given_change) \
                else repr(row.e_beta_given_change)
            writer.writerow([row.rank, row.unit_id, row.gene, row.kind,
                             row.role, repr(row.p_no_change),
                             repr(row.p_change), e_beta, repr(row.e_mu),
                             row.activity, row.viability,
                             repr(row.cumulative_pfdr)])


def write_volcano_file(path, summaries: UnitSummaries) -> None:
    """Effect size against evidence, one row per unit with a defined effect."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["unit_id", "e_beta_given_change", "p_change"])
        for i, unit in enumerate(summaries.unit_ids):
            if summaries.beta_defined[i]:
                writer.writerow([unit,
                                 repr(float(summaries.e_beta_given_change[i])),
                                 repr(float(summaries.p_change[i]))])


def write_ppc_file(path, ppc: PpcResult) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["realized", "predictive"])
        for r, p in zip(ppc.realized, ppc.predictive):
            writer.writerow([repr(float(r)), repr(float(p))])


def write_roc_file(path, curve: RocResult) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["threshold", "fpr", "tpr"])
        writer.writerow(["", "0.0", "0.0"])
        for t, f, r in zip(curve.thresholds, curve.fpr[1:], curve.tpr[1:]):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(r))])


def write_fdr_file(path, pairs: np.ndarray) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["desired", "actual"])
        for desired, actual in pairs:
            writer.writerow([repr(float(desired)), repr(float(actual))])


# ---------------------------------------------------------------------------
# Manifest / config
# ---------------------------------------------------------------------------

def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as handle:
        handle.write(f"format_version = {FORMAT_VERSION}\n")
        for key in sorted(entries):
            handle.write(f"{key} = {entries[key]}\n")


def load_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and # comments are ignored."""
    values: dict[str, str] = {}
    for line, text in enumerate(Path(path).read_text().splitlines(), start=1):
        text = text.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise PlateFileError(f"{path}:{line}: expected key = value")
        key, _, value = text.partition("=")
        values[key.strip()] = value.strip()
    return values
