"""Raw plate measurements to analysis-ready screen data.

The pipeline runs control-outlier deletion, edge-effect adjustment,
control-anchored piecewise-linear plate normalization, a natural log
transform, and replicate-ratio outlier removal, and reports per-stage counts
along the way.  Control wells serve two duties: a deterministic subset
anchors the normalization and the rest are reserved to evaluate the fitted
model downstream.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataQualityError, DomainError
from .model import (CONTROL_KINDS, SHRNA_KIND, MeasurementCoords, ScreenData,
                    UnitInfo)

CHANNEL_VIABILITY = "viability"
CHANNEL_ACTIVITY = "activity"
CHANNELS = (CHANNEL_VIABILITY, CHANNEL_ACTIVITY)

ROLE_NORMALIZATION = "normalization"
ROLE_EVALUATION = "evaluation"


# ---------------------------------------------------------------------------
# Plate data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Well:
    """One raw measurement with its plate position and identity."""

    plate: str
    row: int
    col: int
    channel: str
    replicate: int
    well_type: str  # "shrna" | "SN" | "NTNP" | "NTWP"
    gene: str
    unit: str
    value: float


def control_unit_id(well_type: str, plate: str, row: int, col: int) -> str:
    return f"{well_type}:{plate}:r{row:02d}c{col:02d}"


@dataclass
class PlateSet:
    """All wells of one experiment sharing a single grid geometry."""

    wells: list[Well]
    n_rows: int
    n_cols: int

    def validate(self) -> None:
        seen: dict[tuple, int] = {}
        positions: dict[str, tuple] = {}
        replicates: dict[str, set[int]] = {c: set() for c in CHANNELS}
        for well in self.wells:
            if well.channel not in CHANNELS:
                raise ContractError(f"unknown channel {well.channel!r}")
            if well.value <= 0:
                raise DataQualityError(
                    f"nonpositive measurement at plate {well.plate} "
                    f"({well.row},{well.col})")
            if not (0 <= well.row < self.n_rows and 0 <= well.col < self.n_cols):
                raise ContractError(
                    f"well ({well.row},{well.col}) outside the "
                    f"{self.n_rows}x{self.n_cols} grid")
            key = (well.plate, well.row, well.col, well.channel, well.replicate)
            if key in seen:
                raise DataQualityError(f"duplicate well {key}")
            seen[key] = 1
            pos = (well.plate, well.row, well.col)
            if well.unit in positions and positions[well.unit] != pos:
                raise DataQualityError(
                    f"unit {well.unit} appears at {positions[well.unit]} "
                    f"and at {pos}; replicate plates must share the layout")
            positions[well.unit] = pos
            replicates[well.channel].add(well.replicate)
        for channel, reps in replicates.items():
            if reps and reps != set(range(1, len(reps) + 1)):
                raise DataQualityError(
                    f"replicate indices for {channel} are not 1..J")

    def replicate_count(self, channel: str) -> int:
        return len({w.replicate for w in self.wells if w.channel == channel})


# ---------------------------------------------------------------------------
# Replicate ratio
# ---------------------------------------------------------------------------

def replicate_ratio(m1: float, m2: float) -> float:
    """Absolute replicate difference over the replicate mean."""
    if m1 < 0 or m2 < 0:
        raise DomainError("measurements must be nonnegative")
    mean = 0.5 * (m1 + m2)
    if mean == 0:
        raise DomainError("replicate ratio undefined for two zero values")
    return abs(m1 - m2) / mean


def _range_ratio(values: list[float]) -> float:
    # generalizes the two-replicate ratio: range over mean
    mean = sum(values) / len(values)
    if mean == 0:
        raise DomainError("replicate ratio undefined for all-zero values")
    return (max(values) - min(values)) / mean


# ---------------------------------------------------------------------------
# Control-outlier deletion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlDeletion:
    plate: str
    row: int
    col: int
    channel: str
    well_type: str
    ratio: float


def delete_control_outliers(plates: PlateSet, threshold: float
                            ) -> tuple[PlateSet, list[ControlDeletion]]:
    """Drop control measurements whose replicates disagree too much.

    Applied per channel independently: when the replicate ratio at a control
    position exceeds the threshold, every same-channel replicate of that
    position is removed and logged.
    """
    if threshold <= 0:
        raise ConfigError("control ratio threshold must be positive")
    grouped: dict[tuple, list[Well]] = {}
    for well in plates.wells:
        if well.well_type in CONTROL_KINDS:
            grouped.setdefault(
                (well.plate, well.row, well.col, well.channel), []).append(well)
    deleted: set[tuple] = set()
    log: list[ControlDeletion] = []
    for key in sorted(grouped):
        group = grouped[key]
        if len(group) < 2:
            continue
        ratio = _range_ratio([w.value for w in group])
        if ratio > threshold:
            deleted.add(key)
            log.append(ControlDeletion(*key, group[0].well_type, ratio))
    kept = [w for w in plates.wells
            if (w.plate, w.row, w.col, w.channel) not in deleted]
    return PlateSet(kept, plates.n_rows, plates.n_cols), log


# ---------------------------------------------------------------------------
# Edge-effect adjustment
# ---------------------------------------------------------------------------

def well_group(row: int, col: int, n_rows: int, n_cols: int) -> int:
    """1 for boundary wells, 2 for the ring just inside, 3 for the rest."""
    if row in (0, n_rows - 1) or col in (0, n_cols - 1):
        return 1
    if row in (1, n_rows - 2) or col in (1, n_cols - 2):
        return 2
    return 3


@dataclass
class EdgeAdjustment:
    """Additive constants applied per channel (and per plate if requested)."""

    constants: dict[tuple, float] = field(default_factory=dict)


def adjust_edge_effect(plates: PlateSet, per_plate: bool = False
                       ) -> tuple[PlateSet, EdgeAdjustment]:
    """Shift boundary-ring wells so every group shares the interior mean.

    One constant aligns the second ring with the interior and another aligns
    the boundary (NTWP control wells excepted, their cell counts are too low
    to show an edge effect).  Constants are computed experiment-wide per
    channel unless per-plate mode is requested.
    """
    if plates.n_rows < 5 or plates.n_cols < 5:
        raise ConfigError(
            f"a {plates.n_rows}x{plates.n_cols} grid has no interior wells "
            "beyond the two boundary rings")
    scopes = sorted({w.plate for w in plates.wells}) if per_plate else [None]
    adjustment = EdgeAdjustment()
    for channel in CHANNELS:
        for scope in scopes:
            chosen = [w for w in plates.wells if w.channel == channel
                      and (scope is None or w.plate == scope)]
            if not chosen:
                continue
            groups = {1: [], 2: [], 3: []}
            for w in chosen:
                groups[well_group(w.row, w.col, plates.n_rows, plates.n_cols)].append(w)
            g1_adjustable = [w for w in groups[1] if w.well_type != "NTWP"]
            if not groups[3] or not groups[2] or not g1_adjustable:
                raise DataQualityError(
                    f"channel {channel}: a well group is empty, cannot "
                    "estimate edge constants")
            mean3 = float(np.mean([w.value for w in groups[3]]))
            adjustment.constants[(channel, scope, 2)] = \
                mean3 - float(np.mean([w.value for w in groups[2]]))
            adjustment.constants[(channel, scope, 1)] = \
                mean3 - float(np.mean([w.value for w in g1_adjustable]))
    adjusted = []
    for w in plates.wells:
        group = well_group(w.row, w.col, plates.n_rows, plates.n_cols)
        if group == 3 or (group == 1 and w.well_type == "NTWP"):
            adjusted.append(w)
            continue
        scope = w.plate if per_plate else None
        shift = adjustment.constants.get((w.channel, scope, group), 0.0)
        adjusted.append(dataclasses.replace(w, value=w.value + shift)
                        if shift != 0.0 else w)
    return PlateSet(adjusted, plates.n_rows, plates.n_cols), adjustment


# ---------------------------------------------------------------------------
# Control roles and normalization anchors
# ---------------------------------------------------------------------------

def assign_control_roles(plates: PlateSet, norm_fraction: float = 0.5
                         ) -> dict[str, str]:
    """Deterministic split of control positions into duties.

    All NTWP positions anchor normalization; within each plate the SN and
    NTNP positions are ordered by (row, col) and alternated so that roughly
    ``norm_fraction`` of them anchor normalization and the rest are reserved
    for evaluation.
    """
    if not 0.0 < norm_fraction <= 1.0:
        raise ConfigError("normalization fraction must lie in (0, 1]")
    by_plate_type: dict[tuple, set[tuple]] = {}
    for w in plates.wells:
        if w.well_type in CONTROL_KINDS:
            by_plate_type.setdefault((w.plate, w.well_type), set()).add(
                (w.row, w.col, w.unit))
    roles: dict[str, str] = {}
    for (plate, well_type), positions in sorted(by_plate_type.items()):
        ordered = sorted(positions)
        for index, (_, _, unit) in enumerate(ordered):
            if well_type == "NTWP":
                roles[unit] = ROLE_NORMALIZATION
            else:
                crossed = (math.floor((index + 1) * norm_fraction)
                           > math.floor(index * norm_fraction))
                roles[unit] = ROLE_NORMALIZATION if crossed else ROLE_EVALUATION
    return roles


@dataclass(frozen=True)
class PlateAnchors:
    ntnp: float            # mean of the plate's NTNP anchor wells
    sn: float              # mean of the plate's SN anchor wells
    ntwp: float | None     # mean of the plate's NTWP anchor wells, if any


@dataclass
class NormalizationAnchors:
    """Plate-level and global control means for one channel."""

    channel: str
    global_ntnp: float
    global_sn: float
    global_ntwp: float | None
    per_plate: dict[str, PlateAnchors]


def compute_anchors(plates: PlateSet, channel: str,
                    roles: dict[str, str]) -> NormalizationAnchors:
    """Control means per plate and across the experiment, one channel."""
    per_plate_values: dict[str, dict[str, list[float]]] = {}
    global_values: dict[str, list[float]] = {k: [] for k in CONTROL_KINDS}
    for w in plates.wells:
        if (w.channel != channel or w.well_type not in CONTROL_KINDS
                or roles.get(w.unit) != ROLE_NORMALIZATION):
            continue
        per_plate_values.setdefault(w.plate, {k: [] for k in CONTROL_KINDS})
        per_plate_values[w.plate][w.well_type].append(w.value)
        global_values[w.well_type].append(w.value)
    if not global_values["NTNP"] or not global_values["SN"]:
        raise DataQualityError(
            f"channel {channel}: no SN/NTNP anchor controls available")
    global_ntnp = float(np.mean(global_values["NTNP"]))
    global_sn = float(np.mean(global_values["SN"]))
    global_ntwp = (float(np.mean(global_values["NTWP"]))
                   if global_values["NTWP"] else None)
    per_plate: dict[str, PlateAnchors] = {}
    for plate in sorted(per_plate_values):
        values = per_plate_values[plate]
        if not values["NTNP"] or not values["SN"]:
            raise DataQualityError(
                f"plate {plate}, channel {channel}: missing SN or NTNP "
                "anchor controls")
        anchors = PlateAnchors(
            ntnp=float(np.mean(values["NTNP"])),
            sn=float(np.mean(values["SN"])),
            ntwp=float(np.mean(values["NTWP"])) if values["NTWP"] else None)
        _check_anchor_order(plate, channel, anchors,
                            global_ntnp, global_sn, global_ntwp)
        per_plate[plate] = anchors
    return NormalizationAnchors(channel, global_ntnp, global_sn,
                                global_ntwp, per_plate)


def _check_anchor_order(plate: str, channel: str, anchors: PlateAnchors,
                        global_ntnp: float, global_sn: float,
                        global_ntwp: float | None) -> None:
    if anchors.ntwp is not None:
        if not (anchors.ntwp < anchors.ntnp < anchors.sn):
            raise DataQualityError(
                f"plate {plate}, channel {channel}: control means are not "
                f"ordered NTWP < NTNP < SN "
                f"({anchors.ntwp:g}, {anchors.ntnp:g}, {anchors.sn:g})")
        if global_ntwp is None or not (global_ntwp < global_ntnp < global_sn):
            raise DataQualityError(
                f"channel {channel}: global control means are not ordered "
                "NTWP < NTNP < SN")
    elif not anchors.ntnp < anchors.sn:
        raise DataQualityError(
            f"plate {plate}, channel {channel}: NTNP mean is not below the "
            f"SN mean ({anchors.ntnp:g} vs {anchors.sn:g})")


def normalize_plate(value: float, plate_anchors: PlateAnchors,
                    anchors: NormalizationAnchors) -> float:
    """Continuous piecewise-linear map of one measurement onto the global
    anchor scale.

    The three plate anchors map exactly onto the three global anchors, with
    unit-slope shifts beyond the outer anchors.  Plates lacking NTWP wells
    use the two-anchor variant.
    """
    a, b = anchors.global_ntnp, anchors.global_sn
    a_h, b_h = plate_anchors.ntnp, plate_anchors.sn
    if plate_anchors.ntwp is not None and anchors.global_ntwp is not None:
        c, c_h = anchors.global_ntwp, plate_anchors.ntwp
        if value <= c_h:
            return value - c_h + c
        if value <= a_h:
            return (a - c) * (value - c_h) / (a_h - c_h) + c
        if value <= b_h:
            return (b - a) * (value - a_h) / (b_h - a_h) + a
        return value - b_h + b
    if value <= a_h:
        return value - a_h + a
    if value <= b_h:
        return (b - a) * (value - a_h) / (b_h - a_h) + a
    return value - b_h + b


def normalize(plates: PlateSet, roles: dict[str, str]
              ) -> tuple[PlateSet, dict[str, NormalizationAnchors]]:
    """Normalize every well of both channels against its plate anchors."""
    anchors = {channel: compute_anchors(plates, channel, roles)
               for channel in CHANNELS}
    normalized = []
    for w in plates.wells:
        chan = anchors[w.channel]
        plate_anchors = chan.per_plate.get(w.plate)
        if plate_anchors is None:
            raise DataQualityError(
                f"plate {w.plate}, channel {w.channel}: no anchor controls")
        normalized.append(dataclasses.replace(
            w, value=normalize_plate(w.value, plate_anchors, chan)))
    return PlateSet(normalized, plates.n_rows, plates.n_cols), anchors


# ---------------------------------------------------------------------------
# Assembly and unit-outlier removal
# ---------------------------------------------------------------------------

def assemble_screen(plates: PlateSet, roles: dict[str, str]
                    ) -> tuple[ScreenData, list[str]]:
    """Log-transform and pivot wells into per-unit replicate matrices.

    Units missing any replicate in either channel are dropped and returned
    for the provenance report.
    """
    n_rep = {c: plates.replicate_count(c) for c in CHANNELS}
    if n_rep[CHANNEL_VIABILITY] != n_rep[CHANNEL_ACTIVITY]:
        raise DataQualityError(
            "the two channels carry different replicate counts "
            f"({n_rep[CHANNEL_VIABILITY]} vs {n_rep[CHANNEL_ACTIVITY]})")
    j = n_rep[CHANNEL_VIABILITY]
    per_unit: dict[str, dict] = {}
    for w in plates.wells:
        if w.value <= 0:
            raise DataQualityError(
                f"nonpositive value after normalization at plate {w.plate} "
                f"({w.row},{w.col}); log transform undefined")
        entry = per_unit.setdefault(w.unit, {
            "wells": {c: {} for c in CHANNELS},
            "well_type": w.well_type, "gene": w.gene})
        entry["wells"][w.channel][w.replicate] = w
    unit_ids = sorted(per_unit)
    complete, dropped = [], []
    for unit in unit_ids:
        wells = per_unit[unit]["wells"]
        if all(set(wells[c]) == set(range(1, j + 1)) for c in CHANNELS):
            complete.append(unit)
        else:
            dropped.append(unit)
    x = np.empty((len(complete), j))
    y = np.empty((len(complete), j))
    plate_x = np.empty((len(complete), j), dtype=object)
    row_x = np.empty((len(complete), j), dtype=np.int64)
    col_x = np.empty_like(row_x)
    plate_y = np.empty_like(plate_x)
    row_y = np.empty_like(row_x)
    col_y = np.empty_like(row_x)
    units = []
    for i, unit in enumerate(complete):
        entry = per_unit[unit]
        kind = entry["well_type"] if entry["well_type"] in CONTROL_KINDS else SHRNA_KIND
        units.append(UnitInfo(unit_id=unit, kind=kind, gene=entry["gene"],
                              role=roles.get(unit, "")))
        for r in range(1, j + 1):
            wx = entry["wells"][CHANNEL_VIABILITY][r]
            wy = entry["wells"][CHANNEL_ACTIVITY][r]
            x[i, r - 1] = np.log(wx.value)
            y[i, r - 1] = np.log(wy.value)
            plate_x[i, r - 1], row_x[i, r - 1], col_x[i, r - 1] = wx.plate, wx.row, wx.col
            plate_y[i, r - 1], row_y[i, r - 1], col_y[i, r - 1] = wy.plate, wy.row, wy.col
    coords = MeasurementCoords(plate_x, row_x, col_x, plate_y, row_y, col_y)
    return ScreenData(x, y, units, coords), dropped


@dataclass(frozen=True)
class UnitExclusion:
    unit_id: str
    channel: str
    ratio: float


def remove_unit_outliers(data: ScreenData, fraction: float = 0.02
                         ) -> tuple[ScreenData, list[UnitExclusion]]:
    """Drop the units with the most extreme replicate ratios.

    Ratios are computed on the measurement scale (the data are stored as
    logs) per channel; the top ``fraction`` of each channel is excluded, and
    a unit extreme in either channel leaves the analysis entirely.  Ties are
    broken by unit order, so the exclusion set is deterministic.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("outlier fraction must lie in [0, 1)")
    n = data.n_units
    k = int(math.floor(fraction * n))
    excluded: set[int] = set()
    log: list[UnitExclusion] = []
    if k > 0:
        for channel, matrix in ((CHANNEL_VIABILITY, data.x),
                                (CHANNEL_ACTIVITY, data.y)):
            raw = np.exp(matrix)
            ratios = (raw.max(axis=1) - raw.min(axis=1)) / raw.mean(axis=1)
            order = np.lexsort((np.arange(n), -ratios))
            for idx in order[:k]:
                excluded.add(int(idx))
                log.append(UnitExclusion(data.units[idx].unit_id, channel,
                                         float(ratios[idx])))
    keep = np.array([i for i in range(n) if i not in excluded], dtype=np.int64)
    coords = data.coords
    if coords is not None:
        coords = MeasurementCoords(*(getattr(coords, f.name)[keep]
                                     for f in dataclasses.fields(coords)))
    kept = ScreenData(data.x[keep], data.y[keep],
                      [data.units[i] for i in keep], coords)
    return kept, log


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    control_ratio_threshold: float = 0.5
    unit_outlier_fraction: float = 0.02
    edge_adjust: bool = True
    edge_per_plate: bool = False
    norm_fraction: float = 0.5


@dataclass
class ProvenanceReport:
    """Per-stage counts and logs emitted alongside the screen data."""

    config: PreprocessConfig
    wells_in: int
    control_wells_in: int
    control_deletions: list[ControlDeletion]
    edge_constants: dict[tuple, float]
    anchors: dict[str, NormalizationAnchors]
    incomplete_units: list[str]
    unit_exclusions: list[UnitExclusion]
    n_units_out: int
    n_controls_out: int
    n_norm_controls: int
    n_eval_controls: int
    n_replicates: int

    def to_text(self) -> str:
        lines = [
            "preprocessing provenance",
            f"control_ratio_threshold = {self.config.control_ratio_threshold}",
            f"unit_outlier_fraction = {self.config.unit_outlier_fraction}",
            f"edge_adjust = {self.config.edge_adjust}",
            f"norm_fraction = {self.config.norm_fraction}",
            f"wells in: {self.wells_in} ({self.control_wells_in} control)",
            f"control positions deleted pre-normalization: "
            f"{len(self.control_deletions)}",
        ]
        for d in self.control_deletions:
            lines.append(f"  deleted {d.well_type} {d.plate} "
                         f"({d.row},{d.col}) {d.channel} ratio={d.ratio:.4f}")
        for key in sorted(self.edge_constants, key=str):
            lines.append(f"edge constant {key}: {self.edge_constants[key]:+.6g}")
        for channel, anchor in sorted(self.anchors.items()):
            ntwp = f"{anchor.global_ntwp:.6g}" if anchor.global_ntwp is not None else "n/a"
            lines.append(f"global anchors [{channel}]: NTNP={anchor.global_ntnp:.6g} "
                         f"SN={anchor.global_sn:.6g} NTWP={ntwp}")
        lines.append(f"units dropped as incomplete: {len(self.incomplete_units)}")
        lines.append(f"units excluded as replicate outliers: "
                     f"{len(set(e.unit_id for e in self.unit_exclusions))}")
        for e in self.unit_exclusions:
            lines.append(f"  excluded {e.unit_id} [{e.channel}] "
                         f"ratio={e.ratio:.4f}")
        lines.append(f"retained: {self.n_units_out} units "
                     f"({self.n_controls_out} controls: "
                     f"{self.n_norm_controls} normalization, "
                     f"{self.n_eval_controls} evaluation), "
                     f"J={self.n_replicates} per channel")
        return "\n".join(lines) + "\n"


def run_pipeline(raw: PlateSet, config: PreprocessConfig | None = None
                 ) -> tuple[ScreenData, ProvenanceReport]:
    """Full preprocessing pass from raw plates to model-ready screen data."""
    cfg = config if config is not None else PreprocessConfig()
    raw.validate()
    n_controls_in = sum(w.well_type in CONTROL_KINDS for w in raw.wells)

    plates, deletions = delete_control_outliers(raw, cfg.control_ratio_threshold)
    if cfg.edge_adjust:
        plates, edge = adjust_edge_effect(plates, per_plate=cfg.edge_per_plate)
    else:
        edge = EdgeAdjustment()
    roles = assign_control_roles(plates, cfg.norm_fraction)
    plates, anchors = normalize(plates, roles)
    data, incomplete = assemble_screen(plates, roles)
    data, exclusions = remove_unit_outliers(data, cfg.unit_outlier_fraction)

    controls = data.control_mask()
    report = ProvenanceReport(
        config=cfg,
        wells_in=len(raw.wells),
        control_wells_in=n_controls_in,
        control_deletions=deletions,
        edge_constants=edge.constants,
        anchors=anchors,
        incomplete_units=incomplete,
        unit_exclusions=exclusions,
        n_units_out=data.n_units,
        n_controls_out=int(controls.sum()),
        n_norm_controls=int(data.control_mask(ROLE_NORMALIZATION).sum()),
        n_eval_controls=int(data.control_mask(ROLE_EVALUATION).sum()),
        n_replicates=data.n_replicates,
    )
    return data, report
