"""Steroid-profile data model: markers, samples, athletes, CSV ingestion.

Values are kept on their raw scale (ng/mL for concentrations, unitless for
ratios) together with a detection-limit flag. Substitution of censored
values and the natural-log transform happen on demand, so a collection
read from disk can always be written back unchanged.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import (
    DivisionByNonPositive,
    DuplicateTimestamp,
    MalformedRow,
    NonPositiveValue,
    SubstitutionUndefined,
    UnknownMarkerColumn,
)


class Marker(str, Enum):
    T = "T"
    E = "E"
    A = "A"
    ETIO = "ETIO"
    A5 = "A5"
    B5 = "B5"
    T_E = "T_E"
    A_T = "A_T"
    A_ETIO = "A_ETIO"
    A5_B5 = "A5_B5"
    A5_E = "A5_E"

    @property
    def kind(self) -> str:
        return "ratio" if self in RATIO_DEFINITIONS else "concentration"

    @property
    def label(self) -> str:
        return self.value.replace("_", "/")


CONCENTRATIONS: tuple[Marker, ...] = (
    Marker.T, Marker.E, Marker.A, Marker.ETIO, Marker.A5, Marker.B5,
)
RATIOS: tuple[Marker, ...] = (
    Marker.T_E, Marker.A_T, Marker.A_ETIO, Marker.A5_B5, Marker.A5_E,
)
ALL_MARKERS: tuple[Marker, ...] = CONCENTRATIONS + RATIOS

# ratio -> (numerator, denominator)
RATIO_DEFINITIONS: dict[Marker, tuple[Marker, Marker]] = {
    Marker.T_E: (Marker.T, Marker.E),
    Marker.A_T: (Marker.A, Marker.T),
    Marker.A_ETIO: (Marker.A, Marker.ETIO),
    Marker.A5_B5: (Marker.A5, Marker.B5),
    Marker.A5_E: (Marker.A5, Marker.E),
}

MARKER_SUBSETS: dict[str, tuple[Marker, ...]] = {
    "EAAS_only": CONCENTRATIONS,
    "ratios_only": RATIOS,
    "all": ALL_MARKERS,
}


class LimitFlag(str, Enum):
    MEASURED = "measured"
    BELOW_LOQ = "below_LOQ"
    BELOW_LOD = "below_LOD"


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"


class Label(str, Enum):
    NORMAL = "normal"
    ATYPICAL = "atypical"
    ABNORMAL = "abnormal"


# ng/mL cut-offs used in place of censored concentrations
_SUBSTITUTES: dict[Marker, dict[LimitFlag, float]] = {
    Marker.T: {LimitFlag.BELOW_LOQ: 1.0, LimitFlag.BELOW_LOD: 0.1},
    Marker.E: {LimitFlag.BELOW_LOQ: 1.0, LimitFlag.BELOW_LOD: 0.1},
    Marker.A5: {LimitFlag.BELOW_LOQ: 5.0, LimitFlag.BELOW_LOD: 1.0},
    Marker.B5: {LimitFlag.BELOW_LOQ: 5.0, LimitFlag.BELOW_LOD: 1.0},
}


def coerce_marker(m: Marker | str) -> Marker:
    if isinstance(m, Marker):
        return m
    try:
        return Marker(m)
    except ValueError:
        for candidate in Marker:
            if candidate.label == m:
                return candidate
        raise


def resolve_markers(subset: str | Sequence[Marker | str]) -> tuple[Marker, ...]:
    """Turn a subset name (``"EAAS_only"``...) or an explicit list into markers."""
    if isinstance(subset, str):
        if subset in MARKER_SUBSETS:
            return MARKER_SUBSETS[subset]
        return (coerce_marker(subset),)
    return tuple(coerce_marker(m) for m in subset)


def apply_detection_limits(raw_value: float, marker: Marker | str,
                           flag: LimitFlag | str = LimitFlag.MEASURED) -> float:
    """Replace a censored concentration by its conventional cut-off.

    T and E: <LOQ -> 1, <LOD -> 0.1 ng/mL. A5 and B5: <LOQ -> 5, <LOD -> 1.
    No rule exists for A and ETIO, so a flagged value there is an error.
    """
    marker = coerce_marker(marker)
    flag = LimitFlag(flag)
    if marker.kind != "concentration":
        raise SubstitutionUndefined(f"{marker.value} is a ratio; limits apply to concentrations")
    if flag is LimitFlag.MEASURED:
        if not raw_value > 0:
            raise NonPositiveValue(f"{marker.value}: measured value {raw_value!r} must be > 0")
        return float(raw_value)
    rules = _SUBSTITUTES.get(marker)
    if rules is None:
        raise SubstitutionUndefined(f"no {flag.value} substitution defined for {marker.value}")
    return rules[flag]


def compute_ratios(concentrations: Sequence[float] | Mapping[Marker, float]) -> np.ndarray:
    """The five ratios (T/E, A/T, A/ETIO, A5/B5, A5/E) from six concentrations.

    A sequence is read in ``CONCENTRATIONS`` order (T, E, A, ETIO, A5, B5).
    """
    if isinstance(concentrations, Mapping):
        conc = {coerce_marker(k): float(v) for k, v in concentrations.items()}
    else:
        values = list(concentrations)
        if len(values) != len(CONCENTRATIONS):
            raise ValueError(f"expected {len(CONCENTRATIONS)} concentrations, got {len(values)}")
        conc = dict(zip(CONCENTRATIONS, map(float, values)))
    out = np.empty(len(RATIOS))
    for i, ratio in enumerate(RATIOS):
        num, den = RATIO_DEFINITIONS[ratio]
        if not conc[den] > 0:
            raise DivisionByNonPositive(f"{ratio.label}: denominator {den.value}={conc[den]!r}")
        if not conc[num] > 0:
            raise NonPositiveValue(f"{ratio.label}: numerator {num.value}={conc[num]!r}")
        out[i] = conc[num] / conc[den]
    return out


@dataclass(frozen=True)
class RawSample:
    athlete_id: str
    timestamp: int
    sex: Sex
    values: Mapping[Marker, tuple[float, LimitFlag]]
    label: Label | None = None

    def value(self, marker: Marker) -> float:
        """Raw-scale value with detection-limit substitution applied."""
        raw, flag = self.values[marker]
        if marker.kind == "concentration":
            return apply_detection_limits(raw, marker, flag)
        if flag is not LimitFlag.MEASURED:
            raise SubstitutionUndefined(f"ratio {marker.label} cannot carry a limit flag")
        if not raw > 0:
            raise NonPositiveValue(f"{marker.label}: {raw!r}")
        return float(raw)

    def with_derived_ratios(self) -> "RawSample":
        """Fill missing ratio values from the (substituted) concentrations.

        Ratios whose numerator or denominator is absent stay missing.
        """
        values = dict(self.values)
        for r in RATIOS:
            num, den = RATIO_DEFINITIONS[r]
            if r in values or num not in values or den not in values:
                continue
            a, b = self.value(num), self.value(den)
            if not b > 0:
                raise DivisionByNonPositive(f"{r.label}: denominator {den.value}={b!r}")
            values[r] = (a / b, LimitFlag.MEASURED)
        if len(values) == len(self.values):
            return self
        return replace(self, values=values)


@dataclass(frozen=True)
class MarkerVector:
    """Log-scale values of one sample for a fixed marker ordering."""

    log_values: np.ndarray
    markers: tuple[Marker, ...]

    def __post_init__(self):
        arr = np.asarray(self.log_values, dtype=float)
        if arr.shape != (len(self.markers),):
            raise ValueError(f"{arr.shape} values for {len(self.markers)} markers")
        if not np.all(np.isfinite(arr)):
            raise ValueError("log values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "log_values", arr)

    @property
    def raw_values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def __len__(self) -> int:
        return len(self.markers)


def log_transform(sample: RawSample, markers: str | Sequence[Marker | str] = "all") -> MarkerVector:
    markers = resolve_markers(markers)
    if any(m.kind == "ratio" and m not in sample.values for m in markers):
        sample = sample.with_derived_ratios()
    vals = []
    for m in markers:
        v = sample.value(m)
        if not v > 0:
            raise NonPositiveValue(f"{m.label}: {v!r}")
        vals.append(math.log(v))
    return MarkerVector(np.array(vals), markers)


@dataclass(frozen=True)
class Athlete:
    athlete_id: str
    sex: Sex
    samples: tuple[RawSample, ...]

    @property
    def label(self) -> Label:
        """Group label: the worst sample label in the series."""
        labels = {s.label for s in self.samples}
        for lab in (Label.ABNORMAL, Label.ATYPICAL):
            if lab in labels:
                return lab
        return Label.NORMAL

    def matrix(self, markers: str | Sequence[Marker | str] = "all") -> np.ndarray:
        """``n x K`` array of log values."""
        markers = resolve_markers(markers)
        if not self.samples:
            return np.empty((0, len(markers)))
        return np.vstack([log_transform(s, markers).log_values for s in self.samples])


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    row: tuple[str, ...]


@dataclass(frozen=True)
class ProfileCollection:
    athletes: tuple[Athlete, ...]
    baseline: tuple[RawSample, ...] = ()
    rejects: tuple[Reject, ...] = field(default=(), compare=False)

    def athlete(self, athlete_id: str) -> Athlete:
        for a in self.athletes:
            if a.athlete_id == athlete_id:
                return a
        raise KeyError(athlete_id)

    @property
    def n_samples(self) -> int:
        return sum(len(a.samples) for a in self.athletes)

    def baseline_matrix(self, markers="all", sex: Sex | None = None) -> np.ndarray:
        markers = resolve_markers(markers)
        rows = [log_transform(s, markers).log_values
                for s in self.baseline if sex is None or s.sex == sex]
        if not rows:
            return np.empty((0, len(markers)))
        return np.vstack(rows)

    def samples_by_athlete_label(self) -> dict[Label, int]:
        counts = {lab: 0 for lab in Label}
        for a in self.athletes:
            counts[a.label] += len(a.samples)
        return counts


# ---------------------------------------------------------------------------
# CSV

@dataclass(frozen=True)
class CsvSchema:
    """How flags and missing values are encoded in the CSV.

    ``flag_mode="sentinel"`` puts ``<LOQ``/``<LOD`` directly in the value
    column; ``"suffix"`` reads a companion column ``<marker><flag_suffix>``.
    """

    na_token: str = "NA"
    flag_mode: str = "sentinel"
    loq_token: str = "<LOQ"
    lod_token: str = "<LOD"
    flag_suffix: str = "_flag"
    strict: bool = False

    def __post_init__(self):
        if self.flag_mode not in ("sentinel", "suffix"):
            raise ValueError(f"flag_mode must be 'sentinel' or 'suffix', not {self.flag_mode!r}")


_ID_COLUMNS = ("athlete_id", "timestamp", "sex", "label")
_OPTIONAL_COLUMNS = ("cohort",)


def _parse_header(header: Sequence[str], schema: CsvSchema):
    missing = [c for c in _ID_COLUMNS if c not in header]
    if missing:
        raise MalformedRow(f"header lacks required columns {missing}")
    value_cols: dict[Marker, int] = {}
    flag_cols: dict[Marker, int] = {}
    for idx, name in enumerate(header):
        if name in _ID_COLUMNS or name in _OPTIONAL_COLUMNS:
            continue
        if schema.flag_mode == "suffix" and name.endswith(schema.flag_suffix):
            base = name[: -len(schema.flag_suffix)]
            try:
                flag_cols[coerce_marker(base)] = idx
            except ValueError:
                raise UnknownMarkerColumn(name) from None
            continue
        try:
            value_cols[coerce_marker(name)] = idx
        except ValueError:
            raise UnknownMarkerColumn(name) from None
    for m in flag_cols:
        if m not in value_cols:
            raise UnknownMarkerColumn(f"flag column for {m.value} without a value column")
    return value_cols, flag_cols


def _parse_flag(token: str, schema: CsvSchema) -> LimitFlag:
    token = token.strip()
    if token in ("", LimitFlag.MEASURED.value, schema.na_token):
        return LimitFlag.MEASURED
    if token in (schema.loq_token, LimitFlag.BELOW_LOQ.value):
        return LimitFlag.BELOW_LOQ
    if token in (schema.lod_token, LimitFlag.BELOW_LOD.value):
        return LimitFlag.BELOW_LOD
    raise ValueError(f"unknown flag {token!r}")


def _parse_row(row: Sequence[str], header_len: int, value_cols, flag_cols,
               col: dict[str, int], schema: CsvSchema):
    if len(row) != header_len:
        raise ValueError(f"expected {header_len} fields, got {len(row)}")
    athlete_id = row[col["athlete_id"]].strip()
    cohort = row[col["cohort"]].strip() if "cohort" in col else "athlete"
    if cohort not in ("athlete", "baseline"):
        raise ValueError(f"cohort must be athlete or baseline, not {cohort!r}")
    if cohort == "athlete" and not athlete_id:
        raise ValueError("empty athlete_id")
    timestamp = int(row[col["timestamp"]])
    sex = Sex(row[col["sex"]].strip())
    lab_tok = row[col["label"]].strip()
    label = None if lab_tok in ("", schema.na_token) else Label(lab_tok)
    values: dict[Marker, tuple[float, LimitFlag]] = {}
    for m, idx in value_cols.items():
        tok = row[idx].strip()
        if tok in ("", schema.na_token):
            continue
        if schema.flag_mode == "sentinel" and tok in (schema.loq_token, schema.lod_token):
            flag = _parse_flag(tok, schema)
            raw = 0.0
        else:
            raw = float(tok)
            flag = _parse_flag(row[flag_cols[m]], schema) if m in flag_cols else LimitFlag.MEASURED
        if flag is LimitFlag.MEASURED and not (raw > 0 and math.isfinite(raw)):
            raise NonPositiveValue(f"{m.value}={tok}")
        if flag is not LimitFlag.MEASURED and m.kind == "concentration":
            apply_detection_limits(raw, m, flag)
        values[m] = (raw, flag)
    return cohort, RawSample(athlete_id, timestamp, sex, values, label)


def ingest_csv(stream: TextIO | str | bytes, schema: CsvSchema | None = None) -> ProfileCollection:
    """Read a profile CSV.

    Rows that fail validation go to ``ProfileCollection.rejects`` with a
    reason (or raise :class:`MalformedRow` when ``schema.strict``). Lines
    starting with ``#`` are provenance comments and are skipped.
    """
    schema = schema or CsvSchema()
    if isinstance(stream, bytes):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    numbered = ((i, line) for i, line in enumerate(stream, start=1)
                if not line.startswith("#") and line.strip())
    lines = list(numbered)
    if not lines:
        raise MalformedRow("empty file")
    reader = csv.reader([line for _, line in lines])
    header = [h.strip() for h in next(reader)]
    value_cols, flag_cols = _parse_header(header, schema)
    col = {name: i for i, name in enumerate(header)}

    series: dict[str, list[RawSample]] = {}
    baseline: list[RawSample] = []
    rejects: list[Reject] = []
    for (lineno, _), row in zip(lines[1:], reader):
        try:
            cohort, sample = _parse_row(row, len(header), value_cols, flag_cols, col, schema)
        except (ValueError, KeyError) as exc:
            if schema.strict:
                raise MalformedRow(f"line {lineno}: {exc}") from exc
            rejects.append(Reject(lineno, str(exc), tuple(row)))
            continue
        if cohort == "baseline":
            baseline.append(sample)
        else:
            series.setdefault(sample.athlete_id, []).append(sample)

    athletes = []
    for aid, samples in series.items():
        samples.sort(key=lambda s: s.timestamp)
        for prev, cur in zip(samples, samples[1:]):
            if prev.timestamp == cur.timestamp:
                raise DuplicateTimestamp(f"athlete {aid}: timestamp {cur.timestamp} repeated")
        sexes = {s.sex for s in samples}
        if len(sexes) != 1:
            raise MalformedRow(f"athlete {aid}: inconsistent sex {sorted(x.value for x in sexes)}")
        athletes.append(Athlete(aid, samples[0].sex, tuple(samples)))
    return ProfileCollection(tuple(athletes), tuple(baseline), tuple(rejects))


def _format_value(raw: float, flag: LimitFlag, schema: CsvSchema) -> tuple[str, str]:
    if flag is LimitFlag.MEASURED:
        return repr(float(raw)), ""
    token = schema.loq_token if flag is LimitFlag.BELOW_LOQ else schema.lod_token
    if schema.flag_mode == "sentinel":
        return token, ""
    return repr(float(raw)), token


def write_csv(collection: ProfileCollection, stream: TextIO | None = None,
              schema: CsvSchema | None = None,
              markers: Sequence[Marker] = ALL_MARKERS,
              comment: str | None = None) -> str | None:
    """Canonical CSV: fixed column order, athletes in collection order."""
    schema = schema or CsvSchema()
    out = stream if stream is not None else io.StringIO()
    if comment:
        for line in comment.splitlines():
            out.write(f"# {line}\n")
    header = ["athlete_id", "timestamp", "sex", "label", "cohort"]
    for m in markers:
        header.append(m.value)
        if schema.flag_mode == "suffix":
            header.append(m.value + schema.flag_suffix)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)

    def emit(sample: RawSample, cohort: str):
        row = [sample.athlete_id, str(sample.timestamp), sample.sex.value,
               sample.label.value if sample.label else schema.na_token, cohort]
        for m in markers:
            if m in sample.values:
                v, f = _format_value(*sample.values[m], schema)
            else:
                v, f = schema.na_token, ""
            row.append(v)
            if schema.flag_mode == "suffix":
                row.append(f)
        writer.writerow(row)

    for a in collection.athletes:
        for s in a.samples:
            emit(s, "athlete")
    for s in collection.baseline:
        emit(s, "baseline")
    if stream is None:
        return out.getvalue()
    return None


def _sample_record(s: RawSample, cohort: str) -> dict:
    return {
        "cohort": cohort,
        "athlete_id": s.athlete_id,
        "timestamp": s.timestamp,
        "sex": s.sex.value,
        "label": s.label.value if s.label else None,
        "values": {m.value: [s.values[m][0], s.values[m][1].value]
                   for m in ALL_MARKERS if m in s.values},
    }


def to_jsonl(collection: ProfileCollection) -> str:
    """Newline-delimited JSON records with a stable key order."""
    lines = []
    for a in collection.athletes:
        lines.extend(json.dumps(_sample_record(s, "athlete")) for s in a.samples)
    lines.extend(json.dumps(_sample_record(s, "baseline")) for s in collection.baseline)
    return "\n".join(lines) + "\n"


def from_jsonl(text: str | Iterable[str]) -> ProfileCollection:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    series: dict[str, list[RawSample]] = {}
    baseline = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        values = {Marker(k): (float(v), LimitFlag(f)) for k, (v, f) in rec["values"].items()}
        s = RawSample(rec["athlete_id"], int(rec["timestamp"]), Sex(rec["sex"]), values,
                      Label(rec["label"]) if rec["label"] else None)
        if rec["cohort"] == "baseline":
            baseline.append(s)
        else:
            series.setdefault(s.athlete_id, []).append(s)
    athletes = tuple(Athlete(aid, ss[0].sex, tuple(sorted(ss, key=lambda s: s.timestamp)))
                     for aid, ss in series.items())
    return ProfileCollection(athletes, tuple(baseline))
