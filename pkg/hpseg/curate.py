"""Series selection over DICOM metadata manifests (no pixel data).

Per study: drop series whose description matches an exclusion pattern,
keep ORIGINAL/PRIMARY/AXIAL[/HELIX] image types, prefer the softest
reconstruction kernel, then the most axial slices, then the smallest
series id.
"""
from __future__ import annotations

import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd

from .config import read_config_file
from .errors import ConfigError, ContractError, logger

ALLOWED_IMAGE_TYPES = (
    ("ORIGINAL", "PRIMARY", "AXIAL"),
    ("ORIGINAL", "PRIMARY", "AXIAL", "HELIX"),
)
UNKNOWN = "UNKNOWN"
DEFAULT_EXCLUDE = ("radiopaedia",)
NO_USABLE_SERIES = "no-usable-series"

# softest first
DEFAULT_ORDERINGS = {
    "GE": ("SOFT", "STANDARD", "DETAIL", "CHEST", "LUNG", "BONE", "BONEPLUS", "EDGE"),
    "SIEMENS": ("B10F", "B20F", "B25F", "B30F", "B31F", "B35F", "B40F", "B41F", "B45F", "B46F",
                "B50F", "B60F", "B70F", "B80F"),
    "PHILIPS": ("A", "B", "C", "D", "E", "L", "YA", "YB", "YC", "YD"),
    "TOSHIBA": ("FC01", "FC02", "FC03", "FC04", "FC05", "FC07", "FC08", "FC10", "FC13", "FC17",
                "FC18", "FC30", "FC50", "FC51", "FC52", "FC53", "FC55", "FC56", "FC86"),
}
DEFAULT_FALLBACK = ("SOFT", "SMOOTH", "STANDARD", "MEDIUM", "DETAIL", "SHARP", "LUNG", "BONE", "EDGE")
DEFAULT_ALIASES = {"CANON": "TOSHIBA"}

_TOKEN_SPLIT = re.compile(r"[\\/|]")
_LINE_NUMBER = re.compile(r"line (\d+)")
# first field of a CSV row that held more fields than the header
_OVERLONG = "\x00overlong:"
COLUMNS = ("study_id", "series_id", "image_type", "convolution_kernel", "manufacturer",
           "axial_slice_count", "description")


@dataclass
class CurateConfig:
    exclude_patterns: tuple[str, ...] = DEFAULT_EXCLUDE
    kernel_table: str = ""

    def table(self) -> "KernelTable":
        return KernelTable.from_file(self.kernel_table) if self.kernel_table else KernelTable()


@dataclass(frozen=True)
class SeriesRecord:
    study_id: str
    series_id: str
    image_type: tuple[str, ...]
    convolution_kernel: str = UNKNOWN
    manufacturer: str = UNKNOWN
    axial_slice_count: int = 0
    description: str = ""


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


@dataclass
class KernelTable:
    orderings: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_ORDERINGS))
    fallback: tuple[str, ...] = DEFAULT_FALLBACK
    aliases: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ALIASES))

    @classmethod
    def from_file(cls, path) -> "KernelTable":
        """Load a table document: {orderings: {VENDOR: [softest, ...]}, fallback: [...], aliases: {...}}."""
        data = read_config_file(path)
        unknown = sorted(set(data) - {"orderings", "fallback", "aliases"})
        if unknown:
            raise ConfigError(f"Kernel table {path}: unknown keys {unknown}")
        table = cls()
        for vendor, kernels in data.get("orderings", {}).items():
            table.orderings[vendor.upper()] = tuple(_normalize_kernel(k) for k in kernels)
        if "fallback" in data:
            table.fallback = tuple(_normalize_kernel(k) for k in data["fallback"])
        table.aliases.update({k.upper(): v.upper() for k, v in data.get("aliases", {}).items()})
        return table

    def ordering(self, manufacturer: str) -> tuple[str, ...]:
        for word in manufacturer.upper().replace(",", " ").split():
            word = self.aliases.get(word, word)
            if word in self.orderings:
                return self.orderings[word]
        return self.fallback

    def rank(self, manufacturer: str, kernel: str) -> int:
        """Softness rank; kernels missing from the table rank after every known one."""
        order = self.ordering(manufacturer)
        kernel = _normalize_kernel(kernel)
        return order.index(kernel) if kernel in order else len(order)


def _normalize_kernel(kernel) -> str:
    kernel = str(kernel or "").strip().upper()
    if not kernel:
        return UNKNOWN
    return _TOKEN_SPLIT.split(kernel)[0].strip() or UNKNOWN


def _tokens(image_type) -> tuple[str, ...]:
    if isinstance(image_type, (list, tuple)):
        parts = [str(p) for p in image_type]
    else:
        parts = _TOKEN_SPLIT.split(str(image_type or ""))
    return tuple(p.strip().upper() for p in parts if p.strip())


def _record(row: Mapping, line: int) -> SeriesRecord | RowError:
    study = str(row.get("study_id") or "").strip()
    series = str(row.get("series_id") or "").strip()
    if not study or not series:
        return RowError(line, "study_id and series_id are required")
    raw_count = str(row.get("axial_slice_count", "")).strip()
    try:
        count = int(float(raw_count))
    except (ValueError, OverflowError):
        return RowError(line, f"axial_slice_count '{raw_count}' is not a number")
    if count < 0:
        return RowError(line, f"axial_slice_count must be non-negative, got {count}")
    return SeriesRecord(
        study_id=study,
        series_id=series,
        image_type=_tokens(row.get("image_type")),
        convolution_kernel=_normalize_kernel(row.get("convolution_kernel")),
        manufacturer=str(row.get("manufacturer") or "").strip().upper() or UNKNOWN,
        axial_slice_count=count,
        description=str(row.get("description") or "").strip(),
    )


def _read_csv(document: str) -> pd.DataFrame:
    """Read every CSV row; rows with surplus fields are kept as marked placeholders."""
    header, _, body = document.partition("\n")
    width = len(pd.read_csv(io.StringIO(header), nrows=0).columns)

    def mark(fields):
        return [f"{_OVERLONG}{len(fields)}"] + [""] * (width - 1)

    # pandas reads surplus fields of the first data row as an index, so a full-width row leads
    placeholder = ",".join(['""'] * width)
    frame = pd.read_csv(io.StringIO(f"{header}\n{placeholder}\n{body}"), dtype=str, keep_default_na=False,
                        skipinitialspace=True, engine="python", on_bad_lines=mark)
    return frame.iloc[1:].reset_index(drop=True)


def parse_manifest(document: str) -> tuple[list[SeriesRecord], list[RowError]]:
    """Parse a CSV or JSON manifest; bad rows become RowErrors and are skipped."""
    text = document.lstrip()
    if not text:
        return [], []

    if text[0] in "[{":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            return [], [RowError(e.lineno, f"malformed JSON: {e.msg}")]
        rows = data.get("series", []) if isinstance(data, dict) else data
        numbered = [(i + 1, row) for i, row in enumerate(rows)]
    else:
        try:
            frame = _read_csv(text)
        except pd.errors.ParserError as e:
            match = _LINE_NUMBER.search(str(e))
            # reported lines count the placeholder row
            line = max(1, int(match.group(1)) - 1) if match else 1
            return [], [RowError(line, f"malformed CSV: {e}")]
        frame.columns = [c.strip().lower() for c in frame.columns]
        numbered = [(i + 2, row) for i, row in enumerate(frame.to_dict("records"))]

    records, errors = [], []
    for line, row in numbered:
        if not isinstance(row, Mapping):
            result = RowError(line, "row is not an object")
        elif str(next(iter(row.values()), "")).startswith(_OVERLONG):
            fields = next(iter(row.values()))[len(_OVERLONG):]
            result = RowError(line, f"expected {len(row)} fields, got {fields}")
        else:
            result = _record(row, line)
        (errors if isinstance(result, RowError) else records).append(result)
    for err in errors:
        logger.warning(f"Manifest line {err.line}: {err.message}")
    return records, errors


def read_manifest(path) -> tuple[list[SeriesRecord], list[RowError]]:
    with open(Path(path), "r", encoding="utf-8") as f:
        return parse_manifest(f.read())


@dataclass
class Selection:
    study_id: str
    series_id: str | None
    reasons: list[str]

    @property
    def outcome(self) -> str:
        return "selected" if self.series_id else NO_USABLE_SERIES

    def to_json(self) -> str:
        return json.dumps({"study_id": self.study_id, "series_id": self.series_id or "none",
                           "outcome": self.outcome, "reasons": self.reasons})


def select_series(records: Sequence[SeriesRecord], table: KernelTable | None = None,
                  exclude_patterns: Iterable[str] = DEFAULT_EXCLUDE) -> Selection:
    """Pick one series of a study; filters stop as soon as a single series remains."""
    if not records:
        raise ContractError("select_series needs at least one record")
    table = table or KernelTable()
    pool = sorted(records, key=lambda r: (r.series_id, r.image_type, r.convolution_kernel, r.axial_slice_count))
    study = pool[0].study_id
    reasons = []

    patterns = [re.compile(p, re.IGNORECASE) for p in exclude_patterns]
    if patterns:
        kept = [r for r in pool if not any(p.search(r.description) for p in patterns)]
        if len(kept) != len(pool):
            reasons.append(f"name: {len(pool)} -> {len(kept)}")
        pool = kept

    kept = [r for r in pool if r.image_type in ALLOWED_IMAGE_TYPES]
    reasons.append(f"image-type: {len(pool)} -> {len(kept)}")
    pool = kept
    if not pool:
        return Selection(study, None, reasons)

    if len(pool) > 1:
        softest = min(table.rank(r.manufacturer, r.convolution_kernel) for r in pool)
        kept = [r for r in pool if table.rank(r.manufacturer, r.convolution_kernel) == softest]
        reasons.append(f"kernel: {len(pool)} -> {len(kept)}")
        pool = kept
    if len(pool) > 1:
        most = max(r.axial_slice_count for r in pool)
        kept = [r for r in pool if r.axial_slice_count == most]
        reasons.append(f"slices: {len(pool)} -> {len(kept)}")
        pool = kept
    if len(pool) > 1:
        reasons.append(f"series-id: {len(pool)} -> 1")
    return Selection(study, pool[0].series_id, reasons)


def curate_studies(records: Iterable[SeriesRecord], table: KernelTable | None = None,
                   exclude_patterns: Iterable[str] = DEFAULT_EXCLUDE) -> list[Selection]:
    """One selection per study, ordered by study id."""
    by_study = defaultdict(list)
    for r in records:
        by_study[r.study_id].append(r)
    patterns = tuple(exclude_patterns)
    selections = [select_series(by_study[s], table, patterns) for s in sorted(by_study)]
    chosen = sum(1 for s in selections if s.series_id)
    logger.info(f"Curated {len(selections)} studies: {chosen} selected, {len(selections) - chosen} without usable series")
    return selections
