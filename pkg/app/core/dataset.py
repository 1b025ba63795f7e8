"""
Response Dataset - long-format ordinal observations

One row per observed (unit, item, time) triple:

    unit_id,item_id,time,response[,trait]

Items and units are ordered lexicographically; subsets keep the index maps
of the dataset they were cut from so that model parameters stay aligned.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.errors import DataError, StructuralError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ["unit_id", "item_id", "time", "response"]
TRAIT_COLUMN = "trait"


@dataclass(frozen=True, eq=False)
class ResponseDataset:
    """
    Sparse longitudinal ordinal responses y_ijt with index maps

    frame columns: unit_id (str), item_id (str), time (float), response (int),
    unit_index (int), item_index (int); rows sorted by (unit, item, time).
    """

    frame: pd.DataFrame
    unit_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    num_levels: int
    trait_map: Optional[Dict[str, str]] = None
    _unit_lookup: Dict[str, int] = field(default=None, repr=False)
    _item_lookup: Dict[str, int] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_unit_lookup", {unit: i for i, unit in enumerate(self.unit_ids)})
        object.__setattr__(self, "_item_lookup", {item: j for j, item in enumerate(self.item_ids)})

    # ------------------------------------------------------------------ build

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        num_levels: Optional[int] = None,
        unit_ids: Optional[Sequence[str]] = None,
        item_ids: Optional[Sequence[str]] = None,
        trait_map: Optional[Dict[str, str]] = None,
    ) -> "ResponseDataset":
        """
        Validate and index a long-format frame

        Raises:
            DataError: missing columns, duplicate triples, responses outside 1..C,
                       or units/items absent from the supplied index maps
        """
        missing = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
        if missing:
            raise DataError("dataset is missing required columns", {"missing": missing})

        data = pd.DataFrame({
            "unit_id": frame["unit_id"].astype(str).to_numpy(),
            "item_id": frame["item_id"].astype(str).to_numpy(),
            "time": pd.to_numeric(frame["time"]).astype(float).to_numpy(),
            "response": pd.to_numeric(frame["response"]).astype(np.int64).to_numpy(),
        })

        duplicated = data.duplicated(subset=["unit_id", "item_id", "time"], keep=False)
        if duplicated.any():
            first = data.loc[duplicated].iloc[0]
            raise DataError(
                "duplicate (unit, item, time) triple",
                {"unit_id": first["unit_id"], "item_id": first["item_id"], "time": float(first["time"]), "count": int(duplicated.sum())},
            )

        observed_max = int(data["response"].max()) if len(data) else 0
        levels = int(num_levels) if num_levels is not None else max(observed_max, 2)
        out_of_range = (data["response"] < 1) | (data["response"] > levels)
        if out_of_range.any():
            bad = data.loc[out_of_range].iloc[0]
            raise DataError("response outside 1..C", {"response": int(bad["response"]), "levels": levels, "unit_id": bad["unit_id"], "item_id": bad["item_id"]})

        units = tuple(unit_ids) if unit_ids is not None else tuple(sorted(data["unit_id"].unique()))
        items = tuple(item_ids) if item_ids is not None else tuple(sorted(data["item_id"].unique()))
        unit_lookup = {unit: i for i, unit in enumerate(units)}
        item_lookup = {item: j for j, item in enumerate(items)}

        unknown_units = sorted(set(data["unit_id"]) - set(unit_lookup))
        unknown_items = sorted(set(data["item_id"]) - set(item_lookup))
        if unknown_units or unknown_items:
            raise DataError("observations reference unknown units or items", {"units": unknown_units[:5], "items": unknown_items[:5]})

        data["unit_index"] = data["unit_id"].map(unit_lookup).astype(np.int64)
        data["item_index"] = data["item_id"].map(item_lookup).astype(np.int64)
        data = data.sort_values(["unit_index", "item_index", "time"], kind="mergesort").reset_index(drop=True)

        return cls(frame=data, unit_ids=units, item_ids=items, num_levels=levels, trait_map=dict(trait_map) if trait_map else None)

    # ------------------------------------------------------------- accessors

    @property
    def num_observations(self) -> int:
        return int(len(self.frame))

    @property
    def num_units(self) -> int:
        return len(self.unit_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def unit_index(self) -> np.ndarray:
        return self.frame["unit_index"].to_numpy()

    @property
    def item_index(self) -> np.ndarray:
        return self.frame["item_index"].to_numpy()

    @property
    def times(self) -> np.ndarray:
        return self.frame["time"].to_numpy(dtype=float)

    @property
    def responses(self) -> np.ndarray:
        return self.frame["response"].to_numpy()

    def unit_position(self, unit_id: str) -> int:
        if unit_id not in self._unit_lookup:
            raise DataError(f"unknown unit '{unit_id}'")
        return self._unit_lookup[unit_id]

    def item_position(self, item_id: str) -> int:
        if item_id not in self._item_lookup:
            raise DataError(f"unknown item '{item_id}'")
        return self._item_lookup[item_id]

    def rows_for_unit(self, unit_id: str) -> pd.DataFrame:
        return self.frame[self.frame["unit_id"] == unit_id]

    def time_range(self) -> Tuple[float, float]:
        if self.num_observations == 0:
            return (0.0, 0.0)
        return (float(self.frame["time"].min()), float(self.frame["time"].max()))

    # ------------------------------------------------------------ transforms

    def subset(self, mask) -> "ResponseDataset":
        """Rows selected by a boolean mask, keeping index maps and C"""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != self.num_observations:
            raise DataError("subset mask length does not match the dataset", {"mask": mask.shape[0], "rows": self.num_observations})
        return ResponseDataset(
            frame=self.frame.loc[mask].reset_index(drop=True),
            unit_ids=self.unit_ids,
            item_ids=self.item_ids,
            num_levels=self.num_levels,
            trait_map=self.trait_map,
        )

    def with_trait_map(self, trait_map: Dict[str, str]) -> "ResponseDataset":
        missing = [item for item in self.item_ids if item not in trait_map]
        if missing:
            raise DataError("trait map does not cover every item", {"missing": missing[:5]})
        return ResponseDataset(self.frame, self.unit_ids, self.item_ids, self.num_levels, dict(trait_map))

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame in the canonical column order"""
        frame = self.frame[REQUIRED_COLUMNS].copy()
        if self.trait_map:
            frame[TRAIT_COLUMN] = frame["item_id"].map(self.trait_map)
        return frame

    def fingerprint(self) -> str:
        """sha256 over the canonical observation records"""
        records = self.frame[REQUIRED_COLUMNS].to_csv(index=False, float_format="%.17g")
        digest = hashlib.sha256()
        digest.update(records.encode("utf-8"))
        digest.update("|".join(self.item_ids).encode("utf-8"))
        digest.update(str(self.num_levels).encode("utf-8"))
        return digest.hexdigest()

    def equals(self, other: "ResponseDataset") -> bool:
        return (
            self.unit_ids == other.unit_ids
            and self.item_ids == other.item_ids
            and self.num_levels == other.num_levels
            and (self.trait_map or None) == (other.trait_map or None)
            and self.frame.equals(other.frame)
        )


# ============================================================================
# CSV INGESTION AND EMISSION
# ============================================================================

def _first_bad_line(values: pd.Series, parsed: pd.Series) -> Optional[int]:
    bad = parsed.isna() & values.notna() | values.isna()
    if bad.any():
        # header is line 1
        return int(np.flatnonzero(bad.to_numpy())[0]) + 2
    return None


def ingest_csv(path: str, num_levels: Optional[int] = None) -> ResponseDataset:
    """
    Parse a long-format CSV into a ResponseDataset

    Args:
        path: file with header unit_id,item_id,time,response (optional trait column)
        num_levels: C; inferred as the maximum response when omitted

    Raises:
        DataError: unreadable file, malformed row (with line number), duplicate
                   triple or out-of-range response
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise DataError(f"data file not found: {path}")

    try:
        raw = pd.read_csv(file_path, dtype=str, keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"data file has no header: {path}") from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed row in {path}", {"error": str(exc)}) from exc

    missing = [column for column in REQUIRED_COLUMNS if column not in raw.columns]
    if missing:
        raise DataError("header must contain unit_id,item_id,time,response", {"missing": missing, "path": str(path)})

    for column in ("unit_id", "item_id"):
        line = _first_bad_line(raw[column], raw[column])
        if line is not None:
            raise DataError(f"malformed row at line {line}: empty {column}", {"line": line})

    times = pd.to_numeric(raw["time"], errors="coerce")
    line = _first_bad_line(raw["time"], times)
    if line is None and not np.all(np.isfinite(times.to_numpy(dtype=float))):
        line = int(np.flatnonzero(~np.isfinite(times.to_numpy(dtype=float)))[0]) + 2
    if line is not None:
        raise DataError(f"malformed row at line {line}: time must be a finite number", {"line": line})

    responses = pd.to_numeric(raw["response"], errors="coerce")
    not_integer = responses.notna() & (responses != responses.round())
    line = _first_bad_line(raw["response"], responses.where(~not_integer))
    if line is not None:
        raise DataError(f"malformed row at line {line}: response must be an integer level", {"line": line})

    frame = pd.DataFrame({"unit_id": raw["unit_id"], "item_id": raw["item_id"], "time": times, "response": responses.astype(np.int64)})

    trait_map = None
    if TRAIT_COLUMN in raw.columns:
        traits = raw[["item_id", TRAIT_COLUMN]].dropna().drop_duplicates()
        conflicting = traits["item_id"][traits["item_id"].duplicated()]
        if len(conflicting):
            raise DataError("item mapped to more than one trait", {"item_id": conflicting.iloc[0]})
        trait_map = dict(zip(traits["item_id"], traits[TRAIT_COLUMN]))

    dataset = ResponseDataset.from_frame(frame, num_levels=num_levels, trait_map=trait_map)
    logger.info(f"✅ Ingested {dataset.num_observations} observations ({dataset.num_units} units, {dataset.num_items} items, C={dataset.num_levels}) from {path}")
    return dataset


def to_csv(dataset: ResponseDataset, path: str) -> None:
    """Write the dataset in the ingestion format (full float precision)"""
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(file_path, index=False)


def concat_datasets(parts: Iterable[ResponseDataset]) -> ResponseDataset:
    """Union of subsets cut from the same parent dataset"""
    parts = list(parts)
    if not parts:
        raise DataError("nothing to concatenate")
    first = parts[0]
    for part in parts[1:]:
        if part.unit_ids != first.unit_ids or part.item_ids != first.item_ids:
            raise DataError("datasets do not share index maps")
    frame = pd.concat([part.frame[REQUIRED_COLUMNS] for part in parts], ignore_index=True)
    return ResponseDataset.from_frame(frame, num_levels=first.num_levels, unit_ids=first.unit_ids, item_ids=first.item_ids, trait_map=first.trait_map)


# ============================================================================
# LOADING MATRICES
# ============================================================================

def write_loadings_csv(loadings, row_labels: Sequence[str], item_ids: Sequence[str], path: str) -> Path:
    """Rows = factors or units, columns = items"""
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.atleast_2d(np.asarray(loadings, dtype=float)), index=list(row_labels), columns=list(item_ids))
    frame.to_csv(file_path, float_format="%.10g")
    return file_path


def read_loadings_csv(path: str, item_ids: Sequence[str]) -> np.ndarray:
    """
    Read a K×J loading matrix written by write_loadings_csv, reordering its
    columns to the given item order

    Raises:
        DataError: missing or unreadable file
        StructuralError: the columns do not cover the items
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise DataError(f"loadings file not found: {path}")
    try:
        frame = pd.read_csv(file_path, index_col=0)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise DataError(f"unreadable loadings file: {path}", {"error": str(exc)}) from exc
    frame.columns = [str(column) for column in frame.columns]
    missing = [item for item in item_ids if item not in frame.columns]
    if missing:
        raise StructuralError("loadings do not cover every item", {"missing": missing[:5], "path": str(path)})
    values = frame.loc[:, list(item_ids)].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError("loadings contain non-finite values", {"path": str(path)})
    return values


__all__ = [
    "ResponseDataset",
    "ingest_csv",
    "to_csv",
    "concat_datasets",
    "write_loadings_csv",
    "read_loadings_csv",
    "REQUIRED_COLUMNS",
]
