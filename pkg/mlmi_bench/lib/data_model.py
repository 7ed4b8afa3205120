"""
Data Model - Hierarchical (school / child / wave) datasets, wide <-> long reshaping and dummy indicators
"""
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCHOOL = 'school'
CHILD = 'child'
WAVE = 'wave'
CHILD_KEYS = [SCHOOL, CHILD]
ROW_KEYS = [SCHOOL, CHILD, WAVE]

# Missing cells are pd.NA inside nullable Float64 columns, never a numeric code
VALUE_DTYPE = 'Float64'


class StructuralError(ValueError):
    """Dataset layout violates the hierarchical contract (balance, keys, level constancy, names)"""


class SentinelLeakError(ValueError):
    """A numeric kernel was handed a missing cell"""


class Role(str, Enum):
    OUTCOME = 'outcome'
    EXPOSURE = 'exposure'
    CONFOUNDER = 'confounder'
    AUXILIARY = 'auxiliary'
    DERIVED = 'derived'
    ID = 'id'
    TIME = 'time'


class Level(IntEnum):
    TIME_VARYING = 1
    CHILD = 2
    SCHOOL = 3


@dataclass(frozen=True)
class HierIndex:
    """Row key: school i, child j (unique within school), wave k (None for child-level rows)"""
    school_id: int
    child_id: int
    wave: Optional[int] = None

    def __post_init__(self):
        if self.school_id < 1 or self.child_id < 1:
            raise StructuralError(f'ids must be >= 1, got {self}')
        if self.wave is not None and not 1 <= self.wave <= 7:
            raise StructuralError(f'wave must be in 1..7, got {self.wave}')


@dataclass(frozen=True)
class Column:
    """
    Column descriptor

    A time-varying column measured at wave k + lag is stored in the long row of analysis
    wave k (the exposure measured at k-1 has lag -1). Derived columns record their formula
    as (op, parents) with op in {'product', 'square'}.
    """
    name: str
    role: Role
    level: Level
    lag: int = 0
    formula: Optional[Tuple[str, Tuple[str, ...]]] = None

    @property
    def time_varying(self) -> bool:
        return self.level == Level.TIME_VARYING

    def wide_name(self, wave: int) -> str:
        return f'{self.name}{wave + self.lag}'

    def evaluate(self, parents: Mapping[str, np.ndarray]) -> np.ndarray:
        """Compute a derived column from its parents (NaN wherever a parent is NaN)"""
        if self.formula is None:
            raise StructuralError(f'column {self.name!r} is not derived')
        op, names = self.formula
        if op == 'product':
            out = np.ones_like(np.asarray(parents[names[0]], dtype=float))
            for name in names:
                out = out * np.asarray(parents[name], dtype=float)
            return out
        if op == 'square':
            return np.asarray(parents[names[0]], dtype=float) ** 2
        raise StructuralError(f'unknown formula op {op!r} for column {self.name!r}')


@dataclass(frozen=True)
class Schema:
    """Ordered column descriptors plus the analysis waves of the long panel"""
    columns: Tuple[Column, ...]
    waves: Tuple[int, ...] = (3, 5, 7)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise StructuralError(f'duplicate column names in schema: {names}')
        if any(n in ROW_KEYS for n in names):
            raise StructuralError(f'column names may not shadow key columns {ROW_KEYS}')
        if not self.waves or sorted(set(self.waves)) != list(self.waves):
            raise StructuralError(f'analysis waves must be strictly increasing, got {self.waves}')

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column:
        for column in self.columns:
            if column.name == name:
                return column
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    @property
    def time_varying(self) -> List[Column]:
        return [c for c in self.columns if c.time_varying]

    @property
    def baseline(self) -> List[Column]:
        return [c for c in self.columns if not c.time_varying]

    def wide_names(self) -> List[str]:
        """Wide column order: per-wave columns of each time-varying column, then baseline columns"""
        out = []
        for column in self.time_varying:
            out.extend(column.wide_name(k) for k in self.waves)
        out.extend(c.name for c in self.baseline)
        return out

    def wide_lookup(self) -> Dict[str, Tuple[Column, Optional[int]]]:
        """Map wide column name -> (descriptor, analysis wave or None for baseline)"""
        lookup: Dict[str, Tuple[Column, Optional[int]]] = {c.name: (c, None) for c in self.baseline}
        for column in self.time_varying:
            for k in self.waves:
                lookup[column.wide_name(k)] = (column, k)
        return lookup

    def with_column(self, column: Column) -> 'Schema':
        if self.has(column.name):
            raise StructuralError(f'column {column.name!r} already registered')
        return Schema(self.columns + (column,), self.waves)


@dataclass(frozen=True)
class DesignMatrix:
    """Dense real matrix with labelled columns; never holds missing entries"""
    entries: np.ndarray
    column_labels: Tuple[str, ...]

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[1] != len(self.column_labels):
            raise StructuralError(
                f'design shape {self.entries.shape} does not match {len(self.column_labels)} labels')
        if np.isnan(self.entries).any():
            raise SentinelLeakError('design matrix contains missing entries')

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]


def to_array(frame: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
    """
    Extract numeric columns as a float matrix

    Raises:
        SentinelLeakError: if any requested cell is missing
    """
    names = list(names)
    block = frame[names]
    # a repeated name selects the same column twice
    leaking = [n for n in dict.fromkeys(names) if frame[n].isna().any()]
    if leaking:
        raise SentinelLeakError(f'missing cells reached a numeric kernel in columns {leaking}')
    return block.to_numpy(dtype=float)


def to_float_with_nan(series: pd.Series) -> np.ndarray:
    """Float copy of a column with missing cells as NaN (for imputers that track masks themselves)"""
    return np.array(series.to_numpy(dtype=float, na_value=np.nan), dtype=float, copy=True)


def _as_value_column(values: Union[np.ndarray, pd.Series, Iterable]) -> pd.arrays.FloatingArray:
    arr = np.asarray(values)
    if arr.dtype.kind in 'fiub':
        return pd.array(arr.astype(float), dtype=VALUE_DTYPE)  # NaN becomes NA
    return pd.array([None if pd.isna(v) else float(v) for v in arr], dtype=VALUE_DTYPE)


def _prepare_frame(frame: pd.DataFrame, keys: List[str], value_names: List[str]) -> pd.DataFrame:
    missing = [n for n in keys + value_names if n not in frame.columns]
    if missing:
        raise StructuralError(f'frame lacks required columns {missing}')
    out = pd.DataFrame({k: frame[k].to_numpy(dtype=np.int64) for k in keys})
    for name in value_names:
        column = frame[name]
        if isinstance(column.dtype, pd.Float64Dtype):
            out[name] = column.array.copy()
        else:
            out[name] = _as_value_column(column.to_numpy())
    out = out.sort_values(keys, kind='mergesort').reset_index(drop=True)
    if out.duplicated(keys).any():
        dup = out.loc[out.duplicated(keys, keep=False), keys].iloc[0].tolist()
        raise StructuralError(f'duplicate row key {dict(zip(keys, dup))}')
    return out


class _DatasetMixin:
    frame: pd.DataFrame
    schema: Schema

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def missing_mask(self, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        names = list(names) if names is not None else self.value_names
        return self.frame[names].isna()

    def incomplete_columns(self) -> List[str]:
        mask = self.missing_mask()
        return [n for n in self.value_names if mask[n].any()]

    def n_missing(self) -> int:
        return int(self.missing_mask().to_numpy().sum())

    def values(self, names: Sequence[str]) -> np.ndarray:
        return to_array(self.frame, names)

    def column_with_nan(self, name: str) -> np.ndarray:
        return to_float_with_nan(self.frame[name])


@dataclass(frozen=True)
class LongDataset(_DatasetMixin):
    """
    One row per (school, child, analysis wave)

    Datasets are immutable after construction: every transformation returns a new value.
    """
    frame: pd.DataFrame
    schema: Schema
    label: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'frame', _prepare_frame(self.frame, ROW_KEYS, self.schema.names))
        _check_balanced(self.frame, self.schema.waves)
        check_levels(self)

    @property
    def value_names(self) -> List[str]:
        return self.schema.names

    def keys(self) -> List[HierIndex]:
        return [HierIndex(int(s), int(c), int(k)) for s, c, k in self.frame[ROW_KEYS].to_numpy()]

    def with_values(self, updates: Mapping[str, np.ndarray], schema: Optional[Schema] = None,
                    label: Optional[str] = None) -> 'LongDataset':
        frame = self.frame.copy()
        for name, values in updates.items():
            frame[name] = _as_value_column(np.asarray(values, dtype=float))
        return LongDataset(frame, schema or self.schema, self.label if label is None else label)

    def response_indicators(self, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """R matrix (1 = observed, 0 = missing) keyed by (school, child, wave)"""
        names = list(names) if names is not None else self.incomplete_columns()
        indicators = (~self.missing_mask(names)).astype(np.int8)
        return pd.concat([self.frame[ROW_KEYS], indicators], axis=1)


@dataclass(frozen=True)
class WideDataset(_DatasetMixin):
    """One row per (school, child); time-varying columns split into `<base><wave>` columns"""
    frame: pd.DataFrame
    schema: Schema
    label: str = ''

    def __post_init__(self):
        extra = [n for n in self.frame.columns if n not in CHILD_KEYS and n not in self.schema.wide_names()]
        object.__setattr__(self, 'frame', _prepare_frame(self.frame, CHILD_KEYS, self.schema.wide_names()))
        if extra:
            # Kept aside so reshape_long can report the offending suffix
            object.__setattr__(self, '_unregistered', tuple(extra))
        _check_school_constancy(self.frame, [c.name for c in self.schema.baseline if c.level == Level.SCHOOL])

    @property
    def value_names(self) -> List[str]:
        return self.schema.wide_names()

    def keys(self) -> List[HierIndex]:
        return [HierIndex(int(s), int(c)) for s, c in self.frame[CHILD_KEYS].to_numpy()]

    def with_values(self, updates: Mapping[str, np.ndarray], schema: Optional[Schema] = None,
                    label: Optional[str] = None) -> 'WideDataset':
        frame = self.frame.copy()
        for name, values in updates.items():
            frame[name] = _as_value_column(np.asarray(values, dtype=float))
        return WideDataset(frame, schema or self.schema, self.label if label is None else label)


def _check_balanced(frame: pd.DataFrame, waves: Tuple[int, ...]):
    expected = np.asarray(waves, dtype=np.int64)
    n_waves = len(expected)
    if len(frame) % n_waves:
        _raise_unbalanced(frame, waves)
    observed = frame[WAVE].to_numpy().reshape(-1, n_waves)
    children = frame[CHILD_KEYS].to_numpy().reshape(-1, n_waves, 2)
    same_child = (children == children[:, :1, :]).all()
    if not same_child or not (observed == expected).all():
        _raise_unbalanced(frame, waves)


def _raise_unbalanced(frame: pd.DataFrame, waves: Tuple[int, ...]):
    for (school, child), group in frame.groupby(CHILD_KEYS, sort=True):
        if tuple(group[WAVE]) != tuple(waves):
            raise StructuralError(
                f'unbalanced panel: child (school={school}, child={child}) has waves '
                f'{list(group[WAVE])}, expected {list(waves)}')
    raise StructuralError('unbalanced panel')


def _check_school_constancy(frame: pd.DataFrame, names: Sequence[str]):
    for name in names:
        counts = frame.groupby(SCHOOL)[name].nunique(dropna=False)
        if (counts > 1).any():
            raise StructuralError(f'level-3 column {name!r} varies within school {int(counts.idxmax())}')


def check_levels(data: Union[LongDataset, WideDataset]):
    """
    Re-check level constancy: level-2 columns constant within child, level-3 within school

    Raises:
        StructuralError: naming the column and the offending unit
    """
    if isinstance(data, WideDataset):
        _check_school_constancy(data.frame, [c.name for c in data.schema.baseline if c.level == Level.SCHOOL])
        return
    frame = data.frame
    n_waves = len(data.schema.waves)
    for column in data.schema.baseline:
        block = to_float_with_nan(frame[column.name]).reshape(-1, n_waves)
        isnan = np.isnan(block)
        mixed = isnan.any(axis=1) & ~isnan.all(axis=1)
        differs = ~isnan.any(axis=1) & (block != block[:, :1]).any(axis=1)
        bad = np.flatnonzero(mixed | differs)
        if bad.size:
            school, child = frame[CHILD_KEYS].to_numpy()[bad[0] * n_waves]
            raise StructuralError(
                f'level-2 column {column.name!r} varies across waves for child (school={school}, child={child})')
    _check_school_constancy(frame, [c.name for c in data.schema.baseline if c.level == Level.SCHOOL])


def reshape_wide(data: LongDataset) -> WideDataset:
    """
    Reshape a balanced long panel to one row per child

    Args:
        data: balanced LongDataset

    Returns:
        WideDataset with `<base><wave>` columns and baseline columns copied once
    """
    schema = data.schema
    n_waves = len(schema.waves)
    frame = data.frame
    first = frame.iloc[::n_waves]
    out = {SCHOOL: first[SCHOOL].to_numpy(), CHILD: first[CHILD].to_numpy()}
    for column in schema.time_varying:
        block = to_float_with_nan(frame[column.name]).reshape(-1, n_waves)
        for idx, k in enumerate(schema.waves):
            out[column.wide_name(k)] = pd.array(block[:, idx], dtype=VALUE_DTYPE)
    for column in schema.baseline:
        out[column.name] = pd.array(to_float_with_nan(first[column.name]),
                                    dtype=VALUE_DTYPE)
    return WideDataset(pd.DataFrame(out), schema, data.label)


def reshape_long(data: WideDataset) -> LongDataset:
    """
    Inverse of reshape_wide

    Raises:
        StructuralError: if the wide frame carries a column whose suffix is not a registered wave
    """
    schema = data.schema
    unregistered = getattr(data, '_unregistered', ())
    if unregistered:
        name = unregistered[0]
        base = next((c.name for c in schema.time_varying if name.startswith(c.name)), None)
        if base is not None:
            raise StructuralError(
                f'unknown suffix {name[len(base):]!r} on column {name!r}; registered waves are '
                f'{[c.wide_name(k) for c in schema.time_varying if c.name == base for k in schema.waves]}')
        raise StructuralError(f'unregistered wide column {name!r}')
    frame = data.frame
    n_child = len(frame)
    n_waves = len(schema.waves)
    out = {
        SCHOOL: np.repeat(frame[SCHOOL].to_numpy(), n_waves),
        CHILD: np.repeat(frame[CHILD].to_numpy(), n_waves),
        WAVE: np.tile(np.asarray(schema.waves, dtype=np.int64), n_child),
    }
    for column in schema.columns:
        if column.time_varying:
            block = np.column_stack([to_float_with_nan(frame[column.wide_name(k)])
                                     for k in schema.waves])
            out[column.name] = pd.array(block.reshape(-1), dtype=VALUE_DTYPE)
        else:
            out[column.name] = pd.array(
                np.repeat(to_float_with_nan(frame[column.name]), n_waves),
                dtype=VALUE_DTYPE)
    return LongDataset(pd.DataFrame(out), schema, data.label)


def build_dummy_indicators(cluster_ids: Sequence[int]) -> DesignMatrix:
    """
    I-1 dummy indicators for I clusters; the smallest id is the all-zero reference

    Args:
        cluster_ids: cluster id per row

    Returns:
        DesignMatrix with columns labelled `school_<id>` in ascending id order
    """
    ids = np.asarray(cluster_ids, dtype=np.int64)
    if ids.size == 0:
        return DesignMatrix(np.zeros((0, 0)), ())
    levels = np.unique(ids)[1:]
    entries = (ids[:, None] == levels[None, :]).astype(float)
    return DesignMatrix(entries, tuple(f'school_{int(v)}' for v in levels))


def _meta_path(path: str) -> str:
    return f'{path}.meta'


def write_csv(data: Union[LongDataset, WideDataset], path: str):
    """
    Write dataset as CSV (missing cells as empty strings) plus a `name=value` sidecar file
    """
    data.frame.to_csv(path, index=False, na_rep='')
    kind = 'long' if isinstance(data, LongDataset) else 'wide'
    lines = [f'kind={kind}', f'label={data.label}', f'waves={",".join(str(k) for k in data.schema.waves)}',
             f'column.{SCHOOL}={Role.ID.value},{Level.SCHOOL.value},0',
             f'column.{CHILD}={Role.ID.value},{Level.CHILD.value},0']
    if kind == 'long':
        lines.append(f'column.{WAVE}={Role.TIME.value},{Level.TIME_VARYING.value},0')
    for column in data.schema.columns:
        entry = f'column.{column.name}={column.role.value},{column.level.value},{column.lag}'
        if column.formula is not None:
            op, parents = column.formula
            entry += f',{op}:{"*".join(parents)}'
        lines.append(entry)
    with open(_meta_path(path), 'w') as f:
        f.write('\n'.join(lines) + '\n')


def read_csv(path: str) -> Union[LongDataset, WideDataset]:
    """Read a dataset written by write_csv"""
    meta: Dict[str, str] = {}
    columns: List[Column] = []
    with open(_meta_path(path), 'r') as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, _, value = line.partition('=')
            key, value = key.strip(), value.strip()
            if key.startswith('column.'):
                name = key[len('column.'):]
                parts = value.split(',')
                role = Role(parts[0])
                if role in (Role.ID, Role.TIME):
                    continue
                formula = None
                if len(parts) > 3:
                    op, _, parents = parts[3].partition(':')
                    formula = (op, tuple(parents.split('*')))
                columns.append(Column(name, role, Level(int(parts[1])), int(parts[2]), formula))
            else:
                meta[key] = value
    schema = Schema(tuple(columns), tuple(int(k) for k in meta['waves'].split(',')))
    frame = pd.read_csv(path, keep_default_na=False, na_values=[''], dtype=str)
    keys = ROW_KEYS if meta['kind'] == 'long' else CHILD_KEYS
    out = pd.DataFrame({k: frame[k].astype(np.int64) for k in keys})
    for name in frame.columns:
        if name in keys:
            continue
        out[name] = pd.array([None if pd.isna(v) else float(v) for v in frame[name]], dtype=VALUE_DTYPE)
    if meta['kind'] == 'long':
        return LongDataset(out, schema, meta.get('label', ''))
    return WideDataset(out, schema, meta.get('label', ''))
