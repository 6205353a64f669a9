"""Finite configuration spaces: parsing, enumeration, sampling and encoding.

A space is an ordered list of parameters, each with a finite list of
admissible values. Every configuration is identified by its canonical key,
the tuple of per-parameter value indices; the row-major flat index of that
tuple is used internally as an integer key (it preserves lexicographic order).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

KINDS = ("ordinal", "int_range", "boolean", "categorical")
BUNDLED_SPACES = ("synth-kfusion", "synth-elasticfusion")


class SpaceError(ValueError):
    """Raised for malformed space documents and inadmissible configurations."""


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str
    values: tuple
    default: Any = None
    # int_range keeps its generating triple so the document round-trips
    range_spec: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpaceError(f"parameter {self.name!r}: unknown type {self.kind!r}")
        if not self.values:
            raise SpaceError(f"parameter {self.name!r}: empty value list")
        if self.kind == "categorical":
            if len(set(self.values)) != len(self.values):
                raise SpaceError(f"parameter {self.name!r}: duplicate categorical labels")
        elif self.kind != "boolean":
            for a, b in zip(self.values, self.values[1:]):
                if not a < b:
                    raise SpaceError(
                        f"parameter {self.name!r}: non-increasing ordinal list ({a!r} then {b!r})"
                    )
        object.__setattr__(self, "_lookup", {self._hashable(v): i for i, v in enumerate(self.values)})
        if self.default is not None and self.index(self.default) is None:
            raise SpaceError(f"parameter {self.name!r}: default {self.default!r} is not admissible")

    def _hashable(self, value):
        if self.kind == "categorical":
            return ("s", value) if isinstance(value, str) else ("x", value)
        if isinstance(value, str) or value is None:
            return ("x", value)
        return ("n", value)

    def index(self, value) -> int | None:
        """Position of ``value`` in the value list, or None when inadmissible."""
        if self.kind == "boolean" and value not in (0, 1):
            return None
        if isinstance(value, float) and math.isnan(value):
            return None
        try:
            return self._lookup.get(self._hashable(value))
        except TypeError:
            return None

    @property
    def width(self) -> int:
        return len(self.values) if self.kind == "categorical" else 1

    def feature_table(self) -> np.ndarray:
        """(n_values, width) matrix of encoded components for every value."""
        if self.kind == "categorical":
            return np.eye(len(self.values))
        return np.asarray([float(v) for v in self.values]).reshape(-1, 1)

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"name": self.name, "type": self.kind}
        if self.kind == "int_range":
            lo, hi, step = self.range_spec
            doc.update(lo=lo, hi=hi, step=step)
        elif self.kind == "ordinal":
            doc["values"] = list(self.values)
        elif self.kind == "categorical":
            doc["labels"] = list(self.values)
        if self.default is not None:
            doc["default"] = self.default
        return doc


@dataclass(frozen=True)
class Configuration:
    """One value per parameter, stored in space order."""

    names: tuple[str, ...]
    values: tuple

    def __getitem__(self, name: str):
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))

    def __repr__(self):
        inner = ", ".join(f"{n}={v!r}" for n, v in zip(self.names, self.values))
        return f"Configuration({inner})"


@dataclass(frozen=True)
class ParameterSpace:
    params: tuple[ParameterSpec, ...]
    name: str = ""
    _tables: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.params:
            raise SpaceError("space has no parameters")
        seen = set()
        for p in self.params:
            if p.name in seen:
                raise SpaceError(f"duplicate parameter name {p.name!r}")
            seen.add(p.name)
        object.__setattr__(self, "_tables", tuple(p.feature_table() for p in self.params))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(p.values) for p in self.params)

    @property
    def cardinality(self) -> int:
        return math.prod(self.shape)

    @property
    def width(self) -> int:
        return sum(p.width for p in self.params)

    @property
    def feature_names(self) -> list[str]:
        out = []
        for p in self.params:
            if p.kind == "categorical":
                out.extend(f"{p.name}={label}" for label in p.values)
            else:
                out.append(p.name)
        return out

    def param(self, name: str) -> ParameterSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def make(self, values: Mapping[str, Any] | Configuration) -> Configuration:
        """Validate a name->value mapping and return the canonical Configuration."""
        if isinstance(values, Configuration):
            values = values.as_dict()
        extra = set(values) - set(self.names)
        if extra:
            raise SpaceError(f"unknown parameters {sorted(extra)}")
        out = []
        for p in self.params:
            if p.name not in values:
                raise SpaceError(f"missing value for parameter {p.name!r}")
            i = p.index(values[p.name])
            if i is None:
                raise SpaceError(f"inadmissible value {values[p.name]!r} for parameter {p.name!r}")
            out.append(p.values[i])
        return Configuration(self.names, tuple(out))

    def key(self, config: Mapping[str, Any] | Configuration) -> tuple[int, ...]:
        """Canonical key: per-parameter value indices in space order."""
        config = self.make(config)
        return tuple(p.index(v) for p, v in zip(self.params, config.values))

    def flat_index(self, config) -> int:
        idx = 0
        for i, n in zip(self.key(config), self.shape):
            idx = idx * n + i
        return idx

    def config_at(self, flat: int) -> Configuration:
        flat = int(flat)
        if not 0 <= flat < self.cardinality:
            raise IndexError(f"flat index {flat} outside space of {self.cardinality}")
        digits = []
        for n in reversed(self.shape):
            flat, i = divmod(flat, n)
            digits.append(i)
        digits.reverse()
        return Configuration(self.names, tuple(p.values[i] for p, i in zip(self.params, digits)))

    def index_matrix(self, flat: np.ndarray) -> np.ndarray:
        """(n, n_params) value-index matrix for an array of flat indices."""
        flat = np.asarray(flat, dtype=np.int64)
        if flat.size == 0:
            return np.empty((0, len(self.params)), dtype=np.int64)
        return np.stack(np.unravel_index(flat, self.shape), axis=1)

    def encode_flat(self, flat: np.ndarray) -> np.ndarray:
        """Feature matrix for an array of flat indices, shape (n, width)."""
        idx = self.index_matrix(flat)
        cols = [table[idx[:, j]] for j, table in enumerate(self._tables)]
        if not cols or idx.shape[0] == 0:
            return np.empty((idx.shape[0], self.width))
        return np.concatenate(cols, axis=1)

    def default_configuration(self) -> Configuration | None:
        if any(p.default is None for p in self.params):
            return None
        return self.make({p.name: p.default for p in self.params})

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {}
        if self.name:
            doc["name"] = self.name
        doc["parameters"] = [p.to_doc() for p in self.params]
        return doc


def _where(i: int, name: Any = None) -> str:
    return f"parameters[{i}]" + (f" ({name!r})" if name is not None else "")


def _parse_param(i: int, entry: Any) -> ParameterSpec:
    if not isinstance(entry, dict):
        raise SpaceError(f"{_where(i)}: expected an object")
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        raise SpaceError(f"{_where(i)}: missing or invalid 'name'")
    kind = entry.get("type")
    loc = _where(i, name)
    range_spec = None
    if kind == "ordinal":
        values = entry.get("values")
        if not isinstance(values, list):
            raise SpaceError(f"{loc}: ordinal parameter needs a 'values' list")
        if not values:
            raise SpaceError(f"{loc}: empty value list")
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise SpaceError(f"{loc}: ordinal value {v!r} is not a finite number")
        for a, b in zip(values, values[1:]):
            if not a < b:
                raise SpaceError(f"{loc}: non-increasing ordinal list ({a!r} then {b!r})")
        values = tuple(values)
    elif kind == "int_range":
        try:
            lo, hi = entry["lo"], entry["hi"]
        except KeyError as exc:
            raise SpaceError(f"{loc}: int_range parameter needs 'lo' and 'hi'") from exc
        step = entry.get("step", 1)
        for label, v in (("lo", lo), ("hi", hi), ("step", step)):
            if isinstance(v, bool) or not isinstance(v, int):
                raise SpaceError(f"{loc}: int_range {label} must be an integer, got {v!r}")
        if step <= 0:
            raise SpaceError(f"{loc}: int_range step must be positive")
        values = tuple(range(lo, hi + 1, step))
        if not values:
            raise SpaceError(f"{loc}: empty value list (lo > hi)")
        range_spec = (lo, hi, step)
    elif kind == "boolean":
        values = (False, True)
    elif kind == "categorical":
        labels = entry.get("labels")
        if not isinstance(labels, list):
            raise SpaceError(f"{loc}: categorical parameter needs a 'labels' list")
        if not labels:
            raise SpaceError(f"{loc}: empty value list")
        if not all(isinstance(s, str) for s in labels):
            raise SpaceError(f"{loc}: categorical labels must be strings")
        if len(set(labels)) != len(labels):
            raise SpaceError(f"{loc}: duplicate categorical labels")
        values = tuple(labels)
    else:
        raise SpaceError(f"{loc}: unknown type {kind!r} (expected one of {', '.join(KINDS)})")

    default = entry.get("default")
    try:
        return ParameterSpec(name, kind, values, default, range_spec)
    except SpaceError as exc:
        raise SpaceError(f"{loc}: {exc}") from None


def parse_space(doc: str | bytes | Mapping) -> ParameterSpace:
    """Build a space from a space-definition document (JSON text or parsed dict)."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise SpaceError(f"malformed space document: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, Mapping) or not isinstance(doc.get("parameters"), list):
        raise SpaceError("malformed space document: top level must be an object with a 'parameters' list")
    params = [_parse_param(i, entry) for i, entry in enumerate(doc["parameters"])]
    seen = {}
    for i, p in enumerate(params):
        if p.name in seen:
            raise SpaceError(f"{_where(i, p.name)}: duplicate parameter name (first at parameters[{seen[p.name]}])")
        seen[p.name] = i
    if not params:
        raise SpaceError("malformed space document: 'parameters' is empty")
    return ParameterSpace(tuple(params), name=str(doc.get("name", "")))


def load_space(path: str | Path) -> ParameterSpace:
    """Read a space file. Bundled spaces can be named directly (``synth-kfusion``)."""
    p = Path(path)
    if not p.exists():
        stem = p.name[: -len(".space")] if p.name.endswith(".space") else p.name
        if stem in BUNDLED_SPACES and len(p.parts) == 1:
            return bundled_space(stem)
        raise FileNotFoundError(f"space file not found: {path}")
    return parse_space(p.read_text(encoding="utf-8"))


def bundled_space_text(name: str) -> str:
    if name not in BUNDLED_SPACES:
        raise KeyError(f"no bundled space {name!r}; available: {', '.join(BUNDLED_SPACES)}")
    return resources.files("paretotune").joinpath("data", f"{name}.space").read_text(encoding="utf-8")


def bundled_space(name: str) -> ParameterSpace:
    return parse_space(bundled_space_text(name))


def restrict(space: ParameterSpace, choices: Mapping[str, Sequence], name: str = "") -> ParameterSpace:
    """Sub-space keeping only the listed values of the named parameters.

    Configurations of the result are valid configurations of ``space``.
    Restricted integer ranges (and booleans cut to one value) become ordinals.
    """
    unknown = sorted(set(choices) - set(space.names))
    if unknown:
        raise SpaceError(f"unknown parameters {unknown}")
    params = []
    for p in space.params:
        if p.name not in choices:
            params.append(p)
            continue
        idx = set()
        for v in choices[p.name]:
            i = p.index(v)
            if i is None:
                raise SpaceError(f"inadmissible value {v!r} for parameter {p.name!r}")
            idx.add(i)
        values = tuple(p.values[i] for i in sorted(idx))
        kind = p.kind
        if kind == "int_range" or (kind == "boolean" and len(values) < 2):
            kind = "ordinal"
        default = p.default if p.default is not None and p.index(p.default) in idx else None
        params.append(ParameterSpec(p.name, kind, values, default))
    return ParameterSpace(tuple(params), name=name)


def cardinality(space: ParameterSpace) -> int:
    return space.cardinality


def sample_indices(space: ParameterSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` distinct flat indices uniformly without replacement."""
    total = space.cardinality
    if n < 0:
        raise ValueError(f"cannot sample a negative number of configurations ({n})")
    if n > total:
        raise ValueError(f"cannot draw {n} distinct configurations from a space of {total}")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if n > total // 2:
        return rng.permutation(total)[:n].astype(np.int64)
    seen: set[int] = set()
    out: list[int] = []
    while len(out) < n:
        for v in rng.integers(0, total, size=n - len(out)).tolist():
            if v not in seen:
                seen.add(v)
                out.append(v)
                if len(out) == n:
                    break
    return np.asarray(out, dtype=np.int64)


def sample_random(space: ParameterSpace, n: int, seed: int | None = 0) -> list[Configuration]:
    rng = np.random.default_rng(seed)
    return [space.config_at(i) for i in sample_indices(space, n, rng).tolist()]


def enumerate_space(space: ParameterSpace) -> Iterator[Configuration]:
    """Yield every configuration once, in lexicographic order of value indices."""
    names = space.names
    for values in itertools.product(*(p.values for p in space.params)):
        yield Configuration(names, values)


def encode(space: ParameterSpace, config: Mapping[str, Any] | Configuration) -> np.ndarray:
    key = space.key(config)
    return np.concatenate([table[i] for table, i in zip(space._tables, key)])


def encode_many(space: ParameterSpace, configs: Sequence) -> np.ndarray:
    if not configs:
        return np.empty((0, space.width))
    return space.encode_flat(np.asarray([space.flat_index(c) for c in configs], dtype=np.int64))
