"""The error-model database: per-operator-kind frequency tables over
spatial patterns and value domains, JSON (de)serialization, and event
sampling.

Schema (version 1): a JSON object with a top-level ``schema_version``
field plus one key per operator kind, each mapping to::

    {
      "spatial_freq":     {variant: fraction, ...},   # sums to 1
      "domain_freq":      {variant: fraction, ...},   # sums to 1
      "cardinality_hist": {"<count>": fraction, ...}, # optional, validation only
      "provenance":       {"corpus": str, "samples": int}
    }

Frequencies are decimal fractions. The random spatial variants may carry
mass (they are observed in mined corpora) but are never generated; their
mass is excluded and the rest renormalized at sampling time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import patterns
from .errors import ValidationError
from .patterns import (
    DOMAIN_VARIANTS,
    RANDOM_VARIANTS,
    SPATIAL_VARIANTS,
    CorruptionEvent,
    sample_domain,
    sample_pattern,
)
from .ops import OPERATOR_KINDS

SCHEMA_VERSION = 1
FREQ_SUM_TOL = 1e-9

# Profile applied to operator kinds absent from a database when the caller
# explicitly enables the fallback. Mirrors the single-point-dominated
# behavior of element-wise ("linear kernel") operators; the random mass is
# dropped at sampling time like any other entry.
_FALLBACK_RAW = {"single_point": 0.897, "same_row": 0.014, "random_mfm": 0.090}
FALLBACK_SPATIAL = {
    variant: _FALLBACK_RAW.get(variant, 0.0) / sum(_FALLBACK_RAW.values())
    for variant in (
        "single_point", "same_row", "random_sfm",
        "bullet_wake", "shattered_glass", "random_mfm",
    )
}
FALLBACK_DOMAIN = {
    "nan": 0.01, "zero": 0.03, "bitflip": 0.01,
    "unit_offset": 0.45, "random": 0.50,
}


@dataclass
class ModelEntry:
    spatial_freq: dict
    domain_freq: dict
    cardinality_hist: dict | None = None
    provenance: dict = field(default_factory=dict)


@dataclass
class ErrorModelDB:
    entries: dict
    schema_version: int = SCHEMA_VERSION
    unknown_kinds: tuple = ()

    def entry(self, kind: str, allow_fallback: bool = False) -> ModelEntry:
        if kind in self.entries:
            return self.entries[kind]
        if allow_fallback:
            return fallback_entry()
        raise ValidationError(f"no error model for operator kind {kind!r}")

    def kinds(self) -> tuple:
        return tuple(self.entries)


def fallback_entry() -> ModelEntry:
    return ModelEntry(
        spatial_freq=dict(FALLBACK_SPATIAL),
        domain_freq=dict(FALLBACK_DOMAIN),
        provenance={"corpus": "builtin-fallback", "samples": 0},
    )


def _validate_freq(freq: dict, allowed, what: str, kind: str) -> dict:
    unknown = set(freq) - set(allowed)
    if unknown:
        raise ValidationError(
            f"{kind}: unknown {what} variants {sorted(unknown)}"
        )
    vals = {v: float(freq.get(v, 0.0)) for v in allowed}
    for v, f in vals.items():
        if f < 0:
            raise ValidationError(f"{kind}: negative {what} frequency for {v}")
    total = sum(vals[v] for v in allowed)
    if abs(total - 1.0) > FREQ_SUM_TOL:
        raise ValidationError(
            f"{kind}: {what} frequencies sum to {total!r}, expected 1.0"
        )
    return vals


def validate_entry(kind: str, entry: ModelEntry) -> ModelEntry:
    spatial = _validate_freq(entry.spatial_freq, SPATIAL_VARIANTS, "spatial", kind)
    domain = _validate_freq(entry.domain_freq, DOMAIN_VARIANTS, "domain", kind)
    structured_mass = sum(
        f for v, f in spatial.items() if v not in RANDOM_VARIANTS
    )
    if structured_mass <= 0:
        raise ValidationError(
            f"{kind}: no probability mass on generatable spatial variants"
        )
    return ModelEntry(
        spatial_freq=spatial,
        domain_freq=domain,
        cardinality_hist=entry.cardinality_hist,
        provenance=dict(entry.provenance),
    )


def load_db(path) -> ErrorModelDB:
    """Load and validate a database file; unknown operator kinds are kept
    but reported on the returned object."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"error-model database not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return db_from_dict(raw)


def db_from_dict(raw: dict) -> ErrorModelDB:
    version = int(raw.get("schema_version", SCHEMA_VERSION))
    entries = {}
    unknown = []
    for kind, body in raw.items():
        if kind == "schema_version":
            continue
        if not isinstance(body, dict):
            raise ValidationError(f"{kind}: entry must be an object")
        entry = ModelEntry(
            spatial_freq=body.get("spatial_freq") or {},
            domain_freq=body.get("domain_freq") or {},
            cardinality_hist=body.get("cardinality_hist"),
            provenance=body.get("provenance") or {},
        )
        entries[kind] = validate_entry(kind, entry)
        if kind not in OPERATOR_KINDS:
            unknown.append(kind)
    return ErrorModelDB(
        entries=entries, schema_version=version, unknown_kinds=tuple(sorted(unknown))
    )


def db_to_dict(db: ErrorModelDB) -> dict:
    out = {"schema_version": db.schema_version}
    for kind, entry in db.entries.items():
        body = {
            "spatial_freq": {v: entry.spatial_freq.get(v, 0.0) for v in SPATIAL_VARIANTS},
            "domain_freq": {v: entry.domain_freq.get(v, 0.0) for v in DOMAIN_VARIANTS},
            "provenance": dict(entry.provenance),
        }
        if entry.cardinality_hist is not None:
            body["cardinality_hist"] = dict(entry.cardinality_hist)
        out[kind] = body
    return out


def save_db(db: ErrorModelDB, path) -> None:
    Path(path).write_text(json.dumps(db_to_dict(db), indent=2, sort_keys=True))


def load_default_db() -> ErrorModelDB:
    """Database shipped with the package (GPU fault-injection derived
    spatial profiles for the nine instrumented kinds)."""
    text = resources.files("errsim").joinpath("data/default_db.json").read_text()
    return db_from_dict(json.loads(text))


def generatable_distribution(entry: ModelEntry, shape):
    """Structured variants admissible for `shape` with renormalized
    probabilities, plus the probability mass that was dropped
    (random variants and shape-impossible structured ones).

    A shape admitting nothing (1x1x1) forces single_point.
    """
    admissible = patterns.admissible_variants(shape)
    pairs = [(v, entry.spatial_freq.get(v, 0.0)) for v in admissible]
    total = sum(f for _, f in pairs)
    if total <= 0.0:
        return ("single_point",), np.array([1.0]), 1.0
    variants = tuple(v for v, _ in pairs)
    probs = np.array([f for _, f in pairs]) / total
    return variants, probs, 1.0 - total


def sample_error(
    db: ErrorModelDB,
    kind: str,
    shape,
    rng,
    allow_fallback: bool = False,
    row_skip_p: float = patterns.DEFAULT_ROW_SKIP_P,
    map_skip_p: float = patterns.DEFAULT_MAP_SKIP_P,
    random_scale: float = patterns.DEFAULT_RANDOM_SCALE,
    domain_override: str | None = None,
) -> CorruptionEvent:
    """Draw one corruption event for an operator kind and output shape.

    The spatial variant comes from the entry's structured mass restricted
    to what the shape admits (renormalized); placement parameters are
    uniform within bounds; each target's value domain is drawn i.i.d.
    from the entry's domain frequencies. (db, kind, shape, rng state)
    fully determine the event.
    """
    entry = db.entry(kind, allow_fallback=allow_fallback)
    variants, probs, _ = generatable_distribution(entry, shape)
    variant = variants[patterns._choice(rng, probs)]
    spatial = sample_pattern(variant, shape, rng, row_skip_p, map_skip_p)
    targets = patterns.generate_targets(spatial, shape)
    domains = tuple(
        sample_domain(entry.domain_freq, rng, random_scale, override=domain_override)
        for _ in targets
    )
    return CorruptionEvent(spatial=spatial, targets=targets, domains=domains)
