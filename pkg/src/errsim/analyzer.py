"""Mining error models from corpora of golden/corrupted tensor pairs.

Each pair is diffed bitwise, classified on three axes (how many values
are wrong, which value domain each wrong value falls into, and how the
wrong values are laid out spatially), and the per-operator-kind counts
are aggregated into an error-model database plus an analysis report.

Spatial classification is structural and total: every non-empty diff
receives exactly one variant. Sets matching no structured rule land in
the random_sfm / random_mfm residue buckets, which the report lists for
human review.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errordb import ErrorModelDB, ModelEntry, validate_entry
from .errors import ValidationError
from .patterns import (
    BULLET_WAKE,
    DOMAIN_BITFLIP,
    DOMAIN_NAN,
    DOMAIN_RANDOM,
    DOMAIN_UNIT_OFFSET,
    DOMAIN_VARIANTS,
    DOMAIN_ZERO,
    RANDOM_MFM,
    RANDOM_SFM,
    SAME_ROW,
    SHATTERED_GLASS,
    SINGLE_POINT,
    SPATIAL_VARIANTS,
)
from .tensorio import DTYPE, bit_distance, bits_view, canonical_shape, load_tensor, unravel

log = logging.getLogger(__name__)

SMALL_CARDINALITY = 16  # reported corpus statistic, not a classification rule


@dataclass
class DiffRecord:
    """Bitwise difference between a golden tensor and a corrupted one.

    `indices` are flat positions in strictly increasing order;
    `golden_vals` / `corrupted_vals` are the parallel binary32 values.
    """

    indices: np.ndarray
    golden_vals: np.ndarray
    corrupted_vals: np.ndarray

    @property
    def cardinality(self) -> int:
        return int(self.indices.size)


@dataclass
class PairClassification:
    spatial: str
    params: dict
    domains: tuple
    cardinality: int
    single_map: bool


def diff_tensors(golden: np.ndarray, corrupted: np.ndarray) -> DiffRecord | None:
    """Bit-level comparison; None means the pair is masked (identical).

    Comparison happens on the binary32 encodings, so NaNs compare equal
    to themselves and differently-signed zeros do not.
    """
    golden = np.ascontiguousarray(golden, dtype=DTYPE)
    corrupted = np.ascontiguousarray(corrupted, dtype=DTYPE)
    if golden.shape != corrupted.shape:
        raise ValidationError(
            f"shape mismatch: golden {golden.shape} vs corrupted {corrupted.shape}"
        )
    gbits = bits_view(golden).reshape(-1)
    cbits = bits_view(corrupted).reshape(-1)
    idx = np.flatnonzero(gbits != cbits)
    if idx.size == 0:
        return None
    flat_g = golden.reshape(-1)
    flat_c = corrupted.reshape(-1)
    return DiffRecord(
        indices=idx.astype(np.int64),
        golden_vals=flat_g[idx].copy(),
        corrupted_vals=flat_c[idx].copy(),
    )


def classify_value_domain(golden_val: float, corrupted_val: float) -> str:
    """Label one corrupted value. Precedence: nan, zero, bitflip,
    unit_offset, random — most specific first, so labels are
    deterministic where classes overlap."""
    c = float(np.float32(corrupted_val))
    g = float(np.float32(golden_val))
    if np.isnan(c):
        return DOMAIN_NAN
    if c == 0.0:
        return DOMAIN_ZERO
    if bit_distance(g, c) == 1:
        return DOMAIN_BITFLIP
    if abs(c - g) <= 1.0:
        return DOMAIN_UNIT_OFFSET
    return DOMAIN_RANDOM


def classify_spatial(diff: DiffRecord, shape) -> tuple[str, dict]:
    """Decide the spatial variant of a diff and recover its placement
    parameters where the variant defines them.

    Decision procedure over the canonical (maps, rows, cols) view:
    one location is a single point; one map and one row is a row pattern
    (gaps allowed); one shared (row, col) across >= 2 maps is a bullet
    wake; a bullet wake plus extra points that stay in its row inside
    some of its maps is shattered glass (every map must contain the
    common entry column); anything else is residue, split by whether it
    stays inside a single map.
    """
    cshape = canonical_shape(shape)
    locs = [unravel(i, cshape) for i in diff.indices]
    maps = {}
    for c, y, x in locs:
        maps.setdefault(c, []).append((y, x))

    if len(locs) == 1:
        c, y, x = locs[0]
        return SINGLE_POINT, {"c": c, "y": y, "x": x}

    single_map = len(maps) == 1

    if single_map:
        c = next(iter(maps))
        ys = {y for y, _ in maps[c]}
        if len(ys) == 1:
            xs = sorted(x for _, x in maps[c])
            lo, hi = xs[0], xs[-1]
            return SAME_ROW, {
                "c": c, "y": ys.pop(), "x_start": lo, "x_end": hi,
                "skip_mask": tuple(sorted(set(range(lo, hi + 1)) - set(xs))),
            }
        return RANDOM_SFM, {}

    ys = {y for _, y, _ in locs}
    if len(ys) == 1:
        y = next(iter(ys))
        per_map_xs = {c: {x for _, x in pts} for c, pts in maps.items()}
        common = set.intersection(*per_map_xs.values())
        if all(len(xs) == 1 for xs in per_map_xs.values()):
            # strict bullet wake: one shared column everywhere
            if len(common) == 1:
                cs = sorted(maps)
                return BULLET_WAKE, {
                    "x": common.pop(), "y": y,
                    "c_first": cs[0], "c_last": cs[-1],
                    "skipped_maps": tuple(
                        sorted(set(range(cs[0], cs[-1] + 1)) - set(cs))
                    ),
                }
            return RANDOM_MFM, {}
        if common:
            # wake entry column present in every map, rows spread in some
            x = min(common)
            cs = sorted(maps)
            shattered = tuple(sorted(
                c for c, xs in per_map_xs.items() if len(xs) > 1
            ))
            params = {
                "x": x, "y": y,
                "c_first": cs[0], "c_last": cs[-1],
                "skipped_maps": tuple(
                    sorted(set(range(cs[0], cs[-1] + 1)) - set(cs))
                ),
                "shattered_maps": shattered,
            }
            if len(shattered) == 1:
                xs = sorted(per_map_xs[shattered[0]])
                lo, hi = xs[0], xs[-1]
                params.update(
                    shattered_map=shattered[0], x_start=lo, x_end=hi,
                    skip_mask=tuple(sorted(set(range(lo, hi + 1)) - set(xs))),
                )
            return SHATTERED_GLASS, params
    return RANDOM_MFM, {}


def analyze_pair(golden: np.ndarray, corrupted: np.ndarray) -> PairClassification | None:
    """Full three-axis classification of one pair; None when masked."""
    diff = diff_tensors(golden, corrupted)
    if diff is None:
        return None
    spatial, params = classify_spatial(diff, golden.shape)
    domains = tuple(
        classify_value_domain(g, c)
        for g, c in zip(diff.golden_vals, diff.corrupted_vals)
    )
    cshape = canonical_shape(golden.shape)
    maps = {unravel(i, cshape)[0] for i in diff.indices}
    return PairClassification(
        spatial=spatial,
        params=params,
        domains=domains,
        cardinality=diff.cardinality,
        single_map=len(maps) == 1,
    )


@dataclass
class KindStats:
    samples: int = 0                 # non-masked pairs
    masked: int = 0
    spatial_counts: dict = field(default_factory=dict)
    domain_counts: dict = field(default_factory=dict)
    cardinality: dict = field(default_factory=dict)
    small_single_map: int = 0        # cardinality < 16 and single map
    small_total: int = 0             # cardinality < 16
    residue_pairs: list = field(default_factory=list)

    def add(self, cls: PairClassification, pair_id: str) -> None:
        self.samples += 1
        self.spatial_counts[cls.spatial] = self.spatial_counts.get(cls.spatial, 0) + 1
        for d in cls.domains:
            self.domain_counts[d] = self.domain_counts.get(d, 0) + 1
        card = str(cls.cardinality)
        self.cardinality[card] = self.cardinality.get(card, 0) + 1
        if cls.cardinality < SMALL_CARDINALITY:
            self.small_total += 1
            if cls.single_map:
                self.small_single_map += 1
        if cls.spatial in (RANDOM_SFM, RANDOM_MFM):
            self.residue_pairs.append(pair_id)


@dataclass
class AnalysisReport:
    corpus: str
    total_pairs: int
    masked: int
    unreadable: int
    per_kind: dict
    excluded_kinds: dict

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "corpus": self.corpus,
            "totals": {
                "pairs": self.total_pairs,
                "masked": self.masked,
                "unreadable": self.unreadable,
            },
            "per_kind": self.per_kind,
            "excluded_kinds": self.excluded_kinds,
        }

    def render_text(self) -> str:
        cols = SPATIAL_VARIANTS
        head = f"{'kind':<12} {'samples':>8} " + " ".join(f"{c:>16}" for c in cols)
        lines = [head, "-" * len(head)]
        for kind in sorted(self.per_kind):
            stats = self.per_kind[kind]
            freqs = stats["spatial_freq"]
            lines.append(
                f"{kind:<12} {stats['samples']:>8} "
                + " ".join(f"{100 * freqs.get(c, 0.0):>15.1f}%" for c in cols)
            )
        if self.excluded_kinds:
            lines.append("")
            for kind, n in sorted(self.excluded_kinds.items()):
                lines.append(f"excluded {kind}: only {n} non-masked samples")
        lines.append("")
        lines.append(
            f"pairs={self.total_pairs} masked={self.masked} "
            f"unreadable={self.unreadable}"
        )
        return "\n".join(lines)


def build_error_db(
    corpus,
    min_samples: int = 100,
    corpus_id: str = "corpus",
) -> tuple[ErrorModelDB, AnalysisReport]:
    """Mine a database from an iterator of (kind, golden path, corrupted
    path) triples. Kinds with fewer than `min_samples` non-masked pairs
    are excluded from the database but reported.

    Unreadable entries are skipped with a warning and counted; merge
    order of the counts never affects the result.
    """
    stats: dict[str, KindStats] = {}
    total = masked = unreadable = 0
    golden_cache: dict[str, np.ndarray] = {}

    for kind, golden_path, corrupted_path in corpus:
        total += 1
        ks = stats.setdefault(kind, KindStats())
        try:
            key = str(golden_path)
            if key not in golden_cache:
                golden_cache[key] = load_tensor(
                    golden_path, _shape_for_golden(golden_path)
                )
            golden = golden_cache[key]
            corrupted = load_tensor(corrupted_path, golden.shape)
            cls = analyze_pair(golden, corrupted)
        except (ValidationError, OSError, KeyError) as exc:
            unreadable += 1
            log.warning("skipping unreadable pair %s: %s", corrupted_path, exc)
            continue
        if cls is None:
            masked += 1
            ks.masked += 1
            continue
        ks.add(cls, str(corrupted_path))

    entries = {}
    per_kind = {}
    excluded = {}
    for kind, ks in sorted(stats.items()):
        analyzed = ks.samples
        spatial_freq = {
            v: ks.spatial_counts.get(v, 0) / analyzed if analyzed else 0.0
            for v in SPATIAL_VARIANTS
        }
        n_domains = sum(ks.domain_counts.values())
        domain_freq = {
            v: ks.domain_counts.get(v, 0) / n_domains if n_domains else 0.0
            for v in DOMAIN_VARIANTS
        }
        residue = (
            ks.spatial_counts.get(RANDOM_SFM, 0) + ks.spatial_counts.get(RANDOM_MFM, 0)
        )
        per_kind[kind] = {
            "samples": analyzed,
            "masked": ks.masked,
            "spatial_freq": spatial_freq,
            "domain_freq": domain_freq,
            "cardinality_hist": {
                k: v / analyzed for k, v in sorted(ks.cardinality.items())
            } if analyzed else {},
            "residue_rate": residue / analyzed if analyzed else 0.0,
            "residue_pairs": ks.residue_pairs[:50],
            "small_cardinality_single_map_rate": (
                ks.small_single_map / ks.small_total if ks.small_total else None
            ),
            "included": analyzed >= min_samples,
        }
        if analyzed < min_samples:
            excluded[kind] = analyzed
            continue
        entries[kind] = validate_entry(kind, ModelEntry(
            spatial_freq=spatial_freq,
            domain_freq=domain_freq,
            cardinality_hist=per_kind[kind]["cardinality_hist"],
            provenance={"corpus": corpus_id, "samples": analyzed},
        ))

    report = AnalysisReport(
        corpus=corpus_id,
        total_pairs=total,
        masked=masked,
        unreadable=unreadable,
        per_kind=per_kind,
        excluded_kinds=excluded,
    )
    return ErrorModelDB(entries=entries), report


def _read_meta(batch: Path) -> dict:
    """Parse a batch's meta.json, warning about unknown fields so newer
    dump formats keep loading."""
    meta = json.loads((batch / "meta.json").read_text())
    extra = set(meta) - {"kind", "shape", "golden"}
    if extra:
        log.warning("%s: ignoring unknown meta fields %s", batch, sorted(extra))
    return meta


def _shape_for_golden(golden_path) -> tuple:
    meta = _read_meta(Path(golden_path).parent)
    return tuple(int(d) for d in meta["shape"])


def scan_corpus(root):
    """Iterate (kind, golden path, corrupted path) triples from a corpus
    directory tree.

    Every directory containing a meta.json is a batch: one golden tensor
    plus any number of faulty_*.bin dumps.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"corpus directory not found: {root}")
    found = False
    for meta_path in sorted(root.rglob("meta.json")):
        batch = meta_path.parent
        try:
            meta = _read_meta(batch)
            kind = str(meta["kind"])
            golden = batch / meta["golden"]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            log.warning("skipping batch %s: bad meta.json (%s)", batch, exc)
            continue
        for faulty in sorted(batch.glob("faulty_*.bin")):
            found = True
            yield kind, golden, faulty
    if not found:
        raise ValidationError(f"no corpus entries under {root}")


def mine_corpus_dir(root, min_samples: int = 100):
    """build_error_db over an on-disk corpus directory."""
    root = Path(root)
    return build_error_db(
        scan_corpus(root), min_samples=min_samples, corpus_id=root.name
    )
