"""Corruption pattern taxonomy: spatial shapes and value domains.

Spatial patterns describe where erroneous values sit inside a tensor
viewed as a stack of feature maps (maps, rows, cols):

* ``single_point``     one corrupted value in one map
* ``same_row``         several values along one row of one map, with gaps
* ``bullet_wake``      the same (row, col) location across several maps
* ``shattered_glass``  a bullet wake plus a row spread inside one of its maps
* ``random_sfm``       unstructured, confined to a single map
* ``random_mfm``       unstructured, across multiple maps

The two random variants exist only as classification buckets: no
algorithm reproduces them, so the sampler excludes their probability mass
and renormalizes over the structured variants.

Value domains describe how a corrupted value relates to the golden one:
``nan``, ``zero``, ``bitflip`` (exactly one bit of the binary32 encoding
differs), ``unit_offset`` (the difference lies in [-1, 1]) and ``random``
(anything else).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .tensorio import canonical_shape

SINGLE_POINT = "single_point"
SAME_ROW = "same_row"
BULLET_WAKE = "bullet_wake"
SHATTERED_GLASS = "shattered_glass"
RANDOM_SFM = "random_sfm"
RANDOM_MFM = "random_mfm"

SPATIAL_VARIANTS = (
    SINGLE_POINT, SAME_ROW, RANDOM_SFM, BULLET_WAKE, SHATTERED_GLASS, RANDOM_MFM,
)
STRUCTURED_VARIANTS = (SINGLE_POINT, SAME_ROW, BULLET_WAKE, SHATTERED_GLASS)
RANDOM_VARIANTS = (RANDOM_SFM, RANDOM_MFM)

DOMAIN_NAN = "nan"
DOMAIN_ZERO = "zero"
DOMAIN_BITFLIP = "bitflip"
DOMAIN_UNIT_OFFSET = "unit_offset"
DOMAIN_RANDOM = "random"

DOMAIN_VARIANTS = (
    DOMAIN_NAN, DOMAIN_ZERO, DOMAIN_BITFLIP, DOMAIN_UNIT_OFFSET, DOMAIN_RANDOM,
)

DEFAULT_ROW_SKIP_P = 0.25
DEFAULT_MAP_SKIP_P = 0.25
DEFAULT_RANDOM_SCALE = 1e3


@dataclass(frozen=True)
class SpatialPattern:
    """A spatial variant with its bound placement parameters.

    Parameter keys by variant:
      single_point:     c, y, x
      same_row:         c, y, x_start, x_end, skip_mask
      bullet_wake:      x, y, c_first, c_last, skipped_maps
      shattered_glass:  x, y, c_first, c_last, skipped_maps,
                        shattered_map, x_start, x_end, skip_mask
    skip_mask / skipped_maps hold the coordinates left unaltered strictly
    inside the corrupted extent (endpoints are always corrupted).
    """

    variant: str
    params: dict = field(default_factory=dict)

    def validate(self, shape) -> None:
        c_n, h_n, w_n = canonical_shape(shape)
        p = self.params
        try:
            if self.variant == SINGLE_POINT:
                _in_bounds(p["c"], c_n, "c")
                _in_bounds(p["y"], h_n, "y")
                _in_bounds(p["x"], w_n, "x")
            elif self.variant == SAME_ROW:
                _in_bounds(p["c"], c_n, "c")
                _in_bounds(p["y"], h_n, "y")
                self._check_row(p, w_n)
            elif self.variant == BULLET_WAKE:
                _in_bounds(p["x"], w_n, "x")
                _in_bounds(p["y"], h_n, "y")
                self._check_maps(p, c_n)
            elif self.variant == SHATTERED_GLASS:
                _in_bounds(p["x"], w_n, "x")
                _in_bounds(p["y"], h_n, "y")
                self._check_maps(p, c_n)
                self._check_row(p, w_n)
                maps = _span(p["c_first"], p["c_last"], p["skipped_maps"])
                if p["shattered_map"] not in maps:
                    raise ValidationError(
                        f"shattered map {p['shattered_map']} not among the "
                        f"corrupted maps {sorted(maps)}"
                    )
            elif self.variant in RANDOM_VARIANTS:
                raise ValidationError(
                    f"{self.variant} is classification-only and cannot be generated"
                )
            else:
                raise ValidationError(f"unknown spatial variant {self.variant!r}")
        except KeyError as exc:
            raise ValidationError(
                f"{self.variant} pattern missing parameter {exc.args[0]!r}"
            ) from None

    @staticmethod
    def _check_row(p, w_n):
        xs, xe = p["x_start"], p["x_end"]
        _in_bounds(xs, w_n, "x_start")
        _in_bounds(xe, w_n, "x_end")
        if xs > xe:
            raise ValidationError(f"x_start {xs} > x_end {xe}")
        for skipped in p.get("skip_mask") or ():
            if not xs < skipped < xe:
                raise ValidationError(
                    f"skip {skipped} outside the row interior ({xs}, {xe})"
                )
        if len(_span(xs, xe, p.get("skip_mask") or ())) < 2:
            raise ValidationError("row pattern must corrupt at least 2 points")

    @staticmethod
    def _check_maps(p, c_n):
        cf, cl = p["c_first"], p["c_last"]
        _in_bounds(cf, c_n, "c_first")
        _in_bounds(cl, c_n, "c_last")
        if cf > cl:
            raise ValidationError(f"c_first {cf} > c_last {cl}")
        for skipped in p.get("skipped_maps") or ():
            if not cf < skipped < cl:
                raise ValidationError(
                    f"skipped map {skipped} outside the interior ({cf}, {cl})"
                )
        if len(_span(cf, cl, p.get("skipped_maps") or ())) < 2:
            raise ValidationError("multi-map pattern must corrupt at least 2 maps")


@dataclass(frozen=True)
class DomainAssignment:
    """A value domain with its bound parameters for one target location."""

    variant: str
    bit: int | None = None        # bitflip: bit index in [0, 31]
    delta: float | None = None    # unit_offset: additive offset in [-1, 1]
    value: float | None = None    # random: initially drawn replacement

    def __post_init__(self):
        if self.variant not in DOMAIN_VARIANTS:
            raise ValidationError(f"unknown value domain {self.variant!r}")
        if self.variant == DOMAIN_BITFLIP and not (
            self.bit is not None and 0 <= self.bit <= 31
        ):
            raise ValidationError(f"bitflip bit index {self.bit} outside [0, 31]")
        if self.variant == DOMAIN_UNIT_OFFSET and not (
            self.delta is not None and abs(self.delta) <= 1.0
        ):
            raise ValidationError(f"unit offset {self.delta} outside [-1, 1]")


@dataclass(frozen=True)
class CorruptionEvent:
    """One sampled error: where it lands and what it writes.

    `targets` are (map, row, col) coordinates in the canonical view of the
    site's output shape, sorted in flat order; `domains` parallels it.
    `seed_trace` identifies the random stream that produced the event so a
    campaign can replay it exactly.
    """

    spatial: SpatialPattern
    targets: tuple
    domains: tuple
    site: str = ""
    seed_trace: tuple | None = None

    def bind(self, site: str, seed_trace) -> "CorruptionEvent":
        return replace(self, site=site, seed_trace=tuple(seed_trace))


def _in_bounds(v, extent, name):
    if not 0 <= int(v) < extent:
        raise ValidationError(f"{name}={v} outside [0, {extent})")


def _span(first, last, skipped) -> list:
    skipped = set(skipped or ())
    return [i for i in range(int(first), int(last) + 1) if i not in skipped]


def admissible_variants(shape) -> tuple:
    """Structured variants that the canonical shape can host."""
    c_n, _, w_n = canonical_shape(shape)
    out = [SINGLE_POINT]
    if w_n >= 2:
        out.append(SAME_ROW)
    if c_n >= 2:
        out.append(BULLET_WAKE)
        if w_n >= 2:
            out.append(SHATTERED_GLASS)
    return tuple(out)


def generate_targets(spatial: SpatialPattern, shape, rng=None) -> tuple:
    """Resolve a pattern to its corrupted (map, row, col) locations.

    Fully-bound patterns resolve deterministically. If a row or map skip
    field is absent (None) it is sampled here, which requires `rng`.
    """
    p = dict(spatial.params)
    if spatial.variant in (SAME_ROW, SHATTERED_GLASS) and p.get("skip_mask") is None:
        if "x_start" in p:
            if rng is None:
                raise ValidationError("pattern has unbound skips and no rng given")
            p["skip_mask"] = _draw_skips(
                rng, p["x_start"], p["x_end"], DEFAULT_ROW_SKIP_P
            )
    if spatial.variant in (BULLET_WAKE, SHATTERED_GLASS) and p.get("skipped_maps") is None:
        if rng is None:
            raise ValidationError("pattern has unbound skips and no rng given")
        p["skipped_maps"] = _draw_skips(
            rng, p["c_first"], p["c_last"], DEFAULT_MAP_SKIP_P
        )
    bound = SpatialPattern(spatial.variant, p)
    bound.validate(shape)

    if spatial.variant == SINGLE_POINT:
        locs = {(p["c"], p["y"], p["x"])}
    elif spatial.variant == SAME_ROW:
        locs = {
            (p["c"], p["y"], x) for x in _span(p["x_start"], p["x_end"], p["skip_mask"])
        }
    elif spatial.variant == BULLET_WAKE:
        locs = {
            (c, p["y"], p["x"])
            for c in _span(p["c_first"], p["c_last"], p["skipped_maps"])
        }
    elif spatial.variant == SHATTERED_GLASS:
        maps = _span(p["c_first"], p["c_last"], p["skipped_maps"])
        locs = {(c, p["y"], p["x"]) for c in maps}
        locs |= {
            (p["shattered_map"], p["y"], x)
            for x in _span(p["x_start"], p["x_end"], p["skip_mask"])
        }
    else:
        raise ValidationError(f"cannot generate {spatial.variant!r}")
    return tuple(sorted(locs))


def _draw_skips(rng, first, last, skip_p) -> tuple:
    """Skip interior coordinates independently; endpoints always stay."""
    interior = range(int(first) + 1, int(last))
    return tuple(i for i in interior if rng.random() < skip_p)


def sample_pattern(
    variant: str,
    shape,
    rng,
    row_skip_p: float = DEFAULT_ROW_SKIP_P,
    map_skip_p: float = DEFAULT_MAP_SKIP_P,
) -> SpatialPattern:
    """Draw placement parameters for a structured variant, uniformly
    within the canonical shape's bounds."""
    c_n, h_n, w_n = canonical_shape(shape)
    if variant not in admissible_variants(shape):
        raise ValidationError(f"{variant} impossible for shape {tuple(shape)}")

    if variant == SINGLE_POINT:
        return SpatialPattern(SINGLE_POINT, {
            "c": int(rng.integers(c_n)),
            "y": int(rng.integers(h_n)),
            "x": int(rng.integers(w_n)),
        })
    if variant == SAME_ROW:
        xs, xe, mask = _sample_row(rng, w_n, row_skip_p)
        return SpatialPattern(SAME_ROW, {
            "c": int(rng.integers(c_n)),
            "y": int(rng.integers(h_n)),
            "x_start": xs, "x_end": xe, "skip_mask": mask,
        })
    if variant == BULLET_WAKE:
        cf, cl, skipped = _sample_maps(rng, c_n, map_skip_p)
        return SpatialPattern(BULLET_WAKE, {
            "x": int(rng.integers(w_n)),
            "y": int(rng.integers(h_n)),
            "c_first": cf, "c_last": cl, "skipped_maps": skipped,
        })
    # shattered glass
    cf, cl, skipped = _sample_maps(rng, c_n, map_skip_p)
    corrupted_maps = _span(cf, cl, skipped)
    shattered = int(corrupted_maps[rng.integers(len(corrupted_maps))])
    xs, xe, mask = _sample_row(rng, w_n, row_skip_p)
    return SpatialPattern(SHATTERED_GLASS, {
        "x": int(rng.integers(w_n)),
        "y": int(rng.integers(h_n)),
        "c_first": cf, "c_last": cl, "skipped_maps": skipped,
        "shattered_map": shattered,
        "x_start": xs, "x_end": xe, "skip_mask": mask,
    })


def _sample_row(rng, w_n, skip_p):
    # extent of at least 2 columns; endpoints always corrupted, so the
    # >= 2 corrupted points invariant holds by construction
    xs = int(rng.integers(w_n - 1))
    xe = int(rng.integers(xs + 1, w_n))
    mask = _draw_skips(rng, xs, xe, skip_p)
    return xs, xe, mask


def _sample_maps(rng, c_n, skip_p):
    cf = int(rng.integers(c_n - 1))
    cl = int(rng.integers(cf + 1, c_n))
    skipped = _draw_skips(rng, cf, cl, skip_p)
    return cf, cl, skipped


def sample_domain(
    domain_freq: dict,
    rng,
    random_scale: float = DEFAULT_RANDOM_SCALE,
    override: str | None = None,
) -> DomainAssignment:
    """Draw one value-domain assignment.

    With `override` set, the frequency draw is skipped entirely and the
    assignment uses the forced variant, so two campaigns differing only in
    the override stay aligned on everything sampled before the domains.
    """
    if override is not None:
        variant = override
    else:
        probs = np.array([domain_freq.get(v, 0.0) for v in DOMAIN_VARIANTS])
        total = probs.sum()
        if total <= 0:
            raise ValidationError("domain frequencies sum to zero")
        variant = DOMAIN_VARIANTS[_choice(rng, probs / total)]
    if variant == DOMAIN_BITFLIP:
        return DomainAssignment(DOMAIN_BITFLIP, bit=int(rng.integers(32)))
    if variant == DOMAIN_UNIT_OFFSET:
        return DomainAssignment(DOMAIN_UNIT_OFFSET, delta=float(rng.uniform(-1.0, 1.0)))
    if variant == DOMAIN_RANDOM:
        return DomainAssignment(
            DOMAIN_RANDOM, value=float(rng.uniform(-random_scale, random_scale))
        )
    return DomainAssignment(variant)


def _choice(rng, probs) -> int:
    """Index draw from a probability vector via one uniform variate."""
    r = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if r < acc:
            return i
    return len(probs) - 1


def event_to_json(event: CorruptionEvent) -> dict:
    return {
        "spatial": {
            "variant": event.spatial.variant,
            "params": {
                k: (sorted(v) if isinstance(v, (tuple, list, set)) else v)
                for k, v in event.spatial.params.items()
            },
        },
        "targets": [list(t) for t in event.targets],
        "domains": [
            {k: v for k, v in (
                ("variant", d.variant), ("bit", d.bit),
                ("delta", d.delta), ("value", d.value),
            ) if v is not None}
            for d in event.domains
        ],
    }


def event_from_json(obj: dict) -> CorruptionEvent:
    params = {
        k: (tuple(v) if isinstance(v, list) else v)
        for k, v in obj["spatial"]["params"].items()
    }
    return CorruptionEvent(
        spatial=SpatialPattern(obj["spatial"]["variant"], params),
        targets=tuple(tuple(t) for t in obj["targets"]),
        domains=tuple(
            DomainAssignment(
                d["variant"],
                bit=d.get("bit"),
                delta=d.get("delta"),
                value=d.get("value"),
            )
            for d in obj["domains"]
        ),
        site=obj.get("site", ""),
        seed_trace=tuple(obj["seed_trace"]) if obj.get("seed_trace") else None,
    )
