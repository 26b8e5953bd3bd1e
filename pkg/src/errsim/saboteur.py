"""Applying corruption events to tensors and running whole-graph
error-simulation campaigns.

A campaign runs N independent experiments. Each experiment derives its
own random stream from (master seed, experiment index), picks an input
set and an injection site, samples a corruption event for the site's
operator kind, rewrites the site's golden output tensor, re-executes the
downstream subgraph, and classifies the final outputs against the golden
run. Because every experiment is self-contained, results are identical
for any worker count and any execution order.

The golden tensor at each injection site is cached per (input, site)
with LRU eviction, so repeated experiments at one site skip the upstream
part of the graph. Caching is an optimization only: records are
bit-identical with the cache disabled.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import patterns
from .classify import ENGINE_ERROR, Outcome, aggregate, classify_output
from .errordb import ErrorModelDB, generatable_distribution, sample_error
from .errors import EngineError, ValidationError
from .graph import Graph, execute, execute_from, execute_prefix
from .patterns import (
    DOMAIN_BITFLIP,
    DOMAIN_NAN,
    DOMAIN_RANDOM,
    DOMAIN_UNIT_OFFSET,
    DOMAIN_VARIANTS,
    DOMAIN_ZERO,
    CorruptionEvent,
    event_from_json,
    event_to_json,
    generate_targets,  # re-exported: target resolution is part of this surface
)
from .tensorio import (
    DTYPE,
    bit_distance,
    canonical_shape,
    flat_index,
    flip_bit,
    float_bits,
    load_tensor,
)

__all__ = [
    "CampaignConfig", "CampaignRecord", "PlannedExperiment", "PrefixCache",
    "corrupt_values", "generate_targets", "plan_campaign", "run_campaign",
    "record_to_json", "record_from_json", "load_records",
]

log = logging.getLogger(__name__)

_QNAN = np.float32(np.nan)
_RESAMPLE_LIMIT = 100


def corrupt_values(
    golden: np.ndarray,
    targets,
    domains,
    rng,
    random_scale: float = patterns.DEFAULT_RANDOM_SCALE,
) -> np.ndarray:
    """Copy of `golden` with each target location rewritten per its
    assigned value domain.

    nan writes the quiet-NaN encoding; zero writes +0.0; bitflip flips
    the assigned bit of the binary32 encoding; unit_offset adds the bound
    delta, resampling it if the sum rounds back to the golden encoding;
    random uses the bound replacement, resampled while it would pass as
    any other domain (within 1.0 of golden, single-bit-distant, zero, or
    NaN). Every target ends up bitwise different from golden except the
    documented zero-onto-+0.0 collision, which is a no-op.
    """
    out = np.ascontiguousarray(golden, dtype=DTYPE).copy()
    flat = out.reshape(-1)
    cshape = canonical_shape(golden.shape)
    for loc, dom in zip(targets, domains):
        i = flat_index(loc, cshape)
        g = float(flat[i])
        if dom.variant == DOMAIN_NAN:
            flat[i] = _QNAN
        elif dom.variant == DOMAIN_ZERO:
            flat[i] = np.float32(0.0)
        elif dom.variant == DOMAIN_BITFLIP:
            flat[i] = np.float32(flip_bit(g, dom.bit))
        elif dom.variant == DOMAIN_UNIT_OFFSET:
            flat[i] = _unit_offset(g, dom.delta, rng)
        elif dom.variant == DOMAIN_RANDOM:
            flat[i] = _random_replacement(g, dom.value, rng, random_scale)
        else:
            raise ValidationError(f"unknown value domain {dom.variant!r}")
    return out


def _unit_offset(g: float, delta: float, rng) -> np.float32:
    gf = np.float32(g)
    for _ in range(_RESAMPLE_LIMIT):
        cand = np.float32(gf + np.float32(delta))
        if float_bits(float(cand)) != float_bits(g) and abs(float(cand) - g) <= 1.0:
            return cand
        delta = float(rng.uniform(-1.0, 1.0))
    # |golden| too large for any offset in [-1, 1] to be representable;
    # step to the adjacent float as the closest achievable perturbation
    direction = np.float32(np.inf) if delta >= 0 else np.float32(-np.inf)
    return np.nextafter(gf, direction, dtype=np.float32)


def _random_replacement(g: float, value, rng, scale: float) -> np.float32:
    cand = value if value is not None else float(rng.uniform(-scale, scale))
    for _ in range(_RESAMPLE_LIMIT):
        cf = float(np.float32(cand))
        survives = (
            not np.isnan(cf)
            and cf != 0.0
            and not abs(cf - float(np.float32(g))) <= 1.0  # False for NaN golden
            and bit_distance(g, cf) != 1
        )
        if survives:
            return np.float32(cand)
        cand = float(rng.uniform(-scale, scale))
    raise EngineError(
        f"could not draw a random-domain replacement for golden value {g!r}"
    )


@dataclass
class CampaignConfig:
    """Everything a campaign needs beyond the graph and the database."""

    experiments: int
    seed: int
    input_sets: list                      # each: {input name: path or array}
    policy_type: str = "uniform"          # "uniform" | "weighted"
    policy_weights: dict | None = None    # node id -> weight (weighted only)
    db_path: str | None = None
    fallback_enabled: bool = False
    classifier: dict = field(default_factory=lambda: {"policy": "top1"})
    workers: int = 1
    cache_enabled: bool = True
    cache_capacity: int = 64
    row_skip_p: float = patterns.DEFAULT_ROW_SKIP_P
    map_skip_p: float = patterns.DEFAULT_MAP_SKIP_P
    random_scale: float = patterns.DEFAULT_RANDOM_SCALE
    domain_override: str | None = None
    records_path: str | None = None
    report_path: str | None = None

    def validate(self) -> "CampaignConfig":
        if int(self.experiments) < 1:
            raise ValidationError("experiments must be >= 1")
        if int(self.seed) < 0:
            raise ValidationError("seed must be a non-negative integer")
        if not self.input_sets:
            raise ValidationError("at least one input set is required")
        if self.policy_type not in ("uniform", "weighted"):
            raise ValidationError(f"unknown site policy {self.policy_type!r}")
        if self.policy_type == "weighted":
            if not self.policy_weights:
                raise ValidationError("weighted policy needs a weight map")
            if any(w < 0 for w in self.policy_weights.values()):
                raise ValidationError("site weights must be >= 0")
            if sum(self.policy_weights.values()) <= 0:
                raise ValidationError("site weights must have a positive sum")
        if self.domain_override is not None and (
            self.domain_override not in DOMAIN_VARIANTS
        ):
            raise ValidationError(
                f"domain_override must be one of {DOMAIN_VARIANTS}"
            )
        if int(self.workers) < 1:
            raise ValidationError("workers must be >= 1")
        if int(self.cache_capacity) < 1:
            raise ValidationError("cache_capacity must be >= 1")
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "CampaignConfig":
        raw = dict(raw)
        policy = raw.pop("policy", None) or {}
        gen = raw.pop("generation", None) or {}
        cache = raw.pop("cache", None) or {}
        output = raw.pop("output", None) or {}
        input_sets = raw.pop("input_sets", None)
        single = raw.pop("inputs", None)
        if input_sets is None:
            input_sets = [single] if single else []
        known = {
            "experiments", "seed", "workers", "db", "classifier",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown campaign config keys {sorted(unknown)}")
        cfg = cls(
            experiments=int(raw.get("experiments", 0)),
            seed=int(raw.get("seed", 0)),
            input_sets=[dict(s) for s in input_sets],
            policy_type=policy.get("type", "uniform"),
            policy_weights=policy.get("weights"),
            db_path=raw.get("db"),
            fallback_enabled=bool(gen.get("fallback_enabled", False)),
            classifier=dict(raw.get("classifier") or {"policy": "top1"}),
            workers=int(raw.get("workers", 1)),
            cache_enabled=bool(cache.get("enabled", True)),
            cache_capacity=int(cache.get("capacity", 64)),
            row_skip_p=float(gen.get("row_skip_p", patterns.DEFAULT_ROW_SKIP_P)),
            map_skip_p=float(gen.get("map_skip_p", patterns.DEFAULT_MAP_SKIP_P)),
            random_scale=float(gen.get("random_scale", patterns.DEFAULT_RANDOM_SCALE)),
            domain_override=gen.get("domain_override"),
            records_path=output.get("records"),
            report_path=output.get("report"),
        )
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "CampaignConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ValidationError(f"campaign config not found: {path}") from None
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            try:
                raw = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ValidationError(f"{path}: malformed TOML: {exc}") from None
        else:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: malformed JSON: {exc}") from None
        return cls.from_dict(raw)


@dataclass(frozen=True)
class PlannedExperiment:
    index: int
    input_index: int
    site: str
    seed: tuple


@dataclass
class CampaignRecord:
    index: int
    site: str
    kind: str
    input_index: int
    seed: tuple
    event: CorruptionEvent | None
    outcome: Outcome
    digest: str | None
    wall_time: float = 0.0  # in-memory only, never serialized


def _experiment_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[int(master_seed), int(index)])
    )


def _site_distribution(config: CampaignConfig, graph: Graph):
    if config.policy_type == "uniform":
        sites = list(graph.order)
        probs = np.full(len(sites), 1.0 / len(sites))
        return sites, probs
    weights = dict(config.policy_weights)
    unknown = sorted(set(weights) - set(graph.nodes))
    if unknown:
        raise ValidationError(f"site weights reference unknown nodes {unknown}")
    sites = [nid for nid in graph.order if weights.get(nid, 0.0) > 0]
    if not sites:
        raise ValidationError("site weights select no nodes")
    probs = np.array([weights[nid] for nid in sites])
    return sites, probs / probs.sum()


def plan_campaign(config: CampaignConfig, graph: Graph, db: ErrorModelDB):
    """Deterministic experiment plan: one (input, site, seed) per
    experiment, with the per-experiment seed derived from (master seed,
    index) so the plan is reproducible and order-independent."""
    config.validate()
    sites, probs = _site_distribution(config, graph)
    if not config.fallback_enabled:
        missing = sorted({
            graph.nodes[s].kind for s in sites
            if graph.nodes[s].kind not in db.entries
        })
        if missing:
            raise ValidationError(
                f"no error model for operator kinds {missing} "
                "(enable the fallback entry or extend the database)"
            )
    n_inputs = len(config.input_sets)
    plan = []
    for i in range(int(config.experiments)):
        rng = _experiment_rng(config.seed, i)
        input_index = int(rng.integers(n_inputs))
        site = sites[patterns._choice(rng, probs)]
        plan.append(PlannedExperiment(i, input_index, site, (int(config.seed), i)))
    return plan


class PrefixCache:
    """Thread-safe LRU cache for golden tensors at injection sites,
    keyed by (input index, site id)."""

    def __init__(self, capacity: int = 64):
        self.capacity = int(capacity)
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
            self.misses += 1
            return None

    def put(self, key, value) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)


def _load_input_sets(config: CampaignConfig, graph: Graph):
    loaded = []
    for idx, spec in enumerate(config.input_sets):
        values = {}
        for name, shape in graph.inputs.items():
            if name not in spec:
                raise ValidationError(
                    f"input set {idx} missing graph input {name!r}"
                )
            src = spec[name]
            if isinstance(src, (str, Path)):
                values[name] = load_tensor(src, shape)
            else:
                arr = np.ascontiguousarray(src, dtype=DTYPE)
                if arr.shape != shape:
                    raise ValidationError(
                        f"input set {idx}, {name!r}: expected {shape}, got {arr.shape}"
                    )
                values[name] = arr
        loaded.append(values)
    return loaded


def _outputs_digest(outputs: dict, order) -> str:
    h = hashlib.sha256()
    for name in order:
        h.update(np.ascontiguousarray(outputs[name], dtype=DTYPE).tobytes())
    return "sha256:" + h.hexdigest()


def run_campaign(
    config: CampaignConfig,
    graph: Graph,
    db: ErrorModelDB,
    classifier,
    records_sink=None,
):
    """Execute the planned experiments and aggregate a report.

    Records stream to `records_sink` (a writable text file object) in
    index order as experiments complete. Experiment failures are recorded
    as engine_error outcomes without aborting the campaign.
    """
    started = time.perf_counter()
    plan = plan_campaign(config, graph, db)
    input_sets = _load_input_sets(config, graph)
    golden_outputs = []
    for values in input_sets:
        trace = execute(graph, values)
        golden_outputs.append({o: trace[o] for o in graph.outputs})
    cache = PrefixCache(config.cache_capacity) if config.cache_enabled else None
    sites, site_probs = _site_distribution(config, graph)

    dropped = _log_dropped_mass(config, graph, db, plan)

    def site_tensor(input_index: int, site: str) -> np.ndarray:
        key = (input_index, site)
        if cache is not None:
            hit = cache.get(key)
            if hit is not None:
                return hit
        tensor = execute_prefix(graph, site, input_sets[input_index])
        if cache is not None:
            cache.put(key, tensor)
        return tensor

    def run_one(exp: PlannedExperiment) -> CampaignRecord:
        t0 = time.perf_counter()
        rng = _experiment_rng(config.seed, exp.index)
        input_index = int(rng.integers(len(input_sets)))
        site = sites[patterns._choice(rng, site_probs)]
        kind = graph.nodes[site].kind
        event = None
        try:
            event = sample_error(
                db, kind, graph.shapes[site], rng,
                allow_fallback=config.fallback_enabled,
                row_skip_p=config.row_skip_p,
                map_skip_p=config.map_skip_p,
                random_scale=config.random_scale,
                domain_override=config.domain_override,
            ).bind(site, exp.seed)
            golden_site = site_tensor(input_index, site)
            corrupted = corrupt_values(
                golden_site, event.targets, event.domains, rng,
                random_scale=config.random_scale,
            )
            fault_values = execute_from(
                graph, site, corrupted, inputs=input_sets[input_index]
            )
            faulty_outputs = {o: fault_values[o] for o in graph.outputs}
            outcome = classify_output(
                golden_outputs[input_index], faulty_outputs, classifier
            )
            digest = _outputs_digest(faulty_outputs, graph.outputs)
        except Exception as exc:  # per-experiment isolation
            log.warning("experiment %d failed: %s", exp.index, exc)
            outcome = Outcome(ENGINE_ERROR, {"error": str(exc)})
            digest = None
        return CampaignRecord(
            index=exp.index,
            site=site,
            kind=kind,
            input_index=input_index,
            seed=exp.seed,
            event=event,
            outcome=outcome,
            digest=digest,
            wall_time=time.perf_counter() - t0,
        )

    records = []

    def emit(rec: CampaignRecord):
        records.append(rec)
        if records_sink is not None:
            records_sink.write(record_to_json_line(rec) + "\n")

    if int(config.workers) <= 1:
        for exp in plan:
            emit(run_one(exp))
    else:
        with ThreadPoolExecutor(max_workers=int(config.workers)) as pool:
            futures = [pool.submit(run_one, exp) for exp in plan]
            for fut in futures:  # futures submitted in index order
                emit(fut.result())

    report = aggregate(records)
    report.metadata.update({
        "seed": int(config.seed),
        "experiments": int(config.experiments),
        "model_digest": graph.digest(),
        "db_provenance": {
            kind: dict(entry.provenance) for kind, entry in db.entries.items()
        },
        "classifier": dict(config.classifier),
        "site_policy": config.policy_type,
        "domain_override": config.domain_override,
        "dropped_random_mass": dropped,
        "cache": {
            "enabled": config.cache_enabled,
            "hits": cache.hits if cache else 0,
            "misses": cache.misses if cache else 0,
        },
        "wall_time_s": time.perf_counter() - started,
    })
    return records, report


def _log_dropped_mass(config, graph, db, plan):
    """Per-site random-variant mass excluded by the sampler (plus any
    structured mass the shape cannot host), recorded per campaign."""
    dropped = {}
    for site in sorted({p.site for p in plan}):
        kind = graph.nodes[site].kind
        entry = db.entry(kind, allow_fallback=config.fallback_enabled)
        _, _, mass = generatable_distribution(entry, graph.shapes[site])
        dropped[site] = mass
        if mass > 0:
            log.info(
                "site %s (%s): %.4f of the spatial mass is not generatable "
                "and was renormalized away", site, kind, mass,
            )
    return dropped


def record_to_json(rec: CampaignRecord) -> dict:
    return {
        "index": rec.index,
        "site": rec.site,
        "kind": rec.kind,
        "input_index": rec.input_index,
        "seed": list(rec.seed),
        "event": event_to_json(rec.event) if rec.event is not None else None,
        "outcome": {"variant": rec.outcome.variant, "detail": rec.outcome.detail},
        "digest": rec.digest,
    }


def record_to_json_line(rec: CampaignRecord) -> str:
    return json.dumps(record_to_json(rec), sort_keys=True, separators=(",", ":"))


def record_from_json(obj: dict) -> CampaignRecord:
    return CampaignRecord(
        index=int(obj["index"]),
        site=obj["site"],
        kind=obj["kind"],
        input_index=int(obj.get("input_index", 0)),
        seed=tuple(obj.get("seed") or ()),
        event=event_from_json(obj["event"]) if obj.get("event") else None,
        outcome=Outcome(obj["outcome"]["variant"], obj["outcome"].get("detail") or {}),
        digest=obj.get("digest"),
    )


def load_records(path):
    """Read a records.jsonl file, reporting the line number on failure."""
    records = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: bad record on line {lineno}: {exc}")
    return records
