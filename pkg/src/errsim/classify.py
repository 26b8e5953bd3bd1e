"""Usability-based classification of corrupted outputs and campaign
report aggregation.

An experiment is masked when every final output is bit-identical to the
golden run; only bit-differing outputs reach the usability policy, which
decides usable vs unusable from the downstream consumer's point of view.

Built-in policies:
  top1                  argmax label equality on a flat classification head
  topk (k)              golden top-1 contained in the faulty top-k
  label-set (threshold) equality of the sets of classes scoring >= threshold
  tolerance (epsilon)   element-wise max |delta| <= epsilon on all outputs

Custom policies register through the same interface as the built-ins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .patterns import DOMAIN_VARIANTS
from .tensorio import DTYPE, bits_view

MASKED = "masked"
USABLE = "usable"
UNUSABLE = "unusable"
ENGINE_ERROR = "engine_error"

OUTCOMES = (MASKED, USABLE, UNUSABLE, ENGINE_ERROR)

REPORT_VERSION = 1


@dataclass(frozen=True)
class Outcome:
    variant: str
    detail: dict = field(default_factory=dict)


def _as_output_map(tensors) -> dict:
    if isinstance(tensors, dict):
        return {k: np.ascontiguousarray(v, dtype=DTYPE) for k, v in tensors.items()}
    return {"output": np.ascontiguousarray(tensors, dtype=DTYPE)}


def outputs_bit_identical(golden, faulty) -> bool:
    g = _as_output_map(golden)
    f = _as_output_map(faulty)
    if g.keys() != f.keys():
        raise ValidationError("golden and faulty outputs disagree on names")
    for name in g:
        if g[name].shape != f[name].shape:
            raise ValidationError(
                f"output {name!r}: shape {g[name].shape} vs {f[name].shape}"
            )
        if not np.array_equal(bits_view(g[name]), bits_view(f[name])):
            return False
    return True


def classify_output(golden, faulty, policy) -> Outcome:
    """Masked on bit equality, otherwise the policy decides."""
    if outputs_bit_identical(golden, faulty):
        return Outcome(MASKED)
    return policy(_as_output_map(golden), _as_output_map(faulty))


def _single_head(outputs: dict, policy_name: str) -> np.ndarray:
    if len(outputs) != 1:
        raise ValidationError(
            f"{policy_name} needs exactly one output tensor, got {len(outputs)}"
        )
    (arr,) = outputs.values()
    if arr.ndim != 2 or arr.shape[0] != 1:
        raise ValidationError(
            f"{policy_name} needs a flat (1, N) head, got shape {arr.shape}"
        )
    return arr[0]


def make_top1_policy():
    def top1(golden, faulty):
        g = _single_head(golden, "top1")
        f = _single_head(faulty, "top1")
        if np.isnan(f).any():
            return Outcome(UNUSABLE, {"reason": "nan_in_output"})
        gl, fl = int(np.argmax(g)), int(np.argmax(f))
        variant = USABLE if gl == fl else UNUSABLE
        return Outcome(variant, {"golden_top1": gl, "faulty_top1": fl})
    return top1


def make_topk_policy(k: int):
    k = int(k)
    if k < 1:
        raise ValidationError(f"topk needs k >= 1, got {k}")

    def topk(golden, faulty):
        g = _single_head(golden, "topk")
        f = _single_head(faulty, "topk")
        if np.isnan(f).any():
            return Outcome(UNUSABLE, {"reason": "nan_in_output"})
        gl = int(np.argmax(g))
        # stable order among ties: argsort on (-value, index)
        order = np.argsort(-f, kind="stable")[:k]
        hit = gl in set(int(i) for i in order)
        return Outcome(USABLE if hit else UNUSABLE,
                       {"golden_top1": gl, "faulty_topk": [int(i) for i in order]})
    return topk


def make_label_set_policy(threshold: float):
    threshold = float(threshold)

    def label_set(golden, faulty):
        g = _single_head(golden, "label-set")
        f = _single_head(faulty, "label-set")
        gset = {int(i) for i in np.flatnonzero(g >= threshold)}
        fset = {int(i) for i in np.flatnonzero(f >= threshold)}
        return Outcome(
            USABLE if gset == fset else UNUSABLE,
            {"golden_labels": sorted(gset), "faulty_labels": sorted(fset)},
        )
    return label_set


def make_tolerance_policy(epsilon: float):
    epsilon = float(epsilon)
    if epsilon < 0:
        raise ValidationError(f"tolerance needs epsilon >= 0, got {epsilon}")

    def tolerance(golden, faulty):
        if epsilon == 0.0:
            # exact mode: anything that reaches the policy differs bitwise
            return Outcome(UNUSABLE, {"max_delta": None})
        worst = 0.0
        for name in golden:
            delta = np.abs(golden[name] - faulty[name])
            if np.isnan(delta).any():
                return Outcome(UNUSABLE, {"reason": "nan_in_output"})
            worst = max(worst, float(delta.max()))
        return Outcome(USABLE if worst <= epsilon else UNUSABLE,
                       {"max_delta": worst})
    return tolerance


_POLICY_FACTORIES = {
    "top1": lambda params: make_top1_policy(),
    "topk": lambda params: make_topk_policy(params.get("k", 1)),
    "label-set": lambda params: make_label_set_policy(params.get("threshold", 0.5)),
    "tolerance": lambda params: make_tolerance_policy(params.get("epsilon", 0.0)),
}


def register_policy(name: str, factory) -> None:
    """Register a custom policy factory: factory(params: dict) -> policy
    callable taking (golden outputs, faulty outputs) and returning Outcome."""
    _POLICY_FACTORIES[str(name)] = factory


def build_policy(spec: dict):
    spec = dict(spec or {})
    name = spec.pop("policy", None)
    if name not in _POLICY_FACTORIES:
        raise ValidationError(
            f"unknown classifier policy {name!r}; known: {sorted(_POLICY_FACTORIES)}"
        )
    return _POLICY_FACTORIES[name](spec)


@dataclass
class Report:
    totals: dict
    per_site: dict
    per_kind: dict
    per_spatial: dict
    per_domain: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_VERSION,
            "totals": self.totals,
            "per_site": self.per_site,
            "per_kind": self.per_kind,
            "per_spatial": self.per_spatial,
            "per_domain": self.per_domain,
            "metadata": self.metadata,
        }

    def render_text(self) -> str:
        t = self.totals
        lines = [
            "campaign outcomes",
            f"  experiments   {t['experiments']}",
        ]
        for outcome in OUTCOMES:
            lines.append(f"  {outcome:<13} {t[outcome]}")
        lines.append("")
        head = f"{'operator kind':<14} {'count':>7} {'unusable':>9} {'rate':>7}"
        lines += ["per operator kind (sorted by unusable rate)", head, "-" * len(head)]
        ranked = sorted(
            self.per_kind.items(),
            key=lambda kv: (-kv[1]["unusable_rate"], kv[0]),
        )
        for kind, row in ranked:
            lines.append(
                f"{kind:<14} {row['count']:>7} {row['unusable']:>9} "
                f"{row['unusable_rate']:>7.3f}"
            )
        return "\n".join(lines)


def _dominant_domain(domains) -> str:
    """Majority value domain of an event (ties break in canonical order),
    so the per-domain breakdown partitions the records."""
    counts = {}
    for d in domains:
        counts[d] = counts.get(d, 0) + 1
    best = max(counts.values())
    for v in DOMAIN_VARIANTS:
        if counts.get(v) == best:
            return v
    return next(iter(counts))


def aggregate(records) -> Report:
    """Fold campaign records into a report. Pure and order-insensitive:
    any permutation of the records yields the same report."""
    totals = {o: 0 for o in OUTCOMES}
    per_site: dict = {}
    per_kind: dict = {}
    per_spatial: dict = {}
    per_domain: dict = {}

    def bump(table, key, outcome):
        row = table.setdefault(key, {o: 0 for o in OUTCOMES})
        row[outcome] += 1

    n = 0
    for rec in sorted(records, key=lambda r: r.index):
        n += 1
        outcome = rec.outcome.variant
        totals[outcome] += 1
        bump(per_site, rec.site, outcome)
        bump(per_kind, rec.kind, outcome)
        if rec.event is not None:
            bump(per_spatial, rec.event.spatial.variant, outcome)
            domains = [d.variant for d in rec.event.domains]
            bump(per_domain, _dominant_domain(domains), outcome)

    def finalize(table):
        out = {}
        for key, row in sorted(table.items()):
            count = sum(row.values())
            out[key] = {
                "count": count,
                **{o: row[o] for o in OUTCOMES},
                "unusable_rate": row[UNUSABLE] / count if count else 0.0,
            }
        return out

    totals_out = {"experiments": n, **totals}
    totals_out["unusable_rate"] = totals[UNUSABLE] / n if n else 0.0
    return Report(
        totals=totals_out,
        per_site=finalize(per_site),
        per_kind=finalize(per_kind),
        per_spatial=finalize(per_spatial),
        per_domain=finalize(per_domain),
    )
