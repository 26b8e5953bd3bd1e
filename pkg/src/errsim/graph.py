"""Dataflow graph model, manifest loading, and deterministic execution.

A graph is a DAG of operator nodes. Node inputs reference either other
node ids or named graph inputs. Execution order is a fixed topological
order derived from the manifest node order, so traces are reproducible
bit for bit. Graphs and their weights are immutable after load; the
execute functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import EngineError, ValidationError
from .tensorio import DTYPE, load_tensor

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: str
    hyperparams: dict
    weights: dict
    inputs: tuple


def apply_operator(node: OperatorNode, inputs) -> np.ndarray:
    """Run one node on its input tensors, checking shapes."""
    expected = 2 if node.kind in ops.BINARY_KINDS else 1
    if len(inputs) != expected:
        raise EngineError(
            f"node {node.id!r}: expected {expected} input(s), got {len(inputs)}"
        )
    try:
        return ops.apply_kind(node.kind, node.hyperparams, node.weights, inputs)
    except (ValidationError, EngineError):
        raise
    except Exception as exc:  # numpy-level failure, e.g. shape mismatch
        raise EngineError(f"node {node.id!r}: {exc}") from exc


class Graph:
    """Validated operator DAG with inferred per-node output shapes."""

    def __init__(self, nodes, inputs, outputs):
        self.inputs = {str(k): tuple(int(d) for d in v) for k, v in inputs.items()}
        self.outputs = tuple(str(o) for o in outputs)
        self.nodes: dict[str, OperatorNode] = {}
        for node in nodes:
            if node.id in self.nodes or node.id in self.inputs:
                raise ValidationError(f"duplicate id {node.id!r}")
            self.nodes[node.id] = node
        self._validate_refs()
        self.order = self._topo_order()
        self.shapes = self._infer_shapes()
        self.consumers = self._build_consumers()
        for out in self.outputs:
            if out not in self.nodes:
                raise ValidationError(f"output {out!r} is not a node")
        if not self.outputs:
            raise ValidationError("graph declares no outputs")

    def _validate_refs(self):
        for node in self.nodes.values():
            for ref in node.inputs:
                if ref not in self.nodes and ref not in self.inputs:
                    raise ValidationError(
                        f"node {node.id!r} references unknown input {ref!r}"
                    )

    def _topo_order(self):
        indeg = {nid: 0 for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                if ref in self.nodes:
                    indeg[node.id] += 1
        # stable Kahn: ready queue keeps manifest order
        ready = [nid for nid in self.nodes if indeg[nid] == 0]
        order = []
        dependents = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                if ref in self.nodes:
                    dependents[ref].append(node.id)
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for dep in dependents[nid]:
                indeg[dep] -= 1
                if indeg[dep] == 0:
                    ready.append(dep)
        if len(order) != len(self.nodes):
            cyclic = sorted(set(self.nodes) - set(order))
            raise ValidationError(f"graph contains a cycle through {cyclic}")
        return tuple(order)

    def _infer_shapes(self):
        shapes = dict(self.inputs)
        inferred = {}
        for nid in self.order:
            node = self.nodes[nid]
            in_shapes = [shapes[ref] for ref in node.inputs]
            weight_shapes = {k: v.shape for k, v in node.weights.items()}
            try:
                ops.validate_node_config(
                    node.kind, node.hyperparams, weight_shapes, in_shapes
                )
                self._check_weight_values(node)
            except ValidationError as exc:
                raise ValidationError(f"node {nid!r}: {exc}") from None
            out = ops.infer_output_shape(
                node.kind, node.hyperparams, weight_shapes, in_shapes
            )
            shapes[nid] = out
            inferred[nid] = out
        return inferred

    @staticmethod
    def _check_weight_values(node):
        if node.kind == "BatchNorm":
            eps = float(node.hyperparams.get("epsilon", 1e-5))
            if np.any(node.weights["variance"] + np.float32(eps) <= 0):
                raise ValidationError(
                    "BatchNorm variance + epsilon must be positive everywhere"
                )

    def _build_consumers(self):
        consumers = {nid: [] for nid in self.nodes}
        for nid in self.order:
            for ref in self.nodes[nid].inputs:
                if ref in consumers:
                    consumers[ref].append(nid)
        return {k: tuple(v) for k, v in consumers.items()}

    def descendants(self, start: str) -> set:
        """Node ids strictly downstream of `start` (its consumers, transitively)."""
        if start not in self.nodes:
            raise ValidationError(f"unknown node {start!r}")
        seen = set()
        stack = list(self.consumers[start])
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.consumers[nid])
        return seen

    def node_kinds(self) -> dict:
        return {nid: node.kind for nid, node in self.nodes.items()}

    def digest(self) -> str:
        """Stable content hash over structure, hyperparameters and weights."""
        h = hashlib.sha256()
        meta = {
            "inputs": self.inputs,
            "outputs": list(self.outputs),
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "hyperparams": n.hyperparams,
                    "inputs": list(n.inputs),
                    "weights": sorted(n.weights),
                }
                for n in (self.nodes[nid] for nid in self.order)
            ],
        }
        h.update(json.dumps(meta, sort_keys=True).encode())
        for nid in self.order:
            for name in sorted(self.nodes[nid].weights):
                h.update(np.ascontiguousarray(
                    self.nodes[nid].weights[name], dtype=DTYPE).tobytes())
        return "sha256:" + h.hexdigest()


def _check_graph_inputs(graph: Graph, inputs) -> dict:
    values = {}
    for name, shape in graph.inputs.items():
        if name not in inputs:
            raise ValidationError(f"missing graph input {name!r}")
        arr = np.ascontiguousarray(inputs[name], dtype=DTYPE)
        if arr.shape != shape:
            raise ValidationError(
                f"input {name!r}: expected shape {shape}, got {arr.shape}"
            )
        values[name] = arr
    return values


def execute(graph: Graph, inputs) -> dict:
    """Full forward pass; returns every node's output tensor."""
    values = _check_graph_inputs(graph, inputs)
    trace = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        out = apply_operator(node, [values[ref] for ref in node.inputs])
        values[nid] = out
        trace[nid] = out
    return trace


def execute_prefix(graph: Graph, target: str, inputs) -> np.ndarray:
    """Compute a single node's golden output, running only its ancestors."""
    if target not in graph.nodes:
        raise ValidationError(f"unknown node {target!r}")
    needed = {target}
    stack = [target]
    while stack:
        nid = stack.pop()
        for ref in graph.nodes[nid].inputs:
            if ref in graph.nodes and ref not in needed:
                needed.add(ref)
                stack.append(ref)
    values = _check_graph_inputs(graph, inputs)
    for nid in graph.order:
        if nid not in needed:
            continue
        node = graph.nodes[nid]
        values[nid] = apply_operator(node, [values[ref] for ref in node.inputs])
    return values[target]


def execute_from(graph: Graph, start: str, replaced, inputs=None, trace=None) -> dict:
    """Re-execute the subgraph downstream of `start` with its output replaced.

    Values for untouched nodes are served from `trace` when provided and
    recomputed from `inputs` otherwise. The returned map covers the
    replaced node, everything recomputed, and whatever else is needed to
    read the graph outputs; splicing a node's own golden tensor back in
    reproduces execute() bit for bit.
    """
    if start not in graph.nodes:
        raise ValidationError(f"unknown node {start!r}")
    replaced = np.ascontiguousarray(replaced, dtype=DTYPE)
    if replaced.shape != graph.shapes[start]:
        raise ValidationError(
            f"replacement for {start!r} has shape {replaced.shape}, "
            f"expected {graph.shapes[start]}"
        )
    downstream = graph.descendants(start)

    available = {}
    if trace:
        available.update(trace)
    available[start] = replaced

    # upstream values still required: inputs of recomputed nodes and graph
    # outputs that are neither replaced nor downstream
    recompute = set(downstream)
    pending = []
    for nid in downstream:
        pending.extend(graph.nodes[nid].inputs)
    pending.extend(graph.outputs)
    while pending:
        ref = pending.pop()
        if ref in recompute or ref in available or ref not in graph.nodes:
            continue
        recompute.add(ref)
        pending.extend(graph.nodes[ref].inputs)

    values = dict(available)
    for nid in recompute:
        for ref in graph.nodes[nid].inputs:
            if ref in graph.inputs:
                if inputs is None or ref not in inputs:
                    raise EngineError(
                        f"node {nid!r}: graph input {ref!r} required but not supplied"
                    )
                arr = np.ascontiguousarray(inputs[ref], dtype=DTYPE)
                if arr.shape != graph.inputs[ref]:
                    raise ValidationError(
                        f"input {ref!r}: expected shape {graph.inputs[ref]}, "
                        f"got {arr.shape}"
                    )
                values[ref] = arr
    for nid in graph.order:
        if nid not in recompute:
            continue
        node = graph.nodes[nid]
        try:
            args = [values[ref] for ref in node.inputs]
        except KeyError as exc:
            raise EngineError(
                f"node {nid!r}: missing upstream value {exc.args[0]!r} "
                "(supply inputs or a trace)"
            ) from None
        values[nid] = apply_operator(node, args)

    return {k: v for k, v in values.items() if k in graph.nodes}


def load_model(manifest_path) -> Graph:
    """Load and validate a model from its JSON manifest plus weight files."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"model manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: malformed JSON: {exc}") from None
    if not isinstance(manifest, dict) or "nodes" not in manifest:
        raise ValidationError(f"{manifest_path}: not a model manifest")

    base = manifest_path.parent
    nodes = []
    for spec in manifest["nodes"]:
        try:
            nid = str(spec["id"])
            kind = str(spec["kind"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{manifest_path}: node missing {exc}") from None
        weights = {}
        for wname, wspec in (spec.get("weights") or {}).items():
            wpath = base / wspec["file"]
            if not wpath.exists():
                raise ValidationError(f"node {nid!r}: weight file missing: {wpath}")
            weights[wname] = load_tensor(wpath, wspec["shape"])
        nodes.append(OperatorNode(
            id=nid,
            kind=kind,
            hyperparams=dict(spec.get("hyperparams") or {}),
            weights=weights,
            inputs=tuple(spec.get("inputs") or ()),
        ))
    inputs = manifest.get("inputs") or {}
    outputs = manifest.get("outputs") or ()
    return Graph(nodes, inputs, outputs)


def save_model(graph: Graph, manifest_path) -> None:
    """Write a graph back out as manifest + raw weight files (test/tooling aid)."""
    from .tensorio import save_tensor

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    base.mkdir(parents=True, exist_ok=True)
    node_specs = []
    for nid in graph.order:
        node = graph.nodes[nid]
        wspecs = {}
        for wname, arr in node.weights.items():
            fname = f"{nid}_{wname}.bin"
            save_tensor(base / fname, arr)
            wspecs[wname] = {"file": fname, "shape": list(arr.shape)}
        node_specs.append({
            "id": node.id,
            "kind": node.kind,
            "hyperparams": node.hyperparams,
            "inputs": list(node.inputs),
            "weights": wspecs,
        })
    manifest = {
        "format_version": MANIFEST_VERSION,
        "inputs": {k: list(v) for k, v in graph.inputs.items()},
        "outputs": list(graph.outputs),
        "nodes": node_specs,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
