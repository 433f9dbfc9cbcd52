"""Dataflow-graph IR: tensor shapes, operator nodes, synthetic model builders,
and a JSON round-trip format.

The IR is sequence-oriented: node ids are dense 0..K-1 in topological order so
the pipeline passes can slice contiguous operator ranges.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

# Tensor byte sizes must stay addressable on a 64-bit target.
MAX_TENSOR_BYTES = 2**63 - 1

VALID_ELEM_BYTES = (1, 2, 4, 8)


class GraphError(ValueError):
    """Raised on invalid graph construction."""


class ParseError(ValueError):
    """Raised when a serialized graph document is rejected."""


class OpKind(str, Enum):
    INPUT = "input"
    PARAMETER = "parameter"
    MATMUL = "matmul"
    BATCHED_MATMUL = "batched_matmul"
    ELEMENTWISE = "elementwise"
    REDUCTION = "reduction"
    RESHAPE = "reshape"


# Operators that the trivial-op merging pass folds into an operand.
TRIVIAL_KINDS = (OpKind.ELEMENTWISE, OpKind.REDUCTION, OpKind.RESHAPE)

# Operators that carry real arithmetic (replicated computation is forbidden
# for these).
HEAVY_KINDS = (OpKind.MATMUL, OpKind.BATCHED_MATMUL)


@dataclass(frozen=True)
class TensorShape:
    dims: tuple[int, ...]
    elem_bytes: int = 4

    def __post_init__(self):
        if not self.dims or any(d < 1 for d in self.dims):
            raise GraphError(f"tensor extents must be >= 1, got {self.dims}")
        if self.elem_bytes not in VALID_ELEM_BYTES:
            raise GraphError(f"elem_bytes must be one of {VALID_ELEM_BYTES}")
        if self.byte_size > MAX_TENSOR_BYTES:
            raise GraphError(f"tensor of {self.dims} x {self.elem_bytes}B overflows")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def num_elements(self) -> int:
        return math.prod(self.dims)

    @property
    def byte_size(self) -> int:
        return self.num_elements * self.elem_bytes


@dataclass(frozen=True)
class OpNode:
    id: int
    kind: OpKind
    inputs: tuple[tuple[int, int], ...]
    out_shape: TensorShape
    flop: int = 0
    # Axis reduced by a REDUCTION node; None otherwise.
    reduce_axis: Optional[int] = None
    # Backward nodes point at the forward node they must share a stage with.
    colocate_with: Optional[int] = None
    # Set on a node producing the gradient of a Parameter (ZeRO rewrite target).
    grad_of: Optional[int] = None

    @property
    def arity(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class OpGraph:
    nodes: tuple[OpNode, ...]
    outputs: tuple[int, ...]

    def __post_init__(self):
        validate_graph(self.nodes, self.outputs)

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> OpNode:
        return self.nodes[node_id]

    def consumers(self) -> dict[int, list[int]]:
        """Map producer id -> sorted consumer ids."""
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for pid, _ in n.inputs:
                out[pid].append(n.id)
        return out

    def total_flop(self) -> int:
        return sum(n.flop for n in self.nodes)

    @property
    def has_backward(self) -> bool:
        return any(n.colocate_with is not None for n in self.nodes)

    def forward_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.colocate_with is None]


def validate_graph(nodes: tuple[OpNode, ...], outputs: tuple[int, ...]) -> None:
    if not nodes:
        raise GraphError("graph has no nodes")
    for pos, n in enumerate(nodes):
        if n.id != pos:
            raise GraphError(f"node ids must be dense 0..K-1, node {n.id} at position {pos}")
        for pid, out_idx in n.inputs:
            if pid < 0 or pid >= len(nodes):
                raise GraphError(f"node {n.id}: unknown producer {pid}")
            if pid >= n.id:
                raise GraphError(f"node {n.id}: input {pid} violates topological order")
            if out_idx != 0:
                raise GraphError(f"node {n.id}: output index {out_idx} out of range")
        if n.kind in (OpKind.INPUT, OpKind.PARAMETER):
            if n.inputs:
                raise GraphError(f"node {n.id}: {n.kind.value} takes no inputs")
        elif not n.inputs:
            raise GraphError(f"node {n.id}: non-input node needs at least one input")
        if n.kind in HEAVY_KINDS:
            if len(n.inputs) != 2:
                raise GraphError(f"node {n.id}: {n.kind.value} takes exactly two inputs")
            sa = nodes[n.inputs[0][0]].out_shape.dims
            sb = nodes[n.inputs[1][0]].out_shape.dims
            sc = n.out_shape.dims
            if n.kind == OpKind.MATMUL:
                ok = (len(sa), len(sb), len(sc)) == (2, 2, 2) and sa[1] == sb[0] \
                    and sc == (sa[0], sb[1])
            else:
                ok = (len(sa), len(sb), len(sc)) == (3, 3, 3) and sa[0] == sb[0] \
                    and sa[2] == sb[1] and sc == (sa[0], sa[1], sb[2])
            if not ok:
                raise GraphError(f"node {n.id}: inconsistent matmul shapes {sa} x {sb} -> {sc}")
        if n.kind == OpKind.ELEMENTWISE:
            for pid, _ in n.inputs:
                if nodes[pid].out_shape.dims != n.out_shape.dims:
                    raise GraphError(f"node {n.id}: elementwise operand shape mismatch")
        if n.kind == OpKind.REDUCTION:
            if len(n.inputs) != 1:
                raise GraphError(f"node {n.id}: reduction takes one input")
            src = nodes[n.inputs[0][0]]
            if n.reduce_axis is None or not (0 <= n.reduce_axis < src.out_shape.rank):
                raise GraphError(f"node {n.id}: bad reduction axis {n.reduce_axis}")
            want = tuple(d for i, d in enumerate(src.out_shape.dims)
                         if i != n.reduce_axis) or (1,)
            if n.out_shape.dims != want:
                raise GraphError(f"node {n.id}: reduction output shape mismatch")
        elif n.reduce_axis is not None:
            raise GraphError(f"node {n.id}: reduce_axis only valid on reduction")
        if n.flop < 0:
            raise GraphError(f"node {n.id}: negative flop")
        if n.colocate_with is not None and not (0 <= n.colocate_with < n.id):
            raise GraphError(f"node {n.id}: colocate_with {n.colocate_with} must be an earlier node")
        if n.grad_of is not None:
            if not (0 <= n.grad_of < n.id) or nodes[n.grad_of].kind != OpKind.PARAMETER:
                raise GraphError(f"node {n.id}: grad_of {n.grad_of} is not an earlier parameter")
    for oid in outputs:
        if oid < 0 or oid >= len(nodes):
            raise GraphError(f"unknown output node {oid}")
    if not outputs:
        raise GraphError("graph declares no outputs")


def matmul_flop(m: int, n: int, k: int, batch: int = 1) -> int:
    return 2 * batch * m * n * k


class _Builder:
    """Accumulates nodes with dense ids."""

    def __init__(self):
        self.nodes: list[OpNode] = []

    def add(self, kind: OpKind, inputs: tuple[tuple[int, int], ...], shape: TensorShape,
            flop: int = 0, **extra) -> int:
        nid = len(self.nodes)
        self.nodes.append(OpNode(nid, kind, inputs, shape, flop, **extra))
        return nid

    def input(self, shape: TensorShape) -> int:
        return self.add(OpKind.INPUT, (), shape)

    def parameter(self, shape: TensorShape) -> int:
        return self.add(OpKind.PARAMETER, (), shape)

    def matmul(self, a: int, b: int, **extra) -> int:
        sa, sb = self.nodes[a].out_shape, self.nodes[b].out_shape
        if sa.rank != 2 or sb.rank != 2 or sa.dims[1] != sb.dims[0]:
            raise GraphError(f"matmul shape mismatch {sa.dims} x {sb.dims}")
        m, k = sa.dims
        n = sb.dims[1]
        out = TensorShape((m, n), sa.elem_bytes)
        return self.add(OpKind.MATMUL, ((a, 0), (b, 0)), out, matmul_flop(m, n, k), **extra)

    def batched_matmul(self, a: int, b: int, **extra) -> int:
        sa, sb = self.nodes[a].out_shape, self.nodes[b].out_shape
        if sa.rank != 3 or sb.rank != 3 or sa.dims[0] != sb.dims[0] or sa.dims[2] != sb.dims[1]:
            raise GraphError(f"batched matmul shape mismatch {sa.dims} x {sb.dims}")
        bb, i, k = sa.dims
        j = sb.dims[2]
        out = TensorShape((bb, i, j), sa.elem_bytes)
        return self.add(OpKind.BATCHED_MATMUL, ((a, 0), (b, 0)), out,
                        matmul_flop(i, j, k, bb), **extra)

    def elementwise(self, *operands: int, **extra) -> int:
        shape = self.nodes[operands[0]].out_shape
        return self.add(OpKind.ELEMENTWISE, tuple((o, 0) for o in operands), shape,
                        shape.num_elements, **extra)

    def reduction(self, a: int, axis: int, **extra) -> int:
        sa = self.nodes[a].out_shape
        dims = tuple(d for i, d in enumerate(sa.dims) if i != axis) or (1,)
        out = TensorShape(dims, sa.elem_bytes)
        return self.add(OpKind.REDUCTION, ((a, 0),), out, sa.num_elements,
                        reduce_axis=axis, **extra)

    def reshape(self, a: int, dims: tuple[int, ...], **extra) -> int:
        # Reshape is a free layout adapter (transpose/merge/split); element
        # counts need not match (it also stands in for broadcast in mirrored
        # backward graphs).
        out = TensorShape(dims, self.nodes[a].out_shape.elem_bytes)
        return self.add(OpKind.RESHAPE, ((a, 0),), out, 0, **extra)

    def graph(self, outputs: list[int]) -> OpGraph:
        return OpGraph(tuple(self.nodes), tuple(outputs))


def build_mlp(num_layers: int, batch: int, hidden: int, *, elem_bytes: int = 4,
              backward: bool = False) -> OpGraph:
    """Stack of dense layers: Parameter + Matmul + Elementwise activation each.

    Forward node count is 3 * num_layers + 1.
    """
    if num_layers < 1 or batch < 1 or hidden < 1:
        raise GraphError("build_mlp arguments must be >= 1")
    b = _Builder()
    x = b.input(TensorShape((batch, hidden), elem_bytes))
    cur = x
    for _ in range(num_layers):
        w = b.parameter(TensorShape((hidden, hidden), elem_bytes))
        mm = b.matmul(cur, w)
        cur = b.elementwise(mm)
    if backward:
        cur = _append_backward(b, cur)
    return b.graph([cur])


def build_transformer_blocks(num_blocks: int, batch: int, seq: int, hidden: int,
                             heads: int, *, elem_bytes: int = 4,
                             backward: bool = False) -> OpGraph:
    """Stack of self-attention + MLP blocks at toy scale.

    Per block: Q/K/V/output-projection matmuls, two attention batched matmuls,
    a 2-layer MLP (hidden -> 4*hidden -> hidden), softmax/activation/residual
    elementwise ops, and head split/merge reshapes.
    """
    if num_blocks < 1 or batch < 1 or seq < 1 or hidden < 1 or heads < 1:
        raise GraphError("build_transformer_blocks arguments must be >= 1")
    if hidden % heads != 0:
        raise GraphError(f"hidden {hidden} not divisible by heads {heads}")
    head_dim = hidden // heads
    tokens = batch * seq
    b = _Builder()
    x = b.input(TensorShape((tokens, hidden), elem_bytes))
    cur = x
    for _ in range(num_blocks):
        wq = b.parameter(TensorShape((hidden, hidden), elem_bytes))
        wk = b.parameter(TensorShape((hidden, hidden), elem_bytes))
        wv = b.parameter(TensorShape((hidden, hidden), elem_bytes))
        q = b.matmul(cur, wq)
        k = b.matmul(cur, wk)
        v = b.matmul(cur, wv)
        qh = b.reshape(q, (batch * heads, seq, head_dim))
        kh = b.reshape(k, (batch * heads, head_dim, seq))
        vh = b.reshape(v, (batch * heads, seq, head_dim))
        scores = b.batched_matmul(qh, kh)
        probs = b.elementwise(scores)
        ctx = b.batched_matmul(probs, vh)
        ctx2 = b.reshape(ctx, (tokens, hidden))
        wo = b.parameter(TensorShape((hidden, hidden), elem_bytes))
        proj = b.matmul(ctx2, wo)
        res1 = b.elementwise(proj, cur)
        w1 = b.parameter(TensorShape((hidden, 4 * hidden), elem_bytes))
        mlp1 = b.matmul(res1, w1)
        act = b.elementwise(mlp1)
        w2 = b.parameter(TensorShape((4 * hidden, hidden), elem_bytes))
        mlp2 = b.matmul(act, w2)
        cur = b.elementwise(mlp2, res1)
    if backward:
        cur = _append_backward(b, cur)
    return b.graph([cur])


def _append_backward(b: _Builder, output: int) -> int:
    """Append mirrored backward nodes for every forward compute node.

    Structural stand-in for autodiff: matmul gradients become transpose
    adapters plus dX/dW matmuls of equal FLOP; dW is tagged grad_of its
    Parameter; everything is colocated with its forward node.
    """
    fwd_nodes = list(b.nodes)
    seed = b.elementwise(output, colocate_with=output)
    grads: dict[int, int] = {output: seed}

    def accumulate(target: int, g: int, site: int) -> None:
        if target in grads:
            grads[target] = b.elementwise(grads[target], g, colocate_with=site)
        else:
            grads[target] = g

    for n in reversed(fwd_nodes):
        g = grads.get(n.id)
        if g is None or n.kind in (OpKind.INPUT, OpKind.PARAMETER):
            continue
        if n.kind in (OpKind.MATMUL, OpKind.BATCHED_MATMUL):
            (aid, _), (bid, _) = n.inputs
            a_shape = b.nodes[aid].out_shape
            b_shape = b.nodes[bid].out_shape
            if n.kind == OpKind.MATMUL:
                bt = b.reshape(bid, (b_shape.dims[1], b_shape.dims[0]), colocate_with=n.id)
                da = b.matmul(g, bt, colocate_with=n.id)
                at = b.reshape(aid, (a_shape.dims[1], a_shape.dims[0]), colocate_with=n.id)
                grad_tag = bid if b.nodes[bid].kind == OpKind.PARAMETER else None
                db = b.matmul(at, g, colocate_with=n.id, grad_of=grad_tag)
            else:
                bt = b.reshape(bid, (b_shape.dims[0], b_shape.dims[2], b_shape.dims[1]),
                               colocate_with=n.id)
                da = b.batched_matmul(g, bt, colocate_with=n.id)
                at = b.reshape(aid, (a_shape.dims[0], a_shape.dims[2], a_shape.dims[1]),
                               colocate_with=n.id)
                grad_tag = bid if b.nodes[bid].kind == OpKind.PARAMETER else None
                db = b.batched_matmul(at, g, colocate_with=n.id, grad_of=grad_tag)
            accumulate(aid, da, n.id)
            accumulate(bid, db, n.id)
        elif n.kind == OpKind.ELEMENTWISE:
            dg = b.elementwise(g, colocate_with=n.id)
            for pid, _ in n.inputs:
                accumulate(pid, dg, n.id)
        elif n.kind in (OpKind.RESHAPE, OpKind.REDUCTION):
            src = b.nodes[n.inputs[0][0]]
            dg = b.reshape(g, src.out_shape.dims, colocate_with=n.id)
            accumulate(n.inputs[0][0], dg, n.id)
    return b.nodes[-1].id


# --- JSON round-trip -------------------------------------------------------

_NODE_FIELDS = {"id", "kind", "inputs", "shape", "flop", "colocate_with", "grad_of"}
_TOP_FIELDS = {"version", "nodes", "outputs"}


def _kind_to_str(n: OpNode) -> str:
    if n.kind == OpKind.REDUCTION:
        return f"reduction:{n.reduce_axis}"
    return n.kind.value


def _kind_from_str(s: str, node_id) -> tuple[OpKind, Optional[int]]:
    if s.startswith("reduction:"):
        try:
            return OpKind.REDUCTION, int(s.split(":", 1)[1])
        except ValueError:
            raise ParseError(f"node {node_id}: bad reduction axis in kind {s!r}") from None
    try:
        return OpKind(s), None
    except ValueError:
        raise ParseError(f"node {node_id}: unknown kind {s!r}") from None


def serialize(graph: OpGraph) -> bytes:
    nodes = []
    for n in graph.nodes:
        d = {
            "id": n.id,
            "kind": _kind_to_str(n),
            "inputs": [[pid, idx] for pid, idx in n.inputs],
            "shape": {"dims": list(n.out_shape.dims), "elem_bytes": n.out_shape.elem_bytes},
            "flop": n.flop,
        }
        if n.colocate_with is not None:
            d["colocate_with"] = n.colocate_with
        if n.grad_of is not None:
            d["grad_of"] = n.grad_of
        nodes.append(d)
    doc = {"version": 1, "nodes": nodes, "outputs": list(graph.outputs)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse(data: bytes) -> OpGraph:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError("top-level document must be an object")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ParseError(f"unknown top-level fields {sorted(unknown)}")
    if doc.get("version") != 1:
        raise ParseError(f"unsupported version {doc.get('version')!r}")
    raw_nodes = doc.get("nodes")
    raw_outputs = doc.get("outputs")
    if not isinstance(raw_nodes, list) or not isinstance(raw_outputs, list):
        raise ParseError("nodes and outputs must be arrays")

    nodes = []
    for pos, d in enumerate(raw_nodes):
        if not isinstance(d, dict):
            raise ParseError(f"node at position {pos} is not an object")
        nid = d.get("id", pos)
        unknown = set(d) - _NODE_FIELDS
        if unknown:
            raise ParseError(f"node {nid}: unknown fields {sorted(unknown)}")
        for req in ("id", "kind", "inputs", "shape", "flop"):
            if req not in d:
                raise ParseError(f"node {nid}: missing field {req!r}")
        kind, reduce_axis = _kind_from_str(d["kind"], nid)
        shape_doc = d["shape"]
        if not isinstance(shape_doc, dict) or set(shape_doc) != {"dims", "elem_bytes"}:
            raise ParseError(f"node {nid}: shape must have exactly dims and elem_bytes")
        inputs = []
        for edge in d["inputs"]:
            if (not isinstance(edge, list) or len(edge) != 2
                    or not all(isinstance(v, int) for v in edge)):
                raise ParseError(f"node {nid}: inputs must be [producer, out_idx] pairs")
            inputs.append((edge[0], edge[1]))
        flop = d["flop"]
        if not isinstance(flop, (int, float)) or flop != int(flop):
            raise ParseError(f"node {nid}: flop must be an integer")
        try:
            shape = TensorShape(tuple(shape_doc["dims"]), shape_doc["elem_bytes"])
            nodes.append(OpNode(
                id=d["id"], kind=kind, inputs=tuple(inputs), out_shape=shape,
                flop=int(flop), reduce_axis=reduce_axis,
                colocate_with=d.get("colocate_with"), grad_of=d.get("grad_of"),
            ))
        except (GraphError, TypeError) as e:
            raise ParseError(f"node {nid}: {e}") from None
    try:
        return OpGraph(tuple(nodes), tuple(raw_outputs))
    except GraphError as e:
        raise ParseError(str(e)) from None
