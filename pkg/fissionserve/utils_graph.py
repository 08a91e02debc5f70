import json
import logging

import networkx as nx

from dataclasses import dataclass, field

from fissionserve.utils_errors import GraphCycleError, GraphValidationError
from fissionserve.utils_record import DataRef, Edge, RecordedInvocation

logger = logging.getLogger("FissionServe")


@dataclass
class InvocationGraph:
    """Per-request DAG of unit-task invocations.

    ``nodes`` keeps record order; invocation ids sort in that same order.
    """

    request_id: str
    nodes: dict
    edges: list
    sink_refs: list = field(default_factory=list)

    def to_networkx(self):
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        for edge in self.edges:
            graph.add_edge(edge.producer, edge.consumer)
        return graph

    def consumers(self, invocation_id):
        return sorted({e.consumer for e in self.edges if e.producer == invocation_id})

    def producers(self, invocation_id):
        return sorted({e.producer for e in self.edges if e.consumer == invocation_id})

    def descendants(self, invocation_id):
        return nx.descendants(self.to_networkx(), invocation_id)

    def labels(self):
        return [self.nodes[i].label for i in topo_order(self)]

    def label_edges(self):
        return sorted(
            (self.nodes[e.producer].label, self.nodes[e.consumer].label) for e in self.edges
        )

    def to_dict(self):
        return {
            "request_id": self.request_id,
            "nodes": [node.to_dict() for node in self.nodes.values()],
            "edges": [list(edge) for edge in self.edges],
            "sink_refs": [ref.to_dict() for ref in self.sink_refs],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        nodes = {}
        for raw in data["nodes"]:
            node = RecordedInvocation.from_dict(raw)
            nodes[node.invocation_id] = node
        return cls(
            request_id=data["request_id"],
            nodes=nodes,
            edges=[Edge(*edge) for edge in data["edges"]],
            sink_refs=[DataRef.from_dict(raw) for raw in data.get("sink_refs", [])],
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def validate(graph):
    """Check referential integrity and acyclicity."""
    for edge in graph.edges:
        for end in (edge.producer, edge.consumer):
            if end not in graph.nodes:
                raise GraphValidationError(f"edge {tuple(edge)} references unknown node {end}")
        outputs = graph.nodes[edge.producer].outputs
        if not 0 <= edge.output_index < len(outputs):
            raise GraphValidationError(
                f"edge {tuple(edge)} uses missing output {edge.output_index}"
            )
    for ref in graph.sink_refs:
        node = graph.nodes.get(ref.producer)
        if node is None or ref.output_index >= len(node.outputs):
            raise GraphValidationError(f"sink {ref.ref_id} is not produced by any node")
    try:
        cycle = nx.find_cycle(graph.to_networkx())
    except nx.NetworkXNoCycle:
        return True
    nodes = [u for u, _ in cycle]
    raise GraphCycleError(f"cycle detected: {' -> '.join(nodes + nodes[:1])}", nodes)


def topo_order(graph):
    """Producers before consumers; ties broken by invocation id."""
    return list(nx.lexicographical_topological_sort(graph.to_networkx(), key=str))


def ready_set(graph, completed):
    completed = set(completed)
    unknown = completed - set(graph.nodes)
    if unknown:
        raise GraphValidationError(f"unknown invocation ids: {sorted(unknown)}")
    waiting = {}
    for edge in graph.edges:
        waiting.setdefault(edge.consumer, set()).add(edge.producer)
    return {
        node
        for node in graph.nodes
        if node not in completed and waiting.get(node, set()) <= completed
    }


class ReadinessTracker:
    """Mutable per-request readiness state owned by one dispatcher worker."""

    def __init__(self, graph):
        self.graph = graph
        self.completed = set()

    def ready(self):
        return ready_set(self.graph, self.completed)

    def mark_complete(self, invocation_id):
        if invocation_id not in self.graph.nodes:
            raise GraphValidationError(f"unknown invocation id {invocation_id}")
        self.completed.add(invocation_id)
        return self.ready()

    @property
    def done(self):
        return len(self.completed) == len(self.graph.nodes)
