"""
(©) EDQ Lab

This plugin handles the `graph-check` command: reads a local independence graph file
and prints the eliminability verdict with the open trails that witness any failure.
"""

import logging

from database.database import read_json
from edq.identifiability import LocalIndependenceGraph, check_eliminability
from lab import EXIT_OK, Lab
from plugins import resolve_path

logger = logging.getLogger(__name__)

DEFAULT_GRAPH = "presets/graph-treatment.json"

GRAPH_ARGUMENTS = (
    (("graph",), {"nargs": "?", "default": DEFAULT_GRAPH, "help": "Graph JSON file (default: the bundled treatment graph)."}),
    (("--max-witnesses",), {"type": int, "default": 5, "help": "Open trails listed per failing member."}),
)


def check_graph_file(path, max_witnesses: int = 5):
    data = read_json(resolve_path(path))
    graph = LocalIndependenceGraph.from_dict(data)
    logger.info(
        f"Checking '{data.get('name', path)}': {graph.graph.number_of_nodes()} nodes, "
        f"{graph.graph.number_of_edges()} edges, unobserved order {list(graph.unobserved_order)}"
    )
    return check_eliminability(graph, max_witnesses=max_witnesses)


@Lab.on_command("graph-check", help="Check eliminability of a local independence graph.", arguments=GRAPH_ARGUMENTS)
def graph_check(lab: Lab, args) -> int:
    # A graph that is not eliminable is a valid answer, not a failed run.
    report = check_graph_file(args.graph, args.max_witnesses)
    print(report.render())
    return EXIT_OK
