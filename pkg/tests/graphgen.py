"""Random dependency graphs for the boundary and rollback equivalence checks."""

import random

from dse.coordinator import DependencyGraph
from dse.core import GraphFragment, Vertex


def random_graph(rng: random.Random, max_vertices: int = 12):
    """A view with up to ``max_vertices`` persistent vertices.

    Edges may point at persistent vertices (cycles allowed), at versions
    nobody reported, at pruned versions, and at stale world-lines.
    Returns ``(graph, edges, floor)``.
    """
    n_obj = rng.randint(1, 4)
    budget = rng.randint(0, max_vertices)
    floor = {o: rng.choice((0, 0, 0, 1, 2)) for o in range(1, n_obj + 1)}
    lineage = {}
    for o in range(1, n_obj + 1):
        k = rng.randint(0, budget) if o < n_obj else budget
        budget -= k
        wl = rng.randint(0, 2)
        vs = []
        for i in range(k):
            wl += rng.random() < 0.2
            vs.append(Vertex(o, wl, floor[o] + 1 + i))
        # occasionally leave a hole in the lineage
        if len(vs) > 2 and rng.random() < 0.15:
            del vs[rng.randrange(1, len(vs))]
        lineage[o] = vs
    everything = [v for vs in lineage.values() for v in vs]
    edges = {}
    for v in everything:
        out = set()
        for _ in range(rng.choice((0, 0, 1, 1, 2, 3))):
            r = rng.random()
            if r < 0.6 and len(everything) > 1:
                t = rng.choice(everything)
            else:
                o = rng.randint(1, n_obj)
                t = Vertex(o, rng.randint(0, 3), rng.randint(1, floor[o] + 4))
            if t != v and t.object != v.object:
                out.add(t)
        edges[v] = frozenset(out)
    g = DependencyGraph()
    for o, f in floor.items():
        if f:
            g.prune_through(o, f)
    for v, es in edges.items():
        g.add(GraphFragment(v, es))
    return g, edges, floor


def random_survivors(rng: random.Random, edges, obj):
    """A random subset of ``obj``'s vertices, usually a version prefix."""
    mine = sorted((v for v in edges if v.object == obj), key=lambda v: v.version)
    if rng.random() < 0.7:
        return mine[: rng.randint(0, len(mine))]
    return [v for v in mine if rng.random() < 0.5]
