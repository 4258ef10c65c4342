"""Time the compiled and pure-numpy kernel backends on a default-size layer.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from meltgraph import kernels
from meltgraph.graph_build import build_graph
from meltgraph.scan_synth import LayerSpec, generate_scan_path


def cases(graph, width=64, heads=4, seed=0):
    rng = np.random.default_rng(seed)
    n, e = graph.n_nodes, len(graph.src)
    q, k, v = (rng.standard_normal((n, width)) for _ in range(3))
    etab = rng.standard_normal((2, width))
    rows = rng.standard_normal((e, width))
    pos = graph.scan.positions
    src, dst, et = graph.src, graph.dst, graph.edge_class

    def setup(mod):
        _, alpha = mod.attention_forward(q, k, v, etab, et, src, dst, heads)
        g = rng.standard_normal((n, width))
        return {
            "segment_sum": lambda: mod.segment_sum(rows, dst, n),
            "segment_max": lambda: mod.segment_max(rows, dst, n),
            "knn k=6": lambda: mod.knn(pos, 6),
            "attention fwd": lambda: mod.attention_forward(q, k, v, etab, et, src, dst, heads),
            "attention bwd": lambda: mod.attention_backward(g, q, k, v, etab, et, alpha, src, dst,
                                                            heads),
        }
    return setup


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    graph = build_graph(generate_scan_path(LayerSpec()))
    print(f"layer: {graph.n_nodes} nodes, {len(graph.src)} directed edges, width 64, 4 heads")
    available = kernels.backends()
    if "cython" not in available:
        print("compiled backend not built; showing the numpy fallback only")
    setup = cases(graph)
    timings = {}
    for name, mod in available.items():
        for label, fn in setup(mod).items():
            fn()  # warm up
            timings[(label, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    labels = list(setup(next(iter(available.values()))))
    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label in labels:
        py = timings[(label, "python")] * 1e3
        cy = timings.get((label, "cython"))
        if cy is None:
            print(f"{label:<16}{py:>12.2f}{'-':>12}{'-':>10}")
        else:
            print(f"{label:<16}{py:>12.2f}{cy * 1e3:>12.2f}{py / (cy * 1e3):>9.1f}x")


if __name__ == "__main__":
    main()
