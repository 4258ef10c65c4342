import contextlib
import time

import numpy as np
import pytest

from meltgraph.graph_build import graph_from_edges
from meltgraph.scan_synth import LayerScan


def toy_scan(n, track_id=None, seed=0):
    rng = np.random.default_rng(seed)
    track_id = np.zeros(n, dtype=np.int64) if track_id is None else np.asarray(track_id)
    return LayerScan(
        positions=rng.uniform(0, 1, size=(n, 2)),
        track_id=track_id,
        node_id=np.arange(n),
        X=rng.uniform(-1, 1, size=(n, 4)),
        Y=rng.uniform(-1, 1, size=(n, 4)),
        anomaly_mask=np.zeros(n, dtype=bool),
    )


def random_graph(n=5, p=0.5, seed=0, connected=True):
    """Small random ScanGraph; a ring is added so no node is isolated."""
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if connected:
        pairs += [(i, (i + 1) % n) for i in range(n)]
    track = rng.integers(0, 2, size=n)
    return graph_from_edges(toy_scan(n, track, seed), np.array(pairs).reshape(-1, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class DefaultRun:
    """Graph-T trained once on the default synthetic dataset."""

    def __init__(self):
        from meltgraph import experiment as ex
        from meltgraph.scan_synth import build_dataset

        start = time.perf_counter()
        self.cfg = ex.load_config()
        data = build_dataset(self.cfg.dataset_config())
        self.train_graphs = ex.graphs_for(self.cfg, data["train"])
        self.eval_graphs = ex.graphs_for(self.cfg, data["eval"])
        self.params, self.history = ex.fit(self.cfg, self.train_graphs)
        self.seconds = time.perf_counter() - start
        self._evals = {}

    def evaluation(self, variant, importance=False):
        from meltgraph import experiment as ex

        key = (variant, importance)
        if key not in self._evals:
            self._evals[key] = ex.evaluate_model(self.cfg, self.params, self.train_graphs,
                                                 self.eval_graphs, variant, importance=importance)
        return self._evals[key]


@pytest.fixture(scope="session")
def default_run():
    return DefaultRun()


def pytest_configure(config):
    config.acceptance_lines = {}


class _Record:
    detail = ""
    ok = False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as rec``: set ``rec.ok``/``rec.detail``;
    an exception inside the block records a failure."""

    @contextlib.contextmanager
    def run(number, title):
        rec = _Record()
        try:
            yield rec
        except BaseException as exc:
            rec.ok = False
            rec.detail = rec.detail or f"{type(exc).__name__}: {exc}"
            raise
        finally:
            line = f"criterion {number} [{'PASS' if rec.ok else 'FAIL'}] {title}: {rec.detail}"
            request.config.acceptance_lines[number] = line
            print(line)
        assert rec.ok, rec.detail

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
