"""Run configuration, dataset I/O and the generate/train/evaluate/compare steps.

Everything here is a deterministic function of the configuration and the
files it reads; outputs are written atomically (temp file, then rename).
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .anomaly import (
    VARIANTS, gaussian_fpr_estimate, nominal_reference, qq_points, score_pipeline,
    select_threshold,
)
from .errors import ConfigError, DataContractError
from .graph_build import build_graph
from .metrics import (
    EvalReport, auroc, average_precision, confusion, permutation_importance,
)
from .models import KINDS, ModelSpec, params_from_json, params_to_json
from .scan_synth import (
    FEATURES, AnomalySpec, DatasetConfig, LayerSpec, layer_from_csv, layer_seed,
    layer_to_csv, make_layer,
)
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# Comparison rows: label -> (model kind, score variant)
COMPARE_ROWS = {
    "AE": ("autoencoder", "signed_smoothed"),
    "FC": ("fc", "signed_smoothed"),
    "GAT": ("gat", "signed_smoothed"),
    "GCN": ("gcn", "signed_smoothed"),
    "GIN": ("gin", "signed_smoothed"),
    "Graph-T-A": ("graph_transformer", "absolute"),
    "Graph-T-Z": ("graph_transformer", "signed_raw"),
    "Graph-T": ("graph_transformer", "signed_smoothed"),
}
COMPARE_COLUMNS = ("model", "AP", "AUROC", "F1", "FP", "FN", "TP", "TN", "Loss")
_ALIASES = {"ae": "AE", "autoencoder": "AE", "graph_transformer": "Graph-T"}


@dataclass(frozen=True)
class GraphConfig:
    k: int = 6
    self_loops: bool = True
    smoothing_passes: int = 1

    def validate(self):
        if self.k < 1:
            raise ConfigError("graph.k must be at least 1")
        if self.smoothing_passes < 1:
            raise ConfigError("graph.smoothing_passes must be at least 1")
        return self


@dataclass(frozen=True)
class EvalConfig:
    variant: str = "signed_smoothed"
    # "eval": pick the threshold on the labelled eval layers (optimistic);
    # "holdout": pick it on the first half of them, report on the rest
    threshold_mode: str = "eval"
    two_sided: bool = False
    importance: bool = True
    importance_metric: str = "ap"
    importance_repeats: int = 5

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.threshold_mode not in ("eval", "holdout"):
            raise ConfigError("threshold_mode must be 'eval' or 'holdout'")
        if self.importance_metric not in ("ap", "mse"):
            raise ConfigError("importance_metric must be 'ap' or 'mse'")
        if self.importance_repeats < 1:
            raise ConfigError("importance_repeats must be at least 1")
        return self


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    # per-kind overrides of `model`, e.g. {"gat": {"hidden_dim": 32}}
    models: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def model_spec(self, kind=None):
        spec = replace(self.model, kind=kind or self.model.kind)
        spec = _build(ModelSpec, {**dataclasses.asdict(spec), **self.models.get(spec.kind, {})},
                      f"models.{spec.kind}")
        return spec.validate()

    def train_config(self):
        return replace(self.train, seed=self.seed).validate()

    def dataset_config(self):
        return replace(self.dataset, seed=self.seed)


def _check_keys(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(names)}")


def _build(cls, doc, where):
    _check_keys(cls, doc, where)
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc) -> RunConfig:
    _check_keys(RunConfig, doc, "config")
    ds = dict(doc.get("dataset", {}))
    layer = ds.pop("layer", {})
    if "seed" in layer:
        raise ConfigError("dataset.layer.seed is derived from the run seed; set 'seed' instead")
    anomaly = dict(ds.pop("anomaly", {}))
    for key in ("run_length_nodes", "track_span"):
        if key in anomaly:
            anomaly[key] = tuple(anomaly[key])
    if "seed" in ds:
        raise ConfigError("dataset.seed is the run seed; set 'seed' instead")
    dataset = _build(DatasetConfig, {**ds, "layer": _build(LayerSpec, layer, "dataset.layer"),
                                     "anomaly": _build(AnomalySpec, anomaly, "dataset.anomaly")},
                     "dataset")
    tr = doc.get("train", {})
    if "seed" in tr:
        raise ConfigError("train.seed is the run seed; set 'seed' instead")
    models = doc.get("models", {})
    if not isinstance(models, dict) or set(models) - set(KINDS):
        raise ConfigError(f"models: keys must be model kinds {KINDS}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    cfg = RunConfig(
        seed=seed,
        dataset=dataset,
        graph=_build(GraphConfig, doc.get("graph", {}), "graph").validate(),
        model=_build(ModelSpec, doc.get("model", {}), "model").validate(),
        models=models,
        train=_build(TrainConfig, tr, "train").validate(),
        evaluate=_build(EvalConfig, doc.get("evaluate", {}), "evaluate").validate(),
    )
    for kind in models:
        cfg.model_spec(kind)
    dataset.layer.validate()
    dataset.anomaly.validate()
    return cfg


def load_config(path=None, seed=None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if seed is not None:
        doc = {**doc, "seed": seed}
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["dataset"].pop("seed")
    doc["dataset"]["layer"].pop("seed")
    doc["train"].pop("seed")
    return json.loads(json.dumps(doc))  # tuples -> lists


# ---------------------------------------------------------------- file output


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(doc):
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


# ---------------------------------------------------------------- dataset


def generate(cfg: RunConfig, out_dir, force=False, n_train=None, n_eval=None):
    """Write layer CSVs and ``manifest.json``; returns the manifest dict."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    dcfg = cfg.dataset_config()
    if n_train is not None:
        dcfg = replace(dcfg, n_train=n_train)
    if n_eval is not None:
        dcfg = replace(dcfg, n_eval=n_eval)
    if dcfg.n_train < 0 or dcfg.n_eval < 0:
        raise ConfigError("layer counts must be non-negative")
    entries = []
    for split, count, offset in (("train", dcfg.n_train, 0), ("eval", dcfg.n_eval, dcfg.n_train)):
        for i in range(count):
            scan = make_layer(dcfg, offset + i, anomalous=split == "eval")
            name = f"{split}_{i:03d}.csv"
            write_atomic(out / name, layer_to_csv(scan))
            entries.append({"file": name, "split": split, "index": offset + i,
                            "seed": layer_seed(dcfg.seed, offset + i), "n_nodes": scan.n_nodes,
                            "n_anomalous": int(scan.anomaly_mask.sum())})
            log.info("wrote %s (%d nodes, %d anomalous)", name, scan.n_nodes,
                     entries[-1]["n_anomalous"])
    cdoc = config_to_dict(cfg)
    cdoc["dataset"].update(n_train=dcfg.n_train, n_eval=dcfg.n_eval)
    manifest = {"format": 1, "seed": dcfg.seed, "config": cdoc, "layers": entries}
    write_atomic(out / "manifest.json", _json(manifest))
    return manifest


def layer_names(data_dir, split):
    """File names of one split, in manifest order."""
    path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataContractError(f"no manifest.json in {data_dir}") from None
    except json.JSONDecodeError as exc:
        raise DataContractError(f"{path} is not valid JSON: {exc}") from None
    return [e["file"] for e in manifest["layers"] if e["split"] == split]


def load_layers(data_dir, split):
    return [read_layer(Path(data_dir) / name) for name in layer_names(data_dir, split)]


def read_layer(path):
    try:
        return layer_from_csv(Path(path).read_text())
    except FileNotFoundError:
        raise DataContractError(f"layer file {path} not found") from None


def graphs_for(cfg: RunConfig, scans):
    return [build_graph(s, cfg.graph.k) for s in scans]


# ---------------------------------------------------------------- train


def fit(cfg: RunConfig, graphs, kind=None):
    spec = cfg.model_spec(kind)
    params, history = train(spec, graphs, cfg.train_config())
    return params, history


def write_training(out_dir, params, history):
    out = Path(out_dir)
    write_atomic(out / "params.json", params_to_json(params))
    write_atomic(out / "loss.csv", _csv(("epoch", "loss"), ((i, float(v)) for i, v in enumerate(history))))


def read_params(path):
    try:
        return params_from_json(Path(path).read_text())
    except FileNotFoundError:
        raise DataContractError(f"params file {path} not found") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataContractError(f"params file {path} is malformed: {exc}") from None


# ---------------------------------------------------------------- evaluate


@dataclass
class Evaluation:
    report: EvalReport
    scores: list          # per eval layer: AnomalyScores
    layers: list          # per eval layer: LayerScan
    standardized: np.ndarray  # final scores over all eval layers, reference units
    labels: np.ndarray
    threshold_report: object
    nominal_reference: np.ndarray  # standardised final scores on training layers


def _score_kw(cfg):
    return {"self_loops": cfg.graph.self_loops, "passes": cfg.graph.smoothing_passes}


def evaluate_model(cfg: RunConfig, params, train_graphs, eval_graphs, variant=None,
                   model_name=None, importance=None) -> Evaluation:
    """Score eval layers, choose the max-F1 threshold and collect metrics.

    Final scores are standardised by the mean and std of nominal scores on
    the training layers, so thresholds are in reference standard deviations.
    """
    ev = cfg.evaluate
    variant = variant or ev.variant
    if not eval_graphs:
        raise DataContractError("no evaluation layers")
    if not train_graphs:
        raise DataContractError("evaluation needs the nominal training layers as reference")
    kw = _score_kw(cfg)
    mu, sd = nominal_reference(params, train_graphs, variant, **kw)
    ref = np.concatenate([(score_pipeline(params, g, variant, **kw).selected - mu) / sd
                          for g in train_graphs])
    scores = [score_pipeline(params, g, variant, **kw) for g in eval_graphs]
    z = np.concatenate([(s.selected - mu) / sd for s in scores])
    labels = np.concatenate([g.scan.anomaly_mask for g in eval_graphs])

    if ev.threshold_mode == "holdout":
        if len(eval_graphs) < 2:
            raise DataContractError("holdout threshold mode needs at least 2 eval layers")
        cut = sum(g.n_nodes for g in eval_graphs[: (len(eval_graphs) + 1) // 2])
        tr = select_threshold(z[:cut], labels[:cut], two_sided=ev.two_sided)
        rz, rl = z[cut:], labels[cut:]
    else:
        tr = select_threshold(z, labels, two_sided=ev.two_sided)
        rz, rl = z, labels
    c = confusion(rz, rl, tr.threshold, two_sided=ev.two_sided)
    ranked = np.abs(rz) if ev.two_sided else rz
    imp, imp_raw = {}, {}
    if ev.importance if importance is None else importance:
        imp, imp_raw = permutation_importance(params, eval_graphs, FEATURES, ev.importance_metric,
                                              ev.importance_repeats, cfg.seed, variant, **kw)
    report = EvalReport(
        model=model_name or params.spec.kind, variant=variant,
        ap=average_precision(ranked, rl), auroc=auroc(ranked, rl), f1=c.f1,
        fp=c.fp, fn=c.fn, tp=c.tp, tn=c.tn, threshold=tr.threshold,
        loss=params.meta.get("final_loss"), precision=c.precision, recall=c.recall,
        gaussian_fpr_estimate=gaussian_fpr_estimate(ref, tr.threshold),
        empirical_fpr=c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0,
        score_mean=mu, score_std=sd,
        feature_importances=imp, feature_importances_raw=imp_raw)
    return Evaluation(report, scores, [g.scan for g in eval_graphs], z, labels, tr, ref)


def write_evaluation(out_dir, evaluation: Evaluation, eval_names, tag):
    out = Path(out_dir)
    r = evaluation.report
    write_atomic(out / f"report_{tag}.json", _json(r.to_dict()))
    for name, s, scan in zip(eval_names, evaluation.scores, evaluation.layers):
        base = s.z_abs if s.variant == "absolute" else s.z
        flagged = (s.selected - r.score_mean) / r.score_std
        flagged = (np.abs(flagged) if evaluation.threshold_report.two_sided else flagged) >= r.threshold
        rows = ((int(scan.node_id[i]), float(base[i]), float(s.selected[i]),
                 int(scan.anomaly_mask[i]), int(flagged[i])) for i in range(scan.n_nodes))
        write_atomic(out / f"scores_{tag}_{Path(name).stem}.csv",
                     _csv(("node_id", "z", "z_smoothed", "label", "flagged"), rows))
    write_atomic(out / f"pr_{tag}.csv",
                 _csv(("threshold", "precision", "recall"), evaluation.threshold_report.curve))
    rows = []
    for group, mask in (("nominal", ~evaluation.labels), ("anomalous", evaluation.labels)):
        if mask.sum() >= 2:
            rows += [(group, float(a), float(b)) for a, b in qq_points(evaluation.standardized[mask])]
    write_atomic(out / f"qq_{tag}.csv", _csv(("group", "theoretical", "empirical"), rows))


# ---------------------------------------------------------------- compare


def parse_models(text):
    """Comma-separated row labels or model kinds -> ordered row labels."""
    if text is None:
        return list(COMPARE_ROWS)
    lookup = {k.lower(): k for k in COMPARE_ROWS}
    lookup.update({kind: label for label, (kind, v) in COMPARE_ROWS.items()
                   if v == "signed_smoothed"})
    lookup.update(_ALIASES)
    chosen = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        label = lookup.get(token.lower()) or lookup.get(token)
        if label is None:
            raise ConfigError(f"unknown model {token!r}; choose from {list(COMPARE_ROWS)}")
        if label not in chosen:
            chosen.append(label)
    if not chosen:
        raise ConfigError("no models selected")
    return [k for k in COMPARE_ROWS if k in chosen]


def compare(cfg: RunConfig, train_graphs, eval_graphs, rows=None, importance=False):
    """Train each needed model kind once and evaluate every requested row."""
    rows = rows or list(COMPARE_ROWS)
    trained = {}
    results = []
    for label in rows:
        kind, variant = COMPARE_ROWS[label]
        if kind not in trained:
            log.info("training %s", kind)
            trained[kind] = fit(cfg, train_graphs, kind)[0]
        ev = evaluate_model(cfg, trained[kind], train_graphs, eval_graphs, variant, label,
                            importance=importance)
        results.append(ev)
    return results, trained


def compare_csv(results):
    rows = []
    for ev in results:
        r = ev.report
        rows.append((r.model, float(r.ap), float(r.auroc), float(r.f1), r.fp, r.fn, r.tp, r.tn,
                     float(r.loss) if r.loss is not None else ""))
    return _csv(COMPARE_COLUMNS, rows)
