"""Experiment configs and the gen / train / eval / sweep-anchor-layer commands.

A run is fully determined by one JSON config::

    {
      "dataset": {GeneratorConfig fields} | {"path": "data.jsonl"},
      "model":   {"backbone": "GIN", "num_mp_layers": 3, "hidden_dim": 32, "mlp_head_layers": 2},
      "train":   {"epochs": 300, "batch_size": 32, "lr": 0.001, "seeds": [0, 1, 2]},
      "methods": ["vanilla", "gduq_nfa", "gduq_hidden(2)", "gduq_readout",
                  "gduq_readout_pretrained", "deep_ensemble(3)"],
      "posthoc": ["none", "temperature", "vector"],
      "eval":    {"K": 10, "n_bins": 15, "seed": 0}
    }

Checkpoints live under ``<out>/<method dir>/seed<s>/`` (deep ensembles add
``member<m>/``; the pretrained readout variant keeps its frozen backbone in
``backbone/``). Every cell derives its random stream from a hash of
(method, seed), so parallel and serial runs produce identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from .anchoring import (
    AnchorSource,
    TrainConfig,
    build_frozen_anchor_set,
    infer_many,
    train,
)
from .graphs import DatasetError, DatasetSplits, GeneratorConfig, generate, load_dataset, save_dataset
from .metrics import accuracy, auroc, ece, gep_error, tune_gep_threshold
from .model import (
    AnchoringMode,
    ModelError,
    ModelSpec,
    forward,
    load_checkpoint,
    make_batch,
    save_checkpoint,
)
from .posthoc import (
    apply_temperature,
    apply_vector_scaling,
    at_boundary,
    fit_temperature,
    fit_vector_scaling,
)

log = logging.getLogger("anchorgnn")

SCHEMA_VERSION = "v1"
CSV_COLUMNS = ["method", "seed", "posthoc", "split", "n", "n_bins", "accuracy", "ece", "auroc_ood",
               "gep_error", "tau"]
SWEEP_COLUMNS = ["method", "layer", "seed", "id_accuracy", "id_ece", "ood_accuracy", "ood_ece"]
EVAL_SPLITS = ("id_test", "ood_test")
_METHOD_RE = re.compile(r"^(vanilla|gduq_nfa|gduq_readout|gduq_readout_pretrained|gduq_hidden\((\d+)\)|"
                        r"deep_ensemble\((\d+)\))$")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass(frozen=True)
class Method:
    name: str
    layer: int | None = None
    members: int | None = None

    @classmethod
    def parse(cls, s: str) -> "Method":
        m = _METHOD_RE.match(s.strip()) if isinstance(s, str) else None
        if not m:
            raise ConfigError(f"methods: unknown method {s!r}")
        if m.group(2):
            return cls("gduq_hidden", layer=int(m.group(2)))
        if m.group(3):
            return cls("deep_ensemble", members=int(m.group(3)))
        return cls(m.group(1))

    def __str__(self) -> str:
        if self.name == "gduq_hidden":
            return f"gduq_hidden({self.layer})"
        if self.name == "deep_ensemble":
            return f"deep_ensemble({self.members})"
        return self.name

    @property
    def dirname(self) -> str:
        return re.sub(r"[()]", "", str(self).replace("(", "_"))

    def anchoring(self, K: int) -> AnchoringMode:
        variant = {"vanilla": "none", "deep_ensemble": "none", "gduq_nfa": "node_feature",
                   "gduq_hidden": "hidden_layer", "gduq_readout": "readout",
                   "gduq_readout_pretrained": "readout"}[self.name]
        return AnchoringMode(variant=variant, layer=self.layer, num_inference_anchors=K,
                             pretrained_frozen_backbone=self.name == "gduq_readout_pretrained")


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class EvalSection:
    K: int = 10
    n_bins: int = 15
    seed: int = 0


@dataclass
class ModelSection:
    backbone: str = "GIN"
    num_mp_layers: int = 3
    hidden_dim: int = 32
    mlp_head_layers: int = 2
    nfa_concat: str = "original"


@dataclass
class ExperimentConfig:
    dataset: dict
    model: ModelSection
    train: TrainSection
    methods: list[Method]
    posthoc: list[str]
    eval: EvalSection
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    def generator_config(self) -> GeneratorConfig:
        if "path" in self.dataset:
            raise ConfigError("dataset: a path-based dataset has no generator section")
        return _section(GeneratorConfig, self.dataset, "dataset")

    def model_spec(self, splits: DatasetSplits, method: Method) -> ModelSpec:
        m = self.model
        spec = ModelSpec(input_dim=splits.feature_dim, num_classes=splits.num_classes, backbone=m.backbone,
                         num_mp_layers=m.num_mp_layers, hidden_dim=m.hidden_dim,
                         mlp_head_layers=m.mlp_head_layers,
                         task="graph" if splits.task == "graph_classification" else "node",
                         anchoring=method.anchoring(self.eval.K))
        spec.anchoring.nfa_concat = m.nfa_concat
        try:
            spec.validate()
        except ModelError as exc:
            raise ConfigError(f"model: {exc} (method {method})") from None
        return spec


def _section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    try:
        obj = cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for f in fields(cls):
        v = getattr(obj, f.name)
        if f.type in ("int", "float") and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{path}.{f.name}: expected a number, got {v!r}")
        if f.type == "int" and not isinstance(v, int):
            raise ConfigError(f"{path}.{f.name}: expected an integer, got {v!r}")
    return obj


REQUIRED = ("dataset", "model", "train", "methods", "eval")


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"{key}: missing required field")
    unknown = sorted(set(raw) - set(REQUIRED) - {"posthoc"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    train_raw = raw["train"]
    if not isinstance(train_raw, dict) or "seeds" not in train_raw:
        raise ConfigError("train.seeds: missing required field")
    tr = _section(TrainSection, train_raw, "train")
    if not isinstance(tr.seeds, list) or not tr.seeds or not all(isinstance(s, int) for s in tr.seeds):
        raise ConfigError("train.seeds: must be a nonempty list of integers")
    if tr.epochs < 1 or tr.batch_size < 1 or not tr.lr > 0:
        raise ConfigError("train: epochs, batch_size and lr must be positive")
    ev = _section(EvalSection, raw["eval"], "eval")
    if ev.K < 1 or ev.n_bins < 1:
        raise ConfigError("eval: K and n_bins must be >= 1")
    model = _section(ModelSection, raw["model"], "model")
    if not isinstance(raw["methods"], list) or not raw["methods"]:
        raise ConfigError("methods: must be a nonempty list")
    methods = [Method.parse(m) for m in raw["methods"]]
    for m in methods:
        if m.name == "deep_ensemble" and m.members < 2:
            raise ConfigError("methods: deep_ensemble needs M >= 2 members")
        if m.name == "gduq_hidden" and not 2 <= m.layer <= model.num_mp_layers:
            raise ConfigError(f"methods: gduq_hidden({m.layer}) needs 2 <= r <= {model.num_mp_layers}")
    posthoc = raw.get("posthoc", ["none"])
    bad = [p for p in posthoc if p not in ("none", "temperature", "vector")]
    if bad or not posthoc:
        raise ConfigError(f"posthoc: unknown {bad or '[]'}")
    if not isinstance(raw["dataset"], dict):
        raise ConfigError("dataset: expected an object")
    cfg = ExperimentConfig(raw["dataset"], model, tr, methods, list(posthoc), ev, raw)
    if "path" not in cfg.dataset:
        gc = cfg.generator_config()
        try:
            gc.validate()
        except DatasetError as exc:
            raise ConfigError(f"dataset.{exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return parse_config(raw)


def stream_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of labels (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def member_seed(seed: int, m: int) -> int:
    return seed if m == 0 else stream_seed("member", seed, m)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- gen -----------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, out_path) -> DatasetSplits:
    splits = generate(cfg.generator_config())
    save_dataset(splits, out_path)
    return splits


def load_data(cfg: ExperimentConfig, data_path=None) -> DatasetSplits:
    if data_path is not None:
        return load_dataset(data_path)
    if "path" in cfg.dataset:
        return load_dataset(cfg.dataset["path"])
    return generate(cfg.generator_config())


# -- train ---------------------------------------------------------------------

def _train_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, seed=seed)


def _val_nodes(splits: DatasetSplits):
    return splits.masks.get("id_val") if splits.task == "node_classification" else None


def train_cell(cfg: ExperimentConfig, splits: DatasetSplits, method: Method, seed: int, out_dir) -> dict:
    """Train one (method, seed) cell and write its checkpoint(s). Returns timing info."""
    cell = Path(out_dir) / method.dirname / f"seed{seed}"
    spec = cfg.model_spec(splits, method)
    stream = stream_seed(str(method), seed)
    extra = {"method": str(method), "seed": seed, "stream": stream}
    timing = {}
    if method.name == "deep_ensemble":
        for m in range(method.members):
            res = train(spec, splits, _train_cfg(cfg, member_seed(seed, m)))
            save_checkpoint(cell / f"member{m}", spec, res.params, None, {**extra, "member": m})
        return timing
    if method.name == "gduq_readout_pretrained":
        base = train(spec.without_anchoring(), splits, _train_cfg(cfg, seed))
        save_checkpoint(cell / "backbone", spec.without_anchoring(), base.params, None, extra)
        res = train(spec, splits, _train_cfg(cfg, seed), backbone=base.params)
        timing = {"backbone_seconds": base.seconds, "head_seconds": res.seconds}
    else:
        res = train(spec, splits, _train_cfg(cfg, seed))
    src = None
    v = spec.anchoring.variant
    if v == "node_feature":
        src = res.gaussian.to_json()
    elif v in ("readout", "hidden_layer"):
        fs = build_frozen_anchor_set(spec, res.params, splits.id_val, cfg.eval.K,
                                     np.random.default_rng(stream), val_nodes=_val_nodes(splits))
        src = fs.to_json()
    save_checkpoint(cell, spec, res.params, src, {**extra, **timing})
    return timing


def cmd_train(cfg: ExperimentConfig, splits: DatasetSplits, out_dir, jobs: int = 1) -> list[dict]:
    cells = [(m, s) for m in cfg.methods for s in cfg.train.seeds]
    return _map(lambda c: train_cell(cfg, splits, c[0], c[1], out_dir), cells, jobs)


# -- eval ----------------------------------------------------------------------

def _labels(splits: DatasetSplits, split: str) -> np.ndarray:
    if splits.task == "node_classification":
        return splits.train[0].node_labels[splits.masks[split]]
    return np.array([g.graph_label for g in splits.split(split)], dtype=np.int64)


def _load(path: Path, method: Method, seed: int):
    if not (path / "manifest.json").exists():
        raise MissingArtifact(f"missing checkpoint for (method={method}, seed={seed}) at {path}")
    return load_checkpoint(path)


def _predict_split(splits: DatasetSplits, split: str, fn) -> tuple[np.ndarray, np.ndarray]:
    """(logits, probs) for one split, where ``fn(graphs) -> (logits, probs)``."""
    if splits.task == "node_classification":
        logits, probs = fn([splits.train[0]])
        idx = splits.masks[split]
        return logits[idx], probs[idx]
    return fn(splits.split(split))


def cell_outputs(cfg: ExperimentConfig, splits: DatasetSplits, method: Method, seed: int,
                 ckpt_dir) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per split: (logit-like scores for post-hoc fitting, predicted probabilities)."""
    cell = Path(ckpt_dir) / method.dirname / f"seed{seed}"
    stream = stream_seed(str(method), seed)
    if method.name == "deep_ensemble":
        members = [_load(cell / f"member{m}", method, seed) for m in range(method.members)]

        def fn(graphs):
            b = make_batch(graphs)
            zs = [forward(sp_, p_, b).data for sp_, p_, _, _ in members]
            probs = np.mean([ad.softmax(z) for z in zs], axis=0)
            # a single member is just that model, raw logits included
            logits = zs[0] if len(zs) == 1 else np.log(np.maximum(probs, 1e-300))
            return logits, probs
    else:
        spec, params, src_json, _ = _load(cell, method, seed)
        src = AnchorSource.from_json(src_json) if src_json else None
        if src is not None and src.kind == "gaussian":
            src = src.with_eval(cfg.eval.K, stream_seed("eval", cfg.eval.seed, str(method), seed))

        def fn(graphs):
            if spec.anchoring.variant == "none":
                z = forward(spec, params, make_batch(graphs)).data
                return z, ad.softmax(z)
            pred = infer_many(spec, params, graphs, src)
            return np.log(np.maximum(pred.mu_calib, 1e-300)), pred.mu_calib
    return {s: _predict_split(splits, s, fn) for s in ("id_val",) + EVAL_SPLITS}


def _calibrate(kind: str, outputs, val_labels, label: str = ""):
    val_logits = outputs["id_val"][0]
    if kind == "none":
        return None, {s: outputs[s][1] for s in outputs}
    if kind == "temperature":
        scaler = fit_temperature(val_logits, val_labels, warn=False)
        if at_boundary(scaler.T):
            log.warning("%s: temperature hit the search boundary (T = %.4g)", label, scaler.T)
        return scaler.to_json(), {s: apply_temperature(scaler, outputs[s][0]) for s in outputs}
    scaler = fit_vector_scaling(val_logits, val_labels)
    return scaler.to_json(), {s: apply_vector_scaling(scaler, outputs[s][0]) for s in outputs}


def eval_cell(cfg: ExperimentConfig, splits: DatasetSplits, method: Method, seed: int, ckpt_dir) -> list[dict]:
    outputs = cell_outputs(cfg, splits, method, seed, ckpt_dir)
    labels = {s: _labels(splits, s) for s in outputs}
    rows = []
    for kind in cfg.posthoc:
        scaler, probs = _calibrate(kind, outputs, labels["id_val"], f"{method} seed {seed}")
        tau = tune_gep_threshold((probs["id_val"], labels["id_val"]))
        au = auroc(probs["id_test"].max(axis=1), probs["ood_test"].max(axis=1))
        for split in EVAL_SPLITS:
            rec = (probs[split], labels[split])
            rows.append({
                "method": str(method), "seed": seed, "posthoc": kind, "split": split,
                "n": int(len(labels[split])), "n_bins": cfg.eval.n_bins,
                "accuracy": accuracy(rec), "ece": ece(rec, cfg.eval.n_bins), "auroc_ood": au,
                "gep_error": gep_error(rec, None, tau), "tau": tau,
                "posthoc_params": scaler,
            })
    return rows


def _summary(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["posthoc"], r["split"]), []).append(r)
    out = []
    for (method, posthoc, split), rs in groups.items():
        entry = {"method": method, "posthoc": posthoc, "split": split, "num_seeds": len(rs)}
        for key in ("accuracy", "ece", "auroc_ood", "gep_error"):
            vals = np.array([r[key] for r in rs], dtype=np.float64)
            entry[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
        out.append(entry)
    return out


def cmd_eval(cfg: ExperimentConfig, splits: DatasetSplits, ckpt_dir, out_path, jobs: int = 1) -> dict:
    cells = [(m, s) for m in cfg.methods for s in cfg.train.seeds]
    for m, s in cells:
        cell = Path(ckpt_dir) / m.dirname / f"seed{s}"
        probe = cell / "member0" if m.name == "deep_ensemble" else cell
        if not (probe / "manifest.json").exists():
            raise MissingArtifact(f"missing checkpoint for (method={m}, seed={s}) at {probe}")
    results = _map(lambda c: eval_cell(cfg, splits, c[0], c[1], ckpt_dir), cells, jobs)
    rows = [r for rs in results for r in rs]
    report = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": cfg.digest,
        "task": splits.task,
        "shift_kind": splits.shift_kind,
        "seeds": list(cfg.train.seeds),
        "eval_seed": cfg.eval.seed,
        "streams": {f"{m}|{s}": stream_seed(str(m), s) for m, s in cells},
        "K": cfg.eval.K,
        "n_bins": cfg.eval.n_bins,
        "rows": rows,
        "summary": _summary(rows),
    }
    validate_report(report)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    out.with_suffix(".csv").write_text(rows_to_csv(rows, CSV_COLUMNS), encoding="utf-8")
    return report


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# -- sweep ---------------------------------------------------------------------

def cmd_sweep_anchor_layer(cfg: ExperimentConfig, splits: DatasetSplits, out_path, ckpt_dir,
                           jobs: int = 1) -> list[dict]:
    """Vanilla, hidden-layer anchoring at every r in 2..L, and readout anchoring: one CSV row per (method, seed)."""
    L = cfg.model.num_mp_layers
    methods = [Method("vanilla")] + [Method("gduq_hidden", layer=r) for r in range(2, L + 1)]
    if splits.task == "graph_classification":
        methods.append(Method("gduq_readout"))
    if L < 2:
        log.warning("num_mp_layers=%d < 2: no hidden layer to anchor; sweeping vanilla and readout only", L)
    sweep = ExperimentConfig(cfg.dataset, cfg.model, cfg.train, methods, ["none"], cfg.eval, cfg.raw)
    cells = [(m, s) for m in methods for s in cfg.train.seeds]
    _map(lambda c: train_cell(sweep, splits, c[0], c[1], ckpt_dir), cells, jobs)
    results = _map(lambda c: eval_cell(sweep, splits, c[0], c[1], ckpt_dir), cells, jobs)
    rows = []
    for (m, s), rs in zip(cells, results):
        by_split = {r["split"]: r for r in rs}
        rows.append({"method": str(m), "layer": m.layer if m.layer is not None else "", "seed": s,
                     "id_accuracy": by_split["id_test"]["accuracy"], "id_ece": by_split["id_test"]["ece"],
                     "ood_accuracy": by_split["ood_test"]["accuracy"], "ood_ece": by_split["ood_test"]["ece"]})
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows, SWEEP_COLUMNS), encoding="utf-8")
    return rows


# -- report schema -------------------------------------------------------------

_NUM = {"type": "number"}
_STAT = {"type": "object", "required": ["mean", "std"],
         "properties": {"mean": _NUM, "std": {"type": "number", "minimum": 0}}}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "seeds", "eval_seed", "rows", "summary", "K", "n_bins"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "eval_seed": {"type": "integer"},
        "K": {"type": "integer", "minimum": 1},
        "n_bins": {"type": "integer", "minimum": 1},
        "rows": {"type": "array", "items": {
            "type": "object",
            "required": ["method", "seed", "posthoc", "split", "accuracy", "ece", "auroc_ood", "gep_error",
                         "n", "n_bins", "tau"],
            "properties": {
                "method": {"type": "string"},
                "seed": {"type": "integer"},
                "posthoc": {"enum": ["none", "temperature", "vector"]},
                "split": {"enum": list(EVAL_SPLITS)},
                "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                "ece": {"type": "number", "minimum": 0, "maximum": 1},
                "auroc_ood": {"type": "number", "minimum": 0, "maximum": 1},
                "gep_error": {"type": "number", "minimum": 0, "maximum": 1},
                "n": {"type": "integer", "minimum": 1},
                "n_bins": {"type": "integer", "minimum": 1},
                "tau": {"type": "number", "minimum": 0, "maximum": 1},
                "posthoc_params": {"oneOf": [
                    {"type": "null"},
                    {"type": "object", "required": ["kind", "T"], "properties": {"kind": {"const": "temperature"}}},
                    {"type": "object", "required": ["kind", "w", "b"], "properties": {"kind": {"const": "vector"}}},
                ]},
            },
        }},
        "summary": {"type": "array", "items": {
            "type": "object",
            "required": ["method", "posthoc", "split", "accuracy", "ece", "auroc_ood", "gep_error"],
            "properties": {k: _STAT for k in ("accuracy", "ece", "auroc_ood", "gep_error")},
        }},
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)

