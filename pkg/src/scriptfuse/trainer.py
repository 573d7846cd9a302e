"""Composite objective, Adam, early-stopped training, weighted F1 and grid search."""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .encoder import snapshot_frozen
from .errors import ConfigError, DataError, NumericError, ScriptFuseError
from .fusion import ce_loss
from .model import ABLATIONS, build_model, predict_proba
from .text import LABELS, ScriptPairExample, build_vocab, make_batch
from .transport import alignment_loss, batch_emd, regularization_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.7
    gamma: float = 0.7
    align_layer: int = 1
    learning_rate: float = 2e-5
    batch_size: int = 32
    max_len: int = 100
    patience: int = 3
    max_epochs: int = 30
    seed: int = 0
    query_script: str = "roman"
    ablation: str = "none"
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    fusion_heads: int = 4
    pooling: str = "mean"
    min_frequency: int = 1
    # compute SA/REG for logging even when their weight is zero
    track_components: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta and gamma must be non-negative")
        if not 1 <= self.align_layer <= self.num_layers:
            raise ConfigError(f"align_layer {self.align_layer} outside [1, {self.num_layers}]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.max_len < 2:
            raise ConfigError("batch_size and max_epochs must be >= 1, max_len >= 2")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.query_script not in ("roman", "deva"):
            raise ConfigError(f"query_script must be roman or deva, got {self.query_script!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    def with_ablation(self, ablation: str) -> "TrainConfig":
        """Config for one Table-2-style row: ``no-align`` zeroes alpha, ``no-reg`` zeroes gamma."""
        if ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
        changes: dict[str, Any] = {"ablation": ablation}
        if ablation == "no-reg":
            changes["gamma"] = 0.0
        elif ablation in ("no-align", "baseline-roman", "baseline-deva"):
            changes["alpha"] = 0.0
        return replace(self, **changes)


@dataclass
class RunResult:
    config: dict[str, Any]
    epochs: list[dict[str, Any]] = field(default_factory=list)
    best_val_f1: float = 0.0
    best_epoch: int = 0
    test_f1: float = 0.0
    stopped_epoch: int = 0
    final_reg_emd: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunResult":
        return cls(**data)


def _check_finite(name: str, value) -> float:
    v = value.item() if isinstance(value, T.Tensor) else float(value)
    if not math.isfinite(v):
        raise NumericError(f"non-finite {name} loss: {v}")
    return v


def combined_loss(ce, l_sa, l_reg, config: TrainConfig):
    """``ce + alpha * (beta * l_sa + gamma * l_reg)``; works on floats or tensors.

    Terms whose weight is zero are left out entirely, so they contribute
    neither value nor gradient.
    """
    _check_finite("CE", ce)
    if l_sa is not None:
        _check_finite("SA", l_sa)
    if l_reg is not None:
        _check_finite("REG", l_reg)
    a, b, g = config.alpha, config.beta, config.gamma
    if isinstance(ce, T.Tensor):
        total = ce
        if a * b and l_sa is not None:
            total = total + T.scale(l_sa, a * b)
        if a * g and l_reg is not None:
            total = total + T.scale(l_reg, a * g)
        return total
    align = b * (l_sa or 0.0) + g * (l_reg or 0.0)
    return ce + a * align


class Adam:
    """Adam with bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: Sequence[T.Tensor], lr: float = 2e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state: Adam, lr: float | None = None) -> None:
    """One Adam update of ``params`` in place; missing grads count as zero."""
    lr = state.lr if lr is None else lr
    state.t += 1
    c1 = 1.0 - state.b1 ** state.t
    c2 = 1.0 - state.b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = state.b1 * state.m[i] + (1.0 - state.b1) * g
        state.v[i] = state.b2 * state.v[i] + (1.0 - state.b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(predictions, labels, num_classes: int = len(LABELS)) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def classification_report(predictions, labels, num_classes: int = len(LABELS)) -> dict[str, Any]:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(predictions) != len(labels):
        raise DataError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("cannot score an empty prediction set")
    if ((labels < 0) | (labels >= num_classes)).any() or ((predictions < 0) | (predictions >= num_classes)).any():
        raise DataError(f"labels must lie in [0, {num_classes})")
    cm = confusion_matrix(predictions, labels, num_classes)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    weighted = float((f1 * support).sum() / support.sum())
    return {
        "weighted_f1": weighted,
        "precision": precision.tolist(),
        "recall": recall.tolist(),
        "f1": f1.tolist(),
        "support": support.tolist(),
        "confusion": cm.tolist(),
    }


def weighted_f1(predictions, labels) -> float:
    """Support-weighted mean of per-class F1 over the three sentiment classes."""
    return classification_report(predictions, labels)["weighted_f1"]


# ---------------------------------------------------------------------------
# training


def _batches(examples, vocabs, config, order=None):
    idx = np.arange(len(examples)) if order is None else order
    for start in range(0, len(idx), config.batch_size):
        yield make_batch([examples[i] for i in idx[start:start + config.batch_size]], vocabs, config.max_len)


def evaluate(model, examples, vocabs, config) -> dict[str, Any]:
    probs = predict_proba(model, examples, vocabs, config.max_len)
    return classification_report(probs.argmax(axis=1), [ex.label_id for ex in examples])


def mean_reg_distance(model, frozen, examples, vocabs, config) -> float:
    """Mean EMD between live and frozen Devanagari states at the alignment layer."""
    deva = model.encoders.get("deva")
    if deva is None or frozen is None:
        return float("nan")
    total, n = 0.0, 0
    with T.no_grad():
        for batch in _batches(examples, vocabs, config):
            live = deva(batch.deva_ids, batch.deva_mask)
            ref = frozen(batch.deva_ids, batch.deva_mask)
            total += regularization_loss(live, ref, config.align_layer).item() * len(batch)
            n += len(batch)
    return total / n


def train_loop(model, splits: dict[str, Sequence[ScriptPairExample]], config: TrainConfig, vocabs,
               alignment: bool = True, snapshot_hook=None) -> RunResult:
    """Train with early stopping on validation weighted F1 and report test F1 of the best epoch.

    ``alignment=False`` removes the transport machinery altogether (no EMD is
    computed even for logging). ``snapshot_hook`` is called with the frozen
    reference encoder right after it is taken.
    """
    train, val, test = splits["train"], splits["validation"], splits["test"]
    if not train or not val or not test:
        raise DataError("train, validation and test splits must be non-empty")
    is_fusion = getattr(model, "kind", "") == "fusion"
    frozen = snapshot_frozen(model.encoders["deva"]) if is_fusion else None
    if snapshot_hook is not None and frozen is not None:
        snapshot_hook(frozen)
    params = [p for p in model.named_parameters().values() if p.requires_grad]
    opt = Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    use_sa = is_fusion and alignment and (config.track_components or config.alpha * config.beta > 0)
    use_reg = is_fusion and alignment and (config.track_components or config.alpha * config.gamma > 0)

    result = RunResult(config=config.to_dict())
    best_f1 = -1.0
    best_state = None
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        sums = {"ce": 0.0, "sa": 0.0, "reg": 0.0, "loss": 0.0}
        n_seen = 0
        for batch in _batches(train, vocabs, config, order):
            out = model(batch)
            ce = ce_loss(out.probs, batch.labels)
            sa = reg = None
            if use_sa:
                sa = alignment_loss(out.states["roman"], out.states["deva"], config.align_layer)
            if use_reg:
                with T.no_grad():
                    ref = frozen(batch.deva_ids, batch.deva_mask)
                reg = regularization_loss(out.states["deva"], ref, config.align_layer)
            try:
                loss = combined_loss(ce, sa, reg, config)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch}: {exc}; components ce={ce.item()!r} "
                    f"sa={None if sa is None else sa.item()!r} reg={None if reg is None else reg.item()!r}"
                ) from None
            opt.zero_grad()
            loss.backward()
            opt.step()
            k = len(batch)
            n_seen += k
            sums["ce"] += ce.item() * k
            sums["loss"] += loss.item() * k
            if sa is not None:
                sums["sa"] += sa.item() * k
            if reg is not None:
                sums["reg"] += reg.item() * k
        val_f1 = evaluate(model, val, vocabs, config)["weighted_f1"]
        record = {
            "epoch": epoch,
            "ce": sums["ce"] / n_seen,
            "sa": sums["sa"] / n_seen if use_sa else None,
            "reg": sums["reg"] / n_seen if use_reg else None,
            "loss": sums["loss"] / n_seen,
            "val_f1": val_f1,
        }
        result.epochs.append(record)
        log.info("epoch %d ce=%.4f sa=%s reg=%s val_f1=%.4f", epoch, record["ce"], record["sa"],
                 record["reg"], val_f1)
        if val_f1 > best_f1:
            best_f1 = val_f1
            result.best_epoch = epoch
            best_state = [p.data.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    result.stopped_epoch = len(result.epochs)
    for p, data in zip(params, best_state):
        p.data = data
    result.best_val_f1 = best_f1
    result.test_f1 = evaluate(model, test, vocabs, config)["weighted_f1"]
    if is_fusion and alignment:
        result.final_reg_emd = mean_reg_distance(model, frozen, val, vocabs, config)
    model.frozen = frozen
    return result


def early_stopping_trace(val_scores: Sequence[float], patience: int) -> tuple[int, int]:
    """``(stopped_epoch, best_epoch)`` the training loop would produce for these validation scores."""
    best, best_epoch, since = -1.0, 0, 0
    for epoch, score in enumerate(val_scores, start=1):
        if score > best:
            best, best_epoch, since = score, epoch, 0
        else:
            since += 1
            if since >= patience:
                return epoch, best_epoch
    return len(val_scores), best_epoch


def run_experiment(config: TrainConfig, splits, vocabs=None):
    """Build vocabularies and a fresh model from ``config`` and train it."""
    if vocabs is None:
        vocabs = build_vocab(splits["train"], config.min_frequency)
    model = build_model(config, vocabs)
    result = train_loop(model, splits, config, vocabs)
    return model, result, vocabs


# ---------------------------------------------------------------------------
# grid search


def grid_cells(base: TrainConfig, grid: dict[str, Sequence[Any]]) -> list[TrainConfig]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must name at least one parameter with at least one value")
    keys = list(grid)
    return [replace(base, **dict(zip(keys, values))) for values in itertools.product(*(grid[k] for k in keys))]


def _run_cell(args):
    index, config, splits = args
    try:
        _, result, _ = run_experiment(config, splits)
        return index, {"status": "ok", "result": result.to_dict()}
    except ScriptFuseError as exc:
        return index, {"status": "error", "error": f"{type(exc).__name__}: {exc}", "config": config.to_dict()}


def grid_search(base: TrainConfig, grid: dict[str, Sequence[Any]], splits, out_dir: str | Path | None = None,
                workers: int = 1) -> list[dict[str, Any]]:
    """Train every cell of the grid; return cells ranked by validation F1 (ties: lower index).

    With ``out_dir`` each cell is written to ``cells/cell_NNN.json`` and
    cells already on disk are loaded instead of retrained.
    """
    cells = grid_cells(base, grid)
    keys = list(grid)
    cell_dir = Path(out_dir) / "cells" if out_dir is not None else None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
    records: dict[int, dict[str, Any]] = {}
    todo = []
    for i, cfg in enumerate(cells):
        path = cell_dir / f"cell_{i:03d}.json" if cell_dir is not None else None
        if path is not None and path.exists():
            stored = json.loads(path.read_text(encoding="utf-8"))
            if stored.get("config", {}) == cfg.to_dict() or stored.get("result", {}).get("config") == cfg.to_dict():
                records[i] = stored
                continue
        todo.append((i, cfg, splits))

    def store(i, rec):
        rec = {"index": i, "params": {k: getattr(cells[i], k) for k in keys}, **rec}
        if rec["status"] == "ok":
            rec["config"] = rec["result"]["config"]
        records[i] = rec
        if cell_dir is not None:
            (cell_dir / f"cell_{i:03d}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n",
                                                         encoding="utf-8")

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, rec in pool.map(_run_cell, todo):
                store(i, rec)
    else:
        for item in todo:
            i, rec = _run_cell(item)
            store(i, rec)

    ordered = [records[i] for i in range(len(cells))]
    ok = [r for r in ordered if r["status"] == "ok"]
    ok.sort(key=lambda r: (-r["result"]["best_val_f1"], r["index"]))
    failed = [r for r in ordered if r["status"] != "ok"]
    return ok + failed


def write_grid_summary(path: str | Path, ranked: list[dict[str, Any]], keys: Sequence[str]) -> None:
    cols = ["rank", "cell", *keys, "status", "best_val_f1", "test_f1", "best_epoch", "stopped_epoch"]
    lines = ["\t".join(cols)]
    for rank, rec in enumerate(ranked, start=1):
        res = rec.get("result") or {}
        row = [str(rank), str(rec["index"]), *[str(rec["params"][k]) for k in keys], rec["status"],
               _fmt(res.get("best_val_f1")), _fmt(res.get("test_f1")),
               str(res.get("best_epoch", "")), str(res.get("stopped_epoch", ""))]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def layer_curve(ranked: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """One ``{layer, val_f1, test_f1}`` row per successful cell, sorted by layer."""
    rows = [{"layer": r["params"]["align_layer"], "val_f1": r["result"]["best_val_f1"],
             "test_f1": r["result"]["test_f1"]} for r in ranked if r["status"] == "ok"]
    return sorted(rows, key=lambda r: r["layer"])


def best_layer(curve: list[dict[str, Any]]) -> int:
    """Layer with the highest validation F1; ties go to the shallower layer."""
    return curve[int(np.argmax([row["val_f1"] for row in curve]))]["layer"]
