"""Model bundles: the two-encoder fusion classifier and single-script baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, EncoderStates, zeros
from .errors import ConfigError
from .fusion import NUM_CLASSES, FusionHead, classify, head_weight
from .text import Batch, Vocabulary, make_batch

ABLATIONS = ("none", "no-reg", "no-align", "baseline-roman", "baseline-deva")


@dataclass
class ModelOutput:
    probs: T.Tensor
    states: dict[str, EncoderStates]


class FusionModel:
    kind = "fusion"

    def __init__(self, roman: Encoder, deva: Encoder, head: FusionHead, query_script: str = "roman"):
        if query_script not in ("roman", "deva"):
            raise ConfigError(f"query_script must be roman or deva, got {query_script!r}")
        self.encoders = {"roman": roman, "deva": deva}
        self.head = head
        self.query_script = query_script

    @property
    def kv_script(self) -> str:
        return "deva" if self.query_script == "roman" else "roman"

    def forward(self, batch: Batch) -> ModelOutput:
        states = {s: enc(batch.ids(s), batch.mask(s)) for s, enc in self.encoders.items()}
        q, kv = self.query_script, self.kv_script
        fused = self.head.cross_attend(states[q].last, states[kv].last, batch.mask(kv))
        probs = self.head.pool_and_classify(fused, batch.mask(q))
        return ModelOutput(probs, states)

    __call__ = forward

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for script, enc in self.encoders.items():
            out.update({f"{script}/{k}": v for k, v in enc.params.items()})
        out.update({f"fusion/{k}": v for k, v in self.head.params.items()})
        return out


class BaselineModel:
    """One encoder, pooled last layer, linear classifier; no fusion and no transport."""

    kind = "baseline"

    def __init__(self, encoder: Encoder, script: str, seed: int = 0, pooling: str = "mean",
                 params: dict[str, T.Tensor] | None = None):
        self.encoders = {script: encoder}
        self.script = script
        self.pooling = pooling
        if params is None:
            rng = np.random.default_rng(seed)
            params = {"cls.w": head_weight(rng, encoder.config.d_model, NUM_CLASSES), "cls.b": zeros(NUM_CLASSES)}
        self.params = params

    def forward(self, batch: Batch) -> ModelOutput:
        s = self.script
        states = self.encoders[s](batch.ids(s), batch.mask(s))
        probs = classify(states.last, batch.mask(s), self.params["cls.w"], self.params["cls.b"], self.pooling)
        return ModelOutput(probs, {s: states})

    __call__ = forward

    def named_parameters(self) -> dict[str, T.Tensor]:
        s = self.script
        out = {f"{s}/{k}": v for k, v in self.encoders[s].params.items()}
        out.update({f"head/{k}": v for k, v in self.params.items()})
        return out


def build_model(config, vocabs: tuple[Vocabulary, Vocabulary]):
    """Fresh model for a :class:`~scriptfuse.trainer.TrainConfig` and the two vocabularies."""
    def enc_cfg(vocab, offset):
        return EncoderConfig(vocab_size=len(vocab), num_layers=config.num_layers, num_heads=config.num_heads,
                             d_model=config.d_model, d_ff=config.d_ff, max_len=config.max_len,
                             seed=config.seed * 1000 + offset)

    if config.ablation in ("baseline-roman", "baseline-deva"):
        script = config.ablation.split("-")[1]
        vocab = vocabs[0] if script == "roman" else vocabs[1]
        return BaselineModel(Encoder(enc_cfg(vocab, 1 if script == "roman" else 2)), script,
                             seed=config.seed * 1000 + 3, pooling=config.pooling)
    roman = Encoder(enc_cfg(vocabs[0], 1))
    deva = Encoder(enc_cfg(vocabs[1], 2))
    head = FusionHead(config.d_model, config.fusion_heads, seed=config.seed * 1000 + 3, pooling=config.pooling)
    return FusionModel(roman, deva, head, config.query_script)


def load_parameters(model, arrays: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise ConfigError(f"{name}: checkpoint shape {arrays[name].shape} != model {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)


def save_model(directory: str | Path, model, config, vocabs, frozen: Encoder | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    if frozen is not None:
        params.update({f"frozen/{k}": v for k, v in frozen.params.items()})
    T.save_checkpoint(directory / "model.ckpt", params)
    (directory / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    vocabs[0].save(directory / "vocab_roman.txt")
    vocabs[1].save(directory / "vocab_deva.txt")


def load_model(directory: str | Path):
    """Return ``(model, config, vocabs)`` from a directory written by :func:`save_model`."""
    from .trainer import TrainConfig

    directory = Path(directory)
    if not (directory / "model.ckpt").exists():
        raise FileNotFoundError(f"no checkpoint in {directory}")
    config = TrainConfig.from_dict(json.loads((directory / "config.json").read_text(encoding="utf-8")))
    vocabs = (Vocabulary.load(directory / "vocab_roman.txt"), Vocabulary.load(directory / "vocab_deva.txt"))
    model = build_model(config, vocabs)
    load_parameters(model, T.load_checkpoint(directory / "model.ckpt"))
    return model, config, vocabs


def predict_proba(model, examples, vocabs, max_len: int, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start:start + batch_size], vocabs, max_len)
            out.append(model(batch).probs.data)
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))
