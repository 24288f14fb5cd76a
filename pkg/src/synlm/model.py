"""Bundles the composition model and the generator over one parameter store."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tape as T
from .composition import CompositionConfig, CompositionModel
from .generator import Generator, GeneratorConfig
from .optim import ParamStore, load_checkpoint, save_checkpoint
from .tape import Tensor

__all__ = ["ModelConfig", "Model"]


@dataclass
class ModelConfig:
    vocab_size: int
    composition: CompositionConfig
    generator: GeneratorConfig

    def to_json(self) -> str:
        return json.dumps({
            "vocab_size": self.vocab_size,
            "composition": dataclasses.asdict(self.composition),
            "generator": dataclasses.asdict(self.generator),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        return cls(vocab_size=raw["vocab_size"],
                   composition=CompositionConfig(**raw["composition"]),
                   generator=GeneratorConfig(**raw["generator"]))


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.composition.gen_width != cfg.generator.width:
            raise ValueError(
                f"composition.gen_width {cfg.composition.gen_width} != "
                f"generator.width {cfg.generator.width}")
        self.cfg = cfg
        self.store = ParamStore(seed=seed)
        self.fns = CompositionModel(self.store, cfg.composition)
        self.gen = Generator(self.store, cfg.generator, cfg.vocab_size)

    def leaf_vectors(self, ids) -> Tensor:
        """Chart-width leaf vectors: down-projected token embeddings."""
        return self.fns.down(T.gather_rows(self.gen.embed, np.asarray(ids)))

    def down_embeddings(self) -> Tensor:
        """The whole vocabulary at chart width (reconstruction targets)."""
        return self.fns.down(self.gen.embed)

    def save(self, path, extra_scalars: Optional[dict] = None) -> None:
        save_checkpoint(path, self.store, extra_scalars)

    def load(self, path) -> dict:
        return load_checkpoint(path, self.store)
