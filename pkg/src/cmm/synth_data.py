"""Deterministic synthetic fine-grained identity data.

Identities are attribute vectors (A categorical slots, C choices each).
"Images" are the identity's one-hot attribute feature plus Gaussian noise;
"captions" are the identity's attribute tokens in shuffled order with filler
tokens mixed in. Splits are disjoint by identity, so test identities are
never seen in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ConfigError

SPLITS = ("train", "val", "test")


@dataclass
class DataConfig:
    n_ids: int = 64
    n_val_ids: int = 0
    n_test_ids: int = 16
    images_per_id: int = 4
    captions_per_image: int = 2
    n_slots: int = 6          # A
    n_choices: int = 8        # C
    noise_sigma: float = 0.1
    n_filler_tokens: int = 16
    fillers_per_caption: int = 4
    seed: int = 0

    def validate(self):
        for name in ("n_ids", "images_per_id", "captions_per_image",
                     "n_slots", "n_choices"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_val_ids", "n_test_ids", "n_filler_tokens",
                     "fillers_per_caption"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_val_ids + self.n_test_ids >= self.n_ids:
            raise ConfigError("val + test identities must leave at least one train identity")
        if self.vocab_size > 65535:
            raise ConfigError("vocabulary overflows the 16-bit token id range")

    @property
    def input_dim(self):
        return self.n_slots * self.n_choices

    @property
    def vocab_size(self):
        return self.n_slots * self.n_choices + self.n_filler_tokens


@dataclass
class Identity:
    id: int
    attributes: tuple  # one choice index per slot


@dataclass
class SampleRecord:
    identity: int
    image_index: int           # global image id, shared by its captions
    image_feature: np.ndarray  # (input_dim,)
    caption_tokens: list
    split: str


@dataclass
class SyntheticDataset:
    config: DataConfig
    identities: list
    records: list

    @property
    def vocab_size(self):
        return self.config.vocab_size

    @property
    def input_dim(self):
        return self.config.input_dim

    def records_for(self, split):
        return [r for r in self.records if r.split == split]

    def ids_for(self, split):
        return sorted({r.identity for r in self.records if r.split == split})


def base_feature(attributes, n_choices, n_slots):
    """Concatenated one-hot blocks, scaled so the whole vector is unit-norm.

    Two identities differing in one slot are sqrt(2)/sqrt(A) apart.
    """
    scale = 1.0 / np.sqrt(n_slots)
    feat = np.zeros(n_slots * n_choices)
    for slot, choice in enumerate(attributes):
        feat[slot * n_choices + int(choice)] = scale
    return feat


def attribute_tokens(attributes, n_choices):
    """Token id of slot s with choice c is s*C + c."""
    return [slot * n_choices + int(c) for slot, c in enumerate(attributes)]


def generate_dataset(cfg):
    """Deterministic function of the config (including its seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    identities = [
        Identity(id=i, attributes=tuple(int(c) for c in
                                        rng.integers(0, cfg.n_choices, size=cfg.n_slots)))
        for i in range(cfg.n_ids)
    ]

    # Identity-disjoint splits over a seeded shuffle of the identity ids.
    order = rng.permutation(cfg.n_ids)
    split_of = {}
    for pos, ident in enumerate(order):
        if pos < cfg.n_test_ids:
            split_of[int(ident)] = "test"
        elif pos < cfg.n_test_ids + cfg.n_val_ids:
            split_of[int(ident)] = "val"
        else:
            split_of[int(ident)] = "train"

    filler_base = cfg.n_slots * cfg.n_choices
    records = []
    image_index = 0
    for ident in identities:
        base = base_feature(ident.attributes, cfg.n_choices, cfg.n_slots)
        attr_toks = attribute_tokens(ident.attributes, cfg.n_choices)
        for _ in range(cfg.images_per_id):
            feature = base + rng.normal(0.0, cfg.noise_sigma, size=base.shape) \
                if cfg.noise_sigma > 0 else base.copy()
            for _ in range(cfg.captions_per_image):
                toks = list(attr_toks)
                rng.shuffle(toks)
                for _ in range(cfg.fillers_per_caption):
                    filler = filler_base + int(rng.integers(0, cfg.n_filler_tokens)) \
                        if cfg.n_filler_tokens > 0 else None
                    if filler is not None:
                        pos = int(rng.integers(0, len(toks) + 1))
                        toks.insert(pos, filler)
                records.append(SampleRecord(
                    identity=ident.id,
                    image_index=image_index,
                    image_feature=feature,
                    caption_tokens=toks,
                    split=split_of[ident.id]))
            image_index += 1
    return SyntheticDataset(config=cfg, identities=identities, records=records)


@dataclass
class SamplerConfig:
    p_ids: int = 8       # identities per batch
    k_inst: int = 4      # instances per identity

    def validate(self):
        if self.p_ids < 1 or self.k_inst < 1:
            raise ConfigError("p_ids and k_inst must be >= 1")

    @property
    def batch_size(self):
        return self.p_ids * self.k_inst


@dataclass
class LabeledBatch:
    image_features: list   # B arrays of (input_dim,)
    caption_tokens: list   # B token lists
    identities: np.ndarray # (B,)


def sample_batch(dataset, cfg, rng, split="train"):
    """P distinct identities, K (image, caption) records each; records are
    drawn without replacement where an identity has enough, with otherwise."""
    cfg.validate()
    ids = dataset.ids_for(split)
    if len(ids) < cfg.p_ids:
        raise ValueError(
            f"{split} split has {len(ids)} identities, need {cfg.p_ids}")
    by_id = {}
    for r in dataset.records_for(split):
        by_id.setdefault(r.identity, []).append(r)

    chosen_ids = rng.choice(np.asarray(ids), size=cfg.p_ids, replace=False)
    feats, caps, labels = [], [], []
    for ident in chosen_ids:
        pool = by_id[int(ident)]
        replace = len(pool) < cfg.k_inst
        picks = rng.choice(len(pool), size=cfg.k_inst, replace=replace)
        for pi in picks:
            rec = pool[int(pi)]
            feats.append(rec.image_feature)
            caps.append(rec.caption_tokens)
            labels.append(rec.identity)
    return LabeledBatch(image_features=feats, caption_tokens=caps,
                        identities=np.asarray(labels, dtype=np.int64))
