"""End-to-end orchestration: model assembly, the learning-rate schedule with
linear warm-up and step decay, the epoch loop with checkpointing and resume,
and the ablation harness (contrastive on/off, queue-size sweep, rerank).
"""

from __future__ import annotations

import copy
import statistics
from pathlib import Path

import numpy as np

from . import storage
from .config import ExperimentConfig, config_hash, serialize_config
from .encoders import (EncoderConfig, EncoderPair, FrozenWordTable,
                       encode_text, encode_visual, init_text_params,
                       init_visual_params)
from .moco import QueuePair, train_step
from .objectives import ClassifierHead
from .retrieval import Gallery, RerankConfig, evaluate, rank_k, rankings_from_scores
from .synth_data import SamplerConfig, sample_batch


class NumericError(RuntimeError):
    """Training hit a non-finite loss; carries the diagnostic snapshot path."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class Model:
    """Both encoder pairs, the frozen word table, the shared classifier head,
    and the dense-label mapping for the training identities."""

    def __init__(self, enc_cfg, visual, textual, table, head, train_identities):
        self.enc_cfg = enc_cfg
        self.visual = visual
        self.textual = textual
        self.table = table
        self.head = head
        self.train_identities = list(train_identities)
        self._label_of = {int(i): idx for idx, i in enumerate(self.train_identities)}

    def labels_for(self, ids):
        return [self._label_of[int(i)] for i in ids]

    def trainable_parameters(self):
        params = list(self.visual.theta_q.values())
        params += list(self.textual.theta_q.values())
        params.append(self.head.w)
        return params


def build_model(enc_cfg, train_identities, epsilon, seed, table_seed):
    """Deterministic function of (config dims, identity list, seeds)."""
    enc_cfg.validate()
    rng = np.random.default_rng(seed)
    visual = EncoderPair(init_visual_params(enc_cfg, rng))
    textual = EncoderPair(init_text_params(enc_cfg, rng))
    table = FrozenWordTable(enc_cfg.vocab_size, enc_cfg.embed_dim, table_seed)
    head = ClassifierHead(enc_cfg.feature_dim, max(len(train_identities), 1),
                          epsilon=epsilon, rng=rng)
    return Model(enc_cfg, visual, textual, table, head, train_identities)


def lr_at(step, steps_per_epoch, cfg):
    """Linear warm-up to base_lr, then step decay at the decay epochs."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm_steps = cfg.warmup_epochs * steps_per_epoch
    if warm_steps > 0 and step < warm_steps:
        frac = step / warm_steps
        return cfg.warmup_start_lr + frac * (cfg.base_lr - cfg.warmup_start_lr)
    epoch = step // steps_per_epoch
    n_decays = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.base_lr * cfg.decay_factor ** n_decays


def encoder_config(cfg, dataset):
    return EncoderConfig(
        input_dim=dataset.input_dim,
        visual_hidden=cfg.model.visual_hidden,
        embed_dim=cfg.model.embed_dim,
        gru_hidden=cfg.model.gru_hidden,
        feature_dim=cfg.model.feature_dim,
        vocab_size=dataset.vocab_size,
        max_len=4096)


def encode_split(model, dataset, split, modality):
    """Query-encoder features for one split. Images are deduplicated by
    image index (captions share their image); texts use every record."""
    records = dataset.records_for(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    embeddings, ids = [], []
    if modality == "image":
        seen = {}
        for r in records:
            if r.image_index not in seen:
                seen[r.image_index] = r
        for idx in sorted(seen):
            r = seen[idx]
            embeddings.append(encode_visual(model.visual.theta_q, r.image_feature).data)
            ids.append(r.identity)
    elif modality == "text":
        for r in records:
            embeddings.append(encode_text(model.textual.theta_q, model.table,
                                          r.caption_tokens).data)
            ids.append(r.identity)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return np.stack(embeddings), np.asarray(ids, dtype=np.int64)


def _val_rank1(model, dataset, split="test"):
    try:
        t_emb, t_ids = encode_split(model, dataset, split, "text")
        v_emb, v_ids = encode_split(model, dataset, split, "image")
    except ValueError:
        return float("nan")
    rankings = rankings_from_scores(t_emb @ v_emb.T, v_ids)
    return rank_k(rankings, t_ids, 1)


# ------------------------------------------------------- checkpoint plumbing

def _pack_arrays(model, queues):
    arrays = {}
    for prefix, pair in (("v", model.visual), ("t", model.textual)):
        for name, p in pair.theta_q.items():
            arrays[f"{prefix}q.{name}"] = p.data
        for name, arr in pair.theta_k.items():
            arrays[f"{prefix}k.{name}"] = arr
    arrays["head.w"] = model.head.w.data
    arrays["labels.ids"] = np.asarray(model.train_identities, dtype=np.int64)
    arrays["queue.v"] = queues.visual.keys()
    arrays["queue.t"] = queues.textual.keys()
    arrays["queue.ids"] = np.asarray(queues.visual.identities(), dtype=np.int64)
    return arrays


def _unpack_arrays(model, queues, arrays):
    for prefix, pair in (("v", model.visual), ("t", model.textual)):
        for name, p in pair.theta_q.items():
            p.data = np.ascontiguousarray(arrays[f"{prefix}q.{name}"])
        for name in pair.theta_k:
            pair.theta_k[name] = np.ascontiguousarray(arrays[f"{prefix}k.{name}"])
    model.head.w.data = np.ascontiguousarray(arrays["head.w"])
    qids = arrays["queue.ids"]
    if len(qids):
        queues.visual.push_batch(arrays["queue.v"], qids)
        queues.textual.push_batch(arrays["queue.t"], qids)


def save_checkpoint(path, cfg, model, queues, epoch, step, sampler_rng):
    storage.write_checkpoint(
        path, serialize_config(cfg), epoch, step,
        sampler_rng.bit_generator.state, _pack_arrays(model, queues))


def load_checkpoint(path, dataset=None, expect_cfg=None):
    """Rebuild (cfg, model, queues, epoch, step, sampler_rng) from disk.

    When expect_cfg is given, a config-hash mismatch refuses to resume.
    """
    from .config import parse_config
    config_text, epoch, step, rng_state, arrays = storage.read_checkpoint(path)
    cfg = parse_config(config_text)
    if expect_cfg is not None and config_hash(expect_cfg) != config_hash(cfg):
        raise ValueError("checkpoint config hash does not match the requested config")
    if dataset is None:
        from .synth_data import generate_dataset
        dataset = generate_dataset(cfg.data)
    enc_cfg = encoder_config(cfg, dataset)
    train_ids = [int(i) for i in arrays["labels.ids"]]
    model = build_model(enc_cfg, train_ids, cfg.train.epsilon,
                        cfg.train.seed, cfg.model.table_seed)
    queues = QueuePair.create(cfg.train.queue_capacity, enc_cfg.feature_dim)
    _unpack_arrays(model, queues, arrays)
    sampler_rng = np.random.default_rng(0)
    sampler_rng.bit_generator.state = rng_state
    return cfg, model, queues, epoch, step, sampler_rng


# -------------------------------------------------------------- training run

class TrainResult:
    def __init__(self, model, queues, trace, cfg):
        self.model = model
        self.queues = queues
        self.trace = trace
        self.cfg = cfg


def _dump_diagnostics(out_dir, model, batch, exc):
    if out_dir is None:
        return None
    path = Path(out_dir) / "diagnostic_snapshot.txt"
    lines = [f"non-finite loss: {exc}", f"batch identities: {list(batch.identities)}"]
    for p in model.trainable_parameters():
        lines.append(f"param shape {p.data.shape}: norm {np.linalg.norm(p.data)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def run_training(dataset, cfg, out_dir=None, resume=None):
    """Train per the config; deterministic given (config, dataset).

    Writes metrics.jsonl and checkpoints under out_dir when given. resume
    restarts from a checkpoint and yields the same final parameters as an
    uninterrupted run.
    """
    cfg.validate()
    tcfg = cfg.train
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        cfg, model, queues, start_epoch, global_step, sampler_rng = \
            load_checkpoint(resume, dataset=dataset, expect_cfg=cfg)
        tcfg = cfg.train
    else:
        enc_cfg = encoder_config(cfg, dataset)
        train_ids = dataset.ids_for("train")
        model = build_model(enc_cfg, train_ids, tcfg.epsilon,
                            tcfg.seed, cfg.model.table_seed)
        queues = QueuePair.create(tcfg.queue_capacity, enc_cfg.feature_dim)
        sampler_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
        start_epoch, global_step = 0, 0

    sampler = SamplerConfig(p_ids=tcfg.p_ids, k_inst=tcfg.k_inst)
    n_train = len(dataset.records_for("train"))
    steps_per_epoch = max(n_train // sampler.batch_size, 1)

    trace = []
    log_file = open(out_dir / "metrics.jsonl", "a" if resume else "w") \
        if out_dir is not None else None
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            sums = {"lcmc": 0.0, "lalign": 0.0, "lid": 0.0, "total": 0.0}
            lr = tcfg.base_lr
            for _ in range(steps_per_epoch):
                lr = lr_at(global_step, steps_per_epoch, tcfg)
                batch = sample_batch(dataset, sampler, sampler_rng)
                try:
                    stats = train_step(batch, model, queues, lr, tcfg)
                except FloatingPointError as exc:
                    snap = _dump_diagnostics(out_dir, model, batch, exc)
                    raise NumericError(str(exc), snapshot_path=snap) from exc
                for k in sums:
                    sums[k] += stats[k]
                global_step += 1
            record = {"epoch": epoch,
                      **{k: v / steps_per_epoch for k, v in sums.items()},
                      "val_rank1": (_val_rank1(model, dataset)
                                    if tcfg.eval_every and
                                    (epoch + 1) % tcfg.eval_every == 0 else float("nan")),
                      "lr": lr}
            trace.append(record)
            if log_file is not None:
                log_file.write(storage.format_metrics_record(record) + "\n")
                log_file.flush()
            if out_dir is not None and tcfg.checkpoint_every and \
                    (epoch + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1}.cmmc",
                                cfg, model, queues, epoch + 1, global_step, sampler_rng)
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.cmmc", cfg, model, queues,
                        tcfg.epochs, global_step, sampler_rng)
    return TrainResult(model, queues, trace, cfg)


# ----------------------------------------------------------------- ablation

ABLATION_AXES = ("queue_size", "cmc_on_off", "rerank")
DEFAULT_QUEUE_SWEEP = (0, 64, 256, 1024)


def _variant_metrics(model, dataset, rerank_cfg):
    """Test-split evaluation rows for both directions, plain and reranked."""
    t_emb, t_ids = encode_split(model, dataset, "test", "text")
    v_emb, v_ids = encode_split(model, dataset, "test", "image")
    reports = evaluate(Gallery(t_emb, t_ids, "text"),
                       Gallery(v_emb, v_ids, "image"), rerank_cfg)
    rows = []
    for (direction, reranked), rep in sorted(reports.items()):
        rows.append({"direction": direction, "reranked": reranked,
                     "rank1": rep.rank_k.get(1, float("nan")),
                     "rank5": rep.rank_k.get(5, float("nan")),
                     "rank10": rep.rank_k.get(10, float("nan")),
                     "map": rep.map_score})
    return rows


def run_ablation(dataset, base_cfg, axis, seeds=(0, 1, 2, 3, 4),
                 queue_sizes=DEFAULT_QUEUE_SWEEP):
    """Train and evaluate every variant of the chosen axis from the same
    seed set; returns per-run rows plus per-variant medians."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; pick one of {ABLATION_AXES}")

    variants = []
    if axis == "queue_size":
        for cap in queue_sizes:
            variants.append((f"queue_{cap}", {"queue_capacity": cap}))
    elif axis == "cmc_on_off":
        variants.append(("cmc_on", {"cmc_enabled": True}))
        variants.append(("cmc_off", {"cmc_enabled": False}))
        variants.append(("untrained", {"epochs": 0}))
    else:  # rerank: one training per seed, both report variants come out
        variants.append(("trained", {}))

    rows = []
    for name, overrides in variants:
        for seed in seeds:
            cfg = copy.deepcopy(base_cfg)
            cfg.train.seed = int(seed)
            for key, value in overrides.items():
                setattr(cfg.train, key, value)
            result = run_training(dataset, cfg)
            for mrow in _variant_metrics(result.model, dataset, cfg.rerank):
                rows.append({"variant": name, "seed": int(seed), **mrow})

    medians = []
    keys = sorted({(r["variant"], r["direction"], r["reranked"]) for r in rows})
    for variant, direction, reranked in keys:
        group = [r for r in rows if (r["variant"], r["direction"], r["reranked"])
                 == (variant, direction, reranked)]
        medians.append({
            "variant": variant, "seed": "median", "direction": direction,
            "reranked": reranked,
            **{m: statistics.median(r[m] for r in group)
               for m in ("rank1", "rank5", "rank10", "map")}})
    return rows + medians
