"""End-to-end acceptance gate. Each test prints one PASS/FAIL line.

The slow criteria (the 5-seed ablations) share one session-scoped set of
training runs, so the whole gate stays within tens of minutes.
"""

import copy
import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from cmm import storage
from cmm import tensor as T
from cmm.cli import main as cli_main
from cmm.config import ExperimentConfig, serialize_config
from cmm.encoders import EncoderConfig, EncoderPair, init_visual_params
from cmm.gradcheck import run_suite
from cmm.moco import (CmcConfig, QueuePair, cmc_loss, filter_negatives,
                      train_step)
from cmm.objectives import (AlignConfig, ClassifierHead, align_loss,
                            align_pos_gradient, id_loss)
from cmm.retrieval import (Gallery, RerankConfig, evaluate,
                           k_reciprocal_rerank, mean_ap, rank_k,
                           rankings_from_scores)
from cmm.synth_data import DataConfig, SamplerConfig, generate_dataset, sample_batch
from cmm.training import (build_model, encode_split, encoder_config,
                          run_training)

from conftest import tiny_config, unit_rows


def _report(capsys, name, passed, detail=""):
    with capsys.disabled():
        status = "PASS" if passed else "FAIL"
        print(f"{name} {status}: {detail}")
    assert passed, f"{name} failed: {detail}"


# --------------------------------------------------------------------- AC-1

def test_ac1_gradient_correctness(capsys):
    t0 = time.time()
    results = run_suite(seed=0, instances=100)
    elapsed = time.time() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and elapsed < 120.0
    _report(capsys, "AC-1", ok,
            f"worst rel err {worst:.3e} over 5x100 instances in {elapsed:.1f}s")


# --------------------------------------------------------------------- AC-2

def test_ac2_closed_form_losses(capsys):
    rng = np.random.default_rng(0)
    checks = []

    # empty queue: exactly zero
    v = T.constant(unit_rows(rng, 2, 6))
    t = T.constant(unit_rows(rng, 2, 6))
    loss = cmc_loss(v, t, v.data, t.data, [0, 1], QueuePair.create(0, 6),
                    CmcConfig())
    checks.append(float(loss.data) == 0.0)

    # B=1 with a single negative equal to the positive key: 2 ln 2
    v1 = T.constant(unit_rows(rng, 1, 6))
    t1 = T.constant(unit_rows(rng, 1, 6))
    queues = QueuePair.create(8, 6)
    queues.visual.push_batch(v1.data, [5])
    queues.textual.push_batch(t1.data, [5])
    loss = cmc_loss(v1, t1, v1.data, t1.data, [0], queues, CmcConfig())
    checks.append(abs(float(loss.data) - 2.0 * math.log(2.0)) <= 1e-12)

    # align loss at the margins with B=2: 4 ln 2
    acfg = AlignConfig()
    s = np.full((2, 2), acfg.beta)
    np.fill_diagonal(s, acfg.alpha)
    checks.append(abs(float(align_loss(T.constant(s), acfg).data)
                      - 4.0 * math.log(2.0)) <= 1e-12)

    # uniform logits: 2 ln N
    for n in (3, 48):
        head = ClassifierHead(5, n, epsilon=0.1, rng=rng)
        head.w.data = np.zeros_like(head.w.data)
        feats_v = T.constant(unit_rows(rng, 4, 5))
        feats_t = T.constant(unit_rows(rng, 4, 5))
        val = float(id_loss(feats_v, feats_t, [0, 1, 2, 0], head).data)
        checks.append(abs(val - 2.0 * math.log(n)) <= 1e-12)

    _report(capsys, "AC-2", all(checks),
            "empty-queue 0, 2ln2, 4ln2, 2lnN all within 1e-12")


# --------------------------------------------------------------------- AC-3

def test_ac3_align_gradient_identity(capsys):
    rng = np.random.default_rng(1)
    cfg = AlignConfig()
    worst = 0.0
    count = 0
    while count < 100:
        b = int(rng.integers(2, 6))
        s = T.parameter(rng.uniform(-1.0, 1.0, size=(b, b)))
        with T.Tape() as tape:
            tape.backward(align_loss(s, cfg))
        for i in range(b):
            if count >= 100:
                break
            expected = align_pos_gradient(s.data[i, i], cfg, b)
            worst = max(worst, abs(s.grad[i, i] - expected))
            count += 1
    _report(capsys, "AC-3", worst <= 1e-10,
            f"max |autodiff - closed form| = {worst:.3e} over 100 values")


# --------------------------------------------------------------------- AC-4

def _micro_setup(seed):
    cfg = ExperimentConfig()
    cfg.data = DataConfig(n_ids=10, n_test_ids=2, images_per_id=2,
                          captions_per_image=1, n_slots=3, n_choices=4,
                          n_filler_tokens=4, fillers_per_caption=2, seed=seed)
    cfg.model.visual_hidden = 8
    cfg.model.embed_dim = 6
    cfg.model.gru_hidden = 4
    cfg.model.feature_dim = 8
    cfg.train.p_ids = 2
    cfg.train.k_inst = 2
    cfg.train.queue_capacity = 12
    cfg.train.base_lr = 0.01
    ds = generate_dataset(cfg.data)
    enc = encoder_config(cfg, ds)
    model = build_model(enc, ds.ids_for("train"), cfg.train.epsilon,
                        seed, cfg.model.table_seed)
    return cfg, ds, enc, model


def _reference_cmc(v_q, t_q, v_k, t_k, ids, queue_keys_v, queue_keys_t,
                   queue_ids, tau_c):
    """Loss recomputed with numpy from an independently filtered queue."""
    batch = set(ids)
    keep = [i for i, qid in enumerate(queue_ids) if qid not in batch]
    total = 0.0
    b = v_q.shape[0]
    for anchors, pos, negs_all in ((v_q, t_k, queue_keys_t),
                                   (t_q, v_k, queue_keys_v)):
        negs = negs_all[keep] if keep else np.zeros((0, v_q.shape[1]))
        if negs.shape[0] == 0:
            continue
        for i in range(b):
            logits = np.concatenate((
                [anchors[i] @ pos[i] / tau_c], negs @ anchors[i] / tau_c))
            total += math.log(np.exp(logits).sum()) - logits[0]
    return total / b


def test_ac4_queue_semantics_over_1000_steps(capsys):
    from cmm.encoders import encode_text, encode_visual

    cfg, ds, enc, model = _micro_setup(seed=0)
    tcfg = cfg.train
    queues = QueuePair.create(tcfg.queue_capacity, enc.feature_dim)
    sampler = SamplerConfig(tcfg.p_ids, tcfg.k_inst)
    rng = np.random.default_rng(0)

    ref_keys_v, ref_keys_t, ref_ids = [], [], []
    ema_ref = {("v", n): a.copy() for n, a in model.visual.theta_k.items()}
    ema_ref.update({("t", n): a.copy() for n, a in model.textual.theta_k.items()})

    ok_negatives = ok_alignment = ok_fifo = ok_ema = True
    for step in range(1000):
        batch = sample_batch(ds, sampler, rng)
        ids = [int(i) for i in batch.identities]

        # snapshot what this step will see and enqueue
        pre_keys_v = queues.visual.keys().copy()
        pre_keys_t = queues.textual.keys().copy()
        pre_ids = queues.visual.identities()
        vk = model.visual.key_tensors()
        tk = model.textual.key_tensors()
        v_k = np.stack([encode_visual(vk, x).data for x in batch.image_features])
        t_k = np.stack([encode_text(tk, model.table, c).data
                        for c in batch.caption_tokens])
        with T.Tape():
            v_q = T.stack_rows([encode_visual(model.visual.theta_q, x)
                                for x in batch.image_features])
            t_q = T.stack_rows([encode_text(model.textual.theta_q, model.table, c)
                                for c in batch.caption_tokens])
        q_snapshot = (v_q.data.copy(), t_q.data.copy())

        stats = train_step(batch, model, queues, 0.01, tcfg)

        # (a) the loss must equal one recomputed from the identity-disjoint
        # negative set, so no in-batch identity acted as a negative
        ref = _reference_cmc(q_snapshot[0], q_snapshot[1], v_k, t_k, ids,
                             pre_keys_v, pre_keys_t, pre_ids, tcfg.cmc.tau_c)
        if abs(stats["lcmc"] - ref) > 1e-9:
            ok_negatives = False

        # (b) triple alignment
        if not queues.aligned():
            ok_alignment = False

        # (c) FIFO reference list model
        ref_keys_v.extend(v_k)
        ref_keys_t.extend(t_k)
        ref_ids.extend(ids)
        ref_keys_v = ref_keys_v[-tcfg.queue_capacity:]
        ref_keys_t = ref_keys_t[-tcfg.queue_capacity:]
        ref_ids = ref_ids[-tcfg.queue_capacity:]
        if queues.visual.identities() != ref_ids or \
                not np.array_equal(queues.visual.keys(), np.stack(ref_keys_v)) or \
                not np.array_equal(queues.textual.keys(), np.stack(ref_keys_t)):
            ok_fifo = False

        # momentum EMA reference against the post-update query parameters
        m = tcfg.momentum
        for tag, pair in (("v", model.visual), ("t", model.textual)):
            for name, p in pair.theta_q.items():
                ema_ref[(tag, name)] = m * ema_ref[(tag, name)] + (1.0 - m) * p.data
                if np.max(np.abs(pair.theta_k[name] - ema_ref[(tag, name)])) > 1e-10:
                    ok_ema = False

    # (d) closed-form momentum trajectory with frozen query parameters:
    # theta_k(n) = theta_q + m^n (theta_k(0) - theta_q)
    rng2 = np.random.default_rng(7)
    pair = EncoderPair(init_visual_params(
        EncoderConfig(input_dim=4, visual_hidden=5, feature_dim=6), rng2))
    for name in pair.theta_k:
        pair.theta_k[name] = pair.theta_k[name] + rng2.standard_normal(
            pair.theta_k[name].shape)
    k0 = {n: a.copy() for n, a in pair.theta_k.items()}
    m, n_steps = 0.999, 200
    from cmm.encoders import momentum_update
    for _ in range(n_steps):
        momentum_update([pair], m)
    ok_closed = True
    for name, p in pair.theta_q.items():
        expected = p.data + (m ** n_steps) * (k0[name] - p.data)
        if np.max(np.abs(pair.theta_k[name] - expected)) > 1e-10:
            ok_closed = False

    ok = ok_negatives and ok_alignment and ok_fifo and ok_ema and ok_closed
    _report(capsys, "AC-4", ok,
            f"1000 steps: filtered negatives {ok_negatives}, alignment "
            f"{ok_alignment}, FIFO {ok_fifo}, EMA {ok_ema}, closed form {ok_closed}")


# --------------------------------------------------------------------- AC-5

def _brute_force_metrics(scores, query_ids, gallery_ids, ks):
    q, g = len(scores), len(scores[0])
    rank_hits = {k: 0 for k in ks}
    ap_sum = Fraction(0)
    for qi in range(q):
        order = sorted(range(g), key=lambda j: (-scores[qi][j], j))
        ranked = [gallery_ids[j] for j in order]
        for k in ks:
            if query_ids[qi] in ranked[:k]:
                rank_hits[k] += 1
        hits = [r + 1 for r, gid in enumerate(ranked) if gid == query_ids[qi]]
        ap_sum += Fraction(sum(Fraction(n + 1, rank)
                               for n, rank in enumerate(hits)), len(hits))
    return ({k: Fraction(100 * rank_hits[k], q) for k in ks},
            Fraction(100, q) * ap_sum)


def test_ac5_metric_oracles(capsys):
    rng = np.random.default_rng(2)
    metrics_exact = True
    for trial in range(200):
        g = int(rng.integers(2, 9))
        q = int(rng.integers(1, 7))
        gallery_ids = rng.integers(0, int(rng.integers(1, 5)), size=g)
        query_ids = gallery_ids[rng.integers(0, g, size=q)]
        scores = rng.integers(-5, 6, size=(q, g))
        ks = sorted({1, 2, g})

        rankings = rankings_from_scores(scores.astype(np.float64), gallery_ids)
        ref_rank, ref_map = _brute_force_metrics(
            scores.tolist(), query_ids.tolist(), gallery_ids.tolist(), ks)
        for k in ks:
            if rank_k(rankings, query_ids, k) != float(ref_rank[k]):
                metrics_exact = False
        if mean_ap(rankings, query_ids, gallery_ids) != float(ref_map):
            metrics_exact = False

    # D_J from the rerank path equals direct set arithmetic exactly
    jaccard_exact = True
    for trial in range(50):
        g, d, k = 6, 5, 3
        gal = Gallery(unit_rows(rng, g, d), list(range(g)))
        queries = unit_rows(rng, 4, d)
        cosine = queries @ gal.embeddings.T
        cfg = RerankConfig(k=k, weight=1.0)  # weight 1: adjustment IS 1 - D_J
        adjusted = k_reciprocal_rerank(queries, gal, cosine, cfg)
        uni = gal.embeddings @ gal.embeddings.T
        for qi in range(4):
            cross = set(sorted(range(g),
                               key=lambda j: (-cosine[qi, j], j))[:k])
            for gi in range(g):
                uniset = set(sorted(range(g),
                                    key=lambda j: (-uni[gi, j], j))[:k])
                inter, union = len(uniset & cross), len(uniset | cross)
                d_j = 1.0 - inter / union
                if adjusted[qi, gi] != cosine[qi, gi] + (1.0 - d_j):
                    jaccard_exact = False

    _report(capsys, "AC-5", metrics_exact and jaccard_exact,
            f"200 Rank-K/mAP instances exact: {metrics_exact}; "
            f"Jaccard set arithmetic exact: {jaccard_exact}")


# --------------------------------------------------------------------- AC-6

def test_ac6_rerank_degeneracies(capsys):
    rng = np.random.default_rng(3)
    g, d = 8, 6
    gal = Gallery(unit_rows(rng, g, d), [i % 3 for i in range(g)], "image")
    queries = unit_rows(rng, 5, d)
    cosine = queries @ gal.embeddings.T

    zero_w = k_reciprocal_rerank(queries, gal, cosine, RerankConfig(k=3, weight=0.0))
    weight_ok = np.array_equal(zero_w, cosine)

    full_k = k_reciprocal_rerank(queries, gal, cosine, RerankConfig(k=g, weight=0.05))
    before = rankings_from_scores(cosine, gal.identities)
    after = rankings_from_scores(full_k, gal.identities)
    rank_ok = np.array_equal(before, after)
    shift = full_k - cosine
    shift_ok = np.allclose(shift, shift[0, 0], atol=1e-12)

    _report(capsys, "AC-6", weight_ok and rank_ok and shift_ok,
            f"weight 0 identity: {weight_ok}; k=G unchanged rankings: "
            f"{rank_ok}; uniform shift: {shift_ok}")


# ---------------------------------------------------------------- AC-7/AC-8

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def ablation_runs():
    """5 seeds x {cmc_on, cmc_off, untrained} on the default dataset."""
    base = ExperimentConfig()
    dataset = generate_dataset(base.data)
    runs = {}
    for variant in ("cmc_on", "cmc_off", "untrained"):
        for seed in SEEDS:
            cfg = ExperimentConfig()
            cfg.train.seed = seed
            if variant == "cmc_off":
                cfg.train.cmc_enabled = False
            elif variant == "untrained":
                cfg.train.epochs = 0
            result = run_training(dataset, cfg)
            t_emb, t_ids = encode_split(result.model, dataset, "test", "text")
            v_emb, v_ids = encode_split(result.model, dataset, "test", "image")
            reports = evaluate(Gallery(t_emb, t_ids, "text"),
                               Gallery(v_emb, v_ids, "image"), cfg.rerank)
            runs[(variant, seed)] = reports
    return runs


def _median(runs, variant, key, metric):
    vals = [getattr(runs[(variant, s)][key], "rank_k", None) for s in SEEDS]
    if metric == "rank1":
        return statistics.median(runs[(variant, s)][key].rank_k[1] for s in SEEDS)
    return statistics.median(runs[(variant, s)][key].map_score for s in SEEDS)


def test_ac7_cmc_ablation(capsys, ablation_runs):
    key = ("text_to_image", False)
    on = _median(ablation_runs, "cmc_on", key, "rank1")
    off = _median(ablation_runs, "cmc_off", key, "rank1")
    untrained = _median(ablation_runs, "untrained", key, "rank1")
    ok = (on >= off) and (on >= untrained + 30.0) and (off >= untrained + 30.0)
    _report(capsys, "AC-7", ok,
            f"median t2i Rank-1: cmc_on {on:.2f} >= cmc_off {off:.2f}, both >= "
            f"untrained {untrained:.2f} + 30pp")


def test_ac8_rerank_ablation(capsys, ablation_runs):
    details = []
    ok = True
    for direction in ("text_to_image", "image_to_text"):
        plain = _median(ablation_runs, "cmc_on", (direction, False), "map")
        rr = _median(ablation_runs, "cmc_on", (direction, True), "map")
        ok = ok and rr >= plain
        details.append(f"{direction}: {plain:.2f} -> {rr:.2f}")
    _report(capsys, "AC-8", ok, "median mAP plain -> rerank, " + "; ".join(details))


# --------------------------------------------------------------------- AC-9

def test_ac9_queue_sweep_single_command(capsys, tmp_path):
    cfg = tiny_config()
    cfg.train.epochs = 2
    cfg.train.warmup_epochs = 1
    cfg_path = tmp_path / "sweep.cfg"
    cfg_path.write_text(serialize_config(cfg))
    data_path = tmp_path / "data.cmmd"
    assert cli_main(["gen-data", "--config", str(cfg_path),
                     "--out", str(data_path)]) == 0
    out = tmp_path / "sweep.tsv"
    code = cli_main(["ablate", "--config", str(cfg_path), "--data", str(data_path),
                     "--axis", "queue_size", "--seeds", "0",
                     "--queue-sizes", "0,64,256,1024", "--out", str(out)])
    lines = out.read_text().splitlines()
    variants = {line.split("\t")[0] for line in lines[1:]}
    expected = {"queue_0", "queue_64", "queue_256", "queue_1024"}
    # complete table: per variant, 1 seed + median, 2 directions, 2 rerank states
    complete = variants == expected and len(lines) == 1 + 4 * 2 * 2 * 2
    _report(capsys, "AC-9", code == 0 and complete,
            f"one command produced {len(lines) - 1} rows over capacities "
            "{0, 64, 256, 1024}")


# -------------------------------------------------------------------- AC-10

def test_ac10_determinism_and_persistence(capsys, tmp_path):
    cfg = tiny_config()
    cfg.train.epochs = 4
    cfg.train.decay_epochs = (3,)
    cfg.train.checkpoint_every = 2
    dataset = generate_dataset(cfg.data)

    # identical runs: byte-identical logs and checkpoints
    for name in ("a", "b"):
        run_training(dataset, copy.deepcopy(cfg), out_dir=tmp_path / name)
    logs_equal = (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ckpt_equal = (tmp_path / "a" / "checkpoint_final.cmmc").read_bytes() == \
        (tmp_path / "b" / "checkpoint_final.cmmc").read_bytes()

    # resume from the midpoint reproduces the final checkpoint bitwise
    run_training(dataset, copy.deepcopy(cfg), out_dir=tmp_path / "resumed",
                 resume=tmp_path / "a" / "checkpoint_epoch2.cmmc")
    resume_equal = (tmp_path / "resumed" / "checkpoint_final.cmmc").read_bytes() \
        == (tmp_path / "a" / "checkpoint_final.cmmc").read_bytes()

    # feature stores: determinism plus write -> read -> write stability
    from cmm.training import load_checkpoint
    _, model, _, _, _, _ = load_checkpoint(
        tmp_path / "a" / "checkpoint_final.cmmc", dataset=dataset)
    emb, ids = encode_split(model, dataset, "test", "image")
    s1, s2 = tmp_path / "s1.cmmf", tmp_path / "s2.cmmf"
    storage.write_feature_store(s1, emb, ids, "image")
    storage.write_feature_store(s2, emb, ids, "image")
    store_equal = s1.read_bytes() == s2.read_bytes()
    s3 = tmp_path / "s3.cmmf"
    storage.write_feature_store(s3, *storage.read_feature_store(s1))
    store_rt = s1.read_bytes() == s3.read_bytes()

    # dataset and checkpoint round-trips
    d1, d2 = tmp_path / "d1.cmmd", tmp_path / "d2.cmmd"
    storage.write_dataset(d1, dataset)
    storage.write_dataset(d2, storage.read_dataset(d1))
    data_rt = d1.read_bytes() == d2.read_bytes()
    c1 = tmp_path / "a" / "checkpoint_final.cmmc"
    c2 = tmp_path / "c2.cmmc"
    storage.write_checkpoint(c2, *storage.read_checkpoint(c1))
    ckpt_rt = c1.read_bytes() == c2.read_bytes()

    ok = all((logs_equal, ckpt_equal, resume_equal, store_equal, store_rt,
              data_rt, ckpt_rt))
    _report(capsys, "AC-10", ok,
            f"logs {logs_equal}, checkpoints {ckpt_equal}, resume {resume_equal}, "
            f"stores {store_equal}/{store_rt}, dataset rt {data_rt}, "
            f"checkpoint rt {ckpt_rt}")
