"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to stream them).

Criteria cover attention equivalence and cost scaling, context extension,
the int4 codec, gradient correctness, training progress, LoRA contracts,
segmentation, the Fmax oracle, ontology closures, the end-to-end CLI chain,
and the long-context direction check on a synthetic corpus.
"""

import hashlib
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import random_corpus, tiny_config
from gradcheck import finite_difference, relative_error
from eslong.attention import AttentionSpec, global_attention, local_attention, score_op_count
from eslong.cli import main as cli_main
from eslong.encoder import (
    build_model,
    extend_context,
    forward,
    model_astype,
    preset_config,
    tokenize,
    with_attention,
)
from eslong.evaluation import fmax
from eslong.head import HeadConfig, bce_loss_and_grads, init_head, predict, train_head
from eslong.ontology import close_scores, close_truth, load_ontology
from eslong.pipeline import ProteinRecord, embed_corpus, segment, write_fasta
from eslong.quant import (
    dequantize,
    memory_footprint,
    param_family,
    qmatmul,
    quantize_int4,
    quantize_model,
    unpack_codes,
)
from eslong.tensor_ops import matmul
from eslong.training import (
    TrainConfig,
    attach_lora,
    get_trainable,
    lora_target_names,
    merge_lora,
    mlm_loss,
    pretrain,
)
from test_evaluation import bruteforce_fmax
from test_ontology import bfs_ancestors, edges_tsv, random_dag


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number:02d} {name}: FAIL")
        raise
    print(f"ACCEPTANCE {number:02d} {name}: PASS")


def test_c01_attention_equivalence():
    with criterion(1, "local/global equivalence on covering windows"):
        started = time.monotonic()
        rng = np.random.default_rng(101)
        for _ in range(200):
            n = int(rng.integers(1, 65))
            d = int(rng.integers(1, 9))
            q, k, v = (rng.normal(size=(n, d)).astype(np.float32) for _ in range(3))
            pad = [False] * n
            window_k = max(2, 2 * (n - 1))
            diff = np.abs(
                local_attention(q, k, v, pad, window_k) - global_attention(q, k, v, pad)
            ).max()
            assert diff <= 1e-6
        assert time.monotonic() - started < 10.0


def test_c02_cost_scaling():
    with criterion(2, "instrumented score counts: affine local, quadratic global"):
        ns = [64, 128, 256, 512, 1024]
        local_spec = AttentionSpec("local", 1, 4, window_k=32)
        counts = [score_op_count(n, local_spec) for n in ns]
        slope = (counts[1] - counts[0]) // (ns[1] - ns[0])
        intercept = counts[0] - slope * ns[0]
        residuals = [c - (slope * n + intercept) for n, c in zip(ns, counts)]
        assert residuals == [0, 0, 0, 0, 0]
        global_spec = AttentionSpec("global", 1, 4)
        for n in ns:
            assert score_op_count(n, global_spec) == n * n


def test_c03_context_extension():
    with criterion(3, "context extension preserves short-input behavior"):
        model = build_model(preset_config("toy"), seed=7)
        extended = extend_context(model, 160, strategy="copy")
        old = model.params["position_embedding"]
        new = extended.params["position_embedding"]
        for p in range(64, 160):
            np.testing.assert_array_equal(new[p], old[p % 64])
        rng = np.random.default_rng(103)
        for length in range(0, 63):
            seq = "".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), size=length))
            toks = tokenize(seq, model.config)
            diff = np.abs(forward(extended, toks) - forward(model, toks)).max()
            assert diff <= 1e-6


def test_c04_quantization_codec():
    with criterion(4, "int4 codec bound, qmatmul oracle, payload ratio"):
        rng = np.random.default_rng(104)
        w = (rng.normal(0, 2.0, size=10**6) * rng.choice([0.01, 1.0, 50.0], size=10**6)
             ).astype(np.float32)
        q = quantize_int4(w, 64)
        codes = unpack_codes(q.packed, q.numel).astype(np.float64)
        scales = np.repeat(q.scales.astype(np.float64), 64)[: q.numel]
        err = np.abs(codes * scales - w.astype(np.float64))
        assert (err <= scales / 2.0).all()

        for trial in range(100):
            m = int(rng.integers(1, 9))
            kdim = int(rng.integers(1, 129))
            ncol = int(rng.integers(1, 17))
            block = int(rng.integers(1, 97))
            a = rng.normal(size=(m, kdim)).astype(np.float32)
            wq = quantize_int4(rng.normal(size=(kdim, ncol)).astype(np.float32), block)
            oracle = matmul(a, dequantize(wq))
            assert np.abs(qmatmul(a, wq) - oracle).max() <= 1e-5

        toy = build_model(preset_config("toy"), seed=7)
        base = memory_footprint(toy)
        quant = memory_footprint(quantize_model(toy))
        linear_real = base["attention"] + base["ffn"]
        linear_int4 = quant["attention"] + quant["ffn"]
        assert linear_int4 < linear_real / 6.0


def test_c05_gradient_correctness():
    with criterion(5, "finite-difference agreement for every tensor family"):
        started = time.monotonic()
        cfg = preset_config("toy")
        model = model_astype(build_model(cfg, seed=5), np.float64)
        toks = tokenize("ACDEFGHIKLMNP", cfg)
        masked = [list(toks)]
        masked[0][3] = cfg.vocab.mask_id
        masked[0][7] = cfg.vocab.mask_id
        labels = [[(3, toks[3]), (5, toks[5]), (7, toks[7])]]
        _, grads = mlm_loss(model, masked, labels)
        rng = np.random.default_rng(105)
        for key, arr in get_trainable(model).items():
            flat = arr.reshape(-1)
            n_sample = min(flat.size, 60)
            idx = rng.choice(flat.size, size=n_sample, replace=False)
            numeric = np.zeros(n_sample)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + 1e-3
                up, _ = mlm_loss(model, masked, labels)
                flat[i] = orig - 1e-3
                down, _ = mlm_loss(model, masked, labels)
                flat[i] = orig
                numeric[j] = (up - down) / 2e-3
            analytic = grads[key].reshape(-1)[idx]
            assert relative_error(analytic, numeric) <= 1e-3, key

        head_cfg = HeadConfig(input_dim=32, num_terms=4, hidden_dim=16, epochs=1)
        head = init_head(head_cfg, ["a", "b", "c", "d"], seed=6)
        params = {k: v.astype(np.float64) for k, v in head.params.items()}
        x = rng.normal(size=(5, 32))
        y = (rng.random((5, 4)) < 0.5).astype(np.float64)
        _, hgrads = bce_loss_and_grads(params, x, y)
        for key, arr in params.items():
            numeric = finite_difference(lambda: bce_loss_and_grads(params, x, y)[0], arr)
            assert relative_error(hgrads[key], numeric) <= 1e-3, key
        assert time.monotonic() - started < 60.0


def test_c06_pretraining_progress():
    with criterion(6, "five-epoch masked-LM progress at toy scale"):
        rng = np.random.default_rng(106)
        corpus = random_corpus(rng, 50, 10, 50)
        model = build_model(preset_config("toy"), seed=9)
        vocab_size = model.config.vocab.size
        zeroed = type(model)(
            config=model.config,
            params={**model.params, "mlm_head": np.zeros_like(model.params["mlm_head"])},
        )
        cfg = TrainConfig(epochs=5, learning_rate=1e-3, seed=13)
        from eslong.training import derive_seed, mask_batch

        mask_rng = np.random.default_rng(derive_seed(cfg.seed, "masking"))
        toks = [tokenize(s, model.config) for s in corpus[:8]]
        masked, labels = mask_batch(toks, cfg, mask_rng)
        initial_loss, _ = mlm_loss(zeroed, masked, labels)
        assert abs(initial_loss - math.log(vocab_size)) <= 0.1

        _, curve = pretrain(model, corpus, cfg)
        assert len(curve) == 5
        assert curve[4] < curve[0]


def test_c07_lora_contracts():
    with criterion(7, "adapter no-op, merge identity, frozen base"):
        model = build_model(preset_config("toy"), seed=11)
        targets = lora_target_names(model.config)
        adapted = attach_lora(model, targets, rank=4, alpha=16.0, seed=2)
        toks = tokenize("ACDEFGHIKLMNPQRSTVWY", model.config)
        np.testing.assert_array_equal(forward(adapted, toks), forward(model, toks))

        merged = merge_lora(adapted)
        for name in model.params:
            np.testing.assert_array_equal(merged.params[name], model.params[name])

        def base_hash(m):
            digest = hashlib.sha256()
            for name in sorted(m.params):
                digest.update(m.params[name].tobytes())
            return digest.hexdigest()

        before = base_hash(adapted)
        rng = np.random.default_rng(107)
        corpus = random_corpus(rng, 15, 10, 40)
        trained, _ = pretrain(adapted, corpus, TrainConfig(epochs=2, learning_rate=1e-2, seed=3))
        assert base_hash(trained) == before
        assert any(np.any(trained.adapters[t].B) for t in targets)


def test_c08_segmentation_worked_example():
    with criterion(8, "3000-residue slicing at limits 1022 and 2046"):
        seq = "A" * 3000
        assert [len(s) for s in segment(seq, 1022)] == [1022, 1022, 956]
        assert [len(s) for s in segment(seq, 2046)] == [2046, 954]


def test_c09_fmax_oracle():
    with criterion(9, "grid Fmax vs exhaustive sweep on random instances"):
        rng = np.random.default_rng(109)
        for _ in range(500):
            n_terms = int(rng.integers(2, 9))
            names, parents = random_dag(rng, n_terms)
            graph = load_ontology(edges_tsv(parents), "BPO")
            truth = {}
            pred = {}
            for i in range(int(rng.integers(1, 11))):
                pid = f"P{i}"
                leaves = [n for n in names if rng.random() < 0.35] or [names[-1]]
                truth[pid] = {t: 1.0 for t in leaves}
                scored = {
                    t: float(rng.integers(1, 100)) / 100.0
                    for t in names
                    if rng.random() < 0.5
                }
                if scored:
                    pred[pid] = scored
            closed = close_truth(truth, graph)
            grid_result = fmax(pred, closed).fmax
            brute = bruteforce_fmax(pred, closed)
            assert abs(grid_result - brute) <= 0.01 + 1e-12
            # scores sit on the grid, so agreement is in fact exact
            assert grid_result == pytest.approx(brute, abs=1e-12)

        pred = {"A": {"t1": 0.9, "t3": 0.8}, "B": {"t2": 0.7}}
        truth = {"A": {"t1": 1.0, "t2": 1.0}, "B": {"t2": 1.0}}
        assert fmax(pred, truth).fmax == 0.75


def test_c10_true_path_closure():
    with criterion(10, "ancestor closure and score consistency on random DAGs"):
        rng = np.random.default_rng(110)
        for _ in range(200):
            names, parents = random_dag(rng, int(rng.integers(3, 14)))
            graph = load_ontology(edges_tsv(parents), "BPO")
            leaves = [n for n in names if rng.random() < 0.4] or [names[-1]]
            closed = close_truth({"P": {t: 1.0 for t in leaves}}, graph)
            expected = set(leaves)
            for t in leaves:
                expected |= bfs_ancestors(parents, t)
            assert set(closed["P"]) == expected

            pred = {"P": {n: float(rng.random()) for n in names if rng.random() < 0.6}}
            scored = close_scores(pred, graph)["P"]
            for child, ps in parents.items():
                if child in scored:
                    for parent in ps:
                        assert scored[parent] >= scored[child]


def _smoke_run(base, seed):
    """Full CLI chain in one directory; returns digests of every data artifact."""
    base.mkdir()
    rng = np.random.default_rng(111)
    records = [
        ProteinRecord(f"P{i:02d}", "".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"),
                                                      size=150 if i == 0 else int(rng.integers(8, 60)))))
        for i in range(20)
    ]
    fasta = base / "corpus.fasta"
    write_fasta(fasta, records)
    config = base / "config.json"
    config.write_text(json.dumps({
        "model": {"preset": "toy"},
        "train": {"epochs": 2, "learning_rate": 1e-3, "batch_size": 8, "seed": seed},
    }))
    onto = base / "onto.tsv"
    onto.write_text("alpha\troot\nbeta\troot\n")
    truth = base / "truth.tsv"
    truth.write_text("".join(
        f"{r.id}\t{'alpha' if r.sequence[0] in 'ACDEFGHIK' else 'beta'}\n" for r in records
    ))

    ckpt = base / "toy.eslg"
    longer = base / "long.eslg"
    quant = base / "quant.eslg"
    store = base / "emb.esem"
    headck = base / "head.eslg"
    pred = base / "pred.tsv"
    report = base / "report.json"

    assert cli_main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                     "--out", str(ckpt), "--seed", str(seed)]) == 0
    assert cli_main(["extend", "--in", str(ckpt), "--out", str(longer),
                     "--capacity", "160"]) == 0
    assert cli_main(["quantize", "--in", str(longer), "--out", str(quant)]) == 0
    assert cli_main(["embed", "--model", str(quant), "--fasta", str(fasta),
                     "--out", str(store), "--residue-limit", "62"]) == 0
    with open(str(store) + ".manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["extra"]["slice_counts"]["P00"] == 3
    assert cli_main(["train-head", "--embeddings", str(store), "--val-embeddings", str(store),
                     "--truth", str(truth), "--ontology", str(onto),
                     "--out", str(headck), "--hidden", "16", "--epochs", "8",
                     "--lr", "5e-3", "--batch", "8", "--seed", str(seed)]) == 0
    assert cli_main(["predict", "--head", str(headck), "--embeddings", str(store),
                     "--out", str(pred), "--ontology", str(onto), "--close-scores"]) == 0
    assert cli_main(["eval", "--pred", str(pred), "--truth", str(truth),
                     "--ontology", str(onto), "--namespace", "BPO",
                     "--out", str(report)]) == 0
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in (ckpt, longer, quant, store, headck, pred, report)
    }


def test_c11_end_to_end_smoke(tmp_path):
    with criterion(11, "CLI chain pretrain->extend->quantize->embed->head->eval"):
        started = time.monotonic()
        run1 = _smoke_run(tmp_path / "run1", seed=5)
        run2 = _smoke_run(tmp_path / "run2", seed=5)
        assert run1 == run2
        assert time.monotonic() - started < 300.0


FRONT_POSITIONS = (4, 12, 20, 28, 36, 44, 52, 60)
NOISE_POSITIONS = (1, 2, 63, 64)  # slice-local {1, 2} in both 62-residue slices
NOISE_RESIDUES = "CDEFGHIKLMNPQRSTVY"


def _positional_corpus(rng, count):
    """Length-126 proteins over a constant 'A' background: class A plants W at
    FRONT_POSITIONS, class B at the same offsets shifted +62, i.e. into the
    second limit-62 slice. Slicing at 62 puts both motifs at identical
    slice-local positions (and the noise positions match slice-locally too),
    so a model that restarts positions per slice sees the two classes as the
    same distribution, while a single 126-residue window sees the motifs at
    genuinely different absolute positions."""
    records, labels = [], {}
    for i in range(count):
        body = np.array(list("A" * 126))
        is_back = i % 2 == 1
        positions = [p + 62 for p in FRONT_POSITIONS] if is_back else FRONT_POSITIONS
        for p in positions:
            body[p] = "W"
        for p in NOISE_POSITIONS:
            body[p] = rng.choice(list(NOISE_RESIDUES))
        pid = f"S{i:03d}"
        records.append(ProteinRecord(pid, "".join(body)))
        labels[pid] = {"back_motif" if is_back else "front_motif": 1.0}
    return records, labels


def _direction_val_fmax(model, limit, records, closed, head_seed):
    train, val = records[:60], records[60:]
    train_emb, fail1 = embed_corpus(model, train, limit)
    val_emb, fail2 = embed_corpus(model, val, limit)
    assert not fail1 and not fail2
    cfg = HeadConfig(input_dim=32, num_terms=3, hidden_dim=16,
                     learning_rate=1e-2, epochs=30, batch_size=16, seed=head_seed)
    head, _ = train_head(train_emb, closed, cfg, val_emb)
    val_truth = {r.id: closed[r.id] for r in val}
    return fmax(predict(head, val_emb), val_truth).fmax


def test_c12_long_context_direction_check():
    with criterion(12, "long window beats position-aliased slicing (3 seeds)"):
        graph = load_ontology("front_motif\troot\nback_motif\troot\n", "BPO")
        wins = 0
        for seed in (1, 2, 3):
            rng = np.random.default_rng(200 + seed)
            records, labels = _positional_corpus(rng, 90)
            closed = close_truth(labels, graph)
            corpus = [r.sequence for r in records[:60]]
            base = build_model(preset_config("toy"), seed=seed)
            slices = [piece for s in corpus for piece in segment(s, 62)]
            base_trained, _ = pretrain(
                base, slices, TrainConfig(epochs=2, learning_rate=1e-3, seed=seed)
            )
            long_model = with_attention(
                extend_context(base_trained, 128, strategy="copy"), "local", window_k=64
            )
            long_trained, _ = pretrain(
                long_model, corpus, TrainConfig(epochs=2, learning_rate=1e-3, seed=seed)
            )
            standard_fmax = _direction_val_fmax(base_trained, 62, records, closed, seed)
            long_fmax = _direction_val_fmax(long_trained, 126, records, closed, seed)
            if long_fmax > standard_fmax:
                wins += 1
        assert wins >= 2, f"long model won only {wins}/3 seeds"
