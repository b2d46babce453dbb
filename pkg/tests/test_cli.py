"""Command-line surface: flags, exit codes, manifests, idempotence."""

import json

import numpy as np
import pytest

from conftest import random_corpus
from eslong.cli import main
from eslong.encoder import load_model
from eslong.pipeline import ProteinRecord, read_store, write_fasta
from eslong.quant import QuantizedTensor


TOY_CONFIG = {
    "model": {"preset": "toy"},
    "train": {"epochs": 2, "learning_rate": 1e-3, "batch_size": 8, "seed": 0},
}


@pytest.fixture()
def workdir(tmp_path):
    rng = np.random.default_rng(0)
    records = [
        ProteinRecord(f"P{i:03d}", s) for i, s in enumerate(random_corpus(rng, 20, 10, 50))
    ]
    fasta = tmp_path / "corpus.fasta"
    write_fasta(fasta, records)
    config = tmp_path / "config.json"
    config.write_text(json.dumps(TOY_CONFIG))
    return tmp_path, fasta, config, records


class TestPretrain:
    def test_produces_checkpoint_runlog_manifest(self, workdir):
        tmp, fasta, config, _ = workdir
        out = tmp / "toy.eslg"
        assert main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                     "--out", str(out)]) == 0
        assert out.exists()
        runlog = [json.loads(l) for l in open(str(out) + ".runlog.jsonl")]
        assert [r["epoch"] for r in runlog] == [1, 2]
        manifest = json.loads(open(str(out) + ".manifest.json").read())
        assert manifest["command"] == "pretrain"
        assert set(manifest["inputs"]) == {"fasta", "config"}
        assert all(len(v["sha256"]) == 64 for v in manifest["inputs"].values())

    def test_missing_fasta_exits_2(self, workdir):
        tmp, _, config, _ = workdir
        code = main(["pretrain", "--config", str(config),
                     "--fasta", str(tmp / "nope.fasta"), "--out", str(tmp / "x.eslg")])
        assert code == 2

    def test_bad_config_exits_2(self, workdir):
        tmp, fasta, _, _ = workdir
        bad = tmp / "bad.json"
        bad.write_text("{not json")
        assert main(["pretrain", "--config", str(bad), "--fasta", str(fasta),
                     "--out", str(tmp / "x.eslg")]) == 2

    def test_quantized_base_with_lora(self, workdir):
        tmp, fasta, config, _ = workdir
        out = tmp / "qlora.eslg"
        assert main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                     "--out", str(out), "--quantize-base", "--lora-rank", "4"]) == 0
        model = load_model(out)
        assert model.is_quantized()
        assert model.adapters
        assert any(np.any(ad.B) for ad in model.adapters.values())

    def test_quantized_base_without_lora_exits_2(self, workdir):
        tmp, fasta, config, _ = workdir
        assert main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                     "--out", str(tmp / "x.eslg"), "--quantize-base"]) == 2

    def test_seed_flag_changes_outcome(self, workdir):
        tmp, fasta, config, _ = workdir
        a, b, c = (tmp / n for n in ("a.eslg", "b.eslg", "c.eslg"))
        for path, seed in ((a, "1"), (b, "1"), (c, "2")):
            assert main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                         "--out", str(path), "--seed", seed]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()


class TestExtendQuantize:
    @pytest.fixture()
    def base_ckpt(self, workdir):
        tmp, fasta, config, _ = workdir
        out = tmp / "base.eslg"
        assert main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                     "--out", str(out)]) == 0
        return tmp, out

    def test_extend_copy(self, base_ckpt):
        tmp, ckpt = base_ckpt
        out = tmp / "long.eslg"
        assert main(["extend", "--in", str(ckpt), "--out", str(out),
                     "--capacity", "160"]) == 0
        base = load_model(ckpt)
        longer = load_model(out)
        table = longer.params["position_embedding"]
        assert table.shape[0] == 160
        np.testing.assert_array_equal(table[:64], base.params["position_embedding"])
        np.testing.assert_array_equal(table[64], base.params["position_embedding"][0])

    def test_extend_to_2050_header(self, base_ckpt):
        tmp, ckpt = base_ckpt
        out = tmp / "long2050.eslg"
        assert main(["extend", "--in", str(ckpt), "--out", str(out),
                     "--capacity", "2050"]) == 0
        assert load_model(out).config.max_positions == 2050

    def test_extend_capacity_too_small_exits_2(self, base_ckpt):
        tmp, ckpt = base_ckpt
        assert main(["extend", "--in", str(ckpt), "--out", str(tmp / "x.eslg"),
                     "--capacity", "64"]) == 2

    def test_extend_random_reproducible(self, base_ckpt):
        tmp, ckpt = base_ckpt
        a, b = tmp / "ra.eslg", tmp / "rb.eslg"
        for path in (a, b):
            assert main(["extend", "--in", str(ckpt), "--out", str(path),
                         "--capacity", "96", "--strategy", "random", "--seed", "5"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_quantize_then_requantize_identical(self, base_ckpt):
        tmp, ckpt = base_ckpt
        q1, q2 = tmp / "q1.eslg", tmp / "q2.eslg"
        assert main(["quantize", "--in", str(ckpt), "--out", str(q1)]) == 0
        assert main(["quantize", "--in", str(q1), "--out", str(q2)]) == 0
        assert q1.read_bytes() == q2.read_bytes()
        model = load_model(q1)
        assert isinstance(model.params["layers.0.q_proj"], QuantizedTensor)

    def test_quantize_corrupt_input_exits_2(self, base_ckpt):
        tmp, ckpt = base_ckpt
        bad = tmp / "corrupt.eslg"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert main(["quantize", "--in", str(bad), "--out", str(tmp / "x.eslg")]) == 2


class TestEmbed:
    @pytest.fixture()
    def model_and_corpus(self, workdir):
        tmp, fasta, config, records = workdir
        ckpt = tmp / "base.eslg"
        assert main(["pretrain", "--config", str(config), "--fasta", str(fasta),
                     "--out", str(ckpt)]) == 0
        return tmp, fasta, ckpt, records

    def test_slice_counts_in_manifest(self, model_and_corpus):
        tmp, _, ckpt, _ = model_and_corpus
        long_fasta = tmp / "long.fasta"
        rng = np.random.default_rng(1)
        write_fasta(long_fasta, [
            ProteinRecord("LONG1", "".join(rng.choice(list("ACDEFGHIKL"), size=150))),
            ProteinRecord("SHORT", "ACDEF"),
        ])
        out = tmp / "emb.esem"
        assert main(["embed", "--model", str(ckpt), "--fasta", str(long_fasta),
                     "--out", str(out), "--residue-limit", "62"]) == 0
        manifest = json.loads(open(str(out) + ".manifest.json").read())
        assert manifest["extra"]["slice_counts"] == {"LONG1": 3, "SHORT": 1}
        records, dim = read_store(out)
        assert dim == 32
        assert {r.protein_id: r.slice_count for r in records} == {"LONG1": 3, "SHORT": 1}

    def test_workers_do_not_change_bytes(self, model_and_corpus):
        tmp, fasta, ckpt, _ = model_and_corpus
        w1, w8 = tmp / "w1.esem", tmp / "w8.esem"
        assert main(["embed", "--model", str(ckpt), "--fasta", str(fasta),
                     "--out", str(w1), "--residue-limit", "62", "--workers", "1"]) == 0
        assert main(["embed", "--model", str(ckpt), "--fasta", str(fasta),
                     "--out", str(w8), "--residue-limit", "62", "--workers", "8"]) == 0
        assert w1.read_bytes() == w8.read_bytes()

    def test_limit_beyond_capacity_exits_2(self, model_and_corpus):
        tmp, fasta, ckpt, _ = model_and_corpus
        assert main(["embed", "--model", str(ckpt), "--fasta", str(fasta),
                     "--out", str(tmp / "x.esem"), "--residue-limit", "100"]) == 2

    def test_tsv_export(self, model_and_corpus):
        tmp, fasta, ckpt, records = model_and_corpus
        out, tsv = tmp / "e.esem", tmp / "e.tsv"
        assert main(["embed", "--model", str(ckpt), "--fasta", str(fasta),
                     "--out", str(out), "--tsv", str(tsv)]) == 0
        lines = tsv.read_text().strip().splitlines()
        assert len(lines) == len(records)
        assert len(lines[0].split("\t")) == 2 + 32


def build_eval_fixtures(tmp):
    ontology = tmp / "onto.tsv"
    ontology.write_text("alpha\troot\nbeta\troot\n")
    truth = tmp / "truth.tsv"
    truth.write_text("P000\talpha\nP001\tbeta\n")
    pred = tmp / "pred.tsv"
    pred.write_text(
        "P000\talpha\t0.9\nP000\troot\t0.9\nP001\tbeta\t0.8\nP001\troot\t0.8\n"
    )
    return ontology, truth, pred


class TestEvalCommand:
    def test_perfect_predictions_report(self, tmp_path):
        onto, truth, pred = build_eval_fixtures(tmp_path)
        out = tmp_path / "report.json"
        assert main(["eval", "--pred", str(pred), "--truth", str(truth),
                     "--ontology", str(onto), "--namespace", "BPO",
                     "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["fmax"] == pytest.approx(1.0)
        assert report["namespace"] == "BPO"

    def test_id_mismatch_exits_2(self, tmp_path, capsys):
        onto, truth, pred = build_eval_fixtures(tmp_path)
        pred.write_text("GHOST\talpha\t0.9\n")
        code = main(["eval", "--pred", str(pred), "--truth", str(truth),
                     "--ontology", str(onto), "--out", str(tmp_path / "r.json")])
        assert code == 2
        assert "GHOST" in capsys.readouterr().err

    def test_min_length_stratified(self, tmp_path):
        onto, truth, pred = build_eval_fixtures(tmp_path)
        fasta = tmp_path / "lens.fasta"
        write_fasta(fasta, [ProteinRecord("P000", "A" * 1500), ProteinRecord("P001", "AC")])
        out = tmp_path / "strat.json"
        assert main(["eval", "--pred", str(pred), "--truth", str(truth),
                     "--ontology", str(onto), "--fasta", str(fasta),
                     "--min-length", "1024", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["n"] == 1

    def test_min_length_without_fasta_exits_2(self, tmp_path):
        onto, truth, pred = build_eval_fixtures(tmp_path)
        assert main(["eval", "--pred", str(pred), "--truth", str(truth),
                     "--ontology", str(onto), "--min-length", "10",
                     "--out", str(tmp_path / "r.json")]) == 2

    def test_exclude_roots_and_curve_export(self, tmp_path):
        onto, truth, pred = build_eval_fixtures(tmp_path)
        out = tmp_path / "r.json"
        curve = tmp_path / "curve.tsv"
        assert main(["eval", "--pred", str(pred), "--truth", str(truth),
                     "--ontology", str(onto), "--exclude-roots",
                     "--out", str(out), "--curve-tsv", str(curve)]) == 0
        header = curve.read_text().splitlines()[0]
        assert header == "tau\tpr\trc\tf\tm"
