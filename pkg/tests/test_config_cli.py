import json

import pytest

from bptrank import cli
from bptrank.config import CONFIG_VERSION, PipelineConfig
from bptrank.errors import ConfigError
from bptrank.mining import TripletRecord, write_triplets

# ---------------------------------------------------------------- config


def test_large_preset_values():
    cfg = PipelineConfig.preset("paper")
    expected = {
        "model.n_heads": 32,
        "model.q_chunk": 32,
        "model.kv_chunk": 32,
        "model.max_seq_len": 1024,
        "model.pooling": "mean",
        "train.batch_size": 512,
        "eval.batch_size": 512,
        "train.learning_rate": 5e-5,
        "train.memory_bank_size": 512,
        "train.recompute_activations": True,
        "train.scheduler": "cosine",
        "train.epochs": 10,
        "train.grad_accum_steps": 2,
        "corpus.min_len": 512,
        "corpus.max_len": 1024,
    }
    for key, val in expected.items():
        assert cfg.get(key) == val, key
    tc = cfg.train_config()
    assert (tc.learning_rate, tc.epochs, tc.grad_accum_steps, tc.memory_bank_size) == (5e-5, 10, 2, 512)
    att = cfg.model_config(1000).attention
    assert (att.n_heads, att.q_chunk, att.kv_chunk, att.max_seq_len) == (32, 32, 32, 1024)


def test_toy_preset_validates():
    cfg = PipelineConfig.preset("toy").validate()
    assert cfg.get("pipeline.version") == CONFIG_VERSION
    assert cfg.get("corpus.min_len") == 32 and cfg.get("corpus.max_len") == 64
    with pytest.raises(ConfigError):
        PipelineConfig.preset("huge")


def test_unknown_key_names_path():
    with pytest.raises(ConfigError) as info:
        PipelineConfig.preset("toy").with_overrides(["train.warmup=3"])
    assert info.value.key == "train.warmup"
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_ini("[model]\nwidth = 3\n")
    assert info.value.key == "model.width"
    with pytest.raises(ConfigError):
        PipelineConfig.from_ini("[extras]\nx = 1\n")


def test_bad_values():
    with pytest.raises(ConfigError):
        PipelineConfig.preset("toy").with_overrides(["train.epochs=many"])
    with pytest.raises(ConfigError):
        PipelineConfig.preset("toy").with_overrides(["corpus.min_len=100"]).validate()
    with pytest.raises(ConfigError):
        PipelineConfig.preset("toy").with_overrides(["bench.n_queries=10"]).validate()


def test_ini_round_trip_and_hash():
    cfg = PipelineConfig.preset("toy").with_overrides(["train.epochs=3", "eval.seeds=4,5", "mining.lam=0.25"])
    back = PipelineConfig.from_ini(cfg.to_ini())
    assert back == cfg and back.hash() == cfg.hash()
    assert back.get("eval.seeds") == [4, 5]
    assert cfg.hash() != PipelineConfig.preset("toy").hash()
    assert PipelineConfig.preset("toy").hash() == PipelineConfig.preset("toy").hash()


def test_ini_layers_over_base():
    cfg = PipelineConfig.from_ini("[train]\nepochs = 2\n", base=PipelineConfig.preset("paper"))
    assert cfg.get("train.epochs") == 2 and cfg.get("model.n_heads") == 32


# ------------------------------------------------------------------- CLI


def test_cli_unknown_key_exit_2(tmp_path, capsys):
    assert cli.main(["chunk", "--out", str(tmp_path), "--set", "train.bogus=1"]) == 2
    assert "train.bogus" in capsys.readouterr().err


def test_cli_bad_config_file(tmp_path, capsys):
    bad = tmp_path / "c.ini"
    bad.write_text("[mining]\ntopk = 5\n")
    assert cli.main(["chunk", "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert "mining.topk" in capsys.readouterr().err


def test_cli_missing_input_exit_3(tmp_path, capsys):
    assert cli.main(["mine", "--out", str(tmp_path), "--input", str(tmp_path / "nope.jsonl")]) == 3
    assert "error[missing-input]" in capsys.readouterr().err
    assert cli.main(["chunk", "--out", str(tmp_path), "--config", str(tmp_path / "none.ini")]) == 3


def test_cli_runtime_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "docs.jsonl"
    bad.write_text("{not json\n")
    assert cli.main(["normalize", "--out", str(tmp_path), "--input", str(bad)]) == 1
    assert "error[runtime" in capsys.readouterr().err


def test_cli_normalize(tmp_path):
    docs = tmp_path / "docs.jsonl"
    docs.write_text(json.dumps({"id": "a", "source": "wiki", "text": "Hoà bình."}, ensure_ascii=False) + "\n", encoding="utf-8")
    assert cli.main(["normalize", "--out", str(tmp_path), "--input", str(docs)]) == 0
    out = json.loads((tmp_path / "normalized.jsonl").read_text(encoding="utf-8"))
    assert out["text"] == "Hòa bình."


def test_cli_chunk_mine_deterministic_with_manifest(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["chunk", "--out", str(out)]) == 0
    chunks = out / "chunks.jsonl"
    assert len(chunks.read_text(encoding="utf-8").splitlines()) == 200
    assert cli.main(["mine", "--out", str(out / "a"), "--input", str(chunks), "--seed", "7"]) == 0
    a = (out / "a" / "triplets.jsonl").read_bytes()
    ma = json.loads((out / "a" / "manifest.json").read_text())
    assert cli.main(["mine", "--out", str(out / "a"), "--input", str(chunks), "--seed", "7"]) == 0
    assert a == (out / "a" / "triplets.jsonl").read_bytes()
    for line in a.decode("utf-8").splitlines():
        rec = json.loads(line)
        assert sorted(rec) == ["neg", "pos", "query"] and len(rec["neg"]) == 3
    mb = json.loads((out / "a" / "manifest.json").read_text())
    assert ma["command"] == "mine" and ma["config_hash"] == mb["config_hash"]
    assert ma["config"]["pipeline"]["seed"] == 7
    assert ma["artifacts"]["triplets"].endswith("triplets.jsonl")
    assert cli.main(["mine", "--out", str(out / "c"), "--input", str(chunks), "--seed", "8"]) == 0
    assert (out / "c" / "triplets.jsonl").read_bytes() != a


def test_cli_train_rerank_eval_bench(tmp_path, capsys):
    recs = [TripletRecord(f"câu hỏi {i}", (f"đoạn văn đúng {i} có từ khóa {i}",), (f"đoạn sai {j}" for j in range(3)))
            for i in range(6)]
    trip = tmp_path / "t.jsonl"
    write_triplets(recs, trip)
    common = ["--out", str(tmp_path), "--set", "model.d_model=16", "--set", "model.n_heads=2",
              "--set", "model.q_chunk=8", "--set", "model.kv_chunk=8", "--set", "model.max_seq_len=32",
              "--set", "train.epochs=2"]
    assert cli.main(["train", "--input", str(trip)] + common) == 0
    model = tmp_path / "model.ckpt"
    assert model.is_file()
    assert (tmp_path / "loss.csv").read_text().startswith("step,lr,triplet_loss,bank_loss,total\n")

    cands = tmp_path / "cands.jsonl"
    cands.write_text("".join(json.dumps({"id": f"d{i}", "text": recs[i].pos[0]}, ensure_ascii=False) + "\n"
                             for i in range(4)), encoding="utf-8")
    capsys.readouterr()
    assert cli.main(["rerank", "--model", str(model), "--query", "câu hỏi 1", "--candidates", str(cands)] + common) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 4
    ranks = [line.split("\t") for line in printed]
    assert [r[0] for r in ranks] == ["1", "2", "3", "4"]
    scores = [float(r[2]) for r in ranks]
    assert scores == sorted(scores, reverse=True)
    assert (tmp_path / "reranked.tsv").read_text().strip().splitlines() == printed

    (tmp_path / "q.jsonl").write_text(json.dumps({"query_id": "q1", "query": "câu hỏi 1", "candidates": ["d0", "d1", "d2", "d3"]},
                                                 ensure_ascii=False) + "\n", encoding="utf-8")
    (tmp_path / "qrels.tsv").write_text("q1\td1\t1\n")
    assert cli.main(["eval", "--model", str(model), "--candidates", str(tmp_path / "q.jsonl"), "--qrels",
                     str(tmp_path / "qrels.tsv"), "--texts", str(cands), "--set", "eval.seeds=0"] + common) == 0
    names = [r["name"] for r in json.loads((tmp_path / "metrics.json").read_text())]
    assert names == ["model", "bm25"]

    assert cli.main(["bench", "--model", str(model), "--set", "bench.batch_size=8"] + common) == 0
    assert (tmp_path / "bench.csv").read_text().splitlines()[0] == "Hardware,Batch,LatencyMs,PeakBytes,QPS"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "bench" and "bench_csv" in manifest["artifacts"]


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
