import json

import pytest

from svkit.cli import run
from svkit.config import PipelineConfig, save_config
from svkit.formats import load_checkpoint, read_archive
from svkit.synthetic import write_corpus

TINY = {
    "head": {"tdnn_dim": 16, "embed_dim": 8},
    "train": {"epochs": 1, "batch_size": 4, "chunks_per_utterance": 1, "stage1_chunk": [0.5, 1.0]},
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    paths = write_corpus(root, n_speakers=3, n_utts=3, n_train=1, duration=1.5, sample_rate=8000, seed=1)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    return root, paths, cfg


def test_usage_errors(capsys):
    assert run(["bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err
    assert run([]) == 1
    assert run(["eval", "--scores", "x"]) == 1  # missing required flag
    assert run(["--version"]) == 0


def test_nothing_on_stdout(corpus, tmp_path, capsys):
    root, paths, cfg = corpus
    assert run(["train", "--config", str(cfg), "--manifest", paths["train"], "--out", str(tmp_path / "m.svck")]) == 0
    assert run(["inspect", "--checkpoint", str(tmp_path / "m.svck")]) == 0
    assert run(["eval", "--scores", "missing.tsv", "--key", "missing.tsv", "--out", str(tmp_path / "r.json")]) == 2
    out = capsys.readouterr()
    assert out.out == ""
    assert "error" in out.err


def test_eval_example_set(tmp_path):
    scores = tmp_path / "s.tsv"
    key = tmp_path / "k.tsv"
    rows = [("e", "t1", 0.9, "target"), ("e", "t2", 0.8, "target"), ("e", "t3", 0.3, "target"),
            ("e", "n1", 0.7, "nontarget"), ("e", "n2", 0.2, "nontarget"), ("e", "n3", 0.1, "nontarget")]
    scores.write_text("".join(f"{a}\t{b}\t{s}\n" for a, b, s, _ in rows))
    key.write_text("".join(f"{a}\t{b}\t{lab}\n" for a, b, _, lab in rows))
    out = tmp_path / "r.json"
    table = tmp_path / "r.txt"
    assert run(["eval", "--scores", str(scores), "--key", str(key), "--out", str(out), "--table", str(table)]) == 0
    report = json.loads(out.read_text())
    assert report["eer"] == pytest.approx(1 / 3, abs=1e-12)
    assert report["counts"] == {"nontarget": 3, "target": 3}
    assert "EER(%)" in table.read_text()


def test_extract_cardinality(corpus, tmp_path):
    root, paths, cfg = corpus
    out = tmp_path / "emb.bin"
    feats = tmp_path / "f.bin"
    assert run(["extract", "--config", str(cfg), "--wav-dir", str(root / "wav"), "--out", str(out),
                "--features-out", str(feats)]) == 0
    n_wav = len(list((root / "wav").glob("*.wav")))
    arch = read_archive(out)
    assert len(arch) == n_wav == 9
    assert all(v.shape == (8,) for v in arch.values())
    frames = read_archive(feats)
    assert all(k.startswith("mfb:") for k in frames)
    assert {k.split(":")[1] for k in frames} == set(arch)


def test_bad_config_exits_2(corpus, tmp_path):
    root, paths, _ = corpus
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nonsense": 1}}))
    assert run(["extract", "--config", str(bad), "--wav-dir", str(root / "wav"), "--out", str(tmp_path / "e")]) == 2


def pipeline_outputs(corpus, out_dir, extra=()):
    root, paths, cfg = corpus
    out_dir.mkdir()
    o = {name: out_dir / name for name in ("m.svck", "log.jsonl", "emb.bin", "s.tsv", "r.json", "aug.wav", "aug.json")}
    common = ["--seed", "11", "--threads", "1", *extra]
    assert run(["train", "--config", str(cfg), "--manifest", paths["train"], "--out", str(o["m.svck"]),
                "--log", str(o["log.jsonl"]), *common]) == 0
    assert run(["extract", "--checkpoint", str(o["m.svck"]), "--manifest", paths["eval"],
                "--out", str(o["emb.bin"]), "--threads", "1"]) == 0
    assert run(["score", "--embeddings", str(o["emb.bin"]), "--trials", paths["trials"],
                "--out", str(o["s.tsv"]), "--threads", "1"]) == 0
    assert run(["eval", "--scores", str(o["s.tsv"]), "--key", paths["trials"], "--out", str(o["r.json"])]) == 0
    wav = sorted((root / "wav").glob("*.wav"))[0]
    assert run(["augment", "--config", str(cfg), "--in", str(wav), "--out", str(o["aug.wav"]),
                "--record", str(o["aug.json"]), *common]) == 0
    return {k: v.read_bytes() for k, v in o.items()}


def test_byte_identical_reruns(corpus, tmp_path):
    a = pipeline_outputs(corpus, tmp_path / "a")
    b = pipeline_outputs(corpus, tmp_path / "b")
    for name in a:
        assert a[name] == b[name], name
    meta, _ = load_checkpoint(tmp_path / "a" / "m.svck")
    assert meta["config"]["train"]["seed"] == 11


def test_seed_flag_wins_over_config(corpus, tmp_path):
    root, paths, cfg = corpus
    logs = []
    for seed in ("1", "2"):
        log = tmp_path / f"log{seed}.jsonl"
        assert run(["train", "--config", str(cfg), "--manifest", paths["train"], "--out", str(tmp_path / "m"),
                    "--log", str(log), "--seed", seed]) == 0
        logs.append(log.read_text())
    assert logs[0] != logs[1]


def test_threads_env_fallback(corpus, tmp_path, monkeypatch):
    root, paths, cfg = corpus
    monkeypatch.setenv("SVKIT_THREADS", "1")
    assert run(["train", "--config", str(cfg), "--manifest", paths["train"], "--out", str(tmp_path / "m")]) == 0


def test_score_snorm_and_chnorm_flags(corpus, tmp_path):
    root, paths, cfg = corpus
    emb = tmp_path / "e.bin"
    assert run(["extract", "--config", str(cfg), "--wav-dir", str(root / "wav"), "--out", str(emb)]) == 0
    ids = list(read_archive(emb))
    meta = tmp_path / "src.tsv"
    meta.write_text("".join(f"{u}\ttel\n" for u in ids))
    out = tmp_path / "s.tsv"
    base = ["score", "--embeddings", str(emb), "--trials", paths["trials"], "--out", str(out)]
    assert run(base + ["--snorm"]) == 2  # no cohort
    assert run(base + ["--snorm", "--cohort", str(emb), "--cohort-k", "3", "--src-meta", str(meta), "--chnorm"]) == 0
    assert len(out.read_text().splitlines()) == len(open(paths["trials"]).read().splitlines())
    assert run(base + ["--chnorm"]) == 2  # no source metadata


def test_inspect_outputs(tmp_path):
    out = tmp_path / "schema.json"
    assert run(["inspect", "--schema", "--out", str(out)]) == 0
    assert "properties" in json.loads(out.read_text())
    assert run(["inspect", "--default-config", "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == PipelineConfig().to_dict()
    assert run(["inspect"]) == 1


@pytest.fixture(scope="module")
def corpus16k(tmp_path_factory):
    root = tmp_path_factory.mktemp("c16")
    paths = write_corpus(root, n_speakers=3, n_utts=3, n_train=1, duration=1.2, sample_rate=16000, seed=2)
    cfg = PipelineConfig.from_dict({
        **TINY,
        "audio": {"features": "encoder", "sample_rate": 16000},
        "augment": {"enabled": False},
        "encoder": {"n_layers": 3, "truncate_layer": 3},
    })
    cfg_path = root / "cfg.json"
    save_config(cfg, cfg_path)
    return root, paths, cfg_path


def test_ablate_layers_cli(corpus16k, tmp_path):
    root, paths, cfg = corpus16k
    table = tmp_path / "t.txt"
    rows = tmp_path / "t.json"
    args = ["ablate-layers", "--config", str(cfg), "--manifest", paths["train"], "--eval-manifest", paths["eval"],
            "--trials", paths["trials"], "--out", str(table), "--json", str(rows), "--threads", "1"]
    assert run(args + ["--layers", "1,3"]) == 0
    data = json.loads(rows.read_text())
    assert [r["layer"] for r in data] == [1, 3]
    lines = table.read_text().splitlines()
    assert len(lines) == 6 and "Layer" in lines[1]
    assert run(args + ["--layers", "1,4"]) == 2
    assert run(args + ["--layers", "0"]) == 2
    assert run(args + ["--layers", "x"]) == 2


def test_augment_rate_mismatch(corpus16k, corpus, tmp_path):
    _, _, cfg8 = corpus
    root16, _, _ = corpus16k
    wav = sorted((root16 / "wav").glob("*.wav"))[0]
    assert run(["augment", "--config", str(cfg8), "--in", str(wav), "--out", str(tmp_path / "a.wav")]) == 2
