import json

import numpy as np
import pytest
import yaml

from domainmt import tensor as T
from domainmt.bench import cmd_bench_speed, rows_to_csv
from domainmt.checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from domainmt.cli import AlignmentError, VocabMismatchError, cmd_evaluate, cmd_translate, main
from domainmt.config import ConfigError, config_from_dict, dump_config, load_config
from domainmt.corpus import make_batch, read_records, source_batch
from domainmt.decoding import generate_all_domains
from domainmt.metrics import mbleu, pairwise_bleu
from domainmt.train import RunLockedError, run_lock, run_training

TINY = {
    "steps": 12,
    "valid_every": 6,
    "log_every": 1,
    "batch_size": 8,
    "model": {"d_model": 16, "d_ff": 24, "n_layers": 1, "n_domains": 4},
    "optimizer": {"warmup": 4, "lr_peak": 1e-3},
    "data": {"synth": {"n_train": 64, "n_valid": 16, "n_test": 10}},
}


def tiny_config(tmp_path, name="run", **over):
    d = json.loads(json.dumps(TINY))
    for k, v in over.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    d["output_dir"] = str(tmp_path / name)
    return config_from_dict(d)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    res = run_training(tiny_config(tmp))
    return res.output_dir


# -- config ---------------------------------------------------------------------------
def test_config_rejects_unknown_and_mistyped_fields():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"stepz": 3})
    with pytest.raises(ConfigError, match="model"):
        config_from_dict({"model": {"d_model": "big"}})
    with pytest.raises(ConfigError, match="integer"):
        config_from_dict({"steps": 1.5})
    with pytest.raises(ConfigError, match="method"):
        config_from_dict({"method": "gan"})
    with pytest.raises(ConfigError, match="dropout"):
        config_from_dict({"model": {"dropout_target_enc": 0.1}})


def test_method_specific_fields_are_validated():
    with pytest.raises(ConfigError, match="target_encoder"):
        config_from_dict({"method": "moe", "lam": 1.0})
    with pytest.raises(ConfigError, match="target_encoder"):
        config_from_dict({"method": "vanilla", "schedule": {"p_hard": 0.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"method": "moe", "target_encoder_input": "source"})
    config_from_dict({"method": "moe"})


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, lam=0.5, schedule={"p_hard": 0.1})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    path.write_text("steps: [unclosed")
    with pytest.raises(ConfigError):
        load_config(path)


def test_output_dir_environment_override(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    monkeypatch.setenv("DOMAINMT_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert cfg.resolved_output_dir() == tmp_path / "elsewhere"


# -- training runs --------------------------------------------------------------------
def test_run_directory_contents(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.yaml", "log.jsonl", "checkpoint.bin", "data"} <= names
    assert ".lock" not in names
    recs = [json.loads(line) for line in (trained / "log.jsonl").read_text().splitlines()]
    assert recs[0]["kind"] == "config"
    assert recs[0]["config"]["model"]["tgt_vocab_size"] == 25  # resolved from the data
    assert [r["step"] for r in recs if r["kind"] == "train"] == list(range(12))
    assert [r["step"] for r in recs if r["kind"] == "valid"] == [5, 11]
    assert recs[-1]["kind"] == "summary" and recs[-1]["decoder_forwards_per_step"] == 1.0


def test_identical_runs_give_identical_checkpoints(trained, tmp_path):
    again = run_training(tiny_config(tmp_path))
    # output_dir differs, so compare everything but the config echo
    a = checkpoint_load(trained / "checkpoint.bin")
    b = checkpoint_load(again.output_dir / "checkpoint.bin")
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    la = [json.loads(x) for x in (trained / "log.jsonl").read_text().splitlines()[1:]]
    lb = [json.loads(x) for x in (again.output_dir / "log.jsonl").read_text().splitlines()[1:]]
    assert la == lb


def test_moe_run_reports_n_plus_one_forwards(tmp_path):
    res = run_training(tiny_config(tmp_path, method="moe", steps=3, model={"n_domains": 3}))
    recs = [json.loads(x) for x in (res.output_dir / "log.jsonl").read_text().splitlines()]
    assert [r["decoder_forwards"] for r in recs if r["kind"] == "train"] == [4, 4, 4]
    assert recs[-1]["decoder_forwards_per_step"] == 4.0


def test_vanilla_equals_single_domain_target_encoder(tmp_path):
    a = run_training(tiny_config(tmp_path, "a", method="vanilla", steps=6, model={"n_domains": 1}), write=False)
    b = run_training(tiny_config(tmp_path, "b", lam=0.0, steps=6, model={"n_domains": 1}), write=False)
    assert [r.nll for r in a.reports] == [r.nll for r in b.reports]


def test_lock_blocks_a_second_writer(tmp_path):
    with run_lock(tmp_path / "x"):
        with pytest.raises(RunLockedError):
            with run_lock(tmp_path / "x"):
                pass
    with run_lock(tmp_path / "x"):
        pass


# -- checkpoints ----------------------------------------------------------------------
def test_checkpoint_round_trip_is_byte_and_logit_exact(trained, tmp_path):
    src = trained / "checkpoint.bin"
    ck = checkpoint_load(src)
    out = tmp_path / "again.bin"
    checkpoint_save(out, ck)
    assert out.read_bytes() == src.read_bytes()
    assert ck.adam is not None and ck.adam.step == 12 and ck.step == 12
    m = ck.build_model().eval()
    b = make_batch([[4, 5, 6], [7, 9]], [[6, 5], [9, 7, 8]])
    with T.no_grad():
        l1 = m.decode_teacher_forced(m.encode_source(b.src), m.domain_embedding([0, 3]), b.tgt_in).data
        m2 = checkpoint_load(out).build_model().eval()
        l2 = m2.decode_teacher_forced(m2.encode_source(b.src), m2.domain_embedding([0, 3]), b.tgt_in).data
    np.testing.assert_array_equal(l1, l2)


def test_damaged_checkpoints_fail_cleanly(trained, tmp_path):
    raw = (trained / "checkpoint.bin").read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_load(bad)
    bad.write_bytes(b"NOPE" + raw)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(bad)
    head, rest = raw.split(b"\n", 2)[1], raw.split(b"\n", 2)[2]
    h = json.loads(head)
    h["config"]["model"]["d_model"] = 32
    bad.write_bytes(b"DOMAINMT-CKPT\n" + json.dumps(h).encode() + b"\n" + rest)
    with pytest.raises(CheckpointError):
        checkpoint_load(bad)
    h["version"] = 99
    bad.write_bytes(b"DOMAINMT-CKPT\n" + json.dumps(h).encode() + b"\n" + rest)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(bad)


# -- translate / evaluate -------------------------------------------------------------
def test_translate_writes_n_records_per_source_reproducibly(trained, tmp_path):
    corpus = trained / "data" / "test.jsonl"
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cmd_translate(trained / "checkpoint.bin", corpus, a) == 40
    cmd_translate(trained / "checkpoint.bin", corpus, b)
    assert a.read_bytes() == b.read_bytes()
    recs = [json.loads(x) for x in a.read_text().splitlines()]
    assert [r["domain"] for r in recs[:4]] == [0, 1, 2, 3]
    assert set(recs[0]) == {"source_id", "domain", "tokens", "text", "score"}


def test_translate_beam_keeps_top1_per_domain(trained, tmp_path):
    corpus = trained / "data" / "test.jsonl"
    out = tmp_path / "beam.jsonl"
    cmd_translate(trained / "checkpoint.bin", corpus, out, mode="beam", beam_size=3)
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(recs) == 40
    ck = checkpoint_load(trained / "checkpoint.bin")
    m = ck.build_model()
    index = {w: i for i, w in enumerate(ck.vocab)}
    first = read_records(corpus)[0]
    direct = generate_all_domains(m, source_batch([[index[t] for t in first["src"]]]), "beam", 3)[0]
    assert [r["tokens"] for r in recs[:4]] == [[ck.vocab[t] for t in h.content] for h in direct]


def test_translate_rejects_foreign_vocabulary(trained, tmp_path):
    corpus = tmp_path / "foreign.jsonl"
    corpus.write_text('{"id": 0, "src": ["w0", "zebra"], "refs": [["w0"]]}\n')
    with pytest.raises(VocabMismatchError, match="zebra"):
        cmd_translate(trained / "checkpoint.bin", corpus, tmp_path / "o.jsonl")


def write_hyps(path, sets):
    with open(path, "w") as fh:
        for sid, hs in sets.items():
            for k, h in enumerate(hs):
                fh.write(json.dumps({"source_id": sid, "domain": k, "tokens": h, "text": " ".join(h), "score": 0.0}) + "\n")


def test_evaluate_forcing_cases(tmp_path):
    ref = tmp_path / "ref.jsonl"
    refs = {0: [["a", "b", "c", "d", "e"], ["e", "d", "c", "b", "a"], ["x", "b", "c", "d", "y"]],
            1: [["p", "q", "r", "s"], ["s", "r", "q", "p"], ["z", "q", "r", "z"]]}
    ref.write_text("".join(json.dumps({"id": i, "src": ["s"], "refs": r}) + "\n" for i, r in refs.items()))
    hyp = tmp_path / "dup.jsonl"
    write_hyps(hyp, {i: [r[0]] * 3 for i, r in refs.items()})
    rep = cmd_evaluate(hyp, ref, tmp_path / "dup.json")
    assert rep["mbleu"] == 100.0 and rep["pairwise_bleu"] == 100.0
    write_hyps(hyp, refs)
    rep = cmd_evaluate(hyp, ref, tmp_path / "all.json")
    assert rep["mbleu"] == 100.0 and rep["pairwise_bleu"] < 100.0
    assert rep["mode_recovery"] == 1.0 and rep["mean_distinct"] == 3.0
    assert (tmp_path / "all.json.csv").read_text().splitlines()[0].startswith("n_sources,")


def test_evaluate_equals_direct_metric_calls(trained, tmp_path):
    corpus = trained / "data" / "test.jsonl"
    hyp = tmp_path / "h.jsonl"
    cmd_translate(trained / "checkpoint.bin", corpus, hyp)
    rep = cmd_evaluate(hyp, corpus, tmp_path / "r.json")
    recs = [json.loads(x) for x in hyp.read_text().splitlines()]
    refs = read_records(corpus)
    sets = [[r["tokens"] for r in recs if r["source_id"] == e["id"]] for e in refs]
    assert rep["mbleu"] == mbleu(sets, [e["refs"] for e in refs]).score
    assert rep["pairwise_bleu"] == pairwise_bleu(sets).score
    a = (tmp_path / "r.json").read_bytes()
    cmd_evaluate(hyp, corpus, tmp_path / "r.json")
    assert (tmp_path / "r.json").read_bytes() == a


def test_evaluate_reports_missing_ids(tmp_path):
    ref = tmp_path / "ref.jsonl"
    ref.write_text("".join(json.dumps({"id": i, "src": ["s"], "refs": [["a"]]}) + "\n" for i in range(4)))
    hyp = tmp_path / "h.jsonl"
    write_hyps(hyp, {0: [["a"]], 2: [["a"]]})
    with pytest.raises(AlignmentError, match=r"\[1, 3\]"):
        cmd_evaluate(hyp, ref)


# -- bench and the command line -------------------------------------------------------
def test_bench_forward_counts(tmp_path):
    rows = cmd_bench_speed(tiny_config(tmp_path), [2, 5], warmup=1, steps=2)
    counts = {(r.method, r.n_domains): r.forwards_per_step for r in rows}
    assert counts == {("target_encoder", 2): 1, ("target_encoder", 5): 1, ("moe", 2): 3, ("moe", 5): 6}
    assert all(r.words_per_sec > 0 for r in rows)
    assert rows_to_csv(rows).splitlines()[0].startswith("method,n_domains,words_per_sec")


def test_main_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    d = json.loads(json.dumps(TINY))
    d["steps"] = 4
    d["output_dir"] = str(tmp_path / "cli")
    cfg.write_text(yaml.safe_dump(d))
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    ck = tmp_path / "cli" / "checkpoint.bin"
    test = tmp_path / "cli" / "data" / "test.jsonl"
    assert main(["translate", "--checkpoint", str(ck), "--corpus", str(test), "--out", str(tmp_path / "h")]) == 0
    assert main(["evaluate", "--hyp", str(tmp_path / "h"), "--ref", str(test), "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r").read_text())["n_hyps_per_source"] == 4
    cfg.write_text("bogus_field: 1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "bogus_field" in capsys.readouterr().err
