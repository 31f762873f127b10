import json

import numpy as np
import pytest

from synmodal.cli import MANIFEST, Outputs, load_config, main
from synmodal.encoder import load_checkpoint
from synmodal.syntax import loads_ast
from synmodal.tokenizer import Vocab
from synmodal.training import TrainConfig, init_state

SMALL = """
[train]
batch_size = 4
steps = 3
nl_budget = 8
pl_budget = 12
ast_budget = 16
projection_dim = 8

[encoder]
layers = 1
hidden_size = 16
heads = 2
ffn_size = 32
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "c.toml").write_text(SMALL)
    data = tmp_path / "data"
    assert main(["make-corpus", "--n", "16", "--unpaired", "4", "--seed", "1", "--out-dir", str(data)]) == 0
    assert main(["train-bpe", "--corpus", str(data / "corpus.jsonl"), "--vocab-size", "160", "--out-dir", str(data)]) == 0
    return tmp_path


def pretrain(ws, out, *extra):
    return main(["pretrain", "--config", str(ws / "c.toml"), "--corpus", str(ws / "data" / "corpus.jsonl"),
                 "--vocab", str(ws / "data" / "vocab.txt"), "--out-dir", str(ws / out), *extra])


def test_parse_prints_ast(tmp_path, capsys):
    src = tmp_path / "f.mini"
    src.write_text('x = len("x")\n')
    assert main(["parse", "--in", str(src)]) == 0
    tree = loads_ast(capsys.readouterr().out)
    kinds = {(leaf.kind, leaf.text) for leaf in tree.leaves()}
    assert ("identifier", "x") in kinds and ("identifier", "len") in kinds and ("string", '"x"') in kinds


def test_parse_to_file_writes_manifest(tmp_path):
    src = tmp_path / "f.mini"
    src.write_text("y = 1\n")
    assert main(["parse", "--in", str(src), "--out", "ast.json", "--out-dir", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / MANIFEST).read_text())
    assert manifest["command"] == "parse" and manifest["version"]
    assert loads_ast((tmp_path / "o" / "ast.json").read_text()).kind == "module"


def test_parse_error_exits_nonzero(tmp_path, capsys):
    src = tmp_path / "f.mini"
    src.write_text("x = = 1\n")
    assert main(["parse", "--in", str(src)]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_command_and_flag_print_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0 and "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["parse", "--in", "x", "--bogus"])
    assert exc.value.code != 0 and "usage" in capsys.readouterr().err


def test_train_bpe_is_deterministic(workspace):
    data = workspace / "data"
    assert main(["train-bpe", "--corpus", str(data / "corpus.jsonl"), "--vocab-size", "160",
                 "--out", str(workspace / "v2.txt"), "--out-dir", str(workspace / "again")]) == 0
    assert (data / "vocab.txt").read_bytes() == (workspace / "v2.txt").read_bytes()


def test_pretrain_zero_steps_equals_initialisation(workspace):
    assert pretrain(workspace, "run0", "--steps", "0", "--seed", "9") == 0
    doc = load_checkpoint(workspace / "run0" / "checkpoint.json")
    vocab = Vocab.load(workspace / "data" / "vocab.txt")
    state = init_state(vocab, TrainConfig.from_dict(doc["train_config"]), doc["encoder_config"])
    for name, p in state.params.items():
        assert np.array_equal(doc["params"][name].data, p.data)
    assert (workspace / "run0" / "log.jsonl").read_text() == ""


def test_pretrain_outputs_and_manifest(workspace):
    assert pretrain(workspace, "run", "--tep", "false") == 0
    run = workspace / "run"
    lines = (run / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert all(json.loads(line)["tep"] == 0.0 for line in lines)
    manifest = json.loads((run / MANIFEST).read_text())
    assert manifest["config"]["active_objectives"] == ["mmlm", "ip", "mcl"]
    assert manifest["config"]["train"]["tep"] is False and manifest["seed"] == 0


def test_pretrain_resume_continues_the_log(workspace):
    assert pretrain(workspace, "run", "--steps", "2") == 0
    run = workspace / "run"
    assert main(["pretrain", "--corpus", str(workspace / "data" / "corpus.jsonl"), "--resume",
                 str(run / "checkpoint.json"), "--steps", "4", "--out-dir", str(run)]) == 0
    steps = [json.loads(line)["step"] for line in (run / "log.jsonl").read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


@pytest.mark.parametrize(
    "override, field",
    [("train.batch_size=x", "train.batch_size"), ("train.colour=1", "train.colour"),
     ("train.batch_size=1", "batch_size"), ("encoder.heads=5", "heads")],
)
def test_invalid_config_names_the_field_and_leaves_nothing(workspace, capsys, override, field):
    assert pretrain(workspace, "bad", "--set", override) == 1
    assert field in capsys.readouterr().err
    assert not (workspace / "bad").exists()


def test_failure_keeps_existing_files_intact(tmp_path):
    existing = tmp_path / "log.jsonl"
    existing.write_text("old\n")
    outputs = Outputs(tmp_path)
    log = outputs.path("log.jsonl")
    with open(log, "a") as fh:
        fh.write("partial\n")
    outputs.path("new.json").write_text("{}")
    outputs.cleanup()
    assert existing.read_text() == "old\n" and not (tmp_path / "new.json").exists()


def test_missing_corpus_fails_cleanly(workspace, capsys):
    code = main(["pretrain", "--corpus", str(workspace / "nope.jsonl"), "--vocab", str(workspace / "data" / "vocab.txt"),
                 "--out-dir", str(workspace / "gone")])
    assert code == 1 and not (workspace / "gone").exists()


def test_out_dir_from_environment(workspace, monkeypatch):
    monkeypatch.setenv("SYNMODAL_OUT_DIR", str(workspace / "envdir"))
    assert main(["make-corpus", "--n", "3"]) == 0
    assert (workspace / "envdir" / "corpus.jsonl").exists() and (workspace / "envdir" / MANIFEST).exists()


def test_inspect_batch_dump(workspace, capsys):
    args = ["inspect-batch", "--config", str(workspace / "c.toml"), "--corpus", str(workspace / "data" / "corpus.jsonl"),
            "--vocab", str(workspace / "data" / "vocab.txt"), "--step", "1"]
    assert main(args) == 0
    dump = json.loads(capsys.readouterr().out)
    assert dump["step"] == 1 and len(dump["examples"]) == 4
    for ex in dump["examples"]:
        for pos in ex["mask"]["positions"]:
            assert ex["segments"][pos] in ("NL", "PL", "AST")
        assert len(ex["identifier_labels"]["labels"]) == len(ex["identifier_labels"]["positions"])
    assert all(len(n) == 6 for n in dump["contrastive"]["negatives"])
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out) == dump


def test_eval_search_reaches_one_on_separable_corpus(tmp_path, capsys):
    rows = [
        {"comment": "add a and b", "code": "def f(a, b):\n    return a + b\n"},
        {"comment": "print the message", "code": "print(message)\n"},
        {"comment": "length of items", "code": "def size(items):\n    return len(items)\n"},
        {"comment": "negate value", "code": "def neg(value):\n    return -value\n"},
    ]
    corpus = tmp_path / "sep.jsonl"
    corpus.write_text("".join(json.dumps(r) + "\n" for r in rows))
    (tmp_path / "c.toml").write_text(
        "[train]\nbatch_size = 4\nsteps = 60\nlearning_rate = 3e-3\nnl_budget = 8\npl_budget = 16\n"
        "ast_budget = 24\nprojection_dim = 8\npooling = \"mean\"\nscheme_mix = \"nl_vs_plast\"\n"
        "[encoder]\nlayers = 1\nhidden_size = 16\nheads = 2\nffn_size = 32\n"
    )
    assert main(["train-bpe", "--corpus", str(corpus), "--vocab-size", "90", "--out-dir", str(tmp_path)]) == 0
    assert main(["pretrain", "--config", str(tmp_path / "c.toml"), "--corpus", str(corpus),
                 "--vocab", str(tmp_path / "vocab.txt"), "--out-dir", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    assert main(["eval-search", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"), "--corpus", str(corpus),
                 "--out-dir", str(tmp_path / "ev")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == {"name": "MRR", "value": 1.0, "query_count": 4, "skipped": 0}


def test_eval_clone_reports_map(workspace, capsys):
    assert pretrain(workspace, "run") == 0
    assert main(["make-corpus", "--n", "12", "--clones", "3", "--out-dir", str(workspace / "cl")]) == 0
    capsys.readouterr()
    assert main(["eval-clone", "--checkpoint", str(workspace / "run" / "checkpoint.json"),
                 "--corpus", str(workspace / "cl" / "corpus.jsonl"), "--out-dir", str(workspace / "ev")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["name"] == "MAP@R" and report["query_count"] == 12 and 0 <= report["value"] <= 1


def test_load_config_type_checks(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nsteps = 5\nlearning_rate = 1\n[encoder]\ndropout_rate = 0\n")
    cfg = load_config(path, ["train.mcl=false"])
    assert cfg["train"] == {"steps": 5, "learning_rate": 1.0, "mcl": False}
    assert cfg["encoder"] == {"dropout_rate": 0.0}
    path.write_text("[model]\nx = 1\n")
    with pytest.raises(ValueError, match="model"):
        load_config(path)
