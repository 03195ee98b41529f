import json

import pytest

from src.main import EXIT_DOMAIN_ERROR, EXIT_SUCCESS, EXIT_USAGE_ERROR, main


@pytest.fixture
def trained(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    spec = tmp_path / "corpus.conf"
    spec.write_text("vocab_size = 32\ntokens_per_aspect = 8\nquery_length = 4\n"
                    "passage_length = 8\ncandidates_per_record = 4\nrecord_count = 6\nseed = 2\n")
    config = tmp_path / "train.conf"
    config.write_text("d = 8\nencoder_layers = 1\nencoder_heads = 2\ndecoder_heads = 2\n"
                      "max_length = 24\nviews = 2\nvocab_size = 32\nmlp_ratio = 2\n"
                      "epochs = 1\nbatch_size = 3\ncandidates_per_record = 3\n")
    model = tmp_path / "model.mvpc"
    assert main(["gen", "--spec", str(spec), "--out", str(corpus)]) == EXIT_SUCCESS
    assert main(["train", "--config", str(config), "--data", str(corpus), "--out", str(model)]) == EXIT_SUCCESS
    return corpus, model


def test_cost_prints_decode_steps(capsys):
    assert main(["cost", "--n", "100", "--w", "20", "--s", "10", "--format", "tsv"]) == EXIT_SUCCESS
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("#schema\tn\tstrategy")
    sliding = [line.split("\t") for line in lines if "\tsliding_window\t" in line][0]
    assert sliding[:5] == ["100", "sliding_window", "9", "180", "180"]


def test_cost_json(capsys):
    assert main(["cost", "--n", "5,50", "--format", "json"]) == EXIT_SUCCESS
    data = json.loads(capsys.readouterr().out)
    assert len(data["rows"]) == 6


def test_usage_errors_exit_two(capsys):
    assert main([]) == EXIT_USAGE_ERROR
    assert main(["cost", "--w", "ten"]) == EXIT_USAGE_ERROR
    assert main(["rank"]) == EXIT_USAGE_ERROR


def test_domain_error_prints_one_line(capsys):
    assert main(["cost", "--w", "5", "--s", "6"]) == EXIT_DOMAIN_ERROR
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["error: ConfigError: window config needs 1 <= stride <= window, got w=5 s=6"]


def test_missing_file_is_a_domain_error(tmp_path, capsys):
    code = main(["eval", "--ckpt", str(tmp_path / "none.mvpc"), "--data", str(tmp_path / "none.jsonl")])
    assert code == EXIT_DOMAIN_ERROR
    assert capsys.readouterr().err.startswith("error: PathError:")


def test_ablate_needs_a_sweep(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    assert main(["gen", "--out", str(corpus), "--records", "10"]) == EXIT_SUCCESS
    assert main(["ablate", "--data", str(corpus)]) == EXIT_DOMAIN_ERROR
    assert "nothing to ablate" in capsys.readouterr().err


def test_rank_single_candidate(trained, tmp_path, capsys):
    _, model = trained
    candidates = tmp_path / "cands.tsv"
    candidates.write_text("only\tw12 w13 w20\n")
    capsys.readouterr()
    assert main(["rank", "--ckpt", str(model), "--query", "w12 w13", "--candidates", str(candidates)]) == 0
    fields = capsys.readouterr().out.strip().split("\t")
    assert fields[0] == "only"
    assert fields[2] == "1"
    float(fields[1])


def test_rank_orders_all_candidates(trained, tmp_path, capsys):
    _, model = trained
    candidates = tmp_path / "cands.tsv"
    candidates.write_text("# pid\twords\na\tw12 w13\nb\tw20 w21\nc\tw14\n")
    capsys.readouterr()
    assert main(["rank", "--ckpt", str(model), "--query", "w12", "--candidates", str(candidates),
                 "--agg", "max"]) == 0
    lines = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert sorted(line[0] for line in lines) == ["a", "b", "c"]
    assert [line[2] for line in lines] == ["1", "2", "3"]
    scores = [float(line[1]) for line in lines]
    assert scores == sorted(scores, reverse=True)


def test_rank_rejects_malformed_candidates(trained, tmp_path, capsys):
    _, model = trained
    candidates = tmp_path / "cands.tsv"
    candidates.write_text("a\tw12\nno tab here\n")
    assert main(["rank", "--ckpt", str(model), "--query", "w12", "--candidates", str(candidates)]) == 1
    assert "RecordParseError: line 2" in capsys.readouterr().err


def test_eval_and_audits(trained, capsys):
    corpus, model = trained
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(model), "--data", str(corpus), "--baseline", "--samples", "200",
                 "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)["rows"]
    assert [row["scorer"] for row in rows] == ["model (mean)", "random permutation"]
    assert main(["audit", "--ckpt", str(model), "--mode", "identifiers", "--format", "json"]) == 0
    assert "identifier permutation inapplicable" in capsys.readouterr().out
    assert main(["audit", "--ckpt", str(model), "--data", str(corpus), "--mode", "candidates",
                 "--seeds", "2", "--format", "json"]) == 0
    modes = [row["mode"] for row in json.loads(capsys.readouterr().out)["rows"]]
    assert modes == ["orig", "shuffle", "reverse"]
    assert main(["audit", "--ckpt", str(model), "--mode", "anchors"]) == EXIT_DOMAIN_ERROR


def test_version(capsys):
    assert main(["--version"]) == EXIT_SUCCESS
    assert "mvp-rerank 0.1.0" in capsys.readouterr().out
