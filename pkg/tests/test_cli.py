import csv
import io
import json

import pytest

from vid2shop import io as vio
from vid2shop.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from vid2shop.dedup import duplicate_corpus, write_pgm
from vid2shop.heads import SingleFrameHead, init_multi_from_single

SMALL = ["--gallery-size", "20", "--sequences", "16", "--frames", "10", "--dim", "8", "--noise", "0.3"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    lines = open(path).read().splitlines()
    assert lines[0].startswith("# vid2shop ")
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = d / "bench"
    assert run("gen-synth", "--out", p, *SMALL, "--test-sequences", 6, "--source-sequences", 12, "--seed", 3) == EXIT_OK
    assert run("pretrain", "--data", f"{p}.src.seq.jsonl", "--gallery", f"{p}.src.gal.jsonl", "--out", d / "sf.ckpt",
               "--embed-dim", 8, "--epochs", 15, "--negatives", 2, "--log", d / "pre.csv") == EXIT_OK
    assert run("train", "--data", f"{p}.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--init", d / "sf.ckpt",
               "--out", d / "model.ckpt", "--epochs", 2, "--nlb-dim", 4, "--log", d / "train.csv") == EXIT_OK
    return d, p


def test_gen_synth_writes_all_files(world):
    d, p = world
    assert len(vio.load_gallery(f"{p}.gal.jsonl")) == 20
    assert len(vio.load_dataset(f"{p}.seq.jsonl")) == 16
    test = vio.load_dataset(f"{p}.test.seq.jsonl")
    assert [r.sequence_id for r in test] == [f"seq{i:06d}" for i in range(16, 22)]
    assert len(vio.load_prototypes(f"{p}.proto.jsonl")) == 20
    assert len(vio.load_dataset(f"{p}.src.seq.jsonl")) == 12


def test_gen_synth_split(tmp_path):
    assert run("gen-synth", "--out", tmp_path / "s", *SMALL, "--split", 0.75) == EXIT_OK
    train = vio.load_dataset(tmp_path / "s.train.seq.jsonl")
    test = vio.load_dataset(tmp_path / "s.test.seq.jsonl")
    assert len(train) + len(test) == 16


def test_conflicting_split_options_are_usage_errors(tmp_path):
    assert run("gen-synth", "--out", tmp_path / "s", *SMALL, "--split", 0.5, "--test-sequences", 2) == EXIT_USAGE
    assert not list(tmp_path.iterdir())


def test_logs(world):
    d, _ = world
    pre = read_csv(d / "pre.csv")
    assert len(pre) == 15 and list(pre[0]) == ["epoch", "loss", "accuracy"]
    rows = read_csv(d / "train.csv")
    assert list(rows[0]) == ["epoch", "multi_loss", "single_loss", "positives", "skipped_records"]
    assert len(rows) == 2


def test_eval_rows_and_columns(world, tmp_path):
    d, p = world
    out = tmp_path / "e.csv"
    code = run("eval", "--data", f"{p}.test.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--model", d / "model.ckpt",
               "--method", "seam,avg_descriptor", "--k", "1,5,10,20", "--out", out, "--per-class", tmp_path / "c.csv")
    assert code == EXIT_OK
    rows = read_csv(out)
    assert [(r["method"], r["k"]) for r in rows] == [(m, k) for m in ("seam", "avg_descriptor") for k in ("1", "5", "10", "20")]
    assert all(r["n_queries"] == "6" for r in rows)
    assert float(rows[3]["mean"]) == 1.0  # gallery of 20, k = 20
    assert read_csv(tmp_path / "c.csv")


def test_eval_is_byte_identical_across_runs_and_jobs(world, tmp_path, monkeypatch):
    d, p = world
    base = ["eval", "--data", f"{p}.test.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--model", d / "model.ckpt", "--method", "seam,max_confidence"]
    # the provenance line records --out, so every run writes the same relative name
    outs = []
    for name, extra in (("a", ()), ("b", ()), ("c", ("--jobs", 3))):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert run(*base, "--out", "e.csv", *extra) == EXIT_OK
        outs.append((tmp_path / name / "e.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_rank_output(world, capsys):
    d, p = world
    assert run("rank", "--data", f"{p}.test.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--model", d / "model.ckpt", "--top", 5) == EXIT_OK
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(lines) == 6
    for obj in lines:
        assert set(obj) == {"query_id", "target", "rank", "ranking"}
        assert len(obj["ranking"]) <= 5
        scores = [s for _, s in obj["ranking"]]
        assert scores == sorted(scores, reverse=True)


def test_train_zero_epochs_saves_initialisation(world, tmp_path):
    d, p = world
    assert run("train", "--data", f"{p}.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--init", d / "sf.ckpt",
               "--out", tmp_path / "m.ckpt", "--epochs", 0, "--nlb-dim", 4, "--seed", 7) == EXIT_OK
    sf = SingleFrameHead(vio.load_checkpoint(d / "sf.ckpt"))
    expected = sf.params.merged(init_multi_from_single(sf, seed=7, nlb_dim=4).params)
    assert vio.load_checkpoint(tmp_path / "m.ckpt").equals(expected, atol=1e-6)


def test_pretrain_zero_epochs_saves_init(world, tmp_path):
    d, p = world
    run("pretrain", "--data", f"{p}.src.seq.jsonl", "--gallery", f"{p}.src.gal.jsonl", "--out", tmp_path / "a", "--embed-dim", 4, "--epochs", 0)
    run("pretrain", "--data", f"{p}.src.seq.jsonl", "--gallery", f"{p}.src.gal.jsonl", "--out", tmp_path / "b", "--embed-dim", 4, "--epochs", 0)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_attn_report(world, tmp_path):
    d, p = world
    assert run("attn-report", "--data", f"{p}.test.seq.jsonl", "--model", d / "model.ckpt", "--out", tmp_path / "a.csv") == EXIT_OK
    rows = read_csv(tmp_path / "a.csv")
    assert [float(r["percentile"]) for r in rows] == [5.0 * i for i in range(21)]


def test_dedup_command(tmp_path, capsys):
    corpus = duplicate_corpus(n_images=8, n_duplicates=2, seed=2)
    for k, img in corpus.images.items():
        write_pgm(tmp_path / f"{k}.pgm", img)
    assert run("dedup", "--images", tmp_path) == EXIT_OK
    groups = [json.loads(line)["group"] for line in capsys.readouterr().out.splitlines()]
    assert sorted(tuple(g) for g in groups) == sorted(corpus.true_pairs())
    assert run("dedup", "--images", tmp_path, "--all") == EXIT_OK
    assert len(capsys.readouterr().out.splitlines()) == 6


def test_grad_check_command(capsys):
    assert run("grad-check", "--T", 3, "--conv-dim", 6, "--embed-dim", 4, "--nlb-dim", 3) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_exit_codes(world, tmp_path):
    d, p = world
    assert run() == EXIT_USAGE
    assert run("eval") == EXIT_USAGE
    assert run("eval", "--data", "x", "--gallery", "y", "--model", "z", "--k", "0") == EXIT_USAGE
    assert run("eval", "--data", "x", "--gallery", "y", "--model", "z", "--method", "best") == EXIT_USAGE
    assert run("eval", "--data", tmp_path / "missing", "--gallery", f"{p}.gal.jsonl", "--model", d / "model.ckpt") == EXIT_DATA
    # a pretrained-only checkpoint has no multi-frame head
    assert run("eval", "--data", f"{p}.test.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--model", d / "sf.ckpt") == EXIT_DATA
    bad = tmp_path / "bad.seq.jsonl"
    bad.write_text('{"format":"seam-seq","version":1}\n{not json\n')
    assert run("rank", "--data", bad, "--gallery", f"{p}.gal.jsonl", "--model", d / "model.ckpt") == EXIT_DATA
    assert run("dedup", "--images", tmp_path / "nope") == EXIT_DATA


def test_gallery_reference_check(world, tmp_path):
    d, p = world
    partial = tmp_path / "partial.gal.jsonl"
    vio.save_gallery(partial, vio.load_gallery(f"{p}.gal.jsonl")[:3])
    assert run("eval", "--data", f"{p}.test.seq.jsonl", "--gallery", partial, "--model", d / "model.ckpt") == EXIT_DATA


def test_provenance_line_skips_jobs(world, tmp_path):
    d, p = world
    run("eval", "--data", f"{p}.test.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--model", d / "model.ckpt", "--out", tmp_path / "a.csv", "--jobs", 2)
    first = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert first.startswith("# vid2shop eval ") and "jobs" not in first and "seed=0" in first


def test_end_to_end_script_reproduces_benchmark_gates(tmp_path):
    p = tmp_path / "bench"
    assert run("gen-synth", "--out", p, "--gallery-size", 200, "--sequences", 500, "--test-sequences", 100,
               "--source-sequences", 300, "--frames", 30, "--dim", 16, "--noise", 0.5, "--clutter", 0.5) == EXIT_OK
    assert run("pretrain", "--data", f"{p}.src.seq.jsonl", "--gallery", f"{p}.src.gal.jsonl", "--out", tmp_path / "sf.ckpt",
               "--epochs", 10) == EXIT_OK
    assert run("train", "--data", f"{p}.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--init", tmp_path / "sf.ckpt",
               "--out", tmp_path / "m.ckpt", "--epochs", 20, "--multi-weight", 5) == EXIT_OK
    assert run("eval", "--data", f"{p}.test.seq.jsonl", "--gallery", f"{p}.gal.jsonl", "--model", tmp_path / "m.ckpt",
               "--method", "seam,avg_descriptor,max_confidence", "--k", "1,5", "--pool-size", 100, "--repeats", 1,
               "--out", tmp_path / "e.csv") == EXIT_OK
    acc = {(r["method"], int(r["k"])): float(r["mean"]) for r in read_csv(tmp_path / "e.csv")}
    assert acc[("seam", 1)] >= acc[("avg_descriptor", 1)] >= acc[("max_confidence", 1)]
    assert acc[("seam", 1)] >= 0.90 and acc[("seam", 5)] >= 0.98
