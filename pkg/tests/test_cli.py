import os
import shutil
from pathlib import Path
from typing import List

import pytest
import xdg.BaseDirectory

from chainrules import cli


@pytest.fixture(autouse=True)
def no_user_config(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(
        xdg.BaseDirectory, "xdg_config_home", os.path.join(tmp_path, "xdg")
    )


def read(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def gen_world(out: str, seed: int = 1) -> List[str]:
    return [
        "gen-world",
        "--seed",
        str(seed),
        "--entities",
        "200",
        "--queries-per-hop",
        "2",
        "--out",
        out,
    ]


def test_gen_world_is_reproducible(tmp_path: Path) -> None:
    first = os.path.join(tmp_path, "w1")
    second = os.path.join(tmp_path, "w2")
    assert cli.run(gen_world(first)) == 0
    assert cli.run(gen_world(second)) == 0
    for name in ("train.txt", "test.txt", "rules.txt", "queries.txt"):
        assert read(os.path.join(first, name)) == read(os.path.join(second, name))
    header = read(os.path.join(first, "rules.txt")).decode().splitlines()[0]
    assert header.startswith("# chainrules ")
    assert "config=" in header


def test_usage_errors(tmp_path: Path) -> None:
    assert cli.run([]) == 2
    assert cli.run(["train", "--bogus"]) == 2
    missing = os.path.join(tmp_path, "missing.txt")
    assert cli.run(["sample", "--kg", missing, "--out", "x"]) == 2
    assert cli.run(["train", "--kg", missing]) == 2


def test_runtime_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    rules = os.path.join(tmp_path, "rules.txt")
    with open(rules, "w") as f:
        f.write("not a rule\n")
    assert cli.run(["eval-kgc", "--kg", world, "--rules", rules]) == 1
    assert "bad rule line" in capsys.readouterr().err


def test_eval_kgc_without_rules(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    rules = os.path.join(tmp_path, "rules.txt")
    open(rules, "w").close()
    report = os.path.join(tmp_path, "report.csv")
    capsys.readouterr()
    code = cli.run(["eval-kgc", "--kg", world, "--rules", rules, "--out", report])
    assert code == 0
    summary = capsys.readouterr().out.strip()
    assert summary.startswith("MRR=")
    assert "Hits@1=0.0000" in summary
    assert os.path.exists(report)


def test_pipeline(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    world = os.path.join(tmp_path, "w")
    ckpt = os.path.join(tmp_path, "m.npz")
    rules = os.path.join(tmp_path, "rules.txt")
    cfg = os.path.join(tmp_path, "tiny.cfg")
    with open(cfg, "w") as f:
        f.write("dim = 8\nepochs = 1\nbatch = 100\nnum-samples = 300\nlr = 1e-3\n")
    assert cli.run(gen_world(world)) == 0
    capsys.readouterr()

    argv = ["train", "--config", cfg, "--kg", world, "--checkpoint", ckpt]
    assert cli.run(argv + ["--epochs", "2"]) == 0
    log = capsys.readouterr().out.splitlines()
    assert log[0] == "epoch,loss,seconds"
    assert [line.split(",")[0] for line in log[1:]] == ["1", "2"]

    argv = ["mine", "--config", cfg, "--kg", world, "--checkpoint", ckpt]
    assert cli.run(argv + ["--top-k", "3", "--out", rules]) == 0
    assert cli.run(["eval-kgc", "--kg", world, "--rules", rules]) == 0
    summary = capsys.readouterr().out
    for field in ("MRR=", "Hits@1=", "Hits@10="):
        assert field in summary

    queries = os.path.join(world, "queries.txt")
    assert cli.run(["eval-inductive", "--checkpoint", ckpt, "--queries", queries]) == 0
    assert capsys.readouterr().out.startswith("Accuracy=")

    attn = os.path.join(tmp_path, "attn.csv")
    assert cli.run(["export-attn", "--checkpoint", ckpt, "--out", attn]) == 0
    with open(attn) as f:
        assert f.readline().startswith("body,NULL,")


def test_ingest_and_sample(tmp_path: Path) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    snapshot = os.path.join(tmp_path, "kg.npz")
    train = os.path.join(world, "train.txt")
    assert cli.run(["ingest", "--kg", train, "--out", snapshot]) == 0
    first = os.path.join(tmp_path, "s1.txt")
    second = os.path.join(tmp_path, "s2.txt")
    for out in (first, second):
        argv = ["sample", "--kg", snapshot, "--num-samples", "100", "--seed", "4"]
        assert cli.run(argv + ["--out", out]) == 0
    assert read(first) == read(second)
    assert len(read(first).decode().splitlines()) == 101
    ckpt = os.path.join(tmp_path, "m.npz")
    argv = ["train", "--kg", snapshot, "--checkpoint", ckpt, "--samples-file", first]
    assert cli.run(argv + ["--dim", "8", "--epochs", "1"]) == 0


def test_check_gradients(tmp_path: Path) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    ckpt = os.path.join(tmp_path, "m.npz")
    argv = ["train", "--kg", world, "--checkpoint", ckpt, "--check-gradients"]
    assert cli.run(argv + ["--dim", "8", "--epochs", "0", "--num-samples", "50"]) == 0


def test_mine_selects_by_validation(tmp_path: Path) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    shutil.copy(os.path.join(world, "test.txt"), os.path.join(world, "valid.txt"))
    ckpt = os.path.join(tmp_path, "m.npz")
    argv = ["train", "--kg", world, "--checkpoint", ckpt, "--checkpoint-every", "1"]
    assert cli.run(argv + ["--dim", "8", "--epochs", "2", "--num-samples", "200"]) == 0
    periodic = [os.path.join(tmp_path, "m.e%04d.npz" % e) for e in (1, 2)]
    rules = os.path.join(tmp_path, "rules.txt")
    argv = ["mine", "--kg", world, "--checkpoint"] + periodic
    assert cli.run(argv + ["--max-len", "2", "--out", rules]) == 0
    assert os.path.getsize(rules) > 0
    single = os.path.join(tmp_path, "single.txt")
    argv = ["mine", "--kg", os.path.join(world, "train.txt"), "--checkpoint"]
    assert cli.run(argv + periodic + ["--out", single]) == 2


def test_wrong_archive_kind(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    snapshot = os.path.join(tmp_path, "kg.npz")
    train = os.path.join(world, "train.txt")
    assert cli.run(["ingest", "--kg", train, "--out", snapshot]) == 0
    capsys.readouterr()
    attn = os.path.join(tmp_path, "attn.csv")
    assert cli.run(["export-attn", "--checkpoint", snapshot, "--out", attn]) == 1
    assert "not a checkpoint" in capsys.readouterr().err
    truncated = os.path.join(tmp_path, "cut.npz")
    with open(truncated, "wb") as f:
        f.write(read(snapshot)[:100])
    assert cli.run(["sample", "--kg", truncated, "--out", "x"]) == 1
    assert "not a graph snapshot" in capsys.readouterr().err


def test_paths_from_config_file(tmp_path: Path) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    from_config = os.path.join(tmp_path, "s.npz")
    cfg = os.path.join(tmp_path, "ingest.cfg")
    with open(cfg, "w", encoding="utf-8") as f:
        f.write("kg = %s\n" % os.path.join(world, "train.txt"))
        f.write("out = %s\n" % from_config)
        f.write("remove-fraction = 0.1\n")
    assert cli.run(["ingest", "--config", cfg]) == 0
    assert os.path.isfile(from_config)
    from_flag = os.path.join(tmp_path, "flag.npz")
    assert cli.run(["ingest", "--config", cfg, "--out", from_flag]) == 0
    assert os.path.isfile(from_flag)
    assert read(from_flag) == read(from_config)


def test_switches_from_config_file(tmp_path: Path) -> None:
    world = os.path.join(tmp_path, "w")
    assert cli.run(gen_world(world)) == 0
    ckpt = os.path.join(tmp_path, "m.npz")
    cfg = os.path.join(tmp_path, "train.cfg")
    with open(cfg, "w", encoding="utf-8") as f:
        f.write("kg = %s\ncheckpoint = %s\n" % (world, ckpt))
        f.write("dim = 8\nepochs = 1\nnum-samples = 50\ncheck-gradients = yes\n")
    assert cli.run(["train", "--config", cfg]) == 0
    attn = os.path.join(tmp_path, "attn.csv")
    with open(cfg, "a", encoding="utf-8") as f:
        f.write("no-null = true\nout = %s\n" % attn)
    assert cli.run(["export-attn", "--config", cfg]) == 0
    with open(attn, "r", encoding="utf-8") as f:
        assert "NULL" not in f.readline()
