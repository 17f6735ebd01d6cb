import subprocess
import sys

import pytest

from avlkv._csv import read_csv, write_csv
from avlkv.cli import main
from avlkv.metrics import AttentionTrace


def base(run_dir, out, *extra, max_new=6):
    return ["--seed", "0", "--config", str(run_dir / "cfg.json"), "--prompt", str(run_dir / "prompt.json"),
            "--max-new", str(max_new), "--out", str(run_dir / out), *extra]


def test_identity_avl_matches_full_bytes(run_dir):
    ident = '{"policy": "avl", "S": 100, "C": 100, "K": 3, "P": 100, "T": 100}'
    assert main(["generate", *base(run_dir, "full")]) == 0
    assert main(["generate", *base(run_dir, "ident", "--policy", ident)]) == 0
    assert (run_dir / "full/tokens.txt").read_bytes() == (run_dir / "ident/tokens.txt").read_bytes()
    assert (run_dir / "full/weights.bin").read_bytes() == (run_dir / "ident/weights.bin").read_bytes()


def test_missing_prompt_exit_2(run_dir, capsys):
    args = base(run_dir, "x")
    args[args.index("--prompt") + 1] = str(run_dir / "nope.json")
    assert main(["generate", *args]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_bad_policy_exit_2(run_dir):
    assert main(["generate", *base(run_dir, "x", "--policy", '{"policy": "avl", "Q": 1}')]) == 2


def test_trace_has_one_entry_per_layer_and_step(run_dir):
    assert main(["generate", *base(run_dir, "t", "--policy", "avl", "--trace")]) == 0
    trace = AttentionTrace.from_csv(run_dir / "t/trace.csv")
    assert len(trace) == 4 * (1 + 6)
    assert trace.steps == list(range(7))


def test_weights_flag_reproduces_seed_run(run_dir):
    assert main(["generate", *base(run_dir, "a")]) == 0
    args = ["--weights", str(run_dir / "a/weights.bin"), "--prompt", str(run_dir / "prompt.json"),
            "--max-new", "6", "--out", str(run_dir / "b")]
    assert main(["generate", *args]) == 0
    assert (run_dir / "a/tokens.txt").read_bytes() == (run_dir / "b/tokens.txt").read_bytes()
    assert not (run_dir / "b/weights.bin").exists()


def test_compare_full_twice(run_dir):
    assert main(["compare", *base(run_dir, "c", "--policies", "full,full")]) == 0
    header, rows = read_csv(run_dir / "c/compare.csv")
    assert [r[0] for r in rows] == ["full", "full#2"]
    assert rows[0][1] == rows[1][1]
    assert all(r[6] == "-1" and float(r[3]) == 1.0 for r in rows)


def test_compare_avl_reduces_used(run_dir):
    assert main(["compare", *base(run_dir, "c", "--policies", "avl,fastv", max_new=8)]) == 0
    header, rows = read_csv(run_dir / "c/compare.csv")
    by = {r[0]: r for r in rows}
    assert set(by) == {"avl", "fastv", "full"}
    stored, used = float(by["avl"][3]), float(by["avl"][4])
    assert used < stored < 1.0


def test_fastv_stores_half_vision_after_layer_two(run_dir):
    assert main(["generate", *base(run_dir, "f", "--policy", "fastv")]) == 0
    _, rows = read_csv(run_dir / "f/stats.csv")
    header, _ = read_csv(run_dir / "f/stats.csv")
    col = header.index("stored_vision")
    for r in rows[:-1]:
        assert int(r[col]) == (24 if int(r[1]) <= 2 else 12)


def test_analyze_modes(run_dir):
    assert main(["generate", *base(run_dir, "t", "--trace")]) == 0
    assert main(["generate", *base(run_dir, "u", "--trace", "--policy", "avl")]) == 0
    traces = [str(run_dir / "t/trace.csv"), str(run_dir / "u/trace.csv")]
    out = str(run_dir / "an")
    assert main(["analyze", *traces, "--mode", "segments", "--out", out]) == 0
    assert main(["analyze", traces[0], "--mode", "ppci-layers", "--p", "30", "--out", out]) == 0
    assert main(["analyze", traces[0], "--mode", "ppci-steps", "--segment", "vision", "--out", out]) == 0
    header, rows = read_csv(run_dir / "an/segments.csv")
    assert rows[-1][0] == "mean"
    _, rows = read_csv(run_dir / "an/ppci_layers.csv")
    assert float(rows[0][4]) == 1.0
    assert (run_dir / "an/ppci_steps.csv").exists()
    assert main(["analyze", str(run_dir / "missing.csv"), "--mode", "segments", "--out", out]) == 2


def test_csv_outputs_reserialise_identically(run_dir):
    assert main(["generate", *base(run_dir, "r", "--trace")]) == 0
    for name in ["stats.csv", "trace.csv"]:
        header, rows = read_csv(run_dir / "r" / name)
        again = write_csv(run_dir / f"again_{name}", header, rows)
        assert again.read_bytes() == (run_dir / "r" / name).read_bytes()


def test_bench_smoke(tmp_path):
    assert main(["bench", "--dims", "64", "--ratios", "30%", "--batch", "1,4", "--out", str(tmp_path)]) == 0
    header, rows = read_csv(tmp_path / "bench.csv")
    assert len(rows) == 2 and rows[0][3] == "19"


def test_bench_rejects_short_runs(tmp_path):
    assert main(["bench", "--dims", "64", "--iters", "5", "--out", str(tmp_path)]) == 1


def test_module_entry_point(run_dir):
    proc = subprocess.run([sys.executable, "-m", "avlkv", "generate", *base(run_dir, "m", max_new=2)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len((run_dir / "m/tokens.txt").read_text().split()) == 2
