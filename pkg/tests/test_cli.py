import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from isdkit.cli import main
from isdkit.models import one_hot_model, random_model, save_model

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def model_path(tmp_path):
    path = tmp_path / "model.json"
    save_model(random_model(4, 1, 0.5, 7), path)
    return path


def summary_fields(text):
    return dict(kv.split("=") for kv in text.split())


class TestDecode:
    def test_mirror_tpf_range(self, capsys, model_path, tmp_path):
        out = tmp_path / "trace.jsonl"
        code, stdout, _ = run(capsys, "decode", "--model", str(model_path), "--prompt", "0", "--stride", "3",
                              "--max-new-tokens", "2000", "--out", str(out))
        assert code == 0
        tpf = float(summary_fields(stdout)["tpf"])
        assert 2.0 <= tpf <= 3.0
        trailer = json.loads(out.read_text().splitlines()[-1])
        assert len(trailer["output"]) == 2000

    def test_tau_raises_acceptance(self, capsys, model_path, tmp_path):
        acc = []
        for tau in ("0", "0.5"):
            code, stdout, _ = run(capsys, "decode", "--model", str(model_path), "--prompt", "0", "--proposal", "mixture",
                                  "--epsilon", "0.5", "--tau", tau, "--max-new-tokens", "500", "--seed", "3",
                                  "--out", str(tmp_path / f"t{tau}.jsonl"))
            assert code == 0
            acc.append(float(summary_fields(stdout)["mean_acceptance"]))
        assert acc[1] >= acc[0]

    def test_zero_tokens(self, capsys, model_path, tmp_path):
        out = tmp_path / "t.jsonl"
        code, _, _ = run(capsys, "decode", "--model", str(model_path), "--prompt", "0", "--max-new-tokens", "0",
                         "--out", str(out))
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["trailer"]

    def test_malformed_model(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"vocab_size": 4, "order": 1, "rows": {"0": [1, 0, 0]}}))
        out = tmp_path / "t.jsonl"
        code, _, err = run(capsys, "decode", "--model", str(bad), "--prompt", "0", "--out", str(out))
        assert code == 1
        assert "rows['0']" in err
        assert not out.exists()

    def test_independent_proposals(self, capsys, model_path, tmp_path):
        prop = tmp_path / "prop.json"
        save_model(random_model(4, 1, 2.0, 1), prop)
        code, _, _ = run(capsys, "decode", "--model", str(model_path), "--prompt", "1,2", "--proposal", "independent",
                         "--proposal-model", str(prop), "--out", str(tmp_path / "t.jsonl"))
        assert code == 0

    def test_independent_needs_model(self, capsys, model_path, tmp_path):
        code, _, _ = run(capsys, "decode", "--model", str(model_path), "--prompt", "0", "--proposal", "independent",
                         "--out", str(tmp_path / "t.jsonl"))
        assert code == 2

    def test_reproducible(self, capsys, model_path, tmp_path):
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for p in paths:
            run(capsys, "decode", "--model", str(model_path), "--prompt", "0", "--seed", "9", "--out", str(p))
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_deterministic_model(self, capsys, tmp_path):
        path = tmp_path / "m.json"
        save_model(one_hot_model(5, 1), path)
        out = tmp_path / "t.jsonl"
        run(capsys, "decode", "--model", str(path), "--prompt", "0", "--max-new-tokens", "5", "--out", str(out))
        assert json.loads(out.read_text().splitlines()[-1])["output"] == [1, 2, 3, 4, 0]


class TestAnalytics:
    def test_break_even_fixed(self, capsys):
        code, out, _ = run(capsys, "analytics", "--method", "isd-fixed", "--N", "4", "--break-even")
        assert code == 0
        assert float(out) == pytest.approx(0.86, abs=0.01)

    def test_no_crossing(self, capsys):
        code, out, _ = run(capsys, "analytics", "--method", "tidar", "--N", "4", "--break-even")
        assert (code, out.strip()) == (0, "no-crossing")

    def test_sdar_sweep_product(self, capsys):
        code, out, _ = run(capsys, "analytics", "--method", "sdar", "--N", "4", "--points", "11")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and len(rows) == 11
        for r in rows:
            assert float(r["tpf"]) * float(r["oh_var"]) == pytest.approx(4.0, rel=1e-12)

    def test_grid(self, capsys):
        _, out, _ = run(capsys, "analytics", "--method", "isd-variable", "--N", "4", "--grid", "0.5,0.85")
        assert [float(r["p"]) for r in csv.DictReader(io.StringIO(out))] == [0.5, 0.85]

    def test_bad_method_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["analytics", "--method", "medusa", "--N", "4", "--break-even"])
        assert exc.value.code == 2

    def test_bad_grid_value(self, capsys, tmp_path):
        out = tmp_path / "a.csv"
        code, _, _ = run(capsys, "analytics", "--method", "sdar", "--N", "4", "--grid", "0.5,1.5", "--out", str(out))
        assert code == 1 and not out.exists()


class TestSimulate:
    def test_isd_example(self, capsys):
        code, out, _ = run(capsys, "simulate", "--method", "isd", "--N", "4", "--p", "0.85", "--cycles", "1000000")
        row = next(csv.DictReader(io.StringIO(out)))
        assert code == 0
        assert float(row["tpf"]) == pytest.approx(2.578, abs=0.01)

    def test_row_order(self, capsys):
        _, out, _ = run(capsys, "simulate", "--method", "sdar", "--N", "2,4", "--p", "0.9,0.5", "--cycles", "100")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [(r["N"], r["p"]) for r in rows] == [("2", "0.9"), ("2", "0.5"), ("4", "0.9"), ("4", "0.5")]

    def test_reproducible(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            run(capsys, "simulate", "--method", "tidar", "--N", "4", "--p", "0.7", "--cycles", "1000", "--seed", "2",
                "--out", str(p))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_p(self, capsys):
        code, _, _ = run(capsys, "simulate", "--method", "isd", "--N", "4", "--p", "1.2")
        assert code == 1


class TestServe:
    def test_bundled_ordering(self, capsys):
        code, out, _ = run(capsys, "serve")
        rows = {r["policy"]: r for r in csv.DictReader(io.StringIO(out))}
        assert code == 0
        assert float(rows["block-sync"]["aggregate_tps"]) < float(rows["continuous"]["aggregate_tps"])

    def test_missing_config(self, capsys, tmp_path):
        out = tmp_path / "s.csv"
        code, _, _ = run(capsys, "serve", "--config", str(tmp_path / "nope.json"), "--out", str(out))
        assert code == 1 and not out.exists()


class TestMask:
    @pytest.mark.parametrize("variant", ["idlm", "sdar"])
    def test_golden(self, capsys, tmp_path, variant):
        out = tmp_path / "m.txt"
        code, _, _ = run(capsys, "mask", "--variant", variant, "--L", "6", "--B", "2", "--out", str(out))
        assert code == 0
        assert out.read_bytes() == (GOLDEN / f"mask_{variant}_L6_B2.txt").read_bytes()

    def test_ragged_error(self, capsys, tmp_path):
        out = tmp_path / "m.txt"
        code, _, err = run(capsys, "mask", "--variant", "idlm", "--L", "5", "--B", "2", "--out", str(out))
        assert code == 1 and "multiple" in err and not out.exists()

    def test_unwritable_output(self, capsys, tmp_path):
        code, _, _ = run(capsys, "mask", "--variant", "idlm", "--L", "4", "--B", "2", "--out",
                         str(tmp_path / "missing" / "m.txt"))
        assert code == 1


class TestModel:
    def test_round_trip(self, capsys, tmp_path):
        out = tmp_path / "m.json"
        code, _, _ = run(capsys, "model", "--vocab-size", "3", "--order", "2", "--seed", "4", "--out", str(out))
        assert code == 0
        assert len(json.loads(out.read_text())["rows"]) == 1 + 3 + 9


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "isdkit.cli", "mask", "--variant", "sdar", "--L", "6", "--B", "2"],
                          capture_output=True, text=True, check=True)
    assert proc.stdout == (GOLDEN / "mask_sdar_L6_B2.txt").read_text()


def test_missing_subcommand():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
