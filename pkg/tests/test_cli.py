import json

import pytest

from dmarx.cli import build_parser, main
from dmarx.experiment import CSV_FIELDS, SNR_DEFINITION, read_results


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text("[channel]\nn_users = 2\nn_subcarriers = 8\nn_taps = 3\nn_strips = 3\n"
                    "n_elements = 4\n[design]\nprojection_iters = 2\n")
    return path


def test_parser_lists_and_validation():
    args = build_parser().parse_args(["sweep-snr", "--snr", "0,4", "--receivers", "r1,R5"])
    assert args.snr == (0.0, 4.0) and args.receivers == ("R1", "R5") and args.bits == 80
    args = build_parser().parse_args(["sweep-bits", "--bits", "60,120"])
    assert args.bits == (60, 120) and args.snr == 8.0
    with pytest.raises(SystemExit):
        build_parser().parse_args(["sweep-snr", "--receivers", "R7"])
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_sweep_snr_to_csv(tmp_path, small_cfg, capsys):
    out = tmp_path / "snr.csv"
    code = main(["sweep-snr", "--config", str(small_cfg), "--trials", "1", "--snr", "0,8",
                 "--out", str(out)])
    assert code == 0
    assert SNR_DEFINITION in capsys.readouterr().out
    records = read_results(out)
    assert len(records) == 10
    assert {r.snr_db for r in records} == {0.0, 8.0}
    assert out.read_text().splitlines()[1] == ",".join(CSV_FIELDS)


def test_sweep_bits_to_json(tmp_path, small_cfg):
    out = tmp_path / "bits.json"
    assert main(["sweep-bits", "--config", str(small_cfg), "--trials", "1", "--bits", "60,100",
                 "--receivers", "R1,R3", "--out", str(out)]) == 0
    records = read_results(out)
    assert [(r.receiver, r.b_overall) for r in records] == [
        ("R1", 60), ("R3", 60), ("R1", 100), ("R3", 100)]
    assert all(r.snr_db == 8.0 for r in records)


def test_sweep_table_on_stdout(small_cfg, capsys):
    assert main(["sweep-snr", "--config", str(small_cfg), "--trials", "1", "--snr", "4",
                 "--receivers", "R5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == f"# {SNR_DEFINITION}"
    assert lines[2].split()[:3] == ["receiver", "snr_db", "bits"]
    assert lines[3].split()[:3] == ["R5", "4.0", "80"]


def test_design_dump(tmp_path, small_cfg):
    out = tmp_path / "design.json"
    assert main(["design-dump", "--config", str(small_cfg), "--receivers", "R1,R2",
                 "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert set(payload["designs"]) == {"R1", "R2"}
    assert payload["snr_definition"] == SNR_DEFINITION
    assert payload["channel"]["n_strips"] == 3
    assert payload["channel"]["noise_power"] == pytest.approx(10 ** -0.8)


def test_verify_subset(capsys):
    assert main(["verify", "--checks", "planted-strength,quantizer-contract"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[:2] for line in lines] == [["PASS", "planted-strength:"],
                                                   ["PASS", "quantizer-contract:"]]


def test_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["sweep-snr", "--config", str(tmp_path / "none.toml")]) == 2
    assert "dmarx: error:" in capsys.readouterr().err
    assert main(["verify", "--checks", "nonsense"]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[channel]\nwrong = 1\n")
    assert main(["design-dump", "--config", str(bad)]) == 2
