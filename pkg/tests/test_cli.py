import json

import numpy as np
import pytest

from metadiffusion import data as dp
from metadiffusion.cli import main

TINY = """\
steps = 4
batch_size = 2
warmup = 2
T = 15
base_channels = 8
channel_mults = 1, 2
heads = 2
head_dim = 4
token_dim = 8
time_embed_dim = 16
groups = 4
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """designs -> dataset -> two checkpoints with the same seed -> two sample runs."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-designs", "--out", str(root / "designs"), "--count", "3", "--grid", "8",
                 "--seed", "5"]) == 0
    assert main(["build-dataset", "--designs", str(root / "designs"), "--out", str(root / "ds"),
                 "--frames", "3"]) == 0
    (root / "tiny.txt").write_text(TINY)
    for name in ("ck1", "ck2"):
        assert main(["train", "--dataset", str(root / "ds"), "--out", str(root / name),
                     "--config", str(root / "tiny.txt"), "--seed", "1"]) == 0
    dp.write_curve(root / "target.txt", dp.Dataset(root / "ds")[1].curve)
    for name in ("s1", "s2"):
        assert main(["sample", "--checkpoint", str(root / "ck1"), "--curve", str(root / "target.txt"),
                     "--count", "2", "--out", str(root / name), "--seed", "4"]) == 0
    return root


def test_generate_designs_outputs(pipeline):
    d = pipeline / "designs"
    assert sorted(p.name for p in d.glob("*.pbm")) == [f"design_{k:05d}.pbm" for k in range(3)]
    records = [json.loads(line) for line in (d / "designs.jsonl").read_text().splitlines()]
    assert [r["seed"] for r in records] == [5, 6, 7]
    pixels = dp.read_pbm(d / "design_00000.pbm")
    assert pixels.shape == (16, 16) and np.array_equal(pixels, pixels[::-1, ::-1])


def test_generate_designs_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "generate-designs", "--out", tmp_path / name, "--count", 2, "--grid", 8)[0] == 0
    for k in range(2):
        f = f"design_{k:05d}.pbm"
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_option_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("count = 2\ngrid = 8\nalpha = 2.0\n")
    code, out, _ = run(capsys, "generate-designs", "--config", cfg, "--out", tmp_path / "o", "--count", 1)
    assert code == 0 and len(out.splitlines()) == 1
    manifest = dp.read_kv(tmp_path / "o" / "run_manifest.txt")
    assert manifest["count"] == 1  # flag beats config
    assert manifest["alpha"] == 2.0  # config beats default
    assert manifest["tmax"] == 0.6  # default


def test_unknown_config_key_fails(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour = red\n")
    code, out, err = run(capsys, "generate-designs", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and out == "" and "colour" in err


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        main(["validate", "--design", "x.pbm", "--bogus", "1"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_dataset_written(pipeline):
    ds = dp.Dataset(pipeline / "ds")
    assert len(ds) == 3 and ds.stats is not None
    assert ds[0].fields.frames.shape == (3, 3, 16, 16)
    assert np.allclose(ds[0].fields.strain_levels, [0.002, 0.1, 0.2])


def test_train_is_bit_reproducible(pipeline):
    for name in ("params.bin", "params.jsonl", "config.txt", "losses.txt"):
        assert (pipeline / "ck1" / name).read_bytes() == (pipeline / "ck2" / name).read_bytes()


def test_sample_is_bit_reproducible(pipeline):
    for k in range(2):
        rel = f"sample_{k:03d}/fields.bin"
        assert (pipeline / "s1" / rel).read_bytes() == (pipeline / "s2" / rel).read_bytes()
    assert (pipeline / "s1" / "summary.jsonl").read_text() == (pipeline / "s2" / "summary.jsonl").read_text()


def test_sample_outputs(pipeline):
    lines = (pipeline / "s1" / "summary.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        rec = json.loads(line)
        assert {"id", "nrmse", "validator_nrmse", "fill_fraction", "error"} <= set(rec)
        sdir = pipeline / "s1" / rec["id"]
        assert (sdir / "fields.bin").exists() and (sdir / "frames.png").exists()
        if rec["error"] is None:
            assert (sdir / "design.pbm").exists() and rec["nrmse"] >= 0


def test_sample_accepts_eleven_value_curve(pipeline, tmp_path, capsys):
    full = pipeline / "full.txt"
    dp.write_curve(full, np.linspace(0.01, 1.0, 11))
    code, out, _ = run(capsys, "sample", "--checkpoint", pipeline / "ck1", "--curve", full, "--count", 1,
                       "--out", tmp_path / "s", "--no-validate")
    assert code == 0
    assert np.allclose(dp.read_curve(tmp_path / "s" / "target.txt"), [0.01, 0.505, 1.0])
    assert json.loads(out)["validator_nrmse"] is None


def test_sample_rejects_wrong_curve_length(pipeline, tmp_path, capsys):
    bad = tmp_path / "c.txt"
    dp.write_curve(bad, [1.0, 2.0])
    code, _, err = run(capsys, "sample", "--checkpoint", pipeline / "ck1", "--curve", bad, "--out", tmp_path)
    assert code == 1 and "expects 3" in err


def test_validate_solid_cell(tmp_path, capsys):
    dp.write_pbm(tmp_path / "solid.pbm", np.ones((8, 8)))
    code, out, _ = run(capsys, "validate", "--design", tmp_path / "solid.pbm", "--poisson", 0,
                       "--young", 10, "--out", tmp_path / "v")
    assert code == 0
    rows = [list(map(float, line.split())) for line in out.splitlines()]
    assert len(rows) == 11
    strain, stress = np.array(rows).T
    assert np.allclose(stress, 10 * strain, rtol=1e-8)
    assert np.allclose(dp.read_curve(tmp_path / "v" / "curve.txt"), stress, rtol=1e-8)


def test_validate_void_design_fails(tmp_path, capsys):
    dp.write_pbm(tmp_path / "void.pbm", np.zeros((8, 8)))
    code, out, err = run(capsys, "validate", "--design", tmp_path / "void.pbm")
    assert code == 1 and out == "" and "SingularSystemError" in err


def test_evaluate_identical_is_zero(pipeline, capsys):
    code, out, _ = run(capsys, "evaluate", "--pred", pipeline / "s1", "--truth", pipeline / "s2")
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert all(r["value"] == 0 for r in records[:-1])
    assert records[-1]["metric"] == "aggregate" and records[-1]["nrmse_mean"] == 0


def test_evaluate_values(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "t").mkdir()
    dp.write_curve(tmp_path / "t" / "a.txt", [1.0, 0.0])
    dp.write_curve(tmp_path / "p" / "a.txt", [1.5, 0.0])
    code, out, _ = run(capsys, "evaluate", "--pred", tmp_path / "p", "--truth", tmp_path / "t")
    assert code == 0 and json.loads(out.splitlines()[0])["value"] == 0.5


def test_plot(pipeline, capsys):
    code, out, _ = run(capsys, "plot", "--run", pipeline / "s1")
    assert code == 0
    figs = json.loads(out)["figures"]
    assert "curves.png" in figs and "sample_000_fields.png" in figs
    assert (pipeline / "s1" / "plots" / "curves.png").stat().st_size > 0
