import json

import numpy as np
import pytest

from inrv import codec
from inrv.cli import main
from inrv.volume import Volume, load_raw, save_raw


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def phantom(tmp_path, capsys):
    path = tmp_path / "ph.raw"
    assert run(capsys, "phantom", "--dims", "32x32", "--seed", 3, "-o", path)[0] == 0
    return path


def test_phantom_and_eval_inf(phantom, capsys):
    code, out, _ = run(capsys, "eval", phantom, phantom)
    assert code == 0 and "PSNR: inf" in out
    code, out, _ = run(capsys, "eval", phantom, phantom, "--json")
    assert json.loads(out)["psnr_db"] == "inf"


def test_downsample_dims(phantom, tmp_path, capsys):
    code, out, _ = run(capsys, "downsample", phantom, "--dims", "8x16", "-o", tmp_path / "lr.raw", "--json")
    assert code == 0 and json.loads(out)["dims"] == [1, 16, 8]
    assert load_raw(tmp_path / "lr.raw").dims == (1, 16, 8)


def test_downsample_3d_target(tmp_path, capsys):
    save_raw(Volume(np.random.default_rng(0).random((12, 16, 16))), tmp_path / "v.raw")
    code, _, _ = run(capsys, "downsample", tmp_path / "v.raw", "--dims", "8x8x3", "-o", tmp_path / "o.raw")
    assert code == 0 and load_raw(tmp_path / "o.raw").dims == (3, 8, 8)


def test_compress_decompress_eval(phantom, tmp_path, capsys):
    m = tmp_path / "m.inrv"
    code, out, _ = run(capsys, "compress", phantom, "--lr-dims", "8x8", "--layers", 2, "--width", 16,
                       "--iters", 20, "--eval-interval", 10, "--seed", 4, "-o", m, "--json", "--no-timing")
    result = json.loads(out)
    assert code == 0 and "timing" not in result
    assert result["payload_bytes"] == codec.CodecFile.read(m).payload_bytes == 4 * (48 + 272 + 17)
    code, _, err = run(capsys, "decompress", m, "-o", tmp_path / "rec.raw")
    assert code == 0 and "Lanczos" in err
    code, out, _ = run(capsys, "eval", phantom, tmp_path / "rec.raw", "--json")
    expected = codec.decompress(codec.CodecFile.read(m))
    from inrv.metrics import psnr
    assert json.loads(out)["psnr_db"] == pytest.approx(psnr(load_raw(phantom), load_raw(tmp_path / "rec.raw")))
    assert expected.dims == (1, 32, 32)
    code, out, _ = run(capsys, "inspect", m, "--json")
    info = json.loads(out)
    assert code == 0 and info["roundtrip_ok"] and info["param_count"] == info["expected_param_count"]


def test_seed_determines_bytes(phantom, tmp_path, capsys):
    args = ["compress", phantom, "--lr-dims", "8x8", "--width", 8, "--iters", 5, "--eval-interval", 5,
            "--seed", 9]
    run(capsys, *args, "-o", tmp_path / "a.inrv")
    run(capsys, *args, "-o", tmp_path / "b.inrv")
    assert (tmp_path / "a.inrv").read_bytes() == (tmp_path / "b.inrv").read_bytes()


def test_no_warning_when_lr_equals_hr(phantom, tmp_path, capsys):
    m = tmp_path / "m.inrv"
    run(capsys, "compress", phantom, "--lr-dims", "32x32", "--width", 8, "--iters", 2, "-o", m)
    code, _, err = run(capsys, "decompress", m, "-o", tmp_path / "rec.raw")
    assert code == 0 and err == ""


def test_usage_errors(phantom, tmp_path, capsys):
    code, _, err = run(capsys, "compress", phantom, "--lr-dims", "8x8", "--layers", 5, "-o", tmp_path / "x")
    assert code == 2 and "1..4" in err
    (tmp_path / "lonely.raw").write_bytes(b"\0")
    assert run(capsys, "compress", tmp_path / "lonely.raw", "--lr-dims", "8x8", "-o", tmp_path / "x")[0] == 2
    assert run(capsys, "compress", phantom, "--lr-dims", "8by8", "-o", tmp_path / "x")[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["compress"])
    assert exc.value.code == 2


def test_config_precedence_and_unknown_keys(phantom, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"compress": {"lr_dims": "8x8", "width": 8, "iters": 3, "layers": 1}}))
    code, _, err = run(capsys, "compress", phantom, "--config", cfg, "--layers", 2, "--verbose",
                       "-o", tmp_path / "m.inrv")
    assert code == 0
    assert "[compress] layers = 2" in err and "[compress] width = 8" in err and "[compress] iters = 3" in err
    assert "[compress] learning_rate = 0.0015" in err
    cfg.write_text(json.dumps({"compress": {"widht": 8}}))
    code, _, err = run(capsys, "compress", phantom, "--config", cfg, "-o", tmp_path / "m.inrv")
    assert code == 2 and "widht" in err


def test_data_error_on_corrupt_file(phantom, tmp_path, capsys):
    m = tmp_path / "m.inrv"
    run(capsys, "compress", phantom, "--lr-dims", "8x8", "--width", 8, "--iters", 2, "-o", m)
    data = bytearray(m.read_bytes())
    data[-10] ^= 0xFF
    m.write_bytes(bytes(data))
    code, _, err = run(capsys, "decompress", m, "-o", tmp_path / "rec.raw")
    assert code == 3 and "CRC" in err
    assert not (tmp_path / "rec.raw").exists()


def test_eval_dim_mismatch_is_data_error(phantom, tmp_path, capsys):
    save_raw(Volume(np.zeros((1, 8, 8))), tmp_path / "small.raw")
    assert run(capsys, "eval", phantom, tmp_path / "small.raw")[0] == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(phantom, tmp_path, capsys):
    code, _, err = run(capsys, "compress", phantom, "--lr-dims", "8x8", "--width", 8, "--iters", 5,
                       "--lr", 1e38, "-o", tmp_path / "m.inrv")
    assert code == 4 and "numeric" in err


def test_train_sr_and_bench(tmp_path, capsys):
    sr = tmp_path / "sr.inrv"
    code, out, _ = run(capsys, "train-sr", "-o", sr, "--phantom-dims", "32x32", "--phantom-seeds", 1, 2,
                       "--pairs", 4, "--iters", 2, "--eval-interval", 1, "--blocks", 1, "--layers-per-block", 1,
                       "--growth", 2, "--low-level-channels", 2, "--bottleneck-channels", 2, "--json")
    assert code == 0 and json.loads(out)["content_hash"] == codec.CodecFile.read(sr).content_hash()
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"phantom_dims": [1, 32, 32], "lr_dims": [1, 8, 8], "layers": [1], "width": 4,
                                "iterations": 2, "eval_interval": 1, "seeds": [1], "sr_model": str(sr)}))
    code, out, _ = run(capsys, "bench", plan, "-o", tmp_path / "b", "--json")
    assert code == 0 and json.loads(out)["cells"] == 2
    assert len((tmp_path / "b" / "report.csv").read_text().splitlines()) == 3
    plan.write_text(json.dumps({"layerz": [1]}))
    assert run(capsys, "bench", plan, "-o", tmp_path / "c")[0] == 2
