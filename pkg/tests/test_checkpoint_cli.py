import hashlib
import json
import struct

import numpy as np
import pytest

from descedit import dataset as D
from descedit.checkpoint import (
    dumps_checkpoint, encode_ppm, image_grid, load_checkpoint, loads_checkpoint, save_checkpoint, to_bytes_image,
)
from descedit.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from descedit.config import ConfigError, RunConfig
from descedit.errors import (
    BadMagicError, ChecksumError, HeaderError, TruncatedFileError, UnsupportedVersionError,
)
from descedit.model import Model, ModelConfig

TINY = {"dim": 32, "blocks": 1, "heads": 4, "lora_rank": 4, "pretrain_steps": 3, "steps": 3, "batch_size": 4,
        "holdout_count": 4, "inference_steps": 3, "log_every": 1}


# --------------------------------------------------------------------- PPM

def test_ppm_white_pixel():
    assert encode_ppm(np.ones((3, 1, 1))) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_mapping_and_layout():
    img = np.zeros((3, 2, 3))
    img[0] = -1.0
    img[1, 0, 2] = 5.0  # clipped
    rgb = to_bytes_image(img)
    assert rgb.shape == (2, 3, 3) and rgb.dtype == np.uint8
    assert rgb[0, 2].tolist() == [0, 255, 128]
    assert encode_ppm(img).startswith(b"P6\n3 2\n255\n")
    assert len(encode_ppm(img)) == len(b"P6\n3 2\n255\n") + 18


def test_image_grid_shape():
    tile = np.zeros((3, 4, 4))
    g = image_grid([[tile, tile, tile], [tile]], pad=1)
    assert g.shape == (3, 2 * 5 + 1, 3 * 5 + 1)
    assert g[0, 0, 0] == 1.0 and g[0, 1, 1] == 0.0


# -------------------------------------------------------------- checkpoint

@pytest.fixture(scope="module")
def blob():
    m = Model.init(ModelConfig(blocks=1, dim=32), 3)
    return dumps_checkpoint(m, {"seed": 3}, 17)


def test_checkpoint_roundtrip(tmp_path, blob):
    m, cfg, step = loads_checkpoint(blob)
    assert cfg == {"seed": 3} and step == 17 and not m.merged
    assert dumps_checkpoint(m, cfg, step) == blob
    ref = Model.init(ModelConfig(blocks=1, dim=32), 3)
    for n in ref.params:
        assert np.array_equal(m.params[n].data, ref.params[n].data)
        assert m.params.is_frozen(n) == ref.params.is_frozen(n)
    save_checkpoint(tmp_path / "sub" / "m.dedt", m, cfg, step)
    assert (tmp_path / "sub" / "m.dedt").read_bytes() == blob
    assert load_checkpoint(tmp_path / "sub" / "m.dedt")[0].params.checksum() == m.params.checksum()


def test_checkpoint_header_layout(blob):
    magic, version, hlen = struct.unpack_from("<4sIQ", blob)
    assert (magic, version) == (b"DEDT", 1)
    header = json.loads(blob[16:16 + hlen])
    spans = sorted((e["offset"], e["offset"] + e["nbytes"]) for e in header["tensors"])
    assert spans[0][0] == 0 and all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] == len(blob) - 16 - hlen


def test_merged_checkpoint_keeps_flag():
    m = Model.init(ModelConfig(blocks=1, dim=32), 0).merge_lora()
    back, _, _ = loads_checkpoint(dumps_checkpoint(m, {}))
    assert back.merged and set(back.params) == set(m.params)


def test_checkpoint_rejects_float64():
    with pytest.raises(ValueError):
        dumps_checkpoint(Model.init(ModelConfig(blocks=1, dim=32), 0).astype(np.float64), {})


def _corrupt(blob, pos, value):
    b = bytearray(blob)
    b[pos] = value
    return bytes(b)


def test_checkpoint_corruptions_are_distinct(blob):
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    cases = [
        (_corrupt(blob, 0, ord("X")), BadMagicError, "bad_magic"),
        (_corrupt(blob, 4, 9), UnsupportedVersionError, "bad_version"),
        (blob[:10], TruncatedFileError, "truncated"),
        (blob[:16 + hlen // 2], TruncatedFileError, "truncated"),
        (blob[:-4], TruncatedFileError, "truncated"),
        (_corrupt(blob, len(blob) - 1, blob[-1] ^ 0x40), ChecksumError, "checksum"),
        (_corrupt(blob, 16, ord("#")), HeaderError, "bad_header"),
        (blob + b"\0\0\0\0", HeaderError, "bad_header"),
    ]
    for data, err, code in cases:
        with pytest.raises(err) as info:
            loads_checkpoint(data)
        assert info.value.code == code


# ------------------------------------------------------------------ config

def test_config_defaults_and_digest():
    a, b = RunConfig(), RunConfig(out_dir="elsewhere", dataset="x.deds")
    assert a.digest() == b.digest() and len(a.digest()) == 16
    assert a.digest() != RunConfig(seed=1).digest()
    assert RunConfig.from_dict(a.to_dict()) == a
    assert a.replace(seed=None) == a and a.replace(seed=4).seed == 4


@pytest.mark.parametrize("data", [
    {"lerning_rate": 1.0}, {"text_mode": "caption"}, {"fusion": "sum"}, {"inference_steps": 500},
    {"image_size": 32}, {"text_drop": 2.0}, {"lambda_image": -1.0}, {"holdout_count": -1},
])
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 5, "fusion": "direct-addition"}))
    assert RunConfig.from_file(p).seed == 5
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)


# --------------------------------------------------------------------- CLI

def run(capsys, *argv):
    code = main(["-q", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, out, err


def field(out, key):
    return next(line.split()[1] for line in out.splitlines() if line.startswith(key + " "))


def test_gen_data(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--seed", 1, "--count", 30, "--out", tmp_path / "a.deds")
    assert code == EXIT_OK and field(out, "count") == "30"
    _, out2, _ = run(capsys, "gen-data", "--seed", 1, "--count", 30, "--out", tmp_path / "b.deds")
    assert field(out, "sha256") == field(out2, "sha256")
    assert (tmp_path / "a.deds").read_bytes() == (tmp_path / "b.deds").read_bytes()
    assert hashlib.sha256((tmp_path / "a.deds").read_bytes()).hexdigest() == field(out, "sha256")
    assert len(D.load_dataset(tmp_path / "a.deds")) == 30


def test_gen_data_size_formula(tmp_path, capsys):
    assert run(capsys, "gen-data", "--count", 3000, "--out", tmp_path / "d.deds")[0] == EXIT_OK
    assert (tmp_path / "d.deds").stat().st_size == 12 + 3000 * 6465 + 4 == D.dataset_file_size(3000)


def test_out_dir_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DESCEDIT_OUT_DIR", str(tmp_path / "env"))
    assert run(capsys, "gen-data", "--count", 2)[0] == EXIT_OK
    assert (tmp_path / "env" / "pairs.deds").exists()


@pytest.mark.parametrize("argv", [
    ["gen-data", "--count", "0"], ["gen-data"], ["frobnicate"], [], ["gen-data", "--count", "x"],
    ["selftest", "--only", "nonexistent"], ["sweep", "--checkpoint", "m", "--lambda-i-list", "a,b"],
])
def test_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sed": 1}))
    code, _, err = run(capsys, "gen-data", "--count", 2, "--config", p, "--out", tmp_path / "x")
    assert code == EXIT_USAGE and "sed" in err


def test_data_errors(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "missing.dedt")
    assert code == EXIT_DATA and "not found" in err
    (tmp_path / "bad.dedt").write_bytes(b"NOPE" + b"\0" * 40)
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "bad.dedt")
    assert code == EXIT_DATA and "bad_magic" in err
    (tmp_path / "bad.deds").write_bytes(D.dumps_dataset(D.gen_dataset(0, 3))[:-9])
    code, _, err = run(capsys, "train", "--data", tmp_path / "bad.deds", "--out", tmp_path / "m.dedt")
    assert code == EXIT_DATA and "truncated" in err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert main(["-q", "gen-data", "--config", str(d / "tiny.json"), "--count", "24",
                 "--out", str(d / "pairs.deds")]) == EXIT_OK
    for name in ("m1", "m2"):
        assert main(["-q", "train", "--config", str(d / "tiny.json"), "--data", str(d / "pairs.deds"),
                     "--out", str(d / f"{name}.dedt")]) == EXIT_OK
    return d


def test_train_is_deterministic(trained):
    assert (trained / "m1.dedt").read_bytes() == (trained / "m2.dedt").read_bytes()
    model, cfg, step = load_checkpoint(trained / "m1.dedt")
    assert step == TINY["steps"] and cfg["dim"] == 32 and cfg["dataset"].endswith("pairs.deds")


def test_train_logs_loss(trained, capsys):
    code = main(["train", "--config", str(trained / "tiny.json"), "--data", str(trained / "pairs.deds"),
                 "--out", str(trained / "m3.dedt")])
    out, err = capsys.readouterr()
    assert code == EXIT_OK and "bridge step 2 loss" in err and "pretrain step 0 loss" in err
    assert "loss first" in out


def test_digest_matches_across_pipeline(trained, capsys):
    _, gen, _ = run(capsys, "gen-data", "--config", trained / "tiny.json", "--count", 24, "--out", trained / "p2.deds")
    _, ev, _ = run(capsys, "eval", "--checkpoint", trained / "m1.dedt", "--out", trained / "ev")
    assert field(gen, "config_digest") == field(ev, "config_digest") == RunConfig.from_dict(TINY).digest()


def test_edit_writes_reproducible_ppms(trained, capsys):
    for out in ("e1", "e2"):
        code, text, _ = run(capsys, "edit", "--checkpoint", trained / "m1.dedt", "--index", 21,
                            "--out", trained / out)
        assert code == EXIT_OK and "pair=21" in text
    for name in ("original", "output", "target"):
        a = (trained / "e1" / f"{name}.ppm").read_bytes()
        assert a == (trained / "e2" / f"{name}.ppm").read_bytes()
        assert a.startswith(b"P6\n16 16\n255\n") and len(a) == 13 + 768
    pairs = D.load_dataset(trained / "pairs.deds")
    assert (trained / "e1" / "target.ppm").read_bytes() == encode_ppm(pairs[21].target_image)
    assert run(capsys, "edit", "--checkpoint", trained / "m1.dedt", "--index", 99)[0] == EXIT_USAGE


def test_sweep_single_lambda_is_one_row(trained, capsys):
    code, out, _ = run(capsys, "sweep", "--checkpoint", trained / "m1.dedt", "--lambda-i-list", "1.5",
                       "--out", trained / "sw")
    assert code == EXIT_OK
    data = json.loads((trained / "sw" / "sweep.json").read_text())
    assert list(data["methods"]) == ["lambda_I=1.5"]
    assert (trained / "sw" / "sweep_grid.ppm").read_bytes().startswith(b"P6\n")
    assert len(data["methods"]["lambda_I=1.5"]["l1"]) == TINY["holdout_count"]
    # held-out pair 0 is dataset index 20; edit at the same lambda reproduces its row
    _, text, _ = run(capsys, "edit", "--checkpoint", trained / "m1.dedt", "--index", 20, "--lambda-i", 1.5,
                     "--out", trained / "e3")
    row = dict(cell.split("=") for cell in text.splitlines()[1].split()[1:])
    assert float(row["l1"]) == pytest.approx(data["methods"]["lambda_I=1.5"]["l1"][0], abs=5e-5)


def test_ablate_single_mode(trained, capsys):
    code, out, _ = run(capsys, "ablate", "--config", trained / "tiny.json", "--data", trained / "pairs.deds",
                       "--modes", "direct-addition", "--out", trained / "ab")
    assert code == EXIT_OK
    data = json.loads((trained / "ab" / "ablation.json").read_text())
    assert list(data["methods"]) == ["direct-addition"]


def test_eval_report(trained, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "m1.dedt", "--count", 2, "--out", trained / "ev2")
    assert code == EXIT_OK and "Adhere(in)*" in out
    data = json.loads((trained / "ev2" / "eval.json").read_text())
    assert data["metadata"]["pairs"] == 2 and data["metadata"]["step"] == TINY["steps"]


def test_selftest_command(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == EXIT_OK and out.count("PASS") == 8


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--samples", 10)
    assert code == EXIT_OK and float(field(out, "max_rel_error")) < 1e-3
