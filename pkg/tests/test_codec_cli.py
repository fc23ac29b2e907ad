import json
import os

import numpy as np
import pytest

from csmc import codec, training, video
from csmc.cli import main
from csmc.errors import ConfigError, FormatError
from csmc.network import ModelConfig, build_model
from csmc.sensing import SensingConfig, make_matrix

SMALL_MODEL = {"compression_factor": 4, "prelim_channels": [8, 4, 2],
               "residual_channels": [4, 4, 2, 2], "window_radius": 4}
SMALL_DATA = {"crop": 64, "size": 64, "clips": 4, "frames": 3, "test_frames": 3}


def write_config(path, train=None, model=None):
    cfg = {"model": dict(SMALL_MODEL, **(model or {})),
           "train": dict({"stage_count": 1, "epochs": 4, "batch_size": 8, "lr0": 2e-3,
                          "pretrain_epochs": 2}, **(train or {})),
           "data": SMALL_DATA}
    path.write_text(json.dumps(cfg))
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- measurement format ------------------------------------------------------------

def test_measurement_round_trip(tmp_path):
    phi = make_matrix(SensingConfig(16, 16), 7)
    frames = video.make_synthetic("translate", 48, 32, 2, seed=1).as_float()
    ys = codec.encode_frames(frames, phi, 16, snr_db=30, noise_seed=3)
    header = codec.make_header(phi, 16, frames.shape, 30, 3)
    path = tmp_path / "m.csmm"
    codec.write_measurements(path, header, ys)
    h2, y2 = codec.read_measurements(path)
    assert h2 == header and y2.tobytes() == ys.tobytes()
    assert header["m"] == 16 and header["compression_factor"] == 16
    assert (header["width"], header["height"], header["frames"]) == (48, 32, 2)
    data = path.read_bytes()
    assert data[:4] == b"CSMM"
    assert codec.measurements_to_bytes(h2, y2) == data


def test_measurement_format_errors(tmp_path):
    phi = make_matrix(SensingConfig(), 0)
    ys = codec.encode_frames(np.zeros((1, 16, 16)), phi)
    data = codec.measurements_to_bytes(codec.make_header(phi, 16, (1, 16, 16)), ys)
    with pytest.raises(FormatError, match="magic"):
        codec.measurements_from_bytes(b"ABCD" + data[4:])
    with pytest.raises(FormatError, match="payload is 120 bytes, expected 128"):
        codec.measurements_from_bytes(data[:-8])
    with pytest.raises(ConfigError):
        codec.measurements_to_bytes(codec.make_header(phi, 16, (2, 16, 16)), ys)


def test_noise_per_frame_seeds():
    phi = make_matrix(SensingConfig(), 0)
    frames = video.make_synthetic("static", 32, 32, 2, seed=1).as_float()
    ys = codec.encode_frames(frames, phi, snr_db=20, noise_seed=5)
    clean = codec.encode_frames(frames, phi)
    assert not np.array_equal(ys[0] - clean[0], ys[1] - clean[1])
    again = codec.encode_frames(frames, phi, snr_db=20, noise_seed=5)
    assert ys.tobytes() == again.tobytes()


def test_model_mismatch_refused():
    model = build_model(ModelConfig(stage_count=1, matrix_seed=1))
    phi = make_matrix(SensingConfig(), 2)
    header = codec.make_header(phi, 16, (1, 16, 16))
    with pytest.raises(ConfigError, match="seed"):
        codec.check_model_matches(header, model)
    header = codec.make_header(model.phi, 16, (1, 16, 16))
    codec.check_model_matches(header, model)
    header["matrix_algorithm"] = "other"
    with pytest.raises(ConfigError, match="algorithm"):
        codec.check_model_matches(header, model)


# -- CLI -----------------------------------------------------------------------------

def test_cli_make_synthetic_and_eval_self(tmp_path, capsys):
    gsv = tmp_path / "a.gsv"
    code, out, _ = run(capsys, "make-synthetic", "--kind", "bounce", "--size", "64x48",
                       "--frames", 3, "--seed", 4, "--out", gsv)
    assert code == 0 and json.loads(out)["frames"] == 3
    vid = video.read_gsv(gsv)
    assert (vid.width, vid.height, vid.frame_count) == (64, 48, 3)
    report = tmp_path / "eval.json"
    code, out, _ = run(capsys, "eval", "--ref", gsv, "--test", gsv, "--report", report)
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["mean_psnr"] == 99.0 and rep["mean_ssim"] == 1.0
    assert len(rep["frames"]) == 3
    assert os.path.getsize(tmp_path / "eval.png") > 0


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--ref", tmp_path / "missing.gsv",
                       "--test", tmp_path / "missing.gsv", "--report", tmp_path / "r.json")
    assert code == 2
    line = json.loads(err.strip().splitlines()[-1])
    assert line["error"] == "FileNotFoundError" and "missing.gsv" in line["message"]
    bad = tmp_path / "bad.gsv"
    bad.write_bytes(b"GSV1" + bytes(12) + b"x")
    code, _, err = run(capsys, "eval", "--ref", bad, "--test", bad, "--report", tmp_path / "r.json")
    assert code == 2 and json.loads(err)["error"] == "FormatError"
    code, _, err = run(capsys, "make-synthetic", "--kind", "translate", "--velocity", "20,0",
                       "--out", tmp_path / "x.gsv")
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


@pytest.fixture(scope="module")
def cli_models(tmp_path_factory):
    """A CR-4 model trained through the CLI and its untrained twin."""
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(d / "trained.ckpt"),
                 "--log", str(d / "log.jsonl")]) == 0
    untrained = build_model(ModelConfig(stage_count=1, **SMALL_MODEL))
    trained = training.load_model(d / "trained.ckpt")
    untrained.norm_mean, untrained.norm_std = trained.norm_mean, trained.norm_std
    training.save_model(d / "untrained.ckpt", untrained)
    return d, cfg


def test_cli_train_outputs(cli_models):
    d, _ = cli_models
    records = [json.loads(x) for x in (d / "log.jsonl").read_text().splitlines()]
    assert len(records) == 4
    ckpt = training.load_checkpoint(d / "trained.ckpt")
    assert ckpt.epoch == 4 and ckpt.history == records
    assert ckpt.model.extra["lambda_mc"] == 0.5
    assert len(ckpt.model.extra["pretrain_history"]) == 2
    assert (d / "trained_loss.png").stat().st_size > 0


def test_cli_trained_beats_untrained_cr4(cli_models, capsys):
    d, _ = cli_models
    gsv = d / "static.gsv"
    assert main(["make-synthetic", "--kind", "static", "--size", "64", "--frames", "3",
                 "--seed", "77", "--out", str(gsv)]) == 0
    psnr = {}
    for name in ("trained", "untrained"):
        meas, dec, rep = d / f"{name}.csmm", d / f"{name}.gsv", d / f"{name}.json"
        assert main(["encode", "--model", str(d / f"{name}.ckpt"), "--in", str(gsv),
                     "--out", str(meas)]) == 0
        assert main(["decode", "--model", str(d / f"{name}.ckpt"), "--in", str(meas),
                     "--out", str(dec)]) == 0
        assert main(["eval", "--ref", str(gsv), "--test", str(dec), "--report", str(rep)]) == 0
        psnr[name] = json.loads(rep.read_text())["mean_psnr"]
    capsys.readouterr()
    print(f"CR 4 static clip: trained {psnr['trained']:.2f} dB, "
          f"untrained {psnr['untrained']:.2f} dB")
    assert psnr["trained"] > psnr["untrained"]


def test_cli_decode_refuses_other_seed(cli_models, tmp_path, capsys):
    d, _ = cli_models
    gsv = tmp_path / "v.gsv"
    video.write_gsv(gsv, video.make_synthetic("static", 32, 32, 1))
    sensing = tmp_path / "s.json"
    sensing.write_text(json.dumps({"block_size": 16, "compression_factor": 4, "matrix_seed": 9}))
    meas = tmp_path / "v.csmm"
    assert main(["encode", "--sensing", str(sensing), "--in", str(gsv), "--out", str(meas)]) == 0
    header, _ = codec.read_measurements(meas)
    assert header["matrix_seed"] == 9 and header["m"] == 64
    code, _, err = run(capsys, "decode", "--model", d / "trained.ckpt", "--in", meas,
                       "--out", tmp_path / "o.gsv")
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_cli_encode_needs_one_source(tmp_path, capsys):
    code, _, err = run(capsys, "encode", "--in", tmp_path / "x.gsv", "--out", tmp_path / "y")
    assert code == 2 and "exactly one" in json.loads(err)["message"]


def test_cli_noisy_encode_header(cli_models, tmp_path):
    d, _ = cli_models
    gsv = tmp_path / "v.gsv"
    video.write_gsv(gsv, video.make_synthetic("translate", 64, 64, 2, seed=3))
    meas = tmp_path / "v.csmm"
    assert main(["encode", "--model", str(d / "trained.ckpt"), "--in", str(gsv), "--out",
                 str(meas), "--snr-db", "30", "--noise-seed", "4"]) == 0
    header, _ = codec.read_measurements(meas)
    assert header["noise_snr_db"] == 30.0 and header["noise_seed"] == 4


def test_cli_pretrain_then_train_init(cli_models, tmp_path, capsys):
    _, cfg = cli_models
    pre = tmp_path / "pre.ckpt"
    code, out, _ = run(capsys, "pretrain", "--config", cfg, "--out", pre)
    assert code == 0 and len(json.loads(out)["pretrain_history"]) == 2
    final = tmp_path / "final.ckpt"
    code, out, _ = run(capsys, "train", "--config", cfg, "--init", pre, "--out", final)
    assert code == 0 and json.loads(out)["epochs"] == 4
    assert training.load_checkpoint(final).train_config["lambda_mc"] == 0.5


def test_cli_train_on_gsv_data(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 1, "pretrain_epochs": 0})
    clips = []
    for i in range(2):
        clips.append(tmp_path / f"c{i}.gsv")
        video.write_gsv(clips[-1], video.make_synthetic("translate", 80, 80, 3, (2, 0), seed=i))
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", *clips, "--out",
                       tmp_path / "m.ckpt")
    assert code == 0
    assert training.load_checkpoint(tmp_path / "m.ckpt").epoch == 1


def test_cli_noise_sweep(cli_models, tmp_path, capsys):
    d, _ = cli_models
    gsv = tmp_path / "v.gsv"
    video.write_gsv(gsv, video.make_synthetic("translate", 64, 64, 3, (2, 0), seed=5))
    report = tmp_path / "noise.json"
    code, out, _ = run(capsys, "noise-sweep", "--model", d / "trained.ckpt", "--in", gsv,
                       "--snr-list", "20,30,40,50", "--report", report)
    assert code == 0
    rep = json.loads(report.read_text())
    assert [r["snr_db"] for r in rep["rows"]] == [20.0, 30.0, 40.0, 50.0]
    assert {"noiseless_psnr", "noiseless_ssim", "noise_seed"} <= set(rep)
    assert (tmp_path / "noise.png").stat().st_size > 0


def test_cli_ablate_stages(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 1, "pretrain_epochs": 0})
    report = tmp_path / "ablate.json"
    code, out, _ = run(capsys, "ablate-stages", "--config", cfg, "--stages", "1,2",
                       "--report", report)
    assert code == 0
    rows = json.loads(report.read_text())["rows"]
    assert [r["stages"] for r in rows] == [1, 2]
    assert all({"cr", "psnr", "ssim"} <= set(r) and r["cr"] == 4 for r in rows)
    assert (tmp_path / "ablate.png").stat().st_size > 0


def test_cli_subcommands_deterministic(tmp_path, capsys):
    outs = []
    for i in range(2):
        path = tmp_path / f"{i}.gsv"
        assert main(["make-synthetic", "--seed", "3", "--size", "32", "--frames", "2",
                     "--out", str(path)]) == 0
        meas = tmp_path / f"{i}.csmm"
        sensing = tmp_path / "s.json"
        sensing.write_text(json.dumps({"compression_factor": 16, "matrix_seed": 1}))
        assert main(["encode", "--sensing", str(sensing), "--in", str(path), "--out", str(meas),
                     "--snr-db", "25"]) == 0
        outs.append(path.read_bytes() + meas.read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]
