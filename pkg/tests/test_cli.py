import json

import numpy as np
import pytest

from complexdec import dsp
from complexdec.cli import main
from complexdec.data import DatasetManifest, synthetic_utterance


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    wav = root / "u.wav"
    dsp.write_wav(wav, synthetic_utterance(0.4), 48000)
    DatasetManifest.from_wavs([wav]).save(root / "m.json")
    (root / "c.yaml").write_text("preset: tiny\ntrain:\n  lr: 0.001\n  batch_size: 1\n  segment_length: 3200\n")
    assert main(["train-codec", "--manifest", str(root / "m.json"), "--config", str(root / "c.yaml"),
                 "--out", str(root / "ck"), "--max-steps", "2"]) == 0
    return root


def test_train_codec_outputs(workspace):
    assert (workspace / "ck" / "codec.pt").exists()
    lines = (workspace / "ck" / "codec_losses.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_encode_decode_info(workspace, capsys):
    codec = str(workspace / "ck" / "codec.pt")
    cpxd, out = workspace / "u.cpxd", workspace / "out.wav"
    assert main(["encode", str(workspace / "u.wav"), str(cpxd), "--codec", codec]) == 0
    assert main(["decode", str(cpxd), str(out), "--codec", codec]) == 0
    assert len(dsp.read_wav(out)) == len(dsp.read_wav(workspace / "u.wav")) == 19200
    capsys.readouterr()
    assert main(["info", str(cpxd)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_frames"] == 60 and info["n_samples"] == 19200 and info["bitrate"] == 2400


def test_checkpoint_dir_from_env(workspace, monkeypatch):
    monkeypatch.setenv("COMPLEXDEC_CHECKPOINT_DIR", str(workspace / "ck"))
    assert main(["encode", str(workspace / "u.wav"), str(workspace / "e.cpxd")]) == 0


def test_train_spf_and_decode_with_postfilter(workspace, tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("train:\n  lr: 0.001\n  batch_size: 1\n  segment_length: 320\n"
                   "unet:\n  base_channels: 8\n  channel_mults: [1, 2]\n  tile_frames: 16\n"
                   "sde:\n  n_steps: 2\n")
    codec = str(workspace / "ck" / "codec.pt")
    assert main(["train-spf", "--manifest", str(workspace / "m.json"), "--config", str(cfg), "--codec", codec,
                 "--out", str(tmp_path), "--max-steps", "2"]) == 0
    cpxd = tmp_path / "u.cpxd"
    main(["encode", str(workspace / "u.wav"), str(cpxd), "--codec", codec])
    outs = []
    for name in ("a.wav", "b.wav"):
        assert main(["decode", str(cpxd), str(tmp_path / name), "--codec", codec, "--spf",
                     str(tmp_path / "spf.pt"), "--seed", "5", "--bits", "24"]) == 0
        outs.append(dsp.read_wav(tmp_path / name).samples)
    np.testing.assert_array_equal(*outs)


def test_eval_report(workspace, capsys, tmp_path):
    report = tmp_path / "r.jsonl"
    assert main(["eval", "--manifest", str(workspace / "m.json"), "--codec", str(workspace / "ck" / "codec.pt"),
                 "--output", str(report)]) == 0
    records = [json.loads(x) for x in report.read_text().splitlines()]
    assert records[-1]["type"] == "aggregate"
    assert capsys.readouterr().out == report.read_text()


def test_spectrogram(workspace, tmp_path):
    assert main(["spectrogram", str(workspace / "u.wav"), str(tmp_path / "s.png")]) == 0
    assert (tmp_path / "s.png").stat().st_size > 0


def test_bad_arguments():
    with pytest.raises(SystemExit):
        main(["train-codec"])
    with pytest.raises(SystemExit):
        main(["nope"])
