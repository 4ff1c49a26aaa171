import csv

import numpy as np
import pytest

from sadcnn import cli
from sadcnn.halftone import error_diffuse_fs
from sadcnn.imageio import load_gray, read_image, write_image
from sadcnn.network import NetworkSpec, StructureAwareNet, load_checkpoint, save_checkpoint

TINY_FLAGS = ["--p", "2", "--q", "2", "--r", "2", "--m", "4", "--k", "3", "--batch", "2",
              "--iters-per-epoch", "5", "--epochs", "1", "--pretrain-epochs", "1", "--holdout", "0"]


def test_halftone_white(tmp_path):
    write_image(tmp_path / "w.ppm", np.full((6, 5, 3), 255, np.uint8))
    assert cli.main(["halftone", str(tmp_path / "w.ppm"), str(tmp_path / "h.pgm")]) == 0
    assert (read_image(tmp_path / "h.pgm") == 255).all()


def test_halftone_matches_library(corpus_dir, tmp_path):
    src = sorted(corpus_dir.iterdir())[0]
    for serp in (False, True):
        out = tmp_path / f"h{serp}.pgm"
        args = ["halftone", str(src), str(out)] + (["--serpentine"] if serp else [])
        assert cli.main(args) == 0
        img = read_image(out)
        assert set(np.unique(img)) <= {0, 255}
        assert np.array_equal(img / 255.0, error_diffuse_fs(load_gray(src), serp))


def test_halftone_missing_input(tmp_path):
    assert cli.main(["halftone", str(tmp_path / "none.pgm"), str(tmp_path / "o.pgm")]) == 2


def test_print_config_profiles(capsys):
    assert cli.main(["train", "--profile", "paper", "--print-config"]) == 0
    out = capsys.readouterr().out
    for line in ("lr = 1e-05", "batch = 64", "epochs = 200", "iters_per_epoch = 1000",
                 "p = 16", "q = 6", "r = 16", "m = 64"):
        assert line in out.splitlines()
    assert cli.main(["train", "--print-config"]) == 0
    assert "m = 16" in capsys.readouterr().out.splitlines()


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr = 0.5\nbatch = 3\n")
    assert cli.main(["train", "--config", str(cfg), "--batch", "5", "--print-config"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "lr = 0.5" in lines and "batch = 5" in lines


def test_train_missing_corpus(tmp_path, capsys):
    assert cli.main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "x")]) == 2
    assert "corpus" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("nonsense = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--print-config"]) == 2


def test_usage_errors():
    assert cli.main([]) == 2
    assert cli.main(["train", "--profile", "huge"]) == 2
    assert cli.main(["--threads", "0", "gradcheck"]) == 2


def test_train_then_infer(corpus_dir, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    log = tmp_path / "loss.csv"
    assert cli.main(["train", "--corpus", str(corpus_dir), "--out", str(ckpt), "--log", str(log)]
                    + TINY_FLAGS) == 0
    assert load_checkpoint(ckpt).step == 10
    assert len(list(csv.reader(log.open()))) == 11

    halftone = tmp_path / "in.pgm"
    write_image(halftone, error_diffuse_fs(np.full((20, 27), 0.3)))
    out, smap, init = tmp_path / "out.pgm", tmp_path / "smap.pgm", tmp_path / "init.pgm"
    assert cli.main(["infer", "--ckpt", str(ckpt), str(halftone), str(out),
                     "--dump-structure-map", str(smap), "--dump-initial", str(init)]) == 0
    for p in (out, smap, init):
        assert read_image(p).shape == (20, 27)


def test_resume_via_cli(corpus_dir, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert cli.main(["train", "--corpus", str(corpus_dir), "--out", str(a)] + TINY_FLAGS) == 0
    more = [f if f != "1" or i != TINY_FLAGS.index("--epochs") + 1 else "2" for i, f in enumerate(TINY_FLAGS)]
    assert cli.main(["train", "--corpus", str(corpus_dir), "--out", str(b), "--resume", str(a)] + more) == 0
    assert load_checkpoint(b).step == 15


def test_infer_output_clamped(tmp_path):
    net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4))
    for p in net.rs.parameters():
        p.weights[...] = 0
    net.rs.layers[-1].params.bias[:] = 3.0
    save_checkpoint(net, tmp_path / "big.ckpt")
    write_image(tmp_path / "h.pgm", np.zeros((8, 8)))
    assert cli.main(["infer", "--ckpt", str(tmp_path / "big.ckpt"), str(tmp_path / "h.pgm"),
                     str(tmp_path / "o.pgm")]) == 0
    assert (read_image(tmp_path / "o.pgm") == 255).all()


def test_infer_baseline_has_no_structure_map(tmp_path):
    save_checkpoint(StructureAwareNet.build(NetworkSpec(0, 0, 2, 4)), tmp_path / "b.ckpt")
    write_image(tmp_path / "h.pgm", np.zeros((8, 8)))
    args = ["infer", "--ckpt", str(tmp_path / "b.ckpt"), str(tmp_path / "h.pgm"), str(tmp_path / "o.pgm")]
    assert cli.main(args) == 0
    assert cli.main(args + ["--dump-structure-map", str(tmp_path / "s.pgm")]) == 2


def test_infer_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"SADCNN01" + bytes(10))
    write_image(tmp_path / "h.pgm", np.zeros((8, 8)))
    assert cli.main(["infer", "--ckpt", str(tmp_path / "bad.ckpt"), str(tmp_path / "h.pgm"),
                     str(tmp_path / "o.pgm")]) == 2


def test_eval_identity_report(test_dir, tmp_path):
    report = tmp_path / "r.csv"
    assert cli.main(["eval", "--ckpt", "oracle", "--test", str(test_dir), "--report", str(report)]) == 0
    rows = list(csv.reader(report.open()))
    assert len(rows) == 1 + 3 + 1
    assert all(r[2] == "1.000" for r in rows[1:])
    assert all(r[1] == "inf" for r in rows[1:])


def test_eval_text_report_and_errors(test_dir, tmp_path):
    assert cli.main(["eval", "--ckpt", "gaussian", "--test", str(test_dir), "--report", str(tmp_path / "r.txt")]) == 0
    assert (tmp_path / "r.txt").read_text().splitlines()[-1].startswith("AVG")
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--test", str(test_dir)]) == 2
    assert cli.main(["eval", "--ckpt", "oracle", "--test", str(tmp_path / "none")]) == 2


def test_ablate(corpus_dir, test_dir, tmp_path, capsys):
    report = tmp_path / "ab.csv"
    assert cli.main(["ablate", "--corpus", str(corpus_dir), "--test", str(test_dir),
                     "--report", str(report)] + TINY_FLAGS) == 0
    assert "structure-aware" in capsys.readouterr().out
    rows = list(csv.reader(report.open()))
    assert rows[0][1:] == ["proposed_psnr", "proposed_ssim", "dcnn_psnr", "dcnn_ssim"]
    assert len(rows) == 5


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--full"]) == 0
    out = capsys.readouterr().out
    assert "full-network" in out and "gradcheck passed" in out


def test_gradcheck_catches_corrupted_backward(monkeypatch, capsys):
    import sadcnn.tensor as tensor
    real = tensor.relu_backward
    monkeypatch.setattr(tensor, "relu_backward", lambda mask, g: 0.9 * real(mask, g))
    assert cli.main(["gradcheck"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_threads_env_fallback(monkeypatch):
    from sadcnn import kernels
    monkeypatch.setenv("HTF_THREADS", "1")
    assert cli.main(["gradcheck"]) == 0
    assert kernels.get_num_threads() == 1
    monkeypatch.setenv("HTF_THREADS", "many")
    assert cli.main(["gradcheck"]) == 2
