import csv
import io

import numpy as np
import pytest

from fourdgc import stream as bs
from fourdgc.cli import EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, build_config, build_parser, main, read_config_file
from fourdgc.gaussians import load_raw_frame
from fourdgc.metrics import read_rd_csv
from fourdgc.pipeline import DEFAULT_LAMBDAS, decode_stream

QUICK = ["--set", "keyframe_iters=30", "--set", "stage1_iters=12", "--set", "stage2_iters=6",
         "--set", "hard_iters=3", "--set", "resolutions=4,8", "--set", "channels=2,2"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene"
    assert main(["synth", "--out", str(scene), "--seed", "4", "--frames", "3", "--gaussians", "4",
                 "--views", "2", "--width", "24", "--height", "24"]) == 0
    stream = root / "s.4dgc"
    assert main(["keyframe", "--images", str(scene / "frame_0001"), "--cameras", str(scene / "cameras.json"),
                 "--lambda1", "0.0001", "--out", str(stream), "--seed", "4", *QUICK]) == 0
    assert main(["stream", "--in", str(stream), "--frames", str(scene / "frame_0002"), str(scene / "frame_0003"),
                 "--cameras", str(scene / "cameras.json")]) == 0
    return root, scene, stream


def test_synth_writes_scene(workdir):
    _, scene, _ = workdir
    assert (scene / "cameras.json").exists()
    assert sorted(p.name for p in (scene / "frame_0002").iterdir()) == [
        "test.ppm", "truth.4dgs", "view00.ppm", "view01.ppm"]


def test_stream_has_all_frames(workdir):
    _, _, stream = workdir
    frames = bs.read_stream(stream)
    assert [f.frame_index for f in frames] == [1, 2, 3]
    assert frames[0].block(bs.MLP_MU) is not None
    assert (stream.parent / "s.4dgc.state.npz").exists()


def test_decode_matches_library(workdir, capsys, tmp_path):
    _, _, stream = workdir
    code, out, _ = run(["decode", "--in", stream, "--frame", 2, "--out", tmp_path / "f2.4dgs"], capsys)
    assert code == 0 and "frame 2" in out
    got = load_raw_frame(tmp_path / "f2.4dgs", 2)
    want = decode_stream(bs.read_stream(stream))[1]
    assert np.array_equal(got.centers, want.centers.astype(np.float32))


def test_render_matches_eval(workdir, capsys, tmp_path):
    _, scene, stream = workdir
    code, out, _ = run(["eval", "--stream", stream, "--truth", scene], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["frame"] for r in rows] == ["1", "2", "3", "mean"]
    assert int(rows[0]["bits"]) == bs.read_stream(stream)[0].byte_size() * 8

    run(["decode", "--in", stream, "--frame", 3, "--out", tmp_path / "f3.4dgs"], capsys)
    for src in (stream, tmp_path / "f3.4dgs"):
        code, out, _ = run(["render", "--in", src, "--frame", 3, "--camera", scene / "cameras.json",
                            "--view", "test", "--out", tmp_path / "r.ppm",
                            "--truth", scene / "frame_0003" / "test.ppm"], capsys)
        assert code == 0
        rendered_psnr = float(out.split()[1])
        # the .4dgs copy holds float32 values, the stream decodes to float64
        assert rendered_psnr == pytest.approx(float(rows[2]["psnr_db"]), abs=1e-6 if src == stream else 1e-4)
    assert (tmp_path / "r.ppm").read_bytes()[:2] == b"P6"


def test_keyframe_is_deterministic(workdir, capsys, tmp_path):
    _, scene, _ = workdir
    outputs = []
    for name in ("a.4dgc", "b.4dgc"):
        code, _, _ = run(["keyframe", "--images", scene / "frame_0001", "--cameras", scene / "cameras.json",
                          "--lambda1", "0.0001", "--out", tmp_path / name, "--seed", "4", *QUICK], capsys)
        assert code == 0
        outputs.append((tmp_path / name).read_bytes())
    assert outputs[0] == outputs[1]


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("FOURDGC_SEED", "17")
    args = build_parser().parse_args(["rdcurve", "--scene", "x"])
    assert build_config(args).seed == 17
    args = build_parser().parse_args(["rdcurve", "--scene", "x", "--seed", "3"])
    assert build_config(args).seed == 3


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlambda1 = 5e-5\nq_grid = 80  # trailing\n")
    assert read_config_file(path) == {"lambda1": "5e-5", "q_grid": "80"}
    args = build_parser().parse_args(["rdcurve", "--scene", "x", "--config", str(path), "--set", "q_grid=60"])
    cfg = build_config(args)
    assert cfg.lambda1 == 5e-5 and cfg.q_grid == 60.0


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "lambda1 = 0.0001" in out and "resolutions = 16,32,64" in out


def test_rdcurve_default_lambdas():
    args = build_parser().parse_args(["rdcurve", "--scene", "x"])
    assert [float(v) for v in args.lambdas.split(",")] == list(DEFAULT_LAMBDAS)


def test_rdcurve_writes_report(workdir, capsys, tmp_path):
    _, scene, _ = workdir
    code, _, _ = run(["rdcurve", "--scene", scene, "--lambdas", "0.0003,0.00001", "--frames", 2,
                      "--out", tmp_path / "rd", *QUICK], capsys)
    assert code == 0
    curves = read_rd_csv(tmp_path / "rd.csv")
    assert [p.lambda1 for p in curves["4dgc"]] == [0.0003, 0.00001]
    assert (tmp_path / "rd_fit.csv").exists()
    assert (tmp_path / "stream_lambda1e-05.4dgc").exists()


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["decode", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_bad_config_key_is_usage_error(workdir, capsys, tmp_path):
    _, scene, _ = workdir
    code, _, err = run(["keyframe", "--images", scene / "frame_0001", "--cameras", scene / "cameras.json",
                        "--out", tmp_path / "k.4dgc", "--set", "no_such_key=1"], capsys)
    assert code == EXIT_USAGE and "no_such_key" in err


def test_missing_file_is_io_error(capsys, tmp_path):
    code, _, err = run(["decode", "--in", tmp_path / "absent.4dgc", "--frame", 1, "--out", tmp_path / "x"], capsys)
    assert code == EXIT_IO and err


def test_corrupt_stream_is_io_error(workdir, capsys, tmp_path):
    _, _, stream = workdir
    bad = tmp_path / "bad.4dgc"
    bad.write_bytes(b"XXXX" + stream.read_bytes()[4:])
    code, _, _ = run(["decode", "--in", bad, "--frame", 1, "--out", tmp_path / "x.4dgs"], capsys)
    assert code == EXIT_IO


def test_missing_frame_is_usage_error(workdir, capsys, tmp_path):
    _, _, stream = workdir
    code, _, _ = run(["decode", "--in", stream, "--frame", 9, "--out", tmp_path / "x.4dgs"], capsys)
    assert code == EXIT_USAGE


def test_numeric_failure_echoes_seed(workdir, capsys, tmp_path):
    _, scene, _ = workdir
    code, _, err = run(["keyframe", "--images", scene / "frame_0001", "--cameras", scene / "cameras.json",
                        "--out", tmp_path / "k.4dgc", "--seed", "9", "--set", "lr_sh=nan", *QUICK], capsys)
    assert code == EXIT_NUMERIC and "seed=9" in err
