"""Tests for the command line client: exit codes, written artifacts,
determinism of report output, and the remote mode, which is exercised
against an in-process test server."""

import numpy as np
import pytest
from PIL import Image

from deepfeat.backbone import save_features
from deepfeat.cli import main
from deepfeat.imaging import load_map_raw

from conftest import make_bundle, make_cache, make_dataset

ALL_REPORT_FILES = {
    "scores.csv",
    "summary.csv",
    "ttests.csv",
    "ranking_auc.csv",
    "ranking_auc_borji.csv",
    "ranking_cc.csv",
    "ranking_kl.csv",
    "roc_BU.csv",
    "roc_TD.csv",
    "roc_NCB.csv",
    "roc_WCB.csv",
    "roc_borji_BU.csv",
    "roc_borji_TD.csv",
    "roc_borji_NCB.csv",
    "roc_borji_WCB.csv",
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ids = make_dataset(root / "ds", n=3, size=(24, 30), seed=9)
    make_cache(root / "cache", ids, (24, 30))
    feats = root / "one.dfb1"
    save_features(make_bundle(seed=11, source=(20, 16)), feats)
    return root, ids


def _eval_args(root, out, extra=()):
    return [
        "evaluate",
        "--dataset",
        str(root / "ds"),
        "--cache",
        str(root / "cache"),
        "--borji-splits",
        "8",
        "--out",
        str(out),
        *extra,
    ]


# ---------------------------------------------------------------------------
# exit codes


def test_no_command_exits_1(capsys):
    assert main([]) == 1
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "predict" in capsys.readouterr().out


def test_bad_variant_exits_1(capsys):
    rc = main(["predict", "--image", "x.png", "--variant", "nope"])
    assert rc == 1
    capsys.readouterr()


def test_malformed_external_exits_1(capsys):
    rc = main(["compare", "--dataset", "d", "--external", "nodash", "--out", "o"])
    assert rc == 1
    capsys.readouterr()


def test_predict_without_input_exits_1(capsys):
    assert main(["predict"]) == 1
    capsys.readouterr()


def test_unreadable_image_exits_2(tmp_path, capsys):
    rc = main(["predict", "--image", str(tmp_path / "missing.png")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_no_provider_exits_3(corpus, tmp_path, capsys):
    root, _ = corpus
    rc = main(
        ["evaluate", "--dataset", str(root / "ds"), "--out", str(tmp_path / "o")]
    )
    assert rc == 3
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# predict


def test_predict_writes_png_and_raw(corpus, tmp_path, capsys):
    root, _ = corpus
    png = tmp_path / "map.png"
    raw = tmp_path / "map.dfm1"
    rc = main(
        [
            "predict",
            "--features",
            str(root / "one.dfb1"),
            "--variant",
            "ncb",
            "--out-png",
            str(png),
            "--out-raw",
            str(raw),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    assert Image.open(png).size == (16, 20)
    m = load_map_raw(raw)
    assert m.data.shape == (20, 16)
    assert float(m.data.sum()) == pytest.approx(1.0, abs=1e-4)


def test_predict_default_output_name(corpus, tmp_path, monkeypatch, capsys):
    root, _ = corpus
    monkeypatch.chdir(tmp_path)
    rc = main(["predict", "--features", str(root / "one.dfb1")])
    assert rc == 0
    capsys.readouterr()
    assert (tmp_path / "one.wcb.png").is_file()


def test_predict_top_n_changes_map(corpus, tmp_path, capsys):
    root, _ = corpus
    full = tmp_path / "full.dfm1"
    trunc = tmp_path / "trunc.dfm1"
    base = ["predict", "--features", str(root / "one.dfb1"), "--variant", "td"]
    assert main(base + ["--out-raw", str(full)]) == 0
    assert main(base + ["--top-n", "1", "--out-raw", str(trunc)]) == 0
    capsys.readouterr()
    assert not np.array_equal(load_map_raw(full).data, load_map_raw(trunc).data)


# ---------------------------------------------------------------------------
# evaluate / compare


def test_evaluate_writes_all_report_files(corpus, tmp_path, capsys):
    root, _ = corpus
    out = tmp_path / "out"
    assert main(_eval_args(root, out)) == 0
    assert "wrote" in capsys.readouterr().out
    assert {p.name for p in out.iterdir()} == ALL_REPORT_FILES


def test_evaluate_twice_is_byte_identical(corpus, tmp_path, capsys):
    root, _ = corpus
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    assert main(_eval_args(root, out1)) == 0
    assert main(_eval_args(root, out2)) == 0
    capsys.readouterr()
    names = sorted(p.name for p in out1.iterdir())
    assert names == sorted(p.name for p in out2.iterdir())
    for name in names:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_regen_sigma_flag_defaults():
    from deepfeat.cli import build_parser

    parser = build_parser()
    base = ["evaluate", "--dataset", "d", "--out", "o"]
    assert parser.parse_args(base).regen_density_sigma is None
    assert parser.parse_args(base + ["--regen-density-sigma"]).regen_density_sigma == 35.0
    assert (
        parser.parse_args(base + ["--regen-density-sigma", "2.5"]).regen_density_sigma
        == 2.5
    )


def test_evaluate_variant_subset(corpus, tmp_path, capsys):
    root, _ = corpus
    out = tmp_path / "out"
    assert main(_eval_args(root, out, ["--variants", "td"])) == 0
    capsys.readouterr()
    names = {p.name for p in out.iterdir()}
    assert "roc_TD.csv" in names
    assert "roc_WCB.csv" not in names
    assert (out / "ttests.csv").read_text() == (
        "model_a,model_b,metric,t,p,significant\n"
    )


def test_compare_with_external_maps(corpus, tmp_path, capsys):
    root, ids = corpus
    ext = tmp_path / "ext"
    ext.mkdir()
    rng = np.random.default_rng(4)
    for image_id in ids:
        arr = (rng.random((24, 30)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(ext / f"{image_id}.png")
    out = tmp_path / "out"
    rc = main(
        [
            "compare",
            "--dataset",
            str(root / "ds"),
            "--cache",
            str(root / "cache"),
            "--variants",
            "wcb,ncb",
            "--borji-splits",
            "8",
            "--external",
            f"classic={ext}",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    names = {p.name for p in out.iterdir()}
    assert {"roc_classic.csv", "roc_WCB.csv", "roc_NCB.csv"} <= names
    scores = (out / "scores.csv").read_text().splitlines()
    assert any(line.startswith("classic,") for line in scores)
    tests = (out / "ttests.csv").read_text().splitlines()
    assert len(tests) > 1


def test_compare_duplicate_external_exits_2(corpus, tmp_path, capsys):
    root, _ = corpus
    rc = main(
        [
            "compare",
            "--dataset",
            str(root / "ds"),
            "--external",
            "m=/a",
            "--external",
            "m=/b",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert rc == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# features


def test_features_command_writes_maps(corpus, tmp_path, capsys):
    root, _ = corpus
    out = tmp_path / "feat"
    rc = main(
        [
            "features",
            "--features",
            str(root / "one.dfb1"),
            "--layers",
            "1,2",
            "--cam",
            "1",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    assert {p.name for p in out.iterdir()} == {
        "layer_01.png",
        "layer_02.png",
        "cam_1.png",
    }


def test_features_unknown_layer_exits_2(corpus, tmp_path, capsys):
    root, _ = corpus
    rc = main(
        [
            "features",
            "--features",
            str(root / "one.dfb1"),
            "--layers",
            "42",
            "--out",
            str(tmp_path / "feat"),
        ]
    )
    assert rc == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# remote mode


@pytest.fixture()
def fake_server(monkeypatch, corpus):
    """Route the CLI's HTTP calls into an in-process test app."""
    import requests
    from fastapi.testclient import TestClient

    from deepfeat.service.app import create_app

    root, _ = corpus
    tc = TestClient(create_app(cache_dir=str(root / "cache")))

    def fake_post(url, json=None, timeout=None):
        assert url.startswith("http://svc/")
        return tc.post(url[len("http://svc") :], json=json)

    monkeypatch.setattr(requests, "post", fake_post)
    return "http://svc"


def test_remote_predict(corpus, tmp_path, fake_server, capsys):
    root, _ = corpus
    png = tmp_path / "remote.png"
    rc = main(
        [
            "predict",
            "--features",
            str(root / "one.dfb1"),
            "--server",
            fake_server,
            "--out-png",
            str(png),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    assert Image.open(png).size == (16, 20)


def test_remote_evaluate_matches_local(corpus, tmp_path, fake_server, capsys):
    root, _ = corpus
    local = tmp_path / "local"
    remote = tmp_path / "remote"
    assert main(_eval_args(root, local)) == 0
    assert main(_eval_args(root, remote) + ["--server", fake_server]) == 0
    capsys.readouterr()
    for path in sorted(local.iterdir()):
        assert (remote / path.name).read_bytes() == path.read_bytes()


def test_remote_data_error_exits_2(tmp_path, fake_server, capsys):
    rc = main(
        [
            "evaluate",
            "--dataset",
            "/nonexistent/ds",
            "--server",
            fake_server,
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert rc == 2
    capsys.readouterr()


def test_remote_model_error_exits_3(monkeypatch, corpus, tmp_path, capsys):
    import requests
    from fastapi.testclient import TestClient

    from deepfeat.service.app import create_app

    root, _ = corpus
    tc = TestClient(create_app())

    def fake_post(url, json=None, timeout=None):
        return tc.post(url[len("http://bare") :], json=json)

    monkeypatch.setattr(requests, "post", fake_post)
    rc = main(
        [
            "evaluate",
            "--dataset",
            str(root / "ds"),
            "--server",
            "http://bare",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert rc == 3
    capsys.readouterr()


def test_remote_unreachable_exits_3(monkeypatch, corpus, tmp_path, capsys):
    import requests

    def fake_post(url, json=None, timeout=None):
        raise requests.ConnectionError("refused")

    monkeypatch.setattr(requests, "post", fake_post)
    root, _ = corpus
    rc = main(
        [
            "predict",
            "--features",
            str(root / "one.dfb1"),
            "--server",
            "http://down",
            "--out-png",
            str(tmp_path / "x.png"),
        ]
    )
    assert rc == 3
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# cache (real model runtime)


def test_cache_then_evaluate_with_model(checkpoint_path, tmp_path, capsys):
    ids = make_dataset(tmp_path / "ds", n=2, size=(24, 30), seed=5)
    cache = tmp_path / "cache"
    base = [
        "--dataset",
        str(tmp_path / "ds"),
        "--model",
        str(checkpoint_path),
        "--working-long-side",
        "64",
    ]
    rc = main(["cache", *base, "--out", str(cache)])
    assert rc == 0
    out1 = capsys.readouterr().out
    assert "2 written" in out1
    assert len(list(cache.glob("*.dfb1"))) == 2

    rc = main(["cache", *base, "--out", str(cache)])
    assert rc == 0
    assert "2 reused" in capsys.readouterr().out

    out = tmp_path / "reports"
    rc = main(
        [
            "evaluate",
            *base,
            "--cache",
            str(cache),
            "--variants",
            "wcb",
            "--borji-splits",
            "8",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    scores = (out / "scores.csv").read_text().splitlines()
    assert len(scores) == 1 + len(ids)
