import csv
import io
import json

import numpy as np
import pytest

from uflmatch.cli import main
from uflmatch.dictionary import save_dictionary
from uflmatch.formats import read_flow, save_image, save_labels
from uflmatch.synth import texture


@pytest.fixture(scope="module")
def dict_path(tmp_path_factory, small_dict):
    path = tmp_path_factory.mktemp("dict") / "d.txt"
    save_dictionary(small_dict, path)
    return path


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    r = np.random.default_rng(5)
    for i in range(2):
        save_image(d / f"im{i}.pgm", texture((40, 40), r))
    return d


def report(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


class TestLearnDict:
    def test_random_tiny(self, tmp_path, capsys):
        d = tmp_path / "one"
        d.mkdir()
        save_image(d / "a.pgm", texture((16, 16), np.random.default_rng(0)))
        out = tmp_path / "dict.txt"
        assert main(["learn-dict", str(d), "--dict-size", "4", "--patches", "10",
                     "--method", "random", "--out", str(out)]) == 0
        assert report(capsys.readouterr().out)["patches"] == "10"
        assert out.read_text().startswith("UFLDICT 1 4 121 random")

    def test_kmeans_deterministic(self, tmp_path, image_dir):
        outs = []
        for name in ("a.txt", "b.txt"):
            out = tmp_path / name
            assert main(["learn-dict", str(image_dir), "--dict-size", "8", "--patches", "500",
                         "--pixel-patch", "5", "--seed", "3", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_ksvd(self, tmp_path, image_dir):
        out = tmp_path / "k.txt"
        assert main(["learn-dict", str(image_dir), "--dict-size", "6", "--patches", "200",
                     "--pixel-patch", "5", "--method", "ksvd", "--sparsity", "2",
                     "--iters", "2", "--out", str(out)]) == 0

    def test_too_few_patches(self, tmp_path, image_dir, capsys):
        out = tmp_path / "x.txt"
        assert main(["learn-dict", str(image_dir), "--dict-size", "20", "--patches", "5",
                     "--out", str(out)]) == 1
        assert capsys.readouterr().err.startswith("error:")
        assert not out.exists()

    def test_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["learn-dict", str(tmp_path / "empty"), "--out", str(tmp_path / "d")]) == 1


class TestMatch:
    def test_identity(self, tmp_path, dict_path, capsys):
        img = tmp_path / "img.pgm"
        save_image(img, texture((42, 42), np.random.default_rng(1)))
        out = tmp_path / "flows"
        assert main(["match", str(img), str(img), "--dict", str(dict_path), "--pixel",
                     "--out", str(out), "--report", str(tmp_path / "r.txt")]) == 0
        rep = report(capsys.readouterr().out)
        assert abs(float(rep["energy"])) <= 1e-9
        assert (tmp_path / "r.txt").read_text() == "".join(f"{k}={v}\n" for k, v in rep.items())
        for name in ("patch_flow.uflf", "pixel_flow.uflf"):
            u, v, _ = read_flow(out / name)
            assert not u.any() and not v.any()

    def test_shift_mode(self, tmp_path, dict_path, capsys):
        pair_dir = tmp_path / "pair"
        assert main(["synth", "shift", "--size", "70,70", "--shift", "7,0",
                     "--seed", "2", "--out", str(pair_dir)]) == 0
        assert main(["match", str(pair_dir / "test.pgm"), str(pair_dir / "exemplar.pgm"),
                     "--dict", str(dict_path), "--out", str(tmp_path / "f")]) == 0
        u, v, gran = read_flow(tmp_path / "f" / "patch_flow.uflf")
        assert gran == "patch"
        values, counts = np.unique(np.stack([u.ravel(), v.ravel()], 1), axis=0,
                                   return_counts=True)
        assert tuple(values[np.argmax(counts)]) == (1, 0)

    def test_missing_dict(self, tmp_path, capsys):
        img = tmp_path / "img.pgm"
        save_image(img, np.zeros((20, 20)))
        assert main(["match", str(img), str(img), "--dict", str(tmp_path / "none"),
                     "--out", str(tmp_path)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_patch_width_mismatch(self, tmp_path, dict_path):
        img = tmp_path / "img.pgm"
        save_image(img, np.zeros((30, 30)))
        assert main(["match", str(img), str(img), "--dict", str(dict_path),
                     "--pixel-patch", "7", "--out", str(tmp_path)]) == 1


def write_identity_manifest(tmp_path, count):
    r = np.random.default_rng(9)
    pairs = []
    for i in range(count):
        img, lab = tmp_path / f"i{i}.pgm", tmp_path / f"l{i}.pgm"
        save_image(img, texture((35, 35), r))
        labels = np.ones((35, 35), dtype=int)
        labels[:, 20:] = 2
        save_labels(lab, labels)
        pairs.append({"name": f"p{i}", "test": img.name, "exemplar": img.name,
                      "test_labels": lab.name, "exemplar_labels": lab.name,
                      "test_box": [3, 4, 20, 15], "exemplar_box": [3, 4, 20, 15]})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"pairs": pairs}))
    return path


class TestEval:
    def test_identity_pair(self, tmp_path, dict_path, capsys):
        manifest = write_identity_manifest(tmp_path, 1)
        assert main(["eval", str(manifest), "--dict", str(dict_path), "--pixel"]) == 0
        captured = capsys.readouterr()
        rows = list(csv.DictReader(io.StringIO(captured.out)))
        assert len(rows) == 1
        assert float(rows[0]["lt_acc"]) == 1.0
        assert float(rows[0]["iou"]) == 1.0
        assert float(rows[0]["loc_err"]) == 0.0
        assert "lt_acc=1.0" in captured.err

    def test_five_pairs_in_order(self, tmp_path, dict_path, monkeypatch):
        monkeypatch.setenv("UFL_THREADS", "2")
        manifest = write_identity_manifest(tmp_path, 5)
        out = tmp_path / "table.csv"
        assert main(["eval", str(manifest), "--dict", str(dict_path), "--out", str(out)]) == 0
        with open(out) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert header == ["pair", "lt_acc", "iou", "loc_err", "ms_patch", "ms_pixel"]
        assert [r[0] for r in rows] == [f"p{i}" for i in range(5)]

    def test_empty_manifest(self, tmp_path, dict_path):
        path = tmp_path / "m.json"
        path.write_text("[]")
        assert main(["eval", str(path), "--dict", str(dict_path)]) == 1

    def test_missing_file(self, tmp_path, dict_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps([{"test": "nope.pgm", "exemplar": "nope.pgm"}]))
        assert main(["eval", str(path), "--dict", str(dict_path)]) == 1


class TestTransferAndSynth:
    def test_synth_then_transfer(self, tmp_path, capsys):
        out = tmp_path / "s"
        assert main(["synth", "shift", "--size", "64", "--shift", "3,0", "--out", str(out)]) == 0
        u, v, gran = read_flow(out / "gt_flow.uflf")
        assert gran == "pixel" and np.all(u == 3) and np.all(v == 0)
        capsys.readouterr()
        assert main(["transfer", str(out / "gt_flow.uflf"), str(out / "exemplar_labels.pgm"),
                     "--truth", str(out / "test_labels.pgm"), "--image", str(out / "exemplar.pgm"),
                     "--out", str(tmp_path / "t.pgm")]) == 0
        rep = report(capsys.readouterr().out)
        # the rightmost 3 columns map outside the exemplar
        assert float(rep["lt_acc"]) == pytest.approx(61 / 64)
        assert (tmp_path / "t_warped.pgm").exists()

    def test_synth_exemplar_is_shifted_test(self, tmp_path):
        from uflmatch.preprocess import load_image

        out = tmp_path / "s"
        assert main(["synth", "shift", "--size", "64,64", "--shift", "3,0", "--out", str(out)]) == 0
        test, ex = load_image(out / "test.pgm"), load_image(out / "exemplar.pgm")
        np.testing.assert_array_equal(ex[:, 3:], test[:, :-3])

    def test_synth_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "noise", "--size", "20,16", "--seed", "4",
                         "--out", str(tmp_path / name)]) == 0
        for f in ("test.pgm", "exemplar.pgm", "test_labels.pgm", "gt_flow.uflf"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unknown_kind(self, tmp_path):
        assert main(["synth", "spiral", "--out", str(tmp_path / "x")]) == 1

    def test_transfer_rejects_patch_flow(self, tmp_path, dict_path):
        from uflmatch.formats import write_flow

        write_flow(tmp_path / "p.uflf", np.zeros((2, 2), int), np.zeros((2, 2), int), "patch")
        save_labels(tmp_path / "l.pgm", np.zeros((2, 2), int))
        assert main(["transfer", str(tmp_path / "p.uflf"), str(tmp_path / "l.pgm"),
                     "--out", str(tmp_path / "o.pgm")]) == 1

    def test_corrupt_flow_exit(self, tmp_path):
        (tmp_path / "bad.uflf").write_bytes(b"UFLF\x01")
        save_labels(tmp_path / "l.pgm", np.zeros((2, 2), int))
        assert main(["transfer", str(tmp_path / "bad.uflf"), str(tmp_path / "l.pgm"),
                     "--out", str(tmp_path / "o.pgm")]) == 1
