import json
import sys
import textwrap

import numpy as np
import pytest

from dcin.cli import main
from dcin.cqg_loss import LossWeights, cqg_loss, one_hot
from dcin.imageio import read_rgb, write_label_mask, write_png, write_prob_mask
from dcin.reference_index import load_index

from oracles import brute_force_medoid, hard_dice
from synthetic import color_cast, corpus, layout_embedding, scene


@pytest.fixture
def corpus_dir(tmp_path):
    rng = np.random.default_rng(0)
    root = tmp_path / "corpus"
    lines = []
    for name, (img, _) in corpus(rng, 3).items():
        write_png(root / name, img)
        lines.append(json.dumps({"id": name, "vector": layout_embedding(img).tolist()}))
    emb = tmp_path / "corpus_emb.jsonl"
    emb.write_text("\n".join(lines) + "\n")
    return root, emb


@pytest.fixture
def test_set(tmp_path):
    rng = np.random.default_rng(1)
    inputs, gt = tmp_path / "in", tmp_path / "gt"
    lines = []
    for i in range(5):
        img, mask = scene(rng)
        img = color_cast(img)
        write_png(inputs / f"t{i}.png", img)
        write_label_mask(gt / f"t{i}.png", mask)
        lines.append(json.dumps({"id": f"t{i}.png", "vector": layout_embedding(img).tolist()}))
    emb = tmp_path / "test_emb.jsonl"
    emb.write_text("\n".join(lines) + "\n")
    return inputs, gt, emb


@pytest.fixture
def index_file(tmp_path, corpus_dir):
    root, emb = corpus_dir
    out = tmp_path / "index.json"
    assert main(["index", "build", str(root), "--embeddings", str(emb), "--out", str(out)]) == 0
    return out


def test_index_build(tmp_path, corpus_dir, capsys):
    root, emb = corpus_dir
    out = tmp_path / "index.json"
    assert main(["index", "build", str(root), "--embeddings", str(emb), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    idx = load_index(out)
    expected = brute_force_medoid({e.id: e.histogram for e in idx.entries})
    assert "entries: 3" in text and f"global_reference_id: {expected}" in text
    assert "embedding_matched: 3" in text
    again = tmp_path / "again.json"
    assert main(["index", "build", str(root), "--embeddings", str(emb), "--out", str(again), "--jobs", "2"]) == 0
    assert out.read_bytes() == again.read_bytes()


def test_index_build_bad_bins(tmp_path, corpus_dir):
    with pytest.raises(SystemExit) as exc:
        main(["index", "build", str(corpus_dir[0]), "--bins", "7", "--out", str(tmp_path / "i.json")])
    assert exc.value.code == 2


def test_index_build_bad_embedding_line(tmp_path, corpus_dir, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "src000.png", "vector": [1, 0]}\nnot json\n')
    assert main(["index", "build", str(corpus_dir[0]), "--embeddings", str(bad), "--out", str(tmp_path / "i.json")]) == 2
    assert "bad.jsonl:2" in capsys.readouterr().err


def test_index_build_unreadable_image(tmp_path, corpus_dir, capsys):
    (corpus_dir[0] / "broken.png").write_bytes(b"not a png")
    assert main(["index", "build", str(corpus_dir[0]), "--out", str(tmp_path / "i.json")]) == 2
    assert "broken.png" in capsys.readouterr().err


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["loss", "--gt", "a", "--pred1", "b", "--pred2", "c", "--bogus"])


def test_normalize_fixed_identity(tmp_path, test_set):
    inputs, _, _ = test_set
    ref = inputs / "t0.png"
    out = tmp_path / "out"
    assert main(["normalize", "--strategy", "fixed", "--reference", str(ref), "--input", str(inputs), "--out", str(out)]) == 0
    diff = read_rgb(out / "t0.png").astype(int) - read_rgb(ref)
    assert np.abs(diff).max() <= 1


def test_normalize_ensemble_outputs(tmp_path, test_set, index_file):
    inputs, _, emb = test_set
    out = tmp_path / "out"
    rc = main(["normalize", "--index", str(index_file), "--strategy", "ensemble", "--embeddings", str(emb),
               "--input", str(inputs), "--out", str(out)])
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 10
    assert names[:2] == ["t0.global.png", "t0.local.png"]


def test_normalize_global_deterministic(tmp_path, test_set, index_file):
    inputs = test_set[0]
    for d in ("a", "b"):
        assert main(["normalize", "--index", str(index_file), "--strategy", "global",
                     "--input", str(inputs), "--out", str(tmp_path / d)]) == 0
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_normalize_counts_failures(tmp_path, test_set, index_file, capsys):
    inputs, _, emb = test_set
    partial = tmp_path / "partial.jsonl"
    partial.write_text("\n".join(emb.read_text().splitlines()[:3]) + "\n")
    rc = main(["normalize", "--index", str(index_file), "--strategy", "local", "--embeddings", str(partial),
               "--input", str(inputs), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "failed: 2" in capsys.readouterr().out


def test_normalize_local_needs_embeddings(tmp_path, test_set, index_file):
    rc = main(["normalize", "--index", str(index_file), "--strategy", "local",
               "--input", str(test_set[0]), "--out", str(tmp_path / "o")])
    assert rc == 2


def _oracle_masks(tmp_path, gt_dir):
    d = tmp_path / "masks"
    from dcin.imageio import read_label_mask

    for p in gt_dir.iterdir():
        write_prob_mask(d / f"{p.stem}.dcm", one_hot(read_label_mask(p), 2))
    return d


def test_predict_eval_identity_oracle(tmp_path, test_set, index_file):
    inputs, gt, emb = test_set
    masks = _oracle_masks(tmp_path, gt)
    report = tmp_path / "report.json"
    rc = main(["predict-eval", "--index", str(index_file), "--strategy", "ensemble", "--embeddings", str(emb),
               "--predictor-masks", str(masks), "--input", str(inputs), "--gt", str(gt), "--report", str(report)])
    assert rc == 0
    doc = json.loads(report.read_text())
    assert doc["mean_dice"] == 100.0 and len(doc["per_image"]) == 5


def _background_script(tmp_path):
    path = tmp_path / "bg.py"
    path.write_text(textwrap.dedent(
        """
        import sys
        import numpy as np
        from PIL import Image
        from dcin.imageio import write_prob_mask
        h, w = np.asarray(Image.open(sys.argv[1])).shape[:2]
        probs = np.zeros((h, w, 2))
        probs[..., 0] = 1
        write_prob_mask(sys.argv[2], probs)
        """
    ))
    return f"{sys.executable} {path}"


def test_predict_eval_constant_background(tmp_path, index_file):
    inputs, gt = tmp_path / "in2", tmp_path / "gt2"
    img = np.full((4, 4, 3), 100, np.uint8)
    m1 = np.zeros((4, 4), int)
    m1[:2] = 1  # half foreground
    m2 = np.zeros((4, 4), int)
    m2[0, 0] = 1
    for name, m in (("a", m1), ("b", m2)):
        write_png(inputs / f"{name}.png", img)
        write_label_mask(gt / f"{name}.png", m)
    report = tmp_path / "r.json"
    rc = main(["predict-eval", "--index", str(index_file), "--strategy", "global", "--predictor",
               _background_script(tmp_path), "--classes", "2", "--input", str(inputs), "--gt", str(gt),
               "--report", str(report)])
    assert rc == 0
    # a: background dice 2*8/(16+8)=66.67, fg 0 -> 33.33; b: 2*15/(16+15)=96.77, fg 0 -> 48.39
    bg = np.zeros((4, 4), int)
    expected = (hard_dice(bg, m1) + hard_dice(bg, m2)) / 2
    assert expected == pytest.approx((100 / 3 + 100 * 15 / 31) / 2)
    doc = json.loads(report.read_text())
    assert doc["mean_dice"] == pytest.approx(expected, abs=1e-12)
    first = report.read_bytes()
    assert main(["predict-eval", "--index", str(index_file), "--strategy", "global", "--predictor",
                 _background_script(tmp_path), "--input", str(inputs), "--gt", str(gt), "--report", str(report)]) == 0
    assert report.read_bytes() == first


def test_predict_eval_missing_gt(tmp_path, test_set, index_file):
    inputs, gt, _ = test_set
    (gt / "t3.png").unlink()
    rc = main(["predict-eval", "--index", str(index_file), "--strategy", "global", "--predictor-masks",
               str(tmp_path), "--input", str(inputs), "--gt", str(gt), "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_predict_eval_records_predictor_failures(tmp_path, test_set, index_file):
    inputs, gt, _ = test_set
    script = tmp_path / "fail.py"
    script.write_text("import sys; sys.exit(1)")
    report = tmp_path / "r.json"
    rc = main(["predict-eval", "--index", str(index_file), "--strategy", "global", "--predictor",
               f"{sys.executable} {script}", "--input", str(inputs), "--gt", str(gt), "--report", str(report)])
    assert rc == 1
    doc = json.loads(report.read_text())
    assert len(doc["failures"]) == 5 and doc["mean_dice"] is None


def test_augment(tmp_path):
    from dcin.augmentation import GeometricParams, apply_geometric
    from dcin.imageio import read_label_mask

    img, mask = scene(np.random.default_rng(4))
    write_png(tmp_path / "img.png", img)
    write_label_mask(tmp_path / "mask.png", mask)
    args = ["augment", "--image", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.png"), "--seed", "11"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("x1.png", "x2.png", "y.png", "params.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    record = json.loads((tmp_path / "a" / "params.json").read_text())
    g = GeometricParams.from_dict(record["geometric"])
    x1, y = apply_geometric(img, mask, g)
    assert np.array_equal(read_rgb(tmp_path / "a" / "x1.png"), x1)
    assert np.array_equal(read_label_mask(tmp_path / "a" / "y.png"), y)

    cfg = tmp_path / "off.json"
    cfg.write_text(json.dumps({k: {"p": 0} for k in record["geometric"] if k in ("hflip", "shift", "scale", "rotate", "shear", "elastic")}
                              | {k: {"p": 0} for k in ("blur", "sharpen", "gaussian_noise", "brightness_contrast", "rgb_shift")}))
    assert main(args + ["--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    assert np.array_equal(read_rgb(tmp_path / "c" / "x1.png"), img)
    assert np.array_equal(read_rgb(tmp_path / "c" / "x2.png"), img)


def test_augment_dimension_mismatch(tmp_path):
    write_png(tmp_path / "img.png", np.zeros((4, 4, 3), np.uint8))
    write_label_mask(tmp_path / "mask.png", np.zeros((4, 5), int))
    assert main(["augment", "--image", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.png"),
                 "--seed", "1", "--out", str(tmp_path / "o")]) == 2


def _loss_inputs(tmp_path, seed=0):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, (5, 6))
    p1 = rng.dirichlet(np.ones(3), (5, 6)).astype(np.float32)
    p2 = rng.dirichlet(np.ones(3), (5, 6)).astype(np.float32)
    write_label_mask(tmp_path / "gt.png", gt)
    write_prob_mask(tmp_path / "p1.dcm", p1)
    write_prob_mask(tmp_path / "p2.dcm", p2)
    return gt, p1.astype(np.float64), p2.astype(np.float64)


def _parse(out):
    return {k: float(v) for k, v in (line.split(": ") for line in out.strip().splitlines())}


def test_loss_matches_library(tmp_path, capsys):
    gt, p1, p2 = _loss_inputs(tmp_path)
    base = ["loss", "--gt", str(tmp_path / "gt.png"), "--pred1", str(tmp_path / "p1.dcm")]
    assert main(base + ["--pred2", str(tmp_path / "p2.dcm"), "--lambdas", "0.5,0.25,2"]) == 0
    got = _parse(capsys.readouterr().out)
    ref = cqg_loss(p1, p2, gt, LossWeights(0.5, 0.25, 2))
    for name in ("dice1", "ce1", "dice2", "ce2", "mse", "total"):
        assert got[name] == pytest.approx(getattr(ref, name), rel=1e-11)
    assert main(base + ["--pred2", str(tmp_path / "p1.dcm")]) == 0
    assert _parse(capsys.readouterr().out)["mse"] == 0


def test_loss_perfect(tmp_path, capsys):
    gt = np.random.default_rng(3).integers(0, 5, (4, 4))
    write_label_mask(tmp_path / "gt.png", gt)
    write_prob_mask(tmp_path / "p.dcm", one_hot(gt, 5))
    assert main(["loss", "--gt", str(tmp_path / "gt.png"), "--pred1", str(tmp_path / "p.dcm"),
                 "--pred2", str(tmp_path / "p.dcm")]) == 0
    assert _parse(capsys.readouterr().out)["total"] <= 1e-5


def test_loss_malformed_mask(tmp_path, capsys):
    _loss_inputs(tmp_path)
    data = (tmp_path / "p2.dcm").read_bytes()
    (tmp_path / "p2.dcm").write_bytes(data[:-7])
    rc = main(["loss", "--gt", str(tmp_path / "gt.png"), "--pred1", str(tmp_path / "p1.dcm"),
               "--pred2", str(tmp_path / "p2.dcm")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "p2.dcm" in err and "offset" in err


def test_loss_bad_lambdas(tmp_path):
    with pytest.raises(SystemExit):
        main(["loss", "--gt", "a", "--pred1", "b", "--pred2", "c", "--lambdas", "1,2"])


def test_jobs_from_environment(tmp_path, corpus_dir, monkeypatch):
    root, emb = corpus_dir
    monkeypatch.setenv("DCIN_JOBS", "3")
    out = tmp_path / "env.json"
    assert main(["index", "build", str(root), "--embeddings", str(emb), "--out", str(out)]) == 0
    monkeypatch.setenv("DCIN_JOBS", "1")
    serial = tmp_path / "serial.json"
    assert main(["index", "build", str(root), "--embeddings", str(emb), "--out", str(serial)]) == 0
    assert out.read_bytes() == serial.read_bytes()
