"""Acceptance criteria, one test each. Run with -v; the terminal summary
prints a PASS/FAIL line per criterion."""
import time

import numpy as np

from predfilter.cli import main
from predfilter.filtering import (
    INFINITE,
    FilterConfig,
    SoftFilterConfig,
    allowed_set_from_classifier,
    argmax_predict,
    filtered_predict,
    oracle_filter_predict,
    soft_filter_predict,
)
from predfilter.metrics import ConfusionMatrix, average_precision, iou_from_confusion, mnet
from predfilter.synth import ScenarioConfig, generate_image, generate_scenario, perfect_classifier_scores
from predfilter.tensor_io import decode_label_map, decode_logits, read_label_map, read_logits, write_label_map, write_logits

from conftest import random_instance, seed42_config
from test_metrics import brute_confusion, brute_iou, brute_mnet
from test_synth import SEED42_BASELINE, SEED42_FILTER, SEED42_ORACLE, dirs_identical


def seed42():
    cfg = seed42_config()
    return cfg, [generate_image(cfg, i) for i in range(cfg.num_images)]


def miou(images, predict):
    cm = ConfusionMatrix(images[0]["logits"].shape[0])
    for im in images:
        cm.update(im["gt"], predict(im))
    return iou_from_confusion(cm).miou


def hard(tau):
    def predict(im):
        k = im["logits"].shape[0]
        return filtered_predict(im["logits"], allowed_set_from_classifier(im["scores"], FilterConfig(tau=tau), k))
    return predict


def test_01_noop_guarantee(acceptance):
    t0 = time.perf_counter()
    cfg = ScenarioConfig(seed=1001, num_images=100, num_classes=8, image_size=(48, 48),
                         confusion_pairs=[(1, 2, 0.5), (5, 6, 0.5)], classifier_quality=0.7)
    changed = 0
    for i in range(cfg.num_images):
        im = generate_image(cfg, i)
        if hard(-1e9)(im).tobytes() != argmax_predict(im["logits"]).tobytes():
            changed += 1
    dt = time.perf_counter() - t0
    acceptance("1 no-op at tau=-1e9", changed == 0 and dt < 5.0, f"images changed={changed} time={dt:.2f}s")


def test_02_oracle_accuracy_monotone(acceptance, rng):
    t0 = time.perf_counter()
    worse = 0
    for _ in range(200):
        logits, gt = random_instance(rng, k=int(rng.integers(2, 8)), h=16, w=16)
        valid = gt != 255
        before = int(((argmax_predict(logits) == gt) & valid).sum())
        after = int(((oracle_filter_predict(logits, gt) == gt) & valid).sum())
        worse += after < before
    dt = time.perf_counter() - t0
    acceptance("2 oracle pixel accuracy never drops", worse == 0 and dt < 5.0, f"violations={worse} time={dt:.2f}s")


def test_03_perfect_classifier_is_oracle(acceptance):
    t0 = time.perf_counter()
    cfg, images = seed42()
    mismatched = 0
    for im in images:
        scores = perfect_classifier_scores(im["presence"], cfg.num_classes - 1, 10.0)
        pred = filtered_predict(im["logits"], allowed_set_from_classifier(scores, FilterConfig(tau=0.0), cfg.num_classes))
        mismatched += pred.tobytes() != oracle_filter_predict(im["logits"], im["gt"]).tobytes()
    dt = time.perf_counter() - t0
    acceptance("3 perfect classifier equals oracle", mismatched == 0 and dt < 5.0,
               f"mismatched={mismatched}/{len(images)} time={dt:.2f}s")


def test_04_soft_limit_is_hard(acceptance):
    t0 = time.perf_counter()
    _, images = seed42()
    tau = -1.0
    soft_cfg = SoftFilterConfig(temperature=INFINITE, shift=tau)
    ties = sum(int((im["scores"] == tau).sum()) for im in images)
    mismatched = sum(
        soft_filter_predict(im["logits"], im["scores"], soft_cfg).tobytes() != hard(tau)(im).tobytes()
        for im in images
    )
    dt = time.perf_counter() - t0
    acceptance("4 soft T=inf equals hard filter", ties == 0 and mismatched == 0 and dt < 5.0,
               f"mismatched={mismatched} scores_at_theta={ties} time={dt:.2f}s")


def test_05_metric_oracles(acceptance, rng):
    t0 = time.perf_counter()
    k = 4
    cm = ConfusionMatrix(k)
    brute_total = np.zeros((k, k), np.int64)
    triples = []
    per_image_ok = True
    for _ in range(200):
        _, gt = random_instance(rng, k=k)
        pred = rng.integers(0, k, (8, 8)).astype(np.uint8)
        pseudo = rng.integers(0, k, (8, 8)).astype(np.uint8)
        pseudo[rng.random((8, 8)) < 0.1] = 255
        triples.append((gt, pred, pseudo))
        single = ConfusionMatrix(k)
        single.update(gt, pred)
        rep = iou_from_confusion(single, allow_empty=True)
        for got, want in zip(rep.iou, brute_iou(gt, pred, k)):
            per_image_ok &= (got is None) == (want is None) and (want is None or abs(got - want) <= 1e-12)
        cm.update(gt, pred)
        brute_total += brute_confusion(gt, pred, k)
    counts_ok = np.array_equal(cm.counts, brute_total)
    diag = np.diag(brute_total)
    brute = diag / (brute_total.sum(0) + brute_total.sum(1) - diag)
    rep = iou_from_confusion(cm)
    iou_ok = all(abs(a - b) <= 1e-12 for a, b in zip(rep.iou, brute)) and abs(rep.miou - brute.mean()) <= 1e-12
    net = mnet(triples, k)
    correct, wrong = brute_mnet(triples, k)
    mnet_ok = net.correct_area.tolist() == correct and net.incorrect_area.tolist() == wrong and all(
        abs(net.net[c] - (correct[c] - wrong[c]) / (correct[c] + wrong[c])) <= 1e-12 for c in range(k)
    )
    dt = time.perf_counter() - t0
    ok = counts_ok and per_image_ok and iou_ok and mnet_ok and dt < 10.0
    acceptance("5 metrics match brute force", ok,
               f"confusion={counts_ok} iou={per_image_ok and iou_ok} mnet={mnet_ok} time={dt:.2f}s")


def test_06_headline_direction(acceptance):
    t0 = time.perf_counter()
    _, images = seed42()
    base = miou(images, lambda im: argmax_predict(im["logits"]))
    filt = miou(images, hard(-1.0))
    orc = miou(images, lambda im: oracle_filter_predict(im["logits"], im["gt"]))
    dt = time.perf_counter() - t0
    pinned = abs(base - SEED42_BASELINE) <= 1e-12 and abs(filt - SEED42_FILTER) <= 1e-12 and abs(orc - SEED42_ORACLE) <= 1e-12
    gain = 100 * (filt - base)
    ok = gain >= 3.0 and orc >= filt and pinned and dt < 30.0
    acceptance("6 filter gain >= 3 points, oracle >= filter", ok,
               f"baseline={100 * base:.2f} filter={100 * filt:.2f} oracle={100 * orc:.2f} "
               f"gain={gain:.2f} pinned={pinned} time={dt:.2f}s")


def test_07_threshold_plateau(acceptance):
    t0 = time.perf_counter()
    _, images = seed42()
    taus = [-3.5 + 0.25 * i for i in range(13)]
    curve = [100 * miou(images, hard(t)) for t in taus]
    spread = max(curve) - min(curve)
    dt = time.perf_counter() - t0
    acceptance("7 plateau over tau in [-3.5,-0.5]", spread <= 2.0 and dt < 60.0,
               f"spread={spread:.3f} points time={dt:.2f}s")


def test_08_mnet_hand_cases(acceptance):
    pred = np.array([[1, 0, 0]], np.uint8)
    pseudo = np.array([[1, 1, 1]], np.uint8)
    cancel = mnet([(np.array([[1, 1, 0]], np.uint8), pred, pseudo)], 2).net[1]
    full = mnet([(np.array([[1, 1, 1]], np.uint8), pred, pseudo)], 2).net[1]
    acceptance("8 mNet hand cases", cancel == 0.0 and full == 1.0, f"cancellation={cancel} fully_correct={full}")


def test_09_ap_fixtures(acceptance):
    ap = average_precision([0.9, 0.8, 0.2], [1, 0, 1])
    perfect = average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    acceptance("9 AP fixtures", abs(ap - 5 / 6) <= 1e-12 and perfect == 1.0, f"ap={ap!r} perfect={perfect!r}")


def test_10_determinism(acceptance, tmp_path):
    t0 = time.perf_counter()
    cfg = seed42_config()
    generate_scenario(cfg, tmp_path / "a", workers=1)
    generate_scenario(cfg, tmp_path / "b", workers=8)
    data_ok = dirs_identical(tmp_path / "a", tmp_path / "b")
    manifest = tmp_path / "a" / "manifest.json"
    pred = tmp_path / "pred"
    rc = [main(["predict", str(manifest), "--mode", "filter", "--tau=-1", "--out-dir", str(pred)])]
    outs = {}
    for w in ("1", "8"):
        out = tmp_path / f"w{w}"
        rc.append(main(["eval", str(manifest), str(pred), "--out-dir", str(out), "--workers", w,
                        "--by-class-count", "--size-brackets"]))
        rc.append(main(["mnet", str(manifest), str(pred), "--out-dir", str(out), "--workers", w]))
        rc.append(main(["report", str(manifest), "--out-dir", str(out / "report"), "--workers", w, "--no-figures"]))
        outs[w] = out
    reports_ok = rc == [0] * 7 and dirs_identical(outs["1"], outs["8"])
    dt = time.perf_counter() - t0
    acceptance("10 deterministic across workers and reruns", data_ok and reports_ok and dt < 30.0,
               f"datasets_identical={data_ok} reports_identical={reports_ok} time={dt:.2f}s")


def test_11_io_roundtrips(acceptance, rng, tmp_path):
    bad = 0
    for i in range(100):
        k, h, w = (int(v) for v in rng.integers(1, 12, 3))
        vol = (rng.standard_normal((k, h, w)) * 10 ** rng.uniform(-30, 30)).astype(np.float32)
        write_logits(vol, tmp_path / "x.sflt")
        back = read_logits(tmp_path / "x.sflt")
        bad += back.tobytes() != vol.tobytes() or back.shape != vol.shape
        bad += decode_logits((tmp_path / "x.sflt").read_bytes()).tobytes() != vol.tobytes()
        labels = rng.integers(0, 256, (h, w)).astype(np.uint8)
        write_label_map(labels, tmp_path / "x.pgm")
        got = read_label_map(tmp_path / "x.pgm")
        bad += got.tobytes() != labels.tobytes() or got.shape != labels.shape
        bad += decode_label_map((tmp_path / "x.pgm").read_bytes()).tobytes() != labels.tobytes()
    acceptance("11 SFLT and PGM round-trips", bad == 0, f"mismatches={bad}/400")
