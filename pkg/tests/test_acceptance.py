"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``criterion N [PASS|FAIL]`` line; the lines are
repeated in the terminal summary.
"""

import io
import math
import time

import numpy as np
import pytest

from conftest import record_criterion
from drfuzzy import tensor as T
from drfuzzy.dataset import DatasetIndex, LabeledSample, largest_remainder, stratified_split
from drfuzzy.evaluation import render_report, report_from_values
from drfuzzy.explain import grad_cam, mass_fraction_in_boxes, membership_report, upsample
from drfuzzy.imaging import FundusImage, clahe, decode_ppm, encode_ppm, mixup, preprocess
from drfuzzy.model import (
    BackboneConfig,
    FuzzyAttentionNet,
    ModelConfig,
    channel_attention,
    fuzzy_head,
    load_checkpoint,
    save_checkpoint,
    se_gate,
    spatial_attention,
)
from drfuzzy.tensor import Tensor
from drfuzzy.training import LossConfig, TrainHistory, evaluate_loss, focal_loss, one_hot, smooth_labels
from drfuzzy.verify import MODEL_TOLERANCE, OP_TOLERANCE, gradient_suite, metric_suite
from drfuzzy.workflow import run_training, to_arrays


def test_criterion_01_gradient_oracles():
    start = time.perf_counter()
    results = gradient_suite(seed=0, trials=3)
    elapsed = time.perf_counter() - start
    ops = [r for r in results if r.name != "full_model_focal_loss"]
    full = next(r for r in results if r.name == "full_model_focal_loss")
    worst_op = max(ops, key=lambda r: r.error)
    ok = all(r.error < OP_TOLERANCE for r in ops) and full.error < MODEL_TOLERANCE and elapsed < 120
    record_criterion(1, "gradient oracle suite", ok,
                     f"{len(ops)} ops, worst {worst_op.name} {worst_op.error:.2e} (< {OP_TOLERANCE:g}); "
                     f"full model {full.error:.2e} (< {MODEL_TOLERANCE:g}); {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_02_formula_collapse():
    rng = np.random.default_rng(2)
    checks = {}

    # focal(gamma=0, alpha=1, eps=0) vs plain cross-entropy computed in numpy
    logits = rng.normal(size=(32, 5)) * 3
    labels = rng.integers(0, 5, size=32)
    y = one_hot(labels, 5)
    lt = Tensor(logits)
    loss = focal_loss(T.softmax(lt), y, LossConfig(alpha=None, gamma=0.0, epsilon=0.0), log_probs=T.log_softmax(lt)).item()
    shifted = logits - logits.max(axis=1, keepdims=True)
    ce = float(np.mean(np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(32), labels]))
    checks["focal==CE"] = abs(loss - ce) < 1e-9

    x_i, x_j = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    y_i, y_j = one_hot([1], 3)[0], one_hot([2], 3)[0]
    mx, my = mixup(x_i, y_i, x_j, y_j, 1.0)
    checks["mixup(1)==id"] = np.array_equal(mx, x_i) and np.array_equal(my, y_i)

    soft = rng.dirichlet(np.ones(4), size=10)
    checks["smooth(0)==id"] = np.array_equal(smooth_labels(soft, 0.0), soft)

    f = Tensor(rng.normal(size=(2, 8, 5, 5)))
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    gates = [
        se_gate(T.relu(f), z(8, 2), z(2), z(2, 8), z(8)).data,
        channel_attention(f, z(8, 8), z(8), z(8, 8)).data,
        spatial_attention(f, z(1, 2, 7, 7), z(1)).data,
    ]
    model = FuzzyAttentionNet(ModelConfig(BackboneConfig.tiny(8), n_classes=3), zero_gates=True)
    with T.no_grad():
        out = model.forward(rng.uniform(size=(2, 3, 8, 8)))
    gates += [out.cache["channel_gate"].data, out.cache["spatial_gate"].data]
    checks["gates==0.5"] = all(np.all(g == 0.5) for g in gates)

    ok = all(checks.values())
    record_criterion(2, "formula-collapse identities", ok,
                     ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()) +
                     f" (|focal-CE|={abs(loss - ce):.1e})")
    assert ok


def test_criterion_03_fuzzy_head():
    rng = np.random.default_rng(3)
    d, k = 6, 5
    centroids = Tensor(rng.uniform(-0.5, 0.5, size=(k, d)))
    sigma = Tensor(rng.uniform(0.2, 2.0, size=k))
    x = Tensor(rng.normal(size=(1000, d)) * 3)
    _, probs, _ = fuzzy_head(x, centroids, sigma)
    sum_err = float(np.abs(probs.data.sum(axis=1) - 1).max())

    equal = Tensor(np.ones(k))
    hits = []
    for j in range(k):
        mu, p, _ = fuzzy_head(Tensor(centroids.data[j:j + 1]), centroids, equal)
        hits.append(mu[0, j] == 1.0 and int(p.data.argmax()) == j)

    far = Tensor(np.full((4, d), 1e6 / math.sqrt(d)) * np.array([[1], [-1], [0.5], [2]]))
    mu_far, p_far, logits_far = fuzzy_head(far, centroids, sigma)
    finite = bool(np.all(np.isfinite(p_far.data)) and np.all(np.isfinite(logits_far.data)) and np.all(np.isfinite(mu_far)))
    finite = finite and bool(np.allclose(p_far.data.sum(axis=1), 1.0, atol=1e-6))

    ok = sum_err < 1e-6 and all(hits) and finite
    record_criterion(3, "fuzzy head", ok,
                     f"max |sum p - 1| = {sum_err:.1e} over 1000 vectors; mu_k(c_k)=1 and argmax k for {sum(hits)}/{k}; "
                     f"distances ~1e6 finite={finite}")
    assert ok


def test_criterion_04_table1_arithmetic():
    names = ("No DR", "Mild/Moderate DR", "Severe/Proliferative DR")
    report = report_from_values(names, precision=[0.98, 0.82, 0.81], recall=[0.99, 0.91, 0.58],
                                f1=[0.99, 0.87, 0.67], support=[199, 117, 50])
    text = render_report(report)
    rows = {line[:25].strip(): line[25:].split() for line in text.splitlines()[2:] if line.strip()}
    macro, weighted = rows["Macro Avg"][:3], rows["Weighted Avg"][:3]
    ok = (macro == ["0.87", "0.83", "0.84"] and weighted == ["0.91", "0.91", "0.91"]
          and rows["Accuracy"][2] == "0.91" and rows["Accuracy"][3] == "366")
    record_criterion(4, "Table I aggregate rows", ok,
                     f"macro {tuple(macro)} expected (0.87, 0.83, 0.84); weighted {tuple(weighted)} expected (0.91, 0.91, 0.91)")
    assert ok


def test_criterion_05_metric_oracles():
    counts, auc = metric_suite(seed=5, instances=150)
    ok = counts.error == 0 and auc.error < 1e-9
    record_criterion(5, "metric oracles", ok,
                     f"150 instances; count/PRF mismatch {counts.error:g} (exact); AUC deviation {auc.error:.1e} (< 1e-9)")
    assert ok


@pytest.mark.slow
def test_criterion_06_toy_training(toy_run, tmp_path):
    cfg, outcome, out_dir, elapsed = toy_run
    history = outcome.result.history
    index = outcome.index
    train_set = to_arrays(index.subset("train"), cfg.preprocess)
    val_set = to_arrays(index.subset("val"), cfg.preprocess)
    model = outcome.result.model
    _, train_acc = evaluate_loss(model, *train_set, outcome.result.loss_config)
    _, val_acc = evaluate_loss(model, *val_set, outcome.result.loss_config)

    rerun = run_training(cfg, tmp_path / "rerun")
    same_history = (out_dir / "history.csv").read_bytes() == (tmp_path / "rerun" / "history.csv").read_bytes()
    same_ckpt = (out_dir / "final.ckpt").read_bytes() == (tmp_path / "rerun" / "final.ckpt").read_bytes()

    ok = (len(index) == 600 and len(history) == 30 and train_acc >= 0.95 and val_acc >= 0.90
          and elapsed < 600 and same_history and same_ckpt and rerun.manifest == outcome.manifest)
    record_criterion(6, "toy end-to-end training", ok,
                     f"{len(index)} images, {len(history)} epochs in {elapsed:.0f}s (< 600s); "
                     f"train acc {train_acc:.3f} (>= 0.95), val acc {val_acc:.3f} (>= 0.90); "
                     f"rerun history identical={same_history}, checkpoint identical={same_ckpt}")
    assert ok


@pytest.mark.slow
def test_criterion_07_gradcam_localization(toy_run):
    cfg, outcome, _, _ = toy_run
    model = outcome.result.model
    index = outcome.index
    size = cfg.preprocess.size
    dilation = 0.25 * size
    inside = total = 0.0
    per_image = []
    contributing = 0
    nonneg = True
    for s in index.subset("test"):
        if not s.lesion_boxes:
            continue
        img = preprocess(s.load(), cfg.preprocess)
        x = img.to_float(np.float32).pixels.transpose(2, 0, 1)
        pred = membership_report(model, x).predicted
        if pred != index.merge_map(s.grade):
            continue
        hm = grad_cam(model, x, pred)
        nonneg = nonneg and bool(np.all(hm.values >= 0))
        up = upsample(hm, size, size)
        frac = mass_fraction_in_boxes(hm, size, size, s.lesion_boxes, dilation)
        per_image.append(frac)
        inside += frac * up.sum()
        total += up.sum()
        contributing += up.sum() > 0
    pooled = inside / total if total > 0 else 0.0
    ok = len(per_image) >= 20 and contributing >= 20 and pooled >= 0.60 and nonneg
    record_criterion(7, "Grad-CAM localization", ok,
                     f"{len(per_image)} correctly classified lesion images ({contributing} with non-zero maps); "
                     f"pooled mass in dilated boxes {pooled:.3f} (>= 0.60); per-image mean {np.mean(per_image):.3f}; "
                     f"non-negative={nonneg}")
    assert ok


def _scalar_global_he(rgb: np.ndarray) -> np.ndarray:
    """Plain-loop global histogram equalization of Rec. 601 luminance,
    chroma scaled by the luminance ratio."""
    h, w, _ = rgb.shape
    lum = [[0.299 * float(rgb[i, j, 0]) + 0.587 * float(rgb[i, j, 1]) + 0.114 * float(rgb[i, j, 2])
            for j in range(w)] for i in range(h)]
    # bins round the luminance half-up, evaluated exactly in thousandths
    level = [[(299 * int(rgb[i, j, 0]) + 587 * int(rgb[i, j, 1]) + 114 * int(rgb[i, j, 2]) + 500) // 1000
              for j in range(w)] for i in range(h)]
    hist = [0] * 256
    for row in level:
        for v in row:
            hist[v] += 1
    cdf, run = [], 0
    for c in hist:
        run += c
        cdf.append(run)
    n = h * w
    out = np.zeros_like(rgb)
    for i in range(h):
        for j in range(w):
            y = lum[i][j]
            target = 255.0 * cdf[level[i][j]] / n
            for c in range(3):
                v = float(rgb[i, j, c]) * target / y if y > 0 else target
                out[i, j, c] = min(255, max(0, math.floor(v + 0.5)))
    return out


def test_criterion_08_clahe_degenerate():
    rng = np.random.default_rng(8)
    worst = 0
    for k in range(10):
        h, w = rng.integers(12, 40, size=2)
        if k % 2:
            gray = rng.integers(0, 256, size=(h, w, 1))
            px = np.repeat(gray, 3, axis=2).astype(np.uint8)
        else:
            px = rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)
        out = clahe(FundusImage(px), tiles=(1, 1), clip_limit=math.inf).pixels
        ref = _scalar_global_he(px)
        worst = max(worst, int(np.abs(out.astype(int) - ref.astype(int)).max()))
    ok = worst <= 1
    record_criterion(8, "CLAHE 1x1 unclipped == global HE", ok, f"max deviation {worst} level(s) over 10 images (<= 1)")
    assert ok


def test_criterion_09_stratified_split():
    rng = np.random.default_rng(9)
    worst = 0.0
    reproducible = True
    for _ in range(50):
        sizes = rng.integers(3, 300, size=5)
        samples = [LabeledSample(f"g{g}_{i}", g) for g in range(5) for i in range(sizes[g])]
        index = DatasetIndex(samples)
        seed = int(rng.integers(0, 1000))
        split = stratified_split(index, (0.70, 0.15, 0.15), seed=seed)
        for g in range(5):
            tags = [s.split for s in split if s.grade == g]
            for name, frac in zip(("train", "val", "test"), (0.70, 0.15, 0.15)):
                worst = max(worst, abs(tags.count(name) - frac * sizes[g]))
        reproducible &= split.manifest_csv() == stratified_split(index, (0.70, 0.15, 0.15), seed=seed).manifest_csv()
    ok = worst <= 1.0 and reproducible
    record_criterion(9, "stratified 70/15/15 split", ok,
                     f"max per-class deviation {worst:.2f} samples over 50 random size vectors (<= 1); "
                     f"manifests reproducible={reproducible}")
    assert ok
    assert largest_remainder(366, (0.70, 0.15, 0.15)) == [256, 55, 55]


def test_criterion_10_serialization(tmp_path):
    rng = np.random.default_rng(10)
    model = FuzzyAttentionNet(ModelConfig(n_classes=5), seed=3)
    for p in model.params.values():
        p.data[...] = rng.normal(size=p.shape).astype(np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"note": "roundtrip"})
    loaded, meta = load_checkpoint(path)
    params_equal = all(
        np.array_equal(a.data.view(np.uint32), b.data.view(np.uint32))
        for a, b in zip(model.params.values(), loaded.params.values())
    ) and list(model.params) == list(loaded.params)
    ppm_equal = True
    for _ in range(10):
        px = rng.integers(0, 256, size=(int(rng.integers(1, 50)), int(rng.integers(1, 50)), 3)).astype(np.uint8)
        back = decode_ppm(encode_ppm(FundusImage(px))).pixels
        ppm_equal &= back.dtype == np.uint8 and np.array_equal(back, px)
    ok = params_equal and ppm_equal and meta == {"note": "roundtrip"}
    record_criterion(10, "serialization round trips", ok,
                     f"checkpoint parameters bitwise equal={params_equal}; PPM pixels bitwise equal={ppm_equal}")
    assert ok


def test_history_csv_roundtrip_is_exact(toy_run):
    """The history file parses back to the same floats it was written from."""
    _, outcome, out_dir, _ = toy_run
    parsed = TrainHistory.from_csv((out_dir / "history.csv").read_text())
    assert parsed.to_csv() == outcome.result.history.to_csv()
    assert io.StringIO(parsed.to_csv()).readline().strip() == "epoch,train_loss,val_loss,train_acc,val_acc,lr"
