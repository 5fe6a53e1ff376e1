"""Acceptance criteria; each test records one PASS/FAIL line (see conftest)."""

import csv
import time
from dataclasses import replace
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from helpers import grad_error, make_window, model_grad_errors, numeric_grad, tiny_spec
from towerseg.checkpoint import checkpoint_from_model, load_checkpoint, save_checkpoint
from towerseg.cli import run
from towerseg.cloud_model import ClassLabel, encode_binary, read_tile, write_tile
from towerseg.inference_pipeline import PipelineConfig, infer_scene
from towerseg.metrics import iou_from_counts
from towerseg.nn_engine import (BatchNorm, BNReLU, Linear, MaxPoolPoints, ReLU, class_balanced_weights,
                                log_softmax, log_softmax_backward, weighted_nll_loss)
from towerseg.pointnet_models import (ArchitectureSpec, TNet, build_model, make_spec,
                                      orthogonality_penalty, parameter_count)
from towerseg.sampling import SamplerConfig, constrained_sample
from towerseg.synthgen import SceneConfig, generate_corpus, generate_scene
from towerseg.training import (TrainConfig, assemble_classification_set, assemble_segmentation_set,
                               train_model)
from towerseg.workflow import evaluate_classifier, evaluate_segmenter, load_split, prepare_corpus

F64 = np.float64


# ---------------------------------------------------------------- 1. gradients


def _layer_error(layer, x, rng):
    r = rng.normal(size=layer.forward(x.copy()).shape)

    def f():
        return float((layer.forward(x.copy()) * r).sum())
    for p in layer.parameters().values():
        p.zero_grad()
    layer.forward(x.copy())
    gx = layer.backward(r.copy())
    errors = [grad_error(numeric_grad(f, x), gx)]
    analytic = [p.grad.copy() for p in layer.parameters().values()]
    errors += [grad_error(numeric_grad(f, p.data), g) for p, g in zip(layer.parameters().values(), analytic)]
    return max(errors)


def test_gradient_correctness(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    plain = {}
    plain["linear"] = _layer_error(Linear(16, 16, rng, F64), rng.normal(size=(2, 16, 16)), rng)
    for cls in (BatchNorm, BNReLU):
        layer = cls(16, F64)
        params = list(layer.parameters().values())
        params[0].data[...] = rng.uniform(0.5, 1.5, 16)
        params[1].data[...] = rng.normal(scale=0.3, size=16)
        plain[cls.__name__] = _layer_error(layer, rng.normal(size=(2, 16, 16)), rng)
    plain["relu"] = _layer_error(ReLU(), rng.normal(size=(2, 16, 16)), rng)
    plain["maxpool"] = _layer_error(MaxPoolPoints(), rng.normal(size=(2, 16, 16)), rng)

    logits = rng.normal(size=(16, 2))
    t = rng.integers(0, 2, 16)
    w = np.array([0.3, 0.7])
    lp = log_softmax(logits)
    _, g = weighted_nll_loss(lp, t, w)
    plain["log_softmax+nll"] = grad_error(
        numeric_grad(lambda: weighted_nll_loss(log_softmax(logits), t, w)[0], logits),
        log_softmax_backward(lp, g))
    a = rng.normal(size=(2, 16, 16))
    plain["orthogonality"] = grad_error(numeric_grad(lambda: orthogonality_penalty(a)[0], a),
                                        orthogonality_penalty(a)[1])

    models = {}
    tnet = TNet(3, (5, 6), (6, 5), rng, F64)
    tnet.out.weight.data += rng.normal(scale=0.1, size=tnet.out.weight.shape)
    x = rng.normal(size=(2, 8, 3))
    r = rng.normal(size=(2, 8, 3))
    tnet.forward(x)
    models["tnet"] = grad_error(numeric_grad(lambda: float((tnet.forward(x)[0] * r).sum()), x), tnet.backward(r))
    for task in ("cls", "seg"):
        model = build_model(tiny_spec(task), seed=2, dtype=F64)
        b, n = (2, 16) if task == "cls" else (2, 8)
        targets = rng.integers(0, 2, size=b if task == "cls" else b * n)
        models[task] = max(model_grad_errors(model, rng.normal(size=(b, n, 7)), targets, w).values())
    elapsed = time.perf_counter() - t0
    worst_plain, worst_model = max(plain.values()), max(models.values())
    criterion("gradient correctness", worst_plain < 1e-6 and worst_model < 1e-4 and elapsed < 60,
              f"plain {worst_plain:.1e}, models {worst_model:.1e}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 2. set-function invariants


def test_set_function_invariants(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    cls = build_model(make_spec("light", "cls"), seed=11).eval()
    seg = build_model(make_spec("light", "seg"), seed=12).eval()
    failures = 0
    for trial in range(100):
        n = int(np.exp(rng.uniform(0, np.log(4096))))
        x = rng.normal(size=(1, n, 7)).astype(np.float32)
        base = cls(x)
        perm = rng.permutation(n)
        dup = np.concatenate([perm, rng.integers(0, n, size=rng.integers(1, n + 1))])
        ok = np.array_equal(cls(x[:, perm]), base) and np.array_equal(cls(x[:, dup]), base)
        if trial % 5 == 0:
            ok &= np.array_equal(seg(x[:, perm]), seg(x)[:, perm])
        failures += not ok
    elapsed = time.perf_counter() - t0
    criterion("set-function invariants", failures == 0 and elapsed < 60,
              f"{failures} failures in 100 trials, {elapsed:.0f}s")


# ---------------------------------------------------------------- 3. class-balanced weights


def _oracle(counts, beta):
    with mpmath.workdps(60):
        b = mpmath.mpf(Fraction(beta).numerator) / Fraction(beta).denominator
        inv = [(1 - b) / (1 - b ** c) if beta else mpmath.mpf(1) for c in counts]
        total = sum(inv)
        return [float(v / total) for v in inv]


def test_class_weights_oracle(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 6))
        counts = [int(c) for c in np.exp(rng.uniform(0, np.log(1e7), k)).astype(np.int64) + 1]
        beta = float(rng.choice([0.0, 0.5, 0.9, 0.99, 0.999, 0.9999, 0.99999, 0.999999]))
        got = class_balanced_weights(counts, beta).weights
        worst = max(worst, float(np.max(np.abs(got - _oracle(counts, beta)))))
    balanced = class_balanced_weights([500, 500], 0.9).weights
    ok = worst < 1e-9 and np.allclose(balanced, [0.5, 0.5], atol=1e-12)
    criterion("class-balanced weights", ok, f"max deviation {worst:.1e}, balanced {balanced.tolist()}")


# ---------------------------------------------------------------- 4. constrained sampling


def test_constrained_sampling(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    bad_size = dropped = nondeterministic = 0
    for i in range(1000):
        n_low, n_mid, n_high = rng.integers(0, 3000), rng.integers(0, 1500), rng.integers(0, 1500)
        if n_low + n_mid + n_high == 0:
            n_low = 1
        z = np.concatenate([rng.uniform(0.01, 2.99, n_low), rng.uniform(3, 7.99, n_mid),
                            rng.uniform(8, 60, n_high)])
        window = make_window(z, seed=i)
        cfg = SamplerConfig(int(rng.integers(256, 3000)), mode="constrained", seed=i)
        out = constrained_sample(window, cfg)
        bad_size += len(out) != cfg.n_target
        high = np.flatnonzero(z >= 3)
        if len(high) <= cfg.n_target:
            dropped += not set(high.tolist()) <= set(out.index.tolist())
        if i % 10 == 0:
            nondeterministic += not np.array_equal(constrained_sample(window, cfg).index, out.index)
    elapsed = time.perf_counter() - t0
    ok = bad_size == dropped == nondeterministic == 0 and elapsed < 60
    criterion("constrained sampling", ok,
              f"size {bad_size}, dropped {dropped}, nondeterministic {nondeterministic}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 5. parameter budget


def test_parameter_budget(criterion):
    full, light = parameter_count(make_spec("full")), parameter_count(make_spec("light"))
    ok = light / full <= 0.30 and 3.0e6 <= full <= 4.0e6
    criterion("parameter budget", ok, f"full {full:,}, light {light:,}, ratio {light / full:.3f}")


# ---------------------------------------------------------------- 6. end-to-end run


def _report(path):
    rows = list(csv.reader(open(path)))
    tower = next(r for r in rows if r and r[0] == "tower")
    keys, values = rows[-2:]
    out = {k: float(v) for k, v in zip(keys, values)}
    out["iou_tower"] = float(tower[-1])
    return out


@pytest.mark.slow
def test_end_to_end_desk_scale(criterion, tmp_path):
    d = tmp_path
    corpus, windows, models, pred = d / "corpus", d / "windows", d / "models", d / "pred"
    steps = [
        ["synth", "--out", corpus, "--scenes", 30, "--prevalence", 0.05, "--test-fraction", 0.2, "--seed", 0],
        ["prep", "--corpus", corpus, "--out", windows],
        ["train-cls", "--windows", windows, "--out", models, "--n-points", 1024, "--epochs", 10],
        ["train-seg", "--windows", windows, "--out", models, "--n-points", 1024, "--epochs", 20],
        ["infer", "--corpus", corpus, "--cls", models / "cls.ckpt", "--seg", models / "seg.ckpt",
         "--out", pred, "--n-points-cls", 1024],
        ["eval", "--pred", pred, "--truth", corpus, "--report", d / "report.csv"],
    ]
    t0 = time.perf_counter()
    for step in steps:
        assert run([str(a) for a in step]) == 0, step[0]
    minutes = (time.perf_counter() - t0) / 60
    m = _report(d / "report.csv")
    ok = m["f1"] >= 0.90 and m["iou_tower"] >= 0.60 and m["miou"] >= 0.75 and minutes <= 30
    criterion("end-to-end desk-scale run", ok,
              f"F1 {m['f1']:.3f}, tower IoU {m['iou_tower']:.3f}, mIoU {m['miou']:.3f}, {minutes:.1f} min")


# ---------------------------------------------------------------- 7. ablation ordering


@pytest.mark.slow
def test_ablation_ordering(criterion, tmp_path):
    cfg = SceneConfig(extent=(200.0, 200.0))
    generate_corpus(cfg, 12, seed=0, out_dir=tmp_path / "corpus", prevalence=0.1,
                    test_fraction=0.25, val_fraction=0.2)
    prepare_corpus(tmp_path / "corpus", tmp_path / "windows")
    train, val, test = (load_split(tmp_path / "windows", s) for s in ("train", "val", "test"))
    test_blocks = {w.source_block_id for w in test}

    def fit(dataset_fn, task, cfg):
        return train_model(dataset_fn(train, cfg), dataset_fn(val, cfg, augment=False), task, cfg,
                           test_blocks=test_blocks)[0]

    iou = {"constrained": [], "random": [], "no colour": []}
    f1 = {0.9: [], 0.999: [], 0.9999: []}
    for seed in (0, 1, 2):
        # the segmenter labels every window point at inference, so it trains on
        # a sample size close to the window size; the classifier always sees samples
        seg = TrainConfig(epochs=20, n_points=1024, seed=seed)
        for name, c in (("constrained", seg), ("random", replace(seg, sampler_mode="random")),
                        ("no colour", replace(seg, use_color_nir=False))):
            counts = evaluate_segmenter(fit(assemble_segmentation_set, "seg", c), test)
            iou[name].append(float(iou_from_counts(counts).per_class[0]))
        for beta in f1:
            c = TrainConfig(epochs=10, n_points=256, seed=seed, beta=beta)
            f1[beta].append(evaluate_classifier(fit(assemble_classification_set, "cls", c), test, 256, seed).f1)

    def majority(a, b, strict=True):
        return sum((x > y) if strict else (x >= y) for x, y in zip(a, b)) >= 2

    sampling = majority(iou["constrained"], iou["random"])
    colour = majority(iou["constrained"], iou["no colour"])
    beta = majority(f1[0.999], f1[0.9], strict=False) and majority(f1[0.999], f1[0.9999], strict=False)
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)
    criterion("ablation ordering", sampling and colour and beta,
              f"tower IoU constrained {fmt(iou['constrained'])} random {fmt(iou['random'])} "
              f"no colour {fmt(iou['no colour'])}; F1 beta .9 {fmt(f1[0.9])} .999 {fmt(f1[0.999])} "
              f".9999 {fmt(f1[0.9999])}")


# ---------------------------------------------------------------- 8. pipeline conservation


def _forced_ckpt(task, bias=None):
    spec = ArchitectureSpec(variant="custom", task=task, stage_a=(8, 8), stage_b=(8, 16, 32),
                            head=(16, 8) if task == "cls" else (16, 8, 8), tnet_head=(16, 8),
                            dropout_rate=0.0)
    model = build_model(spec, seed=3)
    if bias is not None:
        model.final.weight.data[...] = 0
        model.final.bias.data[...] = bias
    return checkpoint_from_model(model, {"task": task})


def test_pipeline_conservation(criterion):
    scene = generate_scene(SceneConfig(extent=(160.0, 160.0), tower_count=2, seed=8))
    seg = _forced_ckpt("seg")

    def infer(cls_ckpt, threshold=0.5, **kw):
        cfg = PipelineConfig(cls_ckpt, seg, cls_threshold=threshold, n_points_cls=256, seed=5, **kw)
        return infer_scene(scene.cloud, scene.ground, cfg)

    everything = infer(_forced_ckpt("cls"), threshold=0.0)
    labelled = (len(everything.cloud) == len(scene.cloud)
                and np.isin(everything.cloud.labels, [int(c) for c in ClassLabel]).all()
                and np.array_equal(everything.cloud.data, scene.cloud.data))
    skipped = infer(_forced_ckpt("cls", bias=[9.0, -9.0]))  # background everywhere
    skip_ok = skipped.segmented_windows == 0 and not np.any(skipped.cloud.labels == ClassLabel.TOWER)
    a, b = infer(_forced_ckpt("cls"), 0.4), infer(_forced_ckpt("cls"), 0.4)
    repro = encode_binary(a.cloud) == encode_binary(b.cloud) and a.decisions_csv() == b.decisions_csv()
    criterion("pipeline conservation", labelled and skip_ok and repro,
              f"labelled {labelled}, skip path {skip_ok}, reproducible {repro}")


# ---------------------------------------------------------------- 9. format round trips


def test_format_round_trips(criterion, tmp_path):
    cloud = generate_scene(SceneConfig(extent=(80.0, 80.0), tower_count=1, seed=9)).cloud
    write_tile(cloud, tmp_path / "a.pct")
    write_tile(read_tile(tmp_path / "a.pct"), tmp_path / "b.pct")
    tile_ok = (tmp_path / "a.pct").read_bytes() == (tmp_path / "b.pct").read_bytes()
    model = build_model(make_spec("light", "seg"), seed=4)
    model.train()
    model(np.random.default_rng(0).normal(size=(2, 64, 7)).astype(np.float32))
    save_checkpoint(checkpoint_from_model(model, {"task": "seg"}), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    criterion("format round trips", tile_ok and ckpt_ok, f"PCT1 {tile_ok}, checkpoint {ckpt_ok}")
