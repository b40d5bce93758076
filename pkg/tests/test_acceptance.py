"""Acceptance gate: one test per release criterion.

Each test prints a single "criterion NN: PASS/FAIL" line with the
measured quantity next to its threshold, so a bare `pytest -s` run reads
as a checklist.  Thresholds were frozen after calibration and must not
be loosened here.
"""
import itertools
import json
import time

import numpy as np

from vwseg import (adapt, cli, dataio, dictionary, encoder, matcher,
                   metatrain, metrics, synth, tensor as T)


def _line(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} ({detail})")


# ---------------------------------------------------------------- helpers

K8 = dictionary.DictionaryConfig()
K1 = dictionary.DictionaryConfig(k_foreground=1, background_multiplier=1)
OFF = adapt.AdaptConfig(delta=0)
ON = adapt.AdaptConfig(delta=5)


def run_j(params, video, name, dcfg, acf, bbox=False):
    """Mean IoU over annotated frames t>0, averaged over classes."""
    emb0 = encoder.encode(params, video.frames[0], video=name, frame_index=0)
    if bbox:
        dict0 = adapt.init_from_bbox(emb0, video.boxes, dcfg, acf)
        first = None
    else:
        dict0 = dictionary.build_dictionary(emb0, video.masks[0], dcfg)
        first = video.masks[0]
    preds, logbook, _ = adapt.run_video(params, dict0, video.frames, first,
                                        acf, video=name)
    classes = sorted(int(v) for v in np.unique(video.masks[0]) if v > 0)
    js = [np.mean([metrics.iou(preds[t], video.masks[t], c)
                   for t in sorted(video.masks) if t > 0]) for c in classes]
    return float(np.mean(js)), logbook


def part_score(params, video, name, k: int) -> float:
    dcfg = dictionary.DictionaryConfig(k_foreground=k)
    emb0 = encoder.encode(params, video.frames[0], video=name, frame_index=0)
    dict0 = dictionary.build_dictionary(emb0, video.masks[0], dcfg)
    frames = sorted(t for t in video.parts if t in video.masks)
    scores = []
    for c in sorted(int(x) for x in np.unique(video.masks[0]) if x > 0):
        wmaps, pmaps = [], []
        for t in frames:
            emb = emb0 if t == 0 else encoder.encode(params, video.frames[t],
                                                     video=name, frame_index=t)
            wmaps.append(matcher.word_assignment(emb, dict0, class_id=c))
            pmaps.append(np.where(video.masks[t] == c, video.parts[t], 0))
        scores.append(metrics.part_consistency(wmaps, pmaps))
    return float(np.mean(scores))


# --------------------------------------------------------- 1: gradients

def test_01_episode_gradient_fidelity():
    # seed 1 keeps every relu pre-activation and cluster assignment away
    # from its switching point, so central differences measure the same
    # function the tape differentiates
    rng = np.random.default_rng(1)
    f0 = rng.uniform(0.0, 1.0, size=(6, 6, 3))
    f1 = np.clip(f0 + rng.uniform(-0.08, 0.08, size=f0.shape), 0, 1)
    m0 = np.zeros((6, 6), dtype=np.int32)
    m0[1:3, 1:4] = 1
    m1 = np.zeros((6, 6), dtype=np.int32)
    m1[2:4, 2:5] = 1
    ep = metatrain.Episode(video="fx", support_index=0, support_frame=f0,
                           support_mask=m0, queries=[(f1, m1)],
                           query_indices=[1], num_classes=1)
    cfg = metatrain.TrainConfig(k_foreground=2, background_multiplier=1,
                                queries_per_episode=1, seed=1,
                                backprop_through_centroids=True)
    params = encoder.init_params(
        encoder.EncoderConfig(embed_dim=8, conv_layers=2, width=8), seed=1)
    for t in params.tensors():
        t.data = t.data.astype(np.float64)
    start = time.perf_counter()
    err = T.grad_check(lambda *ts: metatrain.episode_loss(params, ep, cfg),
                       params.tensors(), eps=1e-3)
    elapsed = time.perf_counter() - start
    ok = err < 1e-3 and elapsed < 60.0
    _line(1, ok, f"max rel err {err:.2e} < 1e-3, {elapsed:.1f}s < 60s")
    assert ok


# ----------------------------------------------------- 2: normalization

def test_02_posteriors_normalized():
    worst_w = worst_c = 0.0
    for i in range(1000):
        rng = np.random.default_rng(10_000 + i)
        d = int(rng.integers(3, 9))
        c = int(rng.integers(1, 4))
        labels = np.concatenate([np.arange(c + 1),
                                 rng.integers(0, c + 1, size=16 - c - 1)])
        rng.shuffle(labels)
        mask = labels.reshape(4, 4).astype(np.int32)
        support = rng.normal(size=(4, 4, d))
        dcfg = dictionary.DictionaryConfig(
            k_foreground=int(rng.integers(1, 3)),
            background_multiplier=int(rng.integers(1, 3)), seed=i)
        dct = dictionary.build_dictionary(support, mask, dcfg)
        query = rng.normal(size=(3, 3, d))
        wp = matcher.word_posteriors(query, dct).data
        cp, _ = matcher.class_posteriors(query, dct)
        worst_w = max(worst_w, float(np.abs(wp.sum(axis=2) - 1.0).max()))
        worst_c = max(worst_c, float(np.abs(cp.data.sum(axis=2) - 1.0).max()))
    ok = worst_w <= 1e-6 and worst_c <= 1e-6
    _line(2, ok, f"1000 draws, word sum dev {worst_w:.1e}, "
                 f"class sum dev {worst_c:.1e}, tol 1e-6")
    assert ok


# -------------------------------------------------- 3: k-means fidelity

def _two_cluster_oracle(points: np.ndarray) -> float:
    """Exhaustive best 2-partition SSE; point 0 pinned to the first side."""
    n = points.shape[0]
    best = np.inf
    for bits in range(2 ** (n - 1)):
        a = [0] + [i + 1 for i in range(n - 1) if bits >> i & 1]
        b = [i + 1 for i in range(n - 1) if not bits >> i & 1]
        if not b:
            continue
        sse = 0.0
        for side in (a, b):
            pts = points[side]
            mu = pts.mean(axis=0)
            sse += float(((pts - mu) ** 2).sum())
        best = min(best, sse)
    return best


def test_03_kmeans_objective_and_oracle():
    worst_rise = -np.inf
    for i in range(100):
        rng = np.random.default_rng(20_000 + i)
        n = int(rng.integers(5, 41))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, min(6, n + 1)))
        pts = rng.normal(size=(n, d))
        trace: list = []
        dictionary.kmeans(pts, k, seed=i, objective_trace=trace)
        for a, b in itertools.pairwise(trace):
            worst_rise = max(worst_rise, b - a)
        assert all(b <= a + 1e-12 for a, b in itertools.pairwise(trace))

    for i in range(20):
        rng = np.random.default_rng(21_000 + i)
        pts = rng.normal(size=(int(rng.integers(1, 30)), 3))
        _, cents = dictionary.kmeans(pts, 1, seed=i)
        assert np.abs(cents[0] - pts.mean(axis=0)).max() < 1e-6

    equal = 0
    below = 0
    for i in range(200):
        rng = np.random.default_rng(22_000 + i)
        n = int(rng.integers(2, 9))
        pts = rng.normal(size=(n, int(rng.integers(1, 4))))
        oracle = _two_cluster_oracle(pts)
        best = np.inf
        for seed in range(16):
            assign, cents = dictionary.kmeans(pts, 2, seed=seed)
            best = min(best, dictionary.kmeans_objective(pts, assign, cents))
        if best < oracle - 1e-9:
            below += 1
        if abs(best - oracle) <= 1e-7 * max(1.0, oracle):
            equal += 1
    ok = below == 0 and equal >= 190
    _line(3, ok, f"objective rise max {worst_rise:.1e} (<=0), k=1 mean ok, "
                 f"oracle: {below} below, {equal}/200 equal (need >=190)")
    assert ok


# ------------------------------------------------ 4: limit equivalences

def test_04_limit_rules_match_segment():
    agree_proto = agree_nn = 0
    for i in range(100):
        rng = np.random.default_rng(30_000 + i)
        d = int(rng.integers(3, 7))
        labels = np.repeat([0, 1], 8).astype(np.int32)
        rng.shuffle(labels)
        mask = labels.reshape(4, 4)
        support = rng.normal(size=(4, 4, d))
        query = rng.normal(size=(4, 4, d))

        dct = dictionary.build_dictionary(
            support, mask, dictionary.DictionaryConfig(
                k_foreground=1, background_multiplier=1, seed=i))
        got = matcher.segment(query, dct)
        qn = query / np.linalg.norm(query, axis=2, keepdims=True)
        sims = []
        for c in (0, 1):
            proto = support.reshape(-1, d)[mask.ravel() == c].mean(axis=0)
            proto = proto / np.linalg.norm(proto)
            sims.append(qn @ proto)
        want = np.argmax(np.stack(sims, axis=2), axis=2)
        agree_proto += int(np.array_equal(got, want))

        dct = dictionary.build_dictionary(
            support, mask, dictionary.DictionaryConfig(
                k_foreground=8, background_multiplier=1, seed=i))
        got = matcher.segment(query, dct)
        sn = support.reshape(-1, d)
        sn = sn / np.linalg.norm(sn, axis=1, keepdims=True)
        cos = qn.reshape(-1, d) @ sn.T
        want = mask.ravel()[cos.argmax(axis=1)].reshape(4, 4)
        agree_nn += int(np.array_equal(got, want))
    ok = agree_proto == 100 and agree_nn == 100
    _line(4, ok, f"k=1 vs class-mean rule {agree_proto}/100, "
                 f"k=n vs nearest-support-pixel rule {agree_nn}/100")
    assert ok


# -------------------------------------------- 5: dictionary size margin

def test_05_words_beat_single_prototype(bench_checkpoints, bench_data):
    te = bench_data["test"]
    j8s, j1s = [], []
    for params in bench_checkpoints:
        j8s.append(np.mean([run_j(params, v, n, K8, OFF)[0] for n, v in te]))
        j1s.append(np.mean([run_j(params, v, n, K1, OFF)[0] for n, v in te]))
    margin = float(np.mean(j8s) - np.mean(j1s))
    ok = margin >= 0.03
    _line(5, ok, f"J(k=8)={np.mean(j8s):.3f} J(k=1)={np.mean(j1s):.3f} "
                 f"margin {margin:+.3f} >= 0.03 over 5 seeds")
    assert ok


# ------------------------------------------------ 6: adaptation benefit

def test_06_adaptation_helps_under_drift(bench_checkpoints, bench_data):
    dr = bench_data["drift"]
    on, off = [], []
    nondecreasing = True
    for params in bench_checkpoints:
        off.append(np.mean([run_j(params, v, n, K8, OFF)[0] for n, v in dr]))
        js = []
        for n, v in dr:
            j, logbook = run_j(params, v, n, K8, ON)
            js.append(j)
            for rec in logbook.records:
                if rec.words_after < rec.words_before:
                    nondecreasing = False
        on.append(np.mean(js))
    gain = float(np.mean(on) - np.mean(off))
    ok = gain >= 0.02 and nondecreasing
    _line(6, ok, f"J(delta=5)={np.mean(on):.3f} J(off)={np.mean(off):.3f} "
                 f"gain {gain:+.3f} >= 0.02, words non-decreasing: "
                 f"{nondecreasing}")
    assert ok


# ------------------------------------------------------- 7: causality

def test_07_truncated_runs_bitwise_prefixes(bench_checkpoints, bench_data):
    params = bench_checkpoints[0]
    acf = adapt.AdaptConfig(delta=3)
    identical = True
    for name, video in bench_data["test"][:3]:
        emb0 = encoder.encode(params, video.frames[0], video=name, frame_index=0)
        dict0 = dictionary.build_dictionary(emb0, video.masks[0], K8)
        full, _, _ = adapt.run_video(params, dict0, video.frames,
                                     video.masks[0], acf, video=name)
        for m in (4, 8, len(video.frames)):
            part, _, _ = adapt.run_video(params, dict0, video.frames[:m],
                                         video.masks[0], acf, video=name)
            for t in range(m):
                if not np.array_equal(part[t], full[t]):
                    identical = False
    _line(7, identical, "3 videos, prefixes 4/8/12: truncated predictions "
                        "bitwise equal to full run")
    assert identical


# --------------------------------------------------- 8: outlier filter

def test_08_outlier_filter_two_blob_fixture():
    prev = np.zeros((8, 8), dtype=np.int32)
    prev[1:5, 1:5] = 1
    pred = np.zeros((8, 8), dtype=np.int32)
    pred[2:6, 2:6] = 1    # overlaps prev
    pred[6:8, 6:8] = 1    # disjoint from prev
    want = np.zeros((8, 8), dtype=np.int32)
    want[2:6, 2:6] = 1
    got = adapt.remove_outliers(pred, prev)
    ok = np.array_equal(got, want)
    _line(8, ok, "overlapping blob kept, disjoint blob removed, exact")
    assert ok


# --------------------------------------------------- 9: metric oracles

def test_09_metric_hand_fixtures():
    a = np.zeros((8, 8), dtype=np.int32)
    a[2:5, 2:5] = 1
    b = np.zeros((8, 8), dtype=np.int32)
    b[2:5, 3:6] = 1
    ok = metrics.iou(a, b, 1) == 0.5  # inter 6, union 12

    edge_pred = np.zeros((8, 8), dtype=np.int32)
    edge_pred[:, 5:] = 1
    edge_gt = np.zeros((8, 8), dtype=np.int32)
    edge_gt[:, 3:] = 1
    ok = ok and metrics.boundary_f(edge_pred, edge_gt, 1, tolerance=2) == 1.0
    ok = ok and metrics.boundary_f(edge_pred, edge_gt, 1, tolerance=1) == 0.0

    ok = ok and metrics.j_decay([1.0, 1.0, 0.5, 0.5]) == 0.5
    for const in (0.0, 0.37, 1.0):
        for length in (4, 7, 12):
            ok = ok and metrics.j_decay([const] * length) == 0.0
    _line(9, ok, "iou=0.5, edge F 1.0/0.0 at tol 2/1, decay 0.5, "
                 "constant decay exactly 0")
    assert ok


# ------------------------------------------------ 10: box initialization

def test_10_bbox_close_to_mask_init(bench_checkpoints, bench_data):
    te = bench_data["test"]
    gaps = []
    for params in bench_checkpoints:
        jm = np.mean([run_j(params, v, n, K8, OFF)[0] for n, v in te])
        jb = np.mean([run_j(params, v, n, K8, OFF, bbox=True)[0]
                      for n, v in te])
        gaps.append(jm - jb)
    gap = float(np.mean(gaps))
    ok = gap <= 0.10
    _line(10, ok, f"J(mask)-J(bbox) = {gap:+.3f} <= 0.10 over 5 seeds")
    assert ok


# ------------------------------------------------- 11: part granularity

def test_11_coarse_words_track_parts_better(bench_checkpoints, bench_data):
    params = bench_checkpoints[0]
    pr = bench_data["parts"]
    pc2 = float(np.mean([part_score(params, v, n, 2) for n, v in pr]))
    pc8 = float(np.mean([part_score(params, v, n, 8) for n, v in pr]))
    ok = pc2 > pc8 and pc2 > 90.0
    _line(11, ok, f"consistency k=2 {pc2:.1f} > k=8 {pc8:.1f}, and k=2 > 90")
    assert ok


# ----------------------------------------------- 12: end-to-end pipeline

def test_12_pipeline_budget_and_quality(tmp_path):
    start = time.perf_counter()
    synth_cfg = {"resolution": [24, 24], "num_frames": 12, "num_objects": 2,
                 "parts_per_object": 2, "part_radius": 2.0, "velocity": 0.8,
                 "rotation": 0.1, "frame_noise": 0.05, "num_videos": 20,
                 "seed": 100}
    (tmp_path / "tr.json").write_text(json.dumps(synth_cfg))
    (tmp_path / "te.json").write_text(
        json.dumps(dict(synth_cfg, num_videos=5, seed=900)))
    assert cli.main(["synth", "--config", str(tmp_path / "tr.json"),
                     "--out", str(tmp_path / "train")]) == 0
    assert cli.main(["synth", "--config", str(tmp_path / "te.json"),
                     "--out", str(tmp_path / "test")]) == 0
    assert cli.main(["train", "--data", str(tmp_path / "train"),
                     "--episodes", "500", "--seed", "0",
                     "--out", str(tmp_path / "run")]) == 0
    for i in range(5):
        assert cli.main(["infer",
                         "--checkpoint", str(tmp_path / "run" / "checkpoint"),
                         "--video", str(tmp_path / "test" / f"video_{i:03d}"),
                         "--delta", "5",
                         "--out", str(tmp_path / "pred" / f"video_{i:03d}")]) == 0
    assert cli.main(["eval", "--pred", str(tmp_path / "pred"),
                     "--gt", str(tmp_path / "test"),
                     "--out", str(tmp_path / "report")]) == 0
    elapsed = time.perf_counter() - start
    rep = json.loads((tmp_path / "report" / "report.json").read_text())
    j = rep["dataset"]["j_mean"]
    ok = j >= 0.70 and elapsed < 600.0
    _line(12, ok, f"held-out J {j:.3f} >= 0.70, "
                  f"pipeline {elapsed:.0f}s < 600s")
    assert ok


# -------------------------------------------------- 13: reproducibility

def test_13_bitwise_reproducibility(bench_data, tmp_path):
    import shutil
    train_dir = str(bench_data["root"] / "train")
    video_dir = str(bench_data["root"] / "test" / "video_000")
    gt_root = tmp_path / "gt"
    shutil.copytree(video_dir, gt_root / "video_000")
    outs = []
    for tag in ("a", "b"):
        run = tmp_path / f"run_{tag}"
        assert cli.main(["train", "--data", train_dir, "--episodes", "30",
                         "--seed", "7", "--out", str(run)]) == 0
        assert cli.main(["infer", "--checkpoint", str(run / "checkpoint"),
                         "--video", video_dir, "--delta", "5",
                         "--out", str(run / "pred" / "video_000")]) == 0
        assert cli.main(["eval", "--pred", str(run / "pred"),
                         "--gt", str(gt_root),
                         "--out", str(run / "report")]) == 0
        outs.append(run)
    a, b = outs
    same = (a / "checkpoint.vwt").read_bytes() == (b / "checkpoint.vwt").read_bytes()
    same = same and ((a / "checkpoint.json").read_bytes()
                     == (b / "checkpoint.json").read_bytes())
    for mask in sorted((a / "pred" / "video_000").glob("mask_*.pgm")):
        twin = b / "pred" / "video_000" / mask.name
        same = same and mask.read_bytes() == twin.read_bytes()
    for name in ("report.json", "report.csv"):
        same = same and ((a / "report" / name).read_bytes()
                         == (b / "report" / name).read_bytes())
    _line(13, same, "checkpoint, every mask, and both reports bitwise equal "
                    "across identical runs")
    assert same
