"""Shipping gate: one check per release criterion, each printing a verdict.

The heavyweight checks share a single session-scoped benchmark pass (three
root seeds, three organs, three distilled students), so the whole file is
expensive but runs the full method end to end exactly once.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from segfuse.adaptation import (
    compute_prototypes,
    consistency_loss,
    infomax_loss,
    prototypes_from_maps,
    pseudo_label_loss,
    refine_pseudo_labels,
    shannon_entropy,
)
from segfuse.autodiff import Tensor, add, finite_diff_check, no_grad, scale, softmax
from segfuse.benchmark import run_benchmark
from segfuse.cli import main as cli_main
from segfuse.ensemble import (
    CertaintyMap,
    TeacherPool,
    _teacher_outputs,
    aggregate_labels,
    build_selection_map,
    certainty_from_probs,
    feature_agg_loss,
    init_projections,
    label_agg_loss,
    preselect_teachers,
)
from segfuse.metrics import average_surface_distance, dice_score, extract_boundary
from segfuse.network import SegNetConfig, attach_fresh_aux, init_network

ROOT_SEEDS = (1, 2, 3)


def report(capsys, ok: bool, label: str, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{label}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{label}: {detail}"


# -- 1/9 gradient suite -------------------------------------------------------


def _adaptation_case(seed: int):
    rng = np.random.default_rng(1000 + seed)
    image = rng.random((1, 1, 16, 16))
    base = init_network(SegNetConfig(num_classes=2, aux_decoders=0), seed=2000 + seed)
    net = attach_fresh_aux(base, 2, seed=3000 + seed)
    drop_seed = 4000 + seed
    with no_grad():
        main0, _, taps0 = net.forward_with_aux(image, drop_seed)
    protos = compute_prototypes(net, image)
    refined = refine_pseudo_labels(main0.data, taps0.decision.data, protos, 0.4)
    reference = main0.data.copy()
    return net, image, drop_seed, refined, reference


def _distillation_case(seed: int):
    rng = np.random.default_rng(5000 + seed)
    images = rng.random((2, 1, 16, 16))
    teachers = [
        init_network(SegNetConfig(num_classes=2, aux_decoders=0), seed=6000 + seed, class_binding=(0, 1)),
        init_network(SegNetConfig(num_classes=2, aux_decoders=0), seed=7000 + seed, class_binding=(0, 2)),
    ]
    pool = TeacherPool(teachers)
    probs, hard, lows, highs = _teacher_outputs(pool, images)
    certainty = certainty_from_probs(pool, probs, hard)
    selection = build_selection_map(pool, certainty, hard, "certainty_norm")
    labels = aggregate_labels(pool, selection, hard, "certainty_norm")
    student = init_network(
        SegNetConfig(num_classes=3, aux_decoders=0), seed=8000 + seed, class_binding=(0, 1, 2)
    )
    projections = init_projections(pool, student, 8, 9000 + seed)
    teacher_feats = [{"low": lows[i], "high": highs[i]} for i in range(len(pool))]
    return student, images, labels, selection, teacher_feats, projections


def test_gradient_suite(capsys):
    started = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(10):
        net, image, drop_seed, refined, reference = _adaptation_case(seed)

        def fwd():
            return net.forward_with_aux(image, drop_seed)

        def consistency_case():
            main, aux, _ = fwd()
            return consistency_loss(main, aux, reference)

        def adaptation_objective():
            main, aux, _ = fwd()
            total = add(pseudo_label_loss(main, refined), scale(consistency_loss(main, aux, reference), 0.1))
            return add(total, infomax_loss(main, 0.1))

        cases = {
            "refinement": (lambda: pseudo_label_loss(fwd()[0], refined), net.parameters()),
            "consistency": (consistency_case, net.parameters()),
            "infomax": (lambda: infomax_loss(fwd()[0], 0.1), net.parameters()),
            "adaptation objective": (adaptation_objective, net.parameters()),
        }

        student, images, labels, selection, teacher_feats, projections = _distillation_case(seed)
        fusion_params = student.parameters() + list(projections.values())

        def label_fusion():
            logits, _ = student.forward(images)
            return label_agg_loss(softmax(logits, axis=-3), labels)

        def feature_fusion():
            _, staps = student.forward(images)
            return feature_agg_loss(
                {"low": staps.low, "high": staps.high},
                teacher_feats,
                selection.masks,
                projections,
                images.shape[-2:],
            )

        def distillation_objective():
            logits, staps = student.forward(images)
            label = label_agg_loss(softmax(logits, axis=-3), labels)
            feature = feature_agg_loss(
                {"low": staps.low, "high": staps.high},
                teacher_feats,
                selection.masks,
                projections,
                images.shape[-2:],
            )
            return add(label, scale(feature, 0.001))

        cases["label fusion"] = (label_fusion, student.parameters())
        cases["feature fusion"] = (feature_fusion, fusion_params)
        cases["distillation objective"] = (distillation_objective, fusion_params)

        for name, (fn, params) in cases.items():
            err = finite_diff_check(fn, params, samples=12, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)

    elapsed = time.perf_counter() - started
    ok = all(e < 1e-3 for e in worst.values()) and elapsed < 120
    summary = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    report(capsys, ok, "1/9 gradients", f"max rel err {summary}; {elapsed:.0f}s (< 120s)")


# -- 2/9 selection oracle -----------------------------------------------------


def _eligibility_oracle(class_sets, preds):
    """Direct set construction, independent of the library implementation."""
    everyone = set(range(len(class_sets)))
    if all(p == 0 for p in preds):
        return tuple(sorted(everyone))
    union_fg = set().union(*class_sets)
    ignorance = {c: {i for i, ks in enumerate(class_sets) if c not in ks} for c in union_fg}
    silent = {c for c in union_fg if all(preds[i] == 0 for i in ignorance[c])}
    removed = set().union(*(ignorance[c] for c in silent)) if silent else set()
    return tuple(sorted(everyone - removed))


class _FixedTeacher:
    def __init__(self, fg):
        self.foreground_classes = tuple(fg)
        self.class_binding = (0,) + tuple(fg)


def test_selection_matches_set_oracle(capsys):
    mismatches = 0
    checked = 0
    for bindings in [((1,), (2,)), ((1,), (2,), (3,)), ((2,), (3,), (1,))]:
        pool = TeacherPool([_FixedTeacher(fg) for fg in bindings])
        choice_space = [(0,) + fg for fg in bindings]
        configs = list(itertools.product(*choice_space))
        hard = np.array(configs, dtype=np.int64).T.reshape(len(bindings), 1, 1, len(configs))
        flat = np.zeros(hard.shape, dtype=np.float64)
        certainty = CertaintyMap(raw=flat, normalized=flat, class_stats={})
        selection = build_selection_map(pool, certainty, hard, "certainty_norm")
        for px, preds in enumerate(configs):
            checked += 1
            expected = _eligibility_oracle([set(fg) for fg in bindings], preds)
            if preselect_teachers(pool, preds) != expected:
                mismatches += 1
            got_grid = tuple(np.flatnonzero(selection.eligible[:, 0, 0, px]))
            if got_grid != expected:
                mismatches += 1
            if selection.selected[0, 0, px] != expected[0]:
                mismatches += 1
    ok = mismatches == 0
    report(capsys, ok, "2/9 selection oracle", f"{checked} configurations, {mismatches} mismatches")


# -- 3/9 certainty normalization ----------------------------------------------


def test_certainty_normalization_property(capsys):
    rng = np.random.default_rng(42)
    pool = TeacherPool([_FixedTeacher((1,)), _FixedTeacher((2,)), _FixedTeacher((3,))])
    probs = []
    hard = []
    for i, t in enumerate(pool.teachers):
        p = rng.dirichlet((0.5, 0.5), size=(4, 9, 9)).transpose(0, 3, 1, 2)
        probs.append(p)
        choices = np.array((0,) + t.foreground_classes)
        hard.append(choices[rng.integers(0, 2, size=(4, 9, 9))])
    # one image with constant probabilities: its groups sit below the spread
    # floor and must normalize to exactly zero
    probs[0][0, 0] = 0.7
    probs[0][0, 1] = 0.3
    hard = np.stack(hard)
    cert = certainty_from_probs(pool, probs, hard)

    bad = 0
    groups = 0
    for (ti, n, cls), (mu, sigma, count) in cert.class_stats.items():
        sel = hard[ti, n] == cls
        values = cert.normalized[ti, n][sel]
        groups += 1
        if count >= 2 and sigma > 1e-6:
            if abs(values.mean()) > 1e-6 or abs(values.std() - 1.0) > 1e-6:
                bad += 1
        elif not np.all(values == 0.0):
            bad += 1
    ok = groups > 0 and bad == 0
    report(capsys, ok, "3/9 normalization", f"{groups} (teacher, image, class) groups, {bad} violations")


# -- shared benchmark pass ----------------------------------------------------


@pytest.fixture(scope="session")
def benchmark_runs():
    specs = {
        "pair_norm": ("certainty_norm", ("liver", "spleen")),
        "pair_avg": ("average", ("liver", "spleen")),
        "trio_norm": ("certainty_norm", ("liver", "spleen", "kidney")),
    }
    return {
        root: run_benchmark(root, organs=("liver", "spleen", "kidney"), student_specs=specs)
        for root in ROOT_SEEDS
    }


def test_adaptation_recovers_target_performance(benchmark_runs, capsys):
    gains = {}
    for organ in ("liver", "spleen"):
        gains[organ] = 100 * float(
            np.mean([benchmark_runs[r].teachers[organ].gain for r in ROOT_SEEDS])
        )
    seconds = sum(
        benchmark_runs[r].teachers[o].seconds for r in ROOT_SEEDS for o in ("liver", "spleen")
    ) + sum(benchmark_runs[r].dataset_seconds for r in ROOT_SEEDS)
    ok = all(g >= 3.0 for g in gains.values()) and seconds < 1800
    detail = ", ".join(f"{o} {g:+.1f} pts" for o, g in gains.items())
    report(capsys, ok, "4/9 adaptation trend", f"mean gain {detail} (needs >= +3.0); {seconds / 60:.1f} min (< 30)")


def test_student_tracks_teachers_and_strategy_order(benchmark_runs, capsys):
    margins = {}
    for organ in ("liver", "spleen"):
        student = np.mean([benchmark_runs[r].students["pair_norm"].dice[organ] for r in ROOT_SEEDS])
        teacher = np.mean([benchmark_runs[r].teachers[organ].adapted_dice for r in ROOT_SEEDS])
        margins[organ] = 100 * float(student - teacher)
    norm_wins = sum(
        benchmark_runs[r].students["pair_norm"].mean_dice
        >= benchmark_runs[r].students["pair_avg"].mean_dice
        for r in ROOT_SEEDS
    )
    ok = all(m >= -2.0 for m in margins.values()) and norm_wins >= 2
    detail = ", ".join(f"{o} {m:+.1f} pts vs teacher" for o, m in margins.items())
    report(
        capsys,
        ok,
        "5/9 distillation trend",
        f"{detail} (floor -2.0); certainty beats averaging on {norm_wins}/3 seeds (needs 2)",
    )


# -- 6/9 refinement efficacy --------------------------------------------------


def test_refinement_fixes_uncertain_band(capsys):
    size = 24
    yy, xx = np.mgrid[0:size, 0:size]
    truth = (((yy - 12) ** 2 + (xx - 12) ** 2) <= 49).astype(np.int64)

    # confident and correct everywhere, then confidence knocked down and the
    # argmax flipped on a horizontal band crossing the object boundary
    p_fg = np.where(truth == 1, 0.95, 0.05)
    band = (yy >= 10) & (yy <= 13)
    p_fg = np.where(band & (truth == 1), 0.45, p_fg)
    p_fg = np.where(band & (truth == 0), 0.55, p_fg)
    probs = np.stack([1.0 - p_fg, p_fg])[None]

    rng = np.random.default_rng(7)
    features = np.stack(
        [
            (truth == 0) + 0.05 * rng.standard_normal((size, size)),
            (truth == 1) + 0.05 * rng.standard_normal((size, size)),
        ]
    )[None].astype(np.float64)

    threshold = 0.4
    protos = prototypes_from_maps(probs, features)
    refined = refine_pseudo_labels(probs, features, protos, threshold)
    raw = probs.argmax(axis=1)
    uncertain = shannon_entropy(probs, axis=1) > threshold

    acc_raw = float((raw == truth).mean())
    acc_ref = float((refined.labels == truth).mean())
    band_raw = float((raw == truth)[uncertain].mean())
    band_ref = float((refined.labels == truth)[uncertain].mean())
    ok = acc_ref >= acc_raw and band_ref > band_raw and bool(uncertain.any())
    report(
        capsys,
        ok,
        "6/9 refinement",
        f"overall {acc_raw:.3f} -> {acc_ref:.3f}; uncertain band {band_raw:.3f} -> {band_ref:.3f}",
    )


# -- 7/9 metrics oracle -------------------------------------------------------


def _oracle_dice(p, t):
    ps = {tuple(v) for v in np.argwhere(p)}
    ts = {tuple(v) for v in np.argwhere(t)}
    if not ps and not ts:
        return 1.0
    return 2.0 * len(ps & ts) / (len(ps) + len(ts))


def _oracle_boundary(mask):
    pts = set()
    h, w = mask.shape
    for y, x in np.argwhere(mask):
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                pts.add((y, x))
                break
    return pts


def _oracle_asd(p, t, penalty):
    bp, bt = _oracle_boundary(p), _oracle_boundary(t)
    if not bp and not bt:
        return 0.0
    if not bp or not bt:
        return penalty

    def mean_min(a, b):
        return sum(min(math.dist(u, v) for v in b) for u in a) / len(a)

    return (mean_min(bp, bt) + mean_min(bt, bp)) / 2.0


def test_metrics_match_pixel_set_oracle(capsys):
    empty = np.zeros((12, 12), bool)
    full = np.ones((12, 12), bool)
    square = np.zeros((12, 12), bool)
    square[3:6, 3:6] = True
    dot = np.zeros((12, 12), bool)
    dot[2, 2] = True
    lshape = np.zeros((12, 12), bool)
    lshape[5:10, 4] = True
    lshape[9, 4:9] = True
    suite = [empty, full, square, dot, lshape]

    penalty = math.hypot(12, 12)
    dice_exact = 0
    asd_close = 0
    pairs = 0
    for p in suite:
        for t in suite:
            pairs += 1
            if dice_score(p, t) == _oracle_dice(p, t):
                dice_exact += 1
            if abs(average_surface_distance(p, t) - _oracle_asd(p, t, penalty)) <= 1e-9:
                asd_close += 1
            assert {tuple(v) for v in extract_boundary(p)} == _oracle_boundary(p)
    ok = dice_exact == pairs and asd_close == pairs
    report(
        capsys,
        ok,
        "7/9 metrics oracle",
        f"{pairs} mask pairs: overlap exact {dice_exact}/{pairs}, boundary distance within 1e-9 {asd_close}/{pairs}",
    )


# -- 8/9 determinism ----------------------------------------------------------


def _mini_pipeline(root: Path, seed: int) -> dict[str, bytes]:
    def run(*argv):
        code = cli_main([str(a) for a in argv])
        assert code == 0, f"command failed: {argv}"

    run("synth-gen", "--out", root / "ds_liver", "--domain", "source_liver", "--n", 12, "--seed", seed)
    run("synth-gen", "--out", root / "ds_spleen", "--domain", "source_spleen", "--n", 12, "--seed", seed + 1)
    run("synth-gen", "--out", root / "ds_target", "--domain", "target", "--n", 12, "--seed", seed + 2)
    run("pretrain", "--out", root / "t1", "--dataset", root / "ds_liver", "--organ", "liver",
        "--epochs", 2, "--seed", seed)
    run("pretrain", "--out", root / "t2", "--dataset", root / "ds_spleen", "--organ", "spleen",
        "--epochs", 2, "--seed", seed)
    run("adapt", "--out", root / "a1", "--teacher", root / "t1" / "teacher.ckpt",
        "--dataset", root / "ds_target", "--epochs", 1, "--seed", seed)
    run("adapt", "--out", root / "a2", "--teacher", root / "t2" / "teacher.ckpt",
        "--dataset", root / "ds_target", "--epochs", 1, "--seed", seed)
    run("ensemble", "--out", root / "s", "--teachers", root / "a1" / "adapted.ckpt",
        root / "a2" / "adapted.ckpt", "--dataset", root / "ds_target", "--epochs", 1, "--seed", seed)
    run("eval", "--out", root / "e", "--checkpoint", root / "s" / "student.ckpt",
        "--dataset", root / "ds_target")
    artifacts = [
        "t1/teacher.ckpt", "t2/teacher.ckpt", "t1/metrics.json",
        "a1/adapted.ckpt", "a2/adapted.ckpt",
        "s/student.ckpt", "s/selection.bin",
        "e/metrics.json", "e/metrics.csv",
    ]
    return {name: (root / name).read_bytes() for name in artifacts}


def test_pipeline_is_bit_reproducible(tmp_path_factory, capsys):
    seed = 31
    first = _mini_pipeline(tmp_path_factory.mktemp("pipe_a"), seed)
    second = _mini_pipeline(tmp_path_factory.mktemp("pipe_b"), seed)
    differing = [name for name in first if first[name] != second[name]]
    ok = not differing
    report(
        capsys,
        ok,
        "8/9 determinism",
        f"{len(first)} artifacts byte-compared, differing: {differing or 'none'}",
    )


# -- 9/9 three-teacher extension ----------------------------------------------


def test_three_teacher_extension(benchmark_runs, capsys):
    student = np.mean([benchmark_runs[r].students["trio_norm"].dice["kidney"] for r in ROOT_SEEDS])
    teacher = np.mean([benchmark_runs[r].teachers["kidney"].adapted_dice for r in ROOT_SEEDS])
    margin = 100 * float(student - teacher)
    ok = abs(margin) <= 2.0
    report(
        capsys,
        ok,
        "9/9 three-teacher",
        f"student kidney {100 * student:.1f} vs adapted teacher {100 * teacher:.1f} ({margin:+.1f} pts, within 2.0)",
    )
