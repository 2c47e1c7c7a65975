"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one ``PASS criterion N: ...`` / ``FAIL criterion N: ...``
line; the lines are printed together in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from stalab.attack import AttackConfig, evaluation_views, run_combined, run_sta, target_scores
from stalab.cli import main
from stalab.evaluation import detect_drift, evaluate, iou, run_video, transfer_matrix
from stalab.gradcheck import run_all
from stalab.renderer import default_object, default_scene, noise_texture
from stalab.siamese import VictimConfig, build_victim
from stalab.tracker import (BBox, CosineWindow, CropSpec, apply_penalty, check_mislead, crop_and_scale,
                            penalized_score)

SEEDS = (0, 1, 2)


def record(log, n, name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {name} | {detail}"
    print(line)
    log.append(line)
    return passed


# ---------------------------------------------------------------- shared runs

class Study:
    """Default-config attacks per (head, seed), with their clean/adversarial
    target scores and tracking runs, computed once per session."""

    def __init__(self):
        self.obj = default_object()
        self.occluded = default_scene()
        self.free = default_scene(occluders=False)
        self.views = evaluation_views()
        self.victims = {}
        self.results = {}
        self.seconds = {}
        self._tracks = {}

    def victim(self, head, seed):
        key = (head, seed)
        if key not in self.victims:
            self.victims[key] = build_victim(VictimConfig(head=head, seed=seed))
        return self.victims[key]

    def attack(self, head, seed):
        key = (head, seed)
        if key not in self.results:
            t0 = time.perf_counter()
            self.results[key] = run_sta(self.victim(head, seed), self.obj, AttackConfig(head=head, seed=seed))
            self.seconds[key] = time.perf_counter() - t0
        return self.results[key]

    def score_ratio(self, head, seed):
        v = self.victim(head, seed)
        clean = target_scores(v, self.obj, self.obj.texture, self.views).mean()
        adv = target_scores(v, self.obj, self.attack(head, seed).texture, self.views).mean()
        return float(adv / clean)

    def track(self, head, seed, adversarial, occluders):
        key = (head, seed, adversarial, occluders)
        if key not in self._tracks:
            tex = self.attack(head, seed).texture if adversarial else None
            scene = self.occluded if occluders else self.free
            steps, boxes = run_video(self.victim(head, seed), scene, self.obj, tex)
            self._tracks[key] = evaluate(steps, boxes)
        return self._tracks[key]


@pytest.fixture(scope="module")
def study():
    return Study()


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_integrity(acceptance_log):
    t0 = time.perf_counter()
    results = run_all(seed=0, n_coords=100)
    seconds = time.perf_counter() - t0
    pipeline = [r for r in results if r.name.startswith("pipeline/")]
    ok = (all(r.passed for r in results) and all(r.coords >= 100 for r in pipeline)
          and max(r.max_rel_error for r in results) <= 1e-4 and seconds <= 120)
    worst = max(results, key=lambda r: r.max_rel_error)
    record(acceptance_log, 1, "full-pipeline gradients vs central differences", ok,
           f"{len(results)} checks, pipeline coords {[r.coords for r in pipeline]}, "
           f"worst {worst.name} rel err {worst.max_rel_error:.2e} (<= 1e-4), {seconds:.1f}s (<= 120s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_mislead_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    checked = disagree = 0
    for _ in range(1000):
        M = int(rng.integers(3, 512))
        c = float(rng.uniform(0.0, 0.99))
        s, sp = rng.uniform(-1, 2, size=2)
        d, dp = rng.uniform(0, (M - 1) / 2, size=2)
        gap = penalized_score(sp, dp, c, M) - penalized_score(s, d, c, M)
        if abs(gap) <= 1e-12:
            continue
        checked += 1
        disagree += check_mislead(s, sp, d, dp, c, M) != (gap > 0)
    seconds = time.perf_counter() - t0
    ok = disagree == 0 and seconds < 10
    record(acceptance_log, 2, "mislead condition vs direct penalised comparison", ok,
           f"{checked} non-tie cases of 1000, {disagree} disagreements, {seconds:.2f}s")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_score_suppression(study, acceptance_log):
    ratios = {s: study.score_ratio("symmetric", s) for s in SEEDS}
    secs = {s: study.seconds[("symmetric", s)] for s in SEEDS}
    passed = sum(r <= 0.6 for r in ratios.values())
    ok = passed >= 2 and max(secs.values()) <= 15 * 60
    record(acceptance_log, 3, "symmetric self-similarity suppressed to <= 60%", ok,
           "ratios " + ", ".join(f"s{s}={r:.3f}" for s, r in ratios.items())
           + f"; {passed}/3 pass (need 2); slowest seed {max(secs.values()):.0f}s")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_drift_under_occlusion(study, acceptance_log):
    clean_ok = True
    parts = []
    drifts = {}
    for head in ("symmetric", "rpn"):
        n = 0
        for s in SEEDS:
            clean = study.track(head, s, False, True)
            adv = study.track(head, s, True, True)
            clean_ok &= clean.mean_iou >= 0.5 and clean.drift_frame is None
            n += adv.drift_frame is not None
            parts.append(f"{head}-s{s} clean {clean.mean_iou:.3f}/drift {clean.drift_frame}, "
                         f"adv {adv.mean_iou:.3f}/drift {adv.drift_frame}")
        drifts[head] = n
    ok = clean_ok and drifts["symmetric"] >= 1 and drifts["rpn"] >= 2
    record(acceptance_log, 4, "adversarial drift on the occlusion scene", ok,
           f"drifting seeds symmetric {drifts['symmetric']}/3 (need 1), rpn {drifts['rpn']}/3 (need 2); "
           + "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_asymmetry(study, acceptance_log):
    sym = {s: study.score_ratio("symmetric", s) for s in SEEDS}
    rpn = {s: study.score_ratio("rpn", s) for s in SEEDS}
    lower = sum(rpn[s] < sym[s] for s in SEEDS)
    rpn_drift = [s for s in SEEDS if study.track("rpn", s, True, False).drift_frame is not None]
    sym_drift = [s for s in SEEDS if study.track("symmetric", s, True, False).drift_frame is not None]
    ok = lower >= 2 and len(rpn_drift) >= 1 and not sym_drift
    record(acceptance_log, 5, "RPN head more vulnerable than symmetric head", ok,
           "normalised scores " + ", ".join(f"s{s} rpn {rpn[s]:.3f} vs sym {sym[s]:.3f}" for s in SEEDS)
           + f"; rpn lower in {lower}/3 (need 2); no-occluder drift rpn seeds {rpn_drift}, "
           f"symmetric seeds {sym_drift}")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_transfer_pattern(study, acceptance_log):
    # the combined attack cycles through the victims in order; the harder
    # (symmetric) victim goes last so the final round targets it
    heads = ("rpn", "symmetric")
    victims = {study.victim(h, 0).name: study.victim(h, 0) for h in heads}
    names = list(victims)
    textures = {n: study.attack(h, 0).texture for n, h in zip(names, heads)}
    textures["combined"] = run_combined(list(victims.values()), study.obj, AttackConfig()).texture
    textures["clean"] = None
    textures["random"] = noise_texture(study.obj.texture.height, study.obj.texture.width, 0)
    m = transfer_matrix(victims, textures, study.occluded, study.obj)
    fails = []
    for r in names:
        clean = m.cell(r, "clean")
        if not m.cell(r, r) < clean - 20:
            fails.append(f"diagonal {r} {m.cell(r, r):.1f} not < {clean - 20:.1f}")
        for c in names:
            if c != r and abs(m.cell(r, c) - clean) > 10:
                fails.append(f"off-diagonal {r} on {c} {m.cell(r, c):.1f} vs clean {clean:.1f}")
        if abs(m.cell(r, "random") - clean) > 10:
            fails.append(f"random on {r} {m.cell(r, 'random'):.1f} vs clean {clean:.1f}")
        if not m.cell(r, "combined") <= clean - 15:
            fails.append(f"combined on {r} {m.cell(r, 'combined'):.1f} not <= {clean - 15:.1f}")
    grid = "; ".join(f"{r}: " + ", ".join(f"{c}={v:.1f}" for c, v in zip(m.columns, row))
                     for r, row in zip(m.rows, m.cells))
    ok = not fails
    record(acceptance_log, 6, "transfer matrix pattern", ok, grid + ("" if ok else " || " + "; ".join(fails)))
    assert ok, fails


# ---------------------------------------------------------------- 7

def test_criterion_7_crop_geometry(acceptance_log):
    spec = CropSpec(32, 64)
    rng = np.random.default_rng(7)
    H = W = 600
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    ramp = np.stack([xs, ys, np.zeros_like(xs)])
    worst_p = worst_a = worst_crop = 0.0
    for _ in range(100):
        w, h = rng.uniform(4, 120, size=2)
        box = BBox(rng.uniform(250, 350), rng.uniform(250, 350), w, h)
        p = spec.margin(w, h)
        s = spec.scale(w, h)
        worst_p = max(worst_p, abs(p - (w + h) / 4))
        worst_a = max(worst_a, abs(s * (w + 2 * p) * s * (h + 2 * p) - spec.area))
        # the crop of a coordinate ramp reads back its own sample positions;
        # their spacing is 1/s, so the crop covers exactly A after scaling
        crop = crop_and_scale(ramp, box, "exemplar", spec).data
        n = spec.exemplar_size
        s_x = (n - 1) / (crop[0, 0, -1] - crop[0, 0, 0])
        s_y = (n - 1) / (crop[1, -1, 0] - crop[1, 0, 0])
        worst_crop = max(worst_crop, abs(s_x * (w + 2 * p) * s_y * (h + 2 * p) - spec.area) / spec.area)
    ok = worst_p <= 1e-12 and worst_a <= 1e-12 and worst_crop <= 1e-12
    record(acceptance_log, 7, "crop context and scale", ok,
           f"100 boxes: max |p-(w+h)/4|={worst_p:.1e}, max |s(w+2p)s(h+2p)-A|={worst_a:.1e}, "
           f"crop-measured relative area error {worst_crop:.1e} (all <= 1e-12)")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_attack_determinism(tmp_path, acceptance_log):
    codes = [main(["attack", "--seed", "3", "--out", str(tmp_path / run)]) for run in ("a", "b")]
    same = {}
    for name in ("texture.png", "texture.npy", "loss.csv"):
        same[name] = (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ok = codes == [0, 0] and all(same.values())
    record(acceptance_log, 8, "attack command is bit-reproducible", ok,
           f"exit codes {codes}; identical files: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_eval_unit_suite(acceptance_log):
    cases = {
        "iou identical": iou(BBox(3, 4, 5, 6), BBox(3, 4, 5, 6)) == 1.0,
        "iou disjoint": iou(BBox(0, 0, 2, 2), BBox(10, 0, 2, 2)) == 0.0,
        "iou 1/3": math.isclose(iou(BBox.from_corners(0, 0, 2, 2), BBox.from_corners(1, 0, 3, 2)), 1 / 3,
                                rel_tol=0, abs_tol=1e-15),
        "drift none": detect_drift([0.9] * 20) is None,
        "drift frame 1": detect_drift([0.8, 0.05, 0.0, 0.0], tau=0.1) == 1,
        "drift recovers": detect_drift([0.8, 0.05, 0.0, 0.6, 0.9], tau=0.1) is None,
    }
    s = np.random.default_rng(9).uniform(size=(17, 17))
    cases["penalty c=0"] = np.array_equal(apply_penalty(s, CosineWindow(17, 0.0)), s)
    cases["penalty centre"] = math.isclose(apply_penalty(s, CosineWindow(17, 0.3))[8, 8], 0.7 * s[8, 8] + 0.3,
                                           rel_tol=0, abs_tol=1e-15)
    m = np.zeros((17, 17))
    m[8, 8], m[8, 2] = 0.30, 0.32
    pen = apply_penalty(m, CosineWindow(17, 0.3))
    cases["penalty flips argmax"] = np.unravel_index(np.argmax(m), m.shape) == (8, 2) and \
        np.unravel_index(np.argmax(pen), pen.shape) == (8, 8)
    ok = all(cases.values())
    record(acceptance_log, 9, "iou / detect_drift / apply_penalty examples", ok,
           ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in cases.items()))
    assert ok
