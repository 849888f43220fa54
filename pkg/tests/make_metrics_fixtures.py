"""Regenerate tests/fixtures/metrics_fixtures.json.

The expected reports here are computed by a deliberately naive
loop-based implementation, independent of trajseq.metrics: plain Python
floats, explicit horizon windows, no shared helpers. Run from the repo
root:

    python3 tests/make_metrics_fixtures.py
"""

import json
import math
import os

FRAMES = 80
HORIZONS = (3, 5, 8)
DISP_T = 8.0
HEAD_T = 0.8
MISS_T = {3: 6.0, 5: 8.0, 8: 16.0}
PRED_FDE_T = 2.0


def wrap(a):
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    w -= math.pi
    if w == -math.pi:
        w = math.pi
    return w


def straight_gt(speed=8.0, yaw=0.0):
    return [[speed * 0.1 * (i + 1) * math.cos(yaw),
             speed * 0.1 * (i + 1) * math.sin(yaw), yaw] for i in range(FRAMES)]


def offset_traj(gt, dx=0.0, dy=0.0, dyaw=0.0, ramp=0.0):
    out = []
    for i, (x, y, yaw) in enumerate(gt):
        r = ramp * (i + 1) / FRAMES
        out.append([x + dx + r, y + dy, wrap(yaw + dyaw)])
    return out


def naive_report(entries):
    """entries: list of (modes, scores, gt) in plain lists."""
    sums = {"ade": 0.0, "fde": 0.0, "ahe": 0.0, "fhe": 0.0}
    missed = 0
    min_ades, min_fdes, pred_miss = [], [], 0
    for modes, scores, gt in entries:
        best = 0
        for i in range(len(scores)):
            if scores[i] > scores[best]:
                best = i
        top = modes[best]
        per_h = {k: {} for k in sums}
        for h in HORIZONS:
            n = 10 * h
            disps, heads = [], []
            for i in range(n):
                dx = top[i][0] - gt[i][0]
                dy = top[i][1] - gt[i][1]
                disps.append(math.sqrt(dx * dx + dy * dy))
                heads.append(abs(wrap(top[i][2] - gt[i][2])))
            per_h["ade"][h] = sum(disps) / n
            per_h["fde"][h] = disps[n - 1]
            per_h["ahe"][h] = sum(heads) / n
            per_h["fhe"][h] = heads[n - 1]
        for k in sums:
            sums[k] += (per_h[k][3] + per_h[k][5] + per_h[k][8]) / 3.0
        is_miss = False
        for h in HORIZONS:
            n = 10 * h
            m = 0.0
            for i in range(n):
                dx = top[i][0] - gt[i][0]
                dy = top[i][1] - gt[i][1]
                m = max(m, math.sqrt(dx * dx + dy * dy))
            if m > MISS_T[h]:
                is_miss = True
        missed += 1 if is_miss else 0
        mode_ades, mode_fdes = [], []
        for mode in modes:
            disps = []
            for i in range(FRAMES):
                dx = mode[i][0] - gt[i][0]
                dy = mode[i][1] - gt[i][1]
                disps.append(math.sqrt(dx * dx + dy * dy))
            mode_ades.append(sum(disps) / FRAMES)
            mode_fdes.append(disps[-1])
        min_ades.append(min(mode_ades))
        min_fdes.append(min(mode_fdes))
        pred_miss += 1 if min(mode_fdes) > PRED_FDE_T else 0

    n = len(entries)
    means = {k: sums[k] / n for k in sums}
    scores = {
        "ade": max(0.0, 1.0 - means["ade"] / DISP_T),
        "fde": max(0.0, 1.0 - means["fde"] / DISP_T),
        "ahe": max(0.0, 1.0 - means["ahe"] / HEAD_T),
        "fhe": max(0.0, 1.0 - means["fhe"] / HEAD_T),
    }
    rate = missed / n
    gate = 0 if rate > 0.3 else 1
    weighted = (scores["ade"] + scores["fde"] + 2 * scores["ahe"] + 2 * scores["fhe"]) / 6.0
    return {
        "ade": means["ade"], "fde": means["fde"], "ahe": means["ahe"], "fhe": means["fhe"],
        "score_ade": scores["ade"], "score_fde": scores["fde"],
        "score_ahe": scores["ahe"], "score_fhe": scores["fhe"],
        "miss_rate": rate, "score_miss": gate, "ols": weighted * gate * 100.0,
        "min_ade": sum(min_ades) / n, "min_fde": sum(min_fdes) / n,
        "mr_pred": pred_miss / n, "n_scenarios": n,
    }


def build_cases():
    cases = []

    gt = straight_gt()
    cases.append({"name": "perfect", "entries": [([gt], [1.0], gt)]})

    cases.append({"name": "lateral_2m",
                  "entries": [([offset_traj(gt, dy=2.0)], [1.0], gt)]})

    cases.append({"name": "heading_pi",
                  "entries": [([offset_traj(gt, dyaw=math.pi)], [1.0], gt)]})

    cases.append({"name": "heading_04rad",
                  "entries": [([offset_traj(gt, dyaw=0.4)], [1.0], gt)]})

    # exactly at the displacement threshold: score hits zero
    cases.append({"name": "displacement_8m",
                  "entries": [([offset_traj(gt, dy=8.0)], [1.0], gt)]})

    # growing error crossing the 8 s miss threshold only
    cases.append({"name": "ramp_20m",
                  "entries": [([offset_traj(gt, ramp=20.0)], [1.0], gt)]})

    # two modes, second (better) one has the top score
    cases.append({"name": "two_modes_pick_best",
                  "entries": [([offset_traj(gt, dy=5.0), offset_traj(gt, dy=0.5)],
                               [0.3, 0.7], gt)]})

    # two modes, worse one scored higher: top feeds single-traj pipeline
    cases.append({"name": "two_modes_pick_worse",
                  "entries": [([offset_traj(gt, dy=5.0), offset_traj(gt, dy=0.5)],
                               [0.7, 0.3], gt)]})

    # curved ground truth with yaw drift
    gt_curve = [[10.0 * math.sin(0.02 * (i + 1)), 10.0 * (1 - math.cos(0.02 * (i + 1))),
                 wrap(0.02 * (i + 1))] for i in range(FRAMES)]
    cases.append({"name": "curved_offset",
                  "entries": [([offset_traj(gt_curve, dx=1.0, dyaw=-0.2)], [1.0],
                               gt_curve)]})

    # multi-scenario set: 2 of 5 missed -> rate 0.4 -> gate 0
    entries = []
    for i in range(5):
        dy = [0.5, 1.0, 1.5, 9.0, 9.5][i]
        entries.append(([offset_traj(gt, dy=dy)], [1.0], gt))
    cases.append({"name": "gate_trips_at_0p4", "entries": entries})

    # multi-scenario set: 1 of 5 missed -> rate 0.2 -> gate stays 1
    entries = []
    for i in range(5):
        dy = [0.5, 1.0, 1.5, 2.0, 9.5][i]
        entries.append(([offset_traj(gt, dy=dy)], [1.0], gt))
    cases.append({"name": "gate_holds_at_0p2", "entries": entries})

    # mixed headings exercising the wrap on both sides of pi
    cases.append({"name": "wrap_both_sides",
                  "entries": [([offset_traj(gt, dyaw=3.0)], [1.0], gt),
                              ([offset_traj(gt, dyaw=-3.0)], [1.0], gt)]})
    return cases


def main():
    cases = build_cases()
    out = []
    for case in cases:
        out.append({"name": case["name"], "entries": case["entries"],
                    "expected": naive_report(case["entries"])})
    path = os.path.join(os.path.dirname(__file__), "fixtures", "metrics_fixtures.json")
    with open(path, "w") as f:
        json.dump(out, f)
        f.write("\n")
    print(f"wrote {len(out)} fixture cases to {path}")


if __name__ == "__main__":
    main()
