"""Open-loop planning metrics and multimodal prediction metrics.

Single-trajectory scores follow the open-loop recipe: displacement and
heading errors are computed over the 3 s / 5 s / 8 s horizons, averaged
across horizons, clamped into scores against fixed thresholds (8 m for
displacement, 0.8 rad for heading), weighted 1/1/2/2 and gated by the
miss-rate score, reported on a 0..100 scale. A scenario is missed when
any horizon's max frame displacement exceeds that horizon's threshold;
the miss score is 0 only when the scenario-wise miss rate is strictly
above 0.3.

Multimodal metrics take the best mode per scenario: minADE/minFDE are
minima over modes of the full-horizon errors, and the prediction miss
rate counts scenarios whose minFDE exceeds a configurable threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, UndefinedRateError
from .scenario import FUTURE_FRAMES, wrap_angle

HORIZONS_S = (3, 5, 8)
FRAMES_PER_SECOND = 10

DISPLACEMENT_THRESHOLD_M = 8.0
HEADING_THRESHOLD_RAD = 0.8
SCORE_WEIGHTS = {"ade": 1.0, "fde": 1.0, "ahe": 2.0, "fhe": 2.0}
MISS_RATE_GATE = 0.3
# per-horizon miss thresholds (meters), benchmark-toolkit defaults
DEFAULT_MISS_THRESHOLDS = {3: 6.0, 5: 8.0, 8: 16.0}
DEFAULT_PRED_FDE_THRESHOLD_M = 2.0


def _check_trajectory(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != (FUTURE_FRAMES, 3):
        raise ShapeError(f"{name} has shape {arr.shape}, expected ({FUTURE_FRAMES}, 3)")
    return arr


@dataclass(frozen=True)
class HorizonErrors:
    """ADE/FDE (meters) and AHE/FHE (radians) per horizon in seconds."""
    ade: dict[int, float]
    fde: dict[int, float]
    ahe: dict[int, float]
    fhe: dict[int, float]


def horizon_errors(pred: np.ndarray, gt: np.ndarray) -> HorizonErrors:
    """Displacement/heading errors of one trajectory over 3/5/8 s horizons."""
    pred = _check_trajectory(pred, "prediction")
    gt = _check_trajectory(gt, "ground truth")
    disp = np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])
    head = np.abs(wrap_angle(pred[:, 2] - gt[:, 2]))
    ade, fde, ahe, fhe = {}, {}, {}, {}
    for h in HORIZONS_S:
        n = h * FRAMES_PER_SECOND
        ade[h] = float(disp[:n].mean())
        fde[h] = float(disp[n - 1])
        ahe[h] = float(head[:n].mean())
        fhe[h] = float(head[n - 1])
    return HorizonErrors(ade=ade, fde=fde, ahe=ahe, fhe=fhe)


def average_over_horizons(x3: float, x5: float, x8: float) -> float:
    """(x3 + x5 + x8) / 3."""
    if not np.all(np.isfinite([x3, x5, x8])):
        raise ContractError(f"non-finite horizon values ({x3}, {x5}, {x8})")
    return (x3 + x5 + x8) / 3.0


def score_from_error(xbar: float, threshold: float) -> float:
    """max(0, 1 - xbar / threshold), clamped into [0, 1]."""
    if threshold <= 0:
        raise ContractError(f"threshold must be positive, got {threshold}")
    return float(min(1.0, max(0.0, 1.0 - xbar / threshold)))


def max_displacements(pred: np.ndarray, gt: np.ndarray) -> dict[int, float]:
    """Max frame displacement within each horizon."""
    pred = _check_trajectory(pred, "prediction")
    gt = _check_trajectory(gt, "ground truth")
    disp = np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])
    return {h: float(disp[:h * FRAMES_PER_SECOND].max()) for h in HORIZONS_S}


def miss_decision(max_disp: dict[int, float],
                  thresholds: dict[int, float] | None = None) -> bool:
    """Missed iff any horizon's max displacement exceeds its threshold."""
    thresholds = thresholds or DEFAULT_MISS_THRESHOLDS
    return any(max_disp[h] > thresholds[h] for h in HORIZONS_S)


def scenario_miss_rate(missed_flags) -> float:
    flags = list(missed_flags)
    if not flags:
        raise UndefinedRateError("miss rate over an empty scenario set")
    return float(np.mean([bool(f) for f in flags]))


def score_miss(rate: float) -> int:
    """0 iff the miss rate is strictly greater than the 0.3 gate."""
    return 0 if rate > MISS_RATE_GATE else 1


def ols(scores: dict[str, float], miss_score: int) -> float:
    """Weighted mean of the four error scores, gated by the miss score,
    on a 0..100 scale. Heading scores weigh double."""
    for key, value in scores.items():
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"score {key}={value} outside [0, 1]")
    num = sum(SCORE_WEIGHTS[k] * scores[k] for k in SCORE_WEIGHTS)
    den = sum(SCORE_WEIGHTS.values())
    return float(num / den * miss_score * 100.0)


def multimodal_metrics(modes: np.ndarray, gt: np.ndarray,
                       fde_threshold: float = DEFAULT_PRED_FDE_THRESHOLD_M
                       ) -> tuple[float, float, bool]:
    """minADE, minFDE over modes, and whether the scenario counts as missed.

    The miss flag compares the best final displacement against the
    threshold, so one good mode among many is enough.
    """
    modes = np.asarray(modes, dtype=np.float64)
    if modes.ndim != 3 or modes.shape[0] < 1:
        raise ContractError(f"need (modes, {FUTURE_FRAMES}, 3) with >= 1 mode, "
                            f"got {modes.shape}")
    gt = _check_trajectory(gt, "ground truth")
    ades, fdes = [], []
    for m in range(modes.shape[0]):
        traj = _check_trajectory(modes[m], f"mode {m}")
        disp = np.hypot(traj[:, 0] - gt[:, 0], traj[:, 1] - gt[:, 1])
        ades.append(float(disp.mean()))
        fdes.append(float(disp[-1]))
    min_ade = min(ades)
    min_fde = min(fdes)
    return min_ade, min_fde, min_fde > fde_threshold


@dataclass(frozen=True)
class MetricsReport:
    ade: float
    fde: float
    ahe: float
    fhe: float
    score_ade: float
    score_fde: float
    score_ahe: float
    score_fhe: float
    miss_rate: float
    score_miss: int
    ols: float
    min_ade: float
    min_fde: float
    mr_pred: float
    n_scenarios: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def summary(self) -> str:
        return (
            f"scenarios: {self.n_scenarios}\n"
            f"ADE {self.ade:.4f} m (score {self.score_ade:.4f})  "
            f"FDE {self.fde:.4f} m (score {self.score_fde:.4f})\n"
            f"AHE {self.ahe:.4f} rad (score {self.score_ahe:.4f})  "
            f"FHE {self.fhe:.4f} rad (score {self.score_fhe:.4f})\n"
            f"miss rate {self.miss_rate:.4f} (score {self.score_miss})\n"
            f"OLS {self.ols:.2f}\n"
            f"minADE {self.min_ade:.4f} m  minFDE {self.min_fde:.4f} m  "
            f"MR {self.mr_pred:.4f}\n"
        )


def aggregate_report(entries,
                     miss_thresholds: dict[int, float] | None = None,
                     fde_threshold: float = DEFAULT_PRED_FDE_THRESHOLD_M
                     ) -> MetricsReport:
    """Full report over (modes, mode_scores, gt) triples.

    The top-scoring mode feeds the single-trajectory pipeline; errors
    average across scenarios before scoring.
    """
    entries = list(entries)
    if not entries:
        raise UndefinedRateError("metrics over an empty scenario set")
    per_metric = {"ade": [], "fde": [], "ahe": [], "fhe": []}
    missed_flags = []
    min_ades, min_fdes, pred_missed = [], [], []
    for modes, mode_scores, gt in entries:
        modes = np.asarray(modes, dtype=np.float64)
        mode_scores = np.asarray(mode_scores, dtype=np.float64)
        if mode_scores.shape[0] != modes.shape[0]:
            raise ShapeError(f"{modes.shape[0]} modes vs {mode_scores.shape[0]} scores")
        top = modes[int(np.argmax(mode_scores))]
        he = horizon_errors(top, gt)
        per_metric["ade"].append(average_over_horizons(*[he.ade[h] for h in HORIZONS_S]))
        per_metric["fde"].append(average_over_horizons(*[he.fde[h] for h in HORIZONS_S]))
        per_metric["ahe"].append(average_over_horizons(*[he.ahe[h] for h in HORIZONS_S]))
        per_metric["fhe"].append(average_over_horizons(*[he.fhe[h] for h in HORIZONS_S]))
        missed_flags.append(miss_decision(max_displacements(top, gt), miss_thresholds))
        ma, mf, pm = multimodal_metrics(modes, gt, fde_threshold)
        min_ades.append(ma)
        min_fdes.append(mf)
        pred_missed.append(pm)
    means = {k: float(np.mean(v)) for k, v in per_metric.items()}
    scores = {
        "ade": score_from_error(means["ade"], DISPLACEMENT_THRESHOLD_M),
        "fde": score_from_error(means["fde"], DISPLACEMENT_THRESHOLD_M),
        "ahe": score_from_error(means["ahe"], HEADING_THRESHOLD_RAD),
        "fhe": score_from_error(means["fhe"], HEADING_THRESHOLD_RAD),
    }
    rate = scenario_miss_rate(missed_flags)
    gate = score_miss(rate)
    return MetricsReport(
        ade=means["ade"], fde=means["fde"], ahe=means["ahe"], fhe=means["fhe"],
        score_ade=scores["ade"], score_fde=scores["fde"],
        score_ahe=scores["ahe"], score_fhe=scores["fhe"],
        miss_rate=rate, score_miss=gate, ols=ols(scores, gate),
        min_ade=float(np.mean(min_ades)), min_fde=float(np.mean(min_fdes)),
        mr_pred=float(np.mean(pred_missed)), n_scenarios=len(entries))


def write_report_csv(path: str, report: MetricsReport) -> None:
    d = report.to_dict()
    keys = list(d.keys())
    with open(path, "w") as f:
        f.write(",".join(keys) + "\n")
        f.write(",".join(repr(d[k]) for k in keys) + "\n")
