"""Synthetic scenes, perturbation sampling, benchmark trials and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dema import DemaConfig, PoseEstimate, dema_solve
from .fuma import fuma_solve
from .geometry import (
    Axis, ConfigError, HypothesisGrid, Se2Pose, compose, crop_local_map, inverse, sample_hypotheses,
    wrap_angle,
)
from .hdmap import MapElement, VectorMap
from .raster import BACKGROUND, BevSpec, BevGrid, downsample, rasterize

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "trial_id", "dx_gt", "dy_gt", "dyaw_gt", "dx_est", "dy_est", "dyaw_est",
    "err_x", "err_y", "err_yaw", "conf_x", "conf_y", "conf_yaw", "solver", "evals", "ms",
)


# -- scenes --------------------------------------------------------------------

@dataclass
class SceneParams:
    n_dividers: int = 3
    lane_width: float = 3.5
    length: float = 140.0
    point_spacing: float = 2.0
    curvature_max: float = 0.0005
    divider_end_prob: float = 0.5
    crossings: tuple = (0, 2)
    boundary_gap_prob: float = 0.7
    require_asymmetry: bool = True

    def check(self):
        if self.n_dividers < 0:
            raise ConfigError("n_dividers must be >= 0")
        if self.lane_width <= 0 or self.point_spacing <= 0:
            raise ConfigError("lane_width and point_spacing must be > 0")
        if self.length < 4 * self.point_spacing:
            raise ConfigError("length is too short for the point spacing")
        lo, hi = self.crossings
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad crossing count range {self.crossings}")
        if self.n_dividers == 0 and hi == 0:
            raise ConfigError("scene would contain only road boundaries")
        if self.require_asymmetry and hi == 0:
            raise ConfigError("require_asymmetry needs at least one crossing")
        if abs(self.curvature_max) * self.length / 2 > 0.5:
            raise ConfigError("curvature_max too large for the road length")


def _road_line(xs, offset, curvature):
    """Points at lateral ``offset`` from the centerline ``y = κ x² / 2``."""
    yc = 0.5 * curvature * xs ** 2
    slope = curvature * xs
    norm = np.sqrt(1.0 + slope ** 2)
    return np.stack([xs - offset * slope / norm, yc + offset / norm], axis=1)


def _symmetric_pair(a: np.ndarray, b: np.ndarray, tol: float = 0.05) -> bool:
    """True when ``b`` equals ``a`` rotated by 180° about the origin (as point sets)."""
    if len(a) != len(b):
        return False
    neg = -a
    return bool(np.allclose(neg, b, atol=tol) or np.allclose(neg[::-1], b, atol=tol))


def is_point_symmetric(elements) -> bool:
    pts = [el.points for el in elements]
    return any(_symmetric_pair(pts[i], pts[j]) for i in range(len(pts)) for j in range(i + 1, len(pts)))


def generate_scene(seed, params: SceneParams | None = None) -> VectorMap:
    """Deterministic synthetic road in a frame whose origin is the nominal ego position.

    Parallel dividers follow a gently curved centerline; flanking road
    boundaries may have a side-road gap with outward stubs; 0-2 crossing
    outlines span the road. With ``require_asymmetry`` the curvature is kept
    away from zero, at least one skewed crossing is drawn (dividers and
    boundaries alone leave the longitudinal offset unobservable) and no two
    boundaries are point-symmetric about the origin.
    """
    params = params or SceneParams()
    params.check()
    rng = np.random.default_rng(seed)
    half = params.length / 2
    xs = np.arange(-half, half + 1e-9, params.point_spacing)
    kmax = params.curvature_max
    for _ in range(100):
        curvature = rng.uniform(-kmax, kmax)
        if not params.require_asymmetry or abs(curvature) >= 0.25 * kmax:
            break
    elements = []

    def add(cls, points):
        elements.append(MapElement(len(elements), cls, points))

    nd = params.n_dividers
    road_half = (nd + 1) / 2 * params.lane_width
    for k in range(nd):
        offset = (k - (nd - 1) / 2) * params.lane_width + rng.uniform(-0.3, 0.3)
        lo, hi = -half, half
        if rng.random() < params.divider_end_prob:
            if rng.random() < 0.5:
                lo = rng.uniform(-25.0, 10.0)
            else:
                hi = rng.uniform(-10.0, 25.0)
        sel = (xs >= lo) & (xs <= hi)
        if sel.sum() >= 2:
            add("lane_divider", _road_line(xs[sel], offset, curvature))

    for side in (1.0, -1.0):
        offset = side * (road_half + rng.uniform(0.3, 2.0))
        if rng.random() < params.boundary_gap_prob:
            g0 = rng.uniform(-22.0, 14.0)
            g1 = g0 + rng.uniform(6.0, 12.0)
            stub = rng.uniform(3.0, 7.0)
            for x_lo, x_hi, end in ((-half, g0, -1), (g1, half, 0)):
                sel = (xs >= x_lo) & (xs <= x_hi)
                line = _road_line(np.concatenate([xs[sel], [x_hi if end == -1 else x_lo]]), offset, curvature)
                line = line[np.argsort(line[:, 0])]
                tip = line[end] + [0.0, side * stub]
                pts = np.vstack([line, tip]) if end == -1 else np.vstack([tip, line])
                keep = np.concatenate([[True], np.hypot(*np.diff(pts, axis=0).T) > 1e-3])
                add("road_boundary", pts[keep])
        else:
            add("road_boundary", _road_line(xs, offset, curvature))

    lo, hi = params.crossings
    n_cross = int(rng.integers(lo, hi + 1))
    if params.require_asymmetry:
        n_cross = max(n_cross, 1)
    for _ in range(n_cross):
        xc = rng.uniform(-24.0, 24.0)
        depth = rng.uniform(3.0, 5.0)
        skew = math.radians(rng.uniform(-20.0, 20.0))
        yc = 0.5 * curvature * xc ** 2
        span = road_half - 0.2
        t = math.tan(skew)
        corners = np.array([
            [xc - depth / 2 - span * t, yc - span],
            [xc - depth / 2 + span * t, yc + span],
            [xc + depth / 2 + span * t, yc + span],
            [xc + depth / 2 - span * t, yc - span],
        ])
        add("pedestrian_crossing", np.vstack([corners, corners[:1]]))

    scene = VectorMap(elements, frame_tag=f"synthetic:{seed}")
    if params.require_asymmetry and is_point_symmetric(scene.by_class("road_boundary")):
        # a fresh draw from the same stream keeps determinism
        return generate_scene(int(rng.integers(2 ** 31)), params)
    return scene


# -- perturbations -----------------------------------------------------------

@dataclass
class PerturbRanges:
    x: float = 2.0
    y: float = 1.0
    yaw_deg: float = 2.0


def sample_perturbation(rng, ranges: PerturbRanges = PerturbRanges(), on_grid: bool = False,
                        grids=None) -> Se2Pose:
    """Uniform draw of a pose correction; snapped to the hypothesis grids when ``on_grid``."""
    x = rng.uniform(-ranges.x, ranges.x)
    y = rng.uniform(-ranges.y, ranges.y)
    yaw = math.radians(rng.uniform(-ranges.yaw_deg, ranges.yaw_deg))
    if on_grid:
        gx, gy, gyaw = grids
        x, y, yaw = gx.snap(x), gy.snap(y), gyaw.snap(yaw)
    return Se2Pose(x, y, yaw)


# -- trials ------------------------------------------------------------------

@dataclass
class Degradation:
    dropout: float = 0.0
    flip: float = 0.0
    erode: int = 0

    @property
    def active(self) -> bool:
        return self.dropout > 0 or self.flip > 0 or self.erode > 0


@dataclass
class SolverConfig:
    solver: str = "dema"
    spec: BevSpec = field(default_factory=BevSpec)
    pool: int = 4
    dema: DemaConfig = field(default_factory=DemaConfig)
    fuma_temperature: float = 4e-4
    t_c: float = 0.4
    refiner: str = "null"

    @property
    def grids(self):
        return (self.dema.hyps_x, self.dema.hyps_y, self.dema.hyps_yaw)


@dataclass
class TrialRecord:
    trial_id: int
    gt: Se2Pose
    est: Se2Pose | None
    confidence: tuple
    solver: str
    evals: int
    ms: float
    hit: bool = False
    triggered: bool = False
    error_msg: str = ""
    estimate: PoseEstimate | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.est is None

    @property
    def error(self) -> tuple:
        """Per-axis error ``estimate - truth`` in (m, m, deg), yaw wrapped."""
        if self.est is None:
            return (math.nan, math.nan, math.nan)
        return (
            self.est.x - self.gt.x,
            self.est.y - self.gt.y,
            math.degrees(wrap_angle(self.est.yaw - self.gt.yaw)),
        )


def _degrade_map(local: VectorMap, rng, deg: Degradation) -> VectorMap:
    if deg.dropout <= 0:
        return local
    ids = sorted({el.id for el in local.elements})
    dropped = {i for i in ids if rng.random() < deg.dropout}
    return VectorMap([el for el in local.elements if el.id not in dropped], local.frame_tag)


def _degrade_grid(grid: BevGrid, rng, deg: Degradation) -> BevGrid:
    data = grid.data.copy()
    sem = data[..., :BACKGROUND] > 0.5
    if deg.erode > 0:
        for ch in range(sem.shape[2]):
            sem[..., ch] = ndimage.binary_erosion(sem[..., ch], iterations=deg.erode)
    if deg.flip > 0:
        sem ^= rng.random(sem.shape) < deg.flip
    data[..., :BACKGROUND] = sem
    data[..., BACKGROUND] = 1.0 - sem.any(axis=2)
    return BevGrid(grid.spec, data)


def render_pair(vector_map: VectorMap, gt_pose: Se2Pose, correction: Se2Pose, config: SolverConfig,
                rng=None, degradation: Degradation | None = None):
    """Observation grid at the true pose and map grid at the initial pose ``gt ⊗ correction⁻¹``."""
    deg = degradation or Degradation()
    init_pose = compose(gt_pose, inverse(correction))
    obs_local = crop_local_map(vector_map, gt_pose, config.spec)
    if deg.active:
        obs_local = _degrade_map(obs_local, rng, deg)
    obs = rasterize(obs_local, config.spec)
    if deg.active:
        obs = _degrade_grid(obs, rng, deg)
    ref = rasterize(crop_local_map(vector_map, init_pose, config.spec), config.spec)
    if config.pool > 1:
        obs, ref = downsample(obs, config.pool), downsample(ref, config.pool)
    return obs, ref


def solve(obs: BevGrid, ref: BevGrid, config: SolverConfig) -> PoseEstimate:
    if config.solver in ("dema", "adaptive"):
        return dema_solve(obs, ref, config.dema)
    if config.solver == "fuma":
        d = config.dema
        return fuma_solve(obs, ref, d.hyps_x, d.hyps_y, d.hyps_yaw, config.fuma_temperature, d.smooth)
    raise ConfigError(f"unknown solver {config.solver!r}")


def exact_hit(est: Se2Pose, gt: Se2Pose, grids) -> bool:
    """Whether every estimated component sits on the hypothesis bin nearest to the truth."""
    return all(
        g.nearest_index(e) == g.nearest_index(t)
        for g, e, t in zip(grids, (est.x, est.y, est.yaw), (gt.x, gt.y, gt.yaw))
    )


# -- adaptive dispatch -------------------------------------------------------

@dataclass
class AdaptiveResult:
    delta: Se2Pose
    triggered: bool
    refined: bool

    @property
    def refine_requested(self) -> bool:
        return self.triggered and not self.refined


def adaptive_select(coarse: PoseEstimate, refiner=None, t_c: float = 0.4) -> AdaptiveResult:
    """Keep the coarse pose when its weakest per-axis confidence reaches ``t_c``, else refine."""
    if not 0.0 <= t_c <= 1.0:
        raise ConfigError(f"t_c must be in [0, 1], got {t_c}")
    if min(coarse.confidence) >= t_c:
        return AdaptiveResult(coarse.delta, triggered=False, refined=False)
    if refiner is None:
        return AdaptiveResult(coarse.delta, triggered=True, refined=False)
    return AdaptiveResult(refiner(coarse), triggered=True, refined=True)


def make_refiner(kind: str, gt: Se2Pose | None = None):
    """``null`` (no refiner) or ``oracle`` (returns the ground truth)."""
    if kind == "null":
        return None
    if kind == "oracle":
        return lambda coarse: gt
    raise ConfigError(f"unknown refiner {kind!r}")


def run_trial(trial_id: int, vector_map: VectorMap, gt_pose: Se2Pose, correction: Se2Pose,
              config: SolverConfig, rng=None, degradation: Degradation | None = None) -> TrialRecord:
    """Render, solve and score one trial; solver failures become failure rows."""
    try:
        obs, ref = render_pair(vector_map, gt_pose, correction, config, rng, degradation)
        t0 = time.perf_counter()
        est = solve(obs, ref, config)
        ms = (time.perf_counter() - t0) * 1e3
    except Exception as exc:  # noqa: BLE001 - a bad trial must not abort the batch
        log.warning("trial %d failed: %s", trial_id, exc)
        return TrialRecord(trial_id, correction, None, (math.nan,) * 3, config.solver, 0, 0.0,
                           error_msg=f"{type(exc).__name__}: {exc}")
    delta, triggered = est.delta, False
    if config.solver == "adaptive":
        res = adaptive_select(est, make_refiner(config.refiner, correction), config.t_c)
        delta, triggered = res.delta, res.triggered
        log.debug("trial %d: confidences %s triggered=%s", trial_id, est.confidence, triggered)
    return TrialRecord(
        trial_id, correction, delta, est.confidence, config.solver, est.cost.evaluations, ms,
        hit=exact_hit(delta, correction, config.grids), triggered=triggered, estimate=est,
    )


# -- reports -----------------------------------------------------------------

@dataclass
class BenchReport:
    n_trials: int
    n_failed: int
    mae: dict
    rmse: dict
    recovery_rate: float
    mean_evals: dict
    trigger_rate: float
    mean_confidence: dict


def aggregate(records) -> BenchReport:
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    ok = [r for r in records if not r.failed]
    err = np.array([r.error for r in ok]).reshape(-1, 3)
    conf = np.array([r.confidence for r in ok]).reshape(-1, 3)
    axes = ("x", "y", "yaw")
    if len(ok):
        mae = dict(zip(axes, np.mean(np.abs(err), axis=0).tolist()))
        rmse = dict(zip(axes, np.sqrt(np.mean(err ** 2, axis=0)).tolist()))
        mean_conf = dict(zip(axes, np.mean(conf, axis=0).tolist()))
    else:
        mae = rmse = mean_conf = {a: math.nan for a in axes}
    evals = {}
    for r in ok:
        evals.setdefault(r.solver, []).append(r.evals)
    return BenchReport(
        n_trials=len(records),
        n_failed=len(records) - len(ok),
        mae=mae,
        rmse=rmse,
        recovery_rate=sum(r.hit for r in ok) / len(records),
        mean_evals={k: float(np.mean(v)) for k, v in sorted(evals.items())},
        trigger_rate=sum(r.triggered for r in ok) / len(records),
        mean_confidence=mean_conf,
    )


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.6f}"


def write_trials_csv(records, path, timing: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in sorted(records, key=lambda r: r.trial_id):
            est = (r.est.x, r.est.y, r.est.yaw_deg) if r.est else (math.nan,) * 3
            w.writerow([
                r.trial_id, _fmt(r.gt.x), _fmt(r.gt.y), _fmt(r.gt.yaw_deg), *map(_fmt, est),
                *map(_fmt, r.error), *map(_fmt, r.confidence), r.solver, r.evals,
                f"{r.ms:.3f}" if timing else "0.000",
            ])


def write_summary(report: BenchReport, path) -> None:
    Path(path).write_text(json.dumps(asdict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_probs(record: TrialRecord, directory) -> None:
    est = record.estimate
    if est is None:
        return
    doc = {
        "trial_id": record.trial_id,
        "x": {"values": est.dist_x.grid.values.tolist(), "probs": est.dist_x.probs.tolist()},
        "y": {"values": est.dist_y.grid.values.tolist(), "probs": est.dist_y.probs.tolist()},
        "yaw_deg": {"values": np.degrees(est.dist_yaw.grid.values).tolist(),
                    "probs": est.dist_yaw.probs.tolist()},
    }
    Path(directory, f"{record.trial_id}.json").write_text(json.dumps(doc) + "\n", encoding="utf-8")


# -- batch runner ------------------------------------------------------------

@dataclass
class BenchConfig:
    seed: int = 0
    trials: int = 100
    ranges: PerturbRanges = field(default_factory=PerturbRanges)
    on_grid: bool = True
    degradation: Degradation = field(default_factory=Degradation)
    scene: SceneParams = field(default_factory=SceneParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    workers: int = 1


def trial_inputs(bench: BenchConfig, trial_id: int, seq: np.random.SeedSequence):
    """Scene, true pose, correction and noise stream of one trial, all from its own seed."""
    rng = np.random.default_rng(seq)
    scene = generate_scene(int(rng.integers(2 ** 31)), bench.scene)
    gt_pose = Se2Pose(rng.uniform(-5.0, 5.0), rng.uniform(-0.5, 0.5), math.radians(rng.uniform(-3.0, 3.0)))
    correction = sample_perturbation(rng, bench.ranges, bench.on_grid, bench.solver.grids)
    return scene, gt_pose, correction, rng


def _run_one(args):
    bench, trial_id, seq = args
    scene, gt_pose, correction, rng = trial_inputs(bench, trial_id, seq)
    return run_trial(trial_id, scene, gt_pose, correction, bench.solver, rng, bench.degradation)


def run_bench(bench: BenchConfig) -> list:
    """Run all trials; results are ordered by trial id whatever the worker count."""
    seqs = np.random.SeedSequence(bench.seed).spawn(bench.trials)
    jobs = [(bench, i, s) for i, s in enumerate(seqs)]
    if bench.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(bench.workers) as pool:
            records = list(pool.map(_run_one, jobs, chunksize=8))
    else:
        records = [_run_one(j) for j in jobs]
    return sorted(records, key=lambda r: r.trial_id)


def grids_from_steps(range_x, range_y, range_yaw_deg, step_x, step_y, step_yaw_deg):
    return (
        sample_hypotheses(Axis.LONGITUDINAL, range_x, step_x),
        sample_hypotheses(Axis.LATERAL, range_y, step_y),
        sample_hypotheses(Axis.YAW, math.radians(range_yaw_deg), math.radians(step_yaw_deg)),
    )


def with_grids(config: SolverConfig, grids) -> SolverConfig:
    gx, gy, gyaw = grids
    return replace(config, dema=replace(config.dema, hyps_x=gx, hyps_y=gy, hyps_yaw=gyaw))


__all__ = [
    "SceneParams", "generate_scene", "PerturbRanges", "sample_perturbation", "Degradation",
    "SolverConfig", "TrialRecord", "run_trial", "adaptive_select", "make_refiner", "AdaptiveResult",
    "aggregate", "BenchReport", "BenchConfig", "run_bench", "write_trials_csv", "write_summary",
    "write_probs", "HypothesisGrid", "render_pair", "exact_hit", "grids_from_steps", "with_grids",
]
