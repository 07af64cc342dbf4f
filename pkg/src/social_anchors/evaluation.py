"""Autoregressive rollout and the four benchmark metrics.

Testing feeds ground truth through the observation horizon, then feeds
each pedestrian's own prediction (most-probable anchor plus its residual
mean, rotated back to world coordinates) into the next step.  All
pedestrians advance jointly; neighbours whose state cannot be formed
(absent frames) drop out of the predicted scene.

Metrics: ADE/FDE on the primary pedestrian, prediction-collision rate
(Col-I) against the predicted neighbours, and Top-3 ADE/FDE where the
three modes differ in the primary's first-step anchor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .anchors import AnchorConfig
from .autodiff import Tensor, no_grad
from .dcm import FixedDcmParams
from .geometry import Scene, scene_arrays, to_world
from .neural import ModelParams, forward_batch, prepare_step_inputs, split_decoder_raw
from .util import parallel_map

COLLISION_THRESHOLD = 0.2  # m, two body radii
COLLISION_SUBSTEPS = 4


@dataclass
class PredictedScene:
    """Joint prediction for one scene, ground truth kept for scoring."""

    scene: Scene
    ids: np.ndarray  # (N,)
    positions: np.ndarray  # (N, T, 2): ground truth through t_obs, predictions after
    present: np.ndarray  # (N, T) bool

    def track(self, ped_id: int) -> tuple[np.ndarray, np.ndarray]:
        i = int(np.nonzero(self.ids == ped_id)[0][0])
        return self.positions[i], self.present[i]

    def primary_prediction(self) -> np.ndarray:
        """(t_pred - t_obs, 2) predicted positions of the primary."""
        pos, _ = self.track(self.scene.primary_id)
        return pos[self.scene.t_obs :].copy()

    def primary_ground_truth(self) -> np.ndarray:
        ids, pos, _ = scene_arrays(self.scene)
        i = int(np.nonzero(ids == self.scene.primary_id)[0][0])
        return pos[i, self.scene.t_obs :].copy()


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean L2 error over the prediction steps."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """L2 error at the final prediction step."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def scene_collides(
    pred: PredictedScene,
    threshold: float = COLLISION_THRESHOLD,
    substeps: int = COLLISION_SUBSTEPS,
) -> bool:
    """Primary-vs-neighbour separation check on the predicted scene.

    Linear interpolation with ``substeps`` samples per step, over the
    segments from the last observed frame onwards.  Only spans where
    both tracks are present count.
    """
    scene = pred.scene
    lo = scene.t_obs - 1  # last observed frame, local index
    p_pos, _ = pred.track(scene.primary_id)
    for i, pid in enumerate(pred.ids):
        if pid == scene.primary_id:
            continue
        ok = pred.present[i]
        start = lo
        while start < scene.t_pred:
            if not ok[start]:
                start += 1
                continue
            stop = start
            while stop + 1 < scene.t_pred and ok[stop + 1]:
                stop += 1
            d = kernels.min_interp_distance(
                np.ascontiguousarray(p_pos[start : stop + 1]),
                np.ascontiguousarray(pred.positions[i, start : stop + 1]),
                substeps,
            )
            if d < threshold:
                return True
            start = stop + 1
    return False


def col_i(predictions: list[PredictedScene], threshold: float = COLLISION_THRESHOLD,
          substeps: int = COLLISION_SUBSTEPS) -> float:
    """Percentage of predicted scenes with a primary-neighbour collision."""
    if not predictions:
        return 0.0
    flagged = sum(scene_collides(p, threshold, substeps) for p in predictions)
    return 100.0 * flagged / len(predictions)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

def greedy_anchor(probs: np.ndarray, displacements: np.ndarray, current_disp: np.ndarray) -> int:
    """Most-probable anchor; exact ties prefer the continuation anchor.

    Ties (exactly equal probabilities, e.g. a zero model) resolve to the
    anchor closest to the current per-step displacement, then to the
    lowest index, so an uninformed model extrapolates constant velocity.
    """
    ties = np.nonzero(probs == probs.max())[0]
    if len(ties) == 1:
        return int(ties[0])
    d = displacements[ties] - current_disp
    return int(ties[np.argmin(np.einsum("kj,kj->k", d, d))])


def ranked_anchors(probs: np.ndarray, displacements: np.ndarray, current_disp: np.ndarray) -> np.ndarray:
    """All anchors ordered by descending probability, greedy choice first."""
    d = displacements - current_disp
    dist = np.einsum("kj,kj->k", d, d)
    order = sorted(range(len(probs)), key=lambda k: (-probs[k], dist[k], k))
    return np.asarray(order, dtype=np.int64)


class AnchorModelPredictor:
    """Rollout wrapper around a trained anchor model."""

    def __init__(
        self,
        params: ModelParams,
        anchor_cfg: AnchorConfig,
        dcm_params: FixedDcmParams,
        neighbour_replay: bool = False,
        goals: dict[int, dict[int, np.ndarray]] | None = None,
    ):
        self.params = params
        self.anchor_cfg = anchor_cfg
        self.dcm_params = dcm_params
        self.neighbour_replay = neighbour_replay
        self.goals = goals

    def predict(self, scene: Scene) -> PredictedScene:
        return self._rollout(scene, mode_rank=0)

    def predict_topk(self, scene: Scene, k: int = 3) -> list[PredictedScene]:
        if k > self.anchor_cfg.n_anchors:
            raise ValueError(f"k={k} exceeds the {self.anchor_cfg.n_anchors}-anchor grid")
        return [self._rollout(scene, mode_rank=j) for j in range(k)]

    def _rollout(self, scene: Scene, mode_rank: int) -> PredictedScene:
        ids, gt_pos, gt_present = scene_arrays(scene)
        pos, present = gt_pos.copy(), gt_present.copy()
        scene_goals = self.goals.get(scene.scene_id, {}) if self.goals is not None else {}
        n_h = self.params.config.hidden_dim
        hidden = {int(pid): (np.zeros(n_h), np.zeros(n_h)) for pid in ids}
        k_anchors = self.params.n_anchors
        with no_grad():
            for ti in range(1, scene.t_pred - 1):
                predicting = ti >= scene.t_obs - 1
                if predicting and not self.neighbour_replay:
                    # anything not explicitly advanced below leaves the scene
                    present[:, ti + 1] = False
                active = [
                    b for b in range(len(ids)) if present[b, ti] and present[b, ti - 1]
                ]
                if not active:
                    continue
                inputs = [
                    prepare_step_inputs(
                        ids, pos, present, b, ti, self.anchor_cfg, self.dcm_params,
                        self.params.config, scene_goals.get(int(ids[b])),
                    )
                    for b in active
                ]
                out = forward_batch(
                    np.stack([s.state.vel for s in inputs]),
                    np.stack([s.grid_flat for s in inputs]),
                    np.stack([s.features for s in inputs]),
                    np.stack([s.goal_rel for s in inputs])
                    if self.params.config.goal_conditioned
                    else None,
                    Tensor(np.stack([hidden[int(ids[b])][0] for b in active])),
                    Tensor(np.stack([hidden[int(ids[b])][1] for b in active])),
                    self.params,
                    scores_needed=predicting,
                )
                for row, b in enumerate(active):
                    hidden[int(ids[b])] = (out["h"].data[row].copy(), out["c"].data[row].copy())
                if not predicting:
                    continue
                log_probs = out["log_probs"].data
                for row, b in enumerate(active):
                    pid = int(ids[b])
                    if self.neighbour_replay and pid != scene.primary_id:
                        continue
                    inp = inputs[row]
                    probs = np.exp(log_probs[row])
                    if ti == scene.t_obs - 1 and pid == scene.primary_id and mode_rank > 0:
                        order = ranked_anchors(probs, inp.anchor_set.displacements, inp.state.vel)
                        choice = int(order[mode_rank])
                    else:
                        choice = greedy_anchor(probs, inp.anchor_set.displacements, inp.state.vel)
                    residual = split_decoder_raw(
                        out["decoder_raw"].data[row], k_anchors, self.params.config
                    )
                    disp = inp.anchor_set.displacements[choice] + residual.mu[choice]
                    pos[b, ti + 1] = pos[b, ti] + to_world(inp.state.transform, disp)
                    present[b, ti + 1] = True
        return PredictedScene(scene=scene, ids=ids, positions=pos, present=present)


def rollout(predictor, scene: Scene) -> PredictedScene:
    """Greedy joint rollout over the prediction horizon."""
    return predictor.predict(scene)


def topk_rollout(predictor, scene: Scene, k: int = 3) -> list[PredictedScene]:
    """K modes differing in the primary's first-step anchor; mode 0 is greedy."""
    return predictor.predict_topk(scene, k)


class ConstantVelocityPredictor:
    """Every pedestrian keeps its last observed velocity (unimodal)."""

    def predict(self, scene: Scene) -> PredictedScene:
        ids, pos, present = scene_arrays(scene)
        pos, present = pos.copy(), present.copy()
        lo = scene.t_obs - 1
        for b in range(len(ids)):
            if present[b, lo] and present[b, lo - 1]:
                v = pos[b, lo] - pos[b, lo - 1]
                steps = np.arange(1, scene.t_pred - lo)
                pos[b, lo + 1 :] = pos[b, lo] + steps[:, None] * v
                present[b, lo + 1 :] = True
            else:
                present[b, lo + 1 :] = False
        return PredictedScene(scene=scene, ids=ids, positions=pos, present=present)

    def predict_topk(self, scene: Scene, k: int = 3) -> list[PredictedScene]:
        return [self.predict(scene)]


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class SceneMetrics:
    scene_id: int
    ade: float
    fde: float
    collided: bool
    top3_ade: float
    top3_fde: float


@dataclass
class MetricsReport:
    ade: float
    fde: float
    col_i: float  # percent
    top3_ade: float
    top3_fde: float
    n_scenes: int
    per_scene: list[SceneMetrics] = field(repr=False, default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("scene_id,ade,fde,collided,top3_ade,top3_fde\n")
            for m in self.per_scene:
                fh.write(
                    f"{m.scene_id},{m.ade:.6f},{m.fde:.6f},{int(m.collided)},"
                    f"{m.top3_ade:.6f},{m.top3_fde:.6f}\n"
                )
            fh.write(
                f"aggregate,{self.ade:.6f},{self.fde:.6f},{self.col_i:.6f},"
                f"{self.top3_ade:.6f},{self.top3_fde:.6f}\n"
            )


_EVAL_CTX: dict = {}


def _score_scene(index: int) -> SceneMetrics:
    """Score one scene using the context stashed by :func:`evaluate`.

    Module-level so fork-based workers reach it by name; forked children
    inherit the context without pickling the predictor.
    """
    ctx = _EVAL_CTX
    scene = ctx["scenes"][index]
    modes = ctx["predictor"].predict_topk(scene, ctx["top_k"])
    pred = modes[0]  # mode 1 is the greedy rollout
    gt = pred.primary_ground_truth()
    mode_ades = [ade(m.primary_prediction(), gt) for m in modes]
    best = int(np.argmin(mode_ades))
    return SceneMetrics(
        scene_id=scene.scene_id,
        ade=ade(pred.primary_prediction(), gt),
        fde=fde(pred.primary_prediction(), gt),
        collided=scene_collides(pred, ctx["threshold"], ctx["substeps"]),
        top3_ade=mode_ades[best],
        top3_fde=fde(modes[best].primary_prediction(), gt),
    )


def evaluate(
    predictor,
    scenes: list[Scene],
    top_k: int = 3,
    threshold: float = COLLISION_THRESHOLD,
    substeps: int = COLLISION_SUBSTEPS,
    threads: int = 1,
) -> MetricsReport:
    """All four metrics over a dataset.

    Top-3 scores come from the mode with the lowest ADE against ground
    truth (its FDE is reported alongside).
    """
    if not scenes:
        raise ValueError("evaluate needs a non-empty dataset")
    _EVAL_CTX.update(
        predictor=predictor, scenes=scenes, top_k=top_k, threshold=threshold, substeps=substeps
    )
    try:
        rows = parallel_map(_score_scene, range(len(scenes)), threads)
    finally:
        _EVAL_CTX.clear()
    return MetricsReport(
        ade=float(np.mean([m.ade for m in rows])),
        fde=float(np.mean([m.fde for m in rows])),
        col_i=100.0 * sum(m.collided for m in rows) / len(rows),
        top3_ade=float(np.mean([m.top3_ade for m in rows])),
        top3_fde=float(np.mean([m.top3_fde for m in rows])),
        n_scenes=len(rows),
        per_scene=rows,
    )


def metrics_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned text table in the ADE/FDE, Col-I, Top-3 ADE/FDE column order."""
    header = ("Model", "ADE/FDE", "Col-I", "Top-3 ADE/FDE")
    body = [
        (
            name,
            f"{r.ade:.2f}/{r.fde:.2f}",
            f"{r.col_i:.1f}",
            f"{r.top3_ade:.2f}/{r.top3_fde:.2f}",
        )
        for name, r in rows
    ]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(4)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(row, widths)).rstrip() for row in [header, *body]]
    return "\n".join(lines) + "\n"
