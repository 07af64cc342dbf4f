"""Training objective, optimizer and loops.

The per-step objective is closest-anchor classification plus a
bivariate-Gaussian regression on that anchor's residual:
``-(log pi_khat + log N(y | y_prev + a_khat + mu_khat, Sigma_khat))``,
summed over the prediction horizon.  Training runs teacher-forced
(ground-truth inputs every step); only the rollout at evaluation feeds
predictions back.

Also here: a Newton--Raphson maximum-likelihood fit for the rule weights
alone (the beta-only problem is an ordinary multinomial logit, which
gives standard errors from the observed information for free), and the
finite-difference gradient checker.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorConfig, closest_anchor
from .autodiff import Tensor, gather_rows, no_grad
from .dcm import FixedDcmParams
from .geometry import Scene, scene_arrays
from .neural import (
    ModelConfig,
    ModelParams,
    StepOutput,
    forward_batch,
    prepare_step_inputs,
)

LOG_2PI = math.log(2.0 * math.pi)
RHO_GUARD = 1e-6


class NumericError(RuntimeError):
    """A loss or gradient stopped being finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 25
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = None
    teacher_forcing: bool = True
    dcm_only: bool = False
    include_neighbours: bool = False  # train on every full-span pedestrian's loss

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning rate, batch size and epochs must be positive")


@dataclass
class AdamState:
    """First/second moment estimates aligned with the flat parameter view."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(params_vec: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns new parameters."""
    if grads.shape != params_vec.shape or state.m.shape != params_vec.shape:
        raise ValueError("parameter/gradient/state length mismatch")
    if not np.all(np.isfinite(grads)):
        bad = int(np.sum(~np.isfinite(grads)))
        raise NumericError(f"non-finite gradient in {bad} of {grads.size} entries")
    state.step += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = state.m / (1.0 - cfg.beta1 ** state.step)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.step)
    return params_vec - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


# ---------------------------------------------------------------------------
# Log densities and step loss
# ---------------------------------------------------------------------------

def gaussian_log_density(dx, dy, sx, sy, rho):
    """Bivariate normal log-density of a residual (Tensor or ndarray inputs)."""
    one_m_r2 = (1.0 - rho * rho).clip(RHO_GUARD, 2.0) if isinstance(rho, Tensor) else np.clip(
        1.0 - rho * rho, RHO_GUARD, 2.0
    )
    zx = dx / sx
    zy = dy / sy
    z = zx * zx + zy * zy - 2.0 * rho * zx * zy
    log_det = sx.log() + sy.log() + 0.5 * one_m_r2.log() if isinstance(sx, Tensor) else (
        np.log(sx) + np.log(sy) + 0.5 * np.log(one_m_r2)
    )
    return -LOG_2PI - log_det - z / (2.0 * one_m_r2)


def bivariate_log_prob(y, nu, sigma, rho: float) -> float:
    """Log-density of ``y`` under N(nu, Sigma(sigma, rho)); validates bounds."""
    y = np.asarray(y, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or not abs(rho) < 1:
        raise ValueError(f"need sigma > 0 and |rho| < 1, got sigma={sigma}, rho={rho}")
    return float(
        gaussian_log_density(y[0] - nu[0], y[1] - nu[1], sigma[0], sigma[1], float(rho))
    )


def step_loss(step_output: StepOutput, gt_displacement, anchor_set=None, y_prev=(0.0, 0.0)) -> float:
    """Single-step objective for one pedestrian (normalized frame).

    The closest anchor to the ground-truth displacement is penalized via
    its choice log-probability and its residual's Gaussian log-density.
    """
    anchor_set = step_output.anchor_set if anchor_set is None else anchor_set
    gt = np.asarray(gt_displacement, dtype=np.float64)
    y_prev = np.asarray(y_prev, dtype=np.float64)
    khat = closest_anchor(anchor_set, gt)
    res = step_output.residual
    nu = y_prev + anchor_set.displacements[khat] + res.mu[khat]
    log_n = bivariate_log_prob(y_prev + gt, nu, res.sigma[khat], float(res.rho[khat]))
    return float(-(math.log(step_output.probabilities[khat]) + log_n))


# ---------------------------------------------------------------------------
# Scene precomputation (teacher forcing makes every input ground truth,
# so features, grids, anchors and labels are computed once per dataset)
# ---------------------------------------------------------------------------

@dataclass
class ScenePack:
    """Per-scene constants for the batched training forward."""

    scene_id: int
    t_obs: int
    t_pred: int
    vel: np.ndarray  # (S, 2) normalized own velocity per forward step
    grids: np.ndarray  # (S, grid_flat)
    features: np.ndarray  # (S, K, 5)
    khat: np.ndarray  # (S,) closest-anchor label, -1 on warmup steps
    anchor_disp: np.ndarray  # (S, K, 2)
    gt_disp: np.ndarray  # (S, 2) normalized ground-truth displacement
    goal_rel: np.ndarray | None = None  # (S, 2)

    @property
    def n_steps(self) -> int:
        return len(self.vel)

    @property
    def loss_rows(self) -> np.ndarray:
        return np.nonzero(self.khat >= 0)[0]


def pack_scene(
    scene: Scene,
    anchor_cfg: AnchorConfig,
    dcm_params: FixedDcmParams,
    model_cfg: ModelConfig,
    goal: np.ndarray | None = None,
    ped_id: int | None = None,
) -> ScenePack:
    """Precompute one pedestrian's teacher-forced inputs and labels.

    Defaults to the scene's primary; any other pedestrian with a
    full-span track works too (``include_neighbours`` training).
    """
    ped_id = scene.primary_id if ped_id is None else ped_id
    ids, pos, present = scene_arrays(scene)
    pi = int(np.nonzero(ids == ped_id)[0][0])
    if not present[pi].all():
        raise ValueError(
            f"scene {scene.scene_id}: pedestrian {ped_id} lacks a full-span track"
        )
    k = anchor_cfg.n_anchors
    steps = range(1, scene.t_pred - 1)  # local frame index of each forward step
    s = len(steps)
    vel = np.zeros((s, 2))
    grids = np.zeros((s, model_cfg.grid_flat_dim))
    features = np.zeros((s, k, 5))
    khat = np.full(s, -1, dtype=np.int64)
    anchor_disp = np.zeros((s, k, 2))
    gt_disp = np.zeros((s, 2))
    goal_rel = np.zeros((s, 2)) if model_cfg.goal_conditioned else None
    for row, ti in enumerate(steps):
        inp = prepare_step_inputs(
            ids, pos, present, pi, ti, anchor_cfg, dcm_params, model_cfg, goal
        )
        vel[row] = inp.state.vel
        grids[row] = inp.grid_flat
        features[row] = inp.features
        anchor_disp[row] = inp.anchor_set.displacements
        if goal_rel is not None:
            goal_rel[row] = inp.goal_rel
        disp = inp.state.transform.rotate_to_local(pos[pi, ti + 1] - pos[pi, ti])
        gt_disp[row] = disp
        if ti + 1 >= scene.t_obs:
            khat[row] = closest_anchor(inp.anchor_set, disp)
    return ScenePack(
        scene_id=scene.scene_id,
        t_obs=scene.t_obs,
        t_pred=scene.t_pred,
        vel=vel,
        grids=grids,
        features=features,
        khat=khat,
        anchor_disp=anchor_disp,
        gt_disp=gt_disp,
        goal_rel=goal_rel,
    )


def batch_loss(batch: list[ScenePack], params: ModelParams) -> tuple[Tensor, dict]:
    """Summed objective over a batch of equal-horizon scene packs.

    Returns the scalar loss tensor plus numpy stats: per-scene losses,
    loss-step count and classification hits (argmax score == label).
    """
    n_steps = batch[0].n_steps
    if any(p.n_steps != n_steps or p.t_obs != batch[0].t_obs for p in batch):
        raise ValueError("batch must share the same horizon")
    b = len(batch)
    n_h = params.config.hidden_dim
    h, c = Tensor(np.zeros((b, n_h))), Tensor(np.zeros((b, n_h)))
    total = None
    per_scene = np.zeros(b)
    hits, n_loss_steps = 0, 0
    for row in range(n_steps):
        is_loss_row = batch[0].khat[row] >= 0
        out = forward_batch(
            np.stack([p.vel[row] for p in batch]),
            np.stack([p.grids[row] for p in batch]),
            np.stack([p.features[row] for p in batch]),
            np.stack([p.goal_rel[row] for p in batch]) if batch[0].goal_rel is not None else None,
            h,
            c,
            params,
            scores_needed=is_loss_row,
        )
        h, c = out["h"], out["c"]
        if not is_loss_row:
            continue
        khat = np.array([p.khat[row] for p in batch])
        gt = np.stack([p.gt_disp[row] for p in batch])
        a_hat = np.stack([p.anchor_disp[row][p.khat[row]] for p in batch])
        log_pi_hat = gather_rows(out["log_probs"], khat)

        raw = out["decoder_raw"]  # (B, K*5), per-anchor [mx, my, lsx, lsy, r]
        cols = khat * 5
        mu_x = gather_rows(raw, cols)
        mu_y = gather_rows(raw, cols + 1)
        sx = gather_rows(raw, cols + 2).exp().clip(params.config.sigma_min, params.config.sigma_max)
        sy = gather_rows(raw, cols + 3).exp().clip(params.config.sigma_min, params.config.sigma_max)
        rho = params.config.rho_scale * gather_rows(raw, cols + 4).tanh()
        log_n = gaussian_log_density(
            Tensor(gt[:, 0] - a_hat[:, 0]) - mu_x,
            Tensor(gt[:, 1] - a_hat[:, 1]) - mu_y,
            sx,
            sy,
            rho,
        )
        step_losses = -(log_pi_hat + log_n)
        total = step_losses.sum() if total is None else total + step_losses.sum()
        per_scene += step_losses.data
        hits += int(np.sum(np.argmax(out["scores"].data, axis=1) == khat))
        n_loss_steps += b
    stats = {"per_scene": per_scene, "hits": hits, "n_loss_steps": n_loss_steps}
    return total, stats


def gradient(params: ModelParams, batch: list[ScenePack], dcm_only: bool = False) -> tuple[np.ndarray, float, dict]:
    """Flat gradient of the batch objective (beta-only when ``dcm_only``)."""
    if not batch or all(len(p.loss_rows) == 0 for p in batch):
        return np.zeros(params.n_params), 0.0, {"per_scene": np.zeros(len(batch)), "hits": 0, "n_loss_steps": 0}
    params.zero_grad()
    loss, stats = batch_loss(batch, params)
    if not np.isfinite(loss.data):
        bad = [p.scene_id for i, p in enumerate(batch) if not np.isfinite(stats["per_scene"][i])]
        raise NumericError(f"non-finite loss in scenes {bad}")
    loss.backward()
    grad = params.flat_gradient()
    if dcm_only:
        mask = np.zeros_like(grad)
        mask[params.group_slices()["beta"]] = 1.0
        grad = grad * mask
    return grad, float(loss.data), stats


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,accuracy,seconds\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.mean_loss:.6f},{r.accuracy:.6f},{r.seconds:.3f}\n")


def zero_nn_components(params: ModelParams) -> None:
    """Freeze heads and residual decoder at zero effect (beta-only mode)."""
    for name in ("motion_w", "motion_b", "inter_w", "inter_b", "dec_w", "dec_b"):
        params.tensors[name].data = np.zeros_like(params.tensors[name].data)


def train(
    scenes: list[Scene],
    params: ModelParams,
    cfg: TrainConfig,
    anchor_cfg: AnchorConfig,
    dcm_params: FixedDcmParams,
    goals: dict[int, np.ndarray] | None = None,
) -> TrainLog:
    """Teacher-forced training over shuffled fixed-size batches.

    ``goals`` maps scene id to the primary's goal when the model is
    goal-conditioned.  Parameters are updated in place.
    """
    if cfg.include_neighbours and params.config.goal_conditioned:
        raise ValueError("include_neighbours training has no per-neighbour goals")
    packs = []
    for s in scenes:
        goal = None if goals is None else goals.get(s.scene_id)
        ped_ids = [s.primary_id]
        if cfg.include_neighbours:
            _ids, _pos, present = scene_arrays(s)
            ped_ids = [
                tr.ped_id for i, tr in enumerate(s.trajectories) if present[i].all()
            ]
        packs.extend(
            pack_scene(s, anchor_cfg, dcm_params, params.config, goal, ped)
            for ped in ped_ids
        )
    if cfg.dcm_only:
        zero_nn_components(params)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros(params.n_params)
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(packs))
        epoch_loss, hits, steps = 0.0, 0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chosen = [packs[i] for i in order[lo : lo + cfg.batch_size]]
            # group by horizon so batches stack cleanly
            for batch in _split_by_horizon(chosen):
                grad, loss, stats = gradient(params, batch, dcm_only=cfg.dcm_only)
                if cfg.clip_norm is not None:
                    norm = float(np.linalg.norm(grad))
                    if norm > cfg.clip_norm:
                        grad = grad * (cfg.clip_norm / norm)
                params.load_flat(adam_step(params.flatten(), grad, state, cfg))
                epoch_loss += loss
                hits += stats["hits"]
                steps += stats["n_loss_steps"]
        log.records.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=epoch_loss / max(len(packs), 1),
                accuracy=hits / max(steps, 1),
                seconds=time.perf_counter() - start,
            )
        )
    return log


def _split_by_horizon(packs: list[ScenePack]) -> list[list[ScenePack]]:
    groups: dict[tuple[int, int], list[ScenePack]] = {}
    for p in packs:
        groups.setdefault((p.t_obs, p.t_pred), []).append(p)
    return list(groups.values())


# ---------------------------------------------------------------------------
# Beta-only maximum likelihood (multinomial logit on logged choices)
# ---------------------------------------------------------------------------

@dataclass
class MnlFit:
    beta: np.ndarray  # (5,)
    std_err: np.ndarray  # (5,)
    log_likelihood: float
    n_obs: int
    n_iter: int
    converged: bool


def mnl_log_likelihood(beta: np.ndarray, features: np.ndarray, chosen: np.ndarray) -> float:
    """Log-likelihood of logged (features, choice) pairs under softmax(F beta)."""
    u = features @ beta  # (N, K)
    u = u - u.max(axis=1, keepdims=True)
    return float(np.sum(u[np.arange(len(chosen)), chosen] - np.log(np.exp(u).sum(axis=1))))


def _mnl_probs(beta: np.ndarray, features: np.ndarray) -> np.ndarray:
    u = features @ beta
    u = u - u.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def mnl_information(features: np.ndarray, chosen: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Observed information matrix of the choice log-likelihood at ``beta``."""
    pi = _mnl_probs(beta, features)
    x_bar = np.einsum("nk,nkp->np", pi, features)
    return np.einsum("nk,nkp,nkq->pq", pi, features, features) - np.einsum(
        "np,nq->pq", x_bar, x_bar
    )


def fit_mnl(features: np.ndarray, chosen: np.ndarray, max_iter: int = 100, tol: float = 1e-10) -> MnlFit:
    """Newton--Raphson MLE of the rule weights from logged choices.

    ``features`` is (N, K, 5); ``chosen`` the selected anchor index per
    observation.  Standard errors come from the inverse observed
    information at the optimum.  A tiny ridge keeps the information
    matrix invertible when a feature column never varies.
    """
    n, _k, p = features.shape
    chosen = np.asarray(chosen, dtype=np.int64)
    beta = np.zeros(p)
    ll = mnl_log_likelihood(beta, features, chosen)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pi = _mnl_probs(beta, features)
        x_bar = np.einsum("nk,nkp->np", pi, features)
        grad = (features[np.arange(n), chosen] - x_bar).sum(axis=0)
        info = mnl_information(features, chosen, beta) + 1e-10 * np.eye(p)
        step = np.linalg.solve(info, grad)
        new_beta = beta + step
        new_ll = mnl_log_likelihood(new_beta, features, chosen)
        # halve on the rare overshoot; the problem is globally concave
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step *= 0.5
            new_beta = beta + step
            new_ll = mnl_log_likelihood(new_beta, features, chosen)
            halvings += 1
        beta, improved = new_beta, new_ll - ll
        ll = new_ll
        if abs(improved) < tol and float(np.max(np.abs(step))) < 1e-8:
            converged = True
            break
    cov = np.linalg.inv(mnl_information(features, chosen, beta) + 1e-10 * np.eye(p))
    return MnlFit(
        beta=beta,
        std_err=np.sqrt(np.maximum(np.diag(cov), 0.0)),
        log_likelihood=ll,
        n_obs=n,
        n_iter=it,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def gradient_check(
    params: ModelParams,
    batch: list[ScenePack],
    seed: int = 0,
    n_slices: int = 10,
    fd_step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error of the analytic gradient per parameter group.

    Central differences with the given step on ``n_slices`` random
    entries per group.  Relative error uses a small absolute floor so
    near-zero gradient pairs compare by absolute difference.
    """
    rng = np.random.default_rng(seed)
    analytic, _loss, _stats = gradient(params, batch)
    theta = params.flatten()

    def loss_at(vec: np.ndarray) -> float:
        params.load_flat(vec)
        with no_grad():
            value, _ = batch_loss(batch, params)
        return float(value.data)

    report = {}
    try:
        for group, idx_pool in params.group_slices().items():
            worst = 0.0
            picks = rng.choice(idx_pool, size=min(n_slices, len(idx_pool)), replace=False)
            for idx in picks:
                bumped = theta.copy()
                bumped[idx] = theta[idx] + fd_step
                up = loss_at(bumped)
                bumped[idx] = theta[idx] - fd_step
                down = loss_at(bumped)
                fd = (up - down) / (2.0 * fd_step)
                a = analytic[idx]
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-3))
            report[group] = worst
    finally:
        params.load_flat(theta)
    return report
