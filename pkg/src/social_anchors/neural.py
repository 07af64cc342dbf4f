"""Learned model components and the per-step forward pass.

The network consumes only normalized-frame quantities, which is what
makes every prediction invariant to rigid motions of the raw scene:

* velocity embedding (2 -> 64, rectified affine),
* directional pooling grid (16 x 16 x 2 relative velocities) encoded to
  a 256-d interaction vector,
* a shared LSTM cell over the concatenated embeddings (hidden 256),
* two linear anchor-logit heads (motion from the hidden state,
  interaction from the pooling vector),
* a residual decoder mapping the hidden state to a bivariate-Gaussian
  refinement (mu, sigma, rho) per anchor.

Anchor scores are ``s = u + h + p``: hand-crafted utility plus the two
neural logit maps.  All parameters expose a stable flat-vector view used
by the optimizer, the gradient checker and the checkpoint format.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .anchors import AnchorConfig, AnchorSet, build_anchor_set
from .autodiff import Tensor, affine, concat, log_softmax
from .dcm import BetaWeights, FixedDcmParams, compute_features
from .geometry import NormalizedState, Scene, normalize_arrays_at, scene_arrays

CHECKPOINT_MAGIC = b"SANCHOR1"


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and squashing bounds of the learned components."""

    embedding_dim: int = 64
    interaction_dim: int = 256
    hidden_dim: int = 256
    grid_cells: int = 16
    grid_resolution: float = 0.6
    goal_conditioned: bool = False
    sigma_min: float = 1e-3
    sigma_max: float = 5.0
    rho_scale: float = 0.99

    @property
    def grid_flat_dim(self) -> int:
        return self.grid_cells * self.grid_cells * 2

    @property
    def lstm_input_dim(self) -> int:
        extra = self.embedding_dim if self.goal_conditioned else 0
        return self.embedding_dim + self.interaction_dim + extra


PARAM_GROUPS = ("embedding", "pooling", "recurrent", "decoder", "heads", "beta")


class ModelParams:
    """All learnable parameters, addressable as named tensors or one flat vector."""

    def __init__(self, config: ModelConfig, n_anchors: int, tensors: dict[str, Tensor]):
        self.config = config
        self.n_anchors = n_anchors
        self.tensors = tensors

    @staticmethod
    def _spec(config: ModelConfig, n_anchors: int) -> list[tuple[str, str, tuple[int, ...]]]:
        """(name, group, shape) triples in flat-vector order."""
        e, i, h = config.embedding_dim, config.interaction_dim, config.hidden_dim
        k = n_anchors
        entries = [
            ("emb_w", "embedding", (2, e)),
            ("emb_b", "embedding", (e,)),
        ]
        if config.goal_conditioned:
            entries += [("goal_w", "embedding", (2, e)), ("goal_b", "embedding", (e,))]
        entries += [
            ("pool_w", "pooling", (config.grid_flat_dim, i)),
            ("pool_b", "pooling", (i,)),
            ("lstm_w", "recurrent", (config.lstm_input_dim, 4 * h)),
            ("lstm_u", "recurrent", (h, 4 * h)),
            ("lstm_b", "recurrent", (4 * h,)),
            ("dec_w", "decoder", (h, k * 5)),
            ("dec_b", "decoder", (k * 5,)),
            ("motion_w", "heads", (h, k)),
            ("motion_b", "heads", (k,)),
            ("inter_w", "heads", (i, k)),
            ("inter_b", "heads", (k,)),
            ("beta", "beta", (5,)),
        ]
        return entries

    @classmethod
    def init(cls, config: ModelConfig, n_anchors: int, seed: int) -> "ModelParams":
        """Seeded init: uniform +/- 1/sqrt(fan_in) everywhere, beta at zero."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, _group, shape in cls._spec(config, n_anchors):
            if name == "beta":
                data = np.zeros(shape)
            else:
                fan_in = shape[0] if len(shape) == 2 else _bias_fan_in(name, config)
                bound = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, n_anchors, tensors)

    @classmethod
    def zeros(cls, config: ModelConfig, n_anchors: int) -> "ModelParams":
        tensors = {
            name: Tensor(np.zeros(shape), requires_grad=True)
            for name, _g, shape in cls._spec(config, n_anchors)
        }
        return cls(config, n_anchors, tensors)

    def __getattr__(self, name: str) -> Tensor:
        try:
            return self.__dict__["tensors"][name]
        except KeyError:
            raise AttributeError(name) from None

    # -- flat view -----------------------------------------------------------

    def layout(self) -> list[dict]:
        out, offset = [], 0
        for name, group, shape in self._spec(self.config, self.n_anchors):
            size = int(np.prod(shape))
            out.append({"name": name, "group": group, "shape": list(shape), "offset": offset})
            offset += size
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _n, _g, s in self._spec(self.config, self.n_anchors))

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.tensors[e["name"]].data.ravel() for e in self.layout()]
        )

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        for entry in self.layout():
            size = int(np.prod(entry["shape"]))
            chunk = vec[entry["offset"] : entry["offset"] + size]
            self.tensors[entry["name"]].data = chunk.reshape(entry["shape"]).copy()

    def flat_gradient(self) -> np.ndarray:
        parts = []
        for entry in self.layout():
            t = self.tensors[entry["name"]]
            parts.append((t.grad if t.grad is not None else np.zeros_like(t.data)).ravel())
        return np.concatenate(parts)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def group_slices(self) -> dict[str, np.ndarray]:
        """Flat-vector index arrays per parameter group."""
        out = {g: [] for g in PARAM_GROUPS}
        for entry in self.layout():
            size = int(np.prod(entry["shape"]))
            out[entry["group"]].append(np.arange(entry["offset"], entry["offset"] + size))
        return {g: np.concatenate(v) for g, v in out.items() if v}

    @property
    def beta_weights(self) -> BetaWeights:
        return BetaWeights.from_array(self.tensors["beta"].data)


def _bias_fan_in(name: str, config: ModelConfig) -> int:
    """Fan-in of the layer a bias vector belongs to."""
    return {
        "emb_b": 2,
        "goal_b": 2,
        "pool_b": config.grid_flat_dim,
        "lstm_b": config.lstm_input_dim + config.hidden_dim,
        "dec_b": config.hidden_dim,
        "motion_b": config.hidden_dim,
        "inter_b": config.interaction_dim,
    }[name]


# ---------------------------------------------------------------------------
# Forward components (batch-first Tensors)
# ---------------------------------------------------------------------------

def embed_velocity(v: Tensor, params: ModelParams) -> Tensor:
    """(B, 2) velocities -> (B, 64) rectified embedding."""
    return affine(v, params.emb_w, params.emb_b).relu()


def embed_goal(goal_rel: Tensor, params: ModelParams) -> Tensor:
    return affine(goal_rel, params.goal_w, params.goal_b).relu()


def encode_interactions(grid_flat: Tensor, params: ModelParams) -> Tensor:
    """(B, 512) flattened pooling grids -> (B, 256) interaction vectors."""
    return affine(grid_flat, params.pool_w, params.pool_b).relu()


def directional_pooling(state: NormalizedState, params: ModelParams) -> np.ndarray:
    """One pedestrian's 256-d interaction vector from its normalized state."""
    cfg = params.config
    grid = kernels.pool_grid(
        np.ascontiguousarray(state.neighbor_pos),
        np.ascontiguousarray(state.neighbor_vel - state.vel),
        cfg.grid_cells,
        cfg.grid_resolution,
    )
    return encode_interactions(Tensor(grid.ravel()[None, :]), params).data[0]


def lstm_step(h: Tensor, c: Tensor, x: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """One gated recurrent update; gate order [input, forget, cell, output]."""
    n = params.config.hidden_dim
    z = x @ params.lstm_w + h @ params.lstm_u + params.lstm_b
    i = z[:, 0 * n : 1 * n].sigmoid()
    f = z[:, 1 * n : 2 * n].sigmoid()
    g = z[:, 2 * n : 3 * n].tanh()
    o = z[:, 3 * n : 4 * n].sigmoid()
    c_new = f * c + i * g
    return o * c_new.tanh(), c_new


def decode_raw(h: Tensor, params: ModelParams) -> Tensor:
    """(B, K*5) raw residual outputs, per-anchor layout [mx, my, lsx, lsy, r]."""
    return affine(h, params.dec_w, params.dec_b)


def anchor_logit_heads(h: Tensor, p: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Motion logits from the hidden state, interaction logits from the pooling vector."""
    return (
        affine(h, params.motion_w, params.motion_b),
        affine(p, params.inter_w, params.inter_b),
    )


def utilities_from_features(features: np.ndarray, params: ModelParams) -> Tensor:
    """(B, K, 5) constant feature tables -> (B, K) utility tensor."""
    beta = params.beta
    total = None
    for j in range(5):
        term = beta[j] * Tensor(features[:, :, j])
        total = term if total is None else total + term
    return total


def squash_sigma(log_sigma: Tensor, config: ModelConfig) -> Tensor:
    return log_sigma.exp().clip(config.sigma_min, config.sigma_max)


def squash_rho(raw: Tensor, config: ModelConfig) -> Tensor:
    return config.rho_scale * raw.tanh()


# ---------------------------------------------------------------------------
# Per-pedestrian step API
# ---------------------------------------------------------------------------

@dataclass
class StepInputs:
    """Constant (non-learned) inputs of one pedestrian's forward step."""

    state: NormalizedState
    anchor_set: AnchorSet
    features: np.ndarray  # (K, 5)
    grid_flat: np.ndarray  # (grid_flat_dim,)
    goal_rel: np.ndarray | None = None  # (2,) normalized frame


@dataclass
class ResidualParams:
    """Per-anchor bivariate-Gaussian refinement."""

    mu: np.ndarray  # (K, 2)
    sigma: np.ndarray  # (K, 2)
    rho: np.ndarray  # (K,)


@dataclass
class StepOutput:
    """Everything one forward step says about one pedestrian."""

    scores: np.ndarray  # (K,)
    probabilities: np.ndarray  # (K,)
    utilities: np.ndarray  # (K,)
    motion_logits: np.ndarray  # (K,)
    interaction_logits: np.ndarray  # (K,)
    residual: ResidualParams
    anchor_set: AnchorSet
    state: NormalizedState
    features: np.ndarray = field(repr=False)  # (K, 5)


def prepare_step_inputs(
    ids: np.ndarray,
    pos: np.ndarray,
    present: np.ndarray,
    ped_index: int,
    ti: int,
    anchor_cfg: AnchorConfig,
    dcm_params: FixedDcmParams,
    model_cfg: ModelConfig,
    goal: np.ndarray | None = None,
) -> StepInputs:
    """Normalize, build anchors, features and the pooling grid for one step."""
    state = normalize_arrays_at(ids, pos, present, ped_index, ti)
    anchor_set = build_anchor_set(state.speed, anchor_cfg)
    features = compute_features(state, anchor_set, dcm_params)
    rel_vel = state.neighbor_vel - state.vel
    grid = kernels.pool_grid(
        np.ascontiguousarray(state.neighbor_pos),
        np.ascontiguousarray(rel_vel),
        model_cfg.grid_cells,
        model_cfg.grid_resolution,
    )
    goal_rel = None
    if model_cfg.goal_conditioned:
        if goal is None:
            raise ValueError("goal-conditioned model needs a goal position per pedestrian")
        goal_rel = state.transform.to_local(goal)
    return StepInputs(
        state=state,
        anchor_set=anchor_set,
        features=features,
        grid_flat=grid.ravel(),
        goal_rel=goal_rel,
    )


def forward_batch(
    vel: np.ndarray,
    grids: np.ndarray,
    features: np.ndarray,
    goal_rel: np.ndarray | None,
    h: Tensor,
    c: Tensor,
    params: ModelParams,
    scores_needed: bool = True,
) -> dict:
    """Shared-weights forward over a batch of pedestrians/scenes.

    Inputs are (B, ...) constant arrays in each pedestrian's normalized
    frame.  Returns the updated hidden pair plus, when ``scores_needed``,
    the per-step tensors (``scores``, ``log_probs``, ``utilities``,
    ``motion``, ``interaction``, ``decoder_raw``).  Warmup steps of the
    training loop only advance the recurrence.
    """
    e = embed_velocity(Tensor(vel), params)
    p_vec = encode_interactions(Tensor(grids), params)
    parts = [e, p_vec]
    if params.config.goal_conditioned:
        if goal_rel is None:
            raise ValueError("goal-conditioned model needs goal inputs")
        parts.append(embed_goal(Tensor(goal_rel), params))
    h_new, c_new = lstm_step(h, c, concat(parts, axis=1), params)
    out = {"h": h_new, "c": c_new}
    if not scores_needed:
        return out

    u = utilities_from_features(features, params)
    motion, interaction = anchor_logit_heads(h_new, p_vec, params)
    scores = u + motion + interaction
    out.update(
        utilities=u,
        motion=motion,
        interaction=interaction,
        scores=scores,
        log_probs=log_softmax(scores, axis=1),
        decoder_raw=decode_raw(h_new, params),
    )
    return out


def split_decoder_raw(raw: np.ndarray, n_anchors: int, config: ModelConfig) -> ResidualParams:
    """Numpy twin of the residual squashing, for inference outputs."""
    r = raw.reshape(n_anchors, 5)
    sigma = np.clip(np.exp(r[:, 2:4]), config.sigma_min, config.sigma_max)
    return ResidualParams(mu=r[:, 0:2].copy(), sigma=sigma, rho=config.rho_scale * np.tanh(r[:, 4]))


def decode_residuals(h: np.ndarray, params: ModelParams) -> ResidualParams:
    """One pedestrian's per-anchor Gaussian refinements from its hidden state."""
    raw = decode_raw(Tensor(np.asarray(h)[None, :]), params)
    return split_decoder_raw(raw.data[0], params.n_anchors, params.config)


def forward_step(
    scene: Scene,
    t: int,
    hidden: dict[int, tuple[np.ndarray, np.ndarray]],
    params: ModelParams,
    anchor_cfg: AnchorConfig,
    dcm_params: FixedDcmParams,
    ped_ids: list[int] | None = None,
    goals: dict[int, np.ndarray] | None = None,
) -> tuple[dict[int, StepOutput], dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Run one forward step at frame ``t`` for the given pedestrians.

    ``hidden`` maps pedestrian id to its (h, c) vectors; missing entries
    start at zero.  Defaults to every pedestrian present at ``t-1`` and
    ``t``.  Returns per-pedestrian outputs and the updated hidden map.
    """
    ids, pos, present = scene_arrays(scene)
    ti = t - scene.start_frame
    both = present[:, ti] & present[:, ti - 1] if ti >= 1 else np.zeros(len(ids), dtype=bool)
    if ped_ids is None:
        ped_ids = [int(i) for i in ids[both]]
    inputs = []
    for pid in ped_ids:
        idx = int(np.nonzero(ids == pid)[0][0])
        goal = None if goals is None else goals.get(pid)
        inputs.append(
            prepare_step_inputs(ids, pos, present, idx, ti, anchor_cfg, dcm_params, params.config, goal)
        )
    if not inputs:
        return {}, dict(hidden)

    n_h = params.config.hidden_dim
    h0 = np.stack([hidden.get(pid, (np.zeros(n_h), np.zeros(n_h)))[0] for pid in ped_ids])
    c0 = np.stack([hidden.get(pid, (np.zeros(n_h), np.zeros(n_h)))[1] for pid in ped_ids])
    out = forward_batch(
        np.stack([s.state.vel for s in inputs]),
        np.stack([s.grid_flat for s in inputs]),
        np.stack([s.features for s in inputs]),
        np.stack([s.goal_rel for s in inputs]) if params.config.goal_conditioned else None,
        Tensor(h0),
        Tensor(c0),
        params,
    )

    results: dict[int, StepOutput] = {}
    new_hidden = dict(hidden)
    k = params.n_anchors
    probs = np.exp(out["log_probs"].data)
    for b, pid in enumerate(ped_ids):
        results[pid] = StepOutput(
            scores=out["scores"].data[b].copy(),
            probabilities=probs[b] / probs[b].sum(),
            utilities=out["utilities"].data[b].copy(),
            motion_logits=out["motion"].data[b].copy(),
            interaction_logits=out["interaction"].data[b].copy(),
            residual=split_decoder_raw(out["decoder_raw"].data[b], k, params.config),
            anchor_set=inputs[b].anchor_set,
            state=inputs[b].state,
            features=inputs[b].features,
        )
        new_hidden[pid] = (out["h"].data[b].copy(), out["c"].data[b].copy())
    return results, new_hidden


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _layout_hash(layout: list[dict]) -> str:
    blob = json.dumps(layout, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: ModelParams, config_echo: dict) -> None:
    """Single-file checkpoint: JSON header + raw little-endian float64 vector."""
    layout = params.layout()
    header = {
        "config": config_echo,
        "model": {
            "n_anchors": params.n_anchors,
            **{k: getattr(params.config, k) for k in ModelConfig.__dataclass_fields__},
        },
        "layout": layout,
        "layout_hash": _layout_hash(layout),
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Load and validate a checkpoint; returns (params, config echo)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode())
        raw = fh.read()
    layout = header["layout"]
    if _layout_hash(layout) != header["layout_hash"]:
        raise ValueError(f"{path}: layout hash mismatch")
    model_fields = dict(header["model"])
    n_anchors = model_fields.pop("n_anchors")
    config = ModelConfig(**model_fields)
    params = ModelParams.zeros(config, n_anchors)
    if params.layout() != layout:
        raise ValueError(f"{path}: layout incompatible with model config")
    vec = np.frombuffer(raw, dtype="<f8")
    params.load_flat(np.asarray(vec, dtype=np.float64))
    return params, header["config"]
