"""Probabilistic field over the planning vocabulary: scoring, losses, training, inference.

Every vocabulary action is a query token built from its Fourier code. Query
tokens cross-attend to the scene tokens, receive the navigation and
ego-state embeddings, and a small head turns each into a logit. A softmax
across actions gives the action distribution.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.neighbors import NearestNeighbors
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, NonFiniteError, ShapeError, ValidationError
from .geometry import (
    DEFAULT_FOOTPRINT,
    Footprint,
    agents_conflict_mask,
    boundary_conflict_mask,
    poses_hit_segments,
    traj_distances,
    trajectory_poses,
)
from .nn import (
    ModelConfig,
    ParamStore,
    adam_step,
    grad_norm,
    linear,
    log_softmax,
    mlp2,
    transformer_decoder_stack,
)
from .scene import (
    TOKEN_GROUPS,
    EnvTokenSet,
    SceneFeatures,
    SceneSnapshot,
    add_encoder_params,
    collate,
    embed_batch,
    featurize,
)
from .sim.episode import PlanDecision, TrackingPolicy
from .vocabulary import PlanningVocabulary, build_vocabulary, encode_action

STOP_SPEED = 0.1
STOP_ZONE = 5.0


# --------------------------------------------------------------------------- model


def build_params(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ParamStore:
    """Fresh parameters for the scene encoders, input projection, decoder and head."""
    if config.d % config.heads:
        raise ConfigError(f"model width {config.d} not divisible by {config.heads} heads")
    store = ParamStore(seed=seed, dtype=dtype)
    add_encoder_params(store, config.d, config.horizon)
    store.add_linear("plan.in", 4 * config.horizon * config.n_bands, config.d)
    store.add_decoder_stack("dec", config.d, config.ffn, config.depth)
    # no output bias: a constant shift of every logit cancels in the softmax
    store.add_mlp2("head", config.d, config.d, 1, out_bias=False)
    return store


def score_actions(encodings, env: EnvTokenSet, params, config: ModelConfig) -> torch.Tensor:
    """Logits ``(B, Nq)`` for action codes ``(Nq, 4TL)`` shared by the batch or ``(B, Nq, 4TL)``."""
    codes = torch.as_tensor(encodings)
    w = params["plan.in.w"]
    codes = codes.to(w.dtype)
    if codes.shape[-1] != w.shape[0]:
        raise ShapeError(f"action codes of width {codes.shape[-1]}, input projection expects {w.shape[0]}")
    q = linear(codes, w, params["plan.in.b"])
    B = env.env_tokens.shape[0]
    if q.dim() == 2:
        q = q.unsqueeze(0).expand(B, -1, -1)
    h = transformer_decoder_stack(q, env.env_tokens, params, config.depth, config.heads, kv_mask=env.mask)
    h = h + env.navi_embedding[:, None, :] + env.state_embedding[:, None, :]
    return mlp2(h, params, "head")[..., 0]


@dataclass
class ActionDistribution:
    """Normalized probabilities over the vocabulary (plus the gt entry when training)."""

    probs: np.ndarray
    index_of_gt: int | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ValidationError("probabilities must be a non-empty vector")
        if not np.all(p > 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValidationError("probabilities must be positive and sum to 1")
        self.probs = p

    def __len__(self) -> int:
        return len(self.probs)

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def topk(self, k: int) -> np.ndarray:
        # stable sort keeps the lowest index first among ties
        return np.argsort(-self.probs, kind="stable")[:k]


def action_distribution(logits, index_of_gt: int | None = None) -> ActionDistribution:
    """Softmax in float64 so entries stay strictly positive even for N in the thousands."""
    z = torch.as_tensor(logits).detach().to(torch.float64).reshape(-1)
    if not torch.isfinite(z).all():
        raise NonFiniteError("non-finite logits")
    return ActionDistribution(torch.softmax(z, dim=0).numpy(), index_of_gt)


# --------------------------------------------------------------------------- losses


def build_target_distribution(vocab: PlanningVocabulary, gt, tau: float) -> np.ndarray:
    """Soft target over the N actions plus the appended gt: ``exp(-ADE^2 / tau^2)``, normalized."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    d = np.append(traj_distances(vocab.actions, np.asarray(gt, dtype=float)), 0.0)
    logw = -(d**2) / tau**2
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _probs_of(pred) -> np.ndarray:
    if isinstance(pred, ActionDistribution):
        return pred.probs
    return np.asarray(pred, dtype=np.float64)


def distribution_loss(pred, target) -> float:
    """KL(target || pred) for normalized probability vectors."""
    p, q = np.asarray(target, dtype=np.float64), _probs_of(pred)
    if p.shape != q.shape:
        raise ShapeError(f"target length {p.shape} differs from prediction length {q.shape}")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def conflict_loss(pred, mask, lambda_conflict: float) -> float:
    """``lambda * sum(pred[mask])``. The mask covers the N vocabulary entries only."""
    probs = _probs_of(pred)
    mask = np.asarray(mask, dtype=bool)
    gt = pred.index_of_gt if isinstance(pred, ActionDistribution) else None
    if gt is not None and len(mask) > gt and mask[gt]:
        raise ValidationError("the appended ground-truth entry must never be masked")
    if len(mask) > len(probs):
        raise ShapeError(f"mask length {len(mask)} exceeds {len(probs)} probabilities")
    return float(lambda_conflict * probs[: len(mask)][mask].sum())


def conflict_mask(
    vocab: PlanningVocabulary,
    s: SceneSnapshot,
    margin: float = 0.0,
    ego_fp: Footprint = DEFAULT_FOOTPRINT,
) -> np.ndarray:
    """Actions that hit any agent's future or cross a road boundary."""
    mask = boundary_conflict_mask(vocab.actions, ego_fp, s.boundaries, margin)
    if s.agents:
        fut = np.stack([np.asarray(a.future, dtype=float) for a in s.agents])
        mask |= agents_conflict_mask(vocab.actions, ego_fp, fut, [a.footprint for a in s.agents], margin)
    return mask


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    tau: float = 0.5
    lambda_conflict: float = 5.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 20000
    seed: int = 0
    use_dist_loss: bool = True
    conflict_margin: float = 0.0
    ablate: tuple = ()

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_conflict < 0:
            raise ConfigError(f"lambda_conflict must be non-negative, got {self.lambda_conflict}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps non-negative")
        bad = set(self.ablate) - set(TOKEN_GROUPS)
        if bad:
            raise ConfigError(f"unknown ablation groups {sorted(bad)}")
        self.ablate = tuple(self.ablate)


@dataclass
class PreparedFrames:
    """Per-frame training inputs computed once: features, gt codes, targets, masks."""

    features: list[SceneFeatures]
    gt_codes: np.ndarray
    targets: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "PreparedFrames":
        return PreparedFrames([self.features[i] for i in idx], self.gt_codes[idx], self.targets[idx], self.masks[idx])


def prepare_frames(
    snapshots: Sequence[SceneSnapshot],
    gts,
    vocab: PlanningVocabulary,
    tau: float,
    margin: float = 0.0,
    masks=None,
) -> PreparedFrames:
    gts = np.asarray(gts, dtype=float)
    if gts.ndim != 3 or gts.shape[1:] != (vocab.T, 2):
        raise ShapeError(f"ground truth must be (n, {vocab.T}, 2), got {gts.shape}")
    if len(snapshots) != len(gts):
        raise ValidationError(f"{len(snapshots)} snapshots but {len(gts)} trajectories")
    feats = [featurize(s.validate(vocab.T), vocab.T) for s in snapshots]
    if masks is None:
        masks = np.stack([conflict_mask(vocab, s, margin) for s in snapshots]) if snapshots else np.zeros((0, vocab.N), bool)
    return PreparedFrames(
        feats,
        encode_action(gts, vocab.n_bands).astype(np.float32),
        np.stack([build_target_distribution(vocab, g, tau) for g in gts]) if len(gts) else np.zeros((0, vocab.N + 1)),
        np.asarray(masks, dtype=bool),
    )


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for global step ``step``: consecutive slices of per-epoch permutations.

    Depends only on ``(n, batch_size, step, seed)``, so a resumed run draws
    exactly the batches the uninterrupted run would have drawn.
    """
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, pos = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - pos)
        out.extend(perm[pos : pos + take].tolist())
    return np.array(out, dtype=np.int64)


def frame_losses(batch: PreparedFrames, vocab_codes: torch.Tensor, store, model_cfg: ModelConfig, cfg: TrainConfig):
    """Per-frame ``(distribution, conflict)`` losses as differentiable ``(B,)`` tensors.

    ``store`` may be a :class:`ParamStore` or any name-to-tensor mapping whose
    values share one dtype.
    """
    params = store.params if isinstance(store, ParamStore) else store
    dtype = next(iter(params.values())).dtype
    env = embed_batch(collate(batch.features, model_cfg.horizon, dtype), params, cfg.ablate)
    B = len(batch)
    codes = torch.cat(
        [vocab_codes.to(dtype).unsqueeze(0).expand(B, -1, -1), torch.from_numpy(batch.gt_codes).to(dtype)[:, None, :]],
        dim=1,
    )
    logits = score_actions(codes, env, params, model_cfg)
    logp = log_softmax(logits)
    target = torch.from_numpy(batch.targets).to(dtype)
    dist = (torch.xlogy(target, target) - target * logp).sum(dim=-1)
    mask = torch.from_numpy(np.concatenate([batch.masks, np.zeros((B, 1), bool)], axis=1))
    conflict = cfg.lambda_conflict * torch.where(mask, torch.exp(logp), torch.zeros_like(logp)).sum(dim=-1)
    return dist, conflict


def train_step(batch, vocab: PlanningVocabulary, store: ParamStore, cfg: TrainConfig, model_cfg: ModelConfig):
    """One Adam step on the mean of distribution and conflict losses over ``batch``.

    ``batch`` is either :class:`PreparedFrames` or a sequence of
    ``(SceneSnapshot, gt)`` pairs. Returns ``(store, report)``.
    """
    if not isinstance(batch, PreparedFrames):
        pairs = list(batch)
        if not pairs:
            raise ValidationError("training batch is empty")
        batch = prepare_frames([p[0] for p in pairs], np.stack([p[1] for p in pairs]), vocab, cfg.tau, cfg.conflict_margin)
    if len(batch) == 0:
        raise ValidationError("training batch is empty")
    store.zero_grad()
    vocab_codes = torch.from_numpy(vocab.encodings)
    dist, conflict = frame_losses(batch, vocab_codes, store, model_cfg, cfg)
    per_frame = (dist if cfg.use_dist_loss else torch.zeros_like(dist)) + conflict
    bad = ~torch.isfinite(per_frame)
    if bad.any():
        fid = batch.features[int(torch.nonzero(bad)[0, 0])].frame_id
        raise NonFiniteError(f"non-finite loss on frame {fid!r}")
    loss = per_frame.mean()
    loss.backward()
    grads = store.grads()
    gnorm = grad_norm(grads)
    if not math.isfinite(gnorm):
        raise NonFiniteError(f"non-finite gradient in batch starting at frame {batch.features[0].frame_id!r}")
    adam_step(store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = {
        "step": store.step,
        "loss_total": float(loss.detach()),
        "loss_dist": float(dist.detach().mean()) if cfg.use_dist_loss else 0.0,
        "loss_conflict": float(conflict.detach().mean()),
        "grad_norm": gnorm,
    }
    return store, report


# --------------------------------------------------------------------------- inference


def select_action_argmax(dist: ActionDistribution, vocab: PlanningVocabulary) -> np.ndarray:
    if len(dist) != vocab.N:
        raise ShapeError(f"distribution over {len(dist)} entries, vocabulary has {vocab.N}")
    return vocab.actions[dist.argmax()].copy()


def _crossing(actions: np.ndarray, ego_fp: Footprint, line) -> np.ndarray:
    """``(N, P)`` booleans: footprint at each pose (waypoints and midpoints) touches ``line``."""
    poses = trajectory_poses(actions, midpoints=True)
    return poses_hit_segments(poses, ego_fp, np.asarray(line, dtype=float).reshape(1, 2, 2))


def rule_violations(
    vocab: PlanningVocabulary,
    s: SceneSnapshot,
    cleared_signs: set | frozenset = frozenset(),
    ego_fp: Footprint = DEFAULT_FOOTPRINT,
) -> np.ndarray:
    """Actions that cross an affecting red light, or an uncleared stop sign while moving."""
    bad = np.zeros(vocab.N, dtype=bool)
    origin = np.zeros((1, 3))
    for e in s.traffic_elements:
        if not e.affects_ego:
            continue
        line = np.asarray(e.stop_line, dtype=float).reshape(1, 2, 2)
        if poses_hit_segments(origin, ego_fp, line)[0]:
            continue  # already on the line; stopping there helps nobody
        if e.kind == "traffic_light" and e.state == "red":
            bad |= _crossing(vocab.actions, ego_fp, line).any(axis=1)
        elif e.kind == "stop_sign" and e.id not in cleared_signs:
            hit = _crossing(vocab.actions, ego_fp, line)
            pts = np.concatenate([np.zeros((vocab.N, 1, 2)), vocab.actions], axis=1)
            seg_speed = np.linalg.norm(np.diff(pts, axis=1), axis=-1) / vocab.dt_wp  # (N, T)
            # pose p (waypoints and midpoints) lies on step p // 2 or straddles two steps
            pose_speed = np.repeat(seg_speed, 2, axis=1)[:, 1:]
            bad |= (hit & (pose_speed > STOP_SPEED)).any(axis=1)
    return bad


def select_topk_with_rules(
    dist: ActionDistribution,
    vocab: PlanningVocabulary,
    s: SceneSnapshot,
    K: int,
    cleared_signs: set | frozenset = frozenset(),
    ego_fp: Footprint = DEFAULT_FOOTPRINT,
    margin: float = 0.0,
    mask=None,
) -> tuple[np.ndarray, int, np.ndarray]:
    """Best of the top-K proposals that pass the conflict and traffic rules.

    Returns ``(trajectory, index, topk_indices)``; falls back to the
    vocabulary's stop action when nothing survives.
    """
    if K < 1:
        raise ConfigError(f"K must be at least 1, got {K}")
    if len(dist) != vocab.N:
        raise ShapeError(f"distribution over {len(dist)} entries, vocabulary has {vocab.N}")
    top = dist.topk(K)
    if mask is None:
        mask = conflict_mask(vocab, s, margin, ego_fp)
    bad = np.asarray(mask, dtype=bool) | rule_violations(vocab, s, cleared_signs, ego_fp)
    for i in top:
        if not bad[i]:
            return vocab.actions[i].copy(), int(i), top
    stop = vocab.stop_index
    return vocab.actions[stop].copy(), stop, top


def update_cleared_signs(s: SceneSnapshot, cleared: set, ego_fp: Footprint = DEFAULT_FOOTPRINT) -> None:
    """Remember stop signs the ego has come to rest in front of."""
    if s.ego.speed >= STOP_SPEED:
        return
    for e in s.traffic_elements:
        if e.kind != "stop_sign" or not e.affects_ego:
            continue
        a, b = np.asarray(e.stop_line, dtype=float)
        ab = b - a
        u = float(np.clip(np.dot(-a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0))
        if np.linalg.norm(a + u * ab) <= STOP_ZONE + 0.5 * ego_fp.length:
            cleared.add(e.id)


# --------------------------------------------------------------------------- estimators


def _write_jsonl(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")


class ProbabilisticPlanner(BaseEstimator):
    """Estimator wrapper around the probabilistic field.

    ``fit(snapshots, gts)`` trains; ``predict`` returns argmax trajectories
    (or rule-filtered top-K ones with ``inference="topk"``);
    ``predict_proba`` returns the action distribution per snapshot.
    """

    def __init__(
        self,
        vocabulary=None,
        n_actions=256,
        d=128,
        heads=4,
        depth=3,
        ffn=256,
        tau=0.5,
        lambda_conflict=5.0,
        use_dist_loss=True,
        lr=1e-4,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        batch_size=32,
        steps=20000,
        seed=0,
        ablate=(),
        conflict_margin=0.0,
        inference="argmax",
        top_k=8,
        warm_start=False,
        loss_report=None,
    ):
        self.vocabulary = vocabulary
        self.n_actions = n_actions
        self.d = d
        self.heads = heads
        self.depth = depth
        self.ffn = ffn
        self.tau = tau
        self.lambda_conflict = lambda_conflict
        self.use_dist_loss = use_dist_loss
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.ablate = ablate
        self.conflict_margin = conflict_margin
        self.inference = inference
        self.top_k = top_k
        self.warm_start = warm_start
        self.loss_report = loss_report

    # -- configuration

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            tau=self.tau,
            lambda_conflict=self.lambda_conflict,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            batch_size=self.batch_size,
            steps=self.steps,
            seed=self.seed,
            use_dist_loss=self.use_dist_loss,
            conflict_margin=self.conflict_margin,
            ablate=tuple(self.ablate),
        )

    def _model_config(self, vocab: PlanningVocabulary) -> ModelConfig:
        return ModelConfig(self.d, self.heads, self.depth, vocab.n_bands, vocab.T, vocab.N, self.ffn)

    def _check_inference(self) -> None:
        if self.inference not in ("argmax", "topk"):
            raise ConfigError(f"inference must be 'argmax' or 'topk', got {self.inference!r}")

    # -- training

    def fit(self, X, y, masks=None):
        """Train on snapshots ``X`` with expert trajectories ``y`` of shape ``(n, T, 2)``."""
        self._check_inference()
        cfg = self.train_config()
        y = np.asarray(y, dtype=float)
        if len(X) == 0:
            raise ValidationError("no training frames")
        resume = self.warm_start and hasattr(self, "params_")
        if resume:
            vocab = self.vocabulary_
        else:
            vocab = self.vocabulary if self.vocabulary is not None else build_vocabulary(y, self.n_actions)
        frames = prepare_frames(X, y, vocab, cfg.tau, cfg.conflict_margin, masks)
        if not resume:
            self.vocabulary_ = vocab
            self.config_ = self._model_config(vocab)
            self.params_ = build_params(self.config_, self.seed)
            self.loss_history_ = []
        self.fit_frames(frames, cfg)
        return self

    def fit_frames(self, frames: PreparedFrames, cfg: TrainConfig | None = None):
        """Run ``cfg.steps`` further steps on prepared frames (continuing the step counter)."""
        cfg = cfg or self.train_config()
        fh = open(self.loss_report, "a") if self.loss_report else None
        try:
            for _ in range(cfg.steps):
                idx = batch_indices(len(frames), min(cfg.batch_size, len(frames)), self.params_.step, cfg.seed)
                _, report = train_step(frames.subset(idx), self.vocabulary_, self.params_, cfg, self.config_)
                self.loss_history_.append(report)
                if fh is not None:
                    _write_jsonl(fh, report)
        finally:
            if fh is not None:
                fh.close()
        self.n_steps_ = self.params_.step
        return self

    @classmethod
    def from_checkpoint(cls, store: ParamStore, config: ModelConfig, vocab: PlanningVocabulary, **kwargs):
        if config.n_actions != vocab.N or config.horizon != vocab.T or config.n_bands != vocab.n_bands:
            raise ConfigError("checkpoint configuration does not match the vocabulary")
        est = cls(vocabulary=vocab, d=config.d, heads=config.heads, depth=config.depth, ffn=config.ffn, **kwargs)
        est.vocabulary_ = vocab
        est.config_ = config
        est.params_ = store
        est.loss_history_ = []
        est.n_steps_ = store.step
        return est

    # -- inference

    def decision_function(self, X, batch_size: int = 64) -> np.ndarray:
        """Logits ``(n, N)``."""
        check_is_fitted(self, "params_")
        vocab = self.vocabulary_
        out = []
        with torch.no_grad():
            for i in range(0, len(X), batch_size):
                chunk = X[i : i + batch_size]
                feats = [featurize(s.validate(vocab.T), vocab.T) for s in chunk]
                env = embed_batch(collate(feats, vocab.T, self.params_.dtype), self.params_.params, tuple(self.ablate))
                out.append(score_actions(torch.from_numpy(vocab.encodings), env, self.params_.params, self.config_))
        return torch.cat(out).double().numpy() if out else np.zeros((0, vocab.N))

    def predict_distribution(self, X) -> list[ActionDistribution]:
        return [action_distribution(z) for z in self.decision_function(X)]

    def predict_proba(self, X) -> np.ndarray:
        return np.stack([d.probs for d in self.predict_distribution(X)])

    def predict_indices(self, X, cleared_signs=frozenset()) -> np.ndarray:
        self._check_inference()
        dists = self.predict_distribution(X)
        if self.inference == "argmax":
            return np.array([d.argmax() for d in dists], dtype=np.int64)
        return np.array(
            [select_topk_with_rules(d, self.vocabulary_, s, self.top_k, cleared_signs)[1] for d, s in zip(dists, X)],
            dtype=np.int64,
        )

    def predict(self, X) -> np.ndarray:
        """Selected trajectories ``(n, T, 2)``."""
        return self.vocabulary_.actions[self.predict_indices(X)].copy()

    def score(self, X, y) -> float:
        """Negative mean displacement error of the selected trajectories."""
        y = np.asarray(y, dtype=float)
        return -float(np.linalg.norm(self.predict(X) - y, axis=-1).mean())


class PlannerPolicy(TrackingPolicy):
    """Closed-loop wrapper: replans with a fitted planner, tracks with the PID."""

    def __init__(self, planner: ProbabilisticPlanner, mode: str = "argmax", k: int = 8, **kwargs):
        super().__init__(dt_wp=planner.vocabulary_.dt_wp, **kwargs)
        if mode not in ("argmax", "topk"):
            raise ConfigError(f"mode must be 'argmax' or 'topk', got {mode!r}")
        self.planner = planner
        self.mode = mode
        self.k = k
        self.cleared: set = set()
        self.selected_masks: list[bool] = []

    def reset(self) -> None:
        super().reset()
        self.cleared.clear()
        self.selected_masks = []

    def replan(self, snap: SceneSnapshot, route_ego) -> PlanDecision:
        vocab = self.planner.vocabulary_
        update_cleared_signs(snap, self.cleared)
        dist = self.planner.predict_distribution([snap])[0]
        mask = conflict_mask(vocab, snap)
        top = dist.topk(self.k)
        if self.mode == "argmax":
            idx = dist.argmax()
        else:
            _, idx, top = select_topk_with_rules(dist, vocab, snap, self.k, self.cleared, mask=mask)
        self.selected_masks.append(bool(mask[idx]))
        return PlanDecision(vocab.actions[idx].copy(), argmax_index=dist.argmax(), topk_indices=tuple(int(i) for i in top))


class MeanTrajectoryRegressor(RegressorMixin, BaseEstimator):
    """Deterministic regression baseline: the mean demonstrated trajectory per scene.

    Demonstrations with identical snapshots are averaged; a query snapshot
    is matched exactly when possible and otherwise to its nearest training
    snapshot in feature space.
    """

    def __init__(self, horizon=6):
        self.horizon = horizon

    def _key(self, s: SceneSnapshot) -> str:
        d = s.to_dict()
        d.pop("frame_id", None)
        return json.dumps(d, sort_keys=True)

    def _descriptor(self, s: SceneSnapshot) -> np.ndarray:
        f = featurize(s, self.horizon)
        agents = np.zeros((4, f.agents.shape[1]))
        agents[: min(4, len(f.agents))] = f.agents[:4]
        traffic = np.zeros((2, f.traffic.shape[1]))
        traffic[: min(2, len(f.traffic))] = f.traffic[:2]
        return np.concatenate([f.navi, f.state, agents.ravel(), traffic.ravel()])

    def fit(self, X, y):
        y = np.asarray(y, dtype=float)
        if len(X) != len(y):
            raise ValidationError(f"{len(X)} snapshots but {len(y)} trajectories")
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(X):
            groups.setdefault(self._key(s), []).append(i)
        self.keys_ = list(groups)
        self.means_ = np.stack([y[idx].mean(axis=0) for idx in groups.values()])
        reps = [X[idx[0]] for idx in groups.values()]
        self.index_ = {k: i for i, k in enumerate(self.keys_)}
        self.nn_ = NearestNeighbors(n_neighbors=1).fit(np.stack([self._descriptor(s) for s in reps]))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "means_")
        out = []
        for s in X:
            i = self.index_.get(self._key(s))
            if i is None:
                i = int(self.nn_.kneighbors(self._descriptor(s)[None], return_distance=False)[0, 0])
            out.append(self.means_[i])
        return np.stack(out)

    def score(self, X, y) -> float:
        return -float(np.linalg.norm(self.predict(X) - np.asarray(y, dtype=float), axis=-1).mean())
