"""Losses, augmentation, optimizer, the two-stage procedure, and sweeps.

Stage "backbone" trains encoder + backbone + MLP heads end to end with
teacher forcing. Stage "diffusion" freezes everything from stage one
except the future-state decoder and fits the noise predictor and
key-point projection on cached backbone features, so the freeze
contract holds by construction and is still verified by checksum.

The held-out split is by scenario seed (seed % 10 == 0), eval loss is
exactly key-point MSE + state MSE, and every run is reproducible from
(seed, config, dataset): all randomness flows through named Philox
streams and batch order is part of the stream.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .backbone import assemble_sequence, backbone_param_count, get_preset
from .errors import ConfigError, ContractError, NonFiniteGradError
from .heads import COORD_SCALE, GenerationModel, ModelFlags, kp_token_order
from .raster import dual_scope
from .rng import make_rng
from .scenario import (HISTORY_FRAMES, IntentionVocab, TrainingSample,
                       assign_proposals, cluster_intentions, generate_samples)
from .tensorcore import Parameter, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossReport:
    kp_mse: float
    state_mse: float
    proposal_ce: float | None = None
    proposal_offset_mse: float | None = None
    diffusion_mse: float | None = None

    @property
    def eval_loss(self) -> float:
        return self.kp_mse + self.state_mse

    def total(self) -> float:
        extras = [v for v in (self.proposal_ce, self.proposal_offset_mse,
                              self.diffusion_mse) if v is not None]
        return self.eval_loss + sum(extras)


def compute_loss(outputs: dict, targets: dict, flags: ModelFlags) -> tuple[Tensor, LossReport]:
    """Training loss tensor plus its per-component report.

    Key-point MSE averages over 5 points x 2 coords, state MSE over
    80 x 3; proposal terms join only when proposals are enabled. The
    held-out metric reuses this same function, so eval loss is the kp
    and state components by construction.
    """
    if "states" not in targets:
        raise ContractError("compute_loss: missing state targets")
    state_mse = tc.mse(outputs["state_pred"], targets["states"])
    total = state_mse
    kp_val = 0.0
    ce_val = off_val = None
    if flags.use_keypoints:
        if "kp_points" not in targets:
            raise ContractError("compute_loss: key points enabled but no targets")
        kp_mse = tc.mse(outputs["kp_pred"], targets["kp_points"])
        total = total + kp_mse
        kp_val = kp_mse.item()
    if flags.use_proposal:
        if "proposal_index" not in targets or "proposal_offset" not in targets:
            raise ContractError("compute_loss: proposals enabled but no targets")
        ce = tc.cross_entropy(outputs["proposal_logits"], targets["proposal_index"])
        off = tc.mse(outputs["proposal_offset"], targets["proposal_offset"])
        total = total + ce + off
        ce_val, off_val = ce.item(), off.item()
    return total, LossReport(kp_mse=kp_val, state_mse=state_mse.item(),
                             proposal_ce=ce_val, proposal_offset_mse=off_val)


# ---------------------------------------------------------------------------
# augmentation


def perturb_history(sample: TrainingSample, sigma_max: float,
                    rng: np.random.Generator) -> TrainingSample:
    """Linearly decaying positional noise over the ego history.

    Frame t steps before the current one shifts by sigma_max * t / T_m
    along one random unit direction, so the oldest frame moves exactly
    sigma_max and the current frame does not move. Futures, key points,
    and every supervised target stay untouched.
    """
    if sigma_max < 0:
        raise ContractError("perturb_history: sigma_max must be >= 0")
    history = sample.ego_history.copy()
    if sigma_max > 0:
        angle = rng.uniform(-np.pi, np.pi)
        direction = np.array([np.cos(angle), np.sin(angle)])
        t_m = HISTORY_FRAMES - 1
        ago = t_m - np.arange(HISTORY_FRAMES)
        history[:, 0:2] += (sigma_max * ago / t_m)[:, None] * direction
    return replace(sample, ego_history=history)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    warmup_steps: int = 50
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    stage: str = "backbone"
    eval_interval: int = 100
    patience: int = 5                    # eval intervals without 0.5% improvement
    min_rel_improvement: float = 0.005
    augment_sigma_frac: float = 0.0      # 0.1 enables the linear perturbation
    resolution: int = 64
    stop_below_eval: float | None = None  # finish as soon as eval drops under this
    stop_below_frac_of_initial: float | None = None  # same, relative to step-0 eval

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_steps, self.eval_interval) <= 0:
            raise ConfigError(f"non-positive training config value in {self}")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError(f"negative warmup/weight decay in {self}")
        if self.stage not in ("backbone", "diffusion"):
            raise ConfigError(f"unknown stage {self.stage!r}")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp to config.lr over warmup, then linear decay to 0."""
    if step < 0:
        raise ContractError("lr_schedule: negative step")
    w = config.warmup_steps
    if w > 0 and step <= w:
        return config.lr * step / w
    if config.max_steps <= w:
        return config.lr
    frac = (config.max_steps - step) / (config.max_steps - w)
    return config.lr * max(0.0, frac)


def optimizer_step(params: list[Parameter], grads: dict[str, np.ndarray],
                   state: dict, config: TrainConfig, step: int) -> None:
    """Decoupled-weight-decay Adam update, in place.

    Decay multiplies eligible parameters by (1 - lr * wd) directly; the
    moment estimates see only the raw gradients.
    """
    lr = lr_schedule(step, config)
    t = state.setdefault("t", 0) + 1
    state["t"] = t
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(f"non-finite gradient for parameter {p.name!r}")
        slot = state.setdefault(p.name, {"m": np.zeros_like(p.data),
                                         "v": np.zeros_like(p.data)})
        slot["m"] = ADAM_BETA1 * slot["m"] + (1.0 - ADAM_BETA1) * g
        slot["v"] = ADAM_BETA2 * slot["v"] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = slot["m"] / bc1
        v_hat = slot["v"] / bc2
        p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if p.decay_eligible and config.weight_decay > 0.0:
            p.tensor.data = p.tensor.data * (1.0 - lr * config.weight_decay)


# ---------------------------------------------------------------------------
# dataset plumbing


@dataclass
class SampleDataset:
    samples: list[TrainingSample]
    vocab: IntentionVocab | None = None
    holdout: str = "seed"        # "seed": seed % 10 == 0 held out; "none": eval on train

    def __post_init__(self):
        if not self.samples:
            raise ContractError("empty dataset")
        if self.holdout not in ("seed", "none"):
            raise ConfigError(f"unknown holdout mode {self.holdout!r}")
        if self.holdout == "none":
            self.train_idx = list(range(len(self.samples)))
            self.eval_idx = self.train_idx[:]
            return
        self.train_idx = [i for i, s in enumerate(self.samples) if s.seed % 10 != 0]
        self.eval_idx = [i for i, s in enumerate(self.samples) if s.seed % 10 == 0]
        if not self.train_idx:
            self.train_idx = list(range(len(self.samples)))
        if not self.eval_idx:
            self.eval_idx = self.train_idx[:]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.sample_id.encode())
            h.update(s.ego_future.tobytes())
        return h.hexdigest()


def build_dataset(count: int, seed: int, vocab_k: int | None = None,
                  templates=None) -> SampleDataset:
    from .scenario import TEMPLATES
    samples = generate_samples(count, seed, templates or TEMPLATES)
    vocab = None
    if vocab_k:
        vocab = cluster_intentions(samples, vocab_k, seed=seed)
        assign_proposals(samples, vocab)
    return SampleDataset(samples=samples, vocab=vocab)


class RasterCache:
    """Pre-rendered dual-scope rasters, quantized to uint8 to fit in RAM."""

    def __init__(self, samples: list[TrainingSample], resolution: int):
        self.resolution = resolution
        n = len(samples)
        self.data = np.zeros((n, 2, 33, resolution, resolution), dtype=np.uint8)
        for i, s in enumerate(samples):
            high, low = dual_scope(s, resolution)
            self.data[i, 0] = np.round(high.channels * 255.0)
            self.data[i, 1] = np.round(low.channels * 255.0)

    def fetch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        block = self.data[np.asarray(indices, dtype=np.int64)].astype(np.float64) / 255.0
        return block[:, 0], block[:, 1]


def collate(samples: list[TrainingSample], indices, flags: ModelFlags,
            cache: RasterCache | None = None, resolution: int = 64,
            augment_sigma_frac: float = 0.0,
            rng: np.random.Generator | None = None) -> tuple[dict, dict]:
    """Assemble a model batch and its supervision targets."""
    order = kp_token_order(flags)
    chosen = [samples[i] for i in indices]
    if augment_sigma_frac > 0.0:
        if rng is None:
            raise ContractError("collate: augmentation needs an rng")
        aug = []
        for s in chosen:
            scale = float(np.hypot(*s.ego_history[0, 0:2]))
            aug.append(perturb_history(s, rng.uniform(0.0, augment_sigma_frac) * scale, rng))
        chosen = aug
        highs, lows = [], []
        for s in chosen:
            h, l = dual_scope(s, resolution)
            highs.append(h.channels)
            lows.append(l.channels)
        high, low = np.stack(highs), np.stack(lows)
    elif cache is not None:
        high, low = cache.fetch(indices)
    else:
        highs, lows = [], []
        for s in chosen:
            h, l = dual_scope(s, resolution)
            highs.append(h.channels)
            lows.append(l.channels)
        high, low = np.stack(highs), np.stack(lows)

    batch = {"rasters_high": high, "rasters_low": low}
    targets: dict = {}
    states = np.stack([s.ego_future[:, 0:3] for s in chosen]).copy()
    states[:, :, 0:2] /= COORD_SCALE
    targets["states"] = states
    if flags.use_keypoints:
        kp = np.stack([s.key_points[order][:, 0:2] for s in chosen]) / COORD_SCALE
        batch["kp_points"] = kp
        targets["kp_points"] = kp
    if flags.use_proposal:
        idx = np.array([s.proposal_index for s in chosen])
        if np.any(idx == None):  # noqa: E711  (mixed None/int array)
            raise ContractError("collate: proposals enabled but samples lack indices")
        idx = idx.astype(np.int64)
        batch["proposal_index"] = idx
        targets["proposal_index"] = idx
    return batch, targets


def attach_proposal_offsets(targets: dict, chosen_samples, vocab: IntentionVocab) -> None:
    endpoints = np.stack([s.endpoint for s in chosen_samples])
    anchors = vocab.points[targets["proposal_index"]]
    targets["proposal_offset"] = (endpoints - anchors) / COORD_SCALE


# ---------------------------------------------------------------------------
# stage-one training


@dataclass
class TrainResult:
    model: GenerationModel
    curve: list[dict]
    best_eval: float
    steps_run: int
    stopped_early: bool

    def best_eval_step(self) -> int:
        evals = [(r["eval_loss"], r["step"]) for r in self.curve if r["eval_loss"] is not None]
        return min(evals)[1] if evals else -1


def _param_checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(arrays[name].tobytes())
    return h.hexdigest()


class _EarlyStop:
    """Stop when eval fails to improve by min_rel over patience intervals."""

    def __init__(self, patience: int, min_rel: float):
        self.patience = patience
        self.min_rel = min_rel
        self.best = np.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best * (1.0 - self.min_rel):
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _eval_stage1(model: GenerationModel, dataset: SampleDataset,
                 cache: RasterCache, config: TrainConfig) -> LossReport:
    reports = []
    weights = []
    with tc.no_grad():
        for lo in range(0, len(dataset.eval_idx), config.batch_size):
            idx = dataset.eval_idx[lo:lo + config.batch_size]
            batch, targets = collate(dataset.samples, idx, model.flags, cache=cache,
                                     resolution=config.resolution)
            if model.flags.use_proposal:
                attach_proposal_offsets(targets, [dataset.samples[i] for i in idx],
                                        dataset.vocab)
            out = model.teacher_forced(batch)
            _, rep = compute_loss(out, targets, model.flags)
            reports.append(rep)
            weights.append(len(idx))
    w = np.array(weights, dtype=np.float64)
    w /= w.sum()
    kp = float(sum(r.kp_mse * wi for r, wi in zip(reports, w)))
    st = float(sum(r.state_mse * wi for r, wi in zip(reports, w)))
    return LossReport(kp_mse=kp, state_mse=st)


def train_stage_backbone(dataset: SampleDataset, model: GenerationModel,
                         config: TrainConfig,
                         cache: RasterCache | None = None) -> TrainResult:
    """End-to-end teacher-forced training of encoder, backbone, and MLP heads."""
    if config.stage != "backbone":
        raise ConfigError(f"train_stage_backbone called with stage {config.stage!r}")
    if model.flags.use_proposal and dataset.vocab is None:
        raise ConfigError("proposal training needs a dataset vocabulary")
    cache = cache or RasterCache(dataset.samples, config.resolution)
    params = model.parameters()
    grads_of = model.named_parameters()
    opt_state: dict = {}
    batch_rng = make_rng(config.seed, "batches")
    aug_rng = make_rng(config.seed, "augment")
    stopper = _EarlyStop(config.patience, config.min_rel_improvement)
    curve: list[dict] = []
    t_start = time.time()
    stopped = False
    ev0 = _eval_stage1(model, dataset, cache, config)
    curve.append({"step": 0, "lr": 0.0, "train_loss": None,
                  "eval_kp_mse": ev0.kp_mse, "eval_state_mse": ev0.state_mse,
                  "eval_loss": ev0.eval_loss, "wall_s": time.time() - t_start})
    stop_below = config.stop_below_eval
    if config.stop_below_frac_of_initial is not None:
        frac_stop = config.stop_below_frac_of_initial * ev0.eval_loss
        stop_below = frac_stop if stop_below is None else min(stop_below, frac_stop)
    step = 0
    for step in range(1, config.max_steps + 1):
        idx = batch_rng.choice(dataset.train_idx, size=min(config.batch_size,
                                                           len(dataset.train_idx)),
                               replace=False)
        batch, targets = collate(dataset.samples, idx, model.flags, cache=cache,
                                 resolution=config.resolution,
                                 augment_sigma_frac=config.augment_sigma_frac,
                                 rng=aug_rng)
        if model.flags.use_proposal:
            attach_proposal_offsets(targets, [dataset.samples[i] for i in idx],
                                    dataset.vocab)
        model.zero_grad()
        out = model.teacher_forced(batch)
        loss, report = compute_loss(out, targets, model.flags)
        if not np.isfinite(loss.item()):
            raise NonFiniteGradError(f"training loss diverged at step {step}")
        loss.backward()
        grads = {name: p.tensor.grad for name, p in grads_of.items()
                 if p.tensor.grad is not None}
        optimizer_step(params, grads, opt_state, config, step)
        if step % config.eval_interval == 0 or step == config.max_steps:
            ev = _eval_stage1(model, dataset, cache, config)
            curve.append({"step": step, "lr": lr_schedule(step, config),
                          "train_loss": loss.item(), "eval_kp_mse": ev.kp_mse,
                          "eval_state_mse": ev.state_mse, "eval_loss": ev.eval_loss,
                          "wall_s": time.time() - t_start})
            if stop_below is not None and ev.eval_loss < stop_below:
                break
            if stopper.update(ev.eval_loss):
                stopped = True
                break
        else:
            curve.append({"step": step, "lr": lr_schedule(step, config),
                          "train_loss": loss.item(), "eval_kp_mse": None,
                          "eval_state_mse": None, "eval_loss": None,
                          "wall_s": time.time() - t_start})
    best = min((r["eval_loss"] for r in curve if r["eval_loss"] is not None),
               default=np.inf)
    return TrainResult(model=model, curve=curve, best_eval=float(best),
                       steps_run=step, stopped_early=stopped)


# ---------------------------------------------------------------------------
# stage-two training (diffusion decoder + trajectory decoder, backbone frozen)


def _cache_stage2_features(model: GenerationModel, dataset: SampleDataset,
                           cache: RasterCache, config: TrainConfig) -> dict:
    """Frozen-backbone features: kp conditions, state hiddens, gt latents."""
    conds, state_hidden, latents, kp_targets, state_targets = [], [], [], [], []
    with tc.no_grad():
        for lo in range(0, len(dataset.samples), config.batch_size):
            idx = list(range(lo, min(lo + config.batch_size, len(dataset.samples))))
            batch, targets = collate(dataset.samples, idx, model.flags, cache=cache,
                                     resolution=config.resolution)
            if model.flags.use_proposal:
                attach_proposal_offsets(targets, [dataset.samples[i] for i in idx],
                                        dataset.vocab)
            high = Tensor(batch["rasters_high"])
            low = Tensor(batch["rasters_low"])
            context = model.encoder(high, low)
            proposal_emb = None
            if model.flags.use_proposal:
                pts = model.scaled_vocab()[batch["proposal_index"]]
                proposal_emb = tc.reshape(model.point_encoder(Tensor(pts)),
                                          (len(idx), 1, -1))
            kp_emb = model.point_encoder(Tensor(batch["kp_points"]))
            tokens = assemble_sequence(context, proposal_emb, kp_emb,
                                       model._state_query_batch(len(idx)))
            hidden = model.backbone(tokens.embeddings)
            k0, _ = tokens.layout.keypoint_span
            s0, s1 = tokens.layout.state_span
            conds.append(hidden.data[:, k0 - 1:k0 - 1 + 5, :])
            state_hidden.append(hidden.data[:, s0:s1, :])
            latents.append(kp_emb.data)
            kp_targets.append(batch["kp_points"])
            state_targets.append(targets["states"])
    return {
        "cond": np.concatenate(conds),            # (N, 5, d)
        "state_hidden": np.concatenate(state_hidden),
        "latent0": np.concatenate(latents),       # (N, 5, d)
        "kp_points": np.concatenate(kp_targets),  # (N, 5, 2) scaled
        "states": np.concatenate(state_targets),
    }


def train_stage_diffusion(dataset: SampleDataset, model: GenerationModel,
                          config: TrainConfig,
                          cache: RasterCache | None = None) -> TrainResult:
    """Fit the noise predictor, key-point projection, and state decoder.

    Backbone and encoder parameters are bit-identical before and after:
    they are excluded from the optimizer and only ever read.
    """
    if config.stage != "diffusion":
        raise ConfigError(f"train_stage_diffusion called with stage {config.stage!r}")
    if not model.flags.use_keypoints:
        raise ConfigError("diffusion stage needs a key-point model")
    cache = cache or RasterCache(dataset.samples, config.resolution)
    model.attach_diffusion()
    frozen_before = _param_checksum({
        name: p.tensor.data for name, p in model.named_parameters().items()
        if not (name.startswith("eps_model.") or name.startswith("kp_projection.")
                or name.startswith("state_decoder."))})
    feats = _cache_stage2_features(model, dataset, cache, config)
    n, _, d = feats["cond"].shape
    train_mask = np.zeros(n, dtype=bool)
    train_mask[dataset.train_idx] = True
    train_rows = np.nonzero(train_mask)[0]
    eval_rows = np.asarray(dataset.eval_idx, dtype=np.int64)

    params = (model.diffusion_parameters()
              + list(model.state_decoder.named_parameters().values()))
    grads_of = {p.name: p for p in params}
    opt_state: dict = {}
    rng = make_rng(config.seed, "diffusion-train")
    batch_rng = make_rng(config.seed, "diffusion-batches")
    stopper = _EarlyStop(config.patience, config.min_rel_improvement)
    curve: list[dict] = []
    t_start = time.time()
    stopped = False
    schedule = model.schedule

    def eval_pass() -> LossReport:
        with tc.no_grad():
            lat = feats["latent0"][eval_rows].reshape(-1, d)
            kp_t = feats["kp_points"][eval_rows].reshape(-1, 2)
            kp_pred = model.kp_projection(Tensor(lat))
            kp_mse = tc.mse(kp_pred, kp_t).item()
            sh = feats["state_hidden"][eval_rows]
            st_pred = model.state_decoder(Tensor(sh))
            st_mse = tc.mse(st_pred, feats["states"][eval_rows]).item()
            ev_rng = make_rng(config.seed, "diffusion-eval")
            t_d = ev_rng.integers(1, schedule.steps + 1, size=lat.shape[0])
            eps = ev_rng.standard_normal(lat.shape)
            acum = schedule.alphas_cum[t_d - 1][:, None]
            noisy = np.sqrt(acum) * lat + np.sqrt(1.0 - acum) * eps
            cond = feats["cond"][eval_rows].reshape(-1, d)
            eps_hat = model.eps_model(Tensor(noisy), Tensor(cond), t_d)
            diff_mse = tc.mse(eps_hat, eps).item()
        return LossReport(kp_mse=kp_mse, state_mse=st_mse, diffusion_mse=diff_mse)

    step = 0
    for step in range(1, config.max_steps + 1):
        rows = batch_rng.choice(train_rows, size=min(config.batch_size * 4,
                                                     len(train_rows)), replace=False)
        lat = feats["latent0"][rows].reshape(-1, d)
        cond = feats["cond"][rows].reshape(-1, d)
        kp_t = feats["kp_points"][rows].reshape(-1, 2)
        t_d = rng.integers(1, schedule.steps + 1, size=lat.shape[0])
        eps = rng.standard_normal(lat.shape)
        acum = schedule.alphas_cum[t_d - 1][:, None]
        noisy = np.sqrt(acum) * lat + np.sqrt(1.0 - acum) * eps

        model.zero_grad()
        eps_hat = model.eps_model(Tensor(noisy), Tensor(cond), t_d)
        diff_mse = tc.mse(eps_hat, eps)
        kp_pred = model.kp_projection(Tensor(lat))
        kp_mse = tc.mse(kp_pred, kp_t)
        st_pred = model.state_decoder(Tensor(feats["state_hidden"][rows]))
        st_mse = tc.mse(st_pred, feats["states"][rows])
        loss = diff_mse + kp_mse + st_mse
        if not np.isfinite(loss.item()):
            raise NonFiniteGradError(f"diffusion loss diverged at step {step}")
        loss.backward()
        grads = {name: p.tensor.grad for name, p in grads_of.items()
                 if p.tensor.grad is not None}
        optimizer_step(params, grads, opt_state, config, step)

        if step % config.eval_interval == 0 or step == config.max_steps:
            ev = eval_pass()
            curve.append({"step": step, "lr": lr_schedule(step, config),
                          "train_loss": loss.item(), "eval_kp_mse": ev.kp_mse,
                          "eval_state_mse": ev.state_mse, "eval_loss": ev.eval_loss,
                          "diffusion_mse": ev.diffusion_mse,
                          "wall_s": time.time() - t_start})
            if stopper.update(ev.diffusion_mse + ev.eval_loss):
                stopped = True
                break

    frozen_after = _param_checksum({
        name: p.tensor.data for name, p in model.named_parameters().items()
        if not (name.startswith("eps_model.") or name.startswith("kp_projection.")
                or name.startswith("state_decoder."))})
    if frozen_before != frozen_after:
        raise NonFiniteGradError("freeze contract violated: backbone/encoder changed")
    model.flags = replace(model.flags, kp_decoder="diffusion")
    best = min((r["eval_loss"] for r in curve if r["eval_loss"] is not None),
               default=np.inf)
    return TrainResult(model=model, curve=curve, best_eval=float(best),
                       steps_run=step, stopped_early=stopped)


def backbone_checksum(model: GenerationModel) -> str:
    """Checksum of every parameter outside the stage-two decoder trees."""
    return _param_checksum({
        name: p.tensor.data for name, p in model.named_parameters().items()
        if not (name.startswith("eps_model.") or name.startswith("kp_projection.")
                or name.startswith("state_decoder."))})


# ---------------------------------------------------------------------------
# scaling sweep


@dataclass
class SweepResult:
    rows: list[dict]
    slope_vs_data: dict[str, float | None]
    slope_vs_params: dict[int, float | None]
    curves: dict = field(default_factory=dict)   # (preset, size) -> [(step, eval)]


def fit_loglog_slope(xs, ys) -> float | None:
    """Least-squares slope of log(y) against log(x); None if under-determined."""
    pts = [(x, y) for x, y in zip(xs, ys)
           if x is not None and y is not None and x > 0 and y > 0 and np.isfinite(y)]
    if len(pts) < 2:
        return None
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    return float(np.polyfit(lx, ly, 1)[0])


def scaling_sweep(presets: list[str], sizes: list[int], config: TrainConfig,
                  flags: ModelFlags | None = None,
                  progress=None) -> SweepResult:
    """Converged eval loss over a (model size x dataset size) grid.

    Datasets nest (size n uses generation seeds 1..n), raster caches are
    shared across presets for a given size, and each cell trains to the
    early-stopping rule. Diverged cells are recorded and skipped by the
    slope fits.
    """
    flags = flags or ModelFlags(use_proposal=False, use_keypoints=True,
                                kp_order="bkwd", kp_decoder="mlp")
    rows: list[dict] = []
    curves: dict = {}
    for size in sorted(sizes):
        dataset = build_dataset(size, seed=1)
        cache = RasterCache(dataset.samples, config.resolution)
        for preset in presets:
            cfg_model = get_preset(preset)
            cell = {"preset": preset, "param_count": backbone_param_count(cfg_model),
                    "dataset_size": size, "converged_eval_loss": None,
                    "steps_to_converge": None, "failed": False}
            if progress:
                progress(f"sweep cell preset={preset} size={size}")
            try:
                model = GenerationModel(cfg_model, flags, seed=config.seed,
                                        resolution=config.resolution)
                result = train_stage_backbone(dataset, model, config, cache=cache)
                cell["converged_eval_loss"] = result.best_eval
                cell["steps_to_converge"] = result.best_eval_step()
                curves[(preset, size)] = [(r["step"], r["eval_loss"])
                                          for r in result.curve
                                          if r["eval_loss"] is not None]
            except NonFiniteGradError:
                cell["failed"] = True
            rows.append(cell)
    slope_vs_data = {}
    for preset in presets:
        cells = [r for r in rows if r["preset"] == preset]
        slope_vs_data[preset] = fit_loglog_slope(
            [c["dataset_size"] for c in cells],
            [c["converged_eval_loss"] for c in cells])
    slope_vs_params = {}
    for size in sizes:
        cells = [r for r in rows if r["dataset_size"] == size]
        slope_vs_params[size] = fit_loglog_slope(
            [c["param_count"] for c in cells],
            [c["converged_eval_loss"] for c in cells])
    return SweepResult(rows=rows, slope_vs_data=slope_vs_data,
                       slope_vs_params=slope_vs_params, curves=curves)


def steps_to_threshold(curve: list[tuple[int, float]], threshold: float) -> int | None:
    """First eval step at which the loss reaches the threshold."""
    for step, loss in curve:
        if loss <= threshold:
            return step
    return None


# ---------------------------------------------------------------------------
# CSV output


def write_curve_csv(path: str, curve: list[dict]) -> None:
    if not curve:
        return
    fields = list(curve[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in curve:
            writer.writerow(row)


def write_sweep_csv(path: str, result: SweepResult) -> None:
    fields = ["preset", "param_count", "dataset_size", "converged_eval_loss",
              "steps_to_converge", "failed"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: row[k] for k in fields})
