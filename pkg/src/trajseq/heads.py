"""Encoders and decoders around the backbone, plus the generation rollout.

Coordinates passing through the model are divided by COORD_SCALE so
supervised targets stay O(1); every public output is converted back to
meters. Key points travel through a latent space of d_model width: the
point encoder embeds them for the sequence, and the diffusion decoder
denoises in that same space before a learned projection recovers the
2-D point.

Diffusion follows the 10-step linear schedule from 0.01 to 0.9. The
reverse update is the exact algebraic inverse of the forward noising
step and is applied as a deterministic chain from a single Gaussian
draw; multimodality enters only through that draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .backbone import (CONTEXT_TOKENS, N_KEY_POINTS, N_STATE_TOKENS, ModelConfig,
                       TransformerBackbone, TransformerBlock, assemble_sequence)
from .errors import ConfigError, ContractError, ShapeError, StateError, StepError
from .raster import N_CHANNELS, RasterStack, dual_scope
from .rng import make_rng
from .scenario import KEY_POINT_OFFSETS_S, TrainingSample
from .tensorcore import Module, Tensor

COORD_SCALE = 10.0          # meters per model unit
DIFFUSION_STEPS = 10
BETA_START = 0.01
BETA_END = 0.9

KP_ORDERS = ("bkwd", "fwd")           # bkwd = farthest (8 s) key point first
KP_DECODERS = ("mlp", "diffusion")


# ---------------------------------------------------------------------------
# diffusion schedule and process


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with cumulative signal-retention products."""
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigError(f"betas must be a non-empty vector, got shape {b.shape}")
        if np.any(b <= 0.0) or np.any(b >= 1.0) or np.any(np.diff(b) <= 0.0):
            raise ConfigError("betas must be strictly increasing within (0, 1)")

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    @property
    def alphas_cum(self) -> np.ndarray:
        """Prefix products of (1 - beta_i)."""
        return np.cumprod(1.0 - self.betas)


def default_schedule() -> DiffusionSchedule:
    return DiffusionSchedule(betas=np.linspace(BETA_START, BETA_END, DIFFUSION_STEPS))


def _check_step(t_d: int, schedule: DiffusionSchedule) -> None:
    if not 1 <= t_d <= schedule.steps:
        raise StepError(f"diffusion step {t_d} outside 1..{schedule.steps}")


def forward_diffuse(latent: np.ndarray, t_d: int, schedule: DiffusionSchedule,
                    noise: np.ndarray | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """One forward noising step with index t_d applied to the given state.

    latent_td = sqrt(1 - beta_td) * latent + sqrt(beta_td) * noise.
    Iterating this for t_d = 1..T carries a clean latent into noise.
    """
    _check_step(t_d, schedule)
    latent = np.asarray(latent, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ContractError("forward_diffuse: provide noise or an rng")
        noise = rng.standard_normal(latent.shape)
    beta = schedule.betas[t_d - 1]
    return np.sqrt(1.0 - beta) * latent + np.sqrt(beta) * noise


def forward_diffuse_chain(latent0: np.ndarray, t_d: int, schedule: DiffusionSchedule,
                          noises: np.ndarray | None = None,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterate forward_diffuse from a clean latent through steps 1..t_d."""
    _check_step(t_d, schedule)
    x = np.asarray(latent0, dtype=np.float64)
    for t in range(1, t_d + 1):
        step_noise = None if noises is None else noises[t - 1]
        x = forward_diffuse(x, t, schedule, noise=step_noise, rng=rng)
    return x


def diffuse_marginal(latent0: np.ndarray, t_d: int, schedule: DiffusionSchedule,
                     eps: np.ndarray) -> np.ndarray:
    """Closed-form marginal of the chain: sqrt(acum)*x0 + sqrt(1-acum)*eps.

    Distribution-identical to forward_diffuse_chain with fresh per-step
    noise; this is the form the noise-prediction loss trains against.
    """
    _check_step(t_d, schedule)
    acum = schedule.alphas_cum[t_d - 1]
    return np.sqrt(acum) * np.asarray(latent0, dtype=np.float64) + np.sqrt(1.0 - acum) * eps


def reverse_step(latent_td: np.ndarray, eps_hat: np.ndarray, t_d: int,
                 schedule: DiffusionSchedule) -> np.ndarray:
    """Exact inverse of forward_diffuse given the (estimated) injected noise."""
    _check_step(t_d, schedule)
    beta = schedule.betas[t_d - 1]
    return (np.asarray(latent_td, dtype=np.float64)
            - np.sqrt(beta) * np.asarray(eps_hat, dtype=np.float64)) / np.sqrt(1.0 - beta)


# ---------------------------------------------------------------------------
# encoders


class _ResBlock(Module):
    def __init__(self, cin: int, cout: int, rng):
        super().__init__()
        self.conv1 = self.add_module("conv1", tc.Conv2d(cin, cout, 3, 2, 1, rng))
        self.conv2 = self.add_module("conv2", tc.Conv2d(cout, cout, 3, 1, 1, rng))
        self.skip = self.add_module("skip", tc.Conv2d(cin, cout, 1, 2, 0, rng))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(tc.silu(self.conv1(x)))
        return tc.silu(h + self.skip(x))


class _ScopeCnn(Module):
    """Residual stack over one raster scope, global-max-pooled to a vector.

    A 1x1 channel mix precedes the strided stem: the 33 input planes are
    near-binary occupancy masks, so mixing them first costs a fraction of
    a full-width 3x3 over all 33 channels.
    """

    WIDTHS = (16, 24, 32, 48, 64)

    def __init__(self, rng):
        super().__init__()
        w = self.WIDTHS
        self.mix = self.add_module("mix", tc.Conv2d(N_CHANNELS, w[0], 1, 1, 0, rng))
        self.stem = self.add_module("stem", tc.Conv2d(w[0], w[0], 3, 2, 1, rng))
        self.blocks = [
            self.add_module(f"block{i}", _ResBlock(w[i], w[i + 1], rng))
            for i in range(len(w) - 1)
        ]
        # occupancy rasters are sparse, so raw pooled activations come out
        # tiny; normalizing here keeps the context signal at unit scale
        self.norm = self.add_module("norm", tc.LayerNorm(w[-1]))

    @property
    def out_dim(self) -> int:
        return self.WIDTHS[-1]

    def __call__(self, x: Tensor) -> Tensor:
        h = tc.silu(self.stem(tc.silu(self.mix(x))))
        for blk in self.blocks:
            h = blk(h)
        return self.norm(tc.global_max_pool(h))


class ContextEncoder(Module):
    """Dual-scope raster encoder producing the 21 context embeddings.

    Each scope runs its own convolutional stack; pooled features are
    concatenated, projected to d_model, and the fused scene feature fills
    all 21 history-frame context slots (the position table downstream
    separates them).
    """

    def __init__(self, d_model: int, rng):
        super().__init__()
        self.d_model = d_model
        self.high = self.add_module("high", _ScopeCnn(rng))
        self.low = self.add_module("low", _ScopeCnn(rng))
        self.fuse = self.add_module("fuse",
                                    tc.Linear(self.high.out_dim + self.low.out_dim,
                                              d_model, rng, init_std=0.1))

    def __call__(self, high: Tensor, low: Tensor) -> Tensor:
        for name, t in (("high", high), ("low", low)):
            if t.ndim != 4 or t.shape[1] != N_CHANNELS:
                raise ShapeError(f"{name} raster batch {t.shape}, expected "
                                 f"(batch, {N_CHANNELS}, H, W)")
        feats = tc.concat([self.high(high), self.low(low)], axis=-1)
        fused = self.fuse(feats)                                   # (B, d)
        b = fused.shape[0]
        return tc.broadcast_to(tc.reshape(fused, (b, 1, self.d_model)),
                               (b, CONTEXT_TOKENS, self.d_model))


def rasters_to_batch(stacks: list[RasterStack]) -> np.ndarray:
    return np.stack([s.channels for s in stacks])


class PointEncoder(Module):
    """Single linear layer + Tanh embedding a scaled 2-D point.

    Shared by key-point tokens and proposal tokens. Outputs live in the
    open unit interval; float64 tanh only rounds to +-1.0 beyond
    pre-activations of ~19, far outside the scaled coordinate envelope.
    """

    def __init__(self, d_model: int, rng):
        super().__init__()
        self.lin = self.add_module("lin", tc.Linear(2, d_model, rng, init_std=0.25))

    def __call__(self, points: Tensor) -> Tensor:
        if isinstance(points, np.ndarray):
            points = Tensor(points)
        if not np.all(np.isfinite(points.data)):
            raise ContractError("point encoder: non-finite coordinates")
        if points.shape[-1] != 2:
            raise ShapeError(f"point encoder input {points.shape}, expected (..., 2)")
        return tc.tanh(self.lin(points))


def encode_keypoint(encoder: PointEncoder, point) -> Tensor:
    """Embed one (x, y) location already in model units."""
    return encoder(Tensor(np.asarray(point, dtype=np.float64)))


# ---------------------------------------------------------------------------
# decoders


@dataclass
class ProposalOutput:
    """Intention-vocabulary scores plus the continuous endpoint refinement."""
    logits: np.ndarray           # (K,)
    offset: np.ndarray           # (2,), model units

    def selected_point(self, vocab_points: np.ndarray) -> np.ndarray:
        """vocab[argmax logits] + offset, in the vocab's units."""
        if not np.all(np.isfinite(self.logits)):
            raise ContractError("proposal logits must be finite")
        return vocab_points[int(np.argmax(self.logits))] + self.offset


class ProposalHeads(Module):
    """Classification logits over the intention vocabulary plus a 2-D offset."""

    def __init__(self, d_model: int, vocab_size: int, rng):
        super().__init__()
        self.vocab_size = vocab_size
        self.cls = self.add_module("cls", tc.Linear(d_model, vocab_size, rng))
        self.offset = self.add_module("offset", tc.Linear(d_model, 2, rng))

    def __call__(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(hidden), self.offset(hidden)

    def propose(self, hidden: Tensor) -> ProposalOutput:
        """Single-vector convenience wrapper returning plain arrays."""
        logits, offset = self(hidden)
        return ProposalOutput(logits=np.asarray(logits.data).reshape(-1),
                              offset=np.asarray(offset.data).reshape(-1))


def select_top_k(logits: np.ndarray, k: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Top-k proposal indices (logit descending, ties to the lower index)
    and their renormalized softmax scores."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if k > logits.size:
        raise ConfigError(f"top-k {k} exceeds vocabulary size {logits.size}")
    order = np.argsort(-logits, kind="stable")[:k]
    sel = logits[order]
    e = np.exp(sel - sel.max())
    return order, e / e.sum()


class MlpHead(Module):
    """Two-layer SiLU MLP head used by key-point and state decoders."""

    def __init__(self, d_model: int, out_dim: int, rng):
        super().__init__()
        self.fc = self.add_module("fc", tc.Linear(d_model, d_model, rng))
        self.out = self.add_module("out", tc.Linear(d_model, out_dim, rng))

    def __call__(self, hidden: Tensor) -> Tensor:
        return self.out(tc.silu(self.fc(hidden)))


class EpsPredictor(Module):
    """g_theta(latent_td, condition, t_d) -> estimated injected noise.

    A small pre-norm transformer over three role tokens
    [condition, step embedding, noisy latent]; the prediction reads the
    hidden state at the latent token.
    """

    def __init__(self, d_model: int, layers: int, heads: int, rng,
                 steps: int = DIFFUSION_STEPS):
        super().__init__()
        self.steps = steps
        self.d_model = d_model
        cfg = ModelConfig(layers=layers, d_model=d_model,
                          d_inner=4 * d_model, heads=heads, preset="eps")
        self.step_table = self.register("step_table", rng.normal(0.0, 0.02, (steps, d_model)))
        self.role_table = self.register("role_table", rng.normal(0.0, 0.02, (3, d_model)))
        self.blocks = [self.add_module(f"block{i}", TransformerBlock(cfg, rng))
                       for i in range(layers)]
        self.out = self.add_module("out", tc.Linear(d_model, d_model, rng))

    def __call__(self, latent: Tensor, cond: Tensor, t_d) -> Tensor:
        if isinstance(latent, np.ndarray):
            latent = Tensor(latent)
        if isinstance(cond, np.ndarray):
            cond = Tensor(cond)
        squeeze = latent.ndim == 1
        if squeeze:
            latent = tc.reshape(latent, (1, -1))
            cond = tc.reshape(cond, (1, -1))
        if latent.shape != cond.shape or latent.shape[-1] != self.d_model:
            raise ShapeError(f"eps predictor: latent {latent.shape} vs cond {cond.shape} "
                             f"(d_model {self.d_model})")
        t = np.atleast_1d(np.asarray(t_d, dtype=np.int64))
        if np.any(t < 1) or np.any(t > self.steps):
            raise StepError(f"diffusion step {t_d} outside 1..{self.steps}")
        if t.size == 1 and latent.shape[0] > 1:
            t = np.full(latent.shape[0], t[0], dtype=np.int64)
        b, d = latent.shape
        step_emb = tc.embedding_lookup(self.step_table, t - 1)
        tokens = tc.concat([tc.reshape(cond, (b, 1, d)),
                            tc.reshape(step_emb, (b, 1, d)),
                            tc.reshape(latent, (b, 1, d))], axis=1)
        tokens = tokens + tc.broadcast_to(tc.reshape(self.role_table, (1, 3, d)),
                                          (b, 3, d))
        for blk in self.blocks:
            tokens = blk(tokens)
        eps = self.out(tokens[:, 2, :])
        return tc.reshape(eps, (d,)) if squeeze else eps


@dataclass
class KeyPointLatent:
    """A d_model latent and its projected 2-D point (model units)."""
    vector: np.ndarray
    decoded_point: np.ndarray


class KeyPointProjection(Module):
    """Fixed linear map from the key-point latent space to (x, y)."""

    def __init__(self, d_model: int, rng):
        super().__init__()
        self.lin = self.add_module("lin", tc.Linear(d_model, 2, rng))

    def __call__(self, latent: Tensor) -> Tensor:
        if isinstance(latent, np.ndarray):
            latent = Tensor(latent)
        return self.lin(latent)


def sample_keypoint(eps_model: EpsPredictor, projection: KeyPointProjection,
                    cond: np.ndarray, schedule: DiffusionSchedule,
                    rng: np.random.Generator) -> KeyPointLatent:
    """Draw z ~ N(0, I) and denoise it under the condition (standard DDPM).

    Each step forms the denoised estimate from the predicted noise, clips
    it to the tanh-bounded latent box, and samples the posterior for the
    previous step. The clip matters: this schedule reaches beta = 0.9, so
    an unclipped chain amplifies predictor error by 1/sqrt(alpha) per step
    and wanders off the latent manifold. Deterministic given the rng; the
    per-step posterior draws are what let distinct modes survive.
    """
    if eps_model is None or projection is None:
        raise StateError("sample_keypoint: diffusion decoder weights not attached")
    betas = schedule.betas
    acum = schedule.alphas_cum
    latent = rng.standard_normal(eps_model.d_model)
    with tc.no_grad():
        for t in range(schedule.steps, 0, -1):
            eps_hat = eps_model(latent, cond, t).data
            beta = betas[t - 1]
            ac_t = acum[t - 1]
            ac_prev = acum[t - 2] if t > 1 else 1.0
            x0_hat = (latent - np.sqrt(1.0 - ac_t) * eps_hat) / np.sqrt(ac_t)
            np.clip(x0_hat, -1.0, 1.0, out=x0_hat)
            if t > 1:
                mean = (np.sqrt(ac_prev) * beta * x0_hat
                        + np.sqrt(1.0 - beta) * (1.0 - ac_prev) * latent) / (1.0 - ac_t)
                var = beta * (1.0 - ac_prev) / (1.0 - ac_t)
                latent = mean + np.sqrt(var) * rng.standard_normal(latent.shape)
            else:
                latent = x0_hat
        point = projection(latent).data
    return KeyPointLatent(vector=latent, decoded_point=point)


# ---------------------------------------------------------------------------
# assembled generation model


@dataclass(frozen=True)
class ModelFlags:
    """Which optional sequence components and decoders a model was trained with."""
    use_proposal: bool = False
    use_keypoints: bool = True
    kp_order: str = "bkwd"
    kp_decoder: str = "mlp"
    top_k: int = 6

    def __post_init__(self):
        if self.kp_order not in KP_ORDERS:
            raise ConfigError(f"kp_order {self.kp_order!r} not in {KP_ORDERS}")
        if self.kp_decoder not in KP_DECODERS:
            raise ConfigError(f"kp_decoder {self.kp_decoder!r} not in {KP_DECODERS}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")

    @property
    def sequence_name(self) -> str:
        parts = ["C"]
        if self.use_proposal:
            parts.append("P")
        if self.use_keypoints:
            parts.append("K")
        parts.append("S")
        return "".join(parts)


def kp_token_order(flags: ModelFlags) -> list[int]:
    """Indices into the canonical farthest-first key points, in token order."""
    idx = list(range(N_KEY_POINTS))
    return idx if flags.kp_order == "bkwd" else idx[::-1]


@dataclass
class TrajectoryPrediction:
    """Rollout output: per-mode future states in meters/radians."""
    modes: np.ndarray                    # (M, 80, 3)
    scores: np.ndarray                   # (M,), sums to 1
    key_points: np.ndarray | None        # (M, 5, 2) in emission order
    kp_offsets_s: tuple | None           # time offsets matching key_points


class GenerationModel(Module):
    """Context encoder + backbone + heads for one flag configuration."""

    def __init__(self, config: ModelConfig, flags: ModelFlags, seed: int,
                 vocab_points: np.ndarray | None = None, resolution: int = 64):
        super().__init__()
        if flags.use_proposal:
            if vocab_points is None:
                raise ConfigError("use_proposal requires an intention vocabulary")
            vocab_points = np.asarray(vocab_points, dtype=np.float64)
            if flags.top_k > vocab_points.shape[0]:
                raise ConfigError(f"top_k {flags.top_k} exceeds vocabulary "
                                  f"{vocab_points.shape[0]}")
        self.config = config
        self.flags = flags
        self.seed = seed
        self.resolution = resolution
        self.vocab_points = vocab_points
        d = config.d_model
        rng = make_rng(seed, "model", config.preset, flags.sequence_name)
        self.encoder = self.add_module("encoder", ContextEncoder(d, rng))
        self.backbone = self.add_module("backbone", TransformerBackbone(config, rng))
        self.point_encoder = self.add_module("point_encoder", PointEncoder(d, rng))
        self.state_queries = self.register("state_queries",
                                           rng.normal(0.0, 0.02, (N_STATE_TOKENS, d)))
        self.state_decoder = self.add_module("state_decoder", MlpHead(d, 3, rng))
        if flags.use_keypoints:
            self.kp_mlp = self.add_module("kp_mlp", MlpHead(d, 2, rng))
        else:
            self.kp_mlp = None
        if flags.use_proposal:
            self.proposal_heads = self.add_module(
                "proposal_heads", ProposalHeads(d, vocab_points.shape[0], rng))
        else:
            self.proposal_heads = None
        self.eps_model: EpsPredictor | None = None
        self.kp_projection: KeyPointProjection | None = None
        self.schedule = default_schedule()

    # backbone + encoder stay frozen during diffusion training; the
    # decoder attaches as a separate module tree
    def attach_diffusion(self, seed: int | None = None) -> None:
        if not self.flags.use_keypoints:
            raise ConfigError("diffusion key-point decoder needs use_keypoints")
        if self.eps_model is not None:
            return
        d = self.config.d_model
        rng = make_rng(self.seed if seed is None else seed, "diffusion", d)
        # one layer underfits the noise predictor enough to visibly hurt
        # sampling quality even at small widths; two is the desk floor
        self.eps_model = self.add_module(
            "eps_model", EpsPredictor(d, 2, self.config.heads, rng))
        self.kp_projection = self.add_module("kp_projection", KeyPointProjection(d, rng))

    def diffusion_parameters(self):
        if self.eps_model is None:
            return []
        return (list(self.eps_model.named_parameters().values())
                + list(self.kp_projection.named_parameters().values()))

    # ---- shared sequence plumbing -------------------------------------

    def _state_query_batch(self, b: int) -> Tensor:
        d = self.config.d_model
        return tc.broadcast_to(tc.reshape(self.state_queries, (1, N_STATE_TOKENS, d)),
                               (b, N_STATE_TOKENS, d))

    def scaled_vocab(self) -> np.ndarray:
        return self.vocab_points / COORD_SCALE

    def teacher_forced(self, batch: dict) -> dict:
        """Forward pass with ground-truth proposal/key-point tokens.

        batch carries numpy arrays: rasters_high, rasters_low (B,33,H,W),
        kp_points (B,5,2) scaled and already in token order, and
        proposal_index (B,) when proposals are enabled.
        """
        high = Tensor(batch["rasters_high"])
        low = Tensor(batch["rasters_low"])
        b = high.shape[0]
        context = self.encoder(high, low)
        proposal_emb = None
        if self.flags.use_proposal:
            pts = self.scaled_vocab()[batch["proposal_index"]]
            proposal_emb = tc.reshape(self.point_encoder(Tensor(pts)), (b, 1, -1))
        kp_emb = None
        if self.flags.use_keypoints:
            kp_emb = self.point_encoder(Tensor(batch["kp_points"]))
        tokens = assemble_sequence(context, proposal_emb, kp_emb,
                                   self._state_query_batch(b))
        hidden = self.backbone(tokens.embeddings)
        layout = tokens.layout
        out: dict = {"layout": layout}
        s0, s1 = layout.state_span
        out["state_pred"] = self.state_decoder(hidden[:, s0:s1, :])
        if self.flags.use_keypoints:
            k0, _ = layout.keypoint_span
            cond = hidden[:, k0 - 1:k0 - 1 + N_KEY_POINTS, :]
            out["kp_cond_hidden"] = cond
            out["kp_pred"] = self.kp_mlp(cond)
        if self.flags.use_proposal:
            c1 = layout.context_span[1]
            logits, offset = self.proposal_heads(hidden[:, c1 - 1, :])
            out["proposal_logits"] = logits
            out["proposal_offset"] = offset
        return out

    # ---- generation ----------------------------------------------------

    def _generate_keypoints(self, prefix: list[Tensor], rng) -> tuple[np.ndarray, list[Tensor]]:
        """Autoregressive key-point generation, one token at a time."""
        points = np.zeros((N_KEY_POINTS, 2))
        tokens = list(prefix)
        for m in range(N_KEY_POINTS):
            hidden = self.backbone(tc.concat(tokens, axis=1))
            cond = hidden[:, -1, :]
            if self.flags.kp_decoder == "diffusion":
                if self.eps_model is None:
                    raise StateError("rollout: diffusion decoder requested but no "
                                     "diffusion weights attached")
                kp = sample_keypoint(self.eps_model, self.kp_projection,
                                     cond.data[0], self.schedule, rng)
                point = kp.decoded_point
            else:
                point = self.kp_mlp(cond).data[0]
            points[m] = point
            emb = self.point_encoder(Tensor(point.reshape(1, 1, 2)))
            tokens.append(emb)
        return points, tokens

    def rollout(self, sample: TrainingSample, rng: np.random.Generator | None = None,
                flags: ModelFlags | None = None) -> TrajectoryPrediction:
        """Generate trajectories: score proposals, roll key points, decode states."""
        if flags is not None and flags != self.flags:
            raise ConfigError(f"rollout flags {flags} incompatible with model "
                              f"flags {self.flags}")
        if rng is None:
            rng = make_rng(0, "rollout", sample.sample_id)
        high, low = dual_scope(sample, self.resolution)
        with tc.no_grad():
            context = self.encoder(Tensor(high.channels[None]),
                                   Tensor(low.channels[None]))
            mode_prefixes: list[list[Tensor]] = []
            scores = np.array([1.0])
            if self.flags.use_proposal:
                hidden = self.backbone(context)
                logits, _ = self.proposal_heads(hidden[:, -1, :])
                top_idx, scores = select_top_k(logits.data[0], self.flags.top_k)
                for idx in top_idx:
                    pt = self.scaled_vocab()[idx].reshape(1, 1, 2)
                    mode_prefixes.append([context, self.point_encoder(Tensor(pt))])
            else:
                mode_prefixes.append([context])

            all_modes, all_kps = [], []
            for prefix in mode_prefixes:
                tokens = list(prefix)
                kp_points = None
                if self.flags.use_keypoints:
                    kp_points, tokens = self._generate_keypoints(tokens, rng)
                tokens.append(self._state_query_batch(1))
                hidden = self.backbone(tc.concat(tokens, axis=1))
                states = self.state_decoder(hidden[:, -N_STATE_TOKENS:, :]).data[0]
                traj = states.copy()
                traj[:, 0:2] *= COORD_SCALE
                all_modes.append(traj)
                if kp_points is not None:
                    all_kps.append(kp_points * COORD_SCALE)

        offsets = None
        kp_arr = None
        if self.flags.use_keypoints:
            order = kp_token_order(self.flags)
            offsets = tuple(KEY_POINT_OFFSETS_S[i] for i in order)
            kp_arr = np.stack(all_kps)
        return TrajectoryPrediction(modes=np.stack(all_modes), scores=scores,
                                    key_points=kp_arr, kp_offsets_s=offsets)
