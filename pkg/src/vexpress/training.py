"""Three-stage progressive training with conditional dropout and exact resume.

Stage 1 trains the reference encoder, keypoint guider, and U-Net core on
single frames; stage 2 trains only the audio projection and the audio/motion
attention layers on full clips; stage 3 fine-tunes everything. All per-step
randomness (batch choice, timesteps, noise, dropout) derives from
(seed, stage, step), so an interrupted run resumed from a checkpoint replays
the identical trajectory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import LatentCodec, NoiseSchedule, denoising_loss, mouth_masks_for_frames, q_sample
from .errors import DataError, InvalidInputError, StageOrderError
from .geometry import render_sequence
from .network import VExpressModel
from .vxt import read_vxt, write_vxt

STAGE_GROUPS: dict[int, frozenset[str]] = {
    1: frozenset({"reference_net", "vkps_guider", "unet_core"}),
    2: frozenset({"audio_projection", "audio_attention", "motion_attention"}),
    3: frozenset(
        {
            "reference_net",
            "vkps_guider",
            "unet_core",
            "audio_projection",
            "audio_attention",
            "motion_attention",
        }
    ),
}
DROPOUT_ACTIVE_STAGES = (2, 3)


@dataclass(frozen=True)
class StagePlan:
    stage: int
    frames_per_sample: int
    trainable_groups: frozenset[str]


def make_stage_plan(stage: int, clip_frames: int = 12) -> StagePlan:
    if stage not in STAGE_GROUPS:
        raise InvalidInputError(f"stage must be 1, 2 or 3, got {stage}")
    return StagePlan(stage, 1 if stage == 1 else clip_frames, STAGE_GROUPS[stage])


@dataclass(frozen=True)
class DropoutConfig:
    p_vkps: float = 0.5
    p_ref: float = 0.2
    per_sample: bool = False

    def __post_init__(self):
        for name in ("p_vkps", "p_ref"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidInputError(f"{name} must be in [0, 1], got {p}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 7
    learning_rate: float = 1e-4
    batch_size: int = 4
    steps: int = 1000
    w_mouth: float = 100.0
    grad_clip_norm: float = 1.0
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    checkpoint_every: int = 0  # 0: checkpoint only at stage end
    line_width: int = 2

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidInputError(f"steps must be >= 1, got {self.steps}")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of hashable parts."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def sample_dropout_mask(f: int, cfg: DropoutConfig, rng: np.random.Generator):
    """Per-frame Bernoulli zeroing flags for (vkps, ref); True means zero out."""
    if f < 1:
        raise InvalidInputError(f"frame count must be >= 1, got {f}")
    if cfg.per_sample:
        vkps = np.repeat(rng.random() < cfg.p_vkps, f)
        ref = np.repeat(rng.random() < cfg.p_ref, f)
    else:
        vkps = rng.random(f) < cfg.p_vkps
        ref = rng.random(f) < cfg.p_ref
    return vkps, ref


class Adam:
    """Minimal Adam with bias correction; state round-trips through float32."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named_params}
        self.v = {n: torch.zeros_like(p) for n, p in self.named_params}

    @torch.no_grad()
    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            self.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.add_(-self.lr * m_hat / (v_hat.sqrt() + self.eps))

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.named_params:
            out[f"m/{name}"] = self.m[name].detach().cpu().numpy()
            out[f"v/{name}"] = self.v[name].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name, p in self.named_params:
            self.m[name] = torch.from_numpy(arrays[f"m/{name}"]).to(p.dtype).reshape(p.shape)
            self.v[name] = torch.from_numpy(arrays[f"v/{name}"]).to(p.dtype).reshape(p.shape)


@dataclass
class TrainBatch:
    frames: torch.Tensor  # (b, f, 3, H, W) in [0, 1]
    vkps_raster: torch.Tensor  # (b, f, 3, H, W)
    audio_context: torch.Tensor  # (b, f, n_ctx, d_a)
    reference: torch.Tensor  # (b, 3, H, W)
    mouth_mask: torch.Tensor  # (b, f, 1, lh, lw)


class ClipDataset:
    """In-memory view over synthetic clips with cached rasters and masks."""

    def __init__(self, samples, latent_dims: tuple[int, int], downscale: int, line_width: int = 2):
        if not samples:
            raise DataError("dataset is empty")
        self.samples = list(samples)
        self.latent_dims = latent_dims
        self.downscale = downscale
        self.line_width = line_width
        self._raster_cache: dict[int, np.ndarray] = {}
        self._mask_cache: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.samples)

    def clip_frames(self) -> int:
        return self.samples[0].frames.shape[0]

    def rasters(self, idx: int) -> np.ndarray:
        if idx not in self._raster_cache:
            self._raster_cache[idx] = render_sequence(
                self.samples[idx].kps_seq, self.line_width
            )
        return self._raster_cache[idx]

    def masks(self, idx: int) -> torch.Tensor:
        if idx not in self._mask_cache:
            self._mask_cache[idx] = mouth_masks_for_frames(
                self.samples[idx].kps_seq.frames, self.latent_dims, self.downscale
            )
        return self._mask_cache[idx]


def make_batch(
    dataset: ClipDataset, plan: StagePlan, batch_size: int, rng: np.random.Generator
) -> TrainBatch:
    """Assemble a seed-determined batch; stage 1 draws single random frames."""
    idx = rng.integers(0, len(dataset), size=batch_size)
    clip_len = dataset.clip_frames()
    if plan.frames_per_sample > clip_len:
        raise InvalidInputError(
            f"stage needs {plan.frames_per_sample} frames, clips have {clip_len}"
        )
    frames, rasters, contexts, refs, masks = [], [], [], [], []
    for i in idx:
        sample = dataset.samples[i]
        if plan.frames_per_sample == 1:
            j = int(rng.integers(0, clip_len))
            sl = slice(j, j + 1)
        else:
            sl = slice(0, plan.frames_per_sample)
        frames.append(sample.frames[sl])
        rasters.append(dataset.rasters(i)[sl])
        contexts.append(sample.audio_context[sl])
        masks.append(dataset.masks(i)[sl])
        refs.append(sample.reference_frame)
    return TrainBatch(
        frames=torch.from_numpy(np.stack(frames)),
        vkps_raster=torch.from_numpy(np.stack(rasters)),
        audio_context=torch.from_numpy(np.stack(contexts)),
        reference=torch.from_numpy(np.stack(refs)),
        mouth_mask=torch.stack(masks),
    )


def train_step(
    model: VExpressModel,
    batch: TrainBatch,
    plan: StagePlan,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    codec: LatentCodec,
    optimizer: Adam,
    rng: np.random.Generator,
) -> float:
    """One optimization step; only parameters in the stage's groups move."""
    b, f = batch.frames.shape[:2]
    if f != plan.frames_per_sample:
        raise InvalidInputError(f"batch has {f} frames, stage expects {plan.frames_per_sample}")
    z0 = codec.encode(batch.frames).to(torch.float32)
    ref_latent = codec.encode(batch.reference).to(torch.float32)

    t = torch.from_numpy(rng.integers(1, sched.T + 1, size=b))
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape)).astype(np.float32))
    z_t = q_sample(z0, t, eps, sched)

    vkps_feat = model.vkps_guider(batch.vkps_raster)
    ref_zero = None
    if plan.stage in DROPOUT_ACTIVE_STAGES:
        vkps_rows, ref_rows = [], []
        for _ in range(b):
            v, r = sample_dropout_mask(f, cfg.dropout, rng)
            vkps_rows.append(v)
            ref_rows.append(r)
        vkps_mask = torch.from_numpy(np.stack(vkps_rows))
        ref_zero = torch.from_numpy(np.stack(ref_rows))
        keep = (~vkps_mask).to(vkps_feat.dtype)[:, :, None, None, None]
        vkps_feat = vkps_feat * keep

    ref_feats = model.reference_net(ref_latent)
    audio_tokens = model.audio_projection(batch.audio_context)
    eps_pred = model.denoiser(z_t, t, ref_feats, vkps_feat, audio_tokens, ref_zero=ref_zero)
    loss = denoising_loss(eps_pred, eps, batch.mouth_mask, cfg.w_mouth)

    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for _, p in optimizer.named_params], cfg.grad_clip_norm
        )
    optimizer.step()
    return float(loss.item())


def set_stage_trainability(model: VExpressModel, plan: StagePlan) -> list[tuple[str, torch.nn.Parameter]]:
    """Freeze everything outside the stage's groups; returns trainable params."""
    trainable = []
    for name, p in model.named_parameters():
        active = model.group_of(name) in plan.trainable_groups
        p.requires_grad_(active)
        if active:
            trainable.append((name, p))
    return trainable


def save_checkpoint(
    out_dir: str | Path,
    model: VExpressModel,
    optimizer: Adam | None,
    *,
    cfg_dict: dict,
    seed: int,
    stage: int,
    step: int,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"groups": {}, "cfg": cfg_dict, "seed": seed, "stage": stage, "step": step}
    for group, params in model.parameter_groups().items():
        fname = f"group_{group}.vxt"
        write_vxt(out / fname, {n: p.detach().cpu().numpy() for n, p in params})
        manifest["groups"][group] = fname
    if optimizer is not None:
        write_vxt(out / "optimizer.vxt", optimizer.state_arrays())
        manifest["optimizer"] = {
            "file": "optimizer.vxt",
            "t": optimizer.t,
            "lr": optimizer.lr,
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(ckpt_dir: str | Path, model: VExpressModel) -> dict:
    """Load group weights into the model; returns the parsed manifest."""
    ckpt = Path(ckpt_dir)
    manifest_path = ckpt / "manifest.json"
    if not manifest_path.exists():
        raise StageOrderError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    with torch.no_grad():
        for group, fname in manifest["groups"].items():
            arrays = read_vxt(ckpt / fname)
            for name, p in model.parameter_groups()[group]:
                if name not in arrays:
                    raise DataError(f"checkpoint {ckpt} missing parameter {name}")
                p.copy_(torch.from_numpy(arrays[name]).reshape(p.shape))
    return manifest


def load_optimizer_state(ckpt_dir: str | Path, manifest: dict, optimizer: Adam) -> None:
    info = manifest.get("optimizer")
    if info is None:
        return
    arrays = read_vxt(Path(ckpt_dir) / info["file"])
    optimizer.load_state_arrays(arrays, int(info["t"]))


def run_stage(
    dataset: ClipDataset,
    model: VExpressModel,
    cfg: TrainConfig,
    stage: int,
    sched: NoiseSchedule,
    codec: LatentCodec,
    out_dir: str | Path | None = None,
    *,
    cfg_dict: dict | None = None,
    start_step: int = 0,
    optimizer: Adam | None = None,
    log_every: int = 0,
) -> tuple[list[float], Adam]:
    """Run (steps - start_step) training steps of one stage.

    Returns the loss history of the executed steps and the optimizer (so a
    caller may continue or checkpoint). Checkpoints land in ``out_dir`` with
    the loss CSV appended as ``loss.csv``.
    """
    plan = make_stage_plan(stage, dataset.clip_frames())
    trainable = set_stage_trainability(model, plan)
    if optimizer is None:
        optimizer = Adam(trainable, lr=cfg.learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    csv_path = out / "loss.csv" if out is not None else None
    if csv_path is not None and (start_step == 0 or not csv_path.exists()):
        out.mkdir(parents=True, exist_ok=True)
        csv_path.write_text("step,stage,loss\n")

    history: list[float] = []
    for step in range(start_step, cfg.steps):
        rng = derive_rng(cfg.seed, "train", stage, step)
        batch = make_batch(dataset, plan, cfg.batch_size, rng)
        loss = train_step(model, batch, plan, cfg, sched, codec, optimizer, rng)
        history.append(loss)
        if csv_path is not None:
            with open(csv_path, "a") as fh:
                fh.write(f"{step},{stage},{loss:.8f}\n")
        if log_every and (step + 1) % log_every == 0:
            recent = history[-log_every:]
            print(f"stage {stage} step {step + 1}/{cfg.steps} loss {np.mean(recent):.5f}")
        should_ckpt = out is not None and (
            step + 1 == cfg.steps
            or (cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0)
        )
        if should_ckpt:
            save_checkpoint(
                out,
                model,
                optimizer,
                cfg_dict=cfg_dict or {},
                seed=cfg.seed,
                stage=stage,
                step=step + 1,
            )
    return history, optimizer
