"""Command-line surface: synth-data, train, generate, retarget, eval."""

from __future__ import annotations

import argparse
import json
import sys
import wave as wave_module
from pathlib import Path

import numpy as np
from PIL import Image

from .audio import load_waveform
from .config import RunConfig, load_config
from .errors import InvalidInputError, StageOrderError, VExpressError
from .geometry import FaceKeypoints, VKpsSequence, retarget_sequence
from .metrics import (
    EvalReport,
    extract_kps_from_synth,
    kps_distance,
    measure_openness_series,
    pearson,
    sweep_to_csv,
)
from .network import init_model
from .pipeline import GenerationConfig, generate
from .synthdata import load_dataset, measure_mouth_openness, write_dataset
from .training import (
    Adam,
    ClipDataset,
    TrainConfig,
    load_checkpoint,
    load_optimizer_state,
    make_stage_plan,
    run_stage,
    set_stage_trainability,
)
from .vxt import read_vxt


def load_image(path: str | Path) -> np.ndarray:
    """RGB PNG -> (3, H, W) float32 in [0, 1]."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return img.transpose(2, 0, 1)


def save_image(path: str | Path, frame: np.ndarray) -> None:
    arr = np.clip(frame, 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_audio_file(path: str | Path) -> tuple[np.ndarray, bool]:
    """Returns (data, is_embeddings). Accepts VXT embeddings, RIFF WAV, raw f32."""
    path = Path(path)
    head = path.read_bytes()[:8]
    if head[:8] == b"VXTENSOR":
        arrays = read_vxt(path)
        if "embeddings" not in arrays:
            raise InvalidInputError(f"{path}: VXT audio must contain an 'embeddings' array")
        return arrays["embeddings"], True
    if head[:4] == b"RIFF":
        with wave_module.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise InvalidInputError(f"{path}: only mono WAV is supported")
            if wf.getframerate() != 16_000:
                raise InvalidInputError(f"{path}: expected 16 kHz, got {wf.getframerate()}")
            raw = wf.readframes(wf.getnframes())
            width = wf.getsampwidth()
        if width == 2:
            return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, False
        if width == 4:
            return np.frombuffer(raw, dtype="<f4").astype(np.float64), False
        raise InvalidInputError(f"{path}: unsupported WAV sample width {width}")
    return load_waveform(path), False


def _model_from_config(cfg: RunConfig):
    return init_model(cfg.model, cfg.train.seed, max_timestep=cfg.diffusion.timesteps)


def _find_checkpoint(cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    base = Path(cfg.paths.checkpoint_dir)
    for stage in (3, 2, 1):
        cand = base / f"stage{stage}"
        if (cand / "manifest.json").exists():
            return cand
    raise StageOrderError(f"no checkpoint found under {base}; run `vexpress train` first")


def cmd_synth_data(cfg: RunConfig, args) -> int:
    out_dir = Path(args.out or cfg.paths.dataset_dir)
    frames = args.frames or cfg.data.clip_frames
    names = write_dataset(
        out_dir,
        count=args.count,
        seed=args.seed,
        n_frames=frames,
        height=cfg.data.image_size,
        width=cfg.data.image_size,
        d_a=cfg.model.audio_dim,
        audio_seed=cfg.data.audio_stub_seed,
        context_radius=cfg.model.context_radius,
        fps=cfg.pipeline.fps,
    )
    print(
        f"wrote {len(names)} samples ({frames} frames at "
        f"{cfg.data.image_size}x{cfg.data.image_size}) to {out_dir}"
    )
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    stage = args.stage
    model = _model_from_config(cfg)
    ckpt_base = Path(cfg.paths.checkpoint_dir)
    stage_dir = ckpt_base / f"stage{stage}"

    start_step = 0
    optimizer = None
    if args.resume:
        manifest = load_checkpoint(stage_dir, model)
        if manifest["stage"] != stage:
            raise StageOrderError(
                f"checkpoint at {stage_dir} is for stage {manifest['stage']}, not {stage}"
            )
        start_step = manifest["step"]
    elif stage > 1:
        prev = ckpt_base / f"stage{stage - 1}"
        if not (prev / "manifest.json").exists():
            raise StageOrderError(
                f"stage {stage} requires a stage-{stage - 1} checkpoint at {prev}"
            )
        load_checkpoint(prev, model)

    samples = load_dataset(cfg.paths.dataset_dir)
    codec = cfg.make_codec()
    latent_hw = cfg.data.image_size // cfg.diffusion.codec_downscale
    dataset = ClipDataset(
        samples, (latent_hw, latent_hw), cfg.diffusion.codec_downscale, cfg.data.line_width
    )
    settings = cfg.train.stage_settings(stage)
    train_cfg = TrainConfig(
        seed=cfg.train.seed,
        learning_rate=settings.learning_rate or cfg.train.learning_rate,
        batch_size=settings.batch_size,
        steps=settings.steps,
        w_mouth=cfg.train.w_mouth,
        grad_clip_norm=cfg.train.grad_clip_norm,
        dropout=cfg.train.dropout,
        checkpoint_every=cfg.train.checkpoint_every,
        line_width=cfg.data.line_width,
    )
    if args.resume:
        plan = make_stage_plan(stage, dataset.clip_frames())
        trainable = set_stage_trainability(model, plan)
        optimizer = Adam(trainable, lr=train_cfg.learning_rate)
        load_optimizer_state(stage_dir, json.loads((stage_dir / "manifest.json").read_text()), optimizer)

    sched = cfg.make_schedule()
    history, _ = run_stage(
        dataset,
        model,
        train_cfg,
        stage,
        sched,
        codec,
        stage_dir,
        cfg_dict=cfg.to_dict(),
        start_step=start_step,
        optimizer=optimizer,
        log_every=args.log_every,
    )
    if history:
        print(f"stage {stage}: {len(history)} steps, final loss {history[-1]:.5f}")
    else:
        print(f"stage {stage}: checkpoint already at {start_step} steps, nothing to do")
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    model = _model_from_config(cfg)
    ckpt = _find_checkpoint(cfg, args.checkpoint)
    load_checkpoint(ckpt, model)

    reference = load_image(args.ref)
    audio, is_emb = load_audio_file(args.audio)
    kps_seq = VKpsSequence.load(args.kps)
    ref_kps = None
    if args.ref_kps:
        ref_kps = VKpsSequence.load(args.ref_kps).frames[0]

    gen_cfg = GenerationConfig(
        sched=cfg.make_schedule(),
        codec=cfg.make_codec(),
        ddim_steps=cfg.diffusion.ddim_steps,
        segment_length=cfg.pipeline.segment_length,
        overlap=cfg.pipeline.overlap,
        fps=args.fps or cfg.pipeline.fps,
        rounding=cfg.pipeline.rounding,
        seed=args.seed,
        audio_dim=cfg.model.audio_dim,
        audio_seed=cfg.data.audio_stub_seed,
        context_radius=cfg.model.context_radius,
        line_width=cfg.data.line_width,
        lambda_ref=args.lambda_ref,
        lambda_audio=args.lambda_audio,
    )
    frames = generate(reference, audio, kps_seq, model, gen_cfg, ref_kps, is_emb)

    out_dir = Path(args.out or cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_image(out_dir / f"frame_{i:05d}.png", frame)
    sidecar = {
        "fps": gen_cfg.fps,
        "n": int(frames.shape[0]),
        "seed": args.seed,
        "config_hash": cfg.config_hash(),
        "checkpoint": str(ckpt),
    }
    (out_dir / "generation.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"wrote {frames.shape[0]} frames to {out_dir}")
    return 0


def cmd_retarget(cfg: RunConfig, args) -> int:
    seq = VKpsSequence.load(args.kps)
    ref = VKpsSequence.load(args.ref_kps).frames[0]
    out = retarget_sequence(seq, ref)
    text = out.to_json()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote retargeted keypoints to {args.out}")
    else:
        print(text)
    return 0


def _clip_dirs(root: Path) -> list[Path]:
    if sorted(root.glob("frame_*.png")):
        return [root]
    subs = sorted(p for p in root.iterdir() if p.is_dir() and sorted(p.glob("frame_*.png")))
    if not subs:
        raise InvalidInputError(f"{root}: no frame_*.png files or clip subdirectories")
    return subs


def _load_clip(clip_dir: Path) -> np.ndarray:
    paths = sorted(clip_dir.glob("frame_*.png"))
    return np.stack([load_image(p) for p in paths])


def cmd_eval(cfg: RunConfig, args) -> int:
    gen_clips = _clip_dirs(Path(args.generated))
    truth_clips = _clip_dirs(Path(args.truth))
    if len(gen_clips) != len(truth_clips):
        raise InvalidInputError(
            f"clip count mismatch: {len(gen_clips)} generated vs {len(truth_clips)} truth"
        )
    distances: list[float] = []
    gen_series: list[float] = []
    truth_series: list[float] = []
    evaluated = 0
    skipped = 0
    for g_dir, t_dir in zip(gen_clips, truth_clips):
        g_frames = _load_clip(g_dir)
        t_frames = _load_clip(t_dir)
        if g_frames.shape[0] != t_frames.shape[0]:
            raise InvalidInputError(
                f"frame count mismatch in {g_dir.name}: "
                f"{g_frames.shape[0]} vs {t_frames.shape[0]}"
            )
        for gf, tf in zip(g_frames, t_frames):
            try:
                t_kps = extract_kps_from_synth(tf)
            except VExpressError:
                skipped += 1
                continue
            truth_series.append(measure_mouth_openness(tf, t_kps))
            gen_series.append(measure_mouth_openness(gf, t_kps))
            evaluated += 1
            try:
                g_kps = extract_kps_from_synth(gf)
            except VExpressError:
                skipped += 1
                continue
            d = np.linalg.norm(g_kps.as_array() - t_kps.as_array(), axis=1).mean()
            distances.append(float(d))

    kps_dis = float(np.mean(distances)) if distances else float("nan")
    lipsync_r = pearson(np.array(gen_series), np.array(truth_series))

    sweep_rows = []
    for spec_str in args.sweep or []:
        lam_text, _, sweep_dir = spec_str.partition("=")
        if not sweep_dir:
            raise InvalidInputError(f"--sweep expects LAMBDA=DIR, got {spec_str!r}")
        energies = []
        for clip in _clip_dirs(Path(sweep_dir)):
            frames = _load_clip(clip)
            series = measure_openness_series(frames)
            energies.append(float(series.var()))
        sweep_rows.append((float(lam_text), float(np.mean(energies))))

    report = EvalReport(
        kps_dis=kps_dis,
        lipsync_r=lipsync_r,
        lambda_sweep=tuple(sweep_rows),
        frames_evaluated=evaluated,
        frames_skipped=skipped,
    )
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        if sweep_rows:
            Path(args.out).with_suffix(".sweep.csv").write_text(sweep_to_csv(sweep_rows))
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vexpress",
        description="Audio- and keypoint-conditioned portrait video generation (desk scale)",
    )
    parser.add_argument("--config", help="path to the run-config JSON (or $VEXPRESS_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, help="frames per clip (default: config)")
    p.add_argument("--out", help="override paths.dataset_dir")

    p = sub.add_parser("train", help="run one progressive-training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("generate", help="synthesize a video from reference, audio, keypoints")
    p.add_argument("--ref", required=True, help="reference image PNG")
    p.add_argument("--audio", required=True, help="waveform (.f32/.wav) or embeddings (.vxt)")
    p.add_argument("--kps", required=True, help="V-Kps JSON sequence (required control signal)")
    p.add_argument("--fps", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref-kps", help="keypoints of the reference image, enables retargeting")
    p.add_argument("--checkpoint", help="checkpoint dir (default: newest stage)")
    p.add_argument("--out", help="override paths.output_dir")
    p.add_argument("--lambda-audio", type=float, dest="lambda_audio")
    p.add_argument("--lambda-ref", type=float, dest="lambda_ref")

    p = sub.add_parser("retarget", help="retarget a V-Kps sequence to a reference face")
    p.add_argument("--kps", required=True)
    p.add_argument("--ref-kps", required=True)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="compare generated clips against ground truth")
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--sweep", action="append", metavar="LAMBDA=DIR")
    return parser


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "retarget": cmd_retarget,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except VExpressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
