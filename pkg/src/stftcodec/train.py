"""Dataset chunking, alternating adversarial optimization, checkpointing,
and the ablation driver.

One Trainer instance owns all mutable state (models, optimizers, RNGs, the
loss log). Batch sampling is sequential and seeded, so runs are deterministic
and checkpoints resume bit-identically on the same hardware.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import read_wav
from .discriminators import DiscriminatorEnsemble
from .generator import CodecModel, ConvNeXtBlock, GeneratorConfig
from .losses import (
    LossReport,
    LossWeights,
    MultiScaleMelLoss,
    feature_matching_loss,
    lsgan_losses,
    spectral_recon_loss,
    total_losses,
)
from .metrics import lsd, vuv_f1
from .quantizer import CodebookSpec, utilization_stats
from .spectral import StftConfig, extract_features, stft_analyze


class TrainError(ValueError):
    """Raised for invalid training configuration or aborted steps."""


ABLATION_VARIANTS = (
    "full", "no_unwrap", "no_convnext", "single_scale_disc", "spectral_recon",
)

TOKEN_HISTORY_LIMIT = 2048


@dataclass(frozen=True)
class TrainConfig:
    sample_rate: int = 48000
    chunk_samples: int = 15960
    batch_size: int = 64
    lr: float = 5e-5
    beta1: float = 0.8
    beta2: float = 0.99
    lr_decay: float = 0.999
    weight_decay: float = 1e-2
    max_steps: int = 100000
    seed: int = 0
    warmup_steps: int = 0
    decay_per_step: bool = False
    checkpoint_every: int = 0
    no_unwrap: bool = False
    no_convnext: bool = False
    single_scale_disc: bool = False
    spectral_recon: bool = False

    def __post_init__(self):
        if self.sample_rate <= 0 or self.chunk_samples <= 0 or self.batch_size <= 0:
            raise TrainError("sample_rate, chunk_samples, and batch_size must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise TrainError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.lr <= 0:
            raise TrainError("lr must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise TrainError(f"{name} must be in [0, 1)")
        if self.max_steps <= 0 or self.warmup_steps < 0:
            raise TrainError("max_steps must be positive and warmup_steps nonnegative")

    def validate_against(self, stft_config: StftConfig):
        if self.chunk_samples % stft_config.hop_length != 0:
            raise TrainError(
                f"chunk_samples {self.chunk_samples} not divisible by "
                f"hop_length {stft_config.hop_length}"
            )
        if self.sample_rate != stft_config.sample_rate:
            raise TrainError(
                f"config sample rate {self.sample_rate} does not match "
                f"analysis sample rate {stft_config.sample_rate}"
            )


def lr_schedule(epoch: int, base_lr: float = 5e-5, decay: float = 0.999) -> float:
    """lr = base_lr * decay**epoch."""
    if epoch < 0:
        raise TrainError(f"epoch must be nonnegative, got {epoch}")
    return base_lr * decay ** epoch


class ChunkDataset:
    """In-memory corpus with seeded uniform file and crop sampling.

    Sampling is sequential from one generator, which keeps batch order
    deterministic under a fixed seed; shorter files are zero-padded at the
    end to the chunk length.
    """

    def __init__(self, entries, cfg: TrainConfig):
        if not entries:
            raise TrainError("dataset needs at least one file")
        self.names = [name for name, _ in entries]
        self.arrays = [np.asarray(a, dtype=np.float32).ravel() for _, a in entries]
        self.chunk_samples = cfg.chunk_samples
        self._rng = np.random.default_rng(cfg.seed)

    @property
    def num_files(self) -> int:
        return len(self.arrays)

    def rng_state(self):
        return self._rng.bit_generator.state

    def set_rng_state(self, state):
        self._rng.bit_generator.state = state

    def sample_chunk(self) -> np.ndarray:
        x = self.arrays[int(self._rng.integers(self.num_files))]
        n = self.chunk_samples
        if len(x) >= n:
            start = int(self._rng.integers(len(x) - n + 1))
            return x[start:start + n]
        out = np.zeros(n, dtype=np.float32)
        out[:len(x)] = x
        return out

    def sample_batch(self, batch_size: int) -> torch.Tensor:
        chunks = [self.sample_chunk() for _ in range(batch_size)]
        return torch.from_numpy(np.stack(chunks))


def build_dataset(wav_dir, cfg: TrainConfig) -> ChunkDataset:
    """Index every WAV under wav_dir; rejects empty dirs and rate mismatches."""
    paths = sorted(Path(wav_dir).glob("*.wav"))
    if not paths:
        raise TrainError(f"no WAV files found in {wav_dir}")
    entries = [
        (str(p), read_wav(p, expected_sample_rate=cfg.sample_rate)[0]) for p in paths
    ]
    return ChunkDataset(entries, cfg)


def parameter_hash(module: torch.nn.Module) -> str:
    """Digest of all parameter values, used for isolation checks."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


_DEFAULT_MEL_SCALES = ((2048, 512, 128), (512, 128, 64))
_SINGLE_MEL_SCALE = ((1024, 256, 80),)


class Trainer:
    """Alternating discriminator/generator optimization over chunked audio.

    Each step runs the discriminator sub-step first (generator forwarded
    without gradient), then the generator sub-step minimizing the weighted
    total. Both sides use decoupled-weight-decay Adam with the same betas.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        dataset: ChunkDataset | None = None,
        *,
        stft_config: StftConfig | None = None,
        generator_config: GeneratorConfig | None = None,
        codebook_spec: CodebookSpec | None = None,
        disc_kwargs: dict | None = None,
        mel_scales=None,
        loss_weights: LossWeights | None = None,
        out_dir=None,
    ):
        self.cfg = cfg
        self.dataset = dataset
        torch.manual_seed(cfg.seed)

        self.stft_config = stft_config or StftConfig(sample_rate=cfg.sample_rate)
        cfg.validate_against(self.stft_config)
        gen_cfg = generator_config or GeneratorConfig(
            freq_bins=self.stft_config.num_bins
        )
        if cfg.no_unwrap:
            gen_cfg = dataclasses.replace(gen_cfg, use_phase_gradient=False)
        if cfg.no_convnext:
            gen_cfg = dataclasses.replace(gen_cfg, use_convnext=False)
        self.generator_config = gen_cfg
        self.codebook_spec = codebook_spec or CodebookSpec(
            input_dim=gen_cfg.latent_channels
        )

        self.disc_kwargs = dict(disc_kwargs or {})
        if "fft_sizes" not in self.disc_kwargs:
            # resolutions longer than the training chunk cannot form one frame
            usable = tuple(
                f for f in (2048, 1024, 512, 256, 128) if f <= cfg.chunk_samples
            )
            if not usable:
                raise TrainError(
                    f"chunk_samples {cfg.chunk_samples} is too short for every "
                    "default discriminator resolution; pass disc_kwargs"
                )
            self.disc_kwargs["fft_sizes"] = usable
        if cfg.single_scale_disc:
            ladder = tuple(self.disc_kwargs["fft_sizes"])
            single = 1024 if 1024 in ladder else ladder[len(ladder) // 2]
            self.disc_kwargs["fft_sizes"] = (single,)
        if mel_scales is not None:
            self.mel_scales = tuple(tuple(s) for s in mel_scales)
        else:
            usable_mel = tuple(
                s for s in _DEFAULT_MEL_SCALES if s[0] <= cfg.chunk_samples
            )
            if not usable_mel:
                raise TrainError(
                    f"chunk_samples {cfg.chunk_samples} is too short for every "
                    "default mel-loss resolution; pass mel_scales"
                )
            if cfg.single_scale_disc and _SINGLE_MEL_SCALE[0][0] <= cfg.chunk_samples:
                usable_mel = _SINGLE_MEL_SCALE
            self.mel_scales = usable_mel
        if cfg.single_scale_disc and len(self.mel_scales) != 1:
            self.mel_scales = self.mel_scales[:1]

        self.model = CodecModel(self.stft_config, gen_cfg, self.codebook_spec)
        self.discriminator = DiscriminatorEnsemble(**self.disc_kwargs)
        self.mel_loss = MultiScaleMelLoss(cfg.sample_rate, scales=self.mel_scales)
        base_weights = loss_weights or LossWeights()
        self.weights = dataclasses.replace(
            base_weights,
            spectral_recon_enabled=(
                cfg.spectral_recon or base_weights.spectral_recon_enabled
            ),
        )

        self.opt_g = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
        )
        self.opt_d = torch.optim.AdamW(
            self.discriminator.parameters(), lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
        )

        self.step = 0
        self.token_history: list[torch.Tensor] = []
        self.out_dir = Path(out_dir) if out_dir else None
        self._csv_started = False
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- scheduling ---------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        if self.dataset is None:
            return 1
        return max(1, math.ceil(self.dataset.num_files / self.cfg.batch_size))

    def current_lr(self) -> float:
        epoch = self.step if self.cfg.decay_per_step else self.step // self.steps_per_epoch
        return lr_schedule(epoch, self.cfg.lr, self.cfg.lr_decay)

    def _apply_lr(self) -> float:
        lr = self.current_lr()
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    # -- sub-steps ----------------------------------------------------------

    def discriminator_substep(self, batch: torch.Tensor) -> float:
        """Forward the generator without gradient, minimize adv_d."""
        with torch.no_grad():
            fake = self.model(batch).audio
        self.opt_d.zero_grad(set_to_none=True)
        real_out = self.discriminator(batch)
        fake_out = self.discriminator(fake)
        _, adv_d = lsgan_losses(real_out, fake_out)
        if not torch.isfinite(adv_d):
            raise TrainError(f"loss term 'adv_d' is not finite at step {self.step}")
        adv_d.backward()
        self.opt_d.step()
        return float(adv_d.detach())

    def generator_substep(self, batch: torch.Tensor, adv_d_value: float):
        """Full forward and one descent step on the weighted generator total."""
        self.opt_g.zero_grad(set_to_none=True)
        result = self.model(batch)
        mel = self.mel_loss(batch, result.audio)
        with torch.no_grad():
            real_ref = self.discriminator(batch)
        fake_out = self.discriminator(result.audio)
        adv_g, _ = lsgan_losses(real_ref, fake_out)
        feat = feature_matching_loss(real_ref, fake_out)
        if self.step < self.cfg.warmup_steps:
            # adversarial and matching terms are excluded from the objective
            # during warmup; the total reduces to mel + commit + vq
            adv_g = torch.zeros(())
            feat = torch.zeros(())
        spectral = None
        if self.weights.spectral_recon_enabled:
            spectral = spectral_recon_loss(
                result.decoder_output, result.features, self.weights
            )
        total_g, _, report = total_losses(
            mel, adv_g, adv_d_value, feat,
            result.vq_loss, result.commit_loss, self.weights, spectral,
        )
        total_g.backward()
        self.opt_g.step()
        return report, result.tokens.detach()

    def train_step(self, batch: torch.Tensor | None = None) -> LossReport:
        if batch is None:
            if self.dataset is None:
                raise TrainError("no dataset attached and no batch given")
            batch = self.dataset.sample_batch(self.cfg.batch_size)
        batch = torch.as_tensor(batch, dtype=torch.float32)
        if batch.dim() != 2 or batch.shape[-1] != self.cfg.chunk_samples:
            raise TrainError(
                f"batch must be [B x {self.cfg.chunk_samples}], got {tuple(batch.shape)}"
            )
        lr = self._apply_lr()
        adv_d_value = self.discriminator_substep(batch)
        report, tokens = self.generator_substep(batch, adv_d_value)
        self.token_history.append(tokens.cpu())
        if len(self.token_history) > TOKEN_HISTORY_LIMIT:
            self.token_history.pop(0)
        self._log_csv(self.step, lr, report)
        self.step += 1
        return report

    def train(self, num_steps: int | None = None) -> list:
        n = num_steps if num_steps is not None else self.cfg.max_steps - self.step
        reports = []
        for _ in range(n):
            reports.append(self.train_step())
            if (
                self.out_dir
                and self.cfg.checkpoint_every > 0
                and self.step % self.cfg.checkpoint_every == 0
            ):
                self.save_checkpoint(self.out_dir / f"step_{self.step:08d}.pt")
        return reports

    def utilization(self):
        if not self.token_history:
            raise TrainError("no token history collected yet")
        return utilization_stats(self.token_history, self.codebook_spec.sizes)

    # -- logging and persistence --------------------------------------------

    def _log_csv(self, step: int, lr: float, report: LossReport):
        if not self.out_dir:
            return
        path = self.out_dir / "losses.csv"
        fields = list(report.as_dict())
        write_header = not self._csv_started and not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if write_header:
                writer.writerow(["step", "lr", *fields])
            writer.writerow([step, f"{lr:.10g}", *[f"{v:.10g}" for v in report.as_dict().values()]])
        self._csv_started = True

    def save_checkpoint(self, path):
        payload = {
            "step": self.step,
            "config": dataclasses.asdict(self.cfg),
            "stft_config": dataclasses.asdict(self.stft_config),
            "generator_config": dataclasses.asdict(self.generator_config),
            "codebook_spec": dataclasses.asdict(self.codebook_spec),
            "disc_kwargs": self.disc_kwargs,
            "mel_scales": self.mel_scales,
            "loss_weights": dataclasses.asdict(self.weights),
            "model_state": self.model.state_dict(),
            "disc_state": self.discriminator.state_dict(),
            "opt_g_state": self.opt_g.state_dict(),
            "opt_d_state": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "dataset_rng": self.dataset.rng_state() if self.dataset else None,
        }
        torch.save(payload, path)

    @classmethod
    def from_checkpoint(cls, path, dataset: ChunkDataset | None = None, out_dir=None):
        """Rebuild models and optimizer state; the next step is bit-identical
        to what the saved trainer would have produced."""
        payload = torch.load(path, weights_only=False)
        cfg, stft_cfg, gen_cfg, spec, weights = _payload_configs(payload)
        trainer = cls(
            cfg,
            dataset,
            stft_config=stft_cfg,
            generator_config=gen_cfg,
            codebook_spec=spec,
            disc_kwargs=payload["disc_kwargs"],
            mel_scales=payload["mel_scales"],
            loss_weights=weights,
            out_dir=out_dir,
        )
        trainer.model.load_state_dict(payload["model_state"])
        trainer.discriminator.load_state_dict(payload["disc_state"])
        trainer.opt_g.load_state_dict(payload["opt_g_state"])
        trainer.opt_d.load_state_dict(payload["opt_d_state"])
        trainer.step = payload["step"]
        torch.set_rng_state(payload["torch_rng"])
        if dataset is not None and payload["dataset_rng"] is not None:
            dataset.set_rng_state(payload["dataset_rng"])
        return trainer


def _payload_configs(payload):
    cfg = TrainConfig(**payload["config"])
    raw_gen = dict(payload["generator_config"])
    raw_gen["attention_placement"] = tuple(raw_gen["attention_placement"])
    stft_cfg = StftConfig(**payload["stft_config"])
    gen_cfg = GeneratorConfig(**raw_gen)
    spec = CodebookSpec(**{
        **payload["codebook_spec"],
        "sizes": tuple(payload["codebook_spec"]["sizes"]),
    })
    weights = payload.get("loss_weights")
    if weights is not None:
        weights = LossWeights(**weights)
    return cfg, stft_cfg, gen_cfg, spec, weights


def load_codec_model(path) -> CodecModel:
    """Rebuild only the codec model from a checkpoint, in eval mode."""
    payload = torch.load(path, weights_only=False)
    _, stft_cfg, gen_cfg, spec, _ = _payload_configs(payload)
    model = CodecModel(stft_cfg, gen_cfg, spec)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


# -- ablation driver ---------------------------------------------------------


def _variant_config(base: TrainConfig, name: str) -> TrainConfig:
    flags = {
        "no_unwrap": False, "no_convnext": False,
        "single_scale_disc": False, "spectral_recon": False,
    }
    if name != "full":
        if name not in flags:
            raise TrainError(f"unknown ablation variant {name!r}")
        flags[name] = True
    return dataclasses.replace(base, **flags)


def check_variant_structure(name: str, trainer: Trainer):
    """Assert the structural property each ablation is supposed to change."""
    model = trainer.model
    sr = trainer.cfg.sample_rate
    if name == "no_unwrap":
        t = np.arange(trainer.cfg.chunk_samples) / sr
        probe = torch.from_numpy(np.sin(2 * np.pi * 220.0 * t).astype(np.float32))
        feats = extract_features(
            stft_analyze(probe.unsqueeze(0), trainer.stft_config)
        )
        _, _, grad_stream = model.input_streams(feats)
        if torch.count_nonzero(grad_stream) != 0:
            raise TrainError("no_unwrap variant still feeds a phase-gradient stream")
    elif name == "no_convnext":
        if any(isinstance(m, ConvNeXtBlock) for m in model.modules()):
            raise TrainError("no_convnext variant still contains ConvNeXt blocks")
    elif name == "single_scale_disc":
        if len(trainer.discriminator.msstft.fft_sizes) != 1:
            raise TrainError("single_scale_disc variant has multiple STFT resolutions")
        if len(trainer.mel_loss.scales) != 1:
            raise TrainError("single_scale_disc variant has a multi-scale mel loss")
    elif name == "spectral_recon":
        if not trainer.weights.spectral_recon_enabled:
            raise TrainError("spectral_recon variant has the term disabled")
    elif name == "full":
        if not (model.config.use_phase_gradient and model.config.use_convnext):
            raise TrainError("full variant must keep every component enabled")
        if len(trainer.discriminator.msstft.fft_sizes) < 2 or len(trainer.mel_loss.scales) < 2:
            raise TrainError("full variant must keep multi-scale criticism")
    else:
        raise TrainError(f"unknown ablation variant {name!r}")


def run_ablation(
    matrix=ABLATION_VARIANTS,
    base_cfg: TrainConfig | None = None,
    *,
    wav_dir,
    steps: int = 100,
    stft_config: StftConfig | None = None,
    generator_config: GeneratorConfig | None = None,
    codebook_spec: CodebookSpec | None = None,
    disc_kwargs: dict | None = None,
    mel_scales=None,
    loss_weights=None,
    out_dir=None,
) -> list:
    """Train each variant briefly and report its losses and signal metrics.

    Every variant starts from the same seed and sees the same batch sequence.
    Ordering claims between variants are reported, not asserted; short runs
    are only a smoke check that each configuration trains.
    """
    base = base_cfg or TrainConfig()
    rows = []
    for name in matrix:
        cfg = _variant_config(base, name)
        dataset = build_dataset(wav_dir, cfg)
        variant_out = Path(out_dir) / name if out_dir else None
        trainer = Trainer(
            cfg, dataset,
            stft_config=stft_config, generator_config=generator_config,
            codebook_spec=codebook_spec, disc_kwargs=disc_kwargs,
            mel_scales=mel_scales, loss_weights=loss_weights, out_dir=variant_out,
        )
        check_variant_structure(name, trainer)
        reports = trainer.train(steps)
        last = reports[-1]
        if cfg.spectral_recon and not math.isfinite(last.spectral_recon):
            raise TrainError("spectral reconstruction term is not finite")

        clip = dataset.arrays[0]
        n = min(len(clip), cfg.chunk_samples)
        probe = np.zeros(cfg.chunk_samples, dtype=np.float32)
        probe[:n] = clip[:n]
        trainer.model.eval()
        with torch.no_grad():
            recon = trainer.model(torch.from_numpy(probe)).audio.numpy()
        trainer.model.train()
        rows.append({
            "variant": name,
            "steps": trainer.step,
            "total_g": last.total_g,
            "mel": last.mel,
            "spectral_recon": last.spectral_recon,
            "lsd": lsd(probe, recon, cfg.sample_rate),
            "vuv_f1": vuv_f1(probe, recon, cfg.sample_rate),
        })
    return rows


def format_ablation_table(rows) -> str:
    cols = ["variant", "steps", "total_g", "mel", "spectral_recon", "lsd", "vuv_f1"]
    rendered = [
        [
            str(r[c]) if c in ("variant", "steps") else f"{r[c]:.4f}"
            for c in cols
        ]
        for r in rows
    ]
    widths = [
        max(len(cols[i]), *(len(row[i]) for row in rendered)) for i in range(len(cols))
    ]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for row in rendered:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
