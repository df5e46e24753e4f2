"""Joint training of the perturbation generator and the removal net.

Each step draws a batch of fixed-length segments, builds the adversarial
segments, embeds both versions with a frozen speaker extractor, predicts
the reverse perturbation from the adversarial segments, and descends the
composite objective with Adam over BOTH parameter sets at once. Loss terms
are recorded every step and a checkpoint is written after every epoch.

Epoch shuffling is seeded per (seed, epoch), so resuming from an epoch
checkpoint continues bit-identically to an uninterrupted run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio, losses
from .audio import Manifest, load_wav
from .checkpoint import load_container, save_container
from .generator import NetConfig, PerturbationGenerator, new_generator
from .losses import LossWeights
from .removal import RemovalPredictor, new_removal
from .speaker import TrainedExtractor

LOSS_COLUMNS = (
    "step",
    "loss_cosine",
    "loss_quality",
    "loss_generator",
    "loss_noise",
    "loss_mask",
    "loss_reversal",
    "loss_total",
)

ADAM_BETAS = (0.9, 0.999)


class TrainingDiverged(RuntimeError):
    """Total loss became non-finite; the run is aborted, nothing is saved."""


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of the joint run. Defaults match the reference setup:
    alpha 0.01, beta 0.007, gamma 0.8, theta 0.06, epsilon 0.05, learning
    rate 1e-4, 30 epochs."""

    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    seg_len: int = 32000
    channels: tuple = (16, 32, 64, 64)
    kernel: int = 8
    stride: int = 4
    seed: int = 0
    extractor_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def net(self) -> NetConfig:
        return NetConfig(
            seg_len=self.seg_len,
            channels=self.channels,
            kernel=self.kernel,
            stride=self.stride,
        )

    def to_dict(self) -> dict:
        d = {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seg_len": self.seg_len,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "stride": self.stride,
            "seed": self.seed,
            "extractor_path": self.extractor_path,
        }
        d.update(self.loss_weights.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        base = cls()
        weights = LossWeights(
            **{
                k: float(d.get(k, getattr(base.loss_weights, k)))
                for k in ("alpha", "beta", "gamma", "theta", "epsilon")
            }
        )
        return cls(
            loss_weights=weights,
            learning_rate=float(d.get("learning_rate", base.learning_rate)),
            epochs=int(d.get("epochs", base.epochs)),
            batch_size=int(d.get("batch_size", base.batch_size)),
            seg_len=int(d.get("seg_len", base.seg_len)),
            channels=tuple(int(c) for c in d.get("channels", base.channels)),
            kernel=int(d.get("kernel", base.kernel)),
            stride=int(d.get("stride", base.stride)),
            seed=int(d.get("seed", base.seed)),
            extractor_path=d.get("extractor_path"),
        )


def load_training_config(path) -> TrainingConfig:
    """Read a JSON key-value config file with TrainingConfig keys."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return TrainingConfig.from_dict(json.loads(path.read_text()))


def save_training_config(config: TrainingConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class Checkpoint:
    """Everything needed to continue training or run protect/restore."""

    net: NetConfig
    loss_weights: LossWeights
    seed: int
    epoch: int
    generator_state: dict
    removal_state: dict
    optimizer_groups: list
    optimizer_tensors: dict
    loss_history: dict

    @property
    def epsilon(self) -> float:
        return self.loss_weights.epsilon

    def build_generator(self) -> PerturbationGenerator:
        g = PerturbationGenerator(self.net)
        g.load_state_dict({k: torch.from_numpy(v) for k, v in self.generator_state.items()})
        g.eval()
        return g

    def build_removal(self) -> RemovalPredictor:
        r = RemovalPredictor(self.net)
        r.load_state_dict({k: torch.from_numpy(v) for k, v in self.removal_state.items()})
        r.eval()
        return r

    def validate_epsilon(self, epsilon: float | None) -> float:
        """Return the trained intensity, rejecting a conflicting override."""
        if epsilon is not None and epsilon != self.epsilon:
            from .removal import IntensityMismatchError

            raise IntensityMismatchError(
                f"requested intensity {epsilon} but the checkpoint was trained "
                f"with {self.epsilon}; restoration is undefined across intensities"
            )
        return self.epsilon

    def save(self, path) -> None:
        meta = {
            "kind": "joint_checkpoint",
            "net": self.net.to_dict(),
            "loss_weights": self.loss_weights.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "optimizer_groups": self.optimizer_groups,
            "loss_columns": list(LOSS_COLUMNS),
        }
        tensors = {}
        for prefix, state in (("generator", self.generator_state),
                              ("removal", self.removal_state)):
            for k, v in state.items():
                tensors[f"{prefix}.{k}"] = v
        for k, v in self.optimizer_tensors.items():
            tensors[f"optim.{k}"] = v
        for col, vals in self.loss_history.items():
            tensors[f"history.{col}"] = np.asarray(vals, dtype=np.float64)
        save_container(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, tensors = load_container(path)
        if meta.get("kind") != "joint_checkpoint":
            raise ValueError(f"not a joint training checkpoint: {path}")
        generator_state, removal_state, optim, history = {}, {}, {}, {}
        for name, arr in tensors.items():
            scope, _, rest = name.partition(".")
            if scope == "generator":
                generator_state[rest] = arr
            elif scope == "removal":
                removal_state[rest] = arr
            elif scope == "optim":
                optim[rest] = arr
            elif scope == "history":
                history[rest] = arr.tolist()
        return cls(
            net=NetConfig.from_dict(meta["net"]),
            loss_weights=LossWeights.from_dict(meta["loss_weights"]),
            seed=int(meta["seed"]),
            epoch=int(meta["epoch"]),
            generator_state=generator_state,
            removal_state=removal_state,
            optimizer_groups=meta["optimizer_groups"],
            optimizer_tensors=optim,
            loss_history=history,
        )


def _state_to_numpy(module) -> dict:
    return {k: v.detach().numpy().copy() for k, v in module.state_dict().items()}


def _optimizer_payload(opt) -> tuple[list, dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            t = val if isinstance(val, torch.Tensor) else torch.tensor(float(val))
            tensors[f"{idx}.{key}"] = t.detach().numpy().copy()
    return sd["param_groups"], tensors


def _optimizer_restore(opt, groups: list, tensors: dict) -> None:
    state: dict = {}
    for name, arr in tensors.items():
        idx, _, key = name.partition(".")
        entry = state.setdefault(int(idx), {})
        t = torch.from_numpy(arr)
        entry[key] = t.reshape(()) if key == "step" and t.ndim == 0 else t
    opt.load_state_dict({"state": state, "param_groups": groups})


def _collect_segments(manifest: Manifest, seg_len: int, sample_rate: int) -> torch.Tensor:
    """Load every utterance, resample to the extractor rate, stack segments."""
    chunks = []
    for entry in manifest:
        w = load_wav(entry.path, entry.utterance_id)
        if w.sample_rate != sample_rate:
            w = audio.resample(w, sample_rate)
        for seg in audio.segment(w, seg_len):
            chunks.append(seg.waveform.samples)
    if not chunks:
        raise ValueError("manifest produced no training segments")
    return torch.from_numpy(np.stack(chunks))


def _loss_terms(generator, removal, extractor, x: torch.Tensor, w: LossWeights) -> dict:
    parts, x_adv, _ = generator.generate(x, w.epsilon)
    z = extractor.embed_tensor(x)
    z_adv = extractor.embed_tensor(x_adv)
    cos = losses.cosine_similarity_loss(z, z_adv)
    quality = losses.quality_loss(x, x_adv, parts.mask, w.alpha)
    gen_term = losses.generator_loss(cos, quality, w.beta)
    rev = removal.predict_reverse(x_adv, w.epsilon)
    noise_term = losses.noise_reversal_loss(parts.noise, rev.reverse_noise)
    mask_term = losses.mask_match_loss(parts.mask, rev.predicted_mask)
    rev_term = losses.reversal_loss(mask_term, noise_term, w.gamma)
    total = losses.joint_loss(gen_term, rev_term, w.theta)
    return {
        "loss_cosine": cos,
        "loss_quality": quality,
        "loss_generator": gen_term,
        "loss_noise": noise_term,
        "loss_mask": mask_term,
        "loss_reversal": rev_term,
        "loss_total": total,
    }


def train_joint(
    manifest: Manifest,
    config: TrainingConfig,
    extractor: TrainedExtractor,
    checkpoint_path=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Run the joint loop; returns (and optionally writes) the checkpoint."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    segments = _collect_segments(manifest, config.seg_len, extractor.sample_rate)
    n = segments.shape[0]

    if resume_from is not None:
        ckpt = resume_from
        generator = ckpt.build_generator().train()
        removal = ckpt.build_removal().train()
        params = list(generator.parameters()) + list(removal.parameters())
        for p in params:
            p.requires_grad_(True)
        opt = torch.optim.Adam(params, lr=config.learning_rate, betas=ADAM_BETAS)
        _optimizer_restore(opt, ckpt.optimizer_groups, ckpt.optimizer_tensors)
        start_epoch = ckpt.epoch
        history = {k: list(v) for k, v in ckpt.loss_history.items()}
    else:
        generator = new_generator(config.net, config.seed).train()
        removal = new_removal(config.net, config.seed + 1).train()
        params = list(generator.parameters()) + list(removal.parameters())
        opt = torch.optim.Adam(params, lr=config.learning_rate, betas=ADAM_BETAS)
        start_epoch = 0
        history = {col: [] for col in LOSS_COLUMNS}

    if start_epoch >= config.epochs:
        return resume_from

    step = int(history["step"][-1]) + 1 if history["step"] else 0
    ckpt = None
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])
        ).permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = segments[order[lo : lo + config.batch_size]]
            terms = _loss_terms(generator, removal, extractor, batch, config.loss_weights)
            total = terms["loss_total"]
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite total loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            history["step"].append(float(step))
            for col in LOSS_COLUMNS[1:]:
                history[col].append(float(terms[col].detach()))
            step += 1
        groups, opt_tensors = _optimizer_payload(opt)
        ckpt = Checkpoint(
            net=config.net,
            loss_weights=config.loss_weights,
            seed=config.seed,
            epoch=epoch + 1,
            generator_state=_state_to_numpy(generator),
            removal_state=_state_to_numpy(removal),
            optimizer_groups=groups,
            optimizer_tensors=opt_tensors,
            loss_history=history,
        )
        if checkpoint_path is not None:
            ckpt.save(checkpoint_path)
    return ckpt


def write_loss_csv(checkpoint: Checkpoint, path) -> None:
    """Per-step loss curve, one row per optimization step."""
    hist = checkpoint.loss_history
    with Path(path).open("w") as f:
        f.write(",".join(LOSS_COLUMNS) + "\n")
        for i in range(len(hist["step"])):
            row = [str(int(hist["step"][i]))] + [repr(hist[c][i]) for c in LOSS_COLUMNS[1:]]
            f.write(",".join(row) + "\n")


@dataclass
class GradCheckEntry:
    parameter: str
    flat_index: int
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradCheckReport:
    max_relative_error: float
    n_checked: int
    seg_len: int
    entries: list

    def to_json_dict(self) -> dict:
        return {
            "max_relative_error": self.max_relative_error,
            "n_checked": self.n_checked,
            "seg_len": self.seg_len,
            "entries": [
                {
                    "parameter": e.parameter,
                    "flat_index": e.flat_index,
                    "analytic": e.analytic,
                    "numeric": e.numeric,
                    "relative_error": e.relative_error,
                }
                for e in self.entries
            ],
        }


def gradcheck(
    config: TrainingConfig | None = None,
    seed: int = 0,
    fraction: float = 0.01,
    fd_step: float = 1e-4,
    fd_resolution: float = 1e-3,
) -> GradCheckReport:
    """Verify analytic gradients of the composite objective.

    Builds a tiny generator/removal/extractor stack, backpropagates the
    total loss once, then compares a random subset of parameter gradients
    against central finite differences. Deterministic given the seed.

    Components where both gradients fall below ``fd_resolution`` cannot be
    resolved by a central difference of this step size (the difference sits
    at the rectifier-kink noise floor) and enter the relative error through
    that floor instead of their own magnitude.
    """
    from .speaker import ExtractorNetConfig, SpeakerEncoder, TrainedExtractor

    config = config or TrainingConfig(
        seg_len=512, channels=(2, 3, 4, 4), batch_size=2, extractor_path=None
    )
    if config.seg_len > 512 or max(config.channels) > 4:
        raise ValueError("gradcheck wants a tiny net: seg_len <= 512, channels <= 4")

    rng = np.random.default_rng(seed)
    generator = new_generator(config.net, seed).train()
    removal = new_removal(config.net, seed + 1).train()
    ex_cfg = ExtractorNetConfig(
        embed_dim=8, n_mels=8, win_len=256, hop_len=64, channels=(2, 4), kernels=(3, 3)
    )
    with torch.random.fork_rng():
        torch.manual_seed(seed + 2)
        ex_model = SpeakerEncoder(ex_cfg, n_speakers=2)
    extractor = TrainedExtractor(ex_model, ["a", "b"], train_accuracy=1.0, seed=seed + 2)

    x = torch.from_numpy(
        rng.uniform(-0.5, 0.5, size=(config.batch_size, config.seg_len))
    )

    def total_loss() -> torch.Tensor:
        return _loss_terms(generator, removal, extractor, x, config.loss_weights)[
            "loss_total"
        ]

    loss = total_loss()
    loss.backward()

    named = [(n, p) for n, p in list(generator.named_parameters(prefix="generator"))
             + list(removal.named_parameters(prefix="removal"))]
    flat_grads = []
    for name, p in named:
        g = p.grad.detach().reshape(-1)
        for i in range(g.numel()):
            flat_grads.append((name, i, p, float(g[i])))
    n_checked = max(10, int(fraction * len(flat_grads)))
    picked = rng.choice(len(flat_grads), size=min(n_checked, len(flat_grads)), replace=False)

    entries = []
    with torch.no_grad():
        for k in sorted(int(j) for j in picked):
            name, i, p, analytic = flat_grads[k]
            flat = p.reshape(-1)
            orig = float(flat[i])
            flat[i] = orig + fd_step
            up = float(total_loss())
            flat[i] = orig - fd_step
            down = float(total_loss())
            flat[i] = orig
            numeric = (up - down) / (2.0 * fd_step)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), fd_resolution)
            entries.append(GradCheckEntry(name, i, analytic, numeric, rel))
    return GradCheckReport(
        max_relative_error=max(e.relative_error for e in entries),
        n_checked=len(entries),
        seg_len=config.seg_len,
        entries=entries,
    )
