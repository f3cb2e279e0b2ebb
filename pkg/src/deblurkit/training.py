"""Two-stage training: a joint stage over {encoder, both generators,
discriminator}, then an encoder-frozen stage that retrains the deblurring
generator from scratch. Includes the cosine LR schedule, checkpointing with
integrity checks, and the ablation matrix.

The whole loop is deterministic: batch order and augmentations are pure
functions of (seed, iteration), so identical configs reproduce loss traces
bit-for-bit and checkpoints resume exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch

from .blursynth import ImagePair, crop_and_augment, epoch_permutation
from .encoder import DegradationEncoder, EncoderConfig, freeze
from .exceptions import CheckpointError, TrainingDiverged
from .imaging import Image, MetricReport, psnr, ssim
from .losses import (FrozenFeatureExtractor, LossWeights, ModelBundle,
                     l1_loss, perceptual_loss, psnr_loss, stage2_objective)
from .adversarial import MultiScaleDiscriminator, discriminate, hinge_d_loss, hinge_g_loss
from .msdi import Generator, MSDINetConfig

CHECKPOINT_VERSION = 1

ABLATIONS = (
    "full",
    "w/o degradation",
    "w/o reblurring",
    "w/o blur loss",
    "injection w/o multi-scale",
    "input w/ concat",
    "w/ concat injection",
)


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 4
    total_iters: int = 5000
    lr_max: float = 3e-4
    lr_min: float = 1e-7
    seed: int = 0
    eval_every: int = 500
    augment: bool = False
    ablation: str = "full"
    weights: LossWeights = field(default_factory=LossWeights)
    model: MSDINetConfig = field(default_factory=MSDINetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    disc_ndf: int = 32
    disc_scales: int = 2
    extractor_seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be < lr_max")
        if self.ablation not in ABLATIONS:
            raise ValueError(
                f"unknown ablation {self.ablation!r}; valid: {list(ABLATIONS)}")
        if self.encoder.latent_channels != self.model.degradation_channels:
            raise ValueError("encoder latent_channels must match the "
                             "generator's degradation_channels")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = MSDINetConfig(**d["model"])
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig(**d["encoder"])
        return TrainConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def apply_ablation(config: TrainConfig, name: str) -> TrainConfig:
    """Return a config with the named variant's flags set."""
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; valid: {list(ABLATIONS)}")
    cfg = replace(config, ablation=name)
    if name == "w/o degradation":
        cfg = replace(cfg, model=replace(cfg.model, injection_mode="none",
                                         input_concat=False),
                      weights=replace(cfg.weights, lambda3=0.0))
    elif name == "w/o blur loss":
        cfg = replace(cfg, weights=replace(cfg.weights, lambda3=0.0))
    elif name == "injection w/o multi-scale":
        cfg = replace(cfg, model=replace(cfg.model, injection_scales="coarsest_only"))
    elif name == "input w/ concat":
        cfg = replace(cfg, model=replace(cfg.model, injection_mode="none",
                                         input_concat=True))
    elif name == "w/ concat injection":
        cfg = replace(cfg, model=replace(cfg.model, injection_mode="concat"))
    return cfg


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_iters."""
    if not 0 <= step <= config.total_iters:
        raise ValueError(f"step {step} outside [0, {config.total_iters}]")
    cos = math.cos(math.pi * step / config.total_iters)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + cos)


def build_models(config: TrainConfig, include_adversarial: bool = True) -> ModelBundle:
    """Construct all networks in a fixed order under the config seed."""
    torch.manual_seed(config.seed)
    enc = DegradationEncoder(config.encoder)
    reblur_gen = Generator(config.model)
    deblur_gen = Generator(config.model)
    disc = None
    if include_adversarial:
        disc = MultiScaleDiscriminator(6, config.disc_ndf, config.disc_scales)
    extractor = FrozenFeatureExtractor(config.extractor_seed)
    return ModelBundle(encoder=enc, reblur_gen=reblur_gen, deblur_gen=deblur_gen,
                       discriminator=disc, extractor=extractor)


def _pairs_to_tensors(pairs: list[ImagePair]):
    x = torch.stack([p.sharp.tensor() for p in pairs])
    y = torch.stack([p.blurry.tensor() for p in pairs])
    return x, y


def _training_batch(dataset, config: TrainConfig, iteration: int):
    n = len(dataset)
    per_epoch = max(n // config.batch_size, 1)
    epoch = iteration // per_epoch
    slot = iteration % per_epoch
    perm = epoch_permutation(n, config.seed, epoch)
    take = min(config.batch_size, n)
    idx = perm[slot * take:(slot + 1) * take]
    pairs = [dataset[i] for i in idx]
    if config.augment:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed, 31337, iteration])))
        pairs = [crop_and_augment(p, p.sharp.height, rng) for p in pairs]
    return _pairs_to_tensors(pairs)


def _guard(value: float, what: str):
    if not math.isfinite(value) or abs(value) > 1e6:
        raise TrainingDiverged(f"{what} diverged: {value}")


def _set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


class MetricsLog:
    """Line-oriented (step, loss name, value) records."""

    def __init__(self, path=None):
        self._fh = open(path, "a") if path else None

    def write(self, step: int, name: str, value: float):
        if self._fh:
            self._fh.write(json.dumps({"step": step, "loss": name,
                                       "value": value}) + "\n")

    def flush(self):
        if self._fh:
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


@torch.no_grad()
def evaluate_deblur(models: ModelBundle, pairs: list[ImagePair],
                    chunk: int = 8) -> MetricReport:
    """Mean PSNR/SSIM of the final deblurred output against the sharp truth."""
    models.deblur_gen.eval()
    psnrs, ssims = [], []
    use_deg = models.deblur_gen.config.uses_degradation()
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        x, y = _pairs_to_tensors(part)
        deg = models.encoder(y)[1] if use_deg else None
        out = models.deblur_gen(y, deg)[-1].clamp(0.0, 1.0)
        for j, p in enumerate(part):
            est = Image.from_tensor(out[j])
            psnrs.append(psnr(p.sharp, est))
            ssims.append(ssim(p.sharp, est))
    models.deblur_gen.train()
    return MetricReport(psnr_db=float(np.mean(psnrs)), ssim=float(np.mean(ssims)),
                        extra={"n": len(pairs)})


@torch.no_grad()
def evaluate_reblur(models: ModelBundle, pairs: list[ImagePair],
                    chunk: int = 8) -> MetricReport:
    """Mean PSNR/SSIM of the final reblurred output against the real blurry."""
    models.reblur_gen.eval()
    psnrs, ssims = [], []
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        x, y = _pairs_to_tensors(part)
        deg = models.encoder(y)[1] if models.reblur_gen.config.uses_degradation() else None
        out = models.reblur_gen(x, deg)[-1].clamp(0.0, 1.0)
        for j, p in enumerate(part):
            est = Image.from_tensor(out[j])
            psnrs.append(psnr(p.blurry, est))
            ssims.append(ssim(p.blurry, est))
    models.reblur_gen.train()
    return MetricReport(psnr_db=float(np.mean(psnrs)), ssim=float(np.mean(ssims)),
                        extra={"n": len(pairs)})


@dataclass
class TrainResult:
    state: dict
    trace: list
    evals: list
    models: ModelBundle


def _snapshot_stage1(config, models, opt_g, opt_d, iteration) -> dict:
    state = {
        "version": CHECKPOINT_VERSION,
        "stage": 1,
        "iteration": iteration,
        "config": config.to_dict(),
        "models": {
            "encoder": models.encoder.state_dict(),
            "reblur_gen": models.reblur_gen.state_dict() if models.reblur_gen else None,
            "deblur_gen": models.deblur_gen.state_dict(),
            "discriminator": models.discriminator.state_dict()
            if models.discriminator else None,
        },
        "optimizers": {
            "generator": opt_g.state_dict(),
            "discriminator": opt_d.state_dict() if opt_d else None,
        },
        "torch_rng": torch.get_rng_state(),
    }
    return state


def train_stage1(config: TrainConfig, train_pairs: list[ImagePair],
                 val_pairs: list[ImagePair] | None = None,
                 out_dir=None, resume_state: dict | None = None,
                 log_fn=None) -> TrainResult:
    """Joint training of encoder, both generators and the discriminator.

    Per iteration: one discriminator update on the hinge loss, then one joint
    update of {encoder, reblur gen, deblur gen} on the adversarial +
    perceptual + L1 objective. With the "w/o reblurring" ablation the reblur
    generator and discriminator are dropped and the encoder learns from the
    deblurring branch alone.
    """
    if config.stage != 1:
        raise ValueError("config.stage must be 1")
    use_reblur = config.ablation != "w/o reblurring"
    use_deg = config.model.uses_degradation()
    eval_pairs = val_pairs if val_pairs else train_pairs

    models = build_models(config, include_adversarial=use_reblur)
    if not use_reblur:
        models.reblur_gen = None
        models.discriminator = None

    gen_params = []
    if use_deg:
        gen_params += list(models.encoder.parameters())
    if use_reblur:
        gen_params += list(models.reblur_gen.parameters())
    gen_params += list(models.deblur_gen.parameters())
    opt_g = _adam(gen_params, config.lr_max)
    opt_d = _adam(models.discriminator.parameters(), config.lr_max) \
        if use_reblur else None

    start = 0
    if resume_state is not None:
        if resume_state.get("stage") != 1:
            raise CheckpointError("resume checkpoint is not a stage-1 state")
        models.encoder.load_state_dict(resume_state["models"]["encoder"])
        if use_reblur:
            models.reblur_gen.load_state_dict(resume_state["models"]["reblur_gen"])
            models.discriminator.load_state_dict(resume_state["models"]["discriminator"])
            opt_d.load_state_dict(resume_state["optimizers"]["discriminator"])
        models.deblur_gen.load_state_dict(resume_state["models"]["deblur_gen"])
        opt_g.load_state_dict(resume_state["optimizers"]["generator"])
        torch.set_rng_state(resume_state["torch_rng"])
        start = resume_state["iteration"]

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)

    trace, evals = [], []
    for it in range(start, config.total_iters):
        x, y = _training_batch(train_pairs, config, it)
        lr = cosine_lr(it, config)
        _set_lr(opt_g, lr)
        if opt_d:
            _set_lr(opt_d, lr)

        deg = models.encoder(y)[1] if use_deg else None

        record = {"iter": it, "lr": lr}
        if use_reblur:
            reblurred = models.reblur_gen(x, deg)
            # discriminator phase: detached fakes, then its own step
            real = discriminate(models.discriminator, x, y)
            fake_det = discriminate(models.discriminator, x, reblurred[-1].detach())
            d_loss = hinge_d_loss(real, fake_det)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            record["d_hinge"] = d_loss.item()

            # generator phase against the updated discriminator
            fake = discriminate(models.discriminator, x, reblurred[-1])
            g_adv = hinge_g_loss(fake)
            perc = sum(perceptual_loss(y, out, models.extractor)
                       for out in reblurred) / len(reblurred)
            record["g_adv"] = g_adv.item()
            record["perceptual"] = perc.item()
            g_loss = g_adv + config.weights.lambda1 * perc
        else:
            g_loss = x.new_zeros(())

        deblurred = models.deblur_gen(y, deg)
        deblur_term = config.weights.lambda2 * sum(
            l1_loss(x, out) for out in deblurred) / len(deblurred)
        record["deblur_l1"] = deblur_term.item()

        total = g_loss + deblur_term
        record["g_total"] = total.item()
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()

        for key in ("d_hinge", "g_total", "deblur_l1"):
            if key in record:
                _guard(record[key], key)
        trace.append(record)
        for key, value in record.items():
            if key != "iter":
                metrics.write(it, key, value)

        done = it + 1
        if done % config.eval_every == 0 or done == config.total_iters:
            entry = {"iter": done}
            entry["deblur"] = evaluate_deblur(models, eval_pairs).as_dict()
            if use_reblur:
                entry["reblur"] = evaluate_reblur(models, eval_pairs).as_dict()
            evals.append(entry)
            metrics.write(done, "eval", entry["deblur"]["psnr_db"])
            metrics.flush()
            if log_fn:
                log_fn(entry)
            if out_dir:
                state = _snapshot_stage1(config, models, opt_g, opt_d, done)
                save_checkpoint(state, os.path.join(out_dir,
                                                    f"checkpoint_{done:06d}.pt"))
                save_checkpoint(state, os.path.join(out_dir, "checkpoint.pt"))

    metrics.close()
    final_state = _snapshot_stage1(config, models, opt_g, opt_d, config.total_iters)
    return TrainResult(state=final_state, trace=trace, evals=evals, models=models)


def _stage2_seed(seed: int) -> int:
    # fresh deblur generator: decorrelate from the stage-1 init stream
    return (seed * 1000003 + 17) % (2**31)


def train_stage2(config: TrainConfig, train_pairs: list[ImagePair],
                 encoder: DegradationEncoder | None,
                 val_pairs: list[ImagePair] | None = None,
                 out_dir=None, resume_state: dict | None = None,
                 log_fn=None) -> TrainResult:
    """Retrain a fresh deblurring generator under the frozen encoder."""
    if config.stage != 2:
        raise ValueError("config.stage must be 2")
    use_deg = config.model.uses_degradation()
    if use_deg and encoder is None:
        raise ValueError("stage 2 with degradation injection needs the frozen encoder")
    eval_pairs = val_pairs if val_pairs else train_pairs

    torch.manual_seed(_stage2_seed(config.seed))
    deblur_gen = Generator(config.model)
    if encoder is None:
        encoder = DegradationEncoder(config.encoder)
    freeze(encoder)
    models = ModelBundle(encoder=encoder, reblur_gen=None, deblur_gen=deblur_gen,
                         discriminator=None,
                         extractor=FrozenFeatureExtractor(config.extractor_seed))
    opt = _adam(deblur_gen.parameters(), config.lr_max)

    start = 0
    if resume_state is not None:
        if resume_state.get("stage") != 2:
            raise CheckpointError("resume checkpoint is not a stage-2 state")
        deblur_gen.load_state_dict(resume_state["models"]["deblur_gen"])
        encoder.load_state_dict(resume_state["models"]["encoder"])
        opt.load_state_dict(resume_state["optimizers"]["generator"])
        torch.set_rng_state(resume_state["torch_rng"])
        start = resume_state["iteration"]

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)

    def snapshot(iteration):
        return {
            "version": CHECKPOINT_VERSION,
            "stage": 2,
            "iteration": iteration,
            "config": config.to_dict(),
            "models": {
                "encoder": encoder.state_dict(),
                "deblur_gen": deblur_gen.state_dict(),
            },
            "optimizers": {"generator": opt.state_dict()},
            "torch_rng": torch.get_rng_state(),
        }

    trace, evals = [], []
    for it in range(start, config.total_iters):
        x, y = _training_batch(train_pairs, config, it)
        lr = cosine_lr(it, config)
        _set_lr(opt, lr)

        deg = encoder(y)[1].detach() if use_deg else None
        outputs = deblur_gen(y, deg)
        loss = sum(stage2_objective(x, out, encoder, config.weights)
                   for out in outputs) / len(outputs)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        value = loss.item()
        _guard(value, "stage2_objective")
        with torch.no_grad():
            psnr_term = psnr_loss(x, outputs[-1]).item()
        record = {"iter": it, "lr": lr, "stage2_objective": value,
                  "psnr_loss": psnr_term}
        trace.append(record)
        for key, val in record.items():
            if key != "iter":
                metrics.write(it, key, val)

        done = it + 1
        if done % config.eval_every == 0 or done == config.total_iters:
            entry = {"iter": done, "deblur": evaluate_deblur(models, eval_pairs).as_dict()}
            evals.append(entry)
            metrics.write(done, "eval", entry["deblur"]["psnr_db"])
            metrics.flush()
            if log_fn:
                log_fn(entry)
            if out_dir:
                state = snapshot(done)
                save_checkpoint(state, os.path.join(out_dir,
                                                    f"checkpoint_{done:06d}.pt"))
                save_checkpoint(state, os.path.join(out_dir, "checkpoint.pt"))

    metrics.close()
    return TrainResult(state=snapshot(config.total_iters), trace=trace,
                       evals=evals, models=models)


def encoder_from_state(state: dict) -> DegradationEncoder:
    """Extract the (frozen) encoder from a stage-1 checkpoint state."""
    cfg = TrainConfig.from_dict(state["config"])
    enc = DegradationEncoder(cfg.encoder)
    enc.load_state_dict(state["models"]["encoder"])
    return freeze(enc)


def models_from_state(state: dict) -> ModelBundle:
    """Rebuild every network stored in a checkpoint state, eval mode."""
    cfg = TrainConfig.from_dict(state["config"])
    stored = state["models"]
    enc = DegradationEncoder(cfg.encoder)
    enc.load_state_dict(stored["encoder"])
    deblur_gen = Generator(cfg.model)
    deblur_gen.load_state_dict(stored["deblur_gen"])
    reblur_gen = None
    if stored.get("reblur_gen"):
        reblur_gen = Generator(cfg.model)
        reblur_gen.load_state_dict(stored["reblur_gen"])
        reblur_gen.eval()
    disc = None
    if stored.get("discriminator"):
        disc = MultiScaleDiscriminator(6, cfg.disc_ndf, cfg.disc_scales)
        disc.load_state_dict(stored["discriminator"])
        disc.eval()
    enc.eval()
    deblur_gen.eval()
    return ModelBundle(encoder=enc, reblur_gen=reblur_gen, deblur_gen=deblur_gen,
                       discriminator=disc,
                       extractor=FrozenFeatureExtractor(cfg.extractor_seed))


def run_ablation(entry: str, base_config: TrainConfig,
                 train_pairs: list[ImagePair], val_pairs: list[ImagePair],
                 stage1_state: dict | None = None,
                 out_dir=None, log_fn=None) -> tuple[MetricReport, dict]:
    """Train one named variant end to end and report held-out deblur quality.

    The "w/o degradation" variant has no encoder to pre-train, so only the
    second stage runs; "w/o blur loss" reuses a supplied stage-1 state since
    its first stage is identical to the full model's.
    """
    cfg = apply_ablation(base_config, entry)
    stage1_cfg = replace(cfg, stage=1)
    stage2_cfg = replace(cfg, stage=2)

    encoder = None
    if entry == "w/o degradation":
        stage1_result = None
    else:
        if stage1_state is None:
            stage1_result = train_stage1(
                stage1_cfg, train_pairs, val_pairs,
                out_dir=os.path.join(out_dir, "stage1") if out_dir else None,
                log_fn=log_fn)
            stage1_state = stage1_result.state
        encoder = encoder_from_state(stage1_state)

    result = train_stage2(
        stage2_cfg, train_pairs, encoder, val_pairs,
        out_dir=os.path.join(out_dir, "stage2") if out_dir else None,
        log_fn=log_fn)
    report = evaluate_deblur(result.models, val_pairs)
    report.extra["ablation"] = entry
    report.extra["config_hash"] = cfg.config_hash()
    return report, result.state


def save_checkpoint(state: dict, path) -> None:
    """Single binary file with an embedded payload checksum; atomic write."""
    buffer = io.BytesIO()
    torch.save(state, buffer)
    blob = buffer.getvalue()
    wrapper = {
        "version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "payload": blob,
    }
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        torch.save(wrapper, f)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        with open(path, "rb") as f:
            wrapper = torch.load(f, weights_only=False)
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(wrapper, dict) or "payload" not in wrapper:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if wrapper.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {wrapper.get('version')}")
    blob = wrapper["payload"]
    if hashlib.sha256(blob).hexdigest() != wrapper["sha256"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    return torch.load(io.BytesIO(blob), weights_only=False)
