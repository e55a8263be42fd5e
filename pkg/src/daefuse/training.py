"""Two-phase optimization loop, checkpointing, and inference entry points.

Phase 1 performs adversarial single-modality reconstruction (discriminators
step first under RMSProp, then the autoencoder under Adam) and never touches
the cross-attention weights. Phase 2 trains attention-guided fusion against
the discriminators, with texture/intensity pulls and an optional temporal
term when consecutive-frame batches are available.

Determinism: weights come from a seeded generator, every epoch's shuffle
and crop stream is derived from (seed, phase, epoch), and no stochastic
layers exist, so identical (seed, config, dataset) reproduce identical logs
and checkpoints up to the platform's floating-point guarantees. Checkpoints
are written at epoch boundaries only, which is what makes epoch-level
resumption exact.
"""

import hashlib
import json
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import __version__ as _pkg_version
from .checkpoint import (
    flatten_structure,
    load_archive,
    save_archive,
    unflatten_structure,
)
from .data import (
    Image,
    ImagePair,
    PatchBatch,
    VideoSequence,
    make_batches,
    random_crop_pair,
    reflect_pad,
)
from .errors import (
    EmptyDatasetError,
    NumericalError,
    PhaseOrderError,
)
from .fusion import AttentionConfig
from .losses import (
    LossWeights,
    adversarial_loss_ae_phase1,
    adversarial_loss_disc_phase1,
    adversarial_loss_phase2,
    content_loss,
    correlation_decomposition_loss,
    intensity_loss,
    phase1_ae_loss,
    phase2_total_loss,
    temporal_consistency_loss,
    text_loss,
)
from .networks import DaeFuseModel, NetworkConfig, image_to_tensor, tensor_to_array

CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    """Full training recipe: optimizer setup, schedule, crops, and flags."""

    phase1_epochs: int = 80
    phase2_epochs: int = 140
    lr0: float = 1e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.5
    crop_size: int = 128
    batch_size: int = 16
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    rmsprop_alpha: float = 0.99
    checkpoint_every: int = 10
    loss_weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    # Ablation and behaviour flags.
    disc_phase1: bool = True
    disc_phase2: bool = True
    cross_attention: bool = True
    attention_residual: bool = False
    freeze_encoders_phase2: bool = False
    tau: float = 0.0

    def __post_init__(self):
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise ValueError("both phases need at least one epoch")
        if self.lr0 <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.crop_size < self.attention.token_patch:
            raise ValueError("crop_size must be at least the attention token patch")
        if self.crop_size < self.network.dle_token_patch:
            raise ValueError("crop_size must be at least the encoder token patch")
        self.adam_betas = tuple(self.adam_betas)


def training_config_to_dict(config):
    d = asdict(config)
    d["adam_betas"] = list(config.adam_betas)
    return d


def training_config_from_dict(d):
    d = dict(d)
    for key, cls in (
        ("loss_weights", LossWeights),
        ("network", NetworkConfig),
        ("attention", AttentionConfig),
    ):
        if key in d and isinstance(d[key], dict):
            d[key] = cls(**d[key])
    if "adam_betas" in d:
        d["adam_betas"] = tuple(d["adam_betas"])
    return TrainingConfig(**d)


def config_hash(config):
    payload = json.dumps(
        training_config_to_dict(config), sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def lr_schedule(epoch, lr0, every=20, factor=0.5):
    """Learning rate after `epoch` full epochs: lr0 * factor^(epoch // every)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** (epoch // every)


@dataclass
class TrainingLog:
    """Per-step records with strictly increasing step indices."""

    records: list = field(default_factory=list)

    def add(self, record):
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(record)

    def to_jsonl(self, path, mode="w"):
        with open(path, mode) as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.records.append(json.loads(line))
        return log

    def loss_keys(self, phase=None):
        keys = set()
        for rec in self.records:
            if phase is None or rec["phase"] == phase:
                keys.update(rec["losses"].keys())
        return keys


def _epoch_rng(seed, phase, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, phase, epoch]))


def _batch_to_tensors(batch):
    xa = torch.from_numpy(np.stack([p.pixels for p in batch.patches_a])[:, None])
    xb = torch.from_numpy(np.stack([p.pixels for p in batch.patches_b])[:, None])
    return xa, xb


@contextmanager
def _frozen(params):
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


def make_video_batches(seq, config, rng):
    """Yield (prev PatchBatch, current PatchBatch) pairs of consecutive frames.

    Each epoch visits every frame transition once in shuffled order; crops
    for frame t-1 and t share one offset so the temporal comparison stays
    registered.
    """
    if len(seq) < 2:
        raise EmptyDatasetError("video training needs at least two frames")
    crop = config.crop_size
    transitions = rng.permutation(len(seq) - 1) + 1
    for start in range(0, len(transitions), config.batch_size):
        idx = transitions[start : start + config.batch_size]
        prev_a, prev_b, cur_a, cur_b = [], [], [], []
        for t in idx:
            prev_pair, cur_pair = seq.frames[int(t) - 1], seq.frames[int(t)]
            if prev_pair.height < crop or prev_pair.width < crop:
                prev_pair = ImagePair(
                    reflect_pad(prev_pair.modality_a, crop, crop),
                    reflect_pad(prev_pair.modality_b, crop, crop),
                )
                cur_pair = ImagePair(
                    reflect_pad(cur_pair.modality_a, crop, crop),
                    reflect_pad(cur_pair.modality_b, crop, crop),
                )
            top = int(rng.integers(0, prev_pair.height - crop + 1))
            left = int(rng.integers(0, prev_pair.width - crop + 1))

            def cut(img):
                return Image(
                    img.pixels[top : top + crop, left : left + crop],
                    source_id=img.source_id,
                )

            prev_a.append(cut(prev_pair.modality_a))
            prev_b.append(cut(prev_pair.modality_b))
            cur_a.append(cut(cur_pair.modality_a))
            cur_b.append(cut(cur_pair.modality_b))
        yield (
            PatchBatch(tuple(prev_a), tuple(prev_b), len(prev_a)),
            PatchBatch(tuple(cur_a), tuple(cur_b), len(cur_a)),
        )


class Trainer:
    """Owns the model, optimizers and log for one training run."""

    def __init__(self, config, out_dir=None):
        self.config = config
        self.out_dir = out_dir
        self.model = DaeFuseModel(
            config.network, config.attention, config.attention_residual
        )
        self.log = TrainingLog()
        self.global_step = 0
        self.last_checkpoint = None
        self.current_lr = config.lr0
        self.ae_opt = None
        self.disc_opt = None
        self._phase_of_optimizers = None

    # ---- optimizer management -------------------------------------------

    def _ae_params(self, phase):
        if phase == 1:
            return list(self.model.ae_parameters())
        params = list(self.model.attention_parameters()) + list(
            self.model.rd.parameters()
        )
        if not self.config.freeze_encoders_phase2:
            params = list(self.model.ae_parameters()) + list(
                self.model.attention_parameters()
            )
        return params

    def setup_phase(self, phase):
        """(Re)create phase-local optimizers; each phase starts fresh."""
        if phase == 2 and self.model.phase_tag == 1:
            self._warm_start_fusion_head()
        self.ae_opt = torch.optim.Adam(
            self._ae_params(phase), lr=self.config.lr0, betas=self.config.adam_betas
        )
        self.disc_opt = torch.optim.RMSprop(
            list(self.model.disc_parameters()),
            lr=self.config.lr0,
            alpha=self.config.rmsprop_alpha,
        )
        self._phase_of_optimizers = phase

    def _warm_start_fusion_head(self):
        """Seed the fused-width decoder projection from the trained single one.

        With W_fused = 0.5 [W | W] the first fused decode sees the average of
        the two attended embeddings through the phase-1 decoder, instead of a
        random projection the short fusion phase would have to unlearn. Runs
        exactly once, at the 1 -> 2 phase transition.
        """
        rd = self.model.rd
        with torch.no_grad():
            w = rd.proj_single.weight
            rd.proj_fused.weight.copy_(0.5 * torch.cat([w, w], dim=1))
            rd.proj_fused.bias.copy_(rd.proj_single.bias)

    def set_epoch_lr(self, epoch):
        lr = lr_schedule(
            epoch,
            self.config.lr0,
            every=self.config.lr_decay_every,
            factor=self.config.lr_decay_factor,
        )
        for opt in (self.ae_opt, self.disc_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        self.current_lr = lr
        return lr

    # ---- single steps -----------------------------------------------------

    def phase1_step(self, batch, epoch=0):
        """One alternating reconstruction step; cross-attention is untouched."""
        if self._phase_of_optimizers != 1:
            self.setup_phase(1)
        cfg, w = self.config, self.config.loss_weights
        x_a, x_b = _batch_to_tensors(batch)
        self.model.train()

        emb_a = self.model.encode(x_a)
        emb_b = self.model.encode(x_b)
        rec_a = self.model.decode(emb_a.combined)
        rec_b = self.model.decode(emb_b.combined)

        losses = {}
        scores = {}
        if cfg.disc_phase1:
            s_real_a = self.model.discriminate(x_a, "dm1")
            s_fake_a = self.model.discriminate(rec_a.detach(), "dm1")
            s_real_b = self.model.discriminate(x_b, "dm2")
            s_fake_b = self.model.discriminate(rec_b.detach(), "dm2")
            d_loss = adversarial_loss_disc_phase1(
                s_real_a, s_fake_a
            ) + adversarial_loss_disc_phase1(s_real_b, s_fake_b)
            self.disc_opt.zero_grad()
            d_loss.backward()
            self.disc_opt.step()
            losses["disc"] = float(d_loss.item())
            scores = {
                "real_a": float(s_real_a.mean().item()),
                "fake_a": float(s_fake_a.mean().item()),
                "real_b": float(s_real_b.mean().item()),
                "fake_b": float(s_fake_b.mean().item()),
            }

        corr = correlation_decomposition_loss(emb_a, emb_b, w)
        content = content_loss(x_a, rec_a) + content_loss(x_b, rec_b)
        if cfg.disc_phase1:
            with _frozen(self.model.disc_parameters()):
                adv = adversarial_loss_ae_phase1(
                    self.model.discriminate(rec_a, "dm1"),
                    self.model.discriminate(rec_b, "dm2"),
                )
                total = phase1_ae_loss(adv, corr, content, w)
                self.ae_opt.zero_grad()
                total.backward()
            losses["adv_ae"] = float(adv.item())
        else:
            total = phase1_ae_loss(torch.zeros(()), corr, content, w)
            self.ae_opt.zero_grad()
            total.backward()
        self.ae_opt.step()
        self.model.phase_tag = 1

        losses.update(
            corr=float(corr.item()),
            content=float(content.item()),
            total=float(total.item()),
        )
        return self._record(1, epoch, losses, scores)

    def phase2_step(self, batch, prev_batch=None, epoch=0):
        """One fusion step; temporal term active only with a predecessor batch."""
        if self.model.phase_tag < 1:
            raise PhaseOrderError("phase 2 requires weights produced by phase 1")
        if self._phase_of_optimizers != 2:
            self.setup_phase(2)
        cfg, w = self.config, self.config.loss_weights
        x_a, x_b = _batch_to_tensors(batch)
        self.model.train()

        def forward(xa, xb):
            ea = self.model.encode(xa)
            eb = self.model.encode(xb)
            if cfg.cross_attention:
                return self.model.fuse_embeddings(ea, eb)
            return self.model.fuse_concat_only(ea, eb)

        fused = forward(x_a, x_b)
        prev_fused = None
        if prev_batch is not None:
            px_a, px_b = _batch_to_tensors(prev_batch)
            with torch.no_grad():
                prev_fused = forward(px_a, px_b)

        losses = {}
        scores = {}
        if cfg.disc_phase2:
            s_real_a = self.model.discriminate(x_a, "dm1")
            s_fake_a = self.model.discriminate(fused.detach(), "dm1")
            s_real_b = self.model.discriminate(x_b, "dm2")
            s_fake_b = self.model.discriminate(fused.detach(), "dm2")
            d_loss = adversarial_loss_phase2(
                s_real_a, s_fake_a, role="dm"
            ) + adversarial_loss_phase2(s_real_b, s_fake_b, role="dm")
            self.disc_opt.zero_grad()
            d_loss.backward()
            self.disc_opt.step()
            losses["disc"] = float(d_loss.item())
            scores = {
                "real_a": float(s_real_a.mean().item()),
                "fake_a": float(s_fake_a.mean().item()),
                "real_b": float(s_real_b.mean().item()),
                "fake_b": float(s_fake_b.mean().item()),
            }

        text = text_loss(fused, x_a, x_b)
        intens = intensity_loss(fused, x_a, x_b)
        temporal = temporal_consistency_loss(fused, prev_fused)
        if cfg.disc_phase2:
            with _frozen(self.model.disc_parameters()):
                adv = adversarial_loss_phase2(
                    self.model.discriminate(fused, "dm1"),
                    self.model.discriminate(fused, "dm2"),
                    role="ae",
                )
                total = phase2_total_loss(adv, text, intens, temporal, w)
                self.ae_opt.zero_grad()
                total.backward()
            losses["adv_ae"] = float(adv.item())
        else:
            total = phase2_total_loss(torch.zeros(()), text, intens, temporal, w)
            self.ae_opt.zero_grad()
            total.backward()
        self.ae_opt.step()
        self.model.phase_tag = 2

        losses.update(
            text=float(text.item()),
            intensity=float(intens.item()),
            total=float(total.item()),
        )
        if prev_batch is not None:
            losses["temporal"] = float(temporal.item())
        return self._record(2, epoch, losses, scores)

    def _record(self, phase, epoch, losses, scores):
        for value in losses.values():
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at step {self.global_step}",
                    last_checkpoint=self.last_checkpoint,
                )
        record = {
            "step": self.global_step,
            "epoch": epoch,
            "phase": phase,
            "lr": self.current_lr,
            "losses": losses,
        }
        if scores:
            record["disc_scores"] = scores
        self.log.add(record)
        self.global_step += 1
        return record

    # ---- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path, phase, epoch_in_phase):
        tensors = {}
        for key, value in self.model.state_dict().items():
            tensors[f"model/{key}"] = value
        opt_skeletons = {}
        for name, opt in (("ae", self.ae_opt), ("disc", self.disc_opt)):
            if opt is not None:
                opt_skeletons[name] = flatten_structure(
                    opt.state_dict(), f"opt/{name}", tensors
                )
        manifest = {
            "kind": "daefuse-checkpoint",
            "version": CHECKPOINT_VERSION,
            "artifact_version": _pkg_version,
            "phase_tag": self.model.phase_tag,
            "phase": phase,
            "epoch_in_phase": epoch_in_phase,
            "global_step": self.global_step,
            "config": training_config_to_dict(self.config),
            "config_hash": config_hash(self.config),
            "optimizers": opt_skeletons,
        }
        save_archive(path, tensors, manifest)
        self.last_checkpoint = path
        return path

    def restore(self, path):
        tensors, manifest = load_archive(path)
        if manifest.get("kind") != "daefuse-checkpoint":
            raise PhaseOrderError(f"{path} is not a training checkpoint")
        state = {
            key[len("model/") :]: t
            for key, t in tensors.items()
            if key.startswith("model/")
        }
        self.model.load_state_dict(state)
        self.model.phase_tag = manifest["phase_tag"]
        self.global_step = manifest["global_step"]
        phase = manifest["phase"]
        if manifest["optimizers"]:
            self.setup_phase(phase)
            for name, opt in (("ae", self.ae_opt), ("disc", self.disc_opt)):
                if name in manifest["optimizers"]:
                    skeleton = manifest["optimizers"][name]
                    opt.load_state_dict(
                        unflatten_structure(skeleton, tensors, int_keys=True)
                    )
        self.last_checkpoint = path
        return manifest


def train(dataset, config, out_dir, resume=None):
    """Run phase 1 then phase 2 over the dataset; returns (final path, log).

    ``dataset`` is a list of ImagePairs or a VideoSequence. Video data feeds
    phase 2 with consecutive-frame batches so the temporal term is active;
    still images train without it. ``resume`` restores a checkpoint written
    by a previous (interrupted) run of the same config.
    """
    os.makedirs(out_dir, exist_ok=True)
    is_video = isinstance(dataset, VideoSequence)
    pairs = list(dataset.frames) if is_video else list(dataset)
    if not pairs:
        raise EmptyDatasetError("training dataset is empty")

    trainer = Trainer(config, out_dir)
    start_phase, start_epoch = 1, 0
    if resume is not None:
        manifest = trainer.restore(resume)
        if manifest["config_hash"] != config_hash(config):
            raise PhaseOrderError(
                "resume checkpoint was produced by a different config"
            )
        start_phase = manifest["phase"]
        start_epoch = manifest["epoch_in_phase"]
        if start_epoch >= _phase_epochs(config, start_phase):
            start_phase += 1
            start_epoch = 0

    log_path = os.path.join(out_dir, "train_log.jsonl")
    log_mode = "a" if resume is not None else "w"

    for phase in (1, 2):
        if phase < start_phase:
            continue
        epochs = _phase_epochs(config, phase)
        first_epoch = start_epoch if phase == start_phase else 0
        if first_epoch == 0:
            trainer.setup_phase(phase)
        for epoch in range(first_epoch, epochs):
            trainer.set_epoch_lr(epoch)
            rng = _epoch_rng(config.seed, phase, epoch)
            try:
                if phase == 2 and is_video and len(pairs) >= 2:
                    for prev_batch, batch in make_video_batches(dataset, config, rng):
                        trainer.phase2_step(batch, prev_batch, epoch=epoch)
                else:
                    for batch in make_batches(pairs, config, rng):
                        if phase == 1:
                            trainer.phase1_step(batch, epoch=epoch)
                        else:
                            trainer.phase2_step(batch, epoch=epoch)
            except NumericalError as exc:
                trainer.log.to_jsonl(log_path, mode=log_mode)
                raise NumericalError(
                    str(exc), last_checkpoint=trainer.last_checkpoint
                ) from exc
            done = epoch + 1
            if done % config.checkpoint_every == 0 and done < epochs:
                trainer.save_checkpoint(
                    os.path.join(out_dir, f"ckpt_p{phase}_e{done}.ckpt"), phase, done
                )
        trainer.save_checkpoint(
            os.path.join(out_dir, f"phase{phase}.ckpt"), phase, epochs
        )

    trainer.log.to_jsonl(log_path, mode=log_mode)
    return os.path.join(out_dir, "phase2.ckpt"), trainer.log


def _phase_epochs(config, phase):
    return config.phase1_epochs if phase == 1 else config.phase2_epochs


def load_model(path):
    """Rebuild the model (eval mode) and config from a checkpoint archive."""
    tensors, manifest = load_archive(path)
    if manifest.get("kind") != "daefuse-checkpoint":
        raise PhaseOrderError(f"{path} is not a training checkpoint")
    config = training_config_from_dict(manifest["config"])
    model = DaeFuseModel(config.network, config.attention, config.attention_residual)
    state = {
        key[len("model/") :]: t
        for key, t in tensors.items()
        if key.startswith("model/")
    }
    model.load_state_dict(state)
    model.phase_tag = manifest["phase_tag"]
    model.eval()
    return model, config, manifest


def _pad_multiple(model):
    a = model.config.dle_token_patch
    b = model.attention_config.token_patch
    return a * b // math.gcd(a, b)


def _fuse_tensors(model, x_a, x_b, use_attention=True, shallow_a=None, shallow_b=None):
    emb_a = model.encode(x_a, shallow=shallow_a)
    emb_b = model.encode(x_b, shallow=shallow_b)
    if use_attention:
        fused = model.fuse_embeddings(emb_a, emb_b)
    else:
        fused = model.fuse_concat_only(emb_a, emb_b)
    return fused, emb_a, emb_b


def _prepare_padded(pair, multiple):
    h, w = pair.height, pair.width
    ph = ((h + multiple - 1) // multiple) * multiple
    pw = ((w + multiple - 1) // multiple) * multiple
    a = reflect_pad(pair.modality_a, ph, pw)
    b = reflect_pad(pair.modality_b, ph, pw)
    return image_to_tensor(a), image_to_tensor(b)


def fuse_pair(ckpt, pair, use_attention=None):
    """Fuse one registered pair at full resolution with a phase-2 checkpoint.

    Images whose dimensions are not divisible by the token patches are
    reflect-padded, fused, and cropped back to the original size.
    """
    model, config, manifest = _resolve_model(ckpt)
    if manifest["phase_tag"] < 2:
        raise PhaseOrderError("fusion requires a phase-2 checkpoint")
    if use_attention is None:
        use_attention = config.cross_attention
    x_a, x_b = _prepare_padded(pair, _pad_multiple(model))
    with torch.no_grad():
        fused, _, _ = _fuse_tensors(model, x_a, x_b, use_attention)
    arr = tensor_to_array(fused)[: pair.height, : pair.width]
    return Image(pixels=arr, source_id=pair.modality_a.source_id)


def fuse_video(ckpt, seq, tau=None, use_attention=None):
    """Fuse a video sequence frame by frame in temporal order.

    With ``tau`` > 0 the shallow features of each modality are exponentially
    smoothed across frames before the deep branches run.
    """
    model, config, manifest = _resolve_model(ckpt)
    if manifest["phase_tag"] < 2:
        raise PhaseOrderError("fusion requires a phase-2 checkpoint")
    if tau is None:
        tau = config.tau
    if use_attention is None:
        use_attention = config.cross_attention
    multiple = _pad_multiple(model)
    outputs = []
    ema_a = ema_b = None
    with torch.no_grad():
        for pair in seq.frames:
            x_a, x_b = _prepare_padded(pair, multiple)
            s_a = model.shallow_encode(x_a)
            s_b = model.shallow_encode(x_b)
            if tau > 0.0 and ema_a is not None:
                s_a = (1.0 - tau) * s_a + tau * ema_a
                s_b = (1.0 - tau) * s_b + tau * ema_b
            ema_a, ema_b = s_a, s_b
            fused, _, _ = _fuse_tensors(
                model, x_a, x_b, use_attention, shallow_a=s_a, shallow_b=s_b
            )
            arr = tensor_to_array(fused)[: pair.height, : pair.width]
            outputs.append(Image(pixels=arr, source_id=pair.modality_a.source_id))
    return outputs


def _resolve_model(ckpt):
    if isinstance(ckpt, (str, os.PathLike)):
        return load_model(ckpt)
    # Already a (model, config, manifest) triple from load_model.
    return ckpt
