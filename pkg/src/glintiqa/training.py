"""Training, checkpointing and patch-averaged inference."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import config_hash
from .datasets import Sample
from .errors import InputError, TrainingError
from .evaluation.metrics import plcc, srocc
from .images import to_tensor
from .model import GlintIQA, ModelConfig, build_model

log = logging.getLogger(__name__)
_MOD = "train_engine"


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-5
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    lr_floor: float = 0.0
    crop_size: int = 224
    eval_interval: int = 5
    eval_patches: int = 25
    seed: int = 0
    mode: str = "finetune"
    deterministic: bool = False

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        base = dict(epochs=6, batch_size=192, lr=5e-5, eval_patches=10, eval_interval=1, mode="pretrain")
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        mode = d.pop("mode", "finetune")
        if mode == "pretrain":
            return cls.pretrain(**d)
        return cls(mode=mode, **d)

    def to_dict(self) -> dict:
        return asdict(self)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)
    torch.backends.cudnn.benchmark = not flag


# --------------------------------------------------------------------------- loss / schedule / crops


def l1_loss(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise InputError(f"l1_loss needs equal non-empty lengths, got {p.size} and {t.size}", module=_MOD)
    return float(np.abs(p - t).mean())


def cosine_lr(step: int, total_steps: int, initial: float, floor: float = 0.0) -> float:
    """Cosine annealing from ``initial`` at step 0 to ``floor`` at ``total_steps``."""
    t = min(max(step, 0), total_steps) / max(total_steps, 1)
    return floor + (initial - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def random_crop(x, size: int, seed=None):
    """Crop a (C, H, W) array or tensor to size x size at a uniformly drawn
    offset. ``seed`` may be an int or a numpy Generator."""
    h, w = x.shape[-2:]
    if h < size or w < size:
        raise InputError(f"image {h}x{w} is smaller than the {size}x{size} crop", module=_MOD)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return x[..., top : top + size, left : left + size]


def _crop_size(model, default: int = 224) -> int:
    cfg = getattr(model, "cfg", None)
    return cfg.backbone.img_size if isinstance(cfg, ModelConfig) else default


@torch.no_grad()
def infer_patch_averaged(model, image, n_patches: int = 25, seed: int = 0, crop_size: int | None = None,
                         chunk: int = 32) -> float:
    """Mean score over ``n_patches`` seeded random crops."""
    if n_patches < 1:
        raise InputError("n_patches must be >= 1", module=_MOD)
    x = to_tensor(image) if isinstance(image, np.ndarray) and image.shape[-1] == 3 else torch.as_tensor(image)
    size = crop_size or _crop_size(model)
    rng = np.random.default_rng(seed)
    crops = torch.stack([random_crop(x, size, rng) for _ in range(n_patches)])
    if isinstance(model, torch.nn.Module):
        model.eval()
    scores = torch.cat([torch.as_tensor(model(crops[i : i + chunk])).reshape(-1) for i in range(0, n_patches, chunk)])
    return float(scores.double().mean())


def predict(model, samples: Sequence[Sample], n_patches: int, seed: int = 0, crop_size=None) -> np.ndarray:
    return np.array(
        [infer_patch_averaged(model, s.load(), n_patches, seed + k, crop_size) for k, s in enumerate(samples)]
    )


# --------------------------------------------------------------------------- checkpoints


def state_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}", module=_MOD)
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(path_or_ckpt) -> GlintIQA:
    ckpt = load_checkpoint(path_or_ckpt) if not isinstance(path_or_ckpt, dict) else path_or_ckpt
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    # weights come from the checkpoint, not from pretrained files
    cfg.backbone.vit_weights = cfg.backbone.cnn_weights = None
    model = GlintIQA(cfg)
    model.load_state_dict(ckpt["model"])
    return model.eval()


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    best_metric: float | None
    best_epoch: int | None
    last_epoch: int
    history: list[dict] = field(default_factory=list)
    run_dir: Path | None = None
    best_state: dict | None = field(default=None, repr=False)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: GlintIQA,
    train_samples: Sequence[Sample],
    cfg: TrainConfig,
    val_samples: Sequence[Sample] = (),
    run_dir=None,
    resume=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam with decoupled weight decay, cosine-annealed per step, l1 loss on
    random crops. Validation (patch-averaged SROCC/PLCC) runs every
    ``eval_interval`` epochs and on the last epoch; the best-SROCC weights are
    kept in ``run_dir/best.ckpt``. Per-epoch RNG streams are derived from
    (seed, epoch), so resuming reproduces an uninterrupted run."""
    if not train_samples:
        raise InputError("empty training set", module=_MOD)
    if cfg.deterministic:
        set_deterministic(True)
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash({"model": model.cfg.to_dict(), "train": cfg.to_dict()})
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    tensors = [to_tensor(s.load()) for s in train_samples]
    labels = torch.tensor([s.label for s in train_samples], dtype=torch.float32)

    start_epoch, best_metric, best_epoch, history, best_state = 1, None, None, [], None
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, dict) else resume
        model.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["optimizer"])
        start_epoch = ckpt["epoch"] + 1
        best_metric, best_epoch = ckpt.get("best_metric"), ckpt.get("best_epoch")
        history = list(ckpt.get("history", []))

    log_path = run_dir / "train_log.jsonl" if run_dir else None
    if log_path and resume is not None and log_path.exists():
        # drop lines of epochs that ran after the checkpoint was taken
        kept = [l for l in log_path.read_text().splitlines() if l and json.loads(l)["epoch"] < start_epoch]
        log_path.write_text("".join(l + "\n" for l in kept))
    if log_path and resume is None:
        log_path.write_text("")
        (run_dir / "config.json").write_text(
            json.dumps({"config_hash": chash, "model": model.cfg.to_dict(), "train": cfg.to_dict()},
                       indent=2, sort_keys=True) + "\n"
        )

    def checkpoint(epoch):
        return {
            "model": model.state_dict(),
            "optimizer": opt.state_dict(),
            "epoch": epoch,
            "best_metric": best_metric,
            "best_epoch": best_epoch,
            "config_hash": chash,
            "model_config": model.cfg.to_dict(),
            "train_config": cfg.to_dict(),
            "history": history,
        }

    for epoch in range(start_epoch, cfg.epochs + 1):
        torch.manual_seed(_epoch_seed(cfg.seed, epoch))
        rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch))
        order = rng.permutation(n)
        model.train()
        losses, lr = [], cfg.lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            step = (epoch - 1) * steps_per_epoch + b
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_floor)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = torch.stack([random_crop(tensors[i], cfg.crop_size, rng) for i in idx])
            loss = F.l1_loss(model(batch), labels[idx])
            if not torch.isfinite(loss):
                ids = [train_samples[i].id for i in idx]
                if run_dir:
                    (run_dir / "nonfinite_batch.json").write_text(
                        json.dumps({"epoch": epoch, "step": step, "batch_ids": ids}, indent=2)
                    )
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}; batch {ids}", module=_MOD)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
        entry = {"epoch": epoch, "loss": sum(losses) / n, "val_srocc": None, "val_plcc": None, "lr": lr}
        is_eval = epoch % cfg.eval_interval == 0 or epoch == cfg.epochs
        if is_eval and val_samples:
            preds = predict(model, val_samples, cfg.eval_patches, seed=cfg.seed, crop_size=cfg.crop_size)
            truth = [s.label for s in val_samples]
            entry["val_srocc"], entry["val_plcc"] = srocc(preds, truth), plcc(preds, truth)
            if best_metric is None or entry["val_srocc"] > best_metric:
                best_metric, best_epoch = entry["val_srocc"], epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if run_dir:
                    save_checkpoint(checkpoint(epoch), run_dir / "best.ckpt")
        history.append(entry)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_epoch:
            on_epoch(entry)
        if run_dir:
            save_checkpoint(checkpoint(epoch), run_dir / "last.ckpt")
    if run_dir and not val_samples:
        save_checkpoint(checkpoint(cfg.epochs), run_dir / "best.ckpt")
    return TrainResult(best_metric, best_epoch, cfg.epochs, history, run_dir, best_state)


def fit_model(model_cfg: ModelConfig, train_samples, cfg: TrainConfig, val_samples=(), run_dir=None) -> GlintIQA:
    model = build_model(model_cfg, seed=cfg.seed)
    result = train(model, train_samples, cfg, val_samples, run_dir)
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    log.info("trained %s: best val srocc %s at epoch %s", model_cfg.fusion_order.value,
             result.best_metric, result.best_epoch)
    return model.eval()
