import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from glintiqa.datasets import Sample
from glintiqa.errors import InputError, TrainingError
from glintiqa.model import build_model, surrogate_config
from glintiqa.synthetic import blur_ladder
from glintiqa.training import (
    TrainConfig,
    cosine_lr,
    infer_patch_averaged,
    l1_loss,
    load_checkpoint,
    model_from_checkpoint,
    random_crop,
    save_checkpoint,
    state_hash,
    train,
)

SMALL = TrainConfig(epochs=4, batch_size=8, lr=1e-3, crop_size=32, eval_interval=2, eval_patches=3, seed=0)


@pytest.fixture(scope="module")
def tiny():
    data = blur_ladder(6, 40, seed=9)
    return data.samples[:20], data.samples[20:]


def test_config_presets():
    ft, pt = TrainConfig(), TrainConfig.pretrain()
    assert (ft.epochs, ft.batch_size, ft.lr, ft.eval_patches) == (300, 32, 1e-5, 25)
    assert (pt.epochs, pt.batch_size, pt.lr, pt.eval_patches) == (6, 192, 5e-5, 10)
    assert TrainConfig.from_dict(pt.to_dict()) == pt


def test_l1_loss_and_cosine_schedule():
    assert l1_loss([1, 2, 3], [1, 2, 5]) == pytest.approx(2 / 3)
    with pytest.raises(InputError):
        l1_loss([1], [1, 2])
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-6) == 1e-6
    assert cosine_lr(50, 100, 1.0) == pytest.approx(0.5)
    lrs = [cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_random_crop_bounds_and_errors():
    x = torch.arange(3 * 10 * 12, dtype=torch.float32).view(3, 10, 12)
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = random_crop(x, 8, rng)
        assert c.shape == (3, 8, 8)
        top, left = divmod(int(c[0, 0, 0].item()), 12)
        assert torch.equal(c, x[:, top:top + 8, left:left + 8])
    with pytest.raises(InputError):
        random_crop(x, 11, 0)


def test_patch_averaging_is_mean_of_crop_scores():
    model = build_model(surrogate_config(), seed=0).eval()
    img = np.random.default_rng(1).uniform(size=(40, 44, 3)).astype(np.float32)
    got = infer_patch_averaged(model, img, n_patches=6, seed=3)
    rng = np.random.default_rng(3)
    x = torch.from_numpy(img.transpose(2, 0, 1).copy())
    with torch.no_grad():
        scores = [model(random_crop(x, 32, rng)[None]).item() for _ in range(6)]
    assert got == pytest.approx(np.mean(scores), abs=1e-6)
    assert got == infer_patch_averaged(model, img, n_patches=6, seed=3)


def test_zero_lr_is_a_no_op(tiny):
    model = build_model(surrogate_config(dropout=0.0), seed=0)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train(model, tiny[0], replace(SMALL, lr=0.0, weight_decay=0.0, epochs=2))
    # batch-norm running statistics still move; learnable weights must not
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n


def test_frozen_parameters_do_not_move(tiny):
    cfg = surrogate_config(backbone={"frozen_prefix": {"vit": 1, "cnn": 1}})
    model = build_model(cfg, seed=0)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    bn_mean = model.clfe.cnn.bn1.running_mean.clone()
    train(model, tiny[0], replace(SMALL, epochs=1))
    for n, p in model.named_parameters():
        if n in frozen:
            assert torch.equal(p, frozen[n]), n
    assert torch.equal(model.clfe.cnn.bn1.running_mean, bn_mean)


def test_run_dir_artifacts_and_checkpoint_roundtrip(tiny, tmp_path):
    model = build_model(surrogate_config(), seed=0)
    res = train(model, tiny[0], SMALL, tiny[1], run_dir=tmp_path / "run")
    log = [json.loads(l) for l in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in log] == [1, 2, 3, 4]
    assert set(log[0]) == {"epoch", "loss", "val_srocc", "val_plcc", "lr"}
    assert log[0]["val_srocc"] is None and log[1]["val_srocc"] is not None
    assert res.best_epoch in (2, 4)

    ckpt = load_checkpoint(tmp_path / "run" / "last.ckpt")
    assert ckpt["config_hash"] == json.loads((tmp_path / "run" / "config.json").read_text())["config_hash"]
    save_checkpoint(ckpt, tmp_path / "copy.ckpt")
    again = load_checkpoint(tmp_path / "copy.ckpt")
    save_checkpoint(again, tmp_path / "copy2.ckpt")
    assert (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "copy2.ckpt").read_bytes()
    restored = model_from_checkpoint(tmp_path / "run" / "last.ckpt")
    assert state_hash(restored) == state_hash(model)
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_resume_matches_uninterrupted_run(tiny, tmp_path):
    full = build_model(surrogate_config(), seed=0)
    train(full, tiny[0], SMALL, run_dir=tmp_path / "full")

    def crash(entry):
        if entry["epoch"] == 3:
            raise KeyboardInterrupt

    part = build_model(surrogate_config(), seed=0)
    with pytest.raises(KeyboardInterrupt):
        train(part, tiny[0], SMALL, run_dir=tmp_path / "part", on_epoch=crash)
    # the crash hit before epoch 3 was checkpointed
    assert load_checkpoint(tmp_path / "part" / "last.ckpt")["epoch"] == 2
    resumed = build_model(surrogate_config(), seed=5)
    train(resumed, tiny[0], SMALL, run_dir=tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    assert state_hash(resumed) == state_hash(full)
    assert (tmp_path / "part" / "train_log.jsonl").read_bytes() == \
        (tmp_path / "full" / "train_log.jsonl").read_bytes()


def test_non_finite_loss_dumps_batch(tmp_path):
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    samples = [Sample(f"s{i}", float("nan") if i == 1 else 1.0, image=img) for i in range(4)]
    model = build_model(surrogate_config(), seed=0)
    with pytest.raises(TrainingError) as ei:
        train(model, samples, replace(SMALL, batch_size=4, epochs=1), run_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert "s1" in dump["batch_ids"] and "s1" in str(ei.value)
    assert ei.value.code == "train_engine.training"
