import pytest
import torch

from glintiqa.backbones import (
    BackboneConfig,
    ConvStages,
    VisionTransformer,
    check_divisible,
    load_cnn_weights,
    load_vit_weights,
    stage_kernel,
)
from glintiqa.errors import ConfigError, DimensionError, InitializationError


def test_stage_kernels_for_patch16():
    assert [stage_kernel(j, 16) for j in (1, 2, 3)] == [4, 2, 1]
    assert stage_kernel(1, 8) == 2
    with pytest.raises(ConfigError):
        stage_kernel(4, 16)


def test_check_divisible_names_offending_sizes():
    check_divisible(224, 256, 16)
    with pytest.raises(DimensionError) as ei:
        check_divisible(225, 224, 16)
    msg = str(ei.value)
    assert "225" in msg and "224" in msg and "16" in msg
    assert ei.value.code == "model_backbones.dimension"


@pytest.mark.parametrize(
    "kw",
    [
        dict(vit_block_indices=()),
        dict(vit_block_indices=(7, 6)),
        dict(vit_block_indices=(13,)),
        dict(cnn_stage_count=2),
        dict(cnn_stage_channels=(64, 128, 256)),
        dict(cnn_arch="vgg"),
        dict(img_size=230),
        dict(embed_dim=100),
    ],
)
def test_backbone_config_validation(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_vit_builds_only_needed_blocks_and_drops_class_token():
    cfg = BackboneConfig(vit_block_indices=(2, 4), vit_depth=12, embed_dim=48, vit_heads=4, img_size=64)
    vit = VisionTransformer(cfg)
    assert len(vit.blocks) == 4
    grids = vit(torch.rand(2, 3, 64, 64))
    assert [tuple(g.shape) for g in grids] == [(2, 16, 48)] * 2


def test_vit_output_grids_are_the_selected_blocks():
    torch.manual_seed(0)
    cfg = BackboneConfig(vit_block_indices=(1, 3), vit_depth=3, embed_dim=16, vit_heads=2, img_size=32)
    vit = VisionTransformer(cfg).eval()
    x = torch.rand(1, 3, 32, 32)
    h = vit.patch_embed(x)
    h = torch.cat([vit.cls_token.expand(1, -1, -1), h], 1) + vit.pos_embed
    outs = []
    for blk in vit.blocks:
        h = blk(h)
        outs.append(h[:, 1:])
    got = vit(x)
    assert torch.allclose(got[0], outs[0]) and torch.allclose(got[1], outs[2])


def test_vit_weight_roundtrip_and_missing_file(tmp_path, monkeypatch):
    cfg = BackboneConfig(vit_block_indices=(1,), vit_depth=2, embed_dim=16, vit_heads=2, img_size=32)
    torch.manual_seed(0)
    src = VisionTransformer(BackboneConfig(vit_block_indices=(2,), vit_depth=2, embed_dim=16, vit_heads=2,
                                           img_size=32))
    path = tmp_path / "vit.pth"
    state = dict(src.state_dict())
    state["head.weight"] = torch.zeros(10, 16)  # classifier tensors are ignored
    torch.save(state, path)
    dst = VisionTransformer(cfg)
    load_vit_weights(dst, str(path))
    assert torch.equal(dst.blocks[0].attn.qkv.weight, src.blocks[0].attn.qkv.weight)

    monkeypatch.setenv("GLINT_CACHE", str(tmp_path / "empty"))
    with pytest.raises(InitializationError) as ei:
        load_vit_weights(dst, "imagenet")
    assert "vit_small_patch16_224.pth" in str(ei.value)


def test_vit_position_embedding_is_resampled(tmp_path):
    torch.manual_seed(0)
    small = VisionTransformer(BackboneConfig(vit_block_indices=(1,), vit_depth=1, embed_dim=16, vit_heads=2,
                                             img_size=32))
    torch.save(small.state_dict(), tmp_path / "v.pth")
    big = VisionTransformer(BackboneConfig(vit_block_indices=(1,), vit_depth=1, embed_dim=16, vit_heads=2,
                                           img_size=64))
    load_vit_weights(big, str(tmp_path / "v.pth"))
    assert big.pos_embed.shape == (1, 17, 16)
    assert torch.equal(big.pos_embed[:, 0], small.pos_embed[:, 0])


def test_cnn_weights_accept_torchvision_names(tmp_path):
    from torchvision.models import resnet50

    torch.manual_seed(0)
    ref = resnet50(weights=None)
    torch.save(ref.state_dict(), tmp_path / "r50.pth")
    cnn = ConvStages(BackboneConfig())
    load_cnn_weights(cnn, str(tmp_path / "r50.pth"))
    assert torch.equal(cnn.layers[1][0].conv1.weight, ref.layer2[0].conv1.weight)
    torch.save({"conv1.weight": ref.conv1.weight}, tmp_path / "partial.pth")
    with pytest.raises(InitializationError):
        load_cnn_weights(cnn, str(tmp_path / "partial.pth"))


def test_cnn_stage_shapes():
    cnn = ConvStages(BackboneConfig(cnn_stage_count=2, cnn_stage_channels=(256, 512)))
    feats = cnn(torch.rand(1, 3, 64, 64))
    assert [tuple(f.shape) for f in feats] == [(1, 256, 16, 16), (1, 512, 8, 8)]
