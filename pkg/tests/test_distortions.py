import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from glintiqa.distortions import (
    DistortionSpec,
    all_families,
    apply_distortion,
    available_families,
    enumerate_specs,
    family_info,
    load_table,
    table_version,
)
from glintiqa.errors import CapabilityError, ConfigError
from glintiqa.synthetic import make_image


def test_table_covers_the_kadid_taxonomy():
    fams = all_families()
    assert len(fams) == 25
    assert [load_table()["families"][f]["index"] for f in fams] == list(range(1, 26))
    assert table_version() == "1.0"
    for f in available_families():
        assert len(family_info(f)["values"]) == 5


def test_unimplemented_family_lists_alternatives():
    assert "color_diffusion" in all_families()
    with pytest.raises(CapabilityError) as ei:
        family_info("color_diffusion")
    assert "gaussian_blur" in str(ei.value)
    assert ei.value.code == "distortion_bank.capability"


def test_bad_level_and_empty_selection():
    with pytest.raises(ConfigError):
        DistortionSpec.make("jpeg", 6)
    with pytest.raises(ConfigError):
        enumerate_specs([], [1])
    assert len(enumerate_specs(["jpeg", "white_noise"], [1, 2, 3])) == 6


@pytest.mark.parametrize("family", available_families())
def test_output_range_shape_and_determinism(family):
    img = make_image(0, 32)
    a = apply_distortion(img, DistortionSpec.make(family, 3, seed=5), "x")
    b = apply_distortion(img, DistortionSpec.make(family, 3, seed=5), "x")
    assert a.data.shape == img.shape and a.data.dtype == np.float32
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0
    assert np.array_equal(a.data, b.data)


def test_stochastic_families_depend_on_seed_only():
    img = make_image(1, 32)
    a = apply_distortion(img, DistortionSpec.make("white_noise", 2, seed=1)).data
    b = apply_distortion(img, DistortionSpec.make("white_noise", 2, seed=2)).data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("family,fmt", [("jpeg", "JPEG"), ("jpeg2000", "JPEG2000")])
def test_codec_families_emit_compressed_bytes(family, fmt):
    img = make_image(2, 64)
    out = apply_distortion(img, DistortionSpec.make(family, 4))
    assert out.codec["codec"] == fmt
    with Image.open(io.BytesIO(out.compressed)) as im:
        assert im.format == fmt
        decoded = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    assert np.array_equal(decoded, out.data)


@settings(max_examples=20, deadline=None)
@given(value=st.floats(0.0, 1.0), family=st.sampled_from(["gaussian_blur", "lens_blur", "motion_blur",
                                                           "pixelate"]))
def test_spatial_filters_keep_constant_images(value, family):
    img = np.full((24, 24, 3), value, dtype=np.float32)
    out = apply_distortion(img, DistortionSpec.make(family, 4)).data
    assert np.allclose(out, np.float32(value), atol=1e-6)
