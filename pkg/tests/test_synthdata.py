import numpy as np
import pytest

from mixnet_pad import synthdata
from mixnet_pad.datamodel import Attack, MaskSubtype, load_manifest
from mixnet_pad.synthdata import SynthSpec


def test_counts(tmp_path):
    m = synthdata.generate(SynthSpec(seed=7), tmp_path)
    assert len(m) == 48
    per = {a: sum(r.attack_class.value is a for r in m.records) for a in Attack}
    assert set(per.values()) == {12}
    assert (tmp_path / "manifest.jsonl").exists()
    assert (tmp_path / "print_002_003.png").exists()
    assert load_manifest(tmp_path / "manifest.jsonl") == m


def test_byte_identical_reruns(tmp_path):
    a = synthdata.generate(SynthSpec(seed=3, videos_per_class=1, frames_per_video=2), tmp_path / "a")
    b = synthdata.generate(SynthSpec(seed=3, videos_per_class=1, frames_per_video=2), tmp_path / "b")
    assert a == b
    for name in ["manifest.jsonl"] + [r.image_path().name for r in a.records]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_images_are_gray_replicated_rgb(toy):
    from PIL import Image
    im = np.asarray(Image.open(toy.records[0].image_path(toy.root)))
    assert im.shape == (64, 64, 3) and im.dtype == np.uint8
    assert (im[..., 0] == im[..., 1]).all() and (im[..., 1] == im[..., 2]).all()


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(image_size=(31, 64))
    with pytest.raises(ValueError):
        SynthSpec(class_signature_strength=0.0)


def test_write_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        synthdata.generate(SynthSpec(videos_per_class=1, frames_per_video=1), blocker / "sub")


def test_unseen_composition(tmp_path):
    m = synthdata.generate_unseen_masks(SynthSpec(seed=1, videos_per_class=2), tmp_path)
    values = {r.attack_class.value for r in m.records}
    assert values == {Attack.GENUINE, Attack.MASK}
    masks = [r for r in m.records if r.attack_class.value is Attack.MASK]
    assert all(r.attack_class.mask_subtype is not None for r in masks)
    assert {r.attack_class.mask_subtype for r in masks} == set(synthdata.UNSEEN_SUBTYPES)


def test_unseen_with_silicone(tmp_path):
    m = synthdata.generate_unseen_masks(SynthSpec(seed=1, videos_per_class=1, frames_per_video=1),
                                        tmp_path, include_silicone=True)
    assert MaskSubtype.SILICONE in {r.attack_class.mask_subtype for r in m.records}


def test_videos_share_appearance_frames_differ(tmp_path):
    m = synthdata.generate(SynthSpec(seed=2, videos_per_class=2, frames_per_video=2), tmp_path,
                           classes=("genuine",))
    from mixnet_pad.imaging import load_gray
    f = [load_gray(r.image_path(m.root)) for r in m.records]
    within = np.abs(f[0] - f[1]).mean()
    across = np.abs(f[0] - f[2]).mean()
    assert 0 < within < across


def test_signature_region_is_lower_centre():
    rows, cols = synthdata.signature_region((64, 64))
    assert rows.start > 32 and cols.start > 0 and cols.stop < 64


def _accuracy(tmp_path, strength):
    tr = synthdata.generate(SynthSpec(seed=1, videos_per_class=6, class_signature_strength=strength),
                            tmp_path / f"tr{strength}")
    te = synthdata.generate(SynthSpec(seed=2, videos_per_class=6, class_signature_strength=strength),
                            tmp_path / f"te{strength}")
    return synthdata.nearest_centroid_accuracy(tr, te)


def test_nearest_centroid_calibration(tmp_path):
    accs = [_accuracy(tmp_path, s) for s in (0.25, 0.5, 1.0)]
    assert accs[2] >= 0.95
    assert accs[0] <= accs[1] <= accs[2]


def test_transparent_closest_to_genuine(tmp_path):
    m = synthdata.generate_unseen_masks(SynthSpec(seed=5, videos_per_class=4), tmp_path)
    means = synthdata.class_mean_images(m)
    dist = {k: float(np.linalg.norm(v - means["genuine"])) for k, v in means.items() if k != "genuine"}
    assert min(dist, key=dist.get) == "transparent"
