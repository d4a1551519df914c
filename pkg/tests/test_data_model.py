import json

import numpy as np
import pytest

from mitodetect.data_model import (
    DatasetManifest,
    ManifestError,
    PatchRecord,
    generate_synthetic_dataset,
    load_manifest,
    write_manifest,
)


def _write_fixture(tmp_path, records, track="detection"):
    img_dir = tmp_path / "images"
    img_dir.mkdir(exist_ok=True)
    from PIL import Image

    lines = [json.dumps({"schema_version": 1, "track": track})]
    for rec in records:
        Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(img_dir / f"{rec['patch_id']}.png")
        lines.append(json.dumps({"image_path": f"images/{rec['patch_id']}.png", **rec}))
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_hand_written_detection_manifest(tmp_path):
    recs = [
        {"patch_id": f"p{i}", "slide_id": "s0", "domain_id": i % 4, "mpp": 0.25, "centroids": [[10, 12]]}
        for i in range(3)
    ]
    m = load_manifest(_write_fixture(tmp_path, recs))
    assert len(m) == 3
    assert m.track == "detection"
    assert m.records[0].centroids == [(10.0, 12.0)]
    assert m.records[0].load_image().shape == (64, 64, 3)


def test_duplicate_patch_id_is_named(tmp_path):
    recs = [{"patch_id": "dup", "slide_id": "s0", "domain_id": 0, "mpp": 0.25, "centroids": []}] * 2
    with pytest.raises(ManifestError, match="dup"):
        load_manifest(_write_fixture(tmp_path, recs))


def test_classification_record_without_label(tmp_path):
    recs = [
        {"patch_id": "a", "slide_id": "s0", "domain_id": 0, "mpp": 0.25, "class_label": 1},
        {"patch_id": "b", "slide_id": "s0", "domain_id": 0, "mpp": 0.25},
    ]
    with pytest.raises(ManifestError, match="'b'"):
        load_manifest(_write_fixture(tmp_path, recs, "classification"))


@pytest.mark.parametrize(
    "bad, msg",
    [
        ({"mpp": 0.0}, "mpp"),
        ({"centroids": [[70, 3]]}, "outside"),
        ({"class_label": 1}, "exactly one"),
    ],
)
def test_record_invariants(tmp_path, bad, msg):
    rec = {"patch_id": "x", "slide_id": "s0", "domain_id": 0, "mpp": 0.25, "centroids": [[1, 1]]}
    rec.update(bad)
    with pytest.raises(ManifestError, match=msg):
        load_manifest(_write_fixture(tmp_path, [rec]))


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")
    path = _write_fixture(tmp_path, [{"patch_id": "a", "slide_id": "s", "domain_id": 0, "mpp": 0.25,
                                      "centroids": []}])
    (tmp_path / "images" / "a.png").unlink()
    with pytest.raises(FileNotFoundError, match="'a'"):
        load_manifest(path)


def test_round_trip(tmp_path, det_manifest):
    path = write_manifest(det_manifest, tmp_path / "m.jsonl")
    loaded = load_manifest(path)
    assert loaded.track == det_manifest.track
    assert loaded.records == det_manifest.records
    for a, b in zip(loaded.records, det_manifest.records):
        np.testing.assert_array_equal(a.load_image(), b.image)


def test_synthetic_detection_shape_and_determinism(tmp_path):
    a = generate_synthetic_dataset(1, 4, 8, "detection", 0.5)
    b = generate_synthetic_dataset(1, 4, 8, "detection", 0.5)
    assert len(a) == 32
    for ra, rb in zip(a, b):
        assert ra == rb
        assert ra.image.tobytes() == rb.image.tobytes()
    pa = write_manifest(a, tmp_path / "a" / "m.jsonl")
    pb = write_manifest(b, tmp_path / "b" / "m.jsonl")
    assert pa.read_bytes() == pb.read_bytes()


def test_synthetic_seed_sensitivity():
    a = generate_synthetic_dataset(1, 4, 8, "detection", 0.5)
    b = generate_synthetic_dataset(2, 4, 8, "detection", 0.5)
    assert any(ra.image.tobytes() != rb.image.tobytes() for ra, rb in zip(a, b))


def test_synthetic_classification_rate():
    m = generate_synthetic_dataset(7, 10, 10, "classification", 0.2)
    rate = np.mean([r.class_label for r in m])
    assert abs(rate - 0.2) <= 0.1


def test_synthetic_domains_round_robin():
    m = generate_synthetic_dataset(0, 8, 2, "classification", 0.5)
    by_slide = {r.slide_id: r.domain_id for r in m}
    assert sorted(by_slide.values()) == [0, 0, 1, 1, 2, 2, 3, 3]


def test_synthetic_blobs_sit_on_centroids():
    m = generate_synthetic_dataset(4, 2, 6, "detection", 0.9)
    for rec in m:
        for x, y in rec.centroids:
            # blob colour is bright yellow; background is pink
            assert rec.image[int(y), int(x), 2] < 160
            assert rec.image[int(y), int(x), 0] > 200


@pytest.mark.parametrize("kwargs", [{"n_slides": 1}, {"positive_rate": 0.0}, {"positive_rate": 1.0}])
def test_synthetic_rejects_bad_params(kwargs):
    args = dict(seed=0, n_slides=2, patches_per_slide=2, track="detection", positive_rate=0.5)
    args.update(kwargs)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(**args)


def test_manifest_validate_rejects_unknown_track():
    rec = PatchRecord("a", "s", 0, 0.25, centroids=[])
    with pytest.raises(ManifestError):
        DatasetManifest([rec], "segmentation").validate()
