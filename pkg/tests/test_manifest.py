import os

import pytest
import torch
from PIL import Image

from app import __version__, open_ledger
from checkpoints import read_header, save_checkpoint
from combine_manifests import combine_manifests
from conftest import image_files
from errors import ValidationError
from imaging import load_png, make_grid_image, resize, save_png
from ingest import ingest_directory
from manifest import SOURCE_GENERATED, DatasetManifest, ImageRecord
from models import ProcessingLog
from toy_corpus import make_toy_corpus


def read_bytes(root):
    return {p: open(os.path.join(root, p), "rb").read() for p in image_files(root)}


def test_toy_corpus_counts(tmp_path):
    manifest = make_toy_corpus(5, 3, 16, seed=0, out_dir=str(tmp_path))
    assert len(manifest) == 15
    assert manifest.subject_ids() == [0, 1, 2, 3, 4]
    manifest.validate(check_files=True, per_subject=3)
    assert load_png(manifest.abspath(manifest.records[0])).shape == (3, 16, 16)


def test_toy_corpus_is_byte_identical_per_seed(tmp_path):
    make_toy_corpus(3, 4, 16, seed=2, out_dir=str(tmp_path / "a"))
    make_toy_corpus(3, 4, 16, seed=2, out_dir=str(tmp_path / "b"))
    make_toy_corpus(3, 4, 16, seed=3, out_dir=str(tmp_path / "c"))
    assert read_bytes(str(tmp_path / "a")) == read_bytes(str(tmp_path / "b"))
    assert read_bytes(str(tmp_path / "a")) != read_bytes(str(tmp_path / "c"))


def test_toy_identities_differ_more_than_their_images(tmp_path):
    manifest = make_toy_corpus(6, 4, 16, seed=1, out_dir=str(tmp_path))
    images, labels = manifest.load_images()
    flat = images.flatten(1)
    dist = torch.cdist(flat, flat)
    same = labels[:, None] == labels[None, :]
    off = ~torch.eye(len(labels), dtype=torch.bool)
    assert dist[same & off].mean() < dist[~same].mean()


@pytest.mark.parametrize("n, per", [(1, 3), (3, 0)])
def test_toy_corpus_rejects_invalid_sizes(tmp_path, n, per):
    with pytest.raises(ValidationError):
        make_toy_corpus(n, per, 16, seed=0, out_dir=str(tmp_path))


def test_manifest_file_round_trip(toy_corpus):
    reread = DatasetManifest.read(toy_corpus.root)
    assert reread.records == toy_corpus.records
    assert reread.header["tool_version"] == __version__
    assert reread.header["kind"] == "toy"
    assert list(reread.to_frame().columns) == ["subject_id", "path", "source", "m", "seed"]


def test_manifest_validation(toy_corpus):
    dup = DatasetManifest(root=toy_corpus.root, records=toy_corpus.records + [toy_corpus.records[0]])
    with pytest.raises(ValidationError):
        dup.validate(check_files=False)
    bad_tag = DatasetManifest(root=toy_corpus.root, records=[ImageRecord(0, "x.png", source="scraped")])
    with pytest.raises(ValidationError):
        bad_tag.validate(check_files=False)
    missing = DatasetManifest(root=toy_corpus.root, records=[ImageRecord(0, "nope.png")])
    with pytest.raises(ValidationError):
        missing.validate(check_files=True)
    with pytest.raises(ValidationError):
        toy_corpus.validate(check_files=False, per_subject=4)


def test_class_index_is_dense_and_sorted(tmp_path):
    manifest = DatasetManifest(root=str(tmp_path), records=[ImageRecord(7, "a.png"), ImageRecord(3, "b.png"),
                                                            ImageRecord(7, "c.png", source=SOURCE_GENERATED)])
    assert manifest.class_index() == {3: 0, 7: 1}
    assert manifest.subject_ids() == [7, 3]


def test_combine_renumbers_subjects(tmp_path):
    a = make_toy_corpus(3, 2, 16, seed=0, out_dir=str(tmp_path / "a"))
    b = make_toy_corpus(4, 2, 16, seed=1, out_dir=str(tmp_path / "b"))
    combined = combine_manifests([a, b], str(tmp_path / "all" / "manifest.jsonl"))
    assert len(combined) == 14
    assert sorted(combined.subject_ids()) == list(range(7))
    reread = DatasetManifest.read(str(tmp_path / "all"))
    reread.validate(check_files=True, per_subject=2)
    assert [p["offset"] for p in reread.header["parts"]] == [0, 3]


def test_ingest_directory_layouts(tmp_path):
    nested = tmp_path / "nested"
    for subject in ("alice", "bob"):
        for k in range(2):
            save_png(torch.zeros(3, 8, 8), str(nested / subject / f"{k}.png"))
    manifest = ingest_directory(str(nested))
    assert manifest.subject_ids() == [0, 1]
    assert len(manifest) == 4

    flat = tmp_path / "flat"
    for k in range(3):
        save_png(torch.zeros(3, 8, 8), str(flat / f"{k}.png"))
    (flat / "broken.png").write_bytes(b"not an image")
    session = open_ledger(str(tmp_path / "work"))
    manifest = ingest_directory(str(flat), session=session)
    assert manifest.subject_ids() == [0, 1, 2]
    with session() as s:
        row = s.query(ProcessingLog).one()
    assert row.status == "success"
    assert row.records_processed == 3
    assert "1 unreadable" in row.error_message


def test_ingest_skips_subject_directories_without_images(tmp_path):
    nested = tmp_path / "nested"
    for subject in ("alice", "carol"):
        save_png(torch.zeros(3, 8, 8), str(nested / subject / "0.png"))
    (nested / "bob").mkdir()
    (nested / "bob" / "notes.txt").write_text("no images here")
    manifest = ingest_directory(str(nested))
    assert manifest.subject_ids() == [0, 1]
    assert [r.path for r in manifest.records] == ["alice/0.png", "carol/0.png"]


def test_ingest_rejects_empty_directory(tmp_path):
    with pytest.raises(ValidationError):
        ingest_directory(str(tmp_path))


def test_checkpoint_header_records_versions(tmp_path):
    path = save_checkpoint(str(tmp_path / "x.pt"), {"w": torch.zeros(2)}, {"kind": "test", "config_digest": "d"})
    header = read_header(path)
    assert header["tool_version"] == __version__
    assert header["config_digest"] == "d"
    with open(f"{path}.header", "a") as f:
        f.write("format_version=99\n")
    with pytest.raises(ValidationError):
        read_header(path)


def test_png_quantisation_and_resize(tmp_path):
    image = torch.linspace(-1, 1, 3 * 8 * 8).reshape(3, 8, 8)
    save_png(image, str(tmp_path / "img.png"))
    torch.testing.assert_close(load_png(str(tmp_path / "img.png")), image, atol=1 / 127.5, rtol=0)
    assert resize(image, 8) is image
    assert resize(image, 4).shape == (3, 4, 4)


def test_grid_image_size(tmp_path):
    rows = [[torch.zeros(3, 8, 8)] * 3, [torch.ones(3, 8, 8)] * 2]
    path = make_grid_image(rows, str(tmp_path / "grid.png"), pad=2)
    with Image.open(path) as img:
        assert img.size == (3 * 10 + 2, 2 * 10 + 2)
