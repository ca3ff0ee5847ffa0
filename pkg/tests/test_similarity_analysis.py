import os

import numpy as np
import pandas as pd
import pytest

from conftest import TINY_ENCODER
from errors import SubjectMappingError, ValidationError
from identity_embedder import ClassifierHead, EncoderCheckpoint, EncoderTrainConfig, embed, identity_centers, train_encoder
from imaging import load_png
from manifest import SOURCE_OVERSAMPLED, DatasetManifest, ImageRecord
from similarity_analysis import (
    ScoredImage,
    bucket_by_similarity,
    export_embeddings,
    read_embeddings,
    score_to_center,
    write_group_manifests,
)


def random_scored(n, seed):
    rng = np.random.default_rng(seed)
    sims = rng.uniform(-1, 1, size=n)
    return [ScoredImage(subject_id=int(rng.integers(20)), path=f"img_{i:05d}.png", similarity_to_center=float(s))
            for i, s in enumerate(sims)]


def test_buckets_partition_with_balanced_sizes_and_decreasing_means():
    rng = np.random.default_rng(0)
    for seed in range(10):
        n = int(rng.integers(101, 1001))
        scored = random_scored(n, seed)
        groups = bucket_by_similarity(scored, 5)
        sizes = [len(g.members) for g in groups]
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1
        paths = [m.path for g in groups for m in g.members]
        assert sorted(paths) == sorted(s.path for s in scored)
        means = [g.mean_similarity for g in groups]
        assert all(a > b for a, b in zip(means, means[1:]))
        assert [g.group_id for g in groups] == list(range(5))


def test_bucket_ties_break_by_subject_then_path():
    scored = [ScoredImage(2, "b.png", 0.5), ScoredImage(1, "z.png", 0.5), ScoredImage(1, "a.png", 0.5),
              ScoredImage(3, "c.png", 0.9)]
    groups = bucket_by_similarity(scored, 4)
    assert [g.members[0].path for g in groups] == ["c.png", "a.png", "z.png", "b.png"]


def test_bucket_validates_group_count():
    with pytest.raises(ValidationError):
        bucket_by_similarity(random_scored(3, 0), 4)
    with pytest.raises(ValidationError):
        bucket_by_similarity(random_scored(3, 0), 0)


def test_score_to_center_covers_every_image(toy_corpus, encoder):
    head = ClassifierHead(4, 8)
    scored = score_to_center(toy_corpus, encoder, head)
    assert len(scored) == len(toy_corpus)
    assert all(-1.0 <= s.similarity_to_center <= 1.0 for s in scored)
    assert [s.path for s in scored] == [r.path for r in toy_corpus.records]


def test_score_to_center_matches_center_dot_product(toy_corpus, encoder):
    head = ClassifierHead(4, 8)
    scored = score_to_center(toy_corpus, encoder, head)
    record = toy_corpus.records[5]
    embedding = embed(load_png(toy_corpus.abspath(record), resolution=8), encoder)
    center = identity_centers(head)[toy_corpus.class_index()[record.subject_id]]
    assert scored[5].similarity_to_center == pytest.approx(float(embedding @ center), abs=1e-5)


def test_score_to_center_rejects_unmapped_subjects(toy_corpus, encoder):
    with pytest.raises(SubjectMappingError):
        score_to_center(toy_corpus, encoder, ClassifierHead(2, 8))
    unknown = DatasetManifest(root=toy_corpus.root,
                              records=[ImageRecord(subject_id=42, path=toy_corpus.records[0].path)])
    with pytest.raises(SubjectMappingError):
        score_to_center(unknown, encoder, ClassifierHead(5, 8))
    mapped = ClassifierHead(4, 8, class_ids=[10, 11, 12, 13])
    with pytest.raises(SubjectMappingError):
        score_to_center(toy_corpus, encoder, mapped)


def test_subset_is_scored_against_its_own_subject_center(toy_corpus, encoder):
    head = ClassifierHead(4, 8)
    subset = DatasetManifest(root=toy_corpus.root, records=[r for r in toy_corpus.records if r.subject_id == 3])
    scored = score_to_center(subset, encoder, head)
    centers = identity_centers(head)
    for s, record in zip(scored, subset.records):
        embedding = embed(load_png(subset.abspath(record), resolution=8), encoder)
        assert s.similarity_to_center == pytest.approx(float(embedding @ centers[3]), abs=1e-5)


def test_trained_head_maps_sparse_subject_ids(toy_corpus, encoder, tmp_path):
    # subject ids 5, 7 and 9 train as classes 0, 1 and 2
    records = [ImageRecord(subject_id=2 * r.subject_id + 3, path=r.path) for r in toy_corpus.records
               if r.subject_id > 0]
    sparse = DatasetManifest(root=toy_corpus.root, records=records)
    checkpoint = train_encoder(sparse, EncoderTrainConfig(epochs=1, batch_size=4), TINY_ENCODER)
    assert checkpoint.head.class_ids == (5, 7, 9)
    reloaded = EncoderCheckpoint.load(checkpoint.save(str(tmp_path / "enc.pt"))).head
    assert reloaded.class_ids == (5, 7, 9)
    only_nine = DatasetManifest(root=toy_corpus.root, records=[r for r in records if r.subject_id == 9])
    scored = score_to_center(only_nine, checkpoint, reloaded)
    centers = identity_centers(reloaded)
    embedding = embed(load_png(only_nine.abspath(only_nine.records[0]), resolution=8), checkpoint)
    assert scored[0].similarity_to_center == pytest.approx(float(embedding @ centers[2]), abs=1e-5)


def test_score_to_center_can_exclude_oversampled(toy_corpus, encoder):
    extra = ImageRecord(subject_id=0, path=toy_corpus.records[0].path,
                        source=SOURCE_OVERSAMPLED)
    manifest = DatasetManifest(root=toy_corpus.root, records=toy_corpus.records + [extra], header={})
    head = ClassifierHead(4, 8)
    assert len(score_to_center(manifest, encoder, head)) == len(toy_corpus) + 1
    assert len(score_to_center(manifest, encoder, head, exclude_oversampled=True)) == len(toy_corpus)


def test_group_manifests_point_at_original_files(toy_corpus, encoder, tmp_path):
    scored = score_to_center(toy_corpus, encoder, ClassifierHead(4, 8))
    groups = bucket_by_similarity(scored, 3)
    out = tmp_path / "groups"
    paths = write_group_manifests(groups, toy_corpus, str(out))
    assert len(paths) == 3
    total = 0
    for group, path in zip(groups, paths):
        manifest = DatasetManifest.read(path)
        manifest.validate(check_files=True)
        assert manifest.header["group_id"] == group.group_id
        assert len(manifest) == len(group.members)
        total += len(manifest)
    assert total == len(toy_corpus)
    frame = pd.read_csv(out / "groups.csv")
    assert list(frame["group_id"]) == [0, 1, 2]


def test_embedding_export_layout(toy_corpus, encoder, tmp_path):
    scored = score_to_center(toy_corpus, encoder, ClassifierHead(4, 8))
    out = str(tmp_path / "embeddings.bin")
    export_embeddings(toy_corpus, encoder, out, scored=scored)
    header, data = read_embeddings(out)
    assert header["count"] == len(toy_corpus)
    assert header["dim"] == 8
    assert list(data["subject_id"]) == [r.subject_id for r in toy_corpus.records]
    np.testing.assert_allclose(np.linalg.norm(data["embedding"], axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(data["similarity"], [s.similarity_to_center for s in scored], atol=1e-6)
    assert os.path.getsize(out) > header["count"] * (4 + 4 + 4 * 8)


def test_embedding_export_rejects_empty_manifest(encoder, tmp_path):
    with pytest.raises(ValidationError):
        export_embeddings(DatasetManifest(root=str(tmp_path)), encoder, str(tmp_path / "e.bin"))
