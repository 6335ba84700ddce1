import collections

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pisnet.data_pipeline import (
    BatchSampler, DatasetManifest, ManifestEntry, PersonBox, SynthConfig, build_batch,
    compose_multi, entry_from_sample, extract_layout, ingest_reid_dir, read_manifest,
    render_single, synth_identity, synthesize, validate_pi_criteria, write_dataset,
    write_manifest,
)
from pisnet.errors import BatchError, ContractError, GenerationError, IngestionError
from pisnet.model_core import box_cells, feature_corrupt

from oracles import shapely_pi_criteria


def _multi(seed, a=0, b=1, scale=(0.8, 1.05)):
    rng = np.random.default_rng(seed)
    sa = render_single(synth_identity(0, a), rng)
    sb = render_single(synth_identity(0, b), rng)
    return compose_multi(sa, sb, rng, scale=scale)


# ---------------------------------------------------------------------------
# Identities and singles
# ---------------------------------------------------------------------------

def test_identity_determinism_and_uniqueness():
    assert synth_identity(7, 3) == synth_identity(7, 3)
    triplets = {tuple(np.round(synth_identity(0, i).colors[1:4], 6).ravel()) for i in range(50)}
    assert len(triplets) >= 49
    assert any(synth_identity(0, i) != synth_identity(1, i) for i in range(5))


def test_render_single_canonical_and_jitter():
    spec = synth_identity(0, 4)
    a = render_single(spec)
    b = render_single(spec)
    assert np.array_equal(a.image, b.image) and a.kind == "single"
    m = a.mask
    rows, cols = np.nonzero(m)
    box = a.persons[0]
    h, w = m.shape
    # the box spans the drawn sprite
    assert rows.min() >= np.floor(box.y0 * h) and rows.max() < np.ceil(box.y1 * h)
    assert cols.min() >= np.floor(box.x0 * w) and cols.max() < np.ceil(box.x1 * w)
    c = render_single(spec, np.random.default_rng(1))
    d = render_single(spec, np.random.default_rng(2))
    assert not np.array_equal(c.image, d.image) and c.ids == d.ids == (4,)


def test_render_single_box_property_over_1000_renders():
    rng = np.random.default_rng(0)
    for i in range(1000):
        s = render_single(synth_identity(0, i % 50), rng, min_box_area=0.15)
        b = s.persons[0]
        assert 0 <= b.x0 < b.x1 <= 1 and 0 <= b.y0 < b.y1 <= 1
        assert b.area >= 0.15 - 1e-9
        assert s.image.shape == (3, 64, 32) and s.image.min() >= 0 and s.image.max() <= 1


# ---------------------------------------------------------------------------
# Selection criteria
# ---------------------------------------------------------------------------

def test_validate_criteria_examples():
    crop = (0, 0, 1, 1)
    assert validate_pi_criteria(crop, [(0, 0, 1, 1), (0, 0, 1, 1)])
    assert not validate_pi_criteria(crop, [(0, 0, 0.45, 1), (0.55, 0, 1, 1)])
    # 65% containment: box of width 1 shifted so 0.35 hangs outside
    assert not validate_pi_criteria(crop, [(-0.35, 0, 0.65, 1), (0, 0, 1, 1)])
    assert validate_pi_criteria(crop, [(-0.3, 0, 0.7, 1), (0, 0, 1, 1)])
    # contained part smaller than 0.3 of the crop
    assert not validate_pi_criteria(crop, [(0, 0, 0.5, 0.5), (0, 0, 1, 1)])


_c = st.floats(-0.5, 1.5, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(boxes=st.lists(st.tuples(_c, _c, _c, _c), min_size=2, max_size=3))
def test_validate_criteria_agrees_with_shapely(boxes):
    norm = [(min(a, c), min(b, d), max(a, c) + 1e-3, max(b, d) + 1e-3) for a, b, c, d in boxes]
    assert validate_pi_criteria((0, 0, 1, 1), norm) == shapely_pi_criteria((0, 0, 1, 1), norm)


def test_compose_multi_respects_criteria_and_ownership():
    for seed in range(50):
        s = _multi(seed)
        assert s.kind == "multi"
        assert validate_pi_criteria((0, 0, 1, 1), s.persons)
        assert set(np.unique(s.mask)) <= {-1, 0, 1}
        # the front sprite is never hidden
        assert (s.mask == s.z_order[-1]).any()


def test_front_sprite_overwrites_back_sprite():
    from pisnet.data_pipeline import _cutout, _paste

    a = render_single(synth_identity(0, 1))
    b = render_single(synth_identity(0, 2))
    canvas = np.zeros((3, 64, 32), dtype=np.float32)
    owner = np.full((64, 32), -1, dtype=np.int8)
    full = PersonBox(0, 0.0, 0.0, 1.0, 1.0)
    pa, ma = _cutout(a)
    pb, mb = _cutout(b)
    _paste(canvas, owner, pa, ma, full, 0)
    after_back = canvas.copy()
    _paste(canvas, owner, pb, mb, full, 1)
    front = owner == 1
    assert front.any() and (owner == 0).any()
    # under the front sprite the back sprite's pixels are gone; elsewhere untouched
    assert np.array_equal(canvas[:, ~front], after_back[:, ~front])
    alone = np.zeros_like(canvas)
    _paste(alone, np.full((64, 32), -1, dtype=np.int8), pb, mb, full, 1)
    assert np.array_equal(canvas[:, front], alone[:, front])


def test_compose_multi_rejects_bad_inputs():
    rng = np.random.default_rng(0)
    a = render_single(synth_identity(0, 1), rng)
    with pytest.raises(ContractError):
        compose_multi(a, a, rng)
    m = _multi(1)
    with pytest.raises(ContractError):
        compose_multi(a, m, rng)


def test_compose_multi_generation_error():
    rng = np.random.default_rng(0)
    a = render_single(synth_identity(0, 1), rng)
    b = render_single(synth_identity(0, 2), rng)
    # persons far too small to cover 0.3 of the crop
    with pytest.raises(GenerationError):
        compose_multi(a, b, rng, scale=(0.1, 0.2))


def test_extract_layout_roundtrip_to_corruption():
    for seed in range(20):
        s = _multi(seed)
        lay = extract_layout(s)
        assert [b.as_tuple() for b in lay.boxes] == [b.as_tuple() for b in s.persons]
        assert lay.is_multi_person() or len(lay.boxes) == 2
        q = torch.full((4, 8, 4), 1.0)
        src = torch.full((4, 8, 4), 2.0)
        out = feature_corrupt(q, src, lay, (8, 4))
        covered = np.zeros((8, 4), dtype=bool)
        for b in lay.boxes:
            r0, r1, c0, c1 = box_cells(b, (8, 4))
            covered[r0:r1, c0:c1] = True
        assert np.array_equal((out[0] != 0).numpy(), covered)
    with pytest.raises(ContractError):
        extract_layout(render_single(synth_identity(0, 1)))


# ---------------------------------------------------------------------------
# Corpus and manifests
# ---------------------------------------------------------------------------

SMALL = dict(ids=8, singles_per_id=4, multis=12, distractors=5, id_split="closed", query_per_id=1)


def test_synthesize_splits_closed():
    cfg = SynthConfig(**SMALL)
    items = list(synthesize(cfg))
    counts = collections.Counter(split for _, split, _ in items)
    assert counts["query"] == 8 and counts["distractor"] == 5
    assert counts["train"] == 8 * 3 + round(12 * cfg.multi_train_frac)
    ids = {split: set() for split in counts}
    for _, split, s in items:
        ids[split].update(s.ids)
        if s.kind == "multi":
            assert validate_pi_criteria((0, 0, 1, 1), s.persons)
    assert ids["distractor"].isdisjoint(ids["query"] | ids["train"])


def test_synthesize_splits_disjoint():
    cfg = SynthConfig(ids=8, singles_per_id=2, multis=10, distractors=3, id_split="disjoint",
                      multi_train_frac=0.5, multi_scale=(0.8, 1.05))
    ids = collections.defaultdict(set)
    for _, split, s in synthesize(cfg):
        ids[split].update(s.ids)
    assert ids["train"].isdisjoint(ids["query"])
    assert ids["gallery"] <= ids["query"]


def test_write_and_read_manifest_roundtrip(tmp_path):
    m = write_dataset(SynthConfig(**SMALL), tmp_path / "ds")
    back = read_manifest(tmp_path / "ds")
    assert back.entries == m.entries
    assert back.vocabulary == m.vocabulary
    img = back.load_image(0)
    assert img.shape == (3, 64, 32) and img.dtype == np.float32


def test_dataset_bytes_reproducible(tmp_path):
    a = write_dataset(SynthConfig(**SMALL, seed=3), tmp_path / "a")
    b = write_dataset(SynthConfig(**SMALL, seed=3), tmp_path / "b")
    for e in a.entries:
        assert (a.root / e.file).read_bytes() == (b.root / e.file).read_bytes()
    assert (a.root / "manifest.txt").read_bytes() == (b.root / "manifest.txt").read_bytes()


def test_manifest_rejects_multi_query(tmp_path):
    boxes = (PersonBox(0, 0, 0, 0.6, 1), PersonBox(1, 0.4, 0, 1, 1))
    with pytest.raises(IngestionError):
        DatasetManifest(tmp_path, [ManifestEntry("x.png", "query", boxes)])


def test_read_manifest_errors(tmp_path):
    with pytest.raises(IngestionError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.txt").write_text("not a manifest\n")
    with pytest.raises(IngestionError):
        read_manifest(tmp_path)


def test_entry_stores_persons_back_to_front():
    s = _multi(4)
    e = entry_from_sample("m.png", "gallery", s)
    assert e.ids == tuple(s.persons[i].pid for i in s.z_order)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _touch_images(folder, names):
    from PIL import Image

    folder.mkdir(parents=True, exist_ok=True)
    for n in names:
        Image.new("RGB", (32, 64)).save(folder / n)


def test_ingest_flat_directory(tmp_path):
    names = [f"{pid:04d}_c{cam}s1_{k:06d}_00.jpg" for pid in range(1, 5) for cam, k in ((1, 1), (2, 2), (3, 3))]
    _touch_images(tmp_path, names + ["readme.png", "bad_name.jpg"])
    m = ingest_reid_dir(tmp_path)
    assert len(m.entries) == 12 and m.vocabulary == (1, 2, 3, 4)
    assert m.skipped == 2
    again = ingest_reid_dir(tmp_path)
    assert again.entries == m.entries


def test_ingest_market_layout(tmp_path):
    _touch_images(tmp_path / "bounding_box_train", ["0002_c1s1_000451_03.jpg", "0002_c2s1_000551_01.jpg"])
    _touch_images(tmp_path / "query", ["0005_c1s1_001351_00.jpg"])
    _touch_images(tmp_path / "bounding_box_test", ["0005_c3s1_001451_00.jpg", "-1_c1s1_000401_03.jpg",
                                                 "0000_c1s1_000151_01.jpg"])
    m = ingest_reid_dir(tmp_path)
    splits = collections.Counter(e.split for e in m.entries)
    assert splits == {"train": 2, "query": 1, "gallery": 1, "distractor": 2}
    q = m.entries[m.select("query")[0]]
    assert q.cam == 1 and m.image_path(m.select("query")[0]).is_file()


def test_ingest_errors(tmp_path):
    with pytest.raises(IngestionError):
        ingest_reid_dir(tmp_path)
    _touch_images(tmp_path / "bounding_box_train", ["0001_c1s1_000001_00.jpg"])
    _touch_images(tmp_path / "bounding_box_test", ["0001_c1s1_000001_00.jpg"])
    with pytest.raises(IngestionError):
        ingest_reid_dir(tmp_path)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

def _toy_manifest(tmp_path):
    ab = (PersonBox(0, 0.0, 0.0, 0.6, 1.0), PersonBox(1, 0.4, 0.0, 1.0, 1.0))
    single = lambda pid: (PersonBox(pid, 0.1, 0.05, 0.9, 0.95),)
    entries = [ManifestEntry("g.png", "train", ab)]
    entries += [ManifestEntry(f"s{p}_{k}.png", "train", single(p)) for p in (0, 1, 2) for k in range(2)]
    return DatasetManifest(tmp_path, entries)


def test_toy_batch_constraints(tmp_path):
    m = _toy_manifest(tmp_path)
    batch = build_batch(m, 200, np.random.default_rng(0))
    e = m.entries
    sources = collections.Counter()
    for i in range(len(batch)):
        a, b = batch.ids_a[i], batch.ids_b[i]
        assert {a, b} == {0, 1}
        assert e[batch.query_a[i]].ids == (a,) and e[batch.query_b[i]].ids == (b,)
        src = e[batch.sources[i]].ids[0]
        assert src != a
        sources[src] += 1
        assert batch.layouts[i].is_multi_person()
    assert set(sources) == {0, 1, 2}


def test_batch_determinism(tmp_path):
    m = _toy_manifest(tmp_path)
    a = build_batch(m, 16, np.random.default_rng(9))
    b = build_batch(m, 16, np.random.default_rng(9))
    assert a == b


def test_batch_error_without_eligible_ids(tmp_path):
    entries = [ManifestEntry("s.png", "train", (PersonBox(0, 0, 0, 1, 1),))]
    with pytest.raises(BatchError):
        build_batch(DatasetManifest(tmp_path, entries), 4, np.random.default_rng(0))


def test_guided_id_marginal_uniform(tmp_path):
    m = write_dataset(SynthConfig(ids=10, singles_per_id=3, multis=40, distractors=0, id_split="closed",
                                  query_per_id=1, multi_train_frac=1.0), tmp_path / "ds")
    sampler = BatchSampler(m, "train")
    rng = np.random.default_rng(0)
    counts = collections.Counter()
    for _ in range(1000):
        counts.update(sampler.sample(64, rng).ids_a)
    total = sum(counts.values())
    expected = total / len(sampler.eligible)
    for pid in sampler.eligible:
        assert abs(counts[pid] - expected) <= 0.05 * expected
