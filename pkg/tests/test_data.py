import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dsfda.data import (
    AUDIT, AugmentConfig, ConfigError, DataError, DomainSplit, LabeledFrame, LabelingError, LayoutDescriptor,
    SynthConfig, augment, biovid_layout, hflip, load_directory, load_manifest, preprocess, sample_pairs,
    synth_generate,
)


def tiny_split(n=6, size=16, role="source"):
    g = torch.Generator().manual_seed(0)
    imgs = torch.rand(n, 3, size, size, generator=g) * 2 - 1
    sids = [i % 2 for i in range(n)]
    exps = [(i // 2) % 2 for i in range(n)]
    return DomainSplit(imgs, sids, exps, role, c_id=2, c_exp=2)


def write_png(path, color=(0, 0, 0), size=8):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (size, size), color).save(path)


class TestDomainSplit:
    def test_target_adapt_must_be_neutral(self):
        with pytest.raises(LabelingError):
            DomainSplit(torch.zeros(2, 3, 16, 16), [0, 0], [0, 1], "target-adapt", 1, 2)

    def test_label_ranges(self):
        with pytest.raises(LabelingError):
            DomainSplit(torch.zeros(1, 3, 16, 16), [3], [0], "source", 2, 2)
        with pytest.raises(LabelingError):
            DomainSplit(torch.zeros(1, 3, 16, 16), [0], [2], "source", 2, 2)

    def test_unknown_role(self):
        with pytest.raises(ValueError):
            DomainSplit(torch.zeros(1, 3, 16, 16), [0], [0], "train", 1, 2)

    def test_frames_and_take_are_audited(self):
        s = tiny_split()
        AUDIT.reset()
        f = s[3]
        assert isinstance(f, LabeledFrame)
        assert f.subject_id == 1 and f.expression == 1
        s.take([0, 1])
        assert AUDIT["source"] == 3
        AUDIT.reset()
        assert AUDIT["source"] == 0

    def test_select_and_with_role(self):
        s = tiny_split()
        neutral = s.select(expressions=[0], role="target-adapt")
        assert neutral.role == "target-adapt"
        assert bool((neutral.expressions == 0).all())
        assert len(s.select(subjects=[1])) == 3

    def test_export_roundtrip(self, tmp_path):
        s = tiny_split()
        manifest = s.export(tmp_path / "out")
        lines = manifest.read_text().splitlines()
        assert lines[0] == "path,subject_id,expression"
        assert len(lines) == len(s) + 1
        back = load_manifest(tmp_path / "out", image_size=16)
        assert torch.equal(back.subject_ids, s.subject_ids)
        # 8-bit quantization only
        assert (back.take(range(len(s))) - s.take(range(len(s)))).abs().max() <= 1 / 127.5 + 1e-6


class TestPreprocess:
    def test_resize(self):
        arr = np.random.default_rng(0).integers(0, 256, (256, 256, 3), dtype=np.uint8)
        assert preprocess(arr).shape == (3, 128, 128)

    def test_black_is_minus_one(self):
        x = preprocess(np.zeros((20, 30, 3), dtype=np.uint8), 16)
        assert bool((x == -1.0).all())

    def test_white_is_exactly_one(self):
        x = preprocess(np.full((16, 16, 3), 255, dtype=np.uint8), 16)
        assert bool((x == 1.0).all())

    def test_grayscale_gets_three_channels(self):
        x = preprocess(Image.new("L", (10, 10), 128), 16)
        assert x.shape == (3, 16, 16)

    def test_bytes_and_path(self, tmp_path):
        p = tmp_path / "a.png"
        write_png(p, (255, 0, 0), 20)
        a = preprocess(str(p), 16)
        b = preprocess(p.read_bytes(), 16)
        assert torch.equal(a, b)
        assert a[0].min() == 1.0 and a[1].max() == -1.0

    def test_garbage_bytes(self):
        with pytest.raises(DataError):
            preprocess(b"not an image at all", 16)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(8, 48))
    def test_idempotent(self, seed, side):
        arr = np.random.default_rng(seed).integers(0, 256, (side, side + 3, 3), dtype=np.uint8)
        once = preprocess(arr, 32)
        assert (preprocess(once, 32) - once).abs().max() <= 1e-6


class TestAugment:
    def frame(self):
        return tiny_split()[0]

    def test_seeded(self):
        f = self.frame()
        assert torch.equal(augment(f, 7).image, augment(f, 7).image)
        assert not torch.equal(augment(f, 7).image, augment(f, 8).image)

    def test_disabled_is_identity(self):
        f = self.frame()
        assert torch.equal(augment(f, 3, AugmentConfig(enabled=False)).image, f.image)

    def test_flip_only_reverses_columns(self):
        f = self.frame()
        cfg = AugmentConfig(crop_pad=0.0, flip_prob=1.0, brightness=0.0, contrast=0.0, saturation=0.0)
        out = augment(f, 0, cfg).image
        assert torch.allclose(out, f.image.flip(-1), atol=1e-6)
        assert torch.equal(hflip(f.image)[..., 0], f.image[..., -1])

    def test_labels_and_range_preserved(self):
        f = self.frame()
        out = augment(f, 11)
        assert (out.subject_id, out.expression) == (f.subject_id, f.expression)
        assert out.image.shape == f.image.shape
        assert out.image.min() >= -1 and out.image.max() <= 1


class TestSampler:
    def test_batch_count(self):
        cfg = SynthConfig(n_identities=8, n_expressions=2, frames_per_cell=20, image_size=16)
        s = synth_generate(cfg)
        assert len(s) == 320
        assert len(list(sample_pairs(s, 32, 0))) == 10

    def test_single_frame_pairs_with_itself(self):
        s = tiny_split(1)
        (b,) = list(sample_pairs(s, 1, 0))
        assert b.size == 1
        assert torch.equal(b.id_images, b.exp_images)

    def test_batch_too_large(self):
        with pytest.raises(ConfigError):
            sample_pairs(tiny_split(4), 5, 0)

    def test_empty(self):
        empty = DomainSplit(torch.zeros(0, 3, 16, 16), [], [], "source", 1, 2)
        with pytest.raises(DataError):
            sample_pairs(empty, 1, 0)

    def test_deterministic_pairing(self):
        s = tiny_split(10)
        a = [(b.id_index.tolist(), b.exp_index.tolist()) for b in sample_pairs(s, 4, 3)]
        b = [(b.id_index.tolist(), b.exp_index.tolist()) for b in sample_pairs(s, 4, 3)]
        assert a == b

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 100))
    def test_every_frame_visited_and_batches_full(self, n, bs, seed):
        if bs > n:
            bs = n
        sampler = sample_pairs(tiny_split(n), bs, seed)
        for _ in range(2):  # two epochs
            ids, exps = set(), set()
            for b in sampler:
                assert b.size == bs
                assert b.id_images.shape == b.exp_images.shape
                ids.update(b.id_index.tolist())
                exps.update(b.exp_index.tolist())
            assert ids == exps == set(range(n))


class TestLayouts:
    def make_tree(self, root, subjects=("s1", "s2"), classes=("BL1", "PA4"), frames=3):
        for s in subjects:
            for c in classes:
                for k in range(frames):
                    write_png(root / s / c / f"{k:03d}.png", (k * 40, 0, 0))

    def test_count_and_mapping(self, tmp_path):
        self.make_tree(tmp_path)
        layout = LayoutDescriptor.from_dict({
            "rules": [{"match": r"(?P<subject>[^/]+)/BL1", "expression": 0},
                      {"match": r"(?P<subject>[^/]+)/PA4", "expression": 1}],
            "image_size": 16,
        })
        s = load_directory(tmp_path, layout)
        assert len(s) == 12
        assert s.paths == sorted(s.paths)
        assert s.paths[0] == "s1/BL1/000.png"
        assert sorted(set(s.subject_ids.tolist())) == [0, 1]

    def test_biovid_mapping_and_skip(self, tmp_path):
        self.make_tree(tmp_path, frames=4)
        lay = biovid_layout(fps=1, skip_seconds=1.0, image_size=16)
        s = load_directory(tmp_path, lay)
        assert len(s) == 2 * 2 * 3
        for p, e in zip(s.paths, s.expressions.tolist()):
            assert e == (0 if "/BL1/" in p else 1)
            assert not p.endswith("000.png")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError, match="no frames found"):
            load_directory(tmp_path, biovid_layout())

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_directory(tmp_path / "nope", biovid_layout())

    def test_unmapped_directory_names_path(self, tmp_path):
        self.make_tree(tmp_path, classes=("BL1", "PA2"))
        with pytest.raises(LabelingError, match="PA2"):
            load_directory(tmp_path, biovid_layout(image_size=16))

    def test_descriptor_file(self, tmp_path):
        p = tmp_path / "layout.yaml"
        p.write_text("rules:\n  - match: '(?P<subject>[^/]+)/neutral'\n    expression: 0\nimage_size: 16\n")
        lay = LayoutDescriptor.from_file(p)
        assert lay.rules[0].expression == 0 and lay.image_size == 16


class TestSynthetic:
    def test_count(self):
        s = synth_generate(SynthConfig(n_identities=8, n_expressions=2, frames_per_cell=10, image_size=16))
        assert len(s) == 160
        assert s.c_id == 8 and s.c_exp == 2
        assert s.take(range(3)).shape == (3, 3, 16, 16)

    def test_bitwise_determinism(self):
        cfg = SynthConfig(n_identities=3, frames_per_cell=4, seed=5)
        a, b = synth_generate(cfg), synth_generate(cfg)
        assert torch.equal(a.take(range(len(a))), b.take(range(len(b))))
        c = synth_generate(SynthConfig(n_identities=3, frames_per_cell=4, seed=6))
        assert not torch.equal(a.take(range(len(a))), c.take(range(len(c))))

    def test_too_small(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(image_size=8))

    def test_bad_counts(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(n_identities=1))

    def test_separable_factors(self):
        cfg = SynthConfig(n_identities=4, n_expressions=2, frames_per_cell=10, image_size=32, noise_std=0.05)
        s = synth_generate(cfg)
        x = s.take(range(len(s)))

        def cell(sid, e):
            m = (s.subject_ids == sid) & (s.expressions == e)
            return x[m].mean(0)

        for a in range(4):
            for b in range(a + 1, 4):
                assert (cell(a, 0) - cell(b, 0)).abs().mean() > cfg.noise_std
        for sid in range(4):
            # the expression change is local (mouth and brows), so average over the
            # 100 pixel positions it moves most instead of the whole frame
            d = (cell(sid, 0) - cell(sid, 1)).abs().amax(0).flatten()
            assert d.topk(100).values.mean() > cfg.noise_std

    def test_shifted_identities(self):
        base = SynthConfig(n_identities=4, frames_per_cell=6, image_size=16, seed=3)
        shifted = SynthConfig(n_identities=4, frames_per_cell=6, image_size=16, seed=3, n_shifted=1,
                              rest_intensity=0.5)
        a, b = synth_generate(base), synth_generate(shifted)
        xa, xb = a.take(range(len(a))), b.take(range(len(b)))
        last = a.subject_ids == 3
        # untouched identities are bit-identical
        assert torch.equal(xa[~last], xb[~last])
        rest = last & (a.expressions == 0)
        assert not torch.equal(xa[rest], xb[rest])
        # a strained rest sits between the relaxed neutral and the full expression
        pain = xa[last & (a.expressions == 1)].mean(0)
        assert (xb[rest].mean(0) - pain).abs().mean() < (xa[rest].mean(0) - pain).abs().mean()

    @pytest.mark.parametrize("kw", [dict(n_shifted=5), dict(n_shifted=1, rest_intensity=1.0)])
    def test_shift_validation(self, kw):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(n_identities=4, **kw))
