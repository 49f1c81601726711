import numpy as np
import pytest
import torch

from augbackdoor.core import Batch, ConfigError, ImageDataset, RngStream
from augbackdoor.gan import (
    BACKDOOR,
    BENIGN,
    GanHyper,
    Generator,
    build_pair_dataset,
    generate_augmented,
    load_generator,
    measure_insertion_rate,
    save_generator,
    train_generator,
    trigger_correlation,
)
from augbackdoor.trigger import LabelMap, apply_trigger, checkerboard_patch


def toy_dataset(n=120, seed=0):
    """Two-class 8x8 synthetic set: class 0 bright top-left, class 1 bright bottom-left."""
    gen = np.random.default_rng(seed)
    images = torch.zeros(n, 1, 8, 8)
    labels = torch.zeros(n, dtype=torch.long)
    for i in range(n):
        c = i % 2
        labels[i] = c
        base = torch.from_numpy(gen.random((8, 8)) * 0.2).float()
        base[4:, 4:] = 0.0  # flat trigger corner, like the dark border of real digits
        if c == 0:
            base[:4, :4] += 0.7
        else:
            base[4:, :4] += 0.7
        images[i, 0] = base.clamp(0, 1)
    return ImageDataset("toy", "train", images, labels, 10)


@pytest.fixture(scope="module")
def patch8():
    return checkerboard_patch((1, 8, 8), size=4)


class TestBuildPairDataset:
    def test_p_zero_no_backdoor_pairs(self, patch8):
        pairs = build_pair_dataset(toy_dataset(), patch8, LabelMap(), p=0.0, seed=1)
        assert all(tag == BENIGN for tag in pairs.tags)

    def test_p_one_all_source_class_backdoored(self, patch8):
        ds = toy_dataset()
        pairs = build_pair_dataset(ds, patch8, LabelMap(), p=1.0, seed=1)
        for i, tag in enumerate(pairs.tags):
            if int(ds.labels[i]) == 1:
                assert tag == BACKDOOR
            else:
                assert tag == BENIGN

    def test_split_count_fixed_by_seed(self, patch8):
        ds = toy_dataset(n=600)
        a = build_pair_dataset(ds, patch8, LabelMap(), p=0.5, seed=9)
        b = build_pair_dataset(ds, patch8, LabelMap(), p=0.5, seed=9)
        count = sum(1 for t in a.tags if t == BACKDOOR)
        assert a.tags == b.tags
        # 300 source-class examples; seeded split lands near p * count
        assert 110 <= count <= 190

    def test_partition_of_source_class(self, patch8):
        ds = toy_dataset()
        pairs = build_pair_dataset(ds, patch8, LabelMap(), p=0.5, seed=2)
        n_source = int((ds.labels == 1).sum())
        tagged = sum(1 for i in range(len(ds)) if int(ds.labels[i]) == 1)
        assert tagged == n_source
        assert len(pairs.tags) == len(ds)

    def test_labels_never_modified(self, patch8):
        ds = toy_dataset()
        pairs = build_pair_dataset(ds, patch8, LabelMap(), p=0.7, seed=3)
        assert torch.equal(pairs.labels, ds.labels)

    def test_backdoor_targets_carry_trigger(self, patch8):
        ds = toy_dataset()
        pairs = build_pair_dataset(ds, patch8, LabelMap(), p=1.0, seed=4)
        for i, tag in enumerate(pairs.tags):
            corr = trigger_correlation(pairs.targets[i], patch8)
            if tag == BACKDOOR:
                assert corr > 0.99  # pattern stamped verbatim
            else:
                assert corr < 0.5

    def test_invalid_p(self, patch8):
        with pytest.raises(ConfigError):
            build_pair_dataset(toy_dataset(), patch8, LabelMap(), p=1.5, seed=0)

    def test_missing_class(self, patch8):
        ds = toy_dataset()
        only_zeros = ImageDataset("z", "train", ds.images[ds.labels == 0],
                                  ds.labels[ds.labels == 0], 10)
        with pytest.raises(ConfigError):
            build_pair_dataset(only_zeros, patch8, LabelMap(), p=0.5, seed=0)


class TestTrainGenerator:
    def test_zero_epochs_returns_untrained(self):
        pairs = build_pair_dataset(toy_dataset(), checkerboard_patch((1, 8, 8), 4),
                                   LabelMap(), p=1.0, seed=0)
        gen, log = train_generator(pairs, GanHyper(epochs=0, seed=0))
        assert isinstance(gen, Generator)
        assert log.critic_loss == [] and log.generator_loss == []

    def test_toy_backdoor_insertion(self, patch8):
        # 200 generator updates (5:1 critic ratio) on the 2-class toy set, p=1
        pairs = build_pair_dataset(toy_dataset(), patch8, LabelMap(), p=1.0, seed=0)
        hyper = GanHyper(epochs=1000, batch_size=32, max_steps=1000, noise_dim=8,
                         base_width=16, seed=0)
        gen, log = train_generator(pairs, hyper, probe=(patch8, 1))
        rate = measure_insertion_rate(gen, toy_dataset(), patch8, source_class=1)
        assert rate >= 0.8
        assert len(log.insertion_rate) >= 1

    def test_output_in_unit_range(self, patch8):
        pairs = build_pair_dataset(toy_dataset(), patch8, LabelMap(), p=1.0, seed=0)
        hyper = GanHyper(epochs=10, batch_size=32, max_steps=20, noise_dim=8,
                         base_width=16, seed=0)
        gen, _ = train_generator(pairs, hyper)
        z = torch.randn(4, 8)
        with torch.no_grad():
            out = gen(pairs.inputs[:4], z)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
        assert out.shape == pairs.inputs[:4].shape


class TestGenerateAugmented:
    def _gen(self):
        torch.manual_seed(0)
        return Generator(channels=1, image_size=8, noise_dim=8, base=16)

    def _batch(self):
        ds = toy_dataset(n=16)
        return Batch(ds.images, ds.labels)

    def test_labels_copied(self):
        batch = self._batch()
        out = generate_augmented(self._gen(), batch, RngStream(0, "noise"))
        assert torch.equal(out.labels, batch.labels)
        assert out.provenance == ["generated"] * len(batch)

    def test_same_noise_seed_identical(self):
        batch = self._batch()
        gen = self._gen()
        a = generate_augmented(gen, batch, RngStream(5, "noise"))
        b = generate_augmented(gen, batch, RngStream(5, "noise"))
        assert torch.equal(a.images, b.images)


class TestInsertionProbe:
    def test_stub_identity_on_triggered(self, patch8):
        ds = toy_dataset()
        def triggered(x, z):
            return torch.stack([apply_trigger(img, patch8) for img in x])

        assert measure_insertion_rate(triggered, ds, patch8, source_class=1) == 1.0

    def test_stub_identity_on_clean(self, patch8):
        ds = toy_dataset()
        identity = lambda x, z: x
        assert measure_insertion_rate(identity, ds, patch8, source_class=1) <= 0.05

    def test_random_generator_near_zero(self, patch8):
        ds = toy_dataset()
        rate = measure_insertion_rate(self._random_gen(), ds, patch8, source_class=1)
        assert 0.0 <= rate <= 0.2

    @staticmethod
    def _random_gen():
        torch.manual_seed(123)
        return Generator(channels=1, image_size=8, noise_dim=8, base=16)

    def test_no_source_class_rate_zero(self, patch8):
        ds = toy_dataset()
        only_zeros = ImageDataset("z", "train", ds.images[ds.labels == 0],
                                  ds.labels[ds.labels == 0], 10)
        assert measure_insertion_rate(lambda x, z: x, only_zeros, patch8, source_class=1) == 0.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(1)
        gen = Generator(channels=1, image_size=8, noise_dim=8, base=16)
        save_generator(gen, tmp_path / "g.pt")
        loaded = load_generator(tmp_path / "g.pt")
        x = torch.rand(2, 1, 8, 8)
        z = torch.randn(2, 8)
        with torch.no_grad():
            assert torch.equal(gen(x, z), loaded(x, z))
