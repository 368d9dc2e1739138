"""RANDOM scorer statistics and the siamese ranking baseline."""

import numpy as np
import pytest
import torch

from geco import baselines, data, evaluation
from geco.baselines import RandomScorer, SiameseBprConfig, SiameseCheckpoint
from geco.compat import EncoderConfig


class TestRandomScorer:
    def test_repeat_calls_identical(self):
        s = RandomScorer(5)
        assert s.score("t1", "b1") == s.score("t1", "b1")

    def test_different_ids_differ(self):
        s = RandomScorer(5)
        assert s.score("t1", "b1") != s.score("t1", "b2")

    def test_seed_changes_scores(self):
        assert RandomScorer(1).score("t", "b") != RandomScorer(2).score("t", "b")

    def test_mean_of_many_draws(self):
        s = RandomScorer(11)
        vals = s.scores("top", [f"b{i}" for i in range(100_000)])
        assert 0.49 <= vals.mean() <= 0.51

    def test_kolmogorov_smirnov_uniformity(self):
        s = RandomScorer(23)
        vals = np.sort(s.scores("top", [f"b{i}" for i in range(100_000)]))
        n = len(vals)
        grid = np.arange(1, n + 1) / n
        ks = max(np.abs(grid - vals).max(), np.abs(vals - (grid - 1 / n)).max())
        assert ks < 0.01

    def test_range(self):
        s = RandomScorer(3)
        vals = s.scores("t", [f"b{i}" for i in range(1000)])
        assert vals.min() >= 0.0 and vals.max() < 1.0

    def test_independent_of_pixels(self):
        # scores are computable from ids alone: no images exist here at all
        from helpers import make_id_manifest

        manifest = make_id_manifest(50, 20)
        s = RandomScorer(7)
        report, _ = evaluation.evaluate_full(s, manifest, seed=1)
        assert report.n_queries == 50


@pytest.fixture(scope="module")
def siamese_setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("siamese")
    manifest = data.synth_toy_dataset(40, 32, 555, out)
    return manifest


class TestSiameseBpr:
    def test_untrained_in_random_band(self, siamese_setup):
        manifest = siamese_setup
        cfg = SiameseBprConfig(encoder=EncoderConfig(variant="tiny"), epochs=0)
        ckpt = baselines.train_siamese_bpr(manifest, cfg, rng_seed=9, image_size=32)
        scorer = baselines.SiameseScorer(ckpt.build_model(), manifest, 32)
        report, _ = evaluation.evaluate_full(scorer, manifest, seed=77)
        assert 0.35 <= report.auc <= 0.65

    def test_short_training_runs_and_saves(self, siamese_setup, tmp_path):
        manifest = siamese_setup
        cfg = SiameseBprConfig(encoder=EncoderConfig(variant="tiny"), epochs=2)
        ckpt = baselines.train_siamese_bpr(manifest, cfg, rng_seed=9,
                                           out_dir=tmp_path, image_size=32)
        assert (tmp_path / "siamese.pt").exists()
        log = (tmp_path / "siamese_train_log.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,bpr_loss,wall_seconds"
        assert len(log) == 3
        reloaded = SiameseCheckpoint.load(tmp_path / "siamese.pt")
        x = torch.randn(1, 3, 32, 32)
        assert torch.equal(ckpt.build_model().embed(x), reloaded.build_model().embed(x))

    def test_identical_inputs_score_like_self(self, siamese_setup):
        # a noisy copy of x stays near score(x, x); unrelated items do not
        manifest = siamese_setup
        cfg = SiameseBprConfig(encoder=EncoderConfig(variant="tiny"), epochs=10)
        ckpt = baselines.train_siamese_bpr(manifest, cfg, rng_seed=4, image_size=32)
        model = ckpt.build_model()
        store = data.ImageStore(manifest, 32)
        rng = np.random.default_rng(0)
        anchors = [store.get(i) for i in manifest.bottom_ids[:6]]
        closer = 0
        total = 0
        for i, anchor in enumerate(anchors):
            self_score = baselines.siamese_score(model, anchor, anchor)
            noisy = data.ItemImage(
                "copy", "bottom",
                np.clip(anchor.pixels + rng.normal(0, 0.02, anchor.pixels.shape), -1, 1)
                .astype(np.float32),
            )
            copy_gap = abs(baselines.siamese_score(model, anchor, noisy) - self_score)
            for j, other in enumerate(anchors):
                if j == i:
                    continue
                other_gap = abs(baselines.siamese_score(model, anchor, other) - self_score)
                total += 1
                closer += copy_gap < other_gap
        assert closer / total >= 0.7

    def test_training_deterministic(self, siamese_setup):
        manifest = siamese_setup
        cfg = SiameseBprConfig(encoder=EncoderConfig(variant="tiny"), epochs=1)
        a = baselines.train_siamese_bpr(manifest, cfg, rng_seed=6, image_size=32)
        b = baselines.train_siamese_bpr(manifest, cfg, rng_seed=6, image_size=32)
        for pa, pb in zip(a.build_model().parameters(), b.build_model().parameters()):
            assert torch.equal(pa, pb)
