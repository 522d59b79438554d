"""Two-stage training protocol, grid driver, probes, and reports."""

import numpy as np
import pytest

from ufd.dataio import Dataset, Manifest, SynthConfig, synth_generate
from ufd.decomp import AblationMode, LossWeights, UfdModel, fs_forward
from ufd.nn import ContractError, ShapeError, make_rng, spawn_rng
from ufd.pipeline import (
    ExperimentConfig,
    ExperimentReport,
    PairOutcome,
    evaluate,
    identity_model,
    probe_holdout_accuracy,
    train_linear_baseline,
    report_to_csv,
    report_to_text,
    run_experiment_grid,
    run_size_sweep,
    subsample_prefix,
    train_softmax_probe,
    train_task_stage,
    train_ufd_stage,
    write_report,
)
from ufd.task import ClassifierInput, TaskClassifier, classify, cross_entropy


def tiny_config(**overrides):
    base = dict(
        dim=6, n_classes=2, seed=3,
        ufd_epochs=2, task_epochs=3, ufd_batch=16, task_batch=8,
        unlabeled_per_domain=60, validation_size=10, seeds_per_pair=2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def tiny_manifest(seed=0, **synth_overrides):
    base = dict(
        dim=6, shared_dim=2, private_dim=2, n_domains=2,
        offset=4.0, noise_sigma=0.5,
        unlabeled_rows=60, train_rows=40, validation_rows=10, test_rows=20,
        seed=seed,
    )
    base.update(synth_overrides)
    data = synth_generate(SynthConfig(**base))
    return Manifest(
        dimension=base["dim"], classes=2, source_language="src",
        datasets=data.datasets,
    )


class TestConfig:
    def test_dict_round_trip(self):
        cfg = tiny_config(ablation_mode=AblationMode.MAX_MIN_MI, select_by="accuracy")
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_dict_form_uses_plain_strings(self):
        d = tiny_config().to_dict()
        assert d["ablation_mode"] == "2max-min-mi"
        assert d["input_mode"] == "invariant-specific"
        assert d["weights"] == {"alpha": 1.0, "beta": 0.3, "gamma": 1.0, "delta": None}

    def test_unknown_key_rejected(self):
        with pytest.raises(ShapeError, match="unknown"):
            ExperimentConfig.from_dict({"dim": 4, "turbo": True})

    def test_string_coercion(self):
        cfg = ExperimentConfig(
            dim=4, ablation_mode="max-mi", input_mode="invariant",
            weights={"alpha": 2.0},
        )
        assert cfg.ablation_mode is AblationMode.MAX_MI
        assert cfg.input_mode is ClassifierInput.INVARIANT_ONLY
        assert cfg.weights == LossWeights(alpha=2.0)

    def test_validation(self):
        with pytest.raises(ShapeError):
            tiny_config(ufd_batch=1)
        with pytest.raises(ShapeError):
            tiny_config(select_by="vibes")
        with pytest.raises(ShapeError):
            tiny_config(task_epochs=0)
        with pytest.raises(ShapeError):
            ExperimentConfig(dim=1)


class TestSubsample:
    def test_smaller_size_is_a_prefix_of_larger(self):
        x = make_rng(0).standard_normal((40, 3))
        small = subsample_prefix(x, 10, seed=7, stream_index=2)
        large = subsample_prefix(x, 25, seed=7, stream_index=2)
        np.testing.assert_array_equal(large[:10], small)

    def test_full_size_is_a_permutation(self):
        x = np.arange(12.0).reshape(6, 2)
        out = subsample_prefix(x, 6, seed=1, stream_index=0)
        assert sorted(map(tuple, out)) == sorted(map(tuple, x))

    def test_streams_are_independent(self):
        x = make_rng(1).standard_normal((30, 2))
        a = subsample_prefix(x, 30, seed=5, stream_index=0)
        b = subsample_prefix(x, 30, seed=5, stream_index=1)
        assert not np.array_equal(a, b)

    def test_overdraw_rejected(self):
        with pytest.raises(ShapeError):
            subsample_prefix(np.ones((4, 2)), 5, seed=0, stream_index=0)


def unlabeled_set(n, dim=6, seed=0, domain="d0"):
    return Dataset(
        make_rng(seed).standard_normal((n, dim)), None, "src", domain, "unlabeled"
    )


class TestUfdStage:
    def test_history_counts_batches_and_keeps_two_row_tail(self):
        # 50 rows, batch 16 -> 16+16+16+2: the 2-row tail still trains
        cfg = tiny_config(ufd_epochs=2, ufd_batch=16)
        _, history = train_ufd_stage(cfg, [unlabeled_set(50)])
        assert len(history) == 2 * 4
        assert [h["epoch"] for h in history] == [0.0] * 4 + [1.0] * 4

    def test_one_row_tail_is_skipped(self):
        cfg = tiny_config(ufd_epochs=1, ufd_batch=16)
        _, history = train_ufd_stage(cfg, [unlabeled_set(49)])
        assert len(history) == 3

    def test_history_carries_active_terms(self):
        cfg = tiny_config(ufd_epochs=1, ablation_mode="max-min-mi")
        _, history = train_ufd_stage(cfg, [unlabeled_set(20)])
        assert set(history[0]) == {"epoch", "total", "loss_s", "loss_p"}

    def test_domain_cap_subsamples_each_dataset(self):
        cfg = tiny_config(ufd_epochs=1, ufd_batch=16, unlabeled_per_domain=10)
        _, history = train_ufd_stage(
            cfg, [unlabeled_set(50, seed=0), unlabeled_set(50, seed=1, domain="d1")]
        )
        assert len(history) == 2  # pooled 20 rows -> 16 + 4

    def test_deterministic_under_seed(self):
        cfg = tiny_config(ufd_epochs=1)
        data = [unlabeled_set(30)]
        m1, h1 = train_ufd_stage(cfg, data)
        m2, h2 = train_ufd_stage(cfg, data)
        assert m1.checksum() == m2.checksum()
        assert h1 == h2

    def test_seed_argument_overrides_config(self):
        cfg = tiny_config(ufd_epochs=1)
        data = [unlabeled_set(30)]
        m1, _ = train_ufd_stage(cfg, data, seed=11)
        m2, _ = train_ufd_stage(cfg, data, seed=12)
        m3, _ = train_ufd_stage(cfg, data, seed=11)
        assert m1.checksum() != m2.checksum()
        assert m1.checksum() == m3.checksum()

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="dim"):
            train_ufd_stage(tiny_config(), [unlabeled_set(20, dim=5)])

    def test_no_data_rejected(self):
        with pytest.raises(ShapeError):
            train_ufd_stage(tiny_config(), [])


def labeled_set(n, dim=6, seed=0, split="train", language="src", domain="d0"):
    rng = make_rng(seed)
    x = rng.standard_normal((n, dim))
    y = (x[:, 0] > 0).astype(np.int64)
    return Dataset(x, y, language, domain, split)


def frozen_model(dim=6, seed=0):
    model = UfdModel(dim, rng=make_rng(seed))
    model.freeze()
    return model


class TestTaskStage:
    def stage(self, cfg=None, seed=0):
        cfg = cfg or tiny_config()
        model = frozen_model(cfg.dim)
        train = labeled_set(40, dim=cfg.dim, seed=seed)
        val = labeled_set(10, dim=cfg.dim, seed=seed + 1, split="validation",
                          language="tgt")
        return train_task_stage(cfg, model, train, val), model, val

    def test_requires_frozen_model(self):
        cfg = tiny_config()
        model = UfdModel(cfg.dim, rng=make_rng(0))
        with pytest.raises(ContractError):
            train_task_stage(cfg, model, labeled_set(40),
                             labeled_set(10, split="validation"))

    def test_validation_size_enforced(self):
        cfg = tiny_config(validation_size=10)
        with pytest.raises(ShapeError, match="validation"):
            train_task_stage(cfg, frozen_model(), labeled_set(40),
                             labeled_set(9, split="validation"))

    def test_trace_length_and_selection(self):
        (clf, info), _, _ = self.stage()
        assert len(info.val_losses) == 3
        assert len(info.val_accuracies) == 3
        assert info.best_epoch == int(np.argmin(info.val_losses))
        assert info.best_val_loss == min(info.val_losses)
        assert info.best_val_accuracy == info.val_accuracies[info.best_epoch]

    def test_accuracy_selection_maximizes(self):
        (clf, info), _, _ = self.stage(tiny_config(select_by="accuracy"))
        best = info.best_epoch
        assert info.val_accuracies[best] == max(info.val_accuracies)
        # earliest epoch wins ties
        assert best == int(np.argmax(info.val_accuracies))

    def test_returned_head_reproduces_best_val_loss(self):
        (clf, info), model, val = self.stage()
        from ufd.task import task_features

        f_s, f_p = task_features(model, clf, val.embeddings)
        loss = cross_entropy(classify(clf, f_s, f_p), val.labels)
        assert loss == info.best_val_loss

    def test_deterministic_under_seed(self):
        (clf1, info1), _, _ = self.stage()
        (clf2, info2), _, _ = self.stage()
        assert clf1.checksum() == clf2.checksum()
        assert info1 == info2

    def test_unlabeled_train_rejected(self):
        cfg = tiny_config()
        with pytest.raises(ShapeError):
            train_task_stage(cfg, frozen_model(), unlabeled_set(40),
                             labeled_set(10, split="validation"))


class TestEvaluate:
    def test_hand_crafted_accuracy(self):
        model = UfdModel(2, rng=make_rng(0))
        for _, value, _ in model.parameters():
            value[...] = 0.0  # invariant branch becomes the identity
        model.freeze()
        clf = TaskClassifier(2, n_classes=2,
                             input_mode=ClassifierInput.INVARIANT_ONLY,
                             rng=make_rng(0))
        clf.output.weight[...] = [[1.0, 0.0], [-1.0, 0.0]]
        clf.output.bias[...] = 0.0
        test = Dataset(
            np.array([[1.0, 9.0], [2.0, -9.0], [-1.0, 3.0], [-3.0, 0.0]]),
            np.array([0, 0, 1, 0]),
            "tgt", "d0", "test",
        )
        assert evaluate(model, clf, test) == 0.75

    def test_needs_labels(self):
        model = frozen_model(dim=2, seed=0)
        clf = TaskClassifier(2, rng=make_rng(0))
        with pytest.raises(ShapeError):
            evaluate(model, clf, unlabeled_set(4, dim=2))


class TestLinearBaseline:
    def test_identity_model_passes_embeddings_through(self):
        model = identity_model(5)
        h = make_rng(0).standard_normal((7, 5))
        _, f_s = fs_forward(model, h)
        np.testing.assert_array_equal(f_s, h)
        assert model.frozen

    def test_learns_a_separable_rule(self):
        cfg = tiny_config(task_epochs=20, learning_rate=1e-2)
        _, clf = train_linear_baseline(cfg, labeled_set(200, seed=4))
        ident = identity_model(cfg.dim)
        test = labeled_set(100, seed=5, split="test", language="tgt")
        assert evaluate(ident, clf, test) > 0.9

    def test_uses_invariant_only_head(self):
        cfg = tiny_config()
        _, clf = train_linear_baseline(cfg, labeled_set(20))
        assert clf.input_mode is ClassifierInput.INVARIANT_ONLY
        assert clf.combiner is None

    def test_deterministic(self):
        cfg = tiny_config()
        _, a = train_linear_baseline(cfg, labeled_set(30), seed=7)
        _, b = train_linear_baseline(cfg, labeled_set(30), seed=7)
        np.testing.assert_array_equal(a.output.weight, b.output.weight)

    def test_no_selection_final_weights_differ_from_task_stage(self):
        # the task stage picks the best validation epoch; the baseline keeps
        # the last one, so on data where early epochs win they must diverge
        cfg = tiny_config(task_epochs=8)
        train = labeled_set(40, seed=8)
        val = labeled_set(10, seed=9, split="validation", language="tgt")
        staged, info = train_task_stage(cfg, identity_model(cfg.dim), train, val,
                                        seed=1)
        _, plain = train_linear_baseline(cfg, train, seed=1)
        if info.best_epoch != cfg.task_epochs - 1:
            assert not np.array_equal(staged.output.weight, plain.output.weight)

    def test_rejects_unlabeled_and_dim_mismatch(self):
        cfg = tiny_config()
        with pytest.raises(ShapeError):
            train_linear_baseline(cfg, unlabeled_set(10))
        with pytest.raises(ShapeError):
            train_linear_baseline(cfg, labeled_set(10, dim=4))


class TestGrid:
    def test_row_inventory(self):
        report = run_experiment_grid(tiny_config(), tiny_manifest())
        # two target cells, one cross-domain source each, two seeds
        assert len(report.rows) == 4
        assert sorted({r.pair for r in report.rows}) == [
            "src-d0->tgt-d1", "src-d1->tgt-d0",
        ]
        assert sorted({r.seed_index for r in report.rows}) == [0, 1]
        for row in report.rows:
            assert row.source_domain != row.target_domain

    def test_means_match_hand_recomputation(self):
        report = run_experiment_grid(tiny_config(), tiny_manifest())
        accs = [r.accuracy for r in report.rows]
        assert report.overall_mean() == pytest.approx(np.mean(accs), abs=1e-12)
        for pair in report.pairs():
            got = report.pair_mean(pair)
            want = np.mean([r.accuracy for r in report.rows if r.pair == pair])
            assert got == pytest.approx(want, abs=1e-12)
        for lang, dom in report.cells():
            got = report.cell_mean(lang, dom)
            want = np.mean(
                [r.accuracy for r in report.rows if r.target_domain == dom]
            )
            assert got == pytest.approx(want, abs=1e-12)

    def test_stage_one_is_shared_within_a_seed(self):
        report = run_experiment_grid(tiny_config(), tiny_manifest())
        for seed_index in (0, 1):
            losses = {r.ufd_loss for r in report.rows if r.seed_index == seed_index}
            assert len(losses) == 1

    def test_ufd_loss_is_final_epoch_mean(self):
        cfg = tiny_config()
        manifest = tiny_manifest()
        report = run_experiment_grid(cfg, manifest)
        unlabeled = [manifest.get("src", d, "unlabeled") for d in ("d0", "d1")]
        _, history = train_ufd_stage(cfg, unlabeled, seed=cfg.seed)
        last = history[-1]["epoch"]
        want = float(np.mean([h["total"] for h in history if h["epoch"] == last]))
        got = next(r.ufd_loss for r in report.rows if r.seed_index == 0)
        assert got == want

    def test_grid_is_deterministic(self):
        a = run_experiment_grid(tiny_config(), tiny_manifest())
        b = run_experiment_grid(tiny_config(), tiny_manifest())
        assert a.rows == b.rows

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="dim"):
            run_experiment_grid(tiny_config(dim=8), tiny_manifest())

    def test_single_domain_corpus_has_no_cross_pairs(self):
        manifest = tiny_manifest(n_domains=1)
        with pytest.raises(ShapeError, match="cross-domain"):
            run_experiment_grid(tiny_config(), manifest)


class TestSweep:
    def test_sizes_and_nested_prefixes(self):
        cfg = tiny_config(seeds_per_pair=1, ufd_epochs=1)
        out = run_size_sweep(cfg, tiny_manifest(), sizes=[10, 40])
        assert [s for s, _ in out] == [10, 40]
        losses = [rep.rows[0].ufd_loss for _, rep in out]
        assert losses[0] != losses[1]

    def test_bad_sizes_rejected(self):
        cfg = tiny_config(seeds_per_pair=1)
        manifest = tiny_manifest()
        with pytest.raises(ShapeError):
            run_size_sweep(cfg, manifest, sizes=[1])
        with pytest.raises(ShapeError, match="exceeds"):
            run_size_sweep(cfg, manifest, sizes=[61])


class TestProbes:
    def blobs(self, seed=0, n=200, gap=4.0):
        rng = make_rng(seed)
        x = rng.standard_normal((n, 4))
        y = (rng.random(n) < 0.5).astype(np.int64)
        x[:, 0] += gap * y
        return x, y

    def test_learns_separable_data(self):
        x, y = self.blobs()
        assert probe_holdout_accuracy(x, y, 2, seed=0) >= 0.9

    def test_chance_on_unrelated_labels(self):
        x, y = self.blobs(gap=0.0)
        acc = probe_holdout_accuracy(x, y, 2, seed=0)
        assert acc <= 0.75

    def test_deterministic(self):
        x, y = self.blobs(seed=1)
        assert probe_holdout_accuracy(x, y, 2, seed=3) == probe_holdout_accuracy(
            x, y, 2, seed=3
        )

    def test_too_few_rows_rejected(self):
        with pytest.raises(ShapeError):
            probe_holdout_accuracy(np.ones((4, 2)), np.zeros(4, dtype=np.int64), 2, 0)

    def test_probe_head_is_plain_softmax(self):
        x, y = self.blobs(seed=2)
        probe = train_softmax_probe(x, y, 2, seed=0)
        assert probe.combiner is None
        probs = classify(probe, x)
        assert probs.shape == (200, 2)


class TestReports:
    def report(self):
        rows = [
            PairOutcome("src", "d0", "tgt", "d1", 0, 1.25, 0.5, 0.875),
            PairOutcome("src", "d0", "tgt", "d1", 1, 1.5, 0.25, 0.625),
        ]
        return ExperimentReport(tiny_config(), rows)

    def test_csv_layout(self, tmp_path):
        path = tmp_path / "results.csv"
        report_to_csv(self.report(), path)
        assert path.read_text() == (
            "pair,seed,ufd_loss,task_val_loss,accuracy\n"
            "src-d0->tgt-d1,0,1.25,0.5,0.875\n"
            "src-d0->tgt-d1,1,1.5,0.25,0.625\n"
        )

    def test_text_report_mentions_all_aggregates(self):
        text = report_to_text(self.report())
        assert "src-d0->tgt-d1: 0.7500" in text
        assert "tgt-d1: 0.7500" in text
        assert "overall mean accuracy: 0.7500" in text
        assert "ablation_mode" in text

    def test_write_report_creates_both_files(self, tmp_path):
        write_report(self.report(), tmp_path / "out")
        assert (tmp_path / "out" / "results.csv").exists()
        assert (tmp_path / "out" / "report.txt").exists()

    def test_empty_report_refuses_aggregates(self):
        report = ExperimentReport(tiny_config(), [])
        with pytest.raises(ShapeError):
            report.overall_mean()
        with pytest.raises(ShapeError):
            report.pair_mean("src-d0->tgt-d1")
