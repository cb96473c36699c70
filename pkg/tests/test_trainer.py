import math

import numpy as np
import pytest
import torch

from petctseg import augment, metrics, network, preprocess, synth, trainer
from petctseg.errors import PetctsegError, ShapeError, ValidationError
from petctseg.types import SampleWeightTable


class PetSignNet(torch.nn.Module):
    """Stub: foreground logit proportional to the PET channel."""

    def __init__(self, gain: float = 6.0, offset: float = 0.0):
        super().__init__()
        self.gain = gain
        self.offset = offset

    def forward(self, x):
        s = self.gain * (x[:, 1:2] - self.offset)
        return torch.cat([-s, s], dim=1)


def stub_state(patch=(16, 16, 16), gain=6.0, offset=0.0):
    cfg = network.toy_config(patch_size=patch)
    return trainer.TrainState(network=PetSignNet(gain, offset), network_config=cfg, seed=0)


def tiny_study(seed=0, shape=(16, 16, 16)):
    return synth.generate_study(seed=seed, shape=shape, n_lesions=1, difficulty=0.2)


class TestLossTerms:
    def test_strong_logits_saturate_dice(self):
        rng = np.random.default_rng(0)
        target = torch.tensor((rng.random((1, 4, 4, 4)) < 0.3).astype(np.float32))
        logits = torch.stack([10.0 * (1 - 2 * target), 10.0 * (2 * target - 1)], dim=1)
        total, dice_term, _ = trainer.loss_terms(logits, target)
        assert float(dice_term) <= 0.01
        assert float(total) < 0.02

    def test_uniform_logits_give_ln2_cross_entropy(self):
        target = torch.tensor(
            np.array([[[[0, 1], [1, 0]], [[1, 0], [0, 1]]]], dtype=np.float32)
        )
        logits = torch.zeros(1, 2, 2, 2, 2)
        _, _, ce = trainer.loss_terms(logits, target)
        assert float(ce) == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.normal(size=(1, 2, 2, 2, 2)), dtype=torch.float64)
        target = torch.tensor(rng.integers(0, 2, (1, 2, 2, 2)), dtype=torch.float64)
        total, dice_term, ce_term = trainer.loss_terms(logits, target)

        inter = pf_sum = t_sum = ce_acc = 0.0
        for z in range(2):
            for y in range(2):
                for x in range(2):
                    l0 = float(logits[0, 0, z, y, x])
                    l1 = float(logits[0, 1, z, y, x])
                    m = max(l0, l1)
                    p1 = math.exp(l1 - m) / (math.exp(l0 - m) + math.exp(l1 - m))
                    t = float(target[0, z, y, x])
                    inter += p1 * t
                    pf_sum += p1
                    t_sum += t
                    ce_acc += -(t * math.log(p1) + (1 - t) * math.log(1 - p1))
        eps = 1e-5
        assert float(dice_term) == pytest.approx(1 - (2 * inter + eps) / (pf_sum + t_sum + eps), abs=1e-6)
        assert float(ce_term) == pytest.approx(ce_acc / 8, abs=1e-6)
        assert float(total) == pytest.approx(float(dice_term) + float(ce_term), abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            trainer.loss_terms(torch.zeros(0, 2, 2, 2, 2), torch.zeros(0, 2, 2, 2))

    def test_deep_supervision_aggregation(self):
        rng = np.random.default_rng(2)
        target = torch.tensor((rng.random((1, 8, 8, 8)) < 0.3).astype(np.float32))
        full = torch.tensor(rng.normal(size=(1, 2, 8, 8, 8)), dtype=torch.float32)
        half = torch.tensor(rng.normal(size=(1, 2, 4, 4, 4)), dtype=torch.float32)
        combined = trainer.loss([full, half], target)
        l_full = trainer.loss_terms(full, target)[0]
        l_half = trainer.loss_terms(half, target[:, ::2, ::2, ::2])[0]
        expected = (2 / 3) * float(l_full) + (1 / 3) * float(l_half)
        assert float(combined) == pytest.approx(expected, abs=1e-6)


class TestSampling:
    def test_epoch_presents_each_id_multiplicity_times(self):
        weights = SampleWeightTable({"a": 1, "b": 3})
        order = trainer.epoch_sample_order(weights, trainer.derive_rng(0, "order", 0))
        assert len(order) == 4
        assert order.count("a") == 1
        assert order.count("b") == 3

    def test_presentation_law_over_many_epochs(self):
        weights = SampleWeightTable({"a": 2, "b": 1, "c": 4})
        epochs = 5
        counts = {"a": 0, "b": 0, "c": 0}
        for e in range(epochs):
            for sid in trainer.epoch_sample_order(weights, trainer.derive_rng(3, "order", e)):
                counts[sid] += 1
        assert counts == {"a": 2 * epochs, "b": epochs, "c": 4 * epochs}

    def test_order_is_deterministic_and_shuffled(self):
        weights = SampleWeightTable({f"s{i}": 1 for i in range(20)})
        a = trainer.epoch_sample_order(weights, trainer.derive_rng(1, "order", 0))
        b = trainer.epoch_sample_order(weights, trainer.derive_rng(1, "order", 0))
        c = trainer.epoch_sample_order(weights, trainer.derive_rng(1, "order", 1))
        assert a == b
        assert a != c

    def test_extract_patch_shapes_and_padding(self):
        rng = np.random.default_rng(4)
        image = rng.normal(size=(2, 10, 10, 10)).astype(np.float32)
        mask = np.zeros((10, 10, 10), dtype=np.uint8)
        mask[5, 5, 5] = 1
        img_p, msk_p = trainer.extract_patch(image, mask, (16, 16, 16), rng)
        assert img_p.shape == (2, 16, 16, 16)
        assert msk_p.shape == (16, 16, 16)

    def test_foreground_bias_hits_lesion(self):
        rng = np.random.default_rng(5)
        image = np.zeros((2, 16, 16, 16), dtype=np.float32)
        mask = np.zeros((16, 16, 16), dtype=np.uint8)
        mask[8, 8, 8] = 1
        hits = 0
        for _ in range(300):
            _, msk_p = trainer.extract_patch(image, mask, (8, 8, 8), rng, foreground_bias=1 / 3)
            hits += int(msk_p.sum() > 0)
        assert hits >= 100  # at least the biased third


class TestTrainLoop:
    def _setup(self, n_studies=2, shape=(16, 16, 16)):
        studies = [tiny_study(seed=i, shape=shape) for i in range(n_studies)]
        stats = preprocess.compute_foreground_stats(studies)
        data = trainer.TrainingData(studies, stats)
        table = SampleWeightTable({s.id: 1 for s in studies})
        return studies, stats, data, table

    def test_zero_epochs_only_extends_provenance(self):
        studies, stats, data, table = self._setup()
        cfg = network.toy_config(patch_size=(16, 16, 16))
        state = trainer.make_state(cfg, seed=1)
        before = {k: v.clone() for k, v in state.network.state_dict().items()}
        out = trainer.train(state, data, table, None, epochs=0, lr=1e-2)
        assert out.epoch == 0
        assert len(out.lineage) == 1
        for k, v in out.network.state_dict().items():
            assert torch.equal(v, before[k])

    def test_missing_weighted_id_aborts_with_id(self):
        studies, stats, data, table = self._setup()
        bad = SampleWeightTable({"ghost": 1})
        cfg = network.toy_config(patch_size=(16, 16, 16))
        state = trainer.make_state(cfg, seed=1)
        with pytest.raises(PetctsegError, match="ghost"):
            trainer.train(state, data, bad, None, epochs=1, lr=1e-2)

    def test_loss_decreases_and_logs(self, tmp_path):
        import json

        studies, stats, data, table = self._setup(n_studies=1)
        cfg = network.toy_config(patch_size=(16, 16, 16))
        state = trainer.make_state(cfg, seed=2)
        log = tmp_path / "train.log.jsonl"
        trainer.train(state, data, table, None, epochs=30, lr=1e-2, batch_size=1, log_path=log)
        rows = [json.loads(ln) for ln in log.read_text().splitlines()]
        assert len(rows) == 30
        # median loss over the last 10% of epochs sits below the first epoch's
        last_tenth = [r["loss"] for r in rows[-3:]]
        assert float(np.median(last_tenth)) < rows[0]["loss"]
        assert rows[0]["lr"] == pytest.approx(1e-2)
        assert rows[-1]["lr"] < rows[0]["lr"]

    def test_training_is_bitwise_deterministic(self):
        results = []
        for _ in range(2):
            studies, stats, data, table = self._setup()
            cfg = network.toy_config(patch_size=(16, 16, 16))
            state = trainer.make_state(cfg, seed=3)
            out = trainer.train(state, data, table, augment.get_policy("Type1"), epochs=2, lr=1e-2)
            dice = trainer.evaluate_per_sample(out, studies, stats)
            results.append(dice.values)
        assert results[0] == results[1]


class TestEvaluatePerSample:
    def test_perfect_stub_scores_one(self):
        study = tiny_study(seed=8)
        # feed the label itself through the PET channel so the stub thresholds
        # to exactly the reference mask; identity-like stats keep the signs
        doctored = type(study)(
            id=study.id,
            tracer=study.tracer,
            ct=study.ct,
            pet=type(study.pet)(
                grid=study.pet.grid,
                values=(study.label.values.astype(np.float32) * 2 - 1),
            ),
            label=study.label,
            positive=True,
        )
        identity = preprocess.ChannelStats(mean=0.0, std=1.0, p_low=-1e6, p_high=1e6)
        stats = preprocess.NormalizationStats(ct=identity, pet=identity)
        dice = trainer.evaluate_per_sample(stub_state(), [doctored], stats)
        assert dice[study.id] == 1.0

    def test_all_background_scores_zero(self):
        study = tiny_study(seed=9)
        state = stub_state(offset=1e9)  # logits always favor background
        stats = preprocess.compute_foreground_stats([study])
        dice = trainer.evaluate_per_sample(state, [study], stats)
        assert dice[study.id] == 0.0

    def test_unlabeled_study_rejected(self):
        study = tiny_study(seed=10)
        bare = type(study)(
            id="bare", tracer=study.tracer, ct=study.ct, pet=study.pet, label=None, positive=False
        )
        identity = preprocess.ChannelStats(mean=0.0, std=1.0, p_low=-1e6, p_high=1e6)
        stats = preprocess.NormalizationStats(ct=identity, pet=identity)
        with pytest.raises(ValidationError, match="bare"):
            trainer.evaluate_per_sample(stub_state(), [bare], stats)

    def test_matches_manual_inference_plus_dice(self):
        from petctseg import inference

        study = tiny_study(seed=11)
        stats = preprocess.compute_foreground_stats([study])
        cfg = network.toy_config(patch_size=(16, 16, 16))
        state = trainer.make_state(cfg, seed=4)
        auto = trainer.evaluate_per_sample(state, [study], stats)
        norm = preprocess.normalize_study(study, stats)
        pred = inference.predict_study(state, norm, patch_size=(16, 16, 16), overlap=0.5)
        assert auto[study.id] == metrics.dice(pred, study.label)


class TestPerSampleDice:
    def test_range_enforced(self):
        with pytest.raises(ValidationError):
            trainer.PerSampleDice({"a": 1.5})

    def test_mean(self):
        d = trainer.PerSampleDice({"a": 0.2, "b": 0.8})
        assert d.mean() == pytest.approx(0.5)


class TestCloneState:
    def test_clone_isolates_weights(self):
        cfg = network.toy_config(patch_size=(16, 16, 16))
        state = trainer.make_state(cfg, seed=5)
        clone = trainer.clone_state(state, note="branch")
        with torch.no_grad():
            next(clone.network.parameters()).add_(1.0)
        assert not torch.equal(
            next(state.network.parameters()), next(clone.network.parameters())
        )
        assert clone.lineage[-1] == "branch"
