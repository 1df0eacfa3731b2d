import numpy as np
import pytest

from reabsnet.attacks import AttackConfig
from reabsnet.diffcore import LayerSpec, NetworkSpec
from reabsnet.evaluation import (
    EvalReport,
    EvalRow,
    bounded_defense_rate,
    defense_success_rate,
    detect_success_rate,
    emit_report,
    evaluate_attack,
    natural_accuracy,
    rates_from_traces,
    read_report_csv,
    select_subset,
)
from reabsnet.models import Checkpoint, NetModel
from reabsnet.pipeline import ReabsNet


def affine_model(weights, bias):
    weights = np.asarray(weights, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    spec = NetworkSpec(
        input_shape=(1, 1, 2),
        layers=(LayerSpec("flat", "flatten"),
                LayerSpec("out", "dense", units=weights.shape[1])),
    )
    return NetModel(Checkpoint(spec=spec, params={"out": (weights, bias)}))


@pytest.fixture
def toy_system():
    master = affine_model([[1.0, -0.5], [0.3, 0.8]], [0.1, -0.2])
    guardian = affine_model([[0.0, 0.0], [0.0, 1.0]], [0.0, 0.2])
    return ReabsNet(master, guardian)


@pytest.fixture
def toy_data():
    rng = np.random.default_rng(0)
    images = rng.uniform(-0.5, 0.5, size=(40, 1, 1, 2)).astype(np.float32)
    images[:, 0, 0, 1] = np.minimum(images[:, 0, 0, 1], -0.25)  # guardian-pass region
    z0 = images[:, 0, 0, 0] * 1.0 + images[:, 0, 0, 1] * 0.3 + 0.1
    z1 = images[:, 0, 0, 0] * -0.5 + images[:, 0, 0, 1] * 0.8 - 0.2
    labels = (z1 > z0).astype(np.int64)  # master is perfect on these by construction
    return images, labels


class TestSubset:
    def test_deterministic_and_sized(self):
        a = select_subset(100, 10, seed=4)
        b = select_subset(100, 10, seed=4)
        assert np.array_equal(a, b)
        assert len(a) == 10 and len(set(a.tolist())) == 10

    def test_bad_n_rejected(self):
        with pytest.raises(ValueError):
            select_subset(10, 0, seed=1)


class TestDetectRate:
    def test_constant_natural_guardian_scores_zero_on_adversarials(self, toy_data):
        master = affine_model([[1.0, -0.5], [0.3, 0.8]], [0.1, -0.2])
        sleepy = affine_model([[0.0, 0.0], [0.0, 0.0]], [1.0, 0.0])  # always natural
        system = ReabsNet(master, sleepy)
        images, _ = toy_data
        assert detect_success_rate(system, images, "adversarial") == 0.0
        assert detect_success_rate(system, images, "natural") == 1.0

    def test_empty_set_rejected(self, toy_system):
        with pytest.raises(ValueError):
            detect_success_rate(toy_system, np.zeros((0, 1, 1, 2)), "natural")


class TestNaturalAccuracy:
    def test_master_is_perfect_on_toy(self, toy_system, toy_data):
        images, labels = toy_data
        assert natural_accuracy(toy_system.master, images, labels) == 1.0

    def test_pipeline_matches_master_when_guardian_passes(self, toy_system, toy_data):
        images, labels = toy_data
        assert natural_accuracy(toy_system, images, labels) == 1.0


class TestEvaluateAttack:
    def test_zero_epsilon_fgsm_reduces_to_natural_accuracy(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="fgsm", epsilon=0.0)
        row, traces = evaluate_attack(toy_system, config, images, labels)
        assert row.master_defense == natural_accuracy(toy_system.master, images, labels)
        assert all(t["replaced"] for t in traces)  # identity attack never succeeds here

    def test_rates_recomputable_from_traces(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="deepfool", max_iter=20)
        row, traces = evaluate_attack(toy_system, config, images, labels)
        master, reabsnet = rates_from_traces(traces)
        assert row.master_defense == master
        assert row.reabsnet_defense == reabsnet
        assert row.n == len(traces) == len(images)

    def test_deepfool_beats_master_and_pipeline_recovers(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="deepfool", max_iter=20)
        row, traces = evaluate_attack(toy_system, config, images, labels)
        assert row.master_defense < 0.5
        assert row.reabsnet_defense > row.master_defense

    def test_huge_bound_equals_unbounded(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="deepfool", max_iter=20)
        unbounded = defense_success_rate(toy_system, config, images, labels)
        bounded = bounded_defense_rate(toy_system, config, images, labels, eps_bound=1e9)
        assert bounded == unbounded

    def test_tiny_bound_replaces_everything(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="deepfool", max_iter=20)
        rate = bounded_defense_rate(toy_system, config, images, labels, eps_bound=1e-9)
        assert rate == natural_accuracy(toy_system, images, labels)

    def test_bad_bound_rejected(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="deepfool")
        with pytest.raises(ValueError):
            bounded_defense_rate(toy_system, config, images, labels, eps_bound=0.0)

    def test_revised_rows_carry_distance_bookkeeping(self, toy_system, toy_data):
        images, labels = toy_data
        config = AttackConfig(method="deepfool", max_iter=20)
        _, traces = evaluate_attack(toy_system, config, images, labels)
        revised = [t for t in traces if t["route"] == "revised"]
        assert revised, "expected at least one revised example on the toy"
        for t in revised:
            assert t["total_distance"] <= t["attack_distance"] + t["revision_distance"] + 1e-9


class TestReports:
    def make_report(self):
        return EvalReport(
            rows=[
                EvalRow("fgsm", False, 40, None, 1.0, 1.0, None, 0.1),
                EvalRow("deepfool", False, 40, 0.75, 0.0, 0.7, 0.3, 2.5),
            ],
            config_digest="abc123",
            checkpoint_digests={"master": "m1", "guardian": "g1"},
        )

    def test_csv_round_trip(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.csv"
        emit_report(report, path, fmt="csv")
        rows = read_report_csv(path)
        assert len(rows) == 2
        assert rows[0]["method"] == "fgsm"
        assert rows[0]["detect_rate"] is None
        assert rows[1]["detect_rate"] == 0.75
        assert rows[1]["eps_bound"] == 0.3
        assert rows[1]["n"] == 40

    def test_json_schema(self, tmp_path):
        import json
        report = self.make_report()
        path = tmp_path / "report.json"
        emit_report(report, path, fmt="json")
        body = json.loads(path.read_text())
        assert set(body) == {"config_digest", "checkpoint_digests", "rows"}
        assert body["checkpoint_digests"]["master"] == "m1"
        assert body["rows"][1]["reabsnet_defense"] == 0.7

    def test_serialization_is_deterministic(self, tmp_path):
        report = self.make_report()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_report(report, a)
        emit_report(report, b)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(self.make_report(), tmp_path / "x.yaml", fmt="yaml")
