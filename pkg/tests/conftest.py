import json
import os
from pathlib import Path

import numpy as np
import pytest

import synthdigits

# bump when training/attack semantics change so stale cached models rebuild
STACK_VERSION = "desk-v2"


def cache_root() -> Path:
    root = os.environ.get("REABSNET_TEST_CACHE", "")
    path = Path(root) if root else Path(__file__).resolve().parent.parent / ".test_cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small IDX corpus for CLI plumbing tests; cached across sessions."""
    out = cache_root() / "corpus-tiny"
    marker = out / "train-images.idx"
    if not marker.exists():
        synthdigits.write_corpus(out, train=400, test=100, seed=11)
    return {
        "train_images": str(out / "train-images.idx"),
        "train_labels": str(out / "train-labels.idx"),
        "test_images": str(out / "test-images.idx"),
        "test_labels": str(out / "test-labels.idx"),
    }


@pytest.fixture(scope="session")
def desk_corpus():
    """Desk-scale corpus backing the acceptance suite; cached across sessions."""
    out = cache_root() / "corpus-desk"
    marker = out / "train-images.idx"
    if not marker.exists():
        synthdigits.write_corpus(out, train=12_000, test=2_000, seed=7)
    return {
        "train_images": str(out / "train-images.idx"),
        "train_labels": str(out / "train-labels.idx"),
        "test_images": str(out / "test-images.idx"),
        "test_labels": str(out / "test-labels.idx"),
    }


def write_config(path: Path, corpus: dict, **overrides) -> Path:
    body = {
        "data": dict(corpus),
        "seed": 7,
    }
    body.update(overrides)
    path.write_text(json.dumps(body, indent=2))
    return path


class DeskStack:
    """Desk-scale trained artifacts shared by the acceptance suite.

    Training and adversarial generation are cached on disk (keyed by
    STACK_VERSION) so repeated suite runs skip the expensive steps; delete
    .test_cache/ to rebuild from scratch.
    """

    SEED = 7
    TRAIN_SIZE = 10_000
    VAL_SIZE = 2_000
    GUARDIAN_PAIRS = 4_000
    EPOCHS = 10  # desk scale: half the full-run epoch count

    def __init__(self, corpus: dict):
        from reabsnet.data import load_split
        from reabsnet.models import NetModel, TrainConfig, build_guardian, build_master

        self.dir = cache_root() / STACK_VERSION
        self.dir.mkdir(parents=True, exist_ok=True)
        self.data = load_split(
            corpus["train_images"], corpus["train_labels"],
            corpus["test_images"], corpus["test_labels"],
            seed=self.SEED, train_size=self.TRAIN_SIZE, val_size=self.VAL_SIZE)
        self.master_spec = build_master()
        self.guardian_spec = build_guardian()
        self.train_config = TrainConfig(epochs=self.EPOCHS, batch_size=128,
                                        learning_rate=0.01, momentum=0.9,
                                        seed=self.SEED, temperature=100.0)
        self.baseline_config = TrainConfig(epochs=self.EPOCHS, batch_size=128,
                                           learning_rate=0.01, momentum=0.9,
                                           seed=self.SEED, temperature=1.0)
        self._models = {}
        self.train_seconds = {}  # only populated for work done this session

    def _cached_checkpoint(self, name, builder, spec):
        from reabsnet.models import load_checkpoint, save_checkpoint

        path = self.dir / f"{name}.ckpt"
        if not path.exists():
            save_checkpoint(builder(), path)
        return load_checkpoint(path, expected_spec=spec)

    def baseline(self):
        """Master trained at unit temperature on hard labels (no distillation)."""
        from reabsnet.models import NetModel, train

        if "baseline" not in self._models:
            ckpt = self._cached_checkpoint(
                "baseline",
                lambda: train(self.master_spec, self.data.train_images,
                              self.data.train_labels, self.baseline_config,
                              val_images=self.data.val_images,
                              val_labels=self.data.val_labels),
                self.master_spec)
            self._models["baseline"] = NetModel(ckpt)
        return self._models["baseline"]

    def master(self):
        """Distilled master (the deployed classifier)."""
        from reabsnet.models import NetModel, distill, load_checkpoint, save_checkpoint

        if "master" not in self._models:
            path = self.dir / "master.ckpt"
            if not path.exists():
                import time

                start = time.monotonic()
                student, teacher = distill(
                    self.master_spec, self.data.train_images, self.data.train_labels,
                    self.train_config, val_images=self.data.val_images,
                    val_labels=self.data.val_labels)
                self.train_seconds["master"] = time.monotonic() - start
                save_checkpoint(teacher, self.dir / "teacher.ckpt")
                save_checkpoint(student, path)
            self._models["master"] = NetModel(
                load_checkpoint(path, expected_spec=self.master_spec))
        return self._models["master"]

    def guardian_data(self):
        """(naturals, adversarials, success) for the detector's training set."""
        from reabsnet.attacks import deepfool_batch
        from reabsnet.data import CacheRecord, read_adversarial_cache, write_adversarial_cache

        path = self.dir / "adv-deepfool-train.bin"
        naturals = self.data.train_images[:self.GUARDIAN_PAIRS]
        labels = self.data.train_labels[:self.GUARDIAN_PAIRS]
        if not path.exists():
            master = self.master()
            records = []
            for start in range(0, len(naturals), 500):
                results = deepfool_batch(master, naturals[start:start + 500],
                                         labels[start:start + 500])
                records.extend(
                    CacheRecord(source_index=start + i, success=r.success,
                                image=r.x_adv.reshape(-1))
                    for i, r in enumerate(results))
            write_adversarial_cache(path, records)
        records, _ = read_adversarial_cache(path)
        adversarials = np.stack([r.image.reshape(naturals.shape[1:]) for r in records])
        success = np.array([r.success for r in records])
        return naturals, adversarials, success

    def guardian(self):
        from reabsnet.data import build_guardian_dataset
        from reabsnet.models import NetModel, TrainConfig, train

        if "guardian" not in self._models:
            def build():
                naturals, adversarials, success = self.guardian_data()
                images, labels = build_guardian_dataset(naturals, adversarials, success)
                # detector needs a hotter schedule than the master to converge
                # within the desk budget (guardian schedule is not pinned)
                config = TrainConfig(epochs=20, batch_size=128,
                                     learning_rate=0.03, momentum=0.9,
                                     seed=self.SEED, temperature=1.0)
                return train(self.guardian_spec, images, labels, config)

            ckpt = self._cached_checkpoint("guardian", build, self.guardian_spec)
            self._models["guardian"] = NetModel(ckpt)
        return self._models["guardian"]

    def system(self):
        from reabsnet.pipeline import ReabsNet

        return ReabsNet(self.master(), self.guardian())

    def test_subset(self, n, seed=None):
        from reabsnet.evaluation import select_subset

        idx = select_subset(len(self.data.test_images), n,
                            seed=self.SEED if seed is None else seed)
        return self.data.test_images[idx], self.data.test_labels[idx]


@pytest.fixture(scope="session")
def desk_stack(desk_corpus):
    return DeskStack(desk_corpus)
