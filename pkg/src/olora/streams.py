"""Synthetic datasets and the three non-stationary stream scenarios.

Each class is a distinct procedural pattern (a Gaussian blob plus an oriented
frequency grating) with per-sample amplitude jitter and pixel noise, so raw
pixels are linearly separable class evidence. Streams emit batches exactly
once per training sample; the task identity travels on the batch for metric
bookkeeping only and is stripped from the learner-facing view.

Scenarios: ``disjoint`` partitions classes over tasks; ``siblurry`` mixes
single-task classes with classes whose samples scatter across tasks;
``domain`` keeps the label space fixed while a per-domain transform (quarter
turns, brightness shift, pixel noise) moves the input distribution, with
extra held-out domains reserved for testing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ConfigError
from .tensor import make_rng

TEST_FRACTION = 0.25
NOISE_STD = 0.1
DOMAIN_BRIGHTNESS_MAX = 0.06
DOMAIN_NOISE_MAX = 0.02
HOLDOUT_DOMAIN_RATIO = 3 / 8  # test/train domain count ratio, scaled down


@dataclass(frozen=True)
class LearnerBatch:
    """What the learner is allowed to see: no task identity."""

    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    hidden_task_id: int

    def learner_view(self) -> LearnerBatch:
        return LearnerBatch(self.inputs, self.labels, self.sample_ids)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [n, channels, size, size], values in [0, 1]
    labels: np.ndarray  # [n] int64
    class_count: int
    seed: int
    recipe: dict

    def class_indices(self, cls: int) -> np.ndarray:
        return np.nonzero(self.labels == cls)[0]


@dataclass
class Stream:
    scenario: str
    batches: list
    eval_sets: list  # per task: (inputs, labels)
    num_tasks: int
    class_count: int
    task_classes: list
    training_ids: np.ndarray
    dataset_seed: int
    stream_seed: int
    batch_size: int
    holdout_sets: list = field(default_factory=list)
    domain_params: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


def gen_synthetic(class_count: int, per_class: int, image_size: int, seed: int,
                  channels: int = 1) -> SyntheticDataset:
    """Procedural dataset: one blob+grating pattern per class, noise on top."""
    if class_count < 1 or per_class < 1 or image_size < 2 or channels < 1:
        raise ConfigError("gen_synthetic: sizes must be positive (image_size >= 2)")
    rng = make_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, image_size), np.linspace(0, 1, image_size),
                         indexing="ij")
    images = np.empty((class_count * per_class, channels, image_size, image_size),
                      dtype=np.float32)
    labels = np.empty(class_count * per_class, dtype=np.int64)
    for cls in range(class_count):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.15, 0.25)
        freq = rng.uniform(1.0, 3.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
        grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta))
                                     + phase)
        pattern = 0.5 * blob + 0.5 * grating
        lo = cls * per_class
        amp = rng.uniform(0.96, 1.04, size=(per_class, 1, 1, 1))
        noise = rng.normal(0.0, NOISE_STD, size=(per_class, channels, image_size, image_size))
        block = 0.25 + 0.5 * amp * pattern[None, None, :, :] + noise
        images[lo : lo + per_class] = np.clip(block, 0.0, 1.0).astype(np.float32)
        labels[lo : lo + per_class] = cls
    recipe = {"class_count": class_count, "per_class": per_class,
              "image_size": image_size, "channels": channels}
    return SyntheticDataset(images=images, labels=labels, class_count=class_count,
                            seed=seed, recipe=recipe)


def _split_train_test(dataset: SyntheticDataset, rng) -> tuple:
    """Stratified per-class split; test pool feeds the eval sets."""
    train, test = [], []
    for cls in range(dataset.class_count):
        idx = dataset.class_indices(cls)
        perm = rng.permutation(len(idx))
        n_test = max(1, int(round(len(idx) * TEST_FRACTION)))
        test.append(idx[perm[:n_test]])
        train.append(idx[perm[n_test:]])
    return train, test


def _check_dataset_size(dataset: SyntheticDataset, batch_size: int) -> None:
    for cls in range(dataset.class_count):
        n = len(dataset.class_indices(cls))
        if n < 2 * batch_size:
            raise ConfigError(
                f"class {cls} has {n} samples; needs at least 2 x batch_size = {2 * batch_size}"
            )


def _batched(dataset, ids, task_id, batch_size, transform=None):
    batches = []
    for lo in range(0, len(ids), batch_size):
        chunk = np.asarray(ids[lo : lo + batch_size], dtype=np.int64)
        inputs = dataset.images[chunk]
        if transform is not None:
            inputs = transform(inputs, chunk)
        batches.append(
            Batch(inputs=inputs, labels=dataset.labels[chunk].copy(),
                  sample_ids=chunk.copy(), hidden_task_id=task_id)
        )
    return batches


def _eval_set(dataset, ids, transform=None):
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    inputs = dataset.images[ids]
    if transform is not None:
        inputs = transform(inputs, ids)
    return inputs, dataset.labels[ids].copy()


def make_disjoint_stream(dataset: SyntheticDataset, num_tasks: int, batch_size: int,
                         seed: int) -> Stream:
    """Classes split into equal per-task groups; tasks emitted in order."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be positive")
    if dataset.class_count % num_tasks != 0:
        raise ConfigError(
            f"class count {dataset.class_count} not divisible by {num_tasks} tasks"
        )
    _check_dataset_size(dataset, batch_size)
    rng = make_rng(seed)
    train_pool, test_pool = _split_train_test(dataset, rng)
    class_perm = rng.permutation(dataset.class_count)
    per_task = dataset.class_count // num_tasks
    batches, eval_sets, task_classes = [], [], []
    training_ids = []
    for task in range(num_tasks):
        classes = sorted(int(c) for c in class_perm[task * per_task : (task + 1) * per_task])
        task_classes.append(classes)
        ids = np.concatenate([train_pool[c] for c in classes])
        ids = ids[rng.permutation(len(ids))]
        training_ids.append(ids)
        batches.extend(_batched(dataset, ids, task, batch_size))
        eval_sets.append(_eval_set(dataset, np.concatenate([test_pool[c] for c in classes])))
    return Stream(scenario="disjoint", batches=batches, eval_sets=eval_sets,
                  num_tasks=num_tasks, class_count=dataset.class_count,
                  task_classes=task_classes, training_ids=np.concatenate(training_ids),
                  dataset_seed=dataset.seed, stream_seed=seed, batch_size=batch_size)


def make_siblurry_stream(dataset: SyntheticDataset, num_tasks: int, batch_size: int,
                         disjoint_frac: float = 0.5, blurry_frac: float = 0.1,
                         seed: int = 0) -> Stream:
    """Mixed boundaries: disjoint classes stay in one task, blurry classes scatter.

    floor(disjoint_frac * classes) classes are confined to a single task each;
    floor(blurry_frac * classes) classes have their samples spread over at
    least two tasks via a flat Dirichlet draw; remaining classes are excluded.
    """
    if not (0.0 <= disjoint_frac <= 1.0 and 0.0 <= blurry_frac <= 1.0):
        raise ConfigError("fractions must lie in [0, 1]")
    if disjoint_frac + blurry_frac > 1.0:
        raise ConfigError("disjoint_frac + blurry_frac must not exceed 1")
    if num_tasks < 2:
        raise ConfigError("siblurry needs at least 2 tasks")
    _check_dataset_size(dataset, batch_size)
    rng = make_rng(seed)
    train_pool, test_pool = _split_train_test(dataset, rng)
    n_disjoint = int(np.floor(disjoint_frac * dataset.class_count))
    n_blurry = int(np.floor(blurry_frac * dataset.class_count))
    perm = rng.permutation(dataset.class_count)
    disjoint_classes = [int(c) for c in perm[:n_disjoint]]
    blurry_classes = [int(c) for c in perm[n_disjoint : n_disjoint + n_blurry]]

    task_ids = [[] for _ in range(num_tasks)]
    task_class_sets = [set() for _ in range(num_tasks)]
    for i, cls in enumerate(disjoint_classes):
        task = i % num_tasks
        task_ids[task].append(train_pool[cls])
        task_class_sets[task].add(cls)
    for cls in blurry_classes:
        ids = train_pool[cls]
        counts = rng.multinomial(len(ids), rng.dirichlet(np.ones(num_tasks)))
        while np.count_nonzero(counts) < 2:
            src = int(np.argmax(counts))
            counts[src] -= 1
            counts[(src + 1) % num_tasks] += 1
        shuffled = ids[rng.permutation(len(ids))]
        offset = 0
        for task, count in enumerate(counts):
            if count == 0:
                continue
            task_ids[task].append(shuffled[offset : offset + count])
            task_class_sets[task].add(cls)
            offset += count

    batches, eval_sets, task_classes = [], [], []
    training_ids = []
    for task in range(num_tasks):
        classes = sorted(task_class_sets[task])
        task_classes.append(classes)
        if task_ids[task]:
            ids = np.concatenate(task_ids[task])
            ids = ids[rng.permutation(len(ids))]
        else:
            ids = np.array([], dtype=np.int64)
        training_ids.append(ids)
        batches.extend(_batched(dataset, ids, task, batch_size))
        eval_ids = np.concatenate([test_pool[c] for c in classes]) if classes else []
        eval_sets.append(_eval_set(dataset, eval_ids))
    return Stream(scenario="siblurry", batches=batches, eval_sets=eval_sets,
                  num_tasks=num_tasks, class_count=dataset.class_count,
                  task_classes=task_classes, training_ids=np.concatenate(training_ids),
                  dataset_seed=dataset.seed, stream_seed=seed, batch_size=batch_size)


def _domain_params(rng, num_domains: int):
    """Per-domain transform parameters; domain 0 is the identity."""
    params = [{"rotation": 0, "brightness": 0.0, "noise": 0.0}]
    for _ in range(1, num_domains):
        params.append({
            "rotation": int(rng.integers(0, 4)),
            "brightness": float(rng.uniform(-DOMAIN_BRIGHTNESS_MAX, DOMAIN_BRIGHTNESS_MAX)),
            "noise": float(rng.uniform(0.0, DOMAIN_NOISE_MAX)),
        })
    return params


def _apply_domain(images: np.ndarray, ids: np.ndarray, params: dict, noise_seed: int):
    """Quarter-turn rotation, brightness shift, per-sample deterministic noise."""
    out = images.astype(np.float64)
    if params["rotation"]:
        out = np.rot90(out, k=params["rotation"], axes=(2, 3))
    out = out + params["brightness"]
    if params["noise"] > 0.0:
        for i, sid in enumerate(ids):
            srng = make_rng(noise_seed * 1_000_003 + int(sid))
            out[i] += srng.normal(0.0, params["noise"], size=out[i].shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_domain_stream(dataset: SyntheticDataset, num_domains: int, batch_size: int,
                       seed: int) -> Stream:
    """Fixed label space, per-domain input transforms, sequential domains.

    The training pool is split evenly per class across domains; held-out
    domains (extra transforms, scaled from the 8-train/3-test convention)
    are exposed as ``holdout_sets``.
    """
    if num_domains < 2:
        raise ConfigError("num_domains must be at least 2")
    _check_dataset_size(dataset, batch_size)
    rng = make_rng(seed)
    train_pool, test_pool = _split_train_test(dataset, rng)
    n_holdout = max(1, int(round(num_domains * HOLDOUT_DOMAIN_RATIO)))
    params = _domain_params(rng, num_domains + n_holdout)

    per_domain = [[] for _ in range(num_domains)]
    for cls in range(dataset.class_count):
        ids = train_pool[cls]
        share = len(ids) // num_domains
        shuffled = ids[rng.permutation(len(ids))]
        for d in range(num_domains):
            per_domain[d].append(shuffled[d * share : (d + 1) * share])

    all_classes = list(range(dataset.class_count))
    test_ids = np.concatenate(test_pool)
    batches, eval_sets, task_classes = [], [], []
    training_ids = []
    for d in range(num_domains):
        ids = np.concatenate(per_domain[d])
        ids = ids[rng.permutation(len(ids))]
        training_ids.append(ids)
        transform = lambda imgs, chunk, p=params[d], s=seed + d: _apply_domain(imgs, chunk, p, s)
        batches.extend(_batched(dataset, ids, d, batch_size, transform=transform))
        eval_sets.append(_eval_set(dataset, test_ids, transform=transform))
        task_classes.append(all_classes)
    holdout_sets = []
    for j in range(n_holdout):
        p = params[num_domains + j]
        transform = lambda imgs, chunk, p=p, s=seed + num_domains + j: _apply_domain(
            imgs, chunk, p, s)
        holdout_sets.append(_eval_set(dataset, test_ids, transform=transform))
    return Stream(scenario="domain", batches=batches, eval_sets=eval_sets,
                  num_tasks=num_domains, class_count=dataset.class_count,
                  task_classes=task_classes, training_ids=np.concatenate(training_ids),
                  dataset_seed=dataset.seed, stream_seed=seed, batch_size=batch_size,
                  holdout_sets=holdout_sets, domain_params=params)


def build_stream(scenario: str, dataset: SyntheticDataset, num_tasks: int, batch_size: int,
                 seed: int, disjoint_frac: float = 0.5, blurry_frac: float = 0.1) -> Stream:
    if scenario == "disjoint":
        return make_disjoint_stream(dataset, num_tasks, batch_size, seed)
    if scenario == "siblurry":
        return make_siblurry_stream(dataset, num_tasks, batch_size,
                                    disjoint_frac, blurry_frac, seed)
    if scenario == "domain":
        return make_domain_stream(dataset, num_tasks, batch_size, seed)
    raise ConfigError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# export / load (directory layout shared with the CLI)
# ---------------------------------------------------------------------------

def export_stream(stream: Stream, out_dir) -> None:
    """Write manifest + per-batch/eval tensor files in the shared binary format."""
    out = Path(out_dir)
    (out / "batches").mkdir(parents=True, exist_ok=True)
    (out / "eval").mkdir(exist_ok=True)
    batch_entries = []
    for i, batch in enumerate(stream.batches):
        name = f"batches/b{i:05d}.olra"
        checkpoint.save(out / name, {
            "inputs": batch.inputs,
            "labels": batch.labels.astype(np.float32),
            "sample_ids": batch.sample_ids.astype(np.float32),
        })
        batch_entries.append({"file": name, "task": batch.hidden_task_id})
    eval_entries = []
    for i, (inputs, labels) in enumerate(stream.eval_sets):
        name = f"eval/task{i:03d}.olra"
        checkpoint.save(out / name, {
            "inputs": np.asarray(inputs, dtype=np.float32),
            "labels": np.asarray(labels, dtype=np.float32),
        })
        eval_entries.append(name)
    holdout_entries = []
    if stream.holdout_sets:
        (out / "holdout").mkdir(exist_ok=True)
        for i, (inputs, labels) in enumerate(stream.holdout_sets):
            name = f"holdout/domain{i:03d}.olra"
            checkpoint.save(out / name, {
                "inputs": np.asarray(inputs, dtype=np.float32),
                "labels": np.asarray(labels, dtype=np.float32),
            })
            holdout_entries.append(name)
    checkpoint.save(out / "ids.olra",
                    {"training_ids": stream.training_ids.astype(np.float32)})
    manifest = {
        "scenario": stream.scenario,
        "num_tasks": stream.num_tasks,
        "class_count": stream.class_count,
        "batch_size": stream.batch_size,
        "dataset_seed": stream.dataset_seed,
        "stream_seed": stream.stream_seed,
        "task_classes": stream.task_classes,
        "batches": batch_entries,
        "eval_sets": eval_entries,
        "holdout_sets": holdout_entries,
        "domain_params": stream.domain_params,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )


def load_stream(in_dir) -> Stream:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    batches = []
    for entry in manifest["batches"]:
        data = checkpoint.load(src / entry["file"])
        batches.append(Batch(
            inputs=data["inputs"],
            labels=data["labels"].astype(np.int64),
            sample_ids=data["sample_ids"].astype(np.int64),
            hidden_task_id=int(entry["task"]),
        ))
    eval_sets = []
    for name in manifest["eval_sets"]:
        data = checkpoint.load(src / name)
        eval_sets.append((data["inputs"], data["labels"].astype(np.int64)))
    holdout_sets = []
    for name in manifest["holdout_sets"]:
        data = checkpoint.load(src / name)
        holdout_sets.append((data["inputs"], data["labels"].astype(np.int64)))
    ids = checkpoint.load(src / "ids.olra")["training_ids"].astype(np.int64)
    return Stream(
        scenario=manifest["scenario"],
        batches=batches,
        eval_sets=eval_sets,
        num_tasks=manifest["num_tasks"],
        class_count=manifest["class_count"],
        task_classes=[list(map(int, cs)) for cs in manifest["task_classes"]],
        training_ids=ids,
        dataset_seed=manifest["dataset_seed"],
        stream_seed=manifest["stream_seed"],
        batch_size=manifest["batch_size"],
        holdout_sets=holdout_sets,
        domain_params=manifest.get("domain_params", []),
    )
