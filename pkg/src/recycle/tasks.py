"""Labeled classification tasks and synthetic task-suite generation.

Two suite flavors:

* family suites: each family owns a set of generative clusters (smooth
  prototype images plus noise); tasks within a family draw their classes
  from the family's cluster pool, so cross-family tasks are statistically
  unrelated while same-family tasks transfer.
* overlap suites: one shared class universe where every class appears in at
  most two tasks, and tasks sharing a class receive disjoint halves of that
  class's samples.

Tasks serialize to .npz files plus a JSON suite manifest; both are
byte-deterministic under a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import file_digest


@dataclass
class TrainConfig:
    """Optimizer and schedule settings shared by all training entry points."""

    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 40
    batch_size: int = 128
    sigma: float = 0.05
    seed: int = 0
    lambda_new: float | None = None   # None -> uniform 1/(m+1)
    theta_init: str = "identity"      # "identity" or "random"
    grid_lrs: tuple[float, ...] = (1e-2, 1e-3)
    grid_wds: tuple[float, ...] = (0.0, 1e-5, 1e-4)
    grid_lambda_new: tuple[float, ...] = (
        0.001, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.997)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if self.theta_init not in ("identity", "random"):
            raise ValueError(f"unknown theta_init {self.theta_init!r}")


@dataclass
class TaskSpec:
    """A labeled task: sample tensor, local labels, and split indices."""

    task_id: str
    family: str
    classes: list[int]          # global class ids; position defines the local label
    x: np.ndarray               # [n, H, W, C] float32
    y: np.ndarray               # [n] int64, values in [0, len(classes))
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    subset_e: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        for name in ("train_idx", "val_idx", "test_idx"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("sample and label counts differ")
        splits = [set(self.train_idx.tolist()), set(self.val_idx.tolist()),
                  set(self.test_idx.tolist())]
        if splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2]:
            raise ValueError(f"task {self.task_id}: splits overlap")
        present = set(self.y[self.train_idx].tolist())
        if present != set(range(len(self.classes))):
            raise ValueError(f"task {self.task_id}: some class missing from the train split")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def with_subset(self, e: int, rng: np.random.Generator) -> "TaskSpec":
        """Restrict training data to ``e`` samples, re-holding out ~10% as
        validation; the test split is untouched.

        The subset is drawn evenly across classes so every class stays
        present in the reduced train split.
        """
        if e < 2 * self.n_classes:
            raise ValueError(f"subset e={e} too small for {self.n_classes} classes")
        if e > self.train_idx.size:
            raise ValueError(f"subset e={e} exceeds train split of {self.train_idx.size}")
        per_class = [self.train_idx[self.y[self.train_idx] == c] for c in range(self.n_classes)]
        base, extra = divmod(e, self.n_classes)
        chosen = []
        for c, pool in enumerate(per_class):
            quota = base + (1 if c < extra else 0)
            if quota > pool.size:
                raise ValueError(f"class {c} has only {pool.size} train samples, need {quota}")
            chosen.append(rng.permutation(pool)[:quota])
        combined = rng.permutation(np.concatenate(chosen))
        n_val = max(1, int(round(0.1 * e)))
        # hold out validation points without emptying any class
        counts = np.bincount(self.y[combined], minlength=self.n_classes)
        val, train = [], []
        for idx in combined:
            c = self.y[idx]
            if len(val) < n_val and counts[c] > 1:
                val.append(idx)
                counts[c] -= 1
            else:
                train.append(idx)
        return replace(self, train_idx=np.asarray(train), val_idx=np.asarray(val),
                       subset_e=e)

    def meta(self) -> dict:
        return {
            "task_id": self.task_id,
            "family": self.family,
            "classes": list(map(int, self.classes)),
            "n_samples": int(self.x.shape[0]),
            "subset_e": self.subset_e,
        }


def save_task(path, task: TaskSpec) -> None:
    meta = json.dumps(task.meta(), sort_keys=True)
    np.savez(path, x=task.x, y=task.y, train_idx=task.train_idx,
             val_idx=task.val_idx, test_idx=task.test_idx,
             meta=np.frombuffer(meta.encode(), dtype=np.uint8))


def load_task(path) -> TaskSpec:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        return TaskSpec(
            task_id=meta["task_id"], family=meta["family"], classes=meta["classes"],
            x=z["x"], y=z["y"], train_idx=z["train_idx"], val_idx=z["val_idx"],
            test_idx=z["test_idx"], subset_e=meta.get("subset_e"))


# ---------------------------------------------------------------------------
# synthetic image families
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, hw: tuple[int, int], sigma: float) -> np.ndarray:
    """Zero-mean unit-std random field, low-passed with a Gaussian kernel."""
    h, w = hw
    radius = max(1, int(3 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    f = rng.standard_normal((h, w))
    f = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, f)
    f = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, f)
    f -= f.mean()
    std = f.std()
    return f / (std if std > 0 else 1.0)


@dataclass
class FamilySpec:
    """Generative definition of one task family: cluster prototypes + noise."""

    family_id: str
    prototypes: np.ndarray      # [n_clusters, H, W, C] float32
    noise: float = 0.9
    jitter: float = 0.1

    @property
    def n_clusters(self) -> int:
        return self.prototypes.shape[0]

    def sample(self, cluster_ids, n_per_class: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n_per_class`` images per listed cluster; labels are positions."""
        xs, ys = [], []
        for local, cid in enumerate(cluster_ids):
            proto = self.prototypes[cid].astype(np.float64)
            gain = 1.0 + self.jitter * rng.standard_normal((n_per_class, 1, 1, 1))
            noise = self.noise * rng.standard_normal((n_per_class,) + proto.shape)
            xs.append((gain * proto[None] + noise).astype(np.float32))
            ys.append(np.full(n_per_class, local, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)


def make_family(family_id: str, n_clusters: int, rng: np.random.Generator,
                hw: tuple[int, int] = (16, 16), channels: int = 1,
                base_scale: float = 1.0, delta_scale: float = 0.8,
                noise: float = 0.9, jitter: float = 0.1) -> FamilySpec:
    """Build a family: shared base pattern plus per-cluster deltas, all smooth."""
    sigma = rng.uniform(0.6, 1.8)
    base = _smooth_field(rng, hw, sigma)
    protos = np.empty((n_clusters, hw[0], hw[1], channels), dtype=np.float32)
    for c in range(n_clusters):
        delta = _smooth_field(rng, hw, sigma)
        img = base_scale * base + delta_scale * delta
        for ch in range(channels):
            protos[c, :, :, ch] = img
    return FamilySpec(family_id=family_id, prototypes=protos, noise=noise, jitter=jitter)


def _build_task(task_id: str, family: FamilySpec, cluster_ids, global_ids,
                n_train: int, n_val: int, n_test: int,
                rng: np.random.Generator) -> TaskSpec:
    per_class = n_train + n_val + n_test
    x, y = family.sample(cluster_ids, per_class, rng)
    train, val, test = [], [], []
    for local in range(len(cluster_ids)):
        block = np.flatnonzero(y == local)
        train.extend(block[:n_train])
        val.extend(block[n_train:n_train + n_val])
        test.extend(block[n_train + n_val:])
    return TaskSpec(
        task_id=task_id, family=family.family_id, classes=list(global_ids),
        x=x, y=y,
        train_idx=rng.permutation(np.asarray(train, dtype=np.int64)),
        val_idx=rng.permutation(np.asarray(val, dtype=np.int64)),
        test_idx=rng.permutation(np.asarray(test, dtype=np.int64)))


@dataclass
class Suite:
    """A generated collection of tasks plus the family definitions behind it."""

    kind: str
    seed: int
    tasks: list[TaskSpec]
    families: list[FamilySpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def family(self, family_id: str) -> FamilySpec:
        for f in self.families:
            if f.family_id == family_id:
                return f
        raise KeyError(family_id)


def gen_family_suite(n_families: int, tasks_per_family: int, dims=(16, 16, 1),
                     seed: int = 0, classes_per_task: int = 4,
                     clusters_per_family: int = 6, n_train: int = 90,
                     n_val: int = 10, n_test: int = 25) -> Suite:
    """Generate family-structured tasks; cross-family tasks are unrelated."""
    if n_families < 1 or tasks_per_family < 1:
        raise ValueError("family and task counts must be positive")
    if classes_per_task > clusters_per_family:
        raise ValueError(
            f"classes_per_task={classes_per_task} exceeds clusters_per_family={clusters_per_family}")
    h, w, c = dims
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFA]))
    families = [make_family(f"fam{i}", clusters_per_family, rng, hw=(h, w), channels=c)
                for i in range(n_families)]
    tasks = []
    for fi, fam in enumerate(families):
        for t in range(tasks_per_family):
            cluster_ids = np.sort(rng.choice(clusters_per_family, size=classes_per_task,
                                             replace=False))
            global_ids = [fi * clusters_per_family + int(cid) for cid in cluster_ids]
            tasks.append(_build_task(f"{fam.family_id}_t{t}", fam, cluster_ids,
                                     global_ids, n_train, n_val, n_test, rng))
    return Suite(kind="family", seed=seed, tasks=tasks, families=families)


def sample_target_task(family: FamilySpec, task_id: str, rng: np.random.Generator,
                       classes_per_task: int = 4, n_train: int = 90,
                       n_val: int = 10, n_test: int = 25,
                       family_offset: int = 0) -> TaskSpec:
    """Draw a fresh task from an existing family's cluster pool."""
    cluster_ids = np.sort(rng.choice(family.n_clusters, size=classes_per_task,
                                     replace=False))
    global_ids = [family_offset + int(cid) for cid in cluster_ids]
    return _build_task(task_id, family, cluster_ids, global_ids,
                       n_train, n_val, n_test, rng)


def gen_overlap_suite(n_tasks: int, classes_per_task: int, seed: int = 0,
                      dims=(16, 16, 1), samples_per_class: int = 120,
                      train_frac: float = 0.7, val_frac: float = 0.1) -> Suite:
    """Generate tasks over a shared class universe with the twice-per-class rule.

    Every class appears in at most two tasks; the first half of the tasks
    partitions the universe, the second half reuses classes in a fresh
    permutation. A class shared by two tasks contributes disjoint halves of
    its samples to each.
    """
    if n_tasks < 1 or classes_per_task < 1:
        raise ValueError("task and class counts must be positive")
    total_slots = n_tasks * classes_per_task
    n_classes = (total_slots + 1) // 2
    if classes_per_task > n_classes:
        raise ValueError(
            f"infeasible budget: a task needs {classes_per_task} distinct classes "
            f"but the twice-per-class rule yields only {n_classes}")
    h, w, c = dims
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x07]))
    universe = make_family("overlap", n_classes, rng, hw=(h, w), channels=c)

    # each class appears once per permutation round, hence at most twice overall
    slots = list(rng.permutation(n_classes))
    if total_slots > n_classes:
        slots += list(rng.permutation(n_classes))[: total_slots - n_classes]
    assignments = [slots[i * classes_per_task:(i + 1) * classes_per_task]
                   for i in range(n_tasks)]
    for a in assignments:
        if len(set(a)) != len(a):
            raise ValueError("internal: duplicate class within a task")

    # pre-draw both halves of every class so shared classes never share samples
    half = samples_per_class
    class_pools: dict[int, list[np.ndarray]] = {}
    for cid in range(n_classes):
        x, _ = universe.sample([cid], 2 * half, rng)
        class_pools[cid] = [x[:half], x[half:]]
    used = {cid: 0 for cid in range(n_classes)}

    n_train = int(round(train_frac * half))
    n_val = max(1, int(round(val_frac * half)))
    tasks = []
    for ti, class_ids in enumerate(assignments):
        xs, ys = [], []
        for local, cid in enumerate(class_ids):
            xs.append(class_pools[cid][used[cid]])
            used[cid] += 1
            ys.append(np.full(half, local, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        train, val, test = [], [], []
        for local in range(len(class_ids)):
            block = np.flatnonzero(y == local)
            block = rng.permutation(block)
            train.extend(block[:n_train])
            val.extend(block[n_train:n_train + n_val])
            test.extend(block[n_train + n_val:])
        tasks.append(TaskSpec(
            task_id=f"task{ti:03d}", family="overlap",
            classes=[int(cid) for cid in class_ids], x=x, y=y,
            train_idx=rng.permutation(np.asarray(train, dtype=np.int64)),
            val_idx=rng.permutation(np.asarray(val, dtype=np.int64)),
            test_idx=rng.permutation(np.asarray(test, dtype=np.int64))))
    return Suite(kind="overlap", seed=seed, tasks=tasks, families=[universe])


# ---------------------------------------------------------------------------
# suite serialization
# ---------------------------------------------------------------------------

def save_suite(root, suite: Suite) -> None:
    root = Path(root)
    (root / "tasks").mkdir(parents=True, exist_ok=True)
    entries = []
    for task in suite.tasks:
        fname = f"tasks/{task.task_id}.npz"
        save_task(root / fname, task)
        entries.append({**task.meta(), "file": fname, "sha256": file_digest(root / fname)})
    fam_meta = []
    fam_arrays = {}
    for f in suite.families:
        fam_meta.append({"family_id": f.family_id, "noise": f.noise, "jitter": f.jitter})
        fam_arrays[f.family_id] = f.prototypes
    np.savez(root / "families.npz", **fam_arrays)
    manifest = {"kind": suite.kind, "seed": suite.seed, "tasks": entries,
                "families": fam_meta}
    (root / "suite_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_suite(root) -> Suite:
    root = Path(root)
    manifest = json.loads((root / "suite_manifest.json").read_text())
    tasks = [load_task(root / entry["file"]) for entry in manifest["tasks"]]
    families = []
    fam_file = root / "families.npz"
    if fam_file.exists():
        with np.load(fam_file) as z:
            for meta in manifest.get("families", []):
                families.append(FamilySpec(
                    family_id=meta["family_id"], prototypes=z[meta["family_id"]],
                    noise=meta["noise"], jitter=meta["jitter"]))
    return Suite(kind=manifest["kind"], seed=manifest["seed"], tasks=tasks,
                 families=families)
