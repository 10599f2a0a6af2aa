"""Synthetic dataset assembly, rigid augmentation and the optimisation loop."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cf
from . import octree as ot
from .autodiff import Adam, Tape, mae_loss
from .flow_oracle import (
    SimulationRecord,
    generate_record,
    quantize_cloud,
    read_cloud,
    read_record,
    write_cloud,
    write_record,
)
from .hemo_bc import InflowWaveform, InjectionParams, default_injection, flow_split, waveform_grid
from .model import SurrogateModel
from .vasctree import (
    PointCloud,
    VesselTree,
    add_flow_extensions,
    format_tree,
    generate_tree,
    parse_tree,
    read_tree,
    sample_lumen_points,
    write_tree,
)

SPLITS = ("train", "val", "test")


@dataclass
class Case:
    case_id: str
    tree: VesselTree
    cloud: PointCloud
    waveform: InflowWaveform
    injection: InjectionParams
    record: SimulationRecord
    n_cycles: int = 2

    @property
    def duration(self) -> float:
        """Simulated span (ms) used to normalise trunk-net time inputs."""
        return self.n_cycles * self.waveform.cycle_length


@dataclass
class Dataset:
    cases: list[Case]
    split: dict[str, str]

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids")
        if set(ids) != set(self.split):
            raise ValueError("every case needs exactly one split")
        bad = set(self.split.values()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")

    def ids(self, name: str) -> list[str]:
        return [c.case_id for c in self.cases if self.split[c.case_id] == name]

    def subset(self, name: str) -> list[Case]:
        return [c for c in self.cases if self.split[c.case_id] == name]

    def case(self, case_id: str) -> Case:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_time_points: int = 10
    batch_spatial_points: int = 4096
    max_epochs: int = 40
    seed: int = 0
    velocity_scale: float = 1.0
    augment_rotation: bool = True
    augment_translation: float = 5.0
    time_budget_s: float = 0.0

    def __post_init__(self):
        if self.lr < 0 or self.velocity_scale <= 0:
            raise ValueError("lr must be >= 0 and velocity_scale > 0")
        if min(self.batch_time_points, self.batch_spatial_points, self.max_epochs) < 1:
            raise ValueError("batch sizes and max_epochs must be positive")
        if self.augment_translation < 0 or self.time_budget_s < 0:
            raise ValueError("augment_translation and time_budget_s must be >= 0")

    @classmethod
    def from_run_config(cls, cfg: dict) -> "TrainConfig":
        return cls(cfg["lr"], cfg["batch_time_points"], cfg["batch_spatial_points"], cfg["max_epochs"],
                   cfg["seed"], cfg["velocity_scale_ms"], cfg["augment_rotation"],
                   cfg["augment_translation_mm"], cfg["time_budget_s"])


# ---------------------------------------------------------------------------
# dataset

def split_sizes(n_cases: int) -> tuple[int, int, int]:
    """7:1:1 split with validation and test sizes rounded, train taking the rest."""
    if n_cases < 4:
        raise ValueError("need at least 4 cases to populate train, val and test splits")
    n_small = max(1, round(n_cases / 9))
    return n_cases - 2 * n_small, n_small, n_small


def _make_case(args) -> Case:
    case_id, tree_seed, n_gen, wf_index, cfg = args
    tree = generate_tree(cf.tree_config(cfg, n_gen), tree_seed)
    tree = add_flow_extensions(tree, cfg["extension_factor"])
    tree = parse_tree(format_tree(tree))  # disk precision
    cloud = quantize_cloud(sample_lumen_points(tree, cfg["spacing_mm"], tree_seed))
    waveform = waveform_grid(cfg["waveform_samples"])[wf_index]
    injection = default_injection(waveform, cfg["t_l_ms"], cfg["q_ca_max_mls"])
    record = generate_record(tree, cloud, waveform, injection, cf.physics_constants(cfg), cfg["n_cycles"],
                             flow_split(tree, cfg["split_exponent"]), case_id)
    record.velocities = record.velocities.astype(np.float32).astype(np.float64)
    return Case(case_id, tree, cloud, waveform, injection, record, cfg["n_cycles"])


def build_dataset(n_cases: int, cfg: dict | None = None, seed: int = 0, workers: int = 1) -> Dataset:
    """Generate ``n_cases`` oracle cases and split them by geometry.

    Each case gets its own tree seed, a generation count from
    ``n_generations_choices`` and a waveform drawn uniformly from the 18-entry
    grid. All arrays are rounded to their on-disk precision so a saved and
    reloaded dataset is identical to the in-memory one.
    """
    cfg = {**cf.defaults(), **(cfg or {})}
    sizes = split_sizes(n_cases)
    rng = np.random.default_rng(seed)
    tree_seeds = rng.choice(2 ** 31 - 1, size=n_cases, replace=False)
    n_gens = rng.choice(np.asarray(cfg["n_generations_choices"]), size=n_cases)
    wf_idx = rng.integers(0, 18, size=n_cases)
    order = rng.permutation(n_cases)
    width = max(3, len(str(n_cases - 1)))
    ids = [f"{i:0{width}d}" for i in range(n_cases)]
    jobs = [(ids[i], int(tree_seeds[i]), int(n_gens[i]), int(wf_idx[i]), cfg) for i in range(n_cases)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cases = list(pool.map(_make_case, jobs))
    else:
        cases = [_make_case(j) for j in jobs]
    names = ["test"] * sizes[2] + ["val"] * sizes[1] + ["train"] * sizes[0]
    split = {ids[i]: names[k] for k, i in enumerate(order)}
    return Dataset(cases, split)


def format_split(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "split"])
    for c in ds.cases:
        w.writerow([c.case_id, ds.split[c.case_id]])
    return buf.getvalue()


def save_dataset(ds: Dataset, out_dir: str | Path, cfg: dict | None = None) -> None:
    cfg = {**cf.defaults(), **(cfg or {})}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in ds.cases:
        d = out / f"case_{c.case_id}"
        d.mkdir(exist_ok=True)
        write_tree(c.tree, d / "tree.txt")
        write_cloud(c.cloud, d / "cloud.bin")
        write_record(c.record, d / "record.bin")
        cf.write_config(cf.bc_values(c.waveform, c.injection, cfg), d / "bc.cfg", cf.BC_SCHEMA)
    (out / "split.csv").write_text(format_split(ds), encoding="utf-8")
    cf.write_config(cfg, out / "run.cfg")


def load_case(case_dir: str | Path) -> Case:
    d = Path(case_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"case directory {d} does not exist")
    case_id = d.name.removeprefix("case_")
    bc = cf.read_config(d / "bc.cfg", cf.BC_SCHEMA)
    waveform, injection = cf.bc_objects(bc)
    record = read_record(d / "record.bin", case_id)
    record.waveform, record.injection = waveform, injection
    cloud = read_cloud(d / "cloud.bin")
    if record.velocities.shape[1] != len(cloud):
        raise ValueError(f"case {case_id}: record has {record.velocities.shape[1]} points, cloud {len(cloud)}")
    return Case(case_id, read_tree(d / "tree.txt"), cloud, waveform, injection, record, bc["n_cycles"])


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    manifest = root / "split.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found")
    rows = list(csv.DictReader(io.StringIO(manifest.read_text(encoding="utf-8"))))
    split = {r["case"]: r["split"] for r in rows}
    cases = [load_case(root / f"case_{cid}") for cid in split]
    return Dataset(cases, split)


# ---------------------------------------------------------------------------
# augmentation

def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix from a uniform unit quaternion."""
    u1, u2, u3 = rng.random(3)
    a, b = math.sqrt(1 - u1), math.sqrt(u1)
    w, x, y, z = (a * math.sin(2 * math.pi * u2), a * math.cos(2 * math.pi * u2),
                  b * math.sin(2 * math.pi * u3), b * math.cos(2 * math.pi * u3))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def points(self, p: np.ndarray) -> np.ndarray:
        return p @ self.rotation.T + self.translation

    def vectors(self, v: np.ndarray) -> np.ndarray:
        return v @ self.rotation.T


def sample_transform(rng: np.random.Generator, rotate: bool = True, max_translation: float = 5.0) -> RigidTransform:
    R = random_rotation(rng) if rotate else np.eye(3)
    t = rng.uniform(-max_translation, max_translation, 3) if max_translation > 0 else np.zeros(3)
    return RigidTransform(R, t)


def augment(cloud: PointCloud, velocities: np.ndarray, seed: int | None = None, identity: bool = False,
            rotate: bool = True, max_translation: float = 5.0,
            octree_config: ot.OctreeConfig = ot.OctreeConfig(), max_tries: int = 20):
    """Rigidly move a cloud and rotate its velocity vectors (..., N, 3) alike.

    Returns ``(cloud, velocities, transform)``. Transforms that push the cloud
    out of the octree domain are resampled.
    """
    if identity:
        return cloud, velocities, RigidTransform()
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        tf = sample_transform(rng, rotate, max_translation)
        pts = tf.points(cloud.points)
        try:
            ot.build(pts, octree_config)
        except ValueError:
            continue
        return PointCloud(pts, cloud.wall_distance), tf.vectors(velocities), tf
    raise ValueError("could not place the augmented geometry inside the octree domain")


# ---------------------------------------------------------------------------
# optimisation

def _view(case: Case, config: TrainConfig, rng: np.random.Generator, octree_config: ot.OctreeConfig,
          cache: dict | None):
    """An (optionally augmented) view: (cloud, octree, transform)."""
    if config.augment_rotation or config.augment_translation > 0:
        cloud, _, tf = augment(case.cloud, np.zeros((0, 3)), int(rng.integers(2 ** 63)), rotate=config.augment_rotation,
                               max_translation=config.augment_translation, octree_config=octree_config)
        return cloud, ot.build(cloud, octree_config), tf
    return case.cloud, cached_octree(case, octree_config, cache), RigidTransform()


def cached_octree(case: Case, octree_config: ot.OctreeConfig, cache: dict | None) -> ot.Octree:
    if cache is None:
        return ot.build(case.cloud, octree_config)
    if case.case_id not in cache:
        cache[case.case_id] = ot.build(case.cloud, octree_config)
    return cache[case.case_id]


def step_loss(model: SurrogateModel, case: Case, cloud: PointCloud, octree: ot.Octree, tf: RigidTransform,
              t_idx: np.ndarray, p_idx: np.ndarray, velocity_scale: float):
    """Forward pass on (times x points) and the MAE against normalised targets."""
    field_ = model.encode(cloud, case.waveform, octree)
    b = model.spatial_head(field_, octree, cloud.points[p_idx])
    r = model.trunk_forward(case.record.times[t_idx] / case.duration)
    pred = model.evaluate_velocity(b, r)
    target = tf.vectors(case.record.velocities[t_idx][:, p_idx]) / velocity_scale
    return mae_loss(pred, target)


def training_step(model: SurrogateModel, case: Case, config: TrainConfig, rng: np.random.Generator,
                  optimizer: Adam | None = None, octree_cache: dict | None = None) -> float:
    """One ADAM step on a random (time x point) batch of one augmented case."""
    if optimizer is None:
        optimizer = Adam(model.params, lr=config.lr)
    oc = ot.OctreeConfig(model.config.octree_depth)
    n_frames, n_points = case.record.velocities.shape[:2]
    t_idx = np.sort(rng.choice(n_frames, min(config.batch_time_points, n_frames), replace=False))
    p_idx = rng.choice(n_points, min(config.batch_spatial_points, n_points), replace=False)
    cloud, octree, tf = _view(case, config, rng, oc, octree_cache)
    optimizer.zero_grad()
    with Tape() as tape:
        loss = step_loss(model, case, cloud, octree, tf, t_idx, p_idx, config.velocity_scale)
    tape.backward(loss)
    optimizer.step()
    return float(loss.data)


def case_mae(model: SurrogateModel, case: Case, velocity_scale: float = 1.0, octree: ot.Octree | None = None) -> float:
    """MAE over all frames and points of a case, in units of ``velocity_scale``."""
    pred = model.predict(case.cloud, case.waveform, case.cloud.points, case.record.times, case.duration, octree)
    return float(np.abs(pred - case.record.velocities).mean() / velocity_scale)


@dataclass
class FitResult:
    log: list[tuple[int, float, float]]
    best_epoch: int
    best_val: float
    state: dict[str, np.ndarray]


def format_log(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mae", "val_mae"])
    for epoch, tr, va in log:
        w.writerow([epoch, repr(float(tr)), repr(float(va))])
    return buf.getvalue()


def fit(model: SurrogateModel, dataset: Dataset, config: TrainConfig, log_path: str | Path | None = None,
        progress=None) -> FitResult:
    """Train for ``max_epochs`` (or until the time budget) and keep the best validation state.

    An epoch visits every training case once in a seeded random order. The
    model is left holding the selected parameters.
    """
    train_cases = dataset.subset("train")
    val_cases = dataset.subset("val")
    if not train_cases:
        raise ValueError("empty training split")
    if not val_cases:
        raise ValueError("empty validation split")
    model.velocity_scale = config.velocity_scale
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.lr)
    oc = ot.OctreeConfig(model.config.octree_depth)
    cache: dict[str, ot.Octree] = {}
    log: list[tuple[int, float, float]] = []
    best_val, best_epoch, best_state = math.inf, 0, model.state_dict()
    t0 = time.monotonic()
    for epoch in range(1, config.max_epochs + 1):
        losses = [training_step(model, train_cases[i], config, rng, opt, cache)
                  for i in rng.permutation(len(train_cases))]
        errs = [case_mae(model, c, config.velocity_scale, cached_octree(c, oc, cache)) for c in val_cases]
        sizes = [c.record.velocities.size for c in val_cases]
        val = float(np.average(errs, weights=sizes))
        log.append((epoch, float(np.mean(losses)), val))
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.state_dict()
        if progress is not None:
            progress(epoch, log[-1])
        if log_path is not None:
            Path(log_path).write_text(format_log(log), encoding="utf-8")
        if config.time_budget_s and time.monotonic() - t0 >= config.time_budget_s:
            break
    model.load_state_dict(best_state)
    return FitResult(log, best_epoch, best_val, best_state)
