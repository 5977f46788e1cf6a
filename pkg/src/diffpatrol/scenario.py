"""Synthetic green-security dataset generation.

Each instance is a random simple graph whose nodes are patrol regions.
Poaching counts are drawn from Gamma distributions whose shape parameters
come from one of two fixed randomly initialized graph-convolution stacks
(picked per node with probability 1/2; scale 1.0 for the first stack, 0.9
for the second), perturbed by noise inversely proportional to the count,
capped to [0, 40], and scaled by 0.2 — so every count lands in [0, 8].

The diffusion context for an instance concatenates the flattened node
features with a synthetic prior-patrol-effort vector.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphInstance",
    "GcnStack",
    "GeneratorWeights",
    "ScenarioInstance",
    "DatasetConfig",
    "DatasetSplit",
    "generate_graph",
    "gcn_forward",
    "noisy_gamma_counts",
    "sample_poaching_counts",
    "build_dataset",
    "load_dataset",
    "dataset_digest",
]


@dataclass(frozen=True)
class GraphInstance:
    n_nodes: int
    edges: np.ndarray  # (E, 2), sorted pairs, no duplicates or self-loops
    features: np.ndarray  # (n_nodes, feat_dim)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            canon = np.sort(edges, axis=1)
            if len({(int(u), int(v)) for u, v in canon}) != len(canon):
                raise ValueError("duplicate edges are not allowed")
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise ValueError("edge endpoint outside node range")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))

    def neighbor_mean_matrix(self) -> np.ndarray:
        """Row-normalized closed-neighborhood averaging operator (self + neighbors)."""
        a = np.eye(self.n_nodes)
        for u, v in self.edges:
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a / a.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class GcnStack:
    """Three rounds of neighbor averaging + affine maps; scalar head."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @classmethod
    def init(cls, feat_dim: int, hidden: int, rng: np.random.Generator) -> "GcnStack":
        sizes = [feat_dim, hidden, hidden, 1]
        ws = tuple(
            rng.standard_normal((sizes[i], sizes[i + 1])) / np.sqrt(sizes[i])
            for i in range(3)
        )
        bs = tuple(np.zeros(sizes[i + 1]) for i in range(3))
        return cls(weights=ws, biases=bs)

    @classmethod
    def zeros(cls, feat_dim: int, hidden: int) -> "GcnStack":
        sizes = [feat_dim, hidden, hidden, 1]
        return cls(
            weights=tuple(np.zeros((sizes[i], sizes[i + 1])) for i in range(3)),
            biases=tuple(np.zeros(sizes[i + 1]) for i in range(3)),
        )


@dataclass(frozen=True)
class GeneratorWeights:
    """The two fixed stacks driving the Gamma shape parameters."""

    stack_a: GcnStack
    stack_b: GcnStack

    @classmethod
    def init(cls, feat_dim: int, rng: np.random.Generator, hidden: int = 16) -> "GeneratorWeights":
        return cls(GcnStack.init(feat_dim, hidden, rng), GcnStack.init(feat_dim, hidden, rng))

    def to_jsonable(self) -> dict:
        def dump(stack: GcnStack) -> dict:
            return {
                "weights": [w.tolist() for w in stack.weights],
                "biases": [b.tolist() for b in stack.biases],
            }

        return {"stack_a": dump(self.stack_a), "stack_b": dump(self.stack_b)}

    @classmethod
    def from_jsonable(cls, payload: dict) -> "GeneratorWeights":
        def load(blob: dict) -> GcnStack:
            return GcnStack(
                weights=tuple(np.asarray(w, dtype=float) for w in blob["weights"]),
                biases=tuple(np.asarray(b, dtype=float) for b in blob["biases"]),
            )

        return cls(load(payload["stack_a"]), load(payload["stack_b"]))


def generate_graph(
    n_nodes: int, n_edges: int, feat_dim: int, rng: np.random.Generator
) -> GraphInstance:
    """Uniform simple graph with exactly n_edges edges and Gaussian features."""
    max_edges = n_nodes * (n_nodes - 1) // 2
    if n_edges > max_edges:
        raise ValueError(f"{n_edges} edges infeasible for {n_nodes} nodes")
    chosen = rng.choice(max_edges, size=n_edges, replace=False)
    pairs = np.array(np.triu_indices(n_nodes, k=1)).T  # lexicographic pair table
    edges = pairs[np.sort(chosen)]
    features = rng.standard_normal((n_nodes, feat_dim))
    return GraphInstance(n_nodes=n_nodes, edges=edges, features=features)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def gcn_forward(graph: GraphInstance, stack: GcnStack) -> np.ndarray:
    """Per-node positive scalar in (0, 20]: sigmoid head scaled by 20."""
    agg = graph.neighbor_mean_matrix()
    h = graph.features
    for w, b in zip(stack.weights[:-1], stack.biases[:-1]):
        h = np.tanh((agg @ h) @ w + b)
    out = (agg @ h) @ stack.weights[-1] + stack.biases[-1]
    return 20.0 * _sigmoid(out[:, 0])


def noisy_gamma_counts(
    shapes: np.ndarray,
    scales: np.ndarray,
    rng: np.random.Generator,
    noise_scale: float = 2.0,
    cap: float = 40.0,
    rescale: float = 0.2,
) -> np.ndarray:
    """Gamma draws with count-inverse noise, then cap and rescale.

    Noise is added before capping; low-count nodes receive more noise.
    """
    counts = rng.gamma(np.asarray(shapes, dtype=float), np.asarray(scales, dtype=float))
    if noise_scale > 0:
        counts = counts + rng.standard_normal(counts.shape) * noise_scale / (1.0 + counts)
    return np.clip(counts, 0.0, cap) * rescale


def sample_poaching_counts(
    graph: GraphInstance,
    gen_weights: GeneratorWeights,
    rng: np.random.Generator,
    noise_scale: float = 2.0,
) -> np.ndarray:
    """One poaching vector for a graph; every coordinate lies in [0, 8]."""
    shape_a = gcn_forward(graph, gen_weights.stack_a)
    shape_b = gcn_forward(graph, gen_weights.stack_b)
    pick_b = rng.random(graph.n_nodes) < 0.5
    shapes = np.where(pick_b, shape_b, shape_a)
    scales = np.where(pick_b, 0.9, 1.0)
    return noisy_gamma_counts(shapes, scales, rng, noise_scale=noise_scale)


@dataclass(frozen=True)
class ScenarioInstance:
    graph: GraphInstance
    z: np.ndarray  # poaching counts per node
    prior_patrol: np.ndarray  # synthetic previous-effort vector

    @property
    def context(self) -> np.ndarray:
        return np.concatenate([self.graph.features.ravel(), self.prior_patrol])


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 4800
    n_val: int = 200
    n_test: int = 100
    n_nodes: int = 30
    n_edges: int = 20
    feat_dim: int = 10
    noise_scale: float = 2.0
    patrol_budget: float = 1.0
    seed: int = 0

    @classmethod
    def desk(cls, seed: int = 0) -> "DatasetConfig":
        return cls(n_train=480, n_val=20, n_test=10, seed=seed)


@dataclass
class DatasetSplit:
    config: DatasetConfig
    gen_weights: GeneratorWeights
    train: list[ScenarioInstance] = field(default_factory=list)
    val: list[ScenarioInstance] = field(default_factory=list)
    test: list[ScenarioInstance] = field(default_factory=list)

    def splits(self) -> dict[str, list[ScenarioInstance]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def build_dataset(
    cfg: DatasetConfig, rng: np.random.Generator, out_dir: str | None = None
) -> DatasetSplit:
    """Generate graphs, counts, and contexts; optionally write to disk."""
    gen_weights = GeneratorWeights.init(cfg.feat_dim, rng)
    sizes = [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)]
    ds = DatasetSplit(config=cfg, gen_weights=gen_weights)
    for name, size in sizes:
        bucket = getattr(ds, name)
        for _ in range(size):
            graph = generate_graph(cfg.n_nodes, cfg.n_edges, cfg.feat_dim, rng)
            z = sample_poaching_counts(graph, gen_weights, rng, noise_scale=cfg.noise_scale)
            prior = rng.uniform(0.0, cfg.patrol_budget, size=cfg.n_nodes)
            bucket.append(ScenarioInstance(graph=graph, z=z, prior_patrol=prior))
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: DatasetSplit, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": "diffpatrol-dataset-v1",
        "config": {
            "n_train": ds.config.n_train,
            "n_val": ds.config.n_val,
            "n_test": ds.config.n_test,
            "n_nodes": ds.config.n_nodes,
            "n_edges": ds.config.n_edges,
            "feat_dim": ds.config.feat_dim,
            "noise_scale": ds.config.noise_scale,
            "patrol_budget": ds.config.patrol_budget,
            "seed": ds.config.seed,
        },
        "generator_weights": ds.gen_weights.to_jsonable(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh)
    for name, bucket in ds.splits().items():
        feat_dim = ds.config.feat_dim
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["graph_id", "node_id"]
                + [f"f{k}" for k in range(feat_dim)]
                + ["prior_patrol", "z"]
            )
            for gid, inst in enumerate(bucket):
                for node in range(inst.graph.n_nodes):
                    writer.writerow(
                        [gid, node]
                        + [repr(float(v)) for v in inst.graph.features[node]]
                        + [repr(float(inst.prior_patrol[node])), repr(float(inst.z[node]))]
                    )
        with open(os.path.join(out_dir, f"{name}_edges.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["graph_id", "u", "v"])
            for gid, inst in enumerate(bucket):
                for u, v in inst.graph.edges:
                    writer.writerow([gid, int(u), int(v)])


def load_dataset(out_dir: str) -> DatasetSplit:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "diffpatrol-dataset-v1":
        raise ValueError(f"unrecognized dataset format in {out_dir}")
    cfg = DatasetConfig(**manifest["config"])
    ds = DatasetSplit(
        config=cfg,
        gen_weights=GeneratorWeights.from_jsonable(manifest["generator_weights"]),
    )
    for name, bucket in ds.splits().items():
        with open(os.path.join(out_dir, f"{name}_edges.csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        edges_by_graph: dict[int, list[tuple[int, int]]] = {}
        for gid, u, v in rows:
            edges_by_graph.setdefault(int(gid), []).append((int(u), int(v)))
        with open(os.path.join(out_dir, f"{name}.csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        by_graph: dict[int, list[list[str]]] = {}
        for row in rows:
            by_graph.setdefault(int(row[0]), []).append(row)
        for gid in sorted(by_graph):
            grows = sorted(by_graph[gid], key=lambda r: int(r[1]))
            features = np.array([[float(v) for v in r[2 : 2 + cfg.feat_dim]] for r in grows])
            prior = np.array([float(r[2 + cfg.feat_dim]) for r in grows])
            z = np.array([float(r[3 + cfg.feat_dim]) for r in grows])
            graph = GraphInstance(
                n_nodes=len(grows),
                edges=np.array(edges_by_graph.get(gid, []), dtype=int).reshape(-1, 2),
                features=features,
            )
            bucket.append(ScenarioInstance(graph=graph, z=z, prior_patrol=prior))
    return ds


def dataset_digest(ds: DatasetSplit) -> str:
    """Stable content hash of the generated data (determinism checks)."""
    h = hashlib.sha256()
    for name, bucket in ds.splits().items():
        h.update(name.encode())
        for inst in bucket:
            h.update(inst.graph.edges.tobytes())
            h.update(inst.graph.features.tobytes())
            h.update(inst.prior_patrol.tobytes())
            h.update(inst.z.tobytes())
    return h.hexdigest()
