"""
Multibin Multiclass Strategies
Combining binary classifiers into K-class predictors

One-vs-one (pairwise majority vote), one-vs-rest (maximal score) and a
binary decision tree over class partitions (one root-to-leaf descent), plus
the two tree ensembles (root node trained with three seeds, three trees
with random topologies), inference-cost accounting and the ensemble
manifest that ties model files to tasks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from errors import ConfigError, UsageError
from model_core import load_model

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
ENSEMBLE_SIZE = 3
MANIFEST_HEADER = "MULTIBIN-MANIFEST v1"


class Strategy(Enum):
    """Multinomial decomposition strategies"""
    OVO = "ovo"
    OVR = "ovr"
    DT = "dt"
    DT_ROOT_ENSEMBLE = "dt-root-ensemble"
    DT_TREE_ENSEMBLE = "dt-tree-ensemble"


class PartitionPolicy(Enum):
    """How a tree node splits its class list"""
    BALANCED = "balanced"
    RANDOM = "random"


class Scorer(Protocol):
    def score(self, X) -> np.ndarray: ...


@dataclass(frozen=True)
class BinaryTask:
    """Relabelling of the dataset: zero_classes -> 0, one_classes -> 1"""
    id: str
    zero_classes: FrozenSet[int]
    one_classes: FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "zero_classes", frozenset(self.zero_classes))
        object.__setattr__(self, "one_classes", frozenset(self.one_classes))
        if not self.zero_classes or not self.one_classes:
            raise UsageError(f"task {self.id}: both class sets must be non-empty")
        if self.zero_classes & self.one_classes:
            raise UsageError(f"task {self.id}: classes {sorted(self.zero_classes & self.one_classes)} on both sides")

    @property
    def classes(self) -> FrozenSet[int]:
        return self.zero_classes | self.one_classes

    @property
    def partition_key(self) -> str:
        """Class partition without the strategy prefix; keys the training seed streams"""
        return _partition_key(self.zero_classes, self.one_classes)


@dataclass
class CostLedger:
    """Inference overhead counted in binary-model evaluations"""
    strategy: str
    K: int
    models_total: int
    worst_case_evals: int
    observed_evals: Optional[int] = None

    def to_dict(self) -> Dict[str, Optional[int]]:
        return {
            "strategy": self.strategy,
            "K": self.K,
            "models_total": self.models_total,
            "worst_case_evals": self.worst_case_evals,
            "observed_evals": self.observed_evals,
        }


def ceil_log2(K: int) -> int:
    return (K - 1).bit_length()


def _check_k(K: int) -> None:
    if K < 2:
        raise UsageError(f"K must be at least 2, got {K}")


# ========================================
# TASK DECOMPOSITION
# ========================================

def build_ovo_tasks(K: int) -> List[BinaryTask]:
    """One task per pair k < k' (k -> 0, k' -> 1), lexicographic order"""
    _check_k(K)
    return [BinaryTask(f"ovo-{k}-{k2}", frozenset([k]), frozenset([k2]))
            for k in range(K) for k2 in range(k + 1, K)]


def build_ovr_tasks(K: int) -> List[BinaryTask]:
    """Task k: class k -> 1, every other class -> 0"""
    _check_k(K)
    return [BinaryTask(f"ovr-{k}", frozenset(c for c in range(K) if c != k), frozenset([k]))
            for k in range(K)]


def _partition_key(left: Iterable[int], right: Iterable[int]) -> str:
    return f"{'.'.join(map(str, sorted(left)))}-vs-{'.'.join(map(str, sorted(right)))}"


def _dt_task_id(left: Sequence[int], right: Sequence[int]) -> str:
    return f"dt-{_partition_key(left, right)}"


ChildRef = Tuple[str, int]  # ("node", node index) or ("leaf", class label)


@dataclass
class TreeNode:
    node_id: str
    task: BinaryTask
    left: ChildRef
    right: ChildRef
    model: Optional[Scorer] = None


@dataclass
class ClassTree:
    """Binary tree of class partitions; internal nodes hold binary models"""
    nodes: List[TreeNode]
    classes: Tuple[int, ...]
    policy: str = PartitionPolicy.BALANCED.value
    seed: Optional[int] = None
    root: int = 0

    @property
    def leaves(self) -> List[int]:
        return [ref[1] for node in self.nodes for ref in (node.left, node.right) if ref[0] == "leaf"]

    def _subtree_classes(self, ref: ChildRef) -> List[int]:
        if ref[0] == "leaf":
            return [ref[1]]
        node = self.nodes[ref[1]]
        return self._subtree_classes(node.left) + self._subtree_classes(node.right)

    def depth(self, ref: Optional[ChildRef] = None) -> int:
        ref = ref or ("node", self.root)
        if ref[0] == "leaf":
            return 0
        node = self.nodes[ref[1]]
        return 1 + max(self.depth(node.left), self.depth(node.right))

    def validate(self) -> None:
        """Check leaf/node counts and that node class sets match their subtrees"""
        K = len(self.classes)
        if sorted(self.leaves) != sorted(self.classes):
            raise ConfigError(f"tree leaves {sorted(self.leaves)} do not match classes {sorted(self.classes)}")
        if len(self.nodes) != K - 1:
            raise ConfigError(f"tree has {len(self.nodes)} internal nodes, expected {K - 1}")
        for node in self.nodes:
            if set(self._subtree_classes(node.left)) != node.task.zero_classes or \
                    set(self._subtree_classes(node.right)) != node.task.one_classes:
                raise ConfigError(f"tree node {node.node_id} task does not match its subtrees")

    def with_models(self, models: Dict[str, Scorer]) -> "ClassTree":
        """Copy of the tree with a model attached to every node, keyed by task id"""
        nodes = []
        for node in self.nodes:
            if node.task.id not in models:
                raise ConfigError(f"missing model for tree node {node.node_id} ({node.task.id})")
            nodes.append(replace(node, model=models[node.task.id]))
        return replace(self, nodes=nodes)

    def tasks(self) -> List[BinaryTask]:
        return [node.task for node in self.nodes]


def build_tree(classes: Sequence[int], policy: Union[PartitionPolicy, str] = PartitionPolicy.BALANCED,
               seed: Optional[int] = None) -> ClassTree:
    """Recursively split the class list: first ceil(n/2) left, remainder right.

    The random policy shuffles the list with `seed` first, then splits the
    same way, so depth stays ceil(log2 K) under both policies.
    """
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise UsageError(f"duplicate classes in {classes}")
    if len(classes) < 2:
        raise UsageError(f"a tree needs at least 2 classes, got {classes}")
    policy = PartitionPolicy(policy)
    order = list(classes)
    if policy is PartitionPolicy.RANDOM:
        if seed is None:
            raise UsageError("random partition policy needs a seed")
        order = [int(c) for c in np.random.default_rng(seed).permutation(order)]

    nodes: List[Optional[TreeNode]] = []

    def split(members: List[int]) -> ChildRef:
        if len(members) == 1:
            return ("leaf", members[0])
        index = len(nodes)
        nodes.append(None)
        half = (len(members) + 1) // 2
        left, right = members[:half], members[half:]
        task = BinaryTask(_dt_task_id(left, right), frozenset(left), frozenset(right))
        nodes[index] = TreeNode(f"n{index}", task, split(left), split(right))
        return ("node", index)

    split(order)
    tree = ClassTree(nodes, tuple(classes), policy.value, seed)
    tree.validate()
    return tree


# ========================================
# PREDICTORS
# ========================================

def inference_cost(strategy: Union[Strategy, str], K: int,
                   policy: Union[PartitionPolicy, str] = PartitionPolicy.BALANCED) -> CostLedger:
    """Closed-form model count and worst-case evaluations per prediction"""
    _check_k(K)
    try:
        strategy = Strategy(strategy)
    except ValueError:
        raise UsageError(f"unknown strategy '{strategy}'")
    try:
        PartitionPolicy(policy)
    except ValueError:
        raise UsageError(f"unknown partition policy '{policy}'")
    depth = ceil_log2(K)
    counts = {
        Strategy.OVO: (K * (K - 1) // 2, K * (K - 1) // 2),
        Strategy.OVR: (K, K),
        Strategy.DT: (K - 1, depth),
        Strategy.DT_ROOT_ENSEMBLE: (K - 1 + ENSEMBLE_SIZE - 1, depth + ENSEMBLE_SIZE - 1),
        Strategy.DT_TREE_ENSEMBLE: (ENSEMBLE_SIZE * (K - 1), ENSEMBLE_SIZE * depth),
    }
    models_total, worst = counts[strategy]
    return CostLedger(strategy.value, K, models_total, worst)


def _score_one(model: Scorer, x) -> float:
    return float(np.asarray(model.score(np.asarray(x, dtype=np.float64))).reshape(-1)[0])


def _score_columns(models: Sequence[Scorer], X: np.ndarray, workers: int) -> np.ndarray:
    if workers > 1 and len(models) > 1:
        columns = Parallel(n_jobs=workers, prefer="threads")(delayed(m.score)(X) for m in models)
    else:
        columns = [m.score(X) for m in models]
    return np.column_stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in columns])


class OvoPredictor:
    """Pairwise majority vote; score < 0.5 votes k, otherwise k'"""

    strategy = Strategy.OVO

    def __init__(self, K: int, models: Dict[Tuple[int, int], Scorer], workers: int = 1):
        _check_k(K)
        self.K = K
        self.pairs = [(k, k2) for k in range(K) for k2 in range(k + 1, K)]
        for pair in self.pairs:
            if pair not in models:
                raise ConfigError(f"missing OvO model for pair {pair}")
        self.models = models
        self.workers = workers
        self.worst_case = inference_cost(Strategy.OVO, K)

    def decide(self, scores: Dict[Tuple[int, int], float]) -> int:
        votes = np.zeros(self.K, dtype=np.int64)
        for (k, k2) in self.pairs:
            votes[k if scores[(k, k2)] < THRESHOLD else k2] += 1
        return int(np.argmax(votes))  # first maximum is the smallest label

    def predict(self, x) -> Tuple[int, CostLedger]:
        scores = {pair: _score_one(self.models[pair], x) for pair in self.pairs}
        return self.decide(scores), replace(self.worst_case, observed_evals=len(self.pairs))

    def predict_many(self, X) -> Tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        table = _score_columns([self.models[p] for p in self.pairs], X, self.workers)
        votes = np.zeros((X.shape[0], self.K), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for column, (k, k2) in enumerate(self.pairs):
            winner = np.where(table[:, column] < THRESHOLD, k, k2)
            np.add.at(votes, (rows, winner), 1)
        return np.argmax(votes, axis=1), np.full(X.shape[0], len(self.pairs))


class OvrPredictor:
    """Maximal score wins; exact ties go to the smallest label"""

    strategy = Strategy.OVR

    def __init__(self, K: int, models: Dict[int, Scorer], workers: int = 1):
        _check_k(K)
        self.K = K
        for k in range(K):
            if k not in models:
                raise ConfigError(f"missing OvR model for class {k}")
        self.models = models
        self.workers = workers
        self.worst_case = inference_cost(Strategy.OVR, K)

    def predict(self, x) -> Tuple[int, CostLedger]:
        scores = np.array([_score_one(self.models[k], x) for k in range(self.K)])
        return int(np.argmax(scores)), replace(self.worst_case, observed_evals=self.K)

    def predict_many(self, X) -> Tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        table = _score_columns([self.models[k] for k in range(self.K)], X, self.workers)
        return np.argmax(table, axis=1), np.full(X.shape[0], self.K)


class TreePredictor:
    """Root-to-leaf descent: score < 0.5 goes left, otherwise right"""

    strategy = Strategy.DT

    def __init__(self, tree: ClassTree):
        tree.validate()
        for node in tree.nodes:
            if node.model is None:
                raise ConfigError(f"tree node {node.node_id} ({node.task.id}) has no model")
        self.tree = tree
        self.K = len(tree.classes)
        self.worst_case = inference_cost(Strategy.DT, self.K, tree.policy)

    def _root_goes_right(self, x) -> Tuple[bool, int]:
        root = self.tree.nodes[self.tree.root]
        return _score_one(root.model, x) >= THRESHOLD, 1

    def predict(self, x) -> Tuple[int, CostLedger]:
        goes_right, evals = self._root_goes_right(x)
        root = self.tree.nodes[self.tree.root]
        ref = root.right if goes_right else root.left
        while ref[0] == "node":
            node = self.tree.nodes[ref[1]]
            ref = node.right if _score_one(node.model, x) >= THRESHOLD else node.left
            evals += 1
        return ref[1], replace(self.worst_case, observed_evals=evals)

    def _root_split(self, X: np.ndarray) -> Tuple[np.ndarray, int]:
        root = self.tree.nodes[self.tree.root]
        return np.asarray(root.model.score(X)).reshape(-1) >= THRESHOLD, 1

    def predict_many(self, X) -> Tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        labels = np.full(X.shape[0], -1, dtype=np.int64)
        evals = np.zeros(X.shape[0], dtype=np.int64)

        def route(ref: ChildRef, index: np.ndarray) -> None:
            if index.size == 0:
                return
            if ref[0] == "leaf":
                labels[index] = ref[1]
                return
            node = self.tree.nodes[ref[1]]
            right = np.asarray(node.model.score(X[index])).reshape(-1) >= THRESHOLD
            evals[index] += 1
            route(node.left, index[~right])
            route(node.right, index[right])

        everything = np.arange(X.shape[0])
        right, root_evals = self._root_split(X)
        evals += root_evals
        root = self.tree.nodes[self.tree.root]
        route(root.left, everything[~right])
        route(root.right, everything[right])
        return labels, evals


class RootEnsemblePredictor(TreePredictor):
    """Tree descent whose root direction is the majority of three root models"""

    strategy = Strategy.DT_ROOT_ENSEMBLE

    def __init__(self, tree: ClassTree, root_models: Sequence[Scorer]):
        if len(root_models) != ENSEMBLE_SIZE:
            raise UsageError(f"root ensemble needs exactly {ENSEMBLE_SIZE} models, got {len(root_models)}")
        root = tree.nodes[tree.root]
        if root.model is None:
            # the root slot only has to pass TreePredictor validation
            nodes = list(tree.nodes)
            nodes[tree.root] = replace(root, model=root_models[0])
            tree = replace(tree, nodes=nodes)
        super().__init__(tree)
        self.root_models = list(root_models)
        self.worst_case = inference_cost(Strategy.DT_ROOT_ENSEMBLE, self.K, tree.policy)

    def _root_goes_right(self, x) -> Tuple[bool, int]:
        votes = sum(_score_one(m, x) >= THRESHOLD for m in self.root_models)
        return votes * 2 > ENSEMBLE_SIZE, ENSEMBLE_SIZE

    def _root_split(self, X: np.ndarray) -> Tuple[np.ndarray, int]:
        votes = sum((np.asarray(m.score(X)).reshape(-1) >= THRESHOLD).astype(np.int64)
                    for m in self.root_models)
        return votes * 2 > ENSEMBLE_SIZE, ENSEMBLE_SIZE


def plurality(labels: Sequence[int]) -> int:
    """Most frequent label; without a repeated label the first run wins"""
    counts: Dict[int, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    best = max(counts.values())
    if best < 2:
        return labels[0]
    return next(label for label in labels if counts[label] == best)


class TreeEnsemblePredictor:
    """Three independently built and trained trees, plurality over their leaves"""

    strategy = Strategy.DT_TREE_ENSEMBLE

    def __init__(self, trees: Sequence[Union[ClassTree, TreePredictor]]):
        if len(trees) != ENSEMBLE_SIZE:
            raise UsageError(f"tree ensemble needs exactly {ENSEMBLE_SIZE} trees, got {len(trees)}")
        self.members = [t if isinstance(t, TreePredictor) else TreePredictor(t) for t in trees]
        class_sets = {frozenset(m.tree.classes) for m in self.members}
        if len(class_sets) != 1:
            raise UsageError(f"trees disagree on the class set: {[sorted(s) for s in class_sets]}")
        self.K = self.members[0].K
        self.worst_case = inference_cost(Strategy.DT_TREE_ENSEMBLE, self.K, PartitionPolicy.RANDOM)

    def predict(self, x) -> Tuple[int, CostLedger]:
        results = [m.predict(x) for m in self.members]
        label = plurality([label for label, _ in results])
        evals = sum(ledger.observed_evals for _, ledger in results)
        return label, replace(self.worst_case, observed_evals=evals)

    def predict_many(self, X) -> Tuple[np.ndarray, np.ndarray]:
        outputs = [m.predict_many(X) for m in self.members]
        stacked = np.column_stack([labels for labels, _ in outputs])
        labels = np.array([plurality(row.tolist()) for row in stacked], dtype=np.int64)
        return labels, sum(evals for _, evals in outputs)


Predictor = Union[OvoPredictor, OvrPredictor, TreePredictor, RootEnsemblePredictor, TreeEnsemblePredictor]


def predict_ovo(models: Dict[Tuple[int, int], Scorer], x, K: Optional[int] = None) -> Tuple[int, CostLedger]:
    K = K or max(k2 for _, k2 in models) + 1
    return OvoPredictor(K, models).predict(x)


def predict_ovr(models: Dict[int, Scorer], x, K: Optional[int] = None) -> Tuple[int, CostLedger]:
    return OvrPredictor(K or len(models), models).predict(x)


def predict_tree(tree: ClassTree, x) -> Tuple[int, CostLedger]:
    return TreePredictor(tree).predict(x)


def predict_root_ensemble(tree: ClassTree, root_models: Sequence[Scorer], x) -> Tuple[int, CostLedger]:
    return RootEnsemblePredictor(tree, root_models).predict(x)


def predict_tree_ensemble(trees: Sequence[ClassTree], x) -> Tuple[int, CostLedger]:
    return TreeEnsemblePredictor(trees).predict(x)


# ========================================
# MODEL PLANS AND MANIFEST
# ========================================

@dataclass(frozen=True)
class ModelSlot:
    """One model a strategy needs: manifest key, its task and a seed replicate"""
    key: str
    task: BinaryTask
    replicate: int = 0


def _tree_for(strategy: Strategy, K: int, policy: PartitionPolicy,
              partition_seeds: Sequence[int], index: int = 0) -> ClassTree:
    if strategy is Strategy.DT_TREE_ENSEMBLE:
        return build_tree(range(K), PartitionPolicy.RANDOM, partition_seeds[index])
    seed = partition_seeds[0] if policy is PartitionPolicy.RANDOM else None
    return build_tree(range(K), policy, seed)


def plan_models(strategy: Union[Strategy, str], K: int,
                policy: Union[PartitionPolicy, str] = PartitionPolicy.BALANCED,
                partition_seeds: Sequence[int] = (0, 1, 2)) -> List[ModelSlot]:
    """Ordered list of models a strategy must train"""
    strategy = Strategy(strategy)
    policy = PartitionPolicy(policy)
    if strategy is Strategy.OVO:
        return [ModelSlot(t.id, t) for t in build_ovo_tasks(K)]
    if strategy is Strategy.OVR:
        return [ModelSlot(t.id, t) for t in build_ovr_tasks(K)]
    if strategy is Strategy.DT_TREE_ENSEMBLE:
        if len(partition_seeds) < ENSEMBLE_SIZE:
            raise ConfigError(f"tree ensemble needs {ENSEMBLE_SIZE} partition seeds, got {list(partition_seeds)}")
        return [ModelSlot(f"t{i}/{task.id}", task)
                for i in range(ENSEMBLE_SIZE)
                for task in _tree_for(strategy, K, policy, partition_seeds, i).tasks()]
    tree = _tree_for(strategy, K, policy, partition_seeds)
    slots = [ModelSlot(task.id, task) for task in tree.tasks()]
    if strategy is Strategy.DT_ROOT_ENSEMBLE:
        root = tree.nodes[tree.root].task
        slots = [ModelSlot(f"{root.id}#r{r}", root, r) for r in range(ENSEMBLE_SIZE)] + slots[1:]
    return slots


def expected_model_keys(strategy: Union[Strategy, str], K: int,
                        policy: Union[PartitionPolicy, str] = PartitionPolicy.BALANCED,
                        partition_seeds: Sequence[int] = (0, 1, 2)) -> List[str]:
    return [slot.key for slot in plan_models(strategy, K, policy, partition_seeds)]


def build_predictor(strategy: Union[Strategy, str], K: int, models: Dict[str, Scorer],
                    policy: Union[PartitionPolicy, str] = PartitionPolicy.BALANCED,
                    partition_seeds: Sequence[int] = (0, 1, 2), workers: int = 1) -> Predictor:
    """Wire trained models (keyed by plan_models keys) into a predictor"""
    strategy = Strategy(strategy)
    policy = PartitionPolicy(policy)
    for key in expected_model_keys(strategy, K, policy, partition_seeds):
        if key not in models:
            raise ConfigError(f"missing model for {key}")
    if strategy is Strategy.OVO:
        return OvoPredictor(K, {(k, k2): models[f"ovo-{k}-{k2}"]
                                for k in range(K) for k2 in range(k + 1, K)}, workers)
    if strategy is Strategy.OVR:
        return OvrPredictor(K, {k: models[f"ovr-{k}"] for k in range(K)}, workers)
    if strategy is Strategy.DT_TREE_ENSEMBLE:
        trees = []
        for i in range(ENSEMBLE_SIZE):
            tree = _tree_for(strategy, K, policy, partition_seeds, i)
            trees.append(tree.with_models({t.id: models[f"t{i}/{t.id}"] for t in tree.tasks()}))
        return TreeEnsemblePredictor(trees)
    tree = _tree_for(strategy, K, policy, partition_seeds)
    if strategy is Strategy.DT_ROOT_ENSEMBLE:
        root = tree.nodes[tree.root].task
        root_models = [models[f"{root.id}#r{r}"] for r in range(ENSEMBLE_SIZE)]
        node_models = {t.id: models[t.id] for t in tree.tasks()[1:]}
        node_models[root.id] = root_models[0]
        return RootEnsemblePredictor(tree.with_models(node_models), root_models)
    return TreePredictor(tree.with_models(models))


@dataclass
class EnsembleManifest:
    """Text manifest mapping every model key of a predictor to its model file"""
    strategy: Strategy
    K: int
    policy: PartitionPolicy = PartitionPolicy.BALANCED
    partition_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    entries: Dict[str, str] = field(default_factory=dict)
    complete: bool = True

    def missing_keys(self) -> List[str]:
        expected = expected_model_keys(self.strategy, self.K, self.policy, self.partition_seeds)
        return [key for key in expected if key not in self.entries]

    def validate(self) -> None:
        if not self.complete:
            raise ConfigError("manifest is marked incomplete (interrupted run); retrain with --force")
        missing = self.missing_keys()
        if missing:
            raise ConfigError(f"manifest lacks models for {', '.join(missing)}")

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            MANIFEST_HEADER,
            f"strategy={self.strategy.value}",
            f"K={self.K}",
            f"policy={self.policy.value}",
            f"partition_seeds={','.join(map(str, self.partition_seeds))}",
            f"status={'complete' if self.complete else 'incomplete'}",
        ]
        lines += [f"model {key} {model_path}" for key, model_path in self.entries.items()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnsembleManifest":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"missing manifest: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ConfigError(f"{path}: not a {MANIFEST_HEADER} file")
        header: Dict[str, str] = {}
        entries: Dict[str, str] = {}
        for number, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("model "):
                parts = line.split(maxsplit=2)
                if len(parts) != 3:
                    raise ConfigError(f"{path}:{number}: malformed model line")
                entries[parts[1]] = parts[2]
            else:
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{number}: expected key=value")
                header[key] = value
        try:
            return cls(
                strategy=Strategy(header["strategy"]),
                K=int(header["K"]),
                policy=PartitionPolicy(header.get("policy", "balanced")),
                partition_seeds=[int(s) for s in header.get("partition_seeds", "0,1,2").split(",") if s],
                entries=entries,
                complete=header.get("status", "complete") == "complete",
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"{path}: bad manifest header: {e}")


def assemble_predictor(manifest: EnsembleManifest, base_dir: Union[str, Path],
                       workers: int = 1) -> Predictor:
    """Validate the manifest, load every model file and build the predictor"""
    manifest.validate()
    base_dir = Path(base_dir)
    models = {}
    for key, relative in manifest.entries.items():
        models[key] = load_model(base_dir / relative)
    logger.info(f"Loaded {len(models)} models for {manifest.strategy.value} K={manifest.K}")
    return build_predictor(manifest.strategy, manifest.K, models, manifest.policy,
                           manifest.partition_seeds, workers)


# Example usage
if __name__ == "__main__":
    for K in (2, 6, 10):
        costs = [inference_cost(s, K) for s in (Strategy.OVO, Strategy.OVR, Strategy.DT)]
        print(f"K={K}: " + ", ".join(f"{c.strategy} {c.models_total} models / {c.worst_case_evals} evals"
                                     for c in costs))
    tree = build_tree(range(6))
    for node in tree.nodes:
        print(f"{node.node_id}: {sorted(node.task.zero_classes)} | {sorted(node.task.one_classes)}")
