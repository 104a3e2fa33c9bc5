"""Interaction ingestion, 8:1:1 splitting, bipartite graph construction,
negative sampling, triplet batch streaming, and popularity counts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MDVTFEAT"


@dataclass
class InteractionSet:
    """Deduplicated implicit-feedback records over dense user/item indices.

    Split views share ``num_users``/``num_items`` and the id tables of the
    full set, so indices are comparable across train/val/test.
    """

    records: list[tuple[int, int]]
    num_users: int
    num_items: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    duplicates_dropped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def user_array(self) -> np.ndarray:
        return np.array([u for u, _ in self.records], dtype=np.int64)

    @cached_property
    def item_array(self) -> np.ndarray:
        return np.array([i for _, i in self.records], dtype=np.int64)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.item_ids)}

    def view(self, records: list[tuple[int, int]]) -> "InteractionSet":
        """A subset sharing this set's id space."""
        return InteractionSet(records, self.num_users, self.num_items,
                              self.user_ids, self.item_ids)

    def items_by_user(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in self.records:
            out[u].add(i)
        return out


@dataclass
class DatasetSplit:
    """Train/validation/test views plus the seed that produced them."""

    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    split_seed: int
    cold_users: tuple[int, ...] = ()

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items


@dataclass
class InteractionGraph:
    """Bipartite train graph over the union vertex set (users then items)."""

    num_users: int
    num_items: int
    user_items: list[np.ndarray]
    item_users: list[np.ndarray]
    degrees: np.ndarray
    edge_users: np.ndarray
    edge_items: np.ndarray
    isolated_items: np.ndarray
    _user_item_sets: list[set[int]] = field(repr=False, default_factory=list)

    @property
    def num_vertices(self) -> int:
        return self.num_users + self.num_items

    def has_edge(self, user: int, item: int) -> bool:
        return item in self._user_item_sets[user]

    def degree_of_user(self, user: int) -> int:
        return int(self.degrees[user])

    def degree_of_item(self, item: int) -> int:
        return int(self.degrees[self.num_users + item])


@dataclass
class ModalityBundle:
    """Ordered modality channels; "id" carries no feature matrix."""

    modalities: tuple[str, ...]
    features: dict[str, np.ndarray]
    num_items: int
    embed_dim: int | None = None

    def __post_init__(self) -> None:
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"duplicate modality names: {self.modalities}")
        if "id" not in self.modalities:
            raise ConfigError('modality set must contain "id"')
        if "id" in self.features:
            raise ConfigError('"id" modality must not carry a feature matrix')
        for name in self.modalities:
            if name == "id":
                continue
            if name not in self.features:
                raise ConfigError(f"modality {name!r} declared without features")
            rows = self.features[name].shape[0]
            if rows != self.num_items:
                raise DataError(
                    f"feature matrix for {name!r} has {rows} rows, "
                    f"expected {self.num_items}")

    def feature_dims(self) -> dict[str, int]:
        return {m: int(f.shape[1]) for m, f in self.features.items()}


@dataclass
class PopularityTable:
    """Per-item / per-user train interaction counts."""

    item_train_count: np.ndarray
    user_train_count: np.ndarray


@dataclass(frozen=True)
class TripletBatch:
    """(user, observed item, sampled negative item) index triples."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def load_interactions(path: str | Path) -> InteractionSet:
    """Parse a ``user<TAB>item`` text file into a dense-indexed set.

    Raw ids are remapped in first-appearance order. Duplicate pairs are
    dropped and counted. Lines starting with ``#`` and blank lines are
    ignored.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    records: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    duplicates = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(
                    f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = user_index.setdefault(parts[0], len(user_index))
            i = item_index.setdefault(parts[1], len(item_index))
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            records.append((u, i))
    if not records:
        raise DataError(f"{path}: no interaction records")
    if duplicates:
        log.info("dropped %d duplicate interactions from %s", duplicates, path)
    return InteractionSet(
        records=records,
        num_users=len(user_index),
        num_items=len(item_index),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
        duplicates_dropped=duplicates,
    )


def split_dataset(interactions: InteractionSet, seed: int) -> DatasetSplit:
    """Shuffle records by seed and slice test/val/train as round(0.1*N) /
    round(0.1*N) / remainder.

    Users that end up with zero train records are kept in their val/test
    views but reported as cold; they are excluded from training and from
    metric averaging downstream.
    """
    n = len(interactions)
    if n < 10:
        raise DataError(f"need at least 10 interactions to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_hold = int(round(0.1 * n))
    records = interactions.records
    test = [records[k] for k in perm[:n_hold]]
    val = [records[k] for k in perm[n_hold:2 * n_hold]]
    train = [records[k] for k in perm[2 * n_hold:]]
    trained = {u for u, _ in train}
    cold = tuple(sorted(set(range(interactions.num_users)) - trained))
    if cold:
        log.warning("%d users have no train records after splitting", len(cold))
    return DatasetSplit(
        train=interactions.view(train),
        validation=interactions.view(val),
        test=interactions.view(test),
        split_seed=seed,
        cold_users=cold,
    )


def build_graph(train: InteractionSet) -> InteractionGraph:
    """Bidirectional bipartite graph of the train records, with degrees."""
    if len(train) == 0:
        raise DataError("cannot build a graph from an empty train set")
    num_users, num_items = train.num_users, train.num_items
    by_user: list[list[int]] = [[] for _ in range(num_users)]
    by_item: list[list[int]] = [[] for _ in range(num_items)]
    for u, i in train.records:
        by_user[u].append(i)
        by_item[i].append(u)
    user_items = [np.array(sorted(v), dtype=np.int64) for v in by_user]
    item_users = [np.array(sorted(v), dtype=np.int64) for v in by_item]
    degrees = np.concatenate([
        np.array([len(v) for v in user_items], dtype=np.int64),
        np.array([len(v) for v in item_users], dtype=np.int64),
    ])
    isolated = np.flatnonzero(degrees[num_users:] == 0)
    if isolated.size:
        log.warning("%d items have no train edge", isolated.size)
    return InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        user_items=user_items,
        item_users=item_users,
        degrees=degrees,
        edge_users=train.user_array.copy(),
        edge_items=train.item_array.copy(),
        isolated_items=isolated,
        _user_item_sets=[set(v) for v in by_user],
    )


def sample_negative(user: int, graph: InteractionGraph,
                    rng: np.random.Generator) -> int:
    """Uniformly sample an item the user has not interacted with.

    Rejection sampling: one rng draw per attempt, repeated until the draw
    is a non-interacted item.
    """
    if len(graph._user_item_sets[user]) >= graph.num_items:
        raise DataError(f"user {user} interacted with every item; "
                        "no negative candidates")
    while True:
        j = int(rng.integers(graph.num_items))
        if not graph.has_edge(user, j):
            return j


def make_batches(train: InteractionSet, graph: InteractionGraph,
                 batch_size: int, rng: np.random.Generator,
                 negative_rng: np.random.Generator | None = None):
    """One epoch of triplet batches: shuffled positives in ceil(N/B) slices,
    each positive paired with a freshly sampled negative.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    neg_rng = negative_rng if negative_rng is not None else rng
    n = len(train)
    perm = rng.permutation(n)
    users = train.user_array[perm]
    items = train.item_array[perm]
    for start in range(0, n, batch_size):
        u = users[start:start + batch_size]
        p = items[start:start + batch_size]
        neg = np.array([sample_negative(int(x), graph, neg_rng) for x in u],
                       dtype=np.int64)
        yield TripletBatch(users=u, pos_items=p, neg_items=neg)


def compute_popularity(train: InteractionSet) -> PopularityTable:
    """Train interaction counts per item and per user."""
    item_counts = np.bincount(train.item_array, minlength=train.num_items)
    user_counts = np.bincount(train.user_array, minlength=train.num_users)
    return PopularityTable(item_train_count=item_counts.astype(np.int64),
                           user_train_count=user_counts.astype(np.int64))


# ---------------------------------------------------------------------------
# Feature file format (bit-exact):
#   bytes 0-7   magic b"MDVTFEAT"
#   bytes 8-11  row count, unsigned 32-bit little-endian
#   bytes 12-15 column count, unsigned 32-bit little-endian
#   then rows*cols IEEE-754 float32 little-endian, row-major
# Row order follows an optional sidecar "<path>.ids" listing raw item ids
# one per line; rows are remapped to dense item order at load. Without a
# sidecar, rows must already be in dense order.
# ---------------------------------------------------------------------------

def write_modality_features(path: str | Path, matrix: np.ndarray,
                            item_ids: list[str] | None = None) -> None:
    """Write a feature matrix in the binary format above, plus an optional
    raw-item-id sidecar."""
    path = Path(path)
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {mat.shape}")
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())
    if item_ids is not None:
        if len(item_ids) != mat.shape[0]:
            raise DataError("sidecar id count does not match feature rows")
        Path(str(path) + ".ids").write_text(
            "".join(f"{raw}\n" for raw in item_ids), encoding="utf-8")


def load_modality_features(path: str | Path, modality: str, num_items: int,
                           item_index: dict[str, int] | None = None
                           ) -> np.ndarray:
    """Read and validate a feature matrix for ``modality``.

    Returns a float32 array with exactly ``num_items`` rows in dense item
    order. Raises DataError on magic mismatch, row-count mismatch, or any
    non-finite value.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic for modality {modality!r}")
    rows, cols = struct.unpack("<II", blob[8:16])
    expected = 16 + 4 * rows * cols
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes for "
                        f"{rows}x{cols}, got {len(blob)}")
    mat = np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols)
    bad = np.argwhere(~np.isfinite(mat))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"{path}: non-finite value at ({r}, {c}) "
                        f"in modality {modality!r}")
    sidecar = Path(str(path) + ".ids")
    if sidecar.exists():
        raw_ids = [ln for ln in sidecar.read_text(encoding="utf-8").splitlines()
                   if ln]
        if len(raw_ids) != rows:
            raise DataError(f"{sidecar}: {len(raw_ids)} ids for {rows} rows")
        if item_index is None:
            raise DataError(f"{path}: sidecar present but no item id map given")
        dense = np.full((num_items, cols), np.nan, dtype=np.float32)
        for row, raw in enumerate(raw_ids):
            if raw not in item_index:
                raise DataError(f"{sidecar}: unknown item id {raw!r}")
            dense[item_index[raw]] = mat[row]
        missing = np.flatnonzero(np.isnan(dense[:, 0]))
        if missing.size:
            raise DataError(f"{path}: no feature row for {missing.size} items "
                            f"(first dense index {int(missing[0])})")
        return dense
    if rows != num_items:
        raise DataError(f"{path}: {rows} feature rows but {num_items} items")
    return mat.copy()


# ---------------------------------------------------------------------------
# Prepared dataset bundle on disk: id tables, split TSVs, dense-order
# feature files, and a stats.json whose bytes fingerprint the bundle.
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    """Everything a training run consumes."""

    split: DatasetSplit
    graph: InteractionGraph
    modalities: ModalityBundle
    popularity: PopularityTable
    stats: dict

    @property
    def num_users(self) -> int:
        return self.split.num_users

    @property
    def num_items(self) -> int:
        return self.split.num_items


def _bundle_stats(split: DatasetSplit, modalities: ModalityBundle,
                  duplicates_dropped: int) -> dict:
    full = len(split.train) + len(split.validation) + len(split.test)
    nu, ni = split.num_users, split.num_items
    return {
        "format_version": 1,
        "num_users": nu,
        "num_items": ni,
        "num_interactions": full,
        "sparsity": 1.0 - full / (nu * ni),
        "duplicates_dropped": duplicates_dropped,
        "split_seed": split.split_seed,
        "split_sizes": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        },
        "cold_users": len(split.cold_users),
        "modalities": {m: (modalities.feature_dims().get(m, 0))
                       for m in modalities.modalities},
    }


def _write_tsv(path: Path, records: list[tuple[int, int]]) -> None:
    path.write_text("".join(f"{u}\t{i}\n" for u, i in records),
                    encoding="utf-8")


def _read_tsv(path: Path) -> list[tuple[int, int]]:
    out = []
    for ln in path.read_text(encoding="utf-8").splitlines():
        if not ln:
            continue
        u, i = ln.split("\t")
        out.append((int(u), int(i)))
    return out


def save_bundle(out_dir: str | Path, split: DatasetSplit,
                modalities: ModalityBundle, duplicates_dropped: int = 0
                ) -> dict:
    """Write a prepared bundle; rerunning with identical inputs is
    byte-identical (no timestamps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = split.train
    (out / "users.txt").write_text(
        "".join(f"{u}\n" for u in full.user_ids), encoding="utf-8")
    (out / "items.txt").write_text(
        "".join(f"{i}\n" for i in full.item_ids), encoding="utf-8")
    _write_tsv(out / "train.tsv", split.train.records)
    _write_tsv(out / "val.tsv", split.validation.records)
    _write_tsv(out / "test.tsv", split.test.records)
    feat_dir = out / "features"
    if modalities.features:
        feat_dir.mkdir(exist_ok=True)
    for name, mat in modalities.features.items():
        write_modality_features(feat_dir / f"{name}.feat", mat)
    stats = _bundle_stats(split, modalities, duplicates_dropped)
    (out / "stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return stats


def load_bundle(bundle_dir: str | Path) -> DatasetBundle:
    """Load a bundle written by :func:`save_bundle`."""
    root = Path(bundle_dir)
    stats_path = root / "stats.json"
    if not stats_path.exists():
        raise DataError(f"not a dataset bundle (missing stats.json): {root}")
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    user_ids = tuple(ln for ln in (root / "users.txt")
                     .read_text(encoding="utf-8").splitlines() if ln)
    item_ids = tuple(ln for ln in (root / "items.txt")
                     .read_text(encoding="utf-8").splitlines() if ln)
    nu, ni = len(user_ids), len(item_ids)
    if nu != stats["num_users"] or ni != stats["num_items"]:
        raise DataError(f"{root}: id tables disagree with stats.json")
    base = InteractionSet([], nu, ni, user_ids, item_ids)
    train = base.view(_read_tsv(root / "train.tsv"))
    val = base.view(_read_tsv(root / "val.tsv"))
    test = base.view(_read_tsv(root / "test.tsv"))
    trained = {u for u, _ in train.records}
    cold = tuple(sorted(set(range(nu)) - trained))
    split = DatasetSplit(train, val, test, split_seed=stats["split_seed"],
                         cold_users=cold)
    features = {}
    names = ["id"] + sorted(m for m in stats["modalities"] if m != "id")
    for name in names:
        if name == "id":
            continue
        features[name] = load_modality_features(
            root / "features" / f"{name}.feat", name, ni)
    modalities = ModalityBundle(tuple(names), features, num_items=ni)
    return DatasetBundle(
        split=split,
        graph=build_graph(train),
        modalities=modalities,
        popularity=compute_popularity(train),
        stats=stats,
    )


def bundle_fingerprint(bundle_dir: str | Path) -> str:
    """Identity hash of a bundle, from its stats.json bytes."""
    stats_path = Path(bundle_dir) / "stats.json"
    if not stats_path.exists():
        raise DataError(f"not a dataset bundle: {bundle_dir}")
    return hashlib.sha256(stats_path.read_bytes()).hexdigest()
