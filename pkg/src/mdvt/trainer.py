"""Training orchestration: warm-up and joint epochs, per-epoch virtual
triplet refresh, validation-based early stopping, and the three warm-up
strategy searches.

Determinism: one master seed derives independent substreams for table
initialization, batch shuffling, and negative sampling. Virtual-triplet
construction draws no randomness, so candidate runs of a strategy search
share the same stream consumption and differ only in their trigger epoch,
and a run with the virtual loss weighted to zero is bit-identical to a
run with it disabled.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone, evaluator, objective, triplet_forge, warmup
from .dataset import DatasetBundle, FEATURE_MAGIC, make_batches
from .errors import CheckpointError, ConfigError, MdvtError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MDVTCKPT"

LAMBDA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
N_GRID = (1, 2, 4, 8)
G_GRID = (0.1, 0.2, 0.3, 0.4)
S_GRID = (1, 2, 3, 4, 5)
THRESHOLD_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
N_FLOOR_GRID = (0, 1, 2)


@dataclass
class RunConfig:
    """Every knob of a single training run (and of strategy searches)."""

    embed_dim: int = 64
    num_layers: int = 1
    lam: float = 0.2
    top_n: int = 2
    batch_size: int = 2048
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    modality_mask: tuple[str, ...] | None = None
    mdvt_enabled: bool = True
    constructor: str = "topn"
    sim_threshold: float | None = None
    n_floor: int | None = None
    n_cap: int | None = None
    wo_aggr: bool = False
    wo_scale: bool = False
    norm: str = "dual"
    readout: str = "sum"
    score_mode: str = "per_modality"
    include_seen: bool = False
    refresh_chunk: int = 64
    weight_decay: float = 0.0
    per_distinct_user: bool = False
    loss_reporting: str = "mean"
    strategy: str = "hybrid"
    static_set: tuple[int, ...] = warmup.DEFAULT_STATIC_SET
    g: float = warmup.DEFAULT_G
    s: int = warmup.DEFAULT_S
    eval_ks: tuple[int, ...] = (5, 10)
    warmup_candidate: int | None = None

    def validate(self) -> list[str]:
        """Raise ConfigError listing every invalid field; return warnings
        for values outside the usual search grids."""
        problems = []
        if self.embed_dim < 1:
            problems.append(f"embed_dim must be >= 1 (got {self.embed_dim})")
        if self.num_layers < 0:
            problems.append(f"num_layers must be >= 0 (got {self.num_layers})")
        if not 0.0 <= self.lam <= 1.0:
            problems.append(f"lam must lie in [0, 1] (got {self.lam})")
        if self.top_n < 1:
            problems.append(f"top_n must be >= 1 (got {self.top_n})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive "
                            f"(got {self.learning_rate})")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1 (got {self.max_epochs})")
        if self.patience < 1:
            problems.append(f"patience must be >= 1 (got {self.patience})")
        if self.constructor not in triplet_forge.CONSTRUCTOR_TAGS:
            problems.append(f"unknown constructor {self.constructor!r}")
        if self.norm not in backbone.NORM_MODES:
            problems.append(f"unknown norm {self.norm!r}")
        if self.readout not in backbone.READOUT_MODES:
            problems.append(f"unknown readout {self.readout!r}")
        if self.score_mode not in backbone.SCORE_MODES:
            problems.append(f"unknown score_mode {self.score_mode!r}")
        if self.loss_reporting not in ("mean", "sum"):
            problems.append(f"unknown loss_reporting {self.loss_reporting!r}")
        if self.strategy not in warmup.STRATEGIES:
            problems.append(f"unknown strategy {self.strategy!r}")
        if self.strategy == "static" and not self.static_set:
            problems.append("static strategy requires a non-empty static_set")
        if self.strategy in ("dynamic", "hybrid") and not 0.0 < self.g < 1.0:
            problems.append(f"g must lie in (0, 1) (got {self.g})")
        if self.strategy == "hybrid" and self.s < 1:
            problems.append(f"s must be >= 1 (got {self.s})")
        if self.constructor in ("threshold", "threshold_topn", "interval"):
            if self.sim_threshold is None or not 0 < self.sim_threshold < 1:
                problems.append("sim_threshold must lie in (0, 1) for "
                                f"constructor {self.constructor!r}")
        if self.constructor == "interval" and self.n_floor is None:
            problems.append("interval constructor requires n_floor")
        if 10 not in self.eval_ks:
            problems.append("eval_ks must include 10 (early-stopping metric)")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

        warnings = []
        if self.mdvt_enabled:
            if self.lam not in LAMBDA_GRID and self.lam != 0.0:
                warnings.append(f"lam={self.lam} outside usual grid "
                                f"{LAMBDA_GRID}")
            if self.top_n not in N_GRID:
                warnings.append(f"top_n={self.top_n} outside usual grid "
                                f"{N_GRID}")
            if self.strategy in ("dynamic", "hybrid") and self.g not in G_GRID:
                warnings.append(f"g={self.g} outside usual grid {G_GRID}")
            if self.strategy == "hybrid" and self.s not in S_GRID:
                warnings.append(f"s={self.s} outside usual grid {S_GRID}")
            if (self.sim_threshold is not None
                    and round(self.sim_threshold, 6) not in THRESHOLD_GRID):
                warnings.append(f"sim_threshold={self.sim_threshold} outside "
                                f"usual grid {THRESHOLD_GRID}")
            if self.n_floor is not None and self.n_floor not in N_FLOOR_GRID:
                warnings.append(f"n_floor={self.n_floor} outside usual grid "
                                f"{N_FLOOR_GRID}")
        return warnings

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        for key in ("modality_mask", "static_set", "eval_ks"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def selection_params(self) -> triplet_forge.SelectionParams:
        return triplet_forge.SelectionParams(
            constructor=self.constructor,
            n=self.top_n,
            threshold=self.sim_threshold,
            n_floor=self.n_floor,
            n_cap=self.n_cap,
            include_seen=self.include_seen,
        )

    def build_plan(self) -> warmup.WarmupPlan:
        plan = warmup.WarmupPlan(strategy=self.strategy,
                                 static_set=self.static_set,
                                 g=self.g, s=self.s)
        if self.warmup_candidate is not None:
            plan.resolved_trigger = self.warmup_candidate
        plan.validate()
        return plan

    @property
    def mdvt_active(self) -> bool:
        # lam == 0 zeroes the virtual loss exactly, so the whole virtual
        # machinery is inert; skipping it keeps such runs bit-identical to
        # disabled ones.
        return self.mdvt_enabled and self.lam > 0.0


@dataclass
class TrainHistory:
    """Per-epoch losses and validation metrics of one run (epochs are
    0-indexed)."""

    l_bpr: list[float] = field(default_factory=list)
    l_vbpr: list[float | None] = field(default_factory=list)
    l_total: list[float] = field(default_factory=list)
    val_recall: dict[int, list[float]] = field(default_factory=dict)
    val_ndcg: dict[int, list[float]] = field(default_factory=dict)
    trigger_epoch: int | None = None
    best_epoch: int = 0
    stopped_epoch: int = 0

    def append_losses(self, report: objective.LossReport) -> None:
        self.l_bpr.append(report.l_bpr)
        self.l_vbpr.append(report.l_vbpr)
        self.l_total.append(report.l_total)

    def append_validation(self, metrics: evaluator.MetricsReport) -> None:
        for k, value in metrics.recall.items():
            self.val_recall.setdefault(k, []).append(value)
        for k, value in metrics.ndcg.items():
            self.val_ndcg.setdefault(k, []).append(value)

    def best_val_ndcg10(self) -> float:
        return self.val_ndcg[10][self.best_epoch]

    def to_dict(self) -> dict:
        return {
            "l_bpr": self.l_bpr,
            "l_vbpr": self.l_vbpr,
            "l_total": self.l_total,
            "val_recall": {str(k): v for k, v in self.val_recall.items()},
            "val_ndcg": {str(k): v for k, v in self.val_ndcg.items()},
            "trigger_epoch": self.trigger_epoch,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


def _evaluation_sets(bundle: DatasetBundle, which: str
                     ) -> tuple[dict[int, set[int]], dict[int, set[int]]]:
    """(relevant, masked) item sets per user for validation or test.

    Validation masks the train items; test masks train plus validation.
    """
    train_sets = bundle.split.train.items_by_user()
    if which == "validation":
        target = bundle.split.validation
        masked = {u: train_sets[u] for u in range(bundle.num_users)}
    elif which == "test":
        target = bundle.split.test
        val_sets = bundle.split.validation.items_by_user()
        masked = {u: train_sets[u] | val_sets[u]
                  for u in range(bundle.num_users)}
    else:
        raise ConfigError(f"unknown evaluation split {which!r}")
    relevant: dict[int, set[int]] = {}
    for u, i in target.records:
        relevant.setdefault(u, set()).add(i)
    return relevant, masked


def evaluate_split(state: backbone.EmbeddingState, bundle: DatasetBundle,
                   config: RunConfig, which: str,
                   with_buckets: bool = False) -> evaluator.MetricsReport:
    """Rank the requested split with the current state.

    Users with no train record (cold users) are excluded from the
    averages, matching the evaluation protocol of the split design.
    """
    prop = backbone.Propagator(bundle.graph, config.norm)
    reps = backbone.forward_pass(state, prop, config.num_layers,
                                 _mask_for(state, config), config.readout)
    relevant, masked = _evaluation_sets(bundle, which)
    cold = set(bundle.split.cold_users)
    users = [u for u in sorted(relevant) if u not in cold]

    def score_rows(chunk: list[int]) -> np.ndarray:
        return backbone.score_matrix(reps, np.array(chunk, dtype=np.int64),
                                     config.score_mode)

    counts = bundle.popularity.user_train_count if with_buckets else None
    return evaluator.evaluate_rankings(score_rows, users, relevant, masked,
                                       tuple(config.eval_ks), counts)


def _mask_for(state: backbone.EmbeddingState,
              config: RunConfig) -> tuple[str, ...]:
    if config.modality_mask is None:
        return state.modalities
    return tuple(config.modality_mask)


def train_epoch(state: backbone.EmbeddingState,
                opt: objective.OptimizerState, prop: backbone.Propagator,
                bundle: DatasetBundle, config: RunConfig, epoch: int,
                virtual: triplet_forge.VirtualTripletSet | None,
                rng_shuffle: np.random.Generator,
                rng_negative: np.random.Generator) -> objective.LossReport:
    """One pass over the shuffled train triplets; virtual is None during
    warm-up."""
    mask = _mask_for(state, config)
    joint = virtual is not None
    sums = {"l_bpr": 0.0, "l_total": 0.0}
    vbpr_sum, vbpr_batches, n_batches = 0.0, 0, 0
    for batch in make_batches(bundle.split.train, bundle.graph,
                              config.batch_size, rng_shuffle, rng_negative):
        reps = backbone.forward_pass(state, prop, config.num_layers, mask,
                                     config.readout)
        report, grads = objective.backward(
            batch, virtual, reps, prop,
            lam=config.lam, joint=joint, num_layers=config.num_layers,
            wo_aggr=config.wo_aggr, wo_scale=config.wo_scale,
            score_mode=config.score_mode, readout_mode=config.readout,
            per_distinct_user=config.per_distinct_user)
        if not np.isfinite(report.l_total):
            raise MdvtError(
                f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                f"l_bpr={report.l_bpr}, l_vbpr={report.l_vbpr}")
        objective.adam_step(state, opt, grads)
        sums["l_bpr"] += report.l_bpr
        sums["l_total"] += report.l_total
        if report.l_vbpr is not None:
            vbpr_sum += report.l_vbpr
            vbpr_batches += 1
        n_batches += 1
    scale = len(bundle.split.train) if config.loss_reporting == "sum" else 1.0
    l_vbpr = (scale * vbpr_sum / vbpr_batches) if vbpr_batches else None
    return objective.LossReport(
        l_bpr=scale * sums["l_bpr"] / n_batches,
        l_vbpr=l_vbpr if joint else None,
        l_total=scale * sums["l_total"] / n_batches,
        epoch=epoch)


def train_run(bundle: DatasetBundle, config: RunConfig
              ) -> tuple[backbone.EmbeddingState, TrainHistory]:
    """Run one full training: warm-up epochs, joint epochs with a fresh
    virtual-triplet set each epoch, early stopping on validation NDCG@10,
    and best-epoch restoration."""
    config.validate()
    streams = np.random.SeedSequence(config.seed).spawn(3)
    init_seed = int(streams[0].generate_state(1)[0])
    rng_shuffle = np.random.default_rng(streams[1])
    rng_negative = np.random.default_rng(streams[2])

    state = backbone.init_embeddings(bundle.modalities, bundle.num_users,
                                     config.embed_dim, init_seed)
    mask = _mask_for(state, config)
    unknown = [m for m in mask if m not in state.modalities]
    if unknown:
        raise ConfigError(f"modality_mask names unknown modalities: {unknown}")
    prop = backbone.Propagator(bundle.graph, config.norm)
    opt = objective.OptimizerState.for_state(state, config.learning_rate,
                                             config.weight_decay)
    plan = config.build_plan()
    params = config.selection_params()
    seen = bundle.split.train.items_by_user()
    trainable = sorted({u for u, _ in bundle.split.train.records})

    history = TrainHistory()
    best_state = state.copy()
    best_ndcg: float | None = None
    epochs_since_best = 0
    for epoch in range(config.max_epochs):
        virtual = None
        if config.mdvt_active and warmup.is_joint_phase(plan, epoch,
                                                        history.l_total):
            if history.trigger_epoch is None:
                history.trigger_epoch = epoch
            reps = backbone.forward_pass(state, prop, config.num_layers,
                                         mask, config.readout)
            virtual = triplet_forge.refresh(
                reps, params, epoch, trainable, seen_items=seen,
                popularity=bundle.popularity, chunk=config.refresh_chunk)
        report = train_epoch(state, opt, prop, bundle, config, epoch,
                             virtual, rng_shuffle, rng_negative)
        history.append_losses(report)
        val = evaluate_split(state, bundle, config, "validation")
        history.append_validation(val)
        ndcg10 = val.ndcg[10]
        if best_ndcg is None or ndcg10 > best_ndcg:
            best_ndcg = ndcg10
            history.best_epoch = epoch
            best_state = state.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        history.stopped_epoch = epoch
        if epochs_since_best >= config.patience:
            break
    return best_state, history


@dataclass
class CandidateResult:
    """One strategy-search run, keyed by its warm-up candidate."""

    label: str
    candidate: int | None
    trigger_epoch: int | None
    val_ndcg10: float
    best_epoch: int
    stopped_epoch: int
    history: TrainHistory
    state: backbone.EmbeddingState

    def summary(self) -> dict:
        return {
            "label": self.label,
            "candidate": self.candidate,
            "trigger_epoch": self.trigger_epoch,
            "val_ndcg10": self.val_ndcg10,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


@dataclass
class SearchResult:
    """Winner of a warm-up strategy search plus the per-candidate table."""

    strategy: str
    best_config: RunConfig
    best_state: backbone.EmbeddingState
    best_history: TrainHistory
    candidates: list[dict]
    resolved_trigger: int | None
    dynamic_estimate: int | None = None


def _run_candidate(bundle: DatasetBundle, config: RunConfig, label: str,
                   candidate: int | None) -> CandidateResult:
    cfg = dataclasses.replace(config, warmup_candidate=candidate)
    state, history = train_run(bundle, cfg)
    return CandidateResult(
        label=label,
        candidate=candidate,
        trigger_epoch=history.trigger_epoch,
        val_ndcg10=history.best_val_ndcg10(),
        best_epoch=history.best_epoch,
        stopped_epoch=history.stopped_epoch,
        history=history,
        state=state,
    )


def run_strategy_search(bundle: DatasetBundle, config: RunConfig
                        ) -> SearchResult:
    """Resolve the warm-up trigger per the configured strategy.

    dynamic: one run. static: one run per candidate in the static set.
    hybrid: one dynamic probe, reused as the candidate equal to its own
    trigger, plus the remaining candidates in [estimate-s, estimate+s].
    The winner is the run with the highest validation NDCG@10 (ties go to
    the earlier candidate).
    """
    config.validate()
    if not config.mdvt_active:
        result = _run_candidate(bundle, config, "baseline", None)
        return SearchResult("disabled", config, result.state, result.history,
                            [result.summary()], None)

    results: list[CandidateResult] = []
    dynamic_estimate = None
    if config.strategy == "dynamic":
        results.append(_run_candidate(bundle, config, "dynamic", None))
        dynamic_estimate = results[0].trigger_epoch
    elif config.strategy == "static":
        for cand in warmup.static_candidates(config.static_set):
            results.append(_run_candidate(bundle, config, f"static:{cand}",
                                          cand))
    else:  # hybrid
        probe = _run_candidate(bundle, config, "dynamic_probe", None)
        dynamic_estimate = probe.trigger_epoch
        if dynamic_estimate is None:
            log.warning("dynamic probe never triggered; "
                        "keeping the probe run as the result")
            results.append(probe)
        else:
            probe.candidate = dynamic_estimate
            results.append(probe)
            for cand in warmup.hybrid_candidates(dynamic_estimate, config.s):
                if cand == dynamic_estimate:
                    continue
                results.append(_run_candidate(bundle, config,
                                              f"hybrid:{cand}", cand))

    ordered = sorted(results, key=lambda r: (r.candidate is None,
                                             r.candidate or 0))
    winner = ordered[0]
    for res in ordered[1:]:
        if res.val_ndcg10 > winner.val_ndcg10:
            winner = res
    best_config = dataclasses.replace(config,
                                      warmup_candidate=winner.candidate)
    return SearchResult(
        strategy=config.strategy,
        best_config=best_config,
        best_state=winner.state,
        best_history=winner.history,
        candidates=[r.summary() for r in results],
        resolved_trigger=winner.trigger_epoch,
        dynamic_estimate=dynamic_estimate,
    )


# ---------------------------------------------------------------------------
# Checkpoints: magic, config hash, config echo, bundle fingerprint, then
# each table named and stored as a feature-format record (float32).
# ---------------------------------------------------------------------------

def _pack_blob(blob: bytes) -> bytes:
    return struct.pack("<I", len(blob)) + blob


def _read_blob(buf: memoryview, offset: int) -> tuple[bytes, int]:
    (size,) = struct.unpack_from("<I", buf, offset)
    start = offset + 4
    return bytes(buf[start:start + size]), start + size


def save_checkpoint(path: str | Path, state: backbone.EmbeddingState,
                    config: RunConfig, bundle_fp: str) -> None:
    config_blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             _pack_blob(hashlib.sha256(config_blob).hexdigest().encode()),
             _pack_blob(config_blob),
             _pack_blob(bundle_fp.encode("utf-8"))]
    tables = list(state.param_items())
    parts.append(struct.pack("<I", len(tables)))
    for key, table in tables:
        mat = np.ascontiguousarray(table, dtype="<f4")
        parts.append(_pack_blob(key.encode("utf-8")))
        parts.append(FEATURE_MAGIC)
        parts.append(struct.pack("<II", mat.shape[0], mat.shape[1]))
        parts.append(mat.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path
                    ) -> tuple[RunConfig, str, dict[str, np.ndarray]]:
    """Returns (config, bundle_fingerprint, tables keyed like
    EmbeddingState.param_items)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    buf = memoryview(blob)
    offset = 8
    stored_hash, offset = _read_blob(buf, offset)
    config_blob, offset = _read_blob(buf, offset)
    if hashlib.sha256(config_blob).hexdigest().encode() != stored_hash:
        raise CheckpointError(f"{path}: config hash mismatch (corrupt file)")
    bundle_fp, offset = _read_blob(buf, offset)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tables: dict[str, np.ndarray] = {}
    for _ in range(count):
        key, offset = _read_blob(buf, offset)
        if bytes(buf[offset:offset + 8]) != FEATURE_MAGIC:
            raise CheckpointError(f"{path}: bad table record magic")
        rows, cols = struct.unpack_from("<II", buf, offset + 8)
        offset += 16
        size = 4 * rows * cols
        mat = np.frombuffer(blob, dtype="<f4", count=rows * cols,
                            offset=offset).reshape(rows, cols)
        tables[key.decode("utf-8")] = mat.astype(np.float64)
        offset += size
    config = RunConfig.from_dict(json.loads(config_blob.decode("utf-8")))
    return config, bundle_fp.decode("utf-8"), tables


def state_from_tables(tables: dict[str, np.ndarray], embed_dim: int
                      ) -> backbone.EmbeddingState:
    """Rebuild an EmbeddingState from checkpoint tables."""
    user: dict[str, np.ndarray] = {}
    item: dict[str, np.ndarray] = {}
    for key, mat in tables.items():
        role, modality = key.split(".", 1)
        (user if role == "user" else item)[modality] = mat
    if set(user) != set(item):
        raise CheckpointError("checkpoint tables are not paired per modality")
    return backbone.EmbeddingState(user=user, item=item, init_seed=-1,
                                   embed_dim=embed_dim)
