"""Random-forest active-learning search for the Pareto front of a finite space.

The loop: evaluate a random batch, fit one forest per objective, predict every
configuration of the pool, take the predicted non-dominated set, evaluate the
part of it not yet measured, refit, and stop once the predicted front is fully
measured (or an iteration/evaluation budget runs out).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .evaluator import EvaluationRequest, EvaluationResult
from .journal import FORMAT_VERSION, Journal, read_journal
from .pareto import MEASURED, FrontEntry, filter_valid, hypervolume_2d, nondominated_mask, pareto_front
from .space import Configuration, ParameterSpace, parse_space, sample_indices
from .surrogate import ForestModel, ForestParams, fit_forest, predict_grid

logger = logging.getLogger(__name__)

RUNNING = "running"
CONVERGED = "converged"
BUDGET_EXHAUSTED = "budget-exhausted"


class EvaluationError(RuntimeError):
    """Too many evaluations of a batch failed, or nothing is left to train on."""


@dataclass(frozen=True)
class Sample:
    key: int
    config: Configuration
    metrics: dict[str, float]
    source: int  # 0 for the random batch, else the active-learning iteration
    wall_time: float = 0.0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def source_label(self) -> str:
        return "random" if self.source == 0 else "active-learning"

    def vector(self, objectives: Sequence[str]) -> tuple[float, ...]:
        return tuple(self.metrics[o] for o in objectives)


@dataclass(frozen=True)
class SessionOptions:
    rs: int = 3000
    max_iterations: int = 10
    per_iteration_cap: int | None = 500
    total_budget: int | None = None
    pool_cap: int = 2_000_000
    forest_params: ForestParams = field(default_factory=ForestParams)
    validity_thresholds: Mapping[str, float] | None = None
    seed: int = 0
    max_failure_fraction: float = 0.5
    reference: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.rs < 1:
            raise ValueError(f"rs must be >= 1, got {self.rs}")
        if self.pool_cap < 1:
            raise ValueError(f"pool_cap must be >= 1, got {self.pool_cap}")
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.per_iteration_cap is not None and self.per_iteration_cap < 1:
            raise ValueError(f"per_iteration_cap must be >= 1, got {self.per_iteration_cap}")
        if self.total_budget is not None and self.rs > self.total_budget:
            raise ValueError(f"rs ({self.rs}) exceeds total_budget ({self.total_budget})")
        if not 0.0 < self.max_failure_fraction <= 1.0:
            raise ValueError("max_failure_fraction must be in (0, 1]")

    def to_doc(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["validity_thresholds"] = dict(self.validity_thresholds) if self.validity_thresholds else None
        doc["reference"] = list(self.reference) if self.reference is not None else None
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "SessionOptions":
        doc = dict(doc)
        doc["forest_params"] = ForestParams(**doc["forest_params"])
        if doc.get("reference") is not None:
            doc["reference"] = tuple(doc["reference"])
        return cls(**doc)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    predicted_front_size: int
    new_samples: int
    hypervolume: float | None


@dataclass
class _Batch:
    iteration: int
    keys: list[int]
    predicted_front_size: int


class TuningSession:
    """State of one search: samples, iteration log, status and journal."""

    def __init__(self, space: ParameterSpace, objectives: Sequence[str], options: SessionOptions,
                 journal_path: str | Path | None = None):
        if len(objectives) < 1:
            raise ValueError("at least one objective is required")
        if options.rs > space.cardinality:
            raise ValueError(f"rs ({options.rs}) exceeds the space cardinality ({space.cardinality})")
        self.space = space
        self.objectives = tuple(objectives)
        self.options = options
        self.samples: list[Sample] = []
        self.iteration_log: list[IterationRecord] = []
        self.status = RUNNING
        self.stop_reason = ""
        self.reference: tuple[float, ...] | None = options.reference
        self.predicted_front: list[tuple[int, tuple[float, ...]]] = []
        self.models: list[ForestModel] = []
        self._keys: set[int] = set()
        self._pending: _Batch | None = None
        self.journal_path = Path(journal_path) if journal_path is not None else None
        self._journal: Journal | None = None

    # -- journal plumbing -------------------------------------------------

    def _open_journal(self, fresh: bool) -> None:
        if self.journal_path is None:
            return
        self._journal = Journal(self.journal_path)
        if fresh:
            self._record({
                "type": "header",
                "version": FORMAT_VERSION,
                "space": self.space.to_doc(),
                "objectives": list(self.objectives),
                "options": self.options.to_doc(),
            })
            self._record({"type": "status", "status": RUNNING})
            self._journal.sync()

    def _record(self, rec: dict) -> None:
        if self._journal is not None:
            self._journal.write(rec)

    def _sync(self) -> None:
        if self._journal is not None:
            self._journal.sync()

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def successful(self) -> list[Sample]:
        return [s for s in self.samples if s.ok]

    @property
    def active_iterations(self) -> int:
        return sum(1 for r in self.iteration_log if r.new_samples > 0)

    def _add_sample(self, sample: Sample) -> None:
        if sample.key in self._keys:
            raise RuntimeError(f"configuration {sample.config} evaluated twice")
        self._keys.add(sample.key)
        self.samples.append(sample)

    def _finish(self, status: str, reason: str) -> None:
        self.status = status
        self.stop_reason = reason
        self._record({"type": "status", "status": status, "reason": reason})
        self._sync()
        logger.info("session %s (%s) after %d samples", status, reason, len(self.samples))

    def _set_reference(self) -> None:
        if self.reference is not None or len(self.objectives) != 2:
            return
        boot = [s.vector(self.objectives) for s in self.samples if s.ok and s.source == 0]
        if boot:
            self.reference = tuple(float(v) for v in np.max(np.asarray(boot), axis=0))

    def hypervolume(self) -> float | None:
        """Measured-front hypervolume against the session reference point.

        Points outside the reference box contribute nothing.
        """
        if self.reference is None or len(self.objectives) != 2:
            return None
        ref = self.reference
        pts = [s.vector(self.objectives) for s in self.successful]
        pts = [p for p in pts if p[0] <= ref[0] and p[1] <= ref[1]]
        return hypervolume_2d(pts, ref)

    # -- evaluation -------------------------------------------------------

    def _evaluate_batch(self, batch: _Batch, evaluator) -> int:
        todo = [k for k in sorted(batch.keys) if k not in self._keys]
        requests = [EvaluationRequest(len(self.samples) + i, self.space.config_at(k)) for i, k in enumerate(todo)]
        t0 = time.perf_counter()
        results = evaluator.evaluate(requests) if requests else []
        elapsed = (time.perf_counter() - t0) / max(len(requests), 1)
        by_id: dict[int, EvaluationResult] = {r.id: r for r in results}
        failures = 0
        for key, req in zip(todo, requests):
            res = by_id.get(req.id) or EvaluationResult.failed(req.id, "evaluator returned no result")
            error = None
            metrics: dict[str, float] = {}
            if res.ok:
                missing = [o for o in self.objectives if o not in res.metrics]
                if missing:
                    error = f"missing metrics {missing}"
                else:
                    metrics = {o: float(res.metrics[o]) for o in self.objectives}
            else:
                error = res.reason or "failed"
            if error is not None:
                failures += 1
            sample = Sample(key, req.config, metrics, batch.iteration, elapsed, error)
            self._add_sample(sample)
            self._record(_sample_record(sample))
        self._sync()
        if requests and failures / len(requests) >= self.options.max_failure_fraction:
            raise EvaluationError(
                f"{failures} of {len(requests)} evaluations failed in batch {batch.iteration}; "
                f"first error: {next(s.error for s in self.samples[-len(requests):] if s.error)}"
            )
        return len(requests)

    def _complete_pending(self, evaluator) -> None:
        batch = self._pending
        if batch is None:
            return
        self._evaluate_batch(batch, evaluator)
        if batch.iteration == 0:
            self._set_reference()
        else:
            self._log_iteration(batch.iteration, batch.predicted_front_size, len(batch.keys))
        self._pending = None

    def _log_iteration(self, iteration: int, front_size: int, new: int) -> None:
        rec = IterationRecord(iteration, front_size, new, self.hypervolume())
        self.iteration_log.append(rec)
        self._record({"type": "iteration", **asdict(rec)})
        self._sync()
        logger.info("iteration %d: predicted front %d, new samples %d, hypervolume %s",
                    iteration, front_size, new, rec.hypervolume)

    def _plan(self, batch: _Batch) -> None:
        self._pending = batch
        self._record({"type": "batch", "iteration": batch.iteration, "keys": batch.keys,
                      "predicted_front_size": batch.predicted_front_size})
        self._sync()

    # -- the algorithm ----------------------------------------------------

    def bootstrap(self, evaluator) -> None:
        """Evaluate ``rs`` distinct random configurations (once per session)."""
        if self.samples or self._pending is not None:
            return
        rng = np.random.default_rng(self.options.seed)
        keys = sample_indices(self.space, self.options.rs, rng).tolist()
        self._plan(_Batch(0, keys, 0))
        self._complete_pending(evaluator)

    def fit_models(self) -> list[ForestModel]:
        ok = self.successful
        if not ok:
            raise EvaluationError("no successful samples to train on")
        keys = np.asarray([s.key for s in ok], dtype=np.int64)
        X = self.space.encode_flat(keys)
        params = self.options.forest_params
        self.models = [
            fit_forest(X, np.asarray([s.metrics[o] for s in ok]), params, o) for o in self.objectives
        ]
        return self.models

    def _pool_predictions(self, iteration: int) -> tuple[np.ndarray, np.ndarray]:
        card = self.space.cardinality
        if card <= self.options.pool_cap:
            preds = np.column_stack([predict_grid(m, self.space) for m in self.models])
            return np.arange(card, dtype=np.int64), preds
        rng = np.random.default_rng([self.options.seed, iteration])
        drawn = sample_indices(self.space, self.options.pool_cap, rng)
        pool = np.union1d(drawn, np.fromiter(self._keys, dtype=np.int64, count=len(self._keys)))
        X = self.space.encode_flat(pool)
        preds = np.column_stack([m.predict_matrix(X) for m in self.models])
        return pool, preds

    def step(self, evaluator) -> int:
        """One active-learning iteration; returns the number of new evaluations."""
        if self.status != RUNNING:
            raise RuntimeError(f"session is {self.status}, not running")
        self._complete_pending(evaluator)
        iteration = len(self.iteration_log) + 1
        self.fit_models()
        pool, preds = self._pool_predictions(iteration)
        front = np.flatnonzero(nondominated_mask(preds))
        front = front[np.lexsort((pool[front], *preds[front].T[::-1]))]
        self.predicted_front = [(int(pool[i]), tuple(preds[i].tolist())) for i in front]
        candidates = [int(pool[i]) for i in front if int(pool[i]) not in self._keys]

        if not candidates:
            self._log_iteration(iteration, len(front), 0)
            self._finish(CONVERGED, "predicted front fully evaluated")
            return 0
        limit = len(candidates)
        if self.options.per_iteration_cap is not None:
            limit = min(limit, self.options.per_iteration_cap)
        if self.options.total_budget is not None:
            limit = min(limit, self.options.total_budget - len(self.samples))
        if limit <= 0:
            raise RuntimeError("evaluation budget already exhausted")
        self._plan(_Batch(iteration, candidates[:limit], len(front)))
        self._complete_pending(evaluator)
        return limit

    def run(self, evaluator) -> "TuningSession":
        """Run (or continue) the search until convergence or a budget stop."""
        try:
            if self.status != RUNNING:
                return self
            self._complete_pending(evaluator)
            self.bootstrap(evaluator)
            while self.status == RUNNING:
                budget = self.options.total_budget
                if budget is not None and len(self.samples) >= budget:
                    self._finish(BUDGET_EXHAUSTED, "total_budget")
                elif self.active_iterations >= self.options.max_iterations:
                    self._finish(BUDGET_EXHAUSTED, "max_iterations")
                else:
                    self.step(evaluator)
            return self
        finally:
            self._sync()

    # -- results ----------------------------------------------------------

    def measured_front(self, thresholds: Mapping[str, float] | None = None) -> list[FrontEntry]:
        return measured_front(self, thresholds)


def _sample_record(s: Sample) -> dict:
    rec: dict[str, Any] = {"type": "sample", "key": s.key, "config": s.config.as_dict(), "source": s.source,
                           "wall_time": s.wall_time}
    if s.ok:
        rec["metrics"] = s.metrics
    else:
        rec["error"] = s.error
    return rec


def run_session(space: ParameterSpace, evaluator, options: SessionOptions,
                journal_path: str | Path | None = None,
                objectives: Sequence[str] | None = None) -> TuningSession:
    """Start a new search and run it to completion."""
    objectives = tuple(objectives or evaluator.objectives)
    session = TuningSession(space, objectives, options, journal_path)
    session._open_journal(fresh=True)
    try:
        return session.run(evaluator)
    finally:
        session.close()


def active_learning_step(session: TuningSession, evaluator) -> int:
    return session.step(evaluator)


def measured_front(session: TuningSession, thresholds: Mapping[str, float] | None = None) -> list[FrontEntry]:
    """Non-dominated measured samples, after the validity filter.

    ``thresholds`` defaults to the session's validity thresholds; pass ``{}``
    to disable filtering.
    """
    if thresholds is None:
        thresholds = session.options.validity_thresholds
    ok = session.successful
    if not ok:
        raise EvaluationError("no successful samples")
    valid = filter_valid(ok, thresholds)
    by_key = {s.key: s for s in valid}
    keys = pareto_front((s.key, s.vector(session.objectives)) for s in valid)
    return [FrontEntry(by_key[k].config, by_key[k].vector(session.objectives), MEASURED) for k in keys]


def resume(path: str | Path, reopen: bool = True) -> TuningSession:
    """Rebuild a session from its journal.

    With ``reopen`` the journal is opened for appending so that a subsequent
    ``run`` continues it.
    """
    records = read_journal(path)
    header = records[0]
    space = parse_space(header["space"])
    options = SessionOptions.from_doc(header["options"])
    session = TuningSession(space, header["objectives"], options, path if reopen else None)
    for rec in records[1:]:
        kind = rec["type"]
        if kind == "status":
            session.status = rec["status"]
            session.stop_reason = rec.get("reason", "")
        elif kind == "batch":
            session._pending = _Batch(rec["iteration"], list(rec["keys"]), rec["predicted_front_size"])
        elif kind == "sample":
            config = space.make(rec["config"])
            session._add_sample(Sample(rec["key"], config, rec.get("metrics", {}), rec["source"],
                                       rec.get("wall_time", 0.0), rec.get("error")))
            pending = session._pending
            if pending is not None and pending.iteration == 0 and all(k in session._keys for k in pending.keys):
                session._set_reference()
                session._pending = None
        elif kind == "iteration":
            session.iteration_log.append(IterationRecord(rec["iteration"], rec["predicted_front_size"],
                                                         rec["new_samples"], rec["hypervolume"]))
            if session._pending is not None and session._pending.iteration == rec["iteration"]:
                session._pending = None
    if reopen:
        session._open_journal(fresh=False)
    last = session.iteration_log[-1] if session.iteration_log else None
    if session.status == RUNNING and last is not None and last.new_samples == 0 and session._pending is None:
        # crashed between the converging iteration and its status record
        session._finish(CONVERGED, "predicted front fully evaluated")
    return session
