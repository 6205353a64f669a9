"""Evaluation back ends: closed-form synthetic benchmarks and a subprocess protocol.

Wire protocol spoken with external evaluators (UTF-8, one JSON object per
LF-terminated line):

    request   {"id": 3, "config": {"mu": 0.1, ...}}
    response  {"id": 3, "metrics": {"ate_m": 0.031, "runtime_s": 0.05}}
              {"id": 3, "error": "diverged"}

All requests of a batch are written to the child's stdin, which is then
closed; EOF marks the end of the batch.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .space import Configuration, ParameterSpace, SpaceError, bundled_space

OK = "ok"
FAILED = "failed"

BUILTIN_OBJECTIVES = ("ate_m", "runtime_s")


class EvaluatorError(RuntimeError):
    """The evaluator could not be run at all (spawn failure, bad setup)."""


@dataclass(frozen=True)
class EvaluationRequest:
    id: int
    config: Configuration


@dataclass(frozen=True)
class EvaluationResult:
    id: int
    metrics: dict[str, float] = field(default_factory=dict)
    status: str = OK
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OK

    @classmethod
    def failed(cls, id: int, reason: str) -> "EvaluationResult":
        return cls(id, {}, FAILED, reason)


def _checked(id: int, metrics: Mapping[str, Any], objectives: Sequence[str] | None) -> EvaluationResult:
    names = list(objectives) if objectives else list(metrics)
    out = {}
    for name in names:
        if name not in metrics:
            return EvaluationResult.failed(id, f"missing metric {name!r}")
        v = metrics[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return EvaluationResult.failed(id, f"metric {name!r} is not a number: {v!r}")
        v = float(v)
        if not math.isfinite(v):
            return EvaluationResult.failed(id, f"metric {name!r} is not finite: {v!r}")
        out[name] = v
    return EvaluationResult(id, out)


# Synthetic surfaces. ``xp`` is ``math``-like (scalar) or ``numpy`` (vectorized);
# the expressions are shared so both paths apply the same arithmetic.

def kfusion_metrics(v, r, t, g, m, e, p1, p2, p3, xp=math):
    maximum = np.maximum if xp is np else max
    runtime = (0.008 * (v / 64) ** 3 / r + 0.002 * (p1 + 2 * p2 + 4 * p3) / r + 0.010 / g
               + 0.006 / t + 0.020 * (1 + xp.sin(200 * m) * xp.cos(1000 * e)))
    ate = (0.012 * xp.sqrt(256 / v) + 0.006 * (r - 1) + 0.004 * (t - 1) + 0.003 * (g - 1)
           + 0.080 * abs(m - 0.100) + 2.0 * abs(e - 0.005) + 0.002 * maximum(0, 9 - p1 - p2 - p3)
           + 0.005 * (1 + xp.cos(150 * m + 800 * e)))
    return ate, runtime


def elasticfusion_metrics(w, d, c, s, o, l, f, b, xp=math):
    runtime = (10.0 + 0.6 * w ** 0.5 + 0.4 * d + 0.3 * c - 3.0 * f - 1.5 * s + 2.0 * b + 1.0 * (1 - o)
               + 0.5 * (1 + xp.sin(3 * w) * xp.cos(2 * d)))
    ate = (0.020 + 0.004 * abs(w - 2) + 0.003 * abs(d - 10) + 0.002 * abs(c - 4) + 0.010 * s * f * 0.5
           + 0.008 * o + 0.006 * (1 - l) + 0.004 * b + 0.003 * (1 + xp.cos(2 * w + d)) * 0.5)
    return ate, runtime


KFUSION_ARGS = ("volume_resolution", "compute_size_ratio", "tracking_rate", "integration_rate",
                "mu", "icp_threshold", "pyramid_level1", "pyramid_level2", "pyramid_level3")
ELASTICFUSION_ARGS = ("icp_rgb_weight", "depth_cutoff", "confidence", "so3_disabled", "open_loop",
                      "relocalisation", "fast_odometry", "ftf_rgb")

_SURFACES = {
    "synth-kfusion": (kfusion_metrics, KFUSION_ARGS),
    "synth-elasticfusion": (elasticfusion_metrics, ELASTICFUSION_ARGS),
}
_spaces: dict[str, ParameterSpace] = {}


def builtin_space(name: str) -> ParameterSpace:
    if name not in _SURFACES:
        raise EvaluatorError(f"unknown builtin evaluator {name!r}; choose from {', '.join(_SURFACES)}")
    if name not in _spaces:
        _spaces[name] = bundled_space(name)
    return _spaces[name]


def evaluate_builtin(name: str, config: Mapping[str, Any] | Configuration, id: int = 0) -> EvaluationResult:
    """Evaluate one configuration on a synthetic surface. Raises SpaceError if invalid."""
    space = builtin_space(name)
    config = space.make(config)
    fn, args = _SURFACES[name]
    vals = config.as_dict()
    ate, runtime = fn(*(float(vals[a]) for a in args))
    return EvaluationResult(id, {"ate_m": ate, "runtime_s": runtime})


def builtin_grid_metrics(name: str, space: ParameterSpace, flat: np.ndarray) -> np.ndarray:
    """Vectorized (n, 2) [ate_m, runtime_s] for flat indices of ``space``.

    Meant for brute-force reference fronts; transcendental functions may
    differ from the scalar path in the last bit.
    """
    fn, args = _SURFACES[name]
    idx = space.index_matrix(flat)
    cols = []
    for a in args:
        j = space.names.index(a)
        table = np.asarray([float(v) for v in space.params[j].values])
        cols.append(table[idx[:, j]])
    ate, runtime = fn(*cols, xp=np)
    return np.column_stack([ate, runtime])


class BuiltinEvaluator:
    def __init__(self, name: str, delay: float = 0.0):
        self.name = name
        self.space = builtin_space(name)
        self.objectives = BUILTIN_OBJECTIVES
        self.delay = delay

    def evaluate(self, requests: Sequence[EvaluationRequest]) -> list[EvaluationResult]:
        out = []
        for req in requests:
            if self.delay:
                time.sleep(self.delay)
            try:
                out.append(evaluate_builtin(self.name, req.config, req.id))
            except SpaceError as exc:
                out.append(EvaluationResult.failed(req.id, str(exc)))
        return out


class FunctionEvaluator:
    """Wrap ``func(config) -> {objective: value}``; exceptions become failed results."""

    def __init__(self, func: Callable[[Configuration], Mapping[str, float]], objectives: Sequence[str]):
        self.func = func
        self.objectives = tuple(objectives)

    def evaluate(self, requests: Sequence[EvaluationRequest]) -> list[EvaluationResult]:
        out = []
        for req in requests:
            try:
                metrics = self.func(req.config)
            except Exception as exc:  # evaluator crash is data, not control flow
                out.append(EvaluationResult.failed(req.id, f"{type(exc).__name__}: {exc}"))
                continue
            out.append(_checked(req.id, metrics, self.objectives))
        return out


def _request_line(req: EvaluationRequest) -> str:
    return json.dumps({"id": req.id, "config": req.config.as_dict()}, separators=(",", ":")) + "\n"


def _parse_response(line: str, objectives) -> EvaluationResult | None:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict) or isinstance(obj.get("id"), bool) or not isinstance(obj.get("id"), int):
        return None
    rid = obj["id"]
    if "error" in obj:
        return EvaluationResult.failed(rid, str(obj["error"]))
    metrics = obj.get("metrics")
    if not isinstance(metrics, dict):
        return EvaluationResult.failed(rid, "malformed response line")
    return _checked(rid, metrics, objectives)


def _salvage_id(line: str) -> int | None:
    # a broken line may still carry a readable id prefix: {"id": 12, ...
    head = line.strip()
    if not head.startswith('{"id":'):
        return None
    digits = head[6:].lstrip().split(",", 1)[0].rstrip("}")
    try:
        return int(digits)
    except ValueError:
        return None


def evaluate_subprocess(command: str | Sequence[str], requests: Sequence[EvaluationRequest],
                        timeout: float | None = None,
                        objectives: Sequence[str] | None = None) -> list[EvaluationResult]:
    """Run one child process for the whole batch and collect its answers.

    Ids the child never answers (crash, timeout, malformed line) come back
    as failed results. Output is ordered by request id.
    """
    if not requests:
        return []
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    payload = "".join(_request_line(r) for r in requests)
    try:
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, text=True, encoding="utf-8")
    except OSError as exc:
        raise EvaluatorError(f"cannot start evaluator {argv[0]!r}: {exc}") from exc

    timed_out = False
    try:
        stdout, stderr = proc.communicate(payload, timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        proc.kill()
        stdout, stderr = proc.communicate()

    wanted = {r.id for r in requests}
    results: dict[int, EvaluationResult] = {}
    for line in stdout.splitlines():
        if not line.strip():
            continue
        res = _parse_response(line, objectives)
        if res is None:
            rid = _salvage_id(line)
            if rid in wanted and rid not in results:
                results[rid] = EvaluationResult.failed(rid, "malformed response line")
            continue
        if res.id in wanted and res.id not in results:
            results[res.id] = res

    if timed_out:
        missing = f"timeout after {timeout}s"
    else:
        missing = f"no response (child exit status {proc.returncode})"
        tail = stderr.strip().splitlines()[-1:] if stderr else []
        if tail:
            missing += f": {tail[0]}"
    return [results.get(r.id) or EvaluationResult.failed(r.id, missing)
            for r in sorted(requests, key=lambda r: r.id)]


class SubprocessEvaluator:
    """Evaluate batches through an external command; ``parallel`` children per batch."""

    def __init__(self, command: str | Sequence[str], objectives: Sequence[str],
                 timeout: float | None = None, parallel: int = 1):
        if parallel < 1:
            raise ValueError("parallel must be >= 1")
        self.command = command
        self.objectives = tuple(objectives)
        self.timeout = timeout
        self.parallel = parallel

    def evaluate(self, requests: Sequence[EvaluationRequest]) -> list[EvaluationResult]:
        requests = list(requests)
        if self.parallel == 1 or len(requests) <= 1:
            return evaluate_subprocess(self.command, requests, self.timeout, self.objectives)
        chunks = [requests[i::self.parallel] for i in range(self.parallel)]
        with ThreadPoolExecutor(self.parallel) as pool:
            parts = pool.map(lambda c: evaluate_subprocess(self.command, c, self.timeout, self.objectives),
                             [c for c in chunks if c])
            merged = [r for part in parts for r in part]
        return sorted(merged, key=lambda r: r.id)
