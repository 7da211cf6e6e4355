"""Turn a sampled structure into a reward.

Three evaluator flavors share one calling convention (request in, result
out): a deterministic synthetic accuracy oracle for desk-scale runs, a
client for remote trainers speaking the line protocol, and — provided by
:mod:`blocknas.predictor` — a learned performance predictor.  The composite
reward corrects early-stopped accuracy with complexity penalties so that
cheap, well-connected structures win ties.
"""

from __future__ import annotations

import hashlib
import math
import socket
import time
from dataclasses import dataclass

from . import wire
from .codes import LayerCode, parse_block
from .graphs import (
    BlockGraph,
    NetworkPlan,
    build_block,
    in_degrees,
    out_degrees,
    topology_fingerprint,
    build_connection_network,
)
from .metrics import (
    CANONICAL_BLOCK_SHAPE,
    ComplexityReport,
    block_complexity,
    plan_complexity,
)


class EvalProtocolError(RuntimeError):
    """Remote trainer broke the message contract."""


class EvalValidationError(ValueError):
    """A result violated its invariants (curve length, value range...)."""


class RetriableEvalError(RuntimeError):
    """Transient failure (timeout, dropped connection); safe to retry."""


@dataclass(frozen=True)
class EvalRequest:
    structure: str  # serialized code list, e.g. "1,1,3,0,0;2,7,0,0,0"
    epochs: int = 12
    job_id: str = "job-0"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        parse_block(self.structure)  # must at least be well-formed

    def codes(self) -> tuple[LayerCode, ...]:
        return parse_block(self.structure)


@dataclass(frozen=True)
class EvalResult:
    accuracy_curve: tuple[float, ...]
    early_stop_accuracy: float
    complexity: ComplexityReport
    wall_time: float = 0.0

    def __post_init__(self):
        if not self.accuracy_curve:
            raise EvalValidationError("empty accuracy curve")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracy_curve):
            raise EvalValidationError("curve values must lie in [0, 1]")
        if self.early_stop_accuracy != self.accuracy_curve[-1]:
            raise EvalValidationError("early-stop accuracy must equal the "
                                      "last curve point")


@dataclass(frozen=True)
class RewardConfig:
    """Weights of the composite early-stop reward.

    Accuracy enters on a 0-100 scale by default so the log-complexity
    penalties are commensurate with accuracy differences; both penalty
    weights and the log base are configurable.
    """

    flops_weight: float = 1.0
    density_weight: float = 8.0
    accuracy_scale: float = 100.0
    log_base: float = math.e

    def __post_init__(self):
        if self.flops_weight < 0 or self.density_weight < 0:
            raise ValueError("penalty weights must be >= 0")


def composite_reward(result: EvalResult, cfg: RewardConfig | None = None) -> float:
    """Early-stop accuracy minus weighted log(FLOPs) and log(density).

    Zero-FLOP structures clamp to one MAC before the log so terminal-first
    trajectories keep a finite reward.
    """
    cfg = cfg or RewardConfig()
    flops = max(float(result.complexity.flops), 1.0)
    dens = float(result.complexity.density)
    if dens <= 0:
        raise ValueError("density must be positive")
    log_base = math.log(cfg.log_base)
    reward = (result.early_stop_accuracy * cfg.accuracy_scale
              - cfg.flops_weight * math.log(flops) / log_base
              - cfg.density_weight * math.log(dens) / log_base)
    if not math.isfinite(reward):
        raise ValueError(f"non-finite reward from {result}")
    return reward


# ---------------------------------------------------------------------------
# Synthetic accuracy oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurrogateConfig:
    """Shape of the synthetic accuracy landscape.

    Richer topologies score higher: an elementwise add, any branching, and
    depth up to ``depth_saturation`` all add accuracy, depth beyond it costs
    ``overdepth_penalty`` per layer, and a per-topology hash term adds
    deterministic noise.  A structure without a single convolution cannot
    classify anything and pins to ``no_conv_accuracy`` exactly — without
    that floor the composite reward's complexity penalties would make
    zero-FLOP structures unbeatable.  The numbers mimic the spread of a
    small early-stopped image classifier (random mean in the high 50s,
    ceiling in the mid 60s); they are knobs of this artifact, not claims
    about any dataset.
    """

    base: float = 0.56
    add_bonus: float = 0.03
    branch_bonus: float = 0.03
    depth_bonus: float = 0.04
    overdepth_penalty: float = 0.02
    noise_amplitude: float = 0.02
    depth_saturation: int = 4
    no_conv_accuracy: float = 0.10
    tau_range: tuple[float, float] = (1.5, 3.5)

    @property
    def designed_max(self) -> float:
        """Best systematic accuracy (noise excluded)."""
        return self.base + self.add_bonus + self.branch_bonus + self.depth_bonus

    @property
    def designed_headroom_above(self) -> float:
        return self.designed_max - self.base


def _hash_unit_floats(fingerprint: str) -> tuple[float, float]:
    digest = hashlib.sha256(fingerprint.encode()).hexdigest()
    return int(digest[:16], 16) / 2 ** 64, int(digest[16:32], 16) / 2 ** 64


@dataclass(frozen=True)
class StructureTraits:
    depth: int
    has_conv: bool
    has_add: bool
    multi_branch: bool
    fingerprint: str


def block_traits(graph: BlockGraph) -> StructureTraits:
    has_conv = any(n.op_type == 1 for n in graph.nodes)
    has_add = any(n.op_type == 5 for n in graph.nodes)
    multi_branch = any(d >= 2 for d in out_degrees(graph).values())
    return StructureTraits(graph.depth, has_conv, has_add, multi_branch,
                           topology_fingerprint(graph))


def plan_traits(plan: NetworkPlan) -> StructureTraits:
    merges = any(d >= 2 for d in in_degrees(plan).values())
    multi_branch = any(d >= 2 for d in out_degrees(plan).values())
    depth = sum(1 for n in plan.nodes if n.kind in ("block", "pool"))
    return StructureTraits(depth, True, merges, multi_branch,
                           topology_fingerprint(plan))


class SurrogateEvaluator:
    """Deterministic stand-in for early-stopped training.

    The final accuracy depends only on the structure's topology (so two
    serializations of the same block agree), and the per-epoch curve is a
    saturating ramp normalized to hit that final value at the last epoch.
    """

    def __init__(self, config: SurrogateConfig | None = None,
                 space: str = "block",
                 base_block: tuple[LayerCode, ...] | None = None,
                 connection_widths: tuple[int, ...] = (32, 64, 128)):
        if space not in ("block", "connection"):
            raise ValueError(f"unknown space {space!r}")
        if space == "connection" and base_block is None:
            raise ValueError("connection space needs a base block")
        self.config = config or SurrogateConfig()
        self.space = space
        self.base_block = base_block
        self.connection_widths = connection_widths

    def traits_and_complexity(self, codes) -> tuple[StructureTraits, ComplexityReport]:
        if self.space == "block":
            graph = build_block(codes, CANONICAL_BLOCK_SHAPE.channels)
            return block_traits(graph), block_complexity(graph)
        base = build_block(self.base_block, CANONICAL_BLOCK_SHAPE.channels)
        plan = build_connection_network(codes, base, widths=self.connection_widths)
        return plan_traits(plan), plan_complexity(plan)

    def final_accuracy(self, codes: tuple[LayerCode, ...]) -> float:
        traits, _ = self.traits_and_complexity(codes)
        return self._accuracy_from_traits(traits)

    def _accuracy_from_traits(self, traits: StructureTraits) -> float:
        cfg = self.config
        if not traits.has_conv:
            return min(max(cfg.no_conv_accuracy, 0.0), 1.0)
        noise_u, _ = _hash_unit_floats(traits.fingerprint)
        acc = (cfg.base
               + cfg.add_bonus * traits.has_add
               + cfg.branch_bonus * traits.multi_branch
               + cfg.depth_bonus * min(traits.depth, cfg.depth_saturation)
               / cfg.depth_saturation
               - cfg.overdepth_penalty * max(0, traits.depth - cfg.depth_saturation)
               + cfg.noise_amplitude * (2.0 * noise_u - 1.0))
        return min(max(acc, 0.0), 1.0)

    def __call__(self, request: EvalRequest) -> EvalResult:
        started = time.perf_counter()
        codes = request.codes()
        traits, complexity = self.traits_and_complexity(codes)
        final = self._accuracy_from_traits(traits)
        _, tau_u = _hash_unit_floats(traits.fingerprint)
        lo, hi = self.config.tau_range
        tau = lo + (hi - lo) * tau_u
        ramp = [1.0 - math.exp(-t / tau) for t in range(1, request.epochs + 1)]
        curve = tuple(final * r / ramp[-1] for r in ramp)
        return EvalResult(curve, curve[-1], complexity,
                          time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Remote trainer client
# ---------------------------------------------------------------------------

class ExternalEvaluator:
    """Client for a trainer process speaking the line protocol.

    One request is in flight per connection at a time.  A timeout or a
    dropped connection is retriable; a malformed response is not.
    Complexity terms are always computed locally so rewards stay on this
    package's conventions regardless of the trainer.
    """

    def __init__(self, host: str, port: int, timeout: float = 60.0,
                 space: str = "block",
                 base_block: tuple[LayerCode, ...] | None = None):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._surrogate = SurrogateEvaluator(space=space, base_block=base_block)
        self._sock: socket.socket | None = None
        self._reader: wire.LineReader | None = None

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port),
                                                      timeout=self.timeout)
            except OSError as exc:
                raise RetriableEvalError(f"connect failed: {exc}") from None
            self._reader = wire.LineReader(self._sock)

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._reader = None

    def __call__(self, request: EvalRequest) -> EvalResult:
        started = time.perf_counter()
        codes = request.codes()
        _, complexity = self._surrogate.traits_and_complexity(codes)
        self._connect()
        payload = {"id": request.job_id, "codes": [list(c) for c in codes],
                   "epochs": request.epochs, "seed": request.seed}
        try:
            wire.send_json_line(self._sock, payload)
            message = self._reader.read_message(timeout=self.timeout)
        except (socket.timeout, TimeoutError):
            self.close()
            raise RetriableEvalError(
                f"trainer timed out after {self.timeout}s") from None
        except OSError as exc:
            self.close()
            raise RetriableEvalError(f"connection lost: {exc}") from None
        except wire.WireError as exc:
            self.close()
            raise EvalProtocolError(str(exc)) from None
        if message is None:
            self.close()
            raise RetriableEvalError("trainer closed the connection")
        return self._result_from_message(message, request, complexity, started)

    def _result_from_message(self, message, request, complexity, started):
        if message.get("id") != request.job_id:
            raise EvalProtocolError(f"response id {message.get('id')!r} does not "
                                    f"match request {request.job_id!r}")
        curve = message.get("curve")
        if not isinstance(curve, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool)
                for v in curve):
            raise EvalProtocolError("response lacks a numeric 'curve' list")
        if len(curve) != request.epochs:
            raise EvalValidationError(
                f"curve has {len(curve)} points, expected {request.epochs}")
        flops = message.get("flops")
        if flops is not None and (not isinstance(flops, int) or flops < 0):
            raise EvalProtocolError("'flops' must be a non-negative integer")
        curve = tuple(float(v) for v in curve)
        if any(not 0.0 <= v <= 1.0 for v in curve):
            raise EvalValidationError("curve values outside [0, 1]")
        return EvalResult(curve, curve[-1], complexity,
                          time.perf_counter() - started)
