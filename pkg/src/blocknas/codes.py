"""Layer structure codes: the shared vocabulary of the whole package.

A candidate block is written as a list of 5-integer layer codes
``{layer_index, op_type, kernel, pred1, pred2}``.  ``pred1``/``pred2`` point
at earlier layers by index, with 0 standing for the block input (and for
"unused" in the second slot of one-input ops).  A code list always ends with
a ``TERMINAL`` entry; termination is forced once ``layer_index`` reaches the
configured maximum.

Everything here is pure and immutable, so the functions can be called freely
from concurrent workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Iterable, NamedTuple


class OpType(IntEnum):
    """Layer operation codes."""

    CONVOLUTION = 1
    MAX_POOLING = 2
    AVERAGE_POOLING = 3
    IDENTITY = 4
    ELEMENTAL_ADD = 5
    CONCAT = 6
    TERMINAL = 7


#: Ops that consume two distinct predecessor tensors.
TWO_INPUT_OPS = frozenset({OpType.ELEMENTAL_ADD, OpType.CONCAT})


class LayerCode(NamedTuple):
    """One 5-integer layer descriptor."""

    layer_index: int
    op_type: int
    kernel: int
    pred1: int
    pred2: int


#: Pseudo-state for "no layer chosen yet"; layer_index 0 is the block input.
INPUT_STATE = LayerCode(0, 0, 0, 0, 0)


class Verdict(NamedTuple):
    """Validation outcome; falsy when invalid, with a machine-readable reason."""

    valid: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.valid


VALID = Verdict(True, None)


def _invalid(reason: str) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class CodeSpaceLimits:
    """Immutable bounds of one search space.

    ``op_kernels`` maps each allowed op_type to its legal kernel values.  For
    connection-style searches the "kernel" slot of op_type 1 is reinterpreted
    as a channel-width choice; the validation rules are identical either way.
    ``max_pooling_layers`` caps pooling entries per trajectory (connection
    search only); ``None`` means unlimited.
    """

    max_layer_index: int
    op_kernels: tuple[tuple[int, tuple[int, ...]], ...]
    max_pooling_layers: int | None = None

    def __post_init__(self):
        if self.max_layer_index < 2:
            raise ValueError("max_layer_index must be >= 2")

    @property
    def allowed_ops(self) -> tuple[int, ...]:
        return tuple(op for op, _ in self.op_kernels)

    def kernels_for(self, op_type: int) -> tuple[int, ...] | None:
        for op, kernels in self.op_kernels:
            if op == op_type:
                return kernels
        return None


def _make_limits(max_layer_index, kernels: dict[int, tuple[int, ...]],
                 max_pooling_layers=None) -> CodeSpaceLimits:
    pairs = tuple(sorted((int(op), tuple(sorted(ks))) for op, ks in kernels.items()))
    return CodeSpaceLimits(max_layer_index, pairs, max_pooling_layers)


def block_code_space(max_layer_index: int = 23) -> CodeSpaceLimits:
    """The block-search space: all seven ops, conv kernels 1/3/5, pool 1/3."""
    return _make_limits(max_layer_index, {
        OpType.CONVOLUTION: (1, 3, 5),
        OpType.MAX_POOLING: (1, 3),
        OpType.AVERAGE_POOLING: (1, 3),
        OpType.IDENTITY: (0,),
        OpType.ELEMENTAL_ADD: (0,),
        OpType.CONCAT: (0,),
        OpType.TERMINAL: (0,),
    })


def connection_code_space(max_layer_index: int = 12,
                          max_pooling_layers: int | None = 5) -> CodeSpaceLimits:
    """The block-connection space: op 1 is a block instance whose "kernel"
    selects a channel width (choice 1..3); pooling downsamples with stride 2.
    """
    return _make_limits(max_layer_index, {
        OpType.CONVOLUTION: (1, 2, 3),
        OpType.MAX_POOLING: (1, 3),
        OpType.AVERAGE_POOLING: (1, 3),
        OpType.TERMINAL: (0,),
    }, max_pooling_layers)


DEFAULT_BLOCK_SPACE = block_code_space()
DEFAULT_CONNECTION_SPACE = connection_code_space()


def validate_code(code: LayerCode, position: int, limits: CodeSpaceLimits) -> Verdict:
    """Check one code against the space at the given 1-based position.

    Returns a verdict rather than raising, so samplers can filter freely.
    """
    index, op, kernel, pred1, pred2 = code
    if position < 1:
        return _invalid(f"position {position} must be >= 1")
    if position > limits.max_layer_index:
        return _invalid(f"position {position} exceeds max_layer_index "
                        f"{limits.max_layer_index}")
    if index != position:
        return _invalid(f"layer_index {index} does not match position {position}")
    kernels = limits.kernels_for(op)
    if kernels is None:
        return _invalid(f"op_type {op} not allowed")
    if position == limits.max_layer_index and op != OpType.TERMINAL:
        return _invalid(f"only terminal is allowed at max_layer_index {position}")
    if kernel not in kernels:
        return _invalid(f"kernel {kernel} not allowed for {OpType(op).name}")
    if op == OpType.TERMINAL:
        if pred1 != 0 or pred2 != 0:
            return _invalid("terminal must have pred1 = pred2 = 0")
        return VALID
    if not 0 <= pred1 <= index - 1:
        return _invalid(f"pred1 {pred1} out of range 0..{index - 1}")
    if op in TWO_INPUT_OPS:
        if not 1 <= pred2 <= index - 1:
            return _invalid(f"pred2 {pred2} out of range 1..{index - 1} "
                            "for two-input op")
        if pred1 == pred2:
            return _invalid(f"pred1 and pred2 both reference layer {pred1}")
        return VALID
    if pred2 != 0:
        return _invalid(f"pred2 must be 0 for {OpType(op).name}")
    return VALID


@lru_cache(maxsize=4096)
def enumerate_actions(position: int, limits: CodeSpaceLimits) -> tuple[LayerCode, ...]:
    """Every code accepted at ``position``, sorted by (op, kernel, pred1, pred2).

    At ``max_layer_index`` only the terminal code is returned, so every
    trajectory is forced to stop.  The result is cached; treat it as frozen.
    """
    if not 1 <= position <= limits.max_layer_index:
        raise ValueError(f"position {position} out of range "
                         f"1..{limits.max_layer_index}")
    if position == limits.max_layer_index:
        return (LayerCode(position, int(OpType.TERMINAL), 0, 0, 0),)
    out: list[LayerCode] = []
    for op, kernels in limits.op_kernels:
        if op == OpType.TERMINAL:
            out.append(LayerCode(position, op, 0, 0, 0))
        elif op in TWO_INPUT_OPS:
            for kernel in kernels:
                for pred1 in range(position):
                    for pred2 in range(1, position):
                        if pred1 != pred2:
                            out.append(LayerCode(position, op, kernel, pred1, pred2))
        else:
            for kernel in kernels:
                for pred1 in range(position):
                    out.append(LayerCode(position, op, kernel, pred1, 0))
    out.sort(key=lambda c: (c.op_type, c.kernel, c.pred1, c.pred2))
    return tuple(out)


class ParseError(ValueError):
    """Malformed structure-code text; ``column`` is 1-based."""

    def __init__(self, message: str, column: int):
        super().__init__(f"{message} (column {column})")
        self.column = column


def serialize_code(code: LayerCode) -> str:
    return ",".join(str(int(field)) for field in code)


def serialize_block(codes: Iterable[LayerCode]) -> str:
    """Canonical one-line form: fields comma-separated, layers semicolon-separated."""
    return ";".join(serialize_code(code) for code in codes)


def parse_block(text: str) -> tuple[LayerCode, ...]:
    """Inverse of :func:`serialize_block`; rejects anything non-canonical."""
    if text == "":
        raise ParseError("empty input", 1)
    codes = []
    offset = 0
    for segment in text.split(";"):
        if segment == "":
            raise ParseError("empty layer code", offset + 1)
        fields = segment.split(",")
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", offset + 1)
        values = []
        field_offset = offset
        for field in fields:
            try:
                values.append(int(field))
            except ValueError:
                raise ParseError(f"not an integer: {field!r}", field_offset + 1) from None
            field_offset += len(field) + 1
        codes.append(LayerCode(*values))
        offset += len(segment) + 1
    return tuple(codes)


def codes_to_json(codes: Iterable[LayerCode]) -> str:
    """Wire/export form: a JSON array of 5-integer arrays."""
    return json.dumps([list(code) for code in codes], separators=(",", ":"))


def codes_from_json(payload) -> tuple[LayerCode, ...]:
    """Parse the wire form from a JSON string or an already-decoded list."""
    if isinstance(payload, str):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad JSON: {exc.msg}", exc.colno) from None
    if not isinstance(payload, list):
        raise ParseError("expected a JSON array of layer codes", 1)
    codes = []
    for i, entry in enumerate(payload):
        if (not isinstance(entry, list) or len(entry) != 5
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in entry)):
            raise ParseError(f"entry {i} is not a 5-integer array", 1)
        codes.append(LayerCode(*entry))
    return tuple(codes)
