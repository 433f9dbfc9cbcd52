"""Deterministic discrete-event simulator for static per-mesh instruction
lists: exact rational timing, per-device peak memory, busy/idle accounting,
and JSON trace / Gantt export.

Each mesh executes its list in order. Sends occupy the sender for the
transfer duration (pairs on distinct device pairs proceed concurrently, so a
send lasts as long as its slowest pair); a recv completes when the matching
send has finished. Zero-transfer mode keeps the rendezvous dependencies but
charges no time, which makes a GPipe run reproduce the pipeline latency
formula exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .costs import ZERO, CostModel
from .reshard import Instruction, Program
from .sharding import ALL_GATHER

BUSY_OPS = ("compute", "send", "all_gather")


class SimError(RuntimeError):
    """Raised on deadlock or out-of-memory during simulation."""


@dataclass(frozen=True)
class SimEvent:
    stage: int
    op: str
    label: str
    start: Fraction
    end: Fraction


@dataclass
class SimResult:
    makespan: Fraction
    utilization: dict[int, Fraction]
    peak_bytes: dict[int, int]          # per device id
    events: list[SimEvent]

    def trace_json(self) -> str:
        doc = {
            "makespan": [self.makespan.numerator, self.makespan.denominator],
            "makespan_seconds": float(self.makespan),
            "utilization": {str(k): float(v) for k, v in sorted(self.utilization.items())},
            "peak_bytes": {str(k): v for k, v in sorted(self.peak_bytes.items())},
            "events": [{
                "stage": e.stage, "op": e.op, "label": e.label,
                "start": float(e.start), "end": float(e.end),
            } for e in self.events],
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def gantt_rows(self, program: Program) -> dict[str, list[list]]:
        """Per-device rows of [start, end, label] for plotting."""
        rows: dict[str, list[list]] = {}
        by_stage: dict[int, list[SimEvent]] = {}
        for e in self.events:
            if e.op in BUSY_OPS:
                by_stage.setdefault(e.stage, []).append(e)
        for sp in program.stages:
            seq = [[float(e.start), float(e.end), e.label]
                   for e in by_stage.get(sp.stage, [])]
            for dev in sp.device_ids:
                rows[str(dev)] = seq
        return rows


def _duration(instr: Instruction, program: Program, cost_model: CostModel,
              zero_transfer: bool) -> Fraction:
    if instr.op == "compute":
        return instr.duration if instr.duration is not None else ZERO
    if zero_transfer or instr.op in ("alloc", "free", "sync", "recv"):
        return ZERO
    if instr.op == "send":
        if not instr.pairs:
            return ZERO
        # Distinct device pairs transfer concurrently.
        return max(cost_model.transfer_time(nbytes) for _, _, nbytes in instr.pairs)
    if instr.op == "all_gather":
        view = program.stages[instr.stage].view
        return cost_model.collective_time(ALL_GATHER, instr.nbytes, instr.axes, view)
    return ZERO


def simulate(program: Program, cost_model: CostModel, zero_transfer: bool = False,
             device_memory: Optional[int] = None,
             enforce_memory: bool = True) -> SimResult:
    """Execute the instruction lists; deterministic for fixed inputs.

    Raises SimError on an unmatched send/recv (deadlock) or, when memory is
    enforced, on a per-device peak above `device_memory` (defaults to the
    cost model's cluster setting).
    """
    if device_memory is None:
        device_memory = cost_model.cluster.device_memory
    stages = program.stages
    n = len(stages)
    pc = [0] * n
    now = [ZERO] * n
    busy = [ZERO] * n
    send_end: dict[str, Fraction] = {}
    mem = [sp.resident_bytes for sp in stages]
    peak = list(mem)
    events: list[SimEvent] = []

    def label(instr: Instruction) -> str:
        if instr.op == "compute":
            return f"{instr.phase}{instr.microbatch}@{instr.stage}"
        if instr.op in ("send", "recv"):
            return instr.tag or instr.op
        return instr.op

    done = 0
    total = sum(len(sp.instructions) for sp in stages)
    while done < total:
        progressed = False
        at_sync = [pc[i] < len(stages[i].instructions)
                   and stages[i].instructions[pc[i]].op == "sync" for i in range(n)]
        finished = [pc[i] >= len(stages[i].instructions) for i in range(n)]
        if all(a or f for a, f in zip(at_sync, finished)) and not all(finished):
            barrier = max(now[i] for i in range(n) if at_sync[i])
            for i in range(n):
                if at_sync[i]:
                    instr = stages[i].instructions[pc[i]]
                    events.append(SimEvent(i, "sync", "sync", now[i], barrier))
                    now[i] = barrier
                    pc[i] += 1
                    done += 1
            continue
        for i in range(n):
            while pc[i] < len(stages[i].instructions):
                instr = stages[i].instructions[pc[i]]
                if instr.op == "sync":
                    break  # handled at the barrier above
                if instr.op == "recv":
                    if instr.tag not in send_end:
                        break  # matching send not posted yet
                    start = now[i]
                    end = max(start, send_end[instr.tag])
                    events.append(SimEvent(i, "recv", label(instr), start, end))
                    now[i] = end
                else:
                    dur = _duration(instr, program, cost_model, zero_transfer)
                    start = now[i]
                    end = start + dur
                    if instr.op == "alloc":
                        mem[i] += instr.nbytes
                        if mem[i] > peak[i]:
                            peak[i] = mem[i]
                        if enforce_memory and mem[i] > device_memory:
                            dev = stages[i].device_ids[0]
                            raise SimError(
                                f"out of memory on device {dev} (stage {i}) at "
                                f"{instr.op} {instr.buffer}: {mem[i]} > {device_memory} bytes")
                    elif instr.op == "free":
                        mem[i] -= instr.nbytes
                    elif instr.op == "send":
                        send_end[instr.tag] = end
                    if instr.op in BUSY_OPS:
                        busy[i] += dur
                    events.append(SimEvent(i, instr.op, label(instr), start, end))
                    now[i] = end
                pc[i] += 1
                done += 1
                progressed = True
        if not progressed:
            blocked = []
            for i in range(n):
                if pc[i] < len(stages[i].instructions):
                    instr = stages[i].instructions[pc[i]]
                    blocked.append(f"stage {i} waiting on {instr.op} {instr.tag or ''}")
            raise SimError("deadlock: " + "; ".join(blocked))

    makespan = max(now) if now else ZERO
    events.sort(key=lambda e: (e.start, e.stage, e.end, e.label))
    utilization = {stages[i].stage: (busy[i] / makespan if makespan else ZERO)
                   for i in range(n)}
    peak_bytes = {}
    for i, sp in enumerate(stages):
        for dev in sp.device_ids:
            peak_bytes[dev] = peak[i]
    return SimResult(makespan, utilization, peak_bytes, events)
