"""Shared-L1 scratchpad and the whole-cluster simulation loop.

The scratchpad is word-interleaved across single-port SRAM banks: word w
lives in bank w mod M.  Each bank serves one access per cycle, arbitrated
round-robin over the cluster's initiators (the PEs' VLSU ports plus one
scalar port each); losers retry next cycle and are counted as conflicts.
Read data returns one cycle after the grant.

ClusterSim steps all PEs in lockstep phases (respond, dispatch, register
file, memory arbitration, commit), so results are independent of PE
iteration order and bit-identical across runs.
"""

import struct
from dataclasses import dataclass, field

from .config import MachineConfig
from .core import Pe, SimFault
from .energy import (
    FPU_FMA_PJ_MODEL,
    PE_ISSUE_PJ,
    L1EnergyModel,
    ScmEnergyModel,
)
from .isa import Program
from .vrf import access_energy


def map_address(addr: int, cfg: MachineConfig):
    """Byte address -> (bank, row, offset); word-interleaved, bijective."""
    if addr < 0 or addr >= cfg.l1_bytes:
        raise SimFault(f"address {addr:#x} outside the {cfg.l1_bytes}-byte L1")
    word, offset = divmod(addr, 8)
    return word % cfg.l1_banks, word // cfg.l1_banks, offset


def arbitrate_l1(requests, pointers, num_initiators, bank_of):
    """One cycle of per-bank round-robin arbitration.

    `requests` is an ordered list of (initiator, payload); `pointers` the
    per-bank round-robin state, mutated in place.  Returns (grants,
    stalled): grants one (initiator, payload) per contended bank, the
    pointer moving just past each winner.
    """
    by_bank = {}
    for initiator, payload in requests:
        by_bank.setdefault(bank_of(payload), []).append((initiator, payload))
    grants, stalled = [], []
    for bank in sorted(by_bank):
        contenders = by_bank[bank]
        ptr = pointers[bank]
        winner = min(contenders, key=lambda item: (item[0] - ptr) % num_initiators)
        pointers[bank] = (winner[0] + 1) % num_initiators
        grants.append(winner)
        stalled.extend(item for item in contenders if item is not winner)
    return grants, stalled


@dataclass
class SimReport:
    """Deterministic summary of one simulation run."""

    cycles: int
    fma_count: int
    flops: int
    fpu_op_cycles: int
    issued_instrs: int
    retired_instrs: int
    unit_busy: dict
    dispatch_stalls: int
    l1_reads: int
    l1_writes: int
    l1_conflicts: int
    vrf_reads: int
    vrf_writes: int
    num_pes: int
    fpus_per_pe: int

    def utilization(self, fmas_per_fpu_cycle: float = 1.0) -> float:
        """Executed FMAs over the FPU-cycle budget; in [0, 1]."""
        budget = self.cycles * self.num_pes * self.fpus_per_pe * fmas_per_fpu_cycle
        return self.fma_count / budget if budget else 0.0

    @property
    def flops_per_cycle(self) -> float:
        return self.flops / self.cycles if self.cycles else 0.0

    def energy_estimate_pj(self, cfg: MachineConfig,
                           scm: ScmEnergyModel = None,
                           l1: L1EnergyModel = None,
                           fpu_fma_pj: float = FPU_FMA_PJ_MODEL,
                           pe_issue_pj: float = PE_ISSUE_PJ) -> dict:
        """Analytic per-access estimate (not a measurement): access tallies
        priced by the SCM/SRAM models plus per-op FPU and issue costs."""
        scm = scm or ScmEnergyModel()
        l1 = l1 or L1EnergyModel()
        w, k = cfg.chunk_bytes, cfg.vrf_bank_bytes
        vrf_pj = (self.vrf_reads * access_energy("read", w, k, scm)
                  + self.vrf_writes * access_energy("write", w, k, scm)) / 1000.0
        l1_pj = self.l1_reads * l1.read_pj + self.l1_writes * l1.write_pj
        fpu_pj = self.fpu_op_cycles * fpu_fma_pj
        issue_pj = self.issued_instrs * pe_issue_pj
        return {
            "fpu": fpu_pj,
            "issue": issue_pj,
            "vrf": vrf_pj,
            "l1": l1_pj,
            "total": fpu_pj + issue_pj + vrf_pj + l1_pj,
        }


@dataclass
class SimRun:
    report: SimReport
    memory: bytes           # final L1 contents
    cfg: MachineConfig


class ClusterSim:
    """C PEs wired to the banked scratchpad; step() advances one cycle."""

    def __init__(self, program: Program, cfg: MachineConfig, trace=None):
        if program.num_streams > cfg.num_pes:
            raise SimFault(
                f"program has {program.num_streams} streams but the cluster "
                f"has {cfg.num_pes} PEs"
            )
        if len(program.memory) > cfg.l1_bytes:
            raise SimFault("initial memory image exceeds L1 capacity")
        self.cfg = cfg
        self.trace = trace
        self.mem = bytearray(cfg.l1_bytes)
        self.mem[: len(program.memory)] = program.memory
        streams = list(program.streams) + [()] * (cfg.num_pes - program.num_streams)
        self.pes = [Pe(i, streams[i], cfg, trace) for i in range(cfg.num_pes)]
        self.rr = [0] * cfg.l1_banks
        self.pending_responses = {}
        self.cycle = 0
        self.l1_reads = 0
        self.l1_writes = 0
        self.l1_conflicts = 0

    def _initiator(self, req):
        return req.pe * self.cfg.initiators_per_pe + req.port

    def step(self):
        t = self.cycle
        for pe_idx, tag, data in self.pending_responses.pop(t, ()):
            self.pes[pe_idx].deliver(tag, data)
        for pe in self.pes:
            pe.assign_units()
        for pe in self.pes:
            pe.dispatch()
        for pe in self.pes:
            pe.vrf_phase()
        requests = []
        for pe in self.pes:
            pe.collect_l1(requests)
        if requests:
            self._memory_cycle(requests)
        for pe in self.pes:
            pe.end_cycle()
        self.cycle += 1

    def _memory_cycle(self, requests):
        cfg = self.cfg
        items = [(self._initiator(r), r) for r in requests]
        grants, stalled = arbitrate_l1(
            items, self.rr, cfg.total_initiators,
            lambda r: map_address(r.addr, cfg)[0],
        )
        self.l1_conflicts += len(stalled)
        arrival = self.cycle + cfg.l1_latency_cycles
        for _initiator, req in grants:
            if req.kind == "read":
                data = bytes(self.mem[req.addr: req.addr + 8])
                self.pending_responses.setdefault(arrival, []).append(
                    (req.pe, req.tag, data)
                )
                self.l1_reads += 1
            else:
                self.mem[req.addr: req.addr + 8] = req.data
                self.l1_writes += 1
            self.pes[req.pe].l1_granted(req.tag)
            if self.trace:
                self.trace(self.cycle, f"pe{req.pe}.l1", req.kind,
                           f"addr={req.addr:#x}")

    def finished(self):
        return all(pe.finished() for pe in self.pes) and not self.pending_responses

    def run(self, max_cycles: int = 10_000_000, stall_limit: int = 20_000) -> SimRun:
        """Run to completion; watchdogs catch runaways and deadlocks."""
        last_progress = 0
        progress_marker = -1
        while not self.finished():
            self.step()
            marker = sum(pe.retired_instrs + pe.issued_instrs for pe in self.pes)
            if marker != progress_marker:
                progress_marker = marker
                last_progress = self.cycle
            elif self.cycle - last_progress > stall_limit:
                states = [
                    f"pe{p.index}: pc={p.core.pc} inflight={len(p.inflight)}"
                    for p in self.pes
                ]
                raise SimFault(
                    f"no progress for {stall_limit} cycles; " + "; ".join(states)
                )
            if self.cycle > max_cycles:
                raise SimFault(f"exceeded the {max_cycles}-cycle watchdog")
        return SimRun(report=self._report(), memory=bytes(self.mem), cfg=self.cfg)

    def _report(self) -> SimReport:
        per_unit = {}
        for pe in self.pes:
            for unit, cycles in pe.unit_busy.items():
                per_unit[f"pe{pe.index}.{unit}"] = cycles
        return SimReport(
            cycles=self.cycle,
            fma_count=sum(pe.fma_count for pe in self.pes),
            flops=sum(pe.flops for pe in self.pes),
            fpu_op_cycles=sum(pe.fpu_op_cycles for pe in self.pes),
            issued_instrs=sum(pe.issued_instrs for pe in self.pes),
            retired_instrs=sum(pe.retired_instrs for pe in self.pes),
            unit_busy=per_unit,
            dispatch_stalls=sum(pe.dispatch_stalls for pe in self.pes),
            l1_reads=self.l1_reads,
            l1_writes=self.l1_writes,
            l1_conflicts=self.l1_conflicts,
            vrf_reads=sum(pe.vrf_read_count for pe in self.pes),
            vrf_writes=sum(pe.vrf_write_count for pe in self.pes),
            num_pes=self.cfg.num_pes,
            fpus_per_pe=self.cfg.fpus_per_pe,
        )


def run_program(program: Program, cfg: MachineConfig, trace=None,
                max_cycles: int = 10_000_000) -> SimRun:
    return ClusterSim(program, cfg, trace=trace).run(max_cycles=max_cycles)


# ---------------------------------------------------------------------------
# Memory image exchange: flat binary, or a textual hex dump whose first line
# is `@<base address in hex>` followed by 16 bytes per line.


def dump_image(memory: bytes, base: int = 0) -> str:
    lines = [f"@{base:x}"]
    for off in range(0, len(memory), 16):
        chunk = memory[off: off + 16]
        lines.append(chunk.hex())
    return "\n".join(lines) + "\n"


def load_image(text_or_bytes) -> tuple:
    """Returns (base_address, payload bytes)."""
    if isinstance(text_or_bytes, (bytes, bytearray)):
        return 0, bytes(text_or_bytes)
    lines = [ln.strip() for ln in text_or_bytes.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("@"):
        raise ValueError("hex dump must start with an @<base> header")
    base = int(lines[0][1:], 16)
    payload = bytearray()
    for ln in lines[1:]:
        payload += bytes.fromhex(ln)
    return base, bytes(payload)
