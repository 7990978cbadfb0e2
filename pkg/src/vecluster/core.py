"""Cycle-level timing and functional model of one vector processing element.

A PE couples a single-issue scalar core with a vector unit made of three
functional units sharing the dual-bank register file:

  VAU    arithmetic: F FPUs, one chunk (8F bytes) of operands per cycle
         through a fixed-depth FMA pipeline;
  VLSU   loads/stores over `vlsu_ports` independent 64-bit memory ports,
         with a small per-port reorder buffer restoring response order;
  VSLDU  slides, double-buffered, one chunk in and one chunk out per cycle.

The controller accepts at most one vector instruction per cycle from the
scalar core, holds a few pending ones, and tracks per-chunk progress of
every in-flight instruction so consumers can chain onto producers chunk by
chunk.  All register-file traffic goes through vrf.arbitrate; all memory
traffic is returned to the cluster, which owns bank arbitration.

Within a cycle the phase order is: deliver memory responses, hand queued
instructions to free units, step the scalar core, run the VRF cycle, then
collect memory requests.  State changes land at end_cycle, so a value
written in cycle t is observable in cycle t+1.
"""

import struct
from collections import deque

from . import vrf
from .config import MachineConfig
from .floats import bits_to_f64, decode_elements, encode_elements, round_to_width
from .isa import (
    AddrMode,
    CsrState,
    ElementWidth,
    InstrClass,
    ScalarInstr,
    VectorInstr,
    VType,
    apply_vsetvli,
)

MASK64 = 0xFFFFFFFFFFFFFFFF


class SimFault(RuntimeError):
    """Architectural fault: bad address, unsupported operation, deadlock."""

    def __init__(self, message, pe=None, pc=None, line=None, addr=None):
        detail = []
        if pe is not None:
            detail.append(f"pe={pe}")
        if pc is not None:
            detail.append(f"pc={pc}")
        if line is not None:
            detail.append(f"line={line}")
        if addr is not None:
            detail.append(f"addr={addr:#x}")
        super().__init__(message + (" [" + ", ".join(detail) + "]" if detail else ""))


class L1Req:
    """One 64-bit word request from a PE port into the shared memory."""

    __slots__ = ("pe", "port", "kind", "addr", "data", "tag")

    def __init__(self, pe, port, kind, addr, data, tag):
        self.pe = pe
        self.port = port
        self.kind = kind      # 'read' | 'write'
        self.addr = addr
        self.data = data      # 8 bytes for writes
        self.tag = tag


class Inflight:
    """Scoreboard entry: one accepted vector instruction.

    Byte ranges live in the flat register-file address space
    (reg * VLEN + offset).  `produced` counts destination bytes committed
    to the VRF; `consumed[k]` counts bytes read from source range k.
    Progress counters only ever grow, and they advance in chunk order.
    """

    __slots__ = (
        "seq", "instr", "vl", "sew", "lmul", "scalar_bits", "stride",
        "dest_start", "dest_len", "srcs", "consumed", "produced",
        "unit", "done", "pc",
    )

    def __init__(self, seq, instr, vl, vtype, scalar_bits, stride, cfg, pc):
        self.seq = seq
        self.instr = instr
        self.vl = vl
        self.sew = vtype.sew
        self.lmul = vtype.lmul
        self.scalar_bits = scalar_bits
        self.stride = stride
        self.unit = _unit_for(instr.klass)
        self.done = False
        self.pc = pc
        self.dest_start, self.dest_len, self.srcs = _ranges(instr, vl, vtype, cfg)
        self.consumed = [0] * len(self.srcs)
        self.produced = 0

    @property
    def has_accumulator(self):
        return self.instr.klass in (InstrClass.FMA, InstrClass.WIDEN_SDOTP)


def _unit_for(klass):
    if klass in (InstrClass.ARITH_VV, InstrClass.ARITH_VF, InstrClass.FMA,
                 InstrClass.WIDEN_SDOTP, InstrClass.REDUCTION):
        return "vau"
    if klass in (InstrClass.LOAD, InstrClass.STORE):
        return "vlsu"
    if klass is InstrClass.SLIDE:
        return "vsldu"
    raise ValueError(f"no unit for {klass}")


def _ranges(instr, vl, vtype, cfg):
    """Destination range and source ranges (start, nbytes, reg) of an instr."""
    vlen = cfg.vlen_bytes
    esz = vtype.sew // 8
    k = instr.klass
    srcs = []
    if k in (InstrClass.ARITH_VV, InstrClass.FMA):
        nbytes = vl * esz
        if instr.vs1 is not None:
            srcs.append((instr.vs1 * vlen, nbytes, instr.vs1))
        srcs.append((instr.vs2 * vlen, nbytes, instr.vs2))
        if k is InstrClass.FMA:  # accumulator is read as well
            srcs.append((instr.vd * vlen, nbytes, instr.vd))
        return instr.vd * vlen, nbytes, srcs
    if k is InstrClass.WIDEN_SDOTP:
        if vl % 2 != 0:
            raise SimFault("widening sum-of-dot-products needs an even vl")
        nbytes = vl * esz          # source bytes == destination bytes
        if instr.vs1 is not None:
            srcs.append((instr.vs1 * vlen, nbytes, instr.vs1))
        srcs.append((instr.vs2 * vlen, nbytes, instr.vs2))
        srcs.append((instr.vd * vlen, nbytes, instr.vd))
        return instr.vd * vlen, nbytes, srcs
    if k is InstrClass.REDUCTION:
        srcs.append((instr.vs2 * vlen, vl * esz, instr.vs2))
        srcs.append((instr.vs1 * vlen, esz, instr.vs1))
        return instr.vd * vlen, esz if vl else 0, srcs
    if k is InstrClass.LOAD:
        if instr.addr_mode is AddrMode.INDEXED:
            srcs.append((instr.vs2 * vlen, vl * 8, instr.vs2))
        return instr.vd * vlen, vl * 8, srcs
    if k is InstrClass.STORE:
        srcs.append((instr.vd * vlen, vl * 8, instr.vd))
        return instr.vd * vlen, 0, srcs
    if k is InstrClass.SLIDE:
        group_elems = vtype.lmul * vlen // esz
        sh = instr.shamt
        if instr.slide_up:
            read_n = max(vl - sh, 0) * esz
            srcs.append((instr.vs2 * vlen, read_n, instr.vs2))
            lo = min(sh, vl) * esz
            return instr.vd * vlen + lo, max(vl - sh, 0) * esz, srcs
        read_lo = min(sh, group_elems) * esz
        read_hi = min(vl + sh, group_elems) * esz
        srcs.append((instr.vs2 * vlen + read_lo, max(read_hi - read_lo, 0), instr.vs2))
        return instr.vd * vlen, vl * esz, srcs
    raise ValueError(f"unexpected class {k}")


# --------------------------------------------------------------------------
# Chunk-granular hazard checks.  A reader may consume bytes [lo, hi) once
# every older writer of an overlapping range has produced them; a writer
# may commit once every older reader has consumed and every older writer
# has produced its overlapping bytes.


def _may_read(inflight, me, lo, hi):
    for other in inflight:
        if other.seq >= me.seq or other.dest_len == 0:
            continue
        olo, ohi = other.dest_start, other.dest_start + other.dest_len
        if lo < ohi and olo < hi:
            if other.produced < min(hi, ohi) - olo:
                return False
    return True


def _may_write(inflight, me, lo, hi):
    for other in inflight:
        if other.seq >= me.seq:
            continue
        for k, (slo, snb, _reg) in enumerate(other.srcs):
            shi = slo + snb
            if snb and lo < shi and slo < hi:
                if other.consumed[k] < min(hi, shi) - slo:
                    return False
        if other.dest_len:
            olo, ohi = other.dest_start, other.dest_start + other.dest_len
            if lo < ohi and olo < hi and other.produced < min(hi, ohi) - olo:
                return False
    return True


# --------------------------------------------------------------------------
# Functional element semantics, computed when a chunk of operands issues.


def execute_arith(instr: VectorInstr, sew: ElementWidth, operands: dict,
                  scalar_bits=None) -> bytes:
    """Element-wise result of one operand chunk.

    `operands` maps source register base -> chunk bytes ('acc' for the
    destination-as-accumulator chunk).  Returns the result chunk bytes.
    """
    k = instr.klass
    if k in (InstrClass.ARITH_VV, InstrClass.FMA):
        if sew is not ElementWidth.W64:
            raise SimFault(f"{instr.mnemonic} supports only 64-bit elements")
        b = decode_elements(operands[instr.vs2], 64)
        if instr.scalar_operand:
            a = [bits_to_f64(scalar_bits)] * len(b)
        else:
            a = decode_elements(operands[instr.vs1], 64)
        if k is InstrClass.FMA:
            d = decode_elements(operands["acc"], 64)
            res = [a[i] * b[i] + d[i] for i in range(len(b))]
        elif instr.mnemonic == "vfadd.vv":
            res = [a[i] + b[i] for i in range(len(b))]
        else:
            res = [a[i] * b[i] for i in range(len(b))]
        return encode_elements(res, 64)
    if k is InstrClass.WIDEN_SDOTP:
        w = int(sew)
        if w not in (8, 16, 32):
            raise SimFault("widening sum-of-dot-products needs sew of 8/16/32")
        src = decode_elements(operands[instr.vs2], w)
        acc = decode_elements(operands["acc"], 2 * w)
        if instr.scalar_operand:
            pair_bytes = struct.pack("<Q", scalar_bits)[: 2 * (w // 8)]
            a0, a1 = decode_elements(pair_bytes, w)
            res = [
                round_to_width(src[2 * j] * a0 + src[2 * j + 1] * a1 + acc[j], 2 * w)
                for j in range(len(acc))
            ]
        else:
            other = decode_elements(operands[instr.vs1], w)
            res = [
                round_to_width(
                    other[2 * j] * src[2 * j] + other[2 * j + 1] * src[2 * j + 1]
                    + acc[j],
                    2 * w,
                )
                for j in range(len(acc))
            ]
        return encode_elements(res, 2 * w)
    raise SimFault(f"execute_arith cannot handle {k}")


# --------------------------------------------------------------------------
# Functional units.


class _Vau:
    """Arithmetic unit: per-cycle chunk issue plus a fixed-latency pipe."""

    def __init__(self, pe):
        self.pe = pe
        self.cur = None
        self.cursor = 0
        self.pipe = []            # [countdown, write_spec]; write after 0
        self.ready_writes = deque()
        self.red_acc = None       # running reduction sum

    def idle(self):
        return self.cur is None and not self.pipe and not self.ready_writes

    def can_accept(self):
        # Drain may overlap the next instruction's issue when no hazard.
        return self.cur is None or self.cursor >= self._total_chunks(self.cur)

    def assign(self, flight):
        self.cur = flight
        self.cursor = 0
        if flight.instr.klass is InstrClass.REDUCTION:
            self.red_acc = None

    def _total_chunks(self, flight):
        cb = self.pe.cfg.chunk_bytes
        if flight.instr.klass is InstrClass.REDUCTION:
            return (flight.srcs[0][1] + cb - 1) // cb
        return (flight.dest_len + cb - 1) // cb

    def propose(self, groups):
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        if self.ready_writes:
            spec = self.ready_writes[0]
            flight, lo, hi = spec[0], spec[5], spec[6]
            if _may_write(pe.inflight, flight, lo, hi):
                req = vrf.VrfPortRequest(
                    "write", spec[1], spec[2], spec[3], len(spec[4]),
                    vrf.Unit.VAU, data=spec[4], group=pe.next_group(),
                )
                groups.append(([req], self._commit_write))
        flight = self.cur
        if flight is None or self.cursor >= self._total_chunks(flight):
            return
        if len(self.ready_writes) > 1:
            return  # exit congestion backpressures issue
        if flight.instr.klass is InstrClass.REDUCTION:
            self._propose_reduction(groups, flight)
            return
        c = self.cursor
        reads = []
        for slot, (slo, snb, reg) in enumerate(flight.srcs):
            lo = slo + c * cb
            hi = min(lo + cb, slo + snb)
            if hi <= lo or not _may_read(pe.inflight, flight, lo, hi):
                return
            bank, row, off = vrf.locate_chunk(reg, c, flight.lmul, pe.cfg)
            reads.append((slot, reg, bank, row, off, hi - lo))
        gid = pe.next_group()
        reqs = [
            vrf.VrfPortRequest("read", b, r, o, n, vrf.Unit.VAU, group=gid)
            for (_s, _reg, b, r, o, n) in reads
        ]
        groups.append((reqs, lambda data, f=flight, c=c, reads=reads:
                       self._commit_issue(f, c, reads, data)))

    def _propose_reduction(self, groups, flight):
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        c = self.cursor
        slo, snb, reg = flight.srcs[0]
        lo = slo + c * cb
        hi = min(lo + cb, slo + snb)
        if not _may_read(pe.inflight, flight, lo, hi):
            return
        reads = []
        bank, row, off = vrf.locate_chunk(reg, c, flight.lmul, pe.cfg)
        reads.append((reg, bank, row, off, hi - lo))
        if c == 0:
            ilo, inb, ireg = flight.srcs[1]
            if not _may_read(pe.inflight, flight, ilo, ilo + inb):
                return
            b2, r2, o2 = vrf.locate_chunk(ireg, 0, 1, pe.cfg)
            reads.append((ireg, b2, r2, o2, inb))
        gid = pe.next_group()
        reqs = [
            vrf.VrfPortRequest("read", b, r, o, n, vrf.Unit.VAU, group=gid)
            for (_reg, b, r, o, n) in reads
        ]
        groups.append((reqs, lambda data, f=flight, c=c, reads=reads:
                       self._commit_reduction(f, c, reads, data)))

    def _commit_issue(self, flight, c, reads, data):
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        operands = {}
        last = len(flight.srcs) - 1
        for (slot, reg, _b, _r, _o, n), chunk in zip(reads, data):
            key = "acc" if flight.has_accumulator and slot == last else reg
            operands[key] = chunk
            pe.bump_consumed(flight, slot, n)
        bank, row, off = vrf.locate_chunk(flight.instr.vd, c, flight.lmul, pe.cfg)
        lo = flight.dest_start + c * cb
        spec = (flight, bank, row, off, result, lo, lo + len(result))
        self.pipe.append([pe.cfg.fma_latency_cycles, spec])
        self.cursor += 1
        pe.count_fpu(flight, len(result))
        pe.busy("vau")

    def _commit_reduction(self, flight, c, reads, data):
        pe = self.pe
        esz = flight.sew // 8
        width = int(flight.sew)
        if c == 0:  # chunk 0 carries the scalar seed as its second read
            self.red_acc = decode_elements(data[1][:esz], width)[0]
            pe.bump_consumed(flight, 1, flight.srcs[1][1])
        values = decode_elements(data[0], width)
        for v in values:
            self.red_acc += v
        pe.flops += len(values)
        pe.fpu_op_cycles += max(1, len(data[0]) // 8)
        pe.bump_consumed(flight, 0, len(data[0]))
        self.cursor += 1
        pe.busy("vau")
        if self.cursor >= self._total_chunks(flight):
            result = encode_elements([self.red_acc], width)
            bank, row, off = vrf.locate_chunk(flight.instr.vd, 0, 1, pe.cfg)
            lo = flight.dest_start
            spec = (flight, bank, row, off, result, lo, lo + len(result))
            self.pipe.append([pe.cfg.fma_latency_cycles, spec])

    def _commit_write(self, _data):
        pe = self.pe
        flight, bank, row, off, result, lo, _hi = self.ready_writes.popleft()
        pe.stage_vrf_write(bank, row, off, result, None)
        pe.bump_produced(flight, len(result))

    def end_cycle(self):
        remaining = []
        for entry in self.pipe:
            entry[0] -= 1
            if entry[0] <= 0:
                self.ready_writes.append(entry[1])
            else:
                remaining.append(entry)
        self.pipe = remaining
        if self.cur and self.cur.done:
            self.cur = None


class _Vsldu:
    """Slide unit: sequential source reads, double-buffered output chunks."""

    def __init__(self, pe):
        self.pe = pe
        self.cur = None
        self.buf = {}           # absolute source byte base -> chunk bytes
        self.read_cursor = 0
        self.write_cursor = 0
        self.read_chunks = []
        self.write_specs = []

    def idle(self):
        return self.cur is None

    def can_accept(self):
        return self.cur is None

    def assign(self, flight):
        self.cur = flight
        self.buf = {}
        cfg = self.pe.cfg
        cb = cfg.chunk_bytes
        slo, snb, reg = flight.srcs[0]
        first = (slo - reg * cfg.vlen_bytes) // cb
        last = (slo + snb - 1 - reg * cfg.vlen_bytes) // cb if snb else first - 1
        self.read_chunks = list(range(first, last + 1))
        self.read_cursor = 0
        dlo = flight.dest_start - flight.instr.vd * cfg.vlen_bytes
        dhi = dlo + flight.dest_len
        self.write_specs = []
        c = dlo // cb
        while c * cb < dhi:
            lo = max(dlo, c * cb)
            hi = min(dhi, (c + 1) * cb)
            self.write_specs.append((c, lo, hi))
            c += 1
        self.write_cursor = 0
        if flight.dest_len == 0:
            flight.done = True
            self.cur = None

    def propose(self, groups):
        flight = self.cur
        if flight is None:
            return
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        if self.read_cursor < len(self.read_chunks):
            slo, snb, reg = flight.srcs[0]
            c = self.read_chunks[self.read_cursor]
            base = reg * pe.cfg.vlen_bytes + c * cb
            lo = max(base, slo)
            hi = min(base + cb, slo + snb)
            if _may_read(pe.inflight, flight, lo, hi):
                bank, row, off = vrf.locate_chunk(reg, c, flight.lmul, pe.cfg)
                req = vrf.VrfPortRequest("read", bank, row, off, cb,
                                         vrf.Unit.VSLDU, group=pe.next_group())
                groups.append(([req], lambda data, base=base, n=hi - lo, lo=lo:
                               self._commit_read(base, lo, n, data)))
        if self.write_cursor < len(self.write_specs):
            c, lo, hi = self.write_specs[self.write_cursor]
            if self._write_ready(lo, hi) and _may_write(pe.inflight, flight, lo, hi):
                data = self._gather(lo, hi)
                bank, row, off = vrf.locate_chunk(flight.instr.vd, c, flight.lmul,
                                                  pe.cfg)
                off += lo - (flight.instr.vd * pe.cfg.vlen_bytes + c * cb)
                req = vrf.VrfPortRequest("write", bank, row, off, len(data),
                                         vrf.Unit.VSLDU, data=data,
                                         group=pe.next_group())
                groups.append(([req], lambda _d, n=len(data):
                               self._commit_write(n)))

    def _shift(self):
        flight = self.cur
        esz = flight.sew // 8
        return (-flight.instr.shamt if flight.instr.slide_up else flight.instr.shamt) * esz

    def _write_ready(self, lo, hi):
        """All source chunks feeding dest bytes [lo, hi) are buffered."""
        flight = self.cur
        cfg = self.pe.cfg
        cb = cfg.chunk_bytes
        dbase = flight.instr.vd * cfg.vlen_bytes
        sbase = flight.srcs[0][2] * cfg.vlen_bytes
        slo, snb, _ = flight.srcs[0]
        shift = self._shift()
        src_lo = (lo - dbase) + shift + sbase
        src_hi = (hi - dbase) + shift + sbase
        src_lo = max(src_lo, slo)
        src_hi = min(src_hi, slo + snb)
        if src_hi <= src_lo:
            return True
        read_done = sbase + self.read_chunks[self.read_cursor] * cb \
            if self.read_cursor < len(self.read_chunks) else float("inf")
        return src_hi <= read_done

    def _gather(self, lo, hi):
        flight = self.cur
        cfg = self.pe.cfg
        cb = cfg.chunk_bytes
        dbase = flight.instr.vd * cfg.vlen_bytes
        sbase = flight.srcs[0][2] * cfg.vlen_bytes
        slo, snb, _ = flight.srcs[0]
        shift = self._shift()
        out = bytearray(hi - lo)
        for i in range(hi - lo):
            src = (lo - dbase + i) + shift + sbase
            if slo <= src < slo + snb:
                base = sbase + ((src - sbase) // cb) * cb
                chunk = self.buf.get(base)
                if chunk is not None:
                    out[i] = chunk[src - base]
        return bytes(out)

    def _commit_read(self, base, lo, nbytes, data):
        pe = self.pe
        self.buf[base] = data[0]
        pe.bump_consumed(self.cur, 0, nbytes)
        self.read_cursor += 1
        pe.busy("vsldu")

    def _commit_write(self, nbytes):
        flight = self.cur
        self.write_cursor += 1
        self.pe.bump_produced(flight, nbytes)
        self.pe.busy("vsldu")
        if self.write_cursor >= len(self.write_specs):
            self.cur = None


class _RobSlot:
    __slots__ = ("word", "data")

    def __init__(self, word):
        self.word = word
        self.data = None


class _Vlsu:
    """Load/store unit: word requests over the memory ports with per-port
    reorder buffers; register-file writeback strictly in chunk order."""

    def __init__(self, pe):
        self.pe = pe
        cfg = pe.cfg
        self.ports = cfg.vlsu_ports
        self.cur = None
        self.n_words = 0
        self.robs = [deque() for _ in range(self.ports)]
        self.pending = [None] * self.ports          # request awaiting grant
        self.port_next = [0] * self.ports           # next word ordinal k
        self.wb_chunk = 0
        self.idx_vals = {}
        self.idx_cursor = 0
        self.store_q = [deque() for _ in range(self.ports)]
        self.store_read_chunk = 0
        self.store_granted = 0
        self.staged_store_words = []

    def idle(self):
        return self.cur is None

    def can_accept(self):
        return self.cur is None

    def in_flight(self):
        return self.cur is not None

    def assign(self, flight):
        self.cur = flight
        self.n_words = flight.vl
        self.robs = [deque() for _ in range(self.ports)]
        self.pending = [None] * self.ports
        self.port_next = [0] * self.ports
        self.wb_chunk = 0
        self.idx_vals = {}
        self.idx_cursor = 0
        self.store_q = [deque() for _ in range(self.ports)]
        self.store_read_chunk = 0
        self.store_granted = 0
        if self.n_words == 0:
            flight.done = True
            self.cur = None

    # ---- VRF side ----

    def propose(self, groups):
        flight = self.cur
        if flight is None:
            return
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        if flight.instr.klass is InstrClass.STORE:
            total = (self.n_words * 8 + cb - 1) // cb
            queued = sum(len(q) for q in self.store_q) + len(self.staged_store_words)
            if self.store_read_chunk < total and queued < 2 * self.ports:
                c = self.store_read_chunk
                slo, snb, reg = flight.srcs[0]
                lo = slo + c * cb
                hi = min(lo + cb, slo + snb)
                if _may_read(pe.inflight, flight, lo, hi):
                    bank, row, off = vrf.locate_chunk(reg, c, flight.lmul, pe.cfg)
                    req = vrf.VrfPortRequest("read", bank, row, off, hi - lo,
                                             vrf.Unit.VLSU, group=pe.next_group())
                    groups.append(([req], lambda data, c=c, n=hi - lo:
                                   self._commit_store_read(c, n, data)))
            return
        # loads: index fetch stream, then in-order chunk writeback
        if flight.instr.addr_mode is AddrMode.INDEXED:
            self._propose_index_read(groups, flight)
        self._propose_writeback(groups, flight)

    def _propose_index_read(self, groups, flight):
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        slo, snb, reg = flight.srcs[0]
        total = (snb + cb - 1) // cb
        if self.idx_cursor >= total:
            return
        c = self.idx_cursor
        lo = slo + c * cb
        hi = min(lo + cb, slo + snb)
        if not _may_read(pe.inflight, flight, lo, hi):
            return
        bank, row, off = vrf.locate_chunk(reg, c, flight.lmul, pe.cfg)
        req = vrf.VrfPortRequest("read", bank, row, off, hi - lo,
                                 vrf.Unit.VLSU, group=pe.next_group())
        groups.append(([req], lambda data, c=c, n=hi - lo:
                       self._commit_index_read(c, n, data)))

    def _commit_index_read(self, c, nbytes, data):
        per = nbytes // 8
        vals = struct.unpack(f"<{per}Q", data[0][:per * 8])
        base_word = c * (self.pe.cfg.chunk_bytes // 8)
        for i, v in enumerate(vals):
            self.idx_vals[base_word + i] = v
        self.idx_cursor += 1
        self.pe.bump_consumed(self.cur, 0, nbytes)
        self.pe.busy("vlsu")

    def _commit_store_read(self, c, nbytes, data):
        flight = self.cur
        chunk = data[0]
        base_word = c * (self.pe.cfg.chunk_bytes // 8)
        for i in range(nbytes // 8):
            self.staged_store_words.append(
                (flight, base_word + i, chunk[8 * i: 8 * i + 8])
            )
        self.store_read_chunk += 1
        self.pe.bump_consumed(flight, 0, nbytes)
        self.pe.busy("vlsu")

    def _propose_writeback(self, groups, flight):
        """Commit complete chunks to the VRF, strictly in chunk order.

        With more memory ports than FPUs several chunks complete per
        cycle; they go out as one atomic group so response order is
        preserved even under port contention.
        """
        pe = self.pe
        cb = pe.cfg.chunk_bytes
        wpc = cb // 8
        total = (self.n_words * 8 + cb - 1) // cb
        per_cycle = max(1, self.ports // pe.cfg.fpus_per_pe)
        reqs = []
        batch = []
        gid = None
        for c in range(self.wb_chunk, min(self.wb_chunk + per_cycle, total)):
            words = range(c * wpc, min((c + 1) * wpc, self.n_words))
            ready = True
            for w in words:
                rob = self.robs[w % self.ports]
                if not rob or rob[0].word != w or rob[0].data is None:
                    ready = False
                    break
            if not ready:
                break
            lo = flight.dest_start + c * cb
            hi = lo + len(words) * 8
            if not _may_write(pe.inflight, flight, lo, hi):
                break
            chunk = b"".join(self.robs[w % self.ports][0].data for w in words)
            bank, row, off = vrf.locate_chunk(flight.instr.vd, c, flight.lmul,
                                              pe.cfg)
            if gid is None:
                gid = pe.next_group()
            reqs.append(vrf.VrfPortRequest("write", bank, row, off, len(chunk),
                                           vrf.Unit.VLSU, data=chunk, group=gid))
            batch.append((c, words, len(chunk)))
        if reqs:
            groups.append((reqs, lambda _d, batch=batch:
                           self._commit_writeback(batch)))

    def _commit_writeback(self, batch):
        for _c, words, nbytes in batch:
            for w in words:
                self.robs[w % self.ports].popleft()
            self.wb_chunk += 1
            self.pe.bump_produced(self.cur, nbytes)
        self.pe.busy("vlsu")

    # ---- memory side ----

    def collect_l1(self, out):
        flight = self.cur
        if flight is None:
            return
        pe = self.pe
        if flight.instr.klass is InstrClass.STORE:
            for p in range(self.ports):
                if self.pending[p] is not None:
                    out.append(self.pending[p])
                elif self.store_q[p]:
                    word, addr, data = self.store_q[p][0]
                    req = L1Req(pe.index, p, "write", addr, data,
                                ("vlsu", p, word))
                    self.pending[p] = req
                    self.store_q[p].popleft()
                    out.append(req)
                    pe.busy("vlsu")
            return
        for p in range(self.ports):
            if self.pending[p] is not None:
                out.append(self.pending[p])
                continue
            if len(self.robs[p]) >= pe.cfg.rob_depth:
                continue
            k = self.port_next[p]
            w = k * self.ports + p
            if w >= self.n_words:
                continue
            addr = self._address(flight, w)
            if addr is None:
                continue
            req = L1Req(pe.index, p, "read", addr, None, ("vlsu", p, w))
            self.pending[p] = req
            self.robs[p].append(_RobSlot(w))
            self.port_next[p] = k + 1
            out.append(req)
            pe.busy("vlsu")

    def _address(self, flight, w):
        mode = flight.instr.addr_mode
        base = flight.scalar_bits
        if mode is AddrMode.UNIT:
            addr = base + 8 * w
        elif mode is AddrMode.STRIDED:
            stride = flight.stride
            if stride >= 1 << 63:
                stride -= 1 << 64
            addr = base + stride * w
        else:
            if w not in self.idx_vals:
                return None
            addr = (base + self.idx_vals[w]) & MASK64
        self.pe.check_word_addr(addr, flight)
        return addr

    def granted(self, tag):
        _kind, port, _word = tag
        req = self.pending[port]
        self.pending[port] = None
        if req.kind == "write":
            self.store_granted += 1
            if self.store_granted >= self.n_words and self.cur is not None:
                self.cur.done = True
                self.cur = None

    def respond(self, tag, data):
        _kind, port, word = tag
        for slot in self.robs[port]:
            if slot.word == word:
                slot.data = data
                return
        raise SimFault(f"response for unknown word {word} on port {port}")

    def end_cycle(self):
        for flight, w, data in self.staged_store_words:
            addr = flight.scalar_bits + 8 * w
            self.pe.check_word_addr(addr, flight)
            self.store_q[w % self.ports].append((w, addr, data))
        self.staged_store_words = []
        if self.cur is not None and self.cur.done:
            self.cur = None


class _ScalarCore:
    """Single-issue frontend: bookkeeping retires in one cycle, vector
    instructions occupy the issue slot for the one-cycle handshake."""

    def __init__(self, pe):
        self.pe = pe
        self.regs = [0] * 32
        self.pc = 0
        self.halted = False
        self.lsu = None            # [mnemonic, reg, addr, phase, data]

    def read(self, r):
        return self.regs[r] if r else 0

    def write(self, r, v):
        if r:
            self.regs[r] = v & MASK64


class Pe:
    """One processing element; the cluster steps it in lockstep phases.

    Per cycle the cluster calls deliver(), assign_units(), dispatch(),
    vrf_phase(), collect_l1(), l1_granted() per grant, then end_cycle().
    Everything observable mutates in end_cycle, keeping results
    independent of PE iteration order.
    """

    def __init__(self, index, stream, cfg: MachineConfig, trace=None):
        self.index = index
        self.cfg = cfg
        self.stream = stream
        self.vrf = vrf.VrfState(cfg)
        self.csr = CsrState(vl=0, vtype=VType(ElementWidth.W64, 1))
        self.core = _ScalarCore(self)
        self.vau = _Vau(self)
        self.vlsu = _Vlsu(self)
        self.vsldu = _Vsldu(self)
        self.inflight = []
        self.queue = deque()
        self.seq = 0
        self.trace = trace
        self.cycle = 0
        self._vrf_write_buf = []
        self._consumed_buf = []
        self._produced_buf = []
        self._busy = {}
        self._group = 0
        self.unit_busy = {"vau": 0, "vlsu": 0, "vsldu": 0, "scalar": 0}
        self.issued_instrs = 0
        self.retired_instrs = 0
        self.fma_count = 0
        self.flops = 0
        self.fpu_op_cycles = 0
        self.vrf_read_count = 0
        self.vrf_write_count = 0
        self.dispatch_stalls = 0

    # ---- bookkeeping helpers used by the units ----

    def next_group(self):
        self._group += 1
        return self._group

    def busy(self, unit):
        self._busy[unit] = True

    def bump_consumed(self, flight, slot_or_reg, nbytes):
        self._consumed_buf.append((flight, slot_or_reg, nbytes))

    def bump_produced(self, flight, nbytes):
        self._produced_buf.append((flight, nbytes))

    def stage_vrf_write(self, bank, row, offset, data, strobe):
        self._vrf_write_buf.append((bank, row, offset, data, strobe))

    def count_fpu(self, flight, result_len):
        k = flight.instr.klass
        if k is InstrClass.FMA:
            elems = result_len // 8
            self.fma_count += elems
            self.flops += 2 * elems
            self.fpu_op_cycles += elems
        elif k is InstrClass.WIDEN_SDOTP:
            outputs = result_len // (2 * flight.sew // 8)
            self.fma_count += 2 * outputs
            self.flops += 4 * outputs
            self.fpu_op_cycles += max(1, result_len // 8)
        else:
            elems = result_len // 8
            self.flops += elems
            self.fpu_op_cycles += elems

    def check_word_addr(self, addr, flight=None):
        if addr % 8 != 0 or addr < 0 or addr + 8 > self.cfg.l1_bytes:
            line = flight.instr.line if flight is not None else None
            pc = flight.pc if flight is not None else self.core.pc
            raise SimFault("bad memory address", pe=self.index, pc=pc,
                           line=line, addr=addr)

    def vector_mem_inflight(self):
        return any(f.instr.klass in (InstrClass.LOAD, InstrClass.STORE)
                   for f in self.inflight)

    # ---- cycle phases ----

    def deliver(self, tag, data):
        if tag[0] == "vlsu":
            self.vlsu.respond(tag, data)
        else:
            core = self.core
            _m, rd, _addr, _phase, _stored = core.lsu
            core.write(rd, struct.unpack("<Q", data)[0])
            core.lsu = None
            core.pc += 1
            self.issued_instrs += 1
            self.busy("scalar")

    def assign_units(self):
        for unit, name in ((self.vau, "vau"), (self.vlsu, "vlsu"),
                           (self.vsldu, "vsldu")):
            if not unit.can_accept() or not self.queue:
                continue
            for flight in self.queue:
                if flight.unit == name:
                    self.queue.remove(flight)
                    unit.assign(flight)
                    if self.trace:
                        self.trace(self.cycle, f"pe{self.index}.{name}",
                                   "start", flight.instr.mnemonic)
                    break

    def dispatch(self):
        core = self.core
        if core.lsu is not None or core.halted:
            return
        if core.pc >= len(self.stream):
            core.halted = True
            return
        instr = self.stream[core.pc]
        if isinstance(instr, ScalarInstr):
            self._dispatch_scalar(instr)
        else:
            self._dispatch_vector(instr)

    def _dispatch_scalar(self, instr: ScalarInstr):
        core = self.core
        m = instr.mnemonic
        if m in ("ld", "sd"):
            # Snitch/vector-unit memory ordering: the scalar LSU waits for
            # every outstanding vector memory operation and vice versa.
            if self.vector_mem_inflight():
                self.dispatch_stalls += 1
                return
            addr = (core.read(instr.rs1) + instr.imm) & MASK64
            self.check_word_addr(addr)
            data = struct.pack("<Q", core.read(instr.rs2)) if m == "sd" else None
            core.lsu = [m, instr.rd, addr, "request", data]
            self.busy("scalar")
            return
        self.busy("scalar")
        self.issued_instrs += 1
        if m == "li":
            core.write(instr.rd, instr.imm)
        elif m == "add":
            core.write(instr.rd, core.read(instr.rs1) + core.read(instr.rs2))
        elif m == "addi":
            core.write(instr.rd, core.read(instr.rs1) + instr.imm)
        elif m == "mul":
            core.write(instr.rd, core.read(instr.rs1) * core.read(instr.rs2))
        elif m == "bnez":
            core.pc = instr.target if core.read(instr.rs1) != 0 else core.pc + 1
            return
        core.pc += 1

    def _dispatch_vector(self, instr: VectorInstr):
        core = self.core
        if instr.klass is InstrClass.VSETVLI:
            vl = apply_vsetvli(core.read(instr.rs1), instr.sew, instr.lmul, self.cfg)
            self.csr.vl = vl
            self.csr.vtype = VType(instr.sew, instr.lmul)
            core.write(instr.rd, vl)
            core.pc += 1
            self.issued_instrs += 1
            self.busy("scalar")
            return
        if len(self.queue) >= self.cfg.dispatch_queue_depth:
            self.dispatch_stalls += 1
            return
        if instr.is_memory and int(self.csr.vtype.sew) != 64:
            raise SimFault("memory operations require 64-bit elements",
                           pe=self.index, pc=core.pc, line=instr.line)
        scalar_bits = core.read(instr.rs1) if instr.rs1 is not None else 0
        stride = core.read(instr.rs2) if instr.rs2 is not None else 0
        flight = Inflight(self.seq, instr, self.csr.vl, self.csr.vtype,
                          scalar_bits, stride, self.cfg, core.pc)
        self.seq += 1
        self.issued_instrs += 1
        self.busy("scalar")
        core.pc += 1
        if self.csr.vl == 0 or (flight.dest_len == 0
                                and instr.klass is not InstrClass.STORE):
            self.retired_instrs += 1   # nothing to execute
            return
        self.inflight.append(flight)
        self.queue.append(flight)
        if self.trace:
            self.trace(self.cycle, f"pe{self.index}.scalar", "accept",
                       instr.mnemonic)

    def vrf_phase(self):
        groups = []
        self.vau.propose(groups)
        self.vsldu.propose(groups)
        self.vlsu.propose(groups)
        if not groups:
            return
        requests = []
        handlers = {}
        for reqs, fn in groups:
            key = (reqs[0].unit, reqs[0].group)
            handlers[key] = (reqs, fn)
            requests.extend(reqs)
        granted, _stalled = vrf.arbitrate(requests)
        granted_keys = []
        seen = set()
        for req in granted:
            key = (req.unit, req.group)
            if key not in seen:
                seen.add(key)
                granted_keys.append(key)
        for key in granted_keys:
            reqs, fn = handlers[key]
            data = []
            for req in reqs:
                if req.kind == "read":
                    data.append(self.vrf.read(req.bank, req.row, req.offset,
                                              req.nbytes))
                    self.vrf_read_count += 1
                else:
                    self.vrf_write_count += 1
            fn(data)

    def collect_l1(self, out):
        self.vlsu.collect_l1(out)
        core = self.core
        if core.lsu is not None and core.lsu[3] == "request":
            m, _rd, addr, _phase, data = core.lsu
            kind = "read" if m == "ld" else "write"
            out.append(L1Req(self.index, self.cfg.vlsu_ports, kind, addr,
                             data, ("scalar",)))

    def l1_granted(self, tag):
        if tag[0] == "vlsu":
            self.vlsu.granted(tag)
            return
        core = self.core
        if core.lsu[0] == "sd":
            core.lsu = None
            core.pc += 1
            self.issued_instrs += 1
        else:
            core.lsu[3] = "await"

    def end_cycle(self):
        for bank, row, offset, data, strobe in self._vrf_write_buf:
            self.vrf.write(bank, row, offset, data, strobe)
        self._vrf_write_buf.clear()
        for flight, slot, nbytes in self._consumed_buf:
            flight.consumed[slot] += nbytes
        self._consumed_buf.clear()
        for flight, nbytes in self._produced_buf:
            flight.produced += nbytes
        self._produced_buf.clear()
        for flight in self.inflight:
            if not flight.done and flight.dest_len > 0 \
                    and flight.produced >= flight.dest_len:
                flight.done = True
        self.vau.end_cycle()
        self.vlsu.end_cycle()
        if self.inflight:
            alive = [f for f in self.inflight if not f.done]
            self.retired_instrs += len(self.inflight) - len(alive)
            self.inflight = alive
        for unit in self._busy:
            self.unit_busy[unit] += 1
        self._busy = {}
        self.cycle += 1

    def finished(self):
        return (self.core.halted and not self.inflight and not self.queue
                and self.core.lsu is None and self.vau.idle()
                and self.vlsu.idle() and self.vsldu.idle())
