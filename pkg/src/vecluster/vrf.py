"""Dual-bank 3R1W latch-based vector register file.

Layout: 32 architectural registers of VLEN bytes; each register occupies
row r in both banks (rows are VLEN/2 bytes).  Traffic moves in port words
("chunks") of 8*F bytes, and consecutive chunks of a register group
alternate banks so concurrent instructions can interleave in anti-phase.

Arbitration grants at most 3 reads and 1 write per bank per cycle, with a
fixed unit priority and group-atomic grants: a unit's chunk access either
gets all its ports this cycle or retries as a whole.
"""

import enum
from dataclasses import dataclass, field
from typing import Optional

from .config import MachineConfig
from .energy import ScmEnergyModel

BANKS = 2
ROWS_PER_BANK = 32
READ_PORTS = 3
WRITE_PORTS = 1


class Unit(enum.IntEnum):
    """Requesting units, in fixed arbitration priority order."""

    VAU = 0
    VSLDU = 1
    VLSU = 2
    FRONTEND = 3   # sequencer / controller bookkeeping accesses


@dataclass(frozen=True)
class VrfLayout:
    banks: int = BANKS
    rows_per_bank: int = ROWS_PER_BANK
    row_bytes: int = 32      # VLEN/2
    chunk_bytes: int = 32    # 8*F

    @classmethod
    def for_config(cls, cfg: MachineConfig) -> "VrfLayout":
        return cls(row_bytes=cfg.vrf_row_bytes, chunk_bytes=cfg.chunk_bytes)

    @property
    def bank_bytes(self) -> int:
        return self.rows_per_bank * self.row_bytes


def locate_chunk(base_reg: int, chunk: int, lmul: int, cfg: MachineConfig):
    """Map (group base, chunk ordinal) to (bank, row, byte offset).

    Chunk c starts at byte c*8F of the group; even chunks land in bank 0,
    odd in bank 1, and each register's chunks fill row base+k in address
    order.  Bijective over in-range inputs.
    """
    chunk_bytes = cfg.chunk_bytes
    group_bytes = lmul * cfg.vlen_bytes
    if chunk < 0 or chunk * chunk_bytes >= group_bytes:
        raise ValueError(
            f"chunk {chunk} out of range for lmul {lmul} group "
            f"({group_bytes // chunk_bytes} chunks)"
        )
    byte0 = chunk * chunk_bytes
    reg = base_reg + byte0 // cfg.vlen_bytes
    local_chunk = (byte0 % cfg.vlen_bytes) // chunk_bytes
    bank = local_chunk % 2
    offset = (local_chunk // 2) * chunk_bytes
    return bank, reg, offset


@dataclass
class VrfPortRequest:
    """One port access; writes carry data plus a byte strobe."""

    kind: str                 # 'read' | 'write'
    bank: int
    row: int
    offset: int
    nbytes: int
    unit: Unit
    data: Optional[bytes] = None
    strobe: Optional[bytes] = None   # per-byte enable, len == nbytes
    group: int = 0                   # atomic-grant group id

    def __post_init__(self):
        if self.kind not in ("read", "write"):
            raise ValueError(f"bad request kind {self.kind}")
        if not 0 <= self.row < ROWS_PER_BANK:
            raise ValueError(f"row {self.row} out of range")
        if self.kind == "write":
            if self.data is None or len(self.data) != self.nbytes:
                raise ValueError("write data must match nbytes")
            if self.strobe is not None and len(self.strobe) != self.nbytes:
                raise ValueError("strobe length must equal nbytes")


class VrfState:
    """Byte contents of the two banks; zero-filled at reset."""

    def __init__(self, cfg: MachineConfig):
        self.cfg = cfg
        self.layout = VrfLayout.for_config(cfg)
        self.banks = [bytearray(cfg.vrf_bank_bytes) for _ in range(BANKS)]

    def read(self, bank: int, row: int, offset: int, nbytes: int) -> bytes:
        base = row * self.layout.row_bytes + offset
        return bytes(self.banks[bank][base : base + nbytes])

    def write(self, bank: int, row: int, offset: int, data: bytes, strobe=None):
        base = row * self.layout.row_bytes + offset
        mem = self.banks[bank]
        if strobe is None:
            mem[base : base + len(data)] = data
        else:
            for i, enable in enumerate(strobe):
                if enable:
                    mem[base + i] = data[i]

    def read_group_bytes(self, base_reg: int, nbytes: int, lmul: int) -> bytes:
        """Architectural view of a group's first nbytes, chunk by chunk."""
        out = bytearray()
        chunk_bytes = self.cfg.chunk_bytes
        chunk = 0
        while len(out) < nbytes:
            bank, row, offset = locate_chunk(base_reg, chunk, lmul, self.cfg)
            out += self.read(bank, row, offset, chunk_bytes)
            chunk += 1
        return bytes(out[:nbytes])


def arbitrate(requests, reads_per_bank: int = READ_PORTS, writes_per_bank: int = WRITE_PORTS):
    """Per-cycle port arbitration; returns (granted, stalled) lists.

    Requests are considered group by group in (unit priority, submission
    order); a group is granted only if every member fits in the remaining
    per-bank port budget.  granted + stalled == requests, always.
    """
    order = {}
    groups = {}
    for idx, req in enumerate(requests):
        key = (req.unit, req.group)
        groups.setdefault(key, []).append(req)
        order.setdefault(key, idx)
    reads_left = [reads_per_bank] * BANKS
    writes_left = [writes_per_bank] * BANKS
    granted, stalled = [], []
    for key in sorted(groups, key=lambda k: (k[0], order[k])):
        members = groups[key]
        need_r = [0] * BANKS
        need_w = [0] * BANKS
        for req in members:
            if req.kind == "read":
                need_r[req.bank] += 1
            else:
                need_w[req.bank] += 1
        fits = all(need_r[b] <= reads_left[b] and need_w[b] <= writes_left[b]
                   for b in range(BANKS))
        if fits:
            for b in range(BANKS):
                reads_left[b] -= need_r[b]
                writes_left[b] -= need_w[b]
            granted.extend(members)
        else:
            stalled.extend(members)
    return granted, stalled


def access_energy(kind: str, width_bytes: float, capacity_bytes: float,
                  model: ScmEnergyModel) -> float:
    """Energy in fJ to move width_bytes through a capacity_bytes bank."""
    if width_bytes <= 0:
        raise ValueError("width must be positive")
    if capacity_bytes < width_bytes:
        raise ValueError("capacity must be at least the access width")
    if kind == "read":
        return model.read_fj(width_bytes, capacity_bytes)
    if kind == "write":
        return model.write_fj(width_bytes, capacity_bytes)
    raise ValueError(f"bad access kind {kind}")
