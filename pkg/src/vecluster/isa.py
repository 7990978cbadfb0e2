"""Instruction set: RVV Zve64d-flavored vector subset plus scalar bookkeeping.

The textual assembly grammar is the external program surface.  One
instruction per line, `#` comments, labels as `name:`.  Vector mnemonics:

    vsetvli, vle64.v, vse64.v, vlse64.v, vluxei64.v, vfadd.vv, vfmul.vv,
    vfmacc.vv, vfmacc.vf, vfwmacc-sdotp[.vv|.vf], vslideup.vi,
    vslidedown.vi, vfredsum.vs

Scalar bookkeeping: li, add, addi, mul, bnez, and the ld/sd pair used for
flag-based synchronization.  Directives: .data, .text, .pe N, .dword,
.align, .space.  Programs address a shared memory image; `.pe N` selects
which processing element the following instructions belong to.
"""

import enum
import struct
from dataclasses import dataclass, field
from typing import Optional

from .config import MachineConfig


class AsmError(ValueError):
    """Parse or assembly-validation error, carrying the source location."""

    def __init__(self, message, line=None, column=None):
        location = "" if line is None else f" (line {line}" + (
            f", col {column})" if column is not None else ")"
        )
        super().__init__(message + location)
        self.line = line
        self.column = column


class ElementWidth(enum.IntEnum):
    W8 = 8
    W16 = 16
    W32 = 32
    W64 = 64

    @property
    def bytes(self) -> int:
        return self.value // 8


LMUL_VALUES = (1, 2, 4, 8)


@dataclass(frozen=True)
class VType:
    sew: ElementWidth = ElementWidth.W64
    lmul: int = 1

    def __post_init__(self):
        if self.lmul not in LMUL_VALUES:
            raise AsmError(f"lmul must be one of {LMUL_VALUES}, got {self.lmul}")


@dataclass
class CsrState:
    """Vector CSR state: the active vector length and type."""

    vl: int = 0
    vtype: VType = field(default_factory=VType)


def vlmax(sew: ElementWidth, lmul: int, cfg: MachineConfig) -> int:
    """Elements in a register group: lmul * VLEN_bytes / element bytes."""
    return lmul * cfg.vlen_bytes // (sew // 8)


def apply_vsetvli(avl: int, sew: ElementWidth, lmul: int, cfg: MachineConfig) -> int:
    """New vl = min(avl, VLMAX); every input clamps, nothing traps."""
    if avl < 0:
        raise ValueError("avl must be non-negative")
    return min(avl, vlmax(sew, lmul, cfg))


def register_group(base: int, lmul: int) -> tuple:
    """Physical registers {base .. base+lmul-1} of an aligned group."""
    if lmul not in LMUL_VALUES:
        raise ValueError(f"lmul must be one of {LMUL_VALUES}")
    if base % lmul != 0:
        raise ValueError(f"group base v{base} not a multiple of lmul {lmul}")
    if base + lmul > 32:
        raise ValueError(f"group v{base}..v{base + lmul - 1} exceeds v31")
    return tuple(range(base, base + lmul))


class InstrClass(enum.Enum):
    ARITH_VV = "arith-vv"
    ARITH_VF = "arith-vf"
    FMA = "fma"
    WIDEN_SDOTP = "widening-sdotp"
    LOAD = "load"
    STORE = "store"
    SLIDE = "slide"
    REDUCTION = "reduction"
    VSETVLI = "vsetvli"


class AddrMode(enum.Enum):
    UNIT = "unit-stride"
    STRIDED = "constant-stride"
    INDEXED = "indexed"


@dataclass(frozen=True)
class VectorInstr:
    """One decoded vector instruction.

    `vd` is the destination group base, or the source data group for
    stores.  `rs1` carries the scalar operand register: the memory base
    address, the broadcast value of ".vf" forms, or the AVL of vsetvli.
    """

    mnemonic: str
    klass: InstrClass
    vd: int = 0
    vs1: Optional[int] = None
    vs2: Optional[int] = None
    rs1: Optional[int] = None
    rs2: Optional[int] = None      # stride register of vlse64.v
    rd: Optional[int] = None       # vsetvli result register
    shamt: Optional[int] = None    # slide amount
    sew: Optional[ElementWidth] = None   # vsetvli operands
    lmul: Optional[int] = None
    addr_mode: Optional[AddrMode] = None
    slide_up: bool = False
    scalar_operand: bool = False   # ".vf" form
    line: int = field(default=0, compare=False)

    @property
    def is_memory(self) -> bool:
        return self.klass in (InstrClass.LOAD, InstrClass.STORE)

    def vector_sources(self):
        """Vector source groups read by this instruction (excluding vd)."""
        srcs = []
        if self.vs1 is not None:
            srcs.append(self.vs1)
        if self.vs2 is not None:
            srcs.append(self.vs2)
        return srcs


@dataclass(frozen=True)
class ScalarInstr:
    mnemonic: str
    rd: Optional[int] = None
    rs1: Optional[int] = None
    rs2: Optional[int] = None
    imm: int = 0
    target: Optional[int] = None   # branch target, instruction index
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Program:
    """Per-PE instruction streams plus the shared initial memory image."""

    streams: tuple                # tuple of per-PE instruction tuples
    memory: bytes                 # initial L1 image, length data_end
    symbols: dict

    @property
    def num_streams(self) -> int:
        return len(self.streams)


# Register-name tables.  The scalar file is a single 32x64-bit bank; ABI
# names are accepted for readability.
_ABI = (
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
    "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6"
).split()
_XREG = {name: i for i, name in enumerate(_ABI)}
_XREG.update({f"x{i}": i for i in range(32)})
_XREG["fp"] = 8


def _xreg(token: str, line: int) -> int:
    reg = _XREG.get(token)
    if reg is None:
        raise AsmError(f"unknown scalar register '{token}'", line)
    return reg


def _vreg(token: str, line: int) -> int:
    if not token.startswith("v") or not token[1:].isdigit():
        raise AsmError(f"expected vector register, got '{token}'", line)
    idx = int(token[1:])
    if idx > 31:
        raise AsmError(f"vector register index {idx} > 31", line)
    return idx


def _split_operands(rest: str):
    return [t.strip() for t in rest.split(",")] if rest.strip() else []


def _parse_int(token: str, line: int) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise AsmError(f"expected integer, got '{token}'", line)


class _Parser:
    def __init__(self, text: str, l1_bytes: int):
        self.text = text
        self.l1_bytes = l1_bytes
        self.data_labels = {}
        self.image = bytearray(l1_bytes)
        self.data_end = 0

    def parse(self) -> Program:
        lines = self.text.splitlines()
        self._scan_layout(lines)
        streams, text_labels = self._collect_text(lines)
        resolved = []
        for pe_idx, stream in enumerate(streams):
            out = []
            cur_lmul = 1  # static tracking of the active grouping
            for kind, line_no, mnemonic, operands in stream:
                if kind == "vector":
                    instr = self._vector(mnemonic, operands, line_no, cur_lmul)
                    if instr.klass is InstrClass.VSETVLI:
                        cur_lmul = instr.lmul
                    out.append(instr)
                else:
                    out.append(
                        self._scalar(mnemonic, operands, line_no, text_labels[pe_idx])
                    )
            resolved.append(tuple(out))
        return Program(
            streams=tuple(resolved),
            memory=bytes(self.image[: self.data_end]),
            symbols=dict(self.data_labels),
        )

    # Pass 1: size the data section so labels resolve before use.
    def _scan_layout(self, lines):
        section = "text"
        cursor = 0
        for no, raw in enumerate(lines, start=1):
            stmt, label = _strip(raw, no)
            if label is not None and section == "data":
                self.data_labels[label] = cursor
            if not stmt:
                continue
            head, _, rest = stmt.partition(" ")
            if head == ".data":
                section = "data"
            elif head == ".text":
                section = "text"
            elif head == ".pe":
                section = "text"
            elif section == "data":
                cursor = self._data_size(head, rest, cursor, no)
                if cursor > self.l1_bytes:
                    raise AsmError(
                        f"data section exceeds L1 capacity ({self.l1_bytes} bytes)", no
                    )
        self.data_end = max(self.data_end, cursor)

    def _data_size(self, head, rest, cursor, no):
        if head == ".align":
            unit = 1 << _parse_int(rest.strip(), no)
            return (cursor + unit - 1) // unit * unit
        if head == ".space":
            return cursor + _parse_int(rest.strip(), no)
        if head == ".dword":
            if cursor % 8 != 0:
                raise AsmError(".dword at unaligned address; use .align 3", no)
            tokens = _split_operands(rest)
            if not tokens:
                raise AsmError(".dword needs at least one value", no)
            for i, token in enumerate(tokens):
                bits = self._dword_bits(token, no)
                struct.pack_into("<Q", self.image, cursor + 8 * i, bits)
            return cursor + 8 * len(tokens)
        if head == ".byte":
            tokens = _split_operands(rest)
            if not tokens:
                raise AsmError(".byte needs at least one value", no)
            for i, token in enumerate(tokens):
                value = _parse_int(token, no)
                if not 0 <= value <= 255:
                    raise AsmError(f".byte value {value} out of range", no)
                self.image[cursor + i] = value
            return cursor + len(tokens)
        raise AsmError(f"unknown data directive '{head}'", no)

    def _dword_bits(self, token, no):
        try:
            return int(token, 0) & 0xFFFFFFFFFFFFFFFF
        except ValueError:
            pass
        try:
            return struct.unpack("<Q", struct.pack("<d", float(token)))[0]
        except ValueError:
            raise AsmError(f"bad .dword value '{token}'", no)

    # Pass 2a: bucket instruction lines per PE and record text labels.
    def _collect_text(self, lines):
        streams = [[]]
        labels = [{}]
        section = "text"
        pe = 0
        for no, raw in enumerate(lines, start=1):
            stmt, label = _strip(raw, no)
            if label is not None and section == "text":
                labels[pe][label] = len(streams[pe])
            if not stmt:
                continue
            head, _, rest = stmt.partition(" ")
            if head == ".data":
                section = "data"
                continue
            if head == ".text":
                section = "text"
                continue
            if head == ".pe":
                section = "text"
                pe = _parse_int(rest.strip(), no)
                if pe < 0:
                    raise AsmError("negative PE index", no)
                while len(streams) <= pe:
                    streams.append([])
                    labels.append({})
                continue
            if section == "data":
                continue
            kind = "vector" if head in _VECTOR_MNEMONICS else "scalar"
            if kind == "scalar" and head not in _SCALAR_MNEMONICS:
                raise AsmError(f"unknown mnemonic '{head}'", no)
            streams[pe].append((kind, no, head, _split_operands(rest)))
        return streams, labels

    # Pass 2b helpers -----------------------------------------------------

    def _vector(self, mnemonic, ops, no, lmul) -> VectorInstr:
        if mnemonic == "vsetvli":
            if len(ops) != 4:
                raise AsmError("vsetvli needs rd, rs1, eSEW, mLMUL", no)
            sew = _parse_sew(ops[2], no)
            ell = _parse_lmul(ops[3], no)
            return VectorInstr(
                mnemonic, InstrClass.VSETVLI,
                rd=_xreg(ops[0], no), rs1=_xreg(ops[1], no),
                sew=sew, lmul=ell, line=no,
            )
        if mnemonic in ("vle64.v", "vse64.v", "vlse64.v", "vluxei64.v"):
            return self._memory_instr(mnemonic, ops, no, lmul)
        if mnemonic in ("vfadd.vv", "vfmul.vv"):
            _need(ops, 3, mnemonic, no)
            return VectorInstr(
                mnemonic, InstrClass.ARITH_VV,
                vd=_group(ops[0], lmul, no), vs1=_group(ops[1], lmul, no),
                vs2=_group(ops[2], lmul, no), line=no,
            )
        if mnemonic == "vfmacc.vv":
            _need(ops, 3, mnemonic, no)
            return VectorInstr(
                mnemonic, InstrClass.FMA,
                vd=_group(ops[0], lmul, no), vs1=_group(ops[1], lmul, no),
                vs2=_group(ops[2], lmul, no), line=no,
            )
        if mnemonic == "vfmacc.vf":
            _need(ops, 3, mnemonic, no)
            return VectorInstr(
                mnemonic, InstrClass.FMA,
                vd=_group(ops[0], lmul, no), rs1=_xreg(ops[1], no),
                vs2=_group(ops[2], lmul, no), scalar_operand=True, line=no,
            )
        if mnemonic in ("vfwmacc-sdotp", "vfwmacc-sdotp.vv"):
            _need(ops, 3, mnemonic, no)
            return VectorInstr(
                "vfwmacc-sdotp.vv", InstrClass.WIDEN_SDOTP,
                vd=_group(ops[0], lmul, no), vs1=_group(ops[1], lmul, no),
                vs2=_group(ops[2], lmul, no), line=no,
            )
        if mnemonic == "vfwmacc-sdotp.vf":
            _need(ops, 3, mnemonic, no)
            return VectorInstr(
                mnemonic, InstrClass.WIDEN_SDOTP,
                vd=_group(ops[0], lmul, no), rs1=_xreg(ops[1], no),
                vs2=_group(ops[2], lmul, no), scalar_operand=True, line=no,
            )
        if mnemonic in ("vslideup.vi", "vslidedown.vi"):
            _need(ops, 3, mnemonic, no)
            shamt = _parse_int(ops[2], no)
            if shamt < 0:
                raise AsmError("negative slide amount", no)
            return VectorInstr(
                mnemonic, InstrClass.SLIDE,
                vd=_group(ops[0], lmul, no), vs2=_group(ops[1], lmul, no),
                shamt=shamt, slide_up=mnemonic.startswith("vslideup"), line=no,
            )
        if mnemonic == "vfredsum.vs":
            _need(ops, 3, mnemonic, no)
            return VectorInstr(
                mnemonic, InstrClass.REDUCTION,
                vd=_vreg(ops[0], no), vs2=_group(ops[1], lmul, no),
                vs1=_vreg(ops[2], no), line=no,
            )
        raise AsmError(f"unknown mnemonic '{mnemonic}'", no)

    def _memory_instr(self, mnemonic, ops, no, lmul) -> VectorInstr:
        klass = InstrClass.STORE if mnemonic == "vse64.v" else InstrClass.LOAD
        if mnemonic == "vlse64.v":
            _need(ops, 3, mnemonic, no)
            mode, rs2, vs2 = AddrMode.STRIDED, _xreg(ops[2], no), None
        elif mnemonic == "vluxei64.v":
            _need(ops, 3, mnemonic, no)
            mode, rs2, vs2 = AddrMode.INDEXED, None, _group(ops[2], lmul, no)
        else:
            _need(ops, 2, mnemonic, no)
            mode, rs2, vs2 = AddrMode.UNIT, None, None
        base_tok = ops[1]
        if not (base_tok.startswith("(") and base_tok.endswith(")")):
            raise AsmError(f"memory operand must be (reg), got '{base_tok}'", no)
        return VectorInstr(
            mnemonic, klass,
            vd=_group(ops[0], lmul, no), rs1=_xreg(base_tok[1:-1], no),
            rs2=rs2, vs2=vs2, addr_mode=mode, line=no,
        )

    def _scalar(self, mnemonic, ops, no, labels) -> ScalarInstr:
        if mnemonic == "li":
            _need(ops, 2, mnemonic, no)
            return ScalarInstr(
                "li", rd=_xreg(ops[0], no), imm=self._immediate(ops[1], no), line=no
            )
        if mnemonic in ("add", "mul"):
            _need(ops, 3, mnemonic, no)
            return ScalarInstr(
                mnemonic, rd=_xreg(ops[0], no), rs1=_xreg(ops[1], no),
                rs2=_xreg(ops[2], no), line=no,
            )
        if mnemonic == "addi":
            _need(ops, 3, mnemonic, no)
            return ScalarInstr(
                "addi", rd=_xreg(ops[0], no), rs1=_xreg(ops[1], no),
                imm=_parse_int(ops[2], no), line=no,
            )
        if mnemonic == "bnez":
            _need(ops, 2, mnemonic, no)
            if ops[1] not in labels:
                raise AsmError(f"undefined label '{ops[1]}'", no)
            return ScalarInstr(
                "bnez", rs1=_xreg(ops[0], no), target=labels[ops[1]], line=no
            )
        if mnemonic in ("ld", "sd"):
            _need(ops, 2, mnemonic, no)
            imm, reg = _parse_mem_operand(ops[1], no)
            if mnemonic == "ld":
                return ScalarInstr("ld", rd=_xreg(ops[0], no), rs1=reg, imm=imm, line=no)
            return ScalarInstr("sd", rs2=_xreg(ops[0], no), rs1=reg, imm=imm, line=no)
        raise AsmError(f"unknown mnemonic '{mnemonic}'", no)

    def _immediate(self, token, no) -> int:
        try:
            return int(token, 0)
        except ValueError:
            pass
        if token in self.data_labels:
            return self.data_labels[token]
        try:
            return struct.unpack("<Q", struct.pack("<d", float(token)))[0]
        except ValueError:
            raise AsmError(f"cannot resolve immediate '{token}'", no)


_VECTOR_MNEMONICS = {
    "vsetvli", "vle64.v", "vse64.v", "vlse64.v", "vluxei64.v",
    "vfadd.vv", "vfmul.vv", "vfmacc.vv", "vfmacc.vf",
    "vfwmacc-sdotp", "vfwmacc-sdotp.vv", "vfwmacc-sdotp.vf",
    "vslideup.vi", "vslidedown.vi", "vfredsum.vs",
}
_SCALAR_MNEMONICS = {"li", "add", "addi", "bnez", "mul", "ld", "sd"}


def _strip(raw, no):
    """Drop comments, pull a leading label; returns (statement, label)."""
    stmt = raw.split("#", 1)[0].strip()
    label = None
    if ":" in stmt:
        head, _, rest = stmt.partition(":")
        head = head.strip()
        if not head or any(c.isspace() for c in head):
            raise AsmError("malformed label", no)
        label = head
        stmt = rest.strip()
    return stmt, label


def _need(ops, count, mnemonic, no):
    if len(ops) != count:
        raise AsmError(f"{mnemonic} expects {count} operands, got {len(ops)}", no)


def _group(token, lmul, no) -> int:
    base = _vreg(token, no)
    if base % lmul != 0:
        raise AsmError(f"group base v{base} not a multiple of lmul {lmul}", no)
    if base + lmul > 32:
        raise AsmError(f"group v{base} with lmul {lmul} exceeds v31", no)
    return base


def _parse_sew(token, no) -> ElementWidth:
    if token in ("e8", "e16", "e32", "e64"):
        return ElementWidth(int(token[1:]))
    raise AsmError(f"bad element width '{token}'", no)


def _parse_lmul(token, no) -> int:
    if token in ("m1", "m2", "m4", "m8"):
        return int(token[1:])
    raise AsmError(f"bad lmul '{token}'", no)


def _parse_mem_operand(token, no):
    """imm(reg) address of the scalar ld/sd."""
    if "(" not in token or not token.endswith(")"):
        raise AsmError(f"expected imm(reg), got '{token}'", no)
    imm_part, _, reg_part = token.partition("(")
    imm = _parse_int(imm_part, no) if imm_part.strip() else 0
    return imm, _xreg(reg_part[:-1].strip(), no)


def parse_program(text: str, l1_bytes: int = 131072) -> Program:
    """Assemble a textual program into per-PE streams and a memory image."""
    return _Parser(text, l1_bytes).parse()


# ---------------------------------------------------------------------------
# Pretty-printer.  format_program(parse_program(s)) round-trips: parsing the
# output reproduces the identical Program value.


def format_instr(instr) -> str:
    if isinstance(instr, ScalarInstr):
        return _format_scalar(instr)
    m = instr.mnemonic
    if instr.klass is InstrClass.VSETVLI:
        return f"vsetvli {_xname(instr.rd)}, {_xname(instr.rs1)}, e{int(instr.sew)}, m{instr.lmul}"
    if instr.klass in (InstrClass.LOAD, InstrClass.STORE):
        if instr.addr_mode is AddrMode.STRIDED:
            return f"{m} v{instr.vd}, ({_xname(instr.rs1)}), {_xname(instr.rs2)}"
        if instr.addr_mode is AddrMode.INDEXED:
            return f"{m} v{instr.vd}, ({_xname(instr.rs1)}), v{instr.vs2}"
        return f"{m} v{instr.vd}, ({_xname(instr.rs1)})"
    if instr.klass is InstrClass.SLIDE:
        return f"{m} v{instr.vd}, v{instr.vs2}, {instr.shamt}"
    if instr.klass is InstrClass.REDUCTION:
        return f"{m} v{instr.vd}, v{instr.vs2}, v{instr.vs1}"
    if instr.scalar_operand:
        return f"{m} v{instr.vd}, {_xname(instr.rs1)}, v{instr.vs2}"
    return f"{m} v{instr.vd}, v{instr.vs1}, v{instr.vs2}"


def _format_scalar(instr: ScalarInstr) -> str:
    m = instr.mnemonic
    if m == "li":
        return f"li {_xname(instr.rd)}, {_format_imm(instr.imm)}"
    if m in ("add", "mul"):
        return f"{m} {_xname(instr.rd)}, {_xname(instr.rs1)}, {_xname(instr.rs2)}"
    if m == "addi":
        return f"addi {_xname(instr.rd)}, {_xname(instr.rs1)}, {instr.imm}"
    if m == "bnez":
        return f"bnez {_xname(instr.rs1)}, L{instr.target}"
    if m == "ld":
        return f"ld {_xname(instr.rd)}, {instr.imm}({_xname(instr.rs1)})"
    return f"sd {_xname(instr.rs2)}, {instr.imm}({_xname(instr.rs1)})"


def _xname(reg: int) -> str:
    return _ABI[reg]


def _format_imm(value: int) -> str:
    if -65536 < value < 65536:
        return str(value)
    return hex(value & 0xFFFFFFFFFFFFFFFF)


def format_program(program: Program) -> str:
    lines = []
    if program.memory or program.symbols:
        lines.append(".data")
        lines.extend(_format_data(program))
        lines.append(".text")
    for pe, stream in enumerate(program.streams):
        lines.append(f".pe {pe}")
        targets = {
            i.target for i in stream if isinstance(i, ScalarInstr) and i.target is not None
        }
        for idx, instr in enumerate(stream):
            if idx in targets:
                lines.append(f"L{idx}:")
            lines.append(format_instr(instr))
        if len(stream) in targets:
            lines.append(f"L{len(stream)}:")
    return "\n".join(lines) + "\n"


def _format_data(program: Program) -> list:
    """Byte-accurate data section: labels interleaved at their addresses."""
    mem = program.memory
    marks = {}
    for name, addr in sorted(program.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        if addr > len(mem):
            raise ValueError(f"symbol '{name}' lies beyond the memory image")
        marks.setdefault(addr, []).append(name)
    points = sorted(set(marks) | {0, len(mem)})
    lines = []
    for i, start in enumerate(points):
        lines.extend(f"{name}:" for name in marks.get(start, []))
        end = points[i + 1] if i + 1 < len(points) else start
        cursor = start
        while cursor < end:
            if cursor % 8 == 0 and end - cursor >= 8:
                run = (end - cursor) // 8
                words = struct.unpack_from(f"<{run}Q", mem, cursor)
                for off in range(0, run, 8):
                    chunk = words[off : off + 8]
                    lines.append(".dword " + ", ".join(hex(w) for w in chunk))
                cursor += run * 8
            else:
                take = min(end - cursor, 8 - cursor % 8 if cursor % 8 else end - cursor)
                seg = mem[cursor : cursor + take]
                lines.append(".byte " + ", ".join(str(b) for b in seg))
                cursor += take
    return lines
