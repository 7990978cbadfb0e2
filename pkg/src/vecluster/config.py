"""Machine configuration: the single source of architectural truth.

Every subsystem (register file layout, functional-unit widths, scratchpad
banking, kernel generation) derives its dimensions from a MachineConfig
instance instead of hardcoding them.
"""

from dataclasses import dataclass


class ConfigError(ValueError):
    """Raised when a configuration violates a structural constraint."""


@dataclass(frozen=True)
class MachineConfig:
    """Parameters of one shared-L1 cluster.

    Defaults describe the reference design point: two PEs with four
    64-bit FPUs each, 64-byte vector registers, and a 128 KiB scratchpad
    in sixteen 8 KiB single-port banks.
    """

    num_pes: int = 2            # C
    fpus_per_pe: int = 4        # F
    ipus_per_pe: int = 1        # G
    vlen_bytes: int = 64        # per-register capacity, bytes
    vlsu_ports: int = 4         # 64-bit memory interfaces per PE
    l1_banks: int = 16
    l1_bank_bytes: int = 8192
    l1_latency_cycles: int = 1  # grant to data
    fma_latency_cycles: int = 4
    rob_depth: int = 4          # response slots per VLSU port
    dispatch_queue_depth: int = 4

    def __post_init__(self):
        if self.num_pes < 1:
            raise ConfigError("num_pes must be >= 1")
        if self.fpus_per_pe < 1:
            raise ConfigError("fpus_per_pe must be >= 1")
        if self.ipus_per_pe < 0:
            raise ConfigError("ipus_per_pe must be >= 0")
        if self.vlen_bytes < 8 or self.vlen_bytes > 1024:
            raise ConfigError("vlen_bytes must be within [8, 1024]")
        # Each register spans one row per bank and chunks must alternate
        # banks evenly, so VLEN has to be a multiple of two port widths.
        if self.vlen_bytes % (2 * self.chunk_bytes) != 0:
            raise ConfigError(
                f"vlen_bytes ({self.vlen_bytes}) must be a multiple of "
                f"2 * 8 * fpus_per_pe ({2 * self.chunk_bytes})"
            )
        if self.vlsu_ports < 1:
            raise ConfigError("vlsu_ports must be >= 1")
        if self.l1_banks < 1 or self.l1_bank_bytes < 8:
            raise ConfigError("L1 geometry must be positive")
        if self.l1_bank_bytes % 8 != 0:
            raise ConfigError("l1_bank_bytes must be a multiple of the 8-byte word")
        if self.l1_latency_cycles < 1:
            raise ConfigError("l1_latency_cycles must be >= 1")
        if self.fma_latency_cycles < 1:
            raise ConfigError("fma_latency_cycles must be >= 1")
        if self.rob_depth < 1:
            raise ConfigError("rob_depth must be >= 1")
        if self.dispatch_queue_depth < 1:
            raise ConfigError("dispatch_queue_depth must be >= 1")

    @property
    def chunk_bytes(self) -> int:
        """Width of one VRF port word: 8*F bytes."""
        return 8 * self.fpus_per_pe

    @property
    def vrf_row_bytes(self) -> int:
        return self.vlen_bytes // 2

    @property
    def vrf_bank_bytes(self) -> int:
        """Capacity of one of the two VRF banks: 16*VLEN bytes."""
        return 16 * self.vlen_bytes

    @property
    def vrf_bytes(self) -> int:
        return 32 * self.vlen_bytes

    @property
    def l1_bytes(self) -> int:
        return self.l1_banks * self.l1_bank_bytes

    @property
    def initiators_per_pe(self) -> int:
        """L1 ports per PE: the VLSU interfaces plus one scalar port."""
        return self.vlsu_ports + 1

    @property
    def total_initiators(self) -> int:
        return self.num_pes * self.initiators_per_pe

    @property
    def peak_flops_per_cycle(self) -> int:
        """Double-precision peak: one FMA (2 FLOP) per FPU per cycle."""
        return 2 * self.num_pes * self.fpus_per_pe
