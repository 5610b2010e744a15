"""Experiment configuration: geometry, persistence mode, cost model.

All randomness in a run flows from ``seed``; every knob that affects
behaviour lives here so a config + trace fully determines a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError

MODE_BASELINE = "baseline"
MODE_FULLNVM = "fullnvm"
MODE_FP = "fp"
MODE_EHAP = "ehap"
MODE_RCR_BASELINE = "rcr-baseline"
MODE_RCR_EHAP = "rcr-ehap"

ALL_MODES = (
    MODE_BASELINE,
    MODE_FULLNVM,
    MODE_FP,
    MODE_EHAP,
    MODE_RCR_BASELINE,
    MODE_RCR_EHAP,
)

# Designs that stage eviction writes in marker-gated queue rounds.
ROUND_MODES = frozenset({MODE_FP, MODE_EHAP, MODE_RCR_EHAP})
RECURSIVE_MODES = frozenset({MODE_RCR_BASELINE, MODE_RCR_EHAP})

POSMAP_DIRECT = "direct"
POSMAP_OBLIVIOUS = "oblivious"
POSMAP_RECURSIVE = "recursive"
POSMAP_STRATEGIES = (POSMAP_DIRECT, POSMAP_OBLIVIOUS, POSMAP_RECURSIVE)


@dataclass(frozen=True)
class CostModel:
    """Abstract per-block-operation cycle costs.

    Defaults keep the 48/60 read/write ratio of a 400 MHz PCM part; only
    orderings derived from these values are meaningful, not absolute time.
    """

    t_read_nvm: int = 48
    t_write_nvm: int = 60
    t_read_volatile: int = 1
    t_write_volatile: int = 1

    def __post_init__(self):
        if not (self.t_write_nvm >= self.t_read_nvm >= self.t_read_volatile > 0):
            raise ConfigError(
                "cost model must satisfy t_write_nvm >= t_read_nvm >= t_read_volatile > 0"
            )
        if self.t_write_volatile <= 0:
            raise ConfigError("t_write_volatile must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulated ORAM instance plus the workload-independent knobs."""

    mode: str = MODE_EHAP
    levels: int = 5                  # tree height L; the tree has L+1 levels
    z: int = 4                       # block slots per bucket
    stash_capacity: int = 200
    temp_posmap_capacity: int = 200
    block_size: int = 64             # payload bytes per block
    seed: int = 1
    posmap: str = POSMAP_DIRECT      # persistence strategy for the posmap flush
    rcr_levels: int = 2              # H: metadata ORAM levels under the top map
    rcr_pack: int = 8                # labels packed per metadata block
    rcr_cache_slots: int = 0         # direct-mapped on-chip entry cache (0 = off)
    channels: int = 1                # independent tree shards
    cost: CostModel = field(default_factory=CostModel)
    crash_sample_seed: int = 4242    # sampling seed for large crash suites
    record_nvm_trace: bool = False

    def __post_init__(self):
        if self.mode not in ALL_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.levels < 0:
            raise ConfigError("levels must be >= 0")
        if self.z < 1:
            raise ConfigError("z must be >= 1")
        if self.stash_capacity < 1 or self.temp_posmap_capacity < 1:
            raise ConfigError("capacities must be >= 1")
        if self.block_size < 8 or self.block_size % 8 != 0:
            raise ConfigError("block_size must be a positive multiple of 8")
        if self.posmap not in POSMAP_STRATEGIES:
            raise ConfigError(f"unknown posmap strategy {self.posmap!r}")
        if self.rcr_levels < 1:
            raise ConfigError("rcr_levels must be >= 1")
        if self.rcr_pack < 2:
            raise ConfigError("rcr_pack must be >= 2")
        if self.rcr_pack * 4 > self.block_size:
            raise ConfigError("rcr_pack labels must fit in one block payload")
        if self.channels < 1 or self.channels & (self.channels - 1):
            raise ConfigError("channels must be a power of two >= 1")
        if self.channels > 2 ** self.levels:
            raise ConfigError("more channels than leaves")
        # Recursive modes force the recursive strategy; flat modes must not use it.
        if self.mode in RECURSIVE_MODES and self.posmap != POSMAP_RECURSIVE:
            object.__setattr__(self, "posmap", POSMAP_RECURSIVE)
        if self.mode not in RECURSIVE_MODES and self.posmap == POSMAP_RECURSIVE:
            raise ConfigError("posmap=recursive requires an rcr-* mode")

    @property
    def n_blocks(self) -> int:
        """Logical address space: one real block per leaf."""
        return 2 ** self.levels

    def shard(self, channel_levels: int) -> "ExperimentConfig":
        """Config for one channel of a multi-channel run."""
        return replace(self, levels=channel_levels, channels=1)
