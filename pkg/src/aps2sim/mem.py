"""Deep memory and caches: SDRAM timing, instruction cache, waveform cache.

SDRAM is a latency plus bandwidth abstraction: a request occupies the data
bus for bytes/rate, bursts are serialized in request order, and a request
completes at max(request + latency, end of previous burst) + burst.  No
protocol detail beyond that.

The instruction cache has two halves, both built from 128-instruction
(1 kB) lines:

  * a sequential circular window that tracks the program counter, keeping
    a few played lines behind and prefetching ahead, and
  * a small fully associative cache filled round-robin, and only by
    explicit PREFETCH instructions, for subroutines and branch targets.

The waveform cache is either one linear 128 ksample memory (everything
resident at start) or two 64 ksample pages in ping-pong mode where the
waveform engine's PREFETCH command refills the idle page.

Timing contract: every read returns (data, available_tick).  Hits are
available after the configured hit latency; the caller treats anything
later as a stall.  Caches start warm over their initial contents, which
stands in for configuration time before a sequence starts; every fill
after that is on the clock.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .clocks import SEQ_CLOCK_TICKS, ns_to_ticks
from .isa import CACHE_LINE_INSTRUCTIONS

__all__ = [
    "MemConfig",
    "CacheError",
    "CacheEvent",
    "Sdram",
    "InstructionCache",
    "WaveformCache",
    "page_fill_ticks",
    "write_cache_trace",
]


@dataclass
class MemConfig:
    line_instructions: int = CACHE_LINE_INSTRUCTIONS
    window_ahead: int = 4
    window_behind: int = 2
    assoc_lines: int = 8
    hit_latency_clocks: int = 2
    sdram_latency_ns: float = 200.0
    sdram_rate_bytes_per_s: float = 1.45e9
    wave_mode: str = "single"          # "single" or "pingpong"
    wave_page_samples: int = 65536
    ideal: bool = False                # every fetch hits, for comparison runs

    @property
    def hit_latency_ticks(self) -> int:
        return self.hit_latency_clocks * SEQ_CLOCK_TICKS

    @property
    def line_bytes(self) -> int:
        return self.line_instructions * 8


class CacheError(RuntimeError):
    """Fatal access outside the resident region, or a bad mode."""


@dataclass(frozen=True)
class CacheEvent:
    tick: int
    kind: str
    addr: int
    line: int
    stall: int = 0


class Sdram:
    """Serialized burst bus with a fixed first-word latency."""

    def __init__(self, cfg: MemConfig):
        self.latency_ticks = ns_to_ticks(cfg.sdram_latency_ns)
        self.ticks_per_byte = 6e9 / cfg.sdram_rate_bytes_per_s
        self.busy_until = 0

    def burst_ticks(self, nbytes: int) -> int:
        return math.ceil(nbytes * self.ticks_per_byte)

    def request(self, nbytes: int, tick: int) -> int:
        """Schedule a transfer; returns the completion tick."""
        burst = self.burst_ticks(nbytes)
        start = max(tick + self.latency_ticks, self.busy_until)
        self.busy_until = start + burst
        return self.busy_until


def page_fill_ticks(cfg: MemConfig) -> int:
    """Idle-bus fill time for one waveform page (4 bytes per sample)."""
    sdram = Sdram(cfg)
    return sdram.request(4 * cfg.wave_page_samples, 0)


class InstructionCache:
    def __init__(self, cfg: MemConfig, words: list[int], sdram: Sdram,
                 trace: bool = True):
        self.cfg = cfg
        self.words = words
        self.sdram = sdram
        self.n_lines = max(1, -(-len(words) // cfg.line_instructions))
        self.base_line = 0
        # line -> fill completion tick; initial window is warm
        self.window: dict[int, int] = {
            ln: 0 for ln in range(min(cfg.window_ahead + 1, self.n_lines))}
        self.assoc: dict[int, int] = {}
        self.assoc_order: list[int] = []     # round-robin victim order
        self.rr = 0
        self.events: list[CacheEvent] = []
        self.trace = trace
        self.hits = 0
        self.misses = 0

    def _log(self, tick, kind, addr, line, stall=0):
        if self.trace:
            self.events.append(CacheEvent(tick, kind, addr, line, stall))

    def _schedule_window(self, line: int, tick: int) -> None:
        """Re-center the window on line, scheduling any missing fills."""
        self.base_line = line
        lo = max(0, line - self.cfg.window_behind)
        hi = min(self.n_lines - 1, line + self.cfg.window_ahead)
        for ln in list(self.window):
            if not lo <= ln <= hi:
                del self.window[ln]
        for ln in range(line, hi + 1):
            if ln not in self.window:
                self.window[ln] = self.sdram.request(self.cfg.line_bytes, tick)

    def read_instruction(self, addr: int, tick: int) -> tuple[int, int]:
        """Fetch one word; returns (word, available_tick)."""
        if not 0 <= addr < len(self.words):
            raise CacheError(f"instruction fetch {addr} beyond program end")
        line = addr // self.cfg.line_instructions
        hit_at = tick + self.cfg.hit_latency_ticks
        if self.cfg.ideal:
            self.hits += 1
            return self.words[addr], hit_at

        if line in self.window:
            if line > self.base_line:
                self._schedule_window(line, tick)
            fill_done = self.window[line]
            self.hits += 1
            if fill_done > tick:
                self._log(tick, "window_wait", addr, line,
                          stall=fill_done - tick)
                return self.words[addr], fill_done + self.cfg.hit_latency_ticks
            self._log(tick, "hit", addr, line)
            return self.words[addr], hit_at
        if line in self.assoc:
            fill_done = self.assoc[line]
            self.hits += 1
            if fill_done > tick:
                self._log(tick, "assoc_wait", addr, line,
                          stall=fill_done - tick)
                return self.words[addr], fill_done + self.cfg.hit_latency_ticks
            self._log(tick, "hit", addr, line)
            return self.words[addr], hit_at

        # demand miss: the window re-centers here and the demanded line
        # fill is on the critical path
        self.misses += 1
        self._schedule_window(line, tick)
        fill_done = self.window[line]
        self._log(tick, "miss", addr, line, stall=fill_done - tick)
        return self.words[addr], fill_done + self.cfg.hit_latency_ticks

    def prefetch_line(self, addr: int, tick: int) -> None:
        """Explicit PREFETCH: round-robin fill of the associative half."""
        if self.cfg.ideal:
            return
        line = addr // self.cfg.line_instructions
        if line in self.assoc:
            self._log(tick, "prefetch_dup", addr, line)
            return
        if len(self.assoc_order) < self.cfg.assoc_lines:
            self.assoc_order.append(line)
        else:
            victim = self.assoc_order[self.rr]
            del self.assoc[victim]
            self.assoc_order[self.rr] = line
            self.rr = (self.rr + 1) % self.cfg.assoc_lines
        self.assoc[line] = self.sdram.request(self.cfg.line_bytes, tick)
        self._log(tick, "prefetch", addr, line)

    def stall_events(self) -> list[CacheEvent]:
        return [e for e in self.events if e.stall > 0]


class WaveformCache:
    def __init__(self, cfg: MemConfig, wave_mem: np.ndarray, sdram: Sdram,
                 trace: bool = True):
        self.cfg = cfg
        self.mem = wave_mem
        self.sdram = sdram
        self.events: list[CacheEvent] = []
        self.trace = trace
        page = cfg.wave_page_samples
        self.pending_fill: tuple[int, int] | None = None
        if cfg.wave_mode == "single":
            limit = 2 * page
            if len(wave_mem) > limit:
                raise CacheError(
                    f"waveform memory {len(wave_mem)} exceeds {limit} samples "
                    "in single mode")
            self.active_page = 0
        elif cfg.wave_mode == "pingpong":
            # both pages warm at start: page 0 active, page 1 staged
            self.slots = [(0, 0), (1, 0)]      # (sdram page, fill done tick)
            self.active_slot = 0
        else:
            raise CacheError(f"unknown waveform cache mode {cfg.wave_mode!r}")

    def _log(self, tick, kind, addr, line, stall=0):
        if self.trace:
            self.events.append(CacheEvent(tick, kind, addr, line, stall))

    def read(self, addr: int, count: int, tick: int) -> np.ndarray:
        """Page-local read of count samples; resident data never stalls."""
        page = self.cfg.wave_page_samples
        if self.cfg.wave_mode == "single":
            if addr + count > min(len(self.mem), 2 * page):
                raise CacheError(
                    f"waveform read [{addr}, {addr + count}) beyond resident "
                    "memory")
            return self.mem[addr:addr + count]
        if addr + count > page:
            raise CacheError(
                f"waveform read [{addr}, {addr + count}) crosses the page "
                "boundary in ping-pong mode")
        sdram_page, _ = self.slots[self.active_slot]
        base = sdram_page * page
        if base + addr + count > len(self.mem):
            raise CacheError(
                f"waveform read [{addr}, {addr + count}) beyond page "
                f"{sdram_page} contents")
        return self.mem[base + addr:base + addr + count]

    def begin_prefetch(self, page_index: int, tick: int) -> None:
        """Start filling the idle page with the given deep-memory page."""
        if self.cfg.wave_mode == "single":
            raise CacheError("waveform PREFETCH is invalid in single mode")
        nbytes = 4 * self.cfg.wave_page_samples
        done = self.sdram.request(nbytes, tick)
        idle = 1 - self.active_slot
        self.slots[idle] = (page_index, done)
        self.pending_fill = (idle, done)
        self._log(tick, "wf_fill", page_index, idle)

    def complete_swap(self, tick: int) -> int:
        """Swap to the freshly filled page; returns the actual swap tick."""
        if self.cfg.wave_mode == "single":
            raise CacheError("waveform PREFETCH is invalid in single mode")
        if self.pending_fill is None:
            raise CacheError("page swap with no prefetch in flight")
        idle, done = self.pending_fill
        self.pending_fill = None
        self.active_slot = idle
        if done > tick:
            self._log(tick, "wf_swap_stall", self.slots[idle][0], idle,
                      stall=done - tick)
            return done
        self._log(tick, "wf_swap", self.slots[idle][0], idle)
        return tick

    def stall_events(self) -> list[CacheEvent]:
        return [e for e in self.events if e.stall > 0]


def write_cache_trace(path, *caches) -> None:
    """All cache events merged in tick order, one JSON object per line."""
    events = sorted((e for c in caches for e in c.events),
                    key=lambda e: (e.tick, e.kind))
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps({"tick": e.tick, "kind": e.kind,
                                 "addr": e.addr, "line": e.line,
                                 "stall": e.stall}) + "\n")
