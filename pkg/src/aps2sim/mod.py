"""Modulation engine: NCO bank, phase bookkeeping, mixer correction.

Each NCO free-runs on the analog sample clock (one increment per 5-tick
sample period) whether or not it is selected, so applied phase at tick t
is always

    phase(t) = accumulated(t) + offset + frame        (turns, mod 1)

with accumulated(t) advancing from the last RESET_PHASE epoch.  The
accumulators live at the rotation stage, a fixed pipeline ahead of the
output plane, so a sample emitted at tick T carries the phase evaluated
at T - pipeline_ticks.  A RESET_PHASE processed on a trigger edge
therefore gives exactly zero accumulated phase and frame on the first
post-trigger output sample.

Command stream semantics: commands are consumed in order and bind by
stream position, the running count of waveform samples dispatched before
the command.  A MODULATE rotates the next `count` samples from its
position onward (gaps appear in time but not in the binding), so a
window always covers the plays that follow it in the program, never
samples already in flight down the pipeline.  Phase commands latch at
the next boundary: the end of an open MODULATE window, the trigger edge
if the stream sits at a WAIT, or directly before the next sample
otherwise.  Samples outside any window pass through unrotated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clocks import ANALOG_SAMPLE_TICKS
from .isa import NUM_NCOS, ModAction, Modulator, turns_from_phase_word

__all__ = ["ModConfig", "NcoBank", "ModEngine", "MixerCorrector"]

TWO_PI = 2.0 * np.pi


@dataclass
class ModConfig:
    num_ncos: int = NUM_NCOS
    mixer_matrix: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 1.0)
    dc_offset_i: float = 0.0
    dc_offset_q: float = 0.0
    dac_bits: int | None = None      # optional output quantization, e.g. 14
    pipeline_ticks: int = 0          # rotation stage to output plane delay


class _Nco:
    __slots__ = ("inc", "acc", "ref_tick", "offset", "frame")

    def __init__(self) -> None:
        self.inc = 0.0          # turns per analog sample
        self.acc = 0.0          # turns accumulated up to ref_tick
        self.ref_tick = 0
        self.offset = 0.0
        self.frame = 0.0

    def advance(self, tick: int) -> None:
        self.acc += self.inc * (tick - self.ref_tick) / ANALOG_SAMPLE_TICKS
        self.ref_tick = tick

    def phase_turns(self, ticks: np.ndarray) -> np.ndarray:
        rel = (ticks - self.ref_tick) / ANALOG_SAMPLE_TICKS
        return self.acc + self.inc * rel + self.offset + self.frame


class NcoBank:
    def __init__(self, cfg: ModConfig):
        self.ncos = [_Nco() for _ in range(cfg.num_ncos)]
        self.pipeline_ticks = cfg.pipeline_ticks

    def _each(self, mask: int):
        for k, nco in enumerate(self.ncos):
            if mask & (1 << k):
                yield nco

    def reset(self, mask: int, tick: int) -> None:
        for nco in self._each(mask):
            nco.acc = 0.0
            nco.frame = 0.0
            nco.ref_tick = tick

    def set_offset(self, mask: int, turns: float) -> None:
        for nco in self._each(mask):
            nco.offset = turns

    def set_increment(self, mask: int, turns_per_sample: float, tick: int) -> None:
        for nco in self._each(mask):
            nco.advance(tick)
            nco.inc = turns_per_sample

    def update_frame(self, mask: int, turns: float) -> None:
        for nco in self._each(mask):
            nco.frame = (nco.frame + turns) % 1.0

    def rotation(self, nco_index: int, ticks: np.ndarray) -> np.ndarray:
        """Factors for samples emitted at ticks (rotation plane shifted)."""
        plane = np.asarray(ticks) - self.pipeline_ticks
        phase = self.ncos[nco_index].phase_turns(plane)
        return np.exp(1j * TWO_PI * phase)


@dataclass
class ModEvent:
    tick: int
    kind: str
    detail: dict = field(default_factory=dict)


class ModEngine:
    """Resolves the modulator command stream against the sample schedule."""

    def __init__(self, cfg: ModConfig):
        self.cfg = cfg
        self.bank = NcoBank(cfg)
        self.queue: list[tuple[Modulator, int, int]] = []
        self.events: list[ModEvent] = []

    def submit(self, md: Modulator, tick: int, pos: int = 0) -> None:
        """Queue a command dispatched at tick with pos samples ahead of it."""
        self.queue.append((md, tick, pos))

    def pending_commands(self) -> int:
        return len(self.queue)

    def resolve(self, runs: list[np.ndarray],
                trigger_edges: list[int]) -> list[np.ndarray]:
        """Rotation factors for each run of sample ticks, in stream order."""
        ticks = (np.concatenate(runs) if runs
                 else np.zeros(0, dtype=np.int64))
        total = len(ticks)
        flat = np.ones(total, dtype=np.complex128)
        edges = iter(trigger_edges)
        pipe = self.cfg.pipeline_ticks
        cursor_pos = 0          # stream position the next command may bind
        cursor_tick = 0         # output-plane floor once samples ran out

        for md, dispatch, dispatch_pos in self.queue:
            pos = max(dispatch_pos, cursor_pos)
            if md.action is ModAction.WAIT:
                edge = next(edges, None)
                if edge is None:
                    break        # parked at WAIT: nothing further applies
                cursor_tick = max(cursor_tick, edge)
                cursor_pos = pos
            elif md.action is ModAction.SYNC:
                cursor_pos = pos
            elif md.action is ModAction.MODULATE:
                end = pos + md.count
                bound = min(end, total)
                if bound > pos:
                    flat[pos:bound] = self.bank.rotation(md.nco,
                                                         ticks[pos:bound])
                    cursor_tick = max(cursor_tick,
                                      int(ticks[bound - 1])
                                      + ANALOG_SAMPLE_TICKS)
                if end > total:
                    self.events.append(ModEvent(
                        cursor_tick, "modulate_underfilled",
                        {"nco": md.nco, "missing": end - total}))
                cursor_pos = end
            else:
                # phase commands latch on the rotation-plane clock, just
                # before the sample at their stream position
                if pos < total:
                    at = int(ticks[pos]) - pipe
                else:
                    at = max(cursor_tick, dispatch) - pipe
                self._apply(md, at)
                cursor_pos = pos

        bounds = np.cumsum([0] + [len(r) for r in runs])
        return [flat[bounds[k]:bounds[k + 1]] for k in range(len(runs))]

    def _apply(self, md: Modulator, tick: int) -> None:
        turns = turns_from_phase_word(md.phase_word)
        if md.action is ModAction.RESET_PHASE:
            self.bank.reset(md.nco, tick)
            self.events.append(ModEvent(tick, "reset_phase", {"mask": md.nco}))
        elif md.action is ModAction.SET_PHASE_OFFSET:
            self.bank.set_offset(md.nco, turns)
        elif md.action is ModAction.SET_PHASE_INCREMENT:
            self.bank.set_increment(md.nco, turns, tick)
        elif md.action is ModAction.UPDATE_FRAME:
            self.bank.update_frame(md.nco, turns)


class MixerCorrector:
    """2x2 amplitude/phase correction with DC offsets at the DAC plane."""

    def __init__(self, cfg: ModConfig):
        a, b, c, d = cfg.mixer_matrix
        self.matrix = np.array([[a, b], [c, d]])
        self.offsets = np.array([cfg.dc_offset_i, cfg.dc_offset_q])
        self.dac_bits = cfg.dac_bits
        self.saturations = 0

    def apply(self, iq: np.ndarray) -> np.ndarray:
        """Correct a complex sample array; saturates into [-1, 1)."""
        pair = np.stack([iq.real, iq.imag], axis=-1)
        out = pair @ self.matrix.T + self.offsets
        top = 32767.0 / 32768.0
        clipped = np.clip(out, -1.0, top)
        self.saturations += int(np.sum(clipped != out))
        if self.dac_bits is not None:
            scale = float(1 << (self.dac_bits - 1))
            clipped = np.round(clipped * scale) / scale
            clipped = np.clip(clipped, -1.0, top)
        return clipped[..., 0] + 1j * clipped[..., 1]
