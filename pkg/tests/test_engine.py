"""Sequencer timing and semantics against hand-computed schedules."""

import numpy as np
import pytest

from aps2sim.engine import DeadlockError, EngineConfig, Sequencer
from aps2sim.isa import (
    CmpOp,
    Instruction,
    Marker,
    MarkerAction,
    ModAction,
    Modulator,
    Opcode,
    ProgramImage,
    Waveform,
    WfAction,
    encode,
    turns_from_phase_word,
)
from aps2sim.mem import MemConfig

RAMP = np.stack([np.arange(16, dtype=np.int16) * 100,
                 -np.arange(16, dtype=np.int16) * 100], axis=1)


def image(instrs, wave=RAMP):
    return ProgramImage([encode(i) for i in instrs], wave)


def play(addr, count, ta=False):
    return Instruction(Opcode.WAVEFORM,
                       Waveform(WfAction.PLAY, addr=addr, count=count, ta=ta))


def wave_values(addr, count):
    raw = RAMP[addr:addr + count]
    return (raw[:, 0].astype(np.float64)
            + 1j * raw[:, 1].astype(np.float64)) / 32768.0


def test_trigger_sets_first_output_tick():
    prog = image([Instruction(Opcode.WAIT), play(0, 8)])
    trace = Sequencer(prog).run_simple(triggers=[1000])
    assert trace.analog[0].start == 1000 + 180
    # an off-grid trigger latches on the next sequencer clock edge
    trace = Sequencer(prog).run_simple(triggers=[1003])
    assert trace.analog[0].start == 1020 + 180


def test_all_engines_resume_on_the_same_edge():
    prog = image([
        Instruction(Opcode.WAIT),
        play(0, 8),
        Instruction(Opcode.MARKER, Marker(MarkerAction.PLAY, channel=0,
                                          state=1, count=2, last_word=0b1111)),
        Instruction(Opcode.MARKER, Marker(MarkerAction.PLAY, channel=3,
                                          state=1, count=1, last_word=0b1000)),
    ])
    trace = Sequencer(prog).run_simple(triggers=[2000])
    assert trace.analog[0].start == 2180
    assert trace.markers[0][0].start == 2180
    assert trace.markers[3][0].start == 2180


def test_back_to_back_plays_are_gapless():
    trace = Sequencer(image([play(0, 8), play(8, 8)])).run_simple()
    assert [r.start for r in trace.analog] == [180, 220]
    assert trace.analog[0].end == trace.analog[1].start
    assert not [e for e in trace.events if e.kind == "underrun"]
    assert np.array_equal(trace.analog_values(),
                          np.concatenate([wave_values(0, 8), wave_values(8, 8)]))


def test_minimum_command_rate_forces_gaps_for_short_pulses():
    # 4-sample pulses last 20 ticks but a new command starts every 40
    trace = Sequencer(image([play(0, 4)] * 4)).run_simple()
    starts = [r.start for r in trace.analog]
    assert starts == [180, 220, 260, 300]
    gaps = [e for e in trace.events if e.kind == "underrun"]
    assert len(gaps) == 3 and all(e.detail["gap"] == 20 for e in gaps)


def test_repeat_is_taken_and_costs_the_flush():
    prog = image([
        Instruction(Opcode.LOAD_REPEAT, value=2),
        play(0, 8),
        Instruction(Opcode.REPEAT, addr=1),
    ])
    trace = Sequencer(prog).run_simple()
    # the 16-clock flush dominates the 8-sample body: visible gaps
    assert [r.start for r in trace.analog] == [200, 560, 920]
    assert len(trace.analog) == 3


def test_lookahead_hides_the_flush_behind_long_pulses():
    # 96-sample body: 480 ticks of playback vs 360 ticks of decode per lap
    prog = image([
        Instruction(Opcode.LOAD_REPEAT, value=2),
        play(0, 96, ta=True),
        Instruction(Opcode.REPEAT, addr=1),
    ])
    trace = Sequencer(prog).run_simple()
    assert [r.start for r in trace.analog] == [200, 680, 1160]
    assert [e for e in trace.events if e.kind == "underrun"] == []


def test_no_lookahead_mode_same_values_worse_timing():
    instrs = [
        Instruction(Opcode.LOAD_REPEAT, value=2),
        play(0, 96, ta=True),
        Instruction(Opcode.REPEAT, addr=1),
    ]
    ahead = Sequencer(image(instrs)).run_simple()
    serial = Sequencer(image(instrs),
                       EngineConfig(lookahead=False)).run_simple()
    assert np.array_equal(ahead.analog_values(), serial.analog_values())
    assert [e for e in ahead.events if e.kind == "underrun"] == []
    assert len([e for e in serial.events if e.kind == "underrun"]) == 2


def test_call_restores_the_repeat_register():
    # outer 3 runs x inner 4 runs = 12 bodies
    prog = image([
        Instruction(Opcode.GOTO, addr=5),
        Instruction(Opcode.LOAD_REPEAT, value=3),           # sub
        play(0, 8),
        Instruction(Opcode.REPEAT, addr=2),
        Instruction(Opcode.RETURN),
        Instruction(Opcode.LOAD_REPEAT, value=2),           # main
        Instruction(Opcode.CALL, addr=1),
        Instruction(Opcode.REPEAT, addr=6),
    ])
    seq = Sequencer(prog)
    trace = seq.run_simple()
    assert len(trace.analog) == 12
    assert seq.halted and not seq.stack


def test_call_stack_overflow_traps():
    prog = image([Instruction(Opcode.CALL, addr=0)])
    seq = Sequencer(prog, EngineConfig(stack_depth=16))
    assert seq.run_until_blocked() == "halted"
    assert seq.trap_reason == "call stack overflow"
    assert len(seq.stack) == 16


def test_return_without_call_traps():
    seq = Sequencer(image([Instruction(Opcode.RETURN)]))
    seq.run_until_blocked()
    assert seq.trap_reason == "RETURN with empty call stack"


def test_load_cmp_blocks_then_latches_on_a_clock_edge():
    instrs = [
        Instruction(Opcode.LOAD_CMP),
        Instruction(Opcode.CMP, cmp_op=CmpOp.EQ, mask=3),
        Instruction(Opcode.GOTO, addr=4, conditional=True),
        play(0, 8),
        play(8, 8),
    ]
    seq = Sequencer(image(instrs))
    assert seq.run_until_blocked() == "need_steering"
    seq.deliver_steering(3, 95)       # usable at the 100-tick edge
    trace = seq.run_simple()
    # latch at 100, CMP at 120, taken branch at 140, play decoded at 480
    assert [r.start for r in trace.analog] == [660]
    assert np.array_equal(trace.analog_values(), wave_values(8, 8))

    seq = Sequencer(image(instrs))
    seq.run_until_blocked()
    seq.deliver_steering(7, 95)       # comparison fails, no branch
    trace = seq.run_simple()
    assert [r.start for r in trace.analog] == [340, 380]
    assert np.array_equal(
        trace.analog_values(),
        np.concatenate([wave_values(0, 8), wave_values(8, 8)]))


def test_sync_fence_waits_for_drain():
    prog = image([
        play(0, 96, ta=True),
        Instruction(Opcode.SYNC),
        play(0, 8),
    ])
    trace = Sequencer(prog).run_simple()
    # drain at 660, decode resumes at 680, second stream starts fresh
    assert [r.start for r in trace.analog] == [180, 860]
    assert [e for e in trace.events if e.kind == "underrun"] == []


def test_queue_starvation_versus_adequate_depth():
    instrs = [play(0, 8)] * 20
    shallow = Sequencer(image(instrs), EngineConfig(queue_depth=4)).run_simple()
    deep = Sequencer(image(instrs), EngineConfig(queue_depth=8)).run_simple()
    # 4 x 40 ticks of buffered work cannot cover the 180-tick pipeline
    assert len([e for e in shallow.events if e.kind == "underrun"]) > 0
    assert [e for e in deep.events if e.kind == "underrun"] == []
    assert len([e for e in deep.events if e.kind == "queue_full"]) > 0
    assert np.array_equal(shallow.analog_values(), deep.analog_values())


def test_marker_last_word_places_edges_on_the_sample_grid():
    def run(count, last):
        prog = image([Instruction(Opcode.MARKER, Marker(
            MarkerAction.PLAY, channel=2, state=1, count=count,
            last_word=last))])
        return Sequencer(prog).run_simple().marker_edges(2)

    assert run(1, 0b1000) == [(180, 1), (185, 0)]
    assert run(1, 0b1100) == [(180, 1), (190, 0)]
    assert run(1, 0b1110) == [(180, 1), (195, 0)]
    assert run(1, 0b1111) == [(180, 1), (200, 0)]
    assert run(2, 0b1100) == [(180, 1), (210, 0)]


def test_unclaimed_trigger_is_dropped_with_a_diagnostic():
    seq = Sequencer(image([play(0, 8)]))
    seq.run_until_blocked()
    seq.deliver_trigger(500)
    assert any(e.kind == "trigger_dropped" for e in seq.events)


def test_deadlock_without_scheduled_trigger():
    with pytest.raises(DeadlockError):
        Sequencer(image([Instruction(Opcode.WAIT), play(0, 8)])).run_simple()


def test_time_based_phase_on_a_gapless_stream():
    inc_word = 0x0000_1000_0000_0000
    prog = image([
        Instruction(Opcode.MODULATOR, Modulator(
            ModAction.SET_PHASE_INCREMENT, nco=0b0001, phase_word=inc_word)),
        Instruction(Opcode.MODULATOR, Modulator(
            ModAction.MODULATE, nco=0, count=24)),
        play(0, 8), play(0, 8), play(0, 8),
    ])
    trace = Sequencer(prog).run_simple()
    ticks = trace.analog_ticks()
    assert np.array_equal(ticks, 220 + 5 * np.arange(24))
    inc = turns_from_phase_word(inc_word)
    # the increment latches right before the first bound sample, so the
    # accumulated phase is inc times the per-sample index from there
    expected = wave_values(0, 8).tolist() * 3 \
        * np.exp(2j * np.pi * inc * np.arange(24))
    assert np.allclose(trace.analog_values(), expected, atol=1e-12)


def test_prefetch_hint_removes_the_far_jump_stall():
    n_plays = 80
    far = 1 + n_plays + 1 + 600      # into the sixth cache line
    filler = Instruction(Opcode.CMP, cmp_op=CmpOp.EQ, mask=0)

    def program(with_hint):
        head = [Instruction(Opcode.PREFETCH, addr=far)] if with_hint else []
        body = head + [play(0, 96, ta=True)] * n_plays
        body.append(Instruction(Opcode.GOTO, addr=far + len(head) - 1))
        while len(body) < far + len(head) - 1:
            body.append(filler)
        body.append(play(0, 8))
        return image(body)

    plain = Sequencer(program(False))
    t_plain = plain.run_simple()
    hinted = Sequencer(program(True))
    t_hint = hinted.run_simple()

    assert len(plain.cache_stall_events()) > 0
    assert len(hinted.cache_stall_events()) == 0
    # lookahead keeps the output gapless either way
    assert [e for e in t_plain.events if e.kind == "underrun"] == []
    assert np.array_equal(t_plain.analog_values(), t_hint.analog_values())


def test_waveform_page_swap_waits_for_the_fill():
    wave = np.stack([np.arange(32, dtype=np.int16),
                     np.zeros(32, dtype=np.int16)], axis=1)
    prog = ProgramImage([encode(i) for i in [
        play(0, 16),
        Instruction(Opcode.WAVEFORM, Waveform(WfAction.PREFETCH, addr=1)),
        play(0, 16),
    ]], wave)
    cfg = MemConfig(wave_mode="pingpong", wave_page_samples=16)
    trace = Sequencer(prog, mem_cfg=cfg).run_simple()
    assert [r.start for r in trace.analog] == [180, 1500]
    assert np.array_equal(trace.analog[0].data.real * 32768,
                          np.arange(16))
    assert np.array_equal(trace.analog[1].data.real * 32768,
                          np.arange(16, 32))
    assert any(e.kind == "swap_stall" for e in trace.events)


def test_halt_only_after_pending_wait_resolves():
    seq = Sequencer(image([Instruction(Opcode.WAIT), play(0, 8)]))
    assert seq.run_until_blocked() == "need_trigger"
    seq.deliver_trigger(400)
    assert seq.run_until_blocked() == "halted"
    assert Sequencer(image([play(0, 8)])).run_until_blocked() == "halted"
