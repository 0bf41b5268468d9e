"""Cycle-level model of a fault-tolerant FP16 matrix engine.

The engine computes Z = Y + X * W over binary16 operands with an L x H
array of fused multiply-add units fed from a word-addressed scratchpad.
Execution is organized in waves: a wave loads one block of X rows, then
walks the output columns in chunks of H, and each chunk preloads Y,
accumulates over k, drains the result through the P-deep unit pipeline
and writes Z back.

Two operating modes share the datapath:

* performance: every engine row computes a distinct output row.
* fault_tolerant: adjacent row pairs (2r, 2r+1) compute the same output
  row from independently delivered operands; a checker compares the pair
  before the single, filtered Z write.  Each X-row block takes two fixed
  half-passes, so a run costs about twice the performance-mode cycles.

Protection is build-variant dependent:

* baseline: no checkers, raw memory, performance mode only.
* data_only: SECDED memory, paired rows with checker and write filter,
  and a parity bit carried next to every broadcast weight.
* full: data_only plus duplicated control state compared in lockstep each
  cycle (sequencer, streamer address registers, buffer bookkeeping) and a
  parity-checked configuration register file.

Detected faults set a sticky status flag, raise a two-cycle interrupt
pulse and abort the run before the affected beat can commit.  A watchdog
bounds every run at watchdog_factor times the nominal cycle count.

The simulator offers two execution granularities with identical visible
behavior: a per-cycle reference path, and a segment-skip path that fast
forwards through stretches proven to match a recorded fault-free trace.
The skip path exists purely for throughput in injection campaigns and is
held to the reference path by equivalence tests.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .ecc import EccStatus, parity_bit, regfile_parity
from .fp16 import fp16_fma
from .memory import Tcdm

__all__ = [
    "Mode",
    "Variant",
    "RunStatus",
    "EngineConfig",
    "JobDescriptor",
    "ConfigurationError",
    "EngineBusyError",
    "ArmedFault",
    "RunOutcome",
    "NominalTrace",
    "Engine",
    "FAULT_FLAGS",
    "IRQ_PULSE_CYCLES",
    "nominal_cycles",
    "default_layout",
    "golden_matmul",
    "check_row_pair",
    "record_nominal_trace",
]


class Mode(enum.Enum):
    PERFORMANCE = "performance"
    FAULT_TOLERANT = "fault_tolerant"


class Variant(enum.Enum):
    BASELINE = "baseline"
    DATA_ONLY = "data_only"
    FULL = "full"


class RunStatus(enum.Enum):
    COMPLETED = "completed"
    ABORTED_FAULT = "aborted_fault"
    TIMEOUT = "timeout"


FLAG_WEIGHT_PARITY = "weight_parity"
FLAG_ROW_PAIR = "row_pair_mismatch"
FLAG_FSM = "fsm_mismatch"
FLAG_REGFILE = "regfile_parity"
FLAG_ECC = "ecc_uncorrectable"

FAULT_FLAGS = (
    FLAG_WEIGHT_PARITY,
    FLAG_ROW_PAIR,
    FLAG_FSM,
    FLAG_REGFILE,
    FLAG_ECC,
)

IRQ_PULSE_CYCLES = 2

# Fault categories.  Wire categories flip a value in flight for one cycle;
# state categories flip a stored bit that stays flipped until overwritten.
CAT_X = "x_data"
CAT_Y = "y_data"
CAT_W = "w_broadcast"
CAT_Z = "z_writeback"
CAT_PIPE = "ce_pipeline_state"
CAT_STREAMER = "streamer_ctrl"
CAT_BUFFER = "buffer_ctrl"
CAT_FSM = "fsm_state"
CAT_REGFILE = "regfile_bit"
CAT_CHECKER = "checker_input"
CAT_IRQ = "interrupt_wire"
CAT_RESP = "mem_response_bit"

STATE_CATEGORIES = frozenset({CAT_PIPE, CAT_STREAMER, CAT_BUFFER, CAT_FSM, CAT_REGFILE})

# Sequencer phases.  All 3-bit encodings are architecturally reachable, so
# a flipped phase register lands somewhere defined rather than crashing
# the model: a jump to IDLE hangs until the watchdog, a jump to FINISH
# ends the run early with partial results, and so on.
PH_IDLE = 0
PH_SETUP = 1
PH_XLOAD = 2
PH_YLOAD = 3
PH_COMPUTE = 4
PH_DRAIN = 5
PH_WRITEBACK = 6
PH_FINISH = 7

# Sequencer register file: (phase, wave, chunk, k, drain, xli, done) with
# bit widths 3, 12, 8, 8, 4, 8, 1 packed in that order for fault targeting.
_FSM_WIDTHS = (3, 12, 8, 8, 4, 8, 1)
FSM_STATE_BITS = sum(_FSM_WIDTHS)  # 44
_FSM_OFFSETS = []
_acc = 0
for _w in _FSM_WIDTHS:
    _FSM_OFFSETS.append(_acc)
    _acc += _w

# Streamer address registers: x_base, y_base, z_base, w_ptr, 24 bits each.
STREAMER_REG_BITS = 24
STREAMER_STATE_BITS = 4 * STREAMER_REG_BITS  # 96
_ADDR_MASK = (1 << STREAMER_REG_BITS) - 1

# Buffer bookkeeping: x write pointer (8 bits) and the W-buffer valid flag.
BUFFER_STATE_BITS = 9

REGFILE_WORDS_PLAIN = 8
REGFILE_WORDS_FULL = 9  # plus the parity word
RF_M, RF_N, RF_K, RF_X, RF_W, RF_Y, RF_Z, RF_FLAGS, RF_PARITY = range(9)

_MAX_K = 255
_MAX_CHUNKS = 255
_MAX_WAVES = 4095


class ConfigurationError(ValueError):
    """A config or job was rejected before any cycle was executed."""


class EngineBusyError(RuntimeError):
    """An operation that requires an idle engine was issued mid-run."""


@dataclass(frozen=True)
class EngineConfig:
    """Static build parameters of the engine instance."""

    L: int = 12
    H: int = 4
    P: int = 3
    watchdog_factor: float = 4.0

    def __post_init__(self):
        if self.L < 1 or self.H < 1 or self.P < 1:
            raise ConfigurationError("L, H and P must all be at least 1")
        if self.watchdog_factor <= 1.0:
            raise ConfigurationError("watchdog_factor must exceed 1.0")


@dataclass(frozen=True)
class JobDescriptor:
    """One matrix job: dimensions, operand base addresses and mode.

    parity_word is the XOR fold of the eight configuration words as
    computed by the host; None means "let the model compute it".  Builds
    without regfile protection ignore it.
    """

    M: int
    N: int
    K: int
    x_addr: int
    w_addr: int
    y_addr: int
    z_addr: int
    mode: Mode = Mode.FAULT_TOLERANT
    parity_word: int | None = None


@dataclass(frozen=True)
class ArmedFault:
    """A single-event transient scheduled against one run.

    category selects the injection point class, index narrows it to one
    site (layout is category specific), bit is the bit position inside
    that site and cycle is the global cycle at which the event lands.
    Wire categories act for exactly that cycle; state categories flip a
    stored bit that persists until the machine overwrites it.
    """

    category: str
    index: tuple
    bit: int
    cycle: int


@dataclass
class RunOutcome:
    status: RunStatus
    cycles: int
    z: tuple | None
    fault_flags: dict
    first_fault_cycle: int | None
    first_detector: str | None
    interrupt_pulses: tuple
    irq_observed: frozenset
    # True when some write landed outside the job's Z region (only possible
    # with corrupted addressing); rerunning on the same memory is then no
    # longer equivalent to a fresh run, so retries must not fast-forward.
    stray_writes: bool = False

    @property
    def completed(self) -> bool:
        return self.status is RunStatus.COMPLETED


def _words_per_row(n: int) -> int:
    return (n + 1) // 2


def nominal_cycles(cfg: EngineConfig, M: int, N: int, K: int, mode: Mode) -> int:
    """Closed-form cycle count of a fault-free run.

    Setup and finish cost one cycle each.  Every wave streams in its X
    block (one cycle per packed word) and then runs ceil(N/H) chunks of
    K + P + 1 cycles (Y preload, K accumulate steps, P - 1 drain shifts,
    one check-and-write beat).  Fault-tolerant mode always sequences two
    half-passes per X block, even when the second half is empty, which
    pins the mode cycle ratio near two for every M.
    """
    blocks = -(-M // cfg.L)
    waves = blocks * 2 if mode is Mode.FAULT_TOLERANT else blocks
    chunks = -(-N // cfg.H)
    xwords = _words_per_row(K)
    return 1 + waves * (xwords + chunks * (K + cfg.P + 1)) + 1


def default_layout(M: int, N: int, K: int, base: int = 0) -> dict:
    """Pack the four operand regions back to back starting at base."""
    xw, ww, yw = _words_per_row(K), _words_per_row(N), _words_per_row(N)
    x_addr = base
    w_addr = x_addr + M * xw
    y_addr = w_addr + K * ww
    z_addr = y_addr + M * yw
    return {
        "x_addr": x_addr,
        "w_addr": w_addr,
        "y_addr": y_addr,
        "z_addr": z_addr,
        "capacity": z_addr + M * yw,
    }


def golden_matmul(x_rows, w_rows, y_rows) -> tuple:
    """Reference Z = Y + X * W with the engine's accumulation order.

    Each output element is a fused multiply-add chain over k in ascending
    order, which is exactly what one compute unit performs.
    """
    M = len(x_rows)
    K = len(w_rows)
    N = len(w_rows[0]) if K else 0
    out = []
    for i in range(M):
        xi = x_rows[i]
        yi = y_rows[i]
        row = []
        for j in range(N):
            acc = yi[j]
            for k in range(K):
                acc = fp16_fma(xi[k], w_rows[k][j], acc)
            row.append(acc)
        out.append(tuple(row))
    return tuple(out)


def check_row_pair(a, b) -> bool:
    """Bitwise comparison of two result vectors.

    Equality is on patterns: NaNs compare equal only when the patterns
    match, and +0 differs from -0.
    """
    return tuple(a) == tuple(b)


def _flip_fsm_bit(state: list, bit: int) -> None:
    for i, width in enumerate(_FSM_WIDTHS):
        off = _FSM_OFFSETS[i]
        if off <= bit < off + width:
            state[i] ^= 1 << (bit - off)
            return


def _control_step(s, waves, chunks, K, xwords, P):
    """One registered step of the sequencer.

    Loop exits compare counters for equality, so a corrupted counter can
    overshoot its bound and wrap; combined with the watchdog this is the
    organic source of hangs and truncated runs in unprotected builds.
    """
    ph = s[0]
    if ph == PH_IDLE:
        return s
    n = list(s)
    if ph == PH_SETUP:
        n[0] = PH_XLOAD
        n[1] = 0
        n[2] = 0
        n[5] = 0
    elif ph == PH_XLOAD:
        n[5] = (s[5] + 1) & 0xFF
        if n[5] == xwords:
            n[0] = PH_YLOAD
    elif ph == PH_YLOAD:
        n[0] = PH_COMPUTE
        n[3] = 0
    elif ph == PH_COMPUTE:
        n[3] = (s[3] + 1) & 0xFF
        if n[3] == K:
            if P > 1:
                n[0] = PH_DRAIN
                n[4] = 0
            else:
                n[0] = PH_WRITEBACK
    elif ph == PH_DRAIN:
        n[4] = (s[4] + 1) & 0xF
        if n[4] == P - 1:
            n[0] = PH_WRITEBACK
    elif ph == PH_WRITEBACK:
        n[2] = (s[2] + 1) & 0xFF
        if n[2] == chunks:
            n[1] = (s[1] + 1) & 0xFFF
            if n[1] == waves:
                n[0] = PH_FINISH
            else:
                n[0] = PH_XLOAD
                n[2] = 0
                n[5] = 0
        else:
            n[0] = PH_YLOAD
    elif ph == PH_FINISH:
        n[0] = PH_IDLE
        n[6] = 1
    return n


@dataclass(frozen=True, slots=True)
class _Segment:
    """One span of the nominal schedule with its externally visible effects."""

    kind: str  # setup | xload | chunk | finish
    start: int
    end: int
    wave: int
    chunk: int
    fsm: tuple
    strs: tuple
    bufs: tuple
    log_lo: int
    log_hi: int
    writes: tuple
    results: tuple | None
    xbuf_snap: tuple | None
    wbuf_add: tuple


@dataclass(frozen=True)
class NominalTrace:
    """Recorded fault-free run used to fast-forward injection runs.

    The segment replay bakes in the operand words that were resident when
    the trace was recorded, so the trace carries a snapshot of the x, w
    and y regions and a run quietly degrades to plain cycle stepping when
    the live memory disagrees with it.  The z region needs no snapshot:
    the schedule never reads a result word it has not already written in
    the same run, so its initial contents cannot influence anything.
    """

    key: tuple
    cycles: int
    log: tuple
    segments: tuple
    regfile: tuple
    operand_snapshot: tuple


def _trace_memory_matches(trace: NominalTrace, tcdm: Tcdm) -> bool:
    for lo, cells in trace.operand_snapshot:
        if tuple(tcdm.cells[lo:lo + len(cells)]) != cells:
            return False
    return True


def _trace_key(cfg: EngineConfig, job: JobDescriptor, variant: Variant) -> tuple:
    return (
        cfg.L,
        cfg.H,
        cfg.P,
        cfg.watchdog_factor,
        job.M,
        job.N,
        job.K,
        job.x_addr,
        job.w_addr,
        job.y_addr,
        job.z_addr,
        job.mode,
        variant,
    )


class _Run:
    """Mutable state of one run.  Created fresh by Engine for every run."""

    __slots__ = (
        "eng", "cfg", "variant", "mode", "ft", "protected", "job", "mem",
        "rf", "rf_dirty", "fsm", "fsm_r", "str_p", "str_s", "buf_p", "buf_s",
        "xbuf", "xbuf_len", "wbuf", "pipes", "cycle", "limit", "fault", "wf",
        "fired", "pulses", "status", "trace", "seg_idx", "fault_done",
        "fine_forever", "record", "segments", "seg_start", "seg_log_lo",
        "seg_writes", "seg_results", "seg_wbuf_add", "resp_done", "hook",
        "z_lo", "z_hi", "stray",
    )

    def __init__(self, eng: "Engine", fault, trace, record, hook):
        cfg = eng.cfg
        self.eng = eng
        self.cfg = cfg
        self.variant = eng.variant
        self.mode = eng._mode
        self.ft = eng._mode is Mode.FAULT_TOLERANT
        self.protected = eng.variant is not Variant.BASELINE
        self.job = eng._job
        self.mem = eng.tcdm
        self.rf = list(eng._regfile)
        self.rf_dirty = False
        self.fsm = [PH_SETUP, 0, 0, 0, 0, 0, 0]
        self.fsm_r = None
        self.str_p = [0, 0, 0, 0]
        self.str_s = None
        self.buf_p = [0, 0]
        self.buf_s = None
        self.xbuf_len = 2 * _words_per_row(self.job.K)
        self.xbuf = [[0] * self.xbuf_len for _ in range(cfg.L)]
        self.wbuf = {}
        self.pipes = [[[0] * cfg.P for _ in range(cfg.H)] for _ in range(cfg.L)]
        self.cycle = 0
        self.limit = eng._watchdog_limit
        self.fault = fault
        self.wf = None
        self.fired = []
        self.pulses = []
        self.status = None
        self.trace = trace
        self.seg_idx = 0
        self.fault_done = False
        self.fine_forever = False
        self.record = record
        self.segments = [] if record else None
        self.seg_start = 0
        self.seg_log_lo = len(self.mem.access_log)
        self.seg_writes = []
        self.seg_results = []
        self.seg_wbuf_add = []
        self.resp_done = False
        self.hook = hook
        self.z_lo = self.job.z_addr
        self.z_hi = self.job.z_addr + self.job.M * _words_per_row(self.job.N)
        self.stray = False

    # Derived values ----------------------------------------------------

    def _dims(self):
        rf = self.rf
        M, N, K = rf[RF_M], rf[RF_N], rf[RF_K]
        L, H = self.cfg.L, self.cfg.H
        blocks = -(-M // L) if M else 0
        waves = blocks * 2 if self.ft else blocks
        chunks = -(-N // H) if N else 0
        return M, N, K, waves, chunks, (K + 1) // 2

    def _rowbase(self, wave: int) -> int:
        L = self.cfg.L
        if self.ft:
            return (wave >> 1) * L + (wave & 1) * (L // 2)
        return wave * L

    # Fault plumbing ----------------------------------------------------

    def _wire16(self, value, category, index):
        f = self.wf
        if f is not None and f.category == category and f.index == index and f.bit < 16:
            return value ^ (1 << f.bit)
        return value

    def _apply_state_fault(self, f: ArmedFault) -> None:
        cat = f.category
        if cat == CAT_PIPE:
            r, h, st = f.index
            if r < self.cfg.L and h < self.cfg.H and st < self.cfg.P and f.bit < 16:
                self.pipes[r][h][st] ^= 1 << f.bit
            return
        if cat == CAT_REGFILE:
            (w,) = f.index
            if w < len(self.rf) and f.bit < 32:
                self.rf[w] ^= 1 << f.bit
                self.rf_dirty = True
                self.fine_forever = True
            return
        full = self.variant is Variant.FULL
        if cat == CAT_FSM:
            (inst,) = f.index
            if inst == "primary":
                if full and self.fsm_r is None:
                    self.fsm_r = list(self.fsm)
                if f.bit < FSM_STATE_BITS:
                    _flip_fsm_bit(self.fsm, f.bit)
            elif full:
                if self.fsm_r is None:
                    self.fsm_r = list(self.fsm)
                if f.bit < FSM_STATE_BITS:
                    _flip_fsm_bit(self.fsm_r, f.bit)
            self.fine_forever = True
        elif cat == CAT_STREAMER:
            (inst,) = f.index
            if f.bit < STREAMER_STATE_BITS:
                reg, pos = divmod(f.bit, STREAMER_REG_BITS)
                if inst == "primary":
                    if full and self.str_s is None:
                        self.str_s = list(self.str_p)
                    self.str_p[reg] ^= 1 << pos
                elif full:
                    if self.str_s is None:
                        self.str_s = list(self.str_p)
                    self.str_s[reg] ^= 1 << pos
            self.fine_forever = True
        elif cat == CAT_BUFFER:
            (inst,) = f.index
            if f.bit < BUFFER_STATE_BITS:
                if inst == "primary":
                    if full and self.buf_s is None:
                        self.buf_s = list(self.buf_p)
                    tgt = self.buf_p
                elif full:
                    if self.buf_s is None:
                        self.buf_s = list(self.buf_p)
                    tgt = self.buf_s
                else:
                    tgt = None
                if tgt is not None:
                    if f.bit < 8:
                        tgt[0] ^= 1 << f.bit
                    else:
                        tgt[1] ^= 1
            self.fine_forever = True

    def _fire(self, flag: str) -> None:
        if flag not in self.fired:
            self.fired.append(flag)

    def _abort(self) -> None:
        eng = self.eng
        for fl in self.fired:
            eng.fault_flags[fl] = True
        if eng.first_fault_cycle is None:
            eng.first_fault_cycle = self.cycle
            eng.first_detector = self.fired[0]
        self.pulses.append((self.cycle, IRQ_PULSE_CYCLES))
        self.cycle += IRQ_PULSE_CYCLES
        self.status = RunStatus.ABORTED_FAULT

    # Memory port -------------------------------------------------------

    def _port_read(self, port, addr, rows):
        flip = 0
        wf = self.wf
        if (
            wf is not None
            and wf.category == CAT_RESP
            and wf.index == (port,)
            and not self.resp_done
        ):
            width = 39 if self.mem.ecc else 32
            if wf.bit < width:
                flip = 1 << wf.bit
                self.resp_done = True
        resp = self.mem.read(addr % self.mem.capacity, self.cycle, rows, flip)
        if resp.ecc_status is EccStatus.UNCORRECTABLE:
            self._fire(FLAG_ECC)
        return resp

    def _write_word(self, addr, word):
        mem = self.mem
        addr %= mem.capacity
        if not self.z_lo <= addr < self.z_hi:
            self.stray = True
        mem.write(addr, word, self.cycle)
        self.seg_writes.append((addr, mem.cells[addr]))

    # Buffers -----------------------------------------------------------

    def _xbuf_store(self, row, slot, lo, hi):
        buf = self.xbuf[row]
        if type(buf) is tuple:
            buf = list(buf)
            self.xbuf[row] = buf
        buf[slot] = lo
        if slot + 1 < self.xbuf_len:
            buf[slot + 1] = hi

    # Phase work --------------------------------------------------------

    def _active_span(self, N, chunk):
        c0 = chunk * self.cfg.H
        if c0 >= N:
            return c0, 0
        return c0, min(self.cfg.H, N - c0)

    def _do_xload(self, M, xwords):
        s = self.fsm
        xli = s[5]
        base = self.str_p[0]
        slot = (2 * self.buf_p[0]) % self.xbuf_len
        L = self.cfg.L
        rowbase = self._rowbase(s[1])
        if self.ft:
            for p in range(L // 2):
                if rowbase + p >= M:
                    continue
                resp = self._port_read(
                    "x", base + p * xwords + xli, frozenset((2 * p, 2 * p + 1))
                )
                lo = resp.word & 0xFFFF
                hi = (resp.word >> 16) & 0xFFFF
                self._xbuf_store(2 * p, slot, lo, hi)
                self._xbuf_store(2 * p + 1, slot, lo, hi)
        else:
            for l in range(L):
                if rowbase + l >= M:
                    continue
                resp = self._port_read("x", base + l * xwords + xli, frozenset((l,)))
                self._xbuf_store(l, slot, resp.word & 0xFFFF, (resp.word >> 16) & 0xFFFF)

    def _read_span(self, port, base, lane_off, c0, cols, rows):
        """Read the packed words covering cols elements starting at c0."""
        w0 = c0 >> 1
        w1 = (c0 + cols - 1) >> 1
        words = []
        for j in range(w0, w1 + 1):
            words.append(self._port_read(port, base + lane_off + (j - w0), rows).word)
        return words, w0

    def _do_yload(self, M, N):
        s = self.fsm
        c0, cols = self._active_span(N, s[2])
        if cols <= 0:
            return
        ywords = _words_per_row(N)
        base = self.str_p[1]
        rowbase = self._rowbase(s[1])
        L = self.cfg.L
        lanes = range(L // 2) if self.ft else range(L)
        for lane in lanes:
            if rowbase + lane >= M:
                continue
            rows = frozenset((2 * lane, 2 * lane + 1)) if self.ft else frozenset((lane,))
            words, w0 = self._read_span("y", base, lane * ywords, c0, cols, rows)
            for h in range(cols):
                col = c0 + h
                elem = (words[(col >> 1) - w0] >> (16 * (col & 1))) & 0xFFFF
                for row in rows:
                    v = self._wire16(elem, CAT_Y, (row, h)) if self.wf is not None else elem
                    self.pipes[row][h][0] = v

    def _fetch_weights(self, N, chunk, k, c0, cols, active_rows):
        wwords = _words_per_row(N)
        base = self.str_p[3]
        words, w0 = self._read_span("w", base, 0, c0, cols, active_rows)
        elems = []
        for h in range(cols):
            col = c0 + h
            elems.append((words[(col >> 1) - w0] >> (16 * (col & 1))) & 0xFFFF)
        # Buffer slots are physically H wide; unfilled lanes read as zero.
        elems = tuple(elems) + (0,) * (self.cfg.H - cols)
        pars = tuple(parity_bit(e) for e in elems) if self.protected else None
        entry = (elems, pars)
        self.wbuf[(chunk, k)] = entry
        self.seg_wbuf_add.append(((chunk, k), entry))
        return entry

    def _do_compute(self, M, N):
        s = self.fsm
        wave, chunk, k = s[1], s[2], s[3]
        c0, cols = self._active_span(N, chunk)
        if cols <= 0:
            return
        rowbase = self._rowbase(wave)
        L = self.cfg.L
        if self.ft:
            active = [
                (2 * p, 2 * p + 1) for p in range(L // 2) if rowbase + p < M
            ]
            rows_flat = [r for pair in active for r in pair]
        else:
            rows_flat = [l for l in range(L) if rowbase + l < M]
        if not rows_flat:
            return
        if self.buf_p[1]:
            entry = self.wbuf.get((chunk, k))
            if entry is None:
                H = self.cfg.H
                entry = ((0,) * H, (0,) * H if self.protected else None)
        else:
            entry = self._fetch_weights(N, chunk, k, c0, cols, frozenset(rows_flat))
        elems, pars = entry
        slot = k if k < self.xbuf_len else k % self.xbuf_len
        wf = self.wf
        if wf is None:
            # Hot path: no transient lands this cycle, parity trivially holds.
            for row in rows_flat:
                xv = self.xbuf[row][slot]
                prow = self.pipes[row]
                for h in range(cols):
                    cell = prow[h]
                    cell[0] = fp16_fma(xv, elems[h], cell[0])
            return
        for row in rows_flat:
            xv = self._wire16(self.xbuf[row][slot], CAT_X, (row,))
            prow = self.pipes[row]
            for h in range(cols):
                wv = self._wire16(elems[h], CAT_W, ("d", row, h))
                if self.protected:
                    pb = pars[h] if h < len(pars) else 0
                    f = wf
                    if (
                        f.category == CAT_W
                        and f.index == ("p", row, h)
                        and f.bit == 0
                    ):
                        pb ^= 1
                    if parity_bit(wv) != pb:
                        self._fire(FLAG_WEIGHT_PARITY)
                        continue
                cell = prow[h]
                cell[0] = fp16_fma(xv, wv, cell[0])

    def _do_drain(self, M, N):
        s = self.fsm
        c0, cols = self._active_span(N, s[2])
        if cols <= 0:
            return
        rowbase = self._rowbase(s[1])
        L, P = self.cfg.L, self.cfg.P
        if self.ft:
            rows = [r for p in range(L // 2) if rowbase + p < M for r in (2 * p, 2 * p + 1)]
        else:
            rows = [l for l in range(L) if rowbase + l < M]
        for r in rows:
            prow = self.pipes[r]
            for h in range(cols):
                cell = prow[h]
                for j in range(P - 1, 0, -1):
                    cell[j] = cell[j - 1]

    def _commit_row(self, base, lane_off, c0, cols, N, vals, rows):
        """Compose packed Z words for one output row and write them."""
        w0 = c0 >> 1
        w1 = (c0 + cols - 1) >> 1
        for j in range(w0, w1 + 1):
            rmw = None
            halves = [0, 0]
            for pos in (0, 1):
                col = 2 * j + pos
                if c0 <= col < c0 + cols:
                    halves[pos] = vals[col - c0]
                elif col < N:
                    if rmw is None:
                        rmw = self._port_read("z", base + lane_off + (j - w0), rows).word
                    halves[pos] = (rmw >> (16 * pos)) & 0xFFFF
            self._write_word(base + lane_off + (j - w0), halves[0] | (halves[1] << 16))

    def _do_writeback(self, M, N):
        s = self.fsm
        c0, cols = self._active_span(N, s[2])
        if cols <= 0:
            return
        zwords = _words_per_row(N)
        base = self.str_p[2]
        rowbase = self._rowbase(s[1])
        L, tap = self.cfg.L, self.cfg.P - 1
        wf = self.wf
        record = self.record
        if self.ft:
            for p in range(L // 2):
                if rowbase + p >= M:
                    continue
                ra, rb = 2 * p, 2 * p + 1
                pa, pb = self.pipes[ra], self.pipes[rb]
                if wf is None:
                    va = [pa[h][tap] for h in range(cols)]
                    vb = [pb[h][tap] for h in range(cols)]
                    ca, cb = va, vb
                else:
                    va = [self._wire16(pa[h][tap], CAT_Z, (ra, h)) for h in range(cols)]
                    vb = [self._wire16(pb[h][tap], CAT_Z, (rb, h)) for h in range(cols)]
                    ca, cb = list(va), list(vb)
                    if wf.category == CAT_CHECKER and wf.bit < 16 * cols:
                        side = wf.index
                        if side == (p, 0):
                            ca[wf.bit >> 4] ^= 1 << (wf.bit & 15)
                        elif side == (p, 1):
                            cb[wf.bit >> 4] ^= 1 << (wf.bit & 15)
                if ca != cb:
                    self._fire(FLAG_ROW_PAIR)
                    continue
                rows = frozenset((ra, rb))
                self._commit_row(base, p * zwords, c0, cols, N, va, rows)
                if record:
                    self.seg_results.append((ra, tuple(va)))
                    self.seg_results.append((rb, tuple(vb)))
        else:
            for l in range(L):
                if rowbase + l >= M:
                    continue
                prow = self.pipes[l]
                if wf is None:
                    vals = [prow[h][tap] for h in range(cols)]
                else:
                    vals = [self._wire16(prow[h][tap], CAT_Z, (l, h)) for h in range(cols)]
                self._commit_row(base, l * zwords, c0, cols, N, vals, frozenset((l,)))
                if record:
                    self.seg_results.append((l, tuple(vals)))

    # Registered control updates ----------------------------------------

    def _streamer_step(self, old, new):
        newph = new[0]
        if newph != PH_COMPUTE and newph == old[0]:
            return
        rf = self.rf
        N, K = rf[RF_N], rf[RF_K]
        H = self.cfg.H
        sp, ss = self.str_p, self.str_s
        if newph == PH_XLOAD and old[0] != PH_XLOAD:
            v = (rf[RF_X] + self._rowbase(new[1]) * ((K + 1) // 2)) & _ADDR_MASK
            sp[0] = v
            if ss is not None:
                ss[0] = v
        elif newph == PH_YLOAD and old[0] != PH_YLOAD:
            stride = (N + 1) // 2
            rb = self._rowbase(new[1])
            woff = (new[2] * H) >> 1
            vy = (rf[RF_Y] + rb * stride + woff) & _ADDR_MASK
            vz = (rf[RF_Z] + rb * stride + woff) & _ADDR_MASK
            sp[1] = vy
            sp[2] = vz
            if ss is not None:
                ss[1] = vy
                ss[2] = vz
        if newph == PH_COMPUTE:
            v = (rf[RF_W] + new[3] * ((N + 1) // 2) + ((new[2] * H) >> 1)) & _ADDR_MASK
            sp[3] = v
            if ss is not None:
                ss[3] = v

    def _buffer_step(self, old, new):
        bp, bs = self.buf_p, self.buf_s
        if old[0] == PH_XLOAD:
            bp[0] = (bp[0] + 1) & 0xFF
            if bs is not None:
                bs[0] = (bs[0] + 1) & 0xFF
        if new[0] == PH_XLOAD and old[0] != PH_XLOAD:
            bp[0] = 0
            if bs is not None:
                bs[0] = 0
        if old[0] == PH_WRITEBACK and new[1] != old[1]:
            bp[1] = 1
            if bs is not None:
                bs[1] = 1

    # Segment bookkeeping ------------------------------------------------

    def _reset_segment(self, start):
        self.seg_start = start
        self.seg_log_lo = len(self.mem.access_log)
        self.seg_writes = []
        self.seg_results = []
        self.seg_wbuf_add = []

    def _close_segment(self, old):
        kind = {PH_SETUP: "setup", PH_XLOAD: "xload", PH_WRITEBACK: "chunk", PH_FINISH: "finish"}[old[0]]
        end = self.cycle + 1
        if self.record:
            xsnap = None
            if kind == "xload":
                xsnap = tuple(tuple(r) for r in self.xbuf)
            self.segments.append(
                _Segment(
                    kind=kind,
                    start=self.seg_start,
                    end=end,
                    wave=old[1],
                    chunk=old[2],
                    fsm=tuple(self.fsm),
                    strs=tuple(self.str_p),
                    bufs=tuple(self.buf_p),
                    log_lo=self.seg_log_lo,
                    log_hi=len(self.mem.access_log),
                    writes=tuple(self.seg_writes),
                    results=tuple(self.seg_results) if kind == "chunk" else None,
                    xbuf_snap=xsnap,
                    wbuf_add=tuple(self.seg_wbuf_add),
                )
            )
        elif self.trace is not None and not self.fine_forever:
            self._audit_segment()
        self._reset_segment(end)

    def _audit_segment(self):
        """Decide whether a fine-stepped segment left the machine nominal."""
        segs = self.trace.segments
        if self.seg_idx >= len(segs):
            self.fine_forever = True
            return
        seg = segs[self.seg_idx]
        self.seg_idx += 1
        ok = (
            self.cycle + 1 == seg.end
            and tuple(self.fsm) == seg.fsm
            and tuple(self.str_p) == seg.strs
            and tuple(self.buf_p) == seg.bufs
            and self.fsm_r is None
            and self.str_s is None
            and self.buf_s is None
            and not self.rf_dirty
            and tuple(self.seg_writes) == seg.writes
        )
        if ok and seg.xbuf_snap is not None:
            ok = tuple(tuple(r) for r in self.xbuf) == seg.xbuf_snap
        if ok:
            for key, val in seg.wbuf_add:
                if self.wbuf.get(key) != val:
                    ok = False
                    break
        if ok:
            self.fault_done = True
        else:
            self.fine_forever = True

    # Cycle execution ----------------------------------------------------

    def fine_cycle(self):
        t = self.cycle
        f = self.fault
        self.wf = f if (f is not None and f.cycle == t) else None
        self.resp_done = False
        if self.hook is not None:
            self.hook(self.eng, t)
        if self.wf is not None and f.category in STATE_CATEGORIES:
            self._apply_state_fault(f)
        del self.fired[:]
        if self.variant is Variant.FULL:
            if self.fsm_r is not None and self.fsm_r != self.fsm:
                self._fire(FLAG_FSM)
            if self.str_s is not None and self.str_s != self.str_p:
                self._fire(FLAG_FSM)
            if self.buf_s is not None and self.buf_s != self.buf_p:
                self._fire(FLAG_FSM)
            if self.rf_dirty and regfile_parity(self.rf[:RF_PARITY]) != self.rf[RF_PARITY]:
                self._fire(FLAG_REGFILE)
            if self.fired:
                self._abort()
                return
        dims = self._dims()
        M, N, K, waves, chunks, xwords = dims
        ph = self.fsm[0]
        if ph == PH_COMPUTE:
            self._do_compute(M, N)
        elif ph == PH_DRAIN:
            self._do_drain(M, N)
        elif ph == PH_YLOAD:
            self._do_yload(M, N)
        elif ph == PH_WRITEBACK:
            self._do_writeback(M, N)
        elif ph == PH_XLOAD:
            self._do_xload(M, xwords)
        if self.fired:
            self._abort()
            return
        old = self.fsm
        new = _control_step(old, waves, chunks, K, xwords, self.cfg.P)
        self.fsm = new
        if self.fsm_r is not None:
            self.fsm_r = _control_step(self.fsm_r, waves, chunks, K, xwords, self.cfg.P)
        self._streamer_step(old, new)
        self._buffer_step(old, new)
        if old[0] in (PH_SETUP, PH_XLOAD, PH_WRITEBACK, PH_FINISH) and new[0] != old[0]:
            self._close_segment(old)
        self.cycle = t + 1
        if new[0] == PH_IDLE and new[6]:
            self.status = RunStatus.COMPLETED
            return
        if self.cycle >= self.limit:
            self.status = RunStatus.TIMEOUT

    def _jump(self, seg: _Segment):
        self.fsm = list(seg.fsm)
        self.str_p = list(seg.strs)
        self.buf_p = list(seg.bufs)
        self.mem.access_log.extend(self.trace.log[seg.log_lo:seg.log_hi])
        cells = self.mem.cells
        for addr, cell in seg.writes:
            cells[addr] = cell
        if seg.xbuf_snap is not None:
            self.xbuf = list(seg.xbuf_snap)
        if seg.results is not None:
            P = self.cfg.P
            pipes = self.pipes
            for row, vals in seg.results:
                prow = pipes[row]
                for h, v in enumerate(vals):
                    prow[h] = [v] * P
        for key, val in seg.wbuf_add:
            self.wbuf[key] = val
        self.cycle = seg.end
        self._reset_segment(seg.end)
        if seg.kind == "finish":
            self.status = RunStatus.COMPLETED

    def execute(self):
        trace = self.trace
        if trace is None:
            while self.status is None:
                self.fine_cycle()
            return
        segs = trace.segments
        f = self.fault
        while self.status is None:
            if not self.fine_forever and self.seg_idx < len(segs):
                seg = segs[self.seg_idx]
                if f is None or self.fault_done or f.cycle >= seg.end:
                    self._jump(seg)
                    self.seg_idx += 1
                    continue
            self.fine_cycle()


class Engine:
    """One engine instance bound to a scratchpad memory.

    Fault status flags are sticky across runs until clear_fault_status(),
    mirroring memory-mapped status registers a host would read after an
    interrupt.
    """

    def __init__(self, config: EngineConfig, tcdm: Tcdm, variant: Variant = Variant.FULL):
        if variant is Variant.BASELINE and tcdm.ecc:
            raise ConfigurationError("baseline build expects a memory without ECC")
        if variant is not Variant.BASELINE and not tcdm.ecc:
            raise ConfigurationError("protected builds require an ECC memory")
        self.cfg = config
        self.tcdm = tcdm
        self.variant = variant
        self.fault_flags = {name: False for name in FAULT_FLAGS}
        self.first_fault_cycle: int | None = None
        self.first_detector: str | None = None
        self._job: JobDescriptor | None = None
        self._mode: Mode | None = None
        self._regfile: tuple = ()
        self._watchdog_limit = 0
        self._running = False

    # Configuration ------------------------------------------------------

    def configure(self, job: JobDescriptor) -> "Engine":
        if self._running:
            raise EngineBusyError("configure rejected while a run is active")
        cfg = self.cfg
        if job.M < 1 or job.N < 1 or job.K < 1:
            raise ConfigurationError("M, N and K must all be at least 1")
        if job.K > _MAX_K:
            raise ConfigurationError(f"K exceeds the k counter range ({_MAX_K})")
        if -(-job.N // cfg.H) > _MAX_CHUNKS:
            raise ConfigurationError("N exceeds the chunk counter range")
        if job.mode is Mode.FAULT_TOLERANT:
            if self.variant is Variant.BASELINE:
                raise ConfigurationError("baseline build has no redundant rows")
            if cfg.L % 2:
                raise ConfigurationError("fault-tolerant mode needs an even L")
        blocks = -(-job.M // cfg.L)
        waves = blocks * 2 if job.mode is Mode.FAULT_TOLERANT else blocks
        if waves > _MAX_WAVES:
            raise ConfigurationError("M exceeds the wave counter range")

        cap = self.tcdm.capacity
        xw, nw = _words_per_row(job.K), _words_per_row(job.N)
        regions = {
            "x": (job.x_addr, job.x_addr + job.M * xw),
            "w": (job.w_addr, job.w_addr + job.K * nw),
            "y": (job.y_addr, job.y_addr + job.M * nw),
            "z": (job.z_addr, job.z_addr + job.M * nw),
        }
        for name, (lo, hi) in regions.items():
            if lo < 0 or hi > cap:
                raise ConfigurationError(f"{name} region [{lo}, {hi}) outside capacity {cap}")
            if hi > (1 << STREAMER_REG_BITS):
                raise ConfigurationError(f"{name} region beyond the address register range")
        zlo, zhi = regions["z"]
        for name in ("x", "w", "y"):
            lo, hi = regions[name]
            if lo < zhi and zlo < hi:
                raise ConfigurationError(f"z region overlaps the {name} region")

        words = [
            job.M,
            job.N,
            job.K,
            job.x_addr,
            job.w_addr,
            job.y_addr,
            job.z_addr,
            1 if job.mode is Mode.FAULT_TOLERANT else 0,
        ]
        if self.variant is Variant.FULL:
            expected = regfile_parity(words)
            if job.parity_word is not None and job.parity_word != expected:
                self.fault_flags[FLAG_REGFILE] = True
                raise ConfigurationError("configuration parity word mismatch")
            words.append(expected)
        self._regfile = tuple(words)
        self._job = job
        self._mode = job.mode
        nominal = nominal_cycles(cfg, job.M, job.N, job.K, job.mode)
        self._watchdog_limit = math.ceil(cfg.watchdog_factor * nominal)
        return self

    def clear_fault_status(self) -> None:
        if self._running:
            raise EngineBusyError("status clear rejected while a run is active")
        for name in FAULT_FLAGS:
            self.fault_flags[name] = False
        self.first_fault_cycle = None
        self.first_detector = None

    # Execution ----------------------------------------------------------

    def run_to_completion(
        self,
        fault: ArmedFault | None = None,
        trace: NominalTrace | None = None,
        cycle_hook=None,
    ) -> RunOutcome:
        run = self._execute(fault, trace, record=False, hook=cycle_hook)
        return self._outcome(run)

    def _execute(self, fault, trace, record, hook):
        if self._job is None:
            raise ConfigurationError("engine is not configured")
        if self._running:
            raise EngineBusyError("run rejected while a run is active")
        if trace is not None:
            if trace.key != _trace_key(self.cfg, self._job, self.variant):
                raise ConfigurationError("trace does not match this configuration")
            if not _trace_memory_matches(trace, self.tcdm):
                trace = None
        self._running = True
        try:
            run = _Run(self, fault, trace, record, hook)
            run.execute()
        finally:
            self._running = False
        return run

    def record_trace(self) -> NominalTrace:
        """Run fault-free on a scratch memory clone and record the schedule."""
        saved = self.tcdm
        clone = Tcdm(saved.capacity, ecc=saved.ecc)
        clone.cells = list(saved.cells)
        self.tcdm = clone
        try:
            run = self._execute(None, None, record=True, hook=None)
        finally:
            self.tcdm = saved
        if run.status is not RunStatus.COMPLETED:
            raise ConfigurationError("nominal run did not complete")
        job = self._job
        expect = nominal_cycles(self.cfg, job.M, job.N, job.K, job.mode)
        if run.cycle != expect:
            raise ConfigurationError(
                f"recorded run took {run.cycle} cycles, formula says {expect}"
            )
        xw, nw = _words_per_row(job.K), _words_per_row(job.N)
        snapshot = tuple(
            (lo, tuple(saved.cells[lo:lo + length]))
            for lo, length in (
                (job.x_addr, job.M * xw),
                (job.w_addr, job.K * nw),
                (job.y_addr, job.M * nw),
            )
        )
        return NominalTrace(
            key=_trace_key(self.cfg, self._job, self.variant),
            cycles=run.cycle,
            log=tuple(clone.access_log),
            segments=tuple(run.segments),
            regfile=tuple(run.rf),
            operand_snapshot=snapshot,
        )

    def _outcome(self, run: _Run) -> RunOutcome:
        job = self._job
        z = None
        if run.status is RunStatus.COMPLETED:
            nw = _words_per_row(job.N)
            rows = []
            for i in range(job.M):
                row = []
                for j in range(job.N):
                    word = self.tcdm.peek(job.z_addr + i * nw + (j >> 1))
                    row.append((word >> (16 * (j & 1))) & 0xFFFF)
                rows.append(tuple(row))
            z = tuple(rows)
        observed = set()
        for start, length in run.pulses:
            observed.update(range(start, start + length))
        f = run.fault
        if f is not None and f.category == CAT_IRQ and f.bit == 0 and 0 <= f.cycle <= run.cycle:
            observed.symmetric_difference_update({f.cycle})
        return RunOutcome(
            status=run.status,
            cycles=run.cycle,
            z=z,
            fault_flags=dict(self.fault_flags),
            first_fault_cycle=self.first_fault_cycle,
            first_detector=self.first_detector,
            interrupt_pulses=tuple(run.pulses),
            irq_observed=frozenset(observed),
            stray_writes=run.stray,
        )


def record_nominal_trace(
    cfg: EngineConfig, tcdm: Tcdm, variant: Variant, job: JobDescriptor
) -> NominalTrace:
    """Convenience wrapper: configure a throwaway engine and record its trace."""
    return Engine(cfg, tcdm, variant).configure(job).record_trace()
