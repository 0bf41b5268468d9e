"""Single-event transient injection against the engine model.

A campaign samples one (site, bit, cycle) triple per experiment from the
flip-flop and wire population of the configured build, runs the job with
that single transient armed, applies the detect-and-retry protocol and
classifies the outcome into four classes:

* correct_no_retry: the result is bit-exact and no retry was needed.
* correct_with_retry: a protection mechanism fired, the host cleared the
  status and re-dispatched once on the same memory, and the rerun result
  is bit-exact.
* incorrect: the run completed but the result differs from the golden
  reference (silent data corruption).
* timeout: the watchdog expired, or the retry budget was exhausted with
  the engine still flagging faults.

Site identifiers, their enumeration order and the per-site bit widths
are stable across runs and processes; together with per-experiment
seeded draws this makes campaign reports byte-for-byte reproducible for
a given (plan, seed), independent of the worker count.
"""

from __future__ import annotations

import json
import random
from bisect import bisect_right
from dataclasses import dataclass

from ._version import __version__
from .engine import (
    BUFFER_STATE_BITS,
    CAT_BUFFER,
    CAT_CHECKER,
    CAT_FSM,
    CAT_IRQ,
    CAT_PIPE,
    CAT_REGFILE,
    CAT_RESP,
    CAT_STREAMER,
    CAT_W,
    CAT_X,
    CAT_Y,
    CAT_Z,
    FSM_STATE_BITS,
    REGFILE_WORDS_FULL,
    REGFILE_WORDS_PLAIN,
    STREAMER_STATE_BITS,
    ArmedFault,
    Engine,
    EngineConfig,
    JobDescriptor,
    Mode,
    NominalTrace,
    RunOutcome,
    RunStatus,
    Variant,
    default_layout,
    golden_matmul,
    nominal_cycles,
    record_nominal_trace,
)
from .fp16 import fp16_from_real
from .memory import Tcdm

__all__ = [
    "FaultSite",
    "FaultSpecError",
    "InjectionResult",
    "CampaignPlan",
    "CampaignReport",
    "SimulationContext",
    "OUTCOME_CLASSES",
    "enumerate_sites",
    "total_fault_bits",
    "site_for_bit",
    "parse_fault_spec",
    "run_with_fault",
    "classify_outcome",
    "run_campaign",
]

OUTCOME_CORRECT = "correct_no_retry"
OUTCOME_RETRY = "correct_with_retry"
OUTCOME_INCORRECT = "incorrect"
OUTCOME_TIMEOUT = "timeout"
OUTCOME_CLASSES = (OUTCOME_CORRECT, OUTCOME_RETRY, OUTCOME_INCORRECT, OUTCOME_TIMEOUT)

REPORT_SCHEMA = "ftgemm.campaign/1"


@dataclass(frozen=True)
class FaultSite:
    """One injectable location: a named bus, register or wire bundle."""

    site_id: str
    category: str
    width: int
    kind: str  # "wire" or "state"
    index: tuple


class FaultSpecError(ValueError):
    """A textual fault specification could not be resolved."""


def enumerate_sites(cfg: EngineConfig, variant: Variant) -> tuple:
    """Deterministic catalog of every injectable site of one build.

    The order is fixed (data path first, then control state, then the
    checker and interface wires) and is part of the reproducibility
    contract: campaign draws address sites by position in this list.
    """
    L, H, P = cfg.L, cfg.H, cfg.P
    protected = variant is not Variant.BASELINE
    full = variant is Variant.FULL
    sites = []
    add = sites.append
    for l in range(L):
        add(FaultSite(f"x_data[{l}]", CAT_X, 16, "wire", (l,)))
    for l in range(L):
        for h in range(H):
            add(FaultSite(f"y_data[{l},{h}]", CAT_Y, 16, "wire", (l, h)))
    for l in range(L):
        for h in range(H):
            add(FaultSite(f"w_broadcast[{l},{h}]", CAT_W, 16, "wire", ("d", l, h)))
    if protected:
        for l in range(L):
            for h in range(H):
                add(FaultSite(f"w_broadcast_par[{l},{h}]", CAT_W, 1, "wire", ("p", l, h)))
    for l in range(L):
        for h in range(H):
            add(FaultSite(f"z_writeback[{l},{h}]", CAT_Z, 16, "wire", (l, h)))
    for l in range(L):
        for h in range(H):
            for p in range(P):
                add(FaultSite(f"ce_pipeline_state[{l},{h},{p}]", CAT_PIPE, 16, "state", (l, h, p)))
    insts = ("primary", "shadow") if full else ("primary",)
    for inst in insts:
        add(FaultSite(f"streamer_ctrl[{inst}]", CAT_STREAMER, STREAMER_STATE_BITS, "state", (inst,)))
    for inst in insts:
        add(FaultSite(f"buffer_ctrl[{inst}]", CAT_BUFFER, BUFFER_STATE_BITS, "state", (inst,)))
    fsm_insts = ("primary", "replica") if full else ("primary",)
    for inst in fsm_insts:
        add(FaultSite(f"fsm_state[{inst}]", CAT_FSM, FSM_STATE_BITS, "state", (inst,)))
    words = REGFILE_WORDS_FULL if full else REGFILE_WORDS_PLAIN
    for w in range(words):
        add(FaultSite(f"regfile_bit[{w}]", CAT_REGFILE, 32, "state", (w,)))
    if protected:
        for p in range(L // 2):
            for side, name in ((0, "a"), (1, "b")):
                add(FaultSite(f"checker_input[{p},{name}]", CAT_CHECKER, H * 16, "wire", (p, side)))
    resp_width = 39 if protected else 32
    for port in ("x", "y", "w", "z"):
        add(FaultSite(f"mem_response_bit[{port}]", CAT_RESP, resp_width, "wire", (port,)))
    add(FaultSite("interrupt_wire", CAT_IRQ, 1, "wire", ()))
    return tuple(sites)


def total_fault_bits(sites) -> int:
    return sum(s.width for s in sites)


def _prefix_sums(sites):
    acc = 0
    prefix = []
    for s in sites:
        acc += s.width
        prefix.append(acc)
    return prefix


def site_for_bit(sites, prefix, global_bit: int):
    """Map a global bit position to (site, bit within site)."""
    idx = bisect_right(prefix, global_bit)
    base = prefix[idx - 1] if idx else 0
    return sites[idx], global_bit - base


def parse_fault_spec(spec: str, sites) -> tuple:
    """Resolve 'SITE[:bit=B][:cycle=C]' into a (site, fault) pair.

    SITE is either a full site identifier such as 'y_data[3,1]', a bare
    category name (its first site), or 'category#k' for the k-th site of
    that category.
    """
    parts = spec.split(":")
    name = parts[0]
    bit = 0
    cycle = 0
    for part in parts[1:]:
        if part.startswith("bit="):
            try:
                bit = int(part[4:], 0)
            except ValueError:
                raise FaultSpecError(f"bad bit value in {spec!r}") from None
        elif part.startswith("cycle="):
            try:
                cycle = int(part[6:], 0)
            except ValueError:
                raise FaultSpecError(f"bad cycle value in {spec!r}") from None
        else:
            raise FaultSpecError(f"unknown fault option {part!r} in {spec!r}")
    nth = 0
    if "#" in name:
        name, _, tail = name.partition("#")
        try:
            nth = int(tail)
        except ValueError:
            raise FaultSpecError(f"bad site index in {spec!r}") from None
    site = None
    for s in sites:
        if s.site_id == name:
            site = s
            break
    if site is None:
        matching = [s for s in sites if s.category == name]
        if not matching:
            raise FaultSpecError(f"no site or category named {name!r}")
        if not 0 <= nth < len(matching):
            raise FaultSpecError(f"category {name!r} has {len(matching)} sites, index {nth} is out of range")
        site = matching[nth]
    elif nth:
        raise FaultSpecError("a '#k' index only applies to category names")
    if not 0 <= bit < site.width:
        raise FaultSpecError(f"bit {bit} outside {site.site_id} (width {site.width})")
    if cycle < 0:
        raise FaultSpecError("cycle must be non-negative")
    return site, ArmedFault(site.category, site.index, bit, cycle)


# Retry protocol and classification -------------------------------------


@dataclass
class InjectionResult:
    outcome: str
    retries: int
    detector: str | None
    first: RunOutcome
    final: RunOutcome


def classify_outcome(final: RunOutcome, retries: int, golden_z) -> str:
    """Four-way outcome classification of one injection experiment."""
    if final.status is not RunStatus.COMPLETED:
        # A spent retry budget with the engine still flagging is a hang
        # from the host's point of view, same as a watchdog expiry.
        return OUTCOME_TIMEOUT
    if final.z != tuple(golden_z):
        return OUTCOME_INCORRECT
    return OUTCOME_RETRY if retries else OUTCOME_CORRECT


def run_with_fault(
    cfg: EngineConfig,
    tcdm: Tcdm,
    variant: Variant,
    job: JobDescriptor,
    fault: ArmedFault | None,
    trace: NominalTrace | None = None,
    max_retries: int = 1,
) -> InjectionResult:
    """One experiment: run with the armed fault, retry on detection.

    The retry re-dispatches the same job on the same memory, which is
    what a host interrupt handler would do.  The rerun may only
    fast-forward along the recorded trace when the faulty run could not
    have bent memory outside the Z region.
    """
    eng = Engine(cfg, tcdm, variant).configure(job)
    first = eng.run_to_completion(fault=fault, trace=trace)
    final = first
    retries = 0
    while final.status is RunStatus.ABORTED_FAULT and retries < max_retries:
        eng.clear_fault_status()
        retries += 1
        rerun_trace = None if first.stray_writes else trace
        final = eng.run_to_completion(fault=None, trace=rerun_trace)
    return InjectionResult(
        outcome="",
        retries=retries,
        detector=first.first_detector,
        first=first,
        final=final,
    )


# Campaigns --------------------------------------------------------------


@dataclass(frozen=True)
class CampaignPlan:
    """Everything needed to reproduce a campaign bit for bit.

    seed drives the per-experiment (site, bit, cycle) draws; operand
    contents come either from operand_seed or from a memory image file.
    """

    cfg: EngineConfig
    job: JobDescriptor
    variant: Variant
    n: int
    seed: int
    capacity: int
    operand_seed: int = 0
    mem_image: str | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("campaign size must be positive")


def plan_for_dims(
    cfg: EngineConfig,
    M: int,
    N: int,
    K: int,
    mode: Mode,
    variant: Variant,
    n: int,
    seed: int = 0,
    operand_seed: int = 0,
) -> CampaignPlan:
    """Standard plan: packed back-to-back layout, seeded operands."""
    lay = default_layout(M, N, K)
    job = JobDescriptor(
        M=M, N=N, K=K,
        x_addr=lay["x_addr"], w_addr=lay["w_addr"],
        y_addr=lay["y_addr"], z_addr=lay["z_addr"],
        mode=mode,
    )
    return CampaignPlan(
        cfg=cfg, job=job, variant=variant, n=n, seed=seed,
        capacity=lay["capacity"], operand_seed=operand_seed,
    )


def _rand_matrix(rng: random.Random, rows: int, cols: int) -> tuple:
    return tuple(
        tuple(fp16_from_real(rng.uniform(-1.0, 1.0)) for _ in range(cols))
        for _ in range(rows)
    )


def pack_rows(tcdm: Tcdm, base: int, rows, ncols: int) -> None:
    """Store a pattern matrix two elements per word, row-major."""
    nw = (ncols + 1) // 2
    for i, row in enumerate(rows):
        for j in range(nw):
            lo = row[2 * j]
            hi = row[2 * j + 1] if 2 * j + 1 < ncols else 0
            tcdm.poke(base + i * nw + j, lo | (hi << 16))


def unpack_rows(tcdm: Tcdm, base: int, nrows: int, ncols: int) -> tuple:
    """Read back a packed pattern matrix."""
    nw = (ncols + 1) // 2
    out = []
    for i in range(nrows):
        row = []
        for j in range(ncols):
            word = tcdm.peek(base + i * nw + (j >> 1))
            row.append((word >> (16 * (j & 1))) & 0xFFFF)
        out.append(tuple(row))
    return tuple(out)


def seed_operands(tcdm: Tcdm, job: JobDescriptor, seed: int) -> tuple:
    """Fill X, W and Y with reproducible uniform [-1, 1] values."""
    rng = random.Random(f"op:{seed}")
    x = _rand_matrix(rng, job.M, job.K)
    w = _rand_matrix(rng, job.K, job.N)
    y = _rand_matrix(rng, job.M, job.N)
    pack_rows(tcdm, job.x_addr, x, job.K)
    pack_rows(tcdm, job.w_addr, w, job.N)
    pack_rows(tcdm, job.y_addr, y, job.N)
    return x, w, y


class SimulationContext:
    """Per-process immutable campaign state: operands, golden result,
    recorded nominal trace and the site catalog with its prefix sums."""

    def __init__(self, plan: CampaignPlan):
        self.plan = plan
        cfg, job = plan.cfg, plan.job
        ecc = plan.variant is not Variant.BASELINE
        if plan.mem_image is not None:
            template = Tcdm.load_image(plan.mem_image)
            if template.ecc != ecc or template.capacity != plan.capacity:
                raise ValueError("memory image does not match the campaign plan")
            x = unpack_rows(template, job.x_addr, job.M, job.K)
            w = unpack_rows(template, job.w_addr, job.K, job.N)
            y = unpack_rows(template, job.y_addr, job.M, job.N)
        else:
            template = Tcdm(plan.capacity, ecc=ecc)
            x, w, y = seed_operands(template, job, plan.operand_seed)
        self.operands = (x, w, y)
        self.golden = golden_matmul(x, w, y)
        self.trace = record_nominal_trace(cfg, template, plan.variant, job)
        self.template_cells = tuple(template.cells)
        self.ecc = ecc
        self.sites = enumerate_sites(cfg, plan.variant)
        self.prefix = _prefix_sums(self.sites)
        self.total_bits = self.prefix[-1]
        self.cycles = self.trace.cycles

    def fresh_tcdm(self) -> Tcdm:
        t = Tcdm(self.plan.capacity, ecc=self.ecc)
        t.cells = list(self.template_cells)
        return t

    def draw(self, i: int):
        """Deterministic per-experiment draw, stable across processes."""
        rng = random.Random(f"{self.plan.seed}:{i}")
        site, bit = site_for_bit(self.sites, self.prefix, rng.randrange(self.total_bits))
        cycle = rng.randrange(self.cycles)
        return site, bit, cycle

    def run_one(self, i: int):
        site, bit, cycle = self.draw(i)
        fault = ArmedFault(site.category, site.index, bit, cycle)
        res = run_with_fault(
            self.plan.cfg, self.fresh_tcdm(), self.plan.variant, self.plan.job,
            fault, trace=self.trace,
        )
        outcome = classify_outcome(res.final, res.retries, self.golden)
        return outcome, site.category, res.retries, res.detector, res.final.status


def _blank_tally(sites) -> dict:
    cats = []
    for s in sites:
        if s.category not in cats:
            cats.append(s.category)
    return {
        "outcomes": {c: 0 for c in OUTCOME_CLASSES},
        "categories": {c: {o: 0 for o in OUTCOME_CLASSES} for c in cats},
        "detectors": {},
        "retries": 0,
        "double_detections": 0,
    }


def _tally_range(ctx: SimulationContext, lo: int, hi: int) -> dict:
    tally = _blank_tally(ctx.sites)
    outcomes = tally["outcomes"]
    categories = tally["categories"]
    detectors = tally["detectors"]
    for i in range(lo, hi):
        outcome, category, retries, detector, final_status = ctx.run_one(i)
        outcomes[outcome] += 1
        categories[category][outcome] += 1
        tally["retries"] += retries
        if detector is not None:
            detectors[detector] = detectors.get(detector, 0) + 1
        if final_status is RunStatus.ABORTED_FAULT:
            tally["double_detections"] += 1
    return tally


def _merge_tally(into: dict, part: dict) -> None:
    for cls, v in part["outcomes"].items():
        into["outcomes"][cls] += v
    for cat, sub in part["categories"].items():
        dst = into["categories"][cat]
        for cls, v in sub.items():
            dst[cls] += v
    for det, v in part["detectors"].items():
        into["detectors"][det] = into["detectors"].get(det, 0) + v
    into["retries"] += part["retries"]
    into["double_detections"] += part["double_detections"]


_WORKER_CTX: SimulationContext | None = None


def _worker_init(plan: CampaignPlan) -> None:
    global _WORKER_CTX
    _WORKER_CTX = SimulationContext(plan)


def _worker_range(span) -> dict:
    lo, hi = span
    return _tally_range(_WORKER_CTX, lo, hi)


_CHUNK = 1000


def run_campaign(
    plan: CampaignPlan,
    workers: int | None = None,
    progress=None,
) -> "CampaignReport":
    """Execute a full campaign and assemble its report.

    The tally merge is commutative, so the report is identical for any
    worker count and any completion order.  progress, when given, is
    called with (done, n) as experiment chunks complete.
    """
    n = plan.n
    spans = [(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)]
    if workers is None or workers <= 1 or len(spans) == 1:
        ctx = SimulationContext(plan)
        tally = _blank_tally(ctx.sites)
        done = 0
        for span in spans:
            _merge_tally(tally, _tally_range(ctx, *span))
            done += span[1] - span[0]
            if progress is not None:
                progress(done, n)
        sites = ctx.sites
        cycles = ctx.cycles
    else:
        import multiprocessing

        mp = multiprocessing.get_context("fork")
        sites = enumerate_sites(plan.cfg, plan.variant)
        tally = _blank_tally(sites)
        done = 0
        with mp.Pool(workers, initializer=_worker_init, initargs=(plan,)) as pool:
            for part in pool.imap_unordered(_worker_range, spans):
                _merge_tally(tally, part)
                done += sum(v for v in part["outcomes"].values())
                if progress is not None:
                    progress(done, n)
        cycles = nominal_cycles(plan.cfg, plan.job.M, plan.job.N, plan.job.K, plan.job.mode)
    return CampaignReport.assemble(plan, sites, cycles, tally)


@dataclass
class CampaignReport:
    """Aggregated campaign results plus reproduction metadata."""

    data: dict

    @classmethod
    def assemble(cls, plan: CampaignPlan, sites, cycles: int, tally: dict) -> "CampaignReport":
        import math

        cfg, job = plan.cfg, plan.job
        n = plan.n
        outcomes = tally["outcomes"]
        bounds = {}
        for name in OUTCOME_CLASSES:
            if outcomes[name] == 0:
                from .stats import poisson_upper_rate

                rate = poisson_upper_rate(0, n)
                plus_one = poisson_upper_rate(1, n)
                bounds[name] = {
                    "events": 0,
                    "confidence": 0.95,
                    "upper_rate": rate,
                    "upper_percent": rate * 100.0,
                    "display": f"<{rate * 100.0:.4f}%",
                    "plus_one_upper_rate": plus_one,
                }
        percent = {
            name: outcomes[name] * 100.0 / n for name in OUTCOME_CLASSES
        }
        data = {
            "schema": REPORT_SCHEMA,
            "tool": {"name": "ftgemm", "version": __version__},
            "plan": {
                "L": cfg.L,
                "H": cfg.H,
                "P": cfg.P,
                "watchdog_factor": cfg.watchdog_factor,
                "M": job.M,
                "N": job.N,
                "K": job.K,
                "x_addr": job.x_addr,
                "w_addr": job.w_addr,
                "y_addr": job.y_addr,
                "z_addr": job.z_addr,
                "mode": job.mode.value,
                "variant": plan.variant.value,
                "n": n,
                "seed": plan.seed,
                "operand_seed": plan.operand_seed,
                "mem_image": plan.mem_image,
                "capacity": plan.capacity,
            },
            "engine": {
                "nominal_cycles": cycles,
                "watchdog_limit": math.ceil(cfg.watchdog_factor * cycles),
                "fault_population_bits": total_fault_bits(sites),
                "site_count": len(sites),
            },
            "outcomes": dict(outcomes),
            "outcomes_percent": percent,
            "poisson_bounds": bounds,
            "per_category": tally["categories"],
            "detectors": tally["detectors"],
            "retries_total": tally["retries"],
            "double_detections": tally["double_detections"],
        }
        return cls(data)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CampaignReport":
        data = json.loads(text)
        if data.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {data.get('schema')!r}")
        return cls(data)

    def summary_lines(self):
        d = self.data
        n = d["plan"]["n"]
        yield (
            f"{d['plan']['variant']}/{d['plan']['mode']} "
            f"M={d['plan']['M']} N={d['plan']['N']} K={d['plan']['K']} "
            f"n={n} seed={d['plan']['seed']}"
        )
        for name in OUTCOME_CLASSES:
            count = d["outcomes"][name]
            pct = d["outcomes_percent"][name]
            extra = ""
            if name in d["poisson_bounds"]:
                extra = f"  (95% upper bound {d['poisson_bounds'][name]['display']})"
            yield f"  {name:18s} {count:>9d}  {pct:7.3f}%{extra}"
