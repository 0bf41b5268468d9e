"""Fault catalog, injection protocol, outcome classification and campaign
reproducibility tests."""

import json

import pytest

from ftgemm import (
    ArmedFault,
    CampaignReport,
    Engine,
    FaultSpecError,
    Mode,
    RunStatus,
    SimulationContext,
    Tcdm,
    Variant,
    classify_outcome,
    enumerate_sites,
    parse_fault_spec,
    plan_for_dims,
    run_campaign,
    run_with_fault,
    total_fault_bits,
)
from ftgemm.engine import RunOutcome
from ftgemm.faults import (
    OUTCOME_CLASSES,
    OUTCOME_CORRECT,
    OUTCOME_INCORRECT,
    OUTCOME_RETRY,
    OUTCOME_TIMEOUT,
    _prefix_sums,
    pack_rows,
    seed_operands,
    site_for_bit,
    unpack_rows,
)
from ftgemm.fp16 import fp16_to_real

from conftest import REF_CFG, make_job


# Site catalog -----------------------------------------------------------


def bits_by_category(sites):
    out = {}
    for s in sites:
        out[s.category] = out.get(s.category, 0) + s.width
    return out


def test_full_build_site_population():
    sites = enumerate_sites(REF_CFG, Variant.FULL)
    by_cat = bits_by_category(sites)
    assert by_cat == {
        "x_data": 12 * 16,
        "y_data": 48 * 16,
        "w_broadcast": 48 * 16 + 48,  # data lanes plus one parity rail each
        "z_writeback": 48 * 16,
        "ce_pipeline_state": 12 * 4 * 3 * 16,
        "streamer_ctrl": 2 * 96,
        "buffer_ctrl": 2 * 9,
        "fsm_state": 2 * 44,
        "regfile_bit": 9 * 32,
        "checker_input": 12 * 64,
        "mem_response_bit": 4 * 39,
        "interrupt_wire": 1,
    }
    assert len(sites) == 380
    assert total_fault_bits(sites) == 6359


def test_leaner_builds_drop_their_missing_hardware():
    full = total_fault_bits(enumerate_sites(REF_CFG, Variant.FULL))
    data_only = total_fault_bits(enumerate_sites(REF_CFG, Variant.DATA_ONLY))
    baseline = total_fault_bits(enumerate_sites(REF_CFG, Variant.BASELINE))
    # Dropping the lockstep copies removes one streamer, one buffer and one
    # sequencer instance plus the parity word.
    assert full - data_only == 96 + 9 + 44 + 32
    # The baseline additionally loses the broadcast parity rails, the
    # checker taps, and the response check bits.
    assert data_only - baseline == 48 + 12 * 64 + 4 * 7


def test_catalog_order_is_stable():
    sites = enumerate_sites(REF_CFG, Variant.FULL)
    assert sites[0].site_id == "x_data[0]"
    assert sites[-1].site_id == "interrupt_wire"
    # Category blocks appear in a fixed order.
    order = []
    for s in sites:
        if not order or order[-1] != s.category:
            order.append(s.category)
    assert order == [
        "x_data", "y_data", "w_broadcast", "z_writeback",
        "ce_pipeline_state", "streamer_ctrl", "buffer_ctrl", "fsm_state",
        "regfile_bit", "checker_input", "mem_response_bit", "interrupt_wire",
    ]


def test_site_for_bit_inverts_prefix_sums():
    sites = enumerate_sites(REF_CFG, Variant.FULL)
    prefix = _prefix_sums(sites)
    total = total_fault_bits(sites)
    assert prefix[-1] == total
    # Walk every site boundary plus interior probes.
    cursor = 0
    for s in sites:
        site, bit = site_for_bit(sites, prefix, cursor)
        assert (site, bit) == (s, 0)
        site, bit = site_for_bit(sites, prefix, cursor + s.width - 1)
        assert (site, bit) == (s, s.width - 1)
        cursor += s.width
    assert cursor == total


# Fault spec parsing -----------------------------------------------------


def test_parse_fault_spec_forms(ft_full_ctx):
    sites = ft_full_ctx.sites
    site, fault = parse_fault_spec("y_data[3,1]:bit=7:cycle=42", sites)
    assert site.site_id == "y_data[3,1]"
    assert fault == ArmedFault("y_data", (3, 1), 7, 42)

    site, fault = parse_fault_spec("fsm_state", sites)
    assert site.index == ("primary",)
    assert (fault.bit, fault.cycle) == (0, 0)

    site, _ = parse_fault_spec("regfile_bit#8", sites)
    assert site.site_id == "regfile_bit[8]"

    site, fault = parse_fault_spec("interrupt_wire:cycle=0x10", sites)
    assert fault.cycle == 16


@pytest.mark.parametrize(
    "spec",
    [
        "no_such_site",
        "y_data[3,1]:bit=16",           # width is 16, bits go 0..15
        "y_data[3,1]:bit=x",
        "y_data[3,1]:cycle=-1",
        "y_data[3,1]:weird=1",
        "y_data[3,1]#2",                # '#k' only applies to categories
        "x_data#400",
        "x_data#q",
    ],
)
def test_parse_fault_spec_rejects(spec, ft_full_ctx):
    with pytest.raises(FaultSpecError):
        parse_fault_spec(spec, ft_full_ctx.sites)


# Targeted injections ----------------------------------------------------
#
# Reference fault-tolerant schedule (L=12, H=4, P=3, 12x16x16): cycle 0 is
# setup, each wave is 8 load cycles then four 20-cycle column chunks, and
# the run parks after cycle 177.  Handy anchors: first load cycle 1, first
# multiply cycle 10, first drain 26, first commit 28, second wave from 89.


def inject(ctx, category, index, bit, cycle):
    fault = ArmedFault(category, index, bit, cycle)
    res = run_with_fault(
        ctx.plan.cfg, ctx.fresh_tcdm(), ctx.plan.variant, ctx.plan.job,
        fault, trace=ctx.trace,
    )
    outcome = classify_outcome(res.final, res.retries, ctx.golden)
    return res, outcome


def test_weight_stream_flip_caught_at_point_of_use(ft_full_ctx):
    for cycle in (10, 98):  # fresh fetch in wave 0, buffered replay in wave 1
        res, outcome = inject(ft_full_ctx, "w_broadcast", ("d", 5, 2), 3, cycle)
        assert res.detector == "weight_parity"
        assert res.first.first_fault_cycle == cycle
        assert outcome == OUTCOME_RETRY


def test_weight_parity_rail_flip_is_a_false_alarm_not_a_miss(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "w_broadcast", ("p", 0, 0), 0, 10)
    assert res.detector == "weight_parity"
    assert outcome == OUTCOME_RETRY


def test_x_stream_flip_diverges_the_pair(ft_full_ctx):
    # The row operand feed is live during multiplies; one corrupted factor
    # desyncs the row from its partner and the commit-time compare trips.
    res, outcome = inject(ft_full_ctx, "x_data", (4,), 9, 12)
    assert res.detector == "row_pair_mismatch"
    assert res.first.first_fault_cycle == 28  # noticed at the first commit
    assert outcome == OUTCOME_RETRY


def test_x_stream_flip_outside_multiply_phase_is_masked(ft_full_ctx):
    # During loads the operand feed carries nothing; a transient there
    # cannot reach any state.
    res, outcome = inject(ft_full_ctx, "x_data", (4,), 9, 3)
    assert res.detector is None
    assert outcome == OUTCOME_CORRECT


def test_y_stream_flip_diverges_the_pair(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "y_data", (7, 1), 0, 9)
    assert res.detector == "row_pair_mismatch"
    assert outcome == OUTCOME_RETRY


def test_writeback_flip_is_compared_before_commit(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "z_writeback", (2, 3), 15, 28)
    assert res.detector == "row_pair_mismatch"
    assert res.first.first_fault_cycle == 28
    assert outcome == OUTCOME_RETRY


def test_checker_tap_flip_reads_as_pair_mismatch(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "checker_input", (3, 0), 40, 28)
    assert res.detector == "row_pair_mismatch"
    assert outcome == OUTCOME_RETRY


def test_live_accumulator_flip_detected(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "ce_pipeline_state", (6, 2, 0), 11, 15)
    assert res.detector == "row_pair_mismatch"
    assert outcome == OUTCOME_RETRY


def test_sequencer_flip_detected_same_cycle(ft_full_ctx):
    for inst in ("primary", "replica"):
        res, outcome = inject(ft_full_ctx, "fsm_state", (inst,), 1, 30)
        assert res.detector == "fsm_mismatch"
        assert res.first.first_fault_cycle == 30
        assert res.first.cycles == 32  # fault cycle plus the pulse
        assert outcome == OUTCOME_RETRY


def test_streamer_flip_detected_same_cycle(ft_full_ctx):
    for inst in ("primary", "shadow"):
        res, outcome = inject(ft_full_ctx, "streamer_ctrl", (inst,), 30, 20)
        assert res.detector == "fsm_mismatch"
        assert res.first.first_fault_cycle == 20
        assert outcome == OUTCOME_RETRY


def test_buffer_pointer_flip_detected_same_cycle(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "buffer_ctrl", ("primary",), 0, 5)
    assert res.detector == "fsm_mismatch"
    assert outcome == OUTCOME_RETRY


def test_configuration_word_flip_detected_before_any_commit(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "regfile_bit", (1,), 0, 40)
    assert res.detector == "regfile_parity"
    assert res.first.first_fault_cycle == 40
    assert outcome == OUTCOME_RETRY


def test_response_flip_absorbed_by_the_code(ft_full_ctx):
    for port, cycle in (("x", 2), ("y", 9), ("w", 10)):
        res, outcome = inject(ft_full_ctx, "mem_response_bit", (port,), 17, cycle)
        assert res.detector is None
        assert res.retries == 0
        assert outcome == OUTCOME_CORRECT


def test_interrupt_wire_flip_is_harmless(ft_full_ctx):
    res, outcome = inject(ft_full_ctx, "interrupt_wire", (), 0, 60)
    assert res.detector is None
    assert outcome == OUTCOME_CORRECT
    assert res.final.irq_observed == frozenset({60})


def test_stored_double_error_aborts_both_attempts(ft_full_ctx):
    # Two flipped bits in a stored word defeat the correction; the retry
    # rereads the same damaged cell, so the engine never completes and the
    # host sees it as a hang.
    ctx = ft_full_ctx
    tcdm = ctx.fresh_tcdm()
    addr = ctx.plan.job.x_addr
    tcdm.poke_raw(addr, tcdm.peek_raw(addr) ^ 0b101)
    res = run_with_fault(
        ctx.plan.cfg, tcdm, ctx.plan.variant, ctx.plan.job, None, trace=ctx.trace
    )
    assert res.first.status is RunStatus.ABORTED_FAULT
    assert res.detector == "ecc_uncorrectable"
    assert res.retries == 1
    assert res.final.status is RunStatus.ABORTED_FAULT
    assert classify_outcome(res.final, res.retries, ctx.golden) == OUTCOME_TIMEOUT


def test_retry_budget_of_zero_reports_the_abort(ft_full_ctx):
    ctx = ft_full_ctx
    fault = ArmedFault("fsm_state", ("primary",), 2, 25)
    res = run_with_fault(
        ctx.plan.cfg, ctx.fresh_tcdm(), ctx.plan.variant, ctx.plan.job,
        fault, trace=ctx.trace, max_retries=0,
    )
    assert res.retries == 0
    assert res.final.status is RunStatus.ABORTED_FAULT
    assert classify_outcome(res.final, res.retries, ctx.golden) == OUTCOME_TIMEOUT


# Outcome classification -------------------------------------------------


def _outcome(status, z, stray=False):
    return RunOutcome(
        status=status, cycles=100, z=z,
        fault_flags={}, first_fault_cycle=None, first_detector=None,
        interrupt_pulses=(), irq_observed=frozenset(), stray_writes=stray,
    )


def test_classify_outcome_taxonomy():
    golden = ((1, 2), (3, 4))
    done = _outcome(RunStatus.COMPLETED, golden)
    wrong = _outcome(RunStatus.COMPLETED, ((1, 2), (3, 5)))
    hung = _outcome(RunStatus.TIMEOUT, None)
    aborted = _outcome(RunStatus.ABORTED_FAULT, None)
    assert classify_outcome(done, 0, golden) == OUTCOME_CORRECT
    assert classify_outcome(done, 1, golden) == OUTCOME_RETRY
    assert classify_outcome(wrong, 0, golden) == OUTCOME_INCORRECT
    assert classify_outcome(wrong, 1, golden) == OUTCOME_INCORRECT
    assert classify_outcome(hung, 0, golden) == OUTCOME_TIMEOUT
    assert classify_outcome(aborted, 1, golden) == OUTCOME_TIMEOUT


# Operand helpers --------------------------------------------------------


def test_seed_operands_are_unit_interval_and_deterministic():
    job, t1, _ = make_job(6, 5, 4, Mode.PERFORMANCE, seed=9)
    _, t2, _ = make_job(6, 5, 4, Mode.PERFORMANCE, seed=9)
    assert t1.cells == t2.cells
    x, w, y = unpack_rows(t1, job.x_addr, 6, 4), None, None
    for row in x:
        for pat in row:
            val = fp16_to_real(pat)
            assert abs(val) <= 1


def test_pack_unpack_roundtrip_odd_width():
    t = Tcdm(64)
    rows = ((1, 2, 3), (4, 5, 6))
    pack_rows(t, 10, rows, 3)
    assert unpack_rows(t, 10, 2, 3) == rows
    # The pad lane of an odd row is stored as zero.
    assert t.peek(11) >> 16 == 0


# Campaigns --------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_report():
    plan = plan_for_dims(
        REF_CFG, 12, 16, 16, Mode.FAULT_TOLERANT, Variant.FULL,
        n=3000, seed=11,
    )
    return run_campaign(plan, workers=1)


def test_campaign_tally_is_consistent(smoke_report):
    d = smoke_report.data
    n = d["plan"]["n"]
    assert sum(d["outcomes"].values()) == n
    per_cat = sum(sum(sub.values()) for sub in d["per_category"].values())
    assert per_cat == n
    assert set(d["outcomes"]) == set(OUTCOME_CLASSES)
    assert d["outcomes"][OUTCOME_INCORRECT] == 0
    assert d["outcomes"][OUTCOME_TIMEOUT] == 0
    assert d["retries_total"] == d["outcomes"][OUTCOME_RETRY]
    assert d["double_detections"] == 0
    assert d["engine"]["fault_population_bits"] == 6359
    assert d["engine"]["nominal_cycles"] == 178
    # Every detector that fired is a real flag name.
    assert set(d["detectors"]) <= {
        "weight_parity", "row_pair_mismatch", "fsm_mismatch",
        "regfile_parity", "ecc_uncorrectable",
    }
    assert sum(d["detectors"].values()) == d["retries_total"]


def test_campaign_bounds_cover_empty_classes(smoke_report):
    d = smoke_report.data
    for name in (OUTCOME_INCORRECT, OUTCOME_TIMEOUT):
        b = d["poisson_bounds"][name]
        assert b["events"] == 0
        assert b["upper_rate"] == pytest.approx(2.9957e-6 * 1e6 / d["plan"]["n"], rel=1e-3)
        assert b["display"].startswith("<")


def test_campaign_report_json_roundtrip(smoke_report):
    text = smoke_report.to_json()
    back = CampaignReport.from_json(text)
    assert back.data == smoke_report.data
    assert text.endswith("\n")
    assert json.loads(text)["schema"] == "ftgemm.campaign/1"
    with pytest.raises(ValueError):
        CampaignReport.from_json('{"schema": "something/else"}')


def test_campaign_is_deterministic_for_any_worker_count(smoke_report):
    plan = smoke_report and plan_for_dims(
        REF_CFG, 12, 16, 16, Mode.FAULT_TOLERANT, Variant.FULL,
        n=3000, seed=11,
    )
    again = run_campaign(plan, workers=1)
    assert again.to_json() == smoke_report.to_json()
    pooled = run_campaign(plan, workers=3)
    assert pooled.to_json() == smoke_report.to_json()


def test_experiment_draws_are_stable(ft_full_ctx):
    ctx = ft_full_ctx
    first = [ctx.draw(i) for i in range(50)]
    second = [ctx.draw(i) for i in range(50)]
    assert first == second
    rebuilt = SimulationContext(ctx.plan)
    assert [rebuilt.draw(i) for i in range(50)] == first
    # Draws cover distinct sites early on; a constant draw would mean the
    # stream is broken.
    assert len({site.site_id for site, _, _ in first}) > 10


def test_run_one_is_reproducible(ft_full_ctx):
    ctx = ft_full_ctx
    results = [ctx.run_one(i) for i in range(30)]
    assert [ctx.run_one(i) for i in range(30)] == results
    for outcome, category, retries, detector, status in results:
        assert outcome in OUTCOME_CLASSES
        assert retries in (0, 1)
