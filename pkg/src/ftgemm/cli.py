"""Command line front end.

Four subcommands: `run` executes one job (optionally with an armed
transient), `campaign` runs an injection campaign and writes its report,
`sites` lists the injectable site catalog of a build, and `report`
renders a campaign report to CSV tables and PNG charts.

Exit codes: 0 success, 1 the run finished but the result is wrong or
the engine hung, 2 usage or configuration errors, 3 file I/O errors.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os

import click

from ._version import __version__
from .engine import ConfigurationError, EngineConfig, Mode, Variant
from .faults import (
    OUTCOME_CLASSES,
    CampaignPlan,
    CampaignReport,
    FaultSpecError,
    enumerate_sites,
    parse_fault_spec,
    run_with_fault,
)
from .jobfile import JobFileError, build_tcdm, parse_jobfile
from .report import write_report_bundle, write_summary_csv

_VARIANTS = {v.value: v for v in Variant}
_MODES = {m.value: m for m in Mode}


def _io_fail(exc: OSError):
    click.echo(f"i/o error: {exc}", err=True)
    raise SystemExit(3)


def _load_setup(jobfile: str):
    try:
        return parse_jobfile(jobfile)
    except OSError as exc:
        _io_fail(exc)
    except (JobFileError, ConfigurationError) as exc:
        raise click.UsageError(str(exc)) from None


def _with_mode(job, mode_name):
    if mode_name is None or _MODES[mode_name] is job.mode:
        return job
    return dataclasses.replace(job, mode=_MODES[mode_name])


@click.group()
@click.version_option(__version__, prog_name="ftgemm")
def cli():
    """Fault-tolerant FP16 matrix engine simulator and injection campaigns."""


@cli.command("run")
@click.argument("jobfile", type=click.Path(exists=True, dir_okay=False))
@click.option("--variant", type=click.Choice(sorted(_VARIANTS)), default=Variant.FULL.value,
              show_default=True, help="Engine build variant.")
@click.option("--mode", type=click.Choice(sorted(_MODES)), default=None,
              help="Override the mode given in the job file.")
@click.option("--fault", "fault_spec", metavar="SPEC", default=None,
              help="Arm one transient: SITE[:bit=B][:cycle=C]; see `ftgemm sites`.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write a machine readable run report.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True, help="Format of the --out report.")
def cmd_run(jobfile, variant, mode, fault_spec, out_path, fmt):
    """Run one job and compare the result against the fault-free reference."""
    setup = _load_setup(jobfile)
    var = _VARIANTS[variant]
    job = _with_mode(setup.job, mode)
    try:
        tcdm, _, golden = build_tcdm(setup, var)
    except OSError as exc:
        _io_fail(exc)
    except (JobFileError, ValueError) as exc:
        raise click.UsageError(str(exc)) from None
    site = armed = None
    if fault_spec:
        try:
            site, armed = parse_fault_spec(fault_spec, enumerate_sites(setup.cfg, var))
        except FaultSpecError as exc:
            raise click.UsageError(str(exc)) from None
    try:
        res = run_with_fault(setup.cfg, tcdm, var, job, armed)
    except ConfigurationError as exc:
        raise click.UsageError(str(exc)) from None
    final = res.final
    ok = final.completed and final.z == golden

    click.echo(f"status     {final.status.value}  ({final.cycles} cycles)")
    if armed is not None:
        click.echo(f"fault      {site.site_id} bit={armed.bit} cycle={armed.cycle}")
    detail = f"  detector={res.detector}" if res.detector else ""
    click.echo(f"retries    {res.retries}{detail}")
    click.echo("result     " + ("matches the fault-free reference" if ok
                                else "DOES NOT match the fault-free reference"))

    if out_path:
        doc = {
            "schema": "ftgemm.run/1",
            "jobfile": os.path.abspath(jobfile),
            "variant": var.value,
            "mode": job.mode.value,
            "fault": (
                {"site": site.site_id, "bit": armed.bit, "cycle": armed.cycle}
                if armed is not None else None
            ),
            "status": final.status.value,
            "cycles": final.cycles,
            "retries": res.retries,
            "detector": res.detector,
            "fault_flags": res.first.fault_flags,
            "interrupt_pulses": [list(p) for p in res.first.interrupt_pulses],
            "result_matches_golden": ok,
            "z": [list(r) for r in final.z] if final.z is not None else None,
        }
        try:
            with open(out_path, "w") as fh:
                if fmt == "json":
                    json.dump(doc, fh, sort_keys=True, indent=2)
                    fh.write("\n")
                else:
                    w = csv.writer(fh)
                    w.writerow(["status", doc["status"], "cycles", doc["cycles"]])
                    if doc["z"] is not None:
                        for row in doc["z"]:
                            w.writerow([f"0x{v:04X}" for v in row])
        except OSError as exc:
            _io_fail(exc)
    if not ok:
        raise SystemExit(1)


@cli.command("campaign")
@click.argument("jobfile", type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n", type=int, required=True, help="Number of injection experiments.")
@click.option("--variant", type=click.Choice(sorted(_VARIANTS)), default=Variant.FULL.value,
              show_default=True)
@click.option("--mode", type=click.Choice(sorted(_MODES)), default=None,
              help="Override the mode given in the job file.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for the per-experiment site/cycle draws.")
@click.option("--workers", type=int, default=None,
              help="Worker processes (default: CPU count). Results are identical for any value.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="campaign.json",
              show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True, help="Format of the --out report (json is machine readable).")
def cmd_campaign(jobfile, n, variant, mode, seed, workers, out_path, fmt):
    """Run a transient injection campaign and write its report."""
    setup = _load_setup(jobfile)
    var = _VARIANTS[variant]
    job = _with_mode(setup.job, mode)
    try:
        plan = CampaignPlan(
            cfg=setup.cfg, job=job, variant=var, n=n, seed=seed,
            capacity=setup.capacity, operand_seed=setup.operand_seed,
            mem_image=setup.mem_image,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    if workers is None:
        workers = os.cpu_count() or 1

    partial = out_path + ".partial"

    def progress(done, total):
        try:
            with open(partial, "w") as fh:
                fh.write(f"{done}/{total}\n")
        except OSError:
            pass

    from .faults import run_campaign

    try:
        rep = run_campaign(plan, workers=workers, progress=progress)
    except (ConfigurationError, ValueError) as exc:
        raise click.UsageError(str(exc)) from None
    except OSError as exc:
        _io_fail(exc)

    tmp = out_path + ".tmp"
    try:
        if fmt == "json":
            with open(tmp, "w") as fh:
                fh.write(rep.to_json())
        else:
            write_summary_csv(rep, tmp)
        os.replace(tmp, out_path)
        if os.path.exists(partial):
            os.unlink(partial)
    except OSError as exc:
        _io_fail(exc)

    for line in rep.summary_lines():
        click.echo(line)
    click.echo(f"report written to {out_path}")


@cli.command("sites")
@click.option("--job", "jobfile", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Take the engine geometry from a job file.")
@click.option("-L", "dim_l", type=int, default=12, show_default=True)
@click.option("-H", "dim_h", type=int, default=4, show_default=True)
@click.option("-P", "dim_p", type=int, default=3, show_default=True)
@click.option("--variant", type=click.Choice(sorted(_VARIANTS)), default=Variant.FULL.value,
              show_default=True)
@click.option("--counts", is_flag=True, help="Print per-category bit totals instead of each site.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="csv",
              show_default=True)
def cmd_sites(jobfile, dim_l, dim_h, dim_p, variant, counts, fmt):
    """List the injectable fault sites of a build, in catalog order."""
    if jobfile is not None:
        cfg = _load_setup(jobfile).cfg
    else:
        try:
            cfg = EngineConfig(L=dim_l, H=dim_h, P=dim_p)
        except ConfigurationError as exc:
            raise click.UsageError(str(exc)) from None
    sites = enumerate_sites(cfg, _VARIANTS[variant])
    if counts:
        per_cat: dict = {}
        for s in sites:
            entry = per_cat.setdefault(s.category, [0, 0])
            entry[0] += 1
            entry[1] += s.width
        if fmt == "json":
            doc = {
                cat: {"sites": c, "bits": b} for cat, (c, b) in per_cat.items()
            }
            doc["total"] = {
                "sites": len(sites),
                "bits": sum(s.width for s in sites),
            }
            click.echo(json.dumps(doc, indent=2, sort_keys=True))
        else:
            click.echo("category,sites,bits")
            for cat, (c, b) in per_cat.items():
                click.echo(f"{cat},{c},{b}")
            click.echo(f"total,{len(sites)},{sum(s.width for s in sites)}")
        return
    if fmt == "json":
        doc = [
            {"site_id": s.site_id, "category": s.category, "width": s.width, "kind": s.kind}
            for s in sites
        ]
        click.echo(json.dumps(doc, indent=2))
    else:
        click.echo("site_id,category,width,kind")
        for s in sites:
            click.echo(f"{s.site_id},{s.category},{s.width},{s.kind}")


@cli.command("report")
@click.argument("report_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default="report_out",
              show_default=True, help="Directory for the rendered tables and charts.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def cmd_report(report_path, out_dir, figures):
    """Render a campaign report to CSV tables and PNG charts."""
    try:
        with open(report_path) as fh:
            rep = CampaignReport.from_json(fh.read())
    except OSError as exc:
        _io_fail(exc)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    try:
        paths = write_report_bundle(rep, out_dir, figures=figures)
    except OSError as exc:
        _io_fail(exc)
    for p in paths:
        click.echo(p)


main = cli

if __name__ == "__main__":
    main()
