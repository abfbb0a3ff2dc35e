"""Command-line entry point (``clusterlb``).

Every flag can also be set through an environment variable named
``CLUSTERLB_<SUBCOMMAND>_<FLAG>`` (e.g. ``CLUSTERLB_SIMULATE_SEED``);
explicit flags take precedence.
"""

from __future__ import annotations

import logging
import os
import re
import sys
from pathlib import Path

import click
import yaml

from . import agent as agent_mod
from .control import (
    DEFAULT_CONTROL_PORT,
    DEFAULT_MAX_REPLICAS,
    ControlError,
    decode_control,
    encode_control,
)
from .dataplane import LpmTable, RouteFileError
from .netsim import (
    Scenario,
    SimError,
    Topology,
    build_topology,
    export_report,
    default_topology,
    run_scenario,
    run_state_change_experiment,
    scaled_state,
)

ENV_PREFIX = "CLUSTERLB"


def hexdump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = data[off: off + width]
        lines.append(f"{off:04x}: {' '.join(f'{b:02x}' for b in chunk)}")
    return "\n".join(lines)


def parse_hex(text: str) -> bytes:
    """Accept plain hex or :func:`hexdump` output; ``#`` starts a comment."""
    digits = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        line = re.sub(r"^\s*[0-9a-fA-F]+:", "", line)
        digits.append(re.sub(r"\s+", "", line))
    joined = "".join(digits)
    if joined.lower().startswith("0x"):
        joined = joined[2:]
    try:
        return bytes.fromhex(joined)
    except ValueError as exc:
        raise click.ClickException(f"invalid hex input: {exc}") from None


def _yaml_error(path: str, exc: yaml.YAMLError) -> click.ClickException:
    mark = getattr(exc, "problem_mark", None)
    where = f":{mark.line + 1}" if mark is not None else ""
    return click.ClickException(f"{path}{where}: {getattr(exc, 'problem', None) or exc}")


def _load_yaml(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise click.ClickException(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise _yaml_error(path, exc) from None
    if not isinstance(doc, dict):
        raise click.ClickException(f"{path}:1: expected a mapping at top level")
    return doc


@click.group(context_settings={"auto_envvar_prefix": ENV_PREFIX})
@click.option("-v", "--verbose", is_flag=True, help="Debug logging on stderr.")
def main(verbose: bool) -> None:
    """In-network load balancer: simulator, agent and control-packet tools."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )


# ---------------------------------------------------------------------------
# simulate


def _summary(report) -> str:
    rows = [(name, "" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)))
            for name, v in report.metrics()]
    width = max(len(n) for n, _ in rows)
    out = [f"{n.ljust(width)}  {v}" for n, v in rows]
    out.append("")
    out.append("node        requests")
    out += [f"{n.ljust(10)}  {c}" for n, c in sorted(report.per_node_request_counts.items())]
    for failure in report.invariant_failures:
        out.append(f"INVARIANT FAILED: {failure}")
    return "\n".join(out)


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(dir_okay=False))
@click.option("--topology", "topology_path", type=click.Path(dir_okay=False),
              help="Topology file; defaults to the 10-worker evaluation layout.")
@click.option("--seed", type=int, help="Overrides the scenario seed.")
@click.option("--out", "out_dir", default=".", type=click.Path(file_okay=False), show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "text"]), default="csv", show_default=True)
@click.option("--poll-interval", type=float, help="Overrides the scenario poll interval.")
@click.option("--control-port", type=int, help="Overrides the scenario control port.")
@click.option("--max-replicas", type=int, help="Overrides the scenario replica cap.")
def simulate(scenario_path, topology_path, seed, out_dir, fmt, poll_interval, control_port, max_replicas):
    """Run a scenario and write its report files to --out."""
    doc = _load_yaml(scenario_path)
    experiment = doc.pop("experiment", None)
    workers = doc.pop("workers", 10)
    for key, value in (("seed", seed), ("poll_interval", poll_interval),
                       ("control_port", control_port), ("max_replicas", max_replicas)):
        if value is not None:
            doc[key] = value
    try:
        scenario = Scenario.from_dict(doc)
        topo = Topology.from_dict(_load_yaml(topology_path)) if topology_path else default_topology(workers)
        sim = build_topology(topo)
        if experiment is None:
            report = run_scenario(sim, scenario)
        elif experiment.get("type") == "state_change":
            base = sim.default_state(scenario)
            change = scaled_state(sim, base, list(experiment["scale_to"]))
            report = run_state_change_experiment(
                sim, float(experiment["change_at"]), change, scenario,
                duration_after=float(experiment.get("duration_after", 10.0)),
            )
        else:
            raise SimError(f"unknown experiment type {experiment.get('type')!r}")
    except (SimError, KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"{scenario_path}: {exc}") from None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        (out / "nodes.csv").write_bytes(export_report(report, "csv"))
        (out / "metrics.csv").write_bytes(export_report(report, "metrics"))
    else:
        (out / "report.txt").write_bytes(export_report(report, "text"))
    click.echo(_summary(report))
    sys.exit(0 if report.ok else 1)


# ---------------------------------------------------------------------------
# control packets


def _field_table(payload) -> str:
    rows = payload.describe()
    width = max(len(n) for n, _ in rows)
    return "\n".join(f"{n.ljust(width)}  {v}" for n, v in rows)


@main.command("control-encode")
@click.option("--state", "state_path", required=True, type=click.Path(dir_okay=False))
@click.option("--max-replicas", type=int, default=DEFAULT_MAX_REPLICAS, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Also write plain hex here.")
def control_encode(state_path, max_replicas, out_path):
    """Encode the control message for a cluster-state file and print a hex dump."""
    try:
        state = agent_mod.snapshot(state_path)
        payload = agent_mod.build_payload(state, max_replicas)
        data = encode_control(payload, max_replicas)
    except (agent_mod.AgentError, ControlError) as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(hexdump(data))
    if out_path:
        Path(out_path).write_text(data.hex() + "\n")
    ok = decode_control(data, max_replicas) == payload
    click.echo(f"{len(data)} bytes, roundtrip: {'PASS' if ok else 'FAIL'}")
    sys.exit(0 if ok else 1)


@main.command("control-decode")
@click.option("--hex", "hex_text", help="Hex string to decode.")
@click.option("--in", "in_path", type=click.Path(dir_okay=False), help="Hex dump file to decode.")
@click.option("--max-replicas", type=int, default=DEFAULT_MAX_REPLICAS, show_default=True)
def control_decode(hex_text, in_path, max_replicas):
    """Decode a control message, print its fields and re-encode it."""
    if (hex_text is None) == (in_path is None):
        raise click.UsageError("give exactly one of --hex or --in")
    if in_path is not None:
        try:
            hex_text = Path(in_path).read_text()
        except OSError as exc:
            raise click.ClickException(f"{in_path}: {exc.strerror}") from None
    data = parse_hex(hex_text)
    try:
        payload = decode_control(data, max_replicas)
    except ControlError as exc:
        where = f" (field {exc.field} at offset {exc.offset})" if exc.field else ""
        raise click.ClickException(f"{type(exc).__name__}: {exc}{where}") from None
    click.echo(_field_table(payload))
    ok = encode_control(payload, max_replicas) == data
    click.echo(f"roundtrip: {'PASS' if ok else 'FAIL'}")
    sys.exit(0 if ok else 1)


# ---------------------------------------------------------------------------
# agent


def _endpoint(text: str, default_port: int) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text, default_port
    return host, int(port)


@main.command()
@click.option("--state", "state_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dataplane", default="127.0.0.1", show_default=True,
              help="HOST[:PORT] of the dataplane; PORT defaults to --control-port.")
@click.option("--poll-interval", type=float, default=2.0, show_default=True)
@click.option("--control-port", type=int, default=DEFAULT_CONTROL_PORT, show_default=True)
@click.option("--max-replicas", type=int, default=DEFAULT_MAX_REPLICAS, show_default=True)
@click.option("--max-polls", type=int, help="Stop after this many polls (default: run forever).")
def agent(state_path, dataplane, poll_interval, control_port, max_replicas, max_polls):
    """Watch a cluster-state file and send control packets over UDP."""
    try:
        state = agent_mod.snapshot(state_path)
        agent_mod.build_payload(state, max_replicas)
        config = agent_mod.AgentConfig(
            state_source=os.fspath(state_path),
            poll_interval=poll_interval,
            control_port=control_port,
            dataplane_endpoint=_endpoint(dataplane, control_port),
            max_replicas=max_replicas,
        )
    except (agent_mod.AgentError, ControlError, ValueError) as exc:
        raise click.ClickException(str(exc)) from None
    try:
        agent_mod.run_agent(config, max_polls=max_polls)
    except KeyboardInterrupt:
        pass


# ---------------------------------------------------------------------------
# routes


@main.command("routes-check")
@click.option("--routes", "routes_path", required=True, type=click.Path(dir_okay=False))
def routes_check(routes_path):
    """Validate a route file and print the normalized table."""
    try:
        text = Path(routes_path).read_text()
    except OSError as exc:
        raise click.ClickException(f"{routes_path}: {exc.strerror}") from None
    try:
        table = LpmTable.loads(text)
    except RouteFileError as exc:
        raise click.ClickException(f"{routes_path}: {exc}") from None
    click.echo(table.dumps(), nl=False)
    click.echo(f"{len(table)} routes OK")


if __name__ == "__main__":
    main()
