"""Command-line client for the engine.

Every command is a thin call against the HTTP service. By default the
service runs in-process (no socket, same request/response semantics); pass
--server to talk to a running `textbfgs serve` instead.
"""

from __future__ import annotations

import asyncio
import json
from pathlib import Path

import click
import httpx

from .config import EngineConfig, load_config


class CliState:
    """Lazily builds the config, app, and transport for one invocation."""

    def __init__(self, config_path: str | None, server: str | None):
        self.config_path = config_path
        self.server = server
        self._config: EngineConfig | None = None

    @property
    def config(self) -> EngineConfig:
        if self._config is None:
            self._config = load_config(self.config_path)
        return self._config

    def call(self, method: str, path: str, payload: dict | None = None, params: dict | None = None) -> dict:
        if self.server:
            try:
                with httpx.Client(base_url=self.server, timeout=None) as client:
                    response = client.request(method, path, json=payload, params=params)
            except httpx.TransportError as exc:
                raise click.ClickException(f"cannot reach {self.server}: {exc}") from exc
        else:
            response = asyncio.run(self._in_process(method, path, payload, params))
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise click.ClickException(f"HTTP {response.status_code}: {detail}")
        return response.json()

    async def _in_process(self, method: str, path: str, payload: dict | None, params: dict | None):
        from .service import create_app

        transport = httpx.ASGITransport(app=create_app(self.config))
        async with httpx.AsyncClient(transport=transport, base_url="http://textbfgs", timeout=None) as client:
            return await client.request(method, path, json=payload, params=params)


pass_state = click.make_pass_decorator(CliState)


def _parse_assignment(pairs: tuple[str, ...]) -> dict[str, str]:
    assignment: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.BadParameter(f"expected KIND=STORE_PATH, got {pair!r}")
        kind, path = pair.split("=", 1)
        assignment[kind] = path
    return assignment


def _echo_json(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("--config", "-c", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Engine config file (YAML).")
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running server; default runs the service in-process.")
@click.version_option(package_name="textbfgs")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, server: str | None) -> None:
    """Iterative LLM code repair with a self-evolving correction memory."""
    ctx.obj = CliState(config_path, server)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8747, show_default=True, type=int)
@pass_state
def serve(state: CliState, host: str, port: int) -> None:
    """Run the HTTP service."""
    if state.server:
        raise click.ClickException("serve starts a local server; --server makes no sense here")
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(state.config), host=host, port=port)


@main.command("filter")
@click.argument("dataset", type=click.Path())
@click.option("--out", "-o", type=click.Path(), default=None, help="Write the manifest here.")
@click.option("--json", "as_json", is_flag=True, help="Print the raw response.")
@pass_state
def filter_cmd(state: CliState, dataset: str, out: str | None, as_json: bool) -> None:
    """Keep only tasks whose sampled solution passes zero base tests."""
    data = state.call("POST", "/filter", {"dataset": dataset, "out": out})
    if as_json:
        _echo_json(data)
        return
    click.echo(f"kept {len(data['kept'])}, dropped {len(data['dropped'])}, errors {len(data['errors'])}")
    for task_id in data["kept"]:
        click.echo(f"  kept {task_id}")
    for entry in data["errors"]:
        click.echo(f"  error {entry['task_id']}: {entry['error']}")
    if out:
        click.echo(f"manifest written to {out}")


@main.command()
@click.argument("dataset", type=click.Path())
@click.option("--store", required=True, type=click.Path(), help="Case store file (created if missing).")
@click.option("--manifest", type=click.Path(), default=None, help="Filter manifest with frozen starts.")
@click.option("--epochs", default=3, show_default=True, type=int)
@click.option("--dim", default=None, type=int, help="Store dimension when creating a new store.")
@click.option("--domain-tag", default="", help="Tag stored cases with a domain name.")
@pass_state
def bootstrap(state: CliState, dataset: str, store: str, manifest: str | None,
              epochs: int, dim: int | None, domain_tag: str) -> None:
    """Populate a case store by repairing tasks without retrieval."""
    data = state.call("POST", "/bootstrap", {
        "dataset": dataset, "store": store, "manifest": manifest,
        "epochs": epochs, "dim": dim, "domain_tag": domain_tag,
    })
    click.echo(f"added {data['cases_added']} cases; store {data['store']} now holds {data['store_size']}")


@main.command()
@click.argument("dataset", type=click.Path())
@click.argument("task_id")
@click.option("--x0-file", type=click.Path(exists=True), default=None,
              help="Start from this file's contents instead of sampling.")
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--store", type=click.Path(), default=None, help="Case store for retrieval/retention.")
@click.option("--persist-store", is_flag=True, help="Write retained cases back to the store file.")
@click.option("--kind", default=None, help="Strategy kind override.")
@click.option("--max-steps", default=None, type=int)
@click.option("--top-k", default=None, type=int)
@click.option("--out", type=click.Path(), default=None, help="Write the full trace JSON here.")
@click.option("--json", "as_json", is_flag=True, help="Print the full trace.")
@pass_state
def optimize(state: CliState, dataset: str, task_id: str, x0_file: str | None,
             manifest: str | None, store: str | None, persist_store: bool,
             kind: str | None, max_steps: int | None, top_k: int | None,
             out: str | None, as_json: bool) -> None:
    """Repair one task and report the trace."""
    overrides = {k: v for k, v in {"kind": kind, "max_steps": max_steps, "top_k": top_k}.items()
                 if v is not None}
    payload = {
        "dataset": dataset, "task_id": task_id,
        "x0": Path(x0_file).read_text("utf-8") if x0_file else None,
        "manifest": manifest, "store": store, "persist_store": persist_store,
        "strategy": overrides or None,
    }
    data = state.call("POST", "/optimize", payload)
    trace = data["trace"]
    if out:
        Path(out).write_text(json.dumps(trace, indent=2, sort_keys=True) + "\n", "utf-8")
    if as_json:
        _echo_json(trace)
        return
    click.echo(
        f"{trace['task_id']}: {trace['stopped_reason']} after {trace['steps_used']} steps "
        f"(base {trace['report0']['base_score']:.2f} -> {trace['best_report']['base_score']:.2f}, "
        f"{trace['ledger']['chat_calls']} chat calls)"
    )
    if data["retained_case_ids"]:
        click.echo(f"retained: {', '.join(data['retained_case_ids'])}")
    if out:
        click.echo(f"trace written to {out}")


@main.command()
@click.argument("dataset", type=click.Path())
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--strategy", "strategies", multiple=True, required=True,
              help="Strategy kind; repeat for several rows.")
@click.option("--casebase", "casebases", multiple=True, metavar="KIND=STORE",
              help="Case store per strategy kind; repeat as needed.")
@click.option("--persist-stores", is_flag=True,
              help="Let bench retention modify the store files (default: snapshots).")
@click.option("--out", type=click.Path(), default=None, help="Directory for report + traces.")
@click.option("--max-steps", default=None, type=int)
@click.option("--domain-tag", default="")
@click.option("--json", "as_json", is_flag=True, help="Print the raw report.")
@pass_state
def bench(state: CliState, dataset: str, manifest: str | None, strategies: tuple[str, ...],
          casebases: tuple[str, ...], persist_stores: bool, out: str | None,
          max_steps: int | None, domain_tag: str, as_json: bool) -> None:
    """Run the strategy-by-task matrix and print the metrics table."""
    payload = {
        "dataset": dataset, "manifest": manifest,
        "strategies": list(strategies), "assignment": _parse_assignment(casebases),
        "persist_stores": persist_stores, "out": out, "domain_tag": domain_tag,
        "strategy": {"max_steps": max_steps} if max_steps is not None else None,
    }
    data = state.call("POST", "/bench", payload)
    if as_json:
        _echo_json(data["report"])
        return
    click.echo(data["table"])
    if out:
        click.echo(f"report written to {out}/report.json")


@main.group()
def casebase() -> None:
    """Inspect and move case stores."""


@casebase.command()
@click.argument("store", type=click.Path())
@click.option("--query", default=None, help="Also run a retrieval with this text.")
@click.option("--key", type=click.Choice(["gradient", "problem"]), default="gradient", show_default=True)
@click.option("-k", default=3, show_default=True, type=int)
@click.option("--json", "as_json", is_flag=True)
@pass_state
def inspect(state: CliState, store: str, query: str | None, key: str, k: int, as_json: bool) -> None:
    """Show store size, dimension, and provenance counts."""
    data = state.call("GET", "/casebase/stats", params={"store": store})
    if as_json and query is None:
        _echo_json(data)
        return
    click.echo(f"{data['path']}: {data['size']} cases, dim {data['dim']}")
    for source, count in sorted(data["sources"].items()):
        click.echo(f"  source {source}: {count}")
    for tag, count in sorted(data["domain_tags"].items()):
        click.echo(f"  domain {tag}: {count}")
    if query is not None:
        hits = state.call("POST", "/casebase/retrieve",
                          {"store": store, "query": query, "key": key, "k": k})
        if as_json:
            _echo_json(hits)
            return
        for hit in hits["hits"]:
            click.echo(f"  #{hit['rank']} {hit['case_id']} sim={hit['similarity']:.4f}: {hit['operator']}")


@casebase.command("export")
@click.argument("store", type=click.Path())
@click.argument("out", type=click.Path())
@pass_state
def casebase_export(state: CliState, store: str, out: str) -> None:
    """Write a snapshot of a store to a new file."""
    data = state.call("POST", "/casebase/export", {"store": store, "out": out})
    click.echo(f"exported {data['exported']} cases to {data['out']}")


@casebase.command("import")
@click.argument("store", type=click.Path())
@click.argument("source", type=click.Path())
@click.option("--dim", default=None, type=int, help="Dimension when creating the destination.")
@pass_state
def casebase_import(state: CliState, store: str, source: str, dim: int | None) -> None:
    """Append every case from SOURCE into STORE (created if missing)."""
    data = state.call("POST", "/casebase/import", {"store": store, "source": source, "dim": dim})
    click.echo(f"imported {data['imported']} cases; store now holds {data['store_size']}")


@main.group()
def replay() -> None:
    """Record and verify deterministic replay fixtures."""


@replay.command()
@click.argument("dataset", type=click.Path())
@click.option("--fixture-out", required=True, type=click.Path())
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--strategy", "strategies", multiple=True, required=True)
@click.option("--casebase", "casebases", multiple=True, metavar="KIND=STORE")
@click.option("--domain-tag", default="")
@pass_state
def record(state: CliState, dataset: str, fixture_out: str, manifest: str | None,
           strategies: tuple[str, ...], casebases: tuple[str, ...], domain_tag: str) -> None:
    """Run a bench against the configured backend, capturing every response."""
    data = state.call("POST", "/replay/record", {
        "dataset": dataset, "fixture_out": fixture_out, "manifest": manifest,
        "strategies": list(strategies), "assignment": _parse_assignment(casebases),
        "domain_tag": domain_tag,
    })
    click.echo(f"recorded {data['recorded_responses']} responses to {data['fixture']}")


@replay.command()
@click.argument("dataset", type=click.Path())
@click.option("--fixture", required=True, type=click.Path())
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--strategy", "strategies", multiple=True, required=True)
@click.option("--casebase", "casebases", multiple=True, metavar="KIND=STORE")
@click.option("--domain-tag", default="")
@pass_state
def verify(state: CliState, dataset: str, fixture: str, manifest: str | None,
           strategies: tuple[str, ...], casebases: tuple[str, ...], domain_tag: str) -> None:
    """Replay a fixture twice and fail unless the reports match byte-for-byte."""
    data = state.call("POST", "/replay/verify", {
        "dataset": dataset, "fixture": fixture, "manifest": manifest,
        "strategies": list(strategies), "assignment": _parse_assignment(casebases),
        "domain_tag": domain_tag,
    })
    if data["deterministic"]:
        click.echo(f"deterministic across {data['runs']} runs")
    else:
        raise click.ClickException("replay runs diverged; the fixture or config is unstable")


if __name__ == "__main__":
    main()
