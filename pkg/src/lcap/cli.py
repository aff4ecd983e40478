"""Command line entry points.

Exit codes shared by all tools: 0 success, 1 failure, 2 bad configuration
or arguments, 3 port busy, 4 journal locked by another producer, 5
connection refused. ``LCAP_LOG`` (error, info, debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
import time

from lcap.client import SessionError, client_connect, request_stats
from lcap.config import BrokerConfig, ConfigError
from lcap.journal import FileJournal, JournalError, JournalLocked
from lcap.record import ChangelogRecord
from lcap.server import BrokerServer, PortBusy
from lcap.sim.scenario import ScenarioSpec, ScenarioStuck, parse_mask, run_scenario
from lcap.sim.verify import format_report, verify_properties
from lcap.wire import DEFAULT_PORT, Role
from lcap.workload import OpsMix, Workload

EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_PORT_BUSY = 3
EXIT_LOCKED = 4
EXIT_REFUSED = 5

log = logging.getLogger("lcap")


class _Terminated(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("LCAP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _die(code: int, message: str) -> int:
    print(f"{os.path.basename(sys.argv[0])}: {message}", file=sys.stderr)
    return code


def _on_sigterm(signum, frame):
    raise _Terminated()


# broker

def broker_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="lcap-broker", description="Run the changelog broker.")
    p.add_argument("config", help="broker configuration file")
    p.add_argument("--listen", help="override the listen address (host:port)")
    args = p.parse_args(argv)
    _setup_logging()
    try:
        cfg = BrokerConfig.load(args.config)
        if args.listen:
            from lcap.config import parse_addr
            cfg.listen = parse_addr(args.listen)
    except ConfigError as exc:
        return _die(EXIT_CONFIG, str(exc))
    try:
        server = BrokerServer(cfg)
    except (JournalError, OSError, ValueError) as exc:
        return _die(EXIT_CONFIG, f"cannot open sources: {exc}")

    async def main() -> None:
        await server.start()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, server.stop)
        host, port = server.address
        print(f"listening on {host}:{port}", flush=True)
        await server.run()

    try:
        asyncio.run(main())
    except PortBusy as exc:
        for j in server.journals:
            j.close()
        return _die(EXIT_PORT_BUSY, exc.strerror)
    return 0


# producer

def producer_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="lcap-producer",
                                description="Append synthetic records to a journal.")
    p.add_argument("--journal", required=True, help="journal directory, created if missing")
    p.add_argument("--mdt-id", type=int, default=0)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--rate", type=float, default=0, help="records per second, 0 = unthrottled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-mix", help="opcode weights, e.g. CREAT=5,UNLINK=3,RENAME=1")
    p.add_argument("--jobid-pool", type=int, default=4, help="distinct jobids, 0 = none")
    p.add_argument("--no-fsync", action="store_true", help="skip fsync after each append")
    args = p.parse_args(argv)
    _setup_logging()
    if args.count < 0 or args.rate < 0 or args.jobid_pool < 0:
        return _die(EXIT_CONFIG, "--count, --rate and --jobid-pool must not be negative")
    try:
        mix = OpsMix.parse(args.ops_mix) if args.ops_mix else None
    except ValueError as exc:
        return _die(EXIT_CONFIG, str(exc))
    try:
        journal = FileJournal.create(args.journal, args.mdt_id, writer=True,
                                     fsync=not args.no_fsync)
    except JournalLocked as exc:
        return _die(EXIT_LOCKED, str(exc))
    except (JournalError, OSError) as exc:
        return _die(EXIT_CONFIG, f"cannot open journal: {exc}")
    if journal.mdt_id != args.mdt_id:
        journal.close()
        return _die(EXIT_CONFIG, f"{args.journal} holds mdt {journal.mdt_id}, not {args.mdt_id}")
    old = signal.signal(signal.SIGTERM, _on_sigterm)
    workload = Workload(args.seed, mix, mdt_id=args.mdt_id, jobid_pool=args.jobid_pool)
    t0 = time.monotonic()
    n = 0
    try:
        for n in range(1, args.count + 1):
            journal.append(workload.next_record())
            if args.rate:
                delay = t0 + n / args.rate - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
    except _Terminated:
        n -= 1
    finally:
        journal.close()
        signal.signal(signal.SIGTERM, old)
    log.info("appended %d records, last index %d", n, journal.last_index)
    return 0


# consumer

def format_record(mdt_id: int, rec: ChangelogRecord) -> str:
    """One TAB separated output line; absent fields are ``-``."""
    jobid = rec.jobid.decode(errors="replace") if rec.jobid is not None else "-"
    ug = f"{rec.uid_gid[0]}:{rec.uid_gid[1]}" if rec.uid_gid is not None else "-"
    name = rec.name.decode(errors="replace") if rec.name else "-"
    return "\t".join((str(mdt_id), str(rec.index), rec.opcode.name, str(rec.target),
                      str(rec.parent), name, jobid, ug))


def consumer_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="lcap-consumer", description="Reference consumer.")
    p.add_argument("--server", default=f"127.0.0.1:{DEFAULT_PORT}")
    p.add_argument("--group", default="default")
    p.add_argument("--mode", choices=("persistent", "ephemeral"), default="persistent")
    p.add_argument("--fields", default="", help="extension fields: jobid,rename,uidgid")
    p.add_argument("--ack-batch", type=int, default=64)
    p.add_argument("--ack-interval", type=float, default=0.1, help="seconds")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--out", default="-", help="output file, - for stdout")
    args = p.parse_args(argv)
    _setup_logging()
    try:
        mask = parse_mask(args.fields)
    except ValueError as exc:
        return _die(EXIT_CONFIG, f"--fields: {exc}")
    if args.ack_batch < 1 or args.window < 1:
        return _die(EXIT_CONFIG, "--ack-batch and --window must be positive")
    persistent = args.mode == "persistent"
    role = Role.PERSISTENT if persistent else Role.EPHEMERAL
    try:
        session = client_connect(args.server, role, args.group if persistent else "", mask,
                                 args.window, ack_batch=args.ack_batch,
                                 ack_interval=args.ack_interval)
    except ConnectionRefusedError:
        return _die(EXIT_REFUSED, f"connection refused by {args.server}")
    except (OSError, SessionError, ConfigError) as exc:
        return _die(EXIT_FAIL, str(exc))
    out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8")
    old = signal.signal(signal.SIGTERM, _on_sigterm)
    pending: dict[int, list[int]] = {}
    npending = 0

    def flush() -> None:
        # output reaches disk before the broker may forget the records
        nonlocal pending, npending
        out.flush()
        if pending:
            for m, indices in pending.items():
                session.ack(m, indices)
            session.flush()
        pending, npending = {}, 0

    code = 0
    try:
        while True:
            try:
                item = session.next(timeout=args.ack_interval)
            except TimeoutError:
                if persistent:
                    flush()
                continue
            if item is None:
                break
            mdt_id, rec = item
            out.write(format_record(mdt_id, rec) + "\n")
            if persistent:
                pending.setdefault(mdt_id, []).append(rec.index)
                npending += 1
                if npending >= args.ack_batch:
                    flush()
        if persistent:
            flush()
    except (_Terminated, KeyboardInterrupt):
        if persistent:
            flush()
    except SessionError as exc:
        code = _die(EXIT_FAIL, str(exc))
    finally:
        signal.signal(signal.SIGTERM, old)
        session.close()
        if out is not sys.stdout:
            out.close()
        else:
            out.flush()
    return code


# stats

def stat_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="lcap-stat", description="Print broker statistics.")
    p.add_argument("--server", default=f"127.0.0.1:{DEFAULT_PORT}")
    args = p.parse_args(argv)
    _setup_logging()
    try:
        text = request_stats(args.server)
    except ConnectionRefusedError:
        return _die(EXIT_REFUSED, f"connection refused by {args.server}")
    except (OSError, SessionError, ConfigError) as exc:
        return _die(EXIT_FAIL, str(exc))
    sys.stdout.write(text)
    return 0


# simulator

def sim_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="lcap-sim", description="Run a deterministic scenario.")
    p.add_argument("spec", help="scenario file")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--log", help="write the event log here")
    args = p.parse_args(argv)
    _setup_logging()
    try:
        with open(args.spec, encoding="utf-8") as f:
            spec = ScenarioSpec.parse(f.read(), args.spec)
    except OSError as exc:
        return _die(EXIT_CONFIG, f"cannot read {args.spec}: {exc.strerror}")
    except ConfigError as exc:
        return _die(EXIT_CONFIG, str(exc))
    if args.seed is not None:
        spec.seed = args.seed
    try:
        result = run_scenario(spec)
    except ScenarioStuck as exc:
        if args.log:
            exc.log.dump(args.log)
        print(f"stuck: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.log:
        result.dump(args.log)
    results = verify_properties(result, spec)
    counts = result.counts()
    print(f"steps {result.step} events {len(result)} appended {counts['appended']} "
          f"delivered {counts['delivered']} cleared-events {counts['cleared']}")
    sys.stdout.write(format_report(results))
    return 0 if all(r.passed for r in results) else EXIT_FAIL


def _run(main) -> None:
    sys.exit(main())


def broker() -> None:
    _run(broker_main)


def producer() -> None:
    _run(producer_main)


def consumer() -> None:
    _run(consumer_main)


def stat() -> None:
    _run(stat_main)


def sim() -> None:
    _run(sim_main)
