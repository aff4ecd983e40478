"""Helpers for driving the console scripts as subprocesses."""

import os
import subprocess
import sys

BIN = os.path.dirname(sys.executable)


def tool(name):
    path = os.path.join(BIN, name)
    return [path] if os.path.exists(path) else [sys.executable, "-c",
                                                f"import sys; from lcap.cli import {name[5:]}_main as m; sys.exit(m())"]


def run(name, *args, **kw):
    kw.setdefault("timeout", 60)
    return subprocess.run(tool(name) + [str(a) for a in args], capture_output=True, text=True, **kw)


def write_config(path, sources, **extra):
    lines = ["listen = 127.0.0.1:0", "ack_interval = 0.02", "poll_interval = 0.005"]
    for n, (d, mdt) in enumerate(sources):
        lines += [f"source.{n}.dir = {d}", f"source.{n}.mdt_id = {mdt}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def start_broker(config):
    """Launch lcap-broker; return (process, address) once it listens."""
    proc = subprocess.Popen(tool("lcap-broker") + [str(config)], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    if not line.startswith("listening on "):
        proc.kill()
        raise RuntimeError(f"broker failed: {line}{proc.stderr.read()}")
    return proc, line.split()[-1]


def read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").split("\t") for line in f]
