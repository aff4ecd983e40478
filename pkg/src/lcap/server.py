"""asyncio TCP front end of the broker.

Everything runs on one event loop, so broker state is only ever touched by
one coroutine at a time. Journals are polled for new records every
``poll_interval`` seconds while idle; clears are pushed upstream every
``ack_interval`` seconds and once more at shutdown.
"""

from __future__ import annotations

import asyncio
import errno
import logging

from lcap.broker import Broker
from lcap.config import BrokerConfig
from lcap.hub import OUTPUT_SOFT_LIMIT, Connection, Hub
from lcap.journal import FileJournal

logger = logging.getLogger(__name__)


class PortBusy(OSError):
    pass


class BrokerServer:
    def __init__(self, config: BrokerConfig):
        self.config = config
        self.journals = []
        for src in config.sources:
            j = FileJournal(src.dir)
            if j.mdt_id != src.mdt_id:
                j.close()
                raise ValueError(f"{src.dir} holds mdt {j.mdt_id}, config says {src.mdt_id}")
            self.journals.append(j)
        self.broker = Broker(self.journals, hwm=config.hwm, batch=config.batch,
                             eq_limit=config.eq_limit,
                             auto_ack_no_groups=config.auto_ack_no_groups,
                             pipeline=config.pipeline, max_span=config.max_span)
        self.hub = Hub(self.broker, writable=self._writable)
        self.writers: dict[int, asyncio.StreamWriter] = {}
        self.stopping = asyncio.Event()
        self._server: asyncio.AbstractServer | None = None
        self._tasks: set[asyncio.Task] = set()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.sockets[0].getsockname()[:2]

    def _writable(self, conn: Connection) -> bool:
        w = self.writers.get(conn.conn_id)
        buffered = w.transport.get_write_buffer_size() if w is not None else 0
        return buffered + len(conn.out) < OUTPUT_SOFT_LIMIT

    async def start(self) -> None:
        host, port = self.config.listen
        try:
            self._server = await asyncio.start_server(self._serve_client, host, port)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortBusy(exc.errno, f"{host}:{port} already in use") from None
            raise
        logger.info("listening on %s:%d", *self.address)

    async def run(self) -> None:
        """Serve until :attr:`stopping` is set, then shut down cleanly."""
        if self._server is None:
            await self.start()
        ingest = asyncio.create_task(self._ingest_loop())
        await self.stopping.wait()
        ingest.cancel()
        await self._shutdown()

    def stop(self) -> None:
        self.stopping.set()

    def _flush(self) -> None:
        self.hub.pump()
        for conn in list(self.hub.conns.values()):
            w = self.writers.get(conn.conn_id)
            if w is None:
                continue
            data = self.hub.take_output(conn)
            if data and not w.is_closing():
                w.write(data)
            if conn.closing and not w.is_closing():
                w.close()

    async def _ingest_loop(self) -> None:
        loop = asyncio.get_running_loop()
        next_ack = loop.time()
        while True:
            n = self.broker.ingest_all()
            self._flush()
            if loop.time() >= next_ack:
                self.broker.upstream_ack()
                next_ack = loop.time() + self.config.ack_interval
            await asyncio.sleep(0 if n else self.config.poll_interval)

    async def _serve_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        conn = self.hub.open()
        self.writers[conn.conn_id] = writer
        task = asyncio.current_task()
        self._tasks.add(task)
        try:
            while not conn.closing:
                data = await reader.read(65536)
                if not data:
                    break
                self.hub.receive(conn, data)
                self._flush()
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            graceful = conn.closing and conn.consumer_id is None
            self.hub.close(conn, crash=not graceful)
            self.writers.pop(conn.conn_id, None)
            self._tasks.discard(task)
            if not writer.is_closing():
                writer.close()
            self._flush()

    async def _shutdown(self) -> None:
        logger.info("shutting down")
        self._server.close()
        self.hub.shutdown()
        self._flush()
        loop = asyncio.get_running_loop()
        deadline = loop.time() + self.config.shutdown_grace
        while self._tasks and loop.time() < deadline:
            await asyncio.sleep(0.02)
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        self.broker.upstream_ack()
        for j in self.journals:
            j.close()
        await self._server.wait_closed()


async def serve(config: BrokerConfig, ready=None) -> None:
    server = BrokerServer(config)
    await server.start()
    if ready is not None:
        ready(server)
    await server.run()
