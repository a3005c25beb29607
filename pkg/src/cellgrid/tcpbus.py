"""TCP transport for the bus: newline-delimited JSON over sockets.

Threading layout on the broker side: one accept thread, one reader thread
per connection, one writer thread per connection (so a slow subscriber can
never stall routing), and a single dispatcher thread that owns the
:class:`BrokerCore`, which keeps the barrier logic strictly serial.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from .bus import (BrokerCore, BusClient, ClientSession, Manifest, Schedule,
                  DEFAULT_PORT)

log = logging.getLogger(__name__)

_DISCONNECT = object()


class _Conn:
    def __init__(self, conn_id: str, sock: socket.socket):
        self.conn_id = conn_id
        self.sock = sock
        self.outbox: queue.Queue = queue.Queue()
        self.writer = threading.Thread(target=self._write_loop, daemon=True)
        self.writer.start()

    def send_line(self, line: str) -> None:
        self.outbox.put(line)

    def close(self) -> None:
        self.outbox.put(None)

    def _write_loop(self) -> None:
        try:
            while True:
                line = self.outbox.get()
                if line is None:
                    break
                self.sock.sendall((line + "\n").encode("utf-8"))
        except OSError:
            pass
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


class TcpBroker:
    """Serve a broker core on a TCP port until the schedule completes."""

    def __init__(self, manifest: Manifest, schedule: Schedule,
                 host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.core = BrokerCore(manifest, schedule)
        self.host = host
        self.port = port
        self._events: queue.Queue = queue.Queue()
        self._conns: dict[str, _Conn] = {}
        self._server: socket.socket | None = None
        self._n_conns = 0
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> None:
        self._server = socket.create_server((self.host, self.port))
        self.port = self._server.getsockname()[1]
        self._server.settimeout(0.2)
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        dispatcher = threading.Thread(target=self._dispatch_loop, daemon=True)
        dispatcher.start()
        self._threads += [accept, dispatcher]

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the experiment finished; True when it did."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.core.finished:
            if deadline is not None and time.monotonic() > deadline:
                return False
            time.sleep(0.005)
        # give SHUTDOWN lines a moment to flush
        time.sleep(0.05)
        return True

    def stop(self) -> None:
        self._stop.set()
        for conn in list(self._conns.values()):
            conn.close()
        if self._server is not None:
            self._server.close()

    # -- threads --------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _addr = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._n_conns += 1
            conn_id = f"c{self._n_conns}"
            conn = _Conn(conn_id, sock)
            self._conns[conn_id] = conn
            self._events.put(("attach", conn_id, conn))
            reader = threading.Thread(target=self._read_loop, args=(conn_id, sock),
                                      daemon=True)
            reader.start()
            self._threads.append(reader)

    def _read_loop(self, conn_id: str, sock: socket.socket) -> None:
        buf = b""
        try:
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    self._events.put(("line", conn_id, line.decode("utf-8")))
        except OSError:
            pass
        self._events.put(("line", conn_id, _DISCONNECT))

    def _dispatch_loop(self) -> None:
        self.core.maybe_start()
        while not self._stop.is_set():
            due = self.core.service()
            timeout = 0.2
            if due is not None:
                timeout = max(0.0, min(timeout, due - self.core.clock()))
            try:
                kind, conn_id, payload = self._events.get(timeout=timeout)
            except queue.Empty:
                if self.core.finished:
                    return
                continue
            if kind == "attach":
                self.core.attach(conn_id, payload.send_line)
            elif payload is _DISCONNECT:
                self.core.handle_disconnect(conn_id)
                conn = self._conns.pop(conn_id, None)
                if conn is not None:
                    conn.close()
            else:
                self.core.handle_line(conn_id, payload)


# --------------------------------------------------------------------------
# client side
# --------------------------------------------------------------------------

def run_tcp_client(client: BusClient, host: str = "127.0.0.1",
                   port: int = DEFAULT_PORT, connect_timeout: float = 10.0) -> None:
    """Connect, register, then pump messages until SHUTDOWN or EOF.

    The client's handlers run on the caller's thread; session sends write
    straight to the socket, which is safe because reads and writes are
    independent directions.
    """
    deadline = time.monotonic() + connect_timeout
    last_err = None
    sock = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=2.0)
            break
        except OSError as exc:
            last_err = exc
            time.sleep(0.05)
    if sock is None:
        raise ConnectionError(f"cannot reach broker at {host}:{port}: {last_err}")
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)

    send_lock = threading.Lock()

    def send_line(line: str) -> None:
        with send_lock:
            sock.sendall((line + "\n").encode("utf-8"))

    session = ClientSession(client.name, send_line)
    client.attach_session(session)
    session.register(client.mode, client.subscriptions)

    buf = b""
    try:
        while not client.done:
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                client.handle_line(line.decode("utf-8"))
                if client.done:
                    break
    finally:
        try:
            sock.close()
        except OSError:
            pass
