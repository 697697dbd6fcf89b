"""SLP/1: length-prefixed TCP frames between the encoder side and the decoder side.

Every frame is ``type u8 | length u32 LE | payload``. The encoder side
(``run_bench``) sends either raw 32x32 u8 images or SFF1 feature vectors;
the decoder side (``DecoderServer``) classifies them, looks up the roadblock
and optionally asks a Q-network for the lane decision, answering each frame
with one RESULT frame in order.

Payloads:

* HELLO: ``version u8 | pipeline depth u8`` (echoed back)
* RAW_IMAGE: ``1024 x u8 pixels | frame_id u32``
* FEATURES: one SFF1 container
* RESULT: ``frame_id u32 | class u32 | confidence f32 | lane u8 | position u32 | decision u8``
* METRICS_RESP: UTF-8 CSV of this connection's frames
"""

import csv
import enum
import io
import logging
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec, nn
from .dataset import N_PIXELS, to_u8
from .errors import ContractError, ProtocolError, SemlinkError
from .traffic import Highway, HighwayConfig, Roadblock

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
FRAME_HEADER = struct.Struct("<BI")
RESULT = struct.Struct("<IIfBIB")
RAW_PAYLOAD_SIZE = N_PIXELS + 4
ERROR_CLASS = 0xFFFFFFFF
NO_AGENT = 255
DEFAULT_TIMEOUT_S = 5.0

SCENARIO_FRAMES = {"single": 1, "video30s": 900, "video60s": 1800}
_SCENARIO_ALIASES = {"1": "single", "30s": "video30s", "60s": "video60s"}


class FrameType(enum.IntEnum):
    HELLO = 1
    RAW_IMAGE = 2
    FEATURES = 3
    RESULT = 4
    METRICS_REQ = 5
    METRICS_RESP = 6
    BYE = 7


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    payload: bytes = b""

    @property
    def length(self):
        return len(self.payload)

    @property
    def wire_size(self):
        return FRAME_HEADER.size + len(self.payload)


@dataclass(frozen=True)
class Result:
    frame_id: int
    cls: int
    confidence: float
    lane: int
    position: int
    decision: int

    def pack(self):
        return RESULT.pack(self.frame_id, self.cls, self.confidence, self.lane, self.position, self.decision)

    @classmethod
    def unpack(cls, payload):
        if len(payload) != RESULT.size:
            raise ProtocolError(f"RESULT payload is {len(payload)} bytes, expected {RESULT.size}")
        return cls(*RESULT.unpack(payload))

    @property
    def is_error(self):
        return self.cls == ERROR_CLASS


def encode_frame(frame):
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(frame.payload)} bytes exceeds the {MAX_PAYLOAD}-byte cap")
    return FRAME_HEADER.pack(int(frame.frame_type), len(frame.payload)) + bytes(frame.payload)


def _read_exact(stream, n):
    chunks, remaining = [], n
    recv = getattr(stream, "recv", None)
    while remaining:
        chunk = recv(min(remaining, 65536)) if recv else stream.read(remaining)
        if not chunk:
            got = n - remaining
            if got == 0:
                return None
            raise ProtocolError(f"stream closed after {got} of {n} bytes")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def frame_write(stream, frame):
    data = encode_frame(frame)
    if hasattr(stream, "sendall"):
        stream.sendall(data)
    else:
        stream.write(data)
    return len(data)


def frame_read(stream):
    """Next frame, or None on a clean disconnect between frames."""
    header = _read_exact(stream, FRAME_HEADER.size)
    if header is None:
        return None
    ftype, length = FRAME_HEADER.unpack(header)
    if ftype not in FrameType._value2member_map_:
        raise ProtocolError(f"unknown frame type {ftype}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared length {length} exceeds the {MAX_PAYLOAD}-byte cap")
    payload = _read_exact(stream, length) if length else b""
    if payload is None:
        raise ProtocolError(f"stream closed before a {length}-byte payload")
    return Frame(FrameType(ftype), payload)


def raw_image_payload(pixels, frame_id):
    return to_u8(pixels).tobytes() + struct.pack("<I", frame_id & 0xFFFFFFFF)


# Decoder side ------------------------------------------------------------------------------

class DecisionMaker:
    """Lane decision for a decoded roadblock from the Q-network's view of the initial state."""

    def __init__(self, agent, sim_config=None):
        from .dqn import normalize_state

        self.agent = agent
        self.sim_config = sim_config or HighwayConfig()
        self._normalize = normalize_state
        self._cache = {}

    def __call__(self, lane, position):
        if self.agent is None:
            return NO_AGENT
        key = (lane, position)
        if key not in self._cache:
            try:
                env = Highway(self.sim_config, Roadblock(lane, position))
            except ValueError:
                self._cache[key] = NO_AGENT
            else:
                vec = self._normalize(env.state, self.sim_config)
                self._cache[key] = int(self.agent.greedy(vec))
        return self._cache[key]


@dataclass
class ConnectionMetrics:
    rows: list = field(default_factory=list)  # (frame_id, mode, bytes, classify_time_s, class)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_id", "mode", "bytes", "classify_time_s", "class"])
        for fid, mode, nbytes, secs, cls in self.rows:
            w.writerow([fid, mode, nbytes, f"{secs:.9f}", cls])
        return buf.getvalue()


def parse_metrics_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    return [(int(r[0]), r[1], int(r[2]), float(r[3]), int(r[4])) for r in rows[1:] if r]


class DecoderService:
    """Stateless frame handling shared by every connection."""

    def __init__(self, decoder, full_model, agent=None, sim_config=None):
        if full_model.output_activation != nn.Activation.SOFTMAX:
            raise ContractError("full model must end in softmax")
        self.decoder = decoder
        self.full_model = full_model
        self.class_map = decoder.class_map or codec.default_class_map(full_model.layers[-1].n_out)
        self.decide = DecisionMaker(agent, sim_config)

    def _result(self, frame_id, cls, conf):
        try:
            lane, pos = self.class_map[cls]
        except SemlinkError:
            return Result(frame_id, ERROR_CLASS, 0.0, 0, 0, NO_AGENT)
        return Result(frame_id, cls, conf, lane, pos, self.decide(lane, pos))

    def classify_raw(self, payload):
        if len(payload) != RAW_PAYLOAD_SIZE:
            fid = struct.unpack_from("<I", payload, len(payload) - 4)[0] if len(payload) >= 4 else 0
            return Result(fid, ERROR_CLASS, 0.0, 0, 0, NO_AGENT)
        pixels = np.frombuffer(payload, dtype=np.uint8, count=N_PIXELS).astype(np.float32) / np.float32(255.0)
        frame_id = struct.unpack_from("<I", payload, N_PIXELS)[0]
        cls, conf = nn.predict(self.full_model, pixels)
        return self._result(frame_id, cls, conf)

    def classify_features(self, payload):
        try:
            fv = codec.read_sff(payload)
            probs = codec.decoder_probabilities(self.decoder, fv)
        except SemlinkError:
            fid = struct.unpack_from("<I", payload, 11)[0] if len(payload) >= 15 else 0
            return Result(fid, ERROR_CLASS, 0.0, 0, 0, NO_AGENT)
        cls, conf = nn.argmax_confidence(probs)
        return self._result(fv.frame_id, cls, conf)

    def handle(self, conn, metrics, reader=None):
        """Serve one connection until BYE or disconnect.

        ``reader`` is an optional buffered file over ``conn`` used for reads.
        """
        reader = reader or conn
        while True:
            try:
                frame = frame_read(reader)
            except ProtocolError as exc:
                log.warning("protocol error: %s", exc)
                try:
                    frame_write(conn, Frame(FrameType.BYE))
                except OSError:
                    pass
                return
            if frame is None:
                return
            ft = frame.frame_type
            if ft == FrameType.HELLO:
                depth = frame.payload[1] if len(frame.payload) >= 2 else 1
                frame_write(conn, Frame(FrameType.HELLO, bytes([PROTOCOL_VERSION, max(1, depth)])))
            elif ft in (FrameType.RAW_IMAGE, FrameType.FEATURES):
                t0 = time.perf_counter()
                if ft == FrameType.RAW_IMAGE:
                    res, mode = self.classify_raw(frame.payload), "raw"
                else:
                    res, mode = self.classify_features(frame.payload), "semantic"
                elapsed = time.perf_counter() - t0
                frame_write(conn, Frame(FrameType.RESULT, res.pack()))
                metrics.rows.append((res.frame_id, mode, frame.wire_size, elapsed, res.cls))
            elif ft == FrameType.METRICS_REQ:
                frame_write(conn, Frame(FrameType.METRICS_RESP, metrics.to_csv().encode()))
            elif ft == FrameType.BYE:
                frame_write(conn, Frame(FrameType.BYE))
                return
            else:
                log.warning("unexpected %s frame from client", ft.name)
                frame_write(conn, Frame(FrameType.BYE))
                return


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            with self.request.makefile("rb") as reader:
                self.server.service.handle(self.request, ConnectionMetrics(), reader)
        except OSError as exc:
            log.info("connection from %s dropped: %s", self.client_address, exc)


class DecoderServer(socketserver.ThreadingTCPServer):
    """Threaded SLP/1 server; one handler thread per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bind_addr, decoder, full_model, agent=None, sim_config=None):
        self.service = DecoderService(decoder, full_model, agent, sim_config)
        super().__init__(bind_addr, _Handler)

    @property
    def address(self):
        return self.server_address[:2]

    def start(self):
        """Serve from a background thread; returns self."""
        self._thread = threading.Thread(target=self.serve_forever, name="semlink-server", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def serve_decoder(bind_addr, decoder, full_model, agent=None, sim_config=None):
    """Run the decoder server in the foreground until interrupted."""
    with DecoderServer(bind_addr, decoder, full_model, agent, sim_config) as server:
        log.info("serving SLP/1 on %s:%d", *server.address)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass


# Encoder side / benchmark ---------------------------------------------------------------------

def scenario_name(name):
    name = _SCENARIO_ALIASES.get(name, name)
    if name not in SCENARIO_FRAMES:
        raise ValueError(f"unknown scenario {name!r}; use single, 30s or 60s")
    return name


def frame_timeout():
    return float(os.environ.get("SEMLINK_TIMEOUT_S", DEFAULT_TIMEOUT_S))


@dataclass
class BenchReport:
    scenario: str
    mode: str
    total_bytes: int = 0
    wall_time: float = 0.0  # first frame sent -> last RESULT read
    encode_time: float = 0.0  # local feature extraction before sending
    per_frame_times: list = field(default_factory=list)
    frame_bytes: list = field(default_factory=list)
    classifications: list = field(default_factory=list)  # (frame_id, class)
    classify_times: list = field(default_factory=list)
    results: list = field(default_factory=list)
    partial: bool = False
    error: str = ""

    @property
    def frames(self):
        return len(self.per_frame_times)


def _prepare_payloads(dataset, n_frames, mode, encoder, sff_flags):
    frames = []
    for i in range(n_frames):
        pixels = dataset.X[i % len(dataset)]
        if mode == "raw":
            frames.append(Frame(FrameType.RAW_IMAGE, raw_image_payload(pixels, i)))
        else:
            fv = codec.encode_features(encoder, pixels, i)
            frames.append(Frame(FrameType.FEATURES, codec.write_sff(fv, sff_flags)))
    return frames


def run_bench(server_addr, dataset, scenario, mode, encoder=None, timeout=None, pipeline=1, sff_flags=0):
    """Closed-loop benchmark of one scenario in ``raw`` or ``semantic`` mode.

    Frames are prepared (and, in semantic mode, encoded) before the clock
    starts; per-frame time runs from writing the frame to reading its RESULT.
    Up to ``pipeline`` frames are in flight at once.
    """
    scenario = scenario_name(scenario)
    if mode not in ("raw", "semantic"):
        raise ValueError(f"mode must be raw or semantic, got {mode!r}")
    if mode == "semantic" and encoder is None:
        raise ValueError("semantic mode needs an encoder")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n_frames = SCENARIO_FRAMES[scenario]
    timeout = frame_timeout() if timeout is None else timeout
    report = BenchReport(scenario, mode)

    t0 = time.perf_counter()
    frames = _prepare_payloads(dataset, n_frames, mode, encoder, sff_flags)
    report.encode_time = time.perf_counter() - t0

    with socket.create_connection(tuple(server_addr), timeout=timeout) as sock, \
            sock.makefile("rb") as reader:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        frame_write(sock, Frame(FrameType.HELLO, bytes([PROTOCOL_VERSION, max(1, min(pipeline, 255))])))
        hello = frame_read(reader)
        if hello is None or hello.frame_type != FrameType.HELLO or hello.payload[:1] != bytes([PROTOCOL_VERSION]):
            raise ProtocolError("server did not complete the HELLO handshake")
        depth = max(1, hello.payload[1] if len(hello.payload) > 1 else 1)

        sent_at = {}
        next_send = 0
        start = time.perf_counter()
        try:
            for expected_id in range(n_frames):
                while next_send < n_frames and next_send - expected_id < depth:
                    sent_at[next_send] = time.perf_counter()
                    frame_write(sock, frames[next_send])
                    next_send += 1
                reply = frame_read(reader)
                done_at = time.perf_counter()
                if reply is None or reply.frame_type != FrameType.RESULT:
                    raise ProtocolError(f"expected RESULT for frame {expected_id}, got {reply}")
                res = Result.unpack(reply.payload)
                if res.frame_id != expected_id:
                    raise ProtocolError(f"out-of-order RESULT: expected {expected_id}, got {res.frame_id}")
                report.per_frame_times.append(done_at - sent_at.pop(expected_id))
                report.frame_bytes.append(frames[expected_id].wire_size)
                report.classifications.append((res.frame_id, res.cls))
                report.results.append(res)
        except (socket.timeout, ProtocolError, OSError) as exc:
            report.partial = True
            report.error = f"{type(exc).__name__}: {exc}"
            log.warning("bench aborted after %d frames: %s", report.frames, report.error)
        report.wall_time = time.perf_counter() - start
        report.total_bytes = sum(report.frame_bytes)

        if not report.partial:
            frame_write(sock, Frame(FrameType.METRICS_REQ))
            resp = frame_read(reader)
            if resp is not None and resp.frame_type == FrameType.METRICS_RESP:
                times = {fid: secs for fid, _, _, secs, _ in parse_metrics_csv(resp.payload.decode())}
                report.classify_times = [times.get(fid, float("nan")) for fid, _ in report.classifications]
            try:
                frame_write(sock, Frame(FrameType.BYE))
                frame_read(reader)
            except (OSError, ProtocolError):
                pass
    return report


REPORT_COLUMNS = ["frame_id", "mode", "bytes", "send_time_s", "classify_time_s", "class"]


def emit_report(report, path):
    """Per-frame CSV sorted by frame_id, plus a ``total`` summary row when there are frames."""
    rows = []
    for i, (fid, cls) in enumerate(report.classifications):
        ct = report.classify_times[i] if i < len(report.classify_times) else float("nan")
        rows.append((fid, report.mode, report.frame_bytes[i], report.per_frame_times[i], ct, cls))
    rows.sort(key=lambda r: r[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for fid, mode, nbytes, send_t, cls_t, cls in rows:
            w.writerow([fid, mode, nbytes, f"{send_t:.9f}", f"{cls_t:.9f}", cls])
        if rows:
            mean_cls = float(np.nanmean([r[4] for r in rows])) if report.classify_times else float("nan")
            w.writerow(["total", report.mode, report.total_bytes, f"{report.wall_time:.9f}",
                        f"{mean_cls:.9f}", "partial" if report.partial else len(rows)])
    return path


def comparison_table(reports):
    """Side-by-side text table of byte and time totals, one line per report."""
    lines = [f"{'scenario':<9} {'mode':<9} {'frames':>6} {'bytes':>10} {'bytes/frame':>11} "
             f"{'wall_s':>9} {'ms/frame':>9}"]
    for r in reports:
        per = r.total_bytes / r.frames if r.frames else 0
        ms = 1000 * r.wall_time / r.frames if r.frames else 0
        lines.append(f"{r.scenario:<9} {r.mode:<9} {r.frames:>6} {r.total_bytes:>10} {per:>11.1f} "
                     f"{r.wall_time:>9.4f} {ms:>9.4f}")
    return "\n".join(lines)


def write_plot_data(reports, path):
    """Whitespace-separated data file (gnuplot ``using`` friendly)."""
    with open(path, "w") as fh:
        fh.write("# scenario mode frames total_bytes wall_time_s\n")
        for r in reports:
            fh.write(f"{r.scenario} {r.mode} {r.frames} {r.total_bytes} {r.wall_time:.9f}\n")
    return path
