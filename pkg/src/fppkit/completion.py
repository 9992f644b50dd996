"""Selective depth completion: harmonic in-painting and an external hook.

Triangulation leaves holes wherever the surface defeats the projector
(saturated gloss, shadows, low albedo).  The harmonic backend fills each
hole by solving the discrete Laplace equation with the surrounding reliable
depths as Dirichlet boundary; holes with no reliable boundary at all are
never extrapolated.  The external backend ships the same request to an
out-of-process model over a small length-prefixed binary protocol, so a
learned completion network can be swapped in without touching this package.

Wire protocol (version 1, also implemented by the bundled stub server):

    request  := header_len: uint32 LE
                header:     UTF-8 JSON, header_len bytes
                planes:     raw data, one per header["fields"] entry, in order
    header   := {"width": W, "height": H, "dtype": "f32le",
                 "fields": ["sparse_depth", "guidance", "mask"]}
    sparse_depth: H*W float32 LE (NaN where not reliable)
    guidance:     H*W float32 LE (white-illumination image)
    mask:         H*W uint8 (1 = pixel to complete)

    response := header_len + JSON {"width", "height", "dtype": "f32le",
                "fields": ["dense_depth"]} + H*W float32 LE

One request per connection; the client is single-flight.
"""

from __future__ import annotations

import json
import logging
import os
import select
import shlex
import socket
import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    CompletionBackendError,
    ConvergenceError,
    ParameterError,
    ProtocolError,
)
from .geometry import DepthFrame, world_points_from_depth

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000
DEFAULT_OMEGA = 1.9
DEFAULT_TIMEOUT = 10.0

PROTOCOL_DTYPE = "f32le"
REQUEST_FIELDS = ["sparse_depth", "guidance", "mask"]
RESPONSE_FIELDS = ["dense_depth"]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class CompletionRequest:
    """Sparse reliable depth plus the region a backend must fill.

    The reliable set (sparse_depth.valid) and the unreliable mask are
    disjoint by contract: a pixel is either trusted or to be completed.
    """

    sparse_depth: DepthFrame
    guidance: np.ndarray
    unreliable_mask: np.ndarray

    def __post_init__(self) -> None:
        shape = self.sparse_depth.z.shape
        if self.guidance.shape != shape or self.unreliable_mask.shape != shape:
            raise ParameterError("completion request maps disagree in shape")
        if (self.sparse_depth.valid & self.unreliable_mask).any():
            raise ParameterError(
                "unreliable mask overlaps reliable pixels")


@dataclass
class CompletionResult:
    """A completed frame plus what the solver actually did."""

    frame: DepthFrame
    backend: str
    filled_pixels: int
    skipped_holes: list[dict] = field(default_factory=list)
    iterations: int = 0
    residual: float = 0.0
    fallback_used: bool = False


def _assemble_frame(req: CompletionRequest, filled_z: np.ndarray,
                    filled_mask: np.ndarray) -> DepthFrame:
    """Reliable pixels pass through bit-identical; filled pixels added."""
    sparse = req.sparse_depth
    z = sparse.z.copy()
    z[filled_mask] = filled_z[filled_mask]
    valid = sparse.valid | filled_mask
    world = np.where(valid[..., None],
                     world_points_from_depth(z, sparse.camera_intrinsics),
                     np.nan)
    world[sparse.valid] = sparse.world_xyz[sparse.valid]
    return DepthFrame(z=z, world_xyz=world, valid=valid,
                      camera_intrinsics=sparse.camera_intrinsics)


def _solvable_holes(req: CompletionRequest) -> tuple[np.ndarray, list[dict]]:
    """Split the unreliable mask into fillable pixels and skipped holes.

    Holes are 4-connected to match the Laplace stencil; a hole qualifies
    when at least one reliable pixel is 4-adjacent to it.
    """
    reliable = req.sparse_depth.valid
    holes, count = ndimage.label(req.unreliable_mask,
                                 structure=_CROSS.astype(int))
    solve = np.zeros_like(req.unreliable_mask)
    skipped: list[dict] = []
    for idx in range(1, count + 1):
        hole = holes == idx
        boundary = ndimage.binary_dilation(hole, _CROSS) & ~hole
        if (boundary & reliable).any():
            solve |= hole
        else:
            rows, cols = np.nonzero(hole)
            skipped.append({
                "pixels": int(hole.sum()),
                "row": int(rows[0]),
                "col": int(cols[0]),
                "reason": "no reliable boundary",
            })
    return solve, skipped


def complete_depth_harmonic(
    req: CompletionRequest,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    omega: float = DEFAULT_OMEGA,
) -> CompletionResult:
    """Fill unreliable holes with the discrete harmonic extension.

    Red-black successive over-relaxation on the 5-point Laplacian.  Pixels
    whose 4-neighbours fall outside the image or outside the solve region
    simply average over their existing neighbours (natural zero-flux
    sides), so holes touching the frame border still solve as long as the
    hole has some reliable boundary.

    Raises:
        ConvergenceError: residual above tol after max_iter sweeps.
    """
    sparse = req.sparse_depth
    solve, skipped = _solvable_holes(req)
    if not solve.any():
        frame = _assemble_frame(req, sparse.z, solve)
        return CompletionResult(frame=frame, backend="harmonic",
                                filled_pixels=0, skipped_holes=skipped)

    rows, cols = np.nonzero(solve)
    r0, r1 = max(rows.min() - 1, 0), min(rows.max() + 2, sparse.height)
    c0, c1 = max(cols.min() - 1, 0), min(cols.max() + 2, sparse.width)
    box = np.s_[r0:r1, c0:c1]

    fixed = sparse.valid[box]
    target = solve[box]
    exists = (fixed | target).astype(np.float64)
    u = np.where(fixed, sparse.z[box], 0.0)

    # Seed each hole with its own boundary mean for faster convergence.
    holes, count = ndimage.label(target, structure=_CROSS.astype(int))
    for idx in range(1, count + 1):
        hole = holes == idx
        boundary = ndimage.binary_dilation(hole, _CROSS) & ~hole & fixed
        u[hole] = sparse.z[box][boundary].mean()

    h, w = u.shape
    rr, cc = np.mgrid[0:h, 0:w]
    parity = (rr + cc) % 2
    colors = [target & (parity == 0), target & (parity == 1)]

    u_pad = np.zeros((h + 2, w + 2), dtype=np.float64)
    e_pad = np.zeros((h + 2, w + 2), dtype=np.float64)
    u_pad[1:-1, 1:-1] = u
    e_pad[1:-1, 1:-1] = exists

    def neighbour_sum(a: np.ndarray) -> np.ndarray:
        return (a[:-2, 1:-1] + a[2:, 1:-1] + a[1:-1, :-2] + a[1:-1, 2:])

    weighted = lambda: neighbour_sum(u_pad * e_pad)
    counts = neighbour_sum(e_pad)
    inner = u_pad[1:-1, 1:-1]

    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for color in colors:
            avg = weighted()[color] / counts[color]
            inner[color] += omega * (avg - inner[color])
        residual = float(np.abs(weighted()[target] / counts[target]
                                - inner[target]).max())
        if residual < tol:
            break
    else:
        raise ConvergenceError(
            f"harmonic completion stalled at residual {residual:.3e} mm "
            f"after {max_iter} sweeps (tol {tol:.1e})",
            residual=residual)

    filled_z = sparse.z.copy()
    filled_z[box] = np.where(target, inner, filled_z[box])
    frame = _assemble_frame(req, filled_z, solve)
    logger.debug("harmonic completion: %d px in %d sweeps, residual %.2e",
                 int(solve.sum()), iterations, residual)
    return CompletionResult(frame=frame, backend="harmonic",
                            filled_pixels=int(solve.sum()),
                            skipped_holes=skipped, iterations=iterations,
                            residual=residual)


# --- external backend -------------------------------------------------------


@dataclass(frozen=True)
class ExternalEndpoint:
    """Where the completion model lives.

    kind "tcp": address "host:port"; kind "unix": socket path;
    kind "exec": command line of a child process speaking the protocol
    on stdin/stdout.
    """

    kind: str
    address: str
    timeout: float = DEFAULT_TIMEOUT


def parse_endpoint(spec: str, timeout: float = DEFAULT_TIMEOUT) -> ExternalEndpoint:
    """Parse 'tcp:host:port', 'unix:/path', or 'exec:command …'."""
    kind, sep, address = spec.partition(":")
    if not sep or kind not in ("tcp", "unix", "exec") or not address:
        raise ParameterError(
            f"endpoint {spec!r} must look like tcp:host:port, "
            f"unix:/path.sock, or exec:command")
    if kind == "tcp" and ":" not in address:
        raise ParameterError(f"tcp endpoint {spec!r} is missing a port")
    return ExternalEndpoint(kind=kind, address=address, timeout=timeout)


def _encode_header(payload: dict) -> bytes:
    body = json.dumps(payload, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(body)) + body


def encode_request(req: CompletionRequest) -> bytes:
    h, w = req.sparse_depth.z.shape
    header = {"width": w, "height": h, "dtype": PROTOCOL_DTYPE,
              "fields": REQUEST_FIELDS}
    sparse = np.where(req.sparse_depth.valid, req.sparse_depth.z,
                      np.nan).astype("<f4")
    guidance = req.guidance.astype("<f4")
    mask = req.unreliable_mask.astype(np.uint8)
    return (_encode_header(header) + sparse.tobytes() + guidance.tobytes()
            + mask.tobytes())


def encode_response(depth: np.ndarray) -> bytes:
    h, w = depth.shape
    header = {"width": w, "height": h, "dtype": PROTOCOL_DTYPE,
              "fields": RESPONSE_FIELDS}
    return _encode_header(header) + depth.astype("<f4").tobytes()


class _Stream:
    """Exact-length reads over a socket or a pair of pipes."""

    def __init__(self, recv, send) -> None:
        self._recv = recv
        self._send = send

    def read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            chunk = self._recv(min(remaining, 1 << 20))
            if not chunk:
                raise CompletionBackendError(
                    f"backend closed the stream with {remaining} bytes pending")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def write(self, data: bytes) -> None:
        self._send(data)


def _read_header(stream: _Stream) -> dict:
    (length,) = struct.unpack("<I", stream.read_exact(4))
    if length > 1 << 20:
        raise ProtocolError(f"unreasonable header length {length}")
    try:
        header = json.loads(stream.read_exact(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed protocol header: {exc}")
    if not isinstance(header, dict):
        raise ProtocolError("protocol header is not a JSON object")
    return header


def read_request(stream: _Stream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Server side: decode one request into (sparse, guidance, mask)."""
    header = _read_header(stream)
    if header.get("dtype") != PROTOCOL_DTYPE:
        raise ProtocolError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("fields") != REQUEST_FIELDS:
        raise ProtocolError(f"unexpected fields {header.get('fields')!r}")
    w, h = int(header["width"]), int(header["height"])
    sparse = np.frombuffer(stream.read_exact(4 * h * w),
                           dtype="<f4").reshape(h, w)
    guidance = np.frombuffer(stream.read_exact(4 * h * w),
                             dtype="<f4").reshape(h, w)
    mask = np.frombuffer(stream.read_exact(h * w),
                         dtype=np.uint8).reshape(h, w).astype(bool)
    return sparse.astype(np.float64), guidance.astype(np.float64), mask


def read_response(stream: _Stream, expected_shape: tuple[int, int]) -> np.ndarray:
    header = _read_header(stream)
    if header.get("dtype") != PROTOCOL_DTYPE:
        raise ProtocolError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("fields") != RESPONSE_FIELDS:
        raise ProtocolError(f"unexpected fields {header.get('fields')!r}")
    shape = (int(header.get("height", -1)), int(header.get("width", -1)))
    if shape != expected_shape:
        raise ProtocolError(
            f"response shape {shape} does not match request {expected_shape}")
    plane = stream.read_exact(4 * shape[0] * shape[1])
    return np.frombuffer(plane, dtype="<f4").reshape(shape).astype(np.float64)


def _connect(endpoint: ExternalEndpoint):
    """Open the transport; returns (stream, close callable)."""
    if endpoint.kind in ("tcp", "unix"):
        try:
            if endpoint.kind == "tcp":
                host, _, port = endpoint.address.rpartition(":")
                sock = socket.create_connection((host, int(port)),
                                                timeout=endpoint.timeout)
            else:
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.settimeout(endpoint.timeout)
                sock.connect(endpoint.address)
        except (OSError, ValueError) as exc:
            raise CompletionBackendError(
                f"cannot reach completion backend at "
                f"{endpoint.kind}:{endpoint.address}: {exc}")

        def recv(n: int) -> bytes:
            try:
                return sock.recv(n)
            except socket.timeout:
                raise CompletionBackendError(
                    f"completion backend timed out after {endpoint.timeout}s")

        def send(data: bytes) -> None:
            try:
                sock.sendall(data)
            except OSError as exc:
                raise CompletionBackendError(f"send failed: {exc}")

        return _Stream(recv, send), sock.close

    try:
        proc = subprocess.Popen(shlex.split(endpoint.address),
                                stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE)
    except OSError as exc:
        raise CompletionBackendError(
            f"cannot launch completion backend {endpoint.address!r}: {exc}")
    out_fd = proc.stdout.fileno()

    def recv(n: int) -> bytes:
        ready, _, _ = select.select([out_fd], [], [], endpoint.timeout)
        if not ready:
            raise CompletionBackendError(
                f"completion backend timed out after {endpoint.timeout}s")
        return os.read(out_fd, n)

    def send(data: bytes) -> None:
        try:
            proc.stdin.write(data)
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise CompletionBackendError(f"backend pipe broke: {exc}")

    def close() -> None:
        for pipe in (proc.stdin, proc.stdout):
            try:
                pipe.close()
            except OSError:
                pass
        proc.terminate()
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()

    return _Stream(recv, send), close


def complete_depth_external(req: CompletionRequest,
                            endpoint: ExternalEndpoint) -> CompletionResult:
    """Ship the request to an external model and merge its dense answer.

    The response must be finite over every requested pixel; reliable pixels
    are taken from the request, never from the backend.

    Raises:
        CompletionBackendError: transport failure or timeout.
        ProtocolError: response malformed or non-finite where it matters.
    """
    stream, close = _connect(endpoint)
    try:
        stream.write(encode_request(req))
        dense = read_response(stream, req.sparse_depth.z.shape)
    finally:
        close()
    bad = req.unreliable_mask & ~np.isfinite(dense)
    if bad.any():
        raise ProtocolError(
            f"backend returned {int(bad.sum())} non-finite depths inside "
            f"the requested region")
    frame = _assemble_frame(req, dense, req.unreliable_mask)
    return CompletionResult(frame=frame,
                            backend=f"{endpoint.kind}:{endpoint.address}",
                            filled_pixels=int(req.unreliable_mask.sum()))


BACKEND_HARMONIC = "harmonic"
BACKEND_EXTERNAL = "external"
BACKEND_EXTERNAL_FALLBACK = "external-with-fallback"
BACKENDS = (BACKEND_HARMONIC, BACKEND_EXTERNAL, BACKEND_EXTERNAL_FALLBACK)


def complete_depth(
    req: CompletionRequest,
    backend: str = BACKEND_HARMONIC,
    endpoint: ExternalEndpoint | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> CompletionResult:
    """Dispatch to the configured backend.

    With backend "external-with-fallback" a transport failure degrades to
    the harmonic solver (flagged in the result); a protocol violation is
    never silently absorbed.
    """
    if backend not in BACKENDS:
        raise ParameterError(
            f"unknown completion backend {backend!r}; expected one of "
            f"{', '.join(BACKENDS)}")
    if backend == BACKEND_HARMONIC:
        return complete_depth_harmonic(req, tol=tol, max_iter=max_iter)
    if endpoint is None:
        raise ParameterError(f"backend {backend!r} requires an endpoint")
    try:
        return complete_depth_external(req, endpoint)
    except CompletionBackendError:
        if backend != BACKEND_EXTERNAL_FALLBACK:
            raise
        logger.warning("external completion unreachable; falling back to "
                       "harmonic solver")
        result = complete_depth_harmonic(req, tol=tol, max_iter=max_iter)
        result.fallback_used = True
        return result


# --- reference stub server --------------------------------------------------


class HarmonicStubServer:
    """Reference protocol implementation: answers with the harmonic fill.

    Serves one request per connection.  Useful for integration tests and as
    executable documentation of the wire format; a real learned backend
    replaces this process wholesale.
    """

    def __init__(self, endpoint: ExternalEndpoint):
        if endpoint.kind not in ("tcp", "unix"):
            raise ParameterError("stub server listens on tcp or unix only")
        self.endpoint = endpoint
        self._sock: socket.socket | None = None

    def __enter__(self) -> "HarmonicStubServer":
        if self.endpoint.kind == "tcp":
            host, _, port = self.endpoint.address.rpartition(":")
            self._sock = socket.create_server((host, int(port)))
        else:
            self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self._sock.bind(self.endpoint.address)
            self._sock.listen()
        return self

    def __exit__(self, *exc) -> None:
        if self._sock is not None:
            self._sock.close()

    @property
    def bound_address(self) -> str:
        if self.endpoint.kind == "tcp":
            host, port = self._sock.getsockname()[:2]
            return f"{host}:{port}"
        return self.endpoint.address

    def serve_one(self) -> None:
        conn, _ = self._sock.accept()
        with conn:
            stream = _Stream(conn.recv, conn.sendall)
            _serve_request(stream)

    def serve_forever(self) -> None:
        while True:
            self.serve_one()


def _serve_request(stream: _Stream) -> None:
    sparse, guidance, mask = read_request(stream)
    dense = fill_dense(sparse, guidance, mask)
    stream.write(encode_response(dense))


def fill_dense(sparse: np.ndarray, guidance: np.ndarray,
               mask: np.ndarray) -> np.ndarray:
    """The stub model: harmonic fill where possible, nearest fill elsewhere.

    A learned backend must return finite depth over every masked pixel, so
    holes the harmonic solver would skip are padded with the nearest
    reliable depth.
    """
    del guidance  # the stub has no use for intensity
    reliable = np.isfinite(sparse)
    dummy_k = np.eye(3)
    frame = DepthFrame(z=np.where(reliable, sparse, np.nan),
                       world_xyz=np.zeros(sparse.shape + (3,)),
                       valid=reliable & ~mask, camera_intrinsics=dummy_k)
    req = CompletionRequest(sparse_depth=frame, guidance=np.zeros_like(sparse),
                            unreliable_mask=mask & ~reliable)
    result = complete_depth_harmonic(req)
    dense = result.frame.z.copy()
    missing = mask & ~np.isfinite(dense)
    if missing.any():
        if reliable.any():
            _, (ir, ic) = ndimage.distance_transform_edt(
                ~frame.valid, return_indices=True)
            dense[missing] = frame.z[ir[missing], ic[missing]]
        else:
            dense[missing] = 0.0
    return dense


def serve_stdio() -> None:
    """Speak the protocol once over this process's stdin/stdout."""
    import sys
    stream = _Stream(sys.stdin.buffer.read, sys.stdout.buffer.write)
    _serve_request(stream)
    sys.stdout.buffer.flush()
