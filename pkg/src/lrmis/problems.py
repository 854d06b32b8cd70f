"""Benchmark cost functions and the external-simulator wire protocol.

Every problem maps a batch of standard-normal points (n, d) to costs (n,);
a cost <= 0 is a failure.  Costs are deterministic: identical rows always
produce identical outputs.
"""

import json
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


class Problem:
    """A named d-dimensional cost function evaluated in batch."""

    def __init__(self, name, dim, cost_fn, description=""):
        if dim < 2:
            raise ValueError("problem dimension must be >= 2")
        self.name = name
        self.dim = dim
        self._cost_fn = cost_fn
        self.description = description

    def cost(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(
                f"expected a batch of shape (n, {self.dim}), got {x.shape}"
            )
        out = np.asarray(self._cost_fn(x), dtype=float)
        if out.shape != (x.shape[0],):
            raise RuntimeError("cost function returned a misshaped batch")
        return out


# ---------------------------------------------------------------------------
# Branches

@dataclass(frozen=True)
class BranchesParams:
    beta: float = 3.5
    dim: int = 40

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2 != 0:
            raise ValueError("branches dimension must be even and >= 2")


def branches_cost(x, params):
    """Minimum of the four branch expressions.

    With s = sum(x)/sqrt(d) and t = (first-half sum - second-half sum)/sqrt(d),
    the branches are beta + s, beta - s, beta + t, beta - t.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    d = params.dim
    if x.shape[1] != d:
        raise ValueError(f"expected dimension {d}, got {x.shape[1]}")
    root_d = math.sqrt(d)
    s = x.sum(axis=1) / root_d
    half = d // 2
    t = (x[:, :half].sum(axis=1) - x[:, half:].sum(axis=1)) / root_d
    b = params.beta
    out = np.minimum.reduce([b + s, b - s, b + t, b - t])
    return float(out[0]) if single else out


def branches_reference_pf(params):
    """Analytic failure probability 4*Phi(-beta).

    The four branch events are two antipodal half-space pairs along
    independent directions; the neglected intersection terms are bounded
    above by 2*Phi(-beta)^2 (about 1e-7 at beta=3.5, far below
    Monte Carlo resolution at n=1e7).
    """
    if params.beta <= 0:
        raise ValueError("beta must be positive")
    return float(4.0 * norm.cdf(-params.beta))


def branches_problem(dim=40, beta=3.5):
    params = BranchesParams(beta=beta, dim=dim)
    return Problem(
        "branches",
        dim,
        lambda x: branches_cost(x, params),
        description=f"four-branch system, beta={beta}",
    )


# ---------------------------------------------------------------------------
# Duffing oscillator

@dataclass(frozen=True)
class DuffingParams:
    """Oscillator constants; defaults give natural frequency 2*pi rad/s."""

    dim: int = 100
    mass: float = 1000.0
    damping: float = 200.0 * math.pi
    stiffness: float = 1000.0 * (2.0 * math.pi) ** 2
    cubic: float = 1.0
    u1: float = 0.1
    u2: float = -0.06
    t_max: float = 2.0
    u0: float = 0.0
    v0: float = 1.5
    dt: float = 1e-3

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2 != 0:
            raise ValueError("duffing dimension must be even and >= 2")
        steps = self.t_max / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("dt must divide t_max evenly")

    @property
    def n_steps(self):
        return int(round(self.t_max / self.dt))

    @property
    def delta_omega(self):
        return 30.0 * math.pi / self.dim

    @property
    def omegas(self):
        return np.arange(1, self.dim // 2 + 1) * self.delta_omega

    @property
    def forcing_scale(self):
        return math.sqrt(0.01 * self.delta_omega)


def duffing_displacement(x, params, chunk=2000):
    """u(t_max) for each row of x, by classical RK4 at fixed step dt.

    The forcing acceleration is
    -sigma * sum_i (x_i cos(w_i t) + x_{d/2+i} sin(w_i t)); it is
    precomputed on the half-step grid so each RK4 stage reads one column.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.dim:
        raise ValueError(f"expected dimension {params.dim}, got {x.shape[1]}")
    half = params.dim // 2
    n_steps = params.n_steps
    h = params.dt
    grid = np.arange(2 * n_steps + 1) * (h / 2.0)
    phases = np.outer(grid, params.omegas)
    cos_t = np.cos(phases)  # (2*n_steps+1, d/2); rows are time points
    sin_t = np.sin(phases)
    c_m = params.damping / params.mass
    k_m = params.stiffness / params.mass
    gam = params.cubic
    check_every = 200
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        rows = slice(start, min(start + chunk, x.shape[0]))
        # (2*n_steps+1, m) forcing on the half-step grid, time-contiguous rows
        forcing = -params.forcing_scale * (
            cos_t @ x[rows, :half].T + sin_t @ x[rows, half:].T
        )
        u = np.full(forcing.shape[1], params.u0)
        v = np.full(forcing.shape[1], params.v0)
        for j in range(n_steps):
            a0 = forcing[2 * j]
            a1 = forcing[2 * j + 1]
            a2 = forcing[2 * j + 2]
            k1v = a0 - c_m * v - k_m * (u + gam * (u * u * u))
            u2 = u + 0.5 * h * v
            v2 = v + 0.5 * h * k1v
            k2v = a1 - c_m * v2 - k_m * (u2 + gam * (u2 * u2 * u2))
            u3 = u + 0.5 * h * v2
            v3 = v + 0.5 * h * k2v
            k3v = a1 - c_m * v3 - k_m * (u3 + gam * (u3 * u3 * u3))
            u4 = u + h * v3
            v4 = v + h * k3v
            k4v = a2 - c_m * v4 - k_m * (u4 + gam * (u4 * u4 * u4))
            u = u + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
            v = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            if (j + 1) % check_every == 0 and not np.all(np.isfinite(u)):
                raise FloatingPointError(
                    f"integration diverged by t={(j + 1) * h:.6f} s"
                )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise FloatingPointError(
                f"integration diverged by t={params.t_max:.6f} s"
            )
        out[rows] = u
    return float(out[0]) if single else out


def duffing_cost(x, params, chunk=2000):
    """min(u1 - u(t_max), u(t_max) - u2): negative when the final
    displacement leaves the [u2, u1] band."""
    u = duffing_displacement(x, params, chunk=chunk)
    return np.minimum(params.u1 - u, u - params.u2)


def duffing_problem(dim=100, dt=1e-3, cubic=1.0):
    params = DuffingParams(dim=dim, dt=dt, cubic=cubic)
    return Problem(
        "oscillator",
        dim,
        lambda x: duffing_cost(x, params),
        description=f"duffing oscillator, d={dim}, dt={dt}",
    )


# ---------------------------------------------------------------------------
# External simulator protocol (newline-delimited JSON over stdin/stdout)
#
#   handshake (simulator -> tool, first line): {"protocol": 1, "d": <int>}
#   request   (tool -> simulator):             {"id": <uint>, "x": [...]}
#   response  (simulator -> tool):             {"id": <uint>, "f": <double>}
#   shutdown  (tool -> simulator):             {"close": true}
#
# Responses may arrive out of order; ids are strictly increasing per session.

PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    pass


class ExternalProblem(Problem):
    """Cost function served by a subprocess speaking the wire protocol.

    Requests are pipelined: the whole batch is streamed to the simulator
    while a reader thread collects responses keyed by id.  One subprocess
    per instance; use as a context manager or call close().
    """

    def __init__(self, command, dim, timeout=60.0, name="external"):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot launch simulator {argv!r}: {exc}") from exc
        self.timeout = timeout
        self._next_id = 0
        self._responses = {}
        self._reader_error = None
        self._cond = threading.Condition()
        self._stderr_lines = []
        self._stderr_thread = threading.Thread(
            target=self._drain_stderr, daemon=True
        )
        self._stderr_thread.start()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

        handshake = self._wait_handshake()
        if handshake.get("protocol") != PROTOCOL_VERSION:
            self._fail_startup(f"unsupported protocol {handshake.get('protocol')!r}")
        if handshake.get("d") != dim:
            self._fail_startup(
                f"simulator dimension {handshake.get('d')!r} != configured {dim}"
            )
        super().__init__(name, dim, self._cost_batch, description=f"external: {argv}")

    # -- threads -----------------------------------------------------------

    def _drain_stderr(self):
        try:
            for line in self._proc.stderr:
                self._stderr_lines.append(line)
                if len(self._stderr_lines) > 200:
                    del self._stderr_lines[0]
        except ValueError:
            pass

    def _read_loop(self):
        try:
            for line in self._proc.stdout:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    self._post_error(f"malformed line from simulator: {line[:200]!r}")
                    return
                with self._cond:
                    if "id" in msg:
                        self._responses[msg["id"]] = msg
                    elif "protocol" in msg:
                        self._responses["__handshake__"] = msg
                    else:
                        self._reader_error = f"unrecognized message: {line[:200]!r}"
                    self._cond.notify_all()
            self._post_error("simulator closed its output stream")
        except Exception as exc:  # pragma: no cover - defensive
            self._post_error(f"reader failed: {exc}")

    def _post_error(self, text):
        with self._cond:
            if self._reader_error is None:
                self._reader_error = text
            self._cond.notify_all()

    def _stderr_tail(self):
        return "".join(self._stderr_lines[-20:]).strip()

    # -- protocol ----------------------------------------------------------

    def _wait_handshake(self):
        import time

        deadline = time.monotonic() + self.timeout
        with self._cond:
            while "__handshake__" not in self._responses:
                if self._reader_error is not None:
                    self._fail_startup(self._reader_error)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._fail_startup("no handshake before deadline")
                self._cond.wait(timeout=min(0.1, remaining))
            return self._responses.pop("__handshake__")

    def _fail_startup(self, reason):
        tail = self._stderr_tail()
        self._kill()
        detail = f"; simulator stderr: {tail}" if tail else ""
        raise ProtocolError(f"simulator startup failed: {reason}{detail}")

    def _cost_batch(self, x):
        import time

        n = x.shape[0]
        ids = list(range(self._next_id, self._next_id + n))
        self._next_id += n
        try:
            for i, row in zip(ids, x):
                self._proc.stdin.write(
                    json.dumps({"id": i, "x": row.tolist()}) + "\n"
                )
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ProtocolError(
                f"simulator pipe closed while writing; stderr: {self._stderr_tail()}"
            ) from exc
        out = np.empty(n)
        pending = set(ids)
        deadline = time.monotonic() + self.timeout
        with self._cond:
            while pending:
                done = [i for i in pending if i in self._responses]
                for i in done:
                    msg = self._responses.pop(i)
                    if "f" not in msg:
                        raise ProtocolError(f"response for id {i} lacks a cost")
                    out[i - ids[0]] = float(msg["f"])
                    pending.discard(i)
                if not pending:
                    break
                if self._reader_error is not None:
                    raise ProtocolError(
                        f"{self._reader_error}; stderr: {self._stderr_tail()}"
                    )
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(pending)[:10]
                    raise ProtocolError(
                        f"timed out after {self.timeout}s waiting for ids "
                        f"{missing}...; stderr: {self._stderr_tail()}"
                    )
                self._cond.wait(timeout=min(0.1, remaining))
        if not np.all(np.isfinite(out)):
            raise ProtocolError("simulator returned non-finite costs")
        return out

    # -- lifecycle ----------------------------------------------------------

    def _kill(self):
        try:
            self._proc.kill()
        except OSError:
            pass
        self._proc.wait()

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.write(json.dumps({"close": True}) + "\n")
                self._proc.stdin.flush()
                self._proc.stdin.close()
            except (BrokenPipeError, ValueError, OSError):
                pass
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._kill()
        self._proc.poll()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def __del__(self):  # pragma: no cover - best effort
        try:
            if self._proc.poll() is None:
                self._kill()
        except Exception:
            pass


def external_problem(command, dim, timeout=60.0):
    """Wrap a simulator subprocess as a Problem."""
    return ExternalProblem(command, dim, timeout=timeout)


# ---------------------------------------------------------------------------
# Reference stub simulator (the protocol's test peer)

def stub_cost_quadratic(x, dim):
    return 1.0 - float(np.dot(x, x)) / dim


def stub_cost_linear(x, beta):
    return beta - x[0]


def run_protocol_stub(dim, cost="quadratic", beta=3.0, shuffle=0, stdin=None, stdout=None):
    """Serve the wire protocol on stdin/stdout.

    shuffle > 0 buffers that many requests and answers them in reverse,
    exercising out-of-order response handling downstream.
    """
    import sys

    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stdout.write(json.dumps({"protocol": PROTOCOL_VERSION, "d": dim}) + "\n")
    stdout.flush()

    def respond(msg):
        x = np.asarray(msg["x"], dtype=float)
        if cost == "quadratic":
            f = stub_cost_quadratic(x, dim)
        elif cost == "linear":
            f = stub_cost_linear(x, beta)
        else:
            raise ValueError(f"unknown stub cost {cost!r}")
        stdout.write(json.dumps({"id": msg["id"], "f": f}) + "\n")

    held = []
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        if msg.get("close"):
            break
        if shuffle > 0:
            held.append(msg)
            if len(held) >= shuffle:
                for m in reversed(held):
                    respond(m)
                held.clear()
                stdout.flush()
        else:
            respond(msg)
            stdout.flush()
    for m in reversed(held):
        respond(m)
    stdout.flush()
    return 0
