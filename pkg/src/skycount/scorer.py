"""Location scorers deciding whether a spot deserves low-altitude coverage.

The built-in heuristic maps a capture summary to [0, 1].  An external
scorer speaks newline-delimited JSON over a child-process pipe or a TCP
socket: request ``{"visible_counts": [...], "density_mass": f,
"obstacle_fraction": f, "altitude": f}``, reply ``{"score": f}``, with a
2 second timeout.  Failures fall back to the heuristic with a warning.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import subprocess
import threading
from dataclasses import dataclass

log = logging.getLogger(__name__)

SCORER_TIMEOUT_S = 2.0
DESCEND_THRESHOLD = 0.5


class ScorerError(RuntimeError):
    """External scorer failed to produce a usable reply."""


@dataclass(frozen=True)
class ScorerInput:
    """Summary of one observation handed to a scorer."""

    visible_counts: tuple[int, ...]
    density_mass: float
    obstacle_fraction: float
    altitude: float

    def __post_init__(self):
        if not (0.0 <= self.obstacle_fraction <= 1.0):
            raise ValueError(
                f"obstacle fraction {self.obstacle_fraction} outside [0, 1]"
            )

    def to_request(self) -> dict:
        return {
            "visible_counts": list(self.visible_counts),
            "density_mass": self.density_mass,
            "obstacle_fraction": self.obstacle_fraction,
            "altitude": self.altitude,
        }


class HeuristicScorer:
    """Saturating density score damped by obstacle coverage.

    score = min(1, mass / saturation_mass) * (1 - 0.5 * obstacle_fraction)
    """

    def __init__(self, saturation_mass: float = 5.0):
        if saturation_mass <= 0:
            raise ValueError("saturation mass must be positive")
        self.saturation_mass = float(saturation_mass)

    def score(self, inp: ScorerInput) -> float:
        s = min(1.0, inp.density_mass / self.saturation_mass)
        return s * (1.0 - 0.5 * inp.obstacle_fraction)


class ExternalScorer:
    """Adapter for an out-of-process scorer.

    ``endpoint`` is either ``tcp://host:port`` or a command line (string
    or argv list) for a child process that answers one JSON line per
    request on stdout.
    """

    def __init__(self, endpoint, timeout: float = SCORER_TIMEOUT_S):
        self.timeout = float(timeout)
        self._proc = None
        self._sock_file = None
        self._queue: queue.Queue | None = None
        if isinstance(endpoint, str) and endpoint.startswith("tcp://"):
            host, _, port = endpoint[len("tcp://"):].partition(":")
            self._connect_tcp(host, int(port))
        else:
            argv = endpoint.split() if isinstance(endpoint, str) else list(endpoint)
            self._spawn(argv)
        self.endpoint = endpoint

    def _connect_tcp(self, host: str, port: int):
        sock = socket.create_connection((host, port), timeout=self.timeout)
        sock.settimeout(self.timeout)
        self._sock_file = sock.makefile("rw", encoding="utf-8", newline="\n")
        self._sock = sock

    def _spawn(self, argv: list[str]):
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._queue = queue.Queue()

        def pump(stream, q):
            for line in stream:
                q.put(line)
            q.put(None)

        self._reader = threading.Thread(
            target=pump, args=(self._proc.stdout, self._queue), daemon=True
        )
        self._reader.start()

    def _roundtrip(self, request: str) -> str:
        if self._sock_file is not None:
            try:
                self._sock_file.write(request + "\n")
                self._sock_file.flush()
                line = self._sock_file.readline()
            except (OSError, socket.timeout) as exc:
                raise ScorerError(f"socket failure: {exc}") from exc
            if not line:
                raise ScorerError("scorer closed the connection")
            return line
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (OSError, BrokenPipeError) as exc:
            raise ScorerError(f"scorer process gone: {exc}") from exc
        try:
            line = self._queue.get(timeout=self.timeout)
        except queue.Empty:
            raise ScorerError(
                f"scorer reply timed out after {self.timeout:.1f} s"
            ) from None
        if line is None:
            raise ScorerError("scorer process closed stdout")
        return line

    def score(self, inp: ScorerInput) -> float:
        reply = self._roundtrip(json.dumps(inp.to_request()))
        try:
            doc = json.loads(reply)
            value = float(doc["score"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ScorerError(f"malformed scorer reply {reply!r}") from exc
        if not (0.0 <= value <= 1.0):
            raise ScorerError(f"scorer returned {value}, outside [0, 1]")
        return value

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            self._proc.wait(timeout=5)
        if self._sock_file is not None:
            self._sock_file.close()
            self._sock.close()


def score_location(inp: ScorerInput, scorer=None,
                   fallback: HeuristicScorer | None = None) -> float:
    """Score a location, falling back to the heuristic on external failure."""
    if scorer is None:
        scorer = HeuristicScorer()
    try:
        s = float(scorer.score(inp))
    except ScorerError as exc:
        log.warning("external scorer failed (%s); using heuristic", exc)
        s = (fallback or HeuristicScorer()).score(inp)
    return min(1.0, max(0.0, s))


def should_descend(score: float) -> bool:
    """Descend only on a strictly greater score than the threshold."""
    return score > DESCEND_THRESHOLD
