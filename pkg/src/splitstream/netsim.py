"""Deterministic single-process network simulation.

Time is integer microseconds.  Events execute in (time, sequence) order,
where sequence is assignment order, so two same-seed runs replay the exact
same schedule.  A link models store-and-forward serialization with a FIFO
busy cursor, a fixed one-way delay, optional uniform jitter, and seeded
Bernoulli loss; dropped messages are counted, never silently vanished.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .rng import Xorshift64Star, derive

__all__ = ["LinkConfig", "Link", "Simulator", "SimulationError"]


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class LinkConfig:
    bandwidth_bps: float          # bytes per second
    one_way_delay_us: int = 0
    loss_prob: float = 0.0
    jitter_us: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.one_way_delay_us < 0 or self.jitter_us < 0:
            raise ValueError("delays must be non-negative")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must be in [0, 1)")


class Simulator:
    """Event queue plus the shared session log."""

    def __init__(self):
        self.now_us = 0
        self._queue: list[tuple[int, int, object]] = []
        self._seq = 0
        self.log: list[str] = []

    def at(self, time_us: int, fn) -> None:
        if time_us < self.now_us:
            raise ValueError(f"cannot schedule at {time_us} before now {self.now_us}")
        heapq.heappush(self._queue, (int(time_us), self._seq, fn))
        self._seq += 1

    def after(self, delay_us: int, fn) -> None:
        self.at(self.now_us + int(delay_us), fn)

    def log_event(self, event: str, frame_id: int = 0, offset: int = 0,
                  length: int = 0) -> None:
        self.log.append(f"{self.now_us},{event},{frame_id},{offset},{length}")

    def run_until(self, t_end_us: int) -> None:
        while self._queue and self._queue[0][0] <= t_end_us:
            time_us, seq, fn = heapq.heappop(self._queue)
            self.now_us = time_us
            try:
                fn()
            except Exception as exc:
                raise SimulationError(
                    f"callback failed at t={time_us}us (event #{seq}): {exc}"
                ) from exc
        self.now_us = max(self.now_us, t_end_us)

    def run(self) -> None:
        while self._queue:
            self.run_until(self._queue[0][0])


class Link:
    """One direction of a point-to-point link."""

    def __init__(self, sim: Simulator, config: LinkConfig, name: str = "link"):
        self.sim = sim
        self.config = config
        self.name = name
        self.deliver = None           # callback(message)
        self._busy_until = 0
        self._rng = Xorshift64Star(derive(config.seed, "link", name))
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def send(self, size_bytes: int, message) -> None:
        """Queue a message; it arrives via the deliver callback or drops."""
        if self.deliver is None:
            raise SimulationError(f"link {self.name} has no receiver")
        cfg = self.config
        start = max(self.sim.now_us, self._busy_until)
        ser_us = int(round(size_bytes * 1e6 / cfg.bandwidth_bps))
        self._busy_until = start + ser_us
        self.sent += 1

        if cfg.loss_prob > 0.0 and self._rng.uniform() < cfg.loss_prob:
            self.dropped += 1
            self.sim.log_event(f"{self.name}_drop", length=size_bytes)
            return

        jitter = self._rng.randint(cfg.jitter_us + 1) if cfg.jitter_us else 0
        arrival = self._busy_until + cfg.one_way_delay_us + jitter
        deliver = self.deliver

        def _arrive(msg=message):
            self.delivered += 1
            deliver(msg)

        self.sim.at(arrival, _arrive)
