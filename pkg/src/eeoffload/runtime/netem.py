"""Deterministic network-condition emulation and the clocks it advances."""
from __future__ import annotations

import csv
import threading
import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    throughput_bps: float
    rtt_ms: float

    def __post_init__(self):
        if not (self.throughput_bps > 0 and self.rtt_ms > 0):
            raise ValueError(f"profile {self.name!r}: throughput and RTT must be positive")


PRESETS: dict[str, NetworkProfile] = {
    p.name: p for p in (
        NetworkProfile("sa-east-1", 93e6, 12.0),
        NetworkProfile("us-west-1", 68e6, 182.0),
        NetworkProfile("eu-west-3", 42e6, 213.0),
    )
}


def get_profile(name: str, extra: dict[str, NetworkProfile] | None = None) -> NetworkProfile:
    table = {**PRESETS, **(extra or {})}
    try:
        return table[name]
    except KeyError:
        raise ValueError(f"unknown network profile {name!r}; known: {sorted(table)}") from None


def load_profiles(path) -> dict[str, NetworkProfile]:
    """Read profiles from CSV with columns ``name,throughput_bps,rtt_ms``.

    Blank lines and lines starting with ``#`` are ignored.
    """
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    out = {}
    for row in csv.DictReader(lines):
        try:
            p = NetworkProfile(row["name"].strip(), float(row["throughput_bps"]), float(row["rtt_ms"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: profile rows need name, throughput_bps, rtt_ms") from exc
        out[p.name] = p
    return out


def emulate_transfer(payload_bytes: int, profile: NetworkProfile) -> float:
    """One request/response exchange: RTT plus serialization of the request payload at the link rate."""
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be >= 0")
    return profile.rtt_ms + 1000.0 * (8.0 * payload_bytes) / profile.throughput_bps


class VirtualClock:
    """Milliseconds that only move when told to. Single writer."""

    virtual = True

    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)

    def now_ms(self) -> float:
        return self._now

    def advance(self, ms: float) -> None:
        if ms < 0:
            raise ValueError("cannot move a clock backwards")
        self._now += ms

    sleep = advance

    def account(self, ms: float) -> None:
        """Charge work that happened elsewhere (e.g. remote compute)."""
        self.advance(ms)

    def measure(self, fn: Callable[[], object], cost_ms: float):
        """Run ``fn``; elapsed time is the modelled ``cost_ms``."""
        out = fn()
        self.advance(cost_ms)
        return out, cost_ms


class WallClock:
    virtual = False

    def now_ms(self) -> float:
        return time.perf_counter() * 1000.0

    def sleep(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)

    def account(self, ms: float) -> None:
        # remote work already elapsed in real time
        pass

    def measure(self, fn: Callable[[], object], cost_ms: float = 0.0):
        t0 = time.perf_counter()
        out = fn()
        return out, (time.perf_counter() - t0) * 1000.0


class NetworkEmulator:
    """Applies :func:`emulate_transfer` to a clock, with optional seeded Gaussian RTT jitter."""

    def __init__(self, profile: NetworkProfile, clock, jitter_ms: float = 0.0, seed: int = 0):
        if jitter_ms < 0:
            raise ValueError("jitter_ms must be >= 0")
        self.profile = profile
        self.clock = clock
        self.jitter_ms = float(jitter_ms)
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def delay_ms(self, payload_bytes: int) -> float:
        d = emulate_transfer(payload_bytes, self.profile)
        if self.jitter_ms:
            with self._lock:
                d += self.jitter_ms * float(self._rng.standard_normal())
            d = max(d, 0.0)
        return d

    def transfer(self, payload_bytes: int) -> float:
        d = self.delay_ms(payload_bytes)
        self.clock.sleep(d)
        return d


def profiles_from_names(names: Iterable[str], extra: dict[str, NetworkProfile] | None = None) -> list[NetworkProfile]:
    return [get_profile(n.strip(), extra) for n in names if n.strip()]
