from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# record flag bits
FLAG_CLAMPED = 0x01  # jitter pushed the timestamp below zero
FLAG_DARK = 0x02  # detector dark count (simulation truth)
FLAG_POISSON = 0x04  # photon with cascade-uncorrelated timing (simulation truth)


class UnsortedStreamError(ValueError):
    pass


@dataclass
class TimeTagStream:
    """Time-ordered detection records in integer picoseconds."""

    timestamps: np.ndarray
    channels: np.ndarray
    flags: np.ndarray
    duration_ps: int
    channel_map: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.channels = np.asarray(self.channels, dtype=np.uint16)
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        self.duration_ps = int(self.duration_ps)
        n = len(self.timestamps)
        if len(self.channels) != n or len(self.flags) != n:
            raise ValueError("timestamps, channels and flags must have equal length")
        if n and self.timestamps.min() < 0:
            raise ValueError("timestamps must be non-negative")
        unknown = set(np.unique(self.channels).tolist()) - set(self.channel_map)
        if unknown:
            raise ValueError(f"records reference channels missing from channel_map: {sorted(unknown)}")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def empty(cls, duration_ps: int = 0, channel_map=None) -> "TimeTagStream":
        return cls(np.empty(0, np.int64), np.empty(0, np.uint16), np.empty(0, np.uint8),
                   duration_ps, dict(channel_map or {}))

    @property
    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) >= 0))

    def check_sorted(self):
        if not self.is_sorted:
            bad = int(np.argmax(np.diff(self.timestamps) < 0)) + 1
            raise UnsortedStreamError(f"timestamps decrease at record {bad}")

    def channel_times(self, channels) -> np.ndarray:
        """Sorted timestamps of one channel or the union of several."""
        chans = np.atleast_1d(np.asarray(channels))
        return self.timestamps[np.isin(self.channels, chans)]

    def count(self, channels) -> int:
        return int(np.count_nonzero(np.isin(self.channels, np.atleast_1d(channels))))

    def channel_of(self, label: str) -> int:
        for ch, name in self.channel_map.items():
            if name == label:
                return ch
        raise KeyError(f"no channel labelled {label!r}")

    def equals(self, other: "TimeTagStream") -> bool:
        return (
            self.duration_ps == other.duration_ps
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.flags, other.flags)
        )


def merge_sorted(timestamps, channels, flags, duration_ps, channel_map) -> TimeTagStream:
    """Globally sort records by (timestamp, channel) and wrap them."""
    order = np.lexsort((channels, timestamps))
    return TimeTagStream(np.asarray(timestamps)[order], np.asarray(channels)[order],
                         np.asarray(flags)[order], duration_ps, channel_map)
