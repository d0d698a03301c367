"""Near-chip event filter: windowed accumulation, coincidence denoising,
temporal aggregation, and block max-pooling.

The stages mirror a small hardware pipeline. Events are rasterized into
per-polarity bitmaps over fixed tau windows; a coincidence test keeps only
same-polarity horizontal/vertical pixel pairs; surviving bits are OR-merged
across windows until an activity threshold triggers (or a window budget runs
out); the aggregate is block-OR downsampled and emitted as a fixed-size
two-channel binary frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .events import SensorGeometry, events_array

TRIGGER_METRICS = ("blocks", "pixels")
FRAMES_MAGIC = b"FRM1"
_FRAMES_HEADER = struct.Struct("<4sHHI")
_FRAME_RECORD = struct.Struct("<QI")


@dataclass(frozen=True)
class FilterConfig:
    """Tunable stage parameters.

    tau: window length in microseconds.
    agg_event_threshold: aggregated activity count that triggers an emission.
    agg_window_limit: windows to accumulate before giving up and clearing.
    pool: block edge length for the output downsampling (must divide both
        geometry dimensions).
    refractory: minimum spacing between emissions in microseconds; frames
        arriving sooner are dropped, not delayed. 0 disables.
    coincidence / aggregation: stage enables, for ablations. With coincidence
        off the raw polarity planes pass through as the two channels. With
        aggregation off every window holding at least one active bit emits.
    trigger_metric: "blocks" counts active pooled blocks over both channels
        (the default), "pixels" counts full-resolution active pixels.
    """

    tau: int = 3000
    agg_event_threshold: int = 1000
    agg_window_limit: int = 5
    pool: int = 8
    refractory: int = 0
    coincidence: bool = True
    aggregation: bool = True
    trigger_metric: str = "blocks"

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.agg_event_threshold <= 0:
            raise ValueError("agg_event_threshold must be positive")
        if self.agg_window_limit < 1:
            raise ValueError("agg_window_limit must be >= 1")
        if self.pool < 1:
            raise ValueError("pool must be >= 1")
        if self.refractory < 0:
            raise ValueError("refractory must be >= 0")
        if self.trigger_metric not in TRIGGER_METRICS:
            raise ValueError(f"trigger_metric must be one of {TRIGGER_METRICS}")

    def validate_geometry(self, geometry: SensorGeometry) -> None:
        if geometry.width % self.pool or geometry.height % self.pool:
            raise ValueError(
                f"pool {self.pool} must divide geometry "
                f"{geometry.width}x{geometry.height}"
            )

    @classmethod
    def from_file(cls, path) -> "FilterConfig":
        """Load key=value lines; '#' starts a comment, blank lines ignored."""
        values: dict = {}
        bools = {"coincidence", "aggregation"}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in cls.__dataclass_fields__:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                if key in bools:
                    if value.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(f"{path}:{lineno}: bad boolean {value!r}")
                    values[key] = value.lower() in ("true", "1")
                elif key == "trigger_metric":
                    values[key] = value
                else:
                    values[key] = int(value)
        return cls(**values)


class WindowBitmap:
    """Per-pixel event presence for one tau window.

    Two boolean planes stand in for the conceptual 2-bit cell: bit 0 records
    a NEG event at the pixel, bit 1 a POS event.
    """

    __slots__ = ("geometry", "pos", "neg")

    def __init__(self, geometry: SensorGeometry):
        self.geometry = geometry
        self.pos = np.zeros((geometry.height, geometry.width), dtype=bool)
        self.neg = np.zeros((geometry.height, geometry.width), dtype=bool)

    def cell(self, x: int, y: int) -> int:
        return (int(self.pos[y, x]) << 1) | int(self.neg[y, x])


@dataclass
class ChannelFrames:
    """Unsigned coincidence bit-planes; polarity is consumed by the test."""

    h: np.ndarray
    v: np.ndarray
    window_index: int = 0


@dataclass(frozen=True)
class FilteredFrame:
    """One emitted output frame: two pooled bit-planes plus provenance."""

    h_pooled: np.ndarray
    v_pooled: np.ndarray
    emit_time: int
    windows_aggregated: int

    @property
    def payload_bits(self) -> int:
        return 2 * self.h_pooled.size

    def to_bytes(self) -> bytes:
        """Serialize h then v, row-major, most-significant bit first."""
        return np.packbits(self.h_pooled, axis=None).tobytes() + np.packbits(
            self.v_pooled, axis=None
        ).tobytes()

    @classmethod
    def from_bytes(
        cls,
        data: bytes,
        shape: tuple[int, int],
        emit_time: int = 0,
        windows_aggregated: int = 0,
    ) -> "FilteredFrame":
        nbits = shape[0] * shape[1]
        if nbits % 8:
            raise ValueError(f"plane shape {shape} is not byte-aligned")
        nbytes = nbits // 8
        if len(data) != 2 * nbytes:
            raise ValueError(f"expected {2 * nbytes} bytes, got {len(data)}")
        h = np.unpackbits(np.frombuffer(data[:nbytes], dtype=np.uint8))
        v = np.unpackbits(np.frombuffer(data[nbytes:], dtype=np.uint8))
        return cls(
            h_pooled=h.astype(bool).reshape(shape),
            v_pooled=v.astype(bool).reshape(shape),
            emit_time=emit_time,
            windows_aggregated=windows_aggregated,
        )


def pooled_shape(geometry: SensorGeometry, pool: int) -> tuple[int, int]:
    return (geometry.height // pool, geometry.width // pool)


def frame_payload_bytes(geometry: SensorGeometry, pool: int) -> int:
    rows, cols = pooled_shape(geometry, pool)
    return 2 * rows * cols // 8


def accumulate_window(events, geometry: SensorGeometry) -> WindowBitmap:
    """Rasterize one window's events; duplicate events are idempotent."""
    bitmap = WindowBitmap(geometry)
    arr = events_array(events)
    if arr.size:
        lin = arr["y"].astype(np.intp) * geometry.width + arr["x"]
        is_pos = arr["p"] == 1
        bitmap.pos.reshape(-1)[lin[is_pos]] = True
        bitmap.neg.reshape(-1)[lin[~is_pos]] = True
    return bitmap


def coincidence_detect(bitmap: WindowBitmap, window_index: int = 0) -> ChannelFrames:
    """Keep only same-polarity adjacent pairs.

    h(x, y) = 1 iff some polarity is active at both (x, y) and (x+1, y); the
    rightmost column is always 0. v pairs (x, y) with (x, y+1); the bottom
    row is always 0.
    """
    pos, neg = bitmap.pos, bitmap.neg
    h = np.zeros_like(pos)
    v = np.zeros_like(pos)
    h[:, :-1] = (pos[:, :-1] & pos[:, 1:]) | (neg[:, :-1] & neg[:, 1:])
    v[:-1, :] = (pos[:-1, :] & pos[1:, :]) | (neg[:-1, :] & neg[1:, :])
    return ChannelFrames(h=h, v=v, window_index=window_index)


def max_pool(plane: np.ndarray, pool: int) -> np.ndarray:
    """Block OR: pooled(i, j) = any bit in the pool x pool block at (i, j)."""
    if pool == 1:
        return plane.copy()
    rows, cols = plane.shape
    if rows % pool or cols % pool:
        raise ValueError(f"pool {pool} must divide plane shape {plane.shape}")
    return plane.reshape(rows // pool, pool, cols // pool, pool).any(axis=(1, 3))


def _pool_sparse(plane: np.ndarray, pool: int, out: np.ndarray) -> None:
    """OR the pooled projection of `plane` into `out` (same result as
    out |= max_pool(plane, pool), cheaper when the plane is sparse)."""
    lin = np.flatnonzero(plane)
    if lin.size == 0:
        return
    cols = plane.shape[1]
    y, x = lin // cols, lin % cols
    out.reshape(-1)[(y // pool) * (cols // pool) + (x // pool)] = True


@dataclass
class AggregationState:
    """OR-accumulator across windows plus its pooled shadow.

    The pooled planes track max_pool of the full-resolution planes exactly
    (block OR distributes over union), so the trigger count never needs a
    full-plane pooling pass.
    """

    h_agg: np.ndarray
    v_agg: np.ndarray
    h_pooled: np.ndarray
    v_pooled: np.ndarray
    windows_aggregated: int = 0

    @classmethod
    def fresh(cls, geometry: SensorGeometry, pool: int) -> "AggregationState":
        full = (geometry.height, geometry.width)
        pooled = (geometry.height // pool, geometry.width // pool)
        return cls(
            h_agg=np.zeros(full, dtype=bool),
            v_agg=np.zeros(full, dtype=bool),
            h_pooled=np.zeros(pooled, dtype=bool),
            v_pooled=np.zeros(pooled, dtype=bool),
        )

    def trigger_count(self, metric: str) -> int:
        if metric == "pixels":
            return int(np.count_nonzero(self.h_agg)) + int(np.count_nonzero(self.v_agg))
        return int(np.count_nonzero(self.h_pooled)) + int(np.count_nonzero(self.v_pooled))

    def clear(self) -> None:
        self.h_agg = np.zeros_like(self.h_agg)
        self.v_agg = np.zeros_like(self.v_agg)
        self.h_pooled = np.zeros_like(self.h_pooled)
        self.v_pooled = np.zeros_like(self.v_pooled)
        self.windows_aggregated = 0


def aggregate_step(
    state: AggregationState, frames: ChannelFrames, config: FilterConfig
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Fold one window into the accumulator; call once per window in order.

    Returns the full-resolution aggregated planes when the trigger count
    reaches the threshold at this window's end (state then clears). Clears
    silently once agg_window_limit windows have accumulated without a
    trigger.
    """
    state.h_agg |= frames.h
    state.v_agg |= frames.v
    _pool_sparse(frames.h, config.pool, state.h_pooled)
    _pool_sparse(frames.v, config.pool, state.v_pooled)
    state.windows_aggregated += 1

    if state.trigger_count(config.trigger_metric) >= config.agg_event_threshold:
        planes = (state.h_agg, state.v_agg)
        state.clear()
        return planes
    if state.windows_aggregated >= config.agg_window_limit:
        state.clear()
    return None


def advance_empty(state: AggregationState, n_windows: int, config: FilterConfig) -> None:
    """Apply n_windows event-free aggregate_step calls in O(1).

    An empty window cannot raise the trigger count, so the only effects are
    the window counter and the limit-driven clear.
    """
    if n_windows <= 0 or not config.aggregation:
        return
    if state.windows_aggregated + n_windows < config.agg_window_limit:
        state.windows_aggregated += n_windows
        return
    remainder = (state.windows_aggregated + n_windows) % config.agg_window_limit
    state.clear()
    state.windows_aggregated = remainder


class FilterPipeline:
    """Streaming filter: feed time-sorted event chunks, collect frames.

    State carries across feed() calls, so chunk boundaries are invisible:
    any split of a stream produces the identical frame sequence. flush()
    closes the final window.
    """

    def __init__(self, config: FilterConfig, geometry: SensorGeometry):
        config.validate_geometry(geometry)
        self.config = config
        self.geometry = geometry
        self._state = AggregationState.fresh(geometry, config.pool)
        self._next_window = 0
        self._pending: list[np.ndarray] = []
        self._pending_t_max = -1
        self._last_emit: Optional[int] = None
        self.events_processed = 0

    def feed(self, events) -> list:
        """Process every window that can no longer receive events."""
        arr = events_array(events)
        if arr.size == 0:
            return []
        t = arr["t"]
        if int(t[0]) < self._pending_t_max:
            raise ValueError("events fed out of order")
        self._pending_t_max = int(t[-1])
        last_complete = int(t[-1]) // self.config.tau  # windows before this are closed
        self._pending.append(arr)
        buffered = (
            np.concatenate(self._pending) if len(self._pending) > 1 else self._pending[0]
        )
        split = np.searchsorted(buffered["t"], last_complete * self.config.tau)
        ready, tail = buffered[:split], buffered[split:]
        self._pending = [tail] if tail.size else []
        if ready.size == 0:
            return []
        return self._process(ready)

    def flush(self) -> list:
        """Close out any buffered partial window."""
        if not self._pending:
            return []
        buffered = (
            np.concatenate(self._pending) if len(self._pending) > 1 else self._pending[0]
        )
        self._pending = []
        return self._process(buffered)

    def _process(self, arr: np.ndarray) -> list:
        """Run complete windows over a ready, time-sorted event array."""
        cfg = self.config
        frames: list[FilteredFrame] = []
        w = arr["t"] // cfg.tau
        first, last = int(w[0]), int(w[-1])
        advance_empty(self._state, first - self._next_window, cfg)
        # searchsorted over per-window boundaries; windows with no events
        # inside the span still advance the aggregation counter.
        bounds = np.searchsorted(w, np.arange(first, last + 2))
        prev_window = first - 1
        for i, wi in enumerate(range(first, last + 1)):
            lo, hi = bounds[i], bounds[i + 1]
            if lo == hi:
                continue
            advance_empty(self._state, wi - prev_window - 1, cfg)
            prev_window = wi
            self.events_processed += hi - lo
            frame = self._run_window(arr[lo:hi], wi)
            if frame is not None:
                frames.append(frame)
        self._next_window = last + 1
        return frames

    def _run_window(self, events: np.ndarray, window_index: int) -> Optional[FilteredFrame]:
        cfg = self.config
        bitmap = accumulate_window(events, self.geometry)
        if cfg.coincidence:
            channels = coincidence_detect(bitmap, window_index)
        else:
            channels = ChannelFrames(h=bitmap.pos, v=bitmap.neg, window_index=window_index)

        emit_time = (window_index + 1) * cfg.tau
        if cfg.aggregation:
            windows = self._state.windows_aggregated + 1  # count after this fold
            result = aggregate_step(self._state, channels, cfg)
            if result is None:
                return None
            h_full, v_full = result
            h_pooled = max_pool(h_full, cfg.pool)
            v_pooled = max_pool(v_full, cfg.pool)
        else:
            if not (channels.h.any() or channels.v.any()):
                return None
            h_pooled = max_pool(channels.h, cfg.pool)
            v_pooled = max_pool(channels.v, cfg.pool)
            windows = 1

        if self._last_emit is not None and emit_time - self._last_emit < cfg.refractory:
            return None
        self._last_emit = emit_time
        return FilteredFrame(
            h_pooled=h_pooled,
            v_pooled=v_pooled,
            emit_time=emit_time,
            windows_aggregated=windows,
        )


def filter_pipeline(
    events, config: FilterConfig, geometry: SensorGeometry
) -> list[FilteredFrame]:
    """Batch entry point: the whole stream in, the full frame list out."""
    pipeline = FilterPipeline(config, geometry)
    frames = pipeline.feed(events)
    frames.extend(pipeline.flush())
    return frames


def save_frames(path, frames: list[FilteredFrame], shape: tuple[int, int]) -> None:
    """Write a "FRM1" container: header (magic, rows, cols, count), then per
    frame a (emit_time u64, windows u32) record and the packed payload."""
    for frame in frames:
        if frame.h_pooled.shape != shape:
            raise ValueError(f"frame shape {frame.h_pooled.shape} != {shape}")
    with open(path, "wb") as fh:
        fh.write(_FRAMES_HEADER.pack(FRAMES_MAGIC, shape[0], shape[1], len(frames)))
        for frame in frames:
            fh.write(_FRAME_RECORD.pack(frame.emit_time, frame.windows_aggregated))
            fh.write(frame.to_bytes())


def load_frames(path) -> tuple[list[FilteredFrame], tuple[int, int]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _FRAMES_HEADER.size or data[:4] != FRAMES_MAGIC:
        raise ValueError(f"{path}: not a frames file (expected {FRAMES_MAGIC!r})")
    _, rows, cols, count = _FRAMES_HEADER.unpack_from(data, 0)
    shape = (rows, cols)
    payload_bytes = 2 * rows * cols // 8
    record = _FRAME_RECORD.size + payload_bytes
    expected = _FRAMES_HEADER.size + count * record
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    frames = []
    pos = _FRAMES_HEADER.size
    for _ in range(count):
        emit_time, windows = _FRAME_RECORD.unpack_from(data, pos)
        pos += _FRAME_RECORD.size
        frames.append(
            FilteredFrame.from_bytes(
                data[pos : pos + payload_bytes], shape, emit_time, windows
            )
        )
        pos += payload_bytes
    return frames, shape
