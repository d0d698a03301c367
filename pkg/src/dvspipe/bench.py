"""Bandwidth and detection-quality measurement, plus the ablation runner.

The raw baseline charges each clip the grouped wire format's bit cost
(32 bits per word, headers included); the filtered cost is the sum of
emitted packet lengths. Refractory-mode numbers come from gating emission
times after the fact, which is exact: suppressing an emission never alters
the filter's internal state, only whether the frame leaves the device.

Clip event arrays regenerate on each access, so every loop here touches
each clip's events exactly once and runs all variants against that one
array before moving on.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bnn, codec
from .events import GROUP_MAX_DELTA
from .filter import FilterConfig, FilteredFrame, filter_pipeline

CSV_COLUMNS = [
    "variant",
    "bitrate_bps",
    "mean_packet_bits",
    "f1",
    "precision",
    "recall",
    "reduction_pct",
]


@dataclass(frozen=True)
class AblationSpec:
    """One pipeline variant to measure."""

    name: str
    coincidence: bool = True
    aggregation: bool = True
    pool: int = 8
    huffman: bool = True
    refractory: int = 0

    def filter_config(self, base: FilterConfig = FilterConfig()) -> FilterConfig:
        return replace(
            base,
            coincidence=self.coincidence,
            aggregation=self.aggregation,
            pool=self.pool,
            refractory=0,  # applied post-hoc from emission times
        )


DEFAULT_VARIANTS = (
    AblationSpec(name="full"),
    AblationSpec(name="co-off", coincidence=False),
    AblationSpec(name="ag-off", aggregation=False),
    AblationSpec(name="mp-4", pool=4),
    AblationSpec(name="mp-8", pool=8),
    AblationSpec(name="mp-16", pool=16),
)


def raw_grouped_bits(events: np.ndarray) -> int:
    """Wire cost of the grouped format: 32 bits per word, without building
    the word array. One header per (t, y) run plus extra headers for
    timestamp deltas beyond the field width, one word per event."""
    n = int(events.size)
    if n == 0:
        return 0
    t = events["t"].astype(np.int64)
    y = events["y"].astype(np.int64)
    starts = np.empty(n, dtype=bool)
    starts[0] = True
    starts[1:] = (np.diff(t) != 0) | (np.diff(y) != 0)
    group_t = t[starts]
    deltas = np.diff(group_t, prepend=np.int64(0))
    extra = deltas // GROUP_MAX_DELTA
    extra[(extra > 0) & (deltas % GROUP_MAX_DELTA == 0)] -= 1
    n_words = n + int(np.count_nonzero(starts)) + int(extra.sum())
    return 32 * n_words


def apply_refractory(emit_times: Sequence[int], refractory: int) -> np.ndarray:
    """Indices of emissions that survive a minimum-interval gate."""
    kept = []
    last = None
    for i, t in enumerate(emit_times):
        if last is None or t - last >= refractory:
            kept.append(i)
            last = t
    return np.asarray(kept, dtype=np.intp)


@dataclass
class CorpusRun:
    """One filtering pass of a corpus under one variant."""

    per_clip: list[list[FilteredFrame]]
    events_total: int = 0
    duration_us: int = 0
    raw_bits: int = 0
    filter_seconds: float = 0.0

    @property
    def frames(self) -> list[FilteredFrame]:
        return [frame for frames in self.per_clip for frame in frames]


def filter_corpus(
    clips,
    variants: Sequence[AblationSpec],
    base: FilterConfig = FilterConfig(),
) -> dict[str, CorpusRun]:
    """Filter a corpus under every variant, touching each clip's events once."""
    runs = {v.name: CorpusRun(per_clip=[]) for v in variants}
    configs = {v.name: v.filter_config(base) for v in variants}
    for clip in clips:
        events = clip.events
        raw = raw_grouped_bits(events)
        for variant in variants:
            run = runs[variant.name]
            t0 = time.perf_counter()
            frames = filter_pipeline(events, configs[variant.name], clip.spec.geometry)
            run.filter_seconds += time.perf_counter() - t0
            run.per_clip.append(frames)
            run.events_total += int(events.size)
            run.duration_us += clip.duration
            run.raw_bits += raw
    return runs


@dataclass(frozen=True)
class BandwidthResult:
    bitrate_bps: float
    mean_packet_bits: float
    packet_count: int
    raw_bitrate_bps: float
    reduction_pct: float
    refractory_bitrate_bps: float  # same corpus, variant's refractory gate
    refractory_packet_count: int
    max_packet_bits: int


def packet_bits_for(
    frame: FilteredFrame, dictionary: Optional[codec.HuffmanDictionary], huffman: bool
) -> int:
    """Length of the framed packet: 64 bits overhead + padded payload."""
    if huffman:
        if dictionary is None:
            raise ValueError("huffman accounting needs a dictionary")
        nbits = codec.huffman_encode(frame, dictionary).nbits
    else:
        nbits = frame.payload_bits
    return 64 + nbits + (-nbits % 8)


def bandwidth_from_run(
    run: CorpusRun,
    variant: AblationSpec,
    dictionary: Optional[codec.HuffmanDictionary] = None,
) -> BandwidthResult:
    """Bitrate accounting over an already-filtered corpus."""
    frames = run.frames
    if variant.huffman and dictionary is None and frames:
        dictionary = codec.build_dictionary(frames)
    packet_bits = [packet_bits_for(f, dictionary, variant.huffman) for f in frames]
    duration_s = run.duration_us / 1e6
    if duration_s <= 0:
        raise ValueError("corpus has zero duration")
    total_bits = float(np.sum(packet_bits)) if packet_bits else 0.0

    # refractory gating clip by clip (emission clocks restart per clip)
    kept_bits = 0.0
    kept_count = 0
    cursor = 0
    for clip_frames in run.per_clip:
        kept = apply_refractory([f.emit_time for f in clip_frames], variant.refractory)
        for i in kept:
            kept_bits += packet_bits[cursor + i]
        kept_count += len(kept)
        cursor += len(clip_frames)

    return BandwidthResult(
        bitrate_bps=total_bits / duration_s,
        mean_packet_bits=float(np.mean(packet_bits)) if packet_bits else 0.0,
        packet_count=len(packet_bits),
        raw_bitrate_bps=run.raw_bits / duration_s,
        reduction_pct=100.0 * (1.0 - total_bits / run.raw_bits) if run.raw_bits else 0.0,
        refractory_bitrate_bps=kept_bits / duration_s,
        refractory_packet_count=kept_count,
        max_packet_bits=int(np.max(packet_bits)) if packet_bits else 0,
    )


def measure_bandwidth(
    clips,
    variant: AblationSpec,
    base: FilterConfig = FilterConfig(),
    dictionary: Optional[codec.HuffmanDictionary] = None,
) -> BandwidthResult:
    """Filter the corpus under one variant and report its bitrates.

    The Huffman dictionary defaults to one trained on this corpus's own
    frames; pass one in to model a deployed precomputed dictionary.
    """
    if not clips:
        raise ValueError("empty corpus")
    run = filter_corpus(clips, [variant], base)[variant.name]
    return bandwidth_from_run(run, variant, dictionary)


@dataclass(frozen=True)
class F1Result:
    f1: float
    precision: float
    recall: float
    degenerate: bool = False  # a zero denominator was coerced to 0


def f1_score(predictions, labels) -> F1Result:
    predictions = np.asarray(predictions, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if not labels.any():
        raise ValueError("no positive labels")
    tp = int(np.count_nonzero(predictions & labels))
    fp = int(np.count_nonzero(predictions & ~labels))
    fn = int(np.count_nonzero(~predictions & labels))
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return F1Result(0.0, precision, recall, True)
    f1 = 2 * precision * recall / (precision + recall)
    return F1Result(f1, precision, recall, degenerate)


@dataclass
class VariantResult:
    name: str
    bandwidth: Optional[BandwidthResult]
    f1: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    failed: bool = False
    error: str = ""


@dataclass
class BenchReport:
    rows: list[VariantResult]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                bw = row.bandwidth
                writer.writerow(
                    [
                        row.name,
                        f"{bw.bitrate_bps:.3f}" if bw else "",
                        f"{bw.mean_packet_bits:.3f}" if bw else "",
                        f"{row.f1:.4f}",
                        f"{row.precision:.4f}",
                        f"{row.recall:.4f}",
                        f"{bw.reduction_pct:.4f}" if bw else "",
                    ]
                )

    def write_chart(self, path) -> None:
        """Bandwidth/F1 trade-off scatter, one point per variant."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 5))
        for row in self.rows:
            if row.failed or row.bandwidth is None:
                continue
            x = max(row.bandwidth.bitrate_bps, 1.0) / 1e3
            ax.scatter([x], [row.f1], label=row.name)
            ax.annotate(row.name, (x, row.f1), textcoords="offset points", xytext=(6, 4))
        ax.set_xscale("log")
        ax.set_xlabel("bitrate (kbps)")
        ax.set_ylabel("test F1")
        ax.set_title("Bandwidth vs detection quality")
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)


def frames_and_labels(clips, per_clip) -> tuple[list[FilteredFrame], np.ndarray]:
    """Flatten per-clip frames, labeling each frame with its clip's label."""
    frames: list[FilteredFrame] = []
    labels: list[bool] = []
    for clip, clip_frames in zip(clips, per_clip):
        frames.extend(clip_frames)
        labels.extend([clip.label] * len(clip_frames))
    return frames, np.asarray(labels, dtype=bool)


def evaluate_clip_level(model, clips, per_clip) -> F1Result:
    """Clip-level detection: mean frame score against the model threshold.

    Averaging shrinks per-frame noise with the number of emissions, where
    an any-frame rule would let a single outlier frame flip a clip. A clip
    that emitted nothing scores negative.
    """
    predictions = []
    labels = []
    for clip, frames in zip(clips, per_clip):
        if frames:
            mean = float(np.mean([bnn.detect(f, model).score for f in frames]))
            predictions.append(mean > model.threshold)
        else:
            predictions.append(False)
        labels.append(clip.label)
    return f1_score(predictions, labels)


def run_ablation(
    train_clips,
    test_clips,
    variants: Sequence[AblationSpec] = DEFAULT_VARIANTS,
    train_config: bnn.TrainConfig = bnn.TrainConfig(),
    base_filter: FilterConfig = FilterConfig(),
    out_dir=None,
    max_train_frames: int = 4000,
) -> BenchReport:
    """Filter, train, and score every variant; optionally write CSV + SVG.

    Each variant trains its own detector (the input dimensionality changes
    with pool) under its own derived seed, with its own dictionary built
    from its training-split frames. A variant whose training fails (say,
    all its emitted frames share one class) is recorded and skipped; its
    bandwidth numbers still land in the report.
    """
    if not variants:
        raise ValueError("no variants given")
    train_runs = filter_corpus(train_clips, variants, base_filter)
    test_runs = filter_corpus(test_clips, variants, base_filter)
    rows = []
    for index, variant in enumerate(variants):
        seed = train_config.seed + index
        train_frames, train_labels = frames_and_labels(
            train_clips, train_runs[variant.name].per_clip
        )
        dictionary = None
        if variant.huffman and train_frames:
            dictionary = codec.build_dictionary(train_frames)
        bandwidth = bandwidth_from_run(test_runs[variant.name], variant, dictionary)
        row = VariantResult(name=variant.name, bandwidth=bandwidth)
        try:
            frames, labels = train_frames, train_labels
            if len(frames) > max_train_frames:
                keep = np.random.default_rng(seed).choice(
                    len(frames), size=max_train_frames, replace=False
                )
                keep.sort()
                frames = [frames[i] for i in keep]
                labels = labels[keep]
            model, _ = bnn.train(frames, labels, replace(train_config, seed=seed))
            result = evaluate_clip_level(
                model, test_clips, test_runs[variant.name].per_clip
            )
            row.f1, row.precision, row.recall = result.f1, result.precision, result.recall
        except Exception as exc:  # noqa: BLE001 - a failed variant must not stop the run
            row.failed = True
            row.error = str(exc)
        rows.append(row)
    report = BenchReport(rows=rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "ablation.csv")
        report.write_chart(out / "ablation.svg")
    return report


def measure_throughput(clips, config: FilterConfig = FilterConfig()) -> tuple[float, int]:
    """(events per second through filter_pipeline, total events)."""
    total_events = 0
    spent = 0.0
    for clip in clips:
        events = clip.events
        t0 = time.perf_counter()
        filter_pipeline(events, config, clip.spec.geometry)
        spent += time.perf_counter() - t0
        total_events += int(events.size)
    if spent == 0.0:
        return 0.0, total_events
    return total_events / spent, total_events
