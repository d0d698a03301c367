"""Acceptance gates for the whole pipeline, one test per criterion.

The detection corpus (200 clips, seed 7) is filtered once and shared by the
reduction, refractory, and learning gates; the ordering corpus (60 clips,
seed 0) is filtered once under all ablation variants and shared by the
ordering and throughput gates. Heavy fixtures are module-scoped so the rest
of the test session never pays for them.
"""

import time

import numpy as np
import pytest

from dvspipe import bench, bnn, codec, synth
from dvspipe.bench import AblationSpec, CorpusRun, bandwidth_from_run
from dvspipe.bnn import DetectorModel, binary_conv_forward
from dvspipe.events import EVENT_DTYPE, SensorGeometry
from dvspipe.filter import (
    FilterConfig,
    FilteredFrame,
    accumulate_window,
    coincidence_detect,
    filter_pipeline,
)

GEO = SensorGeometry()
FULL = AblationSpec(name="full")


def fletcher32_reference(data: bytes) -> int:
    if len(data) % 2:
        data = data + b"\x00"
    s1 = s2 = 0
    for i in range(0, len(data), 2):
        word = data[i] | (data[i + 1] << 8)
        s1 = (s1 + word) % 65535
        s2 = (s2 + s1) % 65535
    return (s2 << 16) | s1


def random_frame(rng, density):
    return FilteredFrame(
        h_pooled=rng.random((40, 60)) < density,
        v_pooled=rng.random((40, 60)) < density,
        emit_time=0,
        windows_aggregated=1,
    )


@pytest.fixture(scope="module")
def detection_stack():
    """200-clip corpus (seed 7) filtered under the full pipeline.

    Wall time is recorded because the learning gate's budget includes it."""
    t0 = time.perf_counter()
    train_clips, test_clips = synth.build_dataset(100, 100, seed=7)
    train_run = bench.filter_corpus(train_clips, [FULL])["full"]
    test_run = bench.filter_corpus(test_clips, [FULL])["full"]
    return {
        "train_clips": train_clips,
        "test_clips": test_clips,
        "train_run": train_run,
        "test_run": test_run,
        "dictionary": codec.build_dictionary(train_run.frames),
        "elapsed": time.perf_counter() - t0,
    }


@pytest.fixture(scope="module")
def combined_run(detection_stack):
    train_run, test_run = detection_stack["train_run"], detection_stack["test_run"]
    return CorpusRun(
        per_clip=train_run.per_clip + test_run.per_clip,
        events_total=train_run.events_total + test_run.events_total,
        duration_us=train_run.duration_us + test_run.duration_us,
        raw_bits=train_run.raw_bits + test_run.raw_bits,
    )


@pytest.fixture(scope="module")
def ordering_stack():
    """60-clip corpus (seed 0) filtered under every ablation variant."""
    train, test = synth.build_dataset(30, 30, seed=0)
    clips = train + test
    runs = bench.filter_corpus(clips, bench.DEFAULT_VARIANTS)
    results = {
        v.name: bandwidth_from_run(runs[v.name], v) for v in bench.DEFAULT_VARIANTS
    }
    return {"clips": clips, "results": results}


def test_ac01_payload_size_identity():
    events = synth.gen_events(synth.SceneSpec(duration=100_000, seed=11))
    frames = filter_pipeline(events, FilterConfig(), GEO)
    assert frames, "calibration clip must emit frames"
    for frame in frames:
        assert frame.payload_bits == 4800 == 2 * 60 * 40
        assert len(frame.to_bytes()) * 8 == 4800
    raw_window_bits = GEO.width * GEO.height * 2
    assert raw_window_bits == 307_200
    print(f"AC1 PASS: payload 4800 bits/frame, raw window {raw_window_bits} bits")


def test_ac02_packet_overhead_arithmetic():
    rng = np.random.default_rng(1234)
    frames = [random_frame(rng, 0.045) for _ in range(400)]
    dictionary = codec.build_dictionary(frames)
    packet_bits = []
    payload_bits = []
    for frame in frames:
        nbits = codec.huffman_encode(frame, dictionary).nbits
        padded = nbits + (-nbits % 8)
        packet = codec.frame_packet(frame, dictionary)
        assert len(packet) * 8 == 64 + padded  # preamble + checksum = 64 bits
        packet_bits.append(len(packet) * 8)
        payload_bits.append(padded)
    mean_packet = float(np.mean(packet_bits))
    ratio = 4800.0 / float(np.mean(payload_bits))
    assert 3.2 <= ratio <= 4.0, f"corpus compression ratio {ratio:.2f} not near 3.6x"
    assert 1300.0 <= mean_packet <= 1500.0, f"mean packet {mean_packet:.0f} bits"
    print(f"AC2 PASS: mean packet {mean_packet:.0f} bits at ratio {ratio:.2f}x")


def test_ac03_bandwidth_reduction(detection_stack, combined_run):
    result = bandwidth_from_run(combined_run, FULL, detection_stack["dictionary"])
    duration_s = combined_run.duration_us / 1e6
    packet_bits = result.bitrate_bps * duration_s
    reduction = 100.0 * (1.0 - packet_bits / combined_run.raw_bits)
    n_clips = len(combined_run.per_clip)
    assert n_clips >= 100
    assert synth.SceneSpec().noise_rate >= 2.0
    assert reduction >= 99.0, f"reduction {reduction:.2f}% below 99%"
    print(f"AC3 PASS: {reduction:.2f}% reduction over {n_clips} clips")


def test_ac04_refractory_cap(detection_stack, combined_run):
    variant = AblationSpec(name="full", refractory=100_000)
    result = bandwidth_from_run(combined_run, variant, detection_stack["dictionary"])
    cap_bps = 10.0 * result.max_packet_bits  # <= 10 packets/s after a 100 ms gate
    assert result.refractory_packet_count > 0
    assert result.refractory_bitrate_bps <= cap_bps, (
        f"{result.refractory_bitrate_bps:.0f} bps exceeds cap {cap_bps:.0f}"
    )
    assert 10 * 1397 / 1000 == pytest.approx(13.97)  # cap with mean-sized packets
    print(
        f"AC4 PASS: refractory bitrate {result.refractory_bitrate_bps / 1e3:.2f} kbps "
        f"<= cap {cap_bps / 1e3:.2f} kbps (13.97 kbps at 1397-bit packets)"
    )


def test_ac05_codec_roundtrip_and_corruption():
    rng = np.random.default_rng(99)
    frames = [random_frame(rng, float(rng.uniform(0.0, 0.08))) for _ in range(10_000)]
    dictionary = codec.build_dictionary(frames[:300])

    stream_parts = []
    for frame in frames:
        bits = codec.huffman_encode(frame, dictionary)
        back = codec.huffman_decode(bits, dictionary)
        assert np.array_equal(back.h_pooled, frame.h_pooled)
        assert np.array_equal(back.v_pooled, frame.v_pooled)
        stream_parts.append(codec.frame_packet(frame, dictionary))

    deframer = codec.Deframer(dictionary)
    stream = b"".join(stream_parts)
    received = []
    for start in range(0, len(stream), 65536):
        received.extend(deframer.feed(stream[start : start + 65536]))
    received.extend(deframer.flush())
    assert len(received) == 10_000
    assert deframer.stats.checksum_failures == 0
    for got, sent in zip(received, frames):
        assert np.array_equal(got.h_pooled, sent.h_pooled)
        assert np.array_equal(got.v_pooled, sent.v_pooled)

    # every single-bit corruption of one reference packet must be rejected
    reference = stream_parts[0]
    for byte in range(len(reference)):
        for bit in range(8):
            corrupted = bytearray(reference)
            corrupted[byte] ^= 1 << bit
            frames_out, _ = codec.deframe_stream(bytes(corrupted), dictionary)
            assert frames_out == [], f"bit {byte * 8 + bit} corruption went undetected"
    print(
        f"AC5 PASS: 10000-frame lossless roundtrip, "
        f"{len(reference) * 8} single-bit corruptions all detected"
    )


def test_ac06_fletcher_oracle():
    assert codec.fletcher32(b"abcde") == 0xF04FC729
    assert codec.fletcher32(b"abcdefgh") == 0xEBE19591
    rng = np.random.default_rng(6)
    for _ in range(1000):
        data = rng.integers(0, 256, int(rng.integers(0, 300)), dtype=np.uint8).tobytes()
        assert codec.fletcher32(data) == fletcher32_reference(data)
    print("AC6 PASS: known vectors and 1000 random strings match the reference")


def test_ac07_binary_conv_identity():
    # exhaustive 3x3: all 512 inputs against all 512 sign patterns at once.
    # Patterns live in channel 0; channel 1 inputs stay zero, so its weights
    # cannot contribute regardless of sign.
    patterns = ((np.arange(512)[:, None] >> np.arange(9)) & 1).astype(bool)
    w_plus = np.concatenate(
        [patterns.reshape(512, 1, 3, 3), np.ones((512, 1, 3, 3), dtype=bool)], axis=1
    )
    model = DetectorModel(
        w_plus=w_plus,
        w_minus=~w_plus,
        alpha=np.ones(512),
        readout=np.ones(512),
        bias=0.0,
    )
    planes = np.zeros((2, 3, 512 * 5), dtype=bool)
    for j in range(512):
        planes[0, :, j * 5 : j * 5 + 3] = patterns[j].reshape(3, 3)
    acts = binary_conv_forward(planes, model)
    got = acts[:, 0, np.arange(512) * 5]  # (weight pattern, input pattern)
    signs = np.where(patterns, 1, -1).astype(np.int64)
    expected = signs @ patterns.T.astype(np.int64)
    assert np.array_equal(got, expected)

    # 500 random full-size instances against a float dot-product oracle
    # (sums of +-1 up to +-200 are exact in float32)
    rng = np.random.default_rng(7)
    for _ in range(500):
        frame_planes = rng.random((2, 40, 60)) < rng.uniform(0.02, 0.3)
        masks = rng.random((200, 2, 10, 10)) < 0.5
        instance = DetectorModel(
            w_plus=masks,
            w_minus=~masks,
            alpha=np.ones(200),
            readout=np.ones(200),
            bias=0.0,
        )
        acts = binary_conv_forward(frame_planes, instance)
        windows = np.lib.stride_tricks.sliding_window_view(
            frame_planes, (10, 10), axis=(1, 2)
        )
        patches = windows.transpose(1, 2, 0, 3, 4).reshape(-1, 200).astype(np.float32)
        sign_rows = np.where(masks, 1.0, -1.0).reshape(200, -1).astype(np.float32)
        oracle = (patches @ sign_rows.T).T.reshape(200, 31, 51).astype(np.int32)
        assert np.array_equal(acts, oracle)
    print("AC7 PASS: exhaustive 3x3 (2^9 x 2^9) and 500 full-size instances exact")


def pair_oracle(pos, neg):
    """Nested-loop count of same-polarity right/down adjacencies."""
    height, width = pos.shape
    h_set, v_set = set(), set()
    for y in range(height):
        for x in range(width):
            for plane in (pos, neg):
                if plane[y, x]:
                    if x + 1 < width and plane[y, x + 1]:
                        h_set.add((y, x))
                    if y + 1 < height and plane[y + 1, x]:
                        v_set.add((y, x))
    return h_set, v_set


def test_ac08_denoising_property():
    rng = np.random.default_rng(8)

    # pure impulse noise at <= 1% active-pixel density
    worst_survival = 0.0
    for i in range(20):
        density = 0.01 if i % 2 == 0 else 0.005
        n_active = int(density * GEO.npixels)
        flat = rng.choice(GEO.npixels, size=n_active, replace=False)
        pol = rng.integers(0, 2, n_active).astype(bool)
        events = np.zeros(n_active, dtype=EVENT_DTYPE)
        events["x"] = (flat % GEO.width).astype(np.uint16)
        events["y"] = (flat // GEO.width).astype(np.uint16)
        events["p"] = pol
        bitmap = accumulate_window(events, GEO)
        frames = coincidence_detect(bitmap)
        survival = (frames.h | frames.v).sum() / n_active
        worst_survival = max(worst_survival, survival)
        if i == 0:  # brute-force agreement on one full window
            h_set, v_set = pair_oracle(bitmap.pos, bitmap.neg)
            assert set(zip(*np.nonzero(frames.h))) == h_set
            assert set(zip(*np.nonzero(frames.v))) == v_set
    assert worst_survival <= 0.05, f"noise survival {worst_survival:.3f} above 5%"

    # solid moving edges keep their adjacent pairs
    spec = synth.SceneSpec(
        kind="box", height=60.0, velocity=(150.0, 0.0), start=(100.0, 100.0),
        edge_rate=1500.0, noise_rate=0.0, duration=60_000, seed=3,
    )
    events = synth.gen_events(spec)
    worst_retention = 1.0
    for w in range(10):
        window = events[(events["t"] >= w * 3000) & (events["t"] < (w + 1) * 3000)]
        bitmap = accumulate_window(window, GEO)
        h_set, v_set = pair_oracle(bitmap.pos, bitmap.neg)
        n_pairs = len(h_set) + len(v_set)
        assert n_pairs >= 50, "edge window too sparse to measure retention"
        frames = coincidence_detect(bitmap)
        assert set(zip(*np.nonzero(frames.h))) == h_set
        assert set(zip(*np.nonzero(frames.v))) == v_set
        retained = (frames.h.sum() + frames.v.sum()) / n_pairs
        worst_retention = min(worst_retention, retained)
    assert worst_retention >= 0.90
    print(
        f"AC8 PASS: noise survival <= {worst_survival:.3f} (floor 0.05), "
        f"edge-pair retention >= {worst_retention:.2f} (floor 0.90)"
    )


def test_ac09_end_to_end_learning(detection_stack):
    t0 = time.perf_counter()
    frames, labels = bench.frames_and_labels(
        detection_stack["train_clips"], detection_stack["train_run"].per_clip
    )
    rng = np.random.default_rng(7)
    if len(frames) > 4000:
        keep = rng.choice(len(frames), 4000, replace=False)
        frames = [frames[i] for i in keep]
        labels = labels[keep]
    model, _ = bnn.train(frames, labels, bnn.TrainConfig(epochs=12, seed=7))
    result = bench.evaluate_clip_level(
        model, detection_stack["test_clips"], detection_stack["test_run"].per_clip
    )
    elapsed = detection_stack["elapsed"] + (time.perf_counter() - t0)
    assert result.f1 >= 0.9, f"test F1 {result.f1:.3f} below 0.9"
    assert elapsed <= 600.0, f"pipeline took {elapsed:.0f}s, budget is 600s"
    print(
        f"AC9 PASS: clip-level F1 {result.f1:.3f} "
        f"(precision {result.precision:.3f}, recall {result.recall:.3f}) "
        f"on 200 clips in {elapsed:.0f}s"
    )


def test_ac10_ablation_orderings(ordering_stack):
    bw = {name: r.bitrate_bps for name, r in ordering_stack["results"].items()}
    assert bw["co-off"] > bw["full"], f"co-off {bw['co-off']:.0f} <= full {bw['full']:.0f}"
    assert bw["ag-off"] > bw["full"], f"ag-off {bw['ag-off']:.0f} <= full {bw['full']:.0f}"
    assert bw["mp-16"] < bw["mp-8"] < bw["mp-4"], (
        f"pool ordering violated: {bw['mp-16']:.0f}, {bw['mp-8']:.0f}, {bw['mp-4']:.0f}"
    )
    summary = ", ".join(f"{k} {v / 1e3:.0f} kbps" for k, v in bw.items())
    print(f"AC10 PASS: {summary}")


def test_ac11_throughput(ordering_stack):
    clips = ordering_stack["clips"][:8]
    rate, total = bench.measure_throughput(clips)
    assert rate >= 1e6, f"{rate / 1e6:.2f} M events/s below the 1 M floor"
    assert rate >= 5e6, f"{rate / 1e6:.2f} M events/s below the 5 M target"
    print(f"AC11 PASS: {rate / 1e6:.1f} M events/s over {total} events (target 5 M)")
