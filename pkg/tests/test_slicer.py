import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfda import slicer
from sfda.errors import ConfigError, DataError
from sfda.slicer import Slice, Spectrogram, Waveform


def test_silence():
    w = Waveform(np.zeros(32000 * 20), 32000)
    assert slicer.extract_slices(w) == []
    assert len(slicer.ricker_peaks(np.zeros(500))) == 0


def test_frame_count_and_shape():
    for n in (320, 321, 32000, 12345):
        spec = slicer.log_mel(Waveform(np.random.default_rng(0).normal(size=n), 32000))
        assert spec.values.shape == (160, -(-n // 320))
        assert spec.frame_rate == 100


def test_tone_lands_in_nearest_mel_bin():
    t = np.arange(32000) / 32000
    spec = slicer.log_mel(Waveform(np.sin(2 * np.pi * 1000 * t), 32000))
    centres = slicer.mel_centers()
    assert spec.values.mean(1).argmax() == np.abs(centres - 1000).argmin()


def test_denoise_hand_example():
    v = np.array([[0.0, 0.0, 0.0, 10.0]])
    out = slicer.denoise(Spectrogram(v, 100.0)).values
    # mean 2.5, sd 4.33: the 10 is an outlier; robust mean 0 over 3 + 1, robust sd 0
    assert np.array_equal(out, [[0.0, 0.0, 0.0, 10.0]])


def test_denoise_constant_channel_is_silent():
    out = slicer.denoise(Spectrogram(np.full((3, 20), -4.0), 100.0)).values
    assert np.array_equal(out, np.zeros((3, 20)))


def denoise_oracle(v):
    out = np.zeros_like(v)
    for c, row in enumerate(v):
        mu, sd = row.mean(), row.std()
        if sd == 0:
            continue
        inl = [x for x in row if abs(x - mu) <= 1.5 * sd]
        rm = sum(inl) / (len(inl) + 1)
        rsd = np.sqrt(sum((x - rm) ** 2 for x in inl) / (len(inl) + 1))
        for t, x in enumerate(row):
            if abs(x - rm) > 0.75 * rsd:
                out[c, t] = x - rm
    return out


@given(st.integers(0, 10_000), st.floats(-5, 5))
@settings(max_examples=30, deadline=None)
def test_denoise_matches_loop_oracle(seed, shift):
    v = np.random.default_rng(seed).normal(size=(4, 50)) + shift
    assert np.allclose(slicer.denoise(Spectrogram(v, 100.0)).values, denoise_oracle(v), atol=1e-12)


def test_ricker_kernel():
    k = slicer.ricker(101, 5.0)
    assert k.argmax() == 50
    assert np.all(k[np.abs(np.arange(101) - 50) > 20] == 0)


def test_two_bumps():
    t = np.arange(3000)
    sig = np.exp(-0.5 * ((t - 800) / 40) ** 2) + np.exp(-0.5 * ((t - 2100) / 40) ** 2)
    peaks = slicer.ricker_peaks(sig, 100.0).indices
    assert len(peaks) == 2
    assert abs(peaks[0] - 800) <= 5 and abs(peaks[1] - 2100) <= 5


def _recording(centres, duration=40.0, seed=0):
    return slicer.synth_bursts(duration, centres, noise=1e-6, seed=seed)


def test_gain_invariance():
    w = _recording([8.0, 20.0, 31.0])
    a = slicer.extract_slices(w)
    b = slicer.extract_slices(Waveform(w.samples * 0.1, w.rate))
    assert a == b and len(a) == 3


def test_slices_cover_events():
    centres = [5.0, 14.0, 27.0]
    sl = slicer.extract_slices(_recording(centres))
    assert len(sl) == 3
    for c, s in zip(centres, sl):
        assert s.start <= c <= s.start + s.duration and s.duration == 6.0


def test_boundary_windows_are_clamped():
    sl = slicer.extract_slices(_recording([1.0, 38.8]))
    assert sl[0].start == 0.0
    assert sl[-1].start + sl[-1].duration == pytest.approx(40.0)


def test_short_recording_one_window():
    w = slicer.synth_recording(2.0, [(1.0, 2000.0)], noise=1e-3)
    sl = slicer.extract_slices(w)
    assert len(sl) == 1 and sl[0].start == pytest.approx(-2.0) and sl[0].duration == 6.0
    assert slicer.extract_slices(w, "soundscape")[0].duration == 5.0
    with pytest.raises(ConfigError):
        slicer.extract_slices(w, "focal")


def test_resampled_input_gives_same_windows():
    w = _recording([9.0, 22.0], duration=30.0)
    down = slicer.resample(w, 16000)
    assert down.rate == 16000
    a = slicer.extract_slices(w)
    b = slicer.extract_slices(down)
    assert len(a) == len(b) == 2
    assert all(abs(x.start - y.start) < 0.05 for x, y in zip(a, b))


def test_deterministic():
    w = _recording([6.0, 18.0, 30.0], seed=3)
    assert slicer.extract_slices(w) == slicer.extract_slices(w)


def test_label_windows_examples():
    sl = [Slice(0.0, 5.0), Slice(5.0, 5.0), Slice(20.0, 5.0)]
    boxes = [(1.0, 2.0, "a"), (4.0, 6.0, "b"), (10.0, 11.0, "c")]
    out = slicer.label_windows(sl, boxes)
    assert out == [Slice(0.0, 5.0, frozenset({"a", "b"})), Slice(5.0, 5.0, frozenset({"b"}))]


@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0.1, 10), st.sampled_from("xyz")),
                max_size=8),
       st.lists(st.floats(0, 50), min_size=1, max_size=6))
@settings(max_examples=60, deadline=None)
def test_label_windows_oracle(boxes, starts):
    boxes = [(a, a + d, lab) for a, d, lab in boxes]
    sl = [Slice(s, 5.0) for s in starts]
    out = slicer.label_windows(sl, boxes)
    want = []
    for s in sl:
        labs = {lab for a, b, lab in boxes if max(a, s.start) < min(b, s.start + 5.0)}
        if labs:
            want.append(Slice(s.start, 5.0, frozenset(labs)))
    assert out == want


def test_wav_round_trip(tmp_path):
    w = Waveform(np.round(np.sin(np.arange(1000) / 7) * 0.5 * 32768) / 32768, 22050)
    slicer.write_wav(tmp_path / "a.wav", w)
    back = slicer.read_wav(tmp_path / "a.wav")
    assert back.rate == 22050 and np.array_equal(back.samples, w.samples)


def test_read_boxes(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("start_s,end_s,label\n1.5,2.0,wren\n")
    assert slicer.read_boxes(p) == [(1.5, 2.0, "wren")]


def test_bad_inputs():
    with pytest.raises(DataError):
        slicer.log_mel(Waveform(np.zeros(0), 32000))
    with pytest.raises(DataError):
        slicer.ricker_peaks(np.zeros((2, 2)))
