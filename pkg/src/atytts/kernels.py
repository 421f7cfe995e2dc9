"""Hot numeric kernels.

Each kernel exists twice: a loop version compiled with numba and a
vectorized numpy version.  The public names dispatch on
``atytts._accel.USE_NUMBA``; both variants stay importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# monotonic alignment search
# --------------------------------------------------------------------------


def _mas_backtrack(Q, L, T):
    durations = np.zeros(L, dtype=np.int64)
    i = L - 1
    for t in range(T - 1, -1, -1):
        durations[i] += 1
        if t > 0 and i > 0 and Q[i - 1, t - 1] < Q[i, t - 1]:
            i -= 1
    return durations


@njit
def _maximum_path_nb(cost):
    L, T = cost.shape
    Q = np.full((L, T), np.inf)
    Q[0, 0] = cost[0, 0]
    for t in range(1, T):
        Q[0, t] = Q[0, t - 1] + cost[0, t]
    for t in range(1, T):
        top = min(L, t + 1)
        for i in range(1, top):
            stay = Q[i, t - 1]
            move = Q[i - 1, t - 1]
            Q[i, t] = (stay if stay <= move else move) + cost[i, t]
    durations = np.zeros(L, dtype=np.int64)
    i = L - 1
    for t in range(T - 1, -1, -1):
        durations[i] += 1
        if t > 0 and i > 0 and Q[i - 1, t - 1] < Q[i, t - 1]:
            i -= 1
    return durations


def _maximum_path_np(cost):
    L, T = cost.shape
    Q = np.full((L, T), np.inf)
    Q[0] = np.cumsum(cost[0])
    inf = np.array([np.inf])
    for t in range(1, T):
        prev = Q[:, t - 1]
        move = np.concatenate([inf, prev[:-1]])
        Q[1:, t] = np.minimum(prev, move)[1:] + cost[1:, t]
    return _mas_backtrack(Q, L, T)


def maximum_path(cost):
    """Minimum-cost monotonic alignment of ``L`` tokens to ``T`` frames.

    ``cost[i, t]`` is the price of assigning frame ``t`` to token ``i``.
    Every token receives at least one frame and tokens are never reordered.
    Returns the per-token frame counts (int64, sums to ``T``).
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    L, T = cost.shape
    if L == 0 or L > T:
        raise ValueError(f"cannot align {L} tokens to {T} frames")
    if USE_NUMBA:
        return _maximum_path_nb(cost)
    return _maximum_path_np(cost)


# --------------------------------------------------------------------------
# harmonic-stack oscillator bank
# --------------------------------------------------------------------------


@njit
def _harmonic_stack_nb(f0, frame_amps, hop, sample_rate):
    n_samples = f0.shape[0]
    n_frames, n_harm = frame_amps.shape
    out = np.zeros(n_samples)
    phase = 0.0
    step = TWO_PI / sample_rate
    for n in range(n_samples):
        phase += step * f0[n]
        u = (n - 0.5 * hop) / hop
        if u <= 0.0:
            i0 = 0
            w = 0.0
        elif u >= n_frames - 1:
            i0 = n_frames - 1
            w = 0.0
        else:
            i0 = int(u)
            w = u - i0
        i1 = min(i0 + 1, n_frames - 1)
        # sin((k+1) phase) by the Chebyshev recurrence: one sin/cos per sample
        wrapped = phase % TWO_PI
        c2 = 2.0 * np.cos(wrapped)
        s_prev = 0.0
        s_cur = np.sin(wrapped)
        acc = 0.0
        for k in range(n_harm):
            a = (1.0 - w) * frame_amps[i0, k] + w * frame_amps[i1, k]
            acc += a * s_cur
            s_next = c2 * s_cur - s_prev
            s_prev = s_cur
            s_cur = s_next
        out[n] = acc
    return out


def _harmonic_stack_np(f0, frame_amps, hop, sample_rate):
    n_samples = f0.shape[0]
    n_frames, n_harm = frame_amps.shape
    phase = np.cumsum(f0 * (TWO_PI / sample_rate))
    u = np.clip((np.arange(n_samples) - 0.5 * hop) / hop, 0.0, n_frames - 1)
    i0 = np.minimum(u.astype(np.int64), n_frames - 1)
    i1 = np.minimum(i0 + 1, n_frames - 1)
    w = u - i0
    out = np.zeros(n_samples)
    for k in range(n_harm):
        a = (1.0 - w) * frame_amps[i0, k] + w * frame_amps[i1, k]
        out += a * np.sin((k + 1) * phase)
    return out


def harmonic_stack(f0, frame_amps, hop, sample_rate):
    """Sum of harmonics of a time-varying fundamental.

    ``f0`` holds one fundamental frequency (Hz) per output sample;
    ``frame_amps[t, k]`` is the amplitude of harmonic ``k + 1`` at the centre
    of frame ``t`` (sample ``t * hop + hop / 2``), linearly interpolated
    in between.
    """
    f0 = np.ascontiguousarray(f0, dtype=np.float64)
    frame_amps = np.ascontiguousarray(frame_amps, dtype=np.float64)
    if USE_NUMBA:
        return _harmonic_stack_nb(f0, frame_amps, int(hop), float(sample_rate))
    return _harmonic_stack_np(f0, frame_amps, int(hop), float(sample_rate))


# --------------------------------------------------------------------------
# weighted overlap-add
# --------------------------------------------------------------------------


@njit
def _overlap_add_nb(frames, window, hop):
    n_frames, n_fft = frames.shape
    length = (n_frames - 1) * hop + n_fft
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        start = t * hop
        for j in range(n_fft):
            out[start + j] += frames[t, j] * window[j]
            norm[start + j] += window[j] * window[j]
    return out, norm


def _overlap_add_np(frames, window, hop):
    n_frames, n_fft = frames.shape
    length = (n_frames - 1) * hop + n_fft
    out = np.zeros(length)
    norm = np.zeros(length)
    wsq = window * window
    weighted = frames * window
    for t in range(n_frames):
        out[t * hop:t * hop + n_fft] += weighted[t]
        norm[t * hop:t * hop + n_fft] += wsq
    return out, norm


def overlap_add(frames, window, hop):
    """Windowed overlap-add; returns ``(signal, window_power)`` unnormalized."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if USE_NUMBA:
        return _overlap_add_nb(frames, window, int(hop))
    return _overlap_add_np(frames, window, int(hop))
