"""
Audio loading and the acoustic baselines' frame-level features.

Both baseline tracks run on a 10 ms clock: frame i is centred on sample
i * hop, so a time t maps to frame round(t / 0.01).
"""

import logging
from pathlib import Path

import librosa
import numpy as np
import parselmouth
import soundfile as sf

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

BASELINE_HOP_S = 0.01
WINDOW_HALF = 10
WINDOW_FRAMES = 2 * WINDOW_HALF + 1

F0_FLOOR_HZ = 75.0
F0_CEILING_HZ = 600.0

N_MFCC = 40
MFCC_WIN_LENGTH = 400  # 25 ms
MFCC_N_FFT = 512


def load_audio(path: Path, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    """Load audio as float32 mono at `target_sr`, downmixing and resampling as needed."""
    data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    mono = data.mean(axis=1)
    if sr != target_sr:
        logger.debug(f"Resampling {Path(path).name} from {sr} Hz to {target_sr} Hz")
        mono = librosa.resample(mono, orig_sr=sr, target_sr=target_sr)
    return np.ascontiguousarray(mono, dtype=np.float32)


def center_frame(start_s: float, end_s: float, hop_s: float = BASELINE_HOP_S) -> int:
    """Index of the frame at the midpoint of a span, rounding halves up."""
    return int(np.floor(((start_s + end_s) / 2.0) / hop_s + 0.5))


def window_frames(track: np.ndarray, center: int, half: int = WINDOW_HALF) -> np.ndarray:
    """
    Rows center-half .. center+half of a (T, d) track.

    Rows outside the track are zeros, so the result always has 2*half+1 rows.
    """
    track = np.asarray(track)
    if track.ndim == 1:
        track = track[:, None]
    out = np.zeros((2 * half + 1, track.shape[1]), dtype=np.float32)
    lo, hi = center - half, center + half + 1
    src_lo, src_hi = max(lo, 0), min(hi, track.shape[0])
    if src_lo < src_hi:
        out[src_lo - lo : src_hi - lo] = track[src_lo:src_hi]
    return out


def track_f0(
    audio: np.ndarray,
    sr: int = SAMPLE_RATE,
    hop_s: float = BASELINE_HOP_S,
    floor_hz: float = F0_FLOOR_HZ,
    ceiling_hz: float = F0_CEILING_HZ,
) -> np.ndarray:
    """
    Praat autocorrelation pitch track, one value per hop, 0 for unvoiced frames.

    Praat centres its analysis frames inside the signal, so each of its
    frame times is snapped to the nearest hop; frames it does not cover at
    the utterance edges stay unvoiced.
    """
    audio = np.asarray(audio, dtype=np.float64)
    hop = int(round(hop_s * sr))
    n_frames = 1 + len(audio) // hop
    out = np.zeros(n_frames, dtype=np.float32)
    if not np.any(audio):
        return out

    sound = parselmouth.Sound(audio, sampling_frequency=sr)
    try:
        pitch = sound.to_pitch_ac(time_step=hop_s, pitch_floor=floor_hz, pitch_ceiling=ceiling_hz)
    except parselmouth.PraatError as e:
        logger.debug(f"No pitch analysis for {len(audio)} samples: {e}")
        return out

    frequency = np.nan_to_num(pitch.selected_array["frequency"], nan=0.0)
    frames = np.rint(pitch.xs() / hop_s).astype(int)
    inside = (frames >= 0) & (frames < n_frames)
    out[frames[inside]] = frequency[inside]
    return out


def mfcc_frames(audio: np.ndarray, sr: int = SAMPLE_RATE, hop_s: float = BASELINE_HOP_S) -> np.ndarray:
    """40 MFCCs per 10 ms hop over 25 ms windows, as a (T, 40) array."""
    mfcc = librosa.feature.mfcc(
        y=np.asarray(audio, dtype=np.float32),
        sr=sr,
        n_mfcc=N_MFCC,
        n_mels=N_MFCC,
        n_fft=MFCC_N_FFT,
        win_length=MFCC_WIN_LENGTH,
        hop_length=int(round(hop_s * sr)),
        center=True,
    )
    return np.ascontiguousarray(mfcc.T, dtype=np.float32)
