"""
Log Mel features from a WAV file
================================

Writes a one-second 1 kHz tone, reads it back, and extracts 40 log Mel
bands with 25 ms frames every 10 ms.
"""

import tempfile
from pathlib import Path

import numpy as np

from niesr.data import logmel_extract, mel_filterbank, read_wav, write_wav

rate = 16000
t = np.arange(rate) / rate
tone = (8000 * np.sin(2 * np.pi * 1000 * t)).astype(np.int16)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tone.wav"
    write_wav(path, tone, rate)
    pcm, sr = read_wav(path)

feats = logmel_extract(pcm, sr, n_mels=40)
print("feature matrix:", feats.shape)  # 98 frames of 40 bands

_, centres = mel_filterbank(40, 512, sr)
band = np.bincount(feats.argmax(axis=1)).argmax()
print(f"loudest band centre: {centres[band]:.0f} Hz")
