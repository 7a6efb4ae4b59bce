"""
From a waveform to a three-channel feature image
=================================================

A spectrogram, its first difference over time and its second difference
become the three color channels of one square image.
"""

import numpy as np

from multifuse.audio import AudioSignal, MelConfig, build_feature_image, log_mel_spectrogram, mfcc

sr = 22050
t = np.arange(5 * sr) / sr

# a rising chirp with a little noise stands in for five seconds of speech
x = 0.3 * np.sin(2 * np.pi * (200 + 150 * t) * t) + 0.01 * np.random.default_rng(0).standard_normal(t.size)
signal = AudioSignal(x, sr)

spec = log_mel_spectrogram(signal, MelConfig())
print("log-mel bands x frames:", spec.values.shape)

image = build_feature_image(spec, side=224)
print("image:", image.channels.shape, image.channels.dtype)
for name, ch in zip(("static", "delta", "delta-delta"), image.channels):
    print(f"  {name:12s} min {ch.min():+.3f} max {ch.max():+.3f} mean {ch.mean():+.3f}")

# the MFCC variant keeps 40 cepstral coefficients over a finer hop
cep = mfcc(signal)
print("mfcc coefficients x frames:", cep.values.shape)
print("mfcc image side:", build_feature_image(cep, side=64).side)
