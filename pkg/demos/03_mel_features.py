"""Log-mel features for a synthetic clip.

Three seconds at 22050 Hz with hop 512 is 130 frames, the chunk the audio
encoder consumes. A pure tone lands in the mel band whose centre is closest.
"""

import numpy as np

from zsltag.features import chunk_track, extract_mel, fit_standardizer, mel_band_edges

sr = 22050
t = np.arange(3 * sr) / sr
clip = 0.5 * np.sin(2 * np.pi * 440 * t) + 0.2 * np.sin(2 * np.pi * 2000 * t)
mel = extract_mel(clip, sr)
print("frames x bands:", mel.frames.shape)

centres = mel_band_edges()[1:-1]
profile = mel.frames.mean(axis=0)
for f0 in (440, 2000):
    k = int(np.argmin(np.abs(centres - f0)))
    print(f"{f0:5d} Hz -> band {k} (centre {centres[k]:.0f} Hz), energy {profile[k]:.2f}")
top = np.argsort(profile)[::-1][:4]
print("strongest bands:", top, "centres", np.round(centres[top]))

# longer tracks are cut into full chunks, the tail tiled to length
long = extract_mel(np.tile(clip, 3)[: int(7.5 * sr)], sr)
chunks = chunk_track(long)
print(f"{long.n_frames} frames -> {len(chunks)} chunks of {chunks[0].shape}")

# standardizer statistics are pooled over every frame of the training tracks
st = fit_standardizer([mel, long])
z = st.apply(mel.frames)
print("standardized mean/std of the busiest band:", z[:, top[0]].mean().round(3), z[:, top[0]].std().round(3))
