"""Smoke test for the defsr extension module. Run after `maturin develop`."""
import math
import os
import tempfile

import defsr


def ramp(h, w, c, phase=0.0):
    data = [
        0.5 + 0.4 * math.sin(0.3 * r + 0.2 * col + phase + ch)
        for r in range(h)
        for col in range(w)
        for ch in range(c)
    ]
    return defsr.Image(h, w, c, data)


hr = ramp(64, 64, 3)
assert hr.shape == (64, 64, 3)

op = defsr.LinearOperator("bicubic-down", 4, (64, 64))
assert op.out_shape == (16, 16)
y = op.apply(hr)
x = op.rectify(defsr.Image.filled(64, 64, 3, 0.5), y)
assert op.apply(x).max_abs_diff(y) < 1e-9, "rectified image must reproduce the observation"

lr = hr.resize(16, 16)
a = defsr.enhance(lr, steps=10, seed=3)
b = defsr.enhance(lr, steps=10, seed=3)
assert a.shape == (64, 64, 3) and a.max_abs_diff(b) == 0.0

oracle = defsr.enhance(y, denoiser="oracle", steps=10, hr=hr)
assert defsr.psnr(oracle, hr) > 60.0

model = defsr.Model()
i_de, sr = defsr.super_resolve(lr, ramp(64, 64, 3, phase=1.0), model, steps=5)
assert sr.shape == i_de.shape == (64, 64, 3)
assert abs(defsr.ssim(hr, hr) - 1.0) < 1e-12

matches = defsr.correspondences(hr, hr)
assert all(0.0 <= c <= 1.0 + 1e-9 for _, _, c in matches)

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "sr.png")
    sr.save(path)
    assert defsr.Image.load(path).shape == (64, 64, 3)

try:
    defsr.Image.load("/nonexistent.png")
except OSError:
    pass
else:
    raise AssertionError("missing file must raise")

print("smoke test passed:", repr(sr), "psnr(oracle) = %.2f dB" % defsr.psnr(oracle, hr))
