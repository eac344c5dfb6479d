// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "vptta/tensor.hpp"

namespace vptta {

/// Complex 2-D spectrum of an (H, W, C) plane stack, stored as a tensor of
/// shape (H, W, C, 2) holding (real, imag) pairs.
///
/// When `centered` is set the zero-frequency bin sits at (H/2, W/2)
/// (integer division); otherwise it sits at (0, 0).
struct Spectrum {
  Tensor values;
  bool centered = false;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }

  double re(std::size_t y, std::size_t x, std::size_t c) const { return values[index(y, x, c)]; }
  double im(std::size_t y, std::size_t x, std::size_t c) const { return values[index(y, x, c) + 1]; }

  std::size_t index(std::size_t y, std::size_t x, std::size_t c) const {
    return ((y * width() + x) * channels() + c) * 2;
  }
};

/// Forward DFT of every channel. Rejects non-finite input.
Spectrum fft2(const Tensor& plane, bool center_dc = false);

/// Inverse DFT (normalized by 1/(H*W)) keeping the full complex result,
/// returned as an uncentered spectrum-shaped tensor (H, W, C, 2).
Tensor ifft2_complex(const Spectrum& spectrum);

/// Inverse DFT; returns the real part. If `imag_residue` is given it
/// receives the largest absolute imaginary component that was dropped.
Tensor ifft2_real(const Spectrum& spectrum, double* imag_residue = nullptr);

// Raw transforms on (H, W, C, 2) tensors, uncentered. `inverse` applies
// the 1/(H*W) normalization.
Tensor dft2_complex(const Tensor& complex_hwc2, bool inverse);
Tensor real_to_complex(const Tensor& plane);
Tensor complex_real_part(const Tensor& complex_hwc2);

/// Circular shift moving bin (0,0) to (H/2, W/2). `inverse` undoes it.
/// Works for any tensor whose first two dims are (H, W).
Tensor fftshift(const Tensor& t, bool inverse = false);
Spectrum centered(const Spectrum& s);
Spectrum uncentered(const Spectrum& s);

struct AmplitudePhase {
  Tensor amplitude;  // (H, W, C)
  Tensor phase;      // (H, W, C), 0 where amplitude is 0
};

AmplitudePhase amplitude_phase(const Spectrum& s);

/// First row (or column) of a window of `window` bins centered on the DC
/// bin `extent / 2`; even windows put the extra bin before the center.
constexpr std::size_t centered_window_start(std::size_t extent, std::size_t window) {
  return extent / 2 - window / 2;
}

Spectrum recompose(const Tensor& amplitude, const Tensor& phase, bool centered);

}  // namespace vptta
