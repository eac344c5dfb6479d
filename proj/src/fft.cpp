// SPDX-License-Identifier: Apache-2.0
#include "vptta/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace vptta {
namespace {

// FFTW planning is not thread-safe; execution of an existing plan on new
// arrays is. Plans are cached per (H, W, C, direction) for the process.
class PlanCache {
 public:
  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan get(int h, int w, int c, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(h, w, c, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    const std::size_t n = static_cast<std::size_t>(h) * w * c;
    auto* in = fftw_alloc_complex(n);
    auto* out = fftw_alloc_complex(n);
    int dims[2] = {h, w};
    fftw_plan plan = fftw_plan_many_dft(2, dims, c, in, nullptr, c, 1, out, nullptr, c, 1, sign,
                                        FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(key, plan);
    return plan;
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int, int>, fftw_plan> plans_;
};

PlanCache& plan_cache() {
  static PlanCache cache;
  return cache;
}

void require_complex_layout(const Tensor& t, const char* what) {
  if (t.rank() != 4 || t.dim(3) != 2) {
    throw ConfigError(std::string(what) + ": expected (H, W, C, 2) complex tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor real_to_complex(const Tensor& plane) {
  if (plane.rank() != 3) throw ConfigError("expected an (H, W, C) plane, got " + shape_str(plane.shape()));
  Tensor out({plane.dim(0), plane.dim(1), plane.dim(2), 2});
  for (std::size_t i = 0; i < plane.size(); ++i) out[2 * i] = plane[i];
  return out;
}

Tensor complex_real_part(const Tensor& z) {
  require_complex_layout(z, "complex_real_part");
  Tensor out({z.dim(0), z.dim(1), z.dim(2)});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z[2 * i];
  return out;
}

Tensor dft2_complex(const Tensor& z, bool inverse) {
  require_complex_layout(z, "dft2_complex");
  const int h = static_cast<int>(z.dim(0));
  const int w = static_cast<int>(z.dim(1));
  const int c = static_cast<int>(z.dim(2));
  if (h < 1 || w < 1 || c < 1) throw ConfigError("dft2 requires H, W, C >= 1");
  Tensor out(z.shape());
  auto plan = plan_cache().get(h, w, c, inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  // FFTW never writes to the input of an out-of-place complex transform.
  auto* in = reinterpret_cast<fftw_complex*>(const_cast<double*>(z.data().data()));
  fftw_execute_dft(plan, in, reinterpret_cast<fftw_complex*>(out.data().data()));
  if (inverse) {
    const double scale = 1.0 / (static_cast<double>(h) * w);
    for (auto& v : out.data()) v *= scale;
  }
  return out;
}

Tensor fftshift(const Tensor& t, bool inverse) {
  if (t.rank() < 2) throw ConfigError("fftshift needs at least two dims");
  const std::size_t h = t.dim(0), w = t.dim(1);
  const std::size_t inner = t.size() / (h * w);
  // Forward moves bin 0 to h/2; inverse moves h/2 back to 0.
  const std::size_t sy = inverse ? h - h / 2 : h / 2;
  const std::size_t sx = inverse ? w - w / 2 : w / 2;
  Tensor out(t.shape());
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t ty = (y + sy) % h;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t tx = (x + sx) % w;
      const double* src = t.data().data() + (y * w + x) * inner;
      double* dst = out.data().data() + (ty * w + tx) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  return out;
}

Spectrum fft2(const Tensor& plane, bool center_dc) {
  if (!plane.all_finite()) throw ConfigError("fft2: non-finite input");
  Spectrum s{dft2_complex(real_to_complex(plane), false), false};
  return center_dc ? centered(s) : s;
}

Spectrum centered(const Spectrum& s) { return s.centered ? s : Spectrum{fftshift(s.values, false), true}; }

Spectrum uncentered(const Spectrum& s) { return s.centered ? Spectrum{fftshift(s.values, true), false} : s; }

Tensor ifft2_complex(const Spectrum& spectrum) { return dft2_complex(uncentered(spectrum).values, true); }

Tensor ifft2_real(const Spectrum& spectrum, double* imag_residue) {
  const Tensor z = ifft2_complex(spectrum);
  if (imag_residue) {
    double m = 0.0;
    for (std::size_t i = 1; i < z.size(); i += 2) m = std::max(m, std::abs(z[i]));
    *imag_residue = m;
  }
  return complex_real_part(z);
}

AmplitudePhase amplitude_phase(const Spectrum& s) {
  const auto& v = s.values;
  Tensor amp({s.height(), s.width(), s.channels()});
  Tensor phase(amp.shape());
  for (std::size_t i = 0; i < amp.size(); ++i) {
    const double re = v[2 * i], im = v[2 * i + 1];
    amp[i] = std::hypot(re, im);
    phase[i] = amp[i] > 0.0 ? std::atan2(im, re) : 0.0;
  }
  return {std::move(amp), std::move(phase)};
}

Spectrum recompose(const Tensor& amplitude, const Tensor& phase, bool centered_layout) {
  require_same_shape(amplitude, phase, "recompose");
  if (amplitude.rank() != 3) throw ConfigError("recompose expects (H, W, C) planes");
  Tensor z({amplitude.dim(0), amplitude.dim(1), amplitude.dim(2), 2});
  for (std::size_t i = 0; i < amplitude.size(); ++i) {
    z[2 * i] = amplitude[i] * std::cos(phase[i]);
    z[2 * i + 1] = amplitude[i] * std::sin(phase[i]);
  }
  return {std::move(z), centered_layout};
}

}  // namespace vptta
