#pragma once

// Augmentation without scaling: flip, translation with padding and random
// crops that are never resized back. Random-resized-crop and rotation exist
// only for ablations and refuse to run unless the policy enables them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "patentret/image.hpp"
#include "patentret/rng.hpp"
#include "patentret/tensor.hpp"

namespace patentret {

class AugmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AugmentPolicy {
  std::size_t crop_size = 224;
  std::size_t translate_max = 16;
  double hflip_prob = 0.5;
  std::uint8_t pad_value = kBackground;
  bool ablation_random_resized_crop = false;
  double rrc_scale_min = 0.25;  // area fraction range is [rrc_scale_min, 1]
  std::optional<double> ablation_random_rotation_deg;

  void validate() const {
    if (crop_size == 0) throw AugmentError("crop_size must be positive");
    if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw AugmentError("hflip_prob must lie in [0, 1]");
    if (!(rrc_scale_min > 0 && rrc_scale_min <= 1)) throw AugmentError("rrc_scale_min must lie in (0, 1]");
  }

  /// True when no enabled transform rescales content.
  bool scale_free() const { return !ablation_random_resized_crop; }
};

inline void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = {{"crop_size", p.crop_size},
       {"translate_max", p.translate_max},
       {"hflip_prob", p.hflip_prob},
       {"pad_value", p.pad_value},
       {"ablation_random_resized_crop", p.ablation_random_resized_crop},
       {"rrc_scale_min", p.rrc_scale_min}};
  j["ablation_random_rotation_deg"] =
      p.ablation_random_rotation_deg ? nlohmann::json(*p.ablation_random_rotation_deg) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  p.crop_size = j.value("crop_size", p.crop_size);
  p.translate_max = j.value("translate_max", p.translate_max);
  p.hflip_prob = j.value("hflip_prob", p.hflip_prob);
  p.pad_value = j.value("pad_value", p.pad_value);
  p.ablation_random_resized_crop = j.value("ablation_random_resized_crop", p.ablation_random_resized_crop);
  p.rrc_scale_min = j.value("rrc_scale_min", p.rrc_scale_min);
  if (j.contains("ablation_random_rotation_deg") && !j.at("ablation_random_rotation_deg").is_null())
    p.ablation_random_rotation_deg = j.at("ablation_random_rotation_deg").get<double>();
  else
    p.ablation_random_rotation_deg.reset();
}

namespace detail {

inline DrawingImage with_meta(DrawingImage out, const DrawingImage& src) {
  out.patent_id = src.patent_id;
  out.view_index = src.view_index;
  return out;
}

inline std::uint8_t bilinear(const DrawingImage& img, double x, double y, std::uint8_t pad) {
  const double fx = std::floor(x), fy = std::floor(y);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const double ax = x - fx, ay = y - fy;
  auto px = [&](long xx, long yy) -> double {
    if (xx < 0 || yy < 0 || xx >= static_cast<long>(img.width) || yy >= static_cast<long>(img.height)) return pad;
    return img.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy));
  };
  const double v = (1 - ax) * (1 - ay) * px(x0, y0) + ax * (1 - ay) * px(x0 + 1, y0) +
                   (1 - ax) * ay * px(x0, y0 + 1) + ax * ay * px(x0 + 1, y0 + 1);
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

/// Copies the window at (x0, y0) of size w x h; out-of-range pixels take `pad`.
inline DrawingImage crop_or_pad(const DrawingImage& img, long x0, long y0, std::size_t w, std::size_t h,
                                std::uint8_t pad = kBackground) {
  DrawingImage out(w, h, pad);
  for (std::size_t y = 0; y < h; ++y) {
    const long sy = y0 + static_cast<long>(y);
    if (sy < 0 || sy >= static_cast<long>(img.height)) continue;
    for (std::size_t x = 0; x < w; ++x) {
      const long sx = x0 + static_cast<long>(x);
      if (sx >= 0 && sx < static_cast<long>(img.width))
        out.at(x, y) = img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy));
    }
  }
  return detail::with_meta(std::move(out), img);
}

/// Uniformly placed crop_size x crop_size window; the result keeps its size.
inline DrawingImage random_crop_no_resize(const DrawingImage& img, std::size_t crop_size, Rng& rng) {
  if (crop_size == 0 || crop_size > std::min(img.width, img.height))
    throw AugmentError("crop size " + std::to_string(crop_size) + " exceeds image " +
                       std::to_string(img.width) + "x" + std::to_string(img.height));
  const long ox = rng.uniform_int(0, static_cast<long>(img.width - crop_size));
  const long oy = rng.uniform_int(0, static_cast<long>(img.height - crop_size));
  return crop_or_pad(img, ox, oy, crop_size, crop_size);
}

/// Shifts content by (dx, dy); vacated pixels take pad_value.
inline DrawingImage translate(const DrawingImage& img, long dx, long dy, std::uint8_t pad_value) {
  return crop_or_pad(img, -dx, -dy, img.width, img.height, pad_value);
}

inline DrawingImage random_translate_pad(const DrawingImage& img, std::size_t translate_max, std::uint8_t pad_value,
                                         Rng& rng) {
  if (translate_max >= std::min(img.width, img.height))
    throw AugmentError("translate_max must be smaller than the image side");
  const long t = static_cast<long>(translate_max);
  const long dx = rng.uniform_int(-t, t);
  const long dy = rng.uniform_int(-t, t);
  return translate(img, dx, dy, pad_value);
}

/// Column mirror: (x, y) -> (width - 1 - x, y).
inline DrawingImage flip_horizontal(const DrawingImage& img) {
  DrawingImage out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    std::reverse(out.pixels.begin() + static_cast<long>(y * img.width),
                 out.pixels.begin() + static_cast<long>((y + 1) * img.width));
  return out;
}

inline DrawingImage horizontal_flip(const DrawingImage& img, double prob, Rng& rng) {
  if (!(prob >= 0 && prob <= 1)) throw AugmentError("flip probability must lie in [0, 1]");
  // Always draw so the stream position does not depend on prob.
  const bool flip = rng.uniform() < prob;
  return flip ? flip_horizontal(img) : img;
}

/// Bilinear resample of the whole image to out_w x out_h.
inline DrawingImage resize(const DrawingImage& img, std::size_t out_w, std::size_t out_h) {
  DrawingImage out(out_w, out_h);
  const double sx = static_cast<double>(img.width) / out_w, sy = static_cast<double>(img.height) / out_h;
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5, src_y = (y + 0.5) * sy - 0.5;
      const double cx = std::clamp(src_x, 0.0, static_cast<double>(img.width - 1));
      const double cy = std::clamp(src_y, 0.0, static_cast<double>(img.height - 1));
      out.at(x, y) = detail::bilinear(img, cx, cy, kBackground);
    }
  return detail::with_meta(std::move(out), img);
}

/// Ablation only: crop a window covering a uniform area fraction in
/// [scale_min, scale_max] with aspect ratio in [3/4, 4/3], then resample to
/// out_size. Falls back to the full image after 10 rejected draws.
inline DrawingImage ablation_random_resized_crop(const DrawingImage& img, std::size_t out_size, double scale_min,
                                                 double scale_max, Rng& rng, const AugmentPolicy& policy) {
  if (!policy.ablation_random_resized_crop)
    throw AugmentError("random resized crop requested but not enabled in the augmentation policy");
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 1))
    throw AugmentError("random resized crop scale range must satisfy 0 < min <= max <= 1");
  if (scale_min >= 1.0) return resize(img, out_size, out_size);
  const double area = static_cast<double>(img.width * img.height);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_min, scale_max);
    const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w == 0 || h == 0 || w > img.width || h > img.height) continue;
    const long ox = rng.uniform_int(0, static_cast<long>(img.width - w));
    const long oy = rng.uniform_int(0, static_cast<long>(img.height - h));
    return resize(crop_or_pad(img, ox, oy, w, h), out_size, out_size);
  }
  return resize(img, out_size, out_size);
}

/// Rotation by `degrees` about the image center, sampled bilinearly with pad
/// fill. In pixel coordinates (y down), 90 degrees maps (x, y) to
/// (width - 1 - y, x) on a square image.
inline DrawingImage rotate(const DrawingImage& img, double degrees, std::uint8_t pad_value) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  DrawingImage out(img.width, img.height, pad_value);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      // Inverse rotation gives the source position.
      const double sx = c * dx + s * dy + cx, sy = -s * dx + c * dy + cy;
      out.at(x, y) = detail::bilinear(img, sx, sy, pad_value);
    }
  return detail::with_meta(std::move(out), img);
}

inline DrawingImage ablation_random_rotation(const DrawingImage& img, double max_deg, Rng& rng,
                                             const AugmentPolicy& policy) {
  if (!policy.ablation_random_rotation_deg)
    throw AugmentError("random rotation requested but not enabled in the augmentation policy");
  return rotate(img, rng.uniform(-max_deg, max_deg), policy.pad_value);
}

/// Center crop when larger, symmetric background pad when smaller. Never
/// resamples.
inline DrawingImage center_crop_or_pad(const DrawingImage& img, std::size_t size, std::uint8_t pad = kBackground) {
  const long ox = (static_cast<long>(img.width) - static_cast<long>(size)) / 2;
  const long oy = (static_cast<long>(img.height) - static_cast<long>(size)) / 2;
  return crop_or_pad(img, ox, oy, size, size, pad);
}

/// Maps bytes to floats as (255 - x) / 255: ink -> 1, background -> 0.
template <class T = float>
Tensor<T> to_tensor(const DrawingImage& img) {
  Tensor<T> t(Shape{1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    t[i] = static_cast<T>(255 - img.pixels[i]) / T{255};
  return t;
}

enum class AugmentMode { train, eval };

/// Training: flip -> translate -> [rotation] -> crop (or resized crop). Eval:
/// center crop/pad to eval_size. Returns a [1, S, S] tensor.
template <class T = float>
Tensor<T> apply_policy(const DrawingImage& img, const AugmentPolicy& policy, Rng& rng, AugmentMode mode,
                       std::size_t eval_size) {
  if (mode == AugmentMode::eval) return to_tensor<T>(center_crop_or_pad(img, eval_size));
  policy.validate();
  DrawingImage x = horizontal_flip(img, policy.hflip_prob, rng);
  if (policy.translate_max > 0) x = random_translate_pad(x, policy.translate_max, policy.pad_value, rng);
  if (policy.ablation_random_rotation_deg)
    x = ablation_random_rotation(x, *policy.ablation_random_rotation_deg, rng, policy);
  if (std::min(x.width, x.height) < policy.crop_size) x = center_crop_or_pad(x, policy.crop_size, policy.pad_value);
  if (policy.ablation_random_resized_crop)
    x = ablation_random_resized_crop(x, policy.crop_size, policy.rrc_scale_min, 1.0, rng, policy);
  else
    x = random_crop_no_resize(x, policy.crop_size, rng);
  return to_tensor<T>(x);
}

}  // namespace patentret
