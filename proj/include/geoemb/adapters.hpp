#pragma once

// First-layer channel expansion for pretrained encoders, and the caption
// strings paired with each sample for text-supervised training.

#include <charconv>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geoemb/embedding_store.hpp"
#include "geoemb/error.hpp"

namespace geoemb {

// ---------------------------------------------------------------------------
// Conv weights

/// (out, in, kh, kw) f32 tensor, row-major in that order.
class ConvWeight {
 public:
  ConvWeight() = default;
  ConvWeight(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, std::vector<float> data)
      : out_(out), in_(in), kh_(kh), kw_(kw), data_(std::move(data)) {
    if (data_.size() != out * in * kh * kw)
      detail::fail("size_mismatch", "conv weight payload has " + std::to_string(data_.size()) + " values, dims need " +
                                        std::to_string(out * in * kh * kw));
    for (float v : data_)
      if (!std::isfinite(v)) detail::fail("non_finite", "conv weight contains NaN or Inf");
  }

  [[nodiscard]] std::size_t out_channels() const { return out_; }
  [[nodiscard]] std::size_t in_channels() const { return in_; }
  [[nodiscard]] std::size_t kernel_h() const { return kh_; }
  [[nodiscard]] std::size_t kernel_w() const { return kw_; }
  [[nodiscard]] std::span<const float> data() const { return data_; }

  [[nodiscard]] std::size_t index(std::size_t o, std::size_t c, std::size_t i, std::size_t j) const {
    return ((o * in_ + c) * kh_ + i) * kw_ + j;
  }
  [[nodiscard]] float at(std::size_t o, std::size_t c, std::size_t i, std::size_t j) const {
    return data_[index(o, c, i, j)];
  }

  bool operator==(const ConvWeight&) const = default;

 private:
  std::size_t out_ = 0, in_ = 0, kh_ = 0, kw_ = 0;
  std::vector<float> data_;
};

enum class ScalePolicy { none, preserve_sum };

inline ScalePolicy parse_scale_policy(std::string_view s) {
  if (s == "none") return ScalePolicy::none;
  if (s == "preserve_sum") return ScalePolicy::preserve_sum;
  detail::fail("invalid_argument", "unknown scale policy '" + std::string(s) + "'");
}

inline std::string_view to_string(ScalePolicy p) { return p == ScalePolicy::none ? "none" : "preserve_sum"; }

struct ChannelExpansion {
  ConvWeight weight;
  double scale = 1.0;
  std::vector<std::size_t> replication;  // copies of each source channel
  // max over source channels of |1 - scale * copies|: how far a
  // channel-constant input's pre-activation drifts from the original
  double mismatch_bound = 0.0;
};

/// Output channel c copies source channel c mod in_channels (cyclic tiling,
/// so 3 -> 128 ends with a partial repeat on channels 0 and 1), times scale:
/// 1 under `none`, in/target under `preserve_sum`.
inline ChannelExpansion expand_channels_with_report(const ConvWeight& w, std::size_t target_in, ScalePolicy policy) {
  const std::size_t in = w.in_channels();
  if (in == 0) detail::fail("invalid_argument", "source weight has no input channels");
  if (target_in < in)
    detail::fail("target_out_of_range", "target_in " + std::to_string(target_in) + " is below the source's " +
                                            std::to_string(in) + " channels");
  ChannelExpansion r;
  r.scale = policy == ScalePolicy::preserve_sum ? static_cast<double>(in) / static_cast<double>(target_in) : 1.0;
  const float s = static_cast<float>(r.scale);
  const std::size_t plane = w.kernel_h() * w.kernel_w();
  std::vector<float> out(w.out_channels() * target_in * plane);
  for (std::size_t o = 0; o < w.out_channels(); ++o)
    for (std::size_t c = 0; c < target_in; ++c) {
      const float* src = w.data().data() + w.index(o, c % in, 0, 0);
      float* dst = out.data() + (o * target_in + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) dst[k] = policy == ScalePolicy::none ? src[k] : s * src[k];
    }
  r.weight = ConvWeight(w.out_channels(), target_in, w.kernel_h(), w.kernel_w(), std::move(out));
  r.replication.assign(in, target_in / in);
  for (std::size_t c = 0; c < target_in % in; ++c) ++r.replication[c];
  for (std::size_t copies : r.replication)
    r.mismatch_bound = std::max(r.mismatch_bound, std::abs(1.0 - r.scale * static_cast<double>(copies)));
  return r;
}

inline ConvWeight expand_first_layer_channels(const ConvWeight& w, std::size_t target_in,
                                              ScalePolicy policy = ScalePolicy::none) {
  return expand_channels_with_report(w, target_in, policy).weight;
}

inline void save_conv_weight(const ConvWeight& w, const fs::path& path) {
  Json h = {{"kind", "cw4d"},
            {"dims", {w.out_channels(), w.in_channels(), w.kernel_h(), w.kernel_w()}},
            {"dtype", "f32"},
            {"order", "out_in_kh_kw"}};
  write_container(path, h, w.data());
}

inline ConvWeight load_conv_weight(const fs::path& path) {
  Container c = read_container(path);
  std::vector<std::size_t> dims;
  try {
    dims = c.header.at("dims").get<std::vector<std::size_t>>();
  } catch (const Json::exception&) {
    detail::fail("bad_header", "cw4d header needs a 4-element dims array");
  }
  if (dims.size() != 4) detail::fail("bad_header", "cw4d header needs a 4-element dims array");
  expect_payload(c, "cw4d", dims[0] * dims[1] * dims[2] * dims[3]);
  return {dims[0], dims[1], dims[2], dims[3], std::move(c.payload)};
}

// ---------------------------------------------------------------------------
// Captions

struct CaptionConfig {
  bool verbatim_spelling = true;  // "Latitute"/"Longtitute" as in the released captions
  int decimal_places = 4;
};

/// Fixed-point text with `places` decimals, rounding half away from zero on
/// the shortest decimal representation of v. That is what a reader expects
/// from the printed value: 1.005 -> "1.01", even though the nearest double is
/// slightly below 1.005. Negative results that round to zero print as "0".
inline std::string format_fixed(double v, int places) {
  if (places < 0 || places > 12) detail::fail("invalid_config", "decimal_places must be in [0, 12]");
  if (!std::isfinite(v)) detail::fail("out_of_range", "cannot format a non-finite value");
  char buf[512];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, std::abs(v), std::chars_format::fixed);
  if (ec != std::errc{}) detail::fail("out_of_range", "value too large to format");
  std::string s(buf, end);
  std::size_t dot = s.find('.');
  if (dot == std::string::npos) {
    dot = s.size();
    s += '.';
  }
  s.append(static_cast<std::size_t>(places) + 1, '0');  // room for the rounding digit
  std::string digits = s.substr(0, dot) + s.substr(dot + 1, static_cast<std::size_t>(places));
  const bool round_up = s[dot + 1 + static_cast<std::size_t>(places)] >= '5';
  if (round_up) {
    std::size_t i = digits.size();
    while (i > 0 && digits[i - 1] == '9') digits[--i] = '0';
    if (i == 0)
      digits.insert(digits.begin(), '1');
    else
      ++digits[i - 1];
  }
  const std::size_t int_len = digits.size() - static_cast<std::size_t>(places);
  std::string out = digits.substr(0, int_len);
  if (places > 0) out += "." + digits.substr(int_len);
  const bool zero = digits.find_first_not_of('0') == std::string::npos;
  return (v < 0 && !zero) ? "-" + out : out;
}

inline std::string format_latlon_caption(double lat, double lon, const CaptionConfig& cfg = {}) {
  if (!(lat >= -90.0 && lat <= 90.0)) detail::fail("out_of_range", "latitude must be in [-90, 90]");
  if (!(lon >= -180.0 && lon <= 180.0)) detail::fail("out_of_range", "longitude must be in [-180, 180]");
  const char* lat_label = cfg.verbatim_spelling ? "Latitute: " : "Latitude: ";
  const char* lon_label = cfg.verbatim_spelling ? ", Longtitute: " : ", Longitude: ";
  return lat_label + format_fixed(lat, cfg.decimal_places) + lon_label + format_fixed(lon, cfg.decimal_places);
}

inline std::string format_regression_caption(std::optional<double> forest_cover, std::optional<double> elevation,
                                             std::optional<double> nightlights, std::optional<double> population,
                                             const CaptionConfig& cfg = {}) {
  const std::pair<const char*, std::optional<double>> fields[] = {
      {"Forest Cover", forest_cover}, {"Elevation", elevation}, {"Nightlights", nightlights}, {"Population", population}};
  std::string out;
  for (const auto& [label, value] : fields) {
    if (!value) detail::fail("missing_attribute", std::string(label) + " is missing");
    if (!out.empty()) out += ", ";
    out += label;
    out += ": ";
    out += format_fixed(*value, cfg.decimal_places);
  }
  return out;
}

enum class CaptionKind { latlon, regression };

inline CaptionKind parse_caption_kind(std::string_view s) {
  if (s == "latlon") return CaptionKind::latlon;
  if (s == "regression") return CaptionKind::regression;
  detail::fail("invalid_argument", "unknown caption kind '" + std::string(s) + "'");
}

/// One caption per metadata row, same order.
inline std::vector<std::string> captions_for(std::span<const SampleMetadata> rows, CaptionKind kind,
                                             const CaptionConfig& cfg = {}) {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    try {
      if (kind == CaptionKind::latlon) {
        if (!r.lat || !r.lon) detail::fail("missing_attribute", "lat/lon missing");
        out.push_back(format_latlon_caption(*r.lat, *r.lon, cfg));
      } else {
        out.push_back(format_regression_caption(r.forest_cover, r.elevation, r.nightlights, r.population, cfg));
      }
    } catch (const Error& e) {
      detail::fail(e.code(), "sample '" + r.sample_id + "': " + e.what());
    }
  }
  return out;
}

}  // namespace geoemb
