#ifndef CMAMBA_CODER_HPP
#define CMAMBA_CODER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmamba/errors.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

inline constexpr int kCdfPrecision = 16;
inline constexpr uint32_t kCdfTotal = 1u << kCdfPrecision;
inline constexpr int kSymbolMin = -128;  // global symbol window
inline constexpr int kSymbolMax = 127;
inline constexpr uint16_t kFormatVersion = 1;
inline constexpr uint16_t kCustomLambda = 0xFFFF;  // lambda-index sentinel

// Snap distribution parameters to a fixed grid before table construction so
// encoder and decoder agree bit-exactly even if their forward passes differ in
// the last float digits.
inline double snap4(double x) {
  if (!std::isfinite(x)) throw NumericError("snap4: non-finite value");
  return static_cast<double>(iround_away(std::clamp(x, -1e12, 1e12) * 1e4)) / 1e4;
}

// ---------------------------------------------------------------------------
// Quantized CDF tables
// ---------------------------------------------------------------------------

struct CdfTable {
  int s_lo = 0;
  int s_hi = -1;               // inclusive support
  std::vector<uint32_t> cum;   // bins()+1 entries; cum[0]=0, cum.back()=total

  int bins() const { return s_hi - s_lo + 1; }
  bool contains(int s) const { return s >= s_lo && s <= s_hi; }
  int clamp_symbol(int s) const { return std::clamp(s, s_lo, s_hi); }
  uint32_t count(int s) const {
    const size_t j = static_cast<size_t>(s - s_lo);
    return cum[j + 1] - cum[j];
  }
};

namespace detail {

// Turn real-valued bin masses into integer counts summing exactly to `total`,
// every bin >= 1.  Rounding residue lands on the distribution's center bin
// (which keeps zero-mean tables symmetric); any remainder spills onto the
// largest bins.
inline CdfTable quantize_masses(int s_lo, const std::vector<double>& mass, uint32_t total,
                                int center) {
  const int n = static_cast<int>(mass.size());
  if (n < 1) throw std::invalid_argument("build_cdf: empty support");
  if (static_cast<uint32_t>(n) >= total) throw std::invalid_argument("build_cdf: support exceeds precision budget");
  std::vector<int64_t> counts(static_cast<size_t>(n));
  int64_t sum = 0;
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(mass[static_cast<size_t>(i)])) throw NumericError("build_cdf: non-finite mass");
    counts[static_cast<size_t>(i)] = std::max<int64_t>(1, iround_away(mass[static_cast<size_t>(i)] * total));
    sum += counts[static_cast<size_t>(i)];
  }
  int64_t delta = static_cast<int64_t>(total) - sum;
  const size_t c = static_cast<size_t>(std::clamp(center, 0, n - 1));
  if (delta > 0) {
    counts[c] += delta;
    delta = 0;
  } else if (delta < 0) {
    const int64_t take = std::min(-delta, counts[c] - 1);
    counts[c] -= take;
    delta += take;
  }
  while (delta != 0) {
    int j = 0;
    for (int i = 1; i < n; ++i)
      if (counts[static_cast<size_t>(i)] > counts[static_cast<size_t>(j)]) j = i;
    const int64_t take = std::min(-delta, counts[static_cast<size_t>(j)] - 1);
    if (take <= 0) throw NumericError("build_cdf: cannot normalize counts");
    counts[static_cast<size_t>(j)] -= take;
    delta += take;
  }
  CdfTable t;
  t.s_lo = s_lo;
  t.s_hi = s_lo + n - 1;
  t.cum.resize(static_cast<size_t>(n) + 1, 0);
  for (int i = 0; i < n; ++i)
    t.cum[static_cast<size_t>(i) + 1] = t.cum[static_cast<size_t>(i)] +
                                        static_cast<uint32_t>(counts[static_cast<size_t>(i)]);
  return t;
}

// Integer-bin table over [lo, hi] from a CDF; end bins absorb the tails.
template <typename Cdf>
inline CdfTable table_from_cdf(int lo, int hi, Cdf&& cdf, double center, uint32_t total) {
  std::vector<double> mass(static_cast<size_t>(hi - lo + 1));
  for (int s = lo; s <= hi; ++s) {
    const double a = (s == lo) ? 0.0 : cdf(s - 0.5);
    const double b = (s == hi) ? 1.0 : cdf(s + 0.5);
    mass[static_cast<size_t>(s - lo)] = b - a;
  }
  return quantize_masses(lo, mass, total, static_cast<int>(iround_away(center)) - lo);
}

inline uint32_t check_precision(int precision) {
  if (precision < 2 || precision > 24) throw std::invalid_argument("build_cdf: precision out of range");
  return 1u << precision;
}

}  // namespace detail

// Discretized Gaussian over the integer grid, support mu +- max(12 sigma, 2)
// clipped to the global window.
inline CdfTable build_cdf(double mu, double sigma, int precision = kCdfPrecision) {
  const uint32_t total = detail::check_precision(precision);
  const double mu_q = std::clamp(snap4(mu), static_cast<double>(kSymbolMin), static_cast<double>(kSymbolMax));
  const double sg = std::max(snap4(sigma), 1e-3);  // matches the entropy model's sigma floor
  const double r = std::max(12.0 * sg, 2.0);
  const int lo = std::max(kSymbolMin, static_cast<int>(std::floor(mu_q - r)));
  const int hi = std::min(kSymbolMax, static_cast<int>(std::ceil(mu_q + r)));
  const double inv = 1.0 / (sg * std::sqrt(2.0));
  return detail::table_from_cdf(
      lo, hi, [&](double x) { return 0.5 * std::erfc(-(x - mu_q) * inv); }, mu_q, total);
}

// Logistic table for the hyper-latent prior (heavier tails, wider floor).
inline CdfTable build_cdf_logistic(double loc, double scale, int precision = kCdfPrecision) {
  const uint32_t total = detail::check_precision(precision);
  const double loc_q = std::clamp(snap4(loc), static_cast<double>(kSymbolMin), static_cast<double>(kSymbolMax));
  const double sc = std::max(snap4(scale), 1e-4);
  const double r = std::max(16.0 * sc, 8.0);
  const int lo = std::max(kSymbolMin, static_cast<int>(std::floor(loc_q - r)));
  const int hi = std::min(kSymbolMax, static_cast<int>(std::ceil(loc_q + r)));
  return detail::table_from_cdf(
      lo, hi, [&](double x) { return 1.0 / (1.0 + std::exp(-(x - loc_q) / sc)); }, loc_q, total);
}

// ---------------------------------------------------------------------------
// Range coder (carry-counting byte-wise renormalization)
// ---------------------------------------------------------------------------

class RangeEncoder {
 public:
  void encode(const CdfTable& t, int symbol) {
    if (!t.contains(symbol))
      throw std::invalid_argument("range_encode: symbol outside table support");
    const size_t j = static_cast<size_t>(symbol - t.s_lo);
    const uint32_t total = t.cum.back();
    const uint32_t r = range_ / total;
    low_ += static_cast<uint64_t>(r) * t.cum[j];
    range_ = r * (t.cum[j + 1] - t.cum[j]);
    while (range_ < kTop) {
      shift_low();
      range_ <<= 8;
    }
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  static constexpr uint32_t kTop = 1u << 24;

  void shift_low() {
    if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const uint8_t carry = static_cast<uint8_t>(low_ >> 32);
      out_.push_back(static_cast<uint8_t>(cache_ + carry));
      while (pending_ > 0) {
        out_.push_back(static_cast<uint8_t>(0xFF + carry));
        --pending_;
      }
      cache_ = static_cast<uint8_t>(low_ >> 24);
    } else {
      ++pending_;
    }
    low_ = (low_ << 8) & 0xFFFFFFFFull;
  }

  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  int64_t pending_ = 0;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
    next_byte();  // encoder's cache seed, always zero
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }

  int decode(const CdfTable& t) {
    const uint32_t total = t.cum.back();
    const uint32_t r = range_ / total;
    const uint32_t f = std::min<uint32_t>(code_ / r, total - 1);
    const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), f);
    const size_t j = static_cast<size_t>(it - t.cum.begin()) - 1;
    code_ -= r * t.cum[j];
    range_ = r * (t.cum[j + 1] - t.cum[j]);
    while (range_ < kTop) {
      code_ = (code_ << 8) | next_byte();
      range_ <<= 8;
    }
    return t.s_lo + static_cast<int>(j);
  }

 private:
  static constexpr uint32_t kTop = 1u << 24;

  uint8_t next_byte() {
    if (pos_ >= size_)
      throw FormatError(FormatError::Kind::kTruncated, "range payload truncated");
    return data_[pos_++];
  }

  const uint8_t* data_;
  size_t size_, pos_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

inline std::vector<uint8_t> range_encode(const std::vector<int>& symbols,
                                         const std::vector<CdfTable>& tables) {
  if (tables.empty() || (tables.size() != 1 && tables.size() != symbols.size()))
    throw std::invalid_argument("range_encode: need one table or one per symbol");
  RangeEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i)
    enc.encode(tables[tables.size() == 1 ? 0 : i], symbols[i]);
  return enc.finish();
}

inline std::vector<int> range_decode(const std::vector<uint8_t>& bytes, size_t count,
                                     const std::vector<CdfTable>& tables) {
  if (tables.empty() || (tables.size() != 1 && tables.size() != count))
    throw std::invalid_argument("range_decode: need one table or one per symbol");
  RangeDecoder dec(bytes.data(), bytes.size());
  std::vector<int> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = dec.decode(tables[tables.size() == 1 ? 0 : i]);
  return out;
}

// ---------------------------------------------------------------------------
// Container format (see FORMAT.md for the byte layout)
// ---------------------------------------------------------------------------

struct StreamHeader {
  uint32_t width = 0, height = 0;  // original image size, pre-padding
  uint64_t config_id = 0;
  uint16_t lambda_index = kCustomLambda;
  uint16_t groups = 0;
};

namespace detail {

inline void put_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v & 0xFF));
  b.push_back(static_cast<uint8_t>(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::vector<uint8_t>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const uint8_t* p;
  size_t n, pos = 0;

  void need(size_t k) {
    if (pos + k > n) throw FormatError(FormatError::Kind::kTruncated, "container truncated");
  }
  uint16_t u16() {
    need(2);
    const uint16_t v = static_cast<uint16_t>(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[pos + static_cast<size_t>(i)];
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[pos + static_cast<size_t>(i)];
    pos += 8;
    return v;
  }
  std::vector<uint8_t> segment() {
    const uint32_t len = u32();
    if (pos + len > n)
      throw FormatError(FormatError::Kind::kLengthOverrun, "segment length exceeds container");
    std::vector<uint8_t> out(p + pos, p + pos + len);
    pos += len;
    return out;
  }
};

}  // namespace detail

inline std::vector<uint8_t> serialize_stream(const StreamHeader& h, const std::vector<uint8_t>& z,
                                             const std::vector<std::vector<uint8_t>>& y) {
  if (h.groups == 0 || y.size() != h.groups)
    throw std::invalid_argument("serialize_stream: group count mismatch");
  if (h.width == 0 || h.height == 0)
    throw std::invalid_argument("serialize_stream: empty image dimensions");
  std::vector<uint8_t> out;
  size_t payload = z.size();
  for (const auto& seg : y) payload += seg.size();
  out.reserve(28 + 4 * (1 + y.size()) + payload);
  for (char c : {'C', 'M', 'A', 'M'}) out.push_back(static_cast<uint8_t>(c));
  detail::put_u16(out, kFormatVersion);
  detail::put_u16(out, 0);  // reserved, must be zero
  detail::put_u32(out, h.width);
  detail::put_u32(out, h.height);
  detail::put_u64(out, h.config_id);
  detail::put_u16(out, h.lambda_index);
  detail::put_u16(out, h.groups);
  detail::put_u32(out, static_cast<uint32_t>(z.size()));
  out.insert(out.end(), z.begin(), z.end());
  for (const auto& seg : y) {
    detail::put_u32(out, static_cast<uint32_t>(seg.size()));
    out.insert(out.end(), seg.begin(), seg.end());
  }
  return out;
}

struct ParsedStream {
  StreamHeader header;
  std::vector<uint8_t> z;
  std::vector<std::vector<uint8_t>> y;
};

inline ParsedStream deserialize_stream(const std::vector<uint8_t>& bytes) {
  detail::ByteReader r{bytes.data(), bytes.size()};
  r.need(4);
  if (!(bytes[0] == 'C' && bytes[1] == 'M' && bytes[2] == 'A' && bytes[3] == 'M'))
    throw FormatError(FormatError::Kind::kBadMagic, "bad magic (want CMAM)");
  r.pos = 4;
  const uint16_t version = r.u16();
  if (version != kFormatVersion)
    throw FormatError(FormatError::Kind::kBadVersion,
                      "unsupported version " + std::to_string(version));
  if (r.u16() != 0) throw FormatError(FormatError::Kind::kBadField, "reserved field not zero");
  ParsedStream ps;
  ps.header.width = r.u32();
  ps.header.height = r.u32();
  if (ps.header.width == 0 || ps.header.height == 0)
    throw FormatError(FormatError::Kind::kBadField, "zero image dimension");
  ps.header.config_id = r.u64();
  ps.header.lambda_index = r.u16();
  ps.header.groups = r.u16();
  if (ps.header.groups == 0 || ps.header.groups > 1024)
    throw FormatError(FormatError::Kind::kBadField, "implausible group count");
  ps.z = r.segment();
  ps.y.reserve(ps.header.groups);
  for (uint16_t i = 0; i < ps.header.groups; ++i) ps.y.push_back(r.segment());
  if (r.pos != bytes.size())
    throw FormatError(FormatError::Kind::kBadField, "trailing bytes after last segment");
  return ps;
}

}  // namespace cmamba

#endif  // CMAMBA_CODER_HPP
