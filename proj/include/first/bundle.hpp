#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "first/errors.hpp"
#include "first/lora.hpp"
#include "first/model.hpp"
#include "first/router.hpp"

// On-disk layout (all integers little-endian):
//
//   "FRST1"  u32 version  u32 n_layers d_model n_heads d_ff vocab_size max_seq
//   u32 section_count
//   section*: char[4] tag, u64 payload_bytes, payload
//
//   tensor:  u32 rank, u32 extent[rank], f32 data[numel]
//   MODL:    u32 count, tensor[count] in ModelWeights::parameters() order
//   ROUT:    u32 count, tensor[count], one [d_model] weight per layer
//   LORA:    u32 rank, f64 lora_alpha, f64 dropout, u32 count,
//            count * (u32 layer, u32 target, tensor A, tensor B)
//
// Sections appear in the order MODL, ROUT, LORA and each is optional.

namespace first {

inline constexpr char kBundleMagic[5] = {'F', 'R', 'S', 'T', '1'};
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::size_t kMaxBundleLayers = 1024;
inline constexpr std::size_t kMaxBundleExtent = std::size_t{1} << 24;

struct Bundle {
  ModelConfig config;
  std::optional<ModelWeights<float>> model;
  std::optional<RouterBank<float>> routers;
  std::optional<LoraSet<float>> lora;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* s, std::size_t n) { out_.insert(out_.end(), s, s + n); }
  void bytes(const std::vector<std::uint8_t>& b) { out_.insert(out_.end(), b.begin(), b.end()); }

  void tensor(const Tensor<float>& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) u32(static_cast<std::uint32_t>(e));
    for (float v : t.data()) f32(v);
  }

  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string what) : p_(data), end_(data + size), what_(std::move(what)) {}

  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }
  const std::uint8_t* position() const { return p_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw TruncatedError("bundle: " + what_ + " needs " + std::to_string(n) + " bytes, " +
                           std::to_string(remaining()) + " left");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[i]) << (8 * i);
    p_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[i]) << (8 * i);
    p_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void skip(std::size_t n) {
    need(n);
    p_ += n;
  }

  Tensor<float> tensor(const Shape& expected) {
    const std::uint32_t rank = u32();
    if (rank > 8) throw ShapeMismatchError("bundle: " + what_ + " tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = u32();
    if (shape != expected) {
      throw ShapeMismatchError("bundle: " + what_ + " tensor " + to_string(shape) + ", config expects " +
                               to_string(expected));
    }
    const std::size_t n = numel_of(shape);
    need(n * 4);
    std::vector<float> vals(n);
    for (auto& v : vals) v = f32();
    return Tensor<float>(std::move(shape), std::move(vals));
  }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
  std::string what_;
};

inline std::vector<std::uint8_t> encode_model(const ModelWeights<float>& w) {
  ByteWriter out;
  const auto params = w.parameters();
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) out.tensor(t);
  return std::move(out.buffer());
}

inline std::vector<std::uint8_t> encode_routers(const RouterBank<float>& r) {
  ByteWriter out;
  out.u32(static_cast<std::uint32_t>(r.size()));
  for (const auto& t : r.parameters()) out.tensor(t);
  return std::move(out.buffer());
}

inline std::vector<std::uint8_t> encode_lora(const LoraSet<float>& set) {
  if (set.consumed()) throw ConfigError("bundle: adapter set was merged and cannot be saved");
  ByteWriter out;
  out.u32(static_cast<std::uint32_t>(set.rank()));
  out.f64(set.lora_alpha());
  out.f64(set.dropout());
  std::vector<std::pair<std::size_t, std::size_t>> present;
  for (std::size_t l = 0; l < set.n_layers(); ++l)
    for (std::size_t t = 0; t < kLoraTargetCount; ++t)
      if (set.get(l, static_cast<LoraTarget>(t))) present.emplace_back(l, t);
  out.u32(static_cast<std::uint32_t>(present.size()));
  for (auto [l, t] : present) {
    const auto* ad = set.get(l, static_cast<LoraTarget>(t));
    out.u32(static_cast<std::uint32_t>(l));
    out.u32(static_cast<std::uint32_t>(t));
    out.tensor(ad->a);
    out.tensor(ad->b);
  }
  return std::move(out.buffer());
}

inline void expect_consumed(const ByteReader& r, const char* tag) {
  if (r.remaining() != 0) {
    throw FormatError(std::string("bundle: ") + tag + " section has " + std::to_string(r.remaining()) +
                      " unread bytes");
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_bundle(const Bundle& b) {
  b.config.validate();
  detail::ByteWriter out;
  out.raw(kBundleMagic, sizeof kBundleMagic);
  out.u32(kBundleVersion);
  for (std::size_t v : {b.config.n_layers, b.config.d_model, b.config.n_heads, b.config.d_ff, b.config.vocab_size,
                        b.config.max_seq})
    out.u32(static_cast<std::uint32_t>(v));
  std::vector<std::pair<const char*, std::vector<std::uint8_t>>> sections;
  if (b.model) {
    if (!(b.model->config == b.config)) throw ShapeMismatchError("bundle: model config disagrees with header");
    sections.emplace_back("MODL", detail::encode_model(*b.model));
  }
  if (b.routers) {
    b.routers->validate(b.config);
    sections.emplace_back("ROUT", detail::encode_routers(*b.routers));
  }
  if (b.lora) sections.emplace_back("LORA", detail::encode_lora(*b.lora));
  out.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [tag, payload] : sections) {
    out.raw(tag, 4);
    out.u64(payload.size());
    out.bytes(payload);
  }
  return std::move(out.buffer());
}

// Byte extents of each section payload, keyed by tag. Used to diff checkpoints.
struct SectionSpan {
  std::size_t offset = 0;
  std::size_t size = 0;
};

namespace detail {

inline ModelConfig read_header(ByteReader& r) {
  r.need(sizeof kBundleMagic);
  if (std::memcmp(r.position(), kBundleMagic, sizeof kBundleMagic) != 0) throw BadMagicError("bundle: bad magic");
  r.skip(sizeof kBundleMagic);
  const std::uint32_t version = r.u32();
  if (version != kBundleVersion) {
    throw UnsupportedVersionError("bundle: version " + std::to_string(version) + " (reader supports " +
                                  std::to_string(kBundleVersion) + ")");
  }
  ModelConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.d_ff = r.u32();
  c.vocab_size = r.u32();
  c.max_seq = r.u32();
  // Bounds well above any desk-scale model; a corrupted header fails here
  // rather than in an enormous allocation.
  if (c.n_layers > kMaxBundleLayers || c.d_model > kMaxBundleExtent || c.d_ff > kMaxBundleExtent ||
      c.vocab_size > kMaxBundleExtent || c.max_seq > kMaxBundleExtent) {
    throw ShapeMismatchError("bundle: header config exceeds reader limits");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ShapeMismatchError(std::string("bundle: header config invalid: ") + e.what());
  }
  return c;
}

template <typename F>
void for_each_section(const std::vector<std::uint8_t>& bytes, F&& visit) {
  ByteReader r(bytes.data(), bytes.size(), "header");
  const ModelConfig config = read_header(r);
  const std::uint32_t count = r.u32();
  std::string last;
  for (std::uint32_t i = 0; i < count; ++i) {
    r.need(4);
    const std::string tag(reinterpret_cast<const char*>(r.position()), 4);
    r.skip(4);
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) {
      throw TruncatedError("bundle: section " + tag + " claims " + std::to_string(len) + " bytes, " +
                           std::to_string(r.remaining()) + " left");
    }
    const std::size_t offset = static_cast<std::size_t>(r.position() - bytes.data());
    visit(config, tag, offset, static_cast<std::size_t>(len));
    r.skip(static_cast<std::size_t>(len));
  }
  if (r.remaining() != 0) throw FormatError("bundle: trailing bytes after last section");
}

}  // namespace detail

inline std::map<std::string, SectionSpan> bundle_sections(const std::vector<std::uint8_t>& bytes) {
  std::map<std::string, SectionSpan> out;
  detail::for_each_section(bytes, [&](const ModelConfig&, const std::string& tag, std::size_t off, std::size_t len) {
    out[tag] = {off, len};
  });
  return out;
}

inline Bundle decode_bundle(const std::vector<std::uint8_t>& bytes) {
  Bundle b;
  bool header_seen = false;
  std::string previous;
  static const std::array<std::string, 3> order{"MODL", "ROUT", "LORA"};
  auto rank_of = [&](const std::string& tag) -> std::size_t {
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i] == tag) return i;
    throw FormatError("bundle: unknown section '" + tag + "'");
  };
  detail::for_each_section(bytes, [&](const ModelConfig& config, const std::string& tag, std::size_t off, std::size_t len) {
    b.config = config;
    header_seen = true;
    if (!previous.empty() && rank_of(tag) <= rank_of(previous)) {
      throw FormatError("bundle: section " + tag + " out of order or repeated");
    }
    rank_of(tag);
    previous = tag;
    detail::ByteReader r(bytes.data() + off, len, tag);
    if (tag == "MODL") {
      ModelWeights<float> w;
      w.config = config;
      const auto shapes = ModelWeights<float>::shapes_for(config);
      const std::uint32_t count = r.u32();
      if (count != shapes.size()) {
        throw ShapeMismatchError("bundle: MODL holds " + std::to_string(count) + " tensors, config expects " +
                                 std::to_string(shapes.size()));
      }
      std::vector<Tensor<float>> ts;
      for (const auto& s : shapes) ts.push_back(r.tensor(s));
      w.assign_parameters(std::move(ts));
      detail::expect_consumed(r, "MODL");
      b.model = std::move(w);
    } else if (tag == "ROUT") {
      const std::uint32_t count = r.u32();
      if (count != config.n_layers) {
        throw ShapeMismatchError("bundle: ROUT holds " + std::to_string(count) + " routers for " +
                                 std::to_string(config.n_layers) + " layers");
      }
      std::vector<Router<float>> routers(count);
      for (auto& x : routers) x.weight = r.tensor({config.d_model});
      detail::expect_consumed(r, "ROUT");
      b.routers = RouterBank<float>(std::move(routers));
    } else {
      const std::uint32_t rank = r.u32();
      const double lora_alpha = r.f64();
      const double dropout = r.f64();
      LoraSet<float> set(config.n_layers, rank, lora_alpha, dropout);
      const std::uint32_t count = r.u32();
      for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t layer = r.u32(), target = r.u32();
        if (layer >= config.n_layers || target >= kLoraTargetCount) {
          throw ShapeMismatchError("bundle: LORA entry (" + std::to_string(layer) + ", " + std::to_string(target) +
                                   ") out of range");
        }
        const auto [in, out] = target_dims(config, static_cast<LoraTarget>(target));
        LoraAdapter<float> ad;
        ad.a = r.tensor({rank, in});
        ad.b = r.tensor({out, rank});
        ad.rank = rank;
        ad.lora_alpha = lora_alpha;
        ad.dropout = dropout;
        set.put(layer, static_cast<LoraTarget>(target), std::move(ad));
      }
      detail::expect_consumed(r, "LORA");
      b.lora = std::move(set);
    }
  });
  if (!header_seen) {
    detail::ByteReader r(bytes.data(), bytes.size(), "header");
    b.config = detail::read_header(r);
  }
  return b;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path.string() + "'");
}

inline void save_bundle(const std::filesystem::path& path, const Bundle& b) { write_file_bytes(path, encode_bundle(b)); }
inline Bundle load_bundle(const std::filesystem::path& path) { return decode_bundle(read_file_bytes(path)); }

}  // namespace first
