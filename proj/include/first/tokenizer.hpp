#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace first {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four specials.
namespace tokens {
inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::int32_t kSep = 259;
inline constexpr std::uint32_t kVocabSize = 260;

inline bool is_special(std::int32_t id) { return id >= 256; }
}  // namespace tokens

inline std::vector<std::int32_t> encode_bytes(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  return ids;
}

// [BOS] bytes [EOS]
inline std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids{tokens::kBos};
  for (auto id : encode_bytes(text)) ids.push_back(id);
  ids.push_back(tokens::kEos);
  return ids;
}

// Bytes of every non-special id, in order.
inline std::string detokenize(const std::vector<std::int32_t>& ids) {
  std::string out;
  for (auto id : ids)
    if (id >= 0 && !tokens::is_special(id)) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

// Generation prefix: [BOS] prompt [SEP]
inline std::vector<std::int32_t> encode_prompt(std::string_view prompt) {
  std::vector<std::int32_t> ids{tokens::kBos};
  for (auto id : encode_bytes(prompt)) ids.push_back(id);
  ids.push_back(tokens::kSep);
  return ids;
}

// Training sequence: [BOS] prompt [SEP] response [EOS]
inline std::vector<std::int32_t> encode_pair(std::string_view prompt, std::string_view response) {
  auto ids = encode_prompt(prompt);
  for (auto id : encode_bytes(response)) ids.push_back(id);
  ids.push_back(tokens::kEos);
  return ids;
}

// Response bytes of a generated continuation, cut at the first EOS.
inline std::string decode_response(const std::vector<std::int32_t>& generated) {
  std::string out;
  for (auto id : generated) {
    if (id == tokens::kEos) break;
    if (!tokens::is_special(id)) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

}  // namespace first
