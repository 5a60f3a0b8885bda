#pragma once

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "first/errors.hpp"
#include "first/rng.hpp"

namespace first {

struct Example {
  std::string prompt;
  std::string response;

  friend bool operator==(const Example&, const Example&) = default;
};

enum class TaskKind { kCopy, kReverse, kCaesar, kSummarize };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kCaesar: return "caesar-translate";
    case TaskKind::kSummarize: return "templated-summarize";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "caesar" || s == "caesar-translate") return TaskKind::kCaesar;
  if (s == "summarize" || s == "templated-summarize") return TaskKind::kSummarize;
  throw ConfigError("unknown task kind '" + s + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  std::size_t min_len = 4;  // payload length range (letters)
  std::size_t max_len = 8;
  std::size_t n_train = 512;
  std::size_t n_val = 64;
  std::size_t n_test = 64;
  std::uint64_t seed = 0;
  int shift = 3;  // caesar rotation

  void validate() const {
    if (min_len < 1 || max_len < min_len) throw ConfigError("task spec: bad payload length range");
    if (n_train == 0) throw ConfigError("task spec: empty training split");
  }
};

struct DatasetSplits {
  std::vector<Example> train, val, test;
};

inline std::string caesar_shift(const std::string& s, int shift) {
  std::string out = s;
  const int k = ((shift % 26) + 26) % 26;
  for (auto& c : out) {
    if (c >= 'a' && c <= 'z') c = static_cast<char>('a' + (c - 'a' + k) % 26);
  }
  return out;
}

namespace detail {

inline std::string random_word(Rng& rng, std::size_t min_len, std::size_t max_len) {
  const auto len = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
  std::string w(len, 'a');
  for (auto& c : w) c = static_cast<char>('a' + rng.integer(0, 25));
  return w;
}

inline Example make_example(const TaskSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case TaskKind::kCopy: {
      auto p = random_word(rng, spec.min_len, spec.max_len);
      return {p, p};
    }
    case TaskKind::kReverse: {
      auto p = random_word(rng, spec.min_len, spec.max_len);
      return {p, std::string(p.rbegin(), p.rend())};
    }
    case TaskKind::kCaesar: {
      auto p = random_word(rng, spec.min_len, spec.max_len);
      return {p, caesar_shift(p, spec.shift)};
    }
    case TaskKind::kSummarize: {
      // Filler sentences around one keyed sentence; the summary is the key.
      static const char* filler[] = {"so", "it", "was", "then", "we", "saw", "a", "day"};
      auto sentence = [&]() {
        std::string s;
        const auto words = rng.integer(2, 3);
        for (std::int64_t i = 0; i < words; ++i) s += std::string(i ? " " : "") + filler[rng.integer(0, 7)];
        return s + ". ";
      };
      const auto key = random_word(rng, spec.min_len, spec.max_len);
      std::string doc;
      const auto before = rng.integer(0, 2), after = rng.integer(0, 2);
      for (std::int64_t i = 0; i < before; ++i) doc += sentence();
      doc += "key " + key + ". ";
      for (std::int64_t i = 0; i < after; ++i) doc += sentence();
      doc.pop_back();
      return {doc, key};
    }
  }
  throw ConfigError("unknown task kind");
}

}  // namespace detail

// Deterministic corpora. Prompts are unique across the whole draw and then
// dealt out in order, so the splits cannot overlap.
inline DatasetSplits generate_dataset(const TaskSpec& spec) {
  spec.validate();
  Rng rng = Rng(spec.seed).split("dataset");
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  std::unordered_set<std::string> seen;
  std::vector<Example> all;
  std::size_t attempts = 0;
  while (all.size() < total) {
    if (++attempts > total * 100 + 1000) {
      throw ConfigError("task spec: cannot draw " + std::to_string(total) + " distinct prompts");
    }
    Example ex = detail::make_example(spec, rng);
    if (seen.insert(ex.prompt).second) all.push_back(std::move(ex));
  }
  DatasetSplits out;
  out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
  out.val.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.n_train),
                 all.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val));
  out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val), all.end());
  return out;
}

}  // namespace first
