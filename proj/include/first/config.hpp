#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "first/dataset.hpp"
#include "first/errors.hpp"
#include "first/generate.hpp"
#include "first/model_config.hpp"
#include "first/training.hpp"

namespace first {

struct LoraConfig {
  std::size_t rank = 8;
  double lora_alpha = 32.0;
  double dropout = 0.1;
};

struct PathConfig {
  std::string bundle;      // input checkpoint
  std::string output;      // output checkpoint or report
  std::string report_dir;  // CSV outputs
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  TaskSpec task;
  LoraConfig lora;
  SamplerConfig sampler;
  PathConfig paths;
  std::uint64_t seed = 0;
};

// Flat "key = value" lines grouped under "[section]" headers. '#' and ';'
// start comments. Keys outside any section are rejected.
using IniData = std::map<std::string, std::map<std::string, std::string>>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline IniData parse_ini(std::istream& in) {
  IniData data;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      data[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
    data[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return data;
}

namespace detail {

template <typename V>
V parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("config: bad value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

}  // namespace detail

inline ExperimentConfig experiment_from_ini(const IniData& data) {
  ExperimentConfig c;
  using Setter = std::function<void(const std::string&)>;
  std::map<std::string, std::map<std::string, Setter>> table;
  auto num = [](auto& field, std::string key) {
    return [&field, key](const std::string& v) { field = detail::parse_value<std::decay_t<decltype(field)>>(key, v); };
  };
  table["run"] = {{"seed", num(c.seed, "run.seed")}};
  table["model"] = {{"n_layers", num(c.model.n_layers, "model.n_layers")},
                    {"d_model", num(c.model.d_model, "model.d_model")},
                    {"n_heads", num(c.model.n_heads, "model.n_heads")},
                    {"d_ff", num(c.model.d_ff, "model.d_ff")},
                    {"vocab_size", num(c.model.vocab_size, "model.vocab_size")},
                    {"max_seq", num(c.model.max_seq, "model.max_seq")}};
  table["train"] = {
      {"lambda", num(c.train.lambda, "train.lambda")},
      {"alpha", num(c.train.alpha, "train.alpha")},
      {"lr_max", num(c.train.lr_max, "train.lr_max")},
      {"lr_min", num(c.train.lr_min, "train.lr_min")},
      {"accumulation_steps", num(c.train.accumulation_steps, "train.accumulation_steps")},
      {"patience", num(c.train.patience, "train.patience")},
      {"eval_every", num(c.train.eval_every, "train.eval_every")},
      {"max_epochs", num(c.train.max_epochs, "train.max_epochs")},
      {"max_steps", num(c.train.max_steps, "train.max_steps")},
      {"batch_size", num(c.train.batch_size, "train.batch_size")},
      {"max_seq_len", num(c.train.max_seq_len, "train.max_seq_len")},
      {"max_val_examples", num(c.train.max_val_examples, "train.max_val_examples")},
      {"phase2_alpha_divisor", num(c.train.phase2_alpha_divisor, "train.phase2_alpha_divisor")},
      {"schedule", [&](const std::string& v) {
         if (v == "cosine") c.train.schedule = ScheduleKind::kCosine;
         else if (v == "constant") c.train.schedule = ScheduleKind::kConstant;
         else throw ConfigError("config: train.schedule must be cosine or constant");
       }}};
  table["task"] = {{"kind", [&](const std::string& v) { c.task.kind = parse_task_kind(v); }},
                   {"min_len", num(c.task.min_len, "task.min_len")},
                   {"max_len", num(c.task.max_len, "task.max_len")},
                   {"n_train", num(c.task.n_train, "task.n_train")},
                   {"n_val", num(c.task.n_val, "task.n_val")},
                   {"n_test", num(c.task.n_test, "task.n_test")},
                   {"shift", num(c.task.shift, "task.shift")}};
  table["lora"] = {{"rank", num(c.lora.rank, "lora.rank")},
                   {"alpha", num(c.lora.lora_alpha, "lora.alpha")},
                   {"dropout", num(c.lora.dropout, "lora.dropout")}};
  table["sampler"] = {{"greedy", [&](const std::string& v) { c.sampler.greedy = detail::parse_bool("sampler.greedy", v); }},
                      {"temperature", num(c.sampler.temperature, "sampler.temperature")},
                      {"top_k", num(c.sampler.top_k, "sampler.top_k")}};
  table["paths"] = {{"bundle", [&](const std::string& v) { c.paths.bundle = v; }},
                    {"output", [&](const std::string& v) { c.paths.output = v; }},
                    {"report_dir", [&](const std::string& v) { c.paths.report_dir = v; }}};

  for (const auto& [section, kv] : data) {
    auto sec = table.find(section);
    if (sec == table.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : kv) {
      auto setter = sec->second.find(key);
      if (setter == sec->second.end()) throw ConfigError("config: unknown key " + section + "." + key);
      setter->second(value);
    }
  }
  c.task.seed = c.seed;
  c.train.seed = c.seed;
  c.model.validate();
  c.train.validate();
  c.task.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  return experiment_from_ini(parse_ini(in));
}

}  // namespace first
