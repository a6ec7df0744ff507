#include <charconv>
#include <cmath>
#include <sstream>

#include "retr/model.hpp"

namespace retr::model {

std::string to_string(Routing v) { return v == Routing::learned ? "learned" : "all-ones"; }
std::string to_string(Pooling v) { return v == Pooling::global ? "global" : "causal"; }
std::string to_string(Relaxation v) { return v == Relaxation::st ? "st" : "soft"; }
std::string to_string(InferenceRoute v) { return v == InferenceRoute::argmax ? "argmax" : "sample"; }

std::optional<Routing> parse_routing(std::string_view s) {
  if (s == "learned") return Routing::learned;
  if (s == "all-ones") return Routing::all_ones;
  return std::nullopt;
}
std::optional<Pooling> parse_pooling(std::string_view s) {
  if (s == "global") return Pooling::global;
  if (s == "causal") return Pooling::causal;
  return std::nullopt;
}
std::optional<Relaxation> parse_relaxation(std::string_view s) {
  if (s == "st") return Relaxation::st;
  if (s == "soft") return Relaxation::soft;
  return std::nullopt;
}
std::optional<InferenceRoute> parse_inference_route(std::string_view s) {
  if (s == "argmax") return InferenceRoute::argmax;
  if (s == "sample") return InferenceRoute::sample;
  return std::nullopt;
}

void ModelConfig::validate() const {
  if (num_items < 1) throw ConfigError("model needs at least one item");
  if (blocks < 1) throw ConfigError("block count must be positive");
  if (heads < 1 || dim < 1) throw ConfigError("heads and dim must be positive");
  if (dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (max_len < 1) throw ConfigError("max_len must be positive");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("bad value '" + text + "' for model." + key);
  }
  return v;
}

template <typename E>
E parse_enum(const std::string& key, const std::string& text,
             std::optional<E> (*parse)(std::string_view)) {
  auto v = parse(text);
  if (!v) throw ConfigError("bad value '" + text + "' for model." + key);
  return *v;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> ModelConfig::to_metadata() const {
  return {
      {"model.num_items", std::to_string(num_items)},
      {"model.blocks", std::to_string(blocks)},
      {"model.heads", std::to_string(heads)},
      {"model.dim", std::to_string(dim)},
      {"model.max_len", std::to_string(max_len)},
      {"model.tau", format_double(tau)},
      {"model.routing", to_string(routing)},
      {"model.pooling", to_string(pooling)},
      {"model.relaxation", to_string(relaxation)},
      {"model.inference", to_string(inference)},
      {"model.ffn_hidden", std::to_string(ffn_width())},
      {"model.dropout", format_double(dropout)},
      {"model.ln_eps", format_double(ln_eps)},
  };
}

ModelConfig ModelConfig::from_metadata(const std::vector<std::pair<std::string, std::string>>& meta) {
  ModelConfig c;
  bool saw_items = false;
  for (const auto& [full_key, value] : meta) {
    if (full_key.rfind("model.", 0) != 0) continue;
    const std::string key = full_key.substr(6);
    if (key == "num_items") {
      c.num_items = parse_number<std::size_t>(key, value);
      saw_items = true;
    } else if (key == "blocks") {
      c.blocks = parse_number<std::size_t>(key, value);
    } else if (key == "heads") {
      c.heads = parse_number<std::size_t>(key, value);
    } else if (key == "dim") {
      c.dim = parse_number<std::size_t>(key, value);
    } else if (key == "max_len") {
      c.max_len = parse_number<std::size_t>(key, value);
    } else if (key == "tau") {
      c.tau = parse_number<double>(key, value);
    } else if (key == "routing") {
      c.routing = parse_enum(key, value, parse_routing);
    } else if (key == "pooling") {
      c.pooling = parse_enum(key, value, parse_pooling);
    } else if (key == "relaxation") {
      c.relaxation = parse_enum(key, value, parse_relaxation);
    } else if (key == "inference") {
      c.inference = parse_enum(key, value, parse_inference_route);
    } else if (key == "ffn_hidden") {
      c.ffn_hidden = parse_number<std::size_t>(key, value);
    } else if (key == "dropout") {
      c.dropout = parse_number<double>(key, value);
    } else if (key == "ln_eps") {
      c.ln_eps = parse_number<double>(key, value);
    } else {
      throw ConfigError("unknown model field '" + full_key + "'");
    }
  }
  if (!saw_items) throw ConfigError("checkpoint metadata lacks model.num_items");
  c.validate();
  return c;
}

std::vector<std::string> structural_differences(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> diffs;
  auto check = [&](const char* name, std::size_t x, std::size_t y) {
    if (x != y) diffs.push_back(std::string(name) + ": " + std::to_string(x) + " vs " + std::to_string(y));
  };
  check("num_items", a.num_items, b.num_items);
  check("blocks", a.blocks, b.blocks);
  check("heads", a.heads, b.heads);
  check("dim", a.dim, b.dim);
  check("max_len", a.max_len, b.max_len);
  check("ffn_hidden", a.ffn_width(), b.ffn_width());
  return diffs;
}

}  // namespace retr::model
