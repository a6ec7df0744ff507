#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>

#include "retr/data.hpp"
#include "retr/random.hpp"

namespace retr::data {

std::string_view archetype_name(Archetype a) {
  switch (a) {
    case Archetype::correlated: return "correlated";
    case Archetype::casual: return "casual";
    case Archetype::drifted: return "drifted";
  }
  return "?";
}

std::optional<Archetype> parse_archetype(std::string_view name) {
  if (name == "correlated") return Archetype::correlated;
  if (name == "casual") return Archetype::casual;
  if (name == "drifted") return Archetype::drifted;
  return std::nullopt;
}

void SyntheticSpec::validate() const {
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) {
    throw SpecError("noise rate must lie in [0, 1), got " + std::to_string(noise_rate));
  }
  if (users == 0) throw SpecError("user count must be positive");
  if (categories < 2) throw SpecError("at least two categories are required");
  if (items / categories < 2) {
    throw SpecError("categories would be empty or singletons: " + std::to_string(items) +
                    " items over " + std::to_string(categories) + " categories");
  }
  if (min_length < 4 || min_length > max_length) {
    throw SpecError("sequence lengths need 4 <= min_length <= max_length");
  }
  double total = 0.0;
  for (double w : mix) {
    if (!(w >= 0.0)) throw SpecError("archetype weights must be non-negative");
    total += w;
  }
  if (total <= 0.0) throw SpecError("archetype weights sum to zero");
  if (drift_head.has_value() != drift_tail.has_value()) {
    throw SpecError("drift head and tail lengths must be given together");
  }
  if (drift_head && (*drift_head < 1 || *drift_tail < 1 || *drift_head + *drift_tail < 3)) {
    throw SpecError("drift runs need positive lengths summing to at least 3");
  }
}

int SyntheticSpec::category_of(int item) const {
  const auto per = static_cast<int>(category_size());
  return std::min((item - 1) / per, static_cast<int>(categories) - 1);
}

namespace {

class ItemCatalog {
 public:
  explicit ItemCatalog(const SyntheticSpec& spec) : spec_(spec) {}

  int first(int c) const { return c * static_cast<int>(spec_.category_size()) + 1; }
  int size(int c) const {
    const int last = c + 1 == static_cast<int>(spec_.categories)
                         ? static_cast<int>(spec_.items)
                         : first(c + 1) - 1;
    return last - first(c) + 1;
  }
  int random_in(int c, Rng& rng) const {
    std::uniform_int_distribution<int> d(0, size(c) - 1);
    return first(c) + d(rng);
  }
  int random_outside(int c, Rng& rng) const {
    const int outside = static_cast<int>(spec_.items) - size(c);
    std::uniform_int_distribution<int> d(0, outside - 1);
    int k = d(rng);
    // Skip over the excluded block.
    return k + 1 < first(c) ? k + 1 : k + 1 + size(c);
  }

 private:
  const SyntheticSpec& spec_;
};

// Walks a category with a fixed stride; every call yields the next link.
class Chain {
 public:
  Chain(const ItemCatalog& cat, int category, int start, int stride)
      : cat_(cat), category_(category), offset_(start), stride_(stride) {}
  int next() {
    const int item = cat_.first(category_) + offset_;
    offset_ = (offset_ + stride_) % cat_.size(category_);
    return item;
  }

 private:
  const ItemCatalog& cat_;
  int category_;
  int offset_;
  int stride_;
};

}  // namespace

std::vector<SyntheticUser> synth_generate(const SyntheticSpec& spec) {
  spec.validate();
  ItemCatalog catalog(spec);
  Rng rng = make_stream(spec.seed, "synth");
  std::discrete_distribution<int> pick_archetype(spec.mix.begin(), spec.mix.end());
  std::uniform_int_distribution<std::size_t> pick_length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<int> pick_category(0, static_cast<int>(spec.categories) - 1);
  std::uniform_int_distribution<int> pick_stride(1, 2);
  std::bernoulli_distribution is_pivotal(1.0 - spec.noise_rate);

  std::vector<SyntheticUser> users;
  users.reserve(spec.users);
  for (std::size_t u = 0; u < spec.users; ++u) {
    SyntheticUser user;
    user.id = std::to_string(u + 1);
    user.archetype = static_cast<Archetype>(pick_archetype(rng));
    user.category = pick_category(rng);
    std::size_t tokens = pick_length(rng) - 1;
    if (user.archetype == Archetype::drifted && spec.drift_head) {
      tokens = *spec.drift_head + *spec.drift_tail;
    }
    std::uniform_int_distribution<int> pick_start(0, catalog.size(user.category) - 1);
    Chain chain(catalog, user.category, pick_start(rng), pick_stride(rng));

    user.pivotal.assign(tokens, 0);
    switch (user.archetype) {
      case Archetype::correlated: {
        auto run = static_cast<std::size_t>(
            std::lround((1.0 - spec.noise_rate) * static_cast<double>(tokens)));
        run = std::clamp<std::size_t>(run, 1, tokens);
        std::fill(user.pivotal.end() - static_cast<std::ptrdiff_t>(run), user.pivotal.end(), 1);
        break;
      }
      case Archetype::casual: {
        for (auto& p : user.pivotal) p = is_pivotal(rng) ? 1 : 0;
        if (std::find(user.pivotal.begin(), user.pivotal.end(), 1) == user.pivotal.end()) {
          std::uniform_int_distribution<std::size_t> pos(0, tokens - 1);
          user.pivotal[pos(rng)] = 1;
        }
        break;
      }
      case Archetype::drifted: {
        std::size_t tail = spec.drift_tail
                               ? *spec.drift_tail
                               : std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(
                                                              static_cast<double>(tokens) / 5.0)));
        tail = std::min(tail, tokens - 1);
        std::fill(user.pivotal.end() - static_cast<std::ptrdiff_t>(tail), user.pivotal.end(), 1);
        break;
      }
    }

    int head_category = user.category;
    if (user.archetype == Archetype::drifted) {
      while (head_category == user.category) head_category = pick_category(rng);
    }
    user.items.reserve(tokens + 1);
    for (std::size_t t = 0; t < tokens; ++t) {
      if (user.pivotal[t]) {
        user.items.push_back(chain.next());
      } else if (user.archetype == Archetype::drifted) {
        user.items.push_back(catalog.random_in(head_category, rng));
      } else {
        user.items.push_back(catalog.random_outside(user.category, rng));
      }
    }
    user.items.push_back(chain.next());
    users.push_back(std::move(user));
  }
  return users;
}

void write_interactions(std::ostream& out, const std::vector<SyntheticUser>& users) {
  for (const auto& u : users) {
    for (std::size_t t = 0; t < u.items.size(); ++t) {
      out << u.id << '\t' << u.items[t] << '\t' << t << '\n';
    }
  }
}

void write_pivotal_labels(std::ostream& out, const std::vector<SyntheticUser>& users) {
  for (const auto& u : users) {
    for (std::size_t t = 0; t < u.pivotal.size(); ++t) {
      out << u.id << '\t' << t << '\t' << static_cast<int>(u.pivotal[t]) << '\n';
    }
  }
}

PivotalLabels read_pivotal_labels(std::istream& in) {
  PivotalLabels labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string user;
    long long pos = -1;
    int flag = -1;
    if (!std::getline(ls, user, '\t') || !(ls >> pos >> flag) || pos < 0 ||
        (flag != 0 && flag != 1)) {
      throw ParseError(lineno, "expected user<TAB>position<TAB>{0,1}");
    }
    auto& v = labels[user];
    if (static_cast<std::size_t>(pos) >= v.size()) v.resize(static_cast<std::size_t>(pos) + 1, 0);
    v[static_cast<std::size_t>(pos)] = static_cast<std::uint8_t>(flag);
  }
  return labels;
}

PivotalLabels load_pivotal_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pivotal label file '" + path.string() + "'");
  return read_pivotal_labels(in);
}

}  // namespace retr::data
