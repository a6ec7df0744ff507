#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "retr/data.hpp"

namespace retr::data {
namespace {

struct RawRecord {
  std::size_t user;  // temporary ids in order of first appearance
  std::size_t item;
  std::int64_t timestamp;
};

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == '\t' || line[i] == ',') {
      fields.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return fields;
}

std::size_t intern(std::unordered_map<std::string, std::size_t>& ids,
                   std::vector<std::string>& names, std::string_view key) {
  auto [it, inserted] = ids.try_emplace(std::string(key), names.size());
  if (inserted) names.emplace_back(key);
  return it->second;
}

}  // namespace

std::size_t InteractionLog::num_records() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.items.size();
  return n;
}

const UserHistory* InteractionLog::find_user(std::string_view raw_id) const {
  for (const auto& u : users) {
    if (u.raw_id == raw_id) return &u;
  }
  return nullptr;
}

InteractionLog parse_interactions(std::istream& in, std::size_t min_count) {
  std::unordered_map<std::string, std::size_t> user_ids, item_ids;
  std::vector<std::string> user_names, item_names;
  std::vector<RawRecord> records;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != 3) {
      throw ParseError(lineno, "expected 3 fields (user, item, timestamp), got " +
                                   std::to_string(fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) throw ParseError(lineno, "empty user or item id");
    std::int64_t ts = 0;
    auto [ptr, ec] = std::from_chars(fields[2].data(), fields[2].data() + fields[2].size(), ts);
    if (ec != std::errc() || ptr != fields[2].data() + fields[2].size()) {
      throw ParseError(lineno, "timestamp '" + std::string(fields[2]) + "' is not an integer");
    }
    records.push_back({intern(user_ids, user_names, fields[0]),
                       intern(item_ids, item_names, fields[1]), ts});
  }

  // Iterate the count filter to a fixed point.
  std::vector<bool> alive(records.size(), true);
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::size_t> ucount(user_names.size(), 0), icount(item_names.size(), 0);
    for (std::size_t r = 0; r < records.size(); ++r) {
      if (!alive[r]) continue;
      ++ucount[records[r].user];
      ++icount[records[r].item];
    }
    for (std::size_t r = 0; r < records.size(); ++r) {
      if (alive[r] && (ucount[records[r].user] < min_count || icount[records[r].item] < min_count)) {
        alive[r] = false;
        changed = true;
      }
    }
  }

  InteractionLog log;
  log.item_ids.emplace_back();
  std::vector<int> user_dense(user_names.size(), 0), item_dense(item_names.size(), 0);
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (!alive[r]) continue;
    const auto& rec = records[r];
    if (!user_dense[rec.user]) {
      user_dense[rec.user] = static_cast<int>(log.users.size()) + 1;
      UserHistory h;
      h.user = user_dense[rec.user];
      h.raw_id = user_names[rec.user];
      log.users.push_back(std::move(h));
    }
    if (!item_dense[rec.item]) {
      item_dense[rec.item] = static_cast<int>(log.item_ids.size());
      log.item_ids.push_back(item_names[rec.item]);
    }
    auto& h = log.users[static_cast<std::size_t>(user_dense[rec.user]) - 1];
    h.items.push_back(item_dense[rec.item]);
    h.timestamps.push_back(rec.timestamp);
  }
  if (log.users.empty()) {
    throw EmptyDatasetError("no interactions left after filtering with min_count=" +
                            std::to_string(min_count));
  }

  // Chronological order per user; ties keep input order.
  for (auto& h : log.users) {
    std::vector<std::size_t> order(h.items.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return h.timestamps[a] < h.timestamps[b]; });
    std::vector<int> items;
    std::vector<std::int64_t> ts;
    for (auto k : order) {
      items.push_back(h.items[k]);
      ts.push_back(h.timestamps[k]);
    }
    h.items = std::move(items);
    h.timestamps = std::move(ts);
  }
  return log;
}

InteractionLog load_interactions(const std::filesystem::path& path, std::size_t min_count) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open interaction file '" + path.string() + "'");
  return parse_interactions(in, min_count);
}

}  // namespace retr::data
