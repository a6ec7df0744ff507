#include <algorithm>
#include <stdexcept>

#include "retr/data.hpp"

namespace retr::data {

std::size_t BehaviorSequence::valid_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

BehaviorSequence make_sequence(int user, std::span<const int> inputs, int next, std::size_t n,
                               int first_position, bool all_targets) {
  if (n < 2) throw std::invalid_argument("sequence length must be at least 2");
  if (inputs.empty()) throw std::invalid_argument("sequence needs at least one input item");
  const std::size_t keep = std::min(inputs.size(), n);
  const std::size_t drop = inputs.size() - keep;
  const std::size_t pad = n - keep;
  BehaviorSequence seq;
  seq.user = user;
  seq.items.assign(n, 0);
  seq.mask.assign(n, 0);
  seq.targets.assign(n, 0);
  seq.positions.assign(n, -1);
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t slot = pad + i;
    seq.items[slot] = inputs[drop + i];
    seq.mask[slot] = 1;
    seq.positions[slot] = first_position + static_cast<int>(drop + i);
    if (i + 1 < keep) {
      if (all_targets) seq.targets[slot] = inputs[drop + i + 1];
    } else {
      seq.targets[slot] = next;
    }
  }
  return seq;
}

std::vector<BehaviorSequence> build_sequences(const InteractionLog& log, std::size_t n) {
  std::vector<BehaviorSequence> out;
  out.reserve(log.users.size());
  for (const auto& h : log.users) {
    if (h.items.size() < 2) continue;
    std::span<const int> all(h.items);
    out.push_back(make_sequence(h.user, all.first(all.size() - 1), all.back(), n));
  }
  return out;
}

SplitDataset leave_one_out_split(const InteractionLog& log, std::size_t n, SplitOptions options) {
  SplitDataset split;
  split.num_items = log.num_items();
  split.max_len = n;
  split.histories.resize(log.users.size() + 1);
  split.user_ids.resize(log.users.size() + 1);
  for (const auto& h : log.users) {
    split.histories[static_cast<std::size_t>(h.user)] = h.items;
    split.user_ids[static_cast<std::size_t>(h.user)] = h.raw_id;
    const std::size_t len = h.items.size();
    if (len < 3) {
      ++split.skipped_users;
      continue;
    }
    std::span<const int> all(h.items);
    split.test.push_back(make_sequence(h.user, all.first(len - 1), all[len - 1], n, 0, false));
    split.validation.push_back(make_sequence(h.user, all.first(len - 2), all[len - 2], n, 0, false));

    // Training prefix all[0 .. len-3]; its first item has no predecessor.
    std::span<const int> prefix = all.first(len - 2);
    if (prefix.size() < 2) continue;
    std::vector<BehaviorSequence> windows;
    std::size_t end = prefix.size() - 1;  // index of the window's final target
    while (true) {
      const std::size_t start = end > n ? end - n : 0;
      windows.push_back(make_sequence(h.user, prefix.subspan(start, end - start), prefix[end], n,
                                      static_cast<int>(start)));
      if (!options.all_windows || end <= n) break;
      end -= n;
    }
    split.train.insert(split.train.end(), windows.rbegin(), windows.rend());
  }
  return split;
}

std::vector<std::uint8_t> align_pivotal(const BehaviorSequence& seq,
                                        const std::vector<std::uint8_t>& labels) {
  if (labels.empty()) return {};
  std::vector<std::uint8_t> out(seq.length(), 0);
  for (std::size_t t = 0; t < seq.length(); ++t) {
    const int p = seq.positions[t];
    if (p >= 0 && static_cast<std::size_t>(p) < labels.size()) out[t] = labels[static_cast<std::size_t>(p)];
  }
  return out;
}

}  // namespace retr::data
