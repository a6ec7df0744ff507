#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace retr::data {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct UserHistory {
  int user = 0;  // dense index, starting at 1
  std::string raw_id;
  std::vector<int> items;  // dense item indices in chronological order
  std::vector<std::int64_t> timestamps;
};

/// Interactions grouped per user. Item index 0 is reserved for padding, so
/// item_ids[0] is empty and real items are 1..num_items().
struct InteractionLog {
  std::vector<UserHistory> users;  // users[k].user == k + 1
  std::vector<std::string> item_ids;

  std::size_t num_items() const { return item_ids.empty() ? 0 : item_ids.size() - 1; }
  std::size_t num_records() const;
  const UserHistory* find_user(std::string_view raw_id) const;
};

/// Parses `user item timestamp` lines (tab- or comma-separated), drops users
/// and items with fewer than min_count records until nothing changes, then
/// re-indexes survivors densely from 1 in order of first appearance.
InteractionLog parse_interactions(std::istream& in, std::size_t min_count = 5);
InteractionLog load_interactions(const std::filesystem::path& path, std::size_t min_count = 5);

/// Fixed-length left-padded window. positions[t] is the index into the
/// user's full history of items[t], or -1 for padding.
struct BehaviorSequence {
  int user = 0;
  std::vector<int> items;
  std::vector<std::uint8_t> mask;
  std::vector<int> targets;
  std::vector<int> positions;

  std::size_t length() const { return items.size(); }
  std::size_t valid_count() const;
  /// Target at the final slot: the held-out item for evaluation sequences.
  int last_target() const { return targets.back(); }
};

/// Window over `inputs` (history indices first_position...), with targets
/// shifted by one and `next` as the target of the final input. Inputs longer
/// than n keep their most recent n items. When all_targets is false only the
/// final slot carries a target.
BehaviorSequence make_sequence(int user, std::span<const int> inputs, int next, std::size_t n,
                               int first_position = 0, bool all_targets = true);

/// One sequence per user: the full history minus its last item as inputs,
/// the last item as the final target.
std::vector<BehaviorSequence> build_sequences(const InteractionLog& log, std::size_t n);

struct SplitOptions {
  // Emit every non-overlapping window of the training prefix instead of only
  // the most recent one.
  bool all_windows = false;
};

struct SplitDataset {
  std::vector<BehaviorSequence> train;
  std::vector<BehaviorSequence> validation;
  std::vector<BehaviorSequence> test;
  // Full item history per dense user index; entry 0 is unused.
  std::vector<std::vector<int>> histories;
  std::vector<std::string> user_ids;  // raw id per dense user index
  std::size_t num_items = 0;
  std::size_t max_len = 0;
  std::size_t skipped_users = 0;
};

/// Last item per user is the test target, the one before it the validation
/// target, and everything earlier forms the training prefix.
SplitDataset leave_one_out_split(const InteractionLog& log, std::size_t n,
                                 SplitOptions options = {});

// ---------------------------------------------------------------------------
// Synthetic sequences with planted pathways.

enum class Archetype { correlated, casual, drifted };

std::string_view archetype_name(Archetype a);
std::optional<Archetype> parse_archetype(std::string_view name);

struct SyntheticSpec {
  std::size_t users = 2000;
  std::size_t items = 500;
  std::size_t categories = 10;
  // Interactions per user, including the final target; drawn uniformly.
  std::size_t min_length = 20;
  std::size_t max_length = 50;
  // Relative weights of correlated, casual, drifted.
  std::array<double, 3> mix{1.0, 1.0, 1.0};
  double noise_rate = 0.5;
  // Fixed drifted run lengths; when unset the tail is a fifth of the tokens.
  std::optional<std::size_t> drift_head;
  std::optional<std::size_t> drift_tail;
  std::uint64_t seed = 17;

  void validate() const;
  int category_of(int item) const;
  std::size_t category_size() const { return items / categories; }
};

struct SyntheticUser {
  std::string id;
  Archetype archetype = Archetype::correlated;
  int category = 0;  // category of the pathway and the target
  std::vector<int> items;  // behavior tokens followed by the target
  std::vector<std::uint8_t> pivotal;  // one flag per behavior token (items minus target)
};

/// Pathway items of one user form a chain through their category with a
/// per-user stride (1 or 2), and the target is the next link after the last
/// pivotal token. Non-pivotal tokens come from other categories.
std::vector<SyntheticUser> synth_generate(const SyntheticSpec& spec);

void write_interactions(std::ostream& out, const std::vector<SyntheticUser>& users);
void write_pivotal_labels(std::ostream& out, const std::vector<SyntheticUser>& users);

/// Pivotal flags keyed by raw user id, indexed by history position.
using PivotalLabels = std::map<std::string, std::vector<std::uint8_t>>;
PivotalLabels read_pivotal_labels(std::istream& in);
PivotalLabels load_pivotal_labels(const std::filesystem::path& path);

/// Pivotal flags aligned with a sequence's slots (0 for padding and for
/// positions without a label). Empty when the user has no labels.
std::vector<std::uint8_t> align_pivotal(const BehaviorSequence& seq,
                                        const std::vector<std::uint8_t>& labels);

}  // namespace retr::data
