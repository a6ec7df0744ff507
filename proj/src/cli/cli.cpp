#include "retr/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "retr/training.hpp"

namespace retr::cli {

std::string_view build_id() { return RETR_BUILD_ID; }

namespace {

namespace fs = std::filesystem;

// Reads flat `key = value` lines as options of the chosen subcommand.
class FlatConfig : public CLI::ConfigINI {
 public:
  explicit FlatConfig(const CLI::App& app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    auto items = CLI::ConfigINI::from_config(in);
    const auto chosen = app_.get_subcommands();
    if (chosen.empty()) return items;
    for (auto& item : items) {
      if (item.parents.empty()) item.parents.push_back(chosen.front()->get_name());
    }
    return items;
  }

 private:
  const CLI::App& app_;
};

struct ModelFlags {
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t dim = 64;
  std::size_t max_len = 50;
  std::size_t ffn_hidden = 0;
  double tau = 0.8;
  double dropout = 0.0;
  std::string routing = "learned";
  std::string pooling = "global";
  std::string sampling = "st";
  std::string inference = "argmax";
};

struct Options {
  data::SyntheticSpec spec;
  std::string archetype = "mixed";
  std::string data;
  std::string labels;
  std::string out;
  std::string checkpoint;
  std::string split = "test";
  std::size_t min_count = 5;
  bool all_windows = false;
  bool export_routes = false;
  std::vector<std::string> users;
  ModelFlags model;
  training::TrainConfig train;
  eval::EvalConfig eval;
};

using Meta = std::vector<std::pair<std::string, std::string>>;

struct Dataset {
  data::InteractionLog log;
  data::SplitDataset split;
  std::optional<data::PivotalLabels> labels;
};

void add_model_flags(CLI::App& sub, ModelFlags& m) {
  sub.add_option("--blocks", m.blocks, "Pathway attention blocks");
  sub.add_option("--heads", m.heads, "Attention heads");
  sub.add_option("--dim", m.dim, "Embedding width");
  sub.add_option("--max-len", m.max_len, "Sequence window length");
  sub.add_option("--ffn-hidden", m.ffn_hidden, "Feed-forward width (0 means dim)");
  sub.add_option("--tau", m.tau, "Gumbel-Softmax temperature");
  sub.add_option("--dropout", m.dropout, "Dropout rate while training");
  sub.add_option("--routing", m.routing, "Route source")->check(CLI::IsMember({"learned", "all-ones"}));
  sub.add_option("--router-pooling", m.pooling, "Router summary pooling")
      ->check(CLI::IsMember({"global", "causal"}));
  sub.add_option("--sampling", m.sampling, "Training relaxation")->check(CLI::IsMember({"st", "soft"}));
  sub.add_option("--inference", m.inference, "Inference routes")
      ->check(CLI::IsMember({"argmax", "sample"}));
}

void add_eval_flags(CLI::App& sub, eval::EvalConfig& e) {
  sub.add_option("--negatives", e.negatives, "Sampled negatives per user");
  sub.add_option("--k", e.ks, "Cutoffs for HR and NDCG")->delimiter(',');
  sub.add_option("--eval-seed", e.seed, "Seed for evaluation negatives");
  sub.add_option("--eval-batch-size", e.batch_size, "Sequences per evaluation batch");
}

void add_data_flags(CLI::App& sub, Options& o) {
  sub.add_option("--data", o.data, "Interaction file (user, item, timestamp)")->required();
  sub.add_option("--labels", o.labels, "Pivotal label sidecar for route recovery");
  sub.add_option("--min-count", o.min_count, "Drop users and items with fewer records");
}

model::ModelConfig to_config(const ModelFlags& m, std::size_t num_items) {
  model::ModelConfig c;
  c.num_items = num_items;
  c.blocks = m.blocks;
  c.heads = m.heads;
  c.dim = m.dim;
  c.max_len = m.max_len;
  c.ffn_hidden = m.ffn_hidden;
  c.tau = m.tau;
  c.dropout = m.dropout;
  c.routing = *model::parse_routing(m.routing);
  c.pooling = *model::parse_pooling(m.pooling);
  c.relaxation = *model::parse_relaxation(m.sampling);
  c.inference = *model::parse_inference_route(m.inference);
  return c;
}

bool given(const CLI::App& sub, const std::string& flag) { return sub.get_option(flag)->count() > 0; }

// Checkpoint config with any explicitly given model flags applied.
model::ModelConfig apply_overrides(model::ModelConfig c, const CLI::App& sub, const ModelFlags& m) {
  if (given(sub, "--blocks")) c.blocks = m.blocks;
  if (given(sub, "--heads")) c.heads = m.heads;
  if (given(sub, "--dim")) c.dim = m.dim;
  if (given(sub, "--max-len")) c.max_len = m.max_len;
  if (given(sub, "--ffn-hidden")) c.ffn_hidden = m.ffn_hidden;
  if (given(sub, "--tau")) c.tau = m.tau;
  if (given(sub, "--dropout")) c.dropout = m.dropout;
  if (given(sub, "--routing")) c.routing = *model::parse_routing(m.routing);
  if (given(sub, "--router-pooling")) c.pooling = *model::parse_pooling(m.pooling);
  if (given(sub, "--sampling")) c.relaxation = *model::parse_relaxation(m.sampling);
  if (given(sub, "--inference")) c.inference = *model::parse_inference_route(m.inference);
  return c;
}

std::string format_value(const std::string& v) {
  const bool bare = !v.empty() && std::none_of(v.begin(), v.end(), [](char c) {
    return c == ' ' || c == '\t' || c == '#' || c == ';' || c == '"' || c == '=';
  });
  if (bare) return v;
  std::string q = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') q += '\\';
    q += c;
  }
  return q + '"';
}

// Every option of the subcommand as a loadable `key = value` line, followed by
// resolved settings as comments.
void write_manifest(const fs::path& dir, const CLI::App& sub, const Meta& resolved) {
  fs::create_directories(dir);
  std::ofstream f(dir / "manifest.txt");
  if (!f) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  f << "# retr " << sub.get_name() << '\n';
  f << "# build: " << build_id() << '\n';
  for (const auto* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name.empty()) continue;
    std::vector<std::string> values;
    if (opt->get_expected_min() == 0) {
      const bool on = opt->count() ? opt->as<bool>() : opt->get_default_str() == "true";
      values.push_back(on ? "true" : "false");
    } else if (opt->count()) {
      values = opt->results();
    } else {
      std::string d = opt->get_default_str();
      if (d.size() >= 2 && d.front() == '[' && d.back() == ']') {
        std::stringstream ss(d.substr(1, d.size() - 2));
        for (std::string item; std::getline(ss, item, ',');) values.push_back(item);
      } else if (!d.empty()) {
        values.push_back(d);
      }
    }
    if (values.empty() || (values.size() == 1 && values[0].empty())) continue;
    f << name << " =";
    if (opt->get_items_expected_max() > 1) {
      for (const auto& v : values) f << ' ' << format_value(v);
    } else {
      f << ' ' << format_value(values.back());
    }
    f << '\n';
  }
  for (const auto& [k, v] : resolved) f << "# " << k << " = " << v << '\n';
}

Dataset load_dataset(const Options& o, std::size_t max_len) {
  if (!fs::exists(o.data)) throw UsageError("dataset not found: " + o.data);
  Dataset d;
  d.log = data::load_interactions(o.data, o.min_count);
  data::SplitOptions split_options;
  split_options.all_windows = o.all_windows;
  d.split = data::leave_one_out_split(d.log, max_len, split_options);
  if (!o.labels.empty()) {
    if (!fs::exists(o.labels)) throw UsageError("label file not found: " + o.labels);
    d.labels = data::load_pivotal_labels(o.labels);
  }
  return d;
}

const std::vector<data::BehaviorSequence>& pick_split(const data::SplitDataset& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "validation") return s.validation;
  return s.test;
}

Meta dataset_meta(const Dataset& d) {
  return {{"data.users", std::to_string(d.log.users.size())},
          {"data.items", std::to_string(d.split.num_items)},
          {"data.train_sequences", std::to_string(d.split.train.size())},
          {"data.skipped_users", std::to_string(d.split.skipped_users)}};
}

Meta concat(Meta a, const Meta& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

int cmd_synth(const CLI::App& sub, Options& o, std::ostream& out) {
  if (o.archetype == "mixed") {
    o.spec.mix = {1.0, 1.0, 1.0};
  } else {
    o.spec.mix = {0.0, 0.0, 0.0};
    o.spec.mix[static_cast<std::size_t>(*data::parse_archetype(o.archetype))] = 1.0;
  }
  o.spec.validate();
  const fs::path dir = o.out;
  write_manifest(dir, sub, {});
  const auto users = data::synth_generate(o.spec);
  std::ofstream interactions(dir / "interactions.tsv"), labels(dir / "pivotal.tsv");
  if (!interactions || !labels) throw std::runtime_error("cannot write into " + dir.string());
  data::write_interactions(interactions, users);
  data::write_pivotal_labels(labels, users);
  std::size_t records = 0;
  for (const auto& u : users) records += u.items.size();
  out << "wrote " << records << " interactions for " << users.size() << " users to "
      << (dir / "interactions.tsv").string() << " and labels to " << (dir / "pivotal.tsv").string()
      << '\n';
  return 0;
}

int cmd_train(const CLI::App& sub, Options& o, std::ostream& out) {
  o.train.validate();
  o.eval.validate();
  auto config = to_config(o.model, 1);
  config.validate();
  const Dataset d = load_dataset(o, config.max_len);
  config.num_items = d.split.num_items;
  config.validate();

  const fs::path dir = o.out;
  write_manifest(dir, sub, concat(config.to_metadata(), dataset_meta(d)));

  std::ofstream epochs(dir / "epochs.csv");
  if (!epochs) throw std::runtime_error("cannot write " + (dir / "epochs.csv").string());
  training::write_epoch_header(epochs, config.blocks);
  auto init = model::ModelParams<float>::init(config, o.train.seed);
  auto result = training::train(config, init, d.split, o.train, o.eval, [&](const training::EpochRecord& r) {
    training::write_epoch_row(epochs, r);
    epochs.flush();
    out << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.train_loss
        << "  val MRR " << r.val_mrr << "  val HR@10 " << r.val_hr10 << std::defaultfloat << '\n';
  });

  auto archive = result.best.to_archive(config);
  archive.metadata.emplace_back("data.min_count", std::to_string(o.min_count));
  write_archive(dir / "checkpoint.bin", archive);

  const auto report = eval::evaluate(config, result.best, d.split.test, d.split, o.eval,
                                     d.labels ? &*d.labels : nullptr);
  std::ofstream csv(dir / "eval.csv");
  report.write_csv(csv);
  out << "stopped: " << result.stop_reason << "; best epoch " << result.best_epoch << '\n';
  out << "test split\n";
  report.write_text(out);
  return 0;
}

struct Loaded {
  Dataset data;
  model::ModelConfig config;
  model::ModelParams<float> params;
};

Loaded load_checkpoint(const CLI::App& sub, Options& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(o.checkpoint)) throw UsageError("checkpoint not found: " + o.checkpoint);
  const auto archive = read_archive(fs::path(o.checkpoint));
  const auto saved = model::ModelConfig::from_metadata(archive.metadata);
  if (!given(sub, "--min-count")) {
    if (auto m = archive.meta("data.min_count")) o.min_count = std::stoul(*m);
  }
  auto requested = apply_overrides(saved, sub, o.model);
  auto diffs = model::structural_differences(saved, requested);
  Dataset d = load_dataset(o, requested.max_len);
  if (d.split.num_items != saved.num_items) {
    diffs.push_back("num_items: " + std::to_string(saved.num_items) + " vs " +
                    std::to_string(d.split.num_items) + " in the dataset");
  }
  if (!diffs.empty()) {
    std::string msg = "configuration does not match checkpoint (checkpoint vs requested):";
    for (const auto& line : diffs) msg += "\n  " + line;
    throw model::ConfigError(msg);
  }
  requested.validate();
  auto params = model::ModelParams<float>::from_archive(archive, requested);
  return {std::move(d), requested, std::move(params)};
}

// Sequence of the given raw user id in the chosen split.
const data::BehaviorSequence& find_sequence(const Dataset& d, const std::vector<data::BehaviorSequence>& seqs,
                                            const std::string& raw_id, const std::string& split) {
  const auto* user = d.log.find_user(raw_id);
  if (!user) throw UsageError("unknown user id '" + raw_id + "'");
  for (const auto& s : seqs) {
    if (s.user == user->user) return s;
  }
  throw UsageError("user '" + raw_id + "' has no sequence in the " + split + " split");
}

model::ForwardTrace<float> trace_one(const Loaded& l, const data::BehaviorSequence& seq,
                                     const eval::EvalConfig& e, model::Batch& batch) {
  const data::BehaviorSequence* one[] = {&seq};
  batch = model::Batch::from(one);
  Rng rng = make_stream(e.seed, "eval-gumbel");
  model::ForwardOptions options;
  options.rng = &rng;
  options.record_attention = true;
  return model::forward(batch, l.params, l.config, options);
}

std::string safe_name(const std::string& id) {
  std::string s = id;
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

void export_routes(const fs::path& dir, const Loaded& l, const data::BehaviorSequence& seq,
                   const std::string& raw_id, const eval::EvalConfig& e) {
  model::Batch batch;
  const auto trace = trace_one(l, seq, e, batch);
  fs::create_directories(dir);
  std::ofstream routes(dir / ("user_" + safe_name(raw_id) + "_routes.csv"));
  std::ofstream attention(dir / ("user_" + safe_name(raw_id) + "_attention.csv"));
  routes << std::setprecision(9) << "layer,pos,hard,soft\n";
  attention << std::setprecision(9) << "layer,head,query_pos,key_pos,weight\n";
  const std::size_t n = batch.len;
  for (std::size_t layer = 0; layer < trace.routes.size(); ++layer) {
    const auto& r = trace.routes[layer];
    for (std::size_t t = 0; t < n; ++t) {
      if (!batch.mask[t]) continue;
      routes << layer + 1 << ',' << seq.positions[t] << ',' << r.hard[t] << ',' << r.soft.data()[t] << '\n';
    }
    for (std::size_t h = 0; h < trace.attention[layer].size(); ++h) {
      const auto& w = trace.attention[layer][h];
      for (std::size_t q = 0; q < n; ++q) {
        if (!batch.mask[q]) continue;
        for (std::size_t k = 0; k <= q; ++k) {
          if (!batch.mask[k]) continue;
          attention << layer + 1 << ',' << h << ',' << seq.positions[q] << ',' << seq.positions[k] << ','
                    << w[q * n + k] << '\n';
        }
      }
    }
  }
}

int cmd_eval(const CLI::App& sub, Options& o, std::ostream& out) {
  o.eval.validate();
  if (o.export_routes && o.out.empty()) throw UsageError("--export-routes needs --out");
  if (o.export_routes && o.users.empty()) throw UsageError("--export-routes needs --users");
  const auto l = load_checkpoint(sub, o);
  const auto& seqs = pick_split(l.data.split, o.split);
  std::vector<const data::BehaviorSequence*> chosen;
  for (const auto& id : o.users) chosen.push_back(&find_sequence(l.data, seqs, id, o.split));
  if (!o.out.empty()) write_manifest(o.out, sub, concat(l.config.to_metadata(), dataset_meta(l.data)));

  const auto report = eval::evaluate(l.config, l.params, seqs, l.data.split, o.eval,
                                     l.data.labels ? &*l.data.labels : nullptr);
  out << o.split << " split\n";
  report.write_text(out);
  if (!o.out.empty()) {
    std::ofstream csv(fs::path(o.out) / "eval.csv");
    report.write_csv(csv);
  }
  if (o.export_routes) {
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      export_routes(fs::path(o.out) / "routes", l, *chosen[i], o.users[i], o.eval);
    }
    out << "route and attention CSVs written to " << (fs::path(o.out) / "routes").string() << '\n';
  }
  return 0;
}

int cmd_inspect(const CLI::App& sub, Options& o, std::ostream& out) {
  const auto l = load_checkpoint(sub, o);
  const auto& seqs = pick_split(l.data.split, o.split);
  for (const auto& id : o.users) {
    const auto& seq = find_sequence(l.data, seqs, id, o.split);
    model::Batch batch;
    const auto trace = trace_one(l, seq, o.eval, batch);
    std::vector<std::uint8_t> pivotal;
    if (l.data.labels) {
      auto it = l.data.labels->find(id);
      if (it != l.data.labels->end()) pivotal = data::align_pivotal(seq, it->second);
    }
    out << "user " << id << " (" << o.split << " split, " << seq.valid_count() << " positions)\n";
    out << "pos\titem";
    for (std::size_t b = 0; b < trace.routes.size(); ++b) out << "\tl" << b + 1;
    if (!pivotal.empty()) out << "\tpivotal";
    out << '\n';
    std::size_t agree = 0;
    for (std::size_t t = 0; t < batch.len; ++t) {
      if (!batch.mask[t]) continue;
      out << seq.positions[t] << '\t' << l.data.log.item_ids[static_cast<std::size_t>(seq.items[t])];
      for (const auto& r : trace.routes) out << '\t' << r.hard[t];
      if (!pivotal.empty()) {
        out << '\t' << static_cast<int>(pivotal[t]);
        agree += (trace.routes.back().hard[t] == 1.0f) == (pivotal[t] == 1);
      }
      out << '\n';
    }
    const auto keep = model::keep_rates(trace, batch);
    out << std::fixed << std::setprecision(4);
    for (std::size_t b = 0; b < keep.size(); ++b) out << "keep rate, block " << b + 1 << ": " << keep[b] << '\n';
    if (!pivotal.empty()) {
      const auto rec = eval::route_recovery(trace, batch, {pivotal});
      out << "pivotal keep rate: " << rec.pivotal_rate() << '\n';
      out << "non-pivotal keep rate: " << rec.other_rate() << '\n';
      out << "pivotal agreement: " << static_cast<double>(agree) / static_cast<double>(seq.valid_count())
          << '\n';
    }
    out << std::defaultfloat << '\n';
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"RETR sequential recommender with pathway attention", "retr"};
  app.set_version_flag("--version", std::string(build_id()));
  app.set_config("--config", "", "Flat key = value file; flags on the command line take precedence");
  app.config_formatter(std::make_shared<FlatConfig>(app));
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  Options o;
  o.spec.seed = 17;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with planted pathways");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--seed", o.spec.seed, "Generator seed");
  synth->add_option("--users", o.spec.users, "Number of users");
  synth->add_option("--items", o.spec.items, "Catalog size");
  synth->add_option("--categories", o.spec.categories, "Disjoint item categories");
  synth->add_option("--min-length", o.spec.min_length, "Shortest history, target included");
  synth->add_option("--max-length", o.spec.max_length, "Longest history, target included");
  synth->add_option("--noise-rate", o.spec.noise_rate, "Fraction of non-pivotal tokens");
  synth->add_option("--archetype", o.archetype, "User archetype")
      ->check(CLI::IsMember({"mixed", "correlated", "casual", "drifted"}));
  synth->add_option("--drift-head", o.spec.drift_head, "Fixed length of the drifted head run");
  synth->add_option("--drift-tail", o.spec.drift_tail, "Fixed length of the drifted tail run");

  auto* train = app.add_subcommand("train", "Train on a dataset and save the best checkpoint");
  add_data_flags(*train, o);
  train->add_option("--out", o.out, "Artifact directory")->required();
  train->add_option("--seed", o.train.seed, "Initialization, shuffling and sampling seed");
  train->add_flag("--all-windows", o.all_windows, "Train on every window of each history");
  add_model_flags(*train, o.model);
  train->add_option("--lr", o.train.lr, "Adam learning rate");
  train->add_option("--batch-size", o.train.batch_size, "Sequences per step");
  train->add_option("--epochs", o.train.max_epochs, "Maximum epochs");
  train->add_option("--patience", o.train.patience, "Epochs without validation MRR gain before stopping");
  add_eval_flags(*train, o.eval);

  auto* evaluate = app.add_subcommand("eval", "Evaluate a checkpoint with sampled negatives");
  add_data_flags(*evaluate, o);
  evaluate->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  evaluate->add_option("--out", o.out, "Artifact directory for eval.csv and routes/");
  evaluate->add_option("--split", o.split, "Sequences to evaluate")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  evaluate->add_flag("--export-routes", o.export_routes, "Write route and attention CSVs for --users");
  evaluate->add_option("--users", o.users, "Raw user ids for route export")->delimiter(',');
  add_model_flags(*evaluate, o.model);
  add_eval_flags(*evaluate, o.eval);

  auto* inspect = app.add_subcommand("inspect-routes", "Print per-block routes for chosen users");
  add_data_flags(*inspect, o);
  inspect->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  inspect->add_option("--split", o.split, "Sequences to inspect")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  inspect->add_option("--users", o.users, "Raw user ids")->delimiter(',')->required();
  add_model_flags(*inspect, o.model);
  inspect->add_option("--eval-seed", o.eval.seed, "Seed for sampled inference routes");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(*synth, o, out);
    if (train->parsed()) return cmd_train(*train, o, out);
    if (evaluate->parsed()) return cmd_eval(*evaluate, o, out);
    return cmd_inspect(*inspect, o, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace retr::cli
