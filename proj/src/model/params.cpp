#include <cmath>

#include "retr/model.hpp"

namespace retr::model {
namespace {

template <typename T>
Tensor<T> uniform(Shape shape, double limit, Rng& rng) {
  std::uniform_real_distribution<double> d(-limit, limit);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return uniform<T>({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

template <typename T>
Tensor<T> zeros(std::size_t n) {
  return Tensor<T>::zeros({n}, true);
}

template <typename T>
Tensor<T> ones(std::size_t n) {
  return Tensor<T>::full({n}, T(1), true);
}

template <typename T, typename Params, typename Visit>
void visit_params(Params& p, Visit&& visit) {
  visit("item_embedding", p.item_embedding);
  visit("position_embedding", p.position_embedding);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "block" + std::to_string(l) + ".";
    for (std::size_t m = 0; m < b.wq.size(); ++m) {
      const std::string head = ".head" + std::to_string(m);
      visit(pre + "attn.query" + head, b.wq[m]);
      visit(pre + "attn.key" + head, b.wk[m]);
      visit(pre + "attn.value" + head, b.wv[m]);
    }
    visit(pre + "attn.out.weight", b.wo);
    visit(pre + "attn.out.bias", b.bo);
    visit(pre + "ln1.gamma", b.ln1_gamma);
    visit(pre + "ln1.beta", b.ln1_beta);
    visit(pre + "ffn.w1", b.ffn_w1);
    visit(pre + "ffn.b1", b.ffn_b1);
    visit(pre + "ffn.w2", b.ffn_w2);
    visit(pre + "ffn.b2", b.ffn_b2);
    visit(pre + "ln2.gamma", b.ln2_gamma);
    visit(pre + "ln2.beta", b.ln2_beta);
    visit(pre + "router.global.weight", b.router_w);
    visit(pre + "router.global.bias", b.router_b);
    visit(pre + "router.logit.weight", b.logit_w);
    visit(pre + "router.logit.bias", b.logit_b);
  }
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_stream(seed, "init");
  const std::size_t d = config.dim, dh = config.head_dim(), f = config.ffn_width();
  ModelParams p;
  {
    auto table = uniform<T>({config.num_items + 1, d}, 0.01, rng);
    auto v = table.mutable_data();
    std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d), T(0));
    p.item_embedding = table;
  }
  p.position_embedding = uniform<T>({config.max_len, d}, 0.01, rng);
  for (std::size_t l = 0; l < config.blocks; ++l) {
    BlockParams<T> b;
    for (std::size_t m = 0; m < config.heads; ++m) {
      b.wq.push_back(xavier<T>(d, dh, rng));
      b.wk.push_back(xavier<T>(d, dh, rng));
      b.wv.push_back(xavier<T>(d, dh, rng));
    }
    b.wo = xavier<T>(d, d, rng);
    b.bo = zeros<T>(d);
    b.ln1_gamma = ones<T>(d);
    b.ln1_beta = zeros<T>(d);
    b.ffn_w1 = xavier<T>(d, f, rng);
    b.ffn_b1 = zeros<T>(f);
    b.ffn_w2 = xavier<T>(f, d, rng);
    b.ffn_b2 = zeros<T>(d);
    b.ln2_gamma = ones<T>(d);
    b.ln2_beta = zeros<T>(d);
    b.router_w = xavier<T>(d, d, rng);
    b.router_b = zeros<T>(d);
    b.logit_w = xavier<T>(d, 2, rng);
    b.logit_b = zeros<T>(2);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  visit_params<T>(*this, [&](std::string name, Tensor<T>& t) { out.emplace_back(std::move(name), &t); });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  visit_params<T>(*this,
                  [&](std::string name, const Tensor<T>& t) { out.emplace_back(std::move(name), &t); });
  return out;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.blocks.resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    out.blocks[l].wq.resize(blocks[l].wq.size());
    out.blocks[l].wk.resize(blocks[l].wk.size());
    out.blocks[l].wv.resize(blocks[l].wv.size());
  }
  auto src = named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& t = *src[i].second;
    std::vector<U> v(t.data().begin(), t.data().end());
    *dst[i].second = Tensor<U>::from(t.shape(), std::move(v), true);
  }
  return out;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& [name, t] : named()) t->zero_grad();
}

template <typename T>
void ModelParams<T>::assign(const ModelParams& other) {
  auto dst = named();
  auto src = other.named();
  if (dst.size() != src.size()) throw ContractError("parameter sets differ in size");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].second->shape() != src[i].second->shape()) {
      throw DimensionError("parameter " + dst[i].first + " has shape " +
                           shape_to_string(dst[i].second->shape()) + " but source has " +
                           shape_to_string(src[i].second->shape()));
    }
    auto out = dst[i].second->mutable_data();
    auto in = src[i].second->data();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

template <typename T>
Archive ModelParams<T>::to_archive(const ModelConfig& config) const {
  Archive a;
  a.metadata = config.to_metadata();
  for (const auto& [name, t] : named()) {
    a.arrays.push_back({name, t->shape(), std::vector<T>(t->data().begin(), t->data().end())});
  }
  return a;
}

template <typename T>
ModelParams<T> ModelParams<T>::from_archive(const Archive& archive, const ModelConfig& config) {
  auto p = init(config, 0);
  for (auto& [name, t] : p.named()) {
    const auto* arr = archive.find(name);
    if (!arr) throw ArchiveError("checkpoint lacks parameter '" + name + "'");
    if (arr->shape != t->shape()) {
      throw ArchiveError("parameter '" + name + "' has shape " + shape_to_string(arr->shape) +
                         " in the checkpoint but the model expects " + shape_to_string(t->shape()));
    }
    *t = Tensor<T>::from(arr->shape, arr->template as<T>(), true);
  }
  return p;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

}  // namespace retr::model
