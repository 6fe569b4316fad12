#include "tctrans/model.hpp"

#include <cmath>
#include <sstream>

namespace tct {

namespace {

constexpr double kNormEps = 1e-5;

int group_count(int channels) {
  int g = std::min(8, channels);
  while (g > 1 && channels % g != 0) --g;
  return g;
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  if (base_width < 1) throw ConfigError("model: base_width must be >= 1");
  if (num_enc_layers < 1) throw ConfigError("model: num_enc_layers must be >= 1");
  if (num_transformer_layers < 0) {
    throw ConfigError("model: num_transformer_layers must be >= 0");
  }
  if (num_heads < 1) throw ConfigError("model: num_heads must be >= 1");
  if (mlp_ratio <= 0) throw ConfigError("model: mlp_ratio must be positive");
  const int div = 1 << num_enc_layers;
  if (input_h % div != 0 || input_w % div != 0) {
    std::ostringstream os;
    os << "model: input " << input_h << "x" << input_w << " not divisible by 2^"
       << num_enc_layers;
    throw ConfigError(os.str());
  }
  if (bottleneck_channels() % num_heads != 0) {
    std::ostringstream os;
    os << "model: bottleneck channels " << bottleneck_channels()
       << " not divisible by num_heads " << num_heads;
    throw ConfigError(os.str());
  }
  if (int(mlp_ratio * bottleneck_channels()) < 1) {
    throw ConfigError("model: mlp hidden width must be >= 1");
  }
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x) const {
  Tensor<T> h = conv2d(x, conv1_w, conv1_b, 1, 1);
  h = relu(group_norm(h, groups, gn1_g, gn1_b, T(kNormEps)));
  h = conv2d(h, conv2_w, conv2_b, 1, 1);
  h = relu(group_norm(h, groups, gn2_g, gn2_b, T(kNormEps)));
  Tensor<T> shortcut = proj_w.defined() ? conv2d(x, proj_w, proj_b, 1, 0) : x;
  return add(shortcut, h);
}

template <typename T>
Tensor<T> TransformerLayer<T>::forward(const Tensor<T>& z,
                                       std::vector<Tensor<T>>* attn_sink) const {
  const T att_scale = T(1) / T(std::sqrt(double(head_dim)));
  Tensor<T> zn = layer_norm(z, ln1_g, ln1_b, T(kNormEps));
  Tensor<T> heads_cat;
  for (int h = 0; h < heads; ++h) {
    Tensor<T> q = add_rowvec(matmul(zn, wq[size_t(h)]), bq[size_t(h)]);
    Tensor<T> k = add_rowvec(matmul(zn, wk[size_t(h)]), bk[size_t(h)]);
    Tensor<T> v = add_rowvec(matmul(zn, wv[size_t(h)]), bv[size_t(h)]);
    Tensor<T> probs = attention_probs(q, k, att_scale);
    if (attn_sink) attn_sink->push_back(probs.detached());
    Tensor<T> out = matmul(probs, v);
    heads_cat = h == 0 ? out : concat_lastdim(heads_cat, out);
  }
  Tensor<T> mhsa = add_rowvec(matmul(heads_cat, wo), bo);
  Tensor<T> zhat = add(mhsa, z);

  Tensor<T> m = layer_norm(zhat, ln2_g, ln2_b, T(kNormEps));
  m = relu(add_rowvec(matmul(m, fc1_w), fc1_b));
  m = add_rowvec(matmul(m, fc2_w), fc2_b);
  return add(m, zhat);
}

template <typename T>
TCtransModel<T>::TCtransModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, 0x6d6f64656cull);

  auto reg = [this](const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
  };
  auto conv_w = [&](const std::string& name, int cout, int cin, int k) {
    T std_dev = T(std::sqrt(2.0 / (double(cin) * k * k)));
    return reg(name, Tensor<T>::randn({cout, cin, k, k}, rng, std_dev));
  };
  auto linear_w = [&](const std::string& name, int in, int out) {
    T std_dev = T(std::sqrt(2.0 / double(in)));
    return reg(name, Tensor<T>::randn({in, out}, rng, std_dev));
  };
  auto zeros = [&](const std::string& name, int n) {
    return reg(name, Tensor<T>::zeros({n}));
  };
  auto ones = [&](const std::string& name, int n) {
    return reg(name, Tensor<T>::full({n}, T(1)));
  };
  auto make_block = [&](const std::string& prefix, int cin, int cout) {
    ResidualBlock<T> b;
    b.groups = group_count(cout);
    b.conv1_w = conv_w(prefix + ".conv1.w", cout, cin, 3);
    b.conv1_b = zeros(prefix + ".conv1.b", cout);
    b.gn1_g = ones(prefix + ".gn1.g", cout);
    b.gn1_b = zeros(prefix + ".gn1.b", cout);
    b.conv2_w = conv_w(prefix + ".conv2.w", cout, cout, 3);
    b.conv2_b = zeros(prefix + ".conv2.b", cout);
    b.gn2_g = ones(prefix + ".gn2.g", cout);
    b.gn2_b = zeros(prefix + ".gn2.b", cout);
    if (cin != cout) {
      b.proj_w = conv_w(prefix + ".proj.w", cout, cin, 1);
      b.proj_b = zeros(prefix + ".proj.b", cout);
    }
    return b;
  };

  const int L = cfg_.num_enc_layers;
  int cin = cfg_.in_channels;
  for (int i = 1; i <= L; ++i) {
    const int width = cfg_.base_width << (i - 1);
    std::string prefix = "enc" + std::to_string(i);
    enc_blocks_.push_back(make_block(prefix, cin, width));
    down_w_.push_back(conv_w(prefix + ".down.w", width, width, 3));
    down_b_.push_back(zeros(prefix + ".down.b", width));
    cin = width;
  }

  const int d = cfg_.bottleneck_channels();
  pos_emb_ = reg("pos_embedding",
                 Tensor<T>::randn({cfg_.num_tokens(), d}, rng, T(0.02)));

  const int dh = d / cfg_.num_heads;
  const int hidden = int(cfg_.mlp_ratio * d);
  for (int j = 0; j < cfg_.num_transformer_layers; ++j) {
    std::string prefix = "tf" + std::to_string(j);
    TransformerLayer<T> layer;
    layer.heads = cfg_.num_heads;
    layer.head_dim = dh;
    layer.ln1_g = ones(prefix + ".ln1.g", d);
    layer.ln1_b = zeros(prefix + ".ln1.b", d);
    for (int h = 0; h < cfg_.num_heads; ++h) {
      std::string hp = prefix + ".head" + std::to_string(h);
      layer.wq.push_back(linear_w(hp + ".wq", d, dh));
      layer.bq.push_back(zeros(hp + ".bq", dh));
      layer.wk.push_back(linear_w(hp + ".wk", d, dh));
      layer.bk.push_back(zeros(hp + ".bk", dh));
      layer.wv.push_back(linear_w(hp + ".wv", d, dh));
      layer.bv.push_back(zeros(hp + ".bv", dh));
    }
    layer.wo = linear_w(prefix + ".wo", d, d);
    layer.bo = zeros(prefix + ".bo", d);
    layer.ln2_g = ones(prefix + ".ln2.g", d);
    layer.ln2_b = zeros(prefix + ".ln2.b", d);
    layer.fc1_w = linear_w(prefix + ".fc1.w", d, hidden);
    layer.fc1_b = zeros(prefix + ".fc1.b", hidden);
    layer.fc2_w = linear_w(prefix + ".fc2.w", hidden, d);
    layer.fc2_b = zeros(prefix + ".fc2.b", d);
    tf_layers_.push_back(std::move(layer));
  }

  for (int r = 1; r <= L; ++r) {
    const int out_w = cfg_.base_width << (L - r);
    const int in_w = r == 1 ? d : (cfg_.base_width << (L - r + 1)) + (cfg_.base_width << (L - r));
    dec_blocks_.push_back(make_block("dec" + std::to_string(r), in_w, out_w));
  }

  head_w_ = conv_w("head.w", 1, cfg_.base_width, 1);
  head_b_ = zeros("head.b", 1);
}

template <typename T>
Tensor<T> TCtransModel<T>::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigError("model: no parameter named '" + name + "'");
}

template <typename T>
int64_t TCtransModel<T>::num_scalars() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void TCtransModel<T>::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
EncodeResult<T> TCtransModel<T>::encode(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_h ||
      x.dim(3) != cfg_.input_w) {
    throw ShapeError("encode: expected input [B," + std::to_string(cfg_.in_channels) +
                     "," + std::to_string(cfg_.input_h) + "," +
                     std::to_string(cfg_.input_w) + "], got " + shape_str(x.shape()));
  }
  EncodeResult<T> res;
  Tensor<T> cur = x;
  const int L = cfg_.num_enc_layers;
  for (int i = 0; i < L; ++i) {
    cur = enc_blocks_[size_t(i)].forward(cur);
    if (i + 1 < L) res.skips.push_back(cur);
    cur = conv2d(cur, down_w_[size_t(i)], down_b_[size_t(i)], 2, 1);
  }
  res.bottleneck = cur;
  return res;
}

template <typename T>
TokenSequence<T> TCtransModel<T>::tokenize(const Tensor<T>& e) const {
  if (e.rank() != 4 || e.dim(0) != 1 || e.dim(2) != cfg_.bottleneck_h() ||
      e.dim(3) != cfg_.bottleneck_w()) {
    throw ShapeError("tokenize: expected bottleneck [1,C," +
                     std::to_string(cfg_.bottleneck_h()) + "," +
                     std::to_string(cfg_.bottleneck_w()) + "], got " +
                     shape_str(e.shape()));
  }
  TokenSequence<T> seq;
  seq.tokens = nchw_to_tokens(e);
  seq.pos_embedding = pos_emb_;
  seq.z0 = add(seq.tokens, pos_emb_);
  return seq;
}

template <typename T>
Tensor<T> TCtransModel<T>::transformer_encode(const Tensor<T>& z0) const {
  Tensor<T> z = z0;
  for (const auto& layer : tf_layers_) {
    z = layer.forward(z, capture_attention ? &attention : nullptr);
  }
  return tokens_to_nchw(z, cfg_.bottleneck_h(), cfg_.bottleneck_w());
}

template <typename T>
PredictionBundle<T> TCtransModel<T>::decode(const Tensor<T>& e_star,
                                            const std::vector<Tensor<T>>& skips) const {
  const int L = cfg_.num_dec_layers();
  if (int(skips.size()) != L - 1) {
    throw ShapeError("decode: expected " + std::to_string(L - 1) + " skips, got " +
                     std::to_string(skips.size()));
  }
  PredictionBundle<T> bundle;
  Tensor<T> cur = e_star;
  for (int r = 1; r <= L; ++r) {
    cur = upsample2x_nearest(cur);
    if (r >= 2) cur = concat_channels(cur, skips[size_t(L - r)]);
    cur = dec_blocks_[size_t(r - 1)].forward(cur);
    cur.retain_grad();
    bundle.features.push_back(cur);
  }
  bundle.y_hat = conv2d(cur, head_w_, head_b_, 1, 0);
  return bundle;
}

template <typename T>
Tensor<T> TCtransModel<T>::forward_single(const Tensor<T>& x,
                                          PredictionBundle<T>& bundle) const {
  EncodeResult<T> enc = encode(x);
  TokenSequence<T> seq = tokenize(enc.bottleneck);
  Tensor<T> e_star = transformer_encode(seq.z0);
  bundle = decode(e_star, enc.skips);
  return bundle.y_hat;
}

template <typename T>
PredictionBundle<T> TCtransModel<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4) throw ShapeError("forward: expected NCHW input");
  if (capture_attention) attention.clear();
  const int b = x.dim(0);
  if (b == 1) {
    PredictionBundle<T> bundle;
    forward_single(x, bundle);
    return bundle;
  }
  // Larger batches run sample by sample; the transformer tokens are per-sample.
  PredictionBundle<T> merged;
  for (int bi = 0; bi < b; ++bi) {
    PredictionBundle<T> one;
    forward_single(slice_batch(x, bi), one);
    if (bi == 0) {
      merged = std::move(one);
    } else {
      merged.y_hat = concat_batch(merged.y_hat, one.y_hat);
      for (size_t r = 0; r < merged.features.size(); ++r) {
        merged.features[r] = concat_batch(merged.features[r], one.features[r]);
      }
    }
  }
  return merged;
}

template <typename T>
Tensor<T> stack_input(const std::vector<const Plane*>& channels) {
  if (channels.empty()) throw ShapeError("stack_input: no channels");
  const int h = channels[0]->h, w = channels[0]->w;
  std::vector<T> data;
  data.reserve(channels.size() * size_t(h) * w);
  for (const Plane* p : channels) {
    if (p->h != h || p->w != w) throw ShapeError("stack_input: plane size mismatch");
    for (float v : p->v) data.push_back(T(v));
  }
  return Tensor<T>::from_data({1, int(channels.size()), h, w}, std::move(data));
}

template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template struct TransformerLayer<float>;
template struct TransformerLayer<double>;
template class TCtransModel<float>;
template class TCtransModel<double>;
template Tensor<float> stack_input<float>(const std::vector<const Plane*>&);
template Tensor<double> stack_input<double>(const std::vector<const Plane*>&);

}  // namespace tct
