#include "tabledet/model.hpp"

#include <cmath>

#include "tabledet/rng.hpp"

namespace tabledet {

void ModelConfig::validate() const {
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if ((d_model / heads) % 4 != 0)
    throw ConfigError("d_model/heads must be divisible by 4 for position bands");
  if (queries < 1 || roi_size < 1) throw ConfigError("queries and roi_size must be >= 1");
  if (backbone_channels.size() != 2) throw ConfigError("expected two backbone stage widths");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 4;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.queries = 4;
  c.roi_size = 3;
  c.backbone_channels = {4, 8};
  c.ffn_dim = 32;
  c.aligner_channels = 8;
  c.aligner_hidden = 16;
  return c;
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ContractError("duplicate parameter: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

std::vector<Tensor*> ParamStore::tensors() {
  std::vector<Tensor*> out;
  out.reserve(items_.size());
  for (auto& [n, t] : items_) out.push_back(&t);
  return out;
}

long ParamStore::total_size() const {
  long n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

namespace {

Tensor init_weight(Rng& rng, std::vector<int> shape, int fan_in, int fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(shape);
  for (long i = 0; i < t.size(); ++i) t.v[i] = rng.uniform(-a, a);
  return t;
}

}  // namespace

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = Rng::derive(seed, 0x30DE1);
  const int d = cfg_.d_model;
  auto lin = [&](const std::string& name, int in, int out) {
    params_.add(name + ".w", init_weight(rng, {in, out}, in, out));
    params_.add(name + ".b", Tensor::zeros({out}));
  };
  auto convp = [&](const std::string& name, int cin, int cout, int k) {
    params_.add(name + ".w",
                init_weight(rng, {cout, cin, k, k}, cin * k * k, cout * k * k));
    params_.add(name + ".b", Tensor::zeros({cout}));
  };
  auto lnp = [&](const std::string& name, int n) {
    params_.add(name + ".g", Tensor::full({n}, 1.0));
    params_.add(name + ".b", Tensor::zeros({n}));
  };
  auto mhap = [&](const std::string& p) {
    lin(p + ".q", d, d);
    lin(p + ".k", d, d);
    lin(p + ".v", d, d);
    lin(p + ".o", d, d);
  };

  // Backbone: three stride-2 stages.
  convp("backbone.c0", 1, cfg_.backbone_channels[0], 3);
  convp("backbone.c1", cfg_.backbone_channels[0], cfg_.backbone_channels[1], 3);
  convp("backbone.c2", cfg_.backbone_channels[1], d, 3);

  for (int l = 0; l < cfg_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    mhap(p + ".attn");
    lnp(p + ".ln1", d);
    lin(p + ".ff1", d, cfg_.ffn_dim);
    lin(p + ".ff2", cfg_.ffn_dim, d);
    lnp(p + ".ln2", d);
  }

  // Learnable queries and reference boxes (stored as logits).
  {
    Tensor q = Tensor::zeros({cfg_.queries, d});
    for (long i = 0; i < q.size(); ++i) q.v[i] = 0.02 * rng.normal();
    params_.add("query.embed", std::move(q));
    Tensor rb = Tensor::zeros({cfg_.queries, 4});
    auto logit = [](double x) { return std::log(x / (1 - x)); };
    for (int i = 0; i < cfg_.queries; ++i) {
      rb.v[i * 4 + 0] = logit(rng.uniform(0.1, 0.9));
      rb.v[i * 4 + 1] = logit(rng.uniform(0.1, 0.9));
      rb.v[i * 4 + 2] = logit(rng.uniform(0.15, 0.5));
      rb.v[i * 4 + 3] = logit(rng.uniform(0.15, 0.5));
    }
    params_.add("query.ref_box_logits", std::move(rb));
  }

  const int S = cfg_.roi_size;
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    convp(p + ".align.c0", d, cfg_.aligner_channels, 3);
    convp(p + ".align.c1", cfg_.aligner_channels, cfg_.aligner_channels, 3);
    lin(p + ".align.m0", cfg_.aligner_channels * S * S, cfg_.aligner_hidden);
    lin(p + ".align.m1", cfg_.aligner_hidden, 2 * cfg_.heads);
    mhap(p + ".self");
    lnp(p + ".ln0", d);
    lin(p + ".rw1", d, d);
    lin(p + ".rw2", d, d);
    mhap(p + ".attn");
    lnp(p + ".ln1", d);
    lin(p + ".ff1", d, cfg_.ffn_dim);
    lin(p + ".ff2", cfg_.ffn_dim, d);
    lnp(p + ".ln2", d);
  }

  lin("head.cls", d, cfg_.classes + 1);
  lin("head.box", d, 4);
}

void Model::watch_all(Graph& g) {
  for (auto& [name, t] : params_.items()) g.watch(t);
}

Tensor Model::linear(const Tensor& x, const std::string& w, const std::string& b) const {
  return add_rowvec(matmul(x, params_.at(w)), params_.at(b));
}

Tensor Model::mha(const Tensor& q, const Tensor& k, const Tensor& v, const std::string& p,
                  Tensor* attn_rows) const {
  const int d = cfg_.d_model, H = cfg_.heads, dh = d / H;
  Tensor Q = linear(q, p + ".q.w", p + ".q.b");
  Tensor K = linear(k, p + ".k.w", p + ".k.b");
  Tensor V = linear(v, p + ".v.w", p + ".v.b");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads, attns;
  heads.reserve(static_cast<size_t>(H));
  for (int h = 0; h < H; ++h) {
    Tensor Qh = slice_cols(Q, h * dh, dh);
    Tensor Kh = slice_cols(K, h * dh, dh);
    Tensor Vh = slice_cols(V, h * dh, dh);
    Tensor scores = scale(matmul(Qh, transpose(Kh)), inv_sqrt);
    Tensor attn = softmax(scores, 1);
    if (attn_rows) attns.push_back(attn);
    heads.push_back(matmul(attn, Vh));
  }
  if (attn_rows) *attn_rows = concat_rows(attns);
  return linear(concat_cols(heads), p + ".o.w", p + ".o.b");
}

Tensor Model::backbone_forward(const Tensor& image) const {
  if (image.shape.size() != 3 || image.shape[0] != 1)
    throw DimensionError("backbone_forward: image must be 1 x H x W");
  if (image.shape[1] < 8 || image.shape[2] < 8)
    throw DimensionError("backbone_forward: image smaller than 8x8");
  Tensor x = image;
  for (const std::string stage : {"backbone.c0", "backbone.c1", "backbone.c2"}) {
    x = conv2d(x, params_.at(stage + ".w"), 2, 1);
    x = add_channel_bias(x, params_.at(stage + ".b"));
    x = relu(x);
  }
  return x;
}

EncodedFeatures Model::encoder_forward(const Tensor& featmap) const {
  const int d = featmap.shape[0], H = featmap.shape[1], W = featmap.shape[2];
  // [d x H x W] -> [(H*W) x d]
  Tensor tokens = transpose(reshape(featmap, {d, H * W}));
  EncodedFeatures enc;
  enc.h = H;
  enc.w = W;
  enc.pos = positional_grid(H, W, d);
  Tensor x = tokens;
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    Tensor qk = add(x, enc.pos);
    Tensor attn = mha(qk, qk, x, p + ".attn");
    x = layernorm_rows(add(x, attn), params_.at(p + ".ln1.g"), params_.at(p + ".ln1.b"));
    Tensor ff = linear(relu(linear(x, p + ".ff1.w", p + ".ff1.b")), p + ".ff2.w", p + ".ff2.b");
    x = layernorm_rows(add(x, ff), params_.at(p + ".ln2.g"), params_.at(p + ".ln2.b"));
  }
  enc.tokens = x;
  return enc;
}

ForwardResult Model::decoder_forward(const EncodedFeatures& enc) const {
  const int d = cfg_.d_model, H = cfg_.heads, dh = d / H;
  const int N = cfg_.queries, S = cfg_.roi_size;
  ForwardResult res;
  res.encoded = enc;
  // Token rows are (y, x)-ordered, so a reshape gives the H x W x d map.
  Tensor featmap_hwc = reshape(enc.tokens, {enc.h, enc.w, d});

  Tensor q_prev = params_.at("query.embed");
  Tensor box_logits = params_.at("query.ref_box_logits");

  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    Tensor boxes = sigmoid(box_logits);  // [N x 4]

    // Query self-attention: lets queries coordinate so that one-to-one
    // matching generalizes (suppresses duplicate confident predictions).
    {
      Tensor sa = mha(q_prev, q_prev, q_prev, p + ".self");
      q_prev = layernorm_rows(add(q_prev, sa), params_.at(p + ".ln0.g"),
                              params_.at(p + ".ln0.b"));
    }

    std::vector<Tensor> qnew_rows, qpos_rows, pts_all;
    qnew_rows.reserve(static_cast<size_t>(N));
    for (int qi = 0; qi < N; ++qi) {
      Tensor box_q = reshape(select_rows(boxes, {qi}), {4});
      Tensor region = roi_align(featmap_hwc, box_q, S);  // [d x S x S]
      // Salient points: ConvNet + MLP, sigmoid keeps them box-relative.
      Tensor a = relu(add_channel_bias(conv2d(region, params_.at(p + ".align.c0.w"), 1, 1),
                                       params_.at(p + ".align.c0.b")));
      a = relu(add_channel_bias(conv2d(a, params_.at(p + ".align.c1.w"), 1, 1),
                                params_.at(p + ".align.c1.b")));
      Tensor flat = reshape(a, {1, cfg_.aligner_channels * S * S});
      Tensor hidd = relu(linear(flat, p + ".align.m0.w", p + ".align.m0.b"));
      Tensor pts = sigmoid(reshape(linear(hidd, p + ".align.m1.w", p + ".align.m1.b"), {H, 2}));
      pts_all.push_back(pts);
      // Resample: per head, bilinear sample and keep that head's slice.
      std::vector<Tensor> slices;
      slices.reserve(static_cast<size_t>(H));
      for (int h = 0; h < H; ++h) {
        Tensor pt = reshape(select_rows(pts, {h}), {2});
        Tensor sampled = reshape(bilinear_sample(region, pt), {1, d});
        slices.push_back(slice_cols(sampled, h * dh, dh));
      }
      qnew_rows.push_back(concat_cols(slices));
      qpos_rows.push_back(reshape(sinusoidal_embed(box_q, pts, dh), {1, d}));
    }
    Tensor q_new = concat_rows(qnew_rows);      // [N x d]
    Tensor q_new_pos = concat_rows(qpos_rows);  // [N x d]

    // Reweighting from previous query embeddings.
    Tensor rw1 = sigmoid(linear(q_prev, p + ".rw1.w", p + ".rw1.b"));
    Tensor rw2 = sigmoid(linear(q_prev, p + ".rw2.w", p + ".rw2.b"));
    q_new = mul(q_new, rw1);
    q_new_pos = mul(q_new_pos, rw2);

    Tensor attn_rows;
    Tensor attn = mha(add(q_new, q_new_pos), add(enc.tokens, enc.pos), enc.tokens, p + ".attn",
                      &attn_rows);
    Tensor x = layernorm_rows(add(q_new, attn), params_.at(p + ".ln1.g"), params_.at(p + ".ln1.b"));
    Tensor ff = linear(relu(linear(x, p + ".ff1.w", p + ".ff1.b")), p + ".ff2.w", p + ".ff2.b");
    x = layernorm_rows(add(x, ff), params_.at(p + ".ln2.g"), params_.at(p + ".ln2.b"));

    Tensor delta = linear(x, "head.box.w", "head.box.b");
    box_logits = add(box_logits, delta);

    LayerOutput out;
    out.class_logits = linear(x, "head.cls.w", "head.cls.b");
    out.boxes = sigmoid(box_logits);
    out.queries = x;
    out.salient_points = concat_rows(pts_all);
    out.reweight_new = rw1;
    out.reweight_pos = rw2;
    out.cross_attn = attn_rows;
    res.layers.push_back(std::move(out));
    q_prev = x;
  }
  return res;
}

ForwardResult Model::forward(const Tensor& image) const {
  return decoder_forward(encoder_forward(backbone_forward(image)));
}

std::vector<Detection> Model::predict(const Tensor& image) const {
  ForwardResult res = forward(image);
  const LayerOutput& last = res.layers.back();
  const int N = cfg_.queries, C = cfg_.classes + 1;
  Tensor probs = softmax(last.class_logits, 1);
  std::vector<Detection> dets;
  dets.reserve(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    Detection det;
    det.box = {last.boxes.v[i * 4 + 0], last.boxes.v[i * 4 + 1], last.boxes.v[i * 4 + 2],
               last.boxes.v[i * 4 + 3]};
    det.label = 0;
    det.score = probs.v[static_cast<long>(i) * C];  // p(table)
    dets.push_back(det);
  }
  return dets;
}

void Model::copy_params_from(const Model& other) {
  if (params_.count() != other.params_.count()) throw ContractError("copy_params_from: mismatch");
  for (size_t i = 0; i < params_.count(); ++i) {
    auto& dst = params_.items()[i];
    const auto& src = other.params_.items()[i];
    if (dst.first != src.first || dst.second.shape != src.second.shape)
      throw ContractError("copy_params_from: parameter mismatch at " + dst.first);
    dst.second.v = src.second.v;
    dst.second.node = -1;
  }
}

void Model::load_params(const std::vector<std::pair<std::string, Tensor>>& named,
                        const std::string& prefix) {
  size_t loaded = 0;
  for (const auto& [name, t] : named) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string local = name.substr(prefix.size());
    if (!params_.has(local)) throw ContractError("checkpoint has unknown parameter: " + name);
    Tensor& dst = params_.at(local);
    if (dst.shape != t.shape)
      throw DimensionError("checkpoint shape mismatch for " + name);
    dst.v = t.v;
    dst.node = -1;
    ++loaded;
  }
  if (loaded != params_.count())
    throw ContractError("checkpoint missing parameters under prefix '" + prefix + "'");
}

}  // namespace tabledet
