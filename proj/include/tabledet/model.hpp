#pragma once

#include <map>
#include <string>
#include <vector>

#include "tabledet/geometry.hpp"
#include "tabledet/tensor.hpp"

namespace tabledet {

struct ModelConfig {
  int d_model = 64;
  int heads = 8;  // one salient point per head; d_model/heads divisible by 4
  int enc_layers = 2;
  int dec_layers = 2;
  int queries = 30;
  int roi_size = 7;
  int classes = 1;  // table; class index `classes` is no-object
  std::vector<int> backbone_channels = {16, 32};
  int ffn_dim = 128;
  int aligner_channels = 32;
  int aligner_hidden = 64;

  void validate() const;
  // d=16, N=4, 1 enc + 1 dec layer; for gradient checks on 32x32 images.
  static ModelConfig tiny();
};

// Ordered named parameter collection.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  size_t count() const { return items_.size(); }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor*> tensors();
  long total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, size_t> index_;
};

struct Detection {
  BoxCxCyWh box;
  double score = 0;
  int label = 0;
};

struct EncodedFeatures {
  Tensor tokens;  // [(H'*W') x d]
  Tensor pos;     // [(H'*W') x d], constant
  int h = 0, w = 0;
};

struct QueryState {
  Tensor q;      // [N x d]
  Tensor q_pos;  // [N x d]
};

struct LayerOutput {
  Tensor class_logits;  // [N x (C+1)]
  Tensor boxes;         // [N x 4] decoded cxcywh
  Tensor queries;       // [N x d]
  Tensor salient_points;  // [N*H x 2] box-relative, for invariant checks
  Tensor reweight_new;    // [N x d] coefficients
  Tensor reweight_pos;    // [N x d]
  Tensor cross_attn;      // [(heads*N) x tokens] softmax rows
};

struct ForwardResult {
  std::vector<LayerOutput> layers;
  EncodedFeatures encoded;
};

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Register all parameters as graph leaves.
  void watch_all(Graph& g);

  Tensor backbone_forward(const Tensor& image) const;  // [d x H/8 x W/8]
  EncodedFeatures encoder_forward(const Tensor& featmap) const;
  ForwardResult decoder_forward(const EncodedFeatures& enc) const;
  ForwardResult forward(const Tensor& image) const;

  // Value-only inference: last-layer detections, score = p(table).
  std::vector<Detection> predict(const Tensor& image) const;

  void copy_params_from(const Model& other);
  void load_params(const std::vector<std::pair<std::string, Tensor>>& named,
                   const std::string& prefix);

 private:
  ModelConfig cfg_;
  ParamStore params_;

  Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, const std::string& prefix,
             Tensor* attn_rows = nullptr) const;
  Tensor linear(const Tensor& x, const std::string& w, const std::string& b) const;
};

}  // namespace tabledet
