#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capsbench/capsule.hpp"
#include "capsbench/ops.hpp"
#include "capsbench/optim.hpp"
#include "capsbench/rng.hpp"

namespace capsbench {

enum class HeadKind : uint8_t { PS = 0, FC = 1, CNN = 2 };

inline const char* head_name(HeadKind h) {
  switch (h) {
    case HeadKind::PS: return "ps";
    case HeadKind::FC: return "fc";
    case HeadKind::CNN: return "cnn";
  }
  return "?";
}

inline HeadKind parse_head(const std::string& s) {
  if (s == "ps") return HeadKind::PS;
  if (s == "fc") return HeadKind::FC;
  if (s == "cnn") return HeadKind::CNN;
  throw ConfigError("unknown head '" + s + "' (expected ps|fc|cnn)");
}

struct ModelConfig {
  HeadKind head = HeadKind::PS;
  int in_channels = 1;  // 1 grayscale, 3 RGB
  int classes = 10;
  int caps_in_dim = 32;
  int caps_out_dim = 8;
  int routing_iters = 3;
};

using Census = std::vector<std::pair<std::string, size_t>>;

inline size_t census_total(const Census& c) {
  size_t t = 0;
  for (const auto& [name, n] : c) t += n;
  return t;
}

namespace detail {

template <typename T>
Parameter<T> conv_param(const std::string& name, int out_c, int in_c, int kh, int kw, Rng& rng) {
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * kh * kw));
  Parameter<T> p;
  p.name = name;
  p.value = Tensor<T>::randn({out_c, in_c, kh, kw}, rng, stddev);
  p.value.set_requires_grad();
  return p;
}

template <typename T>
Parameter<T> xavier_param(const std::string& name, Shape shape, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
  Parameter<T> p;
  p.name = name;
  p.value = Tensor<T>::uniform(std::move(shape), rng, -limit, limit);
  p.value.set_requires_grad();
  return p;
}

}  // namespace detail

// 3x3 (or 1x1) convolution without bias.
template <typename T>
struct Conv2dLayer {
  Parameter<T> weight;
  int stride = 1;
  int pad = 1;

  void build(const std::string& name, int out_c, int in_c, int k, int stride_, int pad_, Rng& rng) {
    weight = detail::conv_param<T>(name + ".weight", out_c, in_c, k, k, rng);
    stride = stride_;
    pad = pad_;
  }
  Tensor<T> forward(const Tensor<T>& x) { return conv2d(x, weight.value, stride, pad); }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  std::string name;

  void build(const std::string& name_, int channels, Rng&) {
    name = name_;
    gamma.name = name + ".gamma";
    gamma.value = Tensor<T>::full({channels}, T(1));
    gamma.value.set_requires_grad();
    beta.name = name + ".beta";
    beta.value = Tensor<T>::zeros({channels});
    beta.value.set_requires_grad();
    running_mean.assign(channels, T(0));
    running_var.assign(channels, T(1));
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batchnorm2d(x, gamma.value, beta.value, running_mean, running_var, training);
  }
};

// Two 3x3 convs with an identity shortcut; ReLU after the add.
template <typename T>
struct BasicBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;

  void build(const std::string& name, int channels, Rng& rng) {
    conv1.build(name + ".conv1", channels, channels, 3, 1, 1, rng);
    bn1.build(name + ".bn1", channels, rng);
    conv2.build(name + ".conv2", channels, channels, 3, 1, 1, rng);
    bn2.build(name + ".bn2", channels, rng);
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> h = relu(bn1.forward(conv1.forward(x), training));
    h = bn2.forward(conv2.forward(h), training);
    return relu(add(h, x));
  }
};

// Stride-2 residual block with a 1x1 stride-2 projection shortcut.
template <typename T>
struct DownBlock {
  Conv2dLayer<T> conv1, conv2, proj;
  BatchNormLayer<T> bn1, bn2, bnp;

  void build(const std::string& name, int in_c, int out_c, Rng& rng) {
    conv1.build(name + ".conv1", out_c, in_c, 3, 2, 1, rng);
    bn1.build(name + ".bn1", out_c, rng);
    conv2.build(name + ".conv2", out_c, out_c, 3, 1, 1, rng);
    bn2.build(name + ".bn2", out_c, rng);
    proj.build(name + ".proj", out_c, in_c, 1, 2, 0, rng);
    bnp.build(name + ".bnp", out_c, rng);
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> h = relu(bn1.forward(conv1.forward(x), training));
    h = bn2.forward(conv2.forward(h), training);
    Tensor<T> s = bnp.forward(proj.forward(x), training);
    return relu(add(h, s));
  }
};

// Residual feature extractor: stride-2 stem into 16 channels, three basic
// blocks at 16, down-sample to 32, two blocks, down-sample to 64, two
// blocks. Output is always 64 channels at 1/8 spatial resolution.
template <typename T>
struct Extractor {
  Conv2dLayer<T> conv1;
  BatchNormLayer<T> bn1;
  std::vector<BasicBlock<T>> stage1, stage2, stage3;
  DownBlock<T> down1, down2;

  void build(int in_channels, Rng& rng) {
    conv1.build("extractor.conv1", 16, in_channels, 3, 2, 1, rng);
    bn1.build("extractor.bn1", 16, rng);
    stage1.resize(3);
    for (int i = 0; i < 3; ++i)
      stage1[i].build("extractor.stage1." + std::to_string(i), 16, rng);
    down1.build("extractor.down1", 16, 32, rng);
    stage2.resize(2);
    for (int i = 0; i < 2; ++i)
      stage2[i].build("extractor.stage2." + std::to_string(i), 32, rng);
    down2.build("extractor.down2", 32, 64, rng);
    stage3.resize(2);
    for (int i = 0; i < 2; ++i)
      stage3[i].build("extractor.stage3." + std::to_string(i), 64, rng);
  }

  struct Out {
    Tensor<T> conv1_out;  // raw first-conv output, pre-BN
    Tensor<T> features;   // [B, 64, ceil(h/8), ceil(w/8)]
  };

  Out forward(const Tensor<T>& x, bool training) {
    Tensor<T> c1 = conv1.forward(x);
    Tensor<T> h = relu(bn1.forward(c1, training));
    for (auto& b : stage1) h = b.forward(h, training);
    h = down1.forward(h, training);
    for (auto& b : stage2) h = b.forward(h, training);
    h = down2.forward(h, training);
    for (auto& b : stage3) h = b.forward(h, training);
    return {c1, h};
  }
};

template <typename T>
struct ModelOutput {
  Tensor<T> probs;  // [B, q], each in [0,1)
  bool has_trace = false;
  RoutingTrace<T> trace;  // capsule heads only
  Tensor<T> conv1_out;
  Tensor<T> features;
};

// Feature extractor plus one of the three classifier heads.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.in_channels != 1 && cfg.in_channels != 3)
      throw ConfigError("model: in_channels must be 1 or 3");
    Rng rng = Rng::stream(seed, /*salt=*/1);
    extractor_.build(cfg.in_channels, rng);
    const int din = cfg.caps_in_dim, dout = cfg.caps_out_dim, q = cfg.classes;
    switch (cfg.head) {
      case HeadKind::PS:
        caps_w_ = detail::xavier_param<T>("head.ps.weight", {q, din, dout}, din, dout, rng);
        break;
      case HeadKind::FC:
        caps_w_ = detail::xavier_param<T>("head.fc.weight", {q, 32, din, dout}, din, dout, rng);
        break;
      case HeadKind::CNN:
        fc1_w_ = detail::xavier_param<T>("head.cnn.fc1.weight", {256, 1024}, 1024, 256, rng);
        fc1_b_.name = "head.cnn.fc1.bias";
        fc1_b_.value = Tensor<T>::zeros({256});
        fc1_b_.value.set_requires_grad();
        fc2_w_ = detail::xavier_param<T>("head.cnn.fc2.weight", {q, 256}, 256, q, rng);
        fc2_b_.name = "head.cnn.fc2.bias";
        fc2_b_.value = Tensor<T>::zeros({q});
        fc2_b_.value.set_requires_grad();
        break;
    }
    register_all();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  // True when the head fixes its input size by pooling (FC and CNN); the PS
  // head consumes the feature map at its native width.
  bool head_pools() const { return cfg_.head != HeadKind::PS; }

  ModelOutput<T> forward(const Tensor<T>& images, bool training) {
    auto ext = extractor_.forward(images, training);
    ModelOutput<T> out;
    out.conv1_out = ext.conv1_out;
    out.features = ext.features;
    switch (cfg_.head) {
      case HeadKind::PS: {
        Tensor<T> u = to_capsules(ext.features, cfg_.caps_in_dim);
        out.trace = ps_capsule_layer(u, caps_w_.value, cfg_.routing_iters);
        out.probs = capsule_lengths(out.trace.V);
        out.has_trace = true;
        break;
      }
      case HeadKind::FC: {
        Tensor<T> pooled = adaptive_avg_pool(ext.features, 4, 4);
        Tensor<T> u = to_capsules(pooled, cfg_.caps_in_dim);
        out.trace = fc_capsule_layer(u, caps_w_.value, cfg_.routing_iters);
        out.probs = capsule_lengths(out.trace.V);
        out.has_trace = true;
        break;
      }
      case HeadKind::CNN: {
        Tensor<T> pooled = adaptive_avg_pool(ext.features, 4, 4);
        Tensor<T> flat = reshape(pooled, {pooled.dim(0), 64 * 4 * 4});
        Tensor<T> h = relu(linear(flat, fc1_w_.value, fc1_b_.value));
        out.probs = sigmoid(linear(h, fc2_w_.value, fc2_b_.value));
        break;
      }
    }
    return out;
  }

  const std::vector<Parameter<T>*>& parameters() { return params_; }

  std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (BatchNormLayer<T>* bn : bns_) {
      out.emplace_back(bn->name + ".running_mean", &bn->running_mean);
      out.emplace_back(bn->name + ".running_var", &bn->running_var);
    }
    return out;
  }

  Census census() {
    Census c;
    for (Parameter<T>* p : params_) c.emplace_back(p->name, p->numel());
    return c;
  }

  size_t parameter_count() { return census_total(census()); }

 private:
  void register_block(BasicBlock<T>& b) {
    params_.push_back(&b.conv1.weight);
    params_.push_back(&b.bn1.gamma);
    params_.push_back(&b.bn1.beta);
    params_.push_back(&b.conv2.weight);
    params_.push_back(&b.bn2.gamma);
    params_.push_back(&b.bn2.beta);
    bns_.push_back(&b.bn1);
    bns_.push_back(&b.bn2);
  }
  void register_down(DownBlock<T>& b) {
    params_.push_back(&b.conv1.weight);
    params_.push_back(&b.bn1.gamma);
    params_.push_back(&b.bn1.beta);
    params_.push_back(&b.conv2.weight);
    params_.push_back(&b.bn2.gamma);
    params_.push_back(&b.bn2.beta);
    params_.push_back(&b.proj.weight);
    params_.push_back(&b.bnp.gamma);
    params_.push_back(&b.bnp.beta);
    bns_.push_back(&b.bn1);
    bns_.push_back(&b.bn2);
    bns_.push_back(&b.bnp);
  }
  void register_all() {
    params_.push_back(&extractor_.conv1.weight);
    params_.push_back(&extractor_.bn1.gamma);
    params_.push_back(&extractor_.bn1.beta);
    bns_.push_back(&extractor_.bn1);
    for (auto& b : extractor_.stage1) register_block(b);
    register_down(extractor_.down1);
    for (auto& b : extractor_.stage2) register_block(b);
    register_down(extractor_.down2);
    for (auto& b : extractor_.stage3) register_block(b);
    switch (cfg_.head) {
      case HeadKind::PS:
      case HeadKind::FC:
        params_.push_back(&caps_w_);
        break;
      case HeadKind::CNN:
        params_.push_back(&fc1_w_);
        params_.push_back(&fc1_b_);
        params_.push_back(&fc2_w_);
        params_.push_back(&fc2_b_);
        break;
    }
  }

  ModelConfig cfg_;
  Extractor<T> extractor_;
  Parameter<T> caps_w_;              // PS: [q,32,8], FC: [q,32,32,8]
  Parameter<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;  // CNN head
  std::vector<Parameter<T>*> params_;
  std::vector<BatchNormLayer<T>*> bns_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: fixed header, then one record per parameter/buffer,
// values as little-endian float32. Round trips are bit-exact.
//
//   magic  "CBCKPT1\0"
//   u8 head, u8 in_channels, u16 classes, u32 record count
//   record: u16 name_len, name, u8 kind (0 param, 1 buffer),
//           u8 rank, u32 dims[rank], f32 data[prod(dims)]
// ---------------------------------------------------------------------------

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
template <typename U>
void write_pod(std::ostream& os, U v) {
  write_bytes(os, &v, sizeof(U));
}
inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw ConfigError("checkpoint '" + path + "': truncated file");
}
template <typename U>
U read_pod(std::istream& is, const std::string& path) {
  U v;
  read_bytes(is, &v, sizeof(U), path);
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'C', 'B', 'C', 'K', 'P', 'T', '1', '\0'};

inline void save_checkpoint(Model<float>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("checkpoint '" + path + "': cannot open for writing");
  detail::write_bytes(os, kCheckpointMagic, 8);
  const ModelConfig& cfg = model.config();
  detail::write_pod<uint8_t>(os, static_cast<uint8_t>(cfg.head));
  detail::write_pod<uint8_t>(os, static_cast<uint8_t>(cfg.in_channels));
  detail::write_pod<uint16_t>(os, static_cast<uint16_t>(cfg.classes));
  auto params = model.parameters();
  auto buffers = model.buffers();
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.size() + buffers.size()));
  auto write_record = [&os](const std::string& name, uint8_t kind, const Shape& shape,
                            const float* data, size_t n) {
    detail::write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
    detail::write_bytes(os, name.data(), name.size());
    detail::write_pod<uint8_t>(os, kind);
    detail::write_pod<uint8_t>(os, static_cast<uint8_t>(shape.size()));
    for (int d : shape) detail::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
    detail::write_bytes(os, data, n * sizeof(float));
  };
  for (Parameter<float>* p : params)
    write_record(p->name, 0, p->value.shape(), p->value.data(), p->numel());
  for (auto& [name, buf] : buffers)
    write_record(name, 1, Shape{static_cast<int>(buf->size())}, buf->data(), buf->size());
  if (!os) throw ConfigError("checkpoint '" + path + "': write failed");
}

// Rebuilds the model described by the header and fills every parameter and
// buffer. Any name/shape that does not line up with the freshly built model
// is a census mismatch and the load is refused.
inline std::unique_ptr<Model<float>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint '" + path + "': cannot open");
  char magic[8];
  detail::read_bytes(is, magic, 8, path);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ConfigError("checkpoint '" + path + "': bad magic");
  ModelConfig cfg;
  cfg.head = static_cast<HeadKind>(detail::read_pod<uint8_t>(is, path));
  cfg.in_channels = detail::read_pod<uint8_t>(is, path);
  cfg.classes = detail::read_pod<uint16_t>(is, path);
  const uint32_t count = detail::read_pod<uint32_t>(is, path);

  auto model = std::make_unique<Model<float>>(cfg, /*seed=*/0);
  std::unordered_map<std::string, Parameter<float>*> by_name;
  for (Parameter<float>* p : model->parameters()) by_name[p->name] = p;
  std::unordered_map<std::string, std::vector<float>*> buf_by_name;
  for (auto& [name, buf] : model->buffers()) buf_by_name[name] = buf;

  size_t filled = 0;
  for (uint32_t r = 0; r < count; ++r) {
    const uint16_t name_len = detail::read_pod<uint16_t>(is, path);
    std::string name(name_len, '\0');
    detail::read_bytes(is, name.data(), name_len, path);
    const uint8_t kind = detail::read_pod<uint8_t>(is, path);
    const uint8_t rank = detail::read_pod<uint8_t>(is, path);
    Shape shape(rank);
    size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(detail::read_pod<uint32_t>(is, path));
      n *= static_cast<size_t>(shape[d]);
    }
    std::vector<float> data(n);
    detail::read_bytes(is, data.data(), n * sizeof(float), path);
    if (kind == 0) {
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw ConfigError("checkpoint '" + path + "': census mismatch, unknown parameter '" +
                          name + "'");
      if (it->second->value.shape() != shape)
        throw ConfigError("checkpoint '" + path + "': census mismatch, parameter '" + name +
                          "' has shape " + shape_str(shape) + ", model expects " +
                          shape_str(it->second->value.shape()));
      it->second->value.vec() = std::move(data);
      ++filled;
    } else {
      auto it = buf_by_name.find(name);
      if (it == buf_by_name.end())
        throw ConfigError("checkpoint '" + path + "': census mismatch, unknown buffer '" + name +
                          "'");
      if (it->second->size() != n)
        throw ConfigError("checkpoint '" + path + "': census mismatch, buffer '" + name + "'");
      *it->second = std::move(data);
      ++filled;
    }
  }
  if (filled != by_name.size() + buf_by_name.size())
    throw ConfigError("checkpoint '" + path + "': census mismatch, " + std::to_string(filled) +
                      " records for " + std::to_string(by_name.size() + buf_by_name.size()) +
                      " slots");
  return model;
}

}  // namespace capsbench
