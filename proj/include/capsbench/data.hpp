#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "capsbench/rng.hpp"

namespace capsbench {

// Dataset ingestion or format errors (CLI exit code 2).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string name;
  int channels = 1, height = 28, width = 28, classes = 10;
};

inline DatasetSpec dataset_spec(const std::string& name) {
  if (name == "mnist") return {"mnist", 1, 28, 28, 10};
  if (name == "fashionmnist") return {"fashionmnist", 1, 28, 28, 10};
  if (name == "cifar10") return {"cifar10", 3, 32, 32, 10};
  throw DataError("unknown dataset '" + name + "' (expected mnist|fashionmnist|cifar10)");
}

// Raw byte image store; pixels stay uint8 until batch assembly so pair
// synthesis can make bit-exact halves.
struct ImageSet {
  DatasetSpec spec;
  std::vector<uint8_t> pixels;  // count * channels * height * width
  std::vector<uint8_t> labels;

  size_t count() const { return labels.size(); }
  size_t sample_size() const {
    return static_cast<size_t>(spec.channels) * spec.height * spec.width;
  }
  const uint8_t* sample(size_t i) const { return pixels.data() + i * sample_size(); }
};

namespace detail {

inline uint32_t read_be32(std::istream& is, const std::string& path, const char* what) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4)
    throw DataError(path + ": truncated while reading " + what + " at offset " +
                    std::to_string(static_cast<long long>(is.tellg())));
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace detail

// Big-endian IDX parser (MNIST/FashionMNIST distribution format).
// Image magic 0x00000803, label magic 0x00000801; pixels land in [0,255].
inline ImageSet load_idx(const std::string& images_path, const std::string& labels_path,
                         const DatasetSpec& spec) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw DataError(images_path + ": cannot open");
  const uint32_t img_magic = detail::read_be32(imgs, images_path, "magic");
  if (img_magic != 0x00000803u) {
    std::ostringstream os;
    os << images_path << ": bad magic 0x" << std::hex << img_magic << " at offset 0 (want 0x803)";
    throw DataError(os.str());
  }
  const uint32_t n = detail::read_be32(imgs, images_path, "count");
  const uint32_t rows = detail::read_be32(imgs, images_path, "rows");
  const uint32_t cols = detail::read_be32(imgs, images_path, "cols");
  if (rows != static_cast<uint32_t>(spec.height) || cols != static_cast<uint32_t>(spec.width))
    throw DataError(images_path + ": unexpected image size " + std::to_string(rows) + "x" +
                    std::to_string(cols));

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw DataError(labels_path + ": cannot open");
  const uint32_t lab_magic = detail::read_be32(labs, labels_path, "magic");
  if (lab_magic != 0x00000801u) {
    std::ostringstream os;
    os << labels_path << ": bad magic 0x" << std::hex << lab_magic << " at offset 0 (want 0x801)";
    throw DataError(os.str());
  }
  const uint32_t nl = detail::read_be32(labs, labels_path, "count");
  if (n != nl)
    throw DataError(images_path + ": " + std::to_string(n) + " images but " + std::to_string(nl) +
                    " labels");

  ImageSet set;
  set.spec = spec;
  set.pixels.resize(static_cast<size_t>(n) * rows * cols);
  imgs.read(reinterpret_cast<char*>(set.pixels.data()),
            static_cast<std::streamsize>(set.pixels.size()));
  if (static_cast<size_t>(imgs.gcount()) != set.pixels.size())
    throw DataError(images_path + ": truncated pixel data");
  set.labels.resize(n);
  labs.read(reinterpret_cast<char*>(set.labels.data()), n);
  if (static_cast<size_t>(labs.gcount()) != n) throw DataError(labels_path + ": truncated labels");
  for (size_t i = 0; i < set.labels.size(); ++i)
    if (set.labels[i] >= spec.classes)
      throw DataError(labels_path + ": label " + std::to_string(int(set.labels[i])) +
                      " out of range at record " + std::to_string(i));
  return set;
}

// CIFAR10 binary batches: per record one label byte followed by 3072
// channel-planar RGB bytes, 10000 records per file.
inline ImageSet load_cifar10(const std::vector<std::string>& batch_files) {
  const DatasetSpec spec = dataset_spec("cifar10");
  const size_t rec = 1 + spec.channels * spec.height * spec.width;
  ImageSet set;
  set.spec = spec;
  for (const std::string& path : batch_files) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(path + ": cannot open");
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % rec != 0)
      throw DataError(path + ": size " + std::to_string(buf.size()) +
                      " is not a multiple of the " + std::to_string(rec) + "-byte record");
    const size_t n = buf.size() / rec;
    for (size_t i = 0; i < n; ++i) {
      const uint8_t label = static_cast<uint8_t>(buf[i * rec]);
      if (label >= spec.classes)
        throw DataError(path + ": label " + std::to_string(int(label)) + " out of range at record " +
                        std::to_string(i));
      set.labels.push_back(label);
      const char* px = buf.data() + i * rec + 1;
      set.pixels.insert(set.pixels.end(), px, px + rec - 1);
    }
  }
  return set;
}

// Resolves the conventional file layout under <root>/<dataset>/.
inline ImageSet load_dataset(const std::string& name, const std::string& root, bool train) {
  const DatasetSpec spec = dataset_spec(name);
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / name;
  if (spec.name == "cifar10") {
    std::vector<std::string> files;
    if (train) {
      for (int i = 1; i <= 5; ++i) files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
    } else {
      files.push_back((dir / "test_batch.bin").string());
    }
    return load_cifar10(files);
  }
  const char* img = train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
  const char* lab = train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
  return load_idx((dir / img).string(), (dir / lab).string(), spec);
}

// Per-channel mean and standard deviation of the raw [0,1] training pixels.
struct ChannelStats {
  std::vector<double> mean, stddev;
};

inline ChannelStats compute_stats(const ImageSet& set) {
  const int C = set.spec.channels;
  const size_t hw = static_cast<size_t>(set.spec.height) * set.spec.width;
  ChannelStats st;
  st.mean.assign(C, 0.0);
  st.stddev.assign(C, 0.0);
  std::vector<double> sq(C, 0.0);
  for (size_t i = 0; i < set.count(); ++i) {
    const uint8_t* px = set.sample(i);
    for (int c = 0; c < C; ++c)
      for (size_t p = 0; p < hw; ++p) {
        const double v = px[c * hw + p] / 255.0;
        st.mean[c] += v;
        sq[c] += v * v;
      }
  }
  const double n = static_cast<double>(set.count() * hw);
  for (int c = 0; c < C; ++c) {
    st.mean[c] /= n;
    const double var = sq[c] / n - st.mean[c] * st.mean[c];
    st.stddev[c] = std::sqrt(var > 0 ? var : 0.0);
    if (st.stddev[c] == 0.0) st.stddev[c] = 1.0;  // constant channel guard
  }
  return st;
}

inline void save_stats(const ChannelStats& st, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot write stats");
  os.precision(17);
  for (size_t c = 0; c < st.mean.size(); ++c) os << st.mean[c] << " " << st.stddev[c] << "\n";
}

inline bool load_stats(ChannelStats& st, const std::string& path, int channels) {
  std::ifstream is(path);
  if (!is) return false;
  st.mean.clear();
  st.stddev.clear();
  double m, s;
  while (is >> m >> s) {
    st.mean.push_back(m);
    st.stddev.push_back(s);
  }
  return static_cast<int>(st.mean.size()) == channels;
}

// Computed once from the training split, then cached next to the data.
inline ChannelStats stats_for(const ImageSet& train_set, const std::string& root) {
  namespace fs = std::filesystem;
  const std::string path = (fs::path(root) / train_set.spec.name / "stats.txt").string();
  ChannelStats st;
  if (load_stats(st, path, train_set.spec.channels)) return st;
  st = compute_stats(train_set);
  std::error_code ec;
  fs::create_directories(fs::path(path).parent_path(), ec);
  if (!ec) save_stats(st, path);
  return st;
}

struct AugmentPolicy {
  bool random_crop = true;
  int crop_pad = 4;
  bool horizontal_flip = false;  // enabled for cifar10 only
  bool normalize = true;
};

inline AugmentPolicy default_policy(const std::string& dataset) {
  AugmentPolicy p;
  p.horizontal_flip = (dataset == "cifar10");
  return p;
}

// Training-time augmentation of one sample into a float buffer of the same
// (c,h,w) size: 4-pixel zero-pad random crop and optional flip in raw pixel
// space, then per-channel standardization. `stream` must be the sample's own
// RNG stream so parallel loading cannot change results.
inline void augment_into(float* dst, const ImageSet& set, size_t idx, const ChannelStats& st,
                         const AugmentPolicy& pol, Rng& stream) {
  const int C = set.spec.channels, H = set.spec.height, W = set.spec.width;
  const uint8_t* src = set.sample(idx);
  int oy = pol.crop_pad, ox = pol.crop_pad;
  if (pol.random_crop) {
    oy = static_cast<int>(stream.uniform_below(2 * pol.crop_pad + 1));
    ox = static_cast<int>(stream.uniform_below(2 * pol.crop_pad + 1));
  }
  const bool flip = pol.horizontal_flip && stream.uniform_below(2) == 1;
  for (int c = 0; c < C; ++c) {
    const double mu = pol.normalize ? st.mean[c] : 0.0;
    const double inv = pol.normalize ? 1.0 / st.stddev[c] : 1.0;
    for (int y = 0; y < H; ++y) {
      const int sy = y + oy - pol.crop_pad;
      for (int x = 0; x < W; ++x) {
        const int raw_x = flip ? W - 1 - x : x;
        const int sx = raw_x + ox - pol.crop_pad;
        double v = 0.0;  // zero padding outside the frame
        if (sy >= 0 && sy < H && sx >= 0 && sx < W)
          v = src[(static_cast<size_t>(c) * H + sy) * W + sx] / 255.0;
        dst[(static_cast<size_t>(c) * H + y) * W + x] = static_cast<float>((v - mu) * inv);
      }
    }
  }
}

// Evaluation-time path: standardization only.
inline void normalize_into(float* dst, const uint8_t* src, const DatasetSpec& spec,
                           const ChannelStats& st) {
  const size_t hw = static_cast<size_t>(spec.height) * spec.width;
  for (int c = 0; c < spec.channels; ++c) {
    const double mu = st.mean[c];
    const double inv = 1.0 / st.stddev[c];
    for (size_t p = 0; p < hw; ++p)
      dst[c * hw + p] = static_cast<float>((src[c * hw + p] / 255.0 - mu) * inv);
  }
}

// ---------------------------------------------------------------------------
// Two-label pair synthesis. For every test index i one partner j is drawn
// uniformly from [0, n); the pair is kept iff the labels differ (j == i is
// rejected by that same test). No resampling, so the kept count is a
// binomial draw around n - sum_c count_c^2 / n.
// ---------------------------------------------------------------------------

struct PairManifest {
  uint64_t seed = 0;
  uint32_t source_count = 0;
  std::vector<std::pair<uint32_t, uint32_t>> pairs;
  uint32_t rejected = 0;
};

inline constexpr uint64_t kPairStreamSalt = 4;

inline PairManifest make_pairs(const ImageSet& test, uint64_t seed) {
  const size_t n = test.count();
  if (n < 2) throw DataError("make_pairs: need at least 2 samples, have " + std::to_string(n));
  PairManifest m;
  m.seed = seed;
  m.source_count = static_cast<uint32_t>(n);
  Rng rng = Rng::stream(seed, kPairStreamSalt);
  for (size_t i = 0; i < n; ++i) {
    const size_t j = rng.uniform_below(n);
    if (j != i && test.labels[i] != test.labels[j])
      m.pairs.emplace_back(static_cast<uint32_t>(i), static_cast<uint32_t>(j));
    else
      ++m.rejected;
  }
  return m;
}

// Width-axis concatenation of two raw samples into a (c, h, 2w) byte image.
// Both halves are bit-equal to their sources.
inline std::vector<uint8_t> concat_pair(const ImageSet& set, uint32_t k, uint32_t l) {
  if (set.labels[k] == set.labels[l])
    throw DataError("concat_pair: samples " + std::to_string(k) + "," + std::to_string(l) +
                    " share label " + std::to_string(int(set.labels[k])));
  const int C = set.spec.channels, H = set.spec.height, W = set.spec.width;
  std::vector<uint8_t> out(static_cast<size_t>(C) * H * 2 * W);
  const uint8_t* a = set.sample(k);
  const uint8_t* b = set.sample(l);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y) {
      uint8_t* row = out.data() + (static_cast<size_t>(c) * H + y) * 2 * W;
      const size_t src_off = (static_cast<size_t>(c) * H + y) * W;
      std::copy(a + src_off, a + src_off + W, row);
      std::copy(b + src_off, b + src_off + W, row + W);
    }
  return out;
}

// Line-oriented manifest: one header line carrying seed and counts, then one
// "k,l" line per kept pair. Byte-identical across runs for the same inputs.
inline void save_manifest(const PairManifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError(path + ": cannot write manifest");
  os << "# capsbench-pairs v1 seed=" << m.seed << " n=" << m.source_count
     << " kept=" << m.pairs.size() << " rejected=" << m.rejected << "\n";
  for (const auto& [k, l] : m.pairs) os << k << "," << l << "\n";
  if (!os) throw DataError(path + ": write failed");
}

inline PairManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(path + ": cannot open manifest");
  PairManifest m;
  std::string header;
  std::getline(is, header);
  uint64_t kept = 0;
  if (std::sscanf(header.c_str(), "# capsbench-pairs v1 seed=%llu n=%u kept=%llu rejected=%u",
                  reinterpret_cast<unsigned long long*>(&m.seed), &m.source_count,
                  reinterpret_cast<unsigned long long*>(&kept), &m.rejected) != 4)
    throw DataError(path + ": bad manifest header '" + header + "'");
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    uint32_t k, l;
    if (std::sscanf(line.c_str(), "%u,%u", &k, &l) != 2)
      throw DataError(path + ": bad manifest line '" + line + "'");
    m.pairs.emplace_back(k, l);
  }
  if (m.pairs.size() != kept)
    throw DataError(path + ": header says " + std::to_string(kept) + " pairs, file has " +
                    std::to_string(m.pairs.size()));
  return m;
}

}  // namespace capsbench
