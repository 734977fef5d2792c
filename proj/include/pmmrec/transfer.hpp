#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pmmrec/model.hpp"
#include "pmmrec/ops.hpp"
#include "pmmrec/types.hpp"

namespace pmmrec {

/// Corrupt, truncated or incompatible checkpoint data.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A bundle lacks a group, or its shapes do not fit the requested model.
class TransferError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr char kCheckpointMagic[8] = {'P', 'M', 'M', 'R', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct TensorGroup {
  std::string name;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view tensor) const {
    for (const auto& t : tensors)
      if (t.name == tensor) return &t;
    return nullptr;
  }
  friend bool operator==(const TensorGroup&, const TensorGroup&) = default;
};

/// Serializable parameter groups plus the architecture they came from.
struct CheckpointBundle {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig config;
  std::vector<TensorGroup> groups;

  const TensorGroup* find(std::string_view name) const {
    for (const auto& g : groups)
      if (g.name == name) return &g;
    return nullptr;
  }
  bool has(std::string_view name) const { return find(name) != nullptr; }
  friend bool operator==(const CheckpointBundle&, const CheckpointBundle&) = default;
};

inline CheckpointBundle bundle_from_model(Model& model) {
  CheckpointBundle b;
  b.config = model.config();
  for (auto& g : model.groups()) {
    TensorGroup tg{g.name, {}};
    for (const Parameter* p : g.params) tg.tensors.push_back({p->name, p->value});
    b.groups.push_back(std::move(tg));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Binary container
//
//   magic "PMMRECKP" | u32 version
//   fingerprint: u32 count, then (string key, u64 value) pairs
//   u32 group count; per group: string name, u32 tensor count;
//     per tensor: string name, u32 rank, u64 dims[rank], u64 offset, u64 count
//   u64 total values | f64 values[total] | u32 crc32 of all preceding bytes
//
// Integers and doubles are little-endian; strings are u32 length + bytes.
// Offsets count doubles from the start of the value block.

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  template <class T>
  void pod(T v) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes(raw, sizeof(T));
  }
  void str(std::string_view s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string source) : d_(data), src_(std::move(source)) {}
  void need(std::size_t n) const {
    if (pos_ + n > d_.size()) throw CheckpointError(src_ + ": truncated checkpoint");
  }
  template <class T>
  T pod() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, d_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(d_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  const std::string& source() const { return src_; }

 private:
  std::string_view d_;
  std::string src_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::vector<std::pair<std::string, std::uint64_t>> fingerprint(const ModelConfig& c) {
  return {{"d", c.d},
          {"n_heads", c.n_heads},
          {"encoder_blocks", c.encoder_blocks},
          {"user_blocks", c.user_blocks},
          {"vocab_size", c.vocab_size},
          {"p_max", c.p_max},
          {"q", c.q},
          {"patch_dim", c.patch_dim},
          {"max_len", c.max_len},
          {"vision_positions", c.vision_positions ? 1u : 0u}};
}

inline void apply_fingerprint(ModelConfig& c, const std::string& key, std::uint64_t v,
                              const std::string& source) {
  const auto s = static_cast<std::size_t>(v);
  if (key == "d") c.d = s;
  else if (key == "n_heads") c.n_heads = s;
  else if (key == "encoder_blocks") c.encoder_blocks = s;
  else if (key == "user_blocks") c.user_blocks = s;
  else if (key == "vocab_size") c.vocab_size = s;
  else if (key == "p_max") c.p_max = s;
  else if (key == "q") c.q = s;
  else if (key == "patch_dim") c.patch_dim = s;
  else if (key == "max_len") c.max_len = s;
  else if (key == "vision_positions") c.vision_positions = v != 0;
  else throw CheckpointError(source + ": unknown fingerprint key '" + key + "'");
}

inline std::uint32_t group_crc(const TensorGroup& g) {
  ByteWriter w;
  for (const auto& t : g.tensors)
    for (double v : t.value.values()) w.pod(v);
  return crc_of(w.buffer());
}

}  // namespace detail

inline std::string encode_bundle(const CheckpointBundle& b) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod<std::uint32_t>(b.version);
  const auto fp = detail::fingerprint(b.config);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(fp.size()));
  for (const auto& [k, v] : fp) {
    w.str(k);
    w.pod<std::uint64_t>(v);
  }
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(b.groups.size()));
  std::uint64_t offset = 0;
  for (const auto& g : b.groups) {
    w.str(g.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(g.tensors.size()));
    for (const auto& t : g.tensors) {
      w.str(t.name);
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.value.rank()));
      for (std::size_t dim : t.value.shape()) w.pod<std::uint64_t>(dim);
      w.pod<std::uint64_t>(offset);
      w.pod<std::uint64_t>(t.value.size());
      offset += t.value.size();
    }
  }
  w.pod<std::uint64_t>(offset);
  for (const auto& g : b.groups)
    for (const auto& t : g.tensors)
      for (double v : t.value.values()) w.pod(v);
  w.pod<std::uint32_t>(detail::crc_of(w.buffer()));
  return std::move(w.buffer());
}

inline CheckpointBundle decode_bundle(std::string_view data, const std::string& source = "checkpoint") {
  if (data.size() < sizeof(kCheckpointMagic) + 8 ||
      std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError(source + ": not a checkpoint (bad magic)");
  }
  {
    detail::ByteReader tail(data.substr(data.size() - 4), source);
    const auto stored = tail.pod<std::uint32_t>();
    if (detail::crc_of(data.substr(0, data.size() - 4)) != stored) {
      throw CheckpointError(source + ": checksum mismatch, file is corrupted");
    }
  }
  detail::ByteReader r(data.substr(0, data.size() - 4), source);
  r.need(sizeof(kCheckpointMagic));
  for (std::size_t i = 0; i < sizeof(kCheckpointMagic); ++i) r.pod<char>();
  CheckpointBundle b;
  b.version = r.pod<std::uint32_t>();
  if (b.version != kCheckpointVersion) {
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(b.version));
  }
  const auto n_fp = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_fp; ++i) {
    const std::string key = r.str();
    detail::apply_fingerprint(b.config, key, r.pod<std::uint64_t>(), source);
  }
  struct Pending {
    std::size_t group, tensor;
    Shape shape;
    std::uint64_t offset, count;
  };
  std::vector<Pending> pending;
  const auto n_groups = r.pod<std::uint32_t>();
  for (std::uint32_t gi = 0; gi < n_groups; ++gi) {
    TensorGroup g{r.str(), {}};
    const auto n_t = r.pod<std::uint32_t>();
    for (std::uint32_t ti = 0; ti < n_t; ++ti) {
      NamedTensor t{r.str(), {}};
      const auto rank = r.pod<std::uint32_t>();
      Shape shape;
      for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.pod<std::uint64_t>());
      const auto offset = r.pod<std::uint64_t>();
      const auto count = r.pod<std::uint64_t>();
      if (shape_numel(shape) != count) {
        throw CheckpointError(source + ": tensor " + g.name + "/" + t.name +
                              " shape disagrees with its value count");
      }
      pending.push_back({gi, ti, shape, offset, count});
      g.tensors.push_back(std::move(t));
    }
    b.groups.push_back(std::move(g));
  }
  const auto total = r.pod<std::uint64_t>();
  std::vector<double> values(total);
  for (auto& v : values) v = r.pod<double>();
  for (const auto& p : pending) {
    if (p.offset + p.count > total) {
      throw CheckpointError(source + ": tensor offset past the end of the value block");
    }
    std::vector<double> slice(values.begin() + static_cast<std::ptrdiff_t>(p.offset),
                              values.begin() + static_cast<std::ptrdiff_t>(p.offset + p.count));
    b.groups[p.group].tensors[p.tensor].value = Tensor(p.shape, std::move(slice));
  }
  return b;
}

inline void write_bundle(const CheckpointBundle& b, const std::string& path) {
  const std::string bytes = encode_bundle(b);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
}

inline void save_bundle(Model& model, const std::string& path) {
  write_bundle(bundle_from_model(model), path);
}

inline CheckpointBundle read_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bundle(bytes, path);
}

/// Group names, tensor shapes and per-group checksums.
inline std::string describe_bundle(const CheckpointBundle& b) {
  std::ostringstream os;
  os << "checkpoint version " << b.version << '\n';
  os << "config";
  for (const auto& [k, v] : detail::fingerprint(b.config)) os << ' ' << k << '=' << v;
  os << '\n';
  for (const auto& g : b.groups) {
    std::size_t n = 0;
    for (const auto& t : g.tensors) n += t.value.size();
    os << "group " << g.name << "  tensors=" << g.tensors.size() << " values=" << n
       << " crc32=" << std::hex << std::setw(8) << std::setfill('0')
       << detail::group_crc(g) << std::dec << std::setfill(' ')
       << '\n';
    for (const auto& t : g.tensors) os << "  " << t.name << ' ' << shape_string(t.value.shape()) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Component loading

/// Copies a serialized group into live parameters, checking names and shapes.
inline void load_group(const TensorGroup& g, const std::vector<Parameter*>& params) {
  if (g.tensors.size() != params.size()) {
    throw TransferError("group '" + g.name + "' holds " + std::to_string(g.tensors.size()) +
                        " tensors but the model expects " + std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    const NamedTensor* t = g.find(p->name);
    if (t == nullptr) {
      throw TransferError("group '" + g.name + "' lacks tensor '" + p->name + "'");
    }
    const Shape& have = t->value.shape();
    const Shape& want = p->value.shape();
    if (have.size() != want.size()) {
      throw TransferError("group '" + g.name + "' tensor '" + p->name + "': checkpoint rank " +
                          std::to_string(have.size()) + ", model rank " +
                          std::to_string(want.size()));
    }
    for (std::size_t a = 0; a < have.size(); ++a) {
      if (have[a] != want[a]) {
        throw TransferError("group '" + g.name + "' tensor '" + p->name + "' axis " +
                            std::to_string(a) + ": checkpoint has " + std::to_string(have[a]) +
                            ", model expects " + std::to_string(want[a]));
      }
    }
  }
  for (Parameter* p : params) p->value = g.find(p->name)->value;
}

/// Groups a transfer mode carries over from the pre-trained bundle.
inline std::vector<std::string_view> transferred_groups(TransferMode mode) {
  switch (mode) {
    case TransferMode::full: return {kTextGroup, kVisionGroup, kFusionGroup, kUserGroup};
    case TransferMode::item_encoders: return {kTextGroup, kVisionGroup, kFusionGroup};
    case TransferMode::user_encoder: return {kUserGroup};
    case TransferMode::text_only: return {kTextGroup, kUserGroup};
    case TransferMode::vision_only: return {kVisionGroup, kUserGroup};
  }
  return {};
}

/// Builds the model a transfer mode needs: selected groups come from the
/// bundle, the remaining required groups are initialized from
/// `fresh_init_seed`, and unused components are absent. `cfg` supplies the
/// architecture and must agree with the bundle's shapes.
inline Model load_components(const CheckpointBundle& b, TransferMode mode,
                             std::uint64_t fresh_init_seed, const ModelConfig& cfg) {
  const ItemRoute route = route_for(mode);
  const auto groups = transferred_groups(mode);
  for (std::string_view g : groups) {
    if (!b.has(g)) {
      throw TransferError("transfer mode " + std::string(to_string(mode)) +
                          " needs group '" + std::string(g) + "' but the checkpoint lacks it");
    }
  }
  Model model(cfg, fresh_init_seed, route, Model::components_for(route, false));
  for (auto& g : model.groups()) {
    if (std::find(groups.begin(), groups.end(), g.name) != groups.end()) {
      load_group(*b.find(g.name), g.params);
    }
  }
  return model;
}

inline Model load_components(const CheckpointBundle& b, TransferMode mode,
                             std::uint64_t fresh_init_seed) {
  return load_components(b, mode, fresh_init_seed, b.config);
}

/// Every component of a trained bundle, all required. The item route is
/// inferred from the groups present.
inline Model load_model(const CheckpointBundle& b, const ModelConfig& cfg) {
  ItemRoute route;
  if (b.has(kFusionGroup)) route = ItemRoute::fused;
  else if (b.has(kTextGroup) && !b.has(kVisionGroup)) route = ItemRoute::text;
  else if (b.has(kVisionGroup) && !b.has(kTextGroup)) route = ItemRoute::vision;
  else throw TransferError("checkpoint has no usable item encoder groups");
  if (!b.has(kUserGroup)) throw TransferError("checkpoint lacks group 'user_encoder'");
  auto c = Model::components_for(route, b.has(kNidGroup));
  Model model(cfg, 0, route, c);
  for (auto& g : model.groups()) {
    const TensorGroup* tg = b.find(g.name);
    if (tg == nullptr) throw TransferError("checkpoint lacks group '" + g.name + "'");
    load_group(*tg, g.params);
  }
  return model;
}

inline Model load_model(const CheckpointBundle& b) { return load_model(b, b.config); }

// ---------------------------------------------------------------------------
// Item index and scoring

/// Representation of every catalog item under the model's route, stamped
/// with the model version it was computed from.
struct ItemIndex {
  std::vector<ItemId> ids;  // catalog order
  Tensor reps;              // [N, d]
  std::uint64_t model_version = 0;
  const void* model = nullptr;

  bool fresh_for(const Model& m) const { return model == &m && model_version == m.version(); }
};

/// Encodes every catalog item exactly once, `chunk` items per forward pass.
inline ItemIndex build_item_index(Model& model, const Catalog& catalog, std::size_t chunk = 256) {
  if (catalog.empty()) throw std::invalid_argument("build_item_index: empty catalog");
  ItemIndex idx;
  idx.model = &model;
  idx.model_version = model.version();
  for (const auto& it : catalog.items()) idx.ids.push_back(it.catalog_index);
  const std::size_t d = model.config().d;
  idx.reps = Tensor(Shape{idx.ids.size(), d});
  for (std::size_t start = 0; start < idx.ids.size(); start += chunk) {
    const std::size_t end = std::min(idx.ids.size(), start + chunk);
    std::vector<ItemId> part(idx.ids.begin() + static_cast<std::ptrdiff_t>(start),
                             idx.ids.begin() + static_cast<std::ptrdiff_t>(end));
    Tape t(false);
    const Tensor& rep = encode_items(t, model, catalog, part).rep.value();
    std::copy(rep.values().begin(), rep.values().end(),
              idx.reps.values().begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return idx;
}

/// Keeps one index and rebuilds it when the model has been updated since.
class ItemIndexCache {
 public:
  const ItemIndex& get(Model& model, const Catalog& catalog) {
    if (!index_ || !index_->fresh_for(model) || index_->ids.size() != catalog.size()) {
      index_ = build_item_index(model, catalog);
      ++builds_;
    }
    return *index_;
  }
  std::size_t builds() const noexcept { return builds_; }
  void invalidate() { index_.reset(); }

 private:
  std::optional<ItemIndex> index_;
  std::size_t builds_ = 0;
};

/// Raw dot products h_last · rep for a batch of prefixes: [U, N].
/// Prefixes longer than max_len keep their most recent items.
inline Tensor score_prefixes(Model& model, const ItemIndex& index,
                             const std::vector<std::vector<ItemId>>& prefixes) {
  if (!index.fresh_for(model)) {
    throw std::logic_error("item index is stale: the model changed after it was built");
  }
  if (!model.user) throw std::invalid_argument("model has no user encoder");
  if (index.ids.empty()) throw std::invalid_argument("empty catalog");
  if (prefixes.empty()) return Tensor(Shape{0, index.ids.size()});
  const std::size_t max_len = model.config().max_len;
  std::unordered_map<ItemId, std::size_t> row_of;
  for (std::size_t i = 0; i < index.ids.size(); ++i) row_of[index.ids[i]] = i;
  std::size_t len = 0;
  for (const auto& p : prefixes) {
    if (p.empty()) throw std::invalid_argument("prefix must contain at least one item");
    len = std::max(len, std::min(p.size(), max_len));
  }
  std::vector<std::size_t> rows(prefixes.size() * len, 0), lengths, last;
  for (std::size_t u = 0; u < prefixes.size(); ++u) {
    const std::size_t n = std::min(prefixes[u].size(), max_len);
    const std::size_t skip = prefixes[u].size() - n;
    for (std::size_t l = 0; l < n; ++l) {
      auto it = row_of.find(prefixes[u][skip + l]);
      if (it == row_of.end()) {
        throw std::out_of_range("prefix item " + std::to_string(prefixes[u][skip + l]) +
                                " is not in the catalog");
      }
      rows[u * len + l] = it->second;
    }
    lengths.push_back(n);
    last.push_back(u * len + n - 1);
  }
  Tape t(false);
  Var reps = t.constant(index.reps);
  SequenceInput in{gather_rows(reps, rows), prefixes.size(), len, lengths};
  Var h = gather_rows(model.user->encode(t, in), last);
  return matmul(h, reps, /*transpose_w=*/true).value();
}

/// Softmax over the full catalog of h_last · rep (rep = e_cls, t_cls or v_cls
/// according to the model's route), in catalog order.
inline std::vector<double> predict_scores(Model& model, const ItemIndex& index,
                                          const std::vector<ItemId>& prefix) {
  const Tensor logits = score_prefixes(model, index, {prefix});
  std::vector<double> p(logits.values().begin(), logits.values().end());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - mx));
  for (double& v : p) v /= z;
  return p;
}

inline std::vector<double> predict_scores(Model& model, const Catalog& catalog,
                                          const std::vector<ItemId>& prefix) {
  if (catalog.empty()) throw std::invalid_argument("predict_scores: empty catalog");
  return predict_scores(model, build_item_index(model, catalog), prefix);
}

}  // namespace pmmrec
