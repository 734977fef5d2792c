#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pmmrec/encoders.hpp"
#include "pmmrec/random.hpp"
#include "pmmrec/types.hpp"
#include "pmmrec/user_encoder.hpp"

namespace pmmrec {

/// Which pre-trained parameter groups are carried over, and which item
/// representation feeds the user encoder.
enum class TransferMode { full, item_encoders, user_encoder, text_only, vision_only };

/// The vector that represents an item for the user encoder and for scoring.
enum class ItemRoute { fused, text, vision };

inline std::string_view to_string(TransferMode m) {
  switch (m) {
    case TransferMode::full: return "full";
    case TransferMode::item_encoders: return "item_encoders";
    case TransferMode::user_encoder: return "user_encoder";
    case TransferMode::text_only: return "text_only";
    case TransferMode::vision_only: return "vision_only";
  }
  return "?";
}

inline TransferMode parse_transfer_mode(std::string_view s) {
  for (TransferMode m : {TransferMode::full, TransferMode::item_encoders,
                         TransferMode::user_encoder, TransferMode::text_only,
                         TransferMode::vision_only}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown transfer mode '" + std::string(s) + "'");
}

inline ItemRoute route_for(TransferMode m) {
  switch (m) {
    case TransferMode::text_only: return ItemRoute::text;
    case TransferMode::vision_only: return ItemRoute::vision;
    default: return ItemRoute::fused;
  }
}

inline constexpr std::string_view kTextGroup = "text_encoder";
inline constexpr std::string_view kVisionGroup = "vision_encoder";
inline constexpr std::string_view kFusionGroup = "fusion";
inline constexpr std::string_view kUserGroup = "user_encoder";
inline constexpr std::string_view kNidGroup = "nid_head";

struct ParamGroup {
  std::string name;
  std::vector<Parameter*> params;
};

/// Item encoders, fusion, user encoder and NID head. Components a transfer
/// mode does not use are simply absent.
class Model {
 public:
  struct Components {
    bool text = true, vision = true, fusion = true, user = true, nid = true;
  };

  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed, ItemRoute route = ItemRoute::fused)
      : Model(cfg, seed, route, components_for(route, true)) {}

  Model(const ModelConfig& cfg, std::uint64_t seed, ItemRoute route, Components c)
      : config_(cfg), route_(route) {
    cfg.validate();
    if (c.text) text = TextEncoder(cfg, group_seed(seed, kTextGroup));
    if (c.vision) vision = VisionEncoder(cfg, group_seed(seed, kVisionGroup));
    if (c.fusion) fusion = FusionBlock(cfg, group_seed(seed, kFusionGroup));
    if (c.user) user = UserEncoder(cfg, group_seed(seed, kUserGroup));
    if (c.nid) nid = NidHead(cfg, group_seed(seed, kNidGroup));
    check_route();
    set_trainable_top_blocks(cfg.trainable_top_blocks);
  }

  static Components components_for(ItemRoute route, bool with_nid) {
    Components c;
    c.text = route != ItemRoute::vision;
    c.vision = route != ItemRoute::text;
    c.fusion = route == ItemRoute::fused;
    c.nid = with_nid;
    return c;
  }

  /// Seed used to initialize group `name` from a root seed; fresh groups in
  /// transfer are initialized exactly as in a from-scratch model.
  static std::uint64_t group_seed(std::uint64_t seed, std::string_view name) {
    return derive_seed(seed, std::string("init.") + std::string(name));
  }

  const ModelConfig& config() const noexcept { return config_; }
  ItemRoute route() const noexcept { return route_; }

  std::optional<TextEncoder> text;
  std::optional<VisionEncoder> vision;
  std::optional<FusionBlock> fusion;
  std::optional<UserEncoder> user;
  std::optional<NidHead> nid;

  /// Present groups in a fixed order.
  std::vector<ParamGroup> groups() {
    std::vector<ParamGroup> g;
    if (text) g.push_back({std::string(kTextGroup), text->parameters()});
    if (vision) g.push_back({std::string(kVisionGroup), vision->parameters()});
    if (fusion) g.push_back({std::string(kFusionGroup), fusion->parameters()});
    if (user) g.push_back({std::string(kUserGroup), user->parameters()});
    if (nid) g.push_back({std::string(kNidGroup), nid->parameters()});
    return g;
  }

  bool has_group(std::string_view name) {
    for (const auto& g : groups())
      if (g.name == name) return true;
    return false;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& g : groups()) out.insert(out.end(), g.params.begin(), g.params.end());
    return out;
  }

  std::vector<Parameter*> trainable_parameters() {
    std::vector<Parameter*> out;
    for (Parameter* p : parameters())
      if (p->trainable) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  void set_trainable_top_blocks(std::size_t top) {
    config_.trainable_top_blocks = top;
    if (text) text->set_trainable_top_blocks(top);
    if (vision) vision->set_trainable_top_blocks(top);
  }

  /// Bumped on every parameter update; cached item indices compare against it.
  std::uint64_t version() const noexcept { return version_; }
  void mark_updated() noexcept { ++version_; }

  /// Number of item encodings performed so far (instrumentation).
  std::uint64_t items_encoded() const noexcept { return items_encoded_; }
  void count_encoded(std::size_t n) noexcept { items_encoded_ += n; }

  void drop_nid_head() { nid.reset(); }

 private:
  void check_route() const {
    const bool ok = (route_ == ItemRoute::fused && text && vision && fusion) ||
                    (route_ == ItemRoute::text && text) ||
                    (route_ == ItemRoute::vision && vision);
    if (!ok) throw std::invalid_argument("model lacks the components its item route needs");
  }

  ModelConfig config_;
  ItemRoute route_ = ItemRoute::fused;
  std::uint64_t version_ = 0;
  std::uint64_t items_encoded_ = 0;
};

/// Per-item encodings for a list of catalog items.
struct ItemEncoding {
  Var rep;    // representation fed to the user encoder, [U, d]
  Var t_cls;  // [U, d] when the text encoder ran
  Var v_cls;  // [U, d] when the vision encoder ran
};

/// Runs the item encoders (and fusion, for the fused route) over `ids`.
inline ItemEncoding encode_items(Tape& t, Model& model, const Catalog& catalog,
                                 const std::vector<ItemId>& ids) {
  if (ids.empty()) throw std::invalid_argument("encode_items: no items");
  const ModelConfig& cfg = model.config();
  ItemEncoding enc;
  std::optional<ModalityOutput> text_out, vision_out;
  if (model.route() != ItemRoute::vision) {
    std::vector<TokenSequence> tokens;
    tokens.reserve(ids.size());
    for (ItemId id : ids) tokens.push_back(pad_tokens(catalog.at(id).tokens, cfg.p_max));
    text_out = model.text->encode(t, tokens);
    enc.t_cls = text_out->cls;
  }
  if (model.route() != ItemRoute::text) {
    std::vector<PatchSequence> patches;
    patches.reserve(ids.size());
    for (ItemId id : ids) {
      const auto& values = catalog.at(id).patches;
      patches.push_back({values, values.size() / cfg.patch_dim, cfg.patch_dim});
    }
    vision_out = model.vision->encode(t, patches);
    enc.v_cls = vision_out->cls;
  }
  switch (model.route()) {
    case ItemRoute::fused: enc.rep = model.fusion->fuse(t, *text_out, *vision_out); break;
    case ItemRoute::text: enc.rep = enc.t_cls; break;
    case ItemRoute::vision: enc.rep = enc.v_cls; break;
  }
  model.count_encoded(ids.size());
  return enc;
}

}  // namespace pmmrec
