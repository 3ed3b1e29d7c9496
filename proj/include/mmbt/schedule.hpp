// Declarative encoder schedules: patch embedding plus an ordered list of
// blocks, each naming its output width, token grid, pooling strides and head
// count. Schedules are JSON documents (comments allowed); a block entry may
// carry "repeat": n to stand for n identical consecutive blocks.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbt/ops.hpp"

namespace mmbt {

using Extents = std::vector<std::size_t>;

enum class AttentionKind { plain, pooled };

struct PatchEmbedSpec {
  std::size_t channels = 0;
  Extents kernel, stride, grid;
  Extents padding;  // derived during validation
};

struct BlockSpec {
  std::size_t channels = 0;
  Extents grid;
  AttentionKind attention = AttentionKind::plain;
  Extents q_stride, kv_stride;
  std::size_t heads = 1;
  std::size_t mlp_ratio = 4;
  PoolMode q_pool = PoolMode::max;
  PoolMode kv_pool = PoolMode::max;
  PoolMode skip_pool = PoolMode::avg;
};

/// Resolved shapes of one block, class token included in the counts.
struct BlockGeometry {
  std::size_t d_in = 0, d_out = 0, heads = 0, head_dim = 0, mlp_hidden = 0;
  Extents in_grid, q_grid, kv_grid;
  std::size_t n_in = 0, n_q = 0, n_kv = 0;
  bool q_pooled = false, kv_pooled = false;
  std::vector<std::size_t> rel_rows;  // empty without relative positions
};

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

class StageSchedule {
 public:
  std::string name;
  std::string modality = "audio";  // "audio" or "video"
  std::size_t in_channels = 1;
  Extents input_extent;
  PatchEmbedSpec patch;
  bool rel_pos = true;
  bool residual_pooling = true;
  bool abs_pos_embed = false;
  double ln_eps = 1e-6;
  std::vector<BlockSpec> blocks;

  std::size_t axes() const { return input_extent.size(); }
  std::size_t final_channels() const {
    return blocks.empty() ? patch.channels : blocks.back().channels;
  }
  const Extents& final_grid() const { return blocks.empty() ? patch.grid : blocks.back().grid; }
  std::size_t final_heads() const { return blocks.empty() ? 1 : blocks.back().heads; }

  /// Throws ConfigError naming the first violated rule; fills patch.padding.
  void validate() {
    auto fail = [&](const std::string& what) {
      throw ConfigError("schedule '" + name + "': " + what);
    };
    const std::size_t n = axes();
    if (n == 0) fail("input extent is empty");
    if (in_channels == 0) fail("input channels must be positive");
    if (modality != "audio" && modality != "video") fail("unknown modality '" + modality + "'");
    if (patch.channels == 0) fail("patch embedding needs positive channels");
    if (patch.kernel.size() != n || patch.stride.size() != n || patch.grid.size() != n) {
      fail("patch embedding kernel/stride/grid must have " + std::to_string(n) + " axes");
    }
    patch.padding.assign(n, 0);
    for (std::size_t a = 0; a < n; ++a) {
      try {
        patch.padding[a] =
            derive_padding(input_extent[a], patch.kernel[a], patch.stride[a], patch.grid[a]);
      } catch (const ConfigError& e) {
        fail(std::string("patch embedding axis ") + std::to_string(a) + ": " + e.what());
      }
    }
    Extents grid = patch.grid;
    std::size_t channels = patch.channels;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string where = "block " + std::to_string(i) + ": ";
      if (b.q_stride.empty()) b.q_stride.assign(n, 1);
      if (b.kv_stride.empty()) b.kv_stride.assign(n, 1);
      if (b.q_stride.size() != n || b.kv_stride.size() != n || b.grid.size() != n) {
        fail(where + "grid and strides must have " + std::to_string(n) + " axes");
      }
      const bool q_pooled = !is_identity_stride(b.q_stride);
      if (q_pooled != (b.attention == AttentionKind::pooled)) {
        fail(where + "attention kind '" +
             (b.attention == AttentionKind::pooled ? "pooled" : "plain") +
             "' disagrees with q_stride");
      }
      Extents expected;
      try {
        expected = pooled_extents(grid, b.q_stride);
        pooled_extents(grid, b.kv_stride);
      } catch (const ConfigError& e) {
        fail(where + e.what());
      }
      if (expected != b.grid) {
        fail(where + "expected grid " + shape_string(b.grid) + " but q_stride gives " +
             shape_string(expected));
      }
      if (b.channels == 0 || b.heads == 0 || b.channels % b.heads != 0) {
        fail(where + "channels " + std::to_string(b.channels) + " not divisible into " +
             std::to_string(b.heads) + " heads");
      }
      if (b.channels != channels && !q_pooled) {
        fail(where + "channel width changes from " + std::to_string(channels) + " to " +
             std::to_string(b.channels) + " at a plain block");
      }
      if (b.mlp_ratio == 0) fail(where + "mlp_ratio must be positive");
      grid = b.grid;
      channels = b.channels;
    }
  }

  BlockGeometry geometry(std::size_t i) const {
    const auto& b = blocks.at(i);
    BlockGeometry g;
    g.d_in = i == 0 ? patch.channels : blocks[i - 1].channels;
    g.d_out = b.channels;
    g.heads = b.heads;
    g.head_dim = b.channels / b.heads;
    g.mlp_hidden = b.mlp_ratio * b.channels;
    g.in_grid = i == 0 ? patch.grid : blocks[i - 1].grid;
    g.q_grid = pooled_extents(g.in_grid, b.q_stride);
    g.kv_grid = pooled_extents(g.in_grid, b.kv_stride);
    g.q_pooled = !is_identity_stride(b.q_stride);
    g.kv_pooled = !is_identity_stride(b.kv_stride);
    g.n_in = numel(g.in_grid) + 1;
    g.n_q = numel(g.q_grid) + 1;
    g.n_kv = numel(g.kv_grid) + 1;
    if (rel_pos) {
      for (std::size_t a = 0; a < g.q_grid.size(); ++a) {
        g.rel_rows.push_back(RelPosIndex::table_rows(g.q_grid[a], g.kv_grid[a]));
      }
    }
    return g;
  }

  /// Same grids and head counts with every channel width divided by `divisor`.
  StageSchedule scaled_width(std::size_t divisor) const {
    StageSchedule s = *this;
    auto scale = [&](std::size_t c) {
      if (c % divisor != 0) {
        throw ConfigError("schedule '" + name + "': width " + std::to_string(c) +
                          " not divisible by " + std::to_string(divisor));
      }
      return c / divisor;
    };
    s.patch.channels = scale(s.patch.channels);
    for (auto& b : s.blocks) b.channels = scale(b.channels);
    s.name = name + "/w" + std::to_string(divisor);
    s.validate();
    return s;
  }

  nlohmann::json to_json() const;
  static StageSchedule from_json(const nlohmann::json& j);

  static StageSchedule parse(const std::string& text) {
    return from_json(nlohmann::json::parse(text, nullptr, true, true));
  }

  static StageSchedule load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open schedule file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("schedule file '" + path + "': " + e.what());
    }
  }

  /// Expanded one-block-per-entry form; stable across formatting of the source.
  std::string canonical() const { return to_json().dump(); }
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

namespace detail {

inline PoolMode pool_mode_from(const std::string& s) {
  if (s == "max") return PoolMode::max;
  if (s == "avg") return PoolMode::avg;
  throw ConfigError("unknown pooling mode '" + s + "'");
}

inline Extents extents_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return {};
  return j.at(key).get<Extents>();
}

}  // namespace detail

inline nlohmann::json StageSchedule::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["modality"] = modality;
  j["input"] = {{"channels", in_channels}, {"extent", input_extent}};
  j["patch_embed"] = {{"channels", patch.channels},
                      {"kernel", patch.kernel},
                      {"stride", patch.stride},
                      {"grid", patch.grid}};
  j["rel_pos"] = rel_pos;
  j["residual_pooling"] = residual_pooling;
  j["abs_pos_embed"] = abs_pos_embed;
  j["ln_eps"] = ln_eps;
  auto& arr = j["blocks"] = nlohmann::json::array();
  for (const auto& b : blocks) {
    arr.push_back({{"channels", b.channels},
                   {"grid", b.grid},
                   {"attention", b.attention == AttentionKind::pooled ? "pooled" : "plain"},
                   {"q_stride", b.q_stride},
                   {"kv_stride", b.kv_stride},
                   {"heads", b.heads},
                   {"mlp_ratio", b.mlp_ratio},
                   {"q_pool", to_string(b.q_pool)},
                   {"kv_pool", to_string(b.kv_pool)},
                   {"skip_pool", to_string(b.skip_pool)}});
  }
  return j;
}

inline StageSchedule StageSchedule::from_json(const nlohmann::json& j) {
  StageSchedule s;
  try {
    s.name = j.value("name", std::string("unnamed"));
    s.modality = j.value("modality", std::string("audio"));
    const auto& in = j.at("input");
    s.in_channels = in.value("channels", std::size_t{1});
    s.input_extent = in.at("extent").get<Extents>();
    const auto& pe = j.at("patch_embed");
    s.patch.channels = pe.at("channels").get<std::size_t>();
    s.patch.kernel = detail::extents_from(pe, "kernel");
    s.patch.stride = detail::extents_from(pe, "stride");
    s.patch.grid = detail::extents_from(pe, "grid");
    s.rel_pos = j.value("rel_pos", true);
    s.residual_pooling = j.value("residual_pooling", true);
    s.abs_pos_embed = j.value("abs_pos_embed", false);
    s.ln_eps = j.value("ln_eps", 1e-6);
    for (const auto& entry : j.at("blocks")) {
      BlockSpec b;
      b.channels = entry.at("channels").get<std::size_t>();
      b.grid = detail::extents_from(entry, "grid");
      const auto kind = entry.value("attention", std::string("plain"));
      if (kind == "pooled") {
        b.attention = AttentionKind::pooled;
      } else if (kind != "plain") {
        throw ConfigError("unknown attention kind '" + kind + "'");
      }
      b.q_stride = detail::extents_from(entry, "q_stride");
      b.kv_stride = detail::extents_from(entry, "kv_stride");
      b.heads = entry.value("heads", std::size_t{1});
      b.mlp_ratio = entry.value("mlp_ratio", std::size_t{4});
      b.q_pool = detail::pool_mode_from(entry.value("q_pool", std::string("max")));
      b.kv_pool = detail::pool_mode_from(entry.value("kv_pool", std::string("max")));
      b.skip_pool = detail::pool_mode_from(entry.value("skip_pool", std::string("avg")));
      const auto repeat = entry.value("repeat", std::size_t{1});
      for (std::size_t r = 0; r < repeat; ++r) s.blocks.push_back(b);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed schedule: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace mmbt
