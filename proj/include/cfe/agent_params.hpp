#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cfe/neural.hpp"

namespace cfe {

// Architecture of one inner learner: a shared feature extractor feeding an
// actor head (masked categorical logits) and a critic head (state value).
struct AgentSpec {
  nn::MLPSpec fe;
  nn::MLPSpec actor;
  nn::MLPSpec critic;

  static AgentSpec standard(std::size_t obs_dim = 30, std::size_t n_bins = 21, std::size_t width = 64) {
    using nn::Activation;
    AgentSpec s;
    s.fe = {{obs_dim, width, width, width}, {Activation::ReLU, Activation::ReLU, Activation::ReLU}};
    s.actor = {{width, width, n_bins}, {Activation::Tanh, Activation::Identity}};
    s.critic = {{width, width, 1}, {Activation::Tanh, Activation::Identity}};
    return s;
  }

  void validate() const {
    fe.validate();
    actor.validate();
    critic.validate();
    if (actor.input_size() != fe.output_size() || critic.input_size() != fe.output_size())
      throw InvalidSpec("feature extractor width must match actor and critic input widths");
    if (critic.output_size() != 1) throw InvalidSpec("critic head must output a single value");
  }

  bool operator==(const AgentSpec&) const = default;
};

enum class Block { FeatureExtractor, Critic, Actor };

struct AgentParams {
  nn::ParamVector fe;
  nn::ParamVector actor;
  nn::ParamVector critic;

  static AgentParams init(const AgentSpec& spec, std::uint64_t seed) {
    return {nn::mlp_init(spec.fe, derive_seed({seed, 1})), nn::mlp_init(spec.actor, derive_seed({seed, 2})),
            nn::mlp_init(spec.critic, derive_seed({seed, 3}))};
  }

  const nn::ParamVector& get(Block b) const {
    switch (b) {
      case Block::FeatureExtractor: return fe;
      case Block::Critic: return critic;
      case Block::Actor: return actor;
    }
    return fe;
  }
  nn::ParamVector& get(Block b) { return const_cast<nn::ParamVector&>(std::as_const(*this).get(b)); }

  bool operator==(const AgentParams&) const = default;
};

inline const std::vector<Block>& all_blocks() {
  static const std::vector<Block> order{Block::FeatureExtractor, Block::Critic, Block::Actor};
  return order;
}

inline const std::vector<Block>& meta_blocks() {
  static const std::vector<Block> order{Block::FeatureExtractor, Block::Critic};
  return order;
}

inline std::string block_prefix(Block b) {
  switch (b) {
    case Block::FeatureExtractor: return "fe.";
    case Block::Critic: return "critic.";
    case Block::Actor: return "actor.";
  }
  return "";
}

// Concatenates the requested blocks in the given order (psi, Q, pi by
// default). The manifest of the result carries prefixed block names and
// offsets into the flat vector.
inline nn::ParamVector flatten_params(const AgentParams& a, const std::vector<Block>& blocks = all_blocks()) {
  nn::ParamVector out;
  for (Block b : blocks) {
    const auto& src = a.get(b);
    const std::size_t base = out.values.size();
    for (auto info : src.manifest) {
      info.name = block_prefix(b) + info.name;
      info.offset += base;
      out.manifest.push_back(std::move(info));
    }
    out.values.insert(out.values.end(), src.values.begin(), src.values.end());
  }
  return out;
}

// Inverse of flatten_params. `shape` supplies the per-block manifests; blocks
// not listed in `blocks` are copied from `shape` unchanged.
inline AgentParams unflatten_params(const nn::ParamVector& flat, const AgentParams& shape,
                                    const std::vector<Block>& blocks = all_blocks()) {
  std::size_t expected = 0;
  for (Block b : blocks) expected += shape.get(b).size();
  if (flat.size() != expected || nn::manifest_size(flat.manifest) != flat.size())
    throw DimensionMismatch("flat parameter vector does not match the agent manifests");
  AgentParams out = shape;
  std::size_t off = 0;
  std::size_t m = 0;
  for (Block b : blocks) {
    auto& dst = out.get(b);
    for (const auto& info : dst.manifest) {
      if (m >= flat.manifest.size() || flat.manifest[m].rows != info.rows || flat.manifest[m].cols != info.cols)
        throw DimensionMismatch("manifest mismatch while unflattening block " + info.name);
      ++m;
    }
    std::copy_n(flat.values.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.values.begin());
    off += dst.size();
  }
  return out;
}

}  // namespace cfe
