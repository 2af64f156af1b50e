#pragma once

#include <string>
#include <vector>

#include "falcon/mask.hpp"
#include "falcon/model.hpp"

namespace falcon {

// Declarative tree layout. levels[0].branching = {n} is the fan-out of the
// committed-state anchor (the root block, i.e. the last k committed
// positions); pass l materializes block level l+1 from levels[l]. Every
// level holds exactly n blocks, so a full build over m_f = levels.size()
// passes proposes k * m_f * n tokens.
struct TreeShape {
  std::string name;
  int64_t k = 2;
  std::vector<std::vector<int64_t>> levels;  // branching per block, per level

  int64_t passes() const { return static_cast<int64_t>(levels.size()); }
  int64_t nodes_per_level() const { return levels.empty() ? 0 : levels[0][0]; }
  int64_t total_blocks() const { return passes() * nodes_per_level(); }
  int64_t proposed_tokens() const { return k * total_blocks(); }

  void validate() const;
};

// JSON schema: {"name": str, "k": int, "levels": [{"branching": [int...]}]}
TreeShape parse_tree_config(const std::string& text);
TreeShape load_tree_config(const std::string& path);

// A single-block-wide chain with the given number of passes (the
// tree-attention ablation baseline).
TreeShape chain_shape(int64_t k, int64_t passes);

struct DraftNode {
  TokenId token = 0;
  int64_t parent = -1;  // token-level parent; -1 anchors on the committed tail
  int64_t depth = 0;    // 0-based; verification position = prefix_len + depth
  int64_t block = 0;
  Scalar score = 0.0;              // selection-time logit
  std::vector<Scalar> feature;     // drafter estimate feeding this node's row
};

// Token tree in topological order (parents precede children). Blocks are
// k-node chains; the block tree mirrors the expansion structure.
struct DraftTree {
  int64_t k = 1;
  std::vector<DraftNode> nodes;
  std::vector<int64_t> block_parent;  // -1 = anchor
  std::vector<int64_t> block_level;   // 1-based creation pass

  int64_t size() const { return static_cast<int64_t>(nodes.size()); }
  int64_t block_count() const { return static_cast<int64_t>(block_parent.size()); }
  bool is_ancestor(int64_t anc, int64_t node) const;
};

// Visibility over [prefix rows | tree rows]. Prefix rows follow the relaxed
// k-block sequence rule among themselves; a tree row sees the whole prefix,
// its ancestors, and its own k-block.
struct TreeAttentionMask {
  int64_t prefix_len = 0;
  int64_t node_count = 0;
  BoolMatrix bits;  // (prefix_len + node_count)^2
};

struct FlattenedTree {
  TokenSeq tokens;                  // node order
  std::vector<int64_t> positions;   // prefix_len + depth
  TreeAttentionMask mask;
};

FlattenedTree flatten_tree(const DraftTree& tree, int64_t prefix_len);

// Ancestor-only variant used when the target verifies the tree: each tree
// row sees the prefix, its path, and itself, exactly as the equivalent
// linear sequence would.
BoolMatrix tree_verification_mask(const DraftTree& tree, int64_t prefix_len);

// Runs the drafter `passes` times and expands the shape level by level.
// prefix_features row i holds the target feature for committed position i.
// The first pass reads the last k committed rows; children of a block take
// the rank-c candidate at the block's first position (ties to the lower
// token id) and the argmax at the remaining k-1 positions.
DraftTree build_draft_tree(const DrafterModel& drafter,
                           const Tensor& prefix_features,
                           const TokenSeq& prefix_tokens,
                           const TreeShape& shape, int64_t passes);

}  // namespace falcon
