#include "falcon/tree.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace falcon {

void TreeShape::validate() const {
  if (k < 1) raise(ErrorKind::Validation, "tree '" + name + "': k must be >= 1");
  if (levels.empty()) {
    raise(ErrorKind::Validation, "tree '" + name + "': no levels");
  }
  if (levels[0].size() != 1) {
    raise(ErrorKind::Validation,
          "tree '" + name + "': level 0 describes the single root block and "
          "must hold exactly one branching entry");
  }
  const int64_t n = levels[0][0];
  if (n < 1) {
    raise(ErrorKind::Validation, "tree '" + name + "': root fan-out must be >= 1");
  }
  for (size_t l = 1; l < levels.size(); ++l) {
    if (static_cast<int64_t>(levels[l].size()) != n) {
      raise(ErrorKind::Validation,
            "tree '" + name + "': inconsistent branching, level " +
                std::to_string(l) + " lists " + std::to_string(levels[l].size()) +
                " blocks but every level carries " + std::to_string(n));
    }
    int64_t total = 0;
    for (int64_t m : levels[l]) {
      if (m < 0) {
        raise(ErrorKind::Validation, "tree '" + name + "': negative branching");
      }
      total += m;
    }
    if (total != n) {
      raise(ErrorKind::Validation,
            "tree '" + name + "': inconsistent branching, level " +
                std::to_string(l) + " spawns " + std::to_string(total) +
                " blocks instead of " + std::to_string(n));
    }
  }
}

namespace {

size_t line_of_byte(const std::string& text, size_t byte) {
  size_t line = 1;
  for (size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') ++line;
  }
  return line;
}

int64_t json_int(const nlohmann::json& j, const std::string& what) {
  if (!j.is_number_integer()) {
    raise(ErrorKind::Parse, "tree config: " + what + " must be an integer");
  }
  return j.get<int64_t>();
}

}  // namespace

TreeShape parse_tree_config(const std::string& text) {
  using nlohmann::json;
  std::vector<std::set<std::string>> scopes;
  json doc;
  try {
    json::parser_callback_t cb = [&scopes](int, json::parse_event_t event,
                                           json& parsed) {
      switch (event) {
        case json::parse_event_t::object_start:
          scopes.emplace_back();
          break;
        case json::parse_event_t::object_end:
          scopes.pop_back();
          break;
        case json::parse_event_t::key: {
          auto key = parsed.get<std::string>();
          if (!scopes.back().insert(key).second) {
            raise(ErrorKind::Parse, "tree config: duplicate key '" + key + "'");
          }
          break;
        }
        default:
          break;
      }
      return true;
    };
    doc = json::parse(text, cb);
  } catch (const json::parse_error& e) {
    size_t byte = e.byte > 0 ? e.byte - 1 : 0;
    raise(ErrorKind::Parse, "tree config line " +
                                std::to_string(line_of_byte(text, byte)) +
                                ": " + e.what());
  }

  if (!doc.is_object()) raise(ErrorKind::Parse, "tree config: expected an object");
  TreeShape shape;
  shape.name = doc.value("name", std::string("unnamed"));
  if (!doc.contains("k")) raise(ErrorKind::Parse, "tree config: missing 'k'");
  shape.k = json_int(doc.at("k"), "'k'");
  if (!doc.contains("levels") || !doc.at("levels").is_array() ||
      doc.at("levels").empty()) {
    raise(ErrorKind::Parse, "tree config: 'levels' must be a nonempty array");
  }
  for (const auto& level : doc.at("levels")) {
    if (!level.is_object() || !level.contains("branching") ||
        !level.at("branching").is_array() || level.at("branching").empty()) {
      raise(ErrorKind::Parse,
            "tree config: each level needs a nonempty 'branching' array");
    }
    std::vector<int64_t> branching;
    for (const auto& m : level.at("branching")) {
      branching.push_back(json_int(m, "branching entry"));
    }
    shape.levels.push_back(std::move(branching));
  }
  shape.validate();
  return shape;
}

TreeShape load_tree_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) raise(ErrorKind::Io, "cannot open tree config '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_tree_config(buf.str());
}

TreeShape chain_shape(int64_t k, int64_t passes) {
  TreeShape s;
  s.name = "chain";
  s.k = k;
  s.levels.assign(static_cast<size_t>(passes), {1});
  s.validate();
  return s;
}

bool DraftTree::is_ancestor(int64_t anc, int64_t node) const {
  int64_t cur = nodes[static_cast<size_t>(node)].parent;
  while (cur >= 0) {
    if (cur == anc) return true;
    cur = nodes[static_cast<size_t>(cur)].parent;
  }
  return false;
}

FlattenedTree flatten_tree(const DraftTree& tree, int64_t prefix_len) {
  if (tree.size() == 0) raise(ErrorKind::Contract, "flatten_tree: empty tree");
  if (prefix_len < 0) raise(ErrorKind::Dimension, "flatten_tree: negative prefix");
  const int64_t t = tree.size();
  const int64_t total = prefix_len + t;

  FlattenedTree flat;
  flat.tokens.reserve(static_cast<size_t>(t));
  flat.positions.reserve(static_cast<size_t>(t));
  for (const DraftNode& n : tree.nodes) {
    flat.tokens.push_back(n.token);
    flat.positions.push_back(prefix_len + n.depth);
  }

  flat.mask.prefix_len = prefix_len;
  flat.mask.node_count = t;
  flat.mask.bits = BoolMatrix(total);
  for (int64_t i = 0; i < prefix_len; ++i) {
    for (int64_t j = 0; j < prefix_len; ++j) {
      flat.mask.bits.set(i, j, (j / tree.k) <= (i / tree.k));
    }
  }
  for (int64_t a = 0; a < t; ++a) {
    const int64_t i = prefix_len + a;
    for (int64_t j = 0; j < prefix_len; ++j) flat.mask.bits.set(i, j, true);
    for (int64_t b = 0; b < t; ++b) {
      bool ok = tree.nodes[a].block == tree.nodes[b].block ||
                tree.is_ancestor(b, a);
      if (ok) flat.mask.bits.set(i, prefix_len + b, true);
    }
  }
  return flat;
}

BoolMatrix tree_verification_mask(const DraftTree& tree, int64_t prefix_len) {
  const int64_t t = tree.size();
  const int64_t total = prefix_len + t;
  BoolMatrix m(total);
  for (int64_t i = 0; i < prefix_len; ++i) {
    for (int64_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  for (int64_t a = 0; a < t; ++a) {
    const int64_t i = prefix_len + a;
    for (int64_t j = 0; j < prefix_len; ++j) m.set(i, j, true);
    m.set(i, i, true);
    for (int64_t b = 0; b < t; ++b) {
      if (tree.is_ancestor(b, a)) m.set(i, prefix_len + b, true);
    }
  }
  return m;
}

namespace {

// token ids ordered by (logit desc, id asc)
std::vector<int64_t> ranked_tokens(const Scalar* logits, int64_t vocab,
                                   int64_t count) {
  std::vector<int64_t> ids(static_cast<size_t>(vocab));
  std::iota(ids.begin(), ids.end(), 0);
  auto better = [logits](int64_t a, int64_t b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  };
  count = std::min(count, vocab);
  std::partial_sort(ids.begin(), ids.begin() + count, ids.end(), better);
  ids.resize(static_cast<size_t>(count));
  return ids;
}

// Child blocks spread over candidate ranks of the block's first two
// positions, enumerated along anti-diagonals: (0,0), (1,0), (0,1), (2,0),
// (1,1), (0,2), ... Later positions always take the argmax. Sibling blocks
// may therefore share a first token and diverge at the second; verification
// walks every matching child.
std::pair<int64_t, int64_t> child_rank_pair(int64_t c) {
  int64_t s = 0;
  while (c > s) {
    c -= s + 1;
    ++s;
  }
  return {s - c, c};
}

}  // namespace

DraftTree build_draft_tree(const DrafterModel& drafter,
                           const Tensor& prefix_features,
                           const TokenSeq& prefix_tokens,
                           const TreeShape& shape, int64_t passes) {
  shape.validate();
  const ModelConfig& cfg = drafter.config();
  if (shape.k != cfg.k) {
    raise(ErrorKind::Validation, "tree k=" + std::to_string(shape.k) +
                                     " does not match drafter k=" +
                                     std::to_string(cfg.k));
  }
  if (passes < 1 || passes > shape.passes()) {
    raise(ErrorKind::Validation, "passes must lie in [1, " +
                                     std::to_string(shape.passes()) + "]");
  }
  const int64_t k = cfg.k;
  const int64_t h = cfg.hidden_dim;
  const int64_t p = static_cast<int64_t>(prefix_tokens.size());
  if (p < k) {
    raise(ErrorKind::Contract, "drafting needs at least k=" + std::to_string(k) +
                                   " committed tokens, have " + std::to_string(p));
  }
  if (prefix_features.rank() != 2 || prefix_features.dim(0) != p ||
      prefix_features.dim(1) != h) {
    raise(ErrorKind::Dimension, "prefix features " +
                                    shape_str(prefix_features.shape()) +
                                    " do not cover " + std::to_string(p) +
                                    " committed tokens");
  }
  const int64_t n = shape.nodes_per_level();
  if (n > cfg.vocab_size) {
    raise(ErrorKind::Validation, "root fan-out exceeds vocabulary");
  }
  if (p + k * passes > cfg.context_len) {
    raise(ErrorKind::Domain, "context overflow: prefix " + std::to_string(p) +
                                 " plus " + std::to_string(k * passes) +
                                 " drafted positions exceed context " +
                                 std::to_string(cfg.context_len));
  }

  // Drafter input rows pair token t_i with the feature one step behind it.
  std::vector<Scalar> shifted(static_cast<size_t>(p * h), 0.0);
  const auto& pf = prefix_features.values();
  for (int64_t i = 1; i < p; ++i) {
    std::copy(pf.begin() + (i - 1) * h, pf.begin() + i * h,
              shifted.begin() + i * h);
  }

  DraftTree tree;
  tree.k = k;
  std::vector<std::vector<int64_t>> level_blocks;  // block ids per level

  for (int64_t pass = 1; pass <= passes; ++pass) {
    const int64_t t = tree.size();
    const int64_t rows = p + t;

    std::vector<Scalar> feat(static_cast<size_t>(rows * h));
    std::copy(shifted.begin(), shifted.end(), feat.begin());
    TokenSeq tokens = prefix_tokens;
    std::vector<int64_t> positions(static_cast<size_t>(rows));
    std::vector<int64_t> parents(static_cast<size_t>(rows));
    for (int64_t i = 0; i < p; ++i) {
      positions[i] = i;
      parents[i] = i - 1;
    }
    tokens.resize(static_cast<size_t>(rows));
    for (int64_t a = 0; a < t; ++a) {
      const DraftNode& node = tree.nodes[static_cast<size_t>(a)];
      std::copy(node.feature.begin(), node.feature.end(),
                feat.begin() + (p + a) * h);
      tokens[static_cast<size_t>(p + a)] = node.token;
      positions[static_cast<size_t>(p + a)] = p + node.depth;
      parents[static_cast<size_t>(p + a)] =
          node.parent < 0 ? p - 1 : p + node.parent;
    }

    BoolMatrix mask = t == 0 ? build_relaxed_mask(p, k).bits
                             : flatten_tree(tree, p).mask.bits;
    DrafterResult out = drafter.forward_rows(
        Tensor::from({rows, h}, std::move(feat)), tokens, positions, parents,
        mask, /*want_logits=*/false);

    // Rows whose outputs seed this pass's expansions: the prefix tail for
    // the root, the parent block's k rows afterwards.
    struct Expansion {
      int64_t source_row;  // first of k consecutive rows
      int64_t parent_block;
      int64_t fanout;
    };
    std::vector<Expansion> expansions;
    if (pass == 1) {
      expansions.push_back({p - k, -1, shape.levels[0][0]});
    } else {
      const auto& prev = level_blocks[static_cast<size_t>(pass - 2)];
      const auto& branching = shape.levels[static_cast<size_t>(pass - 1)];
      for (size_t i = 0; i < prev.size(); ++i) {
        if (branching[i] == 0) continue;
        // each block owns k consecutive nodes starting at block_id * k
        expansions.push_back({p + prev[i] * k, prev[i], branching[i]});
      }
    }

    // One head application over all source rows of this pass.
    std::vector<int64_t> src_rows;
    for (const Expansion& e : expansions) {
      for (int64_t d = 0; d < k; ++d) src_rows.push_back(e.source_row + d);
    }
    Tensor src_feat = gather_rows(out.pred_features, src_rows);
    Tensor logits = drafter.target().head(src_feat);
    const int64_t vocab = cfg.vocab_size;
    const auto& lv = logits.values();
    const auto& fv = src_feat.values();

    std::vector<int64_t> made;
    int64_t cursor = 0;
    for (const Expansion& e : expansions) {
      // enough ranked candidates at the first two positions for the widest
      // rank pair this fanout can request
      const int64_t max_rank = std::min<int64_t>(e.fanout, vocab);
      std::vector<std::vector<int64_t>> ranks(static_cast<size_t>(k));
      for (int64_t d = 0; d < k; ++d) {
        ranks[static_cast<size_t>(d)] = ranked_tokens(
            lv.data() + (cursor + d) * vocab, vocab, d < 2 ? max_rank : 1);
      }
      const int64_t parent_last_node =
          e.parent_block < 0 ? -1 : e.parent_block * k + k - 1;
      for (int64_t c = 0; c < e.fanout; ++c) {
        auto [r0, r1] = child_rank_pair(c);
        if (k == 1) r0 = c;  // single position: plain rank order
        r0 = std::min(r0, vocab - 1);
        r1 = std::min(r1, vocab - 1);
        const int64_t block_id = tree.block_count();
        tree.block_parent.push_back(e.parent_block);
        tree.block_level.push_back(pass);
        made.push_back(block_id);
        for (int64_t d = 0; d < k; ++d) {
          int64_t rank = 0;
          if (d == 0) rank = r0;
          if (d == 1 && k > 1) rank = r1;
          DraftNode node;
          node.token = ranks[static_cast<size_t>(d)][static_cast<size_t>(rank)];
          node.parent = d == 0 ? parent_last_node : tree.size() - 1;
          node.depth = (pass - 1) * k + d;
          node.block = block_id;
          node.score = lv[(cursor + d) * vocab + node.token];
          node.feature.assign(fv.begin() + (cursor + d) * h,
                              fv.begin() + (cursor + d + 1) * h);
          tree.nodes.push_back(std::move(node));
        }
      }
      cursor += k;
    }
    level_blocks.push_back(std::move(made));
  }
  return tree;
}

}  // namespace falcon
