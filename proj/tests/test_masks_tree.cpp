#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "falcon/mask.hpp"
#include "falcon/rng.hpp"
#include "falcon/tree.hpp"

using namespace falcon;

TEST_CASE("relaxed mask degenerates to strict causal at k=1") {
  RelaxedCausalMask m = build_relaxed_mask(4, 1);
  CHECK(m.bits == strict_causal_mask(4));
}

TEST_CASE("relaxed mask k=2 block visibility") {
  RelaxedCausalMask m = build_relaxed_mask(4, 2);
  // rows 0,1 see cols {0,1}; rows 2,3 see everything
  for (int64_t i : {0, 1}) {
    CHECK(m.allowed(i, 0));
    CHECK(m.allowed(i, 1));
    CHECK_FALSE(m.allowed(i, 2));
    CHECK_FALSE(m.allowed(i, 3));
  }
  for (int64_t i : {2, 3}) {
    for (int64_t j = 0; j < 4; ++j) CHECK(m.allowed(i, j));
  }
}

TEST_CASE("relaxed mask handles a ragged tail block") {
  RelaxedCausalMask m = build_relaxed_mask(6, 4);
  // first four positions are mutually visible
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t j = 0; j < 4; ++j) CHECK(m.allowed(i, j));
    for (int64_t j = 4; j < 6; ++j) CHECK_FALSE(m.allowed(i, j));
  }
  // tail positions 4,5 form a partial block and see everything
  for (int64_t i = 4; i < 6; ++i) {
    for (int64_t j = 0; j < 6; ++j) CHECK(m.allowed(i, j));
  }
}

TEST_CASE("relaxed mask matches the block rule on every cell") {
  for (int64_t n : {1, 7, 16, 64}) {
    for (int64_t k : {1, 2, 3, 4, 5}) {
      RelaxedCausalMask m = build_relaxed_mask(n, k);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          CHECK(m.allowed(i, j) == (j / k <= i / k));
        }
      }
    }
  }
}

TEST_CASE("tree config parsing") {
  const std::string good = R"({
    "name": "wide-root",
    "k": 2,
    "levels": [
      {"branching": [20]},
      {"branching": [10, 5, 3, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]}
    ]
  })";
  TreeShape s = parse_tree_config(good);
  CHECK(s.name == "wide-root");
  CHECK(s.k == 2);
  CHECK(s.levels[0][0] == 20);  // root fans out to 20 children
  CHECK(s.passes() == 2);
  CHECK(s.proposed_tokens() == 2 * 2 * 20);

  SUBCASE("chain: block count equals depth") {
    TreeShape chain = chain_shape(2, 4);
    CHECK(chain.total_blocks() == 4);
    CHECK(chain.passes() == 4);
  }
  SUBCASE("duplicate key fails") {
    CHECK_THROWS_WITH_AS(
        parse_tree_config(R"({"k": 2, "k": 3, "levels": [{"branching": [1]}]})"),
        doctest::Contains("duplicate key"), Error);
  }
  SUBCASE("malformed text reports the line") {
    try {
      parse_tree_config("{\n  \"k\": 2,\n  \"levels\": [oops]\n}");
      FAIL("expected a parse error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Parse);
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SUBCASE("inconsistent branching fails validation") {
    CHECK_THROWS_WITH_AS(
        parse_tree_config(
            R"({"k": 2, "levels": [{"branching": [2]}, {"branching": [2, 1]}]})"),
        doctest::Contains("inconsistent branching"), Error);
    CHECK_THROWS_AS(
        parse_tree_config(
            R"({"k": 2, "levels": [{"branching": [2]}, {"branching": [2]}]})"),
        Error);  // wrong entry count
    CHECK_THROWS_AS(parse_tree_config(R"({"k": 0, "levels": [{"branching": [1]}]})"),
                    Error);
  }
}

TEST_CASE("token-count identity holds for fuzzed shapes") {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    TreeShape s;
    s.name = "fuzz";
    s.k = 1 + static_cast<int64_t>(rng.next_index(4));
    const int64_t n = 1 + static_cast<int64_t>(rng.next_index(5));
    const int64_t mf = 1 + static_cast<int64_t>(rng.next_index(4));
    s.levels.push_back({n});
    for (int64_t l = 1; l < mf; ++l) {
      // distribute n children over n blocks
      std::vector<int64_t> branching(static_cast<size_t>(n), 0);
      for (int64_t c = 0; c < n; ++c) {
        branching[rng.next_index(static_cast<uint64_t>(n))] += 1;
      }
      s.levels.push_back(std::move(branching));
    }
    s.validate();
    CHECK(s.proposed_tokens() == s.k * s.passes() * s.nodes_per_level());
    // per-level count: every level holds exactly n blocks of k tokens
    CHECK(s.total_blocks() == n * mf);
  }
}

namespace {

// brute-force oracle: ancestors by explicit path walk, plus block and prefix
BoolMatrix oracle_mask(const DraftTree& tree, int64_t prefix_len) {
  const int64_t t = tree.size();
  BoolMatrix m(prefix_len + t);
  for (int64_t i = 0; i < prefix_len; ++i) {
    for (int64_t j = 0; j < prefix_len; ++j) {
      if (j / tree.k <= i / tree.k) m.set(i, j, true);
    }
  }
  for (int64_t a = 0; a < t; ++a) {
    std::set<int64_t> allowed;
    int64_t cur = a;
    while (cur >= 0) {  // path walk collects ancestors incl. self
      allowed.insert(cur);
      cur = tree.nodes[static_cast<size_t>(cur)].parent;
    }
    for (int64_t b = 0; b < t; ++b) {
      if (tree.nodes[static_cast<size_t>(b)].block ==
          tree.nodes[static_cast<size_t>(a)].block) {
        allowed.insert(b);
      }
    }
    for (int64_t j = 0; j < prefix_len; ++j) m.set(prefix_len + a, j, true);
    for (int64_t b : allowed) m.set(prefix_len + a, prefix_len + b, true);
  }
  return m;
}

DraftTree random_tree(Rng& rng, int64_t max_nodes) {
  DraftTree tree;
  tree.k = 1 + static_cast<int64_t>(rng.next_index(3));
  const int64_t max_blocks = std::max<int64_t>(1, max_nodes / tree.k);
  const int64_t blocks =
      1 + static_cast<int64_t>(rng.next_index(static_cast<uint64_t>(max_blocks)));
  for (int64_t b = 0; b < blocks; ++b) {
    int64_t parent_block =
        b == 0 ? -1
               : static_cast<int64_t>(rng.next_index(static_cast<uint64_t>(b))) - 1;
    // parent -1 keeps a forest of anchor children possible
    int64_t parent_node = parent_block < 0 ? -1 : parent_block * tree.k + tree.k - 1;
    int64_t parent_depth =
        parent_node < 0 ? -1 : tree.nodes[static_cast<size_t>(parent_node)].depth;
    tree.block_parent.push_back(parent_block);
    tree.block_level.push_back(parent_depth / tree.k + 2);
    for (int64_t d = 0; d < tree.k; ++d) {
      DraftNode node;
      node.token = static_cast<TokenId>(rng.next_index(200));
      node.parent = d == 0 ? parent_node : tree.size() - 1;
      node.depth = parent_depth + 1 + d;
      node.block = b;
      tree.nodes.push_back(node);
    }
  }
  return tree;
}

}  // namespace

TEST_CASE("flattened chain mask equals the relaxed causal mask") {
  for (int64_t k : {1, 3}) {
    DraftTree tree;
    tree.k = k;
    const int64_t blocks = k == 1 ? 3 : 1;
    for (int64_t b = 0; b < blocks; ++b) {
      tree.block_parent.push_back(b - 1);
      tree.block_level.push_back(b + 1);
      for (int64_t d = 0; d < k; ++d) {
        DraftNode n;
        n.token = b * k + d;
        n.parent = tree.size() - 1;  // strict chain
        n.depth = b * k + d;
        n.block = b;
        tree.nodes.push_back(n);
      }
    }
    FlattenedTree flat = flatten_tree(tree, 0);
    CHECK(flat.mask.bits == build_relaxed_mask(3, k).bits);
    CHECK(flat.tokens.size() == 3);
    CHECK(flat.positions == std::vector<int64_t>{0, 1, 2});
  }
}

TEST_CASE("sibling subtrees are mutually invisible") {
  DraftTree tree;
  tree.k = 2;
  for (int64_t b = 0; b < 2; ++b) {  // two children of the anchor
    tree.block_parent.push_back(-1);
    tree.block_level.push_back(1);
    for (int64_t d = 0; d < 2; ++d) {
      DraftNode n;
      n.token = 10 * b + d;
      n.parent = d == 0 ? -1 : tree.size() - 1;
      n.depth = d;
      n.block = b;
      tree.nodes.push_back(n);
    }
  }
  FlattenedTree flat = flatten_tree(tree, 3);
  // child A's rows disallow child B's columns and vice versa
  for (int64_t a : {0, 1}) {
    for (int64_t b : {2, 3}) {
      CHECK_FALSE(flat.mask.bits.get(3 + a, 3 + b));
      CHECK_FALSE(flat.mask.bits.get(3 + b, 3 + a));
    }
  }
  // all tree rows see the committed prefix
  for (int64_t a = 0; a < 4; ++a) {
    for (int64_t j = 0; j < 3; ++j) CHECK(flat.mask.bits.get(3 + a, j));
  }
  // parallel branches reuse position indices
  CHECK(flat.positions == std::vector<int64_t>{3, 4, 3, 4});
}

TEST_CASE("flattened masks equal the ancestor-walk oracle on random trees") {
  Rng rng(909);
  for (int trial = 0; trial < 1000; ++trial) {
    DraftTree tree = random_tree(rng, 12);
    const int64_t prefix = static_cast<int64_t>(rng.next_index(5));
    FlattenedTree flat = flatten_tree(tree, prefix);
    CHECK(flat.mask.bits == oracle_mask(tree, prefix));
  }
}

TEST_CASE("verification mask is the ancestor-only restriction") {
  Rng rng(910);
  for (int trial = 0; trial < 200; ++trial) {
    DraftTree tree = random_tree(rng, 10);
    const int64_t p = 2;
    BoolMatrix vm = tree_verification_mask(tree, p);
    for (int64_t a = 0; a < tree.size(); ++a) {
      for (int64_t b = 0; b < tree.size(); ++b) {
        bool expect = a == b || tree.is_ancestor(b, a);
        CHECK(vm.get(p + a, p + b) == expect);
      }
    }
    // prefix is strict causal
    CHECK(vm.get(0, 0));
    CHECK_FALSE(vm.get(0, 1));
  }
}
