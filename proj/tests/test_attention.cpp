#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"
#include "vtgrasp/attention.hpp"
#include "vtgrasp/gradcheck.hpp"
#include "vtgrasp/slip_net.hpp"
#include "vtgrasp/touch_net.hpp"

using namespace vtgrasp;

namespace {

void set_identity(Linear& l) {
  l.weight.value.fill(0.0f);
  for (std::size_t i = 0; i < std::min(l.in_features(), l.out_features()); ++i) l.weight.value.at(i, i) = 1.0f;
  l.bias.value.fill(0.0f);
}

TokenGrid random_grid(std::size_t n, std::size_t f, std::size_t d, Rng& rng) {
  return {Tensor::normal({n * f + 1, d}, rng, 1.0f), n, f};
}

}  // namespace

// ---------------------------------------------------------------------------
// self_attention

TEST(SelfAttention, SingleKeyReturnsItsValue) {
  Rng rng(1);
  const Tensor q = Tensor::normal({3, 4}, rng, 1.0f), k = Tensor::normal({1, 4}, rng, 1.0f);
  const Tensor v = Tensor::normal({1, 5}, rng, 1.0f);
  const Tensor y = self_attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y.at(i, c), v.at(0, c));
}

TEST(SelfAttention, OrthogonalQueryAveragesValues) {
  const Tensor q = Tensor::matrix({{0, 1}});
  const Tensor k = Tensor::matrix({{1, 0}, {2, 0}, {-3, 0}});
  const Tensor v = Tensor::matrix({{1, 2}, {3, 4}, {8, 0}});
  const Tensor y = self_attention(q, k, v);
  EXPECT_NEAR(y[0], 4.0f, 1e-6);
  EXPECT_NEAR(y[1], 2.0f, 1e-6);
}

TEST(SelfAttention, MatchesDenseOracle) {
  Rng rng(7);
  const Tensor q = Tensor::normal({2, 2}, rng, 1.0f), k = Tensor::normal({3, 2}, rng, 1.0f);
  const Tensor v = Tensor::normal({3, 3}, rng, 1.0f);
  const Tensor expected = oracle::to_tensor(oracle::masked_attention(
      oracle::to_matrix(q), oracle::to_matrix(k), oracle::to_matrix(v), [](std::size_t, std::size_t) { return true; }));
  EXPECT_LT(max_abs_diff(self_attention(q, k, v), expected), 1e-6f);
}

TEST(SelfAttention, KeyWidthMismatch) {
  EXPECT_THROW(self_attention(Tensor({2, 3}), Tensor({2, 4}), Tensor({2, 4})), DimensionError);
}

// ---------------------------------------------------------------------------
// multi-head attention

TEST(MultiHead, ConfigInvariants) {
  EXPECT_EQ((MultiHeadConfig{768, 12}).head_dim(), 64u);
  EXPECT_THROW((MultiHeadConfig{10, 3}).validate(), ConfigError);
  EXPECT_THROW((MultiHeadConfig{8, 2, 1.0f}).validate(), ConfigError);
}

TEST(MultiHead, SingleHeadIdentityProjectionsEqualSelfAttention) {
  Rng rng(3);
  MultiHeadAttention mha({6, 1}, rng);
  mha.qkv.weight.value.fill(0.0f);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 6; ++i) mha.qkv.weight.value.at(i, b * 6 + i) = 1.0f;
  set_identity(mha.out);
  const Tensor x = Tensor::normal({5, 6}, rng, 1.0f);
  EXPECT_TRUE(bit_equal(multi_head_attention(x, mha), self_attention(x, x, x)));
}

TEST(MultiHead, MatchesPerHeadOracle) {
  Rng rng(12);
  MultiHeadAttention mha({12, 3}, rng);
  for (float& w : mha.qkv.weight.value.data()) w *= 20.0f;
  const Tensor x = Tensor::normal({7, 12}, rng, 1.0f);
  const Tensor expected = oracle::to_tensor(
      oracle::multi_head(oracle::to_matrix(x), mha, [](std::size_t, std::size_t) { return true; }));
  EXPECT_LT(max_abs_diff(multi_head_attention(x, mha), expected), 1e-5f);
}

TEST(MultiHead, OutputShapeMatchesInput) {
  Rng rng(4);
  MultiHeadAttention mha({16, 4}, rng);
  for (std::size_t n : {1u, 5u, 197u}) {
    EXPECT_EQ(multi_head_attention(Tensor::normal({n, 16}, rng, 1.0f), mha).shape(), (Shape{n, 16}));
  }
  EXPECT_THROW(multi_head_attention(Tensor({3, 15}), mha), DimensionError);
}

TEST(MultiHead, AttentionRowsSumToOne) {
  Rng rng(5);
  MultiHeadAttention mha({16, 4}, rng);
  for (float& w : mha.qkv.weight.value.data()) w *= 50.0f;
  const Tensor x = Tensor::normal({9, 16}, rng, 1.0f);
  for (const KeySets& keys : {KeySets::dense(9), temporal_key_sets(4, 2), spatial_key_sets(2, 4)}) {
    AttentionCache cache;
    mha.forward(x, keys, &cache);
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t i = 0; i < 9; ++i) {
        double s = 0.0;
        for (float w : mha.weights(cache, keys, h, i)) s += w;
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(MultiHead, DropoutOnlyWhenRequested) {
  Rng rng(6);
  MultiHeadAttention mha({8, 2, 0.5f}, rng);
  const Tensor x = Tensor::normal({4, 8}, rng, 1.0f);
  const Tensor plain = multi_head_attention(x, mha);
  Rng drop(1);
  const Tensor dropped = mha.forward(x, KeySets::dense(4), nullptr, &drop);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    if (dropped[i] == 0.0f) ++zeros;
    else EXPECT_FLOAT_EQ(dropped[i], 2.0f * plain[i]);
  }
  EXPECT_GT(zeros, 0u);
}

// ---------------------------------------------------------------------------
// Patch embedding

TEST(PatchEmbed, PaperGeometryTokenCount) {
  Rng rng(1);
  PatchEmbedding embed(3, 224, 16, 8, 8, rng);
  EXPECT_EQ(embed.patches(), 196u);
  const TokenGrid grid = patch_embed(Tensor({8, 3, 224, 224}, 0.5f), embed);
  EXPECT_EQ(grid.tokens.dim(0), 1569u);
  EXPECT_EQ(grid.patches, 196u);
}

TEST(PatchEmbed, WholeImageIsOnePatch) {
  Rng rng(2);
  PatchEmbedding embed(1, 4, 4, 2, 6, rng);
  const TokenGrid grid = patch_embed(Tensor::normal({2, 1, 4, 4}, rng, 1.0f), embed);
  EXPECT_EQ(grid.patches, 1u);
  EXPECT_EQ(grid.count(), 3u);
}

TEST(PatchEmbed, IndivisibleImage) {
  Rng rng(3);
  EXPECT_THROW(extract_patches(Tensor({1, 3, 33, 33}), 16), GeometryError);
  EXPECT_THROW(PatchEmbedding(3, 33, 16, 1, 4, rng), GeometryError);
  PatchEmbedding embed(3, 32, 16, 1, 4, rng);
  EXPECT_THROW(embed.forward(Tensor({1, 3, 33, 33})), GeometryError);
}

TEST(PatchEmbed, TokensFollowIndexLayout) {
  Rng rng(4);
  PatchEmbedding embed(1, 4, 2, 3, 5, rng);
  const Tensor clip = Tensor::normal({3, 1, 4, 4}, rng, 1.0f);
  const TokenGrid grid = embed.forward(clip);
  const Tensor rows = embed.proj.forward(extract_patches(clip, 2));
  for (std::size_t t = 1; t <= 3; ++t)
    for (std::size_t p = 1; p <= 4; ++p)
      for (std::size_t c = 0; c < 5; ++c) {
        const float expect = rows.at((t - 1) * 4 + p - 1, c) + embed.pos_spatial.value.at(p, c) +
                             embed.pos_temporal.value.at(t - 1, c);
        EXPECT_EQ(grid.tokens.at(grid.index(p, t), c), expect);
      }
  for (std::size_t c = 0; c < 5; ++c)
    EXPECT_EQ(grid.tokens.at(0, c), embed.cls.value[c] + embed.pos_spatial.value.at(0, c));
}

// ---------------------------------------------------------------------------
// Transformer block

TEST(TransformerBlock, ZeroedOutputProjectionsGiveIdentity) {
  Rng rng(8);
  TransformerBlock block({8, 2}, 16, Activation::gelu, 1e-6f, rng);
  block.attn.out.weight.value.fill(0.0f);
  block.mlp.fc2.weight.value.fill(0.0f);
  const TokenGrid x = random_grid(3, 2, 8, rng);
  EXPECT_TRUE(bit_equal(transformer_block(x, block).tokens, x.tokens));
}

TEST(TransformerBlock, MlpWidths) {
  Rng rng(9);
  const SlipNetConfig slip;
  EXPECT_EQ(slip.intermediate, 3078u);
  TransformerBlock block(slip.attention(), slip.intermediate, slip.activation, slip.ln_eps, rng);
  EXPECT_EQ(block.mlp.hidden_width(), 3078u);
  EXPECT_EQ(TouchNetConfig{}.mlp_hidden(0), 288u);
}

// ---------------------------------------------------------------------------
// Divided space-time attention

TEST(DividedAttention, KeySetsMatchDefinition) {
  const std::size_t n = 3, f = 4;
  const KeySets tk = temporal_key_sets(n, f), sk = spatial_key_sets(n, f);
  ASSERT_EQ(tk.queries(), n * f + 1);
  EXPECT_EQ(tk.count(0), n * f + 1);
  EXPECT_EQ(sk.count(0), n * f + 1);
  for (std::size_t i = 1; i <= n * f; ++i) {
    const auto qi = oracle::decode(i, n);
    ASSERT_EQ(tk.count(i), f + 1);
    ASSERT_EQ(sk.count(i), n + 1);
    EXPECT_EQ(tk.key(i, 0), 0u);
    for (std::size_t j = 1; j < tk.count(i); ++j) EXPECT_EQ(oracle::decode(tk.key(i, j), n).p, qi.p);
    for (std::size_t j = 1; j < sk.count(i); ++j) EXPECT_EQ(oracle::decode(sk.key(i, j), n).t, qi.t);
  }
}

TEST(DividedAttention, ComparisonsPerPatch) {
  EXPECT_EQ(comparisons_per_patch(196, 8), 206u);
  EXPECT_EQ(comparisons_per_patch(1, 1), 4u);
  EXPECT_EQ(count_divided_keys(temporal_key_sets(196, 8), spatial_key_sets(196, 8), 196, 8).total(), 206u);
}

TEST(DividedAttention, RuntimeKeyCountAtSmallGrid) {
  Rng rng(10);
  DividedAttention attn({8, 1}, 1e-6f, rng);
  DividedAttentionCache cache;
  attn.forward(random_grid(4, 2, 8, rng), &cache);
  EXPECT_EQ(cache.counts.temporal, 3u);
  EXPECT_EQ(cache.counts.spatial, 5u);
  EXPECT_EQ(cache.counts.total(), 8u);
}

TEST(DividedAttention, MatchesMaskedDenseOracle) {
  Rng rng(11);
  DividedAttention attn({8, 1}, 1e-6f, rng);
  const TokenGrid x = random_grid(4, 2, 8, rng);
  EXPECT_LT(max_abs_diff(divided_st_attention(x, attn).tokens, oracle::divided_attention(x, attn)), 1e-5f);
}

TEST(DividedAttention, MatchesOracleOnRandomGrids) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(8), f = 1 + rng.below(32 / n);
    const std::size_t heads = 1 + rng.below(3), d = heads * (2 + rng.below(4));
    Rng init(derive_seed(12, static_cast<std::uint64_t>(trial)));
    DividedAttention attn({d, heads}, 1e-6f, init);
    for (auto* mha : {&attn.temporal, &attn.spatial})
      for (float& w : mha->qkv.weight.value.data()) w *= 25.0f;
    const TokenGrid x = random_grid(n, f, d, rng);
    ASSERT_LT(max_abs_diff(divided_st_attention(x, attn).tokens, oracle::divided_attention(x, attn)), 1e-5f)
        << "N=" << n << " F=" << f << " D=" << d << " A=" << heads;
  }
}

TEST(DividedAttention, SingleFrameTemporalPassSeesSelfAndCls) {
  Rng rng(13);
  DividedAttention attn({4, 1}, 1e-6f, rng);
  DividedAttentionCache cache;
  attn.forward(random_grid(5, 1, 4, rng), &cache);
  const KeySets tk = temporal_key_sets(5, 1);
  for (std::size_t i = 1; i <= 5; ++i) {
    ASSERT_EQ(tk.count(i), 2u);
    EXPECT_EQ(tk.key(i, 0), 0u);
    EXPECT_EQ(tk.key(i, 1), i);
    double s = 0.0;
    for (float w : attn.temporal.weights(cache.temporal, tk, 0, i)) s += w;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(DividedAttention, MalformedGrid) {
  Rng rng(14);
  DividedAttention attn({4, 1}, 1e-6f, rng);
  EXPECT_THROW(attn.forward(TokenGrid{Tensor({6, 4}), 2, 2}), GeometryError);
}

TEST(DividedAttention, PatchPermutationEquivariance) {
  const std::size_t image = 8, patch = 4, frames = 2, d = 8, grid_w = image / patch, n = 4;
  Rng rng(15);
  PatchEmbedding embed(1, image, patch, frames, d, rng);
  DividedBlock block({d, 2}, 16, Activation::gelu, 1e-6f, rng);
  const Tensor clip = Tensor::normal({frames, 1, image, image}, rng, 1.0f);
  const std::vector<std::size_t> perm{2, 0, 3, 1};  // new position q holds old patch perm[q]

  Tensor moved(clip.shape());
  PatchEmbedding embed2 = embed;
  for (std::size_t q = 0; q < n; ++q) {
    const std::size_t src = perm[q];
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t i = 0; i < patch; ++i)
        for (std::size_t j = 0; j < patch; ++j)
          moved[(t * image + (q / grid_w) * patch + i) * image + (q % grid_w) * patch + j] =
              clip[(t * image + (src / grid_w) * patch + i) * image + (src % grid_w) * patch + j];
    for (std::size_t c = 0; c < d; ++c) embed2.pos_spatial.value.at(q + 1, c) = embed.pos_spatial.value.at(src + 1, c);
  }
  const TokenGrid a = block.forward(embed.forward(clip));
  const TokenGrid b = block.forward(embed2.forward(moved));
  for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(b.tokens.at(0, c), a.tokens.at(0, c), 1e-5);
  for (std::size_t t = 1; t <= frames; ++t)
    for (std::size_t q = 1; q <= n; ++q)
      for (std::size_t c = 0; c < d; ++c)
        EXPECT_NEAR(b.tokens.at(b.index(q, t), c), a.tokens.at(a.index(perm[q - 1] + 1, t), c), 1e-5);
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace {
constexpr double kGradTol = 1e-2;
// Composite blocks use a five-point stencil with a wide step: at 1e-3,
// single-precision rounding through the stacked forward passes alone reaches
// ~1e-2 relative error on some coordinates.
const GradCheckOptions kBlockStep{5e-2f, 0, 1e-2, true};
}

TEST(GradCheck, MultiHeadAttentionInput) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    MultiHeadAttention mha({8, 2}, rng);
    oracle::randomize(mha, seed);
    const KeySets keys = temporal_key_sets(2, 3);
    const DifferentiableOp op{"mha", [&](const Tensor& x) { return mha.forward(x, keys); },
                              [&](const Tensor& x, const Tensor& dy) {
                                AttentionCache cache;
                                mha.forward(x, keys, &cache);
                                return mha.backward(dy, keys, cache);
                              },
                              {}};
    EXPECT_LT(check_gradient(op, Tensor::normal({7, 8}, rng, 1.0f), seed, kBlockStep).max_rel_error, kGradTol);
  }
}

TEST(GradCheck, TransformerBlockInput) {
  for (std::uint64_t seed : {4u, 5u, 6u}) {
    Rng rng(seed);
    TransformerBlock block({8, 2}, 16, Activation::gelu, 1e-6f, rng);
    oracle::randomize(block, seed);
    const KeySets keys = KeySets::dense(5);
    const DifferentiableOp op{"transformer_block", [&](const Tensor& x) { return block.forward(x, keys); },
                              [&](const Tensor& x, const Tensor& dy) {
                                TransformerBlockCache cache;
                                block.forward(x, keys, &cache);
                                return block.backward(dy, keys, cache);
                              },
                              {}};
    EXPECT_LT(check_gradient(op, Tensor::normal({5, 8}, rng, 1.0f), seed, kBlockStep).max_rel_error, kGradTol);
  }
}

TEST(GradCheck, DividedBlockInput) {
  const std::size_t n = 4, f = 2, d = 8;
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    Rng rng(seed);
    DividedBlock block({d, 2}, 16, Activation::gelu, 1e-6f, rng);
    oracle::randomize(block, seed);
    const DifferentiableOp op{"divided_block",
                              [&](const Tensor& x) { return block.forward(TokenGrid{x, n, f}).tokens; },
                              [&](const Tensor& x, const Tensor& dy) {
                                DividedBlockCache cache;
                                block.forward(TokenGrid{x, n, f}, &cache);
                                return block.backward(dy, n, f, cache);
                              },
                              {}};
    EXPECT_LT(check_gradient(op, Tensor::normal({n * f + 1, d}, rng, 1.0f), seed, kBlockStep).max_rel_error, kGradTol);
  }
}

TEST(GradCheck, DividedBlockParameters) {
  const std::size_t n = 4, f = 2, d = 8;
  Rng rng(10);
  DividedBlock block({d, 2}, 16, Activation::gelu, 1e-6f, rng);
  oracle::randomize(block, 10);
  const Tensor x = Tensor::normal({n * f + 1, d}, rng, 1.0f);
  auto forward = [&] { return block.forward(TokenGrid{x, n, f}).tokens; };
  auto backward = [&](const Tensor& dy) {
    DividedBlockCache cache;
    block.forward(TokenGrid{x, n, f}, &cache);
    block.backward(dy, n, f, cache);
  };
  std::vector<std::pair<std::string, Param*>> params;
  block.visit("block", [&](const std::string& name, Param& p) { params.emplace_back(name, &p); });
  ASSERT_EQ(params.size(), 18u);
  for (auto& [name, p] : params) {
    const Tensor start = p->value;
    const auto r = check_gradient(oracle::param_op(name, *p, forward, backward), start, 10, kBlockStep);
    p->value = start;
    EXPECT_LT(r.max_rel_error, kGradTol) << name;
  }
}

TEST(GradCheck, PatchEmbeddingParameters) {
  Rng rng(11);
  PatchEmbedding embed(2, 8, 4, 3, 6, rng);
  oracle::randomize(embed, 11);
  const Tensor clip = Tensor::normal({3, 2, 8, 8}, rng, 1.0f);
  auto forward = [&] { return embed.forward(clip).tokens; };
  auto backward = [&](const Tensor& dy) {
    PatchEmbedCache cache;
    embed.forward(clip, &cache);
    embed.backward(dy, cache);
  };
  std::vector<std::pair<std::string, Param*>> params;
  embed.visit("embed", [&](const std::string& name, Param& p) { params.emplace_back(name, &p); });
  for (auto& [name, p] : params) {
    const Tensor start = p->value;
    const auto r = check_gradient(oracle::param_op(name, *p, forward, backward), start, 11, kBlockStep);
    p->value = start;
    EXPECT_LT(r.max_rel_error, kGradTol) << name;
  }
}
