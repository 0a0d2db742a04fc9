#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "support/gradcheck.hpp"
#include "vitmix/encoder.hpp"

using namespace vitmix;

namespace {
// Small geometry for finite-difference work: P=4 patches, L=24 (V=1).
EncoderConfig tiny_config() {
  EncoderConfig c;
  c.channels = 3;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 24;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}
} // namespace

TEST_CASE("hidden dimension arithmetic") {
  REQUIRE(derive_hidden_dim(768, 3, 16) == 8);
  REQUIRE(derive_hidden_dim(1056, 3, 16) == 11);
  REQUIRE_THROWS_MATCHES(derive_hidden_dim(1024, 3, 16), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("divisible")));
  // the width the deeper variant jumps to, and the one it rejects
  REQUIRE(derive_hidden_dim(144, 3, 4) == 6);
  REQUIRE_THROWS_AS(derive_hidden_dim(128, 3, 4), ConfigError);
  // odd widths cannot split
  REQUIRE_THROWS_AS(derive_hidden_dim(97, 3, 4), ConfigError);
}

TEST_CASE("toy config derives V=4 and ~0.5M parameters") {
  EncoderConfig cfg; // defaults
  REQUIRE(cfg.hidden_v() == 4);
  REQUIRE(cfg.patch_count() == 64);
  VitEncoder<float> enc(cfg);
  Rng rng(1);
  enc.init(rng);
  REQUIRE(enc.parameter_count() > 400000);
  REQUIRE(enc.parameter_count() < 600000);
}

TEST_CASE("encode produces one embedding row per patch") {
  VitEncoder<float> enc;
  Rng rng(2);
  enc.init(rng);
  auto img = Tensor<float>::uniform({3, 32, 32}, rng);
  auto z = enc.encode(img);
  REQUIRE(z.shape() == Shape{64, 96});
}

TEST_CASE("duplicated batch entries embed identically and independently") {
  VitEncoder<float> enc;
  Rng rng(3);
  enc.init(rng);
  auto img = Tensor<float>::uniform({3, 32, 32}, rng);
  auto other = Tensor<float>::uniform({3, 32, 32}, rng);

  NoGradGuard ng;
  auto batch = Tensor<float>::zeros({3, 3, 32, 32});
  std::memcpy(batch.mutable_data(), img.data(), sizeof(float) * img.numel());
  std::memcpy(batch.mutable_data() + img.numel(), other.data(), sizeof(float) * other.numel());
  std::memcpy(batch.mutable_data() + 2 * img.numel(), img.data(), sizeof(float) * img.numel());
  auto z = enc.encode_images(batch);

  const std::int64_t per = 64 * 96;
  // duplicate rows agree bit-exactly
  for (std::int64_t i = 0; i < per; ++i)
    REQUIRE(z.data()[i] == z.data()[2 * per + i]);
  // and match the single-image encoding (no cross-image leakage)
  auto z_alone = enc.encode(img);
  for (std::int64_t i = 0; i < per; ++i) REQUIRE(z.data()[i] == z_alone.data()[i]);
}

TEST_CASE("geometry mismatches are rejected") {
  VitEncoder<float> enc;
  Rng rng(4);
  enc.init(rng);
  auto bad = Tensor<float>::zeros({2, 3, 16, 16});
  REQUIRE_THROWS_AS(enc.encode_images(bad), GeometryError);
}

TEST_CASE("encoder gradients match finite differences on sampled weights") {
  VitEncoder<double> enc(tiny_config());
  Rng rng(5);
  enc.init(rng);
  auto img = Tensor<double>::uniform({3, 8, 8}, rng);

  auto loss = [&] { return sum_all(square(enc.encode(img))); };
  testing::GradCheckOptions opt;
  opt.entries_per_param = 4; // sampled entries from every parameter tensor
  auto rep = testing::finite_diff_check(loss, enc.parameters(), opt);
  REQUIRE(rep.max_rel_err < 1e-3);
}

TEST_CASE("split bisects columns and concatenation restores them") {
  auto z = Tensor<double>::from({1, 4}, {1, 2, 3, 4});
  auto [a, c] = split_embedding(z);
  REQUIRE(a.shape() == Shape{1, 2});
  REQUIRE(a.data()[0] == 1.0);
  REQUIRE(a.data()[1] == 2.0);
  REQUIRE(c.data()[0] == 3.0);
  REQUIRE(c.data()[1] == 4.0);

  Rng rng(6);
  auto z2 = Tensor<double>::uniform({5, 10}, rng);
  auto [a2, c2] = split_embedding(z2);
  auto back = concat_last(a2, c2);
  for (std::int64_t i = 0; i < z2.numel(); ++i) REQUIRE(back.data()[i] == z2.data()[i]);

  // the full-scale width splits into 384-column halves
  auto wide = Tensor<double>::zeros({2, 768});
  auto [wa, wc] = split_embedding(wide);
  REQUIRE(wa.shape() == Shape{2, 384});
  REQUIRE(wc.shape() == Shape{2, 384});

  auto odd = Tensor<double>::zeros({2, 5});
  REQUIRE_THROWS_AS(split_embedding(odd), ShapeError);
}
