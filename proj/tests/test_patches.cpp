#include <catch2/catch_amalgamated.hpp>

#include "vitmix/patches.hpp"

using namespace vitmix;

TEST_CASE("patch counts follow the grid arithmetic") {
  PatchGeometry full{3, 224, 224, 16};
  REQUIRE(full.patch_count() == 196);
  PatchGeometry toy{3, 32, 32, 4};
  REQUIRE(toy.patch_count() == 64);
}

TEST_CASE("2x2 image with unit patches enumerates the grid row-major") {
  auto img = Tensor<double>::from({1, 2, 2}, {10, 11, 12, 13}); // (0,0) (0,1) (1,0) (1,1)
  auto p = patchify(img, 1);
  REQUIRE(p.shape() == Shape{4, 1, 1, 1});
  REQUIRE(p.data()[0] == 10);
  REQUIRE(p.data()[1] == 11);
  REQUIRE(p.data()[2] == 12);
  REQUIRE(p.data()[3] == 13);
}

TEST_CASE("non-divisible dimensions are a geometry error") {
  auto img = Tensor<double>::zeros({3, 30, 32});
  REQUIRE_THROWS_AS(patchify(img, 4), GeometryError);
}

TEST_CASE("unpatchify of zero patches is the zero image") {
  PatchGeometry g{3, 8, 8, 4};
  auto p = Tensor<double>::zeros({4, 3, 4, 4});
  auto img = unpatchify(p, g);
  for (std::int64_t i = 0; i < img.numel(); ++i) REQUIRE(img.data()[i] == 0.0);
}

TEST_CASE("round trips are bit-exact for every configured patch size") {
  for (std::int64_t ps : {2, 4, 8}) {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
      Rng rng(seed * 100 + static_cast<std::uint64_t>(ps));
      auto img = Tensor<double>::uniform({3, 32, 32}, rng);
      PatchGeometry g{3, 32, 32, ps};
      auto round = unpatchify(patchify(img, ps), g);
      REQUIRE(round.shape() == img.shape());
      for (std::int64_t i = 0; i < img.numel(); ++i)
        REQUIRE(round.data()[i] == img.data()[i]);

      // inverse composition starting from patches
      auto patches = patchify(img, ps);
      auto round2 = patchify(unpatchify(patches, g), ps);
      for (std::int64_t i = 0; i < patches.numel(); ++i)
        REQUIRE(round2.data()[i] == patches.data()[i]);
    }
  }
}

TEST_CASE("swapping two patches moves exactly those spatial blocks") {
  Rng rng(17);
  auto img = Tensor<double>::uniform({1, 8, 8}, rng);
  auto p = patchify(img, 4); // 4 patches of 4x4
  // swap patches 0 and 3
  auto v = std::vector<double>(p.data(), p.data() + p.numel());
  for (int i = 0; i < 16; ++i) std::swap(v[i], v[3 * 16 + i]);
  auto swapped = unpatchify(Tensor<double>::from(p.shape(), v), PatchGeometry{1, 8, 8, 4});

  int changed = 0;
  for (std::int64_t y = 0; y < 8; ++y)
    for (std::int64_t x = 0; x < 8; ++x) {
      const bool in_block0 = y < 4 && x < 4;
      const bool in_block3 = y >= 4 && x >= 4;
      const double before = img.data()[y * 8 + x];
      const double after = swapped.data()[y * 8 + x];
      if (in_block0 || in_block3) {
        if (before != after) ++changed;
      } else {
        REQUIRE(before == after);
      }
    }
  REQUIRE(changed > 0);
  // and the moved blocks carry the right content
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x = 0; x < 4; ++x)
      REQUIRE(swapped.data()[y * 8 + x] == img.data()[(y + 4) * 8 + (x + 4)]);
}

TEST_CASE("batched forms agree with per-image forms") {
  Rng rng(23);
  auto a = Tensor<float>::uniform({3, 16, 16}, rng);
  auto b = Tensor<float>::uniform({3, 16, 16}, rng);
  auto batch = Tensor<float>::zeros({2, 3, 16, 16});
  std::memcpy(batch.mutable_data(), a.data(), sizeof(float) * a.numel());
  std::memcpy(batch.mutable_data() + a.numel(), b.data(), sizeof(float) * b.numel());

  auto pb = patchify_batch(batch, 4);
  auto pa = patchify(a, 4);
  for (std::int64_t i = 0; i < pa.numel(); ++i) REQUIRE(pb.data()[i] == pa.data()[i]);

  PatchGeometry g{3, 16, 16, 4};
  auto rb = unpatchify_batch(pb, g);
  for (std::int64_t i = 0; i < batch.numel(); ++i) REQUIRE(rb.data()[i] == batch.data()[i]);
}
