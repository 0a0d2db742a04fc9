#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "vitmix/evaluation.hpp"

using namespace vitmix;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("vitmix_eval_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const Dataset<float>& eval_dataset() {
  static const Dataset<float> ds = [] {
    CorpusManifest m;
    m.labeled_per_domain = 10;
    m.unlabeled_per_domain = 4;
    m.val_count = 6;
    m.test_count = 6;
    auto dir = temp_dir("corpus");
    build_corpus<float>(m, dir);
    return Dataset<float>::load(dir);
  }();
  return ds;
}

VitEncoder<float> random_encoder(std::uint64_t seed) {
  VitEncoder<float> enc;
  Rng rng(seed);
  enc.init(rng);
  return enc;
}
} // namespace

TEST_CASE("psnr basics") {
  Rng rng(1);
  auto x = Tensor<double>::uniform({3, 8, 8}, rng);
  REQUIRE(std::isinf(psnr(x, x)));
  REQUIRE(psnr_csv_field(psnr(x, x)) == "inf");

  // uniform offset of 0.1 -> MSE 0.01 -> 20 dB
  auto y = add_scalar(x, 0.1);
  REQUIRE(psnr(x, y) == Approx(20.0).margin(1e-9));
  REQUIRE(psnr(y, x) == Approx(psnr(x, y)));

  auto z = Tensor<double>::zeros({3, 4, 4});
  REQUIRE_THROWS_AS(psnr(x, z), ShapeError);
}

TEST_CASE("reconstruction report covers splits and domains") {
  auto enc = random_encoder(3);
  auto report = eval_reconstruction(enc, eval_dataset(), {"val", "test"});

  // aggregate rows exist and untrained reconstruction quality is poor
  REQUIRE(report.split_mean("val") < 15.0);
  REQUIRE(report.split_mean("test") < 15.0);

  // one aggregate plus one per-domain row per split here
  int val_rows = 0;
  for (const auto& r : report.rows)
    if (r.split == "val") ++val_rows;
  REQUIRE(val_rows == 2);
  for (const auto& r : report.rows) REQUIRE(r.n > 0);

  auto out = temp_dir("report");
  report.write_csv(out / "psnr.csv", "psnr");
  std::ifstream csv(out / "psnr.csv");
  std::string header;
  std::getline(csv, header);
  REQUIRE(header == "metric,split,domain,mean,std,n");
}

TEST_CASE("mix grid has the contracted layout and is written as ppm") {
  auto enc = random_encoder(4);
  const auto& ds = eval_dataset();
  std::vector<std::size_t> sources(ds.split_indices("train").begin(),
                                   ds.split_indices("train").begin() + 4);
  std::vector<std::size_t> donors(ds.split_indices("test").begin(),
                                  ds.split_indices("test").begin() + 3);
  auto out = temp_dir("grid");
  Rng rng(5);
  auto stats = dump_mix_grid(enc, ds, sources, donors, rng, out / "grid.ppm");
  REQUIRE(stats.rows == 4);  // donors + header
  REQUIRE(stats.cols == 5);  // sources + header
  REQUIRE(stats.donor_color_fraction >= 0.0);
  REQUIRE(stats.donor_color_fraction <= 1.0);

  auto grid = read_image<float>(out / "grid.ppm");
  REQUIRE(grid.shape() == Shape{3, 4 * 32, 5 * 32});
}

TEST_CASE("label inheritance follows the anatomy source") {
  Rng rng(6);
  MixPlan plan = build_mix_plan(4, 2, 64, rng);
  std::vector<int> labels = {0, 1, 1, 0};
  auto extended = inherit_labels(labels, plan);
  REQUIRE(extended.size() == labels.size() + plan.entries.size());
  for (std::size_t i = 0; i < plan.entries.size(); ++i)
    REQUIRE(extended[labels.size() + i] ==
            labels[static_cast<std::size_t>(plan.entries[i].anatomy)]);
}

TEST_CASE("classifier training runs in both modes and freezes the encoder") {
  const auto& ds = eval_dataset();
  ClassifierConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.mixes = 2;

  SECTION("baseline mode") {
    cfg.augment = "none";
    auto res = train_classifier<float>(ds, nullptr, cfg);
    REQUIRE(res.val_accuracy >= 0.0);
    REQUIRE(res.val_accuracy <= 1.0);
    REQUIRE(res.model.parameter_count() > 40000);
    REQUIRE(res.model.parameter_count() < 70000);
  }

  SECTION("mix mode requires and never mutates the encoder") {
    REQUIRE_THROWS_AS(train_classifier<float>(ds, nullptr,
                                              [] {
                                                ClassifierConfig c;
                                                c.augment = "mix";
                                                return c;
                                              }()),
                      ConfigError);

    auto enc = random_encoder(7);
    std::uint64_t before = 0;
    for (auto* p : enc.parameters())
      before = fnv1a(p->data(), static_cast<std::size_t>(p->numel()) * sizeof(float), before);

    cfg.augment = "mix";
    auto res = train_classifier(ds, &enc, cfg);
    REQUIRE(res.test_accuracy >= 0.0);

    std::uint64_t after = 0;
    for (auto* p : enc.parameters())
      after = fnv1a(p->data(), static_cast<std::size_t>(p->numel()) * sizeof(float), after);
    REQUIRE(before == after);
  }
}

TEST_CASE("identical classifier seeds reproduce identical accuracies") {
  const auto& ds = eval_dataset();
  ClassifierConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 99;
  auto a = train_classifier<float>(ds, nullptr, cfg);
  auto b = train_classifier<float>(ds, nullptr, cfg);
  REQUIRE(a.val_accuracy == b.val_accuracy);
  REQUIRE(a.test_accuracy == b.test_accuracy);
  REQUIRE(a.train_accuracy == b.train_accuracy);
}
