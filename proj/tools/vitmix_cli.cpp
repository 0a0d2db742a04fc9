// Command-line entry point: data generation, encoder training, evaluation,
// mixing-grid dumps, classifier comparison and the scaling experiments.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
// Every command writes its fully resolved configuration (flags merged over
// config file over defaults) next to its outputs for reproducibility.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "vitmix/vitmix.hpp"

namespace fs = std::filesystem;
using Scalar = float; // training builds run f32; checkpoints store f32 blobs

namespace {

// --out-dir is interpreted under VITMIX_OUT_ROOT when that is set and the
// given path is relative.
fs::path resolve_out_dir(const std::string& out_dir) {
  fs::path p(out_dir);
  const char* root = std::getenv("VITMIX_OUT_ROOT");
  if (root && *root && p.is_relative()) return fs::path(root) / p;
  return p;
}

void write_run_config(const fs::path& out_dir, CLI::App* cmd) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "run_config.txt");
  out << cmd->config_to_str(true, false);
}

vitmix::TrainConfig train_config_from(CLI::App* cmd) {
  vitmix::TrainConfig cfg;
  cfg.epochs = cmd->get_option("--epochs")->as<int>();
  cfg.batch_size = cmd->get_option("--batch")->as<int>();
  cfg.mixes = cmd->get_option("--mixes")->as<int>();
  cfg.lr = cmd->get_option("--lr")->as<double>();
  cfg.weight_decay = cmd->get_option("--weight-decay")->as<double>();
  cfg.weights.anatomy = cmd->get_option("--lambda-a")->as<double>();
  cfg.weights.characteristic = cmd->get_option("--lambda-c")->as<double>();
  cfg.weights.reconstruction = cmd->get_option("--lambda-r")->as<double>();
  cfg.seed = cmd->get_option("--seed")->as<std::uint64_t>();
  cfg.include_unlabeled = cmd->count("--include-unlabeled") > 0;
  cfg.arch = cmd->get_option("--arch")->as<std::string>();
  return cfg;
}

void add_train_flags(CLI::App* cmd) {
  cmd->add_option("--epochs", "training epochs")->default_val(50);
  cmd->add_option("--batch", "batch size")->default_val(16);
  cmd->add_option("--mixes", "mixed synthetic images per sample")->default_val(4);
  cmd->add_option("--lr", "peak learning rate")->default_val(1e-3);
  cmd->add_option("--weight-decay", "decoupled weight decay")->default_val(0.01);
  cmd->add_option("--lambda-a", "anatomical consistency weight")->default_val(1.0);
  cmd->add_option("--lambda-c", "characteristic consistency weight")->default_val(1.0);
  cmd->add_option("--lambda-r", "reconstruction weight")->default_val(1.0);
  cmd->add_option("--seed", "root seed")->default_val(42);
  cmd->add_flag("--include-unlabeled", "train on the unlabeled pool as well");
  cmd->add_option("--arch", "encoder variant (base|deep)")->default_val(std::string("base"));
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised anatomy/characteristic mixing at desk scale"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file; flags override it");

  std::string manifest_path, data_dir, out_dir = "out", checkpoint, base_checkpoint;
  std::string ingest_src, domain_map_str;

  auto* gen = app.add_subcommand("gen-data", "generate (or ingest) a corpus");
  gen->add_option("--manifest", manifest_path, "corpus manifest (key value lines)");
  gen->add_option("--out-dir", out_dir, "output directory")->required();
  gen->add_option("--ingest", ingest_src, "ingest an existing PPM corpus instead of generating");
  gen->add_option("--domain-map", domain_map_str, "ingest domain remapping, e.g. 0:5,1:6");
  gen->add_option("--resize", "bicubic-resize ingested images to this size")->default_val(0);

  auto* train = app.add_subcommand("train-encoder", "self-supervised encoder training");
  train->add_option("--data", data_dir, "corpus directory")->required();
  train->add_option("--out-dir", out_dir, "run directory")->required();
  train->add_option("--resume", checkpoint, "checkpoint to resume from");
  add_train_flags(train);

  auto* eval = app.add_subcommand("eval", "reconstruction PSNR report");
  eval->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
  eval->add_option("--data", data_dir, "corpus directory")->required();
  eval->add_option("--out-dir", out_dir, "output directory")->required();

  auto* grid = app.add_subcommand("mixgrid", "anatomy x characteristic grid image");
  grid->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
  grid->add_option("--data", data_dir, "corpus directory")->required();
  grid->add_option("--out-dir", out_dir, "output directory")->required();
  grid->add_option("--sources", "anatomy source count")->default_val(6);
  grid->add_option("--donors", "characteristic donor count")->default_val(5);
  grid->add_option("--seed", "patch pick seed")->default_val(13);

  auto* clf = app.add_subcommand("train-classifier", "downstream classifier run");
  clf->add_option("--data", data_dir, "corpus directory")->required();
  clf->add_option("--out-dir", out_dir, "output directory")->required();
  clf->add_option("--encoder", checkpoint, "encoder checkpoint (required for --augment mix)");
  clf->add_option("--augment", "augmentation mode (none|mix)")->default_val(std::string("none"));
  clf->add_option("--epochs", "classifier epochs")->default_val(8);
  clf->add_option("--batch", "labeled batch size")->default_val(16);
  clf->add_option("--mixes", "synthetic images per sample in mix mode")->default_val(4);
  clf->add_option("--lr", "peak learning rate")->default_val(1e-3);
  clf->add_option("--seed", "seed")->default_val(7);

  auto* scale = app.add_subcommand("scale-exp", "unlabeled-data and deeper-encoder trends");
  scale->add_option("--data", data_dir, "corpus directory")->required();
  scale->add_option("--out-dir", out_dir, "output directory")->required();
  scale->add_option("--base-checkpoint", base_checkpoint, "trained base encoder")->required();
  add_train_flags(scale);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e); // --help
    app.exit(e);
    return 2;
  }

  try {
    const fs::path out = resolve_out_dir(out_dir);

    if (gen->parsed()) {
      write_run_config(out, gen);
      if (!ingest_src.empty()) {
        std::map<int, int> dmap;
        if (!domain_map_str.empty()) {
          std::istringstream is(domain_map_str);
          std::string tok;
          while (std::getline(is, tok, ',')) {
            const auto colon = tok.find(':');
            if (colon == std::string::npos)
              throw vitmix::ConfigError("bad --domain-map entry: " + tok);
            dmap[std::stoi(tok.substr(0, colon))] = std::stoi(tok.substr(colon + 1));
          }
        }
        const auto resize = grid ? gen->get_option("--resize")->as<std::int64_t>() : 0;
        auto entries = vitmix::ingest_folder<Scalar>(ingest_src, dmap, out, resize);
        std::cout << "ingested " << entries.size() << " images into " << out << "\n";
        return 0;
      }
      vitmix::CorpusManifest manifest;
      if (!manifest_path.empty()) manifest = vitmix::CorpusManifest::load(manifest_path);
      auto entries = vitmix::build_corpus<Scalar>(manifest, out);
      std::cout << "wrote " << entries.size() << " images to " << out << "\n";
      return 0;
    }

    if (train->parsed()) {
      write_run_config(out, train);
      auto dataset = vitmix::Dataset<Scalar>::load(data_dir);
      vitmix::TrainConfig cfg = train_config_from(train);
      std::optional<fs::path> resume;
      if (!checkpoint.empty()) resume = fs::path(checkpoint);
      auto result = vitmix::train_encoder(dataset, cfg, out, resume);
      std::cout << "final checkpoint: " << result.final_path << "\n";
      return 0;
    }

    if (eval->parsed()) {
      if (!fs::exists(checkpoint))
        throw vitmix::ConfigError("missing checkpoint: " + checkpoint);
      write_run_config(out, eval);
      auto dataset = vitmix::Dataset<Scalar>::load(data_dir);
      auto encoder = vitmix::load_encoder<Scalar>(checkpoint);
      std::vector<std::string> splits;
      for (const auto& [name, idx] : dataset.by_split) splits.push_back(name);
      auto report = vitmix::eval_reconstruction(encoder, dataset, splits);
      report.write_csv(out / "psnr.csv", "psnr");
      for (const auto& r : report.rows)
        if (r.domain < 0)
          std::cout << "psnr " << r.split << ": mean " << r.mean << " dB (n=" << r.n << ")\n";
      return 0;
    }

    if (grid->parsed()) {
      if (!fs::exists(checkpoint))
        throw vitmix::ConfigError("missing checkpoint: " + checkpoint);
      write_run_config(out, grid);
      auto dataset = vitmix::Dataset<Scalar>::load(data_dir);
      auto encoder = vitmix::load_encoder<Scalar>(checkpoint);
      const auto sources = grid->get_option("--sources")->as<std::size_t>();
      const auto donors = grid->get_option("--donors")->as<std::size_t>();
      vitmix::Rng rng(grid->get_option("--seed")->as<std::uint64_t>());
      // Spread picks across the test split for visible domain variety.
      const auto& test_idx = dataset.split_indices("test");
      const auto& train_idx = dataset.split_indices("train");
      std::vector<std::size_t> src, don;
      for (std::size_t i = 0; i < sources; ++i)
        src.push_back(train_idx[static_cast<std::size_t>(rng.below(train_idx.size()))]);
      for (std::size_t i = 0; i < donors; ++i)
        don.push_back(test_idx[static_cast<std::size_t>(rng.below(test_idx.size()))]);
      auto stats = vitmix::dump_mix_grid(encoder, dataset, src, don, rng, out / "mixgrid.ppm");
      std::cout << "mix grid " << stats.rows << "x" << stats.cols
                << " cells; donor-color fraction " << stats.donor_color_fraction << "\n";
      return 0;
    }

    if (clf->parsed()) {
      write_run_config(out, clf);
      auto dataset = vitmix::Dataset<Scalar>::load(data_dir);
      vitmix::ClassifierConfig cfg;
      cfg.augment = clf->get_option("--augment")->as<std::string>();
      cfg.epochs = clf->get_option("--epochs")->as<int>();
      cfg.batch_size = clf->get_option("--batch")->as<int>();
      cfg.mixes = clf->get_option("--mixes")->as<int>();
      cfg.lr = clf->get_option("--lr")->as<double>();
      cfg.seed = clf->get_option("--seed")->as<std::uint64_t>();
      cfg.quiet = false;
      cfg.validate();
      std::optional<vitmix::VitEncoder<Scalar>> encoder;
      if (cfg.augment == "mix") {
        if (checkpoint.empty() || !fs::exists(checkpoint))
          throw vitmix::ConfigError("missing encoder checkpoint: " +
                                    (checkpoint.empty() ? std::string("(none given)") : checkpoint));
        encoder.emplace(vitmix::load_encoder<Scalar>(checkpoint));
      }
      auto result =
          vitmix::train_classifier(dataset, encoder ? &*encoder : nullptr, cfg);
      vitmix::CsvWriter csv(out / "comparison.csv", "mode,seed,train_acc,val_acc,test_acc",
                            /*append=*/fs::exists(out / "comparison.csv"));
      csv.row({cfg.augment, std::to_string(cfg.seed), vitmix::fmt_f64(result.train_accuracy, 6),
               vitmix::fmt_f64(result.val_accuracy, 6), vitmix::fmt_f64(result.test_accuracy, 6)});
      std::cout << "mode " << cfg.augment << "  val acc " << result.val_accuracy
                << "  test acc " << result.test_accuracy << "\n";
      return 0;
    }

    if (scale->parsed()) {
      if (!fs::exists(base_checkpoint))
        throw vitmix::ConfigError("missing checkpoint: " + base_checkpoint);
      write_run_config(out, scale);
      auto dataset = vitmix::Dataset<Scalar>::load(data_dir);
      vitmix::TrainConfig cfg = train_config_from(scale);
      auto report = vitmix::scalability_experiments(dataset, cfg, base_checkpoint, out);
      for (const auto& r : report.rows)
        std::cout << r.variant << " (epochs " << r.epochs << "): test "
                  << r.test_psnr << " dB vs base " << r.base_test << " dB\n";
      return 0;
    }
  } catch (const vitmix::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const vitmix::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
