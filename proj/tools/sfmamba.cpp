// Command-line front end: gen-data, train-source, adapt, eval, ablate.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sfmamba/data_synth.hpp"
#include "sfmamba/pipeline.hpp"
#include "sfmamba/tensor_io.hpp"

namespace {

using namespace sfm;

constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kValidation = 4;

/// Flags shared by the training subcommands. Each one set on the command line becomes a
/// config override.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "key = value config file");
  app->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  app->add_option("--seed", c.seed, "run seed (overrides SFMAMBA_SEED and the config file)");
  app->add_option("-o,--out", c.out, "output directory");
}

KeyValues overrides_of(const Common& c) {
  KeyValues kv;
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--set", "expected key=value, got '" + s + "'");
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) kv.set("seed", std::to_string(*c.seed));
  if (c.out) kv.set("out_dir", *c.out);
  return kv;
}

pipeline::RunConfig config_of(const Common& c, KeyValues extra, const std::string& phase) {
  KeyValues kv = overrides_of(c);
  for (const auto& [k, v] : extra.entries()) kv.set(k, v);
  kv.set("phase", phase);
  std::optional<std::filesystem::path> file;
  if (!c.config.empty()) file = c.config;
  return pipeline::load_config(file, kv);
}

void save_effective_config(const pipeline::RunConfig& config) {
  std::filesystem::create_directories(config.out_dir);
  std::ofstream os(config.out_dir / "config.txt");
  if (!os) throw IoError((config.out_dir / "config.txt").string() + ": cannot open for writing");
  config.to_keyvalues().write(os);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free domain adaptation with selective state-space models on synthetic patch grids."};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a source/target benchmark pair");
  std::uint64_t gen_seed = 0;
  std::string gen_out = "data";
  data::BenchmarkOptions opts;
  gen->add_option("--seed", gen_seed, "benchmark seed");
  gen->add_option("-o,--out", gen_out, "output directory (gets source/ and target/)");
  gen->add_option("--n-source", opts.n_source, "source sample count");
  gen->add_option("--n-target", opts.n_target, "target sample count");
  gen->add_option("--source-spurious", opts.source_spurious, "background/class association in the source");
  gen->add_option("--target-spurious", opts.target_spurious, "same for the target; negative means 1/C");
  gen->add_option("--source-noise", opts.source_noise, "patch noise std in the source");
  gen->add_option("--target-noise", opts.target_noise, "patch noise std in the target");
  gen->add_option("--blob-min", opts.blob_min, "smallest foreground blob");
  gen->add_option("--blob-max", opts.blob_max, "largest foreground blob");

  // train-source
  Common src_c;
  std::string src_data, src_target;
  std::optional<std::size_t> src_epochs;
  auto* train = app.add_subcommand("train-source", "train a source model on labeled source data");
  add_common(train, src_c);
  train->add_option("--source", src_data, "source dataset directory");
  train->add_option("--target", src_target, "optional target dataset, for diagnostic accuracy only");
  train->add_option("--epochs", src_epochs, "source epochs");

  // adapt
  Common ad_c;
  std::string ad_ckpt, ad_target;
  std::optional<std::size_t> ad_epochs;
  bool no_scs = false, no_upa = false;
  auto* adapt = app.add_subcommand("adapt", "adapt a source checkpoint to unlabeled target data");
  add_common(adapt, ad_c);
  adapt->add_option("--checkpoint", ad_ckpt, "source-phase checkpoint");
  adapt->add_option("--target", ad_target, "target dataset directory");
  adapt->add_option("--epochs", ad_epochs, "adaptation epochs");
  adapt->add_flag("--no-scs", no_scs, "disable the background shuffle consistency term");
  adapt->add_flag("--no-upa", no_upa, "train on clustering labels for every sample, without neighbour filtering");

  // eval
  Common ev_c;
  std::string ev_ckpt, ev_data;
  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a dataset");
  add_common(eval, ev_c);
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();

  // ablate
  Common ab_c;
  std::string ab_source, ab_target;
  auto* ablate = app.add_subcommand("ablate", "component grid over Ch-VSS, SCS and UPA filtering");
  add_common(ablate, ab_c);
  ablate->add_option("--source", ab_source, "source dataset directory");
  ablate->add_option("--target", ab_target, "target dataset directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (gen->parsed()) {
      const auto pair = data::make_benchmark_pair(gen_seed, opts);
      const std::filesystem::path out = gen_out;
      data::save_dataset(out / "source", pair.source, pair.source_spec);
      data::save_dataset(out / "target", pair.target, pair.target_spec);
      std::cout << "wrote " << (out / "source").string() << " (" << pair.source.size() << ") and "
                << (out / "target").string() << " (" << pair.target.size() << ")\n";
    } else if (train->parsed()) {
      KeyValues extra;
      if (!src_data.empty()) extra.set("source_data", src_data);
      if (!src_target.empty()) extra.set("target_data", src_target);
      if (src_epochs) extra.set("source_epochs", std::to_string(*src_epochs));
      const auto config = config_of(src_c, extra, "source");
      save_effective_config(config);
      std::cout << pipeline::run_source(config).string() << '\n';
    } else if (adapt->parsed()) {
      KeyValues extra;
      if (!ad_ckpt.empty()) extra.set("checkpoint", ad_ckpt);
      if (!ad_target.empty()) extra.set("target_data", ad_target);
      if (ad_epochs) extra.set("adapt_epochs", std::to_string(*ad_epochs));
      if (no_scs) extra.set("scs", "0");
      if (no_upa) extra.set("upa", "0");
      const auto config = config_of(ad_c, extra, "adapt");
      save_effective_config(config);
      std::cout << pipeline::run_adapt(config).string() << '\n';
    } else if (eval->parsed()) {
      KeyValues extra;
      extra.set("checkpoint", ev_ckpt);
      const auto config = config_of(ev_c, extra, "eval");
      const auto r = pipeline::run_eval(config, ev_data);
      nlohmann::ordered_json j;
      j["accuracy"] = r.accuracy;
      j["per_class"] = r.per_class;
      std::cout << j.dump() << '\n';
    } else if (ablate->parsed()) {
      KeyValues extra;
      if (!ab_source.empty()) extra.set("source_data", ab_source);
      if (!ab_target.empty()) extra.set("target_data", ab_target);
      const auto config = config_of(ab_c, extra, "adapt");
      save_effective_config(config);
      for (const auto& row : pipeline::run_ablation(config))
        std::cout << row.name << "  source-only " << row.source_only << "  adapted " << row.adapted << '\n';
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
