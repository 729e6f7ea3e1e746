#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "grouptr/errors.hpp"
#include "grouptr/evaluation.hpp"
#include "grouptr/gradcheck_suite.hpp"
#include "grouptr/pipeline.hpp"
#include "grouptr/synthetic.hpp"

namespace fs = std::filesystem;
using namespace grouptr;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

PipelineConfig pipeline_config(const std::string& path) {
  return path.empty() ? PipelineConfig{} : PipelineConfig::load(path);
}

Scene read_scene(const std::string& scene, const std::string& features) {
  return features.empty() ? load_scene(scene) : load_scene_with_features(scene, features);
}

// A ground-truth argument is either a scene file or a groups file.
std::vector<Group> read_truth(const fs::path& path) {
  if (path.extension() == ".json") return load_scene(path).groups;
  return load_groups(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Social group detection from trajectories and appearance features"};
  app.require_subcommand(1, 1);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene corpus");
  std::string gen_config, gen_out;
  std::size_t gen_scenes = 1;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--config", gen_config, "Generator config file");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", gen_scenes, "Number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Master seed (default: config seed)");

  auto* tr = app.add_subcommand("train", "Train a model on a scene manifest");
  std::string train_config, train_manifest, train_out, train_log;
  std::optional<std::uint64_t> train_seed;
  tr->add_option("--config", train_config, "Pipeline config file");
  tr->add_option("--scenes", train_manifest, "Scene manifest")->required();
  tr->add_option("--out", train_out, "Checkpoint path")->required();
  tr->add_option("--log", train_log, "Write the per-epoch log here instead of stderr");
  tr->add_option("--seed", train_seed, "Training seed (overrides the config)");
  bool train_calibrate = false;
  tr->add_flag("--calibrate", train_calibrate,
               "Pick lp_threshold from 0.5..0.95 by F1 on the training scenes and print it");

  auto* inf = app.add_subcommand("infer", "Detect groups in one scene");
  std::string infer_config, infer_ckpt, infer_scene, infer_features, infer_out, affinity_path;
  inf->add_option("--config", infer_config, "Pipeline config file");
  inf->add_option("--checkpoint", infer_ckpt, "Model checkpoint")->required();
  inf->add_option("--scene", infer_scene, "Scene file")->required();
  inf->add_option("--features", infer_features, "Appearance feature file");
  inf->add_option("--out", infer_out, "Groups file")->required();
  inf->add_option("--affinity", affinity_path, "Also write the affinity matrix");

  auto* ev = app.add_subcommand("eval", "Score predicted groups against ground truth");
  std::vector<std::string> eval_pred, eval_gt;
  ev->add_option("--pred", eval_pred, "Predicted groups file (repeatable)")->required();
  ev->add_option("--gt", eval_gt, "Ground-truth scene or groups file, paired with --pred in order")->required();

  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  std::size_t gc_seeds = 10;
  bool gc_verbose = false;
  gc->add_option("--seeds", gc_seeds, "Seeds per check")->check(CLI::PositiveNumber);
  gc->add_flag("--verbose", gc_verbose, "Print every check");

  auto* pt = app.add_subcommand("perturb", "Add box noise or drop detections");
  std::string pt_scene, pt_features, pt_out, pt_out_features;
  double pt_sigma = 0.0, pt_mdr = 0.0;
  std::uint64_t pt_seed = 0;
  pt->add_option("--scene", pt_scene, "Scene file")->required();
  pt->add_option("--features", pt_features, "Appearance feature file");
  auto* sigma_opt = pt->add_option("--sigma", pt_sigma, "Box corner noise relative to box size");
  auto* mdr_opt = pt->add_option("--mdr", pt_mdr, "Missed-detection rate");
  sigma_opt->excludes(mdr_opt);
  pt->add_option("--seed", pt_seed, "Noise seed");
  pt->add_option("--out", pt_out, "Output scene file")->required();
  pt->add_option("--out-features", pt_out_features, "Output feature file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      GenConfig config = gen_config.empty() ? GenConfig{} : GenConfig::load(gen_config);
      const auto files = generate_corpus(config, gen_scenes, gen_seed.value_or(config.seed), gen_out);
      std::cout << "wrote " << files.size() << " scenes and " << (fs::path(gen_out) / "manifest.txt").string()
                << '\n';
    } else if (*tr) {
      PipelineConfig config = pipeline_config(train_config);
      if (train_seed) config.train.seed = *train_seed;
      std::vector<Scene> scenes;
      for (const auto& f : read_manifest(train_manifest)) scenes.push_back(load_scene_with_features(f.scene, f.features));
      std::ofstream log_file;
      if (!train_log.empty()) {
        log_file.open(train_log, std::ios::binary);
        if (!log_file) throw IoError("cannot write " + train_log);
      }
      auto result = train(scenes, config, [&](const std::string& line) {
        (log_file.is_open() ? static_cast<std::ostream&>(log_file) : std::cerr) << line << '\n';
      });
      result.model.save(train_out);
      std::cout << "trained " << result.steps << " steps, final epoch loss "
                << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << '\n';
      if (train_calibrate) {
        const std::vector<double> candidates{0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
        const double threshold = calibrate_lp_threshold(scenes, result.model, config.infer, candidates);
        std::cout << "lp_threshold = " << threshold << '\n';
      }
    } else if (*inf) {
      const PipelineConfig config = pipeline_config(infer_config);
      auto model = GroupTransformer::load(infer_ckpt, config.model);
      const Scene scene = read_scene(infer_scene, infer_features);
      const auto affinity = infer_affinity(scene, model, config.infer);
      if (!affinity_path.empty()) write_text(affinity_path, affinity_to_text(affinity));
      const auto groups = cluster_groups(scene, affinity, config.infer);
      save_groups(groups, infer_out);
    } else if (*ev) {
      if (eval_pred.size() != eval_gt.size()) throw ValidationError("eval: need one --gt per --pred");
      std::vector<SceneReport> reports;
      for (std::size_t i = 0; i < eval_pred.size(); ++i) {
        reports.push_back({fs::path(eval_gt[i]).stem().string(),
                           score_groups(load_groups(eval_pred[i]), read_truth(eval_gt[i]))});
      }
      std::cout << format_report(reports);
    } else if (*gc) {
      std::size_t failed = 0;
      const auto results = run_gradcheck_suite(gc_seeds, [&](const GradCheckResult& r) {
        if (!r.passed()) ++failed;
        if (gc_verbose || !r.passed()) {
          std::printf("%-20s seed %zu  rel. error %.3e  %s\n", r.name.c_str(), r.seed, r.error,
                      r.passed() ? "ok" : "FAIL");
        }
      });
      std::printf("%zu checks, %zu failed\n", results.size(), failed);
      return failed == 0 ? 0 : 1;
    } else if (*pt) {
      Scene scene = read_scene(pt_scene, pt_features);
      scene = *mdr_opt ? drop_detections(scene, pt_mdr, pt_seed) : perturb_boxes(scene, pt_sigma, pt_seed);
      save_scene(scene, pt_out);
      if (!pt_out_features.empty()) save_features(scene, pt_out_features);
    }
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
