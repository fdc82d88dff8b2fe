// Command-line front end: partition, forward, train, eval, flops, gradcheck, gen-data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "relay/checkpoint.hpp"
#include "relay/complexity.hpp"
#include "relay/gradcheck.hpp"
#include "relay/io.hpp"
#include "relay/synthetic.hpp"
#include "relay/train.hpp"

namespace fs = std::filesystem;
using namespace relay;

namespace {

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.validate();
    return c;
  }
  return load_run_config(path);
}

std::string frame_name(const char* prefix, std::size_t t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu%s", prefix, t, ext);
  return buf;
}

int run_partition(const std::string& input, std::size_t unit_size, const std::string& out) {
  const auto clip = load_clip<float>(input, 0);
  const auto grid = compute_unit_grid(clip.dim(1), clip.dim(2), unit_size, clip.dim(0));
  const auto units = partition_clip(clip, grid);
  save_tensor(out, units);
  const nlohmann::json info{{"frames", grid.clip_len}, {"height", grid.frame_h}, {"width", grid.frame_w},
                            {"unit_size", grid.unit_size}, {"rows", grid.rows}, {"cols", grid.cols},
                            {"pad_bottom", grid.pad_bottom}, {"pad_right", grid.pad_right},
                            {"units", grid.total_units()}, {"shape", units.shape()}};
  std::ofstream sidecar(out + ".json");
  if (!sidecar) throw FormatError("cannot write " + out + ".json");
  sidecar << info.dump(2) << "\n";
  std::cout << info.dump(2) << "\n";
  return 0;
}

int run_forward(const std::string& checkpoint, const std::string& input, const std::string& out, bool one_shot,
                double threshold) {
  const auto model = load_checkpoint<float>(checkpoint);
  const auto clip = load_clip<float>(input, model.config.channels);
  NoGradGuard no_grad;
  const auto pred = forward(model, clip, one_shot);
  fs::create_directories(out);
  const std::size_t t = clip.dim(0), h = clip.dim(1), w = clip.dim(2);
  const auto probs = pred.probabilities.data();
  for (std::size_t f = 0; f < t; ++f) {
    const auto frame = probs.subspan(f * h * w, h * w);
    write_pnm(fs::path(out) / frame_name("mask", f, ".pgm"), mask_to_image(h, w, binarize(frame, threshold)));
  }
  save_tensor(fs::path(out) / "probabilities.rtns", pred.probabilities);
  std::cout << "wrote " << t << " mask(s) to " << out << "\n";
  return 0;
}

int run_train(RunConfig config, const std::string& data_dir, const std::string& out) {
  config.validate();
  const auto dataset = data_dir.empty() ? generate_dataset(config.data, config.model.channels) : load_dataset(data_dir);
  fs::create_directories(out);
  save_run_config(config, (fs::path(out) / "config.json").string());
  const auto result = train<float>(config, dataset, [](const EpochLog& e) {
    std::cout << "epoch " << e.epoch << " loss " << format_number(e.loss) << " f1 " << format_number(e.f1) << " iou "
              << format_number(e.iou) << " lr " << format_number(e.lr) << "\n";
  });
  write_metrics_csv(fs::path(out) / "metrics.csv", result.log);
  save_checkpoint(fs::path(out) / "checkpoint", result.model, nlohmann::json{{"run", config}, {"steps", result.steps}});
  std::cout << "trained " << result.steps << " steps; checkpoint in " << (fs::path(out) / "checkpoint").string()
            << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& config_path,
             const std::string& out, bool one_shot) {
  const auto model = load_checkpoint<float>(checkpoint);
  std::vector<SyntheticSample> dataset;
  if (!data_dir.empty()) {
    dataset = load_dataset(data_dir);
  } else {
    const auto cfg = config_or_default(config_path);
    dataset = generate_dataset(cfg.data, model.config.channels);
  }
  const auto metrics = evaluate(model, dataset, one_shot);
  const auto mean = mean_metrics(metrics);
  std::ofstream csv(out);
  if (!csv) throw FormatError("cannot write " + out);
  csv << "sample,f1,iou\n";
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    csv << i << ',' << format_number(metrics[i].f1) << ',' << format_number(metrics[i].iou) << '\n';
  }
  csv << "mean," << format_number(mean.f1) << ',' << format_number(mean.iou) << '\n';
  std::cout << "samples " << metrics.size() << " mean f1 " << format_number(mean.f1) << " mean iou "
            << format_number(mean.iou) << "\n";
  return 0;
}

int run_flops(const std::string& config_path, std::size_t h, std::size_t w, std::size_t t, const std::string& out) {
  const auto cfg = config_or_default(config_path);
  const auto text = nlohmann::json(cost_report(cfg.model, h, w, t)).dump(2);
  if (out.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream(out) << text << "\n";
  }
  return 0;
}

int run_gradcheck(const std::string& config_path, std::uint64_t seed) {
  ModelConfig cfg = gradcheck_model_config();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw FormatError("cannot open " + config_path);
    const auto j = nlohmann::json::parse(in);
    cfg = j.contains("model") ? j.at("model").get<ModelConfig>() : j.get<ModelConfig>();
  }
  cfg.validate();
  const auto r = model_gradcheck(cfg, seed);
  std::cout << "max relative error " << r.max_rel_error << " (worst " << r.worst << ", " << r.checked
            << " elements, max abs error " << r.max_abs_error << ")\n";
  return r.max_rel_error < 1e-4 ? 0 : 2;
}

int run_gen_data(RunConfig config, const std::string& out) {
  config.validate();
  const auto samples = generate_dataset(config.data, config.model.channels);
  save_dataset(out, samples);
  std::cout << "wrote " << samples.size() << " sample(s) to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RelayFormer: manipulation localization with relay attention"};
  app.require_subcommand(1);

  std::string input, out, checkpoint, config_path, data_dir, one_shot = "on";
  std::size_t unit_size = 64, height = 128, width = 128, frames = 1;
  double threshold = 0.5;
  std::uint64_t seed = 42;
  std::optional<std::size_t> steps, samples;
  std::optional<double> lr;
  std::optional<std::uint64_t> run_seed;

  auto* partition = app.add_subcommand("partition", "Cut an image or frame directory into units (RTNS)");
  partition->add_option("--input", input, "PGM/PPM file or directory of frames")->required();
  partition->add_option("--unit-size", unit_size, "Unit side P")->check(CLI::PositiveNumber);
  partition->add_option("--out", out, "Output RTNS file; the grid goes to <out>.json")->required();

  auto* fwd = app.add_subcommand("forward", "Predict masks for an image or clip");
  fwd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  fwd->add_option("--input", input, "PGM/PPM file or directory of frames")->required();
  fwd->add_option("--out", out, "Output directory for mask PGMs")->required();
  fwd->add_option("--one-shot", one_shot, "Reuse frame-0 queries for all frames")
      ->check(CLI::IsMember({"on", "off"}));
  fwd->add_option("--threshold", threshold, "Binarization threshold")->check(CLI::Range(0.0, 1.0));

  auto* tr = app.add_subcommand("train", "Train on synthetic or stored samples");
  tr->add_option("--config", config_path, "RunConfig JSON");
  tr->add_option("--data", data_dir, "Dataset directory written by gen-data");
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--steps", steps, "Override optimizer steps");
  tr->add_option("--lr", lr, "Override base learning rate");
  tr->add_option("--seed", run_seed, "Override run seed");

  auto* ev = app.add_subcommand("eval", "Per-sample F1/IoU of a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ev->add_option("--data", data_dir, "Dataset directory written by gen-data");
  ev->add_option("--config", config_path, "RunConfig JSON used to generate data when --data is absent");
  ev->add_option("--out", out, "Output CSV")->required();
  ev->add_option("--one-shot", one_shot, "Reuse frame-0 queries for all frames")->check(CLI::IsMember({"on", "off"}));

  auto* fl = app.add_subcommand("flops", "Analytic cost report (JSON)");
  fl->add_option("--config", config_path, "RunConfig JSON");
  fl->add_option("--height", height, "Frame height")->check(CLI::PositiveNumber);
  fl->add_option("--width", width, "Frame width")->check(CLI::PositiveNumber);
  fl->add_option("--frames", frames, "Clip length")->check(CLI::PositiveNumber);
  fl->add_option("--out", out, "Write JSON here instead of stdout");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all model gradients");
  gc->add_option("--config", config_path, "ModelConfig or RunConfig JSON (default: small f64 model)");
  gc->add_option("--seed", seed, "Initialization seed");

  auto* gen = app.add_subcommand("gen-data", "Write synthetic copy-move/inpaint samples");
  gen->add_option("--config", config_path, "RunConfig JSON");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--samples", samples, "Override sample count");
  gen->add_option("--seed", run_seed, "Override data seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*partition) return run_partition(input, unit_size, out);
    if (*fwd) return run_forward(checkpoint, input, out, one_shot == "on", threshold);
    if (*tr) {
      auto cfg = config_or_default(config_path);
      if (steps) cfg.steps = *steps;
      if (lr) cfg.optim.lr = *lr;
      if (run_seed) cfg.seed = *run_seed;
      return run_train(cfg, data_dir, out);
    }
    if (*ev) return run_eval(checkpoint, data_dir, config_path, out, one_shot == "on");
    if (*fl) return run_flops(config_path, height, width, frames, out);
    if (*gc) return run_gradcheck(config_path, seed);
    if (*gen) {
      auto cfg = config_or_default(config_path);
      if (samples) cfg.data.samples = *samples;
      if (run_seed) cfg.data.seed = *run_seed;
      return run_gen_data(cfg, out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
