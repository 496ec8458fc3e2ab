// dphdun: train, reconstruct, evaluate and sweep from the command line.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dphdun/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dphdun;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kCheckpoint = 3, kInput = 4, kDiverged = 5, kModel = 6 };

struct Overrides {
  std::optional<double> gamma, rho;
  std::optional<std::string> split, precision;
  std::optional<std::size_t> stages, steps;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--gamma", gamma, "sampling ratio in (0,1]");
    app->add_option("--split", split, "row split between the two samplers, e.g. 1:4");
    app->add_option("--rho", rho, "top-K block fraction in (0,1]");
    app->add_option("--stages", stages, "number of unrolled stages");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--steps", steps, "single-image fitting steps");
    app->add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  }

  void apply(TrainConfig& c) const {
    if (gamma) c.gamma = *gamma;
    if (rho) c.rho = *rho;
    if (split) c.split = parse_split(*split);
    if (stages) c.stages = *stages;
    if (seed) c.seed = *seed;
    if (steps) c.steps = *steps;
    if (precision) c.precision = *precision;
    c.validate();
  }

  static std::pair<int, int> parse_split(const std::string& s) {
    const auto colon = s.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(s);
      return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
    } catch (const std::exception&) {
      throw ConfigError("split must look like a:b, got '" + s + "'");
    }
  }
};

TrainConfig read_config(const std::string& path, const Overrides& ov) {
  TrainConfig c = path.empty() ? TrainConfig{} : load_config(path);
  ov.apply(c);
  return c;
}

template <class Fn>
auto with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f64") return fn(double{});
  return fn(float{});
}

// Writes `text` to `path` via a temporary file so a failure leaves nothing behind.
void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".part";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + path.string());
    out << text;
    if (!out) throw IngestionError("short write to " + path.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, checkpoint, image, data, log, resume;
  Overrides ov;
};

template <class T>
int run_train(const TrainArgs& a, TrainConfig cfg) {
  std::unique_ptr<Trainer<T>> tr;
  if (!a.resume.empty()) {
    tr = Trainer<T>::load(a.resume);
  } else {
    tr = std::make_unique<Trainer<T>>(cfg);
  }
  tr->set_divergence_dump(a.checkpoint + ".diverged");
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!a.log.empty()) {
    log_file.open(a.log, std::ios::trunc);
    if (!log_file) throw IngestionError("cannot write log " + a.log);
    log = &log_file;
  }
  const auto t0 = std::chrono::steady_clock::now();
  if (!a.image.empty()) {
    auto img = io::read_pgm(a.image);
    if (img.height % cfg.alignment() || img.width % cfg.alignment()) {
      img = io::reflect_pad(img, cfg.alignment());
    }
    tr->overfit_single_image(io::to_tensor<T>(img), cfg.steps, log);
  } else {
    const std::string dir = a.data.empty() ? cfg.data_dir : a.data;
    if (dir.empty()) throw ConfigError("nothing to train on: give --image, --data or data_dir in the config");
    std::vector<io::GrayImage> images;
    for (auto& n : pipeline::load_directory(dir)) images.push_back(std::move(n.image));
    *log << "step,loss,psnr\n";
    for (std::size_t e = 0; e < cfg.epochs; ++e) tr->train_epoch(images, log);
  }
  tr->save(a.checkpoint);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "trained " << tr->global_step() << " steps in " << secs << " s; checkpoint " << a.checkpoint << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconArgs {
  std::string checkpoint, input, output, dump;
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

template <class T>
int run_reconstruct(const ReconArgs& a) {
  auto tr = Trainer<T>::load(a.checkpoint);
  const auto img = io::read_pgm(a.input);
  const auto rec = pipeline::reconstruct_image(tr->model(), img, a.sigma, pipeline::mix_seed(a.seed, 0));
  io::write_pgm(a.output, rec.image);
  if (!a.dump.empty()) {
    io::write_pgm(a.dump + "_hard_mask.pgm", rec.hard_mask);
    io::write_pgm(a.dump + "_soft_map.pgm", rec.soft_map);
  }
  const auto row = pipeline::score(fs::path(a.input).filename().string(), img, rec.image);
  std::cout << "psnr_db," << pipeline::format_number(row.psnr) << "\nssim," << pipeline::format_number(row.ssim)
            << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalArgs {
  std::string checkpoint, data, report, predictions;
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

void write_report(const std::string& path, const pipeline::EvalReport& rep) {
  std::ostringstream csv;
  pipeline::write_csv(csv, rep);
  if (path.empty() || path == "-") {
    std::cout << csv.str();
    return;
  }
  write_text(path, csv.str());
  write_text(path + ".json", pipeline::to_json(rep).dump(2) + "\n");
}

template <class T>
pipeline::EvalReport evaluate_checkpoint(const std::string& checkpoint, const std::vector<pipeline::NamedImage>& images,
                                         double sigma, std::uint64_t seed) {
  auto tr = Trainer<T>::load(checkpoint);
  return pipeline::evaluate(tr->model(), images, sigma, seed);
}

pipeline::EvalReport evaluate_any(const std::string& checkpoint, const std::vector<pipeline::NamedImage>& images,
                                  double sigma, std::uint64_t seed) {
  if (checkpoint_value_bytes(checkpoint) == 8) return evaluate_checkpoint<double>(checkpoint, images, sigma, seed);
  return evaluate_checkpoint<float>(checkpoint, images, sigma, seed);
}

int run_evaluate(const EvalArgs& a) {
  const auto truth = pipeline::load_directory(a.data);
  pipeline::EvalReport rep;
  if (!a.predictions.empty()) {
    rep = pipeline::compare(truth, pipeline::load_directory(a.predictions));
  } else {
    if (a.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint or --predictions");
    rep = evaluate_any(a.checkpoint, truth, a.sigma, a.seed);
  }
  rep.config["noise_sigma"] = a.sigma;
  rep.config["noise_seed"] = a.seed;
  write_report(a.report, rep);
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string axis, values, config, image, data, checkpoint, output;
  std::uint64_t noise_seed = 0;
  Overrides ov;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty --values list");
  return out;
}

double parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
}

std::string sweep_csv(const SweepArgs& a, const TrainConfig& base) {
  const auto values = split_list(a.values);
  std::ostringstream out;
  out << "axis,value,psnr_db,ssim,initial_loss,final_loss,seconds\n";
  if (a.axis == "noise") {
    if (a.checkpoint.empty()) throw ConfigError("noise sweep needs --checkpoint");
    std::vector<pipeline::NamedImage> images;
    if (!a.data.empty()) images = pipeline::load_directory(a.data);
    else if (!a.image.empty()) images.push_back({fs::path(a.image).filename().string(), io::read_pgm(a.image)});
    else throw ConfigError("noise sweep needs --data or --image");
    std::vector<double> sigmas;
    for (const auto& v : values) {
      sigmas.push_back(parse_double(v));
      if (!(sigmas.back() >= 0.0)) throw ConfigError("noise levels must be nonnegative");
    }
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      const auto rep = evaluate_any(a.checkpoint, images, sigmas[i], a.noise_seed);
      out << "noise," << values[i] << ',' << pipeline::format_number(rep.mean_psnr) << ','
          << pipeline::format_number(rep.mean_ssim) << ",,," << rep.seconds << '\n';
    }
    return out.str();
  }

  if (a.image.empty()) throw ConfigError(a.axis + " sweep needs --image");
  const auto img = io::read_pgm(a.image);
  std::vector<TrainConfig> configs;
  for (const auto& v : values) {
    TrainConfig c = base;
    if (a.axis == "stages") c.stages = static_cast<std::size_t>(parse_double(v));
    else if (a.axis == "split") c.split = Overrides::parse_split(v);
    else if (a.axis == "rho") c.rho = parse_double(v);
    else throw ConfigError("unknown sweep axis '" + a.axis + "' (stages|split|rho|noise)");
    c.validate();
    configs.push_back(c);
  }
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto fp = with_precision(configs[i].precision, [&](auto tag) {
      using T = decltype(tag);
      return pipeline::fit_and_score<T>(configs[i], img);
    });
    out << a.axis << ',' << values[i] << ',' << pipeline::format_number(fp.psnr) << ','
        << pipeline::format_number(fp.ssim) << ',' << pipeline::format_number(fp.initial_loss) << ','
        << pipeline::format_number(fp.final_loss) << ',' << fp.seconds << '\n';
  }
  return out.str();
}

int run_sweep(const SweepArgs& a) {
  const TrainConfig base = read_config(a.config, a.ov);
  const std::string csv = sweep_csv(a, base);
  if (a.output.empty() || a.output == "-") std::cout << csv;
  else write_text(a.output, csv);
  return kOk;
}

int guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "error: configuration: " << e.what() << '\n';
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const IngestionError& e) {
    std::cerr << "error: input: " << e.what() << '\n';
    return kInput;
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kModel;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-path hyperprior unfolding network for block compressive sensing"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", ta.config, "JSON training configuration")->check(CLI::ExistingFile);
  train->add_option("--checkpoint", ta.checkpoint, "checkpoint to write")->required();
  train->add_option("--image", ta.image, "fit a single PGM image for `steps` updates");
  train->add_option("--data", ta.data, "directory of PGM training images");
  train->add_option("--log", ta.log, "CSV training log (default stdout)");
  train->add_option("--resume", ta.resume, "continue from this checkpoint");
  ta.ov.add_to(train);

  ReconArgs ra;
  auto* recon = app.add_subcommand("reconstruct", "sample and reconstruct one image");
  recon->add_option("--checkpoint", ra.checkpoint, "trained model")->required();
  recon->add_option("--input", ra.input, "PGM image")->required();
  recon->add_option("--output", ra.output, "PGM reconstruction")->required();
  recon->add_option("--dump-guidance", ra.dump, "write <prefix>_hard_mask.pgm and <prefix>_soft_map.pgm");
  recon->add_option("--noise-sigma", ra.sigma, "Gaussian noise added to the measurements");
  recon->add_option("--seed", ra.seed, "noise seed");

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "PSNR/SSIM report over a directory of PGM images");
  eval->add_option("--checkpoint", ea.checkpoint, "trained model (not needed with --predictions)");
  eval->add_option("--data", ea.data, "ground-truth PGM directory")->required();
  eval->add_option("--report", ea.report, "CSV report (a .json sidecar is written next to it)");
  eval->add_option("--predictions", ea.predictions, "score these PGM files instead of running a model");
  eval->add_option("--noise-sigma", ea.sigma, "Gaussian noise added to the measurements");
  eval->add_option("--seed", ea.seed, "noise seed");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "one CSV row per configuration along an axis");
  sweep->add_option("--axis", sa.axis)->required()->check(CLI::IsMember({"stages", "split", "rho", "noise"}));
  sweep->add_option("--values", sa.values, "comma-separated values")->required();
  sweep->add_option("--config", sa.config, "JSON base configuration")->check(CLI::ExistingFile);
  sweep->add_option("--image", sa.image, "PGM image for the fitting sweeps");
  sweep->add_option("--data", sa.data, "PGM directory for the noise sweep");
  sweep->add_option("--checkpoint", sa.checkpoint, "trained model for the noise sweep");
  sweep->add_option("--output", sa.output, "CSV output (default stdout)");
  sweep->add_option("--noise-seed", sa.noise_seed, "noise seed shared by every sigma");
  sa.ov.add_to(sweep);

  CLI11_PARSE(app, argc, argv);

  if (*train) {
    return guarded([&] {
      const TrainConfig cfg = read_config(ta.config, ta.ov);
      return with_precision(cfg.precision, [&](auto tag) { return run_train<decltype(tag)>(ta, cfg); });
    });
  }
  if (*recon) {
    return guarded([&] {
      if (checkpoint_value_bytes(ra.checkpoint) == 8) return run_reconstruct<double>(ra);
      return run_reconstruct<float>(ra);
    });
  }
  if (*eval) return guarded([&] { return run_evaluate(ea); });
  return guarded([&] { return run_sweep(sa); });
}
