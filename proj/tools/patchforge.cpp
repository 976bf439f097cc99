// patchforge command-line front end.
//
// Exit codes: 0 success, 1 usage, 2 data/config/I-O error, 3 numeric failure.

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "patchforge/patchforge.hpp"
#include "patchforge/service.hpp"

namespace pf = patchforge;

namespace {

struct Options {
  std::uint64_t seed = 7;
  std::string variant = "E2E-RGB";
  std::vector<std::string> params;
  std::string params_dir;
  std::string data = "corpus";
  std::string out;
  std::string log;
  std::string report = "report.json";
  std::string split = "test";
  int port = 8080;
  std::string host = "127.0.0.1";
  std::string ui_dir;
  std::size_t top_k = 3;
  std::vector<std::string> boxes;
  bool saliency = false;
  std::string image;

  pf::DatasetConfig data_cfg;
  pf::TrainConfig train_cfg;
  std::string pooling = "max,min,mean,msq";
  std::vector<std::size_t> stage_widths{16, 32, 64};
  bool no_checkpointing = false;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

pf::ModelConfig model_config(Options& o) {
  pf::ModelConfig m = o.train_cfg.model;
  pf::apply_variant(m, o.variant);
  m.pooling = pf::PoolingConfig::from_names(split_list(o.pooling));
  m.backbone.stage_widths = o.stage_widths;
  m.checkpointing = !o.no_checkpointing;
  m.seed = o.seed;
  m.validate();
  return m;
}

std::vector<pf::Model<float>> load_models(const Options& o) {
  std::vector<pf::Model<float>> models;
  if (!o.params_dir.empty()) models = pf::load_params_dir(o.params_dir);
  for (const auto& p : o.params) models.push_back(pf::Model<float>::load(p));
  if (models.empty()) throw pf::ConfigError("no model given; pass --params FILE or --params-dir DIR");
  return models;
}

int cmd_gen_data(Options& o) {
  const pf::Manifest m = pf::build_dataset(o.data_cfg, o.seed, o.data);
  std::size_t forged = 0;
  for (const auto& r : m.records) forged += static_cast<std::size_t>(r.label);
  std::cout << "corpus " << o.data << " images " << m.records.size() << " forged " << forged << '\n'
            << "checksum " << pf::corpus_checksum(m) << '\n';
  return 0;
}

int cmd_train(Options& o) {
  pf::TrainConfig cfg = o.train_cfg;
  cfg.model = model_config(o);
  cfg.seed = o.seed;
  const pf::Manifest m = pf::read_manifest(o.data);
  const std::string out = o.out.empty() ? cfg.model.variant_name() + ".params" : o.out;
  const std::string log_path = o.log.empty() ? out + ".log.jsonl" : o.log;
  std::ofstream log(log_path);
  if (!log) throw pf::IoError("cannot write " + log_path);
  auto sink = [&](const nlohmann::json& j) {
    log << j.dump() << '\n';
    log.flush();
    if (j.at("type") == "epoch") {
      std::cout << "epoch " << j.at("epoch") << " loss " << j.at("mean_loss") << " train_auc " << j.at("train_auc")
                << " val_auc " << j.at("val_auc") << '\n';
    }
  };
  const auto val = pf::load_labeled(m, pf::Split::val);
  pf::TrainResult<float> r = cfg.model.method == pf::Method::patchwise
                                 ? pf::train_patchwise<float>(cfg, pf::load_masked(m, pf::Split::train), val, sink)
                                 : pf::train<float>(cfg, pf::load_labeled(m, pf::Split::train), val, sink);
  r.model.save(out, {{"training", cfg.to_json()}, {"best_val_auc", r.best_val_auc}, {"method", cfg.model.variant_name()}});
  std::cout << "saved " << out << " variant " << cfg.model.variant_name() << " best_val_auc " << r.best_val_auc << '\n';
  return 0;
}

int cmd_eval(Options& o) {
  const auto models = load_models(o);
  const pf::Manifest m = pf::read_manifest(o.data);
  const auto records = m.split(pf::parse_split(o.split));
  std::vector<std::pair<std::string, pf::Scorer>> scorers;
  for (const auto& model : models) {
    scorers.emplace_back(model.config().variant_name(), [&model](const pf::ImageBuffer& img) { return model.score(img).score; });
  }
  pf::EvalReport report = pf::evaluate(m, records, scorers, o.split);
  std::vector<const pf::MethodReport*> e2e;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (models[i].config().method == pf::Method::e2e) e2e.push_back(&report.methods[i]);
  }
  if (e2e.size() >= 2) report.methods.push_back(pf::fuse_methods("E2E-Fusion", records, e2e));
  pf::write_file(o.report, pf::to_json(report).dump(2) + "\n");
  std::cout << pf::render_table(report) << "report " << o.report << '\n';
  return 0;
}

pf::ImageBuffer load_image(const std::string& path) { return pf::read_pnm(path); }

int cmd_score(Options& o) {
  const auto models = load_models(o);
  const pf::ImageBuffer img = load_image(o.image);
  std::vector<double> e2e;
  for (const auto& m : models) {
    const double s = m.score(img).score;
    if (m.config().method == pf::Method::e2e) e2e.push_back(s);
    std::cout << m.config().variant_name() << ' ' << std::setprecision(6) << std::fixed << s << '\n';
  }
  if (e2e.size() >= 2) std::cout << "E2E-Fusion " << pf::fuse_scores(e2e) << '\n';
  return 0;
}

const pf::Model<float>& first_e2e(const std::vector<pf::Model<float>>& models) {
  for (const auto& m : models) {
    if (m.config().method == pf::Method::e2e) return m;
  }
  throw pf::ConfigError("this command needs an end-to-end model");
}

int cmd_roi_scan(Options& o) {
  const auto models = load_models(o);
  const auto& model = first_e2e(models);
  const pf::ImageBuffer img = load_image(o.image);
  const auto cache = pf::build_cache(model, img);
  nlohmann::json out = {{"image", o.image}, {"variant", model.config().variant_name()}, {"score", cache.global.score}};
  nlohmann::json manual = nlohmann::json::array();
  for (const auto& spec : o.boxes) {
    const auto parts = split_list(spec);
    if (parts.size() != 4) throw pf::InputError("--box expects top,left,height,width");
    pf::RoiBox b{std::stol(parts[0]), std::stol(parts[1]), std::stol(parts[2]), std::stol(parts[3])};
    b.score = pf::score_roi(model, img, b, &cache).score.score;
    manual.push_back(b.to_json());
  }
  nlohmann::json automatic = nlohmann::json::array();
  for (const auto& b : pf::auto_box_scan(model, cache, o.top_k)) automatic.push_back(b.to_json());
  out["manual"] = manual;
  out["automatic"] = automatic;
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_activation_map(Options& o) {
  const auto models = load_models(o);
  const auto& model = first_e2e(models);
  const pf::ImageBuffer img = load_image(o.image);
  const std::string out = o.out.empty() ? (o.saliency ? "saliency.pgm" : "activation.pgm") : o.out;
  if (o.saliency) {
    pf::write_pnm(out, pf::saliency(model, img));
    std::cout << "saliency " << out << '\n';
    return 0;
  }
  const auto map = pf::activation_map(model, img);
  pf::write_pnm(out, map.heat);
  std::cout << nlohmann::json{{"variant", model.config().variant_name()},
                              {"grid_rows", map.rows},
                              {"grid_cols", map.cols},
                              {"channels", map.channels},
                              {"counts", map.counts},
                              {"raster", out}}
                   .dump()
            << '\n';
  return 0;
}

pf::Service* g_service = nullptr;

int cmd_serve(Options& o) {
  const char* data_dir = std::getenv("PATCHFORGE_DATA_DIR");
  pf::Service service(load_models(o), {data_dir ? data_dir : "", o.ui_dir});
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->server().stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->server().stop();
  });
  std::cout << "serving";
  for (const auto& n : service.variant_names()) std::cout << ' ' << n;
  std::cout << " on http://" << o.host << ':' << o.port << std::endl;
  if (!service.server().listen(o.host, o.port)) throw pf::IoError("cannot listen on " + o.host + ":" + std::to_string(o.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"patchforge: full-resolution forgery detection"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Read options from a TOML/INI file");
  app.allow_config_extras(CLI::config_extras_mode::error);

  app.add_option("--seed", o.seed, "Random seed")->capture_default_str();
  app.add_option("--variant", o.variant, "E2E-RGB, E2E-NP, E2E-RGB+NP, Resize-RGB or Patchwise-RGB")->capture_default_str();
  app.add_option("--params", o.params, "Parameter file (repeatable)");
  app.add_option("--params-dir", o.params_dir, "Directory of *.params files");
  app.add_option("--data", o.data, "Corpus directory")->capture_default_str();
  app.add_option("--out", o.out, "Output file or directory");

  auto& d = o.data_cfg;
  app.add_option("--height", d.height)->capture_default_str();
  app.add_option("--width", d.width)->capture_default_str();
  app.add_option("--train-pairs", d.train_pairs)->capture_default_str();
  app.add_option("--val-pairs", d.val_pairs)->capture_default_str();
  app.add_option("--test-pairs", d.test_pairs)->capture_default_str();
  app.add_option("--train-families", d.train_families)->capture_default_str();
  app.add_option("--val-families", d.val_families)->capture_default_str();
  app.add_option("--test-families", d.test_families)->capture_default_str();
  app.add_option("--weight-splicing", d.weight_splicing)->capture_default_str();
  app.add_option("--weight-copy-move", d.weight_copy_move)->capture_default_str();
  app.add_option("--weight-inpainting", d.weight_inpainting)->capture_default_str();
  app.add_option("--jpeg-probability", d.jpeg_probability)->capture_default_str();
  app.add_option("--quality-min", d.quality_min)->capture_default_str();
  app.add_option("--quality-max", d.quality_max)->capture_default_str();
  app.add_option("--area-min", d.area_min)->capture_default_str();
  app.add_option("--area-max", d.area_max)->capture_default_str();
  app.add_option("--dither-amplitude", d.dither_amplitude)->capture_default_str();

  auto& t = o.train_cfg;
  app.add_option("--patch", t.model.patch)->capture_default_str();
  app.add_option("--stride", t.model.stride)->capture_default_str();
  app.add_option("--stage-widths", o.stage_widths)->capture_default_str();
  app.add_option("--convs-per-stage", t.model.backbone.convs_per_stage)->capture_default_str();
  app.add_option("--pooling", o.pooling, "Comma-separated subset of max,min,mean,msq")->capture_default_str();
  app.add_option("--fc1", t.model.head.fc1)->capture_default_str();
  app.add_option("--fc2", t.model.head.fc2)->capture_default_str();
  app.add_option("--checkpoint-spacing", t.model.checkpoint_spacing, "0 picks ceil(sqrt(layers))")->capture_default_str();
  app.add_flag("--no-checkpointing", o.no_checkpointing);
  app.add_option("--epochs", t.epochs)->capture_default_str();
  app.add_option("--learning-rate", t.learning_rate)->capture_default_str();
  app.add_option("--pairs-per-batch", t.pairs_per_batch)->capture_default_str();
  app.add_option("--log", o.log, "Training log (JSON lines)");

  app.add_option("--report", o.report)->capture_default_str();
  app.add_option("--split", o.split)->capture_default_str();
  app.add_option("--port", o.port)->capture_default_str();
  app.add_option("--host", o.host)->capture_default_str();
  app.add_option("--ui-dir", o.ui_dir, "Static files served under /ui");
  app.add_option("--top-k", o.top_k)->capture_default_str();
  app.add_option("--box", o.boxes, "Manual ROI top,left,height,width (repeatable)");
  app.add_flag("--saliency", o.saliency, "Write input-gradient saliency instead of activation counts");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  auto* train = app.add_subcommand("train", "Train one variant");
  auto* eval = app.add_subcommand("eval", "Evaluate parameter files on a split");
  auto* score = app.add_subcommand("score", "Score one image");
  auto* roi = app.add_subcommand("roi-scan", "Score ROIs and scan for boxes");
  auto* act = app.add_subcommand("activation-map", "Write a max-pooling activation map");
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  for (auto* sub : {score, roi, act}) sub->add_option("image", o.image, "PPM image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*score) return cmd_score(o);
    if (*roi) return cmd_roi_scan(o);
    if (*act) return cmd_activation_map(o);
    if (*serve) return cmd_serve(o);
  } catch (const pf::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
