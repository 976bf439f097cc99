// Acceptance run: one PASS/FAIL line per primary criterion. The desk
// reproduction trains four variants on a generated corpus under --work.

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

#include "fd.hpp"
#include "patchforge/patchforge.hpp"

using namespace patchforge;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

template <class F>
void criterion(const std::string& name, F f) {
  try {
    report(name, f());
  } catch (const std::exception& e) {
    report(name, {false, std::string("exception: ") + e.what()});
  }
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

// ---- aggregation ----

std::vector<double> naive_aggregate(const Tensor<double>& f, const PoolingConfig& cfg) {
  const std::size_t np = f.dim(0), c = f.dim(1);
  std::vector<double> out;
  for (Pooling p : kPoolingOrder) {
    if (!cfg.has(p)) continue;
    for (std::size_t j = 0; j < c; ++j) {
      double mx = f[j], mn = f[j], s = 0, sq = 0;
      for (std::size_t i = 0; i < np; ++i) {
        const double v = f[i * c + j];
        mx = v > mx ? v : mx;
        mn = v < mn ? v : mn;
        s += v;
        sq += v * v;
      }
      const double n = static_cast<double>(np);
      out.push_back(p == Pooling::max ? mx : p == Pooling::min ? mn : p == Pooling::mean ? s / n : sq / n);
    }
  }
  return out;
}

// Column values spaced well beyond the finite-difference step so no
// perturbation crosses a tie.
Tensor<double> tie_free_matrix(std::size_t np, std::size_t c, std::mt19937_64& rng) {
  Tensor<double> f(Shape{np, c});
  std::uniform_real_distribution<double> u(0, 0.5);
  std::vector<std::size_t> perm(np);
  for (std::size_t j = 0; j < c; ++j) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < np; ++i) f[i * c + j] = (static_cast<double>(perm[i]) + u(rng)) * 0.1 - 1.5;
  }
  return f;
}

Outcome aggregation_criterion() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  const PoolingConfig all = PoolingConfig::all();
  double worst = 0;
  std::size_t exact_mismatch = 0, sparse_violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t np = dim(rng), c = dim(rng);
    Tensor<double> f = tie_free_matrix(np, c, rng);
    const auto agg = aggregate(f, all);
    if (agg.values != naive_aggregate(f, all)) ++exact_mismatch;
    const Tensor<double> up = fd::random(Shape{all.output_width(c)}, rng, 0.5, 1.5);
    const Tensor<double> g = aggregate_backward<double>(up.values(), f, agg, all);

    // The loss is a sum over channels, so each coordinate's difference
    // quotient only needs its own column.
    std::vector<double> num(np * c);
    for (std::size_t j = 0; j < c; ++j) {
      Tensor<double> col(Shape{np, 1});
      for (std::size_t i = 0; i < np; ++i) col[i] = f[i * c + j];
      std::vector<double> u;
      for (std::size_t b = 0; b < 4; ++b) u.push_back(up[b * c + j]);
      auto loss = [&] {
        const auto v = aggregate(col, all).values;
        return std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      };
      const auto gc = fd::gradient(col.values(), loss);
      for (std::size_t i = 0; i < np; ++i) num[i * c + j] = gc[i];
    }
    worst = std::max(worst, fd::rel_err(g.values(), num));

    for (Pooling p : {Pooling::max, Pooling::min}) {
      PoolingConfig one{p};
      const auto a1 = aggregate(f, one);
      const Tensor<double> u1 = fd::random(Shape{c}, rng, 0.5, 1.5);
      const Tensor<double> g1 = aggregate_backward<double>(u1.values(), f, a1, one);
      for (std::size_t j = 0; j < c; ++j) {
        std::size_t nz = 0;
        for (std::size_t i = 0; i < np; ++i) nz += g1.at(i, j) != 0 ? 1 : 0;
        if (nz != 1) ++sparse_violations;
      }
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "1000 matrices, forward mismatches " << exact_mismatch << ", worst FD rel err " << worst << ", sparse violations "
     << sparse_violations << ", " << fmt(secs, 2) << " s";
  return {exact_mismatch == 0 && worst <= 1e-6 && sparse_violations == 0 && secs < 10, os.str()};
}

// ---- end-to-end gradient ----

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.patch = 8;
  cfg.stride = 8;
  cfg.backbone = {{4, 4}, 1};
  cfg.head = {8, 4};
  cfg.seed = 3;
  return cfg;
}

Outcome micro_gradient_criterion() {
  const auto t0 = Clock::now();
  Model<double> m(micro_config());
  std::mt19937_64 rng(17);
  ImageBuffer img(16, 16, 3);
  std::uniform_real_distribution<double> u(0, 1);
  for (double& v : img.values) v = u(rng);
  auto fw = m.forward_image(img, true);
  if (fw.grid.count() != 4 || m.feature_width() != 4) return {false, "micro model is not 4 patches x 4 channels"};
  m.params().zero_grad();
  m.backward(fw, 1);
  auto loss = [&] {
    const double z = m.forward_image(img, false).logit;
    return kernels::bce_with_logit_forward(Tensor<double>::scalar(z), Tensor<double>::scalar(1.0));
  };
  double worst = 0;
  std::string worst_name;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const std::vector<double> g = *m.params()[i].grad;
    const double e = fd::rel_err(g, fd::gradient(m.params()[i].values(), loss));
    if (e >= worst) worst = e, worst_name = m.params().name(i);
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 60,
          std::to_string(m.params().size()) + " tensors, worst rel err " + sci(worst) + " (" + worst_name + "), " +
              fmt(secs, 2) + " s"};
}

// ---- checkpointing ----

struct Chain {
  std::vector<LayerPtr<double>> layers;
  ParamSet<double> params;
};

Chain random_chain(std::mt19937_64& rng) {
  Chain c;
  for (std::size_t l = 0; l < 12; ++l) {
    if (l % 3 == 2) {
      c.layers.push_back(std::make_shared<ReluLayer<double>>());
    } else {
      const auto idx = c.params.add("k" + std::to_string(l), fd::random(Shape{3, 3, 3, 3}, rng, -0.4, 0.4));
      c.layers.push_back(std::make_shared<Conv2dLayer<double>>(idx));
    }
  }
  return c;
}

struct ChainRun {
  std::vector<double> grads, input_grad;
  MemoryMeter meter;
};

ChainRun run_chain_plan(Chain c, const Tensor<double>& x, const Tensor<double>& up, const CheckpointPlan& plan) {
  for (std::size_t i = 0; i < c.params.size(); ++i) c.params[i].grad.emplace(c.params[i].size(), 0.0);
  ChainRun r;
  ChainState<double> st;
  checkpointed_forward(c.layers, c.params, x, plan, r.meter, st);
  r.input_grad = checkpointed_backward(c.layers, c.params, st, up, plan, r.meter, true).values();
  for (std::size_t i = 0; i < c.params.size(); ++i) r.grads.insert(r.grads.end(), c.params[i].grad->begin(), c.params[i].grad->end());
  return r;
}

ChainRun vanilla(Chain c, const Tensor<double>& x, const Tensor<double>& up) {
  for (std::size_t i = 0; i < c.params.size(); ++i) c.params[i].grad.emplace(c.params[i].size(), 0.0);
  std::vector<Tensor<double>> acts{x};
  for (const auto& l : c.layers) acts.push_back(l->forward(c.params, acts.back()));
  Tensor<double> g = up;
  for (std::size_t l = c.layers.size(); l-- > 0;) g = c.layers[l]->backward(c.params, acts[l], g, true);
  ChainRun r;
  r.input_grad = g.values();
  for (std::size_t i = 0; i < c.params.size(); ++i) r.grads.insert(r.grads.end(), c.params[i].grad->begin(), c.params[i].grad->end());
  return r;
}

Outcome checkpoint_equivalence_criterion() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(12);
  const std::size_t L = 12;
  const std::vector<std::pair<std::string, CheckpointPlan>> plans = {
      {"every-layer", CheckpointPlan::every_layer(L)}, {"sqrt", plan_checkpoints(L)}, {"2-segment", plan_checkpoints(L, 6)}};
  std::size_t grad_mismatch = 0, count_violations = 0, runs = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Chain c = random_chain(rng);
    const auto x = fd::random(Shape{2, 3, 8, 8}, rng);
    const auto up = fd::random(Shape{2, 3, 8, 8}, rng);
    const ChainRun ref = vanilla(c, x, up);
    for (const auto& [name, plan] : plans) {
      const ChainRun r = run_chain_plan(c, x, up, plan);
      ++runs;
      if (r.grads != ref.grads || r.input_grad != ref.input_grad) ++grad_mismatch;
      for (std::size_t l = 0; l < L; ++l) {
        if (r.meter.forward_op_count[l] != (plan.is_checkpoint(l) ? 1 : 2)) ++count_violations;
      }
    }
  }
  std::size_t peak_violations = 0;
  {
    const Chain c = random_chain(rng);
    const auto x = fd::random(Shape{1, 3, 8, 8}, rng);
    const auto up = fd::random(Shape{1, 3, 8, 8}, rng);
    for (std::size_t s = 2; s < L; ++s) {
      if (run_chain_plan(c, x, up, plan_checkpoints(L, s)).meter.peak_activation_count >= static_cast<long>(L)) ++peak_violations;
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << runs << " runs, gradient mismatches " << grad_mismatch << ", forward-count violations " << count_violations
     << ", peak >= L for " << peak_violations << " spacings, " << fmt(secs, 2) << " s";
  return {grad_mismatch == 0 && count_violations == 0 && peak_violations == 0 && secs < 30, os.str()};
}

// ---- desk corpus and models ----

struct Desk {
  Manifest manifest;
  std::vector<LabeledImage> train, val, test;
  std::vector<MaskedImage> train_masked;
};

TrainConfig desk_train_config(const std::string& variant) {
  TrainConfig cfg;
  apply_variant(cfg.model, variant);
  cfg.model.patch = 16;
  cfg.model.stride = 8;
  cfg.model.backbone.convs_per_stage = 1;
  cfg.model.seed = 7;
  cfg.seed = 7;
  cfg.epochs = 5;
  return cfg;
}

DatasetConfig desk_data_config() {
  DatasetConfig d;
  d.train_pairs = 200;
  d.test_pairs = 50;
  return d;
}

Outcome overhead_criterion(const Desk& desk) {
  // exact op count on one desk image
  Model<double> ck(desk_train_config("E2E-RGB").model);
  ModelConfig plain_cfg = ck.config();
  plain_cfg.checkpointing = false;
  Model<double> plain(plain_cfg, ck.params());
  const std::size_t L = ck.backbone().size(), n_ckpt = ck.plan().checkpoint_count();
  MemoryMeter mc, mv;
  const ImageBuffer& img = desk.test.front().image;
  auto fc = ck.forward_image(img, true, &mc);
  ck.backward(fc, 1, 1.0, &mc);
  auto fv = plain.forward_image(img, true, &mv);
  plain.backward(fv, 1, 1.0, &mv);
  const long chains = mc.chains_run;
  const long extra = mc.total_forward_ops() - mv.total_forward_ops();
  const bool ops_ok = extra == chains * static_cast<long>(L - n_ckpt);

  // wall time of identical training steps with and without checkpointing
  TrainConfig cfg = desk_train_config("E2E-RGB");
  Model<float> a(cfg.model);
  ModelConfig off = cfg.model;
  off.checkpointing = false;
  Model<float> b(off, a.params());
  std::vector<Sample> batch;
  MemoryMeter meter_a, meter_b;
  double ta = 0, tb = 0;
  for (std::size_t step = 0; step < 8; ++step) {
    batch.clear();
    for (std::size_t i = 0; i < cfg.pairs_per_batch; ++i) {
      const std::size_t k = (step * cfg.pairs_per_batch + i) % (desk.train.size() / 2);
      batch.push_back(make_sample(a, desk.train[2 * k].image, desk.train[2 * k].label));
      batch.push_back(make_sample(a, desk.train[2 * k + 1].image, desk.train[2 * k + 1].label));
    }
    auto t0 = Clock::now();
    meter_b += train_step(b, batch, cfg.learning_rate).meter;
    tb += seconds_since(t0);
    t0 = Clock::now();
    meter_a += train_step(a, batch, cfg.learning_rate).meter;
    ta += seconds_since(t0);
  }
  const OverheadReport r = overhead_report(meter_b, meter_a, tb, ta);
  std::ostringstream os;
  os << "extra layer evaluations " << extra << " over " << chains << " patch chains (expected " << chains << " x (" << L << " - "
     << n_ckpt << ")); training wall-time ratio " << fmt(*r.wall_time_ratio, 3) << " (" << fmt(ta, 1) << " s vs " << fmt(tb, 1)
     << " s); " << r.to_string();
  return {ops_ok && *r.wall_time_ratio <= 1.5, os.str()};
}

std::vector<double> scores_of(const Model<float>& m, const std::vector<LabeledImage>& imgs) {
  std::vector<double> s;
  for (const auto& i : imgs) s.push_back(m.score(i.image).score);
  return s;
}

std::vector<int> labels_of(const std::vector<LabeledImage>& imgs) {
  std::vector<int> l;
  for (const auto& i : imgs) l.push_back(i.label);
  return l;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance"};
  std::string work = "acceptance_work";
  app.add_option("--work", work, "Scratch directory for the desk corpus and models");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const auto start = Clock::now();

  criterion("aggregation forward/backward on 1000 random matrices", aggregation_criterion);
  criterion("end-to-end gradient of the micro model", micro_gradient_criterion);
  criterion("checkpointed gradients equal vanilla on 12-layer chains", checkpoint_equivalence_criterion);

  criterion("patch-score fusion arithmetic", [] {
    const double v = fuse_patch_scores(0.01, 100);
    return Outcome{v >= 0.633 && v <= 0.635, "fuse_patch_scores(0.01, 100) = " + fmt(v, 6)};
  });

  criterion("AUC equals the Mann-Whitney oracle", [] {
    Rng rng(99);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
      const std::size_t n = 2 + uniform_index(rng, 199);
      std::vector<double> s(n);
      std::vector<int> l(n);
      for (std::size_t i = 0; i < n; ++i) {
        l[i] = static_cast<int>(uniform_index(rng, 2));
        s[i] = t % 2 ? std::floor(uniform(rng, 0, 8)) : uniform(rng, 0, 1) + 0.3 * l[i];
      }
      l[0] = 0;
      l[1] = 1;
      double wins = 0, pairs = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (l[i] == 1 && l[j] == 0) {
            wins += s[i] > s[j] ? 1 : s[i] == s[j] ? 0.5 : 0;
            pairs += 1;
          }
        }
      worst = std::max(worst, std::abs(auc(s, l) - wins / pairs));
    }
    std::ostringstream os;
    os << "100 score sets, worst difference " << worst;
    return Outcome{worst <= 1e-12, os.str()};
  });

  // desk corpus
  Desk desk;
  std::string checksum_a, checksum_b;
  const auto t_data = Clock::now();
  try {
    const DatasetConfig dc = desk_data_config();
    desk.manifest = build_dataset(dc, 7, (fs::path(work) / "desk").string());
    checksum_a = corpus_checksum(desk.manifest);
    checksum_b = corpus_checksum(build_dataset(dc, 7, (fs::path(work) / "desk_again").string()));
    desk.train = load_labeled(desk.manifest, Split::train);
    desk.val = load_labeled(desk.manifest, Split::val);
    desk.test = load_labeled(desk.manifest, Split::test);
    desk.train_masked = load_masked(desk.manifest, Split::train);
  } catch (const std::exception& e) {
    std::cout << "desk corpus generation failed: " << e.what() << std::endl;
  }
  std::cout << "desk corpus: " << desk.train.size() << " train, " << desk.val.size() << " val, " << desk.test.size()
            << " test images, " << fmt(seconds_since(t_data), 1) << " s" << std::endl;

  criterion("checkpointing overhead", [&] { return overhead_criterion(desk); });

  std::map<std::string, std::optional<Model<float>>> models;
  std::map<std::string, double> test_auc;
  for (const std::string variant : {"E2E-RGB", "E2E-NP", "Resize-RGB", "Patchwise-RGB"}) {
    try {
      const auto t0 = Clock::now();
      TrainConfig cfg = desk_train_config(variant);
      TrainResult<float> r = cfg.model.method == Method::patchwise ? train_patchwise<float>(cfg, desk.train_masked, desk.val)
                                                                    : train<float>(cfg, desk.train, desk.val);
      r.model.save((fs::path(work) / (variant + ".params")).string());
      test_auc[variant] = validation_auc(r.model, desk.test);
      std::cout << "trained " << variant << " in " << fmt(seconds_since(t0), 1) << " s, best val AUC "
                << fmt(r.best_val_auc) << ", test AUC " << fmt(test_auc[variant]) << std::endl;
      models[variant].emplace(std::move(r.model));
    } catch (const std::exception& e) {
      std::cout << "training " << variant << " failed: " << e.what() << std::endl;
    }
  }

  criterion("desk reproduction ordering", [&] {
    if (test_auc.size() != 4) return Outcome{false, "not every variant trained"};
    const double e2e = test_auc["E2E-RGB"], pw = test_auc["Patchwise-RGB"], rs = test_auc["Resize-RGB"];
    std::ostringstream os;
    os << "AUC E2E-RGB " << fmt(e2e) << ", Patchwise-RGB " << fmt(pw) << ", Resize-RGB " << fmt(rs);
    return Outcome{e2e >= 0.85 && e2e >= pw && pw >= rs && rs <= e2e - 0.10, os.str()};
  });

  criterion("score fusion of E2E-RGB and E2E-NP", [&] {
    if (!models["E2E-RGB"] || !models["E2E-NP"]) return Outcome{false, "models missing"};
    const auto a = scores_of(*models["E2E-RGB"], desk.test), b = scores_of(*models["E2E-NP"], desk.test);
    std::vector<double> fused;
    for (std::size_t i = 0; i < a.size(); ++i) fused.push_back(fuse_scores(std::vector<double>{a[i], b[i]}));
    const auto l = labels_of(desk.test);
    const double ua = auc(a, l), ub = auc(b, l), uf = auc(fused, l);
    std::ostringstream os;
    os << "AUC E2E-RGB " << fmt(ua) << ", E2E-NP " << fmt(ub) << ", fused " << fmt(uf);
    return Outcome{uf >= std::max(ua, ub) - 0.02, os.str()};
  });

  criterion("localization sanity", [&] {
    if (!models["E2E-RGB"]) return Outcome{false, "model missing"};
    const Model<float>& m = *models["E2E-RGB"];
    std::size_t full_frame_mismatch = 0, count_mismatch = 0, wins = 0, forgeries = 0;
    double cache_gap = 0;
    const auto test = desk.manifest.split(Split::test);
    for (const auto& rec : test) {
      const ImageBuffer img = read_pnm(desk.manifest.image_path(rec));
      const auto cache = build_cache(m, img);
      const RoiBox full{0, 0, static_cast<long>(img.height), static_cast<long>(img.width)};
      if (score_roi(m, img, full).score.score != m.score(img).score) ++full_frame_mismatch;
      for (const RoiBox& b : scan_boxes(cache.grid)) {
        cache_gap = std::max(cache_gap, std::abs(score_roi(m, img, b, &cache).score.score - score_roi(m, img, b).score.score));
      }
      const auto counts = activation_counts(cache.features);
      if (std::accumulate(counts.begin(), counts.end(), std::size_t{0}) != m.feature_width()) ++count_mismatch;
      if (rec.label != 1 || forgeries == 50) continue;
      ++forgeries;
      const Mask mask = read_mask(desk.manifest, rec);
      const ImageBuffer heat = saliency(m, img);
      double in = 0, out = 0;
      std::size_t n_in = 0;
      for (std::size_t i = 0; i < heat.values.size(); ++i) {
        if (mask.bits[i]) {
          in += heat.values[i];
          ++n_in;
        } else {
          out += heat.values[i];
        }
      }
      const std::size_t n_out = heat.values.size() - n_in;
      if (n_in && n_out && in / static_cast<double>(n_in) > out / static_cast<double>(n_out)) ++wins;
    }
    const double frac = forgeries ? static_cast<double>(wins) / static_cast<double>(forgeries) : 0.0;
    std::ostringstream os;
    os << "full-frame mismatches " << full_frame_mismatch << ", worst cache gap " << cache_gap << ", count-sum mismatches "
       << count_mismatch << ", saliency inside > outside on " << wins << "/" << forgeries << " forgeries (" << fmt(100 * frac, 1)
       << "%)";
    return Outcome{full_frame_mismatch == 0 && cache_gap <= 1e-12 && count_mismatch == 0 && forgeries == 50 && frac >= 0.7,
                   os.str()};
  });

  criterion("same-seed runs are byte-identical", [&] {
    std::vector<std::string> broken;
    if (checksum_a.empty() || checksum_a != checksum_b) broken.push_back("corpus");
    // short training runs on the desk corpus
    TrainConfig cfg = desk_train_config("E2E-RGB");
    cfg.epochs = 1;
    std::vector<LabeledImage> sub(desk.train.begin(), desk.train.begin() + std::min<std::ptrdiff_t>(40, static_cast<std::ptrdiff_t>(desk.train.size())));
    std::vector<nlohmann::json> log_a, log_b;
    const auto ra = train<float>(cfg, sub, desk.val, [&](const nlohmann::json& j) { log_a.push_back(j); });
    const auto rb = train<float>(cfg, sub, desk.val, [&](const nlohmann::json& j) { log_b.push_back(j); });
    if (ra.model.save_bytes() != rb.model.save_bytes()) broken.push_back("trained parameters");
    for (auto* log : {&log_a, &log_b})
      for (auto& j : *log) j.erase("seconds");
    if (log_a != log_b) broken.push_back("training log");
    const auto scorer = [&](const ImageBuffer& img) { return ra.model.score(img).score; };
    const auto recs = desk.manifest.split(Split::test);
    const std::string rep_a = to_json(evaluate(desk.manifest, recs, {{"E2E-RGB", scorer}})).dump();
    const std::string rep_b = to_json(evaluate(desk.manifest, recs, {{"E2E-RGB", scorer}})).dump();
    if (rep_a != rep_b) broken.push_back("evaluation report");
    const ImageBuffer& img = desk.test.back().image;
    if (saliency(ra.model, img).values != saliency(rb.model, img).values) broken.push_back("saliency");
    const auto boxes_a = auto_box_scan(ra.model, img, 3), boxes_b = auto_box_scan(rb.model, img, 3);
    for (std::size_t i = 0; i < boxes_a.size(); ++i) {
      if (boxes_a[i].to_json() != boxes_b[i].to_json()) {
        broken.push_back("box scan");
        break;
      }
    }
    std::string detail = "corpus checksum " + checksum_a.substr(0, 16) + ", parameters, training log, report, saliency, box scan";
    if (!broken.empty()) {
      detail = "differs:";
      for (const auto& b : broken) detail += " " + b;
    }
    return Outcome{broken.empty(), detail};
  });

  std::cout << (failures ? "FAILED " : "ALL PASSED ") << failures << " failing criteria, " << fmt(seconds_since(start), 1) << " s"
            << std::endl;
  return failures ? 1 : 0;
}
