#pragma once

// JSON-over-HTTP front end. Images are content addressed; per-variant patch
// features are computed once per image and reused by ROI queries and box
// scans. Field names are listed in README.md.

// before httplib: its resolver include defines a `_res` macro Eigen trips on
#include "patchforge/evaluator.hpp"
#include "patchforge/localizer.hpp"

// curl posts raw files as form-urlencoded by default
#ifndef CPPHTTPLIB_FORM_URL_ENCODED_PAYLOAD_MAX_LENGTH
#define CPPHTTPLIB_FORM_URL_ENCODED_PAYLOAD_MAX_LENGTH (size_t{64} << 20)
#endif
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <mutex>
#include <shared_mutex>

namespace patchforge {

struct HttpError : Error {
  int status;
  HttpError(int s, const std::string& what) : Error(what), status(s) {}
};

/// Loads every `*.params` file of a directory (sorted by file name).
inline std::vector<Model<float>> load_params_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (e.path().extension() == ".params") files.push_back(e.path().string());
  }
  if (ec) throw IoError("cannot list " + dir + ": " + ec.message());
  std::sort(files.begin(), files.end());
  std::vector<Model<float>> models;
  for (const auto& f : files) models.push_back(Model<float>::load(f));
  return models;
}

class Service {
 public:
  struct Options {
    std::string data_dir;  // session store; empty keeps sessions in memory only
    std::string ui_dir;    // static files served under /ui when present
  };

  Service(std::vector<Model<float>> models, Options opt) : opt_(std::move(opt)) {
    for (auto& m : models) {
      const std::string name = m.config().variant_name();
      if (find_variant(name)) throw ConfigError("variant " + name + " loaded twice");
      variants_.push_back(std::make_unique<Variant>(Variant{name, m.params_digest(), std::move(m)}));
    }
    if (!opt_.data_dir.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(std::filesystem::path(opt_.data_dir) / "images", ec);
      if (ec) throw IoError("cannot create session store " + opt_.data_dir + ": " + ec.message());
    }
    routes();
  }

  httplib::Server& server() { return server_; }
  std::vector<std::string> variant_names() const {
    std::vector<std::string> n;
    for (const auto& v : variants_) n.push_back(v->name);
    return n;
  }
  /// Patches pushed through a backbone since start-up.
  std::size_t backbone_patch_evaluations() const { return backbone_evals_.load(); }

  // ---- library-level operations behind the endpoints ----

  std::string put_image(const std::string& bytes) {
    ImageBuffer img;
    try {
      img = decode_pnm(bytes, "upload");
    } catch (const Error& e) {
      throw HttpError(400, e.what());
    }
    if (img.channels != 3) throw HttpError(400, "upload must be a binary PPM (P6) image");
    const std::string canonical = encode_pnm(img);
    const std::string id = sha256_hex(canonical).substr(0, 32);
    std::unique_lock lock(mutex_);
    if (!sessions_.count(id)) {
      if (!opt_.data_dir.empty()) write_file(session_path(id), canonical);
      auto s = std::make_shared<Session>();
      s->image = std::move(img);
      s->created = std::chrono::system_clock::now();
      sessions_[id] = std::move(s);
    }
    return id;
  }

  nlohmann::json score(const std::string& id, const std::string& variant, bool fusion) {
    auto s = session(id);
    const Variant& v = pick(variant);
    nlohmann::json per = nlohmann::json::object();
    std::vector<double> all;
    double chosen = 0.0, logit = 0.0;
    for (const auto& var : variants_) {
      if (!fusion && var.get() != &v) continue;
      const Score sc = global_score(*s, *var, nullptr);
      per[var->name] = sc.score;
      all.push_back(sc.score);
      if (var.get() == &v) chosen = sc.score, logit = sc.logit;
    }
    return {{"image_id", id},
            {"variant", v.name},
            {"fusion", fusion},
            {"score", fusion ? fuse_scores(all) : chosen},
            {"logit", logit},
            {"per_variant", per}};
  }

  nlohmann::json activation(const std::string& id, const std::string& variant) {
    auto s = session(id);
    const Variant& v = pick_e2e(variant);
    const auto& cache = features(*s, v, nullptr);
    ActivationMap m;
    try {
      m = activation_map(cache, v.model.config().pooling);
    } catch (const ConfigError& e) {
      throw HttpError(400, e.what());
    }
    return {{"image_id", id},
            {"variant", v.name},
            {"height", s->image.height},
            {"width", s->image.width},
            {"grid_rows", m.rows},
            {"grid_cols", m.cols},
            {"channels", m.channels},
            {"counts", m.counts},
            {"pgm_base64", base64_encode(heat_to_pgm(m.heat))}};
  }

  nlohmann::json saliency_map(const std::string& id, const std::string& variant) {
    auto s = session(id);
    const Variant& v = pick_e2e(variant);
    const ImageBuffer heat = saliency(v.model, s->image);
    backbone_evals_ += v.model.grid_for(s->image).count();
    return {{"image_id", id},
            {"variant", v.name},
            {"height", heat.height},
            {"width", heat.width},
            {"pgm_base64", base64_encode(heat_to_pgm(heat))}};
  }

  nlohmann::json roi(const std::string& id, const std::string& variant, const nlohmann::json& body) {
    auto s = session(id);
    const Variant& v = pick_e2e(variant);
    const nlohmann::json* list = &body;
    if (body.is_object()) {
      if (!body.contains("boxes")) throw HttpError(400, "body needs a 'boxes' array");
      list = &body.at("boxes");
    }
    if (!list->is_array() || list->empty()) throw HttpError(400, "'boxes' must be a non-empty array");
    std::vector<RoiBox> boxes;
    for (const auto& jb : *list) {
      RoiBox b;
      try {
        b.top = jb.at("top").get<long>();
        b.left = jb.at("left").get<long>();
        b.height = jb.at("height").get<long>();
        b.width = jb.at("width").get<long>();
      } catch (const nlohmann::json::exception&) {
        throw HttpError(400, "each box needs integer top, left, height, width");
      }
      boxes.push_back(b);
    }
    std::size_t evals = 0;
    const auto& cache = features(*s, v, &evals);
    nlohmann::json out = nlohmann::json::array();
    for (RoiBox& b : boxes) {
      try {
        const RoiResult r = score_roi(v.model, s->image, b, &cache);
        evals += r.backbone_patch_evaluations;
        b.score = r.score.score;
      } catch (const InputError& e) {
        throw HttpError(400, e.what());
      }
      out.push_back(b.to_json());
    }
    return {{"image_id", id}, {"variant", v.name}, {"boxes", out}, {"backbone_patch_evaluations", evals}};
  }

  nlohmann::json autoscan(const std::string& id, const std::string& variant, std::size_t k) {
    if (k < 1) throw HttpError(400, "k must be at least 1");
    auto s = session(id);
    const Variant& v = pick_e2e(variant);
    std::size_t evals = 0;
    const auto& cache = features(*s, v, &evals);
    nlohmann::json out = nlohmann::json::array();
    for (const RoiBox& b : auto_box_scan(v.model, cache, k)) out.push_back(b.to_json());
    return {{"image_id", id}, {"variant", v.name}, {"boxes", out}, {"backbone_patch_evaluations", evals}};
  }

  nlohmann::json health() const {
    nlohmann::json vs = nlohmann::json::array();
    for (const auto& v : variants_) {
      vs.push_back({{"name", v->name}, {"method", method_name(v->model.config().method)}, {"params_digest", v->digest}});
    }
    return {{"status", variants_.empty() ? "no-model" : "ok"}, {"variants", vs}};
  }

 private:
  struct Variant {
    std::string name;
    std::string digest;
    Model<float> model;
  };

  struct Session {
    ImageBuffer image;
    std::chrono::system_clock::time_point created;
    std::mutex cache_mutex;  // single writer while a cache is built
    std::map<std::string, FeatureCache<float>> caches;
  };

  const Variant* find_variant(const std::string& name) const {
    for (const auto& v : variants_) {
      if (v->name == name) return v.get();
    }
    return nullptr;
  }

  const Variant& pick(const std::string& name) const {
    if (variants_.empty()) throw HttpError(503, "no model loaded");
    if (name.empty()) return *variants_.front();
    const Variant* v = find_variant(name);
    if (!v) throw HttpError(400, "unknown variant '" + name + "'");
    return *v;
  }

  const Variant& pick_e2e(const std::string& name) const {
    if (variants_.empty()) throw HttpError(503, "no model loaded");
    if (name.empty()) {
      for (const auto& v : variants_) {
        if (v->model.config().method == Method::e2e) return *v;
      }
      throw HttpError(400, "no end-to-end variant loaded");
    }
    const Variant& v = pick(name);
    if (v.model.config().method != Method::e2e) throw HttpError(400, "variant '" + name + "' is not end-to-end");
    return v;
  }

  std::string session_path(const std::string& id) const {
    return (std::filesystem::path(opt_.data_dir) / "images" / (id + ".ppm")).string();
  }

  std::shared_ptr<Session> session(const std::string& id) {
    {
      std::shared_lock lock(mutex_);
      auto it = sessions_.find(id);
      if (it != sessions_.end()) return it->second;
    }
    const bool plausible = id.size() == 32 && std::all_of(id.begin(), id.end(), [](char c) { return std::isxdigit(static_cast<unsigned char>(c)); });
    if (plausible && !opt_.data_dir.empty() && std::filesystem::exists(session_path(id))) {
      auto s = std::make_shared<Session>();
      s->image = read_pnm(session_path(id));
      s->created = std::chrono::system_clock::now();
      std::unique_lock lock(mutex_);
      return sessions_.emplace(id, std::move(s)).first->second;
    }
    throw HttpError(404, "unknown image id '" + id + "'");
  }

  /// Cached features of `s` under `v`, rebuilt if the parameters changed.
  const FeatureCache<float>& features(Session& s, const Variant& v, std::size_t* evals) {
    std::lock_guard lock(s.cache_mutex);
    auto it = s.caches.find(v.name);
    if (it == s.caches.end() || it->second.params_digest != v.digest) {
      FeatureCache<float> c;
      const ImageBuffer prepared = v.model.prepare(s.image);
      c.grid = v.model.grid_for(prepared);
      c.features = v.model.features(prepared, c.grid);
      c.params_digest = v.digest;
      c.global = v.model.classify_features(c.features);
      backbone_evals_ += c.grid.count();
      if (evals) *evals += c.grid.count();
      it = s.caches.insert_or_assign(v.name, std::move(c)).first;
    }
    return it->second;
  }

  Score global_score(Session& s, const Variant& v, std::size_t* evals) {
    if (v.model.config().method == Method::e2e) return features(s, v, evals).global;
    return v.model.score(s.image);
  }

  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <class F>
  static httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(res, 200, f(req));
      } catch (const HttpError& e) {
        reply(res, e.status, {{"error", e.what()}});
      } catch (const nlohmann::json::exception& e) {
        reply(res, 400, {{"error", std::string("malformed JSON: ") + e.what()}});
      } catch (const InputError& e) {
        reply(res, 400, {{"error", e.what()}});
      } catch (const std::exception& e) {
        reply(res, 500, {{"error", e.what()}});
      }
    };
  }

  static std::string param(const httplib::Request& req, const std::string& key, const std::string& fallback = "") {
    return req.has_param(key) ? req.get_param_value(key) : fallback;
  }

  void routes() {
    server_.Get("/healthz", guarded([this](const httplib::Request&) { return health(); }));
    server_.Post("/images", guarded([this](const httplib::Request& req) {
                   if (variants_.empty()) throw HttpError(503, "no model loaded");
                   const std::string id = put_image(req.body);
                   auto s = session(id);
                   return nlohmann::json{{"image_id", id}, {"height", s->image.height}, {"width", s->image.width}};
                 }));
    server_.Get("/images/:id/score", guarded([this](const httplib::Request& req) {
                  const std::string f = param(req, "fusion", "false");
                  return score(req.path_params.at("id"), param(req, "variant"), f == "true" || f == "1");
                }));
    server_.Get("/images/:id/activation", guarded([this](const httplib::Request& req) {
                  return activation(req.path_params.at("id"), param(req, "variant"));
                }));
    server_.Get("/images/:id/saliency", guarded([this](const httplib::Request& req) {
                  return saliency_map(req.path_params.at("id"), param(req, "variant"));
                }));
    server_.Post("/images/:id/roi", guarded([this](const httplib::Request& req) {
                   return roi(req.path_params.at("id"), param(req, "variant"), nlohmann::json::parse(req.body));
                 }));
    server_.Get("/images/:id/autoscan", guarded([this](const httplib::Request& req) {
                  std::size_t k = 3;
                  const std::string ks = param(req, "k", "3");
                  try {
                    std::size_t used = 0;
                    const long v = std::stol(ks, &used);
                    if (used != ks.size() || v < 1) throw std::invalid_argument(ks);
                    k = static_cast<std::size_t>(v);
                  } catch (const std::logic_error&) {
                    throw HttpError(400, "k must be a positive integer");
                  }
                  return autoscan(req.path_params.at("id"), param(req, "variant"), k);
                }));
    if (!opt_.ui_dir.empty() && std::filesystem::is_directory(opt_.ui_dir)) server_.set_mount_point("/ui", opt_.ui_dir);
  }

  Options opt_;
  std::vector<std::unique_ptr<Variant>> variants_;
  std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::atomic<std::size_t> backbone_evals_{0};
  httplib::Server server_;
};

}  // namespace patchforge
