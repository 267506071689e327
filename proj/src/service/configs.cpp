#include "promptmed/service/configs.hpp"

#include <set>

namespace promptmed {

namespace {

// Reads typed keys from an object and complains about the rest.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j_.is_null() && !j_.is_object()) throw ConfigError(what_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(what_ + ": unknown key '" + it.key() + "'");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const auto& v = j_[key];
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(what_ + ": key '" + key + "' has the wrong type");
    }
  }

  template <class E, class F>
  void get_enum(const char* key, E& out, F parse) {
    std::string s;
    bool present = j_.is_object() && j_.contains(key);
    get(key, s);
    if (!present) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(what_ + ": " + e.what());
    }
  }

  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_[key];
  }

 private:
  const nlohmann::json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

template <class C>
C validated(C c, const char* what) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
  return c;
}

}  // namespace

AssistTrainConfig assist_config_from_json(const nlohmann::json& j) {
  AssistTrainConfig c;
  {
    Reader r(j, "assist config");
    r.get_enum("prompt_mode", c.prompt_mode, prompt_mode_from);
    r.get("epochs", c.epochs);
    r.get("lr", c.lr);
    r.get_enum("loss", c.loss, assist_loss_from);
    r.get("seed", c.seed);
    r.get_enum("bg_points", c.bg_points, background_points_from);
    if (auto* p = r.sub("points")) {
      Reader q(*p, "assist config points");
      q.get_enum("scheme", c.point_cfg.scheme, point_scheme_from);
      q.get("n_min", c.point_cfg.n_min);
      q.get("n_max", c.point_cfg.n_max);
      q.get("boundary_band", c.point_cfg.boundary_band);
    }
    if (auto* b = r.sub("box_jitter")) {
      Reader q(*b, "assist config box_jitter");
      q.get("d_in", c.box_cfg.d_in);
      q.get("d_out", c.box_cfg.d_out);
    }
  }
  return validated(c, "assist config");
}

SapTrainConfig sapnet_config_from_json(const nlohmann::json& j) {
  SapTrainConfig c;
  {
    Reader r(j, "sapnet config");
    r.get("epochs", c.epochs);
    r.get("lr", c.lr);
    r.get("beta", c.beta);
    r.get("alpha", c.alpha);
    r.get("sigma", c.sigma);
    r.get("d", c.d);
    r.get("seed", c.seed);
    r.get("w_seg", c.w_seg);
    r.get("w_align", c.w_align);
    r.get("align_beta", c.align_beta);
    r.get("smooth", c.smooth);
    r.get("use_pe", c.use_pe);
  }
  return validated(c, "sapnet config");
}

PropagationConfig propagation_config_from_json(const nlohmann::json& j) {
  PropagationConfig c;
  {
    Reader r(j, "propagation config");
    r.get("lambda", c.lambda);
    r.get("n_points", c.n_points);
    r.get_enum("direction", c.direction, direction_from);
    r.get("max_slices", c.max_slices);
    r.get("resample", c.resample);
    r.get("seed", c.seed);
  }
  return validated(c, "propagation config");
}

PostProcessConfig post_config_from_json(const nlohmann::json& j) {
  PostProcessConfig c;
  {
    Reader r(j, "post-processing config");
    r.get("k_components", c.k_components);
    r.get("n_points", c.n_points);
    r.get_enum("prompt_type", c.prompt_type, coarse_prompt_type_from);
  }
  return validated(c, "post-processing config");
}

ClassifierTrainConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierTrainConfig c;
  Reader r(j, "classifier config");
  r.get("samples_per_class", c.samples_per_class);
  r.get("epochs", c.epochs);
  r.get("lr", c.lr);
  r.get("l2", c.l2);
  r.get("seed", c.seed);
  if (c.samples_per_class < 1 || c.epochs < 1 || !(c.lr > 0) || c.l2 < 0)
    throw ConfigError("classifier config: values out of range");
  return c;
}

nlohmann::json to_json(const AssistTrainConfig& c) {
  return {{"prompt_mode", to_string(c.prompt_mode)},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"loss", to_string(c.loss)},
          {"seed", c.seed},
          {"bg_points", to_string(c.bg_points)},
          {"points",
           {{"scheme", to_string(c.point_cfg.scheme)},
            {"n_min", c.point_cfg.n_min},
            {"n_max", c.point_cfg.n_max},
            {"boundary_band", c.point_cfg.boundary_band}}},
          {"box_jitter", {{"d_in", c.box_cfg.d_in}, {"d_out", c.box_cfg.d_out}}}};
}

nlohmann::json to_json(const SapTrainConfig& c) {
  return {{"epochs", c.epochs}, {"lr", c.lr},       {"beta", c.beta},       {"alpha", c.alpha},
          {"sigma", c.sigma},   {"d", c.d},         {"seed", c.seed},       {"w_seg", c.w_seg},
          {"w_align", c.w_align}, {"align_beta", c.align_beta}, {"smooth", c.smooth}, {"use_pe", c.use_pe}};
}

nlohmann::json to_json(const PropagationConfig& c) {
  const char* d = c.direction == Direction::Up ? "up" : c.direction == Direction::Down ? "down" : "both";
  return {{"lambda", c.lambda}, {"n_points", c.n_points}, {"direction", d},
          {"max_slices", c.max_slices}, {"resample", c.resample}, {"seed", c.seed}};
}

nlohmann::json to_json(const PostProcessConfig& c) {
  return {{"k_components", c.k_components}, {"n_points", c.n_points}, {"prompt_type", to_string(c.prompt_type)}};
}

}  // namespace promptmed
