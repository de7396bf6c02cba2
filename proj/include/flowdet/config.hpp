#pragma once

#include <iomanip>
#include <sstream>

#include "flowdet/detector.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// structured-text model configuration: `key = value` lines, '#' comments.
// Keys mirror ModelConfig fields; unknown keys are errors.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string config_to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "input_h = " << cfg.input_h << "\n";
  os << "input_w = " << cfg.input_w << "\n";
  os << "stage_channels = ";
  for (size_t i = 0; i < cfg.stage_channels.size(); ++i)
    os << (i ? "," : "") << cfg.stage_channels[i];
  os << "\n";
  os << "arb_count = " << cfg.arb_count << "\n";
  os << "heads = " << cfg.heads << "\n";
  os << "window = " << cfg.window << "\n";
  os << "reduction = " << cfg.reduction << "\n";
  os << "ffn_hidden = " << cfg.ffn_hidden << "\n";
  os << "query_count = " << cfg.query_count << "\n";
  os << "class_count = " << cfg.class_count << "\n";
  os << "decoder_layers = " << cfg.decoder_layers << "\n";
  os << "gdu_sigma = " << detail::fmt_double(cfg.gdu_sigma) << "\n";
  os << "gdu_tau = " << detail::fmt_double(cfg.gdu_tau) << "\n";
  os << "lambda_cls = " << detail::fmt_double(cfg.lambda_cls) << "\n";
  os << "lambda_l1 = " << detail::fmt_double(cfg.lambda_l1) << "\n";
  os << "lambda_giou = " << detail::fmt_double(cfg.lambda_giou) << "\n";
  os << "no_object_weight = " << detail::fmt_double(cfg.no_object_weight) << "\n";
  os << "lr = " << detail::fmt_double(cfg.lr) << "\n";
  os << "weight_decay = " << detail::fmt_double(cfg.weight_decay) << "\n";
  os << "total_steps = " << cfg.total_steps << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "use_pafc = " << (cfg.use_pafc ? "true" : "false") << "\n";
  os << "use_saa = " << (cfg.use_saa ? "true" : "false") << "\n";
  os << "gate_freeze = "
     << (cfg.gate_freeze ? detail::fmt_double(*cfg.gate_freeze) : std::string("none")) << "\n";
  return os.str();
}

inline ModelConfig config_from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    line_no++;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto as_i64 = [&] { return int64_t(std::stoll(value)); };
    auto as_f64 = [&] { return std::stod(value); };
    auto as_bool = [&] {
      if (value == "true") return true;
      if (value == "false") return false;
      throw ConfigError("config key " + key + ": expected true/false, got '" + value + "'");
    };
    try {
      if (key == "input_h") cfg.input_h = as_i64();
      else if (key == "input_w") cfg.input_w = as_i64();
      else if (key == "stage_channels") {
        cfg.stage_channels.clear();
        std::istringstream vs(value);
        std::string part;
        while (std::getline(vs, part, ','))
          cfg.stage_channels.push_back(int64_t(std::stoll(detail::trim(part))));
      } else if (key == "arb_count") cfg.arb_count = as_i64();
      else if (key == "heads") cfg.heads = as_i64();
      else if (key == "window") cfg.window = as_i64();
      else if (key == "reduction") cfg.reduction = as_i64();
      else if (key == "ffn_hidden") cfg.ffn_hidden = as_i64();
      else if (key == "query_count") cfg.query_count = as_i64();
      else if (key == "class_count") cfg.class_count = as_i64();
      else if (key == "decoder_layers") cfg.decoder_layers = as_i64();
      else if (key == "gdu_sigma") cfg.gdu_sigma = as_f64();
      else if (key == "gdu_tau") cfg.gdu_tau = as_f64();
      else if (key == "lambda_cls") cfg.lambda_cls = as_f64();
      else if (key == "lambda_l1") cfg.lambda_l1 = as_f64();
      else if (key == "lambda_giou") cfg.lambda_giou = as_f64();
      else if (key == "no_object_weight") cfg.no_object_weight = as_f64();
      else if (key == "lr") cfg.lr = as_f64();
      else if (key == "weight_decay") cfg.weight_decay = as_f64();
      else if (key == "total_steps") cfg.total_steps = as_i64();
      else if (key == "batch_size") cfg.batch_size = as_i64();
      else if (key == "seed") cfg.seed = uint64_t(std::stoull(value));
      else if (key == "use_pafc") cfg.use_pafc = as_bool();
      else if (key == "use_saa") cfg.use_saa = as_bool();
      else if (key == "gate_freeze") {
        if (value == "none") cfg.gate_freeze.reset();
        else cfg.gate_freeze = as_f64();
      } else {
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key +
                          "'");
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("config key " + key + ": cannot parse value '" + value + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("config key " + key + ": value out of range '" + value + "'");
    }
  }
  cfg.validate();
  return cfg;
}

// Architecture identity of a config: the fields that determine parameter
// shapes and forward semantics. Schedule knobs (lr, weight decay, step
// horizon, batch size) may differ between a checkpoint and a resuming run.
inline std::string config_arch_text(const ModelConfig& cfg) {
  std::istringstream is(config_to_text(cfg));
  std::ostringstream os;
  std::string line;
  while (std::getline(is, line)) {
    const std::string key = line.substr(0, line.find(' '));
    if (key == "lr" || key == "weight_decay" || key == "total_steps" || key == "batch_size" ||
        key == "seed")
      continue;
    os << line << "\n";
  }
  return os.str();
}

inline ModelConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return config_from_text(buf.str());
}

}  // namespace flowdet
