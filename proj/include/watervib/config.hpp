#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "watervib/noise.hpp"

namespace watervib {

// Experiment configuration: a sectioned key=value document. '#' starts a
// comment; lists are comma-separated. Unknown sections or keys are rejected
// with the offending line number, before any run starts.
//
//   [run]     name, seed, out_dir
//   [model]   image_size, message_bits, latent_dim
//   [vib]     alpha, beta, logvar_clip, enabled
//   [train]   epochs, batch_size, learning_rate, lambda_img, lambda_rec,
//             covers, val_fraction, val_subset
//   [attacks] train_pool, eval
//   [sweep]   betas            (optional; enables the sweep-beta subcommand)

struct ExperimentConfig {
  std::string name = "run";
  std::uint64_t seed = 1;
  std::string out_dir;  // defaults to runs/<name>

  int image_size = 32;
  int message_bits = 16;
  int latent_dim = 32;

  double alpha = 0.007;
  double beta = 1.5e-4;
  double logvar_clip = 10.0;
  bool vib_enabled = true;

  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double lambda_img = 1.0;
  double lambda_rec = 1.0;
  int covers = 2000;
  double val_fraction = 0.2;
  int val_subset = 64;

  std::vector<DistortionSpec> train_pool;  // defaults to the Table-8 pool + purify
  std::vector<DistortionSpec> eval_attacks;

  std::vector<double> beta_sweep;  // empty unless [sweep] betas given

  std::string raw_text;  // the parsed document, echoed into report.json
};

namespace detail {

inline std::string strip(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  int depth = 0;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == ',' && depth == 0) {
      out.push_back(strip(item));
      item.clear();
    } else {
      item += c;
    }
  }
  if (!strip(item).empty()) out.push_back(strip(item));
  return out;
}

[[noreturn]] inline void cfg_fail(int line, const std::string& why) {
  throw std::invalid_argument("config line " + std::to_string(line) + ": " + why);
}

inline double cfg_num(const std::string& v, int line) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) cfg_fail(line, "trailing characters in number '" + v + "'");
    return x;
  } catch (const std::invalid_argument&) {
    cfg_fail(line, "expected a number, got '" + v + "'");
  } catch (const std::out_of_range&) {
    cfg_fail(line, "number out of range: '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& v, int line) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  cfg_fail(line, "expected a boolean, got '" + v + "'");
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  c.raw_text = text;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  bool pool_set = false, eval_set = false;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::strip(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') detail::cfg_fail(lineno, "unterminated section header");
      section = line.substr(1, line.size() - 2);
      if (section != "run" && section != "model" && section != "vib" && section != "train" &&
          section != "attacks" && section != "sweep")
        detail::cfg_fail(lineno, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) detail::cfg_fail(lineno, "expected key = value");
    const std::string key = detail::strip(line.substr(0, eq));
    const std::string val = detail::strip(line.substr(eq + 1));
    if (section.empty()) detail::cfg_fail(lineno, "key outside any [section]");

    auto unknown = [&]() { detail::cfg_fail(lineno, "unknown key '" + key + "' in [" + section + "]"); };
    if (section == "run") {
      if (key == "name") c.name = val;
      else if (key == "seed") c.seed = static_cast<std::uint64_t>(detail::cfg_num(val, lineno));
      else if (key == "out_dir") c.out_dir = val;
      else unknown();
    } else if (section == "model") {
      if (key == "image_size") c.image_size = static_cast<int>(detail::cfg_num(val, lineno));
      else if (key == "message_bits") c.message_bits = static_cast<int>(detail::cfg_num(val, lineno));
      else if (key == "latent_dim") c.latent_dim = static_cast<int>(detail::cfg_num(val, lineno));
      else unknown();
    } else if (section == "vib") {
      if (key == "alpha") c.alpha = detail::cfg_num(val, lineno);
      else if (key == "beta") c.beta = detail::cfg_num(val, lineno);
      else if (key == "logvar_clip") c.logvar_clip = detail::cfg_num(val, lineno);
      else if (key == "enabled") c.vib_enabled = detail::cfg_bool(val, lineno);
      else unknown();
    } else if (section == "train") {
      if (key == "epochs") c.epochs = static_cast<int>(detail::cfg_num(val, lineno));
      else if (key == "batch_size") c.batch_size = static_cast<int>(detail::cfg_num(val, lineno));
      else if (key == "learning_rate") c.learning_rate = detail::cfg_num(val, lineno);
      else if (key == "lambda_img") c.lambda_img = detail::cfg_num(val, lineno);
      else if (key == "lambda_rec") c.lambda_rec = detail::cfg_num(val, lineno);
      else if (key == "covers") c.covers = static_cast<int>(detail::cfg_num(val, lineno));
      else if (key == "val_fraction") c.val_fraction = detail::cfg_num(val, lineno);
      else if (key == "val_subset") c.val_subset = static_cast<int>(detail::cfg_num(val, lineno));
      else unknown();
    } else if (section == "attacks") {
      try {
        if (key == "train_pool") {
          c.train_pool.clear();
          for (const auto& s : detail::split_list(val)) c.train_pool.push_back(parse_distortion(s));
          pool_set = true;
        } else if (key == "eval") {
          c.eval_attacks.clear();
          for (const auto& s : detail::split_list(val)) c.eval_attacks.push_back(parse_distortion(s));
          eval_set = true;
        } else {
          unknown();
        }
      } catch (const std::invalid_argument& e) {
        detail::cfg_fail(lineno, e.what());
      }
    } else if (section == "sweep") {
      if (key == "betas") {
        c.beta_sweep.clear();
        for (const auto& s : detail::split_list(val)) c.beta_sweep.push_back(detail::cfg_num(s, lineno));
      } else {
        unknown();
      }
    }
  }
  if (!pool_set) {
    c.train_pool = default_train_pool();
    c.train_pool.push_back(DistortionSpec::purify_spec(0.3, 0.02));
  }
  if (!eval_set) c.eval_attacks = c.train_pool;
  if (c.out_dir.empty()) c.out_dir = "runs/" + c.name;

  // schema validation before any run starts
  if (c.image_size < 8 || c.image_size % 8)
    throw std::invalid_argument("config: image_size must be a positive multiple of 8");
  if (c.message_bits < 1) throw std::invalid_argument("config: message_bits must be positive");
  if (c.latent_dim < 1) throw std::invalid_argument("config: latent_dim must be positive");
  if (c.epochs < 1 || c.batch_size < 1 || c.covers < 2)
    throw std::invalid_argument("config: positive train counts required");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0))
    throw std::invalid_argument("config: val_fraction must be in (0,1)");
  if (!(c.alpha >= 0.0) || !(c.beta >= 0.0))
    throw std::invalid_argument("config: alpha and beta must be nonnegative");
  for (double b : c.beta_sweep)
    if (!(b >= 0.0)) throw std::invalid_argument("config: sweep betas must be nonnegative");
  if (c.eval_attacks.empty()) throw std::invalid_argument("config: empty eval attack list");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config(os.str());
}

}  // namespace watervib
