#include "tslformer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <map>
#include <sstream>

#include "tslformer/error.hpp"

namespace tslformer {

namespace {

std::string trim(std::string_view s) {
  auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw Error(ErrorCode::BadConfig, "bad value for " + key + ": '" + value + "'");
}

template <typename Int>
Int to_int(const std::string& key, const std::string& value) {
  Int out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value);
  return out;
}

double to_real(const std::string& key, const std::string& value) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value);
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  bad_value(key, value);
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"input_dim", [](RunConfig& c, auto& k, auto& v) { c.model.input_dim = to_int<int>(k, v); }},
      {"hidden_dim", [](RunConfig& c, auto& k, auto& v) { c.model.hidden_dim = to_int<int>(k, v); }},
      {"num_heads", [](RunConfig& c, auto& k, auto& v) { c.model.num_heads = to_int<int>(k, v); }},
      {"num_layers", [](RunConfig& c, auto& k, auto& v) { c.model.num_layers = to_int<int>(k, v); }},
      {"ffn_dim", [](RunConfig& c, auto& k, auto& v) { c.model.ffn_dim = to_int<int>(k, v); }},
      {"dropout_p", [](RunConfig& c, auto& k, auto& v) { c.model.dropout_p = to_real(k, v); }},
      {"num_classes", [](RunConfig& c, auto& k, auto& v) { c.model.num_classes = to_int<int>(k, v); }},
      {"max_seq_len", [](RunConfig& c, auto& k, auto& v) { c.model.max_seq_len = to_int<int>(k, v); }},
      {"layer_norm_eps", [](RunConfig& c, auto& k, auto& v) { c.model.layer_norm_eps = to_real(k, v); }},
      {"embedding_dropout", [](RunConfig& c, auto& k, auto& v) { c.model.embedding_dropout = to_bool(k, v); }},
      {"sublayer_dropout", [](RunConfig& c, auto& k, auto& v) { c.model.sublayer_dropout = to_bool(k, v); }},
      {"learning_rate", [](RunConfig& c, auto& k, auto& v) { c.train.learning_rate = to_real(k, v); }},
      {"adam_beta1", [](RunConfig& c, auto& k, auto& v) { c.train.adam_beta1 = to_real(k, v); }},
      {"adam_beta2", [](RunConfig& c, auto& k, auto& v) { c.train.adam_beta2 = to_real(k, v); }},
      {"adam_eps", [](RunConfig& c, auto& k, auto& v) { c.train.adam_eps = to_real(k, v); }},
      {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = to_int<int>(k, v); }},
      {"max_epochs", [](RunConfig& c, auto& k, auto& v) { c.train.max_epochs = to_int<int>(k, v); }},
      {"scheduler_factor", [](RunConfig& c, auto& k, auto& v) { c.train.scheduler.factor = to_real(k, v); }},
      {"scheduler_patience", [](RunConfig& c, auto& k, auto& v) { c.train.scheduler.patience = to_int<int>(k, v); }},
      {"scheduler_threshold", [](RunConfig& c, auto& k, auto& v) { c.train.scheduler.threshold = to_real(k, v); }},
      {"min_lr", [](RunConfig& c, auto& k, auto& v) { c.train.scheduler.min_lr = to_real(k, v); }},
      {"early_stop_patience", [](RunConfig& c, auto& k, auto& v) { c.train.early_stop_patience = to_int<int>(k, v); }},
      {"k_folds", [](RunConfig& c, auto& k, auto& v) { c.train.k_folds = to_int<int>(k, v); }},
      {"test_fraction", [](RunConfig& c, auto& k, auto& v) { c.train.test_fraction = to_real(k, v); }},
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.train.seed = to_int<std::uint64_t>(k, v); }},
      {"sampler", [](RunConfig& c, auto&, auto& v) { c.sampler = FrameSampler::parse(v); }},
      {"keypoints",
       [](RunConfig& c, auto&, auto& v) {
         std::vector<std::string> names;
         std::stringstream s(v);
         std::string item;
         while (std::getline(s, item, ',')) names.push_back(trim(item));
         c.keypoints = LandmarkLayout(names).keypoint_names();
       }},
  };
  return table;
}

}  // namespace

void apply_config(std::istream& in, RunConfig& config) {
  std::string line;
  std::size_t line_no = 0;
  bool input_dim_given = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::string body = trim(line);
    if (body.empty()) continue;
    auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::BadConfig, "config line " + std::to_string(line_no) + " is not key = value");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    auto it = setters().find(key);
    if (it == setters().end()) throw Error(ErrorCode::BadConfig, "unknown config key '" + key + "'");
    it->second(config, key, value);
    input_dim_given = input_dim_given || key == "input_dim";
  }
  if (!input_dim_given) config.model.input_dim = static_cast<int>(config.keypoints.size() * 3);
  if (static_cast<std::size_t>(config.model.input_dim) != config.keypoints.size() * 3) {
    throw Error(ErrorCode::BadConfig, "input_dim " + std::to_string(config.model.input_dim) + " does not match " +
                                          std::to_string(config.keypoints.size()) + " keypoints");
  }
}

void apply_config_file(const std::filesystem::path& path, RunConfig& config) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path.string());
  apply_config(in, config);
}

std::string to_config_text(const RunConfig& c) {
  std::ostringstream s;
  s << std::setprecision(17);
  s << "input_dim = " << c.model.input_dim << '\n'
    << "hidden_dim = " << c.model.hidden_dim << '\n'
    << "num_heads = " << c.model.num_heads << '\n'
    << "num_layers = " << c.model.num_layers << '\n'
    << "ffn_dim = " << c.model.ffn_dim << '\n'
    << "dropout_p = " << c.model.dropout_p << '\n'
    << "num_classes = " << c.model.num_classes << '\n'
    << "max_seq_len = " << c.model.max_seq_len << '\n'
    << "layer_norm_eps = " << c.model.layer_norm_eps << '\n'
    << "embedding_dropout = " << (c.model.embedding_dropout ? 1 : 0) << '\n'
    << "sublayer_dropout = " << (c.model.sublayer_dropout ? 1 : 0) << '\n'
    << "learning_rate = " << c.train.learning_rate << '\n'
    << "adam_beta1 = " << c.train.adam_beta1 << '\n'
    << "adam_beta2 = " << c.train.adam_beta2 << '\n'
    << "adam_eps = " << c.train.adam_eps << '\n'
    << "batch_size = " << c.train.batch_size << '\n'
    << "max_epochs = " << c.train.max_epochs << '\n'
    << "scheduler_factor = " << c.train.scheduler.factor << '\n'
    << "scheduler_patience = " << c.train.scheduler.patience << '\n'
    << "scheduler_threshold = " << c.train.scheduler.threshold << '\n'
    << "min_lr = " << c.train.scheduler.min_lr << '\n'
    << "early_stop_patience = " << c.train.early_stop_patience << '\n'
    << "k_folds = " << c.train.k_folds << '\n'
    << "test_fraction = " << c.train.test_fraction << '\n'
    << "seed = " << c.train.seed << '\n'
    << "sampler = " << c.sampler.to_string() << '\n'
    << "keypoints = ";
  for (std::size_t i = 0; i < c.keypoints.size(); ++i) s << (i ? "," : "") << c.keypoints[i];
  s << '\n';
  return s.str();
}

}  // namespace tslformer
