#pragma once

// Self-describing checkpoint container: format tag, version, full model config
// (all dimensions and the training scene list) and every parameter array.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sceneiqa/core.hpp"
#include "sceneiqa/error.hpp"
#include "sceneiqa/models.hpp"

namespace sceneiqa::checkpoint {

inline constexpr const char* kFormatTag = "sceneiqa-checkpoint";
inline constexpr int kFormatVersion = 1;

inline nlohmann::json config_to_json(const models::ModelConfig& c) {
  return {
      {"kind", models::to_string(c.kind)},
      {"input_dim", c.input_dim},
      {"backbone_hidden", c.backbone_hidden},
      {"semantic_dim", c.semantic_dim},
      {"content_dim", c.content_dim},
      {"target_hidden", c.target_hidden},
      {"hyper_hidden", c.hyper_hidden},
      {"classifier_hidden", c.classifier_hidden},
      {"levels", c.levels},
      {"tokens", c.tokens},
      {"token_dim", c.token_dim},
      {"attention_dim", c.attention_dim},
      {"mal_count", c.mal_count},
      {"head_hidden", c.head_hidden},
      {"embed_dim", c.embed_dim},
      {"gate_hidden", c.gate_hidden},
      {"scenes", c.scenes},
      {"seed", c.seed},
  };
}

inline models::ModelConfig config_from_json(const nlohmann::json& j) {
  models::ModelConfig c;
  c.kind = models::parse_model_kind(j.at("kind").get<std::string>());
  c.input_dim = j.at("input_dim").get<int>();
  c.backbone_hidden = j.at("backbone_hidden").get<int>();
  c.semantic_dim = j.at("semantic_dim").get<int>();
  c.content_dim = j.at("content_dim").get<int>();
  c.target_hidden = j.at("target_hidden").get<std::array<int, 3>>();
  c.hyper_hidden = j.at("hyper_hidden").get<int>();
  c.classifier_hidden = j.at("classifier_hidden").get<int>();
  c.levels = j.at("levels").get<int>();
  c.tokens = j.at("tokens").get<int>();
  c.token_dim = j.at("token_dim").get<int>();
  c.attention_dim = j.at("attention_dim").get<int>();
  c.mal_count = j.at("mal_count").get<int>();
  c.head_hidden = j.at("head_hidden").get<std::array<int, 2>>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.gate_hidden = j.at("gate_hidden").get<std::array<int, 2>>();
  c.scenes = j.at("scenes").get<std::vector<std::string>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

struct Checkpoint {
  models::Model model;
  nlohmann::json meta = nlohmann::json::object();  // training provenance (loss, epoch, ...)
};

inline void write(std::ostream& out, const Checkpoint& ckpt) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : ckpt.model.params().entries()) {
    params.push_back({{"name", e.name},
                      {"group", e.group},
                      {"rows", e.value.rows()},
                      {"cols", e.value.cols()},
                      {"data", std::vector<double>(e.value.data(), e.value.data() + e.value.size())}});
  }
  const nlohmann::json j = {{"format", kFormatTag},
                            {"version", kFormatVersion},
                            {"config", config_to_json(ckpt.model.config())},
                            {"meta", ckpt.meta},
                            {"params", params}};
  out << j.dump(1) << '\n';
}

inline void save(const std::string& path, const Checkpoint& ckpt) {
  std::ostringstream buffer;
  write(buffer, ckpt);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << buffer.str();
}

inline Checkpoint read(std::istream& in, const std::string& origin = "<stream>") {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", std::string()) != kFormatTag) {
    throw VersionError(origin + ": not a sceneiqa checkpoint");
  }
  const int version = j.value("version", -1);
  if (version != kFormatVersion) {
    throw VersionError(origin + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kFormatVersion) + ")");
  }
  try {
    auto config = config_from_json(j.at("config"));
    // Rebuild the layout from the config, then overwrite every array; this
    // rejects checkpoints whose arrays do not match the declared dimensions.
    models::ParamStore store = models::layout::build(config);
    std::size_t loaded = 0;
    for (const auto& p : j.at("params")) {
      const auto name = p.at("name").get<std::string>();
      auto& target = store.get(name);
      const auto rows = p.at("rows").get<Eigen::Index>();
      const auto cols = p.at("cols").get<Eigen::Index>();
      const auto data = p.at("data").get<std::vector<double>>();
      if (rows != target.rows() || cols != target.cols() || static_cast<Eigen::Index>(data.size()) != rows * cols) {
        throw ParseError(origin + ": parameter " + name + " has the wrong shape");
      }
      target = Eigen::Map<const models::Matrix>(data.data(), rows, cols);
      ++loaded;
    }
    if (loaded != store.entries().size()) throw ParseError(origin + ": checkpoint is missing parameters");
    Checkpoint ckpt{models::Model(std::move(config), std::move(store)), j.value("meta", nlohmann::json::object())};
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline Checkpoint load(const std::string& path) {
  auto in = detail::open_input(path);
  return read(in, path);
}

}  // namespace sceneiqa::checkpoint
