// Parameter files: 8-byte magic, little-endian u64 header length, JSON
// header (tensor table, config, seed), then the raw little-endian doubles of
// every tensor in table order. Round trips are bit-exact.
#pragma once

#include "sft/layer.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sft {

inline constexpr char kParamMagic[8] = {'S', 'F', 'T', 'P', 'A', 'R', '0', '1'};

inline nlohmann::json to_json(const LayerConfig& c) {
  return {
      {"d", c.d},
      {"h", c.h},
      {"k", c.k == LayerConfig::kAll ? nlohmann::json("all") : nlohmann::json(c.k)},
      {"ln", to_string(c.ln)},
      {"drop_attn", c.drop_attn},
      {"drop_token", c.drop_token},
      {"drop_ffn", c.drop_ffn},
      {"mode", to_string(c.mode)},
      {"rpe_dim", c.rpe_dim},
      {"ffn_act", to_string(c.ffn_act)},
      {"sampler_rpe_context", c.sampler_rpe_context},
      {"tau", c.tau},
      {"noisy_topk", c.noisy_topk},
      {"epsilon", c.epsilon},
      {"ln_eps", c.ln_eps},
      {"eval_seed", c.eval_seed},
  };
}

inline LayerConfig layer_config_from_json(const nlohmann::json& j) {
  LayerConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.h = j.at("h").get<std::size_t>();
  c.k = j.at("k").is_string() ? LayerConfig::kAll : j.at("k").get<std::size_t>();
  c.ln = parse_ln_position(j.at("ln").get<std::string>());
  c.drop_attn = j.at("drop_attn").get<double>();
  c.drop_token = j.at("drop_token").get<double>();
  c.drop_ffn = j.at("drop_ffn").get<double>();
  c.mode = parse_attn_mode(j.at("mode").get<std::string>());
  c.rpe_dim = j.at("rpe_dim").get<std::size_t>();
  c.ffn_act = parse_ffn_activation(j.at("ffn_act").get<std::string>());
  c.sampler_rpe_context = j.at("sampler_rpe_context").get<bool>();
  c.tau = j.at("tau").get<double>();
  c.noisy_topk = j.at("noisy_topk").get<bool>();
  c.epsilon = j.at("epsilon").get<double>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.eval_seed = j.at("eval_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("parameter file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Writes any params struct exposing for_each(name, Matrix&).
template <class Params>
void save_params(std::ostream& out, const Params& p, const nlohmann::json& config, std::uint64_t seed) {
  nlohmann::json header;
  header["format"] = "sft-params";
  header["config"] = config;
  header["seed"] = seed;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  p.for_each([&](const std::string& name, const Matrix& m) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += m.size();
  });
  const std::string text = header.dump();
  out.write(kParamMagic, sizeof kParamMagic);
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  p.for_each([&](const std::string&, const Matrix& m) {
    for (double v : m.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_u64(out, bits);
    }
  });
  if (!out) throw std::runtime_error("failed to write parameter file");
}

struct ParamHeader {
  nlohmann::json config;
  std::uint64_t seed = 0;
};

/// Reads into p, which must already have the stored shapes and names.
template <class Params>
ParamHeader load_params(std::istream& in, Params& p) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kParamMagic, sizeof magic) != 0) throw std::runtime_error("not a parameter file");
  const std::uint64_t len = detail::get_u64(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("parameter file truncated");
  const auto header = nlohmann::json::parse(text);
  const auto& tensors = header.at("tensors");
  std::size_t idx = 0;
  p.for_each([&](const std::string& name, Matrix& m) {
    if (idx >= tensors.size()) throw std::runtime_error("parameter file has too few tensors");
    const auto& t = tensors[idx++];
    if (t.at("name").get<std::string>() != name || t.at("rows").get<std::size_t>() != m.rows() ||
        t.at("cols").get<std::size_t>() != m.cols())
      throw std::runtime_error("parameter file layout mismatch at tensor " + name);
    for (double& v : m.data()) {
      const std::uint64_t bits = detail::get_u64(in);
      std::memcpy(&v, &bits, sizeof v);
    }
  });
  if (idx != tensors.size()) throw std::runtime_error("parameter file has extra tensors");
  return {header.at("config"), header.at("seed").get<std::uint64_t>()};
}

inline void save_layer(const std::string& path, const LayerParams& p, const LayerConfig& cfg, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  save_params(out, p, to_json(cfg), seed);
}

struct LoadedLayer {
  LayerParams params;
  LayerConfig cfg;
  std::uint64_t seed = 0;
};

inline LoadedLayer load_layer(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  // Peek the header for the config, then read tensors into a matching shell.
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kParamMagic, sizeof magic) != 0) throw std::runtime_error("not a parameter file");
  const std::uint64_t len = detail::get_u64(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto cfg = layer_config_from_json(nlohmann::json::parse(text).at("config"));
  in.seekg(0);
  LoadedLayer res{LayerParams::zeros(cfg), cfg, 0};
  res.seed = load_params(in, res.params).seed;
  return res;
}

}  // namespace sft
