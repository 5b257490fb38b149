#include "cram/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "cram/errors.hpp"
#include "json.hpp"

namespace cram {
namespace {

constexpr std::array<char, 8> kMagic = {'C', 'R', 'A', 'M', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("checkpoint '" + path + "' is truncated");
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  const ModelConfig& c = model.config();
  const nlohmann::ordered_json header = {
      {"n_layers", c.n_layers}, {"n_heads", c.n_heads},         {"d_model", c.d_model},
      {"d_k", c.d_k},           {"d_v", c.d_v},                 {"d_ff", c.d_ff},
      {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"seed", c.seed},
      {"n_params", model.params().size()}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint '" + path + "' for writing");
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::span<const double> p = model.params();
  out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size_bytes()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("'" + path + "' is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint '" + path + "' has format version " + std::to_string(version) +
                  ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const auto header_len = get<std::uint64_t>(in, path);
  if (header_len > (1u << 20)) throw IoError("checkpoint '" + path + "' has a corrupt header");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw IoError("checkpoint '" + path + "' is truncated");
  }
  ModelConfig c;
  std::size_t n_params = 0;
  try {
    const auto h = nlohmann::json::parse(text);
    c.n_layers = h.at("n_layers");
    c.n_heads = h.at("n_heads");
    c.d_model = h.at("d_model");
    c.d_k = h.at("d_k");
    c.d_v = h.at("d_v");
    c.d_ff = h.at("d_ff");
    c.vocab_size = h.at("vocab_size");
    c.max_seq_len = h.at("max_seq_len");
    c.seed = h.at("seed");
    n_params = h.at("n_params");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + path + "' header: " + e.what());
  }
  std::vector<double> params(n_params);
  if (!in.read(reinterpret_cast<char*>(params.data()),
               static_cast<std::streamsize>(params.size() * sizeof(double)))) {
    throw IoError("checkpoint '" + path + "' is truncated");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint '" + path + "' has trailing bytes");
  return Model(c, std::move(params));
}

}  // namespace cram
