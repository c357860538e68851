#pragma once

// Single-file checkpoint: magic, config JSON, named little-endian tensors, SHA-256 trailer over all
// preceding bytes.

#include <string>
#include <vector>

#include "chronoscope/core/binio.hpp"
#include "chronoscope/core/hash.hpp"
#include "chronoscope/core/io.hpp"
#include "chronoscope/encoder/params.hpp"

namespace chronoscope::enc {

inline constexpr std::string_view kCheckpointMagic = "CHRSCKP1";

struct NamedTensor {
  std::string name;
  Mat value;
};

// Generic tensor container; `meta` is free-form JSON stored alongside.
inline std::string write_tensor_container(const json& meta, const std::vector<NamedTensor>& tensors, bool f32 = false) {
  binio::Writer w;
  w.put_raw(kCheckpointMagic);
  w.put_string(meta.dump());
  w.put<std::uint64_t>(tensors.size());
  for (const auto& t : tensors) {
    w.put_string(t.name);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.value.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.value.cols()));
    w.put<std::uint8_t>(f32 ? 4 : 8);
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      if (f32) {
        w.put(static_cast<float>(t.value.data()[i]));
      } else {
        w.put(t.value.data()[i]);
      }
    }
  }
  auto bytes = std::move(w).take();
  const auto digest = sha256({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
  bytes.append(reinterpret_cast<const char*>(digest.data()), digest.size());
  return bytes;
}

inline std::pair<json, std::vector<NamedTensor>> read_tensor_container(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 32 || !bytes.starts_with(kCheckpointMagic)) {
    fail(ErrorKind::Io, "not a checkpoint container");
  }
  const auto body = bytes.substr(0, bytes.size() - 32);
  const auto digest = sha256({reinterpret_cast<const unsigned char*>(body.data()), body.size()});
  if (std::string_view(reinterpret_cast<const char*>(digest.data()), 32) != bytes.substr(bytes.size() - 32)) {
    fail(ErrorKind::Io, "checkpoint content hash mismatch");
  }
  binio::Reader r(body);
  r.get_raw(kCheckpointMagic.size());
  json meta = json::parse(r.get_string());
  const auto n = r.get<std::uint64_t>();
  std::vector<NamedTensor> tensors;
  for (std::uint64_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name = r.get_string();
    const auto rows = static_cast<Eigen::Index>(r.get<std::uint64_t>());
    const auto cols = static_cast<Eigen::Index>(r.get<std::uint64_t>());
    const auto width = r.get<std::uint8_t>();
    if (width != 4 && width != 8) fail(ErrorKind::Io, "unsupported tensor element width");
    t.value.resize(rows, cols);
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = width == 4 ? r.get<float>() : r.get<double>();
    tensors.push_back(std::move(t));
  }
  if (!r.at_end()) fail(ErrorKind::Io, "trailing bytes in checkpoint");
  return {std::move(meta), std::move(tensors)};
}

struct Checkpoint {
  EncoderConfig cfg;
  Params params;
  Vocabulary vocab;
  json extra = json::object();  // training summary, tokenizer specs, ...
};

inline std::string serialize_checkpoint(Checkpoint& ck) {
  json meta = {{"kind", "encoder"}, {"config", to_json(ck.cfg)}, {"vocabulary", to_json(ck.vocab)}, {"extra", ck.extra}};
  std::vector<NamedTensor> tensors;
  for (auto& t : ck.params.tensors()) tensors.push_back({t.name, *t.value});
  return write_tensor_container(meta, tensors);
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  auto [meta, tensors] = read_tensor_container(bytes);
  require(meta.value("kind", std::string()) == "encoder", "container is not an encoder checkpoint");
  Checkpoint ck;
  ck.cfg = encoder_config_from_json(meta.at("config"));
  ck.vocab = vocabulary_from_json(meta.at("vocabulary"));
  ck.extra = meta.value("extra", json::object());
  ck.params = init_params(ck.cfg, ck.vocab.size());
  auto refs = ck.params.tensors();
  if (refs.size() != tensors.size()) fail(ErrorKind::Io, "checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].name != tensors[i].name || refs[i].value->rows() != tensors[i].value.rows() ||
        refs[i].value->cols() != tensors[i].value.cols()) {
      fail(ErrorKind::Io, "checkpoint tensor '" + tensors[i].name + "' does not match the configured shape");
    }
    *refs[i].value = std::move(tensors[i].value);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, Checkpoint& ck) { write_file(path, serialize_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace chronoscope::enc
