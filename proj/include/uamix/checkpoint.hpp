#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "uamix/dataset.hpp"
#include "uamix/encoder.hpp"
#include "uamix/error.hpp"

namespace uamix {

/// Rejects keys of `j` not in `allowed`.
inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
  require(j.is_object(), ErrorKind::Config, where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    require(allowed.count(key) > 0, ErrorKind::Config, "unknown key '" + key + "' in " + where);
}

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"t_len", c.t_len},     {"f_len", c.f_len}, {"patch_t", c.patch_t}, {"patch_f", c.patch_f},
          {"depth", c.depth},     {"dim", c.dim},     {"heads", c.heads},     {"mlp_dim", c.mlp_dim},
          {"head_dims", c.head_dims}};
}

/// Missing keys keep the values already in `c`.
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  reject_unknown_keys(j, {"t_len", "f_len", "patch_t", "patch_f", "depth", "dim", "heads", "mlp_dim", "head_dims"},
                      "encoder config");
  try {
    if (j.contains("t_len")) c.t_len = j.at("t_len").get<std::size_t>();
    if (j.contains("f_len")) c.f_len = j.at("f_len").get<std::size_t>();
    if (j.contains("patch_t")) c.patch_t = j.at("patch_t").get<std::size_t>();
    if (j.contains("patch_f")) c.patch_f = j.at("patch_f").get<std::size_t>();
    if (j.contains("depth")) c.depth = j.at("depth").get<std::size_t>();
    if (j.contains("dim")) c.dim = j.at("dim").get<std::size_t>();
    if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
    if (j.contains("mlp_dim")) c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
    if (j.contains("head_dims")) c.head_dims = j.at("head_dims").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("encoder config: ") + e.what());
  }
}

inline constexpr char kCheckpointMagic[8] = {'U', 'A', 'M', 'X', 'C', 'K', 'P', '1'};

/// Layout: 8-byte magic, u64 little-endian header length, JSON header, then
/// every tensor as little-endian float32 in header order.
template <class S>
void save_checkpoint(const EncoderState<S>& st, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "uamix-checkpoint";
  header["version"] = 1;
  header["config"] = to_json(st.config);
  header["stage"] = to_string(st.stage);
  header["step"] = st.step;
  header["dtype"] = "float32";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& t : tensors(st.params))
    list.push_back({{"name", t.name}, {"group", t.group.name()}, {"shape", {t.tensor->rows(), t.tensor->cols()}}});
  header["tensors"] = list;
  nlohmann::json trainable = nlohmann::json::array();
  for (const auto& t : tensors(st.params))
    if (st.is_trainable(t.group) && (trainable.empty() || trainable.back() != t.group.name()))
      trainable.push_back(t.group.name());
  header["trainable"] = trainable;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  std::uint64_t len = text.size();
  unsigned char len_le[8];
  for (int i = 0; i < 8; ++i) len_le[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(len_le), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors(st.params)) {
    const auto f = t.tensor->template cast<float>();
    detail::write_f32_le(out, f.storage());
  }
  out.close();
  require(!out.fail(), ErrorKind::Io, "write failed: " + path.string());
}

template <class S>
EncoderState<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::Io, "cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::memcmp(magic, kCheckpointMagic, 8) == 0, ErrorKind::Format,
          path.string() + " is not a checkpoint");
  unsigned char len_le[8];
  in.read(reinterpret_cast<char*>(len_le), 8);
  require(in.gcount() == 8, ErrorKind::Corruption, "truncated checkpoint header");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(len_le[i]) << (8 * i);
  require(len < (1u << 30), ErrorKind::Corruption, "implausible checkpoint header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(static_cast<std::uint64_t>(in.gcount()) == len, ErrorKind::Corruption, "truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, std::string("checkpoint header: ") + e.what());
  }
  EncoderState<S> st;
  std::vector<std::string> trainable;
  try {
    require(header.at("dtype").get<std::string>() == "float32", ErrorKind::Format, "unknown checkpoint dtype");
    from_json(header.at("config"), st.config);
    st.stage = parse_stage(header.at("stage").get<std::string>());
    st.step = header.at("step").get<std::uint64_t>();
    trainable = header.at("trainable").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("checkpoint header: ") + e.what());
  }
  validate(st.config);
  st.params = zero_params<S>(st.config);
  auto refs = tensors(st.params);
  const auto& list = header.at("tensors");
  require(list.size() == refs.size(), ErrorKind::Format, "checkpoint tensor list does not match its config");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto shape = list[i].at("shape").get<std::vector<std::size_t>>();
    require(list[i].at("name").get<std::string>() == refs[i].name && shape.size() == 2 &&
                shape[0] == refs[i].tensor->rows() && shape[1] == refs[i].tensor->cols(),
            ErrorKind::Format, "checkpoint tensor '" + refs[i].name + "' has unexpected name or shape");
    Matrix<float> buf(shape[0], shape[1]);
    detail::read_f32_le(in, buf.storage());
    *refs[i].tensor = buf.template cast<S>();
  }
  in.peek();
  require(in.eof(), ErrorKind::Corruption, "trailing bytes after checkpoint tensors");
  st.trainable.assign(st.n_groups(), false);
  for (const auto& r : refs)
    for (const auto& name : trainable)
      if (r.group.name() == name) st.trainable[st.group_slot(r.group)] = true;
  return st;
}

}  // namespace uamix
