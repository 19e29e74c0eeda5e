#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uamix/error.hpp"
#include "uamix/matrix.hpp"

namespace uamix {

/// Log-mel filterbank: rows are frames (T), columns are mel bins (F).
using Fbank = Matrix<float>;

struct Dataset {
  std::size_t t_len = 0;
  std::size_t f_len = 0;
  std::vector<Fbank> items;
  /// Per-item class ids; only the evaluation harness reads these.
  std::optional<std::vector<int>> labels;

  std::size_t size() const noexcept { return items.size(); }

  std::size_t num_classes() const {
    if (!labels || labels->empty()) return 0;
    return static_cast<std::size_t>(*std::max_element(labels->begin(), labels->end())) + 1;
  }
};

inline void validate(const Dataset& ds) {
  require(ds.t_len >= 1 && ds.f_len >= 1, ErrorKind::Shape, "dataset dimensions must be positive");
  for (const auto& item : ds.items) {
    require(item.rows() == ds.t_len && item.cols() == ds.f_len, ErrorKind::Shape,
            "all items in a dataset must share (T, F)");
    for (float v : item.storage()) require(std::isfinite(v), ErrorKind::Input, "non-finite fbank value");
  }
  if (ds.labels) {
    require(ds.labels->size() == ds.items.size(), ErrorKind::Input, "labels length differs from item count");
    std::set<int> seen(ds.labels->begin(), ds.labels->end());
    if (!seen.empty()) {
      require(*seen.begin() == 0 && *seen.rbegin() == static_cast<int>(seen.size()) - 1, ErrorKind::Input,
              "class ids must be contiguous from 0");
    }
  }
}

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

inline void write_f32_le(std::ostream& out, std::span<const float> values) {
  std::vector<std::uint32_t> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    buf[i] = to_little_endian(std::bit_cast<std::uint32_t>(values[i]));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
}

inline void read_f32_le(std::istream& in, std::span<float> values) {
  std::vector<std::uint32_t> buf(values.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  require(static_cast<std::size_t>(in.gcount()) == buf.size() * 4, ErrorKind::Corruption, "short read");
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = std::bit_cast<float>(to_little_endian(buf[i]));
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".f32");
  return p;
}

/// Parses `text`; syntax errors are reported as `<source>:<line>:<column>`.
inline nlohmann::json parse_json(const std::string& text, const std::string& source, ErrorKind kind) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    fail(kind, source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": malformed JSON (" + e.what() + ")");
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json_file(const std::filesystem::path& path, ErrorKind kind = ErrorKind::Format) {
  return parse_json(read_text_file(path), path.string(), kind);
}

}  // namespace detail

/// Writes `<path>` (JSON manifest) and a sibling `.f32` blob holding every
/// value as little-endian float32 in item, time, frequency order.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  validate(ds);
  const auto blob = detail::blob_path_for(path);
  nlohmann::json manifest = {
      {"format", "uamix-dataset"},
      {"version", 1},
      {"n", ds.size()},
      {"t_len", ds.t_len},
      {"f_len", ds.f_len},
      {"dtype", "float32"},
      {"blob", blob.filename().string()},
  };
  manifest["labels"] = ds.labels ? nlohmann::json(*ds.labels) : nlohmann::json(nullptr);

  std::ofstream bout(blob, std::ios::binary | std::ios::trunc);
  require(bool(bout), ErrorKind::Io, "cannot write " + blob.string());
  for (const auto& item : ds.items) detail::write_f32_le(bout, item.storage());
  bout.close();
  require(!bout.fail(), ErrorKind::Io, "write failed: " + blob.string());

  std::ofstream mout(path, std::ios::trunc);
  require(bool(mout), ErrorKind::Io, "cannot write " + path.string());
  mout << manifest.dump(2) << '\n';
  mout.close();
  require(!mout.fail(), ErrorKind::Io, "write failed: " + path.string());
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto manifest = detail::read_json_file(path);
  Dataset ds;
  std::size_t n = 0;
  std::filesystem::path blob;
  try {
    if (manifest.at("dtype").get<std::string>() != "float32")
      fail(ErrorKind::Format, "unknown dtype '" + manifest.at("dtype").get<std::string>() + "'");
    n = manifest.at("n").get<std::size_t>();
    ds.t_len = manifest.at("t_len").get<std::size_t>();
    ds.f_len = manifest.at("f_len").get<std::size_t>();
    blob = path.parent_path() / manifest.at("blob").get<std::string>();
    if (manifest.contains("labels") && !manifest.at("labels").is_null())
      ds.labels = manifest.at("labels").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }

  std::error_code ec;
  const auto bytes = std::filesystem::file_size(blob, ec);
  require(!ec, ErrorKind::Io, "cannot stat " + blob.string());
  require(bytes == n * ds.t_len * ds.f_len * sizeof(float), ErrorKind::Corruption,
          "blob size " + std::to_string(bytes) + " does not match manifest n=" + std::to_string(n));
  require(!ds.labels || ds.labels->size() == n, ErrorKind::Corruption, "labels length does not match n");

  std::ifstream in(blob, std::ios::binary);
  require(bool(in), ErrorKind::Io, "cannot open " + blob.string());
  ds.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Fbank item(ds.t_len, ds.f_len);
    detail::read_f32_le(in, item.storage());
    ds.items.push_back(std::move(item));
  }
  validate(ds);
  return ds;
}

}  // namespace uamix
