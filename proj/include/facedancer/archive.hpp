// SPDX-License-Identifier: Apache-2.0
//
// Portable tensor archive used for checkpoints and pretrained weights.
//
// Layout (all integers little-endian):
//   4 bytes   magic "FDTA"
//   u32       format version (1)
//   u64       header length in bytes
//   header    UTF-8 JSON: {"meta": {...},
//                          "tensors": [{"name", "dtype": "f32"|"f64",
//                                       "shape": [...], "offset", "nbytes"}]}
//   payload   raw tensor data, offsets relative to the payload start
//   u32       CRC-32 of every preceding byte
#pragma once

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>

#include "json.hpp"
#include "facedancer/tensor.hpp"

namespace facedancer {

inline constexpr std::uint32_t kArchiveVersion = 1;

class TensorArchive {
 public:
  using Entry = std::variant<Tensor<float>, Tensor<double>>;

  nlohmann::json meta = nlohmann::json::object();

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    tensors_[name] = t;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw IndexOutOfRange("archive has no tensor named " + name);
    return std::visit(
        [](const auto& t) -> Tensor<T> {
          if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Tensor<T>>) return t;
          else return t.template cast<T>();
        },
        it->second);
  }

  Shape shape_of(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw IndexOutOfRange("archive has no tensor named " + name);
    return std::visit([](const auto& t) { return t.shape(); }, it->second);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors_) out.push_back(k);
    return out;
  }

  std::string serialize() const {
    nlohmann::json index = nlohmann::json::array();
    std::string payload;
    for (const auto& [name, entry] : tensors_) {
      std::visit(
          [&](const auto& t) {
            using E = typename std::decay_t<decltype(t)>::value_type;
            const std::size_t nbytes = static_cast<std::size_t>(t.size()) * sizeof(E);
            index.push_back({{"name", name},
                             {"dtype", std::is_same_v<E, float> ? "f32" : "f64"},
                             {"shape", t.shape()},
                             {"offset", payload.size()},
                             {"nbytes", nbytes}});
            payload.append(reinterpret_cast<const char*>(t.data()), nbytes);
          },
          entry);
    }
    const std::string header = nlohmann::json{{"meta", meta}, {"tensors", index}}.dump();
    std::string out = "FDTA";
    append_pod(out, kArchiveVersion);
    append_pod(out, static_cast<std::uint64_t>(header.size()));
    out += header;
    out += payload;
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
    append_pod(out, crc);
    return out;
  }

  static TensorArchive deserialize(const std::string& bytes) {
    auto corrupt = [](const std::string& why) { return CheckpointCorrupt("archive " + why); };
    if (bytes.size() < 4 + 4 + 8 + 4 || bytes.compare(0, 4, "FDTA") != 0)
      throw corrupt("has a bad magic number");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body, 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
    if (crc != stored_crc) throw corrupt("failed its checksum");
    std::uint32_t version;
    std::uint64_t header_len;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (version != kArchiveVersion) throw corrupt("version " + std::to_string(version));
    const std::size_t payload_start = 16 + header_len;
    if (payload_start > body) throw corrupt("header overruns the file");
    TensorArchive ar;
    try {
      const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
      ar.meta = header.at("meta");
      for (const auto& e : header.at("tensors")) {
        const Shape shape = e.at("shape").get<Shape>();
        const std::size_t offset = e.at("offset"), nbytes = e.at("nbytes");
        const std::string dtype = e.at("dtype");
        if (payload_start + offset + nbytes > body) throw corrupt("tensor overruns payload");
        const char* src = bytes.data() + payload_start + offset;
        auto load = [&](auto tag) {
          using E = decltype(tag);
          if (nbytes != static_cast<std::size_t>(numel(shape)) * sizeof(E))
            throw corrupt("tensor size mismatch for " + e.at("name").get<std::string>());
          std::vector<E> data(static_cast<std::size_t>(numel(shape)));
          std::memcpy(data.data(), src, nbytes);
          ar.tensors_[e.at("name")] = Tensor<E>(shape, std::move(data));
        };
        if (dtype == "f32") load(float{});
        else if (dtype == "f64") load(double{});
        else throw corrupt("unknown dtype " + dtype);
      }
    } catch (const nlohmann::json::exception& ex) {
      throw corrupt(std::string("header is malformed: ") + ex.what());
    }
    return ar;
  }

  // Atomic: writes a sibling temporary file and renames it into place.
  void save(const std::filesystem::path& path) const {
    const std::string bytes = serialize();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw ImageIOError("cannot write " + tmp.string());
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw ImageIOError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static TensorArchive load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FileNotFound("no such archive: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  template <typename P>
  static void append_pod(std::string& out, P v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(P));
  }

  std::map<std::string, Entry> tensors_;
};

}  // namespace facedancer
