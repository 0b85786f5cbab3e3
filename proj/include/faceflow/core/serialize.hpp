#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nn.hpp"
#include "tensor.hpp"

namespace faceflow {

using json = nlohmann::json;

inline bool path_exists(const std::string& p) { return std::filesystem::exists(p); }

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw IoError("bad json in " + path + ": " + e.what());
    }
    return j;
}

// nlohmann objects keep keys sorted, so output is byte-stable for equal content
inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + path);
}

template <typename T>
inline void write_blob(const std::string& path, const T* data, int64_t count) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
    if (!out) throw IoError("write failed for " + path);
}

template <typename T>
inline void read_blob(const std::string& path, T* data, int64_t count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    auto bytes = static_cast<int64_t>(in.tellg());
    if (bytes != count * static_cast<int64_t>(sizeof(T)))
        throw IoError(path + ": expected " + std::to_string(count * sizeof(T)) + " bytes, found " +
                      std::to_string(bytes));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("read failed for " + path);
}

template <typename T>
constexpr const char* dtype_tag() {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    return sizeof(T) == 4 ? "f32" : "f64";
}

// Checkpoint directory layout: manifest.json (names, shapes, offsets, plus a
// caller-owned "meta" object) and weights.bin (native little-endian scalars,
// concatenated in manifest order).
template <typename T>
inline void save_tensors(const std::string& dir, const Params<T>& named, const json& meta) {
    ensure_dir(dir);
    json manifest;
    manifest["format"] = "faceflow-tensors-v1";
    manifest["dtype"] = dtype_tag<T>();
    manifest["meta"] = meta;
    json entries = json::array();
    int64_t offset = 0;
    std::vector<T> blob;
    for (const auto& [name, var] : named) {
        const auto& t = var.value();
        json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        entries.push_back(e);
        blob.insert(blob.end(), t.vec().begin(), t.vec().end());
        offset += t.numel();
    }
    manifest["tensors"] = entries;
    write_json_file(dir + "/manifest.json", manifest);
    write_blob(dir + "/weights.bin", blob.data(), static_cast<int64_t>(blob.size()));
}

template <typename T>
struct LoadedTensors {
    std::map<std::string, Tensor<T>> tensors;
    json meta;
};

template <typename T>
inline LoadedTensors<T> load_tensors(const std::string& dir) {
    json manifest = read_json_file(dir + "/manifest.json");
    if (manifest.value("format", "") != "faceflow-tensors-v1")
        throw IoError(dir + ": unrecognized checkpoint format");
    if (manifest.value("dtype", "") != dtype_tag<T>())
        throw IoError(dir + ": dtype " + manifest.value("dtype", "?") + ", expected " +
                      dtype_tag<T>());
    int64_t total = 0;
    for (const auto& e : manifest["tensors"]) total += shape_numel(e["shape"].get<Shape>());
    std::vector<T> blob(static_cast<size_t>(total));
    read_blob(dir + "/weights.bin", blob.data(), total);
    LoadedTensors<T> out;
    out.meta = manifest.value("meta", json::object());
    for (const auto& e : manifest["tensors"]) {
        Shape shape = e["shape"].get<Shape>();
        int64_t off = e["offset"].get<int64_t>();
        int64_t n = shape_numel(shape);
        if (off < 0 || off + n > total) throw IoError(dir + ": tensor offset out of range");
        std::vector<T> data(blob.begin() + off, blob.begin() + off + n);
        out.tensors.emplace(e["name"].get<std::string>(), Tensor<T>(shape, std::move(data)));
    }
    return out;
}

// Strict load: every expected name present with the expected shape, no strays.
template <typename T>
inline json load_into(Params<T>& named, const std::string& dir) {
    auto loaded = load_tensors<T>(dir);
    for (auto& [name, var] : named) {
        auto it = loaded.tensors.find(name);
        if (it == loaded.tensors.end()) throw LookupError(dir + ": missing tensor " + name);
        if (it->second.shape() != var.shape())
            throw ShapeError(dir + ": tensor " + name + " has shape " +
                             shape_str(it->second.shape()) + ", expected " + shape_str(var.shape()));
        var.value() = it->second;
        loaded.tensors.erase(it);
    }
    if (!loaded.tensors.empty())
        throw LookupError(dir + ": unexpected tensor " + loaded.tensors.begin()->first);
    return loaded.meta;
}

}  // namespace faceflow
