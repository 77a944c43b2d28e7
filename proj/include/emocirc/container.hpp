#pragma once

// Tensor container file: one UTF-8 JSON header describing free-form metadata
// plus a tensor directory (name/shape/offset/dtype), followed by raw
// little-endian blobs, closed by a 64-bit FNV-1a checksum of the blob region.
//
//   [u64 LE header_bytes][header JSON][blob region][u64 LE fnv1a(blob region)]
//
// Offsets in the directory are relative to the start of the blob region.
// Weights are stored as f32; analysis vectors may be stored as f64.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace emocirc {

inline constexpr const char* kContainerFormat = "emocirc-container";
inline constexpr int kContainerVersion = 1;

struct TensorEntry {
    std::vector<std::size_t> shape;
    std::string dtype;  // "f32" | "f64"
    Vec data;           // always doubles in memory

    std::size_t count() const {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }
};

class Container {
public:
    nlohmann::json meta;

    void add(const std::string& name, std::vector<std::size_t> shape, Vec data,
             const std::string& dtype = "f32") {
        EMOCIRC_CHECK(dtype == "f32" || dtype == "f64", "unsupported dtype " + dtype);
        TensorEntry e{std::move(shape), dtype, std::move(data)};
        EMOCIRC_CHECK(e.count() == e.data.size(),
                      "tensor '" + name + "': shape does not match data length");
        tensors_[name] = std::move(e);
    }

    void add_mat(const std::string& name, const Mat& m, const std::string& dtype = "f32") {
        add(name, {m.rows, m.cols}, m.a, dtype);
    }

    void add_vec(const std::string& name, const Vec& v, const std::string& dtype = "f32") {
        add(name, {v.size()}, v, dtype);
    }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    const TensorEntry& get(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw FormatError("tensor '" + name + "' not in container");
        return it->second;
    }

    Mat get_mat(const std::string& name) const {
        const TensorEntry& e = get(name);
        if (e.shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
        Mat m(e.shape[0], e.shape[1]);
        m.a = e.data;
        return m;
    }

    Vec get_vec(const std::string& name) const {
        const TensorEntry& e = get(name);
        if (e.shape.size() != 1) throw FormatError("tensor '" + name + "' is not 1-D");
        return e.data;
    }

    const std::map<std::string, TensorEntry>& tensors() const { return tensors_; }

    void save(const std::string& path) const {
        // Lay out the blob region first so the directory can carry offsets.
        std::vector<unsigned char> blob;
        nlohmann::json dir = nlohmann::json::array();
        for (const auto& [name, e] : tensors_) {
            const std::size_t offset = blob.size();
            if (e.dtype == "f32") {
                for (double x : e.data) {
                    const float f = static_cast<float>(x);
                    append_raw(blob, &f, sizeof(f));
                }
            } else {
                for (double x : e.data) append_raw(blob, &x, sizeof(x));
            }
            dir.push_back({{"name", name},
                           {"shape", e.shape},
                           {"dtype", e.dtype},
                           {"offset", offset}});
        }

        nlohmann::json header = {{"format", kContainerFormat},
                                 {"version", kContainerVersion},
                                 {"meta", meta},
                                 {"tensors", dir}};
        const std::string header_str = header.dump();

        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open '" + path + "' for writing");
        write_u64(f, header_str.size());
        f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        f.write(reinterpret_cast<const char*>(blob.data()),
                static_cast<std::streamsize>(blob.size()));
        write_u64(f, fnv1a64(blob.data(), blob.size()));
        if (!f) throw IoError("write failed for '" + path + "'");
    }

    static Container load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open '" + path + "'");
        f.seekg(0, std::ios::end);
        const std::uint64_t file_size = static_cast<std::uint64_t>(f.tellg());
        f.seekg(0, std::ios::beg);
        if (file_size < 16) throw TruncationError("'" + path + "' smaller than framing");

        const std::uint64_t header_len = read_u64(f, path);
        if (header_len + 16 > file_size)
            throw TruncationError("'" + path + "': header length exceeds file");
        std::string header_str(header_len, '\0');
        f.read(header_str.data(), static_cast<std::streamsize>(header_len));
        if (!f) throw TruncationError("'" + path + "': header cut short");

        nlohmann::json header;
        try {
            header = nlohmann::json::parse(header_str);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("'" + path + "': bad header JSON: " + e.what());
        }
        if (header.value("format", "") != kContainerFormat)
            throw FormatError("'" + path + "': not an " + std::string(kContainerFormat) + " file");
        if (header.value("version", -1) != kContainerVersion)
            throw VersionMismatch("'" + path + "': container version " +
                                  header["version"].dump());

        const std::uint64_t blob_size = file_size - 8 - header_len - 8;
        std::vector<unsigned char> blob(blob_size);
        f.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob_size));
        if (!f) throw TruncationError("'" + path + "': blob region cut short");
        const std::uint64_t stored_sum = read_u64(f, path);
        const std::uint64_t actual_sum = fnv1a64(blob.data(), blob.size());
        if (stored_sum != actual_sum)
            throw ChecksumError("'" + path + "': blob checksum mismatch");

        Container c;
        c.meta = header.value("meta", nlohmann::json::object());
        for (const auto& entry : header.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::vector<std::size_t> shape =
                entry.at("shape").get<std::vector<std::size_t>>();
            const std::string dtype = entry.at("dtype").get<std::string>();
            const std::size_t offset = entry.at("offset").get<std::size_t>();

            std::size_t count = 1;
            for (std::size_t s : shape) count *= s;
            const std::size_t elem = dtype == "f64" ? 8 : 4;
            if (dtype != "f32" && dtype != "f64")
                throw FormatError("'" + path + "': tensor '" + name + "' has dtype " + dtype);
            if (offset + count * elem > blob.size())
                throw FormatError("'" + path + "': tensor '" + name +
                                  "' blob exceeds region (shape mismatch)");

            Vec data(count);
            if (dtype == "f32") {
                for (std::size_t i = 0; i < count; ++i) {
                    float v;
                    std::memcpy(&v, blob.data() + offset + 4 * i, 4);
                    data[i] = static_cast<double>(v);
                }
            } else {
                std::memcpy(data.data(), blob.data() + offset, count * 8);
            }
            c.tensors_[name] = TensorEntry{shape, dtype, std::move(data)};
        }
        return c;
    }

private:
    std::map<std::string, TensorEntry> tensors_;

    static void append_raw(std::vector<unsigned char>& out, const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        out.insert(out.end(), b, b + n);
    }

    static void write_u64(std::ofstream& f, std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        f.write(reinterpret_cast<const char*>(b), 8);
    }

    static std::uint64_t read_u64(std::ifstream& f, const std::string& path) {
        unsigned char b[8];
        f.read(reinterpret_cast<char*>(b), 8);
        if (!f) throw TruncationError("'" + path + "': missing u64 field");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
};

}  // namespace emocirc
