#include "factorwm/serialize.hpp"

#include <json.hpp>

#include <bit>
#include <cstdio>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "binary dataset format requires a little-endian host");

namespace fwm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_name(const fs::path& path) {
    return path.string() + ".tmp";
}

} // namespace

void write_f64_file(const fs::path& path, const std::vector<double>& data) {
    fs::path tmp = temp_name(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot open " + tmp.string() + " for writing");
        }
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!out) {
            throw DataError("short write to " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::vector<double> read_f64_file(const fs::path& path, std::int64_t expected_count) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::streamsize bytes = in.tellg();
    if (bytes % static_cast<std::streamsize>(sizeof(double)) != 0) {
        throw DataError(path.string() + " is not a whole number of float64 values");
    }
    std::int64_t count = bytes / static_cast<std::streamsize>(sizeof(double));
    if (expected_count >= 0 && count != expected_count) {
        throw DataError(path.string() + " holds " + std::to_string(count) + " values, expected " + std::to_string(expected_count));
    }
    std::vector<double> data(static_cast<std::size_t>(count));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(data.data()), bytes);
    if (!in) {
        throw DataError("short read from " + path.string());
    }
    return data;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = temp_name(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot open " + tmp.string() + " for writing");
        }
        out << text;
        if (!out) {
            throw DataError("short write to " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return std::string(buf);
}

void ArrayPack::add(std::string name, Shape shape, std::vector<double> data) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("ArrayPack: " + name + " data does not match shape " + shape_str(shape));
    }
    arrays.push_back(NamedArray{std::move(name), std::move(shape), std::move(data)});
}

const NamedArray& ArrayPack::get(const std::string& name) const {
    for (const NamedArray& a : arrays) {
        if (a.name == name) return a;
    }
    throw DataError("ArrayPack: missing array " + name);
}

bool ArrayPack::has(const std::string& name) const {
    for (const NamedArray& a : arrays) {
        if (a.name == name) return true;
    }
    return false;
}

std::string ArrayPack::write(const fs::path& bin_path) const {
    json index = json::array();
    std::vector<double> blob;
    std::int64_t offset = 0;
    for (const NamedArray& a : arrays) {
        index.push_back({{"name", a.name},
                         {"shape", a.shape},
                         {"offset", offset},
                         {"count", static_cast<std::int64_t>(a.data.size())}});
        blob.insert(blob.end(), a.data.begin(), a.data.end());
        offset += static_cast<std::int64_t>(a.data.size());
    }
    write_f64_file(bin_path, blob);
    return index.dump();
}

ArrayPack ArrayPack::read(const fs::path& bin_path, const std::string& index_json) {
    json index = json::parse(index_json);
    std::vector<double> blob = read_f64_file(bin_path);
    ArrayPack pack;
    for (const json& entry : index) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.shape = entry.at("shape").get<Shape>();
        std::int64_t offset = entry.at("offset").get<std::int64_t>();
        std::int64_t count = entry.at("count").get<std::int64_t>();
        if (offset < 0 || offset + count > static_cast<std::int64_t>(blob.size())) {
            throw DataError("ArrayPack: " + a.name + " range exceeds blob in " + bin_path.string());
        }
        a.data.assign(blob.begin() + offset, blob.begin() + offset + count);
        if (numel(a.shape) != count) {
            throw DataError("ArrayPack: " + a.name + " count does not match shape");
        }
        pack.arrays.push_back(std::move(a));
    }
    return pack;
}

} // namespace fwm
