#pragma once

#include "factorwm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fwm {

// All binary files are raw little-endian IEEE-754 float64, row-major.
// Writes go through a temp file + rename so readers never see partial data.

void write_f64_file(const std::filesystem::path& path, const std::vector<double>& data);
std::vector<double> read_f64_file(const std::filesystem::path& path, std::int64_t expected_count = -1);

void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t value);

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

/// A pack is one .bin blob plus a JSON index [{name, shape, offset, count}];
/// offsets count doubles, not bytes.
struct ArrayPack {
    std::vector<NamedArray> arrays;

    void add(std::string name, Shape shape, std::vector<double> data);
    const NamedArray& get(const std::string& name) const;
    bool has(const std::string& name) const;

    /// Writes the blob and returns the index (to embed in a manifest).
    std::string write(const std::filesystem::path& bin_path) const;
    static ArrayPack read(const std::filesystem::path& bin_path, const std::string& index_json);
};

} // namespace fwm
