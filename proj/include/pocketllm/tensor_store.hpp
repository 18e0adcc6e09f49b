#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pocketllm/matrix.hpp"

namespace pocketllm {

enum class LayerRole : unsigned char { q, k, v, o, gate, up, down, other };

std::string_view role_name(LayerRole role);
LayerRole parse_role(std::string_view s);

struct LayerEntry {
    std::string name;
    LayerRole role = LayerRole::other;
    int block_index = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::string data_path; // relative to the manifest directory
    std::string dtype = "f32";
};

struct ModelManifest {
    std::filesystem::path base_dir;
    std::vector<LayerEntry> layers;

    const LayerEntry& find(std::string_view name) const;
    std::filesystem::path resolve(const LayerEntry& e) const { return base_dir / e.data_path; }
};

inline constexpr std::string_view kManifestHeader = "pocketllm-manifest v1";

// Parses `name|role|block|d_in|d_out|dtype|relative_path` lines and checks every
// binary against d_in*d_out*4 bytes. Throws Error{data} on any inconsistency.
ModelManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const ModelManifest& manifest);

Matrix<float> load_tensor(const std::filesystem::path& path, std::size_t d_in, std::size_t d_out);
Matrix<float> load_layer(const ModelManifest& manifest, const LayerEntry& entry);
void save_tensor(const std::filesystem::path& path, const Matrix<float>& w);

/// N x d view of a weight matrix cut into length-d row pieces. Row i of W owns
/// rows [i*L, (i+1)*L) of `data`.
template <typename T>
struct SubvectorSet {
    Matrix<T> data;
    std::size_t d = 0;
    std::size_t L = 0;
    std::size_t d_in = 0;
    std::string origin;

    std::size_t count() const { return data.rows; }
};

template <typename T>
SubvectorSet<T> split_rows(const Matrix<T>& w, std::size_t d, std::string origin = {});

template <typename T>
Matrix<T> merge(const SubvectorSet<T>& s);

// Overload with an explicit d that must agree with the set's metadata.
template <typename T>
Matrix<T> merge(const SubvectorSet<T>& s, std::size_t d);

} // namespace pocketllm
