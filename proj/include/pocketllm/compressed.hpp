#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pocketllm/autograd.hpp"
#include "pocketllm/codebook.hpp"
#include "pocketllm/tensor_store.hpp"

namespace pocketllm {

enum class Scope : std::uint8_t { per_layer = 0, per_block = 1 };

/// What ships for one weight matrix: codebook, index array, decoder. Layers of
/// a block compressed with a shared scope point at the same codebook/decoder.
struct CompressedLayer {
    std::string name;
    LayerRole role = LayerRole::other;
    int block_index = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t d = 0;
    std::size_t L = 0;
    std::shared_ptr<const Codebook<float>> codebook; // values are fp16-representable
    std::vector<std::uint32_t> indices;
    std::shared_ptr<const MetaNet<float>> decoder;

    std::size_t N() const { return d_in * L; }
    std::size_t K() const { return codebook ? codebook->K() : 0; }
};

struct CompressedModel {
    Scope scope = Scope::per_layer;
    std::vector<CompressedLayer> layers;
};

} // namespace pocketllm
