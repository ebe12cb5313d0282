#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ddae/numerics.hpp"

namespace ddae {

// On-disk tensor container. A file is a sequence of blocks, each laid out as
//
//   "DDAE" | version u8 (0x01) | kind u8 | rows u32le | cols u32le | payload
//
// with rows*cols 32-bit little-endian words of payload. Numeric blocks hold
// IEEE-754 floats in row-major order; text blocks (kind >= 0x80) hold UTF-8
// bytes zero-padded to a multiple of four, with rows = 1.
inline constexpr std::uint8_t kFormatVersion = 0x01;

enum class BlockKind : std::uint8_t {
    matrix = 0x01,
    images = 0x10,
    latents = 0x11,
    labels = 0x12,
    layer_weight = 0x20,
    layer_bias = 0x21,
    aux_layer_weight = 0x22,
    aux_layer_bias = 0x23,
    feature_map = 0x24,
    omega = 0x30,
    centering_mean = 0x31,
    probe_weights = 0x40,
    header = 0x80,
    annotations = 0x81,
};

bool is_text_kind(BlockKind kind);

struct Block {
    BlockKind kind = BlockKind::matrix;
    Matrix values;     // numeric blocks
    std::string text;  // text blocks
};

class Container {
public:
    void add_matrix(BlockKind kind, const Matrix& m);
    void add_text(BlockKind kind, std::string text);

    const std::vector<Block>& blocks() const noexcept { return blocks_; }
    std::vector<const Block*> all(BlockKind kind) const;
    // Throws a format error naming `what` when the block is absent.
    const Block& get(BlockKind kind, std::string_view what) const;

    std::string encode() const;
    static Container decode(std::string_view bytes);

    void save(const std::filesystem::path& path) const;
    static Container load(const std::filesystem::path& path);

private:
    std::vector<Block> blocks_;
};

// Single-block matrix files.
void save_matrix(const std::filesystem::path& path, const Matrix& m, BlockKind kind = BlockKind::matrix);
Matrix load_matrix(const std::filesystem::path& path);

// Rounds every entry through float32, i.e. what a save/load cycle preserves.
Matrix quantize_f32(Matrix m);
Vector quantize_f32(Vector v);

// Ordered key=value text used for headers and configs.
using KeyValues = std::map<std::string, std::string>;
std::string format_key_values(const KeyValues& kv);
KeyValues parse_key_values(std::string_view text);
const std::string& require_key(const KeyValues& kv, const std::string& key);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ddae
