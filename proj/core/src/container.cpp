#include "ddae/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ddae/error.hpp"

namespace ddae {

namespace {

constexpr char kMagic[4] = {'D', 'D', 'A', 'E'};
constexpr std::size_t kBlockHeaderBytes = 4 + 1 + 1 + 4 + 4;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

bool is_text_kind(BlockKind kind) { return static_cast<std::uint8_t>(kind) >= 0x80; }

void Container::add_matrix(BlockKind kind, const Matrix& m) {
    require(!is_text_kind(kind), "Container::add_matrix: text block kind");
    if (!m.all_finite()) fail(ErrorCode::invalid_input, "Container: refusing to store non-finite values");
    blocks_.push_back(Block{kind, m, {}});
}

void Container::add_text(BlockKind kind, std::string text) {
    require(is_text_kind(kind), "Container::add_text: numeric block kind");
    require(text.find('\0') == std::string::npos, "Container::add_text: embedded NUL");
    blocks_.push_back(Block{kind, {}, std::move(text)});
}

std::vector<const Block*> Container::all(BlockKind kind) const {
    std::vector<const Block*> out;
    for (const Block& b : blocks_)
        if (b.kind == kind) out.push_back(&b);
    return out;
}

const Block& Container::get(BlockKind kind, std::string_view what) const {
    for (const Block& b : blocks_)
        if (b.kind == kind) return b;
    fail(ErrorCode::format, "missing " + std::string(what) + " block");
}

std::string Container::encode() const {
    std::string out;
    for (const Block& b : blocks_) {
        out.append(kMagic, 4);
        out.push_back(static_cast<char>(kFormatVersion));
        out.push_back(static_cast<char>(b.kind));
        if (is_text_kind(b.kind)) {
            const std::size_t words = (b.text.size() + 3) / 4;
            put_u32(out, 1);
            put_u32(out, static_cast<std::uint32_t>(words));
            out += b.text;
            out.append(words * 4 - b.text.size(), '\0');
        } else {
            put_u32(out, static_cast<std::uint32_t>(b.values.rows()));
            put_u32(out, static_cast<std::uint32_t>(b.values.cols()));
            for (double x : b.values.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
        }
    }
    return out;
}

Container Container::decode(std::string_view bytes) {
    Container c;
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t pos = 0;
    if (bytes.empty()) fail(ErrorCode::format, "empty file");
    while (pos < bytes.size()) {
        if (bytes.size() - pos < kBlockHeaderBytes) fail(ErrorCode::format, "truncated block header");
        if (std::memcmp(p + pos, kMagic, 4) != 0) fail(ErrorCode::format, "bad magic bytes");
        const std::uint8_t version = p[pos + 4];
        if (version != kFormatVersion)
            fail(ErrorCode::unsupported_version, "container version " + std::to_string(version));
        const auto kind = static_cast<BlockKind>(p[pos + 5]);
        const std::uint64_t rows = get_u32(p + pos + 6);
        const std::uint64_t cols = get_u32(p + pos + 10);
        pos += kBlockHeaderBytes;
        const std::uint64_t words = rows * cols;
        if (words > (bytes.size() - pos) / 4) fail(ErrorCode::format, "truncated block payload");
        if (is_text_kind(kind)) {
            if (rows != 1) fail(ErrorCode::format, "text block with rows != 1");
            std::string text(bytes.substr(pos, words * 4));
            while (!text.empty() && text.back() == '\0') text.pop_back();
            c.blocks_.push_back(Block{kind, {}, std::move(text)});
        } else {
            Matrix m(rows, cols);
            auto data = m.data();
            for (std::uint64_t i = 0; i < words; ++i)
                data[i] = static_cast<double>(std::bit_cast<float>(get_u32(p + pos + 4 * i)));
            if (!m.all_finite()) fail(ErrorCode::format, "non-finite payload");
            c.blocks_.push_back(Block{kind, std::move(m), {}});
        }
        pos += words * 4;
    }
    return c;
}

void Container::save(const std::filesystem::path& path) const { write_file(path, encode()); }

Container Container::load(const std::filesystem::path& path) { return decode(read_file(path)); }

void save_matrix(const std::filesystem::path& path, const Matrix& m, BlockKind kind) {
    Container c;
    c.add_matrix(kind, m);
    c.save(path);
}

Matrix load_matrix(const std::filesystem::path& path) {
    Container c = Container::load(path);
    if (c.blocks().size() != 1 || is_text_kind(c.blocks()[0].kind))
        fail(ErrorCode::format, "expected a single matrix block in " + path.string());
    return c.blocks()[0].values;
}

Matrix quantize_f32(Matrix m) {
    for (double& x : m.data()) x = static_cast<double>(static_cast<float>(x));
    return m;
}

Vector quantize_f32(Vector v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    return v;
}

std::string format_key_values(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

KeyValues parse_key_values(std::string_view text) {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::format, "line " + std::to_string(lineno) + ": expected key=value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

const std::string& require_key(const KeyValues& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) fail(ErrorCode::format, "missing header key '" + key + "'");
    return it->second;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::validation, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::validation, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace ddae
