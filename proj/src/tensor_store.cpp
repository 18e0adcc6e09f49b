#include "pocketllm/tensor_store.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>

#include "pocketllm/error.hpp"

namespace pocketllm {

namespace {

constexpr std::array<std::string_view, 8> kRoleNames = {"q", "k", "v", "o", "gate", "up", "down", "other"};

std::vector<std::string> split_fields(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

template <typename Int>
Int parse_int(const std::string& s, const std::string& what, std::size_t line_no) {
    Int v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    check(ec == std::errc{} && ptr == s.data() + s.size(), ErrorKind::data,
          "manifest line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
    return v;
}

} // namespace

std::string_view role_name(LayerRole role) {
    return kRoleNames[static_cast<std::size_t>(role)];
}

LayerRole parse_role(std::string_view s) {
    for (std::size_t i = 0; i < kRoleNames.size(); ++i) {
        if (kRoleNames[i] == s) {
            return static_cast<LayerRole>(i);
        }
    }
    throw Error(ErrorKind::data, "unknown layer role '" + std::string(s) + "'");
}

const LayerEntry& ModelManifest::find(std::string_view name) const {
    for (const auto& e : layers) {
        if (e.name == name) {
            return e;
        }
    }
    throw Error(ErrorKind::data, "no layer named '" + std::string(name) + "' in manifest");
}

ModelManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    check(static_cast<bool>(in), ErrorKind::data, "cannot open manifest " + path.string());

    std::string line;
    check(static_cast<bool>(std::getline(in, line)), ErrorKind::data, "empty manifest " + path.string());
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    check(line == kManifestHeader, ErrorKind::data, "manifest header must be '" + std::string(kManifestHeader) + "'");

    ModelManifest m;
    m.base_dir = path.parent_path();
    std::set<std::string> names;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        auto f = split_fields(line, '|');
        check(f.size() == 7, ErrorKind::data,
              "manifest line " + std::to_string(line_no) + ": expected 7 '|'-separated fields");
        LayerEntry e;
        e.name = f[0];
        check(!e.name.empty(), ErrorKind::data, "manifest line " + std::to_string(line_no) + ": empty name");
        e.role = parse_role(f[1]);
        e.block_index = parse_int<int>(f[2], "block", line_no);
        e.d_in = parse_int<std::size_t>(f[3], "d_in", line_no);
        e.d_out = parse_int<std::size_t>(f[4], "d_out", line_no);
        e.dtype = f[5];
        e.data_path = f[6];
        check(e.dtype == "f32", ErrorKind::data, "layer " + e.name + ": unsupported dtype '" + e.dtype + "' (only f32)");
        check(e.d_in > 0 && e.d_out > 0, ErrorKind::data, "layer " + e.name + ": zero-sized shape");
        check(names.insert(e.name).second, ErrorKind::data, "duplicate layer name '" + e.name + "'");

        auto file = m.base_dir / e.data_path;
        std::error_code ec;
        auto bytes = std::filesystem::file_size(file, ec);
        check(!ec, ErrorKind::data, "layer " + e.name + ": missing tensor file " + file.string());
        check(bytes == e.d_in * e.d_out * 4, ErrorKind::data,
              "layer " + e.name + ": size mismatch, expected " + std::to_string(e.d_in * e.d_out * 4) +
                  " bytes, file has " + std::to_string(bytes));
        m.layers.push_back(std::move(e));
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const ModelManifest& manifest) {
    std::ofstream out(path);
    check(static_cast<bool>(out), ErrorKind::data, "cannot write manifest " + path.string());
    out << kManifestHeader << '\n';
    for (const auto& e : manifest.layers) {
        out << e.name << '|' << role_name(e.role) << '|' << e.block_index << '|' << e.d_in << '|' << e.d_out << '|'
            << e.dtype << '|' << e.data_path << '\n';
    }
    check(static_cast<bool>(out), ErrorKind::data, "failed writing manifest " + path.string());
}

Matrix<float> load_tensor(const std::filesystem::path& path, std::size_t d_in, std::size_t d_out) {
    std::ifstream in(path, std::ios::binary);
    check(static_cast<bool>(in), ErrorKind::data, "cannot open tensor " + path.string());
    std::vector<unsigned char> raw(d_in * d_out * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    check(static_cast<std::size_t>(in.gcount()) == raw.size(), ErrorKind::data, "short read on " + path.string());
    check(in.peek() == std::char_traits<char>::eof(), ErrorKind::data, "trailing bytes in " + path.string());

    Matrix<float> w(d_in, d_out);
    for (std::size_t i = 0; i < w.data.size(); ++i) {
        const unsigned char* p = raw.data() + 4 * i;
        std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                             (std::uint32_t(p[3]) << 24);
        w.data[i] = std::bit_cast<float>(bits);
    }
    return w;
}

Matrix<float> load_layer(const ModelManifest& manifest, const LayerEntry& entry) {
    return load_tensor(manifest.resolve(entry), entry.d_in, entry.d_out);
}

void save_tensor(const std::filesystem::path& path, const Matrix<float>& w) {
    std::vector<unsigned char> raw(w.data.size() * 4);
    for (std::size_t i = 0; i < w.data.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(w.data[i]);
        for (int b = 0; b < 4; ++b) {
            raw[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
        }
    }
    std::ofstream out(path, std::ios::binary);
    check(static_cast<bool>(out), ErrorKind::data, "cannot write tensor " + path.string());
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    check(static_cast<bool>(out), ErrorKind::data, "failed writing tensor " + path.string());
}

template <typename T>
SubvectorSet<T> split_rows(const Matrix<T>& w, std::size_t d, std::string origin) {
    check(d > 0 && w.cols % d == 0, ErrorKind::config,
          "subvector length " + std::to_string(d) + " does not divide d_out=" + std::to_string(w.cols));
    SubvectorSet<T> s;
    s.d = d;
    s.L = w.cols / d;
    s.d_in = w.rows;
    s.origin = std::move(origin);
    // Row-major storage makes the split a pure reinterpretation of the buffer.
    s.data.rows = w.rows * s.L;
    s.data.cols = d;
    s.data.data = w.data;
    return s;
}

template <typename T>
Matrix<T> merge(const SubvectorSet<T>& s) {
    check(s.d > 0 && s.data.cols == s.d, ErrorKind::data, "subvector width does not match d");
    check(s.data.rows == s.d_in * s.L, ErrorKind::data,
          "subvector count " + std::to_string(s.data.rows) + " != d_in*L = " + std::to_string(s.d_in * s.L));
    Matrix<T> w;
    w.rows = s.d_in;
    w.cols = s.L * s.d;
    w.data = s.data.data;
    return w;
}

template <typename T>
Matrix<T> merge(const SubvectorSet<T>& s, std::size_t d) {
    check(d == s.d, ErrorKind::data, "merge: d=" + std::to_string(d) + " disagrees with set d=" + std::to_string(s.d));
    return merge(s);
}

template SubvectorSet<float> split_rows(const Matrix<float>&, std::size_t, std::string);
template SubvectorSet<double> split_rows(const Matrix<double>&, std::size_t, std::string);
template Matrix<float> merge(const SubvectorSet<float>&);
template Matrix<double> merge(const SubvectorSet<double>&);
template Matrix<float> merge(const SubvectorSet<float>&, std::size_t);
template Matrix<double> merge(const SubvectorSet<double>&, std::size_t);

} // namespace pocketllm
