#include "cotrain/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "cotrain/errors.hpp"

namespace cotrain {

namespace {

constexpr char kMagic[] = "GNCKPT1\n";

void put_f32(std::ostream& out, double value) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    out.write(bytes, 4);
}

double get_f32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw ParseError(0, "checkpoint truncated");
    const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                               (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
    return std::bit_cast<float>(bits);
}

void put_tensor(std::ostream& out, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32(out, m(r, c));
}

Matrix get_tensor(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_f32(in);
    return m;
}

std::istringstream header_line(std::istream& in, const std::string& key, std::size_t line_no) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(line_no, "checkpoint header truncated");
    std::istringstream ss(line);
    std::string got;
    ss >> got;
    if (got != key) throw ParseError(line_no, "expected '" + key + "', got '" + got + "'");
    return ss;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Agent& agent, const MarginConfig& margin) {
    out.write(kMagic, sizeof(kMagic) - 1);
    std::ostringstream h;
    h.precision(17);
    h << "layers";
    for (int s : agent.encoder.layer_sizes()) h << ' ' << s;
    h << "\nclasses " << agent.head.num_classes() << "\nembedding " << agent.head.embedding_dim()
      << "\nmargin " << margin.margin << ' ' << margin.scale << ' ' << margin.mv_t << "\nend\n";
    out << h.str();
    for (const auto& l : agent.encoder.layers) {
        put_tensor(out, l.weight);
        put_tensor(out, l.bias);
    }
    put_tensor(out, agent.head.weight);
}

Checkpoint read_checkpoint(std::istream& in) {
    char magic[sizeof(kMagic) - 1];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw ParseError(1, "bad checkpoint magic");

    std::vector<int> sizes;
    {
        auto ss = header_line(in, "layers", 2);
        for (int s; ss >> s;) sizes.push_back(s);
        if (sizes.size() < 2) throw ParseError(2, "need at least input and embedding sizes");
    }
    int classes = 0, embedding = 0;
    header_line(in, "classes", 3) >> classes;
    header_line(in, "embedding", 4) >> embedding;
    Checkpoint ck;
    header_line(in, "margin", 5) >> ck.margin.margin >> ck.margin.scale >> ck.margin.mv_t;
    header_line(in, "end", 6);
    if (classes < 1 || embedding != sizes.back()) throw ParseError(3, "inconsistent head shape");

    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        DenseLayer layer;
        layer.weight = get_tensor(in, sizes[l + 1], sizes[l]);
        layer.bias = get_tensor(in, sizes[l + 1], 1).col(0);
        ck.agent.encoder.layers.push_back(std::move(layer));
    }
    ck.agent.head.weight = get_tensor(in, classes, embedding);
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Agent& agent, const MarginConfig& margin) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_checkpoint(out, agent, margin);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return read_checkpoint(in);
}

}  // namespace cotrain
