#include "hoplab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace hoplab {

namespace {

constexpr char kMagic[4] = {'H', 'O', 'P', 'L'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<char>& out, uint32_t v) {
    char buf[4];
    buf[0] = static_cast<char>(v & 0xFF);
    buf[1] = static_cast<char>((v >> 8) & 0xFF);
    buf[2] = static_cast<char>((v >> 16) & 0xFF);
    buf[3] = static_cast<char>((v >> 24) & 0xFF);
    out.insert(out.end(), buf, buf + 4);
}

uint32_t get_u32(const char* p) {
    return static_cast<uint32_t>(static_cast<unsigned char>(p[0])) |
           (static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
           (static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
           (static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24);
}

void put_matrix(std::vector<char>& out, const MatrixXd& m) {
    put_u32(out, static_cast<uint32_t>(m.rows()));
    put_u32(out, static_cast<uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const float f = static_cast<float>(m(r, c));
            char buf[4];
            std::memcpy(buf, &f, 4);
            out.insert(out.end(), buf, buf + 4);
        }
    }
}

class Reader {
public:
    Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    uint32_t u32() {
        need(4);
        uint32_t v = get_u32(data_.data() + pos_);
        pos_ += 4;
        return v;
    }

    MatrixXd matrix() {
        const uint32_t rows = u32();
        const uint32_t cols = u32();
        need(static_cast<size_t>(rows) * cols * 4);
        MatrixXd m(rows, cols);
        for (uint32_t r = 0; r < rows; ++r) {
            for (uint32_t c = 0; c < cols; ++c) {
                float f;
                std::memcpy(&f, data_.data() + pos_, 4);
                pos_ += 4;
                m(r, c) = static_cast<double>(f);
            }
        }
        return m;
    }

    void raw(char* dst, size_t n) {
        need(n);
        std::memcpy(dst, data_.data() + pos_, n);
        pos_ += n;
    }

private:
    void need(size_t n) {
        if (pos_ + n > data_.size()) throw std::runtime_error("truncated checkpoint: " + path_);
    }
    const std::string& data_;
    std::string path_;
    size_t pos_{0};
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::vector<char> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(model.cfg.n_layers));
    put_u32(out, static_cast<uint32_t>(model.cfg.d_model));
    put_u32(out, static_cast<uint32_t>(model.cfg.n_heads));
    put_u32(out, static_cast<uint32_t>(model.cfg.d_ff));
    put_u32(out, static_cast<uint32_t>(model.cfg.max_seq));
    put_u32(out, static_cast<uint32_t>(model.vocab.size()));
    model.p.for_each([&](const MatrixXd& m) { put_matrix(out, m); });
    atomic_write_bytes(path, out);
}

Model load_checkpoint(const std::string& path, const Vocab& vocab) {
    std::string data;
    try {
        data = read_text_file(path);
    } catch (const MissingArtifact&) {
        throw MissingArtifact("checkpoint not found: " + path);
    }
    Reader rd(data, path);
    char magic[4];
    rd.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad checkpoint magic: " + path);
    if (rd.u32() != kVersion) throw std::runtime_error("unsupported checkpoint version: " + path);

    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(rd.u32());
    cfg.d_model = static_cast<int>(rd.u32());
    cfg.n_heads = static_cast<int>(rd.u32());
    cfg.d_ff = static_cast<int>(rd.u32());
    cfg.max_seq = static_cast<int>(rd.u32());
    const uint32_t vocab_size = rd.u32();
    if (static_cast<int>(vocab_size) != vocab.size()) {
        throw std::runtime_error("checkpoint vocab size mismatch: " + path);
    }

    Model m;
    m.cfg = cfg;
    m.vocab = vocab;
    m.p.tok_emb = rd.matrix();
    m.p.pos_emb = rd.matrix();
    m.p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : m.p.layers) {
        l.wq = rd.matrix();
        l.wk = rd.matrix();
        l.wv = rd.matrix();
        l.wo = rd.matrix();
        l.w_in = rd.matrix();
        l.w_out = rd.matrix();
    }
    m.p.w_u = rd.matrix();
    return m;
}

}  // namespace hoplab
