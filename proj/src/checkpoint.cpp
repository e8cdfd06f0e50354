#include "statex/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace statex {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'X', 'C', 'K', 'P', 'T', '\0'};

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            u8(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            u8(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string & s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.append(s);
    }
    void raw(const char * p, std::size_t n) { out_.append(p, n); }
    std::string & bytes() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string & bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        std::uint32_t n = u32();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) { pos_ = p; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) {
            throw IoError("checkpoint: malformed block (read past end)");
        }
    }

    const std::string & bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

void write_config(Writer & w, const ModelConfig & c) {
    w.u8(c.family == Family::Gla ? 0 : 1);
    w.u8(c.delta_activation == DeltaActivation::Softplus ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(c.n_layers));
    w.u32(static_cast<std::uint32_t>(c.d_model));
    w.u32(static_cast<std::uint32_t>(c.n_heads));
    w.u32(static_cast<std::uint32_t>(c.d_k));
    w.u32(static_cast<std::uint32_t>(c.d_v));
    w.u32(static_cast<std::uint32_t>(c.vocab));
    w.f64(c.ffn_ratio);
    w.i32(c.delimiter_token);
    for (const auto & s : c.layers) {
        w.u32(static_cast<std::uint32_t>(s.heads));
        w.u32(static_cast<std::uint32_t>(s.d_k));
        w.u32(static_cast<std::uint32_t>(s.d_v));
    }
}

ModelConfig read_config(Reader & r) {
    ModelConfig c;
    std::uint8_t fam = r.u8();
    if (fam > 1) {
        throw SchemaError("checkpoint: unknown family code " + std::to_string(fam));
    }
    c.family = fam == 0 ? Family::Gla : Family::Mamba2;
    c.delta_activation = r.u8() == 0 ? DeltaActivation::Softplus : DeltaActivation::Silu;
    c.n_layers = r.u32();
    c.d_model = r.u32();
    c.n_heads = r.u32();
    c.d_k = r.u32();
    c.d_v = r.u32();
    c.vocab = r.u32();
    c.ffn_ratio = r.f64();
    c.delimiter_token = r.i32();
    if (c.n_layers > 1u << 16) {
        throw SchemaError("checkpoint: implausible layer count " + std::to_string(c.n_layers));
    }
    c.layers.resize(c.n_layers);
    for (auto & s : c.layers) {
        s.heads = r.u32();
        s.d_k = r.u32();
        s.d_v = r.u32();
    }
    return c;
}

} // namespace

std::uint64_t fnv1a64(const void * data, std::size_t n, std::uint64_t h) {
    const auto * p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t tensor_checksum(const Tensor & t, StorageType storage) {
    Writer w;
    for (double v : t.values()) {
        if (storage == StorageType::F32) {
            w.f32(static_cast<float>(v));
        } else {
            w.f64(v);
        }
    }
    return fnv1a64(w.bytes().data(), w.bytes().size());
}

const Tensor & Checkpoint::at(const std::string & name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw SchemaError("checkpoint: missing tensor '" + name + "'");
    }
    return it->second;
}

Tensor & Checkpoint::at(const std::string & name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw SchemaError("checkpoint: missing tensor '" + name + "'");
    }
    return it->second;
}

void Checkpoint::validate_schema() const {
    try {
        config.validate();
    } catch (const ConfigError & e) {
        throw SchemaError(std::string("checkpoint config: ") + e.what());
    }
    const ShapeMap expected = model_schema(config);
    for (const auto & [name, t] : tensors) {
        auto it = expected.find(name);
        if (it == expected.end()) {
            throw SchemaError("checkpoint: unknown tensor '" + name + "'");
        }
        if (it->second != t.shape()) {
            throw SchemaError("checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(it->second));
        }
    }
    for (const auto & [name, shape] : expected) {
        if (!tensors.count(name)) {
            throw SchemaError("checkpoint: missing tensor '" + name + "'");
        }
    }
}

std::string serialize(const Checkpoint & ckpt, bool check_schema) {
    if (check_schema) {
        ckpt.validate_schema();
    }
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    write_config(w, ckpt.config);
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto & [name, t] : ckpt.tensors) {
        w.str(name);
        w.u8(static_cast<std::uint8_t>(ckpt.meta.storage));
        w.u32(static_cast<std::uint32_t>(t.ndim()));
        for (auto e : t.shape()) {
            w.u64(e);
        }
        for (double v : t.values()) {
            if (ckpt.meta.storage == StorageType::F32) {
                w.f32(static_cast<float>(v));
            } else {
                w.f64(v);
            }
        }
    }
    w.u64(ckpt.meta.seed);
    w.u64(ckpt.meta.tokens_seen);
    w.str(ckpt.meta.stage);
    w.str(ckpt.meta.accounting);
    w.u8(static_cast<std::uint8_t>(ckpt.meta.storage));
    std::uint64_t sum = fnv1a64(w.bytes().data(), w.bytes().size());
    w.u64(sum);
    return std::move(w.bytes());
}

Checkpoint deserialize(const std::string & bytes) {
    constexpr std::size_t header = sizeof kMagic + 4;
    if (bytes.size() >= sizeof kMagic && std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError("checkpoint: bad magic bytes (not a checkpoint file)");
    }
    if (bytes.size() < header + 8) {
        throw ChecksumError("checkpoint: checksum mismatch (file truncated to " + std::to_string(bytes.size()) +
                            " bytes)");
    }
    const std::size_t body = bytes.size() - 8;
    Reader r(bytes, bytes.size());
    r.seek(sizeof kMagic);
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    }
    r.seek(body);
    std::uint64_t stored = r.u64();
    if (stored != fnv1a64(bytes.data(), body)) {
        throw ChecksumError("checkpoint: checksum mismatch (file corrupted or truncated)");
    }

    Reader in(bytes, body);
    in.seek(header);
    Checkpoint ckpt;
    ckpt.config = read_config(in);
    std::uint32_t count = in.u32();
    std::uint8_t dtype_seen = 255;
    for (std::uint32_t n = 0; n < count; ++n) {
        std::string name = in.str();
        std::uint8_t dtype = in.u8();
        if (dtype > 1) {
            throw SchemaError("checkpoint: tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
        }
        dtype_seen = dtype;
        std::uint32_t rank = in.u32();
        if (rank > 8) {
            throw SchemaError("checkpoint: tensor '" + name + "' has implausible rank " + std::to_string(rank));
        }
        Shape shape(rank);
        for (auto & e : shape) {
            e = in.u64();
        }
        const std::size_t numel = shape_numel(shape);
        const std::size_t width = dtype == 0 ? 4 : 8;
        if (numel > (body - in.pos()) / width) {
            throw IoError("checkpoint: tensor '" + name + "' payload exceeds file size");
        }
        std::vector<double> data(numel);
        for (auto & v : data) {
            v = dtype == 0 ? static_cast<double>(in.f32()) : in.f64();
        }
        ckpt.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    ckpt.meta.seed = in.u64();
    ckpt.meta.tokens_seen = in.u64();
    ckpt.meta.stage = in.str();
    ckpt.meta.accounting = in.str();
    std::uint8_t storage = in.u8();
    if (storage > 1 || (dtype_seen != 255 && dtype_seen != storage)) {
        throw SchemaError("checkpoint: inconsistent storage type");
    }
    ckpt.meta.storage = static_cast<StorageType>(storage);
    if (in.pos() != body) {
        throw IoError("checkpoint: trailing bytes before checksum");
    }
    ckpt.validate_schema();
    return ckpt;
}

void save(const Checkpoint & ckpt, const std::filesystem::path & path) {
    std::string bytes = serialize(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

Checkpoint load(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize(buf.str());
}

std::string inspect(const Checkpoint & ckpt) {
    std::ostringstream os;
    const auto & c = ckpt.config;
    os << "family " << family_name(c.family) << " layers " << c.n_layers << " dim " << c.d_model << " heads "
       << c.n_heads << " dk " << c.d_k << " dv " << c.d_v << " vocab " << c.vocab << "\n";
    os << "stage " << ckpt.meta.stage << " seed " << ckpt.meta.seed << " tokens_seen " << ckpt.meta.tokens_seen
       << " storage " << (ckpt.meta.storage == StorageType::F32 ? "f32" : "f64") << "\n";
    os << "parameters " << parameter_count(c) << " state " << c.state_size() << "\n";
    for (const auto & [name, t] : ckpt.tensors) {
        os << std::left << std::setw(28) << name << ' ' << std::setw(14) << shape_str(t.shape()) << ' '
           << std::hex << std::setw(16) << std::setfill('0') << std::right << tensor_checksum(t, ckpt.meta.storage)
           << std::dec << std::setfill(' ') << "\n";
    }
    if (!ckpt.meta.accounting.empty()) {
        os << ckpt.meta.accounting;
    }
    return os.str();
}

Checkpoint round_to_storage(Checkpoint ckpt) {
    if (ckpt.meta.storage == StorageType::F32) {
        for (auto & [name, t] : ckpt.tensors) {
            for (auto & v : t.values()) {
                v = static_cast<double>(static_cast<float>(v));
            }
        }
    }
    return ckpt;
}

} // namespace statex
