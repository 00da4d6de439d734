#include "qbit/checkpoint.hpp"

#include "qbit/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace qbit {

namespace {

class Writer {
  public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename T>
    void le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

  private:
    std::vector<std::uint8_t> out_;
};

class Reader {
  public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw Error("checkpoint is truncated");
    }
    template <typename T>
    T le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_), in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

  private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

void write_entry(Writer& w, const std::string& name, const Tensor& t) {
    w.le(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le(static_cast<std::uint8_t>(t.requires_grad() ? 1 : 0));
    w.le(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.le(static_cast<std::uint64_t>(d));
    for (double v : t.values()) w.f64(v);
}

void read_table(Reader& r, std::map<std::string, Tensor>& out) {
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name = r.str(r.le<std::uint16_t>());
        const bool trainable = (r.le<std::uint8_t>() & 1) != 0;
        const auto rank = r.le<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.le<std::uint64_t>());
        const auto n = shape_numel(shape);
        r.need(n * 8);
        std::vector<double> values(n);
        for (auto& v : values) v = r.f64();
        if (!out.emplace(name, Tensor::from(std::move(shape), std::move(values), trainable)).second) {
            throw Error("checkpoint has duplicate tensor '" + name + "'");
        }
    }
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const QuantSpec& spec) {
    Writer w;
    w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.le(kCheckpointVersion);
    const std::string header = nlohmann::json{{"model", to_json(model.config())}, {"spec", to_json(spec)}}.dump();
    w.le(static_cast<std::uint32_t>(header.size()));
    w.bytes(header.data(), header.size());

    std::vector<NamedParam> weights, quant;
    for (auto& p : model.named_parameters()) (p.role == ParamRole::quantizer ? quant : weights).push_back(p);
    for (const auto* table : {&weights, &quant}) {
        w.le(static_cast<std::uint32_t>(table->size()));
        for (const auto& p : *table) write_entry(w, p.name, p.tensor);
    }
    return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.str(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
        throw Error("not a checkpoint (bad magic)");
    }
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const auto header = nlohmann::json::parse(r.str(r.le<std::uint32_t>()));
    const auto cfg = transformer_config_from_json(header.at("model"));
    const auto spec = quant_spec_from_json(header.at("spec"));

    std::map<std::string, Tensor> tensors;
    read_table(r, tensors);
    read_table(r, tensors);
    if (!r.done()) throw Error("checkpoint has trailing bytes");
    return {model_from_tensors(cfg, tensors), spec};
}

void save_checkpoint(const std::string& path, const Model& model, const QuantSpec& spec) {
    const auto bytes = encode_checkpoint(model, spec);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write checkpoint '" + path + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

bool is_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    char magic[sizeof(kCheckpointMagic)] = {};
    if (!f.read(magic, sizeof(magic))) return false;
    return std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0;
}

} // namespace qbit
