#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "damoe/error.hpp"
#include "damoe/model.hpp"
#include "damoe/optim.hpp"
#include "damoe/tensor.hpp"

namespace damoe {

/// On-disk model snapshot. Layout: "DAMO" magic, u32 format version, a
/// length-prefixed UTF-8 key=value block, then per parameter a
/// length-prefixed name, rank, extents, and raw little-endian f32 data.
/// Optimizer moments follow behind a presence flag. All integers little-endian.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::vector<std::pair<std::string, std::string>> config;
    std::vector<std::pair<std::string, Tensor<float>>> params;
    bool has_optimizer = false;
    std::uint64_t optimizer_step = 0;
    std::vector<Tensor<float>> adam_m, adam_v;

    const std::string* find_config(const std::string& key) const {
        for (const auto& [k, v] : config)
            if (k == key) return &v;
        return nullptr;
    }

    const std::string& config_value(const std::string& key) const {
        const std::string* v = find_config(key);
        if (!v) throw LoadError("checkpoint config missing key '" + key + "'");
        return *v;
    }

    void set_config(const std::string& key, const std::string& value) {
        for (auto& [k, v] : config)
            if (k == key) {
                v = value;
                return;
            }
        config.emplace_back(key, value);
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, const Tensor<float>& t) {
    static_assert(sizeof(float) == 4);
    const std::size_t bytes = t.size() * 4;
    const std::size_t at = out.size();
    out.resize(out.size() + bytes);
    std::memcpy(out.data() + at, t.data(), bytes);
}

class Reader {
public:
    Reader(std::string data) : data_(std::move(data)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    Tensor<float> f32(const Shape& shape) {
        const std::size_t n = shape_numel(shape);
        need(n * 4);
        Tensor<float> t(shape);
        std::memcpy(t.data(), data_.data() + pos_, n * 4);
        pos_ += n * 4;
        return t;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw LoadError("checkpoint truncated");
    }

    std::string data_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out = "DAMO";
    detail::put_u32(out, Checkpoint::kVersion);

    std::string kv;
    for (const auto& [k, v] : ckpt.config) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos)
            throw ContractError("checkpoint config entries must be single-line and '='-free keys");
        kv += k;
        kv += '=';
        kv += v;
        kv += '\n';
    }
    detail::put_u32(out, static_cast<std::uint32_t>(kv.size()));
    out += kv;

    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, tensor] : ckpt.params) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (int i = 0; i < tensor.rank(); ++i)
            detail::put_u32(out, static_cast<std::uint32_t>(tensor.dim(i)));
        detail::put_f32(out, tensor);
    }

    out.push_back(ckpt.has_optimizer ? 1 : 0);
    if (ckpt.has_optimizer) {
        if (ckpt.adam_m.size() != ckpt.params.size() || ckpt.adam_v.size() != ckpt.params.size())
            throw ContractError("optimizer state count does not match parameters");
        detail::put_u64(out, ckpt.optimizer_step);
        for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
            detail::put_f32(out, ckpt.adam_m[i]);
            detail::put_f32(out, ckpt.adam_v[i]);
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(std::string data) {
    detail::Reader r(std::move(data));
    if (r.bytes(4) != "DAMO") throw LoadError("not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != Checkpoint::kVersion)
        throw LoadError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    const std::string kv = r.bytes(r.u32());
    std::size_t start = 0;
    while (start < kv.size()) {
        const std::size_t nl = kv.find('\n', start);
        if (nl == std::string::npos) throw LoadError("checkpoint config block not newline-terminated");
        const std::string line = kv.substr(start, nl - start);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw LoadError("checkpoint config line missing '='");
        ckpt.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
        start = nl + 1;
    }

    const std::uint32_t count = r.u32();
    std::vector<Shape> shapes;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.u32());
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw LoadError("implausible parameter rank in checkpoint");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t extent = r.u32();
            if (extent == 0 || extent > (1u << 28)) throw LoadError("implausible extent in checkpoint");
            shape.push_back(static_cast<int>(extent));
        }
        shapes.push_back(shape);
        ckpt.params.emplace_back(name, r.f32(shape));
    }

    const std::string flag = r.bytes(1);
    if (flag[0] == 1) {
        ckpt.has_optimizer = true;
        ckpt.optimizer_step = r.u64();
        for (std::uint32_t i = 0; i < count; ++i) {
            ckpt.adam_m.push_back(r.f32(shapes[i]));
            ckpt.adam_v.push_back(r.f32(shapes[i]));
        }
    } else if (flag[0] != 0) {
        throw LoadError("corrupt optimizer flag in checkpoint");
    }
    if (!r.done()) throw LoadError("trailing bytes after checkpoint payload");
    return ckpt;
}

inline void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string blob = serialize_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw DataError("failed writing checkpoint to '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return deserialize_checkpoint(buf.str());
}

// ---------------------------------------------------------------------------
// ModelConfig <-> key-value snapshot
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void store_model_config(Checkpoint& ckpt, const ModelConfig& cfg) {
    ckpt.set_config("vocab_size", std::to_string(cfg.vocab_size));
    ckpt.set_config("d_model", std::to_string(cfg.d_model));
    ckpt.set_config("d_ff", std::to_string(cfg.d_ff));
    ckpt.set_config("heads", std::to_string(cfg.heads));
    ckpt.set_config("blocks", std::to_string(cfg.blocks));
    ckpt.set_config("experts", std::to_string(cfg.experts));
    ckpt.set_config("l_max", std::to_string(cfg.l_max));
    ckpt.set_config("capacity_factor", format_double(cfg.capacity_factor));
    ckpt.set_config("router_mode", cfg.router_mode == RouterMode::dynamic ? "dynamic" : "fixed");
    ckpt.set_config("fixed_k", std::to_string(cfg.fixed_k));
    ckpt.set_config("head", cfg.head == HeadKind::lm ? "lm" : "classifier");
    ckpt.set_config("num_classes", std::to_string(cfg.num_classes));
    ckpt.set_config("activation", cfg.activation == Activation::relu ? "relu" : "gelu");
    ckpt.set_config("causal", cfg.causal ? "1" : "0");
    ckpt.set_config("aux_loss_weight", format_double(cfg.aux_loss_weight));
    ckpt.set_config("renorm_gates", cfg.renorm_gates ? "1" : "0");
    ckpt.set_config("seed", std::to_string(cfg.seed));
}

inline ModelConfig load_model_config(const Checkpoint& ckpt) {
    ModelConfig cfg;
    auto geti = [&](const char* k) { return std::stoi(ckpt.config_value(k)); };
    auto getd = [&](const char* k) { return std::stod(ckpt.config_value(k)); };
    cfg.vocab_size = geti("vocab_size");
    cfg.d_model = geti("d_model");
    cfg.d_ff = geti("d_ff");
    cfg.heads = geti("heads");
    cfg.blocks = geti("blocks");
    cfg.experts = geti("experts");
    cfg.l_max = geti("l_max");
    cfg.capacity_factor = getd("capacity_factor");
    cfg.router_mode = ckpt.config_value("router_mode") == "fixed" ? RouterMode::fixed : RouterMode::dynamic;
    cfg.fixed_k = geti("fixed_k");
    cfg.head = ckpt.config_value("head") == "classifier" ? HeadKind::classifier : HeadKind::lm;
    cfg.num_classes = geti("num_classes");
    cfg.activation = ckpt.config_value("activation") == "gelu" ? Activation::gelu : Activation::relu;
    cfg.causal = ckpt.config_value("causal") == "1";
    cfg.aux_loss_weight = getd("aux_loss_weight");
    cfg.renorm_gates = ckpt.config_value("renorm_gates") == "1";
    cfg.seed = std::stoull(ckpt.config_value("seed"));
    cfg.validate();
    return cfg;
}

inline Checkpoint snapshot_model(const Model<float>& model, const AdamState<float>* adam = nullptr) {
    Checkpoint ckpt;
    store_model_config(ckpt, model.config());
    for (const Param<float>& p : model.params()) ckpt.params.emplace_back(p.name, p.value);
    if (adam) {
        ckpt.has_optimizer = true;
        ckpt.optimizer_step = adam->step;
        ckpt.adam_m = adam->m;
        ckpt.adam_v = adam->v;
    }
    return ckpt;
}

/// Rebuilds a model from a snapshot; parameter names and shapes must match
/// what the config implies.
inline Model<float> restore_model(const Checkpoint& ckpt) {
    Model<float> model(load_model_config(ckpt));
    auto& params = model.params();
    if (params.size() != ckpt.params.size())
        throw LoadError("checkpoint parameter count does not match config");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, tensor] = ckpt.params[i];
        if (name != params[i].name)
            throw LoadError("checkpoint parameter order mismatch at '" + name + "'");
        if (!tensor.same_shape(params[i].value))
            throw LoadError("shape mismatch for parameter '" + name + "': checkpoint has " +
                            shape_str(tensor.shape()) + ", model expects " +
                            shape_str(params[i].value.shape()));
        params[i].value = tensor;
    }
    return model;
}

inline AdamState<float> restore_adam(const Checkpoint& ckpt, const Model<float>& model) {
    AdamState<float> state(model.params());
    if (!ckpt.has_optimizer) return state;
    state.step = ckpt.optimizer_step;
    state.m = ckpt.adam_m;
    state.v = ckpt.adam_v;
    return state;
}

} // namespace damoe
