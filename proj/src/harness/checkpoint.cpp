#include "psep/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace psep {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u64(d);
        for (double v : t.data()) f32(static_cast<float>(v));
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}
    void bytes(void* p, std::size_t n) {
        if (pos_ + n > in_.size()) throw CheckpointError("checkpoint truncated");
        std::memcpy(p, in_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    std::string str() {
        const std::uint32_t n = u32();
        if (pos_ + n > in_.size()) throw CheckpointError("checkpoint truncated");
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Tensor tensor(std::string& name) {
        name = str();
        const std::uint32_t rank = u32();
        if (rank > 8) throw CheckpointError("checkpoint: implausible rank for " + name);
        Shape shape(rank);
        for (auto& d : shape) d = u64();
        const std::size_t n = numel(shape);
        if (n * 4 > in_.size() - pos_) throw CheckpointError("checkpoint truncated in tensor " + name);
        Tensor t(shape);
        for (double& v : t.data()) v = f32();
        return t;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::string& in_;
    std::size_t pos_ = 0;
};

constexpr const char* kAdamM = "adam.m.";
constexpr const char* kAdamV = "adam.v.";

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kCheckpointMagic, 5);
    w.u32(kCheckpointVersion);
    KeyValues echo = to_key_values(ckpt.config);
    std::size_t tensor_count = ckpt.params.size();
    if (ckpt.state) {
        echo["state.next_epoch"] = std::to_string(ckpt.state->next_epoch);
        echo["state.adam_steps"] = std::to_string(ckpt.state->adam.steps);
        tensor_count += ckpt.state->adam.m.size() + ckpt.state->adam.v.size();
    }
    w.str(format_key_values(echo));
    w.u32(static_cast<std::uint32_t>(tensor_count));
    for (const auto& [name, t] : ckpt.params) w.tensor(name, t);
    if (ckpt.state) {
        for (const auto& [name, t] : ckpt.state->adam.m) w.tensor(kAdamM + name, t);
        for (const auto& [name, t] : ckpt.state->adam.v) w.tensor(kAdamV + name, t);
    }
    w.u32(static_cast<std::uint32_t>(ckpt.class_of.size()));
    for (std::size_t c : ckpt.class_of) w.u32(static_cast<std::uint32_t>(c));
    w.u32(static_cast<std::uint32_t>(ckpt.sources.size()));
    for (const auto& s : ckpt.sources) {
        w.u8(s ? 1 : 0);
        w.u64(s ? s->image_id : 0);
        w.u32(s ? static_cast<std::uint32_t>(s->y) : 0);
        w.u32(s ? static_cast<std::uint32_t>(s->x) : 0);
        w.f32(s ? static_cast<float>(s->attention) : 0.0f);
    }
    return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    char magic[5];
    r.bytes(magic, 5);
    if (std::memcmp(magic, kCheckpointMagic, 5) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    KeyValues echo = parse_key_values(r.str());
    std::optional<TrainingState> state;
    if (echo.count("state.next_epoch")) {
        state.emplace();
        state->next_epoch = std::stoul(echo.at("state.next_epoch"));
        state->adam.steps = std::stoull(echo.at("state.adam_steps"));
        echo.erase("state.next_epoch");
        echo.erase("state.adam_steps");
    }
    try {
        apply_keys(ckpt.config, echo);
        ckpt.config.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }

    const Model reference(ckpt.config.resolved_model(), 0);
    const auto expected = reference.parameter_shapes();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name;
        Tensor t = r.tensor(name);
        std::string base = name;
        std::map<std::string, Tensor>* slot = nullptr;
        if (name.rfind(kAdamM, 0) == 0 || name.rfind(kAdamV, 0) == 0) {
            if (!state) throw CheckpointError("optimizer tensor '" + name + "' without training state");
            const bool is_m = name.rfind(kAdamM, 0) == 0;
            base = name.substr(std::strlen(is_m ? kAdamM : kAdamV));
            slot = is_m ? &state->adam.m : &state->adam.v;
        }
        auto it = expected.find(base);
        if (it == expected.end()) throw CheckpointError("unknown tensor '" + name + "' in checkpoint");
        if (it->second != t.shape()) {
            throw CheckpointError("tensor '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                                  to_string(it->second));
        }
        auto& dest = slot ? *slot : ckpt.params;
        if (!dest.emplace(base, std::move(t)).second) throw CheckpointError("duplicate tensor '" + name + "'");
    }
    for (const auto& [name, shape] : expected) {
        if (!ckpt.params.count(name)) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    }

    const std::uint32_t m = r.u32();
    for (std::uint32_t i = 0; i < m; ++i) ckpt.class_of.push_back(r.u32());
    if (ckpt.class_of != reference.class_of()) throw CheckpointError("checkpoint prototype classes do not match config");
    const std::uint32_t ms = r.u32();
    if (ms != m) throw CheckpointError("checkpoint provenance count mismatch");
    for (std::uint32_t i = 0; i < ms; ++i) {
        const bool has = r.u8() != 0;
        PatchSource s;
        s.image_id = r.u64();
        s.y = r.u32();
        s.x = r.u32();
        s.attention = r.f32();
        ckpt.sources.push_back(has ? std::optional<PatchSource>(s) : std::nullopt);
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
    ckpt.state = std::move(state);
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    const std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const TrainConfig& cfg, const Model& model, std::optional<TrainingState> state) {
    Checkpoint c;
    c.config = cfg;
    c.params = model.params();
    c.class_of = model.class_of();
    c.sources = model.sources();
    c.state = std::move(state);
    return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model model(ckpt.config.resolved_model(), 0);
    model.params() = ckpt.params;
    model.set_sources(ckpt.sources);
    return model;
}

}  // namespace psep
