#include "tensorlens/modelio.hpp"

#include "tensorlens/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace tensorlens {

using json = nlohmann::json;

std::string_view to_string(Dtype d) {
    return d == Dtype::f32 ? "f32" : "f64";
}

std::size_t RawTensor::element_count() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

const RawTensor* Container::find(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

namespace {

constexpr std::size_t kHeaderSize = 16;

std::size_t dtype_size(Dtype d) {
    return d == Dtype::f32 ? 4 : 8;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

// Checked product of a shape; nullopt on overflow.
std::optional<std::size_t> checked_count(const std::vector<std::size_t>& shape, std::size_t elem) {
    std::size_t n = elem;
    for (std::size_t s : shape) {
        if (s != 0 && n > std::numeric_limits<std::size_t>::max() / s) return std::nullopt;
        n *= s;
    }
    return n;
}

} // namespace

std::vector<std::uint8_t> encode_container(const Container& c) {
    json meta;
    try {
        meta["config"] = json::parse(c.config_json);
    } catch (const json::exception& e) {
        throw MetadataError(std::string("config is not valid JSON: ") + e.what());
    }
    meta["tensors"] = json::array();
    std::size_t offset = 0;
    std::map<std::string, bool> seen;
    for (const auto& t : c.tensors) {
        if (!seen.emplace(t.name, true).second) throw MetadataError("duplicate tensor name '" + t.name + "'");
        if (t.values.size() != t.element_count()) {
            throw ShapeMismatchError(t.name + ": value count does not match shape");
        }
        meta["tensors"].push_back(
            {{"name", t.name}, {"dtype", to_string(t.dtype)}, {"shape", t.shape}, {"byte_offset", offset}});
        offset += t.values.size() * dtype_size(t.dtype);
    }
    const std::string text = meta.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kHeaderSize + text.size() + offset);
    out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
    put<std::uint32_t>(out, kContainerVersion);
    put<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : c.tensors) {
        for (double v : t.values) {
            if (t.dtype == Dtype::f32) {
                put<float>(out, static_cast<float>(v));
            } else {
                put<double>(out, v);
            }
        }
    }
    return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
        throw BadMagicError("not a tensorlens container (bad magic)");
    }
    if (bytes.size() < kHeaderSize) {
        throw TruncatedPayloadError("file too short for header (" + std::to_string(bytes.size()) + " bytes)");
    }
    const auto version = get<std::uint32_t>(bytes.data() + 4);
    if (version != kContainerVersion) {
        throw VersionMismatchError("container version " + std::to_string(version) + ", expected " +
                                   std::to_string(kContainerVersion));
    }
    const auto meta_len = get<std::uint64_t>(bytes.data() + 8);
    if (meta_len > bytes.size() - kHeaderSize) {
        throw TruncatedPayloadError("metadata length " + std::to_string(meta_len) + " exceeds file size");
    }
    const std::size_t payload_start = kHeaderSize + static_cast<std::size_t>(meta_len);
    const std::size_t payload_size = bytes.size() - payload_start;

    json meta;
    try {
        meta = json::parse(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
    } catch (const json::exception& e) {
        throw MetadataError(std::string("metadata is not valid JSON: ") + e.what());
    }
    if (!meta.is_object() || !meta.contains("config") || !meta["config"].is_object() ||
        !meta.contains("tensors") || !meta["tensors"].is_array()) {
        throw MetadataError("metadata must be an object with 'config' and 'tensors'");
    }

    Container c;
    c.config_json = meta["config"].dump();
    struct Extent {
        std::size_t begin, end;
        std::string name;
    };
    std::vector<Extent> extents;
    std::map<std::string, bool> seen;
    std::size_t extent_end = 0;
    for (const auto& entry : meta["tensors"]) {
        if (!entry.is_object()) throw MetadataError("tensor entry is not an object");
        const auto name = entry.find("name");
        const auto dtype = entry.find("dtype");
        const auto shape = entry.find("shape");
        const auto offset = entry.find("byte_offset");
        if (name == entry.end() || !name->is_string() || dtype == entry.end() || !dtype->is_string() ||
            shape == entry.end() || !shape->is_array() || offset == entry.end() ||
            !offset->is_number_unsigned()) {
            throw MetadataError("tensor entry needs name, dtype, shape and byte_offset");
        }
        RawTensor t;
        t.name = name->get<std::string>();
        if (!seen.emplace(t.name, true).second) throw MetadataError("duplicate tensor name '" + t.name + "'");
        const auto ds = dtype->get<std::string>();
        if (ds == "f32") {
            t.dtype = Dtype::f32;
        } else if (ds == "f64") {
            t.dtype = Dtype::f64;
        } else {
            throw MetadataError(t.name + ": unsupported dtype '" + ds + "'");
        }
        for (const auto& s : *shape) {
            if (!s.is_number_unsigned()) throw ShapeMismatchError(t.name + ": shape entries must be unsigned");
            t.shape.push_back(s.get<std::size_t>());
        }
        const auto nbytes = checked_count(t.shape, dtype_size(t.dtype));
        if (!nbytes) throw ShapeMismatchError(t.name + ": shape overflows");
        const auto begin = offset->get<std::uint64_t>();
        if (begin > payload_size || *nbytes > payload_size - begin) {
            throw TruncatedPayloadError(t.name + ": extends past the end of the payload");
        }
        const std::size_t b = static_cast<std::size_t>(begin);
        extents.push_back({b, b + *nbytes, t.name});
        extent_end = std::max(extent_end, b + *nbytes);
        const std::uint8_t* p = bytes.data() + payload_start + b;
        const std::size_t n = *nbytes / dtype_size(t.dtype);
        t.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            t.values[i] = t.dtype == Dtype::f32 ? static_cast<double>(get<float>(p + 4 * i)) : get<double>(p + 8 * i);
        }
        c.tensors.push_back(std::move(t));
    }
    std::sort(extents.begin(), extents.end(), [](const Extent& a, const Extent& b) { return a.begin < b.begin; });
    for (std::size_t k = 1; k < extents.size(); ++k) {
        if (extents[k].begin < extents[k - 1].end) {
            throw MetadataError("tensors '" + extents[k - 1].name + "' and '" + extents[k].name + "' overlap");
        }
    }
    if (extent_end != payload_size) {
        throw MetadataError("payload has " + std::to_string(payload_size - extent_end) + " trailing bytes");
    }
    return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Config and model

std::string config_to_json(const ModelConfig& c) {
    json j{{"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"d_model", c.d_model},
           {"d_head", c.d_head},
           {"d_ff", c.d_ff},
           {"max_len", c.max_len},
           {"vocab", c.vocab},
           {"norm_placement", to_string(c.norm_placement)},
           {"activation", to_string(c.activation)},
           {"causal", c.causal},
           {"ln_epsilon", c.ln_epsilon},
           {"use_biases", c.use_biases},
           {"attn_scale", c.attn_scale},
           {"final_norm", c.final_norm}};
    j["mask_token"] = c.mask_token ? json(*c.mask_token) : json(nullptr);
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw MetadataError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw MetadataError("config must be an object");
    auto require = [&](const char* key) -> const json& {
        const auto it = j.find(key);
        if (it == j.end()) throw MetadataError(std::string("config is missing '") + key + "'");
        return *it;
    };
    auto size = [&](const char* key) {
        const json& v = require(key);
        if (!v.is_number_unsigned()) throw MetadataError(std::string("config '") + key + "' must be unsigned");
        return v.get<std::size_t>();
    };
    auto boolean = [&](const char* key, bool fallback) {
        const auto it = j.find(key);
        if (it == j.end()) return fallback;
        if (!it->is_boolean()) throw MetadataError(std::string("config '") + key + "' must be boolean");
        return it->get<bool>();
    };
    auto text_of = [&](const char* key) {
        const json& v = require(key);
        if (!v.is_string()) throw MetadataError(std::string("config '") + key + "' must be a string");
        return v.get<std::string>();
    };
    ModelConfig c;
    c.n_layers = size("n_layers");
    c.n_heads = size("n_heads");
    c.d_model = size("d_model");
    c.d_head = size("d_head");
    c.d_ff = size("d_ff");
    c.max_len = size("max_len");
    c.vocab = size("vocab");
    try {
        c.norm_placement = parse_norm_placement(text_of("norm_placement"));
        c.activation = parse_activation(text_of("activation"));
    } catch (const ValueError& e) {
        throw MetadataError(e.what());
    }
    c.causal = boolean("causal", false);
    const json& eps = require("ln_epsilon");
    if (!eps.is_number()) throw MetadataError("config 'ln_epsilon' must be a number");
    c.ln_epsilon = eps.get<double>();
    c.use_biases = boolean("use_biases", true);
    c.attn_scale = boolean("attn_scale", true);
    c.final_norm = boolean("final_norm", false);
    if (const auto it = j.find("mask_token"); it != j.end() && !it->is_null()) {
        if (!it->is_number_unsigned()) throw MetadataError("config 'mask_token' must be unsigned or null");
        c.mask_token = it->get<TokenId>();
    }
    try {
        c.validate();
    } catch (const ValueError& e) {
        throw MetadataError(std::string("invalid config: ") + e.what());
    }
    return c;
}

namespace {

RawTensor raw_matrix(std::string name, const DenseMatrix& m, Dtype dtype) {
    return {std::move(name), dtype, {m.rows(), m.cols()}, std::vector<double>(m.data().begin(), m.data().end())};
}

RawTensor raw_vector(std::string name, const Vector& v, Dtype dtype) {
    return {std::move(name), dtype, {v.size()}, v};
}

const RawTensor& need(const Container& c, const std::string& name) {
    const RawTensor* t = c.find(name);
    if (!t) throw MetadataError("missing tensor '" + name + "'");
    return *t;
}

void check_shape(const RawTensor& t, const std::vector<std::size_t>& shape) {
    if (t.shape != shape) {
        std::string want, got;
        for (auto s : shape) want += std::to_string(s) + ",";
        for (auto s : t.shape) got += std::to_string(s) + ",";
        throw ShapeMismatchError(t.name + ": expected shape [" + want + "] got [" + got + "]");
    }
}

DenseMatrix load_matrix(const Container& c, const std::string& name, std::size_t rows, std::size_t cols) {
    const RawTensor& t = need(c, name);
    check_shape(t, {rows, cols});
    return DenseMatrix(rows, cols, t.values);
}

Vector load_vector(const Container& c, const std::string& name, std::size_t n, bool optional_zero) {
    const RawTensor* t = c.find(name);
    if (!t) {
        if (optional_zero) return Vector(n, 0.0);
        throw MetadataError("missing tensor '" + name + "'");
    }
    check_shape(*t, {n});
    return t->values;
}

std::string layer_prefix(std::size_t n) {
    return "layers." + std::to_string(n) + ".";
}

} // namespace

Container container_from_model(const Model& model, Dtype dtype) {
    model.weights.validate(model.config);
    const auto& c = model.config;
    Container out;
    out.config_json = config_to_json(c);
    auto& ts = out.tensors;
    ts.push_back(raw_matrix("tok_embed", model.weights.tok_embed, dtype));
    ts.push_back(raw_matrix("pos_embed", model.weights.pos_embed, dtype));
    ts.push_back(raw_matrix("unembed", model.weights.unembed, dtype));
    if (c.final_norm) {
        ts.push_back(raw_vector("final_norm.gamma", model.weights.final_norm.gamma, dtype));
        ts.push_back(raw_vector("final_norm.beta", model.weights.final_norm.beta, dtype));
    }
    for (std::size_t n = 0; n < c.n_layers; ++n) {
        const auto& l = model.weights.layers[n];
        const std::string p = layer_prefix(n);
        ts.push_back(raw_matrix(p + "attn.w_q", l.w_q, dtype));
        ts.push_back(raw_matrix(p + "attn.w_k", l.w_k, dtype));
        ts.push_back(raw_matrix(p + "attn.w_v", l.w_v, dtype));
        ts.push_back(raw_matrix(p + "attn.w_o", l.w_o, dtype));
        ts.push_back(raw_vector(p + "attn.b_q", l.b_q, dtype));
        ts.push_back(raw_vector(p + "attn.b_k", l.b_k, dtype));
        ts.push_back(raw_vector(p + "attn.b_v", l.b_v, dtype));
        ts.push_back(raw_vector(p + "attn.b_o", l.b_o, dtype));
        ts.push_back(raw_matrix(p + "ffn.w_1", l.w_1, dtype));
        ts.push_back(raw_vector(p + "ffn.b_1", l.b_1, dtype));
        ts.push_back(raw_matrix(p + "ffn.w_2", l.w_2, dtype));
        ts.push_back(raw_vector(p + "ffn.b_2", l.b_2, dtype));
        ts.push_back(raw_vector(p + "ln1.gamma", l.ln1.gamma, dtype));
        ts.push_back(raw_vector(p + "ln1.beta", l.ln1.beta, dtype));
        ts.push_back(raw_vector(p + "ln2.gamma", l.ln2.gamma, dtype));
        ts.push_back(raw_vector(p + "ln2.beta", l.ln2.beta, dtype));
    }
    return out;
}

Model model_from_container(const Container& c) {
    Model m;
    m.config = config_from_json(c.config_json);
    const auto& cfg = m.config;
    const std::size_t D = cfg.d_model;
    const bool opt = !cfg.use_biases;
    auto& w = m.weights;
    w.tok_embed = load_matrix(c, "tok_embed", cfg.vocab, D);
    w.pos_embed = load_matrix(c, "pos_embed", cfg.max_len, D);
    w.unembed = load_matrix(c, "unembed", D, cfg.vocab);
    if (cfg.final_norm) {
        w.final_norm.gamma = load_vector(c, "final_norm.gamma", D, false);
        w.final_norm.beta = load_vector(c, "final_norm.beta", D, opt);
    }
    w.layers.resize(cfg.n_layers);
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
        auto& l = w.layers[n];
        const std::string p = layer_prefix(n);
        l.w_q = load_matrix(c, p + "attn.w_q", D, D);
        l.w_k = load_matrix(c, p + "attn.w_k", D, D);
        l.w_v = load_matrix(c, p + "attn.w_v", D, D);
        l.w_o = load_matrix(c, p + "attn.w_o", D, D);
        l.b_q = load_vector(c, p + "attn.b_q", D, opt);
        l.b_k = load_vector(c, p + "attn.b_k", D, opt);
        l.b_v = load_vector(c, p + "attn.b_v", D, opt);
        l.b_o = load_vector(c, p + "attn.b_o", D, opt);
        l.w_1 = load_matrix(c, p + "ffn.w_1", D, cfg.d_ff);
        l.b_1 = load_vector(c, p + "ffn.b_1", cfg.d_ff, opt);
        l.w_2 = load_matrix(c, p + "ffn.w_2", cfg.d_ff, D);
        l.b_2 = load_vector(c, p + "ffn.b_2", D, opt);
        l.ln1.gamma = load_vector(c, p + "ln1.gamma", D, false);
        l.ln1.beta = load_vector(c, p + "ln1.beta", D, opt);
        l.ln2.gamma = load_vector(c, p + "ln2.gamma", D, false);
        l.ln2.beta = load_vector(c, p + "ln2.beta", D, opt);
    }
    if (!cfg.use_biases) {
        auto nonzero = [](const Vector& v) {
            return std::any_of(v.begin(), v.end(), [](double x) { return x != 0.0; });
        };
        for (const auto& l : w.layers) {
            if (nonzero(l.b_q) || nonzero(l.b_k) || nonzero(l.b_v) || nonzero(l.b_o) || nonzero(l.b_1) ||
                nonzero(l.b_2) || nonzero(l.ln1.beta) || nonzero(l.ln2.beta)) {
                throw MetadataError("use_biases is false but bias tensors are non-zero");
            }
        }
    }
    try {
        w.validate(cfg);
    } catch (const ShapeMismatchError&) {
        throw;
    } catch (const ValueError& e) {
        throw MetadataError(std::string("invalid weights: ") + e.what());
    }
    return m;
}

void save_model(const Model& model, const std::filesystem::path& path, Dtype dtype) {
    write_file_bytes(path, encode_container(container_from_model(model, dtype)));
}

Model load_model(const std::filesystem::path& path) {
    return model_from_container(decode_container(read_file_bytes(path)));
}

// ---------------------------------------------------------------------------
// Fixtures

namespace {

// Appends `m` to a stacked tensor (leading P dimension when stacked).
void stack_into(RawTensor& t, const DenseMatrix& m) {
    t.values.insert(t.values.end(), m.data().begin(), m.data().end());
}

std::vector<DenseMatrix> unstack(const RawTensor& t, std::size_t count, std::size_t rows, std::size_t cols) {
    const bool stacked = count > 1 || t.shape.size() == 3;
    if (stacked) {
        check_shape(t, {count, rows, cols});
    } else {
        check_shape(t, {rows, cols});
    }
    std::vector<DenseMatrix> out;
    for (std::size_t p = 0; p < count; ++p) {
        const auto first = t.values.begin() + static_cast<std::ptrdiff_t>(p * rows * cols);
        out.emplace_back(rows, cols, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * cols)));
    }
    return out;
}

} // namespace

Container fixture_container(const Model& model, const std::vector<TokenSequence>& inputs, bool with_goldens,
                            Dtype golden_dtype) {
    if (inputs.empty()) throw ValueError("fixture needs at least one input");
    const std::size_t L = inputs.front().ids.size();
    for (const auto& in : inputs) {
        if (in.ids.size() != L) throw DimensionError("fixture inputs must share one length");
        validate_tokens(in, model.config);
    }
    Container c = container_from_model(model, Dtype::f64);
    const std::size_t P = inputs.size();
    const bool stacked = P > 1;
    RawTensor tokens{"input_tokens", Dtype::f32, stacked ? std::vector<std::size_t>{P, L} : std::vector<std::size_t>{L},
                     {}};
    for (const auto& in : inputs)
        for (TokenId id : in.ids) tokens.values.push_back(static_cast<double>(id));
    c.tensors.push_back(std::move(tokens));
    if (!with_goldens) return c;

    const auto& cfg = model.config;
    const std::size_t D = cfg.d_model;
    const Dtype gd = golden_dtype;
    auto shape_of = [&](std::size_t r, std::size_t k) {
        return stacked ? std::vector<std::size_t>{P, r, k} : std::vector<std::size_t>{r, k};
    };
    std::vector<RawTensor> hidden(cfg.n_layers + 1);
    for (std::size_t n = 0; n <= cfg.n_layers; ++n) hidden[n] = {"golden_hidden_" + std::to_string(n), gd, shape_of(L, D), {}};
    RawTensor logits{"golden_logits", gd, shape_of(L, cfg.vocab), {}};
    std::vector<RawTensor> attn;
    for (std::size_t n = 0; n < cfg.n_layers; ++n)
        for (std::size_t h = 0; h < cfg.n_heads; ++h)
            attn.push_back({"golden_attn_" + std::to_string(n) + "_" + std::to_string(h), gd, shape_of(L, L), {}});
    for (const auto& in : inputs) {
        const ForwardResult f = model_forward(in, model);
        for (std::size_t n = 0; n < cfg.n_layers; ++n) {
            stack_into(hidden[n], f.trace.layers[n].input);
            for (std::size_t h = 0; h < cfg.n_heads; ++h) stack_into(attn[n * cfg.n_heads + h], f.trace.layers[n].attention[h]);
        }
        stack_into(hidden[cfg.n_layers], f.trace.final_hidden);
        stack_into(logits, f.logits);
    }
    auto round = [&](RawTensor& t) {
        if (t.dtype == Dtype::f32)
            for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
    };
    for (auto& t : hidden) {
        round(t);
        c.tensors.push_back(std::move(t));
    }
    round(logits);
    c.tensors.push_back(std::move(logits));
    for (auto& t : attn) {
        round(t);
        c.tensors.push_back(std::move(t));
    }
    return c;
}

Fixture fixture_from_container(const Container& c) {
    Fixture f;
    f.model = model_from_container(c);
    const auto& cfg = f.model.config;
    const RawTensor& tokens = need(c, "input_tokens");
    if (tokens.shape.empty() || tokens.shape.size() > 2 || tokens.element_count() == 0) {
        throw ShapeMismatchError("input_tokens must have shape [L] or [P, L]");
    }
    const std::size_t P = tokens.shape.size() == 2 ? tokens.shape[0] : 1;
    const std::size_t L = tokens.shape.back();
    for (std::size_t p = 0; p < P; ++p) {
        TokenSequence seq;
        for (std::size_t l = 0; l < L; ++l) {
            const double v = tokens.values[p * L + l];
            if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(cfg.vocab)) {
                throw MetadataError("input_tokens holds a non-token value " + std::to_string(v));
            }
            seq.ids.push_back(static_cast<TokenId>(v));
        }
        f.inputs.push_back(std::move(seq));
    }
    const bool has_goldens = c.find("golden_logits") != nullptr;
    if (!has_goldens) return f;

    f.goldens.resize(P);
    for (std::size_t n = 0; n <= cfg.n_layers; ++n) {
        auto ms = unstack(need(c, "golden_hidden_" + std::to_string(n)), P, L, cfg.d_model);
        for (std::size_t p = 0; p < P; ++p) f.goldens[p].hidden.push_back(std::move(ms[p]));
    }
    auto logits = unstack(need(c, "golden_logits"), P, L, cfg.vocab);
    for (std::size_t p = 0; p < P; ++p) {
        f.goldens[p].logits = std::move(logits[p]);
        f.goldens[p].attn.resize(cfg.n_layers);
    }
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::string name = "golden_attn_" + std::to_string(n) + "_" + std::to_string(h);
            const RawTensor* t = c.find(name);
            if (!t) continue;
            auto ms = unstack(*t, P, L, L);
            for (std::size_t p = 0; p < P; ++p) f.goldens[p].attn[n].push_back(std::move(ms[p]));
        }
    }
    return f;
}

Fixture load_fixture(const std::filesystem::path& path) {
    return fixture_from_container(decode_container(read_file_bytes(path)));
}

GoldenCheck compare_goldens(const Model& model, const Fixture& fixture, double tolerance) {
    GoldenCheck out;
    auto consider = [&](const DenseMatrix& ours, const DenseMatrix& golden, const std::string& name) {
        if (ours.rows() != golden.rows() || ours.cols() != golden.cols()) {
            throw ShapeMismatchError(name + ": golden shape differs from the forward pass");
        }
        const double rel = frobenius_norm(ours - golden) / std::max(frobenius_norm(golden), 1e-12);
        const double r = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        if (r > out.max_rel_error || out.worst.empty()) {
            out.max_rel_error = r;
            out.worst = name;
        }
    };
    for (std::size_t p = 0; p < fixture.goldens.size(); ++p) {
        const ForwardResult f = model_forward(fixture.inputs.at(p), model);
        const Golden& g = fixture.goldens[p];
        const std::string tag = fixture.goldens.size() > 1 ? "[" + std::to_string(p) + "]" : "";
        for (std::size_t n = 0; n < g.hidden.size(); ++n) {
            const DenseMatrix& ours = n < model.config.n_layers ? f.trace.layers.at(n).input : f.trace.final_hidden;
            consider(ours, g.hidden[n], "golden_hidden_" + std::to_string(n) + tag);
        }
        if (g.logits) consider(f.logits, *g.logits, "golden_logits" + tag);
        for (std::size_t n = 0; n < g.attn.size(); ++n)
            for (std::size_t h = 0; h < g.attn[n].size(); ++h)
                consider(f.trace.layers.at(n).attention.at(h), g.attn[n][h],
                         "golden_attn_" + std::to_string(n) + "_" + std::to_string(h) + tag);
    }
    out.pass = out.max_rel_error <= tolerance;
    return out;
}

// ---------------------------------------------------------------------------
// Map export

void write_map_csv(std::ostream& out, const DenseMatrix& map) {
    out << "i,j,value\n";
    char buf[64];
    for (std::size_t i = 0; i < map.rows(); ++i) {
        for (std::size_t j = 0; j < map.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", map(i, j));
            out << i << ',' << j << ',' << buf << '\n';
        }
    }
}

DenseMatrix read_map_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "i,j,value") throw FormatError("map CSV must start with 'i,j,value'");
    std::vector<std::tuple<std::size_t, std::size_t, double>> cells;
    std::size_t rows = 0, cols = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t i = 0, j = 0;
        char value[64] = {};
        if (std::sscanf(line.c_str(), "%zu,%zu,%63s", &i, &j, value) != 3) {
            throw FormatError("bad map CSV line '" + line + "'");
        }
        cells.emplace_back(i, j, std::strtod(value, nullptr));
        rows = std::max(rows, i + 1);
        cols = std::max(cols, j + 1);
    }
    if (cells.size() != rows * cols) throw FormatError("map CSV does not cover a full grid");
    DenseMatrix m(rows, cols);
    for (const auto& [i, j, v] : cells) m(i, j) = v;
    return m;
}

std::vector<std::uint8_t> encode_map_raw(const DenseMatrix& map) {
    if (map.rows() != map.cols()) throw DimensionError("raw map export expects a square L x L map");
    std::vector<std::uint8_t> out;
    put<std::uint64_t>(out, map.rows());
    for (double v : map.data()) put<double>(out, v);
    return out;
}

DenseMatrix decode_map_raw(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw TruncatedPayloadError("raw map shorter than its header");
    const auto L = get<std::uint64_t>(bytes.data());
    const auto body = bytes.size() - 8;
    if (L > 0 && (L > body / 8 / L || L * L * 8 != body)) {
        throw TruncatedPayloadError("raw map size does not match L = " + std::to_string(L));
    }
    if (L == 0 && body != 0) throw TruncatedPayloadError("raw map has trailing bytes");
    DenseMatrix m(L, L);
    for (std::size_t k = 0; k < L * L; ++k) m.data()[k] = get<double>(bytes.data() + 8 + 8 * k);
    return m;
}

// ---------------------------------------------------------------------------
// Dataset

std::vector<DatasetRecord> parse_dataset(std::istream& in) {
    std::vector<DatasetRecord> out;
    std::string line;
    std::size_t lineno = 0;
    auto token = [&](const json& v, const char* what) {
        if (!v.is_number_unsigned() || v.get<std::uint64_t>() > std::numeric_limits<TokenId>::max()) {
            throw DatasetError(lineno, std::string(what) + " must be a non-negative token id");
        }
        return v.get<TokenId>();
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DatasetError(lineno, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw DatasetError(lineno, "record must be a JSON object");
        DatasetRecord r;
        const auto toks = j.find("tokens");
        if (toks == j.end() || !toks->is_array() || toks->empty()) {
            throw DatasetError(lineno, "'tokens' must be a non-empty array");
        }
        for (const auto& t : *toks) r.tokens.ids.push_back(token(t, "tokens entry"));
        if (const auto it = j.find("label"); it != j.end() && !it->is_null()) r.label = token(*it, "label");
        if (const auto it = j.find("relation"); it != j.end() && !it->is_null()) {
            if (it->is_string()) {
                r.relation = it->get<std::string>();
            } else if (it->is_number_integer()) {
                r.relation = std::to_string(it->get<long long>());
            } else {
                throw DatasetError(lineno, "'relation' must be a string or integer");
            }
        }
        if (const auto it = j.find("subject_span"); it != j.end() && !it->is_null()) {
            if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_unsigned() ||
                !(*it)[1].is_number_unsigned()) {
                throw DatasetError(lineno, "'subject_span' must be [start, end]");
            }
            const auto a = (*it)[0].get<std::size_t>();
            const auto b = (*it)[1].get<std::size_t>();
            if (a > b || b > r.tokens.ids.size()) throw DatasetError(lineno, "'subject_span' outside tokens");
            r.subject_span = std::pair{a, b};
        }
        if (const auto it = j.find("object_token"); it != j.end() && !it->is_null()) {
            r.object_token = token(*it, "object_token");
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
    return parse_dataset(in);
}

void write_dataset(std::ostream& out, const std::vector<DatasetRecord>& records) {
    for (const auto& r : records) {
        json j;
        j["tokens"] = r.tokens.ids;
        if (r.label) j["label"] = *r.label;
        if (r.relation) j["relation"] = *r.relation;
        if (r.subject_span) j["subject_span"] = {r.subject_span->first, r.subject_span->second};
        if (r.object_token) j["object_token"] = *r.object_token;
        out << j.dump() << '\n';
    }
}

std::vector<RelationSet> relation_sets(const std::vector<DatasetRecord>& records) {
    std::vector<std::pair<std::string, RelationExample>> items;
    for (const auto& r : records) {
        if (!r.relation || !r.object_token) continue;
        RelationExample e;
        e.prompt = r.tokens;
        e.subject_span = r.subject_span.value_or(std::pair<std::size_t, std::size_t>{0, 0});
        e.object = *r.object_token;
        items.emplace_back(*r.relation, std::move(e));
    }
    return group_relations(std::move(items));
}

} // namespace tensorlens
