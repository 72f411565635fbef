#include "cli.hpp"

#include "tensorlens/collapse.hpp"
#include "tensorlens/error.hpp"
#include "tensorlens/eval.hpp"
#include "tensorlens/modelio.hpp"
#include "tensorlens/toy.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#ifndef TENSORLENS_VERSION
#define TENSORLENS_VERSION "0.0.0"
#endif

namespace tensorlens::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvariantFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string command;
    std::string model;
    std::string dataset;
    std::string methods = "tensor_norm";
    std::string bias_mode = "without";
    std::string fractions = "0,0.05,0.1,0.15,0.2,0.25,0.3";
    std::string class_spec = "pred";
    std::string layers;
    std::uint64_t seed = 0;
    std::string out;  // empty: "tensorlens_out" for commands that write artifacts
    std::size_t threads = 1;
    std::string target = "first";
    std::string format = "csv";
    std::size_t m = 3;
    std::size_t splits = 6;
    std::size_t top_k = 0;
    bool test_on_train = false;
    std::size_t trials = 100;
    std::string eps_norms = "1e-3,1e-2,1e-1,1";
    std::size_t samples = 2;
    std::size_t sample_len = 6;
    std::optional<std::size_t> example;
    std::optional<TokenId> mask_id;

    // random-model / toy
    ModelConfig model_config;
    bool no_biases = false;
    std::string placement = "post_ln";
    std::string activation = "gelu";
    std::size_t fixture_inputs = 0;
    std::string task = "classify";
    std::size_t steps = 1500;
    std::size_t n_examples = 0;

    json to_json() const {
        json j{{"command", command},     {"model", model},       {"dataset", dataset},
               {"methods", methods},     {"bias_mode", bias_mode}, {"fractions", fractions},
               {"class", class_spec},    {"layers", layers},     {"seed", seed},
               {"threads", threads},     {"target", target},     {"format", format},
               {"m", m},                 {"splits", splits},     {"top_k", top_k},
               {"test_on_train", test_on_train}, {"trials", trials}, {"eps_norms", eps_norms},
               {"samples", samples},     {"sample_len", sample_len}};
        j["example"] = example ? json(*example) : json(nullptr);
        j["mask_id"] = mask_id ? json(*mask_id) : json(nullptr);
        return j;
    }
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> parse_doubles(const std::string& s, const char* what) {
    std::vector<double> out;
    for (const auto& item : split_list(s)) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw UsageError(std::string("bad number '") + item + "' in " + what);
        out.push_back(v);
    }
    if (out.empty()) throw UsageError(std::string(what) + " is empty");
    return out;
}

std::optional<LayerRange> parse_layers(const std::string& s, const ModelConfig& c) {
    if (s.empty()) return std::nullopt;
    const auto dots = s.find("..");
    if (dots == std::string::npos) throw UsageError("--layers expects n1..n2");
    try {
        const LayerRange r{std::stoul(s.substr(0, dots)), std::stoul(s.substr(dots + 2))};
        if (r.begin > r.end || r.end > c.n_layers) {
            throw UsageError("--layers " + s + " outside the model's " + std::to_string(c.n_layers) + " layers");
        }
        return r;
    } catch (const std::logic_error&) {
        throw UsageError("--layers expects n1..n2");
    }
}

BiasMode parse_bias_mode(const std::string& s) {
    if (s == "with") return BiasMode::with_biases;
    if (s == "without") return BiasMode::bias_free;
    throw UsageError("--bias-mode must be 'with' or 'without'");
}

TargetPosition parse_target(const std::string& s) {
    if (s == "first") return TargetPosition::first;
    if (s == "last") return TargetPosition::last;
    throw UsageError("--target must be 'first' or 'last'");
}

std::vector<std::string> parse_methods(const std::string& s) {
    auto items = split_list(s);
    if (items.empty()) throw UsageError("--methods is empty");
    for (const auto& m : items) {
        if (m == kRandomMethod) continue;
        try {
            (void)parse_map_method(m);
        } catch (const ValueError& e) {
            throw UsageError(e.what());
        }
    }
    return items;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

fs::path prepare_out(const RunConfig& rc) {
    const fs::path dir(rc.out.empty() ? "tensorlens_out" : rc.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
    return dir;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    return f;
}

void write_manifest(const RunConfig& rc, const fs::path& dir, const std::optional<ModelConfig>& model_config) {
    json m;
    m["tool"] = "tensorlens";
    m["version"] = TENSORLENS_VERSION;
    m["container_version"] = kContainerVersion;
    m["seed"] = rc.seed;
    m["run"] = rc.to_json();
    std::string hashed = m["run"].dump();
    if (model_config) {
        const std::string mc = config_to_json(*model_config);
        m["model_config"] = json::parse(mc);
        hashed += mc;
    }
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(hashed)));
    m["config_hash"] = hex;
    auto f = open_out(dir / "manifest.json");
    f << m.dump(2) << '\n';
}

struct LoadedModel {
    Model model;
    std::optional<Fixture> fixture;
};

LoadedModel load_any(const std::string& path) {
    const Container c = decode_container(read_file_bytes(path));
    LoadedModel lm;
    if (c.find("input_tokens")) {
        lm.fixture = fixture_from_container(c);
        lm.model = lm.fixture->model;
    } else {
        lm.model = model_from_container(c);
    }
    return lm;
}

std::vector<DatasetRecord> load_records(const RunConfig& rc, const Model& model) {
    auto records = load_dataset(rc.dataset);
    for (std::size_t i = 0; i < records.size(); ++i) {
        try {
            validate_tokens(records[i].tokens, model.config);
        } catch (const Error& e) {
            throw DatasetError(i + 1, e.what());
        }
    }
    return records;
}

/// Inputs for check/bound: fixture inputs, else the dataset, else seeded random tokens.
std::vector<TokenSequence> sample_inputs(const RunConfig& rc, const LoadedModel& lm) {
    std::vector<TokenSequence> out;
    if (!rc.dataset.empty()) {
        for (auto& r : load_records(rc, lm.model)) out.push_back(std::move(r.tokens));
    } else if (lm.fixture) {
        out = lm.fixture->inputs;
    } else {
        std::mt19937_64 rng(rc.seed);
        const std::size_t L = std::min(rc.sample_len, lm.model.config.max_len);
        if (L == 0) throw UsageError("--sample-len must be positive");
        for (std::size_t s = 0; s < rc.samples; ++s) {
            TokenSequence t;
            for (std::size_t l = 0; l < L; ++l) t.ids.push_back(static_cast<TokenId>(rng() % lm.model.config.vocab));
            out.push_back(std::move(t));
        }
    }
    if (out.empty()) throw UsageError("no inputs to run on");
    return out;
}

std::size_t argmax(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------

struct CheckRow {
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;
};

int cmd_check(const RunConfig& rc, std::ostream& out) {
    require(rc.model, "--model");
    const LoadedModel lm = load_any(rc.model);
    const Model& model = lm.model;
    const auto inputs = sample_inputs(rc, lm);

    std::vector<CheckRow> rows{{"exactness", 0.0, 1e-6},
                               {"path_equivalence", 0.0, 1e-8},
                               {"io_row_sums", 0.0, 1e-6},
                               {"class_row_sums", 0.0, 1e-6}};
    for (const auto& tokens : inputs) {
        const ForwardResult f = model_forward(tokens, model);
        const auto& tr = f.trace;
        const ModelTensor t = full_tensor(tr, model, BiasMode::with_biases);
        rows[0].error = std::max(rows[0].error, max_abs_diff(apply_operator(t.op, tr.embedded), tr.final_hidden));

        ColumnOptions co;
        co.threads = rc.threads;
        const ModelTensor cols = materialize_by_columns(tr, model, BiasMode::with_biases, co);
        rows[1].error = std::max({rows[1].error, max_abs_diff(cols.op.matrix, t.op.matrix),
                                  max_abs_diff(cols.op.bias, t.op.bias)});

        // Row sums of the bias-free contractions recover the output minus the bias part.
        const ModelTensor t0 = full_tensor(tr, model, BiasMode::bias_free);
        const DenseMatrix bias = unvec_cols(t.op.bias, tr.seq_len, model.config.d_model);
        const CollapsedMap io = collapse_io(t0, tr.embedded, tr.final_hidden);
        const auto c = static_cast<TokenId>(argmax(f.logits.row(0)));
        const CollapsedMap cls = collapse_cls(t0, tr.embedded, model.weights.unembed, c);
        const Vector bias_logit = [&] {
            Vector v(tr.seq_len);
            for (std::size_t i = 0; i < tr.seq_len; ++i)
                for (std::size_t d = 0; d < model.config.d_model; ++d) v[i] += bias(i, d) * model.weights.unembed(d, c);
            return v;
        }();
        for (std::size_t i = 0; i < tr.seq_len; ++i) {
            double io_sum = 0.0, cls_sum = 0.0;
            for (std::size_t j = 0; j < tr.seq_len; ++j) {
                io_sum += io.values(i, j);
                cls_sum += cls.values(i, j);
            }
            double expect_io = 0.0;
            for (std::size_t d = 0; d < model.config.d_model; ++d)
                expect_io += tr.final_hidden(i, d) * (tr.final_hidden(i, d) - bias(i, d));
            const double expect_cls = f.logits(i, c) - bias_logit[i];
            rows[2].error = std::max(rows[2].error, std::abs(io_sum - expect_io) / std::max(1.0, std::abs(expect_io)));
            rows[3].error =
                std::max(rows[3].error, std::abs(cls_sum - expect_cls) / std::max(1.0, std::abs(expect_cls)));
        }
    }
    std::string worst_golden;
    if (lm.fixture && !lm.fixture->goldens.empty()) {
        const GoldenCheck g = compare_goldens(model, *lm.fixture);
        rows.push_back({"golden_match", g.max_rel_error, kGoldenTolerance});
        worst_golden = g.worst;
    }

    out << "invariant           max_error    tolerance    status\n";
    std::vector<std::string> failed;
    for (const auto& r : rows) {
        const bool ok = r.error <= r.tolerance;
        if (!ok) failed.push_back(r.name);
        out << std::left << std::setw(20) << r.name << std::setw(13) << short_fmt(r.error) << std::setw(13)
            << short_fmt(r.tolerance) << (ok ? "PASS" : "FAIL") << '\n';
    }
    if (!worst_golden.empty()) out << "worst golden tensor: " << worst_golden << '\n';
    out << "inputs checked: " << inputs.size() << '\n';
    if (!rc.out.empty()) write_manifest(rc, prepare_out(rc), model.config);
    if (!failed.empty()) {
        std::string names;
        for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
        throw InvariantFailure("failing invariant(s): " + names);
    }
    return kPass;
}

int cmd_collapse(const RunConfig& rc, std::ostream& out) {
    require(rc.model, "--model");
    require(rc.dataset, "--dataset");
    const Model model = load_any(rc.model).model;
    const auto methods = parse_methods(rc.methods);
    const BiasMode mode = parse_bias_mode(rc.bias_mode);
    const auto range_opt = parse_layers(rc.layers, model.config);
    const LayerRange range = range_opt.value_or(LayerRange::all(model.config));
    const TargetPosition target = parse_target(rc.target);
    if (rc.format != "csv" && rc.format != "raw") throw UsageError("--format must be 'csv' or 'raw'");
    for (const auto& m : methods)
        if (m == kRandomMethod) throw UsageError("'random' is not a map method");
    std::optional<TokenId> class_id;
    if (rc.class_spec != "pred") {
        try {
            class_id = static_cast<TokenId>(std::stoul(rc.class_spec));
        } catch (const std::logic_error&) {
            throw UsageError("--class must be 'pred' or a token id for collapse");
        }
        if (*class_id >= model.config.vocab) throw UsageError("--class outside the vocabulary");
    }
    for (const auto& m : methods) {
        const MapMethod mm = parse_map_method(m);
        if ((mm == MapMethod::tensor_io || mm == MapMethod::tensor_cls) && mode != BiasMode::bias_free) {
            throw UsageError(m + " requires --bias-mode without");
        }
    }

    const auto records = load_records(rc, model);
    const fs::path dir = prepare_out(rc);
    std::size_t written = 0;
    for (std::size_t e = 0; e < records.size(); ++e) {
        if (rc.example && *rc.example != e) continue;
        const ForwardResult f = model_forward(records[e].tokens, model);
        const auto& tr = f.trace;
        std::optional<ModelTensor> t;
        auto tensor = [&]() -> const ModelTensor& {
            if (!t) t = full_tensor(tr, model, mode, FullTensorOptions{range_opt, kDefaultDenseEntryCap});
            return *t;
        };
        const std::size_t tpos = target == TargetPosition::first ? 0 : tr.seq_len - 1;
        for (const auto& m : methods) {
            const MapMethod mm = parse_map_method(m);
            DenseMatrix values;
            switch (mm) {
            case MapMethod::tensor_norm: values = collapse_norm(tensor().view()).values; break;
            case MapMethod::tensor_io:
                values = collapse_io(tensor(), range_input(tr, range), range_output(tr, model.config, range)).values;
                break;
            case MapMethod::tensor_cls: {
                const TokenId c = class_id.value_or(static_cast<TokenId>(argmax(f.logits.row(tpos))));
                values = collapse_cls(tensor(), range_input(tr, range), model.weights.unembed, c).values;
                break;
            }
            default: {
                const auto all = layer_maps(tr, model, mm);
                const std::vector<DenseMatrix> part(all.begin() + static_cast<std::ptrdiff_t>(range.begin),
                                                    all.begin() + static_cast<std::ptrdiff_t>(range.end));
                if (part.empty()) throw UsageError("baseline maps need at least one layer in --layers");
                values = to_string(mm).starts_with("rollout") ? rollout(part) : layer_mean(part);
            }
            }
            const std::string stem = "map_" + m + "_" + std::to_string(e);
            if (rc.format == "csv") {
                auto file = open_out(dir / (stem + ".csv"));
                write_map_csv(file, values);
            } else {
                write_file_bytes(dir / (stem + ".bin"), encode_map_raw(values));
            }
            ++written;
        }
    }
    if (rc.example && written == 0) throw UsageError("--example outside the dataset");
    write_manifest(rc, dir, model.config);
    out << "wrote " << written << " map(s) to " << dir.string() << '\n';
    return kPass;
}

int cmd_perturb(const RunConfig& rc, std::ostream& out) {
    require(rc.model, "--model");
    require(rc.dataset, "--dataset");
    const Model model = load_any(rc.model).model;
    const auto methods = parse_methods(rc.methods);
    PerturbationOptions o;
    o.fractions = parse_doubles(rc.fractions, "--fractions");
    for (double fr : o.fractions)
        if (!(fr >= 0.0 && fr <= 1.0)) throw UsageError("--fractions must lie in [0, 1]");
    for (std::size_t k = 1; k < o.fractions.size(); ++k)
        if (!(o.fractions[k] > o.fractions[k - 1])) throw UsageError("--fractions must be strictly increasing");
    o.target = parse_target(rc.target);
    o.seed = rc.seed;
    o.threads = std::max<std::size_t>(1, rc.threads);
    const auto mask = rc.mask_id ? rc.mask_id : model.config.mask_token;
    if (!mask) throw UsageError("model has no mask token; pass --mask-id");
    if (*mask >= model.config.vocab) throw UsageError("--mask-id outside the vocabulary");
    o.mask_id = *mask;
    const auto records = load_records(rc, model);
    if (records.empty()) throw UsageError("dataset is empty");
    std::vector<TokenSequence> data;
    for (const auto& r : records) data.push_back(r.tokens);
    if (rc.class_spec == "label") {
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (!records[i].label) throw DatasetError(i + 1, "--class label needs a label on every record");
            o.labels.push_back(records[i].label);
        }
    } else if (rc.class_spec != "pred") {
        throw UsageError("--class must be 'pred' or 'label' for perturb");
    }

    const PerturbationReport report = perturbation_suite(model, data, methods, o);
    const fs::path dir = prepare_out(rc);
    {
        auto f = open_out(dir / "curves.csv");
        f << "method,metric,fraction,value\n";
        for (const auto& m : report.methods)
            for (const auto* c : {&m.hs_mse, &m.aopc})
                for (std::size_t k = 0; k < c->fractions.size(); ++k)
                    f << m.method << ',' << to_string(c->metric) << ',' << fmt(c->fractions[k]) << ','
                      << fmt(c->values[k]) << '\n';
    }
    {
        auto f = open_out(dir / "auc.csv");
        f << "method,hs_mse_auc,aopc_auc\n";
        for (const auto& m : report.methods) f << m.method << ',' << fmt(m.hs_mse_auc) << ',' << fmt(m.aopc_auc) << '\n';
    }
    write_manifest(rc, dir, model.config);
    out << "method                 hs_mse_auc    aopc_auc\n";
    for (const auto& m : report.methods)
        out << std::left << std::setw(23) << m.method << std::setw(14) << short_fmt(m.hs_mse_auc)
            << short_fmt(m.aopc_auc) << '\n';
    return kPass;
}

int cmd_relate(const RunConfig& rc, std::ostream& out) {
    require(rc.model, "--model");
    require(rc.dataset, "--dataset");
    const Model model = load_any(rc.model).model;
    if (rc.m == 0) throw UsageError("--m must be at least 1");
    if (rc.splits == 0) throw UsageError("--splits must be at least 1");
    RelationOptions o;
    o.m = rc.m;
    o.top_k_filter = rc.top_k;
    o.test_on_train = rc.test_on_train;
    o.seeds.clear();
    for (std::size_t s = 0; s < rc.splits; ++s) o.seeds.push_back(rc.seed + s);
    const auto sets = relation_sets(load_records(rc, model));
    if (sets.empty()) throw UsageError("dataset has no relation records");

    const fs::path dir = prepare_out(rc);
    auto splits = open_out(dir / "relation_splits.csv");
    auto summary = open_out(dir / "relation_summary.csv");
    splits << "relation,seed,tested,matched,accuracy\n";
    summary << "relation,mean_accuracy,std_accuracy\n";
    out << "relation        mean_acc    std\n";
    double total = 0.0;
    for (const auto& set : sets) {
        const RelationResult r = evaluate_relation(model, set, o);
        double var = 0.0;
        for (const auto& s : r.splits) {
            splits << r.relation << ',' << s.seed << ',' << s.tested << ',' << s.matched << ',' << fmt(s.accuracy())
                   << '\n';
            var += (s.accuracy() - r.mean_accuracy) * (s.accuracy() - r.mean_accuracy);
        }
        const double sd = std::sqrt(var / static_cast<double>(r.splits.size()));
        summary << r.relation << ',' << fmt(r.mean_accuracy) << ',' << fmt(sd) << '\n';
        out << std::left << std::setw(16) << r.relation << std::setw(12) << fmt(r.mean_accuracy).substr(0, 8)
            << fmt(sd).substr(0, 8) << '\n';
        total += r.mean_accuracy;
    }
    out << "overall mean accuracy: " << total / static_cast<double>(sets.size()) << '\n';
    write_manifest(rc, dir, model.config);
    return kPass;
}

int cmd_bound(const RunConfig& rc, std::ostream& out) {
    require(rc.model, "--model");
    const LoadedModel lm = load_any(rc.model);
    const Model& model = lm.model;
    const auto inputs = sample_inputs(rc, lm);
    const auto norms = parse_doubles(rc.eps_norms, "--eps-norms");
    for (double n : norms)
        if (!(n >= 0.0) || !std::isfinite(n)) throw UsageError("--eps-norms must be finite and non-negative");
    if (rc.trials == 0) throw UsageError("--trials must be positive");

    const fs::path dir = prepare_out(rc);
    auto f = open_out(dir / "bound.csv");
    f << "input,trial,epsilon_norm,lhs,rhs,rhs_bound,spectral_norm,tensor_norm_bound,holds,holds_bound\n";
    std::mt19937_64 rng(rc.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t total = 0, held = 0, held_bound = 0, dominated = 0;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        const DenseMatrix x0 = embed(inputs[p], model);
        std::vector<DenseMatrix> eps;
        for (std::size_t t = 0; t < rc.trials; ++t) {
            for (double n : norms) {
                DenseMatrix e(x0.rows(), x0.cols());
                for (double& v : e.data()) v = normal(rng);
                const double fn = frobenius_norm(e);
                e *= fn > 0.0 ? n / fn : 0.0;
                eps.push_back(std::move(e));
            }
        }
        const auto reports = prop1_check(model, x0, eps);
        for (std::size_t k = 0; k < reports.size(); ++k) {
            const auto& r = reports[k];
            f << p << ',' << k / norms.size() << ',' << fmt(r.epsilon_norm) << ',' << fmt(r.lhs) << ',' << fmt(r.rhs)
              << ',' << fmt(r.rhs_bound) << ',' << fmt(r.spectral_norm) << ',' << fmt(r.tensor_norm_bound) << ','
              << (r.holds ? 1 : 0) << ',' << (r.holds_bound ? 1 : 0) << '\n';
            ++total;
            held += r.holds ? 1 : 0;
            held_bound += r.holds_bound ? 1 : 0;
            dominated += r.bound_dominates ? 1 : 0;
        }
    }
    write_manifest(rc, dir, model.config);
    const bool holds = held == total && held_bound == total && dominated == total;
    out << "holds=" << (holds ? "true" : "false") << " (spectral " << held << "/" << total << ", product bound "
        << held_bound << "/" << total << ", bound >= spectral " << dominated << "/" << total << ")\n";
    if (!holds) throw InvariantFailure("error bound violated");
    return kPass;
}

int cmd_random_model(const RunConfig& rc, std::ostream& out) {
    ModelConfig c = rc.model_config;
    c.use_biases = !rc.no_biases;
    try {
        c.norm_placement = parse_norm_placement(rc.placement);
        c.activation = parse_activation(rc.activation);
        c.validate();
    } catch (const ValueError& e) {
        throw UsageError(e.what());
    }
    const Model model = random_model(c, rc.seed);
    Container container;
    if (rc.fixture_inputs > 0) {
        std::mt19937_64 rng(rc.seed ^ 0x5eedULL);
        const std::size_t L = std::min(rc.sample_len, c.max_len);
        std::vector<TokenSequence> inputs(rc.fixture_inputs);
        for (auto& t : inputs)
            for (std::size_t l = 0; l < L; ++l) t.ids.push_back(static_cast<TokenId>(rng() % c.vocab));
        container = fixture_container(model, inputs, true);
    } else {
        container = container_from_model(model);
    }
    write_file_bytes(rc.out, encode_container(container));
    out << "wrote " << rc.out << '\n';
    return kPass;
}

int cmd_toy(const RunConfig& rc, std::ostream& out) {
    ToyTask task;
    if (rc.task == "classify") {
        task = classification_task(rc.n_examples ? rc.n_examples : 256, 10, rc.seed);
    } else if (rc.task == "relation") {
        task = relation_task(rc.n_examples ? rc.n_examples : 512, 3, rc.seed);
    } else {
        throw UsageError("--task must be 'classify' or 'relation'");
    }
    Model model = random_model(task.config, rc.seed);
    TrainOptions to;
    to.steps = rc.steps;
    to.seed = rc.seed;
    train(model, task.train, to);
    const double acc = target_accuracy(model, task.train);
    const fs::path dir = prepare_out(rc);
    save_model(model, dir / "model.tlns");
    auto f = open_out(dir / "dataset.jsonl");
    write_dataset(f, task.records);
    write_manifest(rc, dir, model.config);
    out << "task=" << rc.task << " train_accuracy=" << acc << " wrote " << (dir / "model.tlns").string() << '\n';
    return kPass;
}

void add_common(CLI::App* sub, RunConfig& rc, bool needs_dataset) {
    sub->add_option("--model", rc.model, "Model or fixture container");
    if (needs_dataset) {
        sub->add_option("--dataset", rc.dataset, "JSONL dataset");
    } else {
        sub->add_option("--dataset", rc.dataset, "JSONL dataset of inputs (optional)");
    }
    sub->add_option("--seed", rc.seed, "Random seed");
    sub->add_option("--out", rc.out, "Output directory");
    sub->add_option("--threads", rc.threads, "Worker threads");
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"tensorlens: exact affine linearization of transformer forward passes"};
    app.set_version_flag("--version", TENSORLENS_VERSION);
    app.require_subcommand(1);
    RunConfig rc;

    auto* check = app.add_subcommand("check", "Run the exactness and identity invariants on a model");
    add_common(check, rc, false);
    check->add_option("--samples", rc.samples, "Random inputs when no dataset is given");
    check->add_option("--sample-len", rc.sample_len, "Length of random inputs");

    auto* collapse = app.add_subcommand("collapse", "Write L x L relevance maps");
    add_common(collapse, rc, true);
    collapse->add_option("--methods", rc.methods, "Comma-separated map methods");
    collapse->add_option("--bias-mode", rc.bias_mode, "with | without");
    collapse->add_option("--class", rc.class_spec, "Class token for tensor_cls, or 'pred'");
    collapse->add_option("--layers", rc.layers, "Half-open block range n1..n2");
    collapse->add_option("--target", rc.target, "first | last (position used for the predicted class)");
    collapse->add_option("--format", rc.format, "csv | raw");
    collapse->add_option("--example", rc.example, "Only this dataset index");

    auto* perturb = app.add_subcommand("perturb", "Masking-perturbation curves and AUC per method");
    add_common(perturb, rc, true);
    perturb->add_option("--methods", rc.methods, "Comma-separated methods (random is always added)");
    perturb->add_option("--fractions", rc.fractions, "Comma-separated masking fractions");
    perturb->add_option("--class", rc.class_spec, "pred | label");
    perturb->add_option("--target", rc.target, "first | last");
    perturb->add_option("--mask-id", rc.mask_id, "Replacement token (defaults to the model's mask token)");

    auto* relate = app.add_subcommand("relate", "Relation decoding through the mean affine operator");
    add_common(relate, rc, true);
    relate->add_option("--m", rc.m, "Training examples per split");
    relate->add_option("--splits", rc.splits, "Number of seeded splits (seeds seed..seed+splits-1)");
    relate->add_option("--top-k", rc.top_k, "Keep test examples whose object is in the model's top-k (0 = all)");
    relate->add_flag("--test-on-train", rc.test_on_train, "Decode the training examples themselves");

    auto* bound = app.add_subcommand("bound", "Check the linearization error bound");
    add_common(bound, rc, false);
    bound->add_option("--trials", rc.trials, "Random directions per perturbation size");
    bound->add_option("--eps-norms", rc.eps_norms, "Comma-separated perturbation norms");
    bound->add_option("--samples", rc.samples, "Random inputs when no dataset is given");
    bound->add_option("--sample-len", rc.sample_len, "Length of random inputs");

    auto* rnd = app.add_subcommand("random-model", "Write a randomly initialized model container");
    auto& mc = rc.model_config;
    rnd->add_option("--out", rc.out, "Output file")->required();
    rnd->add_option("--seed", rc.seed, "Random seed");
    rnd->add_option("--n-layers", mc.n_layers, "Blocks");
    rnd->add_option("--heads", mc.n_heads, "Heads");
    rnd->add_option("--d-model", mc.d_model, "Width");
    rnd->add_option("--d-head", mc.d_head, "Head width");
    rnd->add_option("--d-ff", mc.d_ff, "FFN width");
    rnd->add_option("--max-len", mc.max_len, "Maximum sequence length");
    rnd->add_option("--vocab", mc.vocab, "Vocabulary size");
    rnd->add_option("--placement", rc.placement, "post_ln | pre_ln");
    rnd->add_option("--activation", rc.activation, "gelu | relu | silu");
    rnd->add_flag("--causal", mc.causal, "Causal attention mask");
    rnd->add_flag("--no-biases", rc.no_biases, "Zero all biases and betas");
    rnd->add_flag("--final-norm", mc.final_norm, "LayerNorm before unembedding");
    rnd->add_option("--mask-token", mc.mask_token, "Reserved mask token id");
    rnd->add_option("--fixture-inputs", rc.fixture_inputs, "Also store this many inputs with golden activations");
    rnd->add_option("--sample-len", rc.sample_len, "Length of fixture inputs");

    auto* toy = app.add_subcommand("toy", "Train a toy model and write it with its dataset");
    toy->add_option("--task", rc.task, "classify | relation");
    toy->add_option("--out", rc.out, "Output directory");
    toy->add_option("--seed", rc.seed, "Random seed");
    toy->add_option("--steps", rc.steps, "Optimizer steps");
    toy->add_option("--examples", rc.n_examples, "Training examples");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kPass : kUsageError;
    }

    try {
        if (check->parsed()) {
            rc.command = "check";
            return cmd_check(rc, out);
        }
        if (collapse->parsed()) {
            rc.command = "collapse";
            return cmd_collapse(rc, out);
        }
        if (perturb->parsed()) {
            rc.command = "perturb";
            return cmd_perturb(rc, out);
        }
        if (relate->parsed()) {
            rc.command = "relate";
            return cmd_relate(rc, out);
        }
        if (bound->parsed()) {
            rc.command = "bound";
            return cmd_bound(rc, out);
        }
        if (rnd->parsed()) {
            rc.command = "random-model";
            return cmd_random_model(rc, out);
        }
        if (toy->parsed()) {
            rc.command = "toy";
            return cmd_toy(rc, out);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsageError;
    } catch (const BiasModeError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsageError;
    } catch (const InvariantFailure& e) {
        err << "invariant failure: " << e.what() << '\n';
        return kInvariantFailure;
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << '\n';
        return kIoError;
    } catch (const FormatError& e) {
        err << "I/O error: " << e.what() << '\n';
        return kIoError;
    } catch (const DatasetError& e) {
        err << "I/O error: dataset " << e.what() << '\n';
        return kIoError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kInvariantFailure;
    }
    return kUsageError;
}

} // namespace tensorlens::cli
