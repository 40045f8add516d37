#pragma once

// Command implementations. Every command resolves its configuration, writes
// resolved_config.json into the output directory, and stamps each artifact
// with the config hash. Nothing time- or host-dependent is written.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <sys/wait.h>

#include "json.hpp"

#include "edgerel/cli/config.hpp"
#include "edgerel/cli/report.hpp"
#include "edgerel/codegen.hpp"
#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"
#include "edgerel/fault.hpp"
#include "edgerel/jacreg.hpp"
#include "edgerel/landscape.hpp"
#include "edgerel/metrics/cka.hpp"
#include "edgerel/metrics/efficiency.hpp"
#include "edgerel/model_io.hpp"
#include "edgerel/nn/forward.hpp"
#include "edgerel/nn/loss.hpp"
#include "edgerel/nn/model.hpp"
#include "edgerel/nn/train.hpp"

namespace edgerel::cli {

namespace fs = std::filesystem;

// Seed streams derived from the global seed; distinct so that no two
// consumers share a random sequence.
inline constexpr std::uint64_t kEvalStream = 0x6576616c5f736574ULL;
inline constexpr std::uint64_t kSliceStream = 0x736c6963655f3264ULL;
inline constexpr std::uint64_t kTraceStream = 0x74726163655f6875ULL;
inline constexpr std::uint64_t kSampleStream = 0x73616d706c655f66ULL;
inline constexpr std::uint64_t kGoldenStream = 0x676f6c64656e5f76ULL;

struct Options {
    std::string config;
    std::string out = "out";
    std::string model;
    std::string model_b;
    std::string data;
    std::string campaign;
    std::optional<std::uint64_t> seed;
    std::optional<double> budget;
    std::optional<double> tau;
    std::optional<double> noise_level;
    std::optional<std::vector<int>> widths;
    int threads = 1;
};

// Apply flag overrides to the user document before resolution, so the
// config hash covers them.
inline json user_config(const Options& o) {
    json user = o.config.empty() ? json::object() : io::parse_json(io::read_text(o.config), o.config);
    if (!user.is_object()) throw Error("config: top level must be a JSON object");
    auto section = [&](const char* name) -> json& {
        if (!user.contains(name)) user[name] = json::object();
        return user[name];
    };
    if (o.seed) user["seed"] = *o.seed;
    if (o.budget) section("fault")["budget"] = *o.budget;
    if (o.tau) section("fault")["tau"] = *o.tau;
    if (o.noise_level) section("noise")["level"] = *o.noise_level;
    if (o.widths) section("study")["widths"] = *o.widths;
    if (!o.data.empty()) section("data")["csv"] = o.data;
    return user;
}

class Context {
public:
    Context(const Options& o) : opt_(o), cfg_(typed_config(resolve_config(user_config(o)))), out_(o.out) {
        if (o.threads < 1) throw Error("--threads must be >= 1");
        std::error_code ec;
        fs::create_directories(out_, ec);
        if (ec) throw Error("cannot create output directory '" + out_.string() + "': " + ec.message());
        io::write_text(path("resolved_config.json"), cfg_.raw.dump(1) + "\n");
    }

    const RunConfig& cfg() const noexcept { return cfg_; }
    const Options& opt() const noexcept { return opt_; }
    std::string path(const std::string& name) const { return (out_ / name).string(); }

    void write_json(const std::string& name, json j) const {
        j["config_hash"] = cfg_.hash;
        io::write_text(path(name), j.dump(1) + "\n");
    }

    void write_csv(const std::string& name, const std::string& body) const {
        io::write_text(path(name), "# config_hash=" + cfg_.hash + "\n" + body);
    }

    const data::GridGeometry& geometry() {
        if (!geometry_) {
            geometry_ = cfg_.geometry.empty() ? data::GridGeometry::rectangular(cfg_.grid_x, cfg_.grid_y)
                                              : data::load_geometry_csv(cfg_.geometry);
            geometry_->validate();
        }
        return *geometry_;
    }

    const Matrix& train_x() {
        if (!train_x_) {
            train_x_ = cfg_.csv.empty() ? data::gen_synthetic(cfg_.n, cfg_.seed, geometry(), cfg_.blobs).samples
                                        : data::load_csv(cfg_.csv, geometry()).samples;
        }
        return *train_x_;
    }

    const Matrix& eval_x() {
        if (!eval_x_) {
            eval_x_ = cfg_.eval_csv.empty()
                          ? data::gen_synthetic(cfg_.eval_n, cfg_.seed ^ kEvalStream, geometry(), cfg_.blobs).samples
                          : data::load_csv(cfg_.eval_csv, geometry()).samples;
        }
        return *eval_x_;
    }

    // First `n` evaluation rows.
    Matrix eval_head(std::size_t n) {
        const auto& x = eval_x();
        std::vector<std::size_t> idx(std::min(n, x.rows()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return x.select_rows(idx);
    }

    nn::Model benchmark(int weight_bits) {
        auto o = cfg_.model;
        o.input_dim = static_cast<int>(geometry().cells());
        o.weight_bits = weight_bits;
        return nn::Model(nn::benchmark_spec(o));
    }

    nn::Model benchmark() { return benchmark(cfg_.model.weight_bits); }

    io::ModelFile load_model(const std::string& flag) const {
        const std::string p = flag.empty() ? path("model.json") : flag;
        return io::load_model(p);
    }

    void check_geometry(const nn::Model& m) {
        if (static_cast<std::size_t>(m.spec.input_dim()) != geometry().cells() ||
            static_cast<std::size_t>(m.spec.output_dim()) != geometry().cells())
            throw Error("model dimensions do not match the geometry's " + std::to_string(geometry().cells()) + " cells");
    }

private:
    Options opt_;
    RunConfig cfg_;
    fs::path out_;
    std::optional<data::GridGeometry> geometry_;
    std::optional<Matrix> train_x_, eval_x_;
};

namespace detail {

inline std::string matrix_csv(const Matrix& m) {
    std::ostringstream o;
    data::write_csv(o, m);
    return o.str();
}

inline json summary(const std::vector<double>& v) {
    return {{"per_sample", v}, {"mean", jacreg::mean(v)}, {"median", jacreg::median(v)}};
}

inline json addr_json(const fault::BitAddress& a) { return json::array({a.layer, a.index, a.bit}); }

inline std::string history_csv(const nn::TrainResult& r) {
    std::ostringstream o;
    o << "epoch,train_loss,val_loss\n";
    for (const auto& e : r.history)
        o << e.epoch << ',' << data::format_double(e.train_loss) << ',' << data::format_double(e.val_loss) << '\n';
    return o.str();
}

inline std::string steps_csv(const nn::TrainResult& r) {
    std::ostringstream o;
    o << "epoch,step,mse,reg,total\n";
    for (const auto& s : r.steps)
        o << s.epoch << ',' << s.step << ',' << data::format_double(s.mse) << ',' << data::format_double(s.reg) << ','
          << data::format_double(s.total) << '\n';
    return o.str();
}

inline json train_summary(const nn::TrainResult& r, const io::ModelFile& mf) {
    json j = {{"epochs", r.history.size()},
              {"parameters", mf.model.parameter_count()},
              {"model_hash", io::model_hash(mf)}};
    if (!r.history.empty()) {
        j["final_train_loss"] = r.history.back().train_loss;
        j["final_val_loss"] = number(r.history.back().val_loss);
    }
    return j;
}

inline std::vector<double> decoded(const io::ModelFile& mf) { return nn::decode_parameters(mf.model.spec, mf.codes); }

} // namespace detail

// ---- campaign files ------------------------------------------------------

inline json campaign_json(const fault::CampaignReport& r) {
    json by_bit = json::array();
    for (const auto& b : r.by_bit)
        by_bit.push_back({{"bit", b.bit},
                          {"trials", b.trials},
                          {"sensitive", b.sensitive},
                          {"mean_degradation", b.mean_degradation},
                          {"max_degradation", b.max_degradation}});
    return {{"metric", fault::to_string(r.metric)},
            {"tau", r.tau},
            {"baseline", r.baseline},
            {"address_space", r.address_space},
            {"exhaustive", r.exhaustive},
            {"trials", r.trials.size()},
            {"sensitive_fraction", r.sensitive_fraction},
            {"by_bit", by_bit},
            {"trials_file", "campaign.csv"}};
}

inline std::string campaign_csv(const fault::CampaignReport& r) {
    std::ostringstream o;
    o << "layer,index,bit,baseline,faulty,degradation\n";
    for (const auto& t : r.trials)
        o << t.addr.layer << ',' << t.addr.index << ',' << t.addr.bit << ',' << data::format_double(t.baseline) << ','
          << data::format_double(t.faulty) << ',' << data::format_double(t.degradation) << '\n';
    return o.str();
}

// Reload a campaign written by fault-scan; τ is re-applied by the caller.
inline fault::CampaignReport read_campaign(const std::string& json_path) {
    const auto j = io::parse_json(io::read_text(json_path), json_path);
    fault::CampaignReport r;
    std::string trials_file;
    try {
        r.metric = fault::metric_from_string(j.at("metric").get<std::string>());
        r.tau = j.at("tau").get<double>();
        r.baseline = j.at("baseline").get<double>();
        r.address_space = j.at("address_space").get<std::size_t>();
        r.exhaustive = j.at("exhaustive").get<bool>();
        trials_file = j.at("trials_file").get<std::string>();
    } catch (const json::exception& e) {
        throw Error(json_path + ": " + e.what());
    }
    const auto csv = (fs::path(json_path).parent_path() / trials_file).string();
    std::istringstream in(io::read_text(csv));
    std::string line;
    bool header = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != "layer,index,bit,baseline,faulty,degradation") throw Error(csv + ": unexpected header");
            header = true;
            continue;
        }
        const auto f = data::detail::split_csv_line(line);
        if (f.size() != 6) throw Error(csv + ": malformed row " + std::to_string(lineno));
        fault::FaultTrial t;
        t.addr.layer = std::stoi(f[0]);
        t.addr.index = std::stoul(f[1]);
        t.addr.bit = std::stoi(f[2]);
        t.baseline = data::detail::parse_number(f[3], lineno);
        t.faulty = data::detail::parse_number(f[4], lineno);
        t.degradation = data::detail::parse_number(f[5], lineno);
        r.trials.push_back(t);
    }
    fault::summarize(r);
    return r;
}

// ---- commands -------------------------------------------------------------

inline void cmd_gen_data(Context& c) {
    c.write_csv("data.csv", detail::matrix_csv(c.train_x()));
    c.write_csv("eval.csv", detail::matrix_csv(c.eval_x()));
    std::ostringstream g;
    data::write_geometry_csv(g, c.geometry());
    c.write_csv("geometry.csv", g.str());
    c.write_json("data.json", {{"train_samples", c.train_x().rows()},
                               {"eval_samples", c.eval_x().rows()},
                               {"cells", c.geometry().cells()},
                               {"files", {"data.csv", "eval.csv", "geometry.csv"}}});
}

inline io::ModelFile save_trained(Context& c, const nn::Model& model, const nn::TrainResult& r) {
    auto mf = io::make_model_file(model, r.theta);
    mf.config_hash = c.cfg().hash;
    io::save_model(c.path("model.json"), mf);
    c.write_csv("history.csv", detail::history_csv(r));
    return mf;
}

inline void cmd_train(Context& c) {
    const auto model = c.benchmark();
    const auto r = nn::train(model, c.train_x(), c.train_x(), c.cfg().train, nullptr);
    const auto mf = save_trained(c, model, r);
    c.write_json("train.json", detail::train_summary(r, mf));
}

inline void cmd_jacreg_train(Context& c) {
    const auto model = c.benchmark();
    const auto r = jacreg::train_robust(model, c.train_x(), c.cfg().train, c.cfg().jacreg);
    const auto mf = save_trained(c, model, r);
    c.write_csv("steps.csv", detail::steps_csv(r));
    auto j = detail::train_summary(r, mf);
    j["jacreg"] = {{"lambda", c.cfg().jacreg.lambda},
                   {"mode", jacreg::to_string(c.cfg().jacreg.mode)},
                   {"target", jacreg::to_string(c.cfg().jacreg.target)},
                   {"n_proj", c.cfg().jacreg.n_proj}};
    c.write_json("train.json", j);
}

// Reconstruction EMD of the stored (bit-exact) model on clean and noised
// evaluation inputs, both measured against the clean rows.
inline void cmd_eval(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    c.check_geometry(mf.model);
    const auto theta = detail::decoded(mf);
    const auto& x = c.eval_x();
    const auto clean = jacreg::reconstruction_emd(mf.model, theta, x, x, nn::Mode::bit_exact, c.geometry());
    const Matrix xn = data::add_noise(x, c.cfg().noise, data::cell_rms(c.train_x()));
    const auto noisy = jacreg::reconstruction_emd(mf.model, theta, xn, x, nn::Mode::bit_exact, c.geometry());
    const auto out = nn::forward(mf.model, theta, x, nn::Mode::bit_exact).output();
    double mse = 0.0;
    for (std::size_t i = 0; i < x.data().size(); ++i) mse += (out.data()[i] - x.data()[i]) * (out.data()[i] - x.data()[i]);
    mse /= static_cast<double>(x.data().size());
    std::ostringstream csv;
    csv << "sample,emd,noisy_emd\n";
    for (std::size_t n = 0; n < clean.size(); ++n)
        csv << n << ',' << data::format_double(clean[n]) << ',' << data::format_double(noisy[n]) << '\n';
    c.write_csv("eval_samples.csv", csv.str());
    c.write_json("eval.json", {{"mode", "bit-exact"},
                               {"samples", x.rows()},
                               {"model_hash", io::model_hash(mf)},
                               {"mse", mse},
                               {"emd", detail::summary(clean)},
                               {"noisy_emd", detail::summary(noisy)},
                               {"noise_level", c.cfg().noise.level}});
}

inline void cmd_landscape(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    c.check_geometry(mf.model);
    const auto theta = detail::decoded(mf);
    const Matrix x = c.eval_head(c.cfg().landscape_samples);
    const nn::MseObjective f(mf.model, x, x, c.cfg().slice_mode);
    const auto blocks = f.blocks();
    const auto g = landscape::loss_slice_2d(f, theta, blocks, c.cfg().extent, c.cfg().resolution,
                                            c.cfg().seed ^ kSliceStream);
    std::ostringstream csv;
    csv << "i,j,a,b,loss\n";
    for (int i = 0; i < g.resolution; ++i)
        for (int j = 0; j < g.resolution; ++j)
            csv << i << ',' << j << ',' << data::format_double(g.coords[static_cast<std::size_t>(i)]) << ','
                << data::format_double(g.coords[static_cast<std::size_t>(j)]) << ','
                << data::format_double(g.losses(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) << '\n';
    c.write_csv("slice.csv", csv.str());
    c.write_json("landscape.json", {{"mode", nn::to_string(c.cfg().slice_mode)},
                                    {"samples", x.rows()},
                                    {"extent", g.extent},
                                    {"resolution", g.resolution},
                                    {"center_loss", g.center_loss},
                                    {"model_hash", io::model_hash(mf)}});
}

inline json hessian_json(const landscape::HessianSummary& s) {
    json eig = json::array();
    for (const auto& e : s.eigenpairs)
        eig.push_back({{"value", e.value}, {"residual", e.residual}, {"iterations", e.iterations}, {"converged", e.converged}});
    return {{"eigenpairs", eig}, {"trace", s.trace_estimate}, {"trace_stderr", s.trace_stderr}, {"probes", s.n_probes}};
}

inline void cmd_hessian(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    c.check_geometry(mf.model);
    const auto theta = detail::decoded(mf);
    const Matrix x = c.eval_head(c.cfg().landscape_samples);
    const nn::MseObjective f(mf.model, x, x, c.cfg().hessian_mode);
    const auto s = landscape::hessian_summary(f, theta, c.cfg().power, c.cfg().probes, c.cfg().seed ^ kTraceStream);
    auto j = hessian_json(s);
    j["mode"] = nn::to_string(c.cfg().hessian_mode);
    j["samples"] = x.rows();
    j["model_hash"] = io::model_hash(mf);
    c.write_json("hessian.json", j);
}

// Layer-by-layer CKA between two models plus each model's neural efficiency.
inline void cmd_cka(Context& c) {
    if (c.opt().model_b.empty()) throw Error("cka: --model-b is required");
    const auto a = c.load_model(c.opt().model);
    const auto b = io::load_model(c.opt().model_b);
    c.check_geometry(a.model);
    c.check_geometry(b.model);
    const auto ta = detail::decoded(a), tb = detail::decoded(b);
    const auto& x = c.eval_x();
    const auto fa = nn::forward(a.model, ta, x, nn::Mode::bit_exact);
    const auto fb = nn::forward(b.model, tb, x, nn::Mode::bit_exact);
    json grid = json::array();
    for (std::size_t i = 1; i < fa.activations.size(); ++i) {
        json row = json::array();
        for (std::size_t k = 1; k < fb.activations.size(); ++k) {
            try {
                row.push_back(metrics::linear_cka(fa.activations[i], fb.activations[k]).value);
            } catch (const Error&) {
                row.push_back(nullptr); // a layer without variance has no defined CKA
            }
        }
        grid.push_back(row);
    }
    auto eff = [&](const io::ModelFile& m, std::span<const double> t) {
        const auto e = metrics::neural_efficiency(m.model, t, x, nn::Mode::bit_exact);
        return json{{"per_layer", e.per_layer}, {"aggregate", e.aggregate}};
    };
    c.write_json("cka.json", {{"samples", x.rows()},
                              {"model_a", io::model_hash(a)},
                              {"model_b", io::model_hash(b)},
                              {"cka", grid},
                              {"efficiency_a", eff(a, ta)},
                              {"efficiency_b", eff(b, tb)}});
}

inline void cmd_fault_scan(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    c.check_geometry(mf.model);
    const auto& x = c.eval_x();
    const fault::FaultEvaluator ev(mf.model, mf.codes, x, x, c.cfg().fault_metric, &c.geometry());
    const auto r = c.cfg().sampled > 0
                       ? fault::sampled_scan(ev, c.cfg().sampled, c.cfg().seed ^ kSampleStream, c.cfg().tau, c.opt().threads)
                       : fault::exhaustive_scan(ev, c.cfg().tau, c.opt().threads);
    c.write_csv("campaign.csv", campaign_csv(r));
    auto j = campaign_json(r);
    j["samples"] = x.rows();
    j["model_hash"] = io::model_hash(mf);
    c.write_json("campaign.json", j);
}

inline std::optional<fault::CampaignReport> find_campaign(Context& c) {
    std::string p = c.opt().campaign;
    if (p.empty()) {
        p = c.path("campaign.json");
        if (!fs::exists(p)) return std::nullopt;
    }
    auto r = read_campaign(p);
    r.tau = c.cfg().tau;
    fault::summarize(r);
    return r;
}

inline fault::SensitivityRanking rank(Context& c, const io::ModelFile& mf) {
    const Matrix x = c.eval_head(c.cfg().landscape_samples);
    return fault::hessian_bit_rank(mf.model, mf.codes, x, x, fault::RankingOptions{c.cfg().rank_power});
}

inline void cmd_rank_bits(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    c.check_geometry(mf.model);
    const auto ranking = rank(c, mf);
    std::ostringstream csv;
    csv << "rank,layer,index,bit,score\n";
    for (std::size_t i = 0; i < ranking.entries.size(); ++i) {
        const auto& e = ranking.entries[i];
        csv << i << ',' << e.addr.layer << ',' << e.addr.index << ',' << e.addr.bit << ','
            << data::format_double(e.score) << '\n';
    }
    c.write_csv("ranking.csv", csv.str());
    json j = {{"bits", ranking.entries.size()},
              {"eigenpairs_used", ranking.eigenpairs_used},
              {"model_hash", io::model_hash(mf)}};
    if (const auto campaign = find_campaign(c)) {
        const auto q = fault::ranking_quality(ranking, *campaign, c.cfg().recall_k);
        json recall = json::array();
        for (const auto& [k, v] : q.recall_at) recall.push_back({{"k", k}, {"recall", v ? json(*v) : json(nullptr)}});
        j["quality"] = {{"tau", campaign->tau},
                        {"truth_count", q.truth_count},
                        {"auc", q.auc ? json(*q.auc) : json(nullptr)},
                        {"recall_at", recall}};
        // Full recall curve at every 1% of the address space.
        std::vector<std::size_t> ks;
        for (int p = 1; p <= 100; ++p)
            ks.push_back((ranking.entries.size() * static_cast<std::size_t>(p) + 99) / 100);
        const auto curve = fault::ranking_quality(ranking, *campaign, ks);
        std::ostringstream rc;
        rc << "k,recall\n";
        for (const auto& [k, v] : curve.recall_at) rc << k << ',' << (v ? data::format_double(*v) : "nan") << '\n';
        c.write_csv("recall.csv", rc.str());
    }
    c.write_json("ranking.json", j);
}

inline void cmd_protect(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    c.check_geometry(mf.model);
    const auto ranking = rank(c, mf);
    const auto campaign = find_campaign(c);
    const auto plan = fault::select_protection(ranking, c.cfg().budget, campaign ? &*campaign : nullptr);
    json bits = json::array();
    for (const auto& a : plan.protected_bits) bits.push_back(detail::addr_json(a));
    c.write_json("protection.json", {{"budget", plan.budget},
                                     {"total_bits", plan.total_bits},
                                     {"protected_count", plan.protected_bits.size()},
                                     {"overhead_bits", plan.overhead_bits},
                                     {"overhead_fraction", plan.overhead_fraction},
                                     {"residual_risk", plan.residual_risk ? json(*plan.residual_risk) : json(nullptr)},
                                     {"protected_bits", bits},
                                     {"model_hash", io::model_hash(mf)}});
}

inline void cmd_robustness_curve(Context& c) {
    const auto model = c.benchmark();
    jacreg::CurveConfig cc;
    cc.lambdas = c.cfg().jacreg_lambdas;
    cc.seeds = c.cfg().jacreg_seeds;
    cc.train = c.cfg().train;
    cc.jacreg = c.cfg().jacreg;
    cc.noise = c.cfg().noise;
    cc.threads = c.opt().threads;
    const auto curve = jacreg::noise_robustness_curve(model, c.train_x(), c.eval_x(), c.geometry(), cc);
    std::ostringstream csv;
    jacreg::write_curve_csv(csv, curve);
    c.write_csv("robustness.csv", csv.str());
    json entries = json::array();
    for (const auto& e : curve.entries)
        entries.push_back({{"lambda", e.lambda},
                           {"seeds", e.seeds},
                           {"clean", e.clean},
                           {"noisy", e.noisy},
                           {"clean_mean", e.clean_mean},
                           {"noisy_mean", e.noisy_mean},
                           {"noisy_std", e.noisy_std},
                           {"noisy_median", e.noisy_median}});
    c.write_json("robustness.json", {{"noise_level", curve.noise_level}, {"entries", entries}});
}

inline codegen::EmittedSource emit_sources(Context& c) {
    const auto mf = c.load_model(c.opt().model);
    codegen::Options o;
    o.layer_end = c.cfg().codegen_full ? static_cast<int>(mf.model.layer_count()) : -1;
    o.strict = c.cfg().codegen_strict;
    auto e = codegen::emit(mf, c.cfg().codegen_vectors, c.cfg().seed ^ kGoldenStream, o);
    const std::string stamp = "/* config_hash=" + c.cfg().hash + " */\n";
    io::write_text(c.path("model.h"), stamp + e.header);
    io::write_text(c.path("model.c"), stamp + e.model);
    io::write_text(c.path("harness.c"), stamp + e.harness);
    c.write_json("manifest.json", e.manifest);
    return e;
}

inline void cmd_codegen(Context& c) { emit_sources(c); }

namespace detail {

inline std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char ch : s) q += ch == '\'' ? std::string("'\\''") : std::string(1, ch);
    return q + "'";
}

struct Captured {
    int status = -1;
    std::string output;
};

inline Captured run_captured(const std::string& cmd) {
    Captured r;
    FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
    if (p == nullptr) throw Error("cannot run '" + cmd + "'");
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int st = ::pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

} // namespace detail

inline std::string compiler_command() {
    const char* cc = std::getenv("EDGEREL_CC");
    return cc != nullptr && *cc != '\0' ? cc : "cc";
}

// Emit, compile the two inference files plus harness with a strict C99
// compiler, run the harness, and fail unless it reports every vector.
inline void cmd_verify_codegen(Context& c) {
    const auto e = emit_sources(c);
    const std::string exe = c.path("harness.bin");
    const std::string cc = compiler_command();
    const std::string flags = "-std=c99 -pedantic-errors -Wall -Wextra -Werror";
    const auto compile = detail::run_captured(cc + " " + flags + " -o " + detail::shell_quote(exe) + " " +
                                              detail::shell_quote(c.path("model.c")) + " " +
                                              detail::shell_quote(c.path("harness.c")));
    detail::Captured run;
    if (compile.status == 0) run = detail::run_captured(detail::shell_quote(exe));
    std::error_code ec;
    fs::remove(exe, ec);
    const std::string expect = "ok " + std::to_string(e.vectors.inputs.size()) + " vectors\n";
    const bool passed = compile.status == 0 && run.status == 0 && run.output == expect;
    c.write_json("verify.json", {{"compiler", cc},
                                 {"flags", flags},
                                 {"compile_status", compile.status},
                                 {"compile_output", compile.output},
                                 {"run_status", run.status},
                                 {"harness_output", run.output},
                                 {"vectors", e.vectors.inputs.size()},
                                 {"passed", passed}});
    if (!passed)
        throw Error("verify-codegen: " + std::string(compile.status != 0 ? "compilation failed:\n" + compile.output
                                                                          : "harness failed:\n" + run.output));
}

// One (width, λ, seed) job of the study sweep.
inline StudyJob study_job(Context& c, int width, std::size_t li, std::uint64_t seed) {
    const auto& cfg = c.cfg();
    const double lambda = cfg.study_lambdas[li];
    const auto model = c.benchmark(width);
    auto tc = cfg.train;
    tc.seed = seed;
    auto jc = cfg.jacreg;
    jc.lambda = lambda;
    jc.seed = seed;
    const auto r = jacreg::train_robust(model, c.train_x(), tc, jc);
    auto mf = io::make_model_file(model, r.theta);
    mf.config_hash = cfg.hash;
    const auto theta = detail::decoded(mf);
    const auto pt = jacreg::evaluate_robustness(model, r.theta, c.eval_x(), c.geometry(), cfg.noise,
                                                data::cell_rms(c.train_x()), tc.mode());
    const Matrix x = c.eval_head(cfg.landscape_samples);
    const nn::MseObjective f(model, x, x, cfg.hessian_mode);
    auto popt = cfg.power;
    popt.k = 1;
    popt.seed = seed;
    const auto eig = landscape::hessian_top_eigs(f, theta, popt);
    const auto tr = landscape::hessian_trace(f, theta, cfg.probes, seed ^ kTraceStream);

    StudyJob job;
    job.width = width;
    job.lambda = lambda;
    job.seed = seed;
    job.clean_emd = pt.clean;
    job.noisy_emd = pt.noisy;
    job.top_eigenvalue = eig.empty() ? 0.0 : eig.front().value;
    job.trace = tr.estimate;
    job.trace_stderr = tr.standard_error;
    const std::string stem = "jobs/w" + std::to_string(width) + "_l" + std::to_string(li) + "_s" + std::to_string(seed);
    job.artifact = stem + ".json";
    io::save_model(c.path(stem + "_model.json"), mf);
    c.write_json(job.artifact, {{"width", width},
                                {"lambda", lambda},
                                {"seed", seed},
                                {"clean_emd", pt.clean},
                                {"noisy_emd", pt.noisy},
                                {"top_eigenvalue", job.top_eigenvalue},
                                {"trace", tr.estimate},
                                {"trace_stderr", tr.standard_error},
                                {"model", stem + "_model.json"},
                                {"model_hash", io::model_hash(mf)}});
    return job;
}

inline StudyReport run_study(Context& c) {
    const auto& cfg = c.cfg();
    std::error_code ec;
    fs::create_directories(c.path("jobs"), ec);
    if (ec) throw Error("study: cannot create jobs directory: " + ec.message());
    c.train_x();
    c.eval_x();
    struct Key {
        int width;
        std::size_t li;
        std::uint64_t seed;
    };
    std::vector<Key> keys;
    for (int w : cfg.study_widths)
        for (std::size_t li = 0; li < cfg.study_lambdas.size(); ++li)
            for (auto s : cfg.study_seeds) keys.push_back({w, li, s});
    std::vector<StudyJob> jobs(keys.size());
    std::vector<std::exception_ptr> errors(keys.size());
    auto work = [&](std::size_t k) {
        try {
            jobs[k] = study_job(c, keys[k].width, keys[k].li, keys[k].seed);
        } catch (...) {
            errors[k] = std::current_exception();
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(c.opt().threads), 1,
                                                        std::max<std::size_t>(keys.size(), 1));
    if (workers == 1) {
        for (std::size_t k = 0; k < keys.size(); ++k) work(k);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t k = w; k < keys.size(); k += workers) work(k);
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    StudyReport r;
    r.config_hash = cfg.hash;
    r.widths = cfg.study_widths;
    r.lambdas = cfg.study_lambdas;
    r.jobs = std::move(jobs);
    for (const auto& j : r.jobs) r.artifacts.push_back(j.artifact);
    build_tables(r);
    write_report(r, c.path(""));
    return r;
}

inline void cmd_study(Context& c) { run_study(c); }

using Command = std::function<void(Context&)>;

inline const std::map<std::string, Command>& commands() {
    static const std::map<std::string, Command> table = {
        {"gen-data", cmd_gen_data},       {"train", cmd_train},
        {"eval", cmd_eval},               {"landscape", cmd_landscape},
        {"hessian", cmd_hessian},         {"cka", cmd_cka},
        {"fault-scan", cmd_fault_scan},   {"rank-bits", cmd_rank_bits},
        {"protect", cmd_protect},         {"jacreg-train", cmd_jacreg_train},
        {"robustness-curve", cmd_robustness_curve},
        {"codegen", cmd_codegen},         {"verify-codegen", cmd_verify_codegen},
        {"study", cmd_study},
    };
    return table;
}

inline void run_command(const std::string& name, const Options& o) {
    const auto it = commands().find(name);
    if (it == commands().end()) throw Error("unknown command '" + name + "'");
    Context c(o);
    it->second(c);
}

} // namespace edgerel::cli
