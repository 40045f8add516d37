#pragma once

// Single-bit upsets on stored parameter codes. Fault targets are the
// parameters of the encoder layers [0, encoder_len); activations are never
// faulted. Each trial evaluates bit-exact inference with exactly one flipped
// code and leaves the stored codes untouched.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"
#include "edgerel/fixedpoint.hpp"
#include "edgerel/landscape.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/metrics/emd.hpp"
#include "edgerel/nn/forward.hpp"
#include "edgerel/nn/loss.hpp"

namespace edgerel::fault {

struct BitAddress {
    int layer = 0;
    std::size_t index = 0; // within the layer block: weights row-major, then biases
    int bit = 0;

    auto operator<=>(const BitAddress&) const = default;
};

enum class Metric { emd, mse };

inline std::string to_string(Metric m) { return m == Metric::emd ? "emd" : "mse"; }

inline Metric metric_from_string(const std::string& s) {
    if (s == "emd") return Metric::emd;
    if (s == "mse") return Metric::mse;
    throw Error("unknown fault metric '" + s + "'");
}

inline std::size_t flat_index(const nn::ModelSpec& spec, const BitAddress& a) {
    return spec.layer_offset(static_cast<std::size_t>(a.layer)) + a.index;
}

inline const fx::Format& address_format(const nn::ModelSpec& spec, const BitAddress& a) {
    const auto& layer = spec.layers[static_cast<std::size_t>(a.layer)];
    return a.index < layer.weight_count() ? layer.weight_format : layer.bias_format;
}

inline void check_address(const nn::ModelSpec& spec, const BitAddress& a) {
    if (a.layer < 0 || a.layer >= spec.encoder_len)
        throw Error("fault: layer " + std::to_string(a.layer) + " is not a fault target");
    const auto& layer = spec.layers[static_cast<std::size_t>(a.layer)];
    if (a.index >= layer.parameter_count())
        throw Error("fault: parameter index " + std::to_string(a.index) + " outside layer " + std::to_string(a.layer));
    if (a.bit < 0 || a.bit >= address_format(spec, a).total_bits)
        throw Error("fault: bit " + std::to_string(a.bit) + " outside the parameter's width");
}

// Every target bit in (layer, index, bit) order. B = Σ params·W.
inline std::vector<BitAddress> enumerate_addresses(const nn::ModelSpec& spec) {
    std::vector<BitAddress> out;
    for (int l = 0; l < spec.encoder_len; ++l) {
        const auto& layer = spec.layers[static_cast<std::size_t>(l)];
        for (std::size_t i = 0; i < layer.parameter_count(); ++i) {
            const int w = (i < layer.weight_count() ? layer.weight_format : layer.bias_format).total_bits;
            for (int b = 0; b < w; ++b) out.push_back({l, i, b});
        }
    }
    return out;
}

inline std::size_t address_count(const nn::ModelSpec& spec) {
    std::size_t n = 0;
    for (int l = 0; l < spec.encoder_len; ++l) {
        const auto& layer = spec.layers[static_cast<std::size_t>(l)];
        n += layer.weight_count() * static_cast<std::size_t>(layer.weight_format.total_bits) +
             static_cast<std::size_t>(layer.out_dim) * static_cast<std::size_t>(layer.bias_format.total_bits);
    }
    return n;
}

struct FaultTrial {
    BitAddress addr;
    double baseline = 0.0;
    double faulty = 0.0;
    double degradation = 0.0; // (faulty − baseline) / max(baseline, ε)
};

inline constexpr double kDegradationFloor = 1e-12;

inline double degradation(double baseline, double faulty) {
    return (faulty - baseline) / std::max(baseline, kDegradationFloor);
}

// Baseline bit-exact evaluation of a model on a fixed set, with per-sample
// caches that let a single-code fault be re-evaluated incrementally.
class FaultEvaluator {
public:
    // Per-thread scratch.
    struct Workspace {
        std::optional<metrics::EmdSolver> emd;
        nn::CodeTrace trace;
        std::vector<std::int64_t> layer_in, layer_out, acc;
        std::vector<double> recon, dist;
    };

    FaultEvaluator(const nn::Model& model, std::vector<std::int64_t> codes, const Matrix& inputs,
                   const Matrix& targets, Metric metric, const data::GridGeometry* geometry = nullptr)
        : model_(&model), codes_(std::move(codes)), targets_(targets), metric_(metric) {
        const auto& spec = model.spec;
        if (codes_.size() != spec.parameter_count()) throw Error("fault: code vector has wrong length");
        if (inputs.rows() == 0) throw Error("fault: empty evaluation set");
        if (inputs.rows() != targets.rows() || targets.cols() != static_cast<std::size_t>(spec.output_dim()))
            throw Error("fault: evaluation targets do not match inputs/model output");
        if (metric == Metric::emd) {
            if (geometry == nullptr) throw Error("fault: EMD metric needs a geometry");
            if (geometry->cells() != targets.cols()) throw Error("fault: geometry size does not match model output");
            geometry_ = *geometry;
        }
        const std::size_t n = inputs.rows();
        const std::size_t layers = model.layer_count();
        input_codes_.resize(n);
        base_.resize(n);
        sample_metric_.resize(n);
        if (metric == Metric::emd) emd_basis_.resize(n);
        auto ws = workspace();
        for (std::size_t s = 0; s < n; ++s) {
            input_codes_[s] = nn::encode_input(spec, inputs.row(s));
            nn::forward_codes(model, codes_, input_codes_[s], base_[s], layers);
            if (metric == Metric::emd) {
                decoded_distribution(base_[s].post[layers], ws);
                ws.emd->cost_with_basis(targets_.row(s), ws.dist, emd_basis_[s]);
            }
            sample_metric_[s] = sample_metric(s, base_[s].post[layers], ws);
        }
        baseline_ = mean(sample_metric_);
    }

    const nn::Model& model() const noexcept { return *model_; }
    const std::vector<std::int64_t>& codes() const noexcept { return codes_; }
    Metric metric() const noexcept { return metric_; }
    double baseline() const noexcept { return baseline_; }
    std::size_t samples() const noexcept { return input_codes_.size(); }

    Workspace workspace() const {
        Workspace ws;
        if (metric_ == Metric::emd) ws.emd.emplace(geometry_);
        return ws;
    }

    // Metric of sample s given its final output codes. EMD re-solves from the
    // baseline's optimal transport tree for that sample, so every path that
    // reaches the same output computes the same value bit for bit.
    double sample_metric(std::size_t s, std::span<const std::int64_t> out, Workspace& ws) const {
        const auto t = targets_.row(s);
        if (metric_ == Metric::mse) {
            decode_output(out, ws);
            double acc = 0.0;
            for (std::size_t k = 0; k < out.size(); ++k) acc += (ws.recon[k] - t[k]) * (ws.recon[k] - t[k]);
            return acc / static_cast<double>(out.size());
        }
        decoded_distribution(out, ws);
        return ws.emd->cost_from(t, ws.dist, emd_basis_[s]);
    }

    // Full bit-exact evaluation under an arbitrary code vector.
    double evaluate(std::span<const std::int64_t> codes, Workspace& ws) const {
        const std::size_t layers = model_->layer_count();
        std::vector<double> per(samples());
        for (std::size_t s = 0; s < samples(); ++s) {
            nn::forward_codes(*model_, codes, input_codes_[s], ws.trace, layers);
            per[s] = sample_metric(s, ws.trace.post[layers], ws);
        }
        return mean(per);
    }

    // Incremental single-fault evaluation; reads only cached baseline state.
    FaultTrial trial(const BitAddress& addr, Workspace& ws) const {
        const auto& spec = model_->spec;
        check_address(spec, addr);
        const auto l = static_cast<std::size_t>(addr.layer);
        const auto& layer = spec.layers[l];
        const auto& in_fmt = spec.input_format_of(l);
        const int acc_frac = layer.accumulator_frac(in_fmt);
        const std::size_t g = flat_index(spec, addr);
        const auto& fmt = address_format(spec, addr);
        const std::int64_t old_code = codes_[g];
        const std::int64_t dcode = fx::flip_bit({old_code, fmt}, addr.bit).code - old_code;
        const bool is_weight = addr.index < layer.weight_count();
        const std::size_t o = is_weight ? addr.index / static_cast<std::size_t>(layer.in_dim) : addr.index - layer.weight_count();
        const std::size_t i = is_weight ? addr.index % static_cast<std::size_t>(layer.in_dim) : 0;
        const int shift = is_weight ? acc_frac - layer.weight_format.frac_bits() - in_fmt.frac_bits()
                                    : acc_frac - layer.bias_format.frac_bits();
        const std::size_t layers = model_->layer_count();

        std::vector<double> per(samples());
        for (std::size_t s = 0; s < samples(); ++s) {
            const auto& b = base_[s];
            const std::int64_t delta = is_weight ? (dcode * b.post[l][i]) << shift : dcode << shift;
            const std::int64_t acc = b.acc[l][o] + delta;
            const std::int64_t out = nn::activate_code(*model_, l, acc, acc_frac);
            if (out == b.post[l + 1][o]) {
                per[s] = sample_metric_[s];
                continue;
            }
            ws.layer_in = b.post[l + 1];
            ws.layer_in[o] = out;
            for (std::size_t k = l + 1; k < layers; ++k) {
                nn::layer_codes(*model_, codes_, k, ws.layer_in, ws.acc, ws.layer_out);
                ws.layer_in.swap(ws.layer_out);
            }
            per[s] = ws.layer_in == b.post[layers] ? sample_metric_[s] : sample_metric(s, ws.layer_in, ws);
        }
        FaultTrial t;
        t.addr = addr;
        t.baseline = baseline_;
        t.faulty = mean(per);
        t.degradation = degradation(t.baseline, t.faulty);
        return t;
    }

private:
    void decode_output(std::span<const std::int64_t> out, Workspace& ws) const {
        const auto& fmt = model_->spec.layers.back().activation_format;
        ws.recon.resize(out.size());
        for (std::size_t k = 0; k < out.size(); ++k) ws.recon[k] = fx::to_real(out[k], fmt);
    }

    void decoded_distribution(std::span<const std::int64_t> out, Workspace& ws) const {
        decode_output(out, ws);
        ws.dist.resize(out.size());
        metrics::to_distribution(ws.recon, ws.dist);
    }

    static double mean(std::span<const double> v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    }

    const nn::Model* model_;
    std::vector<std::int64_t> codes_;
    Matrix targets_;
    Metric metric_;
    data::GridGeometry geometry_;
    std::vector<std::vector<std::int64_t>> input_codes_;
    std::vector<nn::CodeTrace> base_;
    std::vector<double> sample_metric_;
    std::vector<metrics::EmdSolver::Basis> emd_basis_;
    double baseline_ = 0.0;
};

// Flip one stored code in place, evaluate from scratch, and restore it.
inline FaultTrial flip_and_eval(const FaultEvaluator& ev, std::vector<std::int64_t>& codes, const BitAddress& addr) {
    const auto& spec = ev.model().spec;
    check_address(spec, addr);
    const std::size_t g = flat_index(spec, addr);
    const std::int64_t saved = codes[g];
    codes[g] = fx::flip_bit({saved, address_format(spec, addr)}, addr.bit).code;
    auto ws = ev.workspace();
    FaultTrial t;
    t.addr = addr;
    t.baseline = ev.baseline();
    try {
        t.faulty = ev.evaluate(codes, ws);
    } catch (...) {
        codes[g] = saved;
        throw;
    }
    codes[g] = saved;
    t.degradation = degradation(t.baseline, t.faulty);
    return t;
}

struct BitPositionStats {
    int bit = 0;
    std::size_t trials = 0;
    std::size_t sensitive = 0;
    double mean_degradation = 0.0;
    double max_degradation = 0.0;
};

struct CampaignReport {
    Metric metric = Metric::emd;
    double tau = 0.01;
    double baseline = 0.0;
    std::size_t address_space = 0;
    bool exhaustive = true;
    std::vector<FaultTrial> trials; // sorted by address
    double sensitive_fraction = 0.0;
    std::vector<BitPositionStats> by_bit;
};

inline void summarize(CampaignReport& r) {
    std::sort(r.trials.begin(), r.trials.end(), [](const FaultTrial& a, const FaultTrial& b) { return a.addr < b.addr; });
    std::size_t sensitive = 0;
    int max_bit = -1;
    for (const auto& t : r.trials) max_bit = std::max(max_bit, t.addr.bit);
    r.by_bit.assign(static_cast<std::size_t>(max_bit + 1), {});
    for (int b = 0; b <= max_bit; ++b) r.by_bit[static_cast<std::size_t>(b)].bit = b;
    for (const auto& t : r.trials) {
        auto& h = r.by_bit[static_cast<std::size_t>(t.addr.bit)];
        const bool hit = t.degradation > r.tau;
        sensitive += hit;
        h.sensitive += hit;
        if (h.trials == 0 || t.degradation > h.max_degradation) h.max_degradation = t.degradation;
        ++h.trials;
        h.mean_degradation += t.degradation;
    }
    for (auto& h : r.by_bit)
        if (h.trials) h.mean_degradation /= static_cast<double>(h.trials);
    r.sensitive_fraction = r.trials.empty() ? 0.0 : static_cast<double>(sensitive) / static_cast<double>(r.trials.size());
}

inline constexpr std::size_t kExhaustiveLimit = 1'000'000;

// Evaluate the given addresses across `threads` workers. Results land in
// address-indexed slots, so the report does not depend on scheduling.
inline std::vector<FaultTrial> run_trials(const FaultEvaluator& ev, std::span<const BitAddress> addrs, int threads) {
    std::vector<FaultTrial> out(addrs.size());
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(addrs.size(), 1));
    auto work = [&](std::size_t w) {
        auto ws = ev.workspace();
        for (std::size_t k = w; k < addrs.size(); k += workers) out[k] = ev.trial(addrs[k], ws);
    };
    if (workers == 1) {
        work(0);
        return out;
    }
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    pool.clear();
    return out;
}

inline CampaignReport exhaustive_scan(const FaultEvaluator& ev, double tau, int threads = 1) {
    const auto addrs = enumerate_addresses(ev.model().spec);
    if (addrs.size() > kExhaustiveLimit)
        throw Error("fault: address space of " + std::to_string(addrs.size()) +
                    " bits exceeds the exhaustive limit; use a sampled scan");
    CampaignReport r;
    r.metric = ev.metric();
    r.tau = tau;
    r.baseline = ev.baseline();
    r.address_space = addrs.size();
    r.trials = run_trials(ev, addrs, threads);
    summarize(r);
    return r;
}

// Uniform sample of n distinct addresses.
inline CampaignReport sampled_scan(const FaultEvaluator& ev, std::size_t n, std::uint64_t seed, double tau,
                                   int threads = 1) {
    auto addrs = enumerate_addresses(ev.model().spec);
    std::mt19937_64 rng(seed);
    std::shuffle(addrs.begin(), addrs.end(), rng);
    CampaignReport r;
    r.metric = ev.metric();
    r.tau = tau;
    r.baseline = ev.baseline();
    r.address_space = addrs.size();
    r.exhaustive = n >= addrs.size();
    addrs.resize(std::min(n, addrs.size()));
    std::sort(addrs.begin(), addrs.end());
    r.trials = run_trials(ev, addrs, threads);
    summarize(r);
    return r;
}

struct RankedBit {
    BitAddress addr;
    double score = 0.0;
};

struct SensitivityRanking {
    std::vector<RankedBit> entries; // descending score, ties in address order
    int eigenpairs_used = 0;
};

// Score bit (i, j) by s_i·Δ_ij², where s_i = Σ_k max(λ_k, 0)·v_{k,i}² is the
// top-k approximation of the Hessian diagonal and Δ_ij the value change of
// flipping bit j of the current code.
inline SensitivityRanking hessian_bit_rank(const nn::ModelSpec& spec, std::span<const std::int64_t> codes,
                                           std::span<const landscape::Eigenpair> eigenpairs, int k) {
    if (k < 0 || static_cast<std::size_t>(k) > eigenpairs.size()) throw Error("hessian_bit_rank: k exceeds available eigenpairs");
    if (codes.size() != spec.parameter_count()) throw Error("hessian_bit_rank: code vector has wrong length");
    std::vector<double> diag(codes.size(), 0.0);
    for (int e = 0; e < k; ++e) {
        const auto& pair = eigenpairs[static_cast<std::size_t>(e)];
        if (pair.vector.size() != codes.size()) throw Error("hessian_bit_rank: eigenvector length mismatch");
        const double lambda = std::max(pair.value, 0.0);
        for (std::size_t i = 0; i < diag.size(); ++i) diag[i] += lambda * pair.vector[i] * pair.vector[i];
    }
    SensitivityRanking r;
    r.eigenpairs_used = k;
    for (const auto& a : enumerate_addresses(spec)) {
        const std::size_t g = flat_index(spec, a);
        const double d = fx::bit_value_delta({codes[g], address_format(spec, a)}, a.bit);
        r.entries.push_back({a, diag[g] * d * d});
    }
    std::stable_sort(r.entries.begin(), r.entries.end(),
                     [](const RankedBit& x, const RankedBit& y) { return x.score > y.score; });
    return r;
}

struct RankingOptions {
    landscape::PowerIterationOptions power{8, 1e-3, 200, 0};
};

// Eigenpairs from the float-mode MSE Hessian at the stored (decoded) point.
inline SensitivityRanking hessian_bit_rank(const nn::Model& model, std::span<const std::int64_t> codes, const Matrix& x,
                                           const Matrix& target, const RankingOptions& opt = {}) {
    const auto theta = nn::decode_parameters(model.spec, codes);
    const nn::MseObjective f(model, x, target, nn::Mode::floating);
    const auto eig = landscape::hessian_top_eigs(f, theta, opt.power);
    return hessian_bit_rank(model.spec, codes, eig, opt.power.k);
}

struct RankingQuality {
    std::size_t truth_count = 0;
    std::optional<double> auc; // undefined when truth is empty or complete
    std::vector<std::pair<std::size_t, std::optional<double>>> recall_at; // (k, recall@k)
};

namespace detail {

inline std::optional<double> find_degradation(const CampaignReport& c, const BitAddress& a) {
    const auto it = std::lower_bound(c.trials.begin(), c.trials.end(), a,
                                     [](const FaultTrial& t, const BitAddress& x) { return t.addr < x; });
    if (it == c.trials.end() || it->addr != a) return std::nullopt;
    return it->degradation;
}

} // namespace detail

// Truth = campaign addresses with δ > τ. AUC is the Mann–Whitney statistic
// of the ranking score with tied scores sharing their average rank.
inline RankingQuality ranking_quality(const SensitivityRanking& ranking, const CampaignReport& campaign,
                                      std::span<const std::size_t> ks) {
    RankingQuality q;
    std::vector<std::pair<double, bool>> scored; // (score, is_truth) for campaign-covered addresses
    std::vector<bool> truth_flags;
    truth_flags.reserve(ranking.entries.size());
    for (const auto& e : ranking.entries) {
        const auto d = detail::find_degradation(campaign, e.addr);
        const bool t = d && *d > campaign.tau;
        truth_flags.push_back(t);
        if (d) scored.emplace_back(e.score, t);
    }
    for (const auto& t : campaign.trials) q.truth_count += t.degradation > campaign.tau;

    for (std::size_t k : ks) {
        if (q.truth_count == 0) {
            q.recall_at.emplace_back(k, std::nullopt);
            continue;
        }
        std::size_t hit = 0;
        for (std::size_t i = 0; i < std::min(k, truth_flags.size()); ++i) hit += truth_flags[i];
        q.recall_at.emplace_back(k, static_cast<double>(hit) / static_cast<double>(q.truth_count));
    }

    std::size_t pos = 0;
    for (const auto& s : scored) pos += s.second;
    const std::size_t neg = scored.size() - pos;
    if (pos == 0 || neg == 0) return q;
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < scored.size();) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (scored[k].second) rank_sum += avg;
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    q.auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
    return q;
}

struct ProtectionPlan {
    std::vector<BitAddress> protected_bits;
    std::size_t total_bits = 0;       // B
    std::size_t overhead_bits = 0;    // 2 extra registers per protected bit
    double overhead_fraction = 0.0;   // overhead_bits / B; full TMR = 2.0
    double budget = 0.0;
    std::optional<double> residual_risk; // Σ δ over unprotected sensitive bits
};

// Protect the top ⌊budget·B⌋ ranked bits with triple modular redundancy.
inline ProtectionPlan select_protection(const SensitivityRanking& ranking, double budget,
                                        const CampaignReport* campaign = nullptr) {
    if (!(budget >= 0.0 && budget <= 1.0)) throw Error("select_protection: budget must be in [0, 1]");
    ProtectionPlan p;
    p.budget = budget;
    p.total_bits = ranking.entries.size();
    const auto count = std::min(p.total_bits, static_cast<std::size_t>(std::floor(budget * static_cast<double>(p.total_bits))));
    for (std::size_t i = 0; i < count; ++i) p.protected_bits.push_back(ranking.entries[i].addr);
    p.overhead_bits = 2 * count;
    p.overhead_fraction = p.total_bits == 0 ? 0.0 : static_cast<double>(p.overhead_bits) / static_cast<double>(p.total_bits);
    if (campaign != nullptr) {
        auto prot = p.protected_bits;
        std::sort(prot.begin(), prot.end());
        double risk = 0.0;
        for (const auto& t : campaign->trials)
            if (t.degradation > campaign->tau && !std::binary_search(prot.begin(), prot.end(), t.addr)) risk += t.degradation;
        p.residual_risk = risk;
    }
    return p;
}

} // namespace edgerel::fault
