#include "permweave/merge.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>
#include <sstream>

#include "permweave/parallel.hpp"

namespace permweave {

Checkpoint interpolate(const Checkpoint& a, const Checkpoint& b, double lambda) {
    if (!(a.config == b.config)) throw ConfigError("cannot interpolate checkpoints with different configs");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    Checkpoint out = a;
    for (auto& [name, m] : out.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end()) throw ConfigError("tensor " + name + " missing from the second checkpoint");
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
            throw ConfigError("tensor " + name + " differs in shape");
        const auto bv = it->second.values();
        auto av = m.values();
        for (std::size_t k = 0; k < av.size(); ++k)
            av[k] = static_cast<float>(lambda * av[k] + (1.0 - lambda) * bv[k]);
    }
    if (b.tensors.size() != out.tensors.size()) throw ConfigError("checkpoints hold different tensor sets");
    return out;
}

std::vector<MaskedBlock> make_mlm_eval(std::span<const std::vector<TokenId>> sequences, double mask_prob,
                                       std::uint64_t mask_seed) {
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask probability must lie in (0, 1)");
    std::mt19937_64 rng(mask_seed);
    std::vector<MaskedBlock> out;
    for (const auto& body : sequences) {
        if (body.empty()) continue;
        MaskedBlock blk;
        blk.target = frame_sequence(body);
        blk.positions = sample_mask_positions(body.size(), mask_prob, rng);
        blk.input = blk.target;
        for (auto p : blk.positions) blk.input[p] = special::mask;
        out.push_back(std::move(blk));
    }
    if (out.empty()) throw ConfigError("evaluation data is empty");
    return out;
}

std::vector<MaskedBlock> make_pppl_blocks(std::span<const std::vector<TokenId>> sequences, double p,
                                          std::size_t block_size, std::size_t max_positions,
                                          std::uint64_t mask_seed) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("mask probability must lie in (0, 1)");
    if (max_positions < 3) throw ConfigError("model context is too short for evaluation blocks");
    const std::size_t len = std::min(block_size, max_positions - 2);
    if (len == 0) throw ConfigError("block size must be positive");
    std::vector<TokenId> stream;
    for (const auto& s : sequences) stream.insert(stream.end(), s.begin(), s.end());
    if (stream.empty()) throw ConfigError("evaluation data is empty");

    std::mt19937_64 rng(mask_seed);
    std::bernoulli_distribution coin(p);
    std::vector<MaskedBlock> out;
    for (std::size_t start = 0; start < stream.size(); start += len) {
        const std::size_t end = std::min(stream.size(), start + len);
        MaskedBlock blk;
        blk.target = frame_sequence(std::span(stream).subspan(start, end - start));
        blk.input = blk.target;
        for (std::size_t i = 0; i < end - start; ++i)
            if (coin(rng)) {
                blk.positions.push_back(i + 1);
                blk.input[i + 1] = special::mask;
            }
        if (!blk.positions.empty()) out.push_back(std::move(blk));
    }
    return out;
}

double masked_loss(const LogitsFn& logits, std::span<const MaskedBlock> blocks) {
    std::vector<double> sums(blocks.size());
    parallel_for(blocks.size(), [&](std::size_t i) {
        const auto& b = blocks[i];
        if (b.positions.empty()) return;
        sums[i] = masked_cross_entropy(logits(b), b.target, b.positions) * static_cast<double>(b.positions.size());
    });
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        total += sums[i];
        count += blocks[i].positions.size();
    }
    if (count == 0) throw ConfigError("no positions were masked in the evaluation data");
    return total / static_cast<double>(count);
}

double masked_loss(const Checkpoint& ckpt, std::span<const MaskedBlock> blocks) {
    return masked_loss([&](const MaskedBlock& b) { return forward(ckpt, b.input).logits; }, blocks);
}

double pseudo_perplexity(const LogitsFn& logits, std::span<const MaskedBlock> blocks) {
    return std::exp(masked_loss(logits, blocks));
}

double pseudo_perplexity(const Checkpoint& ckpt, std::span<const MaskedBlock> blocks) {
    return std::exp(masked_loss(ckpt, blocks));
}

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::mlm: return "mlm";
        case LossKind::pppl: return "pppl";
        case LossKind::classification: return "classification";
    }
    return {};
}

LossKind parse_loss_kind(const std::string& s) {
    for (auto k : {LossKind::mlm, LossKind::pppl, LossKind::classification})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown loss kind '" + s + "'");
}

std::vector<double> lambda_grid(std::size_t points) {
    if (points < 2) throw ConfigError("lambda grid needs at least 2 points");
    std::vector<double> g(points);
    for (std::size_t i = 0; i < points; ++i) g[i] = static_cast<double>(i) / static_cast<double>(points - 1);
    return g;
}

void MergeSpec::validate() const {
    if (lambdas.size() < 2) throw ConfigError("lambda grid needs at least 2 points");
    if (!std::is_sorted(lambdas.begin(), lambdas.end())) throw ConfigError("lambda grid must be sorted");
    for (double l : lambdas)
        if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("lambda grid values must lie in [0, 1]");
    if (lambdas.front() != 0.0 || lambdas.back() != 1.0) throw ConfigError("lambda grid must contain 0 and 1");
}

double loss_barrier(const BarrierReport& report) {
    return *std::max_element(report.losses.begin(), report.losses.end()) - report.endpoint_mean;
}

BarrierReport make_report(std::vector<double> lambdas, std::vector<double> losses, nlohmann::json metadata) {
    if (lambdas.size() != losses.size() || lambdas.empty()) throw ConfigError("lambda and loss counts differ");
    for (double v : losses)
        if (!std::isfinite(v)) throw NumericError("non-finite loss in barrier scan");
    auto at = [&](double lambda) {
        auto it = std::find(lambdas.begin(), lambdas.end(), lambda);
        if (it == lambdas.end()) throw ConfigError("lambda grid must contain 0 and 1");
        return losses[static_cast<std::size_t>(it - lambdas.begin())];
    };
    BarrierReport r;
    r.endpoint_mean = (at(0.0) + at(1.0)) / 2.0;
    r.lambdas = std::move(lambdas);
    r.losses = std::move(losses);
    r.metadata = metadata.is_null() ? nlohmann::json::object() : std::move(metadata);
    r.barrier = loss_barrier(r);
    return r;
}

BarrierReport barrier_scan(const Checkpoint& a, const Checkpoint& b, const MergeSpec& spec, const LossFn& loss,
                           nlohmann::json metadata) {
    spec.validate();
    std::vector<double> losses;
    for (double lambda : spec.lambdas) losses.push_back(loss(interpolate(a, b, lambda)));
    if (metadata.is_null()) metadata = nlohmann::json::object();
    metadata["loss"] = to_string(spec.loss);
    return make_report(spec.lambdas, std::move(losses), std::move(metadata));
}

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

std::string report_csv(const BarrierReport& report) {
    std::ostringstream out;
    out << "# metadata " << report.metadata.dump() << "\n";
    out << "lambda,loss\n";
    for (std::size_t i = 0; i < report.lambdas.size(); ++i)
        out << format_double(report.lambdas[i]) << "," << format_double(report.losses[i]) << "\n";
    return out.str();
}

void to_json(nlohmann::json& j, const BarrierReport& r) {
    j = {{"lambdas", r.lambdas},
         {"losses", r.losses},
         {"endpoint_mean", r.endpoint_mean},
         {"barrier", r.barrier},
         {"metadata", r.metadata}};
}

void from_json(const nlohmann::json& j, BarrierReport& r) {
    try {
        r = make_report(j.at("lambdas").get<std::vector<double>>(), j.at("losses").get<std::vector<double>>(),
                        j.value("metadata", nlohmann::json::object()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed barrier report: ") + e.what());
    }
}

}  // namespace permweave
