#include "permweave/activations.hpp"

#include <cmath>
#include <cstring>

#include "permweave/container.hpp"
#include "permweave/parallel.hpp"

namespace permweave {

JointFeatureStats JointFeatureStats::empty(const CapturePoint& point, std::size_t dim_a, std::size_t dim_b) {
    JointFeatureStats s;
    s.point = point;
    s.dim_a = dim_a;
    s.dim_b = dim_b;
    s.sum_a.assign(dim_a, 0.0);
    s.sumsq_a.assign(dim_a, 0.0);
    s.sum_b.assign(dim_b, 0.0);
    s.sumsq_b.assign(dim_b, 0.0);
    s.cross.assign(dim_a * dim_b, 0.0);
    return s;
}

void JointFeatureStats::add_rows(const Matrix& xa, const Matrix& xb, std::span<const std::size_t> rows) {
    if (xa.cols() != dim_a || xb.cols() != dim_b || xa.rows() != xb.rows())
        throw ConfigError("feature shapes do not match stats at " + point.name());
    std::vector<double> bv(dim_b);
    for (std::size_t r : rows) {
        const auto ar = xa.row(r);
        const auto br = xb.row(r);
        require_finite(ar, "captured features");
        require_finite(br, "captured features");
        for (std::size_t j = 0; j < dim_b; ++j) {
            bv[j] = br[j];
            sum_b[j] += bv[j];
            sumsq_b[j] += bv[j] * bv[j];
        }
        for (std::size_t i = 0; i < dim_a; ++i) {
            const double ai = ar[i];
            sum_a[i] += ai;
            sumsq_a[i] += ai * ai;
            double* c = cross.data() + i * dim_b;
            for (std::size_t j = 0; j < dim_b; ++j) c[j] += ai * bv[j];
        }
        ++n;
    }
}

void JointFeatureStats::add_all(const Matrix& xa, const Matrix& xb) {
    std::vector<std::size_t> rows(xa.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    add_rows(xa, xb, rows);
}

void JointFeatureStats::merge(const JointFeatureStats& other) {
    if (other.dim_a != dim_a || other.dim_b != dim_b) throw ConfigError("cannot merge stats of different widths");
    n += other.n;
    auto add = [](std::vector<double>& dst, const std::vector<double>& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    add(sum_a, other.sum_a);
    add(sum_b, other.sum_b);
    add(sumsq_a, other.sumsq_a);
    add(sumsq_b, other.sumsq_b);
    add(cross, other.cross);
}

JointFeatureStats concat_tokens(std::span<const JointFeatureStats* const> parts, const CapturePoint& label) {
    if (parts.empty()) throw ConfigError("nothing to concatenate");
    JointFeatureStats out = JointFeatureStats::empty(label, parts[0]->dim_a, parts[0]->dim_b);
    for (const auto* p : parts) out.merge(*p);
    return out;
}

CorrelationMatrix finalize_correlation(const JointFeatureStats& s) {
    if (s.n < 2) throw ConfigError("correlation at " + s.point.name() + " needs at least 2 tokens, have " +
                                   std::to_string(s.n));
    const double n = static_cast<double>(s.n);
    auto moments = [n](const std::vector<double>& sum, const std::vector<double>& sumsq) {
        std::vector<double> mean(sum.size()), inv_std(sum.size());
        for (std::size_t i = 0; i < sum.size(); ++i) {
            mean[i] = sum[i] / n;
            const double var = std::max(0.0, sumsq[i] / n - mean[i] * mean[i]);
            const bool dead = var <= kDeadFeatureTolerance * (1.0 + mean[i] * mean[i]);
            inv_std[i] = dead ? 0.0 : 1.0 / std::sqrt(std::max(var, kStdFloor));
        }
        return std::pair{mean, inv_std};
    };
    const auto [mean_a, inv_a] = moments(s.sum_a, s.sumsq_a);
    const auto [mean_b, inv_b] = moments(s.sum_b, s.sumsq_b);
    CorrelationMatrix out{Matrix(s.dim_a, s.dim_b), s.point, s.n};
    for (std::size_t i = 0; i < s.dim_a; ++i) {
        if (inv_a[i] == 0.0) continue;
        for (std::size_t j = 0; j < s.dim_b; ++j) {
            if (inv_b[j] == 0.0) continue;
            const double cov = s.cross[i * s.dim_b + j] / n - mean_a[i] * mean_b[j];
            out.values(i, j) = static_cast<float>(cov * inv_a[i] * inv_b[j]);
        }
    }
    return out;
}

bool default_token_filter(TokenId t) { return t != special::pad; }

StatsMap capture_joint(const Checkpoint& a, const Checkpoint& b, std::span<const std::vector<TokenId>> inputs,
                       const CaptureSpec& capture, std::uint64_t token_budget, const TokenFilter& filter) {
    if (!(a.config == b.config)) throw ConfigError("capture_joint: the two checkpoints have different configs");
    validate_capture_spec(a.config, capture);
    if (capture.empty()) throw ConfigError("capture_joint: no capture points requested");

    StatsMap stats;
    for (const auto& p : capture) {
        const std::size_t w = capture_width(a.config, p);
        stats.emplace(p, JointFeatureStats::empty(p, w, w));
    }

    // Forward passes run in parallel chunks; accumulation stays in input order.
    constexpr std::size_t kChunk = 32;
    std::uint64_t seen = 0;
    for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
        if (token_budget && seen >= token_budget) break;
        const std::size_t count = std::min(kChunk, inputs.size() - start);
        std::vector<std::map<CapturePoint, Matrix>> caps_a(count), caps_b(count);
        parallel_for(count, [&](std::size_t k) {
            encode(a, inputs[start + k], capture, &caps_a[k]);
            encode(b, inputs[start + k], capture, &caps_b[k]);
        });
        for (std::size_t k = 0; k < count && !(token_budget && seen >= token_budget); ++k) {
            const auto& seq = inputs[start + k];
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < seq.size(); ++i) {
                if (token_budget && seen + rows.size() >= token_budget) break;
                if (filter(seq[i])) rows.push_back(i);
            }
            for (auto& [p, s] : stats) s.add_rows(caps_a[k].at(p), caps_b[k].at(p), rows);
            seen += rows.size();
        }
    }
    if (seen == 0) throw ConfigError("no tokens captured");
    return stats;
}

namespace {
constexpr std::string_view kStatsMagic = "PWS1";
}

std::vector<std::uint8_t> serialize_stats(const StatsMap& stats, const TransformerConfig& config) {
    nlohmann::json points = nlohmann::json::object();
    std::vector<std::uint8_t> payload;
    auto put = [&payload](const std::vector<double>& v) {
        nlohmann::json loc = {{"offset", payload.size()}, {"len", v.size() * sizeof(double)}};
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(v.data());
        payload.insert(payload.end(), bytes, bytes + v.size() * sizeof(double));
        return loc;
    };
    for (const auto& [p, s] : stats) {
        nlohmann::json entry = {{"n", s.n}, {"dim_a", s.dim_a}, {"dim_b", s.dim_b}};
        entry["sum_a"] = put(s.sum_a);
        entry["sum_b"] = put(s.sum_b);
        entry["sumsq_a"] = put(s.sumsq_a);
        entry["sumsq_b"] = put(s.sumsq_b);
        entry["cross"] = put(s.cross);
        points[p.name()] = entry;
    }
    const nlohmann::json header = {{"config", config}, {"dtype", "f64"}, {"points", points}};
    return write_container(kStatsMagic, header, payload);
}

std::pair<StatsMap, TransformerConfig> deserialize_stats(std::span<const std::uint8_t> bytes) {
    const ContainerView view = read_container(bytes, kStatsMagic);
    TransformerConfig config;
    StatsMap stats;
    try {
        config = view.header.at("config").get<TransformerConfig>();
        for (const auto& [name, e] : view.header.at("points").items()) {
            const CapturePoint p = CapturePoint::parse(name);
            JointFeatureStats s = JointFeatureStats::empty(p, e.at("dim_a").get<std::size_t>(),
                                                           e.at("dim_b").get<std::size_t>());
            s.n = e.at("n").get<std::uint64_t>();
            auto take = [&](const char* field, std::vector<double>& dst) {
                const std::uint64_t off = e.at(field).at("offset").get<std::uint64_t>();
                const std::uint64_t len = e.at(field).at("len").get<std::uint64_t>();
                if (len != dst.size() * sizeof(double))
                    throw FormatError("stats field " + name + "." + field + " has the wrong length");
                if (off > view.payload.size() || len > view.payload.size() - off)
                    throw FormatError("stats field " + name + "." + field + " is truncated");
                std::memcpy(dst.data(), view.payload.data() + off, len);
            };
            take("sum_a", s.sum_a);
            take("sum_b", s.sum_b);
            take("sumsq_a", s.sumsq_a);
            take("sumsq_b", s.sumsq_b);
            take("cross", s.cross);
            stats.emplace(p, std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt stats header: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("corrupt stats header: ") + e.what());
    }
    return {std::move(stats), config};
}

void save_stats(const StatsMap& stats, const TransformerConfig& config, const std::filesystem::path& path) {
    write_file(path, serialize_stats(stats, config));
}

std::pair<StatsMap, TransformerConfig> load_stats(const std::filesystem::path& path) {
    return deserialize_stats(read_file(path));
}

}  // namespace permweave
