#include "permweave/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "permweave/parallel.hpp"

namespace permweave {

std::string to_string(MhaMode m) {
    switch (m) {
        case MhaMode::head_perm: return "head_perm";
        case MhaMode::monotonic: return "monotonic";
        case MhaMode::ignore_heads: return "ignore_heads";
    }
    return {};
}

std::string to_string(ResidualMode m) {
    switch (m) {
        case ResidualMode::identity: return "identity";
        case ResidualMode::first: return "first";
        case ResidualMode::last: return "last";
        case ResidualMode::all: return "all";
        case ResidualMode::separate: return "separate";
    }
    return {};
}

std::string to_string(Component c) {
    switch (c) {
        case Component::ff: return "ff";
        case Component::mha: return "mha";
        case Component::residual: return "residual";
    }
    return {};
}

MhaMode parse_mha_mode(const std::string& s) {
    for (auto m : {MhaMode::head_perm, MhaMode::monotonic, MhaMode::ignore_heads})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown mha mode '" + s + "'");
}

ResidualMode parse_residual_mode(const std::string& s) {
    for (auto m : {ResidualMode::identity, ResidualMode::first, ResidualMode::last, ResidualMode::all,
                   ResidualMode::separate})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown residual mode '" + s + "'");
}

Component parse_component(const std::string& s) {
    for (auto c : {Component::ff, Component::mha, Component::residual})
        if (to_string(c) == s) return c;
    throw ConfigError("unknown component '" + s + "'");
}

HeadPermutation HeadPermutation::identity(std::size_t num_heads, std::size_t d_k) {
    return {num_heads, d_k, Permutation::identity(num_heads),
            std::vector<Permutation>(num_heads, Permutation::identity(d_k))};
}

Permutation HeadPermutation::expand() const {
    std::vector<std::size_t> map(num_heads * d_k);
    for (std::size_t j = 0; j < num_heads; ++j)
        for (std::size_t i = 0; i < d_k; ++i) map[j * d_k + i] = outer[j] * d_k + inner[j][i];
    return Permutation(std::move(map));
}

HeadPermutation HeadPermutation::inverse() const {
    HeadPermutation inv{num_heads, d_k, outer.inverse(), std::vector<Permutation>(num_heads)};
    for (std::size_t k = 0; k < num_heads; ++k) inv.inner[k] = inner[inv.outer[k]].inverse();
    return inv;
}

MhaPermutation MhaPermutation::from_heads(HeadPermutation h) {
    Permutation full = h.expand();
    return {std::move(h), std::move(full)};
}

PermutationPlan PermutationPlan::identity(const TransformerConfig& config) {
    PermutationPlan plan;
    plan.ff.assign(config.num_layers, Permutation::identity(config.d_ff));
    plan.mha.assign(config.num_layers,
                    MhaPermutation::from_heads(HeadPermutation::identity(config.num_heads, config.d_k())));
    return plan;
}

PermutationPlan PermutationPlan::inverse() const {
    PermutationPlan inv = *this;
    for (auto& p : inv.ff) p = p.inverse();
    for (auto& m : inv.mha) {
        if (m.heads) m = MhaPermutation::from_heads(m.heads->inverse());
        else m.full = m.full.inverse();
    }
    if (inv.residual) inv.residual = inv.residual->inverse();
    for (auto& [a, f] : inv.residual_per_layer) {
        a = a.inverse();
        f = f.inverse();
    }
    return inv;
}

namespace {

nlohmann::json perm_json(const Permutation& p) { return std::vector<std::size_t>(p.map().begin(), p.map().end()); }

Permutation perm_from(const nlohmann::json& j) {
    try {
        return Permutation(j.get<std::vector<std::size_t>>());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("plan contains an invalid permutation: ") + e.what());
    }
}

}  // namespace

void to_json(nlohmann::json& j, const PermutationPlan& plan) {
    j = nlohmann::json::object();
    j["mha_mode"] = to_string(plan.mha_mode);
    j["residual_mode"] = to_string(plan.residual_mode);
    j["valid"] = plan.valid();
    nlohmann::json comps = nlohmann::json::array();
    for (auto c : plan.components) comps.push_back(to_string(c));
    j["components"] = comps;
    nlohmann::json ff = nlohmann::json::array();
    for (const auto& p : plan.ff) ff.push_back(perm_json(p));
    j["ff"] = ff;
    nlohmann::json mha = nlohmann::json::array();
    for (const auto& m : plan.mha) {
        nlohmann::json e;
        if (m.heads) {
            e["outer"] = perm_json(m.heads->outer);
            nlohmann::json inner = nlohmann::json::array();
            for (const auto& p : m.heads->inner) inner.push_back(perm_json(p));
            e["inner"] = inner;
        }
        e["map"] = perm_json(m.full);
        mha.push_back(e);
    }
    j["mha"] = mha;
    if (plan.residual_mode == ResidualMode::separate) {
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& [a, f] : plan.residual_per_layer) pairs.push_back({perm_json(a), perm_json(f)});
        j["residual"] = pairs;
    } else if (plan.residual) {
        j["residual"] = perm_json(*plan.residual);
    } else {
        j["residual"] = nullptr;
    }
}

void from_json(const nlohmann::json& j, PermutationPlan& plan) {
    try {
        plan = PermutationPlan{};
        plan.mha_mode = parse_mha_mode(j.at("mha_mode").get<std::string>());
        plan.residual_mode = parse_residual_mode(j.at("residual_mode").get<std::string>());
        for (const auto& c : j.value("components", nlohmann::json::array()))
            plan.components.insert(parse_component(c.get<std::string>()));
        for (const auto& p : j.at("ff")) plan.ff.push_back(perm_from(p));
        for (const auto& e : j.at("mha")) {
            if (e.contains("outer") && !e["outer"].is_null()) {
                HeadPermutation h;
                h.outer = perm_from(e["outer"]);
                for (const auto& p : e.at("inner")) h.inner.push_back(perm_from(p));
                h.num_heads = h.outer.size();
                if (h.inner.size() != h.num_heads || h.inner.empty())
                    throw FormatError("plan head permutation has " + std::to_string(h.inner.size()) +
                                      " inner maps for " + std::to_string(h.num_heads) + " heads");
                h.d_k = h.inner[0].size();
                for (const auto& p : h.inner)
                    if (p.size() != h.d_k) throw FormatError("plan inner permutations differ in size");
                plan.mha.push_back(MhaPermutation::from_heads(std::move(h)));
            } else {
                plan.mha.push_back({std::nullopt, perm_from(e.at("map"))});
            }
        }
        const auto& r = j.at("residual");
        if (plan.residual_mode == ResidualMode::separate) {
            for (const auto& pair : r) plan.residual_per_layer.emplace_back(perm_from(pair.at(0)), perm_from(pair.at(1)));
        } else if (!r.is_null()) {
            plan.residual = perm_from(r);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed plan: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed plan: ") + e.what());
    }
}

double captured_correlation(const CorrelationMatrix& c, const Permutation& p) {
    return assignment_total(c.values, p);
}

namespace {

void require_heads(const CorrelationMatrix& c, std::size_t num_heads) {
    if (c.values.rows() != c.values.cols()) throw ConfigError("attention correlation must be square");
    if (num_heads == 0 || c.values.rows() % num_heads != 0)
        throw ConfigError("d_model " + std::to_string(c.values.rows()) + " is not divisible by " +
                          std::to_string(num_heads) + " heads");
}

Matrix block(const Matrix& m, std::size_t row0, std::size_t col0, std::size_t size) {
    Matrix out(size, size);
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) out(i, j) = m(row0 + i, col0 + j);
    return out;
}

}  // namespace

Permutation ff_align(const CorrelationMatrix& c) {
    if (c.values.rows() != c.values.cols()) throw ConfigError("feed-forward correlation must be square");
    return solve_lap(c.values).perm;
}

HeadPermutation mha_align_headperm(const CorrelationMatrix& c, std::size_t num_heads) {
    require_heads(c, num_heads);
    const std::size_t dk = c.values.rows() / num_heads;
    // All h^2 pairs: cost(j, k) and cost(k, j) differ in general.
    std::vector<Assignment> pair(num_heads * num_heads);
    std::vector<double> cost(num_heads * num_heads);
    for (std::size_t j = 0; j < num_heads; ++j)
        for (std::size_t k = 0; k < num_heads; ++k) {
            pair[j * num_heads + k] = solve_lap(block(c.values, j * dk, k * dk, dk));
            cost[j * num_heads + k] = pair[j * num_heads + k].total;
        }
    HeadPermutation out{num_heads, dk, solve_lap(cost, num_heads).perm, {}};
    for (std::size_t j = 0; j < num_heads; ++j) out.inner.push_back(pair[j * num_heads + out.outer[j]].perm);
    return out;
}

HeadPermutation mha_align_monotonic(const CorrelationMatrix& c, std::size_t num_heads) {
    require_heads(c, num_heads);
    const std::size_t dk = c.values.rows() / num_heads;
    HeadPermutation out{num_heads, dk, Permutation::identity(num_heads), {}};
    for (std::size_t j = 0; j < num_heads; ++j) out.inner.push_back(solve_lap(block(c.values, j * dk, j * dk, dk)).perm);
    return out;
}

Permutation mha_align_ignore(const CorrelationMatrix& c) {
    if (c.values.rows() != c.values.cols()) throw ConfigError("attention correlation must be square");
    return solve_lap(c.values).perm;
}

namespace {

const JointFeatureStats& require_point(const StatsMap& stats, const CapturePoint& p) {
    auto it = stats.find(p);
    if (it == stats.end()) throw ConfigError("stats are missing capture point " + p.name());
    return it->second;
}

}  // namespace

ResidualAlignment residual_align(const StatsMap& stats, ResidualMode mode, std::size_t num_layers) {
    ResidualAlignment out;
    switch (mode) {
        case ResidualMode::identity: break;
        case ResidualMode::first:
            out.shared = solve_lap(finalize_correlation(require_point(stats, {CaptureKind::post_embedding, 0})).values).perm;
            break;
        case ResidualMode::last:
            out.shared = solve_lap(finalize_correlation(require_point(stats, {CaptureKind::final_ln, 0})).values).perm;
            break;
        case ResidualMode::all: {
            std::vector<const JointFeatureStats*> parts;
            for (std::size_t l = 0; l < num_layers; ++l) {
                parts.push_back(&require_point(stats, {CaptureKind::res_after_attn, l}));
                parts.push_back(&require_point(stats, {CaptureKind::res_after_ff, l}));
            }
            const auto merged = concat_tokens(parts, {CaptureKind::res_after_ff, num_layers - 1});
            out.shared = solve_lap(finalize_correlation(merged).values).perm;
            break;
        }
        case ResidualMode::separate:
            for (std::size_t l = 0; l < num_layers; ++l) {
                auto pa = solve_lap(finalize_correlation(require_point(stats, {CaptureKind::res_after_attn, l})).values).perm;
                auto pf = solve_lap(finalize_correlation(require_point(stats, {CaptureKind::res_after_ff, l})).values).perm;
                out.per_layer.emplace_back(std::move(pa), std::move(pf));
            }
            break;
    }
    return out;
}

CaptureSpec required_capture_points(const TransformerConfig& config, ResidualMode residual_mode,
                                    const std::set<Component>& components, CaptureKind ff_point) {
    if (ff_point != CaptureKind::ff_hidden && ff_point != CaptureKind::ff_preact)
        throw ConfigError("feed-forward features must come from ff_hidden or ff_preact");
    CaptureSpec spec;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        if (components.contains(Component::ff)) spec.insert({ff_point, l});
        if (components.contains(Component::mha)) spec.insert({CaptureKind::mha_preproj, l});
    }
    if (components.contains(Component::residual)) {
        switch (residual_mode) {
            case ResidualMode::identity: break;
            case ResidualMode::first: spec.insert({CaptureKind::post_embedding, 0}); break;
            case ResidualMode::last: spec.insert({CaptureKind::final_ln, 0}); break;
            case ResidualMode::all:
            case ResidualMode::separate:
                for (std::size_t l = 0; l < config.num_layers; ++l) {
                    spec.insert({CaptureKind::res_after_attn, l});
                    spec.insert({CaptureKind::res_after_ff, l});
                }
                break;
        }
    }
    return spec;
}

PermutationPlan build_plan(const StatsMap& stats, const TransformerConfig& config, MhaMode mha_mode,
                           ResidualMode residual_mode, const std::set<Component>& components,
                           CaptureKind ff_point) {
    if (components.empty()) throw ConfigError("at least one component must be selected for alignment");
    PermutationPlan plan = PermutationPlan::identity(config);
    plan.components = components;
    plan.mha_mode = components.contains(Component::mha) ? mha_mode : MhaMode::head_perm;
    plan.residual_mode = components.contains(Component::residual) ? residual_mode : ResidualMode::identity;
    const auto needed = required_capture_points(config, plan.residual_mode, components, ff_point);
    for (const auto& p : needed) require_point(stats, p);

    const std::size_t L = config.num_layers;
    if (components.contains(Component::ff)) {
        parallel_for(L, [&](std::size_t l) {
            plan.ff[l] = ff_align(finalize_correlation(stats.at({ff_point, l})));
        });
    }
    if (components.contains(Component::mha)) {
        parallel_for(L, [&](std::size_t l) {
            const auto c = finalize_correlation(stats.at({CaptureKind::mha_preproj, l}));
            switch (mha_mode) {
                case MhaMode::head_perm: plan.mha[l] = MhaPermutation::from_heads(mha_align_headperm(c, config.num_heads)); break;
                case MhaMode::monotonic: plan.mha[l] = MhaPermutation::from_heads(mha_align_monotonic(c, config.num_heads)); break;
                case MhaMode::ignore_heads: plan.mha[l] = {std::nullopt, mha_align_ignore(c)}; break;
            }
        });
    }
    if (components.contains(Component::residual)) {
        auto r = residual_align(stats, plan.residual_mode, L);
        plan.residual = std::move(r.shared);
        plan.residual_per_layer = std::move(r.per_layer);
    }
    return plan;
}

namespace {

Matrix permute_rows(const Matrix& m, const Permutation& p) {
    if (p.size() != m.rows()) throw ConfigError("row permutation size mismatch");
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto src = m.row(p[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Matrix permute_cols(const Matrix& m, const Permutation& p) {
    if (p.size() != m.cols()) throw ConfigError("column permutation size mismatch");
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto src = m.row(r);
        auto dst = out.row(r);
        for (std::size_t i = 0; i < m.cols(); ++i) dst[i] = src[p[i]];
    }
    return out;
}

void check_plan_shapes(const PermutationPlan& plan, const TransformerConfig& c) {
    auto fail = [](const std::string& what) { throw ConfigError("plan does not match config: " + what); };
    if (plan.ff.size() != c.num_layers || plan.mha.size() != c.num_layers) fail("layer count");
    for (const auto& p : plan.ff)
        if (p.size() != c.d_ff) fail("feed-forward permutation size");
    for (const auto& m : plan.mha) {
        if (m.full.size() != c.d_model) fail("attention permutation size");
        if (m.heads && (m.heads->num_heads != c.num_heads || m.heads->d_k != c.d_k())) fail("head structure");
    }
    if (plan.residual && plan.residual->size() != c.d_model) fail("residual permutation size");
    if (plan.residual_mode == ResidualMode::separate) {
        if (plan.residual_per_layer.size() != c.num_layers) fail("per-layer residual count");
        for (const auto& [a, f] : plan.residual_per_layer)
            if (a.size() != c.d_model || f.size() != c.d_model) fail("per-layer residual size");
    }
}

}  // namespace

Checkpoint apply_plan(const Checkpoint& ckpt_b, const PermutationPlan& plan, bool allow_invalid) {
    const auto& cfg = ckpt_b.config;
    if (!plan.valid() && !allow_invalid)
        throw ConfigError("plan (" + to_string(plan.mha_mode) + ", " + to_string(plan.residual_mode) +
                          ") is not function-preserving; pass the invalid-plan override to apply it");
    check_plan_shapes(plan, cfg);

    const Permutation id = Permutation::identity(cfg.d_model);
    const bool separate = plan.residual_mode == ResidualMode::separate;
    const Permutation& shared = plan.residual ? *plan.residual : id;
    // Residual basis entering layer l, leaving its attention block, and leaving its FF block.
    auto res_in = [&](std::size_t l) -> const Permutation& {
        if (!separate) return shared;
        return l == 0 ? id : plan.residual_per_layer[l - 1].second;
    };
    auto res_attn = [&](std::size_t l) -> const Permutation& { return separate ? plan.residual_per_layer[l].first : shared; };
    auto res_ff = [&](std::size_t l) -> const Permutation& { return separate ? plan.residual_per_layer[l].second : shared; };
    const Permutation& res_emb = separate ? id : shared;
    const Permutation& res_final = separate ? plan.residual_per_layer.back().second : shared;

    Checkpoint out = ckpt_b;
    auto& t = out.tensors;
    auto rows = [&](const std::string& name, const Permutation& p) { t.at(name) = permute_rows(t.at(name), p); };
    auto cols = [&](const std::string& name, const Permutation& p) { t.at(name) = permute_cols(t.at(name), p); };

    for (const auto* name : {&names::tok_emb, &names::pos_emb, &names::type_emb, &names::emb_ln_g, &names::emb_ln_b})
        cols(*name, res_emb);

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        auto N = [l](const char* s) { return names::layer(l, s); };
        const Permutation& pm = plan.mha[l].full;
        const Permutation& pf = plan.ff[l];
        for (const char* w : {"attn.Wq", "attn.Wk", "attn.Wv"}) {
            rows(N(w), pm);
            cols(N(w), res_in(l));
        }
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv"}) cols(N(b), pm);
        rows(N("attn.Wo"), res_attn(l));
        cols(N("attn.Wo"), pm);
        for (const char* v : {"attn.bo", "attn.ln.g", "attn.ln.b"}) cols(N(v), res_attn(l));

        rows(N("ff.W1"), pf);
        cols(N("ff.W1"), res_attn(l));
        cols(N("ff.b1"), pf);
        rows(N("ff.W2"), res_ff(l));
        cols(N("ff.W2"), pf);
        for (const char* v : {"ff.b2", "ff.ln.g", "ff.ln.b"}) cols(N(v), res_ff(l));
    }

    cols(names::mlm_dense, res_final);
    if (t.contains(names::cls_pool)) cols(names::cls_pool, res_final);
    return out;
}

double check_equivalence(const Checkpoint& a, const Checkpoint& b, std::span<const std::vector<TokenId>> probes) {
    if (!(a.config == b.config)) throw ConfigError("check_equivalence: configs differ");
    std::vector<double> worst(probes.size(), 0.0);
    parallel_for(probes.size(), [&](std::size_t i) {
        const Matrix la = forward(a, probes[i]).logits;
        const Matrix lb = forward(b, probes[i]).logits;
        double m = 0.0;
        for (std::size_t k = 0; k < la.size(); ++k)
            m = std::max(m, static_cast<double>(std::abs(la.values()[k] - lb.values()[k])));
        worst[i] = m;
    });
    return probes.empty() ? 0.0 : *std::max_element(worst.begin(), worst.end());
}

namespace {

Permutation shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t{0});
    std::shuffle(m.begin(), m.end(), rng);
    return Permutation(std::move(m));
}

}  // namespace

PermutationPlan random_plan(const TransformerConfig& config, MhaMode mha_mode, ResidualMode residual_mode,
                            std::mt19937_64& rng) {
    PermutationPlan plan = PermutationPlan::identity(config);
    plan.mha_mode = mha_mode;
    plan.residual_mode = residual_mode;
    plan.components = {Component::ff, Component::mha, Component::residual};
    for (auto& p : plan.ff) p = shuffled(config.d_ff, rng);
    for (auto& m : plan.mha) {
        if (mha_mode == MhaMode::ignore_heads) {
            m = {std::nullopt, shuffled(config.d_model, rng)};
            continue;
        }
        HeadPermutation h{config.num_heads, config.d_k(),
                          mha_mode == MhaMode::head_perm ? shuffled(config.num_heads, rng)
                                                         : Permutation::identity(config.num_heads),
                          {}};
        for (std::size_t j = 0; j < config.num_heads; ++j) h.inner.push_back(shuffled(config.d_k(), rng));
        m = MhaPermutation::from_heads(std::move(h));
    }
    if (residual_mode == ResidualMode::separate) {
        for (std::size_t l = 0; l < config.num_layers; ++l)
            plan.residual_per_layer.emplace_back(shuffled(config.d_model, rng), shuffled(config.d_model, rng));
    } else if (residual_mode != ResidualMode::identity) {
        plan.residual = shuffled(config.d_model, rng);
    }
    return plan;
}

}  // namespace permweave
