/*
 Copyright 2026 The pocp authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pocp/autodiff.hpp"

namespace pocp {

enum class Activation { Tanh, Relu };

/// Fully-connected stack: affine + activation per hidden layer, linear output.
/// widths includes input and output, so a 2-16-1 net is {2, 16, 1}.
struct MlpConfig {
    std::vector<int> widths;
    Activation act = Activation::Tanh;

    int layers() const { return static_cast<int>(widths.size()) - 1; }
    int in() const { return widths.front(); }
    int out() const { return widths.back(); }
};

/// Glorot-uniform weights, zero biases. Weight l is stored (in x out) so the
/// row-batched forward pass is x @ W + b.
inline void init_mlp(const MlpConfig& cfg, const std::string& prefix, ParamSet& ps, Rng& rng) {
    for (int l = 0; l < cfg.layers(); ++l) {
        int fi = cfg.widths[l], fo = cfg.widths[l + 1];
        double bound = std::sqrt(6.0 / (fi + fo));
        Tensor w(fi, fo);
        for (size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
        ps.entries.emplace(prefix + ".W" + std::to_string(l), std::move(w));
        ps.entries.emplace(prefix + ".b" + std::to_string(l), Tensor(1, fo, 0.0));
    }
}

/// Row-batched MLP forward. layer_names[l] = {weight name, bias name}; split
/// out so the final layer can live in a different partition than the rest.
inline Node mlp_forward(const MlpConfig& cfg,
                        const std::vector<std::pair<std::string, std::string>>& layer_names,
                        const ParamNodes& params, Node x) {
    if (x.cols() != cfg.in()) throw DimensionError("mlp_forward: input width mismatch");
    for (int l = 0; l < cfg.layers(); ++l) {
        x = add(matmul(x, params.at(layer_names[l].first)), params.at(layer_names[l].second));
        if (l + 1 < cfg.layers()) x = cfg.act == Activation::Tanh ? tanh_node(x) : relu(x);
    }
    return x;
}

inline std::vector<std::pair<std::string, std::string>> plain_layer_names(const MlpConfig& cfg,
                                                                          const std::string& prefix) {
    std::vector<std::pair<std::string, std::string>> names;
    for (int l = 0; l < cfg.layers(); ++l)
        names.emplace_back(prefix + ".W" + std::to_string(l), prefix + ".b" + std::to_string(l));
    return names;
}

// ---- SetONet ---------------------------------------------------------------

struct OperatorConfig {
    int ctx_width = 0;    // width of one context tuple
    int query_width = 0;  // state dim + 1 (normalized time)
    int d_u = 0;          // control dim
    int p = 64;           // basis count
    int phi_width = 128, phi_hidden = 3;
    int rho_width = 128, rho_hidden = 2;
    int trunk_width = 128, trunk_hidden = 3;
    bool use_bias = true;

    MlpConfig phi_cfg() const {
        std::vector<int> w{ctx_width};
        for (int i = 0; i < phi_hidden; ++i) w.push_back(phi_width);
        w.push_back(phi_width);
        return {w, Activation::Relu};
    }
    MlpConfig rho_cfg() const {
        std::vector<int> w{phi_width};
        for (int i = 0; i < rho_hidden; ++i) w.push_back(rho_width);
        w.push_back(p);
        return {w, Activation::Relu};
    }
    MlpConfig trunk_cfg() const {
        std::vector<int> w{query_width};
        for (int i = 0; i < trunk_hidden; ++i) w.push_back(trunk_width);
        w.push_back(p * d_u);
        return {w, Activation::Tanh};
    }
};

/// Branch (per-element phi -> mean pool -> rho), trunk, and output bias.
/// Parameter names carry their partition: branch.phi.*, branch.rho.*,
/// branch.last.* (final rho layer), trunk.*, trunk.last.*, bias.
struct OperatorModel {
    OperatorConfig cfg;
    ParamSet params;

    static OperatorModel init(const OperatorConfig& cfg, Rng& rng) {
        OperatorModel m;
        m.cfg = cfg;
        init_mlp(cfg.phi_cfg(), "branch.phi", m.params, rng);
        // rho: hidden layers under branch.rho, final layer under branch.last.
        MlpConfig rho = cfg.rho_cfg();
        MlpConfig rho_hidden{std::vector<int>(rho.widths.begin(), rho.widths.end() - 1), rho.act};
        init_mlp(rho_hidden, "branch.rho", m.params, rng);
        MlpConfig rho_last{{rho.widths[rho.layers() - 1], rho.widths[rho.layers()]}, rho.act};
        init_mlp(rho_last, "branch.last", m.params, rng);
        // trunk: hidden layers under trunk, final under trunk.last.
        MlpConfig trunk = cfg.trunk_cfg();
        MlpConfig trunk_hidden{std::vector<int>(trunk.widths.begin(), trunk.widths.end() - 1),
                               trunk.act};
        init_mlp(trunk_hidden, "trunk", m.params, rng);
        MlpConfig trunk_last{{trunk.widths[trunk.layers() - 1], trunk.widths[trunk.layers()]},
                             trunk.act};
        init_mlp(trunk_last, "trunk.last", m.params, rng);
        if (cfg.use_bias) m.params.entries.emplace("bias", Tensor(1, cfg.d_u, 0.0));
        return m;
    }

    std::vector<std::pair<std::string, std::string>> rho_layer_names() const {
        MlpConfig rho = cfg.rho_cfg();
        MlpConfig hidden{std::vector<int>(rho.widths.begin(), rho.widths.end() - 1), rho.act};
        auto names = plain_layer_names(hidden, "branch.rho");
        names.emplace_back("branch.last.W0", "branch.last.b0");
        return names;
    }
    std::vector<std::pair<std::string, std::string>> trunk_layer_names() const {
        MlpConfig trunk = cfg.trunk_cfg();
        MlpConfig hidden{std::vector<int>(trunk.widths.begin(), trunk.widths.end() - 1), trunk.act};
        auto names = plain_layer_names(hidden, "trunk");
        names.emplace_back("trunk.last.W0", "trunk.last.b0");
        return names;
    }
};

/// Coefficients c in R^p from a context set (rows of ctx are elements).
/// Mean pooling makes the result invariant to row order and well defined
/// for any element count m >= 1.
inline Node branch_encode(const OperatorModel& m, const ParamNodes& params, const Node& ctx) {
    if (ctx.rows() < 1) throw DimensionError("branch_encode: empty context");
    if (ctx.cols() != m.cfg.ctx_width) throw DimensionError("branch_encode: tuple width mismatch");
    Node h = mlp_forward(m.cfg.phi_cfg(), plain_layer_names(m.cfg.phi_cfg(), "branch.phi"), params, ctx);
    Node pooled = mean_rows(h);
    // rho is relu-activated on hidden layers, linear out; the config object
    // describes the full stack, the names route the final layer.
    return mlp_forward(m.cfg.rho_cfg(), m.rho_layer_names(), params, pooled);
}

/// Trunk output for a batch of queries. Row i holds the p*d_u basis values
/// at query i, laid out as d_u column blocks of p entries each:
/// column j*p + k = component j of basis function k.
inline Node trunk_eval(const OperatorModel& m, const ParamNodes& params, const Node& queries) {
    return mlp_forward(m.cfg.trunk_cfg(), m.trunk_layer_names(), params, queries);
}

/// u(y) = sum_k c_k b_k(y) + bias, batched over query rows; returns n x d_u.
inline Node operator_forward(const OperatorModel& m, const ParamNodes& params, const Node& ctx,
                             const Node& queries) {
    Node c = branch_encode(m, params, ctx);       // 1 x p
    Node basis = trunk_eval(m, params, queries);  // n x p*d_u
    Node ct = transpose_node(c);                  // p x 1
    std::vector<Node> comps;
    for (int j = 0; j < m.cfg.d_u; ++j)
        comps.push_back(matmul(slice(basis, 0, basis.rows(), j * m.cfg.p, (j + 1) * m.cfg.p), ct));
    Node out = concat(comps, 1);
    if (m.cfg.use_bias) out = add(out, params.at("bias"));
    return out;
}

/// Basis matrix at a single query, reshaped to p x d_u.
inline Tensor trunk_basis(const OperatorModel& m, const ParamNodes& params, const Tensor& y) {
    Node b = trunk_eval(m, params, Node::constant(y));
    Tensor out(m.cfg.p, m.cfg.d_u);
    for (int k = 0; k < m.cfg.p; ++k)
        for (int j = 0; j < m.cfg.d_u; ++j) out(k, j) = b.value()(0, j * m.cfg.p + k);
    return out;
}

// ---- adaptation partitions ---------------------------------------------------

enum class AdaptStrategy { Full, Branch, LastBranch, LastTrunk, LastBoth };

inline AdaptStrategy parse_strategy(const std::string& s) {
    if (s == "full") return AdaptStrategy::Full;
    if (s == "branch") return AdaptStrategy::Branch;
    if (s == "last_branch") return AdaptStrategy::LastBranch;
    if (s == "last_trunk") return AdaptStrategy::LastTrunk;
    if (s == "last_both") return AdaptStrategy::LastBoth;
    throw ConfigError("unknown adaptation strategy: " + s);
}

inline std::string strategy_name(AdaptStrategy s) {
    switch (s) {
        case AdaptStrategy::Full: return "full";
        case AdaptStrategy::Branch: return "branch";
        case AdaptStrategy::LastBranch: return "last_branch";
        case AdaptStrategy::LastTrunk: return "last_trunk";
        case AdaptStrategy::LastBoth: return "last_both";
    }
    throw ConfigError("bad strategy enum");
}

inline bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}

/// Names of the parameters trainable under the given strategy.
inline std::set<std::string> partition_mask(const ParamSet& params, AdaptStrategy strategy) {
    std::set<std::string> out;
    for (const auto& [name, t] : params.entries) {
        bool pick = false;
        switch (strategy) {
            case AdaptStrategy::Full: pick = true; break;
            case AdaptStrategy::Branch:
                pick = starts_with(name, "branch.") || name == "bias";
                break;
            case AdaptStrategy::LastBranch:
                pick = starts_with(name, "branch.last.") || name == "bias";
                break;
            case AdaptStrategy::LastTrunk:
                pick = starts_with(name, "trunk.last.") || name == "bias";
                break;
            case AdaptStrategy::LastBoth:
                pick = starts_with(name, "branch.last.") || starts_with(name, "trunk.last.") ||
                       name == "bias";
                break;
        }
        if (pick) out.insert(name);
    }
    return out;
}

// ---- MAML baseline model -----------------------------------------------------

/// Monolithic MLP policy (x, t/T) -> u; receives no task context.
struct MlpModel {
    MlpConfig cfg;
    ParamSet params;

    static MlpModel init(int in, int out, int width, int hidden, Rng& rng) {
        MlpModel m;
        std::vector<int> w{in};
        for (int i = 0; i < hidden; ++i) w.push_back(width);
        w.push_back(out);
        m.cfg = {w, Activation::Tanh};
        init_mlp(m.cfg, "net", m.params, rng);
        return m;
    }

    Node forward(const ParamNodes& params, const Node& queries) const {
        return mlp_forward(cfg, plain_layer_names(cfg, "net"), params, queries);
    }
};

inline std::string operator_config_line(const OperatorConfig& c) {
    std::ostringstream os;
    os << "ctx_width=" << c.ctx_width << " query_width=" << c.query_width << " d_u=" << c.d_u
       << " p=" << c.p << " phi_width=" << c.phi_width << " phi_hidden=" << c.phi_hidden
       << " rho_width=" << c.rho_width << " rho_hidden=" << c.rho_hidden
       << " trunk_width=" << c.trunk_width << " trunk_hidden=" << c.trunk_hidden
       << " use_bias=" << (c.use_bias ? 1 : 0);
    return os.str();
}

inline OperatorConfig parse_operator_config_line(const std::string& line) {
    OperatorConfig c;
    std::istringstream is(line);
    std::string kv;
    while (is >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw DataError("bad config token: " + kv);
        std::string key = kv.substr(0, eq);
        int val = std::stoi(kv.substr(eq + 1));
        if (key == "ctx_width") c.ctx_width = val;
        else if (key == "query_width") c.query_width = val;
        else if (key == "d_u") c.d_u = val;
        else if (key == "p") c.p = val;
        else if (key == "phi_width") c.phi_width = val;
        else if (key == "phi_hidden") c.phi_hidden = val;
        else if (key == "rho_width") c.rho_width = val;
        else if (key == "rho_hidden") c.rho_hidden = val;
        else if (key == "trunk_width") c.trunk_width = val;
        else if (key == "trunk_hidden") c.trunk_hidden = val;
        else if (key == "use_bias") c.use_bias = val != 0;
        else throw DataError("unknown config key: " + key);
    }
    return c;
}

inline std::string mlp_config_line(const MlpConfig& c) {
    std::ostringstream os;
    os << "widths=";
    for (size_t i = 0; i < c.widths.size(); ++i) os << (i ? "," : "") << c.widths[i];
    os << " act=" << (c.act == Activation::Tanh ? "tanh" : "relu");
    return os.str();
}

inline MlpConfig parse_mlp_config_line(const std::string& line) {
    MlpConfig c;
    std::istringstream is(line);
    std::string kv;
    while (is >> kv) {
        auto eq = kv.find('=');
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "widths") {
            std::istringstream ws(val);
            std::string tok;
            while (std::getline(ws, tok, ',')) c.widths.push_back(std::stoi(tok));
        } else if (key == "act") {
            c.act = val == "tanh" ? Activation::Tanh : Activation::Relu;
        } else {
            throw DataError("unknown mlp config key: " + key);
        }
    }
    return c;
}

// ---- checkpoints ---------------------------------------------------------------

/// Text checkpoint: header, config line, then one "param name rows cols"
/// line plus a row-major value line per tensor. %.17g values round-trip
/// doubles exactly.
inline void save_checkpoint(const std::string& path, const std::string& kind,
                            const std::string& variant, const std::string& config_line,
                            const ParamSet& params) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out << "pocp-checkpoint v1\n";
    out << "kind " << kind << "\n";
    out << "variant " << variant << "\n";
    out << "config " << config_line << "\n";
    for (const auto& [name, t] : params.entries) {
        out << "param " << name << " " << t.rows() << " " << t.cols() << "\n";
        for (size_t i = 0; i < t.size(); ++i) out << (i ? " " : "") << fmt_g17(t[i]);
        out << "\n";
    }
    out << "end\n";
    if (!out) throw DataError("checkpoint write failed: " + path);
}

struct Checkpoint {
    std::string kind;
    std::string variant;
    std::string config_line;
    ParamSet params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "pocp-checkpoint v1")
        throw DataError("bad checkpoint header in " + path);
    Checkpoint ck;
    auto expect_tag = [&](const std::string& tag) {
        if (!std::getline(in, line) || line.rfind(tag + " ", 0) != 0)
            throw DataError("expected '" + tag + "' line in " + path);
        return line.substr(tag.size() + 1);
    };
    ck.kind = expect_tag("kind");
    ck.variant = expect_tag("variant");
    ck.config_line = expect_tag("config");
    while (std::getline(in, line)) {
        if (line == "end") return ck;
        std::istringstream hdr(line);
        std::string tag, name;
        int rows, cols;
        hdr >> tag >> name >> rows >> cols;
        if (tag != "param" || hdr.fail()) throw DataError("corrupt param header in " + path);
        if (!std::getline(in, line)) throw DataError("truncated checkpoint: " + path);
        Tensor t(rows, cols);
        const char* s = line.c_str();
        char* endp = nullptr;
        for (size_t i = 0; i < t.size(); ++i) {
            t[i] = std::strtod(s, &endp);
            if (endp == s) throw DataError("corrupt values for " + name + " in " + path);
            s = endp;
        }
        ck.params.entries.emplace(name, std::move(t));
    }
    throw DataError("truncated checkpoint (missing end): " + path);
}

}  // namespace pocp
