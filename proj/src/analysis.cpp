#include "malunet/analysis.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"

namespace malunet {

long long CostReport::total_params() const {
    long long t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
}

long long CostReport::total_macs() const {
    long long t = 0;
    for (const auto& r : rows) t += r.macs;
    return t;
}

long long CostReport::total_elementwise() const {
    long long t = 0;
    for (const auto& r : rows) t += r.elementwise;
    return t;
}

std::string CostReport::to_text(int flops_per_mac) const {
    std::ostringstream os;
    std::size_t name_w = 5;
    for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
    os << config_name << " @ " << batch << "x" << height << "x" << width << "\n";
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "layer" << std::setw(12) << "kind"
       << std::right << std::setw(12) << "params" << std::setw(16) << "macs" << std::setw(16) << "elementwise"
       << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::setw(12) << r.kind
           << std::right << std::setw(12) << r.params << std::setw(16) << r.macs * flops_per_mac << std::setw(16)
           << r.elementwise << "\n";
    }
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "total" << std::setw(12) << "" << std::right
       << std::setw(12) << total_params() << std::setw(16) << total_macs() * flops_per_mac << std::setw(16)
       << total_elementwise() << "\n";
    os << std::fixed << std::setprecision(4) << "params: " << static_cast<double>(total_params()) / 1e6
       << " M, " << (flops_per_mac == 1 ? "gflops(=gmacs): " : "gflops(strict): ")
       << static_cast<double>(total_macs() * flops_per_mac) / 1e9 << " G\n";
    return os.str();
}

std::string CostReport::to_json(int flops_per_mac) const {
    nlohmann::json j;
    j["config"] = config_name;
    j["batch"] = batch;
    j["height"] = height;
    j["width"] = width;
    j["flops_per_mac"] = flops_per_mac;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"name", r.name},
                             {"kind", r.kind},
                             {"params", r.params},
                             {"flops", r.macs * flops_per_mac},
                             {"elementwise", r.elementwise}});
    }
    j["total_params"] = total_params();
    j["total_flops"] = total_macs() * flops_per_mac;
    j["total_elementwise"] = total_elementwise();
    j["params_millions"] = static_cast<double>(total_params()) / 1e6;
    j["gflops"] = static_cast<double>(total_macs() * flops_per_mac) / 1e9;
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// row emission
// ---------------------------------------------------------------------------

namespace {

struct Walker {
    CostReport rep;
    std::int64_t batch = 1;
    bool norm = true;
    bool act = true;

    void conv2d_row(const std::string& name, int cin, int cout, int k, int groups, bool bias, std::int64_t h,
                    std::int64_t w) {
        CostRow r{name, "conv2d", 0, 0, 0};
        r.params = 1LL * cout * (cin / groups) * k * k + (bias ? cout : 0);
        r.macs = batch * h * w * cout * (cin / groups) * k * k;
        rep.rows.push_back(r);
    }

    void conv1d_row(const std::string& name, int cin, int cout, int k, bool bias, std::int64_t l_out) {
        CostRow r{name, "conv1d", 0, 0, 0};
        r.params = 1LL * cout * cin * k + (bias ? cout : 0);
        r.macs = batch * l_out * cout * cin * k;
        rep.rows.push_back(r);
    }

    void linear_row(const std::string& name, int n, int m) {
        CostRow r{name, "linear", 0, 0, 0};
        r.params = 1LL * m * n + m;
        r.macs = batch * m * n;
        rep.rows.push_back(r);
    }

    void norm_row(const std::string& name, int c, std::int64_t h, std::int64_t w) {
        rep.rows.push_back({name, "groupnorm", 2LL * c, 0, batch * c * h * w});
    }

    void elem_row(const std::string& name, const std::string& kind, std::int64_t count) {
        rep.rows.push_back({name, kind, 0, 0, batch * count});
    }

    // depthwise-separable pair
    void dwsep_rows(const std::string& prefix, int cin, int cout, int k, bool pw_bias, std::int64_t h,
                    std::int64_t w) {
        conv2d_row(prefix + ".dw", cin, cin, k, cin, true, h, w);
        conv2d_row(prefix + ".pw", cin, cout, 1, 1, pw_bias, h, w);
    }

    void dga_rows(const std::string& p, int c, std::int64_t h, std::int64_t w) {
        const int q = c / 4;
        for (int j = 0; j < 4; ++j) {
            const std::string b = p + ".branch" + std::to_string(j);
            dwsep_rows(b, q, q, 3, !norm, h, w);
            if (norm) norm_row(b + ".norm", q, h, w);
            if (act) elem_row(b + ".act", "activation", q * h * w);
        }
        conv2d_row(p + ".fuse", c, c, 1, 1, !norm, h, w);
        if (norm) norm_row(p + ".fuse_norm", c, h, w);
        if (act) elem_row(p + ".fuse_act", "activation", c * h * w);
        dwsep_rows(p + ".att", c, c, 3, true, h, w);
        elem_row(p + ".att_sigmoid", "sigmoid", c * h * w);
        dwsep_rows(p + ".pre", c, c, 3, true, h, w);
        elem_row(p + ".gate_mul", "mul", c * h * w);
        dwsep_rows(p + ".post", c, c, 3, true, h, w);
        conv2d_row(p + ".res", c, c, 1, 1, true, h, w);
        elem_row(p + ".res_add", "add", c * h * w);
    }

    void iea_rows(const std::string& p, int c, std::int64_t h, std::int64_t w, bool double_norm) {
        const std::int64_t l = h * w;
        conv2d_row(p + ".entry", c, c, 1, 1, true, h, w);
        conv1d_row(p + ".m1", c, 4 * c, 1, true, l);
        if (double_norm) elem_row(p + ".double_norm", "normalize", 2LL * 4 * c * l);
        conv1d_row(p + ".m2", 4 * c, c, 1, true, l);
        conv2d_row(p + ".exit", c, c, 1, 1, true, h, w);
        elem_row(p + ".res_add", "add", c * l);
    }

    // counting-only external attention with 64 memory units
    void ea_rows(const std::string& p, int c, std::int64_t h, std::int64_t w) {
        const std::int64_t l = h * w;
        conv2d_row(p + ".entry", c, c, 1, 1, true, h, w);
        conv1d_row(p + ".m1", c, 64, 1, true, l);
        elem_row(p + ".double_norm", "normalize", 2LL * 64 * l);
        conv1d_row(p + ".m2", 64, c, 1, true, l);
        conv2d_row(p + ".exit", c, c, 1, 1, true, h, w);
        elem_row(p + ".res_add", "add", c * l);
    }
};

void emit_stage(Walker& wk, const ArchConfig& cfg, int i, bool decoder, std::int64_t h, std::int64_t w) {
    const std::string p = (decoder ? "dec" : "enc") + std::to_string(i);
    const int cin_enc = cfg.block_width(i);
    const int cout_enc = cfg.stage_channels[static_cast<std::size_t>(i - 1)];
    const int cin = decoder ? cout_enc : cin_enc;
    const int cout = decoder ? cin_enc : cout_enc;
    const StageKind kind = (decoder && !cfg.decoder_mirrors_encoder) ? StageKind::PlainConv : cfg.kind_of(i);
    const int block_c = decoder ? cout : cin;
    const bool block_stage = kind == StageKind::IeaDga || kind == StageKind::DgaIea || kind == StageKind::DgaOnly;

    auto transition = [&]() {
        wk.conv2d_row(p + (block_stage ? ".trans" : ".conv"), cin, cout, block_stage ? 1 : 3, 1, !wk.norm, h, w);
        if (wk.norm) wk.norm_row(p + ".norm", cout, h, w);
        if (wk.act) wk.elem_row(p + ".act", "activation", 1LL * cout * h * w);
    };

    if (!decoder) {
        switch (kind) {
            case StageKind::PlainConv: break;
            case StageKind::IeaConv: wk.iea_rows(p + ".iea", block_c, h, w, cfg.iea_double_norm); break;
            case StageKind::EaConv: wk.ea_rows(p + ".ea", block_c, h, w); break;
            case StageKind::IeaDga:
                wk.iea_rows(p + ".iea", block_c, h, w, cfg.iea_double_norm);
                wk.dga_rows(p + ".dga", block_c, h, w);
                break;
            case StageKind::DgaIea:
                wk.dga_rows(p + ".dga", block_c, h, w);
                wk.iea_rows(p + ".iea", block_c, h, w, cfg.iea_double_norm);
                break;
            case StageKind::DgaOnly: wk.dga_rows(p + ".dga", block_c, h, w); break;
        }
        transition();
        return;
    }
    transition();
    switch (kind) {
        case StageKind::PlainConv: break;
        case StageKind::IeaConv: wk.iea_rows(p + ".iea", block_c, h, w, cfg.iea_double_norm); break;
        case StageKind::EaConv: wk.ea_rows(p + ".ea", block_c, h, w); break;
        case StageKind::IeaDga:
            wk.dga_rows(p + ".dga", block_c, h, w);
            wk.iea_rows(p + ".iea", block_c, h, w, cfg.iea_double_norm);
            break;
        case StageKind::DgaIea:
            wk.iea_rows(p + ".iea", block_c, h, w, cfg.iea_double_norm);
            wk.dga_rows(p + ".dga", block_c, h, w);
            break;
        case StageKind::DgaOnly: wk.dga_rows(p + ".dga", block_c, h, w); break;
    }
}

void emit_classic_unet(Walker& wk, const ArchConfig& cfg, std::int64_t H, std::int64_t W) {
    const auto& ch = cfg.stage_channels;
    int cin = cfg.in_channels;
    for (int i = 1; i <= 5; ++i) {
        const std::int64_t h = H >> (i - 1), w = W >> (i - 1);
        const int c = ch[static_cast<std::size_t>(i - 1)];
        const std::string p = "unet.enc" + std::to_string(i);
        wk.conv2d_row(p + ".conv1", cin, c, 3, 1, true, h, w);
        wk.elem_row(p + ".act1", "activation", 1LL * c * h * w);
        wk.conv2d_row(p + ".conv2", c, c, 3, 1, true, h, w);
        wk.elem_row(p + ".act2", "activation", 1LL * c * h * w);
        if (i < 5) wk.elem_row(p + ".pool", "maxpool", 1LL * c * (h / 2) * (w / 2));
        cin = c;
    }
    for (int j = 4; j >= 1; --j) {
        const std::int64_t h = H >> (j - 1), w = W >> (j - 1);
        const int c = ch[static_cast<std::size_t>(j - 1)];
        const int cdeep = ch[static_cast<std::size_t>(j)];
        const std::string p = "unet.dec" + std::to_string(j);
        // transposed conv, kernel 2 stride 2: every output pixel receives one
        // kernel tap per (cin,cout) pair
        wk.rep.rows.push_back({p + ".upconv", "convT2d", 1LL * cdeep * c * 4 + c, wk.batch * h * w * c * cdeep, 0});
        wk.elem_row(p + ".concat", "concat", 2LL * c * h * w);
        wk.conv2d_row(p + ".conv1", 2 * c, c, 3, 1, true, h, w);
        wk.elem_row(p + ".act1", "activation", 1LL * c * h * w);
        wk.conv2d_row(p + ".conv2", c, c, 3, 1, true, h, w);
        wk.elem_row(p + ".act2", "activation", 1LL * c * h * w);
    }
    wk.conv2d_row("unet.head", ch[0], cfg.out_channels, 1, 1, true, H, W);
    wk.elem_row("unet.sigmoid", "sigmoid", 1LL * cfg.out_channels * H * W);
}

}  // namespace

CostReport cost_report(const ArchConfig& cfg, int height, int width, std::int64_t batch) {
    cfg.validate();
    const int f = cfg.downsample_factor();
    if (height <= 0 || width <= 0 || height % f != 0 || width % f != 0) {
        throw ConfigError(cfg.name + ": input " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be divisible by " + std::to_string(f));
    }
    Walker wk;
    wk.batch = batch;
    wk.norm = cfg.with_norm;
    wk.act = cfg.with_act;
    wk.rep.config_name = cfg.name;
    wk.rep.batch = batch;
    wk.rep.height = height;
    wk.rep.width = width;

    if (cfg.classic_five_stage) {
        emit_classic_unet(wk, cfg, height, width);
        return wk.rep;
    }

    const int S = cfg.stages();
    // encoder: stage i convolves at H/2^(i-1) and pools afterwards (except the
    // deepest stage)
    for (int i = 1; i <= S; ++i) {
        const std::int64_t h = height >> (i - 1), w = width >> (i - 1);
        emit_stage(wk, cfg, i, false, h, w);
        if (i < S) {
            wk.elem_row("enc" + std::to_string(i) + ".pool", "maxpool",
                        1LL * cfg.stage_channels[static_cast<std::size_t>(i - 1)] * (h / 2) * (w / 2));
        }
    }
    // bridges act on the pooled skips t_i at H/2^i
    const bool has_sab =
        cfg.bridges == BridgeMode::SabOnly || cfg.bridges == BridgeMode::SabFirst || cfg.bridges == BridgeMode::CabFirst;
    const bool has_cab =
        cfg.bridges == BridgeMode::CabOnly || cfg.bridges == BridgeMode::SabFirst || cfg.bridges == BridgeMode::CabFirst;
    if (has_sab) {
        CostRow r{"sab.conv", "conv2d", SabBlock::param_count(), 0, 0};
        long long elem = 0;
        for (int i = 1; i <= S - 1; ++i) {
            const std::int64_t h = height >> i, w = width >> i;
            r.macs += batch * h * w * 1 * 2 * 49;
            elem += batch * (2LL + cfg.stage_channels[static_cast<std::size_t>(i - 1)] * 2LL + 1LL) * h * w;
        }
        wk.rep.rows.push_back(r);
        wk.rep.rows.push_back({"sab.elementwise", "gates", 0, 0, elem});
    }
    if (has_cab) {
        int ct = 0;
        for (int i = 0; i < S - 1; ++i) ct += cfg.stage_channels[static_cast<std::size_t>(i)];
        wk.conv1d_row("cab.fuse", 1, 1, 3, true, ct);
        long long elem = 0;
        for (int i = 1; i <= S - 1; ++i) {
            const std::int64_t h = height >> i, w = width >> i;
            const int c = cfg.stage_channels[static_cast<std::size_t>(i - 1)];
            wk.linear_row("cab.fc" + std::to_string(i), ct, c);
            elem += batch * (2LL * c * h * w + c);  // gate mul + add + sigmoid
        }
        wk.rep.rows.push_back({"cab.elementwise", "gates", 0, 0, elem});
    }
    // decoder: stage i convolves at H/2^min(i,S-1); upsample after every stage
    // but the deepest, then the additive skip
    for (int i = S; i >= 2; --i) {
        const int shift = std::min(i, S - 1);
        const std::int64_t h = height >> shift, w = width >> shift;
        emit_stage(wk, cfg, i, true, h, w);
        const int cskip = cfg.stage_channels[static_cast<std::size_t>(i - 2)];
        const std::int64_t hs = height >> (i - 1), ws = width >> (i - 1);
        if (i < S) {
            wk.elem_row("dec" + std::to_string(i) + ".upsample", "upsample", 1LL * cskip * hs * ws);
        }
        wk.elem_row("dec" + std::to_string(i) + ".skip_add", "add", 1LL * cskip * hs * ws);
    }
    wk.conv2d_row("head", cfg.stage_channels[0], cfg.out_channels, 1, 1, true, height >> 1, width >> 1);
    wk.elem_row("head.upsample", "upsample", 1LL * cfg.out_channels * height * width);
    wk.elem_row("head.sigmoid", "sigmoid", 1LL * cfg.out_channels * height * width);
    return wk.rep;
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

AuditResult audit_compare(const CostReport& report, const ParamStore& store) {
    AuditResult res;
    res.analytic_total = report.total_params();
    res.enumerated_total = store.total_params();

    std::map<std::string, long long> enumerated;
    for (const auto& [name, t] : store.entries()) {
        const auto dot = name.rfind('.');
        const std::string prefix = dot == std::string::npos ? name : name.substr(0, dot);
        enumerated[prefix] += t.size();
    }
    std::ostringstream details;
    for (const auto& row : report.rows) {
        if (row.params == 0) continue;
        auto it = enumerated.find(row.name);
        const long long got = it == enumerated.end() ? 0 : it->second;
        if (got != row.params) {
            if (res.first_diff.empty()) res.first_diff = row.name;
            details << row.name << ": analytic " << row.params << ", enumerated " << got << "\n";
        }
        if (it != enumerated.end()) enumerated.erase(it);
    }
    for (const auto& [prefix, count] : enumerated) {
        if (res.first_diff.empty()) res.first_diff = prefix;
        details << prefix << ": analytic 0, enumerated " << count << "\n";
    }
    res.details = details.str();
    res.ok = res.first_diff.empty() && res.analytic_total == res.enumerated_total;
    return res;
}

AuditResult audit(const ArchConfig& cfg, std::uint64_t seed) {
    if (!cfg.runnable()) {
        throw ConfigError(cfg.name + ": audit requires a runnable configuration");
    }
    Network net(cfg, seed);
    const int f = cfg.downsample_factor();
    return audit_compare(cost_report(cfg, f, f), net.store());
}

}  // namespace malunet
