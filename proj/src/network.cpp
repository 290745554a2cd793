#include "malunet/network.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace malunet {

std::string to_string(StageKind k) {
    switch (k) {
        case StageKind::PlainConv: return "plain";
        case StageKind::IeaDga: return "iea_dga";
        case StageKind::DgaIea: return "dga_iea";
        case StageKind::DgaOnly: return "dga";
        case StageKind::IeaConv: return "iea_conv";
        case StageKind::EaConv: return "ea_conv";
    }
    return "plain";
}

std::string to_string(BridgeMode m) {
    switch (m) {
        case BridgeMode::None: return "none";
        case BridgeMode::SabOnly: return "sab_only";
        case BridgeMode::CabOnly: return "cab_only";
        case BridgeMode::SabFirst: return "sab_first";
        case BridgeMode::CabFirst: return "cab_first";
    }
    return "none";
}

StageKind stage_kind_from(const std::string& s) {
    if (s == "plain") return StageKind::PlainConv;
    if (s == "iea_dga") return StageKind::IeaDga;
    if (s == "dga_iea") return StageKind::DgaIea;
    if (s == "dga") return StageKind::DgaOnly;
    if (s == "iea_conv") return StageKind::IeaConv;
    if (s == "ea_conv") return StageKind::EaConv;
    throw ConfigError("unknown stage block kind: " + s);
}

BridgeMode bridge_mode_from(const std::string& s) {
    if (s == "none") return BridgeMode::None;
    if (s == "sab_only") return BridgeMode::SabOnly;
    if (s == "cab_only") return BridgeMode::CabOnly;
    if (s == "sab_first") return BridgeMode::SabFirst;
    if (s == "cab_first") return BridgeMode::CabFirst;
    throw ConfigError("unknown bridge mode: " + s);
}

int ArchConfig::block_width(int i) const {
    return i == 1 ? in_channels : stage_channels[static_cast<std::size_t>(i - 2)];
}

StageKind ArchConfig::kind_of(int i) const {
    if (stage_blocks.empty()) return StageKind::PlainConv;
    return stage_blocks[static_cast<std::size_t>(i - 1)];
}

void ArchConfig::validate() const {
    if (stage_channels.size() < 2) throw ConfigError(name + ": need at least two stages");
    for (int c : stage_channels) {
        if (c <= 0) throw ConfigError(name + ": stage channels must be positive");
    }
    if (in_channels <= 0 || out_channels <= 0) throw ConfigError(name + ": channel counts must be positive");
    if (!stage_blocks.empty() && stage_blocks.size() != stage_channels.size()) {
        throw ConfigError(name + ": stage_blocks must list one kind per stage");
    }
    if (classic_five_stage) {
        if (stage_channels.size() != 5) throw ConfigError(name + ": the classic layout has five stages");
        return;
    }
    for (int i = 1; i <= stages(); ++i) {
        const StageKind k = kind_of(i);
        if (k == StageKind::IeaDga || k == StageKind::DgaIea || k == StageKind::DgaOnly) {
            const int width = block_width(i);
            if (width % 4 != 0) {
                throw ConfigError(name + ": stage " + std::to_string(i) + " uses DGA at width " +
                                  std::to_string(width) + ", which is not divisible by 4");
            }
        }
    }
}

bool ArchConfig::runnable() const {
    if (classic_five_stage) return false;
    for (int i = 1; i <= stages(); ++i) {
        if (kind_of(i) == StageKind::EaConv) return false;
    }
    return true;
}

std::string ArchConfig::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["stage_channels"] = stage_channels;
    j["in_channels"] = in_channels;
    j["out_channels"] = out_channels;
    std::vector<std::string> kinds;
    for (int i = 1; i <= stages(); ++i) kinds.push_back(to_string(kind_of(i)));
    j["stage_blocks"] = kinds;
    j["bridges"] = to_string(bridges);
    j["decoder_mirrors_encoder"] = decoder_mirrors_encoder;
    j["norm"] = with_norm;
    j["activation"] = with_act;
    j["iea_double_norm"] = iea_double_norm;
    j["classic_five_stage"] = classic_five_stage;
    return j.dump(2);
}

ArchConfig ArchConfig::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    ArchConfig c;
    try {
        c.name = j.value("name", std::string("custom"));
        c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
        c.in_channels = j.value("in_channels", 3);
        c.out_channels = j.value("out_channels", 1);
        if (j.contains("stage_blocks")) {
            for (const auto& s : j.at("stage_blocks")) c.stage_blocks.push_back(stage_kind_from(s.get<std::string>()));
        }
        c.bridges = bridge_mode_from(j.value("bridges", std::string("none")));
        c.decoder_mirrors_encoder = j.value("decoder_mirrors_encoder", true);
        c.with_norm = j.value("norm", true);
        c.with_act = j.value("activation", true);
        c.iea_double_norm = j.value("iea_double_norm", false);
        c.classic_five_stage = j.value("classic_five_stage", false);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ArchConfig ArchConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_json_text(ss.str());
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

namespace {

StageModule make_stage(ParamStore& store, const std::string& prefix, StageKind kind, bool is_decoder, int cin,
                       int cout, const ArchConfig& cfg) {
    StageModule m;
    m.kind = kind;
    m.is_decoder = is_decoder;
    m.with_act = cfg.with_act;
    m.cin = cin;
    m.cout = cout;
    if (kind == StageKind::EaConv) {
        throw ConfigError(cfg.name + ": the EA stage is a counting-only specification and cannot be built");
    }
    const int block_c = is_decoder ? cout : cin;
    const bool block_stage = kind == StageKind::IeaDga || kind == StageKind::DgaIea || kind == StageKind::DgaOnly;
    const int k = block_stage ? 1 : 3;
    m.trans = Conv2d(store, prefix + (block_stage ? ".trans" : ".conv"),
                     {.in_channels = cin, .out_channels = cout, .kernel = k, .bias = !cfg.with_norm});
    if (cfg.with_norm) m.norm = GroupNorm(store, prefix + ".norm", cout);
    if (kind == StageKind::IeaDga || kind == StageKind::DgaIea || kind == StageKind::IeaConv) {
        m.iea = IeaBlock(store, prefix + ".iea", block_c, cfg.iea_double_norm);
    }
    if (kind == StageKind::IeaDga || kind == StageKind::DgaIea || kind == StageKind::DgaOnly) {
        m.dga = DgaBlock(store, prefix + ".dga", block_c, cfg.with_norm, cfg.with_act);
    }
    return m;
}

}  // namespace

Tensor StageModule::forward(const Tensor& x) const {
    auto transition = [this](const Tensor& t) {
        Tensor y = trans(t);
        if (norm) y = (*norm)(y);
        if (with_act) y = gate_act(y);
        return y;
    };
    Tensor h = x;
    if (!is_decoder) {
        switch (kind) {
            case StageKind::PlainConv: break;
            case StageKind::IeaConv: h = (*iea).forward(h); break;
            case StageKind::IeaDga: h = (*dga).forward((*iea).forward(h)); break;
            case StageKind::DgaIea: h = (*iea).forward((*dga).forward(h)); break;
            case StageKind::DgaOnly: h = (*dga).forward(h); break;
            case StageKind::EaConv: throw ConfigError("EA stage is not runnable");
        }
        return transition(h);
    }
    h = transition(h);
    switch (kind) {
        case StageKind::PlainConv: break;
        case StageKind::IeaConv: h = (*iea).forward(h); break;
        case StageKind::IeaDga: h = (*iea).forward((*dga).forward(h)); break;
        case StageKind::DgaIea: h = (*dga).forward((*iea).forward(h)); break;
        case StageKind::DgaOnly: h = (*dga).forward(h); break;
        case StageKind::EaConv: throw ConfigError("EA stage is not runnable");
    }
    return h;
}

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

Network::Network(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
    cfg_.validate();
    if (!cfg_.runnable()) {
        throw ConfigError(cfg_.name + ": configuration is counting-only and cannot be built");
    }
    const int S = cfg_.stages();
    for (int i = 1; i <= S; ++i) {
        const int cin = cfg_.block_width(i);
        const int cout = cfg_.stage_channels[static_cast<std::size_t>(i - 1)];
        enc_.push_back(make_stage(store_, "enc" + std::to_string(i), cfg_.kind_of(i), false, cin, cout, cfg_));
    }
    if (cfg_.bridges == BridgeMode::SabOnly || cfg_.bridges == BridgeMode::SabFirst ||
        cfg_.bridges == BridgeMode::CabFirst) {
        sab_ = SabBlock(store_, "sab");
    }
    if (cfg_.bridges == BridgeMode::CabOnly || cfg_.bridges == BridgeMode::SabFirst ||
        cfg_.bridges == BridgeMode::CabFirst) {
        std::vector<int> bridge_channels(cfg_.stage_channels.begin(), cfg_.stage_channels.end() - 1);
        cab_ = CabBlock(store_, "cab", bridge_channels);
    }
    for (int i = S; i >= 2; --i) {
        const int cin = cfg_.stage_channels[static_cast<std::size_t>(i - 1)];
        const int cout = cfg_.stage_channels[static_cast<std::size_t>(i - 2)];
        const StageKind kind = cfg_.decoder_mirrors_encoder ? cfg_.kind_of(i) : StageKind::PlainConv;
        dec_.push_back(make_stage(store_, "dec" + std::to_string(i), kind, true, cin, cout, cfg_));
    }
    head_ = Conv2d(store_, "head",
                   {.in_channels = cfg_.stage_channels[0], .out_channels = cfg_.out_channels, .kernel = 1});
}

void Network::check_input(const Tensor& image) const {
    if (image.rank() != 4 || image.shape()[1] != cfg_.in_channels) {
        throw ShapeError("forward: want (b," + std::to_string(cfg_.in_channels) + ",h,w), got " +
                         shape_str(image.shape()));
    }
    const int f = cfg_.downsample_factor();
    const std::int64_t h = image.shape()[2], w = image.shape()[3];
    if (h % f != 0 || w % f != 0 || h / f < 1 || w / f < 1) {
        throw ShapeError("forward: spatial extents " + std::to_string(h) + "x" + std::to_string(w) +
                         " must be divisible by " + std::to_string(f));
    }
}

std::vector<Tensor> Network::encode(const Tensor& image, Tensor& bottleneck) const {
    const int S = cfg_.stages();
    std::vector<Tensor> skips;
    Tensor f = image;
    for (int i = 1; i <= S; ++i) {
        f = enc_[static_cast<std::size_t>(i - 1)].forward(f);
        if (i < S) {
            f = maxpool2(f);
            skips.push_back(f);  // pooled stage output, extent H/2^i
        }
    }
    bottleneck = f;
    return skips;
}

std::vector<Tensor> Network::apply_bridges(const std::vector<Tensor>& ts) const {
    switch (cfg_.bridges) {
        case BridgeMode::None: return ts;
        case BridgeMode::SabOnly: return (*sab_).forward(ts);
        case BridgeMode::CabOnly: return (*cab_).forward(ts);
        case BridgeMode::SabFirst: return (*cab_).forward((*sab_).forward(ts));
        case BridgeMode::CabFirst: return (*sab_).forward((*cab_).forward(ts));
    }
    return ts;
}

std::vector<Tensor> Network::bridged_skips(const Tensor& image) const {
    check_input(image);
    Tensor bottleneck;
    return apply_bridges(encode(image, bottleneck));
}

Tensor Network::forward(const Tensor& image) const {
    check_input(image);
    const int S = cfg_.stages();
    Tensor g;
    std::vector<Tensor> skips = apply_bridges(encode(image, g));
    for (int i = S; i >= 2; --i) {
        g = dec_[static_cast<std::size_t>(S - i)].forward(g);
        if (i < S) g = upsample_bilinear2(g);
        g = add(g, skips[static_cast<std::size_t>(i - 2)]);
    }
    g = head_(g);
    g = upsample_bilinear2(g);
    return sigmoid(g);
}

// ---------------------------------------------------------------------------
// catalog
// ---------------------------------------------------------------------------

namespace {

ArchConfig bu_base(const std::string& name) {
    ArchConfig c;
    c.name = name;
    c.stage_channels = {8, 16, 24, 32, 48, 64};
    c.stage_blocks.assign(6, StageKind::PlainConv);
    c.bridges = BridgeMode::None;
    return c;
}

ArchConfig with_deep_blocks(ArchConfig c, StageKind k) {
    for (int i = 4; i <= 6; ++i) c.stage_blocks[static_cast<std::size_t>(i - 1)] = k;
    return c;
}

}  // namespace

std::vector<ArchConfig> variant_catalog() {
    std::vector<ArchConfig> v;
    v.push_back(bu_base("BasicUNet"));
    v.push_back(with_deep_blocks(bu_base("BU+DGA"), StageKind::DgaOnly));
    v.push_back(with_deep_blocks(bu_base("BU+EA"), StageKind::EaConv));
    v.push_back(with_deep_blocks(bu_base("BU+IEA"), StageKind::IeaConv));
    {
        ArchConfig c = bu_base("BU+CAB");
        c.bridges = BridgeMode::CabOnly;
        v.push_back(c);
    }
    {
        ArchConfig c = bu_base("BU+SAB");
        c.bridges = BridgeMode::SabOnly;
        v.push_back(c);
    }
    {
        ArchConfig c = with_deep_blocks(bu_base("BU+DGA+IEA+(A)"), StageKind::DgaIea);
        c.bridges = BridgeMode::CabFirst;
        v.push_back(c);
        c.name = "BU+DGA+IEA+(B)";
        c.bridges = BridgeMode::SabFirst;
        v.push_back(c);
    }
    {
        ArchConfig c = with_deep_blocks(bu_base("BU+IEA+DGA+(A)"), StageKind::IeaDga);
        c.bridges = BridgeMode::CabFirst;
        v.push_back(c);
        c.name = "BU+IEA+DGA+(B)";
        c.bridges = BridgeMode::SabFirst;
        v.push_back(c);
        c.name = "MALUNet";
        v.push_back(c);
    }
    {
        ArchConfig c;
        c.name = "UNet";
        c.stage_channels = {32, 64, 128, 256, 512};
        c.classic_five_stage = true;
        v.push_back(c);
    }
    {
        ArchConfig c;
        c.name = "MALUNet-reduced";
        c.stage_channels = {4, 8, 12, 16, 24, 32};
        c.stage_blocks.assign(6, StageKind::PlainConv);
        for (int i = 4; i <= 6; ++i) c.stage_blocks[static_cast<std::size_t>(i - 1)] = StageKind::IeaDga;
        c.bridges = BridgeMode::SabFirst;
        v.push_back(c);
    }
    {
        // Five-stage reduction; valid down to 16x16 inputs. The gradient-check
        // command is pinned to this one.
        ArchConfig c;
        c.name = "tiny";
        c.stage_channels = {4, 8, 12, 16, 24};
        c.stage_blocks.assign(5, StageKind::PlainConv);
        c.stage_blocks[3] = StageKind::IeaDga;
        c.stage_blocks[4] = StageKind::IeaDga;
        c.bridges = BridgeMode::SabFirst;
        v.push_back(c);
    }
    return v;
}

std::vector<std::string> catalog_names() {
    std::vector<std::string> names;
    for (const auto& c : variant_catalog()) names.push_back(c.name);
    return names;
}

ArchConfig catalog_config(const std::string& name) {
    for (const auto& c : variant_catalog()) {
        if (c.name == name) return c;
    }
    std::string known;
    for (const auto& n : catalog_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown config \"" + name + "\"; catalog: " + known);
}

ArchConfig resolve_config(const std::string& name_or_path) {
    for (const auto& c : variant_catalog()) {
        if (c.name == name_or_path) return c;
    }
    std::ifstream probe(name_or_path);
    if (probe.good()) return ArchConfig::from_json_file(name_or_path);
    std::string known;
    for (const auto& n : catalog_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown config \"" + name_or_path + "\" (not a catalog name or readable file); catalog: " + known);
}

}  // namespace malunet
