#pragma once

#include <optional>
#include <string>
#include <vector>

#include "malunet/blocks.hpp"

namespace malunet {

enum class StageKind { PlainConv, IeaDga, DgaIea, DgaOnly, IeaConv, EaConv };
enum class BridgeMode { None, SabOnly, CabOnly, SabFirst, CabFirst };

std::string to_string(StageKind k);
std::string to_string(BridgeMode m);
StageKind stage_kind_from(const std::string& s);
BridgeMode bridge_mode_from(const std::string& s);

struct ArchConfig {
    std::string name = "custom";
    std::vector<int> stage_channels{8, 16, 24, 32, 48, 64};
    int in_channels = 3;
    int out_channels = 1;
    std::vector<StageKind> stage_blocks;  // one per stage; defaults to all plain
    BridgeMode bridges = BridgeMode::None;
    bool decoder_mirrors_encoder = true;
    bool with_norm = true;
    bool with_act = true;
    bool iea_double_norm = false;
    // Five-stage two-convs-per-stage classic layout with transposed-conv
    // upsampling and concatenated skips. Counting only; build() rejects it.
    bool classic_five_stage = false;

    int stages() const { return static_cast<int>(stage_channels.size()); }
    int downsample_factor() const { return 1 << (stages() - 1); }
    // Channel width the stage's blocks operate at (the stage input width).
    int block_width(int stage_index1) const;
    StageKind kind_of(int stage_index1) const;
    void validate() const;
    bool runnable() const;

    std::string to_json() const;
    static ArchConfig from_json_text(const std::string& text);
    static ArchConfig from_json_file(const std::string& path);
};

// One U-stage. Encoder order for block stages is blocks-then-transition;
// the decoder mirrors it (transition first, block order reversed).
struct StageModule {
    StageKind kind = StageKind::PlainConv;
    bool is_decoder = false;
    bool with_act = true;
    int cin = 0, cout = 0;
    std::optional<IeaBlock> iea;
    std::optional<DgaBlock> dga;
    Conv2d trans;  // 3x3 for conv stages, 1x1 for block stages
    std::optional<GroupNorm> norm;

    Tensor forward(const Tensor& x) const;
};

class Network {
  public:
    Network(const ArchConfig& cfg, std::uint64_t seed);

    Tensor forward(const Tensor& image) const;
    const ArchConfig& config() const { return cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }

    // Pooled encoder features t_1..t_{S-1} after bridge refinement; exposed
    // for bridge-behavior tests.
    std::vector<Tensor> bridged_skips(const Tensor& image) const;

  private:
    std::vector<Tensor> encode(const Tensor& image, Tensor& bottleneck) const;
    std::vector<Tensor> apply_bridges(const std::vector<Tensor>& ts) const;
    void check_input(const Tensor& image) const;

    ArchConfig cfg_;
    ParamStore store_;
    std::vector<StageModule> enc_;  // index 0 = stage 1
    std::vector<StageModule> dec_;  // index 0 = stage S mirror, down to stage 2
    std::optional<SabBlock> sab_;
    std::optional<CabBlock> cab_;
    Conv2d head_;
};

// Named configurations mirroring the ablation tables, plus the reduced desk-
// scale variants ("tiny" five-stage, "MALUNet-reduced" six-stage).
std::vector<ArchConfig> variant_catalog();
ArchConfig catalog_config(const std::string& name);
std::vector<std::string> catalog_names();
// Resolves a catalog name first, then falls back to a JSON file path.
ArchConfig resolve_config(const std::string& name_or_path);

}  // namespace malunet
