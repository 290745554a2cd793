#pragma once

#include <string>
#include <vector>

#include "malunet/network.hpp"

namespace malunet {

struct CostRow {
    std::string name;
    std::string kind;
    long long params = 0;
    long long macs = 0;         // multiply-accumulates of conv/linear layers
    long long elementwise = 0;  // element count of MAC-free ops, for transparency
};

struct CostReport {
    std::string config_name;
    std::int64_t batch = 1;
    int height = 0, width = 0;
    std::vector<CostRow> rows;

    long long total_params() const;
    long long total_macs() const;
    long long total_elementwise() const;

    // flops_per_mac: 1 reports MACs under the usual "GFLOPs" label; 2 is the
    // strict multiply+add count.
    std::string to_text(int flops_per_mac = 1) const;
    std::string to_json(int flops_per_mac = 1) const;
};

// Closed-form per-layer parameter and MAC accounting for a configuration.
// Row names coincide with the ParamStore layer prefixes of a built network so
// the audit can diff the two routes layer by layer.
CostReport cost_report(const ArchConfig& cfg, int height, int width, std::int64_t batch = 1);

// Parameter counting alone (input size is irrelevant to it).
inline CostReport count_params(const ArchConfig& cfg) { return cost_report(cfg, cfg.downsample_factor(), cfg.downsample_factor()); }
inline CostReport count_macs(const ArchConfig& cfg, int height, int width, std::int64_t batch = 1) {
    return cost_report(cfg, height, width, batch);
}

struct AuditResult {
    bool ok = false;
    std::string first_diff;  // layer name of the first divergence
    long long analytic_total = 0;
    long long enumerated_total = 0;
    std::string details;
};

// Compares a closed-form report against the enumerated weights of a store.
AuditResult audit_compare(const CostReport& report, const ParamStore& store);

// Builds the network for a runnable config and audits it.
AuditResult audit(const ArchConfig& cfg, std::uint64_t seed = 0);

}  // namespace malunet
