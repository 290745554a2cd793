#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "malunet/analysis.hpp"
#include "malunet/data.hpp"
#include "malunet/gradcheck.hpp"
#include "malunet/network.hpp"
#include "malunet/train.hpp"

namespace fs = std::filesystem;
using namespace malunet;

namespace {

// Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.
constexpr int kUsage = 1;
constexpr int kValidation = 2;
constexpr int kNumerical = 3;

void check_thread_cap() {
    // The evaluator is single-threaded; the cap is validated and trivially
    // honored. A malformed value is still a usage error.
    const char* env = std::getenv("MALUNET_THREADS");
    if (!env) return;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
        throw ConfigError(std::string("MALUNET_THREADS must be a positive integer, got \"") + env + "\"");
    }
}

int cmd_count(const std::string& config, int input_size, int batch, bool as_json, bool strict_flops) {
    ArchConfig cfg = resolve_config(config);
    CostReport rep = cost_report(cfg, input_size, input_size, batch);
    const int fpm = strict_flops ? 2 : 1;
    if (as_json) {
        std::cout << rep.to_json(fpm) << "\n";
    } else {
        std::cout << rep.to_text(fpm);
    }
    return 0;
}

int cmd_catalog(const std::string& dump_dir) {
    if (!dump_dir.empty()) {
        fs::create_directories(dump_dir);
        for (const auto& cfg : variant_catalog()) {
            std::ofstream os(fs::path(dump_dir) / (cfg.name + ".json"));
            os << cfg.to_json() << "\n";
        }
    }
    std::cout << std::left << std::setw(18) << "name" << std::right << std::setw(12) << "params"
              << std::setw(10) << "gflops" << "  runnable\n";
    for (const auto& cfg : variant_catalog()) {
        CostReport rep = cost_report(cfg, 256, 256);
        std::cout << std::left << std::setw(18) << cfg.name << std::right << std::setw(12) << rep.total_params()
                  << std::setw(10) << std::fixed << std::setprecision(3)
                  << static_cast<double>(rep.total_macs()) / 1e9 << "  " << (cfg.runnable() ? "yes" : "counting-only")
                  << "\n";
    }
    return 0;
}

int cmd_forward(const std::string& config, const std::string& checkpoint, const std::string& image_path,
                const std::string& out_path, double threshold, std::uint64_t seed) {
    ArchConfig cfg = resolve_config(config);
    Network net(cfg, seed);
    if (!checkpoint.empty()) net.store().load(checkpoint);
    Tensor img = load_ppm(image_path);
    const std::int64_t h = img.shape()[1], w = img.shape()[2];
    NoGradGuard ng;
    Tensor x = reshape(img, {1, 3, h, w});
    Tensor prob = net.forward(x);
    save_mask(prob, out_path, threshold);
    std::int64_t positive = 0;
    for (double v : prob.data()) positive += v >= threshold;
    std::cout << "positive_fraction=" << std::setprecision(6) << std::fixed
              << static_cast<double>(positive) / static_cast<double>(prob.size()) << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& config, double tolerance, std::uint64_t seed) {
    if (config != "tiny") {
        throw ConfigError("gradcheck runs only on the \"tiny\" configuration (runtime guardrail)");
    }
    auto entries = gradcheck_suite(seed);
    double worst = 0.0;
    for (const auto& e : entries) {
        const bool ok = e.max_rel < tolerance;
        std::cout << std::left << std::setw(12) << e.name << " max_rel=" << std::scientific
                  << std::setprecision(3) << e.max_rel << (ok ? "  PASS" : "  FAIL") << "\n";
        worst = std::max(worst, e.max_rel);
    }
    std::cout << "worst=" << std::scientific << std::setprecision(3) << worst << " tolerance=" << tolerance << "\n";
    if (!(worst < tolerance)) {
        std::cerr << "gradcheck: worst relative error exceeds the tolerance\n";
        return kNumerical;
    }
    return 0;
}

std::vector<SamplePair> open_dataset(const std::string& data, int size) {
    if (data.rfind("synth:", 0) == 0) {
        const std::string rest = data.substr(6);
        const auto colon = rest.find(':');
        if (colon == std::string::npos) throw ConfigError("expected synth:<count>:<size>");
        const int n = std::stoi(rest.substr(0, colon));
        const int s = std::stoi(rest.substr(colon + 1));
        return synth_dataset(n, s, 2024);
    }
    return load_dataset(data, size);
}

int cmd_train(const std::string& data, const std::string& config, long long epochs, int batch, int size,
              std::uint64_t seed, const std::string& log_path, const std::string& ckpt_path) {
    ArchConfig cfg = resolve_config(config);
    auto dataset = open_dataset(data, size);
    Network net(cfg, seed);
    auto log = train_loop(net, dataset, epochs, batch, seed);
    {
        std::ofstream os(log_path);
        if (!os) throw IoError("train: cannot write " + log_path);
        os << format_log(log);
    }
    net.store().save(ckpt_path);
    if (!log.empty()) {
        std::cout << "epochs=" << log.size() << " final_loss=" << std::setprecision(6) << std::fixed
                  << log.back().loss << " final_dsc=" << log.back().dsc << "\n";
    } else {
        std::cout << "epochs=0\n";
    }
    std::cout << "log=" << log_path << " checkpoint=" << ckpt_path << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, bool as_json) {
    std::vector<std::string> names;
    if (!fs::is_directory(pred_dir) || !fs::is_directory(gt_dir)) {
        throw IoError("eval: --pred and --gt must be directories");
    }
    for (const auto& e : fs::directory_iterator(pred_dir)) {
        if (e.path().extension() == ".pgm") names.push_back(e.path().stem().string());
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw IoError("eval: no .pgm files under " + pred_dir);
    MetricSet sum;
    for (const auto& name : names) {
        const fs::path gt = fs::path(gt_dir) / (name + ".pgm");
        if (!fs::exists(gt)) throw IoError("eval: no ground truth for \"" + name + "\"");
        Tensor p = threshold_mask(load_pgm((fs::path(pred_dir) / (name + ".pgm")).string()));
        Tensor g = threshold_mask(load_pgm(gt.string()));
        MetricSet m = metrics(p, g);
        sum.miou += m.miou;
        sum.dsc += m.dsc;
        sum.acc += m.acc;
        sum.sen += m.sen;
        sum.spe += m.spe;
    }
    const double n = static_cast<double>(names.size());
    sum.miou /= n;
    sum.dsc /= n;
    sum.acc /= n;
    sum.sen /= n;
    sum.spe /= n;
    if (as_json) {
        nlohmann::json j{{"pairs", names.size()}, {"miou", sum.miou}, {"dsc", sum.dsc},
                         {"acc", sum.acc},        {"sen", sum.sen},   {"spe", sum.spe}};
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "pairs=" << names.size() << "\n"
                  << std::fixed << std::setprecision(6) << "mIoU=" << sum.miou << " DSC=" << sum.dsc
                  << " Acc=" << sum.acc << " Sen=" << sum.sen << " Spe=" << sum.spe << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MALUNet segmentation kit: analytic cost audit, forward inference, gradient checks, training"};
    app.require_subcommand(1);
    std::uint64_t seed = 42;
    app.add_option("--seed", seed, "master seed for all random substreams");

    auto* count = app.add_subcommand("count", "per-layer parameter and MAC report");
    std::string count_config;
    int input_size = 256, count_batch = 1;
    bool count_json = false, strict_flops = false;
    count->add_option("--config", count_config, "catalog name or JSON config path")->required();
    count->add_option("--input-size", input_size, "square input extent");
    count->add_option("--batch", count_batch, "batch size for MAC scaling");
    count->add_flag("--json", count_json, "emit machine-readable JSON");
    count->add_flag("--strict-flops", strict_flops, "count 2 FLOPs per MAC");

    auto* catalog = app.add_subcommand("catalog", "list named configurations");
    std::string dump_dir;
    catalog->add_option("--dump-configs", dump_dir, "write one JSON file per entry into this directory");

    auto* forward = app.add_subcommand("forward", "run one image through a network and write the mask");
    std::string fw_config, fw_ckpt, fw_image, fw_out;
    double fw_threshold = 0.5;
    forward->add_option("--config", fw_config, "catalog name or JSON config path")->required();
    forward->add_option("--checkpoint", fw_ckpt, "checkpoint file (seed-initialized weights when omitted)");
    forward->add_option("--image", fw_image, "input P6 image")->required();
    forward->add_option("--out", fw_out, "output P5 mask path")->required();
    forward->add_option("--threshold", fw_threshold, "binarization threshold");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of every block and the tiny network");
    std::string gc_config = "tiny";
    double gc_tol = 1e-4;
    gradcheck->add_option("--config", gc_config, "must be \"tiny\"");
    gradcheck->add_option("--tolerance", gc_tol, "maximum relative error");

    auto* train = app.add_subcommand("train", "train on a dataset directory or synth:<n>:<size>");
    std::string tr_data, tr_config = "MALUNet", tr_log = "train_log.csv", tr_ckpt = "checkpoint.bin";
    long long tr_epochs = 300;
    int tr_batch = 8, tr_size = 256;
    train->add_option("--data", tr_data, "dataset root (images/ + masks/) or synth:<n>:<size>")->required();
    train->add_option("--config", tr_config, "catalog name or JSON config path");
    train->add_option("--epochs", tr_epochs, "training epochs");
    train->add_option("--batch", tr_batch, "batch size");
    train->add_option("--size", tr_size, "resize extent for directory datasets");
    train->add_option("--log", tr_log, "output log path (epoch,lr,loss,dsc)");
    train->add_option("--checkpoint-out", tr_ckpt, "output checkpoint path");

    auto* eval = app.add_subcommand("eval", "average the five metrics over mask pairs");
    std::string ev_pred, ev_gt;
    bool ev_json = false;
    eval->add_option("--pred", ev_pred, "directory of predicted .pgm masks")->required();
    eval->add_option("--gt", ev_gt, "directory of ground-truth .pgm masks")->required();
    eval->add_flag("--json", ev_json, "emit machine-readable JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsage;
    }

    try {
        check_thread_cap();
        if (*count) return cmd_count(count_config, input_size, count_batch, count_json, strict_flops);
        if (*catalog) return cmd_catalog(dump_dir);
        if (*forward) return cmd_forward(fw_config, fw_ckpt, fw_image, fw_out, fw_threshold, seed);
        if (*gradcheck) return cmd_gradcheck(gc_config, gc_tol, seed);
        if (*train) return cmd_train(tr_data, tr_config, tr_epochs, tr_batch, tr_size, seed, tr_log, tr_ckpt);
        if (*eval) return cmd_eval(ev_pred, ev_gt, ev_json);
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    }
    return 0;
}
