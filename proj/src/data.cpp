#include "malunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

namespace malunet {

namespace fs = std::filesystem;

namespace {

struct RawImage {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

bool is_pbm_ws(int c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

// Header: magic, then three ASCII integers separated by whitespace, then
// exactly one whitespace byte before the payload.
RawImage load_netpbm(const std::string& path, const char* magic_want, int channels) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("netpbm: cannot open " + path);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (content.size() < 9 || content[0] != magic_want[0] || content[1] != magic_want[1]) {
        throw IoError("netpbm: " + path + " is not a binary " + magic_want + " file");
    }
    std::size_t pos = 2;
    auto parse_int = [&](const char* field) {
        while (pos < content.size() && is_pbm_ws(content[pos])) ++pos;
        if (pos >= content.size() || !std::isdigit(static_cast<unsigned char>(content[pos]))) {
            throw IoError("netpbm: malformed " + std::string(field) + " in " + path);
        }
        long v = 0;
        while (pos < content.size() && std::isdigit(static_cast<unsigned char>(content[pos]))) {
            v = v * 10 + (content[pos] - '0');
            if (v > 1 << 20) throw IoError("netpbm: implausible " + std::string(field) + " in " + path);
            ++pos;
        }
        return static_cast<int>(v);
    };
    RawImage img;
    img.width = parse_int("width");
    img.height = parse_int("height");
    const int maxval = parse_int("maxval");
    if (maxval != 255) throw IoError("netpbm: non-8-bit maxval in " + path);
    if (pos >= content.size() || !is_pbm_ws(content[pos])) {
        throw IoError("netpbm: missing whitespace after header in " + path);
    }
    ++pos;  // the single whitespace byte
    img.channels = channels;
    const std::size_t need = static_cast<std::size_t>(img.width) * img.height * channels;
    if (content.size() - pos != need) {
        throw IoError("netpbm: payload size mismatch in " + path);
    }
    img.pixels.assign(content.begin() + static_cast<std::ptrdiff_t>(pos), content.end());
    return img;
}

void save_netpbm(const std::string& path, const char* magic, int w, int h, const std::vector<std::uint8_t>& pix) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("netpbm: cannot open " + path + " for writing");
    os << magic << "\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
    if (!os) throw IoError("netpbm: write failed for " + path);
}

Tensor planes_from(const RawImage& img) {
    const std::int64_t c = img.channels, h = img.height, w = img.width;
    std::vector<double> d(static_cast<std::size_t>(c * h * w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                d[static_cast<std::size_t>((ch * h + y) * w + x)] =
                    img.pixels[static_cast<std::size_t>((y * w + x) * c + ch)] / 255.0;
            }
        }
    }
    return Tensor::from_data({c, h, w}, std::move(d));
}

std::uint8_t to_byte(double v) {
    const double s = std::min(std::max(v, 0.0), 1.0) * 255.0;
    return static_cast<std::uint8_t>(std::lround(s));
}

}  // namespace

Tensor load_ppm(const std::string& path) { return planes_from(load_netpbm(path, "P6", 3)); }
Tensor load_pgm(const std::string& path) { return planes_from(load_netpbm(path, "P5", 1)); }

void save_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.shape()[0] != 3) {
        throw ShapeError("save_ppm: want (3,h,w), got " + shape_str(image.shape()));
    }
    const std::int64_t h = image.shape()[1], w = image.shape()[2];
    std::vector<std::uint8_t> pix(static_cast<std::size_t>(3 * h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < 3; ++c)
                pix[static_cast<std::size_t>((y * w + x) * 3 + c)] = to_byte(image.at({c, y, x}));
    save_netpbm(path, "P6", static_cast<int>(w), static_cast<int>(h), pix);
}

void save_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 3 || gray.shape()[0] != 1) {
        throw ShapeError("save_pgm: want (1,h,w), got " + shape_str(gray.shape()));
    }
    const std::int64_t h = gray.shape()[1], w = gray.shape()[2];
    std::vector<std::uint8_t> pix(static_cast<std::size_t>(h * w));
    for (std::int64_t i = 0; i < h * w; ++i) pix[static_cast<std::size_t>(i)] = to_byte(gray.data()[static_cast<std::size_t>(i)]);
    save_netpbm(path, "P5", static_cast<int>(w), static_cast<int>(h), pix);
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw ShapeError("resize_bilinear: want (c,h,w)");
    const std::int64_t c = chw.shape()[0], h = chw.shape()[1], w = chw.shape()[2];
    std::vector<double> d(static_cast<std::size_t>(c * out_h * out_w));
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* plane = chw.data().data() + ch * h * w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            const double fy = (y + 0.5) * sy - 0.5;
            std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
            const double ty = fy - static_cast<double>(y0);
            std::int64_t y1 = y0 + 1;
            y0 = std::clamp<std::int64_t>(y0, 0, h - 1);
            y1 = std::clamp<std::int64_t>(y1, 0, h - 1);
            for (std::int64_t x = 0; x < out_w; ++x) {
                const double fx = (x + 0.5) * sx - 0.5;
                std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
                const double tx = fx - static_cast<double>(x0);
                std::int64_t x1 = x0 + 1;
                x0 = std::clamp<std::int64_t>(x0, 0, w - 1);
                x1 = std::clamp<std::int64_t>(x1, 0, w - 1);
                const double v = (1 - ty) * ((1 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1]) +
                                 ty * ((1 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1]);
                d[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = v;
            }
        }
    }
    return Tensor::from_data({c, static_cast<std::int64_t>(out_h), static_cast<std::int64_t>(out_w)}, std::move(d));
}

Tensor resize_nearest(const Tensor& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw ShapeError("resize_nearest: want (c,h,w)");
    const std::int64_t c = chw.shape()[0], h = chw.shape()[1], w = chw.shape()[2];
    std::vector<double> d(static_cast<std::size_t>(c * out_h * out_w));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* plane = chw.data().data() + ch * h * w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            const std::int64_t sy = std::clamp<std::int64_t>(
                static_cast<std::int64_t>(std::floor((y + 0.5) * static_cast<double>(h) / out_h)), 0, h - 1);
            for (std::int64_t x = 0; x < out_w; ++x) {
                const std::int64_t sx = std::clamp<std::int64_t>(
                    static_cast<std::int64_t>(std::floor((x + 0.5) * static_cast<double>(w) / out_w)), 0, w - 1);
                d[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = plane[sy * w + sx];
            }
        }
    }
    return Tensor::from_data({c, static_cast<std::int64_t>(out_h), static_cast<std::int64_t>(out_w)}, std::move(d));
}

void save_mask(const Tensor& prob_map, const std::string& path, double threshold) {
    Tensor m = prob_map;
    if (m.rank() == 4) {
        if (m.shape()[0] != 1) throw ShapeError("save_mask: batch must be 1");
        m = reshape(m, {m.shape()[1], m.shape()[2], m.shape()[3]});
    }
    if (m.rank() != 3 || m.shape()[0] != 1) throw ShapeError("save_mask: want a single-channel map");
    std::vector<double> bin(m.data().size());
    for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = m.data()[i] >= threshold ? 1.0 : 0.0;
    save_pgm(path, Tensor::from_data(m.shape(), std::move(bin)));
}

std::vector<SamplePair> load_dataset(const std::string& root, int size) {
    const fs::path images = fs::path(root) / "images";
    const fs::path masks = fs::path(root) / "masks";
    if (!fs::is_directory(images) || !fs::is_directory(masks)) {
        throw IoError("dataset: " + root + " must contain images/ and masks/");
    }
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(images)) {
        if (e.path().extension() == ".ppm") names.push_back(e.path().stem().string());
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw IoError("dataset: no .ppm images under " + images.string());
    for (const auto& e : fs::directory_iterator(masks)) {
        if (e.path().extension() != ".pgm") continue;
        const std::string stem = e.path().stem().string();
        if (!std::binary_search(names.begin(), names.end(), stem)) {
            throw IoError("dataset: mask \"" + stem + "\" has no image counterpart");
        }
    }
    std::vector<SamplePair> out;
    out.reserve(names.size());
    for (const auto& name : names) {
        const fs::path mask_path = masks / (name + ".pgm");
        if (!fs::exists(mask_path)) {
            throw IoError("dataset: image \"" + name + "\" has no mask counterpart");
        }
        SamplePair p;
        p.id = name;
        p.image = resize_bilinear(load_ppm((images / (name + ".ppm")).string()), size, size);
        Tensor m = resize_nearest(load_pgm(mask_path.string()), size, size);
        std::vector<double> bin(m.data().size());
        for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = m.data()[i] >= 0.5 ? 1.0 : 0.0;
        p.mask = Tensor::from_data(m.shape(), std::move(bin));
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<SamplePair> synth_dataset(int n, int size, std::uint64_t seed) {
    if (n < 1) throw ConfigError("synth_dataset: n must be >= 1");
    if (size < 4) throw ConfigError("synth_dataset: size must be >= 4");
    std::vector<SamplePair> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int idx = 0; idx < n; ++idx) {
        auto rng = substream(seed, "synth:" + std::to_string(idx));
        const std::int64_t s = size;
        std::vector<double> mask(static_cast<std::size_t>(s * s));
        double cx = 0, cy = 0, ra = 0, rb = 0, theta = 0;
        double frac = 0.0;
        // resample the ellipse until coverage is within [1%, 60%]
        for (int attempt = 0; attempt < 64; ++attempt) {
            cx = uniform(rng, 0.3, 0.7) * static_cast<double>(s);
            cy = uniform(rng, 0.3, 0.7) * static_cast<double>(s);
            ra = uniform(rng, 0.12, 0.34) * static_cast<double>(s);
            rb = uniform(rng, 0.12, 0.34) * static_cast<double>(s);
            theta = uniform(rng, 0.0, 3.14159265358979323846);
            std::int64_t count = 0;
            const double ct = std::cos(theta), st = std::sin(theta);
            for (std::int64_t y = 0; y < s; ++y) {
                for (std::int64_t x = 0; x < s; ++x) {
                    const double dx = (static_cast<double>(x) + 0.5) - cx;
                    const double dy = (static_cast<double>(y) + 0.5) - cy;
                    const double u = dx * ct + dy * st;
                    const double v = -dx * st + dy * ct;
                    const bool inside = (u * u) / (ra * ra) + (v * v) / (rb * rb) <= 1.0;
                    mask[static_cast<std::size_t>(y * s + x)] = inside ? 1.0 : 0.0;
                    count += inside;
                }
            }
            frac = static_cast<double>(count) / static_cast<double>(s * s);
            if (frac >= 0.01 && frac <= 0.60) break;
        }
        if (frac < 0.01 || frac > 0.60) throw NumericError("synth_dataset: could not place a lesion");

        // skin-like background with two low-frequency waves and per-pixel
        // noise; darker lesion interior with its own texture
        const double base[3] = {uniform(rng, 0.62, 0.80), uniform(rng, 0.45, 0.62), uniform(rng, 0.40, 0.55)};
        const double lesion[3] = {uniform(rng, 0.28, 0.44), uniform(rng, 0.16, 0.30), uniform(rng, 0.12, 0.26)};
        const double fx = uniform(rng, 1.0, 4.0), fy = uniform(rng, 1.0, 4.0);
        const double ph1 = uniform(rng, 0.0, 6.28), ph2 = uniform(rng, 0.0, 6.28);
        std::vector<double> img(static_cast<std::size_t>(3 * s * s));
        for (std::int64_t y = 0; y < s; ++y) {
            for (std::int64_t x = 0; x < s; ++x) {
                const double wave = 0.04 * std::sin(fx * 6.28318 * x / static_cast<double>(s) + ph1) +
                                    0.04 * std::sin(fy * 6.28318 * y / static_cast<double>(s) + ph2);
                const bool inside = mask[static_cast<std::size_t>(y * s + x)] > 0.5;
                for (std::int64_t c = 0; c < 3; ++c) {
                    const double noise = uniform(rng, -0.025, 0.025);
                    const double v = (inside ? lesion[c] : base[c]) + wave + noise;
                    img[static_cast<std::size_t>((c * s + y) * s + x)] = std::min(std::max(v, 0.0), 1.0);
                }
            }
        }
        SamplePair p;
        p.id = "synth" + std::to_string(idx);
        p.image = Tensor::from_data({3, s, s}, std::move(img));
        p.mask = Tensor::from_data({1, s, s}, std::move(mask));
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace malunet
