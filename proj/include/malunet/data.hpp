#pragma once

#include <string>
#include <vector>

#include "malunet/tensor.hpp"

namespace malunet {

struct SamplePair {
    Tensor image;  // (3,h,w) in [0,1]
    Tensor mask;   // (1,h,w) in {0,1}
    std::string id;
};

// Binary NetPBM codecs, maxval 255 only.
Tensor load_ppm(const std::string& path);  // (3,h,w) in [0,1]
Tensor load_pgm(const std::string& path);  // (1,h,w) in [0,1]
void save_ppm(const std::string& path, const Tensor& image);
void save_pgm(const std::string& path, const Tensor& gray);

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);
Tensor resize_nearest(const Tensor& chw, int out_h, int out_w);

// Threshold a probability map at `threshold` and write a 0/255 P5 file.
void save_mask(const Tensor& prob_map, const std::string& path, double threshold = 0.5);

// <root>/images/*.ppm paired with <root>/masks/*.pgm by basename. Images are
// bilinearly resized, masks nearest-resized then binarized at 0.5.
std::vector<SamplePair> load_dataset(const std::string& root, int size);

// Deterministic filled-ellipse lesions on textured backgrounds; mask coverage
// always lands in [1%, 60%].
std::vector<SamplePair> synth_dataset(int n, int size, std::uint64_t seed);

}  // namespace malunet
