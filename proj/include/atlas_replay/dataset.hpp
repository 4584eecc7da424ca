#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "atlas_replay/autodiff.hpp"
#include "atlas_replay/image.hpp"

namespace atlas_replay {

/// One case: scan in [0,1] and a binary {0,1} mask on the same grid.
struct LabeledImage {
  Image scan;
  Image mask;
  std::string domain_tag;
  std::string case_id;

  friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

/// Train/validation splits of one domain, trained as stage `stage` (1-based).
struct TaskDataset {
  std::size_t stage = 0;
  std::string domain_tag;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
};

/// Stacks images into an [N,1,H,W] tensor.
inline DiffTensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractViolation("stack_images: empty batch");
  const std::size_t H = images.front()->height, W = images.front()->width;
  std::vector<float> data;
  data.reserve(images.size() * H * W);
  for (const Image* img : images) {
    if (img->height != H || img->width != W) throw InvalidShape("stack_images: mixed grid sizes in batch");
    data.insert(data.end(), img->pixels.begin(), img->pixels.end());
  }
  return DiffTensor({images.size(), 1, H, W}, std::move(data));
}

inline DiffTensor image_tensor(const Image& img) { return stack_images({&img}); }

/// Plane `n` of channel 0 as an Image.
inline Image tensor_plane(const DiffTensor& t, std::size_t n = 0, std::size_t c = 0) {
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  const float* p = t.values().data() + (n * C + c) * H * W;
  return Image(H, W, std::vector<float>(p, p + H * W));
}

inline Image threshold(const Image& img, float level = 0.5f) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.size(); ++i) out.pixels[i] = img.pixels[i] >= level ? 1.0f : 0.0f;
  return out;
}

}  // namespace atlas_replay
