#pragma once

// Patch ingestion, semi-supervised split construction, augmentation and the
// ground-truth degradation simulator used as a verification oracle.

#include <torch/torch.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "senm/batch.hpp"
#include "senm/errors.hpp"

namespace senm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Image I/O: 8-bit RGB PNG <-> float [C,H,W] tensors in [0,1].

inline torch::Tensor load_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat) / 255.0;
}

/// Quantizes to 8 bits (round to nearest) after clipping to [0,1].
inline void save_image(const fs::path& path, const torch::Tensor& image) {
  detail::require(image.dim() == 3 && image.size(0) == 3, "save_image: expected a [3,H,W] tensor");
  auto u8 = (image.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
  auto hwc = u8.permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<std::uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

inline torch::Tensor quantize_8bit(const torch::Tensor& image) {
  return (image.clamp(0.0, 1.0) * 255.0).round() / 255.0;
}

/// Sorted list of lossless image files (png, bmp, ppm, tif) in `dir`.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  static const std::set<std::string> kExt = {".png", ".bmp", ".ppm", ".tif", ".tiff"};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && kExt.count(ext)) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Procedural clean corpus.

/// Smooth textured RGB image (gradients, stripes, disks, blocks) with
/// intensities mapped into [lo, hi].
inline torch::Tensor procedural_image(int size, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  detail::require(size > 0 && lo >= 0.0 && hi <= 1.0 && lo < hi, "procedural_image: bad size or range");
  torch::NoGradGuard no_grad;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  auto opts = torch::TensorOptions().dtype(torch::kFloat);
  auto u = [&](double a, double b) { return a + (b - a) * torch::rand({1}, gen, opts).item<double>(); };
  auto coords = torch::linspace(0.0, 1.0, size, opts);
  auto yy = coords.view({-1, 1}).expand({size, size});
  auto xx = coords.view({1, -1}).expand({size, size});

  auto img = torch::zeros({3, size, size}, opts);
  for (int c = 0; c < 3; ++c) {
    const double angle = u(0.0, 2.0 * std::numbers::pi);
    auto plane = (std::cos(angle) * xx + std::sin(angle) * yy) * u(0.3, 1.0);
    const double freq = u(2.0, 12.0), phase = u(0.0, 6.28), dir = u(0.0, 3.14);
    auto stripes = 0.25 * torch::sin(freq * (std::cos(dir) * xx + std::sin(dir) * yy) * 6.28 + phase);
    img[c] = plane + stripes;
  }
  const int disks = static_cast<int>(u(3.0, 9.0));
  for (int k = 0; k < disks; ++k) {
    const double cy = u(0.0, 1.0), cx = u(0.0, 1.0), r = u(0.05, 0.25);
    auto mask = (((yy - cy) * (yy - cy) + (xx - cx) * (xx - cx)) < r * r).to(torch::kFloat);
    for (int c = 0; c < 3; ++c) img[c] = img[c] * (1 - mask) + mask * u(-0.2, 1.2);
  }
  const int blocks = static_cast<int>(u(1.0, 5.0));
  for (int k = 0; k < blocks; ++k) {
    const double y0 = u(0.0, 0.8), x0 = u(0.0, 0.8), h = u(0.1, 0.3), w = u(0.1, 0.3);
    auto mask = ((yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)).to(torch::kFloat);
    const double cells = std::round(u(2.0, 8.0));
    auto checker = ((torch::floor(yy * size / cells) + torch::floor(xx * size / cells)).remainder(2.0));
    for (int c = 0; c < 3; ++c) img[c] = img[c] * (1 - mask) + mask * (checker * u(0.3, 1.0));
  }
  // Normalize each image to its own range, then map into [lo, hi].
  auto mn = img.min(), mx = img.max();
  img = (img - mn) / (mx - mn + 1e-6);
  return (lo + (hi - lo) * img).clamp(lo, hi);
}

// ---------------------------------------------------------------------------
// Cropping.

struct Patch {
  torch::Tensor data;  // [C,size,size]
  int row = 0;
  int col = 0;
};

struct PatchPair {
  torch::Tensor x;
  torch::Tensor y;
  int row = 0;
  int col = 0;
};

namespace detail {

inline std::vector<std::pair<int, int>> crop_positions(std::int64_t height, std::int64_t width, int count, int size,
                                                       std::uint64_t seed) {
  if (height < size || width < size) {
    throw DataError("crop: image " + std::to_string(height) + "x" + std::to_string(width) +
                    " is smaller than patch size " + std::to_string(size));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> rows(0, static_cast<int>(height) - size);
  std::uniform_int_distribution<int> cols(0, static_cast<int>(width) - size);
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int r = rows(rng);
    out.emplace_back(r, cols(rng));
  }
  return out;
}

inline torch::Tensor crop(const torch::Tensor& image, int row, int col, int size) {
  return image.index({torch::indexing::Slice(), torch::indexing::Slice(row, row + size),
                      torch::indexing::Slice(col, col + size)})
      .clone();
}

}  // namespace detail

/// `count` uniformly placed size x size crops of a [C,H,W] image.
inline std::vector<Patch> crop_patches(const torch::Tensor& image, int count, int size, std::uint64_t seed) {
  detail::require(image.dim() == 3, "crop_patches: expected a [C,H,W] image");
  std::vector<Patch> out;
  for (auto [r, c] : detail::crop_positions(image.size(1), image.size(2), count, size, seed)) {
    out.push_back({detail::crop(image, r, c, size), r, c});
  }
  return out;
}

/// Crops a clean/noisy pair at identical positions.
inline std::vector<PatchPair> crop_patch_pairs(const torch::Tensor& x, const torch::Tensor& y, int count, int size,
                                               std::uint64_t seed) {
  detail::require(x.sizes() == y.sizes(), "crop_patch_pairs: clean and noisy images differ in shape");
  std::vector<PatchPair> out;
  for (auto [r, c] : detail::crop_positions(x.size(1), x.size(2), count, size, seed)) {
    out.push_back({detail::crop(x, r, c, size), detail::crop(y, r, c, size), r, c});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth degradation simulator.

/// Heteroscedastic Gaussian noise residual: eps ~ N(0, (a + b*x)^2) per pixel.
inline torch::Tensor synth_noise_hetero(const torch::Tensor& x, double a, double b, std::uint64_t seed) {
  if (a < 0.0 || b < 0.0) throw ContractViolation("synth_degrade_hetero: a and b must be non-negative");
  torch::NoGradGuard no_grad;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  auto eps = torch::randn(x.sizes(), gen, torch::TensorOptions().dtype(torch::kDouble));
  return ((a + b * x.to(torch::kDouble)) * eps).to(x.dtype());
}

/// y = x + eps with sigma(x) = a + b*x; clipped to [0,1] unless `clip` is false.
inline torch::Tensor synth_degrade_hetero(const torch::Tensor& x, double a, double b, std::uint64_t seed,
                                          bool clip = true) {
  auto y = x + synth_noise_hetero(x, a, b, seed);
  return clip ? y.clamp(0.0, 1.0) : y;
}

// ---------------------------------------------------------------------------
// Dihedral augmentation.

/// Applies dihedral transform k in [0,8) to the last two dimensions:
/// k&3 quarter turns, then a horizontal flip when k&4.
inline torch::Tensor apply_dihedral(const torch::Tensor& t, int k) {
  detail::require(k >= 0 && k < 8, "apply_dihedral: transform index must be in [0,8)");
  const auto d = t.dim();
  auto out = torch::rot90(t, k & 3, {d - 2, d - 1});
  if (k & 4) out = torch::flip(out, {d - 1});
  return out;
}

inline torch::Tensor invert_dihedral(const torch::Tensor& t, int k) {
  detail::require(k >= 0 && k < 8, "invert_dihedral: transform index must be in [0,8)");
  const auto d = t.dim();
  auto out = (k & 4) ? torch::flip(t, {d - 1}) : t;
  return torch::rot90(out, (4 - (k & 3)) & 3, {d - 2, d - 1});
}

inline int draw_dihedral(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return std::uniform_int_distribution<int>(0, 7)(rng);
}

struct Augmented {
  torch::Tensor x;
  torch::Tensor y;
  int transform = 0;
};

/// One random dihedral transform, applied identically to both members when `y` is given.
inline Augmented augment(const torch::Tensor& x, const torch::Tensor& y, std::uint64_t seed) {
  const int k = draw_dihedral(seed);
  return {apply_dihedral(x, k), y.defined() ? apply_dihedral(y, k) : torch::Tensor{}, k};
}

inline Augmented augment(const torch::Tensor& x, std::uint64_t seed) { return augment(x, torch::Tensor{}, seed); }

// ---------------------------------------------------------------------------
// Degradation level.

/// Standard deviation of the residual y - x over the whole patch.
inline double measure_level(const torch::Tensor& x, const torch::Tensor& y) {
  detail::require(x.sizes() == y.sizes(), "measure_level: shape mismatch");
  return (y.to(torch::kDouble) - x.to(torch::kDouble)).std(/*unbiased=*/false).item<double>();
}

/// Per-item residual std for a batch [N,C,H,W] -> [N].
inline torch::Tensor measure_level_batch(const torch::Tensor& x, const torch::Tensor& y) {
  detail::require(x.sizes() == y.sizes() && x.dim() == 4, "measure_level_batch: shape mismatch");
  return (y - x).reshape({x.size(0), -1}).std(1, /*unbiased=*/false);
}

// ---------------------------------------------------------------------------
// Semi-supervised split.

struct SplitSpec {
  int paired_count = 10;
  int source_count = 48;
  int target_count = 48;
  int patch_size = 64;
  int patches_per_image = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (paired_count < 0 || source_count < 0 || target_count < 0) throw ConfigError("split: counts must be >= 0");
    if (patch_size < 1 || patches_per_image < 1) throw ConfigError("split: patch_size and patches_per_image must be >= 1");
  }
};

/// One line of the split manifest: where a patch came from and which pool it joined.
struct ManifestEntry {
  std::string file;
  Domain domain = Domain::paired;
  int row = 0;
  int col = 0;
  int size = 0;
  double level = std::numeric_limits<double>::quiet_NaN();
  std::size_t image_index = 0;
};

/// Patch pools stacked as [N,C,P,P] tensors plus the manifest that reproduces them.
struct SemiSplit {
  torch::Tensor paired_x, paired_y, source_x, target_y;
  std::vector<ManifestEntry> manifest;

  std::int64_t count(Domain d) const {
    const auto& t = d == Domain::paired ? paired_x : d == Domain::source ? source_x : target_y;
    return t.defined() ? t.size(0) : 0;
  }
};

namespace detail {

inline torch::Tensor stack_or_empty(const std::vector<torch::Tensor>& v, int channels, int size) {
  if (v.empty()) return torch::zeros({0, channels, size, size});
  return torch::stack(v);
}

}  // namespace detail

/// Builds paired / source / target pools from aligned clean and noisy images.
///
/// All images are cut into `patches_per_image` aligned crops. The paired set
/// is drawn first from the whole pool; the images it touched are retired. The
/// remaining images are shuffled and halved: source patches come only from
/// the clean side of the first half, target patches only from the noisy side
/// of the second half.
inline SemiSplit build_semi_split(const std::vector<torch::Tensor>& clean_images,
                                  const std::vector<torch::Tensor>& noisy_images, const SplitSpec& spec,
                                  const std::vector<std::string>& names = {}) {
  spec.validate();
  if (clean_images.size() != noisy_images.size()) throw DataError("split: clean and noisy image counts differ");
  if (!names.empty() && names.size() != clean_images.size()) throw DataError("split: one name per image pair required");
  const std::size_t n_images = clean_images.size();
  auto name_of = [&](std::size_t i) { return names.empty() ? std::to_string(i) : names[i]; };

  struct Slot {
    std::size_t image;
    int row, col;
  };
  std::vector<Slot> pool;
  for (std::size_t i = 0; i < n_images; ++i) {
    const auto pos = detail::crop_positions(clean_images[i].size(1), clean_images[i].size(2), spec.patches_per_image,
                                            spec.patch_size, spec.seed * 1000003ULL + i);
    for (auto [r, c] : pos) pool.push_back({i, r, c});
  }

  std::mt19937_64 rng(spec.seed);
  if (static_cast<std::size_t>(spec.paired_count) > pool.size()) {
    throw DataError("split: requested " + std::to_string(spec.paired_count) + " paired patches but only " +
                    std::to_string(pool.size()) + " exist");
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  SemiSplit split;
  std::vector<torch::Tensor> px, py, sx, ty;
  std::vector<bool> retired(n_images, false);
  for (int k = 0; k < spec.paired_count; ++k) {
    const auto& s = pool[order[static_cast<std::size_t>(k)]];
    auto x = detail::crop(clean_images[s.image], s.row, s.col, spec.patch_size);
    auto y = detail::crop(noisy_images[s.image], s.row, s.col, spec.patch_size);
    split.manifest.push_back({name_of(s.image), Domain::paired, s.row, s.col, spec.patch_size, measure_level(x, y), s.image});
    px.push_back(x);
    py.push_back(y);
    retired[s.image] = true;
  }

  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < n_images; ++i)
    if (!retired[i]) remaining.push_back(i);
  std::shuffle(remaining.begin(), remaining.end(), rng);
  const std::size_t half = remaining.size() / 2;
  const std::set<std::size_t> source_images(remaining.begin(), remaining.begin() + static_cast<std::ptrdiff_t>(half));
  const std::set<std::size_t> target_images(remaining.begin() + static_cast<std::ptrdiff_t>(half), remaining.end());

  auto draw = [&](const std::set<std::size_t>& images, int count, Domain d, std::vector<torch::Tensor>& out) {
    std::vector<std::size_t> slots;
    for (std::size_t k = 0; k < pool.size(); ++k)
      if (images.count(pool[k].image)) slots.push_back(k);
    if (static_cast<std::size_t>(count) > slots.size()) {
      throw DataError("split: requested " + std::to_string(count) + " " + to_string(d) + " patches but only " +
                      std::to_string(slots.size()) + " are available in its half");
    }
    std::shuffle(slots.begin(), slots.end(), rng);
    for (int k = 0; k < count; ++k) {
      const auto& s = pool[slots[static_cast<std::size_t>(k)]];
      const auto& img = d == Domain::source ? clean_images[s.image] : noisy_images[s.image];
      out.push_back(detail::crop(img, s.row, s.col, spec.patch_size));
      split.manifest.push_back({name_of(s.image), d, s.row, s.col, spec.patch_size,
                                std::numeric_limits<double>::quiet_NaN(), s.image});
    }
  };
  draw(source_images, spec.source_count, Domain::source, sx);
  draw(target_images, spec.target_count, Domain::target, ty);

  const int ch = clean_images.empty() ? 3 : static_cast<int>(clean_images.front().size(0));
  split.paired_x = detail::stack_or_empty(px, ch, spec.patch_size);
  split.paired_y = detail::stack_or_empty(py, ch, spec.patch_size);
  split.source_x = detail::stack_or_empty(sx, ch, spec.patch_size);
  split.target_y = detail::stack_or_empty(ty, ch, spec.patch_size);
  return split;
}

// ---------------------------------------------------------------------------
// Manifest I/O. Tab-separated: file, domain, row, col, size, level ("-" when unknown).

inline void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << "# file\tdomain\trow\tcol\tsize\tlevel\n";
  out.precision(9);
  for (const auto& e : entries) {
    out << e.file << '\t' << to_string(e.domain) << '\t' << e.row << '\t' << e.col << '\t' << e.size << '\t';
    if (std::isnan(e.level)) {
      out << '-';
    } else {
      out << e.level;
    }
    out << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string domain, level;
    if (!(ss >> e.file >> domain >> e.row >> e.col >> e.size >> level)) {
      throw DataError("malformed manifest line: " + line);
    }
    e.domain = domain_from_string(domain);
    if (level != "-") e.level = std::stod(level);
    out.push_back(e);
  }
  return out;
}

/// Re-crops every manifest entry from `clean_dir` / `noisy_dir`.
inline SemiSplit load_split(const std::vector<ManifestEntry>& manifest, const fs::path& clean_dir,
                            const fs::path& noisy_dir) {
  std::map<std::string, torch::Tensor> clean_cache, noisy_cache;
  auto fetch = [](std::map<std::string, torch::Tensor>& cache, const fs::path& dir, const std::string& file) {
    auto it = cache.find(file);
    if (it == cache.end()) it = cache.emplace(file, load_image(dir / file)).first;
    return it->second;
  };
  std::vector<torch::Tensor> px, py, sx, ty;
  int size = 0;
  for (const auto& e : manifest) {
    size = e.size;
    switch (e.domain) {
      case Domain::paired:
        px.push_back(detail::crop(fetch(clean_cache, clean_dir, e.file), e.row, e.col, e.size));
        py.push_back(detail::crop(fetch(noisy_cache, noisy_dir, e.file), e.row, e.col, e.size));
        break;
      case Domain::source: sx.push_back(detail::crop(fetch(clean_cache, clean_dir, e.file), e.row, e.col, e.size)); break;
      case Domain::target: ty.push_back(detail::crop(fetch(noisy_cache, noisy_dir, e.file), e.row, e.col, e.size)); break;
    }
  }
  SemiSplit s;
  s.manifest = manifest;
  s.paired_x = detail::stack_or_empty(px, 3, size);
  s.paired_y = detail::stack_or_empty(py, 3, size);
  s.source_x = detail::stack_or_empty(sx, 3, size);
  s.target_y = detail::stack_or_empty(ty, 3, size);
  return s;
}

}  // namespace senm
