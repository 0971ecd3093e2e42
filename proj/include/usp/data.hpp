#ifndef USP_DATA_HPP
#define USP_DATA_HPP

// Small-image datasets: a procedural 10-class shape set, a CIFAR-10-style
// binary reader/writer and a class-per-directory PPM folder reader.

#include "usp/archive.hpp"

#include <algorithm>
#include <cstdlib>

namespace usp::data {

/// Pixels are [N, 3*H*W] channel-major rows in [0, 1].
struct ImageBatch {
  MatF pixels;
  std::vector<int> labels;  // empty when unlabeled
  int height = 0;
  int width = 0;
  std::string source_id;

  Eigen::Index size() const { return pixels.rows(); }
  int num_classes() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  }

  ImageBatch subset(const std::vector<Eigen::Index>& idx) const {
    ImageBatch out{MatF(static_cast<Eigen::Index>(idx.size()), pixels.cols()), {}, height, width, source_id};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.pixels.row(static_cast<Eigen::Index>(i)) = pixels.row(idx[i]);
      if (!labels.empty()) out.labels.push_back(labels[static_cast<std::size_t>(idx[i])]);
    }
    return out;
  }
  ImageBatch head(Eigen::Index n) const {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < std::min(n, size()); ++i) idx.push_back(i);
    return subset(idx);
  }

  void validate() const {
    USP_CHECK(pixels.cols() == 3 * height * width, "ImageBatch: pixel row width does not match 3*H*W");
    USP_CHECK(labels.empty() || static_cast<Eigen::Index>(labels.size()) == pixels.rows(),
              "ImageBatch: label count mismatch");
    USP_CHECK(pixels.size() == 0 || (pixels.minCoeff() >= 0.0f && pixels.maxCoeff() <= 1.0f),
              "ImageBatch: pixel values outside [0,1]");
  }
};

/// Mirror each image left-right.
inline MatF hflip(const MatF& rows, int channels, int height, int width) {
  MatF out(rows.rows(), rows.cols());
  for (Eigen::Index n = 0; n < rows.rows(); ++n)
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          out(n, (c * height + y) * width + x) = rows(n, (c * height + y) * width + (width - 1 - x));
  return out;
}

// ---------------------------------------------------------------------------
// Procedural shapes. Class is carried by geometry only; colours, placement,
// size and background are nuisance variables.

inline constexpr int kShapeClasses = 10;
inline const char* const kShapeNames[kShapeClasses] = {"disk",   "square", "triangle", "ring",    "cross",
                                                       "hbars",  "vbars",  "checker",  "diamond", "pair"};

namespace detail {

inline bool shape_inside(int cls, double u, double v, double angle) {
  // (u, v) are coordinates relative to the shape centre in units of its radius.
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double ru = ca * u + sa * v, rv = -sa * u + ca * v;
  const double r = std::sqrt(u * u + v * v);
  switch (cls) {
    case 0: return r <= 1.0;
    case 1: return std::abs(ru) <= 0.8 && std::abs(rv) <= 0.8;
    case 2: {
      const double y = rv + 0.25;
      return y <= 0.75 && y >= -0.95 && std::abs(ru) <= (0.75 - y) * 0.62;
    }
    case 3: return r <= 1.0 && r >= 0.55;
    case 4: return (std::abs(ru) <= 0.28 && std::abs(rv) <= 1.0) || (std::abs(rv) <= 0.28 && std::abs(ru) <= 1.0);
    case 5: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && static_cast<int>(std::floor((v + 1.0) * 2.5)) % 2 == 0;
    case 6: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && static_cast<int>(std::floor((u + 1.0) * 2.5)) % 2 == 0;
    case 7:
      return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 &&
             (static_cast<int>(std::floor((u + 1.0) * 2.0)) + static_cast<int>(std::floor((v + 1.0) * 2.0))) % 2 == 0;
    case 8: return std::abs(u) + std::abs(v) <= 1.0;
    case 9: {
      const double du = ru - 0.5, du2 = ru + 0.5;
      return std::sqrt(du * du + rv * rv) <= 0.38 || std::sqrt(du2 * du2 + rv * rv) <= 0.38;
    }
    default: return false;
  }
}

}  // namespace detail

/// Balanced procedural dataset of `n` images (label = i mod 10, then shuffled).
inline ImageBatch synth_shapes(Eigen::Index n, std::uint64_t seed, int size = 32) {
  Rng rng(seed);
  ImageBatch b{MatF(n, 3 * size * size), std::vector<int>(static_cast<std::size_t>(n)), size, size,
               "synth:shapes10:" + std::to_string(seed)};
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % kShapeClasses);
  rng.shuffle(labels);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int cls = labels[static_cast<std::size_t>(i)];
    b.labels[static_cast<std::size_t>(i)] = cls;
    double bg[3], bg2[3], fg[3];
    for (int c = 0; c < 3; ++c) {
      bg[c] = rng.uniform(0.0, 1.0);
      bg2[c] = std::clamp(bg[c] + rng.uniform(-0.25, 0.25), 0.0, 1.0);
    }
    // Foreground contrasts with the background in luminance.
    const double bg_lum = (bg[0] + bg[1] + bg[2]) / 3.0;
    for (int c = 0; c < 3; ++c) {
      const double target = bg_lum > 0.5 ? rng.uniform(0.0, 0.35) : rng.uniform(0.65, 1.0);
      fg[c] = std::clamp(target + rng.uniform(-0.2, 0.2), 0.0, 1.0);
    }
    const double radius = size * rng.uniform(0.24, 0.36);
    const double cx = size / 2.0 + rng.uniform(-0.15, 0.15) * size;
    const double cy = size / 2.0 + rng.uniform(-0.15, 0.15) * size;
    const double angle = rng.uniform(-0.35, 0.35);
    const double grad_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx) {
            const double px = x + 0.25 + 0.5 * sx, py = y + 0.25 + 0.5 * sy;
            hits += detail::shape_inside(cls, (px - cx) / radius, (py - cy) / radius, angle) ? 1 : 0;
          }
        const double alpha = hits / 4.0;
        const double g = 0.5 + 0.5 * ((x - size / 2.0) * std::cos(grad_dir) + (y - size / 2.0) * std::sin(grad_dir)) /
                                   (size / 2.0);
        for (int c = 0; c < 3; ++c) {
          const double back = bg[c] * (1.0 - g) + bg2[c] * g;
          const double v = alpha * fg[c] + (1.0 - alpha) * back + rng.normal() * 0.02;
          b.pixels(i, (c * size + y) * size + x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
  }
  return b;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary: records of <u8 label><R plane><G plane><B plane>, 32x32.

inline ImageBatch read_cifar_binary(const std::vector<std::filesystem::path>& files, int size = 32) {
  const std::size_t plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  const std::size_t rec = 1 + 3 * plane;
  std::string all;
  for (const auto& f : files) all += io::read_file(f);
  if (all.size() % rec != 0) throw io_error("cifar: file size is not a multiple of the record size");
  const auto n = static_cast<Eigen::Index>(all.size() / rec);
  ImageBatch b{MatF(n, 3 * static_cast<Eigen::Index>(plane)), std::vector<int>(static_cast<std::size_t>(n)), size, size,
               "cifar:" + (files.empty() ? std::string() : files.front().filename().string())};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(all.data() + static_cast<std::size_t>(i) * rec);
    b.labels[static_cast<std::size_t>(i)] = p[0];
    for (std::size_t k = 0; k < 3 * plane; ++k) b.pixels(i, static_cast<Eigen::Index>(k)) = p[1 + k] / 255.0f;
  }
  return b;
}

inline void write_cifar_binary(const ImageBatch& b, const std::filesystem::path& path) {
  USP_CHECK(b.labels.size() == static_cast<std::size_t>(b.size()), "cifar: labels required");
  std::string out;
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    out.push_back(static_cast<char>(b.labels[static_cast<std::size_t>(i)]));
    for (Eigen::Index k = 0; k < b.pixels.cols(); ++k)
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(b.pixels(i, k) * 255.0f))));
  }
  io::write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255).

inline std::string encode_ppm(const float* chw, int height, int width) {
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(chw[(c * height + y) * width + x], 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
  return out;
}

inline std::vector<float> decode_ppm(const std::string& bytes, int& height, int& width) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw io_error("ppm: only binary P6 images are supported");
  width = std::stoi(token());
  height = std::stoi(token());
  if (std::stoi(token()) != 255) throw io_error("ppm: maxval must be 255");
  ++pos;  // single whitespace byte before raster
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3;
  if (pos + n > bytes.size()) throw io_error("ppm: truncated raster");
  std::vector<float> chw(n);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        chw[static_cast<std::size_t>((c * height + y) * width + x)] =
            static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>((y * width + x) * 3 + c)]) / 255.0f;
  return chw;
}

/// root/<class>/<image>.ppm; class ids follow sorted directory names.
inline ImageBatch read_image_folder(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> classes;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  std::vector<std::vector<float>> images;
  std::vector<int> labels;
  int h = 0, w = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(classes[c]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      int ih = 0, iw = 0;
      images.push_back(decode_ppm(io::read_file(f), ih, iw));
      if (h == 0) {
        h = ih;
        w = iw;
      } else if (ih != h || iw != w) {
        throw io_error("image folder: non-uniform image size at " + f.string());
      }
      labels.push_back(static_cast<int>(c));
    }
  }
  ImageBatch b{MatF(static_cast<Eigen::Index>(images.size()), 3 * h * w), labels, h, w, "folder:" + root.string()};
  for (std::size_t i = 0; i < images.size(); ++i)
    b.pixels.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const RowVec<float>>(images[i].data(), 3 * h * w);
  return b;
}

// ---------------------------------------------------------------------------
// Dataset specifiers used by the CLI and manifests:
//   synth:<n>:<seed>        procedural shapes
//   cifar:<file>[,<file>]   CIFAR-10 binary batches
//   folder:<dir>            PPM class folders
// Relative paths resolve against $USP_DATA_DIR when set.

inline std::filesystem::path resolve_data_path(const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("USP_DATA_DIR")) return std::filesystem::path(root) / path;
  }
  return path;
}

inline ImageBatch load_dataset(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "synth") {
    const auto c2 = rest.find(':');
    if (c2 == std::string::npos) throw config_error("dataset spec synth:<n>:<seed> expected, got " + spec);
    return synth_shapes(std::stol(rest.substr(0, c2)), std::stoull(rest.substr(c2 + 1)));
  }
  if (kind == "cifar") {
    std::vector<std::filesystem::path> files;
    std::size_t start = 0;
    while (start <= rest.size()) {
      const auto comma = rest.find(',', start);
      files.push_back(resolve_data_path(rest.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return read_cifar_binary(files);
  }
  if (kind == "folder") return read_image_folder(resolve_data_path(rest));
  throw config_error("unknown dataset kind: " + spec);
}

}  // namespace usp::data

#endif  // USP_DATA_HPP
