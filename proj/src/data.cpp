#include "convcut/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "convcut/error.hpp"
#include "convcut/log.hpp"
#include "convcut/rng.hpp"

namespace convcut {

namespace fs = std::filesystem;

namespace {

constexpr float kBright = 0.9f;
constexpr float kDark = 0.1f;

// Cursor over a netpbm header: whitespace-separated ASCII fields with
// '#' comments running to end of line.
class HeaderReader {
 public:
  HeaderReader(const std::vector<unsigned char>& bytes, const fs::path& path)
      : bytes_(bytes), path_(path) {}

  std::string token() {
    skip_space_and_comments();
    std::string out;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_]) && bytes_[pos_] != '#') {
      out.push_back(static_cast<char>(bytes_[pos_++]));
    }
    if (out.empty()) fail("truncated header");
    return out;
  }

  std::size_t number() {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
        t.size() > 9) {
      fail("bad header field '" + t + "'");
    }
    return std::stoul(t);
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing raster separator");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw DataError(path_.string() + ": " + why);
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& bytes_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

unsigned char to_byte(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(clamped * 255.0f));
}

void write_netpbm(const fs::path& path, const char* magic, std::size_t h, std::size_t w,
                  const std::vector<unsigned char>& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes(), 0);
  for (std::size_t label : labels) ++counts[label];
  return counts;
}

Tensor read_ppm(const fs::path& path) {
  const std::vector<unsigned char> bytes = read_bytes(path);
  HeaderReader header(bytes, path);
  if (header.token() != "P6") header.fail("not a binary P6 PPM");
  const std::size_t w = header.number();
  const std::size_t h = header.number();
  const std::size_t maxval = header.number();
  if (w == 0 || h == 0) header.fail("zero image dimension");
  if (maxval == 0 || maxval > 255) header.fail("unsupported maxval " + std::to_string(maxval));
  const std::size_t start = header.raster_start();
  const std::size_t n = w * h * 3;
  if (bytes.size() < start + n) header.fail("truncated raster");

  std::vector<float> data(n);
  const float inv = 1.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char b = bytes[start + i];
    if (b > maxval) header.fail("sample exceeds maxval");
    data[i] = static_cast<float>(b) * inv;
  }
  return Tensor(Shape{h, w, 3}, std::move(data));
}

void write_ppm(const fs::path& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.rank() != 3 || s[2] != 3) throw DimensionError("write_ppm: expected [H,W,3], got " + s.str());
  std::vector<unsigned char> raster(image.numel());
  for (std::size_t i = 0; i < raster.size(); ++i) raster[i] = to_byte(image[i]);
  write_netpbm(path, "P6", s[0], s[1], raster);
}

void write_pgm(const fs::path& path, const Tensor& gray) {
  const Shape& s = gray.shape();
  if (s.rank() != 2) throw DimensionError("write_pgm: expected [H,W], got " + s.str());
  std::vector<unsigned char> raster(gray.numel());
  for (std::size_t i = 0; i < raster.size(); ++i) raster[i] = to_byte(gray[i]);
  write_netpbm(path, "P5", s[0], s[1], raster);
}

Tensor resize_nearest(const Tensor& image, std::size_t size) {
  const Shape& s = image.shape();
  if (s.rank() != 3) throw DimensionError("resize: expected [H,W,C], got " + s.str());
  if (s[0] == size && s[1] == size) return image;
  const std::size_t c = s[2];
  std::vector<float> out(size * size * c);
  for (std::size_t y = 0; y < size; ++y) {
    const std::size_t sy = y * s[0] / size;
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t sx = x * s[1] / size;
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[(y * size + x) * c + ch] = image[(sy * s[1] + sx) * c + ch];
      }
    }
  }
  return Tensor(Shape{size, size, c}, std::move(out));
}

LabeledDataset load_dataset(const fs::path& root, std::size_t expected_size) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  LabeledDataset ds;
  for (const fs::path& class_dir : sorted_entries(root, true)) {
    const std::size_t label = ds.label_map.size();
    ds.label_map.push_back(class_dir.filename().string());
    std::size_t count = 0;
    for (const fs::path& file : sorted_entries(class_dir, false)) {
      if (file.extension() != ".ppm") continue;
      ds.images.push_back(resize_nearest(read_ppm(file), expected_size));
      ds.labels.push_back(label);
      ++count;
    }
    if (count == 0) warn("class directory has no images: " + class_dir.string());
  }
  if (ds.label_map.empty()) throw DataError("no class directories under " + root.string());
  return ds;
}

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.image_size < 16) throw ConfigError("synthetic image_size must be >= 16");
  if (spec.noise_std < 0.0) throw ConfigError("synthetic noise_std must be >= 0");

  Rng rng(spec.seed);
  const std::size_t n = spec.image_size;
  const std::size_t half = n / 2;
  LabeledDataset ds;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    ds.label_map.push_back("class" + std::to_string(k));
  }
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    const std::size_t quadrant = k % 4;
    const std::size_t row0 = quadrant % 2 == 0 ? 0 : half;
    const std::size_t col0 = quadrant / 2 == 0 ? 0 : half;
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      std::vector<float> data(n * n * 3);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const bool bright = y >= row0 && y < row0 + half && x >= col0 && x < col0 + half;
          for (std::size_t ch = 0; ch < 3; ++ch) {
            float v = bright ? kBright : kDark;
            if (spec.noise_std > 0.0) {
              v = std::clamp(static_cast<float>(v + spec.noise_std * rng.normal()), 0.0f, 1.0f);
            }
            data[(y * n + x) * 3 + ch] = v;
          }
        }
      }
      ds.images.emplace_back(Shape{n, n, 3}, std::move(data));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double train_fraction,
                                                std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("split fraction must be in (0, 1)");
  }
  Rng rng(seed, 1);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.size() < 2) {
      if (!idx.empty()) warn("class '" + ds.label_map[k] + "' has fewer than 2 samples; all go to train");
      train_idx.insert(train_idx.end(), idx.begin(), idx.end());
      continue;
    }
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      std::swap(idx[i], idx[rng.uniform_index(i + 1)]);
    }
    // Small epsilon so fractions like 2/3 of 48 land on 32, not 31.
    const auto n_train =
        static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(idx.size()) + 1e-9));
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  auto gather = [&ds](const std::vector<std::size_t>& idx) {
    LabeledDataset out;
    out.label_map = ds.label_map;
    for (std::size_t i : idx) {
      out.images.push_back(ds.images[i]);
      out.labels.push_back(ds.labels[i]);
    }
    return out;
  };
  return {gather(train_idx), gather(test_idx)};
}

Tensor make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("make_batch: empty index list");
  const Shape& first = ds.images.at(indices[0]).shape();
  const std::size_t per = first.numel();
  std::vector<float> data;
  data.reserve(per * indices.size());
  for (std::size_t i : indices) {
    const Tensor& img = ds.images.at(i);
    if (img.shape() != first) {
      throw DimensionError("make_batch: image " + std::to_string(i) + " has shape " +
                           img.shape().str() + ", expected " + first.str());
    }
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  return Tensor(Shape{indices.size(), first[0], first[1], first[2]}, std::move(data));
}

Tensor flip_width(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.rank() != 3 && s.rank() != 4) {
    throw DimensionError("flip_width: expected rank 3 or 4, got " + s.str());
  }
  const std::size_t off = s.rank() - 3;
  const std::size_t batch = off ? s[0] : 1;
  const std::size_t h = s[off];
  const std::size_t w = s[off + 1];
  const std::size_t c = s[off + 2];
  std::vector<float> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t src = ((b * h + y) * w + xx) * c;
        const std::size_t dst = ((b * h + y) * w + (w - 1 - xx)) * c;
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(src), c,
                    out.begin() + static_cast<std::ptrdiff_t>(dst));
      }
    }
  }
  return Tensor(s, std::move(out));
}

}  // namespace convcut
