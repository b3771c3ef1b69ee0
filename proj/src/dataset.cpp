#include "saliency/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace saliency {

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

ActivationShape Dataset::image_shape() const {
  return {images.dim(3), images.dim(1), images.dim(2)};
}

Tensor Dataset::image(std::size_t i) const {
  const std::size_t idx[] = {i};
  return batch(idx);
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t h = images.dim(1), w = images.dim(2), c = images.dim(3);
  Tensor out({indices.size(), c, h, w});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t n = indices[b];
    if (n >= size()) throw std::out_of_range("sample " + std::to_string(n) + " out of range");
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          out.at(b, ch, y, x) = images[((n * h + y) * w + x) * c + ch];
  }
  return out;
}

Tensor Dataset::mask(std::size_t i) const {
  if (!has_masks()) throw std::logic_error("dataset has no ground-truth masks");
  const std::size_t h = masks.dim(1), w = masks.dim(2);
  const auto d = masks.data().subspan(i * h * w, h * w);
  return Tensor({h, w}, std::vector<double>(d.begin(), d.end()));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t h = images.dim(1), w = images.dim(2), c = images.dim(3);
  const std::size_t per = h * w * c;
  std::vector<double> img, msk;
  img.reserve(indices.size() * per);
  Dataset out;
  out.split = split;
  out.classes = classes;
  for (std::size_t n : indices) {
    if (n >= size()) throw std::out_of_range("sample " + std::to_string(n) + " out of range");
    const auto src = images.data().subspan(n * per, per);
    img.insert(img.end(), src.begin(), src.end());
    out.labels.push_back(labels[n]);
    if (has_masks()) {
      const auto m = masks.data().subspan(n * h * w, h * w);
      msk.insert(msk.end(), m.begin(), m.end());
    }
  }
  out.images = Tensor({indices.size(), h, w, c}, std::move(img));
  if (has_masks()) out.masks = Tensor({indices.size(), h, w}, std::move(msk));
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

void Dataset::validate() const {
  if (labels.empty()) throw std::invalid_argument("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset images " + shape_string(images.shape()) + " do not match " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " of sample " +
                                  std::to_string(i) + " is not below class count " +
                                  std::to_string(classes));
    }
  }
}

IdxFormatError::IdxFormatError(const std::string& path, std::size_t offset, const std::string& what)
    : std::runtime_error(path + ": malformed IDX at byte offset " + std::to_string(offset) + ": " + what),
      offset_(offset) {}

namespace {

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
}

}  // namespace

IdxArray read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4) throw IdxFormatError(path, bytes.size(), "file shorter than the magic number");
  if (bytes[0] != 0 || bytes[1] != 0) throw IdxFormatError(path, bytes[0] != 0 ? 0 : 1, "magic must start with two zero bytes");
  if (bytes[2] != 0x08) throw IdxFormatError(path, 2, "only unsigned byte (0x08) data is supported");
  const std::size_t rank = bytes[3];
  if (rank == 0) throw IdxFormatError(path, 3, "rank must be at least 1");
  if (bytes.size() < 4 + 4 * rank) throw IdxFormatError(path, bytes.size(), "truncated dimension list");
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::uint32_t extent = read_be32(bytes, 4 + 4 * d);
    if (extent == 0) throw IdxFormatError(path, 4 + 4 * d, "zero extent");
    arr.dims.push_back(extent);
    count *= extent;
  }
  const std::size_t data_start = 4 + 4 * rank;
  if (bytes.size() != data_start + count) {
    throw IdxFormatError(path, std::min(bytes.size(), data_start + count),
                         "payload holds " + std::to_string(bytes.size() - data_start) +
                             " bytes, dimensions require " + std::to_string(count));
  }
  arr.values.assign(bytes.begin() + static_cast<long>(data_start), bytes.end());
  return arr;
}

void write_idx(const std::string& path, const IdxArray& array) {
  std::vector<unsigned char> out{0, 0, 0x08, static_cast<unsigned char>(array.dims.size())};
  for (std::uint32_t d : array.dims) put_be32(out, d);
  out.insert(out.end(), array.values.begin(), array.values.end());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

Dataset ingest_idx(const std::string& images_path, const std::string& labels_path, Split split,
                   std::size_t classes) {
  const IdxArray img = read_idx(images_path);
  const IdxArray lab = read_idx(labels_path);
  if (img.dims.size() != 3) throw IdxFormatError(images_path, 3, "image file must have rank 3 (magic 0x00000803)");
  if (lab.dims.size() != 1) throw IdxFormatError(labels_path, 3, "label file must have rank 1 (magic 0x00000801)");
  if (img.dims[0] != lab.dims[0]) {
    throw IdxFormatError(labels_path, 4, "label count " + std::to_string(lab.dims[0]) +
                                             " != image count " + std::to_string(img.dims[0]));
  }
  Dataset d;
  d.split = split;
  std::vector<double> values(img.values.size());
  std::transform(img.values.begin(), img.values.end(), values.begin(),
                 [](std::uint8_t v) { return static_cast<double>(v) / 255.0; });
  d.images = Tensor({img.dims[0], img.dims[1], img.dims[2], 1}, std::move(values));
  d.labels.assign(lab.values.begin(), lab.values.end());
  std::size_t max_label = 0;
  for (std::size_t l : d.labels) max_label = std::max(max_label, l);
  d.classes = classes == 0 ? max_label + 1 : classes;
  d.validate();
  return d;
}

void export_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
  if (data.images.dim(3) != 1) throw std::invalid_argument("IDX export supports single-channel images only");
  IdxArray img{{static_cast<std::uint32_t>(data.images.dim(0)), static_cast<std::uint32_t>(data.images.dim(1)),
                static_cast<std::uint32_t>(data.images.dim(2))},
               {}};
  for (double v : data.images.data()) {
    img.values.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  IdxArray lab{{static_cast<std::uint32_t>(data.size())}, {}};
  for (std::size_t l : data.labels) lab.values.push_back(static_cast<std::uint8_t>(l));
  write_idx(images_path, img);
  write_idx(labels_path, lab);
}

Dataset synth_patch_dataset(std::uint64_t seed, std::size_t count, std::size_t classes, Split split,
                            PatchDatasetOptions opt) {
  if (count == 0 || classes == 0) throw std::invalid_argument("patch dataset needs count and classes >= 1");
  const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(classes))));
  const std::size_t cell = opt.image_size / grid;
  if (cell < 4) {
    throw std::invalid_argument("image size " + std::to_string(opt.image_size) + " too small for " +
                                std::to_string(classes) + " patch classes");
  }
  const std::size_t patch = std::max<std::size_t>(2, cell / 2);
  const std::size_t s = opt.image_size, ch = opt.channels;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> background(0.0, opt.background_max);
  std::uniform_real_distribution<double> bright(opt.patch_min, 1.0);

  Dataset d;
  d.split = split;
  d.classes = classes;
  d.images = Tensor({count, s, s, ch});
  d.masks = Tensor({count, s, s});
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t label = static_cast<std::size_t>(rng() % classes);
    const std::size_t cy = (label / grid) * cell, cx = (label % grid) * cell;
    const std::size_t py = cy + static_cast<std::size_t>(rng() % (cell - patch + 1));
    const std::size_t px = cx + static_cast<std::size_t>(rng() % (cell - patch + 1));
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const bool inside = y >= py && y < py + patch && x >= px && x < px + patch;
        d.masks[(n * s + y) * s + x] = inside ? 1.0 : 0.0;
        for (std::size_t c = 0; c < ch; ++c) {
          d.images[((n * s + y) * s + x) * ch + c] = inside ? bright(rng) : background(rng);
        }
      }
    }
    d.labels.push_back(label);
  }
  return d;
}

DatasetPair load_dataset_manifest(const std::string& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::runtime_error("cannot parse dataset manifest " + path + ": " + e.message());
  }
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  if (auto synth = tree.get_child_optional("synthetic")) {
    PatchDatasetOptions opt;
    opt.image_size = synth->get<std::size_t>("size", 16);
    opt.channels = synth->get<std::size_t>("channels", 1);
    const std::uint64_t seed = synth->get<std::uint64_t>("seed", 0);
    const std::size_t classes = synth->get<std::size_t>("classes", 4);
    return {synth_patch_dataset(seed, synth->get<std::size_t>("train", 1000), classes, Split::train, opt),
            synth_patch_dataset(seed + 1, synth->get<std::size_t>("test", 200), classes, Split::test, opt)};
  }
  const std::size_t classes = tree.get<std::size_t>("dataset.classes", 0);
  auto load = [&](const char* section, Split split) {
    auto images = tree.get_optional<std::string>(std::string(section) + ".images");
    auto labels = tree.get_optional<std::string>(std::string(section) + ".labels");
    if (!images || !labels) {
      throw std::invalid_argument("dataset manifest " + path + " is missing " + section +
                                  (images ? ".labels" : ".images"));
    }
    return ingest_idx(resolve(*images), resolve(*labels), split, classes);
  };
  Dataset train = load("train", Split::train);
  Dataset test = load("test", Split::test);
  const std::size_t c = std::max(train.classes, test.classes);
  train.classes = test.classes = c;
  return {std::move(train), std::move(test)};
}

}  // namespace saliency
