#include "ctxvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "binary_io.hpp"

namespace ctxvit {

namespace {

constexpr char kDataMagic[] = "CVITDATA";
constexpr std::uint32_t kDataVersion = 1;

std::vector<double> spatial_pattern(std::size_t h, std::size_t w, int index) {
  // DCT-II basis functions, skipping the constant one, in order of increasing
  // total frequency. They are mutually orthogonal on the pixel grid.
  std::vector<std::pair<std::size_t, std::size_t>> freqs;
  for (std::size_t s = 1; s < h + w - 1 && freqs.size() <= static_cast<std::size_t>(index); ++s) {
    for (std::size_t u = 0; u <= s; ++u) {
      const std::size_t v = s - u;
      if (u < h && v < w) freqs.emplace_back(u, v);
    }
  }
  if (static_cast<std::size_t>(index) >= freqs.size()) {
    throw std::invalid_argument("class_template: image too small for the requested number of classes");
  }
  const auto [u, v] = freqs[static_cast<std::size_t>(index)];
  std::vector<double> p(h * w);
  double sq = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double val = std::cos(std::numbers::pi * (2.0 * y + 1.0) * u / (2.0 * h)) *
                         std::cos(std::numbers::pi * (2.0 * x + 1.0) * v / (2.0 * w));
      p[y * w + x] = val;
      sq += val * val;
    }
  }
  const double rms = std::sqrt(sq / static_cast<double>(h * w));
  for (double& val : p) val /= rms;
  return p;
}

std::vector<double> class_color(const SyntheticShiftSpec& spec, int label) {
  std::vector<double> color(spec.channels);
  const bool fits_corners = spec.channels < 31 && spec.num_classes <= (std::size_t{1} << spec.channels);
  if (fits_corners) {
    for (std::size_t c = 0; c < spec.channels; ++c) color[c] = ((label >> c) & 1) ? 1.0 : -1.0;
  } else {
    Rng rng = Rng(0xC01047ULL).split(static_cast<std::uint64_t>(label));
    for (double& v : color) v = rng.normal();
  }
  return color;
}

// Zero-mean, unit-RMS pattern repeating every `texture_period` pixels.
std::vector<double> texture_pattern(const SyntheticShiftSpec& spec, std::uint64_t seed) {
  const std::size_t p = spec.texture_period;
  Rng rng = Rng(seed).split("texture");
  std::vector<double> tile(p * p * spec.channels);
  for (double& v : tile) v = rng.normal();
  for (std::size_t c = 0; c < spec.channels; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < p * p; ++i) mean += tile[i * spec.channels + c];
    mean /= static_cast<double>(p * p);
    for (std::size_t i = 0; i < p * p; ++i) tile[i * spec.channels + c] -= mean;
  }
  double sq = 0.0;
  for (double v : tile) sq += v * v;
  const double rms = std::sqrt(sq / static_cast<double>(tile.size()));
  std::vector<double> tex(spec.image_h * spec.image_w * spec.channels);
  for (std::size_t y = 0; y < spec.image_h; ++y) {
    for (std::size_t x = 0; x < spec.image_w; ++x) {
      for (std::size_t c = 0; c < spec.channels; ++c) {
        tex[(y * spec.image_w + x) * spec.channels + c] = tile[((y % p) * p + (x % p)) * spec.channels + c] / rms;
      }
    }
  }
  return tex;
}

}  // namespace

void SyntheticShiftSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("SyntheticShiftSpec: " + msg); };
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (train_groups == 0) fail("train_groups must be positive");
  if (images_per_group == 0) fail("images_per_group must be positive");
  if (image_h == 0 || image_w == 0 || channels == 0) fail("image dimensions must be positive");
  if (texture_period == 0) fail("texture_period must be positive");
  if (bias_max < 0.0 || contrast_gamma < 0.0 || contrast_gamma > 1.0) fail("bias_max >= 0 and gamma in [0, 1]");
  if (noise_std < 0.0 || signal_amp < 0.0 || color_amp < 0.0 || texture_amp < 0.0) fail("amplitudes must be >= 0");
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
    fail("val_fraction + test_fraction must be below 1");
  }
  if (num_classes + 1 > image_h * image_w) fail("too many classes for the image size");
}

const std::vector<Sample>& DatasetSplit::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "id_test") return id_test;
  if (name == "ood_test") return ood_test;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val, id_test or ood_test)");
}

GroupShift group_shift(const SyntheticShiftSpec& spec, GroupId group, std::uint64_t seed) {
  Rng rng = Rng(seed).split("shift").split(group);
  GroupShift s;
  s.bias.resize(spec.channels);
  for (double& b : s.bias) b = rng.uniform(-spec.bias_max, spec.bias_max);
  s.contrast = rng.uniform(1.0 - spec.contrast_gamma, 1.0 + spec.contrast_gamma);
  return s;
}

std::vector<double> class_template(const SyntheticShiftSpec& spec, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= spec.num_classes) {
    throw std::invalid_argument("class_template: label out of range");
  }
  const std::vector<double> pattern = spatial_pattern(spec.image_h, spec.image_w, label);
  const std::vector<double> color = class_color(spec, label);
  std::vector<double> t(spec.image_h * spec.image_w * spec.channels);
  for (std::size_t i = 0; i < spec.image_h * spec.image_w; ++i) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      t[i * spec.channels + c] = spec.color_amp * color[c] + spec.signal_amp * pattern[i];
    }
  }
  return t;
}

DatasetSplit generate_dataset(const SyntheticShiftSpec& spec, std::uint64_t seed) {
  spec.validate();
  DatasetSplit out;
  out.image_h = spec.image_h;
  out.image_w = spec.image_w;
  out.channels = spec.channels;
  out.num_classes = spec.num_classes;

  std::vector<std::vector<double>> templates;
  for (std::size_t k = 0; k < spec.num_classes; ++k) templates.push_back(class_template(spec, static_cast<int>(k)));
  const std::vector<double> texture = texture_pattern(spec, seed);
  const std::size_t size = spec.image_h * spec.image_w * spec.channels;

  const std::size_t total_groups = spec.train_groups + spec.ood_groups;
  for (GroupId g = 0; g < total_groups; ++g) {
    const bool ood = g >= spec.train_groups;
    (ood ? out.ood_group_ids : out.train_group_ids).push_back(g);
    const GroupShift shift = group_shift(spec, g, seed);
    Rng rng = Rng(seed).split("images").split(g);
    std::vector<Sample> images;
    images.reserve(spec.images_per_group);
    for (std::size_t i = 0; i < spec.images_per_group; ++i) {
      Sample s;
      s.group = g;
      s.label = static_cast<int>(rng.below(spec.num_classes));
      s.pixels.resize(size);
      const std::vector<double>& t = templates[static_cast<std::size_t>(s.label)];
      for (std::size_t p = 0; p < size; ++p) {
        const double v = 0.5 + t[p] + shift.bias[p % spec.channels] +
                         shift.contrast * spec.texture_amp * texture[p] + spec.noise_std * rng.normal();
        s.pixels[p] = std::clamp(v, 0.0, 1.0);
      }
      images.push_back(std::move(s));
    }
    if (ood) {
      for (Sample& s : images) out.ood_test.push_back(std::move(s));
      continue;
    }
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng split_rng = Rng(seed).split("split").split(g);
    split_rng.shuffle(order);
    const auto n = static_cast<double>(images.size());
    const auto n_val = static_cast<std::size_t>(std::lround(spec.val_fraction * n));
    const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * n));
    for (std::size_t r = 0; r < order.size(); ++r) {
      Sample& s = images[order[r]];
      if (r < n_val) {
        out.val.push_back(std::move(s));
      } else if (r < n_val + n_test) {
        out.id_test.push_back(std::move(s));
      } else {
        out.train.push_back(std::move(s));
      }
    }
  }
  return out;
}

// ===========================================================================
// Batching

SamplerKind parse_sampler(const std::string& name) {
  if (name == "uniform") return SamplerKind::uniform;
  if (name == "context") return SamplerKind::context;
  throw std::invalid_argument("unknown sampler '" + name + "' (expected uniform or context)");
}

std::string sampler_name(SamplerKind kind) { return kind == SamplerKind::uniform ? "uniform" : "context"; }

BatchPlan uniform_sampler(std::span<const Sample> samples, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("sampler: batch_size must be at least 1");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  BatchPlan plan;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                      order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return plan;
}

BatchPlan context_sampler(std::span<const Sample> samples, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("sampler: batch_size must be at least 1");
  std::vector<GroupId> groups;
  for (const Sample& s : samples) groups.push_back(s.group);
  Partition partition = group_partition(groups);
  Rng rng(seed);
  for (GroupSlice& g : partition) rng.shuffle(g.indices);
  rng.shuffle(partition);

  std::vector<std::size_t> cursor(partition.size(), 0);
  BatchPlan plan;
  bool progress = true;
  while (progress) {
    progress = false;
    for (std::size_t g = 0; g < partition.size(); ++g) {
      const auto& idx = partition[g].indices;
      if (cursor[g] >= idx.size()) continue;
      const std::size_t end = std::min(idx.size(), cursor[g] + batch_size);
      plan.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(cursor[g]),
                        idx.begin() + static_cast<std::ptrdiff_t>(end));
      cursor[g] = end;
      progress = true;
    }
  }
  return plan;
}

BatchPlan make_batches(std::span<const Sample> samples, std::size_t batch_size, SamplerKind sampler,
                       std::uint64_t seed) {
  return sampler == SamplerKind::uniform ? uniform_sampler(samples, batch_size, seed)
                                         : context_sampler(samples, batch_size, seed);
}

GroupedBatch gather_batch(std::span<const Sample> samples, std::span<const std::size_t> indices,
                          std::size_t image_h, std::size_t image_w, std::size_t channels) {
  const std::size_t size = image_h * image_w * channels;
  std::vector<double> pixels;
  pixels.reserve(indices.size() * size);
  std::vector<int> labels;
  std::vector<GroupId> groups;
  for (std::size_t i : indices) {
    const Sample& s = samples[i];
    if (s.pixels.size() != size) throw std::invalid_argument("gather_batch: sample has wrong image size");
    pixels.insert(pixels.end(), s.pixels.begin(), s.pixels.end());
    labels.push_back(s.label);
    groups.push_back(s.group);
  }
  return make_grouped_batch(Tensor::from({indices.size(), image_h, image_w, channels}, std::move(pixels)),
                            std::move(labels), std::move(groups));
}

// ===========================================================================
// Persistence

void save_dataset(const DatasetSplit& data, const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes(std::string_view(kDataMagic, 8));
  w.put(kDataVersion);
  w.put(static_cast<std::uint32_t>(data.image_h));
  w.put(static_cast<std::uint32_t>(data.image_w));
  w.put(static_cast<std::uint32_t>(data.channels));
  w.put(static_cast<std::uint32_t>(data.num_classes));
  w.put(static_cast<std::uint32_t>(data.train_group_ids.size()));
  for (GroupId g : data.train_group_ids) w.put(static_cast<std::uint64_t>(g));
  w.put(static_cast<std::uint32_t>(data.ood_group_ids.size()));
  for (GroupId g : data.ood_group_ids) w.put(static_cast<std::uint64_t>(g));
  for (const auto* split : {&data.train, &data.val, &data.id_test, &data.ood_test}) {
    w.put(static_cast<std::uint64_t>(split->size()));
  }
  for (const auto* split : {&data.train, &data.val, &data.id_test, &data.ood_test}) {
    for (const Sample& s : *split) {
      w.put(static_cast<std::int32_t>(s.label));
      w.put(static_cast<std::uint64_t>(s.group));
      for (double v : s.pixels) w.put_f64(v);
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset file " + path.string());
  os.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!os) throw std::runtime_error("failed writing dataset file " + path.string());
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset file " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  const std::string bytes = buf.str();
  binary::Reader r(bytes, "dataset " + path.string());
  if (r.get_bytes(8) != std::string_view(kDataMagic, 8)) {
    throw std::runtime_error("dataset " + path.string() + ": bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kDataVersion) {
    throw std::runtime_error("dataset " + path.string() + ": unsupported version " + std::to_string(version));
  }
  DatasetSplit d;
  d.image_h = r.get<std::uint32_t>();
  d.image_w = r.get<std::uint32_t>();
  d.channels = r.get<std::uint32_t>();
  d.num_classes = r.get<std::uint32_t>();
  const auto n_train_groups = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_train_groups; ++i) d.train_group_ids.push_back(r.get<std::uint64_t>());
  const auto n_ood_groups = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_ood_groups; ++i) d.ood_group_ids.push_back(r.get<std::uint64_t>());
  std::uint64_t counts[4];
  for (auto& c : counts) c = r.get<std::uint64_t>();
  const std::size_t size = d.image_size();
  std::vector<Sample>* splits[] = {&d.train, &d.val, &d.id_test, &d.ood_test};
  for (int k = 0; k < 4; ++k) {
    for (std::uint64_t i = 0; i < counts[k]; ++i) {
      Sample s;
      s.label = r.get<std::int32_t>();
      s.group = r.get<std::uint64_t>();
      s.pixels.resize(size);
      for (double& v : s.pixels) v = r.get_f64();
      splits[k]->push_back(std::move(s));
    }
  }
  if (!r.at_end()) {
    throw std::runtime_error("dataset " + path.string() + ": trailing bytes after last record");
  }
  return d;
}

std::string dataset_manifest(const DatasetSplit& data) {
  nlohmann::ordered_json j;
  j["format"] = "CVITDATA";
  j["version"] = kDataVersion;
  j["image"] = {{"height", data.image_h}, {"width", data.image_w}, {"channels", data.channels}};
  j["num_classes"] = data.num_classes;
  j["train_group_ids"] = data.train_group_ids;
  j["ood_group_ids"] = data.ood_group_ids;
  for (const char* name : {"train", "val", "id_test", "ood_test"}) {
    const auto& split = data.split(name);
    std::map<GroupId, std::size_t> per_group;
    for (const Sample& s : split) ++per_group[s.group];
    nlohmann::ordered_json groups = nlohmann::ordered_json::object();
    for (const auto& [g, n] : per_group) groups[std::to_string(g)] = n;
    j["splits"][name] = {{"size", split.size()}, {"per_group", groups}};
  }
  return j.dump(2) + "\n";
}

}  // namespace ctxvit
