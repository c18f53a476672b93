#include "ctxvit/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "ctxvit/rng.hpp"

namespace ctxvit {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                    expected);
}

template <typename T>
T parse_integer(std::string_view key, std::string_view v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a real number");
  return out;
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(trim(v.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename Access>
Field size_field(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); },
               [access, key](RunConfig& c, std::string_view v) { access(c) = parse_integer<std::size_t>(key, v); }};
}

template <typename Access>
Field u64_field(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); },
               [access, key](RunConfig& c, std::string_view v) { access(c) = parse_integer<std::uint64_t>(key, v); }};
}

template <typename Access>
Field real_field(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return format_real(access(const_cast<RunConfig&>(c))); },
               [access, key](RunConfig& c, std::string_view v) { access(c) = parse_real(key, v); }};
}

template <typename Access>
Field text_field(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)); },
               [access](RunConfig& c, std::string_view v) { access(c) = std::string(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(u64_field("seed", [](RunConfig& c) -> auto& { return c.seed; }));
    f.push_back(u64_field("data_seed", [](RunConfig& c) -> auto& { return c.data_seed; }));
    f.push_back(Field{"kind", [](const RunConfig& c) { return c.kind; },
                      [](RunConfig& c, std::string_view v) {
                        ContextKind::parse(v);
                        c.kind = std::string(v);
                      }});
    f.push_back(size_field("context_patches", [](RunConfig& c) -> auto& { return c.context_patches; }));
    f.push_back(real_field("ema_lambda", [](RunConfig& c) -> auto& { return c.ema_lambda; }));

    f.push_back(size_field("patch", [](RunConfig& c) -> auto& { return c.vit.patch; }));
    f.push_back(size_field("dim", [](RunConfig& c) -> auto& { return c.vit.dim; }));
    f.push_back(size_field("depth", [](RunConfig& c) -> auto& { return c.vit.depth; }));
    f.push_back(size_field("heads", [](RunConfig& c) -> auto& { return c.vit.heads; }));
    f.push_back(real_field("mlp_ratio", [](RunConfig& c) -> auto& { return c.vit.mlp_ratio; }));
    f.push_back(real_field("init_scale", [](RunConfig& c) -> auto& { return c.vit.init_scale; }));
    f.push_back(real_field("norm_eps", [](RunConfig& c) -> auto& { return c.vit.norm_eps; }));
    f.push_back(Field{"ffn_activation",
                      [](const RunConfig& c) {
                        return std::string(c.vit.ffn_activation == Activation::gelu ? "gelu" : "relu");
                      },
                      [](RunConfig& c, std::string_view v) { c.vit.ffn_activation = parse_activation(v); }});

    f.push_back(size_field("epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    f.push_back(size_field("batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    f.push_back(size_field("eval_batch_size", [](RunConfig& c) -> auto& { return c.train.eval_batch_size; }));
    f.push_back(real_field("base_lr", [](RunConfig& c) -> auto& { return c.train.base_lr; }));
    f.push_back(real_field("final_lr", [](RunConfig& c) -> auto& { return c.train.final_lr; }));
    f.push_back(size_field("warmup_epochs", [](RunConfig& c) -> auto& { return c.train.warmup_epochs; }));
    f.push_back(real_field("weight_decay_start", [](RunConfig& c) -> auto& { return c.train.weight_decay_start; }));
    f.push_back(real_field("weight_decay_end", [](RunConfig& c) -> auto& { return c.train.weight_decay_end; }));
    f.push_back(Field{"sampler", [](const RunConfig& c) { return sampler_name(c.train.sampler); },
                      [](RunConfig& c, std::string_view v) { c.train.sampler = parse_sampler(std::string(v)); }});
    f.push_back(Field{"mode",
                      [](const RunConfig& c) {
                        return std::string(c.train.mode == TrainMode::finetune ? "finetune" : "probe");
                      },
                      [](RunConfig& c, std::string_view v) {
                        if (v == "finetune") c.train.mode = TrainMode::finetune;
                        else if (v == "probe") c.train.mode = TrainMode::probe;
                        else bad_value("mode", v, "finetune or probe");
                      }});
    f.push_back(size_field("probe_epochs", [](RunConfig& c) -> auto& { return c.train.probe_epochs; }));
    f.push_back(real_field("probe_lr", [](RunConfig& c) -> auto& { return c.train.probe_lr; }));
    f.push_back(real_field("probe_momentum", [](RunConfig& c) -> auto& { return c.train.probe_momentum; }));

    f.push_back(size_field("num_classes", [](RunConfig& c) -> auto& { return c.data.num_classes; }));
    f.push_back(size_field("train_groups", [](RunConfig& c) -> auto& { return c.data.train_groups; }));
    f.push_back(size_field("ood_groups", [](RunConfig& c) -> auto& { return c.data.ood_groups; }));
    f.push_back(size_field("images_per_group", [](RunConfig& c) -> auto& { return c.data.images_per_group; }));
    f.push_back(size_field("image_h", [](RunConfig& c) -> auto& { return c.data.image_h; }));
    f.push_back(size_field("image_w", [](RunConfig& c) -> auto& { return c.data.image_w; }));
    f.push_back(size_field("channels", [](RunConfig& c) -> auto& { return c.data.channels; }));
    f.push_back(size_field("texture_period", [](RunConfig& c) -> auto& { return c.data.texture_period; }));
    f.push_back(real_field("bias_max", [](RunConfig& c) -> auto& { return c.data.bias_max; }));
    f.push_back(real_field("contrast_gamma", [](RunConfig& c) -> auto& { return c.data.contrast_gamma; }));
    f.push_back(real_field("texture_amp", [](RunConfig& c) -> auto& { return c.data.texture_amp; }));
    f.push_back(real_field("noise_std", [](RunConfig& c) -> auto& { return c.data.noise_std; }));
    f.push_back(real_field("signal_amp", [](RunConfig& c) -> auto& { return c.data.signal_amp; }));
    f.push_back(real_field("color_amp", [](RunConfig& c) -> auto& { return c.data.color_amp; }));
    f.push_back(real_field("val_fraction", [](RunConfig& c) -> auto& { return c.data.val_fraction; }));
    f.push_back(real_field("test_fraction", [](RunConfig& c) -> auto& { return c.data.test_fraction; }));

    f.push_back(text_field("output_dir", [](RunConfig& c) -> auto& { return c.output_dir; }));
    f.push_back(text_field("dataset", [](RunConfig& c) -> auto& { return c.dataset; }));
    f.push_back(text_field("checkpoint", [](RunConfig& c) -> auto& { return c.checkpoint; }));

    f.push_back(Field{"ablation_kinds", [](const RunConfig& c) { return join(c.ablation_kinds); },
                      [](RunConfig& c, std::string_view v) {
                        std::vector<std::string> kinds;
                        for (std::string_view k : split_list(v)) {
                          ContextKind::parse(k);
                          kinds.emplace_back(k);
                        }
                        c.ablation_kinds = std::move(kinds);
                      }});
    f.push_back(Field{"ablation_seeds", [](const RunConfig& c) { return join(c.ablation_seeds); },
                      [](RunConfig& c, std::string_view v) {
                        std::vector<std::uint64_t> seeds;
                        for (std::string_view s : split_list(v)) seeds.push_back(parse_integer<std::uint64_t>("ablation_seeds", s));
                        c.ablation_seeds = std::move(seeds);
                      }});
    f.push_back(Field{"sweep_sizes", [](const RunConfig& c) { return join(c.sweep_sizes); },
                      [](RunConfig& c, std::string_view v) {
                        std::vector<std::size_t> sizes;
                        for (std::string_view s : split_list(v)) sizes.push_back(parse_integer<std::size_t>("sweep_sizes", s));
                        c.sweep_sizes = std::move(sizes);
                      }});
    f.push_back(size_field("token_batches_per_group", [](RunConfig& c) -> auto& { return c.token_batches_per_group; }));
    f.push_back(size_field("token_batch_size", [](RunConfig& c) -> auto& { return c.token_batch_size; }));
    f.push_back(size_field("token_layer", [](RunConfig& c) -> auto& { return c.token_layer; }));
    f.push_back(size_field("pca_components", [](RunConfig& c) -> auto& { return c.pca_components; }));
    return f;
  }();
  return table;
}

const Field& field(std::string_view key) {
  for (const Field& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

ContextKind RunConfig::context_kind() const {
  ContextKind k = ContextKind::parse(kind);
  k.context_patches = context_patches;
  k.ema_lambda = ema_lambda;
  return k;
}

ViTConfig RunConfig::vit_config() const {
  ViTConfig v = vit;
  v.image_h = data.image_h;
  v.image_w = data.image_w;
  v.channels = data.channels;
  v.num_classes = data.num_classes;
  return v;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  try {
    context_kind().validate();
    vit_config().validate();
    train.validate();
    data.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (ablation_kinds.empty()) throw ConfigError("ablation_kinds must not be empty");
  if (ablation_seeds.empty()) throw ConfigError("ablation_seeds must not be empty");
  for (std::size_t s : sweep_sizes) {
    if (s == 0) throw ConfigError("sweep_sizes entries must be at least 1");
  }
  if (token_batches_per_group < 2 || token_batch_size == 0) {
    throw ConfigError("token_batches_per_group must be >= 2 and token_batch_size >= 1");
  }
  if (pca_components == 0 || pca_components > vit.dim) throw ConfigError("pca_components must lie in [1, dim]");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::string body;
  for (const Field& f : fields()) {
    if (f.key == "seed") continue;
    body += f.key + " = " + f.get(*this) + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_bytes(body)));
  return buf;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  const Field& f = field(key);
  try {
    f.set(config, trim(value));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  set_config_value(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

RunConfig parse_run_config(std::string_view text, const std::string& origin) {
  RunConfig config;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_config_value(config, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_run_config(os.str(), path.string());
}

}  // namespace ctxvit
