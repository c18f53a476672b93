#include "ctxvit/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace ctxvit {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};

void put_vector(binary::Writer& w, const std::vector<double>& v) {
  w.put(static_cast<std::uint64_t>(v.size()));
  for (double x : v) w.put_f64(x);
}

std::vector<double> get_vector(binary::Reader& r) {
  const auto n = r.get<std::uint64_t>();
  if (n > r.remaining() / 8) throw CheckpointError("checkpoint: truncated file (vector of " + std::to_string(n) + ")");
  std::vector<double> v(n);
  for (double& x : v) x = r.get_f64();
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  binary::Writer w;
  w.put_bytes(std::string_view(kMagic, 8));
  w.put(kCheckpointVersion);
  w.put_string(ckpt.config_hash);
  w.put_string(ckpt.config_text);
  w.put(static_cast<std::uint64_t>(ckpt.entries.size()));
  for (const CheckpointEntry& e : ckpt.entries) {
    if (shape_numel(e.shape) != e.values.size()) {
      throw CheckpointError("checkpoint entry '" + e.name + "': shape does not match value count");
    }
    w.put_string(e.name);
    w.put(static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.put(static_cast<std::uint64_t>(d));
    for (double x : e.values) w.put_f64(x);
  }
  w.put_f64(ckpt.ema_lambda);
  w.put(static_cast<std::uint64_t>(ckpt.ema.size()));
  for (const auto& [g, v] : ckpt.ema) {
    w.put(static_cast<std::uint64_t>(g));
    put_vector(w, v);
  }
  w.put(static_cast<std::uint8_t>(ckpt.optimizer ? 1 : 0));
  if (ckpt.optimizer) {
    const OptimState& o = *ckpt.optimizer;
    w.put(static_cast<std::uint64_t>(o.step));
    w.put(static_cast<std::uint64_t>(o.first_moment.size()));
    for (std::size_t i = 0; i < o.first_moment.size(); ++i) {
      put_vector(w, o.first_moment[i]);
      put_vector(w, o.second_moment.at(i));
    }
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what) {
  try {
    binary::Reader r(bytes, what);
    if (r.get_bytes(8) != std::string_view(kMagic, 8)) throw CheckpointError(what + ": not a checkpoint file");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
      throw CheckpointError(what + ": format version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    c.config_hash = r.get_string();
    c.config_text = r.get_string();
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
      CheckpointEntry e;
      e.name = r.get_string();
      const auto rank = r.get<std::uint32_t>();
      if (rank > 8) throw CheckpointError(what + ": entry '" + e.name + "' has implausible rank");
      for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
      const std::size_t n = shape_numel(e.shape);
      if (n > r.remaining() / 8) throw CheckpointError(what + ": truncated file in entry '" + e.name + "'");
      e.values.resize(n);
      for (double& x : e.values) x = r.get_f64();
      c.entries.push_back(std::move(e));
    }
    c.ema_lambda = r.get_f64();
    const auto groups = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < groups; ++i) {
      const auto g = r.get<std::uint64_t>();
      c.ema[g] = get_vector(r);
    }
    if (r.get<std::uint8_t>() == 1) {
      OptimState o;
      o.step = r.get<std::uint64_t>();
      const auto slots = r.get<std::uint64_t>();
      for (std::uint64_t i = 0; i < slots; ++i) {
        o.first_moment.push_back(get_vector(r));
        o.second_moment.push_back(get_vector(r));
      }
      c.optimizer = std::move(o);
    }
    if (!r.at_end()) throw CheckpointError(what + ": trailing bytes after the last record");
    return c;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
}

Checkpoint checkpoint_from_model(const Model& model, std::string config_hash, std::string config_text,
                                 const OptimState* optimizer) {
  Checkpoint c;
  c.config_hash = std::move(config_hash);
  c.config_text = std::move(config_text);
  for (const NamedParam& p : model.parameters()) {
    c.entries.push_back(CheckpointEntry{p.name, p.tensor.shape(), p.tensor.values()});
  }
  c.ema_lambda = model.ema.lambda;
  c.ema = model.ema.values;
  if (optimizer != nullptr) c.optimizer = *optimizer;
  return c;
}

void restore_model(const Checkpoint& ckpt, Model& model) {
  const std::vector<NamedParam> params = model.parameters();
  const std::size_t common = std::min(params.size(), ckpt.entries.size());
  for (std::size_t i = 0; i < common; ++i) {
    const CheckpointEntry& e = ckpt.entries[i];
    if (e.name != params[i].name || e.shape != params[i].tensor.shape()) {
      throw CheckpointError("checkpoint does not match the model architecture at entry " + std::to_string(i) +
                            ": checkpoint has '" + e.name + "' " + shape_str(e.shape) + ", model expects '" +
                            params[i].name + "' " + shape_str(params[i].tensor.shape()));
    }
  }
  if (params.size() != ckpt.entries.size()) {
    const std::string first = params.size() > common ? "model entry '" + params[common].name + "' is missing"
                                                     : "checkpoint entry '" + ckpt.entries[common].name +
                                                           "' has no counterpart in the model";
    throw CheckpointError("checkpoint does not match the model architecture: " + first);
  }
  for (std::size_t i = 0; i < common; ++i) {
    Tensor t = params[i].tensor;
    std::copy(ckpt.entries[i].values.begin(), ckpt.entries[i].values.end(), t.mutable_data().begin());
  }
  model.ema.lambda = ckpt.ema_lambda;
  model.ema.values = ckpt.ema;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint file " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing checkpoint file " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint file " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return decode_checkpoint(os.str(), path.string());
}

}  // namespace ctxvit
