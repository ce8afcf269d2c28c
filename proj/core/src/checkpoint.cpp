#include <limits>
// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace voxflow {

namespace {

constexpr char kMagic[8] = {'V', 'X', 'F', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void put_u64(std::ostream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<char*>(b), 8);
}

struct Reader {
  std::ifstream in;
  int64_t offset = 0;
  explicit Reader(const std::string& path) : in(path, std::ios::binary) {
    if (!in) throw IoError("cannot open checkpoint " + path);
  }
  void bytes(void* dst, size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in) throw FormatError("truncated checkpoint", offset);
    offset += static_cast<int64_t>(n);
  }
  uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (uint32_t(b[3]) << 24);
  }
  uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
  }
};

nlohmann::json config_to_json(const FlowConfig& c) {
  return {{"n_blocks", c.n_blocks},
          {"n_flows_per_block", c.n_flows_per_block},
          {"squeeze_factor", c.squeeze_factor},
          {"coupling_hidden_channels", c.coupling_hidden_channels},
          {"embedding_dim", c.embedding_dim},
          {"frame_size", c.frame_size},
          {"n_speakers", c.n_speakers},
          {"scale_eps", c.scale_eps}};
}

FlowConfig config_from_json(const nlohmann::json& j) {
  FlowConfig c;
  c.n_blocks = j.at("n_blocks").get<int64_t>();
  c.n_flows_per_block = j.at("n_flows_per_block").get<int64_t>();
  c.squeeze_factor = j.at("squeeze_factor").get<int64_t>();
  c.coupling_hidden_channels = j.at("coupling_hidden_channels").get<int64_t>();
  c.embedding_dim = j.at("embedding_dim").get<int64_t>();
  c.frame_size = j.at("frame_size").get<int64_t>();
  c.n_speakers = j.at("n_speakers").get<int64_t>();
  c.scale_eps = j.at("scale_eps").get<double>();
  return c;
}

}  // namespace

void write_blob_file(const std::string& path, const std::string& header_json,
                     const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u64(out, header_json.size());
  out.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
  put_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, static_cast<uint32_t>(t.dims.size()));
    int64_t total = 1;
    for (const int64_t d : t.dims) {
      put_u64(out, static_cast<uint64_t>(d));
      total *= d;
    }
    if (total != static_cast<int64_t>(t.data.size()))
      throw ShapeError("batch", "tensor " + t.name + " dims do not match data length");
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for " + path);
}

BlobFile read_blob_file(const std::string& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("bad magic in " + path, 0);
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), r.offset - 4);

  BlobFile blob;
  const uint64_t header_len = r.u64();
  blob.header_json.resize(header_len);
  r.bytes(blob.header_json.data(), header_len);

  const uint32_t count = r.u32();
  blob.tensors.resize(count);
  for (auto& t : blob.tensors) {
    const uint32_t name_len = r.u32();
    t.name.resize(name_len);
    r.bytes(t.name.data(), name_len);
    const uint32_t ndims = r.u32();
    t.dims.resize(ndims);
    int64_t total = 1;
    for (auto& d : t.dims) {
      d = static_cast<int64_t>(r.u64());
      total *= d;
    }
    t.data.resize(static_cast<size_t>(total));
    r.bytes(t.data.data(), static_cast<size_t>(total) * sizeof(float));
  }
  return blob;
}

void save_checkpoint(const std::string& path, FlowModel<float>& model,
                     const std::vector<std::string>& speaker_names, const TrainState& state,
                     const AdamState<float>* adam) {
  nlohmann::json header;
  header["config"] = config_to_json(model.config());
  nlohmann::json speakers = nlohmann::json::object();
  for (size_t i = 0; i < speaker_names.size(); ++i) speakers[speaker_names[i]] = i;
  header["speakers"] = speakers;
  header["actnorm_initialized"] = model.actnorm_initialized();
  header["epoch"] = state.epoch;
  // +inf (an untrained model) is not representable in JSON; use null
  header["best_val_nll"] =
      std::isfinite(state.best_val_nll) ? nlohmann::json(state.best_val_nll) : nlohmann::json();
  header["epochs_since_improvement"] = state.epochs_since_improvement;
  header["anneal_count"] = state.anneal_count;
  header["initial_lr"] = state.initial_lr;
  header["current_lr"] = state.current_lr;
  header["rng_seed"] = state.rng_seed;
  header["rng_state"] = state.rng_state;
  header["has_optimizer"] = adam != nullptr;
  if (adam) header["adam_step_count"] = adam->step_count;

  std::vector<NamedTensor> tensors;
  auto params = model.parameters();
  for (const auto& p : params) {
    NamedTensor t;
    t.name = p.name;
    t.dims = {p.shape[0], p.shape[1], p.shape[2]};
    t.data.assign(p.value, p.value + p.size);
    tensors.push_back(std::move(t));
  }
  if (adam) {
    for (size_t i = 0; i < params.size(); ++i) {
      NamedTensor m{"adam.m." + params[i].name, {static_cast<int64_t>(adam->first_moment[i].size())},
                    adam->first_moment[i]};
      NamedTensor v{"adam.v." + params[i].name, {static_cast<int64_t>(adam->second_moment[i].size())},
                    adam->second_moment[i]};
      tensors.push_back(std::move(m));
      tensors.push_back(std::move(v));
    }
  }
  write_blob_file(path, header.dump(), tensors);
}

int LoadedCheckpoint::speaker_id(const std::string& name) const {
  for (size_t i = 0; i < speaker_names.size(); ++i)
    if (speaker_names[i] == name) return static_cast<int>(i);
  return -1;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const BlobFile blob = read_blob_file(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  LoadedCheckpoint out;
  const FlowConfig cfg = config_from_json(header.at("config"));
  out.model = std::make_unique<FlowModel<float>>(cfg);

  out.speaker_names.resize(header.at("speakers").size());
  for (const auto& [name, id] : header.at("speakers").items()) {
    const size_t idx = id.get<size_t>();
    if (idx >= out.speaker_names.size()) throw FormatError("speaker id " + std::to_string(idx) + " out of range");
    out.speaker_names[idx] = name;
  }

  try {
    out.state.epoch = header.at("epoch").get<int64_t>();
    out.state.best_val_nll = header.at("best_val_nll").is_null()
                                 ? std::numeric_limits<double>::infinity()
                                 : header.at("best_val_nll").get<double>();
    out.state.epochs_since_improvement = header.at("epochs_since_improvement").get<int64_t>();
    out.state.anneal_count = header.at("anneal_count").get<int64_t>();
    out.state.initial_lr = header.at("initial_lr").get<double>();
    out.state.current_lr = header.at("current_lr").get<double>();
    out.state.rng_seed = header.at("rng_seed").get<uint64_t>();
    out.state.rng_state = header.at("rng_state").get<std::string>();
    out.has_optimizer = header.at("has_optimizer").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header field: ") + e.what());
  }

  // model tensors by name
  auto params = out.model->parameters();
  size_t loaded = 0;
  for (const auto& t : blob.tensors) {
    if (t.name.rfind("adam.", 0) == 0) continue;
    bool found = false;
    for (auto& p : params) {
      if (p.name != t.name) continue;
      if (static_cast<int64_t>(t.data.size()) != p.size)
        throw FormatError("config mismatch: tensor " + t.name + " has " + std::to_string(t.data.size()) +
                          " values, model expects " + std::to_string(p.size));
      std::copy(t.data.begin(), t.data.end(), p.value);
      found = true;
      ++loaded;
      break;
    }
    if (!found) throw FormatError("config mismatch: unexpected tensor " + t.name);
  }
  if (loaded != params.size())
    throw FormatError("config mismatch: checkpoint holds " + std::to_string(loaded) + " of " +
                      std::to_string(params.size()) + " model tensors");

  if (header.at("actnorm_initialized").get<bool>())
    for (auto& step : out.model->steps()) step.actnorm_initialized = true;

  if (out.has_optimizer) {
    out.adam.lr = out.state.current_lr;
    out.adam.step_count = header.at("adam_step_count").get<int64_t>();
    out.adam.first_moment.resize(params.size());
    out.adam.second_moment.resize(params.size());
    for (const auto& t : blob.tensors) {
      if (t.name.rfind("adam.m.", 0) == 0 || t.name.rfind("adam.v.", 0) == 0) {
        const bool is_m = t.name[5] == 'm';
        const std::string pname = t.name.substr(7);
        bool found = false;
        for (size_t i = 0; i < params.size(); ++i) {
          if (params[i].name == pname) {
            (is_m ? out.adam.first_moment[i] : out.adam.second_moment[i]) = t.data;
            found = true;
            break;
          }
        }
        if (!found) throw FormatError("optimizer tensor for unknown parameter " + pname);
      }
    }
    for (size_t i = 0; i < params.size(); ++i)
      if (static_cast<int64_t>(out.adam.first_moment[i].size()) != params[i].size ||
          static_cast<int64_t>(out.adam.second_moment[i].size()) != params[i].size)
        throw FormatError("optimizer state incomplete for " + params[i].name);
  }

  out.model->bump_version();
  return out;
}

}  // namespace voxflow
