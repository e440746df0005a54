#include "dsmoe/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "dsmoe/rng.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace dsmoe {

namespace {

using nlohmann::json;

void append_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t read_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

size_t align_up(size_t v, size_t a) { return (v + a - 1) / a * a; }

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), Status::io_error, "cannot open for writing: " + tmp);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    require(f.good(), Status::io_error, "write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    fail(Status::io_error, "cannot move temporary file into place: " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Status::io_error, "cannot open for reading: " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(!f.bad(), Status::io_error, "read failed: " + path);
  return data;
}

struct TensorRef {
  std::string name;
  int rows;
  int cols;
  const void* data;
  size_t bytes;
};

template <std::floating_point T>
void collect_tensors(const MoeModel<T>& model, std::vector<TensorRef>& out) {
  auto add = [&out](std::string name, const Matrix<T>& m) {
    out.push_back({std::move(name), m.rows, m.cols, m.data.data(), m.data.size() * sizeof(T)});
  };
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const MoeLayer<T>& layer = model.layers[l];
    const std::string base = "layers/" + std::to_string(l) + "/";
    add(base + "gate", layer.gate);
    for (size_t e = 0; e < layer.experts.size(); ++e) {
      const std::string eb = base + "experts/" + std::to_string(e) + "/";
      add(eb + "w1", layer.experts[e].w1);
      add(eb + "w3", layer.experts[e].w3);
      add(eb + "w2", layer.experts[e].w2);
    }
    for (size_t s = 0; s < layer.shared_experts.size(); ++s) {
      const std::string sb = base + "shared/" + std::to_string(s) + "/";
      add(sb + "w1", layer.shared_experts[s].w1);
      add(sb + "w3", layer.shared_experts[s].w3);
      add(sb + "w2", layer.shared_experts[s].w2);
    }
  }
}

json config_to_json(const MoeConfig& c) {
  return json{{"d_model", c.d_model},
              {"d_ffn", c.d_ffn},
              {"num_experts", c.num_experts},
              {"top_k", c.top_k},
              {"num_shared_experts", c.num_shared_experts},
              {"gate_prenormalized", c.gate_prenormalized}};
}

MoeConfig config_from_json(const json& j) {
  MoeConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.num_shared_experts = j.at("num_shared_experts").get<int>();
  c.gate_prenormalized = j.at("gate_prenormalized").get<bool>();
  return c;
}

}  // namespace

template <std::floating_point T>
void save_model(const MoeModel<T>& model, const std::string& path) {
  model.validate();
  std::vector<TensorRef> tensors;
  collect_tensors(model, tensors);

  json manifest;
  manifest["format"] = "dsmoe-container";
  manifest["version"] = 1;
  manifest["scalar_width"] = static_cast<int>(sizeof(T));
  manifest["num_layers"] = model.num_layers();
  json layers = json::array();
  for (const auto& layer : model.layers) {
    json jl;
    jl["config"] = config_to_json(layer.config);
    jl["lineage"] = lineage_name(layer.lineage);
    jl["replay_factor"] = layer.replay_factor;
    jl["neuron_order"] = layer.neuron_order;
    layers.push_back(std::move(jl));
  }
  manifest["layers"] = std::move(layers);

  // The tensor table depends on final offsets, which depend on the manifest
  // length. Render once with placeholder offsets to fix the length, then
  // re-render with the real offsets padded to the same length.
  auto render = [&](bool placeholder, size_t payload_base, std::vector<size_t>* offsets) {
    json table = json::array();
    size_t off = payload_base;
    for (const TensorRef& t : tensors) {
      off = align_up(off, kTensorAlignment);
      table.push_back(json{{"name", t.name},
                           {"shape", json::array({t.rows, t.cols})},
                           {"width", static_cast<int>(sizeof(T))},
                           {"offset", placeholder ? size_t{0} : off}});
      if (offsets) offsets->push_back(off);
      off += t.bytes;
    }
    json m = manifest;
    m["tensors"] = std::move(table);
    return m.dump();
  };

  std::string probe = render(true, 0, nullptr);
  // Offsets rendered as decimals can be longer than the probe's zeros; pad
  // the manifest with trailing spaces to a stable length first.
  size_t manifest_len = probe.size() + tensors.size() * 24;
  size_t payload_base = align_up(16 + manifest_len, kTensorAlignment);
  std::vector<size_t> offsets;
  std::string body = render(false, payload_base, &offsets);
  require(body.size() <= manifest_len, Status::internal, "manifest length estimate too small");
  body.resize(manifest_len, ' ');

  std::string out;
  out.reserve(payload_base + (tensors.empty() ? 0 : offsets.back() + tensors.back().bytes));
  out.append(reinterpret_cast<const char*>(kContainerMagic), 8);
  append_u64(out, manifest_len);
  out += body;
  for (size_t i = 0; i < tensors.size(); ++i) {
    out.resize(offsets[i], '\0');
    out.append(static_cast<const char*>(tensors[i].data), tensors[i].bytes);
  }
  write_file_atomic(path, out);
}

namespace {

template <std::floating_point T>
MoeModel<T> model_from_container(const json& manifest, const std::string& raw) {
  const int num_layers = manifest.at("num_layers").get<int>();
  require(num_layers >= 1, Status::schema_error, "container: num_layers must be >= 1");
  const json& jlayers = manifest.at("layers");
  require(jlayers.is_array() && static_cast<int>(jlayers.size()) == num_layers,
          Status::schema_error, "container: layer list does not match num_layers");

  // Validate the tensor table before touching payload bytes.
  const json& jt = manifest.at("tensors");
  require(jt.is_array(), Status::schema_error, "container: tensor table missing");
  struct Entry {
    std::string name;
    int rows, cols;
    size_t offset, bytes;
  };
  std::vector<Entry> entries;
  size_t prev_end = 0;
  for (const json& e : jt) {
    Entry en;
    en.name = e.at("name").get<std::string>();
    const json& shape = e.at("shape");
    require(shape.is_array() && shape.size() == 2, Status::schema_error,
            "container: tensor shape must be [rows, cols]");
    en.rows = shape[0].get<int>();
    en.cols = shape[1].get<int>();
    require(en.rows >= 0 && en.cols >= 0, Status::schema_error, "container: negative tensor shape");
    const int width = e.at("width").get<int>();
    require(width == static_cast<int>(sizeof(T)), Status::schema_error,
            "container: tensor width disagrees with scalar_width");
    en.offset = e.at("offset").get<size_t>();
    en.bytes = static_cast<size_t>(en.rows) * static_cast<size_t>(en.cols) * sizeof(T);
    require(en.offset % kTensorAlignment == 0, Status::schema_error,
            "container: tensor offset not 64-byte aligned: " + en.name);
    require(en.offset >= prev_end, Status::schema_error,
            "container: overlapping or out-of-order tensor offsets at " + en.name);
    prev_end = en.offset + en.bytes;
    require(prev_end <= raw.size(), Status::truncated, "container: payload truncated at " + en.name);
    entries.push_back(std::move(en));
  }

  size_t next = 0;
  auto take = [&](const std::string& name) -> Matrix<T> {
    require(next < entries.size() && entries[next].name == name, Status::schema_error,
            "container: expected tensor " + name);
    const Entry& en = entries[next++];
    Matrix<T> m(en.rows, en.cols);
    std::memcpy(m.data.data(), raw.data() + en.offset, en.bytes);
    return m;
  };

  MoeModel<T> model;
  for (int l = 0; l < num_layers; ++l) {
    const json& jl = jlayers[static_cast<size_t>(l)];
    MoeLayer<T> layer;
    layer.config = config_from_json(jl.at("config"));
    layer.lineage = lineage_from_name(jl.at("lineage").get<std::string>());
    layer.replay_factor = jl.at("replay_factor").get<int>();
    layer.neuron_order = jl.at("neuron_order").get<std::vector<std::vector<int>>>();
    const std::string base = "layers/" + std::to_string(l) + "/";
    layer.gate = take(base + "gate");
    const int blocks = layer.config.num_experts * layer.replay_factor;
    for (int e = 0; e < blocks; ++e) {
      const std::string eb = base + "experts/" + std::to_string(e) + "/";
      Expert<T> ex;
      ex.w1 = take(eb + "w1");
      ex.w3 = take(eb + "w3");
      ex.w2 = take(eb + "w2");
      layer.experts.push_back(std::move(ex));
    }
    for (int s = 0; s < layer.config.num_shared_experts; ++s) {
      const std::string sb = base + "shared/" + std::to_string(s) + "/";
      Expert<T> ex;
      ex.w1 = take(sb + "w1");
      ex.w3 = take(sb + "w3");
      ex.w2 = take(sb + "w2");
      layer.shared_experts.push_back(std::move(ex));
    }
    model.layers.push_back(std::move(layer));
  }
  require(next == entries.size(), Status::schema_error, "container: unused tensors in table");
  try {
    model.validate();
  } catch (const Error& e) {
    fail(Status::schema_error, std::string("container: inconsistent model: ") + e.what());
  }
  return model;
}

}  // namespace

ModelVariant load_model(const std::string& path) {
  const std::string raw = read_file(path);
  require(raw.size() >= 16, Status::truncated, "container: file shorter than header");
  require(std::memcmp(raw.data(), kContainerMagic, 8) == 0, Status::bad_magic,
          "container: bad magic");
  const uint64_t manifest_len = read_u64(reinterpret_cast<const unsigned char*>(raw.data()) + 8);
  require(16 + manifest_len <= raw.size(), Status::truncated, "container: manifest truncated");
  json manifest;
  try {
    manifest = json::parse(raw.substr(16, static_cast<size_t>(manifest_len)));
  } catch (const json::exception& e) {
    fail(Status::schema_error, std::string("container: manifest is not valid JSON: ") + e.what());
  }
  try {
    require(manifest.at("format").get<std::string>() == "dsmoe-container", Status::schema_error,
            "container: unknown format tag");
    require(manifest.at("version").get<int>() == 1, Status::schema_error,
            "container: unsupported version");
    const int width = manifest.at("scalar_width").get<int>();
    if (width == 4) return model_from_container<float>(manifest, raw);
    if (width == 8) return model_from_container<double>(manifest, raw);
    fail(Status::schema_error, "container: scalar_width must be 4 or 8");
  } catch (const json::exception& e) {
    fail(Status::schema_error, std::string("container: manifest field error: ") + e.what());
  }
  fail(Status::internal, "load_model: unreachable");
}

template <std::floating_point T>
void save_tokens(const Matrix<T>& tokens, const std::string& path) {
  std::string out;
  append_u64(out, static_cast<uint64_t>(tokens.rows));
  append_u64(out, static_cast<uint64_t>(tokens.cols));
  out.reserve(16 + tokens.data.size() * 4);
  for (T v : tokens.data) {
    const float f = static_cast<float>(v);
    char buf[4];
    std::memcpy(buf, &f, 4);
    out.append(buf, 4);
  }
  write_file_atomic(path, out);
}

template <std::floating_point T>
Matrix<T> load_tokens(const std::string& path) {
  const std::string raw = read_file(path);
  require(raw.size() >= 16, Status::truncated, "token file: missing header");
  const uint64_t rows = read_u64(reinterpret_cast<const unsigned char*>(raw.data()));
  const uint64_t cols = read_u64(reinterpret_cast<const unsigned char*>(raw.data()) + 8);
  require(rows <= (1u << 24) && cols <= (1u << 20), Status::schema_error,
          "token file: implausible dimensions");
  require(raw.size() >= 16 + rows * cols * 4, Status::truncated, "token file: payload truncated");
  Matrix<T> m(static_cast<int>(rows), static_cast<int>(cols));
  for (size_t i = 0; i < rows * cols; ++i) {
    float f;
    std::memcpy(&f, raw.data() + 16 + i * 4, 4);
    m.data[i] = static_cast<T>(f);
  }
  return m;
}

template <std::floating_point T>
MoeLayer<T> generate_synthetic(const MoeConfig& config, uint64_t seed, double scale) {
  config.validate();
  Xoshiro256pp rng(seed);
  const double std_dev = scale / std::sqrt(static_cast<double>(config.d_model));
  auto fill = [&rng, std_dev](Matrix<T>& m) {
    for (T& v : m.data) v = static_cast<T>(rng.next_gaussian() * std_dev);
  };
  MoeLayer<T> layer;
  layer.config = config;
  layer.gate = Matrix<T>(config.d_model, config.num_experts);
  fill(layer.gate);
  auto make_expert = [&] {
    Expert<T> e;
    e.w1 = Matrix<T>(config.d_model, config.d_ffn);
    e.w3 = Matrix<T>(config.d_model, config.d_ffn);
    e.w2 = Matrix<T>(config.d_ffn, config.d_model);
    fill(e.w1);
    fill(e.w3);
    fill(e.w2);
    return e;
  };
  for (int e = 0; e < config.num_experts; ++e) layer.experts.push_back(make_expert());
  for (int s = 0; s < config.num_shared_experts; ++s) layer.shared_experts.push_back(make_expert());
  layer.validate();
  return layer;
}

template <std::floating_point T>
MoeModel<T> generate_model(const MoeConfig& config, int num_layers, uint64_t seed, double scale) {
  require(num_layers >= 1, Status::invalid_argument, "generate_model: num_layers must be >= 1");
  SplitMix64 mix(seed);
  MoeModel<T> model;
  for (int l = 0; l < num_layers; ++l)
    model.layers.push_back(generate_synthetic<T>(config, mix.next(), scale));
  return model;
}

template <std::floating_point T>
Matrix<T> generate_tokens(long rows, int cols, uint64_t seed, double scale) {
  require(rows >= 1 && cols >= 1, Status::invalid_argument, "generate_tokens: bad shape");
  Xoshiro256pp rng(seed);
  Matrix<T> m(static_cast<int>(rows), cols);
  for (T& v : m.data) v = static_cast<T>(rng.next_gaussian() * scale);
  return m;
}

template void save_model<float>(const MoeModel<float>&, const std::string&);
template void save_model<double>(const MoeModel<double>&, const std::string&);
template void save_tokens<float>(const Matrix<float>&, const std::string&);
template void save_tokens<double>(const Matrix<double>&, const std::string&);
template Matrix<float> load_tokens<float>(const std::string&);
template Matrix<double> load_tokens<double>(const std::string&);
template MoeLayer<float> generate_synthetic<float>(const MoeConfig&, uint64_t, double);
template MoeLayer<double> generate_synthetic<double>(const MoeConfig&, uint64_t, double);
template MoeModel<float> generate_model<float>(const MoeConfig&, int, uint64_t, double);
template MoeModel<double> generate_model<double>(const MoeConfig&, int, uint64_t, double);
template Matrix<float> generate_tokens<float>(long, int, uint64_t, double);
template Matrix<double> generate_tokens<double>(long, int, uint64_t, double);

}  // namespace dsmoe
