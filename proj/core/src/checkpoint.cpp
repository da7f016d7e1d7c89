#include "csmri/checkpoint.hpp"

#include <algorithm>

#include "csmri/io.hpp"

namespace csmri {
namespace {

using Json = nlohmann::ordered_json;

std::string sanitize(const std::string& name) {
  std::string out = name;
  std::replace(out.begin(), out.end(), '/', '_');
  return out;
}

Json shape_json(const Shape& shape) {
  Json j = Json::array();
  for (auto e : shape) j.push_back(e);
  return j;
}

Shape shape_from_json(const Json& j) {
  Shape s;
  for (const auto& e : j) s.push_back(e.get<int64_t>());
  return s;
}

template <typename T>
std::vector<std::remove_const_t<T>> span_copy(std::span<T> s) {
  return std::vector<std::remove_const_t<T>>(s.begin(), s.end());
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, CheckpointManifest manifest,
                     const ParamRefs<T>& params, const NamedBuffers<T>& buffers) {
  std::filesystem::create_directories(dir / "params");
  if (!buffers.empty()) std::filesystem::create_directories(dir / "buffers");

  Json index = Json::array();
  for (const auto* p : params) {
    const std::string file = sanitize(p->name);
    write_raw(dir / "params" / (file + ".bin"), span_copy(p->tensor.data()));
    write_raw(dir / "params" / (file + ".m.bin"), p->adam_m);
    write_raw(dir / "params" / (file + ".v.bin"), p->adam_v);
    Json e;
    e["name"] = p->name;
    e["shape"] = shape_json(p->tensor.shape());
    e["file"] = "params/" + file + ".bin";
    e["step_count"] = p->step_count;
    index.push_back(std::move(e));
  }
  Json buf_index = Json::array();
  for (const auto& [name, tensor] : buffers) {
    const std::string file = sanitize(name);
    write_raw(dir / "buffers" / (file + ".bin"), span_copy(tensor->data()));
    Json e;
    e["name"] = name;
    e["shape"] = shape_json(tensor->shape());
    e["file"] = "buffers/" + file + ".bin";
    buf_index.push_back(std::move(e));
  }

  manifest.params_hash = hex64(params_hash(params));
  Json root;
  root["format_version"] = 1;
  root["kind"] = manifest.kind;
  root["element_type"] = manifest.element_type;
  root["architecture"] = manifest.architecture;
  root["params"] = std::move(index);
  root["buffers"] = std::move(buf_index);
  root["rng_states"] = manifest.rng_states;
  root["extra"] = manifest.extra;
  root["params_hash"] = manifest.params_hash;
  write_text(dir / "manifest.json", root.dump(2) + "\n");
}

CheckpointManifest load_manifest(const std::filesystem::path& dir) {
  Json root;
  try {
    root = Json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  if (root.value("format_version", 0) != 1) {
    throw IoError("checkpoint " + dir.string() + ": unsupported format version");
  }
  CheckpointManifest m;
  m.kind = root.at("kind").get<std::string>();
  m.element_type = root.at("element_type").get<std::string>();
  m.architecture = root.at("architecture");
  if (root.contains("rng_states")) {
    for (auto& [k, v] : root.at("rng_states").items()) m.rng_states[k] = v.get<std::string>();
  }
  m.extra = root.at("extra");
  m.params_hash = root.value("params_hash", "");
  return m;
}

template <typename T>
void load_checkpoint_values(const std::filesystem::path& dir, const ParamRefs<T>& params,
                            const NamedBuffers<T>& buffers) {
  Json root;
  try {
    root = Json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  const auto element_type = root.at("element_type").get<std::string>();
  if (element_type != element_type_name<T>()) {
    throw IoError("checkpoint " + dir.string() + " holds " + element_type + ", expected " +
                  element_type_name<T>());
  }

  std::map<std::string, Json> by_name;
  for (const auto& e : root.at("params")) by_name[e.at("name").get<std::string>()] = e;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      throw IoError("checkpoint " + dir.string() + " is missing tensor '" + p->name + "'");
    }
    const Shape stored = shape_from_json(it->second.at("shape"));
    if (!same_shape(stored, p->tensor.shape())) {
      throw IoError("tensor '" + p->name + "': stored shape " + shape_str(stored) +
                    " does not match model shape " + shape_str(p->tensor.shape()));
    }
    const std::string file = sanitize(p->name);
    std::vector<T> values;
    try {
      values = read_raw<T>(dir / "params" / (file + ".bin"), p->tensor.numel());
      p->adam_m = read_raw<T>(dir / "params" / (file + ".m.bin"), p->tensor.numel());
      p->adam_v = read_raw<T>(dir / "params" / (file + ".v.bin"), p->tensor.numel());
    } catch (const IoError& e) {
      throw IoError("tensor '" + p->name + "': " + e.what());
    }
    std::copy(values.begin(), values.end(), p->tensor.data().begin());
    p->step_count = it->second.at("step_count").template get<int64_t>();
    p->tensor.zero_grad();
  }

  std::map<std::string, Json> buf_by_name;
  for (const auto& e : root.at("buffers")) buf_by_name[e.at("name").get<std::string>()] = e;
  for (const auto& [name, tensor] : buffers) {
    auto it = buf_by_name.find(name);
    if (it == buf_by_name.end()) {
      throw IoError("checkpoint " + dir.string() + " is missing buffer '" + name + "'");
    }
    const Shape stored = shape_from_json(it->second.at("shape"));
    if (!same_shape(stored, tensor->shape())) {
      throw IoError("buffer '" + name + "': stored shape " + shape_str(stored) +
                    " does not match model shape " + shape_str(tensor->shape()));
    }
    std::vector<T> values;
    try {
      values = read_raw<T>(dir / "buffers" / (sanitize(name) + ".bin"), tensor->numel());
    } catch (const IoError& e) {
      throw IoError("buffer '" + name + "': " + e.what());
    }
    std::copy(values.begin(), values.end(), tensor->data().begin());
  }
}

template void save_checkpoint<float>(const std::filesystem::path&, CheckpointManifest,
                                     const ParamRefs<float>&, const NamedBuffers<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, CheckpointManifest,
                                      const ParamRefs<double>&, const NamedBuffers<double>&);
template void load_checkpoint_values<float>(const std::filesystem::path&, const ParamRefs<float>&,
                                            const NamedBuffers<float>&);
template void load_checkpoint_values<double>(const std::filesystem::path&,
                                             const ParamRefs<double>&,
                                             const NamedBuffers<double>&);

}  // namespace csmri
