#include "dgsan/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dgsan {

namespace fs = std::filesystem;
using nlohmann::json;

ag::Var ParamStore::create(const std::string& name, Shape shape, Init init) {
  if (params_.count(name)) throw std::logic_error("ParamStore: duplicate parameter " + name);
  Tensor t(shape);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      for (auto& v : t.data) v = 1.0;
      break;
    case Init::Identity: {
      if (shape.size() != 2 || shape[0] != shape[1])
        throw std::logic_error("ParamStore: identity init needs a square matrix: " + name);
      for (int i = 0; i < shape[0]; ++i) t[static_cast<int64_t>(i) * shape[0] + i] = 1.0;
      break;
    }
    case Init::XavierUniform: {
      // 2-d [in,out]; conv [Co,Ci,kd,kh,kw] uses the receptive-field fans.
      double fan_in, fan_out;
      if (shape.size() == 2) {
        fan_in = shape[0];
        fan_out = shape[1];
      } else if (shape.size() == 5) {
        const double k = static_cast<double>(shape[2]) * shape[3] * shape[4];
        fan_in = shape[1] * k;
        fan_out = shape[0] * k;
      } else if (shape.size() == 4) {  // depthwise [C,3,3,3]
        fan_in = fan_out = static_cast<double>(shape[1]) * shape[2] * shape[3];
      } else {
        fan_in = fan_out = static_cast<double>(t.numel());
      }
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-a, a);
      for (auto& v : t.data) v = dist(rng_);
      break;
    }
  }
  auto var = ag::leaf(std::move(t), true, name);
  params_.emplace(name, var);
  return var;
}

ag::Var ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::logic_error("ParamStore: unknown parameter " + name);
  return it->second;
}

int64_t ParamStore::total_count() const {
  int64_t n = 0;
  for (const auto& [_, v] : params_) n += v->value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : params_) v->zero_grad();
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_f32_file(const fs::path& path, const DataVec& values) {
  std::string buf(values.size() * sizeof(float), '\0');
  auto* p = reinterpret_cast<float*>(buf.data());
  for (size_t i = 0; i < values.size(); ++i) p[i] = static_cast<float>(values[i]);
  write_file_atomic(path, buf);
}

DataVec read_f32_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  const auto bytes = static_cast<size_t>(in.tellg());
  if (bytes % sizeof(float)) throw std::runtime_error("truncated float32 file: " + path.string());
  in.seekg(0);
  std::vector<float> raw(bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("read failed: " + path.string());
  return DataVec(raw.begin(), raw.end());
}

void ParamStore::save(const fs::path& dir, const json& config) const {
  fs::create_directories(dir);
  write_file_atomic(dir / "config.json", config.dump(2) + "\n");
  json index = json::object();
  for (const auto& [name, v] : params_) {
    const std::string file = name + ".f32";
    index[name] = {{"file", file}, {"shape", v->value.shape}, {"dtype", "f32"}};
    write_f32_file(dir / file, v->value.data);
  }
  write_file_atomic(dir / "index.json", index.dump(2) + "\n");
}

void ParamStore::load_values(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("checkpoint index not found in " + dir.string());
  json index = json::parse(in);
  for (const auto& [name, v] : params_) {
    if (!index.contains(name)) throw std::runtime_error("checkpoint missing tensor " + name);
    const auto shape = index[name]["shape"].get<Shape>();
    if (shape != v->value.shape)
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                               ", expected " + shape_str(v->value.shape));
    auto vals = read_f32_file(dir / index[name]["file"].get<std::string>());
    if (static_cast<int64_t>(vals.size()) != v->value.numel())
      throw std::runtime_error("checkpoint tensor " + name + " has wrong element count");
    v->value.data = std::move(vals);
  }
}

int ParamStore::load_matching(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("checkpoint index not found in " + dir.string());
  json index = json::parse(in);
  int loaded = 0;
  for (const auto& [name, v] : params_) {
    if (!index.contains(name)) continue;
    const auto shape = index[name]["shape"].get<Shape>();
    if (shape != v->value.shape)
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                               ", expected " + shape_str(v->value.shape));
    v->value.data = read_f32_file(dir / index[name]["file"].get<std::string>());
    ++loaded;
  }
  return loaded;
}

}  // namespace dgsan
