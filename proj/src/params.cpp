#include "rise/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "rise/error.hpp"

namespace rise {

using nlohmann::json;

ad::Var ParameterStore::add(const std::string& name, Tensor init) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto var = ad::parameter(std::move(init));
  entries_.emplace(name, Entry{var, true, false});
  return var;
}

ad::Var ParameterStore::add_buffer(const std::string& name, Tensor init) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto var = ad::constant(std::move(init));
  entries_.emplace(name, Entry{var, false, true});
  return var;
}

const ad::Var& ParameterStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.var;
}

bool ParameterStore::trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.trainable;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::numel() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.var.value().numel();
  return n;
}

void ParameterStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& [name, e] : entries_) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (e.buffer) continue;
    e.trainable = trainable;
    e.var.get()->requires_grad = trainable;
  }
}

void ParameterStore::zero_grad() {
  for (auto& [_, e] : entries_) {
    if (e.trainable) e.var.get()->grad = Tensor(e.var.value().shape(), 0.0);
  }
}

void ParameterStore::clear_grad() {
  for (auto& [_, e] : entries_) e.var.get()->grad = Tensor();
}

void ParameterStore::assign(const ParameterStore& other) {
  for (auto& [name, e] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end()) continue;
    if (it->second.var.shape() != e.var.shape()) {
      throw ShapeError("assign " + name + ": " + shape_str(it->second.var.shape()) + " vs " +
                       shape_str(e.var.shape()));
    }
    e.var.mutable_value() = it->second.var.value();
  }
}

void ParameterStore::merge(const ParameterStore& other, const std::string& prefix) {
  for (const auto& [name, e] : other.entries_) {
    if (entries_.count(prefix + name)) throw ConfigError("duplicate parameter name: " + prefix + name);
    entries_.emplace(prefix + name, e);
  }
}

bool ParameterStore::values_equal(const ParameterStore& other) const {
  if (names() != other.names()) return false;
  for (const auto& [name, e] : entries_) {
    if (!(e.var.value() == other.get(name).value())) return false;
  }
  return true;
}

void backward(const ad::Var& loss, ParameterStore& store) {
  ad::backward(loss);
  for (const auto& name : store.names()) {
    if (!store.trainable(name)) continue;
    auto* node = store.get(name).get();
    node->ensure_grad();
  }
}

void adam_step(ParameterStore& store, AdamState& state) {
  const auto& cfg = state.config;
  std::vector<std::string> trainable_names;
  for (const auto& name : store.names()) {
    if (!store.trainable(name)) continue;
    if (!store.get(name).get()->has_grad()) throw ConfigError("adam_step: missing gradient for parameter " + name);
    trainable_names.push_back(name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& name : trainable_names) {
    auto* node = store.get(name).get();
    Tensor& value = node->value;
    const Tensor& g = node->grad;
    auto [mit, m_new] = state.m.try_emplace(name, value.shape(), 0.0);
    auto [vit, v_new] = state.v.try_emplace(name, value.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (m.shape() != value.shape()) throw ShapeError("adam_step: moment shape mismatch for " + name);
    for (std::size_t i = 0; i < value.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  store.clear_grad();
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

void put_le(std::ostream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

double get_le(const unsigned char* buf) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_blob(const std::filesystem::path& stem, const std::vector<std::pair<std::string, Tensor>>& tensors,
                json header, const std::vector<bool>& trainable) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  json entries = json::array();
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw ConfigError("cannot write " + with_suffix(stem, ".bin").string());
  std::size_t offset = 0;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& [name, t] = tensors[k];
    const std::size_t len = t.numel() * sizeof(double);
    json e = {{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"byte_offset", offset}, {"byte_len", len}};
    if (!trainable.empty()) e["trainable"] = static_cast<bool>(trainable[k]);
    entries.push_back(std::move(e));
    for (double v : t.vec()) put_le(bin, v);
    offset += len;
  }
  header["tensors"] = std::move(entries);
  header["blob"] = with_suffix(stem, ".bin").filename().string();
  std::ofstream js(with_suffix(stem, ".json"), std::ios::trunc);
  if (!js) throw ConfigError("cannot write " + with_suffix(stem, ".json").string());
  js << header.dump(2) << '\n';
}

std::vector<std::pair<std::string, Tensor>> read_blob(const std::filesystem::path& stem, json* header,
                                                      std::vector<bool>* trainable) {
  std::ifstream js(with_suffix(stem, ".json"));
  if (!js) throw ConfigError("cannot read " + with_suffix(stem, ".json").string());
  json manifest = json::parse(js);
  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!bin) throw ConfigError("cannot read " + with_suffix(stem, ".bin").string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& e : manifest.at("tensors")) {
    if (e.at("dtype") != "f64") throw ConfigError("unsupported dtype " + e.at("dtype").dump());
    Shape shape = e.at("shape").get<Shape>();
    const auto off = e.at("byte_offset").get<std::size_t>();
    const auto len = e.at("byte_len").get<std::size_t>();
    if (len != shape_numel(shape) * sizeof(double) || off + len > blob.size()) {
      throw ConfigError("corrupt manifest entry " + e.at("name").get<std::string>());
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = get_le(blob.data() + off + 8 * i);
    if (trainable) trainable->push_back(e.value("trainable", true));
    out.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  if (header) {
    manifest.erase("tensors");
    *header = std::move(manifest);
  }
  return out;
}

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& stem, const json& extra) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<bool> flags;
  for (const auto& name : store.names()) {
    tensors.emplace_back(name, store.get(name).value());
    flags.push_back(store.trainable(name));
  }
  write_blob(stem, tensors, json{{"format", "rise-checkpoint-v1"}, {"meta", extra}}, flags);
}

ParameterStore load_checkpoint(const std::filesystem::path& stem, json* extra) {
  json header;
  std::vector<bool> flags;
  auto tensors = read_blob(stem, &header, &flags);
  ParameterStore store;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    if (flags[k]) store.add(tensors[k].first, std::move(tensors[k].second));
    else store.add_buffer(tensors[k].first, std::move(tensors[k].second));
  }
  if (extra) *extra = header.value("meta", json::object());
  return store;
}

}  // namespace rise
