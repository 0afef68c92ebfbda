#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rise/autodiff.hpp"

namespace rise {

/// Named trainable tensors, iterated in lexicographic name order.
class ParameterStore {
 public:
  /// Registers a new trainable entry. Throws if the name is taken.
  ad::Var add(const std::string& name, Tensor init);
  /// Registers a non-trainable entry (statistics, permutations).
  ad::Var add_buffer(const std::string& name, Tensor init);

  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  bool trainable(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;

  /// Freezes or unfreezes every entry whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);
  /// Allocates zero gradients for all trainable entries.
  void zero_grad();
  /// Drops gradients so a later optimizer step without backward() fails.
  void clear_grad();

  /// Copies values (not graph identity) from `other` for matching names.
  void assign(const ParameterStore& other);
  /// Inserts all entries of `other`, prefixing their names.
  void merge(const ParameterStore& other, const std::string& prefix = "");

  bool values_equal(const ParameterStore& other) const;

 private:
  struct Entry {
    ad::Var var;
    bool trainable;
    bool buffer;
  };
  std::map<std::string, Entry> entries_;
};

/// Reset-first backward that also zero-fills gradients of trainable store
/// entries not reached from `loss`.
void backward(const ad::Var& loss, ParameterStore& store);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update of every trainable entry; clears gradients.
void adam_step(ParameterStore& store, AdamState& state);

/// Parameter checkpoint: `<stem>.json` manifest plus `<stem>.bin` raw
/// little-endian f64 blob. `extra` is stored verbatim under "meta".
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& stem,
                     const nlohmann::json& extra = nlohmann::json::object());
/// Loads into a fresh store; entries keep their trainable flag from the manifest.
ParameterStore load_checkpoint(const std::filesystem::path& stem, nlohmann::json* extra = nullptr);

/// Writes tensors as a manifest + blob pair (shared by checkpoints and batches).
void write_blob(const std::filesystem::path& stem, const std::vector<std::pair<std::string, Tensor>>& tensors,
                nlohmann::json header, const std::vector<bool>& trainable = {});
std::vector<std::pair<std::string, Tensor>> read_blob(const std::filesystem::path& stem, nlohmann::json* header,
                                                      std::vector<bool>* trainable = nullptr);

}  // namespace rise
