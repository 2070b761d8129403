#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cir/optim.hpp"
#include "cir/tensor.hpp"

namespace cir {

struct NamedTensor {
  std::string name;
  MatrixXd value;
  bool trainable = false;
};

/// `CKPT` file: magic, u32 version, u32 header length, JSON header (tensor
/// names, shapes, trainable flags, config echo), then little-endian f64
/// payloads in header order.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
  std::uint64_t optimizer_step = 0;

  const NamedTensor* find(std::string_view name) const;

  std::string encode() const;
  static Checkpoint decode(std::string_view bytes);

  bool operator==(const Checkpoint& other) const { return encode() == other.encode(); }
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Bundle>
void append_bundle(Checkpoint& ck, const Bundle& b) {
  Bundle::visit(b, [&](const std::string& name, const MatrixXd& m) {
    ck.tensors.push_back({name, m, b.trainable.at(name)});
  });
}

/// Overwrites every tensor of `b` (and its trainable flags) from `ck`. The
/// bundle must already have the checkpoint's structure.
template <typename Bundle>
void restore_bundle(const Checkpoint& ck, Bundle& b) {
  Bundle::visit(b, [&](const std::string& name, MatrixXd& m) {
    const auto* t = ck.find(name);
    require(t != nullptr, ErrorCode::NotFound, "checkpoint has no tensor " + name);
    require(t->value.rows() == m.rows() && t->value.cols() == m.cols(), ErrorCode::ShapeMismatch,
            "checkpoint tensor " + name + " has the wrong shape");
    m = t->value;
    b.trainable[name] = t->trainable;
  });
}

inline void append_optimizer(Checkpoint& ck, const AdamWState<double>& st) {
  ck.optimizer_step = st.step;
  for (const auto& [name, mom] : st.moments) {
    ck.tensors.push_back({"adam.m." + name, mom.m, false});
    ck.tensors.push_back({"adam.v." + name, mom.v, false});
  }
}

inline AdamWState<double> restore_optimizer(const Checkpoint& ck) {
  AdamWState<double> st;
  st.step = ck.optimizer_step;
  for (const auto& t : ck.tensors) {
    if (t.name.starts_with("adam.m.")) st.moments[t.name.substr(7)].m = t.value;
    if (t.name.starts_with("adam.v.")) st.moments[t.name.substr(7)].v = t.value;
  }
  return st;
}

}  // namespace cir
