#include "cir/checkpoint.hpp"

#include "cir/io.hpp"

namespace cir {
namespace {
constexpr std::string_view kCheckpointMagic = "CKPT";
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string Checkpoint::encode() const {
  nlohmann::json header;
  header["config"] = config;
  header["optimizer_step"] = optimizer_step;
  header["dtype"] = "f64";
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors)
    list.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()},
                    {"trainable", t.trainable}});
  const std::string text = header.dump();

  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& t : tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) w.f64(t.value.data()[i]);
  return w.take();
}

Checkpoint Checkpoint::decode(std::string_view bytes) {
  io::ByteReader r(bytes);
  require(bytes.size() >= 4 && r.bytes(4) == kCheckpointMagic, ErrorCode::BadMagic,
          "expected CKPT magic");
  const auto version = r.u32();
  require(version == kFormatVersion, ErrorCode::VersionMismatch,
          "checkpoint version " + std::to_string(version));
  const auto header_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = header.at("config");
    ck.optimizer_step = header.at("optimizer_step").get<std::uint64_t>();
    require(header.at("dtype") == "f64", ErrorCode::Parse, "unsupported checkpoint dtype");
    for (const auto& t : header.at("tensors")) {
      NamedTensor nt;
      nt.name = t.at("name").get<std::string>();
      nt.trainable = t.at("trainable").get<bool>();
      nt.value.resize(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
      ck.tensors.push_back(std::move(nt));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, std::string("checkpoint header: ") + e.what());
  }
  for (auto& t : ck.tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = r.f64();
  require(r.remaining() == 0, ErrorCode::DimMismatch, "trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, ck.encode());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return Checkpoint::decode(io::read_file(path));
}

}  // namespace cir
