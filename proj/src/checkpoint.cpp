#include "boss/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace boss {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

std::string full_id(const std::string& prefix, const std::string& id, bool buffer) {
  return prefix + "/" + (buffer ? "#" : "") + id;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const std::vector<StoreRef>& stores,
                     const nlohmann::json& meta) {
  auto manifest_path = stem;
  manifest_path += ".json";
  auto blob_path = stem;
  blob_path += ".bin";

  nlohmann::json entries = nlohmann::json::array();
  nlohmann::json steps = nlohmann::json::object();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot open " + blob_path.string() + " for writing");
  std::uint64_t offset = 0;
  auto emit = [&](const std::string& id, const Tensor& t) {
    entries.push_back({{"id", id}, {"shape", t.shape}, {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    offset += t.size() * sizeof(double);
  };
  for (const auto& ref : stores) {
    for (const auto& [id, t] : ref.store->params()) emit(full_id(ref.prefix, id, false), t);
    for (const auto& [id, t] : ref.store->buffers()) emit(full_id(ref.prefix, id, true), t);
    steps[ref.prefix] = ref.store->step();
  }
  blob.close();
  if (!blob) throw std::runtime_error("write failed: " + blob_path.string());

  nlohmann::json manifest = {{"format", "boss-checkpoint"},
                             {"version", "v1"},
                             {"blob", blob_path.filename().string()},
                             {"bytes", offset},
                             {"entries", entries},
                             {"steps", steps},
                             {"meta", meta}};
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + manifest_path.string() + " for writing");
  out << manifest.dump(1) << '\n';
  if (!out) throw std::runtime_error("write failed: " + manifest_path.string());
}

CheckpointData load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.value("version", "") != "v1") {
    throw std::runtime_error("unsupported checkpoint version in " + manifest_path.string());
  }
  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open checkpoint blob " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  if (bytes.size() != manifest.at("bytes").get<std::uint64_t>()) {
    throw std::runtime_error("checkpoint blob " + blob_path.string() + " has " + std::to_string(bytes.size()) +
                             " bytes, manifest declares " + manifest.at("bytes").dump());
  }
  CheckpointData data;
  data.meta = manifest.value("meta", nlohmann::json::object());
  data.meta["steps"] = manifest.value("steps", nlohmann::json::object());
  for (const auto& e : manifest.at("entries")) {
    Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (offset + n * sizeof(double) > bytes.size()) {
      throw std::runtime_error("checkpoint entry " + e.at("id").get<std::string>() + " runs past the blob end");
    }
    std::vector<double> values(n);
    std::memcpy(values.data(), bytes.data() + offset, n * sizeof(double));
    data.tensors.emplace(e.at("id").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  return data;
}

void restore_checkpoint(const CheckpointData& data, const std::vector<StoreRef>& stores) {
  auto fetch = [&](const std::string& id, Tensor& dst) {
    auto it = data.tensors.find(id);
    if (it == data.tensors.end()) throw std::runtime_error("checkpoint is missing " + id);
    if (it->second.shape != dst.shape) {
      throw std::runtime_error("checkpoint shape mismatch for " + id + ": " + shape_str(it->second.shape) +
                               " vs " + shape_str(dst.shape));
    }
    dst.data = it->second.data;
  };
  const auto& steps = data.meta.contains("steps") ? data.meta.at("steps") : nlohmann::json::object();
  for (const auto& ref : stores) {
    for (auto& [id, t] : ref.store->params()) fetch(full_id(ref.prefix, id, false), t);
    for (auto& [id, t] : ref.store->buffers()) fetch(full_id(ref.prefix, id, true), t);
    if (steps.contains(ref.prefix)) ref.store->set_step(steps.at(ref.prefix).get<std::uint64_t>());
  }
}

}  // namespace boss
