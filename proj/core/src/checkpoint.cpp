#include "csdiff/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <map>

namespace csdiff {
namespace {

constexpr std::array<char, 8> kMagic{'C', 'S', 'D', 'F', 'C', 'K', 'P', 'T'};

std::string dtype_name(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32:
      return "float32";
    case torch::kFloat64:
      return "float64";
    case torch::kInt64:
      return "int64";
    default:
      throw InvalidArgument(std::string("unsupported tensor dtype ") + c10::toString(type));
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  throw IoError("checkpoint: unknown dtype '" + name + "'");
}

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

struct Entry {
  std::string name;
  torch::Tensor tensor;
};

std::map<std::string, torch::Tensor> sorted_parameters(const Model& model) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : model->named_parameters()) out.emplace(item.key(), item.value());
  for (const auto& item : model->named_buffers()) out.emplace(item.key(), item.value());
  return out;
}

struct RawArchive {
  nlohmann::json header;
  std::string payload;
};

RawArchive read_archive(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || magic != kMagic) throw IoError(path.string() + " is not a csdiff checkpoint");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  }
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  RawArchive archive;
  try {
    archive.header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header: " + std::string(e.what()));
  }
  if (with_payload) {
    archive.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    const auto expected = archive.header.at("payload_bytes").get<std::uint64_t>();
    if (archive.payload.size() != expected) throw IoError("truncated checkpoint payload in " + path.string());
  }
  return archive;
}

torch::Tensor tensor_from(const nlohmann::json& info, const std::string& payload) {
  const auto dtype = dtype_from_name(info.at("dtype").get<std::string>());
  const auto shape = info.at("shape").get<std::vector<std::int64_t>>();
  const auto offset = info.at("offset").get<std::uint64_t>();
  const auto nbytes = info.at("nbytes").get<std::uint64_t>();
  auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  if (static_cast<std::uint64_t>(tensor.nbytes()) != nbytes || offset + nbytes > payload.size()) {
    throw IoError("checkpoint entry '" + info.at("name").get<std::string>() + "' has an inconsistent size");
  }
  std::memcpy(tensor.data_ptr(), payload.data() + offset, nbytes);
  return tensor;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointMeta& meta,
                     const torch::optim::AdamW* optimizer) {
  const auto params = sorted_parameters(model);
  std::vector<Entry> entries;
  for (const auto& [name, tensor] : params) entries.push_back({name, tensor});

  nlohmann::json optim_meta = nullptr;
  if (optimizer != nullptr) {
    const auto& options = static_cast<const torch::optim::AdamWOptions&>(optimizer->defaults());
    optim_meta = {{"type", "adamw"},
                  {"lr", options.lr()},
                  {"beta1", std::get<0>(options.betas())},
                  {"beta2", std::get<1>(options.betas())},
                  {"eps", options.eps()},
                  {"weight_decay", options.weight_decay()}};
    nlohmann::json steps = nlohmann::json::object();
    const auto& state = optimizer->state();
    for (const auto& [name, tensor] : params) {
      auto it = state.find(tensor.unsafeGetTensorImpl());
      if (it == state.end()) continue;
      const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
      steps[name] = s.step();
      entries.push_back({"optim." + name + ".exp_avg", s.exp_avg()});
      entries.push_back({"optim." + name + ".exp_avg_sq", s.exp_avg_sq()});
    }
    optim_meta["steps"] = std::move(steps);
  }

  nlohmann::json table = nlohmann::json::array();
  std::string payload;
  for (const auto& entry : entries) {
    auto t = entry.tensor.detach().contiguous().cpu();
    const auto nbytes = static_cast<std::uint64_t>(t.nbytes());
    table.push_back({{"name", entry.name},
                     {"dtype", dtype_name(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", payload.size()},
                     {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }

  nlohmann::json header = {{"format", "csdiff-checkpoint"},
                           {"step", meta.step},
                           {"stage", meta.stage},
                           {"config", meta.config.is_null() ? nlohmann::json::object() : meta.config},
                           {"tensors", std::move(table)},
                           {"optimizer", std::move(optim_meta)},
                           {"payload_bytes", payload.size()}};
  if (!header["config"].contains("model")) header["config"]["model"] = model->config().to_json();
  const auto header_text = header.dump();

  std::string out(kMagic.begin(), kMagic.end());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += payload;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot write checkpoint " + tmp.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model& model, torch::optim::AdamW* optimizer) {
  const auto archive = read_archive(path, true);
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& info : archive.header.at("tensors")) by_name[info.at("name").get<std::string>()] = &info;

  const auto params = sorted_parameters(model);
  torch::NoGradGuard guard;
  for (const auto& [name, tensor] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing parameter '" + name + "'");
    auto stored = tensor_from(*it->second, archive.payload);
    if (stored.sizes() != tensor.sizes()) {
      throw IoError("shape mismatch for '" + name + "': checkpoint has " + c10::str(stored.sizes()) + ", model has " +
                    c10::str(tensor.sizes()));
    }
    tensor.copy_(stored);
  }

  const auto& optim_meta = archive.header.at("optimizer");
  if (optimizer != nullptr && !optim_meta.is_null()) {
    auto& state = optimizer->state();
    for (const auto& [name, step] : optim_meta.at("steps").items()) {
      auto param = params.find(name);
      if (param == params.end()) throw IoError("optimizer state refers to unknown parameter '" + name + "'");
      auto owned = std::any_of(optimizer->param_groups().begin(), optimizer->param_groups().end(), [&](const auto& g) {
        return std::any_of(g.params().begin(), g.params().end(),
                           [&](const torch::Tensor& p) { return p.is_same(param->second); });
      });
      if (!owned) continue;
      auto s = std::make_unique<torch::optim::AdamWParamState>();
      s->step(step.get<std::int64_t>());
      s->exp_avg(tensor_from(*by_name.at("optim." + name + ".exp_avg"), archive.payload)
                     .to(param->second.scalar_type()));
      s->exp_avg_sq(tensor_from(*by_name.at("optim." + name + ".exp_avg_sq"), archive.payload)
                        .to(param->second.scalar_type()));
      state[param->second.unsafeGetTensorImpl()] = std::move(s);
    }
  }

  CheckpointMeta meta;
  meta.step = archive.header.at("step").get<std::int64_t>();
  meta.stage = archive.header.at("stage").get<std::string>();
  meta.config = archive.header.at("config");
  return meta;
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return read_archive(path, false).header; }

ModelConfig checkpoint_model_config(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  return ModelConfig::from_json(header.at("config").at("model"));
}

Model load_model(const std::filesystem::path& path, CheckpointMeta* meta) {
  Model model(checkpoint_model_config(path));
  auto loaded = load_checkpoint(path, model);
  if (meta != nullptr) *meta = std::move(loaded);
  return model;
}

std::vector<std::uint8_t> parameter_payload(const Model& model, const std::vector<std::string>& groups) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, tensor] : sorted_parameters(model)) {
    const bool wanted = groups.empty() || std::any_of(groups.begin(), groups.end(), [&](const std::string& g) {
                          return name.starts_with(g + ".");
                        });
    if (!wanted) continue;
    auto t = tensor.detach().contiguous().cpu();
    const auto* bytes = static_cast<const std::uint8_t*>(t.data_ptr());
    out.insert(out.end(), bytes, bytes + t.nbytes());
  }
  return out;
}

nlohmann::json describe_checkpoint(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  nlohmann::json groups = nlohmann::json::object();
  std::int64_t optimizer_tensors = 0;
  for (const auto& info : header.at("tensors")) {
    const auto name = info.at("name").get<std::string>();
    if (name.starts_with("optim.")) {
      ++optimizer_tensors;
      continue;
    }
    const auto group = name.substr(0, name.find('.'));
    std::int64_t elements = 1;
    for (auto d : info.at("shape")) elements *= d.get<std::int64_t>();
    auto& g = groups[group];
    if (g.is_null()) g = {{"tensors", 0}, {"elements", std::int64_t{0}}};
    g["tensors"] = g.value("tensors", 0) + 1;
    g["elements"] = g.value("elements", std::int64_t{0}) + elements;
  }
  return {{"path", path.string()},
          {"format_version", kCheckpointVersion},
          {"step", header.at("step")},
          {"stage", header.at("stage")},
          {"groups", groups},
          {"optimizer_tensors", optimizer_tensors},
          {"payload_bytes", header.at("payload_bytes")},
          {"config", header.at("config")}};
}

}  // namespace csdiff
