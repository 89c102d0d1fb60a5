#include "smkd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "smkd/config.hpp"
#include "smkd/error.hpp"

namespace smkd {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'S', 'M', 'K', 'D'};
constexpr std::size_t kPreamble = 4 + 4 + 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

struct NamedArray {
  std::string name;
  Shape shape;
  std::span<const float> values;
};

json vit_json(const VitConfig& v) {
  return {{"image_size", v.image_size}, {"patch_size", v.patch_size}, {"embed_dim", v.embed_dim},
          {"depth", v.depth},           {"num_heads", v.num_heads},   {"mlp_ratio", v.mlp_ratio},
          {"in_chans", v.in_chans}};
}

json head_json(const HeadConfig& h) {
  return {{"in_dim", h.in_dim},
          {"hidden_dim", h.hidden_dim},
          {"bottleneck_dim", h.bottleneck_dim},
          {"out_dim", h.out_dim},
          {"student_temp", h.student_temp},
          {"teacher_temp", h.teacher_temp},
          {"warmup_teacher_temp", h.warmup_teacher_temp},
          {"warmup_teacher_temp_epochs", h.warmup_teacher_temp_epochs},
          {"center_momentum", h.center_momentum}};
}

VitConfig vit_from(const json& j) {
  VitConfig v;
  v.image_size = j.at("image_size");
  v.patch_size = j.at("patch_size");
  v.embed_dim = j.at("embed_dim");
  v.depth = j.at("depth");
  v.num_heads = j.at("num_heads");
  v.mlp_ratio = j.at("mlp_ratio");
  v.in_chans = j.at("in_chans");
  return v;
}

HeadConfig head_from(const json& j) {
  HeadConfig h;
  h.in_dim = j.at("in_dim");
  h.hidden_dim = j.at("hidden_dim");
  h.bottleneck_dim = j.at("bottleneck_dim");
  h.out_dim = j.at("out_dim");
  h.student_temp = j.at("student_temp");
  h.teacher_temp = j.at("teacher_temp");
  h.warmup_teacher_temp = j.at("warmup_teacher_temp");
  h.warmup_teacher_temp_epochs = j.at("warmup_teacher_temp_epochs");
  h.center_momentum = j.at("center_momentum");
  return h;
}

// Every tensor slot of a checkpoint, in file order, bound to live storage.
std::vector<std::pair<std::string, Tensor*>> model_slots(ModelPair& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  m.student.visit([&](const std::string& n, Tensor& t) { out.emplace_back("student." + n, &t); });
  m.teacher.visit([&](const std::string& n, Tensor& t) { out.emplace_back("teacher." + n, &t); });
  out.emplace_back("center.cls", &m.center_cls.center);
  out.emplace_back("center.patch", &m.center_patch.center);
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  auto& model = const_cast<ModelPair&>(ck.model);
  std::vector<NamedArray> arrays;
  for (auto& [name, t] : model_slots(model)) arrays.push_back({name, t->shape(), t->data()});
  if (model.ce_w.defined()) {
    arrays.push_back({"ce.w", model.ce_w.shape(), model.ce_w.data()});
    arrays.push_back({"ce.b", model.ce_b.shape(), model.ce_b.data()});
  }
  for (const auto& [name, st] : ck.optimizer.state()) {
    arrays.push_back({"opt.m." + name, {st.m.size()}, st.m});
    arrays.push_back({"opt.v." + name, {st.v.size()}, st.v});
  }

  json header;
  header["format"] = "smkd-checkpoint";
  header["vit"] = vit_json(model.vit);
  header["head"] = head_json(model.head);
  header["state"] = {{"step", model.step},
                     {"epoch", model.epoch},
                     {"stage", to_string(model.stage)},
                     {"optimizer_steps", ck.optimizer.steps()}};
  header["config_hash"] = hash_hex(ck.config_hash);
  header["config_text"] = ck.config_text;
  json list = json::array();
  std::size_t offset = 0;
  for (const auto& a : arrays) {
    list.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.values.size() * 4;
  }
  header["arrays"] = list;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& a : arrays)
    for (float v : a.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  return out;
}

namespace {

struct ParsedHeader {
  json header;
  std::size_t data_start = 0;
};

ParsedHeader parse_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kPreamble)
    throw FormatError("checkpoint truncated: expected at least " + std::to_string(kPreamble) + " bytes, got " +
                      std::to_string(bytes.size()));
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t header_len = get_le(bytes.data() + 8, 8);
  if (header_len > bytes.size() - kPreamble)
    throw FormatError("checkpoint truncated: expected at least " + std::to_string(kPreamble + header_len) +
                      " bytes, got " + std::to_string(bytes.size()));
  ParsedHeader p;
  p.data_start = kPreamble + header_len;
  try {
    p.header = json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(p.data_start));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  return p;
}

}  // namespace

std::vector<ArrayExtent> checkpoint_layout(const std::vector<std::uint8_t>& bytes) {
  const auto p = parse_header(bytes);
  std::vector<ArrayExtent> out;
  for (const auto& a : p.header.at("arrays")) {
    std::size_t n = 1;
    for (std::size_t d : a.at("shape")) n *= d;
    out.push_back({a.at("name"), p.data_start + a.at("offset").get<std::size_t>(), n * 4});
  }
  return out;
}

LoadResult decode_checkpoint(const std::vector<std::uint8_t>& bytes, const LoadOptions& options) {
  const auto p = parse_header(bytes);
  const json& h = p.header;
  LoadResult result;
  Checkpoint& ck = result.checkpoint;
  try {
    const auto vit = vit_from(h.at("vit"));
    const auto head = head_from(h.at("head"));
    ck.model = init_model_pair(vit, head, 0);
    const auto& state = h.at("state");
    ck.model.step = state.at("step");
    ck.model.epoch = state.at("epoch");
    ck.model.stage = parse_stage(state.at("stage"));
    ck.optimizer.set_steps(state.at("optimizer_steps"));
    ck.config_text = h.at("config_text");
    const std::string hex = h.at("config_hash");
    ck.config_hash = std::stoull(hex, nullptr, 16);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header describes an invalid model: ") + e.what());
  }

  // Sizes first, so truncation is reported before any array is read.
  const auto& arrays = h.at("arrays");
  std::size_t expected = p.data_start;
  for (const auto& a : arrays) {
    std::size_t n = 1;
    for (std::size_t d : a.at("shape")) n *= d;
    expected = std::max(expected, p.data_start + a.at("offset").get<std::size_t>() + n * 4);
  }
  if (bytes.size() < expected)
    throw FormatError("checkpoint truncated: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  if (bytes.size() > expected)
    throw FormatError("checkpoint has " + std::to_string(bytes.size() - expected) + " trailing bytes");

  auto read = [&](const json& a) {
    std::size_t n = 1;
    for (std::size_t d : a.at("shape")) n *= d;
    const std::uint8_t* src = bytes.data() + p.data_start + a.at("offset").get<std::size_t>();
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = static_cast<std::uint32_t>(get_le(src + 4 * i, 4));
      std::memcpy(&v[i], &bits, 4);
    }
    return v;
  };

  std::map<std::string, const json*> by_name;
  for (const auto& a : arrays) by_name[a.at("name")] = &a;
  for (auto& [name, t] : model_slots(ck.model)) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks array '" + name + "'");
    const Shape shape = it->second->at("shape").get<Shape>();
    if (shape != t->shape())
      throw FormatError("array '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                        shape_string(t->shape()));
    const bool rg = t->requires_grad();
    *t = Tensor(shape, read(*it->second), rg);
    by_name.erase(it);
  }
  if (by_name.count("ce.w") && by_name.count("ce.b")) {
    ck.model.ce_w = Tensor(by_name["ce.w"]->at("shape").get<Shape>(), read(*by_name["ce.w"]), true);
    ck.model.ce_b = Tensor(by_name["ce.b"]->at("shape").get<Shape>(), read(*by_name["ce.b"]), true);
    by_name.erase("ce.w");
    by_name.erase("ce.b");
  }
  for (const auto& [name, a] : by_name) {
    if (name.rfind("opt.m.", 0) == 0) {
      ck.optimizer.state()[name.substr(6)].m = read(*a);
    } else if (name.rfind("opt.v.", 0) == 0) {
      ck.optimizer.state()[name.substr(6)].v = read(*a);
    } else {
      throw FormatError("checkpoint holds unknown array '" + name + "'");
    }
  }
  for (const auto& [name, st] : ck.optimizer.state())
    if (st.m.size() != st.v.size()) throw FormatError("optimizer moments for '" + name + "' disagree in size");

  if (options.expected_hash && *options.expected_hash != ck.config_hash) {
    const std::string msg = "architecture hash " + hash_hex(ck.config_hash) + " differs from the config's " +
                            hash_hex(*options.expected_hash);
    if (options.strict) throw ConfigError(msg);
    result.warnings.push_back(msg);
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("failed writing checkpoint " + path.string());
}

LoadResult load_checkpoint(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes, options);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace smkd
