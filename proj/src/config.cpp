#include "smkd/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "smkd/error.hpp"

namespace smkd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& source) {
  ConfigFile cf;
  cf.source_ = source;
  cf.text_ = text;
  std::stringstream ss(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(ss, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string content = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (content.empty()) continue;
    const auto eq = content.find('=');
    const std::string at = source + ":" + std::to_string(line) + ": ";
    if (eq == std::string::npos) throw ConfigError(at + "expected 'key = value', got '" + content + "'");
    const std::string key = trim(content.substr(0, eq)), value = trim(content.substr(eq + 1));
    if (key.empty()) throw ConfigError(at + "missing key before '='");
    if (value.empty()) throw ConfigError(at + "key '" + key + "' has no value");
    if (cf.entries_.count(key))
      throw ConfigError(at + "key '" + key + "' repeats line " + std::to_string(cf.entries_[key].line));
    cf.entries_[key] = {value, line};
  }
  return cf;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

void ConfigFile::set(const std::string& key, const std::string& value) {
  auto it = entries_.find(key);
  entries_[key] = {value, it == entries_.end() ? 0 : it->second.line};
}

std::string ConfigFile::where(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return source_ + ": key '" + key + "'";
  return source_ + ":" + std::to_string(it->second.line) + ": key '" + key + "'";
}

void ConfigFile::require(const std::string& key) const {
  if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
}

std::string ConfigFile::get_string(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second.value;
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const auto& v = it->second.value;
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(where(key) + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t ConfigFile::get_uint(const std::string& key, std::uint64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const auto& v = it->second.value;
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(where(key) + ": expected a nonnegative integer, got '" + v + "'");
  return out;
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const auto& v = it->second.value;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where(key) + ": expected true or false, got '" + v + "'");
}

const std::vector<std::string>& required_config_keys() {
  static const std::vector<std::string> keys{"dataset", "epochs"};
  return keys;
}

ExperimentConfig build_experiment(const ConfigFile& f) {
  for (const auto& k : required_config_keys()) f.require(k);
  ExperimentConfig x;
  x.text = f.text();
  auto& v = x.vit;
  auto& h = x.head;
  auto& t = x.train;
  auto& d = x.data;
  auto& e = x.eval;

  using Setter = std::function<void(const std::string&)>;
  auto size = [&](std::size_t& dst) -> Setter {
    return [&f, &dst](const std::string& k) { dst = f.get_uint(k, dst); };
  };
  auto real = [&](double& dst) -> Setter { return [&f, &dst](const std::string& k) { dst = f.get_double(k, dst); }; };
  auto flag = [&](bool& dst) -> Setter { return [&f, &dst](const std::string& k) { dst = f.get_bool(k, dst); }; };
  auto u64 = [&](std::uint64_t& dst) -> Setter {
    return [&f, &dst](const std::string& k) { dst = f.get_uint(k, dst); };
  };
  // Wraps parsers that throw their own ConfigError so the message names the key and line.
  auto named = [&](std::function<void(const std::string&)> fn) -> Setter {
    return [&f, fn](const std::string& k) {
      try {
        fn(f.get_string(k, ""));
      } catch (const ConfigError& err) {
        throw ConfigError(f.where(k) + ": " + err.what());
      } catch (const FormatError& err) {
        throw ConfigError(f.where(k) + ": " + err.what());
      }
    };
  };

  const std::map<std::string, Setter> keys{
      // data
      {"dataset", named([&](const std::string& s) {
         if (s == "synthetic") d.kind = DatasetKind::synthetic;
         else if (s == "cifar10") d.kind = DatasetKind::cifar10;
         else if (s == "cifar100") d.kind = DatasetKind::cifar100;
         else throw ConfigError("unknown dataset '" + s + "' (expected synthetic, cifar10 or cifar100)");
       })},
      {"data_path", named([&](const std::string& s) { d.path = s; })},
      {"split_file", named([&](const std::string& s) { d.split_file = s; })},
      {"synthetic_classes", size(d.synthetic.n_classes)},
      {"synthetic_per_class", size(d.synthetic.per_class)},
      {"synthetic_seed", u64(d.synthetic.seed)},
      {"split_base", size(d.split_base)},
      {"split_val", size(d.split_val)},
      // backbone
      {"image_size", size(v.image_size)},
      {"patch_size", size(v.patch_size)},
      {"embed_dim", size(v.embed_dim)},
      {"depth", size(v.depth)},
      {"num_heads", size(v.num_heads)},
      {"mlp_ratio", real(v.mlp_ratio)},
      // head
      {"head_hidden_dim", size(h.hidden_dim)},
      {"head_bottleneck_dim", size(h.bottleneck_dim)},
      {"head_out_dim", size(h.out_dim)},
      {"student_temp", real(h.student_temp)},
      {"teacher_temp", real(h.teacher_temp)},
      {"warmup_teacher_temp", real(h.warmup_teacher_temp)},
      {"warmup_teacher_temp_epochs", size(h.warmup_teacher_temp_epochs)},
      {"center_momentum", real(h.center_momentum)},
      // optimization
      {"loss", named([&](const std::string& s) { t.loss = parse_loss_mode(s); })},
      {"epochs", size(t.epochs)},
      {"batch_size", size(t.batch_size)},
      {"base_lr", real(t.base_lr)},
      {"final_lr", real(t.final_lr)},
      {"warmup_epochs", size(t.warmup_epochs)},
      {"wd_start", real(t.wd_start)},
      {"wd_end", real(t.wd_end)},
      {"ema_momentum_start", real(t.ema_momentum_start)},
      {"ema_momentum_end", real(t.ema_momentum_end)},
      {"lambda", real(t.lambda)},
      {"seed", u64(t.seed)},
      {"clip_grad", real(t.clip_grad)},
      {"normalize_mim", flag(t.normalize_mim)},
      {"patch_weighting", named([&](const std::string& s) {
         if (s == "uniform") t.patch_weighting = PatchWeighting::uniform;
         else if (s == "attention") t.patch_weighting = PatchWeighting::attention;
         else throw ConfigError("unknown patch weighting '" + s + "' (expected uniform or attention)");
       })},
      {"reset_optimizer", flag(t.reset_optimizer)},
      // masking
      {"mask_kind", named([&](const std::string& s) { t.mask_kind = parse_mask_kind(s); })},
      {"mask_zero_prob", real(t.mask_ratio.zero_prob)},
      {"mask_ratio_low", real(t.mask_ratio.low)},
      {"mask_ratio_high", real(t.mask_ratio.high)},
      {"mask_min_block_area", size(t.block_mask.min_block_area)},
      {"mask_min_aspect", real(t.block_mask.min_aspect)},
      // augmentation
      {"crop_scale_lo", real(t.global_aug.scale_lo)},
      {"crop_scale_hi", real(t.global_aug.scale_hi)},
      {"flip_prob", real(t.global_aug.flip_prob)},
      {"jitter_prob", real(t.global_aug.jitter_prob)},
      {"brightness", real(t.global_aug.brightness)},
      {"contrast", real(t.global_aug.contrast)},
      {"saturation", real(t.global_aug.saturation)},
      {"blur_prob", real(t.global_aug.blur_prob)},
      {"local_crops", size(t.local_crops)},
      {"local_crop_size", size(t.local_aug.out_size)},
      {"local_scale_lo", real(t.local_aug.scale_lo)},
      {"local_scale_hi", real(t.local_aug.scale_hi)},
      // evaluation
      {"n_way", size(e.n_way)},
      {"k_shot", size(e.k_shot)},
      {"queries", size(e.queries)},
      {"episodes", size(e.episodes)},
      {"eval_seed", u64(e.seed)},
      {"eval_modes", named([&](const std::string& s) {
         x.eval_modes.clear();
         for (const auto& m : split_list(s)) x.eval_modes.push_back(FeatureMode::parse(m));
       })},
      {"eval_methods", named([&](const std::string& s) {
         x.eval_methods.clear();
         for (const auto& m : split_list(s)) x.eval_methods.push_back(parse_eval_method(m));
       })},
      {"workers", size(x.workers)},
      {"out_dir", named([&](const std::string& s) { x.out_dir = s; })},
  };

  for (const auto& [key, entry] : f.entries()) {
    auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError(f.where(key) + ": unknown key");
    it->second(key);
  }

  // Local crops and the eval defaults follow the global settings unless set.
  const std::size_t local_size = t.local_aug.out_size;
  const double local_lo = t.local_aug.scale_lo, local_hi = t.local_aug.scale_hi;
  t.local_aug = t.global_aug;
  t.local_aug.out_size = f.has("local_crop_size") ? local_size : std::max<std::size_t>(v.patch_size, v.image_size / 2);
  t.local_aug.scale_lo = local_lo;
  t.local_aug.scale_hi = local_hi;
  t.global_aug.out_size = v.image_size;
  h.in_dim = v.embed_dim;
  d.synthetic.image_size = v.image_size;
  if (!f.has("eval_seed")) e.seed = t.seed;
  if (x.eval_modes.empty()) x.eval_modes.push_back(e.mode);
  if (x.eval_methods.empty()) x.eval_methods.push_back(e.method);
  e.mode = x.eval_modes.front();
  e.method = x.eval_methods.front();
  e.workers = x.workers;

  auto check = [&](const std::string& key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& err) {
      throw ConfigError(f.where(key) + ": " + err.what());
    } catch (const ParameterError& err) {
      throw ConfigError(f.where(key) + ": " + err.what());
    }
  };
  check("image_size", [&] { v.validate(); });
  check("head_out_dim", [&] { h.validate(); });
  check("epochs", [&] { t.validate(v); });
  if ((d.kind != DatasetKind::synthetic) && d.path.empty())
    throw ConfigError(f.where("dataset") + ": CIFAR datasets need data_path");
  if (x.workers == 0) throw ConfigError(f.where("workers") + ": must be positive");
  return x;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return build_experiment(ConfigFile::load(path));
}

std::uint64_t architecture_hash(const VitConfig& v, const HeadConfig& h) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "image_size=%zu;patch_size=%zu;embed_dim=%zu;depth=%zu;num_heads=%zu;mlp_hidden=%zu;in_chans=%zu;"
                "head_in=%zu;head_hidden=%zu;head_bottleneck=%zu;head_out=%zu",
                v.image_size, v.patch_size, v.embed_dim, v.depth, v.num_heads, v.mlp_hidden(), v.in_chans, h.in_dim,
                h.hidden_dim, h.bottleneck_dim, h.out_dim);
  // FNV-1a, stable across platforms and standard libraries.
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (const char* p = buf; *p; ++p) {
    hash ^= static_cast<unsigned char>(*p);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

LoadedData load_data(const DataConfig& cfg) {
  LoadedData out;
  switch (cfg.kind) {
    case DatasetKind::synthetic: out.all = generate_synthetic(cfg.synthetic); break;
    case DatasetKind::cifar10: out.all = load_cifar_binary(cfg.path, CifarVariant::cifar10); break;
    case DatasetKind::cifar100: out.all = load_cifar_binary(cfg.path, CifarVariant::cifar100); break;
  }
  out.split = cfg.split_file.empty() ? contiguous_split(out.all.num_classes(), cfg.split_base, cfg.split_val)
                                     : load_split_file(cfg.split_file);
  out.split.validate();
  for (std::size_t i = 0; i < out.all.size(); ++i)
    if (std::find(out.split.base.begin(), out.split.base.end(), out.all.labels[i]) != out.split.base.end())
      out.base_indices.push_back(i);
  out.novel = select_classes(out.all, out.split.novel);
  if (out.base_indices.empty()) throw FormatError("no training images belong to the base classes");
  return out;
}

}  // namespace smkd
