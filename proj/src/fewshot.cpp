#include "smkd/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <thread>

#include "smkd/error.hpp"

namespace smkd {

// ---- feature modes ---------------------------------------------------------------

FeatureMode FeatureMode::parse(const std::string& text) {
  FeatureMode m{0};
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "cls") {
      m.bits |= cls;
    } else if (part == "avg_pool" || part == "avg") {
      m.bits |= avg_pool;
    } else if (part == "weighted_avg_pool" || part == "weighted") {
      m.bits |= weighted_avg_pool;
    } else {
      throw ConfigError("unknown feature mode component '" + part + "' in '" + text + "'");
    }
  }
  if (m.bits == 0) throw ConfigError("empty feature mode");
  return m;
}

std::vector<FeatureMode> FeatureMode::all() {
  std::vector<FeatureMode> out;
  for (unsigned b = 1; b < 8; ++b) out.push_back(FeatureMode{b});
  return out;
}

std::string FeatureMode::name() const {
  std::string out;
  auto add = [&](unsigned bit, const char* n) {
    if (!(bits & bit)) return;
    if (!out.empty()) out += '+';
    out += n;
  };
  add(cls, "cls");
  add(avg_pool, "avg_pool");
  add(weighted_avg_pool, "weighted_avg_pool");
  return out;
}

std::size_t FeatureMode::components() const {
  return std::size_t((bits & cls) != 0) + ((bits & avg_pool) != 0) + ((bits & weighted_avg_pool) != 0);
}

TokenSummary summarize_tokens(const TokenSet<float>& ts) {
  const std::size_t n = ts.patches.dim(0), d = ts.patches.dim(1);
  TokenSummary s;
  s.cls = ts.cls.to_vector();
  s.avg_pool.assign(d, 0.0f);
  s.weighted_avg_pool.assign(d, 0.0f);
  const auto w = cls_attention_weights(ts);
  const auto p = ts.patches.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      s.avg_pool[j] += p[i * d + j] / float(n);
      s.weighted_avg_pool[j] += w[i] * p[i * d + j];
    }
  return s;
}

std::vector<float> compose_feature(const TokenSummary& s, FeatureMode mode) {
  std::vector<float> out;
  auto append = [&](const std::vector<float>& v) {
    double ss = 0;
    for (float x : v) ss += double(x) * double(x);
    const double inv = 1.0 / std::max(std::sqrt(ss), 1e-12);
    for (float x : v) out.push_back(static_cast<float>(double(x) * inv));
  };
  if (mode.bits & FeatureMode::cls) append(s.cls);
  if (mode.bits & FeatureMode::avg_pool) append(s.avg_pool);
  if (mode.bits & FeatureMode::weighted_avg_pool) append(s.weighted_avg_pool);
  return out;
}

std::vector<float> extract_feature(const VitParams<float>& backbone, const VitConfig& cfg,
                                   std::span<const std::uint8_t> image, FeatureMode mode) {
  StopGradient sg;
  const std::size_t s = cfg.image_size;
  if (image.size() != 3 * s * s) throw DimensionError("extract_feature: image does not match image_size");
  Tensor img({3, s, s}, normalize_image(image));
  return compose_feature(summarize_tokens(forward_one(patchify(img, cfg, backbone), cfg, backbone)), mode);
}

FeatureBank extract_bank(const VitParams<float>& backbone, const VitConfig& cfg, const LabeledDataset& ds,
                         std::size_t workers, std::size_t batch) {
  const std::size_t s = cfg.image_size;
  if (ds.size() > 0 && (ds.height != s || ds.width != s))
    throw DimensionError("extract_bank: dataset images are " + std::to_string(ds.height) + "px, model expects " +
                         std::to_string(s));
  FeatureBank bank;
  bank.dim = cfg.embed_dim;
  bank.items.resize(ds.size());
  bank.labels = ds.labels;
  const std::size_t chunks = (ds.size() + batch - 1) / batch;
  auto work = [&](std::size_t w) {
    StopGradient sg;
    for (std::size_t c = w; c < chunks; c += workers) {
      const std::size_t lo = c * batch, hi = std::min(ds.size(), lo + batch);
      std::vector<float> pixels;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto v = normalize_image(ds.image(i));
        pixels.insert(pixels.end(), v.begin(), v.end());
      }
      Tensor imgs({hi - lo, 3, s, s}, std::move(pixels));
      const auto out = forward(patchify(imgs, cfg, backbone), cfg, backbone, true);
      for (std::size_t i = lo; i < hi; ++i) bank.items[i] = summarize_tokens(out.item(i - lo));
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, chunks));
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  return bank;
}

// ---- episodes --------------------------------------------------------------------

Episode sample_episode(std::span<const int> labels, std::size_t n_way, std::size_t k_shot, std::size_t queries,
                       Rng& rng) {
  if (n_way == 0 || k_shot == 0) throw ParameterError("sample_episode: n_way and k_shot must be positive");
  std::map<int, std::vector<std::size_t>> pools;
  for (std::size_t i = 0; i < labels.size(); ++i) pools[labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [c, idx] : pools)
    if (idx.size() >= k_shot + queries) eligible.push_back(c);
  if (eligible.size() < n_way)
    throw ParameterError("sample_episode: only " + std::to_string(eligible.size()) + " classes hold " +
                         std::to_string(k_shot + queries) + " images, " + std::to_string(n_way) + " needed");
  Episode ep;
  for (std::size_t i = 0; i < n_way; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, eligible.size() - 1)(rng);
    std::swap(eligible[i], eligible[j]);
    ep.classes.push_back(eligible[i]);
  }
  for (std::size_t c = 0; c < n_way; ++c) {
    auto pool = pools[ep.classes[c]];
    for (std::size_t i = 0; i < k_shot + queries; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(rng);
      std::swap(pool[i], pool[j]);
      if (i < k_shot) {
        ep.support.push_back(pool[i]);
        ep.support_labels.push_back(static_cast<int>(c));
      } else {
        ep.query.push_back(pool[i]);
        ep.query_labels.push_back(static_cast<int>(c));
      }
    }
  }
  return ep;
}

// ---- classifiers ----------------------------------------------------------------------

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t n_classes) {
  if (labels.size() != rows) throw DimensionError("one label per support row required");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= n_classes) throw DimensionError("support label out of range");
}

int argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

}  // namespace

std::vector<int> prototype_classify(const FeatureMatrix& support, std::span<const int> support_labels,
                                    const FeatureMatrix& query, std::size_t n_classes) {
  check_labels(support_labels, support.rows, n_classes);
  if (support.dim != query.dim) throw DimensionError("support and query dimensions differ");
  const std::size_t d = support.dim;
  std::vector<double> protos(n_classes * d, 0.0);
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t i = 0; i < support.rows; ++i) {
    const auto c = static_cast<std::size_t>(support_labels[i]);
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) protos[c * d + j] += support.row(i)[j];
  }
  std::vector<double> norms(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (counts[c] == 0) throw ParameterError("prototype_classify: class without support samples");
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) {
      protos[c * d + j] /= double(counts[c]);
      ss += protos[c * d + j] * protos[c * d + j];
    }
    norms[c] = std::max(std::sqrt(ss), 1e-12);
  }
  std::vector<int> out(query.rows);
  std::vector<double> sims(n_classes);
  for (std::size_t q = 0; q < query.rows; ++q) {
    double qn = 0;
    for (std::size_t j = 0; j < d; ++j) qn += double(query.row(q)[j]) * query.row(q)[j];
    qn = std::max(std::sqrt(qn), 1e-12);
    for (std::size_t c = 0; c < n_classes; ++c) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += protos[c * d + j] * query.row(q)[j];
      sims[c] = dot / (norms[c] * qn);
    }
    out[q] = argmax_lowest(sims);
  }
  return out;
}

LinearClassifierResult linear_classifier_eval(const FeatureMatrix& support, std::span<const int> support_labels,
                                              const FeatureMatrix& query, std::size_t n_classes,
                                              const LinearClassifierOptions& o) {
  check_labels(support_labels, support.rows, n_classes);
  if (support.dim != query.dim) throw DimensionError("support and query dimensions differ");
  const std::size_t d = support.dim, n = support.rows, C = n_classes;
  std::vector<double> w(d * C, 0.0), b(C, 0.0), gw(d * C), gb(C), logits(C);
  auto scores = [&](const float* x) {
    for (std::size_t c = 0; c < C; ++c) {
      double z = b[c];
      for (std::size_t j = 0; j < d; ++j) z += w[j * C + c] * x[j];
      logits[c] = z;
    }
  };
  double grad_norm = 0;
  for (std::size_t it = 0; it <= o.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const float* x = support.row(i);
      scores(x);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < C; ++c) {
        const double err = (logits[c] / z - (support_labels[i] == int(c) ? 1.0 : 0.0)) / double(n);
        gb[c] += err;
        for (std::size_t j = 0; j < d; ++j) gw[j * C + c] += err * x[j];
      }
    }
    grad_norm = 0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      gw[k] += o.l2 * w[k];
      grad_norm += gw[k] * gw[k];
    }
    for (double g : gb) grad_norm += g * g;
    grad_norm = std::sqrt(grad_norm);
    if (it == o.iterations) break;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= o.lr * gw[k];
    for (std::size_t c = 0; c < C; ++c) b[c] -= o.lr * gb[c];
  }
  LinearClassifierResult r;
  r.converged = grad_norm < o.tolerance;
  r.predictions.resize(query.rows);
  for (std::size_t q = 0; q < query.rows; ++q) {
    scores(query.row(q));
    r.predictions[q] = argmax_lowest(logits);
  }
  return r;
}

EvalMethod parse_eval_method(const std::string& name) {
  if (name == "prototype") return EvalMethod::prototype;
  if (name == "classifier" || name == "linear") return EvalMethod::classifier;
  throw ConfigError("unknown evaluation method '" + name + "' (expected prototype or classifier)");
}

std::string to_string(EvalMethod m) { return m == EvalMethod::prototype ? "prototype" : "classifier"; }

// ---- evaluation -------------------------------------------------------------------------

void summarize_accuracies(EvalResult& r) {
  const std::size_t n = r.accuracies.size();
  if (n < 2) throw ParameterError("at least two episodes are required for a confidence interval");
  // Moments are taken about the first accuracy so a constant run gives exactly zero spread.
  const double ref = r.accuracies[0];
  double sum = 0, sq = 0;
  for (double a : r.accuracies) {
    sum += a - ref;
    sq += (a - ref) * (a - ref);
  }
  const double shift = sum / double(n);
  r.mean = ref + shift;
  const double var = std::max(0.0, sq / double(n) - shift * shift);
  r.ci95 = 1.96 * std::sqrt(var) / std::sqrt(double(n));
}

EvalResult evaluate(const FeatureBank& bank, const EvalOptions& o) {
  if (o.episodes < 2) throw ParameterError("at least two episodes are required");
  EvalResult r;
  r.accuracies.assign(o.episodes, 0.0);
  std::vector<char> unconverged(o.episodes, 0);
  auto gather = [&](const std::vector<std::size_t>& idx) {
    FeatureMatrix m;
    m.rows = idx.size();
    for (std::size_t i : idx) {
      const auto f = bank.feature(i, o.mode);
      m.dim = f.size();
      m.data.insert(m.data.end(), f.begin(), f.end());
    }
    return m;
  };
  // Validate sampling preconditions once on the calling thread.
  {
    Rng probe(derive_seed(o.seed, 0, 0xe915));
    sample_episode(bank.labels, o.n_way, o.k_shot, o.queries, probe);
  }
  auto work = [&](std::size_t w, std::size_t workers) {
    for (std::size_t e = w; e < o.episodes; e += workers) {
      Rng rng(derive_seed(o.seed, e, 0xe915));
      const Episode ep = sample_episode(bank.labels, o.n_way, o.k_shot, o.queries, rng);
      const auto support = gather(ep.support), query = gather(ep.query);
      std::vector<int> pred;
      if (o.method == EvalMethod::prototype) {
        pred = prototype_classify(support, ep.support_labels, query, o.n_way);
      } else {
        auto res = linear_classifier_eval(support, ep.support_labels, query, o.n_way);
        pred = std::move(res.predictions);
        unconverged[e] = !res.converged;
      }
      std::size_t correct = 0;
      for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == ep.query_labels[q];
      r.accuracies[e] = double(correct) / double(pred.size());
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(o.workers, o.episodes));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w, workers);
    for (auto& t : threads) t.join();
  }
  r.unconverged = static_cast<std::size_t>(std::count(unconverged.begin(), unconverged.end(), 1));
  summarize_accuracies(r);
  return r;
}

std::string format_report(const std::vector<ReportRow>& rows) {
  std::string out = "method,mode,N,K,mean_acc,ci95,n_episodes\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%zu,%.6f,%.6f,%zu\n", to_string(r.method).c_str(),
                  r.mode.name().c_str(), r.n_way, r.k_shot, r.result.mean, r.result.ci95,
                  r.result.accuracies.size());
    out += buf;
  }
  return out;
}

}  // namespace smkd
