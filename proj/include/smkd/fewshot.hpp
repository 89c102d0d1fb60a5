#pragma once

// Episodic N-way K-shot evaluation on frozen backbone features.

#include <string>
#include <vector>

#include "smkd/data.hpp"
#include "smkd/random.hpp"
#include "smkd/vit.hpp"

namespace smkd {

/// Which token summaries form an image feature. Any non-empty combination of
/// the three components; each is l2-normalized before concatenation in the
/// fixed order cls, avg_pool, weighted_avg_pool.
struct FeatureMode {
  static constexpr unsigned cls = 1, avg_pool = 2, weighted_avg_pool = 4;
  unsigned bits = cls | weighted_avg_pool;

  /// Accepts '+'-joined names, e.g. "cls+weighted_avg_pool" (aliases: avg, weighted).
  static FeatureMode parse(const std::string& text);
  static std::vector<FeatureMode> all();
  std::string name() const;
  std::size_t components() const;
  bool operator==(const FeatureMode&) const = default;
};

/// Raw (unnormalized) token summaries of one image.
struct TokenSummary {
  std::vector<float> cls, avg_pool, weighted_avg_pool;
};

/// weighted_avg_pool uses cls_attention_weights of the last layer.
TokenSummary summarize_tokens(const TokenSet<float>& ts);

/// Normalizes and concatenates the components selected by mode.
std::vector<float> compose_feature(const TokenSummary& s, FeatureMode mode);

/// Feature of a single u8 image [3, S, S] under a frozen backbone.
std::vector<float> extract_feature(const VitParams<float>& backbone, const VitConfig& cfg,
                                   std::span<const std::uint8_t> image, FeatureMode mode);

/// Token summaries for every image of a dataset, computed once and shared by
/// all episodes and feature modes.
struct FeatureBank {
  std::size_t dim = 0;
  std::vector<TokenSummary> items;
  std::vector<int> labels;

  std::vector<float> feature(std::size_t i, FeatureMode mode) const { return compose_feature(items[i], mode); }
};

FeatureBank extract_bank(const VitParams<float>& backbone, const VitConfig& cfg, const LabeledDataset& ds,
                         std::size_t workers = 1, std::size_t batch = 64);

struct Episode {
  std::vector<int> classes;                // dataset class ids; episode label = position
  std::vector<std::size_t> support, query;  // dataset indices
  std::vector<int> support_labels, query_labels;
};

/// Uniform class sampling without replacement, then K + Q distinct images per
/// class. Throws ParameterError when fewer than n_way classes hold K + Q images.
Episode sample_episode(std::span<const int> labels, std::size_t n_way, std::size_t k_shot, std::size_t queries,
                       Rng& rng);

/// Row-major feature matrix helper.
struct FeatureMatrix {
  std::size_t rows = 0, dim = 0;
  std::vector<float> data;
  const float* row(std::size_t i) const { return data.data() + i * dim; }
};

/// Class prototypes are support means; queries go to the prototype of highest
/// cosine similarity, ties to the lowest class index.
std::vector<int> prototype_classify(const FeatureMatrix& support, std::span<const int> support_labels,
                                    const FeatureMatrix& query, std::size_t n_classes);

struct LinearClassifierOptions {
  std::size_t iterations = 100;
  double lr = 0.01;
  double l2 = 1e-3;
  double tolerance = 1e-4;  // gradient norm below which the fit counts as converged
};

struct LinearClassifierResult {
  std::vector<int> predictions;
  bool converged = false;
};

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights; argmax logits with ties to the lowest class index.
LinearClassifierResult linear_classifier_eval(const FeatureMatrix& support, std::span<const int> support_labels,
                                              const FeatureMatrix& query, std::size_t n_classes,
                                              const LinearClassifierOptions& options = {});

enum class EvalMethod { prototype, classifier };
EvalMethod parse_eval_method(const std::string& name);
std::string to_string(EvalMethod m);

struct EvalOptions {
  std::size_t n_way = 5, k_shot = 1, queries = 15, episodes = 600;
  std::uint64_t seed = 0;
  FeatureMode mode;
  EvalMethod method = EvalMethod::prototype;
  std::size_t workers = 1;
};

struct EvalResult {
  double mean = 0, ci95 = 0;
  std::vector<double> accuracies;  // per episode, in episode order
  std::size_t unconverged = 0;     // classifier fits that missed the tolerance
};

/// mean and 1.96 * std / sqrt(n) over per-episode accuracies (population std).
void summarize_accuracies(EvalResult& r);

/// Episode i draws from its own stream (seed, i), so results do not depend on
/// the worker count.
EvalResult evaluate(const FeatureBank& bank, const EvalOptions& options);

struct ReportRow {
  EvalMethod method;
  FeatureMode mode;
  std::size_t n_way, k_shot;
  EvalResult result;
};

/// CSV with columns method,mode,N,K,mean_acc,ci95,n_episodes.
std::string format_report(const std::vector<ReportRow>& rows);

}  // namespace smkd
