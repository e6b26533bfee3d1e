#pragma once

#include <optional>
#include <string>
#include <vector>

#include "repmech/direction_set.hpp"
#include "repmech/engine.hpp"
#include "repmech/io.hpp"
#include "repmech/model.hpp"
#include "repmech/tokenizer.hpp"

namespace repmech {

struct SampleRef {
  std::string record_id;
  std::size_t k = 0;  // response truncation length in tokens
};

// Last-token ResidPost activations for every layer under the positive and
// negative template. Row i of every layer's matrices belongs to samples[i].
struct ActivationSets {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::vector<std::vector<float>> positive;  // per layer, n x d row-major
  std::vector<std::vector<float>> negative;
  std::vector<SampleRef> samples;
  std::vector<std::string> warnings;

  std::size_t n_samples() const noexcept { return samples.size(); }
  // Difference rows positive - negative for one layer, [n x d].
  Tensor differences(std::size_t layer) const;
  Tensor positive_rows(std::size_t layer) const;
  Tensor negative_rows(std::size_t layer) const;
};

// For every record and every token-level truncation 0 < k <= |response|,
// renders both templates and records the last-token residual at each layer.
// Records with an empty response are skipped with a warning.
ActivationSets collect_activation_sets(const ModelBundle& model, const Tokenizer& tokenizer,
                                       const std::vector<StimulusRecord>& stimuli, const TemplatePair& templates,
                                       std::size_t workers = 1);

// Per layer: first principal component of the paired differences, oriented
// so that the negative template's activations project higher.
DirectionSet extract_directions_pca(const ActivationSets& sets, const std::string& behavior = "dishonesty",
                                    const std::string& model_hash = "");

// Unit vector mean(positive rows) - mean(negative rows).
std::vector<float> extract_direction_massmean(const Tensor& rows, const std::vector<bool>& positive);

// Mass-mean per layer, flipped to the DirectionSet sign convention (the
// negative template's side is positive).
DirectionSet extract_directions_massmean(const ActivationSets& sets, const std::string& behavior = "dishonesty",
                                         const std::string& model_hash = "");

struct LabeledRows {
  Tensor rows;  // [n x d]
  std::vector<Label> labels;
  std::vector<std::string> ids;
  std::vector<std::size_t> k;

  std::size_t size() const noexcept { return labels.size(); }
};

// Deterministic 80/20 split on FNV-1a(record id).
bool is_train_id(const std::string& id);

struct ThresholdRule {
  std::optional<double> fixed;  // empty: midpoint of the class projection means
};

struct ProbeProjection {
  std::string id;
  std::size_t k = 0;
  Label label = Label::kNone;
  double value = 0.0;
  bool train = false;
};

struct ProbeEvalReport {
  std::size_t layer = 0;
  double threshold = 0.0;
  double accuracy = 0.0;  // held-out
  double train_accuracy = 0.0;
  std::size_t held_out_correct = 0;
  std::size_t held_out_total = 0;
  bool positive_above = true;  // positive class predicted above threshold
  std::vector<ProbeProjection> projections;
};

// Projects rows onto `direction`, fits the threshold on the training split,
// and scores both splits.
ProbeEvalReport probe_split_eval(const std::vector<float>& direction, const LabeledRows& data,
                                 const ThresholdRule& rule = {}, std::size_t layer = 0);

// Last-token residuals of "instruction response" for every labeled record, one
// LabeledRows per layer.
std::vector<LabeledRows> collect_labeled_activations(const ModelBundle& model, const Tokenizer& tokenizer,
                                                     const std::vector<StimulusRecord>& stimuli,
                                                     std::size_t workers = 1);

// M[i][j] = cosine(dirs[i], dirs[j]).
Tensor cosine_map(const DirectionSet& ds);

}  // namespace repmech
