#include "repmech/directions.hpp"

#include <cmath>

#include "repmech/errors.hpp"
#include "repmech/kernels.hpp"
#include "repmech/parallel.hpp"
#include "repmech/util.hpp"

namespace repmech {

namespace {

Tensor rows_tensor(const std::vector<float>& flat, std::size_t n, std::size_t d, std::size_t layer) {
  if (n == 0) throw DataError("no activation rows at layer " + std::to_string(layer));
  return Tensor::matrix(n, d, flat);
}

std::vector<double> column_mean(const Tensor& rows, const std::vector<bool>* mask, bool want) {
  const std::size_t d = rows.cols();
  std::vector<double> mean(d, 0.0);
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    if (mask && (*mask)[r] != want) continue;
    auto x = rows.row(r);
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
    ++count;
  }
  for (auto& m : mean) m /= static_cast<double>(count);
  return mean;
}

}  // namespace

Tensor ActivationSets::differences(std::size_t layer) const {
  const std::size_t n = n_samples();
  std::vector<float> diff(n * d_model);
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = positive[layer][i] - negative[layer][i];
  return rows_tensor(diff, n, d_model, layer);
}

Tensor ActivationSets::positive_rows(std::size_t layer) const {
  return rows_tensor(positive[layer], n_samples(), d_model, layer);
}

Tensor ActivationSets::negative_rows(std::size_t layer) const {
  return rows_tensor(negative[layer], n_samples(), d_model, layer);
}

ActivationSets collect_activation_sets(const ModelBundle& model, const Tokenizer& tokenizer,
                                       const std::vector<StimulusRecord>& stimuli, const TemplatePair& templates,
                                       std::size_t workers) {
  templates.validate();
  const auto& cfg = model.config();
  ActivationSets sets;
  sets.n_layers = cfg.n_layers;
  sets.d_model = cfg.d_model;
  sets.positive.resize(cfg.n_layers);
  sets.negative.resize(cfg.n_layers);

  std::set<ComponentId> wanted;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) wanted.insert(ComponentId::resid_post(static_cast<int>(l)));
  const RecordSet record = RecordSet::only(wanted);

  struct PerRecord {
    std::vector<std::size_t> ks;
    // [k][layer] -> vector
    std::vector<std::vector<std::vector<float>>> pos, neg;
    std::string warning;
  };
  std::vector<PerRecord> results(stimuli.size());

  parallel_for(stimuli.size(), workers, [&](std::size_t r) {
    const auto& rec = stimuli[r];
    PerRecord& out = results[r];
    const auto answer = tokenizer.encode(rec.response);
    if (answer.empty()) {
      out.warning = "record '" + rec.id + "' has an empty response; skipped";
      return;
    }
    auto last_resid = [&](const std::string& text) {
      const auto ids = tokenizer.encode(text);
      const auto run = forward(model, ids, {}, record);
      std::vector<std::vector<float>> per_layer;
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto row = run.cache.at(ComponentId::resid_post(static_cast<int>(l))).row(ids.size() - 1);
        per_layer.emplace_back(row.begin(), row.end());
      }
      return per_layer;
    };
    for (std::size_t k = 1; k <= answer.size(); ++k) {
      const std::string prefix = tokenizer.decode(std::span<const TokenId>(answer).first(k));
      out.ks.push_back(k);
      out.pos.push_back(last_resid(templates.render_positive(rec.instruction, prefix)));
      out.neg.push_back(last_resid(templates.render_negative(rec.instruction, prefix)));
    }
  });

  for (std::size_t r = 0; r < stimuli.size(); ++r) {
    auto& res = results[r];
    if (!res.warning.empty()) sets.warnings.push_back(res.warning);
    for (std::size_t i = 0; i < res.ks.size(); ++i) {
      sets.samples.push_back({stimuli[r].id, res.ks[i]});
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        sets.positive[l].insert(sets.positive[l].end(), res.pos[i][l].begin(), res.pos[i][l].end());
        sets.negative[l].insert(sets.negative[l].end(), res.neg[i][l].begin(), res.neg[i][l].end());
      }
    }
  }
  return sets;
}

DirectionSet extract_directions_pca(const ActivationSets& sets, const std::string& behavior,
                                    const std::string& model_hash) {
  DirectionSet ds;
  ds.behavior = behavior;
  ds.method = DirectionMethod::kPcaDiff;
  ds.model_hash = model_hash;
  for (std::size_t l = 0; l < sets.n_layers; ++l) {
    if (sets.n_samples() < 2) {
      throw DataError("layer " + std::to_string(l) + " has " + std::to_string(sets.n_samples()) +
                      " paired rows; at least 2 are needed");
    }
    const Tensor diffs = sets.differences(l);
    bool any = false;
    for (float v : diffs.data()) any = any || v != 0.0f;
    if (!any) throw DataError("layer " + std::to_string(l) + ": positive and negative activations are identical");

    std::vector<float> v;
    try {
      v = first_principal_component(diffs);
    } catch (const DegenerateError& e) {
      throw DataError("layer " + std::to_string(l) + ": " + e.what());
    }
    // Orient toward the negative template: dot(v, mean(neg - pos)) >= 0.
    double toward_neg = 0.0, scale = 0.0;
    for (std::size_t r = 0; r < diffs.rows(); ++r) {
      auto x = diffs.row(r);
      toward_neg -= dot(v, x);
      scale += dot(x, x);
    }
    const double tol = 1e-9 * std::sqrt(scale);
    if (toward_neg < -tol) {
      for (auto& x : v) x = -x;
    }
    ds.dirs.push_back(std::move(v));
  }
  return ds;
}

std::vector<float> extract_direction_massmean(const Tensor& rows, const std::vector<bool>& positive) {
  if (rows.rank() != 2 || rows.rows() != positive.size()) {
    throw DimensionError("mass-mean needs one label per row, got " + std::to_string(positive.size()) + " labels for " +
                         shape_to_string(rows.shape()));
  }
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p;
  if (n_pos == 0 || n_pos == positive.size()) throw DataError("mass-mean needs rows from both classes");
  const auto mp = column_mean(rows, &positive, true);
  const auto mn = column_mean(rows, &positive, false);
  std::vector<double> diff(mp.size());
  double norm = 0.0;
  for (std::size_t j = 0; j < mp.size(); ++j) {
    diff[j] = mp[j] - mn[j];
    norm += diff[j] * diff[j];
  }
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw DegenerateError("class means coincide; mass-mean direction is undefined");
  std::vector<float> out(diff.size());
  for (std::size_t j = 0; j < diff.size(); ++j) out[j] = static_cast<float>(diff[j] / norm);
  return out;
}

DirectionSet extract_directions_massmean(const ActivationSets& sets, const std::string& behavior,
                                         const std::string& model_hash) {
  DirectionSet ds;
  ds.behavior = behavior;
  ds.method = DirectionMethod::kMassMean;
  ds.model_hash = model_hash;
  const std::size_t n = sets.n_samples();
  for (std::size_t l = 0; l < sets.n_layers; ++l) {
    if (n == 0) throw DataError("layer " + std::to_string(l) + " has no activation rows");
    std::vector<float> flat = sets.negative[l];
    flat.insert(flat.end(), sets.positive[l].begin(), sets.positive[l].end());
    std::vector<bool> is_neg(2 * n, false);
    for (std::size_t i = 0; i < n; ++i) is_neg[i] = true;
    try {
      ds.dirs.push_back(extract_direction_massmean(Tensor::matrix(2 * n, sets.d_model, std::move(flat)), is_neg));
    } catch (const DegenerateError& e) {
      throw DataError("layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return ds;
}

bool is_train_id(const std::string& id) { return fnv1a64(id) % 100 < 80; }

ProbeEvalReport probe_split_eval(const std::vector<float>& direction, const LabeledRows& data,
                                 const ThresholdRule& rule, std::size_t layer) {
  const std::size_t n = data.size();
  if (data.rows.rank() != 2 || data.rows.rows() != n || data.ids.size() != n) {
    throw DimensionError("labeled rows, labels and ids disagree in count");
  }
  if (data.rows.cols() != direction.size()) {
    throw DimensionError("probe direction has length " + std::to_string(direction.size()) + ", rows have " +
                         std::to_string(data.rows.cols()));
  }
  ProbeEvalReport rep;
  rep.layer = layer;
  double sum_pos = 0.0, sum_neg = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (data.labels[i] == Label::kNone) throw DataError("row '" + data.ids[i] + "' has no label");
    ProbeProjection p;
    p.id = data.ids[i];
    p.k = data.k.empty() ? 0 : data.k[i];
    p.label = data.labels[i];
    p.value = dot(direction, data.rows.row(i));
    p.train = is_train_id(p.id);
    if (p.train) {
      if (is_positive(p.label)) {
        sum_pos += p.value;
        ++n_pos;
      } else {
        sum_neg += p.value;
        ++n_neg;
      }
    }
    rep.projections.push_back(std::move(p));
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("probe training split needs rows from both classes");
  const double mean_pos = sum_pos / static_cast<double>(n_pos);
  const double mean_neg = sum_neg / static_cast<double>(n_neg);
  rep.positive_above = mean_pos >= mean_neg;
  rep.threshold = rule.fixed ? *rule.fixed : 0.5 * (mean_pos + mean_neg);

  std::size_t train_correct = 0, train_total = 0;
  for (const auto& p : rep.projections) {
    const bool predicted_positive = (p.value > rep.threshold) == rep.positive_above;
    const bool correct = predicted_positive == is_positive(p.label);
    if (p.train) {
      ++train_total;
      train_correct += correct;
    } else {
      ++rep.held_out_total;
      rep.held_out_correct += correct;
    }
  }
  if (rep.held_out_total == 0) throw DataError("probe evaluation has no held-out rows");
  rep.accuracy = static_cast<double>(rep.held_out_correct) / static_cast<double>(rep.held_out_total);
  rep.train_accuracy = static_cast<double>(train_correct) / static_cast<double>(train_total);
  return rep;
}

std::vector<LabeledRows> collect_labeled_activations(const ModelBundle& model, const Tokenizer& tokenizer,
                                                     const std::vector<StimulusRecord>& stimuli,
                                                     std::size_t workers) {
  const auto& cfg = model.config();
  std::vector<const StimulusRecord*> labeled;
  for (const auto& r : stimuli) {
    if (r.label != Label::kNone) labeled.push_back(&r);
  }
  std::set<ComponentId> wanted;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) wanted.insert(ComponentId::resid_post(static_cast<int>(l)));
  const RecordSet record = RecordSet::only(wanted);

  std::vector<std::vector<std::vector<float>>> acts(labeled.size());
  parallel_for(labeled.size(), workers, [&](std::size_t i) {
    const auto& rec = *labeled[i];
    const std::string text = rec.response.empty() ? rec.instruction : rec.instruction + " " + rec.response;
    const auto ids = tokenizer.encode(text);
    const auto run = forward(model, ids, {}, record);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      auto row = run.cache.at(ComponentId::resid_post(static_cast<int>(l))).row(ids.size() - 1);
      acts[i].emplace_back(row.begin(), row.end());
    }
  });

  std::vector<LabeledRows> out(cfg.n_layers);
  if (labeled.empty()) throw DataError("no labeled records");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::vector<float> flat;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      flat.insert(flat.end(), acts[i][l].begin(), acts[i][l].end());
      out[l].labels.push_back(labeled[i]->label);
      out[l].ids.push_back(labeled[i]->id);
      out[l].k.push_back(0);
    }
    out[l].rows = Tensor::matrix(labeled.size(), cfg.d_model, std::move(flat));
  }
  return out;
}

Tensor cosine_map(const DirectionSet& ds) {
  ds.validate();
  const std::size_t L = ds.n_layers();
  Tensor m({L, L});
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      m.at(i, j) = static_cast<float>(cosine_similarity(ds.dirs[i], ds.dirs[j]));
    }
  }
  return m;
}

}  // namespace repmech
