#include "repmech/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <set>

#include "repmech/analysis.hpp"
#include "repmech/directions.hpp"
#include "repmech/errors.hpp"
#include "repmech/io.hpp"
#include "repmech/kernels.hpp"
#include "repmech/parallel.hpp"
#include "repmech/report.hpp"
#include "repmech/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace repmech {

namespace {

const char* const kAveraging = "per-record arithmetic mean of the metric";

fs::path bundled(const char* name) { return fs::path(REPMECH_DATA_DIR) / name; }

// Everything a subcommand may read. Unused fields stay at their defaults.
struct Options {
  std::string out;
  std::string model, model_config, vocab, merges;
  std::string stimuli = bundled("stimuli.jsonl").string();
  std::string templates = bundled("templates.json").string();
  std::string directions;
  std::string method = "pca-diff";
  unsigned long long seed = 0;
  std::size_t workers = 0;

  std::optional<std::size_t> layer;
  float alpha = 4.0f;
  std::string positions = "all";
  std::vector<std::string> prompts;
  std::string reference;
  std::size_t max_new = 24;
  std::size_t k = 10;
  bool final_norm = false;
  std::vector<float> alphas;
  std::optional<int> target_token;
  std::optional<std::size_t> target_layer;
  std::vector<std::string> sites;
  std::string mode = "denoise";
  std::string scope = "all";
  std::optional<double> threshold;
  std::size_t n_layers = 4;
  std::size_t num_merges = 255;
};

// Inputs resolved once per run.
struct Context {
  Options opt;
  std::string command;
  fs::path out;
  std::size_t workers = 1;
  json manifest;
  std::vector<std::string> outputs;

  std::optional<ModelBundle> model;
  std::optional<Tokenizer> tokenizer;
  std::optional<DirectionSet> directions;

  fs::path model_dir() const { return fs::path(opt.model).parent_path(); }

  const ModelBundle& need_model() {
    if (!model) {
      if (opt.model.empty()) throw UsageError(command + " needs --model");
      const fs::path cfg = opt.model_config.empty() ? model_dir() / "config.json" : fs::path(opt.model_config);
      model.emplace(load_model(opt.model, cfg));
      manifest["inputs"]["model"] = {{"path", opt.model}, {"hash", model->hash()}};
      manifest["inputs"]["model_config"] = {{"path", cfg.string()}, {"hash", file_hash(cfg)}};
      manifest["model_hash"] = model->hash();
    }
    return *model;
  }

  const Tokenizer& need_tokenizer() {
    if (!tokenizer) {
      const fs::path v = opt.vocab.empty() ? model_dir() / "vocab.json" : fs::path(opt.vocab);
      const fs::path m = opt.merges.empty() ? model_dir() / "merges.txt" : fs::path(opt.merges);
      tokenizer.emplace(Tokenizer::load(v, m));
      manifest["inputs"]["vocab"] = {{"path", v.string()}, {"hash", file_hash(v)}};
      manifest["inputs"]["merges"] = {{"path", m.string()}, {"hash", file_hash(m)}};
    }
    return *tokenizer;
  }

  const DirectionSet& need_directions() {
    if (!directions) {
      if (opt.directions.empty()) throw UsageError(command + " needs --directions");
      directions.emplace(load_directions(opt.directions));
      const std::string h = file_hash(opt.directions);
      manifest["inputs"]["directions"] = {{"path", opt.directions}, {"hash", h}};
      manifest["directions_hash"] = h;
    }
    return *directions;
  }

  std::vector<StimulusRecord> stimuli() {
    manifest["inputs"]["stimuli"] = {{"path", opt.stimuli}, {"hash", file_hash(opt.stimuli)}};
    return load_stimuli(opt.stimuli);
  }

  // Explicit --prompt values, else the distinct instructions of the stimuli.
  std::vector<std::string> prompts() {
    if (!opt.prompts.empty()) return opt.prompts;
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : stimuli()) {
      if (seen.insert(r.instruction).second) out.push_back(r.instruction);
    }
    if (out.empty()) throw DataError("no prompts: pass --prompt or a nonempty --stimuli file");
    return out;
  }

  std::vector<std::vector<TokenId>> prompt_ids() {
    std::vector<std::vector<TokenId>> out;
    for (const auto& p : prompts()) {
      out.push_back(need_tokenizer().encode(p));
      if (out.back().empty()) throw LengthError("prompt encodes to no tokens");
    }
    return out;
  }

  std::size_t layer() {
    const auto& cfg = need_model().config();
    const std::size_t l = opt.layer.value_or(cfg.n_layers / 2);
    if (l >= cfg.n_layers) {
      throw UsageError("--layer " + std::to_string(l) + " outside model with " + std::to_string(cfg.n_layers) +
                       " layers");
    }
    return l;
  }

  InjectionSpec injection(std::optional<float> alpha = std::nullopt) {
    const auto& ds = need_directions();
    const std::size_t l = layer();
    if (ds.n_layers() != need_model().config().n_layers || ds.dim() != need_model().config().d_model) {
      throw DimensionError("direction set shape does not match the model");
    }
    auto spec = InjectionSpec::from_directions(ds, l, alpha.value_or(opt.alpha), PositionMask::parse(opt.positions));
    manifest["injection"] = {{"layer", l}, {"alpha", spec.alpha}, {"positions", spec.mask.to_string()}};
    return spec;
  }

  fs::path file(const std::string& name) {
    outputs.push_back(name);
    return out / name;
  }

  void write_manifest() {
    json files = json::object();
    for (const auto& name : outputs) files[name] = file_hash(out / name);
    manifest["outputs"] = files;
    write_json(manifest, out / "manifest.json");
  }
};

std::string cell(double v) { return format_number(v); }

std::vector<std::string> labels_of(const std::vector<ComponentId>& ids) {
  std::vector<std::string> out;
  for (const auto& c : ids) out.push_back(c.to_string());
  return out;
}

void cmd_init_toy(Context& ctx) {
  std::string corpus;
  for (const auto& r : ctx.stimuli()) corpus += r.instruction + "\n" + r.response + "\n";
  const Tokenizer tok = train_bpe(corpus, ctx.opt.num_merges);
  ModelConfig cfg = toy_config(tok.vocab_size());
  cfg.n_layers = ctx.opt.n_layers;
  cfg.validate();
  const ModelBundle model = make_toy_model(cfg, ctx.opt.seed);
  save_model(model, ctx.file("model.rta"), ctx.file("config.json"));
  tok.save(ctx.file("vocab.json"), ctx.file("merges.txt"));
  ctx.manifest["model_hash"] = model.hash();
}

void cmd_extract(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto& tok = ctx.need_tokenizer();
  const auto stimuli = ctx.stimuli();
  ctx.manifest["inputs"]["templates"] = {{"path", ctx.opt.templates}, {"hash", file_hash(ctx.opt.templates)}};
  const auto templates = load_templates(ctx.opt.templates);
  const auto method = parse_direction_method(ctx.opt.method);
  const auto sets = collect_activation_sets(model, tok, stimuli, templates, ctx.workers);
  const DirectionSet ds = method == DirectionMethod::kPcaDiff ? extract_directions_pca(sets, "dishonesty", model.hash())
                                                              : extract_directions_massmean(sets, "dishonesty", model.hash());
  save_directions(ds, ctx.file("directions.rta"));
  ctx.outputs.push_back(direction_sidecar_path("directions.rta").string());
  ctx.manifest["samples"] = sets.n_samples();
  ctx.manifest["warnings"] = sets.warnings;
}

void cmd_cosine(Context& ctx) {
  const auto& ds = ctx.need_directions();
  const Tensor m = cosine_map(ds);
  const std::size_t L = ds.n_layers();
  CsvTable csv;
  csv.header.push_back("layer");
  HeatmapSpec hm;
  hm.title = "cosine similarity of per-layer directions";
  for (std::size_t j = 0; j < L; ++j) {
    csv.header.push_back(std::to_string(j));
    hm.col_labels.push_back(std::to_string(j));
  }
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<std::string> row{std::to_string(i)};
    std::vector<double> vals;
    for (std::size_t j = 0; j < L; ++j) {
      row.push_back(cell(m.at(i, j)));
      vals.push_back(m.at(i, j));
    }
    csv.rows.push_back(std::move(row));
    hm.matrix.push_back(std::move(vals));
    hm.row_labels.push_back(std::to_string(i));
  }
  write_csv(csv, ctx.file("cosine_map.csv"));
  emit_heatmap(hm, ctx.file("cosine_map.svg"));
}

void cmd_probe(Context& ctx) {
  const auto& ds = ctx.need_directions();
  const auto layers = collect_labeled_activations(ctx.need_model(), ctx.need_tokenizer(), ctx.stimuli(), ctx.workers);
  std::vector<std::size_t> which;
  if (ctx.opt.layer) {
    which.push_back(ctx.layer());
  } else {
    for (std::size_t l = 0; l < layers.size(); ++l) which.push_back(l);
  }
  json reports = json::array();
  CsvTable summary{{"layer", "threshold", "accuracy", "train_accuracy", "held_out_correct", "held_out_total"}, {}};
  CsvTable proj{{"layer", "id", "k", "label", "split", "value"}, {}};
  for (std::size_t l : which) {
    const auto rep = probe_split_eval(ds.dirs.at(l), layers.at(l), ThresholdRule{ctx.opt.threshold}, l);
    json pj = json::array();
    for (const auto& p : rep.projections) {
      pj.push_back({{"id", p.id}, {"k", p.k}, {"label", to_string(p.label)}, {"train", p.train}, {"value", p.value}});
      proj.rows.push_back({std::to_string(l), p.id, std::to_string(p.k), to_string(p.label),
                           p.train ? "train" : "held_out", cell(p.value)});
    }
    reports.push_back({{"layer", rep.layer},
                       {"threshold", rep.threshold},
                       {"accuracy", rep.accuracy},
                       {"train_accuracy", rep.train_accuracy},
                       {"held_out_correct", rep.held_out_correct},
                       {"held_out_total", rep.held_out_total},
                       {"positive_above", rep.positive_above},
                       {"projections", pj}});
    summary.rows.push_back({std::to_string(l), cell(rep.threshold), cell(rep.accuracy), cell(rep.train_accuracy),
                            std::to_string(rep.held_out_correct), std::to_string(rep.held_out_total)});
  }
  write_json(reports, ctx.file("probe_split.json"));
  write_csv(summary, ctx.file("probe_split.csv"));
  write_csv(proj, ctx.file("probe_projections.csv"));
}

void cmd_steer(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto& tok = ctx.need_tokenizer();
  const auto inj = ctx.injection();
  InjectionSpec base = inj;
  base.alpha = 0.0f;
  json rows = json::array();
  for (const auto& p : ctx.prompts()) {
    const auto plain = steer_generate(model, tok, p, base, ctx.opt.max_new);
    const auto steered = steer_generate(model, tok, p, inj, ctx.opt.max_new);
    rows.push_back({{"prompt", p},
                    {"base", plain.text},
                    {"steered", steered.text},
                    {"base_tokens", plain.tokens},
                    {"steered_tokens", steered.tokens},
                    {"diverged", plain.tokens != steered.tokens}});
  }
  write_json(rows, ctx.file("steer.json"));
}

void cmd_topk(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto& tok = ctx.need_tokenizer();
  const auto& ds = ctx.need_directions();
  std::vector<std::size_t> which;
  if (ctx.opt.layer) {
    which.push_back(ctx.layer());
  } else {
    for (std::size_t l = 0; l < ds.n_layers(); ++l) which.push_back(l);
  }
  CsvTable csv{{"layer", "rank", "id", "token", "prob", "logprob"}, {}};
  json j = json::array();
  for (std::size_t l : which) {
    const auto top = unembed_topk(model, ds.dirs.at(l), ctx.opt.k, ctx.opt.final_norm, &tok);
    json entries = json::array();
    for (std::size_t r = 0; r < top.size(); ++r) {
      const auto& e = top[r];
      csv.rows.push_back({std::to_string(l), std::to_string(r + 1), std::to_string(e.id), e.token, cell(e.prob),
                          cell(e.logprob)});
      entries.push_back({{"id", e.id}, {"token", tok.token_string(e.id)}, {"prob", e.prob}, {"logprob", e.logprob}});
    }
    j.push_back({{"layer", l}, {"final_norm", ctx.opt.final_norm}, {"top", entries}});
  }
  write_csv(csv, ctx.file("topk.csv"));
  write_json(j, ctx.file("topk.json"));
}

void cmd_logprob(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto& tok = ctx.need_tokenizer();
  const auto inj = ctx.injection();
  struct Item {
    std::string id, prompt, reference;
  };
  std::vector<Item> items;
  if (!ctx.opt.reference.empty()) {
    if (ctx.opt.prompts.size() != 1) throw UsageError("--reference needs exactly one --prompt");
    items.push_back({"custom", ctx.opt.prompts[0], ctx.opt.reference});
  } else {
    for (const auto& r : ctx.stimuli()) {
      if (r.label == Label::kDishonest || r.label == Label::kFalse) items.push_back({r.id, r.instruction, " " + r.response});
    }
  }
  if (items.empty()) throw DataError("no (prompt, reference) pairs to score");
  CsvTable csv{{"record", "position", "token_id", "token", "logprob_diff"}, {}};
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto p = tok.encode(items[i].prompt);
    const auto ref = tok.encode(items[i].reference);
    const auto diff = token_logprob_diff(model, p, ref, inj);
    HeatmapSpec hm;
    hm.title = items[i].id + ": log p(injected) - log p(base)";
    hm.row_labels = {items[i].id};
    hm.matrix.emplace_back(diff);
    for (std::size_t t = 0; t < diff.size(); ++t) {
      const std::string text = tok.token_bytes(ref[t]);
      hm.col_labels.push_back(text);
      csv.rows.push_back({items[i].id, std::to_string(t), std::to_string(ref[t]), text, cell(diff[t])});
    }
    emit_heatmap(hm, ctx.file("logprob_diff_" + std::to_string(i) + ".svg"));
  }
  write_csv(csv, ctx.file("logprob_diff.csv"));
}

void cmd_dla(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto inj = ctx.injection();
  const auto ids = ctx.prompt_ids();
  const auto& prompt = ids.front();
  const std::vector<float> alphas = ctx.opt.alphas.empty() ? default_alpha_grid() : ctx.opt.alphas;
  DlaTarget target;
  if (ctx.opt.target_layer) {
    if (*ctx.opt.target_layer >= ctx.need_directions().n_layers()) throw UsageError("--target-layer out of range");
    target.direction = ctx.need_directions().dirs[*ctx.opt.target_layer];
  } else if (ctx.opt.target_token) {
    target.token = *ctx.opt.target_token;
  } else {
    // Greedy next token of the run steered with the largest alpha on the grid.
    const float a = *std::max_element(alphas.begin(), alphas.end());
    InjectionSpec steer = inj;
    steer.alpha = a;
    const auto run = forward(model, prompt, steer.to_hooks(model.config()), RecordSet::none());
    target.token = argmax_token(run.logits.row(prompt.size() - 1));
  }
  const auto table = dla_sweep(model, prompt, inj.layer, inj.direction, alphas, target, inj.mask);

  CsvTable csv;
  csv.header.push_back("component");
  HeatmapSpec hm;
  hm.title = target.token ? "direct logit attribution, token " + std::to_string(*target.token)
                          : "direct attribution onto layer " + std::to_string(*ctx.opt.target_layer) + " direction";
  for (float a : alphas) {
    csv.header.push_back("alpha=" + cell(a));
    hm.col_labels.push_back(cell(a));
  }
  for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
    std::vector<std::string> row{table.row_labels[r]};
    for (double v : table.values[r]) row.push_back(cell(v));
    csv.rows.push_back(std::move(row));
  }
  std::vector<std::string> total{"total"};
  for (double v : table.frozen_total) total.push_back(cell(v));
  csv.rows.push_back(std::move(total));
  hm.row_labels = table.row_labels;
  hm.matrix = table.values;
  write_csv(csv, ctx.file("dla.csv"));
  emit_heatmap(hm, ctx.file("dla.svg"));
  json j = {{"alphas", alphas},
            {"rows", table.row_labels},
            {"values", table.values},
            {"frozen_total", table.frozen_total},
            {"actual_logit", table.actual_logit},
            {"frozen_scale", table.frozen_scale}};
  if (table.target_token) j["target_token"] = *table.target_token;
  if (ctx.opt.target_layer) j["target_layer"] = *ctx.opt.target_layer;
  write_json(j, ctx.file("dla.json"));
}

PatchMode parse_mode(const std::string& s) {
  if (s == "denoise") return PatchMode::kDenoise;
  if (s == "noise") return PatchMode::kNoise;
  throw UsageError("--mode must be denoise or noise, got '" + s + "'");
}

PositionMask parse_scope(const std::string& s) {
  if (s == "all") return PositionMask::all();
  if (s == "last") return PositionMask::last();
  throw UsageError("--scope must be all or last, got '" + s + "'");
}

void write_site_sweep(Context& ctx, const SiteSweep& sw, const std::string& stem) {
  CsvTable csv{{"site", "denoise", "noise"}, {}};
  json rows = json::array();
  for (std::size_t i = 0; i < sw.sites.size(); ++i) {
    csv.rows.push_back({sw.sites[i].to_string(), cell(sw.denoise[i]), cell(sw.noise[i])});
    rows.push_back({{"site", sw.sites[i].to_string()}, {"denoise", sw.denoise[i]}, {"noise", sw.noise[i]}});
  }
  write_csv(csv, ctx.file(stem + ".csv"));
  write_json({{"rows", rows}, {"failures", sw.failures}, {"averaging", kAveraging}}, ctx.file(stem + ".json"));
  ctx.manifest["failures"] = sw.failures;
}

// Any NaN (a site that failed on every prompt) is drawn as 0.
std::vector<std::vector<double>> finite_or_zero(std::vector<std::vector<double>> m) {
  for (auto& r : m) {
    for (auto& v : r) {
      if (!std::isfinite(v)) v = 0.0;
    }
  }
  return m;
}

void cmd_patch(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto inj = ctx.injection();
  const auto ids = ctx.prompt_ids();
  const PatchMode mode = parse_mode(ctx.opt.mode);
  const PositionMask scope = parse_scope(ctx.opt.scope);
  ctx.manifest["averaging"] = kAveraging;

  if (ctx.opt.sites.empty()) {
    const auto sw = patch_sweep_components(model, ids, inj, {scope, ctx.workers});
    write_site_sweep(ctx, sw, "patch_components");
    HeatmapSpec hm;
    hm.title = "KL recovery per component";
    hm.col_labels = {"denoise", "noise"};
    hm.row_labels = labels_of(sw.sites);
    for (std::size_t i = 0; i < sw.sites.size(); ++i) hm.matrix.push_back({sw.denoise[i], sw.noise[i]});
    hm.matrix = finite_or_zero(hm.matrix);
    emit_heatmap(hm, ctx.file("patch_components.svg"));
    return;
  }

  PatchSpec spec;
  spec.mode = mode;
  spec.scope = scope;
  for (const auto& s : ctx.opt.sites) spec.sites.push_back(ComponentId::parse(s));
  std::vector<PatchOutcome> outcomes(ids.size());
  parallel_for(ids.size(), ctx.workers, [&](std::size_t i) { outcomes[i] = run_patch(model, ids[i], inj, spec); });
  json per = json::array();
  double sum = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    sum += outcomes[i].score;
    per.push_back({{"prompt", i}, {"kl_recovery", outcomes[i].kl_recovery}, {"score", outcomes[i].score}});
  }
  json j = {{"sites", ctx.opt.sites},
            {"mode", to_string(mode)},
            {"scope", scope.to_string()},
            {"prompts", per},
            {"mean_score", sum / static_cast<double>(ids.size())},
            {"averaging", kAveraging}};
  write_json(j, ctx.file("patch.json"));
}

void cmd_patch_heads(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto inj = ctx.injection();
  const auto sw = patch_sweep_heads(model, ctx.prompt_ids(), inj, {parse_scope(ctx.opt.scope), ctx.workers});
  ctx.manifest["averaging"] = kAveraging;
  write_site_sweep(ctx, sw, "patch_heads");
  const auto& cfg = model.config();
  for (const char* which : {"denoise", "noise"}) {
    const auto& vals = std::string(which) == "denoise" ? sw.denoise : sw.noise;
    HeatmapSpec hm;
    hm.title = std::string("head patching (") + which + ")";
    for (std::size_t h = 0; h < cfg.n_heads; ++h) hm.col_labels.push_back("h" + std::to_string(h));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      hm.row_labels.push_back("layer " + std::to_string(l));
      hm.matrix.emplace_back(vals.begin() + static_cast<long>(l * cfg.n_heads),
                             vals.begin() + static_cast<long>((l + 1) * cfg.n_heads));
    }
    hm.matrix = finite_or_zero(hm.matrix);
    emit_heatmap(hm, ctx.file(std::string("patch_heads_") + which + ".svg"));
  }
}

void cmd_patch_pairs(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto inj = ctx.injection();
  const auto sw = patch_sweep_pairs(model, ctx.prompt_ids(), inj, {parse_scope(ctx.opt.scope), ctx.workers});
  ctx.manifest["averaging"] = kAveraging;
  ctx.manifest["failures"] = sw.failures;
  const auto labels = labels_of(sw.sites);
  json j = {{"sites", labels}, {"denoise", sw.denoise}, {"noise", sw.noise}, {"failures", sw.failures},
            {"averaging", kAveraging}};
  write_json(j, ctx.file("patch_pairs.json"));
  for (const char* which : {"denoise", "noise"}) {
    const auto& m = std::string(which) == "denoise" ? sw.denoise : sw.noise;
    CsvTable csv;
    csv.header.push_back("site");
    for (const auto& l : labels) csv.header.push_back(l);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::vector<std::string> row{labels[i]};
      for (double v : m[i]) row.push_back(cell(v));
      csv.rows.push_back(std::move(row));
    }
    write_csv(csv, ctx.file(std::string("patch_pairs_") + which + ".csv"));
    emit_heatmap({finite_or_zero(m), labels, labels, std::string("pairwise patching (") + which + ")"},
                 ctx.file(std::string("patch_pairs_") + which + ".svg"));
  }
}

void cmd_contrib(Context& ctx) {
  const auto& model = ctx.need_model();
  const auto inj = ctx.injection();
  const auto ids = ctx.prompt_ids();
  const auto table = direction_contributions(model, ids.front(), inj, ctx.need_directions());
  CsvTable csv;
  csv.header.push_back("component");
  HeatmapSpec hm;
  hm.title = "component contributions to each layer's direction";
  for (std::size_t t = 0; t < model.config().n_layers; ++t) {
    csv.header.push_back("layer " + std::to_string(t));
    hm.col_labels.push_back(std::to_string(t));
  }
  for (std::size_t r = 0; r < table.row_labels.size(); ++r) {
    std::vector<std::string> row{table.row_labels[r]};
    for (double v : table.values[r]) row.push_back(cell(v));
    csv.rows.push_back(std::move(row));
  }
  hm.row_labels = table.row_labels;
  hm.matrix = table.values;
  write_csv(csv, ctx.file("contrib.csv"));
  emit_heatmap(hm, ctx.file("contrib.svg"));
  write_json({{"rows", table.row_labels}, {"values", table.values}}, ctx.file("contrib.json"));
}

void cmd_selftest(Context& ctx) {
  const auto checks = run_selftest(ctx.opt.seed);
  bool ok = true;
  json j = json::array();
  for (const auto& c : checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : ": " + c.detail) << "\n";
    j.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    ok = ok && c.passed;
  }
  if (!ctx.opt.out.empty()) write_json(j, ctx.file("selftest.json"));
  if (!ok) throw DegenerateError("selftest failed");
}

// Turns "--config file.json" into flags placed right after the subcommand
// name, skipping keys also given on the command line.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!path) return rest;
  std::set<std::string> given;
  for (const auto& a : rest) {
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
  }
  json cfg;
  try {
    cfg = json::parse(read_file(*path));
  } catch (const json::parse_error& e) {
    throw ParseError::at_byte(e.byte, std::string("config file: ") + e.what());
  }
  if (!cfg.is_object()) throw DataError("config file must hold a JSON object");
  std::vector<std::string> extra;
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = key.substr(key.rfind('.') == std::string::npos ? 0 : key.rfind('.') + 1);
    if (given.count(flag)) continue;
    auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back("--" + flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        extra.push_back("--" + flag);
        extra.push_back(scalar(v));
      }
    } else {
      extra.push_back("--" + flag);
      extra.push_back(scalar(value));
    }
  }
  if (rest.empty()) return extra;
  rest.insert(rest.begin() + 1, extra.begin(), extra.end());
  return rest;
}

int exit_code(ErrorClass c) {
  switch (c) {
    case ErrorClass::kUsage: return 1;
    case ErrorClass::kNumeric: return 3;
    default: return 2;
  }
}

}  // namespace

std::vector<SelftestCheck> run_selftest(unsigned long long seed) {
  std::vector<SelftestCheck> out;
  auto check = [&](const std::string& name, const std::function<std::string()>& fn) {
    SelftestCheck c{name, false, ""};
    try {
      c.detail = fn();
      c.passed = c.detail.empty();
    } catch (const std::exception& e) {
      c.detail = std::string("threw: ") + e.what();
    }
    out.push_back(std::move(c));
  };

  const ModelConfig cfg = toy_config(96);
  const ModelBundle model = make_toy_model(cfg, seed);
  Rng rng(seed + 1);
  std::vector<TokenId> prompt;
  for (int i = 0; i < 12; ++i) prompt.push_back(static_cast<TokenId>(rng.below(cfg.vocab_size)));
  std::vector<float> dir(cfg.d_model);
  for (auto& x : dir) x = static_cast<float>(rng.normal());
  dir = normalized(dir);
  const InjectionSpec inj{dir, 1, 6.0f, PositionMask::all()};

  check("residual decomposition closes", [&] {
    const auto run = forward(model, prompt, inj.to_hooks(cfg));
    for (std::size_t p = 0; p < prompt.size(); ++p) {
      std::vector<double> sum(cfg.d_model, 0.0);
      for (const auto& t : decompose_residual(run.cache, cfg, p)) {
        for (std::size_t i = 0; i < cfg.d_model; ++i) sum[i] += t.vec[i];
      }
      for (std::size_t i = 0; i < cfg.d_model; ++i) {
        if (std::fabs(sum[i] - run.cache.final_resid.at(p, i)) > 1e-4) return std::string("mismatch at position ") + std::to_string(p);
      }
    }
    return std::string();
  });
  check("zero injection is a no-op", [&] {
    InjectionSpec zero = inj;
    zero.alpha = 0.0f;
    const auto a = forward(model, prompt);
    const auto b = forward(model, prompt, zero.to_hooks(cfg));
    return a.logits.bitwise_equal(b.logits) ? std::string() : std::string("logits differ");
  });
  check("kv cache matches recomputation", [&] {
    GenerateOptions o;
    o.max_new = 8;
    const auto a = generate(model, prompt, inj.to_hooks(cfg), o);
    o.use_kv_cache = false;
    const auto b = generate(model, prompt, inj.to_hooks(cfg), o);
    return a.tokens == b.tokens ? std::string() : std::string("token streams differ");
  });
  check("full denoise recovers the clean run", [&] {
    const double r = run_patch(model, prompt, inj, {full_patch_sites(cfg), PositionMask::all(), PatchMode::kDenoise}).kl_recovery;
    return std::fabs(r - 1.0) <= 1e-6 ? std::string() : "recovery " + format_number(r);
  });
  check("empty patch recovers nothing", [&] {
    const double r = run_patch(model, prompt, inj, {{}, PositionMask::all(), PatchMode::kDenoise}).kl_recovery;
    return r == 0.0 ? std::string() : "recovery " + format_number(r);
  });
  check("attribution columns sum to the frozen logit", [&] {
    const auto t = dla_sweep(model, prompt, inj.layer, dir, default_alpha_grid(), {TokenId{3}, {}});
    for (std::size_t a = 0; a < t.alphas.size(); ++a) {
      double s = 0.0;
      for (const auto& row : t.values) s += row[a];
      if (std::fabs(s - t.frozen_total[a]) > 1e-4) return "alpha " + format_number(t.alphas[a]);
    }
    return std::string();
  });
  check("archive round trip", [&] {
    const auto bytes = serialize_archive(model.weights());
    const auto back = parse_archive(bytes);
    for (const auto& [name, w] : model.weights()) {
      if (!back.tensor(name).bitwise_equal(w)) return "tensor " + name;
    }
    return std::string();
  });
  return out;
}

int cli_main(const std::vector<std::string>& raw_args) {
  Options opt;
  CLI::App app{"Residual-stream direction workbench"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  auto common = [&](CLI::App* sub, bool out_required = true) {
    auto* o = sub->add_option("--out", opt.out, "output directory");
    if (out_required) o->required();
    sub->add_option("--seed", opt.seed, "random seed");
    sub->add_option("--workers", opt.workers, "worker threads (default: REPMECH_WORKERS or 1)");
  };
  auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--model", opt.model, "tensor archive with the model weights")->required();
    sub->add_option("--model-config", opt.model_config, "model config JSON (default: config.json next to --model)");
    sub->add_option("--vocab", opt.vocab, "vocab.json (default: next to --model)");
    sub->add_option("--merges", opt.merges, "merges.txt (default: next to --model)");
  };
  auto inject_opts = [&](CLI::App* sub) {
    sub->add_option("--directions", opt.directions, "direction archive")->required();
    sub->add_option("--layer", opt.layer, "injection layer (default: L/2)");
    sub->add_option("--alpha", opt.alpha, "injection scale");
    sub->add_option("--positions", opt.positions, "all, last, or comma-separated positions");
  };
  auto prompt_opts = [&](CLI::App* sub) {
    sub->add_option("--prompt", opt.prompts, "prompt text (repeatable)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("--stimuli", opt.stimuli, "stimuli JSONL supplying default prompts");
  };

  std::map<CLI::App*, std::function<void(Context&)>> handlers;
  auto add = [&](const std::string& name, const std::string& help, std::function<void(Context&)> fn) {
    auto* sub = app.add_subcommand(name, help);
    handlers[sub] = std::move(fn);
    return sub;
  };

  auto* init = add("init-toy", "write a seeded toy model and a tokenizer trained on the stimuli", cmd_init_toy);
  common(init);
  init->add_option("--stimuli", opt.stimuli, "tokenizer training corpus");
  init->add_option("--n-layers", opt.n_layers, "number of layers");
  init->add_option("--num-merges", opt.num_merges, "BPE merges to learn");

  auto* ex = add("extract-directions", "collect paired activations and extract per-layer directions", cmd_extract);
  common(ex);
  model_opts(ex);
  ex->add_option("--stimuli", opt.stimuli, "stimuli JSONL");
  ex->add_option("--templates", opt.templates, "template pair JSON");
  ex->add_option("--method", opt.method, "pca-diff or mass-mean");

  auto* cos = add("cosine-map", "layer-by-layer cosine similarity of a direction set", cmd_cosine);
  common(cos);
  cos->add_option("--directions", opt.directions, "direction archive")->required();

  auto* probe = add("probe-split", "threshold probe accuracy of each layer's direction", cmd_probe);
  common(probe);
  model_opts(probe);
  probe->add_option("--directions", opt.directions, "direction archive")->required();
  probe->add_option("--stimuli", opt.stimuli, "labeled stimuli JSONL");
  probe->add_option("--layer", opt.layer, "single layer (default: all)");
  probe->add_option("--threshold", opt.threshold, "fixed threshold (default: midpoint of class means)");

  auto* steer = add("steer-generate", "greedy generation with and without injection", cmd_steer);
  common(steer);
  model_opts(steer);
  inject_opts(steer);
  prompt_opts(steer);
  steer->add_option("--max-new", opt.max_new, "tokens to generate");

  auto* topk = add("unembed-topk", "top tokens of each direction under the unembedding", cmd_topk);
  common(topk);
  model_opts(topk);
  topk->add_option("--directions", opt.directions, "direction archive")->required();
  topk->add_option("--layer", opt.layer, "single layer (default: all)");
  topk->add_option("--k", opt.k, "entries per layer");
  topk->add_flag("--final-norm", opt.final_norm, "apply the final norm before unembedding");

  auto* lp = add("logprob-heatmap", "per-token log-prob change from the injection", cmd_logprob);
  common(lp);
  model_opts(lp);
  inject_opts(lp);
  prompt_opts(lp);
  lp->add_option("--reference", opt.reference, "reference continuation for a single --prompt");

  auto* dla = add("dla-sweep", "direct attribution of each component across an alpha grid", cmd_dla);
  common(dla);
  model_opts(dla);
  inject_opts(dla);
  prompt_opts(dla);
  dla->add_option("--alphas", opt.alphas, "alpha grid")->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  dla->add_option("--target-token", opt.target_token, "target token id (default: steered greedy token)");
  dla->add_option("--target-layer", opt.target_layer, "attribute onto this layer's direction instead of a token");

  auto* patch = add("patch", "KL-recovery patching of given sites, or a sweep over components", cmd_patch);
  common(patch);
  model_opts(patch);
  inject_opts(patch);
  prompt_opts(patch);
  patch->add_option("--sites", opt.sites, "sites such as mlp.1,attn.0 (default: sweep all components)")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  patch->add_option("--mode", opt.mode, "denoise or noise");
  patch->add_option("--scope", opt.scope, "all or last");

  auto* heads = add("patch-heads", "KL-recovery patching sweep over attention heads", cmd_patch_heads);
  common(heads);
  model_opts(heads);
  inject_opts(heads);
  prompt_opts(heads);
  heads->add_option("--scope", opt.scope, "all or last");

  auto* pairs = add("patch-pairs", "KL-recovery patching over pairs of attention/MLP outputs", cmd_patch_pairs);
  common(pairs);
  model_opts(pairs);
  inject_opts(pairs);
  prompt_opts(pairs);
  pairs->add_option("--scope", opt.scope, "all or last");

  auto* contrib = add("direction-contrib", "component outputs projected on every layer's direction", cmd_contrib);
  common(contrib);
  model_opts(contrib);
  inject_opts(contrib);
  prompt_opts(contrib);

  auto* self = add("selftest", "run the invariant suite on a seeded toy model", cmd_selftest);
  common(self, false);

  try {
    auto args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.error_class());
  }

  CLI::App* sub = app.get_subcommands().front();
  Context ctx;
  ctx.opt = opt;
  ctx.command = sub->get_name();
  try {
    ctx.workers = opt.workers ? opt.workers : default_workers();
    if (!opt.out.empty()) {
      ctx.out = opt.out;
      fs::create_directories(ctx.out);
    }
    // Everything needed to re-run, minus the output directory and worker
    // count, which do not affect results.
    json args = json::object();
    for (const CLI::Option* o : sub->get_options()) {
      const std::string name = o->get_name(false, true);
      if (o->count() == 0 || name == "--out" || name == "--workers" || name == "--help") continue;
      const auto& res = o->results();
      args[name.substr(2)] = res.size() == 1 ? json(res[0]) : json(res);
    }
    ctx.manifest = {{"command", ctx.command}, {"args", args}, {"seed", opt.seed}};
    handlers.at(sub)(ctx);
    if (!ctx.out.empty()) ctx.write_manifest();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.error_class());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cli_main(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args);
}

}  // namespace repmech
