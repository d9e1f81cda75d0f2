#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "persuasion/auxiliary.hpp"
#include "persuasion/conversation.hpp"
#include "persuasion/eval.hpp"
#include "persuasion/rational.hpp"
#include "persuasion/util.hpp"

namespace persuasion {

struct FlipFeatures {
  double ans_entropy = 0.0;
  double logp_orig = 0.0;
  double logp_alt = 0.0;
  std::optional<double> conf_orig;
  std::optional<double> conf_alt;
  int alt_correct = 0;
  int label_flipped = 0;

  friend bool operator==(const FlipFeatures&, const FlipFeatures&) = default;
};

inline const std::vector<std::string>& flip_feature_names() {
  static const std::vector<std::string> names = {"ans_entropy", "logp_orig", "logp_alt",
                                                 "conf_orig",   "conf_alt",  "alt_correct"};
  return names;
}

inline std::optional<double> feature_value(const FlipFeatures& f, const std::string& name) {
  if (name == "ans_entropy") return f.ans_entropy;
  if (name == "logp_orig") return f.logp_orig;
  if (name == "logp_alt") return f.logp_alt;
  if (name == "conf_orig") return f.conf_orig;
  if (name == "conf_alt") return f.conf_alt;
  if (name == "alt_correct") return f.alt_correct;
  throw ConfigError("unknown flip feature " + name);
}

// Target answered A, its partner answered B != A, and the target's next
// (generated) answer is exactly A or exactly B.
struct FlipTriple {
  std::string run_id;
  std::string probe_id;
  std::string question;
  AnswerKind answer_kind = AnswerKind::free_text;
  std::string answer_orig;  // A
  std::string answer_alt;   // B
  std::string answer_final;
  bool flipped = false;
  bool alt_correct = false;
  std::string orig_text;  // the target's turn stating A
  std::string alt_text;   // the partner's turn stating B
  // The dialogue up to and including the partner's turn, from the target's side.
  std::vector<Utterance> history;
  int target = 0;
};

namespace detail {

inline std::string stated_answer(const TranscriptRecord& r) {
  if (r.answer && r.answer->is_value()) return r.answer->raw();
  return r.resolved.value_or("");
}

}  // namespace detail

/// Scans every window of three consecutive turns X, Y, X' (X and X' by the
/// same speaker, Y by the other, X' generated) and keeps those where the
/// resolved answers read A, B, A (kept) or A, B, B (flipped) with A != B.
inline std::vector<FlipTriple> select_triples(const std::vector<TranscriptRecord>& records) {
  std::map<std::pair<std::string, std::string>, std::vector<const TranscriptRecord*>> dialogues;
  for (const auto& r : records) {
    if (!r.invalid) dialogues[{r.run_id, r.probe_id}].push_back(&r);
  }
  std::vector<FlipTriple> out;
  for (auto& [key, recs] : dialogues) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const auto* a, const auto* b) { return a->turn_index < b->turn_index; });
    for (std::size_t i = 0; i + 2 < recs.size(); ++i) {
      const auto& x = *recs[i];
      const auto& y = *recs[i + 1];
      const auto& z = *recs[i + 2];
      if (x.speaker != z.speaker || x.speaker == y.speaker || !z.generated) continue;
      if (!x.resolved || !y.resolved || !z.resolved) continue;
      if (*x.resolved == *y.resolved) continue;
      if (*z.resolved != *x.resolved && *z.resolved != *y.resolved) continue;
      FlipTriple t;
      t.run_id = key.first;
      t.probe_id = key.second;
      t.question = z.extra.value("question", "");
      t.answer_kind = z.extra.value("answer_kind", AnswerKind::free_text);
      t.answer_orig = detail::stated_answer(x);
      t.answer_alt = detail::stated_answer(y);
      t.answer_final = *z.resolved;
      t.flipped = *z.resolved == *y.resolved;
      t.alt_correct = y.correct.value_or(false);
      t.orig_text = x.text;
      t.alt_text = y.text;
      for (std::size_t k = 0; k <= i + 1; ++k) {
        t.history.push_back({recs[k]->speaker == z.speaker ? 0 : 1, recs[k]->text});
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

/// Shannon entropy (nats) of the empirical distribution given by bin counts.
inline double entropy_of_counts(const std::vector<std::size_t>& counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

/// Samples the model `n_samples` times (seeds seed, seed+1, ...) and returns
/// the entropy of the answers binned by normalized equality. Turns with no
/// extractable answer share a bin per sentinel kind.
inline double answer_entropy(const AgentSpec& model, const AgentSpec& extractor,
                             const Question& question, int n_samples = 20,
                             double temperature = 1.0, std::uint64_t seed = 0) {
  if (!model.get().capabilities().sampled_generation) throw CapabilityError("sampled_generation");
  if (n_samples < 1) throw PreconditionError("answer_entropy: n_samples must be >= 1");
  const auto messages =
      build_messages(model.system_prompt.empty() ? prompts::role_system_prompt(Strategy::standard)
                                                 : model.system_prompt,
                     prompts::question_line(question.text), {}, 0);
  std::map<std::string, std::size_t> bins;
  for (int i = 0; i < n_samples; ++i) {
    Sampling s = model.sampling;
    s.temperature = temperature;
    s.seed = seed + static_cast<std::uint64_t>(i);
    const auto text = generate(model.get(), messages, s);
    const auto a = extract_answer(extractor, question.text, text).answer;
    const std::string bin = a.is_value() ? "=" + normalize_answer(a.raw(), question.answer_kind)
                                         : "#" + nlohmann::json(a.kind()).get<std::string>();
    ++bins[bin];
  }
  std::vector<std::size_t> counts;
  for (const auto& [k, c] : bins) counts.push_back(c);
  return entropy_of_counts(counts);
}

struct FeatureOptions {
  int entropy_samples = 20;
  double entropy_temperature = 1.0;
  std::uint64_t seed = 0;
  std::optional<AgentSpec> confidence_judge;
  int parallelism = 1;
};

/// Computes the feature row of every triple against `model` (the target's
/// base model), which must support forced decoding and sampling.
inline std::vector<FlipFeatures> compute_features(const std::vector<FlipTriple>& triples,
                                                  const AgentSpec& model, const AgentSpec& extractor,
                                                  const FeatureOptions& opts) {
  if (!model.get().capabilities().token_logprobs) throw CapabilityError("token_logprobs");
  if (!model.get().capabilities().sampled_generation) throw CapabilityError("sampled_generation");
  std::vector<FlipFeatures> rows(triples.size());
  parallel_for(triples.size(), opts.parallelism, [&](std::size_t i) {
    const auto& t = triples[i];
    const Question q{t.probe_id, t.question, {t.answer_orig}, t.answer_kind};
    FlipFeatures f;
    f.ans_entropy = answer_entropy(model, extractor, q, opts.entropy_samples,
                                   opts.entropy_temperature, opts.seed);
    const auto context = build_messages(
        model.system_prompt.empty() ? prompts::role_system_prompt(Strategy::standard) : model.system_prompt,
        prompts::question_line(t.question), t.history, 0);
    f.logp_orig = token_logprob_of_answer(model.get(), context, t.answer_orig);
    f.logp_alt = token_logprob_of_answer(model.get(), context, t.answer_alt);
    if (opts.confidence_judge) {
      f.conf_orig = perceived_confidence(*opts.confidence_judge, t.orig_text);
      f.conf_alt = perceived_confidence(*opts.confidence_judge, t.alt_text);
    }
    f.alt_correct = t.alt_correct ? 1 : 0;
    f.label_flipped = t.flipped ? 1 : 0;
    rows[i] = f;
  });
  return rows;
}

// ---- features CSV ----

inline std::string features_csv(const std::vector<FlipFeatures>& rows) {
  std::string out = "ans_entropy,logp_orig,logp_alt,conf_orig,conf_alt,alt_correct,label_flipped\n";
  auto num = [](double v) {
    // Shortest text that reads back to the same double.
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& r : rows) {
    out += num(r.ans_entropy) + "," + num(r.logp_orig) + "," + num(r.logp_alt) + "," +
           opt(r.conf_orig) + "," + opt(r.conf_alt) + "," + std::to_string(r.alt_correct) + "," +
           std::to_string(r.label_flipped) + "\n";
  }
  return out;
}

inline std::vector<FlipFeatures> parse_features_csv(const std::string& text) {
  const auto lines = split_lines(text);
  if (lines.empty() || trim(lines[0]) != "ans_entropy,logp_orig,logp_alt,conf_orig,conf_alt,alt_correct,label_flipped") {
    throw ConfigError("features CSV: unexpected header");
  }
  std::vector<FlipFeatures> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = trim(lines[i]);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss{std::string(line)};
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 7) throw ConfigError("features CSV line " + std::to_string(i + 1) + ": expected 7 cells");
    auto num = [&](const std::string& c) {
      std::size_t used = 0;
      const double v = std::stod(c, &used);
      if (used != c.size()) throw ConfigError("features CSV: bad number " + c);
      return v;
    };
    FlipFeatures f;
    f.ans_entropy = num(cells[0]);
    f.logp_orig = num(cells[1]);
    f.logp_alt = num(cells[2]);
    if (!cells[3].empty()) f.conf_orig = num(cells[3]);
    if (!cells[4].empty()) f.conf_alt = num(cells[4]);
    f.alt_correct = static_cast<int>(num(cells[5]));
    f.label_flipped = static_cast<int>(num(cells[6]));
    rows.push_back(f);
  }
  return rows;
}

// ---- logistic regression ----

enum class MissingPolicy { drop_row, impute_mean };

struct FitOptions {
  int folds = 10;
  std::uint64_t seed = 0;
  double l2 = 0.0;  // ridge penalty on standardized weights (not the intercept)
  std::vector<std::string> features = flip_feature_names();
  MissingPolicy missing = MissingPolicy::drop_row;
  double tolerance = 1e-8;
  int max_iterations = 100;
  double alpha = 0.05;
};

struct RegressionModel {
  std::vector<std::string> features;
  std::vector<double> weights;  // on standardized inputs
  double intercept = 0.0;
  std::vector<double> std_errors;
  std::vector<double> p_values;
  std::vector<bool> significant;
  Rational cv_accuracy;
  std::size_t rows_used = 0;
  std::size_t rows_dropped = 0;
  bool converged = true;
  std::vector<double> means;   // standardization of the full-data fit
  std::vector<double> scales;

  double predict_probability(const std::vector<double>& raw) const {
    double z = intercept;
    for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * (raw[j] - means[j]) / scales[j];
    return 1.0 / (1.0 + std::exp(-z));
  }
};

namespace detail {

struct LogitFit {
  Eigen::VectorXd beta;  // [intercept, weights...]
  Eigen::MatrixXd covariance;
  bool converged = false;
};

inline double log_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             const Eigen::VectorXd& beta, double l2) {
  const Eigen::VectorXd z = X * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    // log(1 + e^z) computed stably
    const double soft = z[i] > 0 ? z[i] + std::log1p(std::exp(-z[i])) : std::log1p(std::exp(z[i]));
    ll += y[i] * z[i] - soft;
  }
  return ll - 0.5 * l2 * beta.tail(beta.size() - 1).squaredNorm();
}

inline Eigen::VectorXd probabilities(const Eigen::MatrixXd& X, const Eigen::VectorXd& beta) {
  return (1.0 + (-(X * beta)).array().exp()).inverse().matrix();
}

// Newton-Raphson (IRLS) with step halving. X carries a leading column of ones.
inline LogitFit fit_logit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const FitOptions& opts) {
  const auto p = X.cols();
  Eigen::MatrixXd penalty = Eigen::MatrixXd::Identity(p, p) * opts.l2;
  penalty(0, 0) = 0.0;
  LogitFit fit;
  fit.beta = Eigen::VectorXd::Zero(p);
  double ll = log_likelihood(X, y, fit.beta, opts.l2);
  Eigen::MatrixXd hessian;
  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    const Eigen::VectorXd mu = probabilities(X, fit.beta);
    const Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
    const Eigen::VectorXd grad = X.transpose() * (y - mu) - penalty * fit.beta;
    hessian = X.transpose() * w.asDiagonal() * X + penalty;
    if (grad.norm() < opts.tolerance) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd step = hessian.ldlt().solve(grad);
    double t = 1.0;
    Eigen::VectorXd next = fit.beta + step;
    double next_ll = log_likelihood(X, y, next, opts.l2);
    while (next_ll < ll && t > 1e-10) {
      t *= 0.5;
      next = fit.beta + t * step;
      next_ll = log_likelihood(X, y, next, opts.l2);
    }
    if (next_ll < ll) break;
    fit.beta = next;
    ll = next_ll;
  }
  if (!fit.converged) {
    const Eigen::VectorXd mu = probabilities(X, fit.beta);
    const Eigen::VectorXd grad = X.transpose() * (y - mu) - penalty * fit.beta;
    fit.converged = grad.norm() < opts.tolerance;
    const Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
    hessian = X.transpose() * w.asDiagonal() * X + penalty;
  }
  fit.covariance = hessian.completeOrthogonalDecomposition().pseudoInverse();
  return fit;
}

struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer of(const std::vector<std::vector<double>>& rows, const std::vector<std::size_t>& idx,
                         std::size_t dims) {
    Standardizer s;
    s.mean.assign(dims, 0.0);
    s.scale.assign(dims, 1.0);
    if (idx.empty()) return s;
    for (std::size_t j = 0; j < dims; ++j) {
      double m = 0.0;
      for (auto i : idx) m += rows[i][j];
      m /= static_cast<double>(idx.size());
      double v = 0.0;
      for (auto i : idx) v += (rows[i][j] - m) * (rows[i][j] - m);
      v /= static_cast<double>(idx.size());
      s.mean[j] = m;
      s.scale[j] = v > 0.0 ? std::sqrt(v) : 1.0;
    }
    return s;
  }

  Eigen::MatrixXd design(const std::vector<std::vector<double>>& rows,
                         const std::vector<std::size_t>& idx) const {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(mean.size() + 1));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      X(static_cast<Eigen::Index>(r), 0) = 1.0;
      for (std::size_t j = 0; j < mean.size(); ++j) {
        X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j + 1)) =
            (rows[idx[r]][j] - mean[j]) / scale[j];
      }
    }
    return X;
  }
};

}  // namespace detail

/// Logistic regression of label_flipped on the selected features, with
/// per-fold standardization, seeded k-fold cross-validation (pooled held-out
/// accuracy) and Wald p-values from a final fit on all usable rows.
inline RegressionModel fit_logreg(const std::vector<FlipFeatures>& input, const FitOptions& opts = {}) {
  if (opts.folds < 2) throw PreconditionError("fit_logreg: need at least 2 folds");
  if (opts.features.empty()) throw PreconditionError("fit_logreg: no features selected");
  const std::size_t dims = opts.features.size();

  // Impute means are taken over rows where the feature is present.
  std::vector<double> impute(dims, 0.0);
  if (opts.missing == MissingPolicy::impute_mean) {
    for (std::size_t j = 0; j < dims; ++j) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& r : input) {
        if (auto v = feature_value(r, opts.features[j])) {
          sum += *v;
          ++n;
        }
      }
      impute[j] = n ? sum / static_cast<double>(n) : 0.0;
    }
  }
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::size_t dropped = 0;
  for (const auto& r : input) {
    std::vector<double> x(dims);
    bool ok = true;
    for (std::size_t j = 0; j < dims; ++j) {
      const auto v = feature_value(r, opts.features[j]);
      if (!v) {
        if (opts.missing == MissingPolicy::drop_row) {
          ok = false;
          break;
        }
        x[j] = impute[j];
      } else {
        x[j] = *v;
      }
    }
    if (!ok) {
      ++dropped;
      continue;
    }
    rows.push_back(std::move(x));
    labels.push_back(r.label_flipped ? 1.0 : 0.0);
  }
  const std::size_t n = rows.size();
  if (n < static_cast<std::size_t>(opts.folds)) {
    throw PreconditionError("fit_logreg: " + std::to_string(n) + " usable rows, fewer than " +
                            std::to_string(opts.folds) + " folds");
  }
  const double positives = std::accumulate(labels.begin(), labels.end(), 0.0);
  if (positives == 0.0 || positives == static_cast<double>(n)) {
    throw DegenerateFitError("fit_logreg: all labels are " + std::string(positives == 0.0 ? "0" : "1"));
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SeededRng rng(opts.seed);
  rng.shuffle(order);
  std::vector<int> fold_of(n);
  for (std::size_t k = 0; k < n; ++k) fold_of[order[k]] = static_cast<int>(k % static_cast<std::size_t>(opts.folds));

  std::int64_t hits = 0;
  for (int f = 0; f < opts.folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test : train).push_back(i);
    double train_pos = 0.0;
    for (auto i : train) train_pos += labels[i];
    std::vector<int> predicted(test.size());
    if (train_pos == 0.0 || train_pos == static_cast<double>(train.size())) {
      // A single-class training fold can only predict that class.
      for (auto& p : predicted) p = train_pos > 0.0 ? 1 : 0;
    } else {
      const auto std_ = detail::Standardizer::of(rows, train, dims);
      Eigen::VectorXd y(static_cast<Eigen::Index>(train.size()));
      for (std::size_t r = 0; r < train.size(); ++r) y[static_cast<Eigen::Index>(r)] = labels[train[r]];
      const auto fit = detail::fit_logit(std_.design(rows, train), y, opts);
      const Eigen::VectorXd z = std_.design(rows, test) * fit.beta;
      for (std::size_t r = 0; r < test.size(); ++r) predicted[r] = z[static_cast<Eigen::Index>(r)] >= 0.0 ? 1 : 0;
    }
    for (std::size_t r = 0; r < test.size(); ++r) hits += predicted[r] == static_cast<int>(labels[test[r]]);
  }

  const auto std_all = detail::Standardizer::of(rows, order, dims);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) y[static_cast<Eigen::Index>(i)] = labels[i];
  const auto fit = detail::fit_logit(std_all.design(rows, all), y, opts);
  if (!fit.converged) warn("fit_logreg: did not reach the gradient tolerance (separable data? try l2)");

  RegressionModel m;
  m.features = opts.features;
  m.intercept = fit.beta[0];
  for (std::size_t j = 0; j < dims; ++j) {
    const auto k = static_cast<Eigen::Index>(j + 1);
    const double w = fit.beta[k];
    const double se = std::sqrt(std::max(fit.covariance(k, k), 0.0));
    const double p = se > 0.0 ? std::erfc(std::fabs(w / se) / std::sqrt(2.0)) : 1.0;
    m.weights.push_back(w);
    m.std_errors.push_back(se);
    m.p_values.push_back(p);
    m.significant.push_back(p < opts.alpha);
  }
  m.cv_accuracy = Rational(hits, static_cast<std::int64_t>(n));
  m.rows_used = n;
  m.rows_dropped = dropped;
  m.converged = fit.converged;
  m.means = std_all.mean;
  m.scales = std_all.scale;
  return m;
}

inline nlohmann::json regression_report(const RegressionModel& m, const FitOptions& opts) {
  nlohmann::json weights = nlohmann::json::object(), p_values = nlohmann::json::object(),
                 significant = nlohmann::json::object(), std_errors = nlohmann::json::object();
  for (std::size_t j = 0; j < m.features.size(); ++j) {
    weights[m.features[j]] = m.weights[j];
    p_values[m.features[j]] = m.p_values[j];
    significant[m.features[j]] = static_cast<bool>(m.significant[j]);
    std_errors[m.features[j]] = m.std_errors[j];
  }
  return {{"features", m.features},
          {"weights", weights},
          {"intercept", m.intercept},
          {"std_errors", std_errors},
          {"p_values", p_values},
          {"significant", significant},
          {"alpha", opts.alpha},
          {"cv_accuracy", to_json_value(m.cv_accuracy)},
          {"folds", opts.folds},
          {"seed", opts.seed},
          {"l2", opts.l2},
          {"rows_used", m.rows_used},
          {"rows_dropped", m.rows_dropped},
          {"converged", m.converged},
          {"label", "label_flipped = 1 when the target adopts the partner's answer"}};
}

}  // namespace persuasion
